use ticketlab::harness::{load_idx, make_blobs, BlobSpec};
use ticketlab::Error;

fn write_idx(dir: &std::path::Path, pixels: &[u8], labels: &[u8], n: u32) -> (std::path::PathBuf, std::path::PathBuf) {
    let mut img = vec![0, 0, 8, 3];
    for d in [n, 2, 2] {
        img.extend_from_slice(&d.to_be_bytes());
    }
    img.extend_from_slice(pixels);
    let mut lab = vec![0, 0, 8, 1];
    lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    let (ip, lp) = (dir.join("images.idx"), dir.join("labels.idx"));
    std::fs::write(&ip, img).unwrap();
    std::fs::write(&lp, lab).unwrap();
    (ip, lp)
}

#[test]
fn idx_files_load_with_limit_and_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let pixels: Vec<u8> = (0..12).map(|i| (i * 20) as u8).collect();
    let (ip, lp) = write_idx(dir.path(), &pixels, &[2, 0, 1], 3);
    let (all, prov) = load_idx(&ip, &lp, 3, None).unwrap();
    assert_eq!(all.len(), 3);
    assert_eq!(all.dim(), 4);
    assert_eq!(all.labels(), &[2, 0, 1]);
    assert_eq!(all.inputs().row(2), &[160.0 / 255.0, 180.0 / 255.0, 200.0 / 255.0, 220.0 / 255.0]);
    assert!(prov.starts_with("idx:"));
    let (two, prov2) = load_idx(&ip, &lp, 3, Some(2)).unwrap();
    assert_eq!(two.labels(), &[2, 0]);
    assert_eq!(prov, prov2);
}

#[test]
fn idx_count_mismatch_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = write_idx(dir.path(), &[0; 8], &[0, 1, 1], 2);
    let err = load_idx(&ip, &lp, 2, None).unwrap_err();
    assert!(matches!(err, Error::Data { offset: 4, .. }), "{err:?}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn blob_class_means_sit_on_their_centres() {
    let spec = BlobSpec { classes: 5, per_class: 400, dim: 3, std: 0.7, seed: 11, ..Default::default() };
    let d = make_blobs(&spec).unwrap();
    let x = d.train.inputs();
    for c in 0..spec.classes {
        let rows: Vec<usize> = (0..d.train.len()).filter(|&i| d.train.labels()[i] == c).collect();
        let centre = spec.center(c);
        for (k, &mu) in centre.iter().enumerate() {
            let mean = rows.iter().map(|&i| x.row(i)[k]).sum::<f64>() / rows.len() as f64;
            let se = spec.std / (rows.len() as f64).sqrt();
            assert!((mean - mu).abs() < 4.0 * se, "class {c} dim {k}: {mean} vs {mu}");
        }
    }
}

#[test]
fn well_separated_blobs_are_nearest_centre_separable() {
    let spec = BlobSpec { classes: 4, per_class: 100, separation: 12.0, std: 0.5, ..Default::default() };
    let d = make_blobs(&spec).unwrap();
    let centres: Vec<Vec<f64>> = (0..spec.classes).map(|c| spec.center(c)).collect();
    for batch in [&d.train, &d.test] {
        for i in 0..batch.len() {
            let row = batch.inputs().row(i);
            let dist = |c: &Vec<f64>| c.iter().zip(row).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let best = (0..spec.classes).min_by(|&a, &b| dist(&centres[a]).total_cmp(&dist(&centres[b]))).unwrap();
            assert_eq!(best, batch.labels()[i]);
        }
    }
}
