use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use super::runlog::{read_jsonl, Record};
use super::RUNLOG_FILE;
use crate::error::Result;

/// One CSV table for records of a single event: `job, seed, round`, then
/// sorted label columns, then sorted metric columns. Missing cells are empty.
pub fn write_event_csv<W: Write>(out: W, records: &[&Record]) -> Result<()> {
    let labels: BTreeSet<&str> = records.iter().flat_map(|r| r.labels.keys().map(String::as_str)).collect();
    let metrics: BTreeSet<&str> = records.iter().flat_map(|r| r.metrics.keys().map(String::as_str)).collect();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["job", "seed", "round"];
    header.extend(&labels);
    header.extend(&metrics);
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.job.clone(),
            r.seed.to_string(),
            r.round.map(|x| x.to_string()).unwrap_or_default(),
        ];
        row.extend(labels.iter().map(|k| r.labels.get(*k).cloned().unwrap_or_default()));
        row.extend(metrics.iter().map(|k| r.metrics.get(*k).map(|v| v.to_string()).unwrap_or_default()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Turns a run log (a run directory or a `.jsonl` file) into one CSV per
/// event, plus `kl_risk.csv` pairing each bound with its ticket's test error.
pub fn report(input: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let path = if input.is_dir() { input.join(RUNLOG_FILE) } else { input.to_path_buf() };
    let records = read_jsonl(&path)?;
    std::fs::create_dir_all(out_dir)?;
    let mut by_event: BTreeMap<&str, Vec<&Record>> = BTreeMap::new();
    for r in &records {
        by_event.entry(r.event.as_str()).or_default().push(r);
    }
    let mut written = Vec::new();
    for (event, rows) in &by_event {
        let p = out_dir.join(format!("{event}.csv"));
        write_event_csv(std::fs::File::create(&p)?, rows)?;
        written.push(p);
    }
    if let (Some(bounds), Some(tickets)) = (by_event.get("bound"), by_event.get("ticket")) {
        let joined: Vec<Record> = bounds
            .iter()
            .filter_map(|b| {
                let t = tickets.iter().find(|t| t.job == b.job)?;
                let mut r = (*b).clone();
                r.event = "kl_risk".into();
                for k in ["test_error", "test_accuracy", "distance_init", "sparsity"] {
                    if let Some(v) = t.metrics.get(k) {
                        r.metrics.insert(format!("ticket_{k}"), *v);
                    }
                }
                Some(r)
            })
            .collect();
        let p = out_dir.join("kl_risk.csv");
        write_event_csv(std::fs::File::create(&p)?, &joined.iter().collect::<Vec<_>>())?;
        written.push(p);
    }
    Ok(written)
}
