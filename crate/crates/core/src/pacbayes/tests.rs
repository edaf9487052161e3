use std::sync::Arc;

use super::*;
use crate::imp::{TicketArtifact, TicketKind};
use crate::masking::PruningMask;
use crate::nn::{
    Activation, Batch, Layout, Mlp, MlpSpec, Model, ModelOutput, Quadratic, Scalar, SegmentKind, Tape, Tensor, Var,
};
use proptest::prelude::*;

fn weights(v: Vec<f64>) -> ParamVector {
    let l = Layout::packed([("w", vec![v.len()], SegmentKind::Weight)]).unwrap();
    ParamVector::new(Arc::new(l), v).unwrap()
}

fn normal_pdf(x: f64, mu: f64, s: f64) -> f64 {
    (-(x - mu).powi(2) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
}

/// Composite Simpson rule on `[a, b]` with `n` (even) panels.
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

/// Quadrature oracle for the 1-d spike-and-slab KL: the continuous parts are
/// integrated numerically, the atoms at zero contribute exactly.
fn spike_slab_oracle(lq: f64, mq: f64, sq: f64, lp: f64, mp: f64, sp: f64) -> f64 {
    let continuous = simpson(
        |x| {
            let q = lq * normal_pdf(x, mq, sq);
            let p = lp * normal_pdf(x, mp, sp);
            if q == 0.0 {
                0.0
            } else {
                q * (q / p).ln()
            }
        },
        mq - 14.0 * sq,
        mq + 14.0 * sq,
        40_000,
    );
    let atom = if lq == 1.0 { 0.0 } else { (1.0 - lq) * ((1.0 - lq) / (1.0 - lp)).ln() };
    continuous + atom
}

#[test]
fn kl_single_unmasked_weight() {
    let post = SpikeSlabPosterior::new(&weights(vec![0.3]), vec![0.1], PruningMask::ones(1)).unwrap();
    let prior = SpikeSlabPrior::new(weights(vec![0.3]), vec![0.1], 0.1).unwrap();
    let kl = kl_spike_slab(&post, &prior, Scope::Prunable).unwrap();
    assert_eq!(kl.gauss, 0.0);
    assert!((kl.bern - 2.302585).abs() < 1e-6);
}

#[test]
fn kl_single_masked_weight() {
    let mask = PruningMask::from_parts(vec![false], vec![true]).unwrap();
    let post = SpikeSlabPosterior::new(&weights(vec![0.3]), vec![0.1], mask).unwrap();
    assert_eq!(post.mean.values(), &[0.0]);
    let prior = SpikeSlabPrior::new(weights(vec![0.7]), vec![0.1], 0.1).unwrap();
    let kl = kl_spike_slab(&post, &prior, Scope::Prunable).unwrap();
    assert_eq!(kl.gauss, 0.0);
    assert!((kl.bern - 0.105361).abs() < 1e-6);
}

#[test]
fn spike_slab_1d_matches_quadrature() {
    let (lq, mq, sq, lp, mp, sp) = (0.7, 0.4, 0.2, 0.3, -0.1, 0.5);
    let closed = spike_slab_kl_1d(lq, mq, sq, lp, mp, sp).unwrap();
    let oracle = spike_slab_oracle(lq, mq, sq, lp, mp, sp);
    assert!((closed - oracle).abs() < 1e-6, "{closed} vs {oracle}");
}

#[test]
fn degenerate_slab_probabilities_reduce_to_mask_terms() {
    let g = gauss_kl_1d(0.4, 0.2, -0.1, 0.5);
    assert!((spike_slab_kl_1d(1.0, 0.4, 0.2, 0.1, -0.1, 0.5).unwrap() - (g - 0.1f64.ln())).abs() < 1e-12);
    assert!((spike_slab_kl_1d(0.0, 0.4, 0.2, 0.1, -0.1, 0.5).unwrap() + 0.9f64.ln()).abs() < 1e-12);
}

#[test]
fn gaussian_kl_equal_variance_is_scaled_norm() {
    let theta = weights(vec![0.5, -1.0, 2.0]);
    let post = GaussianPosterior::new(theta.clone(), vec![0.3; 3], 0.3).unwrap();
    let expect = theta.norm2().powi(2) / (2.0 * 0.09);
    assert!((kl_gaussian(&post) - expect).abs() < 1e-12);
    let zero = GaussianPosterior::new(weights(vec![0.0; 3]), vec![0.3; 3], 0.3).unwrap();
    assert_eq!(kl_gaussian(&zero), 0.0);
}

#[test]
fn gaussian_kl_matches_quadrature() {
    let mut r = crate::rng::stream(3, &[]);
    use rand::Rng;
    let mu: Vec<f64> = (0..10).map(|_| r.random_range(-1.0..1.0)).collect();
    let sq: Vec<f64> = (0..10).map(|_| r.random_range(0.05..0.4)).collect();
    let sp = 0.3;
    let post = GaussianPosterior::new(weights(mu.clone()), sq.clone(), sp).unwrap();
    let oracle: f64 = (0..10)
        .map(|i| {
            simpson(
                |x| {
                    let q = normal_pdf(x, mu[i], sq[i]);
                    let p = normal_pdf(x, 0.0, sp);
                    if q == 0.0 {
                        0.0
                    } else {
                        q * (q / p).ln()
                    }
                },
                mu[i] - 14.0 * sq[i],
                mu[i] + 14.0 * sq[i],
                40_000,
            )
        })
        .sum();
    assert!((kl_gaussian(&post) - oracle).abs() < 1e-8);
}

#[test]
fn bound_spot_value() {
    let b = bound_complexity(0.0, 100, 0.05);
    assert!((b - 0.0599146).abs() < 1e-7);
    let v = variational_kl_bound(0.0, 0.0, 100, 0.05).unwrap();
    assert!((v - 0.1198).abs() < 1e-4);
    assert!((v - 2.0 * b).abs() < 1e-15);
}

#[test]
fn bound_limit_in_sample_size() {
    for kl in [0.0, 5.0, 50.0] {
        let v = variational_kl_bound(0.0, kl, 1_000_000_000, 0.05).unwrap();
        assert!(v < 1e-6, "{v}");
    }
}

#[test]
fn bound_rejects_bad_inputs() {
    assert!(variational_kl_bound(1.5, 0.0, 10, 0.05).is_err());
    assert!(variational_kl_bound(0.1, -1.0, 10, 0.05).is_err());
    assert!(variational_kl_bound(0.1, 0.0, 0, 0.05).is_err());
    assert!(variational_kl_bound(0.1, 0.0, 10, 0.0).is_err());
    assert!(variational_kl_bound(0.1, 0.0, 10, 1.0).is_ok());
}

#[test]
fn non_positive_sigma_is_rejected() {
    assert!(SpikeSlabPosterior::new(&weights(vec![0.3]), vec![0.0], PruningMask::ones(1)).is_err());
    let masked = PruningMask::from_parts(vec![false], vec![true]).unwrap();
    assert!(SpikeSlabPosterior::new(&weights(vec![0.3]), vec![0.0], masked).is_ok());
    assert!(SpikeSlabPrior::new(weights(vec![0.3]), vec![-1.0], 0.5).is_err());
    assert!(GaussianPosterior::new(weights(vec![0.3]), vec![0.1], 0.0).is_err());
    assert!(spike_slab_kl_1d(0.5, 0.0, 0.0, 0.5, 0.0, 1.0).is_err());
}

proptest! {
    #[test]
    fn bound_is_monotone(r in 0.0f64..1.0, dr in 0.0f64..0.5, kl in 0.0f64..500.0, dk in 0.0f64..100.0, m in 1usize..100_000) {
        let base = variational_kl_bound(r, kl, m, 0.05).unwrap();
        prop_assert!(variational_kl_bound(r, kl + dk, m, 0.05).unwrap() >= base - 1e-12);
        prop_assert!(variational_kl_bound((r + dr).min(1.0), kl, m, 0.05).unwrap() >= base - 1e-12);
        prop_assert!(base >= r);
    }

    #[test]
    fn kl_terms_non_negative(
        coords in prop::collection::vec((any::<bool>(), -2.0f64..2.0, -2.0f64..2.0, 0.01f64..1.0), 1..20),
        sp in 0.01f64..1.0,
        lp in 0.01f64..0.99,
    ) {
        let bits: Vec<bool> = coords.iter().map(|c| c.0).collect();
        let mask = PruningMask::from_parts(bits, vec![true; coords.len()]).unwrap();
        let post = SpikeSlabPosterior::new(&weights(coords.iter().map(|c| c.1).collect()), coords.iter().map(|c| c.3).collect(), mask.clone()).unwrap();
        let prior = SpikeSlabPrior::new(weights(coords.iter().map(|c| c.2).collect()), vec![sp; coords.len()], lp).unwrap();
        let kl = kl_spike_slab(&post, &prior, Scope::Prunable).unwrap();
        prop_assert!(kl.gauss >= 0.0 && kl.bern >= 0.0);
        // the Bernoulli part ignores weights entirely
        let moved = SpikeSlabPosterior::new(&weights(vec![0.123; coords.len()]), vec![0.5; coords.len()], mask).unwrap();
        prop_assert_eq!(kl_spike_slab(&moved, &prior, Scope::Prunable).unwrap().bern, kl.bern);
    }

    #[test]
    fn eq3_reduces_to_mask_form(
        kept in any::<bool>(), mq in -2.0f64..2.0, sq in 0.01f64..1.0, mp in -2.0f64..2.0, sp in 0.01f64..1.0, lp in 0.01f64..0.99,
    ) {
        let lq = if kept { 1.0 } else { 0.0 };
        let general = spike_slab_kl_1d(lq, mq, sq, lp, mp, sp).unwrap();
        let mask = PruningMask::from_parts(vec![kept], vec![true]).unwrap();
        let post = SpikeSlabPosterior::new(&weights(vec![mq]), vec![sq], mask).unwrap();
        let prior = SpikeSlabPrior::new(weights(vec![mp]), vec![sp], lp).unwrap();
        let kl = kl_spike_slab(&post, &prior, Scope::Prunable).unwrap();
        prop_assert!((general - kl.total()).abs() < 1e-10 * (1.0 + general.abs()));
    }
}

#[test]
fn perturbations_vanish_on_masked_coordinates() {
    let mask = PruningMask::from_parts(vec![true, false, true, false], vec![true; 4]).unwrap();
    let post = SpikeSlabPosterior::new(&weights(vec![1.0; 4]), vec![0.5; 4], mask).unwrap();
    let std = post.noise_std(Scope::Prunable);
    for d in 0..100 {
        let e = sample_perturbation(&std, 1, &[d]);
        assert_eq!(e[1].to_bits(), 0u64);
        assert_eq!(e[3].to_bits(), 0u64);
        assert_ne!(e[0], 0.0);
    }
}

/// Two-class logistic regression on a scalar input: logits = x·W with
/// W of shape (1, 2).
struct Logistic;

impl Model for Logistic {
    fn layout(&self) -> &Arc<Layout> {
        static L: std::sync::OnceLock<Arc<Layout>> = std::sync::OnceLock::new();
        L.get_or_init(|| Arc::new(Layout::packed([("w", vec![1, 2], SegmentKind::Weight)]).unwrap()))
    }

    fn build<T: Scalar>(&self, tape: &mut Tape<T>, params: &[Var], batch: &Batch) -> crate::Result<ModelOutput> {
        let x = tape.input(batch.inputs().map(T::from_f64));
        let logits = tape.matmul(x, params[0])?;
        let loss = tape.softmax_xent(logits, batch.labels())?;
        Ok(ModelOutput { loss, logits: Some(logits) })
    }
}

#[test]
fn expected_cross_entropy_matches_quadrature() {
    let xs = [-1.5, -0.3, 0.4, 1.2];
    let ys = [0usize, 1, 0, 1];
    let batch = Batch::new(Tensor::from_rows(&xs.iter().map(|&x| vec![x]).collect::<Vec<_>>()).unwrap(), ys.to_vec(), 2).unwrap();
    let theta = ParamVector::new(Logistic.layout().clone(), vec![-0.2, 0.6]).unwrap();
    let sigma = 0.5;
    let post = SpikeSlabPosterior::new(&theta, vec![sigma; 2], PruningMask::ones(2)).unwrap();
    let est = expected_sharpness(&Logistic, &post, Scope::Prunable, &batch, 10_000, 7, RiskLoss::CrossEntropy).unwrap();
    // the loss depends on d = w1 − w0 ~ N(0.8, 2σ²)
    let (md, sd) = (0.8, sigma * 2f64.sqrt());
    let loss_at = |d: f64| -> f64 {
        xs.iter()
            .zip(ys)
            .map(|(&x, y)| {
                let z = x * d;
                let s = if y == 1 { -z } else { z };
                // log(1 + e^s), stable
                s.max(0.0) + (-s.abs()).exp().ln_1p()
            })
            .sum::<f64>()
            / xs.len() as f64
    };
    let expected = simpson(|d| loss_at(d) * normal_pdf(d, md, sd), md - 12.0 * sd, md + 12.0 * sd, 20_000);
    assert!((est.mean - expected).abs() < 3.0 * est.std_error, "{} vs {expected} (se {})", est.mean, est.std_error);
    assert!((est.point - loss_at(md)).abs() < 1e-12);
    assert!((est.mean - (est.point + est.sharpness)).abs() < 1e-12);
}

#[test]
fn sharpness_vanishes_with_noise() {
    let m = Mlp::new(MlpSpec::new(vec![2, 4, 2], Activation::Tanh)).unwrap();
    let theta = m.init(0);
    let batch = Batch::new(Tensor::from_rows(&[vec![0.1, 0.2], vec![1.0, -1.0]]).unwrap(), vec![0, 1], 2).unwrap();
    let mask = PruningMask::dense(m.layout(), false);
    let post = SpikeSlabPosterior::new(&theta, vec![1e-9; theta.len()], mask).unwrap();
    let est = expected_sharpness(&m, &post, Scope::Prunable, &batch, 16, 0, RiskLoss::CrossEntropy).unwrap();
    assert!(est.sharpness.abs() < 1e-7);
    let zo = expected_sharpness(&m, &post, Scope::Prunable, &batch, 16, 0, RiskLoss::ZeroOne).unwrap();
    assert_eq!(zo.sharpness, 0.0);
}

#[test]
fn doubling_noise_never_lowers_quadratic_sharpness() {
    let q = Quadratic::diagonal(vec![1.0, 3.0]).unwrap();
    for theta in [vec![0.0, 0.0], vec![0.3, -0.2]] {
        let mean = q.params(theta).unwrap();
        let small = perturbed_risk(&q, mean.values(), &[0.1, 0.1], &Batch::unit(), 10_000, 2).unwrap();
        let big = perturbed_risk(&q, mean.values(), &[0.2, 0.2], &Batch::unit(), 10_000, 2).unwrap();
        assert!(big.cross_entropy.sharpness >= small.cross_entropy.sharpness);
        // E[f(θ+ε)] − f(θ) = ½ Σ a_i σ_i²
        let exact = 0.5 * (1.0 + 3.0) * 0.01;
        assert!((small.cross_entropy.sharpness - exact).abs() < 3.0 * small.cross_entropy.sharpness_std_error);
    }
}

fn blob_ticket() -> (Mlp, TicketArtifact, Batch) {
    let m = Mlp::new(MlpSpec::new(vec![2, 6, 2], Activation::Relu)).unwrap();
    let rows: Vec<Vec<f64>> = (0..40)
        .map(|i| {
            let s = if i % 2 == 0 { 1.0 } else { -1.0 };
            vec![s * (1.0 + 0.01 * i as f64), s * 0.5]
        })
        .collect();
    let labels = (0..40).map(|i| i % 2).collect();
    let data = Batch::new(Tensor::from_rows(&rows).unwrap(), labels, 2).unwrap();
    let init = m.init(1);
    let mask = PruningMask::dense(m.layout(), false);
    let cfg = crate::optim::OptimizerConfig { lr: 0.1, epochs: 20, batch_size: 0, ..Default::default() };
    let out = crate::optim::train(&m, &data, &init, &mask, &cfg, &crate::optim::Regularizer::none(), None).unwrap();
    let ticket = TicketArtifact {
        kind: TicketKind::Imp,
        init,
        trained: out.params,
        mask,
        rewind_step: 0,
        seed: 0,
        config: serde_json::Value::Null,
        rounds: Vec::new(),
    };
    (m, ticket, data)
}

fn quick_bound() -> BoundConfig {
    BoundConfig {
        steps: 40,
        final_samples: 64,
        ..Default::default()
    }
}

#[test]
fn sigma_optimization_never_worsens_the_initial_bound() {
    let (m, t, data) = blob_ticket();
    let cfg = quick_bound();
    for family in PosteriorFamily::ALL {
        let out = optimize_posterior_sigma(&m, &t, &data, family, &cfg).unwrap();
        let init = evaluate_bound(&m, &t, &data, family, &vec![cfg.sigma_init; t.trained.len()], &cfg).unwrap();
        assert!(out.report.bound <= init.bound, "{family:?}");
        assert!(out.report.bound >= out.report.risk_q);
        assert!(out.sigma.iter().all(|&s| (1e-6 * (1.0 - 1e-12)..=cfg.sigma_p * (1.0 + 1e-12)).contains(&s)));
        assert_eq!(out.report.kl_total, out.report.kl_gauss + out.report.kl_bern);
    }
}

#[test]
fn sigma_boundary_hits_are_counted() {
    let (m, t, data) = blob_ticket();
    let cfg = BoundConfig { lr: 5.0, steps: 10, sigma_init: 0.1, ..quick_bound() };
    let out = optimize_posterior_sigma(&m, &t, &data, PosteriorFamily::SpikeSlab, &cfg).unwrap();
    assert!(out.report.boundary_hits > 0);
}

#[test]
fn kl_vanishes_at_prior_std_when_weights_stay_at_init() {
    let (m, mut t, data) = blob_ticket();
    t.trained = t.init.clone();
    let cfg = BoundConfig { sigma_init: 0.1, ..quick_bound() };
    let r = evaluate_bound(&m, &t, &data, PosteriorFamily::SpikeSlab, &vec![cfg.sigma_p; t.trained.len()], &cfg).unwrap();
    assert!(r.kl_gauss.abs() < 1e-12);
    assert_eq!(r.lambda_p, Some(1.0 - 0.8));
}

#[test]
fn scatter_rows_are_reproducible() {
    let (m, t, data) = blob_ticket();
    let cfg = quick_bound();
    let inputs = [
        ScatterInput { ticket: &t, learning_rate: 0.1, test: Some(&data) },
        ScatterInput { ticket: &t, learning_rate: 0.1, test: Some(&data) },
    ];
    let rows = kl_risk_scatter(&m, &inputs, &data, &cfg).unwrap();
    assert_eq!(rows.len(), 4);
    for f in 0..2 {
        let (mut a, b) = (rows[f].clone(), rows[2 + f].clone());
        a.ticket = 1;
        assert_eq!(a, b);
    }
    let mut buf = Vec::new();
    write_scatter_csv(&mut buf, &rows).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("ticket,learning_rate,family,kl_total,"));
    assert!(kl_risk_scatter(&m, &inputs[..1], &data, &cfg).is_err());
}
