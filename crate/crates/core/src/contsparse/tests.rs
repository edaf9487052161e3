use rand::Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::error::Error;
use crate::nn::{forward, Activation, Mlp, MlpSpec, Tensor};

fn blobs(n: usize, seed: u64) -> Batch {
    let mut r = rng::stream(seed, &[77]);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let c = i % 2;
        let sgn = if c == 0 { -1.0 } else { 1.0 };
        rows.push(vec![
            sgn * 1.5 + 0.5 * r.sample::<f64, _>(StandardNormal),
            0.5 * r.sample::<f64, _>(StandardNormal),
        ]);
        labels.push(c);
    }
    Batch::new(Tensor::from_rows(&rows).unwrap(), labels, 2).unwrap()
}

fn net(act: Activation) -> Mlp {
    Mlp::new(MlpSpec::new(vec![2, 8, 2], act)).unwrap()
}

fn cfg(eta: f64) -> CsConfig {
    CsConfig {
        eta_pen: eta,
        train: OptimizerConfig {
            lr: 0.05,
            epochs: 15,
            batch_size: 16,
            ..Default::default()
        },
        ..Default::default()
    }
}

#[test]
fn open_gate_limit() {
    let m = net(Activation::Tanh);
    let theta = m.init(3);
    let data = blobs(20, 0);
    let mask = PruningMask::dense(m.layout(), false);
    let gates = GateState::new(&mask, 50.0, 1.0);
    let obj = cs_objective(&m, &theta, &gates, 0.01, &data).unwrap();
    let plain = forward(&m, &theta, &mask, &data).unwrap().loss;
    assert!((obj.loss - plain).abs() < 1e-12);
    assert!((obj.value - (plain + 0.01 * mask.prunable_count() as f64)).abs() < 1e-12);
}

#[test]
fn frozen_gates_recover_masked_objective() {
    let m = net(Activation::Relu);
    let theta = m.init(4);
    let data = blobs(20, 1);
    let kept = (0..theta.len()).map(|i| i % 3 != 0).collect();
    let prunable = PruningMask::dense(m.layout(), false);
    let planes: Vec<bool> = prunable.prunable().to_vec();
    let kept: Vec<bool> = planes.iter().zip::<Vec<bool>>(kept).map(|(&p, k)| !p || k).collect();
    let mask = PruningMask::from_parts(kept, planes).unwrap();
    let obj = cs_objective(&m, &theta, &GateState::frozen(&mask), 0.3, &data).unwrap();
    let masked = forward(&m, &theta, &mask, &data).unwrap().loss;
    assert_eq!(obj.loss, masked);
    assert_eq!(obj.value, masked + 0.3 * mask.kept_prunable() as f64);
}

#[test]
fn gradients_match_finite_differences() {
    let m = net(Activation::Tanh);
    let theta = m.init(5);
    let data = blobs(12, 2);
    let mask = PruningMask::dense(m.layout(), false);
    let mut gates = GateState::new(&mask, 0.0, 2.0);
    let mut r = rng::stream(9, &[]);
    for (s, &p) in gates.s.iter_mut().zip(&gates.prunable) {
        if p {
            *s = r.random_range(-1.0..1.0);
        }
    }
    let eta = 0.05;
    let obj = cs_objective(&m, &theta, &gates, eta, &data).unwrap();
    let h = 1e-5;
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
    for i in 0..theta.len() {
        let mut up = gates.clone();
        let mut dn = gates.clone();
        up.s[i] += h;
        dn.s[i] -= h;
        let fd = (cs_objective(&m, &theta, &up, eta, &data).unwrap().value
            - cs_objective(&m, &theta, &dn, eta, &data).unwrap().value)
            / (2.0 * h);
        assert!(rel(obj.grad_s[i], fd) < 1e-4, "s[{i}]: {} vs {fd}", obj.grad_s[i]);

        let mut tv = theta.values().to_vec();
        tv[i] += h;
        let tu = theta.with_values(tv.clone()).unwrap();
        tv[i] -= 2.0 * h;
        let td = theta.with_values(tv).unwrap();
        let fd = (cs_objective(&m, &tu, &gates, eta, &data).unwrap().value
            - cs_objective(&m, &td, &gates, eta, &data).unwrap().value)
            / (2.0 * h);
        assert!(rel(obj.grad_theta[i], fd) < 1e-4, "theta[{i}]");
    }
}

#[test]
fn penalty_gradient_is_positive() {
    let m = net(Activation::Tanh);
    let theta = ParamVector::zeros(m.layout().clone());
    let mask = PruningMask::dense(m.layout(), false);
    let gates = GateState::new(&mask, -0.3, 3.0);
    let obj = cs_objective(&m, &theta, &gates, 0.1, &blobs(8, 0)).unwrap();
    for i in 0..theta.len() {
        if gates.prunable[i] {
            assert!(obj.grad_s[i] > 0.0);
        } else {
            assert_eq!(obj.grad_s[i], 0.0);
        }
    }
    assert!(gates.gates().iter().zip(&gates.prunable).all(|(&g, &p)| !p || (g > 0.0 && g < 1.0)));
}

#[test]
fn beta_schedule_is_geometric() {
    let c = cfg(0.0);
    assert_eq!(c.beta_at(0), 1.0);
    assert!((c.beta_at(14) - 100.0).abs() < 1e-9);
    for e in 1..15 {
        let ratio = c.beta_at(e) / c.beta_at(e - 1);
        assert!((ratio - 100f64.powf(1.0 / 14.0)).abs() < 1e-9);
    }
}

#[test]
fn no_penalty_keeps_nearly_everything() {
    let m = net(Activation::Relu);
    let data = blobs(64, 3);
    let out = run_cs(&m, &cfg(0.0), &m.init(0), Split { train: &data, test: None }).unwrap();
    assert!(out.density >= 0.99, "{}", out.density);
    assert_eq!(out.ticket.kind, crate::imp::TicketKind::Cs);
    assert_eq!(out.epochs.len(), 15);
}

#[test]
fn penalty_prunes_and_ticket_is_masked() {
    let m = net(Activation::Relu);
    let data = blobs(64, 3);
    let init = m.init(0);
    let densities: Vec<f64> = [1e-4, 1e-3, 1e-2, 1e-1]
        .iter()
        .map(|&eta| run_cs(&m, &cfg(eta), &init, Split { train: &data, test: None }).unwrap().density)
        .collect();
    assert!(densities.windows(2).all(|w| w[1] <= w[0]), "{densities:?}");
    assert!(densities[3] < densities[0], "{densities:?}");
    let out = run_cs(&m, &cfg(1e-1), &init, Split { train: &data, test: Some(&data) }).unwrap();
    for i in 0..init.len() {
        if !out.ticket.mask.is_kept(i) {
            assert_eq!(out.ticket.trained.values()[i], 0.0);
        }
    }
    assert!(out.test_error.is_some());
}

#[test]
fn runs_are_reproducible() {
    let m = net(Activation::Relu);
    let data = blobs(40, 5);
    let c = cfg(1e-2);
    let a = run_cs(&m, &c, &m.init(1), Split { train: &data, test: None }).unwrap();
    let b = run_cs(&m, &c, &m.init(1), Split { train: &data, test: None }).unwrap();
    assert_eq!(a.ticket, b.ticket);
    assert_eq!(a.epochs, b.epochs);
    assert_eq!(a.gates, b.gates);
}

#[test]
fn collapse_is_reported() {
    let m = net(Activation::Relu);
    let data = blobs(32, 5);
    let mut c = cfg(50.0);
    c.train.epochs = 5;
    match run_cs(&m, &c, &m.init(1), Split { train: &data, test: None }) {
        Err(Error::GateCollapse { eta_pen }) => assert_eq!(eta_pen, 50.0),
        other => panic!("expected collapse, got {:?}", other.map(|o| o.density)),
    }
}

#[test]
fn bound_is_attached_when_configured() {
    let m = net(Activation::Relu);
    let data = blobs(32, 6);
    let mut c = cfg(1e-2);
    c.train.epochs = 4;
    c.bound = Some(crate::pacbayes::BoundConfig {
        steps: 5,
        final_samples: 16,
        ..Default::default()
    });
    let out = run_cs(&m, &c, &m.init(2), Split { train: &data, test: None }).unwrap();
    let b = out.bound.unwrap();
    assert!(b.bound >= b.risk_q);
}

#[test]
fn invalid_configs_are_rejected() {
    let mut c = cfg(0.0);
    c.s_init = 0.0;
    assert!(c.validate().is_err());
    let mut c = cfg(0.0);
    c.beta_final = 0.5;
    assert!(c.validate().is_err());
    let mut c = cfg(-1.0);
    assert!(c.validate().is_err());
    c.eta_pen = 0.0;
    c.train.kind = OptimizerKind::Sam;
    assert!(c.validate().is_err());
}
