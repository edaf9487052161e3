use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, RecipeName};
use super::data::Dataset;
use super::runlog::Record;
use super::{fan_out, tag, RunDir, RunSummary};
use crate::error::Result;
use crate::hessian::{curvature_report, landscape_slice, save_slice_csv};
use crate::imp::{retrain_with_mask, run_imp, Split, TicketArtifact};
use crate::masking::Scope;
use crate::nn::Mlp;
use crate::optim::RegularizerConfig;
use crate::pacbayes::optimize_posterior_sigma;

/// Shared, read-only state of one recipe run.
pub(crate) struct Ctx<'a> {
    pub cfg: &'a ExperimentConfig,
    pub model: Mlp,
    pub run: &'a RunDir,
}

/// One dataset variant with its label flips.
pub(crate) struct Variant {
    pub noise: f64,
    pub data: Dataset,
    pub flipped: Vec<usize>,
}

pub(crate) fn variants(cfg: &ExperimentConfig, clean: &Dataset, fractions: &[f64], run: &RunDir) -> Result<(Vec<Variant>, Vec<Record>)> {
    let mut out = Vec::new();
    let mut recs = Vec::new();
    for &f in fractions {
        let (data, flipped) = cfg.noisy_dataset(clean, f)?;
        let name = format!("label_noise_{f}.json");
        std::fs::write(run.artifacts("data")?.join(&name), serde_json::to_string(&flipped)? + "\n")?;
        recs.push(
            Record::new("data", 0, "label_noise")
                .label("indices_file", format!("artifacts/data/{name}"))
                .metric("fraction", f)
                .metric("flipped", flipped.len() as f64)
                .metric("m", data.m() as f64),
        );
        out.push(Variant { noise: f, data, flipped });
    }
    Ok((out, recs))
}

pub(crate) fn round_records(job: &str, ticket: &TicketArtifact, extra: &[(&str, f64)]) -> Result<Vec<Record>> {
    ticket
        .rounds
        .iter()
        .map(|r| {
            let mut rec = Record::new(job, ticket.seed, "round").round(r.round).metrics_from(r)?;
            rec.metrics.remove("round");
            Ok(extra.iter().fold(rec, |rec, (k, v)| rec.metric(k, *v)))
        })
        .collect()
}

pub(crate) fn ticket_record(job: &str, ticket: &TicketArtifact, extra: &[(&str, f64)]) -> Record {
    let last = ticket.rounds.last().expect("ticket has at least one round");
    let rec = Record::new(job, ticket.seed, "ticket")
        .round(last.round)
        .metric("sparsity", ticket.sparsity())
        .metric("train_error", last.train_error)
        .metric_opt("test_error", last.test_error)
        .metric_opt("test_accuracy", last.test_error.map(|e| 1.0 - e))
        .metric("distance_init", last.distance_init)
        .metric("weight_norm", last.weight_norm);
    extra.iter().fold(rec, |rec, (k, v)| rec.metric(k, *v))
}

pub(crate) fn bound_records(ctx: &Ctx<'_>, job: &str, ticket: &TicketArtifact, data: &Dataset, dir: &Path) -> Result<Vec<Record>> {
    let bc = ctx.cfg.bound_config(ticket.seed);
    let mut out = Vec::new();
    for family in &ctx.cfg.sweep.families {
        let res = optimize_posterior_sigma(&ctx.model, ticket, &data.train, *family, &bc)?;
        let name = tag(family);
        std::fs::write(
            dir.join(format!("bound_{name}.json")),
            serde_json::to_string_pretty(&res.report)? + "\n",
        )?;
        out.push(
            Record::new(job, ticket.seed, "bound")
                .label("family", &name)
                .label("selected", &res.report.selected)
                .metrics_from(&res.report)?,
        );
    }
    Ok(out)
}

/// IMP at one learning rate on one dataset variant; saves the ticket.
fn imp_job(
    ctx: &Ctx<'_>,
    job: &str,
    seed: u64,
    lr: f64,
    reg: RegularizerConfig,
    data: &Dataset,
) -> Result<(TicketArtifact, std::path::PathBuf)> {
    let cfg = ctx.cfg.imp_config(seed, lr, reg, ctx.cfg.optimizer.kind);
    let init = ctx.model.init(seed);
    let ticket = run_imp(&ctx.model, &cfg, &init, Split { train: &data.train, test: Some(&data.test) })?;
    let dir = ctx.run.artifacts(job)?;
    ticket.save(&dir.join("ticket"))?;
    Ok((ticket, dir))
}

fn lr_sweep(ctx: &Ctx<'_>, clean: &Dataset, jobs: usize) -> Result<Vec<Record>> {
    let s = &ctx.cfg.sweep;
    let (vars, mut recs) = variants(ctx.cfg, clean, &s.label_noise, ctx.run)?;
    let mut grid = Vec::new();
    for (vi, v) in vars.iter().enumerate() {
        for &lr in &s.learning_rates {
            for &seed in &ctx.cfg.seeds {
                grid.push((vi, lr, seed, format!("lr{lr}_noise{}_seed{seed}", v.noise)));
            }
        }
    }
    recs.extend(fan_out(&grid, jobs, |(vi, lr, seed, job)| {
        let v = &vars[*vi];
        let (ticket, dir) = imp_job(ctx, job, *seed, *lr, ctx.cfg.regularizer, &v.data)?;
        let extra = [("learning_rate", *lr), ("label_noise", v.noise)];
        let mut out = round_records(job, &ticket, &extra)?;
        out.push(ticket_record(job, &ticket, &extra).metric("flipped", v.flipped.len() as f64));
        if s.bounds {
            for r in bound_records(ctx, job, &ticket, &v.data, &dir)? {
                out.push(extra.iter().fold(r, |r, (k, x)| r.metric(k, *x)));
            }
        }
        Ok(out)
    })?);
    Ok(recs)
}

fn regularizer_sweep(ctx: &Ctx<'_>, clean: &Dataset, jobs: usize) -> Result<Vec<Record>> {
    let s = &ctx.cfg.sweep;
    let (vars, mut recs) = variants(ctx.cfg, clean, &[ctx.cfg.label_noise], ctx.run)?;
    let data = &vars[0].data;
    let lr = ctx.cfg.optimizer.lr;
    let mut grid = Vec::new();
    for &kind in &s.reg_kinds {
        for &lambda in &s.reg_lambdas {
            for &seed in &ctx.cfg.seeds {
                grid.push((kind, lambda, seed, format!("{}_lambda{lambda}_seed{seed}", tag(&kind))));
            }
        }
    }
    recs.extend(fan_out(&grid, jobs, |(kind, lambda, seed, job)| {
        let reg = RegularizerConfig { kind: *kind, lambda: *lambda };
        let (ticket, _) = imp_job(ctx, job, *seed, lr, reg, data)?;
        let extra = [("lambda", *lambda), ("learning_rate", lr)];
        let label = |r: Record| r.label("regularizer", tag(kind));
        let mut out: Vec<Record> = round_records(job, &ticket, &extra)?.into_iter().map(label).collect();
        out.push(label(ticket_record(job, &ticket, &extra)));
        Ok(out)
    })?);
    Ok(recs)
}

fn flatness(ctx: &Ctx<'_>, clean: &Dataset, jobs: usize) -> Result<Vec<Record>> {
    let (vars, mut recs) = variants(ctx.cfg, clean, &[ctx.cfg.label_noise], ctx.run)?;
    let data = &vars[0].data;
    let lr = ctx.cfg.optimizer.lr;
    let h = &ctx.cfg.hessian;
    let grid: Vec<(u64, String)> = ctx.cfg.seeds.iter().map(|&s| (s, format!("seed{s}"))).collect();
    recs.extend(fan_out(&grid, jobs, |(seed, job)| {
        let (ticket, dir) = imp_job(ctx, job, *seed, lr, ctx.cfg.regularizer, data)?;
        let split = Split { train: &data.train, test: Some(&data.test) };
        let mut out = vec![ticket_record(job, &ticket, &[("learning_rate", lr)])];
        for &kind in &ctx.cfg.sweep.optimizers {
            let tc = ctx.cfg.train_config(*seed, lr, kind);
            let rt = retrain_with_mask(&ctx.model, &ticket.mask, &ticket.init, &tc, ctx.cfg.regularizer, split, None)?;
            let (report, eig) = curvature_report(&ctx.model, &rt.params, &ticket.mask, &data.train, h, *seed)?;
            let slice = landscape_slice(&ctx.model, &rt.params, &ticket.mask, &data.train, &eig.vector, h.slice_radius, h.slice_points)?;
            let name = tag(&kind);
            save_slice_csv(&dir.join(format!("slice_{name}.csv")), &slice)?;
            out.push(
                Record::new(job, *seed, "curvature")
                    .label("optimizer", &name)
                    .metrics_from(&report)?
                    .metric("train_error", rt.train_error)
                    .metric_opt("test_error", rt.test_error)
                    .metric("distance_init", rt.distance_init)
                    .metric("learning_rate", lr),
            );
        }
        Ok(out)
    })?);
    Ok(recs)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quantile {
    pub q: f64,
    /// Quantile of `|θ̄_i|` over kept in-scope coordinates.
    pub weight: f64,
    /// Quantile of `|θ̄_i − θ_init,i|` over the same coordinates.
    pub shift: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Linear-interpolated magnitude quantiles of the unpruned trained weights
/// and of their displacement from initialization.
pub fn param_quantiles(ticket: &TicketArtifact, qs: &[f64], scope: Scope) -> Vec<Quantile> {
    let m = &ticket.mask;
    let (t, i0) = (ticket.trained.values(), ticket.init.values());
    let mut w = Vec::new();
    let mut d = Vec::new();
    for i in 0..m.len() {
        if m.is_kept(i) && m.in_scope(scope, i) {
            w.push(t[i].abs());
            d.push((t[i] - i0[i]).abs());
        }
    }
    w.sort_by(f64::total_cmp);
    d.sort_by(f64::total_cmp);
    qs.iter()
        .map(|&q| Quantile {
            q,
            weight: quantile(&w, q),
            shift: quantile(&d, q),
        })
        .collect()
}

fn param_dist(ctx: &Ctx<'_>, clean: &Dataset, jobs: usize) -> Result<Vec<Record>> {
    let s = &ctx.cfg.sweep;
    let (vars, mut recs) = variants(ctx.cfg, clean, &[ctx.cfg.label_noise], ctx.run)?;
    let data = &vars[0].data;
    let mut grid = Vec::new();
    for &lr in &s.learning_rates {
        for &seed in &ctx.cfg.seeds {
            grid.push((lr, seed, format!("lr{lr}_seed{seed}")));
        }
    }
    recs.extend(fan_out(&grid, jobs, |(lr, seed, job)| {
        let (ticket, _) = imp_job(ctx, job, *seed, *lr, ctx.cfg.regularizer, data)?;
        let rec = param_quantiles(&ticket, &s.quantiles, ctx.cfg.imp.scope).iter().fold(
            Record::new(job, *seed, "quantiles").metric("learning_rate", *lr),
            |r, q| {
                let pct = (q.q * 100.0).round();
                r.metric(&format!("weight_q{pct}"), q.weight)
                    .metric(&format!("shift_q{pct}"), q.shift)
            },
        );
        Ok(vec![ticket_record(job, &ticket, &[("learning_rate", *lr)]), rec])
    })?);
    Ok(recs)
}

/// Runs a recipe into the fresh directory `out` with up to `jobs` threads.
pub fn run_recipe(cfg: &ExperimentConfig, name: RecipeName, out: &Path, jobs: usize) -> Result<RunSummary> {
    cfg.validate()?;
    let run = RunDir::create(out)?;
    let clean = cfg.dataset()?;
    let ctx = Ctx {
        cfg,
        model: cfg.model.build(&clean)?,
        run: &run,
    };
    log::info!("recipe {} on {} ({} train samples)", name.as_str(), clean.provenance, clean.m());
    let records = match name {
        RecipeName::LrSweep => lr_sweep(&ctx, &clean, jobs)?,
        RecipeName::RegularizerSweep => regularizer_sweep(&ctx, &clean, jobs)?,
        RecipeName::Flatness => flatness(&ctx, &clean, jobs)?,
        RecipeName::ParamDist => param_dist(&ctx, &clean, jobs)?,
    };
    let prov = clean.provenance.clone();
    drop(ctx);
    run.finish(cfg, &format!("recipe {}", name.as_str()), &prov, records)
}
