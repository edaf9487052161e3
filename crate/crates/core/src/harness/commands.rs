use std::path::Path;

use super::config::ExperimentConfig;
use super::recipes::{bound_records, round_records, ticket_record, variants, Ctx};
use super::runlog::Record;
use super::{fan_out, RunDir, RunSummary};
use crate::artifact::write_params;
use crate::contsparse::run_cs;
use crate::error::Result;
use crate::hessian::{curvature_report, landscape_slice, save_slice_csv};
use crate::imp::{run_imp, Split, TicketArtifact};
use crate::masking::PruningMask;
use crate::nn::{evaluate, Model};
use crate::optim::{train, Regularizer};

/// Opens the run directory, builds the dataset variant for
/// `cfg.label_noise`, and hands the shared context to `body`.
fn with_run<F>(cfg: &ExperimentConfig, out: &Path, command: &str, body: F) -> Result<RunSummary>
where
    F: FnOnce(&Ctx<'_>, &super::recipes::Variant) -> Result<Vec<Record>>,
{
    cfg.validate()?;
    let run = RunDir::create(out)?;
    let clean = cfg.dataset()?;
    let ctx = Ctx {
        cfg,
        model: cfg.model.build(&clean)?,
        run: &run,
    };
    let (vars, mut records) = variants(cfg, &clean, &[cfg.label_noise], &run)?;
    records.extend(body(&ctx, &vars[0])?);
    let prov = vars[0].data.provenance.clone();
    drop(ctx);
    run.finish(cfg, command, &prov, records)
}

/// Dense training for every seed; saves the trained parameters.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path, jobs: usize) -> Result<RunSummary> {
    with_run(cfg, out, "train", |ctx, v| {
        fan_out(&cfg.seeds, jobs, |&seed| {
            let job = format!("seed{seed}");
            let init = ctx.model.init(seed);
            let mask = PruningMask::dense(ctx.model.layout(), cfg.imp.prune_biases);
            let reg = Regularizer::from_config(cfg.regularizer, Some(&init))?;
            let tc = cfg.train_config(seed, cfg.optimizer.lr, cfg.optimizer.kind);
            let res = train(&ctx.model, &v.data.train, &init, &mask, &tc, &reg, None)?;
            write_params(&ctx.run.artifacts(&job)?.join("trained.pvec"), &res.params)?;
            let mut recs: Vec<Record> = res
                .epoch_losses
                .iter()
                .enumerate()
                .map(|(e, &l)| Record::new(&job, seed, "epoch").round(e).metric("train_loss", l))
                .collect();
            let (_, train_err) = evaluate(&ctx.model, &res.params, &mask, &v.data.train)?;
            let (_, test_err) = evaluate(&ctx.model, &res.params, &mask, &v.data.test)?;
            recs.push(
                Record::new(&job, seed, "trained")
                    .metric("steps", res.steps as f64)
                    .metric("train_error", train_err)
                    .metric("test_error", test_err)
                    .metric("sam_fallbacks", res.sam_fallbacks as f64),
            );
            Ok(recs)
        })
    })
}

/// One IMP ticket per seed at the configured learning rate.
pub fn cmd_imp(cfg: &ExperimentConfig, out: &Path, jobs: usize) -> Result<RunSummary> {
    with_run(cfg, out, "imp", |ctx, v| {
        fan_out(&cfg.seeds, jobs, |&seed| {
            let job = format!("seed{seed}");
            let ic = cfg.imp_config(seed, cfg.optimizer.lr, cfg.regularizer, cfg.optimizer.kind);
            let split = Split { train: &v.data.train, test: Some(&v.data.test) };
            let ticket = run_imp(&ctx.model, &ic, &ctx.model.init(seed), split)?;
            ticket.save(&ctx.run.artifacts(&job)?.join("ticket"))?;
            let mut recs = round_records(&job, &ticket, &[])?;
            recs.push(ticket_record(&job, &ticket, &[]));
            Ok(recs)
        })
    })
}

/// One continuous-sparsification ticket per seed.
pub fn cmd_cs(cfg: &ExperimentConfig, out: &Path, jobs: usize) -> Result<RunSummary> {
    with_run(cfg, out, "cs", |ctx, v| {
        fan_out(&cfg.seeds, jobs, |&seed| {
            let job = format!("seed{seed}");
            let cc = cfg.cs_config(seed, cfg.cs.eta_pen);
            let split = Split { train: &v.data.train, test: Some(&v.data.test) };
            let res = run_cs(&ctx.model, &cc, &ctx.model.init(seed), split)?;
            let dir = ctx.run.artifacts(&job)?;
            res.ticket.save(&dir.join("ticket"))?;
            let mut recs = Vec::new();
            for e in &res.epochs {
                recs.push(Record::new(&job, seed, "cs_epoch").round(e.epoch).metrics_from(e)?);
            }
            recs.push(ticket_record(&job, &res.ticket, &[("eta_pen", cc.eta_pen)]).metric("density", res.density));
            if let Some(b) = &res.bound {
                std::fs::write(dir.join("bound_spike_slab.json"), serde_json::to_string_pretty(b)? + "\n")?;
                recs.push(
                    Record::new(&job, seed, "bound")
                        .label("family", "spike_slab")
                        .label("selected", &b.selected)
                        .metrics_from(b)?,
                );
            }
            Ok(recs)
        })
    })
}

fn load_ticket(ctx: &Ctx<'_>, dir: &Path) -> Result<TicketArtifact> {
    let t = TicketArtifact::load(dir)?;
    t.init.check_aligned(&ctx.model.init(0), "ticket parameters")?;
    Ok(t)
}

/// Optimized bounds for a saved ticket, one per configured family.
pub fn cmd_bound(cfg: &ExperimentConfig, ticket: &Path, out: &Path) -> Result<RunSummary> {
    with_run(cfg, out, "bound", |ctx, v| {
        let t = load_ticket(ctx, ticket)?;
        let dir = ctx.run.artifacts("bound")?;
        bound_records(ctx, "bound", &t, &v.data, &dir)
    })
}

/// Curvature report of a saved ticket on the training set.
pub fn cmd_hessian(cfg: &ExperimentConfig, ticket: &Path, out: &Path) -> Result<RunSummary> {
    with_run(cfg, out, "hessian", |ctx, v| {
        let t = load_ticket(ctx, ticket)?;
        let seed = cfg.seeds[0];
        let (report, _) = curvature_report(&ctx.model, &t.trained, &t.mask, &v.data.train, &cfg.hessian, seed)?;
        std::fs::write(
            ctx.run.artifacts("hessian")?.join("curvature.json"),
            serde_json::to_string_pretty(&report)? + "\n",
        )?;
        Ok(vec![Record::new("hessian", seed, "curvature").metrics_from(&report)?])
    })
}

/// Loss along the top Hessian eigenvector of a saved ticket.
pub fn cmd_slice(cfg: &ExperimentConfig, ticket: &Path, out: &Path) -> Result<RunSummary> {
    with_run(cfg, out, "slice", |ctx, v| {
        let t = load_ticket(ctx, ticket)?;
        let seed = cfg.seeds[0];
        let h = &cfg.hessian;
        let (report, eig) = curvature_report(&ctx.model, &t.trained, &t.mask, &v.data.train, h, seed)?;
        let rows = landscape_slice(&ctx.model, &t.trained, &t.mask, &v.data.train, &eig.vector, h.slice_radius, h.slice_points)?;
        save_slice_csv(&ctx.run.artifacts("slice")?.join("slice.csv"), &rows)?;
        Ok(vec![Record::new("slice", seed, "slice")
            .metric("top_eigenvalue", report.top_eigenvalue)
            .metric("radius", h.slice_radius)
            .metric("points", rows.len() as f64)])
    })
}
