use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ticketlab::harness::{self, ExperimentConfig, RecipeName, RunSummary};
use ticketlab::Result;

#[derive(Parser)]
#[command(name = "ticketlab", version, about = "Lottery-ticket pruning, PAC-Bayes bounds and curvature diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON); defaults are used when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Output run directory; must be empty or absent.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Parallel jobs for multi-seed commands.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct TicketArgs {
    #[command(flatten)]
    common: Common,
    /// Ticket directory written by `imp` or `cs`.
    #[arg(long)]
    ticket: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Recipe {
    LrSweep,
    RegularizerSweep,
    Flatness,
    ParamDist,
}

impl From<Recipe> for RecipeName {
    fn from(r: Recipe) -> Self {
        match r {
            Recipe::LrSweep => RecipeName::LrSweep,
            Recipe::RegularizerSweep => RecipeName::RegularizerSweep,
            Recipe::Flatness => RecipeName::Flatness,
            Recipe::ParamDist => RecipeName::ParamDist,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train dense networks, one per seed.
    Train(Common),
    /// Iterative magnitude pruning with rewinding, one ticket per seed.
    Imp(Common),
    /// Continuous sparsification, one ticket per seed.
    Cs(Common),
    /// Optimize PAC-Bayes bounds for a saved ticket.
    Bound(TicketArgs),
    /// Top Hessian eigenvalue and trace for a saved ticket.
    Hessian(TicketArgs),
    /// Loss along the top Hessian eigenvector of a saved ticket.
    Slice(TicketArgs),
    /// Run an experiment recipe; defaults to the config's `recipe` field.
    Recipe {
        name: Option<Recipe>,
        #[command(flatten)]
        common: Common,
    },
    /// Convert a run log into CSV tables, one per event.
    Report {
        /// Run directory or runlog.jsonl file.
        input: PathBuf,
        /// Directory for the CSV files; defaults to `<input>/tables`.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Print the JSON schema of the experiment config or of run-log rows.
    Schema {
        #[arg(long)]
        runlog: bool,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    match &common.config {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn out_dir(cfg: &ExperimentConfig, common: &Common, verb: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| cfg.output_dir.join(verb))
}

fn done(s: RunSummary) {
    println!("{} ({} records)", s.dir.display(), s.records.len());
}

fn ticket_cmd(
    a: &TicketArgs,
    verb: &str,
    f: fn(&ExperimentConfig, &Path, &Path) -> Result<RunSummary>,
) -> Result<()> {
    let cfg = load(&a.common)?;
    done(f(&cfg, &a.ticket, &out_dir(&cfg, &a.common, verb))?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => {
            let cfg = load(&c)?;
            done(harness::cmd_train(&cfg, &out_dir(&cfg, &c, "train"), c.jobs)?);
        }
        Command::Imp(c) => {
            let cfg = load(&c)?;
            done(harness::cmd_imp(&cfg, &out_dir(&cfg, &c, "imp"), c.jobs)?);
        }
        Command::Cs(c) => {
            let cfg = load(&c)?;
            done(harness::cmd_cs(&cfg, &out_dir(&cfg, &c, "cs"), c.jobs)?);
        }
        Command::Bound(a) => ticket_cmd(&a, "bound", harness::cmd_bound)?,
        Command::Hessian(a) => ticket_cmd(&a, "hessian", harness::cmd_hessian)?,
        Command::Slice(a) => ticket_cmd(&a, "slice", harness::cmd_slice)?,
        Command::Recipe { name, common } => {
            let cfg = load(&common)?;
            let name = name.map_or(cfg.recipe, RecipeName::from);
            let out = out_dir(&cfg, &common, name.as_str());
            done(harness::run_recipe(&cfg, name, &out, common.jobs)?);
        }
        Command::Report { input, out } => {
            let out = out.unwrap_or_else(|| {
                let base = if input.is_dir() { input.clone() } else { input.parent().map(Path::to_path_buf).unwrap_or_default() };
                base.join("tables")
            });
            for p in harness::report(&input, &out)? {
                println!("{}", p.display());
            }
        }
        Command::Schema { runlog } => {
            if runlog {
                print!("{}", harness::Record::json_schema());
            } else {
                print!("{}", ExperimentConfig::schema_json());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
