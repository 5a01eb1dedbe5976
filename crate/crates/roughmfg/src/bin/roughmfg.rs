use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use roughmfg::config::{Config, CouplingName, FlowModeName, RoughSource, RunKind};
use roughmfg::run::list_models;
use roughmfg::{run, validate, RunError, RunOptions};

#[derive(Parser)]
#[command(name = "roughmfg", version, about = "Mean-field games driven by a rough common noise")]
struct Cli {
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Fail on lattice escape and exit with status 4 when a fixed point does not converge.
    #[arg(long, global = true)]
    strict: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the state equation for a frozen policy.
    Rsde {
        #[command(subcommand)]
        op: RsdeOp,
    },
    /// Search for a pathwise equilibrium.
    Mfg {
        #[command(subcommand)]
        op: MfgOp,
    },
    /// Compare the pathwise and randomized formulations.
    Randomize {
        #[command(subcommand)]
        op: RandomizeOp,
    },
    /// Run whatever the config's `[run]` table names.
    Run(Common),
    /// Check a config without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    ListModels,
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    model: Option<String>,
}

#[derive(Subcommand)]
enum RsdeOp {
    Solve {
        #[command(flatten)]
        common: Common,
        /// Number of time steps.
        #[arg(long)]
        grid: Option<usize>,
        #[arg(long)]
        particles: Option<usize>,
        /// `sample` or the path of a binary rough-path file.
        #[arg(long)]
        rough: Option<String>,
    },
}

#[derive(Subcommand)]
enum MfgOp {
    Solve {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    FrozenFlow,
    PerSampleFixedpoint,
}

#[derive(Subcommand)]
enum RandomizeOp {
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        particles: Option<usize>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Share common and idiosyncratic draws between the pipelines.
        #[arg(long)]
        shared: bool,
    },
}

fn load(common: &Common, kind: Option<RunKind>) -> Result<Config, RunError> {
    let mut cfg = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::parse_with("", &PathBuf::from("<defaults>"), std::env::vars())?,
    };
    if let Some(k) = kind {
        cfg.run.kind = k;
    }
    if let Some(s) = common.seed {
        cfg.run.seed = s;
    }
    if let Some(m) = &common.model {
        cfg.run.model = m.clone();
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<(), RunError> {
    let opts = RunOptions {
        strict: cli.strict,
        threads: cli.threads,
    };
    let (cfg, out) = match cli.command {
        Command::ListModels => {
            let mut out = std::io::stdout().lock();
            for m in list_models() {
                let params: Vec<String> = m.params.iter().map(|(k, v)| format!("{k}={v}")).collect();
                // a closed pipe just ends the listing
                if writeln!(out, "{:<18} {}\n{:<18} defaults: {}", m.name, m.description, "", params.join(", ")).is_err() {
                    break;
                }
            }
            return Ok(());
        }
        Command::Validate { config } => {
            let cfg = Config::load(&config)?;
            let issues = validate(&cfg);
            if issues.is_empty() {
                println!("ok");
                return Ok(());
            }
            return Err(RunError::Validation(issues));
        }
        Command::Run(common) => (load(&common, None)?, common.out),
        Command::Mfg {
            op: MfgOp::Solve { common },
        } => (load(&common, Some(RunKind::Mfg))?, common.out),
        Command::Rsde {
            op:
                RsdeOp::Solve {
                    common,
                    grid,
                    particles,
                    rough,
                },
        } => {
            let mut cfg = load(&common, Some(RunKind::Rsde))?;
            if let Some(n) = grid {
                cfg.grid.steps = n;
            }
            if let Some(p) = particles {
                cfg.rsde.particles = p;
            }
            match rough.as_deref() {
                None => {}
                Some("sample") => cfg.rough.source = RoughSource::Sample,
                Some(file) => {
                    cfg.rough.source = RoughSource::File;
                    cfg.rough.path = Some(PathBuf::from(file));
                }
            }
            (cfg, common.out)
        }
        Command::Randomize {
            op:
                RandomizeOp::Compare {
                    common,
                    samples,
                    particles,
                    mode,
                    shared,
                },
        } => {
            let mut cfg = load(&common, Some(RunKind::Randomize))?;
            if let Some(s) = samples {
                cfg.randomize.samples = s;
            }
            if let Some(p) = particles {
                cfg.randomize.particles = p;
            }
            if let Some(m) = mode {
                cfg.randomize.mode = match m {
                    Mode::FrozenFlow => FlowModeName::FrozenFlow,
                    Mode::PerSampleFixedpoint => FlowModeName::PerSampleFixedpoint,
                };
            }
            if shared {
                cfg.randomize.coupling = CouplingName::Shared;
            }
            (cfg, common.out)
        }
    };
    let outcome = run(&cfg, &out, &opts)?;
    println!("wrote {} files to {} (manifest {})", outcome.files.len() + 1, outcome.dir.display(), &outcome.hash[..12]);
    if outcome.converged == Some(false) {
        println!("fixed point did not converge");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("error: cannot configure thread pool: {e}");
            return ExitCode::from(3);
        }
    }
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
