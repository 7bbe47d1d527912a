use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use mbdu::channel::{make_dataset, Dataset};
use mbdu::harness::{check_oracles, describe, run_sweep, CheckLevel, SweepKind, SweepSpec};
use mbdu::phase_opt::{AoOptions, Method};
use mbdu::scenario::ScenarioConfig;
use mbdu::training::{load_checkpoint, save_checkpoint, train_from, Estimator, TrainingHyper, WarmStart};

const EXIT_USAGE: u8 = 1;
const EXIT_CHECK: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "mbdu", version, about = "Multi-band SIM downlink simulator and unfolded phase optimizer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimatorArg {
    Fd,
    Spsa,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Inner,
    Outer,
    Subcarriers,
}

#[derive(Clone, Copy, ValueEnum)]
enum LevelArg {
    Fast,
    Full,
}

#[derive(Subcommand)]
enum Command {
    /// Expand a master seed into a realization dataset.
    GenDataset {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        n: usize,
        /// Master seed; defaults to the config's master_seed.
        #[arg(long = "seed")]
        master_seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train unfolding parameters and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        method: Method,
        #[arg(long = "T")]
        t: usize,
        #[arg(long = "I-max")]
        i_max: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long, value_enum)]
        estimator: Option<EstimatorArg>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_val: Option<usize>,
        /// Relative held-out gain needed to replace the selected epoch.
        #[arg(long)]
        min_improvement: Option<f64>,
        /// Reference step; tuned on the first training realization if absent.
        #[arg(long)]
        eta_ref: Option<f64>,
        /// Start from this checkpoint (a DU checkpoint may seed MBDU).
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Evaluate methods over an iteration or subcarrier grid and write CSV.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum)]
        kind: KindArg,
        /// Comma-separated, strictly increasing.
        #[arg(long, value_delimiter = ',', required = true)]
        grid: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "gd,du,mbdu")]
        methods: Vec<Method>,
        #[arg(long, default_value_t = 20)]
        n_eval: usize,
        /// Stages per block when not swept.
        #[arg(long = "T", default_value_t = 6)]
        t: usize,
        /// Outer iterations when not swept.
        #[arg(long = "I-max", default_value_t = 1)]
        i_max: usize,
        /// `METHOD=PATH`, repeatable.
        #[arg(long = "ckpt")]
        ckpts: Vec<String>,
        #[arg(long)]
        eval_offset: Option<usize>,
        #[arg(long)]
        allow_config_drift: bool,
        #[arg(long, default_value_t = 0)]
        threads: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the oracle self-check suite.
    Check {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "fast")]
        level: LevelArg,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Print grid, port and parameter counts.
    Describe {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "T", default_value_t = 6)]
        t: usize,
        #[arg(long = "I-max", default_value_t = 5)]
        i_max: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

fn load_config(path: &Path) -> mbdu::Result<ScenarioConfig> {
    ScenarioConfig::from_json(&std::fs::read_to_string(path)?)
}

fn parse_ckpt(arg: &str) -> Result<(Method, PathBuf), String> {
    let (m, p) = arg.split_once('=').ok_or_else(|| format!("expected METHOD=PATH, got `{arg}`"))?;
    let method = m.parse::<Method>().map_err(|e| e.to_string())?;
    Ok((method, PathBuf::from(p)))
}

fn run(command: Command) -> mbdu::Result<u8> {
    match command {
        Command::GenDataset {
            config,
            n,
            master_seed,
            out,
        } => {
            let cfg = load_config(&config)?;
            let ds = make_dataset(&cfg, n, master_seed.unwrap_or(cfg.master_seed))?;
            ds.save(&out)?;
            log::info!("wrote {n} realizations to {}", out.display());
        }
        Command::Train {
            config,
            dataset,
            method,
            t,
            i_max,
            out,
            epochs,
            batch,
            lr,
            estimator,
            seed,
            n_train,
            n_val,
            min_improvement,
            eta_ref,
            init,
        } => {
            let cfg = load_config(&config)?;
            let ds = Dataset::load(&dataset)?;
            let d = TrainingHyper::default();
            let hyper = TrainingHyper {
                epochs: epochs.unwrap_or(d.epochs),
                batch_size: batch.unwrap_or(d.batch_size),
                lr: lr.unwrap_or(d.lr),
                estimator: match estimator {
                    Some(EstimatorArg::Fd) => Estimator::CentralFd,
                    Some(EstimatorArg::Spsa) => Estimator::Spsa,
                    None => d.estimator,
                },
                seed: seed.unwrap_or(d.seed),
                n_train: n_train.unwrap_or(d.n_train),
                n_val: n_val.unwrap_or(d.n_val),
                min_rel_improvement: min_improvement.unwrap_or(d.min_rel_improvement),
                ..d
            };
            let warm = match init {
                Some(path) => {
                    let from = load_checkpoint(&path, Some(&cfg))?;
                    WarmStart {
                        eta_ref: eta_ref.or(Some(from.eta_ref)),
                        params: Some(from.params),
                    }
                }
                None => WarmStart {
                    eta_ref,
                    params: None,
                },
            };
            let (_, state) = train_from(&cfg, &ds, &hyper, method, i_max, t, &AoOptions::default(), &warm)?;
            save_checkpoint(&state, &out)?;
            log::info!("wrote checkpoint {}", out.display());
        }
        Command::Sweep {
            config,
            dataset,
            kind,
            grid,
            methods,
            n_eval,
            t,
            i_max,
            ckpts,
            eval_offset,
            allow_config_drift,
            threads,
            out,
        } => {
            let cfg = load_config(&config)?;
            let ds = Dataset::load(&dataset)?;
            let mut checkpoints = Vec::new();
            for arg in &ckpts {
                let (method, path) = match parse_ckpt(arg) {
                    Ok(v) => v,
                    Err(msg) => {
                        eprintln!("error: --ckpt: {msg}");
                        return Ok(EXIT_USAGE);
                    }
                };
                checkpoints.push((method, load_checkpoint(&path, Some(&cfg))?));
            }
            let threads = if threads == 0 {
                std::thread::available_parallelism().map_or(1, |n| n.get())
            } else {
                threads
            };
            let spec = SweepSpec {
                kind: match kind {
                    KindArg::Inner => SweepKind::Inner,
                    KindArg::Outer => SweepKind::Outer,
                    KindArg::Subcarriers => SweepKind::Subcarriers,
                },
                grid,
                methods,
                n_eval,
                t,
                i_max,
                checkpoints,
                eval_offset,
                allow_config_drift,
                threads,
                opts: AoOptions::default(),
            };
            let result = run_sweep(&spec, &cfg, &ds)?;
            result.write_csv(&out)?;
            let failed = result.rows.iter().filter(|r| r.failed).count();
            log::info!("wrote {} rows ({failed} failed) to {}", result.rows.len(), out.display());
        }
        Command::Check { config, level, seed } => {
            let cfg = load_config(&config)?;
            let level = match level {
                LevelArg::Fast => CheckLevel::Fast,
                LevelArg::Full => CheckLevel::Full,
            };
            let report = check_oracles(&cfg, seed, level);
            print!("{report}");
            if !report.all_passed() {
                return Ok(EXIT_CHECK);
            }
        }
        Command::Describe { config, t, i_max } => {
            let cfg = load_config(&config)?;
            print!("{}", describe(&cfg, t, i_max));
        }
    }
    Ok(0)
}
