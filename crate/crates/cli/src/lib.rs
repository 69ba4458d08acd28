//! Command-line driver: configuration, artifacts and exit codes.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chanest::eval::{bench_scan_scaling, estimator_runtime, monte_carlo_sweep, Estimator};
use chanest::mambanet::count_parameters;
use chanest::training::{generate_dataset, train, Dataset};
use chanest::{Checkpoint, Error, MambaNetParams, Result};
use clap::{Args, Parser, Subcommand};

pub use config::{Profile, RunConfig};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Process exit statuses.
pub mod exit {
    pub const OK: u8 = 0;
    pub const CONFIG: u8 = 2;
    pub const RUNTIME: u8 = 3;
    pub const CHECK_FAILED: u8 = 4;
}

#[derive(Debug, Parser)]
#[command(name = "chanest", version, about = "OFDM channel estimation workbench")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Flat `section.key = value` file applied over the profile defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Profile::Desk)]
    pub profile: Profile,
    /// Worker threads for sample generation, minibatches and trials.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a training dataset.
    GenData,
    /// Train MambaNet and keep the best-validation checkpoint.
    Train {
        /// Dataset file; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Monte Carlo MSE/BER sweep over SNR.
    Eval {
        /// Checkpoint to include as the MambaNet estimator.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Also report per-slot estimator runtimes relative to LS.
        #[arg(long)]
        timing: bool,
    },
    /// Run the built-in invariant checks.
    Selftest,
    /// Time the scan against a dense attention product across lengths.
    BenchScan {
        #[arg(long, default_value_t = 5)]
        reps: usize,
        /// Smallest and largest power of two for the sequence length.
        #[arg(long, num_args = 2, default_values_t = [8, 14])]
        log2_range: Vec<u32>,
        /// Fail with the check exit code when a slope is out of range.
        #[arg(long)]
        check: bool,
    },
    /// Print the parameter count and its breakdown.
    CountParams,
}

/// Failure carrying the exit status it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config { .. } => exit::CONFIG,
            _ => exit::RUNTIME,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn io_fail(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure {
        code: exit::RUNTIME,
        message: format!("{}: {e}", path.display()),
    }
}

/// Resolve the effective configuration from profile, file and flags.
pub fn load_config(g: &GlobalArgs) -> std::result::Result<RunConfig, Failure> {
    let mut cfg = RunConfig::for_profile(g.profile);
    if let Some(path) = &g.config {
        let text = fs::read_to_string(path).map_err(|e| Failure {
            code: exit::CONFIG,
            message: format!("{}: {e}", path.display()),
        })?;
        cfg.apply_text(&text)?;
    }
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &g.out {
        cfg.out_dir = out.clone();
    }
    if let Some(w) = g.workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Seeds for the independent random streams of a run.
struct Seeds {
    data: u64,
    init: u64,
    shuffle: u64,
    eval: u64,
}

impl Seeds {
    fn new(seed: u64) -> Self {
        Self {
            data: seed,
            init: seed.wrapping_add(1),
            shuffle: seed.wrapping_add(2),
            eval: seed.wrapping_add(3),
        }
    }
}

fn provenance(cfg: &RunConfig) -> Vec<(String, String)> {
    vec![
        ("tool".into(), format!("chanest {VERSION}")),
        ("config_hash".into(), cfg.hash()),
        ("seed".into(), cfg.seed.to_string()),
        ("profile".into(), cfg.profile.name().into()),
    ]
}

fn comment_header(meta: &[(String, String)]) -> String {
    let parts: Vec<String> = meta.iter().map(|(k, v)| format!("{k}={v}")).collect();
    format!("# {}\n", parts.join(" "))
}

fn ensure_out(cfg: &RunConfig) -> std::result::Result<(), Failure> {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| io_fail(&cfg.out_dir, e))
}

fn write_text(path: &Path, text: &str) -> std::result::Result<(), Failure> {
    fs::write(path, text).map_err(|e| io_fail(path, e))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn dataset_for(cfg: &RunConfig) -> Result<Dataset> {
    let mut data = generate_dataset(
        &cfg.data,
        &cfg.power_delay_profile()?,
        &cfg.baseband,
        Seeds::new(cfg.seed).data,
    )?;
    data.header = provenance(cfg);
    Ok(data)
}

fn cmd_gen_data(cfg: &RunConfig) -> std::result::Result<u8, Failure> {
    ensure_out(cfg)?;
    let data = dataset_for(cfg)?;
    let path = cfg.out_dir.join("dataset.bin");
    data.save(&path)?;
    println!(
        "wrote {} ({} train / {} validation samples)",
        path.display(),
        data.train().len(),
        data.validation().len()
    );
    Ok(exit::OK)
}

fn cmd_train(cfg: &RunConfig, data_path: Option<&Path>) -> std::result::Result<u8, Failure> {
    ensure_out(cfg)?;
    let data = match data_path {
        Some(p) => {
            let d = Dataset::load(p)?;
            let mcfg = cfg.model_config();
            if d.n_f != mcfg.n_f || d.n_s != mcfg.n_s {
                return Err(Failure {
                    code: exit::CONFIG,
                    message: format!(
                        "baseband.n_f: dataset is {}x{}, model expects {}x{}",
                        d.n_f, d.n_s, mcfg.n_f, mcfg.n_s
                    ),
                });
            }
            d
        }
        None => dataset_for(cfg)?,
    };
    let seeds = Seeds::new(cfg.seed);
    let init = MambaNetParams::init(&cfg.model_config(), seeds.init)?;
    let tcfg = chanest::TrainConfig {
        seed: seeds.shuffle,
        ..cfg.train.clone()
    };
    eprintln!(
        "training {} parameters on {} samples for {} epochs",
        init.set.num_elements(),
        data.train().len(),
        tcfg.max_epochs
    );
    let outcome = train(init, &data, &tcfg, |r| {
        eprintln!(
            "epoch {:>3}  lr {:.2e}  train {:.6e}  val {:.6e}",
            r.epoch, r.lr, r.train_loss, r.val_loss
        )
    })?;
    let mut header = provenance(cfg);
    header.push(("best_epoch".into(), outcome.best_epoch.to_string()));
    let ckpt_path = cfg.out_dir.join("model.ckpt");
    let mut bytes = Vec::new();
    outcome.best.to_checkpoint(&header).write_to(&mut bytes)?;
    fs::write(&ckpt_path, &bytes).map_err(|e| io_fail(&ckpt_path, e))?;
    println!("wrote {} (best epoch {})", ckpt_path.display(), outcome.best_epoch);
    let history = comment_header(&provenance(cfg)) + &outcome.history_csv();
    write_text(&cfg.out_dir.join("history.csv"), &history)?;
    Ok(exit::OK)
}

fn cmd_eval(cfg: &RunConfig, model: Option<&Path>, timing: bool) -> std::result::Result<u8, Failure> {
    ensure_out(cfg)?;
    let default_model = cfg.out_dir.join("model.ckpt");
    let model_path = model.map(Path::to_path_buf).or_else(|| default_model.exists().then_some(default_model));
    let loaded = match &model_path {
        Some(p) => {
            let bytes = fs::read(p).map_err(|e| io_fail(p, e))?;
            let ckpt = Checkpoint::read_from(&mut bytes.as_slice())?;
            Some((MambaNetParams::from_checkpoint(&ckpt)?, config::short_hash(&bytes)))
        }
        None => None,
    };
    let mut estimators = vec![Estimator::Ls, Estimator::Mmse];
    if let Some((p, _)) = &loaded {
        estimators.push(Estimator::MambaNet(p));
    }
    estimators.push(Estimator::PerfectCsi);
    let pdp = cfg.power_delay_profile()?;
    let mut report = monte_carlo_sweep(&estimators, &cfg.eval, &pdp, &cfg.baseband, Seeds::new(cfg.seed).eval)?;
    report.metadata = provenance(cfg);
    report.metadata.push((
        "model".into(),
        loaded.as_ref().map_or_else(|| "none".into(), |(_, id)| id.clone()),
    ));
    print!("{}", report.to_table());
    write_text(&cfg.out_dir.join("sweep.csv"), &report.to_csv())?;
    if timing {
        println!("per-slot runtime on this host (not comparable across machines):");
        for r in estimator_runtime(&estimators, &pdp, &cfg.baseband, 50, cfg.seed)? {
            let ratio = r.ratio_to_ls.map_or_else(|| "-".into(), |v| format!("{v:.2}"));
            println!("  {:<10} {:>12.3e} s   x{ratio} vs ls", r.estimator, r.seconds_per_slot);
        }
    }
    Ok(exit::OK)
}

fn cmd_selftest(cfg: &RunConfig) -> std::result::Result<u8, Failure> {
    let results = chanest::selftest::run_all(cfg.seed);
    for r in &results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} of {} checks passed", results.len() - failed, results.len());
    Ok(if failed == 0 { exit::OK } else { exit::CHECK_FAILED })
}

fn cmd_bench_scan(cfg: &RunConfig, reps: usize, range: &[u32], check: bool) -> std::result::Result<u8, Failure> {
    let (lo, hi) = (range[0], range[1]);
    if lo > hi || hi > 24 {
        return Err(Failure {
            code: exit::CONFIG,
            message: "log2-range: expected LO <= HI <= 24".into(),
        });
    }
    let lengths: Vec<usize> = (lo..=hi).map(|e| 1usize << e).collect();
    let report = bench_scan_scaling(&lengths, reps, cfg.model_config().c_spread, cfg.seed)?;
    print!("{}{}", comment_header(&provenance(cfg)), report.to_csv());
    println!("scan slope {:.3} (expected 0.8..1.2)", report.scan_slope);
    println!("attention slope {:.3} (expected 1.7..2.3)", report.attention_slope);
    let ok = (0.8..=1.2).contains(&report.scan_slope) && (1.7..=2.3).contains(&report.attention_slope);
    Ok(if check && !ok { exit::CHECK_FAILED } else { exit::OK })
}

fn cmd_count_params(cfg: &RunConfig) -> std::result::Result<u8, Failure> {
    let r = count_parameters(&cfg.model_config());
    for (group, n) in &r.breakdown {
        println!("{group:<28} {n:>9}");
    }
    println!("{:<28} {:>9}", "total", r.total);
    println!("attention projections        {:>9} (grows with L^2)", r.quadratic);
    println!("total growth exponent when doubling n_f: {:.3}", r.scaling_exponent);
    println!("reference size: 0.35M; this configuration: {:.3}M", r.total as f64 / 1e6);
    Ok(exit::OK)
}

pub fn execute(cli: &Cli) -> std::result::Result<u8, Failure> {
    let cfg = load_config(&cli.global)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if cfg.workers > 0 {
        pool = pool.num_threads(cfg.workers);
    }
    let pool = pool.build().map_err(|e| Failure {
        code: exit::RUNTIME,
        message: e.to_string(),
    })?;
    pool.install(|| match &cli.command {
        Command::GenData => cmd_gen_data(&cfg),
        Command::Train { data } => cmd_train(&cfg, data.as_deref()),
        Command::Eval { model, timing } => cmd_eval(&cfg, model.as_deref(), *timing),
        Command::Selftest => cmd_selftest(&cfg),
        Command::BenchScan { reps, log2_range, check } => cmd_bench_scan(&cfg, *reps, log2_range, *check),
        Command::CountParams => cmd_count_params(&cfg),
    })
}

/// Parse `argv`, run, and map the outcome to an exit status.
pub fn run<I, T>(argv: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::CONFIG } else { exit::OK });
        }
    };
    match execute(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
