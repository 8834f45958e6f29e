//! Single binary tying dataset generation, training and evaluation into
//! reproducible runs driven by a TOML config file; flags override the file.
//!
//! Exit codes: 0 success, 1 failed `--check`, 2 config or shape error,
//! 3 I/O error, 4 numeric failure.

mod config;

use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use chanest_core::eval::{
    self, records_to_csv, sha256_hex, sweep_doppler, sweep_snr, EvalRecord, ModelSet, RunManifest,
};
use chanest_core::ha02::{self, Ha02Config, Ha02Params, WeightFileError};
use chanest_core::ofdm::FrameConfig;
use chanest_core::rng::derive_seed;
use chanest_core::training::{
    self, generate_dataset, load_checkpoint, read_shards, save_checkpoint, split_dataset,
    write_dataset, DatasetError, DatasetHeader, TrainError, Trainer,
};

use config::{load_config, LoadedConfig};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(String),
    Numeric(String),
    CheckFailed(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) | CliError::Io(m) | CliError::Numeric(m) | CliError::CheckFailed(m) => {
                write!(f, "{m}")
            }
        }
    }
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::CheckFailed(_) => 1,
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io(io) => CliError::Io(format!("dataset I/O error: {io}")),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<WeightFileError> for CliError {
    fn from(e: WeightFileError) -> Self {
        match e {
            WeightFileError::Io(io) => CliError::Io(format!("weight file I/O error: {io}")),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TrainError::Io(io) => CliError::Io(format!("checkpoint I/O error: {io}")),
            TrainError::Weights(w) => w.into(),
            TrainError::Model(m) => CliError::Numeric(m.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<eval::EvalError> for CliError {
    fn from(e: eval::EvalError) -> Self {
        match e {
            eval::EvalError::Io { .. } => CliError::Io(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "chanest",
    about = "OFDM channel-estimation workbench: simulate ETU slots, train the HA02 estimator, sweep MSE and denoising gain"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// TOML run configuration; built-in defaults when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Worker threads (default: available parallelism, or CHANEST_THREADS)
    #[arg(long)]
    threads: Option<usize>,
    /// Overwrite existing output files
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate slots and write a dataset shard
    Generate {
        #[command(flatten)]
        common: CommonArgs,
        /// Number of samples (default: train.dataset_size from the config)
        #[arg(long)]
        count: Option<usize>,
        /// Output file (default: paths.dataset from the config)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train HA02 on a dataset and write the best-validation weights
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Dataset shard(s), comma separated (default: paths.dataset)
        #[arg(long, value_delimiter = ',')]
        dataset: Vec<PathBuf>,
        /// Stop after this epoch (default: train.epochs)
        #[arg(long)]
        epochs: Option<usize>,
        /// Use only the first N samples of the dataset
        #[arg(long)]
        count_limit: Option<usize>,
        /// Resume from a training checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Weight file to write (default: paths.weights)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run MSE/denoising-gain sweeps against the classical baselines
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        /// Weight file (default: paths.weights)
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Which sweep to run
        #[arg(long, value_enum, default_value_t = SweepKind::Both)]
        sweep: SweepKind,
        /// Realizations per sweep point (default: sweep.n_realizations)
        #[arg(long)]
        n: Option<usize>,
        /// Additional pruned model variants, e.g. 0.1,0.3,0.5
        #[arg(long, value_delimiter = ',')]
        prune: Vec<f64>,
        /// Results directory (default: paths.results)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Exit nonzero unless HA02 beats LS-bilinear at every point
        #[arg(long)]
        check: bool,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SweepKind {
    Snr,
    Doppler,
    Both,
}

fn init_threads(flag: Option<usize>) {
    let from_env = std::env::var("CHANEST_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok());
    if let Some(n) = flag.or(from_env) {
        // results are independent of the pool size; this only bounds CPU use
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// Refuse to clobber outputs without --force; require the parent directory
/// to exist so typos fail before hours of compute.
fn check_output(path: &Path, force: bool) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() && !parent.is_dir() {
            return Err(CliError::Io(format!(
                "output directory {} does not exist",
                parent.display()
            )));
        }
    }
    if path.exists() && !force {
        return Err(CliError::Io(format!(
            "{} already exists (use --force to overwrite)",
            path.display()
        )));
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate { common, count, out } => cmd_generate(common, count, out),
        Command::Train {
            common,
            dataset,
            epochs,
            count_limit,
            resume,
            out,
        } => cmd_train(common, dataset, epochs, count_limit, resume, out),
        Command::Evaluate {
            common,
            weights,
            sweep,
            n,
            prune,
            out,
            check,
        } => cmd_evaluate(common, weights, sweep, n, prune, out, check),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn cmd_generate(
    common: CommonArgs,
    count: Option<usize>,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    init_threads(common.threads);
    let LoadedConfig { config, .. } = load_config(common.config.as_deref())?;
    let out = out.unwrap_or_else(|| config.paths.dataset.clone());
    check_output(&out, common.force)?;
    let count = count.unwrap_or(config.train.dataset_size);
    let frame = FrameConfig::default();
    let pdp = config.profile()?;
    let train_cfg = config.train_config();
    let samples = generate_dataset(count, &train_cfg, &frame, &pdp);
    let header = DatasetHeader::for_config(&train_cfg, count as u64, &config.channel.profile);
    write_dataset(&out, &header, &samples)?;
    let bytes = std::fs::metadata(&out)
        .map_err(|e| CliError::Io(format!("cannot stat {}: {e}", out.display())))?
        .len();
    println!(
        "wrote {count} samples ({bytes} bytes) to {} [seed {}]",
        out.display(),
        train_cfg.seed
    );
    Ok(())
}

fn cmd_train(
    common: CommonArgs,
    dataset: Vec<PathBuf>,
    epochs: Option<usize>,
    count_limit: Option<usize>,
    resume: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    init_threads(common.threads);
    let LoadedConfig { config, .. } = load_config(common.config.as_deref())?;
    let out = out.unwrap_or_else(|| config.paths.weights.clone());
    let history_path = out.with_extension("history.csv");
    let ckpt_path = out.with_extension("ckpt");
    check_output(&out, common.force)?;
    check_output(&history_path, common.force)?;
    if resume.as_deref() != Some(ckpt_path.as_path()) {
        check_output(&ckpt_path, common.force)?;
    }

    let shards: Vec<PathBuf> = if dataset.is_empty() {
        vec![config.paths.dataset.clone()]
    } else {
        dataset
    };
    let (header, mut samples) = read_shards(&shards)?;
    if header.input_dim != 144 || header.label_dim != 2016 {
        return Err(CliError::Config(format!(
            "dataset layout {}x{} does not match the model (144x2016)",
            header.input_dim, header.label_dim
        )));
    }
    if let Some(limit) = count_limit {
        samples.truncate(limit);
    }
    let train_cfg = config.train_config();
    let (train_set, val_set) = split_dataset(samples, train_cfg.validation_fraction);
    println!(
        "training on {} samples, validating on {}",
        train_set.len(),
        val_set.len()
    );

    let mut trainer = match resume {
        Some(path) => {
            let t = load_checkpoint(&path)?;
            println!("resumed from {} at epoch {}", path.display(), t.next_epoch);
            t
        }
        None => {
            let params: Ha02Params<f32> =
                Ha02Params::init(&Ha02Config::default(), derive_seed(train_cfg.seed, 0x1217));
            Trainer::new(params)
        }
    };
    let last_epoch = epochs.unwrap_or(train_cfg.epochs);
    training::train(
        &mut trainer,
        &train_set,
        &val_set,
        &train_cfg,
        last_epoch,
        |s| match s.val_loss {
            Some(v) => println!(
                "epoch {:3}/{last_epoch}  lr {:.6}  train {:.6}  val {:.6}",
                s.epoch, s.lr, s.train_loss, v
            ),
            None => println!(
                "epoch {:3}/{last_epoch}  lr {:.6}  train {:.6}",
                s.epoch, s.lr, s.train_loss
            ),
        },
    )?;

    ha02::save_params(&out, &trainer.best_params)?;
    let mut csv = String::from("epoch,lr,train_loss,val_loss\n");
    for h in &trainer.history {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            h.epoch,
            h.lr,
            h.train_loss,
            h.val_loss.map_or(String::from("-"), |v| v.to_string())
        ));
    }
    std::fs::write(&history_path, csv)
        .map_err(|e| CliError::Io(format!("cannot write {}: {e}", history_path.display())))?;
    save_checkpoint(&ckpt_path, &trainer)?;
    println!(
        "best validation loss {:.6}; weights -> {}, history -> {}, checkpoint -> {}",
        trainer.best_val_loss,
        out.display(),
        history_path.display(),
        ckpt_path.display()
    );
    Ok(())
}

fn cmd_evaluate(
    common: CommonArgs,
    weights: Option<PathBuf>,
    sweep: SweepKind,
    n: Option<usize>,
    prune: Vec<f64>,
    out: Option<PathBuf>,
    check: bool,
) -> Result<(), CliError> {
    init_threads(common.threads);
    let LoadedConfig { config, sha256 } = load_config(common.config.as_deref())?;
    let weights_path = weights.unwrap_or_else(|| config.paths.weights.clone());
    let params = ha02::load_params(&weights_path)?;
    let weights_sha = sha256_hex(&std::fs::read(&weights_path).map_err(|e| {
        CliError::Io(format!("cannot read {}: {e}", weights_path.display()))
    })?);

    for &r in &prune {
        if !(0.0..1.0).contains(&r) {
            return Err(CliError::Config(format!(
                "pruning ratio {r} outside [0, 1)"
            )));
        }
    }
    let mut models = ModelSet::with_ha02(params);
    models.add_pruned(&prune);

    let out_dir = out.unwrap_or_else(|| config.paths.results.clone());
    if let Some(parent) = out_dir.parent() {
        if !parent.as_os_str().is_empty() && !parent.is_dir() {
            return Err(CliError::Io(format!(
                "output directory {} does not exist",
                parent.display()
            )));
        }
    }
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", out_dir.display())))?;

    let sweep_cfg = config.sweep_config(n);
    let frame = FrameConfig::default();
    let pdp = config.profile()?;

    let mut all_records: Vec<(&'static str, Vec<EvalRecord>)> = Vec::new();
    if sweep == SweepKind::Snr || sweep == SweepKind::Both {
        let records = sweep_snr(&models, &frame, &pdp, &sweep_cfg);
        print_records("SNR sweep (dB)", &records);
        all_records.push(("snr", records));
    }
    if sweep == SweepKind::Doppler || sweep == SweepKind::Both {
        let records = sweep_doppler(&models, &frame, &pdp, &sweep_cfg);
        print_records("Doppler sweep (Hz)", &records);
        all_records.push(("doppler", records));
    }

    let mut methods: Vec<String> = Vec::new();
    for (name, records) in &all_records {
        let path = out_dir.join(format!("{name}.csv"));
        check_output(&path, common.force)?;
        std::fs::write(&path, records_to_csv(records))
            .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))?;
        println!("wrote {}", path.display());
        for r in records {
            if !methods.contains(&r.method) {
                methods.push(r.method.clone());
            }
        }
    }
    let manifest_path = out_dir.join("manifest.txt");
    check_output(&manifest_path, common.force)?;
    eval::write_manifest(
        &manifest_path,
        &RunManifest {
            config_sha256: sha256,
            master_seed: sweep_cfg.seed,
            n_realizations: sweep_cfg.n_realizations,
            weights_sha256: Some(weights_sha),
            methods,
        },
    )?;
    println!("wrote {}", manifest_path.display());

    if check {
        let mut failures = Vec::new();
        for (name, records) in &all_records {
            let ls: Vec<&EvalRecord> =
                records.iter().filter(|r| r.method == "ls_bilinear").collect();
            let model: Vec<&EvalRecord> = records.iter().filter(|r| r.method == "ha02").collect();
            for (l, m) in ls.iter().zip(&model) {
                if m.mse >= l.mse {
                    failures.push(format!(
                        "{name} point {}: ha02 MSE {} >= ls_bilinear MSE {}",
                        l.sweep_value, m.mse, l.mse
                    ));
                }
            }
        }
        if !failures.is_empty() {
            return Err(CliError::CheckFailed(format!(
                "HA02 fails to beat LS-bilinear:\n  {}",
                failures.join("\n  ")
            )));
        }
        println!("check passed: HA02 beats LS-bilinear at every sweep point");
    }
    Ok(())
}

fn print_records(title: &str, records: &[EvalRecord]) {
    println!("{title}");
    println!("{:>10} {:>18} {:>14} {:>10} {:>7}", "point", "method", "mse", "gain_db", "n");
    for r in records {
        println!(
            "{:>10.2} {:>18} {:>14.6e} {:>10.3} {:>7}",
            r.sweep_value, r.method, r.mse, r.gain_db, r.n
        );
    }
}
