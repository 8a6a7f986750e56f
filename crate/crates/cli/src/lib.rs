//! The `tce` command line: dataset generation, training, evaluation, the
//! attention ablation and two verification probes.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or I/O error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use tce_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use tce_core::config::{format_key_values, parse_key_values};
use tce_core::data::{generate_dataset, Dataset, Split};
use tce_core::encoder::{receptive_field_by_prefix, receptive_field_probe, TcnLayerConfig};
use tce_core::gradcheck::{check_op, OP_NAMES, TOLERANCE};
use tce_core::trainer::{evaluate, train, Metrics, TrainConfig, TrainOutcome};

pub const EXIT_OK: u8 = 0;
pub const EXIT_VERIFICATION: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

/// File names written into a training output directory.
pub const CONFIG_FILE: &str = "config.txt";
pub const LOG_FILE: &str = "log.tsv";
pub const FINAL_CHECKPOINT: &str = "final.tce";
pub const BEST_CHECKPOINT: &str = "best.tce";
pub const ABLATION_FILE: &str = "ablation.tsv";

#[derive(Debug, Parser)]
#[command(name = "tce", version, about = "Temporal convolutional encoder for digit-string recognition")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic digit-string dataset file.
    Generate {
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// train, val or test; each split draws from its own seed range.
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write its log, config and checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Measure the TCN receptive field for each prefix of the layer stack.
    Probe {
        /// Number of layers; layer i has dilation 2^i.
        #[arg(long, default_value_t = 4)]
        layers: usize,
        #[arg(long, default_value_t = 3)]
        kernel: usize,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        /// `all` or one op name.
        #[arg(long, default_value = "all")]
        ops: String,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the four attention variants under one seed and compare them.
    Ablate {
        #[command(flatten)]
        run: TrainArgs,
        /// Held-out set the four final models are scored on.
        #[arg(long)]
        test: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// key=value run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training set; overrides `train_data`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Validation set; overrides `val_data`.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Extra key=value settings, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub no_ca: bool,
    #[arg(long)]
    pub no_sa: bool,
}

/// Training settings plus the dataset paths they refer to.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub train_data: Option<PathBuf>,
    /// Falls back to the first samples of the training set when absent.
    pub val_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
}

/// Validation samples borrowed from the training set when no validation
/// file is given.
pub const FALLBACK_VAL_SAMPLES: usize = 500;

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> anyhow::Result<()> {
        let path = || (!value.is_empty()).then(|| PathBuf::from(value));
        match key {
            "train_data" => self.train_data = path(),
            "val_data" => self.val_data = path(),
            "test_data" => self.test_data = path(),
            _ => {
                if !self.train.set(key, value)? {
                    bail!("unknown config key {key:?}");
                }
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> anyhow::Result<String> {
        let mut pairs = self.train.to_pairs()?;
        for (key, path) in [("train_data", &self.train_data), ("val_data", &self.val_data), ("test_data", &self.test_data)] {
            pairs.push((key.to_string(), path.as_ref().map(|p| p.display().to_string()).unwrap_or_default()));
        }
        Ok(format_key_values(&pairs))
    }

    /// Defaults, then the config file, then `--set` pairs, then flags.
    pub fn resolve(args: &TrainArgs) -> anyhow::Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = &args.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            for (k, v) in parse_key_values(&text).with_context(|| format!("parsing config {}", path.display()))? {
                cfg.set(&k, &v).with_context(|| format!("config {}", path.display()))?;
            }
        }
        for pair in &args.overrides {
            let Some((k, v)) = pair.split_once('=') else { bail!("--set expects KEY=VALUE, got {pair:?}") };
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(p) = &args.data {
            cfg.train_data = Some(p.clone());
        }
        if let Some(p) = &args.val {
            cfg.val_data = Some(p.clone());
        }
        if args.no_ca {
            cfg.train.model.backbone.use_ca = false;
        }
        if args.no_sa {
            cfg.train.model.backbone.use_sa = false;
        }
        cfg.train.validate()?;
        Ok(cfg)
    }
}

/// Maps a failure to its exit code: non-finite values during training are
/// verification failures, everything else is a usage or I/O error.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    use tce_core::Error as E;
    match err.downcast_ref::<E>() {
        Some(E::NonFinite { .. } | E::NonFiniteGradient { .. } | E::NonFiniteLoss { .. }) => EXIT_VERIFICATION,
        _ => EXIT_USAGE,
    }
}

pub fn run(cli: Cli) -> anyhow::Result<u8> {
    match cli.command {
        Command::Generate { count, seed, split, out } => cmd_generate(count, seed, &split, &out),
        Command::Train(args) => cmd_train(&args),
        Command::Eval { checkpoint, data } => cmd_eval(&checkpoint, &data),
        Command::Probe { layers, kernel } => cmd_probe(layers, kernel),
        Command::Gradcheck { ops, instances, seed } => cmd_gradcheck(&ops, instances, seed),
        Command::Ablate { run, test } => cmd_ablate(&run, test),
    }
}

fn read_dataset(path: &Path) -> anyhow::Result<Dataset> {
    Dataset::read(path).with_context(|| format!("reading dataset {}", path.display()))
}

pub fn cmd_generate(count: usize, seed: u64, split: &str, out: &Path) -> anyhow::Result<u8> {
    let split: Split = split.parse()?;
    generate_dataset(count, seed, split, out).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {count} samples to {}", out.display());
    Ok(EXIT_OK)
}

/// Trains per `cfg`, writing the resolved config, the log and both
/// checkpoints into `out_dir`.
pub fn train_into(cfg: &RunConfig, out_dir: &Path) -> anyhow::Result<TrainOutcome> {
    let train_path = cfg.train_data.as_ref().context("no training data: pass --data or set train_data")?;
    let train_set = read_dataset(train_path)?;
    let val_set = match &cfg.val_data {
        Some(p) => read_dataset(p)?,
        None => Dataset { samples: train_set.samples.iter().take(FALLBACK_VAL_SAMPLES).cloned().collect() },
    };
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    fs::write(out_dir.join(CONFIG_FILE), cfg.to_text()?)?;

    let log_path = out_dir.join(LOG_FILE);
    let mut log = fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    let mut write_error = None;
    let outcome = train(&cfg.train, &train_set, &val_set, |record| {
        let line = record.to_line();
        println!("{line}");
        if let Err(e) = writeln!(log, "{line}") {
            write_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_error {
        return Err(e).with_context(|| format!("writing {}", log_path.display()));
    }

    let iterations = cfg.train.iterations;
    let last = Checkpoint { model: outcome.model.clone(), optimizer: Some(outcome.optimizer.clone()), iteration: iterations };
    save_checkpoint(&last, &out_dir.join(FINAL_CHECKPOINT))?;
    let (best_iter, _, best_model) = &outcome.best;
    save_checkpoint(
        &Checkpoint { model: best_model.clone(), optimizer: None, iteration: *best_iter },
        &out_dir.join(BEST_CHECKPOINT),
    )?;
    Ok(outcome)
}

pub fn cmd_train(args: &TrainArgs) -> anyhow::Result<u8> {
    let cfg = RunConfig::resolve(args)?;
    let outcome = train_into(&cfg, &args.out_dir)?;
    let (iter, acc, _) = outcome.best;
    eprintln!("best val accuracy {acc:.4} at iteration {iter}; outputs in {}", args.out_dir.display());
    Ok(EXIT_OK)
}

pub fn format_metrics(m: &Metrics) -> String {
    format!("accuracy={:?} ned={:?} loss={:?}", m.accuracy, m.normalized_edit_distance, m.loss)
}

pub fn cmd_eval(checkpoint: &Path, data: &Path) -> anyhow::Result<u8> {
    let ckpt = load_checkpoint(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let dataset = read_dataset(data)?;
    println!("{}", format_metrics(&evaluate(&ckpt.model, &dataset)?));
    Ok(EXIT_OK)
}

/// Receptive field of every prefix of a `layers`-deep stack with dilations
/// 1, 2, 4, ..., starting from the empty stack.
pub fn probe_table(layers: usize, kernel: usize) -> anyhow::Result<Vec<(usize, usize)>> {
    if kernel == 0 {
        bail!("kernel must be at least 1");
    }
    if layers >= usize::BITS as usize / 2 {
        bail!("--layers {layers} is too deep to probe");
    }
    let dilations: Vec<usize> = (0..layers).map(|i| 1 << i).collect();
    let stack = TcnLayerConfig::stack(kernel, 1, &dilations, 0.0);
    let mut rows = vec![(0, receptive_field_probe(&[])?)];
    rows.extend(receptive_field_by_prefix(&stack)?.into_iter().enumerate().map(|(i, r)| (i + 1, r)));
    Ok(rows)
}

pub fn cmd_probe(layers: usize, kernel: usize) -> anyhow::Result<u8> {
    println!("layers\treceptive_field");
    for (k, r) in probe_table(layers, kernel)? {
        println!("{k}\t{r}");
    }
    Ok(EXIT_OK)
}

pub fn cmd_gradcheck(ops: &str, instances: usize, seed: u64) -> anyhow::Result<u8> {
    let names: Vec<&str> = if ops == "all" {
        OP_NAMES.to_vec()
    } else if OP_NAMES.contains(&ops) {
        vec![ops]
    } else {
        bail!("unknown op {ops:?}; choose all or one of: {}", OP_NAMES.join(", "));
    };
    if instances == 0 {
        bail!("--instances must be at least 1");
    }
    println!("op\tinstances\tredraws\tmax_rel_error\tstatus");
    let mut failed = false;
    for name in names {
        let r = check_op(name, instances, seed)?;
        failed |= !r.passed();
        println!(
            "{}\t{}\t{}\t{:.3e}\t{}",
            r.name,
            r.instances,
            r.redraws,
            r.max_rel_error,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    if failed {
        eprintln!("some ops exceed the tolerance {TOLERANCE:e}");
        return Ok(EXIT_VERIFICATION);
    }
    Ok(EXIT_OK)
}

/// Attention toggles of the four ablation runs, weakest first.
pub const ABLATION_VARIANTS: [(&str, bool, bool); 4] =
    [("baseline", false, false), ("ca", true, false), ("sa", false, true), ("ca+sa", true, true)];

pub fn cmd_ablate(args: &TrainArgs, test: Option<PathBuf>) -> anyhow::Result<u8> {
    if args.no_ca || args.no_sa {
        bail!("ablate sets the attention toggles itself; drop --no-ca/--no-sa");
    }
    let mut base = RunConfig::resolve(args)?;
    if test.is_some() {
        base.test_data = test;
    }
    let test_path = base.test_data.clone().context("no test data: pass --test or set test_data")?;
    let test_set = read_dataset(&test_path)?;
    fs::create_dir_all(&args.out_dir)?;
    let mut table = String::from("variant\tuse_ca\tuse_sa\titerations\taccuracy\tned\tloss\n");
    for (name, use_ca, use_sa) in ABLATION_VARIANTS {
        let mut cfg = base.clone();
        cfg.train.model.backbone.use_ca = use_ca;
        cfg.train.model.backbone.use_sa = use_sa;
        eprintln!("== {name}");
        let outcome = train_into(&cfg, &args.out_dir.join(name))?;
        let m = evaluate(&outcome.model, &test_set)?;
        table.push_str(&format!(
            "{name}\t{use_ca}\t{use_sa}\t{}\t{:?}\t{:?}\t{:?}\n",
            cfg.train.iterations, m.accuracy, m.normalized_edit_distance, m.loss
        ));
    }
    fs::write(args.out_dir.join(ABLATION_FILE), &table)?;
    print!("{table}");
    Ok(EXIT_OK)
}
