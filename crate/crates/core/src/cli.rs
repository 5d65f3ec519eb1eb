//! Command-line front end.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use crate::analysis::{reuse_report, trace};
use crate::data::{load_cifar10, Dataset, NormalizationMode, Normalizer, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model::{deployment_table, parse_kv_lines, write_deployment_csv, Model, NetworkConfig, Variant};
use crate::selfcheck;
use crate::tensor::{Fault, Real};
use crate::trainer::{evaluate, write_log_csv, Checkpoint, Precision, TrainPlan, Trainer};

#[derive(Parser, Debug)]
#[command(name = "copanet", version, about = "Competitive pathway networks: build, train, inspect")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// File of key=value lines applied before any override.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one setting; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Overrides given as bare key=value arguments.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory; the effective config is written there.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = ["32", "64"])]
    precision: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Axis {
    K,
    M,
    Depth,
}

impl Axis {
    fn key(self) -> &'static str {
        match self {
            Axis::K => "k",
            Axis::M => "m",
            Axis::Depth => "depth",
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the per-stage layout and parameter count.
    Params {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model and write its log and checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
    /// Record winning-pathway statistics of one block.
    Trace {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Block to capture (defaults to the last).
        #[arg(long)]
        block: Option<usize>,
        /// Number of feature maps rendered as heatmaps.
        #[arg(long, default_value_t = 4)]
        top: usize,
    },
    /// Vary one setting and report parameters (and test error with --train).
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: Axis,
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<String>,
        #[arg(long)]
        train: bool,
    },
    /// Run the fast invariant suite.
    Selfcheck {
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

/// Where training and evaluation images come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic,
    Cifar10(PathBuf),
}

/// Network, schedule and data settings addressed by one flat key space.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub plan: TrainPlan,
    pub data: DataSource,
    pub normalization: NormalizationMode,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub data_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::default(),
            plan: TrainPlan::cifar(),
            data: DataSource::Synthetic,
            normalization: NormalizationMode::MeanStd,
            train_per_class: 100,
            test_per_class: 50,
            data_seed: 0,
        }
    }
}

fn parse<N: std::str::FromStr>(key: &str, value: &str) -> Result<N>
where
    N::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::config(format!("{key}={value}: {e}")))
}

impl RunConfig {
    pub const KEYS: [&'static str; 15] = [
        "epochs",
        "batch",
        "lr",
        "lr_drops",
        "lr_divisor",
        "momentum",
        "weight_decay",
        "augment",
        "seed",
        "precision",
        "data",
        "normalization",
        "train_per_class",
        "test_per_class",
        "data_seed",
    ];

    pub fn valid_keys() -> Vec<&'static str> {
        NetworkConfig::KEYS.iter().chain(Self::KEYS.iter()).copied().collect()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if NetworkConfig::KEYS.contains(&key) {
            return self.network.set(key, value);
        }
        let v = value.trim();
        match key {
            "epochs" => self.plan.total_epochs = parse(key, v)?,
            "batch" => self.plan.batch_size = parse(key, v)?,
            "lr" => self.plan.base_lr = parse(key, v)?,
            "lr_drops" => {
                self.plan.lr_drop_fractions = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',').map(|f| parse(key, f)).collect::<Result<_>>()?
                }
            }
            "lr_divisor" => self.plan.lr_drop_divisor = parse(key, v)?,
            "momentum" => self.plan.momentum = parse(key, v)?,
            "weight_decay" => self.plan.weight_decay = parse(key, v)?,
            "augment" => self.plan.augment = parse(key, v)?,
            "seed" => self.plan.seed = parse(key, v)?,
            "precision" => self.plan.precision = v.parse()?,
            "data" => {
                self.data = match v {
                    "synthetic" => DataSource::Synthetic,
                    dir => DataSource::Cifar10(PathBuf::from(dir)),
                }
            }
            "normalization" => {
                self.normalization = match v {
                    "meanstd" => NormalizationMode::MeanStd,
                    "scale255" => NormalizationMode::Scale255,
                    _ => return Err(Error::config(format!("normalization must be meanstd or scale255, got {v:?}"))),
                }
            }
            "train_per_class" => self.train_per_class = parse(key, v)?,
            "test_per_class" => self.test_per_class = parse(key, v)?,
            "data_seed" => self.data_seed = parse(key, v)?,
            _ => {
                return Err(Error::config(format!(
                    "unknown key {key:?}; valid keys: {}",
                    Self::valid_keys().join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn apply(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::usage(format!("expected key=value, got {assignment:?}")))?;
        self.set(k.trim(), v)
    }

    pub fn to_text(&self) -> String {
        let mut text = self.network.to_text();
        let p = &self.plan;
        let drops: Vec<String> = p.lr_drop_fractions.iter().map(f64::to_string).collect();
        let data = match &self.data {
            DataSource::Synthetic => "synthetic".to_string(),
            DataSource::Cifar10(d) => d.display().to_string(),
        };
        let normalization = match self.normalization {
            NormalizationMode::MeanStd => "meanstd",
            NormalizationMode::Scale255 => "scale255",
        };
        for (k, v) in [
            ("epochs", p.total_epochs.to_string()),
            ("batch", p.batch_size.to_string()),
            ("lr", p.base_lr.to_string()),
            ("lr_drops", drops.join(",")),
            ("lr_divisor", p.lr_drop_divisor.to_string()),
            ("momentum", p.momentum.to_string()),
            ("weight_decay", p.weight_decay.to_string()),
            ("augment", p.augment.to_string()),
            ("seed", p.seed.to_string()),
            ("precision", p.precision.to_string()),
            ("data", data),
            ("normalization", normalization.to_string()),
            ("train_per_class", self.train_per_class.to_string()),
            ("test_per_class", self.test_per_class.to_string()),
            ("data_seed", self.data_seed.to_string()),
        ] {
            text.push_str(&format!("{k}={v}\n"));
        }
        text
    }

    /// Train and test splits for the configured source.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        match &self.data {
            DataSource::Cifar10(dir) => load_cifar10(dir),
            DataSource::Synthetic => {
                let classes = self.network.num_classes;
                let train = SyntheticSpec::new(classes, self.train_per_class, self.data_seed).generate()?;
                let mut test = SyntheticSpec::new(classes, self.test_per_class, self.data_seed ^ TEST_SEED_SALT).generate()?;
                test.split = crate::data::Split::Test;
                Ok((train, test))
            }
        }
    }
}

/// Keeps the synthetic test split disjoint from the training split.
const TEST_SEED_SALT: u64 = 0x7e57_5eed_0000_0001;

/// Builds the effective config: file first, then `--set` and bare
/// overrides in command-line order, then `--seed` / `--precision`.
fn effective_config(common: &Common, sub: &ArgMatches) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::usage(format!("cannot read config {}: {e}", path.display())))?;
        for (k, v) in parse_kv_lines(&text)? {
            cfg.set(&k, &v)?;
        }
    }
    let mut ordered: Vec<(usize, &String)> = Vec::new();
    for (id, values) in [("set", &common.set), ("overrides", &common.overrides)] {
        if let Some(idx) = sub.indices_of(id) {
            ordered.extend(idx.zip(values));
        }
    }
    ordered.sort_by_key(|(i, _)| *i);
    for (_, a) in ordered {
        cfg.apply(a)?;
    }
    if let Some(seed) = common.seed {
        cfg.plan.seed = seed;
    }
    if let Some(p) = &common.precision {
        cfg.plan.precision = p.parse()?;
    }
    cfg.network.validate()?;
    Ok(cfg)
}

fn prepare_out(common: &Common, cfg: &RunConfig, default: &str) -> Result<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from(default));
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    Ok(dir)
}

fn echo_config(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    writeln!(out, "# effective configuration")?;
    for line in cfg.to_text().lines() {
        writeln!(out, "#   {line}")?;
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the command,
/// writing human-readable output to `out`.
pub fn run<I, S>(args: I, out: &mut dyn Write) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let matches = match Cli::command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    write!(out, "{}", e.render())?;
                    Ok(())
                }
                _ => Err(Error::usage(e.render().to_string())),
            };
        }
    };
    let cli = Cli::from_arg_matches(&matches).map_err(|e| Error::usage(e.to_string()))?;
    let sub = matches.subcommand().map(|(_, m)| m.clone()).expect("subcommand required");
    match cli.command {
        Command::Params { common } => {
            let cfg = effective_config(&common, &sub)?;
            cmd_params(&common, &cfg, out)
        }
        Command::Train { common } => {
            let cfg = effective_config(&common, &sub)?;
            match cfg.plan.precision {
                Precision::F32 => cmd_train::<f32>(&common, &cfg, out),
                Precision::F64 => cmd_train::<f64>(&common, &cfg, out),
            }
        }
        Command::Eval { common, checkpoint } => {
            let cfg = effective_config(&common, &sub)?;
            match cfg.plan.precision {
                Precision::F32 => cmd_eval::<f32>(&cfg, &checkpoint, out),
                Precision::F64 => cmd_eval::<f64>(&cfg, &checkpoint, out),
            }
        }
        Command::Trace {
            common,
            checkpoint,
            block,
            top,
        } => {
            let cfg = effective_config(&common, &sub)?;
            match cfg.plan.precision {
                Precision::F32 => cmd_trace::<f32>(&common, &cfg, &checkpoint, block, top, out),
                Precision::F64 => cmd_trace::<f64>(&common, &cfg, &checkpoint, block, top, out),
            }
        }
        Command::Sweep {
            common,
            axis,
            values,
            train,
        } => {
            let cfg = effective_config(&common, &sub)?;
            cmd_sweep(&common, &cfg, axis, &values, train, out)
        }
        Command::Selfcheck { inject_fault } => cmd_selfcheck(inject_fault, out),
    }
}

/// Runs the command line and maps failures to exit codes (1 usage or
/// configuration, 2 data, 3 numeric).
pub fn main_exit_code<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match run(args, &mut lock) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("copanet: {e}");
            e.exit_code()
        }
    }
}

fn cmd_params(common: &Common, cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    echo_config(cfg, out)?;
    let rows = deployment_table(&cfg.network)?;
    writeln!(
        out,
        "{:<11} {:>6} {:>6} {:>8} {:>8} {:>11} {:>11}  layers",
        "stage", "size", "units", "in", "out", "params", "cumulative"
    )?;
    for r in &rows {
        writeln!(
            out,
            "{:<11} {:>6} {:>6} {:>8} {:>8} {:>11} {:>11}  {}",
            r.stage, r.output_size, r.units, r.in_channels, r.out_channels, r.params, r.cumulative, r.layers
        )?;
    }
    let total = rows.last().map_or(0, |r| r.params);
    writeln!(out, "total parameters: {total} ({:.2}M)", total as f64 / 1e6)?;
    if common.out.is_some() {
        let dir = prepare_out(common, cfg, ".")?;
        write_deployment_csv(&rows, fs::File::create(dir.join("params.csv"))?)?;
    }
    Ok(())
}

fn train_model<T: Real>(
    cfg: &RunConfig,
    train: &Dataset,
    test: &Dataset,
    out: &mut dyn Write,
) -> Result<(Model<T>, Trainer<T>, Vec<crate::trainer::EpochLog>)> {
    let mut model: Model<T> = Model::build(&cfg.network)?;
    let normalizer = Normalizer::fit(train, cfg.normalization)?;
    let mut trainer = Trainer::new(cfg.plan.clone(), &mut model, normalizer)?;
    let log = trainer.run(&mut model, train, Some(test), |row, _| {
        writeln!(
            out,
            "epoch {:>4}  lr {:<8} loss {:.4}  train error {:.4}  test error {:.4}",
            row.epoch,
            row.lr,
            row.train_loss,
            row.train_error,
            row.test_error.unwrap_or(f64::NAN)
        )?;
        Ok(true)
    })?;
    Ok((model, trainer, log))
}

fn cmd_train<T: Real>(common: &Common, cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    echo_config(cfg, out)?;
    let dir = prepare_out(common, cfg, "copanet-run")?;
    let (train, test) = cfg.load_data()?;
    let (model, trainer, log) = train_model::<T>(cfg, &train, &test, out)?;
    write_log_csv(&log, fs::File::create(dir.join("train_log.csv"))?)?;
    Checkpoint::capture(&model, Some(&trainer)).save(&dir.join("checkpoint.bin"))?;
    let last = log.last().and_then(|r| r.test_error).unwrap_or(f64::NAN);
    writeln!(out, "final test error: {last:.4}")?;
    writeln!(out, "wrote {}", dir.display())?;
    Ok(())
}

fn load_checkpoint<T: Real>(cfg: &RunConfig, path: &Path, train: &Dataset) -> Result<(Model<T>, Normalizer)> {
    let ck = Checkpoint::load(path)?;
    let model = ck.restore_model::<T>()?;
    let normalizer = match ck.normalizer() {
        Ok(n) => n,
        Err(_) => Normalizer::fit(train, cfg.normalization)?,
    };
    Ok((model, normalizer))
}

fn cmd_eval<T: Real>(cfg: &RunConfig, checkpoint: &Path, out: &mut dyn Write) -> Result<()> {
    echo_config(cfg, out)?;
    let (train, test) = cfg.load_data()?;
    let (mut model, normalizer) = load_checkpoint::<T>(cfg, checkpoint, &train)?;
    let ev = evaluate(&mut model, &test, &normalizer, cfg.plan.batch_size)?;
    writeln!(out, "test loss {:.6}  test error {:.4}  ({} samples)", ev.loss, ev.error, test.len())?;
    Ok(())
}

fn cmd_trace<T: Real>(
    common: &Common,
    cfg: &RunConfig,
    checkpoint: &Path,
    block: Option<usize>,
    top: usize,
    out: &mut dyn Write,
) -> Result<()> {
    echo_config(cfg, out)?;
    let dir = prepare_out(common, cfg, "copanet-trace")?;
    let (train, test) = cfg.load_data()?;
    let (mut model, normalizer) = load_checkpoint::<T>(cfg, checkpoint, &train)?;
    let block = block.unwrap_or(model.network.blocks.len() - 1);
    let profile = trace(&mut model, &test, &normalizer, block, cfg.plan.batch_size)?;
    profile.write_csv(fs::File::create(dir.join("profile.csv"))?)?;
    let maps = profile.export_heatmaps(&dir.join("heatmaps"), top)?;
    writeln!(
        out,
        "traced block {block}: {} units x {} maps x {} categories",
        profile.units,
        profile.maps,
        profile.categories.len()
    )?;
    for p in &maps {
        writeln!(out, "heatmap {}", p.display())?;
    }
    if model.config.variant == Variant::R {
        let report = reuse_report(&model)?;
        report.write_csv(fs::File::create(dir.join("reuse.csv"))?)?;
        for b in 0..report.layout.len() {
            writeln!(out, "block {b} classifier weight L1 {:.4}", report.block_total(b))?;
        }
    }
    Ok(())
}

fn cmd_sweep(
    common: &Common,
    cfg: &RunConfig,
    axis: Axis,
    values: &[String],
    train: bool,
    out: &mut dyn Write,
) -> Result<()> {
    if values.is_empty() {
        return Err(Error::usage("sweep needs at least one value (--values a,b,...)"));
    }
    echo_config(cfg, out)?;
    let dir = prepare_out(common, cfg, "copanet-sweep")?;
    let data = if train { Some(cfg.load_data()?) } else { None };
    let mut w = csv::Writer::from_path(dir.join("sweep.csv"))?;
    w.write_record(["value", "params", "error"])?;
    writeln!(out, "{:>8} {:>12} {:>8}", axis.key(), "params", "error")?;
    for v in values {
        let mut c = cfg.clone();
        c.set(axis.key(), v)?;
        c.network.validate()?;
        let params = deployment_table(&c.network)?.last().map_or(0, |r| r.params);
        let error = match &data {
            Some((tr, te)) => {
                let mut sink = Vec::new();
                let log = match c.plan.precision {
                    Precision::F32 => train_model::<f32>(&c, tr, te, &mut sink)?.2,
                    Precision::F64 => train_model::<f64>(&c, tr, te, &mut sink)?.2,
                };
                log.last().and_then(|r| r.test_error)
            }
            None => None,
        };
        let err_text = error.map(|e| e.to_string()).unwrap_or_default();
        w.write_record([v.trim().to_string(), params.to_string(), err_text.clone()])?;
        writeln!(out, "{:>8} {:>12} {:>8}", v.trim(), params, err_text)?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_selfcheck(inject_fault: bool, out: &mut dyn Write) -> Result<()> {
    let opts = selfcheck::Options {
        fault: inject_fault.then_some(Fault::CorruptMaxBackward),
    };
    let outcomes = selfcheck::run(&opts);
    let mut failed = Vec::new();
    for o in &outcomes {
        let tag = if o.passed { "PASS" } else { "FAIL" };
        writeln!(out, "{tag} {}::{} ({:.2}s) {}", o.module, o.name, o.seconds, o.detail)?;
        if !o.passed {
            failed.push(format!("{}::{}", o.module, o.name));
        }
    }
    writeln!(out, "{} of {} invariants passed", outcomes.len() - failed.len(), outcomes.len())?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("self-check failed: {}", failed.join(", "))))
    }
}
