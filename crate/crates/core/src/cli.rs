//! Command-line entry points.
//!
//! Every command reads one TOML file:
//!
//! ```toml
//! seed = 7
//! output_dir = "runs/demo"
//!
//! [dataset]            # a synthetic spec, or `root` + `labels` for files
//! family = "sliding_line"
//! n = 50
//!
//! [model]              # input_shape is inferred when omitted
//! kind = "cnn"
//! conv_channels = [4]
//! hidden_sizes = [16]
//!
//! [training]           # settings shared by every mode
//! epochs = 30
//!
//! [modes.l2]           # per-mode overrides
//! l2_coefficient = 1e-3
//!
//! [evaluation]
//! folds = 5
//! stride = 5
//! ```

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::attribution::{
    expected_gradients_batch, local_accuracy, logit_class, write_attributions_csv,
    AttributionConfig, AttributionRow, BackgroundSet, LocalAccuracyReference,
};
use crate::data::{generate, load_frame_dataset, Dataset, DatasetKind, SyntheticSpec};
use crate::evaluation::{
    build_blocks, experiment_split, fold_blocks, fold_setup, instance_shape, run_experiment,
    subset_sensitivity_experiment, summary_table, write_experiment, ExperimentConfig,
};
use crate::models::{predict_logits, ModelParameters, ModelSpec};
use crate::seeds;
use crate::training::{select_best_epoch, Checkpoint, Trainer, TrainingConfig, TrainingMode};

/// Environment variable that overrides the configured output directory.
pub const OUT_DIR_ENV: &str = "ATTRPRIOR_OUT_DIR";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "attrprior", version, about = "Attribution-prior training for scarce-data classifiers")]
pub struct Cli {
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one mode on one fold and write its loss curve and checkpoint.
    Train(TrainArgs),
    /// Cross-validate every configured mode and write metrics.csv.
    Experiment(ExperimentArgs),
    /// Attribute every dataset instance with a saved model.
    Attribute(AttributeArgs),
    /// Compare base and xaiaug on the full dataset and on subsets.
    Sensitivity(SensitivityArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Root seed, replacing the configured one.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, env = OUT_DIR_ENV)]
    pub out: Option<PathBuf>,
    /// Frame-block stride, replacing the configured one.
    #[arg(long)]
    pub stride: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, default_value = "xaiaug")]
    pub mode: TrainingMode,
    /// Fold held out as the test set.
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
    /// Checkpoint directory to resume from.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Restrict to these modes (repeatable).
    #[arg(long)]
    pub mode: Vec<TrainingMode>,
    #[arg(long)]
    pub parallel_folds: bool,
}

#[derive(Debug, Args)]
pub struct AttributeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Model file written by `train` (`model.bin`).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Mode whose attribution settings apply.
    #[arg(long, default_value = "xaiaug")]
    pub mode: TrainingMode,
}

#[derive(Debug, Args)]
pub struct SensitivityArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Number of subsets, replacing the configured one.
    #[arg(long)]
    pub subsets: Option<usize>,
    #[arg(long)]
    pub parallel_folds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileDataset {
    pub root: PathBuf,
    pub labels: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    Files(FileDataset),
}

fn default_k() -> usize {
    5
}
fn default_stride() -> usize {
    5
}
fn default_subsets() -> usize {
    3
}
fn default_modes() -> Vec<TrainingMode> {
    TrainingMode::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSection {
    #[serde(default = "default_k")]
    pub folds: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default)]
    pub stratified: bool,
    #[serde(default = "default_modes")]
    pub modes: Vec<TrainingMode>,
    #[serde(default = "default_subsets")]
    pub subset_count: usize,
    #[serde(default)]
    pub local_accuracy_reference: LocalAccuracyReference,
    /// Attribution settings for local accuracy and `attribute`.
    #[serde(default)]
    pub attribution: Option<AttributionConfig>,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            folds: default_k(),
            stride: default_stride(),
            stratified: false,
            modes: default_modes(),
            subset_count: default_subsets(),
            local_accuracy_reference: LocalAccuracyReference::Classifier,
            attribution: None,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    output_dir: Option<PathBuf>,
    dataset: toml::Table,
    model: toml::Table,
    #[serde(default)]
    training: toml::Table,
    #[serde(default)]
    modes: BTreeMap<String, toml::Table>,
    #[serde(default)]
    evaluation: EvaluationSection,
}

/// A parsed and fully defaulted config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetSource,
    /// Input shape still unset when the file omitted it.
    pub model: toml::Table,
    pub modes: BTreeMap<String, TrainingConfig>,
    pub evaluation: EvaluationSection,
}

fn section<T: serde::de::DeserializeOwned>(name: &str, table: toml::Table) -> Result<T> {
    T::deserialize(toml::Value::Table(table))
        .map_err(|e| CliError::Config(format!("[{name}]: {}", e.message())))
}

impl ResolvedConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text)
            .map_err(|e| CliError::Config(format!("{}: {e}", origin.display())))?;
        let dataset = if raw.dataset.contains_key("labels") || raw.dataset.contains_key("root") {
            let mut f: FileDataset = section("dataset", raw.dataset)?;
            // paths are relative to the config file
            let base = origin.parent().unwrap_or(Path::new(""));
            f.root = base.join(&f.root);
            f.labels = base.join(&f.labels);
            DatasetSource::Files(f)
        } else {
            let spec: SyntheticSpec = section("dataset", raw.dataset)?;
            spec.validate().map_err(|e| CliError::Config(format!("[dataset]: {e}")))?;
            DatasetSource::Synthetic(spec)
        };
        if raw.training.contains_key("mode") {
            return Err(CliError::Config(
                "[training]: `mode` is chosen per command, not in the shared section".into(),
            ));
        }
        for key in raw.modes.keys() {
            key.parse::<TrainingMode>()
                .map_err(|e| CliError::Config(format!("[modes.{key}]: {e}")))?;
        }
        let mut modes = BTreeMap::new();
        for mode in TrainingMode::ALL {
            let mut table = raw.training.clone();
            if let Some(over) = raw.modes.get(mode.as_str()) {
                merge(&mut table, over.clone());
            }
            table.insert("mode".into(), toml::Value::String(mode.as_str().into()));
            table.insert("seed".into(), toml::Value::Integer(0));
            let mut tc: TrainingConfig = section(&format!("modes.{mode}"), table)?;
            tc.seed = raw.seed;
            tc.validate()
                .map_err(|e| CliError::Config(format!("[modes.{mode}]: {e}")))?;
            modes.insert(mode.as_str().to_string(), tc);
        }
        if raw.evaluation.stride == 0 || raw.evaluation.folds == 0 {
            return Err(CliError::Config(
                "[evaluation]: folds and stride must be positive".into(),
            ));
        }
        Ok(Self {
            seed: raw.seed,
            output_dir: raw.output_dir.unwrap_or_else(|| PathBuf::from("out")),
            dataset,
            model: raw.model,
            modes,
            evaluation: raw.evaluation,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text, path)
    }

    /// Applies `--seed`, `--out` and `--stride`.
    pub fn apply(&mut self, args: &CommonArgs) {
        if let Some(seed) = args.seed {
            self.seed = seed;
            for tc in self.modes.values_mut() {
                tc.seed = seed;
            }
        }
        if let Some(out) = &args.out {
            self.output_dir = out.clone();
        }
        if let Some(stride) = args.stride {
            self.evaluation.stride = stride;
        }
    }

    pub fn mode(&self, mode: TrainingMode) -> &TrainingConfig {
        &self.modes[mode.as_str()]
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match &self.dataset {
            DatasetSource::Synthetic(spec) => generate(spec).map_err(runtime),
            DatasetSource::Files(f) => load_frame_dataset(&f.root, &f.labels).map_err(runtime),
        }
    }

    /// Model spec with the input shape filled in from `dataset`.
    pub fn model_spec(&self, dataset: &Dataset) -> Result<ModelSpec> {
        let mut table = self.model.clone();
        if !table.contains_key("input_shape") {
            let shape = instance_shape(dataset).ok_or_else(|| runtime("dataset is empty"))?;
            let shape = shape.iter().map(|&d| toml::Value::Integer(d as i64)).collect();
            table.insert("input_shape".into(), toml::Value::Array(shape));
        }
        let spec: ModelSpec = section("model", table)?;
        spec.layout().map_err(|e| CliError::Config(format!("[model]: {e}")))?;
        Ok(spec)
    }

    pub fn experiment(&self, model: ModelSpec, modes: &[TrainingMode]) -> ExperimentConfig {
        ExperimentConfig {
            model,
            modes: modes.iter().map(|&m| self.mode(m).clone()).collect(),
            folds: self.evaluation.folds,
            stride: self.evaluation.stride,
            seed: self.seed,
            stratified: self.evaluation.stratified,
            local_accuracy_reference: self.evaluation.local_accuracy_reference,
            parallel_folds: false,
            evaluation_attribution: self.evaluation.attribution.clone(),
        }
    }

    /// Writes `resolved_config.toml` with every default spelled out.
    pub fn write_resolved(&self, dir: &Path, model: &ModelSpec) -> Result<()> {
        let mut copy = self.clone();
        copy.model = toml::Table::try_from(model).map_err(runtime)?;
        let text = toml::to_string_pretty(&copy).map_err(runtime)?;
        write(&dir.join("resolved_config.toml"), &text)
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn prepare(common: &CommonArgs) -> Result<(ResolvedConfig, Dataset, ModelSpec)> {
    let mut cfg = ResolvedConfig::load(&common.config)?;
    cfg.apply(common);
    let dataset = cfg.load_dataset()?;
    if dataset.is_empty() {
        return Err(runtime("dataset has no instances"));
    }
    let model = cfg.model_spec(&dataset)?;
    create_dir(&cfg.output_dir)?;
    cfg.write_resolved(&cfg.output_dir, &model)?;
    Ok((cfg, dataset, model))
}

/// Trains one mode on one fold. Writes `loss_curve.csv`, per-epoch
/// parameters under `epochs/`, the selected epoch as `model.bin`, and a
/// resumable `checkpoint/` after every epoch.
pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let (cfg, dataset, model) = prepare(&args.common)?;
    let exp = cfg.experiment(model, &[args.mode]);
    let split = experiment_split(&dataset, &exp).map_err(runtime)?;
    let (train_set, test_set) =
        fold_blocks(&dataset, &split, args.fold, exp.stride).map_err(runtime)?;
    let out = &cfg.output_dir;
    let epochs_dir = out.join("epochs");
    create_dir(&epochs_dir)?;
    let checkpoint_dir = out.join("checkpoint");

    let mut trainer = match &args.checkpoint {
        Some(dir) => {
            let mut ck = Checkpoint::load(dir).map_err(runtime)?;
            // resuming trains up to the configured epoch count
            ck.config.epochs = exp.modes[0].epochs;
            if ck.config.mode != args.mode {
                return Err(CliError::Config(format!(
                    "checkpoint was trained in mode {}, not {}",
                    ck.config.mode, args.mode
                )));
            }
            Trainer::resume(ck, &train_set.samples, &test_set.samples).map_err(runtime)?
        }
        None => {
            let (tc, init) = fold_setup(&exp, &exp.modes[0], args.fold).map_err(runtime)?;
            Trainer::new(init, &train_set.samples, &test_set.samples, tc).map_err(runtime)?
        }
    };
    let total = trainer.checkpoint().config.epochs;
    while trainer.epoch() < total {
        let loss = trainer.step_epoch().map_err(runtime)?;
        let e = trainer.epoch() - 1;
        trainer
            .params()
            .save(&epochs_dir.join(format!("epoch_{e:04}.bin")))
            .map_err(runtime)?;
        trainer.checkpoint().save(&checkpoint_dir).map_err(runtime)?;
        log::info!("epoch {e}: train {:.6} test {:.6}", loss.train_total_loss, loss.test_total_loss);
    }
    let ck = trainer.checkpoint();
    write(&out.join("loss_curve.csv"), &ck.record.to_csv())?;
    let best = select_best_epoch(&ck.record, ck.config.selection).map_err(runtime)?;
    let best_path = epochs_dir.join(format!("epoch_{best:04}.bin"));
    if !best_path.exists() {
        return Err(runtime(format!(
            "{} is missing; resume into the directory of the interrupted run",
            best_path.display()
        )));
    }
    let params = ModelParameters::load(&best_path).map_err(runtime)?;
    params.save(&out.join("model.bin")).map_err(runtime)?;
    println!(
        "mode {} fold {}: selected epoch {best} of {}, train loss {:.6}",
        args.mode,
        args.fold,
        ck.record.len(),
        ck.record.epochs[best].train_total_loss
    );
    Ok(())
}

pub fn cmd_experiment(args: &ExperimentArgs) -> Result<()> {
    let (cfg, dataset, model) = prepare(&args.common)?;
    let modes = if args.mode.is_empty() {
        cfg.evaluation.modes.clone()
    } else {
        args.mode.clone()
    };
    let mut exp = cfg.experiment(model, &modes);
    exp.parallel_folds = args.parallel_folds;
    let result = run_experiment(&dataset, &exp).map_err(runtime)?;
    write_experiment(&cfg.output_dir, &result).map_err(runtime)?;
    print!("{}", summary_table(&result));
    Ok(())
}

/// Instance ids of blocks: the video id, plus `@center` for frame data.
fn block_ids(dataset: &Dataset, owners: &[usize], centers: &[usize]) -> Vec<String> {
    owners
        .iter()
        .zip(centers)
        .map(|(&o, &c)| match dataset.kind {
            DatasetKind::Vectors => dataset.video_ids[o].clone(),
            DatasetKind::Frames => format!("{}@{c}", dataset.video_ids[o]),
        })
        .collect()
}

pub fn cmd_attribute(args: &AttributeArgs) -> Result<()> {
    let (cfg, dataset, _) = prepare(&args.common)?;
    let params = ModelParameters::load(&args.checkpoint).map_err(runtime)?;
    let rows: Vec<usize> = (0..dataset.len()).collect();
    let blocks = build_blocks(&dataset, &rows, cfg.evaluation.stride).map_err(runtime)?;
    let tc = cfg.mode(args.mode);
    let background = BackgroundSet::sample(
        &blocks.samples.features,
        tc.background_size,
        seeds::derive(cfg.seed, "background", 0),
    );
    let attr_cfg = AttributionConfig {
        seed: seeds::derive(cfg.seed, "attribute", 0),
        ..cfg
            .evaluation
            .attribution
            .clone()
            .unwrap_or_else(|| tc.attribution.clone())
    };
    let logits = predict_logits(&params, &blocks.samples.features).map_err(runtime)?;
    let results = expected_gradients_batch(&params, &blocks.samples.features, &background, &attr_cfg)
        .map_err(runtime)?;
    let ids = block_ids(&dataset, &blocks.owners, &blocks.centers);
    let out_rows: Vec<AttributionRow> = ids
        .into_iter()
        .zip(&blocks.samples.labels)
        .zip(logits.iter().zip(&results))
        .map(|((instance_id, &label), (&z, r))| AttributionRow {
            instance_id,
            label,
            classifier_pred: logit_class(z),
            g_sum: r.g_sum,
        })
        .collect();
    write_attributions_csv(&cfg.output_dir.join("attributions.csv"), &out_rows).map_err(runtime)?;
    let g: Vec<f64> = out_rows.iter().map(|r| r.g_sum).collect();
    let preds: Vec<u8> = out_rows.iter().map(|r| r.classifier_pred).collect();
    let la = local_accuracy(&g, &preds).map_err(runtime)?;
    println!("{} instances, local accuracy {la:.4}", out_rows.len());
    Ok(())
}

pub fn cmd_sensitivity(args: &SensitivityArgs) -> Result<()> {
    let (cfg, dataset, model) = prepare(&args.common)?;
    let mut exp = cfg.experiment(model, &[TrainingMode::Base, TrainingMode::Xaiaug]);
    exp.parallel_folds = args.parallel_folds;
    let count = args.subsets.unwrap_or(cfg.evaluation.subset_count);
    if count == 0 {
        return Err(CliError::Config("subset count must be positive".into()));
    }
    let report = subset_sensitivity_experiment(&dataset, count, &exp).map_err(runtime)?;
    let csv = report.to_csv();
    write(&cfg.output_dir.join("sensitivity.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Experiment(a) => cmd_experiment(a),
        Command::Attribute(a) => cmd_attribute(a),
        Command::Sensitivity(a) => cmd_sensitivity(a),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .try_init();
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
