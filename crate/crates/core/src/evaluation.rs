//! Metrics, video-level cross-validation and the comparison experiments.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{
    expected_gradients_batch, local_accuracy, logit_class, AttributionConfig, AttributionError,
    LocalAccuracyReference,
};
use crate::autodiff::{sigmoid, Tensor};
use crate::data::{Dataset, DatasetKind};
use crate::models::{init_model, predict_logits, ModelError, ModelParameters, ModelSpec};
use crate::seeds;
use crate::training::{
    select_best_epoch, train, LossRecord, Samples, TrainError, TrainingConfig, TrainingMode,
};

/// Frames on each side of a block center.
pub const BLOCK_RADIUS: usize = 2;
pub const BLOCK_LEN: usize = 2 * BLOCK_RADIUS + 1;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("percent difference needs a positive base, got {0}")]
    NonPositiveBase(f64),
    #[error("no block probabilities to aggregate")]
    NoBlocks,
    #[error("{videos} videos cannot fill {k} folds")]
    TooFewVideos { videos: usize, k: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{0} predictions vs {1} labels")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Attribution(#[from] AttributionError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionMatrix {
    pub fn from_predictions(predictions: &[u8], labels: &[u8]) -> Result<Self> {
        if predictions.len() != labels.len() {
            return Err(EvalError::LengthMismatch(predictions.len(), labels.len()));
        }
        let mut cm = Self::default();
        for (&p, &y) in predictions.iter().zip(labels) {
            match (p, y) {
                (1, 1) => cm.tp += 1,
                (0, 0) => cm.tn += 1,
                (1, 0) => cm.fp += 1,
                (0, 1) => cm.fn_ += 1,
                _ => {
                    return Err(EvalError::InvalidArgument(format!(
                        "non-binary prediction {p} or label {y}"
                    )))
                }
            }
        }
        Ok(cm)
    }

    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// Ratios that hit a zero denominator and were reported as 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DegenerateFlags {
    pub precision: bool,
    pub sensitivity: bool,
    pub specificity: bool,
    pub f1: bool,
}

impl DegenerateFlags {
    pub fn any(&self) -> bool {
        self.precision || self.sensitivity || self.specificity || self.f1
    }

    fn union(self, o: Self) -> Self {
        Self {
            precision: self.precision || o.precision,
            sensitivity: self.sensitivity || o.sensitivity,
            specificity: self.specificity || o.specificity,
            f1: self.f1 || o.f1,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub aa: f64,
    pub ba: f64,
    pub f1: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub precision: f64,
    pub local_accuracy: f64,
    pub degenerate: DegenerateFlags,
}

pub const METRIC_NAMES: [&str; 7] = [
    "aa",
    "ba",
    "f1",
    "sensitivity",
    "specificity",
    "precision",
    "local_accuracy",
];

impl MetricReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        Some(match name {
            "aa" => self.aa,
            "ba" => self.ba,
            "f1" => self.f1,
            "sensitivity" => self.sensitivity,
            "specificity" => self.specificity,
            "precision" => self.precision,
            "local_accuracy" => self.local_accuracy,
            _ => return None,
        })
    }

    fn values(&self) -> [f64; 7] {
        [
            self.aa,
            self.ba,
            self.f1,
            self.sensitivity,
            self.specificity,
            self.precision,
            self.local_accuracy,
        ]
    }

    /// Field-wise mean; degenerate flags are merged.
    pub fn mean(reports: &[MetricReport]) -> Option<MetricReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let mut sums = [0.0; 7];
        let mut flags = DegenerateFlags::default();
        for r in reports {
            for (s, v) in sums.iter_mut().zip(r.values()) {
                *s += v;
            }
            flags = flags.union(r.degenerate);
        }
        let [aa, ba, f1, sensitivity, specificity, precision, local_accuracy] = sums.map(|s| s / n);
        Some(MetricReport {
            aa,
            ba,
            f1,
            sensitivity,
            specificity,
            precision,
            local_accuracy,
            degenerate: flags,
        })
    }
}

fn ratio(num: usize, den: usize) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

/// AA, BA, F1, sensitivity, specificity and precision; local accuracy is
/// left at 0 for the caller to fill.
pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<MetricReport> {
    let total = cm.total();
    if total == 0 {
        return Err(EvalError::EmptyMatrix);
    }
    let (precision, dp) = ratio(cm.tp, cm.tp + cm.fp);
    let (sensitivity, ds) = ratio(cm.tp, cm.tp + cm.fn_);
    let (specificity, dsp) = ratio(cm.tn, cm.tn + cm.fp);
    let (f1, df) = if precision + sensitivity == 0.0 {
        (0.0, true)
    } else {
        (2.0 * precision * sensitivity / (precision + sensitivity), false)
    };
    Ok(MetricReport {
        aa: (cm.tp + cm.tn) as f64 / total as f64,
        ba: (sensitivity + specificity) / 2.0,
        f1,
        sensitivity,
        specificity,
        precision,
        local_accuracy: 0.0,
        degenerate: DegenerateFlags {
            precision: dp,
            sensitivity: ds,
            specificity: dsp,
            f1: df,
        },
    })
}

/// `100 * (xaiaug - base) / base`.
pub fn percent_difference(base: f64, xaiaug: f64) -> Result<f64> {
    if !(base > 0.0) {
        return Err(EvalError::NonPositiveBase(base));
    }
    Ok(100.0 * (xaiaug - base) / base)
}

/// Block centers `2, 2 + stride, ...` with `center + 2 < frames`.
pub fn block_centers(frames: usize, stride: usize) -> Vec<usize> {
    if stride == 0 || frames < BLOCK_LEN {
        return Vec::new();
    }
    (BLOCK_RADIUS..frames - BLOCK_RADIUS).step_by(stride).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameBlock {
    pub video_id: String,
    pub center: usize,
    pub label: u8,
    /// `[5, height, width]`
    pub frames: Tensor,
}

/// Five-frame blocks of a `[frames, height, width]` video.
pub fn extract_frame_blocks(
    video: &Tensor,
    video_id: &str,
    label: u8,
    stride: usize,
) -> Result<Vec<FrameBlock>> {
    if stride == 0 {
        return Err(EvalError::InvalidArgument("stride must be at least 1".into()));
    }
    let s = video.shape();
    if s.len() != 3 {
        return Err(EvalError::InvalidArgument(format!("video shape {s:?} is not 3-d")));
    }
    let frame = s[1] * s[2];
    let centers = block_centers(s[0], stride);
    if centers.is_empty() {
        log::warn!("video {video_id} has {} frames, no complete block", s[0]);
    }
    Ok(centers
        .into_iter()
        .map(|c| {
            let lo = (c - BLOCK_RADIUS) * frame;
            let hi = (c + BLOCK_RADIUS + 1) * frame;
            FrameBlock {
                video_id: video_id.to_string(),
                center: c,
                label,
                frames: Tensor::new(vec![BLOCK_LEN, s[1], s[2]], video.data()[lo..hi].to_vec()),
            }
        })
        .collect())
}

/// Mean block probability rounded to a class; exactly 0.5 gives 1.
pub fn aggregate_video_prediction(block_probabilities: &[f64]) -> Result<u8> {
    if block_probabilities.is_empty() {
        return Err(EvalError::NoBlocks);
    }
    let mean = block_probabilities.iter().sum::<f64>() / block_probabilities.len() as f64;
    Ok(u8::from(mean >= 0.5))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub folds: Vec<Vec<String>>,
    pub seed: u64,
}

impl FoldSplit {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    /// Ids outside fold `i`.
    pub fn train_ids(&self, i: usize) -> Vec<String> {
        self.folds
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .flat_map(|(_, f)| f.iter().cloned())
            .collect()
    }
}

fn unique_in_order<'a>(ids: impl IntoIterator<Item = &'a String>) -> Vec<String> {
    let mut seen = HashSet::new();
    ids.into_iter()
        .filter(|id| seen.insert(id.as_str()))
        .cloned()
        .collect()
}

/// Deals `items` into `k` folds round-robin, so the first `len % k` folds
/// get one extra.
fn deal(items: Vec<String>, k: usize) -> Vec<Vec<String>> {
    let n = items.len();
    let mut folds = Vec::with_capacity(k);
    let mut it = items.into_iter();
    for i in 0..k {
        let size = n / k + usize::from(i < n % k);
        folds.push(it.by_ref().take(size).collect());
    }
    folds
}

/// Seeded partition of the distinct ids into `k` near-equal folds.
pub fn kfold_split(video_ids: &[String], k: usize, seed: u64) -> Result<FoldSplit> {
    if k == 0 {
        return Err(EvalError::InvalidArgument("k must be positive".into()));
    }
    let mut ids = unique_in_order(video_ids);
    if ids.len() < k {
        return Err(EvalError::TooFewVideos { videos: ids.len(), k });
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(FoldSplit {
        folds: deal(ids, k),
        seed,
    })
}

/// Like [`kfold_split`] but deals each class separately so every fold gets
/// a near-equal share of both classes. `labels` align with `video_ids`.
pub fn kfold_split_stratified(
    video_ids: &[String],
    labels: &[u8],
    k: usize,
    seed: u64,
) -> Result<FoldSplit> {
    if video_ids.len() != labels.len() {
        return Err(EvalError::LengthMismatch(video_ids.len(), labels.len()));
    }
    if k == 0 {
        return Err(EvalError::InvalidArgument("k must be positive".into()));
    }
    let ids = unique_in_order(video_ids);
    if ids.len() < k {
        return Err(EvalError::TooFewVideos { videos: ids.len(), k });
    }
    let label_of: BTreeMap<&str, u8> = video_ids
        .iter()
        .map(String::as_str)
        .zip(labels.iter().copied())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); k];
    let mut offset = 0;
    for class in [0u8, 1] {
        let mut group: Vec<String> = ids
            .iter()
            .filter(|id| label_of[id.as_str()] == class)
            .cloned()
            .collect();
        group.shuffle(&mut rng);
        for (j, id) in group.into_iter().enumerate() {
            folds[(offset + j) % k].push(id);
        }
        offset += label_of.values().filter(|&&l| l == class).count();
    }
    Ok(FoldSplit { folds, seed })
}

/// Training instances cut from dataset items.
#[derive(Debug, Clone)]
pub struct BlockSet {
    pub samples: Samples,
    /// Dataset item each sample came from.
    pub owners: Vec<usize>,
    /// Block center frame; 0 for vector items.
    pub centers: Vec<usize>,
}

/// Instance shape a model sees for `dataset`.
pub fn instance_shape(dataset: &Dataset) -> Option<Vec<usize>> {
    let first = dataset.instances.first()?;
    Some(match dataset.kind {
        DatasetKind::Vectors => first.shape().to_vec(),
        DatasetKind::Frames => vec![BLOCK_LEN, first.shape()[1], first.shape()[2]],
    })
}

/// Frame blocks (or vectors) of the items in `rows`.
pub fn build_blocks(dataset: &Dataset, rows: &[usize], stride: usize) -> Result<BlockSet> {
    let shape = instance_shape(dataset)
        .ok_or_else(|| EvalError::InvalidArgument("dataset is empty".into()))?;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut owners = Vec::new();
    let mut centers = Vec::new();
    for &r in rows {
        let item = &dataset.instances[r];
        match dataset.kind {
            DatasetKind::Vectors => {
                data.extend_from_slice(item.data());
                labels.push(dataset.labels[r]);
                owners.push(r);
                centers.push(0);
            }
            DatasetKind::Frames => {
                let blocks =
                    extract_frame_blocks(item, &dataset.video_ids[r], dataset.labels[r], stride)?;
                for b in blocks {
                    data.extend_from_slice(b.frames.data());
                    labels.push(b.label);
                    owners.push(r);
                    centers.push(b.center);
                }
            }
        }
    }
    let mut full = vec![labels.len()];
    full.extend(shape);
    Ok(BlockSet {
        samples: Samples::new(Tensor::new(full, data), labels)?,
        owners,
        centers,
    })
}

fn default_k() -> usize {
    5
}
fn default_stride() -> usize {
    5
}

/// Settings of one cross-validated comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    /// One entry per compared mode; the seed of each entry is replaced per
    /// fold.
    pub modes: Vec<TrainingConfig>,
    #[serde(default = "default_k")]
    pub folds: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub stratified: bool,
    #[serde(default)]
    pub local_accuracy_reference: LocalAccuracyReference,
    #[serde(default)]
    pub parallel_folds: bool,
    /// Attribution settings for local accuracy on test instances; the
    /// mode's training settings when absent.
    #[serde(default)]
    pub evaluation_attribution: Option<AttributionConfig>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub fold: usize,
    pub epoch_selected: usize,
    pub block: MetricReport,
    pub video: MetricReport,
    pub record: LossRecord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeResult {
    pub mode: TrainingMode,
    pub folds: Vec<FoldResult>,
    pub mean_block: MetricReport,
    pub mean_video: MetricReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub split: FoldSplit,
    pub modes: Vec<ModeResult>,
}

impl ExperimentResult {
    pub fn mode(&self, mode: TrainingMode) -> Option<&ModeResult> {
        self.modes.iter().find(|m| m.mode == mode)
    }
}

/// Seed shared by every mode on fold `fold`.
pub fn fold_seed(root: u64, fold: usize) -> u64 {
    seeds::derive(root, "fold", fold as u64)
}

/// The experiment's video-level fold split.
pub fn experiment_split(dataset: &Dataset, config: &ExperimentConfig) -> Result<FoldSplit> {
    let split_seed = seeds::derive(config.seed, "split", 0);
    if config.stratified {
        kfold_split_stratified(&dataset.video_ids, &dataset.labels, config.folds, split_seed)
    } else {
        kfold_split(&dataset.video_ids, config.folds, split_seed)
    }
}

/// Training and test instances of fold `fold`; the fold is the test set.
pub fn fold_blocks(
    dataset: &Dataset,
    split: &FoldSplit,
    fold: usize,
    stride: usize,
) -> Result<(BlockSet, BlockSet)> {
    let test_fold = split.folds.get(fold).ok_or_else(|| {
        EvalError::InvalidArgument(format!("fold {fold} out of range 0..{}", split.k()))
    })?;
    let test_ids: HashSet<&str> = test_fold.iter().map(String::as_str).collect();
    let (test_rows, train_rows): (Vec<usize>, Vec<usize>) =
        (0..dataset.len()).partition(|&i| test_ids.contains(dataset.video_ids[i].as_str()));
    let train_set = build_blocks(dataset, &train_rows, stride)?;
    let test_set = build_blocks(dataset, &test_rows, stride)?;
    if train_set.samples.is_empty() || test_set.samples.is_empty() {
        return Err(EvalError::InvalidArgument(format!(
            "fold {fold} has {} training and {} test instances",
            train_set.samples.len(),
            test_set.samples.len()
        )));
    }
    Ok((train_set, test_set))
}

/// Training settings and initial parameters used for `fold`, identical
/// across modes apart from the mode's own settings.
pub fn fold_setup(
    config: &ExperimentConfig,
    mode_config: &TrainingConfig,
    fold: usize,
) -> Result<(TrainingConfig, ModelParameters)> {
    let seed = fold_seed(config.seed, fold);
    let mut tc = mode_config.clone();
    tc.seed = seed;
    let init = init_model(&config.model, seeds::derive(seed, "init", 0))?;
    Ok((tc, init))
}

fn evaluate_fold(
    dataset: &Dataset,
    split: &FoldSplit,
    fold: usize,
    mode_config: &TrainingConfig,
    config: &ExperimentConfig,
) -> Result<FoldResult> {
    let (train_set, test_set) = fold_blocks(dataset, split, fold, config.stride)?;
    let (tc, init) = fold_setup(config, mode_config, fold)?;
    let seed = tc.seed;
    let outcome = train(init, &train_set.samples, &test_set.samples, &tc)?;
    let epoch = select_best_epoch(&outcome.record, tc.selection)?;
    let params = &outcome.trajectory[epoch];

    let logits = predict_logits(params, &test_set.samples.features)?;
    let preds: Vec<u8> = logits.iter().map(|&z| logit_class(z)).collect();
    let cm = ConfusionMatrix::from_predictions(&preds, &test_set.samples.labels)?;
    let mut block = compute_metrics(&cm)?;

    let attr_cfg = AttributionConfig {
        seed: seeds::derive(seed, "eval_attribution", 0),
        ..config
            .evaluation_attribution
            .clone()
            .unwrap_or_else(|| tc.attribution.clone())
    };
    let attributions =
        expected_gradients_batch(params, &test_set.samples.features, &outcome.background, &attr_cfg)?;
    let g_sums: Vec<f64> = attributions.iter().map(|a| a.g_sum).collect();
    let reference = match config.local_accuracy_reference {
        LocalAccuracyReference::Classifier => &preds,
        LocalAccuracyReference::Labels => &test_set.samples.labels,
    };
    block.local_accuracy = local_accuracy(&g_sums, reference)?;

    let mut per_video: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (&owner, &z) in test_set.owners.iter().zip(&logits) {
        per_video.entry(owner).or_default().push(sigmoid(z));
    }
    let mut video_preds = Vec::with_capacity(per_video.len());
    let mut video_labels = Vec::with_capacity(per_video.len());
    for (owner, probs) in &per_video {
        video_preds.push(aggregate_video_prediction(probs)?);
        video_labels.push(dataset.labels[*owner]);
    }
    let mut video = compute_metrics(&ConfusionMatrix::from_predictions(
        &video_preds,
        &video_labels,
    )?)?;
    video.local_accuracy = block.local_accuracy;

    log::info!(
        "{} fold {fold}: epoch {epoch}, block BA {:.4}, LA {:.4}",
        tc.mode,
        block.ba,
        block.local_accuracy
    );
    Ok(FoldResult {
        fold,
        epoch_selected: epoch,
        block,
        video,
        record: outcome.record,
    })
}

/// Cross-validates every configured mode on the same folds and seeds.
pub fn run_experiment(dataset: &Dataset, config: &ExperimentConfig) -> Result<ExperimentResult> {
    if config.modes.is_empty() {
        return Err(EvalError::InvalidArgument("no modes configured".into()));
    }
    if config.stride == 0 {
        return Err(EvalError::InvalidArgument("stride must be at least 1".into()));
    }
    let split = experiment_split(dataset, config)?;
    let mut modes = Vec::with_capacity(config.modes.len());
    for mc in &config.modes {
        let run = |f: usize| evaluate_fold(dataset, &split, f, mc, config);
        let folds: Vec<FoldResult> = if config.parallel_folds {
            (0..split.k()).into_par_iter().map(run).collect::<Result<_>>()?
        } else {
            (0..split.k()).map(run).collect::<Result<_>>()?
        };
        let blocks: Vec<MetricReport> = folds.iter().map(|f| f.block).collect();
        let videos: Vec<MetricReport> = folds.iter().map(|f| f.video).collect();
        modes.push(ModeResult {
            mode: mc.mode,
            mean_block: MetricReport::mean(&blocks).expect("at least one fold"),
            mean_video: MetricReport::mean(&videos).expect("at least one fold"),
            folds,
        });
    }
    Ok(ExperimentResult { split, modes })
}

pub const METRICS_HEADER: &str =
    "mode,fold,epoch_selected,aa,ba,f1,sensitivity,specificity,precision,local_accuracy";

fn metric_row(out: &mut String, mode: TrainingMode, fold: &str, epoch: &str, r: &MetricReport) {
    let _ = write!(out, "{mode},{fold},{epoch}");
    for v in r.values() {
        let _ = write!(out, ",{v}");
    }
    out.push('\n');
}

fn metrics_csv(result: &ExperimentResult, video: bool) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in &result.modes {
        for f in &m.folds {
            let r = if video { &f.video } else { &f.block };
            metric_row(&mut out, m.mode, &f.fold.to_string(), &f.epoch_selected.to_string(), r);
        }
        let mean = if video { &m.mean_video } else { &m.mean_block };
        metric_row(&mut out, m.mode, "mean", "", mean);
    }
    out
}

/// Block-level `metrics.csv` contents.
pub fn block_metrics_csv(result: &ExperimentResult) -> String {
    metrics_csv(result, false)
}

/// Video-level metrics in the `metrics.csv` layout.
pub fn video_metrics_csv(result: &ExperimentResult) -> String {
    metrics_csv(result, true)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| EvalError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Writes `metrics.csv`, `video_metrics.csv` and one loss curve per mode
/// and fold under `loss_curves/`.
pub fn write_experiment(dir: &Path, result: &ExperimentResult) -> Result<()> {
    let curves = dir.join("loss_curves");
    fs::create_dir_all(&curves).map_err(|e| EvalError::Io {
        path: curves.display().to_string(),
        message: e.to_string(),
    })?;
    write_file(&dir.join("metrics.csv"), &block_metrics_csv(result))?;
    write_file(&dir.join("video_metrics.csv"), &video_metrics_csv(result))?;
    for m in &result.modes {
        for f in &m.folds {
            let path = curves.join(format!("{}_fold{}.csv", m.mode, f.fold));
            write_file(&path, &f.record.to_csv())?;
        }
    }
    Ok(())
}

/// Fold-averaged block metrics per mode, plus the relative change of
/// `xaiaug` over `base` when both ran.
pub fn summary_table(result: &ExperimentResult) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<8} {:>8} {:>8} {:>8} {:>8}", "mode", "aa", "ba", "f1", "la");
    for m in &result.modes {
        let r = &m.mean_block;
        let _ = writeln!(
            out,
            "{:<8} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            m.mode.as_str(),
            r.aa,
            r.ba,
            r.f1,
            r.local_accuracy
        );
    }
    if let (Some(b), Some(x)) = (result.mode(TrainingMode::Base), result.mode(TrainingMode::Xaiaug))
    {
        let cell = |name: &str| {
            let (bv, xv) = (b.mean_block.get(name).unwrap(), x.mean_block.get(name).unwrap());
            percent_difference(bv, xv).map_or_else(|_| "nan".to_string(), |d| format!("{d:+.2}%"))
        };
        let _ = writeln!(
            out,
            "{:<8} {:>8} {:>8} {:>8} {:>8}",
            "diff",
            cell("aa"),
            cell("ba"),
            cell("f1"),
            cell("local_accuracy")
        );
    }
    out
}

/// Relative frame budgets of the three uneven subsets.
const SUBSET_WEIGHTS: [f64; 3] = [722.0, 907.0, 794.0];

/// Seeded, video-disjoint partition of the distinct ids into
/// `subset_count` contiguous groups. Three subsets follow uneven
/// 722:907:794 proportions; any other count splits evenly.
pub fn subset_partition(video_ids: &[String], subset_count: usize, seed: u64) -> Result<Vec<Vec<String>>> {
    if subset_count == 0 {
        return Err(EvalError::InvalidArgument("subset_count must be positive".into()));
    }
    let mut ids = unique_in_order(video_ids);
    if ids.len() < subset_count {
        return Err(EvalError::TooFewVideos {
            videos: ids.len(),
            k: subset_count,
        });
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    if subset_count != 3 {
        return Ok(deal(ids, subset_count));
    }
    // largest remainder apportionment of the ids over the weights
    let n = ids.len() as f64;
    let total: f64 = SUBSET_WEIGHTS.iter().sum();
    let quotas: Vec<f64> = SUBSET_WEIGHTS.iter().map(|w| n * w / total).collect();
    let mut sizes: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        rb.partial_cmp(&ra).expect("finite quotas").then(a.cmp(&b))
    });
    let mut left = ids.len() - sizes.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    let mut it = ids.into_iter();
    Ok(sizes.iter().map(|&s| it.by_ref().take(s).collect()).collect())
}

pub const SENSITIVITY_METRICS: [&str; 4] = ["aa", "ba", "f1", "local_accuracy"];
pub const SENSITIVITY_HEADER: &str = "subset,metric,base,xaiaug,pct_diff";

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityRow {
    /// `full` or the 1-based subset number.
    pub subset: String,
    pub metric: &'static str,
    pub base: f64,
    pub xaiaug: f64,
    /// `None` when the base value is not positive.
    pub pct_diff: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityReport {
    pub rows: Vec<SensitivityRow>,
    pub full: ExperimentResult,
    pub subsets: Vec<ExperimentResult>,
}

impl SensitivityReport {
    pub fn diff(&self, subset: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.subset == subset && r.metric == metric)
            .and_then(|r| r.pct_diff)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(SENSITIVITY_HEADER);
        out.push('\n');
        for r in &self.rows {
            let diff = r.pct_diff.map_or_else(|| "nan".to_string(), |d| d.to_string());
            let _ = writeln!(out, "{},{},{},{},{diff}", r.subset, r.metric, r.base, r.xaiaug);
        }
        out
    }
}

fn diff_rows(subset: &str, result: &ExperimentResult) -> Result<Vec<SensitivityRow>> {
    let (b, x) = match (result.mode(TrainingMode::Base), result.mode(TrainingMode::Xaiaug)) {
        (Some(b), Some(x)) => (b, x),
        _ => {
            return Err(EvalError::InvalidArgument(
                "sensitivity needs base and xaiaug modes".into(),
            ))
        }
    };
    Ok(SENSITIVITY_METRICS
        .iter()
        .map(|&metric| {
            let base = b.mean_block.get(metric).expect("known metric");
            let xaiaug = x.mean_block.get(metric).expect("known metric");
            SensitivityRow {
                subset: subset.to_string(),
                metric,
                base,
                xaiaug,
                pct_diff: percent_difference(base, xaiaug).ok(),
            }
        })
        .collect())
}

/// Runs the base/xaiaug comparison on the full dataset and on each subset.
/// With a single subset only the full-dataset rows are produced.
pub fn subset_sensitivity_experiment(
    dataset: &Dataset,
    subset_count: usize,
    config: &ExperimentConfig,
) -> Result<SensitivityReport> {
    let mut cfg = config.clone();
    cfg.modes
        .retain(|m| matches!(m.mode, TrainingMode::Base | TrainingMode::Xaiaug));
    let full = run_experiment(dataset, &cfg)?;
    let mut rows = diff_rows("full", &full)?;
    let mut subsets = Vec::new();
    if subset_count > 1 {
        let groups = subset_partition(
            &dataset.video_ids,
            subset_count,
            seeds::derive(config.seed, "subsets", 0),
        )?;
        for (i, ids) in groups.iter().enumerate() {
            let part = dataset.select_ids(ids);
            let result = run_experiment(&part, &cfg)?;
            rows.extend(diff_rows(&(i + 1).to_string(), &result)?);
            subsets.push(result);
        }
    }
    Ok(SensitivityReport {
        rows,
        full,
        subsets,
    })
}
