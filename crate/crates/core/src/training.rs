//! Losses, optimizers and the attribution-prior training loop.
//!
//! Each epoch runs the classifier forward, attributes every training
//! instance with Expected Gradients against a background set fixed before
//! the first epoch, turns the attribution sums into a second cross-entropy
//! term and backpropagates `classification + lambda * prior` through the
//! attribution computation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attribution::{
    attribution_nodes, chunk_size, AttributionConfig, AttributionError, AttributionPlan,
    BackgroundSet,
};
use crate::autodiff::{Graph, GraphError, NodeId, Tensor};
use crate::bundle::{self, TensorEntry};
use crate::models::{forward, l2_penalty, Mode, ModelError, ModelParameters};
use crate::seeds;

/// Lower clamp applied to probabilities before taking logs.
pub const BCE_EPSILON: f64 = 1e-7;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("{0} probabilities vs {1} labels")]
    LengthMismatch(usize, usize),
    #[error("label {0} is not binary")]
    NonBinaryLabel(u8),
    #[error("attribution sums do not depend on the model parameters")]
    DisconnectedPrior,
    #[error("lambda must be a finite non-negative number, got {0}")]
    NegativeLambda(f64),
    #[error("non-finite {what} at epoch {epoch}")]
    NonFinite { epoch: usize, what: &'static str },
    #[error("empty training data")]
    EmptyData,
    #[error("empty loss record")]
    EmptyRecord,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Attribution(#[from] AttributionError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

type Result<T> = std::result::Result<T, TrainError>;

/// Feature rows and binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    /// `[n, ..instance_shape]`
    pub features: Tensor,
    pub labels: Vec<u8>,
}

impl Samples {
    pub fn new(features: Tensor, labels: Vec<u8>) -> Result<Self> {
        let n = features.shape().first().copied().unwrap_or(0);
        if n != labels.len() {
            return Err(TrainError::LengthMismatch(n, labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y > 1) {
            return Err(TrainError::NonBinaryLabel(bad));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row_len(&self) -> usize {
        self.features.shape()[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.row_len();
        &self.features.data()[i * d..(i + 1) * d]
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        let d = self.row_len();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        let mut shape = vec![rows.len()];
        shape.extend(&self.features.shape()[1..]);
        Self {
            features: Tensor::new(shape, data),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainingMode {
    Base,
    Xaiaug,
    L2,
}

impl TrainingMode {
    pub const ALL: [TrainingMode; 3] = [TrainingMode::Base, TrainingMode::Xaiaug, TrainingMode::L2];

    pub fn as_str(self) -> &'static str {
        match self {
            TrainingMode::Base => "base",
            TrainingMode::Xaiaug => "xaiaug",
            TrainingMode::L2 => "l2",
        }
    }
}

impl std::fmt::Display for TrainingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TrainingMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "base" => Ok(Self::Base),
            "xaiaug" => Ok(Self::Xaiaug),
            "l2" => Ok(Self::L2),
            other => Err(format!("unknown mode {other:?} (expected base, xaiaug or l2)")),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

/// Which per-epoch training loss picks the evaluated epoch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionCriterion {
    #[default]
    Total,
    Classification,
}

fn default_lambda() -> f64 {
    1.0
}
fn default_l2() -> f64 {
    1e-4
}
fn default_lr() -> f64 {
    1e-3
}
fn default_epochs() -> usize {
    30
}
fn default_background() -> usize {
    BackgroundSet::DEFAULT_SIZE
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub mode: TrainingMode,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_l2")]
    pub l2_coefficient: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Instances per optimizer step; `None` is one full-batch step per epoch.
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub attribution: AttributionConfig,
    #[serde(default = "default_background")]
    pub background_size: usize,
    /// Redraw the background set every epoch instead of once per run.
    #[serde(default)]
    pub resample_background: bool,
    /// Evaluate the attribution loss in modes that do not train on it, so
    /// loss curves are comparable across modes.
    #[serde(default = "default_true")]
    pub track_shap_loss: bool,
    #[serde(default)]
    pub selection: SelectionCriterion,
}

impl TrainingConfig {
    pub fn new(mode: TrainingMode) -> Self {
        Self {
            mode,
            lambda: default_lambda(),
            l2_coefficient: default_l2(),
            optimizer: OptimizerKind::Adam,
            learning_rate: default_lr(),
            epochs: default_epochs(),
            batch_size: None,
            seed: 0,
            attribution: AttributionConfig::default(),
            background_size: default_background(),
            resample_background: false,
            track_shap_loss: true,
            selection: SelectionCriterion::Total,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(TrainError::NegativeLambda(self.lambda));
        }
        if !(self.l2_coefficient >= 0.0 && self.l2_coefficient.is_finite()) {
            return Err(TrainError::InvalidConfig(format!(
                "l2_coefficient {} must be non-negative",
                self.l2_coefficient
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::InvalidConfig(format!(
                "learning_rate {} must be non-negative",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be positive".into()));
        }
        if self.batch_size == Some(0) {
            return Err(TrainError::InvalidConfig("batch_size must be positive".into()));
        }
        if self.background_size == 0 {
            return Err(TrainError::InvalidConfig("background_size must be positive".into()));
        }
        self.attribution.validate()?;
        Ok(())
    }

    fn uses_prior(&self) -> bool {
        self.mode == TrainingMode::Xaiaug
    }

    fn computes_prior(&self) -> bool {
        self.uses_prior() || self.track_shap_loss
    }
}

/// `-(1/n) sum [y ln p + (1 - y) ln(1 - p)]` with `p` clamped to
/// `[eps, 1 - eps]`.
pub fn bce_loss(graph: &mut Graph, probabilities: NodeId, labels: &[u8]) -> Result<NodeId> {
    let n = graph.value(probabilities).len();
    if n != labels.len() {
        return Err(TrainError::LengthMismatch(n, labels.len()));
    }
    if n == 0 {
        return Err(TrainError::EmptyData);
    }
    let shape = graph.shape(probabilities).to_vec();
    let p = graph.clamp(probabilities, BCE_EPSILON, 1.0 - BCE_EPSILON)?;
    let log_p = graph.log(p)?;
    let neg_p = graph.neg(p)?;
    let one_minus = graph.add_scalar(neg_p, 1.0)?;
    let log_q = graph.log(one_minus)?;
    let y: Vec<f64> = labels.iter().map(|&l| f64::from(l)).collect();
    let not_y: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
    let y = graph.constant(Tensor::new(shape.clone(), y));
    let not_y = graph.constant(Tensor::new(shape, not_y));
    let a = graph.mul(y, log_p)?;
    let b = graph.mul(not_y, log_q)?;
    let ll = graph.add(a, b)?;
    let mean = graph.mean(ll)?;
    Ok(graph.neg(mean)?)
}

/// Cross-entropy between `sigmoid(g_sum)` and the labels.
pub fn shap_loss(graph: &mut Graph, g_sums: NodeId, labels: &[u8]) -> Result<NodeId> {
    if !graph.requires_grad(g_sums) {
        return Err(TrainError::DisconnectedPrior);
    }
    let p = graph.sigmoid(g_sums)?;
    bce_loss(graph, p, labels)
}

/// `classification + lambda * prior`.
pub fn combined_loss(
    graph: &mut Graph,
    classification: NodeId,
    prior: NodeId,
    lambda: f64,
) -> Result<NodeId> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(TrainError::NegativeLambda(lambda));
    }
    let weighted = graph.scale(prior, lambda)?;
    Ok(graph.add(classification, weighted)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub steps: u64,
    #[serde(skip)]
    first_moment: Vec<Vec<f64>>,
    #[serde(skip)]
    second_moment: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, params: &ModelParameters) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .tensors
            .iter()
            .map(|t| vec![0.0; t.value.len()])
            .collect();
        Self {
            kind,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            steps: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ModelParameters, grads: &[Vec<f64>]) {
        self.steps += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (t, g) in params.tensors.iter_mut().zip(grads) {
                    for (p, &gv) in t.value.data_mut().iter_mut().zip(g) {
                        *p -= lr * gv;
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2) = (self.beta1, self.beta2);
                let c1 = 1.0 - b1.powi(self.steps as i32);
                let c2 = 1.0 - b2.powi(self.steps as i32);
                for (i, (t, g)) in params.tensors.iter_mut().zip(grads).enumerate() {
                    let m = &mut self.first_moment[i];
                    let v = &mut self.second_moment[i];
                    for (j, p) in t.value.data_mut().iter_mut().enumerate() {
                        let gv = g[j];
                        m[j] = b1 * m[j] + (1.0 - b1) * gv;
                        v[j] = b2 * v[j] + (1.0 - b2) * gv * gv;
                        let m_hat = m[j] / c1;
                        let v_hat = v[j] / c2;
                        *p -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub train_classification_loss: f64,
    pub train_shap_loss: f64,
    pub train_total_loss: f64,
    pub test_total_loss: f64,
    pub test_classification_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epochs: Vec<EpochLoss>,
}

impl LossRecord {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn train_totals(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_total_loss).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(LOSS_CURVE_HEADER);
        out.push('\n');
        for (i, e) in self.epochs.iter().enumerate() {
            let _ = writeln!(
                out,
                "{i},{},{},{},{},{}",
                e.train_classification_loss,
                e.train_shap_loss,
                e.train_total_loss,
                e.test_total_loss,
                e.test_classification_loss
            );
        }
        out
    }
}

pub const LOSS_CURVE_HEADER: &str =
    "epoch,train_cls_loss,train_shap_loss,train_total,test_total,test_cls_loss";

/// Index of the minimal loss; ties go to the earliest epoch.
pub fn argmin_earliest(losses: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &l) in losses.iter().enumerate() {
        if best.map_or(true, |(_, b)| l < b) {
            best = Some((i, l));
        }
    }
    best.map(|(i, _)| i)
}

pub fn select_best_epoch(record: &LossRecord, criterion: SelectionCriterion) -> Result<usize> {
    let losses: Vec<f64> = record
        .epochs
        .iter()
        .map(|e| match criterion {
            SelectionCriterion::Total => e.train_total_loss,
            SelectionCriterion::Classification => e.train_classification_loss,
        })
        .collect();
    argmin_earliest(&losses).ok_or(TrainError::EmptyRecord)
}

/// Loss terms of one objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub classification: f64,
    pub shap: Option<f64>,
    pub l2: Option<f64>,
    pub total: f64,
}

/// Gradients of one objective evaluation, per parameter tensor.
struct StepResult {
    losses: LossBreakdown,
    grads: Option<Vec<Vec<f64>>>,
}

fn graph_grads(graph: &mut Graph, loss: NodeId, params: &[NodeId]) -> Result<Vec<Vec<f64>>> {
    let map = graph.gradient(loss, params)?;
    Ok(params
        .iter()
        .map(|&p| graph.value(map[p]).data().to_vec())
        .collect())
}

fn add_into(acc: &mut [Vec<f64>], other: &[Vec<f64>]) {
    for (a, b) in acc.iter_mut().zip(other) {
        for (x, y) in a.iter_mut().zip(b) {
            *x += y;
        }
    }
}

/// Evaluates (and optionally differentiates) the objective of `config.mode`
/// on `samples`.
fn objective(
    params: &ModelParameters,
    samples: &Samples,
    background: &BackgroundSet,
    config: &TrainingConfig,
    mode: Mode,
    graph_seed: u64,
    attribution_seed: u64,
    want_grads: bool,
) -> Result<StepResult> {
    let n = samples.len();
    if n == 0 {
        return Err(TrainError::EmptyData);
    }

    let mut graph = Graph::new(graph_seed);
    let bound = params.bind(&mut graph);
    let x = graph.constant(samples.features.clone());
    let logits = forward(&mut graph, &params.spec, &bound, x, mode)?;
    let probs = graph.sigmoid(logits)?;
    let cls = bce_loss(&mut graph, probs, &samples.labels)?;
    let classification = graph.scalar_value(cls)?;
    let mut l2 = None;
    let loss = if config.mode == TrainingMode::L2 {
        let pen = l2_penalty(&mut graph, params, &bound)?;
        l2 = Some(graph.scalar_value(pen)?);
        let weighted = graph.scale(pen, config.l2_coefficient)?;
        graph.add(cls, weighted)?
    } else {
        cls
    };
    let mut total = graph.scalar_value(loss)?;
    let mut grads = if want_grads {
        Some(graph_grads(&mut graph, loss, &bound.nodes)?)
    } else {
        None
    };
    drop(graph);

    let mut shap = None;
    if config.computes_prior() {
        let attr_cfg = AttributionConfig {
            seed: attribution_seed,
            ..config.attribution.clone()
        };
        let plan = AttributionPlan::new(n, background.len(), &attr_cfg)?;
        let chunk = chunk_size(&params.spec, &plan);
        let rows: Vec<&[f64]> = (0..n).map(|i| samples.row(i)).collect();
        let differentiate = want_grads && config.uses_prior();
        let mut shap_value = 0.0;
        for start in (0..n).step_by(chunk) {
            let end = (start + chunk).min(n);
            let mut graph = Graph::new(attribution_seed);
            let bound = params.bind(&mut graph);
            let attr = attribution_nodes(
                &mut graph,
                &params.spec,
                &bound,
                &rows[start..end],
                background,
                &plan.slice(start..end),
            )?;
            let part = shap_loss(&mut graph, attr.g_sum, &samples.labels[start..end])?;
            // the batch mean is the size-weighted sum of chunk means
            let part = graph.scale(part, (end - start) as f64 / n as f64)?;
            shap_value += graph.scalar_value(part)?;
            if differentiate {
                let weighted = graph.scale(part, config.lambda)?;
                let g = graph_grads(&mut graph, weighted, &bound.nodes)?;
                add_into(grads.as_mut().expect("gradients requested"), &g);
            }
        }
        shap = Some(shap_value);
        if config.uses_prior() {
            total += config.lambda * shap_value;
        }
    }
    Ok(StepResult {
        losses: LossBreakdown {
            classification,
            shap,
            l2,
            total,
        },
        grads,
    })
}

/// Eval-mode objective of `config.mode` at `params`, without gradients.
pub fn evaluate_objective(
    params: &ModelParameters,
    samples: &Samples,
    background: &BackgroundSet,
    config: &TrainingConfig,
    attribution_seed: u64,
) -> Result<LossBreakdown> {
    Ok(objective(
        params,
        samples,
        background,
        config,
        Mode::Eval,
        0,
        attribution_seed,
        false,
    )?
    .losses)
}

/// Background for a run (or for one epoch when resampling).
pub fn background_for(train: &Samples, config: &TrainingConfig, epoch: usize) -> BackgroundSet {
    let index = if config.resample_background { epoch as u64 } else { 0 };
    BackgroundSet::sample(
        &train.features,
        config.background_size,
        seeds::derive(config.seed, "background", index),
    )
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters after each epoch, aligned with `record`.
    pub trajectory: Vec<ModelParameters>,
    pub record: LossRecord,
    pub background: BackgroundSet,
}

/// Snapshot from which training can resume.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Number of completed epochs.
    pub epoch: usize,
    pub params: ModelParameters,
    pub optimizer: Optimizer,
    pub record: LossRecord,
    pub config: TrainingConfig,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointState {
    epoch: usize,
    optimizer: Optimizer,
    record: LossRecord,
    config: TrainingConfig,
    moments: Vec<TensorEntry>,
}

impl Checkpoint {
    /// Writes `params.bin/json`, `optimizer.bin` and `state.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let io = |p: &Path, e: &dyn std::fmt::Display| TrainError::Io {
            path: p.display().to_string(),
            message: e.to_string(),
        };
        fs::create_dir_all(dir).map_err(|e| io(dir, &e))?;
        self.params.save(&dir.join("params.bin"))?;
        let moments: Vec<Tensor> = self
            .optimizer
            .first_moment
            .iter()
            .chain(&self.optimizer.second_moment)
            .map(|m| Tensor::vector(m.clone()))
            .collect();
        let names: Vec<String> = (0..moments.len()).map(|i| format!("moment{i}")).collect();
        let opt_path = dir.join("optimizer.bin");
        let entries = bundle::write_tensors(
            &opt_path,
            names.iter().map(String::as_str).zip(moments.iter()),
        )
        .map_err(|e| io(&opt_path, &e))?;
        let state = CheckpointState {
            epoch: self.epoch,
            optimizer: self.optimizer.clone(),
            record: self.record.clone(),
            config: self.config.clone(),
            moments: entries,
        };
        let state_path = dir.join("state.json");
        let json = serde_json::to_string_pretty(&state).expect("state serializes");
        fs::write(&state_path, json).map_err(|e| io(&state_path, &e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let io = |p: &Path, e: &dyn std::fmt::Display| TrainError::Io {
            path: p.display().to_string(),
            message: e.to_string(),
        };
        let params = ModelParameters::load(&dir.join("params.bin"))?;
        let state_path = dir.join("state.json");
        let text = fs::read_to_string(&state_path).map_err(|e| io(&state_path, &e))?;
        let state: CheckpointState =
            serde_json::from_str(&text).map_err(|e| io(&state_path, &e))?;
        let opt_path = dir.join("optimizer.bin");
        let moments =
            bundle::read_tensors(&opt_path, &state.moments).map_err(|e| io(&opt_path, &e))?;
        let k = params.tensors.len();
        if moments.len() != 2 * k {
            return Err(io(&opt_path, &"moment count does not match parameters"));
        }
        let mut optimizer = state.optimizer;
        let mut moments = moments.into_iter().map(Tensor::into_data);
        optimizer.first_moment = moments.by_ref().take(k).collect();
        optimizer.second_moment = moments.collect();
        Ok(Self {
            epoch: state.epoch,
            params,
            optimizer,
            record: state.record,
            config: state.config,
        })
    }
}

/// Epoch-by-epoch driver of the training loop.
pub struct Trainer<'a> {
    config: TrainingConfig,
    train: &'a Samples,
    test: &'a Samples,
    params: ModelParameters,
    optimizer: Optimizer,
    background: BackgroundSet,
    record: LossRecord,
    trajectory: Vec<ModelParameters>,
    epoch: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(
        params: ModelParameters,
        train: &'a Samples,
        test: &'a Samples,
        config: TrainingConfig,
    ) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(TrainError::EmptyData);
        }
        let optimizer = Optimizer::new(config.optimizer, config.learning_rate, &params);
        let background = background_for(train, &config, 0);
        Ok(Self {
            config,
            train,
            test,
            params,
            optimizer,
            background,
            record: LossRecord::default(),
            trajectory: Vec::new(),
            epoch: 0,
        })
    }

    pub fn resume(checkpoint: Checkpoint, train: &'a Samples, test: &'a Samples) -> Result<Self> {
        checkpoint.config.validate()?;
        if train.is_empty() {
            return Err(TrainError::EmptyData);
        }
        let background = background_for(train, &checkpoint.config, checkpoint.epoch);
        Ok(Self {
            config: checkpoint.config,
            train,
            test,
            params: checkpoint.params,
            optimizer: checkpoint.optimizer,
            background,
            record: checkpoint.record,
            trajectory: Vec::new(),
            epoch: checkpoint.epoch,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn params(&self) -> &ModelParameters {
        &self.params
    }

    pub fn background(&self) -> &BackgroundSet {
        &self.background
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            epoch: self.epoch,
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
            record: self.record.clone(),
            config: self.config.clone(),
        }
    }

    fn batches(&self) -> Vec<Vec<usize>> {
        let n = self.train.len();
        match self.config.batch_size {
            Some(b) if b < n => {
                let mut order: Vec<usize> = (0..n).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(
                    self.config.seed,
                    "shuffle",
                    self.epoch as u64,
                ));
                order.shuffle(&mut rng);
                order.chunks(b).map(<[usize]>::to_vec).collect()
            }
            _ => vec![(0..n).collect()],
        }
    }

    /// Runs one epoch and returns its losses.
    pub fn step_epoch(&mut self) -> Result<EpochLoss> {
        let e = self.epoch;
        if self.config.resample_background && e > 0 {
            self.background = background_for(self.train, &self.config, e);
        }
        let n = self.train.len() as f64;
        let (mut cls, mut shap, mut total) = (0.0, 0.0, 0.0);
        for (b, rows) in self.batches().into_iter().enumerate() {
            let stream = ((e as u64) << 20) | b as u64;
            let batch = if rows.len() == self.train.len() {
                self.train.clone()
            } else {
                self.train.select(&rows)
            };
            let step = objective(
                &self.params,
                &batch,
                &self.background,
                &self.config,
                Mode::Train,
                seeds::derive(self.config.seed, "dropout", stream),
                seeds::derive(self.config.seed, "attribution", stream),
                true,
            )?;
            let losses = step.losses;
            if !losses.total.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch: e,
                    what: "training loss",
                });
            }
            let grads = step.grads.expect("gradients requested");
            if grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(TrainError::NonFinite {
                    epoch: e,
                    what: "gradient",
                });
            }
            let w = rows.len() as f64 / n;
            cls += w * losses.classification;
            shap += w * losses.shap.unwrap_or(0.0);
            total += w * losses.total;
            self.optimizer.step(&mut self.params, &grads);
        }

        let (test_total, test_cls) = if self.test.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let mut test_config = self.config.clone();
            test_config.track_shap_loss = false;
            let t = evaluate_objective(
                &self.params,
                self.test,
                &self.background,
                &test_config,
                seeds::derive(self.config.seed, "test_attribution", e as u64),
            )?;
            if !t.total.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch: e,
                    what: "test loss",
                });
            }
            (t.total, t.classification)
        };
        let entry = EpochLoss {
            train_classification_loss: cls,
            train_shap_loss: shap,
            train_total_loss: total,
            test_total_loss: test_total,
            test_classification_loss: test_cls,
        };
        self.record.epochs.push(entry);
        self.trajectory.push(self.params.clone());
        self.epoch += 1;
        log::debug!(
            "{} epoch {e}: train {:.6} (cls {:.6}, shap {:.6}) test {:.6}",
            self.config.mode,
            total,
            cls,
            shap,
            test_total
        );
        Ok(entry)
    }

    /// Trains until `config.epochs` epochs have completed.
    pub fn run(mut self) -> Result<TrainOutcome> {
        while self.epoch < self.config.epochs {
            self.step_epoch()?;
        }
        Ok(TrainOutcome {
            trajectory: self.trajectory,
            record: self.record,
            background: self.background,
        })
    }
}

pub fn train(
    params: ModelParameters,
    train: &Samples,
    test: &Samples,
    config: &TrainingConfig,
) -> Result<TrainOutcome> {
    Trainer::new(params, train, test, config.clone())?.run()
}
