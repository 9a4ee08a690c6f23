//! Path attributions: Integrated Gradients, Expected Gradients and the
//! attribution-sum explanation.
//!
//! For an input `x`, baseline `x'` and model logit `f`,
//!
//! ```text
//! phi_i = (x_i - x'_i) * (1/m) * sum_{k=1..m} df(x' + a_k (x - x'))/dx_i
//! ```
//!
//! and Expected Gradients averages this over baselines drawn from a
//! background set. The explanation offset `phi_0` is always zero, so the
//! explanation prediction is `g = sum_i phi_i`, read in logit space.
//!
//! All attribution arithmetic is built in a [`Graph`], so `g` stays
//! differentiable with respect to the model parameters.

use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, GraphError, NodeId, Tensor};
use crate::models::{forward, BoundParams, Mode, ModelError, ModelParameters, ModelSpec};

#[derive(Debug, thiserror::Error)]
pub enum AttributionError {
    #[error("background set is empty")]
    EmptyBackground,
    #[error("invalid attribution config: {0}")]
    InvalidConfig(String),
    #[error("input shape {got:?} does not match model input {expected:?}")]
    Shape { got: Vec<usize>, expected: Vec<usize> },
    #[error("length mismatch: {0} attribution sums vs {1} predictions")]
    LengthMismatch(usize, usize),
    #[error("local accuracy of an empty set")]
    Empty,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

type Result<T> = std::result::Result<T, AttributionError>;

/// Placement of the interpolation points along the straight path.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    /// `a_k = k/m`, `k = 1..m`.
    #[default]
    Grid,
    /// `a_k = (k - 1/2)/m`.
    Midpoint,
    /// `a_k ~ U(0, 1)`, drawn from the attribution seed.
    Random,
}

fn default_steps() -> usize {
    20
}

fn default_samples() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributionConfig {
    /// Interpolation steps per baseline (`m`).
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Baselines drawn per attributed instance (`T`).
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub interpolation: Interpolation,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        Self {
            steps: default_steps(),
            samples: default_samples(),
            seed: 0,
            interpolation: Interpolation::Grid,
        }
    }
}

impl AttributionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.samples == 0 {
            return Err(AttributionError::InvalidConfig(format!(
                "steps ({}) and samples ({}) must be at least 1",
                self.steps, self.samples
            )));
        }
        Ok(())
    }
}

/// Attribution baselines drawn without replacement from training instances.
#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundSet {
    /// Stacked baselines, shape `[k, ..instance_shape]`.
    pub frames: Tensor,
    pub seed: u64,
    pub requested_size: usize,
}

impl BackgroundSet {
    pub const DEFAULT_SIZE: usize = 100;

    /// Draws `min(requested_size, n)` rows of `instances` (shape `[n, ..]`).
    pub fn sample(instances: &Tensor, requested_size: usize, seed: u64) -> Self {
        let n = instances.shape().first().copied().unwrap_or(0);
        let k = requested_size.min(n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = index::sample(&mut rng, n, k).into_vec();
        picked.sort_unstable();
        Self::from_rows(instances, &picked, seed, requested_size)
    }

    /// Uses the given tensor rows directly as the background.
    pub fn from_tensor(frames: Tensor) -> Self {
        let k = frames.shape().first().copied().unwrap_or(0);
        Self {
            frames,
            seed: 0,
            requested_size: k,
        }
    }

    fn from_rows(instances: &Tensor, rows: &[usize], seed: u64, requested_size: usize) -> Self {
        let row_len: usize = instances.shape()[1..].iter().product();
        let mut data = Vec::with_capacity(rows.len() * row_len);
        for &r in rows {
            data.extend_from_slice(&instances.data()[r * row_len..(r + 1) * row_len]);
        }
        let mut shape = vec![rows.len()];
        shape.extend(&instances.shape()[1..]);
        Self {
            frames: Tensor::new(shape, data),
            seed,
            requested_size,
        }
    }

    pub fn len(&self) -> usize {
        self.frames.shape().first().copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d: usize = self.frames.shape()[1..].iter().product();
        &self.frames.data()[i * d..(i + 1) * d]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributionResult {
    /// Per-feature attributions, shaped like the input.
    pub phi: Tensor,
    /// Explanation offset; always zero.
    pub phi0: f64,
    /// Sum of `phi`.
    pub g_sum: f64,
}

/// Baselines and interpolation coefficients for a batch of instances.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionPlan {
    /// Background row indices per instance, all of equal length.
    pub baselines: Vec<Vec<usize>>,
    /// Interpolation coefficients per instance, `baselines * steps` long,
    /// baseline-major.
    pub alphas: Vec<Vec<f64>>,
    pub steps: usize,
}

impl AttributionPlan {
    /// Draws `min(samples, |background|)` distinct baselines per instance.
    pub fn new(instances: usize, background: usize, config: &AttributionConfig) -> Result<Self> {
        config.validate()?;
        if background == 0 {
            return Err(AttributionError::EmptyBackground);
        }
        let per = config.samples.min(background);
        let m = config.steps;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut baselines = Vec::with_capacity(instances);
        let mut alphas = Vec::with_capacity(instances);
        for _ in 0..instances {
            let picked = if per == background {
                (0..background).collect()
            } else {
                index::sample(&mut rng, background, per).into_vec()
            };
            let a: Vec<f64> = (0..per)
                .flat_map(|_| 1..=m)
                .map(|k| match config.interpolation {
                    Interpolation::Grid => k as f64 / m as f64,
                    Interpolation::Midpoint => (k as f64 - 0.5) / m as f64,
                    Interpolation::Random => rng.gen::<f64>(),
                })
                .collect();
            baselines.push(picked);
            alphas.push(a);
        }
        Ok(Self {
            baselines,
            alphas,
            steps: m,
        })
    }

    pub fn samples_per_instance(&self) -> usize {
        self.baselines.first().map_or(0, Vec::len)
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            baselines: self.baselines[range.clone()].to_vec(),
            alphas: self.alphas[range].to_vec(),
            steps: self.steps,
        }
    }
}

/// Graph nodes of a batch attribution.
#[derive(Debug, Clone, Copy)]
pub struct GraphAttribution {
    /// `[n, d]` flattened per-feature attributions.
    pub phi: NodeId,
    /// `[n]` attribution sums.
    pub g_sum: NodeId,
}

/// Builds the attribution of `inputs` (rows of length `d`) into `graph`,
/// differentiable with respect to `params`.
pub fn attribution_nodes(
    graph: &mut Graph,
    spec: &ModelSpec,
    params: &BoundParams,
    inputs: &[&[f64]],
    background: &BackgroundSet,
    plan: &AttributionPlan,
) -> Result<GraphAttribution> {
    let d = spec.input_len();
    let n = inputs.len();
    let t = plan.samples_per_instance();
    let m = plan.steps;
    if plan.baselines.len() != n || t == 0 {
        return Err(AttributionError::InvalidConfig(format!(
            "plan covers {} instances, batch has {n}",
            plan.baselines.len()
        )));
    }
    if let Some(bad) = inputs.iter().find(|x| x.len() != d) {
        return Err(AttributionError::Shape {
            got: vec![bad.len()],
            expected: spec.input_shape.clone(),
        });
    }
    let bg_d: usize = background.frames.shape()[1..].iter().product();
    if bg_d != d {
        return Err(AttributionError::Shape {
            got: background.frames.shape()[1..].to_vec(),
            expected: spec.input_shape.clone(),
        });
    }

    let rows = n * t * m;
    let mut path = Vec::with_capacity(rows * d);
    let mut diff = Vec::with_capacity(n * t * d);
    for (i, x) in inputs.iter().enumerate() {
        for (j, &b) in plan.baselines[i].iter().enumerate() {
            let base = background.row(b);
            let delta: Vec<f64> = x.iter().zip(base).map(|(xi, bi)| xi - bi).collect();
            for &a in &plan.alphas[i][j * m..(j + 1) * m] {
                path.extend(base.iter().zip(&delta).map(|(bi, di)| bi + a * di));
            }
            diff.extend(delta);
        }
    }
    let mut path_shape = vec![rows];
    path_shape.extend(&spec.input_shape);
    let z = graph.variable(Tensor::new(path_shape, path));
    let logits = forward(graph, spec, params, z, Mode::Eval)?;
    let total = graph.sum(logits)?;
    // logits of distinct rows are independent, so each row of this gradient
    // is the input gradient at that path point
    let grad = graph.gradient(total, &[z])?[z];
    let grad = graph.reshape(grad, &[rows, d])?;
    let per_baseline = graph.reduce_groups(grad, m)?;
    let per_baseline = graph.scale(per_baseline, 1.0 / m as f64)?;
    let delta = graph.constant(Tensor::new(vec![n * t, d], diff));
    let weighted = graph.mul(per_baseline, delta)?;
    let phi = graph.reduce_groups(weighted, t)?;
    let phi = graph.scale(phi, 1.0 / t as f64)?;
    let g_sum = graph.reduce_to_axis(phi, 0)?;
    Ok(GraphAttribution { phi, g_sum })
}

fn instance_rows<'a>(spec: &ModelSpec, xs: &'a Tensor) -> Result<Vec<&'a [f64]>> {
    let shape = xs.shape();
    if shape.is_empty() || shape[1..] != spec.input_shape[..] {
        let mut expected = vec![shape.first().copied().unwrap_or(0)];
        expected.extend(&spec.input_shape);
        return Err(AttributionError::Shape {
            got: shape.to_vec(),
            expected,
        });
    }
    let d = spec.input_len();
    Ok(xs.data().chunks(d).collect())
}

/// Rows of path points per attribution graph.
const CHUNK_ELEMENTS: usize = 1 << 16;

/// Number of instances attributed per graph so that path tensors stay near
/// [`CHUNK_ELEMENTS`] elements.
pub fn chunk_size(spec: &ModelSpec, plan: &AttributionPlan) -> usize {
    let per = plan.samples_per_instance().max(1) * plan.steps * spec.input_len();
    (CHUNK_ELEMENTS / per.max(1)).max(1)
}

/// Expected Gradients for every instance of `xs` (shape `[n, ..input]`).
pub fn expected_gradients_batch(
    params: &ModelParameters,
    xs: &Tensor,
    background: &BackgroundSet,
    config: &AttributionConfig,
) -> Result<Vec<AttributionResult>> {
    let rows = instance_rows(&params.spec, xs)?;
    let plan = AttributionPlan::new(rows.len(), background.len(), config)?;
    let chunk = chunk_size(&params.spec, &plan);
    let mut out = Vec::with_capacity(rows.len());
    for start in (0..rows.len()).step_by(chunk) {
        let end = (start + chunk).min(rows.len());
        let mut graph = Graph::new(config.seed);
        let bound = params.bind(&mut graph);
        let attr = attribution_nodes(
            &mut graph,
            &params.spec,
            &bound,
            &rows[start..end],
            background,
            &plan.slice(start..end),
        )?;
        let d = params.spec.input_len();
        let phi = graph.value(attr.phi);
        let sums = graph.value(attr.g_sum);
        for (i, row) in phi.data().chunks(d).enumerate() {
            out.push(AttributionResult {
                phi: Tensor::new(params.spec.input_shape.clone(), row.to_vec()),
                phi0: 0.0,
                g_sum: sums.data()[i],
            });
        }
    }
    Ok(out)
}

pub fn expected_gradients(
    params: &ModelParameters,
    x: &Tensor,
    background: &BackgroundSet,
    config: &AttributionConfig,
) -> Result<AttributionResult> {
    let mut shape = vec![1];
    shape.extend(x.shape());
    let xs = x
        .clone()
        .reshaped(shape)
        .expect("adding a unit axis preserves length");
    Ok(expected_gradients_batch(params, &xs, background, config)?.remove(0))
}

/// Integrated Gradients from a single baseline on the `k/m` grid.
pub fn integrated_gradients(
    params: &ModelParameters,
    x: &Tensor,
    x_prime: &Tensor,
    steps: usize,
) -> Result<AttributionResult> {
    integrated_gradients_with(params, x, x_prime, steps, Interpolation::Grid)
}

pub fn integrated_gradients_with(
    params: &ModelParameters,
    x: &Tensor,
    x_prime: &Tensor,
    steps: usize,
    interpolation: Interpolation,
) -> Result<AttributionResult> {
    if x.shape() != x_prime.shape() {
        return Err(AttributionError::Shape {
            got: x_prime.shape().to_vec(),
            expected: x.shape().to_vec(),
        });
    }
    let mut shape = vec![1];
    shape.extend(x_prime.shape());
    let background = BackgroundSet::from_tensor(
        x_prime
            .clone()
            .reshaped(shape)
            .expect("adding a unit axis preserves length"),
    );
    let config = AttributionConfig {
        steps,
        samples: 1,
        seed: 0,
        interpolation,
    };
    expected_gradients(params, x, &background, &config)
}

/// The explanation prediction `g = sum phi`, in logit space.
pub fn explanation_prediction(result: &AttributionResult) -> f64 {
    result.g_sum
}

/// Class indicated by an attribution sum; a zero sum resolves to class 1.
pub fn explanation_class(g_sum: f64) -> u8 {
    u8::from(g_sum >= 0.0)
}

/// Class predicted from a logit; `sigmoid(0) = 0.5` rounds up.
pub fn logit_class(logit: f64) -> u8 {
    u8::from(logit >= 0.0)
}

/// Fraction of instances whose explanation class matches `reference`.
pub fn local_accuracy(g_sums: &[f64], reference: &[u8]) -> Result<f64> {
    if g_sums.len() != reference.len() {
        return Err(AttributionError::LengthMismatch(g_sums.len(), reference.len()));
    }
    if g_sums.is_empty() {
        return Err(AttributionError::Empty);
    }
    let agree = g_sums
        .iter()
        .zip(reference)
        .filter(|(&g, &p)| explanation_class(g) == p)
        .count();
    Ok(agree as f64 / g_sums.len() as f64)
}

/// Which labels local accuracy is measured against.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocalAccuracyReference {
    #[default]
    Classifier,
    Labels,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributionRow {
    pub instance_id: String,
    pub label: u8,
    pub classifier_pred: u8,
    pub g_sum: f64,
}

impl AttributionRow {
    pub fn explanation_class(&self) -> u8 {
        explanation_class(self.g_sum)
    }

    pub fn agrees(&self) -> bool {
        self.explanation_class() == self.classifier_pred
    }
}

pub const ATTRIBUTIONS_HEADER: &str =
    "instance_id,label,classifier_pred,g_sum,explanation_class,agree";

pub fn write_attributions_csv(path: &Path, rows: &[AttributionRow]) -> Result<()> {
    let io_err = |source| AttributionError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = String::new();
    out.push_str(ATTRIBUTIONS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.instance_id,
            r.label,
            r.classifier_pred,
            r.g_sum,
            r.explanation_class(),
            u8::from(r.agrees())
        ));
    }
    let mut f = std::fs::File::create(path).map_err(io_err)?;
    f.write_all(out.as_bytes()).map_err(io_err)
}
