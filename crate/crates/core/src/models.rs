//! Small binary classifiers producing one logit per instance.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, GraphError, NodeId, Tensor};
use crate::bundle::{self, TensorEntry};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("batch shape {got:?} does not match model input {expected:?}")]
    InputShape { got: Vec<usize>, expected: Vec<usize> },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("checkpoint {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint sidecar {path}: {source}")]
    Sidecar {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("checkpoint {0} does not match its model spec")]
    Mismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Mlp,
    Cnn,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Sigmoid,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn default_kernel_size() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// `[d]` (or any shape, flattened) for an MLP; `[channels, height, width]`
    /// for a CNN.
    pub input_shape: Vec<usize>,
    #[serde(default)]
    pub hidden_sizes: Vec<usize>,
    #[serde(default)]
    pub conv_channels: Vec<usize>,
    #[serde(default = "default_kernel_size")]
    pub kernel_size: usize,
    #[serde(default)]
    pub dropout_rate: f64,
    #[serde(default)]
    pub activation: Activation,
}

impl ModelSpec {
    pub fn mlp(input_dim: usize, hidden_sizes: Vec<usize>) -> Self {
        Self {
            kind: ModelKind::Mlp,
            input_shape: vec![input_dim],
            hidden_sizes,
            conv_channels: Vec::new(),
            kernel_size: default_kernel_size(),
            dropout_rate: 0.0,
            activation: Activation::Relu,
        }
    }

    pub fn cnn(input_shape: [usize; 3], conv_channels: Vec<usize>, kernel_size: usize, hidden_sizes: Vec<usize>) -> Self {
        Self {
            kind: ModelKind::Cnn,
            input_shape: input_shape.to_vec(),
            hidden_sizes,
            conv_channels,
            kernel_size,
            dropout_rate: 0.0,
            activation: Activation::Relu,
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout_rate = rate;
        self
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Checks layer consistency and returns the ordered parameter layout.
    pub fn layout(&self) -> Result<Vec<ParamSlot>, ModelError> {
        let bad = |m: String| Err(ModelError::InvalidSpec(m));
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return bad(format!("input_shape {:?} must be nonempty and positive", self.input_shape));
        }
        if self.hidden_sizes.contains(&0) {
            return bad("hidden sizes must be positive".into());
        }
        let mut slots = Vec::new();
        let mut flat = self.input_len();
        match self.kind {
            ModelKind::Mlp => {
                if !self.conv_channels.is_empty() {
                    return bad("conv_channels given for an mlp".into());
                }
            }
            ModelKind::Cnn => {
                let &[c, h, w] = self.input_shape.as_slice() else {
                    return bad(format!(
                        "cnn input_shape must be [channels, height, width], got {:?}",
                        self.input_shape
                    ));
                };
                if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
                    return bad("cnn needs at least one positive conv channel count".into());
                }
                let k = self.kernel_size;
                if k == 0 {
                    return bad("kernel_size must be positive".into());
                }
                let (mut ch, mut hh, mut ww) = (c, h, w);
                for (i, &out) in self.conv_channels.iter().enumerate() {
                    if k > hh || k > ww {
                        return bad(format!(
                            "kernel {k} does not fit the {hh}x{ww} map entering conv layer {i}"
                        ));
                    }
                    slots.push(ParamSlot {
                        name: format!("conv{i}.weight"),
                        shape: vec![out, ch, k, k],
                        is_weight: true,
                        fan: (ch * k * k, out * k * k),
                    });
                    slots.push(ParamSlot::bias(format!("conv{i}.bias"), out));
                    ch = out;
                    hh = hh + 1 - k;
                    ww = ww + 1 - k;
                }
                flat = ch * hh * ww;
            }
        }
        for (i, &h) in self.hidden_sizes.iter().enumerate() {
            slots.push(ParamSlot {
                name: format!("fc{i}.weight"),
                shape: vec![flat, h],
                is_weight: true,
                fan: (flat, h),
            });
            slots.push(ParamSlot::bias(format!("fc{i}.bias"), h));
            flat = h;
        }
        slots.push(ParamSlot {
            name: "out.weight".into(),
            shape: vec![flat, 1],
            is_weight: true,
            fan: (flat, 1),
        });
        slots.push(ParamSlot::bias("out.bias".into(), 1));
        Ok(slots)
    }

    pub fn parameter_count(&self) -> Result<usize, ModelError> {
        Ok(self
            .layout()?
            .iter()
            .map(|s| s.shape.iter().product::<usize>())
            .sum())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub is_weight: bool,
    fan: (usize, usize),
}

impl ParamSlot {
    fn bias(name: String, len: usize) -> Self {
        Self {
            name,
            shape: vec![len],
            is_weight: false,
            fan: (0, 0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub value: Tensor,
    pub is_weight: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub spec: ModelSpec,
    pub init_seed: u64,
    pub tensors: Vec<NamedTensor>,
}

/// Parameters registered as variables in one graph, in layout order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub nodes: Vec<NodeId>,
}

/// Glorot-uniform weights, zero biases.
pub fn init_model(spec: &ModelSpec, seed: u64) -> Result<ModelParameters, ModelError> {
    let layout = spec.layout()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = layout
        .into_iter()
        .map(|slot| {
            let len = slot.shape.iter().product();
            let data = if slot.is_weight {
                let limit = (6.0 / (slot.fan.0 + slot.fan.1) as f64).sqrt();
                (0..len).map(|_| rng.gen_range(-limit..limit)).collect()
            } else {
                vec![0.0; len]
            };
            NamedTensor {
                name: slot.name,
                value: Tensor::new(slot.shape, data),
                is_weight: slot.is_weight,
            }
        })
        .collect();
    Ok(ModelParameters {
        spec: spec.clone(),
        init_seed: seed,
        tensors,
    })
}

impl ModelParameters {
    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    pub fn bind(&self, graph: &mut Graph) -> BoundParams {
        BoundParams {
            nodes: self
                .tensors
                .iter()
                .map(|t| graph.variable(t.value.clone()))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors
            .iter_mut()
            .find(|t| t.name == name)
            .map(|t| &mut t.value)
    }

    /// All parameter values concatenated in layout order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| t.value.data().iter().copied())
            .collect()
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn with_flat(&self, flat: &[f64]) -> Self {
        assert_eq!(flat.len(), self.parameter_count());
        let mut out = self.clone();
        let mut offset = 0;
        for t in &mut out.tensors {
            let n = t.value.len();
            t.value.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        out
    }

    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> Self {
        let mut out = self.clone();
        for t in &mut out.tensors {
            t.value = t.value.map(&f);
        }
        out
    }

    /// Writes `path` (raw little-endian f64) and its JSON sidecar.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let io_err = |source| ModelError::Io {
            path: path.display().to_string(),
            source,
        };
        let entries = bundle::write_tensors(
            path,
            self.tensors.iter().map(|t| (t.name.as_str(), &t.value)),
        )
        .map_err(io_err)?;
        let sidecar = Sidecar {
            spec: self.spec.clone(),
            init_seed: self.init_seed,
            tensors: entries,
        };
        let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
        let side = bundle::sidecar_path(path);
        fs::write(&side, json).map_err(|source| ModelError::Io {
            path: side.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let side = bundle::sidecar_path(path);
        let text = fs::read_to_string(&side).map_err(|source| ModelError::Io {
            path: side.display().to_string(),
            source,
        })?;
        let sidecar: Sidecar =
            serde_json::from_str(&text).map_err(|source| ModelError::Sidecar {
                path: side.display().to_string(),
                source,
            })?;
        let layout = sidecar.spec.layout()?;
        let matches = layout.len() == sidecar.tensors.len()
            && layout
                .iter()
                .zip(&sidecar.tensors)
                .all(|(s, e)| s.name == e.name && s.shape == e.shape);
        if !matches {
            return Err(ModelError::Mismatch(path.display().to_string()));
        }
        let values = bundle::read_tensors(path, &sidecar.tensors).map_err(|source| {
            ModelError::Io {
                path: path.display().to_string(),
                source,
            }
        })?;
        Ok(Self {
            spec: sidecar.spec,
            init_seed: sidecar.init_seed,
            tensors: layout
                .into_iter()
                .zip(values)
                .map(|(slot, value)| NamedTensor {
                    name: slot.name,
                    value,
                    is_weight: slot.is_weight,
                })
                .collect(),
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    spec: ModelSpec,
    init_seed: u64,
    tensors: Vec<TensorEntry>,
}

fn activate(graph: &mut Graph, x: NodeId, act: Activation) -> Result<NodeId, GraphError> {
    match act {
        Activation::Relu => graph.relu(x),
        Activation::Sigmoid => graph.sigmoid(x),
        Activation::Tanh => graph.tanh(x),
    }
}

fn add_bias(graph: &mut Graph, x: NodeId, bias: NodeId) -> Result<NodeId, GraphError> {
    let shape = graph.shape(x).to_vec();
    let b = graph.broadcast_axis(bias, &shape, 1)?;
    graph.add(x, b)
}

/// Pre-sigmoid logits, shape `[n]`, for a batch node of shape
/// `[n, ..input_shape]`.
pub fn forward(
    graph: &mut Graph,
    spec: &ModelSpec,
    params: &BoundParams,
    batch: NodeId,
    mode: Mode,
) -> Result<NodeId, ModelError> {
    let shape = graph.shape(batch).to_vec();
    if shape.len() < 2 || shape[1..].iter().product::<usize>() != spec.input_len()
        || (spec.kind == ModelKind::Cnn && shape[1..] != spec.input_shape[..])
    {
        let mut expected = vec![shape.first().copied().unwrap_or(0)];
        expected.extend(&spec.input_shape);
        return Err(ModelError::InputShape {
            got: shape,
            expected,
        });
    }
    let n = shape[0];
    let mut p = params.nodes.iter().copied();
    let mut next = move || p.next().expect("bound parameters follow the layout");
    let train = mode == Mode::Train;

    let mut h = batch;
    if spec.kind == ModelKind::Cnn {
        let mut s = shape.clone();
        for _ in &spec.conv_channels {
            let (k, b) = (next(), next());
            h = graph.conv2d(h, k)?;
            h = add_bias(graph, h, b)?;
            h = activate(graph, h, spec.activation)?;
            s = graph.shape(h).to_vec();
        }
        h = graph.reshape(h, &[n, s[1..].iter().product()])?;
    } else {
        h = graph.reshape(h, &[n, spec.input_len()])?;
    }
    for _ in &spec.hidden_sizes {
        let (w, b) = (next(), next());
        h = graph.matmul(h, w)?;
        h = add_bias(graph, h, b)?;
        h = activate(graph, h, spec.activation)?;
        h = graph.dropout(h, spec.dropout_rate, train)?;
    }
    let (w, b) = (next(), next());
    h = graph.matmul(h, w)?;
    h = add_bias(graph, h, b)?;
    Ok(graph.reshape(h, &[n])?)
}

/// Sum of squared weights (biases excluded) as a differentiable node.
pub fn l2_penalty(
    graph: &mut Graph,
    params: &ModelParameters,
    bound: &BoundParams,
) -> Result<NodeId, GraphError> {
    let mut total = None;
    for (t, &node) in params.tensors.iter().zip(&bound.nodes) {
        if !t.is_weight {
            continue;
        }
        let sq = graph.mul(node, node)?;
        let s = graph.sum(sq)?;
        total = Some(match total {
            None => s,
            Some(acc) => graph.add(acc, s)?,
        });
    }
    Ok(match total {
        Some(t) => t,
        None => graph.constant(Tensor::scalar(0.0)),
    })
}

/// Eval-mode logits for a batch tensor of shape `[n, ..input_shape]`.
pub fn predict_logits(params: &ModelParameters, batch: &Tensor) -> Result<Vec<f64>, ModelError> {
    let mut graph = Graph::new(0);
    let bound = params.bind(&mut graph);
    let x = graph.constant(batch.clone());
    let logits = forward(&mut graph, &params.spec, &bound, x, Mode::Eval)?;
    Ok(graph.value(logits).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_gradient;

    #[test]
    fn mlp_parameter_count() {
        let spec = ModelSpec::mlp(4, vec![8]);
        let p = init_model(&spec, 7).unwrap();
        assert_eq!(p.parameter_count(), 4 * 8 + 8 + 8 + 1);
        assert_eq!(spec.parameter_count().unwrap(), 49);
    }

    #[test]
    fn cnn_parameter_count_matches_layer_arithmetic() {
        let spec = ModelSpec::cnn([5, 32, 32], vec![4, 8], 3, vec![16]);
        // conv0: 4*5*3*3 + 4; map 30x30
        let conv0 = 4 * 5 * 9 + 4;
        // conv1: 8*4*3*3 + 8; map 28x28
        let conv1 = 8 * 4 * 9 + 8;
        let fc0 = 8 * 28 * 28 * 16 + 16;
        let out = 16 + 1;
        let p = init_model(&spec, 1).unwrap();
        assert_eq!(p.parameter_count(), conv0 + conv1 + fc0 + out);
        assert_eq!(p.parameter_count(), 100_865);
    }

    #[test]
    fn initialization_is_seeded() {
        let spec = ModelSpec::cnn([2, 6, 6], vec![3], 3, vec![4]);
        assert_eq!(init_model(&spec, 3).unwrap(), init_model(&spec, 3).unwrap());
        assert_ne!(init_model(&spec, 3).unwrap(), init_model(&spec, 4).unwrap());
        let p = init_model(&spec, 3).unwrap();
        assert!(p.get("conv0.bias").unwrap().data().iter().all(|&b| b == 0.0));
        let w = p.get("fc0.weight").unwrap();
        let limit = (6.0f64 / (3.0 * 16.0 + 4.0)).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= limit));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = ModelSpec::cnn([1, 4, 4], vec![2, 2], 3, vec![]);
        assert!(s.layout().is_err(), "second conv does not fit a 2x2 map");
        s = ModelSpec::cnn([1, 4, 4], vec![], 3, vec![]);
        assert!(s.layout().is_err());
        s = ModelSpec::mlp(3, vec![0]);
        assert!(init_model(&s, 0).is_err());
        s = ModelSpec::mlp(3, vec![2]).with_dropout(1.0);
        assert!(s.layout().is_err());
        s = ModelSpec::mlp(3, vec![2]);
        s.input_shape = vec![3, 3, 3, 3];
        s.kind = ModelKind::Cnn;
        s.conv_channels = vec![1];
        assert!(s.layout().is_err());
    }

    #[test]
    fn zero_parameters_give_zero_logits() {
        let spec = ModelSpec::cnn([2, 5, 5], vec![2], 3, vec![3]);
        let p = init_model(&spec, 9).unwrap().map_values(|_| 0.0);
        let batch = Tensor::new(vec![3, 2, 5, 5], (0..150).map(|i| i as f64 * 0.1).collect());
        assert_eq!(predict_logits(&p, &batch).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn single_linear_layer() {
        let mut p = init_model(&ModelSpec::mlp(2, vec![]), 0).unwrap();
        *p.get_mut("out.weight").unwrap() = Tensor::new(vec![2, 1], vec![2.0, 3.0]);
        let logits = predict_logits(&p, &Tensor::new(vec![1, 2], vec![1.0, 1.0])).unwrap();
        assert_eq!(logits, vec![5.0]);
    }

    #[test]
    fn batch_shape_is_checked() {
        let p = init_model(&ModelSpec::mlp(3, vec![2]), 0).unwrap();
        let err = predict_logits(&p, &Tensor::zeros(&[2, 4])).unwrap_err();
        assert!(matches!(err, ModelError::InputShape { .. }));
        let c = init_model(&ModelSpec::cnn([1, 4, 4], vec![1], 3, vec![]), 0).unwrap();
        assert!(predict_logits(&c, &Tensor::zeros(&[2, 16])).is_err());
    }

    #[test]
    fn train_mode_without_dropout_equals_eval() {
        let spec = ModelSpec::mlp(5, vec![6, 4]);
        let p = init_model(&spec, 2).unwrap();
        let x = Tensor::new(vec![3, 5], (0..15).map(|i| (i as f64).sin()).collect());
        let run = |mode| {
            let mut g = Graph::new(5);
            let b = p.bind(&mut g);
            let xin = g.constant(x.clone());
            let out = forward(&mut g, &spec, &b, xin, mode).unwrap();
            g.value(out).clone()
        };
        assert_eq!(run(Mode::Train), run(Mode::Eval));

        let dspec = spec.clone().with_dropout(0.5);
        let dp = ModelParameters { spec: dspec.clone(), ..p.clone() };
        let mut g = Graph::new(5);
        let b = dp.bind(&mut g);
        let xin = g.constant(x.clone());
        let t = forward(&mut g, &dspec, &b, xin, Mode::Train).unwrap();
        let e = forward(&mut g, &dspec, &b, xin, Mode::Eval).unwrap();
        assert_ne!(g.value(t), g.value(e));
        assert_eq!(predict_logits(&dp, &x).unwrap(), predict_logits(&dp, &x).unwrap());
    }

    #[test]
    fn batch_permutation_permutes_logits() {
        let spec = ModelSpec::cnn([2, 5, 5], vec![2], 3, vec![3]);
        let p = init_model(&spec, 4).unwrap();
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|r| (0..50).map(|i| ((r * 50 + i) as f64 * 0.37).cos()).collect())
            .collect();
        let make = |order: &[usize]| {
            let data: Vec<f64> = order.iter().flat_map(|&r| rows[r].clone()).collect();
            Tensor::new(vec![4, 2, 5, 5], data)
        };
        let a = predict_logits(&p, &make(&[0, 1, 2, 3])).unwrap();
        let b = predict_logits(&p, &make(&[2, 0, 3, 1])).unwrap();
        assert_eq!(b, vec![a[2], a[0], a[3], a[1]]);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        for spec in [
            ModelSpec::mlp(4, vec![5, 3]).with_activation(Activation::Tanh),
            ModelSpec::cnn([2, 5, 4], vec![3, 2], 2, vec![4]).with_activation(Activation::Sigmoid),
            ModelSpec::cnn([1, 6, 6], vec![2], 3, vec![3]),
        ] {
            let p = init_model(&spec, 21).unwrap();
            let x0: Vec<f64> = (0..spec.input_len()).map(|i| (i as f64 * 0.61).sin()).collect();
            let mut shape = vec![1];
            shape.extend(&spec.input_shape);
            let mut g = Graph::new(0);
            let b = p.bind(&mut g);
            let x = g.variable(Tensor::new(shape.clone(), x0.clone()));
            let f = forward(&mut g, &spec, &b, x, Mode::Eval).unwrap();
            let s = g.sum(f).unwrap();
            let grad = g.gradient(s, &[x]).unwrap()[x];
            let analytic = g.value(grad).data().to_vec();
            let numeric = finite_difference_gradient(
                |v| predict_logits(&p, &Tensor::new(shape.clone(), v.to_vec())).unwrap()[0],
                &x0,
                1e-5,
            )
            .unwrap();
            for (a, n) in analytic.iter().zip(&numeric) {
                assert!((a - n).abs() <= 1e-7 * (1.0 + n.abs()), "{a} vs {n}");
            }
        }
    }

    #[test]
    fn l2_penalty_examples() {
        let spec = ModelSpec::mlp(3, vec![]);
        let zero = init_model(&spec, 0).unwrap().map_values(|_| 0.0);
        let mut g = Graph::new(0);
        let b = zero.bind(&mut g);
        let pen = l2_penalty(&mut g, &zero, &b).unwrap();
        assert_eq!(g.scalar_value(pen).unwrap(), 0.0);

        // single weight tensor holding (3, 4); bias is excluded
        let mut p = init_model(&ModelSpec::mlp(2, vec![]), 0).unwrap();
        *p.get_mut("out.weight").unwrap() = Tensor::new(vec![2, 1], vec![3.0, 4.0]);
        *p.get_mut("out.bias").unwrap() = Tensor::scalar(10.0);
        let mut g = Graph::new(0);
        let b = p.bind(&mut g);
        let pen = l2_penalty(&mut g, &p, &b).unwrap();
        assert_eq!(g.scalar_value(pen).unwrap(), 25.0);

        let base = init_model(&ModelSpec::cnn([1, 5, 5], vec![2], 3, vec![3]), 8).unwrap();
        let penalty = |p: &ModelParameters| {
            let mut g = Graph::new(0);
            let b = p.bind(&mut g);
            let n = l2_penalty(&mut g, p, &b).unwrap();
            g.scalar_value(n).unwrap()
        };
        let c = -2.5;
        let scaled = penalty(&base.map_values(|v| c * v));
        assert!((scaled - c * c * penalty(&base)).abs() < 1e-12 * scaled);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let p = init_model(&ModelSpec::cnn([2, 6, 6], vec![3], 3, vec![4]).with_dropout(0.2), 17).unwrap();
        p.save(&path).unwrap();
        assert!(dir.path().join("model.json").exists());
        assert_eq!(ModelParameters::load(&path).unwrap(), p);
        assert_eq!(
            fs::metadata(&path).unwrap().len() as usize,
            8 * p.parameter_count()
        );
    }
}
