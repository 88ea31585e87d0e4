//! Compact residual CNN mapping a `(J, T, 3)` gait tensor to a unit-norm
//! embedding.
//!
//! Layout: stem 3x3 conv, then one stage per channel width (the first at
//! stride 1, later ones at stride 2), each stage a stack of residual blocks
//! `relu(conv(relu(conv(x))) + shortcut(x))`, then global average pooling,
//! a linear head to `D` and L2 normalization. The shortcut is the identity
//! unless the block changes width or stride, in which case it is a 1x1 conv.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, NodeId, Real, Tensor};
use crate::dataset::GaitSequence;
use crate::skeleton::JOINT_COUNT;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbedderError {
    #[error("invalid embedder config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub channel_widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub embedding_dim: usize,
    /// Frames per input sequence.
    pub seq_len: usize,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            channel_widths: vec![16, 32, 64],
            blocks_per_stage: 1,
            embedding_dim: 32,
            seq_len: 30,
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<(), EmbedderError> {
        let bad = |m: String| Err(EmbedderError::InvalidConfig(m));
        if self.channel_widths.is_empty() || self.channel_widths.contains(&0) {
            return bad(format!("channel widths {:?} must be non-empty and positive", self.channel_widths));
        }
        if self.blocks_per_stage == 0 {
            return bad("blocks_per_stage must be at least 1".into());
        }
        if self.embedding_dim < 2 {
            return bad(format!("embedding dimension {} must be at least 2", self.embedding_dim));
        }
        if self.seq_len < 2 {
            return bad(format!("sequence length {} must be at least 2", self.seq_len));
        }
        Ok(())
    }

    /// Width of the pooled feature vector.
    pub fn feature_dim(&self) -> usize {
        *self.channel_widths.last().expect("validated config")
    }

    /// Channel-first network input: `(3, J, T)`.
    pub fn input_shape(&self) -> [usize; 3] {
        [3, JOINT_COUNT, self.seq_len]
    }
}

#[derive(Clone, Debug, PartialEq)]
struct LayerSpec {
    name: String,
    shape: Vec<usize>,
    fan_in: usize,
}

#[derive(Clone, Debug, PartialEq)]
enum Layer {
    Conv { prefix: String, stride: usize, padding: usize },
    Block { prefix: String, stride: usize, projected: bool },
    Head,
}

fn architecture(config: &EmbedderConfig) -> (Vec<Layer>, Vec<LayerSpec>) {
    let mut layers = Vec::new();
    let mut specs = Vec::new();
    let conv = |specs: &mut Vec<LayerSpec>, prefix: &str, c_out: usize, c_in: usize, k: usize| {
        specs.push(LayerSpec {
            name: format!("{prefix}.weight"),
            shape: vec![c_out, c_in, k, k],
            fan_in: c_in * k * k,
        });
        specs.push(LayerSpec {
            name: format!("{prefix}.bias"),
            shape: vec![c_out],
            fan_in: c_in * k * k,
        });
    };
    let first = config.channel_widths[0];
    conv(&mut specs, "stem", first, 3, 3);
    layers.push(Layer::Conv {
        prefix: "stem".into(),
        stride: 1,
        padding: 1,
    });
    let mut c_in = first;
    for (s, &width) in config.channel_widths.iter().enumerate() {
        for b in 0..config.blocks_per_stage {
            let stride = if s > 0 && b == 0 { 2 } else { 1 };
            let projected = stride != 1 || c_in != width;
            let prefix = format!("stage{s}.block{b}");
            conv(&mut specs, &format!("{prefix}.conv1"), width, c_in, 3);
            conv(&mut specs, &format!("{prefix}.conv2"), width, width, 3);
            if projected {
                conv(&mut specs, &format!("{prefix}.shortcut"), width, c_in, 1);
            }
            layers.push(Layer::Block {
                prefix,
                stride,
                projected,
            });
            c_in = width;
        }
    }
    let f = config.feature_dim();
    specs.push(LayerSpec {
        name: "head.weight".into(),
        shape: vec![config.embedding_dim, f],
        fan_in: f,
    });
    specs.push(LayerSpec {
        name: "head.bias".into(),
        shape: vec![config.embedding_dim],
        fan_in: f,
    });
    layers.push(Layer::Head);
    (layers, specs)
}

/// Every learnable tensor, named and ordered as the network consumes them.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbedderParams<T> {
    pub config: EmbedderConfig,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Real> EmbedderParams<T> {
    /// Validates names and shapes against the architecture `config` implies.
    pub fn new(config: EmbedderConfig, tensors: Vec<(String, Tensor<T>)>) -> Result<Self, EmbedderError> {
        config.validate()?;
        let (_, specs) = architecture(&config);
        if specs.len() != tensors.len() {
            return Err(EmbedderError::InvalidConfig(format!(
                "expected {} tensors, got {}",
                specs.len(),
                tensors.len()
            )));
        }
        for (spec, (name, t)) in specs.iter().zip(&tensors) {
            if spec.name != *name {
                return Err(EmbedderError::InvalidConfig(format!("expected tensor {}, got {name}", spec.name)));
            }
            if spec.shape != t.shape() {
                return Err(EmbedderError::ShapeMismatch {
                    context: name.clone(),
                    expected: spec.shape.clone(),
                    actual: t.shape().to_vec(),
                });
            }
            if !t.is_finite() {
                return Err(EmbedderError::InvalidConfig(format!("tensor {name} is not finite")));
            }
        }
        Ok(Self { config, tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> EmbedderParams<U> {
        EmbedderParams {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }
}

/// He-normal weights (variance `2 / fan_in`) and zero biases.
pub fn init_embedder<T: Real>(config: &EmbedderConfig, seed: u64) -> Result<EmbedderParams<T>, EmbedderError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, specs) = architecture(config);
    let tensors = specs
        .into_iter()
        .map(|spec| {
            let len: usize = spec.shape.iter().product();
            let data = if spec.name.ends_with(".bias") {
                vec![T::zero(); len]
            } else {
                let normal = Normal::new(0.0, (2.0 / spec.fan_in as f64).sqrt()).expect("positive std");
                (0..len).map(|_| T::of_f64(normal.sample(&mut rng))).collect()
            };
            (spec.name, Tensor::new(spec.shape, data).expect("spec shape"))
        })
        .collect();
    Ok(EmbedderParams {
        config: config.clone(),
        tensors,
    })
}

/// A built network graph that can be re-evaluated for many inputs.
#[derive(Clone, Debug)]
pub struct EmbedderGraph<T> {
    graph: Graph<T>,
    input: NodeId,
    params: Vec<NodeId>,
    output: NodeId,
    config: EmbedderConfig,
}

impl<T: Real> EmbedderGraph<T> {
    pub fn new(params: &EmbedderParams<T>) -> Result<Self, EmbedderError> {
        let config = params.config.clone();
        let mut g = Graph::new();
        let input = g.input("input", Tensor::zeros(&config.input_shape()));
        let mut ids = Vec::with_capacity(params.tensors.len());
        let mut by_name = std::collections::HashMap::new();
        for (name, t) in &params.tensors {
            let id = g.parameter(name.clone(), t.clone());
            ids.push(id);
            by_name.insert(name.as_str(), id);
        }
        let p = |name: String| by_name[name.as_str()];

        let (layers, _) = architecture(&config);
        let mut x = input;
        for layer in layers {
            match layer {
                Layer::Conv { prefix, stride, padding } => {
                    let c = g.conv2d(x, p(format!("{prefix}.weight")), p(format!("{prefix}.bias")), stride, padding)?;
                    x = g.relu(c)?;
                }
                Layer::Block {
                    prefix,
                    stride,
                    projected,
                } => {
                    let c1 = g.conv2d(
                        x,
                        p(format!("{prefix}.conv1.weight")),
                        p(format!("{prefix}.conv1.bias")),
                        stride,
                        1,
                    )?;
                    let h = g.relu(c1)?;
                    let c2 = g.conv2d(h, p(format!("{prefix}.conv2.weight")), p(format!("{prefix}.conv2.bias")), 1, 1)?;
                    let shortcut = if projected {
                        g.conv2d(
                            x,
                            p(format!("{prefix}.shortcut.weight")),
                            p(format!("{prefix}.shortcut.bias")),
                            stride,
                            0,
                        )?
                    } else {
                        x
                    };
                    let sum = g.add(c2, shortcut)?;
                    x = g.relu(sum)?;
                }
                Layer::Head => {
                    let pooled = g.global_avg_pool(x)?;
                    let z = g.linear(pooled, p("head.weight".into()), p("head.bias".into()))?;
                    x = g.l2_normalize(z)?;
                }
            }
        }
        Ok(Self {
            graph: g,
            input,
            params: ids,
            output: x,
            config,
        })
    }

    pub fn config(&self) -> &EmbedderConfig {
        &self.config
    }

    pub fn graph(&self) -> &Graph<T> {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut Graph<T> {
        &mut self.graph
    }

    pub fn input_node(&self) -> NodeId {
        self.input
    }

    pub fn output_node(&self) -> NodeId {
        self.output
    }

    /// Parameter leaves, in the order of [`EmbedderParams::tensors`].
    pub fn param_nodes(&self) -> &[NodeId] {
        &self.params
    }

    /// Rebinds every parameter leaf. `params` must share this graph's config.
    pub fn load_params(&mut self, params: &EmbedderParams<T>) -> Result<(), EmbedderError> {
        if params.config != self.config {
            return Err(EmbedderError::InvalidConfig("parameters built for a different config".into()));
        }
        for (&id, (_, t)) in self.params.iter().zip(&params.tensors) {
            self.graph.set_value(id, t.clone())?;
        }
        Ok(())
    }

    pub fn set_input(&mut self, seq: &GaitSequence) -> Result<(), EmbedderError> {
        if seq.seq_len() != self.config.seq_len {
            return Err(EmbedderError::ShapeMismatch {
                context: "sequence length".into(),
                expected: vec![JOINT_COUNT, self.config.seq_len, 3],
                actual: vec![JOINT_COUNT, seq.seq_len(), 3],
            });
        }
        let data = seq.channel_first().into_iter().map(T::of_f64).collect();
        let t = Tensor::new(self.config.input_shape().to_vec(), data).expect("input shape");
        self.graph.set_value(self.input, t)?;
        Ok(())
    }

    /// Embeds one sequence, leaving the graph evaluated for a later
    /// [`EmbedderGraph::param_grads`].
    pub fn embed(&mut self, seq: &GaitSequence) -> Result<Vec<T>, EmbedderError> {
        self.set_input(seq)?;
        self.graph.forward()?;
        Ok(self.graph.value(self.output)?.data().to_vec())
    }

    /// Parameter gradients for the adjoint `seed` of the embedding.
    pub fn param_grads(&self, seed: &[T]) -> Result<Vec<Tensor<T>>, EmbedderError> {
        let seed = Tensor::from_vec(seed.to_vec());
        let mut grads = self.graph.backward_from(self.output, seed)?;
        Ok(self
            .params
            .iter()
            .map(|&id| {
                let shape = self.graph.shape(id).expect("param node").to_vec();
                grads.take(id).unwrap_or_else(|| Tensor::zeros(&shape))
            })
            .collect())
    }
}

/// `(N, D)` embeddings with one label per row.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch {
    pub matrix: Array2<f64>,
    pub labels: Vec<String>,
}

pub fn embed_batch<T: Real>(params: &EmbedderParams<T>, batch: &[GaitSequence]) -> Result<EmbeddingBatch, EmbedderError> {
    let mut net = EmbedderGraph::new(params)?;
    let d = params.config.embedding_dim;
    let mut matrix = Array2::zeros((batch.len(), d));
    for (i, seq) in batch.iter().enumerate() {
        let e = net.embed(seq)?;
        for (dst, v) in matrix.row_mut(i).iter_mut().zip(e) {
            *dst = v.as_f64();
        }
    }
    Ok(EmbeddingBatch {
        matrix,
        labels: batch.iter().map(|s| s.label.clone()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_check_coords;
    use crate::dataset::SourceSpan;
    use rand::Rng;

    pub(crate) fn random_sequence(rng: &mut impl Rng, seq_len: usize, label: &str) -> GaitSequence {
        let data = (0..JOINT_COUNT * seq_len * 3).map(|_| rng.random_range(-0.6..0.6)).collect();
        GaitSequence::new(data, seq_len, label.into(), SourceSpan { track: 0, start: 0 }).unwrap()
    }

    fn small_config() -> EmbedderConfig {
        EmbedderConfig {
            channel_widths: vec![4, 6],
            blocks_per_stage: 1,
            embedding_dim: 5,
            seq_len: 6,
        }
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let cfg = EmbedderConfig::default();
        let a = init_embedder::<f32>(&cfg, 3).unwrap();
        assert_eq!(a, init_embedder::<f32>(&cfg, 3).unwrap());
        assert_ne!(a, init_embedder::<f32>(&cfg, 4).unwrap());
        for (name, t) in &a.tensors {
            if name.ends_with(".bias") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
        // shortcut convs exist only where width or stride changes
        assert!(a.get("stage0.block0.shortcut.weight").is_none());
        assert!(a.get("stage1.block0.shortcut.weight").is_some());
        assert_eq!(EmbedderParams::new(cfg, a.tensors.clone()).unwrap(), a);
    }

    #[test]
    fn init_variance_matches_he_scaling() {
        let cfg = EmbedderConfig::default();
        let params = init_embedder::<f64>(&cfg, 11).unwrap();
        let (_, specs) = architecture(&cfg);
        let mut checked = 0;
        for spec in specs.iter().filter(|s| s.name.ends_with(".weight")) {
            let t = params.get(&spec.name).unwrap();
            if t.len() < 1000 {
                continue;
            }
            let n = t.len() as f64;
            let mean = t.data().iter().sum::<f64>() / n;
            let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let target = 2.0 / spec.fan_in as f64;
            assert!((var / target - 1.0).abs() < 0.2, "{}: {var} vs {target}", spec.name);
            checked += 1;
        }
        assert!(checked >= 5);
    }

    #[test]
    fn output_rows_are_unit_norm() {
        let cfg = EmbedderConfig::default();
        let params = init_embedder::<f32>(&cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch: Vec<_> = (0..5).map(|i| random_sequence(&mut rng, 30, &format!("L{i}"))).collect();
        let out = embed_batch(&params, &batch).unwrap();
        assert_eq!(out.matrix.dim(), (5, 32));
        for row in out.matrix.rows() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-6);
        }
        assert_eq!(out.labels[4], "L4");
    }

    #[test]
    fn duplicates_and_single_rows_agree() {
        let cfg = EmbedderConfig::default();
        let params = init_embedder::<f32>(&cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_sequence(&mut rng, 30, "A");
        let b = random_sequence(&mut rng, 30, "B");
        let batch = vec![a.clone(), b.clone(), a.clone()];
        let out = embed_batch(&params, &batch).unwrap();
        assert_eq!(out.matrix.row(0), out.matrix.row(2));
        for (i, seq) in batch.iter().enumerate() {
            let single = embed_batch(&params, std::slice::from_ref(seq)).unwrap();
            for (x, y) in single.matrix.row(0).iter().zip(out.matrix.row(i)) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn wrong_sequence_length_is_rejected() {
        let params = init_embedder::<f32>(&EmbedderConfig::default(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let seq = random_sequence(&mut rng, 15, "A");
        assert!(matches!(embed_batch(&params, &[seq]), Err(EmbedderError::ShapeMismatch { .. })));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = EmbedderConfig::default();
        cfg.embedding_dim = 1;
        assert!(init_embedder::<f32>(&cfg, 0).is_err());
        cfg = EmbedderConfig::default();
        cfg.channel_widths = vec![16, 0];
        assert!(init_embedder::<f32>(&cfg, 0).is_err());
    }

    #[test]
    fn param_grads_match_finite_differences() {
        let cfg = small_config();
        let params = init_embedder::<f64>(&cfg, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let seq = random_sequence(&mut rng, cfg.seq_len, "A");
        let mut net = EmbedderGraph::new(&params).unwrap();
        net.set_input(&seq).unwrap();
        let w: Vec<f64> = (0..cfg.embedding_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let out = net.output_node();
        let g = net.graph_mut();
        let wn = g.input("w", Tensor::from_vec(w));
        let loss = g.dot(out, wn).unwrap();
        g.set_loss(loss).unwrap();
        for &id in net.param_nodes().to_vec().iter() {
            let report = crate::autodiff::finite_difference_check(net.graph_mut(), id, 1e-5).unwrap();
            assert!(report.max_error < 1e-4, "{report:?}");
        }
        let input = net.input_node();
        let coords: Vec<usize> = (0..3 * JOINT_COUNT * cfg.seq_len).step_by(7).collect();
        let report = finite_difference_check_coords(net.graph_mut(), input, 1e-5, &coords).unwrap();
        assert!(report.max_error < 1e-4 && report.checked > 0, "{report:?}");
    }
}
