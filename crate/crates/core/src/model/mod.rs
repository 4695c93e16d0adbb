//! The network: per-cell embeddings, alternating row and column attention,
//! and a bar-distribution head over the target.

mod bins;
mod checkpoint;
mod encode;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bins::{logits_to_distribution, BinGrid, BinStrategy, TargetTransform};
pub use checkpoint::{CheckpointError, ModelCheckpoint, FORMAT_VERSION, MAGIC};
pub use encode::{check_capacity, encode, EncodedTask, CELL_INPUTS};

use crate::infer::InferError;
use crate::numcore::{Eager, Graph, NumError, Real, Tensor};
use crate::prior::{PriorError, Task};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("task exceeds capacity: {bound} is {limit}, task needs {actual}")]
    Capacity { bound: &'static str, limit: usize, actual: usize },
    #[error("empty context: no training rows with an observed target")]
    EmptyContext,
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Task(#[from] PriorError),
    #[error(transparent)]
    Distribution(#[from] InferError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_hidden: usize,
    pub n_bins: usize,
    /// Applied to residual branches during training only.
    pub dropout_rate: f64,
    pub max_features: usize,
    pub max_rows: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            n_layers: 4,
            n_heads: 4,
            mlp_hidden: 128,
            n_bins: 64,
            dropout_rate: 0.0,
            max_features: 16,
            max_rows: 1024,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.embed_dim == 0 || self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
            return bad(format!("embed_dim {} not divisible by n_heads {}", self.embed_dim, self.n_heads));
        }
        if self.n_bins < 8 {
            return bad(format!("n_bins must be at least 8, got {}", self.n_bins));
        }
        if self.n_layers == 0 || self.mlp_hidden == 0 {
            return bad("n_layers and mlp_hidden must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.max_rows < 2 {
            return bad("max_rows must allow one train and one test row".into());
        }
        Ok(())
    }

    /// Name and shape of every trainable tensor, in forward order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let (d, h) = (self.embed_dim, self.mlp_hidden);
        let mut specs = vec![("embed.w".to_string(), vec![CELL_INPUTS, d]), ("embed.b".to_string(), vec![d])];
        let mut push = |name: String, shape: Vec<usize>| specs.push((name, shape));
        for l in 0..self.n_layers {
            for axis in ["row", "col"] {
                let p = format!("layer{l}.{axis}");
                push(format!("{p}.ln.g"), vec![d]);
                push(format!("{p}.ln.b"), vec![d]);
                for w in ["wq", "wk", "wv", "wo"] {
                    push(format!("{p}.{w}"), vec![d, d]);
                }
                if axis == "col" {
                    push(format!("{p}.sink_k"), vec![d]);
                    push(format!("{p}.sink_v"), vec![d]);
                }
            }
            let p = format!("layer{l}.mlp");
            push(format!("{p}.ln.g"), vec![d]);
            push(format!("{p}.ln.b"), vec![d]);
            push(format!("{p}.w1"), vec![d, h]);
            push(format!("{p}.b1"), vec![h]);
            push(format!("{p}.w2"), vec![h, d]);
            push(format!("{p}.b2"), vec![d]);
        }
        push("head.ln.g".into(), vec![d]);
        push("head.ln.b".into(), vec![d]);
        push("head.w1".into(), vec![d, h]);
        push("head.b1".into(), vec![h]);
        push("head.w2".into(), vec![h, self.n_bins]);
        push("head.b2".into(), vec![self.n_bins]);
        specs
    }

    pub fn weight_count(&self) -> usize {
        self.param_specs().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    /// Seeded initial weights.
    pub fn init_weights(&self, seed: u64) -> Vec<Tensor<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let residual_scale = 1.0 / (2.0 * self.n_layers as f64).sqrt();
        self.param_specs()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let leaf = name.rsplit('.').next().unwrap_or_default();
                let std = match leaf {
                    "g" => return Tensor::filled(shape, 1.0),
                    "b" | "b1" | "b2" => return Tensor::zeros(shape),
                    "sink_k" | "sink_v" => 0.1,
                    _ if name == "head.w2" => 0.02,
                    "wo" | "w2" => residual_scale / (shape[0] as f64).sqrt(),
                    _ => 1.0 / (shape[0] as f64).sqrt(),
                };
                let normal = Normal::new(0.0, std).expect("finite std");
                Tensor::new(shape, (0..n).map(|_| normal.sample(&mut rng) as f32).collect()).expect("spec shape")
            })
            .collect()
    }

    pub fn check_weights<T: Real>(&self, weights: &[Tensor<T>]) -> Result<(), ModelError> {
        let specs = self.param_specs();
        if specs.len() != weights.len() {
            return Err(ModelError::Contract(format!("expected {} tensors, got {}", specs.len(), weights.len())));
        }
        for ((name, shape), w) in specs.iter().zip(weights) {
            if w.shape() != shape.as_slice() {
                return Err(ModelError::Contract(format!("{name}: shape {:?}, expected {:?}", w.shape(), shape)));
            }
        }
        Ok(())
    }
}

/// Per-forward training noise. `None` disables dropout.
pub trait DropoutSource {
    /// Keep-mask of `n` entries, already scaled by `1 / (1 - rate)`.
    fn mask(&mut self, n: usize) -> Vec<f64>;
}

fn residual<T: Real, G: Graph<T>>(
    g: &mut G,
    x: &G::Node,
    branch: G::Node,
    dropout: &mut Option<&mut dyn DropoutSource>,
) -> Result<G::Node, ModelError> {
    let branch = match dropout {
        Some(src) => {
            let shape = g.value(&branch).shape().to_vec();
            let n = shape.iter().product();
            let mask = Tensor::new(shape, src.mask(n).into_iter().map(T::from_f64).collect())?;
            let mask = g.constant(mask);
            g.mul(&branch, &mask)?
        }
        None => branch,
    };
    Ok(g.add(x, &branch)?)
}

/// Per-test-row bin logits `[n_test × n_bins]` for an encoded task.
///
/// `params` must follow [`ModelConfig::param_specs`] order.
pub fn forward<T: Real, G: Graph<T>>(
    g: &mut G,
    cfg: &ModelConfig,
    params: &[G::Node],
    enc: &EncodedTask,
    mut dropout: Option<&mut dyn DropoutSource>,
) -> Result<G::Node, ModelError> {
    let eps = T::from_f64(LN_EPS);
    let mut p = params.iter();
    let mut next = || p.next().ok_or_else(|| ModelError::Contract("too few parameters".into()));

    let cells = g.constant(enc.cells.cast());
    let (we, be) = (next()?, next()?);
    let e = g.matmul(&cells, we)?;
    let mut x = g.add_row_bias(&e, be)?;

    for _ in 0..cfg.n_layers {
        for (layout, has_sink) in [(&enc.row_layout, false), (&enc.col_layout, true)] {
            let (lg, lb) = (next()?, next()?);
            let (wq, wk, wv, wo) = (next()?, next()?, next()?, next()?);
            let h = g.layer_norm(&x, lg, lb, eps)?;
            let q = g.matmul(&h, wq)?;
            let k = g.matmul(&h, wk)?;
            let v = g.matmul(&h, wv)?;
            let sink = if has_sink { Some((next()?, next()?)) } else { None };
            let a = g.attention(&q, &k, &v, sink, layout.clone(), cfg.n_heads)?;
            let o = g.matmul(&a, wo)?;
            x = residual(g, &x, o, &mut dropout)?;
        }
        let (lg, lb, w1, b1, w2, b2) = (next()?, next()?, next()?, next()?, next()?, next()?);
        let h = g.layer_norm(&x, lg, lb, eps)?;
        let m = g.matmul(&h, w1)?;
        let m = g.add_row_bias(&m, b1)?;
        let m = g.gelu(&m);
        let m = g.matmul(&m, w2)?;
        let m = g.add_row_bias(&m, b2)?;
        x = residual(g, &x, m, &mut dropout)?;
    }

    let (lg, lb, w1, b1, w2, b2) = (next()?, next()?, next()?, next()?, next()?, next()?);
    let t = g.gather_rows(&x, enc.head_cells.clone())?;
    let t = g.layer_norm(&t, lg, lb, eps)?;
    let t = g.matmul(&t, w1)?;
    let t = g.add_row_bias(&t, b1)?;
    let t = g.gelu(&t);
    let t = g.matmul(&t, w2)?;
    let logits = g.add_row_bias(&t, b2)?;
    if p.next().is_some() {
        return Err(ModelError::Contract("too many parameters".into()));
    }
    Ok(logits)
}

/// Inference-time logits in `T` precision without recording a tape.
pub fn task_logits<T: Real>(
    cfg: &ModelConfig,
    weights: &[Tensor<T>],
    enc: &EncodedTask,
) -> Result<Tensor<T>, ModelError> {
    cfg.check_weights(weights)?;
    let mut g = Eager;
    let params: Vec<_> = weights.iter().map(|w| Graph::<T>::param(&mut g, w.clone())).collect();
    let out = forward(&mut g, cfg, &params, enc, None)?;
    drop(params);
    Ok(std::rc::Rc::try_unwrap(out).unwrap_or_else(|rc| (*rc).clone()))
}

/// Encode and run `task` through the network.
pub fn forward_task(
    cfg: &ModelConfig,
    bins: &BinStrategy,
    weights: &[Tensor<f32>],
    task: &Task,
) -> Result<(EncodedTask, Tensor<f32>), ModelError> {
    let enc = encode(cfg, bins, task)?;
    let logits = task_logits(cfg, weights, &enc)?;
    Ok((enc, logits))
}
