//! Frame-to-chunk and chunk-to-utterance pooling.
//!
//! Attentive statistics pooling scores every frame with a small attention
//! network, turns the scores into softmax weights and returns the weighted
//! mean concatenated with the weighted standard deviation. Mean and max
//! pooling are the plain baselines used in ablations.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{fan_in_uniform, Leaves, Parameters};
use crate::tensor::Tensor;

/// Variance floor applied before the square root in the weighted std.
pub const VAR_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    pub(crate) fn apply(self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            Activation::Tanh => g.tanh(x),
            Activation::Relu => g.relu(x),
        }
    }
}

/// Frame aggregation used before the acoustic projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Asp,
    Mean,
    Max,
}

impl Pooling {
    pub const ALL: [Pooling; 3] = [Pooling::Asp, Pooling::Mean, Pooling::Max];

    /// Chunk embedding width for frames of width `frame_dim`.
    pub fn output_dim(self, frame_dim: usize) -> usize {
        match self {
            Pooling::Asp => 2 * frame_dim,
            Pooling::Mean | Pooling::Max => frame_dim,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Pooling::Asp => "asp",
            Pooling::Mean => "mean",
            Pooling::Max => "max",
        }
    }
}

/// Attention parameters: `e_t = vᵀ f(W h_t + b) + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct AspParams {
    /// `hidden × dim`
    pub w: Tensor,
    pub b: Tensor,
    pub v: Tensor,
    /// Scalar bias stored as a one-element vector.
    pub k: Tensor,
    pub activation: Activation,
}

impl AspParams {
    pub fn new(w: Tensor, b: Tensor, v: Tensor, k: f64, activation: Activation) -> Result<Self> {
        let [hidden, _] = w.shape()[..] else {
            return Err(Error::InvalidShape {
                op: "asp_params",
                detail: format!("W must be a matrix, got {:?}", w.shape()),
            });
        };
        for (what, t) in [("b", &b), ("v", &v)] {
            if t.shape() != [hidden] {
                return Err(Error::InvalidShape {
                    op: "asp_params",
                    detail: format!("{what} has shape {:?}, expected [{hidden}]", t.shape()),
                });
            }
        }
        Ok(Self {
            w,
            b,
            v,
            k: Tensor::vector(vec![k])?,
            activation,
        })
    }

    /// Fan-in uniform `W`, `v`; zero `b`, `k`.
    pub fn init<R: Rng + ?Sized>(
        dim: usize,
        hidden: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        Self {
            w: fan_in_uniform(vec![hidden, dim], dim, rng),
            b: Tensor::zeros(vec![hidden]),
            v: fan_in_uniform(vec![hidden], hidden, rng),
            k: Tensor::zeros(vec![1]),
            activation,
        }
    }

    pub fn dim(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn hidden(&self) -> usize {
        self.w.shape()[0]
    }
}

impl Parameters for AspParams {
    type Vars = AspVars;

    fn named(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("w".into(), &self.w),
            ("b".into(), &self.b),
            ("v".into(), &self.v),
            ("k".into(), &self.k),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w, &mut self.b, &mut self.v, &mut self.k]
    }

    fn attach(&self, g: &mut Graph, leaves: &mut Leaves<'_>) -> Result<AspVars> {
        let (w, b, v, k) = (
            leaves.take()?,
            leaves.take()?,
            leaves.take()?,
            leaves.take()?,
        );
        let w_t = g.transpose(w)?;
        let v_col = g.reshape(v, vec![self.hidden(), 1])?;
        Ok(AspVars {
            w,
            b,
            v,
            k,
            w_t,
            v_col,
            dim: self.dim(),
            activation: self.activation,
        })
    }
}

#[derive(Debug, Clone)]
pub struct AspVars {
    pub w: Var,
    pub b: Var,
    pub v: Var,
    pub k: Var,
    w_t: Var,
    v_col: Var,
    dim: usize,
    activation: Activation,
}

impl AspVars {
    pub fn leaves(&self) -> Vec<Var> {
        vec![self.w, self.b, self.v, self.k]
    }
}

fn frame_dims(g: &Graph, op: &'static str, h: Var) -> Result<(usize, usize)> {
    match g.shape(h) {
        [t, d] => Ok((*t, *d)),
        other => Err(Error::InvalidShape {
            op,
            detail: format!("frames must be a T×D matrix, got {other:?}"),
        }),
    }
}

/// Attention scores `e_1..e_T` for a `T×D` frame matrix.
pub fn asp_scores(g: &mut Graph, h: Var, p: &AspVars) -> Result<Var> {
    let (t, d) = frame_dims(g, "asp_scores", h)?;
    if d != p.dim {
        return Err(Error::Shape {
            op: "asp_scores",
            lhs: vec![t, d],
            rhs: vec![p.dim],
        });
    }
    let z = g.matmul(h, p.w_t)?;
    let z = g.add_bias(z, p.b)?;
    let a = p.activation.apply(g, z)?;
    let e = g.matmul(a, p.v_col)?;
    let e = g.add_bias(e, p.k)?;
    g.reshape(e, vec![t])
}

/// Intermediate quantities of one attentive statistics pooling pass.
#[derive(Debug, Clone, Copy)]
pub struct AspOutput {
    pub weights: Var,
    pub mean: Var,
    pub std: Var,
    /// `[mean ; std]`, length `2·D`.
    pub embedding: Var,
}

/// Weighted mean and standard deviation of the frames given raw scores.
pub fn weighted_statistics(g: &mut Graph, h: Var, scores: Var) -> Result<AspOutput> {
    let (t, _) = frame_dims(g, "weighted_statistics", h)?;
    if g.shape(scores) != [t] {
        return Err(Error::Shape {
            op: "weighted_statistics",
            lhs: vec![t],
            rhs: g.shape(scores).to_vec(),
        });
    }
    let weights = g.softmax(scores, 0)?;
    let mean = g.matmul(weights, h)?;
    let h_sq = g.square(h)?;
    let second = g.matmul(weights, h_sq)?;
    let mean_sq = g.square(mean)?;
    let var = g.sub(second, mean_sq)?;
    let var = g.clamp_min(var, VAR_EPS)?;
    let std = g.sqrt(var)?;
    let embedding = g.concat(&[mean, std], 0)?;
    Ok(AspOutput {
        weights,
        mean,
        std,
        embedding,
    })
}

pub fn asp_pool_detailed(g: &mut Graph, h: Var, p: &AspVars) -> Result<AspOutput> {
    let scores = asp_scores(g, h, p)?;
    weighted_statistics(g, h, scores)
}

/// Attentive statistics pooling of a `T×D` chunk into a `2·D` vector.
pub fn asp_pool(g: &mut Graph, h: Var, p: &AspVars) -> Result<Var> {
    Ok(asp_pool_detailed(g, h, p)?.embedding)
}

pub fn mean_pool(g: &mut Graph, h: Var) -> Result<Var> {
    frame_dims(g, "mean_pool", h)?;
    g.mean(h, Some(0))
}

/// Columnwise maximum; ties go to the earliest frame.
pub fn max_pool(g: &mut Graph, h: Var) -> Result<Var> {
    frame_dims(g, "max_pool", h)?;
    g.max(h, 0)
}

/// Averages chunk embeddings into one utterance-level vector.
pub fn utterance_aggregate(g: &mut Graph, chunks: &[Var]) -> Result<Var> {
    if chunks.is_empty() {
        return Err(Error::Empty(
            "utterance_aggregate (utterance has no audio chunks)",
        ));
    }
    let stacked = g.stack(chunks)?;
    g.mean(stacked, Some(0))
}

/// Pools one chunk with the chosen strategy. `asp` must be present for [`Pooling::Asp`].
pub fn pool_chunk(g: &mut Graph, h: Var, pooling: Pooling, asp: Option<&AspVars>) -> Result<Var> {
    match (pooling, asp) {
        (Pooling::Asp, Some(p)) => asp_pool(g, h, p),
        (Pooling::Asp, None) => Err(Error::Config(
            "asp pooling without attention parameters".into(),
        )),
        (Pooling::Mean, _) => mean_pool(g, h),
        (Pooling::Max, _) => max_pool(g, h),
    }
}
