//! The full classifier: pooling, projection, fusion, dense head and the
//! combined classification plus mutual-information objective.

use log::debug;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var};
use crate::data::UtteranceRecord;
use crate::error::{Error, Result};
use crate::fusion::{
    fuse, project, FusionKind, FusionParams, FusionShape, FusionVars, ProjectionParams,
    ProjectionVars,
};
use crate::mine::{
    dv_lower_bound, mi_loss, negative_indices, NegativeSampling, StatisticsNet, StatisticsVars,
};
use crate::nn::{prefixed, Leaves, Linear, LinearVars, Parameters};
use crate::pooling::{pool_chunk, utterance_aggregate, Activation, AspParams, AspVars, Pooling};
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 2;

/// Architecture hyperparameters; everything needed to rebuild parameter shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_t: usize,
    pub d_a: usize,
    pub pooling: Pooling,
    pub activation: Activation,
    pub asp_hidden: usize,
    pub proj_dim: usize,
    pub fusion: FusionKind,
    pub at_hidden: usize,
    pub mfb_factor: usize,
    pub mfh_blocks: usize,
    pub mine_hidden: usize,
}

impl ModelConfig {
    /// Default widths for the given input dimensions.
    pub fn new(d_t: usize, d_a: usize) -> Self {
        let shape = FusionShape::default();
        Self {
            d_t,
            d_a,
            pooling: Pooling::Asp,
            activation: Activation::Tanh,
            asp_hidden: 128,
            proj_dim: 256,
            fusion: FusionKind::At,
            at_hidden: shape.at_hidden,
            mfb_factor: shape.mfb_factor,
            mfh_blocks: shape.mfh_blocks,
            mine_hidden: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_t", self.d_t),
            ("d_a", self.d_a),
            ("asp_hidden", self.asp_hidden),
            ("proj_dim", self.proj_dim),
            ("at_hidden", self.at_hidden),
            ("mfb_factor", self.mfb_factor),
            ("mine_hidden", self.mine_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.fusion == FusionKind::Mfh && self.mfh_blocks < 2 {
            return Err(Error::Config("mfh needs at least 2 blocks".into()));
        }
        Ok(())
    }

    pub fn fusion_shape(&self) -> FusionShape {
        FusionShape {
            at_hidden: self.at_hidden,
            mfb_factor: self.mfb_factor,
            mfh_blocks: self.mfh_blocks,
        }
    }

    /// Width of the pooled utterance vector `z_a`.
    pub fn audio_dim(&self) -> usize {
        self.pooling.output_dim(self.d_a)
    }

    pub fn head_dim(&self) -> usize {
        self.fusion.output_dim(self.proj_dim, self.mfh_blocks)
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("model config serialises");
        Sha256::digest(&json).into()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// Present only for attentive statistics pooling.
    pub asp: Option<AspParams>,
    pub proj: ProjectionParams,
    pub fusion: FusionParams,
    pub mine: StatisticsNet,
    pub head: Linear,
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let asp = (config.pooling == Pooling::Asp)
            .then(|| AspParams::init(config.d_a, config.asp_hidden, config.activation, rng));
        let proj = ProjectionParams::init(config.audio_dim(), config.d_t, config.proj_dim, rng);
        let fusion =
            FusionParams::init(config.fusion, config.proj_dim, &config.fusion_shape(), rng);
        let mine = StatisticsNet::init(2 * config.proj_dim, config.mine_hidden, rng);
        let head = Linear::init(config.head_dim(), NUM_CLASSES, true, rng);
        Ok(Self {
            config: config.clone(),
            asp,
            proj,
            fusion,
            mine,
            head,
        })
    }

    /// Copies every tensor of `other`, which must share this model's layout.
    pub fn copy_from(&mut self, other: &ModelParams) {
        for (dst, (_, src)) in self.tensors_mut().into_iter().zip(other.named()) {
            dst.clone_from(src);
        }
    }
}

impl Parameters for ModelParams {
    type Vars = ModelVars;

    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        if let Some(asp) = &self.asp {
            out.extend(prefixed("asp", asp.named()));
        }
        out.extend(prefixed("proj", self.proj.named()));
        out.extend(prefixed("fusion", self.fusion.named()));
        out.extend(prefixed("mine", self.mine.named()));
        out.extend(prefixed("head", self.head.named()));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        if let Some(asp) = &mut self.asp {
            out.extend(asp.tensors_mut());
        }
        out.extend(self.proj.tensors_mut());
        out.extend(self.fusion.tensors_mut());
        out.extend(self.mine.tensors_mut());
        out.extend(self.head.tensors_mut());
        out
    }

    fn attach(&self, g: &mut Graph, leaves: &mut Leaves<'_>) -> Result<ModelVars> {
        let asp = match &self.asp {
            Some(p) => Some(p.attach(g, leaves)?),
            None => None,
        };
        Ok(ModelVars {
            pooling: self.config.pooling,
            asp,
            proj: self.proj.attach(g, leaves)?,
            fusion: self.fusion.attach(g, leaves)?,
            mine: self.mine.attach(g, leaves)?,
            head: self.head.attach(g, leaves)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ModelVars {
    pooling: Pooling,
    pub asp: Option<AspVars>,
    pub proj: ProjectionVars,
    pub fusion: FusionVars,
    pub mine: StatisticsVars,
    pub head: LinearVars,
}

impl ModelVars {
    /// Leaves in [`Parameters::named`] order.
    pub fn leaves(&self) -> Vec<Var> {
        let mut out = Vec::new();
        if let Some(a) = &self.asp {
            out.extend(a.leaves());
        }
        out.extend(self.proj.leaves());
        out.extend(self.fusion.leaves());
        out.extend(self.mine.leaves());
        out.extend(self.head.leaves());
        out
    }
}

/// A record converted to `f64` tensors once, ready for repeated forward passes.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub text: Tensor,
    pub chunks: Vec<Tensor>,
    /// Class index, `None` for unlabelled records.
    pub label: Option<usize>,
}

impl Example {
    pub fn from_record(rec: &UtteranceRecord) -> Self {
        Self {
            id: rec.id.clone(),
            text: rec.text_tensor(),
            chunks: rec.chunks.iter().map(|c| c.to_tensor()).collect(),
            label: rec.label.class(),
        }
    }
}

/// Graph outputs of one batch forward pass.
#[derive(Debug, Clone, Copy)]
pub struct BatchForward {
    /// `B × 2`
    pub logits: Var,
    /// `B × D`
    pub p_a: Var,
    /// `B × D`
    pub p_t: Var,
    pub fusion_weights: Option<Var>,
}

fn utterance_audio(g: &mut Graph, vars: &ModelVars, ex: &Example) -> Result<Var> {
    if ex.chunks.is_empty() {
        return Err(Error::Data(format!(
            "utterance {:?} has no audio chunks",
            ex.id
        )));
    }
    let pooled = ex
        .chunks
        .iter()
        .map(|c| {
            let h = g.constant(c.clone());
            pool_chunk(g, h, vars.pooling, vars.asp.as_ref())
        })
        .collect::<Result<Vec<_>>>()?;
    utterance_aggregate(g, &pooled)
}

/// Runs every example through pooling, projection, fusion and the head.
pub fn forward_batch(g: &mut Graph, vars: &ModelVars, batch: &[&Example]) -> Result<BatchForward> {
    if batch.is_empty() {
        return Err(Error::Empty("forward_batch"));
    }
    let audio = batch
        .iter()
        .map(|ex| utterance_audio(g, vars, ex))
        .collect::<Result<Vec<_>>>()?;
    let z_a = g.stack(&audio)?;
    let d_t = batch[0].text.len();
    let mut text = Vec::with_capacity(batch.len() * d_t);
    for ex in batch {
        if ex.text.len() != d_t {
            return Err(Error::Data(format!(
                "utterance {:?} has text width {}, expected {d_t}",
                ex.id,
                ex.text.len()
            )));
        }
        text.extend_from_slice(ex.text.data());
    }
    let f_t = g.constant(Tensor::matrix(batch.len(), d_t, text)?);
    let (p_a, p_t) = project(g, z_a, f_t, &vars.proj)?;
    let fused = fuse(g, p_a, p_t, &vars.fusion)?;
    let logits = vars.head.apply(g, fused.h)?;
    Ok(BatchForward {
        logits,
        p_a,
        p_t,
        fusion_weights: fused.weights,
    })
}

/// Two logits for a single utterance, plus its projected embeddings.
pub fn forward_utterance(g: &mut Graph, vars: &ModelVars, ex: &Example) -> Result<(Var, Var, Var)> {
    let out = forward_batch(g, vars, &[ex])?;
    let logits = g.reshape(out.logits, vec![NUM_CLASSES])?;
    let d = g.shape(out.p_a)[1];
    let p_a = g.reshape(out.p_a, vec![d])?;
    let p_t = g.reshape(out.p_t, vec![d])?;
    Ok((logits, p_a, p_t))
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let cols = match g.shape(logits) {
        [_, c] => *c,
        other => {
            return Err(Error::InvalidShape {
                op: "cross_entropy",
                detail: format!("logits must be B×C, got {other:?}"),
            })
        }
    };
    if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
        return Err(Error::Data(format!(
            "label {bad} is not a class index below {cols}"
        )));
    }
    let log_p = g.log_softmax(logits, 1)?;
    let picked = g.select_per_row(log_p, labels)?;
    let mean = g.mean(picked, None)?;
    g.neg(mean)
}

/// `total = cls + λ·mi` as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub cls: Var,
    /// `None` when the term was skipped (λ = 0 or a batch of one).
    pub mi: Option<Var>,
    pub total: Var,
    pub lambda: f64,
}

/// Plain values of a [`LossBreakdown`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub cls: f64,
    pub mi: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn values(&self, g: &Graph) -> LossValues {
        LossValues {
            cls: g.value(self.cls).item(),
            mi: self.mi.map_or(0.0, |m| g.value(m).item()),
            total: g.value(self.total).item(),
            lambda: self.lambda,
        }
    }
}

pub fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!(
            "lambda_mi must be a finite value ≥ 0, got {lambda}"
        )));
    }
    Ok(())
}

pub fn combined_loss(
    g: &mut Graph,
    cls: Var,
    mi: Option<Var>,
    lambda: f64,
) -> Result<LossBreakdown> {
    check_lambda(lambda)?;
    let total = match mi {
        Some(mi) if lambda > 0.0 => {
            let weighted = g.scale(mi, lambda)?;
            g.add(cls, weighted)?
        }
        _ => cls,
    };
    Ok(LossBreakdown {
        cls,
        mi,
        total,
        lambda,
    })
}

/// Forward pass plus the training objective for a labelled batch. The MI
/// term is built only when `lambda > 0` and the batch has at least 2 rows.
pub fn batch_objective(
    g: &mut Graph,
    vars: &ModelVars,
    batch: &[&Example],
    lambda: f64,
    negatives: NegativeSampling,
) -> Result<(BatchForward, LossBreakdown)> {
    check_lambda(lambda)?;
    let labels = batch
        .iter()
        .map(|ex| {
            ex.label
                .ok_or_else(|| Error::Data(format!("utterance {:?} has no class label", ex.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let fwd = forward_batch(g, vars, batch)?;
    let cls = cross_entropy(g, fwd.logits, &labels)?;
    let mi = if lambda > 0.0 {
        if batch.len() < 2 {
            debug!("batch of one: mutual-information term skipped");
            None
        } else {
            let index = negative_indices(batch.len(), negatives)?;
            let est = dv_lower_bound(g, fwd.p_a, fwd.p_t, &vars.mine, &index)?;
            Some(mi_loss(g, &est)?)
        }
    } else {
        None
    };
    let loss = combined_loss(g, cls, mi, lambda)?;
    Ok((fwd, loss))
}

/// Index of the larger logit; ties go to class 0.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let cols = logits.shape()[logits.rank() - 1];
    logits
        .data()
        .chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Logits for each example without recording gradients, in batches.
pub fn predict_logits(
    params: &ModelParams,
    examples: &[Example],
    batch_size: usize,
) -> Result<Vec<[f64; 2]>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(batch_size.max(1)) {
        let mut g = Graph::new();
        let mut leaves = Vec::new();
        for (_, t) in params.named() {
            leaves.push(g.constant(t.clone()));
        }
        let vars = params.attach(&mut g, &mut Leaves::new(&leaves))?;
        let refs: Vec<&Example> = chunk.iter().collect();
        let fwd = forward_batch(&mut g, &vars, &refs)?;
        out.extend(g.value(fwd.logits).data().chunks(2).map(|r| [r[0], r[1]]));
    }
    Ok(out)
}
