//! Modality projection and fusion.
//!
//! Every function accepts either single vectors `[D]` or batches `[B × D]`
//! and returns the same rank it was given.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{
    as_batch, broadcast_cols, fan_in_uniform, l2_normalize_rows, prefixed, unbatch, Leaves, Linear,
    LinearVars, Parameters,
};
use crate::tensor::Tensor;

/// Guard in the ℓ2 normalisation of bilinear pooling outputs.
pub const MFB_L2_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionKind {
    #[default]
    At,
    Concat,
    Gmu,
    Mfb,
    Mfh,
}

impl FusionKind {
    pub const ALL: [FusionKind; 5] = [
        FusionKind::At,
        FusionKind::Concat,
        FusionKind::Gmu,
        FusionKind::Mfb,
        FusionKind::Mfh,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionKind::At => "at",
            FusionKind::Concat => "concat",
            FusionKind::Gmu => "gmu",
            FusionKind::Mfb => "mfb",
            FusionKind::Mfh => "mfh",
        }
    }

    /// Width of the fused vector for common dimension `d`.
    pub fn output_dim(self, d: usize, mfh_blocks: usize) -> usize {
        match self {
            FusionKind::At | FusionKind::Gmu | FusionKind::Mfb => d,
            FusionKind::Concat => 2 * d,
            FusionKind::Mfh => mfh_blocks * d,
        }
    }
}

fn same_dims(g: &Graph, op: &'static str, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::Shape {
            op,
            lhs: g.shape(a).to_vec(),
            rhs: g.shape(b).to_vec(),
        });
    }
    Ok(())
}

// ---- projection ---------------------------------------------------------

/// Linear maps of the acoustic and text embeddings to a common width.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionParams {
    pub audio: Linear,
    pub text: Linear,
}

impl ProjectionParams {
    pub fn new(audio: Linear, text: Linear) -> Result<Self> {
        if audio.output_dim() != text.output_dim() {
            return Err(Error::InvalidShape {
                op: "projection",
                detail: format!(
                    "audio projects to {} but text to {}",
                    audio.output_dim(),
                    text.output_dim()
                ),
            });
        }
        Ok(Self { audio, text })
    }

    pub fn init<R: Rng + ?Sized>(audio_in: usize, text_in: usize, dim: usize, rng: &mut R) -> Self {
        Self {
            audio: Linear::init(audio_in, dim, true, rng),
            text: Linear::init(text_in, dim, true, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.audio.output_dim()
    }
}

impl Parameters for ProjectionParams {
    type Vars = ProjectionVars;

    fn attach(&self, g: &mut Graph, leaves: &mut Leaves<'_>) -> Result<ProjectionVars> {
        Ok(ProjectionVars {
            audio: self.audio.attach(g, leaves)?,
            text: self.text.attach(g, leaves)?,
        })
    }

    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = prefixed("audio", self.audio.named());
        out.extend(prefixed("text", self.text.named()));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.audio.tensors_mut();
        out.extend(self.text.tensors_mut());
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ProjectionVars {
    pub audio: LinearVars,
    pub text: LinearVars,
}

impl ProjectionVars {
    pub fn leaves(&self) -> Vec<Var> {
        let mut out = self.audio.leaves();
        out.extend(self.text.leaves());
        out
    }
}

/// Returns `(p_a, p_t)`, both of the common width.
pub fn project(g: &mut Graph, z_a: Var, f_t: Var, p: &ProjectionVars) -> Result<(Var, Var)> {
    let p_a = p.audio.apply(g, z_a)?;
    let p_t = p.text.apply(g, f_t)?;
    Ok((p_a, p_t))
}

// ---- attention fusion ---------------------------------------------------

/// `W_f` (`D_f × D`, applied to each modality column) and `w_f` (`D_f`).
#[derive(Debug, Clone, PartialEq)]
pub struct AtFusionParams {
    pub w_f: Tensor,
    pub w: Tensor,
}

impl AtFusionParams {
    pub fn new(w_f: Tensor, w: Tensor) -> Result<Self> {
        let [hidden, _] = w_f.shape()[..] else {
            return Err(Error::InvalidShape {
                op: "at_fusion",
                detail: format!("W_f must be a matrix, got {:?}", w_f.shape()),
            });
        };
        if w.shape() != [hidden] {
            return Err(Error::Shape {
                op: "at_fusion",
                lhs: w_f.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        Ok(Self { w_f, w })
    }

    pub fn init<R: Rng + ?Sized>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            w_f: fan_in_uniform(vec![hidden, dim], dim, rng),
            w: fan_in_uniform(vec![hidden], hidden, rng),
        }
    }
}

impl Parameters for AtFusionParams {
    type Vars = AtFusionVars;

    fn attach(&self, g: &mut Graph, leaves: &mut Leaves<'_>) -> Result<AtFusionVars> {
        let w_f = leaves.take()?;
        let w = leaves.take()?;
        let w_f_t = g.transpose(w_f)?;
        let w_col = g.reshape(w, vec![self.w.len(), 1])?;
        Ok(AtFusionVars {
            w_f,
            w,
            w_f_t,
            w_col,
        })
    }

    fn named(&self) -> Vec<(String, &Tensor)> {
        vec![("w_f".into(), &self.w_f), ("w".into(), &self.w)]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w_f, &mut self.w]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AtFusionVars {
    pub w_f: Var,
    pub w: Var,
    w_f_t: Var,
    w_col: Var,
}

impl AtFusionVars {
    pub fn leaves(&self) -> Vec<Var> {
        vec![self.w_f, self.w]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AtFusionOutput {
    pub h: Var,
    /// `[α_audio, α_text]` per sample.
    pub weights: Var,
}

/// Softmax-weighted combination `h = α₀·p_a + α₁·p_t` with
/// `α = softmax(w_fᵀ tanh(W_f [p_a p_t]))`.
pub fn at_fusion(g: &mut Graph, p_a: Var, p_t: Var, p: &AtFusionVars) -> Result<AtFusionOutput> {
    same_dims(g, "at_fusion", p_a, p_t)?;
    let (a, single) = as_batch(g, p_a)?;
    let (t, _) = as_batch(g, p_t)?;
    let d = g.shape(a)[1];
    let score = |g: &mut Graph, x: Var| -> Result<Var> {
        let z = g.matmul(x, p.w_f_t)?;
        let z = g.tanh(z)?;
        g.matmul(z, p.w_col)
    };
    let s_a = score(g, a)?;
    let s_t = score(g, t)?;
    let scores = g.concat(&[s_a, s_t], 1)?;
    let weights = g.softmax(scores, 1)?;
    let w_a = g.slice(weights, 1, 0, 1)?;
    let w_t = g.slice(weights, 1, 1, 1)?;
    let w_a = broadcast_cols(g, w_a, d)?;
    let w_t = broadcast_cols(g, w_t, d)?;
    let h_a = g.mul(w_a, a)?;
    let h_t = g.mul(w_t, t)?;
    let h = g.add(h_a, h_t)?;
    Ok(AtFusionOutput {
        h: unbatch(g, h, single)?,
        weights: unbatch(g, weights, single)?,
    })
}

// ---- concatenation ------------------------------------------------------

pub fn concat_fusion(g: &mut Graph, p_a: Var, p_t: Var) -> Result<Var> {
    let (a, single) = as_batch(g, p_a)?;
    let (t, _) = as_batch(g, p_t)?;
    if g.shape(a)[0] != g.shape(t)[0] {
        return Err(Error::Shape {
            op: "concat_fusion",
            lhs: g.shape(p_a).to_vec(),
            rhs: g.shape(p_t).to_vec(),
        });
    }
    let y = g.concat(&[a, t], 1)?;
    unbatch(g, y, single)
}

// ---- gated multimodal unit ----------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct GmuParams {
    /// `W^t`, `b^t`
    pub text: Linear,
    /// `W^v`, `b^v`
    pub audio: Linear,
    /// `W^z`, `b^z` acting on `[x_t ; x_v]`
    pub gate: Linear,
}

impl GmuParams {
    pub fn init<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        Self {
            text: Linear::init(dim, dim, true, rng),
            audio: Linear::init(dim, dim, true, rng),
            gate: Linear::init(2 * dim, dim, true, rng),
        }
    }
}

impl Parameters for GmuParams {
    type Vars = GmuVars;

    fn attach(&self, g: &mut Graph, leaves: &mut Leaves<'_>) -> Result<GmuVars> {
        Ok(GmuVars {
            text: self.text.attach(g, leaves)?,
            audio: self.audio.attach(g, leaves)?,
            gate: self.gate.attach(g, leaves)?,
        })
    }

    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = prefixed("text", self.text.named());
        out.extend(prefixed("audio", self.audio.named()));
        out.extend(prefixed("gate", self.gate.named()));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.text.tensors_mut();
        out.extend(self.audio.tensors_mut());
        out.extend(self.gate.tensors_mut());
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GmuVars {
    pub text: LinearVars,
    pub audio: LinearVars,
    pub gate: LinearVars,
}

impl GmuVars {
    pub fn leaves(&self) -> Vec<Var> {
        let mut out = self.text.leaves();
        out.extend(self.audio.leaves());
        out.extend(self.gate.leaves());
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GmuOutput {
    pub h: Var,
    pub h_text: Var,
    pub h_audio: Var,
    pub gate: Var,
}

/// `h = z ⊙ h^t + (1 − z) ⊙ h^v`. Note the text-first argument order.
pub fn gmu_fusion(g: &mut Graph, p_t: Var, p_a: Var, p: &GmuVars) -> Result<Var> {
    Ok(gmu_fusion_detailed(g, p_t, p_a, p)?.h)
}

pub fn gmu_fusion_detailed(g: &mut Graph, p_t: Var, p_a: Var, p: &GmuVars) -> Result<GmuOutput> {
    same_dims(g, "gmu_fusion", p_t, p_a)?;
    let (t, single) = as_batch(g, p_t)?;
    let (a, _) = as_batch(g, p_a)?;
    let h_t = p.text.apply(g, t)?;
    let h_t = g.tanh(h_t)?;
    let h_v = p.audio.apply(g, a)?;
    let h_v = g.tanh(h_v)?;
    let joint = g.concat(&[t, a], 1)?;
    let z = p.gate.apply(g, joint)?;
    let z = g.sigmoid(z)?;
    let one_minus = g.neg(z)?;
    let one_minus = g.add_scalar(one_minus, 1.0)?;
    let left = g.mul(z, h_t)?;
    let right = g.mul(one_minus, h_v)?;
    let h = g.add(left, right)?;
    Ok(GmuOutput {
        h: unbatch(g, h, single)?,
        h_text: unbatch(g, h_t, single)?,
        h_audio: unbatch(g, h_v, single)?,
        gate: unbatch(g, z, single)?,
    })
}

// ---- factorized bilinear pooling ----------------------------------------

/// One factorized bilinear block: `U`, `V` of shape `(D·k) × D`.
#[derive(Debug, Clone, PartialEq)]
pub struct MfbBlock {
    pub u: Linear,
    pub v: Linear,
}

/// Factorized bilinear pooling. One block is MFB; several blocks form MFH.
#[derive(Debug, Clone, PartialEq)]
pub struct MfbParams {
    pub blocks: Vec<MfbBlock>,
    pub factor: usize,
}

impl MfbParams {
    pub fn new(blocks: Vec<MfbBlock>, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::Config(
                "MFB pooling factor must be at least 1".into(),
            ));
        }
        let Some(first) = blocks.first() else {
            return Err(Error::Config("MFB needs at least one block".into()));
        };
        let (width, input) = (first.u.output_dim(), first.u.input_dim());
        if width % factor != 0 {
            return Err(Error::Config(format!(
                "MFB factor {factor} does not divide projected width {width}"
            )));
        }
        for b in &blocks {
            for lin in [&b.u, &b.v] {
                if lin.output_dim() != width || lin.input_dim() != input || lin.b.is_some() {
                    return Err(Error::InvalidShape {
                        op: "mfb",
                        detail: format!(
                            "every block needs bias-free {width}×{input} factors, got {:?}",
                            lin.w.shape()
                        ),
                    });
                }
            }
        }
        Ok(Self { blocks, factor })
    }

    pub fn init<R: Rng + ?Sized>(dim: usize, factor: usize, blocks: usize, rng: &mut R) -> Self {
        let blocks = (0..blocks.max(1))
            .map(|_| MfbBlock {
                u: Linear::init(dim, dim * factor, false, rng),
                v: Linear::init(dim, dim * factor, false, rng),
            })
            .collect();
        Self {
            blocks,
            factor: factor.max(1),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.blocks[0].u.output_dim() / self.factor
    }
}

impl Parameters for MfbParams {
    type Vars = MfbVars;

    fn attach(&self, g: &mut Graph, leaves: &mut Leaves<'_>) -> Result<MfbVars> {
        let blocks = self
            .blocks
            .iter()
            .map(|b| Ok((b.u.attach(g, leaves)?, b.v.attach(g, leaves)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(MfbVars {
            blocks,
            factor: self.factor,
            out: self.output_dim(),
        })
    }

    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(prefixed(&format!("block{i}.u"), b.u.named()));
            out.extend(prefixed(&format!("block{i}.v"), b.v.named()));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.extend(b.u.tensors_mut());
            out.extend(b.v.tensors_mut());
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct MfbVars {
    blocks: Vec<(LinearVars, LinearVars)>,
    factor: usize,
    out: usize,
}

impl MfbVars {
    pub fn leaves(&self) -> Vec<Var> {
        self.blocks
            .iter()
            .flat_map(|(u, v)| u.leaves().into_iter().chain(v.leaves()))
            .collect()
    }
}

fn bilinear_blocks(g: &mut Graph, p_a: Var, p_t: Var, p: &MfbVars, count: usize) -> Result<Var> {
    same_dims(g, "mfb_fusion", p_a, p_t)?;
    let (a, single) = as_batch(g, p_a)?;
    let (t, _) = as_batch(g, p_t)?;
    let rows = g.shape(a)[0];
    let mut previous: Option<Var> = None;
    let mut outputs = Vec::with_capacity(count);
    for (u, v) in &p.blocks[..count] {
        let x = u.apply(g, a)?;
        let y = v.apply(g, t)?;
        let mut prod = g.mul(x, y)?;
        if let Some(prev) = previous {
            prod = g.mul(prod, prev)?;
        }
        previous = Some(prod);
        let grouped = g.reshape(prod, vec![rows, p.out, p.factor])?;
        let pooled = g.sum(grouped, Some(2))?;
        let rooted = g.signed_sqrt(pooled)?;
        outputs.push(l2_normalize_rows(g, rooted, MFB_L2_EPS)?);
    }
    let y = if outputs.len() == 1 {
        outputs[0]
    } else {
        g.concat(&outputs, 1)?
    };
    unbatch(g, y, single)
}

/// Sum-pooled `Uᵀx ⊙ Vᵀy` with signed square root and ℓ2 normalisation,
/// using the first block only.
pub fn mfb_fusion(g: &mut Graph, p_a: Var, p_t: Var, p: &MfbVars) -> Result<Var> {
    bilinear_blocks(g, p_a, p_t, p, 1)
}

/// Cascaded blocks where each block's product is multiplied by the previous
/// one's before pooling; normalised block outputs are concatenated.
pub fn mfh_fusion(g: &mut Graph, p_a: Var, p_t: Var, p: &MfbVars) -> Result<Var> {
    bilinear_blocks(g, p_a, p_t, p, p.blocks.len())
}

// ---- selection ----------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum FusionParams {
    At(AtFusionParams),
    Concat,
    Gmu(GmuParams),
    Mfb(MfbParams),
    Mfh(MfbParams),
}

/// Hyperparameters of the fusion variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionShape {
    pub at_hidden: usize,
    pub mfb_factor: usize,
    pub mfh_blocks: usize,
}

impl Default for FusionShape {
    fn default() -> Self {
        Self {
            at_hidden: 128,
            mfb_factor: 5,
            mfh_blocks: 2,
        }
    }
}

impl FusionParams {
    pub fn init<R: Rng + ?Sized>(
        kind: FusionKind,
        dim: usize,
        shape: &FusionShape,
        rng: &mut R,
    ) -> Self {
        match kind {
            FusionKind::At => FusionParams::At(AtFusionParams::init(dim, shape.at_hidden, rng)),
            FusionKind::Concat => FusionParams::Concat,
            FusionKind::Gmu => FusionParams::Gmu(GmuParams::init(dim, rng)),
            FusionKind::Mfb => FusionParams::Mfb(MfbParams::init(dim, shape.mfb_factor, 1, rng)),
            FusionKind::Mfh => FusionParams::Mfh(MfbParams::init(
                dim,
                shape.mfb_factor,
                shape.mfh_blocks,
                rng,
            )),
        }
    }

    pub fn kind(&self) -> FusionKind {
        match self {
            FusionParams::At(_) => FusionKind::At,
            FusionParams::Concat => FusionKind::Concat,
            FusionParams::Gmu(_) => FusionKind::Gmu,
            FusionParams::Mfb(_) => FusionKind::Mfb,
            FusionParams::Mfh(_) => FusionKind::Mfh,
        }
    }
}

impl Parameters for FusionParams {
    type Vars = FusionVars;

    fn attach(&self, g: &mut Graph, leaves: &mut Leaves<'_>) -> Result<FusionVars> {
        Ok(match self {
            FusionParams::At(p) => FusionVars::At(p.attach(g, leaves)?),
            FusionParams::Concat => FusionVars::Concat,
            FusionParams::Gmu(p) => FusionVars::Gmu(p.attach(g, leaves)?),
            FusionParams::Mfb(p) => FusionVars::Mfb(p.attach(g, leaves)?),
            FusionParams::Mfh(p) => FusionVars::Mfh(p.attach(g, leaves)?),
        })
    }

    fn named(&self) -> Vec<(String, &Tensor)> {
        match self {
            FusionParams::At(p) => p.named(),
            FusionParams::Concat => Vec::new(),
            FusionParams::Gmu(p) => p.named(),
            FusionParams::Mfb(p) | FusionParams::Mfh(p) => p.named(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            FusionParams::At(p) => p.tensors_mut(),
            FusionParams::Concat => Vec::new(),
            FusionParams::Gmu(p) => p.tensors_mut(),
            FusionParams::Mfb(p) | FusionParams::Mfh(p) => p.tensors_mut(),
        }
    }
}

#[derive(Debug, Clone)]
pub enum FusionVars {
    At(AtFusionVars),
    Concat,
    Gmu(GmuVars),
    Mfb(MfbVars),
    Mfh(MfbVars),
}

impl FusionVars {
    pub fn leaves(&self) -> Vec<Var> {
        match self {
            FusionVars::At(v) => v.leaves(),
            FusionVars::Concat => Vec::new(),
            FusionVars::Gmu(v) => v.leaves(),
            FusionVars::Mfb(v) | FusionVars::Mfh(v) => v.leaves(),
        }
    }
}

/// Fused representation plus the AT-Fusion modality weights when available.
#[derive(Debug, Clone, Copy)]
pub struct Fused {
    pub h: Var,
    pub weights: Option<Var>,
}

pub fn fuse(g: &mut Graph, p_a: Var, p_t: Var, vars: &FusionVars) -> Result<Fused> {
    let plain = |h| Fused { h, weights: None };
    Ok(match vars {
        FusionVars::At(v) => {
            let out = at_fusion(g, p_a, p_t, v)?;
            Fused {
                h: out.h,
                weights: Some(out.weights),
            }
        }
        FusionVars::Concat => plain(concat_fusion(g, p_a, p_t)?),
        FusionVars::Gmu(v) => plain(gmu_fusion(g, p_t, p_a, v)?),
        FusionVars::Mfb(v) => plain(mfb_fusion(g, p_a, p_t, v)?),
        FusionVars::Mfh(v) => plain(mfh_fusion(g, p_a, p_t, v)?),
    })
}
