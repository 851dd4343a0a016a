//! Dense layers, initialisation and small graph helpers shared by the model parts.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `U(-1/√fan_in, 1/√fan_in)` samples for a tensor of the given shape.
pub fn fan_in_uniform<R: Rng + ?Sized>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::uniform(shape, bound, rng)
}

/// Graph variables handed out in parameter order.
pub struct Leaves<'a> {
    iter: std::slice::Iter<'a, Var>,
}

impl<'a> Leaves<'a> {
    pub fn new(vars: &'a [Var]) -> Self {
        Self { iter: vars.iter() }
    }

    pub fn take(&mut self) -> Result<Var> {
        self.iter
            .next()
            .copied()
            .ok_or_else(|| Error::Config("fewer graph leaves than parameters".into()))
    }

    pub fn remaining(&self) -> usize {
        self.iter.len()
    }
}

/// Named access to a component's learnable tensors. The order of
/// [`Parameters::named`], [`Parameters::tensors_mut`] and the leaves consumed
/// by [`Parameters::attach`] always agree.
pub trait Parameters {
    type Vars;

    fn named(&self) -> Vec<(String, &Tensor)>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    /// Builds the graph-side view from existing leaves, one per tensor.
    fn attach(&self, g: &mut Graph, leaves: &mut Leaves<'_>) -> Result<Self::Vars>;

    /// Registers every tensor as a trainable leaf and attaches to them.
    fn bind(&self, g: &mut Graph) -> Result<Self::Vars> {
        let vars: Vec<Var> = self
            .named()
            .into_iter()
            .map(|(_, t)| g.param(t.clone()))
            .collect();
        let mut leaves = Leaves::new(&vars);
        let out = self.attach(g, &mut leaves)?;
        debug_assert_eq!(leaves.remaining(), 0);
        Ok(out)
    }

    fn num_parameters(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

pub(crate) fn prefixed<'a>(
    prefix: &str,
    inner: Vec<(String, &'a Tensor)>,
) -> Vec<(String, &'a Tensor)> {
    inner
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
}

/// `y = x Wᵀ + b` with `W` of shape `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub b: Option<Tensor>,
}

impl Linear {
    pub fn new(w: Tensor, b: Option<Tensor>) -> Result<Self> {
        let [out, _] = w.shape()[..] else {
            return Err(Error::InvalidShape {
                op: "linear",
                detail: format!("weight must be a matrix, got {:?}", w.shape()),
            });
        };
        if let Some(b) = &b {
            if b.shape() != [out] {
                return Err(Error::Shape {
                    op: "linear",
                    lhs: w.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
        }
        Ok(Self { w, b })
    }

    /// Fan-in uniform weight, zero bias.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, bias: bool, rng: &mut R) -> Self {
        Self {
            w: fan_in_uniform(vec![output, input], input, rng),
            b: bias.then(|| Tensor::zeros(vec![output])),
        }
    }

    pub fn zeros(input: usize, output: usize, bias: bool) -> Self {
        Self {
            w: Tensor::zeros(vec![output, input]),
            b: bias.then(|| Tensor::zeros(vec![output])),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.w.shape()[0]
    }
}

impl Parameters for Linear {
    type Vars = LinearVars;

    fn attach(&self, g: &mut Graph, leaves: &mut Leaves<'_>) -> Result<LinearVars> {
        let w = leaves.take()?;
        let b = match self.b {
            Some(_) => Some(leaves.take()?),
            None => None,
        };
        let w_t = g.transpose(w)?;
        Ok(LinearVars { w, b, w_t })
    }

    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("w".to_string(), &self.w)];
        if let Some(b) = &self.b {
            out.push(("b".to_string(), b));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.w];
        if let Some(b) = &mut self.b {
            out.push(b);
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    pub w: Var,
    pub b: Option<Var>,
    w_t: Var,
}

impl LinearVars {
    /// Applies the layer to a vector `[in]` or a batch `[B × in]`.
    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = g.matmul(x, self.w_t)?;
        match self.b {
            Some(b) => g.add_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn leaves(&self) -> Vec<Var> {
        let mut out = vec![self.w];
        out.extend(self.b);
        out
    }
}

/// Repeats a length-`B` vector across `width` columns, giving `B × width`.
pub fn broadcast_cols(g: &mut Graph, col: Var, width: usize) -> Result<Var> {
    let rows = match g.shape(col) {
        [b] => *b,
        [b, 1] => *b,
        other => {
            return Err(Error::InvalidShape {
                op: "broadcast_cols",
                detail: format!("expected a vector, got {other:?}"),
            })
        }
    };
    let col = g.reshape(col, vec![rows, 1])?;
    let ones = g.constant(Tensor::full(vec![1, width], 1.0));
    g.matmul(col, ones)
}

/// Scales every row of a `B × D` matrix to unit norm, dividing by `max(‖row‖, eps)`.
pub fn l2_normalize_rows(g: &mut Graph, x: Var, eps: f64) -> Result<Var> {
    let [_, width] = g.shape(x)[..] else {
        return Err(Error::InvalidShape {
            op: "l2_normalize_rows",
            detail: format!("expected a matrix, got {:?}", g.shape(x)),
        });
    };
    let sq = g.square(x)?;
    let norms_sq = g.sum(sq, Some(1))?;
    let norms_sq = g.clamp_min(norms_sq, eps * eps)?;
    let norms = g.sqrt(norms_sq)?;
    let denom = broadcast_cols(g, norms, width)?;
    g.div(x, denom)
}

/// Runs `f` on a `[1 × D]` view when `x` is a single vector and drops the
/// unit row again afterwards, so batch code also serves single utterances.
pub(crate) fn as_batch(g: &mut Graph, x: Var) -> Result<(Var, bool)> {
    match g.shape(x) {
        [d] => {
            let d = *d;
            Ok((g.reshape(x, vec![1, d])?, true))
        }
        [_, _] => Ok((x, false)),
        other => Err(Error::InvalidShape {
            op: "batch",
            detail: format!("expected a vector or a matrix, got {other:?}"),
        }),
    }
}

pub(crate) fn unbatch(g: &mut Graph, y: Var, was_vector: bool) -> Result<Var> {
    if !was_vector {
        return Ok(y);
    }
    let width = g.shape(y)[1];
    g.reshape(y, vec![width])
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::gradcheck_many;

    #[test]
    fn samples_stay_within_bound() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let t = fan_in_uniform(vec![64, 16], 16, &mut r);
        assert!(t.data().iter().all(|x| x.abs() <= 0.25));
        assert!(t.data().iter().any(|x| x.abs() > 0.2));
    }

    #[test]
    fn linear_matches_hand_computation() {
        let lin = Linear::new(
            Tensor::from_rows(&[[1.0, 2.0], [0.0, -1.0], [3.0, 0.5]]).unwrap(),
            Some(Tensor::vector(vec![0.5, 0.0, -1.0]).unwrap()),
        )
        .unwrap();
        let mut g = Graph::new();
        let vars = lin.bind(&mut g).unwrap();
        let x = g.constant(Tensor::vector(vec![2.0, 1.0]).unwrap());
        let y = vars.apply(&mut g, x).unwrap();
        assert_eq!(g.value(y).data(), &[4.5, -1.0, 5.5]);

        let xb = g.constant(Tensor::from_rows(&[[2.0, 1.0], [0.0, 0.0]]).unwrap());
        let y = vars.apply(&mut g, xb).unwrap();
        assert_eq!(g.shape(y), &[2, 3]);
        assert_eq!(g.value(y).data(), &[4.5, -1.0, 5.5, 0.5, 0.0, -1.0]);
        assert_eq!(lin.named().len(), 2);
        assert_eq!(lin.num_parameters(), 9);
    }

    #[test]
    fn bias_shape_is_checked() {
        assert!(Linear::new(Tensor::zeros(vec![3, 2]), Some(Tensor::zeros(vec![2]))).is_err());
    }

    #[test]
    fn row_normalisation() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[[3.0, 4.0], [0.0, 0.0]]).unwrap());
        let y = l2_normalize_rows(&mut g, x, 1e-12).unwrap();
        assert_eq!(g.value(y).data(), &[0.6, 0.8, 0.0, 0.0]);
    }

    #[test]
    fn row_normalisation_gradcheck() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::uniform(vec![3, 4], 1.0, &mut r);
        let readout = Tensor::uniform(vec![3, 4], 1.0, &mut r);
        let report = gradcheck_many(
            |g, v| {
                let y = l2_normalize_rows(g, v[0], 1e-12)?;
                let c = g.constant(readout.clone());
                let y = g.mul(y, c)?;
                g.sum(y, None)
            },
            &[x],
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6);
    }

    #[test]
    fn broadcast_repeats_columns() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let m = broadcast_cols(&mut g, c, 3).unwrap();
        assert_eq!(g.value(m).data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        let s = g.constant(Tensor::scalar(1.0));
        assert!(broadcast_cols(&mut g, s, 2).is_err());
        assert_abs_diff_eq!(g.value(m).data()[5], 2.0);
    }
}
