use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// `max |g_ad − g_fd| / max(1, |g_fd|)` over every input coordinate.
    pub max_rel_error: f64,
    /// `(input, coordinate)` where the maximum was attained.
    pub worst: (usize, usize),
    pub analytic: Vec<Tensor>,
}

/// Single-input form of [`gradcheck_many`]; returns the max relative error.
pub fn gradcheck<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    gradcheck_many(|g, xs| f(g, xs[0]), std::slice::from_ref(point), eps).map(|r| r.max_rel_error)
}

/// Checks the gradient of the scalar function `f` at `points` against
/// `(f(x + εeᵢ) − f(x − εeᵢ)) / 2ε` for every coordinate of every input.
pub fn gradcheck_many<F>(f: F, points: &[Tensor], eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(points)
        .map(|(&v, p)| {
            g.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()))
        })
        .collect();

    let eval = |pts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = pts.iter().map(|p| g.constant(p.clone())).collect();
        let y = f(&mut g, &vars)?;
        let value = g.value(y);
        if value.len() != 1 {
            return Err(Error::NonScalar(value.shape().to_vec()));
        }
        Ok(value.item())
    };

    let mut perturbed = points.to_vec();
    let mut max_rel_error = 0.0;
    let mut worst = (0, 0);
    for input in 0..points.len() {
        for j in 0..points[input].len() {
            let x0 = points[input].data()[j];
            perturbed[input].data_mut()[j] = x0 + eps;
            let plus = eval(&perturbed)?;
            perturbed[input].data_mut()[j] = x0 - eps;
            let minus = eval(&perturbed)?;
            perturbed[input].data_mut()[j] = x0;

            let fd = (plus - minus) / (2.0 * eps);
            let ad = analytic[input].data()[j];
            let err = (ad - fd).abs() / fd.abs().max(1.0);
            if err > max_rel_error || err.is_nan() {
                max_rel_error = err;
                worst = (input, j);
            }
        }
    }
    Ok(GradCheck {
        max_rel_error,
        worst,
        analytic,
    })
}
