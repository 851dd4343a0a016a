//! Mutual information neural estimation with the Donsker–Varadhan bound.
//!
//! A statistics network `T` scores (audio, text) pairs. Aligned pairs come
//! from the joint distribution; pairing each audio row with another sample's
//! text row approximates the product of marginals. The bound is
//! `mean T(joint) − log mean exp T(marginal)`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{prefixed, Leaves, Linear, LinearVars, Parameters};
use crate::tensor::Tensor;
use crate::train::optim::{Adam, AdamConfig};

/// `2D → H → H → 1` with ReLU between layers.
#[derive(Debug, Clone, PartialEq)]
pub struct StatisticsNet {
    pub layers: [Linear; 3],
}

impl StatisticsNet {
    pub fn new(layers: [Linear; 3]) -> Result<Self> {
        for pair in layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::InvalidShape {
                    op: "statistics_net",
                    detail: format!(
                        "layer widths {} and {} do not chain",
                        pair[0].output_dim(),
                        pair[1].input_dim()
                    ),
                });
            }
        }
        if layers[2].output_dim() != 1 {
            return Err(Error::InvalidShape {
                op: "statistics_net",
                detail: format!("output width must be 1, got {}", layers[2].output_dim()),
            });
        }
        Ok(Self { layers })
    }

    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            layers: [
                Linear::init(input, hidden, true, rng),
                Linear::init(hidden, hidden, true, rng),
                Linear::init(hidden, 1, true, rng),
            ],
        }
    }

    /// All weights zero and output bias `c`: the statistic is constant.
    pub fn constant(input: usize, hidden: usize, c: f64) -> Self {
        let mut net = Self {
            layers: [
                Linear::zeros(input, hidden, true),
                Linear::zeros(hidden, hidden, true),
                Linear::zeros(hidden, 1, true),
            ],
        };
        net.layers[2].b = Some(Tensor::full(vec![1], c));
        net
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }
}

impl Parameters for StatisticsNet {
    type Vars = StatisticsVars;

    fn named(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| prefixed(&format!("l{i}"), l.named()))
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.tensors_mut())
            .collect()
    }

    fn attach(&self, g: &mut Graph, leaves: &mut Leaves<'_>) -> Result<StatisticsVars> {
        Ok(StatisticsVars {
            layers: [
                self.layers[0].attach(g, leaves)?,
                self.layers[1].attach(g, leaves)?,
                self.layers[2].attach(g, leaves)?,
            ],
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StatisticsVars {
    pub layers: [LinearVars; 3],
}

impl StatisticsVars {
    pub fn leaves(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|l| l.leaves()).collect()
    }

    /// Scores a `B × 2D` batch of pairs, returning `[B]`.
    pub fn score(&self, g: &mut Graph, pairs: Var) -> Result<Var> {
        let rows = g.shape(pairs)[0];
        let h = self.layers[0].apply(g, pairs)?;
        let h = g.relu(h)?;
        let h = self.layers[1].apply(g, h)?;
        let h = g.relu(h)?;
        let t = self.layers[2].apply(g, h)?;
        g.reshape(t, vec![rows])
    }
}

/// How marginal samples are drawn inside a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode", content = "value")]
pub enum NegativeSampling {
    /// Pair row `i` with row `(i + 1) mod B`.
    #[default]
    Shift,
    /// Pair with a uniformly random derangement drawn from the given seed.
    Permutation(u64),
}

/// `(i + shift) mod b` for every row; a derangement whenever `shift mod b ≠ 0`.
pub fn shifted_indices(b: usize, shift: usize) -> Result<Vec<usize>> {
    if b < 2 {
        return Err(Error::DegenerateBatch(b));
    }
    if shift.is_multiple_of(b) {
        return Err(Error::Config(format!(
            "shift {shift} aligns every pair in a batch of {b}"
        )));
    }
    Ok((0..b).map(|i| (i + shift) % b).collect())
}

/// Uniform random permutation without fixed points (rejection sampling).
pub fn random_derangement<R: Rng + ?Sized>(b: usize, rng: &mut R) -> Result<Vec<usize>> {
    if b < 2 {
        return Err(Error::DegenerateBatch(b));
    }
    let mut idx: Vec<usize> = (0..b).collect();
    loop {
        idx.shuffle(rng);
        if idx.iter().enumerate().all(|(i, &j)| i != j) {
            return Ok(idx);
        }
    }
}

/// Text-row index paired with each audio row for the marginal samples.
pub fn negative_indices(b: usize, mode: NegativeSampling) -> Result<Vec<usize>> {
    match mode {
        NegativeSampling::Shift => shifted_indices(b, 1),
        NegativeSampling::Permutation(seed) => {
            random_derangement(b, &mut ChaCha8Rng::seed_from_u64(seed))
        }
    }
}

fn batch_rows(g: &Graph, op: &'static str, p_a: Var, p_t: Var) -> Result<usize> {
    match (g.shape(p_a), g.shape(p_t)) {
        ([ba, da], [bt, dt]) if ba == bt && da == dt => Ok(*ba),
        (a, t) => Err(Error::Shape {
            op,
            lhs: a.to_vec(),
            rhs: t.to_vec(),
        }),
    }
}

/// Aligned pairs `[p_a[i] ; p_t[i]]`, `B × 2D`.
pub fn joint_pairs(g: &mut Graph, p_a: Var, p_t: Var) -> Result<Var> {
    batch_rows(g, "joint_pairs", p_a, p_t)?;
    g.concat(&[p_a, p_t], 1)
}

/// Mismatched pairs `[p_a[i] ; p_t[index[i]]]`, `B × 2D`.
pub fn negative_pairs(g: &mut Graph, p_a: Var, p_t: Var, index: &[usize]) -> Result<Var> {
    let b = batch_rows(g, "negative_pairs", p_a, p_t)?;
    if b < 2 {
        return Err(Error::DegenerateBatch(b));
    }
    if index.len() != b {
        return Err(Error::Shape {
            op: "negative_pairs",
            lhs: vec![b],
            rhs: vec![index.len()],
        });
    }
    let shuffled = g.gather_rows(p_t, index)?;
    g.concat(&[p_a, shuffled], 1)
}

/// Scalar graph nodes of one batch estimate.
#[derive(Debug, Clone, Copy)]
pub struct MiBatchEstimate {
    /// `mean T(joint)`
    pub joint_term: Var,
    /// `log mean exp T(marginal)`
    pub marginal_term: Var,
    pub value: Var,
}

/// Donsker–Varadhan bound from precomputed joint and marginal statistics.
pub fn dv_from_scores(g: &mut Graph, t_joint: Var, t_marginal: Var) -> Result<MiBatchEstimate> {
    let n = g.value(t_marginal).len();
    let joint_term = g.mean(t_joint, None)?;
    let lse = g.logsumexp(t_marginal)?;
    let marginal_term = g.add_scalar(lse, -(n as f64).ln())?;
    let value = g.sub(joint_term, marginal_term)?;
    Ok(MiBatchEstimate {
        joint_term,
        marginal_term,
        value,
    })
}

/// Batch estimate of the bound for `B × D` projected embeddings.
pub fn dv_lower_bound(
    g: &mut Graph,
    p_a: Var,
    p_t: Var,
    net: &StatisticsVars,
    negatives: &[usize],
) -> Result<MiBatchEstimate> {
    let joint = joint_pairs(g, p_a, p_t)?;
    let marginal = negative_pairs(g, p_a, p_t, negatives)?;
    let t_joint = net.score(g, joint)?;
    let t_marginal = net.score(g, marginal)?;
    dv_from_scores(g, t_joint, t_marginal)
}

/// `L_mi = −value`.
pub fn mi_loss(g: &mut Graph, est: &MiBatchEstimate) -> Result<Var> {
    g.neg(est.value)
}

// ---- standalone estimation ----------------------------------------------

/// `n` draws of `(x, z)` with `x, ε ~ N(0, 1)` and `z = ρx + √(1 − ρ²) ε`.
pub fn correlated_gaussian(n: usize, rho: f64, seed: u64) -> Result<(Tensor, Tensor)> {
    if !(-1.0 < rho && rho < 1.0) {
        return Err(Error::Config(format!(
            "correlation {rho} must lie in (-1, 1)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(n);
    let mut z = Vec::with_capacity(n);
    let s = (1.0 - rho * rho).sqrt();
    for _ in 0..n {
        let a: f64 = rng.sample(StandardNormal);
        let e: f64 = rng.sample(StandardNormal);
        x.push(a);
        z.push(rho * a + s * e);
    }
    Ok((Tensor::matrix(n, 1, x)?, Tensor::matrix(n, 1, z)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MineFitConfig {
    pub hidden: usize,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// The final estimate averages the bound over shifts `1..=eval_shifts`.
    pub eval_shifts: usize,
    pub seed: u64,
}

impl Default for MineFitConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            lr: 1e-3,
            steps: 2000,
            batch_size: 500,
            eval_shifts: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MineFit {
    pub net: StatisticsNet,
    /// Bound on the full sample after training, in nats.
    pub estimate: f64,
    /// Training-batch bound after every step.
    pub history: Vec<f64>,
}

/// Evaluates the bound over all `N` samples, averaging over circular shifts.
pub fn evaluate_bound(net: &StatisticsNet, x: &Tensor, z: &Tensor, shifts: usize) -> Result<f64> {
    let mut g = Graph::new();
    let vars = net.bind(&mut g)?;
    let xv = g.constant(x.clone());
    let zv = g.constant(z.clone());
    let n = batch_rows(&g, "evaluate_bound", xv, zv)?;
    let joint = joint_pairs(&mut g, xv, zv)?;
    let t_joint = vars.score(&mut g, joint)?;
    let mut total = 0.0;
    for shift in 1..=shifts.max(1) {
        let index = shifted_indices(n, shift)?;
        let marginal = negative_pairs(&mut g, xv, zv, &index)?;
        let t_marginal = vars.score(&mut g, marginal)?;
        let est = dv_from_scores(&mut g, t_joint, t_marginal)?;
        total += g.value(est.value).item();
    }
    Ok(total / shifts.max(1) as f64)
}

/// Trains a fresh statistics network on paired samples (`N × d_x`, `N × d_z`)
/// by maximising the bound on minibatches drawn with replacement.
pub fn fit(x: &Tensor, z: &Tensor, config: &MineFitConfig) -> Result<MineFit> {
    let (n, dx, dz) = match (x.shape(), z.shape()) {
        ([n, dx], [m, dz]) if n == m => (*n, *dx, *dz),
        (a, b) => {
            return Err(Error::Shape {
                op: "mine_fit",
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            })
        }
    };
    if config.batch_size < 2 {
        return Err(Error::DegenerateBatch(config.batch_size));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut net = StatisticsNet::init(dx + dz, config.hidden, &mut rng);
    let mut adam = Adam::new(
        AdamConfig::default(),
        net.named().into_iter().map(|(_, t)| t),
    );
    let negatives = shifted_indices(config.batch_size, 1)?;
    let mut history = Vec::with_capacity(config.steps);
    let mut xb = vec![0.0; config.batch_size * dx];
    let mut zb = vec![0.0; config.batch_size * dz];

    for _ in 0..config.steps {
        for row in 0..config.batch_size {
            let i = rng.random_range(0..n);
            xb[row * dx..(row + 1) * dx].copy_from_slice(x.row(i));
            zb[row * dz..(row + 1) * dz].copy_from_slice(z.row(i));
        }
        let mut g = Graph::new();
        let vars = net.bind(&mut g)?;
        let xv = g.constant(Tensor::matrix(config.batch_size, dx, xb.clone())?);
        let zv = g.constant(Tensor::matrix(config.batch_size, dz, zb.clone())?);
        let joint = g.concat(&[xv, zv], 1)?;
        let shuffled = g.gather_rows(zv, &negatives)?;
        let marginal = g.concat(&[xv, shuffled], 1)?;
        let t_joint = vars.score(&mut g, joint)?;
        let t_marginal = vars.score(&mut g, marginal)?;
        let est = dv_from_scores(&mut g, t_joint, t_marginal)?;
        let loss = mi_loss(&mut g, &est)?;
        g.backward(loss)?;
        history.push(g.value(est.value).item());
        let grads: Vec<Option<&Tensor>> = vars.leaves().into_iter().map(|v| g.grad(v)).collect();
        adam.step(net.tensors_mut(), &grads, config.lr)?;
    }

    let estimate = evaluate_bound(&net, x, z, config.eval_shifts)?;
    Ok(MineFit {
        net,
        estimate,
        history,
    })
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    use super::*;
    use crate::autodiff::gradcheck_many;

    #[test]
    fn shift_examples() {
        assert_eq!(
            negative_indices(2, NegativeSampling::Shift).unwrap(),
            vec![1, 0]
        );
        let three = negative_indices(3, NegativeSampling::Shift).unwrap();
        assert!(three.iter().enumerate().all(|(i, &j)| i != j));
        assert!(matches!(
            negative_indices(1, NegativeSampling::Shift),
            Err(Error::DegenerateBatch(1))
        ));
        assert!(shifted_indices(4, 4).is_err());
    }

    #[test]
    fn negative_pairs_layout() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_rows(&[[1.0], [2.0]]).unwrap());
        let t = g.constant(Tensor::from_rows(&[[10.0], [20.0]]).unwrap());
        let idx = negative_indices(2, NegativeSampling::Shift).unwrap();
        let neg = negative_pairs(&mut g, a, t, &idx).unwrap();
        assert_eq!(g.value(neg).data(), &[1.0, 20.0, 2.0, 10.0]);
        let one = g.constant(Tensor::from_rows(&[[1.0]]).unwrap());
        assert!(matches!(
            negative_pairs(&mut g, one, one, &[0]),
            Err(Error::DegenerateBatch(1))
        ));
    }

    #[test]
    fn constant_statistic_gives_zero() {
        for c in [-3.0, 0.0, 0.7, 250.0] {
            let net = StatisticsNet::constant(4, 8, c);
            let mut g = Graph::new();
            let vars = net.bind(&mut g).unwrap();
            let mut r = ChaCha8Rng::seed_from_u64(3);
            let a = g.constant(Tensor::uniform(vec![5, 2], 3.0, &mut r));
            let t = g.constant(Tensor::uniform(vec![5, 2], 3.0, &mut r));
            let idx = negative_indices(5, NegativeSampling::Shift).unwrap();
            let est = dv_lower_bound(&mut g, a, t, &vars, &idx).unwrap();
            assert_abs_diff_eq!(g.value(est.value).item(), 0.0, epsilon = 1e-10);
            assert_abs_diff_eq!(g.value(est.joint_term).item(), c, epsilon = 1e-12);
        }
    }

    #[test]
    fn large_statistics_stay_finite() {
        let mut g = Graph::new();
        let joint = g.constant(Tensor::vector(vec![500.0, -500.0, 480.0]).unwrap());
        let marginal = g.constant(Tensor::vector(vec![500.0, 499.0, -500.0]).unwrap());
        let est = dv_from_scores(&mut g, joint, marginal).unwrap();
        let expected_marginal =
            500.0 + (1.0 + (-1.0f64).exp() + (-1000.0f64).exp()).ln() - 3.0f64.ln();
        assert_abs_diff_eq!(
            g.value(est.marginal_term).item(),
            expected_marginal,
            epsilon = 1e-12
        );
        assert!(g.value(est.value).item().is_finite());
    }

    #[test]
    fn loss_is_negated_value() {
        let mut g = Graph::new();
        let joint = g.constant(Tensor::vector(vec![1.0, 0.0]).unwrap());
        let marginal = g.constant(Tensor::vector(vec![0.5, 0.5]).unwrap());
        let est = dv_from_scores(&mut g, joint, marginal).unwrap();
        assert_abs_diff_eq!(g.value(est.value).item(), 0.0, epsilon = 1e-15);
        let joint = g.constant(Tensor::vector(vec![1.0, 1.0]).unwrap());
        let est = dv_from_scores(&mut g, joint, marginal).unwrap();
        assert_abs_diff_eq!(g.value(est.value).item(), 0.5, epsilon = 1e-15);
        let loss = mi_loss(&mut g, &est).unwrap();
        assert_abs_diff_eq!(g.value(loss).item(), -0.5, epsilon = 1e-15);
    }

    #[test]
    fn bound_gradcheck_through_net_and_embeddings() {
        for seed in 0..5 {
            let mut r = ChaCha8Rng::seed_from_u64(60 + seed);
            let mut net = StatisticsNet::init(6, 5, &mut r);
            // Nonzero biases keep pre-activations away from the ReLU kink.
            for layer in &mut net.layers {
                layer.b = Some(Tensor::uniform(vec![layer.output_dim()], 0.5, &mut r));
            }
            let a = Tensor::uniform(vec![4, 3], 1.0, &mut r);
            let t = Tensor::uniform(vec![4, 3], 1.0, &mut r);
            let idx = negative_indices(4, NegativeSampling::Shift).unwrap();
            let mut points = vec![a, t];
            points.extend(net.named().into_iter().map(|(_, t)| t.clone()));
            let loss_of = |g: &mut Graph, v: &[Var]| -> Result<Var> {
                let vars = net.attach(g, &mut Leaves::new(&v[2..]))?;
                let est = dv_lower_bound(g, v[0], v[1], &vars, &idx)?;
                mi_loss(g, &est)
            };
            let report = gradcheck_many(loss_of, &points, 1e-6).unwrap();
            assert!(
                report.max_rel_error < 1e-4,
                "seed {seed}: {}",
                report.max_rel_error
            );

            let value_of = |g: &mut Graph, v: &[Var]| -> Result<Var> {
                let vars = net.attach(g, &mut Leaves::new(&v[2..]))?;
                Ok(dv_lower_bound(g, v[0], v[1], &vars, &idx)?.value)
            };
            let value_report = gradcheck_many(value_of, &points, 1e-6).unwrap();
            for (l, v) in report.analytic.iter().zip(&value_report.analytic) {
                for (x, y) in l.data().iter().zip(v.data()) {
                    assert_eq!(*x, -*y);
                }
            }
        }
    }

    #[test]
    fn gaussian_samples_have_requested_correlation() {
        let (x, z) = correlated_gaussian(20_000, 0.8, 1).unwrap();
        let n = x.len() as f64;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / n;
        let (mx, mz) = (mean(x.data()), mean(z.data()));
        let cov: f64 = x
            .data()
            .iter()
            .zip(z.data())
            .map(|(a, b)| (a - mx) * (b - mz))
            .sum::<f64>()
            / n;
        let sx = (x.data().iter().map(|a| (a - mx).powi(2)).sum::<f64>() / n).sqrt();
        let sz = (z.data().iter().map(|b| (b - mz).powi(2)).sum::<f64>() / n).sqrt();
        assert_abs_diff_eq!(cov / (sx * sz), 0.8, epsilon = 0.01);
        assert!(correlated_gaussian(10, 1.0, 0).is_err());
    }

    #[test]
    fn short_fit_on_dependent_data_is_positive() {
        let (x, z) = correlated_gaussian(2000, 0.9, 5).unwrap();
        let cfg = MineFitConfig {
            hidden: 16,
            steps: 300,
            batch_size: 200,
            lr: 5e-3,
            ..MineFitConfig::default()
        };
        let fit = fit(&x, &z, &cfg).unwrap();
        assert_eq!(fit.history.len(), 300);
        assert!(fit.estimate > 0.2, "estimate {}", fit.estimate);
        let again = super::fit(&x, &z, &cfg).unwrap();
        assert_eq!(fit.estimate, again.estimate);
    }

    proptest! {
        #[test]
        fn shifts_are_derangements(b in 2usize..64) {
            let idx = negative_indices(b, NegativeSampling::Shift).unwrap();
            prop_assert!(idx.iter().enumerate().all(|(i, &j)| i != j));
        }

        #[test]
        fn random_derangements_have_no_fixed_points(b in 2usize..40, seed in any::<u64>()) {
            let idx = negative_indices(b, NegativeSampling::Permutation(seed)).unwrap();
            prop_assert!(idx.iter().enumerate().all(|(i, &j)| i != j));
            let mut sorted = idx.clone();
            sorted.sort_unstable();
            prop_assert_eq!(sorted, (0..b).collect::<Vec<_>>());
        }
    }
}
