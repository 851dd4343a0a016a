//! Finite-difference gradient suite over every differentiable op group and
//! the composed model.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{gradcheck_many, Graph, Var};
use crate::error::Result;
use crate::fusion::{fuse, project, FusionKind, FusionParams, FusionShape, ProjectionParams};
use crate::mine::NegativeSampling;
use crate::mine::{dv_lower_bound, mi_loss, shifted_indices, StatisticsNet};
use crate::model::{batch_objective, Example, ModelConfig, ModelParams};
use crate::nn::{l2_normalize_rows, Leaves, Linear, Parameters};
use crate::pooling::{asp_pool, max_pool, mean_pool, utterance_aggregate, Activation, AspParams};
use crate::tensor::Tensor;

pub const TOLERANCE: f64 = 1e-4;
pub const EPS: f64 = 1e-6;

type CaseFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

struct Case {
    name: String,
    points: Vec<Tensor>,
    f: CaseFn,
}

struct Group {
    name: String,
    cases: Vec<Case>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupResult {
    pub name: String,
    pub cases: usize,
    pub max_rel_error: f64,
    pub worst_case: String,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub seed: u64,
    pub tolerance: f64,
    pub passed: bool,
    pub groups: Vec<GroupResult>,
    #[serde(skip)]
    pub seconds: f64,
}

impl SuiteReport {
    pub fn failures(&self) -> impl Iterator<Item = &GroupResult> {
        self.groups.iter().filter(|g| !g.passed)
    }
}

/// Reduces `out` to a scalar through fixed pseudo-random weights.
fn probe(g: &mut Graph, out: Var, salt: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let w = Tensor::uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(salt));
    let w = g.constant(w);
    let prod = g.mul(out, w)?;
    g.sum(prod, None)
}

/// Uniform values in `±bound` with magnitude at least `gap`, keeping kinks
/// and thresholds out of the finite-difference stencil.
fn away_from_zero(shape: Vec<usize>, gap: f64, bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(gap..bound);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape matches")
}

fn case(
    name: impl Into<String>,
    points: Vec<Tensor>,
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static,
) -> Case {
    Case {
        name: name.into(),
        points,
        f: Box::new(f),
    }
}

fn unary_group(
    name: &str,
    rng: &mut ChaCha8Rng,
    input: impl Fn(&mut ChaCha8Rng) -> Tensor,
    op: fn(&mut Graph, Var) -> Result<Var>,
) -> Group {
    let cases = (0..3)
        .map(|i| {
            let salt = rng.random();
            case(format!("{name}#{i}"), vec![input(rng)], move |g, v| {
                let y = op(g, v[0])?;
                probe(g, y, salt)
            })
        })
        .collect();
    Group {
        name: name.to_string(),
        cases,
    }
}

fn linear_algebra(rng: &mut ChaCha8Rng) -> Vec<Group> {
    let s = rng.random();
    let matmul = Group {
        name: "matmul".into(),
        cases: vec![
            case(
                "matrix·matrix",
                vec![
                    Tensor::uniform(vec![3, 4], 1.0, rng),
                    Tensor::uniform(vec![4, 2], 1.0, rng),
                ],
                move |g, v| {
                    let y = g.matmul(v[0], v[1])?;
                    probe(g, y, s)
                },
            ),
            case(
                "row·matrix",
                vec![
                    Tensor::uniform(vec![4], 1.0, rng),
                    Tensor::uniform(vec![4, 3], 1.0, rng),
                ],
                move |g, v| {
                    let y = g.matmul(v[0], v[1])?;
                    probe(g, y, s + 1)
                },
            ),
            case(
                "matrix·column",
                vec![
                    Tensor::uniform(vec![2, 4], 1.0, rng),
                    Tensor::uniform(vec![4], 1.0, rng),
                ],
                move |g, v| {
                    let y = g.matmul(v[0], v[1])?;
                    probe(g, y, s + 2)
                },
            ),
            case(
                "transpose",
                vec![Tensor::uniform(vec![3, 2], 1.0, rng)],
                move |g, v| {
                    let t = g.transpose(v[0])?;
                    probe(g, t, s + 3)
                },
            ),
        ],
    };
    let s = rng.random();
    let binary = Group {
        name: "binary".into(),
        cases: vec![
            case(
                "add/sub/mul",
                vec![
                    Tensor::uniform(vec![2, 3], 1.0, rng),
                    Tensor::uniform(vec![2, 3], 1.0, rng),
                ],
                move |g, v| {
                    let a = g.add(v[0], v[1])?;
                    let b = g.sub(v[0], v[1])?;
                    let c = g.mul(a, b)?;
                    probe(g, c, s)
                },
            ),
            case(
                "div",
                vec![
                    Tensor::uniform(vec![2, 3], 1.0, rng),
                    away_from_zero(vec![2, 3], 0.5, 2.0, rng),
                ],
                move |g, v| {
                    let y = g.div(v[0], v[1])?;
                    probe(g, y, s + 1)
                },
            ),
            case(
                "add_bias/scale/add_scalar",
                vec![
                    Tensor::uniform(vec![3, 2], 1.0, rng),
                    Tensor::uniform(vec![2], 1.0, rng),
                ],
                move |g, v| {
                    let y = g.add_bias(v[0], v[1])?;
                    let y = g.scale(y, -1.7)?;
                    let y = g.add_scalar(y, 0.3)?;
                    let y = g.square(y)?;
                    probe(g, y, s + 2)
                },
            ),
        ],
    };
    vec![matmul, binary]
}

fn unaries(rng: &mut ChaCha8Rng) -> Vec<Group> {
    let free = |r: &mut ChaCha8Rng| Tensor::uniform(vec![2, 3], 2.0, r);
    let positive = |r: &mut ChaCha8Rng| {
        let t = Tensor::uniform(vec![2, 3], 1.0, r);
        Tensor::new(vec![2, 3], t.data().iter().map(|v| v.abs() + 0.2).collect()).expect("shape")
    };
    let kinked = |r: &mut ChaCha8Rng| away_from_zero(vec![2, 3], 0.05, 2.0, r);
    vec![
        unary_group("exp", rng, free, |g, x| g.exp(x)),
        unary_group("log", rng, positive, |g, x| g.log(x)),
        unary_group("sqrt", rng, positive, |g, x| g.sqrt(x)),
        unary_group("tanh", rng, free, |g, x| g.tanh(x)),
        unary_group("sigmoid", rng, free, |g, x| g.sigmoid(x)),
        unary_group("relu", rng, kinked, |g, x| g.relu(x)),
        unary_group("square", rng, free, |g, x| g.square(x)),
        unary_group("neg", rng, free, |g, x| g.neg(x)),
        unary_group("abs", rng, kinked, |g, x| g.abs(x)),
        unary_group("signed_sqrt", rng, kinked, |g, x| g.signed_sqrt(x)),
        unary_group("clamp_min", rng, kinked, |g, x| g.clamp_min(x, 0.0)),
    ]
}

fn normalisers(rng: &mut ChaCha8Rng) -> Group {
    let s: u64 = rng.random();
    Group {
        name: "softmax-family".into(),
        cases: vec![
            case(
                "softmax axis 0",
                vec![Tensor::uniform(vec![3, 2], 2.0, rng)],
                move |g, v| {
                    let y = g.softmax(v[0], 0)?;
                    probe(g, y, s)
                },
            ),
            case(
                "softmax axis 1",
                vec![Tensor::uniform(vec![2, 4], 2.0, rng)],
                move |g, v| {
                    let y = g.softmax(v[0], 1)?;
                    probe(g, y, s + 1)
                },
            ),
            case(
                "log_softmax",
                vec![Tensor::uniform(vec![3, 2], 2.0, rng)],
                move |g, v| {
                    let y = g.log_softmax(v[0], 1)?;
                    probe(g, y, s + 2)
                },
            ),
            case(
                "logsumexp",
                vec![Tensor::uniform(vec![5], 3.0, rng)],
                |g, v| g.logsumexp(v[0]),
            ),
            case(
                "l2_normalize",
                vec![Tensor::uniform(vec![4], 1.0, rng)],
                move |g, v| {
                    let y = g.l2_normalize(v[0], 1e-12)?;
                    probe(g, y, s + 3)
                },
            ),
            case(
                "l2_normalize_rows",
                vec![Tensor::uniform(vec![2, 3], 1.0, rng)],
                move |g, v| {
                    let y = l2_normalize_rows(g, v[0], 1e-12)?;
                    probe(g, y, s + 4)
                },
            ),
        ],
    }
}

fn reductions(rng: &mut ChaCha8Rng) -> Group {
    let s: u64 = rng.random();
    Group {
        name: "reductions".into(),
        cases: vec![
            case(
                "sum",
                vec![Tensor::uniform(vec![3, 2], 1.0, rng)],
                move |g, v| {
                    let a = g.sum(v[0], Some(0))?;
                    let a = probe(g, a, s)?;
                    let b = g.sum(v[0], None)?;
                    g.add(a, b)
                },
            ),
            case(
                "mean",
                vec![Tensor::uniform(vec![3, 2], 1.0, rng)],
                move |g, v| {
                    let a = g.mean(v[0], Some(1))?;
                    let a = probe(g, a, s + 1)?;
                    let b = g.mean(v[0], None)?;
                    let b = g.scale(b, 3.0)?;
                    g.add(a, b)
                },
            ),
            case(
                "max",
                vec![Tensor::uniform(vec![4, 3], 1.0, rng)],
                move |g, v| {
                    let y = g.max(v[0], 0)?;
                    probe(g, y, s + 2)
                },
            ),
        ],
    }
}

fn structural(rng: &mut ChaCha8Rng) -> Group {
    let s: u64 = rng.random();
    Group {
        name: "structural".into(),
        cases: vec![
            case(
                "concat/slice",
                vec![
                    Tensor::uniform(vec![2, 3], 1.0, rng),
                    Tensor::uniform(vec![2, 2], 1.0, rng),
                ],
                move |g, v| {
                    let c = g.concat(&[v[0], v[1]], 1)?;
                    let sl = g.slice(c, 1, 1, 3)?;
                    let sq = g.square(sl)?;
                    probe(g, sq, s)
                },
            ),
            case(
                "reshape/stack",
                vec![
                    Tensor::uniform(vec![6], 1.0, rng),
                    Tensor::uniform(vec![6], 1.0, rng),
                ],
                move |g, v| {
                    let st = g.stack(&[v[0], v[1]])?;
                    let r = g.reshape(st, vec![3, 4])?;
                    let t = g.tanh(r)?;
                    probe(g, t, s + 1)
                },
            ),
            case(
                "gather_rows",
                vec![Tensor::uniform(vec![3, 2], 1.0, rng)],
                move |g, v| {
                    let y = g.gather_rows(v[0], &[2, 0, 2, 1])?;
                    let y = g.square(y)?;
                    probe(g, y, s + 2)
                },
            ),
            case(
                "select_per_row",
                vec![Tensor::uniform(vec![3, 2], 1.0, rng)],
                move |g, v| {
                    let y = g.select_per_row(v[0], &[1, 0, 1])?;
                    let y = g.exp(y)?;
                    probe(g, y, s + 3)
                },
            ),
        ],
    }
}

fn pooling(rng: &mut ChaCha8Rng) -> Group {
    let s: u64 = rng.random();
    let mut cases = Vec::new();
    for act in [Activation::Tanh, Activation::Relu] {
        let mut p = AspParams::init(3, 4, act, rng);
        p.b = Tensor::uniform(vec![4], 0.5, rng);
        let mut points: Vec<Tensor> = p.named().into_iter().map(|(_, t)| t.clone()).collect();
        points.push(Tensor::uniform(vec![5, 3], 1.5, rng));
        points.push(Tensor::uniform(vec![2, 3], 1.5, rng));
        let salt = s + act as u64;
        cases.push(case(
            format!("asp ({act:?}) + aggregate"),
            points,
            move |g, v| {
                let n = v.len();
                let vars = p.attach(g, &mut Leaves::new(&v[..n - 2]))?;
                let a = asp_pool(g, v[n - 2], &vars)?;
                let b = asp_pool(g, v[n - 1], &vars)?;
                let z = utterance_aggregate(g, &[a, b])?;
                probe(g, z, salt)
            },
        ));
    }
    cases.push(case(
        "mean/max pooling",
        vec![Tensor::uniform(vec![4, 3], 1.0, rng)],
        move |g, v| {
            let a = mean_pool(g, v[0])?;
            let b = max_pool(g, v[0])?;
            let c = g.add(a, b)?;
            probe(g, c, s + 7)
        },
    ));
    Group {
        name: "pooling".into(),
        cases,
    }
}

fn projection(rng: &mut ChaCha8Rng) -> Group {
    let s: u64 = rng.random();
    let mut p = ProjectionParams::init(6, 4, 5, rng);
    p.audio.b = Some(Tensor::uniform(vec![5], 0.5, rng));
    let mut points: Vec<Tensor> = p.named().into_iter().map(|(_, t)| t.clone()).collect();
    points.push(Tensor::uniform(vec![2, 6], 1.0, rng));
    points.push(Tensor::uniform(vec![2, 4], 1.0, rng));
    Group {
        name: "projection".into(),
        cases: vec![case("audio+text", points, move |g, v| {
            let n = v.len();
            let vars = p.attach(g, &mut Leaves::new(&v[..n - 2]))?;
            let (a, t) = project(g, v[n - 2], v[n - 1], &vars)?;
            let c = g.concat(&[a, t], 1)?;
            probe(g, c, s)
        })],
    }
}

fn fusion(rng: &mut ChaCha8Rng) -> Vec<Group> {
    let shape = FusionShape {
        at_hidden: 3,
        mfb_factor: 2,
        mfh_blocks: 2,
    };
    FusionKind::ALL
        .iter()
        .map(|&kind| {
            let s: u64 = rng.random();
            let p = FusionParams::init(kind, 4, &shape, rng);
            let mut points: Vec<Tensor> = p.named().into_iter().map(|(_, t)| t.clone()).collect();
            points.push(Tensor::uniform(vec![3, 4], 1.0, rng));
            points.push(Tensor::uniform(vec![3, 4], 1.0, rng));
            Group {
                name: format!("fusion-{}", kind.name()),
                cases: vec![case(kind.name(), points, move |g, v| {
                    let n = v.len();
                    let vars = p.attach(g, &mut Leaves::new(&v[..n - 2]))?;
                    let out = fuse(g, v[n - 2], v[n - 1], &vars)?;
                    probe(g, out.h, s)
                })],
            }
        })
        .collect()
}

fn mine(rng: &mut ChaCha8Rng) -> Group {
    let mut net = StatisticsNet::init(6, 5, rng);
    for l in &mut net.layers {
        l.b = Some(Tensor::uniform(vec![l.output_dim()], 0.5, rng));
    }
    let mut points: Vec<Tensor> = net.named().into_iter().map(|(_, t)| t.clone()).collect();
    points.push(Tensor::uniform(vec![4, 3], 1.0, rng));
    points.push(Tensor::uniform(vec![4, 3], 1.0, rng));
    Group {
        name: "mine-dv-bound".into(),
        cases: vec![case("shift negatives", points, move |g, v| {
            let n = v.len();
            let vars = net.attach(g, &mut Leaves::new(&v[..n - 2]))?;
            let est = dv_lower_bound(g, v[n - 2], v[n - 1], &vars, &shifted_indices(4, 1)?)?;
            mi_loss(g, &est)
        })],
    }
}

fn head(rng: &mut ChaCha8Rng) -> Group {
    let l = Linear::init(4, 2, true, rng);
    let mut points: Vec<Tensor> = l.named().into_iter().map(|(_, t)| t.clone()).collect();
    points.push(Tensor::uniform(vec![3, 4], 1.0, rng));
    Group {
        name: "head+cross-entropy".into(),
        cases: vec![case("dense head", points, move |g, v| {
            let vars = l.attach(g, &mut Leaves::new(&v[..2]))?;
            let logits = vars.apply(g, v[2])?;
            crate::model::cross_entropy(g, logits, &[1, 0, 1])
        })],
    }
}

fn pipelines(rng: &mut ChaCha8Rng) -> Vec<Group> {
    let examples: Vec<Example> = (0..3)
        .map(|i| Example {
            id: format!("p{i}"),
            text: Tensor::uniform(vec![3], 1.0, rng),
            chunks: (0..1 + i % 2)
                .map(|_| Tensor::uniform(vec![2 + i, 2], 1.5, rng))
                .collect(),
            label: Some(i % 2),
        })
        .collect();
    FusionKind::ALL
        .iter()
        .map(|&fusion| {
            let cfg = ModelConfig {
                asp_hidden: 3,
                proj_dim: 4,
                at_hidden: 3,
                mfb_factor: 2,
                mfh_blocks: 2,
                mine_hidden: 4,
                fusion,
                ..ModelConfig::new(3, 2)
            };
            let mut params = ModelParams::init(&cfg, rng).expect("valid config");
            for t in params.tensors_mut() {
                if t.rank() == 1 && t.data().iter().all(|&v| v == 0.0) {
                    *t = Tensor::uniform(t.shape().to_vec(), 0.5, rng);
                }
            }
            let points: Vec<Tensor> = params.named().into_iter().map(|(_, t)| t.clone()).collect();
            let ex = examples.clone();
            Group {
                name: format!("pipeline-{}", fusion.name()),
                cases: vec![case(
                    format!("asp → projection → {} → head → loss + λ·mi", fusion.name()),
                    points,
                    move |g, v| {
                        let vars = params.attach(g, &mut Leaves::new(v))?;
                        let refs: Vec<&Example> = ex.iter().collect();
                        Ok(
                            batch_objective(g, &vars, &refs, 0.25, NegativeSampling::Shift)?
                                .1
                                .total,
                        )
                    },
                )],
            }
        })
        .collect()
}

fn all_groups(seed: u64) -> Vec<Group> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups = linear_algebra(&mut rng);
    groups.extend(unaries(&mut rng));
    groups.push(normalisers(&mut rng));
    groups.push(reductions(&mut rng));
    groups.push(structural(&mut rng));
    groups.push(pooling(&mut rng));
    groups.push(projection(&mut rng));
    groups.extend(fusion(&mut rng));
    groups.push(mine(&mut rng));
    groups.push(head(&mut rng));
    groups.extend(pipelines(&mut rng));
    groups
}

/// Names of the groups [`gradient_suite`] runs, in order.
pub fn group_names() -> Vec<String> {
    all_groups(0).into_iter().map(|g| g.name).collect()
}

fn run_group(group: Group) -> GroupResult {
    let mut worst = (0.0f64, String::new());
    let mut error = None;
    for c in &group.cases {
        match gradcheck_many(&c.f, &c.points, EPS) {
            Ok(r) => {
                if r.max_rel_error > worst.0 || r.max_rel_error.is_nan() {
                    worst = (r.max_rel_error, c.name.clone());
                }
            }
            Err(e) => {
                error = Some(format!("{}: {e}", c.name));
                break;
            }
        }
    }
    GroupResult {
        passed: error.is_none() && worst.0 < TOLERANCE,
        name: group.name,
        cases: group.cases.len(),
        max_rel_error: worst.0,
        worst_case: worst.1,
        error,
    }
}

/// Runs every group with inputs drawn from `seed`.
pub fn gradient_suite(seed: u64) -> SuiteReport {
    let start = Instant::now();
    let groups: Vec<GroupResult> = all_groups(seed).into_iter().map(run_group).collect();
    SuiteReport {
        seed,
        tolerance: TOLERANCE,
        passed: groups.iter().all(|g| g.passed),
        groups,
        seconds: start.elapsed().as_secs_f64(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::fault;

    #[test]
    fn suite_passes_and_covers_every_group() {
        let report = gradient_suite(0);
        for g in &report.groups {
            assert!(
                g.passed,
                "{} failed: {} ({:?})",
                g.name, g.max_rel_error, g.error
            );
        }
        assert!(report.groups.len() >= 8);
        for kind in FusionKind::ALL {
            assert!(report
                .groups
                .iter()
                .any(|g| g.name == format!("pipeline-{}", kind.name())));
        }
        assert_eq!(group_names().len(), report.groups.len());
    }

    #[test]
    fn flipped_tanh_rule_is_named() {
        fault::set_flip_tanh(true);
        let report = gradient_suite(1);
        fault::set_flip_tanh(false);
        assert!(!report.passed);
        let failed: Vec<&str> = report.failures().map(|g| g.name.as_str()).collect();
        assert!(failed.contains(&"tanh"), "{failed:?}");
        assert!(failed.contains(&"pipeline-at"));
        assert!(!failed.contains(&"matmul"));
        assert!(!failed.contains(&"exp"));
    }
}
