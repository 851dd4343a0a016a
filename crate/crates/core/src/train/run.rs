//! Single training runs and their multi-seed aggregation.

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::early_stop::EarlyStopper;
use super::metrics::{compute_metrics, ConfusionMatrix, Metrics};
use super::optim::{step_lr, Adam, AdamConfig};
use super::report::{Report, RunRecord, SplitResult};
use super::split::stratified_split;
use crate::autodiff::Graph;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{argmax_rows, batch_objective, predict_logits, Example, ModelParams};
use crate::nn::Parameters;
use crate::tensor::Tensor;

const STREAM_INIT: u64 = 0;
const STREAM_SPLIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_NEGATIVES: u64 = 3;

const EVAL_BATCH: usize = 64;

/// An independent random stream for one purpose within a run.
pub fn run_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Labelled training examples partitioned into training and validation sets.
#[derive(Debug, Clone)]
pub struct RunData {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

impl RunData {
    /// Converts the dataset and draws this seed's stratified split. Unlabelled
    /// records are dropped from every set.
    pub fn prepare(dataset: &Dataset, frac: f64, seed: u64) -> Result<Self> {
        let labelled = |recs: &[crate::data::UtteranceRecord]| -> Vec<Example> {
            recs.iter()
                .filter(|r| r.label.class().is_some())
                .map(Example::from_record)
                .collect()
        };
        let pool = labelled(&dataset.train);
        let dropped = dataset.train.len() - pool.len();
        if dropped > 0 {
            warn!("{dropped} unlabelled training records excluded");
        }
        let labels: Vec<usize> = pool.iter().map(|e| e.label.expect("filtered")).collect();
        let (tr, va) = stratified_split(&labels, frac, &mut run_rng(seed, STREAM_SPLIT))?;
        Ok(Self {
            train: tr.iter().map(|&i| pool[i].clone()).collect(),
            val: va.iter().map(|&i| pool[i].clone()).collect(),
            test: labelled(&dataset.test),
        })
    }
}

/// Predictions, counts and loss over a labelled set.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub n: usize,
    pub loss: f64,
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
}

/// Mean cross-entropy of `labels` under row-wise softmax of `logits`.
pub fn mean_cross_entropy(logits: &[[f64; 2]], labels: &[usize]) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(row, &y)| {
            let (hi, lo) = if row[0] >= row[1] {
                (row[0], row[1])
            } else {
                (row[1], row[0])
            };
            let lse = hi + (lo - hi).exp().ln_1p();
            lse - row[y]
        })
        .sum();
    total / logits.len() as f64
}

pub fn evaluate(params: &ModelParams, examples: &[Example]) -> Result<Evaluation> {
    let labelled: Vec<Example> = examples
        .iter()
        .filter(|e| e.label.is_some())
        .cloned()
        .collect();
    if labelled.is_empty() {
        return Err(Error::Data("no labelled records to evaluate".into()));
    }
    let labels: Vec<usize> = labelled
        .iter()
        .map(|e| e.label.expect("filtered"))
        .collect();
    let logits = predict_logits(params, &labelled, EVAL_BATCH)?;
    let loss = mean_cross_entropy(&logits, &labels);
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            op: "validation loss",
            index: 0,
        });
    }
    let flat = Tensor::matrix(logits.len(), 2, logits.iter().flatten().copied().collect())?;
    let predicted = argmax_rows(&flat);
    let confusion = ConfusionMatrix::from_predictions(&predicted, &labels);
    Ok(Evaluation {
        n: labelled.len(),
        loss,
        confusion,
        metrics: compute_metrics(&confusion)?,
    })
}

/// Result of one completed run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub seed: u64,
    /// Weights from the best validation epoch.
    pub params: ModelParams,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub val_losses: Vec<f64>,
    pub train_losses: Vec<f64>,
    pub val: Evaluation,
    pub test: Option<Evaluation>,
}

/// Trains one model with `seed` and restores the weights of its best
/// validation epoch.
pub fn train_run(
    config: &TrainConfig,
    data: &RunData,
    d_t: usize,
    d_a: usize,
    seed: u64,
) -> Result<RunOutcome> {
    config.validate()?;
    let model_cfg = config.model_config(d_t, d_a);
    let mut params = ModelParams::init(&model_cfg, &mut run_rng(seed, STREAM_INIT))?;
    let mut adam = Adam::new(
        AdamConfig::default(),
        params.named().into_iter().map(|(_, t)| t),
    );
    let mut shuffle_rng = run_rng(seed, STREAM_SHUFFLE);
    let mut negative_rng = run_rng(seed, STREAM_NEGATIVES);
    let mut stopper = EarlyStopper::new(config.patience);
    let mut best = params.clone();
    let mut val_losses = Vec::new();
    let mut train_losses = Vec::new();
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    for epoch in 0..config.max_epochs {
        let lr = step_lr(config.lr0, epoch, config.step_size, config.gamma);
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for idx in order.chunks(config.batch_size) {
            let batch: Vec<&Example> = idx.iter().map(|&i| &data.train[i]).collect();
            let negatives = config.negatives.sampling(negative_rng.random());
            let mut g = Graph::new();
            let vars = params.bind(&mut g)?;
            let (_, loss) = batch_objective(&mut g, &vars, &batch, config.lambda_mi, negatives)?;
            let total = g.value(loss.total).item();
            if !total.is_finite() {
                return Err(Error::NonFinite {
                    op: "training loss",
                    index: epoch,
                });
            }
            epoch_loss += total * batch.len() as f64;
            g.backward(loss.total)?;
            let leaves = vars.leaves();
            let grads: Vec<Option<&Tensor>> = leaves.iter().map(|&v| g.grad(v)).collect();
            adam.step(params.tensors_mut(), &grads, lr)?;
        }
        let train_loss = epoch_loss / data.train.len() as f64;
        let val_loss = evaluate(&params, &data.val)?.loss;
        train_losses.push(train_loss);
        val_losses.push(val_loss);
        let obs = stopper.observe(val_loss);
        debug!(
            "seed {seed} epoch {} lr {lr:.1e} train {train_loss:.6} val {val_loss:.6}{}",
            epoch + 1,
            if obs.improved { " *" } else { "" }
        );
        if obs.improved {
            best.copy_from(&params);
        }
        if obs.stop {
            break;
        }
    }

    let val = evaluate(&best, &data.val)?;
    let test = if data.test.is_empty() {
        None
    } else {
        Some(evaluate(&best, &data.test)?)
    };
    Ok(RunOutcome {
        seed,
        params: best,
        epochs: stopper.epochs_seen(),
        best_epoch: stopper.best_epoch(),
        best_val_loss: stopper.best_loss(),
        val_losses,
        train_losses,
        val,
        test,
    })
}

/// Report plus the errors of any failed runs, indexed by run.
#[derive(Debug)]
pub struct MultiRun {
    pub report: Report,
    pub failures: Vec<(usize, Error)>,
}

/// Runs `config.runs` seeds (`seed + r`) sequentially. `on_run` sees each
/// successful run's restored weights; its errors fail that run.
pub fn multi_run(
    config: &TrainConfig,
    dataset: &Dataset,
    mut on_run: impl FnMut(usize, &RunOutcome) -> Result<()>,
) -> Result<MultiRun> {
    config.validate()?;
    let (d_t, d_a) = (dataset.d_t(), dataset.d_a());
    let mut records = Vec::with_capacity(config.runs);
    let mut failures = Vec::new();
    for r in 0..config.runs {
        let seed = config.seed.wrapping_add(r as u64);
        let outcome = RunData::prepare(dataset, config.split_train_frac, seed)
            .and_then(|data| train_run(config, &data, d_t, d_a, seed))
            .and_then(|out| on_run(r, &out).map(|_| out));
        match outcome {
            Ok(out) => {
                info!(
                    "run {r} (seed {seed}): {} epochs, best {} val loss {:.4}, val acc {:.2}{}",
                    out.epochs,
                    out.best_epoch,
                    out.best_val_loss,
                    out.val.metrics.accuracy,
                    out.test
                        .as_ref()
                        .map(|t| format!(", test acc {:.2}", t.metrics.accuracy))
                        .unwrap_or_default()
                );
                records.push(RunRecord::completed(r, &out));
            }
            Err(e) => {
                warn!("run {r} (seed {seed}) failed: {e}");
                records.push(RunRecord::failed(r, seed, &e));
                failures.push((r, e));
            }
        }
    }
    Ok(MultiRun {
        report: Report::new(config, records),
        failures,
    })
}

impl SplitResult {
    pub fn from_evaluation(e: &Evaluation) -> Self {
        Self {
            n: e.n,
            loss: e.loss,
            confusion: e.confusion,
            metrics: e.metrics.rounded(),
        }
    }
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;

    use super::*;
    use crate::data::{synthetic_dataset, SynthConfig};
    use crate::fusion::FusionKind;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            runs: 2,
            proj_dim: 8,
            asp_hidden: 4,
            at_hidden: 4,
            mine_hidden: 8,
            max_epochs: 6,
            lr0: 1e-2,
            ..TrainConfig::default()
        }
    }

    fn tiny_dataset(sep: f64) -> Dataset {
        let cfg = SynthConfig {
            n_per_class: 12,
            d_t: 4,
            d_a: 3,
            frames: (2, 5),
            separation: sep,
            ..SynthConfig::default()
        };
        synthetic_dataset(&cfg).unwrap()
    }

    #[test]
    fn streams_are_independent() {
        let a: u64 = run_rng(7, 0).random();
        let b: u64 = run_rng(7, 1).random();
        assert_ne!(a, b);
        assert_eq!(a, run_rng(7, 0).random::<u64>());
    }

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let logits: [[f64; 2]; 3] = [[0.0, 0.0], [10.0, -10.0], [-1.0, 2.0]];
        let labels = [0, 0, 1];
        let direct: f64 = logits
            .iter()
            .zip(labels)
            .map(|(r, y)| -(r[y].exp() / (r[0].exp() + r[1].exp())).ln())
            .sum::<f64>()
            / 3.0;
        assert_abs_diff_eq!(
            mean_cross_entropy(&logits, &labels),
            direct,
            epsilon = 1e-12
        );
    }

    #[test]
    fn prepare_drops_unlabelled_and_keeps_counts() {
        let mut ds = tiny_dataset(2.0);
        let n = ds.train.len();
        ds.train[0].label = crate::data::Label::Unlabeled;
        let data = RunData::prepare(&ds, 0.65, 0).unwrap();
        assert_eq!(data.train.len() + data.val.len(), n - 1);
        assert!(data
            .train
            .iter()
            .chain(&data.val)
            .all(|e| e.label.is_some()));
    }

    #[test]
    fn runs_are_reproducible_and_restore_best() {
        let ds = tiny_dataset(3.0);
        let cfg = tiny_config();
        let a = multi_run(&cfg, &ds, |_, _| Ok(())).unwrap();
        let b = multi_run(&cfg, &ds, |_, _| Ok(())).unwrap();
        assert!(a.failures.is_empty());
        assert_eq!(a.report.to_json(), b.report.to_json());
        assert_eq!(a.report.per_run.len(), 2);

        let data = RunData::prepare(&ds, cfg.split_train_frac, 0).unwrap();
        let out = train_run(&cfg, &data, ds.d_t(), ds.d_a(), 0).unwrap();
        let min = out.val_losses.iter().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(out.best_val_loss, min);
        assert_eq!(out.val_losses[out.best_epoch - 1], min);
        assert_eq!(evaluate(&out.params, &data.val).unwrap().loss, min);
    }

    #[test]
    fn every_fusion_trains_without_error() {
        let ds = tiny_dataset(3.0);
        for fusion in FusionKind::ALL {
            let cfg = TrainConfig {
                fusion,
                runs: 1,
                max_epochs: 2,
                ..tiny_config()
            };
            let out = multi_run(&cfg, &ds, |_, _| Ok(())).unwrap();
            assert!(out.failures.is_empty(), "{fusion:?}: {:?}", out.failures);
        }
    }

    #[test]
    fn hook_failure_marks_report_partial() {
        let ds = tiny_dataset(3.0);
        let cfg = TrainConfig {
            max_epochs: 1,
            ..tiny_config()
        };
        let out = multi_run(&cfg, &ds, |r, _| {
            if r == 1 {
                Err(Error::Data("disk full".into()))
            } else {
                Ok(())
            }
        })
        .unwrap();
        assert!(out.report.partial);
        assert_eq!(out.failures.len(), 1);
        assert_eq!(
            out.report.per_run[1].status,
            super::super::report::RunStatus::Failed
        );
    }
}
