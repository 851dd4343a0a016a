use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use mifuse_core::checkpoint::{self, Checkpoint};
use mifuse_core::data::{load_dataset, write_synthetic, Dataset, SynthConfig};
use mifuse_core::fusion::FusionKind;
use mifuse_core::model::Example;
use mifuse_core::pooling::Pooling;
use mifuse_core::train::{evaluate, multi_run, Report, RunData, SplitResult, TrainConfig};
use mifuse_core::verify::gradient_suite;
use serde::Serialize;

use crate::config::RunConfig;
use crate::table::{report_table, summary_table};
use crate::{exit_code_for, Axis, CliError, EvalSplit, ExitCode};

pub const LAMBDA_GRID: [f64; 5] = [0.0, 0.1, 0.2, 0.25, 0.3];

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))
}

pub fn checkpoint_name(run: usize) -> String {
    format!("run_{run}.mmck")
}

/// Run index encoded in a `run_<r>.mmck` file name.
pub fn run_from_name(path: &Path) -> Option<usize> {
    path.file_stem()?
        .to_str()?
        .strip_prefix("run_")?
        .parse()
        .ok()
}

fn first_failure(failures: &[(usize, mifuse_core::Error)]) -> Option<CliError> {
    failures.first().map(|(r, e)| {
        CliError::new(
            exit_code_for(e.kind()),
            format!("{} of the runs failed; run {r}: {e}", failures.len()),
        )
    })
}

pub fn train(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let dataset = load_dataset(cfg.data_path()?)?;
    let dir = cfg.out_dir()?;
    create_dir(dir)?;
    write_file(&dir.join("config.json"), cfg.to_json().as_bytes())?;
    let result = multi_run(&cfg.train, &dataset, |r, outcome| {
        checkpoint::save(&outcome.params, &dir.join(checkpoint_name(r)))
    })?;
    write_file(&dir.join("report.json"), result.report.to_json().as_bytes())?;
    write!(out, "{}", report_table(&result.report))?;
    writeln!(out, "report: {}", dir.join("report.json").display())?;
    match first_failure(&result.failures) {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

#[derive(Debug, Serialize)]
struct EvalOutput<'a> {
    checkpoint: &'a Path,
    split: &'static str,
    run: Option<usize>,
    #[serde(flatten)]
    result: SplitResult,
}

fn split_examples(
    dataset: &Dataset,
    train: &TrainConfig,
    split: EvalSplit,
    run: usize,
) -> Result<Vec<Example>, CliError> {
    match split {
        EvalSplit::Test => Ok(dataset.test.iter().map(Example::from_record).collect()),
        EvalSplit::Train | EvalSplit::Val => {
            let seed = train.seed.wrapping_add(run as u64);
            let data = RunData::prepare(dataset, train.split_train_frac, seed)?;
            Ok(if split == EvalSplit::Val {
                data.val
            } else {
                data.train
            })
        }
    }
}

pub fn eval(
    checkpoint_path: &Path,
    data: &Path,
    split: EvalSplit,
    config: Option<&Path>,
    run: Option<usize>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let config_path = match config {
        Some(p) => p.to_path_buf(),
        None => checkpoint_path
            .parent()
            .unwrap_or(Path::new("."))
            .join("config.json"),
    };
    let cfg = RunConfig::from_file(&config_path)?;
    let dataset = load_dataset(data)?;
    let bytes = fs::read(checkpoint_path)
        .map_err(|e| CliError::data(format!("{}: {e}", checkpoint_path.display())))?;
    let ck = Checkpoint::decode(&bytes)
        .map_err(|e| CliError::data(format!("{}: {e}", checkpoint_path.display())))?;
    let model_cfg = cfg.train.model_config(dataset.d_t(), dataset.d_a());
    let expected = (model_cfg.d_t, model_cfg.audio_dim());
    if let Some(found) = ck.input_widths() {
        if found != expected {
            return Err(CliError::data(format!(
                "checkpoint expects text width {} and pooled audio width {}, data gives {} and {}",
                found.0, found.1, expected.0, expected.1
            )));
        }
    }
    let params = ck.into_params(&model_cfg)?;
    let run = run.or_else(|| run_from_name(checkpoint_path));
    let examples = split_examples(&dataset, &cfg.train, split, run.unwrap_or(0))?;
    let result = evaluate(&params, &examples)?;
    let output = EvalOutput {
        checkpoint: checkpoint_path,
        split: match split {
            EvalSplit::Train => "train",
            EvalSplit::Val => "val",
            EvalSplit::Test => "test",
        },
        run,
        result: SplitResult::from_evaluation(&result),
    };
    writeln!(
        out,
        "{}",
        serde_json::to_string_pretty(&output).expect("serialises")
    )?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RowStatus {
    Ok,
    Partial,
    Failed,
}

#[derive(Debug, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub status: RowStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<Report>,
}

#[derive(Debug, Serialize)]
pub struct Ablation {
    pub axis: &'static str,
    pub rows: Vec<AblationRow>,
}

struct Variant {
    label: String,
    config: TrainConfig,
    data: PathBuf,
}

fn variants(cfg: &RunConfig, axis: Axis, manifests: &[PathBuf]) -> Result<Vec<Variant>, CliError> {
    let data = manifests[0].clone();
    let with = |label: String, config: TrainConfig| Variant {
        label,
        config,
        data: data.clone(),
    };
    let base = &cfg.train;
    Ok(match axis {
        Axis::Pooling => Pooling::ALL
            .iter()
            .map(|&p| {
                with(
                    p.name().to_string(),
                    TrainConfig {
                        pooling: p,
                        ..base.clone()
                    },
                )
            })
            .collect(),
        Axis::Fusion => FusionKind::ALL
            .iter()
            .map(|&f| {
                with(
                    f.name().to_string(),
                    TrainConfig {
                        fusion: f,
                        ..base.clone()
                    },
                )
            })
            .collect(),
        Axis::Lambda => LAMBDA_GRID
            .iter()
            .map(|&l| {
                with(
                    l.to_string(),
                    TrainConfig {
                        lambda_mi: l,
                        ..base.clone()
                    },
                )
            })
            .collect(),
        Axis::LayersMeta => manifests
            .iter()
            .map(|m| {
                let label = mifuse_core::data::Manifest::read(m)
                    .ok()
                    .and_then(|man| man.layer_sum_count)
                    .map(|k| format!("k={k}"))
                    .unwrap_or_else(|| m.display().to_string());
                Variant {
                    label,
                    config: base.clone(),
                    data: m.clone(),
                }
            })
            .collect(),
    })
}

pub fn ablate(
    cfg: &RunConfig,
    axis: Axis,
    manifests: &[PathBuf],
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let dir = cfg.out_dir()?;
    create_dir(dir)?;
    write_file(&dir.join("config.json"), cfg.to_json().as_bytes())?;
    let mut rows = Vec::new();
    let mut first_error: Option<CliError> = None;
    for v in variants(cfg, axis, manifests)? {
        info!("{} = {}", axis.name(), v.label);
        let outcome = load_dataset(&v.data)
            .map_err(CliError::from)
            .and_then(|ds| multi_run(&v.config, &ds, |_, _| Ok(())).map_err(CliError::from));
        let row = match outcome {
            Ok(result) => {
                let err = first_failure(&result.failures);
                let status = if result.report.aggregate.completed == 0 {
                    RowStatus::Failed
                } else if result.report.partial {
                    RowStatus::Partial
                } else {
                    RowStatus::Ok
                };
                let row = AblationRow {
                    variant: v.label,
                    status,
                    error: err.as_ref().map(|e| e.message.clone()),
                    report: Some(result.report),
                };
                if first_error.is_none() {
                    first_error = err;
                }
                row
            }
            Err(e) => {
                let row = AblationRow {
                    variant: v.label,
                    status: RowStatus::Failed,
                    error: Some(e.message.clone()),
                    report: None,
                };
                first_error.get_or_insert(e);
                row
            }
        };
        rows.push(row);
    }
    let ablation = Ablation {
        axis: axis.name(),
        rows,
    };
    let path = dir.join(format!("ablation_{}.json", axis.name()));
    let mut json = serde_json::to_string_pretty(&ablation).expect("serialises");
    json.push('\n');
    write_file(&path, json.as_bytes())?;

    let header = match axis {
        Axis::Pooling => "Pooling",
        Axis::Fusion => "Fusion",
        Axis::Lambda => "λ",
        Axis::LayersMeta => "Layers",
    };
    let table_rows: Vec<_> = ablation
        .rows
        .iter()
        .map(|r| {
            let summary = r.report.as_ref().and_then(|rep| rep.headline().cloned());
            let note = match r.status {
                RowStatus::Ok => String::new(),
                RowStatus::Partial => "partial".to_string(),
                RowStatus::Failed => "failed".to_string(),
            };
            (r.variant.clone(), summary, note)
        })
        .collect();
    write!(out, "{}", summary_table(header, &table_rows))?;
    writeln!(out, "ablation: {}", path.display())?;
    match first_error {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

pub fn gradcheck(seed: u64, json: bool, out: &mut dyn Write) -> Result<(), CliError> {
    let report = gradient_suite(seed);
    if json {
        writeln!(
            out,
            "{}",
            serde_json::to_string_pretty(&report).expect("serialises")
        )?;
    } else {
        let width = report
            .groups
            .iter()
            .map(|g| g.name.len())
            .max()
            .unwrap_or(0);
        for g in &report.groups {
            let verdict = if g.passed { "PASS" } else { "FAIL" };
            write!(
                out,
                "{verdict}  {:<width$}  max rel err {:.3e}  ({} case{})",
                g.name,
                g.max_rel_error,
                g.cases,
                if g.cases == 1 { "" } else { "s" }
            )?;
            if !g.passed {
                write!(out, "  worst: {}", g.worst_case)?;
            }
            if let Some(e) = &g.error {
                write!(out, "  error: {e}")?;
            }
            writeln!(out)?;
        }
        writeln!(
            out,
            "{} groups, tolerance {:.0e}, {:.2} s",
            report.groups.len(),
            report.tolerance,
            report.seconds
        )?;
    }
    let failed: Vec<&str> = report.failures().map(|g| g.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::new(
            ExitCode::Verification,
            format!("gradient check failed for: {}", failed.join(", ")),
        ))
    }
}

pub fn gen_synth(cfg: &SynthConfig, dir: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let path = write_synthetic(cfg, dir)?;
    writeln!(out, "{}", path.display())?;
    Ok(())
}
