//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use mifuse_core::autodiff::Graph;
use mifuse_core::checkpoint::{self, Checkpoint};
use mifuse_core::data::{read_record, write_record, SynthConfig};
use mifuse_core::fusion::{
    at_fusion, gmu_fusion_detailed, mfb_fusion, AtFusionParams, GmuParams, MfbParams,
};
use mifuse_core::mine::{
    correlated_gaussian, dv_lower_bound, fit, negative_indices, MineFitConfig, NegativeSampling,
    StatisticsNet,
};
use mifuse_core::model::{ModelConfig, ModelParams};
use mifuse_core::pooling::{asp_pool_detailed, mean_pool, Activation, AspParams, VAR_EPS};
use mifuse_core::train::early_stop::simulate;
use mifuse_core::train::{compute_metrics, step_lr, ConfusionMatrix};
use mifuse_core::{Linear, Parameters, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }
}

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mifuse"));
    cmd.env("RUST_LOG", "warn");
    cmd
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).expect("readable")).expect("valid json")
}

fn gen_synth(dir: &Path, sep: f64) -> PathBuf {
    let out = run(bin()
        .args(["gen-synth", "--sep", &sep.to_string(), "--out"])
        .arg(dir));
    assert!(
        out.status.success(),
        "gen-synth failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    PathBuf::from(String::from_utf8(out.stdout).unwrap().trim())
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

// ---- gradient suite -------------------------------------------------------

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let out = run(bin().args(["gradcheck", "--json"]));
    let secs = start.elapsed().as_secs_f64();
    let report: Value = match serde_json::from_slice(&out.stdout) {
        Ok(v) => v,
        Err(e) => return Outcome::new(false, format!("unreadable output: {e}")),
    };
    let groups = report["groups"].as_array().cloned().unwrap_or_default();
    let worst = groups
        .iter()
        .filter_map(|g| g["max_rel_error"].as_f64())
        .fold(0.0, f64::max);
    let failed: Vec<&str> = groups
        .iter()
        .filter(|g| g["passed"] != true)
        .filter_map(|g| g["name"].as_str())
        .collect();
    let ok = out.status.success()
        && failed.is_empty()
        && worst < 1e-4
        && secs < 60.0
        && !groups.is_empty();
    Outcome::new(
        ok,
        format!(
            "{} groups, max rel err {worst:.2e} (< 1e-4), {secs:.2} s (< 60 s){}",
            groups.len(),
            if failed.is_empty() {
                String::new()
            } else {
                format!(", failing: {}", failed.join(", "))
            }
        ),
    )
}

// ---- attentive statistics pooling -----------------------------------------

/// Scores, weights, mean and spread written out elementwise.
fn direct_asp(frames: &[Vec<f64>], p: &AspParams) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (hidden, d) = (p.w.shape()[0], p.w.shape()[1]);
    let w = p.w.data();
    let scores: Vec<f64> = frames
        .iter()
        .map(|h| {
            let mut e = p.k.data()[0];
            for j in 0..hidden {
                let mut z = p.b.data()[j];
                for i in 0..d {
                    z += w[j * d + i] * h[i];
                }
                let a = match p.activation {
                    Activation::Tanh => z.tanh(),
                    Activation::Relu => z.max(0.0),
                };
                e += p.v.data()[j] * a;
            }
            e
        })
        .collect();
    let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|e| (e - top).exp()).collect();
    let total: f64 = exps.iter().sum();
    let alpha: Vec<f64> = exps.iter().map(|x| x / total).collect();
    let mut mu = vec![0.0; d];
    let mut second = vec![0.0; d];
    for (a, h) in alpha.iter().zip(frames) {
        for i in 0..d {
            mu[i] += a * h[i];
            second[i] += a * h[i] * h[i];
        }
    }
    let sigma = (0..d)
        .map(|i| (second[i] - mu[i] * mu[i]).max(VAR_EPS).sqrt())
        .collect();
    (alpha, mu, sigma)
}

fn asp_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let t = rng.random_range(1..=5);
        let d = rng.random_range(1..=3);
        let act = if rng.random_bool(0.5) {
            Activation::Tanh
        } else {
            Activation::Relu
        };
        let mut p = AspParams::init(d, 4, act, &mut rng);
        p.b = Tensor::uniform(vec![4], 0.5, &mut rng);
        p.k = Tensor::uniform(vec![1], 0.5, &mut rng);
        let h = Tensor::uniform(vec![t, d], 3.0, &mut rng);
        let frames: Vec<Vec<f64>> = h.data().chunks(d).map(<[f64]>::to_vec).collect();

        let mut g = Graph::new();
        let vars = p.bind(&mut g).unwrap();
        let hv = g.constant(h);
        let out = asp_pool_detailed(&mut g, hv, &vars).unwrap();
        let (alpha, mu, sigma) = direct_asp(&frames, &p);
        worst = worst
            .max(max_abs_diff(g.value(out.weights).data(), &alpha))
            .max(max_abs_diff(g.value(out.mean).data(), &mu))
            .max(max_abs_diff(g.value(out.std).data(), &sigma));
    }

    let mut uniform: f64 = 0.0;
    for seed in 0..20 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let d = 3;
        let mut p = AspParams::init(d, 4, Activation::Tanh, &mut r);
        p.w = Tensor::zeros(vec![4, d]);
        let h = Tensor::uniform(vec![5, d], 3.0, &mut r);
        let mut g = Graph::new();
        let vars = p.bind(&mut g).unwrap();
        let hv = g.constant(h);
        let out = asp_pool_detailed(&mut g, hv, &vars).unwrap();
        let m = mean_pool(&mut g, hv).unwrap();
        uniform = uniform.max(max_abs_diff(g.value(out.mean).data(), g.value(m).data()));
    }
    Outcome::new(
        worst < 1e-10 && uniform < 1e-10,
        format!("200 instances max abs err {worst:.1e}, uniform-score vs mean pool {uniform:.1e} (< 1e-10)"),
    )
}

// ---- mutual information ----------------------------------------------------

fn mine_benchmark() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for (rho, seed) in [(0.8, 11u64), (0.5, 12), (0.0, 13)] {
        let analytic = -0.5 * (1.0f64 - rho * rho).ln() + 0.0;
        let (x, z) = correlated_gaussian(10_000, rho, seed).unwrap();
        let start = Instant::now();
        let est = fit(&x, &z, &MineFitConfig::default()).unwrap().estimate;
        let secs = start.elapsed().as_secs_f64();
        let within = if rho == 0.0 {
            est <= 0.05
        } else {
            (est - analytic).abs() <= 0.05
        };
        ok &= within && secs < 120.0;
        parts.push(format!("ρ={rho}: {est:.4} vs {analytic:.4} in {secs:.1} s"));
    }
    Outcome::new(ok, parts.join("; "))
}

fn constant_statistic() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut r = ChaCha8Rng::seed_from_u64(5);
    for c in [-4.0, 0.0, 1.5, 300.0] {
        for b in [2usize, 7, 32] {
            let net = StatisticsNet::constant(6, 8, c);
            let mut g = Graph::new();
            let vars = net.bind(&mut g).unwrap();
            let a = g.constant(Tensor::uniform(vec![b, 3], 2.0, &mut r));
            let t = g.constant(Tensor::uniform(vec![b, 3], 2.0, &mut r));
            let idx = negative_indices(b, NegativeSampling::Shift).unwrap();
            let est = dv_lower_bound(&mut g, a, t, &vars, &idx).unwrap();
            worst = worst.max(g.value(est.value).item().abs());
        }
    }
    Outcome::new(worst < 1e-10, format!("max |DV| {worst:.1e} (< 1e-10)"))
}

// ---- fusion ----------------------------------------------------------------

fn fusion_identities() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let (b, d) = (4, 6);
    let pa = Tensor::uniform(vec![b, d], 2.0, &mut r);
    let pt = Tensor::uniform(vec![b, d], 2.0, &mut r);

    let at = AtFusionParams::new(
        Tensor::zeros(vec![5, d]),
        Tensor::uniform(vec![5], 1.0, &mut r),
    )
    .unwrap();
    let mut g = Graph::new();
    let vars = at.bind(&mut g).unwrap();
    let (a, t) = (g.constant(pa.clone()), g.constant(pt.clone()));
    let out = at_fusion(&mut g, a, t, &vars).unwrap();
    let half = vec![0.5; 2 * b];
    let avg: Vec<f64> = pa
        .data()
        .iter()
        .zip(pt.data())
        .map(|(x, y)| (x + y) / 2.0)
        .collect();
    let at_err = max_abs_diff(g.value(out.weights).data(), &half)
        .max(max_abs_diff(g.value(out.h).data(), &avg));

    let mut gmu = GmuParams::init(d, &mut r);
    gmu.gate = Linear::zeros(2 * d, d, true);
    let mut g = Graph::new();
    let vars = gmu.bind(&mut g).unwrap();
    let (a, t) = (g.constant(pa.clone()), g.constant(pt.clone()));
    let out = gmu_fusion_detailed(&mut g, t, a, &vars).unwrap();
    let expected: Vec<f64> = g
        .value(out.h_text)
        .data()
        .iter()
        .zip(g.value(out.h_audio).data())
        .map(|(x, y)| 0.5 * (x + y))
        .collect();
    let gmu_err = max_abs_diff(g.value(out.h).data(), &expected);

    let mfb = MfbParams::init(d, 5, 1, &mut r);
    let mut g = Graph::new();
    let vars = mfb.bind(&mut g).unwrap();
    let zero = g.constant(Tensor::zeros(vec![b, d]));
    let t = g.constant(pt);
    let y1 = mfb_fusion(&mut g, zero, t, &vars).unwrap();
    let y2 = mfb_fusion(&mut g, t, zero, &vars).unwrap();
    let mfb_err = g
        .value(y1)
        .data()
        .iter()
        .chain(g.value(y2).data())
        .map(|v| v.abs())
        .fold(0.0, f64::max);

    Outcome::new(
        at_err < 1e-10 && gmu_err < 1e-10 && mfb_err < 1e-10,
        format!("AT {at_err:.1e}, GMU {gmu_err:.1e}, MFB {mfb_err:.1e} (< 1e-10)"),
    )
}

// ---- training ----------------------------------------------------------------

fn train(data: &Path, out: &Path, extra: &[&str]) -> Option<Value> {
    let o = run(bin()
        .arg("train")
        .arg("--data")
        .arg(data)
        .arg("--out")
        .arg(out)
        .args(extra));
    if !o.status.success() {
        eprintln!("train failed: {}", String::from_utf8_lossy(&o.stderr));
        return None;
    }
    Some(read_json(&out.join("report.json")))
}

fn test_accuracy(report: &Value) -> f64 {
    report["aggregate"]["test"]["accuracy"]["mean"]
        .as_f64()
        .unwrap_or(f64::NAN)
}

fn end_to_end(root: &Path) -> Outcome {
    let start = Instant::now();
    let sep4 = gen_synth(&root.join("sep4"), 4.0);
    let sep0 = gen_synth(&root.join("sep0"), 0.0);
    let (Some(r4), Some(r0)) = (
        train(&sep4, &root.join("run4"), &[]),
        train(&sep0, &root.join("run0"), &[]),
    ) else {
        return Outcome::new(false, "training failed");
    };
    let secs = start.elapsed().as_secs_f64();
    let (acc4, acc0) = (test_accuracy(&r4), test_accuracy(&r0));
    let per_run: Vec<String> = r4["per_run"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| format!("{}", r["test"]["metrics"]["accuracy"]))
        .collect();
    Outcome::new(
        acc4 >= 95.0 && (acc0 - 50.0).abs() <= 10.0 && secs < 300.0,
        format!(
            "sep 4 mean test acc {acc4:.2} (≥ 95; runs {}), sep 0 {acc0:.2} (50 ± 10), {secs:.1} s (< 300 s)",
            per_run.join(", ")
        ),
    )
}

fn protocol() -> Outcome {
    let mut stream = vec![1.0, 0.9];
    stream.extend([0.95; 8]);
    let (stop, best) = simulate(&stream, 8);
    let lr0 = 1e-4;
    let lrs = [3, 4, 8].map(|e| step_lr(lr0, e, 4, 0.1));
    let lr_ok = max_abs_diff(&lrs, &[lr0, lr0 * 0.1, lr0 * 0.01]) < 1e-18;
    let m = compute_metrics(&ConfusionMatrix::new(21, 4, 20, 3))
        .unwrap()
        .rounded();
    let pct = |n: f64, d: f64| (10000.0 * n / d).round() / 100.0;
    let p: f64 = 21.0 / 25.0;
    let rc: f64 = 21.0 / 24.0;
    let expected = [
        pct(21.0, 25.0),
        pct(21.0, 24.0),
        (10000.0 * 2.0 * p * rc / (p + rc)).round() / 100.0,
        pct(41.0, 48.0),
        pct(20.0, 24.0),
    ];
    let got = [m.precision, m.recall, m.f1, m.accuracy, m.specificity];
    let metrics_ok = got == expected && got == [84.00, 87.50, 85.71, 85.42, 83.33];
    Outcome::new(
        stop == Some(10) && best == 2 && lr_ok && metrics_ok,
        format!(
            "stop {stop:?} best {best}; lr at 3/4/8 = {:.0e}/{:.0e}/{:.0e}; P/R/F1/Acc/Spec = {:?}",
            lrs[0], lrs[1], lrs[2], got
        ),
    )
}

fn determinism(root: &Path) -> Outcome {
    let data = gen_synth(&root.join("det"), 4.0);
    let args = ["--runs", "2"];
    let (a, b) = (root.join("det_a"), root.join("det_b"));
    if train(&data, &a, &args).is_none() || train(&data, &b, &args).is_none() {
        return Outcome::new(false, "training failed");
    }
    let same_report = std::fs::read(a.join("report.json")).unwrap()
        == std::fs::read(b.join("report.json")).unwrap();
    let same_ckpt = std::fs::read(a.join("run_1.mmck")).unwrap()
        == std::fs::read(b.join("run_1.mmck")).unwrap();

    let mut records_exact = true;
    for (rec, _) in mifuse_core::data::generate(&SynthConfig::default())
        .unwrap()
        .iter()
        .take(10)
    {
        let path = root.join(format!("{}.mmeb", rec.id));
        write_record(rec, &path).unwrap();
        records_exact &= read_record(&path).unwrap() == *rec;
    }

    let cfg = ModelConfig::new(16, 16);
    let params = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let path = root.join("model.mmck");
    checkpoint::save(&params, &path).unwrap();
    let back = checkpoint::load(&path, &cfg).unwrap();
    let ckpt_exact =
        Checkpoint::from_params(&back).tensors == Checkpoint::from_params(&params).tensors;

    Outcome::new(
        same_report && same_ckpt && records_exact && ckpt_exact,
        format!(
            "reports identical {same_report}, checkpoints identical {same_ckpt}, MMEB exact {records_exact}, checkpoint exact {ckpt_exact}"
        ),
    )
}

fn ablation(root: &Path) -> Outcome {
    let data = gen_synth(&root.join("abl"), 4.0);
    let expected: [(&str, Vec<&str>); 3] = [
        ("pooling", vec!["asp", "mean", "max"]),
        ("fusion", vec!["at", "concat", "gmu", "mfb", "mfh"]),
        ("lambda", vec!["0", "0.1", "0.2", "0.25", "0.3"]),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for (axis, labels) in expected {
        let out = root.join(format!("abl_{axis}"));
        let o = run(bin()
            .args(["ablate", "--axis", axis, "--data"])
            .arg(&data)
            .arg("--out")
            .arg(&out));
        let json = read_json(&out.join(format!("ablation_{axis}.json")));
        let rows = json["rows"].as_array().cloned().unwrap_or_default();
        let names: Vec<&str> = rows.iter().filter_map(|r| r["variant"].as_str()).collect();
        let complete = rows.iter().all(|r| {
            r["status"] == "ok" && r["report"]["aggregate"]["completed"] == r["report"]["runs"]
        });
        ok &= o.status.success() && names == labels && complete;
        parts.push(format!(
            "{axis}: {} rows{}",
            rows.len(),
            if complete { "" } else { " (incomplete)" }
        ));
    }
    Outcome::new(ok, parts.join(", "))
}

type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let root = dir.path();
    let criteria: Vec<(&str, Check)> = vec![
        ("gradient suite", Box::new(gradient_suite)),
        ("ASP oracle", Box::new(asp_oracle)),
        ("MINE Gaussian benchmark", Box::new(mine_benchmark)),
        ("constant-statistic identity", Box::new(constant_statistic)),
        ("fusion identities", Box::new(fusion_identities)),
        ("end-to-end synthetic", Box::new(|| end_to_end(root))),
        ("protocol conformance", Box::new(protocol)),
        (
            "determinism and round trips",
            Box::new(|| determinism(root)),
        ),
        ("ablation harness", Box::new(|| ablation(root))),
    ];
    let width = criteria.iter().map(|(n, _)| n.len()).max().unwrap_or(0);
    let mut failed = 0;
    let start = Instant::now();
    for (name, check) in &criteria {
        let t = Instant::now();
        let o = check();
        if !o.passed {
            failed += 1;
        }
        println!(
            "{}  {name:<width$}  {}  [{:.1} s]",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail,
            t.elapsed().as_secs_f64()
        );
    }
    println!(
        "{} of {} criteria passed in {:.1} s",
        criteria.len() - failed,
        criteria.len(),
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
