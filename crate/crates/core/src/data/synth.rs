//! Synthetic two-class datasets with a shared cross-modal latent.
//!
//! Class `c` has latent sign `s = −1` (control) or `+1` (impaired). With
//! fixed unit directions `u_t` and `u_a`, the text embedding is
//! `s·sep·u_t + ε` and every frame is `s·sep·u_a + ε`, with `ε ~ N(0, I)`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::manifest::{Dataset, Manifest, ManifestEntry, Split, MANIFEST_VERSION};
use super::record::{write_record, FrameMatrix, Label, UtteranceRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_per_class: usize,
    pub d_t: usize,
    pub d_a: usize,
    /// Inclusive range of chunks per utterance.
    pub chunks: (usize, usize),
    /// Inclusive range of frames per chunk.
    pub frames: (usize, usize),
    pub separation: f64,
    pub seed: u64,
    /// Share of each class assigned to the test split.
    pub test_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_per_class: 50,
            d_t: 16,
            d_a: 16,
            chunks: (1, 3),
            frames: (10, 30),
            separation: 4.0,
            seed: 0,
            test_fraction: 0.3,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return bad(format!(
                "separation must be a finite value ≥ 0, got {}",
                self.separation
            ));
        }
        if self.n_per_class == 0 || self.d_t == 0 || self.d_a == 0 {
            return bad("class size and dimensions must be positive".into());
        }
        for (name, (lo, hi)) in [("chunks", self.chunks), ("frames", self.frames)] {
            if lo == 0 || lo > hi {
                return bad(format!("{name} range {lo}..={hi} is empty or starts at 0"));
            }
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return bad(format!(
                "test fraction {} must lie in [0, 1)",
                self.test_fraction
            ));
        }
        Ok(())
    }

    /// Test records per class.
    pub fn test_count(&self) -> usize {
        (self.n_per_class as f64 * self.test_fraction).round() as usize
    }
}

fn unit_direction(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn noisy(rng: &mut ChaCha8Rng, centre: &[f64]) -> Vec<f32> {
    centre
        .iter()
        .map(|c| {
            let e: f64 = rng.sample(StandardNormal);
            (c + e) as f32
        })
        .collect()
}

/// Records in generation order (class 0 first) with their split.
pub fn generate(config: &SynthConfig) -> Result<Vec<(UtteranceRecord, Split)>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let u_t = unit_direction(&mut rng, config.d_t);
    let u_a = unit_direction(&mut rng, config.d_a);
    let n_test = config.test_count();
    let mut out = Vec::with_capacity(2 * config.n_per_class);
    for class in 0..2 {
        let sign = if class == 1 { 1.0 } else { -1.0 };
        let centre_t: Vec<f64> = u_t.iter().map(|x| sign * config.separation * x).collect();
        let centre_a: Vec<f64> = u_a.iter().map(|x| sign * config.separation * x).collect();
        for i in 0..config.n_per_class {
            let text = noisy(&mut rng, &centre_t);
            let n_chunks = rng.random_range(config.chunks.0..=config.chunks.1);
            let mut chunks = Vec::with_capacity(n_chunks);
            for _ in 0..n_chunks {
                let rows = rng.random_range(config.frames.0..=config.frames.1);
                let mut data = Vec::with_capacity(rows * config.d_a);
                for _ in 0..rows {
                    data.extend(noisy(&mut rng, &centre_a));
                }
                chunks.push(FrameMatrix::new(rows, config.d_a, data)?);
            }
            let split = if i >= config.n_per_class - n_test {
                Split::Test
            } else {
                Split::Train
            };
            let rec = UtteranceRecord {
                id: format!("synth-c{class}-{i:04}"),
                label: Label::from_class(class)?,
                text,
                chunks,
            };
            out.push((rec, split));
        }
    }
    Ok(out)
}

fn manifest_for(config: &SynthConfig, records: &[(UtteranceRecord, Split)]) -> Manifest {
    Manifest {
        version: MANIFEST_VERSION,
        d_t: config.d_t,
        d_a: config.d_a,
        layer_sum_count: None,
        utterances: records
            .iter()
            .map(|(rec, split)| ManifestEntry {
                id: rec.id.clone(),
                file: PathBuf::from(format!("{}.mmeb", rec.id)),
                label: rec.label,
                split: *split,
            })
            .collect(),
    }
}

/// The dataset [`write_synthetic`] would produce, held in memory.
pub fn synthetic_dataset(config: &SynthConfig) -> Result<Dataset> {
    let records = generate(config)?;
    let manifest = manifest_for(config, &records);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (rec, split) in records {
        match split {
            Split::Train => train.push(rec),
            Split::Test => test.push(rec),
        }
    }
    Ok(Dataset {
        manifest,
        train,
        test,
    })
}

/// Writes one `.mmeb` file per record plus `manifest.json` into `dir`.
pub fn write_synthetic(config: &SynthConfig, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let records = generate(config)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = manifest_for(config, &records);
    for ((rec, _), entry) in records.iter().zip(&manifest.utterances) {
        write_record(rec, dir.join(&entry.file))?;
    }
    let path = dir.join("manifest.json");
    manifest.write(&path)?;
    Ok(path)
}
