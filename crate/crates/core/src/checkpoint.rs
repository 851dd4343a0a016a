//! `MMCK` parameter checkpoints.
//!
//! Layout (little-endian): magic `MMCK`, version `u16`, the 32-byte SHA-256
//! digest of the model configuration, then one blob per parameter until end
//! of file: name length `u16`, UTF-8 name, rank `u8`, `rank` dims as `u32`,
//! and the values as `f64`.

use std::path::Path;

use crate::codec::{len_u32, put_f64s, put_u16, put_u32, Reader};
use crate::error::{Error, FormatError, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::nn::Parameters;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MMCK";
pub const VERSION: u16 = 1;

/// A decoded checkpoint before it is matched against a model layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub digest: [u8; 32],
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_params(params: &ModelParams) -> Self {
        Self {
            digest: params.config.digest(),
            tensors: params
                .named()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect(),
        }
    }

    pub fn encode(&self) -> std::result::Result<Vec<u8>, FormatError> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u16(&mut out, VERSION);
        out.extend_from_slice(&self.digest);
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len()).map_err(|_| FormatError::Malformed {
                field: "name length",
                detail: format!("{} bytes", name.len()),
            })?;
            put_u16(&mut out, len);
            out.extend_from_slice(name.as_bytes());
            let rank = u8::try_from(t.rank()).map_err(|_| FormatError::Malformed {
                field: "rank",
                detail: t.rank().to_string(),
            })?;
            out.push(rank);
            for &d in t.shape() {
                put_u32(&mut out, len_u32(d, "dim")?);
            }
            put_f64s(&mut out, t.data());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, FormatError> {
        let mut r = Reader::new(bytes);
        r.magic(MAGIC)?;
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        let digest: [u8; 32] = r.take(32, "digest")?.try_into().expect("32 bytes");
        let mut tensors = Vec::new();
        while r.remaining() > 0 {
            let len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|e| FormatError::Malformed {
                    field: "name",
                    detail: e.to_string(),
                })?
                .to_string();
            let rank = r.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dim")? as usize);
            }
            let count = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or(FormatError::Truncated("values"))?;
            let values = r.f64s(count, "values")?;
            tensors.push((name, Tensor::from_parts(shape, values)));
        }
        r.finish()?;
        Ok(Self { digest, tensors })
    }

    /// `(text width, pooled audio width)` read from the projection weights.
    pub fn input_widths(&self) -> Option<(usize, usize)> {
        let cols = |name: &str| {
            self.tensors
                .iter()
                .find(|(n, t)| n == name && t.rank() == 2)
                .map(|(_, t)| t.shape()[1])
        };
        Some((cols("proj.text.w")?, cols("proj.audio.w")?))
    }

    /// Builds parameters for `config`, requiring the digest, names and shapes
    /// to match exactly.
    pub fn into_params(self, config: &ModelConfig) -> Result<ModelParams> {
        let expected = config.digest();
        if self.digest != expected {
            return Err(Error::CheckpointMismatch {
                expected: hex::encode(expected),
                found: hex::encode(self.digest),
            });
        }
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut params = ModelParams::init(config, &mut rng)?;
        let layout: Vec<(String, Vec<usize>)> = params
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        let found: Vec<(String, Vec<usize>)> = self
            .tensors
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect();
        if layout != found {
            return Err(Error::CheckpointMismatch {
                expected: describe(&layout),
                found: describe(&found),
            });
        }
        for (dst, (_, src)) in params.tensors_mut().into_iter().zip(self.tensors) {
            *dst = src;
        }
        Ok(params)
    }
}

fn describe(layout: &[(String, Vec<usize>)]) -> String {
    layout
        .iter()
        .map(|(n, s)| format!("{n}{s:?}"))
        .collect::<Vec<_>>()
        .join(", ")
}

pub fn save(params: &ModelParams, path: &Path) -> Result<()> {
    let bytes = Checkpoint::from_params(params)
        .encode()
        .map_err(|e| Error::format(path, e))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path, config: &ModelConfig) -> Result<ModelParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes)
        .map_err(|e| Error::format(path, e))?
        .into_params(config)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::fusion::FusionKind;
    use crate::pooling::Pooling;

    fn config(fusion: FusionKind, pooling: Pooling) -> ModelConfig {
        ModelConfig {
            asp_hidden: 3,
            proj_dim: 4,
            at_hidden: 2,
            mfb_factor: 2,
            mine_hidden: 3,
            fusion,
            pooling,
            ..ModelConfig::new(5, 3)
        }
    }

    #[test]
    fn header_layout() {
        let cfg = config(FusionKind::Concat, Pooling::Mean);
        let p = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let bytes = Checkpoint::from_params(&p).encode().unwrap();
        assert_eq!(&bytes[..4], b"MMCK");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), VERSION);
        assert_eq!(&bytes[6..38], &cfg.digest());
        let name_len = u16::from_le_bytes([bytes[38], bytes[39]]) as usize;
        assert_eq!(&bytes[40..40 + name_len], b"proj.audio.w");
        assert_eq!(bytes[40 + name_len], 2);
        let ck = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(ck.input_widths(), Some((5, 3)));
        let values: usize = p.named().iter().map(|(_, t)| t.len()).sum();
        let names: usize = p
            .named()
            .iter()
            .map(|(n, t)| 2 + n.len() + 1 + 4 * t.rank())
            .sum();
        assert_eq!(bytes.len(), 38 + names + 8 * values);
    }

    #[test]
    fn file_round_trip_is_exact_for_every_variant() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for fusion in FusionKind::ALL {
            for pooling in Pooling::ALL {
                let cfg = config(fusion, pooling);
                let p = ModelParams::init(&cfg, &mut rng).unwrap();
                let path = dir.path().join("m.mmck");
                save(&p, &path).unwrap();
                let q = load(&path, &cfg).unwrap();
                assert_eq!(p, q);
                let again = Checkpoint::from_params(&q).encode().unwrap();
                assert_eq!(std::fs::read(&path).unwrap(), again);
            }
        }
    }

    #[test]
    fn digest_mismatch_is_reported() {
        let cfg = config(FusionKind::At, Pooling::Asp);
        let p = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let ck = Checkpoint::from_params(&p);
        let other = config(FusionKind::Gmu, Pooling::Asp);
        let err = ck.clone().into_params(&other).unwrap_err();
        assert!(matches!(err, Error::CheckpointMismatch { .. }));
        assert_eq!(err.kind(), crate::error::ErrorKind::Checkpoint);

        let mut wrong_layout = ck;
        wrong_layout.tensors.pop();
        assert!(matches!(
            wrong_layout.into_params(&cfg),
            Err(Error::CheckpointMismatch { .. })
        ));
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let cfg = config(FusionKind::Concat, Pooling::Mean);
        let p = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let bytes = Checkpoint::from_params(&p).encode().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(Checkpoint::decode(&bad).unwrap_err().code(), "bad-magic");
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert_eq!(
            Checkpoint::decode(&bad).unwrap_err().code(),
            "version-mismatch"
        );
        let cut = &bytes[..bytes.len() - 3];
        assert_eq!(Checkpoint::decode(cut).unwrap_err().code(), "truncated");
        assert_eq!(
            Checkpoint::decode(&bytes[..20]).unwrap_err().code(),
            "truncated"
        );
    }

    proptest! {
        #[test]
        fn arbitrary_tensors_round_trip_bit_exact(
            blobs in prop::collection::vec(
                ("[a-z.]{1,12}", prop::collection::vec(0usize..4, 0..4), any::<u64>()),
                0..5,
            ),
            digest in prop::array::uniform32(any::<u8>()),
        ) {
            let tensors: Vec<(String, Tensor)> = blobs
                .into_iter()
                .map(|(name, shape, bits)| {
                    let n: usize = shape.iter().product();
                    let data = (0..n as u64).map(|i| f64::from_bits(bits.wrapping_add(i))).collect();
                    (name, Tensor::from_parts(shape, data))
                })
                .collect();
            let ck = Checkpoint { digest, tensors };
            let decoded = Checkpoint::decode(&ck.encode().unwrap()).unwrap();
            prop_assert_eq!(decoded.digest, ck.digest);
            prop_assert_eq!(decoded.tensors.len(), ck.tensors.len());
            for ((na, a), (nb, b)) in decoded.tensors.iter().zip(&ck.tensors) {
                prop_assert_eq!(na, nb);
                prop_assert_eq!(a.shape(), b.shape());
                let ba: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
                let bb: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(ba, bb);
            }
        }
    }
}
