use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Rng};
use crate::model::{ModelConfig, Transformer};
use crate::params::WeightSet;
use crate::scalar::Scalar;

const INIT_STD: f64 = 0.02;
const CHECKPOINT_MAGIC: &[u8; 4] = b"FGBB";
const CHECKPOINT_VERSION: u16 = 1;

/// SHA-256 over every weight's name, shape and little-endian bytes.
pub fn checksum_of<T: Scalar>(weights: &WeightSet<T>) -> String {
    let mut h = Sha256::new();
    let mut buf = Vec::new();
    for (name, m) in weights.iter() {
        h.update((name.len() as u32).to_le_bytes());
        h.update(name.as_bytes());
        h.update((m.rows() as u32).to_le_bytes());
        h.update((m.cols() as u32).to_le_bytes());
        buf.clear();
        for &v in m.as_slice() {
            v.write_le(&mut buf);
        }
        h.update(&buf);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Frozen transformer weights with the checksum recorded at freeze time.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<T> {
    config: ModelConfig,
    weights: WeightSet<T>,
    frozen_checksum: String,
}

impl<T: Scalar> Backbone<T> {
    /// Random initialization: projections and embeddings N(0, 0.02²), norm
    /// gains one, biases zero.
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut weights = WeightSet::new();
        for (name, (r, c)) in config.weight_shapes() {
            let m = if name.ends_with(".gain") {
                Matrix::filled(r, c, T::one())
            } else if name.ends_with(".bias") || name.ends_with(".b1") || name.ends_with(".b2") {
                Matrix::zeros(r, c)
            } else {
                Matrix::gaussian_init(rng, r, c, INIT_STD)
            };
            weights.insert(name, m);
        }
        Self::from_weights(config.clone(), weights)
    }

    /// Validates shapes against `config` and freezes.
    pub fn from_weights(config: ModelConfig, weights: WeightSet<T>) -> Result<Self> {
        config.validate()?;
        let expected = config.weight_shapes();
        let actual = weights.shapes();
        if expected != actual {
            let diff: Vec<String> = expected
                .iter()
                .filter(|(k, v)| actual.get(*k) != Some(v))
                .map(|(k, v)| format!("`{k}` expected {v:?}, found {:?}", actual.get(k)))
                .chain(
                    actual
                        .keys()
                        .filter(|k| !expected.contains_key(*k))
                        .map(|k| format!("unexpected weight `{k}`")),
                )
                .collect();
            return Err(Error::Config(diff));
        }
        if weights.iter().any(|(_, m)| !m.is_finite()) {
            return Err(Error::Domain("backbone weights must be finite".into()));
        }
        let frozen_checksum = checksum_of(&weights);
        Ok(Backbone {
            config,
            weights,
            frozen_checksum,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &WeightSet<T> {
        &self.weights
    }

    pub fn into_weights(self) -> WeightSet<T> {
        self.weights
    }

    pub fn model(&self) -> Transformer<'_, T> {
        Transformer::new(&self.config, &self.weights)
    }

    pub fn frozen_checksum(&self) -> &str {
        &self.frozen_checksum
    }

    /// Recomputes the checksum from the current weights.
    pub fn current_checksum(&self) -> String {
        checksum_of(&self.weights)
    }

    pub fn param_count(&self) -> usize {
        self.config.param_count()
    }

    /// Layout: `FGBB`, u16 version, u8-prefixed scalar tag, u32-prefixed
    /// JSON model config, u32 tensor count, then per tensor (u16 name
    /// length, name, u32 rows, u32 cols, values), then the 64-char hex
    /// checksum.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(CHECKPOINT_MAGIC);
        b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        b.push(T::TAG.len() as u8);
        b.extend_from_slice(T::TAG.as_bytes());
        let cfg = serde_json::to_vec(&self.config).expect("config serializes");
        b.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        b.extend_from_slice(&cfg);
        b.extend_from_slice(&(self.weights.len() as u32).to_le_bytes());
        for (name, m) in self.weights.iter() {
            b.extend_from_slice(&(name.len() as u16).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            b.extend_from_slice(&(m.rows() as u32).to_le_bytes());
            b.extend_from_slice(&(m.cols() as u32).to_le_bytes());
            for &v in m.as_slice() {
                v.write_le(&mut b);
            }
        }
        b.extend_from_slice(self.frozen_checksum.as_bytes());
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |d: &str| Error::format("backbone checkpoint", d.to_string());
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            if pos + n > bytes.len() {
                return Err(bad("truncated"));
            }
            let s = &bytes[pos..pos + n];
            pos += n;
            Ok(s)
        };
        if take(4)? != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u16::from_le_bytes(take(2)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let tag_len = take(1)?[0] as usize;
        let tag = take(tag_len)?;
        if tag != T::TAG.as_bytes() {
            return Err(bad(&format!(
                "checkpoint holds {} values, expected {}",
                String::from_utf8_lossy(tag),
                T::TAG
            )));
        }
        let cfg_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let config: ModelConfig = serde_json::from_slice(take(cfg_len)?).map_err(|e| bad(&e.to_string()))?;
        let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut weights = WeightSet::new();
        for _ in 0..count {
            let nl = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(nl)?.to_vec()).map_err(|e| bad(&e.to_string()))?;
            let rows = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let cols = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let raw = take(rows * cols * T::BYTES)?;
            let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
            weights.insert(name, Matrix::from_vec(rows, cols, data)?);
        }
        let stored = String::from_utf8(take(64)?.to_vec()).map_err(|e| bad(&e.to_string()))?;
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        let backbone = Self::from_weights(config, weights)?;
        if backbone.frozen_checksum != stored {
            return Err(bad("checksum mismatch"));
        }
        Ok(backbone)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            dim: 8,
            n_layers: 1,
            n_heads: 2,
            context_len: 6,
            mlp_ratio: 2,
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a: Backbone<f64> = Backbone::init(&tiny(), &mut Rng::seed_from(3)).unwrap();
        let b: Backbone<f64> = Backbone::init(&tiny(), &mut Rng::seed_from(3)).unwrap();
        let c: Backbone<f64> = Backbone::init(&tiny(), &mut Rng::seed_from(4)).unwrap();
        assert_eq!(a.frozen_checksum(), b.frozen_checksum());
        assert_ne!(a.frozen_checksum(), c.frozen_checksum());
        assert_eq!(a.frozen_checksum(), a.current_checksum());
    }

    #[test]
    fn checkpoint_round_trip() {
        let a: Backbone<f64> = Backbone::init(&tiny(), &mut Rng::seed_from(3)).unwrap();
        let bytes = a.to_bytes();
        let back = Backbone::<f64>::from_bytes(&bytes).unwrap();
        assert_eq!(back, a);
        assert_eq!(bytes, back.to_bytes());
        assert!(Backbone::<f32>::from_bytes(&bytes).is_err());
    }

    #[test]
    fn checkpoint_detects_tampering() {
        let a: Backbone<f64> = Backbone::init(&tiny(), &mut Rng::seed_from(3)).unwrap();
        let mut bytes = a.to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(Backbone::<f64>::from_bytes(&bytes).is_err());
    }

    #[test]
    fn from_weights_rejects_missing_tensor() {
        let a: Backbone<f64> = Backbone::init(&tiny(), &mut Rng::seed_from(3)).unwrap();
        let partial = a.weights().filter(|k| k != "head.w");
        match Backbone::from_weights(tiny(), partial) {
            Err(Error::Config(p)) => assert!(p[0].contains("head.w")),
            other => panic!("{other:?}"),
        }
    }
}
