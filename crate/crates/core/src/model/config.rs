use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the character-level transformer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
    /// Hidden width of the MLP as a multiple of `dim`.
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
}

fn default_mlp_ratio() -> usize {
    4
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 28,
            dim: 64,
            n_layers: 2,
            n_heads: 2,
            context_len: 64,
            mlp_ratio: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.vocab_size == 0 || self.vocab_size > 128 {
            problems.push(format!("model.vocab_size must be in 1..=128, got {}", self.vocab_size));
        }
        if self.dim == 0 {
            problems.push("model.dim must be positive".into());
        }
        if self.n_layers == 0 {
            problems.push("model.n_layers must be positive".into());
        }
        if self.n_heads == 0 || (self.dim > 0 && self.dim % self.n_heads != 0) {
            problems.push(format!(
                "model.n_heads ({}) must be positive and divide model.dim ({})",
                self.n_heads, self.dim
            ));
        }
        if self.context_len == 0 {
            problems.push("model.context_len must be positive".into());
        }
        if self.mlp_ratio == 0 {
            problems.push("model.mlp_ratio must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.n_heads
    }

    pub fn hidden(&self) -> usize {
        self.dim * self.mlp_ratio
    }

    /// Every weight with its `(rows, cols)` shape. Projections are stored
    /// `out × in`; vectors are `1 × n`.
    pub fn weight_shapes(&self) -> BTreeMap<String, (usize, usize)> {
        let (d, h, v) = (self.dim, self.hidden(), self.vocab_size);
        let mut s = BTreeMap::new();
        s.insert("tok_emb".to_string(), (v, d));
        s.insert("pos_emb".to_string(), (self.context_len, d));
        for l in 0..self.n_layers {
            let p = |n: &str| format!("blocks.{l}.{n}");
            for ln in ["ln1", "ln2"] {
                s.insert(p(&format!("{ln}.gain")), (1, d));
                s.insert(p(&format!("{ln}.bias")), (1, d));
            }
            for w in ["wq", "wk", "wv", "wo"] {
                s.insert(p(&format!("attn.{w}")), (d, d));
            }
            s.insert(p("mlp.w1"), (h, d));
            s.insert(p("mlp.b1"), (1, h));
            s.insert(p("mlp.w2"), (d, h));
            s.insert(p("mlp.b2"), (1, d));
        }
        s.insert("ln_f.gain".to_string(), (1, d));
        s.insert("ln_f.bias".to_string(), (1, d));
        s.insert("head.w".to_string(), (v, d));
        s
    }

    /// Linear projections that may carry an adapter.
    pub fn projection_shapes(&self) -> BTreeMap<String, (usize, usize)> {
        self.weight_shapes()
            .into_iter()
            .filter(|(k, _)| k.contains(".attn.w") || k.ends_with("mlp.w1") || k.ends_with("mlp.w2") || k == "head.w")
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.weight_shapes().values().map(|(r, c)| r * c).sum()
    }

    /// Weights held privately by each client under the personalization-layer
    /// baseline: the last block and the output head.
    pub fn is_personal_layer(&self, name: &str) -> bool {
        let last = format!("blocks.{}.", self.n_layers - 1);
        name.starts_with(&last) || name.starts_with("ln_f.") || name.starts_with("head.")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_counts_add_up() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        let d = 64;
        let per_block = 4 * d + 4 * d * d + 2 * 4 * d * d + 4 * d + d;
        let expected = 28 * d + 64 * d + 2 * per_block + 2 * d + 28 * d;
        assert_eq!(c.param_count(), expected);
        assert_eq!(c.projection_shapes().len(), 2 * 6 + 1);
    }

    #[test]
    fn validation_lists_every_problem() {
        let c = ModelConfig {
            vocab_size: 0,
            dim: 10,
            n_layers: 0,
            n_heads: 3,
            context_len: 8,
            mlp_ratio: 4,
        };
        match c.validate() {
            Err(Error::Config(p)) => assert_eq!(p.len(), 3, "{p:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn personal_layers_are_last_block_and_head() {
        let c = ModelConfig::default();
        assert!(c.is_personal_layer("blocks.1.attn.wq"));
        assert!(c.is_personal_layer("head.w"));
        assert!(!c.is_personal_layer("blocks.0.attn.wq"));
        assert!(!c.is_personal_layer("tok_emb"));
    }
}
