//! Character-level transformer backbone, adapter-aware forward/backward,
//! optimizer, evaluation and sampling.

mod backbone;
mod config;
mod loss;
mod optim;
mod pretrain;
mod transformer;

pub use backbone::{checksum_of, Backbone};
pub use config::ModelConfig;
pub use loss::{cross_entropy, generate, perplexity, softmax_rows, token_nll};
pub use optim::{AdamW, AdamWConfig};
pub use pretrain::{pretrain_backbone, PretrainOptions, PretrainReport};
pub use transformer::{ForwardCache, ForwardOutput, GradRequest, Gradients, Transformer};

use crate::error::{Error, Result};

/// Next-token prediction pairs; `targets[s][t] == inputs[s][t + 1]` for every
/// position both sequences share.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainBatch {
    pub inputs: Vec<Vec<u32>>,
    pub targets: Vec<Vec<u32>>,
}

impl TrainBatch {
    /// Splits each sample into inputs `s[..n-1]` and targets `s[1..]`, keeping
    /// at most `context_len` positions.
    pub fn from_samples<S: AsRef<[u32]>>(samples: &[S], context_len: usize) -> Result<Self> {
        let mut inputs = Vec::with_capacity(samples.len());
        let mut targets = Vec::with_capacity(samples.len());
        for s in samples {
            let s = s.as_ref();
            if s.len() < 2 {
                return Err(Error::Domain(format!(
                    "sample of length {} has no prediction target",
                    s.len()
                )));
            }
            let n = (s.len() - 1).min(context_len);
            inputs.push(s[..n].to_vec());
            targets.push(s[1..=n].to_vec());
        }
        if inputs.is_empty() {
            return Err(Error::Domain("empty batch".into()));
        }
        Ok(TrainBatch { inputs, targets })
    }

    pub fn n_tokens(&self) -> usize {
        self.targets.iter().map(Vec::len).sum()
    }

    pub fn flat_targets(&self) -> Vec<u32> {
        self.targets.iter().flatten().copied().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_shifts_by_one() {
        let b = TrainBatch::from_samples(&[vec![1u32, 2, 3, 4]], 8).unwrap();
        assert_eq!(b.inputs, vec![vec![1, 2, 3]]);
        assert_eq!(b.targets, vec![vec![2, 3, 4]]);
        for (i, t) in b.inputs.iter().zip(&b.targets) {
            assert_eq!(&i[1..], &t[..t.len() - 1]);
        }
    }

    #[test]
    fn batch_truncates_to_context() {
        let b = TrainBatch::from_samples(&[(0u32..10).collect::<Vec<_>>()], 4).unwrap();
        assert_eq!(b.inputs[0], vec![0, 1, 2, 3]);
        assert_eq!(b.targets[0], vec![1, 2, 3, 4]);
    }

    #[test]
    fn batch_rejects_short_samples() {
        assert!(TrainBatch::from_samples(&[vec![1u32]], 4).is_err());
        assert!(TrainBatch::from_samples::<Vec<u32>>(&[], 4).is_err());
    }
}
