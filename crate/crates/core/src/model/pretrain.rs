use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Rng;
use crate::model::{cross_entropy, AdamW, AdamWConfig, Backbone, GradRequest, ModelConfig, TrainBatch, Transformer};
use crate::params::ParamSet;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        PretrainOptions {
            steps: 150,
            batch_size: 16,
            lr: 3e-3,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct PretrainReport {
    /// Training loss of every step's batch, measured before the update.
    pub losses: Vec<f64>,
}

/// Full-parameter training from a random init, then freezing.
pub fn pretrain_backbone<T: Scalar, S: AsRef<[u32]>>(
    config: &ModelConfig,
    samples: &[S],
    opts: &PretrainOptions,
    rng: &mut Rng,
) -> Result<(Backbone<T>, PretrainReport)> {
    if samples.is_empty() {
        return Err(Error::Domain("pretraining corpus is empty".into()));
    }
    let init = Backbone::<T>::init(config, rng)?;
    let mut weights = init.into_weights();
    let request = GradRequest::weights(weights.names().map(str::to_string));
    let mut opt = AdamW::new(AdamWConfig {
        lr: opts.lr,
        weight_decay: 0.0,
        ..AdamWConfig::default()
    });
    let mut report = PretrainReport::default();
    let bs = opts.batch_size.clamp(1, samples.len());
    for _ in 0..opts.steps {
        let picked: Vec<&[u32]> = rng
            .sample_distinct(samples.len(), bs)
            .into_iter()
            .map(|i| samples[i].as_ref())
            .collect();
        let batch = TrainBatch::from_samples(&picked, config.context_len)?;
        let model = Transformer::new(config, &weights);
        let out = model.forward(None, &batch)?;
        report
            .losses
            .push(cross_entropy(&out.logits, &batch.flat_targets())?.as_f64());
        let grads = model.backward(&out, &batch, None, &request)?;
        opt.step(&mut weights, &grads.weights)?;
    }
    if !weights.is_finite() {
        return Err(Error::Domain("pretraining diverged".into()));
    }
    Ok((Backbone::from_weights(config.clone(), weights)?, report))
}
