//! Central finite-difference verification of adapter gradients.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::linalg::{Matrix, Rng};
use crate::lora::{AdapterGrads, LoraAdapter, LoraConfig, LoraPair};
use crate::model::{cross_entropy, Backbone, GradRequest, ModelConfig, TrainBatch, Transformer};
use crate::params::ParamSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    pub model: ModelConfig,
    pub rank: usize,
    pub scaling: f64,
    /// Empty means every projection of the model.
    pub targets: Vec<String>,
    pub batch_size: usize,
    pub seq_len: usize,
    pub eps: f64,
    pub tolerance: f64,
    /// Gradients smaller than this are compared in absolute terms.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            model: ModelConfig {
                vocab_size: 13,
                dim: 8,
                n_layers: 2,
                n_heads: 2,
                context_len: 8,
                mlp_ratio: 2,
            },
            rank: 2,
            scaling: 2.0,
            targets: Vec::new(),
            batch_size: 2,
            seq_len: 6,
            eps: 1e-4,
            tolerance: 1e-4,
            abs_floor: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradCheckReport {
    /// Maximum relative error per adapted weight.
    pub per_layer: BTreeMap<String, f64>,
    pub max_rel_error: f64,
    pub entries_checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckConfig {
    /// Random small architecture: dim in {4, 6, 8, 12, 16}, 1–2 layers,
    /// heads dividing dim, rank 1–2.
    pub fn random_small(rng: &mut Rng) -> Self {
        let mut cfg = GradCheckConfig::default();
        let dim = [4, 6, 8, 12, 16][rng.below(5)];
        let heads: Vec<usize> = [1, 2, 4].into_iter().filter(|h| dim % h == 0).collect();
        cfg.model.dim = dim;
        cfg.model.n_heads = heads[rng.below(heads.len())];
        cfg.model.n_layers = 1 + rng.below(2);
        cfg.model.mlp_ratio = 1 + rng.below(2);
        cfg.rank = 1 + rng.below(2);
        cfg.seq_len = 3 + rng.below(cfg.model.context_len - 2);
        cfg.seed = rng.next_u64();
        cfg
    }
}

/// Relative error with an absolute floor on the denominator.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Random backbone, adapter with both factors nonzero, and batch.
pub fn fixture(cfg: &GradCheckConfig) -> Result<(Backbone<f64>, LoraAdapter<f64>, TrainBatch)> {
    let mut rng = Rng::seed_from(cfg.seed);
    let mut backbone = Backbone::<f64>::init(&cfg.model, &mut rng)?.into_weights();
    // larger weights make attention and norms far from their trivial regime
    for (_, m) in backbone.tensors_mut() {
        for x in m.as_mut_slice() {
            *x += 0.15 * rng.normal();
        }
    }
    let backbone = Backbone::from_weights(cfg.model.clone(), backbone)?;
    let shapes = cfg.model.projection_shapes();
    let targets = if cfg.targets.is_empty() {
        shapes.keys().cloned().collect()
    } else {
        cfg.targets.clone()
    };
    let lcfg = LoraConfig {
        rank: cfg.rank,
        scaling: cfg.scaling,
        target_layers: targets,
    };
    lcfg.validate(&shapes)?;
    let mut adapter = LoraAdapter::empty(lcfg.clone());
    for id in &lcfg.target_layers {
        let (out, inp) = shapes[id];
        adapter.pairs.insert(
            id.clone(),
            LoraPair {
                down: Matrix::gaussian_init(&mut rng, cfg.rank, inp, 0.2),
                up: Matrix::gaussian_init(&mut rng, out, cfg.rank, 0.2),
            },
        );
    }
    let samples: Vec<Vec<u32>> = (0..cfg.batch_size)
        .map(|_| {
            (0..=cfg.seq_len)
                .map(|_| rng.below(cfg.model.vocab_size) as u32)
                .collect()
        })
        .collect();
    let batch = TrainBatch::from_samples(&samples, cfg.model.context_len)?;
    Ok((backbone, adapter, batch))
}

/// Compares `analytic` against central differences of the mean loss for
/// every adapter entry.
pub fn check_gradients<F>(cfg: &GradCheckConfig, analytic: F) -> Result<GradCheckReport>
where
    F: Fn(&Transformer<'_, f64>, &LoraAdapter<f64>, &TrainBatch) -> Result<AdapterGrads<f64>>,
{
    let (backbone, adapter, batch) = fixture(cfg)?;
    let model = backbone.model();
    let grads = analytic(&model, &adapter, &batch)?;
    let targets = batch.flat_targets();
    let loss_at =
        |a: &LoraAdapter<f64>| -> Result<f64> { cross_entropy(&model.forward(Some(a), &batch)?.logits, &targets) };

    let mut per_layer: BTreeMap<String, f64> = BTreeMap::new();
    let mut entries = 0;
    let mut probe = adapter.clone();
    for (layer, pair) in &adapter.pairs {
        let gpair = &grads.pairs[layer];
        for (which, base, g) in [("down", &pair.down, &gpair.down), ("up", &pair.up, &gpair.up)] {
            for idx in 0..base.len() {
                let orig = base.as_slice()[idx];
                let set = |probe: &mut LoraAdapter<f64>, v: f64| {
                    let p = probe.pairs.get_mut(layer).expect("same layout");
                    let m = if which == "down" { &mut p.down } else { &mut p.up };
                    m.as_mut_slice()[idx] = v;
                };
                set(&mut probe, orig + cfg.eps);
                let plus = loss_at(&probe)?;
                set(&mut probe, orig - cfg.eps);
                let minus = loss_at(&probe)?;
                set(&mut probe, orig);
                let numeric = (plus - minus) / (2.0 * cfg.eps);
                let err = relative_error(g.as_slice()[idx], numeric, cfg.abs_floor);
                let slot = per_layer.entry(layer.clone()).or_insert(0.0);
                *slot = slot.max(err);
                entries += 1;
            }
        }
    }
    let max_rel_error = per_layer.values().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_rel_error < cfg.tolerance,
        per_layer,
        max_rel_error,
        entries_checked: entries,
        tolerance: cfg.tolerance,
    })
}

/// Finite-difference check of the model's own backward pass.
pub fn gradcheck(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    check_gradients(cfg, |model, adapter, batch| {
        let out = model.forward(Some(adapter), batch)?;
        let g = model.backward(&out, batch, Some(adapter), &GradRequest::adapter_only())?;
        Ok(g.adapter.expect("adapter gradients requested"))
    })
}
