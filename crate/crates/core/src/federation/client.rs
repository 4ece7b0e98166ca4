//! Client side: local training on private data.

use log::warn;

use crate::data::ClientDataset;
use crate::error::Result;
use crate::federation::{FederationConfig, Params, Strategy};
use crate::linalg::Rng;
use crate::lora::LoraAdapter;
use crate::metrics::comm_cost;
use crate::model::{cross_entropy, AdamW, AdamWConfig, Backbone, GradRequest, TrainBatch, Transformer};
use crate::params::{ParamSet, WeightSet};
use crate::scalar::Scalar;

/// What a client sends back after local training. The server sees nothing
/// else from the client.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdateResult<T> {
    pub client_id: usize,
    pub params: Params<T>,
    pub n_k: usize,
    /// Mean training loss of each local epoch.
    pub loss_trace: Vec<f64>,
    pub steps: usize,
    pub uplink_params: u64,
    pub uplink_bytes: u64,
}

/// Pull towards an anchor: adds `λ (v − anchor)` to the gradient.
#[derive(Clone, Copy)]
pub struct Proximal<'a, T> {
    pub anchor: &'a Params<T>,
    pub lambda: f64,
}

#[derive(Clone, Debug)]
pub struct LocalTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
}

#[derive(Clone, Debug)]
pub struct LocalOutcome<T> {
    pub params: Params<T>,
    pub loss_trace: Vec<f64>,
    pub steps: usize,
}

/// Loss and gradient of the local objective for one batch. `Weights`
/// parameters must be a complete backbone weight set.
pub fn objective_gradient<T: Scalar>(
    backbone: &Backbone<T>,
    params: &Params<T>,
    batch: &TrainBatch,
    prox: Option<Proximal<'_, T>>,
) -> Result<(f64, Params<T>)> {
    let config = backbone.config();
    let targets = batch.flat_targets();
    let (loss, mut grads) = match params {
        Params::Adapter(a) => {
            let model = backbone.model();
            let out = model.forward(Some(a), batch)?;
            let loss = cross_entropy(&out.logits, &targets)?.as_f64();
            let g = model.backward(&out, batch, Some(a), &GradRequest::adapter_only())?;
            (loss, Params::Adapter(g.adapter.expect("adapter gradients requested")))
        }
        Params::Weights(w) => {
            let model = Transformer::new(config, w);
            let out = model.forward(None, batch)?;
            let loss = cross_entropy(&out.logits, &targets)?.as_f64();
            let g = model.backward(&out, batch, None, &GradRequest::weights(w.names().map(str::to_string)))?;
            (loss, Params::Weights(g.weights))
        }
    };
    if let Some(p) = prox {
        if p.lambda != 0.0 {
            let lambda = T::lit(p.lambda);
            grads.axpy(lambda, params)?;
            grads.axpy(-lambda, p.anchor)?;
        }
    }
    Ok((loss, grads))
}

/// `epochs` passes of shuffled mini-batch AdamW, starting from `start` with
/// fresh optimizer state.
pub fn train_local<T: Scalar>(
    backbone: &Backbone<T>,
    start: Params<T>,
    samples: &[Vec<u32>],
    opts: &LocalTraining,
    prox: Option<Proximal<'_, T>>,
    rng: &mut Rng,
) -> Result<LocalOutcome<T>> {
    let mut params = start;
    let mut opt = AdamW::new(opts.optimizer);
    let mut loss_trace = Vec::with_capacity(opts.epochs);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let bs = opts.batch_size.max(1);
    for _ in 0..opts.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(bs) {
            let picked: Vec<&[u32]> = chunk.iter().map(|&i| samples[i].as_slice()).collect();
            let batch = TrainBatch::from_samples(&picked, backbone.config().context_len)?;
            let (loss, grads) = objective_gradient(backbone, &params, &batch, prox)?;
            opt.step(&mut params, &grads)?;
            epoch_loss += loss;
            batches += 1;
        }
        loss_trace.push(if batches == 0 {
            f64::NAN
        } else {
            epoch_loss / batches as f64
        });
    }
    Ok(LocalOutcome {
        params,
        loss_trace,
        steps: opt.steps() as usize,
    })
}

fn full_weights<T: Scalar>(backbone: &Backbone<T>, overrides: &[&Params<T>]) -> Result<WeightSet<T>> {
    let mut w = backbone.weights().clone();
    for p in overrides {
        if let Params::Weights(o) = p {
            w.overwrite_from(o)?;
        }
    }
    Ok(w)
}

/// One client's turn in a round.
///
/// `personal` is the client's private state between rounds (its own
/// adapter, personal layers or personalized model, depending on strategy).
/// Returns `None` when the client has no training data.
pub fn client_update<T: Scalar>(
    client: &ClientDataset,
    backbone: &Backbone<T>,
    global: &Params<T>,
    personal: &mut Option<Params<T>>,
    config: &FederationConfig,
    round: usize,
) -> Result<Option<ClientUpdateResult<T>>> {
    if client.train.is_empty() {
        warn!(
            "round {round}: client {} has no training data, skipped",
            client.client_id
        );
        return Ok(None);
    }
    let opts = LocalTraining {
        epochs: config.local_epochs,
        batch_size: config.batch_size,
        optimizer: config.optimizer(),
    };
    let ids = [round as u64, client.client_id as u64];
    let mut rng = Rng::substream(config.seed, "client", &ids);
    let model_config = backbone.config();

    let (outcome, upload) = match config.strategy {
        Strategy::FedGenEdge | Strategy::FedAvgFull | Strategy::CentralizedLora | Strategy::CentralizedFull => {
            let out = train_local(backbone, global.clone(), &client.train, &opts, None, &mut rng)?;
            let upload = if config.strategy.aggregates() {
                out.params.param_count() as u64
            } else {
                0
            };
            (out, upload)
        }
        Strategy::LocalOnly => {
            let start = personal.take().unwrap_or_else(|| global.clone());
            let out = train_local(backbone, start, &client.train, &opts, None, &mut rng)?;
            *personal = Some(out.params.clone());
            (out, 0)
        }
        Strategy::FedPer => {
            let start = full_weights(
                backbone,
                &[
                    global,
                    &*personal.get_or_insert_with(|| Params::Weights(WeightSet::new())),
                ],
            )?;
            let out = train_local(backbone, Params::Weights(start), &client.train, &opts, None, &mut rng)?;
            let Params::Weights(trained) = &out.params else {
                unreachable!("weight training returns weights")
            };
            let shared = trained.filter(|n| !model_config.is_personal_layer(n));
            *personal = Some(Params::Weights(trained.filter(|n| model_config.is_personal_layer(n))));
            let upload = shared.param_count() as u64;
            (
                LocalOutcome {
                    params: Params::Weights(shared),
                    ..out
                },
                upload,
            )
        }
        Strategy::Ditto => {
            let out = train_local(backbone, global.clone(), &client.train, &opts, None, &mut rng)?;
            let mut personal_rng = Rng::substream(config.seed, "ditto-personal", &ids);
            let start = personal.take().unwrap_or_else(|| global.clone());
            let prox = Proximal {
                anchor: global,
                lambda: config.strategy_params.ditto_lambda,
            };
            let own = train_local(backbone, start, &client.train, &opts, Some(prox), &mut personal_rng)?;
            *personal = Some(own.params);
            let upload = out.params.param_count() as u64;
            (out, upload)
        }
    };
    Ok(Some(ClientUpdateResult {
        client_id: client.client_id,
        params: outcome.params,
        n_k: client.n_k(),
        loss_trace: outcome.loss_trace,
        steps: outcome.steps,
        uplink_params: upload,
        uplink_bytes: comm_cost(upload) / 8,
    }))
}

/// One further local epoch from the final global adapter, with fresh
/// optimizer state. The global adapter itself is left untouched.
pub fn personalize<T: Scalar>(
    client: &ClientDataset,
    backbone: &Backbone<T>,
    global: &LoraAdapter<T>,
    config: &FederationConfig,
) -> Result<LoraAdapter<T>> {
    if client.train.is_empty() {
        return Ok(global.clone());
    }
    let opts = LocalTraining {
        epochs: 1,
        batch_size: config.batch_size,
        optimizer: config.optimizer(),
    };
    let mut rng = Rng::substream(config.seed, "personalize", &[client.client_id as u64]);
    let out = train_local(
        backbone,
        Params::Adapter(global.clone()),
        &client.train,
        &opts,
        None,
        &mut rng,
    )?;
    match out.params {
        Params::Adapter(a) => Ok(a),
        Params::Weights(_) => unreachable!("adapter training returns an adapter"),
    }
}
