//! The federated training protocol and its baselines.
//!
//! Each round the server picks `m` clients, every participant trains the
//! strategy's trainable set on its own data, and the server replaces the
//! global parameters with the sample-weighted mean of what came back.

mod client;
mod config;
pub mod server;

pub use client::{
    client_update, objective_gradient, personalize, train_local, ClientUpdateResult, LocalOutcome, LocalTraining,
    Proximal,
};
pub use config::{clients_per_round, FederationConfig, Strategy, StrategyParams};
pub use server::{aggregate, aggregation_weights, select_clients, ServerState};

use log::{debug, info};
use rayon::prelude::*;

use crate::data::{global_test, pooled_train, ClientDataset};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Rng};
use crate::lora::{init_adapter, LoraAdapter, LoraConfig};
use crate::metrics::{CommLedger, RoundRecord};
use crate::model::{checksum_of, perplexity, Backbone, Transformer};
use crate::params::{ParamSet, WeightSet};
use crate::scalar::Scalar;

pub const EVAL_BATCH: usize = 32;

/// Whatever a strategy trains and exchanges.
#[derive(Clone, Debug, PartialEq)]
pub enum Params<T> {
    Adapter(LoraAdapter<T>),
    /// Backbone weights, either all of them or a named subset.
    Weights(WeightSet<T>),
}

impl<T: Scalar> Params<T> {
    pub fn as_adapter(&self) -> Option<&LoraAdapter<T>> {
        match self {
            Params::Adapter(a) => Some(a),
            Params::Weights(_) => None,
        }
    }

    pub fn as_weights(&self) -> Option<&WeightSet<T>> {
        match self {
            Params::Weights(w) => Some(w),
            Params::Adapter(_) => None,
        }
    }
}

impl<T: Scalar> ParamSet<T> for Params<T> {
    fn tensors(&self) -> Vec<(String, &Matrix<T>)> {
        match self {
            Params::Adapter(a) => a.tensors(),
            Params::Weights(w) => w.tensors(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix<T>)> {
        match self {
            Params::Adapter(a) => a.tensors_mut(),
            Params::Weights(w) => w.tensors_mut(),
        }
    }
}

/// Perplexity of the backbone combined with `params` (an adapter or
/// replacement weights, applied in order).
pub fn evaluate<T: Scalar>(backbone: &Backbone<T>, params: &[&Params<T>], samples: &[Vec<u32>]) -> Result<f64> {
    let mut weights: Option<WeightSet<T>> = None;
    let mut adapter = None;
    for p in params {
        match p {
            Params::Adapter(a) => adapter = Some(a),
            Params::Weights(w) => weights
                .get_or_insert_with(|| backbone.weights().clone())
                .overwrite_from(w)?,
        }
    }
    match &weights {
        Some(w) => perplexity(&Transformer::new(backbone.config(), w), adapter, samples, EVAL_BATCH),
        None => perplexity(&backbone.model(), adapter, samples, EVAL_BATCH),
    }
}

/// Everything a finished run leaves behind.
#[derive(Clone, Debug)]
pub struct RunOutcome<T> {
    pub global: Params<T>,
    pub records: Vec<RoundRecord>,
    pub ledger: CommLedger,
    /// Per-client private state, indexed by client id.
    pub personal: Vec<Option<Params<T>>>,
    /// Checksum of the backbone weights the final global model runs on.
    pub final_checksum: String,
}

impl<T: Scalar> RunOutcome<T> {
    /// Complete weight set of the final global model.
    pub fn final_weights(&self, backbone: &Backbone<T>) -> Result<WeightSet<T>> {
        let mut w = backbone.weights().clone();
        if let Params::Weights(g) = &self.global {
            w.overwrite_from(g)?;
        }
        Ok(w)
    }
}

/// The starting global parameters for a strategy.
pub fn initial_global<T: Scalar>(
    backbone: &Backbone<T>,
    lora: &LoraConfig,
    config: &FederationConfig,
) -> Result<Params<T>> {
    let cfg = backbone.config();
    Ok(match config.strategy {
        s if s.uses_adapter() => {
            let mut rng = Rng::stream(config.seed, "adapter-init");
            Params::Adapter(init_adapter(lora, &cfg.weight_shapes(), &mut rng)?)
        }
        Strategy::FedPer => Params::Weights(backbone.weights().filter(|n| !cfg.is_personal_layer(n))),
        _ => Params::Weights(backbone.weights().clone()),
    })
}

fn check_clients(clients: &[ClientDataset], config: &FederationConfig) -> Result<()> {
    if clients.len() != config.n_clients {
        return Err(Error::config(format!(
            "federation.n_clients is {} but {} client datasets were given",
            config.n_clients,
            clients.len()
        )));
    }
    if let Some((i, c)) = clients.iter().enumerate().find(|(i, c)| c.client_id != *i) {
        return Err(Error::config(format!("client at position {i} has id {}", c.client_id)));
    }
    if clients.iter().all(|c| c.test.is_empty()) {
        return Err(Error::config("no client holds test data for evaluation"));
    }
    Ok(())
}

/// Mean over clients of each one's own model on its own test split.
fn mean_local_ppl<T: Scalar>(
    backbone: &Backbone<T>,
    clients: &[ClientDataset],
    model_of: impl Fn(usize) -> Vec<Params<T>>,
) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for c in clients.iter().filter(|c| !c.test.is_empty()) {
        let parts = model_of(c.client_id);
        let refs: Vec<&Params<T>> = parts.iter().collect();
        total += evaluate(backbone, &refs, &c.test)?;
        n += 1;
    }
    Ok(total / n as f64)
}

/// Runs `config.rounds` synchronous rounds and evaluates after each.
///
/// The reported perplexity is on the union of client test splits, except for
/// strategies without a single global model (LocalOnly, FedPer), which
/// report the mean over clients of each client's model on its own test
/// split.
pub fn run_training<T: Scalar>(
    clients: &[ClientDataset],
    backbone: &Backbone<T>,
    lora: &LoraConfig,
    config: &FederationConfig,
) -> Result<RunOutcome<T>> {
    config.validate()?;
    check_clients(clients, config)?;
    let strategy = config.strategy;
    let mut server = ServerState::new(initial_global(backbone, lora, config)?, config.seed);
    let mut personal: Vec<Option<Params<T>>> = vec![None; clients.len()];
    let test = global_test(clients);
    let m = config.clients_per_round();
    let pool = if config.parallel_clients > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(config.parallel_clients)
                .build()
                .map_err(|e| Error::config(format!("thread pool: {e}")))?,
        )
    } else {
        None
    };
    let pooled = if strategy.is_centralized() {
        pooled_train(clients)
    } else {
        Vec::new()
    };
    let mut records = Vec::with_capacity(config.rounds);

    for _ in 0..config.rounds {
        let round = server.advance();
        let wrap = |e: Error| Error::Round {
            round,
            source: Box::new(e),
        };
        let results: Vec<ClientUpdateResult<T>> = if strategy.is_centralized() {
            let size = ((m as f64 / clients.len() as f64) * pooled.len() as f64)
                .round()
                .max(1.0) as usize;
            let mut rng = Rng::substream(config.seed, "central", &[round as u64]);
            let picked = rng.sample_distinct(pooled.len(), size.min(pooled.len()));
            let central = ClientDataset {
                client_id: 0,
                train: picked.iter().map(|&i| pooled[i].clone()).collect(),
                test: Vec::new(),
                train_docs: picked,
                test_docs: Vec::new(),
                topic_histogram: Vec::new(),
                mixture: Vec::new(),
            };
            client_update(&central, backbone, &server.global, &mut None, config, round)
                .map_err(wrap)?
                .into_iter()
                .collect()
        } else {
            let selected = server.select_clients(clients.len(), m);
            debug!("round {round}: clients {selected:?}");
            if strategy.aggregates() {
                let down = server.global.param_count() as u64;
                for &k in &selected {
                    server.ledger.record_downlink(round, k, down);
                }
            }
            let mut jobs: Vec<(usize, &mut Option<Params<T>>)> = personal
                .iter_mut()
                .enumerate()
                .filter(|(k, _)| selected.binary_search(k).is_ok())
                .collect();
            let global = &server.global;
            let work = |(k, state): &mut (usize, &mut Option<Params<T>>)| {
                client_update(&clients[*k], backbone, global, state, config, round)
            };
            let outcomes: Vec<Result<Option<ClientUpdateResult<T>>>> = match &pool {
                Some(p) => p.install(|| jobs.par_iter_mut().map(work).collect()),
                None => jobs.iter_mut().map(work).collect(),
            };
            let mut results = Vec::with_capacity(outcomes.len());
            for o in outcomes {
                results.extend(o.map_err(wrap)?);
            }
            results
        };

        if strategy.aggregates() {
            server.absorb(&results).map_err(wrap)?;
        } else if strategy.is_centralized() {
            if let Some(r) = results.first() {
                server.global = r.params.clone();
            }
        }

        let ppl = match strategy {
            Strategy::LocalOnly => mean_local_ppl(backbone, clients, |k| {
                vec![personal[k].clone().unwrap_or_else(|| server.global.clone())]
            }),
            Strategy::FedPer => mean_local_ppl(backbone, clients, |k| {
                let mut parts = vec![server.global.clone()];
                parts.extend(personal[k].clone());
                parts
            }),
            _ => evaluate(backbone, &[&server.global], &test),
        }
        .map_err(wrap)?;
        let losses: Vec<f64> = results.iter().filter_map(|r| r.loss_trace.last().copied()).collect();
        let mean_local_loss = if losses.is_empty() {
            f64::NAN
        } else {
            losses.iter().sum::<f64>() / losses.len() as f64
        };
        info!(
            "{strategy} round {round}: ppl {ppl:.4}, local loss {mean_local_loss:.4}, {} clients",
            results.len()
        );
        records.push(RoundRecord {
            round,
            ppl_global: ppl,
            mean_local_loss,
            clients: results.len(),
            cum_uplink_bytes: server.ledger.cumulative_through(round),
        });
    }

    let final_checksum = match &server.global {
        Params::Adapter(_) => backbone.current_checksum(),
        Params::Weights(g) => {
            let mut w = backbone.weights().clone();
            w.overwrite_from(g)?;
            checksum_of(&w)
        }
    };
    Ok(RunOutcome {
        global: server.global,
        records,
        ledger: server.ledger,
        personal,
        final_checksum,
    })
}
