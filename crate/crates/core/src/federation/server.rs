//! Server side of a round. Everything here consumes client update results
//! only; it has no view of client data.

use crate::error::{Error, Result};
use crate::federation::{ClientUpdateResult, Params};
use crate::linalg::Rng;
use crate::metrics::CommLedger;
use crate::params::ParamSet;
use crate::scalar::Scalar;

pub struct ServerState<T> {
    round: usize,
    pub global: Params<T>,
    pub ledger: CommLedger,
    seed: u64,
}

impl<T: Scalar> ServerState<T> {
    pub fn new(global: Params<T>, seed: u64) -> Self {
        ServerState {
            round: 0,
            global,
            ledger: CommLedger::new(),
            seed,
        }
    }

    pub fn round(&self) -> usize {
        self.round
    }

    /// Moves to the next round and returns its (1-based) number.
    pub fn advance(&mut self) -> usize {
        self.round += 1;
        self.round
    }

    /// This round's participants, drawn on a stream of their own.
    pub fn select_clients(&self, n_clients: usize, m: usize) -> Vec<usize> {
        select_clients(self.seed, self.round, n_clients, m)
    }

    /// Logs every upload, then replaces the global parameters with the
    /// weighted average of the results.
    pub fn absorb(&mut self, results: &[ClientUpdateResult<T>]) -> Result<()> {
        for r in results {
            if r.uplink_params > 0 {
                self.ledger.record_upload(self.round, r.client_id, r.uplink_params);
            }
        }
        let aggregated = aggregate(results)?;
        if !aggregated.is_congruent(&self.global) {
            return Err(Error::Protocol("aggregate changed the global parameter shapes".into()));
        }
        self.global = aggregated;
        Ok(())
    }
}

/// `m` distinct ids drawn uniformly without replacement, ascending.
pub fn select_clients(seed: u64, round: usize, n_clients: usize, m: usize) -> Vec<usize> {
    let mut rng = Rng::substream(seed, "select", &[round as u64]);
    rng.sample_distinct(n_clients, m.min(n_clients))
}

/// `w_k = n_k / Σ n_j` over the given results, in the order given.
pub fn aggregation_weights<T>(results: &[ClientUpdateResult<T>]) -> Result<Vec<f64>> {
    if results.is_empty() {
        return Err(Error::Protocol("aggregation over zero client updates".into()));
    }
    let total: usize = results.iter().map(|r| r.n_k).sum();
    if total == 0 {
        return Err(Error::Protocol(
            "degenerate round: participants hold zero samples".into(),
        ));
    }
    Ok(results.iter().map(|r| r.n_k as f64 / total as f64).collect())
}

/// Sample-size weighted average, reduced in ascending client-id order.
///
/// Accumulates `p_0 + Σ w_k (p_k − p_0)`, which is the weighted mean and
/// returns `p` unchanged when every client sends the same `p`.
pub fn aggregate<T: Scalar>(results: &[ClientUpdateResult<T>]) -> Result<Params<T>> {
    let mut order: Vec<&ClientUpdateResult<T>> = results.iter().collect();
    order.sort_by_key(|r| r.client_id);
    let sorted: Vec<ClientUpdateResult<T>> = order.iter().map(|r| (*r).clone()).collect();
    let weights = aggregation_weights(&sorted)?;
    let anchor = &sorted[0].params;
    let mut acc = anchor.clone();
    for (r, &w) in sorted.iter().zip(&weights).skip(1) {
        if !r.params.is_congruent(anchor) {
            return Err(Error::Protocol(format!(
                "client {} sent parameters incongruent with client {}",
                r.client_id, sorted[0].client_id
            )));
        }
        let mut diff = r.params.clone();
        diff.axpy(T::lit(-1.0), anchor)?;
        acc.axpy(T::lit(w), &diff)?;
    }
    Ok(acc)
}
