use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::AdamWConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Federated averaging of low-rank adapters over a frozen backbone.
    #[serde(rename = "fedgen-edge")]
    FedGenEdge,
    /// Federated averaging of every backbone weight.
    #[serde(rename = "fedavg-full")]
    FedAvgFull,
    /// Each client trains its own adapter and never communicates.
    LocalOnly,
    /// Shared lower layers averaged, final layers kept per client.
    #[serde(rename = "fedper")]
    FedPer,
    /// Global adapter plus a per-client adapter pulled towards it.
    Ditto,
    /// One trainer over the pooled data, adapter only.
    CentralizedLora,
    /// One trainer over the pooled data, all weights.
    CentralizedFull,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::FedGenEdge,
        Strategy::FedAvgFull,
        Strategy::LocalOnly,
        Strategy::FedPer,
        Strategy::Ditto,
        Strategy::CentralizedLora,
        Strategy::CentralizedFull,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::FedGenEdge => "fedgen-edge",
            Strategy::FedAvgFull => "fedavg-full",
            Strategy::LocalOnly => "local-only",
            Strategy::FedPer => "fedper",
            Strategy::Ditto => "ditto",
            Strategy::CentralizedLora => "centralized-lora",
            Strategy::CentralizedFull => "centralized-full",
        }
    }

    /// Trains a low-rank adapter rather than backbone weights.
    pub fn uses_adapter(self) -> bool {
        matches!(
            self,
            Strategy::FedGenEdge | Strategy::LocalOnly | Strategy::Ditto | Strategy::CentralizedLora
        )
    }

    /// Clients upload to a server that aggregates.
    pub fn aggregates(self) -> bool {
        matches!(
            self,
            Strategy::FedGenEdge | Strategy::FedAvgFull | Strategy::FedPer | Strategy::Ditto
        )
    }

    pub fn is_centralized(self) -> bool {
        matches!(self, Strategy::CentralizedLora | Strategy::CentralizedFull)
    }

    /// The backbone weights the run evaluates with never change.
    pub fn freezes_backbone(self) -> bool {
        self.uses_adapter()
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .chars()
            .filter(|c| !matches!(c, '-' | '_' | ' '))
            .flat_map(char::to_lowercase)
            .collect();
        Strategy::ALL
            .into_iter()
            .find(|st| st.name().replace('-', "") == norm)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown strategy {s:?}; expected one of {}",
                    Strategy::ALL.map(Strategy::name).join(", ")
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategyParams {
    /// Weight of the proximal term `(λ/2)·‖v − w‖²` in Ditto's personal objective.
    pub ditto_lambda: f64,
}

impl Default for StrategyParams {
    fn default() -> Self {
        StrategyParams { ditto_lambda: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    pub n_clients: usize,
    /// Fraction `C` of clients selected each round.
    pub participation: f64,
    pub rounds: usize,
    pub local_epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub strategy: Strategy,
    pub strategy_params: StrategyParams,
    /// Worker threads for client updates within a round; 1 runs them inline.
    pub parallel_clients: usize,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            n_clients: 20,
            participation: 0.1,
            rounds: 50,
            local_epochs: 5,
            lr: 1e-4,
            weight_decay: 0.01,
            batch_size: 32,
            seed: 0,
            strategy: Strategy::FedGenEdge,
            strategy_params: StrategyParams::default(),
            parallel_clients: 1,
        }
    }
}

impl FederationConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.n_clients == 0 {
            p.push("federation.n_clients must be at least 1".to_string());
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            p.push(format!(
                "federation.participation must lie in (0, 1], got {}",
                self.participation
            ));
        }
        if self.local_epochs == 0 {
            p.push("federation.local_epochs must be at least 1".to_string());
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            p.push(format!("federation.lr must be a non-negative number, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            p.push(format!(
                "federation.weight_decay must be non-negative, got {}",
                self.weight_decay
            ));
        }
        if self.batch_size == 0 {
            p.push("federation.batch_size must be at least 1".to_string());
        }
        if !(self.strategy_params.ditto_lambda >= 0.0) || !self.strategy_params.ditto_lambda.is_finite() {
            p.push(format!(
                "federation.strategy_params.ditto_lambda must be non-negative, got {}",
                self.strategy_params.ditto_lambda
            ));
        }
        if self.parallel_clients == 0 {
            p.push("federation.parallel_clients must be at least 1".to_string());
        }
        p
    }

    /// Rounds are allowed to be zero here so a run can return its initial
    /// state; the experiment config requires at least one.
    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    /// `m = max(round(C·K), 1)`, rounding halves up.
    pub fn clients_per_round(&self) -> usize {
        clients_per_round(self.participation, self.n_clients)
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

pub fn clients_per_round(participation: f64, n_clients: usize) -> usize {
    let m = (participation * n_clients as f64 + 0.5).floor() as usize;
    m.clamp(1, n_clients.max(1))
}
