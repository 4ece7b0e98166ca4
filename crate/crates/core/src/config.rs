//! Experiment configuration: one structured file (TOML or JSON) resolved
//! against a named profile, then validated as a whole.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::PartitionConfig;
use crate::error::{Error, Result};
use crate::federation::{FederationConfig, Strategy, StrategyParams};
use crate::gradcheck::GradCheckConfig;
use crate::lora::LoraConfig;
use crate::model::{ModelConfig, PretrainOptions};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    /// Small enough to run on a laptop core in minutes.
    #[default]
    Desk,
    /// K=100 clients, T=500 rounds.
    FullScale,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusSource {
    Synthetic,
    /// One UTF-8 file per topic, one document per line.
    Files,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: CorpusSource,
    pub files: Vec<PathBuf>,
    /// Longer imported lines are cut into chunks of this many characters.
    pub max_doc_len: usize,
    pub n_topics: usize,
    pub docs_per_topic: usize,
    pub doc_len: usize,
    /// Number of clients `K`.
    pub n_clients: usize,
    /// Dirichlet concentration over topics.
    pub alpha: f64,
    pub min_samples_per_client: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: CorpusSource::Synthetic,
            files: Vec::new(),
            max_doc_len: 65,
            n_topics: 10,
            docs_per_topic: 30,
            doc_len: 33,
            n_clients: 20,
            alpha: 0.3,
            min_samples_per_client: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraSection {
    pub rank: usize,
    pub scaling: f64,
    /// Adapted projections; empty means W_q and W_v of every block.
    pub targets: Vec<String>,
}

impl Default for LoraSection {
    fn default() -> Self {
        LoraSection {
            rank: 8,
            scaling: 16.0,
            targets: Vec::new(),
        }
    }
}

/// Federation settings other than `K` (in `data`) and the seed (top level).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationSection {
    pub strategy: Strategy,
    pub participation: f64,
    pub rounds: usize,
    pub local_epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub ditto_lambda: f64,
    pub parallel_clients: usize,
}

impl Default for FederationSection {
    fn default() -> Self {
        let f = FederationConfig::default();
        FederationSection {
            strategy: f.strategy,
            participation: f.participation,
            rounds: f.rounds,
            local_epochs: f.local_epochs,
            lr: f.lr,
            weight_decay: f.weight_decay,
            batch_size: f.batch_size,
            ditto_lambda: f.strategy_params.ditto_lambda,
            parallel_clients: f.parallel_clients,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Backbone checkpoint; defaults to `backbone.bin` inside `dir`.
    pub backbone: Option<PathBuf>,
    /// Also write JSON copies of the CSV tables.
    pub json: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: PathBuf::from("runs/default"),
            backbone: None,
            json: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelConfig,
    pub lora: LoraSection,
    pub pretrain: PretrainOptions,
    pub federation: FederationSection,
    pub output: OutputSection,
    pub gradcheck: GradCheckConfig,
    /// Provenance written into run manifests; ignored when read back.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<serde_json::Value>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::for_profile(Profile::Desk)
    }
}

fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn problems_of(r: Result<()>, into: &mut Vec<String>) {
    match r {
        Ok(()) => {}
        Err(Error::Config(p)) => into.extend(p),
        Err(e) => into.push(e.to_string()),
    }
}

impl ExperimentConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let mut c = ExperimentConfig {
            profile,
            seed: 0,
            data: DataSection::default(),
            model: ModelConfig::default(),
            lora: LoraSection::default(),
            pretrain: PretrainOptions::default(),
            federation: FederationSection::default(),
            output: OutputSection::default(),
            gradcheck: GradCheckConfig::default(),
            manifest: None,
        };
        if profile == Profile::FullScale {
            c.data.n_clients = 100;
            c.data.docs_per_topic = 150;
            c.federation.rounds = 500;
        }
        c
    }

    /// Parses TOML, or JSON when the text starts with `{`. Keys that are
    /// absent take the profile's defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let patch: serde_json::Value = if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| Error::config(format!("config JSON: {e}")))?
        } else {
            let t: toml::Value = toml::from_str(text).map_err(|e| Error::config(format!("config TOML: {e}")))?;
            serde_json::to_value(t).map_err(|e| Error::config(e.to_string()))?
        };
        let profile = match patch.get("profile") {
            Some(p) => serde_json::from_value(p.clone()).map_err(|e| Error::config(format!("profile: {e}")))?,
            None => Profile::Desk,
        };
        let mut base = serde_json::to_value(ExperimentConfig::for_profile(profile)).expect("config serializes");
        merge(&mut base, patch);
        serde_json::from_value(base).map_err(|e| Error::config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Every violated constraint, not just the first.
    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        let d = &self.data;
        match d.source {
            CorpusSource::Files if d.files.is_empty() => {
                p.push("data.files must list at least one topic file when data.source = \"files\"".into())
            }
            CorpusSource::Files => {
                if d.max_doc_len < 2 {
                    p.push("data.max_doc_len must be at least 2".into());
                }
            }
            CorpusSource::Synthetic => {
                if d.n_topics == 0 {
                    p.push("data.n_topics must be at least 1".into());
                }
                if d.docs_per_topic == 0 {
                    p.push("data.docs_per_topic must be at least 1".into());
                }
                if d.doc_len < 2 {
                    p.push("data.doc_len must be at least 2".into());
                }
                if self.model.vocab_size < 28 {
                    p.push(format!(
                        "model.vocab_size must be at least 28 for the synthetic corpus, got {}",
                        self.model.vocab_size
                    ));
                }
            }
        }
        problems_of(self.partition().validate(), &mut p);
        problems_of(self.model.validate(), &mut p);
        if self.lora.rank == 0 {
            p.push("lora.rank must be at least 1".into());
        } else if self.model.validate().is_ok() {
            problems_of(self.lora_config().validate(&self.model.weight_shapes()), &mut p);
        }
        if !(self.lora.scaling.is_finite()) {
            p.push(format!("lora.scaling must be finite, got {}", self.lora.scaling));
        }
        if self.pretrain.batch_size == 0 {
            p.push("pretrain.batch_size must be at least 1".into());
        }
        if !(self.pretrain.lr >= 0.0) {
            p.push(format!("pretrain.lr must be non-negative, got {}", self.pretrain.lr));
        }
        if self.federation.rounds == 0 {
            p.push("federation.rounds must be at least 1".into());
        }
        p.extend(self.federation_config().problems());
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    pub fn lora_config(&self) -> LoraConfig {
        if self.lora.targets.is_empty() {
            LoraConfig::query_value(self.lora.rank, self.lora.scaling, self.model.n_layers)
        } else {
            LoraConfig {
                rank: self.lora.rank,
                scaling: self.lora.scaling,
                target_layers: self.lora.targets.clone(),
            }
        }
    }

    pub fn partition(&self) -> PartitionConfig {
        PartitionConfig {
            n_clients: self.data.n_clients,
            concentration: self.data.alpha,
            seed: self.seed,
            min_samples_per_client: self.data.min_samples_per_client,
        }
    }

    pub fn federation_config(&self) -> FederationConfig {
        let f = &self.federation;
        FederationConfig {
            n_clients: self.data.n_clients,
            participation: f.participation,
            rounds: f.rounds,
            local_epochs: f.local_epochs,
            lr: f.lr,
            weight_decay: f.weight_decay,
            batch_size: f.batch_size,
            seed: self.seed,
            strategy: f.strategy,
            strategy_params: StrategyParams {
                ditto_lambda: f.ditto_lambda,
            },
            parallel_clients: f.parallel_clients,
        }
    }

    pub fn backbone_path(&self) -> PathBuf {
        self.output
            .backbone
            .clone()
            .unwrap_or_else(|| self.output.dir.join("backbone.bin"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_desk_scale() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let f = c.federation_config();
        assert_eq!(
            (f.participation, f.local_epochs, f.batch_size, f.lr),
            (0.1, 5, 32, 1e-4)
        );
        assert_eq!((c.data.alpha, c.data.n_clients, f.rounds), (0.3, 20, 50));
        assert_eq!(c.model.context_len, 64);
        assert_eq!(c.lora_config().target_layers.len(), 4);
    }

    #[test]
    fn full_profile_and_partial_files() {
        let c = ExperimentConfig::parse("profile = \"full-scale\"\nseed = 4\n[federation]\nlr = 0.002\n").unwrap();
        assert_eq!((c.data.n_clients, c.federation.rounds), (100, 500));
        assert_eq!(c.federation.lr, 0.002);
        assert_eq!(c.federation.local_epochs, 5);
        assert_eq!(c.federation_config().clients_per_round(), 10);
        let j = ExperimentConfig::parse("{\"data\": {\"n_clients\": 4}}").unwrap();
        assert_eq!(j.data.n_clients, 4);
    }

    #[test]
    fn unknown_keys_and_strategies_are_rejected() {
        assert!(ExperimentConfig::parse("[federation]\nlearning_rate = 1.0\n").is_err());
        let err = ExperimentConfig::parse("[federation]\nstrategy = \"fedsgd\"\n").unwrap_err();
        assert!(err.is_validation());
    }

    #[test]
    fn validation_names_every_field() {
        let mut c = ExperimentConfig::default();
        c.data.source = CorpusSource::Files;
        c.federation.participation = 2.0;
        c.data.alpha = -1.0;
        c.lora.rank = 64;
        let Err(Error::Config(p)) = c.validate() else {
            panic!("expected config error")
        };
        let all = p.join("\n");
        for field in ["data.files", "federation.participation", "data.alpha", "rank"] {
            assert!(all.contains(field), "{field} missing from {all}");
        }
    }

    #[test]
    fn serialized_config_reads_back_identically() {
        let mut c = ExperimentConfig::for_profile(Profile::FullScale);
        c.seed = 77;
        c.federation.strategy = Strategy::Ditto;
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(ExperimentConfig::parse(&json).unwrap(), c);
    }
}
