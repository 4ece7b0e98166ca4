//! The `fedgen` command line: pretrain, run, ablate, gradcheck, personalize
//! and report.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::config::{CorpusSource, ExperimentConfig};
use crate::data::{
    heterogeneity_report, import_corpus, partition, pooled_train, synth_corpus, ClientDataset, Corpus,
    HeterogeneityReport, PartitionManifest,
};
use crate::error::{Error, Result};
use crate::federation::{evaluate, personalize, run_training, Params, RunOutcome, Strategy};
use crate::gradcheck::{gradcheck, GradCheckReport};
use crate::linalg::Rng;
use crate::lora::{decode_adapter, encode_adapter, LoraAdapter, WireFormat};
use crate::metrics::{
    personalization_stats, read_ledger_csv, read_personalization_csv, read_rounds_csv, total_upload, write_csv,
    write_json, AblationRow, PersonalizationReport, PersonalizationRow,
};
use crate::model::{pretrain_backbone, Backbone};
use crate::params::ParamSet;

pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const ADAPTER_FILE: &str = "final_adapter.bin";
pub const WEIGHTS_FILE: &str = "final_weights.bin";

#[derive(Parser, Debug)]
#[command(
    name = "fedgen",
    version,
    about = "Federated low-rank adapter training on a frozen character transformer"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct CommonArgs {
    /// TOML or JSON experiment config.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, value_name = "NAME")]
    pub strategy: Option<String>,
    /// Threads for client updates within a round.
    #[arg(long, value_name = "N")]
    pub parallel_clients: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sweep {
    Rank,
    Epochs,
}

impl Sweep {
    pub fn default_values(self) -> Vec<usize> {
        match self {
            Sweep::Rank => vec![2, 4, 8, 16, 32],
            Sweep::Epochs => vec![1, 5, 10, 20],
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Pretrain and freeze the backbone.
    Pretrain(CommonArgs),
    /// Run one federated experiment.
    Run(CommonArgs),
    /// Repeat a run over LoRA ranks or local epoch counts.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum)]
        sweep: Sweep,
        /// Comma-separated sweep values; defaults depend on the sweep.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<usize>>,
    },
    /// Finite-difference check of adapter gradients.
    Gradcheck(CommonArgs),
    /// Fine-tune the final global adapter per client and compare.
    Personalize {
        #[command(flatten)]
        common: CommonArgs,
        /// Directory of a finished run.
        #[arg(long, value_name = "DIR")]
        run: PathBuf,
        /// A finished local-only run to reuse instead of training one.
        #[arg(long, value_name = "DIR")]
        local_only: Option<PathBuf>,
    },
    /// Summarize the tables of a finished run.
    Report {
        #[arg(long, value_name = "DIR")]
        run: PathBuf,
    },
}

/// Loads the config (or the defaults), applies flag overrides and
/// validates the result.
pub fn resolve(args: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(o) = &args.out {
        cfg.output.dir = o.clone();
    }
    if let Some(s) = &args.strategy {
        cfg.federation.strategy = s.parse()?;
    }
    if let Some(n) = args.parallel_clients {
        cfg.federation.parallel_clients = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    let d = &cfg.data;
    let corpus = match d.source {
        CorpusSource::Synthetic => synth_corpus(
            d.n_topics,
            d.docs_per_topic,
            d.doc_len,
            &mut Rng::stream(cfg.seed, "corpus"),
        )?,
        CorpusSource::Files => import_corpus(&d.files, d.max_doc_len)?,
    };
    if corpus.vocab.len() > cfg.model.vocab_size {
        return Err(Error::config(format!(
            "model.vocab_size is {} but the corpus uses {} characters",
            cfg.model.vocab_size,
            corpus.vocab.len()
        )));
    }
    Ok(corpus)
}

/// The corpus and its client partition, both determined by the config.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<(Corpus, Vec<ClientDataset>)> {
    let corpus = load_corpus(cfg)?;
    let clients = partition(&corpus, &cfg.partition())?;
    Ok((corpus, clients))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub path: PathBuf,
    pub checksum: String,
    pub param_count: usize,
    pub first_loss: f64,
    pub last_loss: f64,
}

/// Pretrains on the pooled training splits of every client, so no test
/// document is seen, and writes the checkpoint.
pub fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<PretrainSummary> {
    let (_, clients) = prepare_data(cfg)?;
    let samples = pooled_train(&clients);
    let (backbone, report) = pretrain_backbone::<f64, _>(
        &cfg.model,
        &samples,
        &cfg.pretrain,
        &mut Rng::stream(cfg.seed, "pretrain"),
    )?;
    let path = cfg.backbone_path();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    backbone.save(&path)?;
    let summary = PretrainSummary {
        path,
        checksum: backbone.frozen_checksum().to_string(),
        param_count: backbone.param_count(),
        first_loss: report.losses.first().copied().unwrap_or(f64::NAN),
        last_loss: report.losses.last().copied().unwrap_or(f64::NAN),
    };
    info!(
        "pretrained backbone {} ({} params)",
        summary.checksum, summary.param_count
    );
    Ok(summary)
}

/// The checkpoint named by the config. A full-weight centralized run
/// without one starts from a fresh initialization.
pub fn load_backbone(cfg: &ExperimentConfig) -> Result<Backbone<f64>> {
    let path = cfg.backbone_path();
    if !path.exists() {
        if cfg.federation.strategy == Strategy::CentralizedFull {
            warn!(
                "no checkpoint at {}, training from a fresh initialization",
                path.display()
            );
            return Backbone::init(&cfg.model, &mut Rng::stream(cfg.seed, "pretrain"));
        }
        return Err(Error::Io {
            path,
            source: std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "backbone checkpoint missing; run `fedgen pretrain` with the same config first",
            ),
        });
    }
    let backbone = Backbone::<f64>::load(&path)?;
    if backbone.config() != &cfg.model {
        return Err(Error::config(format!(
            "checkpoint {} was trained with a different model section",
            path.display()
        )));
    }
    Ok(backbone)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub strategy: Strategy,
    pub rounds: usize,
    pub clients_per_round: usize,
    pub final_ppl_global: f64,
    pub final_mean_local_loss: f64,
    pub total_uplink_bytes: u64,
    pub total_downlink_bytes: u64,
    pub backbone_params: usize,
    pub trainable_params: usize,
    pub backbone_checksum: String,
    pub final_checksum: String,
}

#[derive(Serialize)]
struct PartitionFile<'a> {
    manifest: PartitionManifest,
    heterogeneity: &'a HeterogeneityReport,
}

fn manifest_of(cfg: &ExperimentConfig, backbone: &Backbone<f64>) -> ExperimentConfig {
    let mut m = cfg.clone();
    m.manifest = Some(serde_json::json!({
        "code_version": env!("CARGO_PKG_VERSION"),
        "backbone_checksum": backbone.frozen_checksum(),
        "personalization_optimizer": "reset",
        "wire_bits_per_param": crate::metrics::WIRE_BITS_PER_PARAM,
    }));
    m
}

/// Writes the personal adapters of a local-only or Ditto run.
fn write_personal(dir: &Path, outcome: &RunOutcome<f64>) -> Result<()> {
    let pdir = dir.join("personal");
    for (k, p) in outcome.personal.iter().enumerate() {
        if let Some(Params::Adapter(a)) = p {
            create_dir(&pdir)?;
            write_file(
                &pdir.join(format!("client_{k}.bin")),
                &encode_adapter(a, WireFormat::F64).bytes,
            )?;
        }
    }
    Ok(())
}

/// One complete experiment; returns the outcome alongside its summary.
pub fn execute_run(cfg: &ExperimentConfig) -> Result<(RunSummary, RunOutcome<f64>)> {
    let dir = &cfg.output.dir;
    create_dir(dir)?;
    let backbone = load_backbone(cfg)?;
    let manifest = serde_json::to_vec_pretty(&manifest_of(cfg, &backbone)).expect("config serializes");
    write_file(&dir.join(MANIFEST_FILE), &manifest)?;

    let (corpus, clients) = prepare_data(cfg)?;
    let hetero = heterogeneity_report(&clients)?;
    write_json(
        &PartitionFile {
            manifest: PartitionManifest::new(&corpus, &clients),
            heterogeneity: &hetero,
        },
        &dir.join("partition.json"),
    )?;

    let fed = cfg.federation_config();
    let outcome = run_training(&clients, &backbone, &cfg.lora_config(), &fed)?;
    write_csv(outcome.records.as_slice(), &dir.join("rounds.csv"))?;
    write_csv(&outcome.ledger, &dir.join("ledger.csv"))?;
    if cfg.output.json {
        write_json(&outcome.records, &dir.join("rounds.json"))?;
        write_json(&outcome.ledger.entries(), &dir.join("ledger.json"))?;
    }
    match &outcome.global {
        Params::Adapter(a) => write_file(&dir.join(ADAPTER_FILE), &encode_adapter(a, WireFormat::F64).bytes)?,
        Params::Weights(_) => {
            let b = Backbone::from_weights(cfg.model.clone(), outcome.final_weights(&backbone)?)?;
            write_file(&dir.join(WEIGHTS_FILE), &b.to_bytes())?;
        }
    }
    write_personal(dir, &outcome)?;

    let last = outcome.records.last();
    let summary = RunSummary {
        strategy: fed.strategy,
        rounds: outcome.records.len(),
        clients_per_round: fed.clients_per_round(),
        final_ppl_global: last.map_or(f64::NAN, |r| r.ppl_global),
        final_mean_local_loss: last.map_or(f64::NAN, |r| r.mean_local_loss),
        total_uplink_bytes: total_upload(&outcome.ledger),
        total_downlink_bytes: outcome.ledger.total_downlink(),
        backbone_params: backbone.param_count(),
        trainable_params: outcome.global.param_count(),
        backbone_checksum: backbone.frozen_checksum().to_string(),
        final_checksum: outcome.final_checksum.clone(),
    };
    write_json(&summary, &dir.join("summary.json"))?;
    Ok((summary, outcome))
}

pub fn cmd_run(cfg: &ExperimentConfig) -> Result<RunSummary> {
    execute_run(cfg).map(|(s, _)| s)
}

/// One run per sweep value under `<dir>/<sweep>_<value>`, plus a summary
/// table. Every run shares the base config's backbone and seeds.
pub fn cmd_ablate(cfg: &ExperimentConfig, sweep: Sweep, values: &[usize]) -> Result<Vec<AblationRow>> {
    if values.is_empty() {
        return Err(Error::config("ablation needs at least one sweep value"));
    }
    let base_dir = cfg.output.dir.clone();
    create_dir(&base_dir)?;
    let mut rows = Vec::with_capacity(values.len());
    for &v in values {
        let mut c = cfg.clone();
        c.output.backbone = Some(cfg.backbone_path());
        c.output.dir = base_dir.join(format!("{}_{v}", sweep_name(sweep)));
        match sweep {
            Sweep::Rank => c.lora.rank = v,
            Sweep::Epochs => c.federation.local_epochs = v,
        }
        c.validate()?;
        let s = cmd_run(&c)?;
        rows.push(AblationRow {
            value: v,
            final_ppl_global: s.final_ppl_global,
            final_train_loss: s.final_mean_local_loss,
            uplink_bytes: s.total_uplink_bytes,
        });
    }
    write_csv(rows.as_slice(), &base_dir.join("summary.csv"))?;
    write_json(&rows, &base_dir.join("summary.json"))?;
    Ok(rows)
}

fn sweep_name(s: Sweep) -> &'static str {
    match s {
        Sweep::Rank => "rank",
        Sweep::Epochs => "epochs",
    }
}

pub fn cmd_gradcheck(cfg: &ExperimentConfig) -> Result<GradCheckReport> {
    gradcheck(&cfg.gradcheck)
}

fn read_adapter(path: &Path) -> Result<LoraAdapter<f64>> {
    decode_adapter(&read_file(path)?)
}

/// Per-client adapters of a finished local-only run; clients that never
/// trained fall back to `fallback`.
fn local_only_adapters(
    cfg: &ExperimentConfig,
    clients: &[ClientDataset],
    backbone: &Backbone<f64>,
    from: Option<&Path>,
) -> Result<Vec<Params<f64>>> {
    let outcome_personal: Vec<Option<Params<f64>>> = match from {
        Some(dir) => (0..clients.len())
            .map(|k| {
                let p = dir.join("personal").join(format!("client_{k}.bin"));
                if p.exists() {
                    read_adapter(&p).map(|a| Some(Params::Adapter(a)))
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<_>>()?,
        None => {
            let mut fed = cfg.federation_config();
            fed.strategy = Strategy::LocalOnly;
            run_training(clients, backbone, &cfg.lora_config(), &fed)?.personal
        }
    };
    let mut init_cfg = cfg.federation_config();
    init_cfg.strategy = Strategy::LocalOnly;
    let initial = crate::federation::initial_global(backbone, &cfg.lora_config(), &init_cfg)?;
    Ok(outcome_personal
        .into_iter()
        .map(|p| p.unwrap_or_else(|| initial.clone()))
        .collect())
}

/// Global, personalized and local-only perplexity on every client's own
/// test split. `cfg` defaults to the run's manifest.
pub fn cmd_personalize(
    run_dir: &Path,
    cfg: Option<&ExperimentConfig>,
    local_only_dir: Option<&Path>,
) -> Result<PersonalizationReport> {
    let cfg = match cfg {
        Some(c) => c.clone(),
        None => ExperimentConfig::load(&run_dir.join(MANIFEST_FILE))?,
    };
    let adapter_path = run_dir.join(ADAPTER_FILE);
    if !adapter_path.exists() {
        return Err(Error::Io {
            path: adapter_path,
            source: std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "final global adapter missing; personalization needs an adapter run",
            ),
        });
    }
    let global = read_adapter(&adapter_path)?;
    let backbone = load_backbone(&cfg)?;
    let (_, clients) = prepare_data(&cfg)?;
    let fed = cfg.federation_config();
    let local = local_only_adapters(&cfg, &clients, &backbone, local_only_dir)?;
    let global_params = Params::Adapter(global.clone());
    let mut rows = Vec::with_capacity(clients.len());
    for c in &clients {
        let row = if c.test.is_empty() {
            PersonalizationRow {
                client_id: c.client_id,
                ppl_global: None,
                ppl_personalized: None,
                ppl_local_only: None,
            }
        } else {
            let tuned = Params::Adapter(personalize(c, &backbone, &global, &fed)?);
            PersonalizationRow {
                client_id: c.client_id,
                ppl_global: Some(evaluate(&backbone, &[&global_params], &c.test)?),
                ppl_personalized: Some(evaluate(&backbone, &[&tuned], &c.test)?),
                ppl_local_only: Some(evaluate(&backbone, &[&local[c.client_id]], &c.test)?),
            }
        };
        rows.push(row);
    }
    let report = personalization_stats(&rows)?;
    write_csv(&report, &run_dir.join("personalization.csv"))?;
    write_json(&report, &run_dir.join("personalization.json"))?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub rounds: usize,
    pub first_ppl_global: f64,
    pub final_ppl_global: f64,
    pub best_ppl_global: f64,
    pub total_uplink_bytes: u64,
    pub ledger_entries: usize,
    pub personalization_mean_gain: Option<f64>,
    pub personalization_fraction_improved: Option<f64>,
}

pub fn cmd_report(run_dir: &Path) -> Result<RunReport> {
    let rounds = read_rounds_csv(&run_dir.join("rounds.csv"))?;
    let ledger = read_ledger_csv(&run_dir.join("ledger.csv"))?;
    let pers_path = run_dir.join("personalization.csv");
    let gains = if pers_path.exists() {
        Some(read_personalization_csv(&pers_path)?)
    } else {
        None
    };
    let report = RunReport {
        rounds: rounds.len(),
        first_ppl_global: rounds.first().map_or(f64::NAN, |r| r.ppl_global),
        final_ppl_global: rounds.last().map_or(f64::NAN, |r| r.ppl_global),
        best_ppl_global: rounds.iter().map(|r| r.ppl_global).fold(f64::NAN, f64::min),
        total_uplink_bytes: ledger.iter().map(|e| e.bytes).sum(),
        ledger_entries: ledger.len(),
        personalization_mean_gain: gains
            .as_ref()
            .filter(|g| !g.is_empty())
            .map(|g| g.iter().map(|c| c.gain).sum::<f64>() / g.len() as f64),
        personalization_fraction_improved: gains
            .as_ref()
            .filter(|g| !g.is_empty())
            .map(|g| g.iter().filter(|c| c.gain > 0.0).count() as f64 / g.len() as f64),
    };
    write_json(&report, &run_dir.join("report.json"))?;
    Ok(report)
}

fn print_json<S: Serialize>(value: &S) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Pretrain(a) => print_json(&cmd_pretrain(&resolve(&a)?)?),
        Command::Run(a) => print_json(&cmd_run(&resolve(&a)?)?),
        Command::Ablate { common, sweep, values } => {
            let values = values.unwrap_or_else(|| sweep.default_values());
            print_json(&cmd_ablate(&resolve(&common)?, sweep, &values)?)
        }
        Command::Gradcheck(a) => {
            let cfg = resolve(&a)?;
            let report = cmd_gradcheck(&cfg)?;
            if a.out.is_some() {
                create_dir(&cfg.output.dir)?;
                write_json(&report, &cfg.output.dir.join("gradcheck.json"))?;
            }
            print_json(&report);
            println!("{}", if report.passed { "PASS" } else { "FAIL" });
            if !report.passed {
                return Ok(2);
            }
        }
        Command::Personalize {
            common,
            run,
            local_only,
        } => {
            let cfg = if common.config.is_some() || common.seed.is_some() || common.strategy.is_some() {
                let mut c = common.clone();
                if c.config.is_none() {
                    c.config = Some(run.join(MANIFEST_FILE));
                }
                Some(resolve(&c)?)
            } else {
                None
            };
            let report = cmd_personalize(&run, cfg.as_ref(), local_only.as_deref())?;
            println!(
                "clients {}  mean ppl global {:.4}  personalized {:.4}  local-only {:.4}  improved {:.1}%",
                report.clients.len(),
                report.mean_ppl_global,
                report.mean_ppl_personalized,
                report.mean_ppl_local_only,
                100.0 * report.fraction_improved
            );
        }
        Command::Report { run } => print_json(&cmd_report(&run)?),
    }
    Ok(0)
}

/// Exit code for an error: 1 for invalid input, 2 for failures at run time.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_validation() {
        1
    } else {
        2
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_cli<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            match &e {
                Error::Config(problems) => {
                    eprintln!("error: invalid configuration");
                    for p in problems {
                        eprintln!("  - {p}");
                    }
                }
                other => eprintln!("error: {other}"),
            }
            exit_code(&e)
        }
    }
}

pub fn init_logging() {
    let env = env_logger::Env::default().filter_or("FEDGEN_LOG", "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}
