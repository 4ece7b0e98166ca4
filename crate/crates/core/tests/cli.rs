use std::path::{Path, PathBuf};

use fedgen_core::cli::{
    cmd_ablate, cmd_gradcheck, cmd_personalize, cmd_pretrain, cmd_report, cmd_run, resolve, run_cli, CommonArgs, Sweep,
    ADAPTER_FILE, MANIFEST_FILE,
};
use fedgen_core::config::ExperimentConfig;
use fedgen_core::federation::Strategy;
use fedgen_core::metrics::read_personalization_csv;
use fedgen_core::model::Backbone;

const TINY: &str = r#"
seed = 3

[data]
n_topics = 3
docs_per_topic = 8
doc_len = 13
n_clients = 4

[model]
vocab_size = 28
dim = 8
n_layers = 1
n_heads = 2
context_len = 12
mlp_ratio = 2

[lora]
rank = 2
scaling = 4.0

[pretrain]
steps = 5
batch_size = 4
lr = 0.01

[federation]
participation = 0.5
rounds = 3
local_epochs = 2
lr = 0.01
batch_size = 4
"#;

fn tiny(dir: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::parse(TINY).unwrap();
    c.output.dir = dir.to_path_buf();
    c.validate().unwrap();
    c
}

fn with_backbone(dir: &Path) -> ExperimentConfig {
    let c = tiny(dir);
    cmd_pretrain(&c).unwrap();
    c
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

fn data_rows(p: impl AsRef<Path>) -> usize {
    String::from_utf8(read(p)).unwrap().lines().count() - 1
}

#[test]
fn pretrain_is_idempotent_and_loads_back() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let sa = cmd_pretrain(&tiny(a.path())).unwrap();
    let sb = cmd_pretrain(&tiny(b.path())).unwrap();
    assert_eq!(read(&sa.path), read(&sb.path));
    let loaded = Backbone::<f64>::load(&sa.path).unwrap();
    assert_eq!(loaded.frozen_checksum(), sa.checksum);
    assert_eq!(loaded.current_checksum(), sa.checksum);
}

#[test]
fn missing_corpus_files_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[data]\nsource = \"files\"\n").unwrap();
    let err = resolve(&CommonArgs {
        config: Some(cfg.clone()),
        ..CommonArgs::default()
    })
    .unwrap_err();
    assert!(err.is_validation());
    assert!(err.to_string().contains("data.files"), "{err}");
    assert_eq!(run_cli(["fedgen", "pretrain", "--config", cfg.to_str().unwrap()]), 1);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(run_cli(["fedgen", "run", "--strategy", "fedsgd", "--out", out]), 1);
    // no checkpoint yet
    assert_eq!(run_cli(["fedgen", "run", "--out", out]), 2);
    assert_eq!(run_cli(["fedgen", "frobnicate"]), 1);
    assert_eq!(run_cli(["fedgen", "gradcheck"]), 0);
}

#[test]
fn run_writes_expected_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = with_backbone(dir.path());
    let s = cmd_run(&cfg).unwrap();
    assert_eq!(s.rounds, 3);
    assert_eq!(data_rows(dir.path().join("rounds.csv")), 3);
    assert_eq!(data_rows(dir.path().join("ledger.csv")), 3 * 2);
    assert_eq!(s.backbone_checksum, s.final_checksum);
    for f in [
        MANIFEST_FILE,
        ADAPTER_FILE,
        "summary.json",
        "partition.json",
        "rounds.json",
        "ledger.json",
    ] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let header = String::from_utf8(read(dir.path().join("rounds.csv"))).unwrap();
    assert!(header.starts_with("round,ppl_global,mean_local_loss,clients,cum_uplink_bytes\n"));
}

#[test]
fn local_only_ledger_is_empty() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = with_backbone(dir.path());
    cfg.federation.strategy = Strategy::LocalOnly;
    cmd_run(&cfg).unwrap();
    assert_eq!(data_rows(dir.path().join("ledger.csv")), 0);
    assert!(dir.path().join("personal").exists());
}

#[test]
fn reruns_and_manifests_reproduce_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = with_backbone(dir.path());
    let files = ["rounds.csv", "ledger.csv", ADAPTER_FILE, MANIFEST_FILE, "summary.json"];
    cmd_run(&cfg).unwrap();
    let first: Vec<Vec<u8>> = files.iter().map(|f| read(dir.path().join(f))).collect();
    cmd_run(&cfg).unwrap();
    let second: Vec<Vec<u8>> = files.iter().map(|f| read(dir.path().join(f))).collect();
    assert_eq!(first, second);

    let replay = ExperimentConfig::load(&dir.path().join(MANIFEST_FILE)).unwrap();
    cmd_run(&replay).unwrap();
    let third: Vec<Vec<u8>> = files.iter().map(|f| read(dir.path().join(f))).collect();
    assert_eq!(first, third);
}

#[test]
fn full_weight_run_writes_weights() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = with_backbone(dir.path());
    cfg.federation.strategy = Strategy::FedAvgFull;
    let s = cmd_run(&cfg).unwrap();
    assert_ne!(s.backbone_checksum, s.final_checksum);
    let w = Backbone::<f64>::load(&dir.path().join("final_weights.bin")).unwrap();
    assert_eq!(w.frozen_checksum(), s.final_checksum);
}

#[test]
fn rank_ablation_rows_and_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = with_backbone(dir.path());
    let rows = cmd_ablate(&cfg, Sweep::Rank, &[1, 2, 4]).unwrap();
    assert_eq!(rows.iter().map(|r| r.value).collect::<Vec<_>>(), vec![1, 2, 4]);
    assert!(rows.windows(2).all(|w| w[0].uplink_bytes < w[1].uplink_bytes));
    assert_eq!(data_rows(dir.path().join("summary.csv")), 3);
}

#[test]
fn single_value_sweep_matches_plain_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = with_backbone(dir.path());
    cmd_ablate(&cfg, Sweep::Epochs, &[2]).unwrap();
    cmd_run(&cfg).unwrap();
    for f in ["rounds.csv", "ledger.csv", ADAPTER_FILE] {
        assert_eq!(
            read(dir.path().join("epochs_2").join(f)),
            read(dir.path().join(f)),
            "{f}"
        );
    }
}

#[test]
fn gradcheck_default_passes_with_layers() {
    let report = cmd_gradcheck(&ExperimentConfig::default()).unwrap();
    assert!(report.passed);
    assert!(report.max_rel_error < 1e-4);
    assert!(!report.per_layer.is_empty());
}

#[test]
fn personalization_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = with_backbone(dir.path());
    cmd_run(&cfg).unwrap();

    let report = cmd_personalize(dir.path(), None, None).unwrap();
    assert_eq!(report.clients.len(), cfg.data.n_clients);
    let rows = read_personalization_csv(&dir.path().join("personalization.csv")).unwrap();
    assert_eq!(rows.len(), cfg.data.n_clients);
    let mean = rows.iter().map(|r| r.gain).sum::<f64>() / rows.len() as f64;
    assert!((mean - report.mean_gain).abs() <= 1e-5 * report.mean_gain.abs().max(1.0));

    let mut frozen = cfg.clone();
    frozen.federation.lr = 0.0;
    let still = cmd_personalize(dir.path(), Some(&frozen), None).unwrap();
    assert!(still.clients.iter().all(|c| c.gain == 0.0));

    let r = cmd_report(dir.path()).unwrap();
    assert_eq!(r.rounds, 3);
    assert!(r.personalization_mean_gain.is_some());
}

#[test]
fn personalization_needs_an_adapter() {
    let dir = tempfile::tempdir().unwrap();
    let err = cmd_personalize(dir.path(), Some(&tiny(dir.path())), None).unwrap_err();
    assert!(err.to_string().contains(ADAPTER_FILE), "{err}");
}

#[test]
fn binary_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path: PathBuf = dir.path().join("tiny.toml");
    std::fs::write(&cfg_path, TINY).unwrap();
    let out = dir.path().join("run");
    let bin = env!("CARGO_BIN_EXE_fedgen");
    let common = ["--config", cfg_path.to_str().unwrap(), "--out", out.to_str().unwrap()];
    for cmd in ["pretrain", "run"] {
        let status = std::process::Command::new(bin).arg(cmd).args(common).output().unwrap();
        assert!(
            status.status.success(),
            "{cmd}: {}",
            String::from_utf8_lossy(&status.stderr)
        );
    }
    let report = std::process::Command::new(bin)
        .args(["report", "--run", out.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(report.status.success());
    assert!(String::from_utf8_lossy(&report.stdout).contains("total_uplink_bytes"));
}
