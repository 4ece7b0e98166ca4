use fedgen_core::data::{partition, synth_corpus, ClientDataset, PartitionConfig};
use fedgen_core::federation::Strategy;
use fedgen_core::federation::*;
use fedgen_core::linalg::{Matrix, Rng};
use fedgen_core::lora::{param_count, LoraAdapter, LoraConfig};
use fedgen_core::metrics::total_upload;
use fedgen_core::model::{Backbone, ModelConfig, TrainBatch};
use fedgen_core::params::{ParamSet, WeightSet};
use fedgen_core::Error;
use proptest::prelude::*;

fn tiny_model() -> ModelConfig {
    ModelConfig {
        vocab_size: 28,
        dim: 8,
        n_layers: 2,
        n_heads: 2,
        context_len: 12,
        mlp_ratio: 2,
    }
}

fn setup(k: usize) -> (Backbone<f64>, Vec<ClientDataset>, LoraConfig) {
    let cfg = tiny_model();
    let corpus = synth_corpus(3, 8, 13, &mut Rng::seed_from(5)).unwrap();
    let clients = partition(
        &corpus,
        &PartitionConfig {
            n_clients: k,
            concentration: 0.5,
            seed: 2,
            min_samples_per_client: 2,
        },
    )
    .unwrap();
    let backbone = Backbone::init(&cfg, &mut Rng::seed_from(1)).unwrap();
    (backbone, clients, LoraConfig::query_value(2, 4.0, 2))
}

fn fed(k: usize, strategy: Strategy) -> FederationConfig {
    FederationConfig {
        n_clients: k,
        participation: 0.5,
        rounds: 2,
        local_epochs: 2,
        lr: 1e-2,
        batch_size: 3,
        seed: 9,
        strategy,
        ..FederationConfig::default()
    }
}

fn result(id: usize, n_k: usize, params: Params<f64>) -> ClientUpdateResult<f64> {
    ClientUpdateResult {
        client_id: id,
        params,
        n_k,
        loss_trace: vec![],
        steps: 0,
        uplink_params: 0,
        uplink_bytes: 0,
    }
}

fn scalar(v: f64) -> Params<f64> {
    let mut w = WeightSet::new();
    w.insert("x", Matrix::filled(1, 1, v));
    Params::Weights(w)
}

fn random_params(rng: &mut Rng) -> Params<f64> {
    let mut w = WeightSet::new();
    w.insert("a", Matrix::gaussian_init(rng, 3, 4, 1.0));
    w.insert("b", Matrix::gaussian_init(rng, 2, 2, 5.0));
    Params::Weights(w)
}

#[test]
fn selection_counts() {
    for round in 1..5 {
        assert_eq!(
            select_clients(1, round, 7, clients_per_round(1.0, 7)),
            (0..7).collect::<Vec<_>>()
        );
    }
    assert_eq!(select_clients(1, 1, 100, clients_per_round(0.001, 100)).len(), 1);
    let ten = select_clients(1, 3, 100, clients_per_round(0.1, 100));
    assert_eq!(ten.len(), 10);
    assert!(ten.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(ten, select_clients(1, 3, 100, 10));
    assert_ne!(ten, select_clients(1, 4, 100, 10));
}

#[test]
fn aggregation_examples() {
    let single = aggregate(&[result(4, 7, scalar(2.5))]).unwrap();
    assert_eq!(single, scalar(2.5));
    let two = aggregate(&[result(0, 1, scalar(0.0)), result(1, 3, scalar(4.0))]).unwrap();
    assert_eq!(two, scalar(3.0));
    assert!(matches!(aggregate::<f64>(&[]), Err(Error::Protocol(_))));
    assert!(matches!(
        aggregate(&[result(0, 0, scalar(1.0)), result(1, 0, scalar(2.0))]),
        Err(Error::Protocol(_))
    ));
    let mut other = WeightSet::new();
    other.insert("y", Matrix::filled(1, 1, 1.0));
    assert!(aggregate(&[result(0, 1, scalar(1.0)), result(1, 1, Params::Weights(other))]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn aggregation_matches_brute_force(seed in any::<u64>(), n in 1usize..8) {
        let mut rng = Rng::seed_from(seed);
        let results: Vec<_> = (0..n).map(|i| result(i, 1 + rng.below(50), random_params(&mut rng))).collect();
        let got = aggregate(&results).unwrap();
        let total: usize = results.iter().map(|r| r.n_k).sum();
        let w = aggregation_weights(&results).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|&x| x >= 0.0));
        // reverse order, weight applied per element
        let flat: Vec<Vec<f64>> = results.iter().map(|r| r.params.flatten()).collect();
        let want: Vec<f64> = (0..flat[0].len())
            .map(|j| (0..n).rev().map(|i| flat[i][j] * results[i].n_k as f64 / total as f64).sum())
            .collect();
        for (g, w) in got.flatten().iter().zip(&want) {
            prop_assert!((g - w).abs() < 1e-12, "{} vs {}", g, w);
        }
    }

    #[test]
    fn equal_weights_give_plain_mean(seed in any::<u64>(), n in 1usize..8) {
        let mut rng = Rng::seed_from(seed);
        let results: Vec<_> = (0..n).map(|i| result(i, 4, random_params(&mut rng))).collect();
        let got = aggregate(&results).unwrap().flatten();
        for j in 0..got.len() {
            let mean = results.iter().map(|r| r.params.flatten()[j]).sum::<f64>() / n as f64;
            prop_assert!((got[j] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_copies_are_a_fixed_point(seed in any::<u64>(), n in 1usize..8) {
        let mut rng = Rng::seed_from(seed);
        let p = random_params(&mut rng);
        let results: Vec<_> = (0..n).map(|i| result(i, 1 + rng.below(9), p.clone())).collect();
        prop_assert_eq!(aggregate(&results).unwrap(), p);
    }
}

#[test]
fn client_update_step_count_and_frozen_backbone() {
    let (backbone, clients, lora) = setup(2);
    let before = backbone.current_checksum();
    let cfg = fed(2, Strategy::FedGenEdge);
    let global = initial_global(&backbone, &lora, &cfg).unwrap();
    for c in &clients {
        let r = client_update(c, &backbone, &global, &mut None, &cfg, 1)
            .unwrap()
            .unwrap();
        let n_k = c.train.len();
        assert_eq!(r.steps, cfg.local_epochs * n_k.div_ceil(cfg.batch_size));
        assert_eq!(r.loss_trace.len(), cfg.local_epochs);
        assert_eq!(r.n_k, n_k);
        assert_eq!(r.uplink_bytes, 4 * param_count(global.as_adapter().unwrap()) as u64);
        assert_ne!(r.params, global);
    }
    assert_eq!(backbone.current_checksum(), before);
}

#[test]
fn zero_lr_returns_received_params() {
    let (backbone, clients, lora) = setup(2);
    for strategy in [Strategy::FedGenEdge, Strategy::FedAvgFull] {
        let cfg = FederationConfig {
            lr: 0.0,
            ..fed(2, strategy)
        };
        let global = initial_global(&backbone, &lora, &cfg).unwrap();
        let r = client_update(&clients[0], &backbone, &global, &mut None, &cfg, 1)
            .unwrap()
            .unwrap();
        assert_eq!(r.params, global);
    }
}

#[test]
fn empty_client_is_skipped() {
    let (backbone, mut clients, lora) = setup(2);
    clients[0].train.clear();
    let cfg = fed(2, Strategy::FedGenEdge);
    let global = initial_global(&backbone, &lora, &cfg).unwrap();
    assert!(client_update(&clients[0], &backbone, &global, &mut None, &cfg, 1)
        .unwrap()
        .is_none());
}

#[test]
fn zero_rounds_return_initial_state() {
    let (backbone, clients, lora) = setup(4);
    let cfg = FederationConfig {
        rounds: 0,
        ..fed(4, Strategy::FedGenEdge)
    };
    let out = run_training(&clients, &backbone, &lora, &cfg).unwrap();
    assert!(out.records.is_empty());
    assert_eq!(out.global, initial_global(&backbone, &lora, &cfg).unwrap());
    assert_eq!(total_upload(&out.ledger), 0);
}

#[test]
fn ledger_counts_participants_per_round() {
    let (backbone, clients, lora) = setup(4);
    let cfg = fed(4, Strategy::FedGenEdge);
    let out = run_training(&clients, &backbone, &lora, &cfg).unwrap();
    assert_eq!(out.ledger.entries().len(), 4);
    assert_eq!(out.records.len(), 2);
    let per = 4 * param_count(out.global.as_adapter().unwrap()) as u64;
    assert!(out.ledger.entries().iter().all(|e| e.bytes == per));
    assert_eq!(out.records[1].cum_uplink_bytes, 4 * per);
    assert!(out
        .records
        .windows(2)
        .all(|w| w[0].cum_uplink_bytes <= w[1].cum_uplink_bytes));
    assert_eq!(out.final_checksum, backbone.frozen_checksum());
}

#[test]
fn local_only_never_uploads() {
    let (backbone, clients, lora) = setup(4);
    let out = run_training(&clients, &backbone, &lora, &fed(4, Strategy::LocalOnly)).unwrap();
    assert!(out.ledger.entries().is_empty());
    assert!(out.records.iter().all(|r| r.cum_uplink_bytes == 0));
    assert!(out.personal.iter().any(Option::is_some));
    assert_eq!(out.final_checksum, backbone.frozen_checksum());
}

#[test]
fn fedper_uploads_less_than_full_averaging() {
    let (backbone, clients, lora) = setup(4);
    let per = run_training(&clients, &backbone, &lora, &fed(4, Strategy::FedPer)).unwrap();
    let full = run_training(&clients, &backbone, &lora, &fed(4, Strategy::FedAvgFull)).unwrap();
    assert!(total_upload(&per.ledger) < total_upload(&full.ledger));
    assert_eq!(total_upload(&full.ledger), 4 * 4 * backbone.param_count() as u64);
    assert_ne!(full.final_checksum, backbone.frozen_checksum());
    let private = per.personal.iter().flatten().next().unwrap().as_weights().unwrap();
    assert!(private.names().all(|n| backbone.config().is_personal_layer(n)));
}

#[test]
fn ditto_keeps_personal_adapters_and_frozen_backbone() {
    let (backbone, clients, lora) = setup(4);
    let out = run_training(&clients, &backbone, &lora, &fed(4, Strategy::Ditto)).unwrap();
    assert_eq!(out.final_checksum, backbone.frozen_checksum());
    let personal: Vec<_> = out.personal.iter().flatten().collect();
    assert!(!personal.is_empty());
    assert!(personal.iter().all(|p| p.as_adapter().is_some() && **p != out.global));
    assert_eq!(out.ledger.entries().len(), 4);
}

#[test]
fn ditto_without_pull_is_plain_local_objective() {
    let (backbone, clients, lora) = setup(2);
    let cfg = fed(2, Strategy::Ditto);
    let global = initial_global(&backbone, &lora, &cfg).unwrap();
    let mut v = global.clone();
    for (_, m) in v.tensors_mut() {
        m.as_mut_slice().iter_mut().for_each(|x| *x += 0.05);
    }
    let batch = TrainBatch::from_samples(&clients[0].train, 12).unwrap();
    let (l0, g0) = objective_gradient(&backbone, &v, &batch, None).unwrap();
    let (l1, g1) = objective_gradient(
        &backbone,
        &v,
        &batch,
        Some(Proximal {
            anchor: &global,
            lambda: 0.0,
        }),
    )
    .unwrap();
    assert_eq!(l0, l1);
    for (a, b) in g0.flatten().iter().zip(g1.flatten()) {
        assert!((a - b).abs() <= 1e-12);
    }
    let (_, g2) = objective_gradient(
        &backbone,
        &v,
        &batch,
        Some(Proximal {
            anchor: &global,
            lambda: 0.5,
        }),
    )
    .unwrap();
    for ((a, b), (x, w)) in g0
        .flatten()
        .iter()
        .zip(g2.flatten())
        .zip(v.flatten().iter().zip(global.flatten()))
    {
        assert!((b - a - 0.5 * (x - w)).abs() <= 1e-12);
    }
}

#[test]
fn centralized_runs_without_uplink() {
    let (backbone, clients, lora) = setup(4);
    for s in [Strategy::CentralizedLora, Strategy::CentralizedFull] {
        let out = run_training(&clients, &backbone, &lora, &fed(4, s)).unwrap();
        assert_eq!(total_upload(&out.ledger), 0);
        assert!(out.records.iter().all(|r| r.clients == 1));
        assert_eq!(
            out.final_checksum == backbone.frozen_checksum(),
            s == Strategy::CentralizedLora
        );
    }
}

#[test]
fn parallel_matches_sequential() {
    let (backbone, clients, lora) = setup(4);
    for s in [Strategy::FedGenEdge, Strategy::FedPer] {
        let seq = run_training(&clients, &backbone, &lora, &fed(4, s)).unwrap();
        let par = run_training(
            &clients,
            &backbone,
            &lora,
            &FederationConfig {
                parallel_clients: 3,
                ..fed(4, s)
            },
        )
        .unwrap();
        assert_eq!(seq.global, par.global);
        assert_eq!(seq.records, par.records);
        assert_eq!(seq.ledger, par.ledger);
    }
}

#[test]
fn runs_are_seed_deterministic() {
    let (backbone, clients, lora) = setup(4);
    let a = run_training(&clients, &backbone, &lora, &fed(4, Strategy::FedGenEdge)).unwrap();
    let b = run_training(&clients, &backbone, &lora, &fed(4, Strategy::FedGenEdge)).unwrap();
    assert_eq!(a.global, b.global);
    assert_eq!(a.records, b.records);
}

#[test]
fn mismatched_client_count_is_a_config_error() {
    let (backbone, clients, lora) = setup(4);
    let err = run_training(&clients, &backbone, &lora, &fed(5, Strategy::FedGenEdge)).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn personalization_contract() {
    let (backbone, clients, lora) = setup(2);
    let cfg = fed(2, Strategy::FedGenEdge);
    let out = run_training(&clients, &backbone, &lora, &cfg).unwrap();
    let global: LoraAdapter<f64> = out.global.as_adapter().unwrap().clone();
    let snapshot = global.clone();
    let frozen = backbone.current_checksum();
    let frozen_lr = FederationConfig { lr: 0.0, ..cfg.clone() };
    assert_eq!(
        personalize(&clients[0], &backbone, &global, &frozen_lr).unwrap(),
        global
    );
    let tuned = personalize(&clients[0], &backbone, &global, &cfg).unwrap();
    assert_ne!(tuned, global);
    assert_eq!(global, snapshot);
    assert_eq!(backbone.current_checksum(), frozen);
    let mut empty = clients[1].clone();
    empty.train.clear();
    assert_eq!(personalize(&empty, &backbone, &global, &cfg).unwrap(), global);
}

#[test]
fn server_code_never_touches_client_data() {
    let src = include_str!("../src/federation/server.rs");
    for forbidden in ["ClientDataset", "crate::data", ".train", ".test"] {
        assert!(!src.contains(forbidden), "server module mentions {forbidden}");
    }
}
