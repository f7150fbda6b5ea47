use std::collections::BTreeMap;

use fedsim::data::{synth_dataset, AugmentConfig, DatasetManifest, LabeledExample, SynthSpec};
use fedsim::distill::{DistillConfig, Teacher};
use fedsim::fed::{
    fedavg, partition_clients, run_federation, train_centralized, AdapterPair, Client, Federation, FederationConfig,
    LoraStateDict,
};
use fedsim::model::{ModelConfig, MsDeit, Trainable};
use fedsim::rng;
use fedsim::tensor::Tensor;
use fedsim::train::{OptimConfig, TrainConfig};
use fedsim::Error;
use proptest::prelude::*;
use rand::Rng as _;

fn toy_model(classes: usize) -> ModelConfig {
    ModelConfig {
        image_size: 32,
        patch_small: 4,
        patch_large: 8,
        embed_dim: 32,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
        window: 4,
        num_classes: classes,
        token_init_std: 1.0,
        ..ModelConfig::default()
    }
}

fn train_config(lr: f64) -> TrainConfig {
    TrainConfig {
        optim: OptimConfig {
            lr,
            ..OptimConfig::default()
        },
        distill: DistillConfig {
            alpha: 1.0,
            ..DistillConfig::default()
        },
        use_sampler: true,
        augment: AugmentConfig::plain(32),
        trainable: Trainable::Adapters,
    }
}

fn toy_data(classes: usize, per_class: usize) -> (Vec<LabeledExample>, DatasetManifest) {
    synth_dataset(classes, per_class, 32, 4).unwrap()
}

fn random_dict(keys: &[(String, usize, usize, usize)], seed: u64) -> LoraStateDict {
    let mut r = rng::stream(seed, "dict");
    let entries: BTreeMap<String, AdapterPair> = keys
        .iter()
        .map(|(k, rows, rank, cols)| {
            let a = Tensor::from_fn(&[*rows, *rank], |_| r.random_range(-2.0..2.0));
            let b = Tensor::from_fn(&[*rank, *cols], |_| r.random_range(-2.0..2.0));
            (k.clone(), AdapterPair { a, b })
        })
        .collect();
    LoraStateDict::new([7; 32], entries)
}

fn layout() -> impl Strategy<Value = Vec<(String, usize, usize, usize)>> {
    prop::collection::vec((1usize..5, 1usize..3, 1usize..5), 1..4).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (r, k, c))| (format!("branch.block{i}.attn.q"), r, k, c))
            .collect()
    })
}

/// Elementwise `Σ n_c θ_c / Σ n_c`, written out per scalar.
fn brute_force(updates: &[(LoraStateDict, usize)]) -> LoraStateDict {
    let total: usize = updates.iter().map(|(_, n)| n).sum();
    let first = &updates[0].0;
    let mut entries = BTreeMap::new();
    for (k, p) in first.iter() {
        let avg = |pick: fn(&AdapterPair) -> &Tensor| {
            let mut out = pick(p).clone();
            for (i, o) in out.data_mut().iter_mut().enumerate() {
                let mut acc = 0.0;
                for (u, n) in updates {
                    acc += *n as f64 * pick(u.get(k).unwrap()).data()[i];
                }
                *o = acc / total as f64;
            }
            out
        };
        entries.insert(k.clone(), AdapterPair { a: avg(|p| &p.a), b: avg(|p| &p.b) });
    }
    LoraStateDict::new(*first.fingerprint(), entries)
}

fn max_diff(x: &LoraStateDict, y: &LoraStateDict) -> f64 {
    x.iter()
        .map(|(k, p)| {
            let q = y.get(k).unwrap();
            p.a.max_abs_diff(&q.a).max(p.b.max_abs_diff(&q.b))
        })
        .fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn fedavg_matches_brute_force(keys in layout(), weights in prop::collection::vec(1usize..50, 1..6), seed in any::<u64>()) {
        let updates: Vec<_> = weights.iter().enumerate().map(|(i, &n)| (random_dict(&keys, seed ^ i as u64), n)).collect();
        let got = fedavg(&updates).unwrap();
        prop_assert!(max_diff(&got, &brute_force(&updates)) < 1e-12);

        // linear in the inputs
        let scale = 3.5;
        let scaled: Vec<_> = updates.iter().map(|(d, n)| (d.map(|v| v * scale), *n)).collect();
        prop_assert!(max_diff(&fedavg(&scaled).unwrap(), &got.map(|v| v * scale)) < 1e-12);

        // commutative, bit for bit
        let mut rotated = updates.clone();
        rotated.rotate_left(1);
        prop_assert_eq!(fedavg(&rotated).unwrap(), got);
    }

    #[test]
    fn degenerate_weightings(keys in layout(), k in 2usize..6, seed in any::<u64>()) {
        let single = random_dict(&keys, seed);
        prop_assert_eq!(fedavg(&[(single.clone(), 9)]).unwrap(), single);

        // integer-valued entries keep the plain mean exact
        let updates: Vec<_> = (0..k).map(|i| (random_dict(&keys, seed ^ i as u64).map(f64::round), 5)).collect();
        let mean = fedavg(&updates).unwrap();
        for (key, p) in mean.iter() {
            for (i, v) in p.a.data().iter().enumerate() {
                let s: f64 = updates.iter().map(|(u, _)| u.get(key).unwrap().a.data()[i]).sum();
                prop_assert_eq!(*v, s / k as f64);
            }
        }
    }
}

#[test]
fn fedavg_names_the_divergent_key() {
    let keys = vec![("small.block0.attn.q".to_string(), 2, 1, 2)];
    let other = vec![("small.block0.attn.k".to_string(), 2, 1, 2)];
    let err = fedavg(&[(random_dict(&keys, 1), 1), (random_dict(&other, 2), 1)]).unwrap_err();
    assert!(matches!(&err, Error::Protocol(m) if m.contains("small.block0.attn.k")), "{err}");
}

#[test]
fn zero_epochs_return_the_input_and_keep_the_base() {
    let (examples, manifest) = toy_data(4, 8);
    let model = MsDeit::new(toy_model(4), 3).unwrap();
    let part = &partition_clients(&manifest, 2, 0).unwrap()[0];
    let mut client = Client::new(part, &examples, &manifest, &model, train_config(1e-2), 0).unwrap();
    let global = model.lora_state().map(|v| v + 0.125);
    let (out, history) = client.local_train(&global, 0, None).unwrap();
    assert_eq!(out, global);
    assert!(history.is_empty());

    let before = client.base_checksum();
    let (out, history) = client.local_train(&global, 2, None).unwrap();
    assert_eq!(history.len(), 2);
    assert_ne!(out, global);
    assert_eq!(client.base_checksum(), before);
    assert_eq!(before, model.base_checksum());
}

#[test]
fn foreign_adapters_are_rejected() {
    let (examples, manifest) = toy_data(4, 8);
    let model = MsDeit::new(toy_model(4), 3).unwrap();
    let other = MsDeit::new(toy_model(4), 4).unwrap();
    let part = &partition_clients(&manifest, 1, 0).unwrap()[0];
    let mut client = Client::new(part, &examples, &manifest, &model, train_config(1e-2), 0).unwrap();
    assert!(matches!(client.local_train(&other.lora_state(), 1, None), Err(Error::Protocol(_))));
}

#[test]
fn local_training_loss_trends_down() {
    let spec = SynthSpec {
        seed: 4,
        ..SynthSpec::default()
    };
    let (examples, manifest) = spec.generate().unwrap();
    let config = ModelConfig {
        lora_dropout: 0.0,
        ..ModelConfig::desk()
    };
    let model = MsDeit::new(config, 4).unwrap();
    let part = &partition_clients(&manifest, 1, 4).unwrap()[0];
    let train = TrainConfig {
        use_sampler: false,
        ..train_config(1e-3)
    };
    let mut client = Client::new(part, &examples, &manifest, &model, train, 4).unwrap();
    let (_, history) = client.local_train(&model.lora_state(), 20, None).unwrap();
    let down = history.windows(2).filter(|w| w[1].loss < w[0].loss).count();
    let losses: Vec<f64> = history.iter().map(|s| s.loss).collect();
    assert!(down as f64 >= 0.8 * 19.0, "{down}/19 decreasing: {losses:?}");
}

#[test]
fn single_client_federation_is_centralized_training() {
    let (examples, manifest) = toy_data(4, 8);
    let model = MsDeit::new(toy_model(4), 5).unwrap();
    let config = FederationConfig {
        clients: 1,
        rounds: 1,
        local_epochs: 2,
        restore_best: false,
        ..FederationConfig::default()
    };
    let out = run_federation(Federation {
        model: model.clone(),
        examples: &examples,
        manifest: &manifest,
        train: train_config(1e-2),
        config,
        teacher: None,
        seed: 5,
    })
    .unwrap();
    let (central, _) = train_centralized(&model, &examples, &manifest, train_config(1e-2), None, 2, 5).unwrap();
    assert_eq!(out.adapters, central);
}

fn small_run(seed: u64) -> fedsim::fed::FederationOutcome {
    let (examples, manifest) = toy_data(4, 8);
    run_federation(Federation {
        model: MsDeit::new(toy_model(4), seed).unwrap(),
        examples: &examples,
        manifest: &manifest,
        train: train_config(1e-2),
        config: FederationConfig {
            clients: 2,
            rounds: 3,
            ..FederationConfig::default()
        },
        teacher: None,
        seed,
    })
    .unwrap()
}

#[test]
fn runs_are_deterministic_and_account_bytes() {
    let a = small_run(8);
    let b = small_run(8);
    assert_eq!(a.history, b.history);
    assert_eq!(a.adapters, b.adapters);
    let rounds: Vec<usize> = a.history.iter().map(|r| r.round).collect();
    assert_eq!(rounds, vec![1, 2, 3]);
    for r in &a.history {
        assert_eq!(r.adapter_bytes, a.adapters.to_bytes().len());
        assert_eq!(r.bytes_exchanged, 2 * 2 * r.adapter_bytes);
        assert_eq!(r.clients.len(), 2);
    }
    assert_ne!(small_run(9).history, a.history);
}

struct FailingTeacher;

impl Teacher for FailingTeacher {
    fn logits(&self, _: &[Tensor]) -> fedsim::Result<Tensor> {
        Err(Error::Data("teacher unavailable".into()))
    }

    fn name(&self) -> &str {
        "failing"
    }
}

#[test]
fn a_failing_client_aborts_the_round() {
    let (examples, manifest) = toy_data(4, 8);
    let mut train = train_config(1e-2);
    train.distill.alpha = 0.25;
    let err = run_federation(Federation {
        model: MsDeit::new(toy_model(4), 1).unwrap(),
        examples: &examples,
        manifest: &manifest,
        train,
        config: FederationConfig {
            clients: 2,
            rounds: 2,
            ..FederationConfig::default()
        },
        teacher: Some(&FailingTeacher),
        seed: 1,
    })
    .err()
    .unwrap();
    let msg = err.to_string();
    assert!(msg.contains("round 1 aborted") && msg.contains("teacher unavailable"), "{msg}");
}

#[test]
fn best_round_is_restored() {
    let (examples, manifest) = toy_data(4, 8);
    let out = run_federation(Federation {
        model: MsDeit::new(toy_model(4), 2).unwrap(),
        examples: &examples,
        manifest: &manifest,
        train: train_config(0.2),
        config: FederationConfig {
            clients: 2,
            rounds: 8,
            patience: 2,
            ..FederationConfig::default()
        },
        teacher: None,
        seed: 2,
    })
    .unwrap();
    let best = out
        .history
        .iter()
        .min_by(|a, b| a.validation.loss.total_cmp(&b.validation.loss))
        .unwrap();
    assert_eq!(out.best_round, best.round);
    let n = out.history.len();
    if n < 8 {
        assert!(out.history[n - 2..].iter().all(|r| !r.improved));
    }
    let report = fedsim::fed::validate_global(&out.model, &examples, &manifest).unwrap();
    assert_eq!(report.mean_loss, best.validation.loss);
}

/// The client type exposes no accessor that hands out examples or images.
#[test]
fn client_surface_leaks_no_images() {
    let src = include_str!("../src/fed/client.rs");
    let public: Vec<&str> = src.lines().filter(|l| l.trim_start().starts_with("pub fn")).collect();
    assert!(public.len() >= 5);
    for line in public {
        let ret = line.split("->").nth(1).unwrap_or("");
        assert!(!ret.contains("LabeledExample") && !ret.contains("Tensor"), "{line}");
    }
}
