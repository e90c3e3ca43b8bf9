use std::path::PathBuf;

use otfuse::model::Model;
use otfuse::synthdoc::{generate, GeneratorConfig};
use otfuse::trainer::{
    run_ablation_suite, split_fraction, text_only_oracle, train, TrainConfig, TrainError, Variant,
};

fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn read<T: serde::de::DeserializeOwned>(name: &str) -> T {
    serde_json::from_str(&std::fs::read_to_string(config_path(name)).unwrap()).unwrap()
}

#[test]
fn frozen_config_files_match_the_library() {
    assert_eq!(read::<TrainConfig>("benchmark.json"), TrainConfig::benchmark());
    assert_eq!(read::<GeneratorConfig>("generator.json"), GeneratorConfig::default());
}

fn small_set(n_docs: usize) -> Vec<otfuse::synthdoc::SynthDocument> {
    generate(&GeneratorConfig {
        n_docs,
        ..GeneratorConfig::default()
    })
    .unwrap()
}

#[test]
fn zero_learning_rate_leaves_parameters_at_their_initialisation() {
    let docs = small_set(30);
    let (tr, ev) = split_fraction(&docs, 0.2);
    let cfg = TrainConfig {
        epochs: 2,
        learning_rate: 0.0,
        seed: 4,
        ..TrainConfig::default()
    };
    let out = train(&cfg, tr, ev).unwrap();
    let init = Model::init(cfg.model.clone(), cfg.seed).unwrap();
    assert_eq!(out.model.params, init.params);
    assert_eq!(out.history.len(), 2);
}

#[test]
fn training_loss_mostly_decreases_early_on() {
    let docs = generate(&GeneratorConfig::default()).unwrap();
    let (tr, ev) = split_fraction(&docs, 0.2);
    let cfg = TrainConfig {
        epochs: 6,
        ..TrainConfig::default()
    };
    let out = train(&cfg, tr, ev).unwrap();
    let losses: Vec<f64> = out.history.iter().map(|m| m.total_loss).collect();
    let down = losses.windows(2).filter(|w| w[1] <= w[0]).count();
    assert!(down >= 4, "{losses:?}");
}

#[test]
fn ablation_flags_only_toggle_their_component() {
    let base = TrainConfig::benchmark();
    for v in Variant::ALL {
        let c = v.apply(&base);
        let flags = [c.model.disable_ot, c.model.disable_vib, c.model.disable_gate];
        assert_eq!(flags.iter().filter(|f| **f).count(), usize::from(v != Variant::Full));
        assert_eq!(c.learning_rate, base.learning_rate);
    }
}

#[test]
fn no_vib_run_reports_f1_without_a_kl_profile() {
    let docs = small_set(30);
    let (tr, ev) = split_fraction(&docs, 0.2);
    let cfg = Variant::NoVib.apply(&TrainConfig {
        epochs: 1,
        ..TrainConfig::benchmark()
    });
    let out = train(&cfg, tr, ev).unwrap();
    assert!(out.kl_profile.is_none() && out.collapse.is_none());
    assert!((0.0..=1.0).contains(&out.final_f1()));
    assert_eq!(out.history[0].kl_loss, 0.0);
}

#[test]
fn text_only_oracle_golden_values() {
    let docs = generate(&GeneratorConfig::default()).unwrap();
    let (tr, ev) = split_fraction(&docs, 0.2);
    let f1 = text_only_oracle(tr, ev).unwrap();
    assert!((f1 - GOLDEN_ORACLE_RHO_HALF).abs() < 1e-12, "{f1}");

    let amb = generate(&GeneratorConfig {
        visual_cue_strength: 1.0,
        ..GeneratorConfig::default()
    })
    .unwrap();
    let (tr, ev) = split_fraction(&amb, 0.2);
    let f1 = text_only_oracle(tr, ev).unwrap();
    assert!((f1 - GOLDEN_ORACLE_RHO_ONE).abs() < 1e-12, "{f1}");
}

const GOLDEN_ORACLE_RHO_HALF: f64 = 0.3045977011494253;
const GOLDEN_ORACLE_RHO_ONE: f64 = 0.08687258687258688;

#[test]
fn empty_training_set_is_rejected() {
    let docs = small_set(5);
    assert!(matches!(
        train(&TrainConfig::default(), &[], &docs),
        Err(TrainError::EmptySet(_))
    ));
}

/// All four variants over five seeds; about half an hour on one core.
/// Run with `cargo test -p otfuse --test training -- --ignored`.
#[test]
#[ignore]
fn full_ablation_ordering() {
    let docs = generate(&GeneratorConfig::default()).unwrap();
    let base = TrainConfig {
        workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
        ..TrainConfig::benchmark()
    };
    let (tr, ev) = split_fraction(&docs, base.eval_fraction);
    let table = run_ablation_suite(&base, tr, ev).unwrap();
    eprint!("{}", table.to_text());
    let mean = |v| table.row(v).unwrap().f1_mean;
    assert!(mean(Variant::Full) > mean(Variant::NoOt));
    assert!(mean(Variant::Full) >= mean(Variant::NoVib));
}
