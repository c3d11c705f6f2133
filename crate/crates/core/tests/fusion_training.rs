mod common;

use common::*;
use mer_mce::corpus::EmotionLabel;
use mer_mce::corpus::UtteranceKey;
use mer_mce::features::{class_embedding, Example, Modality};
use mer_mce::fusion::{init_model, predict, train, FusionConfig, Mode};

#[test]
fn analytic_gradients_match_finite_differences_in_eval_mode() {
    for seed in 0..10 {
        let err = gradient_check(seed, Mode::Eval);
        assert!(err < 1e-4, "seed {seed}: relative error {err}");
    }
}

#[test]
fn analytic_gradients_match_finite_differences_with_fixed_dropout_mask() {
    for seed in 0..5 {
        let err = gradient_check(seed, Mode::Train);
        assert!(err < 1e-4, "seed {seed}: relative error {err}");
    }
}

fn small_config(epochs: usize, lr: f64, seed: u64) -> FusionConfig {
    FusionConfig {
        common_dim: 16,
        epochs,
        learning_rate: lr,
        seed,
        ..FusionConfig::default()
    }
}

fn small_dims() -> std::collections::BTreeMap<Modality, usize> {
    Modality::ALL.iter().map(|&m| (m, 14)).collect()
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let dims = small_dims();
    let train_set = synth_dataset(
        &balanced_corpus("tr", 40, 0),
        &Modality::ALL,
        &dims,
        0.5,
        1,
        None,
    );
    let dev_set = synth_dataset(
        &balanced_corpus("dv", 14, 3),
        &Modality::ALL,
        &dims,
        0.5,
        2,
        None,
    );
    let config = small_config(3, 0.0, 4);
    let initial = init_model(&config, &dims).unwrap();
    let (trained, history) = train(initial.clone(), &train_set, &dev_set, &config).unwrap();
    assert_eq!(trained, initial);
    assert_eq!(history.epochs.len(), 3);
}

#[test]
fn training_is_deterministic_for_a_seed() {
    let dims = small_dims();
    let train_set = synth_dataset(
        &balanced_corpus("tr", 60, 0),
        &Modality::ALL,
        &dims,
        0.6,
        1,
        None,
    );
    let dev_set = synth_dataset(
        &balanced_corpus("dv", 21, 2),
        &Modality::ALL,
        &dims,
        0.6,
        2,
        None,
    );
    let config = small_config(5, 0.1, 9);
    let run = || {
        let (model, history) = train(
            init_model(&config, &dims).unwrap(),
            &train_set,
            &dev_set,
            &config,
        )
        .unwrap();
        let mut csv = Vec::new();
        history.write_csv(&mut csv).unwrap();
        (model, csv)
    };
    assert_eq!(run(), run());

    let other = FusionConfig {
        seed: 10,
        ..config.clone()
    };
    let (m2, _) = train(
        init_model(&other, &dims).unwrap(),
        &train_set,
        &dev_set,
        &other,
    )
    .unwrap();
    assert_ne!(run().0, m2);
}

#[test]
fn trained_model_maps_the_pure_joy_embedding_to_joy() {
    let dims = common::default_dims();
    let train_set = synth_dataset(
        &balanced_corpus("tr", 200, 0),
        &Modality::ALL,
        &dims,
        1.0,
        1,
        None,
    );
    let dev_set = synth_dataset(
        &balanced_corpus("dv", 70, 3),
        &Modality::ALL,
        &dims,
        1.0,
        2,
        None,
    );
    let config = FusionConfig {
        epochs: 20,
        seed: 1,
        ..FusionConfig::default()
    };
    let (model, _) = train(
        init_model(&config, &dims).unwrap(),
        &train_set,
        &dev_set,
        &config,
    )
    .unwrap();

    let mut probe = dev_set.clone();
    probe.examples = vec![Example {
        key: UtteranceKey::new("probe", 1),
        features: [(
            Modality::Text,
            class_embedding(EmotionLabel::Joy, dims[&Modality::Text]),
        )]
        .into(),
        label: Some(EmotionLabel::Joy),
    }];
    let predictions = predict(&model, &probe).unwrap();
    assert_eq!(predictions[0].predicted, EmotionLabel::Joy);
    let total: f64 = predictions[0].probabilities.iter().sum();
    assert!((total - 1.0).abs() < 1e-9);
    assert_eq!(predictions[0].attention.len(), 1);
}
