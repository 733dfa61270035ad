use super::*;
use crate::encoders::ModelConfig;
use crate::synthgen::{generate_dataset, SynthConfig, WindowConfig};
use crate::training::{input_shape, training_windows, Method, TrainConfig, TrainSetup, Trainer};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// `per` windows of every (animal, class) pair with features from `f`.
fn synthetic(
    animals: u32,
    classes: u16,
    per: usize,
    mut f: impl FnMut(u32, u16) -> Vec<f64>,
) -> Embeddings {
    let mut values = Vec::new();
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut dim = 0;
    for a in 0..animals {
        for c in 0..classes {
            for _ in 0..per {
                let v = f(a, c);
                dim = v.len();
                values.extend(v);
                ids.push(a);
                labels.push(Some(c));
            }
        }
    }
    let n = ids.len();
    Embeddings {
        values: Tensor::new(&[n, dim], values).unwrap(),
        animal_ids: ids,
        trials: vec![0; n],
        labels,
        timestamps: (0..n).map(|i| i as f64).collect(),
    }
}

fn one_hot(i: usize, n: usize) -> Vec<f64> {
    (0..n).map(|k| f64::from(u8::from(k == i))).collect()
}

fn fast() -> EvalConfig {
    EvalConfig {
        probe: ProbeConfig {
            epochs: 30,
            ..ProbeConfig::default()
        },
        ..EvalConfig::default()
    }
}

fn sigma(p: f64, n: usize) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}

#[test]
fn label_code_is_perfect_for_actions() {
    let emb = synthetic(4, 6, 8, |_, c| one_hot(c as usize, 6));
    let s = action_recognition_single(&emb, &fast()).unwrap();
    assert_eq!(s.mean_accuracy, 1.0);
    assert_eq!(s.fold_accuracies.len(), 16);
    let m = action_recognition_multi(&emb, &fast()).unwrap();
    assert_eq!(m.mean_accuracy, 1.0);
    assert!((m.chance - 1.0 / 6.0).abs() < 1e-15);
}

#[test]
fn constant_embeddings_hit_chance() {
    let emb = synthetic(8, 6, 20, |_, _| vec![0.25; 5]);
    let id = identity_recognition(&emb, &fast()).unwrap();
    assert!(
        (id.mean_accuracy - 0.125).abs() <= 3.0 * sigma(0.125, id.n_samples),
        "{}",
        id.mean_accuracy
    );
    assert!((id.chance - 0.125).abs() < 1e-15);
    let s = action_recognition_single(&emb, &fast()).unwrap();
    let n: usize = s.n_samples;
    assert!((s.mean_accuracy - 1.0 / 6.0).abs() <= 3.0 * sigma(1.0 / 6.0, n));
}

#[test]
fn constant_embeddings_predict_majority_class() {
    // class 0 holds half of every animal's windows
    let mut emb = synthetic(2, 3, 12, |_, _| vec![1.0, 2.0]);
    for i in 0..emb.len() {
        if i % 3 == 0 {
            emb.labels[i] = Some(0);
        }
    }
    let majority = emb.labels.iter().filter(|l| **l == Some(0)).count() as f64 / emb.len() as f64;
    let s = action_recognition_single(&emb, &fast()).unwrap();
    assert!(
        (s.mean_accuracy - majority).abs() < 0.05,
        "{} vs {majority}",
        s.mean_accuracy
    );
}

#[test]
fn identity_code_is_perfect_for_identity_and_useless_across_animals() {
    let emb = synthetic(8, 6, 6, |a, _| one_hot(a as usize, 8));
    assert_eq!(
        identity_recognition(&emb, &fast()).unwrap().mean_accuracy,
        1.0
    );
    let m = action_recognition_multi(&emb, &fast()).unwrap();
    // a held-out animal's code was never seen, so the probe answers with a constant class
    assert!(m.mean_accuracy <= 1.0 / 6.0 + 1e-12, "{}", m.mean_accuracy);
}

#[test]
fn random_embeddings_stay_near_chance() {
    let mut r = rng::stream(5, "emb", 0);
    let emb = synthetic(4, 6, 30, |_, _| {
        let v: Vec<f64> = (0..16).map(|_| StandardNormal.sample(&mut r)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    });
    let s = action_recognition_single(&emb, &fast()).unwrap();
    assert!(
        (s.mean_accuracy - 1.0 / 6.0).abs() <= 3.0 * sigma(1.0 / 6.0, s.n_samples) + 0.02,
        "{}",
        s.mean_accuracy
    );
}

#[test]
fn shuffled_labels_give_chance() {
    let mut r = rng::stream(6, "emb", 0);
    let mut emb = synthetic(4, 4, 40, |_, c| {
        let mut v = one_hot(c as usize, 4);
        v.iter_mut().for_each(|x| *x += 0.1 * r.gen::<f64>());
        v
    });
    let mut labels = emb.labels.clone();
    rand::seq::SliceRandom::shuffle(labels.as_mut_slice(), &mut rng::stream(7, "perm", 0));
    emb.labels = labels;
    let m = action_recognition_multi(&emb, &fast()).unwrap();
    assert!(
        (m.mean_accuracy - 0.25).abs() <= 3.0 * sigma(0.25, m.n_samples),
        "{}",
        m.mean_accuracy
    );
}

#[test]
fn merged_domains_hide_identity() {
    let mut r = rng::stream(8, "merged", 0);
    let centroids: Vec<Vec<f64>> = (0..6)
        .map(|c| one_hot(c, 8).iter().map(|v| 3.0 * v).collect())
        .collect();
    let emb = synthetic(8, 6, 25, |_, c| {
        centroids[c as usize]
            .iter()
            .map(|&m| m + Distribution::<f64>::sample(&StandardNormal, &mut r))
            .collect::<Vec<f64>>()
    });
    let id = identity_recognition(&emb, &fast()).unwrap();
    assert!(
        (id.mean_accuracy - 0.125).abs() <= 3.0 * sigma(0.125, id.n_samples),
        "{}",
        id.mean_accuracy
    );
    assert_eq!(id.n_samples, 1000);
}

#[test]
fn report_mean_and_json() {
    let emb = synthetic(3, 2, 10, |a, c| vec![a as f64, c as f64]);
    let rep = action_recognition_multi(
        &emb,
        &EvalConfig {
            fraction: 0.5,
            ..fast()
        },
    )
    .unwrap();
    let mean = rep.fold_accuracies.iter().sum::<f64>() / rep.fold_accuracies.len() as f64;
    assert!((rep.mean_accuracy - mean).abs() < 1e-12);
    assert!(rep.fold_accuracies.iter().all(|a| (0.0..=1.0).contains(a)));
    let json = serde_json::to_string(&rep).unwrap();
    let back: EvalReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, rep);
    assert_eq!(
        rep,
        action_recognition_multi(
            &emb,
            &EvalConfig {
                fraction: 0.5,
                ..fast()
            }
        )
        .unwrap()
    );
}

#[test]
fn sparse_animals_are_skipped() {
    let mut emb = synthetic(3, 3, 6, |_, c| one_hot(c as usize, 3));
    // animal 2 keeps only two windows of class 0
    for i in 0..emb.len() {
        if emb.animal_ids[i] == 2 && emb.labels[i] == Some(0) && i % 6 > 1 {
            emb.labels[i] = None;
        }
    }
    let s = action_recognition_single(&emb, &fast()).unwrap();
    assert_eq!(s.skipped_animals, vec![2]);
    let unlabeled = Embeddings {
        labels: vec![None; emb.len()],
        ..emb
    };
    assert!(matches!(
        action_recognition_single(&unlabeled, &fast()),
        Err(Error::MissingLabels(_))
    ));
}

fn tiny_dataset() -> crate::synthgen::SyntheticDataset {
    generate_dataset(&SynthConfig {
        n_animals: 3,
        trials_per_animal: 2,
        trial_seconds: 12.0,
        pose_dim: 6,
        image_extent: 8,
        n_actions: 3,
        n_units: 6,
        ..SynthConfig::default()
    })
    .unwrap()
}

#[test]
fn embeddings_from_a_checkpoint() {
    let data = tiny_dataset();
    let setup = TrainSetup {
        train: TrainConfig {
            method: Method::Ours,
            epochs: 1,
            warmup_epochs: 1,
            batch_size: 8,
            holdout_trials: 1,
            ..TrainConfig::default()
        },
        model: ModelConfig {
            embed_dim: 8,
            attention_dim: 4,
            frame_dim: 8,
            temporal_channels: vec![8, 8, 8],
            hidden_dim: 8,
            ..ModelConfig::default()
        },
        windows: WindowConfig::default(),
        ..TrainSetup::default()
    };
    let set = training_windows(&data, &setup).unwrap();
    let mut t =
        Trainer::<f64>::new(setup.clone(), &set, input_shape(&data, &setup.windows), 3).unwrap();
    t.run_epoch().unwrap();
    let ck = t.checkpoint();
    let all = evaluation_windows(&data, &ck, Split::All).unwrap();
    let held = evaluation_windows(&data, &ck, Split::Heldout).unwrap();
    assert_eq!(held.len() + set.len(), all.len());
    let a = embed(&ck, &all, Representation::PreProjection, 7).unwrap();
    assert_eq!(a.len(), all.len());
    assert_eq!(a.dim(), 8);
    let b = embed(&ck, &all, Representation::PreProjection, 64).unwrap();
    assert_eq!(
        a.values
            .data()
            .iter()
            .map(|v| v.to_bits())
            .collect::<Vec<_>>(),
        b.values
            .data()
            .iter()
            .map(|v| v.to_bits())
            .collect::<Vec<_>>()
    );
    let first = &a.values.data()[..8];
    assert!(a.values.data().chunks(8).any(|r| r != first));
    let z = embed(&ck, &all, Representation::PostProjection, 16).unwrap();
    for row in z.values.data().chunks(8) {
        assert!((row.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-9);
    }
    let mut other = data.clone();
    other.config.pose_dim = 9;
    let mismatched = WindowSet { pose_dim: 9, ..all };
    assert!(embed(&ck, &mismatched, Representation::PreProjection, 8).is_err());
}

#[test]
fn raw_neural_input_reveals_identity() {
    let data = tiny_dataset();
    let set = WindowSet::build(&data, &WindowConfig::default(), |_| true).unwrap();
    let raw = raw_neural_features(&set).unwrap();
    let id = identity_recognition(&raw, &fast()).unwrap();
    assert!(id.mean_accuracy > 0.9, "{}", id.mean_accuracy);
}
