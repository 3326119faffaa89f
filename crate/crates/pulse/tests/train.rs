//! Training loop tests: loss trends, determinism, checkpoint/resume
//! behaviour, and the oracle/ablation variants.

use pulse::dataset::{build_dataset, DatasetConfig, Split, WindowDataset};
use pulse::model::PulseConfig;
use pulse::train::{self, train_from, TrainConfig, Variant};
use pulse::PulseError;

fn small_dataset() -> WindowDataset {
    build_dataset(&DatasetConfig {
        family: "lorenz".into(),
        sigma: 1.0,
        dt: 0.01,
        n_classes: 3,
        window: 16,
        trials_per_class: 2,
        steps_per_trial: 1000,
        seed: 42,
    })
    .unwrap()
}

fn small_model() -> PulseConfig {
    PulseConfig {
        channels: 3,
        window: 16,
        enc_depth: 2,
        enc_width: 6,
        enc_kernel: 3,
        tv_hidden: 4,
        tv_segments: 2,
        use_tv: true,
        shared_encoders: false,
        init_kernel: 3,
        init_dilation: 1,
        init_hidden: 6,
        init_dim: 4,
        dec_layers: 2,
        dec_hidden: 8,
        t0_draws: 2,
        seed: 0,
    }
}

fn small_train(variant: Variant, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        peak_lr: 2e-3,
        weight_decay: 1e-4,
        batch_size: 16,
        seed: 7,
        variant,
        max_batches_per_epoch: Some(6),
    }
}

#[test]
fn training_reduces_loss() {
    let ds = small_dataset();
    let state = train::train(&ds, &small_model(), &small_train(Variant::Pulse, 5), None)
        .unwrap();
    assert_eq!(state.history.len(), 5);
    let first = state.history.first().unwrap().train_loss;
    let last = state.history.last().unwrap().train_loss;
    assert!(
        last < first,
        "train loss did not decrease: {first} -> {last}"
    );
    assert!(state.best_val.is_finite());
}

#[test]
fn identical_seeds_give_identical_histories() {
    let ds = small_dataset();
    let cfg = small_train(Variant::Pulse, 3);
    let a = train::train(&ds, &small_model(), &cfg, None).unwrap();
    let b = train::train(&ds, &small_model(), &cfg, None).unwrap();
    for (ra, rb) in a.history.iter().zip(&b.history) {
        assert_eq!(ra.train_loss.to_bits(), rb.train_loss.to_bits());
        assert_eq!(ra.val_loss.to_bits(), rb.val_loss.to_bits());
        assert_eq!(ra.lr.to_bits(), rb.lr.to_bits());
    }
    let pa: Vec<u64> = a
        .model
        .params()
        .iter()
        .flat_map(|(_, p)| p.data())
        .map(f64::to_bits)
        .collect();
    let pb: Vec<u64> = b
        .model
        .params()
        .iter()
        .flat_map(|(_, p)| p.data())
        .map(f64::to_bits)
        .collect();
    assert_eq!(pa, pb);
}

#[test]
fn different_seed_changes_the_run() {
    let ds = small_dataset();
    let mut cfg = small_train(Variant::Pulse, 2);
    let a = train::train(&ds, &small_model(), &cfg, None).unwrap();
    cfg.seed = 8;
    let b = train::train(&ds, &small_model(), &cfg, None).unwrap();
    assert_ne!(
        a.history[0].train_loss.to_bits(),
        b.history[0].train_loss.to_bits()
    );
}

#[test]
fn best_checkpoint_reproduces_validation_loss_bitwise() {
    let ds = small_dataset();
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_train(Variant::Pulse, 3);
    let state = train::train(&ds, &small_model(), &cfg, Some(dir.path())).unwrap();
    let (model, _, meta) = pulse::checkpoint::load(&dir.path().join("best.ckpt")).unwrap();
    assert_eq!(meta.val_loss.to_bits(), state.best_val.to_bits());
    // Replaying the recorded epoch's validation pass on the restored
    // parameters must reproduce the stored loss exactly.
    let replay = train::validate(&model, &ds, &cfg, meta.epoch - 1).unwrap();
    assert_eq!(replay.to_bits(), meta.val_loss.to_bits());
    // metrics.jsonl carries one record per epoch.
    let text = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 3);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["epoch", "lr", "train_loss", "val_loss", "wall_time_s"] {
            assert!(v.get(key).is_some(), "metrics line missing {key}");
        }
    }
}

#[test]
fn resume_continues_step_count_and_history() {
    let ds = small_dataset();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_train(Variant::Pulse, 2);
    let first = train::train(&ds, &small_model(), &cfg, Some(dir.path())).unwrap();
    let steps_per_epoch = first.step / 2;
    assert!(steps_per_epoch > 0);

    cfg.epochs = 4;
    let resumed = train_from(
        &ds,
        &small_model(),
        &cfg,
        Some(dir.path()),
        Some(&dir.path().join("last.ckpt")),
    )
    .unwrap();
    assert_eq!(resumed.step, steps_per_epoch * 4, "steps continue, no reset");
    assert_eq!(resumed.history.len(), 2);
    assert_eq!(resumed.history[0].epoch, 2);
    assert_eq!(resumed.history[1].epoch, 3);
    // The appended metrics file now covers all four epochs in order.
    let text = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    let epochs: Vec<u64> = text
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["epoch"]
            .as_u64()
            .unwrap())
        .collect();
    assert_eq!(epochs, vec![0, 1, 2, 3]);
}

#[test]
fn resume_rejects_mismatched_model_config() {
    let ds = small_dataset();
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_train(Variant::Pulse, 1);
    train::train(&ds, &small_model(), &cfg, Some(dir.path())).unwrap();
    let mut other = small_model();
    other.enc_width = 8;
    let err = train_from(
        &ds,
        &other,
        &cfg,
        None,
        Some(&dir.path().join("last.ckpt")),
    )
    .unwrap_err();
    assert!(matches!(err, PulseError::Config(_)));
}

#[test]
fn oracle_positive_pairs_within_classes() {
    let ds = small_dataset();
    let state = train::train_oracle(
        &ds,
        &small_model(),
        &small_train(Variant::Pulse, 2),
        true,
        None,
    )
    .unwrap();
    assert_eq!(state.history.len(), 2);
    assert!(state.history.iter().all(|r| r.train_loss.is_finite()));
}

#[test]
fn oracle_negative_masks_both_inputs_and_logs_extents() {
    let ds = small_dataset();
    let state = train::train_oracle(
        &ds,
        &small_model(),
        &small_train(Variant::Pulse, 1),
        false,
        None,
    )
    .unwrap();
    let mask_events: Vec<&String> = state
        .events
        .iter()
        .filter(|e| e.contains("negative-mask extents"))
        .collect();
    assert!(!mask_events.is_empty(), "no mask extents recorded");
    // Extents must cover 25-50% of the 16-step window: 4..=8.
    for e in &mask_events {
        let nums: Vec<usize> = e
            .chars()
            .map(|c| if c.is_ascii_digit() { c } else { ' ' })
            .collect::<String>()
            .split_whitespace()
            .skip(2) // epoch and batch indices in the tag
            .map(|s| s.parse().unwrap())
            .collect();
        assert!(!nums.is_empty());
        for n in nums {
            assert!((4..=8).contains(&n), "mask extent {n} outside 25-50% band");
        }
    }
}

#[test]
fn random_pairs_logs_cross_label_fraction() {
    let ds = small_dataset();
    let state = train::train_ablation(
        &ds,
        &small_model(),
        &small_train(Variant::Pulse, 1),
        Variant::AblRandomPairs,
        None,
    )
    .unwrap();
    let ev = state
        .events
        .iter()
        .find(|e| e.contains("cross-label pair fraction"))
        .expect("cross-label fraction not logged");
    let frac: f64 = ev.rsplit(' ').next().unwrap().parse().unwrap();
    // Three roughly balanced classes: expect about 2/3 cross pairs.
    assert!(frac > 0.3 && frac < 0.95, "implausible fraction {frac}");
}

#[test]
fn ablation_flags_propagate_to_the_model() {
    let ds = small_dataset();
    let cfg = small_train(Variant::Pulse, 1);
    let no_tv = train::train_ablation(&ds, &small_model(), &cfg, Variant::AblNoTvParams, None)
        .unwrap();
    assert!(!no_tv.model.cfg.use_tv);
    let shared =
        train::train_ablation(&ds, &small_model(), &cfg, Variant::AblSharedEncoders, None)
            .unwrap();
    assert!(shared.model.cfg.shared_encoders);
    let fixed =
        train::train_ablation(&ds, &small_model(), &cfg, Variant::AblFixedT0, None).unwrap();
    assert!(fixed.history[0].train_loss.is_finite());
    // Pulse itself is not an ablation.
    assert!(
        train::train_ablation(&ds, &small_model(), &cfg, Variant::Pulse, None).is_err()
    );
}

#[test]
fn single_window_class_cannot_be_paired() {
    // Hand-built dataset where class 1 contributes one training window.
    let w = 8;
    let m = 1;
    let n = 5;
    let mut windows = Vec::new();
    for i in 0..n {
        windows.extend((0..w * m).map(|t| (i * 13 + t) as f64 * 0.01));
    }
    let ds = WindowDataset {
        windows,
        n,
        w,
        m,
        labels: vec![0, 0, 0, 1, 0],
        splits: vec![
            Split::Train,
            Split::Train,
            Split::Train,
            Split::Train,
            Split::Val,
        ],
        provenance: vec![
            pulse::dataset::Provenance { class: 0, trial: 0, start: 0 };
            n
        ],
        class_params: vec![28.0, 41.0],
        config: DatasetConfig::default(),
    };
    let mut mc = small_model();
    mc.channels = 1;
    mc.window = w;
    let mut tc = small_train(Variant::CrossOraclePositive, 1);
    tc.batch_size = 2;
    let err = train::train(&ds, &mc, &tc, None).unwrap_err();
    assert!(matches!(err, PulseError::Contract(_)), "got {err:?}");
}

#[test]
fn two_consecutive_non_finite_losses_abort() {
    // Astronomically scaled targets force an infinite squared error while
    // keeping the forward pass itself finite.
    let ds = small_dataset();
    let mut blown = ds.clone();
    for v in &mut blown.windows {
        *v *= 1e160;
    }
    let err = train::train(&blown, &small_model(), &small_train(Variant::Pulse, 1), None)
        .unwrap_err();
    match err {
        PulseError::Overflow(msg) => assert!(msg.contains("diverged"), "{msg}"),
        other => panic!("expected divergence abort, got {other:?}"),
    }
}

#[test]
fn model_and_dataset_shapes_must_agree() {
    let ds = small_dataset();
    let mut mc = small_model();
    mc.window = 32;
    let err = train::train(&ds, &mc, &small_train(Variant::Pulse, 1), None).unwrap_err();
    assert!(matches!(err, PulseError::Config(_)));
}

#[test]
fn variant_names_parse_round_trip() {
    for v in [
        Variant::Pulse,
        Variant::CrossOraclePositive,
        Variant::CrossOracleNegative,
        Variant::AblNoTvParams,
        Variant::AblSharedEncoders,
        Variant::AblFixedT0,
        Variant::AblRandomPairs,
    ] {
        let parsed: Variant = v.name().parse().unwrap();
        assert_eq!(parsed, v);
    }
    assert!("pulse-extra".parse::<Variant>().is_err());
    // Short aliases accepted on the command line.
    assert_eq!(
        "oracle-positive".parse::<Variant>().unwrap(),
        Variant::CrossOraclePositive
    );
    assert_eq!("fixed-t0".parse::<Variant>().unwrap(), Variant::AblFixedT0);
}
