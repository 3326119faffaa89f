//! Training loops: the self-supervised objective, the label-assisted
//! oracle pair variants, and the ablations, with one-cycle scheduling,
//! gradient clipping, checkpointing, and line-delimited JSON metrics.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::ops::mse_time_mean;
use crate::autodiff::Tensor;
use crate::checkpoint::{self, CheckpointMeta};
use crate::dataset::{config_hash, Split, WindowDataset};
use crate::error::{PulseError, Result};
use crate::model::{PulseConfig, PulseModel};
use crate::optim::{clip_global_norm, one_cycle_lr, AdamW, GRAD_CLIP};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Self-supervised pseudo-pair training.
    Pulse,
    /// Label-assisted pairs of same-class windows.
    CrossOraclePositive,
    /// Same-class pairs with independent temporal zero-masking on both
    /// encoder inputs (clean reconstruction target).
    CrossOracleNegative,
    /// Θ = θ only (no time-varying component).
    AblNoTvParams,
    /// Initial-condition encoder reads the system encoder's features.
    AblSharedEncoders,
    /// Crop position fixed at t0 = 1 (plain reconstruction).
    AblFixedT0,
    /// Pairs drawn without regard to labels.
    AblRandomPairs,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Pulse => "pulse",
            Variant::CrossOraclePositive => "cross-oracle-positive",
            Variant::CrossOracleNegative => "cross-oracle-negative",
            Variant::AblNoTvParams => "abl-no-tv-params",
            Variant::AblSharedEncoders => "abl-shared-encoders",
            Variant::AblFixedT0 => "abl-fixed-t0",
            Variant::AblRandomPairs => "abl-random-pairs",
        }
    }

    fn is_paired(&self) -> bool {
        matches!(
            self,
            Variant::CrossOraclePositive
                | Variant::CrossOracleNegative
                | Variant::AblRandomPairs
        )
    }
}

impl std::str::FromStr for Variant {
    type Err = PulseError;
    fn from_str(s: &str) -> Result<Variant> {
        Ok(match s {
            "pulse" => Variant::Pulse,
            "oracle-positive" | "cross-oracle-positive" => Variant::CrossOraclePositive,
            "oracle-negative" | "cross-oracle-negative" => Variant::CrossOracleNegative,
            "no-tv-params" | "abl-no-tv-params" => Variant::AblNoTvParams,
            "shared-encoders" | "abl-shared-encoders" => Variant::AblSharedEncoders,
            "fixed-t0" | "abl-fixed-t0" => Variant::AblFixedT0,
            "random-pairs" | "abl-random-pairs" => Variant::AblRandomPairs,
            other => {
                return Err(PulseError::Parameter(format!("unknown variant '{other}'")))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub variant: Variant,
    /// Optional cap on optimizer steps per epoch (desk-scale runs).
    pub max_batches_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            peak_lr: 1e-3,
            weight_decay: 1e-4,
            batch_size: 64,
            seed: 0,
            variant: Variant::Pulse,
            max_batches_per_epoch: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub wall_time_s: f64,
}

pub struct TrainState {
    pub model: PulseModel,
    pub optimizer: AdamW,
    pub step: u64,
    pub best_val: f64,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    /// Free-form training events (skipped steps, mask extents, pair
    /// statistics).
    pub events: Vec<String>,
}

impl std::fmt::Debug for TrainState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TrainState")
            .field("step", &self.step)
            .field("best_val", &self.best_val)
            .field("best_epoch", &self.best_epoch)
            .field("epochs_recorded", &self.history.len())
            .finish()
    }
}

/// Assemble `[b, W, M]` window batches from dataset indices.
pub fn gather(ds: &WindowDataset, idxs: &[usize]) -> Tensor {
    let mut data = Vec::with_capacity(idxs.len() * ds.w * ds.m);
    for &i in idxs {
        data.extend_from_slice(ds.window(i));
    }
    Tensor::new(&[idxs.len(), ds.w, ds.m], data).unwrap()
}

fn draw_t0s(variant: Variant, cfg: &PulseConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if variant == Variant::AblFixedT0 {
        return vec![1];
    }
    let hi = (cfg.window / 2).max(1);
    (0..cfg.t0_draws).map(|_| rng.gen_range(1..=hi)).collect()
}

/// Same-label index pairs (positive/negative oracles) or unconstrained
/// pairs (random-pairs ablation). Returns (pairs, cross-label fraction).
fn make_pairs(
    ds: &WindowDataset,
    idxs: &[usize],
    variant: Variant,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<(usize, usize)>, f64)> {
    let mut pairs = Vec::new();
    if variant == Variant::AblRandomPairs {
        let mut a = idxs.to_vec();
        let mut b = idxs.to_vec();
        a.shuffle(rng);
        b.shuffle(rng);
        pairs.extend(a.into_iter().zip(b));
    } else {
        let n_classes = ds.class_params.len();
        let mut by_label: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
        for &i in idxs {
            by_label[ds.labels[i]].push(i);
        }
        for (label, group) in by_label.iter_mut().enumerate() {
            if group.len() == 1 {
                return Err(PulseError::Contract(format!(
                    "class {label} has a single window; cannot form pairs"
                )));
            }
            group.shuffle(rng);
            for chunk in group.chunks_exact(2) {
                pairs.push((chunk[0], chunk[1]));
            }
        }
        pairs.shuffle(rng);
    }
    let cross = pairs
        .iter()
        .filter(|(a, b)| ds.labels[*a] != ds.labels[*b])
        .count() as f64
        / pairs.len().max(1) as f64;
    Ok((pairs, cross))
}

/// Zero-fill an independent contiguous run covering 25–50% of each
/// window. Returns the masked batch and the extents used.
fn mask_batch(batch: &Tensor, rng: &mut ChaCha8Rng) -> (Tensor, Vec<usize>) {
    let s = batch.shape().to_vec();
    let (b, w, m) = (s[0], s[1], s[2]);
    let mut data = batch.data();
    let lo = (w as f64 * 0.25).ceil() as usize;
    let hi = (w as f64 * 0.5).floor() as usize;
    let mut extents = Vec::with_capacity(b);
    for bi in 0..b {
        let len = rng.gen_range(lo..=hi.max(lo));
        let start = rng.gen_range(0..=w - len);
        for t in start..start + len {
            for c in 0..m {
                data[(bi * w + t) * m + c] = 0.0;
            }
        }
        extents.push(len);
    }
    (Tensor::new(&s, data).unwrap(), extents)
}

fn paired_loss(
    model: &PulseModel,
    variant: Variant,
    y_i: &Tensor,
    y_j: &Tensor,
    rng: &mut ChaCha8Rng,
    events: &mut Vec<String>,
    tag: &str,
) -> Result<Tensor> {
    if variant == Variant::CrossOracleNegative {
        let (masked_i, ext_i) = mask_batch(y_i, rng);
        let (masked_j, ext_j) = mask_batch(y_j, rng);
        events.push(format!(
            "{tag} negative-mask extents i={ext_i:?} j={ext_j:?}"
        ));
        let rep = model.f_sys(&masked_i)?;
        let x0 = model.f_init(&masked_j, 1)?;
        let pred = model.decode(&x0, &rep.theta_seq)?;
        mse_time_mean(&pred, y_j)
    } else {
        model.loss_cross(y_i, y_j)
    }
}

fn epoch_batches(n: usize, batch_size: usize, cap: Option<usize>) -> usize {
    let full = n / batch_size.max(1);
    let b = full.max(1).min(cap.unwrap_or(usize::MAX));
    b
}

/// One full pass over the given split, returning the mean batch loss.
/// When `opt` is provided, gradients are applied (training); otherwise
/// the pass is evaluation-only.
#[allow(clippy::too_many_arguments)]
fn run_epoch(
    model: &PulseModel,
    ds: &WindowDataset,
    split: Split,
    cfg: &TrainConfig,
    epoch: usize,
    total_steps: u64,
    state: &mut Option<(&mut AdamW, &mut u64)>,
    events: &mut Vec<String>,
) -> Result<(f64, f64)> {
    let training = state.is_some();
    let label = if training { "train" } else { "val" };
    let mut order = ds.split_indices(split);
    let mut rng = rng::stream(cfg.seed, &format!("{label}/{epoch}"));
    if training {
        order.shuffle(&mut rng);
    }
    let n_batches = epoch_batches(
        if cfg.variant.is_paired() { order.len() / 2 } else { order.len() },
        cfg.batch_size,
        if training { cfg.max_batches_per_epoch } else { Some(4) },
    );

    let mut pair_iter: Option<Vec<(usize, usize)>> = None;
    if cfg.variant.is_paired() {
        let (pairs, cross) = make_pairs(ds, &order, cfg.variant, &mut rng)?;
        if cfg.variant == Variant::AblRandomPairs && training {
            events.push(format!("{label}/{epoch} cross-label pair fraction {cross:.4}"));
        }
        pair_iter = Some(pairs);
    }

    let mut losses = Vec::new();
    let mut consecutive_bad = 0usize;
    let mut last_lr = 0.0;
    for b in 0..n_batches {
        let loss = if let Some(pairs) = &pair_iter {
            let chunk: Vec<(usize, usize)> = pairs
                .iter()
                .skip(b * cfg.batch_size)
                .take(cfg.batch_size)
                .copied()
                .collect();
            if chunk.is_empty() {
                break;
            }
            let ia: Vec<usize> = chunk.iter().map(|p| p.0).collect();
            let ij: Vec<usize> = chunk.iter().map(|p| p.1).collect();
            let y_i = gather(ds, &ia);
            let y_j = gather(ds, &ij);
            paired_loss(
                model,
                cfg.variant,
                &y_i,
                &y_j,
                &mut rng,
                events,
                &format!("{label}/{epoch}/{b}"),
            )?
        } else {
            let idxs: Vec<usize> = order
                .iter()
                .skip(b * cfg.batch_size)
                .take(cfg.batch_size)
                .copied()
                .collect();
            if idxs.is_empty() {
                break;
            }
            let y = gather(ds, &idxs);
            let t0s = draw_t0s(cfg.variant, &model.cfg, &mut rng);
            model.loss_pulse(&y, &t0s)?
        };
        let value = loss.item();
        if !value.is_finite() {
            consecutive_bad += 1;
            events.push(format!("{label}/{epoch}/{b} non-finite loss, step skipped"));
            if consecutive_bad >= 2 {
                return Err(PulseError::Overflow(format!(
                    "training diverged: two consecutive non-finite losses at epoch \
                     {epoch}, batch {b}"
                )));
            }
            continue;
        }
        consecutive_bad = 0;
        losses.push(value);
        if let Some((opt, step)) = state.as_mut() {
            let params = model.params();
            for (_, p) in &params {
                p.zero_grad();
            }
            loss.backward()?;
            clip_global_norm(&params, GRAD_CLIP);
            let lr = one_cycle_lr(
                (**step).min(total_steps - 1) as usize,
                total_steps as usize,
                cfg.peak_lr,
            );
            last_lr = lr;
            opt.step(&params, lr)?;
            **step += 1;
        }
    }
    let mean = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
    Ok((mean, last_lr))
}

/// Evaluation-only pass over the validation split, reproducing the exact
/// loss a training run would record for this epoch index.
pub fn validate(
    model: &PulseModel,
    ds: &WindowDataset,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    let mut events = Vec::new();
    let (loss, _) = run_epoch(model, ds, Split::Val, cfg, epoch, 1, &mut None, &mut events)?;
    Ok(loss)
}

/// Train from scratch or resume from a checkpoint; writes `best.ckpt`,
/// `last.ckpt`, and `metrics.jsonl` under `out_dir` when given.
pub fn train_from(
    ds: &WindowDataset,
    model_cfg: &PulseConfig,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    resume: Option<&Path>,
) -> Result<TrainState> {
    if model_cfg.window != ds.w || model_cfg.channels != ds.m {
        return Err(PulseError::Config(format!(
            "model expects [{}, {}] windows, dataset has [{}, {}]",
            model_cfg.window, model_cfg.channels, ds.w, ds.m
        )));
    }
    let mut mc = model_cfg.clone();
    match cfg.variant {
        Variant::AblNoTvParams => mc.use_tv = false,
        Variant::AblSharedEncoders => mc.shared_encoders = true,
        _ => {}
    }
    mc.seed = rng::derive_seed(cfg.seed, "init");
    let hash = config_hash(&(&mc, cfg));

    let (model, optimizer, start_epoch, start_step, mut best_val, mut best_epoch) =
        if let Some(path) = resume {
            let (model, opt, meta) = checkpoint::load(path)?;
            if meta.model_cfg != mc {
                return Err(PulseError::Config(format!(
                    "checkpoint {} was produced by a different model configuration",
                    path.display()
                )));
            }
            let mut opt = opt.ok_or_else(|| {
                PulseError::Format("checkpoint carries no optimizer state".into())
            })?;
            opt.weight_decay = cfg.weight_decay;
            (model, opt, meta.epoch, meta.step, meta.val_loss, meta.epoch)
        } else {
            let model = PulseModel::new(mc.clone())?;
            let opt = AdamW::new(&model.params(), cfg.weight_decay);
            (model, opt, 0, 0, f64::INFINITY, 0)
        };

    let train_n = {
        let n = ds.split_indices(Split::Train).len();
        if cfg.variant.is_paired() {
            n / 2
        } else {
            n
        }
    };
    let bpe = epoch_batches(train_n, cfg.batch_size, cfg.max_batches_per_epoch) as u64;
    let total_steps = bpe * cfg.epochs as u64;
    if total_steps == 0 {
        return Err(PulseError::Config("no training batches available".into()));
    }

    let mut state = TrainState {
        model,
        optimizer,
        step: start_step,
        best_val,
        best_epoch,
        history: Vec::new(),
        events: Vec::new(),
    };

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }

    for epoch in start_epoch..cfg.epochs {
        let t0 = Instant::now();
        let (train_loss, lr) = {
            let mut opt_ref = Some((&mut state.optimizer, &mut state.step));
            run_epoch(
                &state.model,
                ds,
                Split::Train,
                cfg,
                epoch,
                total_steps,
                &mut opt_ref,
                &mut state.events,
            )?
        };
        let (val_loss, _) = run_epoch(
            &state.model,
            ds,
            Split::Val,
            cfg,
            epoch,
            total_steps,
            &mut None,
            &mut state.events,
        )?;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss,
            val_loss,
            wall_time_s: t0.elapsed().as_secs_f64(),
        };
        if let Some(dir) = out_dir {
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.join("metrics.jsonl"))?;
            writeln!(
                f,
                "{}",
                serde_json::to_string(&record)
                    .map_err(|e| PulseError::Format(e.to_string()))?
            )?;
        }
        state.history.push(record);
        let meta = CheckpointMeta {
            model_cfg: mc.clone(),
            step: state.step,
            epoch: epoch + 1,
            val_loss,
            config_hash: hash.clone(),
        };
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            if let Some(dir) = out_dir {
                checkpoint::save(&dir.join("best.ckpt"), &state.model, Some(&state.optimizer), &meta)?;
            }
        }
        if let Some(dir) = out_dir {
            checkpoint::save(&dir.join("last.ckpt"), &state.model, Some(&state.optimizer), &meta)?;
        }
    }
    state.best_val = best_val;
    state.best_epoch = best_epoch;
    Ok(state)
}

/// Train the self-supervised objective (or an ablation already encoded in
/// `cfg.variant`).
pub fn train(
    ds: &WindowDataset,
    model_cfg: &PulseConfig,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainState> {
    train_from(ds, model_cfg, cfg, out_dir, None)
}

/// Label-assisted oracle training.
pub fn train_oracle(
    ds: &WindowDataset,
    model_cfg: &PulseConfig,
    cfg: &TrainConfig,
    positive: bool,
    out_dir: Option<&Path>,
) -> Result<TrainState> {
    let mut cfg = cfg.clone();
    cfg.variant = if positive {
        Variant::CrossOraclePositive
    } else {
        Variant::CrossOracleNegative
    };
    train_from(ds, model_cfg, &cfg, out_dir, None)
}

/// One of the four ablations.
pub fn train_ablation(
    ds: &WindowDataset,
    model_cfg: &PulseConfig,
    cfg: &TrainConfig,
    which: Variant,
    out_dir: Option<&Path>,
) -> Result<TrainState> {
    if !matches!(
        which,
        Variant::AblNoTvParams
            | Variant::AblSharedEncoders
            | Variant::AblFixedT0
            | Variant::AblRandomPairs
    ) {
        return Err(PulseError::Parameter(format!(
            "{} is not an ablation variant",
            which.name()
        )));
    }
    let mut cfg = cfg.clone();
    cfg.variant = which;
    train_from(ds, model_cfg, &cfg, out_dir, None)
}
