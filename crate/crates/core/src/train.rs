//! Supervised training of 2D and 3D segmenters.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::archive::{params_to_archive, WeightArchive};
use crate::metrics::model_grid;
use crate::numerics::ops::sigmoid;
use crate::numerics::{adam_step, AdamConfig, AdamState, Rng, Scalar};
use crate::parallel::map_indexed;
use crate::vit::{VitConfig, VitError, VitParams};
use crate::volume::{blockify, filter_training_blocks, Volume3D, VolumeError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("logits and target differ in length ({0} vs {1})")]
    ShapeMismatch(usize, usize),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error(transparent)]
    Model(#[from] VitError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Minimum label foreground ratio for a block to enter training.
    pub tau: f32,
    /// `(w_bce, w_dice)`.
    pub loss_weights: (f32, f32),
    /// Epoch interval for the checkpoint callback; 0 disables it.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            epochs: 10,
            batch_size: 4,
            seed: 0,
            tau: 0.01,
            loss_weights: (0.5, 0.5),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let (wb, wd) = self.loss_weights;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::BadConfig(format!("lr must be positive, got {}", self.lr)));
        }
        if !(wb >= 0.0 && wd >= 0.0 && wb + wd > 0.0) {
            return Err(TrainError::BadConfig(format!(
                "loss weights must be non-negative with positive sum, got ({wb}, {wd})"
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(TrainError::BadConfig(format!(
                "tau must lie in [0, 1], got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

/// `w_bce * BCE + w_dice * (1 - soft Dice)` on sigmoid probabilities, with
/// the gradient with respect to the logits.
///
/// BCE is the mean of `max(z, 0) - z t + ln(1 + e^-|z|)`; the soft Dice uses
/// additive smoothing 1.
pub fn seg_loss<S: Scalar>(logits: &[S], target: &[S], weights: (f32, f32)) -> Result<(S, Vec<S>), TrainError> {
    if logits.len() != target.len() {
        return Err(TrainError::ShapeMismatch(logits.len(), target.len()));
    }
    let n = S::lit(logits.len().max(1) as f64);
    let (wb, wd) = (S::lit(weights.0 as f64), S::lit(weights.1 as f64));
    let one = S::one();
    let two = S::lit(2.0);
    let p: Vec<S> = logits.iter().map(|&z| sigmoid(z)).collect();

    let mut bce = S::zero();
    for (&z, &t) in logits.iter().zip(target) {
        bce += z.max(S::zero()) - z * t + (-z.abs()).exp().ln_1p();
    }
    bce /= n;

    let inter: S = p.iter().zip(target).map(|(&a, &b)| a * b).sum();
    let sp: S = p.iter().copied().sum();
    let st: S = target.iter().copied().sum();
    let den = sp + st + one;
    let num = two * inter + one;
    let loss = wb * bce + wd * (one - num / den);

    let grad = p
        .iter()
        .zip(target)
        .map(|(&pi, &ti)| {
            let d_dice_dp = (two * ti * den - num) / (den * den);
            wb * (pi - ti) / n - wd * d_dice_dp * pi * (one - pi)
        })
        .collect();
    Ok((loss, grad))
}

/// One training pair: flat `[C, D, H, W]` input and `[D, H, W]` target.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Vec<f32>,
    pub target: Vec<f32>,
}

/// Cuts aligned image/label volumes into model-sized blocks and keeps those
/// whose foreground ratio reaches `tau`. A depth-1 model gets z-slices.
pub fn block_samples(image: &Volume3D, label: &Volume3D, cfg: &VitConfig, tau: f32) -> Result<Vec<Sample>, TrainError> {
    if cfg.in_channels != 1 {
        return Err(TrainError::BadConfig(
            "volume training expects single-channel models".into(),
        ));
    }
    let grid = model_grid(cfg);
    let pairs = filter_training_blocks(blockify(image, &grid)?, blockify(label, &grid)?, tau)?;
    Ok(pairs
        .into_iter()
        .map(|(i, l)| Sample {
            input: i.data,
            target: l.data,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f32,
    pub dice: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub wall_time_s: f64,
}

impl TrainReport {
    /// One `{"epoch","loss","dice"}` object per line.
    pub fn to_json_lines(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("plain struct") + "\n")
            .collect()
    }
}

struct ItemResult {
    loss: f32,
    grads: Vec<f32>,
    inter: u64,
    fg_pred: u64,
    fg_true: u64,
}

fn item_step(params: &VitParams<f32>, cfg: &VitConfig, s: &Sample, w: (f32, f32)) -> Result<ItemResult, TrainError> {
    let (logits, cache) = params.forward_cached(cfg, &s.input)?;
    let (loss, dlogits) = seg_loss(logits.data(), &s.target, w)?;
    let grads = params.backward(cfg, &cache, &dlogits)?.flatten();
    let (mut inter, mut fg_pred, mut fg_true) = (0, 0, 0);
    for (&z, &t) in logits.data().iter().zip(&s.target) {
        let (p, t) = (z >= 0.0, t >= 0.5);
        inter += (p && t) as u64;
        fg_pred += p as u64;
        fg_true += t as u64;
    }
    Ok(ItemResult {
        loss,
        grads,
        inter,
        fg_pred,
        fg_true,
    })
}

/// Minibatch Adam on `dataset`.
///
/// Each epoch visits the samples in a permutation drawn from
/// `Rng::derive(cfg.seed, epoch)`. Per-item gradients may be computed in
/// parallel but are summed in batch order, so results are bitwise
/// reproducible. `on_epoch` receives the stats and current parameters after
/// every epoch.
pub fn fit(
    model: &VitConfig,
    init: VitParams<f32>,
    dataset: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats, &VitParams<f32>),
) -> Result<(VitParams<f32>, TrainReport), TrainError> {
    cfg.validate()?;
    model.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let started = Instant::now();
    let mut params = init;
    let mut flat = params.flatten();
    let mut state = AdamState::new(flat.len());
    let adam = AdamConfig::with_lr(cfg.lr as f64);
    let mut epochs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let order = Rng::derive(cfg.seed, epoch as u64).permutation(dataset.len());
        let (mut loss_sum, mut dice_sum, mut batches) = (0.0f64, 0.0f64, 0usize);
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let results = map_indexed(idx.len(), |i| {
                item_step(&params, model, &dataset[idx[i]], cfg.loss_weights)
            });
            let mut grad = vec![0.0f32; flat.len()];
            let (mut loss, mut inter, mut fg) = (0.0f64, 0u64, 0u64);
            for r in results {
                let r = r?;
                if !r.loss.is_finite() {
                    return Err(TrainError::NonFiniteLoss { epoch, batch });
                }
                loss += r.loss as f64;
                inter += r.inter;
                fg += r.fg_pred + r.fg_true;
                for (g, x) in grad.iter_mut().zip(&r.grads) {
                    *g += x;
                }
            }
            let scale = 1.0 / idx.len() as f32;
            grad.iter_mut().for_each(|g| *g *= scale);
            adam_step(&mut flat, &grad, &mut state, &adam);
            if flat.iter().any(|v| !v.is_finite()) {
                return Err(TrainError::NonFiniteLoss { epoch, batch });
            }
            params.unflatten_from(&flat);
            loss_sum += loss / idx.len() as f64;
            dice_sum += if fg == 0 { 1.0 } else { 2.0 * inter as f64 / fg as f64 };
            batches += 1;
        }
        let stats = EpochStats {
            epoch,
            loss: (loss_sum / batches as f64) as f32,
            dice: (dice_sum / batches as f64) as f32,
        };
        on_epoch(&stats, &params);
        epochs.push(stats);
    }
    Ok((
        params,
        TrainReport {
            epochs,
            wall_time_s: started.elapsed().as_secs_f64(),
        },
    ))
}

/// Trains a 2D model from a fresh initialization on slice samples and
/// exports it under canonical names.
pub fn pretrain_2d(
    slices: &[Sample],
    model: &VitConfig,
    cfg: &TrainConfig,
) -> Result<(WeightArchive, VitParams<f32>, TrainReport), TrainError> {
    if model.depth != 1 {
        return Err(TrainError::BadConfig("pretraining needs a depth-1 model".into()));
    }
    let init = VitParams::init(model, &mut Rng::derive(cfg.seed, u64::MAX))?;
    let (params, report) = fit(model, init, slices, cfg, |_, _| {})?;
    Ok((params_to_archive(&params), params, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_difference_check;
    use crate::vit::ModelKind;

    #[test]
    fn perfect_prediction_has_near_zero_loss() {
        let (loss, _) = seg_loss(&[30.0f32; 8], &[1.0; 8], (0.5, 0.5)).unwrap();
        assert!(loss.abs() < 1e-3, "{loss}");
    }

    #[test]
    fn half_probabilities_closed_form() {
        let n = 18;
        let (loss, _) = seg_loss(&vec![0.0f64; n], &vec![0.5; n], (0.5, 0.5)).unwrap();
        let dice = (2.0 * 0.25 * n as f64 + 1.0) / (n as f64 + 1.0);
        let want = 0.5 * std::f64::consts::LN_2 + 0.5 * (1.0 - dice);
        assert!((loss - want).abs() < 1e-12);
    }

    #[test]
    fn loss_shape_mismatch() {
        assert!(matches!(
            seg_loss(&[0.0f32; 3], &[0.0; 4], (1.0, 0.0)),
            Err(TrainError::ShapeMismatch(3, 4))
        ));
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        for seed in 0..3 {
            let mut rng = Rng::new(seed);
            let z: Vec<f64> = (0..18).map(|_| rng.normal() * 2.0).collect();
            let t: Vec<f64> = (0..18).map(|_| rng.below(2) as f64).collect();
            for w in [(0.5, 0.5), (1.0, 0.0), (0.0, 1.0)] {
                let (_, g) = seg_loss(&z, &t, w).unwrap();
                let err = finite_difference_check(|p| seg_loss(p, &t, w).unwrap().0, &z, &g, 1e-5);
                assert!(err < 1e-6, "{err}");
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig {
                lr: 0.0,
                ..Default::default()
            },
            TrainConfig {
                loss_weights: (0.0, 0.0),
                ..Default::default()
            },
            TrainConfig {
                loss_weights: (-1.0, 2.0),
                ..Default::default()
            },
            TrainConfig {
                batch_size: 0,
                ..Default::default()
            },
        ] {
            assert!(matches!(bad.validate(), Err(TrainError::BadConfig(_))));
        }
    }

    fn tiny() -> VitConfig {
        VitConfig {
            kind: ModelKind::ThreeD,
            img_hw: (4, 4),
            patch: 2,
            depth: 2,
            in_channels: 1,
            embed_dim: 8,
            layers: 1,
            heads: 2,
            mlp_ratio: 2,
        }
    }

    fn dataset(n: usize, seed: u64) -> Vec<Sample> {
        let mut rng = Rng::new(seed);
        (0..n)
            .map(|_| {
                let target: Vec<f32> = (0..32).map(|_| rng.below(2) as f32).collect();
                let input = target
                    .iter()
                    .map(|&t| t * 0.8 + 0.1 + rng.normal() as f32 * 0.05)
                    .collect();
                Sample { input, target }
            })
            .collect()
    }

    #[test]
    fn zero_epochs_leave_params_unchanged() {
        let init = VitParams::init(&tiny(), &mut Rng::new(1)).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let (p, r) = fit(&tiny(), init.clone(), &dataset(2, 0), &cfg, |_, _| {}).unwrap();
        assert_eq!(p, init);
        assert!(r.epochs.is_empty());
    }

    #[test]
    fn empty_dataset_rejected() {
        let init = VitParams::init(&tiny(), &mut Rng::new(1)).unwrap();
        assert!(matches!(
            fit(&tiny(), init, &[], &TrainConfig::default(), |_, _| {}),
            Err(TrainError::EmptyDataset)
        ));
    }

    #[test]
    fn same_seed_is_bitwise_reproducible() {
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 2,
            lr: 1e-3,
            ..Default::default()
        };
        let data = dataset(5, 2);
        let run = || {
            let init = VitParams::init(&tiny(), &mut Rng::new(3)).unwrap();
            fit(&tiny(), init, &data, &cfg, |_, _| {}).unwrap()
        };
        let (p1, r1) = run();
        let (p2, r2) = run();
        assert_eq!(r1.epochs, r2.epochs);
        assert_eq!(
            p1.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            p2.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(r1.to_json_lines().lines().count(), 3);
        assert!(r1.to_json_lines().starts_with(r#"{"epoch":0,"loss":"#));
    }

    #[test]
    fn tiny_overfit() {
        let cfg = TrainConfig {
            epochs: 200,
            batch_size: 4,
            lr: 3e-3,
            ..Default::default()
        };
        let data = dataset(4, 4);
        let init = VitParams::init(&tiny(), &mut Rng::new(5)).unwrap();
        let (_, r) = fit(&tiny(), init, &data, &cfg, |_, _| {}).unwrap();
        let first = r.epochs[0].loss;
        let last = r.epochs.last().unwrap();
        assert!(last.loss < 0.2 * first, "{first} -> {}", last.loss);
        assert!(last.dice > 0.95, "dice {}", last.dice);
    }
}
