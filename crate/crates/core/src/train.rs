//! Noise-conditional training, two-phase training and validation sweeps.
//!
//! Every training example draws its own noise parameters, is corrupted with
//! them, and is fed to the conditioner with exactly those parameters. The
//! loss is the MSE against the clean image.

use std::path::PathBuf;
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{mean_metrics, psnr, ssim, MetricRecord};
use crate::model::{save, FilmUnet, TrainingMeta};
use crate::noise::{corrupt, residual_noise_std, sample_params, stream_rng, NoiseDistribution, NoiseKind, NoiseParams};
use crate::optim::{Adam, AdamConfig};
use crate::param::{Group, GroupSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const STREAM_SHUFFLE: u64 = 1;
const STREAM_NOISE: u64 = 2;
/// Validation streams live far away from training streams.
const STREAM_VALIDATION: u64 = 1 << 32;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Loss {
    #[default]
    Mse,
}

/// Sweep grid evaluated after every epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationGrid {
    pub sigma_tr: Vec<f64>,
    pub sigma_val: Vec<f64>,
    pub kind: NoiseKind,
    pub eval_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub noise: NoiseDistribution,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub loss: Loss,
    pub seed: u64,
    pub trainable_groups: GroupSet,
    /// Feed these parameters to the conditioner instead of the sampled ones.
    pub pin_conditioning: Option<NoiseParams>,
    /// Save a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    pub validation: Option<ValidationGrid>,
}

impl TrainConfig {
    pub fn new(noise: NoiseDistribution, epochs: usize, seed: u64) -> Self {
        TrainConfig {
            noise,
            batch_size: 64,
            epochs,
            adam: AdamConfig::default(),
            loss: Loss::Mse,
            seed,
            trainable_groups: Group::ALL.into_iter().collect(),
            pin_conditioning: None,
            checkpoint_every: 0,
            checkpoint_dir: None,
            validation: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.batch_size == 0 {
            problems.push("batch_size must be at least 1".to_string());
        }
        if self.epochs == 0 {
            problems.push("epochs must be at least 1".to_string());
        }
        if !(self.adam.lr > 0.0) {
            problems.push(format!("lr must be positive, got {}", self.adam.lr));
        }
        if self.trainable_groups.is_empty() {
            problems.push("trainable_groups must not be empty".to_string());
        }
        if self.checkpoint_every > 0 && self.checkpoint_dir.is_none() {
            problems.push("checkpoint_every needs checkpoint_dir".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(problems.join("; ")))
        }
    }

    /// FNV-1a digest of the JSON form, as 16 hex digits.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        let mut h: u64 = 0xcbf29ce484222325;
        for b in json.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub seconds: f64,
    pub validation: Vec<MetricRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub config_hash: String,
    pub epochs: Vec<EpochRecord>,
    pub wall_clock_secs: f64,
    pub final_checkpoint: Option<PathBuf>,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }
}

/// Builds a batch: stacked noisy images, conditioning tensor, stacked clean images.
fn make_batch<T: Scalar>(
    data: &Dataset<T>,
    indices: &[usize],
    cfg: &TrainConfig,
    rng: &mut crate::noise::NoiseRng,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let mut noisy = Vec::with_capacity(indices.len());
    let mut used = Vec::with_capacity(indices.len());
    for &i in indices {
        let p = sample_params(&cfg.noise, rng);
        noisy.push(corrupt(&data.images()[i], p, rng));
        used.push(p);
    }
    let cond = match cfg.pin_conditioning {
        Some(p) => vec![p; indices.len()],
        None => used,
    };
    let clean: Vec<&Tensor<T>> = indices.iter().map(|&i| &data.images()[i]).collect();
    let noisy_refs: Vec<&Tensor<T>> = noisy.iter().collect();
    Ok((Tensor::stack(&noisy_refs)?, NoiseParams::batch(&cond), Tensor::stack(&clean)?))
}

/// Trains `model` on `data`, optionally validating after every epoch.
pub fn train<T: Scalar>(
    model: &mut FilmUnet<T>,
    data: &Dataset<T>,
    val: Option<&Dataset<T>>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training dataset"));
    }
    let expected = model.config().input_shape;
    if data.image_shape() != Some(&expected[..]) {
        return crate::error::shape_err("train data", data.image_shape().unwrap_or(&[]), &expected);
    }
    model.set_trainable(&cfg.trainable_groups)?;
    let frozen: Vec<(Group, u64)> = Group::ALL
        .into_iter()
        .filter(|g| !cfg.trainable_groups.contains(g))
        .map(|g| (g, model.group_digest(g)))
        .collect();

    let start = Instant::now();
    let mut order_rng = stream_rng(cfg.seed, STREAM_SHUFFLE);
    let mut noise_rng = stream_rng(cfg.seed, STREAM_NOISE);
    let mut adam = Adam::new(cfg.adam);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport {
        seed: cfg.seed,
        config_hash: cfg.hash(),
        epochs: Vec::with_capacity(cfg.epochs),
        wall_clock_secs: 0.0,
        final_checkpoint: None,
    };

    for epoch in 1..=cfg.epochs {
        let epoch_start = Instant::now();
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (noisy, cond, clean) = make_batch(data, batch, cfg, &mut noise_rng)?;
            let loss = model.loss_and_grads(&noisy, &cond, &clean).map_err(|e| match e {
                Error::Diverged(msg) => Error::Diverged(format!("epoch {epoch}: {msg}")),
                other => other,
            })?;
            adam.step(model.params_mut())?;
            loss_sum += loss * batch.len() as f64;
        }
        model.zero_grads();
        for &(g, d) in &frozen {
            if model.group_digest(g) != d {
                return Err(Error::InvalidArgument(format!("frozen group {g} changed during epoch {epoch}")));
            }
        }
        let train_loss = loss_sum / data.len() as f64;
        let validation = match (&cfg.validation, val) {
            (Some(grid), Some(v)) => validate(model, v, &grid.sigma_tr, &grid.sigma_val, grid.kind, grid.eval_seed)?,
            _ => Vec::new(),
        };
        info!("epoch {epoch}/{}: loss {train_loss:.6}", cfg.epochs);
        report.epochs.push(EpochRecord {
            epoch,
            train_loss,
            seconds: epoch_start.elapsed().as_secs_f64(),
            validation,
        });
        if let (true, Some(dir)) = (cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0, &cfg.checkpoint_dir) {
            std::fs::create_dir_all(dir)?;
            let path = dir.join(format!("epoch{epoch:04}.fuw"));
            let meta = TrainingMeta {
                epoch,
                seed: cfg.seed,
                noise: Some(cfg.noise),
                config_hash: Some(report.config_hash.clone()),
            };
            save(model, &path, Some(&meta), Some(&adam))?;
            report.final_checkpoint = Some(path);
        }
    }
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Phase 1 trains the backbone at fixed noise with the conditioning input
/// pinned to zero and the conditioner frozen at its identity init; phase 2
/// freezes the backbone and trains only the conditioner over a distribution.
pub fn two_phase_train<T: Scalar>(
    model: &mut FilmUnet<T>,
    data: &Dataset<T>,
    val: Option<&Dataset<T>>,
    phase1: &TrainConfig,
    phase2: &TrainConfig,
) -> Result<(TrainReport, TrainReport)> {
    let backbone: GroupSet = [Group::Backbone].into();
    let film: GroupSet = [Group::Film].into();
    let mut problems = Vec::new();
    if !phase1.noise.is_degenerate() {
        problems.push("phase 1 noise must be a fixed parameter pair");
    }
    if phase2.noise.is_degenerate() {
        problems.push("phase 2 noise must be a distribution");
    }
    if phase1.trainable_groups.intersection(&phase2.trainable_groups).next().is_some() {
        problems.push("phase 1 and phase 2 trainable groups overlap");
    }
    if phase1.trainable_groups != backbone {
        problems.push("phase 1 must train only the backbone");
    }
    if phase2.trainable_groups != film {
        problems.push("phase 2 must train only the film group");
    }
    if !problems.is_empty() {
        return Err(Error::InvalidArgument(problems.join("; ")));
    }
    let mut p1 = phase1.clone();
    p1.pin_conditioning = Some(NoiseParams::default());
    let first = train(model, data, val, &p1)?;
    let backbone_digest = model.group_digest(Group::Backbone);
    let second = train(model, data, val, phase2)?;
    if model.group_digest(Group::Backbone) != backbone_digest {
        return Err(Error::InvalidArgument("backbone changed during phase 2".into()));
    }
    Ok((first, second))
}

/// Images evaluated per forward pass during validation.
const EVAL_BATCH: usize = 64;

/// Corrupts each validation image at every `sigma_val` level (same seed and
/// stream for every level and every conditioning value), denoises it
/// conditioned at every `sigma_tr`, and averages PSNR, SSIM and residual
/// noise per cell. Records come out ordered by `sigma_tr`, then `sigma_val`.
pub fn validate<T: Scalar>(
    model: &FilmUnet<T>,
    data: &Dataset<T>,
    sigma_tr_grid: &[f64],
    sigma_val_grid: &[f64],
    kind: NoiseKind,
    eval_seed: u64,
) -> Result<Vec<MetricRecord>> {
    if sigma_tr_grid.is_empty() || sigma_val_grid.is_empty() {
        return Err(Error::Empty("validation grid"));
    }
    if data.is_empty() {
        return Err(Error::Empty("validation dataset"));
    }
    let mut cells = vec![Vec::new(); sigma_tr_grid.len() * sigma_val_grid.len()];
    for (j, &level) in sigma_val_grid.iter().enumerate() {
        let noisy = corrupt_for_eval(data, kind, level, eval_seed);
        for (i, &tr) in sigma_tr_grid.iter().enumerate() {
            let cond = kind.params(tr);
            for (chunk_clean, chunk_noisy) in data.images().chunks(EVAL_BATCH).zip(noisy.chunks(EVAL_BATCH)) {
                let refs: Vec<&Tensor<T>> = chunk_noisy.iter().collect();
                let out = model.denoise(&Tensor::stack(&refs)?, cond)?;
                for (k, clean) in chunk_clean.iter().enumerate() {
                    let den = out.batch_item(k)?;
                    cells[i * sigma_val_grid.len() + j].push(MetricRecord {
                        sigma_tr: cond,
                        sigma_val: level,
                        noise_kind: kind,
                        psnr_db: psnr(&den, clean, 1.0)?,
                        ssim: ssim(&den, clean)?,
                        residual_std: residual_noise_std(&den, clean)?,
                        n_images: 1,
                    });
                }
            }
        }
    }
    cells.iter().map(|c| mean_metrics(c)).collect()
}

/// Mean metrics of `model` conditioned at `cond` on `data` corrupted at
/// `level` of `kind`, using the same validation stream as [`validate`].
pub fn evaluate<T: Scalar>(
    model: &FilmUnet<T>,
    data: &Dataset<T>,
    kind: NoiseKind,
    level: f64,
    cond: NoiseParams,
    eval_seed: u64,
) -> Result<MetricRecord> {
    if data.is_empty() {
        return Err(Error::Empty("validation dataset"));
    }
    let noisy = corrupt_for_eval(data, kind, level, eval_seed);
    let mut recs = Vec::with_capacity(data.len());
    for (chunk_clean, chunk_noisy) in data.images().chunks(EVAL_BATCH).zip(noisy.chunks(EVAL_BATCH)) {
        let refs: Vec<&Tensor<T>> = chunk_noisy.iter().collect();
        let out = model.denoise(&Tensor::stack(&refs)?, cond)?;
        for (k, clean) in chunk_clean.iter().enumerate() {
            let den = out.batch_item(k)?;
            recs.push(MetricRecord {
                sigma_tr: cond,
                sigma_val: level,
                noise_kind: kind,
                psnr_db: psnr(&den, clean, 1.0)?,
                ssim: ssim(&den, clean)?,
                residual_std: residual_noise_std(&den, clean)?,
                n_images: 1,
            });
        }
    }
    mean_metrics(&recs)
}

/// Mean metrics of the noisy inputs themselves (no denoising) at each level.
pub fn noisy_baseline<T: Scalar>(
    data: &Dataset<T>,
    sigma_val_grid: &[f64],
    kind: NoiseKind,
    eval_seed: u64,
) -> Result<Vec<MetricRecord>> {
    sigma_val_grid
        .iter()
        .map(|&level| {
            let noisy = corrupt_for_eval(data, kind, level, eval_seed);
            let recs = data
                .images()
                .iter()
                .zip(&noisy)
                .map(|(x, y)| {
                    Ok(MetricRecord {
                        sigma_tr: NoiseParams::default(),
                        sigma_val: level,
                        noise_kind: kind,
                        psnr_db: psnr(y, x, 1.0)?,
                        ssim: ssim(y, x)?,
                        residual_std: residual_noise_std(y, x)?,
                        n_images: 1,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            mean_metrics(&recs)
        })
        .collect()
}

/// Corrupted copies of `data` at one level, from the validation stream.
pub fn corrupt_for_eval<T: Scalar>(data: &Dataset<T>, kind: NoiseKind, level: f64, eval_seed: u64) -> Vec<Tensor<T>> {
    let mut rng = stream_rng(eval_seed, STREAM_VALIDATION + kind as u64);
    data.images().iter().map(|x| corrupt(x, kind.params(level), &mut rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Source, Split};
    use crate::noise::Range;

    #[test]
    fn conditioning_is_the_sampled_noise() {
        let images = (0..6).map(|i| Tensor::<f64>::full(&[3, 4, 4], i as f64 / 6.0)).collect();
        let data = Dataset::new(images, Source::Cifar10Binary, Split::Train).unwrap();
        let dist = NoiseDistribution::new(Range::new(0.0, 0.2).unwrap(), Range::new(0.0, 0.5).unwrap()).unwrap();
        let cfg = TrainConfig::new(dist, 1, 3);
        let idx = [4, 1, 5];
        let (noisy, cond, clean) = make_batch(&data, &idx, &cfg, &mut stream_rng(3, STREAM_NOISE)).unwrap();

        let mut rng = stream_rng(3, STREAM_NOISE);
        for (k, &i) in idx.iter().enumerate() {
            let p = sample_params(&dist, &mut rng);
            let expected = corrupt(&data.images()[i], p, &mut rng);
            assert_eq!(cond.data()[2 * k..2 * k + 2], [p.a, p.sigma]);
            assert_eq!(noisy.batch_item(k).unwrap(), expected);
            assert_eq!(clean.batch_item(k).unwrap(), data.images()[i]);
        }
    }

    #[test]
    fn pinned_conditioning_overrides_the_sample() {
        let data = Dataset::new(vec![Tensor::<f64>::zeros(&[3, 4, 4]); 2], Source::Cifar10Binary, Split::Train).unwrap();
        let mut cfg = TrainConfig::new(NoiseDistribution::fixed(NoiseParams::gaussian(1.0)), 1, 0);
        cfg.pin_conditioning = Some(NoiseParams::default());
        let (noisy, cond, _) = make_batch(&data, &[0, 1], &cfg, &mut stream_rng(0, STREAM_NOISE)).unwrap();
        assert!(cond.data().iter().all(|&v| v == 0.0));
        assert!(noisy.data().iter().any(|&v| v != 0.0));
    }
}
