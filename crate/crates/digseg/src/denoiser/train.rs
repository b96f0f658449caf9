//! Denoiser training: per-step batch assembly from the shapes corpus,
//! forward noising with the configured pyramid noise, MSE objective and
//! decoupled-weight-decay Adam updates. Every random draw comes from a
//! stream derived from (seed, role, step, sample), so runs replay exactly.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{mask_to_rgb, LatentCodec, Palette};
use crate::conditioning::{embed_class, Vocabulary};
use crate::dataset::{augment, SceneRecord};
use crate::error::{Error, Result};
use crate::nn::optim::AdamW;
use crate::nn::{c, Grads};
use crate::noise::{sample_noise, NoisePyramidConfig};
use crate::rng;
use crate::schedule::NoiseSchedule;

use super::{forward_noising, Denoiser, DenoiserConfig};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub noise: NoisePyramidConfig,
    /// Apply random flip / scale jitter during batch assembly.
    pub augment: bool,
    /// Record a loss-curve point every this many steps.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 20_000,
            batch_size: 4,
            learning_rate: 1e-4,
            weight_decay: 0.01,
            seed: 0,
            noise: NoisePyramidConfig::default(),
            augment: true,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::config("iterations and batch_size must be positive"));
        }
        if self.learning_rate <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::config(format!(
                "bad optimizer settings: lr {}, weight decay {}",
                self.learning_rate, self.weight_decay
            )));
        }
        self.noise.validate()
    }
}

pub struct TrainOutput {
    pub denoiser: Denoiser<f32>,
    pub loss_curve: Vec<(usize, f64)>,
}

/// Train a denoiser from scratch on the given records.
///
/// `snapshot` is called every `snapshot_every` steps (0 disables it) and at
/// the final step, receiving the current model.
#[allow(clippy::too_many_arguments)]
pub fn train(
    records: &[SceneRecord],
    palette: &Palette,
    vocab: &Vocabulary,
    codec: &LatentCodec,
    cfg: &TrainConfig,
    dcfg: &DenoiserConfig,
    schedule: &NoiseSchedule,
    mut progress: impl FnMut(usize, f64),
    snapshot_every: usize,
    mut snapshot: impl FnMut(usize, &Denoiser<f32>) -> Result<()>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    dcfg.validate()?;
    if records.is_empty() {
        return Err(Error::Parameter("empty training set".into()));
    }

    let mut init_rng = rng::stream(cfg.seed, "denoiser-init", 0);
    let mut model: Denoiser<f32> =
        Denoiser::new(&mut init_rng, dcfg.clone(), codec.latent_channels(), schedule.t_max())?;
    let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay);
    let mut curve = Vec::new();

    for step in 0..cfg.iterations {
        let mut pick = rng::stream(cfg.seed, "batch", step as u64);
        let mut grads: Grads<f32> = Grads::new();
        let mut loss_acc = 0.0f64;
        let mut batch_note: Vec<(usize, usize)> = Vec::with_capacity(cfg.batch_size);

        for j in 0..cfg.batch_size {
            let idx = pick.random_range(0..records.len());
            let rec = &records[idx];
            let draw = (step * cfg.batch_size + j) as u64;

            let (img, labels) = if cfg.augment {
                let mut arng = rng::stream(cfg.seed, "aug", draw);
                augment(&rec.image_grid(), &rec.labels, palette.background_id, &mut arng)
            } else {
                (rec.image_grid(), rec.labels.clone())
            };

            // Condition on a class present in the scene; if augmentation
            // cropped everything out, fall back to the pre-augmented labels.
            let mut present: Vec<u8> = labels
                .present_ids()
                .into_iter()
                .filter(|&id| id != palette.background_id)
                .collect();
            if present.is_empty() {
                present = rec
                    .labels
                    .present_ids()
                    .into_iter()
                    .filter(|&id| id != palette.background_id)
                    .collect();
            }
            let mut crng = rng::stream(cfg.seed, "cond", draw);
            let class_id = present[crng.random_range(0..present.len())];
            let class_name = &palette
                .entry(class_id)
                .ok_or_else(|| Error::Codec(format!("class id {class_id} missing")))?
                .name;
            let t_clip = embed_class(class_name, vocab)?;

            let z_x = codec.encode(&img)?;
            let z_y = codec.encode(&mask_to_rgb(&labels, palette)?)?;

            let mut trng = rng::stream(cfg.seed, "t", draw);
            let t = 1 + trng.random_range(0..schedule.t_max());
            batch_note.push((idx, t));
            let eps_seed = rng::derive_seed(cfg.seed, "eps", draw);
            let eps = sample_noise(z_y.shape(), &cfg.noise, t, schedule, eps_seed)?;
            let z_y_t = forward_noising(&z_y, &eps, t, schedule)?;

            // Typed forward/backward (f32), matching `diffusion_loss`.
            let zin = crate::nn::layers::concat_channels(
                &z_y_t.data.mapv(c::<f32>),
                &z_x.data.mapv(c::<f32>),
            );
            let text = model.text_to_elem(&t_clip);
            let (eps_hat, cache) = model.unet.forward(&zin, t - 1, &text);
            let eps_f: ndarray::Array3<f32> = eps.data.mapv(c::<f32>);
            let diff = &eps_hat - &eps_f;
            let n = diff.len() as f64;
            loss_acc += diff.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>() / n;
            let scale = c::<f32>(2.0 / (n * cfg.batch_size as f64));
            let dy = diff.mapv(|v| v * scale);
            model.unet.backward(&cache, &dy, &mut grads);
        }

        let loss = loss_acc / cfg.batch_size as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("loss {loss}; batch (index, t): {batch_note:?}"),
            });
        }
        opt.step(&mut model.unet, &grads);

        if step % cfg.log_every == 0 || step + 1 == cfg.iterations {
            curve.push((step, loss));
            progress(step, loss);
        }
        if snapshot_every > 0 && (step + 1) % snapshot_every == 0 && step + 1 != cfg.iterations {
            snapshot(step + 1, &model)?;
        }
    }
    snapshot(cfg.iterations, &model)?;

    Ok(TrainOutput { denoiser: model, loss_curve: curve })
}
