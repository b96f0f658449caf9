//! Segmentation-consistent denoiser: configuration, the noise-prediction
//! interface shared by the real model and test oracles, forward noising and
//! the diffusion MSE objective.

pub mod train;
pub mod unet;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::conditioning::TextEmbedding;
use crate::error::{Error, Result};
use crate::grid::{LatentGrid, Space};
use crate::nn::{c, Elem};
use crate::noise::{sample_noise, NoisePyramidConfig};
use crate::rng;
use crate::schedule::NoiseSchedule;

pub use train::{train, TrainConfig, TrainOutput};
pub use unet::{CondUNet, UNetShape};

/// Architecture knobs for the conditional U-Net.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DenoiserConfig {
    pub base_width: usize,
    /// Number of downsampling stages.
    pub depth: usize,
    pub d_text: usize,
    pub t_embed_dim: usize,
    /// Downsampling factors receiving text cross-attention.
    pub attn_scales: Vec<usize>,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        // The two coarsest scales of a depth-2 net get cross-attention.
        Self { base_width: 32, depth: 2, d_text: 64, t_embed_dim: 64, attn_scales: vec![2, 4] }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 || self.depth == 0 {
            return Err(Error::config("base_width and depth must be positive"));
        }
        if self.t_embed_dim % 2 != 0 {
            return Err(Error::config("t_embed_dim must be even"));
        }
        Ok(())
    }

    pub fn shape_for(&self, latent_channels: usize) -> UNetShape {
        UNetShape {
            in_channels: 2 * latent_channels,
            out_channels: latent_channels,
            base_width: self.base_width,
            depth: self.depth,
            t_embed_dim: self.t_embed_dim,
            d_text: self.d_text,
            attn_scales: self.attn_scales.clone(),
            n_ctx: 4,
        }
    }
}

/// Anything that predicts the noise residual for a noisy mask latent.
/// Implemented by the trained U-Net and by analytic test oracles.
pub trait NoisePredictor {
    /// `t_net` is the 0-based network timestep in `[0, T-1]`.
    fn predict_noise(
        &self,
        z_y_t: &LatentGrid,
        z_x: &LatentGrid,
        t_net: usize,
        t_clip: &TextEmbedding,
    ) -> Result<LatentGrid>;
}

/// Trained denoiser: the U-Net plus the latent geometry it expects.
pub struct Denoiser<F: Elem> {
    pub config: DenoiserConfig,
    pub unet: CondUNet<F>,
    pub latent_channels: usize,
    pub t_max: usize,
}

impl<F: Elem> Denoiser<F> {
    pub fn new(
        rng: &mut rand_chacha::ChaCha8Rng,
        config: DenoiserConfig,
        latent_channels: usize,
        t_max: usize,
    ) -> Result<Self> {
        config.validate()?;
        let unet = CondUNet::new(rng, config.shape_for(latent_channels));
        Ok(Self { config, unet, latent_channels, t_max })
    }

    fn check_inputs(
        &self,
        z_y_t: &LatentGrid,
        z_x: &LatentGrid,
        t_net: usize,
        t_clip: &TextEmbedding,
    ) -> Result<()> {
        if z_y_t.shape() != z_x.shape() {
            return Err(Error::Model(format!(
                "latent shape mismatch: {:?} vs {:?}",
                z_y_t.shape(),
                z_x.shape()
            )));
        }
        if z_y_t.channels() != self.latent_channels {
            return Err(Error::Model(format!(
                "expected {} latent channels, got {}",
                self.latent_channels,
                z_y_t.channels()
            )));
        }
        let div = 1 << self.config.depth;
        if z_y_t.height() % div != 0 || z_y_t.width() % div != 0 {
            return Err(Error::Model(format!(
                "latent dims {}x{} not divisible by 2^depth = {div}",
                z_y_t.height(),
                z_y_t.width()
            )));
        }
        if t_net >= self.t_max {
            return Err(Error::Model(format!(
                "network timestep {t_net} out of 0..{}",
                self.t_max
            )));
        }
        if t_clip.dim() != self.config.d_text {
            return Err(Error::Model(format!(
                "text embedding dim {} != configured {}",
                t_clip.dim(),
                self.config.d_text
            )));
        }
        Ok(())
    }

    pub fn text_to_elem(&self, t_clip: &TextEmbedding) -> Array1<F> {
        t_clip.vector.mapv(c::<F>)
    }
}

impl<F: Elem> NoisePredictor for Denoiser<F> {
    fn predict_noise(
        &self,
        z_y_t: &LatentGrid,
        z_x: &LatentGrid,
        t_net: usize,
        t_clip: &TextEmbedding,
    ) -> Result<LatentGrid> {
        self.check_inputs(z_y_t, z_x, t_net, t_clip)?;
        let zin = crate::nn::layers::concat_channels(
            &z_y_t.data.mapv(c::<F>),
            &z_x.data.mapv(c::<F>),
        );
        let text = self.text_to_elem(t_clip);
        let (eps, _) = self.unet.forward(&zin, t_net, &text);
        LatentGrid::new(eps.mapv(Elem::into_f64), Space::Latent)
    }
}

/// Eq-5-style forward noising: `z_y^t = sqrt(abar_t) z_y + sqrt(1-abar_t) eps`
/// with `t` 1-based.
pub fn forward_noising(
    z_y: &LatentGrid,
    eps: &LatentGrid,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<LatentGrid> {
    if z_y.shape() != eps.shape() {
        return Err(Error::Model("noising shape mismatch".into()));
    }
    let ab = schedule.alpha_bar(t);
    let data = &z_y.data * ab.sqrt() + &eps.data * (1.0 - ab).sqrt();
    LatentGrid::new(data, Space::Latent)
}

/// One training example already lifted into latent space.
#[derive(Debug, Clone)]
pub struct LatentSample {
    pub z_x: LatentGrid,
    pub z_y: LatentGrid,
    pub t_clip: TextEmbedding,
}

/// Mean per-element diffusion MSE over a batch (Eq-6 objective): each sample
/// draws `t ~ U{1..T}` and a noise field from its own derived stream.
pub fn diffusion_loss(
    model: &dyn NoisePredictor,
    batch: &[LatentSample],
    schedule: &NoiseSchedule,
    noise_cfg: &NoisePyramidConfig,
    rng_seed: u64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Parameter("empty batch".into()));
    }
    let mut total = 0.0;
    for (i, sample) in batch.iter().enumerate() {
        let mut trng = rng::stream(rng_seed, "loss-t", i as u64);
        let t = 1 + rand::Rng::random_range(&mut trng, 0..schedule.t_max());
        let eps_seed = rng::derive_seed(rng_seed, "loss-eps", i as u64);
        let eps = sample_noise(sample.z_y.shape(), noise_cfg, t, schedule, eps_seed)?;
        let z_y_t = forward_noising(&sample.z_y, &eps, t, schedule)?;
        let eps_hat = model.predict_noise(&z_y_t, &sample.z_x, t - 1, &sample.t_clip)?;
        let n = eps.data.len() as f64;
        let mse = (&eps_hat.data - &eps.data).mapv(|v| v * v).sum() / n;
        total += mse;
    }
    Ok(total / batch.len() as f64)
}

#[cfg(test)]
pub(crate) mod oracles {
    use super::*;

    /// Returns the exact noise that produced `z_y_t` from a known clean
    /// latent: `eps = (z_t - sqrt(abar) z_0) / sqrt(1 - abar)`.
    pub struct TrueNoiseOracle {
        pub z_y0: LatentGrid,
        pub schedule: NoiseSchedule,
    }

    impl NoisePredictor for TrueNoiseOracle {
        fn predict_noise(
            &self,
            z_y_t: &LatentGrid,
            _z_x: &LatentGrid,
            t_net: usize,
            _t_clip: &TextEmbedding,
        ) -> Result<LatentGrid> {
            let ab = self.schedule.alpha_bar_at(t_net as i64);
            let eps = (&z_y_t.data - &(&self.z_y0.data * ab.sqrt())) / (1.0 - ab).sqrt();
            LatentGrid::new(eps, Space::Latent)
        }
    }

    /// Constant-zero prediction.
    pub struct ZeroOracle;

    impl NoisePredictor for ZeroOracle {
        fn predict_noise(
            &self,
            z_y_t: &LatentGrid,
            _z_x: &LatentGrid,
            _t_net: usize,
            _t_clip: &TextEmbedding,
        ) -> Result<LatentGrid> {
            let (c, h, w) = z_y_t.shape();
            Ok(LatentGrid::zeros(c, h, w, Space::Latent))
        }
    }

    /// Echoes the noisy input scaled by a fixed matrix-free linear map; used
    /// for distributional sampler comparisons.
    pub struct LinearOracle {
        pub gain: f64,
    }

    impl NoisePredictor for LinearOracle {
        fn predict_noise(
            &self,
            z_y_t: &LatentGrid,
            _z_x: &LatentGrid,
            _t_net: usize,
            _t_clip: &TextEmbedding,
        ) -> Result<LatentGrid> {
            LatentGrid::new(&z_y_t.data * self.gain, Space::Latent)
        }
    }
}
