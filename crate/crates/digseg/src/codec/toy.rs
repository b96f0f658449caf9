//! Toy convolutional autoencoder: the trainable stand-in for a pretrained
//! VAE. Spatial downsampling f = 4, four latent channels, strided-conv
//! encoder mirrored by a nearest-upsample decoder. After its own pretraining
//! phase the codec is frozen and a global latent mean/std is recorded so the
//! diffusion model sees roughly unit-scale latents.

use ndarray::{Array3, ArrayViewD, ArrayViewMutD};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{LatentGrid, Space};
use crate::nn::layers::{silu, silu_backward, upsample2x, upsample2x_backward, Conv2d, ConvCache};
use crate::nn::optim::AdamW;
use crate::nn::{c, path, Elem, Grads, Params};
use crate::rng;

/// Spatial downsampling factor.
pub const DOWNSAMPLING: usize = 4;
/// Latent channels.
pub const LATENT_CHANNELS: usize = 4;

const W0: usize = 16;
const W1: usize = 32;

#[derive(Debug, Clone)]
pub struct ToyAutoencoder<F: Elem> {
    e1: Conv2d<F>, // 3 -> W0, stride 1
    e2: Conv2d<F>, // W0 -> W1, stride 2
    e3: Conv2d<F>, // W1 -> W1, stride 2
    e4: Conv2d<F>, // W1 -> latent, stride 1
    d1: Conv2d<F>, // latent -> W1
    d2: Conv2d<F>, // W1 -> W1 (after 2x upsample)
    d3: Conv2d<F>, // W1 -> W0 (after 2x upsample)
    d4: Conv2d<F>, // W0 -> 3
    pub latent_mean: f64,
    pub latent_std: f64,
}

pub struct EncCache<F: Elem> {
    c1: ConvCache<F>,
    a1: Array3<F>,
    c2: ConvCache<F>,
    a2: Array3<F>,
    c3: ConvCache<F>,
    a3: Array3<F>,
    c4: ConvCache<F>,
}

pub struct DecCache<F: Elem> {
    c1: ConvCache<F>,
    a1: Array3<F>,
    c2: ConvCache<F>,
    a2: Array3<F>,
    c3: ConvCache<F>,
    a3: Array3<F>,
    c4: ConvCache<F>,
}

impl<F: Elem> ToyAutoencoder<F> {
    pub fn new(rng: &mut ChaCha8Rng) -> Self {
        Self {
            e1: Conv2d::new(rng, 3, W0, 3, 1, 1, None),
            e2: Conv2d::new(rng, W0, W1, 3, 2, 1, None),
            e3: Conv2d::new(rng, W1, W1, 3, 2, 1, None),
            e4: Conv2d::new(rng, W1, LATENT_CHANNELS, 3, 1, 1, None),
            d1: Conv2d::new(rng, LATENT_CHANNELS, W1, 3, 1, 1, None),
            d2: Conv2d::new(rng, W1, W1, 3, 1, 1, None),
            d3: Conv2d::new(rng, W1, W0, 3, 1, 1, None),
            d4: Conv2d::new(rng, W0, 3, 3, 1, 1, None),
            latent_mean: 0.0,
            latent_std: 1.0,
        }
    }

    /// Raw (un-normalized) encoder pass.
    pub fn encode_raw(&self, x: &Array3<F>) -> (Array3<F>, EncCache<F>) {
        let (h1, c1) = self.e1.forward(x);
        let a1 = silu(&h1);
        let (h2, c2) = self.e2.forward(&a1);
        let a2 = silu(&h2);
        let (h3, c3) = self.e3.forward(&a2);
        let a3 = silu(&h3);
        let (z, c4) = self.e4.forward(&a3);
        (z, EncCache { c1, a1: h1, c2, a2: h2, c3, a3: h3, c4 })
    }

    pub fn decode_raw(&self, z: &Array3<F>) -> (Array3<F>, DecCache<F>) {
        let (h1, c1) = self.d1.forward(z);
        let a1 = silu(&h1);
        let (h2, c2) = self.d2.forward(&upsample2x(&a1));
        let a2 = silu(&h2);
        let (h3, c3) = self.d3.forward(&upsample2x(&a2));
        let a3 = silu(&h3);
        let (y, c4) = self.d4.forward(&a3);
        (y, DecCache { c1, a1: h1, c2, a2: h2, c3, a3: h3, c4 })
    }

    fn encode_backward(&self, cache: &EncCache<F>, dz: &Array3<F>, grads: &mut Grads<F>) {
        let da3 = self.e4.backward("e4", &cache.c4, dz, grads);
        let dh3 = silu_backward(&cache.a3, &da3);
        let da2 = self.e3.backward("e3", &cache.c3, &dh3, grads);
        let dh2 = silu_backward(&cache.a2, &da2);
        let da1 = self.e2.backward("e2", &cache.c2, &dh2, grads);
        let dh1 = silu_backward(&cache.a1, &da1);
        let _ = self.e1.backward("e1", &cache.c1, &dh1, grads);
    }

    /// Returns dz.
    fn decode_backward(&self, cache: &DecCache<F>, dy: &Array3<F>, grads: &mut Grads<F>) -> Array3<F> {
        let da3 = self.d4.backward("d4", &cache.c4, dy, grads);
        let dh3 = silu_backward(&cache.a3, &da3);
        let dup2 = self.d3.backward("d3", &cache.c3, &dh3, grads);
        let da2 = upsample2x_backward(&dup2);
        let dh2 = silu_backward(&cache.a2, &da2);
        let dup1 = self.d2.backward("d2", &cache.c2, &dh2, grads);
        let da1 = upsample2x_backward(&dup1);
        let dh1 = silu_backward(&cache.a1, &da1);
        self.d1.backward("d1", &cache.c1, &dh1, grads)
    }
}

impl<F: Elem> Params<F> for ToyAutoencoder<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        for (name, layer) in [
            ("e1", &self.e1),
            ("e2", &self.e2),
            ("e3", &self.e3),
            ("e4", &self.e4),
            ("d1", &self.d1),
            ("d2", &self.d2),
            ("d3", &self.d3),
            ("d4", &self.d4),
        ] {
            layer.visit(&path(prefix, name), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        for (name, layer) in [
            ("e1", &mut self.e1),
            ("e2", &mut self.e2),
            ("e3", &mut self.e3),
            ("e4", &mut self.e4),
            ("d1", &mut self.d1),
            ("d2", &mut self.d2),
            ("d3", &mut self.d3),
            ("d4", &mut self.d4),
        ] {
            layer.visit_mut(&path(prefix, name), f);
        }
    }
}

/// Pretraining settings for the codec.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CodecTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self { steps: 2200, batch_size: 4, learning_rate: 2e-3, weight_decay: 1e-5, seed: 0 }
    }
}

/// Train a fresh autoencoder on the given pixel grids (images and colorized
/// masks alike) and freeze the latent normalization constants.
pub fn pretrain(
    samples: &[Array3<f32>],
    cfg: &CodecTrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<(ToyAutoencoder<f32>, Vec<(usize, f64)>)> {
    if samples.is_empty() {
        return Err(Error::Parameter("codec pretraining needs samples".into()));
    }
    let mut init_rng = rng::stream(cfg.seed, "codec-init", 0);
    let mut model: ToyAutoencoder<f32> = ToyAutoencoder::new(&mut init_rng);
    let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay);
    let mut curve = Vec::new();

    for step in 0..cfg.steps {
        let mut pick = rng::stream(cfg.seed, "codec-batch", step as u64);
        let mut grads: Grads<f32> = Grads::new();
        let mut loss_acc = 0.0f64;
        for _ in 0..cfg.batch_size {
            let idx = rand::Rng::random_range(&mut pick, 0..samples.len());
            let x = &samples[idx];
            let (z, enc_cache) = model.encode_raw(x);
            let (y, dec_cache) = model.decode_raw(&z);
            let n = y.len() as f64;
            let diff = &y - x;
            let loss = diff.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>() / n;
            loss_acc += loss;
            let scale = c::<f32>(2.0 / (n * cfg.batch_size as f64));
            let dy = diff.mapv(|v| v * scale);
            let dz = model.decode_backward(&dec_cache, &dy, &mut grads);
            model.encode_backward(&enc_cache, &dz, &mut grads);
        }
        let loss = loss_acc / cfg.batch_size as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("codec reconstruction loss became {loss}"),
            });
        }
        opt.step(&mut model, &grads);
        if step % 50 == 0 || step + 1 == cfg.steps {
            curve.push((step, loss));
            progress(step, loss);
        }
    }

    // Freeze latent scale from a pass over (a subsample of) the corpus.
    let stride = (samples.len() / 256).max(1);
    let mut sum = 0.0f64;
    let mut sum_sq = 0.0f64;
    let mut count = 0.0f64;
    for x in samples.iter().step_by(stride) {
        let (z, _) = model.encode_raw(x);
        for &v in z.iter() {
            let v = f64::from(v);
            sum += v;
            sum_sq += v * v;
            count += 1.0;
        }
    }
    let mean = sum / count;
    let var = (sum_sq / count - mean * mean).max(1e-12);
    model.latent_mean = mean;
    model.latent_std = var.sqrt();
    Ok((model, curve))
}

/// Empirical Lipschitz estimate of the decoder: largest observed ratio of
/// output MAE change to latent perturbation norm, over random directions.
pub fn decode_lipschitz_estimate(
    codec: &super::LatentCodec,
    z: &LatentGrid,
    seed: u64,
) -> Result<f64> {
    let base = codec.decode(z)?;
    let n = base.data.len() as f64;
    let mut k_max: f64 = 0.0;
    let mut r = rng::stream(seed, "lipschitz", 0);
    for delta in [1e-3, 1e-2, 1e-1] {
        for _ in 0..4 {
            let mut dir = Array3::<f64>::zeros(z.data.dim());
            for v in dir.iter_mut() {
                *v = rand::Rng::sample::<f64, _>(&mut r, rand_distr::StandardNormal);
            }
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            dir.mapv_inplace(|v| v / norm * delta);
            let zp = LatentGrid::new(&z.data + &dir, Space::Latent)?;
            let out = codec.decode(&zp)?;
            let mae = (&out.data - &base.data).mapv(f64::abs).sum() / n;
            k_max = k_max.max(mae / delta);
        }
    }
    Ok(k_max)
}

/// Serializable codec metadata stored beside the parameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CodecMeta {
    pub mode: String,
    pub downsampling: usize,
    pub latent_channels: usize,
    pub latent_mean: f64,
    pub latent_std: f64,
}

/// Mask-roundtrip fidelity of a codec on held-out label maps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundtripReport {
    pub n_masks: usize,
    /// Mean absolute reconstruction error of colorized masks, in [0,1] units.
    pub mae: f64,
    /// Fraction of pixels whose nearest-palette label survives the roundtrip.
    pub label_accuracy: f64,
    /// Mean per-pixel std across the 3 decoded channels of replicated-gray
    /// binary masks.
    pub channel_std: f64,
}

/// Measure colorized-mask reconstruction and the channel consistency of
/// replicated gray masks through encode/decode.
pub fn roundtrip_report(
    codec: &super::LatentCodec,
    masks: &[crate::codec::LabelMap],
    palette: &crate::codec::Palette,
) -> Result<RoundtripReport> {
    if masks.is_empty() {
        return Err(Error::Parameter("roundtrip report needs masks".into()));
    }
    let mut abs_sum = 0.0f64;
    let mut abs_n = 0.0f64;
    let mut label_hits = 0u64;
    let mut label_n = 0u64;
    let mut chan_std_sum = 0.0f64;
    let mut chan_n = 0.0f64;
    for map in masks {
        let rgb = super::mask_to_rgb(map, palette)?;
        let decoded = codec.decode(&codec.encode(&rgb)?)?;
        abs_sum += (&decoded.data - &rgb.data).mapv(f64::abs).sum();
        abs_n += rgb.data.len() as f64;
        let back = super::rgb_to_mask(&decoded, palette)?;
        label_hits += map
            .labels
            .iter()
            .zip(back.labels.iter())
            .filter(|(a, b)| a == b)
            .count() as u64;
        label_n += map.labels.len() as u64;

        // Replicated gray: binary foreground of the same map.
        let mut gray = crate::grid::LatentGrid::zeros(
            3,
            map.height(),
            map.width(),
            crate::grid::Space::Pixel,
        );
        for ((y, x), &id) in map.labels.indexed_iter() {
            let v = if id == palette.background_id { 0.0 } else { 1.0 };
            for ch in 0..3 {
                gray.data[[ch, y, x]] = v;
            }
        }
        let dec = codec.decode(&codec.encode(&gray)?)?;
        for y in 0..map.height() {
            for x in 0..map.width() {
                let vals = [dec.data[[0, y, x]], dec.data[[1, y, x]], dec.data[[2, y, x]]];
                let mean = (vals[0] + vals[1] + vals[2]) / 3.0;
                let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 3.0;
                chan_std_sum += var.sqrt();
                chan_n += 1.0;
            }
        }
    }
    Ok(RoundtripReport {
        n_masks: masks.len(),
        mae: abs_sum / abs_n,
        label_accuracy: label_hits as f64 / label_n as f64,
        channel_std: chan_std_sum / chan_n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn encode_decode_shapes() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let ae: ToyAutoencoder<f32> = ToyAutoencoder::new(&mut r);
        let x = Array3::<f32>::from_elem((3, 16, 16), 0.5);
        let (z, _) = ae.encode_raw(&x);
        assert_eq!(z.dim(), (LATENT_CHANNELS, 4, 4));
        let (y, _) = ae.decode_raw(&z);
        assert_eq!(y.dim(), (3, 16, 16));
    }

    #[test]
    fn autoencoder_gradients_match_finite_differences() {
        // f64 instance purely for the check.
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let mut ae: ToyAutoencoder<f64> = ToyAutoencoder::new(&mut r);
        let x = crate::nn::randn::<f64>(&mut r, &[3, 8, 8], 0.5)
            .into_dimensionality()
            .unwrap();
        let max_rel = crate::nn::gradcheck::check_against_fd(
            &mut ae,
            |m| {
                let (z, _) = m.encode_raw(&x);
                let (y, _) = m.decode_raw(&z);
                (&y - &x).iter().map(|v| v * v).sum::<f64>()
            },
            |m, grads| {
                let (z, enc) = m.encode_raw(&x);
                let (y, dec) = m.decode_raw(&z);
                let dy = (&y - &x).mapv(|v| 2.0 * v);
                let dz = m.decode_backward(&dec, &dy, grads);
                m.encode_backward(&enc, &dz, grads);
            },
        );
        assert!(max_rel < 1e-3, "max rel err {max_rel}");
    }

    #[test]
    fn pretrain_reduces_reconstruction_error() {
        // Tiny flat-color corpus; a handful of steps must already help.
        let mut samples = Vec::new();
        for i in 0..8 {
            let v = i as f32 / 8.0;
            let mut x = Array3::<f32>::from_elem((3, 16, 16), v);
            x[[0, 4, 4]] = 1.0 - v;
            samples.push(x);
        }
        let cfg = CodecTrainConfig { steps: 120, batch_size: 4, ..Default::default() };
        let (_, curve) = pretrain(&samples, &cfg, |_, _| {}).unwrap();
        let first = curve.first().unwrap().1;
        let last = curve.last().unwrap().1;
        assert!(last < first * 0.5, "{first} -> {last}");
    }
}
