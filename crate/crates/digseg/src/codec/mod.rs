//! Visual latent pathway: palette colorization of label maps, nearest
//! palette decoding, and the latent codec (identity or toy autoencoder).

pub mod palette;
pub mod toy;

pub use palette::{
    grid_to_rgb8, label_from_png, label_to_png, rgb8_to_grid, LabelMap, Palette, PaletteEntry,
    MIN_COLOR_GAP,
};
pub use toy::{decode_lipschitz_estimate, pretrain, CodecMeta, CodecTrainConfig, ToyAutoencoder};

use crate::error::{Error, Result};
use crate::grid::{LatentGrid, Space};
use crate::nn::{c, Elem};

/// Latent codec: either a bit-exact pass-through or the pretrained toy
/// autoencoder with its frozen latent normalization.
pub enum LatentCodec {
    Identity,
    Toy(ToyAutoencoder<f32>),
}

impl LatentCodec {
    pub fn mode_name(&self) -> &'static str {
        match self {
            LatentCodec::Identity => "identity",
            LatentCodec::Toy(_) => "toy_autoencoder",
        }
    }

    /// Spatial downsampling factor f.
    pub fn downsampling(&self) -> usize {
        match self {
            LatentCodec::Identity => 1,
            LatentCodec::Toy(_) => toy::DOWNSAMPLING,
        }
    }

    /// Latent channels produced for a 3-channel pixel input.
    pub fn latent_channels(&self) -> usize {
        match self {
            LatentCodec::Identity => 3,
            LatentCodec::Toy(_) => toy::LATENT_CHANNELS,
        }
    }

    /// Encode a pixel grid into latent space.
    pub fn encode(&self, v: &LatentGrid) -> Result<LatentGrid> {
        if v.space != Space::Pixel {
            return Err(Error::Codec("encode expects a pixel-space grid".into()));
        }
        match self {
            LatentCodec::Identity => {
                Ok(LatentGrid { data: v.data.clone(), space: Space::Latent })
            }
            LatentCodec::Toy(ae) => {
                let f = toy::DOWNSAMPLING;
                if v.height() % f != 0 || v.width() % f != 0 {
                    return Err(Error::Codec(format!(
                        "pixel dims {}x{} not divisible by f = {f}",
                        v.height(),
                        v.width()
                    )));
                }
                if v.channels() != 3 {
                    return Err(Error::Codec(format!(
                        "toy codec expects 3 channels, got {}",
                        v.channels()
                    )));
                }
                let x = v.data.mapv(c::<f32>);
                let (z, _) = ae.encode_raw(&x);
                let data = z.mapv(|v| (Elem::into_f64(v) - ae.latent_mean) / ae.latent_std);
                LatentGrid::new(data, Space::Latent)
            }
        }
    }

    /// Decode a latent grid back to pixel space. Toy-codec outputs are
    /// clamped to [0, 1].
    pub fn decode(&self, z: &LatentGrid) -> Result<LatentGrid> {
        if z.space != Space::Latent {
            return Err(Error::Codec("decode expects a latent-space grid".into()));
        }
        match self {
            LatentCodec::Identity => {
                Ok(LatentGrid { data: z.data.clone(), space: Space::Pixel })
            }
            LatentCodec::Toy(ae) => {
                if z.channels() != toy::LATENT_CHANNELS {
                    return Err(Error::Codec(format!(
                        "toy codec expects {} latent channels, got {}",
                        toy::LATENT_CHANNELS,
                        z.channels()
                    )));
                }
                let raw = z.data.mapv(|v| c::<f32>(v * ae.latent_std + ae.latent_mean));
                let (y, _) = ae.decode_raw(&raw);
                let data = y.mapv(|v| Elem::into_f64(v).clamp(0.0, 1.0));
                LatentGrid::new(data, Space::Pixel)
            }
        }
    }

    pub fn meta(&self) -> CodecMeta {
        match self {
            LatentCodec::Identity => CodecMeta {
                mode: "identity".into(),
                downsampling: 1,
                latent_channels: 3,
                latent_mean: 0.0,
                latent_std: 1.0,
            },
            LatentCodec::Toy(ae) => CodecMeta {
                mode: "toy_autoencoder".into(),
                downsampling: toy::DOWNSAMPLING,
                latent_channels: toy::LATENT_CHANNELS,
                latent_mean: ae.latent_mean,
                latent_std: ae.latent_std,
            },
        }
    }
}

/// Colorize a label map with its palette into a (3, h, w) pixel grid.
///
/// A single-class binary map with a white foreground over a black background
/// reduces to plain 3-channel mask replication.
pub fn mask_to_rgb(map: &LabelMap, palette: &Palette) -> Result<LatentGrid> {
    let (h, w) = (map.height(), map.width());
    let mut g = LatentGrid::zeros(3, h, w, Space::Pixel);
    for ((y, x), &id) in map.labels.indexed_iter() {
        let rgb = palette.entry(id).map(|e| e.rgb).ok_or_else(|| {
            Error::Codec(format!("label id {id} at ({y}, {x}) not in palette"))
        })?;
        for ch in 0..3 {
            g.data[[ch, y, x]] = rgb[ch];
        }
    }
    Ok(g)
}

/// Nearest-neighbor palette matching back to discrete labels.
///
/// Total function: every pixel maps to its closest entry, ties to lowest id.
pub fn rgb_to_mask(img: &LatentGrid, palette: &Palette) -> Result<LabelMap> {
    if img.channels() != 3 {
        return Err(Error::Codec(format!(
            "nearest-palette matching needs 3 channels, got {}",
            img.channels()
        )));
    }
    let (h, w) = (img.height(), img.width());
    let mut labels = ndarray::Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let rgb = [img.data[[0, y, x]], img.data[[1, y, x]], img.data[[2, y, x]]];
            labels[[y, x]] = palette.nearest(&rgb);
        }
    }
    Ok(LabelMap::new(labels))
}
