//! End-to-end text-conditioned segmentation: per-class mask generation,
//! thresholding, and argmax aggregation with a background threshold.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::codec::{LabelMap, LatentCodec, Palette};
use crate::conditioning::{embed_class, Vocabulary};
use crate::denoiser::NoisePredictor;
use crate::error::{Error, Result};
use crate::grid::LatentGrid;
use crate::sampler::{sample, SamplerConfig};
use crate::schedule::NoiseSchedule;

/// Per-class foreground confidence map in [0, 1].
#[derive(Debug, Clone)]
pub struct ClassMask {
    pub class_id: u8,
    pub class_name: String,
    pub logits: Array2<f64>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct AggregationConfig {
    /// Mask binarization threshold.
    pub tau: f64,
    /// Background assignment threshold for the argmax path.
    pub tau_bg: f64,
    /// Zero out per-class logits below `tau` before the argmax. Off by
    /// default: the aggregation rule is pure argmax + background threshold.
    pub binarize_before_aggregate: bool,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self { tau: 0.7, tau_bg: 0.5, binarize_before_aggregate: false }
    }
}

impl AggregationConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("tau", self.tau), ("tau_bg", self.tau_bg)] {
            if !(0.0 < v && v < 1.0) {
                return Err(Error::config(format!("{name} must lie in (0,1), got {v}")));
            }
        }
        Ok(())
    }
}

/// Score a decoded RGB prediction against one class color: confidence is
/// `1 - dist(pixel, class color) / max palette distance from that color`,
/// clamped to [0, 1]. An exact class-color pixel scores 1; an exact
/// background pixel scores 0 (the background is the farthest entry by
/// palette construction).
pub fn score_decoded(decoded: &LatentGrid, class_id: u8, palette: &Palette) -> Result<Array2<f64>> {
    if decoded.channels() != 3 {
        return Err(Error::Codec(format!(
            "scoring expects 3-channel pixels, got {}",
            decoded.channels()
        )));
    }
    let color = palette.color_of(class_id)?;
    let max_dist = palette.max_distance_from(class_id)?.max(1e-9);
    let (h, w) = (decoded.height(), decoded.width());
    let mut logits = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let d = (0..3)
                .map(|ch| (decoded.data[[ch, y, x]] - color[ch]).powi(2))
                .sum::<f64>()
                .sqrt();
            logits[[y, x]] = (1.0 - d / max_dist).clamp(0.0, 1.0);
        }
    }
    Ok(logits)
}

/// Generate the mask-logit map for one class: encode the image, run the
/// conditioned sampler, decode, and score color proximity.
pub fn generate_class_mask(
    image: &LatentGrid,
    class_name: &str,
    model: &dyn NoisePredictor,
    codec: &LatentCodec,
    palette: &Palette,
    vocab: &Vocabulary,
    sampler_cfg: &SamplerConfig,
    schedule: &NoiseSchedule,
) -> Result<ClassMask> {
    if !vocab.contains(class_name) {
        return Err(Error::Vocabulary(format!("class `{class_name}` not in vocabulary")));
    }
    let class_id = palette
        .id_of_name(class_name)
        .ok_or_else(|| Error::Vocabulary(format!("class `{class_name}` has no palette entry")))?;
    let t_clip = embed_class(class_name, vocab)?;
    let z_x = codec.encode(image)?;
    let z_y = sample(&z_x, &t_clip, model, sampler_cfg, schedule)?;
    let decoded = codec.decode(&z_y)?;
    Ok(ClassMask {
        class_id,
        class_name: class_name.to_string(),
        logits: score_decoded(&decoded, class_id, palette)?,
    })
}

/// Closed-threshold binarization: `pixel >= tau -> true`.
pub fn binarize(logits: &Array2<f64>, tau: f64) -> Array2<bool> {
    logits.mapv(|v| v >= tau)
}

/// Pixel-wise argmax over candidate class maps with background fallback.
///
/// Ties resolve to the lowest class id; a maximum below `tau_bg` becomes
/// background; an empty candidate set yields an all-background map.
pub fn aggregate(
    masks: &[ClassMask],
    cfg: &AggregationConfig,
    palette: &Palette,
    shape: (usize, usize),
) -> Result<LabelMap> {
    cfg.validate()?;
    let (h, w) = shape;
    for m in masks {
        if m.logits.dim() != (h, w) {
            return Err(Error::Aggregation(format!(
                "mask for class {} has dims {:?}, expected {:?}",
                m.class_name,
                m.logits.dim(),
                (h, w)
            )));
        }
    }
    // Stable evaluation order: ascending class id so exact ties go low.
    let mut order: Vec<&ClassMask> = masks.iter().collect();
    order.sort_by_key(|m| m.class_id);

    let mut out = Array2::from_elem((h, w), palette.background_id);
    for y in 0..h {
        for x in 0..w {
            let mut best_id = palette.background_id;
            let mut best = f64::NEG_INFINITY;
            for m in &order {
                let mut v = m.logits[[y, x]];
                if cfg.binarize_before_aggregate && v < cfg.tau {
                    v = 0.0;
                }
                if v > best {
                    best = v;
                    best_id = m.class_id;
                }
            }
            out[[y, x]] = if best < cfg.tau_bg { palette.background_id } else { best_id };
        }
    }
    Ok(LabelMap::new(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::PaletteEntry;
    use rand::Rng;

    fn palette() -> Palette {
        Palette::generate(
            &["a".into(), "b".into(), "c".into(), "d".into(), "e".into()],
            3,
        )
        .unwrap()
    }

    #[test]
    fn exact_class_color_scores_one_background_scores_zero() {
        let p = palette();
        let color = p.color_of(2).unwrap();
        let mut g = LatentGrid::zeros(3, 2, 2, crate::grid::Space::Pixel);
        for ch in 0..3 {
            for y in 0..2 {
                g.data[[ch, y, 0]] = color[ch]; // left column: class color
                g.data[[ch, y, 1]] = 0.0; // right column: background black
            }
        }
        let s = score_decoded(&g, 2, &p).unwrap();
        for y in 0..2 {
            assert!((s[[y, 0]] - 1.0).abs() < 1e-12);
            assert!(s[[y, 1]].abs() < 1e-12);
        }
    }

    #[test]
    fn binarize_uses_closed_threshold() {
        let logits = ndarray::arr2(&[[0.71, 0.69], [0.70, 0.10]]);
        let b = binarize(&logits, 0.7);
        assert_eq!(b, ndarray::arr2(&[[true, false], [true, false]]));
        // logits == tau everywhere -> all ones.
        let flat = ndarray::arr2(&[[0.5, 0.5]]);
        assert!(binarize(&flat, 0.5).iter().all(|&v| v));
        // tau = 0 -> all ones on [0,1] logits.
        assert!(binarize(&logits, 0.0).iter().all(|&v| v));
    }

    #[test]
    fn aggregate_applies_argmax_and_background_rules() {
        let p = palette();
        let mk = |id: u8, v: f64| ClassMask {
            class_id: id,
            class_name: format!("class{id}"),
            logits: Array2::from_elem((1, 1), v),
        };
        let cfg = AggregationConfig::default();
        // Single class everywhere above tau_bg.
        let out = aggregate(&[mk(1, 0.9)], &cfg, &p, (1, 1)).unwrap();
        assert_eq!(out.labels[[0, 0]], 1);
        // (0.9, 0.4): class 1 wins.
        let out = aggregate(&[mk(1, 0.9), mk(2, 0.4)], &cfg, &p, (1, 1)).unwrap();
        assert_eq!(out.labels[[0, 0]], 1);
        // (0.3, 0.4) with tau_bg 0.5: background.
        let out = aggregate(&[mk(1, 0.3), mk(2, 0.4)], &cfg, &p, (1, 1)).unwrap();
        assert_eq!(out.labels[[0, 0]], 0);
        // Empty candidate set: all background.
        let out = aggregate(&[], &cfg, &p, (2, 2)).unwrap();
        assert!(out.labels.iter().all(|&v| v == 0));
        // Exact tie: lowest id wins regardless of order.
        let out = aggregate(&[mk(4, 0.8), mk(2, 0.8)], &cfg, &p, (1, 1)).unwrap();
        assert_eq!(out.labels[[0, 0]], 2);
        let out = aggregate(&[mk(2, 0.8), mk(4, 0.8)], &cfg, &p, (1, 1)).unwrap();
        assert_eq!(out.labels[[0, 0]], 2);
    }

    #[test]
    fn aggregate_rejects_mismatched_dims() {
        let p = palette();
        let bad = ClassMask { class_id: 1, class_name: "a".into(), logits: Array2::zeros((2, 3)) };
        assert!(aggregate(&[bad], &AggregationConfig::default(), &p, (2, 2)).is_err());
    }

    #[test]
    fn aggregate_matches_brute_force_oracle() {
        // Exhaustive per-pixel loop over random 8x8 x 5-class instances.
        let p = palette();
        let cfg = AggregationConfig::default();
        let mut r = crate::rng::stream(17, "agg-oracle", 0);
        for _case in 0..200 {
            let masks: Vec<ClassMask> = (1..=5)
                .map(|id| ClassMask {
                    class_id: id,
                    class_name: format!("class{id}"),
                    logits: Array2::from_shape_simple_fn((8, 8), || r.random::<f64>()),
                })
                .collect();
            let got = aggregate(&masks, &cfg, &p, (8, 8)).unwrap();
            for y in 0..8 {
                for x in 0..8 {
                    // Oracle: explicit scan.
                    let mut best_id = 0u8;
                    let mut best = f64::NEG_INFINITY;
                    for m in &masks {
                        let v = m.logits[[y, x]];
                        if v > best || (v == best && m.class_id < best_id) {
                            best = v;
                            best_id = m.class_id;
                        }
                    }
                    let want = if best < cfg.tau_bg { 0 } else { best_id };
                    assert_eq!(got.labels[[y, x]], want, "at ({y},{x})");
                }
            }
        }
    }

    #[test]
    fn raising_tau_bg_only_grows_background() {
        let p = palette();
        let mut r = crate::rng::stream(18, "bg", 0);
        let masks: Vec<ClassMask> = (1..=3)
            .map(|id| ClassMask {
                class_id: id,
                class_name: format!("class{id}"),
                logits: Array2::from_shape_simple_fn((6, 6), || r.random::<f64>()),
            })
            .collect();
        let lo = aggregate(
            &masks,
            &AggregationConfig { tau_bg: 0.3, ..Default::default() },
            &p,
            (6, 6),
        )
        .unwrap();
        let hi = aggregate(
            &masks,
            &AggregationConfig { tau_bg: 0.8, ..Default::default() },
            &p,
            (6, 6),
        )
        .unwrap();
        for (a, b) in lo.labels.iter().zip(hi.labels.iter()) {
            if *a == 0 {
                assert_eq!(*b, 0, "background pixel flipped to class");
            }
        }
    }

    #[test]
    fn permutation_invariance_of_aggregate() {
        let p = palette();
        let mut r = crate::rng::stream(19, "perm", 0);
        let mut masks: Vec<ClassMask> = (1..=4)
            .map(|id| ClassMask {
                class_id: id,
                class_name: format!("class{id}"),
                logits: Array2::from_shape_simple_fn((5, 5), || r.random::<f64>()),
            })
            .collect();
        let cfg = AggregationConfig::default();
        let a = aggregate(&masks, &cfg, &p, (5, 5)).unwrap();
        masks.reverse();
        let b = aggregate(&masks, &cfg, &p, (5, 5)).unwrap();
        assert_eq!(a, b);
    }
}
