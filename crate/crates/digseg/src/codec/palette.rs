//! Class palette and integer label maps.
//!
//! The palette fixes the colorization used to push label maps through the
//! RGB latent pathway and the nearest-neighbor matching used to read them
//! back. Class colors are drawn from a bright box ([0.52, 1]^3) with the
//! background pinned to black: that keeps every class >= 0.25 from every
//! other entry and makes the background the farthest palette entry from any
//! class color, which the per-class mask scoring relies on.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::LatentGrid;
use crate::rng;

/// Minimum pairwise color distance the generator must achieve.
pub const MIN_COLOR_GAP: f64 = 0.25;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PaletteEntry {
    pub id: u8,
    pub name: String,
    pub rgb: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Palette {
    pub background_id: u8,
    pub entries: Vec<PaletteEntry>,
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

impl Palette {
    /// Seeded maximin palette for the given class names.
    ///
    /// Background gets id 0 and black; classes get ids 1.. in name order with
    /// colors chosen greedily from a seeded candidate pool to maximize the
    /// minimum pairwise distance.
    pub fn generate(class_names: &[String], seed: u64) -> Result<Palette> {
        if class_names.is_empty() {
            return Err(Error::config("palette needs at least one class"));
        }
        if class_names.len() > 254 {
            return Err(Error::config("palette limited to 254 classes"));
        }
        let mut rng = rng::stream(seed, "palette", 0);
        let lo = 0.52;
        // Box corners seed the pool; they give the greedy pass a wide frame.
        let mut candidates: Vec<[f64; 3]> = Vec::with_capacity(8200);
        for r in [lo, 1.0] {
            for g in [lo, 1.0] {
                for b in [lo, 1.0] {
                    candidates.push([r, g, b]);
                }
            }
        }
        candidates.extend((0..8192).map(|_| {
            [
                lo + (1.0 - lo) * rng.random::<f64>(),
                lo + (1.0 - lo) * rng.random::<f64>(),
                lo + (1.0 - lo) * rng.random::<f64>(),
            ]
        }));

        let min_to = |c: &[f64; 3], picked: &[[f64; 3]]| {
            picked.iter().map(|p| dist(c, p)).fold(f64::INFINITY, f64::min)
        };
        let mut picked: Vec<[f64; 3]> = vec![[1.0, 1.0, 1.0]];
        while picked.len() < class_names.len() {
            let best = candidates
                .iter()
                .max_by(|a, b| min_to(a, &picked).partial_cmp(&min_to(b, &picked)).unwrap())
                .unwrap();
            picked.push(*best);
        }
        // Local improvement: repeatedly re-place one endpoint of the current
        // worst pair if a strictly better candidate exists.
        for _ in 0..40 {
            let n = picked.len();
            let (mut wi, mut wj, mut gap) = (0, 0, f64::INFINITY);
            for i in 0..n {
                for j in (i + 1)..n {
                    let d = dist(&picked[i], &picked[j]);
                    if d < gap {
                        (wi, wj, gap) = (i, j, d);
                    }
                }
            }
            let mut moved = false;
            for victim in [wi, wj] {
                let others: Vec<[f64; 3]> = picked
                    .iter()
                    .enumerate()
                    .filter(|(k, _)| *k != victim)
                    .map(|(_, p)| *p)
                    .collect();
                let best = candidates
                    .iter()
                    .max_by(|a, b| min_to(a, &others).partial_cmp(&min_to(b, &others)).unwrap())
                    .unwrap();
                if min_to(best, &others) > gap + 1e-9 {
                    picked[victim] = *best;
                    moved = true;
                    break;
                }
            }
            if !moved {
                break;
            }
        }

        let mut entries = vec![PaletteEntry { id: 0, name: "background".into(), rgb: [0.0; 3] }];
        for (i, name) in class_names.iter().enumerate() {
            entries.push(PaletteEntry { id: (i + 1) as u8, name: name.clone(), rgb: picked[i] });
        }
        let palette = Palette { background_id: 0, entries };
        palette.validate()?;
        Ok(palette)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = std::collections::BTreeSet::new();
        for e in &self.entries {
            if !ids.insert(e.id) {
                return Err(Error::config(format!("duplicate palette id {}", e.id)));
            }
        }
        if !ids.contains(&self.background_id) {
            return Err(Error::config(format!(
                "background id {} missing from palette",
                self.background_id
            )));
        }
        for (i, a) in self.entries.iter().enumerate() {
            for b in &self.entries[i + 1..] {
                let d = dist(&a.rgb, &b.rgb);
                if d < MIN_COLOR_GAP {
                    return Err(Error::config(format!(
                        "palette colors for ids {} and {} are {d:.3} apart (< {MIN_COLOR_GAP})",
                        a.id, b.id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: u8) -> Option<&PaletteEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn color_of(&self, id: u8) -> Result<[f64; 3]> {
        self.entry(id)
            .map(|e| e.rgb)
            .ok_or_else(|| Error::Codec(format!("label id {id} not in palette")))
    }

    pub fn id_of_name(&self, name: &str) -> Option<u8> {
        self.entries.iter().find(|e| e.name == name).map(|e| e.id)
    }

    /// Class ids excluding the background entry, ascending.
    pub fn class_ids(&self) -> Vec<u8> {
        let mut ids: Vec<u8> =
            self.entries.iter().map(|e| e.id).filter(|&id| id != self.background_id).collect();
        ids.sort_unstable();
        ids
    }

    /// Nearest entry by Euclidean RGB distance; ties resolve to lowest id.
    pub fn nearest(&self, rgb: &[f64; 3]) -> u8 {
        let mut sorted: Vec<&PaletteEntry> = self.entries.iter().collect();
        sorted.sort_by_key(|e| e.id);
        let mut best = sorted[0].id;
        let mut best_d = dist(&sorted[0].rgb, rgb);
        for e in &sorted[1..] {
            let d = dist(&e.rgb, rgb);
            if d < best_d {
                best_d = d;
                best = e.id;
            }
        }
        best
    }

    /// Largest distance from `id`'s color to any palette entry. By
    /// construction this is the distance to the background color.
    pub fn max_distance_from(&self, id: u8) -> Result<f64> {
        let c = self.color_of(id)?;
        Ok(self
            .entries
            .iter()
            .map(|e| dist(&e.rgb, &c))
            .fold(0.0, f64::max))
    }

    pub fn min_gap(&self) -> f64 {
        let mut min = f64::INFINITY;
        for (i, a) in self.entries.iter().enumerate() {
            for b in &self.entries[i + 1..] {
                min = min.min(dist(&a.rgb, &b.rgb));
            }
        }
        min
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Palette> {
        let p: Palette = serde_json::from_str(s)?;
        p.validate()?;
        Ok(p)
    }
}

/// Per-pixel integer class ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub labels: Array2<u8>,
}

impl LabelMap {
    pub fn new(labels: Array2<u8>) -> Self {
        Self { labels }
    }

    pub fn filled(h: usize, w: usize, id: u8) -> Self {
        Self { labels: Array2::from_elem((h, w), id) }
    }

    pub fn height(&self) -> usize {
        self.labels.dim().0
    }

    pub fn width(&self) -> usize {
        self.labels.dim().1
    }

    /// Distinct ids present, ascending.
    pub fn present_ids(&self) -> Vec<u8> {
        let mut set = std::collections::BTreeSet::new();
        for &v in self.labels.iter() {
            set.insert(v);
        }
        set.into_iter().collect()
    }

    pub fn ensure_in_palette(&self, palette: &Palette) -> Result<()> {
        for ((y, x), &id) in self.labels.indexed_iter() {
            if palette.entry(id).is_none() {
                return Err(Error::Codec(format!(
                    "label id {id} at ({y}, {x}) not in palette"
                )));
            }
        }
        Ok(())
    }
}

/// Lift a `[0,1]` pixel grid into an 8-bit RGB image.
pub fn grid_to_rgb8(grid: &LatentGrid) -> Result<image::RgbImage> {
    if grid.channels() != 3 {
        return Err(Error::Codec(format!("expected 3 channels, got {}", grid.channels())));
    }
    let (h, w) = (grid.height(), grid.width());
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2].map(|c| {
                (grid.data[[c, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8
            });
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    Ok(img)
}

/// Read an 8-bit RGB image into a `[0,1]` pixel grid.
pub fn rgb8_to_grid(img: &image::RgbImage) -> LatentGrid {
    let (w, h) = img.dimensions();
    let mut g = LatentGrid::zeros(3, h as usize, w as usize, crate::grid::Space::Pixel);
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            g.data[[c, y as usize, x as usize]] = f64::from(p.0[c]) / 255.0;
        }
    }
    g
}

pub fn label_to_png(map: &LabelMap, path: &std::path::Path) -> Result<()> {
    let (h, w) = (map.height(), map.width());
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for ((y, x), &id) in map.labels.indexed_iter() {
        img.put_pixel(x as u32, y as u32, image::Luma([id]));
    }
    img.save(path)?;
    Ok(())
}

pub fn label_from_png(path: &std::path::Path) -> Result<LabelMap> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = img.dimensions();
    let mut labels = Array2::zeros((h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        labels[[y as usize, x as usize]] = p.0[0];
    }
    Ok(LabelMap::new(labels))
}
