//! ShapesWorld corpus: generation, on-disk layout, loading, deterministic
//! subsetting and the train-time augmentations.
//!
//! Directory layout:
//!
//! ```text
//! out/
//!   train/{images,labels}/NNNNN.png
//!   val/{images,labels}/NNNNN.png
//!   palette.json
//!   vocab.json
//!   manifest.json
//! ```

pub mod shapes;

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{
    grid_to_rgb8, label_from_png, label_to_png, mask_to_rgb, rgb8_to_grid, LabelMap, Palette,
};
use crate::conditioning::Vocabulary;
use crate::error::{Error, Result};
use crate::grid::LatentGrid;
use crate::rng;

pub const CANVAS: usize = 64;
const GENERATOR_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub seed: u64,
    pub n: usize,
    pub generator_version: u32,
    pub canvas: usize,
}

/// One (image, labels) pair kept in memory in its compact 8-bit form.
#[derive(Debug, Clone)]
pub struct SceneRecord {
    pub image: image::RgbImage,
    pub labels: LabelMap,
}

impl SceneRecord {
    pub fn image_grid(&self) -> LatentGrid {
        rgb8_to_grid(&self.image)
    }
}

#[derive(Debug)]
pub struct Corpus {
    pub train: Vec<SceneRecord>,
    pub val: Vec<SceneRecord>,
    pub palette: Palette,
    pub vocab: Vocabulary,
    pub manifest: Manifest,
}

/// Deterministically generate `n` scenes and write the corpus to `out`.
///
/// Every scene `i` draws from its own stream, so the directory content is a
/// pure function of `(n, seed)`. Scenes with `i % 10 == 9` form the 10%
/// validation split.
pub fn generate(n: usize, seed: u64, out: &Path) -> Result<Manifest> {
    if n < 1 {
        return Err(Error::Parameter(format!("dataset size must be >= 1, got {n}")));
    }
    let class_names = shapes::class_names();
    let palette = Palette::generate(&class_names, seed)?;
    let vocab = Vocabulary::new(class_names);
    let appearance = shapes::appearance_colors(seed);

    for split in ["train", "val"] {
        std::fs::create_dir_all(out.join(split).join("images"))?;
        std::fs::create_dir_all(out.join(split).join("labels"))?;
    }

    // Shape counts first (the first draw of each scene stream), then one
    // balanced class deck covering all slots.
    let counts: Vec<usize> = (0..n)
        .map(|i| shapes::scene_shape_count(&mut rng::stream(seed, "scene", i as u64)))
        .collect();
    let deck = shapes::class_deck(seed, counts.iter().sum());
    let mut offsets = Vec::with_capacity(n);
    let mut acc = 0usize;
    for c in &counts {
        offsets.push(acc);
        acc += c;
    }

    let mut counters = [0usize; 2];
    for i in 0..n {
        let mut scene_rng = rng::stream(seed, "scene", i as u64);
        let n_shapes = shapes::scene_shape_count(&mut scene_rng);
        debug_assert_eq!(n_shapes, counts[i]);
        let classes = &deck[offsets[i]..offsets[i] + n_shapes];
        let instances = shapes::sample_scene(CANVAS, &appearance, classes, &mut scene_rng);
        let (img, labels) = shapes::render(CANVAS, &instances, palette.background_id, &mut scene_rng);
        let (split, idx) = if i % 10 == 9 {
            counters[1] += 1;
            ("val", counters[1] - 1)
        } else {
            counters[0] += 1;
            ("train", counters[0] - 1)
        };
        let name = format!("{idx:05}.png");
        grid_to_rgb8(&img)?.save(out.join(split).join("images").join(&name))?;
        label_to_png(&labels, &out.join(split).join("labels").join(&name))?;
    }

    std::fs::write(out.join("palette.json"), palette.to_json()?)?;
    std::fs::write(out.join("vocab.json"), vocab.to_json()?)?;
    let manifest = Manifest { seed, n, generator_version: GENERATOR_VERSION, canvas: CANVAS };
    std::fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

fn load_split(dir: &Path) -> Result<Vec<SceneRecord>> {
    let images_dir = dir.join("images");
    let labels_dir = dir.join("labels");
    let mut names: Vec<PathBuf> = std::fs::read_dir(&images_dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    names.sort();
    let mut out = Vec::with_capacity(names.len());
    for img_path in names {
        let file_name = img_path
            .file_name()
            .ok_or_else(|| Error::Io(std::io::Error::other("unnamed image file")))?;
        let image = image::open(&img_path)?.into_rgb8();
        let labels = label_from_png(&labels_dir.join(file_name))?;
        out.push(SceneRecord { image, labels });
    }
    Ok(out)
}

pub fn load(dir: &Path) -> Result<Corpus> {
    let palette = Palette::from_json(&std::fs::read_to_string(dir.join("palette.json"))?)?;
    let vocab = Vocabulary::from_json(&std::fs::read_to_string(dir.join("vocab.json"))?)?;
    let manifest: Manifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    let train = load_split(&dir.join("train"))?;
    let val = load_split(&dir.join("val"))?;
    for rec in train.iter().chain(val.iter()) {
        rec.labels.ensure_in_palette(&palette)?;
    }
    Ok(Corpus { train, val, palette, vocab, manifest })
}

/// Fractions supported by the data-ratio ablation.
pub const SUBSET_FRACTIONS: [f64; 5] = [1.0, 0.5, 0.25, 0.125, 0.0625];

/// Deterministic nested subsample: indices come from one seeded permutation,
/// so `subset(1/4)` is always contained in `subset(1/2)` for the same seed.
pub fn subset_indices(len: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !SUBSET_FRACTIONS.iter().any(|&f| f == fraction) {
        return Err(Error::Parameter(format!(
            "fraction {fraction} not in {SUBSET_FRACTIONS:?}"
        )));
    }
    let keep = ((len as f64) * fraction).ceil() as usize;
    if keep == 0 {
        return Err(Error::Parameter(format!(
            "subset of {len} samples at fraction {fraction} is empty"
        )));
    }
    let mut perm: Vec<usize> = (0..len).collect();
    let mut r = rng::stream(seed, "subset", 0);
    // Fisher-Yates
    for i in (1..len).rev() {
        let j = r.random_range(0..=i);
        perm.swap(i, j);
    }
    perm.truncate(keep);
    Ok(perm)
}

/// Joint flip + scale-jitter augmentation, nearest for labels and bilinear
/// for the image; out-of-canvas reads fill with background.
pub fn augment(
    image: &LatentGrid,
    labels: &LabelMap,
    background_id: u8,
    rng: &mut ChaCha8Rng,
) -> (LatentGrid, LabelMap) {
    let flip = rng.random::<bool>();
    let scale = 0.8 + rng.random::<f64>() * 0.4;
    let (h, w) = (labels.height(), labels.width());
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);

    let mut out_img = LatentGrid::zeros(3, h, w, crate::grid::Space::Pixel);
    let mut out_lab = ndarray::Array2::from_elem((h, w), background_id);
    for y in 0..h {
        for x in 0..w {
            let xs = if flip { (w - 1 - x) as f64 } else { x as f64 };
            let sy = cy + (y as f64 - cy) / scale;
            let sx = cx + (xs - cx) / scale;
            // Nearest-neighbor label lookup.
            let ny = sy.round() as isize;
            let nx = sx.round() as isize;
            if ny >= 0 && ny < h as isize && nx >= 0 && nx < w as isize {
                out_lab[[y, x]] = labels.labels[[ny as usize, nx as usize]];
            }
            // Bilinear image lookup with background fill.
            let y0 = sy.floor();
            let x0 = sx.floor();
            let fy = sy - y0;
            let fx = sx - x0;
            for ch in 0..3 {
                let sample = |yy: f64, xx: f64| -> f64 {
                    let (yy, xx) = (yy as isize, xx as isize);
                    if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                        image.data[[ch, yy as usize, xx as usize]]
                    } else {
                        shapes::BACKGROUND_LEVEL
                    }
                };
                let v = sample(y0, x0) * (1.0 - fy) * (1.0 - fx)
                    + sample(y0, x0 + 1.0) * (1.0 - fy) * fx
                    + sample(y0 + 1.0, x0) * fy * (1.0 - fx)
                    + sample(y0 + 1.0, x0 + 1.0) * fy * fx;
                out_img.data[[ch, y, x]] = v;
            }
        }
    }
    (out_img, LabelMap::new(out_lab))
}

/// Colorize labels and lift both halves of a record into pixel grids.
pub fn record_grids(rec: &SceneRecord, palette: &Palette) -> Result<(LatentGrid, LatentGrid)> {
    let img = rec.image_grid();
    let mask = mask_to_rgb(&rec.labels, palette)?;
    Ok((img, mask))
}
