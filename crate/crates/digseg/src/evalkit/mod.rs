//! Metrics (IoU / Dice / precision / recall / F1, mIoU) and the evaluation
//! loop that runs the full proposal -> per-class generation -> aggregation
//! protocol over a validation split.

pub mod ablation;
pub mod plot;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Bundle;
use crate::codec::{LabelMap, Palette};
use crate::conditioning::{embed_class, embed_image, propose_classes, ProposalConfig};
use crate::error::{Error, Result};
use crate::pipeline::{aggregate, score_decoded, AggregationConfig, ClassMask};
use crate::rng;
use crate::sampler::{sample, SamplerConfig};

/// Per-class pixel counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

/// Accumulated confusion counts keyed by class id (background excluded).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfusionTally {
    pub per_class: BTreeMap<u8, Counts>,
    background_id: u8,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct ClassScores {
    pub iou: f64,
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Scores {
    pub per_class: BTreeMap<String, ClassScores>,
    pub miou: f64,
    pub mean_dice: f64,
}

impl ConfusionTally {
    pub fn new(background_id: u8) -> Self {
        Self { per_class: BTreeMap::new(), background_id }
    }

    /// Accumulate one prediction/ground-truth pair.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if pred.labels.dim() != gt.labels.dim() {
            return Err(Error::Eval(format!(
                "dim mismatch: pred {:?} vs gt {:?}",
                pred.labels.dim(),
                gt.labels.dim()
            )));
        }
        for (&p, &g) in pred.labels.iter().zip(gt.labels.iter()) {
            if p == g {
                if p != self.background_id {
                    self.per_class.entry(p).or_default().tp += 1;
                }
            } else {
                if p != self.background_id {
                    self.per_class.entry(p).or_default().fp += 1;
                }
                if g != self.background_id {
                    self.per_class.entry(g).or_default().fn_ += 1;
                }
            }
        }
        Ok(())
    }

    /// Merge another tally (commutative addition).
    pub fn merge(&mut self, other: &ConfusionTally) {
        for (id, c) in &other.per_class {
            let e = self.per_class.entry(*id).or_default();
            e.tp += c.tp;
            e.fp += c.fp;
            e.fn_ += c.fn_;
        }
    }

    /// Finalize into per-class scores and means over the classes present in
    /// ground truth or prediction (background excluded by construction).
    pub fn scores(&self, palette: &Palette) -> Scores {
        let mut per_class = BTreeMap::new();
        let (mut iou_sum, mut dice_sum, mut n) = (0.0, 0.0, 0.0);
        for (id, c) in &self.per_class {
            let (tp, fp, fn_) = (c.tp as f64, c.fp as f64, c.fn_ as f64);
            if tp + fp + fn_ == 0.0 {
                continue;
            }
            let iou = tp / (tp + fp + fn_);
            let dice = 2.0 * tp / (2.0 * tp + fp + fn_);
            let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            let name = palette
                .entry(*id)
                .map(|e| e.name.clone())
                .unwrap_or_else(|| format!("id{id}"));
            per_class.insert(name, ClassScores { iou, dice, precision, recall, f1 });
            iou_sum += iou;
            dice_sum += dice;
            n += 1.0;
        }
        let miou = if n > 0.0 { iou_sum / n } else { 0.0 };
        let mean_dice = if n > 0.0 { dice_sum / n } else { 0.0 };
        Scores { per_class, miou, mean_dice }
    }
}

/// Score one prediction against ground truth.
pub fn score(pred: &LabelMap, gt: &LabelMap, palette: &Palette) -> Result<Scores> {
    let mut tally = ConfusionTally::new(palette.background_id);
    tally.accumulate(pred, gt)?;
    Ok(tally.scores(palette))
}

/// Full protocol for one image: propose candidate classes from the scene's
/// labels (stand-in embedder), generate one conditioned mask per candidate,
/// and aggregate. Returns the prediction plus the per-class logit maps.
pub fn infer_scene(
    image: &crate::grid::LatentGrid,
    gt_labels: &LabelMap,
    bundle: &Bundle,
    sampler_base: &SamplerConfig,
    proposal_cfg: &ProposalConfig,
    agg_cfg: &AggregationConfig,
    seed: u64,
) -> Result<(LabelMap, Vec<ClassMask>)> {
    let palette = &bundle.meta.palette;
    let vocab = &bundle.meta.vocab;
    let (global, patches) = embed_image(gt_labels, palette, vocab, proposal_cfg, seed)?;
    let proposals = propose_classes(&global, &patches, vocab, proposal_cfg)?;

    let z_x = bundle.codec.encode(image)?;
    let mut masks = Vec::with_capacity(proposals.len());
    for name in &proposals {
        let class_id = palette
            .id_of_name(name)
            .ok_or_else(|| Error::Vocabulary(format!("proposed class `{name}` not in palette")))?;
        let t_clip = embed_class(name, vocab)?;
        let mut cfg = sampler_base.clone();
        cfg.seed = rng::derive_seed(seed, "class-sample", u64::from(class_id));
        let z_y = sample(&z_x, &t_clip, &bundle.denoiser, &cfg, &bundle.schedule)?;
        let decoded = bundle.codec.decode(&z_y)?;
        masks.push(ClassMask {
            class_id,
            class_name: name.clone(),
            logits: score_decoded(&decoded, class_id, palette)?,
        });
    }
    let pred = aggregate(&masks, agg_cfg, palette, (gt_labels.height(), gt_labels.width()))?;
    Ok((pred, masks))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_images: usize,
    pub miou: f64,
    pub mean_dice: f64,
    pub per_class: BTreeMap<String, ClassScores>,
}

/// Evaluate the full protocol over a validation slice; tallies are merged
/// across images before scoring (dataset-level mIoU).
pub fn evaluate(
    records: &[crate::dataset::SceneRecord],
    bundle: &Bundle,
    sampler_base: &SamplerConfig,
    proposal_cfg: &ProposalConfig,
    agg_cfg: &AggregationConfig,
    seed: u64,
    limit: usize,
) -> Result<EvalReport> {
    let take = if limit == 0 { records.len() } else { limit.min(records.len()) };
    if take == 0 {
        return Err(Error::Eval("empty evaluation set".into()));
    }
    let mut tally = ConfusionTally::new(bundle.meta.palette.background_id);
    for (i, rec) in records.iter().take(take).enumerate() {
        let img = rec.image_grid();
        let scene_seed = rng::derive_seed(seed, "eval-scene", i as u64);
        let (pred, _) = infer_scene(
            &img,
            &rec.labels,
            bundle,
            sampler_base,
            proposal_cfg,
            agg_cfg,
            scene_seed,
        )?;
        tally.accumulate(&pred, &rec.labels)?;
    }
    let scores = tally.scores(&bundle.meta.palette);
    Ok(EvalReport {
        n_images: take,
        miou: scores.miou,
        mean_dice: scores.mean_dice,
        per_class: scores.per_class,
    })
}

/// Wall-clock throughput of the full single-image protocol, in images per
/// second, measured after a warmup.
pub fn measure_fps(
    records: &[crate::dataset::SceneRecord],
    bundle: &Bundle,
    sampler_base: &SamplerConfig,
    proposal_cfg: &ProposalConfig,
    agg_cfg: &AggregationConfig,
    seed: u64,
    warmup: usize,
    samples: usize,
) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Eval("no records for throughput measurement".into()));
    }
    let run_one = |i: usize| -> Result<()> {
        let rec = &records[i % records.len()];
        let img = rec.image_grid();
        let scene_seed = rng::derive_seed(seed, "fps-scene", i as u64);
        infer_scene(&img, &rec.labels, bundle, sampler_base, proposal_cfg, agg_cfg, scene_seed)?;
        Ok(())
    };
    for i in 0..warmup {
        run_one(i)?;
    }
    let t0 = std::time::Instant::now();
    for i in 0..samples {
        run_one(warmup + i)?;
    }
    Ok(samples as f64 / t0.elapsed().as_secs_f64())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn palette() -> Palette {
        Palette::generate(
            &(1..=6).map(|i| format!("class{i}")).collect::<Vec<_>>(),
            1,
        )
        .unwrap()
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let p = palette();
        let gt = LabelMap::new(arr2(&[[1, 2], [0, 3]]));
        let s = score(&gt, &gt, &p).unwrap();
        assert_eq!(s.per_class.len(), 3);
        for cs in s.per_class.values() {
            assert_eq!(cs.iou, 1.0);
            assert_eq!(cs.dice, 1.0);
        }
        assert_eq!(s.miou, 1.0);
    }

    #[test]
    fn hand_counted_two_by_two() {
        // gt [[1,1],[2,2]], pred [[1,2],[2,2]]:
        // class1: tp=1 fp=0 fn=1 -> IoU 1/2, Dice 2/3
        // class2: tp=2 fp=1 fn=0 -> IoU 2/3, Dice 4/5
        let p = palette();
        let gt = LabelMap::new(arr2(&[[1, 1], [2, 2]]));
        let pred = LabelMap::new(arr2(&[[1, 2], [2, 2]]));
        let s = score(&pred, &gt, &p).unwrap();
        let c1 = s.per_class.get("class1").unwrap();
        let c2 = s.per_class.get("class2").unwrap();
        assert!((c1.iou - 0.5).abs() < 1e-12);
        assert!((c2.iou - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.miou - 7.0 / 12.0).abs() < 1e-12);
        assert!((c1.dice - 2.0 / 3.0).abs() < 1e-12);
        assert!((c2.dice - 0.8).abs() < 1e-12);
    }

    #[test]
    fn matches_exhaustive_counting_oracle() {
        // Random 16x16 instances over 6 classes + background, counted by a
        // brute-force per-pixel loop.
        let p = palette();
        let mut r = rng::stream(5, "metric-oracle", 0);
        for _case in 0..50 {
            let gen = |r: &mut rand_chacha::ChaCha8Rng| {
                LabelMap::new(ndarray::Array2::from_shape_simple_fn((16, 16), || {
                    rand::Rng::random_range(r, 0..=6u8)
                }))
            };
            let gt = gen(&mut r);
            let pred = gen(&mut r);
            let s = score(&pred, &gt, &p).unwrap();
            for id in 1..=6u8 {
                let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
                for y in 0..16 {
                    for x in 0..16 {
                        let (pv, gv) = (pred.labels[[y, x]], gt.labels[[y, x]]);
                        if pv == id && gv == id {
                            tp += 1;
                        }
                        if pv == id && gv != id {
                            fp += 1;
                        }
                        if pv != id && gv == id {
                            fn_ += 1;
                        }
                    }
                }
                let name = p.entry(id).unwrap().name.clone();
                match s.per_class.get(&name) {
                    Some(cs) => {
                        let want = tp as f64 / (tp + fp + fn_) as f64;
                        assert!((cs.iou - want).abs() < 1e-12);
                    }
                    None => assert_eq!(tp + fp + fn_, 0),
                }
            }
        }
    }

    #[test]
    fn miou_invariant_under_consistent_relabeling() {
        let p = palette();
        let gt = LabelMap::new(arr2(&[[1, 1, 2], [2, 3, 3]]));
        let pred = LabelMap::new(arr2(&[[1, 2, 2], [2, 3, 1]]));
        let s1 = score(&pred, &gt, &p).unwrap();
        // Swap ids 1 <-> 3 in both maps.
        let swap = |m: &LabelMap| {
            LabelMap::new(m.labels.mapv(|v| match v {
                1 => 3,
                3 => 1,
                other => other,
            }))
        };
        let s2 = score(&swap(&pred), &swap(&gt), &p).unwrap();
        assert!((s1.miou - s2.miou).abs() < 1e-12);
    }

    #[test]
    fn merged_tallies_equal_joint_accumulation() {
        let p = palette();
        let gt1 = LabelMap::new(arr2(&[[1, 2], [0, 1]]));
        let pr1 = LabelMap::new(arr2(&[[1, 0], [2, 1]]));
        let gt2 = LabelMap::new(arr2(&[[3, 3], [3, 0]]));
        let pr2 = LabelMap::new(arr2(&[[3, 1], [3, 3]]));
        let mut joint = ConfusionTally::new(0);
        joint.accumulate(&pr1, &gt1).unwrap();
        joint.accumulate(&pr2, &gt2).unwrap();
        let mut a = ConfusionTally::new(0);
        a.accumulate(&pr1, &gt1).unwrap();
        let mut b = ConfusionTally::new(0);
        b.accumulate(&pr2, &gt2).unwrap();
        a.merge(&b);
        assert_eq!(a, joint);
    }
}
