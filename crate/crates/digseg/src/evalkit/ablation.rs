//! Ablation sweeps mirroring the reference experiments: data ratio,
//! ensemble size, step count x spacing, training-noise mode, accuracy/speed
//! trade-off, and the mask-threshold sweep.
//!
//! Every run writes, into the output directory: a CSV table (fixed columns,
//! documented per kind below), a PNG chart, a summary JSON keyed by the
//! config hash, and the resolved config snapshot.
//!
//! CSV columns per kind:
//!   data_ratio:    fraction,miou,mean_dice
//!   ensemble:      e,miou,mean_dice
//!   steps_spacing: spacing,s,miou,mean_dice
//!   noise_mode:    mode,miou,mean_dice
//!   estep_fps:     e,s,miou,fps
//!   tau_sweep:     tau,group,iou

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::checkpoint::Bundle;
use crate::config::RunConfig;
use crate::dataset::SceneRecord;
use crate::error::{Error, Result};
use crate::pipeline::binarize;
use crate::rng;
use crate::schedule::Spacing;

use super::plot::{line_chart, Series};
use super::{evaluate, infer_scene, measure_fps, EvalReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationKind {
    DataRatio,
    Ensemble,
    StepsSpacing,
    NoiseMode,
    EstepFps,
    TauSweep,
}

impl AblationKind {
    pub fn name(&self) -> &'static str {
        match self {
            AblationKind::DataRatio => "data_ratio",
            AblationKind::Ensemble => "ensemble",
            AblationKind::StepsSpacing => "steps_spacing",
            AblationKind::NoiseMode => "noise_mode",
            AblationKind::EstepFps => "estep_fps",
            AblationKind::TauSweep => "tau_sweep",
        }
    }
}

impl std::str::FromStr for AblationKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "data_ratio" => Ok(AblationKind::DataRatio),
            "ensemble" => Ok(AblationKind::Ensemble),
            "steps_spacing" => Ok(AblationKind::StepsSpacing),
            "noise_mode" => Ok(AblationKind::NoiseMode),
            "estep_fps" => Ok(AblationKind::EstepFps),
            "tau_sweep" => Ok(AblationKind::TauSweep),
            other => Err(Error::parameter(format!("unknown ablation kind `{other}`"))),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct AblationRow {
    pub labels: BTreeMap<String, String>,
    pub values: BTreeMap<String, f64>,
}

#[derive(Debug)]
pub struct AblationOutput {
    pub csv_path: PathBuf,
    pub plot_path: PathBuf,
    pub summary_path: PathBuf,
    pub rows: Vec<AblationRow>,
}

fn single_bundle<'a>(bundles: &'a BTreeMap<String, Bundle>, kind: &str) -> Result<&'a Bundle> {
    if bundles.len() == 1 {
        return Ok(bundles.values().next().unwrap());
    }
    bundles
        .get("model")
        .ok_or_else(|| Error::Eval(format!("{kind} ablation needs one checkpoint (key `model`)")))
}

fn eval_with(
    bundle: &Bundle,
    records: &[SceneRecord],
    cfg: &RunConfig,
    sampler: &crate::config::SamplerSection,
) -> Result<EvalReport> {
    let sampler_cfg = sampler.to_config(&bundle.schedule, rng::derive_seed(cfg.seed, "eval", 0))?;
    evaluate(
        records,
        bundle,
        &sampler_cfg,
        &cfg.pipeline.proposal(),
        &cfg.pipeline.aggregation(),
        rng::derive_seed(cfg.seed, "eval-protocol", 0),
        cfg.eval.val_limit,
    )
}

fn parse_fraction(key: &str) -> Result<f64> {
    match key {
        "1" | "1/1" => Ok(1.0),
        "1/2" => Ok(0.5),
        "1/4" => Ok(0.25),
        "1/8" => Ok(0.125),
        "1/16" => Ok(0.0625),
        other => other
            .parse::<f64>()
            .map_err(|_| Error::parameter(format!("bad data fraction key `{other}`"))),
    }
}

fn row(labels: &[(&str, String)], values: &[(&str, f64)]) -> AblationRow {
    AblationRow {
        labels: labels.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
        values: values.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
    }
}

pub fn run_ablation(
    kind: AblationKind,
    bundles: &BTreeMap<String, Bundle>,
    records: &[SceneRecord],
    cfg: &RunConfig,
    out_dir: &Path,
) -> Result<AblationOutput> {
    if bundles.is_empty() {
        return Err(Error::Eval(format!(
            "{} ablation requires at least one trained checkpoint",
            kind.name()
        )));
    }
    std::fs::create_dir_all(out_dir)?;

    let mut rows: Vec<AblationRow> = Vec::new();
    let header: Vec<&str>;
    let mut series: Vec<Series> = Vec::new();
    let x_label;
    let mut y_label = "miou";

    match kind {
        AblationKind::Ensemble => {
            let bundle = single_bundle(bundles, kind.name())?;
            header = vec!["e", "miou", "mean_dice"];
            x_label = "ensemble size";
            let mut pts = Vec::new();
            for e in [1usize, 2, 4, 8, 10, 16] {
                let mut s = cfg.sampler.clone();
                s.ensemble = e;
                let rep = eval_with(bundle, records, cfg, &s)?;
                rows.push(row(
                    &[("e", e.to_string())],
                    &[("miou", rep.miou), ("mean_dice", rep.mean_dice)],
                ));
                pts.push((e as f64, rep.miou));
            }
            series.push(Series { label: "miou".into(), points: pts });
        }
        AblationKind::StepsSpacing => {
            let bundle = single_bundle(bundles, kind.name())?;
            header = vec!["spacing", "s", "miou", "mean_dice"];
            x_label = "denoising steps";
            for spacing in [Spacing::Trailing, Spacing::Leading] {
                let mut pts = Vec::new();
                for s_steps in [1usize, 2, 4, 10, 25, 50] {
                    if s_steps > bundle.schedule.t_max() {
                        continue;
                    }
                    let mut s = cfg.sampler.clone();
                    s.steps = s_steps;
                    s.spacing = spacing;
                    let rep = eval_with(bundle, records, cfg, &s)?;
                    rows.push(row(
                        &[("spacing", spacing.to_string()), ("s", s_steps.to_string())],
                        &[("miou", rep.miou), ("mean_dice", rep.mean_dice)],
                    ));
                    pts.push((s_steps as f64, rep.miou));
                }
                series.push(Series { label: spacing.to_string(), points: pts });
            }
        }
        AblationKind::NoiseMode => {
            header = vec!["mode", "miou", "mean_dice"];
            x_label = "noise mode (index)";
            let mut pts = Vec::new();
            for (i, (mode, bundle)) in bundles.iter().enumerate() {
                let rep = eval_with(bundle, records, cfg, &cfg.sampler)?;
                rows.push(row(
                    &[("mode", mode.clone())],
                    &[("miou", rep.miou), ("mean_dice", rep.mean_dice)],
                ));
                pts.push((i as f64, rep.miou));
            }
            series.push(Series { label: "miou".into(), points: pts });
        }
        AblationKind::DataRatio => {
            header = vec!["fraction", "miou", "mean_dice"];
            x_label = "training data fraction";
            let mut pts = Vec::new();
            let mut keyed: Vec<(f64, &String, &Bundle)> = bundles
                .iter()
                .map(|(k, b)| parse_fraction(k).map(|f| (f, k, b)))
                .collect::<Result<_>>()?;
            keyed.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            for (fraction, _, bundle) in keyed {
                let rep = eval_with(bundle, records, cfg, &cfg.sampler)?;
                rows.push(row(
                    &[("fraction", fraction.to_string())],
                    &[("miou", rep.miou), ("mean_dice", rep.mean_dice)],
                ));
                pts.push((fraction, rep.miou));
            }
            series.push(Series { label: "miou".into(), points: pts });
        }
        AblationKind::EstepFps => {
            let bundle = single_bundle(bundles, kind.name())?;
            header = vec!["e", "s", "miou", "fps"];
            x_label = "e x s";
            y_label = "fps";
            let mut pts = Vec::new();
            for (e, s_steps) in [(1usize, 1usize), (1, 2), (4, 2), (8, 2)] {
                let mut s = cfg.sampler.clone();
                s.ensemble = e;
                s.steps = s_steps;
                let rep = eval_with(bundle, records, cfg, &s)?;
                let sampler_cfg =
                    s.to_config(&bundle.schedule, rng::derive_seed(cfg.seed, "fps", 0))?;
                let fps = measure_fps(
                    records,
                    bundle,
                    &sampler_cfg,
                    &cfg.pipeline.proposal(),
                    &cfg.pipeline.aggregation(),
                    rng::derive_seed(cfg.seed, "fps-protocol", 0),
                    cfg.eval.fps_warmup,
                    cfg.eval.fps_samples,
                )?;
                rows.push(row(
                    &[("e", e.to_string()), ("s", s_steps.to_string())],
                    &[("miou", rep.miou), ("fps", fps)],
                ));
                pts.push(((e * s_steps) as f64, fps));
            }
            series.push(Series { label: "fps".into(), points: pts });
        }
        AblationKind::TauSweep => {
            let bundle = single_bundle(bundles, kind.name())?;
            header = vec!["tau", "group", "iou"];
            x_label = "tau";
            y_label = "iou";
            rows = tau_sweep_rows(bundle, records, cfg)?;
            for group in ["small", "large", "all"] {
                let pts: Vec<(f64, f64)> = rows
                    .iter()
                    .filter(|r| r.labels["group"] == group)
                    .map(|r| (r.values["tau"], r.values["iou"]))
                    .collect();
                series.push(Series { label: group.into(), points: pts });
            }
        }
    }

    // CSV with fixed column order.
    let csv_path = out_dir.join(format!("{}.csv", kind.name()));
    let mut wtr = csv::Writer::from_path(&csv_path)?;
    wtr.write_record(&header)?;
    let fmt_num = |v: f64| {
        let s = format!("{v:.6}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    };
    for r in &rows {
        let fields: Vec<String> = header
            .iter()
            .map(|col| {
                r.labels
                    .get(*col)
                    .cloned()
                    .or_else(|| r.values.get(*col).map(|v| fmt_num(*v)))
                    .unwrap_or_default()
            })
            .collect();
        wtr.write_record(&fields)?;
    }
    wtr.flush()?;

    let plot_path = out_dir.join(format!("{}.png", kind.name()));
    line_chart(&plot_path, kind.name(), x_label, y_label, &series)?;

    #[derive(Serialize)]
    struct Summary<'a> {
        kind: &'a str,
        config_hash: String,
        n_records: usize,
        rows: &'a [AblationRow],
    }
    let summary_path = out_dir.join(format!("{}_summary.json", kind.name()));
    std::fs::write(
        &summary_path,
        serde_json::to_string_pretty(&Summary {
            kind: kind.name(),
            config_hash: cfg.hash(),
            n_records: records.len(),
            rows: &rows,
        })?,
    )?;
    std::fs::write(out_dir.join("config.toml"), cfg.to_toml()?)?;

    Ok(AblationOutput { csv_path, plot_path, summary_path, rows })
}

/// Pixel area below which a ground-truth region counts as "small" for the
/// threshold sweep.
pub const SMALL_REGION_PIXELS: u64 = 150;

/// Per-tau IoU for small / large / all ground-truth regions. Logit maps are
/// generated once per (image, proposed class) and swept over thresholds.
fn tau_sweep_rows(
    bundle: &Bundle,
    records: &[SceneRecord],
    cfg: &RunConfig,
) -> Result<Vec<AblationRow>> {
    let taus: Vec<f64> = (4..=18).map(|i| (i as f64 * 5.0).round() / 100.0).collect();
    let limit = if cfg.eval.val_limit == 0 { records.len() } else { cfg.eval.val_limit };
    let sampler_cfg = cfg
        .sampler
        .to_config(&bundle.schedule, rng::derive_seed(cfg.seed, "tau", 0))?;

    #[derive(Default, Clone, Copy)]
    struct Acc {
        tp: u64,
        fp: u64,
        fn_: u64,
    }
    let mut acc: BTreeMap<(usize, &str), Acc> = BTreeMap::new();

    for (i, rec) in records.iter().take(limit).enumerate() {
        let img = rec.image_grid();
        let seed = rng::derive_seed(cfg.seed, "tau-scene", i as u64);
        let (_, masks) = infer_scene(
            &img,
            &rec.labels,
            bundle,
            &sampler_cfg,
            &cfg.pipeline.proposal(),
            &cfg.pipeline.aggregation(),
            seed,
        )?;
        for mask in &masks {
            let gt: Vec<bool> = rec.labels.labels.iter().map(|&v| v == mask.class_id).collect();
            let gt_count = gt.iter().filter(|&&v| v).count() as u64;
            if gt_count == 0 {
                continue; // false-positive proposal; no region to bucket
            }
            let bucket = if gt_count < SMALL_REGION_PIXELS { "small" } else { "large" };
            for (ti, &tau) in taus.iter().enumerate() {
                let pred = binarize(&mask.logits, tau);
                let mut a = Acc::default();
                for (p, g) in pred.iter().zip(gt.iter()) {
                    match (*p, *g) {
                        (true, true) => a.tp += 1,
                        (true, false) => a.fp += 1,
                        (false, true) => a.fn_ += 1,
                        _ => {}
                    }
                }
                for key in [bucket, "all"] {
                    let e = acc.entry((ti, key)).or_default();
                    e.tp += a.tp;
                    e.fp += a.fp;
                    e.fn_ += a.fn_;
                }
            }
        }
    }

    let mut rows = Vec::new();
    for (ti, &tau) in taus.iter().enumerate() {
        for group in ["small", "large", "all"] {
            if let Some(a) = acc.get(&(ti, group)) {
                let denom = (a.tp + a.fp + a.fn_) as f64;
                let iou = if denom > 0.0 { a.tp as f64 / denom } else { 0.0 };
                rows.push(row(
                    &[("group", group.to_string())],
                    &[("tau", tau), ("iou", iou)],
                ));
            }
        }
    }
    Ok(rows)
}

/// Argmax of (tau, iou) points: the threshold with the best IoU.
pub fn optimal_tau(rows: &[AblationRow], group: &str) -> Option<f64> {
    rows.iter()
        .filter(|r| r.labels.get("group").map(String::as_str) == Some(group))
        .max_by(|a, b| a.values["iou"].partial_cmp(&b.values["iou"]).unwrap())
        .map(|r| r.values["tau"])
}
