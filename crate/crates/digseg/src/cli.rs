//! Command-line entry point: dataset generation, codec pretraining, model
//! training, inference, evaluation and ablations, driven by the layered
//! configuration (defaults < config file < --set overrides < flags).
//!
//! Exit codes: 0 success, 2 usage errors (unknown flags or subcommands),
//! 1 runtime failures with a single machine-parsable JSON line on stderr.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{self, Bundle};
use crate::codec::{self, mask_to_rgb, rgb8_to_grid, LatentCodec};
use crate::conditioning::{embed_class, embed_image, propose_classes};
use crate::config::RunConfig;
use crate::dataset;
use crate::denoiser;
use crate::error::{Error, Result};
use crate::evalkit::{self, ablation::AblationKind};
use crate::pipeline::{aggregate, score_decoded, ClassMask};
use crate::rng;
use crate::sampler::sample;

#[derive(Parser, Debug)]
#[command(name = "digseg", version, about = "Text-conditioned latent-diffusion segmentation")]
struct Cli {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted-path overrides, e.g. --set schedule.t=500 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Master seed; falls back to DIGSEG_SEED, then to the config value.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Base directory that relative paths are resolved against.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    /// Worker-count ceiling. This build executes serially; values above 1
    /// are accepted and act as an upper bound only.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Clone)]
struct SamplerFlags {
    /// Sampler kind: ddpm or ddim.
    #[arg(long)]
    sampler: Option<String>,
    /// Inference step count S.
    #[arg(long)]
    steps: Option<usize>,
    /// Timestep spacing: leading or trailing.
    #[arg(long)]
    spacing: Option<String>,
    /// DDIM stochasticity.
    #[arg(long)]
    eta: Option<f64>,
    /// Ensemble size E.
    #[arg(long)]
    ensemble: Option<usize>,
}

impl SamplerFlags {
    fn as_overrides(&self) -> Vec<String> {
        let mut o = Vec::new();
        if let Some(v) = &self.sampler {
            o.push(format!("sampler.kind={v}"));
        }
        if let Some(v) = self.steps {
            o.push(format!("sampler.steps={v}"));
        }
        if let Some(v) = &self.spacing {
            o.push(format!("sampler.spacing={v}"));
        }
        if let Some(v) = self.eta {
            o.push(format!("sampler.eta={v}"));
        }
        if let Some(v) = self.ensemble {
            o.push(format!("sampler.ensemble={v}"));
        }
        o
    }
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic shapes corpus.
    GenData {
        /// Number of scenes (overrides data.n).
        #[arg(long)]
        n: Option<usize>,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the toy latent codec on a dataset and save it.
    PretrainCodec {
        /// Dataset directory (from gen-data).
        #[arg(long)]
        data: PathBuf,
        /// Output directory for the codec checkpoint and reports.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the denoiser (pretraining the codec inline when needed).
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Reuse a pretrained codec checkpoint instead of training one.
        #[arg(long)]
        codec_ckpt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment one image with a trained model.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Comma-separated class queries; defaults to proposal from --label
        /// or, failing that, the full vocabulary.
        #[arg(long)]
        classes: Option<String>,
        /// Ground-truth label PNG enabling the class-proposal stage.
        #[arg(long)]
        label: Option<PathBuf>,
        #[command(flatten)]
        sampler: SamplerFlags,
        /// Global similarity threshold for proposals.
        #[arg(long)]
        tau_sim: Option<f64>,
        /// Patch refinement threshold for proposals.
        #[arg(long)]
        tau_patch: Option<f64>,
        /// Write per-class logit grids as CSV next to the prediction.
        #[arg(long, default_value_t = false)]
        dump_logits: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a trained model on a dataset's validation split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Cap on validation images (0 = all).
        #[arg(long)]
        limit: Option<usize>,
        #[command(flatten)]
        sampler: SamplerFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an ablation sweep and emit CSV + plot + summary.
    Ablate {
        /// One of: data_ratio, ensemble, steps_spacing, noise_mode,
        /// estep_fps, tau_sweep.
        #[arg(long)]
        kind: String,
        /// Checkpoint(s); repeat as `--ckpt path` or `--ckpt key=path`
        /// (keys: data fractions like 1/2, or noise mode names).
        #[arg(long = "ckpt", required = true)]
        ckpts: Vec<String>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        limit: Option<usize>,
        #[command(flatten)]
        sampler: SamplerFlags,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            let kind = match &e {
                Error::Parameter(_) => "parameter",
                Error::Config(_) => "config",
                Error::Codec(_) => "codec",
                Error::Model(_) => "model",
                Error::Vocabulary(_) => "vocabulary",
                Error::Aggregation(_) => "aggregation",
                Error::Checkpoint(_) => "checkpoint",
                Error::Diverged { .. } => "diverged",
                Error::Eval(_) => "eval",
                Error::Io(_) => "io",
                Error::Image(_) => "image",
                Error::Serde(_) => "serde",
                Error::Csv(_) => "csv",
            };
            let line = serde_json::json!({"error": kind, "message": e.to_string()});
            eprintln!("{line}");
            1
        }
    }
}

fn resolve_config(cli: &Cli, extra: &[String]) -> Result<RunConfig> {
    let base = match &cli.config {
        Some(path) => RunConfig::from_toml(&std::fs::read_to_string(resolve(&cli.workdir, path))?)?,
        None => RunConfig::default(),
    };
    let mut cfg = base.with_overrides(&cli.overrides)?;
    if !extra.is_empty() {
        cfg = cfg.with_overrides(extra)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    } else if let Ok(env_seed) = std::env::var("DIGSEG_SEED") {
        cfg.seed = env_seed
            .parse()
            .map_err(|_| Error::parameter(format!("DIGSEG_SEED `{env_seed}` is not a u64")))?;
    }
    if cli.jobs == 0 {
        return Err(Error::parameter("--jobs must be >= 1"));
    }
    Ok(cfg)
}

fn resolve(workdir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        workdir.join(p)
    }
}

fn write_snapshot(dir: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    Ok(())
}

/// Pixel-grid training samples for codec pretraining: every training image
/// plus every colorized training mask.
fn codec_samples(corpus: &dataset::Corpus) -> Result<Vec<ndarray::Array3<f32>>> {
    let mut out = Vec::with_capacity(corpus.train.len() * 2);
    for rec in &corpus.train {
        out.push(rec.image_grid().data.mapv(|v| v as f32));
        out.push(mask_to_rgb(&rec.labels, &corpus.palette)?.data.mapv(|v| v as f32));
    }
    Ok(out)
}

fn pretrain_codec_inner(
    corpus: &dataset::Corpus,
    cfg: &RunConfig,
) -> Result<(LatentCodec, Vec<(usize, f64)>)> {
    let samples = codec_samples(corpus)?;
    let train_cfg = cfg.codec.train_config(rng::derive_seed(cfg.seed, "codec", 0));
    let (ae, curve) = codec::pretrain(&samples, &train_cfg, |step, loss| {
        eprintln!("codec step {step}: loss {loss:.6}");
    })?;
    Ok((LatentCodec::Toy(ae), curve))
}

fn write_loss_csv(path: &Path, curve: &[(usize, f64)]) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(["step", "loss"])?;
    for (step, loss) in curve {
        wtr.write_record([step.to_string(), format!("{loss}")])?;
    }
    wtr.flush()?;
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::GenData { n, out } => {
            let mut extra = Vec::new();
            if let Some(n) = n {
                extra.push(format!("data.n={n}"));
            }
            let cfg = resolve_config(&cli, &extra)?;
            let out = resolve(&cli.workdir, out);
            let manifest = dataset::generate(cfg.data.n, cfg.seed, &out)?;
            write_snapshot(&out, &cfg)?;
            println!(
                "{}",
                serde_json::json!({
                    "out": out.display().to_string(),
                    "n": manifest.n,
                    "seed": manifest.seed,
                    "config_hash": cfg.hash(),
                })
            );
            Ok(())
        }
        Cmd::PretrainCodec { data, out } => {
            let cfg = resolve_config(&cli, &[])?;
            let corpus = dataset::load(&resolve(&cli.workdir, data))?;
            let out = resolve(&cli.workdir, out);
            std::fs::create_dir_all(&out)?;
            let (latent_codec, curve) = pretrain_codec_inner(&corpus, &cfg)?;
            let ckpt = out.join("codec.ckpt");
            checkpoint::save_codec(&ckpt, &cfg, &corpus.palette, &corpus.vocab, &latent_codec)?;
            write_loss_csv(&out.join("codec_loss.csv"), &curve)?;
            write_snapshot(&out, &cfg)?;

            // Fidelity report on the held-out masks.
            let masks: Vec<_> = corpus.val.iter().map(|r| r.labels.clone()).collect();
            let report = codec::toy::roundtrip_report(&latent_codec, &masks, &corpus.palette)?;
            let z = latent_codec.encode(&corpus.val[0].image_grid())?;
            let lipschitz = codec::decode_lipschitz_estimate(&latent_codec, &z, cfg.seed)?;
            let summary = serde_json::json!({
                "checkpoint": ckpt.display().to_string(),
                "config_hash": cfg.hash(),
                "roundtrip": report,
                "decode_lipschitz": lipschitz,
            });
            std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
            println!("{summary}");
            Ok(())
        }
        Cmd::Train { data, codec_ckpt, out } => {
            let cfg = resolve_config(&cli, &[])?;
            let corpus = dataset::load(&resolve(&cli.workdir, data))?;
            let out = resolve(&cli.workdir, out);
            std::fs::create_dir_all(&out)?;

            let latent_codec = match (cfg.codec.mode.as_str(), codec_ckpt) {
                ("identity", _) => LatentCodec::Identity,
                (_, Some(path)) => checkpoint::load_codec(&resolve(&cli.workdir, path))?.1,
                ("toy_autoencoder", None) => {
                    eprintln!("no codec checkpoint given; pretraining inline");
                    let (c, curve) = pretrain_codec_inner(&corpus, &cfg)?;
                    write_loss_csv(&out.join("codec_loss.csv"), &curve)?;
                    c
                }
                (other, None) => {
                    return Err(Error::config(format!("unknown codec mode `{other}`")));
                }
            };

            let schedule = crate::schedule::build_schedule(
                cfg.schedule.t,
                cfg.schedule.beta_start,
                cfg.schedule.beta_end,
            )?;
            let noise = cfg.noise.to_pyramid();
            let train_cfg =
                cfg.denoiser.train_config(rng::derive_seed(cfg.seed, "train", 0), noise);
            let dcfg = cfg.denoiser.model_config();

            // Data-ratio subset of the training split.
            let records: Vec<dataset::SceneRecord> = if cfg.data.fraction < 1.0 {
                dataset::subset_indices(corpus.train.len(), cfg.data.fraction, cfg.seed)?
                    .into_iter()
                    .map(|i| corpus.train[i].clone())
                    .collect()
            } else {
                corpus.train.clone()
            };

            let snapshot_every = (train_cfg.iterations / 4).max(1);
            let out_for_snapshots = out.clone();
            let output = denoiser::train(
                &records,
                &corpus.palette,
                &corpus.vocab,
                &latent_codec,
                &train_cfg,
                &dcfg,
                &schedule,
                |step, loss| eprintln!("step {step}: loss {loss:.6}"),
                snapshot_every,
                |step, model| {
                    checkpoint::save_model(
                        &out_for_snapshots.join(format!("model_step{step:06}.ckpt")),
                        &cfg,
                        &corpus.palette,
                        &corpus.vocab,
                        &latent_codec,
                        model,
                        step,
                    )
                },
            )?;
            let final_path = out.join("model.ckpt");
            checkpoint::save_model(
                &final_path,
                &cfg,
                &corpus.palette,
                &corpus.vocab,
                &latent_codec,
                &output.denoiser,
                train_cfg.iterations,
            )?;
            write_loss_csv(&out.join("loss_curve.csv"), &output.loss_curve)?;
            write_snapshot(&out, &cfg)?;
            let summary = serde_json::json!({
                "checkpoint": final_path.display().to_string(),
                "config_hash": cfg.hash(),
                "iterations": train_cfg.iterations,
                "train_records": records.len(),
                "final_loss": output.loss_curve.last().map(|(_, l)| *l),
            });
            std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
            println!("{summary}");
            Ok(())
        }
        Cmd::Infer {
            ckpt,
            image,
            classes,
            label,
            sampler,
            tau_sim,
            tau_patch,
            dump_logits,
            out,
        } => {
            let mut extra = sampler.as_overrides();
            if let Some(v) = tau_sim {
                extra.push(format!("pipeline.tau_sim={v}"));
            }
            if let Some(v) = tau_patch {
                extra.push(format!("pipeline.tau_patch={v}"));
            }
            let cfg = resolve_config(&cli, &extra)?;
            let bundle = checkpoint::load_model(&resolve(&cli.workdir, ckpt))?;
            let out = resolve(&cli.workdir, out);
            std::fs::create_dir_all(&out)?;

            let img = rgb8_to_grid(&image::open(resolve(&cli.workdir, image))?.into_rgb8());
            let wanted: Vec<String> = match (classes, label) {
                (Some(list), _) => list.split(',').map(|s| s.trim().to_string()).collect(),
                (None, Some(label_path)) => {
                    let gt = codec::label_from_png(&resolve(&cli.workdir, label_path))?;
                    let pcfg = cfg.pipeline.proposal();
                    let (global, patches) = embed_image(
                        &gt,
                        &bundle.meta.palette,
                        &bundle.meta.vocab,
                        &pcfg,
                        rng::derive_seed(cfg.seed, "infer-embed", 0),
                    )?;
                    propose_classes(&global, &patches, &bundle.meta.vocab, &pcfg)?
                        .into_iter()
                        .collect()
                }
                (None, None) => bundle.meta.vocab.classes.clone(),
            };

            let sampler_cfg = cfg
                .sampler
                .to_config(&bundle.schedule, rng::derive_seed(cfg.seed, "infer", 0))?;
            let z_x = bundle.codec.encode(&img)?;
            let mut masks: Vec<ClassMask> = Vec::new();
            for name in &wanted {
                if !bundle.meta.vocab.contains(name) {
                    return Err(Error::Vocabulary(format!("class `{name}` not in vocabulary")));
                }
                let class_id = bundle.meta.palette.id_of_name(name).ok_or_else(|| {
                    Error::Vocabulary(format!("class `{name}` has no palette entry"))
                })?;
                let t_clip = embed_class(name, &bundle.meta.vocab)?;
                let mut scfg = sampler_cfg.clone();
                scfg.seed = rng::derive_seed(cfg.seed, "infer-class", u64::from(class_id));
                let z_y = sample(&z_x, &t_clip, &bundle.denoiser, &scfg, &bundle.schedule)?;
                let decoded = bundle.codec.decode(&z_y)?;
                masks.push(ClassMask {
                    class_id,
                    class_name: name.clone(),
                    logits: score_decoded(&decoded, class_id, &bundle.meta.palette)?,
                });
            }
            let pred = aggregate(
                &masks,
                &cfg.pipeline.aggregation(),
                &bundle.meta.palette,
                (img.height(), img.width()),
            )?;
            codec::label_to_png(&pred, &out.join("pred.png"))?;
            if *dump_logits {
                for m in &masks {
                    let mut wtr = csv::Writer::from_path(
                        out.join(format!("logits_{}.csv", m.class_name.replace(' ', "_"))),
                    )?;
                    for row in m.logits.rows() {
                        wtr.write_record(row.iter().map(|v| format!("{v}")))?;
                    }
                    wtr.flush()?;
                }
            }
            write_snapshot(&out, &cfg)?;
            let sidecar = serde_json::json!({
                "classes": wanted,
                "tau": cfg.pipeline.tau,
                "tau_bg": cfg.pipeline.tau_bg,
                "ensemble": cfg.sampler.ensemble,
                "steps": cfg.sampler.steps,
                "spacing": cfg.sampler.spacing,
                "sampler": cfg.sampler.kind,
                "eta": cfg.sampler.eta,
                "seed": cfg.seed,
                "config_hash": cfg.hash(),
                "checkpoint_hash": bundle.meta.config_hash,
            });
            std::fs::write(out.join("pred.json"), serde_json::to_string_pretty(&sidecar)?)?;
            println!("{sidecar}");
            Ok(())
        }
        Cmd::Eval { ckpt, data, limit, sampler, out } => {
            let mut extra = sampler.as_overrides();
            if let Some(l) = limit {
                extra.push(format!("eval.val_limit={l}"));
            }
            let cfg = resolve_config(&cli, &extra)?;
            let bundle = checkpoint::load_model(&resolve(&cli.workdir, ckpt))?;
            let corpus = dataset::load(&resolve(&cli.workdir, data))?;
            let out = resolve(&cli.workdir, out);
            std::fs::create_dir_all(&out)?;

            let sampler_cfg = cfg
                .sampler
                .to_config(&bundle.schedule, rng::derive_seed(cfg.seed, "eval", 0))?;
            let report = evalkit::evaluate(
                &corpus.val,
                &bundle,
                &sampler_cfg,
                &cfg.pipeline.proposal(),
                &cfg.pipeline.aggregation(),
                rng::derive_seed(cfg.seed, "eval-protocol", 0),
                cfg.eval.val_limit,
            )?;

            let mut wtr = csv::Writer::from_path(out.join("per_class.csv"))?;
            wtr.write_record(["class", "iou", "dice", "precision", "recall", "f1"])?;
            for (name, s) in &report.per_class {
                wtr.write_record([
                    name.clone(),
                    format!("{}", s.iou),
                    format!("{}", s.dice),
                    format!("{}", s.precision),
                    format!("{}", s.recall),
                    format!("{}", s.f1),
                ])?;
            }
            wtr.flush()?;
            write_snapshot(&out, &cfg)?;
            let summary = serde_json::json!({
                "miou": report.miou,
                "mean_dice": report.mean_dice,
                "n_images": report.n_images,
                "config_hash": cfg.hash(),
                "per_class": report.per_class,
            });
            std::fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&summary)?)?;
            println!(
                "{}",
                serde_json::json!({
                    "miou": report.miou,
                    "mean_dice": report.mean_dice,
                    "n_images": report.n_images,
                    "config_hash": cfg.hash(),
                })
            );
            Ok(())
        }
        Cmd::Ablate { kind, ckpts, data, limit, sampler, out } => {
            let mut extra = sampler.as_overrides();
            if let Some(l) = limit {
                extra.push(format!("eval.val_limit={l}"));
            }
            let cfg = resolve_config(&cli, &extra)?;
            let kind: AblationKind = kind.parse()?;
            let corpus = dataset::load(&resolve(&cli.workdir, data))?;
            let out = resolve(&cli.workdir, out);

            let mut bundles: BTreeMap<String, Bundle> = BTreeMap::new();
            for entry in ckpts {
                let (key, path) = match entry.split_once('=') {
                    Some((k, p)) => (k.to_string(), PathBuf::from(p)),
                    None => ("model".to_string(), PathBuf::from(entry)),
                };
                bundles.insert(key, checkpoint::load_model(&resolve(&cli.workdir, &path))?);
            }
            let result = evalkit::ablation::run_ablation(kind, &bundles, &corpus.val, &cfg, &out)?;
            println!(
                "{}",
                serde_json::json!({
                    "kind": kind.name(),
                    "csv": result.csv_path.display().to_string(),
                    "plot": result.plot_path.display().to_string(),
                    "summary": result.summary_path.display().to_string(),
                    "rows": result.rows.len(),
                })
            );
            Ok(())
        }
    }
}
