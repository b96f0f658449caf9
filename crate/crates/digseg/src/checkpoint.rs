//! Self-describing checkpoint container: a JSON metadata header (resolved
//! run config, palette, vocabulary, codec constants, config hash) followed
//! by named f64 parameter arrays.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::codec::{CodecMeta, LatentCodec, Palette, ToyAutoencoder};
use crate::conditioning::Vocabulary;
use crate::config::RunConfig;
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::nn::{Elem, Params};
use crate::schedule::{build_schedule, NoiseSchedule};

const MAGIC: &[u8; 8] = b"DGSGCKP1";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    /// "codec" for a pretrained-codec-only file, "model" for a full model.
    pub kind: String,
    /// Training step the parameters were captured at.
    pub step: usize,
    pub config_hash: String,
    pub run_config: RunConfig,
    pub palette: Palette,
    pub vocab: Vocabulary,
    pub codec: CodecMeta,
}

/// Everything needed to run inference, reconstructed from a checkpoint.
pub struct Bundle {
    pub meta: CheckpointMeta,
    pub schedule: NoiseSchedule,
    pub codec: LatentCodec,
    pub denoiser: Denoiser<f32>,
}

pub fn export_prefixed<F: Elem, M: Params<F>>(
    model: &M,
    prefix: &str,
) -> BTreeMap<String, ArrayD<f64>> {
    let mut out = BTreeMap::new();
    model.visit(prefix, &mut |name, v| {
        out.insert(name.to_string(), v.mapv(Elem::into_f64));
    });
    out
}

fn strip_prefix(
    params: &BTreeMap<String, ArrayD<f64>>,
    prefix: &str,
) -> BTreeMap<String, ArrayD<f64>> {
    let dot = format!("{prefix}.");
    params
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(&dot).map(|rest| (rest.to_string(), v.clone())))
        .collect()
}

fn write_params(w: &mut impl Write, params: &BTreeMap<String, ArrayD<f64>>) -> Result<()> {
    w.write_u64::<LittleEndian>(params.len() as u64)?;
    for (name, arr) in params {
        let bytes = name.as_bytes();
        w.write_u16::<LittleEndian>(bytes.len() as u16)?;
        w.write_all(bytes)?;
        w.write_u8(arr.ndim() as u8)?;
        for d in arr.shape() {
            w.write_u64::<LittleEndian>(*d as u64)?;
        }
        let contiguous = arr.as_standard_layout();
        for v in contiguous.iter() {
            w.write_f64::<LittleEndian>(*v)?;
        }
    }
    Ok(())
}

fn read_params(r: &mut impl Read) -> Result<BTreeMap<String, ArrayD<f64>>> {
    let count = r.read_u64::<LittleEndian>()?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.read_u16::<LittleEndian>()? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| Error::Checkpoint(format!("bad parameter name: {e}")))?;
        let ndim = r.read_u8()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.read_u64::<LittleEndian>()? as usize);
        }
        let len: usize = dims.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(r.read_f64::<LittleEndian>()?);
        }
        let arr = ArrayD::from_shape_vec(dims, data)
            .map_err(|e| Error::Checkpoint(format!("bad parameter shape for {name}: {e}")))?;
        out.insert(name, arr);
    }
    Ok(out)
}

pub fn save(
    path: &Path,
    meta: &CheckpointMeta,
    params: &BTreeMap<String, ArrayD<f64>>,
) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    let meta_json = serde_json::to_vec(meta)?;
    w.write_u64::<LittleEndian>(meta_json.len() as u64)?;
    w.write_all(&meta_json)?;
    write_params(&mut w, params)?;
    w.flush()?;
    Ok(())
}

pub fn load_raw(path: &Path) -> Result<(CheckpointMeta, BTreeMap<String, ArrayD<f64>>)> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path).map_err(|e| {
        Error::Checkpoint(format!("cannot open checkpoint {}: {e}", path.display()))
    })?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let meta_len = r.read_u64::<LittleEndian>()? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    r.read_exact(&mut meta_bytes)?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_bytes)?;
    let params = read_params(&mut r)?;
    Ok((meta, params))
}

/// Reconstruct the codec from metadata plus its parameter section.
pub fn codec_from_parts(
    meta: &CodecMeta,
    params: &BTreeMap<String, ArrayD<f64>>,
) -> Result<LatentCodec> {
    match meta.mode.as_str() {
        "identity" => Ok(LatentCodec::Identity),
        "toy_autoencoder" => {
            let mut rng = crate::rng::stream(0, "codec-from-ckpt", 0);
            let mut ae: ToyAutoencoder<f32> = ToyAutoencoder::new(&mut rng);
            ae.import(&strip_prefix(params, "codec"))?;
            ae.latent_mean = meta.latent_mean;
            ae.latent_std = meta.latent_std;
            Ok(LatentCodec::Toy(ae))
        }
        other => Err(Error::Checkpoint(format!("unknown codec mode `{other}`"))),
    }
}

/// Save a pretrained codec on its own (the `pretrain-codec` product).
pub fn save_codec(
    path: &Path,
    run_config: &RunConfig,
    palette: &Palette,
    vocab: &Vocabulary,
    codec: &LatentCodec,
) -> Result<()> {
    let mut params = BTreeMap::new();
    if let LatentCodec::Toy(ae) = codec {
        params.extend(export_prefixed(ae, "codec"));
    }
    let meta = CheckpointMeta {
        kind: "codec".into(),
        step: 0,
        config_hash: run_config.hash(),
        run_config: run_config.clone(),
        palette: palette.clone(),
        vocab: vocab.clone(),
        codec: codec.meta(),
    };
    save(path, &meta, &params)
}

pub fn load_codec(path: &Path) -> Result<(CheckpointMeta, LatentCodec)> {
    let (meta, params) = load_raw(path)?;
    let codec = codec_from_parts(&meta.codec, &params)?;
    Ok((meta, codec))
}

/// Save a full model checkpoint (codec + denoiser).
pub fn save_model(
    path: &Path,
    run_config: &RunConfig,
    palette: &Palette,
    vocab: &Vocabulary,
    codec: &LatentCodec,
    denoiser: &Denoiser<f32>,
    step: usize,
) -> Result<()> {
    let mut params = BTreeMap::new();
    if let LatentCodec::Toy(ae) = codec {
        params.extend(export_prefixed(ae, "codec"));
    }
    params.extend(export_prefixed(&denoiser.unet, "denoiser"));
    let meta = CheckpointMeta {
        kind: "model".into(),
        step,
        config_hash: run_config.hash(),
        run_config: run_config.clone(),
        palette: palette.clone(),
        vocab: vocab.clone(),
        codec: codec.meta(),
    };
    save(path, &meta, &params)
}

pub fn load_model(path: &Path) -> Result<Bundle> {
    let (meta, params) = load_raw(path)?;
    if meta.kind != "model" {
        return Err(Error::Checkpoint(format!(
            "{} is a `{}` checkpoint, expected a full model",
            path.display(),
            meta.kind
        )));
    }
    let schedule = build_schedule(
        meta.run_config.schedule.t,
        meta.run_config.schedule.beta_start,
        meta.run_config.schedule.beta_end,
    )?;
    let codec = codec_from_parts(&meta.codec, &params)?;
    let mut rng = crate::rng::stream(0, "model-from-ckpt", 0);
    let mut denoiser: Denoiser<f32> = Denoiser::new(
        &mut rng,
        meta.run_config.denoiser.model_config(),
        codec.latent_channels(),
        schedule.t_max(),
    )?;
    denoiser.unet.import(&strip_prefix(&params, "denoiser"))?;
    Ok(Bundle { meta, schedule, codec, denoiser })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset;

    #[test]
    fn model_checkpoint_roundtrips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        dataset::generate(10, 2, dir.path()).unwrap();
        let corpus = dataset::load(dir.path()).unwrap();
        let run_config = RunConfig {
            denoiser: crate::config::DenoiserSection {
                base_width: 8,
                depth: 1,
                d_text: 64,
                t_embed_dim: 16,
                attn_scales: vec![1, 2],
                ..Default::default()
            },
            schedule: crate::config::ScheduleSection { t: 50, ..Default::default() },
            ..Default::default()
        };
        let schedule = build_schedule(50, 1e-4, 0.02).unwrap();
        let mut rng = crate::rng::stream(9, "init", 0);
        let codec = LatentCodec::Toy(ToyAutoencoder::new(&mut rng));
        let denoiser: Denoiser<f32> =
            Denoiser::new(&mut rng, run_config.denoiser.model_config(), 4, 50).unwrap();

        let path = dir.path().join("ck.bin");
        save_model(&path, &run_config, &corpus.palette, &corpus.vocab, &codec, &denoiser, 123)
            .unwrap();
        let bundle = load_model(&path).unwrap();
        assert_eq!(bundle.meta.step, 123);
        assert_eq!(bundle.meta.config_hash, run_config.hash());
        assert_eq!(bundle.meta.palette, corpus.palette);
        assert_eq!(bundle.denoiser.unet.export(), denoiser.unet.export());
        match (&bundle.codec, &codec) {
            (LatentCodec::Toy(a), LatentCodec::Toy(b)) => {
                assert_eq!(a.export(), b.export());
                assert_eq!(a.latent_mean, b.latent_mean);
            }
            _ => panic!("codec mode changed through the roundtrip"),
        }
    }

    #[test]
    fn codec_checkpoint_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        dataset::generate(10, 2, dir.path()).unwrap();
        let corpus = dataset::load(dir.path()).unwrap();
        let run_config = RunConfig::default();
        let mut rng = crate::rng::stream(3, "init", 0);
        let mut ae = ToyAutoencoder::<f32>::new(&mut rng);
        ae.latent_mean = 0.25;
        ae.latent_std = 1.75;
        let codec = LatentCodec::Toy(ae);
        let path = dir.path().join("codec.bin");
        save_codec(&path, &run_config, &corpus.palette, &corpus.vocab, &codec).unwrap();
        let (meta, loaded) = load_codec(&path).unwrap();
        assert_eq!(meta.kind, "codec");
        match (&loaded, &codec) {
            (LatentCodec::Toy(a), LatentCodec::Toy(b)) => {
                assert_eq!(a.latent_mean, b.latent_mean);
                assert_eq!(a.latent_std, b.latent_std);
                assert_eq!(a.export(), b.export());
            }
            _ => panic!("mode mismatch"),
        }
    }

    #[test]
    fn truncated_files_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"DGSGCKP1xx").unwrap();
        assert!(load_raw(&path).is_err());
        std::fs::write(&path, b"NOTMAGIC").unwrap();
        let err = load_raw(&path).unwrap_err().to_string();
        assert!(err.contains("magic") || err.contains("i/o"), "{err}");
    }
}
