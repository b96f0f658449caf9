//! Text pathway: vocabulary, deterministic text embeddings, and candidate
//! class proposal with global thresholding plus patch-level refinement.
//!
//! Embeddings stand in for a frozen vision-language encoder: each class name
//! is templated into a prompt, hashed to a stable 64-bit seed, and expanded
//! into a unit-norm Gaussian vector. The paired image embedder mirrors that
//! geometry — the normalized mean of the embeddings of classes actually
//! present plus a small Gaussian perturbation — so the whole proposal
//! protocol (cosine thresholds, patch maxima) runs deterministically without
//! any pretrained weights. Open-vocabulary semantics are out of scope; what
//! this pathway provides is query binding.

use std::collections::BTreeSet;

use ndarray::Array1;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::codec::{LabelMap, Palette};
use crate::error::{Error, Result};
use crate::rng;

/// Default embedding dimension.
pub const EMBED_DIM: usize = 64;

/// Scale of the perturbation added by the stand-in image embedder. The
/// perturbation vector's expected norm is 0.3 (per-component std 0.3/sqrt(d)),
/// which keeps present-class cosines well above the proposal thresholds.
pub const IMAGE_EMBED_NOISE: f64 = 0.3;

const TEXT_STREAM: u64 = 0x7465_7874; // "text"

/// Unit-norm embedding vector.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub vector: Array1<f64>,
}

impl TextEmbedding {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn cosine(&self, other: &TextEmbedding) -> f64 {
        self.vector.dot(&other.vector)
    }
}

fn normalize(mut v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    if n > 0.0 {
        v /= n;
    }
    v
}

/// Deterministic unit-norm Gaussian vector for a prompt string.
fn embed_prompt(prompt: &str, dim: usize) -> TextEmbedding {
    let mut rng = rng::stream(TEXT_STREAM, prompt, 0);
    let mut v = Array1::zeros(dim);
    for x in v.iter_mut() {
        *x = rng.sample::<f64, _>(StandardNormal);
    }
    TextEmbedding { vector: normalize(v) }
}

/// Class-name list with its prompt template and embedding dimension.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Vocabulary {
    pub classes: Vec<String>,
    pub prompt_template: String,
    pub embed_dim: usize,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self {
            classes: Vec::new(),
            prompt_template: "A photo of a {class}".into(),
            embed_dim: EMBED_DIM,
        }
    }
}

impl Vocabulary {
    pub fn new(classes: Vec<String>) -> Self {
        Self { classes, ..Self::default() }
    }

    pub fn prompt_for(&self, name: &str) -> String {
        self.prompt_template.replace("{class}", name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.classes.iter().any(|c| c == name)
    }

    pub fn from_json(s: &str) -> Result<Vocabulary> {
        // Accept either the full document or a bare list of names.
        if let Ok(v) = serde_json::from_str::<Vocabulary>(s) {
            return Ok(v);
        }
        let names: Vec<String> = serde_json::from_str(s)?;
        Ok(Vocabulary::new(names))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Embed a class name through the vocabulary's prompt template.
pub fn embed_class(name: &str, vocab: &Vocabulary) -> Result<TextEmbedding> {
    if name.is_empty() {
        return Err(Error::Vocabulary("empty class name".into()));
    }
    Ok(embed_prompt(&vocab.prompt_for(name), vocab.embed_dim))
}

/// Thresholds for candidate-class proposal.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct ProposalConfig {
    pub tau_sim: f64,
    pub tau_patch: f64,
    pub patch_grid: usize,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self { tau_sim: 0.25, tau_patch: 0.35, patch_grid: 4 }
    }
}

impl ProposalConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("tau_sim", self.tau_sim), ("tau_patch", self.tau_patch)] {
            if !(-1.0 < v && v < 1.0) {
                return Err(Error::config(format!("{name} must lie in (-1, 1), got {v}")));
            }
        }
        if self.patch_grid == 0 {
            return Err(Error::config("patch_grid must be >= 1"));
        }
        Ok(())
    }
}

/// Candidate classes: global cosine above `tau_sim`, or any patch cosine
/// above `tau_patch`.
pub fn propose_classes(
    image_embedding: &TextEmbedding,
    patch_embeddings: &[TextEmbedding],
    vocab: &Vocabulary,
    cfg: &ProposalConfig,
) -> Result<BTreeSet<String>> {
    cfg.validate()?;
    if vocab.classes.is_empty() {
        return Err(Error::config("proposal over an empty vocabulary"));
    }
    let mut out = BTreeSet::new();
    for name in &vocab.classes {
        let t_c = embed_class(name, vocab)?;
        let global = image_embedding.cosine(&t_c);
        let patch_max = patch_embeddings
            .iter()
            .map(|p| p.cosine(&t_c))
            .fold(f64::NEG_INFINITY, f64::max);
        if global > cfg.tau_sim || patch_max > cfg.tau_patch {
            out.insert(name.clone());
        }
    }
    Ok(out)
}

/// Noisy normalized mean of the given class embeddings. An empty class set
/// yields a pure-noise unit vector.
fn noisy_mean(class_names: &[&str], vocab: &Vocabulary, seed: u64, index: u64) -> Result<TextEmbedding> {
    let d = vocab.embed_dim;
    let mut mean = Array1::<f64>::zeros(d);
    for name in class_names {
        mean = mean + embed_class(name, vocab)?.vector;
    }
    if !class_names.is_empty() {
        mean = normalize(mean);
    }
    let mut rng = rng::stream(seed, "image-embed", index);
    let comp_std = IMAGE_EMBED_NOISE / (d as f64).sqrt();
    for x in mean.iter_mut() {
        *x += rng.sample::<f64, _>(StandardNormal) * comp_std;
    }
    Ok(TextEmbedding { vector: normalize(mean) })
}

/// Stand-in image embedder: derives the global and per-patch embeddings
/// from the ground-truth label map of a scene.
pub fn embed_image(
    map: &LabelMap,
    palette: &Palette,
    vocab: &Vocabulary,
    cfg: &ProposalConfig,
    seed: u64,
) -> Result<(TextEmbedding, Vec<TextEmbedding>)> {
    cfg.validate()?;
    let names_of = |ids: &[u8]| -> Result<Vec<&str>> {
        ids.iter()
            .filter(|&&id| id != palette.background_id)
            .map(|&id| {
                palette
                    .entry(id)
                    .map(|e| e.name.as_str())
                    .ok_or_else(|| Error::Codec(format!("label id {id} not in palette")))
            })
            .collect()
    };

    let global_names = names_of(&map.present_ids())?;
    let global = noisy_mean(&global_names, vocab, seed, 0)?;

    let g = cfg.patch_grid;
    let (h, w) = (map.height(), map.width());
    let mut patches = Vec::with_capacity(g * g);
    for py in 0..g {
        for px in 0..g {
            let y0 = py * h / g;
            let y1 = ((py + 1) * h / g).max(y0 + 1).min(h);
            let x0 = px * w / g;
            let x1 = ((px + 1) * w / g).max(x0 + 1).min(w);
            let mut ids = BTreeSet::new();
            for y in y0..y1 {
                for x in x0..x1 {
                    ids.insert(map.labels[[y, x]]);
                }
            }
            let ids: Vec<u8> = ids.into_iter().collect();
            let names = names_of(&ids)?;
            patches.push(noisy_mean(&names, vocab, seed, 1 + (py * g + px) as u64)?);
        }
    }
    Ok((global, patches))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::new(vec!["cat".into(), "dog".into(), "bird".into()])
    }

    #[test]
    fn embeddings_are_deterministic_and_unit_norm() {
        let v = vocab();
        let a = embed_class("cat", &v).unwrap();
        let b = embed_class("cat", &v).unwrap();
        assert_eq!(a, b);
        for name in ["cat", "dog", "bird", "zebra", "a very long class name"] {
            let e = embed_class(name, &v).unwrap();
            assert!((e.vector.dot(&e.vector).sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn embeddings_depend_on_template() {
        let mut v1 = vocab();
        let mut v2 = vocab();
        v1.prompt_template = "A photo of a {class}".into();
        v2.prompt_template = "An image of a {class}".into();
        assert_ne!(embed_class("cat", &v1).unwrap(), embed_class("cat", &v2).unwrap());
    }

    #[test]
    fn distinct_class_cosines_stay_moderate() {
        // Monte Carlo bound: random unit vectors at d=64 have cosine std 1/8,
        // so |cos| < 0.5 is a 4-sigma event per pair.
        let v = vocab();
        let names: Vec<String> = (0..100).map(|i| format!("class-{i}")).collect();
        let embs: Vec<TextEmbedding> =
            names.iter().map(|n| embed_class(n, &v).unwrap()).collect();
        for i in 0..embs.len() {
            for j in (i + 1)..embs.len() {
                let c = embs[i].cosine(&embs[j]);
                assert!(c.abs() < 0.5, "cos({}, {}) = {c}", names[i], names[j]);
            }
        }
    }

    #[test]
    fn exact_match_is_proposed() {
        let v = vocab();
        let cfg = ProposalConfig::default();
        let t_cat = embed_class("cat", &v).unwrap();
        let got = propose_classes(&t_cat, &[], &v, &cfg).unwrap();
        assert!(got.contains("cat"));
    }

    #[test]
    fn below_both_thresholds_is_empty() {
        let v = vocab();
        let cfg = ProposalConfig::default();
        // Orthogonal-ish vector: negate a real embedding of a foreign name.
        let foreign = embed_class("submarine", &v).unwrap();
        let sims: Vec<f64> = v
            .classes
            .iter()
            .map(|n| foreign.cosine(&embed_class(n, &v).unwrap()))
            .collect();
        assert!(sims.iter().all(|s| s.abs() < 0.25), "{sims:?}");
        let got = propose_classes(&foreign, &[], &v, &cfg).unwrap();
        assert!(got.is_empty());
    }

    #[test]
    fn patch_refinement_rescues_weak_global() {
        let v = vocab();
        let cfg = ProposalConfig::default();
        let t_cat = embed_class("cat", &v).unwrap();
        let t_dog = embed_class("dog", &v).unwrap();
        // Global: 0.2 toward cat (below tau_sim). One patch: 0.4 (above tau_patch).
        let mk_mix = |target: f64, t: &TextEmbedding, other: &TextEmbedding| {
            // v = a*t + b*orthogonal, cos(v, t) = target exactly after norm.
            let orth = normalize(other.vector.clone() - t.vector.clone() * t.cosine(other));
            TextEmbedding {
                vector: t.vector.clone() * target + orth * (1.0 - target * target).sqrt(),
            }
        };
        let global = mk_mix(0.2, &t_cat, &t_dog);
        assert!((global.cosine(&t_cat) - 0.2).abs() < 1e-9);
        let patch = mk_mix(0.4, &t_cat, &t_dog);
        let got = propose_classes(&global, &[patch], &v, &cfg).unwrap();
        assert!(got.contains("cat"));
    }

    #[test]
    fn lowering_thresholds_never_shrinks_proposals() {
        let v = vocab();
        let mut r = rng::stream(77, "prop-test", 0);
        for trial in 0..200 {
            let mut raw = Array1::zeros(v.embed_dim);
            for x in raw.iter_mut() {
                *x = r.sample::<f64, _>(StandardNormal);
            }
            let img = TextEmbedding { vector: normalize(raw) };
            let patches: Vec<TextEmbedding> = (0..3)
                .map(|k| {
                    let mut p = Array1::zeros(v.embed_dim);
                    let mut pr = rng::stream(78, "prop-test-patch", trial * 10 + k);
                    for x in p.iter_mut() {
                        *x = pr.sample::<f64, _>(StandardNormal);
                    }
                    TextEmbedding { vector: normalize(p) }
                })
                .collect();
            let hi = ProposalConfig { tau_sim: 0.2, tau_patch: 0.3, patch_grid: 4 };
            let lo = ProposalConfig { tau_sim: 0.05, tau_patch: 0.1, patch_grid: 4 };
            let a = propose_classes(&img, &patches, &v, &hi).unwrap();
            let b = propose_classes(&img, &patches, &v, &lo).unwrap();
            assert!(a.is_subset(&b));
            // Refinement is a superset operator: with patches vs without.
            let without = propose_classes(&img, &[], &v, &hi).unwrap();
            assert!(without.is_subset(&a));
        }
    }

    #[test]
    fn empty_vocabulary_is_a_configuration_error() {
        let v = Vocabulary::new(vec![]);
        let e = embed_class("cat", &v).unwrap();
        assert!(propose_classes(&e, &[], &v, &ProposalConfig::default()).is_err());
    }

    #[test]
    fn vocab_json_accepts_bare_name_lists() {
        let v = Vocabulary::from_json(r#"["circle", "square"]"#).unwrap();
        assert_eq!(v.classes.len(), 2);
        assert_eq!(v.prompt_template, "A photo of a {class}");
        let roundtrip = Vocabulary::from_json(&v.to_json().unwrap()).unwrap();
        assert_eq!(v, roundtrip);
    }
}
