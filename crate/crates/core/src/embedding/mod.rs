//! Text and image embeddings in a shared vision-language latent space.
//!
//! Every provider emits unit-norm vectors of one fixed dimension. Concrete
//! providers:
//!
//! - [`SyntheticProvider`]: deterministic seeded vectors, optionally with a
//!   planted geometry that pulls chosen phrases toward named concept directions.
//! - [`RemoteProvider`]: a VLM hosted out of process behind a small HTTP JSON
//!   protocol.
//! - [`LocalStoreProvider`]: vectors precomputed offline from local VLM weights.
//!
//! [`CachedProvider`] wraps any of them with a per-phrase on-disk cache.

mod cache;
mod local;
mod remote;
mod synthetic;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use cache::{cache_key, read_cache_file, write_cache_file, CachedProvider};
pub use local::{image_key, EmbeddingStore, LocalStoreProvider};
pub use remote::{encode_png_base64, EmbedResponse, ImageRequest, RemoteProvider, TextRequest};
pub use synthetic::{PlantedAnchor, PlantedGeometry, SyntheticProvider};

use crate::attribute_bank::AttributeBank;
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    pub values: Vec<f32>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::validation("embedding vector must have positive dimension"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding vector entry".into()));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt()
    }

    /// Scales to unit L2 norm. Fails on the zero vector.
    pub fn normalized(mut self) -> Result<Self> {
        let n = self.norm();
        if n == 0.0 {
            return Err(Error::validation("cannot normalize a zero vector"));
        }
        for v in &mut self.values {
            *v = (*v as f64 / n) as f32;
        }
        Ok(self)
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|v| *v as f64).collect()
    }
}

/// Cosine similarity of two slices; fails on zero vectors or length mismatch.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimMismatch { expected: u.len(), actual: v.len() });
    }
    let (mut dot, mut nu, mut nv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::validation("cosine similarity of a zero vector"));
    }
    Ok((dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0))
}

pub fn cosine_similarity(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64> {
    cosine(&u.to_f64(), &v.to_f64())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    VlmLocal,
    VlmRemote,
    Synthetic,
}

impl ProviderKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ProviderKind::VlmLocal => "vlm-local",
            ProviderKind::VlmRemote => "vlm-remote",
            ProviderKind::Synthetic => "synthetic",
        }
    }
}

pub const DEFAULT_MODEL_ID: &str = "openai/clip-vit-base-patch32";

fn default_model_id() -> String {
    DEFAULT_MODEL_ID.to_string()
}

fn default_dim() -> usize {
    512
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderDescriptor {
    pub kind: ProviderKind,
    #[serde(default = "default_model_id")]
    pub model_id: String,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    /// Precomputed embedding store (`vlm-local` only).
    #[serde(default)]
    pub store_path: Option<PathBuf>,
    /// Optional wrapper applied to each phrase before encoding, e.g.
    /// `"a photo of {text}"`. Raw phrases are encoded when absent.
    #[serde(default)]
    pub text_template: Option<String>,
    /// Named planted-geometry preset for the synthetic provider.
    #[serde(default)]
    pub planted: Option<String>,
}

impl ProviderDescriptor {
    pub fn synthetic(dim: usize, seed: u64) -> Self {
        Self {
            kind: ProviderKind::Synthetic,
            model_id: "synthetic".into(),
            dim,
            endpoint: None,
            cache_dir: None,
            seed,
            store_path: None,
            text_template: None,
            planted: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::validation("provider dim must be positive"));
        }
        if self.kind == ProviderKind::VlmRemote && self.endpoint.is_none() {
            return Err(Error::validation("vlm-remote provider needs an endpoint"));
        }
        if self.kind == ProviderKind::VlmLocal && self.store_path.is_none() {
            return Err(Error::validation("vlm-local provider needs a store_path"));
        }
        if let Some(t) = &self.text_template {
            if !t.contains("{text}") {
                return Err(Error::validation("text_template must contain {text}"));
            }
        }
        Ok(())
    }

    pub fn wrap_text(&self, phrase: &str) -> String {
        match &self.text_template {
            Some(t) => t.replacen("{text}", phrase, 1),
            None => phrase.to_string(),
        }
    }
}

pub trait EmbeddingProvider: Send + Sync {
    fn descriptor(&self) -> &ProviderDescriptor;

    fn dim(&self) -> usize {
        self.descriptor().dim
    }

    /// One unit vector per input text, in order. Texts are encoded as given;
    /// use [`embed_texts`] to apply the descriptor's text template.
    fn encode_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>>;

    fn supports_images(&self) -> bool {
        false
    }

    fn embed_images(&self, _images: &[Image]) -> Result<Vec<EmbeddingVector>> {
        Err(Error::Provider(format!("provider '{}' has no image tower", self.descriptor().kind.as_str())))
    }
}

/// Embeds phrases after applying the provider's text template.
pub fn embed_texts(provider: &dyn EmbeddingProvider, phrases: &[String]) -> Result<Vec<EmbeddingVector>> {
    if phrases.is_empty() {
        return Err(Error::validation("no phrases to embed"));
    }
    let desc = provider.descriptor();
    let texts: Vec<String> = phrases.iter().map(|p| desc.wrap_text(p)).collect();
    let out = provider.encode_texts(&texts)?;
    if out.len() != texts.len() {
        return Err(Error::Provider(format!("provider returned {} vectors for {} texts", out.len(), texts.len())));
    }
    for v in &out {
        if v.dim() != provider.dim() {
            return Err(Error::DimMismatch { expected: provider.dim(), actual: v.dim() });
        }
    }
    Ok(out)
}

/// Attribute text embeddings, one `K_c x d` block per class in bank order.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeEmbeddingTable {
    pub classes: Vec<String>,
    pub rows: Vec<Vec<EmbeddingVector>>,
    pub dim: usize,
}

impl AttributeEmbeddingTable {
    pub fn num_classes(&self) -> usize {
        self.rows.len()
    }

    pub fn class_sizes(&self) -> Vec<usize> {
        self.rows.iter().map(Vec::len).collect()
    }

    /// Builds a table directly from vectors (normalizing each row).
    pub fn from_vectors(classes: Vec<String>, rows: Vec<Vec<Vec<f32>>>) -> Result<Self> {
        if classes.len() != rows.len() || rows.is_empty() {
            return Err(Error::Shape("class names and row blocks disagree".into()));
        }
        let dim = rows
            .first()
            .and_then(|r| r.first())
            .map(Vec::len)
            .ok_or_else(|| Error::Shape("empty attribute block".into()))?;
        let mut out = Vec::with_capacity(rows.len());
        for block in rows {
            if block.is_empty() {
                return Err(Error::Shape("empty attribute block".into()));
            }
            let mut b = Vec::with_capacity(block.len());
            for v in block {
                if v.len() != dim {
                    return Err(Error::DimMismatch { expected: dim, actual: v.len() });
                }
                b.push(EmbeddingVector::new(v)?.normalized()?);
            }
            out.push(b);
        }
        Ok(Self { classes, rows: out, dim })
    }
}

pub fn embed_bank(provider: &dyn EmbeddingProvider, bank: &AttributeBank) -> Result<AttributeEmbeddingTable> {
    let flat: Vec<String> = bank.all_attributes().iter().flatten().cloned().collect();
    let mut vectors = embed_texts(provider, &flat)?.into_iter();
    let rows = bank.all_attributes().iter().map(|phrases| vectors.by_ref().take(phrases.len()).collect()).collect();
    Ok(AttributeEmbeddingTable { classes: bank.classes().to_vec(), rows, dim: provider.dim() })
}

/// Builds the provider a descriptor asks for, wrapped in a disk cache when
/// `cache_dir` is set.
pub fn build_provider(desc: &ProviderDescriptor) -> Result<Box<dyn EmbeddingProvider>> {
    desc.validate()?;
    let inner: Box<dyn EmbeddingProvider> = match desc.kind {
        ProviderKind::Synthetic => {
            let planted = match &desc.planted {
                Some(name) => Some(
                    crate::scenario::planted_preset(name)
                        .ok_or_else(|| Error::validation(format!("unknown planted-geometry preset '{name}'")))?,
                ),
                None => None,
            };
            Box::new(SyntheticProvider::new(desc.clone(), planted))
        }
        ProviderKind::VlmRemote => Box::new(RemoteProvider::new(desc.clone())?),
        ProviderKind::VlmLocal => Box::new(LocalStoreProvider::open(desc.clone())?),
    };
    match &desc.cache_dir {
        Some(dir) => Ok(Box::new(CachedProvider::new(inner, dir.clone())?)),
        None => Ok(inner),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribute_bank::{corrupt_bank, BankMeta, CorruptionMode, CorruptionSpec};
    use proptest::prelude::*;

    #[test]
    fn cosine_special_cases() {
        let u = [1.0, 2.0, -0.5];
        let neg: Vec<f64> = u.iter().map(|v| -v).collect();
        assert!((cosine(&u, &u).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine(&u, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert!(cosine(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(cosine(&[1.0], &[1.0, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn cosine_symmetric_and_scale_invariant(
            u in prop::collection::vec(-5.0f64..5.0, 6),
            v in prop::collection::vec(-5.0f64..5.0, 6),
            a in 0.01f64..100.0,
            b in 0.01f64..100.0,
        ) {
            prop_assume!(u.iter().any(|x| x.abs() > 1e-3) && v.iter().any(|x| x.abs() > 1e-3));
            let c = cosine(&u, &v).unwrap();
            prop_assert!((c - cosine(&v, &u).unwrap()).abs() < 1e-12);
            let su: Vec<f64> = u.iter().map(|x| a * x).collect();
            let sv: Vec<f64> = v.iter().map(|x| b * x).collect();
            prop_assert!((c - cosine(&su, &sv).unwrap()).abs() < 1e-9);
            prop_assert!((-1.0..=1.0).contains(&c));
        }
    }

    fn small_bank() -> AttributeBank {
        AttributeBank::new(
            vec!["cat".into(), "dog".into()],
            vec![
                vec!["thin whiskers".into(), "pointy ears".into(), "slit pupils".into()],
                vec!["wagging tail".into(), "long snout".into(), "floppy ears".into()],
            ],
            BankMeta::default(),
        )
        .unwrap()
    }

    #[test]
    fn embed_bank_shapes_and_rows() {
        let p = SyntheticProvider::new(ProviderDescriptor::synthetic(8, 3), None);
        let b = small_bank();
        let t = embed_bank(&p, &b).unwrap();
        assert_eq!(t.class_sizes(), vec![3, 3]);
        assert!(t.rows.iter().flatten().all(|v| v.dim() == 8));
        for c in 0..2 {
            for (k, phrase) in b.attributes(c).iter().enumerate() {
                let solo = embed_texts(&p, std::slice::from_ref(phrase)).unwrap();
                assert_eq!(t.rows[c][k], solo[0]);
            }
        }
    }

    #[test]
    fn embed_after_insufficient_corruption_drops_rows() {
        let classes = vec!["a".to_string(), "b".to_string()];
        let attrs = classes.iter().map(|c| (0..10).map(|i| format!("{c}{i}")).collect()).collect();
        let b = AttributeBank::new(classes, attrs, BankMeta::default()).unwrap();
        let spec = CorruptionSpec { mode: CorruptionMode::Insufficient, count: 5, seed: 9 };
        let p = SyntheticProvider::new(ProviderDescriptor::synthetic(16, 0), None);
        let t = embed_bank(&p, &corrupt_bank(&b, &spec).unwrap()).unwrap();
        assert_eq!(t.class_sizes(), vec![5, 5]);
    }

    #[test]
    fn text_template_wraps_phrases() {
        let mut d = ProviderDescriptor::synthetic(8, 0);
        d.text_template = Some("a photo of {text}".into());
        let p = SyntheticProvider::new(d, None);
        let raw = SyntheticProvider::new(ProviderDescriptor::synthetic(8, 0), None);
        let wrapped = embed_texts(&p, &["dog".into()]).unwrap();
        let direct = raw.encode_texts(&["a photo of dog".into()]).unwrap();
        assert_eq!(wrapped, direct);
    }

    #[test]
    fn descriptor_validation() {
        let mut d = ProviderDescriptor::synthetic(0, 0);
        assert!(d.validate().is_err());
        d.dim = 4;
        d.kind = ProviderKind::VlmRemote;
        assert!(d.validate().is_err());
        d.endpoint = Some("http://127.0.0.1:1".into());
        assert!(d.validate().is_ok());
    }
}
