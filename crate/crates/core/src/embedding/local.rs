use std::collections::HashMap;
use std::fs;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EmbeddingProvider, EmbeddingVector, ProviderDescriptor};
use crate::error::{Error, Result};
use crate::image::Image;

/// Embeddings exported offline from a locally run VLM.
///
/// Store layout: `{"dim": d, "texts": {text: [..]}, "images": {key: [..]}}`
/// where image keys are [`image_key`] hashes of the 8-bit pixel buffer.
#[derive(Debug, Default, Serialize, Deserialize)]
pub struct EmbeddingStore {
    pub dim: usize,
    #[serde(default)]
    pub texts: HashMap<String, Vec<f32>>,
    #[serde(default)]
    pub images: HashMap<String, Vec<f32>>,
}

pub fn image_key(img: &Image) -> String {
    let mut h = Sha256::new();
    for n in [img.channels, img.height, img.width] {
        h.update((n as u64).to_le_bytes());
    }
    h.update(img.to_u8_bytes());
    hex::encode(h.finalize())
}

pub struct LocalStoreProvider {
    desc: ProviderDescriptor,
    store: EmbeddingStore,
}

impl LocalStoreProvider {
    pub fn open(desc: ProviderDescriptor) -> Result<Self> {
        let path = desc.store_path.clone().ok_or_else(|| Error::validation("vlm-local provider needs a store_path"))?;
        let text = fs::read_to_string(&path)?;
        let store: EmbeddingStore =
            serde_json::from_str(&text).map_err(|e| Error::Parse { path: path.clone(), message: e.to_string() })?;
        if store.dim != desc.dim {
            return Err(Error::DimMismatch { expected: desc.dim, actual: store.dim });
        }
        Ok(Self { desc, store })
    }

    fn fetch(&self, table: &HashMap<String, Vec<f32>>, key: &str, what: &str) -> Result<EmbeddingVector> {
        let v = table.get(key).ok_or_else(|| Error::Provider(format!("{what} '{key}' missing from local store")))?;
        if v.len() != self.desc.dim {
            return Err(Error::DimMismatch { expected: self.desc.dim, actual: v.len() });
        }
        EmbeddingVector::new(v.clone())?.normalized()
    }
}

impl EmbeddingProvider for LocalStoreProvider {
    fn descriptor(&self) -> &ProviderDescriptor {
        &self.desc
    }

    fn encode_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        texts.iter().map(|t| self.fetch(&self.store.texts, t, "text")).collect()
    }

    fn supports_images(&self) -> bool {
        !self.store.images.is_empty()
    }

    fn embed_images(&self, images: &[Image]) -> Result<Vec<EmbeddingVector>> {
        images.iter().map(|img| self.fetch(&self.store.images, &image_key(img), "image")).collect()
    }
}
