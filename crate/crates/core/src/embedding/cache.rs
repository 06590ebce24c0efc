//! On-disk per-phrase embedding cache.
//!
//! One file per key: a little-endian `u32` dimension header followed by
//! `dim` little-endian `f32` values. Keys are SHA-256 content hashes of
//! `(provider kind, model id, text)`. Writes go through a temporary file and a
//! rename, so concurrent writers of the same key leave one complete file.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use sha2::{Digest, Sha256};

use super::{EmbeddingProvider, EmbeddingVector, ProviderDescriptor};
use crate::error::{Error, Result};
use crate::image::Image;

pub fn cache_key(desc: &ProviderDescriptor, text: &str) -> String {
    let mut h = Sha256::new();
    for part in [desc.kind.as_str(), desc.model_id.as_str(), text] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    hex::encode(h.finalize())
}

pub fn write_cache_file(path: &Path, v: &EmbeddingVector) -> Result<()> {
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let mut bytes = Vec::with_capacity(4 + 4 * v.dim());
    bytes.extend((v.dim() as u32).to_le_bytes());
    for x in &v.values {
        bytes.extend(x.to_le_bytes());
    }
    let tmp = path.with_extension(format!("tmp{}-{}", std::process::id(), COUNTER.fetch_add(1, Ordering::Relaxed)));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_cache_file(path: &Path) -> Result<EmbeddingVector> {
    let bytes = fs::read(path)?;
    let corrupt = || Error::Parse { path: path.to_path_buf(), message: "truncated embedding cache file".into() };
    let header: [u8; 4] = bytes.get(..4).ok_or_else(corrupt)?.try_into().unwrap();
    let dim = u32::from_le_bytes(header) as usize;
    let body = &bytes[4..];
    if body.len() != dim * 4 {
        return Err(corrupt());
    }
    let values = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    EmbeddingVector::new(values)
}

pub struct CachedProvider {
    inner: Box<dyn EmbeddingProvider>,
    dir: PathBuf,
}

impl CachedProvider {
    pub fn new(inner: Box<dyn EmbeddingProvider>, dir: PathBuf) -> Result<Self> {
        fs::create_dir_all(&dir)?;
        Ok(Self { inner, dir })
    }

    fn path_for(&self, text: &str) -> PathBuf {
        self.dir.join(format!("{}.bin", cache_key(self.inner.descriptor(), text)))
    }
}

impl EmbeddingProvider for CachedProvider {
    fn descriptor(&self) -> &ProviderDescriptor {
        self.inner.descriptor()
    }

    fn encode_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        let dim = self.dim();
        let mut out: Vec<Option<EmbeddingVector>> = Vec::with_capacity(texts.len());
        let mut misses = Vec::new();
        for (i, t) in texts.iter().enumerate() {
            let p = self.path_for(t);
            if p.exists() {
                let v = read_cache_file(&p)?;
                if v.dim() != dim {
                    return Err(Error::DimMismatch { expected: dim, actual: v.dim() });
                }
                out.push(Some(v));
            } else {
                out.push(None);
                misses.push(i);
            }
        }
        if !misses.is_empty() {
            let batch: Vec<String> = misses.iter().map(|&i| texts[i].clone()).collect();
            let fresh = self.inner.encode_texts(&batch)?;
            for (&i, v) in misses.iter().zip(fresh) {
                write_cache_file(&self.path_for(&texts[i]), &v)?;
                out[i] = Some(v);
            }
        }
        Ok(out.into_iter().map(|v| v.expect("filled")).collect())
    }

    fn supports_images(&self) -> bool {
        self.inner.supports_images()
    }

    fn embed_images(&self, images: &[Image]) -> Result<Vec<EmbeddingVector>> {
        self.inner.embed_images(images)
    }
}
