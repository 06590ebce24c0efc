use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EmbeddingProvider, EmbeddingVector, ProviderDescriptor};
use crate::error::Result;
use crate::image::Image;

/// Pulls one phrase toward the direction of a named concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedAnchor {
    pub phrase: String,
    pub concept: String,
    /// Cosine between the phrase embedding and the concept direction, in `[0, 1]`.
    pub strength: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PlantedGeometry {
    pub anchors: Vec<PlantedAnchor>,
}

impl PlantedGeometry {
    fn lookup(&self) -> HashMap<String, (String, f64)> {
        self.anchors.iter().map(|a| (a.phrase.clone(), (a.concept.clone(), a.strength.clamp(0.0, 1.0)))).collect()
    }
}

/// Seeded Gaussian embeddings. Each text maps to a normalized standard-normal
/// vector drawn from a generator keyed on `(seed, text)`; in high dimension
/// distinct texts are nearly orthogonal. Images go through a fixed seeded
/// random projection of their centered pixels.
pub struct SyntheticProvider {
    desc: ProviderDescriptor,
    planted: HashMap<String, (String, f64)>,
    projections: Mutex<HashMap<usize, Arc<Vec<f64>>>>,
}

impl SyntheticProvider {
    pub fn new(desc: ProviderDescriptor, planted: Option<PlantedGeometry>) -> Self {
        Self { desc, planted: planted.map(|p| p.lookup()).unwrap_or_default(), projections: Mutex::new(HashMap::new()) }
    }

    fn gaussian_unit(&self, tag: &str, key: &[u8]) -> Vec<f64> {
        let mut h = Sha256::new();
        h.update(self.desc.seed.to_le_bytes());
        h.update(tag.as_bytes());
        h.update([0u8]);
        h.update(key);
        let seed: [u8; 32] = h.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(seed);
        let v: Vec<f64> = (0..self.desc.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    /// Unit direction of a named concept.
    pub fn concept_direction(&self, concept: &str) -> Vec<f64> {
        self.gaussian_unit("concept", concept.as_bytes())
    }

    fn text_vector(&self, text: &str) -> Vec<f64> {
        let noise = self.gaussian_unit("text", text.as_bytes());
        match self.planted.get(text) {
            Some((concept, s)) => {
                let u = self.concept_direction(concept);
                let r = (1.0 - s * s).max(0.0).sqrt();
                u.iter().zip(&noise).map(|(a, b)| s * a + r * b).collect()
            }
            None => noise,
        }
    }

    fn projection(&self, input_len: usize) -> Arc<Vec<f64>> {
        let mut cache = self.projections.lock().expect("projection cache poisoned");
        cache
            .entry(input_len)
            .or_insert_with(|| {
                let mut m = Vec::with_capacity(input_len * self.desc.dim);
                for i in 0..input_len {
                    let key = [(input_len as u64).to_le_bytes(), (i as u64).to_le_bytes()].concat();
                    m.extend(self.gaussian_unit("pixel", &key));
                }
                Arc::new(m)
            })
            .clone()
    }
}

fn to_unit_f32(v: &[f64]) -> Result<EmbeddingVector> {
    EmbeddingVector::new(v.iter().map(|x| *x as f32).collect())?.normalized()
}

impl EmbeddingProvider for SyntheticProvider {
    fn descriptor(&self) -> &ProviderDescriptor {
        &self.desc
    }

    fn encode_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        texts.iter().map(|t| to_unit_f32(&self.text_vector(t))).collect()
    }

    fn supports_images(&self) -> bool {
        true
    }

    fn embed_images(&self, images: &[Image]) -> Result<Vec<EmbeddingVector>> {
        let d = self.desc.dim;
        images
            .iter()
            .map(|img| {
                let proj = self.projection(img.data.len());
                let mut z = vec![0.0; d];
                for (i, px) in img.data.iter().enumerate() {
                    let w = px - 0.5;
                    if w == 0.0 {
                        continue;
                    }
                    for (zj, pj) in z.iter_mut().zip(&proj[i * d..(i + 1) * d]) {
                        *zj += w * pj;
                    }
                }
                if z.iter().all(|v| *v == 0.0) {
                    z[0] = 1.0;
                }
                to_unit_f32(&z)
            })
            .collect()
    }
}
