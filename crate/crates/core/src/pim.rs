//! The prior-induced model (PIM): a branch that reads an intermediate
//! feature map of the task classifier, projects it into the vision-language
//! latent space, and classifies by cosine similarity to per-class attribute
//! text embeddings.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attribute_bank::AttributeBank;
use crate::checkpoint::{read_checkpoint, write_checkpoint};
use crate::classifier::{CnnArch, TaskClassifier, TinyCnn};
use crate::embedding::{embed_bank, embed_texts, AttributeEmbeddingTable, EmbeddingProvider, EmbeddingVector};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{softmax, LayerSpec, Sequential, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Mean,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PimInit {
    /// Mirrored layers start from the task classifier's trained weights;
    /// the projection is drawn from `seed`.
    Pretrained {
        seed: u64,
    },
    Random {
        seed: u64,
    },
}

fn default_temperature() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PimConfig {
    pub tap_layer: String,
    pub latent_dim: usize,
    pub aggregation: Aggregation,
    pub init: PimInit,
    /// Class logits are divided by this before the softmax.
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

impl PimConfig {
    pub fn validate(&self, classifier_layers: &[String]) -> Result<()> {
        if !classifier_layers.contains(&self.tap_layer) {
            return Err(Error::validation(format!(
                "tap layer '{}' is not one of {:?}",
                self.tap_layer, classifier_layers
            )));
        }
        if self.latent_dim == 0 {
            return Err(Error::validation("latent_dim must be positive"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::validation("temperature must be positive and finite"));
        }
        Ok(())
    }
}

/// Mean or max over each class's similarity list.
pub fn aggregate_logits(sims: &[Vec<f64>], mode: Aggregation) -> Result<Vec<f64>> {
    sims.iter()
        .enumerate()
        .map(|(c, s)| {
            if s.is_empty() {
                return Err(Error::validation(format!("class {c} has no similarities")));
            }
            Ok(match mode {
                Aggregation::Mean => s.iter().sum::<f64>() / s.len() as f64,
                Aggregation::Max => s.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            })
        })
        .collect()
}

/// Intermediate values of one PIM forward pass, kept for backprop.
pub struct PimTrace {
    pub acts: Vec<Tensor>,
    pub z: Vec<f64>,
    pub z_norm: f64,
    pub sims: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PimHead {
    pub config: PimConfig,
    pub classifier_arch: CnnArch,
    pub branch: Sequential,
    table: AttributeEmbeddingTable,
    rows: Vec<Vec<Vec<f64>>>,
    bank_fingerprint: String,
}

#[derive(Serialize, Deserialize)]
struct PimHeader {
    kind: String,
    config: PimConfig,
    classifier_arch: CnnArch,
    bank_fingerprint: String,
    classes: Vec<String>,
    #[serde(default)]
    fingerprint: String,
}

impl PimHead {
    /// `backbone` supplies the mirrored layers under [`PimInit::Pretrained`];
    /// it must share the classifier's convolutional blocks.
    pub fn new(
        config: PimConfig,
        arch: &CnnArch,
        table: AttributeEmbeddingTable,
        bank_fingerprint: impl Into<String>,
        backbone: Option<&TinyCnn>,
    ) -> Result<Self> {
        let arch = arch.clone();
        config.validate(&arch.layer_ids())?;
        if table.dim != config.latent_dim {
            return Err(Error::DimMismatch { expected: config.latent_dim, actual: table.dim });
        }
        if table.num_classes() != arch.num_classes {
            return Err(Error::Shape(format!(
                "attribute table has {} classes, classifier has {}",
                table.num_classes(),
                arch.num_classes
            )));
        }
        let tap = arch.tap_index(&config.tap_layer)?;
        let layers = arch.branch_layers(tap, config.latent_dim);
        let branch = match config.init {
            PimInit::Random { seed } => Sequential::new(layers, seed),
            PimInit::Pretrained { seed } => {
                let src = backbone.ok_or_else(|| Error::MissingArtifact("pretrained backbone for PIM init".into()))?;
                if src.arch.input_channels != arch.input_channels
                    || src.arch.input_size != arch.input_size
                    || src.arch.widths != arch.widths
                {
                    return Err(Error::Shape("backbone blocks differ from the classifier's".into()));
                }
                let mut b = Sequential::new(layers, seed);
                let start = arch.block_end(tap);
                // every mirrored layer except the final projection
                for i in 0..b.layers().len() - 1 {
                    b.layer_params_mut(i).copy_from_slice(src.net.layer_params(start + i));
                }
                b
            }
        };
        let mut head = Self {
            config,
            classifier_arch: arch,
            branch,
            rows: Vec::new(),
            table,
            bank_fingerprint: bank_fingerprint.into(),
        };
        head.rows = unit_rows(&head.table)?;
        Ok(head)
    }

    pub fn num_classes(&self) -> usize {
        self.rows.len()
    }

    pub fn table(&self) -> &AttributeEmbeddingTable {
        &self.table
    }

    pub fn bank_fingerprint(&self) -> &str {
        &self.bank_fingerprint
    }

    /// Unit attribute embeddings as `class -> rows`.
    pub fn attribute_rows(&self) -> &[Vec<Vec<f64>>] {
        &self.rows
    }

    pub fn tap_features(&self, classifier: &dyn TaskClassifier, image: &Image) -> Result<Tensor> {
        classifier.tap(image, &self.config.tap_layer)
    }

    /// Projects tapped features into the latent space.
    pub fn embed_features(&self, features: &Tensor) -> Result<Vec<f64>> {
        Ok(self.branch.forward(features)?.data)
    }

    pub fn similarities_from_z(&self, z: &[f64]) -> Result<Vec<Vec<f64>>> {
        if z.len() != self.config.latent_dim {
            return Err(Error::DimMismatch { expected: self.config.latent_dim, actual: z.len() });
        }
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("PIM embedding norm {norm}")));
        }
        if norm == 0.0 {
            // a zero embedding (e.g. a black image through dead ReLUs) is equally far from everything
            return Ok(self.rows.iter().map(|b| vec![0.0; b.len()]).collect());
        }
        Ok(self.rows.iter().map(|block| block.iter().map(|e| (dot(z, e) / norm).clamp(-1.0, 1.0)).collect()).collect())
    }

    pub fn logits_from_sims(&self, sims: &[Vec<f64>]) -> Result<Vec<f64>> {
        let t = self.config.temperature;
        Ok(aggregate_logits(sims, self.config.aggregation)?.into_iter().map(|l| l / t).collect())
    }

    pub fn predict_from_features(&self, features: &Tensor) -> Result<Vec<f64>> {
        let z = self.embed_features(features)?;
        let sims = self.similarities_from_z(&z)?;
        Ok(softmax(&self.logits_from_sims(&sims)?))
    }

    pub fn trace(&self, features: &Tensor) -> Result<PimTrace> {
        let acts = self.branch.forward_trace(features)?;
        let z = acts.last().unwrap().data.clone();
        let sims = self.similarities_from_z(&z)?;
        let logits = self.logits_from_sims(&sims)?;
        let probs = softmax(&logits);
        let z_norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        Ok(PimTrace { acts, z, z_norm, sims, logits, probs })
    }

    /// Backpropagates `dL/dlogits` through aggregation, cosine similarity and
    /// the branch, accumulating into `grad_params`. A zero embedding passes
    /// no gradient.
    pub fn backward(&self, trace: &PimTrace, dlogits: &[f64], grad_params: &mut [f64]) {
        if trace.z_norm == 0.0 {
            return;
        }
        let t = self.config.temperature;
        let d = trace.z.len();
        let mut dz = vec![0.0; d];
        let inv = 1.0 / trace.z_norm;
        let inv2 = inv * inv;
        for (c, block) in self.rows.iter().enumerate() {
            let g = dlogits[c] / t;
            if g == 0.0 {
                continue;
            }
            let sims = &trace.sims[c];
            let weights: Vec<(usize, f64)> = match self.config.aggregation {
                Aggregation::Mean => (0..block.len()).map(|k| (k, g / block.len() as f64)).collect(),
                Aggregation::Max => vec![(first_argmax(sims), g)],
            };
            for (k, gw) in weights {
                let e = &block[k];
                let w = sims[k];
                for j in 0..d {
                    dz[j] += gw * (e[j] * inv - w * trace.z[j] * inv2);
                }
            }
        }
        self.branch.backward(&trace.acts, Tensor::vector(dz), grad_params);
    }

    pub fn save(&self, path: &Path, fingerprint: &str) -> Result<()> {
        let header = PimHeader {
            kind: "pim".into(),
            config: self.config.clone(),
            classifier_arch: self.classifier_arch.clone(),
            bank_fingerprint: self.bank_fingerprint.clone(),
            classes: self.table.classes.clone(),
            fingerprint: fingerprint.to_string(),
        };
        write_checkpoint(path, &header, &self.branch.params)
    }

    /// Restores a head; the supplied bank must be the one it was trained with.
    pub fn load(path: &Path, bank: &AttributeBank, provider: &dyn EmbeddingProvider) -> Result<(Self, String)> {
        let (header, params): (PimHeader, Vec<f64>) = read_checkpoint(path)?;
        if header.kind != "pim" {
            return Err(Error::validation(format!("{} is not a PIM checkpoint", path.display())));
        }
        let fp = bank.fingerprint();
        if fp != header.bank_fingerprint {
            return Err(Error::Fingerprint(format!(
                "PIM checkpoint was trained with bank {} but bank {} was supplied",
                short(&header.bank_fingerprint),
                short(&fp)
            )));
        }
        let table = embed_bank(provider, bank)?;
        if table.dim != header.config.latent_dim {
            return Err(Error::DimMismatch { expected: header.config.latent_dim, actual: table.dim });
        }
        let tap = header.classifier_arch.tap_index(&header.config.tap_layer)?;
        let branch =
            Sequential::from_params(header.classifier_arch.branch_layers(tap, header.config.latent_dim), params)?;
        let rows = unit_rows(&table)?;
        Ok((
            Self {
                config: header.config,
                classifier_arch: header.classifier_arch,
                branch,
                table,
                rows,
                bank_fingerprint: header.bank_fingerprint,
            },
            header.fingerprint,
        ))
    }

    /// Index of the final projection layer within `branch`.
    pub fn projection_layer(&self) -> usize {
        let n = self.branch.layers().len();
        debug_assert!(matches!(self.branch.layers()[n - 1], LayerSpec::Linear { .. }));
        n - 1
    }
}

/// Attribute embeddings as unit `f64` vectors; providers need not normalize.
fn unit_rows(table: &AttributeEmbeddingTable) -> Result<Vec<Vec<Vec<f64>>>> {
    table
        .rows
        .iter()
        .map(|block| {
            block
                .iter()
                .map(|e| {
                    let v = e.to_f64();
                    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if n == 0.0 {
                        return Err(Error::Provider("zero attribute embedding".into()));
                    }
                    Ok(v.iter().map(|x| x / n).collect())
                })
                .collect()
        })
        .collect()
}

fn short(fp: &str) -> &str {
    &fp[..fp.len().min(12)]
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn first_argmax(xs: &[f64]) -> usize {
    crate::nn::argmax(xs)
}

pub fn pim_embed(head: &PimHead, classifier: &dyn TaskClassifier, image: &Image) -> Result<EmbeddingVector> {
    let z = head.embed_features(&head.tap_features(classifier, image)?)?;
    EmbeddingVector::new(z.into_iter().map(|v| v as f32).collect())
}

pub fn attribute_similarities(head: &PimHead, classifier: &dyn TaskClassifier, image: &Image) -> Result<Vec<Vec<f64>>> {
    let z = head.embed_features(&head.tap_features(classifier, image)?)?;
    head.similarities_from_z(&z)
}

/// PIM class probabilities `q(y | x)`.
pub fn pim_predict(head: &PimHead, classifier: &dyn TaskClassifier, image: &Image) -> Result<Vec<f64>> {
    head.predict_from_features(&head.tap_features(classifier, image)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroShotMode {
    /// Score the class-name embeddings.
    Cls,
    /// Aggregate attribute similarities like the PIM does.
    Att,
}

/// Zero-shot VLM classifier, which uses the provider's own image embedding in place of the PIM's `z`.
pub struct ZeroShotClassifier {
    class_rows: Vec<Vec<Vec<f64>>>,
    aggregation: Aggregation,
    temperature: f64,
}

impl ZeroShotClassifier {
    pub fn new(
        provider: &dyn EmbeddingProvider,
        bank: &AttributeBank,
        mode: ZeroShotMode,
        aggregation: Aggregation,
        temperature: f64,
    ) -> Result<Self> {
        if !provider.supports_images() {
            return Err(Error::Provider(format!(
                "provider '{}' has no image tower",
                provider.descriptor().kind.as_str()
            )));
        }
        let class_rows = match mode {
            ZeroShotMode::Cls => embed_texts(provider, bank.classes())?.into_iter().map(|v| vec![v.to_f64()]).collect(),
            ZeroShotMode::Att => embed_bank(provider, bank)?
                .rows
                .iter()
                .map(|b| b.iter().map(EmbeddingVector::to_f64).collect())
                .collect(),
        };
        Ok(Self { class_rows, aggregation, temperature })
    }

    pub fn predict_embedding(&self, z: &[f64]) -> Result<Vec<f64>> {
        let sims: Vec<Vec<f64>> = self
            .class_rows
            .iter()
            .map(|b| b.iter().map(|e| crate::embedding::cosine(z, e)).collect::<Result<_>>())
            .collect::<Result<_>>()?;
        let logits: Vec<f64> =
            aggregate_logits(&sims, self.aggregation)?.into_iter().map(|l| l / self.temperature).collect();
        Ok(softmax(&logits))
    }

    pub fn predict_batch(&self, provider: &dyn EmbeddingProvider, images: &[Image]) -> Result<Vec<Vec<f64>>> {
        provider.embed_images(images)?.iter().map(|z| self.predict_embedding(&z.to_f64())).collect()
    }
}

pub fn clip_zero_shot_predict(
    provider: &dyn EmbeddingProvider,
    image: &Image,
    bank: &AttributeBank,
    mode: ZeroShotMode,
    aggregation: Aggregation,
) -> Result<Vec<f64>> {
    let zs = ZeroShotClassifier::new(provider, bank, mode, aggregation, 1.0)?;
    Ok(zs.predict_batch(provider, std::slice::from_ref(image))?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribute_bank::BankMeta;
    use crate::embedding::{ProviderDescriptor, SyntheticProvider};
    use crate::nn::argmax;

    fn arch() -> CnnArch {
        CnnArch { input_channels: 3, input_size: 8, widths: vec![4, 6, 8], num_classes: 2 }
    }

    fn orth_table(d: usize) -> AttributeEmbeddingTable {
        let unit = |i: usize| {
            let mut v = vec![0.0f32; d];
            v[i] = 1.0;
            v
        };
        AttributeEmbeddingTable::from_vectors(
            vec!["a".into(), "b".into()],
            vec![vec![unit(0), unit(1), unit(2)], vec![unit(3), unit(4)]],
        )
        .unwrap()
    }

    fn head(aggregation: Aggregation) -> (TinyCnn, PimHead) {
        let f = TinyCnn::new(arch(), 1).unwrap();
        let cfg = PimConfig {
            tap_layer: "block1".into(),
            latent_dim: 16,
            aggregation,
            init: PimInit::Random { seed: 4 },
            temperature: 1.0,
        };
        let h = PimHead::new(cfg, &f.arch, orth_table(16), "fp", Some(&f)).unwrap();
        (f, h)
    }

    fn image(seed: usize) -> Image {
        let mut img = Image::new(3, 8, 8);
        img.data.iter_mut().enumerate().for_each(|(i, v)| *v = ((i * 37 + seed * 11) % 23) as f64 / 22.0);
        img
    }

    #[test]
    fn aggregation_definitions() {
        let sims = vec![vec![0.2, 0.4, 0.6], vec![0.3]];
        let mean = aggregate_logits(&sims, Aggregation::Mean).unwrap();
        let max = aggregate_logits(&sims, Aggregation::Max).unwrap();
        assert!((mean[0] - 0.4).abs() < 1e-12 && mean[1] == 0.3);
        assert!(max[0] == 0.6 && max[1] == 0.3);
        let perm = vec![vec![0.6, 0.2, 0.4], vec![0.3]];
        assert_eq!(aggregate_logits(&perm, Aggregation::Max).unwrap(), max);
        assert!((aggregate_logits(&perm, Aggregation::Mean).unwrap()[0] - 0.4).abs() < 1e-12);
        assert!(aggregate_logits(&[vec![]], Aggregation::Mean).is_err());
    }

    #[test]
    fn embedding_is_deterministic_with_configured_dim() {
        let (f, h) = head(Aggregation::Mean);
        let a = pim_embed(&h, &f, &image(0)).unwrap();
        let b = pim_embed(&h, &f, &image(0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), 16);
        assert!(a.norm().is_finite() && a.norm() > 0.0);
    }

    #[test]
    fn similarities_match_dot_product_oracle() {
        let (f, h) = head(Aggregation::Max);
        let z = pim_embed(&h, &f, &image(3)).unwrap().to_f64();
        let sims = attribute_similarities(&h, &f, &image(3)).unwrap();
        let zn = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (c, block) in h.table().rows.iter().enumerate() {
            for (k, e) in block.iter().enumerate() {
                let e = e.to_f64();
                let en = e.iter().map(|v| v * v).sum::<f64>().sqrt();
                let oracle = z.iter().zip(&e).map(|(a, b)| a * b).sum::<f64>() / (zn * en);
                assert!((sims[c][k] - oracle).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn identity_and_orthogonal_similarities() {
        let (_, h) = head(Aggregation::Mean);
        let mut z = vec![0.0; 16];
        z[0] = 2.5;
        let sims = h.similarities_from_z(&z).unwrap();
        assert_eq!(sims, vec![vec![1.0, 0.0, 0.0], vec![0.0, 0.0]]);
        assert!(h.similarities_from_z(&[1.0; 3]).is_err());
        assert_eq!(h.similarities_from_z(&[0.0; 16]).unwrap(), vec![vec![0.0; 3], vec![0.0; 2]]);
    }

    #[test]
    fn probabilities_valid_and_max_dominates_mean() {
        let (f, hmean) = head(Aggregation::Mean);
        let mut hmax = hmean.clone();
        hmax.config.aggregation = Aggregation::Max;
        for s in 0..10 {
            let q = pim_predict(&hmean, &f, &image(s)).unwrap();
            assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-6 && q.iter().all(|v| *v >= 0.0));
            let sims = attribute_similarities(&hmean, &f, &image(s)).unwrap();
            let mean = aggregate_logits(&sims, Aggregation::Mean).unwrap();
            let max = aggregate_logits(&sims, Aggregation::Max).unwrap();
            assert!(mean.iter().zip(&max).all(|(a, b)| b >= a));
            let _ = pim_predict(&hmax, &f, &image(s)).unwrap();
        }
    }

    #[test]
    fn equal_logits_give_uniform_and_shift_invariance() {
        let q = softmax(&[0.6, 0.6]);
        assert_eq!(q, vec![0.5, 0.5]);
        let a = softmax(&[0.1, -0.3, 0.7]);
        let b = softmax(&[3.1, 2.7, 3.7]);
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-9));
    }

    #[test]
    fn changing_tap_keeps_output_dim() {
        let f = TinyCnn::new(arch(), 1).unwrap();
        for tap in ["block1", "block2", "block3"] {
            let cfg = PimConfig {
                tap_layer: tap.into(),
                latent_dim: 16,
                aggregation: Aggregation::Mean,
                init: PimInit::Pretrained { seed: 0 },
                temperature: 1.0,
            };
            let h = PimHead::new(cfg, &f.arch, orth_table(16), "fp", Some(&f)).unwrap();
            assert_eq!(pim_embed(&h, &f, &image(1)).unwrap().dim(), 16);
        }
        let bad = PimConfig {
            tap_layer: "block7".into(),
            latent_dim: 16,
            aggregation: Aggregation::Mean,
            init: PimInit::Random { seed: 0 },
            temperature: 1.0,
        };
        assert!(PimHead::new(bad, &f.arch, orth_table(16), "fp", None).is_err());
    }

    #[test]
    fn pretrained_init_copies_classifier_tail() {
        let f = TinyCnn::new(arch(), 9).unwrap();
        let cfg = PimConfig {
            tap_layer: "block1".into(),
            latent_dim: 16,
            aggregation: Aggregation::Mean,
            init: PimInit::Pretrained { seed: 0 },
            temperature: 1.0,
        };
        let h = PimHead::new(cfg, &f.arch, orth_table(16), "fp", Some(&f)).unwrap();
        let start = f.arch.block_end(0);
        for i in 0..h.branch.layers().len() - 1 {
            assert_eq!(h.branch.layer_params(i), f.net.layer_params(start + i));
        }
    }

    #[test]
    fn planted_geometry_argmax_follows_nearest_centroid() {
        let (_, h) = head(Aggregation::Mean);
        // z planted next to class 1's attribute centroid
        let mut z = vec![0.01; 16];
        z[3] = 1.0;
        z[4] = 1.0;
        let q = h.predict_from_features_z(&z);
        assert_eq!(argmax(&q), 1);
        z[3] = 0.0;
        z[4] = 0.0;
        z[0] = 1.0;
        z[1] = 1.0;
        assert_eq!(argmax(&h.predict_from_features_z(&z)), 0);
    }

    impl PimHead {
        fn predict_from_features_z(&self, z: &[f64]) -> Vec<f64> {
            softmax(&self.logits_from_sims(&self.similarities_from_z(z).unwrap()).unwrap())
        }
    }

    #[test]
    fn checkpoint_refuses_other_bank() {
        let dir = tempfile::tempdir().unwrap();
        let provider = SyntheticProvider::new(ProviderDescriptor::synthetic(16, 0), None);
        let bank = AttributeBank::new(
            vec!["a".into(), "b".into()],
            vec![vec!["x".into(), "y".into()], vec!["z".into()]],
            BankMeta::default(),
        )
        .unwrap();
        let f = TinyCnn::new(arch(), 1).unwrap();
        let cfg = PimConfig {
            tap_layer: "block2".into(),
            latent_dim: 16,
            aggregation: Aggregation::Max,
            init: PimInit::Random { seed: 1 },
            temperature: 0.5,
        };
        let h =
            PimHead::new(cfg, &f.arch, embed_bank(&provider, &bank).unwrap(), bank.fingerprint(), Some(&f)).unwrap();
        let p = dir.path().join("pim.ckpt");
        h.save(&p, "run").unwrap();
        let (back, fp) = PimHead::load(&p, &bank, &provider).unwrap();
        assert_eq!(fp, "run");
        assert_eq!(back.branch, h.branch);
        assert_eq!(pim_predict(&back, &f, &image(2)).unwrap(), pim_predict(&h, &f, &image(2)).unwrap());
        let other = AttributeBank::new(
            vec!["a".into(), "b".into()],
            vec![vec!["x".into()], vec!["z".into()]],
            BankMeta::default(),
        )
        .unwrap();
        assert!(matches!(PimHead::load(&p, &other, &provider), Err(Error::Fingerprint(_))));
    }

    struct PlantedImage {
        desc: ProviderDescriptor,
        inner: SyntheticProvider,
        image_vec: EmbeddingVector,
    }

    impl EmbeddingProvider for PlantedImage {
        fn descriptor(&self) -> &ProviderDescriptor {
            &self.desc
        }
        fn encode_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
            self.inner.encode_texts(texts)
        }
        fn supports_images(&self) -> bool {
            true
        }
        fn embed_images(&self, images: &[Image]) -> Result<Vec<EmbeddingVector>> {
            Ok(vec![self.image_vec.clone(); images.len()])
        }
    }

    #[test]
    fn zero_shot_modes() {
        let desc = ProviderDescriptor::synthetic(64, 2);
        let inner = SyntheticProvider::new(desc.clone(), None);
        let names = vec!["cat".to_string(), "dog".to_string(), "bird".to_string()];
        let dog = inner.encode_texts(&names[1..2]).unwrap().remove(0);
        let p = PlantedImage { desc, inner, image_vec: dog };
        let bank =
            AttributeBank::new(names.clone(), names.iter().map(|n| vec![n.clone()]).collect(), BankMeta::default())
                .unwrap();
        let img = Image::new(3, 4, 4);
        let cls = clip_zero_shot_predict(&p, &img, &bank, ZeroShotMode::Cls, Aggregation::Mean).unwrap();
        let att = clip_zero_shot_predict(&p, &img, &bank, ZeroShotMode::Att, Aggregation::Mean).unwrap();
        assert_eq!(argmax(&cls), 1);
        assert_eq!(cls, att);
        struct TextOnly(ProviderDescriptor);
        impl EmbeddingProvider for TextOnly {
            fn descriptor(&self) -> &ProviderDescriptor {
                &self.0
            }
            fn encode_texts(&self, _: &[String]) -> Result<Vec<EmbeddingVector>> {
                unreachable!()
            }
        }
        let t = TextOnly(ProviderDescriptor::synthetic(4, 0));
        assert!(clip_zero_shot_predict(&t, &img, &bank, ZeroShotMode::Cls, Aggregation::Mean).is_err());
    }
}
