//! Procedural shape images for exercising the failure modes end to end:
//! spurious background colour, class imbalance, and pixel corruptions.
//!
//! Every image shows one filled shape (circle or square) on a tinted
//! background. The shape decides the label. The background tint is a
//! nuisance: "warm" pairs with circles and "cool" with squares with a
//! configurable probability.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribute_bank::{AttributeBank, BankMeta};
use crate::dataset::{Dataset, Sample, Split};
use crate::embedding::{PlantedAnchor, PlantedGeometry};
use crate::error::{Error, Result};
use crate::image::Image;

pub const SHAPE_CLASSES: [&str; 2] = ["circle", "square"];
pub const BACKGROUNDS: [&str; 2] = ["warm", "cool"];

const WARM: [f64; 3] = [0.85, 0.50, 0.25];
const COOL: [f64; 3] = [0.25, 0.50, 0.85];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpuriousSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Fraction of training images whose background matches their class.
    pub rho_train: f64,
    /// Same for validation and test images.
    pub rho_test: f64,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for SpuriousSpec {
    fn default() -> Self {
        Self { n_train: 1000, n_val: 400, n_test: 1000, rho_train: 0.95, rho_test: 0.5, image_size: 16, seed: 0 }
    }
}

impl SpuriousSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("rho_train", self.rho_train), ("rho_test", self.rho_test)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::validation(format!("{name} = {r} outside [0,1]")));
            }
        }
        validate_size(self.image_size)
    }
}

fn validate_size(size: usize) -> Result<()> {
    if size < 8 {
        return Err(Error::validation(format!("image size {size} is below the minimum of 8")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImbalanceSpec {
    pub train_counts: Vec<usize>,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for ImbalanceSpec {
    fn default() -> Self {
        Self { train_counts: vec![600, 2000], val_per_class: 200, test_per_class: 500, image_size: 16, seed: 0 }
    }
}

impl ImbalanceSpec {
    pub fn validate(&self) -> Result<()> {
        if self.train_counts.len() != SHAPE_CLASSES.len() {
            return Err(Error::validation(format!("train_counts needs {} entries", SHAPE_CLASSES.len())));
        }
        if self.train_counts.contains(&0) || self.test_per_class == 0 {
            return Err(Error::validation("class counts must be positive"));
        }
        validate_size(self.image_size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionKind {
    GaussianNoise,
    Blur,
    Contrast,
}

impl std::str::FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian-noise" => Ok(CorruptionKind::GaussianNoise),
            "blur" => Ok(CorruptionKind::Blur),
            "contrast" => Ok(CorruptionKind::Contrast),
            other => Err(Error::validation(format!("unknown corruption kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputCorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub seed: u64,
}

/// Generator for sample `index` of a split, independent of all others.
fn sample_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((split as u64) << 40) | index as u64);
    rng
}

/// Draws one shape image. The shape's size, position and grey level vary;
/// the background gets a per-channel jitter and the whole image mild noise.
pub fn render_shape(label: usize, background: usize, size: usize, rng: &mut ChaCha8Rng) -> Image {
    let base = if background == 0 { WARM } else { COOL };
    let tint: Vec<f64> = base.iter().map(|c| (c + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0)).collect();
    let grey = if rng.gen_bool(0.5) { rng.gen_range(0.0..0.2) } else { rng.gen_range(0.8..1.0) };
    let s = size as f64;
    let half = rng.gen_range(0.2 * s..0.32 * s);
    let cy = rng.gen_range(half..s - half);
    let cx = rng.gen_range(half..s - half);
    let noise = Normal::new(0.0, 0.03).unwrap();
    let mut img = Image::new(3, size, size);
    for y in 0..size {
        for x in 0..size {
            let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            let inside = if label == 0 {
                dy * dy + dx * dx <= half * half
            } else {
                dy.abs() <= half * 0.9 && dx.abs() <= half * 0.9
            };
            for (c, t) in tint.iter().enumerate() {
                let v = if inside { grey } else { *t };
                img.set(c, y, x, v + noise.sample(rng));
            }
        }
    }
    img.clamp_unit();
    img.quantize_u8();
    img
}

fn spurious_split(spec: &SpuriousSpec, split: Split, n: usize, rho: f64) -> Vec<Sample> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = sample_rng(spec.seed, split, i);
            let label = i % 2;
            let matched = rng.gen::<f64>() < rho;
            let background = if matched { label } else { 1 - label };
            Sample {
                id: format!("{split}_{i:05}"),
                image: render_shape(label, background, spec.image_size, &mut rng),
                label,
                nuisance: Some(background),
                split,
                domain: None,
            }
        })
        .collect()
}

/// Shapes whose background matches the class with probability `rho`.
/// Validation images follow the test distribution.
pub fn generate_spurious(spec: &SpuriousSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut samples = spurious_split(spec, Split::Train, spec.n_train, spec.rho_train);
    samples.extend(spurious_split(spec, Split::Val, spec.n_val, spec.rho_test));
    samples.extend(spurious_split(spec, Split::Test, spec.n_test, spec.rho_test));
    Ok(Dataset {
        classes: SHAPE_CLASSES.map(String::from).to_vec(),
        nuisance_names: BACKGROUNDS.map(String::from).to_vec(),
        samples,
    })
}

/// Same imagery with independent backgrounds, skewed training counts and
/// balanced validation and test splits.
pub fn generate_imbalanced(spec: &ImbalanceSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut samples = Vec::new();
    let mut plan: Vec<(Split, Vec<usize>)> = vec![(Split::Train, spec.train_counts.clone())];
    plan.push((Split::Val, vec![spec.val_per_class; SHAPE_CLASSES.len()]));
    plan.push((Split::Test, vec![spec.test_per_class; SHAPE_CLASSES.len()]));
    for (split, counts) in plan {
        let labels: Vec<usize> = counts.iter().enumerate().flat_map(|(c, n)| std::iter::repeat_n(c, *n)).collect();
        let part: Vec<Sample> = labels
            .par_iter()
            .enumerate()
            .map(|(i, &label)| {
                let mut rng = sample_rng(spec.seed, split, i);
                let background = rng.gen_range(0..BACKGROUNDS.len());
                Sample {
                    id: format!("{split}_{i:05}"),
                    image: render_shape(label, background, spec.image_size, &mut rng),
                    label,
                    nuisance: Some(background),
                    split,
                    domain: None,
                }
            })
            .collect();
        samples.extend(part);
    }
    Ok(Dataset {
        classes: SHAPE_CLASSES.map(String::from).to_vec(),
        nuisance_names: BACKGROUNDS.map(String::from).to_vec(),
        samples,
    })
}

const NOISE_SIGMA: [f64; 5] = [0.04, 0.08, 0.12, 0.18, 0.26];
const BLUR_SIGMA: [f64; 5] = [0.5, 0.75, 1.0, 1.5, 2.0];
const CONTRAST_FACTOR: [f64; 5] = [0.75, 0.5, 0.4, 0.3, 0.15];

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with edge clamping.
fn blur(img: &Image, sigma: f64) -> Image {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = (img.height as isize, img.width as isize);
    let mut tmp = img.clone();
    let mut out = img.clone();
    for c in 0..img.channels {
        for y in 0..h {
            for x in 0..w {
                let v: f64 = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| kv * img.get(c, y as usize, (x + i as isize - r).clamp(0, w - 1) as usize))
                    .sum();
                tmp.set(c, y as usize, x as usize, v);
            }
        }
        for y in 0..h {
            for x in 0..w {
                let v: f64 = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| kv * tmp.get(c, (y + i as isize - r).clamp(0, h - 1) as usize, x as usize))
                    .sum();
                out.set(c, y as usize, x as usize, v);
            }
        }
    }
    out
}

pub fn corrupt_image(img: &Image, kind: CorruptionKind, severity: u8, rng: &mut ChaCha8Rng) -> Result<Image> {
    if !(1..=5).contains(&severity) {
        return Err(Error::validation(format!("severity {severity} outside 1..=5")));
    }
    let s = (severity - 1) as usize;
    let mut out = match kind {
        CorruptionKind::GaussianNoise => {
            let n = Normal::new(0.0, NOISE_SIGMA[s]).unwrap();
            let mut o = img.clone();
            o.data.iter_mut().for_each(|v| *v += n.sample(rng));
            o
        }
        CorruptionKind::Blur => blur(img, BLUR_SIGMA[s]),
        CorruptionKind::Contrast => {
            let mean = img.data.iter().sum::<f64>() / img.data.len() as f64;
            let f = CONTRAST_FACTOR[s];
            let mut o = img.clone();
            o.data.iter_mut().for_each(|v| *v = (*v - mean) * f + mean);
            o
        }
    };
    out.clamp_unit();
    out.quantize_u8();
    Ok(out)
}

/// Corrupts every image; labels, ids and annotations are kept.
pub fn apply_corruption(dataset: &Dataset, spec: &InputCorruptionSpec) -> Result<Dataset> {
    let samples = dataset
        .samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            Ok(Sample { image: corrupt_image(&s.image, spec.kind, spec.severity, &mut rng)?, ..s.clone() })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset { samples, ..dataset.clone() })
}

const CIRCLE_PHRASES: [&str; 6] =
    ["round shape", "curved outline", "no corners", "circular silhouette", "smooth edge", "disk form"];
const SQUARE_PHRASES: [&str; 6] =
    ["four corners", "straight edges", "right angles", "square silhouette", "flat sides", "boxy outline"];
const PLANTED_STRENGTH: f64 = 0.8;

/// Core-attribute bank for the shape scenarios.
pub fn oracle_bank() -> AttributeBank {
    AttributeBank::new(
        SHAPE_CLASSES.map(String::from).to_vec(),
        vec![CIRCLE_PHRASES.map(String::from).to_vec(), SQUARE_PHRASES.map(String::from).to_vec()],
        BankMeta { prompt_template: "oracle".into(), source_model: "hand-written".into(), ..BankMeta::default() },
    )
    .expect("oracle bank is valid")
}

/// Named planted geometries for the synthetic provider. `shapes` pulls each
/// oracle phrase toward the direction of its shape.
pub fn planted_preset(name: &str) -> Option<PlantedGeometry> {
    match name {
        "shapes" => {
            let anchor = |phrase: &str, concept: &str| PlantedAnchor {
                phrase: phrase.to_string(),
                concept: concept.to_string(),
                strength: PLANTED_STRENGTH,
            };
            let mut anchors: Vec<PlantedAnchor> = CIRCLE_PHRASES.iter().map(|p| anchor(p, "circle")).collect();
            anchors.extend(SQUARE_PHRASES.iter().map(|p| anchor(p, "square")));
            Some(PlantedGeometry { anchors })
        }
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SpuriousSpec {
        SpuriousSpec { n_train: 200, n_val: 20, n_test: 1000, seed, ..Default::default() }
    }

    #[test]
    fn full_correlation_matches_every_train_sample() {
        let ds = generate_spurious(&SpuriousSpec { rho_train: 1.0, ..small(1) }).unwrap();
        assert!(ds.split(Split::Train).iter().all(|s| s.nuisance == Some(s.label)));
    }

    #[test]
    fn test_match_rate_within_binomial_bound() {
        let ds = generate_spurious(&small(2)).unwrap();
        let test = ds.split(Split::Test);
        let n = test.len() as f64;
        let matched = test.iter().filter(|s| s.nuisance == Some(s.label)).count() as f64;
        let sigma = (n * 0.25).sqrt();
        assert!((matched - 0.5 * n).abs() <= 3.0 * sigma, "matched {matched}");
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate_spurious(&small(3)).unwrap(), generate_spurious(&small(3)).unwrap());
        assert_ne!(generate_spurious(&small(3)).unwrap(), generate_spurious(&small(4)).unwrap());
        let spec =
            ImbalanceSpec { train_counts: vec![30, 100], val_per_class: 5, test_per_class: 10, ..Default::default() };
        assert_eq!(generate_imbalanced(&spec).unwrap(), generate_imbalanced(&spec).unwrap());
    }

    #[test]
    fn imbalanced_counts_exact_and_test_balanced() {
        let ds = generate_imbalanced(&ImbalanceSpec::default()).unwrap();
        assert_eq!(Dataset::class_counts(&ds.split(Split::Train), 2), vec![600, 2000]);
        assert_eq!(Dataset::class_counts(&ds.split(Split::Test), 2), vec![500, 500]);
        assert!(generate_imbalanced(&ImbalanceSpec { train_counts: vec![0, 5], ..Default::default() }).is_err());
    }

    #[test]
    fn images_are_valid_and_lossless_on_disk() {
        let ds = generate_spurious(&SpuriousSpec { n_train: 4, n_val: 2, n_test: 2, ..Default::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        assert_eq!(Dataset::load(dir.path()).unwrap(), ds);
    }

    #[test]
    fn corruption_severity_is_monotone_and_preserves_labels() {
        let ds = generate_spurious(&SpuriousSpec { n_train: 40, n_val: 0, n_test: 0, ..Default::default() }).unwrap();
        for kind in [CorruptionKind::GaussianNoise, CorruptionKind::Blur, CorruptionKind::Contrast] {
            let dist: Vec<f64> = (1..=5)
                .map(|severity| {
                    let c = apply_corruption(&ds, &InputCorruptionSpec { kind, severity, seed: 9 }).unwrap();
                    assert_eq!(
                        c.samples.iter().map(|s| (&s.id, s.label)).collect::<Vec<_>>(),
                        ds.samples.iter().map(|s| (&s.id, s.label)).collect::<Vec<_>>()
                    );
                    c.samples.iter().zip(&ds.samples).map(|(a, b)| a.image.mean_sq_diff(&b.image)).sum::<f64>()
                })
                .collect();
            assert!(dist[0] < dist[4], "{kind:?}: {dist:?}");
            assert!(dist.windows(2).all(|w| w[0] <= w[1]), "{kind:?}: {dist:?}");
            let spec = InputCorruptionSpec { kind, severity: 3, seed: 1 };
            assert_eq!(apply_corruption(&ds, &spec).unwrap(), apply_corruption(&ds, &spec).unwrap());
        }
        let bad = InputCorruptionSpec { kind: CorruptionKind::Blur, severity: 6, seed: 0 };
        assert!(apply_corruption(&ds, &bad).is_err());
        assert!("jpeg".parse::<CorruptionKind>().is_err());
    }

    #[test]
    fn preset_covers_oracle_bank() {
        let bank = oracle_bank();
        let g = planted_preset("shapes").unwrap();
        for phrase in bank.all_attributes().iter().flatten() {
            assert!(g.anchors.iter().any(|a| &a.phrase == phrase));
        }
        assert!(planted_preset("nope").is_none());
    }
}
