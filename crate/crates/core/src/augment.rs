//! CutMix and AugMix for images in `[0, 1]`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Dirichlet, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Rectangle pasted from the partner image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CutBox {
    pub y0: usize,
    pub x0: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CutMixBatch {
    pub images: Vec<Image>,
    /// `(own label, partner label)` per image.
    pub label_pairs: Vec<(usize, usize)>,
    /// Weight of the own label: `1 - patch_area / image_area`.
    pub lambda: f64,
}

/// Pastes `cut` from `images[partner[i]]` into each image `i`.
pub fn cutmix_with_box(images: &[Image], labels: &[usize], partner: &[usize], cut: CutBox) -> Result<CutMixBatch> {
    if images.len() != labels.len() || images.len() != partner.len() {
        return Err(Error::Shape("cutmix inputs have different lengths".into()));
    }
    let first = images.first().ok_or_else(|| Error::validation("cutmix needs a non-empty batch"))?;
    if first.height == 0 || first.width == 0 {
        return Err(Error::Shape("cutmix on an empty image".into()));
    }
    if images.iter().any(|im| !im.same_shape(first)) {
        return Err(Error::Shape("cutmix batch has mixed image shapes".into()));
    }
    if cut.y0 + cut.height > first.height || cut.x0 + cut.width > first.width {
        return Err(Error::Shape("cutmix box outside the image".into()));
    }
    if partner.iter().any(|p| *p >= images.len()) {
        return Err(Error::Shape("cutmix partner index out of range".into()));
    }
    let mut out = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let src = &images[partner[i]];
        let mut mixed = img.clone();
        for c in 0..img.channels {
            for y in cut.y0..cut.y0 + cut.height {
                for x in cut.x0..cut.x0 + cut.width {
                    mixed.set(c, y, x, src.get(c, y, x));
                }
            }
        }
        out.push(mixed);
    }
    let area = (cut.height * cut.width) as f64;
    let total = (first.height * first.width) as f64;
    Ok(CutMixBatch {
        images: out,
        label_pairs: labels.iter().zip(partner).map(|(l, p)| (*l, labels[*p])).collect(),
        lambda: 1.0 - area / total,
    })
}

/// Standard CutMix: `λ ~ Beta(1, 1)`, a box of side ratio `sqrt(1 - λ)` at a
/// uniform centre (clipped to the image), and a random permutation partner.
pub fn cutmix(images: &[Image], labels: &[usize], seed: u64) -> Result<CutMixBatch> {
    cutmix_rng(images, labels, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn cutmix_rng<R: Rng>(images: &[Image], labels: &[usize], rng: &mut R) -> Result<CutMixBatch> {
    if images.len() < 2 {
        return Err(Error::validation("cutmix needs at least two images"));
    }
    let (h, w) = (images[0].height, images[0].width);
    if h == 0 || w == 0 {
        return Err(Error::Shape("cutmix on an empty image".into()));
    }
    let lam: f64 = Beta::new(1.0, 1.0).unwrap().sample(rng);
    let ratio = (1.0 - lam).sqrt();
    let (ch, cw) = ((h as f64 * ratio) as usize, (w as f64 * ratio) as usize);
    let (cy, cx) = (rng.gen_range(0..h), rng.gen_range(0..w));
    let y0 = cy.saturating_sub(ch / 2);
    let x0 = cx.saturating_sub(cw / 2);
    let y1 = (cy + ch / 2).min(h);
    let x1 = (cx + cw / 2).min(w);
    let mut partner: Vec<usize> = (0..images.len()).collect();
    partner.shuffle(rng);
    cutmix_with_box(images, labels, &partner, CutBox { y0, x0, height: y1 - y0, width: x1 - x0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugOp {
    AutoContrast,
    Posterize,
    Solarize,
    Rotate,
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
    Grayscale,
    ChannelShuffle,
}

impl AugOp {
    pub const ALL: [AugOp; 10] = [
        AugOp::AutoContrast,
        AugOp::Posterize,
        AugOp::Solarize,
        AugOp::Rotate,
        AugOp::ShearX,
        AugOp::ShearY,
        AugOp::TranslateX,
        AugOp::TranslateY,
        AugOp::Grayscale,
        AugOp::ChannelShuffle,
    ];

    /// Applies the op at a random strength. Every op maps `[0,1]` into `[0,1]`.
    pub fn apply<R: Rng>(self, img: &Image, rng: &mut R) -> Image {
        match self {
            AugOp::AutoContrast => auto_contrast(img),
            AugOp::Posterize => {
                let levels = [4.0, 8.0, 16.0][rng.gen_range(0..3)];
                map_pixels(img, |v| (v * (levels - 1.0)).round() / (levels - 1.0))
            }
            AugOp::Solarize => {
                let t = rng.gen_range(0.5..1.0);
                map_pixels(img, |v| if v >= t { 1.0 - v } else { v })
            }
            AugOp::Rotate => {
                let deg: f64 = rng.gen_range(-30.0..30.0);
                let (s, c) = deg.to_radians().sin_cos();
                warp(img, |y, x| (c * y - s * x, s * y + c * x))
            }
            AugOp::ShearX => {
                let k = rng.gen_range(-0.3..0.3);
                warp(img, |y, x| (y, x + k * y))
            }
            AugOp::ShearY => {
                let k = rng.gen_range(-0.3..0.3);
                warp(img, |y, x| (y + k * x, x))
            }
            AugOp::TranslateX => {
                let d = (img.width as f64 * rng.gen_range(-0.2..0.2)).round();
                warp(img, |y, x| (y, x - d))
            }
            AugOp::TranslateY => {
                let d = (img.height as f64 * rng.gen_range(-0.2..0.2)).round();
                warp(img, |y, x| (y - d, x))
            }
            AugOp::Grayscale => {
                if img.channels != 3 {
                    return img.clone();
                }
                let mut out = img.clone();
                for y in 0..img.height {
                    for x in 0..img.width {
                        let g = 0.299 * img.get(0, y, x) + 0.587 * img.get(1, y, x) + 0.114 * img.get(2, y, x);
                        (0..3).for_each(|c| out.set(c, y, x, g));
                    }
                }
                out
            }
            AugOp::ChannelShuffle => {
                let mut perm: Vec<usize> = (0..img.channels).collect();
                perm.shuffle(rng);
                let plane = img.height * img.width;
                let mut out = img.clone();
                for (c, src) in perm.iter().enumerate() {
                    out.data[c * plane..(c + 1) * plane].copy_from_slice(&img.data[src * plane..(src + 1) * plane]);
                }
                out
            }
        }
    }
}

fn map_pixels(img: &Image, f: impl Fn(f64) -> f64) -> Image {
    let mut out = img.clone();
    out.data.iter_mut().for_each(|v| *v = f(*v));
    out
}

fn auto_contrast(img: &Image) -> Image {
    let plane = img.height * img.width;
    let mut out = img.clone();
    for c in 0..img.channels {
        let px = &mut out.data[c * plane..(c + 1) * plane];
        let lo = px.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = px.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo > 1e-12 {
            px.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
        }
    }
    out
}

/// Nearest-neighbour resampling about the image centre; `inv` maps an output
/// coordinate to its source. Pixels from outside the image are filled with
/// the per-channel mean.
fn warp(img: &Image, inv: impl Fn(f64, f64) -> (f64, f64)) -> Image {
    let (h, w) = (img.height, img.width);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let plane = h * w;
    let means: Vec<f64> =
        (0..img.channels).map(|c| img.data[c * plane..(c + 1) * plane].iter().sum::<f64>() / plane as f64).collect();
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = inv(y as f64 - cy, x as f64 - cx);
            let (sy, sx) = ((sy + cy).round(), (sx + cx).round());
            let inside = sy >= 0.0 && sx >= 0.0 && (sy as usize) < h && (sx as usize) < w;
            for c in 0..img.channels {
                let v = if inside { img.get(c, sy as usize, sx as usize) } else { means[c] };
                out.set(c, y, x, v);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugMixConfig {
    /// Number of parallel chains.
    pub width: usize,
    /// Each chain applies between 1 and `max_depth` ops.
    pub max_depth: usize,
    /// Concentration of the chain-weight Dirichlet and the skip-weight Beta.
    pub alpha: f64,
    pub ops: Vec<AugOp>,
}

impl Default for AugMixConfig {
    fn default() -> Self {
        Self { width: 3, max_depth: 3, alpha: 1.0, ops: AugOp::ALL.to_vec() }
    }
}

impl AugMixConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.max_depth == 0 || self.ops.is_empty() {
            return Err(Error::validation("augmix needs width, depth and at least one op"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::validation("augmix alpha must be positive"));
        }
        Ok(())
    }
}

/// `m·x + (1 − m)·Σ_i w_i chain_i(x)`, with `w ~ Dirichlet(α)` and
/// `m ~ Beta(α, α)` unless `skip` fixes it.
pub fn augmix_rng<R: Rng>(img: &Image, cfg: &AugMixConfig, skip: Option<f64>, rng: &mut R) -> Result<Image> {
    cfg.validate()?;
    if img.pixels() == 0 {
        return Err(Error::Shape("augmix on an empty image".into()));
    }
    let weights: Vec<f64> =
        if cfg.width == 1 { vec![1.0] } else { Dirichlet::new_with_size(cfg.alpha, cfg.width).unwrap().sample(rng) };
    let m = match skip {
        Some(m) if (0.0..=1.0).contains(&m) => m,
        Some(m) => return Err(Error::validation(format!("skip weight {m} outside [0,1]"))),
        None => Beta::new(cfg.alpha, cfg.alpha).unwrap().sample(rng),
    };
    let mut mix = vec![0.0; img.data.len()];
    for w in &weights {
        let depth = rng.gen_range(1..=cfg.max_depth);
        let mut chained = img.clone();
        for _ in 0..depth {
            let op = cfg.ops[rng.gen_range(0..cfg.ops.len())];
            chained = op.apply(&chained, rng);
        }
        mix.iter_mut().zip(&chained.data).for_each(|(a, b)| *a += w * b);
    }
    if m == 1.0 {
        return Ok(img.clone());
    }
    let mut out = img.clone();
    for (o, x) in out.data.iter_mut().zip(&mix) {
        *o = (m * *o + (1.0 - m) * x).clamp(0.0, 1.0);
    }
    Ok(out)
}

pub fn augmix(img: &Image, seed: u64) -> Result<Image> {
    augmix_rng(img, &AugMixConfig::default(), None, &mut ChaCha8Rng::seed_from_u64(seed))
}
