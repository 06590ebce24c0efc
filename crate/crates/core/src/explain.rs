//! Attribute-ablation explanations. Per-attribute weights in `[0, 1]` scale
//! the PIM's similarities; they are fitted so that the weighted PIM
//! reproduces the classifier's distribution. Attributes whose weight had to
//! drop the most are the ones the classifier appears to disregard.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::attribute_bank::AttributeBank;
use crate::classifier::TaskClassifier;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{argmax, softmax};
use crate::pim::{attribute_similarities, Aggregation, PimHead};
use crate::scoring::DECIDER_EPS;

/// Per-class weight vectors, shaped like the similarity lists.
pub type AttributeWeights = Vec<Vec<f64>>;

pub const INITIAL_WEIGHT: f64 = 1.0;
const MAX_HALVINGS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainOptions {
    pub lr: f64,
    pub max_iters: usize,
    /// Stop once an accepted step improves the KL by less than this.
    pub tol: f64,
}

impl Default for ExplainOptions {
    fn default() -> Self {
        Self { lr: 0.1, max_iters: 200, tol: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationResult {
    pub initial_weights: AttributeWeights,
    pub weights: AttributeWeights,
    pub initial_kl: f64,
    pub final_kl: f64,
    /// KL after every accepted step, starting with the initial value.
    pub kl_trace: Vec<f64>,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedAttribute {
    pub class: usize,
    pub index: usize,
    pub delta: f64,
}

fn check_shape(sims: &[Vec<f64>], weights: &[Vec<f64>]) -> Result<()> {
    if sims.len() != weights.len() || sims.iter().zip(weights).any(|(s, w)| s.len() != w.len()) {
        return Err(Error::Shape("attribute weights do not match the similarity layout".into()));
    }
    Ok(())
}

/// `mean_k(w_k · ω_k)` or `max_k(w_k · ω_k)` per class.
pub fn weighted_logits(sims: &[Vec<f64>], weights: &[Vec<f64>], mode: Aggregation) -> Result<Vec<f64>> {
    check_shape(sims, weights)?;
    let products: Vec<Vec<f64>> =
        sims.iter().zip(weights).map(|(s, w)| s.iter().zip(w).map(|(a, b)| a * b).collect()).collect();
    crate::pim::aggregate_logits(&products, mode)
}

/// `KL(p ‖ q)` with `q` clamped below at the scoring epsilon.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * (a.ln() - b.max(DECIDER_EPS).ln())).sum()
}

fn objective(sims: &[Vec<f64>], w: &[Vec<f64>], p_f: &[f64], mode: Aggregation, t: f64) -> Result<(f64, Vec<f64>)> {
    let logits: Vec<f64> = weighted_logits(sims, w, mode)?.into_iter().map(|l| l / t).collect();
    let q = softmax(&logits);
    let kl = kl_divergence(p_f, &q);
    if !kl.is_finite() {
        return Err(Error::NonFinite(format!("KL divergence {kl}")));
    }
    Ok((kl, q))
}

fn gradient(sims: &[Vec<f64>], w: &[Vec<f64>], p_f: &[f64], q: &[f64], mode: Aggregation, t: f64) -> AttributeWeights {
    sims.iter()
        .zip(w)
        .enumerate()
        .map(|(c, (s, wc))| {
            let g = (q[c] - p_f[c]) / t;
            match mode {
                Aggregation::Mean => s.iter().map(|om| g * om / s.len() as f64).collect(),
                Aggregation::Max => {
                    let prod: Vec<f64> = s.iter().zip(wc).map(|(a, b)| a * b).collect();
                    let k = argmax(&prod);
                    (0..s.len()).map(|j| if j == k { g * s[j] } else { 0.0 }).collect()
                }
            }
        })
        .collect()
}

/// Projected gradient descent on the weights, starting from all ones.
/// A step that raises the KL is retried with half the learning rate, up to
/// ten times; if none helps the fit stops.
pub fn fit_weights(
    sims: &[Vec<f64>],
    p_f: &[f64],
    mode: Aggregation,
    temperature: f64,
    opts: &ExplainOptions,
) -> Result<ExplanationResult> {
    if sims.len() != p_f.len() {
        return Err(Error::DimMismatch { expected: sims.len(), actual: p_f.len() });
    }
    if sims.iter().any(|s| s.is_empty()) {
        return Err(Error::validation("every class needs at least one similarity"));
    }
    if opts.lr.is_nan() || opts.lr <= 0.0 || temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::validation("learning rate and temperature must be positive"));
    }
    let init: AttributeWeights = sims.iter().map(|s| vec![INITIAL_WEIGHT; s.len()]).collect();
    let mut w = init.clone();
    let (mut kl, mut q) = objective(sims, &w, p_f, mode, temperature)?;
    let initial_kl = kl;
    let mut trace = vec![kl];
    let mut iterations = 0;
    while iterations < opts.max_iters {
        iterations += 1;
        let g = gradient(sims, &w, p_f, &q, mode, temperature);
        let mut lr = opts.lr;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let cand: AttributeWeights = w
                .iter()
                .zip(&g)
                .map(|(wc, gc)| wc.iter().zip(gc).map(|(a, b)| (a - lr * b).clamp(0.0, 1.0)).collect())
                .collect();
            let (ckl, cq) = objective(sims, &cand, p_f, mode, temperature)?;
            if ckl <= kl {
                accepted = Some((cand, ckl, cq));
                break;
            }
            lr *= 0.5;
        }
        let Some((cand, ckl, cq)) = accepted else { break };
        let improvement = kl - ckl;
        w = cand;
        kl = ckl;
        q = cq;
        trace.push(kl);
        if improvement < opts.tol {
            break;
        }
    }
    Ok(ExplanationResult { initial_weights: init, weights: w, initial_kl, final_kl: kl, kl_trace: trace, iterations })
}

pub fn fit_attribute_weights(
    head: &PimHead,
    classifier: &dyn TaskClassifier,
    image: &Image,
    p_f: &[f64],
    opts: &ExplainOptions,
) -> Result<ExplanationResult> {
    let sims = attribute_similarities(head, classifier, image)?;
    fit_weights(&sims, p_f, head.config.aggregation, head.config.temperature, opts)
}

/// Attributes ordered by weight reduction, largest first; ties keep
/// `(class, index)` order.
pub fn rank_attribute_deltas(result: &ExplanationResult) -> Vec<RankedAttribute> {
    let mut out: Vec<RankedAttribute> = result
        .initial_weights
        .iter()
        .zip(&result.weights)
        .enumerate()
        .flat_map(|(c, (w0, w1))| {
            w0.iter().zip(w1).enumerate().map(move |(k, (a, b))| RankedAttribute { class: c, index: k, delta: a - b })
        })
        .collect();
    out.sort_by(|a, b| b.delta.total_cmp(&a.delta));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopAttribute {
    pub class: String,
    pub attribute: String,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleExplanation {
    pub sample_id: String,
    pub f_pred: usize,
    pub pim_pred: usize,
    pub initial_kl: f64,
    pub final_kl: f64,
    pub top_k: Vec<TopAttribute>,
}

pub fn explain_sample(
    sample_id: &str,
    head: &PimHead,
    classifier: &dyn TaskClassifier,
    bank: &AttributeBank,
    image: &Image,
    opts: &ExplainOptions,
    top_k: usize,
) -> Result<SampleExplanation> {
    let p_f = classifier.predict_proba(image)?;
    let q = crate::pim::pim_predict(head, classifier, image)?;
    let result = fit_attribute_weights(head, classifier, image, &p_f, opts)?;
    let top = rank_attribute_deltas(&result)
        .into_iter()
        .take(top_k)
        .map(|r| TopAttribute {
            class: bank.classes()[r.class].clone(),
            attribute: bank.attributes(r.class)[r.index].clone(),
            delta: r.delta,
        })
        .collect();
    Ok(SampleExplanation {
        sample_id: sample_id.to_string(),
        f_pred: argmax(&p_f),
        pim_pred: argmax(&q),
        initial_kl: result.initial_kl,
        final_kl: result.final_kl,
        top_k: top,
    })
}

/// A few lines per sample naming the attributes the classifier overlooked.
pub fn render_summary(explanations: &[SampleExplanation], classes: &[String]) -> String {
    let mut s = String::new();
    for e in explanations {
        let _ = writeln!(
            s,
            "{}: classifier says '{}', PIM says '{}' (KL {:.4} -> {:.4})",
            e.sample_id, classes[e.f_pred], classes[e.pim_pred], e.initial_kl, e.final_kl
        );
        for t in e.top_k.iter().filter(|t| t.delta > 0.0) {
            let _ = writeln!(s, "  reduced '{}' ({}) by {:.3}", t.attribute, t.class, t.delta);
        }
    }
    s
}
