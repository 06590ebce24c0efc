//! Per-sample success scores. Every scorer follows one convention: a higher
//! score means the classifier's prediction is more likely correct.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::TaskClassifier;
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::nn::{argmax, logsumexp, softmax};
use crate::pim::PimHead;

/// Lower bound applied to PIM probabilities before taking their log.
pub const DECIDER_EPS: f64 = 1e-12;
const PROB_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerId {
    Msp,
    NegEntropy,
    NegEnergy,
    Gde,
    Decider,
}

impl ScorerId {
    pub const ALL: [ScorerId; 5] =
        [ScorerId::Msp, ScorerId::NegEntropy, ScorerId::NegEnergy, ScorerId::Gde, ScorerId::Decider];

    pub fn as_str(self) -> &'static str {
        match self {
            ScorerId::Msp => "msp",
            ScorerId::NegEntropy => "neg_entropy",
            ScorerId::NegEnergy => "neg_energy",
            ScorerId::Gde => "gde",
            ScorerId::Decider => "decider",
        }
    }
}

impl fmt::Display for ScorerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScorerId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScorerId::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| Error::validation(format!("unknown scorer '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub sample_id: String,
    pub scorer: ScorerId,
    pub score: f64,
    pub f_pred: usize,
    pub label: usize,
    pub correct: bool,
}

fn check_probs(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::validation("empty probability vector"));
    }
    if p.iter().any(|v| !v.is_finite() || *v < -PROB_TOL) {
        return Err(Error::validation("probability vector has negative or non-finite entries"));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > PROB_TOL {
        return Err(Error::validation(format!("probabilities sum to {s}, not 1")));
    }
    Ok(())
}

pub fn score_msp(probs: &[f64]) -> Result<f64> {
    check_probs(probs)?;
    Ok(probs.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

/// `Σ p ln p`, with `0 ln 0 = 0`.
pub fn score_neg_entropy(probs: &[f64]) -> Result<f64> {
    check_probs(probs)?;
    Ok(probs.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum())
}

/// `T · logsumexp(logits / T)`.
pub fn score_neg_energy(logits: &[f64], t: f64) -> Result<f64> {
    if logits.is_empty() || logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::validation("logits must be finite and non-empty"));
    }
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::validation("energy temperature must be positive"));
    }
    let scaled: Vec<f64> = logits.iter().map(|l| l / t).collect();
    Ok(t * logsumexp(&scaled))
}

/// Negated mean pairwise disagreement of ensemble predictions.
pub fn score_gde(preds: &[usize]) -> Result<f64> {
    let r = preds.len();
    if r < 2 {
        return Err(Error::validation("GDE needs at least two ensemble members"));
    }
    let mut total = 0.0;
    for i in 0..r {
        let dis = (0..r).filter(|&j| j != i && preds[i] != preds[j]).count();
        total += dis as f64 / (r - 1) as f64;
    }
    Ok(-total / r as f64)
}

/// `Σ_c p_c ln max(q_c, ε)`: the negated cross-entropy of PIM's `q` under
/// the classifier's `p`.
pub fn score_decider(p_f: &[f64], q_pim: &[f64]) -> Result<f64> {
    if p_f.len() != q_pim.len() {
        return Err(Error::DimMismatch { expected: p_f.len(), actual: q_pim.len() });
    }
    check_probs(p_f)?;
    check_probs(q_pim)?;
    Ok(p_f.iter().zip(q_pim).filter(|(p, _)| **p > 0.0).map(|(p, q)| p * q.max(DECIDER_EPS).ln()).sum())
}

/// Independently trained classifiers; GDE compares their predictions.
pub struct Ensemble {
    pub members: Vec<Box<dyn TaskClassifier>>,
}

impl Ensemble {
    pub fn new(members: Vec<Box<dyn TaskClassifier>>) -> Result<Self> {
        if members.len() < 2 {
            return Err(Error::validation("an ensemble needs at least two members"));
        }
        let c = members[0].num_classes();
        if members.iter().any(|m| m.num_classes() != c) {
            return Err(Error::validation("ensemble members disagree on the class count"));
        }
        Ok(Self { members })
    }

    pub fn predictions(&self, image: &crate::image::Image) -> Result<Vec<usize>> {
        self.members.iter().map(|m| m.predict(image)).collect()
    }
}

/// Models available to the scorers. `pim` is required for DECIDER and
/// `ensemble` for GDE.
pub struct ScoringContext<'a> {
    pub classifier: &'a dyn TaskClassifier,
    pub pim: Option<&'a PimHead>,
    pub ensemble: Option<&'a Ensemble>,
    pub energy_temperature: f64,
}

impl<'a> ScoringContext<'a> {
    pub fn new(classifier: &'a dyn TaskClassifier) -> Self {
        Self { classifier, pim: None, ensemble: None, energy_temperature: 1.0 }
    }

    fn score_one(&self, scorer: ScorerId, sample: &Sample) -> Result<ScoreRecord> {
        let logits = self.classifier.predict_logits(&sample.image)?;
        let p = softmax(&logits);
        let f_pred = argmax(&p);
        let score = match scorer {
            ScorerId::Msp => score_msp(&p)?,
            ScorerId::NegEntropy => score_neg_entropy(&p)?,
            ScorerId::NegEnergy => score_neg_energy(&logits, self.energy_temperature)?,
            ScorerId::Gde => {
                let ens = self.ensemble.ok_or_else(|| Error::MissingArtifact("ensemble for the gde scorer".into()))?;
                score_gde(&ens.predictions(&sample.image)?)?
            }
            ScorerId::Decider => {
                let pim =
                    self.pim.ok_or_else(|| Error::MissingArtifact("PIM checkpoint for the decider scorer".into()))?;
                let q = crate::pim::pim_predict(pim, self.classifier, &sample.image)?;
                score_decider(&p, &q)?
            }
        };
        if !score.is_finite() {
            return Err(Error::NonFinite(format!("{scorer} score for '{}'", sample.id)));
        }
        Ok(ScoreRecord {
            sample_id: sample.id.clone(),
            scorer,
            score,
            f_pred,
            label: sample.label,
            correct: f_pred == sample.label,
        })
    }
}

/// One record per sample, in input order.
pub fn score_dataset(scorer: ScorerId, ctx: &ScoringContext<'_>, samples: &[&Sample]) -> Result<Vec<ScoreRecord>> {
    let nc = ctx.classifier.num_classes();
    if let Some(pim) = ctx.pim {
        if pim.num_classes() != nc {
            return Err(Error::Shape(format!("PIM has {} classes, classifier {nc}", pim.num_classes())));
        }
    }
    if let Some(s) = samples.iter().find(|s| s.label >= nc) {
        return Err(Error::validation(format!("sample '{}' label {} out of range", s.id, s.label)));
    }
    samples.par_iter().map(|s| ctx.score_one(scorer, s)).collect()
}

const CSV_HEADER: [&str; 6] = ["sample_id", "scorer", "score", "f_pred", "label", "correct"];

/// Writes a CSV whose first line is `# fingerprint: <hex>`.
pub fn write_scores_csv(path: &Path, records: &[ScoreRecord], fingerprint: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path)?;
    writeln!(f, "# fingerprint: {fingerprint}")?;
    let mut w = csv::Writer::from_writer(f);
    w.write_record(CSV_HEADER)?;
    for r in records {
        w.write_record([
            r.sample_id.clone(),
            r.scorer.to_string(),
            format!("{:?}", r.score),
            r.f_pred.to_string(),
            r.label.to_string(),
            r.correct.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Returns the fingerprint line (empty if absent) and the records.
pub fn read_scores_csv(path: &Path) -> Result<(String, Vec<ScoreRecord>)> {
    if !path.exists() {
        return Err(Error::MissingArtifact(format!("missing scores: {}", path.display())));
    }
    let mut first = String::new();
    BufReader::new(fs::File::open(path)?).read_line(&mut first)?;
    let fingerprint = first.trim().strip_prefix("# fingerprint:").map(|s| s.trim().to_string()).unwrap_or_default();
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    if header != CSV_HEADER {
        return Err(Error::Parse { path: path.to_path_buf(), message: format!("unexpected header {header:?}") });
    }
    let mut out = Vec::new();
    for rec in r.deserialize() {
        let rec: ScoreRecord = rec?;
        if rec.correct != (rec.f_pred == rec.label) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                message: format!("record '{}' has inconsistent correct flag", rec.sample_id),
            });
        }
        out.push(rec);
    }
    Ok((fingerprint, out))
}

#[derive(Serialize)]
struct JsonlRecord<'a> {
    #[serde(flatten)]
    record: &'a ScoreRecord,
    fingerprint: &'a str,
}

pub fn write_scores_jsonl(path: &Path, records: &[ScoreRecord], fingerprint: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path)?;
    for record in records {
        writeln!(f, "{}", serde_json::to_string(&JsonlRecord { record, fingerprint })?)?;
    }
    Ok(())
}
