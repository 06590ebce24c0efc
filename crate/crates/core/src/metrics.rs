//! Threshold calibration, the failure decision, and FR / SR / MCC.
//!
//! The positive class is "failure": a sample whose score falls below the
//! threshold is flagged, and a flag is a true positive when the classifier
//! was in fact wrong.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::scoring::{ScoreRecord, ScorerId};

/// Guards `ceil(acc * N)` against products like `0.7 * 10 = 7.000000000000001`.
const RANK_SLACK: f64 = 1e-9;

/// `tau` may be `+inf` (everything is a failure); JSON stores it as `"inf"`.
/// Pooled per-domain metrics carry a NaN `tau`, stored as `"nan"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    #[serde(serialize_with = "ser_tau", deserialize_with = "de_tau")]
    pub tau: f64,
    pub scorer: ScorerId,
    pub calibration_set_id: String,
    pub val_accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
}

fn ser_tau<S: Serializer>(tau: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if tau.is_infinite() && *tau > 0.0 {
        s.serialize_str("inf")
    } else if tau.is_nan() {
        s.serialize_str("nan")
    } else {
        s.serialize_f64(*tau)
    }
}

fn de_tau<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Tau {
        Num(f64),
        Text(String),
    }
    match Tau::deserialize(d)? {
        Tau::Num(v) => Ok(v),
        Tau::Text(t) if t == "inf" => Ok(f64::INFINITY),
        Tau::Text(t) if t == "nan" => Ok(f64::NAN),
        Tau::Text(t) => Err(serde::de::Error::custom(format!("invalid threshold '{t}'"))),
    }
}

/// The `⌈acc·N⌉`-th largest score, or `+inf` when that rank is zero.
pub fn calibrate_tau(scores: &[f64], val_accuracy: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::validation("cannot calibrate on an empty score list"));
    }
    if !(0.0..=1.0).contains(&val_accuracy) {
        return Err(Error::validation(format!("accuracy {val_accuracy} outside [0,1]")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("NaN score in calibration set".into()));
    }
    let n = scores.len();
    let k = ((val_accuracy * n as f64) - RANK_SLACK).ceil().max(0.0) as usize;
    if k == 0 {
        return Ok(f64::INFINITY);
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    Ok(sorted[k.min(n) - 1])
}

/// Calibrates on validation records of one scorer, matching the classifier's
/// accuracy on those records.
pub fn calibrate_threshold(records: &[ScoreRecord], calibration_set_id: &str) -> Result<Threshold> {
    let scorer = single_scorer(records)?;
    let acc = records.iter().filter(|r| r.correct).count() as f64 / records.len() as f64;
    let scores: Vec<f64> = records.iter().map(|r| r.score).collect();
    Ok(Threshold {
        tau: calibrate_tau(&scores, acc)?,
        scorer,
        calibration_set_id: calibration_set_id.to_string(),
        val_accuracy: acc,
        domain: None,
    })
}

/// One threshold per domain; `domain_of` maps a sample id to its domain.
pub fn calibrate_per_domain(
    records: &[ScoreRecord],
    calibration_set_id: &str,
    domain_of: impl Fn(&str) -> Option<String>,
) -> Result<Vec<Threshold>> {
    let mut groups: BTreeMap<String, Vec<ScoreRecord>> = BTreeMap::new();
    for r in records {
        let d = domain_of(&r.sample_id)
            .ok_or_else(|| Error::validation(format!("sample '{}' has no domain", r.sample_id)))?;
        groups.entry(d).or_default().push(r.clone());
    }
    groups
        .into_iter()
        .map(|(d, recs)| {
            let mut t = calibrate_threshold(&recs, calibration_set_id)?;
            t.domain = Some(d);
            Ok(t)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Failure,
    Success,
}

pub fn detect(score: f64, tau: f64) -> Decision {
    if score < tau {
        Decision::Failure
    } else {
        Decision::Success
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub fp: u64,
}

impl ConfusionCounts {
    pub fn add(&mut self, decision: Decision, correct: bool) {
        match (decision, correct) {
            (Decision::Failure, false) => self.tp += 1,
            (Decision::Success, false) => self.fn_ += 1,
            (Decision::Success, true) => self.tn += 1,
            (Decision::Failure, true) => self.fp += 1,
        }
    }

    /// Failure recall; 1 when nothing was misclassified.
    pub fn fr(&self) -> f64 {
        ratio_or_one(self.tp, self.tp + self.fn_)
    }

    /// Success recall; 1 when nothing was classified correctly.
    pub fn sr(&self) -> f64 {
        ratio_or_one(self.tn, self.tn + self.fp)
    }

    /// Matthews correlation; 0 when any marginal is empty.
    pub fn mcc(&self) -> f64 {
        let (tp, fn_, tn, fp) = (self.tp as f64, self.fn_ as f64, self.tn as f64, self.fp as f64);
        let den = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
        if den == 0.0 {
            0.0
        } else {
            (tp * tn - fp * fn_) / den.sqrt()
        }
    }
}

fn ratio_or_one(a: u64, b: u64) -> f64 {
    if b == 0 {
        1.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerMetrics {
    pub scorer: ScorerId,
    #[serde(serialize_with = "ser_tau", deserialize_with = "de_tau")]
    pub tau: f64,
    pub fr: f64,
    pub sr: f64,
    pub mcc: f64,
    pub counts: ConfusionCounts,
}

fn single_scorer(records: &[ScoreRecord]) -> Result<ScorerId> {
    let first = records.first().ok_or_else(|| Error::validation("no score records"))?;
    if records.iter().any(|r| r.scorer != first.scorer) {
        return Err(Error::validation("records mix several scorers"));
    }
    Ok(first.scorer)
}

fn metrics_from(scorer: ScorerId, tau: f64, counts: ConfusionCounts) -> ScorerMetrics {
    ScorerMetrics { scorer, tau, fr: counts.fr(), sr: counts.sr(), mcc: counts.mcc(), counts }
}

pub fn evaluate(records: &[ScoreRecord], threshold: &Threshold) -> Result<ScorerMetrics> {
    let scorer = single_scorer(records)?;
    if scorer != threshold.scorer {
        return Err(Error::validation(format!("threshold is for {} but records are {scorer}", threshold.scorer)));
    }
    let mut counts = ConfusionCounts::default();
    for r in records {
        counts.add(detect(r.score, threshold.tau), r.correct);
    }
    Ok(metrics_from(scorer, threshold.tau, counts))
}

/// Evaluates each record against its domain's threshold and pools the counts.
/// The reported `tau` is NaN since no single threshold applies.
pub fn evaluate_per_domain(
    records: &[ScoreRecord],
    thresholds: &[Threshold],
    domain_of: impl Fn(&str) -> Option<String>,
) -> Result<ScorerMetrics> {
    let scorer = single_scorer(records)?;
    let mut counts = ConfusionCounts::default();
    for r in records {
        let d = domain_of(&r.sample_id);
        let t = thresholds
            .iter()
            .find(|t| t.scorer == scorer && t.domain == d)
            .ok_or_else(|| Error::MissingArtifact(format!("{scorer} threshold for domain {d:?}")))?;
        counts.add(detect(r.score, t.tau), r.correct);
    }
    Ok(metrics_from(scorer, f64::NAN, counts))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub fingerprint: String,
    pub dataset_id: String,
    pub calibration_set_id: String,
    pub entries: Vec<ScorerMetrics>,
}

impl EvaluationReport {
    pub fn entry(&self, scorer: ScorerId) -> Option<&ScorerMetrics> {
        self.entries.iter().find(|e| e.scorer == scorer)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<12} {:>10} {:>7} {:>7} {:>7} {:>6} {:>6} {:>6} {:>6}",
            "scorer", "tau", "FR", "SR", "MCC", "tp", "fn", "tn", "fp"
        );
        for e in &self.entries {
            let c = e.counts;
            let _ = writeln!(
                s,
                "{:<12} {:>10.4} {:>7.4} {:>7.4} {:>7.4} {:>6} {:>6} {:>6} {:>6}",
                e.scorer.as_str(),
                e.tau,
                e.fr,
                e.sr,
                e.mcc,
                c.tp,
                c.fn_,
                c.tn,
                c.fp
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(score: f64, correct: bool) -> ScoreRecord {
        ScoreRecord {
            sample_id: format!("{score}"),
            scorer: ScorerId::Msp,
            score,
            f_pred: if correct { 0 } else { 1 },
            label: 0,
            correct,
        }
    }

    fn brute_force_tau(scores: &[f64], acc: f64) -> f64 {
        // the largest candidate whose accept count reaches the target rank
        let target = ((acc * scores.len() as f64) - 1e-9).ceil() as usize;
        if target == 0 {
            return f64::INFINITY;
        }
        scores
            .iter()
            .copied()
            .filter(|&t| scores.iter().filter(|&&s| s >= t).count() >= target)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    #[test]
    fn calibration_examples() {
        let scores: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(calibrate_tau(&scores, 0.7).unwrap(), 4.0);
        assert_eq!(brute_force_tau(&scores, 0.7), 4.0);
        assert_eq!(scores.iter().filter(|s| **s >= 4.0).count(), 7);
        assert_eq!(calibrate_tau(&scores, 1.0).unwrap(), 1.0);
        assert_eq!(calibrate_tau(&scores, 0.0).unwrap(), f64::INFINITY);
        assert!(calibrate_tau(&[], 0.5).is_err());
        assert!(calibrate_tau(&[1.0], 1.5).is_err());
    }

    #[test]
    fn detect_boundaries() {
        assert_eq!(detect(0.5, 0.5), Decision::Success);
        assert_eq!(detect(0.5 - 1e-9, 0.5), Decision::Failure);
        assert_eq!(detect(1e300, f64::INFINITY), Decision::Failure);
    }

    #[test]
    fn metric_examples() {
        let perfect = ConfusionCounts { tp: 5, fn_: 0, tn: 5, fp: 0 };
        assert_eq!((perfect.fr(), perfect.sr(), perfect.mcc()), (1.0, 1.0, 1.0));
        let all_fail = ConfusionCounts { tp: 4, fn_: 0, tn: 0, fp: 6 };
        assert_eq!((all_fail.sr(), all_fail.mcc()), (0.0, 0.0));
        let c = ConfusionCounts { tp: 3, fn_: 2, tn: 4, fp: 1 };
        assert!((c.mcc() - 10.0 / 600f64.sqrt()).abs() < 1e-15);
        let none_wrong = ConfusionCounts { tp: 0, fn_: 0, tn: 3, fp: 1 };
        assert_eq!(none_wrong.fr(), 1.0);
    }

    #[test]
    fn threshold_json_handles_infinity() {
        let t = Threshold {
            tau: f64::INFINITY,
            scorer: ScorerId::Decider,
            calibration_set_id: "val".into(),
            val_accuracy: 0.0,
            domain: None,
        };
        let text = serde_json::to_string(&t).unwrap();
        assert!(text.contains("\"tau\":\"inf\""));
        assert_eq!(serde_json::from_str::<Threshold>(&text).unwrap(), t);
        let t = Threshold { tau: -0.25, ..t };
        assert_eq!(serde_json::from_str::<Threshold>(&serde_json::to_string(&t).unwrap()).unwrap(), t);
    }

    #[test]
    fn evaluation_uses_threshold() {
        let recs = vec![rec(0.9, true), rec(0.8, true), rec(0.3, false), rec(0.6, false), rec(0.2, true)];
        let t = calibrate_threshold(&recs, "val").unwrap();
        assert_eq!(t.val_accuracy, 0.6);
        assert_eq!(t.tau, 0.6);
        let m = evaluate(&recs, &t).unwrap();
        assert_eq!(m.counts, ConfusionCounts { tp: 1, fn_: 1, tn: 2, fp: 1 });
        let mut other = t.clone();
        other.scorer = ScorerId::Gde;
        assert!(evaluate(&recs, &other).is_err());
        assert!(evaluate(&[], &t).is_err());
    }

    #[test]
    fn per_domain_thresholds() {
        let recs = vec![rec(0.9, true), rec(0.1, false), rec(5.0, true), rec(4.0, false)];
        let dom = |id: &str| Some(if id.parse::<f64>().unwrap() < 1.0 { "a".to_string() } else { "b".to_string() });
        let ts = calibrate_per_domain(&recs, "val", dom).unwrap();
        assert_eq!(ts.len(), 2);
        assert_eq!((ts[0].tau, ts[1].tau), (0.9, 5.0));
        let m = evaluate_per_domain(&recs, &ts, dom).unwrap();
        assert_eq!(m.mcc, 1.0);
    }

    proptest! {
        #[test]
        fn calibration_matches_brute_force(scores in proptest::collection::vec(-5i32..5, 1..60), acc in 0.0f64..=1.0) {
            let s: Vec<f64> = scores.iter().map(|v| *v as f64 * 0.5).collect();
            let tau = calibrate_tau(&s, acc).unwrap();
            prop_assert_eq!(tau, brute_force_tau(&s, acc));
            let n = s.len() as f64;
            let accepted = s.iter().filter(|v| **v >= tau).count() as f64;
            let ties = if tau.is_finite() { s.iter().filter(|v| **v == tau).count() as f64 } else { 0.0 };
            prop_assert!((accepted / n - acc).abs() <= 1.0 / n + ties / n + 1e-12);
        }

        #[test]
        fn raising_tau_is_monotone(pairs in proptest::collection::vec((0.0f64..1.0, proptest::bool::ANY), 1..80), t1 in 0.0f64..1.0, dt in 0.0f64..0.5) {
            let tally = |tau: f64| {
                let mut c = ConfusionCounts::default();
                pairs.iter().for_each(|(s, ok)| c.add(detect(*s, tau), *ok));
                c
            };
            let (lo, hi) = (tally(t1), tally(t1 + dt));
            prop_assert!(hi.sr() <= lo.sr());
            prop_assert!(hi.fr() >= lo.fr());
        }

        #[test]
        fn mcc_symmetries(tp in 0u64..50, fn_ in 0u64..50, tn in 0u64..50, fp in 0u64..50) {
            let c = ConfusionCounts { tp, fn_, tn, fp };
            let swapped = ConfusionCounts { tp: tn, fn_: fp, tn: tp, fp: fn_ };
            let flipped = ConfusionCounts { tp: fn_, fn_: tp, tn: fp, fp: tn };
            prop_assert!((c.mcc() - swapped.mcc()).abs() < 1e-12);
            prop_assert!((c.mcc() + flipped.mcc()).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&c.mcc()));
        }
    }
}
