//! PIM training: augmented, loss-reweighted cross-entropy against the labels.
//!
//! The task classifier is frozen, so the tap features and predictions of the
//! clean training images are computed once. Each batch may be replaced by a
//! CutMix or AugMix version, in which case the features are recomputed from
//! the augmented pixels.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{augmix_rng, cutmix_rng, AugMixConfig};
use crate::classifier::TaskClassifier;
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::nn::{argmax, Tensor};
use crate::optim::{accumulate, MultiStepLr, Optimizer, OptimizerKind};
use crate::pim::PimHead;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub optimizer: OptimizerKind,
    pub aug_prob_cutmix: f64,
    pub aug_prob_augmix: f64,
    pub augmix: AugMixConfig,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 0.1,
            lr_decay_epochs: vec![60, 120, 160],
            lr_decay_factor: 0.1,
            optimizer: OptimizerKind::adamw_default(),
            aug_prob_cutmix: 0.2,
            aug_prob_augmix: 0.2,
            augmix: AugMixConfig::default(),
            batch_size: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("aug_prob_cutmix", self.aug_prob_cutmix), ("aug_prob_augmix", self.aug_prob_augmix)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::validation(format!("{name} = {p} is not a probability")));
            }
        }
        if self.lr_decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::validation("lr_decay_epochs must be strictly increasing"));
        }
        if let Some(last) = self.lr_decay_epochs.last() {
            if *last >= self.epochs {
                return Err(Error::validation(format!(
                    "lr decay epoch {last} is not below the epoch count {}",
                    self.epochs
                )));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::validation("lr must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be positive"));
        }
        self.augmix.validate()
    }

    pub fn schedule(&self) -> MultiStepLr {
        MultiStepLr { base: self.lr, milestones: self.lr_decay_epochs.clone(), factor: self.lr_decay_factor }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeightPolicy {
    pub w_f_correct_pim_wrong: f64,
    pub w_both_wrong: f64,
    pub w_default: f64,
}

impl Default for LossWeightPolicy {
    fn default() -> Self {
        Self { w_f_correct_pim_wrong: 2.0, w_both_wrong: 1.5, w_default: 1.0 }
    }
}

impl LossWeightPolicy {
    pub fn uniform() -> Self {
        Self { w_f_correct_pim_wrong: 1.0, w_both_wrong: 1.0, w_default: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.w_f_correct_pim_wrong, self.w_both_wrong, self.w_default].iter().all(|w| *w > 0.0 && w.is_finite()) {
            Ok(())
        } else {
            Err(Error::validation("loss weights must be positive"))
        }
    }
}

pub fn sample_loss_weights(f_correct: &[bool], pim_correct: &[bool], policy: &LossWeightPolicy) -> Result<Vec<f64>> {
    if f_correct.len() != pim_correct.len() {
        return Err(Error::Shape(format!("{} classifier flags but {} PIM flags", f_correct.len(), pim_correct.len())));
    }
    Ok(f_correct
        .iter()
        .zip(pim_correct)
        .map(|(f, p)| match (f, p) {
            (true, false) => policy.w_f_correct_pim_wrong,
            (false, false) => policy.w_both_wrong,
            _ => policy.w_default,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean weighted loss over the epoch's samples.
    pub loss: f64,
    /// PIM accuracy on the clean images, measured before each batch update.
    pub pim_acc: f64,
    /// Fraction of clean images where PIM and the classifier predict the same class.
    pub agree_rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub lr: f64,
    pub running_loss: f64,
    pub log: Vec<EpochLog>,
}

/// One training example as seen by the loss: tapped features, a pair of
/// targets mixed by `lambda`, and a loss weight.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub features: Tensor,
    pub y1: usize,
    pub y2: usize,
    pub lambda: f64,
    pub weight: f64,
}

/// `w · (λ·CE(q, y1) + (1 − λ)·CE(q, y2))`, accumulating its gradient.
pub fn item_loss(head: &PimHead, item: &TrainItem, grad: &mut [f64]) -> Result<f64> {
    let trace = head.trace(&item.features)?;
    let q = &trace.probs;
    let ce = |y: usize| -q[y].max(1e-300).ln();
    let loss = item.weight * (item.lambda * ce(item.y1) + (1.0 - item.lambda) * ce(item.y2));
    let mut d = q.clone();
    d[item.y1] -= item.lambda;
    d[item.y2] -= 1.0 - item.lambda;
    d.iter_mut().for_each(|v| *v *= item.weight);
    head.backward(&trace, &d, grad);
    Ok(loss)
}

/// Summed weighted loss and gradient over `items`.
pub fn batch_loss_and_grad(head: &PimHead, items: &[TrainItem]) -> Result<(f64, Vec<f64>)> {
    accumulate(items, head.branch.num_params(), |item, g| item_loss(head, item, g))
}

pub fn write_log_jsonl(path: &Path, log: &[EpochLog]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path)?;
    for rec in log {
        writeln!(f, "{}", serde_json::to_string(rec)?)?;
    }
    Ok(())
}

enum BatchAug {
    None,
    CutMix,
    AugMix,
}

/// Trains `head` in place. Parallel gradient sums use a fixed reduction order,
/// so the result depends only on the seed; it may still differ across
/// platforms whose floating-point libraries round `exp`/`ln` differently.
pub fn train_pim(
    head: &mut PimHead,
    classifier: &dyn TaskClassifier,
    data: &[&Sample],
    cfg: &TrainConfig,
    policy: &LossWeightPolicy,
) -> Result<TrainState> {
    cfg.validate()?;
    policy.validate()?;
    if data.is_empty() {
        return Err(Error::validation("empty training set"));
    }
    let nc = head.num_classes();
    if let Some(s) = data.iter().find(|s| s.label >= nc) {
        return Err(Error::validation(format!("sample '{}' label {} out of range", s.id, s.label)));
    }
    let layer = head.config.tap_layer.clone();
    let clean: Vec<(Tensor, usize)> = data
        .par_iter()
        .map(|s| {
            let feats = classifier.tap(&s.image, &layer)?;
            let pred = classifier.predict(&s.image)?;
            Ok((feats, pred))
        })
        .collect::<Result<_>>()?;

    let schedule = cfg.schedule();
    let mut opt = Optimizer::new(cfg.optimizer.clone(), head.branch.num_params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut state = TrainState::default();

    for epoch in 0..cfg.epochs {
        let lr = schedule.lr_at(epoch);
        state.epoch = epoch;
        state.lr = lr;
        order.shuffle(&mut rng);
        let (mut loss_sum, mut hits, mut agree) = (0.0, 0usize, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let clean_preds: Vec<usize> = batch
                .par_iter()
                .map(|&i| Ok(argmax(&head.predict_from_features(&clean[i].0)?)))
                .collect::<Result<_>>()?;
            let f_correct: Vec<bool> = batch.iter().map(|&i| clean[i].1 == data[i].label).collect();
            let pim_correct: Vec<bool> = batch.iter().zip(&clean_preds).map(|(&i, p)| *p == data[i].label).collect();
            hits += pim_correct.iter().filter(|c| **c).count();
            agree += batch.iter().zip(&clean_preds).filter(|(&i, p)| clean[i].1 == **p).count();
            let weights = sample_loss_weights(&f_correct, &pim_correct, policy)?;

            let aug = if rng.gen::<f64>() < cfg.aug_prob_cutmix && batch.len() >= 2 {
                BatchAug::CutMix
            } else if rng.gen::<f64>() < cfg.aug_prob_augmix {
                BatchAug::AugMix
            } else {
                BatchAug::None
            };
            let labels: Vec<usize> = batch.iter().map(|&i| data[i].label).collect();
            let items: Vec<TrainItem> = match aug {
                BatchAug::None => batch
                    .iter()
                    .zip(&weights)
                    .map(|(&i, &w)| TrainItem {
                        features: clean[i].0.clone(),
                        y1: data[i].label,
                        y2: data[i].label,
                        lambda: 1.0,
                        weight: w,
                    })
                    .collect(),
                BatchAug::CutMix => {
                    let images: Vec<_> = batch.iter().map(|&i| data[i].image.clone()).collect();
                    let mixed = cutmix_rng(&images, &labels, &mut rng)?;
                    let feats = tap_all(classifier, &mixed.images, &layer)?;
                    feats
                        .into_iter()
                        .zip(&mixed.label_pairs)
                        .zip(&weights)
                        .map(|((features, &(y1, y2)), &w)| TrainItem {
                            features,
                            y1,
                            y2,
                            lambda: mixed.lambda,
                            weight: w,
                        })
                        .collect()
                }
                BatchAug::AugMix => {
                    let seeds: Vec<u64> = batch.iter().map(|_| rng.gen()).collect();
                    let images: Vec<_> = batch
                        .par_iter()
                        .zip(&seeds)
                        .map(|(&i, &s)| {
                            augmix_rng(&data[i].image, &cfg.augmix, None, &mut ChaCha8Rng::seed_from_u64(s))
                        })
                        .collect::<Result<_>>()?;
                    let feats = tap_all(classifier, &images, &layer)?;
                    feats
                        .into_iter()
                        .zip(&labels)
                        .zip(&weights)
                        .map(|((features, &y), &w)| TrainItem { features, y1: y, y2: y, lambda: 1.0, weight: w })
                        .collect()
                }
            };

            let (loss, mut grad) = batch_loss_and_grad(head, &items).map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch}: {m}")),
                other => other,
            })?;
            let n = items.len() as f64;
            grad.iter_mut().for_each(|g| *g /= n);
            opt.step(&mut head.branch.params, &grad, lr);
            loss_sum += loss;
            state.running_loss = loss / n;
        }
        let n = data.len() as f64;
        state.log.push(EpochLog {
            epoch,
            lr,
            loss: loss_sum / n,
            pim_acc: hits as f64 / n,
            agree_rate: agree as f64 / n,
        });
    }
    Ok(state)
}

fn tap_all(classifier: &dyn TaskClassifier, images: &[crate::image::Image], layer: &str) -> Result<Vec<Tensor>> {
    images.par_iter().map(|im| classifier.tap(im, layer)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{CnnArch, TinyCnn};
    use crate::dataset::Split;
    use crate::embedding::AttributeEmbeddingTable;
    use crate::image::Image;
    use crate::pim::{Aggregation, PimConfig, PimInit};

    fn fixture(aggregation: Aggregation) -> (TinyCnn, PimHead, Vec<Sample>) {
        let arch = CnnArch { input_channels: 3, input_size: 8, widths: vec![4, 6], num_classes: 2 };
        let f = TinyCnn::new(arch, 3).unwrap();
        let d = 8;
        let unit = |i: usize| {
            let mut v = vec![0.0f32; d];
            v[i] = 1.0;
            v
        };
        let table = AttributeEmbeddingTable::from_vectors(
            vec!["a".into(), "b".into()],
            vec![vec![unit(0), unit(1)], vec![unit(2), unit(3), unit(4)]],
        )
        .unwrap();
        let cfg = PimConfig {
            tap_layer: "block1".into(),
            latent_dim: d,
            aggregation,
            init: PimInit::Random { seed: 7 },
            temperature: 0.5,
        };
        let head = PimHead::new(cfg, &f.arch, table, "fp", Some(&f)).unwrap();
        let samples = (0..32)
            .map(|i| {
                let label = i % 2;
                let mut img = Image::new(3, 8, 8);
                for y in 0..8 {
                    for x in 0..8 {
                        let bright = if label == 0 { y < 4 } else { x < 4 };
                        let v = if bright { 0.9 } else { 0.1 } + 0.003 * i as f64;
                        (0..3).for_each(|c| img.set(c, y, x, v));
                    }
                }
                Sample { id: format!("s{i}"), image: img, label, nuisance: None, split: Split::Train, domain: None }
            })
            .collect();
        (f, head, samples)
    }

    #[test]
    fn paper_loss_weights() {
        let w =
            sample_loss_weights(&[true, false, true, false], &[false, false, true, true], &LossWeightPolicy::default())
                .unwrap();
        assert_eq!(w, vec![2.0, 1.5, 1.0, 1.0]);
        assert!(sample_loss_weights(&[true], &[], &LossWeightPolicy::default()).is_err());
    }

    #[test]
    fn schedule_matches_paper() {
        let s = TrainConfig::default().schedule();
        assert_eq!(s.lr_at(0), 0.1);
        assert!((s.lr_at(59) - 0.1).abs() < 1e-15);
        assert!((s.lr_at(61) - 0.01).abs() < 1e-15);
        assert!((s.lr_at(130) - 0.001).abs() < 1e-15);
        assert!((s.lr_at(199) - 1e-4).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig { aug_prob_cutmix: 1.5, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { lr_decay_epochs: vec![60, 60], ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { epochs: 100, lr_decay_epochs: vec![60, 120], ..Default::default() };
        assert!(bad.validate().is_err());
        assert!(LossWeightPolicy { w_both_wrong: 0.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn weighted_sum_matches_unweighted_recomputation() {
        let (f, head, samples) = fixture(Aggregation::Mean);
        let weights = [2.0, 1.5, 1.0, 1.0, 2.0, 1.5];
        let items: Vec<TrainItem> = samples[..6]
            .iter()
            .zip(weights)
            .map(|(s, w)| TrainItem {
                features: f.tap(&s.image, "block1").unwrap(),
                y1: s.label,
                y2: s.label,
                lambda: 1.0,
                weight: w,
            })
            .collect();
        let (total, _) = batch_loss_and_grad(&head, &items).unwrap();
        let oracle: f64 =
            items.iter().map(|it| it.weight * -head.predict_from_features(&it.features).unwrap()[it.y1].ln()).sum();
        assert!((total - oracle).abs() < 1e-12);
    }

    fn gradient_check(aggregation: Aggregation) {
        let (f, mut head, samples) = fixture(aggregation);
        let items: Vec<TrainItem> = samples[..4]
            .iter()
            .enumerate()
            .map(|(k, s)| TrainItem {
                features: f.tap(&s.image, "block1").unwrap(),
                y1: s.label,
                y2: 1 - s.label,
                lambda: if k == 0 { 0.75 } else { 1.0 },
                weight: [2.0, 1.5, 1.0, 1.0][k],
            })
            .collect();
        let (_, grad) = batch_loss_and_grad(&head, &items).unwrap();
        let proj = head.branch.layer_param_range(head.projection_layer());
        let h = 1e-4;
        for p in proj.step_by(7) {
            let orig = head.branch.params[p];
            head.branch.params[p] = orig + h;
            let up = batch_loss_and_grad(&head, &items).unwrap().0;
            head.branch.params[p] = orig - h;
            let down = batch_loss_and_grad(&head, &items).unwrap().0;
            head.branch.params[p] = orig;
            let fd = (up - down) / (2.0 * h);
            let rel = (fd - grad[p]).abs() / fd.abs().max(grad[p].abs()).max(1e-8);
            assert!(rel < 1e-4, "param {p}: analytic {} vs numeric {fd}", grad[p]);
        }
    }

    #[test]
    fn projection_gradient_matches_finite_differences_mean() {
        gradient_check(Aggregation::Mean);
    }

    #[test]
    fn projection_gradient_matches_finite_differences_max() {
        gradient_check(Aggregation::Max);
    }

    fn quick_cfg(epochs: usize) -> TrainConfig {
        TrainConfig { epochs, lr: 0.01, lr_decay_epochs: vec![], batch_size: 8, seed: 5, ..Default::default() }
    }

    #[test]
    fn zero_epochs_leave_head_unchanged() {
        let (f, mut head, samples) = fixture(Aggregation::Mean);
        let before = head.branch.params.clone();
        let refs: Vec<&Sample> = samples.iter().collect();
        let state = train_pim(&mut head, &f, &refs, &quick_cfg(0), &LossWeightPolicy::default()).unwrap();
        assert!(state.log.is_empty());
        assert_eq!(head.branch.params, before);
    }

    #[test]
    fn one_epoch_reduces_loss_without_augmentation() {
        let (f, mut head, samples) = fixture(Aggregation::Mean);
        let refs: Vec<&Sample> = samples.iter().collect();
        let items = |h: &PimHead| -> f64 {
            let its: Vec<TrainItem> = samples
                .iter()
                .map(|s| TrainItem {
                    features: f.tap(&s.image, "block1").unwrap(),
                    y1: s.label,
                    y2: s.label,
                    lambda: 1.0,
                    weight: 1.0,
                })
                .collect();
            batch_loss_and_grad(h, &its).unwrap().0
        };
        let before = items(&head);
        let cfg = TrainConfig { aug_prob_cutmix: 0.0, aug_prob_augmix: 0.0, ..quick_cfg(1) };
        train_pim(&mut head, &f, &refs, &cfg, &LossWeightPolicy::uniform()).unwrap();
        assert!(items(&head) < before);
    }

    #[test]
    fn training_is_deterministic_with_augmentation() {
        let (f, head, samples) = fixture(Aggregation::Max);
        let refs: Vec<&Sample> = samples.iter().collect();
        let cfg = TrainConfig { aug_prob_cutmix: 0.5, aug_prob_augmix: 0.5, ..quick_cfg(3) };
        let (mut a, mut b) = (head.clone(), head);
        let la = train_pim(&mut a, &f, &refs, &cfg, &LossWeightPolicy::default()).unwrap();
        let lb = train_pim(&mut b, &f, &refs, &cfg, &LossWeightPolicy::default()).unwrap();
        assert_eq!(a.branch.params, b.branch.params);
        assert_eq!(la, lb);
        assert_eq!(la.log.len(), 3);
        assert!(la.log.iter().all(|e| (0.0..=1.0).contains(&e.pim_acc) && (0.0..=1.0).contains(&e.agree_rate)));
    }

    #[test]
    fn log_is_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let log = vec![EpochLog { epoch: 0, lr: 0.1, loss: 0.5, pim_acc: 0.6, agree_rate: 0.7 }];
        let p = dir.path().join("train.jsonl");
        write_log_jsonl(&p, &log).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for key in ["epoch", "lr", "loss", "pim_acc", "agree_rate"] {
            assert!(v.get(key).is_some());
        }
    }

    #[test]
    fn empty_data_is_rejected() {
        let (f, mut head, _) = fixture(Aggregation::Mean);
        assert!(train_pim(&mut head, &f, &[], &quick_cfg(1), &LossWeightPolicy::default()).is_err());
    }
}
