//! Task classifiers with named intermediate tap points, and a small CNN
//! implementation with its own trainer for desk-scale scenarios.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_checkpoint, write_checkpoint};
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{argmax, softmax, LayerSpec, Sequential, Tensor};
use crate::optim::{accumulate, MultiStepLr, Optimizer, OptimizerKind};

/// A trained image classifier that exposes intermediate feature maps.
pub trait TaskClassifier: Send + Sync {
    fn num_classes(&self) -> usize;

    /// Tap points in forward order.
    fn layer_ids(&self) -> Vec<String>;

    fn predict_logits(&self, image: &Image) -> Result<Vec<f64>>;

    /// Feature map produced at `layer_id`.
    fn tap(&self, image: &Image, layer_id: &str) -> Result<Tensor>;

    fn predict_proba(&self, image: &Image) -> Result<Vec<f64>> {
        Ok(softmax(&self.predict_logits(image)?))
    }

    fn predict(&self, image: &Image) -> Result<usize> {
        Ok(argmax(&self.predict_logits(image)?))
    }
}

/// Stack of conv blocks (`[maxpool] conv3x3 relu`), global average pooling,
/// and a linear classification layer. Block `i` is tapped as `block{i+1}`;
/// every block but the first halves the spatial size first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnArch {
    pub input_channels: usize,
    pub input_size: usize,
    pub widths: Vec<usize>,
    pub num_classes: usize,
}

impl CnnArch {
    pub fn desk_default(num_classes: usize, input_size: usize) -> Self {
        Self { input_channels: 3, input_size, widths: vec![8, 16, 32], num_classes }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::validation("CNN needs at least one block of positive width"));
        }
        if self.num_classes < 2 {
            return Err(Error::validation("classifier needs at least two classes"));
        }
        let min_size = 1usize << (self.widths.len() - 1);
        if self.input_size < min_size.max(2) {
            return Err(Error::validation(format!(
                "input size {} too small for {} blocks",
                self.input_size,
                self.widths.len()
            )));
        }
        Ok(())
    }

    fn block(&self, i: usize) -> Vec<LayerSpec> {
        let in_ch = if i == 0 { self.input_channels } else { self.widths[i - 1] };
        let mut v = Vec::with_capacity(3);
        if i > 0 {
            v.push(LayerSpec::MaxPool2);
        }
        v.push(LayerSpec::Conv3x3 { in_ch, out_ch: self.widths[i] });
        v.push(LayerSpec::Relu);
        v
    }

    fn head(&self, out_dim: usize) -> Vec<LayerSpec> {
        vec![LayerSpec::GlobalAvgPool, LayerSpec::Linear { in_dim: *self.widths.last().unwrap(), out_dim }]
    }

    pub fn layers(&self) -> Vec<LayerSpec> {
        let mut v: Vec<LayerSpec> = (0..self.widths.len()).flat_map(|i| self.block(i)).collect();
        v.extend(self.head(self.num_classes));
        v
    }

    /// Number of layers up to and including block `tap`.
    pub fn block_end(&self, tap: usize) -> usize {
        (0..=tap).map(|i| self.block(i).len()).sum()
    }

    pub fn layer_ids(&self) -> Vec<String> {
        (1..=self.widths.len()).map(|i| format!("block{i}")).collect()
    }

    pub fn tap_index(&self, layer_id: &str) -> Result<usize> {
        self.layer_ids()
            .iter()
            .position(|l| l == layer_id)
            .ok_or_else(|| Error::validation(format!("unknown tap layer '{layer_id}'")))
    }

    pub fn tap_shape(&self, tap: usize) -> (usize, usize, usize) {
        (self.widths[tap], self.input_size >> tap, self.input_size >> tap)
    }

    /// Layers after block `tap`, with the classification layer replaced by
    /// a projection to `out_dim`.
    pub fn branch_layers(&self, tap: usize, out_dim: usize) -> Vec<LayerSpec> {
        let mut v: Vec<LayerSpec> = (tap + 1..self.widths.len()).flat_map(|i| self.block(i)).collect();
        v.extend(self.head(out_dim));
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyCnn {
    pub arch: CnnArch,
    pub net: Sequential,
}

#[derive(Serialize, Deserialize)]
struct ClassifierHeader {
    kind: String,
    arch: CnnArch,
    #[serde(default)]
    fingerprint: String,
}

impl TinyCnn {
    pub fn new(arch: CnnArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let net = Sequential::new(arch.layers(), seed);
        Ok(Self { arch, net })
    }

    fn check_input(&self, image: &Image) -> Result<()> {
        let a = &self.arch;
        if image.channels != a.input_channels || image.height != a.input_size || image.width != a.input_size {
            return Err(Error::Shape(format!(
                "classifier expects {}x{}x{} input, got {}x{}x{}",
                a.input_channels, a.input_size, a.input_size, image.channels, image.height, image.width
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path, fingerprint: &str) -> Result<()> {
        let header = ClassifierHeader {
            kind: "classifier".into(),
            arch: self.arch.clone(),
            fingerprint: fingerprint.to_string(),
        };
        write_checkpoint(path, &header, &self.net.params)
    }

    /// Returns the model and the fingerprint recorded in the checkpoint.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let (header, params): (ClassifierHeader, Vec<f64>) = read_checkpoint(path)?;
        if header.kind != "classifier" {
            return Err(Error::validation(format!("{} is not a classifier checkpoint", path.display())));
        }
        header.arch.validate()?;
        let net = Sequential::from_params(header.arch.layers(), params)?;
        Ok((Self { arch: header.arch, net }, header.fingerprint))
    }
}

impl TaskClassifier for TinyCnn {
    fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    fn layer_ids(&self) -> Vec<String> {
        self.arch.layer_ids()
    }

    fn predict_logits(&self, image: &Image) -> Result<Vec<f64>> {
        self.check_input(image)?;
        Ok(self.net.forward(&Tensor::from_image(image))?.data)
    }

    fn tap(&self, image: &Image, layer_id: &str) -> Result<Tensor> {
        self.check_input(image)?;
        let tap = self.arch.tap_index(layer_id)?;
        self.net.forward_prefix(&Tensor::from_image(image), self.arch.block_end(tap))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            lr: 0.05,
            lr_decay_epochs: vec![],
            lr_decay_factor: 0.2,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierEpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_acc: f64,
}

/// Mean cross-entropy SGD training of a fresh [`TinyCnn`].
pub fn train_classifier(
    arch: &CnnArch,
    data: &[&Sample],
    cfg: &ClassifierTrainConfig,
) -> Result<(TinyCnn, Vec<ClassifierEpochLog>)> {
    if data.is_empty() {
        return Err(Error::validation("empty training set"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::validation("batch size must be positive"));
    }
    let mut model = TinyCnn::new(arch.clone(), cfg.seed)?;
    for s in data {
        model.check_input(&s.image)?;
        if s.label >= arch.num_classes {
            return Err(Error::validation(format!("label {} out of range", s.label)));
        }
    }
    let schedule = MultiStepLr { base: cfg.lr, milestones: cfg.lr_decay_epochs.clone(), factor: cfg.lr_decay_factor };
    let mut opt = Optimizer::new(
        OptimizerKind::Sgd { momentum: cfg.momentum, weight_decay: cfg.weight_decay },
        model.net.num_params(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_C1A5);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = schedule.lr_at(epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let net = &model.net;
            let hits = std::sync::atomic::AtomicUsize::new(0);
            let (loss, mut grad) = accumulate(batch, net.num_params(), |&i, g| {
                let s = data[i];
                let acts = net.forward_trace(&Tensor::from_image(&s.image))?;
                let logits = &acts.last().unwrap().data;
                let p = softmax(logits);
                if argmax(logits) == s.label {
                    hits.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                }
                let mut dl = p.clone();
                dl[s.label] -= 1.0;
                net.backward(&acts, Tensor::vector(dl), g);
                Ok(-p[s.label].max(1e-300).ln())
            })?;
            let n = batch.len() as f64;
            grad.iter_mut().for_each(|g| *g /= n);
            opt.step(&mut model.net.params, &grad, lr);
            loss_sum += loss;
            correct += hits.into_inner();
        }
        log.push(ClassifierEpochLog {
            epoch,
            lr,
            loss: loss_sum / data.len() as f64,
            train_acc: correct as f64 / data.len() as f64,
        });
    }
    Ok((model, log))
}
