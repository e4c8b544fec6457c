//! The target classifier `f` and its probe-layer representation `f_l(x)`.
//!
//! A classifier is split at the probe layer into a feature stack (input to
//! representation) and a linear head (representation to logits), so that the
//! representation a prober reads is exactly what the head consumes.

use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, ArrayD, ArrayView2, Axis, IxDyn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{ImageSet, ImageShape};
use crate::error::{Error, Result};
use crate::nn::checkpoint::quantize_f32;
use crate::nn::{
    argmax, load_checkpoint, save_checkpoint, softmax, Adam, AdamConfig, Differentiable, Layer,
    Mode, Parameterized, Sequential,
};
use crate::{seeded_rng, SeededRng};

pub const MODULE_KIND: &str = "classifier";

/// Where the prober reads from. Only the input of the final linear layer is supported.
pub const PROBE_LAYER: &str = "pre_logits";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    /// Four blocks of conv3x3 → batch-norm → ReLU → max-pool 2x2 → dropout.
    /// The last width is the representation size (inputs must be at least 16×16).
    Cnn4 { widths: [usize; 4], dropout: f64 },
    /// Dense ReLU stack; the last hidden width is the representation size.
    Mlp { hidden: Vec<usize>, dropout: f64 },
}

impl Architecture {
    /// The MNIST-scale CNN with a 256-wide representation.
    pub fn mnist_cnn() -> Self {
        Architecture::Cnn4 {
            widths: [16, 32, 64, 256],
            dropout: 0.1,
        }
    }

    pub fn rep_dim(&self) -> usize {
        match self {
            Architecture::Cnn4 { widths, .. } => widths[3],
            Architecture::Mlp { hidden, .. } => *hidden.last().unwrap_or(&0),
        }
    }

    fn validate(&self, shape: ImageShape) -> Result<()> {
        match self {
            Architecture::Cnn4 { widths, dropout } => {
                if widths.contains(&0) {
                    return Err(Error::InvalidConfig("CNN widths must be positive".into()));
                }
                if shape.height < 16 || shape.width < 16 {
                    return Err(Error::InvalidConfig(format!(
                        "four pooling blocks need at least 16x16 inputs, got {shape}"
                    )));
                }
                check_dropout(*dropout)
            }
            Architecture::Mlp { hidden, dropout } => {
                if hidden.is_empty() || hidden.contains(&0) {
                    return Err(Error::InvalidConfig("MLP needs positive hidden widths".into()));
                }
                check_dropout(*dropout)
            }
        }
    }
}

fn check_dropout(p: f64) -> Result<()> {
    if (0.0..1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("dropout {p} outside [0, 1)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub arch: Architecture,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Final learning rate as a fraction of the initial one (cosine schedule).
    pub final_lr_fraction: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            arch: Architecture::mnist_cnn(),
            epochs: 2,
            batch_size: 64,
            adam: AdamConfig {
                lr: 2e-3,
                ..AdamConfig::default()
            },
            final_lr_fraction: 0.05,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassifierRecord {
    pub epoch_losses: Vec<f64>,
    pub train_top1: Option<f64>,
    pub train_top5: Option<f64>,
    pub test_top1: Option<f64>,
    pub test_top5: Option<f64>,
    /// Wall-clock training time; kept out of checkpoints so they are reproducible.
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ClassifierArch {
    architecture: Architecture,
    class_count: usize,
    shape: ImageShape,
    norm_mean: f64,
    norm_std: f64,
    probe_layer: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    /// Input to probe-layer representation.
    pub features: Sequential,
    /// Representation to logits.
    pub head: Sequential,
    pub class_count: usize,
    pub shape: ImageShape,
    pub architecture: Architecture,
    pub probe_layer: String,
    pub record: ClassifierRecord,
    norm: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub predicted: usize,
    pub rep: Vec<f64>,
}

impl Prediction {
    pub fn from_logits(logits: Vec<f64>, rep: Vec<f64>) -> Self {
        let probs = softmax(&logits);
        let predicted = argmax(&probs);
        Self {
            logits,
            probs,
            predicted,
            rep,
        }
    }

    pub fn max_prob(&self) -> f64 {
        self.probs[self.predicted]
    }
}

impl Classifier {
    pub fn new(
        architecture: Architecture,
        shape: ImageShape,
        class_count: usize,
        norm: (f64, f64),
        rng: &mut SeededRng,
    ) -> Result<Self> {
        architecture.validate(shape)?;
        if class_count < 2 {
            return Err(Error::InvalidConfig("classifier needs at least 2 classes".into()));
        }
        if !(norm.1 > 0.0) {
            return Err(Error::InvalidConfig(format!("normalization std {} must be > 0", norm.1)));
        }
        let input_len = shape.len();
        let mut layers = vec![Layer::Normalize {
            mean: norm.0,
            std: norm.1,
        }];
        match &architecture {
            Architecture::Cnn4 { widths, dropout } => {
                layers.push(Layer::Unflatten {
                    channels: shape.channels,
                    height: shape.height,
                    width: shape.width,
                });
                let mut cin = shape.channels;
                for &w in widths {
                    layers.push(Layer::conv(cin, w, 3, rng));
                    layers.push(Layer::batch_norm(w));
                    layers.push(Layer::Relu);
                    layers.push(Layer::MaxPool2d);
                    layers.push(Layer::Dropout { p: *dropout });
                    cin = w;
                }
                layers.push(Layer::Flatten);
            }
            Architecture::Mlp { hidden, dropout } => {
                let mut fan_in = input_len;
                for &h in hidden {
                    layers.push(Layer::linear(fan_in, h, rng));
                    layers.push(Layer::Relu);
                    layers.push(Layer::Dropout { p: *dropout });
                    fan_in = h;
                }
            }
        }
        let features = Sequential::new(layers, input_len);
        let rep_dim = features.output_len();
        let head = Sequential::new(vec![Layer::linear(rep_dim, class_count, rng)], rep_dim);
        Ok(Self {
            features,
            head,
            class_count,
            shape,
            architecture,
            probe_layer: PROBE_LAYER.to_string(),
            record: ClassifierRecord::default(),
            norm,
        })
    }

    pub fn rep_dim(&self) -> usize {
        self.features.output_len()
    }

    pub fn input_len(&self) -> usize {
        self.shape.len()
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_len() {
            return Err(Error::shape(
                format!("image of {} values ({})", self.input_len(), self.shape),
                format!("{} values", x.len()),
            ));
        }
        Ok(())
    }

    /// One evaluation-mode forward pass: probabilities, argmax and `f_l(x)`.
    pub fn predict(&self, x: &[f64]) -> Result<Prediction> {
        self.check(x)?;
        let rep = self
            .features
            .infer(ArrayD::from_shape_vec(IxDyn(&[1, x.len()]), x.to_vec()).expect("row"));
        let logits = self.head.infer(rep.clone());
        Ok(Prediction::from_logits(logits.into_iter().collect(), rep.into_iter().collect()))
    }

    /// Predictions for a batch of channel-first rows.
    pub fn predict_rows(&self, x: ArrayView2<f64>) -> Result<Vec<Prediction>> {
        if x.ncols() != self.input_len() {
            return Err(Error::shape(self.input_len(), x.ncols()));
        }
        const CHUNK: usize = 256;
        let mut out = Vec::with_capacity(x.nrows());
        for start in (0..x.nrows()).step_by(CHUNK) {
            let end = (start + CHUNK).min(x.nrows());
            let chunk = x.slice(ndarray::s![start..end, ..]);
            let reps = self.features.infer_rows(chunk);
            let logits = self.head.infer_rows(reps.view());
            for (r, l) in reps.rows().into_iter().zip(logits.rows()) {
                out.push(Prediction::from_logits(l.to_vec(), r.to_vec()));
            }
        }
        Ok(out)
    }

    pub fn predict_set(&self, set: &ImageSet) -> Result<Vec<Prediction>> {
        self.check_set(set)?;
        let mut out = Vec::with_capacity(set.len());
        let idx: Vec<usize> = (0..set.len()).collect();
        for chunk in idx.chunks(1024) {
            out.extend(self.predict_rows(set.batch(chunk).view())?);
        }
        Ok(out)
    }

    fn check_set(&self, set: &ImageSet) -> Result<()> {
        if set.shape != self.shape {
            return Err(Error::shape(self.shape, set.shape));
        }
        Ok(())
    }

    /// Head only: representation to class probabilities.
    pub fn probs_from_rep(&self, rep: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.head.eval(rep)?))
    }

    /// `cotᵀ · ∂f_l/∂x`: pulls a representation-space cotangent back to the input.
    pub fn rep_vjp(&self, x: &[f64], cot_rep: &[f64]) -> Result<Vec<f64>> {
        self.features.vjp_input(x, cot_rep)
    }

    pub fn save(&self, path: impl AsRef<Path>, seed: u64, config: &ClassifierConfig) -> Result<()> {
        let arch = ClassifierArch {
            architecture: self.architecture.clone(),
            class_count: self.class_count,
            shape: self.shape,
            norm_mean: self.norm.0,
            norm_std: self.norm.1,
            probe_layer: self.probe_layer.clone(),
        };
        let mut tensors: Vec<(String, &ArrayD<f64>)> = self
            .features
            .state()
            .into_iter()
            .map(|(n, t)| (format!("features.{n}"), t))
            .collect();
        tensors.extend(self.head.state().into_iter().map(|(n, t)| (format!("head.{n}"), t)));
        save_checkpoint(
            path,
            MODULE_KIND,
            seed,
            serde_json::to_value(config)?,
            serde_json::to_value(arch)?,
            serde_json::to_value(&self.record)?,
            &tensors,
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let ck = load_checkpoint(path)?;
        if ck.header.module_kind != MODULE_KIND {
            return Err(Error::Corrupt {
                path: path.to_path_buf(),
                reason: format!("expected a {MODULE_KIND} checkpoint, found {}", ck.header.module_kind),
            });
        }
        let arch: ClassifierArch = serde_json::from_value(ck.header.arch.clone())?;
        let mut model = Classifier::new(
            arch.architecture,
            arch.shape,
            arch.class_count,
            (arch.norm_mean, arch.norm_std),
            &mut seeded_rng(0),
        )?;
        model.probe_layer = arch.probe_layer;
        let split = |prefix: &str| -> Vec<(String, ArrayD<f64>)> {
            ck.tensors
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
                .collect()
        };
        model.features.load_state(&split("features."))?;
        model.head.load_state(&split("head."))?;
        model.record = serde_json::from_value(ck.header.metrics).unwrap_or_default();
        Ok(model)
    }

    fn quantize(&mut self) {
        for l in self.features.layers.iter_mut().chain(self.head.layers.iter_mut()) {
            for p in l.params_mut() {
                quantize_f32(p);
            }
            for b in l.buffers_mut() {
                quantize_f32(b);
            }
        }
    }
}

impl Differentiable for Classifier {
    fn input_len(&self) -> usize {
        self.shape.len()
    }

    fn output_len(&self) -> usize {
        self.class_count
    }

    /// Logits.
    fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.predict(x)?.logits)
    }

    fn vjp_input(&self, x: &[f64], cotangent: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        self.check_cotangent(cotangent)?;
        let rep = self.features.eval(x)?;
        let cot_rep = self.head.vjp_input(&rep, cotangent)?;
        self.features.vjp_input(x, &cot_rep)
    }
}

impl Parameterized for Classifier {
    fn parameters(&self) -> Vec<(String, &ArrayD<f64>)> {
        let mut p: Vec<(String, &ArrayD<f64>)> = self
            .features
            .params()
            .into_iter()
            .map(|(n, t)| (format!("features.{n}"), t))
            .collect();
        p.extend(self.head.params().into_iter().map(|(n, t)| (format!("head.{n}"), t)));
        p
    }

    fn parameters_mut(&mut self) -> Vec<&mut ArrayD<f64>> {
        let mut p = self.features.params_mut();
        p.extend(self.head.params_mut());
        p
    }

    fn vjp_params(&self, batch: ArrayView2<f64>, cotangent: ArrayView2<f64>) -> Result<Vec<ArrayD<f64>>> {
        let (rep, ftape) = self.features.forward(batch.to_owned().into_dyn(), &mut Mode::Eval);
        let (_, htape) = self.head.forward(rep, &mut Mode::Eval);
        let (g_rep, mut hg) = self.head.backward(&htape, cotangent.to_owned().into_dyn());
        let (_, mut fg) = self.features.backward(&ftape, g_rep);
        fg.append(&mut hg);
        Ok(fg)
    }
}

/// Fraction of samples whose true label ranks within the `k` most probable classes.
pub fn topk_accuracy(predictions: &[Prediction], labels: &[usize], k: usize) -> f64 {
    if predictions.is_empty() {
        return 0.0;
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, &y)| {
            let py = p.probs[y];
            p.probs.iter().filter(|&&q| q > py).count() < k
        })
        .count();
    hits as f64 / predictions.len() as f64
}

pub fn topk_accuracy_on(classifier: &Classifier, set: &ImageSet, k: usize) -> Result<f64> {
    if k == 0 || k > classifier.class_count {
        return Err(Error::InvalidConfig(format!(
            "k = {k} outside [1, {}]",
            classifier.class_count
        )));
    }
    let preds = classifier.predict_set(set)?;
    Ok(topk_accuracy(&preds, &set.labels(), k))
}

fn pixel_stats(set: &ImageSet) -> (f64, f64) {
    let mut sum = 0.0;
    let mut sq = 0.0;
    let mut n = 0usize;
    for s in &set.samples {
        for &p in &s.image {
            sum += p as f64;
            sq += (p as f64) * (p as f64);
            n += 1;
        }
    }
    let mean = sum / n as f64;
    let var = (sq / n as f64 - mean * mean).max(0.0);
    (mean, var.sqrt().max(1e-6))
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: ArrayView2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let n = logits.nrows() as f64;
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for ((row, mut g), &y) in logits.rows().into_iter().zip(grad.rows_mut()).zip(labels) {
        let p = softmax(row.as_slice().expect("contiguous logits"));
        loss -= p[y].max(1e-300).ln();
        for (k, (gv, pv)) in g.iter_mut().zip(&p).enumerate() {
            *gv = (pv - if k == y { 1.0 } else { 0.0 }) / n;
        }
    }
    (loss / n, grad)
}

pub fn train_classifier(
    train: &ImageSet,
    eval: Option<&ImageSet>,
    config: &ClassifierConfig,
    seed: u64,
) -> Result<Classifier> {
    if train.is_empty() {
        return Err(Error::InvalidConfig("empty training set".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be positive".into()));
    }
    if !(config.adam.lr > 0.0) {
        return Err(Error::InvalidConfig("learning rate must be positive".into()));
    }
    let start = Instant::now();
    let mut rng = seeded_rng(seed);
    let mut model = Classifier::new(
        config.arch.clone(),
        train.shape,
        train.class_count,
        pixel_stats(train),
        &mut rng,
    )?;
    let mut opt = Adam::new(config.adam.clone());
    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    let total_steps = (steps_per_epoch * config.epochs).max(1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let progress = step as f64 / total_steps as f64;
            let lr_scale = config.final_lr_fraction
                + (1.0 - config.final_lr_fraction) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
            opt.set_lr(config.adam.lr * lr_scale);

            let x = train.batch(chunk).into_dyn();
            let labels: Vec<usize> = chunk.iter().map(|&i| train.samples[i].label).collect();
            let (rep, ftape) = model.features.forward(x, &mut Mode::Train(&mut rng));
            let (logits, htape) = model.head.forward(rep, &mut Mode::Train(&mut rng));
            let logits = crate::nn::sequential::rows(logits);
            let (loss, g) = cross_entropy(logits.view(), &labels);
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            epoch_loss += loss * chunk.len() as f64;
            let (g_rep, hg) = model.head.backward(&htape, g.into_dyn());
            let (_, mut fg) = model.features.backward(&ftape, g_rep);
            fg.extend(hg);
            model.features.update_running_stats(&ftape);
            opt.step(model.parameters_mut(), &fg);
            step += 1;
        }
        let mean_loss = epoch_loss / train.len() as f64;
        log::info!("classifier epoch {epoch}: loss {mean_loss:.5}");
        model.record.epoch_losses.push(mean_loss);
    }

    model.quantize();
    let train_preds = model.predict_set(train)?;
    let train_labels = train.labels();
    model.record.train_top1 = Some(topk_accuracy(&train_preds, &train_labels, 1));
    model.record.train_top5 = Some(topk_accuracy(&train_preds, &train_labels, 5.min(model.class_count)));
    if let Some(test) = eval {
        let preds = model.predict_set(test)?;
        let labels = test.labels();
        model.record.test_top1 = Some(topk_accuracy(&preds, &labels, 1));
        model.record.test_top5 = Some(topk_accuracy(&preds, &labels, 5.min(model.class_count)));
    }
    model.record.seconds = start.elapsed().as_secs_f64();
    Ok(model)
}

/// Column means of a prediction batch's probabilities; handy for chance-level checks.
pub fn mean_probs(preds: &[Prediction]) -> Vec<f64> {
    let k = preds.first().map_or(0, |p| p.probs.len());
    let m = Array2::from_shape_fn((preds.len(), k), |(i, j)| preds[i].probs[j]);
    m.mean_axis(Axis(0)).map(|a| a.to_vec()).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, ImageShape};

    fn small_mlp(rng: &mut SeededRng) -> Classifier {
        Classifier::new(
            Architecture::Mlp {
                hidden: vec![8, 6],
                dropout: 0.2,
            },
            ImageShape::new(3, 3, 1),
            4,
            (0.5, 0.25),
            rng,
        )
        .unwrap()
    }

    #[test]
    fn uniform_logits_tie_to_class_zero() {
        let p = Prediction::from_logits(vec![0.3; 10], vec![]);
        assert!(p.probs.iter().all(|&q| (q - 0.1).abs() < 1e-12));
        assert_eq!(p.predicted, 0);
    }

    #[test]
    fn rep_feeds_head_to_same_probs() {
        let model = small_mlp(&mut seeded_rng(3));
        let x: Vec<f64> = (0..9).map(|i| i as f64 / 9.0).collect();
        let pred = model.predict(&x).unwrap();
        let again = model.probs_from_rep(&pred.rep).unwrap();
        for (a, b) in pred.probs.iter().zip(&again) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((pred.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(model.predict(&x).unwrap(), pred);
        assert!(matches!(model.predict(&x[..4]), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn cnn_rep_dim_is_last_width() {
        let m = Classifier::new(
            Architecture::mnist_cnn(),
            ImageShape::new(28, 28, 1),
            10,
            (0.13, 0.31),
            &mut seeded_rng(0),
        )
        .unwrap();
        assert_eq!(m.rep_dim(), 256);
        assert!(Classifier::new(
            Architecture::mnist_cnn(),
            ImageShape::new(8, 8, 1),
            10,
            (0.0, 1.0),
            &mut seeded_rng(0)
        )
        .is_err());
    }

    #[test]
    fn topk_counts() {
        let preds: Vec<Prediction> = [[0.7, 0.2, 0.1], [0.1, 0.6, 0.3], [0.2, 0.3, 0.5], [0.5, 0.4, 0.1]]
            .iter()
            .map(|p| Prediction {
                logits: p.iter().map(|v: &f64| v.ln()).collect(),
                probs: p.to_vec(),
                predicted: argmax(p),
                rep: vec![],
            })
            .collect();
        let labels = [0, 2, 2, 1];
        assert_eq!(topk_accuracy(&preds, &labels, 1), 0.5);
        assert_eq!(topk_accuracy(&preds, &labels, 3), 1.0);
        assert_eq!(topk_accuracy(&preds, &labels, 2), 1.0);
    }

    #[test]
    fn zero_epochs_is_chance_level() {
        let set = make_synthetic(30, 10, ImageShape::new(4, 4, 1), 11).unwrap();
        let cfg = ClassifierConfig {
            arch: Architecture::Mlp {
                hidden: vec![16],
                dropout: 0.0,
            },
            epochs: 0,
            ..Default::default()
        };
        // Any single untrained net may correlate with the blobs by accident; the
        // average over initializations is what sits at chance.
        let accs: Vec<f64> = (0..8)
            .map(|seed| {
                let m = train_classifier(&set, None, &cfg, seed).unwrap();
                assert!(m.record.epoch_losses.is_empty());
                m.record.train_top1.unwrap()
            })
            .collect();
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!((mean - 0.1).abs() <= 0.05, "mean accuracy {mean}, per seed {accs:?}");
    }

    #[test]
    fn checkpoint_round_trip_is_lossless_after_training() {
        let set = make_synthetic(20, 3, ImageShape::new(16, 16, 1), 2).unwrap();
        let cfg = ClassifierConfig {
            arch: Architecture::Cnn4 {
                widths: [2, 3, 4, 5],
                dropout: 0.1,
            },
            epochs: 1,
            batch_size: 16,
            ..Default::default()
        };
        let mut m = train_classifier(&set, None, &cfg, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        m.save(&p, 5, &cfg).unwrap();
        let back = Classifier::load(&p).unwrap();
        // Wall-clock time is not stored.
        m.record.seconds = 0.0;
        assert_eq!(back, m);
    }
}
