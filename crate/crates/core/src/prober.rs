//! The prober `h`: a three-layer ReLU network reading a classifier
//! representation and scoring (miss, hit).
//!
//! Output index 0 is the miss logit and index 1 the hit logit, so the one-hot
//! encoding of a probing label `o` is simply `e_o`.

use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, ArrayD, ArrayView2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hitmiss::HitMissDataset;
use crate::nn::checkpoint::quantize_f32;
use crate::nn::sequential::rows;
use crate::nn::{
    load_checkpoint, save_checkpoint, softmax, Adam, AdamConfig, Differentiable, Layer, Mode,
    Parameterized, Sequential,
};
use crate::seeded_rng;

pub const MODULE_KIND: &str = "prober";
pub const MISS: usize = 0;
pub const HIT: usize = 1;
const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Miss,
    Hit,
}

impl Verdict {
    pub fn is_hit(self) -> bool {
        self == Verdict::Hit
    }
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::Miss => "miss",
            Verdict::Hit => "hit",
        })
    }
}

/// Where the miss weight `w` enters the loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissWeighting {
    /// Miss samples' whole loss is multiplied by `w`; the in-formula weight is 1.
    PerSample,
    /// `w` multiplies the `(1 − q) log(1 − p)` term for every sample.
    InFormula,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProberConfig {
    /// The two hidden widths; the input width is the representation size.
    pub hidden: [usize; 2],
    pub alpha: f64,
    pub miss_weight: f64,
    pub weighting: MissWeighting,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for ProberConfig {
    fn default() -> Self {
        Self {
            hidden: [128, 64],
            alpha: 0.2,
            miss_weight: 2.0,
            weighting: MissWeighting::PerSample,
            epochs: 20,
            batch_size: 128,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl ProberConfig {
    /// Accepts a width list such as `256,128,64`, whose first entry must be the
    /// representation size.
    pub fn with_dims(mut self, dims: &[usize], rep_dim: usize) -> Result<Self> {
        match dims {
            [input, d1, d2] if *input == rep_dim => {
                self.hidden = [*d1, *d2];
                Ok(self)
            }
            [input, _, _] => Err(Error::InvalidConfig(format!(
                "prober input width {input} differs from representation size {rep_dim}"
            ))),
            _ => Err(Error::InvalidConfig(format!(
                "prober dims need three widths (input, hidden, hidden), got {dims:?}"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::InvalidConfig(format!("alpha {} outside [0, 1)", self.alpha)));
        }
        if !(self.miss_weight > 0.0) {
            return Err(Error::InvalidConfig(format!("miss weight {} must be > 0", self.miss_weight)));
        }
        if self.hidden.contains(&0) {
            return Err(Error::InvalidConfig("prober hidden widths must be positive".into()));
        }
        if self.batch_size == 0 || !(self.adam.lr > 0.0) {
            return Err(Error::InvalidConfig("batch size and learning rate must be positive".into()));
        }
        Ok(())
    }

    fn weights(&self) -> (f64, f64) {
        match self.weighting {
            MissWeighting::PerSample => (self.miss_weight, 1.0),
            MissWeighting::InFormula => (1.0, self.miss_weight),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProberRecord {
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: Option<f64>,
    /// Wall-clock training time; kept out of checkpoints so they are reproducible.
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ProberArch {
    rep_dim: usize,
    hidden: [usize; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prober {
    pub net: Sequential,
    pub rep_dim: usize,
    pub hidden: [usize; 2],
    pub record: ProberRecord,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProberOutput {
    pub logits: [f64; 2],
    pub p_hit: f64,
    pub verdict: Verdict,
}

impl ProberOutput {
    pub fn from_logits(logits: [f64; 2]) -> Self {
        let p = softmax(&logits);
        let p_hit = p[HIT];
        Self {
            logits,
            p_hit,
            verdict: if p_hit >= 0.5 { Verdict::Hit } else { Verdict::Miss },
        }
    }

    pub fn p_miss(&self) -> f64 {
        1.0 - self.p_hit
    }
}

/// `q(k) = o_k (1 − α) + α / K`. The hot coordinate is computed as
/// `1 − (K − 1) α / K`, which makes the two-class target sum to exactly 1.
pub fn smooth_label(o: usize, alpha: f64, k: usize) -> Result<Vec<f64>> {
    if k < 2 || o >= k {
        return Err(Error::InvalidConfig(format!("label {o} invalid for {k} classes")));
    }
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::InvalidConfig(format!("alpha {alpha} outside [0, 1)")));
    }
    let cold = alpha / k as f64;
    let mut q = vec![cold; k];
    q[o] = 1.0 - (k - 1) as f64 * cold;
    Ok(q)
}

/// `L = −Σ_k [ q(k) log p(k) + w (1 − q(k)) log(1 − p(k)) ]` with `p` clamped
/// to `[1e-7, 1 − 1e-7]`.
pub fn prober_loss(q: &[f64], p: &[f64], w: f64) -> Result<f64> {
    if q.len() != p.len() {
        return Err(Error::shape(q.len(), p.len()));
    }
    if let Some(bad) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain(format!("probability {bad} outside [0, 1]")));
    }
    Ok(loss_and_grad(q, p, w).0)
}

fn loss_and_grad(q: &[f64], p: &[f64], w: f64) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let grad = q
        .iter()
        .zip(p)
        .map(|(&qk, &pk)| {
            let c = pk.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            loss -= qk * c.ln() + w * (1.0 - qk) * (1.0 - c).ln();
            if c != pk {
                0.0
            } else {
                -qk / c + w * (1.0 - qk) / (1.0 - c)
            }
        })
        .collect();
    (loss, grad)
}

impl Prober {
    pub fn new(rep_dim: usize, hidden: [usize; 2], seed: u64) -> Result<Self> {
        if rep_dim == 0 || hidden.contains(&0) {
            return Err(Error::InvalidConfig("prober widths must be positive".into()));
        }
        let mut rng = seeded_rng(seed);
        let net = Sequential::new(
            vec![
                Layer::linear(rep_dim, hidden[0], &mut rng),
                Layer::Relu,
                Layer::linear(hidden[0], hidden[1], &mut rng),
                Layer::Relu,
                Layer::linear(hidden[1], 2, &mut rng),
            ],
            rep_dim,
        );
        Ok(Self {
            net,
            rep_dim,
            hidden,
            record: ProberRecord::default(),
        })
    }

    pub fn predict(&self, rep: &[f64]) -> Result<ProberOutput> {
        let l = self.net.eval(rep)?;
        Ok(ProberOutput::from_logits([l[MISS], l[HIT]]))
    }

    pub fn predict_rows(&self, reps: ArrayView2<f64>) -> Result<Vec<ProberOutput>> {
        if reps.ncols() != self.rep_dim {
            return Err(Error::shape(self.rep_dim, reps.ncols()));
        }
        let logits = self.net.infer_rows(reps);
        Ok(logits
            .rows()
            .into_iter()
            .map(|l| ProberOutput::from_logits([l[MISS], l[HIT]]))
            .collect())
    }

    pub fn predict_dataset(&self, dp: &HitMissDataset) -> Result<Vec<ProberOutput>> {
        self.predict_rows(rep_matrix(dp).view())
    }

    /// Raw pre-softmax hit score.
    pub fn hit_logit(&self, rep: &[f64]) -> Result<f64> {
        Ok(self.net.eval(rep)?[HIT])
    }

    /// `∂ hit_logit / ∂ rep`.
    pub fn hit_logit_grad(&self, rep: &[f64]) -> Result<Vec<f64>> {
        self.net.vjp_input(rep, &[0.0, 1.0])
    }

    pub fn save(&self, path: impl AsRef<Path>, config: &ProberConfig) -> Result<()> {
        let arch = ProberArch {
            rep_dim: self.rep_dim,
            hidden: self.hidden,
        };
        save_checkpoint(
            path,
            MODULE_KIND,
            config.seed,
            serde_json::to_value(config)?,
            serde_json::to_value(arch)?,
            serde_json::to_value(&self.record)?,
            &self.net.state(),
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
        let arch: ProberArch = serde_json::from_value(ck.header.arch.clone())?;
        let mut p = Prober::new(arch.rep_dim, arch.hidden, 0)?;
        p.net.load_state(&ck.tensors)?;
        p.record = serde_json::from_value(ck.header.metrics).unwrap_or_default();
        Ok(p)
    }
}

impl Differentiable for Prober {
    fn input_len(&self) -> usize {
        self.rep_dim
    }

    fn output_len(&self) -> usize {
        2
    }

    fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.net.eval(x)
    }

    fn vjp_input(&self, x: &[f64], cotangent: &[f64]) -> Result<Vec<f64>> {
        self.net.vjp_input(x, cotangent)
    }
}

impl Parameterized for Prober {
    fn parameters(&self) -> Vec<(String, &ArrayD<f64>)> {
        self.net.parameters()
    }

    fn parameters_mut(&mut self) -> Vec<&mut ArrayD<f64>> {
        self.net.parameters_mut()
    }

    fn vjp_params(&self, batch: ArrayView2<f64>, cotangent: ArrayView2<f64>) -> Result<Vec<ArrayD<f64>>> {
        self.net.vjp_params(batch, cotangent)
    }
}

pub fn rep_matrix(dp: &HitMissDataset) -> Array2<f64> {
    Array2::from_shape_fn((dp.len(), dp.rep_dim), |(i, j)| dp.records[i].rep[j])
}

/// Mean training objective over a batch of logits, and its gradient.
///
/// `sample_weight` scales the loss of miss samples; `formula_weight` is the `w`
/// inside the per-sample loss.
pub fn batch_loss(
    logits: ArrayView2<f64>,
    labels: &[usize],
    alpha: f64,
    sample_weight: f64,
    formula_weight: f64,
) -> Result<(f64, Array2<f64>)> {
    let n = logits.nrows() as f64;
    let mut total = 0.0;
    let mut grad = Array2::zeros(logits.raw_dim());
    for (i, (row, &o)) in logits.rows().into_iter().zip(labels).enumerate() {
        let p = softmax(&row.to_vec());
        let q = smooth_label(o, alpha, 2)?;
        let (l, gp) = loss_and_grad(&q, &p, formula_weight);
        let s = if o == MISS { sample_weight } else { 1.0 };
        total += s * l;
        let dot: f64 = p.iter().zip(&gp).map(|(a, b)| a * b).sum();
        for j in 0..2 {
            grad[[i, j]] = s * p[j] * (gp[j] - dot) / n;
        }
    }
    Ok((total / n, grad))
}

pub fn train_prober(dp: &HitMissDataset, config: &ProberConfig) -> Result<Prober> {
    config.validate()?;
    if dp.is_empty() {
        return Err(Error::DegenerateDataset("empty hit-miss dataset".into()));
    }
    if dp.miss_count() == 0 {
        return Err(Error::DegenerateDataset(
            "no miss records; the prober would collapse to a constant hit".into(),
        ));
    }
    let start = Instant::now();
    let mut prober = Prober::new(dp.rep_dim, config.hidden, config.seed)?;
    let mut rng = seeded_rng(config.seed.wrapping_add(1));
    let mut opt = Adam::new(config.adam.clone());
    let (sample_w, formula_w) = config.weights();
    let x = rep_matrix(dp);
    let labels: Vec<usize> = dp.records.iter().map(|r| r.label() as usize).collect();
    let mut order: Vec<usize> = (0..dp.len()).collect();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch = Array2::from_shape_fn((chunk.len(), dp.rep_dim), |(i, j)| x[[chunk[i], j]]);
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (out, tape) = prober.net.forward(batch.into_dyn(), &mut Mode::Eval);
            let (loss, g) = batch_loss(rows(out).view(), &y, config.alpha, sample_w, formula_w)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            epoch_loss += loss * chunk.len() as f64;
            let (_, grads) = prober.net.backward(&tape, g.into_dyn());
            opt.step(prober.net.params_mut(), &grads);
        }
        let mean = epoch_loss / dp.len() as f64;
        log::info!("prober epoch {epoch}: loss {mean:.5}");
        prober.record.epoch_losses.push(mean);
    }

    for p in prober.net.params_mut() {
        quantize_f32(p);
    }
    let preds = prober.predict_rows(x.view())?;
    let correct = preds
        .iter()
        .zip(&labels)
        .filter(|(p, &o)| p.verdict.is_hit() == (o == HIT))
        .count();
    prober.record.train_accuracy = Some(correct as f64 / dp.len() as f64);
    prober.record.seconds = start.elapsed().as_secs_f64();
    Ok(prober)
}

/// Single-representation convenience matching `prober_predict(prober, rep)`.
pub fn prober_predict(prober: &Prober, rep: &[f64]) -> Result<(f64, Verdict)> {
    let out = prober.predict(rep)?;
    Ok((out.p_hit, out.verdict))
}

pub fn hit_logit(prober: &Prober, rep: &[f64]) -> Result<f64> {
    prober.hit_logit(rep)
}
