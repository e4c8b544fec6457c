//! RealNVP-style normalizing flow.
//!
//! `g` (decode, [`Flow::forward`]) maps a latent `z` to data `x`; `g⁻¹`
//! (encode, [`Flow::inverse`]) maps data to latent. Each affine coupling keeps
//! the masked ("frozen") coordinates and transforms the rest:
//!
//! ```text
//! encode: y_a = x_a · exp(s(x_f)) + t(x_f)        log|det| = Σ s
//! decode: x_a = (y_a − t(y_f)) · exp(−s(y_f))     log|det| = −Σ s
//! ```
//!
//! with `s = bound · tanh(raw)`. Image flows first apply the logit transform
//! `u = logit(λ + (1 − 2λ) x)` and include its log-determinant.

use std::f64::consts::{LN_2, PI};
use std::path::Path;
use std::time::Instant;

use ndarray::{s, Array1, Array2, ArrayD, ArrayView2, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ImageSet, ImageShape};
use crate::error::{Error, Result};
use crate::nn::checkpoint::quantize_f32;
use crate::nn::sequential::{rows, Tape};
use crate::nn::{
    load_checkpoint, save_checkpoint, Adam, AdamConfig, Differentiable, Layer, Linear, Mode,
    Parameterized, Sequential,
};
use crate::seeded_rng;

pub const MODULE_KIND: &str = "flow";
pub const DEFAULT_LOGIT_LAMBDA: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FlowInput {
    /// Channel-first images in `[0, 1]`; masks follow the pixel grid.
    Image { shape: ImageShape },
    /// Plain vectors; masks alternate coordinate parity.
    Vector { dim: usize },
}

impl FlowInput {
    pub fn dim(&self) -> usize {
        match self {
            FlowInput::Image { shape } => shape.len(),
            FlowInput::Vector { dim } => *dim,
        }
    }

    /// Frozen-coordinate mask of coupling `k`.
    ///
    /// Images cycle through a checkerboard, row parity and column parity
    /// (each with its complement); row and column parity select the
    /// sub-pixel channels a 2×2 squeeze would create.
    pub fn mask(&self, k: usize) -> Vec<bool> {
        match self {
            FlowInput::Vector { dim } => (0..*dim).map(|i| (i + k) % 2 == 0).collect(),
            FlowInput::Image { shape } => {
                let (h, w) = (shape.height, shape.width);
                let flip = k % 2 == 1;
                (0..shape.len())
                    .map(|i| {
                        let (r, c) = ((i / w) % h, i % w);
                        let on = match (k / 2) % 3 {
                            0 => (r + c) % 2 == 0,
                            1 => r % 2 == 0,
                            _ => c % 2 == 0,
                        };
                        on != flip
                    })
                    .collect()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub coupling_layers: usize,
    /// Width of the hidden layers in each coupling network.
    pub hidden: usize,
    pub hidden_layers: usize,
    /// Logit-transform λ; `None` disables the transform (vector data).
    pub logit_lambda: Option<f64>,
    /// Add `U[0, 1)/256` noise to 8-bit data during training.
    pub dequantize: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Train on at most this many samples (the first ones of the set).
    pub max_train: Option<usize>,
    pub seed: u64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            coupling_layers: 8,
            hidden: 256,
            hidden_layers: 2,
            logit_lambda: Some(DEFAULT_LOGIT_LAMBDA),
            dequantize: true,
            epochs: 4,
            batch_size: 64,
            adam: AdamConfig::default(),
            max_train: Some(20_000),
            seed: 0,
        }
    }
}

impl FlowConfig {
    /// A small configuration for low-dimensional vector data.
    pub fn toy() -> Self {
        Self {
            coupling_layers: 6,
            hidden: 32,
            hidden_layers: 2,
            logit_lambda: None,
            dequantize: false,
            epochs: 10,
            batch_size: 64,
            adam: AdamConfig {
                lr: 2e-3,
                ..AdamConfig::default()
            },
            max_train: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.coupling_layers == 0 || self.hidden == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "flow needs positive coupling layers, hidden width and batch size".into(),
            ));
        }
        if let Some(l) = self.logit_lambda {
            if !(0.0..0.5).contains(&l) {
                return Err(Error::InvalidConfig(format!("logit lambda {l} outside [0, 0.5)")));
            }
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::InvalidConfig("flow learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Coupling {
    pub frozen: Vec<usize>,
    pub active: Vec<usize>,
    /// Frozen coordinates to `[raw scale | translation]` for the active ones.
    pub net: Sequential,
    /// Per-coordinate bound on `|s|`.
    pub bound: ArrayD<f64>,
}

struct CouplingCache {
    input: Array2<f64>,
    tape: Tape,
    th: Array2<f64>,
    s: Array2<f64>,
    t: Array2<f64>,
}

impl Coupling {
    fn new(mask: &[bool], hidden: usize, hidden_layers: usize, rng: &mut crate::SeededRng) -> Self {
        let frozen: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        let active: Vec<usize> = (0..mask.len()).filter(|&i| !mask[i]).collect();
        let mut layers = Vec::new();
        let mut fan_in = frozen.len();
        for _ in 0..hidden_layers {
            layers.push(Layer::linear(fan_in, hidden, rng));
            layers.push(Layer::Relu);
            fan_in = hidden;
        }
        // Zero output layer: the coupling starts as the identity.
        layers.push(Layer::Linear(Linear::zeros(fan_in, 2 * active.len())));
        Self {
            net: Sequential::new(layers, frozen.len()),
            bound: ArrayD::ones(IxDyn(&[active.len()])),
            frozen,
            active,
        }
    }

    fn conditioner(&self, input: ArrayView2<f64>) -> (Tape, Array2<f64>, Array2<f64>, Array2<f64>) {
        let xf = input.select(Axis(1), &self.frozen);
        let (h, tape) = self.net.forward(xf.into_dyn(), &mut Mode::Eval);
        let h = rows(h);
        let na = self.active.len();
        let th = h.slice(s![.., ..na]).mapv(f64::tanh);
        let bound = self.bound.view().into_dimensionality::<ndarray::Ix1>().expect("1-d bound");
        let s = &th * &bound;
        let t = h.slice(s![.., na..]).to_owned();
        (tape, th, s, t)
    }

    /// Returns the output and per-row log-determinant.
    fn apply(&self, input: Array2<f64>, encode: bool) -> (Array2<f64>, Array1<f64>, CouplingCache) {
        let (tape, th, s, t) = self.conditioner(input.view());
        let mut out = input.clone();
        let mut logdet = Array1::zeros(input.nrows());
        for i in 0..input.nrows() {
            let mut ld = 0.0;
            for (j, &a) in self.active.iter().enumerate() {
                let (sv, tv) = (s[[i, j]], t[[i, j]]);
                out[[i, a]] = if encode {
                    input[[i, a]] * sv.exp() + tv
                } else {
                    (input[[i, a]] - tv) * (-sv).exp()
                };
                ld += sv;
            }
            logdet[i] = if encode { ld } else { -ld };
        }
        (out, logdet, CouplingCache { input, tape, th, s, t })
    }

    /// Backward through one coupling. `g_out` is the gradient w.r.t. the
    /// output and `g_logdet[i]` the gradient w.r.t. row `i`'s log-determinant.
    /// Returns the input gradient and parameter gradients (net, then bound).
    fn backward(
        &self,
        cache: &CouplingCache,
        g_out: &Array2<f64>,
        g_logdet: &Array1<f64>,
        encode: bool,
    ) -> (Array2<f64>, Vec<ArrayD<f64>>) {
        let n = g_out.nrows();
        let na = self.active.len();
        let mut g_in = g_out.clone();
        let mut g_h = Array2::zeros((n, 2 * na));
        let mut g_bound = Array1::<f64>::zeros(na);
        for i in 0..n {
            for (j, &a) in self.active.iter().enumerate() {
                let (sv, tv, th) = (cache.s[[i, j]], cache.t[[i, j]], cache.th[[i, j]]);
                let go = g_out[[i, a]];
                let (gi, gs, gt) = if encode {
                    let e = sv.exp();
                    (go * e, go * cache.input[[i, a]] * e + g_logdet[i], go)
                } else {
                    let e = (-sv).exp();
                    let x_a = (cache.input[[i, a]] - tv) * e;
                    (go * e, -go * x_a - g_logdet[i], -go * e)
                };
                g_in[[i, a]] = gi;
                g_h[[i, j]] = gs * self.bound[j] * (1.0 - th * th);
                g_h[[i, na + j]] = gt;
                g_bound[j] += gs * th;
            }
        }
        let (g_f, mut grads) = self.net.backward(&cache.tape, g_h.into_dyn());
        let g_f = rows(g_f);
        for (k, &f) in self.frozen.iter().enumerate() {
            for i in 0..n {
                g_in[[i, f]] += g_f[[i, k]];
            }
        }
        grads.push(g_bound.into_dyn());
        (g_in, grads)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FlowRecord {
    /// Mean training NLL (nats per sample) per epoch.
    pub epoch_nll: Vec<f64>,
    /// Bits per dimension per epoch (image flows only).
    pub epoch_bpd: Vec<f64>,
    /// Held-out mean NLL after each epoch, when a held-out set was given.
    pub heldout_nll: Vec<f64>,
    /// Wall-clock training time; kept out of checkpoints so they are reproducible.
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct FlowArch {
    input: FlowInput,
    coupling_layers: usize,
    hidden: usize,
    hidden_layers: usize,
    logit_lambda: Option<f64>,
    /// Index of the first mask pattern.
    mask_offset: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Flow {
    pub input: FlowInput,
    pub layers: Vec<Coupling>,
    pub logit_lambda: Option<f64>,
    /// Uniform dequantization amplitude used in training (0 when disabled).
    pub dequant_noise: f64,
    pub record: FlowRecord,
    arch: FlowArch,
}

impl Flow {
    pub fn new(input: FlowInput, config: &FlowConfig) -> Result<Self> {
        Self::with_mask_offset(input, config, 0)
    }

    /// Like [`Flow::new`] with the mask sequence starting at pattern `offset`.
    pub fn with_mask_offset(input: FlowInput, config: &FlowConfig, offset: usize) -> Result<Self> {
        config.validate()?;
        if input.dim() < 2 {
            return Err(Error::InvalidConfig("a coupling flow needs at least 2 dimensions".into()));
        }
        let mut rng = seeded_rng(config.seed);
        let layers = (0..config.coupling_layers)
            .map(|k| Coupling::new(&input.mask(k + offset), config.hidden, config.hidden_layers, &mut rng))
            .collect();
        let mut flow = Self {
            input,
            layers,
            logit_lambda: config.logit_lambda,
            dequant_noise: if config.dequantize { 1.0 / 256.0 } else { 0.0 },
            record: FlowRecord::default(),
            arch: FlowArch {
                input,
                coupling_layers: config.coupling_layers,
                hidden: config.hidden,
                hidden_layers: config.hidden_layers,
                logit_lambda: config.logit_lambda,
                mask_offset: offset,
            },
        };
        flow.quantize();
        Ok(flow)
    }

    pub fn dim(&self) -> usize {
        self.input.dim()
    }

    fn quantize(&mut self) {
        for p in self.params_mut() {
            quantize_f32(p);
        }
    }

    fn params_mut(&mut self) -> Vec<&mut ArrayD<f64>> {
        let mut out = Vec::new();
        for c in &mut self.layers {
            out.extend(c.net.params_mut());
            out.push(&mut c.bound);
        }
        out
    }

    fn check_rows(&self, x: ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.dim() {
            return Err(Error::shape(self.dim(), x.ncols()));
        }
        Ok(())
    }

    /// Data to pre-coupling space; returns the transformed rows and log-det.
    fn preprocess(&self, x: ArrayView2<f64>) -> (Array2<f64>, Array1<f64>) {
        match self.logit_lambda {
            None => (x.to_owned(), Array1::zeros(x.nrows())),
            Some(l) => {
                let a = 1.0 - 2.0 * l;
                let mut logdet = Array1::zeros(x.nrows());
                let u = Array2::from_shape_fn(x.raw_dim(), |(i, j)| {
                    let p = l + a * x[[i, j]];
                    logdet[i] += a.ln() - p.ln() - (1.0 - p).ln();
                    p.ln() - (1.0 - p).ln()
                });
                (u, logdet)
            }
        }
    }

    /// Inverse of [`Flow::preprocess`]; the log-det is that of this direction.
    fn postprocess(&self, u: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
        match self.logit_lambda {
            None => (u.clone(), Array1::zeros(u.nrows())),
            Some(l) => {
                let a = 1.0 - 2.0 * l;
                let mut logdet = Array1::zeros(u.nrows());
                let x = Array2::from_shape_fn(u.raw_dim(), |(i, j)| {
                    let sg = sigmoid(u[[i, j]]);
                    logdet[i] += log_sigmoid(u[[i, j]]) + log_sigmoid(-u[[i, j]]) - a.ln();
                    (sg - l) / a
                });
                (x, logdet)
            }
        }
    }

    /// `g⁻¹` on rows: latent rows and the log-determinant of the encode map.
    pub fn encode_rows(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
        self.check_rows(x)?;
        let (mut h, mut logdet) = self.preprocess(x);
        for c in &self.layers {
            let (out, ld, _) = c.apply(h, true);
            h = out;
            logdet += &ld;
        }
        finite(&h, "latent")?;
        finite_vec(&logdet, "log-determinant")?;
        Ok((h, logdet))
    }

    /// `g` on rows: data rows and the log-determinant of the decode map.
    pub fn decode_rows(&self, z: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
        self.check_rows(z)?;
        let mut h = z.to_owned();
        let mut logdet = Array1::zeros(z.nrows());
        for c in self.layers.iter().rev() {
            let (out, ld, _) = c.apply(h, false);
            h = out;
            logdet += &ld;
        }
        let (x, ld) = self.postprocess(&h);
        logdet += &ld;
        finite(&x, "decoded data")?;
        finite_vec(&logdet, "log-determinant")?;
        Ok((x, logdet))
    }

    /// `x = g(z)` and `log |det ∂g/∂z|`.
    pub fn forward(&self, z: &[f64]) -> Result<(Vec<f64>, f64)> {
        let (x, ld) = self.decode_rows(row(z).view())?;
        Ok((x.into_iter().collect(), ld[0]))
    }

    /// `z = g⁻¹(x)`.
    pub fn inverse(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.inverse_with_logdet(x)?.0)
    }

    pub fn inverse_with_logdet(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        let (z, ld) = self.encode_rows(row(x).view())?;
        Ok((z.into_iter().collect(), ld[0]))
    }

    pub fn log_prob_rows(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        let (z, ld) = self.encode_rows(x)?;
        let d = self.dim() as f64;
        Ok(Array1::from_shape_fn(z.nrows(), |i| {
            -0.5 * z.row(i).dot(&z.row(i)) - 0.5 * d * (2.0 * PI).ln() + ld[i]
        }))
    }

    /// `log N(g⁻¹(x); 0, I) + log |det ∂g⁻¹/∂x|`.
    pub fn log_prob(&self, x: &[f64]) -> Result<f64> {
        Ok(self.log_prob_rows(row(x).view())?[0])
    }

    /// Decode with caches, for gradients.
    fn decode_cached(&self, z: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>, Vec<CouplingCache>) {
        let mut h = z.to_owned();
        let mut caches = Vec::with_capacity(self.layers.len());
        for c in self.layers.iter().rev() {
            let (out, _, cache) = c.apply(h, false);
            caches.push(cache);
            h = out;
        }
        let (x, _) = self.postprocess(&h);
        (h, x, caches)
    }

    /// Gradients of `Σ_rows g_x · g(z_row)` w.r.t. `z` and the parameters.
    pub fn decode_vjp_rows(
        &self,
        z: ArrayView2<f64>,
        g_x: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, Vec<ArrayD<f64>>)> {
        self.check_rows(z)?;
        self.check_rows(g_x)?;
        let (u, _, caches) = self.decode_cached(z);
        let mut g = match self.logit_lambda {
            None => g_x.to_owned(),
            Some(l) => {
                let a = 1.0 - 2.0 * l;
                Array2::from_shape_fn(u.raw_dim(), |(i, j)| {
                    let sg = sigmoid(u[[i, j]]);
                    g_x[[i, j]] * sg * (1.0 - sg) / a
                })
            }
        };
        let zero = Array1::zeros(z.nrows());
        let mut per_layer = vec![Vec::new(); self.layers.len()];
        // caches[k] belongs to layer L-1-k.
        for (k, cache) in caches.iter().enumerate().rev() {
            let li = self.layers.len() - 1 - k;
            let (g_in, grads) = self.layers[li].backward(cache, &g, &zero, false);
            per_layer[li] = grads;
            g = g_in;
        }
        Ok((g, per_layer.into_iter().flatten().collect()))
    }

    /// Mean negative log-likelihood of the rows and its parameter gradients.
    pub fn nll_and_grads(&self, x: ArrayView2<f64>) -> Result<(f64, Vec<ArrayD<f64>>)> {
        self.check_rows(x)?;
        let n = x.nrows() as f64;
        let d = self.dim() as f64;
        let (mut h, mut logdet) = self.preprocess(x);
        let mut caches = Vec::with_capacity(self.layers.len());
        for c in &self.layers {
            let (out, ld, cache) = c.apply(h, true);
            caches.push(cache);
            h = out;
            logdet += &ld;
        }
        let sq: f64 = h.iter().map(|v| v * v).sum();
        let nll = (0.5 * sq + 0.5 * d * (2.0 * PI).ln() * n - logdet.sum()) / n;
        if !nll.is_finite() {
            return Err(Error::NonFinite(format!("flow NLL {nll}")));
        }
        let mut g = h.mapv(|v| v / n);
        let g_ld = Array1::from_elem(x.nrows(), -1.0 / n);
        let mut per_layer = vec![Vec::new(); self.layers.len()];
        for (li, cache) in caches.iter().enumerate().rev() {
            let (g_in, grads) = self.layers[li].backward(cache, &g, &g_ld, true);
            per_layer[li] = grads;
            g = g_in;
        }
        Ok((nll, per_layer.into_iter().flatten().collect()))
    }

    /// Bits per dimension for 8-bit data from a mean NLL on dequantized `[0, 1]` data.
    pub fn bits_per_dim(&self, mean_nll: f64) -> f64 {
        let d = self.dim() as f64;
        (mean_nll + d * 256f64.ln()) / (d * LN_2)
    }

    pub fn save(&self, path: impl AsRef<Path>, config: &FlowConfig) -> Result<()> {
        let tensors = self.parameters();
        save_checkpoint(
            path,
            MODULE_KIND,
            config.seed,
            serde_json::to_value(config)?,
            serde_json::to_value(&self.arch)?,
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
        let arch: FlowArch = serde_json::from_value(ck.header.arch.clone())?;
        let config: FlowConfig = serde_json::from_value(ck.header.training_config.clone())?;
        let mut flow = Flow::with_mask_offset(
            arch.input,
            &FlowConfig {
                coupling_layers: arch.coupling_layers,
                hidden: arch.hidden,
                hidden_layers: arch.hidden_layers,
                logit_lambda: arch.logit_lambda,
                ..config
            },
            arch.mask_offset,
        )?;
        let names: Vec<String> = flow.parameters().into_iter().map(|(n, _)| n).collect();
        for (name, p) in names.iter().zip(flow.params_mut()) {
            let t = ck.tensor(name)?;
            if t.shape() != p.shape() {
                return Err(Error::shape(format!("{name} {:?}", p.shape()), format!("{:?}", t.shape())));
            }
            p.assign(t);
        }
        flow.record = serde_json::from_value(ck.header.metrics).unwrap_or_default();
        Ok(flow)
    }
}

fn row(v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row")
}

fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        -(-u).exp().ln_1p()
    } else {
        u - u.exp().ln_1p()
    }
}

fn finite(a: &Array2<f64>, what: &str) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

fn finite_vec(a: &Array1<f64>, what: &str) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// The decode map `g: z ↦ x`.
impl Differentiable for Flow {
    fn input_len(&self) -> usize {
        self.dim()
    }

    fn output_len(&self) -> usize {
        self.dim()
    }

    fn eval(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_input(z)?;
        Ok(self.forward(z)?.0)
    }

    fn vjp_input(&self, z: &[f64], cotangent: &[f64]) -> Result<Vec<f64>> {
        self.check_input(z)?;
        self.check_cotangent(cotangent)?;
        let (g, _) = self.decode_vjp_rows(row(z).view(), row(cotangent).view())?;
        Ok(g.into_iter().collect())
    }
}

impl Parameterized for Flow {
    fn parameters(&self) -> Vec<(String, &ArrayD<f64>)> {
        let mut out = Vec::new();
        for (k, c) in self.layers.iter().enumerate() {
            out.extend(c.net.params().into_iter().map(|(n, t)| (format!("coupling{k}.net.{n}"), t)));
            out.push((format!("coupling{k}.bound"), &c.bound));
        }
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut ArrayD<f64>> {
        self.params_mut()
    }

    fn vjp_params(&self, batch: ArrayView2<f64>, cotangent: ArrayView2<f64>) -> Result<Vec<ArrayD<f64>>> {
        Ok(self.decode_vjp_rows(batch, cotangent)?.1)
    }
}

/// Trains on vector rows. `heldout` rows, when given, are scored after each epoch.
pub fn train_flow_rows(
    input: FlowInput,
    data: ArrayView2<f64>,
    heldout: Option<ArrayView2<f64>>,
    config: &FlowConfig,
) -> Result<Flow> {
    config.validate()?;
    if data.nrows() == 0 {
        return Err(Error::InvalidConfig("empty flow training set".into()));
    }
    let start = Instant::now();
    let mut flow = Flow::new(input, config)?;
    flow.check_rows(data)?;
    let mut rng = seeded_rng(config.seed.wrapping_add(1));
    let mut opt = Adam::new(config.adam.clone());
    let n = config.max_train.map_or(data.nrows(), |m| m.min(data.nrows()));
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let mut batch = data.select(Axis(0), chunk);
            if flow.dequant_noise > 0.0 {
                // (255 x + u) / 256 with u ~ U[0, 1).
                batch.mapv_inplace(|v| (255.0 * v + rng.random::<f64>()) / 256.0);
            }
            let (nll, grads) = flow.nll_and_grads(batch.view()).map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged { epoch, loss: f64::NAN },
                e => e,
            })?;
            total += nll * chunk.len() as f64;
            opt.step(flow.params_mut(), &grads);
        }
        let mean = total / n as f64;
        if !mean.is_finite() {
            return Err(Error::Diverged { epoch, loss: mean });
        }
        flow.record.epoch_nll.push(mean);
        if flow.dequant_noise > 0.0 {
            let bpd = flow.bits_per_dim(mean);
            flow.record.epoch_bpd.push(bpd);
            log::info!("flow epoch {epoch}: nll {mean:.3}, {bpd:.4} bits/dim");
        } else {
            log::info!("flow epoch {epoch}: nll {mean:.5}");
        }
        if let Some(h) = heldout {
            let lp = flow.log_prob_rows(h)?;
            flow.record.heldout_nll.push(-lp.mean().unwrap_or(f64::NAN));
        }
    }
    flow.quantize();
    flow.record.seconds = start.elapsed().as_secs_f64();
    Ok(flow)
}

pub fn train_flow(dataset: &ImageSet, config: &FlowConfig) -> Result<Flow> {
    if dataset.is_empty() {
        return Err(Error::InvalidConfig("empty flow training set".into()));
    }
    let n = config.max_train.map_or(dataset.len(), |m| m.min(dataset.len()));
    let idx: Vec<usize> = (0..n).collect();
    let data = dataset.batch(&idx);
    train_flow_rows(FlowInput::Image { shape: dataset.shape }, data.view(), None, config)
}
