//! Layer primitives with hand-derived backward passes.
//!
//! Activations are batch-first `ArrayD<f64>`: `(n, features)` for dense layers
//! and `(n, c, h, w)` for convolutional ones.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayD, ArrayView2, Axis, Ix2, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::SeededRng;

/// Forward-pass mode. Training mode carries the generator used by dropout.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut SeededRng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `(out, in)`
    pub weight: ArrayD<f64>,
    /// `(out,)`
    pub bias: ArrayD<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    /// `(out_channels, in_channels, k, k)`; stride 1, zero "same" padding of `k / 2`.
    pub weight: ArrayD<f64>,
    pub bias: ArrayD<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm2d {
    pub gamma: ArrayD<f64>,
    pub beta: ArrayD<f64>,
    pub running_mean: ArrayD<f64>,
    pub running_var: ArrayD<f64>,
    pub eps: f64,
    pub momentum: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    /// Fixed affine input standardization `(x - mean) / std`.
    Normalize { mean: f64, std: f64 },
    /// `(n, c*h*w)` to `(n, c, h, w)`.
    Unflatten {
        channels: usize,
        height: usize,
        width: usize,
    },
    Flatten,
    Linear(Linear),
    Conv2d(Conv2d),
    BatchNorm2d(BatchNorm2d),
    Relu,
    Tanh,
    /// 2×2 window, stride 2, floor on odd sizes.
    MaxPool2d,
    Dropout { p: f64 },
}

/// What a layer keeps from its forward pass for the backward pass.
#[derive(Clone, Debug)]
pub enum Cache {
    Nothing,
    Input(ArrayD<f64>),
    Output(ArrayD<f64>),
    Shape(Vec<usize>),
    Conv {
        cols: Array2<f64>,
        in_shape: [usize; 4],
    },
    BatchNorm {
        xhat: ArrayD<f64>,
        inv_std: Array1<f64>,
        batch_mean: Array1<f64>,
        batch_var: Array1<f64>,
        train: bool,
    },
    MaxPool {
        argmax: Vec<usize>,
        in_shape: Vec<usize>,
    },
    Dropout(Option<ArrayD<f64>>),
}

fn as2(a: &ArrayD<f64>) -> ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("2-d tensor")
}

fn he_uniform(rng: &mut SeededRng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    ArrayD::from_shape_fn(IxDyn(shape), |_| dist.sample(rng))
}

impl Linear {
    pub fn new(inputs: usize, outputs: usize, rng: &mut SeededRng) -> Self {
        Self {
            weight: he_uniform(rng, &[outputs, inputs], inputs),
            bias: ArrayD::zeros(IxDyn(&[outputs])),
        }
    }

    /// All-zero layer, used where a coupling network must start as the identity map.
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: ArrayD::zeros(IxDyn(&[outputs, inputs])),
            bias: ArrayD::zeros(IxDyn(&[outputs])),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let w = as2(&self.weight);
        let mut y = Array2::zeros((x.nrows(), w.nrows()));
        general_mat_mul(1.0, &x, &w.t(), 0.0, &mut y);
        let b = self.bias.view().into_dimensionality::<ndarray::Ix1>().expect("1-d bias");
        y += &b;
        y
    }

    /// Returns `(dx, dW, db)`.
    pub fn backward(&self, x: ArrayView2<f64>, g: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
        let w = as2(&self.weight);
        let mut dx = Array2::zeros((g.nrows(), w.ncols()));
        general_mat_mul(1.0, &g, &w, 0.0, &mut dx);
        let mut dw = Array2::zeros(w.raw_dim());
        general_mat_mul(1.0, &g.t(), &x, 0.0, &mut dw);
        let db = g.sum_axis(Axis(0));
        (dx, dw, db)
    }
}

impl Conv2d {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut SeededRng) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Self {
            weight: he_uniform(rng, &[out_channels, in_channels, kernel, kernel], fan_in),
            bias: ArrayD::zeros(IxDyn(&[out_channels])),
        }
    }

    fn dims(&self) -> (usize, usize, usize) {
        let s = self.weight.shape();
        (s[0], s[1], s[2])
    }

    fn weight_matrix(&self) -> ArrayView2<'_, f64> {
        let (co, ci, k) = self.dims();
        self.weight
            .view()
            .into_shape_with_order((co, ci * k * k))
            .expect("contiguous conv weight")
    }
}

/// `(n, c, h, w)` to `(c*k*k, n*h*w)` patch matrix with zero padding `k / 2`.
fn im2col(x: &[f64], [n, c, h, w]: [usize; 4], k: usize) -> Array2<f64> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut cols = Array2::zeros((c * k * k, n * hw));
    let out = cols.as_slice_mut().expect("standard layout");
    let ncols = n * hw;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst_row = &mut out[row * ncols..(row + 1) * ncols];
                for b in 0..n {
                    let src = &x[(b * c + ci) * hw..(b * c + ci + 1) * hw];
                    let dst = &mut dst_row[b * hw..(b + 1) * hw];
                    for oy in 0..h {
                        let iy = oy as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                        let dst_r = &mut dst[oy * w..(oy + 1) * w];
                        let shift = kx as isize - pad;
                        let lo = (-shift).max(0) as usize;
                        let hi = (w as isize - shift).min(w as isize).max(0) as usize;
                        for ox in lo..hi {
                            dst_r[ox] = src_row[(ox as isize + shift) as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &Array2<f64>, [n, c, h, w]: [usize; 4], k: usize) -> ArrayD<f64> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut x = vec![0.0; n * c * hw];
    let src_all = cols.as_slice().expect("standard layout");
    let ncols = n * hw;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src_row = &src_all[row * ncols..(row + 1) * ncols];
                for b in 0..n {
                    let dst = &mut x[(b * c + ci) * hw..(b * c + ci + 1) * hw];
                    let src = &src_row[b * hw..(b + 1) * hw];
                    for oy in 0..h {
                        let iy = oy as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let shift = kx as isize - pad;
                        let lo = (-shift).max(0) as usize;
                        let hi = (w as isize - shift).min(w as isize).max(0) as usize;
                        for ox in lo..hi {
                            dst[iy as usize * w + (ox as isize + shift) as usize] += src[oy * w + ox];
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), x).expect("shape matches")
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: ArrayD::ones(IxDyn(&[channels])),
            beta: ArrayD::zeros(IxDyn(&[channels])),
            running_mean: ArrayD::zeros(IxDyn(&[channels])),
            running_var: ArrayD::ones(IxDyn(&[channels])),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn update_running(&mut self, batch_mean: &Array1<f64>, batch_var: &Array1<f64>, count: usize) {
        let m = self.momentum;
        let unbias = if count > 1 {
            count as f64 / (count - 1) as f64
        } else {
            1.0
        };
        for c in 0..batch_mean.len() {
            self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * batch_mean[c];
            self.running_var[c] = (1.0 - m) * self.running_var[c] + m * batch_var[c] * unbias;
        }
    }
}

fn nchw(x: &ArrayD<f64>) -> [usize; 4] {
    let s = x.shape();
    assert_eq!(s.len(), 4, "expected (n, c, h, w) activations, got {s:?}");
    [s[0], s[1], s[2], s[3]]
}

impl Layer {
    pub fn linear(inputs: usize, outputs: usize, rng: &mut SeededRng) -> Self {
        Layer::Linear(Linear::new(inputs, outputs, rng))
    }

    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut SeededRng) -> Self {
        Layer::Conv2d(Conv2d::new(in_channels, out_channels, kernel, rng))
    }

    pub fn batch_norm(channels: usize) -> Self {
        Layer::BatchNorm2d(BatchNorm2d::new(channels))
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Normalize { .. } => "normalize",
            Layer::Unflatten { .. } => "unflatten",
            Layer::Flatten => "flatten",
            Layer::Linear(_) => "linear",
            Layer::Conv2d(_) => "conv2d",
            Layer::BatchNorm2d(_) => "batchnorm2d",
            Layer::Relu => "relu",
            Layer::Tanh => "tanh",
            Layer::MaxPool2d => "maxpool2d",
            Layer::Dropout { .. } => "dropout",
        }
    }

    /// Learnable tensors, in the order `backward` reports their gradients.
    pub fn params(&self) -> Vec<(&'static str, &ArrayD<f64>)> {
        match self {
            Layer::Linear(l) => vec![("weight", &l.weight), ("bias", &l.bias)],
            Layer::Conv2d(c) => vec![("weight", &c.weight), ("bias", &c.bias)],
            Layer::BatchNorm2d(b) => vec![("gamma", &b.gamma), ("beta", &b.beta)],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut ArrayD<f64>> {
        match self {
            Layer::Linear(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Conv2d(c) => vec![&mut c.weight, &mut c.bias],
            Layer::BatchNorm2d(b) => vec![&mut b.gamma, &mut b.beta],
            _ => Vec::new(),
        }
    }

    /// Non-learnable state that still belongs in a checkpoint.
    pub fn buffers(&self) -> Vec<(&'static str, &ArrayD<f64>)> {
        match self {
            Layer::BatchNorm2d(b) => vec![("running_mean", &b.running_mean), ("running_var", &b.running_var)],
            _ => Vec::new(),
        }
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut ArrayD<f64>> {
        match self {
            Layer::BatchNorm2d(b) => vec![&mut b.running_mean, &mut b.running_var],
            _ => Vec::new(),
        }
    }

    pub fn forward(&self, x: ArrayD<f64>, mode: &mut Mode<'_>) -> (ArrayD<f64>, Cache) {
        match self {
            Layer::Normalize { mean, std } => (x.mapv(|v| (v - mean) / std), Cache::Nothing),
            Layer::Unflatten {
                channels,
                height,
                width,
            } => {
                let n = x.shape()[0];
                let shape = x.shape().to_vec();
                let y = x
                    .into_shape_with_order(IxDyn(&[n, *channels, *height, *width]))
                    .expect("unflatten size");
                (y, Cache::Shape(shape))
            }
            Layer::Flatten => {
                let shape = x.shape().to_vec();
                let n = shape[0];
                let rest: usize = shape[1..].iter().product();
                let y = x.into_shape_with_order(IxDyn(&[n, rest])).expect("flatten size");
                (y, Cache::Shape(shape))
            }
            Layer::Linear(l) => {
                let y = l.apply(as2(&x)).into_dyn();
                (y, Cache::Input(x))
            }
            Layer::Conv2d(c) => {
                let (co, _, k) = c.dims();
                let x = x.as_standard_layout().into_owned();
                let [n, ci, h, w] = nchw(&x);
                let cols = im2col(x.as_slice().expect("standard"), [n, ci, h, w], k);
                let mut out = Array2::zeros((co, n * h * w));
                general_mat_mul(1.0, &c.weight_matrix(), &cols, 0.0, &mut out);
                let hw = h * w;
                let mut y = vec![0.0; n * co * hw];
                let src = out.as_slice().expect("standard");
                for o in 0..co {
                    let b = c.bias[o];
                    for bi in 0..n {
                        let s = &src[o * n * hw + bi * hw..o * n * hw + (bi + 1) * hw];
                        let d = &mut y[(bi * co + o) * hw..(bi * co + o + 1) * hw];
                        for (dv, sv) in d.iter_mut().zip(s) {
                            *dv = sv + b;
                        }
                    }
                }
                let y = ArrayD::from_shape_vec(IxDyn(&[n, co, h, w]), y).expect("conv output");
                (
                    y,
                    Cache::Conv {
                        cols,
                        in_shape: [n, ci, h, w],
                    },
                )
            }
            Layer::BatchNorm2d(bn) => {
                let x = x.as_standard_layout().into_owned();
                let [n, c, h, w] = nchw(&x);
                let hw = h * w;
                let count = (n * hw) as f64;
                let data = x.as_slice().expect("standard");
                let train = mode.is_train();
                let (mean, var) = if train {
                    let mut mean = Array1::zeros(c);
                    let mut var = Array1::zeros(c);
                    for ch in 0..c {
                        let mut s = 0.0;
                        for b in 0..n {
                            s += data[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().sum::<f64>();
                        }
                        let m = s / count;
                        let mut v = 0.0;
                        for b in 0..n {
                            v += data[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                                .iter()
                                .map(|x| (x - m) * (x - m))
                                .sum::<f64>();
                        }
                        mean[ch] = m;
                        var[ch] = v / count;
                    }
                    (mean, var)
                } else {
                    (
                        Array1::from_iter(bn.running_mean.iter().copied()),
                        Array1::from_iter(bn.running_var.iter().copied()),
                    )
                };
                let inv_std = var.mapv(|v| 1.0 / (v + bn.eps).sqrt());
                let mut xhat = vec![0.0; data.len()];
                let mut y = vec![0.0; data.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                        let (m, is, g, be) = (mean[ch], inv_std[ch], bn.gamma[ch], bn.beta[ch]);
                        for i in r {
                            let xh = (data[i] - m) * is;
                            xhat[i] = xh;
                            y[i] = g * xh + be;
                        }
                    }
                }
                let shape = IxDyn(&[n, c, h, w]);
                (
                    ArrayD::from_shape_vec(shape.clone(), y).expect("bn output"),
                    Cache::BatchNorm {
                        xhat: ArrayD::from_shape_vec(shape, xhat).expect("bn cache"),
                        inv_std,
                        batch_mean: mean,
                        batch_var: var,
                        train,
                    },
                )
            }
            Layer::Relu => {
                let y = x.mapv(|v| v.max(0.0));
                (y, Cache::Input(x))
            }
            Layer::Tanh => {
                let y = x.mapv(f64::tanh);
                (y.clone(), Cache::Output(y))
            }
            Layer::MaxPool2d => {
                let x = x.as_standard_layout().into_owned();
                let [n, c, h, w] = nchw(&x);
                let (oh, ow) = (h / 2, w / 2);
                let data = x.as_slice().expect("standard");
                let mut y = vec![0.0; n * c * oh * ow];
                let mut argmax = vec![0usize; y.len()];
                for plane in 0..n * c {
                    let base = plane * h * w;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = base + 2 * oy * w + 2 * ox;
                            for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                                let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                                if data[i] > data[best] {
                                    best = i;
                                }
                            }
                            let o = plane * oh * ow + oy * ow + ox;
                            y[o] = data[best];
                            argmax[o] = best;
                        }
                    }
                }
                (
                    ArrayD::from_shape_vec(IxDyn(&[n, c, oh, ow]), y).expect("pool output"),
                    Cache::MaxPool {
                        argmax,
                        in_shape: vec![n, c, h, w],
                    },
                )
            }
            Layer::Dropout { p } => match mode {
                Mode::Train(rng) if *p > 0.0 => {
                    let keep = 1.0 - p;
                    let mask = x.mapv(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
                    let y = &x * &mask;
                    (y, Cache::Dropout(Some(mask)))
                }
                _ => (x, Cache::Dropout(None)),
            },
        }
    }

    /// Returns the input gradient and the gradients of [`Layer::params`], in order.
    pub fn backward(&self, cache: &Cache, g: ArrayD<f64>) -> (ArrayD<f64>, Vec<ArrayD<f64>>) {
        match (self, cache) {
            (Layer::Normalize { std, .. }, _) => (g / *std, Vec::new()),
            (Layer::Unflatten { .. } | Layer::Flatten, Cache::Shape(shape)) => (
                g.as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(IxDyn(shape))
                    .expect("restore shape"),
                Vec::new(),
            ),
            (Layer::Linear(l), Cache::Input(x)) => {
                let (dx, dw, db) = l.backward(as2(x), as2(&g));
                (dx.into_dyn(), vec![dw.into_dyn(), db.into_dyn()])
            }
            (Layer::Conv2d(c), Cache::Conv { cols, in_shape }) => {
                let (co, _, k) = c.dims();
                let [n, _, h, w] = *in_shape;
                let hw = h * w;
                let g = g.as_standard_layout().into_owned();
                let gs = g.as_slice().expect("standard");
                let mut gmat = Array2::zeros((co, n * hw));
                {
                    let dst = gmat.as_slice_mut().expect("standard");
                    for o in 0..co {
                        for b in 0..n {
                            dst[o * n * hw + b * hw..o * n * hw + (b + 1) * hw]
                                .copy_from_slice(&gs[(b * co + o) * hw..(b * co + o + 1) * hw]);
                        }
                    }
                }
                let wm = c.weight_matrix();
                let mut dw = Array2::zeros(wm.raw_dim());
                general_mat_mul(1.0, &gmat, &cols.t(), 0.0, &mut dw);
                let db = gmat.sum_axis(Axis(1));
                let mut dcols = Array2::zeros(cols.raw_dim());
                general_mat_mul(1.0, &wm.t(), &gmat, 0.0, &mut dcols);
                let dx = col2im(&dcols, *in_shape, k);
                let dw = dw
                    .into_shape_with_order(IxDyn(c.weight.shape()))
                    .expect("weight shape");
                (dx, vec![dw, db.into_dyn()])
            }
            (
                Layer::BatchNorm2d(bn),
                Cache::BatchNorm {
                    xhat,
                    inv_std,
                    train,
                    ..
                },
            ) => {
                let g = g.as_standard_layout().into_owned();
                let [n, c, h, w] = nchw(&g);
                let hw = h * w;
                let gs = g.as_slice().expect("standard");
                let xs = xhat.as_slice().expect("standard");
                let mut dgamma = ArrayD::zeros(IxDyn(&[c]));
                let mut dbeta = ArrayD::zeros(IxDyn(&[c]));
                for b in 0..n {
                    for ch in 0..c {
                        for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                            dgamma[ch] += gs[i] * xs[i];
                            dbeta[ch] += gs[i];
                        }
                    }
                }
                let mut dx = vec![0.0; gs.len()];
                let m = (n * hw) as f64;
                for b in 0..n {
                    for ch in 0..c {
                        let scale = bn.gamma[ch] * inv_std[ch];
                        for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                            dx[i] = if *train {
                                scale * (gs[i] - dbeta[ch] / m - xs[i] * dgamma[ch] / m)
                            } else {
                                scale * gs[i]
                            };
                        }
                    }
                }
                (
                    ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), dx).expect("bn grad"),
                    vec![dgamma, dbeta],
                )
            }
            (Layer::Relu, Cache::Input(x)) => {
                let mut g = g;
                ndarray::Zip::from(&mut g).and(x).for_each(|gv, &xv| {
                    if xv <= 0.0 {
                        *gv = 0.0;
                    }
                });
                (g, Vec::new())
            }
            (Layer::Tanh, Cache::Output(y)) => {
                let mut g = g;
                ndarray::Zip::from(&mut g).and(y).for_each(|gv, &yv| *gv *= 1.0 - yv * yv);
                (g, Vec::new())
            }
            (Layer::MaxPool2d, Cache::MaxPool { argmax, in_shape }) => {
                let mut dx = vec![0.0; in_shape.iter().product()];
                let g = g.as_standard_layout().into_owned();
                for (o, &gv) in g.as_slice().expect("standard").iter().enumerate() {
                    dx[argmax[o]] += gv;
                }
                (
                    ArrayD::from_shape_vec(IxDyn(in_shape), dx).expect("pool grad"),
                    Vec::new(),
                )
            }
            (Layer::Dropout { .. }, Cache::Dropout(mask)) => match mask {
                Some(m) => (g * m, Vec::new()),
                None => (g, Vec::new()),
            },
            (layer, cache) => panic!(
                "cache {:?} does not belong to a {} layer",
                std::mem::discriminant(cache),
                layer.kind()
            ),
        }
    }
}
