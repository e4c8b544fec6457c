use ndarray::{Array2, ArrayD, ArrayView2, Ix2, IxDyn};

use super::diff::{Differentiable, Parameterized};
use super::layers::{Cache, Layer, Mode};
use crate::error::{Error, Result};

/// Per-layer caches recorded by [`Sequential::forward`].
#[derive(Clone, Debug, Default)]
pub struct Tape {
    caches: Vec<Cache>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequential {
    pub layers: Vec<Layer>,
    input_len: usize,
    output_len: usize,
}

impl Sequential {
    /// `input_len` is the flattened per-sample input size.
    pub fn new(layers: Vec<Layer>, input_len: usize) -> Self {
        let mut seq = Self {
            layers,
            input_len,
            output_len: 0,
        };
        let probe = seq.infer(ArrayD::zeros(IxDyn(&[1, input_len])));
        seq.output_len = probe.len();
        seq
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn output_len(&self) -> usize {
        self.output_len
    }

    pub fn forward(&self, x: ArrayD<f64>, mode: &mut Mode<'_>) -> (ArrayD<f64>, Tape) {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for layer in &self.layers {
            let (y, c) = layer.forward(h, mode);
            caches.push(c);
            h = y;
        }
        (h, Tape { caches })
    }

    /// Evaluation-mode forward that keeps no caches.
    pub fn infer(&self, x: ArrayD<f64>) -> ArrayD<f64> {
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(h, &mut Mode::Eval).0;
        }
        h
    }

    /// Row-batch convenience: `(n, input_len)` in, `(n, output_len)` out.
    pub fn infer_rows(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let n = x.nrows();
        let y = self.infer(x.to_owned().into_dyn());
        y.into_shape_with_order((n, self.output_len))
            .expect("flat output")
    }

    /// Back-propagates `g` (shaped like the forward output). Returns the input
    /// gradient and the parameter gradients in [`Sequential::params`] order.
    pub fn backward(&self, tape: &Tape, g: ArrayD<f64>) -> (ArrayD<f64>, Vec<ArrayD<f64>>) {
        let mut per_layer: Vec<Vec<ArrayD<f64>>> = Vec::with_capacity(self.layers.len());
        let mut g = g;
        for (layer, cache) in self.layers.iter().zip(&tape.caches).rev() {
            let (dx, grads) = layer.backward(cache, g);
            per_layer.push(grads);
            g = dx;
        }
        per_layer.reverse();
        (g, per_layer.into_iter().flatten().collect())
    }

    /// Folds the batch statistics of a training-mode tape into batch-norm running stats.
    pub fn update_running_stats(&mut self, tape: &Tape) {
        for (layer, cache) in self.layers.iter_mut().zip(&tape.caches) {
            if let (
                Layer::BatchNorm2d(bn),
                Cache::BatchNorm {
                    batch_mean,
                    batch_var,
                    xhat,
                    train: true,
                    ..
                },
            ) = (layer, cache)
            {
                let s = xhat.shape();
                bn.update_running(batch_mean, batch_var, s[0] * s[2] * s[3]);
            }
        }
    }

    pub fn params(&self) -> Vec<(String, &ArrayD<f64>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.params().into_iter().map(move |(n, p)| (format!("{i}.{n}"), p)))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut ArrayD<f64>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    /// Parameters followed by buffers; this is what a checkpoint stores.
    pub fn state(&self) -> Vec<(String, &ArrayD<f64>)> {
        let mut out = self.params();
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(l.buffers().into_iter().map(|(n, p)| (format!("{i}.{n}"), p)));
        }
        out
    }

    pub fn load_state(&mut self, tensors: &[(String, ArrayD<f64>)]) -> Result<()> {
        let names: Vec<String> = self.state().into_iter().map(|(n, _)| n).collect();
        if names.len() != tensors.len() {
            return Err(Error::shape(
                format!("{} tensors", names.len()),
                format!("{} tensors", tensors.len()),
            ));
        }
        let lookup = |name: &str| tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let names: Vec<&'static str> = layer
                .params()
                .into_iter()
                .chain(layer.buffers())
                .map(|(n, _)| n)
                .collect();
            let slots: Vec<&mut ArrayD<f64>> = match layer {
                Layer::BatchNorm2d(bn) => vec![
                    &mut bn.gamma,
                    &mut bn.beta,
                    &mut bn.running_mean,
                    &mut bn.running_var,
                ],
                other => other.params_mut(),
            };
            for (name, slot) in names.into_iter().zip(slots) {
                let key = format!("{i}.{name}");
                let src = lookup(&key).ok_or_else(|| Error::shape(key.clone(), "missing tensor"))?;
                if src.shape() != slot.shape() {
                    return Err(Error::shape(
                        format!("{key} {:?}", slot.shape()),
                        format!("{:?}", src.shape()),
                    ));
                }
                slot.assign(src);
            }
        }
        Ok(())
    }
}

impl Differentiable for Sequential {
    fn input_len(&self) -> usize {
        self.input_len
    }

    fn output_len(&self) -> usize {
        self.output_len
    }

    fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self
            .infer(ArrayD::from_shape_vec(IxDyn(&[1, x.len()]), x.to_vec()).expect("row"))
            .into_iter()
            .collect())
    }

    fn vjp_input(&self, x: &[f64], cotangent: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        self.check_cotangent(cotangent)?;
        let xin = ArrayD::from_shape_vec(IxDyn(&[1, x.len()]), x.to_vec()).expect("row");
        let (y, tape) = self.forward(xin, &mut Mode::Eval);
        let g = ArrayD::from_shape_vec(y.raw_dim(), cotangent.to_vec()).expect("cotangent");
        let (dx, _) = self.backward(&tape, g);
        Ok(dx.into_iter().collect())
    }
}

impl Parameterized for Sequential {
    fn parameters(&self) -> Vec<(String, &ArrayD<f64>)> {
        self.params()
    }

    fn parameters_mut(&mut self) -> Vec<&mut ArrayD<f64>> {
        self.params_mut()
    }

    fn vjp_params(&self, batch: ArrayView2<f64>, cotangent: ArrayView2<f64>) -> Result<Vec<ArrayD<f64>>> {
        if batch.ncols() != self.input_len {
            return Err(Error::shape(self.input_len, batch.ncols()));
        }
        if cotangent.dim() != (batch.nrows(), self.output_len) {
            return Err(Error::shape(
                format!("({}, {})", batch.nrows(), self.output_len),
                format!("{:?}", cotangent.dim()),
            ));
        }
        let (y, tape) = self.forward(batch.to_owned().into_dyn(), &mut Mode::Eval);
        let g = cotangent
            .to_owned()
            .into_shape_with_order(y.raw_dim())
            .expect("cotangent");
        Ok(self.backward(&tape, g).1)
    }
}

pub(crate) fn rows(a: ArrayD<f64>) -> Array2<f64> {
    let n = a.shape()[0];
    let rest = a.len() / n.max(1);
    a.as_standard_layout()
        .into_owned()
        .into_shape_with_order((n, rest))
        .expect("flat rows")
        .into_dimensionality::<Ix2>()
        .expect("2-d")
}
