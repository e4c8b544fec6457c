//! The differentiable-module contract shared by the classifier, prober and flow.
//!
//! Every implementor evaluates deterministically in evaluation mode and exposes
//! exact vector-Jacobian products with respect to its input and (for
//! [`Parameterized`] modules) its parameters.

use ndarray::{Array2, ArrayD, ArrayView2};

use crate::error::{Error, Result};

pub trait Differentiable {
    fn input_len(&self) -> usize;
    fn output_len(&self) -> usize;

    /// Evaluation-mode forward on one flattened input.
    fn eval(&self, x: &[f64]) -> Result<Vec<f64>>;

    /// `cotangentᵀ · ∂f/∂x` at `x`.
    fn vjp_input(&self, x: &[f64], cotangent: &[f64]) -> Result<Vec<f64>>;

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_len() {
            return Err(Error::shape(
                format!("input of length {}", self.input_len()),
                format!("length {}", x.len()),
            ));
        }
        Ok(())
    }

    fn check_cotangent(&self, c: &[f64]) -> Result<()> {
        if c.len() != self.output_len() {
            return Err(Error::shape(
                format!("cotangent of length {}", self.output_len()),
                format!("length {}", c.len()),
            ));
        }
        Ok(())
    }
}

pub trait Parameterized: Differentiable {
    fn parameters(&self) -> Vec<(String, &ArrayD<f64>)>;
    fn parameters_mut(&mut self) -> Vec<&mut ArrayD<f64>>;

    /// Parameter gradients of `Σ_rows cotangent · f(row)` over an evaluation-mode batch,
    /// in [`Parameterized::parameters`] order.
    fn vjp_params(&self, batch: ArrayView2<f64>, cotangent: ArrayView2<f64>) -> Result<Vec<ArrayD<f64>>>;
}

/// A scalar objective of a batch of module outputs, with its gradient.
pub trait ScalarLoss {
    fn value_and_grad(&self, outputs: ArrayView2<f64>) -> (f64, Array2<f64>);
}

impl<F> ScalarLoss for F
where
    F: Fn(ArrayView2<f64>) -> (f64, Array2<f64>),
{
    fn value_and_grad(&self, outputs: ArrayView2<f64>) -> (f64, Array2<f64>) {
        self(outputs)
    }
}

/// Exact gradient of output coordinate `head` with respect to the input.
pub fn grad_input<M: Differentiable + ?Sized>(module: &M, x: &[f64], head: usize) -> Result<Vec<f64>> {
    if head >= module.output_len() {
        return Err(Error::shape(
            format!("head < {}", module.output_len()),
            format!("head {head}"),
        ));
    }
    let mut cot = vec![0.0; module.output_len()];
    cot[head] = 1.0;
    module.vjp_input(x, &cot)
}

/// Evaluates `loss` on the module's batch outputs and returns its value with
/// the named parameter gradients.
pub fn grad_params<M: Parameterized + ?Sized>(
    module: &M,
    batch: ArrayView2<f64>,
    loss: &dyn ScalarLoss,
) -> Result<(f64, Vec<(String, ArrayD<f64>)>)> {
    if batch.ncols() != module.input_len() {
        return Err(Error::shape(
            format!("batch with {} columns", module.input_len()),
            format!("{} columns", batch.ncols()),
        ));
    }
    let mut out = Array2::zeros((batch.nrows(), module.output_len()));
    for (i, row) in batch.rows().into_iter().enumerate() {
        let y = module.eval(&row.to_vec())?;
        out.row_mut(i).assign(&ndarray::ArrayView1::from(&y));
    }
    let (value, cot) = loss.value_and_grad(out.view());
    let grads = module.vjp_params(batch, cot.view())?;
    let names = module.parameters().into_iter().map(|(n, _)| n);
    Ok((value, names.zip(grads).collect()))
}
