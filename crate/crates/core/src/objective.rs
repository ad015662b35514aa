//! The interface the optimizers train against.

use crate::vecmath::{FlatVector, Partition};

/// A differentiable loss over a flat parameter vector, evaluated on mini-batches
/// given as example indices.
///
/// `forward` and `backward` are split so that a step can inspect the loss (for
/// change detection) before deciding whether to pay for the gradient.
pub trait Objective {
    /// Whatever `backward` needs from the matching `forward` call.
    type Pass;

    /// Layer layout of the parameter vector.
    fn partition(&self) -> &Partition;

    /// Number of examples mini-batch indices are drawn from.
    fn num_examples(&self) -> usize;

    /// Mean loss over `batch` at `params`.
    fn forward(&self, params: &[f64], batch: &[usize]) -> (f64, Self::Pass);

    /// Gradient of the mean batch loss at the parameters given to `forward`.
    fn backward(&self, params: &[f64], pass: Self::Pass) -> FlatVector;

    fn loss_and_grad(&self, params: &[f64], batch: &[usize]) -> (f64, FlatVector) {
        let (loss, pass) = self.forward(params, batch);
        (loss, self.backward(params, pass))
    }
}
