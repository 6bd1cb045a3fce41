//! Named parameter collections shared by models, optimizers and checkpoints.

use crate::autodiff::{Gradients, Tape, Var};
use crate::rng::CounterRng;
use crate::tensor::Tensor;

/// A model whose trainable tensors can be enumerated in a fixed order.
pub trait Params {
    /// `(name, tensor)` pairs; names are unique within the model.
    fn named(&self) -> Vec<(String, &Tensor)>;

    /// Mutable access in the same order as [`Params::named`].
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn tensors(&self) -> Vec<&Tensor> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Gradients for `vars`, substituting zeros where none flowed.
pub fn collect_grads(grads: &Gradients, vars: &[Var], tape: &Tape) -> Vec<Tensor> {
    vars.iter()
        .map(|v| {
            grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.value(*v).shape()))
        })
        .collect()
}

/// Leaf binding: trainable parameters or constants.
pub(crate) fn bind(tape: &mut Tape, t: &Tensor, trainable: bool) -> Var {
    if trainable {
        tape.param(t)
    } else {
        tape.constant(t)
    }
}

pub(crate) fn normal_init(shape: &[usize], std: f32, rng: &mut CounterRng) -> Tensor {
    Tensor::from_fn(shape, |_| (rng.normal() as f32) * std)
}

/// `dst ← l·dst + (1−l)·src` elementwise.
pub fn ema_into(dst: &mut Tensor, src: &Tensor, momentum: f32) {
    debug_assert_eq!(dst.shape(), src.shape());
    if momentum == 1.0 {
        return;
    }
    if momentum == 0.0 {
        dst.data_mut().copy_from_slice(src.data());
        return;
    }
    let l = momentum as f64;
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d = (l * *d as f64 + (1.0 - l) * *s as f64) as f32;
    }
}
