use super::BowMode;
use crate::tensor::{axpy, Tensor};

pub(super) fn forward(embedding: &Tensor, ids: &[usize], mode: BowMode) -> Vec<f64> {
    let mut out = vec![0.0; embedding.cols];
    for &id in ids {
        axpy(1.0, embedding.row(id), &mut out);
    }
    if mode == BowMode::Mean {
        let n = ids.len() as f64;
        out.iter_mut().for_each(|x| *x /= n);
    }
    out
}

pub(super) fn backward(ids: &[usize], mode: BowMode, upstream: &[f64], grad: &mut Tensor) {
    let scale = match mode {
        BowMode::Sum => 1.0,
        BowMode::Mean => 1.0 / ids.len() as f64,
    };
    for &id in ids {
        axpy(scale, upstream, grad.row_mut(id));
    }
}
