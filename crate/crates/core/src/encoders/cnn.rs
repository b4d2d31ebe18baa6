//! One convolutional layer over the embedded sequence, tanh, max-over-time
//! pooling per channel, then a fully connected layer to the embedding size.
//! Sequences shorter than the widest filter are right-padded with zero rows.

use rand::Rng;

use super::Linear;
use crate::tensor::{axpy, dot, Tensor};

pub const DEFAULT_FILTER_WIDTHS: [usize; 4] = [2, 3, 4, 5];

#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub width: usize,
    /// `channels × width·N`; column `k·N + d` weighs component `d` of the
    /// `k`-th token in the window.
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnParams {
    pub convs: Vec<Conv>,
    pub fc: Linear,
}

#[derive(Debug, Clone)]
pub(super) struct CnnTrace {
    /// Padded input rows.
    x: Vec<Vec<f64>>,
    /// Per conv: (argmax position, pooled activation) per channel.
    pooled: Vec<Vec<(usize, f64)>>,
    features: Vec<f64>,
}

impl CnnParams {
    pub(super) fn init<R: Rng + ?Sized>(
        widths: &[usize],
        dim: usize,
        channels: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        let convs = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| Conv {
                width: w,
                weight: Tensor::uniform(
                    format!("cnn.conv{i}.weight"),
                    channels,
                    w * dim,
                    scale,
                    rng,
                ),
                bias: Tensor::zeros(format!("cnn.conv{i}.bias"), channels, 1),
            })
            .collect();
        let fc = Linear::uniform("cnn.fc", dim, channels * widths.len(), scale, rng);
        Self { convs, fc }
    }

    pub(super) fn zeros_like(&self) -> Self {
        Self {
            convs: self
                .convs
                .iter()
                .map(|c| Conv {
                    width: c.width,
                    weight: c.weight.zeros_like(),
                    bias: c.bias.zeros_like(),
                })
                .collect(),
            fc: self.fc.zeros_like(),
        }
    }

    pub(super) fn collect<'a>(&'a self, out: &mut Vec<&'a Tensor>) {
        for c in &self.convs {
            out.extend([&c.weight, &c.bias]);
        }
        out.extend([&self.fc.weight, &self.fc.bias]);
    }

    pub(super) fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        for c in &mut self.convs {
            out.extend([&mut c.weight, &mut c.bias]);
        }
        out.extend([&mut self.fc.weight, &mut self.fc.bias]);
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        self.collect_mut(&mut out);
        out
    }

    fn max_width(&self) -> usize {
        self.convs.iter().map(|c| c.width).max().unwrap_or(1)
    }

    pub(super) fn forward(&self, embedding: &Tensor, ids: &[usize]) -> (Vec<f64>, CnnTrace) {
        let dim = embedding.cols;
        let padded_len = ids.len().max(self.max_width());
        let x: Vec<Vec<f64>> = (0..padded_len)
            .map(|t| match ids.get(t) {
                Some(&id) => embedding.row(id).to_vec(),
                None => vec![0.0; dim],
            })
            .collect();

        let mut pooled = Vec::with_capacity(self.convs.len());
        let mut features = Vec::new();
        for conv in &self.convs {
            let channels = conv.weight.rows;
            let mut best = vec![(0usize, f64::NEG_INFINITY); channels];
            for start in 0..=padded_len - conv.width {
                for (ch, slot) in best.iter_mut().enumerate() {
                    let w = conv.weight.row(ch);
                    let mut pre = conv.bias.data[ch];
                    for k in 0..conv.width {
                        pre += dot(&w[k * dim..(k + 1) * dim], &x[start + k]);
                    }
                    let act = pre.tanh();
                    if act > slot.1 {
                        *slot = (start, act);
                    }
                }
            }
            features.extend(best.iter().map(|&(_, a)| a));
            pooled.push(best);
        }
        let out = self.fc.forward(&features);
        (
            out,
            CnnTrace {
                x,
                pooled,
                features,
            },
        )
    }

    pub(super) fn backward(
        &self,
        trace: &CnnTrace,
        ids: &[usize],
        upstream: &[f64],
        grads: &mut CnnParams,
        embedding_grad: &mut Tensor,
    ) {
        let dim = embedding_grad.cols;
        let d_features = self.fc.backward(&trace.features, upstream, &mut grads.fc);
        let mut offset = 0;
        for ((conv, gconv), pooled) in self.convs.iter().zip(&mut grads.convs).zip(&trace.pooled) {
            for (ch, &(start, act)) in pooled.iter().enumerate() {
                let d_pre = d_features[offset + ch] * (1.0 - act * act);
                if d_pre == 0.0 {
                    continue;
                }
                gconv.bias.data[ch] += d_pre;
                let w = conv.weight.row(ch);
                let gw = gconv.weight.row_mut(ch);
                for k in 0..conv.width {
                    let t = start + k;
                    axpy(d_pre, &trace.x[t], &mut gw[k * dim..(k + 1) * dim]);
                    if let Some(&id) = ids.get(t) {
                        axpy(
                            d_pre,
                            &w[k * dim..(k + 1) * dim],
                            embedding_grad.row_mut(id),
                        );
                    }
                }
            }
            offset += pooled.len();
        }
    }
}
