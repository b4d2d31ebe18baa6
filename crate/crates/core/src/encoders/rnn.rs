//! Stacked GRU and LSTM encoders with backpropagation through time.
//!
//! GRU (gates stacked as `[z; r; n]`):
//!   z = σ(W_z x + U_z h + b_z),  r = σ(W_r x + U_r h + b_r)
//!   n = tanh(W_n x + U_n (r ⊙ h) + b_n),  h' = (1 − z) ⊙ h + z ⊙ n
//!
//! LSTM (gates stacked as `[i; f; g; o]`):
//!   i, f, o = σ(·),  g = tanh(·)   with pre-activations W x + U h + b
//!   c' = f ⊙ c + i ⊙ g,  h' = o ⊙ tanh(c')
//!
//! State starts at zero. The sentence embedding is the final hidden state of
//! the top layer, mapped to the embedding size by a linear layer when
//! `hidden != N`.

use rand::Rng;

use super::{Cell, Linear};
use crate::tensor::{axpy, dot, sigmoid, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct RnnLayer {
    /// `gates·H × input`
    pub w: Tensor,
    /// `gates·H × H`
    pub u: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RnnParams {
    pub cell: Cell,
    pub hidden: usize,
    pub layers: Vec<RnnLayer>,
    pub output: Option<Linear>,
}

#[derive(Debug, Clone)]
pub(super) struct RnnTrace {
    layers: Vec<LayerTrace>,
    top: Vec<f64>,
}

#[derive(Debug, Clone)]
struct LayerTrace {
    /// Inputs x_1..x_T.
    x: Vec<Vec<f64>>,
    /// Hidden states h_0..h_T.
    h: Vec<Vec<f64>>,
    /// LSTM cell states c_0..c_T (empty for GRU).
    c: Vec<Vec<f64>>,
    /// Post-activation gates per step, stacked as in the weight layout.
    gates: Vec<Vec<f64>>,
}

impl RnnParams {
    pub(super) fn init<R: Rng + ?Sized>(
        cell: Cell,
        n_layers: usize,
        dim: usize,
        hidden: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        let g = cell.gates();
        let layers = (0..n_layers)
            .map(|l| {
                let input = if l == 0 { dim } else { hidden };
                let mut b = Tensor::zeros(format!("rnn.{l}.b"), g * hidden, 1);
                if cell == Cell::Lstm {
                    b.data[hidden..2 * hidden].fill(1.0);
                }
                RnnLayer {
                    w: Tensor::uniform(format!("rnn.{l}.w"), g * hidden, input, scale, rng),
                    u: Tensor::uniform(format!("rnn.{l}.u"), g * hidden, hidden, scale, rng),
                    b,
                }
            })
            .collect();
        let output = (hidden != dim).then(|| Linear::uniform("rnn.out", dim, hidden, scale, rng));
        Self {
            cell,
            hidden,
            layers,
            output,
        }
    }

    pub(super) fn zeros_like(&self) -> Self {
        Self {
            cell: self.cell,
            hidden: self.hidden,
            layers: self
                .layers
                .iter()
                .map(|l| RnnLayer {
                    w: l.w.zeros_like(),
                    u: l.u.zeros_like(),
                    b: l.b.zeros_like(),
                })
                .collect(),
            output: self.output.as_ref().map(Linear::zeros_like),
        }
    }

    pub(super) fn collect<'a>(&'a self, out: &mut Vec<&'a Tensor>) {
        for l in &self.layers {
            out.extend([&l.w, &l.u, &l.b]);
        }
        if let Some(o) = &self.output {
            out.extend([&o.weight, &o.bias]);
        }
    }

    pub(super) fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        for l in &mut self.layers {
            out.extend([&mut l.w, &mut l.u, &mut l.b]);
        }
        if let Some(o) = &mut self.output {
            out.extend([&mut o.weight, &mut o.bias]);
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        self.collect_mut(&mut out);
        out
    }

    pub(super) fn forward(&self, embedding: &Tensor, ids: &[usize]) -> (Vec<f64>, RnnTrace) {
        let mut inputs: Vec<Vec<f64>> = ids.iter().map(|&id| embedding.row(id).to_vec()).collect();
        let mut traces = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let trace = match self.cell {
                Cell::Gru => gru_forward(layer, self.hidden, inputs),
                Cell::Lstm => lstm_forward(layer, self.hidden, inputs),
            };
            inputs = trace.h[1..].to_vec();
            traces.push(trace);
        }
        let top = traces
            .last()
            .and_then(|t| t.h.last())
            .cloned()
            .expect("at least one layer and one step");
        let out = match &self.output {
            Some(lin) => lin.forward(&top),
            None => top.clone(),
        };
        (
            out,
            RnnTrace {
                layers: traces,
                top,
            },
        )
    }

    pub(super) fn backward(
        &self,
        trace: &RnnTrace,
        ids: &[usize],
        upstream: &[f64],
        grads: &mut RnnParams,
        embedding_grad: &mut Tensor,
    ) {
        let g_top = match (&self.output, &mut grads.output) {
            (Some(lin), Some(glin)) => lin.backward(&trace.top, upstream, glin),
            _ => upstream.to_vec(),
        };
        let steps = ids.len();
        let mut dh_out = vec![vec![0.0; self.hidden]; steps];
        dh_out[steps - 1] = g_top;
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let lt = &trace.layers[l];
            let gl = &mut grads.layers[l];
            dh_out = match self.cell {
                Cell::Gru => gru_backward(layer, self.hidden, lt, &dh_out, gl),
                Cell::Lstm => lstm_backward(layer, self.hidden, lt, &dh_out, gl),
            };
        }
        for (&id, dx) in ids.iter().zip(&dh_out) {
            axpy(1.0, dx, embedding_grad.row_mut(id));
        }
    }
}

/// `W x + b` over all gate rows.
fn input_preactivation(layer: &RnnLayer, x: &[f64]) -> Vec<f64> {
    let mut a = layer.b.data.clone();
    layer.w.matvec_acc(x, &mut a);
    a
}

fn gru_forward(layer: &RnnLayer, hidden: usize, x: Vec<Vec<f64>>) -> LayerTrace {
    let mut h = vec![vec![0.0; hidden]];
    let mut gates = Vec::with_capacity(x.len());
    for xt in &x {
        let hp = h.last().unwrap();
        let a = input_preactivation(layer, xt);
        let mut gate = vec![0.0; 3 * hidden];
        for k in 0..hidden {
            gate[k] = sigmoid(a[k] + dot(layer.u.row(k), hp));
            gate[hidden + k] = sigmoid(a[hidden + k] + dot(layer.u.row(hidden + k), hp));
        }
        let rh: Vec<f64> = (0..hidden).map(|k| gate[hidden + k] * hp[k]).collect();
        for k in 0..hidden {
            gate[2 * hidden + k] =
                (a[2 * hidden + k] + dot(layer.u.row(2 * hidden + k), &rh)).tanh();
        }
        let next = (0..hidden)
            .map(|k| {
                let z = gate[k];
                (1.0 - z) * hp[k] + z * gate[2 * hidden + k]
            })
            .collect();
        gates.push(gate);
        h.push(next);
    }
    LayerTrace {
        x,
        h,
        c: Vec::new(),
        gates,
    }
}

fn gru_backward(
    layer: &RnnLayer,
    hidden: usize,
    trace: &LayerTrace,
    dh_out: &[Vec<f64>],
    grads: &mut RnnLayer,
) -> Vec<Vec<f64>> {
    let steps = trace.x.len();
    let mut dx = vec![Vec::new(); steps];
    let mut dh_next = vec![0.0; hidden];
    for t in (0..steps).rev() {
        let hp = &trace.h[t];
        let gate = &trace.gates[t];
        let (z, r, n) = (
            &gate[..hidden],
            &gate[hidden..2 * hidden],
            &gate[2 * hidden..],
        );
        let dh: Vec<f64> = dh_out[t].iter().zip(&dh_next).map(|(a, b)| a + b).collect();

        let mut da = vec![0.0; 3 * hidden];
        let mut dh_prev = vec![0.0; hidden];
        for k in 0..hidden {
            da[k] = dh[k] * (n[k] - hp[k]) * z[k] * (1.0 - z[k]);
            da[2 * hidden + k] = dh[k] * z[k] * (1.0 - n[k] * n[k]);
            dh_prev[k] = dh[k] * (1.0 - z[k]);
        }
        // candidate path through r ⊙ h
        let mut d_rh = vec![0.0; hidden];
        for k in 0..hidden {
            axpy(da[2 * hidden + k], layer.u.row(2 * hidden + k), &mut d_rh);
        }
        for k in 0..hidden {
            da[hidden + k] = d_rh[k] * hp[k] * r[k] * (1.0 - r[k]);
            dh_prev[k] += d_rh[k] * r[k];
        }
        let rh: Vec<f64> = (0..hidden).map(|k| r[k] * hp[k]).collect();

        grads.w.add_outer(&da, &trace.x[t]);
        for (g, d) in grads.b.data.iter_mut().zip(&da) {
            *g += d;
        }
        for (k, &d) in da[..2 * hidden].iter().enumerate() {
            axpy(d, hp, grads.u.row_mut(k));
            axpy(d, layer.u.row(k), &mut dh_prev);
        }
        for k in 0..hidden {
            axpy(da[2 * hidden + k], &rh, grads.u.row_mut(2 * hidden + k));
        }
        dx[t] = layer.w.matvec_t(&da);
        dh_next = dh_prev;
    }
    dx
}

fn lstm_forward(layer: &RnnLayer, hidden: usize, x: Vec<Vec<f64>>) -> LayerTrace {
    let mut h = vec![vec![0.0; hidden]];
    let mut c = vec![vec![0.0; hidden]];
    let mut gates = Vec::with_capacity(x.len());
    for xt in &x {
        let hp = h.last().unwrap();
        let cp = c.last().unwrap();
        let mut a = input_preactivation(layer, xt);
        layer.u.matvec_acc(hp, &mut a);
        let mut gate = vec![0.0; 4 * hidden];
        for k in 0..hidden {
            gate[k] = sigmoid(a[k]);
            gate[hidden + k] = sigmoid(a[hidden + k]);
            gate[2 * hidden + k] = a[2 * hidden + k].tanh();
            gate[3 * hidden + k] = sigmoid(a[3 * hidden + k]);
        }
        let cn: Vec<f64> = (0..hidden)
            .map(|k| gate[hidden + k] * cp[k] + gate[k] * gate[2 * hidden + k])
            .collect();
        let hn = (0..hidden)
            .map(|k| gate[3 * hidden + k] * cn[k].tanh())
            .collect();
        gates.push(gate);
        c.push(cn);
        h.push(hn);
    }
    LayerTrace { x, h, c, gates }
}

fn lstm_backward(
    layer: &RnnLayer,
    hidden: usize,
    trace: &LayerTrace,
    dh_out: &[Vec<f64>],
    grads: &mut RnnLayer,
) -> Vec<Vec<f64>> {
    let steps = trace.x.len();
    let mut dx = vec![Vec::new(); steps];
    let mut dh_next = vec![0.0; hidden];
    let mut dc_next = vec![0.0; hidden];
    for t in (0..steps).rev() {
        let gate = &trace.gates[t];
        let (ig, fg, gg, og) = (
            &gate[..hidden],
            &gate[hidden..2 * hidden],
            &gate[2 * hidden..3 * hidden],
            &gate[3 * hidden..],
        );
        let (c_prev, c_cur) = (&trace.c[t], &trace.c[t + 1]);
        let mut da = vec![0.0; 4 * hidden];
        let mut dc_prev = vec![0.0; hidden];
        for k in 0..hidden {
            let dh = dh_out[t][k] + dh_next[k];
            let tc = c_cur[k].tanh();
            let dc = dc_next[k] + dh * og[k] * (1.0 - tc * tc);
            da[k] = dc * gg[k] * ig[k] * (1.0 - ig[k]);
            da[hidden + k] = dc * c_prev[k] * fg[k] * (1.0 - fg[k]);
            da[2 * hidden + k] = dc * ig[k] * (1.0 - gg[k] * gg[k]);
            da[3 * hidden + k] = dh * tc * og[k] * (1.0 - og[k]);
            dc_prev[k] = dc * fg[k];
        }
        grads.w.add_outer(&da, &trace.x[t]);
        grads.u.add_outer(&da, &trace.h[t]);
        for (g, d) in grads.b.data.iter_mut().zip(&da) {
            *g += d;
        }
        dh_next = layer.u.matvec_t(&da);
        dc_next = dc_prev;
        dx[t] = layer.w.matvec_t(&da);
    }
    dx
}
