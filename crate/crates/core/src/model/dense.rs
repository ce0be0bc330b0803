//! Dense forward and backward passes.
//!
//! Embedded rows have at most two nonzero coordinates, so attention scores,
//! the attention sum and the `W` gradient are computed sparsely; the products
//! with `V` and `F` go through batched matrix multiplication.

use ndarray::{s, Array1, Array2, ArrayView1};

use super::{AttentionKind, Logits, ModelParams};
use crate::embedding::Embedded;
use crate::losses::{ce_grad_into, Target};

/// Forward quantities for a batch of embedded contexts of equal length.
#[derive(Clone, Debug)]
pub struct BatchForward {
    /// Pre-activation scores `x_Hᵀ W x_h`, `B × H`.
    pub scores: Array2<f64>,
    /// Attention weights `σ(·)`, `B × H`.
    pub weights: Array2<f64>,
    /// `Σ_h σ_h x_h`, `B × d`.
    pub attn_sum: Array2<f64>,
    /// `φ = V · attn_sum`, `B × d`.
    pub phi: Array2<f64>,
    /// `x_H + φ`, `B × d`.
    pub ff_input: Array2<f64>,
    /// `B × K`.
    pub xi_attn: Array2<f64>,
    /// `B × K`.
    pub xi_ff: Array2<f64>,
}

impl BatchForward {
    pub fn len(&self) -> usize {
        self.xi_attn.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn logits(&self, b: usize) -> Logits {
        Logits::new(self.xi_attn.row(b).to_owned(), self.xi_ff.row(b).to_owned())
    }

    /// Total logits of sentence `b`.
    pub fn xi(&self, b: usize) -> Array1<f64> {
        &self.xi_attn.row(b) + &self.xi_ff.row(b)
    }
}

fn activate(kind: AttentionKind, scores: &[f64], out: &mut [f64]) {
    match kind {
        AttentionKind::Linear => out.copy_from_slice(scores),
        AttentionKind::Relu => {
            for (o, &a) in out.iter_mut().zip(scores) {
                *o = a.max(0.0);
            }
        }
        AttentionKind::Softmax => {
            let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, &a) in out.iter_mut().zip(scores) {
                *o = (a - m).exp();
                z += *o;
            }
            for o in out.iter_mut() {
                *o /= z;
            }
        }
    }
}

fn query_scores(w: &Array2<f64>, x: &Embedded, out: &mut [f64]) {
    let (qa, qb) = x.last();
    let row_a = w.row(qa);
    let u: Array1<f64> = match qb {
        Some(qb) => &row_a + &w.row(qb),
        None => row_a.to_owned(),
    };
    let u = u.as_slice().expect("contiguous");
    for (h, o) in out.iter_mut().enumerate() {
        *o = x.dot(h, u);
    }
}

/// Runs the model on a batch of embedded contexts sharing one length.
pub fn forward_batch(params: &ModelParams, batch: &[Embedded]) -> BatchForward {
    let b = batch.len();
    let h = batch.first().map_or(0, Embedded::len);
    let d = params.dim();
    let k = params.out_vocab();
    assert!(batch.iter().all(|x| x.len() == h && x.dim() == d), "batch shapes differ");
    let mut scores = Array2::zeros((b, h));
    let mut weights = Array2::zeros((b, h));
    let mut attn_sum = Array2::zeros((b, d));
    for (i, x) in batch.iter().enumerate() {
        let mut sc = scores.row_mut(i);
        let sc = sc.as_slice_mut().expect("contiguous");
        query_scores(&params.w, x, sc);
        let mut wt = weights.row_mut(i);
        let wt = wt.as_slice_mut().expect("contiguous");
        activate(params.kind, sc, wt);
        let mut a = attn_sum.row_mut(i);
        let a = a.as_slice_mut().expect("contiguous");
        for (hh, &c) in wt.iter().enumerate() {
            x.axpy(hh, c, a);
        }
    }
    let phi = attn_sum.dot(&params.v.t());
    let mut ff_input = phi.clone();
    for (i, x) in batch.iter().enumerate() {
        let (qa, qb) = x.last();
        ff_input[[i, qa]] += 1.0;
        if let Some(qb) = qb {
            ff_input[[i, qb]] += 1.0;
        }
    }
    let xi_attn = phi.slice(s![.., ..k]).to_owned();
    let xi_ff = ff_input.dot(&params.f.slice(s![..k, ..]).t());
    BatchForward { scores, weights, attn_sum, phi, ff_input, xi_attn, xi_ff }
}

/// Logits of a single embedded context.
pub fn forward(params: &ModelParams, x: &Embedded) -> Logits {
    forward_batch(params, std::slice::from_ref(x)).logits(0)
}

/// `σ(x_Hᵀ W x_h)` for `h = 1..H`.
pub fn attention_weights(params: &ModelParams, x: &Embedded) -> Vec<f64> {
    let mut sc = vec![0.0; x.len()];
    query_scores(&params.w, x, &mut sc);
    let mut wt = vec![0.0; x.len()];
    activate(params.kind, &sc, &mut wt);
    wt
}

/// Gradients of the mean cross-entropy with respect to the dense matrices.
#[derive(Clone, Debug)]
pub struct DenseGrads {
    pub loss: f64,
    pub v: Array2<f64>,
    pub w: Array2<f64>,
    pub f: Array2<f64>,
}

/// Mean cross-entropy over the batch and its gradient with respect to
/// `V`, `W`, `F`. The gradient of the ReLU at 0 is taken to be 1, so ReLU
/// and linear attention coincide wherever the scores are nonnegative.
pub fn backward_dense(params: &ModelParams, batch: &[Embedded], targets: &[Target]) -> (BatchForward, DenseGrads) {
    assert_eq!(batch.len(), targets.len(), "one target per sentence");
    let fw = forward_batch(params, batch);
    let b = batch.len();
    let d = params.dim();
    let k = params.out_vocab();
    let h = fw.scores.ncols();
    let scale = 1.0 / b.max(1) as f64;

    let mut g = Array2::zeros((b, k));
    let mut loss = 0.0;
    for i in 0..b {
        let xi = fw.xi(i);
        let mut gi = g.row_mut(i);
        loss += ce_grad_into(xi.as_slice().expect("contiguous"), &targets[i], gi.as_slice_mut().expect("contiguous"));
        gi *= scale;
    }
    loss *= scale;

    let f_top = params.f.slice(s![..k, ..]);
    let mut df = Array2::zeros((d, d));
    df.slice_mut(s![..k, ..]).assign(&g.t().dot(&fw.ff_input));
    let mut dphi = g.dot(&f_top);
    dphi.slice_mut(s![.., ..k]).scaled_add(1.0, &g);
    let dv = dphi.t().dot(&fw.attn_sum);
    let da = dphi.dot(&params.v);

    let mut dw = Array2::zeros((d, d));
    let mut dsig = vec![0.0; h];
    for (i, x) in batch.iter().enumerate() {
        let da_i = da.row(i);
        let da_i = da_i.as_slice().expect("contiguous");
        for (hh, ds) in dsig.iter_mut().enumerate() {
            *ds = x.dot(hh, da_i);
        }
        let sc = fw.scores.row(i);
        let wt = fw.weights.row(i);
        score_grad(params.kind, sc, wt, &mut dsig);
        let (qa, qb) = x.last();
        for (hh, &ds) in dsig.iter().enumerate() {
            if ds == 0.0 {
                continue;
            }
            let (ca, cb) = x.row(hh);
            for r in std::iter::once(qa).chain(qb) {
                dw[[r, ca]] += ds;
                if let Some(cb) = cb {
                    dw[[r, cb]] += ds;
                }
            }
        }
    }
    (fw, DenseGrads { loss, v: dv, w: dw, f: df })
}

/// Maps `∂L/∂σ_h` to `∂L/∂score_h` in place.
fn score_grad(kind: AttentionKind, scores: ArrayView1<f64>, weights: ArrayView1<f64>, dsig: &mut [f64]) {
    match kind {
        AttentionKind::Linear => {}
        AttentionKind::Relu => {
            for (ds, &a) in dsig.iter_mut().zip(scores.iter()) {
                if a < 0.0 {
                    *ds = 0.0;
                }
            }
        }
        AttentionKind::Softmax => {
            let mean: f64 = weights.iter().zip(dsig.iter()).map(|(w, ds)| w * ds).sum();
            for (ds, &w) in dsig.iter_mut().zip(weights.iter()) {
                *ds = w * (*ds - mean);
            }
        }
    }
}
