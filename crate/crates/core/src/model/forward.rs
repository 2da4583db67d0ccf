use crate::adapter::Projection;
use crate::error::{Error, Result};
use crate::matrix::{mm, mm_nt, Matrix};

use super::{LayerNorm, ToyModel, LN_EPS};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub(super) struct LnCache {
    pub xhat: Matrix,
    pub inv_std: Vec<f64>,
}

pub(super) struct LayerCache {
    pub x_in: Matrix,
    pub ln1: LnCache,
    pub a1: Matrix,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// Per head, T×T row-stochastic.
    pub probs: Vec<Matrix>,
    pub ctx: Matrix,
    pub ln2: LnCache,
    pub a2: Matrix,
    pub f1: Matrix,
    pub g: Matrix,
}

pub(super) struct SampleCache {
    pub tokens: Vec<usize>,
    pub layers: Vec<LayerCache>,
    pub ln_f: LnCache,
    pub pooled: Matrix,
}

/// Activations retained for [`super::backward`].
pub struct ForwardCache {
    pub(super) generation: u64,
    pub(super) samples: Vec<SampleCache>,
}

impl ForwardCache {
    /// Attention probabilities of one head (rows sum to one).
    pub fn attention(&self, sample: usize, layer: usize, head: usize) -> &Matrix {
        &self.samples[sample].layers[layer].probs[head]
    }

    pub fn batch_size(&self) -> usize {
        self.samples.len()
    }

    /// Mean-pooled final representation of one sample (1×dim).
    pub fn pooled(&self, sample: usize) -> &Matrix {
        &self.samples[sample].pooled
    }
}

pub struct ForwardOutput {
    /// batch × num_classes.
    pub logits: Matrix,
    pub cache: ForwardCache,
}

pub fn forward(model: &ToyModel, batch: &[Vec<usize>]) -> Result<ForwardOutput> {
    let cfg = model.config();
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    for (i, seq) in batch.iter().enumerate() {
        if seq.is_empty() || seq.len() > cfg.max_seq {
            return Err(Error::Input(format!("sequence {i} has length {}, allowed 1..={}", seq.len(), cfg.max_seq)));
        }
        if let Some(&id) = seq.iter().find(|&&id| id >= cfg.vocab) {
            return Err(Error::Input(format!("token id {id} in sequence {i} exceeds vocab {}", cfg.vocab)));
        }
    }
    let mut logits = Matrix::zeros(batch.len(), cfg.num_classes);
    let mut samples = Vec::with_capacity(batch.len());
    for (row, seq) in batch.iter().enumerate() {
        let (out, cache) = forward_sample(model, seq);
        logits.row_mut(row).copy_from_slice(out.as_slice());
        samples.push(cache);
    }
    if logits.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    Ok(ForwardOutput { logits, cache: ForwardCache { generation: model.generation(), samples } })
}

fn forward_sample(model: &ToyModel, tokens: &[usize]) -> (Matrix, SampleCache) {
    let cfg = model.config();
    let (t, d) = (tokens.len(), cfg.dim);
    let mut x = Matrix::zeros(t, d);
    for (pos, &id) in tokens.iter().enumerate() {
        let row = x.row_mut(pos);
        for ((o, e), p) in row.iter_mut().zip(model.tok_emb().row(id)).zip(model.pos_emb().row(pos)) {
            *o = e + p;
        }
    }

    let mut layers = Vec::with_capacity(cfg.layers);
    for block in model.blocks() {
        let x_in = x.clone();
        let (a1, ln1) = layer_norm(&x, &block.ln1);
        let q = block.projection(Projection::Q).apply(&a1);
        let k = block.projection(Projection::K).apply(&a1);
        let v = block.projection(Projection::V).apply(&a1);
        let (ctx, probs) = attention(&q, &k, &v, cfg.heads);
        let attn_out = block.projection(Projection::O).apply(&ctx);
        add_assign(&mut x, &attn_out);

        let (a2, ln2) = layer_norm(&x, &block.ln2);
        let mut f1 = mm_nt(&a2, &block.ffn_w1);
        add_row(&mut f1, &block.ffn_b1);
        let g = f1.map(gelu);
        let mut f2 = mm_nt(&g, &block.ffn_w2);
        add_row(&mut f2, &block.ffn_b2);
        add_assign(&mut x, &f2);

        layers.push(LayerCache { x_in, ln1, a1, q, k, v, probs, ctx, ln2, a2, f1, g });
    }

    let (z, ln_f) = layer_norm(&x, model.ln_f());
    let mut pooled = Matrix::zeros(1, d);
    for i in 0..t {
        for (p, zv) in pooled.as_mut_slice().iter_mut().zip(z.row(i)) {
            *p += zv;
        }
    }
    pooled.as_mut_slice().iter_mut().for_each(|p| *p /= t as f64);
    let (head_w, head_b) = model.head();
    let mut out = mm_nt(&pooled, head_w);
    add_row(&mut out, head_b);
    (out, SampleCache { tokens: tokens.to_vec(), layers, ln_f, pooled })
}

/// Multi-head scaled dot-product attention. Returns the concatenated context
/// and the per-head probability matrices.
pub(super) fn attention(q: &Matrix, k: &Matrix, v: &Matrix, heads: usize) -> (Matrix, Vec<Matrix>) {
    let (t, d) = q.shape();
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut ctx = Matrix::zeros(t, d);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = h * hd..(h + 1) * hd;
        let qh = q.columns(cols.clone()).unwrap();
        let kh = k.columns(cols.clone()).unwrap();
        let vh = v.columns(cols.clone()).unwrap();
        let scores = mm_nt(&qh, &kh).map(|s| s * scale);
        let p = softmax_rows(&scores);
        let ch = mm(&p, &vh);
        for i in 0..t {
            ctx.row_mut(i)[cols.clone()].copy_from_slice(ch.row(i));
        }
        probs.push(p);
    }
    (ctx, probs)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

pub(super) fn layer_norm(x: &Matrix, ln: &LayerNorm) -> (Matrix, LnCache) {
    let (t, d) = x.shape();
    let mut xhat = Matrix::zeros(t, d);
    let mut y = Matrix::zeros(t, d);
    let mut inv_std = Vec::with_capacity(t);
    for i in 0..t {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(inv);
        for j in 0..d {
            let h = (row[j] - mean) * inv;
            xhat.row_mut(i)[j] = h;
            y.row_mut(i)[j] = h * ln.gain.as_slice()[j] + ln.bias.as_slice()[j];
        }
    }
    (y, LnCache { xhat, inv_std })
}

pub(super) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub(super) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

pub(super) fn add_assign(acc: &mut Matrix, m: &Matrix) {
    crate::matrix::axpy(acc, 1.0, m);
}

fn add_row(m: &mut Matrix, bias: &Matrix) {
    for i in 0..m.rows() {
        for (v, b) in m.row_mut(i).iter_mut().zip(bias.as_slice()) {
            *v += b;
        }
    }
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. logits.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if labels.len() != logits.rows() {
        return Err(Error::Shape(format!("{} labels for {} logit rows", labels.len(), logits.rows())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= logits.cols()) {
        return Err(Error::Input(format!("label {l} out of range for {} classes", logits.cols())));
    }
    let n = labels.len() as f64;
    let mut grad = softmax_rows(logits);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        grad.row_mut(i)[y] -= 1.0;
    }
    grad.as_mut_slice().iter_mut().for_each(|g| *g /= n);
    Ok((loss / n, grad))
}
