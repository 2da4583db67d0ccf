use std::collections::BTreeMap;

use crate::adapter::Projection;
use crate::error::{Error, Result};
use crate::matrix::{axpy, mm, mm_nt, mm_tn, Matrix};

use super::forward::{gelu_grad, LnCache, SampleCache};
use super::{ForwardCache, LayerNorm, ParamRole, ProjWeight, ToyModel, TrainMode};

/// Gradients keyed by parameter name. Only trainable tensors have entries.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients(BTreeMap<String, Matrix>);

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.0.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn add(&mut self, name: &str, g: &Matrix) {
        match self.0.get_mut(name) {
            Some(acc) => axpy(acc, 1.0, g),
            None => {
                self.0.insert(name.to_string(), g.clone());
            }
        }
    }
}

/// Backpropagates `dlogits` (batch × classes, the gradient of the loss with
/// respect to the logits) through a cached forward pass.
pub fn backward(model: &ToyModel, cache: &ForwardCache, dlogits: &Matrix, mode: TrainMode) -> Result<Gradients> {
    if cache.generation != model.generation() {
        return Err(Error::StaleCache(format!(
            "cache from model generation {}, model is at {}",
            cache.generation,
            model.generation()
        )));
    }
    if dlogits.shape() != (cache.samples.len(), model.config().num_classes) {
        return Err(Error::Shape(format!(
            "loss gradient is {:?}, expected ({}, {})",
            dlogits.shape(),
            cache.samples.len(),
            model.config().num_classes
        )));
    }
    let mut grads = Gradients::default();
    // Seed zero entries so every trainable tensor is present even if it
    // receives no signal.
    for (name, role, m) in model.params() {
        if role.trainable(mode) {
            grads.0.insert(name, Matrix::zeros(m.rows(), m.cols()));
        }
    }
    for (i, sample) in cache.samples.iter().enumerate() {
        let dlog = dlogits.row_block(i..i + 1).expect("row in range");
        backward_sample(model, sample, &dlog, mode, &mut grads);
    }
    Ok(grads)
}

fn backward_sample(model: &ToyModel, s: &SampleCache, dlog: &Matrix, mode: TrainMode, grads: &mut Gradients) {
    let cfg = model.config();
    let t = s.tokens.len();
    let full = mode == TrainMode::Full;

    let (head_w, _) = model.head();
    grads.add("head.w", &mm_tn(dlog, &s.pooled));
    grads.add("head.b", dlog);
    let dpooled = mm(dlog, head_w);

    let mut dz = Matrix::zeros(t, cfg.dim);
    for i in 0..t {
        for (o, g) in dz.row_mut(i).iter_mut().zip(dpooled.as_slice()) {
            *o = g / t as f64;
        }
    }
    let mut dx = layer_norm_backward(&dz, &s.ln_f, model.ln_f(), full.then_some("ln_f"), grads);

    for (li, (block, lc)) in model.blocks().iter().zip(&s.layers).enumerate().rev() {
        let prefix = format!("layer{li}");

        // Feed-forward branch: x_out = x_mid + W2·gelu(W1·LN2(x_mid) + b1) + b2
        let dg = mm(&dx, &block.ffn_w2);
        if full {
            grads.add(&format!("{prefix}.ffn.w2"), &mm_tn(&dx, &lc.g));
            grads.add(&format!("{prefix}.ffn.b2"), &column_sums(&dx));
        }
        let mut df1 = dg;
        for (d, f) in df1.as_mut_slice().iter_mut().zip(lc.f1.as_slice()) {
            *d *= gelu_grad(*f);
        }
        if full {
            grads.add(&format!("{prefix}.ffn.w1"), &mm_tn(&df1, &lc.a2));
            grads.add(&format!("{prefix}.ffn.b1"), &column_sums(&df1));
        }
        let da2 = mm(&df1, &block.ffn_w1);
        let ln2_name = format!("{prefix}.ln2");
        let dmid = layer_norm_backward(&da2, &lc.ln2, &block.ln2, full.then_some(ln2_name.as_str()), grads);
        axpy(&mut dx, 1.0, &dmid);

        // Attention branch: x_mid = x_in + O(attn(Q a1, K a1, V a1))
        let dctx = projection_backward(block.projection(Projection::O), &lc.ctx, &dx, &format!("{prefix}.o"), mode, grads);
        let (dq, dk, dv) = attention_backward(&dctx, lc, cfg.heads);
        let mut da1 = projection_backward(block.projection(Projection::Q), &lc.a1, &dq, &format!("{prefix}.q"), mode, grads);
        axpy(&mut da1, 1.0, &projection_backward(block.projection(Projection::K), &lc.a1, &dk, &format!("{prefix}.k"), mode, grads));
        axpy(&mut da1, 1.0, &projection_backward(block.projection(Projection::V), &lc.a1, &dv, &format!("{prefix}.v"), mode, grads));
        let ln1_name = format!("{prefix}.ln1");
        let din = layer_norm_backward(&da1, &lc.ln1, &block.ln1, full.then_some(ln1_name.as_str()), grads);
        axpy(&mut dx, 1.0, &din);
        debug_assert_eq!(lc.x_in.shape(), dx.shape());
    }

    if full {
        let mut dtok = Matrix::zeros(cfg.vocab, cfg.dim);
        let mut dpos = Matrix::zeros(cfg.max_seq, cfg.dim);
        for (pos, &id) in s.tokens.iter().enumerate() {
            for ((a, b), g) in dtok.row_mut(id).iter_mut().zip(dpos.row_mut(pos).iter_mut()).zip(dx.row(pos)) {
                *a += g;
                *b += g;
            }
        }
        grads.add("tok_emb", &dtok);
        grads.add("pos_emb", &dpos);
    }
}

/// Gradient through `y = x·Wᵀ` (dense) or `y = x·baseᵀ + s·(x·Aᵀ)·Bᵀ`.
/// Accumulates weight gradients for trainable tensors; returns dL/dx.
fn projection_backward(w: &ProjWeight, x: &Matrix, dy: &Matrix, name: &str, mode: TrainMode, grads: &mut Gradients) -> Matrix {
    match w {
        ProjWeight::Dense(m) => {
            if ParamRole::Backbone.trainable(mode) {
                grads.add(name, &mm_tn(dy, x));
            }
            mm(dy, m)
        }
        ProjWeight::Adapted(a) => {
            let dyb = mm(dy, &a.b); // T×r
            let u = mm_nt(x, &a.a); // T×r
            let mut db = mm_tn(dy, &u);
            db.as_mut_slice().iter_mut().for_each(|v| *v *= a.scale);
            let mut da = mm_tn(&dyb, x);
            da.as_mut_slice().iter_mut().for_each(|v| *v *= a.scale);
            grads.add(&format!("{name}.b"), &db);
            grads.add(&format!("{name}.a"), &da);
            let mut dx = mm(dy, &a.base);
            axpy(&mut dx, a.scale, &mm(&dyb, &a.a));
            dx
        }
    }
}

fn attention_backward(dctx: &Matrix, lc: &super::forward::LayerCache, heads: usize) -> (Matrix, Matrix, Matrix) {
    let (t, d) = dctx.shape();
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut dq = Matrix::zeros(t, d);
    let mut dk = Matrix::zeros(t, d);
    let mut dv = Matrix::zeros(t, d);
    for h in 0..heads {
        let cols = h * hd..(h + 1) * hd;
        let qh = lc.q.columns(cols.clone()).unwrap();
        let kh = lc.k.columns(cols.clone()).unwrap();
        let vh = lc.v.columns(cols.clone()).unwrap();
        let dch = dctx.columns(cols.clone()).unwrap();
        let p = &lc.probs[h];

        let dp = mm_nt(&dch, &vh);
        let dvh = mm_tn(p, &dch);
        let mut ds = dp;
        for i in 0..t {
            let prow = p.row(i);
            let row = ds.row_mut(i);
            let inner: f64 = row.iter().zip(prow).map(|(a, b)| a * b).sum();
            for (v, pv) in row.iter_mut().zip(prow) {
                *v = pv * (*v - inner) * scale;
            }
        }
        let dqh = mm(&ds, &kh);
        let dkh = mm_tn(&ds, &qh);
        for i in 0..t {
            dq.row_mut(i)[cols.clone()].copy_from_slice(dqh.row(i));
            dk.row_mut(i)[cols.clone()].copy_from_slice(dkh.row(i));
            dv.row_mut(i)[cols.clone()].copy_from_slice(dvh.row(i));
        }
    }
    (dq, dk, dv)
}

/// Returns dL/dx; adds gain/bias gradients under `name` when given.
fn layer_norm_backward(dy: &Matrix, c: &LnCache, ln: &LayerNorm, name: Option<&str>, grads: &mut Gradients) -> Matrix {
    let (t, d) = dy.shape();
    if let Some(name) = name {
        let mut dgain = Matrix::zeros(1, d);
        for i in 0..t {
            for ((g, dyv), h) in dgain.as_mut_slice().iter_mut().zip(dy.row(i)).zip(c.xhat.row(i)) {
                *g += dyv * h;
            }
        }
        grads.add(&format!("{name}.gain"), &dgain);
        grads.add(&format!("{name}.bias"), &column_sums(dy));
    }
    let mut dx = Matrix::zeros(t, d);
    for i in 0..t {
        let dxhat: Vec<f64> = dy.row(i).iter().zip(ln.gain.as_slice()).map(|(a, g)| a * g).collect();
        let xhat = c.xhat.row(i);
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dxhat.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
            *o = c.inv_std[i] * (dxhat[j] - mean_d - xhat[j] * mean_dx);
        }
    }
    dx
}

fn column_sums(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, m.cols());
    for i in 0..m.rows() {
        for (o, v) in out.as_mut_slice().iter_mut().zip(m.row(i)) {
            *o += v;
        }
    }
    out
}
