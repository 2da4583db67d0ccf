//! Desk-scale pre-norm transformer encoder with hand-written gradients.
//!
//! Per layer: `h = x + Attn(LN1(x))`, `x' = h + FFN(LN2(h))` with a GELU
//! feed-forward. The final representation is layer-normed, mean-pooled over
//! positions and fed to a linear classifier. Linear maps follow the
//! `y = x·Wᵀ` convention, so a projection weight is `out × in`.

mod backward;
mod forward;
pub mod optim;
pub mod task;
pub mod train;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapter::{AdaptedLinear, LayerAdapters, Projection};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{gaussian_matrix, named_rng};
use crate::store::TensorStore;

pub use backward::{backward, Gradients};
pub use forward::{cross_entropy, forward, softmax_rows, ForwardCache, ForwardOutput};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// Reference desk-scale configuration.
    fn default() -> Self {
        Self { layers: 2, dim: 64, heads: 4, ffn_dim: 128, vocab: 32, max_seq: 16, num_classes: 2, seed: 11 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("dim", self.dim),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("vocab", self.vocab),
            ("max_seq", self.max_seq),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model {name} must be positive")));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!("dim {} is not a multiple of heads {}", self.dim, self.heads)));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Reads the `model_config` metadata entry of a checkpoint.
    pub fn from_checkpoint(store: &TensorStore) -> Result<Self> {
        let meta = store.meta("model_config").ok_or_else(|| Error::Config("checkpoint lacks `model_config` metadata".into()))?;
        let config: Self = serde_json::from_str(meta).map_err(|e| Error::Config(format!("bad model_config metadata: {e}")))?;
        config.validate()?;
        Ok(config)
    }
}

/// Which parameters receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Every parameter except frozen adapter bases.
    Full,
    /// Adapter factors and the classifier head only.
    Adapters,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Backbone,
    AdapterFactor,
    AdapterBase,
    Head,
}

impl ParamRole {
    pub fn trainable(self, mode: TrainMode) -> bool {
        match (self, mode) {
            (ParamRole::AdapterBase, _) => false,
            (ParamRole::Backbone, TrainMode::Adapters) => false,
            _ => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProjWeight {
    Dense(Matrix),
    Adapted(AdaptedLinear),
}

impl ProjWeight {
    pub fn effective(&self) -> Matrix {
        match self {
            ProjWeight::Dense(w) => w.clone(),
            ProjWeight::Adapted(a) => a.effective_weight(),
        }
    }

    pub(crate) fn apply(&self, x: &Matrix) -> Matrix {
        match self {
            ProjWeight::Dense(w) => crate::matrix::mm_nt(x, w),
            ProjWeight::Adapted(a) => crate::adapter::forward_unchecked(a, x),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Matrix,
    pub bias: Matrix,
}

impl LayerNorm {
    fn new(dim: usize) -> Self {
        Self { gain: Matrix::new(1, dim, vec![1.0; dim]).unwrap(), bias: Matrix::zeros(1, dim) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    /// Indexed by `Projection as usize` (q, k, v, o).
    pub proj: [ProjWeight; 4],
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
    /// ffn_dim × dim.
    pub ffn_w1: Matrix,
    pub ffn_b1: Matrix,
    /// dim × ffn_dim.
    pub ffn_w2: Matrix,
    pub ffn_b2: Matrix,
}

impl Block {
    pub fn projection(&self, p: Projection) -> &ProjWeight {
        &self.proj[p as usize]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    config: ModelConfig,
    tok_emb: Matrix,
    pos_emb: Matrix,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head_w: Matrix,
    head_b: Matrix,
    /// Bumped on every mutable parameter access; caches record it.
    generation: u64,
}

impl ToyModel {
    /// Fresh randomly initialized model. Every tensor draws from its own
    /// stream keyed by `(config.seed, name)`.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let draw = |name: &str, rows: usize, cols: usize, std: f64| gaussian_matrix(rows, cols, std, &mut named_rng(seed, name));
        let (d, f) = (config.dim, config.ffn_dim);
        let blocks = (0..config.layers)
            .map(|i| Block {
                proj: Projection::ALL.map(|p| ProjWeight::Dense(draw(&p.weight_name(i), d, d, 1.0 / (d as f64).sqrt()))),
                ln1: LayerNorm::new(d),
                ln2: LayerNorm::new(d),
                ffn_w1: draw(&format!("layer{i}.ffn.w1"), f, d, 1.0 / (d as f64).sqrt()),
                ffn_b1: Matrix::zeros(1, f),
                ffn_w2: draw(&format!("layer{i}.ffn.w2"), d, f, 1.0 / (f as f64).sqrt()),
                ffn_b2: Matrix::zeros(1, d),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            tok_emb: draw("tok_emb", config.vocab, d, 1.0),
            pos_emb: draw("pos_emb", config.max_seq, d, 1.0),
            blocks,
            ln_f: LayerNorm::new(d),
            head_w: draw("head.w", config.num_classes, d, 1.0 / (d as f64).sqrt()),
            head_b: Matrix::zeros(1, config.num_classes),
            generation: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub(crate) fn tok_emb(&self) -> &Matrix {
        &self.tok_emb
    }

    pub(crate) fn pos_emb(&self) -> &Matrix {
        &self.pos_emb
    }

    pub(crate) fn ln_f(&self) -> &LayerNorm {
        &self.ln_f
    }

    pub(crate) fn head(&self) -> (&Matrix, &Matrix) {
        (&self.head_w, &self.head_b)
    }

    /// Replaces the classifier head with a fresh draw keyed by `seed`
    /// (weights N(0, 1/d), zero bias).
    pub fn reset_head(&mut self, seed: u64) {
        let d = self.config.dim;
        self.head_w = gaussian_matrix(self.config.num_classes, d, 1.0 / (d as f64).sqrt(), &mut named_rng(seed, "finetune.head.w"));
        self.head_b = Matrix::zeros(1, self.config.num_classes);
        self.generation += 1;
    }

    /// Every parameter tensor with its checkpoint name and role.
    pub fn params(&self) -> Vec<(String, ParamRole, &Matrix)> {
        let mut out = vec![
            ("tok_emb".to_string(), ParamRole::Backbone, &self.tok_emb),
            ("pos_emb".to_string(), ParamRole::Backbone, &self.pos_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (p, w) in Projection::ALL.iter().zip(&b.proj) {
                let name = p.weight_name(i);
                match w {
                    ProjWeight::Dense(m) => out.push((name, ParamRole::Backbone, m)),
                    ProjWeight::Adapted(a) => {
                        out.push((format!("{name}.a"), ParamRole::AdapterFactor, &a.a));
                        out.push((format!("{name}.b"), ParamRole::AdapterFactor, &a.b));
                        out.push((format!("{name}.base"), ParamRole::AdapterBase, &a.base));
                    }
                }
            }
            out.push((format!("layer{i}.ln1.gain"), ParamRole::Backbone, &b.ln1.gain));
            out.push((format!("layer{i}.ln1.bias"), ParamRole::Backbone, &b.ln1.bias));
            out.push((format!("layer{i}.ln2.gain"), ParamRole::Backbone, &b.ln2.gain));
            out.push((format!("layer{i}.ln2.bias"), ParamRole::Backbone, &b.ln2.bias));
            out.push((format!("layer{i}.ffn.w1"), ParamRole::Backbone, &b.ffn_w1));
            out.push((format!("layer{i}.ffn.b1"), ParamRole::Backbone, &b.ffn_b1));
            out.push((format!("layer{i}.ffn.w2"), ParamRole::Backbone, &b.ffn_w2));
            out.push((format!("layer{i}.ffn.b2"), ParamRole::Backbone, &b.ffn_b2));
        }
        out.push(("ln_f.gain".to_string(), ParamRole::Backbone, &self.ln_f.gain));
        out.push(("ln_f.bias".to_string(), ParamRole::Backbone, &self.ln_f.bias));
        out.push(("head.w".to_string(), ParamRole::Head, &self.head_w));
        out.push(("head.b".to_string(), ParamRole::Head, &self.head_b));
        out
    }

    /// Mutable view of the parameters trainable under `mode`.
    pub fn trainable_mut(&mut self, mode: TrainMode) -> Vec<(String, &mut Matrix)> {
        self.generation += 1;
        let mut out: Vec<(String, ParamRole, &mut Matrix)> = vec![
            ("tok_emb".to_string(), ParamRole::Backbone, &mut self.tok_emb),
            ("pos_emb".to_string(), ParamRole::Backbone, &mut self.pos_emb),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (p, w) in Projection::ALL.iter().zip(b.proj.iter_mut()) {
                let name = p.weight_name(i);
                match w {
                    ProjWeight::Dense(m) => out.push((name, ParamRole::Backbone, m)),
                    ProjWeight::Adapted(a) => {
                        out.push((format!("{name}.a"), ParamRole::AdapterFactor, &mut a.a));
                        out.push((format!("{name}.b"), ParamRole::AdapterFactor, &mut a.b));
                    }
                }
            }
            out.push((format!("layer{i}.ln1.gain"), ParamRole::Backbone, &mut b.ln1.gain));
            out.push((format!("layer{i}.ln1.bias"), ParamRole::Backbone, &mut b.ln1.bias));
            out.push((format!("layer{i}.ln2.gain"), ParamRole::Backbone, &mut b.ln2.gain));
            out.push((format!("layer{i}.ln2.bias"), ParamRole::Backbone, &mut b.ln2.bias));
            out.push((format!("layer{i}.ffn.w1"), ParamRole::Backbone, &mut b.ffn_w1));
            out.push((format!("layer{i}.ffn.b1"), ParamRole::Backbone, &mut b.ffn_b1));
            out.push((format!("layer{i}.ffn.w2"), ParamRole::Backbone, &mut b.ffn_w2));
            out.push((format!("layer{i}.ffn.b2"), ParamRole::Backbone, &mut b.ffn_b2));
        }
        out.push(("ln_f.gain".to_string(), ParamRole::Backbone, &mut self.ln_f.gain));
        out.push(("ln_f.bias".to_string(), ParamRole::Backbone, &mut self.ln_f.bias));
        out.push(("head.w".to_string(), ParamRole::Head, &mut self.head_w));
        out.push(("head.b".to_string(), ParamRole::Head, &mut self.head_b));
        out.into_iter().filter(|(_, role, _)| role.trainable(mode)).map(|(n, _, m)| (n, m)).collect()
    }

    /// Names of the tensors trainable under `mode`, in parameter order.
    pub fn trainable_names(&self, mode: TrainMode) -> Vec<String> {
        self.params().into_iter().filter(|(_, role, _)| role.trainable(mode)).map(|(n, _, _)| n).collect()
    }

    /// Mutable access to any parameter (including frozen ones) by name.
    pub fn param_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.generation += 1;
        if let Some(rest) = name.strip_prefix("layer") {
            let (idx, field) = rest.split_once('.')?;
            let b = self.blocks.get_mut(idx.parse::<usize>().ok()?)?;
            return match field {
                "ln1.gain" => Some(&mut b.ln1.gain),
                "ln1.bias" => Some(&mut b.ln1.bias),
                "ln2.gain" => Some(&mut b.ln2.gain),
                "ln2.bias" => Some(&mut b.ln2.bias),
                "ffn.w1" => Some(&mut b.ffn_w1),
                "ffn.b1" => Some(&mut b.ffn_b1),
                "ffn.w2" => Some(&mut b.ffn_w2),
                "ffn.b2" => Some(&mut b.ffn_b2),
                _ => {
                    let (p, part) = field.split_once('.').map_or((field, None), |(p, s)| (p, Some(s)));
                    let p: Projection = p.parse().ok()?;
                    match (&mut b.proj[p as usize], part) {
                        (ProjWeight::Dense(m), None) => Some(m),
                        (ProjWeight::Adapted(a), Some("a")) => Some(&mut a.a),
                        (ProjWeight::Adapted(a), Some("b")) => Some(&mut a.b),
                        (ProjWeight::Adapted(a), Some("base")) => Some(&mut a.base),
                        _ => None,
                    }
                }
            };
        }
        match name {
            "tok_emb" => Some(&mut self.tok_emb),
            "pos_emb" => Some(&mut self.pos_emb),
            "ln_f.gain" => Some(&mut self.ln_f.gain),
            "ln_f.bias" => Some(&mut self.ln_f.bias),
            "head.w" => Some(&mut self.head_w),
            "head.b" => Some(&mut self.head_b),
            _ => None,
        }
    }

    /// Installs adapters on the given projections. Each adapter's effective
    /// weight replaces the projection's current dense weight.
    pub fn apply_adapters(&mut self, adapters: Vec<LayerAdapters>) -> Result<()> {
        if adapters.len() != self.blocks.len() {
            return Err(Error::Config(format!(
                "{} adapter layers for a {}-layer model",
                adapters.len(),
                self.blocks.len()
            )));
        }
        for (block, layer) in self.blocks.iter_mut().zip(adapters) {
            for (p, a) in layer {
                if a.base.shape() != (self.config.dim, self.config.dim) {
                    return Err(Error::Shape(format!("adapter base for {p} is {:?}", a.base.shape())));
                }
                block.proj[p as usize] = ProjWeight::Adapted(a);
            }
        }
        self.generation += 1;
        Ok(())
    }

    /// Per-layer adapters currently installed.
    pub fn adapters(&self) -> Vec<LayerAdapters> {
        self.blocks
            .iter()
            .map(|b| {
                Projection::ALL
                    .iter()
                    .filter_map(|&p| match b.projection(p) {
                        ProjWeight::Adapted(a) => Some((p, a.clone())),
                        ProjWeight::Dense(_) => None,
                    })
                    .collect::<BTreeMap<_, _>>()
            })
            .collect()
    }

    /// Dense checkpoint with adapters merged into `layer{i}.{p}`.
    pub fn merged_store(&self) -> Result<TensorStore> {
        let mut store = TensorStore::new();
        for (name, role, m) in self.params() {
            if role == ParamRole::Backbone || role == ParamRole::Head {
                store.insert(name, m.clone())?;
            }
        }
        for (i, b) in self.blocks.iter().enumerate() {
            for p in Projection::ALL {
                if let ProjWeight::Adapted(a) = b.projection(p) {
                    store.insert(p.weight_name(i), a.effective_weight())?;
                }
            }
        }
        store.set_meta("model_config", serde_json::to_string(&self.config)?);
        Ok(store)
    }

    /// Checkpoint of every tensor under its own name (adapters unmerged).
    pub fn to_store(&self) -> Result<TensorStore> {
        let mut store = TensorStore::new();
        for (name, _, m) in self.params() {
            store.insert(name, m.clone())?;
        }
        store.set_meta("model_config", serde_json::to_string(&self.config)?);
        Ok(store)
    }

    /// Rebuilds a dense model from a checkpoint written by [`Self::to_store`]
    /// or [`Self::merged_store`].
    pub fn from_store(store: &TensorStore) -> Result<Self> {
        let config = ModelConfig::from_checkpoint(store)?;
        let mut model = Self::init(&config)?;
        let names: Vec<(String, (usize, usize))> =
            model.params().into_iter().map(|(n, _, m)| (n, m.shape())).collect();
        for (name, shape) in names {
            let m = store.require(&name)?;
            if m.shape() != shape {
                return Err(Error::Shape(format!("checkpoint tensor `{name}` is {:?}, model expects {shape:?}", m.shape())));
            }
            *model.param_mut(&name).expect("name from params()") = m.clone();
        }
        model.generation = 0;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig { layers: 2, dim: 8, heads: 2, ffn_dim: 12, vocab: 6, max_seq: 5, num_classes: 3, seed: 4 }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig { dim: 10, heads: 3, ..tiny() };
        assert!(bad.validate().is_err());
        assert!(ModelConfig { layers: 0, ..tiny() }.validate().is_err());
    }

    #[test]
    fn store_round_trip_and_shapes() {
        let m = ToyModel::init(&tiny()).unwrap();
        let s = m.to_store().unwrap();
        assert_eq!(s.require("layer1.ffn.w1").unwrap().shape(), (12, 8));
        assert_eq!(s.require("head.w").unwrap().shape(), (3, 8));
        let back = ToyModel::from_store(&s).unwrap();
        assert_eq!(back, m);
        assert_eq!(m.merged_store().unwrap(), s);
    }

    #[test]
    fn init_is_deterministic() {
        assert_eq!(ToyModel::init(&tiny()).unwrap(), ToyModel::init(&tiny()).unwrap());
        let other = ToyModel::init(&ModelConfig { seed: 5, ..tiny() }).unwrap();
        assert_ne!(other, ToyModel::init(&tiny()).unwrap());
    }

    #[test]
    fn trainable_sets() {
        let mut m = ToyModel::init(&tiny()).unwrap();
        assert_eq!(m.trainable_names(TrainMode::Adapters), vec!["head.w", "head.b"]);
        let cfg = crate::adapter::AdapterConfig::new(crate::adapter::AdapterScheme::Ailora, "q=2,v=2".parse().unwrap(), 4.0, 1);
        let adapters = crate::adapter::init_adapters(&m.to_store().unwrap(), &cfg).unwrap();
        m.apply_adapters(adapters).unwrap();
        let names = m.trainable_names(TrainMode::Adapters);
        assert!(names.contains(&"layer0.q.a".to_string()) && names.contains(&"layer1.v.b".to_string()));
        assert!(!names.iter().any(|n| n.ends_with(".base") || n == "layer0.k"));
        let full = m.trainable_names(TrainMode::Full);
        assert!(full.contains(&"layer0.k".to_string()) && !full.iter().any(|n| n.ends_with(".base")));
        assert_eq!(m.trainable_mut(TrainMode::Full).len(), full.len());
        assert!(m.param_mut("layer0.q.base").is_some());
        assert!(m.param_mut("layer0.q").is_none());
        assert!(m.param_mut("layer9.k").is_none());
    }
}
