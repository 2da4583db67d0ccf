//! Adapted linear layers and the four initialization schemes.
//!
//! A layer computes `y = x·(base + scale·B·A)ᵀ`. Standard LoRA keeps the
//! pretrained weight as the base, draws `A` from a seeded Gaussian and zeroes
//! `B`. The SVD schemes move r singular components of the pretrained weight
//! into `B`/`A` and freeze the residual, with `scale = 1` so the split stays
//! exact. AILoRA takes principal components on Q and minor components on V.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factorization::{split, SplitKind};
use crate::matrix::{axpy, mm, mm_nt, Matrix};
use crate::rng::{gaussian_matrix, named_rng};
use crate::store::TensorStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Q,
    K,
    V,
    O,
}

impl Projection {
    pub const ALL: [Projection; 4] = [Projection::Q, Projection::K, Projection::V, Projection::O];

    pub fn name(self) -> &'static str {
        match self {
            Projection::Q => "q",
            Projection::K => "k",
            Projection::V => "v",
            Projection::O => "o",
        }
    }

    fn index(self) -> usize {
        self as usize
    }

    /// Name of the pretrained weight in a checkpoint.
    pub fn weight_name(self, layer: usize) -> String {
        format!("layer{layer}.{}", self.name())
    }
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Projection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "q" => Ok(Projection::Q),
            "k" => Ok(Projection::K),
            "v" => Ok(Projection::V),
            "o" => Ok(Projection::O),
            other => Err(Error::Config(format!("unknown projection `{other}` (expected q|k|v|o)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterScheme {
    #[serde(rename = "lora")]
    LoraStandard,
    Pissa,
    Milora,
    Ailora,
}

/// How one projection's factors are initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitRule {
    Gaussian,
    Split(SplitKind),
}

impl AdapterScheme {
    pub const ALL: [AdapterScheme; 4] =
        [AdapterScheme::LoraStandard, AdapterScheme::Pissa, AdapterScheme::Milora, AdapterScheme::Ailora];

    pub fn name(self) -> &'static str {
        match self {
            AdapterScheme::LoraStandard => "lora",
            AdapterScheme::Pissa => "pissa",
            AdapterScheme::Milora => "milora",
            AdapterScheme::Ailora => "ailora",
        }
    }

    pub fn rule(self, proj: Projection) -> InitRule {
        match (self, proj) {
            (AdapterScheme::LoraStandard, _) => InitRule::Gaussian,
            (AdapterScheme::Pissa, _) => InitRule::Split(SplitKind::Principal),
            (AdapterScheme::Milora, _) => InitRule::Split(SplitKind::Minor),
            (AdapterScheme::Ailora, Projection::Q) => InitRule::Split(SplitKind::Principal),
            (AdapterScheme::Ailora, Projection::V) => InitRule::Split(SplitKind::Minor),
            // K and O have no asymmetric policy; they get the standard rule.
            (AdapterScheme::Ailora, _) => InitRule::Gaussian,
        }
    }
}

impl fmt::Display for AdapterScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AdapterScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lora" | "lora-standard" | "lorastandard" => Ok(AdapterScheme::LoraStandard),
            "pissa" => Ok(AdapterScheme::Pissa),
            "milora" => Ok(AdapterScheme::Milora),
            "ailora" => Ok(AdapterScheme::Ailora),
            other => Err(Error::Config(format!("unknown scheme `{other}` (expected lora|pissa|milora|ailora)"))),
        }
    }
}

/// Per-projection adapter ranks; 0 leaves the projection frozen.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ranks {
    pub q: usize,
    pub k: usize,
    pub v: usize,
    pub o: usize,
}

impl Ranks {
    pub fn get(&self, p: Projection) -> usize {
        [self.q, self.k, self.v, self.o][p.index()]
    }

    pub fn set(&mut self, p: Projection, r: usize) {
        match p {
            Projection::Q => self.q = r,
            Projection::K => self.k = r,
            Projection::V => self.v = r,
            Projection::O => self.o = r,
        }
    }

    pub fn uniform(projections: &[Projection], r: usize) -> Self {
        let mut out = Ranks::default();
        for &p in projections {
            out.set(p, r);
        }
        out
    }

    pub fn adapted(&self) -> impl Iterator<Item = Projection> + '_ {
        Projection::ALL.into_iter().filter(|&p| self.get(p) > 0)
    }
}

impl fmt::Display for Ranks {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "q={},k={},v={},o={}", self.q, self.k, self.v, self.o)
    }
}

impl FromStr for Ranks {
    type Err = Error;

    /// Parses `q=8,v=8`; unlisted projections get rank 0.
    fn from_str(s: &str) -> Result<Self> {
        let mut out = Ranks::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("rank entry `{part}` is not of the form proj=rank")))?;
            let p: Projection = k.trim().parse()?;
            let r = v.trim().parse().map_err(|_| Error::Config(format!("rank `{v}` is not a nonnegative integer")))?;
            out.set(p, r);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub scheme: AdapterScheme,
    pub ranks: Ranks,
    pub alpha: f64,
    pub seed: u64,
}

impl AdapterConfig {
    pub fn new(scheme: AdapterScheme, ranks: Ranks, alpha: f64, seed: u64) -> Self {
        Self { scheme, ranks, alpha, seed }
    }

    /// Shape-independent checks.
    pub fn validate(&self) -> Result<()> {
        if self.ranks.adapted().next().is_none() {
            return Err(Error::Config("at least one projection rank must be positive".into()));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }

    pub fn scale_for(&self, p: Projection) -> f64 {
        match self.scheme.rule(p) {
            InitRule::Gaussian => self.alpha / self.ranks.get(p) as f64,
            InitRule::Split(_) => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedLinear {
    /// m×n, frozen.
    pub base: Matrix,
    /// m×r, trainable.
    pub b: Matrix,
    /// r×n, trainable.
    pub a: Matrix,
    pub scale: f64,
    pub kind: Projection,
}

impl AdaptedLinear {
    pub fn new(base: Matrix, b: Matrix, a: Matrix, scale: f64, kind: Projection) -> Result<Self> {
        let (m, n) = base.shape();
        if b.rows() != m || a.cols() != n || b.cols() != a.rows() {
            return Err(Error::Shape(format!(
                "adapter factors {}x{} and {}x{} do not fit base {m}x{n}",
                b.rows(),
                b.cols(),
                a.rows(),
                a.cols()
            )));
        }
        if !scale.is_finite() {
            return Err(Error::Input(format!("non-finite adapter scale {scale}")));
        }
        Ok(Self { base, b, a, scale, kind })
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.base.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.base.cols()
    }

    /// `scale·B·A`.
    pub fn delta(&self) -> Matrix {
        let mut d = mm(&self.b, &self.a);
        d.as_mut_slice().iter_mut().for_each(|v| *v *= self.scale);
        d
    }

    pub fn effective_weight(&self) -> Matrix {
        merge(self)
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        adapted_forward(self, x)
    }
}

/// `base + scale·B·A`.
pub fn merge(layer: &AdaptedLinear) -> Matrix {
    let mut w = layer.base.clone();
    axpy(&mut w, 1.0, &layer.delta());
    w
}

/// `x·baseᵀ + scale·(x·Aᵀ)·Bᵀ`, with x a batch of rows.
pub fn adapted_forward(layer: &AdaptedLinear, x: &Matrix) -> Result<Matrix> {
    if x.cols() != layer.in_dim() {
        return Err(Error::Shape(format!("input {}x{} for a layer with {} inputs", x.rows(), x.cols(), layer.in_dim())));
    }
    Ok(forward_unchecked(layer, x))
}

pub(crate) fn forward_unchecked(layer: &AdaptedLinear, x: &Matrix) -> Matrix {
    let mut y = mm_nt(x, &layer.base);
    let low = mm_nt(&mm_nt(x, &layer.a), &layer.b);
    axpy(&mut y, layer.scale, &low);
    y
}

/// Initializes one projection from its pretrained weight. Returns `None` when
/// the configured rank is zero.
pub fn init_projection(w: &Matrix, proj: Projection, layer: usize, cfg: &AdapterConfig) -> Result<Option<AdaptedLinear>> {
    let r = cfg.ranks.get(proj);
    if r == 0 {
        return Ok(None);
    }
    let (m, n) = w.shape();
    if r > m.min(n) {
        return Err(Error::Config(format!(
            "rank {r} for {} exceeds min dimension of its {m}x{n} weight",
            proj.weight_name(layer)
        )));
    }
    let scale = cfg.scale_for(proj);
    let adapted = match cfg.scheme.rule(proj) {
        InitRule::Gaussian => {
            let name = format!("{}.a", proj.weight_name(layer));
            let a = gaussian_matrix(r, n, (1.0 / r as f64).sqrt(), &mut named_rng(cfg.seed, &name));
            AdaptedLinear::new(w.clone(), Matrix::zeros(m, r), a, scale, proj)?
        }
        InitRule::Split(kind) => {
            let s = split(w, r, kind)?;
            AdaptedLinear::new(s.residual, s.b, s.a, scale, proj)?
        }
    };
    Ok(Some(adapted))
}

pub type LayerAdapters = BTreeMap<Projection, AdaptedLinear>;

/// Number of consecutive layers `layer0.., layer1..` present in a store.
pub fn count_layers(weights: &TensorStore) -> usize {
    (0..)
        .take_while(|&i| Projection::ALL.iter().any(|p| weights.contains(&p.weight_name(i))))
        .count()
}

/// Initializes adapters for every layer of a pretrained store.
pub fn init_adapters(weights: &TensorStore, cfg: &AdapterConfig) -> Result<Vec<LayerAdapters>> {
    cfg.validate()?;
    let layers = count_layers(weights);
    if layers == 0 {
        return Err(Error::MissingTensor("layer0.{q|k|v|o}".into()));
    }
    let mut out = Vec::with_capacity(layers);
    for layer in 0..layers {
        let mut map = LayerAdapters::new();
        for proj in cfg.ranks.adapted() {
            let w = weights.require(&proj.weight_name(layer))?;
            if let Some(a) = init_projection(w, proj, layer, cfg)? {
                map.insert(proj, a);
            }
        }
        out.push(map);
    }
    Ok(out)
}

/// Σ over adapted projections and layers of r·(m+n). `dims[p]` is the
/// (m, n) shape of projection p in every layer.
pub fn trainable_parameter_count(cfg: &AdapterConfig, layers: usize, dims: impl Fn(Projection) -> (usize, usize)) -> Result<usize> {
    cfg.validate()?;
    Ok(cfg
        .ranks
        .adapted()
        .map(|p| {
            let (m, n) = dims(p);
            layers * cfg.ranks.get(p) * (m + n)
        })
        .sum())
}

/// Adapter checkpoint: `layer{i}.{p}.{a,b,base}` plus scheme metadata.
pub fn adapters_to_store(adapters: &[LayerAdapters], cfg: &AdapterConfig) -> Result<TensorStore> {
    let mut store = TensorStore::new();
    for (i, layer) in adapters.iter().enumerate() {
        for (p, ad) in layer {
            let prefix = p.weight_name(i);
            store.insert(format!("{prefix}.a"), ad.a.clone())?;
            store.insert(format!("{prefix}.b"), ad.b.clone())?;
            store.insert(format!("{prefix}.base"), ad.base.clone())?;
        }
    }
    write_adapter_metadata(&mut store, cfg);
    Ok(store)
}

pub fn write_adapter_metadata(store: &mut TensorStore, cfg: &AdapterConfig) {
    store.set_meta("scheme", cfg.scheme.name());
    store.set_meta("alpha", cfg.alpha.to_string());
    store.set_meta("ranks", cfg.ranks.to_string());
    store.set_meta("adapter_seed", cfg.seed.to_string());
    let scales: Vec<String> = cfg.ranks.adapted().map(|p| format!("{p}={}", cfg.scale_for(p))).collect();
    store.set_meta("scales", scales.join(","));
}

pub fn adapter_config_from_store(store: &TensorStore) -> Result<AdapterConfig> {
    let get = |k: &str| store.meta(k).ok_or_else(|| Error::Config(format!("adapter checkpoint lacks metadata `{k}`")));
    let scheme = get("scheme")?.parse()?;
    let ranks = get("ranks")?.parse()?;
    let alpha = get("alpha")?.parse().map_err(|_| Error::Config("bad alpha metadata".into()))?;
    let seed = store.meta("adapter_seed").map(str::parse).transpose().map_err(|_| Error::Config("bad seed metadata".into()))?;
    let cfg = AdapterConfig::new(scheme, ranks, alpha, seed.unwrap_or(0));
    cfg.validate()?;
    Ok(cfg)
}

pub fn adapters_from_store(store: &TensorStore) -> Result<(Vec<LayerAdapters>, AdapterConfig)> {
    let cfg = adapter_config_from_store(store)?;
    let layers = (0..)
        .take_while(|&i| cfg.ranks.adapted().any(|p| store.contains(&format!("{}.a", p.weight_name(i)))))
        .count();
    let mut out = Vec::with_capacity(layers);
    for i in 0..layers {
        let mut map = LayerAdapters::new();
        for p in cfg.ranks.adapted() {
            let prefix = p.weight_name(i);
            let take = |s: &str| store.require(&format!("{prefix}.{s}")).cloned();
            map.insert(p, AdaptedLinear::new(take("base")?, take("b")?, take("a")?, cfg.scale_for(p), p)?);
        }
        out.push(map);
    }
    Ok((out, cfg))
}
