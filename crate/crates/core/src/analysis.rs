//! Diagnostics: subspace similarity φ, per-layer update norms, and the
//! forgetting loss between a pretrained and a finetuned model.

use serde::Serialize;
use serde_json::{Map, Value};

use crate::adapter::{count_layers, Projection};
use crate::error::{Error, Result};
use crate::matrix::{mm_tn, Matrix};
use crate::model::train::predict_proba;
use crate::model::ToyModel;
use crate::store::TensorStore;
use crate::svd::svd;

pub const PROB_FLOOR: f64 = 1e-12;

/// φ = ‖U₁ᵀU₂‖_F² / r over the leading r left singular vectors of `m1` and
/// `m2`. 1 means identical subspaces, 0 orthogonal ones.
pub fn subspace_similarity(m1: &Matrix, m2: &Matrix, r: usize) -> Result<f64> {
    if m1.rows() != m2.rows() {
        return Err(Error::Shape(format!("row counts differ: {} vs {}", m1.rows(), m2.rows())));
    }
    let k = m1.rows().min(m1.cols()).min(m2.cols());
    if r == 0 || r > k {
        return Err(Error::Param(format!("similarity rank {r} outside 1..={k}")));
    }
    let u1 = svd(m1)?.u.columns(0..r)?;
    let u2 = svd(m2)?.u.columns(0..r)?;
    Ok(mm_tn(&u1, &u2).sum_squares() / r as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityReport {
    pub per_layer: Vec<f64>,
    pub rank: usize,
}

/// ‖W_ft − W_pre‖_F for `layer{i}.{proj}`, ordered by layer.
pub fn delta_norms(pretrained: &TensorStore, finetuned: &TensorStore, proj: Projection) -> Result<Vec<f64>> {
    let layers = count_layers(pretrained);
    if layers == 0 {
        return Err(Error::MissingTensor(proj.weight_name(0)));
    }
    (0..layers)
        .map(|i| {
            let name = proj.weight_name(i);
            let pre = pretrained.require(&name)?;
            let ft = finetuned.require(&name)?;
            if pre.shape() != ft.shape() {
                return Err(Error::Shape(format!("`{name}` is {:?} vs {:?}", pre.shape(), ft.shape())));
            }
            Ok(ft.sub(pre)?.frobenius_norm())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ForgettingReport {
    /// Mean over samples of −Σ_c p_pre(c)·log max(p_ft(c), floor).
    pub value: f64,
    pub sample_count: usize,
}

/// Cross-entropy of the finetuned model's class distribution against the
/// pretrained model's (the pretrained distribution is the target).
pub fn forgetting_loss(pretrained: &ToyModel, finetuned: &ToyModel, eval: &[Vec<usize>]) -> Result<ForgettingReport> {
    if eval.is_empty() {
        return Err(Error::Input("forgetting needs a nonempty evaluation set".into()));
    }
    if pretrained.config() != finetuned.config() {
        return Err(Error::Config("pretrained and finetuned models have different configs".into()));
    }
    let mut total = 0.0;
    for chunk in eval.chunks(256) {
        let p_pre = predict_proba(pretrained, chunk)?;
        let p_ft = predict_proba(finetuned, chunk)?;
        total += cross_entropy_rows(&p_pre, &p_ft);
    }
    Ok(ForgettingReport { value: total / eval.len() as f64, sample_count: eval.len() })
}

/// Σ over rows of −Σ_c target(c)·log max(pred(c), floor).
pub fn cross_entropy_rows(target: &Matrix, pred: &Matrix) -> f64 {
    let mut total = 0.0;
    for i in 0..target.rows() {
        for (t, p) in target.row(i).iter().zip(pred.row(i)) {
            total -= t * p.max(PROB_FLOOR).ln();
        }
    }
    total
}

/// Mean predictive entropy of a model's class distribution.
pub fn mean_entropy(model: &ToyModel, eval: &[Vec<usize>]) -> Result<f64> {
    if eval.is_empty() {
        return Err(Error::Input("entropy needs a nonempty evaluation set".into()));
    }
    let p = predict_proba(model, eval)?;
    let mut total = 0.0;
    for i in 0..p.rows() {
        total -= p.row(i).iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>();
    }
    Ok(total / eval.len() as f64)
}

/// JSON report: `{"metric", "per_layer" | "value", "params"}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub metric: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_layer: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    pub params: Map<String, Value>,
}

impl Report {
    pub fn per_layer(metric: &str, values: Vec<f64>, params: Map<String, Value>) -> Self {
        Self { metric: metric.into(), per_layer: Some(values), value: None, params }
    }

    pub fn scalar(metric: &str, value: f64, params: Map<String, Value>) -> Self {
        Self { metric: metric.into(), per_layer: None, value: Some(value), params }
    }
}
