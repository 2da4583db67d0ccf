//! Pretraining and adapter finetuning loops.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::adapter::{adapters_to_store, init_adapters, AdapterConfig};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::named_rng;
use crate::store::TensorStore;

use super::optim::{AdamW, TrainConfig};
use super::task::{Dataset, SynthTask};
use super::{backward, cross_entropy, forward, softmax_rows, ModelConfig, ToyModel, TrainMode};

/// Losses above this (or non-finite) abort training.
pub const DIVERGENCE_LIMIT: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_metric: f64,
}

pub struct TrainOutcome {
    pub model: ToyModel,
    pub checkpoint: TensorStore,
    pub curve: Vec<EpochRecord>,
}

/// `epoch,train_loss,eval_metric` with six significant digits, LF endings.
pub fn curves_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,eval_metric\n");
    for r in records {
        writeln!(out, "{},{:.5e},{:.5e}", r.epoch, r.train_loss, r.eval_metric).unwrap();
    }
    out
}

/// Held-out evaluation set paired with a training task.
pub fn eval_task(task: &SynthTask) -> SynthTask {
    task.held_out((task.sample_count / 4).max(1))
}

pub fn predict_proba(model: &ToyModel, inputs: &[Vec<usize>]) -> Result<Matrix> {
    Ok(softmax_rows(&forward(model, inputs)?.logits))
}

pub fn accuracy(model: &ToyModel, data: &Dataset) -> Result<f64> {
    let mut correct = 0usize;
    for (inputs, labels) in data.inputs.chunks(256).zip(data.labels.chunks(256)) {
        let logits = forward(model, inputs)?.logits;
        for (i, &y) in labels.iter().enumerate() {
            let row = logits.row(i);
            let pred = (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best });
            correct += usize::from(pred == y);
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Runs `cfg.epochs` of minibatch AdamW on the parameters selected by `mode`.
pub fn train(model: &mut ToyModel, mode: TrainMode, cfg: &TrainConfig, data: &Dataset, eval: &Dataset) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if data.is_empty() || eval.is_empty() {
        return Err(Error::Input("training and evaluation sets must be nonempty".into()));
    }
    let mut opt = AdamW::new(cfg.clone());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut named_rng(cfg.seed, &format!("shuffle.epoch{epoch}")));
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let inputs: Vec<Vec<usize>> = chunk.iter().map(|&i| data.inputs[i].clone()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let out = forward(model, &inputs)?;
            let (loss, dlogits) = cross_entropy(&out.logits, &labels)?;
            if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
                return Err(Error::Divergence(format!("loss {loss} in epoch {epoch}")));
            }
            total += loss * chunk.len() as f64;
            let grads = backward(model, &out.cache, &dlogits, mode)?;
            opt.step(model.trainable_mut(mode), &grads)?;
        }
        if model.params().iter().any(|(_, _, m)| m.as_slice().iter().any(|v| !v.is_finite())) {
            return Err(Error::Divergence(format!("non-finite parameters after epoch {epoch}")));
        }
        curve.push(EpochRecord { epoch, train_loss: total / data.len() as f64, eval_metric: accuracy(model, eval)? });
    }
    Ok(curve)
}

fn check_task_fits(model: &ModelConfig, task: &SynthTask) -> Result<()> {
    task.validate()?;
    if task.vocab != model.vocab || task.num_classes != model.num_classes || task.seq_len > model.max_seq {
        return Err(Error::Config(format!(
            "task (vocab {}, classes {}, seq {}) does not fit model (vocab {}, classes {}, max_seq {})",
            task.vocab, task.num_classes, task.seq_len, model.vocab, model.num_classes, model.max_seq
        )));
    }
    Ok(())
}

/// Trains every parameter of a freshly initialized model on `task`.
pub fn pretrain(model_cfg: &ModelConfig, cfg: &TrainConfig, task: &SynthTask) -> Result<TrainOutcome> {
    check_task_fits(model_cfg, task)?;
    let mut model = ToyModel::init(model_cfg)?;
    let curve = train(&mut model, TrainMode::Full, cfg, &task.generate()?, &eval_task(task).generate()?)?;
    let mut checkpoint = model.to_store()?;
    checkpoint.set_meta("task", serde_json::to_string(task)?);
    checkpoint.set_meta("train_config", serde_json::to_string(cfg)?);
    Ok(TrainOutcome { model, checkpoint, curve })
}

/// Installs adapters on a pretrained checkpoint without training.
pub fn adapt(pretrained: &TensorStore, adapter_cfg: &AdapterConfig) -> Result<ToyModel> {
    if pretrained.names().any(|n| n.ends_with(".base")) {
        return Err(Error::Config("finetuning needs a dense pretrained checkpoint, got an adapter checkpoint".into()));
    }
    let mut model = ToyModel::from_store(pretrained)?;
    let adapters = init_adapters(pretrained, adapter_cfg)?;
    model.apply_adapters(adapters)?;
    Ok(model)
}

/// Adapter checkpoint: factors, frozen bases, the classifier head and
/// scheme metadata.
pub fn adapter_checkpoint(model: &ToyModel, adapter_cfg: &AdapterConfig) -> Result<TensorStore> {
    let mut store = adapters_to_store(&model.adapters(), adapter_cfg)?;
    let (w, b) = model.head();
    store.insert("head.w", w.clone())?;
    store.insert("head.b", b.clone())?;
    store.set_meta("model_config", serde_json::to_string(model.config())?);
    Ok(store)
}

/// Finetunes adapter factors and a freshly initialized classifier head on
/// `task`, keeping every other tensor frozen.
pub fn finetune(pretrained: &TensorStore, adapter_cfg: &AdapterConfig, cfg: &TrainConfig, task: &SynthTask) -> Result<TrainOutcome> {
    let mut model = adapt(pretrained, adapter_cfg)?;
    model.reset_head(adapter_cfg.seed);
    check_task_fits(model.config(), task)?;
    let curve = train(&mut model, TrainMode::Adapters, cfg, &task.generate()?, &eval_task(task).generate()?)?;
    let mut checkpoint = adapter_checkpoint(&model, adapter_cfg)?;
    checkpoint.set_meta("task", serde_json::to_string(task)?);
    checkpoint.set_meta("train_config", serde_json::to_string(cfg)?);
    Ok(TrainOutcome { model, checkpoint, curve })
}

/// Rebuilds a finetuned model from its pretrained checkpoint and either an
/// adapter checkpoint or a dense one.
pub fn load_model(pretrained: &TensorStore, finetuned: Option<&TensorStore>) -> Result<ToyModel> {
    let Some(ft) = finetuned else {
        return ToyModel::from_store(pretrained);
    };
    if !ft.names().any(|n| n.ends_with(".base")) {
        let model = ToyModel::from_store(ft)?;
        let base = ToyModel::from_store(pretrained)?;
        if model.config() != base.config() {
            return Err(Error::Config("finetuned and pretrained checkpoints have different model configs".into()));
        }
        return Ok(model);
    }
    let mut model = ToyModel::from_store(pretrained)?;
    if let Some(meta) = ft.meta("model_config") {
        let cfg: ModelConfig = serde_json::from_str(meta).map_err(|e| Error::Config(format!("bad model_config: {e}")))?;
        if &cfg != model.config() {
            return Err(Error::Config("adapter checkpoint was trained on a different model config".into()));
        }
    }
    let (adapters, _) = crate::adapter::adapters_from_store(ft)?;
    model.apply_adapters(adapters)?;
    for name in ["head.w", "head.b"] {
        if let Some(m) = ft.get(name) {
            let slot = model.param_mut(name).expect("head exists");
            if slot.shape() != m.shape() {
                return Err(Error::Shape(format!("{name} is {:?}, model expects {:?}", m.shape(), slot.shape())));
            }
            *slot = m.clone();
        }
    }
    Ok(model)
}

/// Puts the pretrained classifier head back on `model`, so a finetuned
/// backbone can be scored on the pretraining task.
pub fn restore_head(model: &mut ToyModel, pretrained: &TensorStore) -> Result<()> {
    for name in ["head.w", "head.b"] {
        let m = pretrained.require(name)?;
        let slot = model.param_mut(name).expect("head exists");
        if slot.shape() != m.shape() {
            return Err(Error::Shape(format!("{name} is {:?}, model expects {:?}", m.shape(), slot.shape())));
        }
        *slot = m.clone();
    }
    Ok(())
}
