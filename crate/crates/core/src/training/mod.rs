//! Masked-NLL fine-tuning of the toy model: adapter-only (`train`) or all
//! base parameters (`train_full`, used for pretraining).

pub mod loss;
pub mod schedule;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::shuffled_indices;
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::modelkit::checkpoint;
use crate::modelkit::toy::{Grads, ToyModel};
use crate::pipeline::example::TrainingExample;

pub use loss::{compute_loss, masked_nll, LossOutput, Reduction};
pub use schedule::{lr_at, Adam};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Global (effective) batch size.
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_ratio: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub seed: u64,
    pub loss_reduction: Reduction,
    /// Gradients are accumulated over micro-batches of at most this many
    /// examples. The update is identical for any value.
    pub micro_batch_size: Option<usize>,
    /// Clip the global gradient norm to this value.
    pub clip_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 3,
            batch_size: 32,
            peak_lr: 1e-4,
            warmup_ratio: 0.1,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            seed: 0,
            loss_reduction: Reduction::TokenMean,
            micro_batch_size: None,
            clip_grad_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config(format!("warmup_ratio {} outside [0, 1)", self.warmup_ratio)));
        }
        if !(self.peak_lr > 0.0) {
            return Err(Error::Config("peak_lr must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.micro_batch_size == Some(0) {
            return Err(Error::Config("epochs and batch sizes must be at least 1".into()));
        }
        if self.clip_grad_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("clip_grad_norm must be positive".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub steps: Vec<StepRecord>,
    /// Mean of the step losses of each epoch.
    pub epoch_means: Vec<f64>,
}

impl LossTrace {
    /// One `{step, lr, loss}` object per line.
    pub fn to_jsonl(&self) -> String {
        self.steps
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_jsonl().as_bytes())
    }

    /// Reads a trace written by [`LossTrace::write`]; epoch means are not
    /// stored in the file and come back empty.
    pub fn read(path: impl AsRef<Path>) -> Result<LossTrace> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let steps = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<StepRecord>, _>>()?;
        Ok(LossTrace { steps, epoch_means: Vec::new() })
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|r| r.loss)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainOutcome {
    pub trace: LossTrace,
    /// Per-epoch checkpoints followed by the final one, when an output
    /// directory was given.
    pub checkpoints: Vec<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Target {
    Adapter,
    Full,
}

/// Fine-tunes the adapter of `model`; base weights stay frozen.
///
/// With `out_dir`, writes `adapter-epoch{N}.safetensors` after every epoch,
/// `adapter-final.safetensors` and `loss_trace.jsonl`.
pub fn train(model: &mut ToyModel, data: &[TrainingExample], cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    if model.adapter().is_none() {
        return Err(Error::Config("train needs an attached adapter".into()));
    }
    fit(model, data, cfg, out_dir, Target::Adapter)
}

/// Trains every base parameter (the model must have no adapter). Checkpoints
/// are full-model archives named `model-epoch{N}` / `model-final`.
pub fn train_full(model: &mut ToyModel, data: &[TrainingExample], cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    if model.adapter().is_some() {
        return Err(Error::Config("train_full expects a model without adapter".into()));
    }
    fit(model, data, cfg, out_dir, Target::Full)
}

fn save(model: &ToyModel, target: Target, dir: &Path, tag: &str) -> Result<PathBuf> {
    let path = match target {
        Target::Adapter => dir.join(format!("adapter-{tag}.safetensors")),
        Target::Full => dir.join(format!("model-{tag}.safetensors")),
    };
    match target {
        Target::Adapter => checkpoint::save_adapter(model, &path)?,
        Target::Full => checkpoint::save_model(model, &path)?,
    }
    Ok(path)
}

fn batch_grads(model: &ToyModel, batch: &[&TrainingExample], micro: usize, want_base: bool) -> Result<(f64, usize, Grads)> {
    let mut total = model.zero_grads(want_base);
    let mut loss = 0.0;
    let mut tokens = 0;
    for chunk in batch.chunks(micro) {
        let parts = chunk
            .par_iter()
            .map(|ex| loss::example_loss_and_grads(model, ex, want_base))
            .collect::<Result<Vec<_>>>()?;
        for (s, c, g) in parts {
            loss += s;
            tokens += c;
            total.add_assign(&g);
        }
    }
    Ok((loss, tokens, total))
}

fn fit(model: &mut ToyModel, data: &[TrainingExample], cfg: &TrainConfig, out_dir: Option<&Path>, target: Target) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    for ex in data {
        ex.validate()?;
    }
    let want_base = target == Target::Full;
    let per_epoch = cfg.steps_per_epoch(data.len());
    let total = per_epoch * cfg.epochs;
    let micro = cfg.micro_batch_size.unwrap_or(cfg.batch_size);
    let mut opt = {
        let shapes = model.trainable_tensors_mut(want_base);
        let shapes: Vec<&ndarray::Array2<f64>> = shapes.into_iter().map(|t| &*t).collect();
        Adam::new(&shapes, cfg.adam_betas, cfg.adam_eps)
    };

    let mut trace = LossTrace::default();
    let mut checkpoints = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let order = shuffled_indices(data.len(), cfg.seed.wrapping_add(epoch as u64));
        let mut epoch_sum = 0.0;
        for batch_idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&TrainingExample> = batch_idx.iter().map(|&i| &data[i]).collect();
            let (sum, tokens, mut grads) = batch_grads(model, &batch, micro, want_base)?;
            if tokens == 0 {
                return Err(Error::Input(format!("batch at step {step} has no masked tokens")));
            }
            let denom = match cfg.loss_reduction {
                Reduction::Sum => 1.0,
                Reduction::TokenMean => tokens as f64,
            };
            let loss = sum / denom;
            if !loss.is_finite() {
                return Err(Error::Divergence { step, loss });
            }
            grads.scale(1.0 / denom);
            if let Some(c) = cfg.clip_grad_norm {
                let n = grads.norm();
                if n > c {
                    grads.scale(c / n);
                }
            }
            let lr = lr_at(step, total, cfg)?;
            let g = grads.tensors();
            opt.step(model.trainable_tensors_mut(want_base), &g, lr);
            trace.steps.push(StepRecord { step, lr, loss });
            epoch_sum += loss;
            step += 1;
        }
        let mean = epoch_sum / per_epoch as f64;
        log::info!("epoch {}: mean loss {mean:.6}", epoch + 1);
        trace.epoch_means.push(mean);
        if let Some(dir) = out_dir {
            checkpoints.push(save(model, target, dir, &format!("epoch{}", epoch + 1))?);
        }
    }
    if let Some(dir) = out_dir {
        checkpoints.push(save(model, target, dir, "final")?);
        trace.write(dir.join("loss_trace.jsonl"))?;
    }
    Ok(TrainOutcome { trace, checkpoints })
}

/// Appends one line to a JSONL file, creating it if needed.
pub(crate) fn append_jsonl<T: Serialize>(path: &Path, record: &T) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", serde_json::to_string(record)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelkit::adapter::AdapterConfig;
    use crate::modelkit::tokenizer::Tokenizer;
    use crate::modelkit::toy::ToyConfig;
    use crate::pipeline::{build_ssr_example, PromptTemplate};

    fn setup() -> (ToyModel, Vec<TrainingExample>) {
        let cfg = ToyConfig { width: 16, heads: 2, layers: 1, ..ToyConfig::default() };
        let base = ToyModel::new(cfg, Tokenizer::toy()).unwrap();
        let m = base.attach_adapter(&AdapterConfig::new(4, 8.0, &["layers.*"])).unwrap();
        let t = Tokenizer::toy();
        let data = [("ab", "甲乙"), ("c", "丙"), ("dd", "丁丁"), ("e", "戊"), ("fa", "己甲")]
            .iter()
            .map(|(x, y)| build_ssr_example(x, y, &PromptTemplate::qwen(), &t).unwrap())
            .collect();
        (m, data)
    }

    fn quick() -> TrainConfig {
        TrainConfig { batch_size: 2, peak_lr: 1e-2, ..TrainConfig::default() }
    }

    #[test]
    fn deterministic_and_reloadable() {
        let (m0, data) = setup();
        let dir = tempfile::tempdir().unwrap();
        let mut a = m0.clone();
        let out = train(&mut a, &data, &quick(), Some(dir.path())).unwrap();
        let mut b = m0.clone();
        train(&mut b, &data, &quick(), None).unwrap();
        assert_eq!(a.adapter(), b.adapter());
        assert_eq!(out.checkpoints.len(), 4);
        assert_eq!(out.trace.steps.len(), 9);
        assert!(out.trace.steps.windows(2).all(|w| w[0].step < w[1].step));
        let back = checkpoint::load_adapter(&m0.base(), out.checkpoints.last().unwrap()).unwrap();
        let l1 = compute_loss(&a, &data, Reduction::TokenMean).unwrap();
        let l2 = compute_loss(&back, &data, Reduction::TokenMean).unwrap();
        assert_eq!(l1, l2);
        let read = LossTrace::read(dir.path().join("loss_trace.jsonl")).unwrap();
        assert_eq!(read.steps, out.trace.steps);
    }

    #[test]
    fn base_is_frozen_and_accumulation_is_exact() {
        let (m0, data) = setup();
        let mut a = m0.clone();
        train(&mut a, &data, &quick(), None).unwrap();
        assert_eq!(a.params(), m0.params());
        let mut b = m0.clone();
        train(&mut b, &data, &TrainConfig { micro_batch_size: Some(1), ..quick() }, None).unwrap();
        for (la, lb) in a.adapter().unwrap().layers.iter().zip(&b.adapter().unwrap().layers) {
            assert!((&la.b - &lb.b).iter().all(|d| d.abs() < 1e-12));
        }
    }

    #[test]
    fn rejects_bad_setups() {
        let (m0, data) = setup();
        let mut base = m0.base();
        assert!(matches!(train(&mut base, &data, &quick(), None), Err(Error::Config(_))));
        let mut m = m0.clone();
        assert!(matches!(train(&mut m, &[], &quick(), None), Err(Error::Input(_))));
        let bad = TrainConfig { warmup_ratio: 1.0, ..quick() };
        assert!(matches!(train(&mut m, &data, &bad, None), Err(Error::Config(_))));
    }

    #[test]
    fn divergence_names_the_step() {
        let (mut m, data) = setup();
        for l in m.adapter_mut().unwrap().layers.iter_mut() {
            l.b.fill(f64::NAN);
        }
        assert!(matches!(train(&mut m, &data, &quick(), None), Err(Error::Divergence { step: 0, .. })));
    }
}
