//! Evaluation protocols, the glyph-world experiments and the sweep runner.

pub mod experiment;
pub mod protocol;
pub mod sweep;
pub mod world;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Sample;
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::modelkit::{AdapterConfig, DecodeConfig, ToyConfig};
use crate::pipeline::example::SourceProvenance;
use crate::pipeline::template::DemoTask;
use crate::training::TrainConfig;

pub use experiment::{forgetting_experiment, forgetting_experiment_with, pretrain, run_experiment, ExperimentOptions, ForgettingReport};
pub use protocol::{run_protocol, split_at_separator, ssr_decode, ProtocolConfig, ProtocolReport, SsrOutput};
pub use sweep::{sweep, SweepOptions, SweepSummary};
pub use world::{GlyphWorld, WorldConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalTask {
    Dimt,
    Ocr,
    Vqa,
    CrossLingualVqa,
}

impl EvalTask {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalTask::Dimt => "dimt",
            EvalTask::Ocr => "ocr",
            EvalTask::Vqa => "vqa",
            EvalTask::CrossLingualVqa => "cross_lingual_vqa",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalItem {
    pub sample: Sample,
    pub task: EvalTask,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub answers: Vec<String>,
}

impl EvalItem {
    pub fn dimt(sample: Sample) -> Self {
        EvalItem { sample, task: EvalTask::Dimt, question: None, answers: Vec::new() }
    }

    pub fn ocr(sample: Sample) -> Self {
        EvalItem { sample, task: EvalTask::Ocr, question: None, answers: Vec::new() }
    }

    pub fn vqa(sample: Sample, question: impl Into<String>, answers: Vec<String>) -> Self {
        EvalItem { sample, task: EvalTask::Vqa, question: Some(question.into()), answers }
    }

    pub fn validate(&self) -> Result<()> {
        match self.task {
            EvalTask::Vqa | EvalTask::CrossLingualVqa => {
                if self.question.as_deref().map_or(true, str::is_empty) {
                    return Err(Error::Validation(format!("VQA item {:?} has no question", self.sample.id)));
                }
                if self.answers.is_empty() {
                    return Err(Error::Validation(format!("VQA item {:?} has no answers", self.sample.id)));
                }
            }
            EvalTask::Ocr if self.sample.source_text.is_none() => {
                return Err(Error::Validation(format!("OCR item {:?} has no source text", self.sample.id)));
            }
            _ => {}
        }
        Ok(())
    }
}

/// How a model is fine-tuned (if at all) and prompted at test time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalRecipe {
    Ssr,
    SftDimt,
    SftMt,
    CotDirect,
    CotCascade,
    Base,
}

impl EvalRecipe {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalRecipe::Ssr => "ssr",
            EvalRecipe::SftDimt => "sft_dimt",
            EvalRecipe::SftMt => "sft_mt",
            EvalRecipe::CotDirect => "cot_direct",
            EvalRecipe::CotCascade => "cot_cascade",
            EvalRecipe::Base => "base",
        }
    }

    /// Recipes that fine-tune an adapter; the others only prompt.
    pub fn trains(self) -> bool {
        matches!(self, EvalRecipe::Ssr | EvalRecipe::SftDimt | EvalRecipe::SftMt)
    }
}

impl std::str::FromStr for EvalRecipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.into()))
            .map_err(|_| Error::Config(format!("unknown recipe {s:?}")))
    }
}

/// One glyph-world experiment: world, model, pretraining, fine-tuning recipe
/// and evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub recipe: EvalRecipe,
    pub demo_task: DemoTask,
    /// Source of the self-review text; only meaningful for `ssr`.
    pub provenance: SourceProvenance,
    pub train_size: usize,
    pub lang_pair: String,
    pub seeds: Vec<u64>,
    pub world: WorldConfig,
    pub model: ToyConfig,
    pub pretrain: TrainConfig,
    /// Held-out OCR character accuracy the pretrained model must reach.
    pub pretrain_gate: f64,
    pub finetune: TrainConfig,
    pub adapter: AdapterConfig,
    pub decode: DecodeConfig,
    /// Corruption rate of the external OCR engine.
    pub external_ocr_noise: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            recipe: EvalRecipe::Ssr,
            demo_task: DemoTask::Ocr,
            provenance: SourceProvenance::SelfGenerated,
            train_size: 800,
            lang_pair: "en-zh".into(),
            seeds: vec![0],
            world: WorldConfig::default(),
            model: ToyConfig::default(),
            pretrain: TrainConfig { epochs: 12, batch_size: 16, peak_lr: 3e-3, warmup_ratio: 0.05, ..TrainConfig::default() },
            pretrain_gate: 0.95,
            finetune: TrainConfig { epochs: 3, batch_size: 8, peak_lr: 2e-3, warmup_ratio: 0.1, ..TrainConfig::default() },
            adapter: AdapterConfig::default(),
            decode: DecodeConfig::greedy(24),
            external_ocr_noise: 0.1,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.adapter.validate()?;
        self.decode.validate()?;
        if self.train_size == 0 {
            return Err(Error::Config("train_size must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if !(0.0..=1.0).contains(&self.pretrain_gate) {
            return Err(Error::Config("pretrain_gate must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.external_ocr_noise) {
            return Err(Error::Config("external_ocr_noise must lie in [0, 1]".into()));
        }
        if self.recipe != EvalRecipe::Ssr {
            if self.demo_task != DemoTask::Ocr {
                return Err(Error::Config(format!("demo_task {:?} only applies to recipe ssr", self.demo_task)));
            }
            if self.provenance != SourceProvenance::SelfGenerated {
                return Err(Error::Config(format!("provenance {} only applies to recipe ssr", self.provenance.as_str())));
            }
        }
        if self.demo_task != DemoTask::Ocr {
            if self.provenance != SourceProvenance::SelfGenerated {
                return Err(Error::Config("caption and VQA demonstrations are always self-generated".into()));
            }
            if !self.world.pretrain_tasks.contains(&self.demo_task) {
                return Err(Error::Config(format!("demo_task {:?} is not among the pretraining tasks", self.demo_task)));
            }
        }
        Ok(())
    }

    /// Stable digest of the whole configuration.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub config_digest: String,
    pub seed: u64,
    /// Held-out OCR accuracy of the pretrained model.
    pub pretrain_ocr_ca: f64,
    /// One report per evaluated task.
    pub reports: BTreeMap<EvalTask, MetricReport>,
    pub epoch_losses: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_trace: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter_checksum: Option<String>,
    pub seconds_per_page: f64,
    pub no_separator: usize,
}

impl RunReport {
    pub fn ca(&self, task: EvalTask) -> Option<f64> {
        self.reports.get(&task).and_then(|r| r.corpus.ca)
    }

    /// The metric reports alone, serialized: free of timings and paths.
    pub fn metrics_json(&self) -> String {
        serde_json::to_string_pretty(&self.reports).expect("reports serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        let ok = ExperimentConfig::default();
        ok.validate().unwrap();
        let bad = ExperimentConfig { recipe: EvalRecipe::SftDimt, provenance: SourceProvenance::GroundTruth, ..ok.clone() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let mut bad = ExperimentConfig { demo_task: DemoTask::Caption, ..ok.clone() };
        bad.world.pretrain_tasks = vec![DemoTask::Ocr];
        assert!(bad.validate().is_err());
        let fine = ExperimentConfig { demo_task: DemoTask::Caption, ..ok.clone() };
        fine.validate().unwrap();
        assert_ne!(ok.digest(), fine.digest());
        assert_eq!(ok.digest(), ExperimentConfig::default().digest());
        assert_eq!("cot_cascade".parse::<EvalRecipe>().unwrap(), EvalRecipe::CotCascade);
        assert!("nope".parse::<EvalRecipe>().is_err());
    }

    #[test]
    fn vqa_items_need_answers() {
        let s = world::glyph_sample("a", "abc", "glyph");
        assert!(EvalItem::vqa(s.clone(), "q", vec![]).validate().is_err());
        EvalItem::vqa(s, "q", vec!["a".into()]).validate().unwrap();
    }
}
