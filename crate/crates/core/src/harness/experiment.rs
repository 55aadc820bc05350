//! Glyph-world experiments: pretraining to an OCR gate, recipe-specific
//! fine-tuning and evaluation, and the two-arm forgetting comparison.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::glyph::GlyphCipher;
use crate::modelkit::checkpoint::{load_model, save_model};
use crate::modelkit::decode::{generate, ModelInterface};
use crate::modelkit::{ReferenceOcr, Tokenizer, ToyConfig, ToyModel};
use crate::pipeline::example::{
    build_demo_variant, build_sft_dimt_example, build_sft_mt_example, build_ssr_example, DemoPayload, SourceProvenance,
    TrainingExample,
};
use crate::pipeline::selfreview::{generate_selfreview, select_source, SourceIndex};
use crate::pipeline::template::{DemoTask, PromptTemplate, CAPTION_INSTRUCTION, GLYPH_QUESTION, QWEN_OCR_INSTRUCTION};
use crate::training::{train, train_full, TrainConfig};

use super::protocol::{run_protocol, ProtocolConfig};
use super::world::{first_symbol, GlyphWorld};
use super::{EvalItem, EvalRecipe, EvalTask, ExperimentConfig, RunReport};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExperimentOptions {
    /// Where `config.json`, `report.json`, `loss_trace.jsonl` and
    /// `checkpoints/` are written.
    pub run_dir: Option<PathBuf>,
    /// Shared cache for pretrained models and self-review transcripts.
    pub cache_dir: Option<PathBuf>,
}

fn pretrain_key(cfg: &ExperimentConfig, seed: u64) -> String {
    let key = serde_json::json!({
        "world": cfg.world,
        "model": cfg.model,
        "pretrain": cfg.pretrain,
        "seed": seed,
    });
    hex::encode(&Sha256::digest(key.to_string().as_bytes())[..8])
}

fn ocr_protocol(cfg: &ExperimentConfig, dataset: &str) -> ProtocolConfig {
    ProtocolConfig {
        decode: cfg.decode.clone(),
        lang: cfg.lang_pair.rsplit('-').next().unwrap_or("zh").to_string(),
        dataset: dataset.into(),
        ..ProtocolConfig::default()
    }
}

/// Held-out OCR character accuracy under the native instruction.
pub fn ocr_accuracy(model: &dyn ModelInterface, world: &GlyphWorld, cfg: &ExperimentConfig) -> Result<f64> {
    let items: Vec<EvalItem> = world.test.samples.iter().cloned().map(EvalItem::ocr).collect();
    let rep = run_protocol(EvalRecipe::Base, model, &items, &ocr_protocol(cfg, "test"))?;
    Ok(rep.reports[&EvalTask::Ocr].corpus.ca.unwrap_or(0.0))
}

/// Trains a fresh toy model on the world's native tasks and checks the OCR
/// gate. With a cache directory, a model pretrained under the same settings
/// is reused.
pub fn pretrain(cfg: &ExperimentConfig, world: &GlyphWorld, seed: u64, cache_dir: Option<&Path>) -> Result<(ToyModel, f64)> {
    let path = cache_dir.map(|d| d.join("pretrain").join(pretrain_key(cfg, seed)).join("model.safetensors"));
    let cached = match &path {
        Some(p) if p.exists() => Some(load_model(p)?),
        _ => None,
    };
    let (model, final_loss) = match cached {
        Some(m) => (m, None),
        None => {
            let mut m = ToyModel::new(ToyConfig { init_seed: seed, ..cfg.model.clone() }, Tokenizer::toy())?;
            let data = world.pretrain_examples(m.tokenizer())?;
            let tc = TrainConfig { seed, ..cfg.pretrain.clone() };
            let out = train_full(&mut m, &data, &tc, None)?;
            if let Some(p) = &path {
                save_model(&m, p)?;
            }
            (m, out.trace.final_loss())
        }
    };
    let ca = ocr_accuracy(&model, world, cfg)?;
    log::info!("seed {seed}: pretrained held-out OCR CA {ca:.4}");
    if ca < cfg.pretrain_gate {
        let loss = final_loss.map_or_else(|| "cached model".to_string(), |l| format!("final training loss {l:.4}"));
        return Err(Error::Gate(format!(
            "pretraining reached held-out OCR CA {ca:.4}, below the gate {:.2} ({loss}, {} epochs at lr {}); \
             raise pretrain.epochs or pretrain.peak_lr",
            cfg.pretrain_gate, cfg.pretrain.epochs, cfg.pretrain.peak_lr
        )));
    }
    Ok((model, ca))
}

fn demo_template(task: DemoTask) -> PromptTemplate {
    match task {
        DemoTask::Ocr => PromptTemplate::qwen(),
        DemoTask::Caption => PromptTemplate::caption(CAPTION_INSTRUCTION),
        DemoTask::Vqa => PromptTemplate::vqa(QWEN_OCR_INSTRUCTION),
    }
}

/// Training examples for `cfg.recipe` over the fine-tuning split.
pub fn recipe_examples(cfg: &ExperimentConfig, world: &GlyphWorld, pretrained: &ToyModel, cache_dir: Option<&Path>) -> Result<Vec<TrainingExample>> {
    let tok = pretrained.tokenizer();
    let d = &world.finetune;
    let with_meta = |ex: TrainingExample, s: &crate::corpus::Sample| ex.with_image(s.image.clone()).with_id(&s.id);
    match cfg.recipe {
        EvalRecipe::SftDimt => d.samples.iter().map(|s| Ok(with_meta(build_sft_dimt_example(&s.target_text, tok)?, s))).collect(),
        EvalRecipe::SftMt => d
            .samples
            .iter()
            .map(|s| {
                let x = s.source_text.as_deref().unwrap_or_default();
                Ok(build_sft_mt_example(x, &s.target_text, tok)?.with_id(&s.id))
            })
            .collect(),
        EvalRecipe::Ssr => {
            let tmpl = demo_template(cfg.demo_task);
            let mut index = SourceIndex::default();
            match cfg.provenance {
                SourceProvenance::SelfGenerated => {
                    let cache = cache_dir.map(|c| c.join("selfreview"));
                    let records = generate_selfreview(pretrained, d, &tmpl, &cfg.decode, cache.as_deref())?;
                    index = SourceIndex::from_records(records);
                }
                SourceProvenance::ExternalOcr => {
                    let engine = ReferenceOcr::new(tok.clone()).with_noise(cfg.external_ocr_noise, 0);
                    let prompt = tok.encode(QWEN_OCR_INSTRUCTION);
                    let mut texts = HashMap::new();
                    for s in &d.samples {
                        texts.insert(s.id.clone(), tok.decode(&generate(&engine, &prompt, &s.image, &cfg.decode)?));
                    }
                    index = index.with_external_ocr(texts);
                }
                SourceProvenance::GroundTruth => {}
            }
            d.samples
                .iter()
                .map(|s| {
                    let x = select_source(s, &index, cfg.provenance)?;
                    let ex = match cfg.demo_task {
                        DemoTask::Ocr => build_ssr_example(&x, &s.target_text, &tmpl, tok)?,
                        DemoTask::Caption => {
                            build_demo_variant(&tmpl, &DemoPayload { demo_text: x, target: s.target_text.clone(), question: None }, tok)?
                        }
                        DemoTask::Vqa => {
                            let answer = GlyphCipher::standard().apply(&first_symbol(s.source_text.as_deref().unwrap_or_default()));
                            let payload = DemoPayload { demo_text: x, target: answer, question: Some(GLYPH_QUESTION.into()) };
                            build_demo_variant(&tmpl, &payload, tok)?
                        }
                    };
                    Ok(with_meta(ex.with_provenance(cfg.provenance), s))
                })
                .collect()
        }
        EvalRecipe::CotDirect | EvalRecipe::CotCascade | EvalRecipe::Base => Ok(Vec::new()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())
}

/// Fine-tunes a copy of `pretrained` with `cfg.recipe` and evaluates it.
pub fn run_with_pretrained(
    cfg: &ExperimentConfig,
    seed: u64,
    world: &GlyphWorld,
    pretrained: &ToyModel,
    pretrain_ocr_ca: f64,
    opts: &ExperimentOptions,
) -> Result<RunReport> {
    cfg.validate()?;
    if let Some(dir) = &opts.run_dir {
        write_json(&dir.join("config.json"), cfg)?;
    }
    let data = recipe_examples(cfg, world, pretrained, opts.cache_dir.as_deref())?;
    let mut model = pretrained.clone();
    let mut epoch_losses = Vec::new();
    let mut loss_trace = None;
    if cfg.recipe.trains() {
        model = pretrained.attach_adapter(&crate::modelkit::AdapterConfig { init_seed: seed, ..cfg.adapter.clone() })?;
        let ckpt = opts.run_dir.as_ref().map(|d| d.join("checkpoints"));
        let out = train(&mut model, &data, &TrainConfig { seed, ..cfg.finetune.clone() }, ckpt.as_deref())?;
        if let (Some(dir), Some(ckpt)) = (&opts.run_dir, &ckpt) {
            let to = dir.join("loss_trace.jsonl");
            fs::rename(ckpt.join("loss_trace.jsonl"), &to).map_err(|e| Error::io(&to, e))?;
            loss_trace = Some("loss_trace.jsonl".to_string());
        }
        epoch_losses = out.trace.epoch_means;
    }

    let pcfg = ProtocolConfig { template: demo_template(cfg.demo_task), ..ocr_protocol(cfg, "glyph-test") };
    let rep = run_protocol(cfg.recipe, &model, &world.eval_items(), &pcfg)?;
    let report = RunReport {
        config: cfg.clone(),
        config_digest: cfg.digest(),
        seed,
        pretrain_ocr_ca,
        reports: rep.reports,
        epoch_losses,
        loss_trace,
        adapter_checksum: model.adapter_checksum(),
        seconds_per_page: rep.seconds_per_page,
        no_separator: rep.no_separator,
    };
    if let Some(dir) = &opts.run_dir {
        write_json(&dir.join("report.json"), &report)?;
    }
    Ok(report)
}

/// Runs one experiment for one seed: world, pretraining (gated),
/// fine-tuning and evaluation.
pub fn run_experiment(cfg: &ExperimentConfig, seed: u64, opts: &ExperimentOptions) -> Result<RunReport> {
    cfg.validate()?;
    let world = GlyphWorld::new(cfg.world.clone(), cfg.train_size, seed)?;
    let (pretrained, ca) = pretrain(cfg, &world, seed, opts.cache_dir.as_deref())?;
    run_with_pretrained(cfg, seed, &world, &pretrained, ca, opts)
}

/// Both arms of the forgetting comparison for one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingReport {
    pub seed: u64,
    pub pretrain_ocr_ca: f64,
    pub sft_dimt: RunReport,
    pub ssr: RunReport,
}

impl ForgettingReport {
    /// OCR accuracy after fine-tuning, per arm.
    pub fn ocr_ca(&self) -> (f64, f64) {
        (self.sft_dimt.ca(EvalTask::Ocr).unwrap_or(0.0), self.ssr.ca(EvalTask::Ocr).unwrap_or(0.0))
    }

    /// Translation accuracy, per arm.
    pub fn translation_ca(&self) -> (f64, f64) {
        (self.sft_dimt.ca(EvalTask::Dimt).unwrap_or(0.0), self.ssr.ca(EvalTask::Dimt).unwrap_or(0.0))
    }
}

/// Pretrains one model and fine-tunes two copies on the same images with the
/// same budget: one on direct translation, one on self-review data.
pub fn forgetting_experiment_with(base: &ExperimentConfig, seed: u64, opts: &ExperimentOptions) -> Result<ForgettingReport> {
    let sft_cfg = ExperimentConfig { recipe: EvalRecipe::SftDimt, demo_task: DemoTask::Ocr, provenance: SourceProvenance::SelfGenerated, ..base.clone() };
    let ssr_cfg = ExperimentConfig { recipe: EvalRecipe::Ssr, ..sft_cfg.clone() };
    ssr_cfg.validate()?;
    let world = GlyphWorld::new(base.world.clone(), base.train_size, seed)?;
    let (pretrained, ca) = pretrain(base, &world, seed, opts.cache_dir.as_deref())?;
    let arm = |cfg: &ExperimentConfig, name: &str| {
        let o = ExperimentOptions { run_dir: opts.run_dir.as_ref().map(|d| d.join(name)), cache_dir: opts.cache_dir.clone() };
        run_with_pretrained(cfg, seed, &world, &pretrained, ca, &o)
    };
    let sft_dimt = arm(&sft_cfg, "sft_dimt")?;
    let ssr = arm(&ssr_cfg, "ssr")?;
    Ok(ForgettingReport { seed, pretrain_ocr_ca: ca, sft_dimt, ssr })
}

/// The forgetting comparison with default settings.
pub fn forgetting_experiment(seed: u64) -> Result<ForgettingReport> {
    forgetting_experiment_with(&ExperimentConfig::default(), seed, &ExperimentOptions::default())
}
