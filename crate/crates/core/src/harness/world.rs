//! The glyph-grid world: images are rows of source glyphs, OCR is
//! transcription, translation is the glyph cipher.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, ImageRef, Sample};
use crate::error::{Error, Result};
use crate::glyph::{GlyphCipher, GlyphGrid, SOURCE_GLYPHS};
use crate::modelkit::Tokenizer;
use crate::modelkit::tokenizer::ANSWER;
use crate::pipeline::example::{build_plain_example, build_sft_mt_example, build_two_part_example, TrainingExample};
use crate::pipeline::template::{
    DemoTask, PromptTemplate, ANSWER_SUFFIX, CAPTION_INSTRUCTION, COUNT_SUFFIX, GLYPH_QUESTION, LAST_SYMBOL_SUFFIX,
    QWEN_OCR_INSTRUCTION,
};

use super::EvalItem;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub min_len: usize,
    pub max_len: usize,
    pub pretrain_size: usize,
    pub test_size: usize,
    /// Native tasks the toy model is pretrained on.
    pub pretrain_tasks: Vec<DemoTask>,
    /// Also pretrain on text-only translation of the transcripts.
    pub pretrain_text_mt: bool,
    /// Also pretrain on two-part instructions (`<task clause>, then <modifier>`)
    /// answered as `<task output><Answer><modifier output>`.
    pub pretrain_composite: bool,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            min_len: 3,
            max_len: 8,
            pretrain_size: 1200,
            test_size: 100,
            pretrain_tasks: vec![DemoTask::Ocr, DemoTask::Caption, DemoTask::Vqa],
            pretrain_text_mt: true,
            pretrain_composite: true,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!("bad text length range {}..={}", self.min_len, self.max_len)));
        }
        if self.max_len > 8 {
            return Err(Error::Config("texts longer than 8 glyphs do not fit the toy image grid".into()));
        }
        if self.pretrain_size == 0 || self.test_size == 0 {
            return Err(Error::Config("world split sizes must be positive".into()));
        }
        if self.pretrain_tasks.is_empty() || !self.pretrain_tasks.contains(&DemoTask::Ocr) {
            return Err(Error::Config("pretraining must include the OCR task".into()));
        }
        Ok(())
    }
}

/// The three disjointly seeded splits of one world.
#[derive(Debug, Clone, PartialEq)]
pub struct GlyphWorld {
    pub config: WorldConfig,
    pub pretrain: Dataset,
    pub finetune: Dataset,
    pub test: Dataset,
}

/// Caption of a glyph image: its symbol count.
pub fn caption_of(text: &str) -> String {
    text.chars().filter(|c| !c.is_whitespace()).count().to_string()
}

/// Answer to [`GLYPH_QUESTION`].
pub fn first_symbol(text: &str) -> String {
    text.chars().find(|c| !c.is_whitespace()).map(String::from).unwrap_or_default()
}

pub fn last_symbol(text: &str) -> String {
    text.chars().rev().find(|c| !c.is_whitespace()).map(String::from).unwrap_or_default()
}

pub fn glyph_sample(id: impl Into<String>, text: &str, domain: &str) -> Sample {
    let mut s = Sample::new(id, ImageRef::glyphs(GlyphGrid::from_text(text, 0)), GlyphCipher::standard().apply(text));
    s.source_text = Some(text.to_string());
    s.domain = domain.to_string();
    s.lang_pair = "en-zh".into();
    s
}

fn random_texts(rng: &mut ChaCha8Rng, n: usize, min: usize, max: usize) -> Vec<String> {
    let glyphs: Vec<char> = SOURCE_GLYPHS.chars().collect();
    (0..n)
        .map(|_| {
            let len = rng.gen_range(min..=max);
            (0..len).map(|_| glyphs[rng.gen_range(0..glyphs.len())]).collect()
        })
        .collect()
}

impl GlyphWorld {
    /// Builds a world with `finetune_size` fine-tuning images. Splits are
    /// prefix-stable: a larger fine-tuning split extends a smaller one.
    pub fn new(config: WorldConfig, finetune_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if finetune_size == 0 {
            return Err(Error::Config("fine-tuning split must not be empty".into()));
        }
        let split = |name: &str, n: usize, stream: u64| -> Result<Dataset> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream);
            let samples = random_texts(&mut rng, n, config.min_len, config.max_len)
                .iter()
                .enumerate()
                .map(|(i, t)| glyph_sample(format!("{name}-{i:05}"), t, "glyph"))
                .collect();
            Dataset::new(samples, name)
        };
        Ok(GlyphWorld {
            pretrain: split("pretrain", config.pretrain_size, 1)?,
            finetune: split("finetune", finetune_size, 2)?,
            test: split("test", config.test_size, 3)?,
            config,
        })
    }

    /// Native-task supervision for every pretraining image.
    pub fn pretrain_examples(&self, tokenizer: &Tokenizer) -> Result<Vec<TrainingExample>> {
        let mut out = Vec::new();
        for (i, s) in self.pretrain.samples.iter().enumerate() {
            let text = s.source_text.as_deref().unwrap_or_default();
            for task in &self.config.pretrain_tasks {
                let (instr, resp) = match task {
                    DemoTask::Ocr => (QWEN_OCR_INSTRUCTION, text.to_string()),
                    DemoTask::Caption => (CAPTION_INSTRUCTION, caption_of(text)),
                    DemoTask::Vqa => (GLYPH_QUESTION, first_symbol(text)),
                };
                out.push(build_plain_example(instr, &resp, tokenizer)?.with_image(s.image.clone()).with_id(&s.id));
                if self.config.pretrain_composite && *task != DemoTask::Vqa {
                    let tmpl = match task {
                        DemoTask::Caption => PromptTemplate::caption(CAPTION_INSTRUCTION),
                        _ => PromptTemplate::qwen(),
                    };
                    let (modifier, extra) = match (i + *task as usize) % 3 {
                        0 => (format!("{ANSWER_SUFFIX}\n{GLYPH_QUESTION}"), first_symbol(text)),
                        1 => (COUNT_SUFFIX.to_string(), caption_of(text)),
                        _ => (LAST_SYMBOL_SUFFIX.to_string(), last_symbol(text)),
                    };
                    let instr = format!("{}{modifier}", tmpl.clause());
                    out.push(build_two_part_example(&instr, &resp, ANSWER, &extra, tokenizer)?.with_image(s.image.clone()).with_id(&s.id));
                }
            }
            if self.config.pretrain_text_mt {
                out.push(build_sft_mt_example(text, &s.target_text, tokenizer)?.with_id(&s.id));
            }
        }
        Ok(out)
    }

    /// DIMT and OCR items for every test image, plus VQA items when the
    /// model was pretrained on the question task.
    pub fn eval_items(&self) -> Vec<EvalItem> {
        let mut items = Vec::new();
        for s in &self.test.samples {
            items.push(EvalItem::dimt(s.clone()));
            items.push(EvalItem::ocr(s.clone()));
            if self.config.pretrain_tasks.contains(&DemoTask::Vqa) {
                let answer = first_symbol(s.source_text.as_deref().unwrap_or_default());
                items.push(EvalItem::vqa(s.clone(), GLYPH_QUESTION, vec![answer]));
            }
        }
        items
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worlds_are_seeded_and_splits_differ() {
        let cfg = WorldConfig { pretrain_size: 20, test_size: 20, ..WorldConfig::default() };
        let a = GlyphWorld::new(cfg.clone(), 20, 7).unwrap();
        assert_eq!(a, GlyphWorld::new(cfg.clone(), 20, 7).unwrap());
        assert_ne!(a.pretrain.samples[0].source_text, a.test.samples[0].source_text);
        assert_ne!(a, GlyphWorld::new(cfg.clone(), 20, 8).unwrap());
        let s = &a.test.samples[0];
        let x = s.source_text.as_deref().unwrap();
        assert_eq!(s.image.as_grid().unwrap().transcription(), x);
        assert_eq!(s.target_text, GlyphCipher::standard().apply(x));
        assert!((3..=8).contains(&x.chars().count()));
        let small = GlyphWorld::new(cfg.clone(), 5, 7).unwrap();
        assert_eq!(small.finetune.samples[..], a.finetune.samples[..5]);
        assert_eq!(small.test, a.test);
    }

    #[test]
    fn native_tasks() {
        assert_eq!(caption_of("abc"), "3");
        assert_eq!(first_symbol("bca"), "b");
        assert_eq!(last_symbol("bca"), "a");
        let cfg = WorldConfig {
            pretrain_size: 3,
            pretrain_tasks: vec![DemoTask::Ocr, DemoTask::Vqa],
            ..WorldConfig::default()
        };
        let w = GlyphWorld::new(cfg, 1, 1).unwrap();
        let ex = w.pretrain_examples(&Tokenizer::toy()).unwrap();
        // ocr, ocr-then-question, question, text translation
        assert_eq!(ex.len(), 12);
        assert_eq!(ex.iter().filter(|e| e.image.is_none()).count(), 3);
        assert!(WorldConfig { max_len: 9, ..WorldConfig::default() }.validate().is_err());
    }
}
