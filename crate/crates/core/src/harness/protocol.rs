//! Evaluation protocols: how each recipe is prompted at test time and how its
//! output is scored.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::ImageRef;
use crate::error::{Error, Result};
use crate::metrics::{score, Lang, MetricReport, ReportMeta, ScoreItem, ScoreTask};
use crate::modelkit::decode::{generate_with, DecodeConfig, ModelInterface};
use crate::modelkit::TokenId;
use crate::pipeline::example::{
    cascade_round1_prompt, cascade_round2_prompt, cot_direct_prompt, escape_specials, unescape_specials,
};
use crate::pipeline::template::{PromptTemplate, CASCADE_TRANSLATE_INSTRUCTION, QWEN_OCR_INSTRUCTION, SFT_DIMT_INSTRUCTION};

use super::{EvalItem, EvalRecipe, EvalTask};

/// Output of [`ssr_decode`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SsrOutput {
    pub ocr_text: String,
    pub translation: String,
    /// No separator was generated; `translation` holds the whole output.
    pub no_separator: bool,
}

/// Splits generated tokens at the first separator token. Everything after it,
/// including later separators, stays in the translation.
pub fn split_at_separator(tokens: &[TokenId], separator: TokenId, decode: impl Fn(&[TokenId]) -> String) -> SsrOutput {
    match tokens.iter().position(|&t| t == separator) {
        Some(i) => SsrOutput {
            ocr_text: unescape_specials(&decode(&tokens[..i])),
            translation: decode(&tokens[i + 1..]),
            no_separator: false,
        },
        None => SsrOutput { ocr_text: String::new(), translation: decode(tokens), no_separator: true },
    }
}

fn separator(model: &dyn ModelInterface, tmpl: &PromptTemplate) -> Result<TokenId> {
    let t = model.tokenizer();
    t.special(&tmpl.demo_separator_token)
        .filter(|&id| t.is_separator(id))
        .ok_or_else(|| Error::Config(format!("separator {:?} is not registered", tmpl.demo_separator_token)))
}

/// Prompts with the self-review instruction and splits the response into
/// transcript and translation.
pub fn ssr_decode(model: &dyn ModelInterface, image: &ImageRef, tmpl: &PromptTemplate, cfg: &DecodeConfig) -> Result<SsrOutput> {
    let sep = separator(model, tmpl)?;
    let prompt = model.tokenizer().encode(&tmpl.combined_instruction());
    let out = generate_with(model, &prompt, Some(image), cfg)?;
    Ok(split_at_separator(&out, sep, |ids| model.tokenizer().decode(ids)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    /// Template of the translation prompt; cascades use its native
    /// instruction for the first round.
    pub template: PromptTemplate,
    /// Native OCR instruction used for the preservation test.
    pub ocr_instruction: String,
    pub decode: DecodeConfig,
    /// Target-language tag used for BLEU tokenization.
    pub lang: String,
    pub dataset: String,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            template: PromptTemplate::qwen(),
            ocr_instruction: QWEN_OCR_INSTRUCTION.into(),
            decode: DecodeConfig::greedy(24),
            lang: "zh".into(),
            dataset: "test".into(),
        }
    }
}

/// Scores per task present in the test set, plus timing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub reports: BTreeMap<EvalTask, MetricReport>,
    /// Mean wall-clock seconds of generation per translated page.
    pub seconds_per_page: f64,
    pub generate_calls: usize,
    /// Translation outputs that lacked the separator.
    pub no_separator: usize,
}

struct ItemResult {
    hyp: String,
    seconds: f64,
    calls: usize,
    no_separator: bool,
}

struct Runner<'a> {
    model: &'a dyn ModelInterface,
    cfg: &'a ProtocolConfig,
}

impl Runner<'_> {
    fn gen(&self, prompt: &str, image: Option<&ImageRef>, acc: &mut ItemResult) -> Result<Vec<TokenId>> {
        let ids = self.model.tokenizer().encode(prompt);
        let start = Instant::now();
        let out = generate_with(self.model, &ids, image, &self.cfg.decode);
        acc.seconds += start.elapsed().as_secs_f64();
        acc.calls += 1;
        out
    }

    fn text(&self, ids: &[TokenId]) -> String {
        self.model.tokenizer().decode(ids)
    }

    fn translate(&self, recipe: EvalRecipe, image: &ImageRef) -> Result<ItemResult> {
        let tmpl = &self.cfg.template;
        let mut r = ItemResult { hyp: String::new(), seconds: 0.0, calls: 0, no_separator: false };
        match recipe {
            EvalRecipe::Ssr | EvalRecipe::CotDirect => {
                let sep = separator(self.model, tmpl)?;
                let out = self.gen(&cot_direct_prompt(tmpl), Some(image), &mut r)?;
                let split = split_at_separator(&out, sep, |ids| self.text(ids));
                r.hyp = split.translation;
                r.no_separator = split.no_separator;
            }
            EvalRecipe::SftDimt | EvalRecipe::Base => {
                let out = self.gen(SFT_DIMT_INSTRUCTION, Some(image), &mut r)?;
                r.hyp = self.text(&out);
            }
            EvalRecipe::CotCascade => {
                let ocr = self.gen(&cascade_round1_prompt(tmpl), Some(image), &mut r)?;
                let prompt = cascade_round2_prompt(tmpl, Some(&self.text(&ocr)))?;
                let out = self.gen(&prompt, Some(image), &mut r)?;
                r.hyp = self.text(&out);
            }
            EvalRecipe::SftMt => {
                let ocr = self.gen(&cascade_round1_prompt(tmpl), Some(image), &mut r)?;
                let prompt = format!("{}\n{}", escape_specials(&self.text(&ocr)), CASCADE_TRANSLATE_INSTRUCTION);
                let out = self.gen(&prompt, None, &mut r)?;
                r.hyp = self.text(&out);
            }
        }
        Ok(r)
    }

    fn run(&self, recipe: EvalRecipe, item: &EvalItem) -> Result<ItemResult> {
        let image = &item.sample.image;
        let mut r = ItemResult { hyp: String::new(), seconds: 0.0, calls: 0, no_separator: false };
        match item.task {
            EvalTask::Dimt => return self.translate(recipe, image),
            EvalTask::Ocr => {
                let out = self.gen(&self.cfg.ocr_instruction, Some(image), &mut r)?;
                r.hyp = self.text(&out);
            }
            EvalTask::Vqa | EvalTask::CrossLingualVqa => {
                let q = item.question.as_deref().unwrap_or_default();
                let out = self.gen(q, Some(image), &mut r)?;
                r.hyp = self.text(&out);
            }
        }
        Ok(r)
    }
}

/// Runs `recipe` over every test item and scores each task separately.
///
/// DIMT items are scored on the translation only; OCR items use the
/// native OCR instruction and are scored against the sample's source
/// text; VQA items are prompted with their question. Only generation is
/// timed.
pub fn run_protocol(recipe: EvalRecipe, model: &dyn ModelInterface, testset: &[EvalItem], cfg: &ProtocolConfig) -> Result<ProtocolReport> {
    cfg.template.validate()?;
    cfg.decode.validate()?;
    if recipe == EvalRecipe::Base && model.has_adapter() {
        return Err(Error::Config("recipe base evaluates the model without fine-tuning, but an adapter is attached".into()));
    }
    if testset.is_empty() {
        return Err(Error::Input("empty test set".into()));
    }
    for item in testset {
        item.validate()?;
    }
    let runner = Runner { model, cfg };
    let results = testset
        .par_iter()
        .map(|item| runner.run(recipe, item))
        .collect::<Result<Vec<_>>>()?;

    let lang = Lang::from_tag(&cfg.lang);
    let mut reports = BTreeMap::new();
    let mut pages = 0;
    let mut seconds = 0.0;
    for task in [EvalTask::Dimt, EvalTask::Ocr, EvalTask::Vqa, EvalTask::CrossLingualVqa] {
        let mut items = Vec::new();
        for (it, r) in testset.iter().zip(&results).filter(|(it, _)| it.task == task) {
            if task == EvalTask::Dimt {
                pages += 1;
                seconds += r.seconds;
            }
            let reference = match task {
                EvalTask::Dimt => it.sample.target_text.clone(),
                EvalTask::Ocr => it.sample.source_text.clone().unwrap_or_default(),
                _ => String::new(),
            };
            items.push(ScoreItem { id: it.sample.id.clone(), hyp: r.hyp.clone(), reference, answers: it.answers.clone() });
        }
        if items.is_empty() {
            continue;
        }
        let score_task = match task {
            EvalTask::Dimt => ScoreTask::Dimt,
            EvalTask::Ocr => ScoreTask::Ocr,
            EvalTask::Vqa | EvalTask::CrossLingualVqa => ScoreTask::Vqa,
        };
        let meta = ReportMeta {
            model_fingerprint: model.fingerprint(),
            dataset: format!("{}/{}", cfg.dataset, task.as_str()),
            recipe: recipe.as_str().into(),
        };
        reports.insert(task, score(score_task, &items, lang, meta)?);
    }
    Ok(ProtocolReport {
        reports,
        seconds_per_page: if pages > 0 { seconds / pages as f64 } else { 0.0 },
        generate_calls: results.iter().map(|r| r.calls).sum(),
        no_separator: testset
            .iter()
            .zip(&results)
            .filter(|(it, r)| it.task == EvalTask::Dimt && r.no_separator)
            .count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Sample;
    use crate::glyph::{GlyphCipher, GlyphGrid};
    use crate::modelkit::decode::DecodeSession;
    use crate::modelkit::{ReferenceOcr, Tokenizer};
    use crate::modelkit::tokenizer::TRANSLATION;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn tok() -> Tokenizer {
        Tokenizer::toy()
    }

    #[test]
    fn splits_at_first_separator() {
        let t = tok();
        let sep = t.special(TRANSLATION).unwrap();
        let mut ids = t.encode("abc");
        ids.push(sep);
        ids.extend(t.encode("甲乙"));
        ids.push(sep);
        ids.extend(t.encode("丙"));
        let out = split_at_separator(&ids, sep, |i| t.decode(i));
        assert_eq!(out.ocr_text, "abc");
        assert_eq!(out.translation, format!("甲乙{TRANSLATION}丙"));
        assert!(!out.no_separator);
        let out = split_at_separator(&t.encode("甲乙"), sep, |i| t.decode(i));
        assert_eq!((out.ocr_text.as_str(), out.translation.as_str(), out.no_separator), ("", "甲乙", true));
    }

    /// Answers every prompt with a fixed script and counts sessions.
    struct Fixed {
        tokenizer: Tokenizer,
        script: Vec<TokenId>,
        calls: AtomicUsize,
        adapter: bool,
    }

    struct Sess {
        script: Vec<TokenId>,
        step: usize,
        logits: Vec<f64>,
        eos: TokenId,
    }

    impl Sess {
        fn refresh(&mut self) {
            self.logits.iter_mut().for_each(|l| *l = 0.0);
            let next = self.script.get(self.step).copied().unwrap_or(self.eos);
            self.logits[next as usize] = 1.0;
        }
    }

    impl DecodeSession for Sess {
        fn logits(&self) -> &[f64] {
            &self.logits
        }
        fn push(&mut self, _: TokenId) -> Result<()> {
            self.step += 1;
            self.refresh();
            Ok(())
        }
    }

    impl ModelInterface for Fixed {
        fn tokenizer(&self) -> &Tokenizer {
            &self.tokenizer
        }
        fn fingerprint(&self) -> String {
            "fixed".into()
        }
        fn begin<'a>(&'a self, _: Option<&ImageRef>, _: &[TokenId]) -> Result<Box<dyn DecodeSession + 'a>> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            let mut s = Sess { script: self.script.clone(), step: 0, logits: vec![0.0; self.tokenizer.vocab_size()], eos: self.tokenizer.eos() };
            s.refresh();
            Ok(Box::new(s))
        }
        fn has_adapter(&self) -> bool {
            self.adapter
        }
    }

    fn fixed(text: &str, adapter: bool) -> Fixed {
        let t = tok();
        Fixed { script: t.encode(text), tokenizer: t, calls: AtomicUsize::new(0), adapter }
    }

    fn items(texts: &[&str]) -> Vec<EvalItem> {
        texts
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let mut s = Sample::new(format!("s{i}"), ImageRef::glyphs(GlyphGrid::from_text(x, 0)), GlyphCipher::standard().apply(x));
                s.source_text = Some(x.to_string());
                EvalItem::dimt(s)
            })
            .collect()
    }

    #[test]
    fn cascade_makes_two_calls_per_page() {
        let m = fixed("甲乙", false);
        let rep = run_protocol(EvalRecipe::CotCascade, &m, &items(&["ab", "cd", "ef"]), &ProtocolConfig::default()).unwrap();
        assert_eq!(m.calls.load(Ordering::SeqCst), 6);
        assert_eq!(rep.generate_calls, 6);
        let m = fixed("甲乙", false);
        run_protocol(EvalRecipe::SftDimt, &m, &items(&["ab"]), &ProtocolConfig::default()).unwrap();
        assert_eq!(m.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn translation_scoring_ignores_the_transcript() {
        // transcript and translation use disjoint alphabets; a perfect
        // translation scores 100 whatever precedes the separator
        let m = fixed(&format!("ponm{TRANSLATION}{}", GlyphCipher::standard().apply("ab")), true);
        let rep = run_protocol(EvalRecipe::Ssr, &m, &items(&["ab"]), &ProtocolConfig::default()).unwrap();
        let dimt = &rep.reports[&EvalTask::Dimt];
        assert_eq!(dimt.corpus.bleu, Some(100.0));
        assert_eq!(dimt.corpus.ca, Some(1.0));
        assert_eq!(rep.no_separator, 0);
        assert_eq!(dimt.metadata.recipe, "ssr");
    }

    #[test]
    fn base_recipe_rejects_adapters() {
        let m = fixed("甲", true);
        let err = run_protocol(EvalRecipe::Base, &m, &items(&["a"]), &ProtocolConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn ocr_preservation_uses_native_instruction() {
        let m = ReferenceOcr::default();
        let mut set = items(&["abc", "de"]);
        set.push(EvalItem::ocr(set[0].sample.clone()));
        let rep = run_protocol(EvalRecipe::Base, &m, &set, &ProtocolConfig::default()).unwrap();
        assert_eq!(rep.reports[&EvalTask::Ocr].corpus.ca, Some(1.0));
        // the reference OCR model never translates
        assert_eq!(rep.reports[&EvalTask::Dimt].corpus.ca, Some(0.0));
    }
}
