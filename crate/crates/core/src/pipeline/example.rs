//! Training-example construction for the self-review recipe, the SFT
//! baselines and the caption/VQA demonstration variants, plus the text
//! rendering used to inspect and re-parse responses.

use serde::{Deserialize, Serialize};

use crate::corpus::ImageRef;
use crate::error::{Error, Result};
use crate::modelkit::tokenizer::{TokenId, Tokenizer};
use crate::pipeline::template::{
    self, DemoTask, PromptTemplate, CASCADE_TRANSLATE_INSTRUCTION, SFT_DIMT_INSTRUCTION,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recipe {
    Ssr,
    SftDimt,
    SftMt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceProvenance {
    SelfGenerated,
    GroundTruth,
    ExternalOcr,
}

impl SourceProvenance {
    pub fn as_str(self) -> &'static str {
        match self {
            SourceProvenance::SelfGenerated => "self_generated",
            SourceProvenance::GroundTruth => "ground_truth",
            SourceProvenance::ExternalOcr => "external_ocr",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleMeta {
    pub sample_id: String,
    pub recipe: Recipe,
    /// Where the response's source half came from; `None` when the response
    /// has no source half.
    pub source_provenance: Option<SourceProvenance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub instruction_tokens: Vec<TokenId>,
    pub response_tokens: Vec<TokenId>,
    /// One entry per instruction token followed by one per response token.
    pub loss_mask: Vec<bool>,
    /// `None` for text-only examples.
    pub image: Option<ImageRef>,
    pub meta: ExampleMeta,
}

impl TrainingExample {
    fn new(instruction: Vec<TokenId>, response: Vec<TokenId>, recipe: Recipe, prov: Option<SourceProvenance>) -> Self {
        let mut loss_mask = vec![false; instruction.len()];
        loss_mask.extend(std::iter::repeat(true).take(response.len()));
        TrainingExample {
            instruction_tokens: instruction,
            response_tokens: response,
            loss_mask,
            image: None,
            meta: ExampleMeta { sample_id: String::new(), recipe, source_provenance: prov },
        }
    }

    pub fn with_image(mut self, image: ImageRef) -> Self {
        self.image = Some(image);
        self
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.meta.sample_id = id.into();
        self
    }

    pub fn with_provenance(mut self, p: SourceProvenance) -> Self {
        self.meta.source_provenance = Some(p);
        self
    }

    pub fn masked_count(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.loss_mask.len() != self.instruction_tokens.len() + self.response_tokens.len() {
            return Err(Error::Validation(format!(
                "example {:?}: mask length {} != {} + {}",
                self.meta.sample_id,
                self.loss_mask.len(),
                self.instruction_tokens.len(),
                self.response_tokens.len()
            )));
        }
        if self.instruction_tokens.is_empty() {
            return Err(Error::Validation(format!("example {:?}: empty instruction", self.meta.sample_id)));
        }
        Ok(())
    }

    /// Response text with the first separator on a line of its own.
    pub fn response_text(&self, tokenizer: &Tokenizer) -> String {
        match self.response_tokens.iter().position(|&t| tokenizer.is_separator(t)) {
            Some(i) => format!(
                "{}\n{}\n{}",
                tokenizer.decode(&self.response_tokens[..i]),
                tokenizer.decode(&self.response_tokens[i..=i]),
                tokenizer.decode(&self.response_tokens[i + 1..])
            ),
            None => tokenizer.decode(&self.response_tokens),
        }
    }
}

const ESCAPED_NAMES: [&str; 4] = ["bos", "eos", "Translation", "Answer"];

// `<` + backslashes + name + `>` for one of the special-token names.
fn special_at(s: &str, i: usize) -> Option<(usize, usize)> {
    let rest = &s[i + 1..];
    let slashes = rest.bytes().take_while(|&b| b == b'\\').count();
    let after = &rest[slashes..];
    ESCAPED_NAMES.iter().find_map(|name| {
        after
            .strip_prefix(name)
            .filter(|r| r.starts_with('>'))
            .map(|_| (slashes, 1 + slashes + name.len() + 1))
    })
}

fn rewrite(s: &str, escape: bool) -> String {
    let mut out = String::with_capacity(s.len());
    let mut i = 0;
    while i < s.len() {
        if s.as_bytes()[i] == b'<' {
            if let Some((slashes, len)) = special_at(s, i) {
                let name = &s[i + 1 + slashes..i + len - 1];
                let n = if escape {
                    slashes + 1
                } else {
                    slashes.saturating_sub(1)
                };
                out.push('<');
                out.extend(std::iter::repeat('\\').take(n));
                out.push_str(name);
                out.push('>');
                i += len;
                continue;
            }
        }
        let c = s[i..].chars().next().expect("in bounds");
        out.push(c);
        i += c.len_utf8();
    }
    out
}

/// Adds one backslash after `<` in every special-token literal (escaped or
/// not), so the result never contains a raw special token.
pub fn escape_specials(s: &str) -> String {
    rewrite(s, true)
}

/// Inverse of [`escape_specials`].
pub fn unescape_specials(s: &str) -> String {
    rewrite(s, false)
}

/// `escape(x') + "\n" + separator + "\n" + y`.
pub fn render_ssr_response(x_prime: &str, y: &str, separator: &str) -> String {
    format!("{}\n{}\n{}", escape_specials(x_prime), separator, y)
}

/// Splits at the first raw separator, dropping one whitespace character
/// (newline or space) on each side of it. Returns `None` when the separator
/// is absent.
pub fn parse_ssr_response(text: &str, separator: &str) -> Option<(String, String)> {
    let at = text.find(separator)?;
    let before = &text[..at];
    let after = &text[at + separator.len()..];
    let before = before
        .strip_suffix('\n')
        .or_else(|| before.strip_suffix(' '))
        .unwrap_or(before);
    let after = after
        .strip_prefix('\n')
        .or_else(|| after.strip_prefix(' '))
        .unwrap_or(after);
    Some((unescape_specials(before), after.to_string()))
}

fn encode_instruction(tokenizer: &Tokenizer, text: &str) -> Vec<TokenId> {
    tokenizer.encode(text)
}

fn separator_id(tokenizer: &Tokenizer, literal: &str) -> Result<TokenId> {
    tokenizer
        .special(literal)
        .filter(|&id| tokenizer.is_separator(id))
        .ok_or_else(|| Error::Config(format!("separator {literal:?} is not registered with the tokenizer")))
}

fn source_then_target(tokenizer: &Tokenizer, demo: &str, sep: TokenId, y: &str) -> Vec<TokenId> {
    let mut r = tokenizer.encode(&escape_specials(demo));
    r.push(sep);
    r.extend(tokenizer.encode(y));
    r
}

/// Self-review example: instruction `clause + translation suffix`, response
/// `tok(x') ++ [separator] ++ tok(y)`, loss on every response token.
pub fn build_ssr_example(
    x_prime: &str,
    y: &str,
    tmpl: &PromptTemplate,
    tokenizer: &Tokenizer,
) -> Result<TrainingExample> {
    tmpl.validate()?;
    if y.is_empty() {
        return Err(Error::Input("target text must not be empty".into()));
    }
    let sep = separator_id(tokenizer, &tmpl.demo_separator_token)?;
    let instruction = encode_instruction(tokenizer, &tmpl.combined_instruction());
    let response = source_then_target(tokenizer, x_prime, sep, y);
    Ok(TrainingExample::new(instruction, response, Recipe::Ssr, Some(SourceProvenance::SelfGenerated)))
}

/// Direct image-to-translation example.
pub fn build_sft_dimt_example(y: &str, tokenizer: &Tokenizer) -> Result<TrainingExample> {
    if y.is_empty() {
        return Err(Error::Input("target text must not be empty".into()));
    }
    Ok(TrainingExample::new(
        encode_instruction(tokenizer, SFT_DIMT_INSTRUCTION),
        tokenizer.encode(y),
        Recipe::SftDimt,
        None,
    ))
}

/// Text-only translation example: the source text follows the cascade
/// translation instruction and no image is attached.
pub fn build_sft_mt_example(x: &str, y: &str, tokenizer: &Tokenizer) -> Result<TrainingExample> {
    if y.is_empty() {
        return Err(Error::Input("target text must not be empty".into()));
    }
    let prompt = format!("{}\n{}", escape_specials(x), CASCADE_TRANSLATE_INSTRUCTION);
    Ok(TrainingExample::new(
        encode_instruction(tokenizer, &prompt),
        tokenizer.encode(y),
        Recipe::SftMt,
        Some(SourceProvenance::GroundTruth),
    ))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemoPayload {
    /// The model's own caption (or OCR text, for VQA).
    pub demo_text: String,
    /// Translation target for captions, answer for VQA.
    pub target: String,
    pub question: Option<String>,
}

/// Caption or VQA demonstration example. OCR demonstrations go through
/// [`build_ssr_example`].
pub fn build_demo_variant(
    tmpl: &PromptTemplate,
    payload: &DemoPayload,
    tokenizer: &Tokenizer,
) -> Result<TrainingExample> {
    tmpl.validate()?;
    let sep = separator_id(tokenizer, &tmpl.demo_separator_token)?;
    let instruction = match tmpl.task {
        DemoTask::Ocr => {
            return Err(Error::Config(
                "OCR demonstrations are built with build_ssr_example".into(),
            ))
        }
        DemoTask::Caption => {
            if payload.target.is_empty() {
                return Err(Error::Input("caption target must not be empty".into()));
            }
            tmpl.combined_instruction()
        }
        DemoTask::Vqa => {
            let q = payload.question.as_deref().filter(|q| !q.is_empty());
            let q = q.ok_or_else(|| Error::Input("VQA demonstration needs a question".into()))?;
            if payload.target.is_empty() {
                return Err(Error::Input("VQA demonstration needs an answer".into()));
            }
            format!("{}\n{}", tmpl.combined_instruction(), q)
        }
    };
    let response = source_then_target(tokenizer, &payload.demo_text, sep, &payload.target);
    Ok(TrainingExample::new(
        encode_instruction(tokenizer, &instruction),
        response,
        Recipe::Ssr,
        Some(SourceProvenance::SelfGenerated),
    ))
}

/// Plain supervised example with an arbitrary instruction (used for
/// pretraining the toy model on its native tasks).
pub fn build_plain_example(instruction: &str, response: &str, tokenizer: &Tokenizer) -> Result<TrainingExample> {
    if instruction.is_empty() {
        return Err(Error::Input("instruction must not be empty".into()));
    }
    Ok(TrainingExample::new(
        encode_instruction(tokenizer, instruction),
        tokenizer.encode(response),
        Recipe::SftDimt,
        None,
    ))
}

/// Plain example whose response has two parts joined by `separator`.
pub fn build_two_part_example(
    instruction: &str,
    first: &str,
    separator: &str,
    second: &str,
    tokenizer: &Tokenizer,
) -> Result<TrainingExample> {
    if instruction.is_empty() {
        return Err(Error::Input("instruction must not be empty".into()));
    }
    let sep = separator_id(tokenizer, separator)?;
    Ok(TrainingExample::new(
        encode_instruction(tokenizer, instruction),
        source_then_target(tokenizer, first, sep, second),
        Recipe::SftDimt,
        None,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CotMode {
    Direct,
    Cascade,
}

/// Single-turn prompt asking for the transcript and then the translation.
pub fn cot_direct_prompt(tmpl: &PromptTemplate) -> String {
    format!("{}{}", tmpl.clause(), template::TRANSLATE_SUFFIX)
}

/// First cascade round: the model's native OCR instruction, verbatim.
pub fn cascade_round1_prompt(tmpl: &PromptTemplate) -> String {
    tmpl.instruction_text.clone()
}

/// Second cascade round: the first round's exchange followed by the
/// translation request.
pub fn cascade_round2_prompt(tmpl: &PromptTemplate, prior_ocr: Option<&str>) -> Result<String> {
    let prior = prior_ocr.ok_or_else(|| Error::Input("cascade round 2 needs the round-1 OCR output".into()))?;
    Ok(format!(
        "{}\n{}\n{}",
        cascade_round1_prompt(tmpl),
        escape_specials(prior),
        CASCADE_TRANSLATE_INSTRUCTION
    ))
}

/// Direct mode yields one prompt; cascade yields both rounds and therefore
/// needs the round-1 output.
pub fn build_cot_prompts(mode: CotMode, tmpl: &PromptTemplate, prior_ocr: Option<&str>) -> Result<Vec<String>> {
    match mode {
        CotMode::Direct => Ok(vec![cot_direct_prompt(tmpl)]),
        CotMode::Cascade => Ok(vec![cascade_round1_prompt(tmpl), cascade_round2_prompt(tmpl, prior_ocr)?]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelkit::tokenizer::{ANSWER, BOS, EOS, TRANSLATION};
    use crate::pipeline::template::{PromptTemplate, QWEN_OCR_INSTRUCTION};

    const SPECIAL_LITERALS: [&str; 4] = [BOS, EOS, TRANSLATION, ANSWER];
    use proptest::prelude::*;

    fn tok() -> Tokenizer {
        Tokenizer::toy()
    }

    #[test]
    fn ssr_layout() {
        let t = tok();
        let ex = build_ssr_example("A", "甲", &PromptTemplate::qwen(), &t).unwrap();
        let mut want = t.encode("A");
        want.push(t.special(TRANSLATION).unwrap());
        want.extend(t.encode("甲"));
        assert_eq!(ex.response_tokens, want);
        assert_eq!(
            t.decode(&ex.instruction_tokens),
            "Convert the content in the image to Markdown, then translate into Chinese."
        );
        assert_eq!(ex.response_text(&t), "A\n<Translation>\n甲");
    }

    #[test]
    fn empty_self_review_is_allowed() {
        let t = tok();
        let ex = build_ssr_example("", "甲", &PromptTemplate::qwen(), &t).unwrap();
        assert_eq!(ex.response_tokens[0], t.special(TRANSLATION).unwrap());
        assert_eq!(ex.response_tokens.len(), 2);
    }

    #[test]
    fn unregistered_separator() {
        let mut tmpl = PromptTemplate::qwen();
        tmpl.demo_separator_token = "<Sep>".into();
        assert!(matches!(build_ssr_example("a", "b", &tmpl, &tok()), Err(Error::Config(_))));
        tmpl.demo_separator_token = EOS.into();
        assert!(matches!(build_ssr_example("a", "b", &tmpl, &tok()), Err(Error::Config(_))));
    }

    #[test]
    fn sft_dimt() {
        let t = tok();
        let a = build_sft_dimt_example("你好", &t).unwrap();
        assert_eq!(a, build_sft_dimt_example("你好", &t).unwrap());
        assert_eq!(a.response_tokens, t.encode("你好"));
        let p = a.instruction_tokens.len();
        assert!(a.loss_mask[..p].iter().all(|m| !m));
        assert!(a.loss_mask[p..].iter().all(|&m| m));
        assert!(matches!(build_sft_dimt_example("", &t), Err(Error::Input(_))));
    }

    #[test]
    fn vqa_variant() {
        let t = tok();
        let tmpl = PromptTemplate::vqa(QWEN_OCR_INSTRUCTION);
        let p = DemoPayload {
            demo_text: "abc".into(),
            target: "2024".into(),
            question: Some("日期是什么？".into()),
        };
        let ex = build_demo_variant(&tmpl, &p, &t).unwrap();
        assert!(t.decode(&ex.instruction_tokens).ends_with("日期是什么？"));
        let mut want = t.encode("abc");
        want.push(t.special(ANSWER).unwrap());
        want.extend(t.encode("2024"));
        assert_eq!(ex.response_tokens, want);

        let no_q = DemoPayload { question: None, ..p.clone() };
        assert!(matches!(build_demo_variant(&tmpl, &no_q, &t), Err(Error::Input(_))));
        let no_a = DemoPayload { target: String::new(), ..p };
        assert!(matches!(build_demo_variant(&tmpl, &no_a, &t), Err(Error::Input(_))));
    }

    #[test]
    fn caption_variant_and_ocr_rejection() {
        let t = tok();
        let cap = PromptTemplate::caption(template::CAPTION_INSTRUCTION);
        let p = DemoPayload { demo_text: String::new(), target: "甲".into(), question: None };
        let ex = build_demo_variant(&cap, &p, &t).unwrap();
        assert_eq!(ex.response_tokens[0], t.special(TRANSLATION).unwrap());
        assert_eq!(t.decode(&ex.instruction_tokens), "Describe this image, then translate into Chinese.");
        assert!(matches!(build_demo_variant(&PromptTemplate::qwen(), &p, &t), Err(Error::Config(_))));
    }

    #[test]
    fn cot_prompts() {
        let tmpl = PromptTemplate::qwen();
        let d = build_cot_prompts(CotMode::Direct, &tmpl, None).unwrap();
        assert_eq!(d, ["Convert the content in the image to Markdown, then translate into Chinese."]);
        let c = build_cot_prompts(CotMode::Cascade, &tmpl, Some("abc")).unwrap();
        assert_eq!(c[0], QWEN_OCR_INSTRUCTION);
        assert!(c[1].contains("abc") && c[1].ends_with("Translate these text into Chinese."));
        assert!(matches!(build_cot_prompts(CotMode::Cascade, &tmpl, None), Err(Error::Input(_))));
    }

    #[test]
    fn escaping() {
        assert_eq!(escape_specials("a<Translation>b"), "a<\\Translation>b");
        assert_eq!(escape_specials("<\\Answer>"), "<\\\\Answer>");
        assert_eq!(escape_specials("<Other>"), "<Other>");
        assert_eq!(unescape_specials("<\\eos>"), "<eos>");
        let (x, y) = parse_ssr_response(&render_ssr_response("p<Translation>q", "r<Translation>s", TRANSLATION), TRANSLATION).unwrap();
        assert_eq!((x.as_str(), y.as_str()), ("p<Translation>q", "r<Translation>s"));
    }

    proptest! {
        #[test]
        fn mask_marks_exactly_the_response(x in "[a-p甲乙<> \\n]{0,12}", y in "[a-p甲乙丙]{1,12}") {
            let t = tok();
            let ex = build_ssr_example(&x, &y, &PromptTemplate::qwen(), &t).unwrap();
            let p = ex.instruction_tokens.len();
            prop_assert_eq!(ex.loss_mask.len(), p + ex.response_tokens.len());
            for (i, &m) in ex.loss_mask.iter().enumerate() {
                prop_assert_eq!(m, i >= p);
            }
        }

        #[test]
        fn render_parse_round_trip(x in "\\PC*", y in "\\PC*") {
            let r = render_ssr_response(&x, &y, TRANSLATION);
            let (px, py) = parse_ssr_response(&r, TRANSLATION).unwrap();
            prop_assert_eq!(px, x);
            prop_assert_eq!(py, y);
        }

        #[test]
        fn escape_round_trip(s in "(<\\\\{0,2}(Translation|eos|x)>|[a<>\\\\])*") {
            let e = escape_specials(&s);
            for lit in SPECIAL_LITERALS {
                prop_assert!(!e.contains(lit));
            }
            prop_assert_eq!(unescape_specials(&e), s);
        }
    }
}
