//! Instruction templates: the native OCR instruction of each model family and
//! the clauses used to build self-review, baseline and demonstration prompts.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modelkit::tokenizer::{ANSWER, TRANSLATION};

pub const QWEN_OCR_INSTRUCTION: &str = "Convert the content in the image to Markdown.";
pub const VARY_OCR_INSTRUCTION: &str = "Convert the document to markdown format.";
pub const TEXTMONKEY_OCR_INSTRUCTION: &str = "Read all the text in the image.";
pub const CAPTION_INSTRUCTION: &str = "Describe this image.";

pub const TRANSLATE_SUFFIX: &str = ", then translate into Chinese.";
pub const ANSWER_SUFFIX: &str = ", then answer the following question:";
pub const SFT_DIMT_INSTRUCTION: &str =
    "Translate all the text in the image into Chinese and output in Markdown format.";
pub const CASCADE_TRANSLATE_INSTRUCTION: &str = "Translate these text into Chinese.";

/// Question asked by the glyph-world VQA task.
pub const GLYPH_QUESTION: &str = "What is the first symbol?";
/// Further glyph-world instruction modifiers, used only in pretraining.
pub const COUNT_SUFFIX: &str = ", then count the symbols.";
pub const LAST_SYMBOL_SUFFIX: &str = ", then name the last symbol.";

/// Every instruction text the toy model knows.
pub const INSTRUCTION_TEXTS: &[&str] = &[
    QWEN_OCR_INSTRUCTION,
    VARY_OCR_INSTRUCTION,
    TEXTMONKEY_OCR_INSTRUCTION,
    CAPTION_INSTRUCTION,
    TRANSLATE_SUFFIX,
    ANSWER_SUFFIX,
    SFT_DIMT_INSTRUCTION,
    CASCADE_TRANSLATE_INSTRUCTION,
    GLYPH_QUESTION,
    COUNT_SUFFIX,
    LAST_SYMBOL_SUFFIX,
];

/// Word pieces of [`INSTRUCTION_TEXTS`]: every word with a leading space,
/// plus the bare form of sentence-initial words. Punctuation is left to
/// byte fallback.
pub fn instruction_words() -> Vec<String> {
    let mut out = std::collections::BTreeSet::new();
    for text in INSTRUCTION_TEXTS {
        for (i, word) in text.split_whitespace().enumerate() {
            let w = word.trim_matches(|c: char| !c.is_alphanumeric());
            if w.is_empty() {
                continue;
            }
            if i == 0 && w.starts_with(char::is_uppercase) {
                out.insert(w.to_string());
            }
            out.insert(format!(" {w}"));
        }
    }
    out.into_iter().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemoTask {
    Ocr,
    Caption,
    Vqa,
}

/// A self-review prompt template.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub task: DemoTask,
    /// The model's native instruction for the demonstration task, verbatim.
    pub instruction_text: String,
    pub translation_suffix: String,
    pub demo_separator_token: String,
}

impl PromptTemplate {
    pub fn ocr(native_instruction: impl Into<String>) -> Self {
        PromptTemplate {
            task: DemoTask::Ocr,
            instruction_text: native_instruction.into(),
            translation_suffix: TRANSLATE_SUFFIX.into(),
            demo_separator_token: TRANSLATION.into(),
        }
    }

    pub fn caption(native_instruction: impl Into<String>) -> Self {
        PromptTemplate {
            task: DemoTask::Caption,
            instruction_text: native_instruction.into(),
            translation_suffix: TRANSLATE_SUFFIX.into(),
            demo_separator_token: TRANSLATION.into(),
        }
    }

    pub fn vqa(native_instruction: impl Into<String>) -> Self {
        PromptTemplate {
            task: DemoTask::Vqa,
            instruction_text: native_instruction.into(),
            translation_suffix: ANSWER_SUFFIX.into(),
            demo_separator_token: ANSWER.into(),
        }
    }

    /// The Qwen2-VL OCR template, also used by the bundled toy model.
    pub fn qwen() -> Self {
        Self::ocr(QWEN_OCR_INSTRUCTION)
    }

    /// Native instruction with its sentence-final period removed, ready for a
    /// clause to be appended.
    pub fn clause(&self) -> &str {
        let t = self.instruction_text.trim_end();
        t.strip_suffix('.').unwrap_or(t)
    }

    /// Instruction of a self-review example: native clause followed by the
    /// translation (or question) suffix.
    pub fn combined_instruction(&self) -> String {
        format!("{}{}", self.clause(), self.translation_suffix)
    }

    pub fn validate(&self) -> Result<()> {
        if self.instruction_text.trim().is_empty() {
            return Err(Error::Config("template instruction_text is empty".into()));
        }
        Ok(())
    }
}

/// Per-family native instructions, loadable from a JSON file shaped like
/// `{"qwen2-vl": {"ocr": "...", "caption": "..."}}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateRegistry {
    families: BTreeMap<String, FamilyInstructions>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FamilyInstructions {
    pub ocr: String,
    #[serde(default = "default_caption")]
    pub caption: String,
}

fn default_caption() -> String {
    CAPTION_INSTRUCTION.into()
}

impl Default for TemplateRegistry {
    fn default() -> Self {
        let mut families = BTreeMap::new();
        for (name, ocr) in [
            ("qwen2-vl", QWEN_OCR_INSTRUCTION),
            ("toy", QWEN_OCR_INSTRUCTION),
            ("vary", VARY_OCR_INSTRUCTION),
            ("textmonkey", TEXTMONKEY_OCR_INSTRUCTION),
        ] {
            families.insert(
                name.to_string(),
                FamilyInstructions {
                    ocr: ocr.into(),
                    caption: default_caption(),
                },
            );
        }
        TemplateRegistry { families }
    }
}

impl TemplateRegistry {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn template(&self, family: &str, task: DemoTask) -> Result<PromptTemplate> {
        let f = self
            .families
            .get(family)
            .ok_or_else(|| Error::Config(format!("unknown model family {family:?}")))?;
        Ok(match task {
            DemoTask::Ocr => PromptTemplate::ocr(&f.ocr),
            DemoTask::Caption => PromptTemplate::caption(&f.caption),
            DemoTask::Vqa => PromptTemplate::vqa(&f.ocr),
        })
    }

    pub fn families(&self) -> impl Iterator<Item = &str> {
        self.families.keys().map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ssr_instruction_layout() {
        let t = PromptTemplate::qwen();
        assert_eq!(
            t.combined_instruction(),
            "Convert the content in the image to Markdown, then translate into Chinese."
        );
        let v = PromptTemplate::vqa(QWEN_OCR_INSTRUCTION);
        assert_eq!(
            v.combined_instruction(),
            "Convert the content in the image to Markdown, then answer the following question:"
        );
    }

    #[test]
    fn registry_lookup_and_file() {
        let r = TemplateRegistry::default();
        assert_eq!(r.template("vary", DemoTask::Ocr).unwrap().instruction_text, VARY_OCR_INSTRUCTION);
        assert!(r.template("nope", DemoTask::Ocr).is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.json");
        fs::write(&p, r#"{"families":{"mine":{"ocr":"Read it."}}}"#).unwrap();
        let loaded = TemplateRegistry::load(&p).unwrap();
        let t = loaded.template("mine", DemoTask::Caption).unwrap();
        assert_eq!(t.instruction_text, CAPTION_INSTRUCTION);
    }
}
