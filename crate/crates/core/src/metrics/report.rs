//! Per-sample and corpus scores, and the batch scorer over files.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bleu::{bleu, bleu_pt, Lang};
use super::edit::{anls, char_accuracy, word_accuracy, ANLS_TAU};
use super::ted::steds;
use crate::error::{Error, Result};
use crate::fsutil::read_to_string;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub model_fingerprint: String,
    pub dataset: String,
    pub recipe: String,
}

/// Scores of one sample. BLEU values are in [0, 100], everything else in
/// [0, 1]. Scores a task does not produce are omitted.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleScores {
    pub id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bleu: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bleu_pt: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steds: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ca: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wa: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub anls: Option<f64>,
}

/// Corpus BLEU/BLEU-PT; means for the other scores.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusScores {
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bleu: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bleu_pt: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steds: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ca: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wa: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub anls: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreTask {
    /// Translation: BLEU, BLEU-PT, STEDS, CA, WA.
    Dimt,
    /// Transcription: CA, WA.
    Ocr,
    /// Question answering: ANLS.
    Vqa,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metadata: ReportMeta,
    pub per_sample: Vec<SampleScores>,
    pub corpus: CorpusScores,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn mean(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn nonempty(s: &str) -> bool {
    !s.trim().is_empty()
}

/// One scored item: hypothesis plus reference (or answer set for VQA).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreItem {
    #[serde(default)]
    pub id: String,
    pub hyp: String,
    #[serde(default, rename = "ref")]
    pub reference: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub answers: Vec<String>,
}

pub fn score(task: ScoreTask, items: &[ScoreItem], lang: Lang, metadata: ReportMeta) -> Result<MetricReport> {
    if items.is_empty() {
        return Err(Error::Input("nothing to score".into()));
    }
    let per_sample = items
        .par_iter()
        .map(|it| {
            let mut s = SampleScores { id: it.id.clone(), ..SampleScores::default() };
            match task {
                ScoreTask::Dimt => {
                    s.bleu = Some(bleu(&[&it.hyp], &[&it.reference], lang)?);
                    s.bleu_pt = Some(bleu_pt(&[&it.hyp], &[&it.reference], lang)?);
                    s.steds = Some(steds(&it.hyp, &it.reference));
                    s.ca = Some(char_accuracy(&it.hyp, &it.reference)?);
                    s.wa = nonempty(&it.reference).then(|| word_accuracy(&it.hyp, &it.reference)).transpose()?;
                }
                ScoreTask::Ocr => {
                    s.ca = Some(char_accuracy(&it.hyp, &it.reference)?);
                    s.wa = nonempty(&it.reference).then(|| word_accuracy(&it.hyp, &it.reference)).transpose()?;
                }
                ScoreTask::Vqa => {
                    s.anls = Some(anls(&it.hyp, &it.answers, ANLS_TAU)?);
                }
            }
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut corpus = CorpusScores {
        n: items.len(),
        steds: mean(per_sample.iter().map(|s| s.steds)),
        ca: mean(per_sample.iter().map(|s| s.ca)),
        wa: mean(per_sample.iter().map(|s| s.wa)),
        anls: mean(per_sample.iter().map(|s| s.anls)),
        ..CorpusScores::default()
    };
    if task == ScoreTask::Dimt {
        let hyps: Vec<&str> = items.iter().map(|i| i.hyp.as_str()).collect();
        let refs: Vec<&str> = items.iter().map(|i| i.reference.as_str()).collect();
        corpus.bleu = Some(bleu(&hyps, &refs, lang)?);
        corpus.bleu_pt = Some(bleu_pt(&hyps, &refs, lang)?);
    }
    Ok(MetricReport { metadata, per_sample, corpus })
}

/// A line is a JSON string, a JSON object with `text` (and optional `id`),
/// or otherwise taken verbatim.
fn parse_line(line: &str, index: usize) -> (String, String) {
    #[derive(Deserialize)]
    struct Rec {
        #[serde(default)]
        id: Option<String>,
        text: String,
    }
    let default_id = index.to_string();
    if let Ok(s) = serde_json::from_str::<String>(line) {
        return (default_id, s);
    }
    if let Ok(r) = serde_json::from_str::<Rec>(line) {
        return (r.id.unwrap_or(default_id), r.text);
    }
    (default_id, line.to_string())
}

fn read_lines(path: &Path) -> Result<Vec<(String, String)>> {
    Ok(read_to_string(path)?
        .lines()
        .enumerate()
        .map(|(i, l)| parse_line(l, i))
        .collect())
}

/// Scores paired line-delimited hypothesis and reference files.
pub fn score_files(task: ScoreTask, hyp_path: &Path, ref_path: &Path, lang: Lang, metadata: ReportMeta) -> Result<MetricReport> {
    let hyps = read_lines(hyp_path)?;
    let refs = read_lines(ref_path)?;
    if hyps.len() != refs.len() {
        return Err(Error::Input(format!(
            "{} has {} lines but {} has {}",
            hyp_path.display(),
            hyps.len(),
            ref_path.display(),
            refs.len()
        )));
    }
    let items: Vec<ScoreItem> = hyps
        .into_iter()
        .zip(refs)
        .map(|((id, hyp), (_, r))| ScoreItem { id, hyp, answers: vec![r.clone()], reference: r })
        .collect();
    score(task, &items, lang, metadata)
}

/// Request file for the batch scorer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub task: ScoreTask,
    #[serde(default = "default_lang")]
    pub lang: String,
    #[serde(default)]
    pub metadata: ReportMeta,
    pub items: Vec<ScoreItem>,
}

fn default_lang() -> String {
    "zh".into()
}

pub fn score_request(path: &Path) -> Result<MetricReport> {
    let req: ScoreRequest = serde_json::from_str(&read_to_string(path)?)?;
    score(req.task, &req.items, Lang::from_tag(&req.lang), req.metadata)
}
