//! Command-line front end. Every subcommand reads an optional JSON config
//! (`--config`) and applies its flags on top.
//!
//! Exit codes: 0 success, 1 I/O or runtime failure, 2 validation or
//! configuration error, 3 experiment-gate failure.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::augment::{merge, synthesize, CipherTranslator, HttpTranslator, HttpTranslatorConfig, SynthOptions, TranslatorClient};
use crate::corpus::{load_manifest, manifest_to_string, Dataset, ImageRef, Sample};
use crate::error::{Error, Result};
use crate::fsutil::{read_to_string, write_atomic};
use crate::harness::{
    forgetting_experiment_with, run_experiment, run_protocol, sweep, EvalItem, EvalRecipe, ExperimentConfig,
    ExperimentOptions, ProtocolConfig, SweepOptions,
};
use crate::metrics::{score_files, score_request, Lang, ReportMeta, ScoreTask};
use crate::modelkit::checkpoint::{load_adapter, load_model};
use crate::modelkit::{AdapterConfig, DecodeConfig, ModelInterface, ReferenceOcr, Tokenizer, ToyModel};
use crate::pipeline::example::{build_sft_dimt_example, build_sft_mt_example, build_ssr_example, Recipe, SourceProvenance, TrainingExample};
use crate::pipeline::selfreview::{generate_selfreview, select_source, SelfReviewRecord, SourceIndex};
use crate::pipeline::template::{DemoTask, PromptTemplate, TemplateRegistry};
use crate::training::{train, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "ssr", version, about = "Self-reviewing fine-tuning toolkit for document-image translation")]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Transcribe every image of a manifest with the model's own OCR prompt.
    Selfreview(SelfReviewArgs),
    /// Turn a manifest into tokenized training examples for one recipe.
    Build(BuildArgs),
    /// Fine-tune a low-rank adapter on built examples.
    Train(TrainArgs),
    /// Score hypothesis files, or run a model over a manifest and score it.
    Eval(EvalArgs),
    /// Synthesize translation pairs for unlabeled images and merge them.
    Augment(AugmentArgs),
    /// Run one glyph-world experiment (or the two-arm forgetting comparison).
    Experiment(ExperimentArgs),
    /// Run a grid of experiments into digest-keyed run directories.
    Sweep(SweepArgs),
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Selfreview(a) => selfreview_cmd(a),
        Command::Build(a) => build_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Augment(a) => augment_cmd(a),
        Command::Experiment(a) => experiment_cmd(a),
        Command::Sweep(a) => return sweep_cmd(a),
    }
    .map(|()| 0)
}

// ----- shared helpers -----

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => serde_json::from_str(&read_to_string(p)?)
            .map_err(|e| Error::Config(format!("{}: {e}", p.display()))),
    }
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, flag: Option<T>) {
    if flag.is_some() {
        *slot = flag;
    }
}

fn required<'a, T>(v: &'a Option<T>, name: &str) -> Result<&'a T> {
    v.as_ref().ok_or_else(|| Error::Config(format!("`{name}` is required (flag or config)")))
}

/// Writes `text` to `out`, or to stdout without one.
fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_atomic(p, text.as_bytes()),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))?;
            if !text.ends_with('\n') {
                let _ = stdout.write_all(b"\n");
            }
            Ok(())
        }
    }
}

fn to_jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(it)?);
        out.push('\n');
    }
    Ok(out)
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    read_to_string(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::MalformedLine { line: i + 1, message: format!("{}: {e}", path.display()) })
        })
        .collect()
}

/// A model named on the command line: a toy checkpoint (with an optional
/// adapter) or `reference` for the exact reference transcriber.
enum LoadedModel {
    Toy(ToyModel),
    Reference(ReferenceOcr),
}

impl LoadedModel {
    fn load(spec: &str, adapter: Option<&Path>) -> Result<Self> {
        if spec == "reference" {
            if adapter.is_some() {
                return Err(Error::Config("the reference model takes no adapter".into()));
            }
            return Ok(LoadedModel::Reference(ReferenceOcr::default()));
        }
        let base = load_model(spec)?;
        Ok(LoadedModel::Toy(match adapter {
            Some(a) => load_adapter(&base, a)?,
            None => base,
        }))
    }

    fn as_dyn(&self) -> &dyn ModelInterface {
        match self {
            LoadedModel::Toy(m) => m,
            LoadedModel::Reference(m) => m,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemplateChoice {
    /// Model family whose native instructions are used.
    pub family: Option<String>,
    /// Optional registry file replacing the built-in families.
    pub templates: Option<PathBuf>,
}

impl TemplateChoice {
    fn template(&self, task: DemoTask) -> Result<PromptTemplate> {
        let registry = match &self.templates {
            Some(p) => TemplateRegistry::load(p)?,
            None => TemplateRegistry::default(),
        };
        registry.template(self.family.as_deref().unwrap_or("toy"), task)
    }
}

fn default_decode() -> DecodeConfig {
    DecodeConfig::greedy(24)
}

// ----- selfreview -----

#[derive(Debug, Args)]
pub struct SelfReviewArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Input manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Toy model checkpoint, or `reference`.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub adapter: Option<PathBuf>,
    #[arg(long)]
    pub family: Option<String>,
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    /// Output JSONL of records; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelfReviewConfig {
    pub manifest: Option<PathBuf>,
    pub model: Option<String>,
    pub adapter: Option<PathBuf>,
    pub template: TemplateChoice,
    pub decode: DecodeConfig,
    pub cache_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for SelfReviewConfig {
    fn default() -> Self {
        SelfReviewConfig {
            manifest: None,
            model: None,
            adapter: None,
            template: TemplateChoice::default(),
            decode: default_decode(),
            cache_dir: None,
            out: None,
        }
    }
}

fn selfreview_cmd(a: SelfReviewArgs) -> Result<()> {
    let mut c: SelfReviewConfig = load_config(a.config.as_deref())?;
    set_opt(&mut c.manifest, a.manifest);
    set_opt(&mut c.model, a.model);
    set_opt(&mut c.adapter, a.adapter);
    set_opt(&mut c.template.family, a.family);
    set_opt(&mut c.cache_dir, a.cache_dir);
    set(&mut c.decode.max_new_tokens, a.max_new_tokens);
    set_opt(&mut c.out, a.out);

    let data = load_manifest(required(&c.manifest, "manifest")?)?;
    let model = LoadedModel::load(required(&c.model, "model")?, c.adapter.as_deref())?;
    let tmpl = c.template.template(DemoTask::Ocr)?;
    let records = generate_selfreview(model.as_dyn(), &data, &tmpl, &c.decode, c.cache_dir.as_deref())?;
    let warned = records.iter().filter(|r| r.warning.is_some()).count();
    eprintln!("{} records ({warned} with warnings)", records.len());
    emit(c.out.as_deref(), &to_jsonl(&records)?)
}

// ----- build -----

#[derive(Debug, Args)]
pub struct BuildArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// ssr, sft_dimt or sft_mt.
    #[arg(long)]
    pub recipe: Option<String>,
    /// self_generated, ground_truth or external_ocr.
    #[arg(long)]
    pub provenance: Option<String>,
    /// Self-review records (JSONL) from `ssr selfreview`.
    #[arg(long)]
    pub selfreview: Option<PathBuf>,
    /// External OCR transcripts, JSONL of `{"id", "text"}`.
    #[arg(long)]
    pub external_ocr: Option<PathBuf>,
    #[arg(long)]
    pub family: Option<String>,
    /// Toy checkpoint whose tokenizer is used; the toy tokenizer otherwise.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuildConfig {
    pub manifest: Option<PathBuf>,
    pub recipe: Recipe,
    pub provenance: SourceProvenance,
    pub selfreview: Option<PathBuf>,
    pub external_ocr: Option<PathBuf>,
    pub template: TemplateChoice,
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            manifest: None,
            recipe: Recipe::Ssr,
            provenance: SourceProvenance::SelfGenerated,
            selfreview: None,
            external_ocr: None,
            template: TemplateChoice::default(),
            model: None,
            out: None,
        }
    }
}

fn parse_enum<T: DeserializeOwned>(s: &str, what: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| Error::Config(format!("unknown {what} {s:?}")))
}

#[derive(Deserialize)]
struct ExternalText {
    id: String,
    text: String,
}

/// Builds one example per sample of `data`.
pub fn build_examples(
    data: &Dataset,
    recipe: Recipe,
    provenance: SourceProvenance,
    index: &SourceIndex,
    tmpl: &PromptTemplate,
    tokenizer: &Tokenizer,
) -> Result<Vec<TrainingExample>> {
    data.samples
        .iter()
        .map(|s| {
            let ex = match recipe {
                Recipe::Ssr => {
                    let x = select_source(s, index, provenance)?;
                    build_ssr_example(&x, &s.target_text, tmpl, tokenizer)?
                        .with_image(s.image.clone())
                        .with_provenance(provenance)
                }
                Recipe::SftDimt => build_sft_dimt_example(&s.target_text, tokenizer)?.with_image(s.image.clone()),
                Recipe::SftMt => {
                    let x = select_source(s, index, provenance)?;
                    build_sft_mt_example(&x, &s.target_text, tokenizer)?.with_provenance(provenance)
                }
            };
            Ok(ex.with_id(&s.id))
        })
        .collect()
}

fn build_cmd(a: BuildArgs) -> Result<()> {
    let mut c: BuildConfig = load_config(a.config.as_deref())?;
    set_opt(&mut c.manifest, a.manifest);
    if let Some(r) = a.recipe {
        c.recipe = parse_enum(&r, "recipe")?;
    }
    if let Some(p) = a.provenance {
        c.provenance = parse_enum(&p, "provenance")?;
    }
    set_opt(&mut c.selfreview, a.selfreview);
    set_opt(&mut c.external_ocr, a.external_ocr);
    set_opt(&mut c.template.family, a.family);
    set_opt(&mut c.model, a.model);
    set_opt(&mut c.out, a.out);

    let data = load_manifest(required(&c.manifest, "manifest")?)?;
    let tokenizer = match &c.model {
        Some(p) => load_model(p)?.tokenizer().clone(),
        None => Tokenizer::toy(),
    };
    let records: Vec<SelfReviewRecord> = match &c.selfreview {
        Some(p) => read_jsonl(p)?,
        None => Vec::new(),
    };
    let external: Vec<ExternalText> = match &c.external_ocr {
        Some(p) => read_jsonl(p)?,
        None => Vec::new(),
    };
    let index = SourceIndex::from_records(records).with_external_ocr(external.into_iter().map(|e| (e.id, e.text)));
    let tmpl = c.template.template(DemoTask::Ocr)?;
    let examples = build_examples(&data, c.recipe, c.provenance, &index, &tmpl, &tokenizer)?;
    eprintln!("{} examples", examples.len());
    emit(c.out.as_deref(), &to_jsonl(&examples)?)
}

// ----- train -----

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seeds both the adapter initialization and the data order.
    #[arg(long)]
    pub seed: u64,
    /// Base toy model checkpoint.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Training examples (JSONL) from `ssr build`.
    #[arg(long)]
    pub examples: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub micro_batch_size: Option<usize>,
    #[arg(long)]
    pub peak_lr: Option<f64>,
    #[arg(long)]
    pub warmup_ratio: Option<f64>,
    #[arg(long)]
    pub clip_grad_norm: Option<f64>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainCmdConfig {
    pub model: Option<PathBuf>,
    pub examples: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub adapter: AdapterConfig,
    pub train: TrainConfig,
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut c: TrainCmdConfig = load_config(a.config.as_deref())?;
    set_opt(&mut c.model, a.model);
    set_opt(&mut c.examples, a.examples);
    set_opt(&mut c.out_dir, a.out_dir);
    set(&mut c.train.epochs, a.epochs);
    set(&mut c.train.batch_size, a.batch_size);
    set_opt(&mut c.train.micro_batch_size, a.micro_batch_size);
    set(&mut c.train.peak_lr, a.peak_lr);
    set(&mut c.train.warmup_ratio, a.warmup_ratio);
    set_opt(&mut c.train.clip_grad_norm, a.clip_grad_norm);
    set(&mut c.adapter.rank, a.rank);
    set(&mut c.adapter.alpha, a.alpha);
    c.train.seed = a.seed;
    c.adapter.init_seed = a.seed;
    c.train.validate()?;
    c.adapter.validate()?;

    let base = load_model(required(&c.model, "model")?)?;
    let data: Vec<TrainingExample> = read_jsonl(required(&c.examples, "examples")?)?;
    let out_dir = required(&c.out_dir, "out_dir")?;
    write_atomic(&out_dir.join("config.json"), serde_json::to_string_pretty(&c)?.as_bytes())?;
    let mut model = base.attach_adapter(&c.adapter)?;
    let out = train(&mut model, &data, &c.train, Some(out_dir))?;
    println!("epoch mean losses: {:?}", out.trace.epoch_means);
    if let Some(last) = out.checkpoints.last() {
        println!("adapter: {}", last.display());
    }
    Ok(())
}

// ----- eval -----

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// dimt, ocr or vqa (file scoring).
    #[arg(long)]
    pub task: Option<String>,
    /// Hypotheses, one per line (plain, JSON string or `{"id","text"}`).
    #[arg(long)]
    pub hyp: Option<PathBuf>,
    /// References, aligned with `--hyp`.
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
    /// A scoring request file with inline items.
    #[arg(long)]
    pub request: Option<PathBuf>,
    /// Target-language tag used for BLEU tokenization.
    #[arg(long)]
    pub lang: Option<String>,
    /// Model run over `--manifest` (toy checkpoint or `reference`).
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub adapter: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// ssr, sft_dimt, sft_mt, cot_direct, cot_cascade or base.
    #[arg(long)]
    pub recipe: Option<String>,
    #[arg(long)]
    pub family: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub task: Option<ScoreTask>,
    pub hyp: Option<PathBuf>,
    #[serde(rename = "ref")]
    pub reference: Option<PathBuf>,
    pub request: Option<PathBuf>,
    pub lang: String,
    pub model: Option<String>,
    pub adapter: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub recipe: EvalRecipe,
    pub template: TemplateChoice,
    pub decode: DecodeConfig,
    pub out: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            task: None,
            hyp: None,
            reference: None,
            request: None,
            lang: "zh".into(),
            model: None,
            adapter: None,
            manifest: None,
            recipe: EvalRecipe::Ssr,
            template: TemplateChoice::default(),
            decode: default_decode(),
            out: None,
        }
    }
}

/// DIMT items for every sample, plus OCR items where a source text exists.
pub fn eval_items(data: &Dataset) -> Vec<EvalItem> {
    let mut items: Vec<EvalItem> = data.samples.iter().cloned().map(EvalItem::dimt).collect();
    items.extend(data.samples.iter().filter(|s| s.source_text.is_some()).cloned().map(EvalItem::ocr));
    items
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let mut c: EvalConfig = load_config(a.config.as_deref())?;
    if let Some(t) = a.task {
        c.task = Some(parse_enum(&t, "task")?);
    }
    set_opt(&mut c.hyp, a.hyp);
    set_opt(&mut c.reference, a.reference);
    set_opt(&mut c.request, a.request);
    set(&mut c.lang, a.lang);
    set_opt(&mut c.model, a.model);
    set_opt(&mut c.adapter, a.adapter);
    set_opt(&mut c.manifest, a.manifest);
    if let Some(r) = a.recipe {
        c.recipe = r.parse()?;
    }
    set_opt(&mut c.template.family, a.family);
    set_opt(&mut c.out, a.out);

    let json = if let Some(req) = &c.request {
        score_request(req)?.to_json()
    } else if c.hyp.is_some() || c.reference.is_some() {
        let task = *required(&c.task, "task")?;
        let meta = ReportMeta { dataset: c.reference.as_ref().map(|p| p.display().to_string()).unwrap_or_default(), ..ReportMeta::default() };
        score_files(task, required(&c.hyp, "hyp")?, required(&c.reference, "ref")?, Lang::from_tag(&c.lang), meta)?.to_json()
    } else if c.manifest.is_some() || c.model.is_some() {
        let data = load_manifest(required(&c.manifest, "manifest")?)?;
        let model = LoadedModel::load(required(&c.model, "model")?, c.adapter.as_deref())?;
        let tmpl = c.template.template(DemoTask::Ocr)?;
        let pcfg = ProtocolConfig {
            ocr_instruction: tmpl.instruction_text.clone(),
            template: tmpl,
            decode: c.decode.clone(),
            lang: c.lang.clone(),
            dataset: data.split_name.clone(),
        };
        serde_json::to_string_pretty(&run_protocol(c.recipe, model.as_dyn(), &eval_items(&data), &pcfg)?)?
    } else {
        return Err(Error::Config("eval needs --request, --hyp/--ref, or --manifest with --model".into()));
    };
    emit(c.out.as_deref(), &json)
}

// ----- augment -----

#[derive(Debug, Args)]
pub struct AugmentArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Labeled base manifest the synthetic pairs are merged into.
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// Unlabeled images, JSONL of `{"id", "image"}`.
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// OCR model (toy checkpoint or `reference`).
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub adapter: Option<PathBuf>,
    #[arg(long)]
    pub family: Option<String>,
    /// HTTP translator endpoint; the offline cipher stub is used otherwise.
    #[arg(long)]
    pub translator_endpoint: Option<String>,
    #[arg(long)]
    pub concurrency: Option<usize>,
    /// Drop synthetic pairs whose target already occurs.
    #[arg(long)]
    pub dedup: bool,
    /// Merged manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Skipped images with reasons (JSONL).
    #[arg(long)]
    pub skipped_out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub base: Option<PathBuf>,
    pub images: Option<PathBuf>,
    pub model: Option<String>,
    pub adapter: Option<PathBuf>,
    pub template: TemplateChoice,
    pub translator: Option<HttpTranslatorConfig>,
    pub synth: SynthOptions,
    pub decode: DecodeConfig,
    pub dedup: bool,
    pub out: Option<PathBuf>,
    pub skipped_out: Option<PathBuf>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            base: None,
            images: None,
            model: None,
            adapter: None,
            template: TemplateChoice::default(),
            translator: None,
            synth: SynthOptions::default(),
            decode: default_decode(),
            dedup: false,
            out: None,
            skipped_out: None,
        }
    }
}

#[derive(Deserialize)]
struct ImageRecord {
    id: String,
    image: ImageRef,
    #[serde(default)]
    domain: String,
}

fn augment_cmd(a: AugmentArgs) -> Result<()> {
    let mut c: AugmentConfig = load_config(a.config.as_deref())?;
    set_opt(&mut c.base, a.base);
    set_opt(&mut c.images, a.images);
    set_opt(&mut c.model, a.model);
    set_opt(&mut c.adapter, a.adapter);
    set_opt(&mut c.template.family, a.family);
    if let Some(endpoint) = a.translator_endpoint {
        let mut t = c.translator.take().unwrap_or(HttpTranslatorConfig {
            endpoint: String::new(),
            credentials_env: None,
            timeout_ms: 10_000,
            max_retries: 2,
            backoff_ms: 200,
        });
        t.endpoint = endpoint;
        c.translator = Some(t);
    }
    set(&mut c.synth.concurrency, a.concurrency);
    c.dedup |= a.dedup;
    set_opt(&mut c.out, a.out);
    set_opt(&mut c.skipped_out, a.skipped_out);

    let base = load_manifest(required(&c.base, "base")?)?;
    let images_path = required(&c.images, "images")?;
    let images: Vec<ImageRecord> = read_jsonl(images_path)?;
    let images = Dataset::new(
        images
            .into_iter()
            .map(|r| Sample { domain: r.domain, ..Sample::new(r.id, r.image, "") })
            .collect(),
        images_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
    )?;
    let model = LoadedModel::load(required(&c.model, "model")?, c.adapter.as_deref())?;
    let translator: Box<dyn TranslatorClient> = match &c.translator {
        Some(t) => Box::new(HttpTranslator::new(t.clone())?),
        None => Box::new(CipherTranslator::default()),
    };
    let tmpl = c.template.template(DemoTask::Ocr)?;
    let outcome = synthesize(model.as_dyn(), &images, translator.as_ref(), &tmpl, &c.decode, &c.synth)?;
    let merged = merge(&base, &outcome.samples, c.dedup)?;
    eprintln!(
        "{} base + {} synthetic = {} samples; {} skipped",
        base.len(),
        outcome.samples.len(),
        merged.len(),
        outcome.skipped.len()
    );
    if let Some(p) = &c.skipped_out {
        write_atomic(p, to_jsonl(&outcome.skipped)?.as_bytes())?;
    }
    emit(c.out.as_deref(), &manifest_to_string(&merged.samples)?)
}

// ----- experiment -----

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub recipe: Option<String>,
    /// ocr, caption or vqa.
    #[arg(long)]
    pub demo_task: Option<String>,
    #[arg(long)]
    pub provenance: Option<String>,
    #[arg(long)]
    pub train_size: Option<usize>,
    /// Parent of the run directories.
    #[arg(long, default_value = "runs")]
    pub runs: PathBuf,
    /// Pretraining and self-review cache; `<runs>/cache` by default.
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    /// Run both arms of the forgetting comparison instead of one recipe.
    #[arg(long)]
    pub forgetting: bool,
}

fn experiment_overrides(
    cfg: &mut ExperimentConfig,
    recipe: Option<String>,
    demo_task: Option<String>,
    provenance: Option<String>,
    train_size: Option<usize>,
) -> Result<()> {
    if let Some(r) = recipe {
        cfg.recipe = r.parse()?;
    }
    if let Some(t) = demo_task {
        cfg.demo_task = parse_enum(&t, "demo task")?;
    }
    if let Some(p) = provenance {
        cfg.provenance = parse_enum(&p, "provenance")?;
    }
    set(&mut cfg.train_size, train_size);
    Ok(())
}

fn experiment_cmd(a: ExperimentArgs) -> Result<()> {
    let mut cfg: ExperimentConfig = load_config(a.config.as_deref())?;
    experiment_overrides(&mut cfg, a.recipe, a.demo_task, a.provenance, a.train_size)?;
    cfg.seeds = vec![a.seed];
    cfg.validate()?;
    let cache_dir = Some(a.cache_dir.unwrap_or_else(|| a.runs.join("cache")));
    if a.forgetting {
        let dir = a.runs.join(format!("forgetting-{}", cfg.digest()));
        let r = forgetting_experiment_with(&cfg, a.seed, &ExperimentOptions { run_dir: Some(dir.clone()), cache_dir })?;
        let (ocr_sft, ocr_ssr) = r.ocr_ca();
        let (mt_sft, mt_ssr) = r.translation_ca();
        write_atomic(&dir.join("forgetting.json"), serde_json::to_string_pretty(&r)?.as_bytes())?;
        println!("run dir: {}", dir.display());
        println!("pretrained OCR CA {:.4}", r.pretrain_ocr_ca);
        println!("sft_dimt: OCR CA {ocr_sft:.4}, translation CA {mt_sft:.4}");
        println!("ssr:      OCR CA {ocr_ssr:.4}, translation CA {mt_ssr:.4}");
        return Ok(());
    }
    let dir = crate::harness::sweep::run_dir(&a.runs, &cfg);
    let r = run_experiment(&cfg, a.seed, &ExperimentOptions { run_dir: Some(dir.clone()), cache_dir })?;
    println!("run dir: {}", dir.display());
    println!("{}", r.metrics_json());
    Ok(())
}

// ----- sweep -----

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated seeds replacing the config's.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    pub train_sizes: Option<Vec<usize>>,
    #[arg(long)]
    pub root: Option<PathBuf>,
    #[arg(long)]
    pub parallel: Option<usize>,
}

/// Axes of a sweep; an empty axis keeps the base value.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub recipes: Vec<EvalRecipe>,
    pub train_sizes: Vec<usize>,
    pub demo_tasks: Vec<DemoTask>,
    pub provenances: Vec<SourceProvenance>,
    pub lang_pairs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub base: ExperimentConfig,
    pub grid: SweepGrid,
    pub seeds: Vec<u64>,
    pub root: PathBuf,
    pub cache_dir: Option<PathBuf>,
    pub parallel: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            base: ExperimentConfig::default(),
            grid: SweepGrid::default(),
            seeds: vec![0, 1, 2],
            root: "runs".into(),
            cache_dir: None,
            parallel: 1,
        }
    }
}

fn axis<T: Clone>(values: &[T], base: T) -> Vec<T> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

/// Cartesian product of the grid over `base`. Demo-task and provenance axes
/// only apply to the self-review recipe; duplicate configurations are
/// dropped.
pub fn expand_grid(base: &ExperimentConfig, grid: &SweepGrid, seeds: &[u64]) -> Vec<ExperimentConfig> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for recipe in axis(&grid.recipes, base.recipe) {
        for &train_size in &axis(&grid.train_sizes, base.train_size) {
            for lang_pair in axis(&grid.lang_pairs, base.lang_pair.clone()) {
                for &demo_task in &axis(&grid.demo_tasks, base.demo_task) {
                    for &provenance in &axis(&grid.provenances, base.provenance) {
                        let (demo_task, provenance) = if recipe == EvalRecipe::Ssr {
                            (demo_task, provenance)
                        } else {
                            (DemoTask::Ocr, SourceProvenance::SelfGenerated)
                        };
                        let cfg = ExperimentConfig {
                            recipe,
                            train_size,
                            lang_pair: lang_pair.clone(),
                            demo_task,
                            provenance,
                            seeds: seeds.to_vec(),
                            ..base.clone()
                        };
                        if seen.insert(cfg.digest()) {
                            out.push(cfg);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Exits with the most severe failure code of the sweep's runs.
fn sweep_cmd(a: SweepArgs) -> Result<i32> {
    let mut c: SweepConfig = load_config(a.config.as_deref())?;
    set(&mut c.seeds, a.seeds);
    if let Some(sizes) = a.train_sizes {
        c.grid.train_sizes = sizes;
    }
    set(&mut c.root, a.root);
    set(&mut c.parallel, a.parallel);
    let configs = expand_grid(&c.base, &c.grid, &c.seeds);
    let opts = SweepOptions {
        cache_dir: Some(c.cache_dir.clone().unwrap_or_else(|| c.root.join("cache"))),
        root: c.root.clone(),
        parallel: c.parallel,
    };
    let summary = sweep(&configs, &opts)?;
    println!(
        "{} runs ok ({} resumed), {} failed; summary at {}",
        summary.reports.len(),
        summary.resumed.len(),
        summary.failures.len(),
        c.root.join("summary.json").display()
    );
    for f in &summary.failures {
        eprintln!("failed: {} seed {}: {}", f.digest, f.seed, f.error);
    }
    Ok(summary.failures.iter().map(|f| f.exit_code).max().unwrap_or(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_is_mandatory_for_train_and_experiment() {
        assert_eq!(run(["ssr", "train", "--model", "m"]), 2);
        assert_eq!(run(["ssr", "experiment"]), 2);
    }

    #[test]
    fn missing_inputs_are_validation_errors() {
        assert_eq!(run(["ssr", "build"]), 2);
        assert_eq!(run(["ssr", "eval"]), 2);
        assert_eq!(run(["ssr", "build", "--manifest", "x.jsonl", "--recipe", "nope"]), 2);
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"manifets": "x"}"#).unwrap();
        assert_eq!(run(["ssr", "build", "--config", p.to_str().unwrap()]), 2);
    }

    #[test]
    fn grid_expansion() {
        let base = ExperimentConfig::default();
        let grid = SweepGrid {
            recipes: vec![EvalRecipe::Ssr, EvalRecipe::SftDimt],
            provenances: vec![SourceProvenance::SelfGenerated, SourceProvenance::GroundTruth],
            train_sizes: vec![100, 200],
            ..SweepGrid::default()
        };
        let cfgs = expand_grid(&base, &grid, &[0, 1]);
        // ssr: 2 sizes x 2 provenances; sft_dimt: 2 sizes
        assert_eq!(cfgs.len(), 6);
        assert!(cfgs.iter().all(|c| c.validate().is_ok() && c.seeds == [0, 1]));
    }
}
