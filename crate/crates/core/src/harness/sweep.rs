//! Runs a list of experiment configurations into digest-keyed run
//! directories, skipping runs that already finished.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::{read_to_string, write_atomic};
use crate::training::append_jsonl;

use super::experiment::{run_experiment, ExperimentOptions};
use super::{EvalTask, ExperimentConfig, RunReport};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepOptions {
    /// Parent of the `<digest>/` run directories.
    pub root: PathBuf,
    pub cache_dir: Option<PathBuf>,
    /// Runs executed concurrently; 1 runs them in order.
    pub parallel: usize,
}

impl SweepOptions {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        let root = root.into();
        SweepOptions { cache_dir: Some(root.join("cache")), root, parallel: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepFailure {
    pub digest: String,
    pub seed: u64,
    pub error: String,
    pub exit_code: i32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    /// Reports of every successful run, in input order.
    pub reports: Vec<RunReport>,
    /// Digests whose report was already on disk.
    pub resumed: Vec<String>,
    pub failures: Vec<SweepFailure>,
    /// Soft checks that did not hold; logged, never fatal.
    pub trend_warnings: Vec<String>,
}

/// One run per (config, seed). A run's directory is keyed by the digest of
/// its config with `seeds` narrowed to that seed.
pub fn expand(configs: &[ExperimentConfig]) -> Vec<(ExperimentConfig, u64)> {
    configs
        .iter()
        .flat_map(|c| c.seeds.iter().map(move |&s| (ExperimentConfig { seeds: vec![s], ..c.clone() }, s)))
        .collect()
}

pub fn run_dir(root: &Path, cfg: &ExperimentConfig) -> PathBuf {
    root.join(cfg.digest())
}

fn load_finished(dir: &Path) -> Option<RunReport> {
    let text = read_to_string(&dir.join("report.json")).ok()?;
    serde_json::from_str(&text).ok()
}

#[derive(Serialize)]
struct LogLine<'a> {
    digest: &'a str,
    seed: u64,
    status: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

/// Runs every configuration and seed. Failures are collected rather than
/// propagated; the summary is also written to `root/summary.json`.
pub fn sweep(configs: &[ExperimentConfig], opts: &SweepOptions) -> Result<SweepSummary> {
    for c in configs {
        c.validate()?;
    }
    if opts.parallel == 0 {
        return Err(Error::Config("parallel must be at least 1".into()));
    }
    let runs = expand(configs);
    let log_path = opts.root.join("sweep_log.jsonl");
    let one = |(cfg, seed): &(ExperimentConfig, u64)| -> (String, std::result::Result<(RunReport, bool), Error>) {
        let digest = cfg.digest();
        let dir = run_dir(&opts.root, cfg);
        if let Some(r) = load_finished(&dir) {
            log::info!("{digest}: already complete, skipping");
            return (digest, Ok((r, true)));
        }
        let o = ExperimentOptions { run_dir: Some(dir), cache_dir: opts.cache_dir.clone() };
        let res = run_experiment(cfg, *seed, &o).map(|r| (r, false));
        let line = LogLine {
            digest: &digest,
            seed: *seed,
            status: if res.is_ok() { "ok" } else { "failed" },
            error: res.as_ref().err().map(ToString::to_string),
        };
        if let Err(e) = append_jsonl(&log_path, &line) {
            log::warn!("sweep log: {e}");
        }
        (digest, res)
    };
    std::fs::create_dir_all(&opts.root).map_err(|e| Error::io(&opts.root, e))?;
    let results: Vec<_> = if opts.parallel == 1 {
        runs.iter().map(one).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.parallel)
            .build()
            .map_err(|e| Error::Config(format!("sweep pool: {e}")))?;
        pool.install(|| runs.par_iter().map(one).collect())
    };

    let mut summary = SweepSummary::default();
    for ((_, seed), (digest, res)) in runs.iter().zip(results) {
        match res {
            Ok((r, resumed)) => {
                if resumed {
                    summary.resumed.push(digest);
                }
                summary.reports.push(r);
            }
            Err(e) => {
                log::error!("{digest} (seed {seed}) failed: {e}");
                summary.failures.push(SweepFailure { digest, seed: *seed, exit_code: e.exit_code(), error: e.to_string() });
            }
        }
    }
    summary.trend_warnings = size_trend_warnings(&summary.reports);
    for w in &summary.trend_warnings {
        log::warn!("{w}");
    }
    write_atomic(&opts.root.join("summary.json"), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    Ok(summary)
}

/// Within each group of runs that differ only in `train_size`, translation
/// BLEU should not fall as the size grows.
pub fn size_trend_warnings(reports: &[RunReport]) -> Vec<String> {
    let mut groups: BTreeMap<String, Vec<(usize, f64)>> = BTreeMap::new();
    for r in reports {
        let Some(bleu) = r.reports.get(&EvalTask::Dimt).and_then(|m| m.corpus.bleu) else { continue };
        let key = ExperimentConfig { train_size: 0, ..r.config.clone() }.digest();
        groups.entry(key).or_default().push((r.config.train_size, bleu));
    }
    let mut out = Vec::new();
    for (key, mut pts) in groups {
        pts.sort_by(|a, b| a.0.cmp(&b.0));
        for w in pts.windows(2) {
            if w[1].1 < w[0].1 {
                out.push(format!(
                    "group {key}: BLEU fell from {:.2} at {} samples to {:.2} at {}",
                    w[0].1, w[0].0, w[1].1, w[1].0
                ));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expansion_keys_runs_per_seed() {
        let c = ExperimentConfig { seeds: vec![1, 2], ..ExperimentConfig::default() };
        let runs = expand(&[c]);
        assert_eq!(runs.len(), 2);
        assert_ne!(runs[0].0.digest(), runs[1].0.digest());
        assert_eq!(runs[1].0.seeds, vec![2]);
    }
}
