use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Deserialize;
use taocache::metrics::{eps_divergence, MetricReport};
use taocache::trace::read_trace_file;
use taocache::Latent;

use super::sample::SAMPLES_DIR;
use crate::exit::{ConfigError, DataError};
use crate::output::{cell, read_json, OutputDir};

pub const METRICS_FILE: &str = "metrics.csv";
pub const EXCEPTIONS_FILE: &str = "exceptions.csv";

#[derive(Deserialize)]
struct SampleFile {
    x0: Latent,
    skipped: usize,
    model_calls: usize,
}

/// Sample files keyed by prompt id; accepts a sample run's output directory or its samples folder.
fn sample_files(dir: &Path) -> anyhow::Result<BTreeMap<String, PathBuf>> {
    let nested = dir.join(SAMPLES_DIR);
    let dir = if nested.is_dir() { nested } else { dir.to_path_buf() };
    if !dir.is_dir() {
        return Err(ConfigError(format!("{} is not a directory", dir.display())).into());
    }
    let mut files = BTreeMap::new();
    for entry in std::fs::read_dir(&dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "json") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                files.insert(stem.to_string(), path);
            }
        }
    }
    Ok(files)
}

struct Row {
    prompt: String,
    skipped: usize,
    model_calls: usize,
    metrics: MetricReport,
    eps_div: Option<(f64, f64)>,
}

/// Mean and max of the defined per-step ε divergences, if both runs left traces.
fn eps_summary(reference: &Path, candidate: &Path) -> anyhow::Result<Option<(f64, f64)>> {
    let (r, c) = (reference.with_extension("taot"), candidate.with_extension("taot"));
    if !(r.is_file() && c.is_file()) {
        return Ok(None);
    }
    let errs: Vec<f64> = eps_divergence(&read_trace_file(&r)?, &read_trace_file(&c)?)?
        .into_iter()
        .filter_map(|(_, e)| e)
        .collect();
    if errs.is_empty() {
        return Ok(None);
    }
    let mean = errs.iter().sum::<f64>() / errs.len() as f64;
    Ok(Some((mean, errs.iter().copied().fold(0.0, f64::max))))
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn run(reference: &Path, candidate: &Path, out: &OutputDir) -> anyhow::Result<()> {
    let refs = sample_files(reference)?;
    let cands = sample_files(candidate)?;
    let mut rows = Vec::new();
    let mut exceptions: Vec<(String, String)> = Vec::new();
    for (id, ref_path) in &refs {
        let Some(cand_path) = cands.get(id) else {
            exceptions.push((id.clone(), "missing from candidate".into()));
            continue;
        };
        let a: SampleFile = read_json(ref_path)?;
        let b: SampleFile = read_json(cand_path)?;
        let metrics = match MetricReport::compare(&a.x0, &b.x0, None) {
            Ok(m) => m,
            Err(e) => {
                exceptions.push((id.clone(), e.to_string()));
                continue;
            }
        };
        rows.push(Row {
            prompt: id.clone(),
            skipped: b.skipped,
            model_calls: b.model_calls,
            metrics,
            eps_div: eps_summary(ref_path, cand_path).with_context(|| format!("prompt {id}"))?,
        });
    }
    for id in cands.keys().filter(|id| !refs.contains_key(*id)) {
        exceptions.push((id.clone(), "missing from reference".into()));
    }
    exceptions.sort();

    let mut w = out.csv(METRICS_FILE)?;
    w.write_record([
        "prompt",
        "skipped",
        "model_calls",
        "mse",
        "psnr_db",
        "ssim",
        "eps_div_mean",
        "eps_div_max",
    ])?;
    for r in &rows {
        w.write_record([
            r.prompt.clone(),
            r.skipped.to_string(),
            r.model_calls.to_string(),
            r.metrics.mse.to_string(),
            r.metrics.psnr_db.to_string(),
            cell(r.metrics.ssim),
            cell(r.eps_div.map(|e| e.0)),
            cell(r.eps_div.map(|e| e.1)),
        ])?;
    }
    if !rows.is_empty() {
        w.write_record([
            "mean".to_string(),
            cell(mean_of(rows.iter().map(|r| r.skipped as f64))),
            cell(mean_of(rows.iter().map(|r| r.model_calls as f64))),
            cell(mean_of(rows.iter().map(|r| r.metrics.mse))),
            cell(mean_of(rows.iter().map(|r| r.metrics.psnr_db))),
            cell(mean_of(rows.iter().filter_map(|r| r.metrics.ssim))),
            cell(mean_of(rows.iter().filter_map(|r| r.eps_div.map(|e| e.0)))),
            cell(mean_of(rows.iter().filter_map(|r| r.eps_div.map(|e| e.1)))),
        ])?;
    }
    w.flush()?;

    let mut x = out.csv(EXCEPTIONS_FILE)?;
    x.write_record(["prompt", "problem"])?;
    for (id, problem) in &exceptions {
        x.write_record([id, problem])?;
    }
    x.flush()?;

    eprintln!("compared {} prompt pairs, {} exceptions", rows.len(), exceptions.len());
    if !exceptions.is_empty() {
        let list: Vec<String> = exceptions.iter().map(|(id, p)| format!("{id} ({p})")).collect();
        return Err(DataError(format!("unpaired or incomparable outputs: {}", list.join(", "))).into());
    }
    Ok(())
}
