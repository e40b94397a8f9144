//! Machine-readable run reports: UTF-8 JSON with top-level keys `run_meta`,
//! `perplexity`, `error_trace`, and `param_counts`. The error trace is one
//! record per block (index, e_calib, e_test) under a run-metadata header.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use srlab_core::eval::EvalReport;
use srlab_core::recon::{ErrorTrace, TraceMeta};

use crate::error::{io_err, Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunMetaJson {
    pub seed: u64,
    pub config_hash: String,
    pub method: String,
    pub pruner: String,
    pub sparsity: f32,
    pub calib_source: String,
    pub calib_size: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BlockErrorJson {
    pub index: usize,
    pub e_calib: f64,
    pub e_test: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TraceJson {
    pub pruner: String,
    pub method: String,
    pub seed: u64,
    pub calib_source: String,
    pub blocks: Vec<BlockErrorJson>,
    pub logit_error: f64,
}

impl From<&ErrorTrace> for TraceJson {
    fn from(trace: &ErrorTrace) -> Self {
        TraceJson {
            pruner: trace.meta.pruner.clone(),
            method: trace.meta.method.clone(),
            seed: trace.meta.seed,
            calib_source: trace.meta.calib_source.clone(),
            blocks: trace
                .calib
                .iter()
                .zip(&trace.test)
                .enumerate()
                .map(|(index, (&e_calib, &e_test))| BlockErrorJson { index, e_calib, e_test })
                .collect(),
            logit_error: trace.logit_error,
        }
    }
}

impl TraceJson {
    pub fn to_trace(&self) -> ErrorTrace {
        ErrorTrace {
            calib: self.blocks.iter().map(|b| b.e_calib).collect(),
            test: self.blocks.iter().map(|b| b.e_test).collect(),
            logit_error: self.logit_error,
            meta: TraceMeta {
                pruner: self.pruner.clone(),
                method: self.method.clone(),
                seed: self.seed,
                calib_source: self.calib_source.clone(),
            },
        }
    }
}

/// Field names here are the on-disk schema; do not rename.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ReportJson {
    pub run_meta: RunMetaJson,
    pub perplexity: BTreeMap<String, f64>,
    pub error_trace: TraceJson,
    pub param_counts: BTreeMap<String, u64>,
}

impl From<&EvalReport> for ReportJson {
    fn from(r: &EvalReport) -> Self {
        ReportJson {
            run_meta: RunMetaJson {
                seed: r.run_meta.seed,
                config_hash: r.run_meta.config_hash.clone(),
                method: r.run_meta.method.clone(),
                pruner: r.run_meta.pruner.clone(),
                sparsity: r.run_meta.sparsity,
                calib_source: r.run_meta.calib_source.clone(),
                calib_size: r.run_meta.calib_size,
            },
            perplexity: r.perplexity.clone(),
            error_trace: TraceJson::from(&r.error_trace),
            param_counts: r.param_counts.clone(),
        }
    }
}

/// Write `report.json` under `dir`.
pub fn emit_report(report: &ReportJson, dir: &Path) -> Result<std::path::PathBuf> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let path = dir.join("report.json");
    let text = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Config(format!("report serialization: {e}")))?;
    fs::write(&path, text.as_bytes()).map_err(|e| io_err(&path, e))?;
    Ok(path)
}

pub fn parse_report(path: &Path) -> Result<ReportJson> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::HeaderMismatch { path: path.to_path_buf(), detail: e.to_string() })
}
