//! Glue between the run configuration and the core pipelines: dataset
//! preparation, single evaluated runs, and the full experiment grid.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use srlab_core::calib::{augment, sample_from_corpus, self_generate, CalibrationSet, GenConfig};
use srlab_core::eval::{perplexity, EvalReport, ParamAccounting, RunMeta};
use srlab_core::model::Model;
use srlab_core::recon::{run_pipeline, PipelineOutput};
use srlab_core::rng::derive_seed;
use srlab_core::tokens::tokenize;

use crate::config::{builtin_corpus, parse_method, parse_pruner, RunConfig};
use crate::container::save_checkpoint;
use crate::error::{io_err, Error, Result};
use crate::plot::{emit_plot, Series};
use crate::report::{ReportJson, TraceJson};

/// Seed of the built-in corpus; independent of the run seed so that every
/// run samples windows from the same synthetic text.
const BUILTIN_CORPUS_SEED: u64 = 0x5eed;
const BUILTIN_CORPUS_LEN: usize = 1 << 15;

// Sub-seed slots carved out of a run seed.
const SLOT_CALIB: u64 = 1;
const SLOT_TEST: u64 = 2;
const SLOT_RECON: u64 = 3;
const SLOT_GEN: u64 = 4;
const SLOT_MIX: u64 = 5;

/// Corpus tokens from the configured file, or the built-in text.
pub fn corpus_tokens(cfg: &RunConfig) -> Result<Vec<u32>> {
    if cfg.calib.corpus.is_empty() {
        let need = (cfg.calib.t + cfg.test.t).max(BUILTIN_CORPUS_LEN / 8) * 8;
        Ok(builtin_corpus(need, BUILTIN_CORPUS_SEED))
    } else {
        let path = Path::new(&cfg.calib.corpus);
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Ok(tokenize(&text))
    }
}

pub struct PreparedData {
    pub calib: CalibrationSet,
    pub test: CalibrationSet,
}

/// Calibration per the configured source; test always comes from the
/// held-out second half of the corpus so its offsets are disjoint from
/// calibration's.
pub fn prepare_datasets(cfg: &RunConfig, dense: &Model, seed: u64) -> Result<PreparedData> {
    let corpus = corpus_tokens(cfg)?;
    if corpus.len() < cfg.calib.t + cfg.test.t {
        return Err(Error::Config(format!(
            "corpus of {} tokens cannot hold calib t={} plus test t={}",
            corpus.len(),
            cfg.calib.t,
            cfg.test.t
        )));
    }
    let half = corpus.len() / 2;
    let gen_cfg = |count: usize, gen_seed: u64| GenConfig {
        count,
        gen_len: cfg.calib.gen_len.min(dense.config.max_seq),
        window: cfg.calib.t,
        temperature: cfg.calib.gen_temperature,
        greedy: cfg.calib.gen_greedy,
        retry_cap: cfg.calib.gen_retry_cap,
        seed: gen_seed,
    };
    let filter = cfg.generation_filter()?;

    let calib = match cfg.calib.source.as_str() {
        "corpus" => {
            let base = sample_from_corpus(&corpus[..half], cfg.calib.n, cfg.calib.t, derive_seed(seed, SLOT_CALIB))?;
            if cfg.calib.mix_ratio > 0.0 {
                let extra = (cfg.calib.mix_ratio as f64 * cfg.calib.n as f64).floor() as usize;
                let generated = self_generate(dense, &gen_cfg(extra.max(1), derive_seed(seed, SLOT_GEN)), &filter)?;
                augment(&base, &generated, cfg.calib.mix_ratio, derive_seed(seed, SLOT_MIX))?
            } else {
                base
            }
        }
        "self_generated" => {
            self_generate(dense, &gen_cfg(cfg.calib.n, derive_seed(seed, SLOT_GEN)), &filter)?
        }
        other => return Err(Error::Config(format!("unknown calib source `{other}`"))),
    };
    let test = sample_from_corpus(&corpus[half..], cfg.test.n, cfg.test.t, derive_seed(seed, SLOT_TEST))?;
    Ok(PreparedData { calib, test })
}

pub struct SingleRun {
    pub dense: Model,
    pub output: PipelineOutput,
    pub report: ReportJson,
}

/// One full seeded run: init, prune, reconstruct, evaluate, report.
pub fn run_single(cfg: &RunConfig, seed: u64) -> Result<SingleRun> {
    let model_cfg = cfg.model_config();
    let dense = Model::init_random(model_cfg, seed)?;
    let data = prepare_datasets(cfg, &dense, seed)?;
    let pruner = cfg.pruner_spec()?;
    let method = cfg.recon_method()?;
    let rcfg = cfg.recon_config(derive_seed(seed, SLOT_RECON));
    let output = run_pipeline(&dense, pruner, method, &data.calib, &data.test, &rcfg)?;

    let mut ppl = BTreeMap::new();
    ppl.insert("calib".to_string(), perplexity(&output.sparse, data.calib.tokens())?);
    ppl.insert("test".to_string(), perplexity(&output.sparse, data.test.tokens())?);
    ppl.insert("dense_calib".to_string(), perplexity(&dense, data.calib.tokens())?);
    ppl.insert("dense_test".to_string(), perplexity(&dense, data.test.tokens())?);

    let eval = EvalReport {
        run_meta: RunMeta {
            seed,
            config_hash: cfg.hash()?,
            method: method.name().to_string(),
            pruner: pruner.method.name().to_string(),
            sparsity: pruner.sparsity,
            calib_source: data.calib.source_name().to_string(),
            calib_size: data.calib.n(),
        },
        perplexity: ppl,
        error_trace: output.trace.clone(),
        param_counts: ParamAccounting::compute(&model_cfg, pruner.sparsity).as_map(),
    };
    Ok(SingleRun { dense, output, report: ReportJson::from(&eval) })
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CellJson {
    pub pruner: String,
    pub method: String,
    pub calib_source: String,
    pub seeds: Vec<u64>,
    /// Per-block errors averaged over seeds.
    pub mean_calib: Vec<f64>,
    pub mean_test: Vec<f64>,
    pub mean_logit_error: f64,
    pub mean_perplexity: BTreeMap<String, f64>,
    pub per_seed: Vec<TraceJson>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExperimentReport {
    pub config_hash: String,
    pub cells: Vec<CellJson>,
}

/// Run the full {pruner x method x calib source} grid over all seeds,
/// writing the aggregate report, per-(pruner, source) plots, first-seed
/// sparse checkpoints, and the resolved config under a hash-stamped run
/// directory. Returns that directory.
pub fn run_experiment(cfg: &RunConfig, out_dir: &Path) -> Result<PathBuf> {
    let hash = cfg.hash()?;
    let run_dir = out_dir.join(format!("run-{hash}"));
    fs::create_dir_all(&run_dir).map_err(|e| io_err(&run_dir, e))?;
    cfg.write_resolved(&run_dir)?;
    let ckpt_dir = run_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| io_err(&ckpt_dir, e))?;

    let mut cells = Vec::new();
    for pruner_name in &cfg.experiment.pruners {
        parse_pruner(pruner_name)?;
        for source in &cfg.experiment.calib_sources {
            let mut series = Vec::new();
            for method_name in &cfg.experiment.methods {
                parse_method(method_name)?;
                let mut cell_cfg = cfg.clone();
                cell_cfg.pruner = pruner_name.clone();
                cell_cfg.method = method_name.clone();
                cell_cfg.calib.source = source.clone();

                let mut per_seed = Vec::new();
                let mut mean_calib: Vec<f64> = Vec::new();
                let mut mean_test: Vec<f64> = Vec::new();
                let mut mean_logit = 0.0f64;
                let mut mean_ppl: BTreeMap<String, f64> = BTreeMap::new();
                for (si, &seed) in cfg.experiment.seeds.iter().enumerate() {
                    let run = run_single(&cell_cfg, seed)?;
                    if si == 0 {
                        mean_calib = vec![0.0; run.output.trace.calib.len()];
                        mean_test = vec![0.0; run.output.trace.test.len()];
                        let name = format!("{pruner_name}_{method_name}_{source}_s{seed}.srlb");
                        save_checkpoint(&run.output.sparse, &ckpt_dir.join(name), Some(&hash))?;
                    }
                    for (acc, v) in mean_calib.iter_mut().zip(&run.output.trace.calib) {
                        *acc += v;
                    }
                    for (acc, v) in mean_test.iter_mut().zip(&run.output.trace.test) {
                        *acc += v;
                    }
                    mean_logit += run.output.trace.logit_error;
                    for (k, v) in &run.report.perplexity {
                        *mean_ppl.entry(k.clone()).or_insert(0.0) += v;
                    }
                    per_seed.push(TraceJson::from(&run.output.trace));
                }
                let count = cfg.experiment.seeds.len() as f64;
                for v in mean_calib.iter_mut().chain(mean_test.iter_mut()) {
                    *v /= count;
                }
                mean_logit /= count;
                for v in mean_ppl.values_mut() {
                    *v /= count;
                }
                series.push(Series { label: method_name.clone(), errors: mean_calib.clone() });
                cells.push(CellJson {
                    pruner: pruner_name.clone(),
                    method: method_name.clone(),
                    calib_source: source.clone(),
                    seeds: cfg.experiment.seeds.clone(),
                    mean_calib,
                    mean_test,
                    mean_logit_error: mean_logit,
                    mean_perplexity: mean_ppl,
                    per_seed,
                });
            }
            let plot_path = run_dir.join(format!("errors_{pruner_name}_{source}.svg"));
            let title = format!("per-block calibration error, {pruner_name} pruner ({source})");
            emit_plot(&series, &title, Some(&hash), &plot_path)?;
        }
    }

    let report = ExperimentReport { config_hash: hash, cells };
    let path = run_dir.join("experiment_report.json");
    let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    Ok(run_dir)
}
