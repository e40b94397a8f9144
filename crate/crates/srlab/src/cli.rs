//! Subcommands wiring the lab together: init-model, gen-calib, prune,
//! reconstruct, eval, experiment. Configuration resolves as defaults, then
//! config file, then SRLB_* environment, then flags; every command writes
//! the resolved config next to its outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use srlab_core::calib::{augment, sample_from_corpus, self_generate, GenConfig};
use srlab_core::eval::{perplexity, ParamAccounting};
use srlab_core::pruning::{apply_mask, collect_activation_norms, compute_mask, PruneMethod};
use srlab_core::recon::run_pipeline_with_mask;
use srlab_core::rng::derive_seed;

use crate::config::RunConfig;
use crate::container::{load_checkpoint, load_mask, save_checkpoint, save_mask};
use crate::error::{io_err, Error, Result};
use crate::report::{emit_report, parse_report, ReportJson, RunMetaJson, TraceJson};
use crate::runner::{self, run_experiment, run_single};
use crate::tokenfile::{load_tokens, save_tokens};

#[derive(Parser, Debug)]
#[command(name = "srlab", version, about = "Pruning and reconstruction laboratory for toy decoder-only transformers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Create and save a seeded dense checkpoint.
    #[command(name = "init-model", alias = "init_model")]
    InitModel(InitModelArgs),
    /// Produce a calibration token file (corpus sampling or self-generation).
    #[command(name = "gen-calib", alias = "gen_calib")]
    GenCalib(GenCalibArgs),
    /// Compute a sparsity mask and emit it plus the masked checkpoint.
    Prune(PruneArgs),
    /// Reconstruct a pruned model against its dense original.
    Reconstruct(ReconstructArgs),
    /// Perplexity evaluation and report.
    Eval(EvalArgs),
    /// Full {pruner x method x calib source} grid, multi-seed.
    Experiment(ExperimentArgs),
}

#[derive(Args, Debug)]
pub struct CommonArgs {
    /// TOML config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct InitModelArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Output checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n_blocks: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub ffn_dim: Option<usize>,
    #[arg(long)]
    pub max_seq: Option<usize>,
}

#[derive(Args, Debug)]
pub struct GenCalibArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Dense checkpoint (required for self-generation).
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// corpus | self_generated
    #[arg(long)]
    pub source: Option<String>,
    /// Corpus text file (default: built-in synthetic corpus).
    #[arg(long)]
    pub corpus: Option<String>,
    /// Number of sequences.
    #[arg(long)]
    pub count: Option<usize>,
    /// Sequence length.
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub gen_len: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f32>,
    #[arg(long)]
    pub greedy: bool,
    /// printable | accept_all | reject_all
    #[arg(long)]
    pub filter: Option<String>,
    #[arg(long)]
    pub min_printable: Option<f32>,
    #[arg(long)]
    pub retry_cap: Option<usize>,
    /// Append floor(ratio * count) self-generated sequences to a corpus base.
    #[arg(long)]
    pub mix_ratio: Option<f32>,
}

#[derive(Args, Debug)]
pub struct PruneArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub model: PathBuf,
    /// magnitude | wanda
    #[arg(long)]
    pub pruner: Option<String>,
    #[arg(long)]
    pub sparsity: Option<f32>,
    /// default | per_matrix | per_row
    #[arg(long)]
    pub granularity: Option<String>,
    /// all | attention_only | ffn_only
    #[arg(long)]
    pub scope: Option<String>,
    /// Calibration token file (required for wanda).
    #[arg(long)]
    pub calib: Option<PathBuf>,
    #[arg(long)]
    pub out_mask: PathBuf,
    #[arg(long)]
    pub out_model: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReconstructArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Dense checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    /// none | lr | br | br_gp | br_gp_cr
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub calib: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub model: PathBuf,
    /// Datasets as name=path.srtk (repeatable).
    #[arg(long = "data", value_name = "NAME=PATH")]
    pub data: Vec<String>,
    /// Embed an existing trace.json into the report.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct ExperimentArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Comma-separated seed list override.
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long)]
    pub pruners: Option<String>,
    #[arg(long)]
    pub methods: Option<String>,
    #[arg(long)]
    pub sources: Option<String>,
}

/// Defaults -> config file -> environment -> (caller applies flags after).
fn resolve_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    cfg.apply_env(std::env::vars())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn write_config_sidecar(cfg: &RunConfig, out: &Path) -> Result<()> {
    let mut os = out.as_os_str().to_owned();
    os.push(".config.toml");
    let path = PathBuf::from(os);
    std::fs::write(&path, cfg.to_toml()?).map_err(|e| io_err(&path, e))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::InitModel(args) => cmd_init_model(args),
        Command::GenCalib(args) => cmd_gen_calib(args),
        Command::Prune(args) => cmd_prune(args),
        Command::Reconstruct(args) => cmd_reconstruct(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Experiment(args) => cmd_experiment(args),
    }
}

fn cmd_init_model(args: InitModelArgs) -> Result<()> {
    let mut cfg = resolve_config(&args.common)?;
    if let Some(v) = args.n_blocks {
        cfg.model.n_blocks = v;
    }
    if let Some(v) = args.hidden {
        cfg.model.hidden = v;
    }
    if let Some(v) = args.n_heads {
        cfg.model.n_heads = v;
    }
    if let Some(v) = args.ffn_dim {
        cfg.model.ffn_dim = v;
    }
    if let Some(v) = args.max_seq {
        cfg.model.max_seq = v;
    }
    let model = srlab_core::model::Model::init_random(cfg.model_config(), cfg.seed)?;
    let hash = cfg.hash()?;
    save_checkpoint(&model, &args.out, Some(&hash))?;
    write_config_sidecar(&cfg, &args.out)?;
    println!("wrote {} ({} parameters, config {hash})", args.out.display(), cfg.model_config().param_count());
    Ok(())
}

fn cmd_gen_calib(args: GenCalibArgs) -> Result<()> {
    let mut cfg = resolve_config(&args.common)?;
    if let Some(v) = &args.source {
        cfg.calib.source = v.clone();
    }
    if let Some(v) = &args.corpus {
        cfg.calib.corpus = v.clone();
    }
    if let Some(v) = args.count {
        cfg.calib.n = v;
    }
    if let Some(v) = args.window {
        cfg.calib.t = v;
    }
    if let Some(v) = args.gen_len {
        cfg.calib.gen_len = v;
    }
    if let Some(v) = args.temperature {
        cfg.calib.gen_temperature = v;
    }
    if args.greedy {
        cfg.calib.gen_greedy = true;
    }
    if let Some(v) = &args.filter {
        cfg.calib.gen_filter = v.clone();
    }
    if let Some(v) = args.min_printable {
        cfg.calib.gen_min_printable = v;
    }
    if let Some(v) = args.retry_cap {
        cfg.calib.gen_retry_cap = v;
    }
    if let Some(v) = args.mix_ratio {
        cfg.calib.mix_ratio = v;
    }

    let model = match &args.model {
        Some(path) => Some(load_checkpoint(path)?.0),
        None => None,
    };
    let need_model = cfg.calib.source == "self_generated" || cfg.calib.mix_ratio > 0.0;
    if need_model && model.is_none() {
        return Err(Error::Config("--model is required for self-generation".into()));
    }

    let filter = cfg.generation_filter()?;
    let gen_cfg = |count: usize, seed: u64| GenConfig {
        count,
        gen_len: cfg.calib.gen_len,
        window: cfg.calib.t,
        temperature: cfg.calib.gen_temperature,
        greedy: cfg.calib.gen_greedy,
        retry_cap: cfg.calib.gen_retry_cap,
        seed,
    };
    let set = match cfg.calib.source.as_str() {
        "corpus" => {
            let corpus = runner::corpus_tokens(&cfg)?;
            let base = sample_from_corpus(&corpus, cfg.calib.n, cfg.calib.t, derive_seed(cfg.seed, 1))?;
            if cfg.calib.mix_ratio > 0.0 {
                let extra = (cfg.calib.mix_ratio as f64 * cfg.calib.n as f64).floor() as usize;
                let generated = self_generate(
                    model.as_ref().expect("model checked above"),
                    &gen_cfg(extra.max(1), derive_seed(cfg.seed, 4)),
                    &filter,
                )?;
                augment(&base, &generated, cfg.calib.mix_ratio, derive_seed(cfg.seed, 5))?
            } else {
                base
            }
        }
        "self_generated" => self_generate(
            model.as_ref().expect("model checked above"),
            &gen_cfg(cfg.calib.n, derive_seed(cfg.seed, 4)),
            &filter,
        )?,
        other => return Err(Error::Config(format!("unknown calib source `{other}`"))),
    };
    let hash = cfg.hash()?;
    save_tokens(&set, &args.out, Some(&hash))?;
    write_config_sidecar(&cfg, &args.out)?;
    println!("wrote {} ({} x {}, source {})", args.out.display(), set.n(), set.t(), set.source_name());
    Ok(())
}

fn cmd_prune(args: PruneArgs) -> Result<()> {
    let mut cfg = resolve_config(&args.common)?;
    if let Some(v) = &args.pruner {
        cfg.pruner = v.clone();
    }
    if let Some(v) = args.sparsity {
        cfg.sparsity = v;
    }
    if let Some(v) = &args.granularity {
        cfg.granularity = v.clone();
    }
    if let Some(v) = &args.scope {
        cfg.scope = v.clone();
    }
    let (dense, _) = load_checkpoint(&args.model)?;
    let spec = cfg.pruner_spec()?;
    let norms = match spec.method {
        PruneMethod::Wanda => {
            let calib_path = args.calib.as_ref().ok_or_else(|| {
                Error::Config("--calib is required for the wanda pruner".into())
            })?;
            let calib = load_tokens(calib_path)?;
            Some(collect_activation_norms(&dense, calib.tokens())?)
        }
        PruneMethod::Magnitude => None,
    };
    let mask = compute_mask(&dense, spec, norms.as_ref())?;
    let mut pruned = dense.clone();
    apply_mask(&mut pruned, &mask)?;

    let hash = cfg.hash()?;
    save_mask(&mask, dense.config, &args.out_mask, Some(&hash))?;
    save_checkpoint(&pruned, &args.out_model, Some(&hash))?;
    write_config_sidecar(&cfg, &args.out_mask)?;
    println!(
        "wrote {} and {} ({} pruner, s = {})",
        args.out_mask.display(),
        args.out_model.display(),
        spec.method.name(),
        spec.sparsity
    );
    Ok(())
}

fn cmd_reconstruct(args: ReconstructArgs) -> Result<()> {
    let mut cfg = resolve_config(&args.common)?;
    if let Some(v) = &args.method {
        cfg.method = v.clone();
    }
    let (dense, _) = load_checkpoint(&args.model)?;
    let (mask, _) = load_mask(&args.mask)?;
    let calib = load_tokens(&args.calib)?;
    let test = load_tokens(&args.test)?;
    let method = cfg.recon_method()?;
    let rcfg = cfg.recon_config(derive_seed(cfg.seed, 3));

    let out = run_pipeline_with_mask(&dense, mask, method, &calib, &test, &rcfg)?;

    std::fs::create_dir_all(&args.out_dir).map_err(|e| io_err(&args.out_dir, e))?;
    let hash = cfg.hash()?;
    let ckpt = args.out_dir.join("sparse.srlb");
    save_checkpoint(&out.sparse, &ckpt, Some(&hash))?;
    let trace_path = args.out_dir.join("trace.json");
    let trace_json = serde_json::to_string_pretty(&TraceJson::from(&out.trace))
        .map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(&trace_path, trace_json).map_err(|e| io_err(&trace_path, e))?;
    cfg.write_resolved(&args.out_dir)?;
    println!(
        "wrote {} and {} (final-block e_calib {:.6e}, e_test {:.6e})",
        ckpt.display(),
        trace_path.display(),
        out.trace.final_calib(),
        out.trace.final_test()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let cfg = resolve_config(&args.common)?;
    let (model, _) = load_checkpoint(&args.model)?;
    if args.data.is_empty() {
        return Err(Error::Config("at least one --data name=path is required".into()));
    }
    let mut ppl = BTreeMap::new();
    for pair in &args.data {
        let (name, path) = pair.split_once('=').ok_or_else(|| {
            Error::Config(format!("--data wants name=path, got `{pair}`"))
        })?;
        let set = load_tokens(Path::new(path))?;
        ppl.insert(name.to_string(), perplexity(&model, set.tokens())?);
    }
    let hash = cfg.hash()?;
    let error_trace = match &args.trace {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            serde_json::from_str(&text).map_err(|e| Error::HeaderMismatch {
                path: path.clone(),
                detail: e.to_string(),
            })?
        }
        None => TraceJson {
            pruner: cfg.pruner.clone(),
            method: "none".into(),
            seed: cfg.seed,
            calib_source: cfg.calib.source.clone(),
            blocks: Vec::new(),
            logit_error: 0.0,
        },
    };
    let report = ReportJson {
        run_meta: RunMetaJson {
            seed: cfg.seed,
            config_hash: hash,
            method: error_trace.method.clone(),
            pruner: error_trace.pruner.clone(),
            sparsity: cfg.sparsity,
            calib_source: cfg.calib.source.clone(),
            calib_size: cfg.calib.n,
        },
        perplexity: ppl,
        error_trace,
        param_counts: ParamAccounting::compute(&model.config, cfg.sparsity).as_map(),
    };
    let path = emit_report(&report, &args.out_dir)?;
    cfg.write_resolved(&args.out_dir)?;
    // parse back as a self-check that the report round-trips
    let parsed = parse_report(&path)?;
    debug_assert_eq!(parsed, report);
    println!("wrote {}", path.display());
    for (name, value) in &report.perplexity {
        println!("perplexity {name}: {value:.4}");
    }
    Ok(())
}

fn cmd_experiment(args: ExperimentArgs) -> Result<()> {
    let mut cfg = resolve_config(&args.common)?;
    let csv = |v: &str| -> Vec<String> { v.split(',').map(|s| s.trim().to_string()).collect() };
    if let Some(v) = &args.pruners {
        cfg.experiment.pruners = csv(v);
    }
    if let Some(v) = &args.methods {
        cfg.experiment.methods = csv(v);
    }
    if let Some(v) = &args.sources {
        cfg.experiment.calib_sources = csv(v);
    }
    if let Some(v) = &args.seeds {
        cfg.experiment.seeds = v
            .split(',')
            .map(|s| s.trim().parse().map_err(|_| Error::Config(format!("bad seed `{s}`"))))
            .collect::<Result<Vec<u64>>>()?;
    }
    let run_dir = run_experiment(&cfg, &args.out_dir)?;
    println!("wrote {}", run_dir.display());
    Ok(())
}

/// For tests: run one seeded pipeline and return its report.
pub fn single_run_report(cfg: &RunConfig, seed: u64) -> Result<ReportJson> {
    Ok(run_single(cfg, seed)?.report)
}
