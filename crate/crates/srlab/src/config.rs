//! Run configuration: TOML file, `SRLB_*` environment overrides, then flag
//! overrides, resolved into one struct that is serialized next to every
//! run's outputs. The sha-256 of that serialization is the config hash every
//! artifact carries.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use srlab_core::adam::AdamHyper;
use srlab_core::calib::GenerationFilter;
use srlab_core::model::ModelConfig;
use srlab_core::pruning::{Granularity, PruneMethod, PrunerSpec, Scope};
use srlab_core::recon::{ReconConfig, ReconMethod};
use srlab_core::rng::SeededRng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub sparsity: f32,
    /// "magnitude" | "wanda"
    pub pruner: String,
    /// "default" (per method), "per_matrix", "per_row"
    pub granularity: String,
    /// "all" | "attention_only" | "ffn_only"
    pub scope: String,
    /// "none" | "lr" | "br" | "br_gp" | "br_gp_cr"
    pub method: String,
    pub model: ModelSection,
    pub recon: ReconSection,
    pub calib: CalibSection,
    pub test: TestSection,
    pub experiment: ExperimentSection,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub n_blocks: usize,
    pub hidden: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub vocab: usize,
    pub max_seq: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ReconSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f32,
    pub ridge_fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct CalibSection {
    /// "corpus" | "self_generated"
    pub source: String,
    pub n: usize,
    pub t: usize,
    /// Corpus text file; empty means the built-in synthetic corpus.
    pub corpus: String,
    pub gen_len: usize,
    pub gen_temperature: f32,
    pub gen_greedy: bool,
    /// "printable" | "accept_all" | "reject_all"
    pub gen_filter: String,
    pub gen_min_printable: f32,
    pub gen_retry_cap: usize,
    /// Self-generated sequences appended per base sequence when mixing.
    pub mix_ratio: f32,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TestSection {
    pub n: usize,
    pub t: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub pruners: Vec<String>,
    pub methods: Vec<String>,
    pub calib_sources: Vec<String>,
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            sparsity: 0.5,
            pruner: "magnitude".into(),
            granularity: "default".into(),
            scope: "all".into(),
            method: "br_gp".into(),
            model: ModelSection::default(),
            recon: ReconSection::default(),
            calib: CalibSection::default(),
            test: TestSection::default(),
            experiment: ExperimentSection::default(),
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { n_blocks: 4, hidden: 64, n_heads: 4, ffn_dim: 256, vocab: 258, max_seq: 64 }
    }
}

impl Default for ReconSection {
    fn default() -> Self {
        Self { epochs: 10, batch_size: 8, base_lr: 2e-4, ridge_fraction: 0.01 }
    }
}

impl Default for CalibSection {
    fn default() -> Self {
        Self {
            source: "corpus".into(),
            n: 32,
            t: 64,
            corpus: String::new(),
            gen_len: 64,
            gen_temperature: 1.0,
            gen_greedy: false,
            gen_filter: "printable".into(),
            gen_min_printable: 0.9,
            gen_retry_cap: 100,
            mix_ratio: 0.0,
        }
    }
}

impl Default for TestSection {
    fn default() -> Self {
        Self { n: 32, t: 64 }
    }
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            pruners: vec!["magnitude".into(), "wanda".into()],
            methods: vec!["none".into(), "lr".into(), "br".into(), "br_gp".into(), "br_gp_cr".into()],
            calib_sources: vec!["corpus".into()],
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| crate::error::io_err(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Apply `SRLB_*` environment overrides. Nested fields use
    /// `SRLB_<SECTION>_<FIELD>`, e.g. `SRLB_MODEL_HIDDEN=32`.
    pub fn apply_env<I: IntoIterator<Item = (String, String)>>(&mut self, vars: I) -> Result<()> {
        for (key, value) in vars {
            let Some(rest) = key.strip_prefix("SRLB_") else { continue };
            self.apply_override(rest, &value)?;
        }
        Ok(())
    }

    fn apply_override(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| Error::Config(format!("cannot parse `{value}` for {key}")))
        }
        fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
            value.split(',').map(|v| parse(key, v.trim())).collect()
        }
        fn strings(value: &str) -> Vec<String> {
            value.split(',').map(|v| v.trim().to_string()).collect()
        }
        match key {
            "SEED" => self.seed = parse(key, value)?,
            "SPARSITY" => self.sparsity = parse(key, value)?,
            "PRUNER" => self.pruner = value.into(),
            "GRANULARITY" => self.granularity = value.into(),
            "SCOPE" => self.scope = value.into(),
            "METHOD" => self.method = value.into(),
            "MODEL_N_BLOCKS" => self.model.n_blocks = parse(key, value)?,
            "MODEL_HIDDEN" => self.model.hidden = parse(key, value)?,
            "MODEL_N_HEADS" => self.model.n_heads = parse(key, value)?,
            "MODEL_FFN_DIM" => self.model.ffn_dim = parse(key, value)?,
            "MODEL_VOCAB" => self.model.vocab = parse(key, value)?,
            "MODEL_MAX_SEQ" => self.model.max_seq = parse(key, value)?,
            "RECON_EPOCHS" => self.recon.epochs = parse(key, value)?,
            "RECON_BATCH_SIZE" => self.recon.batch_size = parse(key, value)?,
            "RECON_BASE_LR" => self.recon.base_lr = parse(key, value)?,
            "RECON_RIDGE_FRACTION" => self.recon.ridge_fraction = parse(key, value)?,
            "CALIB_SOURCE" => self.calib.source = value.into(),
            "CALIB_N" => self.calib.n = parse(key, value)?,
            "CALIB_T" => self.calib.t = parse(key, value)?,
            "CALIB_CORPUS" => self.calib.corpus = value.into(),
            "CALIB_GEN_LEN" => self.calib.gen_len = parse(key, value)?,
            "CALIB_GEN_TEMPERATURE" => self.calib.gen_temperature = parse(key, value)?,
            "CALIB_GEN_GREEDY" => self.calib.gen_greedy = parse(key, value)?,
            "CALIB_GEN_FILTER" => self.calib.gen_filter = value.into(),
            "CALIB_GEN_MIN_PRINTABLE" => self.calib.gen_min_printable = parse(key, value)?,
            "CALIB_GEN_RETRY_CAP" => self.calib.gen_retry_cap = parse(key, value)?,
            "CALIB_MIX_RATIO" => self.calib.mix_ratio = parse(key, value)?,
            "TEST_N" => self.test.n = parse(key, value)?,
            "TEST_T" => self.test.t = parse(key, value)?,
            "EXPERIMENT_PRUNERS" => self.experiment.pruners = strings(value),
            "EXPERIMENT_METHODS" => self.experiment.methods = strings(value),
            "EXPERIMENT_CALIB_SOURCES" => self.experiment.calib_sources = strings(value),
            "EXPERIMENT_SEEDS" => self.experiment.seeds = parse_list(key, value)?,
            other => return Err(Error::Config(format!("unknown override SRLB_{other}"))),
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// First 16 hex chars of the sha-256 of the resolved TOML.
    pub fn hash(&self) -> Result<String> {
        let toml = self.to_toml()?;
        let digest = Sha256::digest(toml.as_bytes());
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        Ok(hex[..16].to_string())
    }

    /// Write the fully-resolved config next to a run's outputs.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| crate::error::io_err(dir, e))?;
        let path = dir.join("resolved_config.toml");
        std::fs::write(&path, self.to_toml()?).map_err(|e| crate::error::io_err(&path, e))?;
        Ok(path)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_blocks: self.model.n_blocks,
            hidden: self.model.hidden,
            n_heads: self.model.n_heads,
            ffn_dim: self.model.ffn_dim,
            vocab: self.model.vocab,
            max_seq: self.model.max_seq,
            eos_token_id: srlab_core::tokens::EOS,
            bos_token_id: srlab_core::tokens::BOS,
        }
    }

    pub fn prune_method(&self) -> Result<PruneMethod> {
        parse_pruner(&self.pruner)
    }

    pub fn pruner_spec(&self) -> Result<PrunerSpec> {
        let mut spec = PrunerSpec::new(self.prune_method()?, self.sparsity);
        match self.granularity.as_str() {
            "default" => {}
            "per_matrix" => spec = spec.with_granularity(Granularity::PerMatrix),
            "per_row" => spec = spec.with_granularity(Granularity::PerRow),
            other => return Err(Error::Config(format!("unknown granularity `{other}`"))),
        }
        spec = spec.with_scope(match self.scope.as_str() {
            "all" => Scope::All,
            "attention_only" => Scope::AttentionOnly,
            "ffn_only" => Scope::FfnOnly,
            other => return Err(Error::Config(format!("unknown scope `{other}`"))),
        });
        Ok(spec)
    }

    pub fn recon_method(&self) -> Result<ReconMethod> {
        parse_method(&self.method)
    }

    pub fn recon_config(&self, seed: u64) -> ReconConfig {
        ReconConfig {
            epochs: self.recon.epochs,
            batch_size: self.recon.batch_size,
            adam: AdamHyper::with_lr(self.recon.base_lr),
            ridge_fraction: self.recon.ridge_fraction,
            seed,
        }
    }

    pub fn generation_filter(&self) -> Result<GenerationFilter> {
        match self.calib.gen_filter.as_str() {
            "printable" => Ok(GenerationFilter::PrintableRatio { min: self.calib.gen_min_printable }),
            "accept_all" => Ok(GenerationFilter::AcceptAll),
            "reject_all" => Ok(GenerationFilter::RejectAll),
            other => Err(Error::Config(format!("unknown filter `{other}`"))),
        }
    }
}

pub fn parse_pruner(name: &str) -> Result<PruneMethod> {
    match name {
        "magnitude" => Ok(PruneMethod::Magnitude),
        "wanda" => Ok(PruneMethod::Wanda),
        other => Err(Error::Config(format!("unknown pruner `{other}`"))),
    }
}

pub fn parse_method(name: &str) -> Result<ReconMethod> {
    match name {
        "none" => Ok(ReconMethod::None),
        "lr" => Ok(ReconMethod::Lr),
        "br" => Ok(ReconMethod::Br),
        "br_gp" => Ok(ReconMethod::BrGp),
        "br_gp_cr" => Ok(ReconMethod::BrGpCr),
        other => Err(Error::Config(format!("unknown method `{other}`"))),
    }
}

/// Deterministic synthetic corpus: seeded pseudo-words of lowercase letters
/// with spaces and light punctuation. Used when no corpus file is given.
pub fn builtin_corpus(n_tokens: usize, seed: u64) -> Vec<u32> {
    let mut rng = SeededRng::new(seed);
    let mut text = String::new();
    while text.len() < n_tokens {
        let word_len = 2 + rng.below(7);
        for _ in 0..word_len {
            text.push((b'a' + rng.below(26) as u8) as char);
        }
        match rng.below(12) {
            0 => text.push_str(". "),
            1 => text.push_str(", "),
            2 => text.push('\n'),
            _ => text.push(' '),
        }
    }
    srlab_core::tokens::tokenize(&text)[..n_tokens].to_vec()
}
