//! Calibration and test token sets: windows sampled from a corpus, or
//! sequences the dense model generates about itself (a seeded random first
//! token, four greedy continuations gated by a text filter, then stochastic
//! sampling until EOS).

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::model::Model;
use crate::rng::{derive_seed, SeededRng};
use crate::tokens::{detokenize, TokenBatch, VOCAB_SIZE};
use crate::{Error, Result};

pub const DEFAULT_RETRY_CAP: usize = 100;
pub const GREEDY_PREFIX_LEN: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CalibSource {
    Corpus,
    SelfGenerated,
    Mixed { ratio: f32 },
}

/// N sequences of fixed length T plus where they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    tokens: TokenBatch,
    source: CalibSource,
    seed: u64,
}

impl CalibrationSet {
    pub fn new(tokens: TokenBatch, source: CalibSource, seed: u64) -> Self {
        Self { tokens, source, seed }
    }

    pub fn tokens(&self) -> &TokenBatch {
        &self.tokens
    }

    pub fn source(&self) -> CalibSource {
        self.source
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n(&self) -> usize {
        self.tokens.n()
    }

    pub fn t(&self) -> usize {
        self.tokens.t()
    }

    pub fn source_name(&self) -> &'static str {
        match self.source {
            CalibSource::Corpus => "corpus",
            CalibSource::SelfGenerated => "self_generated",
            CalibSource::Mixed { .. } => "mixed",
        }
    }
}

/// Pure, named predicate over decoded text, applied to the greedy prefix of
/// self-generated sequences.
#[derive(Debug, Clone, PartialEq)]
pub enum GenerationFilter {
    /// Accept when at least `min` of the decoded characters are printable
    /// ASCII (graphic or space).
    PrintableRatio { min: f32 },
    AcceptAll,
    RejectAll,
}

impl Default for GenerationFilter {
    fn default() -> Self {
        GenerationFilter::PrintableRatio { min: 0.9 }
    }
}

impl GenerationFilter {
    pub fn name(&self) -> String {
        match self {
            GenerationFilter::PrintableRatio { min } => format!("printable_ratio>={min}"),
            GenerationFilter::AcceptAll => String::from("accept_all"),
            GenerationFilter::RejectAll => String::from("reject_all"),
        }
    }

    pub fn accept(&self, text: &str) -> bool {
        match self {
            GenerationFilter::AcceptAll => true,
            GenerationFilter::RejectAll => false,
            GenerationFilter::PrintableRatio { min } => {
                let total = text.chars().count();
                if total == 0 {
                    return false;
                }
                let printable = text.chars().filter(|c| c.is_ascii_graphic() || *c == ' ').count();
                printable as f32 >= min * total as f32
            }
        }
    }
}

/// Knobs of self-generation.
#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub count: usize,
    /// Maximum generated length before windowing.
    pub gen_len: usize,
    /// Window length of the emitted calibration sequences.
    pub window: usize,
    pub temperature: f32,
    /// Sample the stochastic phase greedily (the temperature -> 0 limit).
    pub greedy: bool,
    pub retry_cap: usize,
    pub seed: u64,
}

impl GenConfig {
    /// Defaults per the model: generate up to `max_seq`, window `window`.
    pub fn new(count: usize, window: usize, max_seq: usize, seed: u64) -> Self {
        Self {
            count,
            gen_len: max_seq,
            window,
            temperature: 1.0,
            greedy: false,
            retry_cap: DEFAULT_RETRY_CAP,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::InvalidConfig(String::from("generation count must be >= 1")));
        }
        if self.window > self.gen_len {
            return Err(Error::InvalidConfig(format!(
                "window {} exceeds generation length {}",
                self.window, self.gen_len
            )));
        }
        if self.window == 0 {
            return Err(Error::InvalidConfig(String::from("window must be >= 1")));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidConfig(format!("temperature {} must be > 0", self.temperature)));
        }
        Ok(())
    }
}

/// N seeded-uniform windows of length `t` from a tokenized corpus, sampled
/// with replacement.
pub fn sample_from_corpus(corpus: &[u32], n: usize, t: usize, seed: u64) -> Result<CalibrationSet> {
    if corpus.len() < t || t == 0 {
        return Err(Error::CorpusTooShort { corpus_len: corpus.len(), window: t });
    }
    if let Some(&bad) = corpus.iter().find(|&&id| id >= VOCAB_SIZE) {
        return Err(Error::TokenOutOfRange { id: bad, vocab: VOCAB_SIZE });
    }
    let mut rng = SeededRng::new(seed);
    let span = corpus.len() - t + 1;
    let mut ids = Vec::with_capacity(n * t);
    for _ in 0..n {
        let off = rng.below(span);
        ids.extend_from_slice(&corpus[off..off + t]);
    }
    Ok(CalibrationSet::new(TokenBatch::new(n, t, ids)?, CalibSource::Corpus, seed))
}

/// Logits of the model at the last position of a growing sequence.
fn last_logits(model: &Model, seq: &[u32]) -> Result<Vec<f32>> {
    let batch = TokenBatch::new(1, seq.len(), seq.to_vec())?;
    let logits = model.forward_full(&batch)?;
    let v = model.config.vocab;
    let last = &logits.data()[(seq.len() - 1) * v..seq.len() * v];
    Ok(last.to_vec())
}

/// Argmax over logits, ties to the smaller id; BOS is never produced.
fn greedy_pick(logits: &[f32], bos: u32) -> u32 {
    let mut best = u32::MAX;
    let mut best_v = f32::NEG_INFINITY;
    for (id, &v) in logits.iter().enumerate() {
        if id as u32 == bos {
            continue;
        }
        if v > best_v {
            best_v = v;
            best = id as u32;
        }
    }
    best
}

/// Temperature softmax multinomial over the logits; BOS is excluded.
fn sample_pick(logits: &[f32], temperature: f32, bos: u32, rng: &mut SeededRng) -> u32 {
    let scaled: Vec<f64> = logits.iter().map(|&v| v as f64 / temperature as f64).collect();
    let max = scaled
        .iter()
        .enumerate()
        .filter(|(id, _)| *id as u32 != bos)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled
        .iter()
        .enumerate()
        .map(|(id, &v)| if id as u32 == bos { 0.0 } else { libm::exp(v - max) })
        .collect();
    let total: f64 = weights.iter().sum();
    let u = rng.uniform_f64() * total;
    let mut cum = 0.0;
    for (id, &w) in weights.iter().enumerate() {
        cum += w;
        if u < cum {
            return id as u32;
        }
    }
    // Rounding fallthrough: take the last non-BOS id.
    (weights.len() - 1) as u32
}

/// Self-generate calibration sequences from the dense model.
///
/// Per sequence: a seeded-uniform initial token (never EOS/BOS), four greedy
/// continuations, filter check on the decoded prefix (rejection discards the
/// attempt and redraws, up to `retry_cap`), then stochastic sampling until
/// EOS or `gen_len`. Sequences longer than the window contribute a seeded
/// interior window that never includes position 0; shorter ones are
/// EOS-padded.
pub fn self_generate(
    model: &Model,
    cfg: &GenConfig,
    filter: &GenerationFilter,
) -> Result<CalibrationSet> {
    cfg.validate()?;
    if model.config.vocab != VOCAB_SIZE as usize {
        return Err(Error::InvalidConfig(format!(
            "self-generation expects the byte vocabulary {VOCAB_SIZE}, model has {}",
            model.config.vocab
        )));
    }
    if cfg.gen_len > model.config.max_seq {
        return Err(Error::InvalidConfig(format!(
            "gen_len {} exceeds model max_seq {}",
            cfg.gen_len, model.config.max_seq
        )));
    }
    let eos = model.config.eos_token_id;
    let bos = model.config.bos_token_id;
    let mut ids = Vec::with_capacity(cfg.count * cfg.window);
    for i in 0..cfg.count {
        let mut rng = SeededRng::new(derive_seed(cfg.seed, i as u64));
        let seq = generate_one(model, cfg, filter, eos, bos, &mut rng)?;
        debug_assert_eq!(seq.len(), cfg.window);
        ids.extend_from_slice(&seq);
    }
    Ok(CalibrationSet::new(
        TokenBatch::new(cfg.count, cfg.window, ids)?,
        CalibSource::SelfGenerated,
        cfg.seed,
    ))
}

fn generate_one(
    model: &Model,
    cfg: &GenConfig,
    filter: &GenerationFilter,
    eos: u32,
    bos: u32,
    rng: &mut SeededRng,
) -> Result<Vec<u32>> {
    // Greedy prefix behind the filter; rejection redraws the initial token.
    let mut seq: Vec<u32> = Vec::new();
    let mut accepted = false;
    for _ in 0..cfg.retry_cap {
        seq.clear();
        // Initial token is uniform over the byte ids (EOS/BOS excluded).
        seq.push(rng.below(256) as u32);
        while seq.len() < GREEDY_PREFIX_LEN.min(cfg.gen_len) {
            let logits = last_logits(model, &seq)?;
            seq.push(greedy_pick(&logits, bos));
        }
        if filter.accept(&detokenize(&seq)) {
            accepted = true;
            break;
        }
    }
    if !accepted {
        return Err(Error::GenerationRetryCap { filter: filter.name(), cap: cfg.retry_cap });
    }

    // Stochastic continuation until EOS or the length cap.
    while seq.len() < cfg.gen_len && seq.last() != Some(&eos) {
        let logits = last_logits(model, &seq)?;
        let next = if cfg.greedy {
            greedy_pick(&logits, bos)
        } else {
            sample_pick(&logits, cfg.temperature, bos, rng)
        };
        seq.push(next);
    }

    // Window selection / padding to the calibration length.
    if seq.len() > cfg.window {
        let offset = 1 + rng.below(seq.len() - cfg.window);
        Ok(seq[offset..offset + cfg.window].to_vec())
    } else {
        seq.resize(cfg.window, eos);
        Ok(seq)
    }
}

/// Concatenate `floor(ratio * base.n)` generated sequences (capped at what
/// is available) onto the base set and shuffle the order. Ratio 0 returns
/// the base unchanged.
pub fn augment(
    base: &CalibrationSet,
    generated: &CalibrationSet,
    ratio: f32,
    seed: u64,
) -> Result<CalibrationSet> {
    if ratio < 0.0 {
        return Err(Error::InvalidConfig(format!("mix ratio {ratio} < 0")));
    }
    if ratio == 0.0 {
        return Ok(base.clone());
    }
    if base.t() != generated.t() {
        return Err(Error::SeqLenMismatch { left: base.t(), right: generated.t() });
    }
    let take = (libm::floor(ratio as f64 * base.n() as f64) as usize).min(generated.n());
    let t = base.t();
    let total = base.n() + take;
    let mut rng = SeededRng::new(seed);
    let order = rng.permutation(total);
    let mut ids = Vec::with_capacity(total * t);
    for &slot in &order {
        let row = if slot < base.n() {
            base.tokens().row(slot)
        } else {
            generated.tokens().row(slot - base.n())
        };
        ids.extend_from_slice(row);
    }
    Ok(CalibrationSet::new(
        TokenBatch::new(total, t, ids)?,
        CalibSource::Mixed { ratio },
        seed,
    ))
}
