//! Perplexity, calibration-vs-test gaps, and parameter accounting.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::model::{MatrixKind, Model, ModelConfig};
use crate::pruning::unit_kept_count;
use crate::recon::{ErrorTrace, ReconMethod};
use crate::tokens::TokenBatch;
use crate::{Error, Result};

/// exp of the mean next-token negative log-likelihood (natural log) over
/// all N * (T-1) predicted positions.
pub fn perplexity(model: &Model, data: &TokenBatch) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    if data.t() < 2 {
        return Err(Error::ShapeMismatch {
            op: "perplexity",
            detail: format!("need T >= 2 to predict next tokens, got T = {}", data.t()),
        });
    }
    let logits = model.forward_full(data)?;
    if !logits.is_all_finite() {
        return Err(Error::NonFinite { op: "perplexity" });
    }
    let v = model.config.vocab;
    let t = data.t();
    let mut nll_sum = 0.0f64;
    for row in 0..data.n() {
        let ids = data.row(row);
        for pos in 0..t - 1 {
            let target = ids[pos + 1] as usize;
            let pos_logits = &logits.data()[(row * t + pos) * v..(row * t + pos + 1) * v];
            let max = pos_logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let sum_exp: f64 = pos_logits.iter().map(|&l| libm::exp(l as f64 - max)).sum();
            let log_z = max + libm::log(sum_exp);
            nll_sum += log_z - pos_logits[target] as f64;
        }
    }
    let mean_nll = nll_sum / (data.n() * (t - 1)) as f64;
    Ok(libm::exp(mean_nll))
}

/// Per-block test-minus-calibration error differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneralizationGap {
    pub per_block: Vec<f64>,
    pub final_block: f64,
}

pub fn generalization_gap(trace: &ErrorTrace) -> GeneralizationGap {
    let per_block: Vec<f64> = trace
        .test
        .iter()
        .zip(&trace.calib)
        .map(|(t, c)| t - c)
        .collect();
    let final_block = *per_block.last().unwrap_or(&0.0);
    GeneralizationGap { per_block, final_block }
}

/// Parameters each method holds in the optimizer at once. LR touches one
/// layer's kept weights (the largest layer bounds it), BR one block, CR two
/// adjacent blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamAccounting {
    pub lr: u64,
    pub br: u64,
    pub br_gp: u64,
    pub br_gp_cr: u64,
}

impl ParamAccounting {
    pub fn compute(config: &ModelConfig, sparsity: f32) -> Self {
        let lr = MatrixKind::ALL
            .iter()
            .map(|k| {
                let [out, inp] = k.shape(config);
                unit_kept_count(out * inp, sparsity) as u64
            })
            .max()
            .unwrap_or(0);
        let br = config.block_param_count();
        let acc = Self { lr, br, br_gp: br, br_gp_cr: 2 * br };
        debug_assert!(acc.lr <= acc.br && acc.br == acc.br_gp && acc.br_gp < acc.br_gp_cr);
        acc
    }

    pub fn of(self, method: ReconMethod) -> u64 {
        match method {
            ReconMethod::None => 0,
            ReconMethod::Lr => self.lr,
            ReconMethod::Br => self.br,
            ReconMethod::BrGp => self.br_gp,
            ReconMethod::BrGpCr => self.br_gp_cr,
        }
    }

    pub fn as_map(self) -> BTreeMap<String, u64> {
        let mut m = BTreeMap::new();
        m.insert(String::from("none"), 0);
        m.insert(String::from("lr"), self.lr);
        m.insert(String::from("br"), self.br);
        m.insert(String::from("br_gp"), self.br_gp);
        m.insert(String::from("br_gp_cr"), self.br_gp_cr);
        m
    }
}

/// Provenance of a run, embedded in every report.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMeta {
    pub seed: u64,
    pub config_hash: String,
    pub method: String,
    pub pruner: String,
    pub sparsity: f32,
    pub calib_source: String,
    pub calib_size: usize,
}

/// One run's evaluation: perplexity per dataset, the error trace, and the
/// per-method optimized-parameter counts.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub run_meta: RunMeta,
    pub perplexity: BTreeMap<String, f64>,
    pub error_trace: ErrorTrace,
    pub param_counts: BTreeMap<String, u64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig, TransformerBlock};
    use crate::recon::TraceMeta;
    use crate::tensor::Tensor;
    use alloc::vec;

    fn toy_config() -> ModelConfig {
        ModelConfig {
            n_blocks: 2,
            hidden: 8,
            n_heads: 2,
            ffn_dim: 16,
            vocab: 258,
            max_seq: 12,
            eos_token_id: 256,
            bos_token_id: 257,
        }
    }

    /// A model whose logits are identically zero: uniform distribution.
    fn uniform_model() -> Model {
        let c = toy_config();
        let mut m = Model::init_random(c, 1).unwrap();
        m.head = Tensor::zeros(&[c.hidden, c.vocab]);
        m
    }

    #[test]
    fn uniform_logits_give_vocab_perplexity() {
        let m = uniform_model();
        let data = TokenBatch::new(2, 6, (0..12u32).collect()).unwrap();
        let ppl = perplexity(&m, &data).unwrap();
        assert!((ppl - 258.0).abs() < 1e-3, "got {ppl}");
    }

    #[test]
    fn duplicated_dataset_keeps_perplexity() {
        let c = toy_config();
        let m = Model::init_random(c, 7).unwrap();
        let ids: Vec<u32> = (0..12u32).map(|v| v * 3 % 250).collect();
        let once = TokenBatch::new(2, 6, ids.clone()).unwrap();
        let twice = TokenBatch::new(4, 6, [ids.clone(), ids].concat()).unwrap();
        let a = perplexity(&m, &once).unwrap();
        let b = perplexity(&m, &twice).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn perplexity_needs_two_positions() {
        let m = uniform_model();
        let data = TokenBatch::new(1, 1, vec![0]).unwrap();
        assert!(perplexity(&m, &data).is_err());
        let empty = TokenBatch::new(0, 4, vec![]).unwrap();
        assert!(matches!(perplexity(&m, &empty), Err(Error::EmptyCalibration)));
    }

    fn trace_with(calib: Vec<f64>, test: Vec<f64>) -> ErrorTrace {
        ErrorTrace {
            calib,
            test,
            logit_error: 0.0,
            meta: TraceMeta {
                pruner: String::from("magnitude"),
                method: String::from("none"),
                seed: 0,
                calib_source: String::from("corpus"),
            },
        }
    }

    #[test]
    fn gap_is_zero_when_test_equals_calib() {
        let tr = trace_with(vec![0.1, 0.2], vec![0.1, 0.2]);
        let gap = generalization_gap(&tr);
        assert_eq!(gap.per_block, vec![0.0, 0.0]);
        assert_eq!(gap.final_block, 0.0);
    }

    #[test]
    fn gap_signs_are_unconstrained() {
        let tr = trace_with(vec![0.1, 0.2], vec![0.05, 0.4]);
        let gap = generalization_gap(&tr);
        assert!(gap.per_block[0] < 0.0 && gap.per_block[1] > 0.0);
        assert!((gap.final_block - 0.2).abs() < 1e-12);
    }

    #[test]
    fn accounting_matches_hand_formula() {
        let c = ModelConfig {
            n_blocks: 4,
            hidden: 64,
            n_heads: 4,
            ffn_dim: 256,
            vocab: 258,
            max_seq: 64,
            eos_token_id: 256,
            bos_token_id: 257,
        };
        let acc = ParamAccounting::compute(&c, 0.5);
        // block: 4*(64*64+64) + (256*64+256) + (64*256+64) + 4*64
        let br = 4 * (64 * 64 + 64) + (256 * 64 + 256) + (64 * 256 + 64) + 4 * 64;
        assert_eq!(acc.br, br);
        assert_eq!(acc.br_gp, br);
        assert_eq!(acc.br_gp_cr, 2 * br);
        // largest matrix is 256x64 = 16384; half kept
        assert_eq!(acc.lr, 8192);
        assert!(acc.lr <= acc.br);

        // a sanity check that this is what one block's tensors sum to
        let block = TransformerBlock::zeros(&c);
        let tensor_sum: u64 = block.params().iter().map(|t| t.numel() as u64).sum();
        assert_eq!(tensor_sum, br);
    }

    #[test]
    fn accounting_ordering_holds_across_configs() {
        for (h, f, b) in [(8usize, 16usize, 2usize), (64, 256, 4), (16, 16, 3), (32, 128, 6)] {
            let c = ModelConfig {
                n_blocks: b,
                hidden: h,
                n_heads: 2,
                ffn_dim: f,
                vocab: 258,
                max_seq: 16,
                eos_token_id: 256,
                bos_token_id: 257,
            };
            for s in [0.0f32, 0.25, 0.5, 0.9, 1.0] {
                let acc = ParamAccounting::compute(&c, s);
                assert!(acc.lr <= acc.br, "lr <= br at s={s}");
                assert_eq!(acc.br, acc.br_gp);
                assert!(acc.br_gp < acc.br_gp_cr);
            }
        }
    }
}
