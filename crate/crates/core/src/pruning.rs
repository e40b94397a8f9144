//! Sparsity masks with exact kept counts. Scores come from weight magnitude
//! or magnitude times input-activation norm; masks are computed once on the
//! dense model and stay fixed through reconstruction.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::model::{MatrixKind, Model};
use crate::tensor::Tensor;
use crate::tokens::TokenBatch;
use crate::{Error, Result};

/// Sequences per forward chunk when accumulating activation statistics.
const NORM_CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PruneMethod {
    Magnitude,
    Wanda,
}

impl PruneMethod {
    pub fn name(self) -> &'static str {
        match self {
            PruneMethod::Magnitude => "magnitude",
            PruneMethod::Wanda => "wanda",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    PerMatrix,
    PerRow,
}

impl Granularity {
    pub fn name(self) -> &'static str {
        match self {
            Granularity::PerMatrix => "per_matrix",
            Granularity::PerRow => "per_row",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    All,
    AttentionOnly,
    FfnOnly,
}

impl Scope {
    pub fn name(self) -> &'static str {
        match self {
            Scope::All => "all",
            Scope::AttentionOnly => "attention_only",
            Scope::FfnOnly => "ffn_only",
        }
    }

    pub fn covers(self, kind: MatrixKind) -> bool {
        match self {
            Scope::All => true,
            Scope::AttentionOnly => kind.is_attention(),
            Scope::FfnOnly => !kind.is_attention(),
        }
    }
}

/// How to prune: method, target sparsity, unit granularity, scope.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrunerSpec {
    pub method: PruneMethod,
    pub sparsity: f32,
    pub granularity: Granularity,
    pub scope: Scope,
}

impl PrunerSpec {
    /// Default granularity follows the method convention: per-row for
    /// wanda, per-matrix for magnitude.
    pub fn new(method: PruneMethod, sparsity: f32) -> Self {
        let granularity = match method {
            PruneMethod::Magnitude => Granularity::PerMatrix,
            PruneMethod::Wanda => Granularity::PerRow,
        };
        Self { method, sparsity, granularity, scope: Scope::All }
    }

    pub fn with_granularity(mut self, granularity: Granularity) -> Self {
        self.granularity = granularity;
        self
    }

    pub fn with_scope(mut self, scope: Scope) -> Self {
        self.scope = scope;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.sparsity) {
            return Err(Error::InvalidConfig(format!("sparsity {} not in [0, 1]", self.sparsity)));
        }
        Ok(())
    }
}

/// Binary masks for the six prunable matrices of one block, in
/// [`MatrixKind::ALL`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockMask {
    pub masks: [Tensor; 6],
}

impl BlockMask {
    pub fn mask(&self, kind: MatrixKind) -> &Tensor {
        &self.masks[kind.index()]
    }

    /// Check that every pruned weight of one block is exactly zero.
    pub fn check_preserved(&self, block: &crate::model::TransformerBlock, block_idx: usize) -> Result<()> {
        for kind in MatrixKind::ALL {
            let w = block.matrix(kind);
            let m = self.mask(kind);
            for (i, (&wv, &mv)) in w.data().iter().zip(m.data()).enumerate() {
                if mv == 0.0 && wv != 0.0 {
                    return Err(Error::InvariantViolation(format!(
                        "pruned weight blocks.{block_idx}.{}[{i}] = {wv}, expected 0",
                        kind.name()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Fixed masks for every block, plus the spec that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsityMask {
    pub blocks: Vec<BlockMask>,
    pub spec: PrunerSpec,
}

/// Per-matrix L2 norms of each input feature over a calibration run.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationNorms {
    /// `blocks[b][kind.index()][j]` is the norm of input feature j.
    pub blocks: Vec<[Vec<f32>; 6]>,
}

/// Elements kept per unit at sparsity `s`: numel - floor(s * numel).
pub fn unit_kept_count(numel: usize, s: f32) -> usize {
    numel - libm::floor(s as f64 * numel as f64) as usize
}

/// Run the dense model over the calibration set and accumulate, for every
/// prunable matrix, the L2 norm of each input feature across all
/// (sequence, position) samples.
pub fn collect_activation_norms(model: &Model, calib: &TokenBatch) -> Result<ActivationNorms> {
    if calib.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let cfg = &model.config;
    let mut sums: Vec<[Vec<f64>; 6]> = (0..model.n_blocks())
        .map(|_| {
            core::array::from_fn(|k| vec![0.0f64; MatrixKind::ALL[k].shape(cfg)[1]])
        })
        .collect();

    let chunks: Vec<Vec<usize>> = (0..calib.n())
        .collect::<Vec<_>>()
        .chunks(NORM_CHUNK)
        .map(<[usize]>::to_vec)
        .collect();
    for chunk in chunks {
        let rows: Vec<u32> = chunk.iter().flat_map(|&i| calib.row(i).iter().copied()).collect();
        let batch = TokenBatch::new(chunk.len(), calib.t(), rows)?;
        let mut x = model.embed(&batch)?;
        for (bi, block) in model.blocks.iter().enumerate() {
            let (out, taps) = block.forward_with_taps(&x, cfg.n_heads)?;
            for kind in MatrixKind::ALL {
                let acts = taps.input_for(kind);
                let in_dim = kind.shape(cfg)[1];
                let sum = &mut sums[bi][kind.index()];
                for sample in acts.data().chunks(in_dim) {
                    for (s, &v) in sum.iter_mut().zip(sample) {
                        *s += (v as f64) * (v as f64);
                    }
                }
            }
            x = out;
        }
    }

    let blocks = sums
        .into_iter()
        .map(|per_kind| per_kind.map(|sum| sum.into_iter().map(|s| libm::sqrt(s) as f32).collect()))
        .collect();
    Ok(ActivationNorms { blocks })
}

/// Importance scores for one matrix. Wanda needs the input-feature norms;
/// magnitude ignores them.
pub fn score(matrix: &Tensor, method: PruneMethod, norms: Option<&[f32]>) -> Result<Tensor> {
    match method {
        PruneMethod::Magnitude => {
            let data = matrix.data().iter().map(|v| v.abs()).collect();
            Tensor::from_vec(matrix.shape(), data)
        }
        PruneMethod::Wanda => {
            let norms = norms.ok_or(Error::MissingNorms)?;
            let in_dim = matrix.shape()[matrix.rank() - 1];
            if norms.len() != in_dim {
                return Err(Error::ShapeMismatch {
                    op: "score",
                    detail: format!("{} norms for input dim {in_dim}", norms.len()),
                });
            }
            let data = matrix
                .data()
                .iter()
                .enumerate()
                .map(|(i, v)| v.abs() * norms[i % in_dim])
                .collect();
            Tensor::from_vec(matrix.shape(), data)
        }
    }
}

/// Top-k selection within each unit (whole matrix or each row): keep the
/// `numel - floor(s * numel)` highest scores; ties keep the smaller flat
/// index.
pub fn select_mask(scores: &Tensor, s: f32, granularity: Granularity) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::InvalidConfig(format!("sparsity {s} not in [0, 1]")));
    }
    let mut mask = Tensor::zeros(scores.shape());
    let unit = match granularity {
        Granularity::PerMatrix => scores.numel(),
        Granularity::PerRow => {
            if scores.rank() < 2 {
                return Err(Error::ShapeMismatch {
                    op: "select_mask",
                    detail: format!("per_row needs rank >= 2, got {:?}", scores.shape()),
                });
            }
            scores.shape()[scores.rank() - 1]
        }
    };
    let keep = unit_kept_count(unit, s);
    for (score_unit, mask_unit) in
        scores.data().chunks(unit).zip(mask.data_mut().chunks_mut(unit))
    {
        let mut idx: Vec<usize> = (0..unit).collect();
        idx.sort_unstable_by(|&a, &b| {
            score_unit[b].total_cmp(&score_unit[a]).then(a.cmp(&b))
        });
        for &i in idx.iter().take(keep) {
            mask_unit[i] = 1.0;
        }
    }
    Ok(mask)
}

/// Score and select masks for every prunable matrix of the model. Matrices
/// outside the scope receive all-ones masks.
pub fn compute_mask(
    model: &Model,
    spec: PrunerSpec,
    norms: Option<&ActivationNorms>,
) -> Result<SparsityMask> {
    spec.validate()?;
    if spec.method == PruneMethod::Wanda && norms.is_none() {
        return Err(Error::MissingNorms);
    }
    let mut blocks = Vec::with_capacity(model.n_blocks());
    for (bi, block) in model.blocks.iter().enumerate() {
        let mut masks: Vec<Tensor> = Vec::with_capacity(6);
        for kind in MatrixKind::ALL {
            let w = block.matrix(kind);
            if spec.scope.covers(kind) {
                let norm_slice = norms.map(|n| n.blocks[bi][kind.index()].as_slice());
                let scores = score(w, spec.method, norm_slice)?;
                masks.push(select_mask(&scores, spec.sparsity, spec.granularity)?);
            } else {
                masks.push(Tensor::full(w.shape(), 1.0));
            }
        }
        let masks: [Tensor; 6] = masks.try_into().expect("six masks per block");
        blocks.push(BlockMask { masks });
    }
    Ok(SparsityMask { blocks, spec })
}

/// Zero every weight whose mask entry is 0; kept weights are untouched
/// bit-for-bit. Idempotent.
pub fn apply_mask(model: &mut Model, mask: &SparsityMask) -> Result<()> {
    if mask.blocks.len() != model.blocks.len() {
        return Err(Error::ShapeMismatch {
            op: "apply_mask",
            detail: format!("{} mask blocks vs {} model blocks", mask.blocks.len(), model.blocks.len()),
        });
    }
    for (block, bm) in model.blocks.iter_mut().zip(&mask.blocks) {
        for kind in MatrixKind::ALL {
            let m = bm.mask(kind);
            let w = block.matrix_mut(kind);
            if m.shape() != w.shape() {
                return Err(Error::ShapeMismatch {
                    op: "apply_mask",
                    detail: format!("{}: {:?} vs {:?}", kind.name(), m.shape(), w.shape()),
                });
            }
            for (wv, &mv) in w.data_mut().iter_mut().zip(m.data()) {
                if mv == 0.0 {
                    *wv = 0.0;
                }
            }
        }
    }
    Ok(())
}

impl SparsityMask {
    /// Check the structural invariants: binary entries, exact kept counts
    /// per unit within scope, all-ones outside scope.
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        for (bi, bm) in self.blocks.iter().enumerate() {
            for kind in MatrixKind::ALL {
                let m = bm.mask(kind);
                if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                    return Err(Error::InvariantViolation(format!(
                        "mask blocks.{bi}.{} has non-binary entries",
                        kind.name()
                    )));
                }
                if !self.spec.scope.covers(kind) {
                    if m.data().iter().any(|&v| v != 1.0) {
                        return Err(Error::InvariantViolation(format!(
                            "out-of-scope mask blocks.{bi}.{} must be all ones",
                            kind.name()
                        )));
                    }
                    continue;
                }
                let unit = match self.spec.granularity {
                    Granularity::PerMatrix => m.numel(),
                    Granularity::PerRow => m.shape()[m.rank() - 1],
                };
                let keep = unit_kept_count(unit, self.spec.sparsity);
                for (ui, chunk) in m.data().chunks(unit).enumerate() {
                    let kept = chunk.iter().filter(|&&v| v == 1.0).count();
                    if kept != keep {
                        return Err(Error::InvariantViolation(format!(
                            "mask blocks.{bi}.{} unit {ui} keeps {kept}, expected {keep}",
                            kind.name()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Check that every pruned weight of the model is exactly zero.
    pub fn check_preserved(&self, model: &Model) -> Result<()> {
        for (bi, (block, bm)) in model.blocks.iter().zip(&self.blocks).enumerate() {
            bm.check_preserved(block, bi)?;
        }
        Ok(())
    }

    /// Mask tensor name for the container format.
    pub fn tensor_name(block: usize, kind: MatrixKind) -> String {
        format!("blocks.{block}.{}.mask", kind.name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, data: &[f32]) -> Tensor {
        Tensor::from_vec(&[rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn magnitude_scores_are_absolute_values() {
        let w = t2(2, 2, &[0.1, -0.5, 0.3, 0.2]);
        let s = score(&w, PruneMethod::Magnitude, None).unwrap();
        assert_eq!(s.data(), &[0.1, 0.5, 0.3, 0.2]);
    }

    #[test]
    fn wanda_scores_scale_by_input_norms() {
        let w = t2(2, 2, &[0.1, -0.5, 0.3, 0.2]);
        let s = score(&w, PruneMethod::Wanda, Some(&[2.0, 1.0])).unwrap();
        let expect = [0.2, 0.5, 0.6, 0.2];
        for (got, want) in s.data().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-7);
        }
    }

    #[test]
    fn wanda_requires_norms() {
        let w = t2(2, 2, &[0.1, -0.5, 0.3, 0.2]);
        assert!(matches!(score(&w, PruneMethod::Wanda, None), Err(Error::MissingNorms)));
    }

    #[test]
    fn zero_norms_give_zero_scores() {
        let w = t2(2, 2, &[0.1, -0.5, 0.3, 0.2]);
        let s = score(&w, PruneMethod::Wanda, Some(&[0.0, 0.0])).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn select_mask_zero_sparsity_keeps_all() {
        let s = t2(2, 2, &[0.1, 0.5, 0.3, 0.2]);
        let m = select_mask(&s, 0.0, Granularity::PerMatrix).unwrap();
        assert!(m.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn select_mask_half_per_matrix() {
        let s = t2(2, 2, &[0.1, 0.5, 0.3, 0.2]);
        let m = select_mask(&s, 0.5, Granularity::PerMatrix).unwrap();
        assert_eq!(m.data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn select_mask_row_ties_keep_lower_index() {
        let s = t2(2, 2, &[0.7, 0.7, 0.0, 0.0]);
        let m = select_mask(&s, 0.5, Granularity::PerRow).unwrap();
        assert_eq!(m.data(), &[1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn kept_count_uses_floor() {
        assert_eq!(unit_kept_count(10, 0.5), 5);
        assert_eq!(unit_kept_count(5, 0.5), 3); // floor(2.5) pruned
        assert_eq!(unit_kept_count(4, 0.0), 4);
        assert_eq!(unit_kept_count(4, 1.0), 0);
    }

    #[test]
    fn apply_mask_is_idempotent_and_exact() {
        use crate::model::ModelConfig;
        let config = ModelConfig {
            n_blocks: 2,
            hidden: 8,
            n_heads: 2,
            ffn_dim: 16,
            vocab: 258,
            max_seq: 12,
            eos_token_id: 256,
            bos_token_id: 257,
        };
        let dense = Model::init_random(config, 40).unwrap();
        let spec = PrunerSpec::new(PruneMethod::Magnitude, 0.5);
        let mask = compute_mask(&dense, spec, None).unwrap();
        mask.validate().unwrap();

        let mut pruned = dense.clone();
        apply_mask(&mut pruned, &mask).unwrap();
        mask.check_preserved(&pruned).unwrap();
        for (block, bm) in pruned.blocks.iter().zip(&mask.blocks) {
            for kind in MatrixKind::ALL {
                let zeros = block.matrix(kind).data().iter().filter(|&&v| v == 0.0).count();
                let numel = block.matrix(kind).numel();
                assert!(zeros >= numel - unit_kept_count(numel, 0.5));
            }
        }
        let once = pruned.clone();
        apply_mask(&mut pruned, &mask).unwrap();
        assert!(once == pruned);

        // all-ones mask leaves the model untouched
        let identity = compute_mask(&dense, PrunerSpec::new(PruneMethod::Magnitude, 0.0), None).unwrap();
        let mut same = dense.clone();
        apply_mask(&mut same, &identity).unwrap();
        for ((_, a), (_, b)) in same.named_tensors().iter().zip(dense.named_tensors()) {
            assert!(a.bit_eq(b));
        }
    }

    #[test]
    fn scope_leaves_out_of_scope_all_ones() {
        use crate::model::ModelConfig;
        let config = ModelConfig {
            n_blocks: 1,
            hidden: 8,
            n_heads: 2,
            ffn_dim: 16,
            vocab: 258,
            max_seq: 12,
            eos_token_id: 256,
            bos_token_id: 257,
        };
        let dense = Model::init_random(config, 4).unwrap();
        let spec = PrunerSpec::new(PruneMethod::Magnitude, 0.5).with_scope(Scope::AttentionOnly);
        let mask = compute_mask(&dense, spec, None).unwrap();
        mask.validate().unwrap();
        assert!(mask.blocks[0].mask(MatrixKind::W1).data().iter().all(|&v| v == 1.0));
        assert!(mask.blocks[0].mask(MatrixKind::W2).data().iter().all(|&v| v == 1.0));
        assert!(mask.blocks[0].mask(MatrixKind::WQ).data().iter().any(|&v| v == 0.0));

        let spec = PrunerSpec::new(PruneMethod::Magnitude, 0.5).with_scope(Scope::FfnOnly);
        let mask = compute_mask(&dense, spec, None).unwrap();
        for kind in [MatrixKind::WQ, MatrixKind::WK, MatrixKind::WV, MatrixKind::WO] {
            assert!(mask.blocks[0].mask(kind).data().iter().all(|&v| v == 1.0));
        }
    }
}
