//! Blockwise attention and feedforward.
//!
//! Attention is computed one key-value block at a time with a running-max
//! softmax: the carry holds an unnormalized numerator, the denominator, and
//! the running row maximum, and every block rescales the accumulated state by
//! `exp(old_max - new_max)` before folding in its own exponentials. The
//! result is exact, not approximate; only the evaluation order differs from
//! the materialized softmax.
//!
//! Masking is additive. Causal structure is decided per block pair: fully
//! visible pairs need no bias, partially masked pairs get a bias tensor, and
//! fully masked pairs can be skipped because every contribution they would
//! make underflows to exactly zero. The carry's denominator is one column per
//! query row; some published formulations initialize it at head width as a
//! broadcast convenience, which is mathematically identical.

use std::ops::Range;

use crate::error::Error;
use crate::layer::{self, Strategy};
use crate::partition::BlockPartition;
use crate::reference::{self, AttentionParams, FfnParams};
use crate::tensor::{Element, Tensor};
use crate::trace;
use crate::Result;

/// How the engine treats mask structure. The fault switch exists so
/// verification suites can prove they detect a corrupted rescaling; it negates
/// the correction factor and must make every equivalence check fail.
#[derive(Clone, Copy, Debug)]
pub struct ScanPolicy {
    /// Skip fully masked key-value blocks entirely.
    pub skip_fully_masked: bool,
    #[doc(hidden)]
    pub self_test_negate_correction: bool,
}

impl Default for ScanPolicy {
    fn default() -> Self {
        ScanPolicy {
            skip_fully_masked: true,
            self_test_negate_correction: false,
        }
    }
}

/// Visibility of one (query block, key-value block) pair under the causal
/// mask, with the bias tensor materialized only when mixed.
#[derive(Debug)]
pub enum ChunkBias<T: Element = f64> {
    /// Every key position is visible to every query position.
    FullyVisible,
    /// Mixed visibility; additive bias of 0 / mask-constant entries.
    PartiallyMasked(Tensor<T>),
    /// No key position is visible.
    FullyMasked,
}

impl<T: Element> ChunkBias<T> {
    pub fn is_fully_masked(&self) -> bool {
        matches!(self, ChunkBias::FullyMasked)
    }
}

/// Causal bias for query block `qi` against key-value block `ki`. Query row p
/// of the block sits at absolute position `qi*c_q + p` and sees keys at
/// positions up to and including its own.
pub fn chunk_bias<T: Element>(
    qi: usize,
    ki: usize,
    part: &BlockPartition,
) -> Result<ChunkBias<T>> {
    let (c_q, c_kv) = (part.c_q(), part.c_kv());
    let first_q = qi * c_q;
    let last_q = first_q + c_q - 1;
    let first_k = ki * c_kv;
    let last_k = first_k + c_kv - 1;
    if first_k > last_q {
        return Ok(ChunkBias::FullyMasked);
    }
    if last_k <= first_q {
        return Ok(ChunkBias::FullyVisible);
    }
    let mut data = vec![T::zero(); c_q * c_kv];
    for p in 0..c_q {
        for r in 0..c_kv {
            if first_k + r > first_q + p {
                data[p * c_kv + r] = T::MASK_NEG;
            }
        }
    }
    Ok(ChunkBias::PartiallyMasked(Tensor::from_vec(
        &[c_q, c_kv],
        data,
    )?))
}

/// Running state of one query block's softmax over the key-value blocks seen
/// so far.
#[derive(Debug)]
pub struct AttentionCarry<T: Element = f64> {
    /// Unnormalized weighted values, [c_q x d].
    pub numerator: Tensor<T>,
    /// Sum of exponentials, [c_q x 1].
    pub denominator: Tensor<T>,
    /// Running row maximum, [c_q x 1]; negative infinity before any block.
    pub max_score: Tensor<T>,
}

impl<T: Element> AttentionCarry<T> {
    pub fn init(c_q: usize, d: usize) -> Result<Self> {
        let _s = trace::scope("attn_carry");
        Ok(AttentionCarry {
            numerator: Tensor::zeros(&[c_q, d])?,
            denominator: Tensor::zeros(&[c_q, 1])?,
            max_score: Tensor::full(&[c_q, 1], T::neg_infinity())?,
        })
    }
}

/// Rescaling factor `exp(old - new)` per row, defined as exactly zero where
/// the old maximum is still the negative-infinity initial value. The running
/// maximum never decreases, so the factor is in [0, 1].
fn correction<T: Element>(old_max: &Tensor<T>, new_max: &Tensor<T>) -> Result<Tensor<T>> {
    let data = old_max
        .data()
        .iter()
        .zip(new_max.data())
        .map(|(&o, &n)| {
            if o == T::neg_infinity() {
                T::zero()
            } else {
                (o - n).exp()
            }
        })
        .collect();
    Tensor::from_vec(old_max.shape(), data)
}

/// Folds one key-value block into the carry. `q_scaled` is the query block
/// already multiplied by 1/sqrt(d); the query is scaled once per block, not
/// once per score. Processing a fully masked block is a no-op by arithmetic
/// (every exponential underflows to zero against a real running maximum);
/// skipping such blocks is the caller's job.
pub fn scan_kv_block<T: Element>(
    carry: AttentionCarry<T>,
    q_scaled: &Tensor<T>,
    k_block: &Tensor<T>,
    v_block: &Tensor<T>,
    bias: &ChunkBias<T>,
    policy: &ScanPolicy,
) -> Result<AttentionCarry<T>> {
    let _s = trace::scope("attn_block");
    let mut scores = q_scaled.matmul_nt(k_block)?;
    match bias {
        ChunkBias::FullyVisible => {}
        ChunkBias::PartiallyMasked(b) => scores = scores.add(b)?,
        ChunkBias::FullyMasked => scores = scores.add_scalar(T::MASK_NEG)?,
    }
    let new_max = carry.max_score.max_elem(&scores.rowmax()?)?;
    let mut corr = correction(&carry.max_score, &new_max)?;
    if policy.self_test_negate_correction {
        corr = corr.scale(-T::one())?;
    }
    let weights = scores.sub_broadcast_col(&new_max)?.exp()?;
    drop(scores);
    let numerator = carry
        .numerator
        .mul_broadcast_col(&corr)?
        .add(&weights.matmul(v_block)?)?;
    let denominator = carry
        .denominator
        .mul_broadcast_col(&corr)?
        .add(&weights.rowsum()?)?;
    Ok(AttentionCarry {
        numerator,
        denominator,
        max_score: new_max,
    })
}

/// Normalizes a finished carry into the attention output for its query block.
/// A zero denominator means every key the block ever saw was masked.
// `!(d > 0)` rather than `d <= 0`: a NaN denominator must also trip it.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn finalize<T: Element>(carry: AttentionCarry<T>) -> Result<Tensor<T>> {
    for (row, &d) in carry.denominator.data().iter().enumerate() {
        if !(d > T::zero()) {
            return Err(Error::FullyMaskedRow { row });
        }
    }
    carry.numerator.div_broadcast_col(&carry.denominator)
}

/// Exact attention over key-value blocks; single head, output [s x d].
pub fn blockwise_attention<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    part: &BlockPartition,
    causal: bool,
) -> Result<Tensor<T>> {
    blockwise_attention_with(q, k, v, part, causal, &ScanPolicy::default())
        .map(|(out, _, _)| out)
}

/// As [`blockwise_attention`], returning the per-row softmax denominator and
/// running maximum ([s x 1] each) that a rematerializing backward pass needs.
// `!(d > 0)` rather than `d <= 0`: a NaN denominator must also trip it.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn blockwise_attention_with<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    part: &BlockPartition,
    causal: bool,
    policy: &ScanPolicy,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let s = part.seq_len();
    let d = q.cols();
    if q.rows() != s || k.rows() != s || v.rows() != s || k.cols() != d || v.cols() != d {
        return Err(Error::shape(
            "blockwise_attention",
            format!(
                "q {:?}, k {:?}, v {:?} for sequence length {s}",
                q.shape(),
                k.shape(),
                v.shape()
            ),
        ));
    }
    let inv_sqrt_d = T::of_f64(1.0 / (d as f64).sqrt());
    let q_scaled = q.scale(inv_sqrt_d)?;
    let mut outs = Vec::with_capacity(part.n_q_blocks());
    let mut dens = Vec::with_capacity(part.n_q_blocks());
    let mut maxes = Vec::with_capacity(part.n_q_blocks());
    for qi in 0..part.n_q_blocks() {
        let qr = part.q_range(qi);
        let q_i = q_scaled.row_block(qr.start, part.c_q())?;
        let mut carry = AttentionCarry::init(part.c_q(), d)?;
        for ki in 0..part.n_kv_blocks() {
            let bias = if causal {
                chunk_bias::<T>(qi, ki, part)?
            } else {
                ChunkBias::FullyVisible
            };
            if bias.is_fully_masked() && policy.skip_fully_masked {
                continue;
            }
            let kr = part.kv_range(ki);
            let k_j = k.row_block(kr.start, part.c_kv())?;
            let v_j = v.row_block(kr.start, part.c_kv())?;
            carry = scan_kv_block(carry, &q_i, &k_j, &v_j, &bias, policy)?;
        }
        let AttentionCarry {
            numerator,
            denominator,
            max_score,
        } = carry;
        for (row, &dval) in denominator.data().iter().enumerate() {
            if !(dval > T::zero()) {
                return Err(Error::FullyMaskedRow {
                    row: qr.start + row,
                });
            }
        }
        outs.push(numerator.div_broadcast_col(&denominator)?);
        dens.push(denominator);
        maxes.push(max_score);
    }
    Ok((
        Tensor::concat_rows(&outs)?,
        Tensor::concat_rows(&dens)?,
        Tensor::concat_rows(&maxes)?,
    ))
}

/// Feedforward evaluated `chunk` rows at a time; only one chunk's
/// intermediates are ever live. Row-identical arithmetic makes the result
/// equal to the dense feedforward elementwise, with no tolerance.
pub fn blockwise_ffn<T: Element>(
    x: &Tensor<T>,
    params: &FfnParams<T>,
    chunk: usize,
) -> Result<Tensor<T>> {
    let s = x.rows();
    if chunk == 0 || !s.is_multiple_of(chunk) {
        return Err(Error::Partition { len: s, block: chunk });
    }
    let mut parts = Vec::with_capacity(s / chunk);
    for i in 0..s / chunk {
        let x_i = x.row_block(i * chunk, chunk)?;
        parts.push(reference::ffn(&x_i, params)?);
    }
    Tensor::concat_rows(&parts)
}

/// One fused transformer block computed per query block: attention streams
/// key-value blocks, and the feedforward plus both residuals are applied to
/// each query block before the next one starts. Equals
/// [`reference::reference_block`] up to floating-point reassociation.
pub fn bpt_block<T: Element>(
    x: &Tensor<T>,
    attn: &AttentionParams<T>,
    ffn: &FfnParams<T>,
    part: &BlockPartition,
    causal: bool,
) -> Result<Tensor<T>> {
    let p = layer::LayerRef {
        attn,
        ffn,
        norm: None,
    };
    Ok(layer::layer_forward(Strategy::Bpt, x, p, part, causal, false)?.0)
}

/// Gradients of a scalar loss through [`bpt_block`], rematerializing
/// attention per (query block, key-value block) pair and the feedforward per
/// chunk.
pub fn bpt_backward<T: Element>(
    x: &Tensor<T>,
    attn: &AttentionParams<T>,
    ffn: &FfnParams<T>,
    part: &BlockPartition,
    causal: bool,
    upstream: &Tensor<T>,
) -> Result<layer::BlockGrads<T>> {
    layer::block_backward(Strategy::Bpt, x, attn, ffn, part, causal, upstream)
}

/// Mean cross-entropy where logits are produced one chunk of rows at a time,
/// so the full [s x vocab] matrix never exists. Row losses accumulate in one
/// left-to-right sum, making the result bitwise identical for every chunk
/// size, including the dense `chunk = s` case.
pub fn blockwise_cross_entropy<T, F>(
    targets: &[usize],
    chunk: usize,
    mut logits_chunk: F,
) -> Result<T>
where
    T: Element,
    F: FnMut(Range<usize>) -> Result<Tensor<T>>,
{
    let n = targets.len();
    if n == 0 || chunk == 0 {
        return Err(Error::shape(
            "blockwise_cross_entropy",
            format!("{n} targets, chunk {chunk}"),
        ));
    }
    let mut acc = T::zero();
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let logits = logits_chunk(start..end)?;
        if logits.rows() != end - start {
            return Err(Error::shape(
                "blockwise_cross_entropy",
                format!("chunk {start}..{end} produced {} rows", logits.rows()),
            ));
        }
        for (i, &t) in targets[start..end].iter().enumerate() {
            acc += reference::ce_row_loss(logits.row(i), t, start + i)?;
        }
        start = end;
    }
    Ok(acc / T::of_f64(n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::{causal_mask, cross_entropy, ffn, vanilla_attention};
    use crate::rng::seeded_normal;
    use proptest::prelude::*;

    fn qkv(s: usize, d: usize, seed: u64) -> (Tensor, Tensor, Tensor) {
        (
            seeded_normal(&[s, d], seed * 100 + 1, 1.0).unwrap(),
            seeded_normal(&[s, d], seed * 100 + 2, 1.0).unwrap(),
            seeded_normal(&[s, d], seed * 100 + 3, 1.0).unwrap(),
        )
    }

    #[test]
    fn single_block_partition_matches_vanilla() {
        let (s, d) = (8, 4);
        let (q, k, v) = qkv(s, d, 1);
        let part = BlockPartition::new(s, s, s).unwrap();
        for causal in [false, true] {
            let got = blockwise_attention(&q, &k, &v, &part, causal).unwrap();
            let mask = causal.then(|| causal_mask::<f64>(s).unwrap());
            let want = vanilla_attention(&q, &k, &v, mask.as_ref()).unwrap();
            assert!(
                got.max_abs_diff(&want).unwrap() < 1e-15,
                "causal {causal}"
            );
        }
    }

    #[test]
    fn all_divisor_partitions_match_vanilla() {
        let (s, d) = (16, 4);
        let (q, k, v) = qkv(s, d, 2);
        let mask = causal_mask::<f64>(s).unwrap();
        let want_causal = vanilla_attention(&q, &k, &v, Some(&mask)).unwrap();
        let want_open = vanilla_attention(&q, &k, &v, None).unwrap();
        for c_q in [1usize, 2, 4, 8, 16] {
            for c_kv in [1usize, 2, 4, 8, 16] {
                let part = BlockPartition::new(s, c_q, c_kv).unwrap();
                let causal = blockwise_attention(&q, &k, &v, &part, true).unwrap();
                let open = blockwise_attention(&q, &k, &v, &part, false).unwrap();
                assert!(
                    causal.max_abs_diff(&want_causal).unwrap() < 1e-12,
                    "causal c_q={c_q} c_kv={c_kv}"
                );
                assert!(
                    open.max_abs_diff(&want_open).unwrap() < 1e-12,
                    "open c_q={c_q} c_kv={c_kv}"
                );
            }
        }
    }

    #[test]
    fn chunk_bias_classification_and_values_match_causal_mask() {
        let s = 12;
        let part = BlockPartition::new(s, 3, 4).unwrap();
        let mask = causal_mask::<f64>(s).unwrap();
        for qi in 0..part.n_q_blocks() {
            for ki in 0..part.n_kv_blocks() {
                let bias = chunk_bias::<f64>(qi, ki, &part).unwrap();
                let qr = part.q_range(qi);
                let kr = part.kv_range(ki);
                let mut visible = 0;
                let mut masked = 0;
                for p in qr.clone() {
                    for r in kr.clone() {
                        if mask.get(p, r) == 0.0 {
                            visible += 1;
                        } else {
                            masked += 1;
                        }
                    }
                }
                match bias {
                    ChunkBias::FullyVisible => assert_eq!(masked, 0, "({qi},{ki})"),
                    ChunkBias::FullyMasked => assert_eq!(visible, 0, "({qi},{ki})"),
                    ChunkBias::PartiallyMasked(b) => {
                        assert!(visible > 0 && masked > 0, "({qi},{ki})");
                        for (p_idx, p) in qr.clone().enumerate() {
                            for (r_idx, r) in kr.clone().enumerate() {
                                assert_eq!(
                                    b.get(p_idx, r_idx),
                                    mask.get(p, r),
                                    "bias ({qi},{ki}) entry ({p_idx},{r_idx})"
                                );
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn chunk_bias_handles_unequal_block_sizes() {
        // c_q = 4, c_kv = 2: kv block 3 (keys 6..8) against query block 1
        // (queries 4..8) is mixed; kv block 0 (keys 0..2) against query
        // block 1 is fully visible; kv block 3 against query block 0
        // (queries 0..4) is fully masked.
        let part = BlockPartition::new(8, 4, 2).unwrap();
        assert!(matches!(
            chunk_bias::<f64>(1, 3, &part).unwrap(),
            ChunkBias::PartiallyMasked(_)
        ));
        assert!(matches!(
            chunk_bias::<f64>(1, 0, &part).unwrap(),
            ChunkBias::FullyVisible
        ));
        assert!(matches!(
            chunk_bias::<f64>(0, 3, &part).unwrap(),
            ChunkBias::FullyMasked
        ));
    }

    #[test]
    fn skipping_fully_masked_blocks_is_bitwise_neutral() {
        let (s, d) = (16, 4);
        let (q, k, v) = qkv(s, d, 3);
        for (c_q, c_kv) in [(2usize, 2usize), (4, 2), (2, 4), (8, 4)] {
            let part = BlockPartition::new(s, c_q, c_kv).unwrap();
            let skip = ScanPolicy {
                skip_fully_masked: true,
                ..ScanPolicy::default()
            };
            let no_skip = ScanPolicy {
                skip_fully_masked: false,
                ..ScanPolicy::default()
            };
            let (a, da, ma) = blockwise_attention_with(&q, &k, &v, &part, true, &skip).unwrap();
            let (b, db, mb) = blockwise_attention_with(&q, &k, &v, &part, true, &no_skip).unwrap();
            assert!(a.bitwise_eq(&b), "output c_q={c_q} c_kv={c_kv}");
            assert!(da.bitwise_eq(&db), "denominator c_q={c_q} c_kv={c_kv}");
            assert!(ma.bitwise_eq(&mb), "max c_q={c_q} c_kv={c_kv}");
        }
    }

    #[test]
    fn fully_masked_scan_after_a_real_block_leaves_carry_bitwise_unchanged() {
        let (c, d) = (4, 3);
        let q = seeded_normal::<f64>(&[c, d], 40, 1.0).unwrap();
        let k0 = seeded_normal::<f64>(&[c, d], 41, 1.0).unwrap();
        let v0 = seeded_normal::<f64>(&[c, d], 42, 1.0).unwrap();
        let policy = ScanPolicy::default();
        let carry = AttentionCarry::init(c, d).unwrap();
        let carry = scan_kv_block(carry, &q, &k0, &v0, &ChunkBias::FullyVisible, &policy).unwrap();
        let num_before = carry.numerator.duplicate().unwrap();
        let den_before = carry.denominator.duplicate().unwrap();
        let max_before = carry.max_score.duplicate().unwrap();
        let k1 = seeded_normal::<f64>(&[c, d], 43, 1.0).unwrap();
        let v1 = seeded_normal::<f64>(&[c, d], 44, 1.0).unwrap();
        let carry = scan_kv_block(carry, &q, &k1, &v1, &ChunkBias::FullyMasked, &policy).unwrap();
        assert!(carry.numerator.bitwise_eq(&num_before));
        assert!(carry.denominator.bitwise_eq(&den_before));
        assert!(carry.max_score.bitwise_eq(&max_before));
    }

    #[test]
    fn prefix_of_kv_blocks_equals_attention_over_prefix() {
        let (s, d) = (16, 4);
        let (q, k, v) = qkv(s, d, 5);
        let part = BlockPartition::new(s, 4, 4).unwrap();
        let inv = 1.0 / (d as f64).sqrt();
        let q_scaled = q.scale(inv).unwrap();
        let policy = ScanPolicy::default();
        let q_0 = q_scaled.row_block(0, 4).unwrap();
        let mut carry = AttentionCarry::init(4, d).unwrap();
        for j in 0..part.n_kv_blocks() {
            let kr = part.kv_range(j);
            let k_j = k.row_block(kr.start, 4).unwrap();
            let v_j = v.row_block(kr.start, 4).unwrap();
            carry = scan_kv_block(carry, &q_0, &k_j, &v_j, &ChunkBias::FullyVisible, &policy)
                .unwrap();
            // After j+1 blocks the carry must equal full attention restricted
            // to the keys seen so far.
            let seen = (j + 1) * 4;
            let out = finalize(AttentionCarry {
                numerator: carry.numerator.duplicate().unwrap(),
                denominator: carry.denominator.duplicate().unwrap(),
                max_score: carry.max_score.duplicate().unwrap(),
            })
            .unwrap();
            let q_rows = q.row_block(0, 4).unwrap();
            let k_seen = k.row_block(0, seen).unwrap();
            let v_seen = v.row_block(0, seen).unwrap();
            let want = vanilla_attention(&q_rows, &k_seen, &v_seen, None).unwrap();
            assert!(
                out.max_abs_diff(&want).unwrap() < 1e-13,
                "prefix of {seen} keys"
            );
        }
    }

    #[test]
    fn kv_block_visit_order_is_irrelevant_without_masking() {
        let (s, d) = (16, 4);
        let (q, k, v) = qkv(s, d, 6);
        let part = BlockPartition::new(s, 4, 4).unwrap();
        let inv = 1.0 / (d as f64).sqrt();
        let q_scaled = q.scale(inv).unwrap();
        let policy = ScanPolicy::default();
        let orders: [&[usize]; 3] = [&[0, 1, 2, 3], &[3, 2, 1, 0], &[2, 0, 3, 1]];
        let mut results = Vec::new();
        for order in orders {
            let mut blocks = Vec::new();
            for qi in 0..part.n_q_blocks() {
                let q_i = q_scaled.row_block(part.q_range(qi).start, 4).unwrap();
                let mut carry = AttentionCarry::init(4, d).unwrap();
                for &j in order {
                    let kr = part.kv_range(j);
                    let k_j = k.row_block(kr.start, 4).unwrap();
                    let v_j = v.row_block(kr.start, 4).unwrap();
                    carry =
                        scan_kv_block(carry, &q_i, &k_j, &v_j, &ChunkBias::FullyVisible, &policy)
                            .unwrap();
                }
                blocks.push(finalize(carry).unwrap());
            }
            results.push(Tensor::concat_rows(&blocks).unwrap());
        }
        for r in &results[1..] {
            assert!(results[0].max_abs_diff(r).unwrap() < 1e-13);
        }
    }

    #[test]
    fn negated_correction_fault_breaks_equivalence() {
        let (s, d) = (16, 4);
        let (q, k, v) = qkv(s, d, 7);
        let part = BlockPartition::new(s, 4, 4).unwrap();
        let faulty = ScanPolicy {
            self_test_negate_correction: true,
            ..ScanPolicy::default()
        };
        // A negated correction either corrupts the output or drives a
        // denominator non-positive; both must be loud.
        match blockwise_attention_with(&q, &k, &v, &part, false, &faulty) {
            Ok((got, _, _)) => {
                let want = vanilla_attention(&q, &k, &v, None).unwrap();
                assert!(
                    got.max_abs_diff(&want).unwrap() > 1e-6,
                    "fault injection must be detectable"
                );
            }
            Err(Error::FullyMaskedRow { .. }) => {}
            Err(e) => panic!("unexpected failure mode: {e}"),
        }
    }

    #[test]
    fn blockwise_ffn_equals_dense_ffn_exactly() {
        let (s, h) = (12, 6);
        let x = seeded_normal::<f64>(&[s, h], 8, 1.0).unwrap();
        let params = FfnParams::seeded(h, 4 * h, 9, 0.5, 0.5).unwrap();
        let want = ffn(&x, &params).unwrap();
        for chunk in [1usize, 2, 3, 4, 6, 12] {
            let got = blockwise_ffn(&x, &params, chunk).unwrap();
            assert!(got.bitwise_eq(&want), "chunk {chunk}");
        }
        assert!(matches!(
            blockwise_ffn(&x, &params, 5),
            Err(Error::Partition { .. })
        ));
    }

    #[test]
    fn blockwise_cross_entropy_is_chunk_invariant() {
        let (s, vocab) = (12, 17);
        let logits = seeded_normal::<f64>(&[s, vocab], 10, 2.0).unwrap();
        let targets: Vec<usize> = (0..s).map(|i| (i * 5) % vocab).collect();
        let want = cross_entropy(&logits, &targets).unwrap();
        for chunk in [1usize, 2, 3, 4, 5, 6, 12, 64] {
            let got = blockwise_cross_entropy(&targets, chunk, |range| {
                logits.row_block(range.start, range.len())
            })
            .unwrap();
            assert_eq!(
                got.to_bits(),
                want.to_bits(),
                "chunk {chunk}: {got} vs {want}"
            );
        }
    }

    #[test]
    fn blockwise_cross_entropy_uniform_is_log_vocab() {
        let vocab = 256;
        let targets = vec![7usize; 10];
        let got = blockwise_cross_entropy(&targets, 4, |range| {
            Tensor::full(&[range.len(), vocab], 0.0)
        })
        .unwrap();
        assert!((got - (vocab as f64).ln()).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn blockwise_matches_vanilla_on_random_partitions(
            seed in 1u64..500,
            c_q_pow in 0u32..4,
            c_kv_pow in 0u32..4,
            causal in proptest::bool::ANY,
        ) {
            let s = 8usize;
            let d = 4usize;
            let (q, k, v) = qkv(s, d, seed);
            let part = BlockPartition::new(s, 1 << c_q_pow.min(3), 1 << c_kv_pow.min(3)).unwrap();
            let got = blockwise_attention(&q, &k, &v, &part, causal).unwrap();
            let mask = causal.then(|| causal_mask::<f64>(s).unwrap());
            let want = vanilla_attention(&q, &k, &v, mask.as_ref()).unwrap();
            prop_assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
        }
    }
}
