//! Naive reference transformer block.
//!
//! This is the ground truth the blockwise engine is checked against: scaled
//! dot-product attention with the full score matrix materialized, a two-layer
//! relu feedforward, and the fused residual arrangement
//! `out = ffn(attn + x) + attn + x`. Everything here favors obviousness over
//! memory; the point is to be easy to audit.

use crate::error::Error;
use crate::tensor::{Element, Tensor};
use crate::{rng, Result};

/// Multi-head attention projections. `w_q`, `w_k`, `w_v` map the model width
/// to `n_heads * head_dim` stacked head columns; `w_out` maps back.
#[derive(Debug)]
pub struct AttentionParams<T: Element = f64> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_out: Tensor<T>,
    pub n_heads: usize,
}

impl<T: Element> AttentionParams<T> {
    pub fn new(
        w_q: Tensor<T>,
        w_k: Tensor<T>,
        w_v: Tensor<T>,
        w_out: Tensor<T>,
        n_heads: usize,
    ) -> Result<Self> {
        let d_model = w_q.rows();
        let proj = w_q.cols();
        for (name, w) in [("w_k", &w_k), ("w_v", &w_v)] {
            if w.shape() != [d_model, proj] {
                return Err(Error::shape(
                    "AttentionParams",
                    format!("{name} is {:?}, want [{d_model}, {proj}]", w.shape()),
                ));
            }
        }
        if w_out.shape() != [proj, d_model] {
            return Err(Error::shape(
                "AttentionParams",
                format!("w_out is {:?}, want [{proj}, {d_model}]", w_out.shape()),
            ));
        }
        if n_heads == 0 || !proj.is_multiple_of(n_heads) {
            return Err(Error::shape(
                "AttentionParams",
                format!("projection width {proj} not divisible by {n_heads} heads"),
            ));
        }
        Ok(AttentionParams {
            w_q,
            w_k,
            w_v,
            w_out,
            n_heads,
        })
    }

    pub fn seeded(
        d_model: usize,
        n_heads: usize,
        head_dim: usize,
        seed: u64,
        stddev: f64,
        out_stddev: f64,
    ) -> Result<Self> {
        let proj = n_heads * head_dim;
        Self::new(
            rng::seeded_normal(&[d_model, proj], rng::derive_seed(seed, "w_q"), stddev)?,
            rng::seeded_normal(&[d_model, proj], rng::derive_seed(seed, "w_k"), stddev)?,
            rng::seeded_normal(&[d_model, proj], rng::derive_seed(seed, "w_v"), stddev)?,
            rng::seeded_normal(&[proj, d_model], rng::derive_seed(seed, "w_out"), out_stddev)?,
            n_heads,
        )
    }

    pub fn head_dim(&self) -> usize {
        self.w_q.cols() / self.n_heads
    }

    pub fn d_model(&self) -> usize {
        self.w_q.rows()
    }

    pub fn duplicate(&self) -> Result<Self> {
        Ok(AttentionParams {
            w_q: self.w_q.duplicate()?,
            w_k: self.w_k.duplicate()?,
            w_v: self.w_v.duplicate()?,
            w_out: self.w_out.duplicate()?,
            n_heads: self.n_heads,
        })
    }
}

/// Two-layer relu feedforward parameters.
#[derive(Debug)]
pub struct FfnParams<T: Element = f64> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

impl<T: Element> FfnParams<T> {
    pub fn new(w1: Tensor<T>, b1: Tensor<T>, w2: Tensor<T>, b2: Tensor<T>) -> Result<Self> {
        let (d_model, d_ff) = (w1.rows(), w1.cols());
        if b1.shape() != [d_ff] {
            return Err(Error::shape(
                "FfnParams",
                format!("b1 is {:?}, want [{d_ff}]", b1.shape()),
            ));
        }
        if w2.shape() != [d_ff, d_model] {
            return Err(Error::shape(
                "FfnParams",
                format!("w2 is {:?}, want [{d_ff}, {d_model}]", w2.shape()),
            ));
        }
        if b2.shape() != [d_model] {
            return Err(Error::shape(
                "FfnParams",
                format!("b2 is {:?}, want [{d_model}]", b2.shape()),
            ));
        }
        Ok(FfnParams { w1, b1, w2, b2 })
    }

    pub fn seeded(
        d_model: usize,
        d_ff: usize,
        seed: u64,
        stddev: f64,
        out_stddev: f64,
    ) -> Result<Self> {
        Self::new(
            rng::seeded_normal(&[d_model, d_ff], rng::derive_seed(seed, "w1"), stddev)?,
            Tensor::zeros(&[d_ff])?,
            rng::seeded_normal(&[d_ff, d_model], rng::derive_seed(seed, "w2"), out_stddev)?,
            Tensor::zeros(&[d_model])?,
        )
    }

    pub fn d_model(&self) -> usize {
        self.w1.rows()
    }

    pub fn d_ff(&self) -> usize {
        self.w1.cols()
    }

    pub fn duplicate(&self) -> Result<Self> {
        Ok(FfnParams {
            w1: self.w1.duplicate()?,
            b1: self.b1.duplicate()?,
            w2: self.w2.duplicate()?,
            b2: self.b2.duplicate()?,
        })
    }
}

/// Additive causal mask: entry (i, j) is 0 when j <= i, the mask constant
/// otherwise.
pub fn causal_mask<T: Element>(s: usize) -> Result<Tensor<T>> {
    let mut data = vec![T::zero(); s * s];
    for i in 0..s {
        for j in i + 1..s {
            data[i * s + j] = T::MASK_NEG;
        }
    }
    Tensor::from_vec(&[s, s], data)
}

/// Single-head scaled dot-product attention with the full [s x s] score
/// matrix materialized: `row_softmax(q k^T / sqrt(d) + mask) v`.
pub fn vanilla_attention<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (out, _scores, _probs) = vanilla_attention_parts(q, k, v, mask)?;
    Ok(out)
}

/// As [`vanilla_attention`] but also returns the masked scores and the
/// probabilities, which the standard training policy keeps for backward.
pub fn vanilla_attention_parts<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: Option<&Tensor<T>>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let d = q.cols();
    if k.cols() != d || v.rows() != k.rows() {
        return Err(Error::shape(
            "vanilla_attention",
            format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    let inv_sqrt_d = T::of_f64(1.0 / (d as f64).sqrt());
    let mut scores = {
        let _s = crate::trace::scope("attn_scores");
        q.matmul_nt(k)?.scale(inv_sqrt_d)?
    };
    if let Some(m) = mask {
        let _s = crate::trace::scope("attn_scores");
        scores = scores.add(m)?;
    }
    let probs = {
        let _s = crate::trace::scope("attn_probs");
        scores.row_softmax()?
    };
    let out = {
        let _s = crate::trace::scope("attn_out");
        probs.matmul(v)?
    };
    Ok((out, scores, probs))
}

/// Splits a stacked-head [s x (a*d)] tensor into per-head [s x d] copies.
pub fn split_heads<T: Element>(x: &Tensor<T>, n_heads: usize) -> Result<Vec<Tensor<T>>> {
    let proj = x.cols();
    if n_heads == 0 || !proj.is_multiple_of(n_heads) {
        return Err(Error::shape(
            "split_heads",
            format!("width {proj} not divisible by {n_heads} heads"),
        ));
    }
    let d = proj / n_heads;
    (0..n_heads).map(|t| x.col_block(t * d, d)).collect()
}

/// Multi-head attention: project, run per-head vanilla attention, concatenate
/// heads, project out.
pub fn multi_head_attention<T: Element>(
    x: &Tensor<T>,
    params: &AttentionParams<T>,
    causal: bool,
) -> Result<Tensor<T>> {
    let q = x.matmul(&params.w_q)?;
    let k = x.matmul(&params.w_k)?;
    let v = x.matmul(&params.w_v)?;
    let mask = if causal {
        Some(causal_mask::<T>(x.rows())?)
    } else {
        None
    };
    let q_heads = split_heads(&q, params.n_heads)?;
    let k_heads = split_heads(&k, params.n_heads)?;
    let v_heads = split_heads(&v, params.n_heads)?;
    let mut outs = Vec::with_capacity(params.n_heads);
    for t in 0..params.n_heads {
        outs.push(vanilla_attention(
            &q_heads[t],
            &k_heads[t],
            &v_heads[t],
            mask.as_ref(),
        )?);
    }
    let concat = Tensor::concat_cols(&outs)?;
    concat.matmul(&params.w_out)
}

/// Two-layer relu feedforward applied to every row:
/// `relu(x w1 + b1) w2 + b2`.
pub fn ffn<T: Element>(x: &Tensor<T>, params: &FfnParams<T>) -> Result<Tensor<T>> {
    let z = {
        let _s = crate::trace::scope("ffn_pre");
        x.matmul(&params.w1)?.add_broadcast_row(&params.b1)?
    };
    let r = {
        let _s = crate::trace::scope("ffn_act");
        z.relu()?
    };
    drop(z);
    let _s = crate::trace::scope("ffn_out");
    r.matmul(&params.w2)?.add_broadcast_row(&params.b2)
}

/// One fused transformer block without normalization:
/// `out = ffn(attn(x) + x) + attn(x) + x`.
pub fn reference_block<T: Element>(
    x: &Tensor<T>,
    attn: &AttentionParams<T>,
    ffn_params: &FfnParams<T>,
    causal: bool,
) -> Result<Tensor<T>> {
    let a = multi_head_attention(x, attn, causal)?;
    let u = a.add(x)?;
    let f = ffn(&u, ffn_params)?;
    f.add(&u)
}

/// Loss of one row of logits against its target class, stabilized by max
/// subtraction. Shared by the dense and the chunked cross-entropy so their
/// accumulation sequences are identical.
pub(crate) fn ce_row_loss<T: Element>(row: &[T], target: usize, position: usize) -> Result<T> {
    if target >= row.len() {
        return Err(Error::TargetOutOfRange {
            position,
            target,
            vocab: row.len(),
        });
    }
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut denom = T::zero();
    for &a in row {
        denom += (a - max).exp();
    }
    Ok(denom.ln() + max - row[target])
}

/// Mean negative log-likelihood of `targets` under row-wise softmax of
/// `logits`.
pub fn cross_entropy<T: Element>(logits: &Tensor<T>, targets: &[usize]) -> Result<T> {
    let m = logits.rows();
    if targets.len() != m {
        return Err(Error::shape(
            "cross_entropy",
            format!("{m} rows vs {} targets", targets.len()),
        ));
    }
    let mut acc = T::zero();
    for (i, &t) in targets.iter().enumerate() {
        acc += ce_row_loss(logits.row(i), t, i)?;
    }
    Ok(acc / T::of_f64(m as f64))
}

/// Cross-entropy together with its gradient. `total_rows` is the divisor of
/// the mean, which may exceed this tensor's rows when it is one chunk of a
/// longer sequence; the returned loss is the plain sum over rows.
pub fn cross_entropy_grad_chunk<T: Element>(
    logits: &Tensor<T>,
    targets: &[usize],
    positions_offset: usize,
    total_rows: usize,
) -> Result<(T, Tensor<T>)> {
    let (m, vocab) = (logits.rows(), logits.cols());
    if targets.len() != m {
        return Err(Error::shape(
            "cross_entropy_grad_chunk",
            format!("{m} rows vs {} targets", targets.len()),
        ));
    }
    let mut loss_sum = T::zero();
    let inv_total = T::of_f64(1.0 / total_rows as f64);
    let mut grad = Vec::with_capacity(m * vocab);
    for (i, &t) in targets.iter().enumerate() {
        let row = logits.row(i);
        loss_sum += ce_row_loss(row, t, positions_offset + i)?;
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut denom = T::zero();
        for &a in row {
            denom += (a - max).exp();
        }
        for (j, &a) in row.iter().enumerate() {
            let p = (a - max).exp() / denom;
            let onehot = if j == t { T::one() } else { T::zero() };
            grad.push((p - onehot) * inv_total);
        }
    }
    Ok((loss_sum, Tensor::from_vec(&[m, vocab], grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_normal;

    /// Scalar-loop attention oracle, written directly from the definition
    /// with its own index arithmetic.
    fn oracle_attention(q: &Tensor, k: &Tensor, v: &Tensor, causal: bool) -> Vec<f64> {
        let (s, d) = (q.rows(), q.cols());
        let inv = 1.0 / (d as f64).sqrt();
        let mut out = vec![0.0; s * d];
        for i in 0..s {
            let limit = if causal { i + 1 } else { s };
            let mut scores = Vec::with_capacity(limit);
            for j in 0..limit {
                let mut dot = 0.0;
                for e in 0..d {
                    dot += q.get(i, e) * k.get(j, e);
                }
                scores.push(dot * inv);
            }
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = scores.iter().map(|&x| (x - max).exp()).collect();
            let denom: f64 = weights.iter().sum();
            for e in 0..d {
                let mut acc = 0.0;
                for (j, w) in weights.iter().enumerate() {
                    acc += w / denom * v.get(j, e);
                }
                out[i * d + e] = acc;
            }
        }
        out
    }

    #[test]
    fn vanilla_attention_matches_scalar_oracle() {
        for seed in [1u64, 2, 3] {
            for causal in [false, true] {
                let q = seeded_normal::<f64>(&[8, 4], seed * 10 + 1, 1.0).unwrap();
                let k = seeded_normal::<f64>(&[8, 4], seed * 10 + 2, 1.0).unwrap();
                let v = seeded_normal::<f64>(&[8, 4], seed * 10 + 3, 1.0).unwrap();
                let mask = causal.then(|| causal_mask::<f64>(8).unwrap());
                let got = vanilla_attention(&q, &k, &v, mask.as_ref()).unwrap();
                let want = oracle_attention(&q, &k, &v, causal);
                for (idx, (g, w)) in got.data().iter().zip(&want).enumerate() {
                    assert!(
                        (g - w).abs() < 1e-13,
                        "seed {seed} causal {causal} idx {idx}: got {g}, oracle {w}"
                    );
                }
            }
        }
    }

    #[test]
    fn causal_attention_ignores_future_rows_exactly() {
        let s = 8;
        let q = seeded_normal::<f64>(&[s, 4], 11, 1.0).unwrap();
        let k = seeded_normal::<f64>(&[s, 4], 12, 1.0).unwrap();
        let v = seeded_normal::<f64>(&[s, 4], 13, 1.0).unwrap();
        let mask = causal_mask::<f64>(s).unwrap();
        let base = vanilla_attention(&q, &k, &v, Some(&mask)).unwrap();

        // Perturb every key/value row strictly after position p.
        let p = 4;
        let mut k2 = k.data().to_vec();
        let mut v2 = v.data().to_vec();
        for r in p + 1..s {
            for c in 0..4 {
                k2[r * 4 + c] += 3.5;
                v2[r * 4 + c] -= 2.25;
            }
        }
        let k2 = Tensor::from_vec(&[s, 4], k2).unwrap();
        let v2 = Tensor::from_vec(&[s, 4], v2).unwrap();
        let perturbed = vanilla_attention(&q, &k2, &v2, Some(&mask)).unwrap();
        for i in 0..=p {
            for (a, b) in base.row(i).iter().zip(perturbed.row(i)) {
                assert_eq!(a.to_bits(), b.to_bits(), "row {i} changed");
            }
        }
    }

    #[test]
    fn causal_mask_shape() {
        let m = causal_mask::<f64>(4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let want = if j <= i { 0.0 } else { f64::MASK_NEG };
                assert_eq!(m.get(i, j), want);
            }
        }
    }

    #[test]
    fn ffn_reduces_to_affine_map_when_relu_saturates_open() {
        // With w1 = 0 and b1 > 0 the relu passes b1 through, so the output is
        // constant per row: b1 w2 + b2.
        let d = 3;
        let d_ff = 5;
        let params = FfnParams::new(
            Tensor::zeros(&[d, d_ff]).unwrap(),
            Tensor::full(&[d_ff], 0.5).unwrap(),
            seeded_normal(&[d_ff, d], 5, 1.0).unwrap(),
            seeded_normal(&[d], 6, 1.0).unwrap(),
        )
        .unwrap();
        let x = seeded_normal::<f64>(&[4, d], 7, 1.0).unwrap();
        let out = ffn(&x, &params).unwrap();
        for i in 0..4 {
            for j in 0..d {
                let mut want = params.b2.data()[j];
                for f in 0..d_ff {
                    want += 0.5 * params.w2.get(f, j);
                }
                assert!((out.get(i, j) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn reference_block_composition_with_identity_out_projection() {
        // Single head with w_out = I: the block must equal
        // ffn(attn + x) + attn + x assembled by hand.
        let (s, d) = (6, 4);
        let x = seeded_normal::<f64>(&[s, d], 21, 1.0).unwrap();
        let attn_params = AttentionParams::new(
            seeded_normal(&[d, d], 22, 0.5).unwrap(),
            seeded_normal(&[d, d], 23, 0.5).unwrap(),
            seeded_normal(&[d, d], 24, 0.5).unwrap(),
            Tensor::identity(d).unwrap(),
            1,
        )
        .unwrap();
        let ffn_params = FfnParams::seeded(d, 8, 25, 0.5, 0.5).unwrap();

        let got = reference_block(&x, &attn_params, &ffn_params, true).unwrap();

        let q = x.matmul(&attn_params.w_q).unwrap();
        let k = x.matmul(&attn_params.w_k).unwrap();
        let v = x.matmul(&attn_params.w_v).unwrap();
        let mask = causal_mask::<f64>(s).unwrap();
        let a = vanilla_attention(&q, &k, &v, Some(&mask)).unwrap();
        let u = a.add(&x).unwrap();
        let want = ffn(&u, &ffn_params).unwrap().add(&u).unwrap();
        assert!(got.max_abs_diff(&want).unwrap() < 1e-13);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_vocab() {
        for vocab in [7usize, 256] {
            let logits = Tensor::full(&[5, vocab], 0.25).unwrap();
            let loss = cross_entropy(&logits, &[0, 1, 2, 3, vocab - 1]).unwrap();
            let want = (vocab as f64).ln();
            assert!(
                (loss - want).abs() < 1e-12,
                "vocab {vocab}: loss {loss}, want {want}"
            );
        }
    }

    #[test]
    fn cross_entropy_gradient_at_uniform_logits() {
        let (s, vocab) = (4, 8);
        let logits = Tensor::full(&[s, vocab], -1.5).unwrap();
        let targets = [3usize, 0, 7, 2];
        let (_, grad) = cross_entropy_grad_chunk(&logits, &targets, 0, s).unwrap();
        for (i, &target) in targets.iter().enumerate() {
            for j in 0..vocab {
                let onehot = if j == target { 1.0 } else { 0.0 };
                let want = (1.0 / vocab as f64 - onehot) / s as f64;
                assert!(
                    (grad.get(i, j) - want).abs() < 1e-15,
                    "grad[{i}][{j}] = {}, want {want}",
                    grad.get(i, j)
                );
            }
        }
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let logits = Tensor::<f64>::zeros(&[2, 4]).unwrap();
        match cross_entropy(&logits, &[1, 4]) {
            Err(Error::TargetOutOfRange {
                position, target, ..
            }) => {
                assert_eq!(position, 1);
                assert_eq!(target, 4);
            }
            other => panic!("expected TargetOutOfRange, got {other:?}"),
        }
    }
}
