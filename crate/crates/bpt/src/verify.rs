//! Equivalence and correctness checks, packaged for the command line.
//!
//! Every check compares the blockwise engine against the materialized
//! reference (or against an exact property like causality) and reports its
//! worst observed error next to the tolerance it was held to. A fault
//! injection switch negates the streaming-softmax correction factor so the
//! suite can demonstrate it actually detects broken rescaling. The suite is
//! generic over element precision: the default tolerances are written for
//! the 64-bit engine, and a 32-bit run fails them by design, which is the
//! honest way to show how much precision the streaming math preserves.

use crate::blockwise::{
    blockwise_attention_with, blockwise_cross_entropy, bpt_backward, bpt_block, ScanPolicy,
};
use crate::layer::{reference_backward, BlockGrads};
use crate::partition::BlockPartition;
use crate::reference::{
    causal_mask, cross_entropy, reference_block, vanilla_attention, AttentionParams, FfnParams,
};
use crate::rng::{self, seeded_normal};
use crate::tensor::{Element, Tensor};
use crate::Result;

/// Knobs for one suite run.
#[derive(Clone, Debug)]
pub struct VerifyOptions {
    /// Sequence lengths for the equivalence grids.
    pub sizes: Vec<usize>,
    /// Seeds per grid point.
    pub n_seeds: u64,
    pub seed: u64,
    /// Max-abs tolerance for forward equivalence.
    pub attention_tol: f64,
    /// Relative tolerance between blockwise and reference gradients.
    pub grad_tol: f64,
    /// Relative tolerance against central finite differences.
    pub fd_tol: f64,
    /// Causality perturbation trials.
    pub causality_trials: usize,
    /// Negate the streaming-softmax correction factor (self-test).
    pub inject_fault: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            sizes: vec![8, 16, 32],
            n_seeds: 3,
            seed: 0,
            attention_tol: 1e-12,
            grad_tol: 1e-10,
            fd_tol: 1e-6,
            causality_trials: 25,
            inject_fault: false,
        }
    }
}

/// Outcome of one named check.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: &'static str,
    pub passed: bool,
    /// Worst error observed (max-abs, relative, or failed-trial count,
    /// depending on the check).
    pub worst: f64,
    pub tolerance: f64,
    /// Parameters of the worst case, for replay.
    pub detail: String,
}

fn report(name: &'static str, worst: f64, tolerance: f64, detail: String) -> CheckReport {
    CheckReport {
        name,
        passed: worst <= tolerance,
        worst,
        tolerance,
        detail,
    }
}

fn divisors(s: usize) -> Vec<usize> {
    (1..=s).filter(|c| s.is_multiple_of(*c)).collect()
}

fn policy(opts: &VerifyOptions) -> ScanPolicy {
    ScanPolicy {
        skip_fully_masked: true,
        self_test_negate_correction: opts.inject_fault,
    }
}

/// A check that errors out (for example a denominator driven non-positive by
/// an injected fault) counts as failed, not as a harness crash.
fn guard(name: &'static str, outcome: Result<CheckReport>) -> CheckReport {
    match outcome {
        Ok(rep) => rep,
        Err(e) => CheckReport {
            name,
            passed: false,
            worst: f64::INFINITY,
            tolerance: 0.0,
            detail: format!("errored: {e}"),
        },
    }
}

/// Runs every check and returns the reports in a stable order.
pub fn run_suite<T: Element>(opts: &VerifyOptions) -> Vec<CheckReport> {
    vec![
        guard("attention_equivalence", check_attention_equivalence::<T>(opts)),
        guard("fused_block_equivalence", check_fused_block_equivalence::<T>(opts)),
        guard("gradient_equivalence", check_gradient_equivalence::<T>(opts)),
        guard("finite_differences", check_finite_differences::<T>(opts)),
        guard("causality_bitwise", check_causality::<T>(opts)),
        guard("prefix_property", check_prefix_property::<T>(opts)),
        guard("masked_block_skip", check_masked_block_skip::<T>(opts)),
        guard("cross_entropy", check_cross_entropy::<T>(opts)),
    ]
}

/// Blockwise attention against the materialized softmax, every divisor
/// partition, masked and unmasked.
fn check_attention_equivalence<T: Element>(opts: &VerifyOptions) -> Result<CheckReport> {
    let d = 4;
    let mut worst = 0.0f64;
    let mut detail = String::from("no cases");
    let pol = policy(opts);
    for &s in &opts.sizes {
        for seed_i in 0..opts.n_seeds {
            let seed = rng::derive_seed(opts.seed, &format!("attn-{s}-{seed_i}"));
            let q = seeded_normal::<T>(&[s, d], seed, 1.0)?;
            let k = seeded_normal::<T>(&[s, d], seed + 1, 1.0)?;
            let v = seeded_normal::<T>(&[s, d], seed + 2, 1.0)?;
            let mask = causal_mask::<T>(s)?;
            for causal in [false, true] {
                let want = vanilla_attention(&q, &k, &v, causal.then_some(&mask))?;
                for &c_q in &divisors(s) {
                    for &c_kv in &divisors(s) {
                        let part = BlockPartition::new(s, c_q, c_kv)?;
                        let (got, _, _) =
                            blockwise_attention_with(&q, &k, &v, &part, causal, &pol)?;
                        let err = got.max_abs_diff(&want)?;
                        if err > worst {
                            worst = err;
                            detail = format!(
                                "s={s} c_q={c_q} c_kv={c_kv} causal={causal} seed={seed}"
                            );
                        }
                    }
                }
            }
        }
    }
    Ok(report(
        "attention_equivalence",
        worst,
        opts.attention_tol,
        detail,
    ))
}

/// Fused attention+feedforward block against the sequential reference, over
/// head counts 1, 2, 4.
fn check_fused_block_equivalence<T: Element>(opts: &VerifyOptions) -> Result<CheckReport> {
    let d_model = 8;
    let mut worst = 0.0f64;
    let mut detail = String::from("no cases");
    for &s in &opts.sizes {
        for n_heads in [1usize, 2, 4] {
            for seed_i in 0..opts.n_seeds {
                let seed = rng::derive_seed(opts.seed, &format!("fused-{s}-{n_heads}-{seed_i}"));
                let attn = AttentionParams::<T>::seeded(
                    d_model,
                    n_heads,
                    d_model / n_heads,
                    seed,
                    0.5,
                    0.5,
                )?;
                let ffn = FfnParams::<T>::seeded(d_model, 4 * d_model, seed + 7, 0.5, 0.5)?;
                let x = seeded_normal::<T>(&[s, d_model], seed + 13, 1.0)?;
                for causal in [false, true] {
                    let want = reference_block(&x, &attn, &ffn, causal)?;
                    for &c in &divisors(s) {
                        let part = BlockPartition::new(s, c, c)?;
                        let got = bpt_block(&x, &attn, &ffn, &part, causal)?;
                        let err = got.max_abs_diff(&want)?;
                        if err > worst {
                            worst = err;
                            detail =
                                format!("s={s} c={c} heads={n_heads} causal={causal} seed={seed}");
                        }
                    }
                }
            }
        }
    }
    Ok(report(
        "fused_block_equivalence",
        worst,
        opts.attention_tol,
        detail,
    ))
}

fn grad_pairs<'a, T: Element>(
    a: &'a BlockGrads<T>,
    b: &'a BlockGrads<T>,
) -> [(&'static str, &'a Tensor<T>, &'a Tensor<T>); 9] {
    [
        ("dx", &a.dx, &b.dx),
        ("w_q", &a.attn.w_q, &b.attn.w_q),
        ("w_k", &a.attn.w_k, &b.attn.w_k),
        ("w_v", &a.attn.w_v, &b.attn.w_v),
        ("w_out", &a.attn.w_out, &b.attn.w_out),
        ("w1", &a.ffn.w1, &b.ffn.w1),
        ("b1", &a.ffn.b1, &b.ffn.b1),
        ("w2", &a.ffn.w2, &b.ffn.w2),
        ("b2", &a.ffn.b2, &b.ffn.b2),
    ]
}

/// Largest relative elementwise gap, scaled by the larger magnitude (floored
/// at 1 so near-zero entries compare absolutely).
fn rel_gap<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let (x, y) = (Element::to_f64(x), Element::to_f64(y));
            (x - y).abs() / x.abs().max(y.abs()).max(1.0)
        })
        .fold(0.0, f64::max)
}

/// Blockwise backward against the reference backward, all nine gradients.
fn check_gradient_equivalence<T: Element>(opts: &VerifyOptions) -> Result<CheckReport> {
    let (d_model, n_heads) = (8, 2);
    let mut worst = 0.0f64;
    let mut detail = String::from("no cases");
    for &s in &opts.sizes {
        for seed_i in 0..opts.n_seeds {
            let seed = rng::derive_seed(opts.seed, &format!("grad-{s}-{seed_i}"));
            let attn =
                AttentionParams::<T>::seeded(d_model, n_heads, d_model / n_heads, seed, 0.5, 0.5)?;
            let ffn = FfnParams::<T>::seeded(d_model, 4 * d_model, seed + 7, 0.5, 0.5)?;
            let x = seeded_normal::<T>(&[s, d_model], seed + 13, 1.0)?;
            let upstream = seeded_normal::<T>(&[s, d_model], seed + 17, 1.0)?;
            for causal in [false, true] {
                let want = reference_backward(&x, &attn, &ffn, causal, &upstream)?;
                for &c in &divisors(s) {
                    let part = BlockPartition::new(s, c, c)?;
                    let got = bpt_backward(&x, &attn, &ffn, &part, causal, &upstream)?;
                    for (label, a, b) in grad_pairs(&want, &got) {
                        let err = rel_gap(a, b);
                        if err > worst {
                            worst = err;
                            detail = format!("{label} s={s} c={c} causal={causal} seed={seed}");
                        }
                    }
                }
            }
        }
    }
    Ok(report("gradient_equivalence", worst, opts.grad_tol, detail))
}

/// Scalar probe loss: sum(block(x) ⊙ u), accumulated at working precision.
fn probe_loss<T: Element>(
    x: &Tensor<T>,
    attn: &AttentionParams<T>,
    ffn: &FfnParams<T>,
    causal: bool,
    u: &Tensor<T>,
) -> Result<f64> {
    let out = reference_block(x, attn, ffn, causal)?;
    Ok(out
        .data()
        .iter()
        .zip(u.data())
        .map(|(&o, &w)| Element::to_f64(o) * Element::to_f64(w))
        .sum())
}

/// Indices of the largest-magnitude entries, the best-conditioned places to
/// probe with finite differences.
fn top_indices<T: Element>(t: &Tensor<T>, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..t.data().len()).collect();
    idx.sort_by(|&i, &j| {
        Element::to_f64(t.data()[j])
            .abs()
            .partial_cmp(&Element::to_f64(t.data()[i]).abs())
            .unwrap()
            .then(i.cmp(&j))
    });
    idx.truncate(n);
    idx
}

/// Central finite differences against both backward implementations.
fn check_finite_differences<T: Element>(opts: &VerifyOptions) -> Result<CheckReport> {
    let (s, d_model, n_heads) = (8, 8, 2);
    let eps = 1e-5;
    let probes = 4;
    let mut worst = 0.0f64;
    let mut detail = String::from("no cases");
    for seed_i in 0..opts.n_seeds.max(3) {
        let seed = rng::derive_seed(opts.seed, &format!("fd-{seed_i}"));
        let attn =
            AttentionParams::<T>::seeded(d_model, n_heads, d_model / n_heads, seed, 0.5, 0.5)?;
        let ffn = FfnParams::<T>::seeded(d_model, 4 * d_model, seed + 7, 0.5, 0.5)?;
        let x = seeded_normal::<T>(&[s, d_model], seed + 13, 1.0)?;
        let u = seeded_normal::<T>(&[s, d_model], seed + 17, 1.0)?;
        let causal = seed_i % 2 == 0;
        let part = BlockPartition::new(s, s / 2, s / 2)?;
        let reference = reference_backward(&x, &attn, &ffn, causal, &u)?;
        let blockwise = bpt_backward(&x, &attn, &ffn, &part, causal, &u)?;

        // Perturb one coordinate of one tensor and re-evaluate the probe.
        let fd_for = |which: usize, idx: usize| -> Result<f64> {
            let mut x2 = x.duplicate()?;
            let mut attn2 = AttentionParams::new(
                attn.w_q.duplicate()?,
                attn.w_k.duplicate()?,
                attn.w_v.duplicate()?,
                attn.w_out.duplicate()?,
                n_heads,
            )?;
            let mut ffn2 = FfnParams::new(
                ffn.w1.duplicate()?,
                ffn.b1.duplicate()?,
                ffn.w2.duplicate()?,
                ffn.b2.duplicate()?,
            )?;
            let mut eval = |delta: f64| -> Result<f64> {
                {
                    let slot = match which {
                        0 => &mut x2,
                        1 => &mut attn2.w_q,
                        2 => &mut attn2.w_k,
                        3 => &mut attn2.w_v,
                        4 => &mut attn2.w_out,
                        5 => &mut ffn2.w1,
                        6 => &mut ffn2.b1,
                        7 => &mut ffn2.w2,
                        _ => &mut ffn2.b2,
                    };
                    slot.data_mut()[idx] += T::of_f64(delta);
                }
                probe_loss(&x2, &attn2, &ffn2, causal, &u)
            };
            let plus = eval(eps)?;
            let minus = eval(-2.0 * eps)?;
            eval(eps)?; // restore
            Ok((plus - minus) / (2.0 * eps))
        };

        let tensors = grad_pairs(&reference, &blockwise);
        for (which, (label, ref_grad, bpt_grad)) in tensors.into_iter().enumerate() {
            for idx in top_indices(ref_grad, probes) {
                let numeric = fd_for(which, idx)?;
                for (impl_name, analytic) in [
                    ("reference", Element::to_f64(ref_grad.data()[idx])),
                    ("blockwise", Element::to_f64(bpt_grad.data()[idx])),
                ] {
                    let err =
                        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0);
                    if err > worst {
                        worst = err;
                        detail = format!(
                            "{impl_name} {label}[{idx}] seed={seed} causal={causal} \
                             analytic={analytic:.3e} numeric={numeric:.3e}"
                        );
                    }
                }
            }
        }
    }
    Ok(report("finite_differences", worst, opts.fd_tol, detail))
}

/// Outputs at positions ≤ p must be bitwise unchanged by any perturbation of
/// positions > p. Worst value is the number of failed trials.
fn check_causality<T: Element>(opts: &VerifyOptions) -> Result<CheckReport> {
    let (s, d_model, n_heads) = (32, 8, 2);
    let part = BlockPartition::new(s, 8, 4)?;
    let seed = rng::derive_seed(opts.seed, "causality");
    let attn = AttentionParams::<T>::seeded(d_model, n_heads, d_model / n_heads, seed, 0.5, 0.5)?;
    let ffn = FfnParams::<T>::seeded(d_model, 4 * d_model, seed + 7, 0.5, 0.5)?;
    let x = seeded_normal::<T>(&[s, d_model], seed + 13, 1.0)?;
    let base = bpt_block(&x, &attn, &ffn, &part, true)?;
    let mut failures = 0usize;
    let mut detail = String::from("all trials bitwise-identical");
    for trial in 0..opts.causality_trials {
        let trial_seed = rng::derive_seed(seed, &format!("trial{trial}"));
        let p = rng::uniform_index(trial_seed, 0, s - 1); // keep at least one perturbed row
        let noise = seeded_normal::<T>(&[s - (p + 1), d_model], trial_seed + 1, 10.0)?;
        let mut x2 = x.duplicate()?;
        {
            let h = d_model;
            let data = x2.data_mut();
            for (r, row) in ((p + 1)..s).enumerate() {
                for j in 0..h {
                    data[row * h + j] += noise.data()[r * h + j];
                }
            }
        }
        let out = bpt_block(&x2, &attn, &ffn, &part, true)?;
        let prefix_ok = (0..=p).all(|r| {
            out.row(r).iter().zip(base.row(r)).all(|(&a, &b)| {
                Element::to_f64(a).to_bits() == Element::to_f64(b).to_bits()
            })
        });
        if !prefix_ok {
            failures += 1;
            detail = format!("prefix changed at trial {trial}, p={p}");
        }
    }
    Ok(report(
        "causality_bitwise",
        failures as f64,
        0.0,
        detail,
    ))
}

/// Streaming over a prefix of key-value blocks equals attention restricted to
/// that prefix.
fn check_prefix_property<T: Element>(opts: &VerifyOptions) -> Result<CheckReport> {
    use crate::blockwise::{finalize, scan_kv_block, AttentionCarry, ChunkBias};
    let (s, d, c) = (16, 4, 4);
    let mut worst = 0.0f64;
    let mut detail = String::from("no cases");
    let pol = policy(opts);
    for seed_i in 0..opts.n_seeds {
        let seed = rng::derive_seed(opts.seed, &format!("prefix-{seed_i}"));
        let q = seeded_normal::<T>(&[c, d], seed, 1.0)?;
        let k = seeded_normal::<T>(&[s, d], seed + 1, 1.0)?;
        let v = seeded_normal::<T>(&[s, d], seed + 2, 1.0)?;
        let q_scaled = q.scale(T::of_f64(1.0 / (d as f64).sqrt()))?;
        let mut carry = AttentionCarry::init(c, d)?;
        for j in 0..s / c {
            let k_j = k.row_block(j * c, c)?;
            let v_j = v.row_block(j * c, c)?;
            carry = scan_kv_block(carry, &q_scaled, &k_j, &v_j, &ChunkBias::FullyVisible, &pol)?;
            let seen = (j + 1) * c;
            let out = finalize(AttentionCarry {
                numerator: carry.numerator.duplicate()?,
                denominator: carry.denominator.duplicate()?,
                max_score: carry.max_score.duplicate()?,
            })?;
            let want = vanilla_attention(
                &q,
                &k.row_block(0, seen)?,
                &v.row_block(0, seen)?,
                None,
            )?;
            let err = out.max_abs_diff(&want)?;
            if err > worst {
                worst = err;
                detail = format!("prefix={seen} seed={seed}");
            }
        }
    }
    Ok(report(
        "prefix_property",
        worst,
        opts.attention_tol.max(1e-13),
        detail,
    ))
}

/// Skipping fully masked blocks must not change a single bit.
fn check_masked_block_skip<T: Element>(opts: &VerifyOptions) -> Result<CheckReport> {
    let d = 4;
    let mut failures = 0usize;
    let mut detail = String::from("all partitions bitwise-identical");
    for &s in &opts.sizes {
        let seed = rng::derive_seed(opts.seed, &format!("skip-{s}"));
        let q = seeded_normal::<T>(&[s, d], seed, 1.0)?;
        let k = seeded_normal::<T>(&[s, d], seed + 1, 1.0)?;
        let v = seeded_normal::<T>(&[s, d], seed + 2, 1.0)?;
        for &c_q in &divisors(s) {
            for &c_kv in &divisors(s) {
                let part = BlockPartition::new(s, c_q, c_kv)?;
                let skip = ScanPolicy {
                    skip_fully_masked: true,
                    self_test_negate_correction: opts.inject_fault,
                };
                let no_skip = ScanPolicy {
                    skip_fully_masked: false,
                    ..skip
                };
                let (a, _, _) = blockwise_attention_with(&q, &k, &v, &part, true, &skip)?;
                let (b, _, _) = blockwise_attention_with(&q, &k, &v, &part, true, &no_skip)?;
                if !a.bitwise_eq(&b) {
                    failures += 1;
                    detail = format!("s={s} c_q={c_q} c_kv={c_kv}");
                }
            }
        }
    }
    Ok(report("masked_block_skip", failures as f64, 0.0, detail))
}

/// Chunked cross-entropy against the dense loss, plus the uniform-logit
/// closed form.
fn check_cross_entropy<T: Element>(opts: &VerifyOptions) -> Result<CheckReport> {
    let vocab = 64;
    let mut worst = 0.0f64;
    let mut detail = String::from("no cases");
    for &s in &opts.sizes {
        let seed = rng::derive_seed(opts.seed, &format!("ce-{s}"));
        let logits = seeded_normal::<T>(&[s, vocab], seed, 2.0)?;
        let targets: Vec<usize> = (0..s)
            .map(|i| rng::uniform_index(seed + 9, i as u64, vocab))
            .collect();
        let want = cross_entropy(&logits, &targets)?;
        for &chunk in &divisors(s) {
            let got = blockwise_cross_entropy::<T, _>(&targets, chunk, |r| {
                logits.row_block(r.start, r.len())
            })?;
            let err = (Element::to_f64(got) - Element::to_f64(want)).abs();
            if err > worst {
                worst = err;
                detail = format!("s={s} chunk={chunk}");
            }
        }
    }
    // Uniform logits: the loss is exactly ln(vocab).
    let uniform = blockwise_cross_entropy::<T, _>(&vec![3usize; 32], 8, |r| {
        Tensor::full(&[r.len(), 256], T::zero())
    })?;
    let closed_form_err = (Element::to_f64(uniform) - 256f64.ln()).abs();
    if closed_form_err > worst {
        worst = closed_form_err;
        detail = "uniform-logit closed form".to_string();
    }
    Ok(report("cross_entropy", worst, 1e-14, detail))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_with_default_options() {
        let reports = run_suite::<f64>(&VerifyOptions {
            sizes: vec![8, 16],
            n_seeds: 2,
            causality_trials: 8,
            ..VerifyOptions::default()
        });
        for r in &reports {
            assert!(
                r.passed,
                "{} failed: worst {} > {} ({})",
                r.name, r.worst, r.tolerance, r.detail
            );
        }
        assert_eq!(reports.len(), 8);
    }

    #[test]
    fn injected_fault_is_detected() {
        let reports = run_suite::<f64>(&VerifyOptions {
            sizes: vec![8, 16],
            n_seeds: 2,
            causality_trials: 4,
            inject_fault: true,
            ..VerifyOptions::default()
        });
        assert!(
            reports.iter().any(|r| !r.passed),
            "fault injection must fail at least one check"
        );
    }

    #[test]
    fn unreachable_tolerance_fails_the_suite() {
        let reports = run_suite::<f64>(&VerifyOptions {
            sizes: vec![16],
            n_seeds: 1,
            causality_trials: 2,
            attention_tol: 1e-20,
            ..VerifyOptions::default()
        });
        let attn = reports
            .iter()
            .find(|r| r.name == "attention_equivalence")
            .unwrap();
        assert!(!attn.passed, "rounding must exceed 1e-20");
    }

    #[test]
    fn half_width_elements_fail_the_default_tolerances() {
        let reports = run_suite::<f32>(&VerifyOptions {
            sizes: vec![16],
            n_seeds: 1,
            causality_trials: 4,
            ..VerifyOptions::default()
        });
        // The exact-property checks still hold at f32; the tight numerical
        // tolerances must not.
        let attn = reports
            .iter()
            .find(|r| r.name == "attention_equivalence")
            .unwrap();
        assert!(!attn.passed, "f32 rounding must exceed 1e-12");
        let causality = reports
            .iter()
            .find(|r| r.name == "causality_bitwise")
            .unwrap();
        assert!(causality.passed, "causality is exact at any precision");
    }
}
