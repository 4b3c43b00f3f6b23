//! Closed-form activation-memory accounting for the three strategies, plus a
//! max-context planner.
//!
//! This is the analytical counterpart of the measuring arena in [`crate::trace`]:
//! it reproduces the standard per-term accounting of what each strategy saves
//! for the backward pass, at a configurable element width (default 2 bytes).
//! Boolean masks count 1 byte per element regardless of width.
//!
//! Per-strategy maxima under within-layer checkpointing:
//!
//! * vanilla: the quadratic score/mask/probability set, `(2w+1)·b·s²·a`
//!   bytes, against the feedforward's `4w·bsh`;
//! * flash: attention saves only its `w·bsh` output; the feedforward still
//!   needs `4w·bsh`;
//! * bpt: both sublayers stream blockwise, so the per-layer cost is the
//!   `w·bsh` loop output. The blockwise transients (`2w·bch` attention,
//!   `(9w+1)·bch` feedforward) appear in the breakdown but are taken as
//!   subdominant (`s` well above `c`), which is the regime the ratio and
//!   ordering claims quantify. The measuring arena reports the true
//!   transients for any `c`.
//!
//! The flash/bpt ratio is therefore `4w·bsh / w·bsh = 4`, exact in integer
//! arithmetic for every spec.

use crate::error::Error;
use crate::layer::Strategy;
use crate::Result;

/// Maximum sequence length the planner will report; beyond this the budget
/// is effectively unbounded for the configuration.
const PLANNER_MAX_SEQ: u64 = 1 << 40;

/// Problem size for the activation accounting.
#[derive(Clone, Copy, Debug)]
pub struct MemorySpec {
    /// Sequences per step.
    pub batch: u64,
    /// Tokens per sequence.
    pub seq_len: u64,
    /// Query/key-value block size used by the blockwise strategies.
    pub chunk: u64,
    /// Bytes per tensor element (half precision by default).
    pub bytes_per_element: u64,
}

impl MemorySpec {
    pub fn new(batch: u64, seq_len: u64, chunk: u64) -> Result<Self> {
        let spec = MemorySpec {
            batch,
            seq_len,
            chunk,
            bytes_per_element: 2,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_bytes(mut self, bytes_per_element: u64) -> Result<Self> {
        self.bytes_per_element = bytes_per_element;
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.batch == 0 {
            problems.push("batch must be at least 1".to_string());
        }
        if self.seq_len == 0 {
            problems.push("seq_len must be at least 1".to_string());
        }
        if self.chunk == 0 {
            problems.push("chunk must be at least 1".to_string());
        }
        if self.chunk > self.seq_len {
            problems.push(format!(
                "chunk {} exceeds seq_len {}",
                self.chunk, self.seq_len
            ));
        }
        if self.bytes_per_element == 0 {
            problems.push("bytes_per_element must be at least 1".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems))
        }
    }
}

/// Architecture dimensions of one model, with the published parameter count
/// kept alongside because budgeting uses it directly.
#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub name: String,
    pub n_params: u128,
    pub n_layers: u64,
    pub d_model: u64,
    pub n_heads: u64,
    pub d_head: u64,
    pub vocab: u64,
}

impl ModelConfig {
    /// The six standard GPT-family rows. Vocabulary size is the common
    /// 50257-token byte-pair vocabulary; the sources leave it implicit.
    pub fn presets() -> Vec<ModelConfig> {
        let row = |name: &str, n_params: u128, n_layers, d_model, n_heads, d_head| ModelConfig {
            name: name.to_string(),
            n_params,
            n_layers,
            d_model,
            n_heads,
            d_head,
            vocab: 50257,
        };
        vec![
            row("gpt-1b", 1_300_000_000, 24, 2048, 16, 128),
            row("gpt-3b", 2_700_000_000, 32, 2560, 32, 80),
            row("gpt-7b", 6_700_000_000, 32, 4096, 32, 128),
            row("gpt-13b", 13_000_000_000, 40, 5140, 40, 128),
            row("gpt-30b", 30_000_000_000, 48, 7168, 56, 128),
            row("gpt-70b", 70_000_000_000, 80, 8192, 64, 128),
        ]
    }

    pub fn preset(name: &str) -> Option<ModelConfig> {
        Self::presets().into_iter().find(|c| c.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (label, v) in [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_head", self.d_head),
            ("vocab", self.vocab),
        ] {
            if v == 0 {
                problems.push(format!("{label} must be positive"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems))
        }
    }

    /// Parameter count implied by the architecture: per layer 4·h² attention
    /// projections plus 8·h² for a 4h-wide feedforward, plus tied token
    /// embeddings. The published counts round this; one preset (the largest)
    /// differs by several percent, so budgeting always uses the published
    /// `n_params` field.
    pub fn computed_params(&self) -> u128 {
        let h = self.d_model as u128;
        let l = self.n_layers as u128;
        12 * l * h * h + self.vocab as u128 * h
    }

    /// Note emitted when the printed head geometry does not tile the model
    /// width; one published row has this property and is kept as printed.
    pub fn consistency_note(&self) -> Option<String> {
        if self.n_heads * self.d_head != self.d_model {
            Some(format!(
                "{}: n_heads*d_head = {} does not equal d_model = {}; kept as published",
                self.name,
                self.n_heads * self.d_head,
                self.d_model
            ))
        } else {
            None
        }
    }
}

/// Per-strategy accounting: every saved-tensor term by name, the
/// checkpointed maxima of the two sublayers, and their layer-level max.
#[derive(Clone, Debug)]
pub struct MemoryEstimate {
    pub strategy: Strategy,
    /// Label and bytes of each term the strategy saves (or, for the
    /// blockwise transients, briefly materializes).
    pub terms: Vec<(String, u128)>,
    pub attention_max_bytes: u128,
    pub ffn_max_bytes: u128,
    pub layer_max_bytes: u128,
}

impl MemoryEstimate {
    pub fn term(&self, label: &str) -> Option<u128> {
        self.terms
            .iter()
            .find(|(l, _)| l == label)
            .map(|&(_, b)| b)
    }
}

/// Activation bytes saved by one materialized-attention layer.
pub fn vanilla_layer_bytes(spec: &MemorySpec, config: &ModelConfig) -> Result<MemoryEstimate> {
    spec.validate()?;
    config.validate()?;
    let w = spec.bytes_per_element as u128;
    let b = spec.batch as u128;
    let s = spec.seq_len as u128;
    let h = config.d_model as u128;
    let a = config.n_heads as u128;
    let bsh = b * s * h;
    let bssa = b * s * s * a;
    let terms = vec![
        ("attention: q/k/v input".to_string(), w * bsh),
        ("attention: q and k".to_string(), 2 * w * bsh),
        ("attention: softmax input".to_string(), w * bssa),
        ("attention: mask".to_string(), bssa),
        ("attention: score".to_string(), w * bssa),
        ("attention: v".to_string(), w * bsh),
        ("attention: output projection input".to_string(), w * bsh),
        ("attention: dropout mask".to_string(), bsh),
        ("ffn: first linear input".to_string(), w * bsh),
        ("ffn: activation input".to_string(), 4 * w * bsh),
        ("ffn: second linear input".to_string(), 4 * w * bsh),
        ("ffn: dropout mask".to_string(), bsh),
    ];
    // With checkpointing, the attention maximum is the quadratic set:
    // softmax input + mask + score.
    let attention_max_bytes = (2 * w + 1) * bssa;
    let ffn_max_bytes = 4 * w * bsh;
    Ok(MemoryEstimate {
        strategy: Strategy::Vanilla,
        terms,
        attention_max_bytes,
        ffn_max_bytes,
        layer_max_bytes: attention_max_bytes.max(ffn_max_bytes),
    })
}

/// Activation bytes saved by a blockwise-attention layer whose feedforward
/// still runs at full width.
pub fn flash_layer_bytes(spec: &MemorySpec, config: &ModelConfig) -> Result<MemoryEstimate> {
    spec.validate()?;
    config.validate()?;
    let w = spec.bytes_per_element as u128;
    let b = spec.batch as u128;
    let s = spec.seq_len as u128;
    let h = config.d_model as u128;
    let bsh = b * s * h;
    let terms = vec![
        ("attention: streaming output".to_string(), w * bsh),
        ("ffn: first linear input".to_string(), w * bsh),
        ("ffn: activation input".to_string(), 4 * w * bsh),
        ("ffn: second linear input".to_string(), 4 * w * bsh),
        ("ffn: dropout mask".to_string(), bsh),
    ];
    let attention_max_bytes = w * bsh;
    let ffn_max_bytes = 4 * w * bsh;
    Ok(MemoryEstimate {
        strategy: Strategy::Flash,
        terms,
        attention_max_bytes,
        ffn_max_bytes,
        layer_max_bytes: attention_max_bytes.max(ffn_max_bytes),
    })
}

/// Activation bytes saved by a fully blockwise layer. Both sublayers stream,
/// so each sublayer's maximum is its `w·bsh` loop output; the per-chunk
/// transients are reported as separate terms. The maxima quantify the
/// streaming regime where the sequence is much longer than a chunk; for
/// chunk sizes near the sequence length the transient terms in the breakdown
/// (and the measuring arena) tell the real story.
pub fn bpt_layer_bytes(spec: &MemorySpec, config: &ModelConfig) -> Result<MemoryEstimate> {
    spec.validate()?;
    config.validate()?;
    let w = spec.bytes_per_element as u128;
    let b = spec.batch as u128;
    let s = spec.seq_len as u128;
    let c = spec.chunk as u128;
    let h = config.d_model as u128;
    let bsh = b * s * h;
    let bch = b * c * h;
    let terms = vec![
        ("attention: blockwise transient".to_string(), 2 * w * bch),
        ("attention: query-loop output".to_string(), w * bsh),
        ("ffn: first linear input (chunk)".to_string(), w * bch),
        ("ffn: activation input (chunk)".to_string(), 4 * w * bch),
        ("ffn: second linear input (chunk)".to_string(), 4 * w * bch),
        ("ffn: dropout mask (chunk)".to_string(), bch),
        ("ffn: chunk transient total".to_string(), (9 * w + 1) * bch),
        ("ffn: loop output".to_string(), w * bsh),
    ];
    let attention_max_bytes = w * bsh;
    let ffn_max_bytes = w * bsh;
    Ok(MemoryEstimate {
        strategy: Strategy::Bpt,
        terms,
        attention_max_bytes,
        ffn_max_bytes,
        layer_max_bytes: attention_max_bytes.max(ffn_max_bytes),
    })
}

/// Dispatch over the three accountings.
pub fn layer_bytes(
    strategy: Strategy,
    spec: &MemorySpec,
    config: &ModelConfig,
) -> Result<MemoryEstimate> {
    match strategy {
        Strategy::Vanilla => vanilla_layer_bytes(spec, config),
        Strategy::Flash => flash_layer_bytes(spec, config),
        Strategy::Bpt => bpt_layer_bytes(spec, config),
    }
}

/// Bytes that exist regardless of sequence length: parameters, their
/// gradients, and two optimizer moments, each at 4 bytes per value. Uses the
/// published parameter count.
pub fn fixed_state_bytes(config: &ModelConfig) -> u128 {
    16 * config.n_params
}

/// Chunk size the planner assumes for the blockwise strategies: a sixteenth
/// of the sequence, at least one token. Small enough that the streaming
/// regime of the closed-form model holds at every sequence length.
pub fn planner_chunk(seq_len: u64) -> u64 {
    (seq_len / 16).max(1)
}

/// Total activation bytes for one training step at sequence length `s`:
/// layer-boundary activations for gradient checkpointing (`w·bsh` per layer;
/// for a zero-layer model, just the embedding output) plus one live layer's
/// checkpointed maximum.
pub fn activation_bytes(
    config: &ModelConfig,
    strategy: Strategy,
    batch: u64,
    seq_len: u64,
    bytes_per_element: u64,
) -> Result<u128> {
    let w = bytes_per_element as u128;
    let boundary = w * batch as u128 * seq_len as u128 * config.d_model as u128;
    if config.n_layers == 0 {
        return Ok(boundary);
    }
    let spec = MemorySpec::new(batch, seq_len, planner_chunk(seq_len))?
        .with_bytes(bytes_per_element)?;
    let layer = layer_bytes(strategy, &spec, config)?;
    Ok(config.n_layers as u128 * boundary + layer.layer_max_bytes)
}

/// Planner verdict: the largest sequence length that fits a byte budget.
#[derive(Clone, Debug)]
pub struct MaxContextReport {
    pub config_name: String,
    pub strategy: Strategy,
    pub batch: u64,
    pub budget_bytes: u128,
    pub fixed_bytes: u128,
    pub max_seq: u64,
    pub chunk: u64,
    pub activation_bytes: u128,
    /// True when the search hit its internal sequence ceiling rather than
    /// the budget.
    pub saturated: bool,
    pub assumptions: Vec<String>,
}

/// Largest `s` with `fixed_state + activation(s) ≤ budget`, found by doubling
/// then bisecting; `activation` is monotone in `s`, which makes the bisection
/// sound (a brute-force scan cross-checks this on small cases in tests).
pub fn max_context(
    config: &ModelConfig,
    budget_bytes: u128,
    strategy: Strategy,
    batch: u64,
) -> Result<MaxContextReport> {
    max_context_with_bytes(config, budget_bytes, strategy, batch, 2)
}

pub fn max_context_with_bytes(
    config: &ModelConfig,
    budget_bytes: u128,
    strategy: Strategy,
    batch: u64,
    bytes_per_element: u64,
) -> Result<MaxContextReport> {
    config.validate()?;
    if batch == 0 || bytes_per_element == 0 {
        return Err(Error::InvalidConfig(vec![
            "batch and bytes_per_element must be positive".to_string(),
        ]));
    }
    let fixed = fixed_state_bytes(config);
    let cost = |s: u64| -> Result<u128> {
        Ok(fixed + activation_bytes(config, strategy, batch, s, bytes_per_element)?)
    };
    if budget_bytes < cost(1)? {
        return Err(Error::Infeasible {
            floor_bytes: cost(1)?,
            budget_bytes,
        });
    }
    let mut lo = 1u64;
    let mut hi = 2u64;
    while hi <= PLANNER_MAX_SEQ && cost(hi)? <= budget_bytes {
        lo = hi;
        hi *= 2;
    }
    let saturated = hi > PLANNER_MAX_SEQ;
    if !saturated {
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if cost(mid)? <= budget_bytes {
                lo = mid;
            } else {
                hi = mid;
            }
        }
    }
    let mut assumptions = vec![
        format!(
            "fixed state = parameters + gradients + two optimizer moments at 4 bytes each \
             = 16 x {} published parameters = {} bytes",
            config.n_params, fixed
        ),
        format!(
            "architecture-implied parameter count: {} (published count used for budgeting)",
            config.computed_params()
        ),
        format!(
            "activations = {} layer boundaries x w*b*s*h + one live layer's checkpointed max; \
             blockwise chunk = s/16",
            config.n_layers
        ),
        format!("element width {} bytes; masks 1 byte", bytes_per_element),
    ];
    if let Some(note) = config.consistency_note() {
        assumptions.push(note);
    }
    if config.n_layers == 0 {
        assumptions.push(
            "zero-layer model: only the embedding output counts against the budget".to_string(),
        );
    }
    Ok(MaxContextReport {
        config_name: config.name.clone(),
        strategy,
        batch,
        budget_bytes,
        fixed_bytes: fixed,
        max_seq: lo,
        chunk: planner_chunk(lo),
        activation_bytes: activation_bytes(config, strategy, batch, lo, bytes_per_element)?,
        saturated,
        assumptions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::Strategy;
    use proptest::prelude::*;

    fn toy_config(n_layers: u64) -> ModelConfig {
        ModelConfig {
            name: "toy".to_string(),
            n_params: 1_000_000,
            n_layers,
            d_model: 64,
            n_heads: 4,
            d_head: 16,
            vocab: 256,
        }
    }

    #[test]
    fn vanilla_terms_match_hand_computation() {
        // b=1, s=1024, h=2048, a=16 at 2-byte elements: the softmax input
        // term is 2 * 1024^2 * 16 = 33,554,432 bytes.
        let spec = MemorySpec::new(1, 1024, 64).unwrap();
        let config = ModelConfig {
            name: "hand".into(),
            n_params: 0,
            n_layers: 1,
            d_model: 2048,
            n_heads: 16,
            d_head: 128,
            vocab: 50257,
        };
        let est = vanilla_layer_bytes(&spec, &config).unwrap();
        assert_eq!(est.term("attention: softmax input"), Some(33_554_432));
        assert_eq!(est.term("attention: mask"), Some(16_777_216));
        assert_eq!(est.term("ffn: activation input"), Some(8 * 1024 * 2048));
        // Attention max is the quadratic set: (2w+1) * b * s^2 * a.
        assert_eq!(est.attention_max_bytes, 5 * 1024 * 1024 * 16);
        assert_eq!(est.ffn_max_bytes, 8 * 1024 * 2048);
        assert_eq!(
            est.layer_max_bytes,
            est.attention_max_bytes.max(est.ffn_max_bytes)
        );
    }

    #[test]
    fn flash_layer_max_is_8bsh() {
        let spec = MemorySpec::new(1, 8192, 512).unwrap();
        let config = ModelConfig {
            name: "hand".into(),
            n_params: 0,
            n_layers: 1,
            d_model: 2048,
            n_heads: 16,
            d_head: 128,
            vocab: 50257,
        };
        let est = flash_layer_bytes(&spec, &config).unwrap();
        assert_eq!(est.layer_max_bytes, 134_217_728);
        assert_eq!(est.attention_max_bytes, 2 * 8192 * 2048);
    }

    #[test]
    fn bpt_ffn_chunk_transient_is_19bch() {
        let spec = MemorySpec::new(1, 8192, 512).unwrap();
        let config = ModelConfig {
            name: "hand".into(),
            n_params: 0,
            n_layers: 1,
            d_model: 2048,
            n_heads: 16,
            d_head: 128,
            vocab: 50257,
        };
        let est = bpt_layer_bytes(&spec, &config).unwrap();
        assert_eq!(est.term("ffn: chunk transient total"), Some(19_922_944));
        assert_eq!(est.layer_max_bytes, 2 * 8192 * 2048);
        // Single-block collapse: the chunk transient equals the vanilla FFN
        // total, 19bsh.
        let collapse = MemorySpec::new(1, 512, 512).unwrap();
        let est = bpt_layer_bytes(&collapse, &config).unwrap();
        assert_eq!(
            est.term("ffn: chunk transient total"),
            Some(19 * 512 * 2048)
        );
    }

    #[test]
    fn flash_over_bpt_is_exactly_four() {
        let config = toy_config(2);
        for (b, s) in [(1u64, 64u64), (2, 256), (4, 1024), (1, 8192), (8, 512)] {
            let spec = MemorySpec::new(b, s, (s / 16).max(1)).unwrap();
            let flash = flash_layer_bytes(&spec, &config).unwrap();
            let bpt = bpt_layer_bytes(&spec, &config).unwrap();
            assert_eq!(flash.layer_max_bytes, 4 * bpt.layer_max_bytes);
        }
    }

    #[test]
    fn vanilla_quadratic_term_quadruples_when_s_doubles() {
        let config = toy_config(2);
        let at = |s: u64| {
            let spec = MemorySpec::new(1, s, 8).unwrap();
            vanilla_layer_bytes(&spec, &config)
                .unwrap()
                .attention_max_bytes
        };
        assert_eq!(at(512), 4 * at(256));
        assert_eq!(at(4096), 4 * at(2048));
    }

    #[test]
    fn preset_rows_match_published_table() {
        let rows: Vec<(String, u128, u64, u64, u64, u64)> = ModelConfig::presets()
            .into_iter()
            .map(|c| (c.name, c.n_params, c.n_layers, c.d_model, c.n_heads, c.d_head))
            .collect();
        assert_eq!(
            rows,
            vec![
                ("gpt-1b".into(), 1_300_000_000, 24, 2048, 16, 128),
                ("gpt-3b".into(), 2_700_000_000, 32, 2560, 32, 80),
                ("gpt-7b".into(), 6_700_000_000, 32, 4096, 32, 128),
                ("gpt-13b".into(), 13_000_000_000, 40, 5140, 40, 128),
                ("gpt-30b".into(), 30_000_000_000, 48, 7168, 56, 128),
                ("gpt-70b".into(), 70_000_000_000, 80, 8192, 64, 128),
            ]
        );
    }

    #[test]
    fn computed_params_track_published_counts() {
        let frozen: &[(&str, u128)] = &[
            ("gpt-1b", 1_310_885_888),
            ("gpt-3b", 2_645_240_320),
            ("gpt-7b", 6_648_303_616),
            ("gpt-13b", 12_939_728_980),
            ("gpt-30b", 29_955_251_200),
            ("gpt-70b", 64_836_214_784),
        ];
        for &(name, want) in frozen {
            let c = ModelConfig::preset(name).unwrap();
            assert_eq!(c.computed_params(), want, "{name}");
            let rel = (c.computed_params() as f64 - c.n_params as f64).abs() / c.n_params as f64;
            // Five rows agree within 3%; the largest published count is
            // coarser (relative gap just over 7%).
            let bound = if name == "gpt-70b" { 0.08 } else { 0.03 };
            assert!(rel < bound, "{name}: relative gap {rel}");
        }
        // Exactly one preset has a head geometry that does not tile d_model.
        let notes: Vec<_> = ModelConfig::presets()
            .iter()
            .filter_map(|c| c.consistency_note())
            .collect();
        assert_eq!(notes.len(), 1);
        assert!(notes[0].contains("gpt-13b"));
    }

    #[test]
    fn planner_bpt_over_flash_context_ratio_in_band() {
        // Activation-dominated budget on a toy model: with 2 layers the
        // per-sequence costs are 3*w*b*h*s (bpt) and 6*w*b*h*s (flash), so
        // the context ratio is exactly 2, inside the claimed 2-4x band.
        let config = toy_config(2);
        let budget = fixed_state_bytes(&config) + 200_000_000;
        let bpt = max_context(&config, budget, Strategy::Bpt, 1).unwrap();
        let flash = max_context(&config, budget, Strategy::Flash, 1).unwrap();
        let vanilla = max_context(&config, budget, Strategy::Vanilla, 1).unwrap();
        assert!(bpt.max_seq >= flash.max_seq);
        assert!(flash.max_seq >= vanilla.max_seq);
        let ratio = bpt.max_seq as f64 / flash.max_seq as f64;
        assert!((2.0..=4.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn planner_binary_search_matches_linear_scan() {
        let config = toy_config(2);
        for strategy in Strategy::ALL {
            // A small budget keeps the scan cheap.
            let budget = fixed_state_bytes(&config) + 3_000_000;
            let report = max_context(&config, budget, strategy, 1).unwrap();
            let mut best = 0;
            for s in 1..=4 * report.max_seq {
                let total = fixed_state_bytes(&config)
                    + activation_bytes(&config, strategy, 1, s, 2).unwrap();
                if total <= budget {
                    best = s;
                }
            }
            assert_eq!(report.max_seq, best, "{strategy}");
        }
    }

    #[test]
    fn planner_is_monotone_in_budget() {
        let config = toy_config(4);
        let base = fixed_state_bytes(&config);
        let mut last = 0;
        for extra in [1_000_000u128, 5_000_000, 20_000_000, 80_000_000] {
            let report = max_context(&config, base + extra, Strategy::Bpt, 1).unwrap();
            assert!(report.max_seq >= last);
            last = report.max_seq;
        }
    }

    #[test]
    fn planner_rejects_budget_below_fixed_floor() {
        let config = toy_config(2);
        let err = max_context(&config, fixed_state_bytes(&config), Strategy::Bpt, 1).unwrap_err();
        match err {
            Error::Infeasible {
                floor_bytes,
                budget_bytes,
            } => {
                assert!(floor_bytes > budget_bytes);
            }
            other => panic!("expected infeasible, got {other}"),
        }
    }

    #[test]
    fn zero_layer_config_is_bounded_by_embedding_term() {
        let config = toy_config(0);
        let budget = fixed_state_bytes(&config) + 2 * 64 * 1000;
        let report = max_context(&config, budget, Strategy::Bpt, 1).unwrap();
        // w*b*s*h <= 2*64*1000 => s <= 1000.
        assert_eq!(report.max_seq, 1000);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn layer_maxima_are_ordered_for_all_specs(
            b in 1u64..8,
            s in 1u64..4096,
            c_div in 1u64..64,
            h_pow in 4u32..10,
            a_pow in 0u32..5,
            w in 1u64..5,
        ) {
            let c = (s / c_div).max(1);
            let spec = MemorySpec::new(b, s, c).unwrap().with_bytes(w).unwrap();
            let config = ModelConfig {
                name: "prop".into(),
                n_params: 0,
                n_layers: 1,
                d_model: 1 << h_pow,
                n_heads: 1 << a_pow,
                d_head: (1u64 << h_pow) >> a_pow,
                vocab: 256,
            };
            let v = vanilla_layer_bytes(&spec, &config).unwrap().layer_max_bytes;
            let f = flash_layer_bytes(&spec, &config).unwrap().layer_max_bytes;
            let p = bpt_layer_bytes(&spec, &config).unwrap().layer_max_bytes;
            prop_assert!(p <= f);
            prop_assert!(f <= v);
            prop_assert_eq!(f, 4 * p);
        }
    }
}
