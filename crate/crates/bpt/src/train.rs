//! Byte-level language-model training loop.
//!
//! Small by design: its job is to show that the three execution strategies
//! train identically on real text, not to be fast. One seed determines the
//! initialization and the data order, so two runs differing only in strategy
//! see exactly the same batches, and their losses may differ only by
//! floating-point reassociation inside the layers.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::blockwise::blockwise_cross_entropy;
use crate::error::Error;
use crate::layer::{
    self, layer_norm, layer_norm_backward, LayerGrads, LayerNormParams, LayerParams, LnGrads,
    Strategy,
};
use crate::partition::BlockPartition;
use crate::reference::cross_entropy_grad_chunk;
use crate::rng;
use crate::tensor::{Element, Tensor};
use crate::trace;
use crate::Result;

/// Byte vocabulary: every u8 is a token.
pub const VOCAB: usize = 256;

/// Everything one training run depends on. Deserializable from the CLI's
/// config files; every field has a serializable default except the corpus
/// path.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub corpus_path: PathBuf,
    #[serde(default)]
    pub metrics_path: Option<PathBuf>,
    #[serde(default = "defaults::steps")]
    pub steps: usize,
    #[serde(default = "defaults::batch")]
    pub batch: usize,
    #[serde(default = "defaults::seq_len")]
    pub seq_len: usize,
    #[serde(default = "defaults::c_q")]
    pub c_q: usize,
    #[serde(default = "defaults::c_kv")]
    pub c_kv: usize,
    #[serde(default = "defaults::n_layers")]
    pub n_layers: usize,
    #[serde(default = "defaults::d_model")]
    pub d_model: usize,
    #[serde(default = "defaults::n_heads")]
    pub n_heads: usize,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::beta1")]
    pub beta1: f64,
    #[serde(default = "defaults::beta2")]
    pub beta2: f64,
    #[serde(default = "defaults::eps")]
    pub eps: f64,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "defaults::seed")]
    pub seed: u64,
    /// Pre-layer normalization in every layer plus a final normalization.
    #[serde(default = "defaults::layer_norm")]
    pub layer_norm: bool,
    /// Measure wall-clock throughput per step. Off by default so metrics
    /// files are bitwise deterministic.
    #[serde(default)]
    pub record_throughput: bool,
    /// Route every step through the tracing arena and record its activation
    /// peak. Slower; off by default.
    #[serde(default)]
    pub trace_memory: bool,
}

mod defaults {
    pub fn steps() -> usize {
        200
    }
    pub fn batch() -> usize {
        1
    }
    pub fn seq_len() -> usize {
        128
    }
    pub fn c_q() -> usize {
        32
    }
    pub fn c_kv() -> usize {
        32
    }
    pub fn n_layers() -> usize {
        2
    }
    pub fn d_model() -> usize {
        64
    }
    pub fn n_heads() -> usize {
        4
    }
    pub fn learning_rate() -> f64 {
        3e-4
    }
    pub fn beta1() -> f64 {
        0.9
    }
    pub fn beta2() -> f64 {
        0.95
    }
    pub fn eps() -> f64 {
        1e-8
    }
    pub fn weight_decay() -> f64 {
        0.1
    }
    pub fn seed() -> u64 {
        0
    }
    pub fn layer_norm() -> bool {
        true
    }
}

impl TrainConfig {
    /// Checks every constraint and reports all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.batch == 0 {
            problems.push("batch must be at least 1".to_string());
        }
        if self.seq_len == 0 {
            problems.push("seq_len must be at least 1".to_string());
        } else {
            if self.c_q == 0 || !self.seq_len.is_multiple_of(self.c_q) {
                problems.push(format!(
                    "c_q {} must divide seq_len {}",
                    self.c_q, self.seq_len
                ));
            }
            if self.c_kv == 0 || !self.seq_len.is_multiple_of(self.c_kv) {
                problems.push(format!(
                    "c_kv {} must divide seq_len {}",
                    self.c_kv, self.seq_len
                ));
            }
        }
        if self.n_layers == 0 {
            problems.push("n_layers must be at least 1".to_string());
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads.max(1)) {
            problems.push(format!(
                "n_heads {} must divide d_model {}",
                self.n_heads, self.d_model
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            problems.push(format!("learning_rate {} must be positive", self.learning_rate));
        }
        for (label, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                problems.push(format!("{label} {beta} must lie in [0, 1)"));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            problems.push(format!("eps {} must be positive", self.eps));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            problems.push(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        if self.corpus_path.as_os_str().is_empty() {
            problems.push("corpus_path must be set".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems))
        }
    }

    pub fn partition(&self) -> Result<BlockPartition> {
        BlockPartition::new(self.seq_len, self.c_q, self.c_kv)
    }
}

/// One metrics line. Unset optional measurements print as "na".
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: f64,
    pub tokens_per_second: Option<f64>,
    pub peak_live_elements: Option<u64>,
}

pub const METRICS_HEADER: &str = "step,loss,tokens_per_second,peak_live_elements";

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        let mut line = format!("{},{}", self.step, self.loss);
        match self.tokens_per_second {
            Some(t) => write!(line, ",{t}").unwrap(),
            None => line.push_str(",na"),
        }
        match self.peak_live_elements {
            Some(p) => write!(line, ",{p}").unwrap(),
            None => line.push_str(",na"),
        }
        line
    }
}

/// Renders a full metrics file, header included.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.csv_line());
        out.push('\n');
    }
    out
}

/// Reads a corpus as raw bytes; every byte is one token.
pub fn ingest_corpus(path: &Path) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path)?;
    if bytes.is_empty() {
        return Err(Error::CorpusTooSmall {
            path: path.display().to_string(),
            tokens: 0,
            needed: 1,
        });
    }
    Ok(bytes)
}

/// Model state: token and position embeddings, the layer stack, an optional
/// final normalization, and an untied output head. The head starts at zero,
/// so an untrained model emits uniform logits and its loss is exactly ln 256.
#[derive(Debug)]
pub struct ModelParams<T: Element = f64> {
    pub tok_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Option<LayerNormParams<T>>,
    pub head: Tensor<T>,
}

impl<T: Element> ModelParams<T> {
    pub fn init(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let h = config.d_model;
        let out_stddev = 0.02 / (2.0 * config.n_layers as f64).sqrt();
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            layers.push(LayerParams::seeded_with(
                h,
                config.n_heads,
                4 * h,
                config.layer_norm,
                rng::derive_seed(config.seed, &format!("layer{l}")),
                0.02,
                out_stddev,
            )?);
        }
        Ok(ModelParams {
            tok_emb: rng::seeded_normal(
                &[VOCAB, h],
                rng::derive_seed(config.seed, "tok_emb"),
                0.02,
            )?,
            pos_emb: rng::seeded_normal(
                &[config.seq_len, h],
                rng::derive_seed(config.seed, "pos_emb"),
                0.02,
            )?,
            layers,
            final_norm: if config.layer_norm {
                Some(LayerNormParams::unit(h)?)
            } else {
                None
            },
            head: Tensor::zeros(&[h, VOCAB])?,
        })
    }

    pub fn seq_len(&self) -> usize {
        self.pos_emb.rows()
    }

    pub fn d_model(&self) -> usize {
        self.pos_emb.cols()
    }
}

/// Gradients mirroring [`ModelParams`].
struct ModelGrads<T: Element> {
    tok_emb: Tensor<T>,
    pos_emb: Tensor<T>,
    layers: Vec<Option<LayerGrads<T>>>,
    final_norm: Option<LnGrads<T>>,
    head: Tensor<T>,
}

/// Token + position embedding lookup for one window.
fn embed<T: Element>(model: &ModelParams<T>, window: &[u8]) -> Result<Tensor<T>> {
    let s = window.len();
    let h = model.d_model();
    let tok = model.tok_emb.data();
    let pos = model.pos_emb.data();
    let mut data = vec![T::zero(); s * h];
    for (i, &b) in window.iter().enumerate() {
        let t = b as usize;
        for j in 0..h {
            data[i * h + j] = tok[t * h + j] + pos[i * h + j];
        }
    }
    Tensor::from_vec(&[s, h], data)
}

/// Cross-entropy chunk width per strategy: the fused strategy streams the
/// loss one query block at a time, the others compute it densely.
fn ce_chunk(strategy: Strategy, part: &BlockPartition) -> usize {
    match strategy {
        Strategy::Bpt => part.c_q(),
        _ => part.seq_len(),
    }
}

/// Forward pass to per-chunk logits, loss, and all gradients for one window.
/// `loss_weight_rows` is the denominator shared across the whole batch so
/// per-sequence gradients sum to the batch-mean gradient.
fn window_pass<T: Element>(
    model: &ModelParams<T>,
    strategy: Strategy,
    part: &BlockPartition,
    window: &[u8],
    loss_weight_rows: usize,
    grads: &mut ModelGrads<T>,
) -> Result<T> {
    let s = part.seq_len();
    let h = model.d_model();
    debug_assert_eq!(window.len(), s + 1);
    let inputs = &window[..s];
    let targets: Vec<usize> = window[1..].iter().map(|&b| b as usize).collect();

    let x0 = embed(model, inputs)?;
    let (boundaries, out) = layer::stack_forward(strategy, x0, &model.layers, part, true)?;
    // With a final normalization its input must survive until the backward
    // pass; without one the stack output feeds the head directly.
    let (final_out, final_stats, norm_input) = match &model.final_norm {
        Some(p) => {
            let (y, st) = layer_norm(&out, p)?;
            (y, Some(st), Some(out))
        }
        None => (out, None, None),
    };

    // Loss and head/logit gradients, one chunk of rows at a time. The loss
    // accumulates row losses left to right in one scalar, so its value does
    // not depend on the chunk size.
    let chunk = ce_chunk(strategy, part);
    let mut loss_sum = T::zero();
    let mut d_final = Tensor::zeros(&[s, h])?;
    let mut start = 0;
    while start < s {
        let rows = chunk.min(s - start);
        let final_chunk = final_out.row_block(start, rows)?;
        let logits = final_chunk.matmul(&model.head)?;
        let (chunk_sum, dlogits) =
            cross_entropy_grad_chunk(&logits, &targets[start..start + rows], start, loss_weight_rows)?;
        drop(logits);
        loss_sum += chunk_sum;
        grads
            .head
            .accumulate(&Tensor::matmul_tn(&final_chunk, &dlogits)?)?;
        d_final.accumulate_block(start, 0, &dlogits.matmul_nt(&model.head)?)?;
        start += rows;
    }
    drop(final_out);

    let d_out = match (&model.final_norm, &final_stats, &norm_input) {
        (Some(p), Some(stats), Some(input)) => {
            let g = grads
                .final_norm
                .as_mut()
                .expect("final norm gradients allocated");
            let d = layer_norm_backward(input, p, stats, &d_final, g)?;
            drop(d_final);
            d
        }
        _ => d_final,
    };
    drop(norm_input);

    let (dx0, layer_grads) =
        layer::stack_backward(strategy, &boundaries, &model.layers, part, true, d_out)?;
    for (slot, g) in grads.layers.iter_mut().zip(layer_grads) {
        match slot {
            Some(acc) => acc.accumulate(&g)?,
            None => *slot = Some(g),
        }
    }

    // Embedding backward: scatter-add token rows, add position rows.
    let dx = dx0.data();
    let dtok = grads.tok_emb.data_mut();
    for (i, &b) in inputs.iter().enumerate() {
        let t = b as usize;
        for j in 0..h {
            dtok[t * h + j] += dx[i * h + j];
        }
    }
    grads.pos_emb.accumulate(&dx0)?;
    Ok(loss_sum)
}

/// First and second Adam moments for one parameter tensor.
struct AdamState<T: Element> {
    m: Tensor<T>,
    v: Tensor<T>,
}

impl<T: Element> AdamState<T> {
    fn zeros(shape: &[usize]) -> Result<Self> {
        Ok(AdamState {
            m: Tensor::zeros(shape)?,
            v: Tensor::zeros(shape)?,
        })
    }
}

/// One decoupled-weight-decay Adam update. Decay applies only where the
/// caller says (rank-2 parameters; gains, biases, and moments are exempt).
#[allow(clippy::too_many_arguments)]
fn adamw_update<T: Element>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    state: &mut AdamState<T>,
    t: u32,
    config: &TrainConfig,
    decay: bool,
) {
    let lr = T::of_f64(config.learning_rate);
    let b1 = T::of_f64(config.beta1);
    let b2 = T::of_f64(config.beta2);
    let eps = T::of_f64(config.eps);
    let one = T::one();
    let bc1 = one - T::of_f64(config.beta1.powi(t as i32));
    let bc2 = one - T::of_f64(config.beta2.powi(t as i32));
    let wd = if decay {
        T::of_f64(config.weight_decay)
    } else {
        T::zero()
    };
    let g = grad.data();
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    let p = param.data_mut();
    for i in 0..p.len() {
        m[i] = b1 * m[i] + (one - b1) * g[i];
        v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        p[i] = p[i] - lr * (mhat / (vhat.sqrt() + eps) + wd * p[i]);
    }
}

/// Adam states for the whole model, in the same tree shape as the params.
struct ModelAdam<T: Element> {
    tok_emb: AdamState<T>,
    pos_emb: AdamState<T>,
    head: AdamState<T>,
    final_norm: Option<(AdamState<T>, AdamState<T>)>,
    layers: Vec<LayerAdam<T>>,
}

struct LayerAdam<T: Element> {
    w_q: AdamState<T>,
    w_k: AdamState<T>,
    w_v: AdamState<T>,
    w_out: AdamState<T>,
    w1: AdamState<T>,
    b1: AdamState<T>,
    w2: AdamState<T>,
    b2: AdamState<T>,
    norm: Option<[AdamState<T>; 4]>,
}

impl<T: Element> ModelAdam<T> {
    fn init(model: &ModelParams<T>) -> Result<Self> {
        let mut layers = Vec::with_capacity(model.layers.len());
        for l in &model.layers {
            layers.push(LayerAdam {
                w_q: AdamState::zeros(l.attn.w_q.shape())?,
                w_k: AdamState::zeros(l.attn.w_k.shape())?,
                w_v: AdamState::zeros(l.attn.w_v.shape())?,
                w_out: AdamState::zeros(l.attn.w_out.shape())?,
                w1: AdamState::zeros(l.ffn.w1.shape())?,
                b1: AdamState::zeros(l.ffn.b1.shape())?,
                w2: AdamState::zeros(l.ffn.w2.shape())?,
                b2: AdamState::zeros(l.ffn.b2.shape())?,
                norm: match &l.norm {
                    Some(n) => Some([
                        AdamState::zeros(n.ln1.gain.shape())?,
                        AdamState::zeros(n.ln1.bias.shape())?,
                        AdamState::zeros(n.ln2.gain.shape())?,
                        AdamState::zeros(n.ln2.bias.shape())?,
                    ]),
                    None => None,
                },
            });
        }
        Ok(ModelAdam {
            tok_emb: AdamState::zeros(model.tok_emb.shape())?,
            pos_emb: AdamState::zeros(model.pos_emb.shape())?,
            head: AdamState::zeros(model.head.shape())?,
            final_norm: match &model.final_norm {
                Some(p) => Some((
                    AdamState::zeros(p.gain.shape())?,
                    AdamState::zeros(p.bias.shape())?,
                )),
                None => None,
            },
            layers,
        })
    }
}

fn fresh_grads<T: Element>(model: &ModelParams<T>) -> Result<ModelGrads<T>> {
    let _g = trace::persistent_scope("param_grad");
    Ok(ModelGrads {
        tok_emb: Tensor::zeros(model.tok_emb.shape())?,
        pos_emb: Tensor::zeros(model.pos_emb.shape())?,
        layers: model.layers.iter().map(|_| None).collect(),
        final_norm: match &model.final_norm {
            Some(p) => Some(LnGrads {
                gain: Tensor::zeros(p.gain.shape())?,
                bias: Tensor::zeros(p.bias.shape())?,
            }),
            None => None,
        },
        head: Tensor::zeros(model.head.shape())?,
    })
}

fn apply_updates<T: Element>(
    model: &mut ModelParams<T>,
    grads: &ModelGrads<T>,
    adam: &mut ModelAdam<T>,
    t: u32,
    config: &TrainConfig,
) {
    adamw_update(&mut model.tok_emb, &grads.tok_emb, &mut adam.tok_emb, t, config, true);
    adamw_update(&mut model.pos_emb, &grads.pos_emb, &mut adam.pos_emb, t, config, true);
    adamw_update(&mut model.head, &grads.head, &mut adam.head, t, config, true);
    if let (Some(p), Some(g), Some((sg, sb))) = (
        model.final_norm.as_mut(),
        grads.final_norm.as_ref(),
        adam.final_norm.as_mut(),
    ) {
        adamw_update(&mut p.gain, &g.gain, sg, t, config, false);
        adamw_update(&mut p.bias, &g.bias, sb, t, config, false);
    }
    for ((layer, grad), st) in model
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut adam.layers)
    {
        let grad = grad.as_ref().expect("layer gradient accumulated");
        adamw_update(&mut layer.attn.w_q, &grad.attn.w_q, &mut st.w_q, t, config, true);
        adamw_update(&mut layer.attn.w_k, &grad.attn.w_k, &mut st.w_k, t, config, true);
        adamw_update(&mut layer.attn.w_v, &grad.attn.w_v, &mut st.w_v, t, config, true);
        adamw_update(&mut layer.attn.w_out, &grad.attn.w_out, &mut st.w_out, t, config, true);
        adamw_update(&mut layer.ffn.w1, &grad.ffn.w1, &mut st.w1, t, config, true);
        adamw_update(&mut layer.ffn.b1, &grad.ffn.b1, &mut st.b1, t, config, false);
        adamw_update(&mut layer.ffn.w2, &grad.ffn.w2, &mut st.w2, t, config, true);
        adamw_update(&mut layer.ffn.b2, &grad.ffn.b2, &mut st.b2, t, config, false);
        if let (Some(norm), Some((g1, g2)), Some(states)) =
            (layer.norm.as_mut(), grad.norm.as_ref(), st.norm.as_mut())
        {
            adamw_update(&mut norm.ln1.gain, &g1.gain, &mut states[0], t, config, false);
            adamw_update(&mut norm.ln1.bias, &g1.bias, &mut states[1], t, config, false);
            adamw_update(&mut norm.ln2.gain, &g2.gain, &mut states[2], t, config, false);
            adamw_update(&mut norm.ln2.bias, &g2.bias, &mut states[3], t, config, false);
        }
    }
}

/// A finished run: per-step metrics and the final model.
pub struct TrainRun<T: Element = f64> {
    pub metrics: Vec<MetricsRow>,
    pub model: ModelParams<T>,
}

/// Runs the configured number of steps. Window offsets are drawn from the
/// seed alone, so runs differing only in strategy consume identical data.
/// Writes the metrics file if the config names one.
pub fn train<T: Element>(config: &TrainConfig) -> Result<TrainRun<T>> {
    config.validate()?;
    let part = config.partition()?;
    let corpus = ingest_corpus(&config.corpus_path)?;
    let needed = config.seq_len + 1;
    if corpus.len() < needed {
        return Err(Error::CorpusTooSmall {
            path: config.corpus_path.display().to_string(),
            tokens: corpus.len(),
            needed,
        });
    }
    let mut model = ModelParams::<T>::init(config)?;
    let mut adam = ModelAdam::init(&model)?;
    let data_seed = rng::derive_seed(config.seed, "data_order");
    let max_offset = corpus.len() - needed;
    let loss_rows = config.seq_len * config.batch;

    let mut metrics = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let started = config.record_throughput.then(Instant::now);
        let mut run_step = |model: &mut ModelParams<T>| -> Result<T> {
            let mut grads = fresh_grads(model)?;
            let mut loss_sum = T::zero();
            for k in 0..config.batch {
                let draw = (step * config.batch + k) as u64;
                let offset = rng::uniform_index(data_seed, draw, max_offset + 1);
                let window = &corpus[offset..offset + needed];
                loss_sum += window_pass(model, config.strategy, &part, window, loss_rows, &mut grads)?;
            }
            apply_updates(model, &grads, &mut adam, step as u32 + 1, config);
            Ok(loss_sum)
        };
        let (loss_sum, peak) = if config.trace_memory {
            let (res, data) = trace::trace(None, || run_step(&mut model));
            (res?, Some(data.peak_live_elements))
        } else {
            (run_step(&mut model)?, None)
        };
        // Row losses accumulate undivided; the recorded metric is the mean.
        let loss = loss_sum.to_f64() / loss_rows as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let tokens_per_second = started.map(|t0| {
            let elapsed = t0.elapsed().as_secs_f64().max(1e-12);
            (config.batch * config.seq_len) as f64 / elapsed
        });
        metrics.push(MetricsRow {
            step,
            loss,
            tokens_per_second,
            peak_live_elements: peak,
        });
    }
    if let Some(path) = &config.metrics_path {
        std::fs::write(path, metrics_csv(&metrics))?;
    }
    Ok(TrainRun { metrics, model })
}

/// Mean next-byte cross-entropy over non-overlapping windows of the stream.
pub fn evaluate<T: Element>(
    model: &ModelParams<T>,
    tokens: &[u8],
    strategy: Strategy,
    part: &BlockPartition,
) -> Result<f64> {
    let s = part.seq_len();
    if s != model.seq_len() {
        return Err(Error::shape(
            "evaluate",
            format!("partition seq_len {s} vs model seq_len {}", model.seq_len()),
        ));
    }
    let n_windows = tokens.len().saturating_sub(1) / s;
    if n_windows == 0 {
        return Err(Error::CorpusTooSmall {
            path: "<stream>".to_string(),
            tokens: tokens.len(),
            needed: s + 1,
        });
    }
    let chunk = ce_chunk(strategy, part);
    let mut total = 0.0;
    for w in 0..n_windows {
        let window = &tokens[w * s..w * s + s + 1];
        let inputs = &window[..s];
        let targets: Vec<usize> = window[1..].iter().map(|&b| b as usize).collect();
        let x0 = embed(model, inputs)?;
        let (_boundaries, out) = layer::stack_forward(strategy, x0, &model.layers, part, true)?;
        let final_out = match &model.final_norm {
            Some(p) => layer_norm(&out, p)?.0,
            None => out,
        };
        let loss: T = blockwise_cross_entropy(&targets, chunk, |range| {
            let rows = final_out.row_block(range.start, range.len())?;
            rows.matmul(&model.head)
        })?;
        total += loss.to_f64();
    }
    Ok(total / n_windows as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_corpus(dir: &tempfile::TempDir, text: &[u8]) -> PathBuf {
        let path = dir.path().join("corpus.bin");
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(text).unwrap();
        path
    }

    fn tiny_config(corpus: PathBuf, strategy: Strategy) -> TrainConfig {
        TrainConfig {
            strategy,
            corpus_path: corpus,
            metrics_path: None,
            steps: 20,
            batch: 1,
            seq_len: 32,
            c_q: 8,
            c_kv: 8,
            n_layers: 1,
            d_model: 16,
            n_heads: 2,
            learning_rate: 1e-2,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            seed: 11,
            layer_norm: true,
            record_throughput: false,
            trace_memory: false,
        }
    }

    #[test]
    fn ingest_is_byte_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_corpus(&dir, b"ab");
        assert_eq!(ingest_corpus(&path).unwrap(), vec![97, 98]);
        let empty_dir = tempfile::tempdir().unwrap();
        let empty = write_corpus(&empty_dir, b"");
        assert!(matches!(
            ingest_corpus(&empty),
            Err(Error::CorpusTooSmall { .. })
        ));
    }

    #[test]
    fn untrained_model_loss_is_ln_vocab() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = write_corpus(&dir, &vec![b'x'; 256]);
        let config = tiny_config(corpus, Strategy::Vanilla);
        let model = ModelParams::<f64>::init(&config).unwrap();
        let part = config.partition().unwrap();
        let tokens = vec![b'q'; 65];
        let loss = evaluate(&model, &tokens, Strategy::Vanilla, &part).unwrap();
        assert!(
            (loss - (VOCAB as f64).ln()).abs() < 1e-12,
            "loss {loss} vs ln 256 {}",
            (VOCAB as f64).ln()
        );
    }

    #[test]
    fn zero_steps_returns_empty_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = write_corpus(&dir, &vec![b'x'; 256]);
        let mut config = tiny_config(corpus, Strategy::Bpt);
        config.steps = 0;
        let run = train::<f64>(&config).unwrap();
        assert!(run.metrics.is_empty());
        // Model equals initialization.
        let fresh = ModelParams::<f64>::init(&config).unwrap();
        assert!(run.model.tok_emb.bitwise_eq(&fresh.tok_emb));
        assert!(run.model.head.bitwise_eq(&fresh.head));
    }

    #[test]
    fn training_reduces_loss_on_repetitive_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = write_corpus(&dir, "abcabcabc".repeat(40).as_bytes());
        let config = tiny_config(corpus, Strategy::Bpt);
        let run = train::<f64>(&config).unwrap();
        let first = run.metrics.first().unwrap().loss;
        let last = run.metrics.last().unwrap().loss;
        assert!(
            last < first,
            "loss should fall on a repetitive corpus: {first} -> {last}"
        );
        assert!((first - (VOCAB as f64).ln()).abs() < 1e-10);
    }

    #[test]
    fn identical_configs_produce_bitwise_identical_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = write_corpus(&dir, "the quick brown fox ".repeat(30).as_bytes());
        let config = tiny_config(corpus, Strategy::Flash);
        let a = train::<f64>(&config).unwrap();
        let b = train::<f64>(&config).unwrap();
        assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
    }

    #[test]
    fn config_validation_reports_all_problems_at_once() {
        let config = TrainConfig {
            strategy: Strategy::Bpt,
            corpus_path: PathBuf::new(),
            metrics_path: None,
            steps: 1,
            batch: 0,
            seq_len: 30,
            c_q: 7,
            c_kv: 8,
            n_layers: 0,
            d_model: 10,
            n_heads: 3,
            learning_rate: -1.0,
            beta1: 1.5,
            beta2: 0.95,
            eps: 0.0,
            weight_decay: -0.5,
            seed: 0,
            layer_norm: true,
            record_throughput: false,
            trace_memory: false,
        };
        match config.validate() {
            Err(Error::InvalidConfig(problems)) => {
                assert!(problems.len() >= 7, "got {problems:?}");
            }
            other => panic!("expected InvalidConfig, got {other:?}"),
        }
    }

    #[test]
    fn metrics_rows_render_na_for_unset_fields() {
        let row = MetricsRow {
            step: 3,
            loss: 1.5,
            tokens_per_second: None,
            peak_live_elements: None,
        };
        assert_eq!(row.csv_line(), "3,1.5,na,na");
    }
}
