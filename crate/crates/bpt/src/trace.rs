//! Allocation tracing for activation memory.
//!
//! A thread-local arena counts live tensor elements while engine code runs.
//! Tensors register on construction and deregister on drop, so the arena sees
//! the real allocation pattern of the code under test, not a model of it.
//! Allocations are classed `Activation` or `Persistent`; parameters, optimizer
//! state, parameter gradients, and the model input are persistent and excluded
//! from the activation peak, matching how the analytical model splits
//! context-independent state from activation memory.
//!
//! The arena can enforce an artificial element cap: a registration that would
//! push activation-class live elements past the cap fails before the buffer
//! is built, which lets out-of-memory behavior be exercised at desk scale.

use std::cell::RefCell;
use std::collections::HashMap;

use crate::error::Error;
use crate::layer::{self, LayerParams, Strategy};
use crate::partition::BlockPartition;
use crate::rng;
use crate::tensor::Element;
use crate::Result;

/// Allocation class. Persistent allocations never count against the
/// activation peak or the element cap.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AllocClass {
    Activation,
    Persistent,
}

/// One timeline entry: a registration or release of `elements` under `label`.
#[derive(Clone, Debug)]
pub struct TraceEvent {
    pub label: &'static str,
    pub class: AllocClass,
    pub elements: u64,
    /// True for registration, false for release.
    pub alloc: bool,
}

struct Arena {
    next_id: u64,
    live: HashMap<u64, (u64, &'static str, AllocClass)>,
    live_activation: u64,
    live_persistent: u64,
    peak_activation: u64,
    peak_persistent: u64,
    peak_attribution: Vec<(&'static str, u64)>,
    timeline: Vec<TraceEvent>,
    cap: Option<u64>,
}

struct TraceState {
    arena: Option<Arena>,
    labels: Vec<(&'static str, AllocClass)>,
}

thread_local! {
    static STATE: RefCell<TraceState> = const { RefCell::new(TraceState {
        arena: None,
        labels: Vec::new(),
    }) };
}

/// Everything the arena observed during one traced closure.
#[derive(Clone, Debug)]
pub struct TraceData {
    /// Peak live activation-class elements.
    pub peak_live_elements: u64,
    /// Live activation elements when the closure returned (zero when nothing
    /// escaped the traced region).
    pub final_live_elements: u64,
    /// Peak live persistent elements (parameters, their gradients, the model
    /// input), which sit outside the activation cap.
    pub persistent_elements: u64,
    /// Label breakdown of the live set at the moment the peak was reached,
    /// largest first.
    pub peak_attribution: Vec<(&'static str, u64)>,
    /// Ordered registration/release events.
    pub timeline: Vec<TraceEvent>,
}

/// Runs `f` with a fresh arena installed and returns its result together with
/// the observed allocation data. Tensors created inside must be dropped inside
/// for the final live count to reach zero. Panics if a trace is already
/// active on this thread; arenas do not nest.
pub fn trace<R>(cap: Option<u64>, f: impl FnOnce() -> Result<R>) -> (Result<R>, TraceData) {
    STATE.with(|s| {
        let mut st = s.borrow_mut();
        assert!(st.arena.is_none(), "trace arenas do not nest");
        st.arena = Some(Arena {
            next_id: 1,
            live: HashMap::new(),
            live_activation: 0,
            live_persistent: 0,
            peak_persistent: 0,
            peak_activation: 0,
            peak_attribution: Vec::new(),
            timeline: Vec::new(),
            cap,
        });
    });
    let result = f();
    let data = STATE.with(|s| {
        let arena = s.borrow_mut().arena.take().expect("arena vanished");
        TraceData {
            peak_live_elements: arena.peak_activation,
            final_live_elements: arena.live_activation,
            persistent_elements: arena.peak_persistent,
            peak_attribution: arena.peak_attribution,
            timeline: arena.timeline,
        }
    });
    (result, data)
}

/// True when an arena is installed on this thread.
pub fn is_active() -> bool {
    STATE.with(|s| s.borrow().arena.is_some())
}

/// Registers an allocation under the current label scope. Returns the id to
/// release on drop, or `None` when no arena is active. Fails without
/// allocating when the cap would be exceeded.
pub(crate) fn register(elements: u64) -> Result<Option<u64>> {
    STATE.with(|s| {
        let mut st = s.borrow_mut();
        let (label, class) = st
            .labels
            .last()
            .copied()
            .unwrap_or(("tensor", AllocClass::Activation));
        let Some(arena) = st.arena.as_mut() else {
            return Ok(None);
        };
        if class == AllocClass::Activation {
            if let Some(cap) = arena.cap {
                if arena.live_activation + elements > cap {
                    return Err(Error::MemoryCap {
                        live: arena.live_activation,
                        requested: elements,
                        cap,
                    });
                }
            }
        }
        let id = arena.next_id;
        arena.next_id += 1;
        arena.live.insert(id, (elements, label, class));
        match class {
            AllocClass::Activation => arena.live_activation += elements,
            AllocClass::Persistent => {
                arena.live_persistent += elements;
                arena.peak_persistent = arena.peak_persistent.max(arena.live_persistent);
            }
        }
        arena.timeline.push(TraceEvent {
            label,
            class,
            elements,
            alloc: true,
        });
        if class == AllocClass::Activation && arena.live_activation > arena.peak_activation {
            arena.peak_activation = arena.live_activation;
            let mut by_label: HashMap<&'static str, u64> = HashMap::new();
            for (size, label, class) in arena.live.values() {
                if *class == AllocClass::Activation {
                    *by_label.entry(label).or_insert(0) += size;
                }
            }
            let mut attribution: Vec<_> = by_label.into_iter().collect();
            attribution.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
            arena.peak_attribution = attribution;
        }
        Ok(Some(id))
    })
}

/// Releases a previously registered allocation. Unknown ids are ignored so
/// tensors may outlive the arena that registered them.
pub(crate) fn release(id: u64) {
    STATE.with(|s| {
        let mut st = s.borrow_mut();
        let Some(arena) = st.arena.as_mut() else {
            return;
        };
        let Some((elements, label, class)) = arena.live.remove(&id) else {
            return;
        };
        match class {
            AllocClass::Activation => arena.live_activation -= elements,
            AllocClass::Persistent => arena.live_persistent -= elements,
        }
        arena.timeline.push(TraceEvent {
            label,
            class,
            elements,
            alloc: false,
        });
    })
}

/// RAII label scope; allocations inside register under `label`.
pub struct ScopeGuard {
    _private: (),
}

impl Drop for ScopeGuard {
    fn drop(&mut self) {
        STATE.with(|s| {
            s.borrow_mut().labels.pop();
        });
    }
}

fn push_scope(label: &'static str, class: AllocClass) -> ScopeGuard {
    STATE.with(|s| s.borrow_mut().labels.push((label, class)));
    ScopeGuard { _private: () }
}

/// Labels allocations in the current scope as activations.
pub fn scope(label: &'static str) -> ScopeGuard {
    push_scope(label, AllocClass::Activation)
}

/// Labels allocations in the current scope as persistent (excluded from the
/// activation peak and the cap).
pub fn persistent_scope(label: &'static str) -> ScopeGuard {
    push_scope(label, AllocClass::Persistent)
}

// ---------------------------------------------------------------------------
// Measured forward+backward traces over the real layer code paths.
// ---------------------------------------------------------------------------

/// What to trace: one transformer block stack at the given dimensions.
#[derive(Clone, Debug)]
pub struct TraceSpec {
    pub strategy: Strategy,
    pub seq_len: usize,
    pub c_q: usize,
    pub c_kv: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub causal: bool,
    pub seed: u64,
    /// Artificial element cap; `None` traces without a limit.
    pub cap: Option<u64>,
}

/// Result of one traced run. `completed` is false when the cap aborted it;
/// the peak then reflects the high-water mark before the abort.
#[derive(Clone, Debug)]
pub struct TraceReport {
    pub strategy: Strategy,
    pub batch: usize,
    pub seq_len: usize,
    pub c_q: usize,
    pub c_kv: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub peak_live_elements: u64,
    pub persistent_elements: u64,
    pub completed: bool,
    pub failure: Option<String>,
    pub peak_attribution: Vec<(&'static str, u64)>,
    pub timeline: Vec<TraceEvent>,
    /// Notes on where the measured policy intentionally differs from the
    /// analytical per-term accounting.
    pub notes: Vec<&'static str>,
}

/// Runs one forward+backward pass of a block stack under the arena and
/// reports the activation peak. The engine processes one sequence at a time,
/// so the echoed batch is always 1. Configuration errors fail eagerly; cap
/// hits are reported in the `completed`/`failure` fields, not as errors.
pub fn trace_forward_backward<T: Element>(spec: &TraceSpec) -> Result<TraceReport> {
    let part = BlockPartition::new(spec.seq_len, spec.c_q, spec.c_kv)?;
    if spec.n_heads == 0 || !spec.d_model.is_multiple_of(spec.n_heads) {
        return Err(Error::shape(
            "trace_forward_backward",
            format!(
                "d_model {} not divisible by n_heads {}",
                spec.d_model, spec.n_heads
            ),
        ));
    }
    if spec.n_layers == 0 {
        return Err(Error::shape("trace_forward_backward", "n_layers is zero"));
    }
    let (result, data) = trace(spec.cap, || {
        let mut layers = Vec::with_capacity(spec.n_layers);
        {
            let _params = persistent_scope("params");
            for l in 0..spec.n_layers {
                layers.push(LayerParams::<T>::seeded(
                    spec.d_model,
                    spec.n_heads,
                    4 * spec.d_model,
                    false,
                    rng::derive_seed(spec.seed, &format!("layer{l}")),
                )?);
            }
        }
        let x0 = {
            let _input = persistent_scope("model_input");
            rng::seeded_normal::<T>(
                &[spec.seq_len, spec.d_model],
                rng::derive_seed(spec.seed, "input"),
                1.0,
            )?
        };
        let upstream = {
            let _g = scope("upstream_grad");
            rng::seeded_normal::<T>(
                &[spec.seq_len, spec.d_model],
                rng::derive_seed(spec.seed, "upstream"),
                1.0,
            )?
        };
        let (boundaries, out) =
            layer::stack_forward(spec.strategy, x0, &layers, &part, spec.causal)?;
        drop(out);
        let (dx0, grads) =
            layer::stack_backward(spec.strategy, &boundaries, &layers, &part, spec.causal, upstream)?;
        drop(dx0);
        drop(grads);
        drop(boundaries);
        Ok(())
    });
    let (completed, failure) = match result {
        Ok(()) => (true, None),
        Err(Error::MemoryCap { .. }) => (false, result.err().map(|e| e.to_string())),
        Err(e) => return Err(e),
    };
    Ok(TraceReport {
        strategy: spec.strategy,
        batch: 1,
        seq_len: spec.seq_len,
        c_q: spec.c_q,
        c_kv: spec.c_kv,
        d_model: spec.d_model,
        n_heads: spec.n_heads,
        n_layers: spec.n_layers,
        peak_live_elements: data.peak_live_elements,
        persistent_elements: data.persistent_elements,
        completed,
        failure,
        peak_attribution: data.peak_attribution,
        timeline: data.timeline,
        notes: vec![
            "standard strategy saves masked scores, probabilities, and the mask; \
             feedforward internals are rematerialized in backward for every strategy",
            "parameter gradients are persistent-class and excluded from the peak",
        ],
    })
}

/// One sweep cell: the spec it ran plus the peak, or the failure message.
#[derive(Clone, Debug)]
pub struct SweepCell {
    pub spec: TraceSpec,
    pub outcome: std::result::Result<TraceReport, String>,
}

/// Traces every spec, recording per-cell failures without aborting the sweep.
pub fn sweep<T: Element>(specs: &[TraceSpec]) -> Vec<SweepCell> {
    specs
        .iter()
        .map(|spec| SweepCell {
            spec: spec.clone(),
            outcome: trace_forward_backward::<T>(spec).map_err(|e| e.to_string()),
        })
        .collect()
}

/// Least-squares slope of ln(y) against ln(x). Returns `None` with fewer than
/// two distinct points.
pub fn fit_loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let n = logs.len() as f64;
    let mean_x = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in &logs {
        num += (x - mean_x) * (y - mean_y);
        den += (x - mean_x) * (x - mean_x);
    }
    if den == 0.0 {
        return None;
    }
    Some(num / den)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn timeline_balances_and_peak_matches_running_sum() {
        let (result, data) = trace(None, || {
            let a = Tensor::<f64>::zeros(&[16, 16])?;
            {
                let _s = scope("inner");
                let b = Tensor::<f64>::zeros(&[8, 8])?;
                drop(b);
            }
            drop(a);
            Ok(())
        });
        result.unwrap();
        assert_eq!(data.final_live_elements, 0);
        let mut live: i64 = 0;
        let mut peak: i64 = 0;
        for ev in &data.timeline {
            if ev.class != AllocClass::Activation {
                continue;
            }
            live += if ev.alloc {
                ev.elements as i64
            } else {
                -(ev.elements as i64)
            };
            assert!(live >= 0, "live element count went negative");
            peak = peak.max(live);
        }
        assert_eq!(live, 0);
        assert_eq!(peak as u64, data.peak_live_elements);
        assert_eq!(data.peak_live_elements, 16 * 16 + 8 * 8);
    }

    #[test]
    fn persistent_allocations_do_not_count_toward_peak_or_cap() {
        let (result, data) = trace(Some(100), || {
            let _p = persistent_scope("params");
            let big = Tensor::<f64>::zeros(&[64, 64])?;
            drop(big);
            Ok(())
        });
        result.unwrap();
        assert_eq!(data.peak_live_elements, 0);
    }

    #[test]
    fn cap_rejects_oversized_activation_before_building_it() {
        let (result, data) = trace(Some(100), || {
            let _a = Tensor::<f64>::zeros(&[10, 5])?;
            let b = Tensor::<f64>::zeros(&[10, 6])?;
            drop(b);
            Ok(())
        });
        match result {
            Err(Error::MemoryCap {
                live,
                requested,
                cap,
            }) => {
                assert_eq!(live, 50);
                assert_eq!(requested, 60);
                assert_eq!(cap, 100);
            }
            other => panic!("expected MemoryCap, got {other:?}"),
        }
        assert_eq!(data.peak_live_elements, 50);
    }

    #[test]
    fn slope_fit_recovers_exponents() {
        let quad: Vec<(f64, f64)> = [256.0f64, 512.0, 1024.0, 2048.0]
            .iter()
            .map(|&s| (s, 3.0 * s * s))
            .collect();
        let slope = fit_loglog_slope(&quad).unwrap();
        assert!((slope - 2.0).abs() < 1e-12, "slope {slope}");
        assert!(fit_loglog_slope(&quad[..1]).is_none());
    }
}
