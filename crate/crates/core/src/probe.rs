//! Thread-local instrumentation of attention-score storage and attention
//! FLOPs.
//!
//! Attention kernels report every score tensor they allocate and every core
//! matrix product they run. Counts are grouped per attention layer; the probe
//! keeps the largest layer seen since it was enabled.

use std::cell::RefCell;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LayerCounts {
    pub score_elements: u64,
    pub flops_scores: u64,
    pub flops_apply: u64,
}

#[derive(Default)]
struct State {
    current: LayerCounts,
    peak: LayerCounts,
    layers: usize,
}

thread_local! {
    static PROBE: RefCell<Option<State>> = const { RefCell::new(None) };
}

/// Starts recording on this thread, discarding any earlier counts.
pub fn enable() {
    PROBE.with(|p| *p.borrow_mut() = Some(State::default()));
}

pub fn disable() {
    PROBE.with(|p| *p.borrow_mut() = None);
}

pub fn is_enabled() -> bool {
    PROBE.with(|p| p.borrow().is_some())
}

fn with_state(f: impl FnOnce(&mut State)) {
    PROBE.with(|p| {
        if let Some(state) = p.borrow_mut().as_mut() {
            f(state);
        }
    });
}

pub(crate) fn begin_layer() {
    with_state(|s| s.current = LayerCounts::default());
}

pub(crate) fn end_layer() {
    with_state(|s| {
        s.layers += 1;
        if s.current.score_elements > s.peak.score_elements {
            s.peak = s.current;
        }
    });
}

pub(crate) fn record_scores(elements: usize) {
    with_state(|s| s.current.score_elements += elements as u64);
}

/// FLOPs of a (batched) `m×k · k×n` product, one multiply-add counted as 2.
pub(crate) fn matmul_flops(batch: usize, m: usize, k: usize, n: usize) -> u64 {
    2 * (batch * m * k * n) as u64
}

pub(crate) fn record_score_flops(flops: u64) {
    with_state(|s| s.current.flops_scores += flops);
}

pub(crate) fn record_apply_flops(flops: u64) {
    with_state(|s| s.current.flops_apply += flops);
}

/// Peak per-layer counts and the number of attention layers observed.
pub fn snapshot() -> Result<(LayerCounts, usize)> {
    PROBE.with(|p| {
        p.borrow()
            .as_ref()
            .map(|s| (s.peak, s.layers))
            .ok_or_else(|| Error::Invalid("score probe is not enabled on this thread".into()))
    })
}
