//! The full forward pass: window, anchor exclusion, span-search, top-k
//! routing, per-span attention, gated combination, and the window-only
//! fallback. Prefill runs the same per-query body as incremental decode, so
//! the two paths are bit-identical by construction.

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use thiserror::Error;

use crate::anchors::{anchor_at, anchors, count_offsets_le};
use crate::attention::{combine, search_scores, span_attention, top_k_select, KernelError, RoutingDecision};
use crate::config::{substream, streams, AttnConfig, OpCounters, SequenceTensors};
use crate::fit::{fit_exponent, FitError};
use crate::span::{build_span, dedup_concat, union_len, window_span, SpanError};

#[derive(Debug, Error, PartialEq)]
pub enum LayerError {
    #[error("empty sequence")]
    EmptySequence,
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Span(#[from] SpanError),
    #[error(transparent)]
    Fit(#[from] FitError),
}

#[derive(Debug, Clone)]
pub struct LayerOutput {
    /// Attention outputs, L x d.
    pub outputs: Array2<f64>,
    /// One routing decision per position.
    pub decisions: Vec<RoutingDecision>,
    pub counters: OpCounters,
}

/// Window plus routing decision for one query: anchors minus the window are
/// scored against Ka and the top-k selected. Shared by the forward and
/// backward passes so selection sets always agree.
pub(crate) fn route_query(
    i: usize,
    seq: &SequenceTensors,
    cfg: &AttnConfig,
    counters: &mut OpCounters,
) -> Result<(Option<crate::span::Span>, RoutingDecision), KernelError> {
    let window = window_span(i, cfg.window);
    let anchor_set = anchors(i, cfg.search_exponent);

    // Candidate anchors: schedule minus the window indices.
    let mut cand_pos = Vec::with_capacity(anchor_set.anchors.len());
    let mut cand_str = Vec::with_capacity(anchor_set.anchors.len());
    for (&pos, &stride) in anchor_set.anchors.iter().zip(&anchor_set.stride_indices) {
        if window.as_ref().is_none_or(|w| pos < w.lo) {
            cand_pos.push(pos);
            cand_str.push(stride);
        }
    }

    let scores = search_scores(seq.qs.row(i), &seq.ka, &cand_pos, counters)?;
    Ok((window, top_k_select(i, &cand_pos, &cand_str, &scores, cfg.top_k)))
}

/// One query position of the forward pass. Both prefill and decode call this.
///
/// `keys_attended` counts the unique key indices this query touches (spans
/// and window deduplicated), so the per-query bound
/// k * ((b+f) * l(i) + 1) + w holds directly on the counter.
fn forward_query(
    i: usize,
    seq: &SequenceTensors,
    cfg: &AttnConfig,
) -> Result<(Array1<f64>, RoutingDecision, OpCounters), LayerError> {
    let mut counters = OpCounters {
        queries_processed: 1,
        ..OpCounters::default()
    };
    let (window, mut decision) = route_query(i, seq, cfg, &mut counters)?;

    if decision.is_fallback() {
        // Every anchor fell inside the window: attend the window directly.
        let w = window.expect("anchor i is always a candidate when no window");
        let indices: Vec<usize> = (w.lo..=w.hi).collect();
        let mut scratch = OpCounters::default();
        let out = span_attention(seq.q.row(i), &seq.k, &seq.v, &indices, &mut scratch)?;
        counters.keys_attended += indices.len() as u64;
        return Ok((out, decision, counters));
    }

    let mut span_outputs = Vec::with_capacity(decision.selected_anchors.len());
    let mut intervals: Vec<(usize, usize)> = Vec::with_capacity(decision.selected_anchors.len() + 1);
    if let Some(w) = &window {
        intervals.push((w.lo, w.hi));
    }
    for &t in &decision.selected_anchors {
        let span = build_span(i, t, cfg)?;
        let indices = dedup_concat(&span, window.as_ref());
        let mut scratch = OpCounters::default();
        span_outputs.push(span_attention(seq.q.row(i), &seq.k, &seq.v, &indices, &mut scratch)?);
        intervals.push((span.lo, span.hi));
    }
    counters.keys_attended += union_len(&intervals) as u64;
    let out = combine(&mut decision, &span_outputs);
    Ok((out, decision, counters))
}

/// Processes every query position. Query rows fan out in parallel; the merge
/// order is fixed, so results are independent of the worker count.
pub fn forward_prefill(seq: &SequenceTensors, cfg: &AttnConfig) -> Result<LayerOutput, LayerError> {
    if seq.is_empty() {
        return Err(LayerError::EmptySequence);
    }
    let rows: Vec<(Array1<f64>, RoutingDecision, OpCounters)> = (0..seq.len())
        .into_par_iter()
        .map(|i| forward_query(i, seq, cfg))
        .collect::<Result<_, _>>()?;

    let mut outputs = Array2::zeros((seq.len(), seq.dim()));
    let mut decisions = Vec::with_capacity(seq.len());
    let mut counters = OpCounters::default();
    for (i, (row, decision, delta)) in rows.into_iter().enumerate() {
        outputs.row_mut(i).assign(&row);
        decisions.push(decision);
        counters.merge(&delta);
    }
    Ok(LayerOutput {
        outputs,
        decisions,
        counters,
    })
}

/// Runs the heads of a multi-head layer independently, one tensor set per
/// head, each through the full route-and-attend pipeline.
pub fn forward_prefill_heads(
    heads: &[SequenceTensors],
    cfg: &AttnConfig,
) -> Result<Vec<LayerOutput>, LayerError> {
    heads.iter().map(|seq| forward_prefill(seq, cfg)).collect()
}

/// One decode step: identical math to iteration i = len-1 of the prefill
/// loop, returning that query's output and counter delta.
pub fn forward_decode_step(
    seq_prefix: &SequenceTensors,
    cfg: &AttnConfig,
) -> Result<(Array1<f64>, RoutingDecision, OpCounters), LayerError> {
    if seq_prefix.is_empty() {
        return Err(LayerError::EmptySequence);
    }
    forward_query(seq_prefix.len() - 1, seq_prefix, cfg)
}

/// Counter contribution of query `i` without materializing any tensors.
///
/// Selection is score-free here, so the all-equal-score tie-break applies:
/// the k' most recent non-window anchors are taken. Runs in O(k log i).
pub fn geometry_step(i: usize, cfg: &AttnConfig) -> OpCounters {
    let p = cfg.search_exponent;
    let window = window_span(i, cfg.window);
    let total = count_offsets_le(p, i as u64 + 1);
    let in_window = match &window {
        Some(w) => count_offsets_le(p, (i + 1 - w.lo) as u64),
        None => 0,
    };
    let candidates = total - in_window;

    let mut counters = OpCounters {
        anchors_scored: candidates as u64,
        queries_processed: 1,
        ..OpCounters::default()
    };
    if candidates == 0 {
        let w = window.expect("no window implies at least one candidate");
        counters.keys_attended = (w.hi - w.lo + 1) as u64;
        return counters;
    }
    let selected = cfg.top_k.min(candidates);
    let mut intervals = Vec::with_capacity(selected + 1);
    if let Some(w) = &window {
        intervals.push((w.lo, w.hi));
    }
    for s in in_window..in_window + selected {
        let t = anchor_at(i, p, s).expect("stride within candidate range");
        let span = build_span(i, t, cfg).expect("anchor within [0, i]");
        intervals.push((span.lo, span.hi));
    }
    counters.keys_attended = union_len(&intervals) as u64;
    counters
}

/// Geometry-mode prefill counters for a whole sequence.
pub fn geometry_prefill_counters(len: usize, cfg: &AttnConfig) -> OpCounters {
    (0..len)
        .into_par_iter()
        .map(|i| geometry_step(i, cfg))
        .reduce(OpCounters::default, |mut a, b| {
            a.merge(&b);
            a
        })
}

/// Counters of the dense causal oracle: every query attends its full prefix.
pub fn dense_prefill_counters(len: usize) -> OpCounters {
    let n = len as u64;
    OpCounters {
        anchors_scored: 0,
        keys_attended: n * (n + 1) / 2,
        queries_processed: n,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingRow {
    pub len: usize,
    pub anchors_scored: f64,
    pub keys_attended: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingTable {
    pub rows: Vec<ScalingRow>,
    pub slope_search: f64,
    pub slope_attend: f64,
}

/// Runs prefill at each length and fits log-log slopes of both counters.
/// Geometry mode skips the tensor math; tensor mode averages over `trials`
/// random draws from the scaling substream.
pub fn measure_scaling(
    lengths: &[usize],
    cfg: &AttnConfig,
    trials: usize,
    geometry_only: bool,
) -> Result<ScalingTable, LayerError> {
    let trials = trials.max(1);
    let mut rows = Vec::with_capacity(lengths.len());
    for &len in lengths {
        let (mut search_total, mut attend_total) = (0.0, 0.0);
        if geometry_only {
            let c = geometry_prefill_counters(len, cfg);
            search_total = c.anchors_scored as f64;
            attend_total = c.keys_attended as f64;
        } else {
            for trial in 0..trials {
                let mut rng = substream(cfg.seed, streams::SCALING + trial as u64);
                let seq = SequenceTensors::random(len, cfg.head_dim, &mut rng);
                let out = forward_prefill(&seq, cfg)?;
                search_total += out.counters.anchors_scored as f64 / trials as f64;
                attend_total += out.counters.keys_attended as f64 / trials as f64;
            }
        }
        rows.push(ScalingRow {
            len,
            anchors_scored: search_total,
            keys_attended: attend_total,
        });
    }
    let search_pts: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| (r.len as f64, r.anchors_scored))
        .collect();
    let attend_pts: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| (r.len as f64, r.keys_attended))
        .collect();
    Ok(ScalingTable {
        slope_search: fit_exponent(&search_pts)?.slope,
        slope_attend: fit_exponent(&attend_pts)?.slope,
        rows,
    })
}
