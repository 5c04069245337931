//! Numerical kernels: search scoring, deterministic top-k, masked span
//! attention with stable softmax, gated combination, and the dense causal
//! oracle. Everything accumulates in 64-bit.

use ndarray::{Array1, Array2, ArrayView1};
use thiserror::Error;

use crate::config::OpCounters;

/// Top-k anchors, raw scores, and softmax weights for one query. This is the
/// differentiable routing path.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    pub query_pos: usize,
    /// Selected anchor positions, descending score order.
    pub selected_anchors: Vec<usize>,
    /// Stride indices aligned with `selected_anchors`.
    pub selected_strides: Vec<usize>,
    /// Raw scores s_{i,t} for the selected anchors.
    pub scores: Vec<f64>,
    /// Softmax gating weights; empty until `combine` runs (and for the
    /// window-only fallback path).
    pub weights: Vec<f64>,
}

impl RoutingDecision {
    pub fn empty(query_pos: usize) -> RoutingDecision {
        RoutingDecision {
            query_pos,
            selected_anchors: Vec::new(),
            selected_strides: Vec::new(),
            scores: Vec::new(),
            weights: Vec::new(),
        }
    }

    pub fn is_fallback(&self) -> bool {
        self.selected_anchors.is_empty()
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum KernelError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("empty index set")]
    EmptyIndexSet,
}

/// Numerically stable softmax (max subtraction). Returns an empty vector for
/// empty input.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    if scores.is_empty() {
        return Vec::new();
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Raw search scores s_{i,t} = Qs(i) . Ka(t) for each anchor position, in
/// anchor order. No 1/sqrt(d) scaling on the search path.
pub fn search_scores(
    qs_i: ArrayView1<f64>,
    ka: &Array2<f64>,
    anchor_positions: &[usize],
    counters: &mut OpCounters,
) -> Result<Vec<f64>, KernelError> {
    if qs_i.len() != ka.ncols() {
        return Err(KernelError::DimensionMismatch(format!(
            "query has {} channels, Ka has {}",
            qs_i.len(),
            ka.ncols()
        )));
    }
    if let Some(&bad) = anchor_positions.iter().find(|&&t| t >= ka.nrows()) {
        return Err(KernelError::DimensionMismatch(format!(
            "anchor {bad} outside Ka with {} rows",
            ka.nrows()
        )));
    }
    counters.anchors_scored += anchor_positions.len() as u64;
    Ok(anchor_positions
        .iter()
        .map(|&t| qs_i.dot(&ka.row(t)))
        .collect())
}

/// Deterministic top-k: highest score wins; ties resolve in favor of the
/// larger anchor position (more recent token), then the smaller stride index.
/// Returns min(k, |anchors|) entries; empty input yields an empty decision.
pub fn top_k_select(
    query_pos: usize,
    anchor_positions: &[usize],
    stride_indices: &[usize],
    scores: &[f64],
    k: usize,
) -> RoutingDecision {
    debug_assert_eq!(anchor_positions.len(), scores.len());
    debug_assert_eq!(anchor_positions.len(), stride_indices.len());
    let mut order: Vec<usize> = (0..anchor_positions.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores must be finite")
            .then(anchor_positions[b].cmp(&anchor_positions[a]))
            .then(stride_indices[a].cmp(&stride_indices[b]))
    });
    order.truncate(k);
    RoutingDecision {
        query_pos,
        selected_anchors: order.iter().map(|&r| anchor_positions[r]).collect(),
        selected_strides: order.iter().map(|&r| stride_indices[r]).collect(),
        scores: order.iter().map(|&r| scores[r]).collect(),
        weights: Vec::new(),
    }
}

/// Scaled dot-product attention restricted to an index set:
/// softmax_j(Q(i) . K(j) / sqrt(d)) applied to V over j in `indices`.
pub fn span_attention(
    q_i: ArrayView1<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    indices: &[usize],
    counters: &mut OpCounters,
) -> Result<Array1<f64>, KernelError> {
    if indices.is_empty() {
        return Err(KernelError::EmptyIndexSet);
    }
    let d = q_i.len();
    if k.ncols() != d || v.ncols() != d || k.nrows() != v.nrows() {
        return Err(KernelError::DimensionMismatch(format!(
            "Q is {d}-dim, K is {:?}, V is {:?}",
            k.dim(),
            v.dim()
        )));
    }
    if let Some(&bad) = indices.iter().find(|&&j| j >= k.nrows()) {
        return Err(KernelError::DimensionMismatch(format!(
            "index {bad} outside K/V with {} rows",
            k.nrows()
        )));
    }
    counters.keys_attended += indices.len() as u64;
    let scale = 1.0 / (d as f64).sqrt();
    let logits: Vec<f64> = indices.iter().map(|&j| q_i.dot(&k.row(j)) * scale).collect();
    let weights = softmax(&logits);
    let mut out = Array1::<f64>::zeros(d);
    for (&j, &w) in indices.iter().zip(&weights) {
        out.scaled_add(w, &v.row(j));
    }
    Ok(out)
}

/// Softmax-gated combination O_i = sum_t alpha_t A_t over the selected spans.
/// Records the weights in the decision.
pub fn combine(decision: &mut RoutingDecision, span_outputs: &[Array1<f64>]) -> Array1<f64> {
    assert_eq!(
        decision.selected_anchors.len(),
        span_outputs.len(),
        "span outputs must align with the selected anchors"
    );
    assert!(!span_outputs.is_empty(), "combine needs at least one span");
    let weights = softmax(&decision.scores);
    let mut out = Array1::<f64>::zeros(span_outputs[0].len());
    for (a, &w) in span_outputs.iter().zip(&weights) {
        out.scaled_add(w, a);
    }
    decision.weights = weights;
    out
}

/// Exact causal attention: row i attends to positions 0..=i. The arithmetic
/// per row is identical to `span_attention` over the full prefix.
pub fn dense_attention(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    counters: &mut OpCounters,
) -> Result<Array2<f64>, KernelError> {
    if q.dim() != k.dim() || q.dim() != v.dim() {
        return Err(KernelError::DimensionMismatch(format!(
            "Q {:?}, K {:?}, V {:?}",
            q.dim(),
            k.dim(),
            v.dim()
        )));
    }
    let len = q.nrows();
    let mut out = Array2::<f64>::zeros(q.dim());
    for i in 0..len {
        let prefix: Vec<usize> = (0..=i).collect();
        let row = span_attention(q.row(i), k, v, &prefix, counters)?;
        out.row_mut(i).assign(&row);
        counters.queries_processed += 1;
    }
    Ok(out)
}
