//! Span construction, window merge, and structural non-exclusion audits.

use rayon::prelude::*;
use thiserror::Error;

use crate::anchors::anchors;
use crate::config::AttnConfig;

/// A contiguous candidate range `[lo, hi]` (inclusive) centered on an anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub lo: usize,
    pub hi: usize,
    pub anchor: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.hi - self.lo + 1
    }

    pub fn is_empty(&self) -> bool {
        false // lo <= hi by construction
    }

    pub fn contains(&self, j: usize) -> bool {
        self.lo <= j && j <= self.hi
    }
}

/// The routed spans plus merged window for one query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpanSet {
    pub query_pos: usize,
    pub spans: Vec<Span>,
    pub window: Option<Span>,
    /// |DedupConcat(S_t, W)| per span, aligned with `spans`.
    pub merged_indices_count: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoverageReport {
    pub query_pos: usize,
    pub covered: bool,
    /// Empty iff covered.
    pub uncovered_positions: Vec<usize>,
}

#[derive(Debug, Error, PartialEq)]
pub enum SpanError {
    #[error("anchor {anchor} out of range for query position {query_pos}")]
    AnchorOutOfRange { anchor: usize, query_pos: usize },
}

/// Base span length: ceil(i^{p_sp}), with a minimum of 1. At the tight
/// setting p_sp = 1 - p_sh this is the gap-covering length scale.
pub fn base_span_length(i: usize, p_sp: f64) -> usize {
    if i <= 1 {
        return 1;
    }
    let x = (i as f64).powf(p_sp);
    // powf can land a hair above an exact integer; snap before ceiling
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r as usize
    } else {
        x.ceil() as usize
    }
}

/// Backward/forward index extents floor(b * l(i)) and floor(f * l(i)).
pub fn extents(i: usize, cfg: &AttnConfig) -> (usize, usize) {
    let l = base_span_length(i, cfg.span_exponent) as f64;
    (
        (cfg.backward_factor * l).floor() as usize,
        (cfg.forward_factor * l).floor() as usize,
    )
}

/// Span for one anchor: [max(0, t - b*l), min(i, t + f*l)].
pub fn build_span(i: usize, anchor: usize, cfg: &AttnConfig) -> Result<Span, SpanError> {
    if anchor > i {
        return Err(SpanError::AnchorOutOfRange {
            anchor,
            query_pos: i,
        });
    }
    let (back, fwd) = extents(i, cfg);
    Ok(Span {
        lo: anchor.saturating_sub(back),
        hi: (anchor + fwd).min(i),
        anchor,
    })
}

/// The local causal window [max(0, i - w + 1), i], or None when w = 0.
pub fn window_span(i: usize, w: usize) -> Option<Span> {
    if w == 0 {
        None
    } else {
        let lo = (i + 1).saturating_sub(w);
        Some(Span { lo, hi: i, anchor: i })
    }
}

/// Ascending, duplicate-free union of a span and the optional window.
pub fn dedup_concat(span: &Span, window: Option<&Span>) -> Vec<usize> {
    match window {
        None => (span.lo..=span.hi).collect(),
        Some(w) => {
            let (a, b) = if span.lo <= w.lo { (span, w) } else { (w, span) };
            if b.lo <= a.hi + 1 {
                // overlapping or adjacent ranges merge
                (a.lo..=a.hi.max(b.hi)).collect()
            } else {
                let mut out: Vec<usize> = (a.lo..=a.hi).collect();
                out.extend(b.lo..=b.hi);
                out
            }
        }
    }
}

/// Number of distinct indices covered by a set of inclusive ranges.
pub fn union_len(intervals: &[(usize, usize)]) -> usize {
    let mut sorted: Vec<(usize, usize)> = intervals.to_vec();
    sorted.sort_unstable();
    let mut total = 0usize;
    let mut cur: Option<(usize, usize)> = None;
    for (lo, hi) in sorted {
        match cur {
            Some((clo, chi)) if lo <= chi + 1 => cur = Some((clo, chi.max(hi))),
            Some((clo, chi)) => {
                total += chi - clo + 1;
                let _ = clo;
                cur = Some((lo, hi));
            }
            None => cur = Some((lo, hi)),
        }
    }
    if let Some((clo, chi)) = cur {
        total += chi - clo + 1;
    }
    total
}

/// Builds the SpanSet for a set of selected anchors.
pub fn span_set(i: usize, selected_anchors: &[usize], cfg: &AttnConfig) -> Result<SpanSet, SpanError> {
    let window = window_span(i, cfg.window);
    let mut spans = Vec::with_capacity(selected_anchors.len());
    let mut merged = Vec::with_capacity(selected_anchors.len());
    for &t in selected_anchors {
        let s = build_span(i, t, cfg)?;
        merged.push(match &window {
            Some(w) => union_len(&[(s.lo, s.hi), (w.lo, w.hi)]),
            None => s.len(),
        });
        spans.push(s);
    }
    Ok(SpanSet {
        query_pos: i,
        spans,
        window,
        merged_indices_count: merged,
    })
}

/// Marks every position j <= i covered by the window or by the candidate span
/// of some anchor, and reports the positions no candidate reaches.
pub fn audit_coverage(i: usize, cfg: &AttnConfig) -> CoverageReport {
    let mut covered = vec![false; i + 1];
    if let Some(w) = window_span(i, cfg.window) {
        covered[w.lo..=w.hi].fill(true);
    }
    for &t in &anchors(i, cfg.search_exponent).anchors {
        let s = build_span(i, t, cfg).expect("anchors lie in [0, i]");
        covered[s.lo..=s.hi].fill(true);
    }
    let uncovered_positions: Vec<usize> = covered
        .iter()
        .enumerate()
        .filter_map(|(j, &c)| (!c).then_some(j))
        .collect();
    CoverageReport {
        query_pos: i,
        covered: uncovered_positions.is_empty(),
        uncovered_positions,
    }
}

/// Audits every query position in [0, L-1]; returns the smallest failing
/// position, or None when the whole range is covered.
pub fn audit_coverage_range(len: usize, cfg: &AttnConfig) -> Option<usize> {
    (0..len)
        .into_par_iter()
        .filter(|&i| !audit_coverage(i, cfg).covered)
        .min()
}
