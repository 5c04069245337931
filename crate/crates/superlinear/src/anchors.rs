//! Deterministic candidate-anchor schedule.
//!
//! For query position `i` and exponent `p`, the anchor at stride index `s`
//! sits at `i - (s+1)^{1/p} + 1`, rounded to the nearest integer. Generation
//! stops at the first stride whose position would fall below zero, so every
//! anchor lies in `[0, i]` and the list is strictly decreasing with
//! `anchors[0] = i`. The schedule yields O(i^p) anchors per query.

use crate::fit::{fit_exponent, FitError};

/// The ordered candidate anchors for one query position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnchorSet {
    pub query_pos: usize,
    /// Anchor token positions, descending.
    pub anchors: Vec<usize>,
    /// Stride indices aligned with `anchors`.
    pub stride_indices: Vec<usize>,
}

/// Offset of stride `s` from position i+1: round((s+1)^{1/p}).
///
/// At p = 1/2 this is exact for all s+1 <= 2^26; nearest-integer rounding
/// keeps that case bit-exact against the hand-worked schedule.
fn stride_offset(inv_p: f64, s: usize) -> u64 {
    ((s as f64 + 1.0).powf(inv_p)).round() as u64
}

fn check_exponent(p: f64) {
    assert!(p > 0.0 && p < 1.0, "exponent must lie in (0, 1), got {p}");
}

/// Anchor position at stride `s` for query `i`, or None once negative.
pub fn anchor_at(i: usize, p: f64, s: usize) -> Option<usize> {
    check_exponent(p);
    let off = stride_offset(1.0 / p, s);
    if off > i as u64 + 1 {
        None
    } else {
        Some((i as u64 + 1 - off) as usize)
    }
}

/// All candidate anchors for query position `i`, descending.
pub fn anchors(i: usize, p: f64) -> AnchorSet {
    check_exponent(p);
    let inv_p = 1.0 / p;
    let mut positions = Vec::new();
    let mut strides = Vec::new();
    for s in 0.. {
        let off = stride_offset(inv_p, s);
        if off > i as u64 + 1 {
            break;
        }
        positions.push((i as u64 + 1 - off) as usize);
        strides.push(s);
    }
    AnchorSet {
        query_pos: i,
        anchors: positions,
        stride_indices: strides,
    }
}

/// Number of strides with offset <= `bound`, without enumerating them.
/// The offset is non-decreasing in the stride index, so binary search works.
pub fn count_offsets_le(p: f64, bound: u64) -> usize {
    check_exponent(p);
    let inv_p = 1.0 / p;
    if bound == 0 || stride_offset(inv_p, 0) > bound {
        return 0;
    }
    let mut lo = 0usize; // offset(lo) <= bound
    let mut hi = 1usize;
    while stride_offset(inv_p, hi) <= bound {
        lo = hi;
        hi *= 2;
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if stride_offset(inv_p, mid) <= bound {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo + 1
}

/// |anchors(i, p)| in O(log i) time.
pub fn anchor_count(i: usize, p: f64) -> usize {
    count_offsets_le(p, i as u64 + 1)
}

/// Exact maximum gap between consecutive anchors, including the gap from the
/// last anchor down to position 0.
pub fn max_gap(i: usize, p: f64) -> usize {
    let set = anchors(i, p);
    let mut max = 0usize;
    let mut prev = None;
    for &a in &set.anchors {
        if let Some(pv) = prev {
            max = max.max(pv - a);
        }
        prev = Some(a);
    }
    if let Some(last) = prev {
        max = max.max(last);
    }
    max
}

/// Analytic gap bound from the mean value theorem on (s+1)^{1/p}.
///
/// Consecutive anchors at strides s, s+1 differ by at most
/// (1/p)(s+2)^{1/p-1}; the tail gap from the last anchor (stride S) down to
/// position 0 is smaller than the would-be next offset difference, which uses
/// stride S+1. Evaluating the derivative there and adding 1 for the
/// nearest-integer rounding of each offset gives a bound that also covers
/// the tail: (1/p)(S+2)^{1/p-1} + 1.
pub fn max_gap_bound(i: usize, p: f64) -> f64 {
    check_exponent(p);
    let s_max = anchor_count(i, p).saturating_sub(1) as f64;
    (1.0 / p) * (s_max + 2.0).powf(1.0 / p - 1.0) + 1.0
}

/// Least-squares slope of log |anchors(L-1, p)| against log L.
pub fn anchor_count_exponent_fit(lengths: &[usize], p: f64) -> Result<f64, FitError> {
    let points: Vec<(f64, f64)> = lengths
        .iter()
        .map(|&len| (len as f64, anchor_count(len.saturating_sub(1), p) as f64))
        .collect();
    Ok(fit_exponent(&points)?.slope)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example_at_thirty() {
        let set = anchors(30, 0.5);
        assert_eq!(set.anchors, vec![30, 27, 22, 15, 6]);
        assert_eq!(set.stride_indices, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn position_zero_single_anchor() {
        assert_eq!(anchors(0, 0.5).anchors, vec![0]);
    }

    #[test]
    fn small_example_by_enumeration() {
        // i - (s+1)^2 + 1 while >= 0
        assert_eq!(anchors(10, 0.5).anchors, vec![10, 7, 2]);
    }

    #[test]
    fn first_anchor_is_query_position() {
        for i in [0usize, 1, 5, 100, 4096] {
            for p in [0.3, 0.5, 0.54, 0.7] {
                assert_eq!(anchors(i, p).anchors[0], i);
            }
        }
    }

    #[test]
    fn gap_sequence_starts_with_odd_numbers_at_half() {
        let set = anchors(10_000, 0.5);
        let gaps: Vec<usize> = set
            .anchors
            .windows(2)
            .map(|w| w[0] - w[1])
            .collect();
        assert_eq!(&gaps[..5], &[3, 5, 7, 9, 11]);
    }

    #[test]
    fn max_gap_trivial_and_worked_cases() {
        assert_eq!(max_gap(1, 0.5), 1);
        // For [30, 27, 22, 15, 6] the diffs are 3, 5, 7, 9 and the tail gap
        // to zero is 6; the brute maximum is 9.
        let set = anchors(30, 0.5);
        let mut brute = *set.anchors.last().unwrap();
        for w in set.anchors.windows(2) {
            brute = brute.max(w[0] - w[1]);
        }
        assert_eq!(brute, 9);
        assert_eq!(max_gap(30, 0.5), brute);
    }

    #[test]
    fn max_gap_respects_analytic_bound() {
        for p in [0.5, 1.0 / 3.0, 0.6] {
            for i in 0..4096usize {
                assert!(
                    max_gap(i, p) as f64 <= max_gap_bound(i, p) + 1e-9,
                    "gap bound violated at i={i}, p={p}"
                );
            }
            for i in [10_000usize, 123_457, 1 << 20] {
                assert!(max_gap(i, p) as f64 <= max_gap_bound(i, p) + 1e-9);
            }
        }
        // Away from the tiny-i tail regime the raw mean-value bound
        // (1/p)(S+1)^{1/p-1} holds as well.
        let s_max = anchor_count(10_000, 0.5) as f64 - 1.0;
        assert!(max_gap(10_000, 0.5) as f64 <= 2.0 * (s_max + 1.0));
    }

    #[test]
    fn anchor_count_matches_enumeration() {
        for p in [0.5, 1.0 / 3.0, 0.54, 0.8] {
            for i in (0..2000).step_by(7) {
                assert_eq!(anchor_count(i, p), anchors(i, p).anchors.len());
            }
        }
    }

    #[test]
    fn exponent_fit_tracks_p() {
        let lengths: Vec<usize> = (10..=20).map(|k| 1usize << k).collect();
        let slope_half = anchor_count_exponent_fit(&lengths, 0.5).unwrap();
        assert!((0.48..=0.52).contains(&slope_half), "slope {slope_half}");
        let slope_third = anchor_count_exponent_fit(&lengths, 1.0 / 3.0).unwrap();
        assert!((0.30..=0.37).contains(&slope_third), "slope {slope_third}");
    }

    #[test]
    fn exponent_fit_degenerate_on_equal_lengths() {
        assert!(anchor_count_exponent_fit(&[1024, 1024], 0.5).is_err());
    }
}
