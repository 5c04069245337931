//! Bucketed dispatch simulator: (query, span) work items are grouped by
//! their key-block footprint so a tile of work shares one memory access
//! pattern, then dispatched to simulated workers with deterministic
//! work-stealing. A global-sorting alternative is modeled analytically for
//! side-by-side comparison.

use std::collections::BTreeMap;
use std::collections::VecDeque;

use crate::anchors::{anchor_at, count_offsets_le};
use crate::config::AttnConfig;
use crate::span::{build_span, window_span, Span};

/// Identifies the set of key blocks a contiguous span touches. Two items
/// share a key iff they touch the identical block set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BucketKey {
    pub end_block: usize,
    pub length_blocks: usize,
}

impl BucketKey {
    pub fn for_span(span: &Span, block_size: usize) -> BucketKey {
        assert!(block_size >= 1, "block_size must be >= 1");
        let end_block = span.hi / block_size;
        BucketKey {
            end_block,
            length_blocks: end_block - span.lo / block_size + 1,
        }
    }

    /// First block index implied by the key.
    pub fn start_block(&self) -> usize {
        self.end_block + 1 - self.length_blocks
    }
}

pub type Buckets = BTreeMap<BucketKey, Vec<(usize, Span)>>;

/// One pass over the items; the BTreeMap keeps buckets in the canonical
/// ascending (end_block, length_blocks) order.
pub fn bucketize(work_items: &[(usize, Span)], block_size: usize) -> Buckets {
    let mut buckets = Buckets::new();
    for &(query_pos, span) in work_items {
        buckets
            .entry(BucketKey::for_span(&span, block_size))
            .or_default()
            .push((query_pos, span));
    }
    buckets
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleStats {
    pub num_buckets: usize,
    /// Items per bucket, in canonical key order.
    pub items_per_bucket: Vec<(BucketKey, usize)>,
    pub tiles_issued: usize,
    /// Mean tile fill: total items / (tile_capacity * tiles_issued).
    pub occupancy_proxy: f64,
    pub steal_events: u64,
    pub total_items: usize,
}

/// Deterministic discrete dispatch model.
///
/// Buckets are enumerated in canonical order and cut into tiles of up to
/// `tile_capacity` items each (tiles never span buckets). A tile's cost is
/// its bucket's key-block footprint, the memory traffic proxy. Tiles are
/// pre-assigned round-robin; the simulation then advances a per-worker
/// clock: the earliest-free worker pops its own queue or, when empty,
/// steals from the back of the queue holding the most remaining tiles
/// (ties to the lowest worker id).
pub fn simulate_dispatch(buckets: &Buckets, workers: usize, tile_capacity: usize) -> ScheduleStats {
    assert!(workers >= 1, "workers must be >= 1");
    assert!(tile_capacity >= 1, "tile_capacity must be >= 1");

    let mut items_per_bucket = Vec::with_capacity(buckets.len());
    let mut tile_fills: Vec<usize> = Vec::new();
    let mut tile_costs: Vec<u64> = Vec::new();
    for (key, items) in buckets {
        items_per_bucket.push((*key, items.len()));
        let mut remaining = items.len();
        while remaining > 0 {
            let fill = remaining.min(tile_capacity);
            tile_fills.push(fill);
            tile_costs.push(key.length_blocks as u64);
            remaining -= fill;
        }
    }

    let mut queues: Vec<VecDeque<usize>> = vec![VecDeque::new(); workers];
    for (idx, _) in tile_fills.iter().enumerate() {
        queues[idx % workers].push_back(idx);
    }

    let mut clock = vec![0u64; workers];
    let mut steal_events = 0u64;
    let mut done = 0usize;
    while done < tile_fills.len() {
        // The earliest-free worker acts next; ties go to the lowest id.
        let w = (0..workers).min_by_key(|&w| (clock[w], w)).expect("workers >= 1");
        let tile = match queues[w].pop_front() {
            Some(t) => t,
            None => {
                let victim = (0..workers)
                    .filter(|&v| v != w && !queues[v].is_empty())
                    .max_by_key(|&v| (queues[v].len(), std::cmp::Reverse(v)))
                    .expect("undone tiles remain in some queue");
                steal_events += 1;
                queues[victim].pop_back().expect("victim queue non-empty")
            }
        };
        clock[w] += tile_costs[tile];
        done += 1;
    }

    let total_items: usize = tile_fills.iter().sum();
    let tiles_issued = tile_fills.len();
    let occupancy_proxy = if tiles_issued == 0 {
        1.0
    } else {
        total_items as f64 / (tile_capacity * tiles_issued) as f64
    };
    ScheduleStats {
        num_buckets: buckets.len(),
        items_per_bucket,
        tiles_issued,
        occupancy_proxy,
        steal_events,
        total_items,
    }
}

/// Analytic cost of the global-sorting alternative: comparison sort over the
/// items plus two permutation passes (queries in, outputs back out) of
/// `row_bytes` per item.
pub fn sorting_baseline_cost(n_items: usize, row_bytes: usize) -> (u64, u64) {
    let n = n_items as u64;
    let sort_ops = if n_items <= 1 {
        0
    } else {
        (n_items as f64 * (n_items as f64).log2()).ceil() as u64
    };
    (sort_ops, 2 * n * row_bytes as u64)
}

/// Number of passes over the items bucketize makes: one.
pub fn bucketize_pass_count(n_items: usize) -> u64 {
    n_items as u64
}

/// Routed-span work items for a full prefill, from geometry alone (scores are
/// content-free here, so the k most recent non-window anchors stand in for
/// the selection). Window segments are a separate uniform stream and are not
/// bucketed.
pub fn prefill_workload(len: usize, cfg: &AttnConfig) -> Vec<(usize, Span)> {
    let p = cfg.search_exponent;
    let mut items = Vec::new();
    for i in 0..len {
        let window = window_span(i, cfg.window);
        let total = count_offsets_le(p, i as u64 + 1);
        let in_window = match &window {
            Some(w) => count_offsets_le(p, (i + 1 - w.lo) as u64),
            None => 0,
        };
        let selected = cfg.top_k.min(total - in_window);
        for s in in_window..in_window + selected {
            let t = anchor_at(i, p, s).expect("stride within candidate range");
            let span = build_span(i, t, cfg).expect("anchor within [0, i]");
            items.push((i, span));
        }
    }
    items
}
