//! Span-routed subquadratic attention, desk-scale reference implementation.
//!
//! The mechanism routes each query to a handful of contiguous key spans in two
//! steps: a sublinear anchor schedule is scored against an accumulated
//! representative stream, the top-k anchors are expanded into spans, and the
//! per-span attention outputs are combined with softmax gating. At the balanced
//! exponent setting both the search and attention stages cost O(L^{3/2}) while
//! no key position is structurally excluded from selection.
//!
//! Modules:
//! - [`config`]: hyperparameter record, validation, counters, RNG substreams
//! - [`anchors`]: deterministic stride schedule and gap bounds
//! - [`span`]: span construction, window merge, coverage audits
//! - [`accum`]: causal linear recurrence producing the representative stream
//! - [`attention`]: scoring, top-k routing, masked attention, dense oracle
//! - [`layer`]: full prefill/decode forward pass with instrumentation
//! - [`grad`]: hand-derived backward pass and finite-difference targets
//! - [`learn`]: synthetic planted-payload retrieval task for the router
//! - [`bucket`]: bucketed dispatch simulator and sorting-baseline cost model
//! - [`fit`]: log-log exponent fits

pub mod accum;
pub mod anchors;
pub mod attention;
pub mod bucket;
pub mod config;
pub mod fit;
pub mod grad;
pub mod layer;
pub mod learn;
pub mod span;
