//! Shared configuration, domain tensors, instrumentation counters, and
//! deterministic RNG substreams.

use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// All mechanism hyperparameters in one validated record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttnConfig {
    /// Anchor-count exponent p_sh in (0, 1).
    pub search_exponent: f64,
    /// Span-length exponent p_sp in (0, 1).
    pub span_exponent: f64,
    /// Number of routed spans per query.
    pub top_k: usize,
    /// Backward span extent multiplier b.
    pub backward_factor: f64,
    /// Forward span extent multiplier f.
    pub forward_factor: f64,
    /// Sliding-window size in tokens (0 disables the window).
    pub window: usize,
    /// Key-block size for bucketing, in tokens.
    pub block_size: usize,
    /// Per-head feature dimension d.
    pub head_dim: usize,
    pub num_heads: usize,
    /// Deterministic RNG seed; all randomness derives from it.
    pub seed: u64,
}

impl Default for AttnConfig {
    /// The extended routing configuration: balanced exponents with extra
    /// backward/forward redundancy and a 1088-token local window.
    fn default() -> Self {
        AttnConfig {
            search_exponent: 0.5,
            span_exponent: 0.5,
            top_k: 2,
            backward_factor: 4.0,
            forward_factor: 2.0,
            window: 1088,
            block_size: 64,
            head_dim: 16,
            num_heads: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("exponent sum too small: search_exponent + span_exponent = {sum} < 1")]
    ExponentSumTooSmall { sum: f64 },
    #[error("backward_factor too small: {value} < 1/search_exponent = {bound}")]
    BackwardFactorTooSmall { value: f64, bound: f64 },
    #[error("field `{field}` out of range: {message}")]
    NonPositiveField { field: &'static str, message: String },
    #[error("config parse error: {0}")]
    Parse(String),
}

fn positive_field(field: &'static str, ok: bool, message: &str) -> Result<(), ConfigError> {
    if ok {
        Ok(())
    } else {
        Err(ConfigError::NonPositiveField {
            field,
            message: message.to_string(),
        })
    }
}

/// Checks every structural invariant and, when `coverage_required`, the
/// reachability constraints p_sh + p_sp >= 1 and b >= 1/p_sh.
///
/// Returns the config unchanged on success, so validation is idempotent.
pub fn validate_config(cfg: AttnConfig, coverage_required: bool) -> Result<AttnConfig, ConfigError> {
    positive_field(
        "search_exponent",
        cfg.search_exponent > 0.0 && cfg.search_exponent < 1.0,
        "must lie in (0, 1)",
    )?;
    positive_field(
        "span_exponent",
        cfg.span_exponent > 0.0 && cfg.span_exponent < 1.0,
        "must lie in (0, 1)",
    )?;
    positive_field("top_k", cfg.top_k >= 1, "must be >= 1")?;
    positive_field(
        "backward_factor",
        cfg.backward_factor >= 0.0 && cfg.backward_factor.is_finite(),
        "must be a finite non-negative real",
    )?;
    positive_field(
        "forward_factor",
        cfg.forward_factor >= 0.0 && cfg.forward_factor.is_finite(),
        "must be a finite non-negative real",
    )?;
    positive_field("block_size", cfg.block_size >= 1, "must be >= 1")?;
    positive_field("head_dim", cfg.head_dim >= 1, "must be >= 1")?;
    positive_field("num_heads", cfg.num_heads >= 1, "must be >= 1")?;

    if coverage_required {
        let sum = cfg.search_exponent + cfg.span_exponent;
        if sum < 1.0 - 1e-12 {
            return Err(ConfigError::ExponentSumTooSmall { sum });
        }
        let bound = 1.0 / cfg.search_exponent;
        if cfg.backward_factor < bound - 1e-12 {
            return Err(ConfigError::BackwardFactorTooSmall {
                value: cfg.backward_factor,
                bound,
            });
        }
    }
    Ok(cfg)
}

impl AttnConfig {
    /// Parses the flat JSON config format. Unknown keys are a hard error.
    pub fn from_json_str(s: &str) -> Result<AttnConfig, ConfigError> {
        serde_json::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn from_path(path: &Path) -> Result<AttnConfig, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Parse(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }
}

/// Instrumentation totals used for the exponent fits. Counters are sharded
/// per worker and merged deterministically, so they only ever grow.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct OpCounters {
    /// Total anchor score evaluations.
    pub anchors_scored: u64,
    /// Total unique (query, key) attention pairs per query, after dedup
    /// across the routed spans and the window.
    pub keys_attended: u64,
    pub queries_processed: u64,
}

impl OpCounters {
    pub fn merge(&mut self, other: &OpCounters) {
        self.anchors_scored += other.anchors_scored;
        self.keys_attended += other.keys_attended;
        self.queries_processed += other.queries_processed;
    }
}

/// Per-position tensors for one head. All matrices are L x d.
#[derive(Debug, Clone)]
pub struct SequenceTensors {
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// Search/routing query vectors Q_s(i).
    pub qs: Array2<f64>,
    /// Accumulated representative keys K_a(t).
    pub ka: Array2<f64>,
}

#[derive(Debug, Error)]
#[error("tensor shape mismatch: {0}")]
pub struct ShapeMismatch(pub String);

impl SequenceTensors {
    pub fn new(
        q: Array2<f64>,
        k: Array2<f64>,
        v: Array2<f64>,
        qs: Array2<f64>,
        ka: Array2<f64>,
    ) -> Result<SequenceTensors, ShapeMismatch> {
        let dim = q.dim();
        for (name, m) in [("K", &k), ("V", &v), ("Qs", &qs), ("Ka", &ka)] {
            if m.dim() != dim {
                return Err(ShapeMismatch(format!(
                    "{name} is {:?}, expected {:?}",
                    m.dim(),
                    dim
                )));
            }
        }
        Ok(SequenceTensors { q, k, v, qs, ka })
    }

    pub fn len(&self) -> usize {
        self.q.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.q.ncols()
    }

    /// Random gaussian tensors with Ka = K (the passthrough scoring mode).
    pub fn random(len: usize, dim: usize, rng: &mut impl Rng) -> SequenceTensors {
        let q = gaussian_matrix(len, dim, rng);
        let k = gaussian_matrix(len, dim, rng);
        let v = gaussian_matrix(len, dim, rng);
        let qs = gaussian_matrix(len, dim, rng);
        let ka = k.clone();
        SequenceTensors { q, k, v, qs, ka }
    }
}

pub fn gaussian_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

/// Stream ids for [`substream`]; one per consumer so results are bitwise
/// reproducible regardless of execution order.
pub mod streams {
    pub const SCALING: u64 = 1;
    pub const EQUIVALENCE: u64 = 2;
    pub const GRADCHECK: u64 = 3;
    pub const LEARN_INIT: u64 = 4;
    pub const LEARN_EPISODES: u64 = 5;
    pub const ACCUM_PARAMS: u64 = 6;
}

/// A counter-based substream of the run seed.
pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
