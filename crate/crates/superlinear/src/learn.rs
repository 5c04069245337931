//! Toy learnability experiment: a payload is planted at a random position and
//! a marker trace is folded into the representative keys by the causal
//! recurrence. Only the search-query projection trains (optionally the
//! representative-key projection too), by plain gradient descent on squared
//! error, so convergence isolates the routing path.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::accum::{accumulate, RecurrenceParams};
use crate::config::{gaussian_matrix, streams, substream, AttnConfig, SequenceTensors};
use crate::grad::{backward_query, GradientBundle};
use crate::layer::LayerError;
use crate::span::{build_span, window_span};

/// Parameters of the planted-payload retrieval task.
#[derive(Debug, Clone)]
pub struct TaskConfig {
    pub seq_len: usize,
    pub head_dim: usize,
    /// Magnitude of the marker written into channel 0 at the payload position
    /// (both into the key row and into the recurrence input).
    pub marker_scale: f64,
    /// Std of iid noise added to K_a after the recurrence. Adding it outside
    /// the scan keeps anchor scores decorrelated, so the two routed spans
    /// spread out instead of collapsing onto adjacent anchors.
    pub ka_noise: f64,
    /// Retention of the recurrence carrying the marker forward.
    pub ka_decay: f64,
    pub episodes_per_step: usize,
    pub learning_rate: f64,
    /// Reuse the step-0 batch every step (for the monotone-loss smoke test).
    pub freeze_batch: bool,
    /// Also train the representative-key projection.
    pub train_ka: bool,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            seq_len: 1024,
            head_dim: 8,
            marker_scale: 8.0,
            ka_noise: 1.0,
            ka_decay: 0.995,
            episodes_per_step: 8,
            learning_rate: 0.5,
            freeze_batch: false,
            train_ka: false,
        }
    }
}

/// One point of the learning curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearnRecord {
    pub step: usize,
    /// Mean per-channel squared error over the step's batch, measured before
    /// the update, so step 0 reports the untrained router.
    pub loss: f64,
    /// Fraction of episodes whose routed spans (or window) cover the payload.
    pub routing_accuracy: f64,
}

/// A drawn episode: everything except Qs and the (optional) Ka projection,
/// which come from the trainable parameters.
struct Episode {
    payload_pos: usize,
    payload: Array1<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Pre-projection representative keys from the marker recurrence.
    ka_raw: Array2<f64>,
}

fn draw_episode(task: &TaskConfig, cfg: &AttnConfig, rng: &mut impl Rng) -> Episode {
    let (len, d) = (task.seq_len, task.head_dim);
    // Payload positions older than the window, so retrieval needs routing.
    let eligible = len - cfg.window.min(len - 1);
    let payload_pos = rng.gen_range(0..eligible);
    let payload = gaussian_matrix(1, d, rng).row(0).to_owned();

    let mut k = gaussian_matrix(len, d, rng);
    let mut v = gaussian_matrix(len, d, rng);
    k[[payload_pos, 0]] += task.marker_scale;
    v.row_mut(payload_pos).assign(&payload);

    // The marker spike decays forward through the recurrence; iid noise is
    // layered on top afterwards.
    let mut x = Array2::zeros((len, d));
    x[[payload_pos, 0]] = task.marker_scale;
    let params = RecurrenceParams::identity(d, task.ka_decay);
    let mut ka_raw = accumulate(&x, &params).expect("identity recurrence params are valid");
    for v in ka_raw.iter_mut() {
        *v += rng.sample::<f64, _>(StandardNormal) * task.ka_noise;
    }

    Episode { payload_pos, payload, k, v, ka_raw }
}

fn episode_tensors(
    ep: &Episode,
    task: &TaskConfig,
    qs_vec: &Array1<f64>,
    w_a: Option<&Array2<f64>>,
) -> SequenceTensors {
    let (len, d) = (task.seq_len, task.head_dim);
    // The retrieval query is fixed and marker-aligned: the routed span's
    // attention sharpens on the payload key, so the loss depends on routing.
    let mut q = Array2::zeros((len, d));
    q[[len - 1, 0]] = task.marker_scale;
    let mut qs = Array2::zeros((len, d));
    qs.row_mut(len - 1).assign(qs_vec);
    let ka = match w_a {
        Some(w) => ep.ka_raw.dot(&w.t()),
        None => ep.ka_raw.clone(),
    };
    SequenceTensors {
        q,
        k: ep.k.clone(),
        v: ep.v.clone(),
        qs,
        ka,
    }
}

fn covers_payload(
    decision: &crate::attention::RoutingDecision,
    payload_pos: usize,
    query_pos: usize,
    cfg: &AttnConfig,
) -> bool {
    if let Some(w) = window_span(query_pos, cfg.window) {
        if w.contains(payload_pos) {
            return true;
        }
    }
    decision.selected_anchors.iter().any(|&t| {
        build_span(query_pos, t, cfg)
            .map(|s| s.contains(payload_pos))
            .unwrap_or(false)
    })
}

/// Runs `steps` gradient-descent steps and returns the learning curve.
///
/// Trainables are the search-query projection W_s (Qs = W_s u for a fixed
/// probe u) and, when `train_ka`, a square projection applied to the
/// recurrence output. The top-k selection is frozen per episode; gradients
/// reach W_s through the gating weights of the selected spans only.
pub fn toy_learnability(
    task: &TaskConfig,
    cfg: &AttnConfig,
    steps: usize,
    seed: u64,
) -> Result<Vec<LearnRecord>, LayerError> {
    let d = task.head_dim;
    let cfg = AttnConfig {
        head_dim: d,
        ..cfg.clone()
    };
    let mut init_rng = substream(seed, streams::LEARN_INIT);
    let probe = gaussian_matrix(1, d, &mut init_rng).row(0).to_owned();
    let mut w_s = gaussian_matrix(d, d, &mut init_rng) * (0.1 / (d as f64).sqrt());
    let mut w_a = if task.train_ka {
        Some(Array2::<f64>::eye(d))
    } else {
        None
    };

    let mut episode_rng = substream(seed, streams::LEARN_EPISODES);
    let frozen: Option<Vec<Episode>> = task.freeze_batch.then(|| {
        (0..task.episodes_per_step)
            .map(|_| draw_episode(task, &cfg, &mut episode_rng))
            .collect()
    });

    let query_pos = task.seq_len - 1;
    let batch = task.episodes_per_step.max(1) as f64;
    let mut curve = Vec::with_capacity(steps);
    for step in 0..steps {
        let episodes: Vec<Episode> = if frozen.is_some() {
            Vec::new()
        } else {
            (0..task.episodes_per_step)
                .map(|_| draw_episode(task, &cfg, &mut episode_rng))
                .collect()
        };
        let batch_eps: &[Episode] = frozen.as_deref().unwrap_or(&episodes);

        let qs_vec = w_s.dot(&probe);
        let mut d_w_s = Array2::<f64>::zeros((d, d));
        let mut d_w_a = Array2::<f64>::zeros((d, d));
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        let zero_cotangent = Array1::<f64>::zeros(d);
        for ep in batch_eps {
            let seq = episode_tensors(ep, task, &qs_vec, w_a.as_ref());
            let mut bundle = GradientBundle::zeros(task.seq_len, d);
            // First pass recovers the output to form the squared-error
            // cotangent, second pass accumulates the gradient.
            let (decision, out) =
                backward_query(query_pos, &seq, &cfg, zero_cotangent.view(), &mut bundle)?;
            let err = &out - &ep.payload;
            loss_sum += err.dot(&err) / d as f64;
            if covers_payload(&decision, ep.payload_pos, query_pos, &cfg) {
                hits += 1;
            }
            let d_o = &err * (2.0 / (d as f64 * batch));
            backward_query(query_pos, &seq, &cfg, d_o.view(), &mut bundle)?;
            // Chain into the projections: Qs = W_s u, Ka = ka_raw W_a^T.
            for r in 0..d {
                for c in 0..d {
                    d_w_s[[r, c]] += bundle.d_qs[[query_pos, r]] * probe[c];
                }
            }
            if w_a.is_some() {
                for &t in &decision.selected_anchors {
                    for r in 0..d {
                        for c in 0..d {
                            d_w_a[[r, c]] += bundle.d_ka[[t, r]] * ep.ka_raw[[t, c]];
                        }
                    }
                }
            }
        }
        curve.push(LearnRecord {
            step,
            loss: loss_sum / batch,
            routing_accuracy: hits as f64 / batch,
        });
        w_s.scaled_add(-task.learning_rate, &d_w_s);
        if let Some(wa) = &mut w_a {
            wa.scaled_add(-task.learning_rate, &d_w_a);
        }
    }
    Ok(curve)
}

/// Exact expected routing accuracy of a score-blind router that selects a
/// uniformly random k-subset of the candidate anchors, averaged over payload
/// positions in [0, eligible). Computed purely from span geometry by
/// inclusion over the covering-anchor count c at each payload position:
/// P(hit) = 1 - prod_{t<k} (M - c - t) / (M - t).
pub fn random_subset_accuracy(task: &TaskConfig, cfg: &AttnConfig) -> f64 {
    let query_pos = task.seq_len - 1;
    let window = window_span(query_pos, cfg.window);
    let set = crate::anchors::anchors(query_pos, cfg.search_exponent);
    let cands: Vec<usize> = set
        .anchors
        .iter()
        .copied()
        .filter(|&t| window.as_ref().map_or(true, |w| t < w.lo))
        .collect();
    let m = cands.len();
    let spans: Vec<crate::span::Span> = cands
        .iter()
        .map(|&t| build_span(query_pos, t, cfg).expect("anchor in range"))
        .collect();
    let eligible = task.seq_len - cfg.window.min(task.seq_len - 1);
    let mut total = 0.0;
    for j in 0..eligible {
        if window.as_ref().is_some_and(|w| w.contains(j)) {
            total += 1.0;
            continue;
        }
        let c = spans.iter().filter(|s| s.contains(j)).count();
        let k = cfg.top_k.min(m);
        let mut miss = 1.0;
        for t in 0..k {
            miss *= (m - c).saturating_sub(t) as f64 / (m - t) as f64;
        }
        total += 1.0 - miss;
    }
    total / eligible as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn routed_cfg(window: usize) -> AttnConfig {
        AttnConfig {
            search_exponent: 0.5,
            span_exponent: 0.5,
            top_k: 2,
            backward_factor: 4.0,
            forward_factor: 2.0,
            window,
            head_dim: 8,
            ..AttnConfig::default()
        }
    }

    #[test]
    fn payload_inside_window_is_covered_at_step_zero() {
        // Window spans the whole sequence, so every payload position is
        // locally attended regardless of routing.
        let task = TaskConfig {
            seq_len: 256,
            episodes_per_step: 16,
            ..TaskConfig::default()
        };
        let cfg = routed_cfg(256);
        let curve = toy_learnability(&task, &cfg, 1, 0).unwrap();
        assert_eq!(curve[0].routing_accuracy, 1.0);
    }

    #[test]
    fn untrained_accuracy_matches_random_subset_coverage() {
        // Memoryless recurrence with no marker: scores are iid across
        // anchors, so selection is a uniform random k-subset and the measured
        // hit rate must match the analytic geometry-only expectation.
        let task = TaskConfig {
            seq_len: 512,
            marker_scale: 0.0,
            ka_decay: 0.0,
            ka_noise: 1.0,
            episodes_per_step: 4000,
            learning_rate: 0.0,
            ..TaskConfig::default()
        };
        let cfg = routed_cfg(0);
        let expected = random_subset_accuracy(&task, &cfg);
        let curve = toy_learnability(&task, &cfg, 1, 0).unwrap();
        let measured = curve[0].routing_accuracy;
        assert!(
            (measured - expected).abs() < 0.03,
            "measured {measured} vs analytic {expected}"
        );
        // Sanity: this regime is far from trivial coverage.
        assert!(expected > 0.0 && expected < 0.5);
    }

    #[test]
    fn loss_decreases_monotonically_on_a_frozen_batch() {
        let task = TaskConfig {
            seq_len: 512,
            episodes_per_step: 4,
            learning_rate: 1e-5,
            freeze_batch: true,
            ..TaskConfig::default()
        };
        let cfg = routed_cfg(0);
        let curve = toy_learnability(&task, &cfg, 10, 0).unwrap();
        for w in curve.windows(2) {
            assert!(
                w[1].loss <= w[0].loss + 1e-12,
                "loss rose at step {}: {} -> {}",
                w[1].step,
                w[0].loss,
                w[1].loss
            );
        }
    }

    #[test]
    fn router_learns_the_marker_quickly_at_small_scale() {
        // Small-scale version of the acceptance run: accuracy climbs well
        // above its starting point within a few hundred steps.
        let task = TaskConfig {
            seq_len: 512,
            ..TaskConfig::default()
        };
        let cfg = routed_cfg(0);
        let curve = toy_learnability(&task, &cfg, 300, 0).unwrap();
        let initial = curve[0].routing_accuracy;
        let last = curve.last().unwrap();
        assert!(
            last.routing_accuracy > initial + 0.3,
            "initial {initial}, final {}",
            last.routing_accuracy
        );
    }

    #[test]
    fn curve_is_deterministic_for_a_fixed_seed() {
        let task = TaskConfig {
            seq_len: 256,
            episodes_per_step: 4,
            ..TaskConfig::default()
        };
        let cfg = routed_cfg(0);
        let a = toy_learnability(&task, &cfg, 5, 7).unwrap();
        let b = toy_learnability(&task, &cfg, 5, 7).unwrap();
        assert_eq!(a, b);
    }
}
