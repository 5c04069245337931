//! Hand-derived backward pass for the routing-and-combination path.
//!
//! The discrete top-k selection is treated as a constant (straight-through on
//! the selected set): gradients flow through the gating weights alpha over
//! the selected spans only, so unselected anchors receive exactly zero
//! gradient on their score path.

use ndarray::{Array1, Array2, ArrayView1};

use crate::attention::{softmax, RoutingDecision};
use crate::config::{AttnConfig, OpCounters, SequenceTensors};
use crate::layer::{route_query, LayerError};
use crate::span::{build_span, dedup_concat};

/// Gradients of a scalar loss with respect to every input tensor.
#[derive(Debug, Clone)]
pub struct GradientBundle {
    pub d_qs: Array2<f64>,
    pub d_q: Array2<f64>,
    pub d_k: Array2<f64>,
    pub d_v: Array2<f64>,
    /// Nonzero only on rows of anchors that were actually selected.
    pub d_ka: Array2<f64>,
}

impl GradientBundle {
    pub fn zeros(len: usize, dim: usize) -> GradientBundle {
        GradientBundle {
            d_qs: Array2::zeros((len, dim)),
            d_q: Array2::zeros((len, dim)),
            d_k: Array2::zeros((len, dim)),
            d_v: Array2::zeros((len, dim)),
            d_ka: Array2::zeros((len, dim)),
        }
    }
}

/// Backward of the softmax-gated combination.
///
/// Given upstream d_O, returns the score gradients (the softmax
/// Jacobian-vector product) and the per-span output gradients alpha_t * d_O.
/// The decision's weights must already be populated by the forward pass.
pub fn backward_combine(
    decision: &RoutingDecision,
    span_outputs: &[Array1<f64>],
    d_o: ArrayView1<f64>,
) -> (Vec<f64>, Vec<Array1<f64>>) {
    let alpha = if decision.weights.is_empty() {
        softmax(&decision.scores)
    } else {
        decision.weights.clone()
    };
    assert_eq!(alpha.len(), span_outputs.len());
    let mut combined = Array1::<f64>::zeros(d_o.len());
    for (a, &w) in span_outputs.iter().zip(&alpha) {
        combined.scaled_add(w, a);
    }
    let d_o_dot_combined = d_o.dot(&combined);
    let d_scores: Vec<f64> = span_outputs
        .iter()
        .zip(&alpha)
        .map(|(a, &w)| w * (d_o.dot(a) - d_o_dot_combined))
        .collect();
    let d_span_outputs: Vec<Array1<f64>> = alpha.iter().map(|&w| &d_o * w).collect();
    (d_scores, d_span_outputs)
}

/// Forward output of masked attention plus its vector-Jacobian product,
/// accumulated into the query/key/value gradient rows.
fn span_attention_vjp(
    q_i: ArrayView1<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    indices: &[usize],
    d_a: ArrayView1<f64>,
    d_q_i: &mut Array1<f64>,
    d_k: &mut Array2<f64>,
    d_v: &mut Array2<f64>,
) -> Array1<f64> {
    let d = q_i.len();
    let scale = 1.0 / (d as f64).sqrt();
    let logits: Vec<f64> = indices.iter().map(|&j| q_i.dot(&k.row(j)) * scale).collect();
    let weights = softmax(&logits);
    let mut a = Array1::<f64>::zeros(d);
    for (&j, &w) in indices.iter().zip(&weights) {
        a.scaled_add(w, &v.row(j));
    }
    // d_w_j = d_a . v_j; d_z_j = w_j (d_w_j - sum_j' w_j' d_w_j')
    let g: Vec<f64> = indices.iter().map(|&j| d_a.dot(&v.row(j))).collect();
    let g_mean: f64 = weights.iter().zip(&g).map(|(&w, &gj)| w * gj).sum();
    for ((&j, &w), &gj) in indices.iter().zip(&weights).zip(&g) {
        let dz = w * (gj - g_mean);
        d_q_i.scaled_add(dz * scale, &k.row(j));
        let mut dk_row = d_k.row_mut(j);
        dk_row.scaled_add(dz * scale, &q_i);
        let mut dv_row = d_v.row_mut(j);
        dv_row.scaled_add(w, &d_a);
    }
    a
}

/// Backward for one query position; recomputes the forward intermediates and
/// accumulates into the bundle. Returns the routing decision (with weights)
/// and the forward output.
pub fn backward_query(
    i: usize,
    seq: &SequenceTensors,
    cfg: &AttnConfig,
    d_o_i: ArrayView1<f64>,
    bundle: &mut GradientBundle,
) -> Result<(RoutingDecision, Array1<f64>), LayerError> {
    let mut scratch = OpCounters::default();
    let (window, mut decision) = route_query(i, seq, cfg, &mut scratch)?;

    if decision.is_fallback() {
        let w = window.expect("fallback requires a window");
        let indices: Vec<usize> = (w.lo..=w.hi).collect();
        let mut d_q_i = Array1::zeros(seq.dim());
        let out = span_attention_vjp(
            seq.q.row(i),
            &seq.k,
            &seq.v,
            &indices,
            d_o_i,
            &mut d_q_i,
            &mut bundle.d_k,
            &mut bundle.d_v,
        );
        let mut row = bundle.d_q.row_mut(i);
        row += &d_q_i;
        return Ok((decision, out));
    }

    // Forward pieces for the selected spans.
    let mut index_sets = Vec::with_capacity(decision.selected_anchors.len());
    let mut span_outputs = Vec::with_capacity(decision.selected_anchors.len());
    for &t in &decision.selected_anchors {
        let span = build_span(i, t, cfg)?;
        let indices = dedup_concat(&span, window.as_ref());
        let mut sink = Array1::zeros(seq.dim());
        let mut k_sink = Array2::zeros(seq.k.dim());
        let mut v_sink = Array2::zeros(seq.v.dim());
        // Forward-only evaluation through the vjp with a zero cotangent.
        let zero = Array1::<f64>::zeros(seq.dim());
        let a = span_attention_vjp(
            seq.q.row(i),
            &seq.k,
            &seq.v,
            &indices,
            zero.view(),
            &mut sink,
            &mut k_sink,
            &mut v_sink,
        );
        index_sets.push(indices);
        span_outputs.push(a);
    }
    decision.weights = softmax(&decision.scores);
    let mut out = Array1::<f64>::zeros(seq.dim());
    for (a, &w) in span_outputs.iter().zip(&decision.weights) {
        out.scaled_add(w, a);
    }

    let (d_scores, d_span_outputs) = backward_combine(&decision, &span_outputs, d_o_i);

    // Score path: selected anchors only (straight-through selection).
    for (idx, &t) in decision.selected_anchors.iter().enumerate() {
        let ds = d_scores[idx];
        let mut dqs = bundle.d_qs.row_mut(i);
        dqs.scaled_add(ds, &seq.ka.row(t));
        let mut dka = bundle.d_ka.row_mut(t);
        dka.scaled_add(ds, &seq.qs.row(i));
    }

    // Attention path per span.
    let mut d_q_i = Array1::zeros(seq.dim());
    for (indices, d_a) in index_sets.iter().zip(&d_span_outputs) {
        span_attention_vjp(
            seq.q.row(i),
            &seq.k,
            &seq.v,
            indices,
            d_a.view(),
            &mut d_q_i,
            &mut bundle.d_k,
            &mut bundle.d_v,
        );
    }
    let mut row = bundle.d_q.row_mut(i);
    row += &d_q_i;
    Ok((decision, out))
}

/// Full-sequence backward: the chain d_O -> combine -> span attention for
/// Q, K, V and d_O -> combine -> scores for Qs, Ka. Selection sets are
/// recomputed exactly as in the forward pass and treated as frozen.
pub fn backward_layer(
    seq: &SequenceTensors,
    cfg: &AttnConfig,
    d_o: &Array2<f64>,
) -> Result<GradientBundle, LayerError> {
    if seq.is_empty() {
        return Err(LayerError::EmptySequence);
    }
    let mut bundle = GradientBundle::zeros(seq.len(), seq.dim());
    for i in 0..seq.len() {
        backward_query(i, seq, cfg, d_o.row(i), &mut bundle)?;
    }
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{gaussian_matrix, substream};
    use crate::layer::forward_prefill;
    use ndarray::array;

    fn cfg(p: f64, k: usize, b: f64, f: f64, w: usize, d: usize) -> AttnConfig {
        AttnConfig {
            search_exponent: p,
            span_exponent: p,
            top_k: k,
            backward_factor: b,
            forward_factor: f,
            window: w,
            head_dim: d,
            ..AttnConfig::default()
        }
    }

    fn loss(seq: &SequenceTensors, c: &AttnConfig, d_o: &Array2<f64>) -> f64 {
        let out = forward_prefill(seq, c).unwrap();
        (&out.outputs * d_o).sum()
    }

    #[test]
    fn single_span_scores_get_zero_gradient() {
        let d = RoutingDecision {
            query_pos: 5,
            selected_anchors: vec![3],
            selected_strides: vec![0],
            scores: vec![1.7],
            weights: vec![1.0],
        };
        let outs = [array![2.0, -1.0]];
        let d_o = array![0.3, 0.4];
        let (d_scores, d_outs) = backward_combine(&d, &outs, d_o.view());
        assert_eq!(d_scores, vec![0.0]);
        assert_eq!(d_outs[0], d_o);
    }

    #[test]
    fn identical_outputs_give_zero_score_gradient() {
        let d = RoutingDecision {
            query_pos: 0,
            selected_anchors: vec![3, 1],
            selected_strides: vec![0, 1],
            scores: vec![0.9, -0.2],
            weights: vec![],
        };
        let a = array![1.5, 2.5, -0.5];
        let outs = [a.clone(), a];
        let (d_scores, _) = backward_combine(&d, &outs, array![1.0, -2.0, 0.7].view());
        for ds in d_scores {
            assert!(ds.abs() < 1e-15);
        }
    }

    #[test]
    fn combine_backward_matches_finite_differences() {
        let mut rng = substream(71, 0);
        let dim = 4;
        let outs: Vec<Array1<f64>> = (0..3)
            .map(|_| gaussian_matrix(1, dim, &mut rng).row(0).to_owned())
            .collect();
        let scores = vec![0.4, -0.9, 1.3];
        let d_o = gaussian_matrix(1, dim, &mut rng).row(0).to_owned();
        let decision = RoutingDecision {
            query_pos: 0,
            selected_anchors: vec![9, 5, 2],
            selected_strides: vec![0, 1, 2],
            scores: scores.clone(),
            weights: vec![],
        };
        let (d_scores, _) = backward_combine(&decision, &outs, d_o.view());

        let eval = |s: &[f64]| -> f64 {
            let w = softmax(s);
            let mut o = Array1::<f64>::zeros(dim);
            for (a, &wt) in outs.iter().zip(&w) {
                o.scaled_add(wt, a);
            }
            d_o.dot(&o)
        };
        let h = 1e-5;
        for t in 0..3 {
            let mut plus = scores.clone();
            plus[t] += h;
            let mut minus = scores.clone();
            minus[t] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let denom = d_scores[t].abs().max(fd.abs()).max(1e-8);
            assert!(
                (d_scores[t] - fd).abs() / denom < 1e-6,
                "score {t}: analytic {} vs fd {fd}",
                d_scores[t]
            );
        }
    }

    #[test]
    fn zero_upstream_gives_zero_bundle() {
        let c = cfg(0.5, 2, 2.0, 0.0, 4, 6);
        let mut rng = substream(72, 0);
        let seq = SequenceTensors::random(24, 6, &mut rng);
        let d_o = Array2::<f64>::zeros((24, 6));
        let bundle = backward_layer(&seq, &c, &d_o).unwrap();
        for m in [&bundle.d_qs, &bundle.d_q, &bundle.d_k, &bundle.d_v, &bundle.d_ka] {
            assert!(m.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn layer_backward_matches_finite_differences_small() {
        let c = cfg(0.5, 2, 2.0, 1.0, 4, 4);
        let mut rng = substream(73, 0);
        let (len, dim) = (16, 4);
        let seq = SequenceTensors {
            ka: gaussian_matrix(len, dim, &mut rng), // independent of K
            ..SequenceTensors::random(len, dim, &mut rng)
        };
        let d_o = gaussian_matrix(len, dim, &mut rng);
        let bundle = backward_layer(&seq, &c, &d_o).unwrap();
        let h = 1e-5;

        let mut check = |name: &str,
                         analytic: &Array2<f64>,
                         write: &mut dyn FnMut(&mut SequenceTensors) -> &mut Array2<f64>| {
            for r in 0..len {
                for ch in 0..dim {
                    let mut plus = seq.clone();
                    write(&mut plus)[[r, ch]] += h;
                    let mut minus = seq.clone();
                    write(&mut minus)[[r, ch]] -= h;
                    let fd = (loss(&plus, &c, &d_o) - loss(&minus, &c, &d_o)) / (2.0 * h);
                    let a = analytic[[r, ch]];
                    let err = (a - fd).abs();
                    assert!(
                        err / a.abs().max(fd.abs()).max(1.0) < 1e-6,
                        "{name}[{r},{ch}]: analytic {a} vs fd {fd}"
                    );
                }
            }
        };
        check("d_qs", &bundle.d_qs, &mut |s| &mut s.qs);
        check("d_q", &bundle.d_q, &mut |s| &mut s.q);
        check("d_k", &bundle.d_k, &mut |s| &mut s.k);
        check("d_v", &bundle.d_v, &mut |s| &mut s.v);
        check("d_ka", &bundle.d_ka, &mut |s| &mut s.ka);
    }

    #[test]
    fn unselected_anchor_rows_have_zero_ka_gradient() {
        let c = cfg(0.5, 1, 2.0, 0.0, 0, 5);
        let mut rng = substream(74, 0);
        let len = 40;
        let seq = SequenceTensors {
            ka: gaussian_matrix(len, 5, &mut rng),
            ..SequenceTensors::random(len, 5, &mut rng)
        };
        let d_o = gaussian_matrix(len, 5, &mut rng);
        let out = forward_prefill(&seq, &c).unwrap();
        let mut ever_selected = vec![false; len];
        for d in &out.decisions {
            for &t in &d.selected_anchors {
                ever_selected[t] = true;
            }
        }
        assert!(ever_selected.iter().any(|&s| !s), "test needs unselected rows");
        let bundle = backward_layer(&seq, &c, &d_o).unwrap();
        for t in 0..len {
            if !ever_selected[t] {
                for ch in 0..5 {
                    assert_eq!(bundle.d_ka[[t, ch]], 0.0, "t={t}");
                }
            }
        }

        // Scrambling Ka rows of never-selected anchors leaves d_qs unchanged,
        // provided the selections themselves do not move.
        let mut scrambled = seq.clone();
        for t in 0..len {
            if !ever_selected[t] {
                for ch in 0..5 {
                    scrambled.ka[[t, ch]] = -3.0 * scrambled.ka[[t, ch] ] + 1.0;
                }
            }
        }
        let out2 = forward_prefill(&scrambled, &c).unwrap();
        let same_selection = out
            .decisions
            .iter()
            .zip(&out2.decisions)
            .all(|(a, b)| a.selected_anchors == b.selected_anchors);
        if same_selection {
            let bundle2 = backward_layer(&scrambled, &c, &d_o).unwrap();
            assert_eq!(bundle.d_qs, bundle2.d_qs);
        }
    }

    #[test]
    fn small_qs_perturbation_keeps_selection_stable() {
        let c = cfg(0.5, 2, 2.0, 0.0, 0, 5);
        let mut rng = substream(75, 0);
        let seq = SequenceTensors::random(48, 5, &mut rng);
        let base = forward_prefill(&seq, &c).unwrap();
        let mut nudged = seq.clone();
        for x in nudged.qs.iter_mut() {
            *x += 1e-9;
        }
        let after = forward_prefill(&nudged, &c).unwrap();
        for (a, b) in base.decisions.iter().zip(&after.decisions) {
            assert_eq!(a.selected_anchors, b.selected_anchors);
        }
    }
}
