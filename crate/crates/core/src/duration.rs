//! Phoneme durations: extraction from teacher attention and the predictor network.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::length_regulator::{round_duration, DurationSequence};
use crate::model::layers::{bind, param_tree, Conv1dWeights, LayerNormWeights, Linear};
use crate::tensor::{DropoutContext, Graph, NodeId, Tensor};

const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// Longest duration a single phoneme may be predicted to last.
pub const MAX_PREDICTED_FRAMES: f64 = 1e6;

/// `S × T` decoder-to-encoder attention: one row per mel frame, one column per phoneme.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMatrix {
    weights: Tensor,
}

impl AttentionMatrix {
    pub fn new(weights: Tensor) -> Result<Self> {
        let (s, t) = weights.dims2()?;
        if t == 0 && s > 0 {
            return Err(Error::dim(format!("attention matrix has {s} rows but no columns")));
        }
        for r in 0..s {
            let row = weights.row(r);
            if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Input(format!("attention row {r} has entry {v} outside [0, 1]")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::Input(format!("attention row {r} sums to {sum}, not 1")));
            }
        }
        Ok(AttentionMatrix { weights })
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn frames(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn phonemes(&self) -> usize {
        self.weights.shape()[1]
    }

    /// Column of each row's maximum; ties go to the lowest column.
    pub fn row_argmax(&self) -> Vec<usize> {
        (0..self.frames())
            .map(|r| {
                let row = self.weights.row(r);
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }
}

/// Mean over frames of the largest attention weight in each row.
pub fn focus_rate(a: &AttentionMatrix) -> Result<f64> {
    let s = a.frames();
    if s == 0 || a.phonemes() == 0 {
        return Err(Error::dim("focus rate of an empty attention matrix"));
    }
    let total: f64 = (0..s)
        .map(|r| a.weights.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .sum();
    Ok(total / s as f64)
}

/// Index of the head with the largest focus rate, lowest index on ties.
pub fn select_alignment_head(heads: &[AttentionMatrix]) -> Result<usize> {
    Ok(score_heads(heads)?.1)
}

fn score_heads(heads: &[AttentionMatrix]) -> Result<(Vec<f64>, usize)> {
    let first = heads.first().ok_or_else(|| Error::config("no attention heads to choose from"))?;
    let shape = first.weights.shape();
    let mut rates = Vec::with_capacity(heads.len());
    for (i, h) in heads.iter().enumerate() {
        if h.weights.shape() != shape {
            return Err(Error::dim(format!(
                "head {i} has shape {:?}, head 0 has {shape:?}",
                h.weights.shape()
            )));
        }
        rates.push(focus_rate(h)?);
    }
    let mut best = 0;
    for (i, &f) in rates.iter().enumerate() {
        if f > rates[best] {
            best = i;
        }
    }
    Ok((rates, best))
}

/// `dᵢ` = number of frames whose attention argmax is phoneme `i`.
pub fn extract_durations(a: &AttentionMatrix) -> DurationSequence {
    let mut d = vec![0usize; a.phonemes()];
    for c in a.row_argmax() {
        d[c] += 1;
    }
    DurationSequence::new(d)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub per_head_focus: Vec<f64>,
    pub selected_head: usize,
    pub durations: DurationSequence,
}

impl AlignmentReport {
    pub fn best_focus(&self) -> f64 {
        self.per_head_focus[self.selected_head]
    }
}

/// Scores every head, picks the most diagonal one and extracts durations from it.
pub fn align(heads: &[AttentionMatrix]) -> Result<AlignmentReport> {
    let (per_head_focus, selected_head) = score_heads(heads)?;
    Ok(AlignmentReport {
        durations: extract_durations(&heads[selected_head]),
        per_head_focus,
        selected_head,
    })
}

/// Two convolutions (each followed by ReLU, layer norm and dropout) and a
/// linear projection to one log-duration per phoneme.
#[derive(Clone, Debug, PartialEq)]
pub struct DurationPredictorWeights<P = Tensor> {
    pub conv1: Conv1dWeights<P>,
    pub norm1: LayerNormWeights<P>,
    pub conv2: Conv1dWeights<P>,
    pub norm2: LayerNormWeights<P>,
    pub output: Linear<P>,
}
param_tree!(DurationPredictorWeights { leaves: [], nodes: [conv1, norm1, conv2, norm2, output] });

impl DurationPredictorWeights {
    pub fn init(rng: &mut impl Rng, d_model: usize, kernel: usize, filter: usize) -> Self {
        DurationPredictorWeights {
            conv1: Conv1dWeights::init(rng, kernel, d_model, filter),
            norm1: LayerNormWeights::new(filter),
            conv2: Conv1dWeights::init(rng, kernel, filter, filter),
            norm2: LayerNormWeights::new(filter),
            output: Linear::init(rng, filter, 1),
        }
    }
}

/// Returns an `[n]` node of log-domain durations, `ln(d + 1)`.
pub fn duration_predictor(
    g: &mut Graph<'_>,
    hidden: NodeId,
    w: &DurationPredictorWeights<NodeId>,
    dropout: f64,
) -> Result<NodeId> {
    let (n, _) = g.value(hidden).dims2()?;
    let mut x = hidden;
    for (conv, norm) in [(&w.conv1, &w.norm1), (&w.conv2, &w.norm2)] {
        x = conv.same(g, x)?;
        x = g.relu(x);
        x = norm.forward(g, x)?;
        x = g.dropout(x, dropout)?;
    }
    let y = w.output.forward(g, x)?;
    g.reshape(y, &[n])
}

/// Tape-free predictor forward; `training` enables dropout keyed by `seed`.
pub fn predict_log_durations(
    hidden: &Tensor,
    w: &DurationPredictorWeights,
    dropout: f64,
    training: bool,
    seed: u64,
) -> Result<Tensor> {
    let mut g = Graph::inference().with_dropout(DropoutContext { training, seed, stream: 0, step: 0 });
    let wb = bind(w, &mut g);
    let h = g.constant_ref(hidden);
    let y = duration_predictor(&mut g, h, &wb, dropout)?;
    Ok(g.value(y).clone())
}

/// Real-valued frame counts `max(exp(l) − 1, 0)`.
pub fn real_durations_from_log(log_d: &Tensor) -> Result<Vec<f64>> {
    log_d
        .data()
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            if !l.is_finite() {
                return Err(Error::Numeric(format!("log-duration {i} is {l}")));
            }
            let d = (l.exp() - 1.0).max(0.0);
            if d > MAX_PREDICTED_FRAMES {
                return Err(Error::Numeric(format!("log-duration {i} = {l} implies {d} frames")));
            }
            Ok(d)
        })
        .collect()
}

pub fn durations_from_log(log_d: &Tensor) -> Result<DurationSequence> {
    Ok(DurationSequence::new(
        real_durations_from_log(log_d)?.into_iter().map(round_duration).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::layers::{named_params, ParamTree};
    use crate::tensor::grad_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mat(rows: &[&[f64]]) -> AttentionMatrix {
        AttentionMatrix::new(Tensor::from_rows(rows).unwrap()).unwrap()
    }

    fn one_hot_rows(argmax: &[usize], t: usize) -> AttentionMatrix {
        let rows: Vec<Vec<f64>> = argmax
            .iter()
            .map(|&c| (0..t).map(|j| if j == c { 1.0 } else { 0.0 }).collect())
            .collect();
        AttentionMatrix::new(Tensor::from_rows(&rows).unwrap()).unwrap()
    }

    fn uniform(s: usize, t: usize) -> AttentionMatrix {
        AttentionMatrix::new(Tensor::full(&[s, t], 1.0 / t as f64)).unwrap()
    }

    /// Rows `0..one_hot` are one-hot, the rest uniform.
    fn mixed(s: usize, t: usize, one_hot: usize, column_shift: usize) -> AttentionMatrix {
        let rows: Vec<Vec<f64>> = (0..s)
            .map(|r| {
                if r < one_hot {
                    (0..t).map(|j| if j == (r + column_shift) % t { 1.0 } else { 0.0 }).collect()
                } else {
                    vec![1.0 / t as f64; t]
                }
            })
            .collect();
        AttentionMatrix::new(Tensor::from_rows(&rows).unwrap()).unwrap()
    }

    #[test]
    fn focus_rate_examples() {
        assert_eq!(focus_rate(&one_hot_rows(&[0, 1, 1, 2], 3)).unwrap(), 1.0);
        assert!((focus_rate(&uniform(5, 4)).unwrap() - 0.25).abs() < 1e-15);
        let a = mat(&[&[0.7, 0.3], &[0.2, 0.8], &[0.5, 0.5]]);
        assert!((focus_rate(&a).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_matrix_is_dimension_error() {
        let a = AttentionMatrix::new(Tensor::zeros(&[0, 3])).unwrap();
        assert!(matches!(focus_rate(&a), Err(Error::Dimension(_))));
    }

    #[test]
    fn non_stochastic_rows_rejected() {
        assert!(AttentionMatrix::new(Tensor::from_rows(&[[0.5, 0.4]]).unwrap()).is_err());
        assert!(AttentionMatrix::new(Tensor::from_rows(&[[1.5, -0.5]]).unwrap()).is_err());
    }

    #[test]
    fn head_selection_examples() {
        assert_eq!(select_alignment_head(&[uniform(4, 4), one_hot_rows(&[0, 1, 2, 3], 4)]).unwrap(), 1);
        assert_eq!(select_alignment_head(&[uniform(3, 2)]).unwrap(), 0);

        // T = 5, S = 8: k one-hot rows give F = (k + 0.2·(8 − k)) / 8.
        let heads = [mixed(8, 5, 2, 0), mixed(8, 5, 7, 1), mixed(8, 5, 7, 3)];
        let rates: Vec<f64> = heads.iter().map(|h| focus_rate(h).unwrap()).collect();
        assert!((rates[0] - 0.4).abs() < 1e-12);
        assert!((rates[1] - 0.9).abs() < 1e-12);
        assert_eq!(rates[1], rates[2]);
        assert_eq!(select_alignment_head(&heads).unwrap(), 1);
    }

    #[test]
    fn head_selection_errors() {
        assert!(matches!(select_alignment_head(&[]), Err(Error::Config(_))));
        assert!(matches!(
            select_alignment_head(&[uniform(3, 2), uniform(4, 2)]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn extraction_examples() {
        assert_eq!(extract_durations(&one_hot_rows(&[0, 1, 2, 3, 4], 5)).values(), &[1; 5]);
        assert_eq!(extract_durations(&one_hot_rows(&[0, 0, 1, 2, 2, 2], 3)).values(), &[2, 1, 3]);
        assert_eq!(extract_durations(&one_hot_rows(&[0, 0, 2, 2], 3)).values(), &[2, 0, 2]);
        // exact tie goes to the lower column
        assert_eq!(extract_durations(&mat(&[&[0.5, 0.5], &[0.25, 0.75]])).values(), &[1, 1]);
    }

    #[test]
    fn align_report() {
        let r = align(&[uniform(4, 2), one_hot_rows(&[0, 0, 0, 1], 2)]).unwrap();
        assert_eq!(r.selected_head, 1);
        assert_eq!(r.durations.values(), &[3, 1]);
        assert_eq!(r.best_focus(), 1.0);
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"per_head_focus\":[0.5,1.0]"), "{json}");
    }

    fn predictor() -> DurationPredictorWeights {
        DurationPredictorWeights::init(&mut ChaCha8Rng::seed_from_u64(3), 8, 3, 8)
    }

    #[test]
    fn zero_weight_predictor_collapses_to_bias() {
        let mut w = predictor();
        w.visit_mut("", &mut |_, t| t.data_mut().fill(0.0));
        w.norm1.gamma = Tensor::ones(&[8]);
        w.norm2.gamma = Tensor::ones(&[8]);
        w.output.bias = Tensor::vector(vec![0.7]);
        let h = Tensor::new(vec![5, 8], (0..40).map(|i| i as f64).collect()).unwrap();
        let y = predict_log_durations(&h, &w, 0.1, false, 0).unwrap();
        assert_eq!(y.data(), &[0.7; 5]);
    }

    #[test]
    fn predictor_output_shape() {
        let w = predictor();
        for n in [1, 5, 37] {
            let h = Tensor::new(vec![n, 8], (0..n * 8).map(|i| (i as f64).cos()).collect()).unwrap();
            assert_eq!(predict_log_durations(&h, &w, 0.1, true, 9).unwrap().shape(), &[n]);
        }
    }

    #[test]
    fn predictor_shape_mismatch() {
        let err = predict_log_durations(&Tensor::zeros(&[3, 5]), &predictor(), 0.0, false, 0).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn predictor_gradient_check() {
        let w = predictor();
        let h = Tensor::new(vec![6, 8], (0..48).map(|i| (i as f64 * 0.41).sin()).collect()).unwrap();
        let target = Tensor::vector(vec![0.5, 1.2, 0.0, 2.0, 0.7, 1.1]);
        let mut inputs = vec![h];
        inputs.extend(named_params(&w).into_iter().map(|(_, t)| t.clone()));
        let err = grad_check(
            |g, ids| {
                let mut it = ids[1..].iter().copied();
                let wb = w.map_named("", &mut |_, _| it.next().unwrap());
                let y = duration_predictor(g, ids[0], &wb, 0.0)?;
                let t = g.constant(target.clone());
                g.mse(y, t)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn log_duration_conversion() {
        let d = [0usize, 1, 2, 7, 30];
        let logs = Tensor::vector(d.iter().map(|&v| (v as f64 + 1.0).ln()).collect());
        assert_eq!(durations_from_log(&logs).unwrap().values(), &d);
        assert_eq!(durations_from_log(&Tensor::zeros(&[3])).unwrap().values(), &[0, 0, 0]);
        assert_eq!(durations_from_log(&Tensor::vector(vec![3.6f64.ln()])).unwrap().values(), &[3]);
        assert_eq!(durations_from_log(&Tensor::vector(vec![-4.0])).unwrap().values(), &[0]);
        assert!(matches!(durations_from_log(&Tensor::vector(vec![f64::NAN])), Err(Error::Numeric(_))));
    }

    fn stochastic_matrix(seed: u64, s: usize, t: usize) -> AttentionMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::with_capacity(s);
        for _ in 0..s {
            let raw: Vec<f64> = (0..t).map(|_| rng.random::<f64>().powi(3) + 1e-9).collect();
            let sum: f64 = raw.iter().sum();
            rows.push(raw.into_iter().map(|v| v / sum).collect::<Vec<_>>());
        }
        AttentionMatrix::new(Tensor::from_rows(&rows).unwrap()).unwrap()
    }

    proptest! {
        #[test]
        fn extraction_conserves_frames(seed in any::<u64>(), s in 1usize..=64, t in 1usize..=16) {
            let a = stochastic_matrix(seed, s, t);
            prop_assert_eq!(extract_durations(&a).total(), s);
            let f = focus_rate(&a).unwrap();
            prop_assert!(f >= 1.0 / t as f64 - 1e-12 && f <= 1.0 + 1e-12);
        }

        #[test]
        fn focus_is_one_iff_one_hot(seed in any::<u64>(), s in 1usize..=12, t in 2usize..=6, hot in any::<bool>()) {
            let a = if hot {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                one_hot_rows(&(0..s).map(|_| rng.random_range(0..t)).collect::<Vec<_>>(), t)
            } else {
                stochastic_matrix(seed, s, t)
            };
            let all_one_hot = (0..s).all(|r| a.weights().row(r).contains(&1.0));
            prop_assert_eq!(focus_rate(&a).unwrap() == 1.0, all_one_hot);
        }

        #[test]
        fn extraction_invariant_under_argmax_preserving_rescale(seed in any::<u64>(), s in 1usize..=20, t in 1usize..=8) {
            let a = stochastic_matrix(seed, s, t);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
            // Sharpen each row by a random power > 1 and renormalise: per-row order is kept.
            let rows: Vec<Vec<f64>> = (0..s).map(|r| {
                let p = rng.random_range(1.0..3.0);
                let raw: Vec<f64> = a.weights().row(r).iter().map(|v| v.powf(p)).collect();
                let sum: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / sum).collect()
            }).collect();
            let b = AttentionMatrix::new(Tensor::from_rows(&rows).unwrap()).unwrap();
            prop_assert_eq!(a.row_argmax(), b.row_argmax());
            prop_assert_eq!(extract_durations(&a), extract_durations(&b));
        }

        #[test]
        fn head_choice_ignores_less_focused_heads(seed in any::<u64>(), extra in 1usize..4) {
            let best = one_hot_rows(&[0, 1, 1, 2, 3, 3], 4);
            let mut heads = vec![stochastic_matrix(seed, 6, 4), best];
            let before = select_alignment_head(&heads).unwrap();
            for k in 0..extra {
                heads.push(uniform(6, 4));
                heads.push(stochastic_matrix(seed.wrapping_add(k as u64 + 1), 6, 4));
            }
            prop_assert_eq!(select_alignment_head(&heads).unwrap(), before);
        }

        #[test]
        fn log_round_trip(d in prop::collection::vec(0usize..5000, 1..30)) {
            let d = DurationSequence::new(d);
            prop_assert_eq!(durations_from_log(&d.log_targets()).unwrap(), d);
        }
    }
}
