//! Losses, the Adam optimizer with the Transformer learning-rate schedule,
//! training loops, sequence-level distillation and the synthetic toy corpus.

pub mod corpus;
pub mod distill;
pub mod fit;

pub use corpus::{ToyCorpus, ToyCorpusConfig};
pub use distill::{distill_dataset, AlignmentTeacher, Distilled, SkippedSample};
pub use fit::{fit, train_student, train_teacher, FitResult, StepMetrics, TeacherSample, TrainOptions, TrainReport};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::length_regulator::DurationSequence;
use crate::model::layers::ParamTree;
use crate::model::{MelSpectrogram, PhonemeSequence};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: u64,
    pub d_model_for_schedule: usize,
}

impl OptimizerConfig {
    pub fn for_model(d_model: usize) -> Self {
        OptimizerConfig { beta1: 0.9, beta2: 0.98, eps: 1e-9, warmup_steps: 400, d_model_for_schedule: d_model }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::config(format!("optimizer.{name} must be in (0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config(format!("optimizer.eps must be positive, got {}", self.eps)));
        }
        if self.warmup_steps == 0 {
            return Err(Error::config("optimizer.warmup_steps must be at least 1"));
        }
        if self.d_model_for_schedule == 0 {
            return Err(Error::config("optimizer.d_model_for_schedule must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub phonemes: PhonemeSequence,
    pub target_mel: MelSpectrogram,
    pub target_durations: DurationSequence,
}

impl TrainingSample {
    pub fn new(phonemes: PhonemeSequence, target_mel: MelSpectrogram, target_durations: DurationSequence) -> Result<Self> {
        if target_durations.len() != phonemes.len() {
            return Err(Error::Integrity(format!(
                "{} durations for {} phonemes",
                target_durations.len(),
                phonemes.len()
            )));
        }
        if target_durations.total() != target_mel.len() {
            return Err(Error::Integrity(format!(
                "durations sum to {} but the mel has {} frames",
                target_durations.total(),
                target_mel.len()
            )));
        }
        Ok(TrainingSample { phonemes, target_mel, target_durations })
    }
}

/// Mean squared error over every mel element.
pub fn mel_loss(pred: &MelSpectrogram, target: &MelSpectrogram) -> Result<f64> {
    let (p, t) = (pred.frames(), target.frames());
    if p.shape() != t.shape() {
        return Err(Error::dim(format!("mel shapes differ: {:?} vs {:?}", p.shape(), t.shape())));
    }
    if p.numel() == 0 {
        return Err(Error::dim("mel loss of empty spectrograms"));
    }
    Ok(p.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.numel() as f64)
}

/// Mean of `(pred − ln(d + 1))²`.
pub fn duration_loss(pred_log: &Tensor, target: &DurationSequence) -> Result<f64> {
    let real: Vec<f64> = target.values().iter().map(|&d| d as f64).collect();
    duration_loss_real(pred_log, &real)
}

/// [`duration_loss`] for real-valued targets, which may come from external files.
pub fn duration_loss_real(pred_log: &Tensor, target: &[f64]) -> Result<f64> {
    if pred_log.numel() != target.len() {
        return Err(Error::dim(format!(
            "{} predicted durations for {} targets",
            pred_log.numel(),
            target.len()
        )));
    }
    if target.is_empty() {
        return Err(Error::dim("duration loss of empty sequences"));
    }
    let mut s = 0.0;
    for (i, (&p, &d)) in pred_log.data().iter().zip(target).enumerate() {
        if !(d >= 0.0) {
            return Err(Error::Input(format!("target duration {i} is {d}")));
        }
        let e = p - (d + 1.0).ln();
        s += e * e;
    }
    Ok(s / target.len() as f64)
}

pub fn total_loss(mel: f64, duration: f64, lambda: f64) -> f64 {
    mel + lambda * duration
}

/// `d^−0.5 · min(step^−0.5, step · warmup^−1.5)`.
pub fn noam_lr(step: u64, cfg: &OptimizerConfig) -> Result<f64> {
    if step == 0 {
        return Err(Error::config("learning-rate schedule starts at step 1"));
    }
    let s = step as f64;
    let d = cfg.d_model_for_schedule as f64;
    let w = cfg.warmup_steps as f64;
    Ok(d.powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5)))
}

/// First and second moments for every parameter, in canonical parameter order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn for_params<T: ParamTree<Param = Tensor>>(tree: &T) -> Self {
        let mut m = Vec::new();
        tree.map_named("", &mut |_, t| m.push(vec![0.0; t.numel()]));
        AdamState { step: 0, v: m.clone(), m }
    }
}

/// One bias-corrected Adam update. A non-finite gradient aborts before any
/// weight or moment changes.
pub fn adam_step<T: ParamTree<Param = Tensor>>(
    weights: &mut T,
    grads: &[Vec<f64>],
    state: &mut AdamState,
    lr: f64,
    cfg: &OptimizerConfig,
) -> Result<()> {
    if let Some((i, _)) = grads.iter().enumerate().find(|(_, g)| g.iter().any(|x| !x.is_finite())) {
        return Err(Error::Numeric(format!("non-finite gradient in parameter {i}")));
    }
    let mut shapes_ok = grads.len() == state.m.len();
    let mut idx = 0;
    weights.map_named("", &mut |_, t| {
        shapes_ok &= grads.get(idx).is_some_and(|g| g.len() == t.numel());
        idx += 1;
    });
    if !shapes_ok || idx != grads.len() {
        return Err(Error::dim("gradients do not match the parameter list"));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let mut idx = 0;
    weights.visit_mut("", &mut |_, w| {
        let (g, m, v) = (&grads[idx], &mut state.m[idx], &mut state.v[idx]);
        for (((w, &g), m), v) in w.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *w -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
        }
        idx += 1;
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::layers::Linear;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn mel(rows: &[[f64; 2]]) -> MelSpectrogram {
        MelSpectrogram::new(Tensor::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn mel_loss_examples() {
        let t = mel(&[[0.5, -1.0], [2.0, 0.0]]);
        assert_eq!(mel_loss(&t, &t).unwrap(), 0.0);
        let shifted = mel(&[[0.8, -0.7], [2.3, 0.3]]);
        assert_abs_diff_eq!(mel_loss(&shifted, &t).unwrap(), 0.09, epsilon = 1e-12);
        assert_eq!(mel_loss(&mel(&[[1.0, 2.0]]), &mel(&[[0.0, 0.0]])).unwrap(), 2.5);
        assert!(matches!(mel_loss(&mel(&[[1.0, 2.0]]), &t), Err(Error::Dimension(_))));
    }

    #[test]
    fn duration_loss_examples() {
        let d = DurationSequence::new(vec![3, 0, 7]);
        assert_abs_diff_eq!(duration_loss(&d.log_targets(), &d).unwrap(), 0.0, epsilon = 1e-15);
        let one = DurationSequence::new(vec![0]);
        assert_eq!(duration_loss(&Tensor::vector(vec![1.0]), &one).unwrap(), 1.0);
        let two = DurationSequence::new(vec![2, 2]);
        assert_abs_diff_eq!(duration_loss(&Tensor::vector(vec![0.0, 0.0]), &two).unwrap(), 1.2069, epsilon = 1e-4);
        assert!(matches!(
            duration_loss_real(&Tensor::vector(vec![0.0]), &[-1.0]),
            Err(Error::Input(_))
        ));
        assert!(matches!(duration_loss(&Tensor::vector(vec![0.0]), &two), Err(Error::Dimension(_))));
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(0.0, 0.0, 1.0), 0.0);
        assert_eq!(total_loss(0.5, 0.25, 0.0), 0.5);
        assert_eq!(total_loss(0.5, 0.25, 1.0), 0.75);
    }

    #[test]
    fn noam_examples() {
        let cfg = OptimizerConfig::for_model(64);
        assert_abs_diff_eq!(noam_lr(400, &cfg).unwrap(), 0.00625, epsilon = 1e-15);
        assert!(matches!(noam_lr(0, &cfg), Err(Error::Config(_))));
        let w = 400f64;
        assert_abs_diff_eq!(w.powf(-0.5), w * w.powf(-1.5), epsilon = 1e-15);
    }

    proptest! {
        #[test]
        fn noam_is_unimodal(warmup in 1u64..2000, d in 1usize..1024, step in 1u64..10_000) {
            let cfg = OptimizerConfig { warmup_steps: warmup, d_model_for_schedule: d, ..OptimizerConfig::for_model(d) };
            let a = noam_lr(step, &cfg).unwrap();
            let b = noam_lr(step + 1, &cfg).unwrap();
            if step < warmup { prop_assert!(b >= a); }
            if step >= warmup { prop_assert!(b <= a); }
            let s = step as f64;
            let closed = (d as f64).powf(-0.5) * s.powf(-0.5).min(s * (warmup as f64).powf(-1.5));
            prop_assert!((a - closed).abs() <= 1e-12);
        }
    }

    fn scalar_param(w: f64) -> Linear {
        Linear { weight: Tensor::vector(vec![w]), bias: Tensor::vector(vec![0.0]) }
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let cfg = OptimizerConfig::for_model(4);
        let mut p = scalar_param(1.5);
        let mut st = AdamState::for_params(&p);
        for _ in 0..3 {
            adam_step(&mut p, &[vec![0.0], vec![0.0]], &mut st, 0.1, &cfg).unwrap();
        }
        assert_eq!(p.weight.data(), &[1.5]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let cfg = OptimizerConfig::for_model(4);
        let mut p = scalar_param(0.0);
        let mut st = AdamState::for_params(&p);
        adam_step(&mut p, &[vec![-3.0], vec![0.02]], &mut st, 0.01, &cfg).unwrap();
        assert_abs_diff_eq!(p.weight.data()[0], 0.01, epsilon = 1e-9);
        assert_abs_diff_eq!(p.bias.data()[0], -0.01, epsilon = 1e-9);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let cfg = OptimizerConfig::for_model(4);
        let mut p = scalar_param(0.0);
        let mut st = AdamState::for_params(&p);
        for _ in 0..200 {
            let w = p.weight.data()[0];
            adam_step(&mut p, &[vec![2.0 * (w - 3.0)], vec![0.0]], &mut st, 0.1, &cfg).unwrap();
        }
        assert!((p.weight.data()[0] - 3.0).abs() < 0.05, "w = {}", p.weight.data()[0]);
    }

    #[test]
    fn adam_rejects_nan_without_touching_weights() {
        let cfg = OptimizerConfig::for_model(4);
        let mut p = scalar_param(1.0);
        let mut st = AdamState::for_params(&p);
        let r = adam_step(&mut p, &[vec![f64::NAN], vec![0.0]], &mut st, 0.1, &cfg);
        assert!(matches!(r, Err(Error::Numeric(_))));
        assert_eq!(p.weight.data(), &[1.0]);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn optimizer_config_validation() {
        let ok = OptimizerConfig::for_model(64);
        assert!(ok.validate().is_ok());
        let bad = OptimizerConfig { beta2: 1.0, ..ok.clone() };
        assert!(bad.validate().unwrap_err().to_string().contains("beta2"));
        let bad = OptimizerConfig { warmup_steps: 0, ..ok };
        assert!(bad.validate().unwrap_err().to_string().contains("warmup_steps"));
    }
}
