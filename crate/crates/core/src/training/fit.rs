//! Deterministic training loops for the student and the teacher.
//!
//! Each step builds one graph per sample, averages the gradients in sample
//! order and applies one Adam update at `noam_lr(step)`. Dropout masks are
//! keyed by `(seed, sample, step)`, so runs are bitwise reproducible and a
//! resumed run continues exactly where the saved one stopped.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{adam_step, noam_lr, AdamState, OptimizerConfig, TrainingSample};
use crate::error::{Error, Result};
use crate::model::layers::ParamTree;
use crate::model::{FastSpeech, MelSpectrogram, ModelConfig, PhonemeSequence, TeacherLite};
use crate::tensor::{DropoutContext, Gradients, Graph, NodeId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOptions {
    pub steps: u64,
    pub seed: u64,
    /// Weight of the duration loss.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Samples per step; `None` uses the whole dataset every step.
    #[serde(default)]
    pub batch_size: Option<usize>,
}

fn default_lambda() -> f64 {
    1.0
}

impl TrainOptions {
    pub fn new(steps: u64, seed: u64) -> Self {
        TrainOptions { steps, seed, lambda: 1.0, batch_size: None }
    }
}

/// Losses measured on the weights *before* the step's update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    pub mel: f64,
    pub duration: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub metrics: Vec<StepMetrics>,
    /// Set when a non-finite loss or gradient stopped training; the model then
    /// holds the last weights that produced finite values.
    pub diverged: Option<String>,
}

#[derive(Debug)]
pub struct FitResult {
    pub model: FastSpeech,
    pub optimizer: AdamState,
    pub report: TrainReport,
}

/// Teacher training pair: phonemes and the spectrogram to reproduce.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherSample {
    pub phonemes: PhonemeSequence,
    pub mel: MelSpectrogram,
}

impl From<&TrainingSample> for TeacherSample {
    fn from(s: &TrainingSample) -> Self {
        TeacherSample { phonemes: s.phonemes.clone(), mel: s.target_mel.clone() }
    }
}

/// Trains a freshly initialized student for `steps` steps over the whole dataset.
pub fn fit(
    dataset: &[TrainingSample],
    model_config: &ModelConfig,
    optimizer_config: &OptimizerConfig,
    steps: u64,
    seed: u64,
) -> Result<FitResult> {
    let mut model = FastSpeech::new(model_config.clone(), seed)?;
    let mut optimizer = AdamState::for_params(model.weights());
    let report = train_student(&mut model, &mut optimizer, dataset, optimizer_config, &TrainOptions::new(steps, seed))?;
    Ok(FitResult { model, optimizer, report })
}

struct StepLoss {
    total: f64,
    mel: f64,
    duration: f64,
}

fn accumulate<W: ParamTree<Param = NodeId>>(w: &W, grads: &Gradients, acc: &mut [Vec<f64>], scale: f64) {
    let mut i = 0;
    w.map_named("", &mut |_, &id| {
        if let Some(g) = grads.data(id) {
            for (a, &x) in acc[i].iter_mut().zip(g) {
                *a += scale * x;
            }
        }
        i += 1;
    });
}

fn zero_grads(state: &AdamState) -> Vec<Vec<f64>> {
    state.m.iter().map(|m| vec![0.0; m.len()]).collect()
}

/// Indices of the samples used at `step` (1-based): the whole dataset, or a
/// window of a seed-fixed permutation that cycles through it.
fn batch_indices(n: usize, step: u64, options: &TrainOptions) -> Vec<usize> {
    match options.batch_size {
        Some(b) if b < n => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(options.seed ^ 0x5eed_ba7c));
            let start = ((step - 1) as usize).wrapping_mul(b) % n;
            (0..b).map(|j| order[(start + j) % n]).collect()
        }
        _ => (0..n).collect(),
    }
}

fn check_options(n: usize, options: &TrainOptions, opt: &OptimizerConfig) -> Result<()> {
    opt.validate()?;
    if n == 0 {
        return Err(Error::Input("training needs at least one sample".into()));
    }
    if options.batch_size == Some(0) {
        return Err(Error::config("train.batch_size must be positive"));
    }
    if !(options.lambda >= 0.0 && options.lambda.is_finite()) {
        return Err(Error::config(format!("train.lambda must be a finite non-negative number, got {}", options.lambda)));
    }
    Ok(())
}

/// Shared driver: `loss_and_grads` evaluates one sample on the current weights.
fn run<M>(
    model: &mut M,
    state: &mut AdamState,
    n: usize,
    opt: &OptimizerConfig,
    options: &TrainOptions,
    mut loss_and_grads: impl FnMut(&M, usize, DropoutContext, &mut [Vec<f64>], f64) -> Result<StepLoss>,
    mut update: impl FnMut(&mut M, &[Vec<f64>], &mut AdamState, f64) -> Result<()>,
) -> Result<TrainReport> {
    check_options(n, options, opt)?;
    let mut report = TrainReport::default();
    for _ in 0..options.steps {
        let step = state.step + 1;
        let lr = noam_lr(step, opt)?;
        let batch = batch_indices(n, step, options);
        let scale = 1.0 / batch.len() as f64;
        let mut grads = zero_grads(state);
        let (mut total, mut mel, mut duration) = (0.0, 0.0, 0.0);
        for &i in &batch {
            let ctx = DropoutContext { training: true, seed: options.seed, stream: i as u64, step };
            let l = loss_and_grads(model, i, ctx, &mut grads, scale)?;
            total += scale * l.total;
            mel += scale * l.mel;
            duration += scale * l.duration;
        }
        if !total.is_finite() {
            report.diverged = Some(format!("loss became {total} at step {step}"));
            break;
        }
        report.metrics.push(StepMetrics { step, lr, total, mel, duration });
        match update(model, &grads, state, lr) {
            Ok(()) => {}
            Err(Error::Numeric(msg)) => {
                report.diverged = Some(format!("step {step}: {msg}"));
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(report)
}

/// Continues training `model` from `state.step`.
pub fn train_student(
    model: &mut FastSpeech,
    state: &mut AdamState,
    dataset: &[TrainingSample],
    opt: &OptimizerConfig,
    options: &TrainOptions,
) -> Result<TrainReport> {
    let lambda = options.lambda;
    run(
        model,
        state,
        dataset.len(),
        opt,
        options,
        |model, i, ctx, grads, scale| {
            let s = &dataset[i];
            let mut g = Graph::new().with_dropout(ctx);
            let w = model.bind(&mut g);
            let out = model.forward(&mut g, &w, &s.phonemes, &s.target_durations)?;
            let mel_target = g.constant_ref(s.target_mel.frames());
            let mel = g.mse(out.mel, mel_target)?;
            let dur_target = g.constant(s.target_durations.log_targets());
            let duration = g.mse(out.log_durations, dur_target)?;
            let total = g.weighted_sum(&[(mel, 1.0), (duration, lambda)])?;
            let loss = StepLoss { total: g.value(total).item()?, mel: g.value(mel).item()?, duration: g.value(duration).item()? };
            if loss.total.is_finite() {
                accumulate(&w, &g.backward(total)?, grads, scale);
            }
            Ok(loss)
        },
        |model, grads, state, lr| adam_step(model.weights_mut(), grads, state, lr, opt),
    )
}

/// Teacher-forced mel MSE training.
pub fn train_teacher(
    model: &mut TeacherLite,
    state: &mut AdamState,
    dataset: &[TeacherSample],
    opt: &OptimizerConfig,
    options: &TrainOptions,
) -> Result<TrainReport> {
    run(
        model,
        state,
        dataset.len(),
        opt,
        options,
        |model, i, ctx, grads, scale| {
            let s = &dataset[i];
            let mut g = Graph::new().with_dropout(ctx);
            let w = model.bind(&mut g);
            let out = model.forward(&mut g, &w, &s.phonemes, &s.mel)?;
            let target = g.constant_ref(s.mel.frames());
            let mel = g.mse(out.mel, target)?;
            let v = g.value(mel).item()?;
            if v.is_finite() {
                accumulate(&w, &g.backward(mel)?, grads, scale);
            }
            Ok(StepLoss { total: v, mel: v, duration: 0.0 })
        },
        |model, grads, state, lr| adam_step(model.weights_mut(), grads, state, lr, opt),
    )
}

/// Inference-mode mean mel MSE (with the target durations forced) and mean
/// duration log-MSE over a dataset.
pub fn evaluate_student(model: &FastSpeech, dataset: &[TrainingSample]) -> Result<(f64, f64)> {
    if dataset.is_empty() {
        return Err(Error::Input("evaluation needs at least one sample".into()));
    }
    let (mut mel, mut dur) = (0.0, 0.0);
    for s in dataset {
        let mut g = Graph::inference();
        let w = model.bind(&mut g);
        let out = model.forward(&mut g, &w, &s.phonemes, &s.target_durations)?;
        let pred = MelSpectrogram::new(g.value(out.mel).clone())?;
        mel += super::mel_loss(&pred, &s.target_mel)?;
        dur += super::duration_loss(g.value(out.log_durations), &s.target_durations)?;
    }
    let n = dataset.len() as f64;
    Ok((mel / n, dur / n))
}

/// Inference-mode teacher-forced mel MSE.
pub fn evaluate_teacher(model: &TeacherLite, dataset: &[TeacherSample]) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Input("evaluation needs at least one sample".into()));
    }
    let mut mel = 0.0;
    for s in dataset {
        let mut g = Graph::inference();
        let w = model.bind(&mut g);
        let out = model.forward(&mut g, &w, &s.phonemes, &s.mel)?;
        mel += super::mel_loss(&MelSpectrogram::new(g.value(out.mel).clone())?, &s.mel)?;
    }
    Ok(mel / dataset.len() as f64)
}
