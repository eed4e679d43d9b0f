//! Latency benchmark: one parallel decode versus `m` autoregressive steps.
//!
//! The parallel model is given fixed durations that sum to exactly `m`, so both
//! systems emit the same number of frames and only the generation strategy differs.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::length_regulator::DurationSequence;
use crate::model::{FastSpeech, ModelConfig, PhonemeSequence, TeacherLite};

pub const MIN_REPETITIONS: usize = 5;
pub const WARMUP_RUNS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum System {
    Parallel,
    Autoregressive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub system: System,
    pub m: usize,
    /// Median seconds over `repetitions` timed runs.
    pub wall_time: f64,
    /// Block-stack evaluations in one run.
    pub sequential_passes: u64,
    pub repetitions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Speedup {
    pub m: usize,
    pub parallel: f64,
    pub autoregressive: f64,
    pub speedup: f64,
}

/// Matched toy configuration used when no checkpoints are given.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 51,
        d_model: 16,
        n_blocks_phoneme: 1,
        n_blocks_mel: 1,
        n_heads: 2,
        conv_kernel: 3,
        conv_filter: 32,
        mel_dim: 16,
        dropout: 0.1,
        duration_stop_gradient: true,
        duration_kernel: 3,
        duration_filter: 16,
    }
}

/// The two systems must have the same width and depth to be comparable.
pub fn check_fairness(student: &ModelConfig, teacher: &ModelConfig) -> Result<()> {
    let fields = [
        ("d_model", student.d_model, teacher.d_model),
        ("n_blocks_phoneme", student.n_blocks_phoneme, teacher.n_blocks_phoneme),
        ("n_blocks_mel", student.n_blocks_mel, teacher.n_blocks_mel),
        ("n_heads", student.n_heads, teacher.n_heads),
        ("conv_filter", student.conv_filter, teacher.conv_filter),
        ("mel_dim", student.mel_dim, teacher.mel_dim),
        ("vocab_size", student.vocab_size, teacher.vocab_size),
    ];
    let diffs: Vec<String> = fields
        .iter()
        .filter(|(_, s, t)| s != t)
        .map(|(n, s, t)| format!("{n} (student {s}, teacher {t})"))
        .collect();
    if diffs.is_empty() {
        Ok(())
    } else {
        Err(Error::config(format!("benchmark configs are not matched: {}", diffs.join(", "))))
    }
}

/// `m` frames spread as evenly as possible over `n` phonemes.
pub fn even_durations(n: usize, m: usize) -> DurationSequence {
    DurationSequence::new((0..n).map(|i| m / n + usize::from(i < m % n)).collect())
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

fn time_runs(reps: usize, mut run: impl FnMut() -> Result<()>) -> Result<f64> {
    for _ in 0..WARMUP_RUNS {
        run()?;
    }
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        run()?;
        times.push(t.elapsed().as_secs_f64().max(f64::MIN_POSITIVE));
    }
    Ok(median(&mut times))
}

pub fn bench_parallel(model: &FastSpeech, p: &PhonemeSequence, m: usize, reps: usize) -> Result<BenchRecord> {
    let d = even_durations(p.len(), m);
    let before = model.forward_passes();
    let mel = model.synthesize_with_durations(p, &d)?;
    if mel.len() != m {
        return Err(Error::Integrity(format!("parallel model produced {} frames, wanted {m}", mel.len())));
    }
    let sequential_passes = model.forward_passes() - before;
    let wall_time = time_runs(reps, || model.synthesize_with_durations(p, &d).map(drop))?;
    Ok(BenchRecord { system: System::Parallel, m, wall_time, sequential_passes, repetitions: reps })
}

pub fn bench_autoregressive(teacher: &TeacherLite, p: &PhonemeSequence, m: usize, reps: usize) -> Result<BenchRecord> {
    let before = teacher.forward_passes();
    let (mel, _) = teacher.generate(p, m)?;
    if mel.len() != m {
        return Err(Error::Integrity(format!("teacher produced {} frames, wanted {m}", mel.len())));
    }
    let sequential_passes = teacher.forward_passes() - before;
    let wall_time = time_runs(reps, || teacher.generate(p, m).map(drop))?;
    Ok(BenchRecord { system: System::Autoregressive, m, wall_time, sequential_passes, repetitions: reps })
}

/// Parallel and autoregressive records for every length, in that order.
pub fn run_bench(
    student: &FastSpeech,
    teacher: &TeacherLite,
    p: &PhonemeSequence,
    lengths: &[usize],
    reps: usize,
) -> Result<Vec<BenchRecord>> {
    if reps < MIN_REPETITIONS {
        return Err(Error::Usage(format!("--reps must be at least {MIN_REPETITIONS}, got {reps}")));
    }
    if lengths.is_empty() || lengths.contains(&0) {
        return Err(Error::Usage("--lengths needs one or more positive frame counts".into()));
    }
    let mut out = Vec::with_capacity(2 * lengths.len());
    for &m in lengths {
        out.push(bench_parallel(student, p, m, reps)?);
        out.push(bench_autoregressive(teacher, p, m, reps)?);
    }
    Ok(out)
}

pub fn speedups(records: &[BenchRecord]) -> Vec<Speedup> {
    let mut out = Vec::new();
    for r in records.iter().filter(|r| r.system == System::Parallel) {
        if let Some(a) = records.iter().find(|a| a.system == System::Autoregressive && a.m == r.m) {
            out.push(Speedup { m: r.m, parallel: r.wall_time, autoregressive: a.wall_time, speedup: a.wall_time / r.wall_time });
        }
    }
    out
}

pub fn to_csv(records: &[BenchRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r).map_err(|e| Error::Integrity(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Integrity(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn even_durations_sum_to_m() {
        assert_eq!(even_durations(4, 10).values(), &[3, 3, 2, 2]);
        for m in [1, 7, 128, 513] {
            assert_eq!(even_durations(16, m).total(), m);
        }
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn fairness_names_mismatched_fields() {
        let a = toy_config();
        assert!(check_fairness(&a, &a).is_ok());
        let b = ModelConfig { d_model: 32, ..a.clone() };
        let err = check_fairness(&a, &b).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("d_model"));
    }

    #[test]
    fn pass_counts_and_csv_shape() {
        let cfg = toy_config();
        let s = FastSpeech::new(cfg.clone(), 1).unwrap();
        let t = TeacherLite::new(cfg, 2).unwrap();
        let p = PhonemeSequence::new((0..8).collect()).unwrap();
        let recs = run_bench(&s, &t, &p, &[4, 9], 5).unwrap();
        assert_eq!(recs.len(), 4);
        for r in &recs {
            let want = if r.system == System::Parallel { 1 } else { r.m as u64 };
            assert_eq!(r.sequential_passes, want);
            assert!(r.wall_time > 0.0);
            assert_eq!(r.repetitions, 5);
        }
        let csv = to_csv(&recs).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "system,m,wall_time,sequential_passes,repetitions");
        assert_eq!(lines.len(), 5);
        assert!(lines[2].starts_with("autoregressive,4,"));
        assert_eq!(speedups(&recs).len(), 2);
        assert!(matches!(run_bench(&s, &t, &p, &[4], 4), Err(Error::Usage(_))));
    }
}
