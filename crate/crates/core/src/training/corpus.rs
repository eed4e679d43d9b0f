//! Procedurally generated phoneme/mel/duration corpus.
//!
//! Every token owns a fixed duration and a smooth prototype frame
//! `A·sin(2πkc/mel_dim + φ)`; an utterance holds each phoneme's prototype for
//! its duration. Durations and frames are thus a deterministic function of the
//! phonemes, which is what the overfit and pipeline checks need.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainingSample;
use crate::error::{Error, Result};
use crate::length_regulator::DurationSequence;
use crate::model::{MelSpectrogram, PhonemeSequence};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyCorpusConfig {
    pub samples: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub mel_dim: usize,
    pub max_duration: usize,
    pub seed: u64,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        ToyCorpusConfig { samples: 32, min_len: 8, max_len: 16, vocab_size: 51, mel_dim: 80, max_duration: 4, seed: 7 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyCorpus {
    pub token_durations: Vec<usize>,
    /// `vocab_size × mel_dim`.
    pub prototypes: Tensor,
    pub samples: Vec<TrainingSample>,
}

impl ToyCorpus {
    pub fn generate(cfg: &ToyCorpusConfig) -> Result<Self> {
        if cfg.min_len == 0 || cfg.min_len > cfg.max_len {
            return Err(Error::config(format!(
                "corpus lengths must satisfy 1 <= min_len <= max_len, got {}..{}",
                cfg.min_len, cfg.max_len
            )));
        }
        if cfg.vocab_size == 0 || cfg.mel_dim == 0 || cfg.max_duration == 0 {
            return Err(Error::config("corpus vocab_size, mel_dim and max_duration must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let token_durations: Vec<usize> = (0..cfg.vocab_size).map(|_| rng.random_range(1..=cfg.max_duration)).collect();
        let mut proto = Vec::with_capacity(cfg.vocab_size * cfg.mel_dim);
        for _ in 0..cfg.vocab_size {
            let amp = rng.random_range(0.5..1.0);
            let k = rng.random_range(1..=3) as f64;
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            for c in 0..cfg.mel_dim {
                proto.push(amp * (std::f64::consts::TAU * k * c as f64 / cfg.mel_dim as f64 + phase).sin());
            }
        }
        let prototypes = Tensor::new(vec![cfg.vocab_size, cfg.mel_dim], proto)?;

        let mut samples = Vec::with_capacity(cfg.samples);
        for _ in 0..cfg.samples {
            let n = rng.random_range(cfg.min_len..=cfg.max_len);
            let tokens: Vec<usize> = (0..n).map(|_| rng.random_range(0..cfg.vocab_size)).collect();
            let durations = DurationSequence::new(tokens.iter().map(|&t| token_durations[t]).collect());
            let mut frames = Vec::with_capacity(durations.total() * cfg.mel_dim);
            for (&t, &d) in tokens.iter().zip(durations.values()) {
                for _ in 0..d {
                    frames.extend_from_slice(prototypes.row(t));
                }
            }
            let mel = MelSpectrogram::new(Tensor::new(vec![durations.total(), cfg.mel_dim], frames)?)?;
            samples.push(TrainingSample::new(PhonemeSequence::new(tokens)?, mel, durations)?);
        }
        Ok(ToyCorpus { token_durations, prototypes, samples })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_shape_and_determinism() {
        let cfg = ToyCorpusConfig::default();
        let a = ToyCorpus::generate(&cfg).unwrap();
        let b = ToyCorpus::generate(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.samples.len(), 32);
        for s in &a.samples {
            assert!((8..=16).contains(&s.phonemes.len()));
            assert_eq!(s.target_durations.total(), s.target_mel.len());
            assert_eq!(s.target_mel.dim(), 80);
            assert!(s.target_durations.values().iter().all(|&d| (1..=4).contains(&d)));
        }
    }

    #[test]
    fn rejects_bad_lengths() {
        let cfg = ToyCorpusConfig { min_len: 5, max_len: 4, ..Default::default() };
        assert!(matches!(ToyCorpus::generate(&cfg), Err(Error::Config(_))));
    }
}
