//! The feed-forward Transformer (student) and the small autoregressive teacher.

pub mod config;
pub mod fastspeech;
pub mod layers;
pub mod teacher;

use std::sync::atomic::{AtomicU64, Ordering};

pub use config::ModelConfig;
pub use fastspeech::{FastSpeech, FastSpeechWeights, StudentOutput, Synthesis};
pub use teacher::{DecoderLayerWeights, StepOutput, TeacherLite, TeacherWeights};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhonemeSequence {
    tokens: Vec<usize>,
}

impl PhonemeSequence {
    pub fn new(tokens: Vec<usize>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Input("phoneme sequence is empty".into()));
        }
        Ok(PhonemeSequence { tokens })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        match self.tokens.iter().position(|&t| t >= vocab_size) {
            Some(i) => Err(Error::Input(format!(
                "phoneme {i} has id {} outside vocabulary of {vocab_size}",
                self.tokens[i]
            ))),
            None => Ok(()),
        }
    }
}

/// `m × mel_dim` frames.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    frames: Tensor,
}

impl MelSpectrogram {
    pub fn new(frames: Tensor) -> Result<Self> {
        frames.dims2()?;
        if !frames.is_finite() {
            return Err(Error::Numeric("mel-spectrogram contains non-finite values".into()));
        }
        Ok(MelSpectrogram { frames })
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn into_tensor(self) -> Tensor {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.shape()[1]
    }

    /// Keeps the first `frames` rows, repeating the last row (or zeros) to pad.
    pub fn fit_length(&self, frames: usize) -> MelSpectrogram {
        let dim = self.dim();
        let mut data = Vec::with_capacity(frames * dim);
        for t in 0..frames {
            if t < self.len() {
                data.extend_from_slice(self.frames.row(t));
            } else if !self.is_empty() {
                data.extend_from_slice(self.frames.row(self.len() - 1));
            } else {
                data.extend(std::iter::repeat_n(0.0, dim));
            }
        }
        MelSpectrogram { frames: Tensor::new(vec![frames, dim], data).expect("sized above") }
    }
}

/// Counts sequential generation passes (one per mel-side stack evaluation).
#[derive(Debug, Default)]
pub struct PassCounter(AtomicU64);

impl PassCounter {
    pub fn increment(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
}

/// Expected `(name, shape)` of every parameter, used to validate loaded weights.
pub(crate) fn check_shapes(expected: &[(String, Vec<usize>)], actual: &[(String, &Tensor)]) -> Result<()> {
    for (name, shape) in expected {
        match actual.iter().find(|(n, _)| n == name) {
            None => return Err(Error::Integrity(format!("missing tensor {name}"))),
            Some((_, t)) if t.shape() != shape.as_slice() => {
                return Err(Error::Integrity(format!(
                    "tensor {name} has shape {:?}, config expects {shape:?}",
                    t.shape()
                )))
            }
            _ => {}
        }
    }
    if let Some((n, _)) = actual.iter().find(|(n, _)| !expected.iter().any(|(e, _)| e == n)) {
        return Err(Error::Integrity(format!("unexpected tensor {n}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phoneme_validation() {
        assert!(matches!(PhonemeSequence::new(vec![]), Err(Error::Input(_))));
        let p = PhonemeSequence::new(vec![0, 4, 9]).unwrap();
        assert!(p.check_vocab(10).is_ok());
        assert!(matches!(p.check_vocab(9), Err(Error::Input(_))));
    }

    #[test]
    fn fit_length_truncates_and_pads() {
        let mel = MelSpectrogram::new(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap()).unwrap();
        assert_eq!(mel.fit_length(1).frames().data(), &[1.0, 2.0]);
        assert_eq!(mel.fit_length(3).frames().data(), &[1.0, 2.0, 3.0, 4.0, 3.0, 4.0]);
    }
}
