//! Parallel phoneme-to-mel synthesis with a feed-forward Transformer.
//!
//! The crate covers the whole pipeline at desk scale: a small tape-based
//! autodiff core ([`tensor`]), the length regulator and duration machinery
//! ([`length_regulator`], [`duration`]), the parallel model and an
//! autoregressive teacher ([`model`]), training and distillation
//! ([`training`]), on-disk formats ([`io`]), the latency benchmark ([`bench`])
//! and the `fastmel` command line ([`cli`]).
//!
//! ```
//! use fastmel::length_regulator::SpeedFactor;
//! use fastmel::model::{ModelConfig, PhonemeSequence};
//! use fastmel::training::{fit, OptimizerConfig, ToyCorpus, ToyCorpusConfig};
//!
//! let config = ModelConfig::tiny();
//! let corpus = ToyCorpus::generate(&ToyCorpusConfig { vocab_size: 10, mel_dim: 4, ..Default::default() })?;
//! let trained = fit(&corpus.samples, &config, &OptimizerConfig::for_model(config.d_model), 200, 0)?;
//! let out = trained.model.synthesize(&PhonemeSequence::new(vec![1, 2, 3])?, SpeedFactor::new(1.0)?)?;
//! assert_eq!(out.mel.len(), out.durations.total());
//! # Ok::<(), fastmel::Error>(())
//! ```

pub mod bench;
pub mod cli;
pub mod duration;
pub mod error;
pub mod io;
pub mod length_regulator;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
