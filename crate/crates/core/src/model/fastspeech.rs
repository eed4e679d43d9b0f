use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{bind, fft_block, named_params, param_tree, positional_encoding, FftBlockWeights, Linear, ParamTree};
use super::{check_shapes, MelSpectrogram, ModelConfig, PassCounter, PhonemeSequence};
use crate::duration::{duration_predictor, real_durations_from_log, DurationPredictorWeights};
use crate::error::{Error, Result};
use crate::length_regulator::{insert_break, regulate_node, round_duration, DurationSequence, RegulatedHidden, SpeedFactor};
use crate::tensor::{Graph, NodeId, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct FastSpeechWeights<P = Tensor> {
    /// `vocab_size × d_model`.
    pub embedding: P,
    pub encoder: Vec<FftBlockWeights<P>>,
    pub duration_predictor: DurationPredictorWeights<P>,
    pub decoder: Vec<FftBlockWeights<P>>,
    pub mel_output: Linear<P>,
}
param_tree!(FastSpeechWeights {
    leaves: [embedding],
    nodes: [encoder, duration_predictor, decoder, mel_output]
});

impl FastSpeechWeights {
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config;
        let embedding =
            super::layers::xavier_uniform(&mut rng, &[c.vocab_size, c.d_model], c.vocab_size, c.d_model);
        let encoder = (0..c.n_blocks_phoneme)
            .map(|_| FftBlockWeights::init(&mut rng, c.d_model, c.conv_kernel, c.conv_filter))
            .collect();
        let duration_predictor =
            DurationPredictorWeights::init(&mut rng, c.d_model, c.duration_kernel, c.duration_filter);
        let decoder = (0..c.n_blocks_mel)
            .map(|_| FftBlockWeights::init(&mut rng, c.d_model, c.conv_kernel, c.conv_filter))
            .collect();
        let mel_output = Linear::init(&mut rng, c.d_model, c.mel_dim);
        FastSpeechWeights { embedding, encoder, duration_predictor, decoder, mel_output }
    }
}

/// Graph nodes of one student forward pass.
#[derive(Clone, Copy, Debug)]
pub struct StudentOutput {
    pub phoneme_hidden: NodeId,
    /// `[n]`, in the `ln(d + 1)` domain.
    pub log_durations: NodeId,
    /// `m × mel_dim`.
    pub mel: NodeId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Synthesis {
    pub mel: MelSpectrogram,
    /// The integer durations the regulator actually used.
    pub durations: DurationSequence,
}

/// Non-autoregressive phoneme-to-mel model: phoneme-side FFT blocks, length
/// regulator, mel-side FFT blocks and a linear mel projection.
#[derive(Debug)]
pub struct FastSpeech {
    config: ModelConfig,
    weights: FastSpeechWeights,
    passes: PassCounter,
}

impl FastSpeech {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let weights = FastSpeechWeights::init(&config, seed);
        Ok(FastSpeech { config, weights, passes: PassCounter::default() })
    }

    pub fn from_weights(config: ModelConfig, weights: FastSpeechWeights) -> Result<Self> {
        config.validate()?;
        let expected = Self::expected_shapes(&config);
        check_shapes(&expected, &named_params(&weights))?;
        Ok(FastSpeech { config, weights, passes: PassCounter::default() })
    }

    pub fn expected_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let template = FastSpeechWeights::init(config, 0);
        named_params(&template).into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect()
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &FastSpeechWeights {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut FastSpeechWeights {
        &mut self.weights
    }

    pub fn into_weights(self) -> FastSpeechWeights {
        self.weights
    }

    /// Mel-side stack evaluations so far; one per decode regardless of length.
    pub fn forward_passes(&self) -> u64 {
        self.passes.get()
    }

    pub fn bind<'a>(&'a self, g: &mut Graph<'a>) -> FastSpeechWeights<NodeId> {
        bind(&self.weights, g)
    }

    /// Embedding plus positions through the phoneme-side blocks.
    pub fn encode(&self, g: &mut Graph<'_>, w: &FastSpeechWeights<NodeId>, p: &PhonemeSequence) -> Result<NodeId> {
        p.check_vocab(self.config.vocab_size)?;
        let emb = g.gather_rows(w.embedding, p.tokens())?;
        let pe = g.constant(positional_encoding(p.len(), self.config.d_model));
        let mut x = g.add(emb, pe)?;
        for block in &w.encoder {
            x = fft_block(g, x, block, self.config.n_heads, self.config.dropout)?;
        }
        Ok(x)
    }

    /// Log-domain durations from phoneme hidden states; detached from the
    /// encoder when `duration_stop_gradient` is set.
    pub fn predict(&self, g: &mut Graph<'_>, w: &FastSpeechWeights<NodeId>, hidden: NodeId) -> Result<NodeId> {
        let input = if self.config.duration_stop_gradient { g.detach(hidden) } else { hidden };
        duration_predictor(g, input, &w.duration_predictor, self.config.dropout)
    }

    /// One pass of the mel-side stack over all regulated frames at once.
    pub fn decode(&self, g: &mut Graph<'_>, w: &FastSpeechWeights<NodeId>, regulated: NodeId) -> Result<NodeId> {
        let (m, _) = g.value(regulated).dims2()?;
        if m == 0 {
            return Err(Error::EmptyOutput("no frames to decode".into()));
        }
        self.passes.increment();
        let pe = g.constant(positional_encoding(m, self.config.d_model));
        let mut x = g.add(regulated, pe)?;
        for block in &w.decoder {
            x = fft_block(g, x, block, self.config.n_heads, self.config.dropout)?;
        }
        w.mel_output.forward(g, x)
    }

    /// Training-time forward with fixed (extracted) durations.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        w: &FastSpeechWeights<NodeId>,
        p: &PhonemeSequence,
        durations: &DurationSequence,
    ) -> Result<StudentOutput> {
        let phoneme_hidden = self.encode(g, w, p)?;
        let log_durations = self.predict(g, w, phoneme_hidden)?;
        if durations.total() == 0 {
            return Err(Error::EmptyOutput("all target durations are zero".into()));
        }
        let regulated = regulate_node(g, phoneme_hidden, durations)?;
        let mel = self.decode(g, w, regulated)?;
        Ok(StudentOutput { phoneme_hidden, log_durations, mel })
    }

    pub fn encode_phonemes(&self, p: &PhonemeSequence) -> Result<Tensor> {
        let mut g = Graph::inference();
        let w = self.bind(&mut g);
        let h = self.encode(&mut g, &w, p)?;
        Ok(g.value(h).clone())
    }

    pub fn decode_mel(&self, hidden: &RegulatedHidden) -> Result<MelSpectrogram> {
        let mut g = Graph::inference();
        let w = self.bind(&mut g);
        let x = g.constant_ref(&hidden.frames);
        let mel = self.decode(&mut g, &w, x)?;
        MelSpectrogram::new(g.value(mel).clone())
    }

    /// Predicted durations, scaled by `alpha` and rounded once.
    pub fn synthesize(&self, p: &PhonemeSequence, alpha: SpeedFactor) -> Result<Synthesis> {
        self.synthesize_with_breaks(p, alpha, &[])
    }

    /// Like [`FastSpeech::synthesize`], lengthening each `(position, frames)` token after scaling.
    pub fn synthesize_with_breaks(
        &self,
        p: &PhonemeSequence,
        alpha: SpeedFactor,
        breaks: &[(usize, usize)],
    ) -> Result<Synthesis> {
        let mut g = Graph::inference();
        let w = self.bind(&mut g);
        let hidden = self.encode(&mut g, &w, p)?;
        let log_d = self.predict(&mut g, &w, hidden)?;
        let real = real_durations_from_log(g.value(log_d))?;
        let mut durations =
            DurationSequence::new(real.iter().map(|d| round_duration(d * alpha.value())).collect());
        for &(pos, frames) in breaks {
            durations = insert_break(&durations, &[pos], frames)?;
        }
        if durations.total() == 0 {
            return Err(Error::EmptyOutput(format!(
                "every predicted duration rounds to zero at alpha = {} (raw predictions {:?})",
                alpha.value(),
                real
            )));
        }
        let regulated = regulate_node(&mut g, hidden, &durations)?;
        let mel = self.decode(&mut g, &w, regulated)?;
        Ok(Synthesis { mel: MelSpectrogram::new(g.value(mel).clone())?, durations })
    }

    /// Synthesis with caller-supplied durations, bypassing the predictor.
    pub fn synthesize_with_durations(&self, p: &PhonemeSequence, durations: &DurationSequence) -> Result<MelSpectrogram> {
        let mut g = Graph::inference();
        let w = self.bind(&mut g);
        let hidden = self.encode(&mut g, &w, p)?;
        if durations.total() == 0 {
            return Err(Error::EmptyOutput("all durations are zero".into()));
        }
        let regulated = regulate_node(&mut g, hidden, durations)?;
        let mel = self.decode(&mut g, &w, regulated)?;
        MelSpectrogram::new(g.value(mel).clone())
    }

    pub fn param_count(&self) -> usize {
        super::layers::param_count(&self.weights)
    }

    /// Overwrites every parameter from `(name, tensor)` pairs, checking shapes.
    pub fn load_named(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        let refs: Vec<(String, &Tensor)> = tensors.iter().map(|(n, t)| (n.clone(), t)).collect();
        check_shapes(&Self::expected_shapes(&self.config), &refs)?;
        self.weights.visit_mut("", &mut |name, t| {
            if let Some((_, src)) = tensors.iter().find(|(n, _)| n == name) {
                *t = src.clone();
            }
        });
        Ok(())
    }
}
