//! Small autoregressive encoder-decoder. It supplies the attention alignments
//! used for duration extraction, the distilled mel targets, and the sequential
//! baseline for latency measurements.
//!
//! Decoder input at position `s` is mel frame `s − 1` (a zero frame at `s = 0`).
//! Self-attention is causally masked and the decoder convolutions are causal,
//! so a teacher-forced pass and step-by-step generation compute the same rows.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{
    bind, causal_mask, fft_block, multi_head_attention, named_params, param_tree, positional_encoding,
    AttentionWeights, Conv1dWeights, FftBlockWeights, LayerNormWeights, Linear, ParamTree,
};
use super::{check_shapes, MelSpectrogram, ModelConfig, PassCounter, PhonemeSequence};
use crate::duration::AttentionMatrix;
use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayerWeights<P = Tensor> {
    pub self_attention: AttentionWeights<P>,
    pub self_attention_norm: LayerNormWeights<P>,
    pub cross_attention: AttentionWeights<P>,
    pub cross_attention_norm: LayerNormWeights<P>,
    pub conv1: Conv1dWeights<P>,
    pub conv2: Conv1dWeights<P>,
    pub conv_norm: LayerNormWeights<P>,
}
param_tree!(DecoderLayerWeights {
    leaves: [],
    nodes: [self_attention, self_attention_norm, cross_attention, cross_attention_norm, conv1, conv2, conv_norm]
});

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherWeights<P = Tensor> {
    pub embedding: P,
    pub encoder: Vec<FftBlockWeights<P>>,
    pub prenet: Linear<P>,
    pub decoder: Vec<DecoderLayerWeights<P>>,
    pub mel_output: Linear<P>,
}
param_tree!(TeacherWeights { leaves: [embedding], nodes: [encoder, prenet, decoder, mel_output] });

impl TeacherWeights {
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let c = config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedding =
            super::layers::xavier_uniform(&mut rng, &[c.vocab_size, c.d_model], c.vocab_size, c.d_model);
        let encoder = (0..c.n_blocks_phoneme)
            .map(|_| FftBlockWeights::init(&mut rng, c.d_model, c.conv_kernel, c.conv_filter))
            .collect();
        let prenet = Linear::init(&mut rng, c.mel_dim, c.d_model);
        let decoder = (0..c.n_blocks_mel)
            .map(|_| DecoderLayerWeights {
                self_attention: AttentionWeights::init(&mut rng, c.d_model),
                self_attention_norm: LayerNormWeights::new(c.d_model),
                cross_attention: AttentionWeights::init(&mut rng, c.d_model),
                cross_attention_norm: LayerNormWeights::new(c.d_model),
                conv1: Conv1dWeights::init(&mut rng, c.conv_kernel, c.d_model, c.conv_filter),
                conv2: Conv1dWeights::init(&mut rng, c.conv_kernel, c.conv_filter, c.d_model),
                conv_norm: LayerNormWeights::new(c.d_model),
            })
            .collect();
        let mel_output = Linear::init(&mut rng, c.d_model, c.mel_dim);
        TeacherWeights { embedding, encoder, prenet, decoder, mel_output }
    }
}

/// One generated frame and, for every decoder layer and head (layer-major),
/// that frame's cross-attention row over the phonemes.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub frame: Vec<f64>,
    pub attention: Vec<Vec<f64>>,
}

/// Graph nodes of a teacher-forced pass.
#[derive(Clone, Debug)]
pub struct TeacherForced {
    pub mel: NodeId,
    /// `S × T` cross-attention weights per decoder layer and head, layer-major.
    pub attention: Vec<NodeId>,
}

#[derive(Debug)]
pub struct TeacherLite {
    config: ModelConfig,
    weights: TeacherWeights,
    passes: PassCounter,
}

impl TeacherLite {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let weights = TeacherWeights::init(&config, seed);
        Ok(TeacherLite { config, weights, passes: PassCounter::default() })
    }

    pub fn from_weights(config: ModelConfig, weights: TeacherWeights) -> Result<Self> {
        config.validate()?;
        check_shapes(&Self::expected_shapes(&config), &named_params(&weights))?;
        Ok(TeacherLite { config, weights, passes: PassCounter::default() })
    }

    pub fn expected_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let template = TeacherWeights::init(config, 0);
        named_params(&template).into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect()
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &TeacherWeights {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut TeacherWeights {
        &mut self.weights
    }

    /// Decoder evaluations so far: one per generated frame, one per teacher-forced pass.
    pub fn forward_passes(&self) -> u64 {
        self.passes.get()
    }

    pub fn heads_per_pass(&self) -> usize {
        self.config.n_blocks_mel * self.config.n_heads
    }

    pub fn bind<'a>(&'a self, g: &mut Graph<'a>) -> TeacherWeights<NodeId> {
        bind(&self.weights, g)
    }

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

    pub fn encode(&self, g: &mut Graph<'_>, w: &TeacherWeights<NodeId>, p: &PhonemeSequence) -> Result<NodeId> {
        p.check_vocab(self.config.vocab_size)?;
        let emb = g.gather_rows(w.embedding, p.tokens())?;
        let pe = g.constant(positional_encoding(p.len(), self.config.d_model));
        let mut x = g.add(emb, pe)?;
        for block in &w.encoder {
            x = fft_block(g, x, block, self.config.n_heads, self.config.dropout)?;
        }
        Ok(x)
    }

    /// Runs the decoder over already right-shifted input frames.
    pub fn decode(
        &self,
        g: &mut Graph<'_>,
        w: &TeacherWeights<NodeId>,
        memory: NodeId,
        inputs: NodeId,
        capture: Option<&mut Vec<NodeId>>,
    ) -> Result<NodeId> {
        let (len, _) = g.value(inputs).dims2()?;
        if len == 0 {
            return Err(Error::EmptyOutput("teacher decoder got no input frames".into()));
        }
        self.passes.increment();
        let c = &self.config;
        let x = w.prenet.forward(g, inputs)?;
        let x = g.relu(x);
        let pe = g.constant(positional_encoding(len, c.d_model));
        let mut x = g.add(x, pe)?;
        let mask = g.constant(causal_mask(len));
        let mut capture = capture;
        for layer in &w.decoder {
            let a = multi_head_attention(g, x, x, &layer.self_attention, c.n_heads, Some(mask), None)?;
            let a = g.dropout(a, c.dropout)?;
            let r = g.add(x, a)?;
            let y = layer.self_attention_norm.forward(g, r)?;

            let a = multi_head_attention(g, y, memory, &layer.cross_attention, c.n_heads, None, capture.as_deref_mut())?;
            let a = g.dropout(a, c.dropout)?;
            let r = g.add(y, a)?;
            let y = layer.cross_attention_norm.forward(g, r)?;

            let h = layer.conv1.causal(g, y)?;
            let h = g.relu(h);
            let h = layer.conv2.causal(g, h)?;
            let h = g.dropout(h, c.dropout)?;
            let r = g.add(y, h)?;
            x = layer.conv_norm.forward(g, r)?;
        }
        w.mel_output.forward(g, x)
    }

    /// Teacher-forced pass over a ground-truth spectrogram.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        w: &TeacherWeights<NodeId>,
        p: &PhonemeSequence,
        target: &MelSpectrogram,
    ) -> Result<TeacherForced> {
        if target.dim() != self.config.mel_dim {
            return Err(Error::dim(format!(
                "target has {} mel channels, teacher expects {}",
                target.dim(),
                self.config.mel_dim
            )));
        }
        let memory = self.encode(g, w, p)?;
        let inputs = g.constant(shift_right(target.frames(), target.len())?);
        let mut attention = Vec::new();
        let mel = self.decode(g, w, memory, inputs, Some(&mut attention))?;
        Ok(TeacherForced { mel, attention })
    }

    /// Cross-attention matrices of a teacher-forced pass, one per layer and head.
    pub fn teacher_forced_attention(&self, p: &PhonemeSequence, target: &MelSpectrogram) -> Result<Vec<AttentionMatrix>> {
        let mut g = Graph::inference();
        let w = self.bind(&mut g);
        let out = self.forward(&mut g, &w, p, target)?;
        out.attention
            .iter()
            .map(|&id| AttentionMatrix::new(g.value(id).clone()))
            .collect()
    }

    pub fn encode_phonemes(&self, p: &PhonemeSequence) -> Result<Tensor> {
        let mut g = Graph::inference();
        let w = self.bind(&mut g);
        let m = self.encode(&mut g, &w, p)?;
        Ok(g.value(m).clone())
    }

    /// One autoregressive step: predicts the frame following `prefix` (which may
    /// have zero rows) given encoded phonemes `memory`.
    pub fn step(&self, prefix: &Tensor, memory: &Tensor) -> Result<StepOutput> {
        let (s, dim) = prefix.dims2()?;
        if dim != self.config.mel_dim {
            return Err(Error::dim(format!(
                "prefix has {dim} mel channels, teacher expects {}",
                self.config.mel_dim
            )));
        }
        let mut g = Graph::inference();
        let w = self.bind(&mut g);
        let mem = g.constant_ref(memory);
        let inputs = g.constant(shift_right(prefix, s + 1)?);
        let mut attention = Vec::new();
        let mel = self.decode(&mut g, &w, mem, inputs, Some(&mut attention))?;
        Ok(StepOutput {
            frame: g.value(mel).row(s).to_vec(),
            attention: attention.iter().map(|&a| g.value(a).row(s).to_vec()).collect(),
        })
    }

    /// Encodes `p` and takes a single step after `prefix`.
    pub fn teacher_lite_step(&self, prefix: &Tensor, p: &PhonemeSequence) -> Result<StepOutput> {
        let memory = self.encode_phonemes(p)?;
        self.step(prefix, &memory)
    }

    /// Free-running generation of exactly `frames` frames (`frames` sequential steps).
    pub fn generate(&self, p: &PhonemeSequence, frames: usize) -> Result<(MelSpectrogram, Vec<AttentionMatrix>)> {
        let memory = self.encode_phonemes(p)?;
        let dim = self.config.mel_dim;
        let heads = self.heads_per_pass();
        let mut mel = Vec::with_capacity(frames * dim);
        let mut rows: Vec<Vec<f64>> = vec![Vec::with_capacity(frames * p.len()); heads];
        for s in 0..frames {
            let prefix = Tensor::new(vec![s, dim], mel.clone())?;
            let out = self.step(&prefix, &memory)?;
            mel.extend_from_slice(&out.frame);
            for (acc, row) in rows.iter_mut().zip(out.attention) {
                acc.extend(row);
            }
        }
        let mel = MelSpectrogram::new(Tensor::new(vec![frames, dim], mel)?)?;
        let attention = rows
            .into_iter()
            .map(|r| AttentionMatrix::new(Tensor::new(vec![frames, p.len()], r)?))
            .collect::<Result<Vec<_>>>()?;
        Ok((mel, attention))
    }
}

/// Decoder inputs for `len` positions: a zero frame followed by `frames[0..len−1]`.
fn shift_right(frames: &Tensor, len: usize) -> Result<Tensor> {
    let (s, dim) = frames.dims2()?;
    let mut data = vec![0.0; len * dim];
    let copy = len.saturating_sub(1).min(s);
    data[dim..dim + copy * dim].copy_from_slice(&frames.data()[..copy * dim]);
    Tensor::new(vec![len, dim], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn teacher() -> TeacherLite {
        TeacherLite::new(ModelConfig::tiny(), 5).unwrap()
    }

    fn phonemes() -> PhonemeSequence {
        PhonemeSequence::new(vec![1, 3, 5, 2]).unwrap()
    }

    #[test]
    fn shift_right_prepends_zero_frame() {
        let f = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(shift_right(&f, 2).unwrap().data(), &[0.0, 0.0, 1.0, 2.0]);
        assert_eq!(shift_right(&f, 3).unwrap().data(), &[0.0, 0.0, 1.0, 2.0, 3.0, 4.0]);
        assert_eq!(shift_right(&Tensor::zeros(&[0, 2]), 1).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn generation_takes_one_pass_per_frame() {
        let t = teacher();
        for m in [1usize, 4, 9] {
            let before = t.forward_passes();
            let (mel, att) = t.generate(&phonemes(), m).unwrap();
            assert_eq!(t.forward_passes() - before, m as u64);
            assert_eq!(mel.len(), m);
            assert_eq!(att.len(), t.heads_per_pass());
        }
    }

    #[test]
    fn empty_prefix_uses_zero_start_frame() {
        let t = teacher();
        let out = t.teacher_lite_step(&Tensor::zeros(&[0, 4]), &phonemes()).unwrap();
        assert_eq!(out.frame.len(), 4);
        assert_eq!(out.attention.len(), 2);
        for row in &out.attention {
            assert_eq!(row.len(), 4);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn teacher_forced_pass_matches_stepwise_generation() {
        let t = teacher();
        let p = phonemes();
        let (mel, stepwise) = t.generate(&p, 7).unwrap();
        let forced = t.teacher_forced_attention(&p, &mel).unwrap();
        for (a, b) in forced.iter().zip(&stepwise) {
            assert!(a.weights().max_abs_diff(b.weights()) < 1e-10);
        }
        let mut g = Graph::inference();
        let w = t.bind(&mut g);
        let out = t.forward(&mut g, &w, &p, &mel).unwrap();
        assert!(g.value(out.mel).max_abs_diff(mel.frames()) < 1e-10);
    }

    #[test]
    fn forced_attention_feeds_extraction() {
        let t = teacher();
        let mel = MelSpectrogram::new(Tensor::new(vec![11, 4], (0..44).map(|i| (i as f64).sin()).collect()).unwrap()).unwrap();
        let heads = t.teacher_forced_attention(&phonemes(), &mel).unwrap();
        let report = crate::duration::align(&heads).unwrap();
        assert_eq!(report.durations.total(), 11);
        assert_eq!(report.durations.len(), 4);
    }

    #[test]
    fn mel_dim_mismatch_rejected() {
        let t = teacher();
        let mel = MelSpectrogram::new(Tensor::zeros(&[3, 5])).unwrap();
        assert!(matches!(t.teacher_forced_attention(&phonemes(), &mel), Err(Error::Dimension(_))));
    }
}
