//! Sequence-level knowledge distillation: the teacher supplies both the
//! student's target spectrograms and, through its cross-attention, the
//! phoneme durations.

use super::{TeacherSample, TrainingSample};
use crate::duration::{align, AlignmentReport, AttentionMatrix};
use crate::error::Result;
use crate::model::{MelSpectrogram, PhonemeSequence, TeacherLite};

/// Alignments whose best head focuses less than this are treated as failed.
pub const MIN_FOCUS_RATE: f64 = 0.05;

/// What distillation needs from a teacher.
pub trait AlignmentTeacher {
    /// Cross-attention of a teacher-forced pass, one `S × T` matrix per head.
    fn alignment_heads(&self, phonemes: &PhonemeSequence, target: &MelSpectrogram) -> Result<Vec<AttentionMatrix>>;

    /// Free-running generation of exactly `frames` frames.
    fn generate_mel(&self, phonemes: &PhonemeSequence, frames: usize) -> Result<MelSpectrogram>;
}

impl AlignmentTeacher for TeacherLite {
    fn alignment_heads(&self, phonemes: &PhonemeSequence, target: &MelSpectrogram) -> Result<Vec<AttentionMatrix>> {
        self.teacher_forced_attention(phonemes, target)
    }

    fn generate_mel(&self, phonemes: &PhonemeSequence, frames: usize) -> Result<MelSpectrogram> {
        Ok(self.generate(phonemes, frames)?.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkippedSample {
    pub index: usize,
    pub best_focus: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Distilled {
    pub samples: Vec<TrainingSample>,
    /// Corpus index and alignment report of every emitted sample.
    pub reports: Vec<(usize, AlignmentReport)>,
    pub skipped: Vec<SkippedSample>,
}

/// Teacher-forced alignment of one pair; `Ok(Err(..))` flags a degenerate alignment.
pub fn extract_alignment<T: AlignmentTeacher + ?Sized>(
    teacher: &T,
    index: usize,
    sample: &TeacherSample,
) -> Result<std::result::Result<AlignmentReport, SkippedSample>> {
    let heads = teacher.alignment_heads(&sample.phonemes, &sample.mel)?;
    check_alignment(index, &heads)
}

/// Aligns precomputed heads; `Ok(Err(..))` flags a degenerate alignment.
pub fn check_alignment(
    index: usize,
    heads: &[AttentionMatrix],
) -> Result<std::result::Result<AlignmentReport, SkippedSample>> {
    let report = align(heads)?;
    let best_focus = report.best_focus();
    if best_focus < MIN_FOCUS_RATE {
        log::warn!("sample {index}: best focus rate {best_focus:.4} is below {MIN_FOCUS_RATE}; skipped");
        return Ok(Err(SkippedSample { index, best_focus }));
    }
    Ok(Ok(report))
}

/// For every pair: durations from the teacher-forced alignment (so `Σd = S`),
/// target spectrogram from free-running generation of `Σd` frames.
pub fn distill_dataset<T: AlignmentTeacher + ?Sized>(teacher: &T, corpus: &[TeacherSample]) -> Result<Distilled> {
    let mut out = Distilled::default();
    for (index, sample) in corpus.iter().enumerate() {
        let report = match extract_alignment(teacher, index, sample)? {
            Ok(r) => r,
            Err(skip) => {
                out.skipped.push(skip);
                continue;
            }
        };
        let frames = report.durations.total();
        let generated = teacher.generate_mel(&sample.phonemes, frames)?;
        let target_mel = if generated.len() == frames { generated } else { generated.fit_length(frames) };
        out.samples.push(TrainingSample::new(sample.phonemes.clone(), target_mel, report.durations.clone())?);
        out.reports.push((index, report));
    }
    Ok(out)
}
