//! Expands phoneme-level hidden states to frame level according to durations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Tensor};

/// Frames per phoneme. The sum is the regulated (mel) length.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DurationSequence(Vec<usize>);

impl DurationSequence {
    pub fn new(values: Vec<usize>) -> Self {
        DurationSequence(values)
    }

    pub fn values(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }

    /// Source phoneme of every output frame, in order.
    pub fn expansion_index(&self) -> Vec<usize> {
        let mut index = Vec::with_capacity(self.total());
        for (i, &d) in self.0.iter().enumerate() {
            index.extend(std::iter::repeat_n(i, d));
        }
        index
    }

    /// `ln(d + 1)` per phoneme, the log-domain duration target.
    pub fn log_targets(&self) -> Tensor {
        Tensor::vector(self.0.iter().map(|&d| (d as f64 + 1.0).ln()).collect())
    }
}

impl From<Vec<usize>> for DurationSequence {
    fn from(v: Vec<usize>) -> Self {
        DurationSequence(v)
    }
}

/// Multiplier on durations; > 1 slows speech down, < 1 speeds it up.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct SpeedFactor(f64);

impl SpeedFactor {
    pub const NORMAL: SpeedFactor = SpeedFactor(1.0);

    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::config(format!("speed factor must be positive and finite, got {alpha}")));
        }
        Ok(SpeedFactor(alpha))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for SpeedFactor {
    type Error = Error;

    fn try_from(v: f64) -> Result<Self> {
        SpeedFactor::new(v)
    }
}

impl From<SpeedFactor> for f64 {
    fn from(a: SpeedFactor) -> f64 {
        a.0
    }
}

/// Round half away from zero; on the non-negative durations used here this is "half up".
pub fn round_half_up(x: f64) -> f64 {
    x.round()
}

/// Rounds one non-negative real duration to whole frames.
pub fn round_duration(d: f64) -> usize {
    round_half_up(d.max(0.0)) as usize
}

pub fn scale_durations(d: &DurationSequence, alpha: SpeedFactor) -> DurationSequence {
    DurationSequence(d.0.iter().map(|&v| round_duration(v as f64 * alpha.value())).collect())
}

/// Lengthens the listed (space/boundary) tokens by `extra_frames` each.
pub fn insert_break(d: &DurationSequence, positions: &[usize], extra_frames: usize) -> Result<DurationSequence> {
    if extra_frames == 0 {
        return Err(Error::config("break length must be at least one frame"));
    }
    let mut out = d.0.clone();
    for &p in positions {
        let len = out.len();
        let slot = out.get_mut(p).ok_or(Error::Bounds { index: p, len })?;
        *slot += extra_frames;
    }
    Ok(DurationSequence(out))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegulatedHidden {
    pub frames: Tensor,
    pub source_index: Vec<usize>,
}

impl RegulatedHidden {
    pub fn len(&self) -> usize {
        self.source_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_index.is_empty()
    }
}

fn check_lengths(rows: usize, d: &DurationSequence) -> Result<()> {
    if rows != d.len() {
        return Err(Error::dim(format!(
            "{rows} phoneme hidden states but {} durations",
            d.len()
        )));
    }
    Ok(())
}

/// Repeats row `i` of `hidden` `round(dᵢ·α)` times, in order.
pub fn regulate(hidden: &Tensor, d: &DurationSequence, alpha: SpeedFactor) -> Result<RegulatedHidden> {
    let (n, width) = hidden.dims2()?;
    check_lengths(n, d)?;
    let source_index = scale_durations(d, alpha).expansion_index();
    let mut data = Vec::with_capacity(source_index.len() * width);
    for &i in &source_index {
        data.extend_from_slice(hidden.row(i));
    }
    Ok(RegulatedHidden {
        frames: Tensor::new(vec![source_index.len(), width], data)?,
        source_index,
    })
}

/// Tape version of [`regulate`] for already-scaled durations. Duplication is
/// linear, so each source phoneme receives the summed gradient of its copies.
pub fn regulate_node(g: &mut Graph, hidden: NodeId, d: &DurationSequence) -> Result<NodeId> {
    let (n, _) = g.value(hidden).dims2()?;
    check_lengths(n, d)?;
    g.gather_rows(hidden, &d.expansion_index())
}
