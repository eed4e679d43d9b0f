//! Checkpoints: a JSON header followed by named `FSTN` tensor blocks; see docs/formats.md.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor_file::{decode_tensor, encode_tensor, DType};
use super::{read_file, write_atomic};
use crate::error::{Error, Result};
use crate::model::layers::{named_params, ParamTree};
use crate::model::{FastSpeech, ModelConfig, TeacherLite};
use crate::tensor::Tensor;
use crate::training::{AdamState, OptimizerConfig};

pub const MAGIC: &[u8; 4] = b"FSCK";
pub const VERSION: u8 = 1;
const MOMENT1: &str = "optimizer.m.";
const MOMENT2: &str = "optimizer.v.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Student,
    Teacher,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub kind: ModelKind,
    pub model_config: ModelConfig,
    pub optimizer_config: OptimizerConfig,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    /// Model weights under canonical names, then optional Adam moments.
    pub tensors: Vec<(String, Tensor)>,
}

fn collect<T: ParamTree<Param = Tensor>>(weights: &T, state: Option<&AdamState>) -> Vec<(String, Tensor)> {
    let named = named_params(weights);
    let mut out: Vec<(String, Tensor)> = named.iter().map(|(n, t)| (n.clone(), (*t).clone())).collect();
    if let Some(st) = state.filter(|st| st.m.len() == named.len()) {
        for (prefix, moments) in [(MOMENT1, &st.m), (MOMENT2, &st.v)] {
            for ((name, t), m) in named.iter().zip(moments) {
                let moment = Tensor::new(t.shape().to_vec(), m.clone()).expect("moment matches its parameter");
                out.push((format!("{prefix}{name}"), moment));
            }
        }
    }
    out
}

impl Checkpoint {
    pub fn student(model: &FastSpeech, optimizer: &OptimizerConfig, state: &AdamState, seed: u64) -> Self {
        Checkpoint {
            header: CheckpointHeader {
                kind: ModelKind::Student,
                model_config: model.config().clone(),
                optimizer_config: optimizer.clone(),
                step: state.step,
                seed,
            },
            tensors: collect(model.weights(), Some(state)),
        }
    }

    pub fn teacher(model: &TeacherLite, optimizer: &OptimizerConfig, state: &AdamState, seed: u64) -> Self {
        Checkpoint {
            header: CheckpointHeader {
                kind: ModelKind::Teacher,
                model_config: model.config().clone(),
                optimizer_config: optimizer.clone(),
                step: state.step,
                seed,
            },
            tensors: collect(model.weights(), Some(state)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.header.kind != kind {
            return Err(Error::Integrity(format!(
                "checkpoint holds a {:?} model, expected {kind:?}",
                self.header.kind
            )));
        }
        Ok(())
    }

    fn split(&self) -> (Vec<(String, Tensor)>, Vec<&(String, Tensor)>) {
        let (opt, model): (Vec<_>, Vec<_>) =
            self.tensors.iter().partition(|(n, _)| n.starts_with(MOMENT1) || n.starts_with(MOMENT2));
        (model.into_iter().cloned().collect(), opt)
    }

    /// Adam moments in the order of `names`; zeros if the checkpoint has none.
    fn adam_state(&self, names: &[(String, Vec<usize>)], stored: &[&(String, Tensor)]) -> Result<AdamState> {
        let mut st = AdamState { step: self.header.step, m: Vec::new(), v: Vec::new() };
        if stored.is_empty() {
            st.m = names.iter().map(|(_, s)| vec![0.0; s.iter().product()]).collect();
            st.v = st.m.clone();
            return Ok(st);
        }
        for (prefix, dst) in [(MOMENT1, &mut st.m), (MOMENT2, &mut st.v)] {
            for (name, shape) in names {
                let key = format!("{prefix}{name}");
                let t = stored
                    .iter()
                    .find(|(n, _)| *n == key)
                    .map(|(_, t)| t)
                    .ok_or_else(|| Error::Integrity(format!("missing tensor {key}")))?;
                if t.shape() != shape.as_slice() {
                    return Err(Error::Integrity(format!("tensor {key} has shape {:?}, expected {shape:?}", t.shape())));
                }
                dst.push(t.data().to_vec());
            }
        }
        if stored.len() != 2 * names.len() {
            return Err(Error::Integrity("checkpoint has unexpected optimizer tensors".into()));
        }
        Ok(st)
    }

    pub fn into_student(self) -> Result<(FastSpeech, AdamState)> {
        self.expect_kind(ModelKind::Student)?;
        let mut model = FastSpeech::new(self.header.model_config.clone(), 0)?;
        let (weights, moments) = self.split();
        model.load_named(&weights)?;
        let state = self.adam_state(&FastSpeech::expected_shapes(model.config()), &moments)?;
        Ok((model, state))
    }

    pub fn into_teacher(self) -> Result<(TeacherLite, AdamState)> {
        self.expect_kind(ModelKind::Teacher)?;
        let mut model = TeacherLite::new(self.header.model_config.clone(), 0)?;
        let (weights, moments) = self.split();
        model.load_named(&weights)?;
        let state = self.adam_state(&TeacherLite::expected_shapes(model.config()), &moments)?;
        Ok((model, state))
    }

    pub fn encode(&self, dtype: DType) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)
            .map_err(|source| Error::Json { context: "checkpoint header".into(), source })?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len()).map_err(|_| Error::config(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            encode_tensor(t, dtype, &mut out)?;
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let take = |pos: &mut usize, n: usize, what: &str| -> Result<&[u8]> {
            if bytes.len() - *pos < n {
                return Err(Error::format(*pos, format!("truncated {what}")));
            }
            *pos += n;
            Ok(&bytes[*pos - n..*pos])
        };
        if take(&mut pos, 4, "magic")? != MAGIC {
            return Err(Error::format(0, "bad magic, expected \"FSCK\""));
        }
        let version = take(&mut pos, 1, "version")?[0];
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported checkpoint version {version}, expected {VERSION}")));
        }
        let header_len = u32::from_le_bytes(take(&mut pos, 4, "header length")?.try_into().expect("4 bytes")) as usize;
        let at = pos;
        let header: CheckpointHeader = serde_json::from_slice(take(&mut pos, header_len, "header")?)
            .map_err(|e| Error::format(at, format!("invalid checkpoint header: {e}")))?;
        let count = u32::from_le_bytes(take(&mut pos, 4, "tensor count")?.try_into().expect("4 bytes")) as usize;
        let mut tensors: Vec<(String, Tensor)> = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let at = pos;
            let len = u16::from_le_bytes(take(&mut pos, 2, "name length")?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(take(&mut pos, len, "tensor name")?)
                .map_err(|_| Error::format(at + 2, "tensor name is not UTF-8"))?
                .to_string();
            if tensors.iter().any(|(n, _)| *n == name) {
                return Err(Error::format(at, format!("duplicate tensor {name}")));
            }
            let (t, used) = decode_tensor(&bytes[pos..], pos)?;
            pos += used;
            tensors.push((name, t));
        }
        if pos != bytes.len() {
            return Err(Error::format(pos, format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(Checkpoint { header, tensors })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint, dtype: DType) -> Result<()> {
    write_atomic(path, &ckpt.encode(dtype)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::decode(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::length_regulator::SpeedFactor;
    use crate::model::PhonemeSequence;

    fn student() -> (FastSpeech, AdamState) {
        let m = FastSpeech::new(ModelConfig::tiny(), 11).unwrap();
        let mut st = AdamState::for_params(m.weights());
        st.step = 17;
        st.m[0][0] = 0.25;
        (m, st)
    }

    #[test]
    fn save_load_synthesize_is_bitwise_identical() {
        let (m, st) = student();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ckpt");
        save_checkpoint(&path, &Checkpoint::student(&m, &OptimizerConfig::for_model(8), &st, 5), DType::F64).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.header.step, 17);
        assert_eq!(loaded.header.seed, 5);
        let (m2, st2) = loaded.into_student().unwrap();
        assert_eq!(st2, st);
        let p = PhonemeSequence::new(vec![1, 2, 3, 4, 5]).unwrap();
        let a = m.synthesize_with_durations(&p, &[2, 1, 3, 2, 2].to_vec().into()).unwrap();
        let b = m2.synthesize_with_durations(&p, &[2, 1, 3, 2, 2].to_vec().into()).unwrap();
        assert!(a.frames().bitwise_eq(b.frames()));
        let a = m.synthesize(&p, SpeedFactor::NORMAL).unwrap();
        let b = m2.synthesize(&p, SpeedFactor::NORMAL).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn missing_tensor_is_named() {
        let (m, st) = student();
        let mut c = Checkpoint::student(&m, &OptimizerConfig::for_model(8), &st, 0);
        c.tensors.retain(|(n, _)| n != "decoder.0.conv1.weight");
        let bytes = c.encode(DType::F64).unwrap();
        let err = Checkpoint::decode(&bytes).unwrap().into_student().unwrap_err();
        assert!(matches!(err, Error::Integrity(_)));
        assert!(err.to_string().contains("decoder.0.conv1.weight"), "{err}");
    }

    #[test]
    fn misshapen_tensor_is_named() {
        let (m, st) = student();
        let mut c = Checkpoint::student(&m, &OptimizerConfig::for_model(8), &st, 0);
        c.header.model_config.conv_filter = 10;
        let err = c.into_student().unwrap_err();
        assert!(err.to_string().contains("encoder.0.conv1.weight"), "{err}");
    }

    #[test]
    fn teacher_roundtrip_and_kind_check() {
        let t = TeacherLite::new(ModelConfig::tiny(), 2).unwrap();
        let st = AdamState::for_params(t.weights());
        let c = Checkpoint::teacher(&t, &OptimizerConfig::for_model(8), &st, 0);
        let back = Checkpoint::decode(&c.encode(DType::F64).unwrap()).unwrap();
        assert_eq!(back, c);
        assert!(matches!(back.clone().into_student(), Err(Error::Integrity(_))));
        let (t2, _) = back.into_teacher().unwrap();
        assert_eq!(t2.weights(), t.weights());
    }

    #[test]
    fn weights_without_moments_load_with_fresh_optimizer() {
        let (m, st) = student();
        let mut c = Checkpoint::student(&m, &OptimizerConfig::for_model(8), &st, 0);
        c.tensors.retain(|(n, _)| !n.starts_with("optimizer."));
        let (_, st2) = c.into_student().unwrap();
        assert_eq!(st2.step, 17);
        assert!(st2.m.iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let (m, st) = student();
        let bytes = Checkpoint::student(&m, &OptimizerConfig::for_model(8), &st, 0).encode(DType::F64).unwrap();
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::Format { offset: 4, .. })));
        assert!(matches!(Checkpoint::decode(&bytes[..bytes.len() - 1]), Err(Error::Format { .. })));
        assert!(matches!(Checkpoint::decode(b"NOPE"), Err(Error::Format { offset: 0, .. })));
    }
}
