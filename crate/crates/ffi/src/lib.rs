//! C interface to `fastmel`.
//!
//! Models and synthesized spectrograms are opaque handles owned by the caller
//! and released with the matching `*_free` function. Every fallible call
//! returns a [`FastmelStatus`]; on failure the message is available from
//! [`fastmel_last_error`] on the same thread until the next failing call.
//! Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use fastmel::duration::{extract_durations, focus_rate, AttentionMatrix};
use fastmel::io::load_checkpoint;
use fastmel::length_regulator::SpeedFactor;
use fastmel::model::{FastSpeech, PhonemeSequence, Synthesis};
use fastmel::{Error, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FastmelStatus {
    Ok = 0,
    NullPointer = 1,
    Config = 2,
    Input = 3,
    Dimension = 4,
    Integrity = 5,
    Format = 6,
    Io = 7,
    Numeric = 8,
    EmptyOutput = 9,
    Panic = 10,
}

impl From<&Error> for FastmelStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Config(_) | Error::Usage(_) => FastmelStatus::Config,
            Error::Input(_) | Error::Bounds { .. } => FastmelStatus::Input,
            Error::Dimension(_) => FastmelStatus::Dimension,
            Error::Integrity(_) => FastmelStatus::Integrity,
            Error::Format { .. } | Error::Json { .. } => FastmelStatus::Format,
            Error::Io { .. } => FastmelStatus::Io,
            Error::Numeric(_) => FastmelStatus::Numeric,
            Error::EmptyOutput(_) => FastmelStatus::EmptyOutput,
        }
    }
}

/// A loaded parallel model.
pub struct FastmelModel {
    inner: FastSpeech,
}

/// A synthesized spectrogram and the durations that produced it.
pub struct FastmelMel {
    inner: Synthesis,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: FastmelStatus, msg: impl Into<String>) -> FastmelStatus {
    set_error(msg.into());
    status
}

fn guard(f: impl FnOnce() -> Result<(), FastmelStatus>) -> FastmelStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FastmelStatus::Ok,
        Ok(Err(status)) => status,
        Err(_) => fail(FastmelStatus::Panic, "internal panic"),
    }
}

fn lift<T>(r: fastmel::Result<T>) -> Result<T, FastmelStatus> {
    r.map_err(|e| fail(FastmelStatus::from(&e), e.to_string()))
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), FastmelStatus> {
    if p.is_null() {
        Err(fail(FastmelStatus::NullPointer, format!("{what} is NULL")))
    } else {
        Ok(())
    }
}

/// Message of the last failed call on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fastmel_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a student checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer to write to.
#[no_mangle]
pub unsafe extern "C" fn fastmel_model_load(path: *const c_char, out: *mut *mut FastmelModel) -> FastmelStatus {
    guard(|| {
        non_null(path, "path")?;
        non_null(out, "out")?;
        // SAFETY: checked non-null; caller guarantees NUL termination.
        let path = unsafe { CStr::from_ptr(path) }
            .to_str()
            .map_err(|_| fail(FastmelStatus::Input, "path is not UTF-8"))?;
        let ckpt = lift(load_checkpoint(Path::new(path)))?;
        let (inner, _) = lift(ckpt.into_student())?;
        // SAFETY: checked non-null above.
        unsafe { *out = Box::into_raw(Box::new(FastmelModel { inner })) };
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle from [`fastmel_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fastmel_model_free(model: *mut FastmelModel) {
    if !model.is_null() {
        // SAFETY: caller passes a handle created by Box::into_raw.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Mel channels per frame, or 0 for a NULL handle.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fastmel_model_mel_dim(model: *const FastmelModel) -> usize {
    // SAFETY: caller guarantees a live handle or NULL.
    unsafe { model.as_ref() }.map_or(0, |m| m.inner.config().mel_dim)
}

/// Synthesizes `n` phonemes at speed factor `alpha`, lengthening phoneme
/// `break_positions[i]` by `break_frames[i]` frames for each of the
/// `n_breaks` breaks (both arrays may be NULL when `n_breaks` is 0).
///
/// # Safety
/// `phonemes` must point to `n` readable values, the break arrays to
/// `n_breaks` values each, `model` must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fastmel_synthesize(
    model: *const FastmelModel,
    phonemes: *const u32,
    n: usize,
    alpha: f64,
    break_positions: *const usize,
    break_frames: *const usize,
    n_breaks: usize,
    out: *mut *mut FastmelMel,
) -> FastmelStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(phonemes, "phonemes")?;
        non_null(out, "out")?;
        if n_breaks > 0 {
            non_null(break_positions, "break_positions")?;
            non_null(break_frames, "break_frames")?;
        }
        // SAFETY: pointers checked non-null; lengths are the caller's contract.
        let (model, ids, pos, frames) = unsafe {
            (
                &*model,
                std::slice::from_raw_parts(phonemes, n),
                if n_breaks > 0 { std::slice::from_raw_parts(break_positions, n_breaks) } else { &[] },
                if n_breaks > 0 { std::slice::from_raw_parts(break_frames, n_breaks) } else { &[] },
            )
        };
        let p = lift(PhonemeSequence::new(ids.iter().map(|&t| t as usize).collect()))?;
        let alpha = lift(SpeedFactor::new(alpha))?;
        let breaks: Vec<(usize, usize)> = pos.iter().copied().zip(frames.iter().copied()).collect();
        let inner = lift(model.inner.synthesize_with_breaks(&p, alpha, &breaks))?;
        // SAFETY: checked non-null above.
        unsafe { *out = Box::into_raw(Box::new(FastmelMel { inner })) };
        Ok(())
    })
}

/// # Safety
/// `mel` must be NULL or a handle from [`fastmel_synthesize`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fastmel_mel_free(mel: *mut FastmelMel) {
    if !mel.is_null() {
        // SAFETY: caller passes a handle created by Box::into_raw.
        drop(unsafe { Box::from_raw(mel) });
    }
}

/// # Safety
/// `mel` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fastmel_mel_frames(mel: *const FastmelMel) -> usize {
    // SAFETY: caller guarantees a live handle or NULL.
    unsafe { mel.as_ref() }.map_or(0, |m| m.inner.mel.len())
}

/// # Safety
/// `mel` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fastmel_mel_dim(mel: *const FastmelMel) -> usize {
    // SAFETY: caller guarantees a live handle or NULL.
    unsafe { mel.as_ref() }.map_or(0, |m| m.inner.mel.dim())
}

/// Row-major `frames × dim` values, owned by the handle.
///
/// # Safety
/// `mel` must be NULL or a live handle; the data lives as long as the handle.
#[no_mangle]
pub unsafe extern "C" fn fastmel_mel_data(mel: *const FastmelMel) -> *const f64 {
    // SAFETY: caller guarantees a live handle or NULL.
    unsafe { mel.as_ref() }.map_or(ptr::null(), |m| m.inner.mel.frames().data().as_ptr())
}

/// Per-phoneme frame counts used for the spectrogram; their sum is the frame count.
///
/// # Safety
/// `mel` must be NULL or a live handle and `len` NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn fastmel_mel_durations(mel: *const FastmelMel, len: *mut usize) -> *const usize {
    // SAFETY: caller guarantees a live handle or NULL, and a writable `len` or NULL.
    unsafe {
        let d = mel.as_ref().map(|m| m.inner.durations.values());
        if let Some(len) = len.as_mut() {
            *len = d.map_or(0, <[usize]>::len);
        }
        d.map_or(ptr::null(), <[usize]>::as_ptr)
    }
}

unsafe fn attention(weights: *const f64, frames: usize, phonemes: usize) -> Result<AttentionMatrix, FastmelStatus> {
    non_null(weights, "weights")?;
    let len = frames
        .checked_mul(phonemes)
        .ok_or_else(|| fail(FastmelStatus::Dimension, "frames × phonemes overflows"))?;
    // SAFETY: checked non-null; the caller guarantees `frames × phonemes` values.
    let data = unsafe { std::slice::from_raw_parts(weights, len) }.to_vec();
    lift(Tensor::new(vec![frames, phonemes], data).and_then(AttentionMatrix::new))
}

/// Focus rate of a row-major `frames × phonemes` attention matrix.
///
/// # Safety
/// `weights` must point to `frames × phonemes` values and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn fastmel_focus_rate(
    weights: *const f64,
    frames: usize,
    phonemes: usize,
    out: *mut f64,
) -> FastmelStatus {
    guard(|| {
        non_null(out, "out")?;
        // SAFETY: forwarded caller contract.
        let a = unsafe { attention(weights, frames, phonemes) }?;
        let f = lift(focus_rate(&a))?;
        // SAFETY: checked non-null above.
        unsafe { *out = f };
        Ok(())
    })
}

/// Writes `phonemes` durations (frames whose attention peaks on each phoneme).
///
/// # Safety
/// `weights` must point to `frames × phonemes` values and `out` to `phonemes` writable slots.
#[no_mangle]
pub unsafe extern "C" fn fastmel_extract_durations(
    weights: *const f64,
    frames: usize,
    phonemes: usize,
    out: *mut usize,
) -> FastmelStatus {
    guard(|| {
        non_null(out, "out")?;
        // SAFETY: forwarded caller contract.
        let a = unsafe { attention(weights, frames, phonemes) }?;
        let d = extract_durations(&a);
        // SAFETY: checked non-null; the caller provides `phonemes` slots.
        unsafe { std::slice::from_raw_parts_mut(out, phonemes) }.copy_from_slice(d.values());
        Ok(())
    })
}
