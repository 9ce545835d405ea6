//! C ABI over `casr`: load a checkpoint, decode offline, or stream frames.
//!
//! Every fallible function returns a `CasrStatus`. On failure the message is
//! kept per thread and read back with `casr_last_error`. Handles are opaque;
//! a stream borrows its model, so the model must outlive every stream opened
//! on it.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use casr::decoder::{decode_dual, SearchConfig, StreamingSession, DEFAULT_MAX_SYMBOLS};
use casr::encoders::Mode;
use casr::frontend::FeatureSequence;
use casr::model::CascadedModel;
use casr::tensor::Tensor;
use casr::trainer::load_checkpoint;
use casr::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CasrStatus {
    Ok = 0,
    NullPointer = 1,
    Io = 2,
    Format = 3,
    Mismatch = 4,
    InvalidInput = 5,
    InvalidState = 6,
    Config = 7,
    BufferTooSmall = 8,
    Internal = 9,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CasrMode {
    Causal = 0,
    Noncausal = 1,
}

/// A loaded model.
pub struct CasrModel {
    model: CascadedModel,
    max_symbols_per_frame: usize,
}

/// An open streaming session.
pub struct CasrStream {
    session: Option<StreamingSession<'static>>,
    finished: Option<Vec<usize>>,
    dim: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> CasrStatus {
    match e {
        Error::Io(_) => CasrStatus::Io,
        Error::Format { .. } | Error::Json(_) => CasrStatus::Format,
        Error::Mismatch(_) => CasrStatus::Mismatch,
        Error::Config(_) => CasrStatus::Config,
        Error::State(_) => CasrStatus::InvalidState,
        Error::Input(_) | Error::Dimension(_) | Error::Contract(_) => CasrStatus::InvalidInput,
        Error::Divergence(_) => CasrStatus::Internal,
    }
}

struct Failure(CasrStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

/// Runs `f`, recording any error or panic for `casr_last_error`.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CasrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            CasrStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            CasrStatus::Internal
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(CasrStatus::NullPointer, format!("{what} is null"))
}

/// Copies `tokens` into the caller's buffer; `len_out` always receives the
/// full length so callers can retry with a larger buffer.
unsafe fn write_tokens(
    tokens: &[usize],
    out: *mut usize,
    capacity: usize,
    len_out: *mut usize,
) -> Result<(), Failure> {
    if len_out.is_null() {
        return Err(null("len_out"));
    }
    *len_out = tokens.len();
    if tokens.len() > capacity {
        return Err(Failure(
            CasrStatus::BufferTooSmall,
            format!("{} tokens do not fit a buffer of {capacity}", tokens.len()),
        ));
    }
    if !tokens.is_empty() {
        if out.is_null() {
            return Err(null("tokens_out"));
        }
        ptr::copy_nonoverlapping(tokens.as_ptr(), out, tokens.len());
    }
    Ok(())
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn casr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint file into a new model handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn casr_model_load(path: *const c_char, out: *mut *mut CasrModel) -> CasrStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Failure(CasrStatus::InvalidInput, "path is not UTF-8".into()))?;
        let ckpt = load_checkpoint(Path::new(path))?;
        let model = ckpt.model()?;
        let handle = CasrModel {
            model,
            max_symbols_per_frame: ckpt.config.decode.max_symbols_per_frame,
        };
        *out = Box::into_raw(Box::new(handle));
        Ok(())
    })
}

/// Releases a model handle. Null is ignored.
///
/// # Safety
/// `model` must come from `casr_model_load` and have no open streams.
#[no_mangle]
pub unsafe extern "C" fn casr_model_free(model: *mut CasrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Feature width and vocabulary size (blank excluded) of a model.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn casr_model_dims(
    model: *const CasrModel,
    input_dim: *mut usize,
    vocab_size: *mut usize,
) -> CasrStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if input_dim.is_null() || vocab_size.is_null() {
            return Err(null("output pointer"));
        }
        *input_dim = m.model.config.input_dim;
        *vocab_size = m.model.config.vocab_size;
        Ok(())
    })
}

/// Decodes a whole utterance of `num_frames × dim` row-major features.
/// `mode` takes a `CasrMode` value; `beam` 0 selects greedy search.
///
/// # Safety
/// `frames` must hold `num_frames * dim` doubles and `tokens_out` room for
/// `capacity` values.
#[no_mangle]
pub unsafe extern "C" fn casr_decode(
    model: *const CasrModel,
    frames: *const f64,
    num_frames: usize,
    dim: usize,
    frame_period_ms: f64,
    mode: i32,
    beam: usize,
    tokens_out: *mut usize,
    capacity: usize,
    len_out: *mut usize,
) -> CasrStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if frames.is_null() {
            return Err(null("frames"));
        }
        let n = num_frames
            .checked_mul(dim)
            .ok_or_else(|| Failure(CasrStatus::InvalidInput, "frame buffer size overflows".into()))?;
        if dim != m.model.config.input_dim {
            return Err(Failure(
                CasrStatus::Mismatch,
                format!("features have dim {dim}, model expects {}", m.model.config.input_dim),
            ));
        }
        let mode = match mode {
            x if x == CasrMode::Causal as i32 => Mode::Causal,
            x if x == CasrMode::Noncausal as i32 => Mode::Noncausal,
            other => return Err(Failure(CasrStatus::InvalidInput, format!("unknown mode {other}"))),
        };
        let data = std::slice::from_raw_parts(frames, n).to_vec();
        let x = FeatureSequence::new(Tensor::from_vec(vec![num_frames, dim], data)?, frame_period_ms)?;
        let search = SearchConfig {
            beam,
            max_symbols_per_frame: m.max_symbols_per_frame,
        };
        let result = decode_dual(&x, &m.model, mode, search)?;
        write_tokens(result.tokens.ids(), tokens_out, capacity, len_out)
    })
}

/// Opens a causal streaming session on `model`.
///
/// # Safety
/// `model` must stay alive until the stream is freed; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn casr_stream_open(
    model: *const CasrModel,
    frame_period_ms: f64,
    out: *mut *mut CasrStream,
) -> CasrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let m: &'static CasrModel = model.as_ref().ok_or_else(|| null("model"))?;
        if frame_period_ms.is_nan() || frame_period_ms <= 0.0 {
            return Err(Failure(CasrStatus::InvalidInput, "frame period must be positive".into()));
        }
        let max = if m.max_symbols_per_frame == 0 {
            DEFAULT_MAX_SYMBOLS
        } else {
            m.max_symbols_per_frame
        };
        let session = StreamingSession::new(&m.model, frame_period_ms, max)?;
        *out = Box::into_raw(Box::new(CasrStream {
            session: Some(session),
            finished: None,
            dim: m.model.config.input_dim,
        }));
        Ok(())
    })
}

/// Appends one frame of `dim` values and returns the tokens it released.
///
/// # Safety
/// `frame` must hold `dim` doubles and `tokens_out` room for `capacity`.
#[no_mangle]
pub unsafe extern "C" fn casr_stream_push(
    stream: *mut CasrStream,
    frame: *const f64,
    dim: usize,
    tokens_out: *mut usize,
    capacity: usize,
    len_out: *mut usize,
) -> CasrStatus {
    guard(|| {
        let s = stream.as_mut().ok_or_else(|| null("stream"))?;
        if frame.is_null() {
            return Err(null("frame"));
        }
        if dim != s.dim {
            return Err(Failure(
                CasrStatus::Mismatch,
                format!("frame has dim {dim}, model expects {}", s.dim),
            ));
        }
        let session = s
            .session
            .as_mut()
            .ok_or_else(|| Failure(CasrStatus::InvalidState, "stream already finalized".into()))?;
        let released = session.push(std::slice::from_raw_parts(frame, dim))?;
        let tokens: Vec<usize> = released.into_iter().map(|(tok, _)| tok).collect();
        write_tokens(&tokens, tokens_out, capacity, len_out)
    })
}

/// Flushes the stream and returns the complete hypothesis. The stream
/// accepts no further frames; calling again returns the same hypothesis.
///
/// # Safety
/// `tokens_out` must have room for `capacity` values.
#[no_mangle]
pub unsafe extern "C" fn casr_stream_finalize(
    stream: *mut CasrStream,
    tokens_out: *mut usize,
    capacity: usize,
    len_out: *mut usize,
) -> CasrStatus {
    guard(|| {
        let s = stream.as_mut().ok_or_else(|| null("stream"))?;
        if let Some(session) = s.session.take() {
            s.finished = Some(session.finalize()?.result.tokens.ids().to_vec());
        }
        let tokens = s.finished.as_deref().unwrap_or_default();
        write_tokens(tokens, tokens_out, capacity, len_out)
    })
}

/// Releases a stream handle. Null is ignored.
///
/// # Safety
/// `stream` must come from `casr_stream_open`.
#[no_mangle]
pub unsafe extern "C" fn casr_stream_free(stream: *mut CasrStream) {
    if !stream.is_null() {
        drop(Box::from_raw(stream));
    }
}
