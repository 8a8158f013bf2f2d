//! C ABI for loading relnn models and scoring (query, title) pairs.
//!
//! Every function returns a [`RelnnStatus`]. On failure a description is
//! available from [`relnn_last_error_message`] on the same thread. Models are
//! opaque handles created by `relnn_model_load*` and released with
//! [`relnn_model_free`]; a handle may be shared across threads for scoring.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use relnn::{metrics, model_io, Error, ModelBundle, ScoringMode};

/// Result codes shared by every entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelnnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Corrupt = 4,
    InvalidInput = 5,
    NonFinite = 6,
    Shape = 7,
    /// The requested value is undefined for this input, e.g. AUC of one class.
    Undefined = 8,
    Panic = 9,
}

/// Scoring mode of a loaded model.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelnnMode {
    ClickOnly = 0,
    PointwiseSimple = 1,
    PointwiseEnsemble = 2,
    PairwiseEnsemble = 3,
}

impl From<ScoringMode> for RelnnMode {
    fn from(mode: ScoringMode) -> Self {
        match mode {
            ScoringMode::ClickOnly => RelnnMode::ClickOnly,
            ScoringMode::PointwiseSimple => RelnnMode::PointwiseSimple,
            ScoringMode::PointwiseEnsemble => RelnnMode::PointwiseEnsemble,
            ScoringMode::PairwiseEnsemble => RelnnMode::PairwiseEnsemble,
        }
    }
}

/// Opaque model handle.
pub struct RelnnModel {
    bundle: ModelBundle,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

struct Failure(RelnnStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::File { .. } | Error::Io(_) => RelnnStatus::Io,
            Error::Corrupt { .. } | Error::Json { .. } => RelnnStatus::Corrupt,
            Error::NonFinite(_) => RelnnStatus::NonFinite,
            Error::Shape { .. } => RelnnStatus::Shape,
            _ => RelnnStatus::InvalidInput,
        };
        Failure(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> RelnnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            RelnnStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            RelnnStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(RelnnStatus::NullPointer, format!("{name} is null")))
    } else {
        Ok(())
    }
}

/// # Safety
/// `p` must be null or point to a NUL-terminated string.
unsafe fn c_str<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    non_null(p, name)?;
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(RelnnStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

/// # Safety
/// `model` must be null or a live handle from this library.
unsafe fn model_ref<'a>(model: *const RelnnModel) -> Result<&'a ModelBundle, Failure> {
    non_null(model, "model")?;
    Ok(&(*model).bundle)
}

fn into_handle(bundle: ModelBundle, out: *mut *mut RelnnModel) {
    // SAFETY: callers check `out` for null first.
    unsafe { *out = Box::into_raw(Box::new(RelnnModel { bundle })) };
}

/// Loads a model file. On success `*out` receives a handle to free with
/// [`relnn_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn relnn_model_load(path: *const c_char, out: *mut *mut RelnnModel) -> RelnnStatus {
    guard(|| {
        non_null(out, "out")?;
        let path = PathBuf::from(c_str(path, "path")?);
        into_handle(model_io::load_model(path)?, out);
        Ok(())
    })
}

/// Loads a model from an in-memory copy of a model file.
///
/// # Safety
/// `data` must point to `len` readable bytes and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn relnn_model_load_bytes(data: *const u8, len: usize, out: *mut *mut RelnnModel) -> RelnnStatus {
    guard(|| {
        non_null(out, "out")?;
        non_null(data, "data")?;
        let bytes = std::slice::from_raw_parts(data, len);
        into_handle(model_io::from_bytes(bytes)?, out);
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn relnn_model_free(model: *mut RelnnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes the model to `path` in the model file format.
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn relnn_model_save(model: *const RelnnModel, path: *const c_char) -> RelnnStatus {
    guard(|| {
        let bundle = model_ref(model)?;
        model_io::save_model(bundle, c_str(path, "path")?)?;
        Ok(())
    })
}

/// Scores one pair under the model's mode.
///
/// # Safety
/// `model` must be a live handle, `query` and `title` NUL-terminated
/// strings, and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn relnn_model_score(
    model: *const RelnnModel,
    query: *const c_char,
    title: *const c_char,
    out: *mut f32,
) -> RelnnStatus {
    guard(|| {
        let bundle = model_ref(model)?;
        non_null(out, "out")?;
        *out = bundle.score(c_str(query, "query")?, c_str(title, "title")?)?;
        Ok(())
    })
}

/// Scores `n` pairs; `out` receives `n` scores.
///
/// # Safety
/// `queries` and `titles` must each point to `n` NUL-terminated strings and
/// `out` to `n` writable floats.
#[no_mangle]
pub unsafe extern "C" fn relnn_model_score_batch(
    model: *const RelnnModel,
    queries: *const *const c_char,
    titles: *const *const c_char,
    n: usize,
    out: *mut f32,
) -> RelnnStatus {
    guard(|| {
        let bundle = model_ref(model)?;
        if n == 0 {
            return Ok(());
        }
        non_null(queries, "queries")?;
        non_null(titles, "titles")?;
        non_null(out, "out")?;
        let qs = std::slice::from_raw_parts(queries, n);
        let ts = std::slice::from_raw_parts(titles, n);
        let mut pairs = Vec::with_capacity(n);
        for (&q, &t) in qs.iter().zip(ts) {
            pairs.push((c_str(q, "query")?, c_str(t, "title")?));
        }
        let scores = bundle.score_batch(&pairs)?;
        std::slice::from_raw_parts_mut(out, n).copy_from_slice(&scores);
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn relnn_model_mode(model: *const RelnnModel, out: *mut RelnnMode) -> RelnnStatus {
    guard(|| {
        let bundle = model_ref(model)?;
        non_null(out, "out")?;
        *out = bundle.mode().into();
        Ok(())
    })
}

/// Number of vocabulary terms, `<OOV>` included.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn relnn_model_vocab_size(model: *const RelnnModel, out: *mut usize) -> RelnnStatus {
    guard(|| {
        let bundle = model_ref(model)?;
        non_null(out, "out")?;
        *out = bundle.vocab().len();
        Ok(())
    })
}

/// ROC-AUC of `n` scores against 0/1 labels (any non-zero byte is 1).
/// Returns `Undefined` when only one class is present.
///
/// # Safety
/// `scores` and `labels` must point to `n` readable values, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn relnn_roc_auc(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> RelnnStatus {
    guard(|| {
        non_null(out, "out")?;
        let (scores, labels): (&[f64], Vec<bool>) = if n == 0 {
            (&[], Vec::new())
        } else {
            non_null(scores, "scores")?;
            non_null(labels, "labels")?;
            (
                std::slice::from_raw_parts(scores, n),
                std::slice::from_raw_parts(labels, n).iter().map(|&l| l != 0).collect(),
            )
        };
        match metrics::roc_auc(scores, &labels) {
            Some(v) => {
                *out = v;
                Ok(())
            }
            None => Err(Failure(RelnnStatus::Undefined, "AUC needs both classes".into())),
        }
    })
}

/// Message of the last failed call on this thread, or an empty string. The
/// pointer stays valid until the next call into this library on the thread.
#[no_mangle]
pub extern "C" fn relnn_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn relnn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
