//! C ABI over `digan-core`: load a trained classifier and score subjects.
//!
//! Every function returns a [`DiganStatus`]. On failure the message is kept
//! per thread and can be read with [`digan_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use digan_core::checkpoint::read_json;
use digan_core::metrics::roc_auc;
use digan_core::sacnet::{classify_subject, load_sacnet, subject_probability, SacNetwork};
use digan_core::sequence::{Normalizer, Window};
use digan_core::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiganStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Integrity = 4,
    Dimension = 5,
    Numeric = 6,
    Contract = 7,
    Panic = 8,
}

/// Trained classifier plus its window normalizer.
pub struct DiganModel {
    net: SacNetwork,
    normalizer: Normalizer,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> DiganStatus {
    match e {
        e if e.is_integrity() => DiganStatus::Integrity,
        Error::Io { .. } | Error::Json(_) | Error::Csv(_) => DiganStatus::Io,
        Error::Dimension(_) => DiganStatus::Dimension,
        Error::Numeric(_) => DiganStatus::Numeric,
        _ => DiganStatus::Contract,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (DiganStatus, String)>) -> DiganStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DiganStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            DiganStatus::Panic
        }
    }
}

fn lib(e: Error) -> (DiganStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(name: &str) -> (DiganStatus, String) {
    (DiganStatus::NullPointer, format!("{name} is null"))
}

/// # Safety
/// `ptr` must be null or point to `len` readable values.
unsafe fn slice<'a, T>(ptr: *const T, len: usize, name: &str) -> Result<&'a [T], (DiganStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

fn rows(flat: &[f64], n_rows: usize, n_cols: usize) -> Vec<Vec<f64>> {
    (0..n_rows)
        .map(|r| flat[r * n_cols..(r + 1) * n_cols].to_vec())
        .collect()
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn digan_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static, nul-terminated library version.
#[no_mangle]
pub extern "C" fn digan_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads `sacnet.json`/`sacnet.bin` and `window_normalizer.json` from a
/// checkpoint directory. On success `*out` owns a model to be released with
/// [`digan_model_free`].
///
/// # Safety
/// `checkpoint_dir` must be a nul-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn digan_model_load(checkpoint_dir: *const c_char, out: *mut *mut DiganModel) -> DiganStatus {
    guard(|| {
        if checkpoint_dir.is_null() {
            return Err(null("checkpoint_dir"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let dir = CStr::from_ptr(checkpoint_dir)
            .to_str()
            .map_err(|_| (DiganStatus::InvalidArgument, "checkpoint_dir is not UTF-8".to_string()))?;
        let dir = PathBuf::from(dir);
        let net = load_sacnet(&dir).map_err(lib)?;
        let normalizer: Normalizer = read_json(&dir.join("window_normalizer.json")).map_err(lib)?;
        if normalizer.n_features() != net.config.n_features {
            return Err(lib(Error::Compatibility(
                "normalizer width differs from the classifier".into(),
            )));
        }
        *out = Box::into_raw(Box::new(DiganModel { net, normalizer }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`digan_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn digan_model_free(model: *mut DiganModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Window length L and feature count p the model expects.
///
/// # Safety
/// `model` must be a live model; `window` and `n_features` writable.
#[no_mangle]
pub unsafe extern "C" fn digan_model_shape(
    model: *const DiganModel,
    window: *mut usize,
    n_features: *mut usize,
) -> DiganStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if window.is_null() || n_features.is_null() {
            return Err(null("output"));
        }
        *window = m.net.config.n_time;
        *n_features = m.net.config.n_features;
        Ok(())
    })
}

/// Probability that one window of raw (unnormalized) visits is impaired.
/// `features` is row-major `[n_time × n_features]`.
///
/// # Safety
/// `features` must hold `n_time * n_features` values; `out_prob` writable.
#[no_mangle]
pub unsafe extern "C" fn digan_model_predict_window(
    model: *const DiganModel,
    features: *const f64,
    n_time: usize,
    n_features: usize,
    out_prob: *mut f64,
) -> DiganStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out_prob.is_null() {
            return Err(null("out_prob"));
        }
        let c = &m.net.config;
        if n_time != c.n_time || n_features != c.n_features {
            return Err(lib(Error::Dimension(format!(
                "window is {n_time}×{n_features}, model expects {}×{}",
                c.n_time, c.n_features
            ))));
        }
        let flat = slice(features, n_time * n_features, "features")?;
        let window: Vec<Vec<f64>> = rows(flat, n_time, n_features)
            .iter()
            .map(|r| m.normalizer.apply_row(r))
            .collect();
        *out_prob = m.net.window_probability(&window).map_err(lib)?;
        Ok(())
    })
}

/// Scores one subject from its raw visit sequence (row-major
/// `[n_visits × n_features]`): every window of length L is scored, the
/// subject probability is their maximum, and the label is 1 iff it reaches
/// `threshold`.
///
/// # Safety
/// `visits` must hold `n_visits * n_features` values; outputs writable.
#[no_mangle]
pub unsafe extern "C" fn digan_model_classify_subject(
    model: *const DiganModel,
    visits: *const f64,
    n_visits: usize,
    n_features: usize,
    threshold: f64,
    out_prob: *mut f64,
    out_label: *mut u8,
) -> DiganStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out_prob.is_null() || out_label.is_null() {
            return Err(null("output"));
        }
        if !(0.0..=1.0).contains(&threshold) {
            return Err((
                DiganStatus::InvalidArgument,
                format!("threshold {threshold} outside [0, 1]"),
            ));
        }
        let c = &m.net.config;
        if n_features != c.n_features {
            return Err(lib(Error::Dimension(format!(
                "{n_features} features, model expects {}",
                c.n_features
            ))));
        }
        if n_visits < c.n_time {
            return Err(lib(Error::InsufficientVisits {
                subject_id: "subject".into(),
                visits: n_visits,
                window: c.n_time,
            }));
        }
        let flat = slice(visits, n_visits * n_features, "visits")?;
        let all = rows(flat, n_visits, n_features);
        let windows: Vec<Window> = (0..=n_visits - c.n_time)
            .map(|s| Window {
                subject_id: "subject".into(),
                label: digan_core::cohort::Label::NO,
                features: all[s..s + c.n_time].iter().map(|r| m.normalizer.apply_row(r)).collect(),
                window_start: s + 1,
            })
            .collect();
        let probs = m.net.predict_windows(&windows).map_err(lib)?;
        let p = subject_probability(&probs).map_err(lib)?;
        *out_prob = p;
        *out_label = classify_subject(p, threshold);
        Ok(())
    })
}

/// Max-pool of window probabilities.
///
/// # Safety
/// `probs` must hold `n` values; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn digan_subject_probability(probs: *const f64, n: usize, out: *mut f64) -> DiganStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = subject_probability(slice(probs, n, "probs")?).map_err(lib)?;
        Ok(())
    })
}

/// Trapezoid ROC AUC of `scores` against 0/1 `labels`.
///
/// # Safety
/// `scores` and `labels` must hold `n` values; `out_auc` writable.
#[no_mangle]
pub unsafe extern "C" fn digan_roc_auc(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    out_auc: *mut f64,
) -> DiganStatus {
    guard(|| {
        if out_auc.is_null() {
            return Err(null("out_auc"));
        }
        let (s, l) = (slice(scores, n, "scores")?, slice(labels, n, "labels")?);
        *out_auc = roc_auc(s, l).map_err(lib)?.0;
        Ok(())
    })
}
