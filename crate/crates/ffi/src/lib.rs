//! C ABI over the few-shot operator learner.
//!
//! Handles are opaque and owned by the caller once returned; each has a
//! matching `_free`. Every call returns a [`MofsStatus`]; on failure the
//! message is kept per thread and read back with [`mofs_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use mofs::checkpoint::Checkpoint;
use mofs::data::{generate_darcy, load_dataset, Field, Normalizers, OperatorDataset, Sample};
use mofs::error::MofsError;
use mofs::fusion::VisionSource;
use mofs::model::MofsModel as Model;
use mofs::text::{sample_descriptions, HashEncoder, DEFAULT_MAX_TOKENS};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MofsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Numerical = 4,
    Shape = 5,
    Panic = 6,
}

/// A loaded or generated operator dataset.
pub struct MofsDataset {
    inner: OperatorDataset,
}

/// A trained few-shot model.
pub struct MofsModel {
    inner: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &MofsError) -> MofsStatus {
    match e {
        _ if e.is_numerical() => MofsStatus::Numerical,
        MofsError::Io(_) | MofsError::Load(_) | MofsError::Json(_) => MofsStatus::Io,
        MofsError::Shape(_) => MofsStatus::Shape,
        _ => MofsStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (MofsStatus, String)>) -> MofsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MofsStatus::Ok,
        Ok(Err((s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            MofsStatus::Panic
        }
    }
}

fn lift(e: MofsError) -> (MofsStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (MofsStatus, String) {
    (MofsStatus::NullPointer, format!("{what} is null"))
}

fn bad(msg: impl Into<String>) -> (MofsStatus, String) {
    (MofsStatus::InvalidArgument, msg.into())
}

/// # Safety
/// `p` must be null or a valid nul-terminated string.
unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, (MofsStatus, String)> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| bad("path is not UTF-8"))?;
    Ok(PathBuf::from(s))
}

/// Copies the last error of this thread into `buf`, truncated and nul-terminated.
/// Returns the full message length, or 0 when there is none.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn mofs_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| match &*e.borrow() {
        None => 0,
        Some(msg) => {
            let bytes = msg.as_bytes();
            if !buf.is_null() && len > 0 {
                let n = bytes.len().min(len - 1);
                ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
                *buf.add(n) = 0;
            }
            bytes.len()
        }
    })
}

/// Static version string.
#[no_mangle]
pub extern "C" fn mofs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `path` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mofs_dataset_load(path: *const c_char, out: *mut *mut MofsDataset) -> MofsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ds = load_dataset(path_arg(path)?).map_err(lift)?;
        *out = Box::into_raw(Box::new(MofsDataset { inner: ds }));
        Ok(())
    })
}

/// Darcy family with contrast `beta` on a `size × size` grid.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mofs_dataset_generate_darcy(
    beta: f64,
    n: usize,
    size: usize,
    seed: u64,
    out: *mut *mut MofsDataset,
) -> MofsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ds = generate_darcy(beta, n, size, size, seed).map_err(lift)?;
        *out = Box::into_raw(Box::new(MofsDataset { inner: ds }));
        Ok(())
    })
}

/// # Safety
/// `ds` must come from this library; the out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn mofs_dataset_shape(
    ds: *const MofsDataset,
    n_samples: *mut usize,
    height: *mut usize,
    width: *mut usize,
) -> MofsStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or_else(|| null("dataset"))?;
        if n_samples.is_null() || height.is_null() || width.is_null() {
            return Err(null("output"));
        }
        let (h, w) = ds.inner.dims();
        *n_samples = ds.inner.len();
        *height = h;
        *width = w;
        Ok(())
    })
}

/// Copies sample `index` into `a` and `u`, each `len = H·W` values, row-major.
///
/// # Safety
/// `a` and `u` must each point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn mofs_dataset_sample(
    ds: *const MofsDataset,
    index: usize,
    a: *mut f64,
    u: *mut f64,
    len: usize,
) -> MofsStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or_else(|| null("dataset"))?;
        if a.is_null() || u.is_null() {
            return Err(null("output"));
        }
        let s = ds.inner.samples.get(index).ok_or_else(|| bad(format!("sample {index} out of range")))?;
        if s.a.len() != len {
            return Err((MofsStatus::Shape, format!("buffer holds {len} values, field has {}", s.a.len())));
        }
        ptr::copy_nonoverlapping(s.a.values().as_ptr(), a, len);
        ptr::copy_nonoverlapping(s.u.values().as_ptr(), u, len);
        Ok(())
    })
}

/// # Safety
/// `ds` must be null or come from this library, and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mofs_dataset_free(ds: *mut MofsDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Loads a model checkpoint written by `mofs train`.
///
/// # Safety
/// `path` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mofs_model_load(path: *const c_char, out: *mut *mut MofsModel) -> MofsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ck = Checkpoint::load(path_arg(path)?).map_err(lift)?;
        let m = Model::from_checkpoint(&ck, &VisionSource::default()).map_err(lift)?;
        *out = Box::into_raw(Box::new(MofsModel { inner: m }));
        Ok(())
    })
}

/// Predicts `u` for the coefficient field `a_query` from the demonstrations
/// `demo_indices` of `ds`. Normalisation is fitted on the demonstrations; an
/// operator the model has not seen gets a context built from them.
///
/// # Safety
/// `demo_indices` must hold `n_demos` entries; `a_query` and `u_out` `len` doubles each.
#[no_mangle]
pub unsafe extern "C" fn mofs_model_predict(
    model: *mut MofsModel,
    ds: *const MofsDataset,
    demo_indices: *const usize,
    n_demos: usize,
    a_query: *const f64,
    u_out: *mut f64,
    len: usize,
) -> MofsStatus {
    guard(|| {
        let model = &mut model.as_mut().ok_or_else(|| null("model"))?.inner;
        let ds = &ds.as_ref().ok_or_else(|| null("dataset"))?.inner;
        if demo_indices.is_null() || a_query.is_null() || u_out.is_null() {
            return Err(null("buffer"));
        }
        if n_demos == 0 {
            return Err(lift(MofsError::NoDemonstrations));
        }
        let (h, w) = ds.dims();
        if len != h * w {
            return Err((MofsStatus::Shape, format!("buffer holds {len} values, grid is {h}x{w}")));
        }
        let demos: Vec<Sample> = std::slice::from_raw_parts(demo_indices, n_demos)
            .iter()
            .map(|&i| ds.samples.get(i).cloned().ok_or_else(|| bad(format!("demonstration {i} out of range"))))
            .collect::<Result<_, _>>()?;
        let a = Field::new(h, w, std::slice::from_raw_parts(a_query, len).to_vec()).map_err(lift)?;
        let norm = Normalizers::fit(&demos).map_err(lift)?;
        if !model.contexts.contains_key(&ds.operator_id) {
            let text = HashEncoder { d_bert: model.cfg.d_bert, max_tokens: DEFAULT_MAX_TOKENS };
            let texts = sample_descriptions(&ds.name, &demos);
            model.add_unseen_context(ds.operator_id, &ds.name, &texts, &text).map_err(lift)?;
        }
        let prompts: Vec<Sample> = demos.iter().map(|s| norm.encode(s)).collect();
        let pred = model.predict_field(&prompts, &norm.a.encode(&a), ds.operator_id, &norm.u).map_err(lift)?;
        ptr::copy_nonoverlapping(pred.values().as_ptr(), u_out, len);
        Ok(())
    })
}

/// # Safety
/// `model` must be null or come from this library, and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mofs_model_free(model: *mut MofsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
