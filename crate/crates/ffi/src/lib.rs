//! C ABI over the `ddmc` library.
//!
//! Every fallible function returns a [`DdmcStatus`]; on failure the message
//! is available from [`ddmc_last_error`] on the same thread. Objects are
//! opaque handles created by `*_new`/`*_load`/`ddmc_train` and released
//! with the matching `*_free`. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use ddmc::datasets::{generate, load_dataset, save_dataset, GeneratorSpec, MultiClusteringDataset};
use ddmc::metrics::{nmi, rand_index, Partition};
use ddmc::trainer::{infer, train, Checkpoint, ClusterState, RunConfig};
use ddmc::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DdmcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Parse = 5,
    Integrity = 6,
    NonFinite = 7,
    Dimension = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DdmcDatasetKind {
    Stickfig = 0,
    ColoredShapes = 1,
}

/// Images plus ground-truth labelings.
pub struct DdmcDataset(MultiClusteringDataset);

/// A run configuration under construction.
pub struct DdmcConfig(RunConfig);

/// A trained model: parameters, augmentations and frozen centers.
pub struct DdmcModel(Checkpoint);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn status_of(e: &Error) -> DdmcStatus {
    match e {
        Error::Dimension { .. } => DdmcStatus::Dimension,
        Error::Domain { .. } | Error::Contract(_) => DdmcStatus::InvalidArgument,
        Error::Config(_) => DdmcStatus::Config,
        Error::Parse { .. } => DdmcStatus::Parse,
        Error::NonFinite { .. } => DdmcStatus::NonFinite,
        Error::Integrity(_) => DdmcStatus::Integrity,
        Error::Io { .. } => DdmcStatus::Io,
    }
}

enum Failure {
    Null(&'static str),
    Invalid(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

/// Runs `f`, recording any error or panic for [`ddmc_last_error`].
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DdmcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            DdmcStatus::Ok
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("{what} is null"));
            DdmcStatus::NullPointer
        }
        Ok(Err(Failure::Invalid(msg))) => {
            set_error(msg);
            DdmcStatus::InvalidArgument
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            DdmcStatus::Panic
        }
    }
}

unsafe fn borrow<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn c_str<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn out_slot<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(what))
}

unsafe fn labels_out<'a>(out: *mut usize, len: usize, need: usize) -> Result<&'a mut [usize], Failure> {
    if out.is_null() {
        return Err(Failure::Null("output buffer"));
    }
    if len < need {
        return Err(Failure::Invalid(format!(
            "output buffer holds {len} labels, need {need}"
        )));
    }
    Ok(std::slice::from_raw_parts_mut(out, need))
}

/// Message of the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next call into this library on the
/// same thread.
#[no_mangle]
pub extern "C" fn ddmc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ddmc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Generates a synthetic dataset with its default size and noise.
///
/// # Safety
/// `out` must be a valid pointer to write a handle into.
#[no_mangle]
pub unsafe extern "C" fn ddmc_dataset_generate(
    kind: DdmcDatasetKind,
    seed: u64,
    out: *mut *mut DdmcDataset,
) -> DdmcStatus {
    guard(|| {
        let slot = out_slot(out, "out")?;
        let spec = match kind {
            DdmcDatasetKind::Stickfig => GeneratorSpec::stickfig(seed),
            DdmcDatasetKind::ColoredShapes => GeneratorSpec::colored_shapes(2, 2, seed),
        };
        *slot = Box::into_raw(Box::new(DdmcDataset(generate(&spec)?)));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ddmc_dataset_load(path: *const c_char, out: *mut *mut DdmcDataset) -> DdmcStatus {
    guard(|| {
        let path = c_str(path, "path")?;
        let slot = out_slot(out, "out")?;
        *slot = Box::into_raw(Box::new(DdmcDataset(load_dataset(path)?)));
        Ok(())
    })
}

/// # Safety
/// `ds` must come from this library and `path` be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ddmc_dataset_save(ds: *const DdmcDataset, path: *const c_char) -> DdmcStatus {
    guard(|| {
        let ds = borrow(ds, "dataset")?;
        save_dataset(&ds.0, c_str(path, "path")?)?;
        Ok(())
    })
}

/// Sample count, flattened image size and number of labelings.
///
/// # Safety
/// `ds` must come from this library; outputs must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn ddmc_dataset_info(
    ds: *const DdmcDataset,
    num_samples: *mut usize,
    dim: *mut usize,
    num_clusterings: *mut usize,
) -> DdmcStatus {
    guard(|| {
        let ds = &borrow(ds, "dataset")?.0;
        *out_slot(num_samples, "num_samples")? = ds.num_samples();
        *out_slot(dim, "dim")? = ds.dim();
        *out_slot(num_clusterings, "num_clusterings")? = ds.num_clusterings();
        Ok(())
    })
}

/// Copies the ground-truth labels of clustering `m` into `out[0..N]`.
///
/// # Safety
/// `out` must point to at least `len` writable elements.
#[no_mangle]
pub unsafe extern "C" fn ddmc_dataset_labels(
    ds: *const DdmcDataset,
    m: usize,
    out: *mut usize,
    len: usize,
) -> DdmcStatus {
    guard(|| {
        let ds = &borrow(ds, "dataset")?.0;
        let l = ds
            .labelings()
            .get(m)
            .ok_or_else(|| Failure::Invalid(format!("clustering {m} out of range")))?;
        labels_out(out, len, l.labels.len())?.copy_from_slice(&l.labels);
        Ok(())
    })
}

/// # Safety
/// `ds` must come from this library and not be used afterwards; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn ddmc_dataset_free(ds: *mut DdmcDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// A configuration holding the library defaults.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ddmc_config_new(out: *mut *mut DdmcConfig) -> DdmcStatus {
    guard(|| {
        *out_slot(out, "out")? = Box::into_raw(Box::new(DdmcConfig(RunConfig::default())));
        Ok(())
    })
}

/// Sets one key as in the `key = value` config file format.
///
/// # Safety
/// `cfg` must come from this library; `key` and `value` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ddmc_config_set(cfg: *mut DdmcConfig, key: *const c_char, value: *const c_char) -> DdmcStatus {
    guard(|| {
        let cfg = out_slot(cfg, "config")?;
        cfg.0.set(c_str(key, "key")?, c_str(value, "value")?)?;
        Ok(())
    })
}

/// # Safety
/// `cfg` must come from this library and not be used afterwards; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn ddmc_config_free(cfg: *mut DdmcConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Trains on `ds`. Blocks until the stopping rule fires or epochs run out.
///
/// # Safety
/// Handles must come from this library; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ddmc_train(
    cfg: *const DdmcConfig,
    ds: *const DdmcDataset,
    out: *mut *mut DdmcModel,
) -> DdmcStatus {
    guard(|| {
        let cfg = &borrow(cfg, "config")?.0;
        let ds = &borrow(ds, "dataset")?.0;
        let slot = out_slot(out, "out")?;
        let trained = train(cfg, ds)?;
        *slot = Box::into_raw(Box::new(DdmcModel(trained.checkpoint(cfg, ds.dims()))));
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and `path` be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ddmc_model_save(model: *const DdmcModel, path: *const c_char) -> DdmcStatus {
    guard(|| {
        borrow(model, "model")?.0.save(c_str(path, "path")?)?;
        Ok(())
    })
}

/// Loads a checkpoint written by `ddmc_model_save` or `ddmc train`.
///
/// # Safety
/// `path` must be NUL-terminated and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ddmc_model_load(path: *const c_char, out: *mut *mut DdmcModel) -> DdmcStatus {
    guard(|| {
        let path = c_str(path, "path")?;
        let slot = out_slot(out, "out")?;
        *slot = Box::into_raw(Box::new(DdmcModel(Checkpoint::load(path)?)));
        Ok(())
    })
}

/// Number of representations `K` and clusters per representation `T`.
///
/// # Safety
/// `model` must come from this library; outputs must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn ddmc_model_shape(model: *const DdmcModel, k: *mut usize, t: *mut usize) -> DdmcStatus {
    guard(|| {
        let cfg = &borrow(model, "model")?.0.config;
        *out_slot(k, "k")? = cfg.k;
        *out_slot(t, "t")? = cfg.t;
        Ok(())
    })
}

/// Cluster labels of representation `k` for every sample of `ds`.
///
/// # Safety
/// Handles must come from this library; `out` must hold `len` elements.
#[no_mangle]
pub unsafe extern "C" fn ddmc_model_assign(
    model: *const DdmcModel,
    ds: *const DdmcDataset,
    k: usize,
    out: *mut usize,
    len: usize,
) -> DdmcStatus {
    guard(|| {
        let ck = &borrow(model, "model")?.0;
        let ds = &borrow(ds, "dataset")?.0;
        if ck.dims != ds.dims() {
            return Err(Error::Dimension {
                op: "ddmc_model_assign",
                lhs: vec![ck.dims.height, ck.dims.width, ck.dims.channels],
                rhs: vec![ds.dims().height, ds.dims().width, ds.dims().channels],
            }
            .into());
        }
        if k >= ck.config.k {
            return Err(Failure::Invalid(format!("representation {k} out of range")));
        }
        let frozen = ck.centers.clone().map(|centers| ClusterState {
            centers,
            assignments: Vec::new(),
            prev_assignments: None,
        });
        let (state, _) = infer(&ck.params, frozen.as_ref(), ds, &ck.pipelines, &ck.config)?;
        let labels = &state.assignments[k].labels;
        labels_out(out, len, labels.len())?.copy_from_slice(labels);
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and not be used afterwards; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn ddmc_model_free(model: *mut DdmcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

unsafe fn partitions(a: *const usize, b: *const usize, n: usize) -> Result<(Partition, Partition), Failure> {
    if a.is_null() || b.is_null() {
        return Err(Failure::Null("labels"));
    }
    let part = |p: *const usize| {
        let labels = std::slice::from_raw_parts(p, n).to_vec();
        let t = labels.iter().max().map_or(1, |m| m + 1);
        Partition::new(labels, t)
    };
    Ok((part(a)?, part(b)?))
}

/// Normalized mutual information between two labelings of `n` items.
///
/// # Safety
/// `a` and `b` must each point to `n` readable elements.
#[no_mangle]
pub unsafe extern "C" fn ddmc_nmi(a: *const usize, b: *const usize, n: usize, out: *mut f64) -> DdmcStatus {
    guard(|| {
        let (pa, pb) = partitions(a, b, n)?;
        *out_slot(out, "out")? = nmi(&pa, &pb)?;
        Ok(())
    })
}

/// Rand index between two labelings of `n` items.
///
/// # Safety
/// `a` and `b` must each point to `n` readable elements.
#[no_mangle]
pub unsafe extern "C" fn ddmc_rand_index(a: *const usize, b: *const usize, n: usize, out: *mut f64) -> DdmcStatus {
    guard(|| {
        let (pa, pb) = partitions(a, b, n)?;
        *out_slot(out, "out")? = rand_index(&pa, &pb)?;
        Ok(())
    })
}
