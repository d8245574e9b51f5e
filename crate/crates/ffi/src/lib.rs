//! C ABI over the brokenstick library.
//!
//! Objects cross the boundary as opaque handles created by `bs_*` constructors
//! and released by the matching `bs_*_free`. Every fallible call returns a
//! [`BsStatus`]; on failure [`bs_last_error_message`] describes the error.
//! Panics are caught at the boundary and reported as `BS_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use brokenstick::io::{classify_draws, read_cohort_csv};
use brokenstick::{generate_paired_cohorts, run_chain, ChainConfig, ChainOutput, Cohort, Error, KnotMode, SimSpec};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BsStatus {
    Ok = 0,
    /// A required pointer argument was null or a buffer was too short.
    InvalidArgument = 1,
    /// Input data or configuration was rejected.
    Validation = 2,
    Io = 3,
    /// The sampler or a linear-algebra routine failed.
    Numerical = 4,
    Panic = 5,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BsKnotMode {
    Fixed = 0,
    Random = 1,
}

/// Chain schedule for [`bs_fit`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct BsFitOptions {
    pub iterations: u64,
    pub burnin: u64,
    pub thin: u64,
    pub seed: u64,
    pub knot_mode: BsKnotMode,
}

/// Opaque cohort of children.
pub struct BsCohort(Cohort);

/// Opaque result of an MCMC run.
pub struct BsChain(ChainOutput);

/// Opaque consensus clustering.
pub struct BsClustering {
    labels: Vec<usize>,
    pear: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(message: &str) {
    let text = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = text);
}

fn status_of(err: &Error) -> BsStatus {
    match err {
        Error::Io { .. } => BsStatus::Io,
        e if e.is_validation() => BsStatus::Validation,
        _ => BsStatus::Numerical,
    }
}

/// Runs `body`, translating errors and panics into a status code.
fn guard(body: impl FnOnce() -> Result<(), (BsStatus, String)>) -> BsStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            set_last_error("");
            BsStatus::Ok
        }
        Ok(Err((status, message))) => {
            set_last_error(&message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("panic: {message}"));
            BsStatus::Panic
        }
    }
}

fn lib_err(err: Error) -> (BsStatus, String) {
    (status_of(&err), err.to_string())
}

fn invalid(message: &str) -> (BsStatus, String) {
    (BsStatus::InvalidArgument, message.to_string())
}

unsafe fn deref<'a, T>(p: *const T, name: &str) -> Result<&'a T, (BsStatus, String)> {
    p.as_ref().ok_or_else(|| invalid(&format!("{name} is null")))
}

unsafe fn out_slice<'a, T>(p: *mut T, len: usize, needed: usize, name: &str) -> Result<&'a mut [T], (BsStatus, String)> {
    if p.is_null() {
        return Err(invalid(&format!("{name} is null")));
    }
    if len < needed {
        return Err(invalid(&format!("{name} holds {len} elements but {needed} are required")));
    }
    Ok(std::slice::from_raw_parts_mut(p, needed))
}

/// Message of the most recent failure on the calling thread, or an empty
/// string. The pointer stays valid until the next `bs_*` call on that thread.
#[no_mangle]
pub extern "C" fn bs_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Reads a `child_id,age_years,haz` CSV file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bs_cohort_read_csv(
    path: *const c_char,
    horizon: f64,
    n_knots: usize,
    allow_outliers: bool,
    out: *mut *mut BsCohort,
) -> BsStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return Err(invalid("path and out must not be null"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (BsStatus::Validation, "path is not valid UTF-8".to_string()))?;
        let cohort = read_cohort_csv(Path::new(path), horizon, n_knots, allow_outliers).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(BsCohort(cohort)));
        Ok(())
    })
}

/// Generates the paired simulation cohorts (two interior knots, unit horizon).
/// `true_labels` receives the 0-based group of each child and must hold at
/// least `n_children` elements.
///
/// # Safety
/// All pointers must be valid; `true_labels` must point to `labels_len` writable elements.
#[no_mangle]
pub unsafe extern "C" fn bs_simulate(
    seed: u64,
    n_children: usize,
    fixed_out: *mut *mut BsCohort,
    random_out: *mut *mut BsCohort,
    true_labels: *mut usize,
    labels_len: usize,
) -> BsStatus {
    guard(|| {
        if fixed_out.is_null() || random_out.is_null() {
            return Err(invalid("output handles must not be null"));
        }
        let labels = out_slice(true_labels, labels_len, n_children, "true_labels")?;
        let spec = SimSpec {
            n_children,
            ..SimSpec::default()
        };
        let pair = generate_paired_cohorts(&spec, seed).map_err(lib_err)?;
        labels.copy_from_slice(&pair.true_labels());
        *fixed_out = Box::into_raw(Box::new(BsCohort(pair.fixed)));
        *random_out = Box::into_raw(Box::new(BsCohort(pair.random)));
        Ok(())
    })
}

/// Number of children, or 0 for a null handle.
///
/// # Safety
/// `cohort` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bs_cohort_len(cohort: *const BsCohort) -> usize {
    cohort.as_ref().map_or(0, |c| c.0.len())
}

/// # Safety
/// `cohort` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bs_cohort_free(cohort: *mut BsCohort) {
    if !cohort.is_null() {
        drop(Box::from_raw(cohort));
    }
}

/// Options of the shorter desk schedule (20 000 sweeps, 10 000 burn-in, thin 10).
#[no_mangle]
pub extern "C" fn bs_fit_options_default(seed: u64, knot_mode: BsKnotMode) -> BsFitOptions {
    let c = ChainConfig::desk_schedule(seed, KnotMode::Random);
    BsFitOptions {
        iterations: c.iterations,
        burnin: c.burnin,
        thin: c.thin,
        seed,
        knot_mode,
    }
}

/// Runs the sampler on `cohort`.
///
/// # Safety
/// `cohort` and `options` must be live, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bs_fit(cohort: *const BsCohort, options: *const BsFitOptions, out: *mut *mut BsChain) -> BsStatus {
    guard(|| {
        let cohort = deref(cohort, "cohort")?;
        let options = deref(options, "options")?;
        if out.is_null() {
            return Err(invalid("out is null"));
        }
        let mode = match options.knot_mode {
            BsKnotMode::Fixed => KnotMode::Fixed,
            BsKnotMode::Random => KnotMode::Random,
        };
        let config = ChainConfig {
            iterations: options.iterations,
            burnin: options.burnin,
            thin: options.thin,
            ..ChainConfig::desk_schedule(options.seed, mode)
        };
        let output = run_chain(&cohort.0, &config).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(BsChain(output)));
        Ok(())
    })
}

/// Number of retained draws, or 0 for a null handle.
///
/// # Safety
/// `chain` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bs_chain_n_draws(chain: *const BsChain) -> usize {
    chain.as_ref().map_or(0, |c| c.0.draws.len())
}

/// Number of sweeps recorded in the cluster-count trace, or 0 for a null handle.
///
/// # Safety
/// `chain` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bs_chain_n_sweeps(chain: *const BsChain) -> usize {
    chain.as_ref().map_or(0, |c| c.0.g_trace.len())
}

/// Copies the occupied-cluster count of every sweep into `out`.
///
/// # Safety
/// `out` must point to `len` writable elements.
#[no_mangle]
pub unsafe extern "C" fn bs_chain_g_trace(chain: *const BsChain, out: *mut usize, len: usize) -> BsStatus {
    guard(|| {
        let chain = deref(chain, "chain")?;
        let trace = &chain.0.g_trace;
        out_slice(out, len, trace.len(), "out")?.copy_from_slice(trace);
        Ok(())
    })
}

/// Copies the canonical cluster labels of retained draw `draw` into `out`.
///
/// # Safety
/// `out` must point to `len` writable elements.
#[no_mangle]
pub unsafe extern "C" fn bs_chain_allocations(chain: *const BsChain, draw: usize, out: *mut usize, len: usize) -> BsStatus {
    guard(|| {
        let chain = deref(chain, "chain")?;
        let d = chain
            .0
            .draws
            .get(draw)
            .ok_or_else(|| invalid(&format!("draw {draw} out of range ({} retained)", chain.0.draws.len())))?;
        out_slice(out, len, d.allocations.len(), "out")?.copy_from_slice(&d.allocations);
        Ok(())
    })
}

/// # Safety
/// `chain` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bs_chain_free(chain: *mut BsChain) {
    if !chain.is_null() {
        drop(Box::from_raw(chain));
    }
}

/// PEAR-optimal clustering of the retained draws, using at most `max_draws`
/// evenly spaced draws.
///
/// # Safety
/// `chain` must be live, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bs_classify(chain: *const BsChain, max_draws: usize, out: *mut *mut BsClustering) -> BsStatus {
    guard(|| {
        let chain = deref(chain, "chain")?;
        if out.is_null() {
            return Err(invalid("out is null"));
        }
        let c = classify_draws(&chain.0.draws, max_draws).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(BsClustering {
            labels: c.labels,
            pear: c.pear,
        }));
        Ok(())
    })
}

/// Number of children labelled, or 0 for a null handle.
///
/// # Safety
/// `clustering` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bs_clustering_len(clustering: *const BsClustering) -> usize {
    clustering.as_ref().map_or(0, |c| c.labels.len())
}

/// Number of distinct clusters, or 0 for a null handle.
///
/// # Safety
/// `clustering` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bs_clustering_n_clusters(clustering: *const BsClustering) -> usize {
    clustering
        .as_ref()
        .map_or(0, |c| c.labels.iter().max().map_or(0, |m| m + 1))
}

/// Posterior expected adjusted Rand index of the clustering, or NaN for a null handle.
///
/// # Safety
/// `clustering` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bs_clustering_pear(clustering: *const BsClustering) -> f64 {
    clustering.as_ref().map_or(f64::NAN, |c| c.pear)
}

/// Copies the 0-based labels into `out`.
///
/// # Safety
/// `out` must point to `len` writable elements.
#[no_mangle]
pub unsafe extern "C" fn bs_clustering_labels(clustering: *const BsClustering, out: *mut usize, len: usize) -> BsStatus {
    guard(|| {
        let c = deref(clustering, "clustering")?;
        out_slice(out, len, c.labels.len(), "out")?.copy_from_slice(&c.labels);
        Ok(())
    })
}

/// # Safety
/// `clustering` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bs_clustering_free(clustering: *mut BsClustering) {
    if !clustering.is_null() {
        drop(Box::from_raw(clustering));
    }
}

/// Adjusted Rand index between two labelings of `n` items.
///
/// # Safety
/// `a` and `b` must each point to `n` readable elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bs_ari(a: *const usize, b: *const usize, n: usize, out: *mut f64) -> BsStatus {
    guard(|| {
        if a.is_null() || b.is_null() || out.is_null() {
            return Err(invalid("a, b and out must not be null"));
        }
        let (a, b) = (std::slice::from_raw_parts(a, n), std::slice::from_raw_parts(b, n));
        *out = brokenstick::ari(a, b).map_err(lib_err)?;
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use std::ptr;

    use super::*;

    #[test]
    fn status_mapping() {
        assert_eq!(status_of(&Error::Config("x".into())), BsStatus::Validation);
        assert_eq!(status_of(&Error::Numerical("x".into())), BsStatus::Numerical);
        let io = Error::Io {
            path: "p".into(),
            source: std::io::Error::other("x"),
        };
        assert_eq!(status_of(&io), BsStatus::Io);
    }

    #[test]
    fn panics_become_status_codes() {
        let status = guard(|| panic!("boom"));
        assert_eq!(status, BsStatus::Panic);
        let msg = unsafe { CStr::from_ptr(bs_last_error_message()) };
        assert_eq!(msg.to_str().unwrap(), "panic: boom");
        assert_eq!(guard(|| Ok(())), BsStatus::Ok);
        assert!(unsafe { CStr::from_ptr(bs_last_error_message()) }.to_bytes().is_empty());
    }

    #[test]
    fn null_handles_are_harmless() {
        unsafe {
            assert_eq!(bs_cohort_len(ptr::null()), 0);
            assert_eq!(bs_chain_n_draws(ptr::null()), 0);
            assert!(bs_clustering_pear(ptr::null()).is_nan());
            bs_cohort_free(ptr::null_mut());
            bs_chain_free(ptr::null_mut());
            bs_clustering_free(ptr::null_mut());
        }
    }
}
