//! C ABI over `icp-core`.
//!
//! Every fallible function returns an [`IcpStatus`]. On failure a message is
//! kept per thread and can be read with [`icp_last_error`]. Experiments are
//! handed out as opaque [`IcpExperiment`] pointers that the caller releases
//! with [`icp_experiment_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use icp_core::bounds::{posterior_variance, FimConfig};
use icp_core::config::CliConfig;
use icp_core::harness::{run_experiment, steady_state_start, Estimator, MetricsSeries};
use icp_core::network::iteration_budget;

/// Result codes shared by all fallible entry points.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IcpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Runtime = 4,
    Panic = 5,
}

/// Estimator selector for the RMSE accessors.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IcpEstimator {
    GnssOnly = 0,
    CentralizedIcp = 1,
    DistributedIcp = 2,
}

impl From<IcpEstimator> for Estimator {
    fn from(e: IcpEstimator) -> Self {
        match e {
            IcpEstimator::GnssOnly => Estimator::GnssOnly,
            IcpEstimator::CentralizedIcp => Estimator::CentralizedIcp,
            IcpEstimator::DistributedIcp => Estimator::DistributedIcp,
        }
    }
}

/// Closed-form bound inputs. Variances are in m^2.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct IcpFimConfig {
    pub n_v: usize,
    pub n_f: usize,
    pub sigma_gnss2: f64,
    pub sigma_v2f2: f64,
    pub sigma_p_prior_v2: f64,
    pub sigma_p_prior_f2: f64,
}

/// Results of a Monte Carlo experiment.
pub struct IcpExperiment {
    series: MetricsSeries,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn fail(status: IcpStatus, msg: impl Into<String>) -> IcpStatus {
    set_error(msg);
    status
}

/// Runs `f`, converting a panic into `IcpStatus::Panic`.
fn guard(f: impl FnOnce() -> IcpStatus) -> IcpStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(IcpStatus::Panic, format!("panic: {msg}"))
        }
    }
}

fn positive(name: &str, v: f64) -> Result<(), IcpStatus> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(fail(IcpStatus::InvalidArgument, format!("{name} must be finite and positive, got {v}")))
    }
}

/// Message for the last failing call on this thread, or NULL. The pointer is
/// valid until the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn icp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn icp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Posterior vehicle position variance for the all-to-all sensing case.
///
/// # Safety
/// `cfg` and `out` must be valid pointers or NULL.
#[no_mangle]
pub unsafe extern "C" fn icp_posterior_variance(cfg: *const IcpFimConfig, out: *mut f64) -> IcpStatus {
    guard(|| {
        // SAFETY: the caller guarantees validity; NULL is checked.
        let (Some(c), Some(out)) = (unsafe { cfg.as_ref() }, unsafe { out.as_mut() }) else {
            return fail(IcpStatus::NullPointer, "cfg and out must not be NULL");
        };
        for (name, v) in [
            ("sigma_gnss2", c.sigma_gnss2),
            ("sigma_v2f2", c.sigma_v2f2),
            ("sigma_p_prior_v2", c.sigma_p_prior_v2),
            ("sigma_p_prior_f2", c.sigma_p_prior_f2),
        ] {
            if let Err(s) = positive(name, v) {
                return s;
            }
        }
        if c.n_v == 0 {
            return fail(IcpStatus::InvalidArgument, "n_v must be at least 1");
        }
        let fc = FimConfig {
            n_v: c.n_v,
            n_f: c.n_f,
            sigma_gnss2: c.sigma_gnss2,
            sigma_v2f2: c.sigma_v2f2,
            sigma_p_prior_v2: c.sigma_p_prior_v2,
            sigma_p_prior_f2: c.sigma_p_prior_f2,
            sigma_v_prior_v2: f64::INFINITY,
            sigma_v_prior_f2: f64::INFINITY,
        };
        *out = posterior_variance(&fc).sigma_p_post2;
        IcpStatus::Ok
    })
}

/// Largest `N_mp * N_con` whose messages fit in one sampling interval.
///
/// # Safety
/// `out` must be a valid pointer or NULL.
#[no_mangle]
pub unsafe extern "C" fn icp_iteration_budget(
    rate: f64,
    n_b: f64,
    n_nei: f64,
    n_f: f64,
    ts: f64,
    out: *mut u64,
) -> IcpStatus {
    guard(|| {
        // SAFETY: the caller guarantees validity; NULL is checked.
        let Some(out) = (unsafe { out.as_mut() }) else {
            return fail(IcpStatus::NullPointer, "out must not be NULL");
        };
        for (name, v) in [("rate", rate), ("n_b", n_b), ("n_nei", n_nei), ("n_f", n_f), ("ts", ts)] {
            if let Err(s) = positive(name, v) {
                return s;
            }
        }
        *out = iteration_budget(rate, n_b, n_nei, n_f, ts);
        IcpStatus::Ok
    })
}

/// Runs the experiment described by a TOML document (same schema as the
/// `icp` command-line tool). On success `*out` receives a new handle.
///
/// # Safety
/// `toml` must be NULL or a NUL-terminated string; `out` must be a valid
/// pointer or NULL.
#[no_mangle]
pub unsafe extern "C" fn icp_experiment_run(toml: *const c_char, out: *mut *mut IcpExperiment) -> IcpStatus {
    guard(|| {
        if toml.is_null() || out.is_null() {
            return fail(IcpStatus::NullPointer, "toml and out must not be NULL");
        }
        // SAFETY: non-NULL and NUL-terminated per the contract.
        let text = match unsafe { CStr::from_ptr(toml) }.to_str() {
            Ok(t) => t,
            Err(_) => return fail(IcpStatus::InvalidArgument, "config is not valid UTF-8"),
        };
        let cfg = match CliConfig::from_toml(text).and_then(|c| c.validate().map(|_| c)) {
            Ok(c) => c,
            Err(e) => return fail(IcpStatus::Config, e),
        };
        match run_experiment(&cfg.run_config()) {
            Ok(series) => {
                // SAFETY: checked non-NULL above.
                unsafe { *out = Box::into_raw(Box::new(IcpExperiment { series })) };
                IcpStatus::Ok
            }
            Err(e) => fail(IcpStatus::Runtime, e.to_string()),
        }
    })
}

/// Releases a handle from [`icp_experiment_run`]. NULL is ignored.
///
/// # Safety
/// `exp` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn icp_experiment_free(exp: *mut IcpExperiment) {
    if !exp.is_null() {
        // SAFETY: the handle came from Box::into_raw and is freed once.
        drop(unsafe { Box::from_raw(exp) });
    }
}

unsafe fn experiment<'a>(exp: *const IcpExperiment) -> Result<&'a IcpExperiment, IcpStatus> {
    // SAFETY: forwarded from the caller's contract.
    unsafe { exp.as_ref() }.ok_or_else(|| fail(IcpStatus::NullPointer, "experiment handle is NULL"))
}

fn enabled(exp: &IcpExperiment, e: IcpEstimator) -> Result<Estimator, IcpStatus> {
    let est = Estimator::from(e);
    if exp.series.estimators.contains(&est) {
        Ok(est)
    } else {
        Err(fail(IcpStatus::InvalidArgument, format!("{} was not enabled", est.name())))
    }
}

/// Number of epochs per run.
///
/// # Safety
/// `exp` and `out` must be valid pointers or NULL.
#[no_mangle]
pub unsafe extern "C" fn icp_experiment_n_epochs(exp: *const IcpExperiment, out: *mut usize) -> IcpStatus {
    guard(|| {
        // SAFETY: forwarded from the caller's contract.
        let exp = match unsafe { experiment(exp) } {
            Ok(e) => e,
            Err(s) => return s,
        };
        // SAFETY: the caller guarantees validity; NULL is checked.
        let Some(out) = (unsafe { out.as_mut() }) else {
            return fail(IcpStatus::NullPointer, "out must not be NULL");
        };
        *out = exp.series.n_epochs;
        IcpStatus::Ok
    })
}

/// Number of runs that failed and were excluded from the metrics.
///
/// # Safety
/// `exp` and `out` must be valid pointers or NULL.
#[no_mangle]
pub unsafe extern "C" fn icp_experiment_n_failed(exp: *const IcpExperiment, out: *mut usize) -> IcpStatus {
    guard(|| {
        // SAFETY: forwarded from the caller's contract.
        let exp = match unsafe { experiment(exp) } {
            Ok(e) => e,
            Err(s) => return s,
        };
        // SAFETY: the caller guarantees validity; NULL is checked.
        let Some(out) = (unsafe { out.as_mut() }) else {
            return fail(IcpStatus::NullPointer, "out must not be NULL");
        };
        *out = exp.series.failures().len();
        IcpStatus::Ok
    })
}

/// Copies the per-epoch RMSE into `buf`, which must hold `len` values with
/// `len` at least the epoch count.
///
/// # Safety
/// `exp` must be a valid handle or NULL; `buf` must point to `len` writable
/// doubles or be NULL.
#[no_mangle]
pub unsafe extern "C" fn icp_experiment_rmse(
    exp: *const IcpExperiment,
    estimator: IcpEstimator,
    buf: *mut f64,
    len: usize,
) -> IcpStatus {
    guard(|| {
        // SAFETY: forwarded from the caller's contract.
        let exp = match unsafe { experiment(exp) } {
            Ok(e) => e,
            Err(s) => return s,
        };
        if buf.is_null() {
            return fail(IcpStatus::NullPointer, "buf must not be NULL");
        }
        let est = match enabled(exp, estimator) {
            Ok(e) => e,
            Err(s) => return s,
        };
        let rmse = exp.series.rmse(est);
        if len < rmse.len() {
            return fail(IcpStatus::InvalidArgument, format!("buffer holds {len} values, need {}", rmse.len()));
        }
        // SAFETY: buf holds at least len >= rmse.len() doubles.
        unsafe { ptr::copy_nonoverlapping(rmse.as_ptr(), buf, rmse.len()) };
        IcpStatus::Ok
    })
}

/// RMSE averaged over the steady-state epochs.
///
/// # Safety
/// `exp` and `out` must be valid pointers or NULL.
#[no_mangle]
pub unsafe extern "C" fn icp_experiment_mean_rmse(
    exp: *const IcpExperiment,
    estimator: IcpEstimator,
    out: *mut f64,
) -> IcpStatus {
    guard(|| {
        // SAFETY: forwarded from the caller's contract.
        let exp = match unsafe { experiment(exp) } {
            Ok(e) => e,
            Err(s) => return s,
        };
        // SAFETY: the caller guarantees validity; NULL is checked.
        let Some(out) = (unsafe { out.as_mut() }) else {
            return fail(IcpStatus::NullPointer, "out must not be NULL");
        };
        let est = match enabled(exp, estimator) {
            Ok(e) => e,
            Err(s) => return s,
        };
        let s = &exp.series;
        let start = steady_state_start(s.ts).min(s.n_epochs);
        *out = s.time_averaged_rmse(est, start..s.n_epochs);
        IcpStatus::Ok
    })
}
