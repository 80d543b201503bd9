//! C interface to feedsim.
//!
//! Every function returns a [`FeedsimStatus`]; results are written through out
//! pointers. Panels are opaque handles released with [`feedsim_panel_free`].
//! On failure a message is kept per thread and can be fetched with
//! [`feedsim_last_error_message`].

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use libc::{c_char, size_t};

use feedsim::behavior::{self, Exposure, UserTaste, UtilityParams};
use feedsim::estimation;
use feedsim::simulator::{self, Panel, SimConfig};
use feedsim::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeedsimStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    NonConvergence = 4,
    DataContract = 5,
    InsufficientData = 6,
    Io = 7,
    Panic = 8,
}

/// Opaque two-period experiment panel.
pub struct FeedsimPanel(Panel);

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct FeedsimBehavior {
    pub n_views: f64,
    pub n_shares: f64,
    pub share_frac_toxic: f64,
    pub toxic_views: f64,
    pub toxic_shares: f64,
    /// 1 when the user leaves the platform for the period.
    pub exited: u8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct FeedsimParams {
    pub alpha: f64,
    pub beta: f64,
    pub eta: f64,
    pub delta: f64,
    pub theta: f64,
    pub mu: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeedsimMethod {
    Ols = 0,
    Iv2sls = 1,
    Reliability = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct FeedsimThetaEstimate {
    pub theta_hat: f64,
    pub se: f64,
    pub intercept: f64,
    /// NaN when the method has no first stage.
    pub first_stage_f: f64,
    pub n_obs: size_t,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> FeedsimStatus {
    match e {
        Error::Domain(_) | Error::InvalidParams(_) | Error::Dimension(_) => FeedsimStatus::InvalidArgument,
        Error::Config(_) => FeedsimStatus::Config,
        Error::NonConvergence(_) => FeedsimStatus::NonConvergence,
        Error::DataContract(_) => FeedsimStatus::DataContract,
        Error::InsufficientData(_) => FeedsimStatus::InsufficientData,
        Error::Io(_) => FeedsimStatus::Io,
    }
}

/// Run `f`, recording errors and containing panics.
fn guard(f: impl FnOnce() -> Result<(), FfiError>) -> FeedsimStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            FeedsimStatus::Ok
        }
        Ok(Err(FfiError(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            FeedsimStatus::Panic
        }
    }
}

struct FfiError(FeedsimStatus, String);

impl From<Error> for FfiError {
    fn from(e: Error) -> Self {
        FfiError(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> FfiError {
    FfiError(FeedsimStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(path: *const c_char) -> Result<String, FfiError> {
    if path.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(path)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| FfiError(FeedsimStatus::InvalidArgument, "path is not UTF-8".into()))
}

fn params_of(p: &FeedsimParams) -> Result<UtilityParams, Error> {
    UtilityParams::new(p.alpha, p.beta, p.eta, p.delta, p.theta, p.mu)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn feedsim_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copy the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length, 0 if there is none.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn feedsim_last_error_message(buf: *mut c_char, len: size_t) -> size_t {
    LAST_ERROR.with(|e| match e.borrow().as_ref() {
        None => 0,
        Some(msg) => {
            let bytes = msg.as_bytes();
            if !buf.is_null() && len > 0 {
                let n = bytes.len().min(len - 1);
                ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
                *buf.add(n) = 0;
            }
            bytes.len()
        }
    })
}

/// Default behavioral constants.
///
/// # Safety
/// `out` must be null or a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn feedsim_default_params(out: *mut FeedsimParams) -> FeedsimStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let d = simulator::default_params();
        *out = FeedsimParams {
            alpha: d.alpha(),
            beta: d.beta(),
            eta: d.eta(),
            delta: d.delta(),
            theta: d.theta(),
            mu: d.mu(),
        };
        Ok(())
    })
}

/// Optimal toxic fraction of shares for exposure `q` and taste `p`.
///
/// # Safety
/// `out` must be null or a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn feedsim_optimal_share_fraction(q: f64, p: f64, theta: f64, out: *mut f64) -> FeedsimStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = behavior::optimal_share_fraction(Exposure::new(q)?, UserTaste::new(p)?, theta)?;
        Ok(())
    })
}

/// Closed-form behavior of one user.
///
/// # Safety
/// `params` and `out` must be null or valid pointers.
#[no_mangle]
pub unsafe extern "C" fn feedsim_solve_user(
    params: *const FeedsimParams,
    q: f64,
    p: f64,
    out: *mut FeedsimBehavior,
) -> FeedsimStatus {
    guard(|| {
        let params = params_of(params.as_ref().ok_or_else(|| null("params"))?)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let b = behavior::solve_user(&params, Exposure::new(q)?, UserTaste::new(p)?);
        *out = FeedsimBehavior {
            n_views: b.n_views,
            n_shares: b.n_shares,
            share_frac_toxic: b.share_frac_toxic,
            toxic_views: b.toxic_views,
            toxic_shares: b.toxic_shares,
            exited: u8::from(b.exited),
        };
        Ok(())
    })
}

/// Simulate the randomized experiment with default settings apart from the
/// given parameters. On success `*out` owns a new panel.
///
/// # Safety
/// `params` and `out` must be null or valid pointers.
#[no_mangle]
pub unsafe extern "C" fn feedsim_simulate(
    n_users: size_t,
    params: *const FeedsimParams,
    seed: u64,
    out: *mut *mut FeedsimPanel,
) -> FeedsimStatus {
    guard(|| {
        let params = params_of(params.as_ref().ok_or_else(|| null("params"))?)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let exp = simulator::simulate_experiment(&SimConfig::new(n_users, params, seed))?;
        *out = Box::into_raw(Box::new(FeedsimPanel(exp.panel)));
        Ok(())
    })
}

/// Read a panel CSV.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn feedsim_panel_read_csv(path: *const c_char, out: *mut *mut FeedsimPanel) -> FeedsimStatus {
    guard(|| {
        let path = path_arg(path)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let file = File::open(&path).map_err(Error::from)?;
        let panel = Panel::read_csv(BufReader::new(file))?;
        *out = Box::into_raw(Box::new(FeedsimPanel(panel)));
        Ok(())
    })
}

/// Write a panel CSV, replacing any existing file.
///
/// # Safety
/// `panel` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn feedsim_panel_write_csv(panel: *const FeedsimPanel, path: *const c_char) -> FeedsimStatus {
    guard(|| {
        let panel = panel.as_ref().ok_or_else(|| null("panel"))?;
        let path = path_arg(path)?;
        let file = File::create(&path).map_err(Error::from)?;
        panel.0.write_csv(BufWriter::new(file))?;
        Ok(())
    })
}

/// Number of users in the panel.
///
/// # Safety
/// `panel` must come from this library; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn feedsim_panel_len(panel: *const FeedsimPanel, out: *mut size_t) -> FeedsimStatus {
    guard(|| {
        let panel = panel.as_ref().ok_or_else(|| null("panel"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = panel.0.len();
        Ok(())
    })
}

/// Estimate θ from the panel.
///
/// # Safety
/// `panel` must come from this library; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn feedsim_estimate_theta(
    panel: *const FeedsimPanel,
    method: FeedsimMethod,
    out: *mut FeedsimThetaEstimate,
) -> FeedsimStatus {
    guard(|| {
        let panel = &panel.as_ref().ok_or_else(|| null("panel"))?.0;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let est = match method {
            FeedsimMethod::Ols => estimation::estimate_theta_ols(panel)?,
            FeedsimMethod::Iv2sls => estimation::estimate_theta_iv(panel)?.0,
            FeedsimMethod::Reliability => estimation::estimate_theta_reliability(panel)?,
        };
        *out = FeedsimThetaEstimate {
            theta_hat: est.theta_hat,
            se: est.se,
            intercept: est.intercept,
            first_stage_f: est.first_stage_f.unwrap_or(f64::NAN),
            n_obs: est.n_obs,
        };
        Ok(())
    })
}

/// Release a panel. Null is ignored.
///
/// # Safety
/// `panel` must be null or come from this library and not be used again.
#[no_mangle]
pub unsafe extern "C" fn feedsim_panel_free(panel: *mut FeedsimPanel) {
    if !panel.is_null() {
        drop(Box::from_raw(panel));
    }
}
