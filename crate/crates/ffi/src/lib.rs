//! C interface to `volterra-core`.
//!
//! Every function returns a [`VolterraStatus`]; results go through out-pointers. On failure the
//! message is available from [`volterra_last_error`] on the calling thread. Handles are opaque
//! and must be released with the matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;

use volterra_core::bsvie::{solve_bsvie, BsvieOptions, BsvieProblem, LinearDriver};
use volterra_core::kernel::{bsvie_margin, control_admissible, critical_weight, svie_margin, ControlKernels};
use volterra_core::run::{run, write_outputs, JobStatus, RunConfig};
use volterra_core::stochastic::{Ensemble, Process};
use volterra_core::{Error, Kernel};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VolterraStatus {
    Ok = 0,
    InvalidParameter = 1,
    Dimension = 2,
    Inadmissible = 3,
    NonConvergence = 4,
    Numerical = 5,
    MemoryBudget = 6,
    Parse = 7,
    Io = 8,
    NullPointer = 9,
    Panic = 10,
}

impl From<&Error> for VolterraStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidParameter(_) => VolterraStatus::InvalidParameter,
            Error::Dimension(_) => VolterraStatus::Dimension,
            Error::Inadmissible(_) => VolterraStatus::Inadmissible,
            Error::NonConvergence(_) => VolterraStatus::NonConvergence,
            Error::Numerical(_) => VolterraStatus::Numerical,
            Error::MemoryBudget { .. } => VolterraStatus::MemoryBudget,
            Error::Parse(_) => VolterraStatus::Parse,
            Error::Io(_) => VolterraStatus::Io,
        }
    }
}

/// Opaque kernel handle.
pub struct VolterraKernel(Kernel);

/// Opaque ensemble handle.
pub struct VolterraEnsemble(Ensemble);

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

struct Fail(VolterraStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(VolterraStatus::from(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(VolterraStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, records any error and converts panics into [`VolterraStatus::Panic`].
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> VolterraStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => VolterraStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            VolterraStatus::Panic
        }
    }
}

unsafe fn write<T>(out: *mut T, v: T, what: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(v);
    Ok(())
}

unsafe fn kernel<'a>(k: *const VolterraKernel, what: &str) -> Result<&'a Kernel, Fail> {
    k.as_ref().map(|k| &k.0).ok_or_else(|| null(what))
}

unsafe fn new_kernel(k: Kernel, out: *mut *mut VolterraKernel) -> VolterraStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        k.validate()?;
        out.write(Box::into_raw(Box::new(VolterraKernel(k))));
        Ok(())
    })
}

/// Message of the last failed call on this thread, or null. Valid until the next call.
#[no_mangle]
pub extern "C" fn volterra_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// `scale · τ^{alpha-1}`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn volterra_kernel_fractional(alpha: f64, scale: f64, out: *mut *mut VolterraKernel) -> VolterraStatus {
    new_kernel(Kernel::fractional(alpha, scale), out)
}

/// `scale · e^{-rate τ}`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn volterra_kernel_exponential(rate: f64, scale: f64, out: *mut *mut VolterraKernel) -> VolterraStatus {
    new_kernel(Kernel::exponential(rate, scale), out)
}

/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn volterra_kernel_constant(scale: f64, out: *mut *mut VolterraKernel) -> VolterraStatus {
    new_kernel(Kernel::constant(scale), out)
}

/// `scale · τ^{alpha-1} e^{-rate τ}`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn volterra_kernel_power_exponential(
    alpha: f64,
    rate: f64,
    scale: f64,
    out: *mut *mut VolterraKernel,
) -> VolterraStatus {
    new_kernel(Kernel::PowerTimesExponential { alpha, rate, scale }, out)
}

/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn volterra_kernel_zero(out: *mut *mut VolterraKernel) -> VolterraStatus {
    new_kernel(Kernel::Zero, out)
}

/// # Safety
/// `k` must come from a `volterra_kernel_*` constructor and not be freed twice. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn volterra_kernel_free(k: *mut VolterraKernel) {
    if !k.is_null() {
        drop(Box::from_raw(k));
    }
}

/// # Safety
/// `k` must be a live kernel handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn volterra_kernel_eval(k: *const VolterraKernel, tau: f64, out: *mut f64) -> VolterraStatus {
    guard(|| write(out, kernel(k, "kernel")?.eval(tau), "out"))
}

/// Weighted `p`-norm (`p` = 1 or 2) at weight `rho`; `+inf` at or below the divergence threshold.
///
/// # Safety
/// `k` must be a live kernel handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn volterra_kernel_norm(k: *const VolterraKernel, p: u8, rho: f64, out: *mut f64) -> VolterraStatus {
    guard(|| write(out, kernel(k, "kernel")?.weighted_norm(p, rho)?, "out"))
}

/// Critical weight of a drift/diffusion envelope pair; may be `-inf` or `+inf`.
///
/// # Safety
/// Kernel arguments must be live handles and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn volterra_critical_weight(
    drift: *const VolterraKernel,
    diffusion: *const VolterraKernel,
    out: *mut f64,
) -> VolterraStatus {
    guard(|| {
        let cw = critical_weight(kernel(drift, "drift")?, kernel(diffusion, "diffusion")?)?;
        write(out, cw.rho, "out")
    })
}

/// `1 - [drift]_1(rho) - [diffusion]_2(rho)`.
///
/// # Safety
/// Kernel arguments must be live handles and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn volterra_svie_margin(
    drift: *const VolterraKernel,
    diffusion: *const VolterraKernel,
    rho: f64,
    out: *mut f64,
) -> VolterraStatus {
    guard(|| write(out, svie_margin(kernel(drift, "drift")?, kernel(diffusion, "diffusion")?, rho)?, "out"))
}

/// Margin of a backward driver with envelopes for `y`, `z1` and `z2`.
///
/// # Safety
/// Kernel arguments must be live handles and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn volterra_bsvie_margin(
    ky: *const VolterraKernel,
    kz1: *const VolterraKernel,
    kz2: *const VolterraKernel,
    eta: f64,
    lambda: f64,
    out: *mut f64,
) -> VolterraStatus {
    guard(|| {
        let m = bsvie_margin(kernel(ky, "ky")?, kernel(kz1, "kz1")?, kernel(kz2, "kz2")?, eta, lambda)?;
        write(out, m.margin, "out")
    })
}

/// Whether `(mu, lambda)` is admissible for a controlled equation; `rho_star` may be null.
///
/// # Safety
/// Kernel arguments must be live handles; `ok` must be valid.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn volterra_control_admissible(
    bx: *const VolterraKernel,
    bu: *const VolterraKernel,
    sx: *const VolterraKernel,
    su: *const VolterraKernel,
    mu: f64,
    lambda: f64,
    ok: *mut bool,
    rho_star: *mut f64,
) -> VolterraStatus {
    guard(|| {
        let k = ControlKernels { bx: *kernel(bx, "bx")?, bu: *kernel(bu, "bu")?, sx: *kernel(sx, "sx")?, su: *kernel(su, "su")? };
        let a = control_admissible(&k, mu, lambda)?;
        if !rho_star.is_null() {
            rho_star.write(a.rho_star);
        }
        if let Some(f) = &a.failure {
            set_error(f.clone());
        }
        write(ok, a.ok, "ok")
    })
}

unsafe fn new_ensemble(e: volterra_core::Result<Ensemble>, out: *mut *mut VolterraEnsemble) -> VolterraStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        out.write(Box::into_raw(Box::new(VolterraEnsemble(e?))));
        Ok(())
    })
}

/// Binomial tree with `2^steps` equally weighted paths (`steps` ≤ 20).
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn volterra_ensemble_tree(horizon: f64, steps: usize, out: *mut *mut VolterraEnsemble) -> VolterraStatus {
    new_ensemble(Ensemble::tree(horizon, steps), out)
}

/// Seeded Monte Carlo ensemble with `dim` independent Brownian coordinates.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn volterra_ensemble_monte_carlo(
    horizon: f64,
    steps: usize,
    paths: usize,
    dim: usize,
    seed: u64,
    out: *mut *mut VolterraEnsemble,
) -> VolterraStatus {
    new_ensemble(Ensemble::monte_carlo(horizon, steps, paths, dim, seed), out)
}

/// # Safety
/// `e` must come from a `volterra_ensemble_*` constructor and not be freed twice. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn volterra_ensemble_free(e: *mut VolterraEnsemble) {
    if !e.is_null() {
        drop(Box::from_raw(e));
    }
}

/// Number of paths, or 0 for a null handle.
///
/// # Safety
/// `e` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn volterra_ensemble_paths(e: *const VolterraEnsemble) -> usize {
    e.as_ref().map_or(0, |e| e.0.paths())
}

/// Number of time steps, or 0 for a null handle.
///
/// # Safety
/// `e` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn volterra_ensemble_steps(e: *const VolterraEnsemble) -> usize {
    e.as_ref().map_or(0, |e| e.0.steps())
}

/// Brownian value of the first coordinate at node `i` on path `p`.
///
/// # Safety
/// `e` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn volterra_ensemble_brownian(e: *const VolterraEnsemble, i: usize, p: usize, out: *mut f64) -> VolterraStatus {
    guard(|| {
        let e = &e.as_ref().ok_or_else(|| null("ensemble"))?.0;
        if i > e.steps() || p >= e.paths() {
            return Err(Fail(VolterraStatus::InvalidParameter, format!("node {i} / path {p} out of range")));
        }
        write(out, e.w(i, p)[0], "out")
    })
}

/// Solves the scalar backward equation with driver `a·y + b1·z1 + b2·z2`.
///
/// `psi` and `y` hold `(steps + 1) · paths` values, node-major (`[i · paths + p]`).
///
/// # Safety
/// `e` must be a live handle; `psi` must be readable and `y` writable for `len` values.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn volterra_solve_linear_bsvie(
    e: *const VolterraEnsemble,
    a: f64,
    b1: f64,
    b2: f64,
    lambda: f64,
    eta: f64,
    psi: *const f64,
    y: *mut f64,
    len: usize,
) -> VolterraStatus {
    guard(|| {
        let ens = &e.as_ref().ok_or_else(|| null("ensemble"))?.0;
        if psi.is_null() || y.is_null() {
            return Err(null("psi/y"));
        }
        let nodes = ens.steps() + 1;
        if len != nodes * ens.paths() {
            return Err(Fail(VolterraStatus::Dimension, format!("len {len} != {} nodes x {} paths", nodes, ens.paths())));
        }
        let psi = Process::from_vec(nodes, ens.paths(), 1, std::slice::from_raw_parts(psi, len).to_vec())?;
        let problem = BsvieProblem::new(Arc::new(LinearDriver::scalar(a, b1, b2)), psi, lambda, eta);
        let sol = solve_bsvie(&problem, ens, &BsvieOptions::default())?;
        std::slice::from_raw_parts_mut(y, len).copy_from_slice(sol.y.data());
        Ok(())
    })
}

/// Runs a JSON job (same format as the command-line `--config` file, `command` required).
///
/// When `out_dir` is non-null, outputs and the manifest are written there. When `summary` is
/// non-null it receives a JSON summary to be released with [`volterra_string_free`]. An
/// inadmissible domain report still fills both and returns [`VolterraStatus::Inadmissible`].
///
/// # Safety
/// `config` must be a NUL-terminated string; `out_dir` null or NUL-terminated; `summary` null or
/// valid.
#[no_mangle]
pub unsafe extern "C" fn volterra_run_json(
    config: *const c_char,
    out_dir: *const c_char,
    summary: *mut *mut c_char,
) -> VolterraStatus {
    let mut inadmissible = false;
    let status = guard(|| {
        if config.is_null() {
            return Err(null("config"));
        }
        let text = CStr::from_ptr(config)
            .to_str()
            .map_err(|e| Fail(VolterraStatus::Parse, format!("config is not UTF-8: {e}")))?;
        let cfg = RunConfig::from_json(text)?;
        let job = run(&cfg)?;
        if !out_dir.is_null() {
            let dir = CStr::from_ptr(out_dir)
                .to_str()
                .map_err(|e| Fail(VolterraStatus::InvalidParameter, format!("out_dir is not UTF-8: {e}")))?;
            write_outputs(&cfg, &job, Path::new(dir))?;
        }
        if !summary.is_null() {
            let s = CString::new(job.summary.to_string()).map_err(|e| Fail(VolterraStatus::Numerical, e.to_string()))?;
            summary.write(s.into_raw());
        }
        inadmissible = job.status == JobStatus::Inadmissible;
        Ok(())
    });
    if status == VolterraStatus::Ok && inadmissible {
        set_error("parameters are outside the admissible domain");
        return VolterraStatus::Inadmissible;
    }
    status
}

/// # Safety
/// `s` must come from this library and not be freed twice. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn volterra_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
