//! C ABI for the solver toolkit.
//!
//! Conventions:
//! * instances and solve results are opaque handles created and released by
//!   this library; never free them with `free()`;
//! * functions returning a pointer yield null on failure, functions returning
//!   `GmStatus` yield a nonzero code on failure;
//! * after any failure, `gm_last_error()` returns a thread-local,
//!   NUL-terminated description valid until the next call on that thread;
//! * all functions are safe to call from multiple threads as long as each
//!   handle is used by one thread at a time.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use gridmates_core::coordination::{dadp_run, padp_run, CoordinationOptions};
use gridmates_core::instance::{
    generate_custom, generate_family, load_instance, save_instance, Instance,
};
use gridmates_core::policy_sim::{simulate_policy, GlobalValueStack, PolicyOptions, StackKind};
use gridmates_core::sddp::{sddp_run, SddpOptions};

/// Status codes returned by fallible functions.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum GmStatus {
    GmOk = 0,
    GmNullPointer = 1,
    GmInvalidUtf8 = 2,
    GmIoError = 3,
    GmInvalidArgument = 4,
    GmSolveFailed = 5,
    GmInfeasible = 6,
    GmPanic = 7,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(sanitized).unwrap());
}

fn status_of(err: &gridmates_core::error::Error) -> GmStatus {
    use gridmates_core::error::Error as E;
    match err {
        E::Io(_) | E::Csv(_) => GmStatus::GmIoError,
        E::InvalidInstance(_) | E::InvalidParameter(_) => GmStatus::GmInvalidArgument,
        E::EdgeResourceInfeasible { .. } | E::NodalInfeasible { .. } | E::PolicyInfeasible { .. } => {
            GmStatus::GmInfeasible
        }
        _ => GmStatus::GmSolveFailed,
    }
}

/// Opaque instance handle.
pub struct GmInstance {
    inner: Instance,
}

/// Which algorithm produced a result.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum GmAlgo {
    GmDadp = 0,
    GmPadp = 1,
    GmSddp = 2,
}

/// Opaque solve-result handle: a bound plus the value stack that induces the
/// online policy.
pub struct GmResult {
    algo: GmAlgo,
    bound: f64,
    iterations: usize,
    stack: GlobalValueStack,
}

/// Options for the coordination solvers (`gm_solve_dadp`, `gm_solve_padp`).
/// Zero or negative fields fall back to defaults.
#[repr(C)]
#[derive(Clone, Copy)]
pub struct GmCoordinationOptions {
    pub seed: u64,
    pub state_points: i32,
    pub control_points: i32,
    pub mc_samples: i32,
    pub max_iters: i32,
}

/// Options for `gm_solve_sddp`. Zero or negative fields fall back to
/// defaults.
#[repr(C)]
#[derive(Clone, Copy)]
pub struct GmSddpOptions {
    pub seed: u64,
    pub resample_k: i32,
    pub max_iters: i32,
    pub cut_cap: i32,
}

fn or_default(v: i32, d: usize) -> usize {
    if v > 0 { v as usize } else { d }
}

unsafe fn path_arg<'a>(ptr: *const c_char) -> Result<&'a Path, GmStatus> {
    if ptr.is_null() {
        set_error("null path");
        return Err(GmStatus::GmNullPointer);
    }
    match unsafe { CStr::from_ptr(ptr) }.to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => {
            set_error("path is not valid UTF-8");
            Err(GmStatus::GmInvalidUtf8)
        }
    }
}

fn guarded_ptr<T, F: FnOnce() -> Result<*mut T, GmStatus>>(f: F) -> *mut T {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(p)) => p,
        Ok(Err(_)) => std::ptr::null_mut(),
        Err(_) => {
            set_error("internal panic");
            std::ptr::null_mut()
        }
    }
}

fn guarded_status<F: FnOnce() -> GmStatus>(f: F) -> GmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => {
            set_error("internal panic");
            GmStatus::GmPanic
        }
    }
}

/// Thread-local description of the most recent failure on this thread.
/// Valid until the next failing call on the same thread.
#[unsafe(no_mangle)]
pub extern "C" fn gm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads an instance from a JSON file. Returns null on failure.
///
/// # Safety
/// `path` must be a NUL-terminated string.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn gm_instance_load(path: *const c_char) -> *mut GmInstance {
    guarded_ptr(|| {
        let path = unsafe { path_arg(path) }?;
        match load_instance(path) {
            Ok(inner) => Ok(Box::into_raw(Box::new(GmInstance { inner }))),
            Err(e) => {
                set_error(&e.to_string());
                Err(status_of(&e))
            }
        }
    })
}

/// Writes an instance to a JSON file.
///
/// # Safety
/// `inst` must be a live handle; `path` must be a NUL-terminated string.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn gm_instance_save(
    inst: *const GmInstance,
    path: *const c_char,
) -> GmStatus {
    guarded_status(|| {
        let Some(inst) = (unsafe { inst.as_ref() }) else {
            set_error("null instance");
            return GmStatus::GmNullPointer;
        };
        let path = match unsafe { path_arg(path) } {
            Ok(p) => p,
            Err(s) => return s,
        };
        match save_instance(&inst.inner, path) {
            Ok(()) => GmStatus::GmOk,
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Generates a standard family instance (3, 6, 12, 24 or 48 nodes).
/// Returns null on failure.
#[unsafe(no_mangle)]
pub extern "C" fn gm_instance_generate(family: i32, seed: u64) -> *mut GmInstance {
    guarded_ptr(|| {
        if family <= 0 {
            set_error("family size must be positive");
            return Err(GmStatus::GmInvalidArgument);
        }
        match generate_family(family as usize, seed) {
            Ok(inner) => Ok(Box::into_raw(Box::new(GmInstance { inner }))),
            Err(e) => {
                set_error(&e.to_string());
                Err(status_of(&e))
            }
        }
    })
}

/// Generates a connected instance with explicit sizes. Returns null on
/// failure.
#[unsafe(no_mangle)]
pub extern "C" fn gm_instance_generate_custom(
    nodes: i32,
    edges: i32,
    batteries: i32,
    seed: u64,
) -> *mut GmInstance {
    guarded_ptr(|| {
        if nodes <= 0 || edges < 0 || batteries < 0 {
            set_error("sizes must be non-negative and nodes positive");
            return Err(GmStatus::GmInvalidArgument);
        }
        match generate_custom(nodes as usize, edges as usize, batteries as usize, seed, "custom") {
            Ok(inner) => Ok(Box::into_raw(Box::new(GmInstance { inner }))),
            Err(e) => {
                set_error(&e.to_string());
                Err(status_of(&e))
            }
        }
    })
}

/// Number of nodes, or 0 for a null handle.
///
/// # Safety
/// `inst` must be null or a live handle.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn gm_instance_num_nodes(inst: *const GmInstance) -> usize {
    unsafe { inst.as_ref() }.map_or(0, |i| i.inner.num_nodes())
}

/// Number of edges, or 0 for a null handle.
///
/// # Safety
/// `inst` must be null or a live handle.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn gm_instance_num_edges(inst: *const GmInstance) -> usize {
    unsafe { inst.as_ref() }.map_or(0, |i| i.inner.num_edges())
}

/// Number of stages, or 0 for a null handle.
///
/// # Safety
/// `inst` must be null or a live handle.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn gm_instance_horizon(inst: *const GmInstance) -> usize {
    unsafe { inst.as_ref() }.map_or(0, |i| i.inner.horizon)
}

/// Releases an instance handle. Null is a no-op.
///
/// # Safety
/// `inst` must be null or a live handle; it must not be used afterwards.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn gm_instance_free(inst: *mut GmInstance) {
    if !inst.is_null() {
        drop(unsafe { Box::from_raw(inst) });
    }
}

fn coordination_options(opts: *const GmCoordinationOptions) -> CoordinationOptions {
    let mut out = CoordinationOptions::default();
    if let Some(o) = unsafe { opts.as_ref() } {
        out.seed = o.seed;
        out.state_points = or_default(o.state_points, out.state_points);
        out.control_points = or_default(o.control_points, out.control_points);
        out.mc_samples = or_default(o.mc_samples, out.mc_samples);
        out.max_iters = or_default(o.max_iters, out.max_iters);
    }
    out
}

unsafe fn run_coordination(
    inst: *const GmInstance,
    opts: *const GmCoordinationOptions,
    algo: GmAlgo,
) -> *mut GmResult {
    guarded_ptr(|| {
        let Some(inst) = (unsafe { inst.as_ref() }) else {
            set_error("null instance");
            return Err(GmStatus::GmNullPointer);
        };
        let options = coordination_options(opts);
        let run = if matches!(algo, GmAlgo::GmDadp) {
            dadp_run(&inst.inner, &inst.inner.x0, &options)
        } else {
            padp_run(&inst.inner, &inst.inner.x0, &options)
        };
        match run {
            Ok(result) => Ok(Box::into_raw(Box::new(GmResult {
                algo,
                bound: result.bound,
                iterations: result.iterations,
                stack: GlobalValueStack::Decomposed {
                    kind: if matches!(algo, GmAlgo::GmDadp) {
                        StackKind::DadpSum
                    } else {
                        StackKind::PadpSum
                    },
                    node_tables: result.node_values,
                },
            }))),
            Err(e) => {
                set_error(&e.to_string());
                Err(status_of(&e))
            }
        }
    })
}

/// Runs price coordination; the result carries a lower bound. `opts` may be
/// null for defaults. Returns null on failure.
///
/// # Safety
/// `inst` must be a live handle; `opts` must be null or valid.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn gm_solve_dadp(
    inst: *const GmInstance,
    opts: *const GmCoordinationOptions,
) -> *mut GmResult {
    unsafe { run_coordination(inst, opts, GmAlgo::GmDadp) }
}

/// Runs resource coordination; the result carries an upper bound (possibly
/// `+inf`). `opts` may be null for defaults. Returns null on failure.
///
/// # Safety
/// `inst` must be a live handle; `opts` must be null or valid.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn gm_solve_padp(
    inst: *const GmInstance,
    opts: *const GmCoordinationOptions,
) -> *mut GmResult {
    unsafe { run_coordination(inst, opts, GmAlgo::GmPadp) }
}

/// Runs the global cutting-plane solver; the result carries a lower bound.
/// `opts` may be null for defaults. Returns null on failure.
///
/// # Safety
/// `inst` must be a live handle; `opts` must be null or valid.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn gm_solve_sddp(
    inst: *const GmInstance,
    opts: *const GmSddpOptions,
) -> *mut GmResult {
    guarded_ptr(|| {
        let Some(inst) = (unsafe { inst.as_ref() }) else {
            set_error("null instance");
            return Err(GmStatus::GmNullPointer);
        };
        let mut options = SddpOptions::default();
        if let Some(o) = unsafe { opts.as_ref() } {
            options.seed = o.seed;
            options.resample_k = or_default(o.resample_k, options.resample_k);
            options.max_iters = or_default(o.max_iters, options.max_iters);
            options.cut_cap = or_default(o.cut_cap, options.cut_cap);
        }
        match sddp_run(&inst.inner, &inst.inner.x0, &options) {
            Ok(result) => Ok(Box::into_raw(Box::new(GmResult {
                algo: GmAlgo::GmSddp,
                bound: result.lower_bound,
                iterations: result.iterations,
                stack: GlobalValueStack::SddpCuts {
                    pools: result.pools,
                },
            }))),
            Err(e) => {
                set_error(&e.to_string());
                Err(status_of(&e))
            }
        }
    })
}

/// Certified bound of a result: a lower bound for dadp/sddp, an upper bound
/// for padp. NaN for a null handle.
///
/// # Safety
/// `res` must be null or a live handle.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn gm_result_bound(res: *const GmResult) -> f64 {
    unsafe { res.as_ref() }.map_or(f64::NAN, |r| r.bound)
}

/// Algorithm that produced a result. `GmDadp` for a null handle.
///
/// # Safety
/// `res` must be null or a live handle.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn gm_result_algo(res: *const GmResult) -> GmAlgo {
    unsafe { res.as_ref() }.map_or(GmAlgo::GmDadp, |r| r.algo)
}

/// 1 if the bound is a lower bound, 0 if it is an upper bound.
///
/// # Safety
/// `res` must be null or a live handle.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn gm_result_is_lower_bound(res: *const GmResult) -> i32 {
    match unsafe { res.as_ref() }.map(|r| r.algo) {
        Some(GmAlgo::GmPadp) => 0,
        _ => 1,
    }
}

/// Iterations performed. 0 for a null handle.
///
/// # Safety
/// `res` must be null or a live handle.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn gm_result_iterations(res: *const GmResult) -> usize {
    unsafe { res.as_ref() }.map_or(0, |r| r.iterations)
}

/// Simulates the online policy induced by a result over fresh scenarios and
/// writes the mean cost and its 95% half-width through the out pointers.
///
/// # Safety
/// `inst` and `res` must be live handles; `out_mean` and `out_half_width`
/// must be valid writable pointers.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn gm_simulate(
    inst: *const GmInstance,
    res: *const GmResult,
    scenarios: usize,
    seed: u64,
    out_mean: *mut f64,
    out_half_width: *mut f64,
) -> GmStatus {
    guarded_status(|| {
        let (Some(inst), Some(res)) = (unsafe { inst.as_ref() }, unsafe { res.as_ref() }) else {
            set_error("null handle");
            return GmStatus::GmNullPointer;
        };
        if out_mean.is_null() || out_half_width.is_null() {
            set_error("null output pointer");
            return GmStatus::GmNullPointer;
        }
        match simulate_policy(
            &inst.inner,
            &inst.inner.x0,
            &res.stack,
            scenarios,
            seed,
            &PolicyOptions::default(),
        ) {
            Ok(report) => {
                unsafe {
                    *out_mean = report.mean;
                    *out_half_width = report.half_width;
                }
                GmStatus::GmOk
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Releases a result handle. Null is a no-op.
///
/// # Safety
/// `res` must be null or a live handle; it must not be used afterwards.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn gm_result_free(res: *mut GmResult) {
    if !res.is_null() {
        drop(unsafe { Box::from_raw(res) });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ffi::CString;

    #[test]
    fn null_handles_are_rejected() {
        unsafe {
            assert_eq!(gm_instance_num_nodes(std::ptr::null()), 0);
            assert!(gm_instance_load(std::ptr::null()).is_null());
            assert!(gm_result_bound(std::ptr::null()).is_nan());
            let status = gm_simulate(
                std::ptr::null(),
                std::ptr::null(),
                1,
                0,
                std::ptr::null_mut(),
                std::ptr::null_mut(),
            );
            assert!(matches!(status, GmStatus::GmNullPointer));
            gm_instance_free(std::ptr::null_mut());
            gm_result_free(std::ptr::null_mut());
        }
    }

    #[test]
    fn generate_save_load_round_trip() {
        unsafe {
            let inst = gm_instance_generate(3, 42);
            assert!(!inst.is_null());
            assert_eq!(gm_instance_num_nodes(inst), 3);
            assert_eq!(gm_instance_num_edges(inst), 3);
            assert_eq!(gm_instance_horizon(inst), 96);

            let dir = tempdir();
            let path = CString::new(dir.join("inst.json").to_str().unwrap()).unwrap();
            assert!(matches!(gm_instance_save(inst, path.as_ptr()), GmStatus::GmOk));
            let loaded = gm_instance_load(path.as_ptr());
            assert!(!loaded.is_null());
            assert_eq!(gm_instance_num_nodes(loaded), 3);
            gm_instance_free(inst);
            gm_instance_free(loaded);
            std::fs::remove_dir_all(&dir).ok();
        }
    }

    #[test]
    fn error_message_is_set_on_failure() {
        unsafe {
            let path = CString::new("/definitely/missing/file.json").unwrap();
            let inst = gm_instance_load(path.as_ptr());
            assert!(inst.is_null());
            let msg = CStr::from_ptr(gm_last_error()).to_str().unwrap();
            assert!(!msg.is_empty());
        }
    }

    #[test]
    fn invalid_family_fails_cleanly() {
        let inst = gm_instance_generate(5, 0);
        assert!(inst.is_null());
        let inst = gm_instance_generate(-1, 0);
        assert!(inst.is_null());
    }

    fn tempdir() -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("gm-ffi-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }
}
