//! C interface to `romi_core`.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_generate`
//! style functions and released with the matching `*_free`. Every fallible
//! call returns a [`RomiStatus`]; on failure the message is kept per thread
//! and can be copied out with [`romi_last_error_message`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use ndarray::ArrayView2;
use romi_core::error::LabError;
use romi_core::harness::{obtain_dataset, run_training, ExperimentConfig};
use romi_core::mdp::OfflineDataset;
use romi_core::oracle::{sandwich_check, verify_all, WassersteinBallProblem};
use romi_core::sac::{pretrain_ensemble, train_with_pretrained, TrainOutput};

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RomiStatus {
    Ok = 0,
    NullArgument = 1,
    Config = 2,
    Divergence = 3,
    Oracle = 4,
    Io = 5,
    InvalidUtf8 = 6,
    NotFound = 7,
    BufferTooSmall = 8,
    Internal = 9,
    Panic = 10,
}

impl From<&LabError> for RomiStatus {
    fn from(e: &LabError) -> Self {
        match e {
            LabError::Config(_) | LabError::Domain(_) | LabError::Shape(_) | LabError::Json(_) => RomiStatus::Config,
            LabError::Divergence(_) | LabError::NonFinite(_) => RomiStatus::Divergence,
            LabError::OracleFailure(_) | LabError::OracleInconsistency(_) => RomiStatus::Oracle,
            LabError::Io(_) => RomiStatus::Io,
            _ => RomiStatus::Internal,
        }
    }
}

/// Experiment configuration.
pub struct RomiConfig(ExperimentConfig);

/// Offline dataset.
pub struct RomiDataset(OfflineDataset);

/// Finished training run: policy, critics, ensemble and metrics.
pub struct RomiRun(TrainOutput);

/// Outcome of one Wasserstein-ball sandwich check.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RomiSandwich {
    pub robust_min: f64,
    pub surrogate: f64,
    pub nominal: f64,
    pub gap: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn fail(status: RomiStatus, msg: impl Into<String>) -> RomiStatus {
    set_error(msg.into());
    status
}

fn guard(f: impl FnOnce() -> Result<(), RomiStatus>) -> RomiStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            RomiStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(_) => fail(RomiStatus::Panic, "panic inside romi-ffi"),
    }
}

fn lab(e: LabError) -> RomiStatus {
    let s = RomiStatus::from(&e);
    fail(s, e.to_string())
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, RomiStatus> {
    if p.is_null() {
        return Err(fail(RomiStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(RomiStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, RomiStatus> {
    p.as_ref().ok_or_else(|| fail(RomiStatus::NullArgument, format!("{what} is null")))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, RomiStatus> {
    p.as_mut().ok_or_else(|| fail(RomiStatus::NullArgument, format!("{what} is null")))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], RomiStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(RomiStatus::NullArgument, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Copies `text` with a trailing NUL into `buf`. Returns the bytes needed
/// including the NUL; nothing is written when `buf_len` is too small.
unsafe fn copy_out(text: &str, buf: *mut c_char, buf_len: usize) -> usize {
    let needed = text.len() + 1;
    if !buf.is_null() && buf_len >= needed {
        ptr::copy_nonoverlapping(text.as_ptr() as *const c_char, buf, text.len());
        *buf.add(text.len()) = 0;
    }
    needed
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn romi_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Copies the calling thread's last error message into `buf` and returns the
/// buffer size required (1 when there is no error).
///
/// # Safety
/// `buf` must be null or point to `buf_len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn romi_last_error_message(buf: *mut c_char, buf_len: usize) -> usize {
    LAST_ERROR.with(|e| copy_out(&e.borrow(), buf, buf_len))
}

/// Default configuration.
///
/// # Safety
/// `out_config` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn romi_config_default(out_config: *mut *mut RomiConfig) -> RomiStatus {
    guard(|| {
        *out(out_config, "out_config")? = Box::into_raw(Box::new(RomiConfig(ExperimentConfig::default())));
        Ok(())
    })
}

/// Parses and validates a JSON configuration document.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out_config` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn romi_config_from_json(json: *const c_char, out_config: *mut *mut RomiConfig) -> RomiStatus {
    guard(|| {
        let text = str_arg(json, "json")?;
        let slot = out(out_config, "out_config")?;
        *slot = ptr::null_mut();
        let cfg = ExperimentConfig::from_json(text).map_err(lab)?;
        *slot = Box::into_raw(Box::new(RomiConfig(cfg)));
        Ok(())
    })
}

/// Writes the 16-character configuration hash; see [`romi_last_error_message`]
/// for the buffer convention. Fails with `BufferTooSmall` below 17 bytes.
///
/// # Safety
/// `config` must come from this library; `buf` must hold `buf_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn romi_config_hash(config: *const RomiConfig, buf: *mut c_char, buf_len: usize) -> RomiStatus {
    guard(|| {
        let cfg = handle(config, "config")?;
        let hash = cfg.0.hash();
        if buf.is_null() || copy_out(&hash, buf, buf_len) > buf_len {
            return Err(fail(RomiStatus::BufferTooSmall, format!("hash needs {} bytes", hash.len() + 1)));
        }
        Ok(())
    })
}

/// Sets the number of training epochs.
///
/// # Safety
/// `config` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn romi_config_set_epochs(config: *mut RomiConfig, epochs: usize) -> RomiStatus {
    guard(|| {
        let cfg = out(config, "config")?;
        if epochs == 0 {
            return Err(fail(RomiStatus::Config, "epochs must be >= 1"));
        }
        cfg.0.train.epochs = epochs;
        Ok(())
    })
}

/// # Safety
/// `config` must be null or come from this library, and not be used again.
#[no_mangle]
pub unsafe extern "C" fn romi_config_free(config: *mut RomiConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Generates (or loads, when the configuration names a file) the dataset for `seed`.
///
/// # Safety
/// `config` must come from this library and `out_dataset` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn romi_dataset_generate(config: *const RomiConfig, seed: u64, out_dataset: *mut *mut RomiDataset) -> RomiStatus {
    guard(|| {
        let cfg = handle(config, "config")?;
        let slot = out(out_dataset, "out_dataset")?;
        *slot = ptr::null_mut();
        let ds = obtain_dataset(&cfg.0, seed).map_err(lab)?;
        *slot = Box::into_raw(Box::new(RomiDataset(ds)));
        Ok(())
    })
}

/// Number of transitions, or 0 for a null handle.
///
/// # Safety
/// `dataset` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn romi_dataset_len(dataset: *const RomiDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.0.len())
}

/// # Safety
/// `dataset` must be null or come from this library, and not be used again.
#[no_mangle]
pub unsafe extern "C" fn romi_dataset_free(dataset: *mut RomiDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Pretrains the ensemble and trains one seed. With a non-null `out_dir` the
/// run directory (config, manifest, metrics, checkpoints) is written there.
/// A run that diverged still yields a handle and returns `Divergence`.
///
/// # Safety
/// Handles must come from this library; `out_dir` must be null or a
/// NUL-terminated path; `out_run` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn romi_train(
    config: *const RomiConfig,
    dataset: *const RomiDataset,
    seed: u64,
    out_dir: *const c_char,
    out_run: *mut *mut RomiRun,
) -> RomiStatus {
    guard(|| {
        let cfg = handle(config, "config")?;
        let ds = handle(dataset, "dataset")?;
        let slot = out(out_run, "out_run")?;
        *slot = ptr::null_mut();
        let output = if out_dir.is_null() {
            cfg.0.validate().map_err(lab)?;
            let ens = pretrain_ensemble(&cfg.0.train, &ds.0, seed).map_err(lab)?;
            train_with_pretrained(&cfg.0.train, &ds.0, seed, &ens).map_err(lab)?
        } else {
            let dir = PathBuf::from(str_arg(out_dir, "out_dir")?);
            run_training(&cfg.0, seed, &dir, Some(&ds.0), None).map_err(lab)?.output
        };
        let divergence = output.divergence.clone();
        *slot = Box::into_raw(Box::new(RomiRun(output)));
        match divergence {
            Some(reason) => Err(fail(RomiStatus::Divergence, reason)),
            None => Ok(()),
        }
    })
}

/// Number of recorded epochs, or 0 for a null handle.
///
/// # Safety
/// `run` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn romi_run_epochs(run: *const RomiRun) -> usize {
    run.as_ref().map_or(0, |r| r.0.metrics.len())
}

/// Latest recorded value of a named metric, such as `q_mean` or `return`.
///
/// # Safety
/// `run` must come from this library, `key` be NUL-terminated and `out_value` valid.
#[no_mangle]
pub unsafe extern "C" fn romi_run_final_metric(run: *const RomiRun, key: *const c_char, out_value: *mut f64) -> RomiStatus {
    guard(|| {
        let r = handle(run, "run")?;
        let k = str_arg(key, "key")?;
        let v = out(out_value, "out_value")?;
        *v = r.0.final_metric(k).ok_or_else(|| fail(RomiStatus::NotFound, format!("no metric named {k:?}")))?;
        Ok(())
    })
}

/// Deterministic action of the trained policy at one state.
///
/// # Safety
/// `state` must hold `state_len` doubles and `action` `action_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn romi_run_policy_action(
    run: *const RomiRun,
    state: *const f64,
    state_len: usize,
    action: *mut f64,
    action_len: usize,
) -> RomiStatus {
    guard(|| {
        let r = handle(run, "run")?;
        let s = slice(state, state_len, "state")?;
        let policy = &r.0.policy;
        if action_len != policy.action_dim {
            return Err(fail(RomiStatus::Config, format!("action buffer holds {action_len}, policy emits {}", policy.action_dim)));
        }
        if action.is_null() {
            return Err(fail(RomiStatus::NullArgument, "action is null"));
        }
        let view = ArrayView2::from_shape((1, s.len()), s).map_err(|e| fail(RomiStatus::Config, e.to_string()))?;
        let a = policy.mean_action(view).map_err(lab)?;
        std::slice::from_raw_parts_mut(action, action_len).copy_from_slice(&a.row(0).to_vec());
        Ok(())
    })
}

/// # Safety
/// `run` must be null or come from this library, and not be used again.
#[no_mangle]
pub unsafe extern "C" fn romi_run_free(run: *mut RomiRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Exact worst case over a Wasserstein ball against the ball surrogate and the
/// nominal expectation. `metric` is row-major `n * n`.
///
/// # Safety
/// `nominal` and `values` must hold `n` doubles, `metric` `n * n`, and
/// `out_report` must be valid.
#[no_mangle]
pub unsafe extern "C" fn romi_sandwich_check(
    nominal: *const f64,
    values: *const f64,
    metric: *const f64,
    n: usize,
    xi: f64,
    out_report: *mut RomiSandwich,
) -> RomiStatus {
    guard(|| {
        let p = slice(nominal, n, "nominal")?.to_vec();
        let v = slice(values, n, "values")?.to_vec();
        let d = slice(metric, n * n, "metric")?;
        let rep = out(out_report, "out_report")?;
        let rows = d.chunks(n.max(1)).map(|r| r.to_vec()).collect();
        let problem = WassersteinBallProblem::new(p, v, rows, xi).map_err(lab)?;
        let r = sandwich_check(&problem).map_err(lab)?;
        *rep = RomiSandwich {
            robust_min: r.robust_min,
            surrogate: r.surrogate,
            nominal: r.nominal,
            gap: r.gap,
        };
        Ok(())
    })
}

/// Runs the oracle suite; `Oracle` is returned when any check fails.
///
/// # Safety
/// `out_passed` must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn romi_verify(sandwich_instances: usize, q_bound_instances: usize, seed: u64, out_passed: *mut bool) -> RomiStatus {
    guard(|| {
        let report = verify_all(sandwich_instances, q_bound_instances, seed).map_err(lab)?;
        if let Some(p) = out_passed.as_mut() {
            *p = report.passed;
        }
        if !report.passed {
            return Err(fail(RomiStatus::Oracle, "oracle suite reported violations"));
        }
        Ok(())
    })
}
