//! C ABI over `vcl`.
//!
//! Every fallible call returns a [`VclStatus`]; on failure the message is
//! kept per thread and read back with [`vcl_last_error_message`]. Objects
//! cross the boundary as opaque pointers that the caller releases with the
//! matching `_free` function. Panics never unwind into C: they are caught
//! and reported as [`VclStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use vcl::eval::{MetricName, MetricsRecord};
use vcl::harness::{self, ExperimentConfig, Overrides, RunOptions, DATA_DIR_ENV};
use vcl::oracle::{sequential_vi_update, DiagonalGaussian};
use vcl::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VclStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    MissingData = 4,
    Io = 5,
    Numerical = 6,
    Format = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VclMetric {
    Accuracy = 0,
    AvgAccuracy = 1,
    TestLl = 2,
    ClassifierUncertainty = 3,
    OracleMeanError = 4,
    OraclePrecisionError = 5,
}

/// One metrics row. `eval_task` is −1 for aggregate metrics.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VclRecord {
    pub seed: u64,
    pub tasks_seen: u64,
    pub eval_task: i64,
    pub metric: VclMetric,
    pub value: f64,
}

/// A resolved experiment configuration.
pub struct VclConfig(ExperimentConfig);

/// Metrics of a finished or interrupted run.
pub struct VclRunResult {
    records: Vec<VclRecord>,
    complete: bool,
}

/// Online diagonal posterior for Bayesian linear regression.
pub struct VclOracle {
    q: DiagonalGaussian,
    noise_sd: f64,
}

struct Failure(VclStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Config(_) => VclStatus::Config,
            Error::MissingData(_) => VclStatus::MissingData,
            Error::Io(_) | Error::Csv(_) => VclStatus::Io,
            Error::Divergence { .. } | Error::Domain { .. } => VclStatus::Numerical,
            Error::Format(_) | Error::Truncated { .. } | Error::Json(_) => VclStatus::Format,
            _ => VclStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> VclStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            VclStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(panic) => {
            let message = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {message}"));
            VclStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(VclStatus::NullPointer, format!("{what} is null"))
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure(VclStatus::InvalidArgument, message.into())
}

unsafe fn opt_str<'a>(p: *const c_char, what: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        return Ok(None);
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Some)
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn handle_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Copies `s` into `buf` (NUL-terminated, truncated to `len`) and returns
/// the full length without the terminator.
unsafe fn copy_out(s: &[u8], buf: *mut c_char, len: usize) -> usize {
    if !buf.is_null() && len > 0 {
        let n = s.len().min(len - 1);
        ptr::copy_nonoverlapping(s.as_ptr().cast(), buf, n);
        *buf.add(n) = 0;
    }
    s.len()
}

fn metric(m: MetricName) -> VclMetric {
    match m {
        MetricName::Accuracy => VclMetric::Accuracy,
        MetricName::AvgAccuracy => VclMetric::AvgAccuracy,
        MetricName::TestLl => VclMetric::TestLl,
        MetricName::ClassifierUncertainty => VclMetric::ClassifierUncertainty,
        MetricName::OracleMeanError => VclMetric::OracleMeanError,
        MetricName::OraclePrecisionError => VclMetric::OraclePrecisionError,
    }
}

fn record(r: &MetricsRecord) -> VclRecord {
    VclRecord {
        seed: r.seed,
        tasks_seen: r.tasks_seen as u64,
        eval_task: r.eval_task.map_or(-1, |t| t as i64),
        metric: metric(r.metric_name),
        value: r.value,
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn vcl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` and returns
/// its full length (0 when the last call succeeded). Pass a null `buf` to
/// query the length.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn vcl_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| match &*e.borrow() {
        Some(msg) => copy_out(msg.as_bytes(), buf, len),
        None => copy_out(b"", buf, len),
    })
}

/// Resolves a configuration: the experiment/method preset, then the TOML
/// file at `path` (may be null), then the non-null arguments. The data
/// directory defaults to `$VCL_DATA_DIR`.
///
/// # Safety
/// String arguments must be null or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vcl_config_resolve(
    path: *const c_char,
    experiment: *const c_char,
    method: *const c_char,
    out_dir: *const c_char,
    out: *mut *mut VclConfig,
) -> VclStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let file = opt_str(path, "path")?.map(PathBuf::from);
        let overrides = Overrides {
            experiment: opt_str(experiment, "experiment")?.map(str::parse).transpose()?,
            method: opt_str(method, "method")?.map(str::parse).transpose()?,
            out: opt_str(out_dir, "out_dir")?.map(PathBuf::from),
            ..Overrides::default()
        };
        let env = std::env::var_os(DATA_DIR_ENV).map(PathBuf::from);
        let cfg = ExperimentConfig::resolve(file.as_deref(), &overrides, env)?;
        *out = Box::into_raw(Box::new(VclConfig(cfg)));
        Ok(())
    })
}

/// Replaces the seed list.
///
/// # Safety
/// `cfg` must come from [`vcl_config_resolve`]; `seeds` must hold `n` values.
#[no_mangle]
pub unsafe extern "C" fn vcl_config_set_seeds(cfg: *mut VclConfig, seeds: *const u64, n: usize) -> VclStatus {
    guard(|| {
        let cfg = handle_mut(cfg, "cfg")?;
        if seeds.is_null() {
            return Err(null("seeds"));
        }
        let mut next = cfg.0.clone();
        next.seeds = std::slice::from_raw_parts(seeds, n).to_vec();
        next.validate()?;
        cfg.0 = next;
        Ok(())
    })
}

/// Sets the epoch count per task.
///
/// # Safety
/// `cfg` must come from [`vcl_config_resolve`].
#[no_mangle]
pub unsafe extern "C" fn vcl_config_set_epochs(cfg: *mut VclConfig, epochs: usize) -> VclStatus {
    guard(|| {
        let cfg = handle_mut(cfg, "cfg")?;
        let mut next = cfg.0.clone();
        next.train.epochs = epochs;
        next.validate()?;
        cfg.0 = next;
        Ok(())
    })
}

/// Sets λ; rejected for methods without one.
///
/// # Safety
/// `cfg` must come from [`vcl_config_resolve`].
#[no_mangle]
pub unsafe extern "C" fn vcl_config_set_lambda(cfg: *mut VclConfig, lambda: f64) -> VclStatus {
    guard(|| {
        let cfg = handle_mut(cfg, "cfg")?;
        let mut next = cfg.0.clone();
        next.lambda = Some(lambda);
        next.validate()?;
        cfg.0 = next;
        Ok(())
    })
}

/// Writes the configuration hash (64 hex digits) into `buf` and returns
/// its length.
///
/// # Safety
/// `cfg` must come from [`vcl_config_resolve`]; `buf` must be null or hold
/// `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn vcl_config_hash(cfg: *const VclConfig, buf: *mut c_char, len: usize) -> usize {
    match cfg.as_ref() {
        Some(c) => copy_out(c.0.hash().as_bytes(), buf, len),
        None => 0,
    }
}

/// # Safety
/// `cfg` must be null or come from [`vcl_config_resolve`], and not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn vcl_config_free(cfg: *mut VclConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Runs (or resumes) the experiment in the configured output directory.
/// `stop_after` > 0 stops after that many further tasks; the result then
/// reports itself incomplete and a later call resumes.
///
/// # Safety
/// `cfg` must come from [`vcl_config_resolve`]; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vcl_run(cfg: *const VclConfig, stop_after: usize, out: *mut *mut VclRunResult) -> VclStatus {
    guard(|| {
        let cfg = handle(cfg, "cfg")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let opts = RunOptions {
            stop_after: (stop_after > 0).then_some(stop_after),
        };
        let result = harness::run(&cfg.0, &opts)?;
        *out = Box::into_raw(Box::new(VclRunResult {
            records: result.records.iter().map(record).collect(),
            complete: result.complete,
        }));
        Ok(())
    })
}

/// # Safety
/// `result` must come from [`vcl_run`].
#[no_mangle]
pub unsafe extern "C" fn vcl_result_len(result: *const VclRunResult) -> usize {
    result.as_ref().map_or(0, |r| r.records.len())
}

/// # Safety
/// `result` must come from [`vcl_run`].
#[no_mangle]
pub unsafe extern "C" fn vcl_result_complete(result: *const VclRunResult) -> bool {
    result.as_ref().is_some_and(|r| r.complete)
}

/// Copies record `index` into `out`.
///
/// # Safety
/// `result` must come from [`vcl_run`]; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vcl_result_get(result: *const VclRunResult, index: usize, out: *mut VclRecord) -> VclStatus {
    guard(|| {
        let r = handle(result, "result")?;
        let out = handle_mut(out, "out")?;
        *out = *r
            .records
            .get(index)
            .ok_or_else(|| invalid(format!("record {index} of {}", r.records.len())))?;
        Ok(())
    })
}

/// # Safety
/// `result` must be null or come from [`vcl_run`], and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn vcl_result_free(result: *mut VclRunResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}

/// A zero-mean isotropic prior with the given precision.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vcl_oracle_new(dim: usize, prior_precision: f64, noise_sd: f64, out: *mut *mut VclOracle) -> VclStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if dim == 0 {
            return Err(invalid("dimension must be at least 1"));
        }
        if !(prior_precision > 0.0 && prior_precision.is_finite()) || !(noise_sd > 0.0 && noise_sd.is_finite()) {
            return Err(invalid("prior precision and noise sd must be positive and finite"));
        }
        let q = DiagonalGaussian::isotropic(vec![0.0; dim], prior_precision)?;
        *out = Box::into_raw(Box::new(VclOracle { q, noise_sd }));
        Ok(())
    })
}

/// Absorbs one observation `(x, y)`; `x` holds `dim` values.
///
/// # Safety
/// `oracle` must come from [`vcl_oracle_new`]; `x` must hold `dim` values.
#[no_mangle]
pub unsafe extern "C" fn vcl_oracle_update(oracle: *mut VclOracle, x: *const f64, dim: usize, y: f64) -> VclStatus {
    guard(|| {
        let o = handle_mut(oracle, "oracle")?;
        if x.is_null() {
            return Err(null("x"));
        }
        if dim != o.q.dim() {
            return Err(invalid(format!("x has {dim} entries, the model {}", o.q.dim())));
        }
        o.q = sequential_vi_update(&o.q, std::slice::from_raw_parts(x, dim), y, o.noise_sd)?;
        Ok(())
    })
}

/// # Safety
/// `oracle` must come from [`vcl_oracle_new`].
#[no_mangle]
pub unsafe extern "C" fn vcl_oracle_dim(oracle: *const VclOracle) -> usize {
    oracle.as_ref().map_or(0, |o| o.q.dim())
}

unsafe fn copy_vec(src: &[f64], out: *mut f64, dim: usize) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    if dim != src.len() {
        return Err(invalid(format!("buffer holds {dim} entries, the model {}", src.len())));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), out, dim);
    Ok(())
}

/// Writes the posterior mean into `out[0..dim]`.
///
/// # Safety
/// `oracle` must come from [`vcl_oracle_new`]; `out` must hold `dim` values.
#[no_mangle]
pub unsafe extern "C" fn vcl_oracle_mean(oracle: *const VclOracle, out: *mut f64, dim: usize) -> VclStatus {
    guard(|| copy_vec(&handle(oracle, "oracle")?.q.mean, out, dim))
}

/// Writes the posterior precisions into `out[0..dim]`.
///
/// # Safety
/// `oracle` must come from [`vcl_oracle_new`]; `out` must hold `dim` values.
#[no_mangle]
pub unsafe extern "C" fn vcl_oracle_precision(oracle: *const VclOracle, out: *mut f64, dim: usize) -> VclStatus {
    guard(|| copy_vec(&handle(oracle, "oracle")?.q.precision, out, dim))
}

/// # Safety
/// `oracle` must be null or come from [`vcl_oracle_new`], and not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn vcl_oracle_free(oracle: *mut VclOracle) {
    if !oracle.is_null() {
        drop(Box::from_raw(oracle));
    }
}

/// Runs the oracle and finite-difference suites. `total` and `failed`
/// (either may be null) receive the check counts.
///
/// # Safety
/// `total` and `failed` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn vcl_verify_oracles(seed: u64, total: *mut usize, failed: *mut usize) -> VclStatus {
    guard(|| {
        let mut checks = vcl::verify::oracle_suite(seed)?;
        checks.extend(vcl::verify::gradient_suite(seed)?);
        if let Some(t) = total.as_mut() {
            *t = checks.len();
        }
        if let Some(f) = failed.as_mut() {
            *f = checks.iter().filter(|c| !c.passed()).count();
        }
        Ok(())
    })
}
