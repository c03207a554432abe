//! C ABI for the monoclue pipeline.
//!
//! Every fallible call returns a [`McStatus`]; on failure the message is
//! available from [`mc_last_error`] on the same thread until the next call.
//! Handles are opaque and must be released with their `_free` function.
//! Strings handed out by the library are released with [`mc_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;

use monoclue_core::config::PipelineConfig;
use monoclue_core::pipeline::{load_inputs, run_pipeline, PipelineOutput};
use monoclue_core::suite::{run_suites, SuiteKind};
use monoclue_core::tensor::{read_header, Real};
use monoclue_core::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum McStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Io = 4,
    Format = 5,
    Shape = 6,
    InvalidInput = 7,
    BufferTooSmall = 8,
    OutOfRange = 9,
    Panic = 10,
}

pub const MC_SUITE_ORACLES: u32 = 1;
pub const MC_SUITE_GRADIENTS: u32 = 2;
pub const MC_SUITE_ABLATION: u32 = 4;

/// Opaque pipeline configuration.
pub struct McConfig(PipelineConfig);

/// Opaque result of one pipeline run.
pub struct McRun(RunData);

enum RunData {
    F32(Box<PipelineOutput<f32>>),
    F64(Box<PipelineOutput<f64>>),
}

macro_rules! with_output {
    ($run:expr, |$o:ident| $body:expr) => {
        match &$run.0 {
            RunData::F32($o) => $body,
            RunData::F64($o) => $body,
        }
    };
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior NUL");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> McStatus {
    match e {
        Error::Stage { source, .. } => status_of(source),
        Error::Config(_) | Error::VariantUnknown(_) => McStatus::Config,
        Error::Io { .. } => McStatus::Io,
        Error::Format(_) | Error::Json(_) => McStatus::Format,
        Error::ShapeMismatch { .. }
        | Error::LengthMismatch { .. }
        | Error::ChannelMismatch { .. }
        | Error::LevelMismatch { .. }
        | Error::ExtentsTooSmall(_) => McStatus::Shape,
        _ => McStatus::InvalidInput,
    }
}

fn fail(status: McStatus, msg: impl Into<String>) -> McStatus {
    set_error(msg.into());
    status
}

/// Clears the error slot, runs `f` and converts errors and panics.
fn guard(f: impl FnOnce() -> Result<(), McStatus>) -> McStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => McStatus::Ok,
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(McStatus::Panic, msg)
        }
    }
}

fn core<T>(r: monoclue_core::Result<T>) -> Result<T, McStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, McStatus> {
    if p.is_null() {
        return Err(fail(McStatus::NullPointer, format!("{what} is NULL")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(McStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, McStatus> {
    p.as_ref().ok_or_else(|| fail(McStatus::NullPointer, format!("{what} is NULL")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, McStatus> {
    p.as_mut().ok_or_else(|| fail(McStatus::NullPointer, format!("{what} is NULL")))
}

fn c_string(s: String) -> Result<*mut c_char, McStatus> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| fail(McStatus::Format, "string contains NUL"))
}

/// Copies `src` into `buf` when it fits.
unsafe fn copy_out(src: impl ExactSizeIterator<Item = f64>, buf: *mut f64, cap: usize) -> Result<(), McStatus> {
    let n = src.len();
    if buf.is_null() || cap < n {
        return Err(fail(McStatus::BufferTooSmall, format!("need {n} elements, have {cap}")));
    }
    let dst = std::slice::from_raw_parts_mut(buf, n);
    for (d, s) in dst.iter_mut().zip(src) {
        *d = s;
    }
    Ok(())
}

/// Message for the last failed call on this thread, or NULL. Valid until
/// the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn mc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static version string.
#[no_mangle]
pub extern "C" fn mc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn mc_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// # Safety
/// `out` must be valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn mc_config_default(out: *mut *mut McConfig) -> McStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = Box::into_raw(Box::new(McConfig(PipelineConfig::default())));
        Ok(())
    })
}

/// Parses and validates a JSON configuration; absent fields take defaults.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn mc_config_from_json(json: *const c_char, out: *mut *mut McConfig) -> McStatus {
    guard(|| {
        let text = str_arg(json, "json")?;
        let out = out_arg(out, "out")?;
        let cfg = core(PipelineConfig::from_json(text))?;
        *out = Box::into_raw(Box::new(McConfig(cfg)));
        Ok(())
    })
}

/// Applies `MONOCLUE_SEED` from the environment, if set.
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mc_config_apply_env(cfg: *mut McConfig) -> McStatus {
    guard(|| {
        let cfg = out_arg(cfg, "cfg")?;
        core(cfg.0.apply_env())
    })
}

/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mc_config_set_seed(cfg: *mut McConfig, seed: u64) -> McStatus {
    guard(|| {
        out_arg(cfg, "cfg")?.0.seed = seed;
        Ok(())
    })
}

/// Pretty JSON; free with [`mc_string_free`].
///
/// # Safety
/// `cfg` must be a live handle; `out` valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn mc_config_to_json(cfg: *const McConfig, out: *mut *mut c_char) -> McStatus {
    guard(|| {
        let cfg = ref_arg(cfg, "cfg")?;
        let out = out_arg(out, "out")?;
        *out = c_string(cfg.0.to_json())?;
        Ok(())
    })
}

/// # Safety
/// `cfg` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mc_config_free(cfg: *mut McConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

fn run_at<T: Real>(cfg: &PipelineConfig, input: Option<&Path>) -> monoclue_core::Result<PipelineOutput<T>> {
    run_pipeline(cfg, &load_inputs::<T>(cfg, input)?)
}

/// Runs the pipeline at the configured precision. `input_dir` may be NULL,
/// in which case the configured synthetic scene is used.
///
/// # Safety
/// `cfg` must be a live handle; `input_dir` NULL or NUL-terminated; `out`
/// valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn mc_run_pipeline(cfg: *const McConfig, input_dir: *const c_char, out: *mut *mut McRun) -> McStatus {
    guard(|| {
        let cfg = &ref_arg(cfg, "cfg")?.0;
        let input = if input_dir.is_null() {
            None
        } else {
            Some(PathBuf::from(str_arg(input_dir, "input_dir")?))
        };
        let out = out_arg(out, "out")?;
        let data = match cfg.precision {
            monoclue_core::config::Precision::F32 => RunData::F32(Box::new(core(run_at(cfg, input.as_deref()))?)),
            monoclue_core::config::Precision::F64 => RunData::F64(Box::new(core(run_at(cfg, input.as_deref()))?)),
        };
        *out = Box::into_raw(Box::new(McRun(data)));
        Ok(())
    })
}

/// Writes every artifact of the run under `out_dir`.
///
/// # Safety
/// `run` must be a live handle; `out_dir` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn mc_run_write(run: *const McRun, out_dir: *const c_char) -> McStatus {
    guard(|| {
        let run = ref_arg(run, "run")?;
        let dir = PathBuf::from(str_arg(out_dir, "out_dir")?);
        with_output!(run, |o| core(o.write(&dir)).map(drop))
    })
}

/// The run report as JSON; free with [`mc_string_free`].
///
/// # Safety
/// `run` must be a live handle; `out` valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn mc_run_report_json(run: *const McRun, out: *mut *mut c_char) -> McStatus {
    guard(|| {
        let run = ref_arg(run, "run")?;
        let out = out_arg(out, "out")?;
        let report = with_output!(run, |o| &o.report);
        let text = serde_json::to_string_pretty(report).map_err(|e| fail(McStatus::Format, e.to_string()))?;
        *out = c_string(text)?;
        Ok(())
    })
}

/// Number of pyramid levels in the run, or 0 for NULL.
///
/// # Safety
/// `run` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mc_run_level_count(run: *const McRun) -> usize {
    match run.as_ref() {
        Some(r) => with_output!(r, |o| o.similarity.len()),
        None => 0,
    }
}

/// Copies the similarity map of `level` (row-major) into `buf`. `height`
/// and `width` are written even when the buffer is too small, so a NULL
/// buffer can be used to query the size.
///
/// # Safety
/// `run` must be a live handle; `buf` NULL or valid for `cap` doubles;
/// `height` and `width` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn mc_run_similarity(
    run: *const McRun,
    level: usize,
    buf: *mut f64,
    cap: usize,
    height: *mut usize,
    width: *mut usize,
) -> McStatus {
    guard(|| {
        let run = ref_arg(run, "run")?;
        let (h_out, w_out) = (out_arg(height, "height")?, out_arg(width, "width")?);
        with_output!(run, |o| {
            let s = o
                .similarity
                .get(level)
                .ok_or_else(|| fail(McStatus::OutOfRange, format!("level {level} of {}", o.similarity.len())))?;
            *h_out = s.height;
            *w_out = s.width;
            copy_out(s.scores.iter().map(|v| v.as_f64()), buf, cap)
        })
    })
}

/// Copies the decoded `N_q × C` query matrix into `buf`, sizes as in
/// [`mc_run_similarity`].
///
/// # Safety
/// As for [`mc_run_similarity`].
#[no_mangle]
pub unsafe extern "C" fn mc_run_queries(run: *const McRun, buf: *mut f64, cap: usize, rows: *mut usize, cols: *mut usize) -> McStatus {
    guard(|| {
        let run = ref_arg(run, "run")?;
        let (r_out, c_out) = (out_arg(rows, "rows")?, out_arg(cols, "cols")?);
        with_output!(run, |o| {
            let q = &o.bank.queries;
            *r_out = q.rows();
            *c_out = q.cols();
            copy_out(q.data().iter().map(|v| v.as_f64()), buf, cap)
        })
    })
}

/// Copies the `N_q` query confidences into `buf`.
///
/// # Safety
/// `run` must be a live handle; `buf` NULL or valid for `cap` doubles;
/// `count` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn mc_run_confidences(run: *const McRun, buf: *mut f64, cap: usize, count: *mut usize) -> McStatus {
    guard(|| {
        let run = ref_arg(run, "run")?;
        let n_out = out_arg(count, "count")?;
        with_output!(run, |o| {
            *n_out = o.bank.confidences.len();
            copy_out(o.bank.confidences.iter().map(|v| v.as_f64()), buf, cap)
        })
    })
}

/// # Safety
/// `run` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mc_run_free(run: *mut McRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Runs the suites selected by `MC_SUITE_*` bits. `passed` receives the
/// verdict; `json`, when not NULL, receives the full report (free with
/// [`mc_string_free`]). A failing suite is not an error status.
///
/// # Safety
/// `passed` valid for a write; `json` NULL or valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn mc_suite_run(suites: u32, oracle_seeds: u64, passed: *mut bool, json: *mut *mut c_char) -> McStatus {
    guard(|| {
        let passed = out_arg(passed, "passed")?;
        let kinds: Vec<SuiteKind> = [
            (MC_SUITE_ORACLES, SuiteKind::Oracles),
            (MC_SUITE_GRADIENTS, SuiteKind::Gradients),
            (MC_SUITE_ABLATION, SuiteKind::Ablation),
        ]
        .into_iter()
        .filter(|(bit, _)| suites & bit != 0)
        .map(|(_, k)| k)
        .collect();
        if kinds.is_empty() {
            return Err(fail(McStatus::Config, "no suite selected"));
        }
        let report = core(run_suites(&kinds, 0..oracle_seeds))?;
        *passed = report.passed;
        if let Some(json) = json.as_mut() {
            let text = serde_json::to_string_pretty(&report).map_err(|e| fail(McStatus::Format, e.to_string()))?;
            *json = c_string(text)?;
        }
        Ok(())
    })
}

/// Reads an MCT1 header. `dtype` receives 0 for f32 and 1 for f64; `rank`
/// is always written; extents go to `dims` when `cap ≥ rank`.
///
/// # Safety
/// `path` NUL-terminated; `dtype` and `rank` valid for writes; `dims` NULL
/// or valid for `cap` elements.
#[no_mangle]
pub unsafe extern "C" fn mc_tensor_header(
    path: *const c_char,
    dtype: *mut u8,
    dims: *mut u32,
    cap: usize,
    rank: *mut usize,
) -> McStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let (d_out, r_out) = (out_arg(dtype, "dtype")?, out_arg(rank, "rank")?);
        let h = core(read_header(path))?;
        *d_out = h.dtype.code();
        *r_out = h.dims.len();
        if dims.is_null() || cap < h.dims.len() {
            return Err(fail(McStatus::BufferTooSmall, format!("need {} extents, have {cap}", h.dims.len())));
        }
        let dst = std::slice::from_raw_parts_mut(dims, h.dims.len());
        for (d, &s) in dst.iter_mut().zip(&h.dims) {
            *d = s as u32;
        }
        Ok(())
    })
}
