//! C ABI over `scene-mtl`.
//!
//! Every function returns an [`SmtlStatus`]; results come back through out
//! pointers. On failure the message is kept per thread and can be fetched with
//! [`smtl_last_error`]. Handles are opaque and must be released with their
//! matching `_free` function; strings returned by the library are released with
//! [`smtl_string_free`]. Panics are caught at the boundary and reported as
//! `SMTL_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use scene_mtl::curriculum::log_kernel;
use scene_mtl::experiments::{evaluate, run, CheckpointKind, ExperimentConfig, Profile, Protocol, RunManifest};
use scene_mtl::metrics::{MetricsReport, Split};
use scene_mtl::trainers::Regime;
use scene_mtl::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SmtlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Corrupt = 5,
    NonFinite = 6,
    Locked = 7,
    ArchitectureMismatch = 8,
    Internal = 9,
    NotFound = 10,
    Panic = 11,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SmtlSplit {
    Sd = 0,
    Td = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SmtlCheckpoint {
    BestGraph = 0,
    BestCaption = 1,
}

/// One evaluation: caption scores, then interaction scores.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SmtlMetrics {
    /// 0 for the source domain, 1 for the target domain.
    pub split: u32,
    pub n_samples: u64,
    pub bleu4: f64,
    pub cider: f64,
    pub acc: f64,
    pub map: f64,
    pub recall: f64,
}

impl From<&MetricsReport> for SmtlMetrics {
    fn from(r: &MetricsReport) -> Self {
        Self {
            split: match r.split {
                Split::Sd => 0,
                Split::Td => 1,
            },
            n_samples: r.n_samples as u64,
            bleu4: r.bleu4,
            cider: r.cider,
            acc: r.acc,
            map: r.map,
            recall: r.recall,
        }
    }
}

/// Experiment configuration.
pub struct SmtlConfig(ExperimentConfig);

/// Manifest of a finished run.
pub struct SmtlManifest(RunManifest);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SmtlStatus {
    match e {
        Error::InvalidArgument(_) | Error::Shape(_) => SmtlStatus::InvalidArgument,
        Error::Config { .. } => SmtlStatus::Config,
        Error::NonFinite { .. } => SmtlStatus::NonFinite,
        Error::Invariant(_) => SmtlStatus::Internal,
        Error::ArchitectureMismatch { .. } => SmtlStatus::ArchitectureMismatch,
        Error::Corrupt { .. } | Error::Json(_) => SmtlStatus::Corrupt,
        Error::Locked(_) => SmtlStatus::Locked,
        Error::Io { .. } => SmtlStatus::Io,
    }
}

struct Fail(SmtlStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(SmtlStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, recording its error or panic for `smtl_last_error`.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SmtlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            SmtlStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            set_error(format!("panic: {msg}"));
            SmtlStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail(SmtlStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

fn owned_string(s: String) -> Result<*mut c_char, Fail> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Fail(SmtlStatus::Internal, "string contains a NUL byte".into()))
}

/// Message of the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn smtl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn smtl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Writes the zero-sum LoG kernel of `sigma` and `radius` row-major into `out`,
/// which must hold `(2 * radius + 1)^2` values.
///
/// # Safety
/// `out` must point to `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn smtl_log_kernel(sigma: f64, radius: usize, out: *mut f64, out_len: usize) -> SmtlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let k = log_kernel(sigma, radius)?;
        let w = k.weights();
        if out_len < w.len() {
            return Err(Fail(SmtlStatus::InvalidArgument, format!("out holds {out_len} values, kernel has {}", w.len())));
        }
        std::slice::from_raw_parts_mut(out, w.len()).copy_from_slice(w);
        Ok(())
    })
}

/// Default configuration. `profile` is "desk" or "paper", `regime` one of MTL_FT,
/// MTL_V, MTL_KD, MTL_KD_FT and `protocol` UDA or FEW.
///
/// # Safety
/// String arguments must be valid NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn smtl_config_new(
    profile: *const c_char,
    regime: *const c_char,
    protocol: *const c_char,
    out: *mut *mut SmtlConfig,
) -> SmtlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let profile: Profile = str_arg(profile, "profile")?.parse()?;
        let r = str_arg(regime, "regime")?;
        let regime = Regime::parse(r).ok_or_else(|| Fail(SmtlStatus::Config, format!("`{r}` is not a regime")))?;
        let p = str_arg(protocol, "protocol")?;
        let protocol = Protocol::parse(p).ok_or_else(|| Fail(SmtlStatus::Config, format!("`{p}` is not UDA or FEW")))?;
        *out = Box::into_raw(Box::new(SmtlConfig(ExperimentConfig::new(profile, regime, protocol))));
        Ok(())
    })
}

/// Parses `key=value` text. Unknown keys fail with `SMTL_STATUS_CONFIG`.
///
/// # Safety
/// `text` must be a valid NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn smtl_config_parse(text: *const c_char, out: *mut *mut SmtlConfig) -> SmtlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = ExperimentConfig::parse(str_arg(text, "text")?, None)?;
        *out = Box::into_raw(Box::new(SmtlConfig(cfg)));
        Ok(())
    })
}

/// Serialises the configuration as `key=value` text. Free with `smtl_string_free`.
///
/// # Safety
/// `cfg` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn smtl_config_to_text(cfg: *const SmtlConfig, out: *mut *mut c_char) -> SmtlStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| null("cfg"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = owned_string(cfg.0.to_text())?;
        Ok(())
    })
}

/// # Safety
/// `cfg` must be a live handle; `dir` a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn smtl_config_set_output_dir(cfg: *mut SmtlConfig, dir: *const c_char) -> SmtlStatus {
    guard(|| {
        let cfg = cfg.as_mut().ok_or_else(|| null("cfg"))?;
        cfg.0.output_dir = PathBuf::from(str_arg(dir, "dir")?);
        Ok(())
    })
}

/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn smtl_config_set_seed(cfg: *mut SmtlConfig, seed: u64) -> SmtlStatus {
    guard(|| {
        cfg.as_mut().ok_or_else(|| null("cfg"))?.0.seed = seed;
        Ok(())
    })
}

/// # Safety
/// `cfg` must be null or a handle from this library not freed already.
#[no_mangle]
pub unsafe extern "C" fn smtl_config_free(cfg: *mut SmtlConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Runs the configured experiment in its output directory. A failed run writes
/// its manifest to disk but returns an error status and no handle.
///
/// # Safety
/// `cfg` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn smtl_run(cfg: *const SmtlConfig, out: *mut *mut SmtlManifest) -> SmtlStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| null("cfg"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = Box::into_raw(Box::new(SmtlManifest(run(&cfg.0)?)));
        Ok(())
    })
}

/// Reads `manifest.json` from a run directory, checking it against the stored config.
///
/// # Safety
/// `dir` must be a valid NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn smtl_manifest_read(dir: *const c_char, out: *mut *mut SmtlManifest) -> SmtlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let m = RunManifest::read(&PathBuf::from(str_arg(dir, "dir")?))?;
        *out = Box::into_raw(Box::new(SmtlManifest(m)));
        Ok(())
    })
}

/// # Safety
/// `m` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn smtl_manifest_is_success(m: *const SmtlManifest) -> bool {
    m.as_ref().is_some_and(|m| m.0.is_success())
}

/// Final report of the BG or BC checkpoint on one split. `SMTL_STATUS_NOT_FOUND`
/// if the run has no such report.
///
/// # Safety
/// `m` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn smtl_manifest_report(
    m: *const SmtlManifest,
    checkpoint: SmtlCheckpoint,
    split: SmtlSplit,
    out: *mut SmtlMetrics,
) -> SmtlStatus {
    guard(|| {
        let m = m.as_ref().ok_or_else(|| null("manifest"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let kind = match checkpoint {
            SmtlCheckpoint::BestGraph => CheckpointKind::Bg,
            SmtlCheckpoint::BestCaption => CheckpointKind::Bc,
        };
        let split = match split {
            SmtlSplit::Sd => Split::Sd,
            SmtlSplit::Td => Split::Td,
        };
        let r = m.0.report(kind, split).ok_or_else(|| Fail(SmtlStatus::NotFound, format!("no {} report on {}", kind.as_str(), split.as_str())))?;
        *out = r.into();
        Ok(())
    })
}

/// The manifest as JSON. Free with `smtl_string_free`.
///
/// # Safety
/// `m` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn smtl_manifest_to_json(m: *const SmtlManifest, out: *mut *mut c_char) -> SmtlStatus {
    guard(|| {
        let m = m.as_ref().ok_or_else(|| null("manifest"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let json = serde_json::to_string_pretty(&m.0).map_err(Error::from)?;
        *out = owned_string(json)?;
        Ok(())
    })
}

/// # Safety
/// `m` must be null or a handle from this library not freed already.
#[no_mangle]
pub unsafe extern "C" fn smtl_manifest_free(m: *mut SmtlManifest) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Scores a saved checkpoint on the validation split of a saved dataset without
/// modifying either.
///
/// # Safety
/// Paths must be valid NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn smtl_evaluate(checkpoint: *const c_char, dataset: *const c_char, out: *mut SmtlMetrics) -> SmtlStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let ckpt = PathBuf::from(str_arg(checkpoint, "checkpoint")?);
        let data = PathBuf::from(str_arg(dataset, "dataset")?);
        *out = (&evaluate(&ckpt, &data, &Default::default())?).into();
        Ok(())
    })
}
