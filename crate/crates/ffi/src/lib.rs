//! C interface to congeo-core.
//!
//! Every fallible call returns a [`CongeoStatus`]; on failure the message is
//! available from [`congeo_last_error`] on the same thread. Handles are opaque
//! and must be released with their `_free` function. Strings returned by the
//! library stay valid until the owning handle is freed (or, for the last
//! error, until the next failing call on the thread).

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use congeo::checkpoint::{load_checkpoint, save_checkpoint};
use congeo::config::{ConfigFormat, ExperimentConfig};
use congeo::evaluation::{EvalSet, Evaluator};
use congeo::image::{AerialImage, Image, PanoramaImage};
use congeo::losses::{EmbeddingBatch, LossConfig};
use congeo::retrieval::MetricsReport;
use congeo::training::{fit, TrainConfig, TrainState};
use congeo::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CongeoStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Data = 5,
    Checkpoint = 6,
    Runtime = 7,
    Panic = 8,
}

/// A parsed, validated experiment configuration.
pub struct CongeoConfig {
    inner: ExperimentConfig,
}

/// Encoder weights plus the training state they came from.
pub struct CongeoModel {
    state: TrainState,
    loss: LossConfig,
    train: Option<TrainConfig>,
}

/// Retrieval metrics for each evaluation setting.
pub struct CongeoReport {
    names: Vec<CString>,
    reports: Vec<MetricsReport>,
    json: CString,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(CongeoStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Config { .. } => CongeoStatus::Config,
            Error::Io { .. } => CongeoStatus::Io,
            Error::Checkpoint(_) => CongeoStatus::Checkpoint,
            Error::Manifest { .. } | Error::DuplicateId { .. } | Error::Csv(_) | Error::Png(_) | Error::Json(_) => {
                CongeoStatus::Data
            }
            Error::InvalidArgument(_) | Error::ShapeMismatch { .. } | Error::NotUnitNorm { .. } => {
                CongeoStatus::InvalidArgument
            }
            _ => CongeoStatus::Runtime,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(CongeoStatus::NullPointer, format!("`{what}` is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(CongeoStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CongeoStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CongeoStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("panic: {msg}"));
            CongeoStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("`{what}` is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn mut_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Message of the most recent failing call on this thread, or NULL.
#[no_mangle]
pub extern "C" fn congeo_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static description of a status code; unknown codes get "unknown status".
#[no_mangle]
pub extern "C" fn congeo_status_str(status: c_int) -> *const c_char {
    let s: &'static CStr = match status {
        0 => c"ok",
        1 => c"null pointer",
        2 => c"invalid argument",
        3 => c"configuration error",
        4 => c"i/o error",
        5 => c"malformed data",
        6 => c"checkpoint error",
        7 => c"runtime error",
        8 => c"internal panic",
        _ => c"unknown status",
    };
    s.as_ptr()
}

#[no_mangle]
pub extern "C" fn congeo_version() -> *const c_char {
    static V: &CStr = match CStr::from_bytes_with_nul(concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes()) {
        Ok(v) => v,
        Err(_) => c"unknown",
    };
    V.as_ptr()
}

/// Loads a TOML or JSON config file (chosen by extension).
#[no_mangle]
pub unsafe extern "C" fn congeo_config_load(path: *const c_char, out: *mut *mut CongeoConfig) -> CongeoStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let inner = ExperimentConfig::load(path)?;
        put(out, CongeoConfig { inner })
    })
}

/// Parses config text; `json` selects JSON over TOML.
#[no_mangle]
pub unsafe extern "C" fn congeo_config_parse(text: *const c_char, json: bool, out: *mut *mut CongeoConfig) -> CongeoStatus {
    guard(|| {
        let text = str_arg(text, "text")?;
        let fmt = if json { ConfigFormat::Json } else { ConfigFormat::Toml };
        let inner = ExperimentConfig::parse(text, fmt)?;
        put(out, CongeoConfig { inner })
    })
}

#[no_mangle]
pub unsafe extern "C" fn congeo_config_set_seed(config: *mut CongeoConfig, seed: u64) -> CongeoStatus {
    guard(|| {
        mut_arg(config, "config")?.inner.train.seed = seed;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn congeo_config_set_epochs(config: *mut CongeoConfig, epochs: usize) -> CongeoStatus {
    guard(|| {
        mut_arg(config, "config")?.inner.train.epochs = epochs;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn congeo_config_free(config: *mut CongeoConfig) {
    free(config)
}

/// Freshly initialised, untrained model for `config`.
#[no_mangle]
pub unsafe extern "C" fn congeo_model_init(config: *const CongeoConfig, out: *mut *mut CongeoModel) -> CongeoStatus {
    guard(|| {
        let cfg = &ref_arg(config, "config")?.inner;
        let state = TrainState::new(cfg.encoder.clone(), &cfg.loss, cfg.train.seed)?;
        put(out, CongeoModel { state, loss: cfg.loss, train: Some(cfg.train.clone()) })
    })
}

/// Trains on the config's dataset with its training settings.
#[no_mangle]
pub unsafe extern "C" fn congeo_model_train(config: *const CongeoConfig, out: *mut *mut CongeoModel) -> CongeoStatus {
    guard(|| {
        let cfg = &ref_arg(config, "config")?.inner;
        let records = cfg.dataset.load()?;
        let mut state = TrainState::new(cfg.encoder.clone(), &cfg.loss, cfg.train.seed)?;
        fit(&mut state, &records, &cfg.loss, &cfg.train, &mut |_| Ok(()))?;
        put(out, CongeoModel { state, loss: cfg.loss, train: Some(cfg.train.clone()) })
    })
}

#[no_mangle]
pub unsafe extern "C" fn congeo_model_load(path: *const c_char, out: *mut *mut CongeoModel) -> CongeoStatus {
    guard(|| {
        let ck = load_checkpoint(str_arg(path, "path")?)?;
        put(out, CongeoModel { state: ck.state, loss: ck.loss, train: ck.train })
    })
}

#[no_mangle]
pub unsafe extern "C" fn congeo_model_save(model: *const CongeoModel, path: *const c_char) -> CongeoStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let path = PathBuf::from(str_arg(path, "path")?);
        save_checkpoint(path, &m.state, &m.loss, m.train.as_ref())?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn congeo_model_embed_dim(model: *const CongeoModel, out: *mut usize) -> CongeoStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        *mut_arg(out, "out")? = m.state.encoder.config().embed_dim;
        Ok(())
    })
}

unsafe fn read_image(pixels: *const f32, height: usize, width: usize, channels: usize) -> Result<Image, Failure> {
    if pixels.is_null() {
        return Err(null("pixels"));
    }
    let n = height.checked_mul(width).and_then(|v| v.checked_mul(channels)).ok_or_else(|| invalid("image too large"))?;
    Ok(Image::from_vec(height, width, channels, std::slice::from_raw_parts(pixels, n).to_vec())?)
}

unsafe fn write_embedding(batch: EmbeddingBatch, out: *mut f64, out_len: usize) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    let row = batch.row(0);
    if out_len < row.len() {
        return Err(invalid(format!("output buffer holds {out_len} values, embedding has {}", row.len())));
    }
    std::slice::from_raw_parts_mut(out, row.len()).copy_from_slice(row);
    Ok(())
}

/// Embeds one panorama given as row-major interleaved `height x width x channels`
/// floats; writes `embed_dim` values to `out`.
#[no_mangle]
pub unsafe extern "C" fn congeo_model_embed_ground(
    model: *const CongeoModel,
    pixels: *const f32,
    height: usize,
    width: usize,
    channels: usize,
    out: *mut f64,
    out_len: usize,
) -> CongeoStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let img = PanoramaImage::new(read_image(pixels, height, width, channels)?);
        write_embedding(m.state.encoder.encode_ground(&[img])?, out, out_len)
    })
}

/// Embeds one square aerial image; layout as for the ground view.
#[no_mangle]
pub unsafe extern "C" fn congeo_model_embed_aerial(
    model: *const CongeoModel,
    pixels: *const f32,
    size: usize,
    channels: usize,
    out: *mut f64,
    out_len: usize,
) -> CongeoStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let img = AerialImage::new(read_image(pixels, size, size, channels)?)?;
        write_embedding(m.state.encoder.encode_aerial(&[img])?, out, out_len)
    })
}

#[no_mangle]
pub unsafe extern "C" fn congeo_model_free(model: *mut CongeoModel) {
    free(model)
}

/// Runs every evaluation setting of `config` against the config's test split.
#[no_mangle]
pub unsafe extern "C" fn congeo_evaluate(
    model: *const CongeoModel,
    config: *const CongeoConfig,
    out: *mut *mut CongeoReport,
) -> CongeoStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let cfg = &ref_arg(config, "config")?.inner;
        let records = cfg.dataset.load()?;
        let set = EvalSet::from_records(&records)?;
        let ev = Evaluator::new(&m.state.encoder, &set)?;
        let mut names = Vec::new();
        let mut reports = Vec::new();
        for s in &cfg.eval {
            reports.push(ev.run(s)?);
            names.push(s.label());
        }
        let map: serde_json::Map<String, serde_json::Value> = names
            .iter()
            .zip(&reports)
            .map(|(n, r)| Ok((n.clone(), serde_json::to_value(r)?)))
            .collect::<Result<_, serde_json::Error>>()
            .map_err(Error::from)?;
        let json = serde_json::to_string_pretty(&map).map_err(Error::from)?;
        let names = names.into_iter().map(|n| CString::new(n).expect("labels have no nul")).collect();
        put(out, CongeoReport { names, reports, json: CString::new(json).expect("json has no nul") })
    })
}

#[no_mangle]
pub unsafe extern "C" fn congeo_report_len(report: *const CongeoReport) -> usize {
    report.as_ref().map_or(0, |r| r.reports.len())
}

/// Setting label (e.g. `fov_90`) of entry `index`, or NULL when out of range.
#[no_mangle]
pub unsafe extern "C" fn congeo_report_name(report: *const CongeoReport, index: usize) -> *const c_char {
    report.as_ref().and_then(|r| r.names.get(index)).map_or(ptr::null(), |c| c.as_ptr())
}

/// Recall@k of entry `index`; `k` must be 1, 5 or 10.
#[no_mangle]
pub unsafe extern "C" fn congeo_report_recall(report: *const CongeoReport, index: usize, k: usize, out: *mut f64) -> CongeoStatus {
    guard(|| {
        let r = ref_arg(report, "report")?;
        let rep = r.reports.get(index).ok_or_else(|| invalid(format!("index {index} out of range ({} entries)", r.reports.len())))?;
        let v = rep.r_at.get(&k).ok_or_else(|| invalid(format!("recall@{k} not computed")))?;
        *mut_arg(out, "out")? = *v;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn congeo_report_average_precision(report: *const CongeoReport, index: usize, out: *mut f64) -> CongeoStatus {
    guard(|| {
        let r = ref_arg(report, "report")?;
        let rep = r.reports.get(index).ok_or_else(|| invalid(format!("index {index} out of range ({} entries)", r.reports.len())))?;
        *mut_arg(out, "out")? = rep.ap;
        Ok(())
    })
}

/// The whole report as a JSON object keyed by setting label.
#[no_mangle]
pub unsafe extern "C" fn congeo_report_json(report: *const CongeoReport) -> *const c_char {
    report.as_ref().map_or(ptr::null(), |r| r.json.as_ptr())
}

#[no_mangle]
pub unsafe extern "C" fn congeo_report_free(report: *mut CongeoReport) {
    free(report)
}
