//! C ABI over the `kse` toolkit.
//!
//! Models and reports cross the boundary as opaque handles that the caller
//! releases with the matching `*_free` function. Every fallible call
//! returns a [`KseStatus`]; the message of the most recent failure on the
//! calling thread is available from [`kse_last_error_message`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use kse::analysis::AnalysisConfig;
use kse::{analyze_model, compress_model, forward_compressed, io, model_report, CompressionConfig, FeatureStack, KseError, KseReport, ModelGraph};

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KseStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Stage = 5,
    Shape = 6,
    Numeric = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// Opaque model handle.
pub struct KseModel {
    graph: ModelGraph,
}

/// Opaque handle to per-layer channel reports.
pub struct KseReports {
    reports: Vec<KseReport>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &KseError) -> KseStatus {
    match e.root() {
        KseError::Config(_) | KseError::Budget { .. } => KseStatus::InvalidArgument,
        KseError::Io { .. } => KseStatus::Io,
        KseError::Manifest { .. } | KseError::Truncated { .. } | KseError::DimensionMismatch { .. } | KseError::Corrupt(_) => KseStatus::Format,
        KseError::Stage(_) | KseError::Architecture(_) => KseStatus::Stage,
        KseError::Shape(_) | KseError::Geometry(_) | KseError::Index(_) => KseStatus::Shape,
        KseError::NonFinite(_) | KseError::DegenerateLayer(_) | KseError::UndefinedCorrelation(_) | KseError::EmptyDataset => KseStatus::Numeric,
        KseError::Layer { .. } => unreachable!("root unwraps layer context"),
    }
}

struct Fail(KseStatus, String);

impl From<KseError> for Fail {
    fn from(e: KseError) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> KseStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => KseStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            KseStatus::Panic
        }
    }
}

unsafe fn non_null<'a, T>(p: *const T, name: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| Fail(KseStatus::NullArgument, format!("{name} is null")))
}

unsafe fn path_arg(p: *const c_char) -> Result<String, Fail> {
    if p.is_null() {
        return Err(Fail(KseStatus::NullArgument, "path is null".into()));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| Fail(KseStatus::InvalidArgument, "path is not valid UTF-8".into()))
}

unsafe fn write_out<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail(KseStatus::NullArgument, "output pointer is null".into()));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Copies the last error message of this thread into `buf` (NUL
/// terminated, truncated to `len`). Returns the full message length
/// without the terminator, or 0 when no error has been recorded.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn kse_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Loads a dense or compressed model from a manifest path or file stem.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kse_model_load(path: *const c_char, out: *mut *mut KseModel) -> KseStatus {
    guard(|| {
        let path = path_arg(path)?;
        let graph = io::load_model(path)?;
        write_out(out, KseModel { graph })
    })
}

/// Saves a model in the format matching its stage.
///
/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn kse_model_save(model: *const KseModel, path: *const c_char) -> KseStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        let path = path_arg(path)?;
        io::save_model(&m.graph, path)?;
        Ok(())
    })
}

/// Releases a model handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn kse_model_free(model: *mut KseModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input shape as channels, height, width.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn kse_model_input_shape(model: *const KseModel, channels: *mut usize, height: *mut usize, width: *mut usize) -> KseStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        if channels.is_null() || height.is_null() || width.is_null() {
            return Err(Fail(KseStatus::NullArgument, "shape output is null".into()));
        }
        let s = m.graph.input_shape();
        *channels = s.channels;
        *height = s.height;
        *width = s.width;
        Ok(())
    })
}

/// Number of values produced by [`kse_model_forward`].
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn kse_model_output_len(model: *const KseModel, len: *mut usize) -> KseStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        if len.is_null() {
            return Err(Fail(KseStatus::NullArgument, "len is null".into()));
        }
        *len = m.graph.output_shape().len();
        Ok(())
    })
}

/// 1 when any layer holds clustered kernels, 0 when the model is dense,
/// -1 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn kse_model_is_compressed(model: *const KseModel) -> i32 {
    match model.as_ref() {
        Some(m) => i32::from(m.graph.has_compressed_payloads()),
        None => -1,
    }
}

/// Runs one image (`C*H*W` floats, channel-major) through the model.
///
/// # Safety
/// `input` must hold `input_len` floats and `output` room for `output_len`.
#[no_mangle]
pub unsafe extern "C" fn kse_model_forward(model: *const KseModel, input: *const f32, input_len: usize, output: *mut f32, output_len: usize) -> KseStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        if input.is_null() || output.is_null() {
            return Err(Fail(KseStatus::NullArgument, "buffer is null".into()));
        }
        let s = m.graph.input_shape();
        if input_len != s.len() {
            return Err(Fail(KseStatus::Shape, format!("input has {input_len} values, model expects {}", s.len())));
        }
        let need = m.graph.output_shape().len();
        if output_len < need {
            return Err(Fail(KseStatus::BufferTooSmall, format!("output needs {need} values, got {output_len}")));
        }
        let data = std::slice::from_raw_parts(input, input_len).to_vec();
        let x = FeatureStack::new(s.channels, s.height, s.width, data)?;
        let y = forward_compressed(&m.graph, &x)?;
        std::slice::from_raw_parts_mut(output, need).copy_from_slice(y.data());
        Ok(())
    })
}

/// Channel analysis of every compressible layer of a dense model.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn kse_analyze(model: *const KseModel, k_neighbors: usize, alpha: f64, out: *mut *mut KseReports) -> KseStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        let reports = analyze_model(&m.graph, &AnalysisConfig { k_neighbors, alpha })?;
        write_out(out, KseReports { reports })
    })
}

/// Releases a report handle. Null is ignored.
///
/// # Safety
/// `reports` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn kse_reports_free(reports: *mut KseReports) {
    if !reports.is_null() {
        drop(Box::from_raw(reports));
    }
}

/// Number of layer reports.
///
/// # Safety
/// `reports` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn kse_reports_len(reports: *const KseReports) -> usize {
    reports.as_ref().map_or(0, |r| r.reports.len())
}

/// Layer index and channel indicators of report `i`. `channels` receives
/// the channel count; at most `len` indicators are copied into `values`.
///
/// # Safety
/// Pointers must be valid; `values` may be null when `len` is 0.
#[no_mangle]
pub unsafe extern "C" fn kse_reports_indicator(
    reports: *const KseReports,
    i: usize,
    layer: *mut usize,
    channels: *mut usize,
    values: *mut f64,
    len: usize,
) -> KseStatus {
    guard(|| {
        let r = non_null(reports, "reports")?;
        let rep = r
            .reports
            .get(i)
            .ok_or_else(|| Fail(KseStatus::InvalidArgument, format!("report {i} of {}", r.reports.len())))?;
        if layer.is_null() || channels.is_null() {
            return Err(Fail(KseStatus::NullArgument, "output is null".into()));
        }
        *layer = rep.layer_id;
        *channels = rep.indicator.len();
        if len < rep.indicator.len() {
            return Err(Fail(KseStatus::BufferTooSmall, format!("{} indicators, buffer holds {len}", rep.indicator.len())));
        }
        if values.is_null() {
            return Err(Fail(KseStatus::NullArgument, "values is null".into()));
        }
        std::slice::from_raw_parts_mut(values, rep.indicator.len()).copy_from_slice(&rep.indicator);
        Ok(())
    })
}

/// Compresses a dense model. `reports` may be null, in which case the
/// analysis runs with `k_neighbors` and `alpha`.
///
/// # Safety
/// Handles must be live or null as documented; `out` must be writable.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn kse_compress(
    model: *const KseModel,
    reports: *const KseReports,
    granularity: u32,
    shift: i32,
    k_neighbors: usize,
    alpha: f64,
    seed: u64,
    out: *mut *mut KseModel,
) -> KseStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        let cfg = CompressionConfig {
            granularity,
            shift,
            k_neighbors,
            alpha,
            kmeans_seed: seed,
            ..CompressionConfig::default()
        };
        cfg.validate()?;
        let owned;
        let reports = match reports.as_ref() {
            Some(r) => &r.reports,
            None => {
                owned = analyze_model(&m.graph, &cfg.analysis())?;
                &owned
            }
        };
        let graph = compress_model(&m.graph, reports, &cfg)?;
        write_out(out, KseModel { graph })
    })
}

/// Model-wide compression and acceleration ratios of `compressed`
/// against its dense source.
///
/// # Safety
/// Handles must be live; outputs writable.
#[no_mangle]
pub unsafe extern "C" fn kse_ratios(dense: *const KseModel, compressed: *const KseModel, r_comp: *mut f64, r_acce: *mut f64) -> KseStatus {
    guard(|| {
        let d = non_null(dense, "dense")?;
        let c = non_null(compressed, "compressed")?;
        if r_comp.is_null() || r_acce.is_null() {
            return Err(Fail(KseStatus::NullArgument, "ratio output is null".into()));
        }
        let r = model_report(&d.graph, &c.graph)?;
        *r_comp = r.r_comp;
        *r_acce = r.r_acce;
        Ok(())
    })
}
