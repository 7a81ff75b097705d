//! C ABI over `ivm-core`.
//!
//! Every function returns an [`IvmStatus`]; on failure a one-line message
//! is available from [`ivm_last_error`] on the same thread. Pipelines are
//! opaque handles created with [`ivm_pipeline_new`] and released with
//! [`ivm_pipeline_free`]. No function unwinds across the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use ivm_core::model::{Measurement, OdometryMeasurement, PseudorangeMeasurement, Timestamp};
use ivm_core::pipeline::{estimates_csv, group_epochs, run, Pipeline, PipelineConfig};
use ivm_core::sim::{generate, ScenarioSpec};
use ivm_core::stream::{parse_stream, stream_to_string, Stream};
use ivm_core::Error;
use nalgebra::Vector3;

/// Result code of every exported function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IvmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    NumericalFailure = 3,
    Initialization = 4,
    Parse = 5,
    OutOfOrder = 6,
    Config = 7,
    Io = 8,
    OutOfRange = 9,
    Panic = 10,
}

/// Opaque pipeline handle.
pub struct IvmPipeline {
    inner: Pipeline,
    pending: Vec<Measurement>,
}

/// Estimate after one epoch.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct IvmEpochResult {
    pub time: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub phi: f64,
    pub delta: f64,
    pub delta_dot: f64,
    /// Components of the pseudorange error model.
    pub k: u32,
    pub runtime_s: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let clean = msg.replace(['\0', '\n'], " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(clean).expect("nul bytes removed"));
}

fn status_of(e: &Error) -> IvmStatus {
    match e {
        Error::InvalidArgument(_) | Error::InvalidScenario(_) | Error::MissingTruth(_) => IvmStatus::InvalidArgument,
        Error::NumericalFailure(_) | Error::AllComponentsPruned => IvmStatus::NumericalFailure,
        Error::Initialization(_) => IvmStatus::Initialization,
        Error::Parse { .. } => IvmStatus::Parse,
        Error::OutOfOrder { .. } => IvmStatus::OutOfOrder,
        Error::Config(_) => IvmStatus::Config,
        Error::Io(_) => IvmStatus::Io,
    }
}

/// Run `f`, translating errors and panics into status codes.
fn guard<F: FnOnce() -> Result<(), (IvmStatus, String)>>(f: F) -> IvmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            IvmStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            IvmStatus::Panic
        }
    }
}

fn core_err(e: Error) -> (IvmStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (IvmStatus, String) {
    (IvmStatus::NullPointer, format!("{what} is null"))
}

/// Borrow a C string; a null pointer yields `None`.
unsafe fn opt_str<'a>(p: *const c_char, what: &str) -> Result<Option<&'a str>, (IvmStatus, String)> {
    if p.is_null() {
        return Ok(None);
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Some)
        .map_err(|_| (IvmStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn req_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (IvmStatus, String)> {
    opt_str(p, what)?.ok_or_else(|| null(what))
}

unsafe fn handle<'a>(p: *mut IvmPipeline) -> Result<&'a mut IvmPipeline, (IvmStatus, String)> {
    p.as_mut().ok_or_else(|| null("pipeline"))
}

fn config_from(toml: Option<&str>) -> Result<PipelineConfig, (IvmStatus, String)> {
    match toml {
        Some(t) => PipelineConfig::from_toml(t).map_err(core_err),
        None => Ok(PipelineConfig::default()),
    }
}

/// Message of the last failed call on this thread, empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn ivm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ivm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Create a pipeline from a TOML configuration (NULL for defaults).
///
/// # Safety
/// `config_toml` must be NULL or a valid NUL-terminated string; `out` must
/// be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ivm_pipeline_new(config_toml: *const c_char, out: *mut *mut IvmPipeline) -> IvmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let cfg = config_from(opt_str(config_toml, "config")?)?;
        let inner = Pipeline::new(cfg).map_err(core_err)?;
        *out = Box::into_raw(Box::new(IvmPipeline { inner, pending: Vec::new() }));
        Ok(())
    })
}

/// Release a pipeline. NULL is ignored.
///
/// # Safety
/// `pipeline` must be NULL or a handle from [`ivm_pipeline_new`] that has
/// not been freed.
#[no_mangle]
pub unsafe extern "C" fn ivm_pipeline_free(pipeline: *mut IvmPipeline) {
    if !pipeline.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(pipeline))));
    }
}

/// Queue a pseudorange for the next [`ivm_pipeline_process_epoch`].
///
/// # Safety
/// `pipeline` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ivm_pipeline_add_pseudorange(
    pipeline: *mut IvmPipeline,
    time: f64,
    sat_id: u32,
    sat_x: f64,
    sat_y: f64,
    sat_z: f64,
    range: f64,
    std: f64,
) -> IvmStatus {
    guard(|| {
        let p = handle(pipeline)?;
        let t = Timestamp::new(time).map_err(core_err)?;
        let m = PseudorangeMeasurement::new(t, sat_id, Vector3::new(sat_x, sat_y, sat_z), range, std)
            .map_err(core_err)?;
        p.pending.push(Measurement::Pseudorange(m));
        Ok(())
    })
}

/// Queue an odometry increment from `time` to the next epoch, with a
/// diagonal information matrix `info_diag[4]`.
///
/// # Safety
/// `pipeline` must be a live handle and `info_diag` must point to 4 doubles.
#[no_mangle]
pub unsafe extern "C" fn ivm_pipeline_add_odometry(
    pipeline: *mut IvmPipeline,
    time: f64,
    dt: f64,
    forward: f64,
    lateral: f64,
    vertical: f64,
    dyaw: f64,
    info_diag: *const f64,
) -> IvmStatus {
    guard(|| {
        let p = handle(pipeline)?;
        if info_diag.is_null() {
            return Err(null("info_diag"));
        }
        let d = std::slice::from_raw_parts(info_diag, 4);
        let t = Timestamp::new(time).map_err(core_err)?;
        let m = OdometryMeasurement::with_diagonal_info(t, dt, forward, lateral, vertical, dyaw, [d[0], d[1], d[2], d[3]])
            .map_err(core_err)?;
        p.pending.push(Measurement::Odometry(m));
        Ok(())
    })
}

/// Process all queued measurements as one epoch. They must share one
/// timestamp, later than the previous epoch. The queue is cleared whether
/// or not the step succeeds.
///
/// # Safety
/// `pipeline` must be a live handle; `out` must be NULL or valid.
#[no_mangle]
pub unsafe extern "C" fn ivm_pipeline_process_epoch(pipeline: *mut IvmPipeline, out: *mut IvmEpochResult) -> IvmStatus {
    guard(|| {
        let p = handle(pipeline)?;
        let pending = std::mem::take(&mut p.pending);
        let mut epochs = group_epochs(&pending).map_err(core_err)?;
        if epochs.len() != 1 {
            return Err((
                IvmStatus::InvalidArgument,
                format!("queued measurements span {} timestamps, expected exactly 1", epochs.len()),
            ));
        }
        let epoch = epochs.pop().expect("one epoch");
        let r = p.inner.step(&epoch).map_err(core_err)?;
        if let Some(o) = out.as_mut() {
            *o = IvmEpochResult {
                time: r.time.0,
                x: r.pose.x,
                y: r.pose.y,
                z: r.pose.z,
                phi: r.pose.phi,
                delta: r.clock.delta,
                delta_dot: r.clock.delta_dot,
                k: r.k() as u32,
                runtime_s: r.runtime,
            };
        }
        Ok(())
    })
}

/// Number of components of the current pseudorange mixture (0 for
/// non-mixture models).
///
/// # Safety
/// `pipeline` must be a live handle; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ivm_pipeline_mixture_len(pipeline: *const IvmPipeline, out: *mut u32) -> IvmStatus {
    guard(|| {
        let p = pipeline.as_ref().ok_or_else(|| null("pipeline"))?;
        let o = out.as_mut().ok_or_else(|| null("out"))?;
        *o = p.inner.model().mixture().map_or(0, |m| m.len() as u32);
        Ok(())
    })
}

/// Weight, mean and information of one scalar mixture component.
///
/// # Safety
/// `pipeline` must be a live handle; the output pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ivm_pipeline_mixture_component(
    pipeline: *const IvmPipeline,
    index: u32,
    weight: *mut f64,
    mean: *mut f64,
    info: *mut f64,
) -> IvmStatus {
    guard(|| {
        let p = pipeline.as_ref().ok_or_else(|| null("pipeline"))?;
        if weight.is_null() || mean.is_null() || info.is_null() {
            return Err(null("output"));
        }
        let m = p.inner.model().mixture().ok_or_else(|| (IvmStatus::OutOfRange, "model has no mixture".to_string()))?;
        let c = m
            .components()
            .get(index as usize)
            .ok_or_else(|| (IvmStatus::OutOfRange, format!("component {index} of {}", m.len())))?;
        *weight = c.weight;
        *mean = c.mean[0];
        *info = c.info()[(0, 0)];
        Ok(())
    })
}

/// Generate a scenario (TOML text) and write the measurement stream with
/// ground truth to `out_path`.
///
/// # Safety
/// Both arguments must be valid NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn ivm_simulate(spec_toml: *const c_char, out_path: *const c_char) -> IvmStatus {
    guard(|| {
        let spec = ScenarioSpec::from_toml(req_str(spec_toml, "spec")?).map_err(core_err)?;
        let path = req_str(out_path, "out_path")?;
        let (meas, truth) = generate(&spec).map_err(core_err)?;
        let text = stream_to_string(&Stream::from_ground_truth(meas, &truth)).map_err(core_err)?;
        std::fs::write(path, text).map_err(|e| core_err(e.into()))
    })
}

/// Run a stream file through a pipeline and write the estimates CSV.
///
/// # Safety
/// `stream_path` and `out_csv` must be valid NUL-terminated strings;
/// `config_toml` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn ivm_run_stream(
    stream_path: *const c_char,
    config_toml: *const c_char,
    out_csv: *const c_char,
) -> IvmStatus {
    guard(|| {
        let cfg = config_from(opt_str(config_toml, "config")?)?;
        let text = std::fs::read_to_string(req_str(stream_path, "stream_path")?).map_err(|e| core_err(e.into()))?;
        let out = req_str(out_csv, "out_csv")?;
        let stream = parse_stream(&text).map_err(core_err)?;
        let results = run(&stream.measurements, &cfg).map_err(core_err)?;
        std::fs::write(out, estimates_csv(&results)).map_err(|e| core_err(e.into()))
    })
}
