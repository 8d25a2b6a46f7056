//! C ABI over the slotmoe library.
//!
//! Every fallible call returns a [`SlotmoeStatus`]; on failure the message is
//! kept per thread and read back with [`slotmoe_last_error`]. Objects cross the
//! boundary as opaque handles that the caller releases with the matching
//! `*_free` function. Panics are caught at the boundary and reported as
//! [`SlotmoeStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use slotmoe::align::{sinkhorn_log, uniform_marginal, SinkhornStop};
use slotmoe::degrade::{default_pools, make_sample, PatchShape, Task};
use slotmoe::metrics;
use slotmoe::mtl::TaskWeightState;
use slotmoe::pipeline::Model;
use slotmoe::{Error, Tape, Tensor};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotmoeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Domain = 4,
    Config = 5,
    UndefinedMetric = 6,
    NonFinite = 7,
    Io = 8,
    Panic = 9,
}

/// Dense row-major `f64` tensor.
pub struct SlotmoeTensor(Tensor);

/// Dynamic task-weighting state (loss averages per task).
pub struct SlotmoeWeighting(TaskWeightState);

/// A trained model loaded from a checkpoint directory.
pub struct SlotmoeModel(Model);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: &str) {
    let text = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(text));
}

fn status_of(err: &Error) -> SlotmoeStatus {
    match err {
        Error::Shape { .. } => SlotmoeStatus::Shape,
        Error::Domain { .. } => SlotmoeStatus::Domain,
        Error::Config(_) => SlotmoeStatus::Config,
        Error::Input(_) | Error::Usage(_) => SlotmoeStatus::InvalidArgument,
        Error::UndefinedMetric(_) => SlotmoeStatus::UndefinedMetric,
        Error::NonFiniteLoss { .. } => SlotmoeStatus::NonFinite,
        Error::Io(_) | Error::Json(_) | Error::Csv(_) => SlotmoeStatus::Io,
    }
}

/// Failure inside a call body: either a library error or a bad argument.
enum Fail {
    Lib(Error),
    Arg(SlotmoeStatus, &'static str),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(body: impl FnOnce() -> Result<(), Fail>) -> SlotmoeStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            SlotmoeStatus::Ok
        }
        Ok(Err(Fail::Lib(e))) => {
            set_last_error(&e.to_string());
            status_of(&e)
        }
        Ok(Err(Fail::Arg(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("panic inside slotmoe");
            SlotmoeStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &'static str) -> Result<(), Fail> {
    if p.is_null() {
        Err(Fail::Arg(SlotmoeStatus::NullPointer, what))
    } else {
        Ok(())
    }
}

unsafe fn read_slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(p, what)?;
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn read_str<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    non_null(p, what)?;
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Arg(SlotmoeStatus::InvalidArgument, "string is not valid UTF-8"))
}

unsafe fn tensor_ref<'a>(p: *const SlotmoeTensor, what: &'static str) -> Result<&'a Tensor, Fail> {
    non_null(p, what)?;
    Ok(&(*p).0)
}

fn boxed<T>(value: T) -> *mut T {
    Box::into_raw(Box::new(value))
}

/// Message of the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn slotmoe_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Creates a tensor by copying `len` values; `len` must equal the product of the shape.
///
/// # Safety
/// `shape` must point to `ndim` values and `data` to `len` values.
#[no_mangle]
pub unsafe extern "C" fn slotmoe_tensor_new(
    shape: *const usize,
    ndim: usize,
    data: *const f64,
    len: usize,
    out: *mut *mut SlotmoeTensor,
) -> SlotmoeStatus {
    guard(|| {
        non_null(out, "out")?;
        let shape = read_slice(shape, ndim, "shape")?;
        let data = read_slice(data, len, "data")?;
        let t = Tensor::new(shape, data.to_vec())?;
        *out = boxed(SlotmoeTensor(t));
        Ok(())
    })
}

/// # Safety
/// `tensor` must come from this library and not be freed twice. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn slotmoe_tensor_free(tensor: *mut SlotmoeTensor) {
    if !tensor.is_null() {
        drop(Box::from_raw(tensor));
    }
}

/// Number of dimensions, or 0 for a null handle.
///
/// # Safety
/// `tensor` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn slotmoe_tensor_ndim(tensor: *const SlotmoeTensor) -> usize {
    tensor.as_ref().map_or(0, |t| t.0.shape().len())
}

/// Number of elements, or 0 for a null handle.
///
/// # Safety
/// `tensor` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn slotmoe_tensor_len(tensor: *const SlotmoeTensor) -> usize {
    tensor.as_ref().map_or(0, |t| t.0.len())
}

/// Copies the shape into `shape_out`, which must hold at least `ndim` values.
///
/// # Safety
/// `shape_out` must point to `capacity` writable values.
#[no_mangle]
pub unsafe extern "C" fn slotmoe_tensor_shape(
    tensor: *const SlotmoeTensor,
    shape_out: *mut usize,
    capacity: usize,
) -> SlotmoeStatus {
    guard(|| {
        let t = tensor_ref(tensor, "tensor")?;
        if capacity < t.shape().len() {
            return Err(Fail::Arg(SlotmoeStatus::InvalidArgument, "shape buffer too small"));
        }
        non_null(shape_out, "shape_out")?;
        ptr::copy_nonoverlapping(t.shape().as_ptr(), shape_out, t.shape().len());
        Ok(())
    })
}

/// Copies the values into `data_out`, which must hold at least `len` values.
///
/// # Safety
/// `data_out` must point to `capacity` writable values.
#[no_mangle]
pub unsafe extern "C" fn slotmoe_tensor_data(
    tensor: *const SlotmoeTensor,
    data_out: *mut f64,
    capacity: usize,
) -> SlotmoeStatus {
    guard(|| {
        let t = tensor_ref(tensor, "tensor")?;
        if capacity < t.len() {
            return Err(Fail::Arg(SlotmoeStatus::InvalidArgument, "data buffer too small"));
        }
        non_null(data_out, "data_out")?;
        ptr::copy_nonoverlapping(t.data().as_ptr(), data_out, t.len());
        Ok(())
    })
}

/// Log-domain Sinkhorn plan for an `S×C` logit matrix with uniform marginals,
/// running exactly `iterations` row/column updates at temperature `tau`.
///
/// # Safety
/// `logits` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn slotmoe_sinkhorn(
    logits: *const SlotmoeTensor,
    tau: f64,
    iterations: usize,
    out: *mut *mut SlotmoeTensor,
) -> SlotmoeStatus {
    guard(|| {
        let l = tensor_ref(logits, "logits")?;
        non_null(out, "out")?;
        if l.shape().len() != 2 {
            return Err(Error::Shape {
                op: "slotmoe_sinkhorn",
                lhs: l.shape().to_vec(),
                rhs: vec![],
            }
            .into());
        }
        let tape = Tape::new();
        let (s, c) = (l.shape()[0], l.shape()[1]);
        let plan = sinkhorn_log(
            tape.constant(l.clone()),
            tau,
            &uniform_marginal(s),
            &uniform_marginal(c),
            SinkhornStop::Fixed(iterations),
        )?;
        *out = boxed(SlotmoeTensor((*plan.plan.value()).clone()));
        Ok(())
    })
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn slotmoe_weighting_new(
    gamma: f64,
    temperature: f64,
    out: *mut *mut SlotmoeWeighting,
) -> SlotmoeStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = boxed(SlotmoeWeighting(TaskWeightState::new(gamma, temperature)?));
        Ok(())
    })
}

/// # Safety
/// `state` must come from this library and not be freed twice. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn slotmoe_weighting_free(state: *mut SlotmoeWeighting) {
    if !state.is_null() {
        drop(Box::from_raw(state));
    }
}

/// One weighting step over `count` tasks: updates each task's loss average and
/// writes the task weights (summing to `count`) into `weights_out`. On failure
/// the state is unchanged.
///
/// # Safety
/// `tasks` must point to `count` NUL-terminated strings, `losses` to `count`
/// values and `weights_out` to `count` writable values.
#[no_mangle]
pub unsafe extern "C" fn slotmoe_weighting_step(
    state: *mut SlotmoeWeighting,
    tasks: *const *const c_char,
    losses: *const f64,
    count: usize,
    weights_out: *mut f64,
) -> SlotmoeStatus {
    guard(|| {
        non_null(state, "state")?;
        non_null(weights_out, "weights_out")?;
        let names = read_slice(tasks, count, "tasks")?;
        let losses = read_slice(losses, count, "losses")?;
        let observations = names
            .iter()
            .zip(losses)
            .map(|(&name, &loss)| Ok((read_str(name, "task name")?.to_string(), loss)))
            .collect::<Result<Vec<_>, Fail>>()?;
        let mut next = (*state).0.clone();
        let rows = next.step(&observations)?;
        (*state).0 = next;
        for (i, row) in rows.iter().enumerate() {
            *weights_out.add(i) = row.weight;
        }
        Ok(())
    })
}

/// Current loss average of `task`, or NaN when the task has not been seen.
///
/// # Safety
/// `state` must be a live handle and `task` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn slotmoe_weighting_ema(state: *const SlotmoeWeighting, task: *const c_char) -> f64 {
    let (Some(s), false) = (state.as_ref(), task.is_null()) else {
        return f64::NAN;
    };
    match CStr::from_ptr(task).to_str() {
        Ok(name) => s.0.ema(name).unwrap_or(f64::NAN),
        Err(_) => f64::NAN,
    }
}

/// Image-quality scores of one `C×H×W` prediction against its reference.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SlotmoeScores {
    pub psnr: f64,
    pub ssim: f64,
    /// Mean spectral angle in radians.
    pub sam: f64,
    pub ergas: f64,
}

/// PSNR (peak 1), SSIM, SAM and ERGAS (ratio 1) of `pred` against `reference`.
///
/// # Safety
/// Both tensors must be live handles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn slotmoe_metrics(
    pred: *const SlotmoeTensor,
    reference: *const SlotmoeTensor,
    out: *mut SlotmoeScores,
) -> SlotmoeStatus {
    guard(|| {
        let (p, r) = (tensor_ref(pred, "pred")?, tensor_ref(reference, "reference")?);
        non_null(out, "out")?;
        *out = SlotmoeScores {
            psnr: metrics::psnr(p, r, 1.0)?,
            ssim: metrics::ssim(p, r)?,
            sam: metrics::sam(p, r)?.mean,
            ergas: metrics::ergas(p, r, 1.0)?.value,
        };
        Ok(())
    })
}

/// Seeded training sample of `task` (a task id such as `"denoise"`) with the
/// built-in prompt pool. Writes new clean and degraded tensors.
///
/// # Safety
/// `task` must be a NUL-terminated string and both outputs writable.
#[no_mangle]
pub unsafe extern "C" fn slotmoe_make_sample(
    task: *const c_char,
    seed: u64,
    channels: usize,
    size: usize,
    clean_out: *mut *mut SlotmoeTensor,
    degraded_out: *mut *mut SlotmoeTensor,
) -> SlotmoeStatus {
    guard(|| {
        let task: Task = read_str(task, "task")?.parse()?;
        non_null(clean_out, "clean_out")?;
        non_null(degraded_out, "degraded_out")?;
        let shape = PatchShape {
            channels,
            height: size,
            width: size,
        };
        let sample = make_sample(task, seed, shape, &default_pools()[task.id()])?;
        *clean_out = boxed(SlotmoeTensor(sample.clean));
        *degraded_out = boxed(SlotmoeTensor(sample.degraded));
        Ok(())
    })
}

/// Loads a checkpoint directory written by training.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn slotmoe_model_load(path: *const c_char, out: *mut *mut SlotmoeModel) -> SlotmoeStatus {
    guard(|| {
        let path = read_str(path, "path")?;
        non_null(out, "out")?;
        *out = boxed(SlotmoeModel(Model::load(Path::new(path))?));
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and not be freed twice. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn slotmoe_model_free(model: *mut SlotmoeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Restores a `C'×H×W` image under a text prompt.
///
/// # Safety
/// `model` and `input` must be live handles, `prompt` a NUL-terminated string
/// and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn slotmoe_model_predict(
    model: *const SlotmoeModel,
    input: *const SlotmoeTensor,
    prompt: *const c_char,
    out: *mut *mut SlotmoeTensor,
) -> SlotmoeStatus {
    guard(|| {
        non_null(model, "model")?;
        let x = tensor_ref(input, "input")?;
        let prompt = read_str(prompt, "prompt")?;
        non_null(out, "out")?;
        *out = boxed(SlotmoeTensor((*model).0.predict(x, prompt)?));
        Ok(())
    })
}
