//! C interface to the sfbnet segmentation model.
//!
//! Every fallible function returns an [`SfbnetStatus`]. On failure a
//! description is kept per thread and can be read with
//! [`sfbnet_last_error`]. Models are opaque [`SfbnetModel`] handles created
//! by [`sfbnet_model_new`] and released with [`sfbnet_model_free`].
//!
//! The C interface always runs in single precision. Images are passed as
//! contiguous `N x H x W` float arrays (one input channel) and probabilities
//! come back as `N x classes x H x W`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use sfbnet::engine::Tensor;
use sfbnet::loss::{argmax_labels, dice_score};
use sfbnet::model::{build_model, count_flops, load_checkpoint, save_checkpoint, ModelConfig, Precision, SfbNet};
use sfbnet::pipeline::{largest_component_filter, largest_component_plane, tta_mirror_predict};
use sfbnet::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SfbnetStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Config = 4,
    Data = 5,
    Numerical = 6,
    Io = 7,
    Panic = 8,
}

/// Opaque model handle.
pub struct SfbnetModel {
    inner: SfbNet<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> SfbnetStatus {
    match err {
        Error::Shape { .. } => SfbnetStatus::Shape,
        Error::Config(_) => SfbnetStatus::Config,
        Error::Contract(_) => SfbnetStatus::InvalidArgument,
        Error::Data(_) | Error::Json(_) => SfbnetStatus::Data,
        Error::Numerical(_) => SfbnetStatus::Numerical,
        Error::Io { .. } => SfbnetStatus::Io,
    }
}

struct Failure(SfbnetStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(SfbnetStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(SfbnetStatus::InvalidArgument, msg.into())
}

/// Runs `f`, turning errors and panics into a status plus the thread's
/// last-error message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SfbnetStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SfbnetStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_owned());
            set_last_error(format!("panic: {msg}"));
            SfbnetStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(s: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if s.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn model_ref<'a>(m: *const SfbnetModel) -> Result<&'a SfbnetModel, Failure> {
    m.as_ref().ok_or_else(|| null("model"))
}

unsafe fn model_mut<'a>(m: *mut SfbnetModel) -> Result<&'a mut SfbnetModel, Failure> {
    m.as_mut().ok_or_else(|| null("model"))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_out<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// Message of the last failed call on this thread, or null if none failed.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sfbnet_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Builds a freshly initialized model.
///
/// `config_json` is a JSON model configuration; null selects the built-in
/// 32x32 tiny configuration.
///
/// # Safety
/// `config_json` must be null or a NUL-terminated string, and `out` must be
/// a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn sfbnet_model_new(config_json: *const c_char, out: *mut *mut SfbnetModel) -> SfbnetStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let config = if config_json.is_null() {
            ModelConfig::tiny()
        } else {
            let text = str_arg(config_json, "config_json")?;
            serde_json::from_str::<ModelConfig>(text).map_err(|e| Failure(SfbnetStatus::Config, e.to_string()))?
        };
        if config.precision != Precision::F32 {
            return Err(Failure(
                SfbnetStatus::Config,
                "the C interface runs single-precision models only".into(),
            ));
        }
        let inner = build_model::<f32>(&config)?;
        *out = Box::into_raw(Box::new(SfbnetModel { inner }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle from [`sfbnet_model_new`] that has not
/// been freed yet.
#[no_mangle]
pub unsafe extern "C" fn sfbnet_model_free(model: *mut SfbnetModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Loads checkpoint weights into `model`. Shapes must match the model's
/// configuration.
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sfbnet_model_load(model: *mut SfbnetModel, path: *const c_char) -> SfbnetStatus {
    guard(|| {
        let m = model_mut(model)?;
        let path = PathBuf::from(str_arg(path, "path")?);
        load_checkpoint(&mut m.inner, &path)?;
        Ok(())
    })
}

/// Writes the model weights as a checkpoint file.
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sfbnet_model_save(model: *const SfbnetModel, path: *const c_char) -> SfbnetStatus {
    guard(|| {
        let m = model_ref(model)?;
        let path = PathBuf::from(str_arg(path, "path")?);
        save_checkpoint(&m.inner, &path)?;
        Ok(())
    })
}

/// Input height, width and number of output classes.
///
/// # Safety
/// `model` must be a live handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn sfbnet_model_dims(
    model: *const SfbnetModel,
    height: *mut usize,
    width: *mut usize,
    classes: *mut usize,
) -> SfbnetStatus {
    guard(|| {
        let cfg = &model_ref(model)?.inner.config;
        if height.is_null() || width.is_null() || classes.is_null() {
            return Err(null("output pointer"));
        }
        *height = cfg.input_size[0];
        *width = cfg.input_size[1];
        *classes = cfg.classes;
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sfbnet_model_num_parameters(model: *const SfbnetModel, out: *mut u64) -> SfbnetStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.inner.num_parameters() as u64;
        Ok(())
    })
}

/// Analytic forward FLOPs for one image.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sfbnet_model_flops(model: *const SfbnetModel, out: *mut f64) -> SfbnetStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = count_flops(&m.inner, 1);
        Ok(())
    })
}

unsafe fn image_tensor(m: &SfbnetModel, image: *const f32, batch: usize) -> Result<Tensor<f32>, Failure> {
    if batch == 0 {
        return Err(invalid("batch must be >= 1"));
    }
    let [h, w] = m.inner.config.input_size;
    let data = slice_arg(image, batch * h * w, "image")?.to_vec();
    Ok(Tensor::new(&[batch, 1, h, w], data)?)
}

/// Class probabilities for `batch` images.
///
/// `image` holds `batch * H * W` floats; `probs` receives
/// `batch * classes * H * W` floats and `probs_len` must equal that count.
/// With `tta` set, predictions are averaged over the four mirrored inputs.
///
/// # Safety
/// `model` must be a live handle; `image` and `probs` must point to arrays
/// of the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn sfbnet_model_predict(
    model: *mut SfbnetModel,
    image: *const f32,
    batch: usize,
    tta: bool,
    probs: *mut f32,
    probs_len: usize,
) -> SfbnetStatus {
    guard(|| {
        let m = model_mut(model)?;
        let x = image_tensor(m, image, batch)?;
        let [h, w] = m.inner.config.input_size;
        let expected = batch * m.inner.config.classes * h * w;
        if probs_len != expected {
            return Err(invalid(format!("probs_len is {probs_len}, expected {expected}")));
        }
        let out = slice_out(probs, probs_len, "probs")?;
        let p = if tta {
            tta_mirror_predict(&mut m.inner, &x)?
        } else {
            m.inner.predict_probs(&x)?
        };
        out.copy_from_slice(p.data());
        Ok(())
    })
}

/// Label maps (`batch * H * W` class ids) for `batch` images, optionally
/// with mirror averaging and largest-component filtering.
///
/// # Safety
/// `model` must be a live handle; `image` must hold `batch * H * W` floats
/// and `labels` room for `batch * H * W` integers.
#[no_mangle]
pub unsafe extern "C" fn sfbnet_model_segment(
    model: *mut SfbnetModel,
    image: *const f32,
    batch: usize,
    tta: bool,
    postprocess: bool,
    labels: *mut i32,
) -> SfbnetStatus {
    guard(|| {
        let m = model_mut(model)?;
        let x = image_tensor(m, image, batch)?;
        let [h, w] = m.inner.config.input_size;
        let out = slice_out(labels, batch * h * w, "labels")?;
        let p = if tta {
            tta_mirror_predict(&mut m.inner, &x)?
        } else {
            m.inner.predict_probs(&x)?
        };
        let mut map = argmax_labels(&p)?;
        if postprocess {
            map = largest_component_filter(&map);
        }
        out.copy_from_slice(&map.data);
        Ok(())
    })
}

/// Dice overlap of `class` between two label arrays of length `len`.
/// Returns 1 when the class is absent from both.
///
/// # Safety
/// `pred` and `truth` must hold `len` integers; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sfbnet_dice(
    pred: *const i32,
    truth: *const i32,
    len: usize,
    class_id: i32,
    out: *mut f64,
) -> SfbnetStatus {
    guard(|| {
        let p = slice_arg(pred, len, "pred")?;
        let t = slice_arg(truth, len, "truth")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = dice_score(p, t, class_id);
        Ok(())
    })
}

/// Keeps the largest 4-connected foreground component of an `h x w` label
/// plane and sets everything else to background.
///
/// # Safety
/// `labels` and `out` must each hold `h * w` integers; they may alias.
#[no_mangle]
pub unsafe extern "C" fn sfbnet_largest_component(
    labels: *const i32,
    height: usize,
    width: usize,
    out: *mut i32,
) -> SfbnetStatus {
    guard(|| {
        let n = height
            .checked_mul(width)
            .ok_or_else(|| invalid("height * width overflows"))?;
        let input = slice_arg(labels, n, "labels")?.to_vec();
        let filtered = largest_component_plane(&input, height, width);
        slice_out(out, n, "out")?.copy_from_slice(&filtered);
        Ok(())
    })
}
