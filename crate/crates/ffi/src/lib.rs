//! C ABI over the vesselforge pipeline.
//!
//! Every function returns a [`VfStatus`]; on failure a message is kept per
//! thread and can be read with [`vf_last_error`]. Images are row-major
//! `double` buffers of `width * height` values owned by the caller. Models
//! are opaque handles released with [`vf_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::slice;

use vesselforge::checkpoint::Checkpoint;
use vesselforge::model::{self, Model};
use vesselforge::octa;
use vesselforge::raster::Image2D;
use vesselforge::tensor::Precision;
use vesselforge::unet::{self, UNetParams};
use vesselforge::Error;

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VfStatus {
    VfOk = 0,
    VfNullArgument = 1,
    VfInvalidArgument = 2,
    VfIo = 3,
    VfData = 4,
    VfShape = 5,
    VfNumeric = 6,
    VfCheckpoint = 7,
    VfPanic = 8,
    VfInternal = 9,
}

/// Trained pipeline loaded from a checkpoint.
pub struct VfModel {
    model: Model,
    unet: UNetParams,
    step: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> VfStatus {
    match e.category() {
        "io" => VfStatus::VfIo,
        "data" => VfStatus::VfData,
        "shape" => VfStatus::VfShape,
        "numeric" => VfStatus::VfNumeric,
        "checkpoint" => VfStatus::VfCheckpoint,
        "usage" | "rejected" => VfStatus::VfInvalidArgument,
        _ => VfStatus::VfInternal,
    }
}

enum Failure {
    Null(&'static str),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> VfStatus {
    set_error("");
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => VfStatus::VfOk,
        Ok(Err(Failure::Null(name))) => {
            set_error(&format!("{name} is null"));
            VfStatus::VfNullArgument
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            VfStatus::VfPanic
        }
    }
}

fn non_null<T>(p: *const T, name: &'static str) -> Result<*const T, Failure> {
    if p.is_null() {
        Err(Failure::Null(name))
    } else {
        Ok(p)
    }
}

fn image_len(width: usize, height: usize) -> Result<usize, Failure> {
    match width.checked_mul(height) {
        Some(n) if n > 0 => Ok(n),
        _ => Err(Error::InvalidArgument(format!("bad image size {width}x{height}")).into()),
    }
}

/// # Safety
/// `p` must point to `len` readable doubles.
unsafe fn read_image(p: *const f64, width: usize, height: usize, name: &'static str) -> Result<Image2D, Failure> {
    let n = image_len(width, height)?;
    let data = slice::from_raw_parts(non_null(p, name)?, n).to_vec();
    Ok(Image2D::new(width, height, data)?)
}

/// # Safety
/// `p` must point to `src.len()` writable doubles.
unsafe fn write_out(p: *mut f64, src: &[f64], name: &'static str) -> Result<(), Failure> {
    non_null(p, name)?;
    slice::from_raw_parts_mut(p, src.len()).copy_from_slice(src);
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn vf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn vf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint manifest written by `vesselforge train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vf_model_load(path: *const c_char, out: *mut *mut VfModel) -> VfStatus {
    guard(|| {
        non_null(path, "path")?;
        non_null(out, "out")?;
        *out = std::ptr::null_mut();
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Error::InvalidArgument("path is not UTF-8".into()))?;
        let ck = Checkpoint::load(Path::new(p))?;
        let unet = ck.model.unet()?;
        *out = Box::into_raw(Box::new(VfModel {
            model: ck.model,
            unet,
            step: ck.step,
        }));
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from [`vf_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn vf_model_free(model: *mut VfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Training step stored in the checkpoint.
///
/// # Safety
/// `model` must be a live handle and `step` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vf_model_step(model: *const VfModel, step: *mut u64) -> VfStatus {
    guard(|| {
        let m = &*non_null(model, "model")?;
        non_null(step, "step")?;
        *step = m.step;
        Ok(())
    })
}

/// OCT-A intensity transform `out[i] = -min(in[i], 4) + 0.5`. `input` and
/// `output` may alias.
///
/// # Safety
/// Both pointers must address `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn vf_octa_transform(input: *const f64, output: *mut f64, len: usize) -> VfStatus {
    guard(|| {
        non_null(input, "input")?;
        non_null(output, "output")?;
        for i in 0..len {
            *output.add(i) = octa::transform_value(*input.add(i));
        }
        Ok(())
    })
}

/// Preprocessing U-Net alone on a `width x height` image of any size.
///
/// # Safety
/// `image` and `output` must address `width * height` doubles.
#[no_mangle]
pub unsafe extern "C" fn vf_unet_forward(
    model: *const VfModel,
    image: *const f64,
    width: usize,
    height: usize,
    output: *mut f64,
) -> VfStatus {
    guard(|| {
        let m = &*non_null(model, "model")?;
        let img = read_image(image, width, height, "image")?;
        let out = unet::pad_and_forward(&img, &m.unet, Precision::Double)?;
        write_out(output, &out.data, "output")
    })
}

/// Transform, U-Net and 50/50 blend of a raw OCT-A projection. Any of the
/// three outputs may be null to skip it.
///
/// # Safety
/// `raw` and every non-null output must address `width * height` doubles.
#[no_mangle]
pub unsafe extern "C" fn vf_octa_enhance(
    model: *const VfModel,
    raw: *const f64,
    width: usize,
    height: usize,
    transformed: *mut f64,
    output: *mut f64,
    blend: *mut f64,
) -> VfStatus {
    guard(|| {
        let m = &*non_null(model, "model")?;
        let mut img = read_image(raw, width, height, "raw")?;
        if img.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("raw image has non-finite values".into()).into());
        }
        img.data.iter_mut().for_each(|v| *v = octa::transform_value(*v));
        let out = unet::pad_and_forward(&img, &m.unet, Precision::Double)?;
        let mixed = octa::blend(&img, &out)?;
        for (p, src) in [(transformed, &img), (output, &out), (blend, &mixed)] {
            if !p.is_null() {
                write_out(p, &src.data, "output")?;
            }
        }
        Ok(())
    })
}

/// Full pipeline on a preprocessed fundus image: enhanced image and vessel
/// probability. Either output may be null.
///
/// # Safety
/// `image` and every non-null output must address `width * height` doubles.
#[no_mangle]
pub unsafe extern "C" fn vf_infer(
    model: *const VfModel,
    image: *const f64,
    width: usize,
    height: usize,
    enhanced: *mut f64,
    vessel_prob: *mut f64,
) -> VfStatus {
    guard(|| {
        let m = &*non_null(model, "model")?;
        let img = read_image(image, width, height, "image")?;
        let r = model::infer(&m.model, &img, Precision::Double)?;
        for (p, src) in [(enhanced, &r.enhanced), (vessel_prob, &r.vessel_prob)] {
            if !p.is_null() {
                write_out(p, &src.data, "output")?;
            }
        }
        Ok(())
    })
}
