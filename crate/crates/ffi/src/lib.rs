//! C ABI over the defog2refog library.
//!
//! Images cross the boundary as interleaved RGB `float` buffers in `[0, 1]`,
//! row-major, `3 * height * width` values long. Transmission maps are
//! `height * width` values. Every function returns a [`D2rStatus`]; on
//! failure [`d2r_last_error`] describes the cause for the calling thread.
//! Models are opaque handles released with [`d2r_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use defog2refog::fogmodel::{synthesize_fog, AtmosphericLight, ImageTensor, RangeTag, TransmissionMap};
use defog2refog::metrics::{bave_indicators, fog_density_proxy};
use defog2refog::trainer::DefogModel;
use defog2refog::{Error, Shape, Tensor};

/// Outcome of an FFI call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum D2rStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    NonFinite = 4,
    Io = 5,
    Image = 6,
    Format = 7,
    Integrity = 8,
    SpecHashMismatch = 9,
    Config = 10,
    Panic = 11,
}

/// Blind restoration indicators of an image pair.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct D2rBave {
    pub e: f64,
    pub r_bar: f64,
    pub delta: f64,
}

/// Trained defog generator.
pub struct D2rModel {
    inner: DefogModel,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).expect("nul bytes removed"));
}

fn status_of(e: &Error) -> D2rStatus {
    match e {
        Error::Parameter { .. } | Error::InsufficientSky { .. } => D2rStatus::InvalidArgument,
        Error::Shape(_) => D2rStatus::Shape,
        Error::NonFinite { .. } => D2rStatus::NonFinite,
        Error::Config(_) => D2rStatus::Config,
        Error::SpecHashMismatch { .. } => D2rStatus::SpecHashMismatch,
        Error::Integrity(_) => D2rStatus::Integrity,
        Error::Image { .. } => D2rStatus::Image,
        Error::Io { .. } => D2rStatus::Io,
        Error::Csv(_) | Error::Format { .. } => D2rStatus::Format,
    }
}

struct Failure(D2rStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(D2rStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, recording any error or panic for [`d2r_last_error`].
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> D2rStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            D2rStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            D2rStatus::Panic
        }
    }
}

fn pixel_count(height: usize, width: usize, channels: usize) -> Result<usize, Failure> {
    height
        .checked_mul(width)
        .and_then(|n| n.checked_mul(channels))
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure(D2rStatus::InvalidArgument, format!("invalid image size {height}x{width}")))
}

/// # Safety
/// `ptr` must be null or valid for reading `3 * height * width` floats.
unsafe fn read_image(ptr: *const f32, height: usize, width: usize, what: &str) -> Result<ImageTensor<f64>, Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    let n = pixel_count(height, width, 3)?;
    let src = std::slice::from_raw_parts(ptr, n);
    if let Some(i) = src.iter().position(|v| !v.is_finite()) {
        return Err(Failure(D2rStatus::NonFinite, format!("{what}[{i}] is not finite")));
    }
    let t = Tensor::from_fn(Shape::new(3, height, width), |c, y, x| src[(y * width + x) * 3 + c] as f64);
    Ok(ImageTensor::new(t, RangeTag::Unit)?)
}

/// # Safety
/// `ptr` must be valid for writing `3 * height * width` floats.
unsafe fn write_image(img: &ImageTensor<f64>, ptr: *mut f32) {
    let u = img.to_unit();
    let p = u.pixels();
    let (h, w) = (p.height(), p.width());
    let dst = std::slice::from_raw_parts_mut(ptr, 3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                dst[(y * w + x) * 3 + c] = p.at(c, y, x) as f32;
            }
        }
    }
}

/// Message describing the last failed call on this thread; empty after a
/// successful call. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn d2r_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn d2r_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads the defog generator from a training checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn d2r_model_load(path: *const c_char, out: *mut *mut D2rModel) -> D2rStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        *out = std::ptr::null_mut();
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Failure(D2rStatus::InvalidArgument, "path is not valid UTF-8".into()))?;
        let inner = DefogModel::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(D2rModel { inner }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`d2r_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn d2r_model_free(model: *mut D2rModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Side length the model was trained at.
///
/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn d2r_model_image_size(model: *const D2rModel, out: *mut usize) -> D2rStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = m.inner.image_size;
        Ok(())
    })
}

/// Removes fog from one image. The output has the input's size.
///
/// # Safety
/// `input` and `output` must each hold `3 * height * width` floats.
#[no_mangle]
pub unsafe extern "C" fn d2r_defog(
    model: *const D2rModel,
    input: *const f32,
    height: usize,
    width: usize,
    output: *mut f32,
) -> D2rStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if output.is_null() {
            return Err(null("output"));
        }
        let img = read_image(input, height, width, "input")?;
        let out = m.inner.defog(&img)?;
        write_image(&out, output);
        Ok(())
    })
}

/// Applies `I = J·T + A·(1 − T)`.
///
/// # Safety
/// `clear` and `output` must hold `3 * height * width` floats, `transmission`
/// `height * width` floats and `airlight` three floats.
#[no_mangle]
pub unsafe extern "C" fn d2r_synthesize_fog(
    clear: *const f32,
    transmission: *const f32,
    height: usize,
    width: usize,
    airlight: *const f32,
    output: *mut f32,
) -> D2rStatus {
    guard(|| {
        if transmission.is_null() {
            return Err(null("transmission"));
        }
        if airlight.is_null() {
            return Err(null("airlight"));
        }
        if output.is_null() {
            return Err(null("output"));
        }
        let j = read_image(clear, height, width, "clear")?;
        let n = pixel_count(height, width, 1)?;
        let tv = std::slice::from_raw_parts(transmission, n);
        if tv.iter().any(|v| !v.is_finite()) {
            return Err(Failure(D2rStatus::NonFinite, "transmission is not finite".into()));
        }
        let t = TransmissionMap::new(Tensor::from_vec(Shape::new(1, height, width), tv.iter().map(|&v| v as f64).collect())?)?;
        let a = std::slice::from_raw_parts(airlight, 3);
        let a = AtmosphericLight::new([a[0] as f64, a[1] as f64, a[2] as f64])?;
        write_image(&synthesize_fog(&j, &t, &a)?, output);
        Ok(())
    })
}

/// Visible-edge gain, mean gradient ratio and newly saturated fraction of
/// `after` relative to `before`.
///
/// # Safety
/// Both images must hold `3 * height * width` floats; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn d2r_bave(
    before: *const f32,
    after: *const f32,
    height: usize,
    width: usize,
    out: *mut D2rBave,
) -> D2rStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let b = read_image(before, height, width, "before")?;
        let a = read_image(after, height, width, "after")?;
        let r = bave_indicators(&b, &a)?;
        *out = D2rBave {
            e: r.e,
            r_bar: r.r_bar,
            delta: r.delta,
        };
        Ok(())
    })
}

/// Dark-channel fog density; higher means foggier.
///
/// # Safety
/// `image` must hold `3 * height * width` floats; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn d2r_fog_density(image: *const f32, height: usize, width: usize, out: *mut f64) -> D2rStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = fog_density_proxy(&read_image(image, height, width, "image")?);
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn last_error() -> String {
        unsafe { CStr::from_ptr(d2r_last_error()) }.to_string_lossy().into_owned()
    }

    #[test]
    fn null_arguments_are_reported() {
        let mut out = 0.0;
        let s = unsafe { d2r_fog_density(std::ptr::null(), 8, 8, &mut out) };
        assert_eq!(s, D2rStatus::NullPointer);
        assert!(last_error().contains("image"));
        let mut m = std::ptr::null_mut();
        assert_eq!(unsafe { d2r_model_load(std::ptr::null(), &mut m) }, D2rStatus::NullPointer);
        unsafe { d2r_model_free(std::ptr::null_mut()) };
    }

    #[test]
    fn errors_map_to_codes_and_clear_on_success() {
        let img = vec![0.5f32; 3 * 4 * 4];
        let mut out = 0.0;
        assert_eq!(unsafe { d2r_fog_density(img.as_ptr(), 4, 4, &mut out) }, D2rStatus::Shape);
        assert!(!last_error().is_empty());
        assert_eq!(unsafe { d2r_fog_density(img.as_ptr(), 0, 4, &mut out) }, D2rStatus::InvalidArgument);
        let img = vec![0.5f32; 3 * 8 * 8];
        assert_eq!(unsafe { d2r_fog_density(img.as_ptr(), 8, 8, &mut out) }, D2rStatus::Ok);
        assert_eq!(out, 0.5);
        assert!(last_error().is_empty());
        let mut bad = img.clone();
        bad[5] = f32::NAN;
        assert_eq!(unsafe { d2r_fog_density(bad.as_ptr(), 8, 8, &mut out) }, D2rStatus::NonFinite);
    }

    #[test]
    fn version_is_the_package_version() {
        let v = unsafe { CStr::from_ptr(d2r_version()) };
        assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    }
}
