//! C ABI for `cloudcrf`.
//!
//! Images and parameter sets are opaque heap handles owned by the caller
//! and released with the matching `*_free` function. Every fallible call
//! returns a [`CcStatus`]; on failure the message is available from
//! [`cc_last_error`] on the same thread until the next failing call.
//!
//! Masks cross the boundary as one byte per pixel in raster order:
//! 0 = sky, 255 = cloud, 128 = ignore.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use cloudcrf::evaluation::{confusion, metrics};
use cloudcrf::imaging::{compute_features, load_image};
use cloudcrf::inference::IcmOptions;
use cloudcrf::synthgen::{generate, SynthSpec};
use cloudcrf::{detect, CrfParams, Error, Mask, MaskValue, PixelImage, SegmentConfig};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Decode = 4,
    DimensionMismatch = 5,
    EmptyInput = 6,
    Degenerate = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

impl From<&Error> for CcStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Io { .. } => CcStatus::Io,
            Error::UnsupportedFormat(_) | Error::Decode { .. } | Error::Parse { .. } | Error::Json(_) => {
                CcStatus::Decode
            }
            Error::DimensionMismatch { .. } => CcStatus::DimensionMismatch,
            Error::EmptyInput(_) => CcStatus::EmptyInput,
            Error::DegenerateFit(_) => CcStatus::Degenerate,
            Error::Capacity { .. } | Error::Contract(_) | Error::InvalidParams(_) => CcStatus::InvalidArgument,
        }
    }
}

/// Opaque RGB image with an optional ignore mask.
pub struct CcImage {
    inner: PixelImage,
}

/// Opaque CRF parameter set.
pub struct CcParams {
    inner: CrfParams,
}

/// Segmentation and inference settings for [`cc_detect`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct CcDetectOptions {
    pub spatial_bandwidth: f64,
    pub range_bandwidth: f64,
    pub min_region_size: u32,
    pub neighbor_radius: f64,
    pub max_sweeps: u32,
    pub exact_local: bool,
}

/// Pixel-level comparison of a predicted mask against truth. Undefined
/// ratios are NaN.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct CcMetrics {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(CcStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(CcStatus::from(&e), e.to_string())
    }
}

fn fail(status: CcStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CcStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            CcStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(fail(CcStatus::NullPointer, "path is null"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(CcStatus::InvalidArgument, "path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| fail(CcStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out_slice<'a, T>(p: *mut T, len: usize, need: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if p.is_null() {
        return Err(fail(CcStatus::NullPointer, format!("{what} is null")));
    }
    if len < need {
        return Err(fail(
            CcStatus::BufferTooSmall,
            format!("{what} holds {len} elements, {need} needed"),
        ));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn store<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(fail(CcStatus::NullPointer, "output handle pointer is null"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

fn write_mask(mask: &Mask, buf: &mut [u8]) {
    for (b, v) in buf.iter_mut().zip(&mask.values) {
        *b = v.to_gray();
    }
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn cc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Load a PNG or PPM image; a `<stem>.mask.png` sidecar is applied.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn cc_image_load(path: *const c_char, out: *mut *mut CcImage) -> CcStatus {
    guard(|| {
        let img = load_image(&path_arg(path)?)?;
        store(out, CcImage { inner: img })
    })
}

/// Build an image from `width * height * 3` interleaved RGB bytes.
///
/// # Safety
/// `rgb` must point to `len` readable bytes and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cc_image_from_rgb(
    width: u32,
    height: u32,
    rgb: *const u8,
    len: usize,
    out: *mut *mut CcImage,
) -> CcStatus {
    guard(|| {
        if rgb.is_null() {
            return Err(fail(CcStatus::NullPointer, "rgb is null"));
        }
        let need = width as usize * height as usize * 3;
        if len != need {
            return Err(fail(
                CcStatus::InvalidArgument,
                format!("{len} bytes for a {width}x{height} RGB image, expected {need}"),
            ));
        }
        let bytes = std::slice::from_raw_parts(rgb, len);
        let pixels = bytes.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        store(out, CcImage {
            inner: PixelImage::new(width, height, pixels)?,
        })
    })
}

/// # Safety
/// `img` must be null or a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn cc_image_free(img: *mut CcImage) {
    if !img.is_null() {
        drop(Box::from_raw(img));
    }
}

/// # Safety
/// `img` must be a live handle; the dimension pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn cc_image_dims(img: *const CcImage, width: *mut u32, height: *mut u32) -> CcStatus {
    guard(|| {
        let (w, h) = handle(img, "image")?.inner.dims();
        if let Some(p) = width.as_mut() {
            *p = w;
        }
        if let Some(p) = height.as_mut() {
            *p = h;
        }
        Ok(())
    })
}

/// Fill per-pixel NBR and NSV buffers of `len >= width * height`. Either
/// buffer may be null to skip it. Ignored pixels are NaN.
///
/// # Safety
/// Non-null buffers must hold `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn cc_features(img: *const CcImage, nbr: *mut f64, nsv: *mut f64, len: usize) -> CcStatus {
    guard(|| {
        let img = &handle(img, "image")?.inner;
        let feats = compute_features(img);
        if !nbr.is_null() {
            out_slice(nbr, len, img.len(), "nbr buffer")?[..img.len()].copy_from_slice(&feats.nbr);
        }
        if !nsv.is_null() {
            out_slice(nsv, len, img.len(), "nsv buffer")?[..img.len()].copy_from_slice(&feats.nsv);
        }
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn cc_detect_options_default() -> CcDetectOptions {
    let seg = SegmentConfig::default();
    let icm = IcmOptions::default();
    CcDetectOptions {
        spatial_bandwidth: seg.mean_shift.spatial_bandwidth,
        range_bandwidth: seg.mean_shift.range_bandwidth,
        min_region_size: seg.mean_shift.min_region_size as u32,
        neighbor_radius: seg.neighbor_radius,
        max_sweeps: icm.max_sweeps as u32,
        exact_local: icm.exact_local,
    }
}

/// Segment and label an image, writing `width * height` mask bytes.
/// `opts` may be null for the defaults.
///
/// # Safety
/// Handles must be live, `opts` null or readable, `mask` `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn cc_detect(
    img: *const CcImage,
    params: *const CcParams,
    opts: *const CcDetectOptions,
    mask: *mut u8,
    len: usize,
) -> CcStatus {
    guard(|| {
        let img = &handle(img, "image")?.inner;
        let params = &handle(params, "params")?.inner;
        let o = opts.as_ref().copied().unwrap_or_else(|| cc_detect_options_default());
        let mut seg = SegmentConfig::default();
        seg.mean_shift.spatial_bandwidth = o.spatial_bandwidth;
        seg.mean_shift.range_bandwidth = o.range_bandwidth;
        seg.mean_shift.min_region_size = o.min_region_size as usize;
        seg.neighbor_radius = o.neighbor_radius;
        let icm = IcmOptions {
            max_sweeps: o.max_sweeps as usize,
            exact_local: o.exact_local,
            ..IcmOptions::default()
        };
        let buf = out_slice(mask, len, img.len(), "mask buffer")?;
        let (m, _, _) = detect(img, params, &seg, &icm)?;
        write_mask(&m, buf);
        Ok(())
    })
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cc_params_new(alpha0: f64, alpha1: f64, beta: f64, out: *mut *mut CcParams) -> CcStatus {
    guard(|| {
        store(out, CcParams {
            inner: CrfParams::new(alpha0, alpha1, beta)?,
        })
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cc_params_load(path: *const c_char, out: *mut *mut CcParams) -> CcStatus {
    guard(|| {
        let p = CrfParams::load(&path_arg(path)?)?;
        store(out, CcParams { inner: p })
    })
}

/// # Safety
/// `params` must be live and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn cc_params_save(params: *const CcParams, path: *const c_char) -> CcStatus {
    guard(|| {
        let p = handle(params, "params")?;
        Ok(p.inner.save(&path_arg(path)?)?)
    })
}

/// # Safety
/// `params` must be live; output pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn cc_params_get(
    params: *const CcParams,
    alpha0: *mut f64,
    alpha1: *mut f64,
    beta: *mut f64,
) -> CcStatus {
    guard(|| {
        let p = handle(params, "params")?.inner;
        for (dst, v) in [(alpha0, p.alpha0), (alpha1, p.alpha1), (beta, p.beta)] {
            if let Some(d) = dst.as_mut() {
                *d = v;
            }
        }
        Ok(())
    })
}

/// # Safety
/// `params` must be null or a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn cc_params_free(params: *mut CcParams) {
    if !params.is_null() {
        drop(Box::from_raw(params));
    }
}

/// Render a synthetic sky with default colours. The truth mask is written
/// to `truth` when it is non-null.
///
/// # Safety
/// `out` must be writable; `truth` null or `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn cc_synth(
    width: u32,
    height: u32,
    n_clouds: u32,
    seed: u64,
    out: *mut *mut CcImage,
    truth: *mut u8,
    len: usize,
) -> CcStatus {
    guard(|| {
        let spec = SynthSpec {
            width,
            height,
            n_clouds,
            seed,
            ..SynthSpec::default()
        };
        let (img, mask) = generate(&spec)?;
        if !truth.is_null() {
            write_mask(&mask, out_slice(truth, len, img.len(), "truth buffer")?);
        }
        store(out, CcImage { inner: img })
    })
}

/// Compare two mask buffers of `len` bytes each. Pixels that are ignore
/// (neither near 0 nor near 255) in either mask are skipped.
///
/// # Safety
/// `pred` and `truth` must hold `len` readable bytes; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cc_metrics(pred: *const u8, truth: *const u8, len: usize, out: *mut CcMetrics) -> CcStatus {
    guard(|| {
        if pred.is_null() || truth.is_null() || out.is_null() {
            return Err(fail(CcStatus::NullPointer, "mask or output pointer is null"));
        }
        let to_mask = |p: *const u8| {
            let values = std::slice::from_raw_parts(p, len).iter().map(|&v| MaskValue::from_gray(v)).collect();
            Mask::new(len as u32, 1, values)
        };
        let cm = confusion(&to_mask(pred)?, &to_mask(truth)?)?;
        let m = metrics(&cm);
        *out = CcMetrics {
            tp: cm.tp,
            tn: cm.tn,
            fp: cm.fp,
            fn_: cm.fn_,
            accuracy: m.accuracy.unwrap_or(f64::NAN),
            precision: m.precision.unwrap_or(f64::NAN),
            recall: m.recall.unwrap_or(f64::NAN),
        };
        Ok(())
    })
}
