//! C interface. Transforms travel as opaque handles created from their JSON
//! form; images and masks cross the boundary as flat row-major buffers with
//! explicit dimensions. Every function returns a status code and leaves a
//! human-readable message for the last failure on the calling thread.
//!
//! The generated header lands in `include/historeg.h`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::fmt::Display;
use std::slice;

use historeg::geometry::{min_jacobian_det, warp_image, warp_mask, Transform2D};
use historeg::image::{Image2D, Mask2D};
use historeg::metrics::{dice, hausdorff_mm};
use historeg::Error;

/// Outcome of a call. Anything other than `Ok` means output arguments were
/// left untouched.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HrStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// Malformed transform JSON.
    ParseError = 3,
    /// Dimensions, parameter shapes, or argument values out of contract.
    InvalidArgument = 4,
    /// A mask without foreground where foreground is required.
    EmptyMask = 5,
    /// Non-finite values or a failed numerical solve.
    NumericalError = 6,
}

/// Opaque transform handle; create with `hr_transform_identity` or
/// `hr_transform_from_json`, release with `hr_transform_free`.
pub struct HrTransform(Transform2D);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn fail(status: HrStatus, message: impl Display) -> HrStatus {
    let text = message.to_string().replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(text).unwrap_or_default();
    });
    status
}

fn fail_error(e: &Error) -> HrStatus {
    let status = match e {
        Error::NonFinite(_) | Error::Degenerate(_) | Error::Solve(_) | Error::Optimization(_) => {
            HrStatus::NumericalError
        }
        Error::EmptyMask(_) => HrStatus::EmptyMask,
        Error::Format { .. } | Error::Checkpoint(_) | Error::Manifest(_) => HrStatus::ParseError,
        _ => HrStatus::InvalidArgument,
    };
    fail(status, e)
}

/// Message for the most recent failure on this thread, or an empty string.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn hr_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

fn checked_len(h: usize, w: usize) -> Option<usize> {
    if h == 0 || w == 0 {
        return None;
    }
    h.checked_mul(w)
}

unsafe fn image_from_raw(data: *const f64, h: usize, w: usize) -> Option<Image2D> {
    let len = checked_len(h, w)?;
    let buf = slice::from_raw_parts(data, len);
    Some(Image2D::from_fn(h, w, |r, c| buf[r * w + c]))
}

unsafe fn mask_from_raw(data: *const u8, h: usize, w: usize, spacing: (f64, f64)) -> Option<Mask2D> {
    let len = checked_len(h, w)?;
    let buf = slice::from_raw_parts(data, len);
    Some(Mask2D::from_fn(h, w, |r, c| buf[r * w + c] != 0).with_spacing(spacing))
}

/// Creates the identity transform.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn hr_transform_identity(out: *mut *mut HrTransform) -> HrStatus {
    if out.is_null() {
        return fail(HrStatus::NullPointer, "out is null");
    }
    *out = Box::into_raw(Box::new(HrTransform(Transform2D::identity())));
    HrStatus::Ok
}

/// Parses a transform from its JSON form.
///
/// # Safety
/// `json` must be a valid NUL-terminated C string; `out` must point to
/// writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn hr_transform_from_json(
    json: *const c_char,
    out: *mut *mut HrTransform,
) -> HrStatus {
    if json.is_null() || out.is_null() {
        return fail(HrStatus::NullPointer, "json or out is null");
    }
    let text = match CStr::from_ptr(json).to_str() {
        Ok(t) => t,
        Err(e) => return fail(HrStatus::InvalidUtf8, e),
    };
    match Transform2D::from_json_str(text) {
        Ok(t) => {
            *out = Box::into_raw(Box::new(HrTransform(t)));
            HrStatus::Ok
        }
        Err(e) => fail_error(&e),
    }
}

/// Serializes a transform to JSON. The returned string must be released with
/// `hr_string_free`.
///
/// # Safety
/// `transform` must be a live handle from this library; `out` must point to
/// writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn hr_transform_to_json(
    transform: *const HrTransform,
    out: *mut *mut c_char,
) -> HrStatus {
    if transform.is_null() || out.is_null() {
        return fail(HrStatus::NullPointer, "transform or out is null");
    }
    match (*transform).0.to_json_string() {
        Ok(json) => match CString::new(json) {
            Ok(c) => {
                *out = c.into_raw();
                HrStatus::Ok
            }
            Err(e) => fail(HrStatus::InvalidArgument, e),
        },
        Err(e) => fail_error(&e),
    }
}

/// Releases a string returned by `hr_transform_to_json`.
///
/// # Safety
/// `s` must be a pointer previously returned by this library and not yet
/// freed; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn hr_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Releases a transform handle.
///
/// # Safety
/// `transform` must be a handle from this library that has not been freed;
/// null is ignored.
#[no_mangle]
pub unsafe extern "C" fn hr_transform_free(transform: *mut HrTransform) {
    if !transform.is_null() {
        drop(Box::from_raw(transform));
    }
}

/// Evaluates the transform at a point of the normalized domain, writing the
/// mapped point to `out_x`/`out_y`.
///
/// # Safety
/// `transform` must be a live handle; `out_x` and `out_y` must point to
/// writable doubles.
#[no_mangle]
pub unsafe extern "C" fn hr_transform_eval(
    transform: *const HrTransform,
    x: f64,
    y: f64,
    out_x: *mut f64,
    out_y: *mut f64,
) -> HrStatus {
    if transform.is_null() || out_x.is_null() || out_y.is_null() {
        return fail(HrStatus::NullPointer, "transform or out is null");
    }
    let q = (*transform).0.eval([x, y]);
    *out_x = q[0];
    *out_y = q[1];
    HrStatus::Ok
}

/// Minimum finite-difference Jacobian determinant over an `n x n` probe grid;
/// positive means no folding at the probed scale.
///
/// # Safety
/// `transform` must be a live handle; `out` must point to a writable double.
#[no_mangle]
pub unsafe extern "C" fn hr_transform_min_jacobian_det(
    transform: *const HrTransform,
    n: usize,
    step: f64,
    out: *mut f64,
) -> HrStatus {
    if transform.is_null() || out.is_null() {
        return fail(HrStatus::NullPointer, "transform or out is null");
    }
    if n == 0 || !(step > 0.0 && step.is_finite()) {
        return fail(HrStatus::InvalidArgument, "need n >= 1 and a positive step");
    }
    *out = min_jacobian_det(&(*transform).0, n, step);
    HrStatus::Ok
}

/// Warps an intensity image: for every output pixel the transform maps its
/// normalized position into the source, which is sampled bilinearly with
/// zero padding. Buffers are row-major.
///
/// # Safety
/// `transform` must be a live handle. `src` must point to `src_h * src_w`
/// readable doubles and `dst` to `dst_h * dst_w` writable doubles; the
/// buffers must not overlap.
#[no_mangle]
pub unsafe extern "C" fn hr_warp_image(
    transform: *const HrTransform,
    src: *const f64,
    src_h: usize,
    src_w: usize,
    dst: *mut f64,
    dst_h: usize,
    dst_w: usize,
) -> HrStatus {
    if transform.is_null() || src.is_null() || dst.is_null() {
        return fail(HrStatus::NullPointer, "transform or buffer is null");
    }
    let (Some(moving), Some(out_len)) = (image_from_raw(src, src_h, src_w), checked_len(dst_h, dst_w))
    else {
        return fail(HrStatus::InvalidArgument, "image dimensions must be nonzero");
    };
    let warped = warp_image(&moving, &(*transform).0, (dst_h, dst_w));
    let out = slice::from_raw_parts_mut(dst, out_len);
    for (r, row) in warped.data().outer_iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            out[r * dst_w + c] = v;
        }
    }
    HrStatus::Ok
}

/// Mask variant of `hr_warp_image`: nearest-neighbor sampling, nonzero bytes
/// are foreground, the output holds 0 or 1.
///
/// # Safety
/// Same contracts as `hr_warp_image`, with byte buffers.
#[no_mangle]
pub unsafe extern "C" fn hr_warp_mask(
    transform: *const HrTransform,
    src: *const u8,
    src_h: usize,
    src_w: usize,
    dst: *mut u8,
    dst_h: usize,
    dst_w: usize,
) -> HrStatus {
    if transform.is_null() || src.is_null() || dst.is_null() {
        return fail(HrStatus::NullPointer, "transform or buffer is null");
    }
    let (Some(moving), Some(out_len)) =
        (mask_from_raw(src, src_h, src_w, (1.0, 1.0)), checked_len(dst_h, dst_w))
    else {
        return fail(HrStatus::InvalidArgument, "mask dimensions must be nonzero");
    };
    let warped = warp_mask(&moving, &(*transform).0, (dst_h, dst_w));
    let out = slice::from_raw_parts_mut(dst, out_len);
    for (r, row) in warped.data().outer_iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            out[r * dst_w + c] = v as u8;
        }
    }
    HrStatus::Ok
}

/// Dice overlap of two masks on the same raster. Nonzero bytes are
/// foreground; an all-background mask on either side yields `EmptyMask`.
///
/// # Safety
/// `a` and `b` must each point to `h * w` readable bytes; `out` must point
/// to a writable double.
#[no_mangle]
pub unsafe extern "C" fn hr_dice(
    a: *const u8,
    b: *const u8,
    h: usize,
    w: usize,
    out: *mut f64,
) -> HrStatus {
    if a.is_null() || b.is_null() || out.is_null() {
        return fail(HrStatus::NullPointer, "mask or out is null");
    }
    let (Some(ma), Some(mb)) = (
        mask_from_raw(a, h, w, (1.0, 1.0)),
        mask_from_raw(b, h, w, (1.0, 1.0)),
    ) else {
        return fail(HrStatus::InvalidArgument, "mask dimensions must be nonzero");
    };
    match dice(&ma, &mb) {
        Ok(v) => {
            *out = v;
            HrStatus::Ok
        }
        Err(e) => fail_error(&e),
    }
}

/// Symmetric Hausdorff distance between mask boundaries, in mm, with pixel
/// pitches `sx` (column) and `sy` (row).
///
/// # Safety
/// Same buffer contracts as `hr_dice`.
#[no_mangle]
pub unsafe extern "C" fn hr_hausdorff_mm(
    a: *const u8,
    b: *const u8,
    h: usize,
    w: usize,
    sx: f64,
    sy: f64,
    out: *mut f64,
) -> HrStatus {
    if a.is_null() || b.is_null() || out.is_null() {
        return fail(HrStatus::NullPointer, "mask or out is null");
    }
    if !(sx > 0.0 && sy > 0.0 && sx.is_finite() && sy.is_finite()) {
        return fail(HrStatus::InvalidArgument, "pixel pitches must be positive");
    }
    let (Some(ma), Some(mb)) = (
        mask_from_raw(a, h, w, (sx, sy)),
        mask_from_raw(b, h, w, (sx, sy)),
    ) else {
        return fail(HrStatus::InvalidArgument, "mask dimensions must be nonzero");
    };
    match hausdorff_mm(&ma, &mb) {
        Ok(v) => {
            *out = v;
            HrStatus::Ok
        }
        Err(e) => fail_error(&e),
    }
}
