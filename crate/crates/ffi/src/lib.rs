//! C ABI over the compression core: opaque generator handles, compress /
//! decompress into caller-freed buffers, and bitrate arithmetic.
//!
//! Every fallible call returns an `ScmpStatus`; on failure a thread-local
//! message is readable through `scmp_last_error_message` until the next
//! failing call on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;

use scmp::bitstream::{deserialize_bitstream_with, serialize_bitstream};
use scmp::checkpoint::Checkpoint;
use scmp::codec::{CodecConfig, Generator, ImageTensor, SchedulePreset};
use scmp::error::Error;
use scmp::train::{generator_from_checkpoint, generator_to_checkpoint};

/// Status codes shared by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScmpStatus {
    Ok = 0,
    /// Invalid arguments or configuration.
    Usage = 1,
    /// Missing tools or files.
    Environment = 2,
    /// Non-finite numerics during model execution.
    Numeric = 3,
    /// Malformed bitstream or checkpoint.
    Format = 4,
    /// Null pointer where one is not allowed.
    NullPointer = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &Error) -> ScmpStatus {
    match err {
        Error::Format(_) => ScmpStatus::Format,
        _ => match err.exit_code() {
            2 => ScmpStatus::Environment,
            3 => ScmpStatus::Numeric,
            _ => ScmpStatus::Usage,
        },
    }
}

fn fail(err: Error) -> ScmpStatus {
    let status = status_of(&err);
    set_error(&err.to_string());
    status
}

/// Message from the most recent failing call on this thread. Valid until
/// the next failing call; never null.
#[no_mangle]
pub extern "C" fn scmp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Opaque compression model handle.
pub struct ScmpGenerator {
    inner: Generator,
}

/// Create a model with `feature_maps` latent channels and `levels`
/// quantizer levels. `tiny_schedule` selects the desk-scale channel widths.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn scmp_generator_new(
    feature_maps: usize,
    levels: usize,
    seed: u64,
    tiny_schedule: bool,
    out: *mut *mut ScmpGenerator,
) -> ScmpStatus {
    if out.is_null() {
        set_error("out pointer is null");
        return ScmpStatus::NullPointer;
    }
    let preset = if tiny_schedule {
        SchedulePreset::Tiny
    } else {
        SchedulePreset::Full
    };
    let config = match CodecConfig::new(feature_maps, levels, preset) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    match Generator::new(config, seed) {
        Ok(g) => {
            unsafe { *out = Box::into_raw(Box::new(ScmpGenerator { inner: g })) };
            ScmpStatus::Ok
        }
        Err(e) => fail(e),
    }
}

unsafe fn path_from(ptr: *const c_char) -> Result<&'static Path, ScmpStatus> {
    if ptr.is_null() {
        set_error("path is null");
        return Err(ScmpStatus::NullPointer);
    }
    match unsafe { CStr::from_ptr(ptr) }.to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => {
            set_error("path is not valid UTF-8");
            Err(ScmpStatus::Usage)
        }
    }
}

/// Load a model from a checkpoint file produced by the trainer.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn scmp_generator_load(
    path: *const c_char,
    out: *mut *mut ScmpGenerator,
) -> ScmpStatus {
    if out.is_null() {
        set_error("out pointer is null");
        return ScmpStatus::NullPointer;
    }
    let path = match unsafe { path_from(path) } {
        Ok(p) => p,
        Err(s) => return s,
    };
    let generator = Checkpoint::load(path).and_then(|c| generator_from_checkpoint(&c));
    match generator {
        Ok(g) => {
            unsafe { *out = Box::into_raw(Box::new(ScmpGenerator { inner: g })) };
            ScmpStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Save a model to a checkpoint file.
///
/// # Safety
/// `handle` must come from a `scmp_generator_*` constructor; `path` must be
/// a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn scmp_generator_save(
    handle: *mut ScmpGenerator,
    path: *const c_char,
) -> ScmpStatus {
    if handle.is_null() {
        set_error("generator handle is null");
        return ScmpStatus::NullPointer;
    }
    let path = match unsafe { path_from(path) } {
        Ok(p) => p,
        Err(s) => return s,
    };
    let generator = unsafe { &mut *handle };
    match generator_to_checkpoint(&mut generator.inner).save(path) {
        Ok(()) => ScmpStatus::Ok,
        Err(e) => fail(e),
    }
}

/// Destroy a generator handle. Null is a no-op.
///
/// # Safety
/// `handle` must come from a `scmp_generator_*` constructor and must not be
/// used afterwards.
#[no_mangle]
pub unsafe extern "C" fn scmp_generator_free(handle: *mut ScmpGenerator) {
    if !handle.is_null() {
        drop(unsafe { Box::from_raw(handle) });
    }
}

/// Nominal bitrate of a generator in bits per pixel.
///
/// # Safety
/// `handle` must come from a `scmp_generator_*` constructor.
#[no_mangle]
pub unsafe extern "C" fn scmp_generator_bitrate_bpp(handle: *const ScmpGenerator) -> f64 {
    if handle.is_null() {
        return f64::NAN;
    }
    unsafe { &*handle }.inner.config.bitrate_bpp()
}

/// Bitrate in bits per pixel for `feature_maps` latent channels, `levels`
/// quantizer levels, and spatial downsampling factor `d`.
#[no_mangle]
pub extern "C" fn scmp_bitrate_bpp(feature_maps: usize, levels: usize, d: usize) -> f64 {
    scmp::bitstream::bitrate_bpp(feature_maps, levels, d)
}

/// Total information content in bits of one latent code for an `h` x `w`
/// image. Fails if the dims are not divisible by `d`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn scmp_latent_information_bits(
    h: usize,
    w: usize,
    feature_maps: usize,
    levels: usize,
    d: usize,
    out: *mut f64,
) -> ScmpStatus {
    if out.is_null() {
        set_error("out pointer is null");
        return ScmpStatus::NullPointer;
    }
    match scmp::bitstream::latent_information_bits(h, w, feature_maps, levels, d) {
        Ok(bits) => {
            unsafe { *out = bits };
            ScmpStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Free a buffer returned by `scmp_compress` or `scmp_decompress`.
///
/// # Safety
/// `ptr`/`len` must be exactly the pair returned by this library.
#[no_mangle]
pub unsafe extern "C" fn scmp_buffer_free(ptr: *mut u8, len: usize) {
    if !ptr.is_null() {
        drop(unsafe { Vec::from_raw_parts(ptr, len, len) });
    }
}

fn give_buffer(bytes: Vec<u8>, out_ptr: *mut *mut u8, out_len: *mut usize) {
    let mut bytes = bytes;
    bytes.shrink_to_fit();
    let len = bytes.len();
    let ptr = bytes.as_mut_ptr();
    std::mem::forget(bytes);
    unsafe {
        *out_ptr = ptr;
        *out_len = len;
    }
}

/// Compress an 8-bit interleaved RGB image (row-major, `h*w*3` bytes) into
/// a bitstream allocated by the library (free with `scmp_buffer_free`).
///
/// # Safety
/// `rgb` must point to `h*w*3` readable bytes; `out_ptr`/`out_len` must be
/// valid pointers; `handle` must come from a `scmp_generator_*` constructor.
#[no_mangle]
pub unsafe extern "C" fn scmp_compress(
    handle: *mut ScmpGenerator,
    rgb: *const u8,
    h: usize,
    w: usize,
    out_ptr: *mut *mut u8,
    out_len: *mut usize,
) -> ScmpStatus {
    if handle.is_null() || rgb.is_null() || out_ptr.is_null() || out_len.is_null() {
        set_error("null pointer argument");
        return ScmpStatus::NullPointer;
    }
    let generator = unsafe { &mut *handle };
    let pixels = unsafe { std::slice::from_raw_parts(rgb, h * w * 3) };
    let Some(img) = image::RgbImage::from_raw(w as u32, h as u32, pixels.to_vec()) else {
        set_error("rgb buffer does not match the stated dimensions");
        return ScmpStatus::Usage;
    };
    let tensor = ImageTensor::from_rgb8(&img);
    let result = generator
        .inner
        .compress(&tensor)
        .and_then(|code| serialize_bitstream(&code, generator.inner.config.levels));
    match result {
        Ok(bytes) => {
            give_buffer(bytes, out_ptr, out_len);
            ScmpStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Decompress a bitstream into an 8-bit interleaved RGB buffer allocated by
/// the library (free with `scmp_buffer_free`); writes the image dims too.
///
/// # Safety
/// `data` must point to `len` readable bytes; `out_ptr`, `out_len`,
/// `out_h`, `out_w` must be valid pointers; `handle` must come from a
/// `scmp_generator_*` constructor.
#[no_mangle]
pub unsafe extern "C" fn scmp_decompress(
    handle: *mut ScmpGenerator,
    data: *const u8,
    len: usize,
    out_ptr: *mut *mut u8,
    out_len: *mut usize,
    out_h: *mut usize,
    out_w: *mut usize,
) -> ScmpStatus {
    if handle.is_null()
        || data.is_null()
        || out_ptr.is_null()
        || out_len.is_null()
        || out_h.is_null()
        || out_w.is_null()
    {
        set_error("null pointer argument");
        return ScmpStatus::NullPointer;
    }
    let generator = unsafe { &mut *handle };
    let bytes = unsafe { std::slice::from_raw_parts(data, len) };
    let result = deserialize_bitstream_with(bytes, generator.inner.config.downsampling())
        .and_then(|(code, levels)| {
            if levels != generator.inner.config.levels {
                return Err(Error::Format(format!(
                    "bitstream uses {levels} levels but the model has {}",
                    generator.inner.config.levels
                )));
            }
            generator.inner.decompress(&code)
        });
    match result {
        Ok(tensor) => {
            let img = tensor.to_rgb8();
            let (w, h) = img.dimensions();
            unsafe {
                *out_h = h as usize;
                *out_w = w as usize;
            }
            give_buffer(img.into_raw(), out_ptr, out_len);
            ScmpStatus::Ok
        }
        Err(e) => fail(e),
    }
}
