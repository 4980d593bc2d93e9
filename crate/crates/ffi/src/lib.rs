//! C ABI over `restorelab`.
//!
//! Objects cross the boundary as opaque pointers created by `rl_*_new` /
//! `rl_*_load` and released with the matching `rl_*_free`. Every fallible
//! function returns an [`RlStatus`]; on failure the message is available from
//! [`rl_last_error_message`] on the same thread until the next call.
//! Images are row-major `height × width × channels` `float` buffers in `[0, 1]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use candle_core::{DType, Device};
use restorelab::backbone::{Backbone, BackboneConfig};
use restorelab::degradation::DegradationSpec;
use restorelab::image::Image;
use restorelab::objective::{psnr, ssim};
use restorelab::restoration::{NetConfig, RestorationModel};
use restorelab::trainer::load_checkpoint;
use restorelab::Error;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Shape = 4,
    Io = 5,
    Runtime = 6,
    Panic = 7,
}

/// Opaque image handle.
pub struct RlImage(Image);

/// Opaque restoration model handle.
pub struct RlModel(RestorationModel);

/// Opaque frozen backbone handle.
pub struct RlBackbone(Backbone);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> RlStatus {
    match err {
        Error::Argument(_) | Error::Empty(_) => RlStatus::InvalidArgument,
        Error::Config { .. } | Error::Json(_) => RlStatus::Config,
        Error::Shape(_) => RlStatus::Shape,
        Error::Io { .. } | Error::Image(_) | Error::Locked(_) => RlStatus::Io,
        _ => RlStatus::Runtime,
    }
}

/// Run `f`, translating errors and panics into a status plus a thread-local message.
fn guard(f: impl FnOnce() -> Result<(), (RlStatus, String)>) -> RlStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RlStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            RlStatus::Panic
        }
    }
}

fn lib(err: Error) -> (RlStatus, String) {
    (status_of(&err), err.to_string())
}

fn null(what: &str) -> (RlStatus, String) {
    (RlStatus::NullPointer, format!("{what} is NULL"))
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, (RlStatus, String)> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, (RlStatus, String)> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (RlStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (RlStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn opt_json<T: Default + serde::de::DeserializeOwned>(p: *const c_char, what: &str) -> Result<T, (RlStatus, String)> {
    if p.is_null() {
        return Ok(T::default());
    }
    let s = c_str(p, what)?;
    serde_json::from_str(s).map_err(|e| (RlStatus::Config, format!("{what}: {e}")))
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn rl_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copy `height*width*channels` floats into a new image.
///
/// # Safety
/// `data` must point to that many readable floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rl_image_new(
    height: usize,
    width: usize,
    channels: usize,
    data: *const f32,
    out: *mut *mut RlImage,
) -> RlStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        if data.is_null() {
            return Err(null("data"));
        }
        let n = height
            .checked_mul(width)
            .and_then(|v| v.checked_mul(channels))
            .ok_or((RlStatus::InvalidArgument, "image size overflows".into()))?;
        let buf = std::slice::from_raw_parts(data, n).to_vec();
        let img = Image::new(height, width, channels, buf).map_err(lib)?;
        *out = Box::into_raw(Box::new(RlImage(img)));
        Ok(())
    })
}

/// Load a PNG as an RGB image.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rl_image_load_png(path: *const c_char, out: *mut *mut RlImage) -> RlStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let path = PathBuf::from(c_str(path, "path")?);
        let img = Image::load_png(&path).map_err(lib)?;
        *out = Box::into_raw(Box::new(RlImage(img)));
        Ok(())
    })
}

/// Save as an 8-bit PNG.
///
/// # Safety
/// `image` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn rl_image_save_png(image: *const RlImage, path: *const c_char) -> RlStatus {
    guard(|| {
        let img = borrow(image, "image")?;
        let path = PathBuf::from(c_str(path, "path")?);
        img.0.save_png(&path).map_err(lib)
    })
}

/// # Safety
/// `image` must be a live handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn rl_image_dims(
    image: *const RlImage,
    height: *mut usize,
    width: *mut usize,
    channels: *mut usize,
) -> RlStatus {
    guard(|| {
        let img = &borrow(image, "image")?.0;
        *out_ptr(height, "height")? = img.height();
        *out_ptr(width, "width")? = img.width();
        *out_ptr(channels, "channels")? = img.channels();
        Ok(())
    })
}

/// Copy the pixels into `out`, which holds `len` floats (must equal the element count).
///
/// # Safety
/// `image` must be a live handle; `out` must have room for `len` floats.
#[no_mangle]
pub unsafe extern "C" fn rl_image_read(image: *const RlImage, out: *mut f32, len: usize) -> RlStatus {
    guard(|| {
        let img = &borrow(image, "image")?.0;
        if out.is_null() {
            return Err(null("out"));
        }
        if len != img.data().len() {
            return Err((
                RlStatus::Shape,
                format!("buffer holds {len} floats, image has {}", img.data().len()),
            ));
        }
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(img.data());
        Ok(())
    })
}

/// # Safety
/// `image` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rl_image_free(image: *mut RlImage) {
    if !image.is_null() {
        drop(Box::from_raw(image));
    }
}

/// Apply a degradation described by a JSON spec, e.g.
/// `{"kind":"noise","noise_sigma":25}`. Missing fields take their defaults.
///
/// # Safety
/// `image` must be a live handle, `spec_json` a NUL-terminated string, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rl_degrade(
    image: *const RlImage,
    spec_json: *const c_char,
    seed: u64,
    out: *mut *mut RlImage,
) -> RlStatus {
    guard(|| {
        let img = &borrow(image, "image")?.0;
        let out = out_ptr(out, "out")?;
        let spec: DegradationSpec = serde_json::from_str(c_str(spec_json, "spec_json")?)
            .map_err(|e| (RlStatus::Config, format!("spec_json: {e}")))?;
        let degraded = spec.apply(img, seed).map_err(lib)?;
        *out = Box::into_raw(Box::new(RlImage(degraded)));
        Ok(())
    })
}

/// PSNR in dB (peak 1), capped at 100 for identical images.
///
/// # Safety
/// Both handles must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rl_psnr(a: *const RlImage, b: *const RlImage, out: *mut f64) -> RlStatus {
    guard(|| {
        let v = psnr(&borrow(a, "a")?.0, &borrow(b, "b")?.0, 1.0).map_err(lib)?;
        *out_ptr(out, "out")? = v;
        Ok(())
    })
}

/// # Safety
/// Both handles must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rl_ssim(a: *const RlImage, b: *const RlImage, out: *mut f64) -> RlStatus {
    guard(|| {
        let v = ssim(&borrow(a, "a")?.0, &borrow(b, "b")?.0).map_err(lib)?;
        *out_ptr(out, "out")? = v;
        Ok(())
    })
}

/// Build a backbone from a JSON config (NULL = default toy ViT). A
/// pretrained config reads its weights path from the config or the
/// `RESTORELAB_BACKBONE_WEIGHTS` environment variable.
///
/// # Safety
/// `config_json` must be NULL or a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rl_backbone_new(config_json: *const c_char, out: *mut *mut RlBackbone) -> RlStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let cfg: BackboneConfig = opt_json(config_json, "config_json")?;
        let bb = Backbone::from_config(&cfg, DType::F32, &Device::Cpu).map_err(lib)?;
        *out = Box::into_raw(Box::new(RlBackbone(bb)));
        Ok(())
    })
}

/// Feature width of the backbone (the `guidance_channels` a guided model needs).
///
/// # Safety
/// `backbone` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rl_backbone_width(backbone: *const RlBackbone, out: *mut usize) -> RlStatus {
    guard(|| {
        *out_ptr(out, "out")? = borrow(backbone, "backbone")?.0.width();
        Ok(())
    })
}

/// # Safety
/// `backbone` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rl_backbone_free(backbone: *mut RlBackbone) {
    if !backbone.is_null() {
        drop(Box::from_raw(backbone));
    }
}

/// Fresh model from a JSON network config (NULL = defaults). A fresh model
/// has a zero output head and returns its input unchanged.
///
/// # Safety
/// `config_json` must be NULL or a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rl_model_new(
    config_json: *const c_char,
    guidance_channels: usize,
    seed: u64,
    out: *mut *mut RlModel,
) -> RlStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let cfg: NetConfig = opt_json(config_json, "config_json")?;
        let model = RestorationModel::new(&cfg, guidance_channels, DType::F32, &Device::Cpu, seed).map_err(lib)?;
        *out = Box::into_raw(Box::new(RlModel(model)));
        Ok(())
    })
}

/// Load a `.safetensors` checkpoint with its `.json` sidecar.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rl_model_load(path: *const c_char, out: *mut *mut RlModel) -> RlStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let path = PathBuf::from(c_str(path, "path")?);
        let (model, _) = load_checkpoint(&path).map_err(lib)?;
        *out = Box::into_raw(Box::new(RlModel(model)));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rl_model_num_parameters(model: *const RlModel, out: *mut usize) -> RlStatus {
    guard(|| {
        *out_ptr(out, "out")? = borrow(model, "model")?.0.count_parameters();
        Ok(())
    })
}

/// Restore a 3-channel image; output is clipped to `[0, 1]`. `backbone` may
/// be NULL for unguided models.
///
/// # Safety
/// `model` and `image` must be live handles, `backbone` NULL or live, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rl_model_restore(
    model: *const RlModel,
    backbone: *const RlBackbone,
    image: *const RlImage,
    out: *mut *mut RlImage,
) -> RlStatus {
    guard(|| {
        let model = &borrow(model, "model")?.0;
        let img = &borrow(image, "image")?.0;
        let out = out_ptr(out, "out")?;
        let bb = backbone.as_ref().map(|b| &b.0);
        let restored = model.restore(img, bb).map_err(lib)?;
        *out = Box::into_raw(Box::new(RlImage(restored)));
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rl_model_free(model: *mut RlModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
