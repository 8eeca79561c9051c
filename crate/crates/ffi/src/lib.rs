//! C ABI over the core library: opaque handles, integer status codes, and a
//! cbindgen-generated header (`include/udapose.h`).
//!
//! Contract: every fallible function returns [`UdaposeStatus`] with `OK`
//! equal to 0 and writes its outputs only on success (except documented
//! count outputs). Handles are opaque and must be released with their
//! matching `_free`; null pointers anywhere produce `NULL_ARG` instead of
//! undefined behavior. Panics never cross the boundary; they surface as
//! `INTERNAL`. The most recent failure message for the calling thread is
//! available via [`udapose_last_error`] until the next failing call.
//!
//! Images cross the boundary as dense row-major `double` buffers in
//! height x width x channel order with values in [0, 1] and 1 or 3
//! channels; heights and widths must be positive multiples of 16 for
//! synthesis and of 8 for pose inference.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use udapose::containers::load_checkpoint;
use udapose::freq::ain_normalize;
use udapose::image_data::Image;
use udapose::lcim;
use udapose::pose::model::{self, PoseConfig};
use udapose::pose::NUM_KEYPOINTS;
use udapose::params::ParamSet;
use udapose::synthesis::{self, AnnotatedSample, DomainTag};
use udapose::Error;

/// Status code returned by every fallible function.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum UdaposeStatus {
    Ok = 0,
    NullArg = 1,
    InvalidArg = 2,
    Io = 3,
    Format = 4,
    Numeric = 5,
    BufferTooSmall = 6,
    Internal = 7,
}

/// Length of [`UdaposeInstance::keypoints`]: x,y pairs for every joint.
pub const UDAPOSE_KEYPOINT_VALUES: usize = 28;
const _: () = assert!(UDAPOSE_KEYPOINT_VALUES == 2 * NUM_KEYPOINTS);

/// One detected person: confidence, normalized center-size box, and
/// normalized keypoint coordinates as x,y pairs in canonical joint order.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct UdaposeInstance {
    pub score: f64,
    pub box_cxcywh: [f64; 4],
    pub keypoints: [f64; UDAPOSE_KEYPOINT_VALUES],
}

/// Opaque handle around trained (or freshly initialized) adapter weights.
pub struct UdaposeAdapters {
    params: ParamSet,
}

/// Opaque handle around a pose decoder checkpoint.
pub struct UdaposePose {
    params: ParamSet,
    config: PoseConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|e| {
        *e.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

type Failure = (UdaposeStatus, String);

fn status_of(e: &Error) -> UdaposeStatus {
    match e {
        Error::Config(_)
        | Error::InvalidParameter { .. }
        | Error::EmptyDataset(_)
        | Error::DimMismatch { .. } => UdaposeStatus::InvalidArg,
        Error::Io(_) => UdaposeStatus::Io,
        Error::Format { .. } | Error::Codec(_) => UdaposeStatus::Format,
        Error::NonFinite(_) => UdaposeStatus::Numeric,
        Error::Stage { source, .. } => status_of(source),
        _ => UdaposeStatus::Internal,
    }
}

fn fail(e: Error) -> Failure {
    (status_of(&e), e.to_string())
}

fn guarded<F>(f: F) -> UdaposeStatus
where
    F: FnOnce() -> Result<(), Failure>,
{
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => UdaposeStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic in library call".to_string());
            set_error(&msg);
            UdaposeStatus::Internal
        }
    }
}

macro_rules! require_nonnull {
    ($ptr:expr, $name:literal) => {
        if $ptr.is_null() {
            return Err((
                UdaposeStatus::NullArg,
                concat!("null pointer: ", $name).to_string(),
            ));
        }
    };
}

fn check_dims(height: usize, width: usize, channels: usize) -> Result<(), Failure> {
    if height == 0 || width == 0 || (channels != 1 && channels != 3) {
        return Err((
            UdaposeStatus::InvalidArg,
            format!("invalid image dims {height}x{width}x{channels}: need positive sizes and 1 or 3 channels"),
        ));
    }
    Ok(())
}

/// # Safety
/// `data` must point to `height * width * channels` readable doubles.
unsafe fn image_from_raw(
    data: *const f64,
    height: usize,
    width: usize,
    channels: usize,
) -> Result<Image, Failure> {
    check_dims(height, width, channels)?;
    let slice = std::slice::from_raw_parts(data, height * width * channels);
    if slice.iter().any(|v| !v.is_finite()) {
        return Err((
            UdaposeStatus::Numeric,
            "input image contains non-finite values".to_string(),
        ));
    }
    Ok(Image::new(height, width, channels, slice.to_vec()))
}

/// # Safety
/// `path` must be a readable NUL-terminated string.
unsafe fn path_from_raw(path: *const c_char) -> Result<&'static Path, Failure> {
    let s = CStr::from_ptr(path).to_str().map_err(|_| {
        (
            UdaposeStatus::InvalidArg,
            "path is not valid UTF-8".to_string(),
        )
    })?;
    Ok(Path::new(s))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn udapose_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Number of keypoints per instance (size of the canonical joint order).
#[no_mangle]
pub extern "C" fn udapose_num_keypoints() -> usize {
    NUM_KEYPOINTS
}

/// Message of the calling thread's most recent failure. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn udapose_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Create untrained adapter weights seeded deterministically.
///
/// # Safety
/// `out` must be a valid pointer to receive the handle.
#[no_mangle]
pub unsafe extern "C" fn udapose_adapters_new(
    seed: u64,
    out: *mut *mut UdaposeAdapters,
) -> UdaposeStatus {
    guarded(|| {
        require_nonnull!(out, "out");
        let handle = Box::new(UdaposeAdapters {
            params: lcim::init_params(seed, 3),
        });
        *out = Box::into_raw(handle);
        Ok(())
    })
}

/// Load adapter weights from a checkpoint file.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be valid to receive the handle.
#[no_mangle]
pub unsafe extern "C" fn udapose_adapters_load(
    path: *const c_char,
    out: *mut *mut UdaposeAdapters,
) -> UdaposeStatus {
    guarded(|| {
        require_nonnull!(path, "path");
        require_nonnull!(out, "out");
        let ck = load_checkpoint(path_from_raw(path)?).map_err(fail)?;
        if ck.arch != lcim::ARCH_DESCRIPTOR {
            return Err((
                UdaposeStatus::InvalidArg,
                format!("not an adapter checkpoint (architecture {:?})", ck.arch),
            ));
        }
        *out = Box::into_raw(Box::new(UdaposeAdapters { params: ck.params }));
        Ok(())
    })
}

/// Release an adapter handle. Null is a no-op.
///
/// # Safety
/// `handle` must come from an `udapose_adapters_*` constructor, once.
#[no_mangle]
pub unsafe extern "C" fn udapose_adapters_free(handle: *mut UdaposeAdapters) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Load a pose decoder checkpoint.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be valid to receive the handle.
#[no_mangle]
pub unsafe extern "C" fn udapose_pose_load(
    path: *const c_char,
    out: *mut *mut UdaposePose,
) -> UdaposeStatus {
    guarded(|| {
        require_nonnull!(path, "path");
        require_nonnull!(out, "out");
        let ck = load_checkpoint(path_from_raw(path)?).map_err(fail)?;
        let config = model::config_from_descriptor(&ck.arch).map_err(fail)?;
        *out = Box::into_raw(Box::new(UdaposePose {
            params: ck.params,
            config,
        }));
        Ok(())
    })
}

/// Release a pose handle. Null is a no-op.
///
/// # Safety
/// `handle` must come from `udapose_pose_load`, once.
#[no_mangle]
pub unsafe extern "C" fn udapose_pose_free(handle: *mut UdaposePose) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Number of instance slots a pose handle emits per image.
///
/// # Safety
/// `handle` must be a live pose handle; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn udapose_pose_num_slots(
    handle: *const UdaposePose,
    out: *mut usize,
) -> UdaposeStatus {
    guarded(|| {
        require_nonnull!(handle, "handle");
        require_nonnull!(out, "out");
        *out = (*handle).config.num_groups;
        Ok(())
    })
}

/// Rescale an image so its global mean hits the reference intensity
/// (the default input normalization), writing `height*width*channels`
/// doubles to `out`.
///
/// # Safety
/// `data` and `out` must each point to `height * width * channels` doubles.
#[no_mangle]
pub unsafe extern "C" fn udapose_normalize_intensity(
    data: *const f64,
    height: usize,
    width: usize,
    channels: usize,
    target: f64,
    out: *mut f64,
) -> UdaposeStatus {
    guarded(|| {
        require_nonnull!(data, "data");
        require_nonnull!(out, "out");
        let img = image_from_raw(data, height, width, channels)?;
        let normalized = ain_normalize(&img, target).map_err(fail)?;
        std::slice::from_raw_parts_mut(out, normalized.data.len())
            .copy_from_slice(&normalized.data);
        Ok(())
    })
}

/// Run the full synthesis pipeline: turn a well-lit image into a synthetic
/// low-light one styled after `reference`. Writes
/// `height*width*channels` doubles (the well-lit dims) to `out`.
///
/// # Safety
/// Buffers must match their stated dims; `out` must hold the well-lit size.
#[no_mangle]
pub unsafe extern "C" fn udapose_synthesize(
    adapters: *const UdaposeAdapters,
    well_lit: *const f64,
    height: usize,
    width: usize,
    channels: usize,
    reference: *const f64,
    ref_height: usize,
    ref_width: usize,
    ref_channels: usize,
    cutoff_radius: f64,
    out: *mut f64,
) -> UdaposeStatus {
    guarded(|| {
        require_nonnull!(adapters, "adapters");
        require_nonnull!(well_lit, "well_lit");
        require_nonnull!(reference, "reference");
        require_nonnull!(out, "out");
        let wl = image_from_raw(well_lit, height, width, channels)?;
        let rf = image_from_raw(reference, ref_height, ref_width, ref_channels)?;
        let sample = AnnotatedSample {
            image: wl,
            instances: Vec::new(),
            source_id: "ffi".to_string(),
            domain_tag: DomainTag::WellLit,
        };
        let synth =
            synthesis::synthesize_lowlight(&sample, &rf, &(*adapters).params, cutoff_radius)
                .map_err(fail)?;
        std::slice::from_raw_parts_mut(out, synth.image.data.len())
            .copy_from_slice(&synth.image.data);
        Ok(())
    })
}

/// Detect pose instances in an image. `count` always receives the number of
/// available instances; when `capacity` is too small the status is
/// `BUFFER_TOO_SMALL` and `instances` is untouched.
///
/// # Safety
/// `data` must match its dims; `instances` must hold `capacity` entries.
#[no_mangle]
pub unsafe extern "C" fn udapose_pose_infer(
    handle: *const UdaposePose,
    data: *const f64,
    height: usize,
    width: usize,
    channels: usize,
    instances: *mut UdaposeInstance,
    capacity: usize,
    count: *mut usize,
) -> UdaposeStatus {
    guarded(|| {
        require_nonnull!(handle, "handle");
        require_nonnull!(data, "data");
        require_nonnull!(count, "count");
        let img = image_from_raw(data, height, width, channels)?;
        let (preds, _probe) =
            model::forward(&img, &(*handle).params, &(*handle).config).map_err(fail)?;
        *count = preds.len();
        if capacity < preds.len() {
            return Err((
                UdaposeStatus::BufferTooSmall,
                format!("need capacity {}, got {capacity}", preds.len()),
            ));
        }
        require_nonnull!(instances, "instances");
        let out = std::slice::from_raw_parts_mut(instances, preds.len());
        for (slot, pred) in out.iter_mut().zip(preds.iter()) {
            slot.score = pred.score;
            slot.box_cxcywh = pred.box_cxcywh;
            for (k, kp) in pred.keypoints.iter().enumerate() {
                slot.keypoints[2 * k] = kp[0];
                slot.keypoints[2 * k + 1] = kp[1];
            }
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use udapose::containers::{save_checkpoint, Checkpoint};
    use udapose::params::TrainConfig;
    use udapose::pose::model::{arch_descriptor, init_pose_params, FusionMode};

    fn flat_image(h: usize, w: usize, c: usize, base: f64) -> Vec<f64> {
        (0..h * w * c).map(|i| base + (i % 7) as f64 * 0.01).collect()
    }

    fn small_pose_config() -> PoseConfig {
        PoseConfig {
            dim: 32,
            num_groups: 2,
            num_layers: 1,
            num_samples: 2,
            num_heads: 2,
            fusion: FusionMode::Gated,
        }
    }

    #[test]
    fn version_and_keypoint_count() {
        let v = unsafe { CStr::from_ptr(udapose_version()) };
        assert!(!v.to_str().unwrap().is_empty());
        assert_eq!(udapose_num_keypoints(), 14);
    }

    #[test]
    fn synthesize_matches_direct_library_call() {
        let mut handle: *mut UdaposeAdapters = std::ptr::null_mut();
        assert_eq!(
            unsafe { udapose_adapters_new(9, &mut handle) },
            UdaposeStatus::Ok
        );
        let (h, w, c) = (32, 32, 3);
        let wl = flat_image(h, w, c, 0.5);
        let rf = flat_image(h, w, c, 0.1);
        let mut out = vec![0.0; h * w * c];
        let status = unsafe {
            udapose_synthesize(
                handle,
                wl.as_ptr(),
                h,
                w,
                c,
                rf.as_ptr(),
                h,
                w,
                c,
                0.25,
                out.as_mut_ptr(),
            )
        };
        assert_eq!(status, UdaposeStatus::Ok);

        let sample = AnnotatedSample {
            image: Image::new(h, w, c, wl),
            instances: Vec::new(),
            source_id: "ffi".to_string(),
            domain_tag: DomainTag::WellLit,
        };
        let direct = synthesis::synthesize_lowlight(
            &sample,
            &Image::new(h, w, c, rf),
            &lcim::init_params(9, 3),
            0.25,
        )
        .unwrap();
        assert_eq!(out, direct.image.data);
        unsafe { udapose_adapters_free(handle) };
    }

    #[test]
    fn null_pointers_are_rejected_with_messages() {
        let mut handle: *mut UdaposeAdapters = std::ptr::null_mut();
        assert_eq!(
            unsafe { udapose_adapters_new(1, std::ptr::null_mut()) },
            UdaposeStatus::NullArg
        );
        let msg = unsafe { CStr::from_ptr(udapose_last_error()) };
        assert!(msg.to_str().unwrap().contains("null pointer"));

        assert_eq!(
            unsafe { udapose_adapters_load(std::ptr::null(), &mut handle) },
            UdaposeStatus::NullArg
        );
        let mut out = [0.0; 16];
        assert_eq!(
            unsafe {
                udapose_normalize_intensity(std::ptr::null(), 4, 4, 1, 0.449, out.as_mut_ptr())
            },
            UdaposeStatus::NullArg
        );
    }

    #[test]
    fn invalid_dims_are_invalid_arg_not_panic() {
        let data = flat_image(20, 20, 3, 0.4);
        let mut out = vec![0.0; 20 * 20 * 3];
        let mut handle: *mut UdaposeAdapters = std::ptr::null_mut();
        unsafe { udapose_adapters_new(2, &mut handle) };
        // 2 channels is rejected before any library call.
        assert_eq!(
            unsafe {
                udapose_synthesize(
                    handle,
                    data.as_ptr(),
                    20,
                    30,
                    2,
                    data.as_ptr(),
                    20,
                    20,
                    3,
                    0.25,
                    out.as_mut_ptr(),
                )
            },
            UdaposeStatus::InvalidArg
        );
        // 20 is not a multiple of 16; the pipeline reports a dim mismatch.
        assert_eq!(
            unsafe {
                udapose_synthesize(
                    handle,
                    data.as_ptr(),
                    20,
                    20,
                    3,
                    data.as_ptr(),
                    20,
                    20,
                    3,
                    0.25,
                    out.as_mut_ptr(),
                )
            },
            UdaposeStatus::InvalidArg
        );
        unsafe { udapose_adapters_free(handle) };
    }

    #[test]
    fn non_finite_input_is_reported_numeric() {
        let mut data = flat_image(16, 16, 1, 0.4);
        data[3] = f64::NAN;
        let mut out = vec![0.0; data.len()];
        assert_eq!(
            unsafe {
                udapose_normalize_intensity(data.as_ptr(), 16, 16, 1, 0.449, out.as_mut_ptr())
            },
            UdaposeStatus::Numeric
        );
    }

    #[test]
    fn adapter_loader_rejects_pose_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_pose_config();
        let path = dir.path().join("pose.ckpt");
        save_checkpoint(
            &path,
            &Checkpoint {
                arch: arch_descriptor(&cfg),
                train_config: TrainConfig::default(),
                params: init_pose_params(3, &cfg),
            },
        )
        .unwrap();
        let c_path = CString::new(path.to_str().unwrap()).unwrap();
        let mut handle: *mut UdaposeAdapters = std::ptr::null_mut();
        assert_eq!(
            unsafe { udapose_adapters_load(c_path.as_ptr(), &mut handle) },
            UdaposeStatus::InvalidArg
        );
        let msg = unsafe { CStr::from_ptr(udapose_last_error()) };
        assert!(msg.to_str().unwrap().contains("adapter"));

        let missing = CString::new(dir.path().join("no.ckpt").to_str().unwrap()).unwrap();
        assert_eq!(
            unsafe { udapose_adapters_load(missing.as_ptr(), &mut handle) },
            UdaposeStatus::Io
        );
    }

    #[test]
    fn pose_roundtrip_through_c_abi_matches_forward() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_pose_config();
        let params = init_pose_params(5, &cfg);
        let path = dir.path().join("pose.ckpt");
        save_checkpoint(
            &path,
            &Checkpoint {
                arch: arch_descriptor(&cfg),
                train_config: TrainConfig::default(),
                params: params.clone(),
            },
        )
        .unwrap();

        let c_path = CString::new(path.to_str().unwrap()).unwrap();
        let mut handle: *mut UdaposePose = std::ptr::null_mut();
        assert_eq!(
            unsafe { udapose_pose_load(c_path.as_ptr(), &mut handle) },
            UdaposeStatus::Ok
        );
        let mut slots = 0usize;
        assert_eq!(
            unsafe { udapose_pose_num_slots(handle, &mut slots) },
            UdaposeStatus::Ok
        );
        assert_eq!(slots, cfg.num_groups);

        let (h, w, c) = (32, 32, 3);
        let data = flat_image(h, w, c, 0.3);
        let mut count = 0usize;
        // Undersized buffer: count is still reported.
        assert_eq!(
            unsafe {
                udapose_pose_infer(
                    handle,
                    data.as_ptr(),
                    h,
                    w,
                    c,
                    std::ptr::null_mut(),
                    0,
                    &mut count,
                )
            },
            UdaposeStatus::BufferTooSmall
        );
        assert_eq!(count, slots);

        let mut buf = vec![
            UdaposeInstance {
                score: 0.0,
                box_cxcywh: [0.0; 4],
                keypoints: [0.0; UDAPOSE_KEYPOINT_VALUES],
            };
            slots
        ];
        assert_eq!(
            unsafe {
                udapose_pose_infer(
                    handle,
                    data.as_ptr(),
                    h,
                    w,
                    c,
                    buf.as_mut_ptr(),
                    buf.len(),
                    &mut count,
                )
            },
            UdaposeStatus::Ok
        );

        // Compare against the reloaded weights: checkpoint storage is f32,
        // so the original f64 params are not bit-identical.
        let reloaded = load_checkpoint(&path).unwrap().params;
        let img = Image::new(h, w, c, data);
        let (direct, _) = model::forward(&img, &reloaded, &cfg).unwrap();
        assert_eq!(count, direct.len());
        for (slot, pred) in buf.iter().zip(direct.iter()) {
            assert_eq!(slot.score, pred.score);
            assert_eq!(slot.box_cxcywh, pred.box_cxcywh);
            for (k, kp) in pred.keypoints.iter().enumerate() {
                assert_eq!(slot.keypoints[2 * k], kp[0]);
                assert_eq!(slot.keypoints[2 * k + 1], kp[1]);
            }
        }
        unsafe { udapose_pose_free(handle) };
    }

    #[test]
    fn freeing_null_handles_is_safe() {
        unsafe {
            udapose_adapters_free(std::ptr::null_mut());
            udapose_pose_free(std::ptr::null_mut());
        }
    }
}
