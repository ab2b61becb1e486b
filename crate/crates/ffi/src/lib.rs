//! C interface to the tractfuse library.
//!
//! Every fallible function returns a [`TfStatus`]. On failure a message is kept per thread and
//! can be copied out with [`tf_last_error`]. Objects cross the boundary as opaque handles that
//! the caller releases with the matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use tractfuse::agents::PolicyBundle;
use tractfuse::cli::PhantomPreset;
use tractfuse::geometry::{self, Streamline};
use tractfuse::phantom::{self, Phantom};
use tractfuse::trackeval::{self, PolicyActor, TrackConfig};
use tractfuse::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TfStatus {
    Ok = 0,
    InvalidArgument = 1,
    NullPointer = 2,
    MissingFile = 3,
    Io = 4,
    Decode = 5,
    Runtime = 6,
    Panic = 7,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> TfStatus {
    match e {
        Error::MissingArtifact(_) => TfStatus::MissingFile,
        Error::Io { .. } => TfStatus::Io,
        Error::Decode { .. } => TfStatus::Decode,
        Error::InvalidArgument(_) | Error::Shape { .. } | Error::UnknownBundle(_) | Error::SeedOutsideMask(_) | Error::Config(_) => {
            TfStatus::InvalidArgument
        }
        _ => TfStatus::Runtime,
    }
}

enum Fail {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> TfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            TfStatus::Ok
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            TfStatus::NullPointer
        }
        Ok(Err(Fail::Lib(e))) => {
            let s = status_of(&e);
            set_error(e.to_string());
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            TfStatus::Panic
        }
    }
}

unsafe fn nonnull<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    // SAFETY: the caller passes either null or a valid pointer.
    unsafe { p.as_ref() }.ok_or(Fail::Null(what))
}

unsafe fn out<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    // SAFETY: the caller passes either null or a valid, writable pointer.
    unsafe { p.as_mut() }.ok_or(Fail::Null(what))
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    // SAFETY: the caller guarantees `n` readable elements at `p`.
    Ok(unsafe { std::slice::from_raw_parts(p, n) })
}

unsafe fn path(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(Fail::Null("path"));
    }
    // SAFETY: the caller passes a NUL-terminated string.
    let s = unsafe { CStr::from_ptr(p) }.to_str().map_err(|_| Error::InvalidArgument("path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

fn points(flat: &[f32]) -> Result<Streamline, Error> {
    if !flat.len().is_multiple_of(3) {
        return Err(Error::InvalidArgument(format!("{} coordinates is not a multiple of 3", flat.len())));
    }
    Streamline::new(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
}

/// Copy the calling thread's last error message into `buf` (NUL-terminated, truncated to
/// `len`). Returns the full message length in bytes, excluding the terminator.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn tf_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            // SAFETY: `buf` holds `len` bytes and `n < len`.
            unsafe {
                std::ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
                *buf.add(n) = 0;
            }
        }
        msg.len()
    })
}

/// Opaque phantom handle.
pub struct TfPhantom(Phantom);

/// Opaque policy handle.
pub struct TfPolicy(PolicyBundle);

/// Opaque streamline set handle.
pub struct TfStreamlines {
    lines: Vec<Streamline>,
    voxel_size: f32,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TfScore {
    pub dice: f64,
    pub ol: f64,
    pub or_: f64,
}

/// Generate a built-in phantom: `preset` is `straight_tube`, `crossing` or `curved`.
///
/// # Safety
/// `preset` must be a NUL-terminated string and `out_handle` a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn tf_phantom_generate(preset: *const c_char, seed: u64, out_handle: *mut *mut TfPhantom) -> TfStatus {
    guard(|| {
        let slot = unsafe { out(out_handle, "out_handle") }?;
        if preset.is_null() {
            return Err(Fail::Null("preset"));
        }
        let name = unsafe { CStr::from_ptr(preset) }.to_string_lossy();
        let spec = PhantomPreset::parse(&name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown phantom preset {name:?}")))?
            .spec(seed);
        *slot = Box::into_raw(Box::new(TfPhantom(phantom::generate_phantom(&spec)?)));
        Ok(())
    })
}

/// Load a `PHN1` phantom file.
///
/// # Safety
/// `file` must be a NUL-terminated path and `out_handle` a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn tf_phantom_load(file: *const c_char, out_handle: *mut *mut TfPhantom) -> TfStatus {
    guard(|| {
        let slot = unsafe { out(out_handle, "out_handle") }?;
        let p = phantom::read_phantom(&unsafe { path(file) }?)?;
        *slot = Box::into_raw(Box::new(TfPhantom(p)));
        Ok(())
    })
}

/// # Safety
/// `p` must be null or a handle from `tf_phantom_generate`/`tf_phantom_load` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tf_phantom_free(p: *mut TfPhantom) {
    if !p.is_null() {
        // SAFETY: the handle came from Box::into_raw.
        drop(unsafe { Box::from_raw(p) });
    }
}

/// Number of bundles and the grid dimensions.
///
/// # Safety
/// `p` must be a live handle; the outputs must be writable (`dims` holds 3 values).
#[no_mangle]
pub unsafe extern "C" fn tf_phantom_info(p: *const TfPhantom, bundles: *mut usize, dims: *mut usize) -> TfStatus {
    guard(|| {
        let ph = &unsafe { nonnull(p, "phantom") }?.0;
        *unsafe { out(bundles, "bundles") }? = ph.masks.len();
        if dims.is_null() {
            return Err(Fail::Null("dims"));
        }
        // SAFETY: `dims` points to three writable values.
        unsafe { std::ptr::copy_nonoverlapping(ph.grid.dims.as_ptr(), dims, 3) };
        Ok(())
    })
}

/// Alignment reward of `action` (3 values) given an optional previous direction (null for
/// none) and `n_peaks` peak directions (3 values each).
///
/// # Safety
/// Pointers must reference the stated number of readable floats; `out_reward` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tf_reward(
    action: *const f64,
    prev_dir: *const f64,
    peaks: *const f64,
    n_peaks: usize,
    out_reward: *mut f64,
) -> TfStatus {
    guard(|| {
        let slot = unsafe { out(out_reward, "out_reward") }?;
        let a = unsafe { slice(action, 3, "action") }?;
        let prev = if prev_dir.is_null() {
            None
        } else {
            let u = unsafe { slice(prev_dir, 3, "prev_dir") }?;
            Some([u[0], u[1], u[2]])
        };
        let pk = unsafe { slice(peaks, 3 * n_peaks, "peaks") }?;
        let pk: Vec<[f64; 3]> = pk.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        *slot = tractfuse::env::reward([a[0], a[1], a[2]], prev, &pk)?;
        Ok(())
    })
}

/// MDF distance in mm between two streamlines with equal point counts (`n` points of 3
/// floats each).
///
/// # Safety
/// `a` and `b` must each hold `3 * n` readable floats; `out_mm` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tf_mdf(a: *const f32, b: *const f32, n: usize, voxel_size: f64, out_mm: *mut f64) -> TfStatus {
    guard(|| {
        let slot = unsafe { out(out_mm, "out_mm") }?;
        let sa = points(unsafe { slice(a, 3 * n, "a") }?)?;
        let sb = points(unsafe { slice(b, 3 * n, "b") }?)?;
        *slot = geometry::mdf(&sa, &sb, voxel_size)?;
        Ok(())
    })
}

/// Dice/OL/OR of two binary masks of `n` voxels (nonzero = set).
///
/// # Safety
/// `candidate` and `truth` must each hold `n` readable bytes; `out_score` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tf_score(candidate: *const u8, truth: *const u8, n: usize, out_score: *mut TfScore) -> TfStatus {
    guard(|| {
        let slot = unsafe { out(out_score, "out_score") }?;
        let c: Vec<bool> = unsafe { slice(candidate, n, "candidate") }?.iter().map(|&v| v != 0).collect();
        let t: Vec<bool> = unsafe { slice(truth, n, "truth") }?.iter().map(|&v| v != 0).collect();
        let s = trackeval::score(&c, &t)?;
        *slot = TfScore { dice: s.dice, ol: s.ol, or_: s.or_ };
        Ok(())
    })
}

/// Load a policy checkpoint written by `tractfuse train-rl`.
///
/// # Safety
/// `file` must be a NUL-terminated path and `out_handle` a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn tf_policy_load(file: *const c_char, out_handle: *mut *mut TfPolicy) -> TfStatus {
    guard(|| {
        let slot = unsafe { out(out_handle, "out_handle") }?;
        let p = PolicyBundle::load(&unsafe { path(file) }?)?;
        *slot = Box::into_raw(Box::new(TfPolicy(p)));
        Ok(())
    })
}

/// # Safety
/// `p` must be null or a live policy handle.
#[no_mangle]
pub unsafe extern "C" fn tf_policy_free(p: *mut TfPolicy) {
    if !p.is_null() {
        // SAFETY: the handle came from Box::into_raw.
        drop(unsafe { Box::from_raw(p) });
    }
}

/// Track one bundle with a policy's deterministic actions, bidirectionally from
/// `seeds_per_voxel` seeds per mask voxel.
///
/// # Safety
/// Handles must be live; `out_handle` must be a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn tf_track_policy(
    policy: *const TfPolicy,
    phantom: *const TfPhantom,
    bundle: usize,
    seeds_per_voxel: usize,
    seed: u64,
    out_handle: *mut *mut TfStreamlines,
) -> TfStatus {
    guard(|| {
        let slot = unsafe { out(out_handle, "out_handle") }?;
        let pol = &unsafe { nonnull(policy, "policy") }?.0;
        let ph = &unsafe { nonnull(phantom, "phantom") }?.0;
        if bundle >= ph.masks.len() {
            return Err(Error::UnknownBundle(format!("#{bundle}")).into());
        }
        let cfg = TrackConfig { seeds_per_voxel, ..TrackConfig::default() };
        let lines = trackeval::track_policy(PolicyActor::Single(pol), ph, bundle, &cfg, seed)?;
        *slot = Box::into_raw(Box::new(TfStreamlines { lines, voxel_size: ph.grid.voxel_size as f32 }));
        Ok(())
    })
}

/// Load an `STL1` streamline file.
///
/// # Safety
/// `file` must be a NUL-terminated path and `out_handle` a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn tf_streamlines_load(file: *const c_char, out_handle: *mut *mut TfStreamlines) -> TfStatus {
    guard(|| {
        let slot = unsafe { out(out_handle, "out_handle") }?;
        let (lines, voxel_size) = geometry::read_streamlines(&unsafe { path(file) }?)?;
        *slot = Box::into_raw(Box::new(TfStreamlines { lines, voxel_size }));
        Ok(())
    })
}

/// Write a streamline set as `STL1`.
///
/// # Safety
/// `s` must be a live handle and `file` a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn tf_streamlines_save(s: *const TfStreamlines, file: *const c_char) -> TfStatus {
    guard(|| {
        let set = unsafe { nonnull(s, "streamlines") }?;
        geometry::write_streamlines(&unsafe { path(file) }?, &set.lines, set.voxel_size)?;
        Ok(())
    })
}

/// # Safety
/// `s` must be null or a live streamline handle.
#[no_mangle]
pub unsafe extern "C" fn tf_streamlines_free(s: *mut TfStreamlines) {
    if !s.is_null() {
        // SAFETY: the handle came from Box::into_raw.
        drop(unsafe { Box::from_raw(s) });
    }
}

/// Number of streamlines in a set.
///
/// # Safety
/// `s` must be a live handle and `count` writable.
#[no_mangle]
pub unsafe extern "C" fn tf_streamlines_count(s: *const TfStreamlines, count: *mut usize) -> TfStatus {
    guard(|| {
        *unsafe { out(count, "count") }? = unsafe { nonnull(s, "streamlines") }?.lines.len();
        Ok(())
    })
}

/// Borrow the points of streamline `i`: `*pts` receives `3 * *n` floats that stay valid
/// until the set is freed.
///
/// # Safety
/// `s` must be a live handle; `pts` and `n` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tf_streamline_points(s: *const TfStreamlines, i: usize, pts: *mut *const f32, n: *mut usize) -> TfStatus {
    guard(|| {
        let set = unsafe { nonnull(s, "streamlines") }?;
        let line = set
            .lines
            .get(i)
            .ok_or_else(|| Error::InvalidArgument(format!("streamline {i} out of range ({} in set)", set.lines.len())))?;
        *unsafe { out(pts, "pts") }? = line.points().as_ptr().cast::<f32>();
        *unsafe { out(n, "n") }? = line.len();
        Ok(())
    })
}

/// Post-filter a streamline set against the bundle's ground truth (`threshold_mm` MDF), then
/// voxelize and score it against the bundle mask.
///
/// # Safety
/// Handles must be live and `out_score` writable.
#[no_mangle]
pub unsafe extern "C" fn tf_evaluate(
    s: *const TfStreamlines,
    phantom: *const TfPhantom,
    bundle: usize,
    threshold_mm: f64,
    out_score: *mut TfScore,
) -> TfStatus {
    guard(|| {
        let slot = unsafe { out(out_score, "out_score") }?;
        let set = unsafe { nonnull(s, "streamlines") }?;
        let ph = &unsafe { nonnull(phantom, "phantom") }?.0;
        let gt = ph.ground_truth.get(bundle).ok_or_else(|| Error::UnknownBundle(format!("#{bundle}")))?;
        let refs = geometry::reference_set(gt, geometry::REFERENCE_COUNT.min(gt.len()), ph.grid.voxel_size)?;
        let kept = trackeval::post_filter(&set.lines, &refs, threshold_mm)?;
        let s = trackeval::score(&trackeval::voxelize(&kept, &ph.grid), &trackeval::mask_of(ph, bundle))?;
        *slot = TfScore { dice: s.dice, ol: s.ol, or_: s.or_ };
        Ok(())
    })
}
