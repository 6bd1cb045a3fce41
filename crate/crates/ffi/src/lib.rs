//! C ABI over trained lafs models and the verification metrics.
//!
//! Every function returns a [`LafsStatus`]; on failure the message is kept in
//! thread-local storage and can be read with [`lafs_last_error_message`].
//! Models are opaque handles created by [`lafs_model_load`] and released by
//! [`lafs_model_free`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use lafs::checkpoint::Checkpoint;
use lafs::config::KvConfig;
use lafs::{CheckpointError, Error};
use lafs::eval::{cosine, kfold_accuracy, tar_at_far, ScoreSet};
use lafs::finetune::{CosFaceHead, FaceModel};
use lafs::geometry::Image;
use lafs::pipeline::{load_model, BenchConfig};

/// Result codes. Checkpoint codes match the `lafs` command-line exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LafsStatus {
    Ok = 0,
    Internal = 1,
    NullPointer = 2,
    InvalidArgument = 3,
    Io = 4,
    Dimension = 5,
    NonFinite = 6,
    Panic = 7,
    BufferTooSmall = 8,
    CheckpointBadMagic = 10,
    CheckpointUnsupportedVersion = 11,
    CheckpointTruncated = 12,
    CheckpointCorrupt = 13,
    CheckpointMissingEntry = 14,
}

impl From<&Error> for LafsStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Checkpoint(c) => match c {
                CheckpointError::BadMagic => LafsStatus::CheckpointBadMagic,
                CheckpointError::UnsupportedVersion(_) => LafsStatus::CheckpointUnsupportedVersion,
                CheckpointError::Truncated(_) => LafsStatus::CheckpointTruncated,
                CheckpointError::Corrupt(_) => LafsStatus::CheckpointCorrupt,
                CheckpointError::MissingEntry(_) => LafsStatus::CheckpointMissingEntry,
            },
            Error::Config(_) | Error::Parameter(_) => LafsStatus::InvalidArgument,
            Error::Io { .. } | Error::Format { .. } => LafsStatus::Io,
            Error::Dimension { .. } => LafsStatus::Dimension,
            Error::NonFinite(_) => LafsStatus::NonFinite,
            Error::Contract(_) => LafsStatus::Internal,
        }
    }
}

/// A loaded face model. Opaque to C.
pub struct LafsModel {
    model: FaceModel,
    canvas: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

struct Failure(LafsStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(LafsStatus::from(&e), e.to_string())
    }
}

fn fail(status: LafsStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> LafsStatus {
    let (status, msg) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => (LafsStatus::Ok, String::new()),
        Ok(Err(Failure(s, m))) => (s, m),
        Err(p) => {
            let m = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            (LafsStatus::Panic, m)
        }
    };
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
    status
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(fail(LafsStatus::NullPointer, format!("{name} is null")))
    } else {
        Ok(())
    }
}

/// # Safety
/// `p` must be null or point to `n` readable values.
unsafe fn input<'a, T>(p: *const T, n: usize, name: &str) -> Result<&'a [T], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    non_null(p, name)?;
    Ok(slice::from_raw_parts(p, n))
}

/// # Safety
/// `p` must be null or a NUL-terminated string.
unsafe fn c_str<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    non_null(p, name)?;
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(LafsStatus::InvalidArgument, format!("{name} is not UTF-8")))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lafs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `len − 1` bytes) and returns the full message length.
/// Pass `len = 0` to query the length only.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn lafs_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Loads a checkpoint written by `lafs bootstrap|pretrain|finetune`.
///
/// `config` holds the `key=value` lines the checkpoint was trained with
/// (for example `"preset=small"`); null means the defaults. On success
/// `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string, `config` null or NUL-terminated,
/// and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lafs_model_load(path: *const c_char, config: *const c_char, out: *mut *mut LafsModel) -> LafsStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let path = c_str(path, "path")?;
        let mut bench = BenchConfig::default();
        if !config.is_null() {
            bench.apply(&KvConfig::parse(c_str(config, "config")?)?)?;
        }
        let ck = Checkpoint::load(Path::new(path))?;
        let (localizer, vit, head) = load_model(&ck, &bench)?;
        let head = match head {
            Some(h) => h,
            // Embeddings never touch the classifier; a placeholder suffices.
            None => CosFaceHead::new(1, bench.dim, bench.cosface_scale, bench.cosface_margin, 0)?,
        };
        let model = LafsModel { model: FaceModel { localizer, vit, head }, canvas: bench.canvas };
        *out = Box::into_raw(Box::new(model));
        Ok(())
    })
}

/// Releases a handle from [`lafs_model_load`]. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lafs_model_free(model: *mut LafsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Embedding width `d`.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lafs_model_embedding_dim(model: *const LafsModel, out: *mut usize) -> LafsStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        *out = (*model).model.vit.config.dim;
        Ok(())
    })
}

/// Side length of the square grayscale images the model expects.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lafs_model_input_size(model: *const LafsModel, out: *mut usize) -> LafsStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        *out = (*model).canvas;
        Ok(())
    })
}

/// Embeds `n` grayscale images of `size × size` pixels in `[0,1]`, row-major
/// and contiguous, writing `n × d` unit-norm floats to `out`.
///
/// # Safety
/// `pixels` must hold `n·size·size` floats and `out` room for `out_len`.
#[no_mangle]
pub unsafe extern "C" fn lafs_model_embed(
    model: *const LafsModel,
    pixels: *const f32,
    n: usize,
    size: usize,
    out: *mut f32,
    out_len: usize,
) -> LafsStatus {
    guard(|| {
        non_null(model, "model")?;
        let m = &*model;
        if size != m.canvas {
            return Err(fail(LafsStatus::Dimension, format!("images are {size}px, model expects {}px", m.canvas)));
        }
        let d = m.model.vit.config.dim;
        let need = n * d;
        if out_len < need {
            return Err(fail(LafsStatus::BufferTooSmall, format!("output holds {out_len} floats, {need} needed")));
        }
        let px = input(pixels, n * size * size, "pixels")?;
        if px.iter().any(|v| !v.is_finite()) {
            return Err(fail(LafsStatus::NonFinite, "pixels contain NaN or infinity"));
        }
        if n == 0 {
            return Ok(());
        }
        non_null(out, "out")?;
        let images = px
            .chunks_exact(size * size)
            .map(|c| Image::new(1, size, size, c.to_vec()))
            .collect::<Result<Vec<_>, _>>()?;
        let refs: Vec<&Image> = images.iter().collect();
        let emb = m.model.embed(&refs)?;
        slice::from_raw_parts_mut(out, need).copy_from_slice(emb.data());
        Ok(())
    })
}

/// Cosine similarity of two `dim`-vectors.
///
/// # Safety
/// `a` and `b` must hold `dim` floats; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn lafs_cosine_similarity(a: *const f32, b: *const f32, dim: usize, out: *mut f32) -> LafsStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = cosine(input(a, dim, "a")?, input(b, dim, "b")?);
        Ok(())
    })
}

/// True-accept rate at the smallest threshold whose false-accept rate is at
/// most `far`. Scores are accepted when at least the threshold.
///
/// # Safety
/// `genuine` and `impostor` must hold `n_genuine` and `n_impostor` floats;
/// `out_tar` must be valid, `out_threshold` null or valid.
#[no_mangle]
pub unsafe extern "C" fn lafs_tar_at_far(
    genuine: *const f32,
    n_genuine: usize,
    impostor: *const f32,
    n_impostor: usize,
    far: f64,
    out_tar: *mut f64,
    out_threshold: *mut f32,
) -> LafsStatus {
    guard(|| {
        non_null(out_tar, "out_tar")?;
        let scores = ScoreSet {
            genuine: input(genuine, n_genuine, "genuine")?.to_vec(),
            impostor: input(impostor, n_impostor, "impostor")?.to_vec(),
        };
        let r = tar_at_far(&scores, far)?;
        *out_tar = r.tar;
        if !out_threshold.is_null() {
            *out_threshold = r.threshold;
        }
        Ok(())
    })
}

/// `k`-fold verification accuracy over `n` pair-ordered records; `genuine[i]`
/// is nonzero for same-identity pairs.
///
/// # Safety
/// `scores` and `genuine` must hold `n` values; `out_mean` must be valid,
/// `out_std` null or valid.
#[no_mangle]
pub unsafe extern "C" fn lafs_kfold_accuracy(
    scores: *const f32,
    genuine: *const u8,
    n: usize,
    k: usize,
    out_mean: *mut f64,
    out_std: *mut f64,
) -> LafsStatus {
    guard(|| {
        non_null(out_mean, "out_mean")?;
        let s = input(scores, n, "scores")?;
        let g = input(genuine, n, "genuine")?;
        let records: Vec<(f32, bool)> = s.iter().zip(g).map(|(&s, &g)| (s, g != 0)).collect();
        let r = kfold_accuracy(&records, k)?;
        *out_mean = r.mean;
        if !out_std.is_null() {
            *out_std = r.std;
        }
        Ok(())
    })
}
