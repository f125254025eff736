//! C interface to `gsnpose`.
//!
//! Objects are opaque handles created by `gsn_*_new`/`gsn_*_load` style
//! functions and released with the matching `*_free`. Every fallible call
//! returns a [`GsnStatus`]; on failure the message is available from
//! [`gsn_last_error`] on the same thread until the next failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;

use gsnpose::checkpoint::Checkpoint;
use gsnpose::data::synth::sample_seed;
use gsnpose::data::{read_annotations, synth_generate, write_annotations, Dataset, ImageStorage, SynthConfig};
use gsnpose::eval::{evaluate_generator, EvalOptions};
use gsnpose::heatmap::decode_argmax;
use gsnpose::skeleton::SkeletonGraph;
use gsnpose::train::{train, TrainConfig, TrainState};
use gsnpose::{Error, Tensor};

/// Result codes. `GSN_STATUS_OK` is zero.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GsnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    NonFinite = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// A dataset of pose samples.
pub struct GsnDataset {
    inner: Dataset,
}

/// A trained generator and discriminator with their training configuration.
pub struct GsnModel {
    state: TrainState,
}

/// Scores from [`gsn_model_evaluate`].
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct GsnScores {
    pub pck: f64,
    pub pckh: f64,
    pub oks_ap: f64,
    /// PCKh on samples with at least 2 and 4 invisible joints; NaN when
    /// the subset is empty.
    pub pckh_invisible_2: f64,
    pub pckh_invisible_4: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(GsnStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => GsnStatus::Io,
            Error::Parse { .. } | Error::Line { .. } | Error::Version { .. } => GsnStatus::Format,
            Error::NonFinite(_) => GsnStatus::NonFinite,
            _ => GsnStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(GsnStatus::InvalidArgument, msg.into())
}

fn null(what: &str) -> Failure {
    Failure(GsnStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> GsnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GsnStatus::Ok,
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
            set_error(format!("internal error: {msg}"));
            GsnStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn path(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    text(p, what).map(PathBuf::from)
}

unsafe fn skeleton(name: *const c_char) -> Result<SkeletonGraph, Failure> {
    let name = text(name, "skeleton name")?;
    SkeletonGraph::builtin(name).ok_or_else(|| invalid(format!("unknown skeleton {name:?} (use mpii16 or lsp14)")))
}

unsafe fn out<T>(slot: *mut *mut T, value: T) -> Result<(), Failure> {
    if slot.is_null() {
        return Err(null("output pointer"));
    }
    *slot = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn gsn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gsn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Generates `count` synthetic samples of `image_size`² pixels.
/// `stream` selects an independent split for the same `seed`.
///
/// # Safety
/// `skeleton_name` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gsn_dataset_synth(
    skeleton_name: *const c_char,
    seed: u64,
    stream: u64,
    count: usize,
    image_size: usize,
    occlusion_rate: f64,
    out_dataset: *mut *mut GsnDataset,
) -> GsnStatus {
    guard(|| {
        let sk = skeleton(skeleton_name)?;
        let cfg = SynthConfig {
            seed: sample_seed(seed, stream),
            count,
            image_size,
            occlusion_rate,
            ..SynthConfig::default()
        };
        out(out_dataset, GsnDataset { inner: synth_generate(&cfg, &sk)? })
    })
}

/// Reads an annotation file written by `gsnpose synth` or [`gsn_dataset_write`].
///
/// # Safety
/// `file` must be a NUL-terminated string and `out_dataset` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gsn_dataset_read(file: *const c_char, out_dataset: *mut *mut GsnDataset) -> GsnStatus {
    guard(|| {
        let p = path(file, "path")?;
        out(out_dataset, GsnDataset { inner: read_annotations(&p)? })
    })
}

/// Writes the dataset with images stored inline.
///
/// # Safety
/// `dataset` must come from this library; `file` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn gsn_dataset_write(dataset: *const GsnDataset, file: *const c_char) -> GsnStatus {
    guard(|| {
        let d = handle(dataset, "dataset")?;
        let p = path(file, "path")?;
        write_annotations(&d.inner, &p, &ImageStorage::Inline)?;
        Ok(())
    })
}

/// Number of samples; 0 for a null handle.
///
/// # Safety
/// `dataset` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn gsn_dataset_len(dataset: *const GsnDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.inner.len())
}

/// Joints per sample; 0 for a null handle.
///
/// # Safety
/// `dataset` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn gsn_dataset_n_joints(dataset: *const GsnDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.inner.skeleton.n_nodes())
}

/// Image side length in pixels; 0 for a null handle.
///
/// # Safety
/// `dataset` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn gsn_dataset_image_size(dataset: *const GsnDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.inner.image_size)
}

/// Copies sample `index`'s grey image (`image_size`² values, row-major)
/// into `pixels`.
///
/// # Safety
/// `pixels` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn gsn_dataset_image(
    dataset: *const GsnDataset,
    index: usize,
    pixels: *mut f64,
    len: usize,
) -> GsnStatus {
    guard(|| {
        let d = handle(dataset, "dataset")?;
        let s = d
            .inner
            .samples
            .get(index)
            .ok_or_else(|| invalid(format!("sample {index} out of range (dataset has {})", d.inner.len())))?;
        let img = s.image()?.data();
        if pixels.is_null() {
            return Err(null("pixel buffer"));
        }
        if len < img.len() {
            return Err(Failure(
                GsnStatus::BufferTooSmall,
                format!("pixel buffer holds {len} values, the image has {}", img.len()),
            ));
        }
        std::slice::from_raw_parts_mut(pixels, img.len()).copy_from_slice(img);
        Ok(())
    })
}

/// Copies sample `index`'s annotated joints as `x, y, visible` triples
/// (visible is 1.0 or 0.0) into `joints`, which holds `len` doubles.
///
/// # Safety
/// `joints` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn gsn_dataset_joints(
    dataset: *const GsnDataset,
    index: usize,
    joints: *mut f64,
    len: usize,
) -> GsnStatus {
    guard(|| {
        let d = handle(dataset, "dataset")?;
        let s = d
            .inner
            .samples
            .get(index)
            .ok_or_else(|| invalid(format!("sample {index} out of range (dataset has {})", d.inner.len())))?;
        if joints.is_null() {
            return Err(null("joint buffer"));
        }
        if len < 3 * s.joints.len() {
            return Err(Failure(
                GsnStatus::BufferTooSmall,
                format!("joint buffer holds {len} values, need {}", 3 * s.joints.len()),
            ));
        }
        let buf = std::slice::from_raw_parts_mut(joints, 3 * s.joints.len());
        for (chunk, j) in buf.chunks_mut(3).zip(&s.joints) {
            chunk.copy_from_slice(&[j.x, j.y, if j.visible { 1.0 } else { 0.0 }]);
        }
        Ok(())
    })
}

/// # Safety
/// `dataset` must be null or come from this library and not be used again.
#[no_mangle]
pub unsafe extern "C" fn gsn_dataset_free(dataset: *mut GsnDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Trains a model. `options` holds `key = value` lines using the same keys
/// as the `--set` flag of `gsnpose train` and may be null for defaults.
/// `val` may be null.
///
/// # Safety
/// Handles must come from this library; `options` must be null or
/// NUL-terminated; `out_model` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gsn_train(
    train_set: *const GsnDataset,
    val_set: *const GsnDataset,
    options: *const c_char,
    out_model: *mut *mut GsnModel,
) -> GsnStatus {
    guard(|| {
        let tr = handle(train_set, "training dataset")?;
        let va = val_set.as_ref();
        let mut cfg = TrainConfig::default();
        if !options.is_null() {
            let text = text(options, "options")?;
            for (key, value, line) in gsnpose::config::parse_assignments(text, Path::new("<options>"))? {
                cfg.set_key(&key, &value)
                    .map_err(|e| invalid(format!("options line {line}: {e}")))?;
            }
        }
        let (state, _) = train(&cfg, &tr.inner, va.map(|v| &v.inner))?;
        out(out_model, GsnModel { state })
    })
}

/// Loads a checkpoint trained on the named skeleton.
///
/// # Safety
/// Strings must be NUL-terminated; `out_model` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gsn_model_load(
    file: *const c_char,
    skeleton_name: *const c_char,
    out_model: *mut *mut GsnModel,
) -> GsnStatus {
    guard(|| {
        let p = path(file, "path")?;
        let sk = skeleton(skeleton_name)?;
        let state = TrainState::from_checkpoint(&Checkpoint::read(&p)?, &sk)?;
        out(out_model, GsnModel { state })
    })
}

/// # Safety
/// `model` must come from this library; `file` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn gsn_model_save(model: *const GsnModel, file: *const c_char) -> GsnStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let p = path(file, "path")?;
        m.state.to_checkpoint().write(&p)?;
        Ok(())
    })
}

/// Joints predicted per image; 0 for a null handle.
///
/// # Safety
/// `model` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn gsn_model_n_joints(model: *const GsnModel) -> usize {
    model.as_ref().map_or(0, |m| m.state.skeleton.n_nodes())
}

/// Expected image side length; 0 for a null handle.
///
/// # Safety
/// `model` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn gsn_model_image_size(model: *const GsnModel) -> usize {
    model.as_ref().map_or(0, |m| m.state.image_size)
}

/// Predicts joints for one grey `image_size`² image. Writes `x, y,
/// confidence` triples in pixel coordinates to `joints` (`len` doubles).
///
/// # Safety
/// `pixels` must point to `n_pixels` readable doubles and `joints` to `len`
/// writable doubles.
#[no_mangle]
pub unsafe extern "C" fn gsn_model_predict(
    model: *const GsnModel,
    pixels: *const f64,
    n_pixels: usize,
    joints: *mut f64,
    len: usize,
) -> GsnStatus {
    guard(|| {
        let m = handle(model, "model")?;
        if pixels.is_null() {
            return Err(null("pixel buffer"));
        }
        if joints.is_null() {
            return Err(null("joint buffer"));
        }
        let s = m.state.image_size;
        if n_pixels != s * s {
            return Err(invalid(format!("expected {} pixels ({s}×{s}), got {n_pixels}", s * s)));
        }
        let n = m.state.skeleton.n_nodes();
        if len < 3 * n {
            return Err(Failure(
                GsnStatus::BufferTooSmall,
                format!("joint buffer holds {len} values, need {}", 3 * n),
            ));
        }
        let img = Tensor::new([1, s, s], std::slice::from_raw_parts(pixels, n_pixels).to_vec())?;
        let decoded = decode_argmax(&m.state.generator.predict_one(&img)?);
        let buf = std::slice::from_raw_parts_mut(joints, 3 * n);
        for (chunk, j) in buf.chunks_mut(3).zip(&decoded) {
            chunk.copy_from_slice(&[j.x, j.y, j.confidence]);
        }
        Ok(())
    })
}

/// PCK@0.2, PCKh@0.5, OKS-AP and the occlusion subsets on `dataset`.
///
/// # Safety
/// Handles must come from this library; `scores` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gsn_model_evaluate(
    model: *const GsnModel,
    dataset: *const GsnDataset,
    scores: *mut GsnScores,
) -> GsnStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let d = handle(dataset, "dataset")?;
        if scores.is_null() {
            return Err(null("scores"));
        }
        if d.inner.image_size != m.state.image_size {
            return Err(invalid(format!(
                "the model expects {0}×{0} images but the data has {1}×{1}",
                m.state.image_size, d.inner.image_size
            )));
        }
        let r = evaluate_generator(&m.state.generator, &d.inner, &EvalOptions::default())?;
        *scores = GsnScores {
            pck: r.pck.mean.unwrap_or(f64::NAN),
            pckh: r.pckh.mean.unwrap_or(f64::NAN),
            oks_ap: r.oks_ap,
            pckh_invisible_2: r.subset_mean(2).unwrap_or(f64::NAN),
            pckh_invisible_4: r.subset_mean(4).unwrap_or(f64::NAN),
        };
        Ok(())
    })
}

/// # Safety
/// `model` must be null or come from this library and not be used again.
#[no_mangle]
pub unsafe extern "C" fn gsn_model_free(model: *mut GsnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
