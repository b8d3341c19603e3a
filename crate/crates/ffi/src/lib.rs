//! C ABI over `s3tta-core`.
//!
//! Models are opaque handles created by [`s3tta_model_load`] and released by
//! [`s3tta_model_free`]. Every fallible call returns an [`S3ttaStatus`]; the
//! message for the most recent failure on the calling thread is available
//! from [`s3tta_last_error_message`]. Panics never cross the boundary.
//!
//! Images are planar `float` buffers (`channels x height x width`, values in
//! `[0, 1]`). Label maps are row-major `uint32_t` buffers with 0 for
//! background.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::slice;

use s3tta_core::augment::{build_bundles, AugmentationPolicy, AugmentedBundle, StyleEngine};
use s3tta_core::evalkit::{baseline_aggregate_all, dice_jaccard, f1_at};
use s3tta_core::experiment::Models;
use s3tta_core::imgeom::{Image, RotationAngle};
use s3tta_core::segnet::{predict_from_bundles, predict_plain, InstanceLabelMap};
use s3tta_core::selector::select;
use s3tta_core::trainer::{total_loss, LossWeights};
use s3tta_core::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum S3ttaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    MissingArtifact = 3,
    Format = 4,
    Runtime = 5,
    Panic = 6,
}

/// Prediction strategy.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum S3ttaMethod {
    /// Plain forward pass of the reference segmenter.
    Baseline = 0,
    /// Average of every policy and rotation.
    AggregateAll = 1,
    /// Most rotation-consistent policy only.
    S3tta = 2,
}

/// Weights of the segmentation, content and style loss terms.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct S3ttaLossWeights {
    pub content: f64,
    pub style: f64,
    pub seg: f64,
}

/// Trained models plus their policy space.
pub struct S3ttaModel {
    models: Models,
    policies: Vec<AugmentationPolicy>,
    angles: Vec<RotationAngle>,
}

struct Failure {
    status: S3ttaStatus,
    message: String,
}

impl Failure {
    fn new(status: S3ttaStatus, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn null(what: &str) -> Self {
        Self::new(S3ttaStatus::NullPointer, format!("{what} is null"))
    }

    fn invalid(message: impl Into<String>) -> Self {
        Self::new(S3ttaStatus::InvalidArgument, message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::InvalidArgument(_) | Error::TooSmall { .. } | Error::ShapeMismatch(_) | Error::Config(_) => {
                S3ttaStatus::InvalidArgument
            }
            Error::MissingArtifact(_) => S3ttaStatus::MissingArtifact,
            Error::Malformed { .. } | Error::Format(_) => S3ttaStatus::Format,
            _ => S3ttaStatus::Runtime,
        };
        Self::new(status, e.to_string())
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).expect("no interior NUL");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> S3ttaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            S3ttaStatus::Ok
        }
        Ok(Err(fail)) => {
            set_last_error(&fail.message);
            fail.status
        }
        Err(payload) => {
            let what = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("internal panic: {what}"));
            S3ttaStatus::Panic
        }
    }
}

unsafe fn input<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if ptr.is_null() {
        return Err(Failure::null(what));
    }
    Ok(slice::from_raw_parts(ptr, len))
}

unsafe fn output<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    ptr.as_mut().ok_or_else(|| Failure::null(what))
}

fn checked_len(dims: &[usize]) -> Result<usize, Failure> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Failure::invalid("buffer size overflows"))
}

/// Message of the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn s3tta_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn s3tta_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a model directory written by the `train` command.
///
/// # Safety
/// `dir` must be a NUL-terminated UTF-8 path and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn s3tta_model_load(dir: *const c_char, out: *mut *mut S3ttaModel) -> S3ttaStatus {
    guard(|| {
        let out = output(out, "out")?;
        *out = std::ptr::null_mut();
        if dir.is_null() {
            return Err(Failure::null("dir"));
        }
        let dir = CStr::from_ptr(dir)
            .to_str()
            .map_err(|_| Failure::invalid("dir is not valid UTF-8"))?;
        let models = Models::load(Path::new(dir))?;
        let policies = models.cfg.policies(models.bank.len())?;
        let angles = models.cfg.rotation_angles()?;
        *out = Box::into_raw(Box::new(S3ttaModel {
            models,
            policies,
            angles,
        }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`s3tta_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn s3tta_model_free(model: *mut S3ttaModel) {
    if !model.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(model))));
    }
}

/// Number of image channels the model expects.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn s3tta_model_channels(model: *const S3ttaModel, out: *mut usize) -> S3ttaStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| Failure::null("model"))?;
        *output(out, "out")? = model.models.st.arch().in_channels;
        Ok(())
    })
}

/// Number of augmentation policies the selector chooses from.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn s3tta_model_policy_count(model: *const S3ttaModel, out: *mut usize) -> S3ttaStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| Failure::null("model"))?;
        *output(out, "out")? = model.policies.len();
        Ok(())
    })
}

/// Predicts an instance label map.
///
/// `labels` receives `height * width` ids numbered `1..=count` in raster
/// order of first appearance. For [`S3ttaMethod::S3tta`] the winning policy
/// is written to `selected_scale` and `selected_style` (-1 for no style)
/// when those pointers are non-null.
///
/// # Safety
/// `image` must hold `channels * height * width` floats and `labels`
/// `height * width` slots; the other pointers must be valid or null where
/// allowed.
#[no_mangle]
pub unsafe extern "C" fn s3tta_predict(
    model: *const S3ttaModel,
    method: S3ttaMethod,
    image: *const f32,
    channels: usize,
    height: usize,
    width: usize,
    labels: *mut u32,
    count: *mut usize,
    selected_scale: *mut f64,
    selected_style: *mut i64,
) -> S3ttaStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| Failure::null("model"))?;
        let n = checked_len(&[channels, height, width])?;
        let data = input(image, n, "image")?.to_vec();
        if labels.is_null() {
            return Err(Failure::null("labels"));
        }
        let count = output(count, "count")?;
        let img = Image::new(channels, height, width, data)?;
        let m = &model.models;
        let min_area = m.cfg.min_area;
        let pred = match method {
            S3ttaMethod::Baseline => predict_plain(&m.plain, &img, min_area)?,
            S3ttaMethod::AggregateAll | S3ttaMethod::S3tta => {
                let engine = StyleEngine::new(&m.st, &m.bank)?;
                let bundles = build_bundles(&img, &engine, &model.policies, &model.angles)?;
                if method == S3ttaMethod::AggregateAll {
                    baseline_aggregate_all(&bundles, &m.seg, min_area)?
                } else {
                    let (pred, selection) = predict_from_bundles(&bundles, &m.seg, min_area)?;
                    if let Some(s) = selected_scale.as_mut() {
                        *s = selection.policy.scale;
                    }
                    if let Some(s) = selected_style.as_mut() {
                        *s = selection.policy.style_code();
                    }
                    pred
                }
            }
        };
        slice::from_raw_parts_mut(labels, height * width).copy_from_slice(pred.labels());
        *count = pred.count();
        Ok(())
    })
}

/// Picks the most rotation-consistent policy from precomputed variants.
///
/// Policy `p` has scale `scales[p]`, style code `styles[p]` (negative for
/// none) and upright variant size `heights[p] x widths[p]`. `variants` holds,
/// policy by policy and angle by angle, the planar variant produced from the
/// input rotated by `quarter_turns[a]`; odd turns swap height and width.
/// `winner` receives the chosen index and, when non-null, `scores` receives
/// one consistency score per policy.
///
/// # Safety
/// Every array must hold the number of elements described above.
#[no_mangle]
pub unsafe extern "C" fn s3tta_select(
    variants: *const f32,
    channels: usize,
    n_policies: usize,
    heights: *const usize,
    widths: *const usize,
    scales: *const f64,
    styles: *const i64,
    quarter_turns: *const u8,
    n_angles: usize,
    winner: *mut usize,
    scores: *mut f64,
) -> S3ttaStatus {
    guard(|| {
        let heights = input(heights, n_policies, "heights")?;
        let widths = input(widths, n_policies, "widths")?;
        let scales = input(scales, n_policies, "scales")?;
        let styles = input(styles, n_policies, "styles")?;
        let turns = input(quarter_turns, n_angles, "quarter_turns")?;
        let winner = output(winner, "winner")?;
        let angles = turns
            .iter()
            .map(|&k| RotationAngle::new(k))
            .collect::<s3tta_core::Result<Vec<_>>>()?;
        let mut total = 0usize;
        for p in 0..n_policies {
            let per = checked_len(&[channels, heights[p], widths[p], n_angles])?;
            total = total.checked_add(per).ok_or_else(|| Failure::invalid("buffer size overflows"))?;
        }
        let data = input(variants, total, "variants")?;
        let mut offset = 0;
        let mut bundles = Vec::with_capacity(n_policies);
        for p in 0..n_policies {
            if !scales[p].is_finite() || scales[p] <= 0.0 {
                return Err(Failure::invalid(format!("scale {} must be positive", scales[p])));
            }
            let style = (styles[p] >= 0).then_some(styles[p] as usize);
            let mut imgs = Vec::with_capacity(n_angles);
            for a in &angles {
                let (h, w) = if a.quarter_turns() % 2 == 1 {
                    (widths[p], heights[p])
                } else {
                    (heights[p], widths[p])
                };
                let len = channels * h * w;
                imgs.push(Image::new(channels, h, w, data[offset..offset + len].to_vec())?);
                offset += len;
            }
            bundles.push(AugmentedBundle {
                policy: AugmentationPolicy::new(scales[p], style),
                angles: angles.clone(),
                variants: imgs,
                original_size: (heights[p], widths[p]),
            });
        }
        let selection = select(&bundles)?;
        *winner = selection.winner;
        if !scores.is_null() {
            let out = slice::from_raw_parts_mut(scores, n_policies);
            for (o, s) in out.iter_mut().zip(&selection.scores) {
                *o = s.mae;
            }
        }
        Ok(())
    })
}

fn label_map(ptr: *const u32, height: usize, width: usize, what: &str) -> Result<InstanceLabelMap, Failure> {
    let n = checked_len(&[height, width])?;
    let labels = unsafe { input(ptr, n, what)? }.to_vec();
    Ok(InstanceLabelMap::from_raw(height, width, labels)?.0)
}

/// Instance F1 at IoU threshold `tau` with optimal one-to-one matching.
/// Label ids may be arbitrary; 0 is background.
///
/// # Safety
/// `pred` and `gt` must hold `height * width` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn s3tta_f1(
    pred: *const u32,
    gt: *const u32,
    height: usize,
    width: usize,
    tau: f64,
    out: *mut f64,
) -> S3ttaStatus {
    guard(|| {
        let out = output(out, "out")?;
        if !(0.0..=1.0).contains(&tau) {
            return Err(Failure::invalid(format!("tau {tau} outside [0, 1]")));
        }
        let p = label_map(pred, height, width, "pred")?;
        let g = label_map(gt, height, width, "gt")?;
        *out = f1_at(&p, &g, tau)?;
        Ok(())
    })
}

/// Dice and Jaccard of two binary masks (nonzero is foreground).
///
/// # Safety
/// `a` and `b` must hold `len` bytes; `dice` and `jaccard` must be valid.
#[no_mangle]
pub unsafe extern "C" fn s3tta_dice_jaccard(
    a: *const u8,
    b: *const u8,
    len: usize,
    dice: *mut f64,
    jaccard: *mut f64,
) -> S3ttaStatus {
    guard(|| {
        let a: Vec<bool> = input(a, len, "a")?.iter().map(|&v| v != 0).collect();
        let b: Vec<bool> = input(b, len, "b")?.iter().map(|&v| v != 0).collect();
        let (dice, jaccard) = (output(dice, "dice")?, output(jaccard, "jaccard")?);
        (*dice, *jaccard) = dice_jaccard(&a, &b)?;
        Ok(())
    })
}

/// Default loss weights.
#[no_mangle]
pub extern "C" fn s3tta_default_loss_weights() -> S3ttaLossWeights {
    let w = LossWeights::default();
    S3ttaLossWeights {
        content: w.content,
        style: w.style,
        seg: w.seg,
    }
}

/// Weighted training objective. Null `weights` means the defaults.
///
/// # Safety
/// `weights` must be valid or null; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn s3tta_total_loss(
    seg: f64,
    content: f64,
    style: f64,
    weights: *const S3ttaLossWeights,
    out: *mut f64,
) -> S3ttaStatus {
    guard(|| {
        let out = output(out, "out")?;
        let w = weights.as_ref().copied().unwrap_or_else(|| s3tta_default_loss_weights());
        let w = LossWeights {
            content: w.content,
            style: w.style,
            seg: w.seg,
        };
        *out = total_loss(seg, content, style, &w);
        Ok(())
    })
}
