//! C ABI for veriforge.
//!
//! Conventions:
//! - Every fallible function returns a `VfStatus`; results come back
//!   through out-pointers that are written only on success.
//! - On failure, `vf_last_error()` returns a message for the calling thread.
//!   The message stays valid until that thread's next call into the library.
//! - Handles are opaque. Release them with the matching `_free` function.
//!   Passing NULL to a `_free` function is a no-op.
//! - Strings are NUL-terminated UTF-8 file paths.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use veriforge::data::{load_wav, parse_trials, ScoreEntry, ScoreSet, Trial, TrialList, Waveform};
use veriforge::eval::{
    eer_from, mean_cosine, mean_unit_embedding, min_dcf_from, score_trials, tta_segments, AudioDir, DcfParams,
    Embedder, ModelEmbedder,
};
use veriforge::fusion::{search_weights, Objective};
use veriforge::nn::load_checkpoint;
use veriforge::Error;

/// Status codes. The non-zero values match the `veriforge` CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VfStatus {
    Ok = 0,
    /// Bad argument, NULL pointer or invalid configuration.
    Usage = 1,
    /// Missing or malformed file, or inconsistent inputs.
    Data = 2,
    /// Non-finite values.
    Numeric = 3,
    /// A Rust panic was caught at the boundary.
    Internal = 4,
}

/// Objective for `vf_fuse_search`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VfObjective {
    Eer = 0,
    MinDcf = 1,
}

/// A trained model loaded from a checkpoint.
pub struct VfModel {
    embedder: ModelEmbedder,
}

/// A parsed trial list.
pub struct VfTrials {
    list: TrialList,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(e: &Error) -> VfStatus {
    if matches!(e.root(), Error::InvalidArgument(_)) {
        return VfStatus::Usage;
    }
    match e.exit_code() {
        1 => VfStatus::Usage,
        3 => VfStatus::Numeric,
        _ => VfStatus::Data,
    }
}

fn guard<F: FnOnce() -> Result<(), Error>>(f: F) -> VfStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => VfStatus::Ok,
        Ok(Err(e)) => {
            let s = status_of(&e);
            set_error(e.to_string());
            s
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal error: {msg}"));
            VfStatus::Internal
        }
    }
}

fn arg(what: &str) -> Error {
    Error::InvalidArgument(format!("{what} is NULL or invalid"))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Error> {
    if p.is_null() {
        return Err(arg(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Error::InvalidArgument(format!("{what} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Error> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(arg(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Error> {
    p.as_mut().ok_or_else(|| arg(what))
}

unsafe fn model_arg<'a>(m: *const VfModel) -> Result<&'a VfModel, Error> {
    m.as_ref().ok_or_else(|| arg("model"))
}

fn split(scores: &[f64], labels: &[u8]) -> Result<(Vec<f64>, Vec<f64>), Error> {
    let (mut tar, mut non) = (Vec::new(), Vec::new());
    for (&s, &l) in scores.iter().zip(labels) {
        match l {
            1 => tar.push(s),
            0 => non.push(s),
            other => return Err(Error::InvalidArgument(format!("label {other} is neither 0 nor 1"))),
        }
    }
    Ok((tar, non))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn vf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or NULL if the last
/// call succeeded.
#[no_mangle]
pub extern "C" fn vf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vf_model_load(path: *const c_char, out: *mut *mut VfModel) -> VfStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        let out = out_arg(out, "out")?;
        let embedder = ModelEmbedder::new(load_checkpoint(&path)?.model()?)?;
        *out = Box::into_raw(Box::new(VfModel { embedder }));
        Ok(())
    })
}

/// Releases a model handle.
///
/// # Safety
/// `model` must be NULL or a handle from `vf_model_load` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vf_model_free(model: *mut VfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Embedding dimension of the model, or 0 for a NULL handle.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vf_model_embedding_dim(model: *const VfModel) -> usize {
    model.as_ref().map_or(0, |m| m.embedder.model.embedding_dim())
}

fn embed_wave(m: &VfModel, w: &Waveform) -> Result<Vec<f64>, Error> {
    Ok(mean_unit_embedding(&m.embedder.embed_segments(&tta_segments(w))?))
}

fn copy_out(v: &[f64], out: *mut f64, cap: usize) -> Result<(), Error> {
    if cap < v.len() {
        return Err(Error::InvalidArgument(format!(
            "buffer holds {cap} values, need {}",
            v.len()
        )));
    }
    if out.is_null() {
        return Err(arg("out"));
    }
    unsafe { std::ptr::copy_nonoverlapping(v.as_ptr(), out, v.len()) };
    Ok(())
}

/// Embeds raw mono samples in [-1, 1]. The embedding is the mean of the
/// L2-normalised test-time segment embeddings. `cap` must be at least
/// `vf_model_embedding_dim(model)`.
///
/// # Safety
/// `samples` must point to `n` values and `out` to `cap` writable values.
#[no_mangle]
pub unsafe extern "C" fn vf_model_embed_samples(
    model: *const VfModel,
    samples: *const f64,
    n: usize,
    sample_rate: u32,
    out: *mut f64,
    cap: usize,
) -> VfStatus {
    guard(|| {
        let m = model_arg(model)?;
        let s = slice_arg(samples, n, "samples")?;
        let w = Waveform::new(s.to_vec(), sample_rate);
        copy_out(&embed_wave(m, &w)?, out, cap)
    })
}

/// Embeds a WAV file. See `vf_model_embed_samples`.
///
/// # Safety
/// `path` must be NUL-terminated and `out` must hold `cap` values.
#[no_mangle]
pub unsafe extern "C" fn vf_model_embed_file(
    model: *const VfModel,
    path: *const c_char,
    out: *mut f64,
    cap: usize,
) -> VfStatus {
    guard(|| {
        let m = model_arg(model)?;
        let w = load_wav(path_arg(path, "path")?)?;
        copy_out(&embed_wave(m, &w)?, out, cap)
    })
}

/// Scores two WAV files: the mean cosine over all pairs of test-time
/// segment embeddings.
///
/// # Safety
/// Paths must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn vf_model_score_files(
    model: *const VfModel,
    enroll: *const c_char,
    test: *const c_char,
    out: *mut f64,
) -> VfStatus {
    guard(|| {
        let m = model_arg(model)?;
        let a = load_wav(path_arg(enroll, "enroll")?)?;
        let b = load_wav(path_arg(test, "test")?)?;
        let out = out_arg(out, "out")?;
        let ea = m.embedder.embed_segments(&tta_segments(&a))?;
        let eb = m.embedder.embed_segments(&tta_segments(&b))?;
        *out = mean_cosine(&ea, &eb);
        Ok(())
    })
}

/// Parses a trial list file (`label enroll_id test_id` per line).
///
/// # Safety
/// `path` must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn vf_trials_load(path: *const c_char, out: *mut *mut VfTrials) -> VfStatus {
    guard(|| {
        let list = parse_trials(path_arg(path, "path")?)?;
        let out = out_arg(out, "out")?;
        *out = Box::into_raw(Box::new(VfTrials { list }));
        Ok(())
    })
}

/// Releases a trial list handle.
///
/// # Safety
/// `trials` must be NULL or a handle from `vf_trials_load` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vf_trials_free(trials: *mut VfTrials) {
    if !trials.is_null() {
        drop(Box::from_raw(trials));
    }
}

/// Number of trials, or 0 for a NULL handle.
///
/// # Safety
/// `trials` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vf_trials_len(trials: *const VfTrials) -> usize {
    trials.as_ref().map_or(0, |t| t.list.len())
}

/// Copies the 0/1 labels of the trial list into `out`.
///
/// # Safety
/// `out` must hold `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn vf_trials_labels(trials: *const VfTrials, out: *mut u8, cap: usize) -> VfStatus {
    guard(|| {
        let t = trials.as_ref().ok_or_else(|| arg("trials"))?;
        if cap < t.list.len() {
            return Err(Error::InvalidArgument(format!(
                "buffer holds {cap} labels, need {}",
                t.list.len()
            )));
        }
        if out.is_null() {
            return Err(arg("out"));
        }
        for (i, l) in t.list.labels().into_iter().enumerate() {
            *out.add(i) = l as u8;
        }
        Ok(())
    })
}

/// Scores every trial with `model`, resolving utterance ids against
/// `audio_root`. `out` receives one score per trial in list order.
///
/// # Safety
/// Handles must be live, `audio_root` NUL-terminated, `out` of `cap` values.
#[no_mangle]
pub unsafe extern "C" fn vf_score_trials(
    model: *const VfModel,
    trials: *const VfTrials,
    audio_root: *const c_char,
    out: *mut f64,
    cap: usize,
) -> VfStatus {
    guard(|| {
        let m = model_arg(model)?;
        let t = trials.as_ref().ok_or_else(|| arg("trials"))?;
        let root = path_arg(audio_root, "audio_root")?;
        let scores = score_trials(&m.embedder, &t.list, &AudioDir::new(root))?;
        copy_out(&scores.scores(), out, cap)
    })
}

/// Equal error rate (a fraction) of `n` scores with 0/1 labels.
///
/// # Safety
/// `scores` and `labels` must point to `n` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn vf_eer(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> VfStatus {
    guard(|| {
        let (tar, non) = split(slice_arg(scores, n, "scores")?, slice_arg(labels, n, "labels")?)?;
        *out_arg(out, "out")? = eer_from(&tar, &non)?;
        Ok(())
    })
}

/// Minimum detection cost, normalised by the cost of the best trivial
/// system. The usual operating point is p_target 0.05, c_miss = c_fa = 1.
///
/// # Safety
/// As for `vf_eer`.
#[no_mangle]
pub unsafe extern "C" fn vf_min_dcf(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    p_target: f64,
    c_miss: f64,
    c_fa: f64,
    out: *mut f64,
) -> VfStatus {
    guard(|| {
        let params = DcfParams { c_miss, c_fa, p_target };
        params.validate()?;
        let (tar, non) = split(slice_arg(scores, n, "scores")?, slice_arg(labels, n, "labels")?)?;
        *out_arg(out, "out")? = min_dcf_from(&tar, &non, &params)?;
        Ok(())
    })
}

/// Searches fusion weights in {0,1,2,3}^k for `k` systems of `n` trials.
/// `scores` is row-major with one row of `n` scores per system. Writes the
/// `k` chosen weights to `weights_out` and the objective to `value_out`.
///
/// # Safety
/// `scores` must hold `k * n` values, `labels` `n`, `weights_out` `k`.
#[no_mangle]
pub unsafe extern "C" fn vf_fuse_search(
    scores: *const f64,
    k: usize,
    n: usize,
    labels: *const u8,
    objective: VfObjective,
    weights_out: *mut u8,
    value_out: *mut f64,
) -> VfStatus {
    guard(|| {
        if k == 0 {
            return Err(Error::InvalidArgument("no systems to fuse".into()));
        }
        let total = k.checked_mul(n).ok_or_else(|| arg("k * n"))?;
        let all = slice_arg(scores, total, "scores")?;
        let labels = slice_arg(labels, n, "labels")?;
        split(&all[..n], labels)?;
        let trials = TrialList::new(
            labels
                .iter()
                .enumerate()
                .map(|(i, &l)| Trial::new(l == 1, format!("e{i}"), format!("t{i}")))
                .collect(),
        );
        let sets: Vec<ScoreSet> = all
            .chunks(n.max(1))
            .take(k)
            .map(|row| {
                ScoreSet::new(
                    trials
                        .trials
                        .iter()
                        .zip(row)
                        .map(|(t, &score)| ScoreEntry {
                            enroll_id: t.enroll_id.clone(),
                            test_id: t.test_id.clone(),
                            score,
                        })
                        .collect(),
                )
            })
            .collect();
        let objective = match objective {
            VfObjective::Eer => Objective::Eer,
            VfObjective::MinDcf => Objective::MinDcf,
        };
        let (w, v) = search_weights(&sets, &trials, objective)?;
        let value_out = out_arg(value_out, "value_out")?;
        if weights_out.is_null() {
            return Err(arg("weights_out"));
        }
        std::ptr::copy_nonoverlapping(w.0.as_ptr(), weights_out, k);
        *value_out = v;
        Ok(())
    })
}
