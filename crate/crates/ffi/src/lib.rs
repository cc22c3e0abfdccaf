//! C ABI over the `itda` crate.
//!
//! Shards and dictionaries cross the boundary as opaque handles that the
//! caller frees with the matching `*_free` function. Every fallible call
//! returns an [`ItdaStatus`]; on failure, [`itda_last_error`] describes the
//! most recent error on the calling thread. Panics never unwind into C.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use itda::activation_store::{read_shard, write_shard};
use itda::dictionary::{self, load_dictionary, save_dictionary};
use itda::similarity::{ce_loss_score, jaccard, CeLossInputs, LabelSet};
use itda::{ActivationShard, AtomLabel, DenseMatrix, Dictionary, Error, TrainConfig};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ItdaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Validation = 3,
    Io = 4,
    Internal = 5,
}

/// Opaque activation shard.
pub struct ItdaShard(ActivationShard);

/// Opaque dictionary.
pub struct ItdaDictionary(Dictionary);

/// Training parameters. `max_dict_size == 0` means unlimited.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct ItdaTrainConfig {
    pub tau: f64,
    pub l0: usize,
    pub batch_size: usize,
    pub dedup_cosine_threshold: f64,
    pub max_dict_size: usize,
    pub relative_tau: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(ItdaStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => ItdaStatus::Io,
            Error::Internal(_) => ItdaStatus::Internal,
            _ => ItdaStatus::Validation,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(ItdaStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(ItdaStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ItdaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ItdaStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside itda".into());
            ItdaStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not UTF-8")))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    str_arg(p, what).map(PathBuf::from)
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Checks `out` before running `f`, then boxes the result into it.
unsafe fn produce<T>(out: *mut *mut T, f: impl FnOnce() -> Result<T, Failure>) -> ItdaStatus {
    if out.is_null() {
        set_error("output pointer is null".into());
        return ItdaStatus::NullPointer;
    }
    guard(|| {
        *out = Box::into_raw(Box::new(f()?));
        Ok(())
    })
}

/// Message for the last failed call on this thread, or NULL. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn itda_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn itda_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[no_mangle]
pub extern "C" fn itda_train_config_default() -> ItdaTrainConfig {
    let d = TrainConfig::default();
    ItdaTrainConfig {
        tau: d.tau,
        l0: d.l0,
        batch_size: d.batch_size,
        dedup_cosine_threshold: d.dedup_cosine_threshold,
        max_dict_size: 0,
        relative_tau: d.relative_tau,
    }
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn itda_shard_read(path: *const c_char, out: *mut *mut ItdaShard) -> ItdaStatus {
    produce(out, || {
        let path = path_arg(path, "path")?;
        Ok(ItdaShard(read_shard(&path)?))
    })
}

/// # Safety
/// `shard` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn itda_shard_write(shard: *const ItdaShard, path: *const c_char) -> ItdaStatus {
    guard(|| {
        let shard = handle(shard, "shard")?;
        let path = path_arg(path, "path")?;
        Ok(write_shard(&shard.0, &path)?)
    })
}

/// Builds a shard from `count * d_model` row-major floats. Row `i` is
/// labeled `(dataset_id, i, 0)`.
///
/// # Safety
/// String arguments must be NUL-terminated; `rows` must point to
/// `count * d_model` readable floats (it may be NULL when `count == 0`).
#[no_mangle]
pub unsafe extern "C" fn itda_shard_from_rows(
    model_id: *const c_char,
    layer_id: *const c_char,
    dataset_id: *const c_char,
    rows: *const f32,
    count: usize,
    d_model: usize,
    out: *mut *mut ItdaShard,
) -> ItdaStatus {
    produce(out, || {
        let model_id = str_arg(model_id, "model_id")?;
        let layer_id = str_arg(layer_id, "layer_id")?;
        let dataset_id = str_arg(dataset_id, "dataset_id")?;
        let len = count
            .checked_mul(d_model)
            .ok_or_else(|| invalid("count * d_model overflows"))?;
        let data = if len == 0 {
            Vec::new()
        } else if rows.is_null() {
            return Err(null("rows"));
        } else {
            std::slice::from_raw_parts(rows, len).to_vec()
        };
        let labels = (0..count as u64).map(|i| AtomLabel::new(dataset_id, i, 0)).collect();
        let shard = ActivationShard::new(model_id, layer_id, DenseMatrix::from_vec(data, count, d_model)?, labels)?;
        Ok(ItdaShard(shard))
    })
}

/// Number of rows, or 0 for NULL.
///
/// # Safety
/// `shard` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn itda_shard_count(shard: *const ItdaShard) -> usize {
    shard.as_ref().map_or(0, |s| s.0.count())
}

/// # Safety
/// `shard` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn itda_shard_d_model(shard: *const ItdaShard) -> usize {
    shard.as_ref().map_or(0, |s| s.0.d_model())
}

/// # Safety
/// `shard` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn itda_shard_free(shard: *mut ItdaShard) {
    if !shard.is_null() {
        drop(Box::from_raw(shard));
    }
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn itda_dictionary_load(path: *const c_char, out: *mut *mut ItdaDictionary) -> ItdaStatus {
    produce(out, || {
        let path = path_arg(path, "path")?;
        Ok(ItdaDictionary(load_dictionary(&path)?))
    })
}

/// # Safety
/// `dict` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn itda_dictionary_save(dict: *const ItdaDictionary, path: *const c_char) -> ItdaStatus {
    guard(|| {
        let dict = handle(dict, "dictionary")?;
        let path = path_arg(path, "path")?;
        Ok(save_dictionary(&dict.0, &path)?)
    })
}

/// # Safety
/// `dict` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn itda_dictionary_len(dict: *const ItdaDictionary) -> usize {
    dict.as_ref().map_or(0, |d| d.0.len())
}

/// # Safety
/// `dict` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn itda_dictionary_d_model(dict: *const ItdaDictionary) -> usize {
    dict.as_ref().map_or(0, |d| d.0.d_model())
}

/// Sequence and token index of atom `index`.
///
/// # Safety
/// `dict` must be a live handle; the output pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn itda_dictionary_label(
    dict: *const ItdaDictionary,
    index: usize,
    sequence_index: *mut u64,
    token_index: *mut u64,
) -> ItdaStatus {
    guard(|| {
        let dict = handle(dict, "dictionary")?;
        if sequence_index.is_null() || token_index.is_null() {
            return Err(null("output pointer"));
        }
        let label = dict
            .0
            .labels()
            .get(index)
            .ok_or_else(|| invalid(format!("atom {index} out of range for {} atoms", dict.0.len())))?;
        *sequence_index = label.sequence_index;
        *token_index = label.token_index;
        Ok(())
    })
}

/// # Safety
/// `dict` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn itda_dictionary_free(dict: *mut ItdaDictionary) {
    if !dict.is_null() {
        drop(Box::from_raw(dict));
    }
}

/// Trains a dictionary on `n_shards` shards in order.
///
/// # Safety
/// `shards` must point to `n_shards` live handles, `config` to a readable
/// struct, and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn itda_train(
    shards: *const *const ItdaShard,
    n_shards: usize,
    config: *const ItdaTrainConfig,
    out: *mut *mut ItdaDictionary,
) -> ItdaStatus {
    produce(out, || {
        let c = handle(config, "config")?;
        if shards.is_null() && n_shards > 0 {
            return Err(null("shards"));
        }
        let handles: &[*const ItdaShard] = if n_shards == 0 {
            &[]
        } else {
            std::slice::from_raw_parts(shards, n_shards)
        };
        let mut list = Vec::with_capacity(n_shards);
        for &h in handles {
            list.push(&handle(h, "shard")?.0);
        }
        let config = TrainConfig {
            tau: c.tau,
            l0: c.l0,
            batch_size: c.batch_size,
            dedup_cosine_threshold: c.dedup_cosine_threshold,
            max_dict_size: (c.max_dict_size > 0).then_some(c.max_dict_size),
            relative_tau: c.relative_tau,
            ..TrainConfig::default()
        };
        let (dict, _) = dictionary::train(list, &config)?;
        Ok(ItdaDictionary(dict))
    })
}

/// # Safety
/// `dict` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn itda_dictionary_crop(
    dict: *const ItdaDictionary,
    size: usize,
    out: *mut *mut ItdaDictionary,
) -> ItdaStatus {
    produce(out, || {
        let dict = handle(dict, "dictionary")?;
        Ok(ItdaDictionary(dictionary::crop(&dict.0, size)?))
    })
}

/// # Safety
/// `dict` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn itda_dictionary_dedup(
    dict: *const ItdaDictionary,
    cosine_threshold: f64,
    out: *mut *mut ItdaDictionary,
) -> ItdaStatus {
    produce(out, || {
        let dict = handle(dict, "dictionary")?;
        Ok(ItdaDictionary(dictionary::dedup(&dict.0, cosine_threshold)?))
    })
}

/// Matching-pursuit codes for `count` signals of width `d_model`.
///
/// Row `b` of the outputs holds up to `l0` entries in selection order;
/// unused slots have atom index -1 and coefficient 0. `out_losses` receives
/// each signal's squared reconstruction error.
///
/// # Safety
/// `signals` must hold `count * d_model` floats, `out_atoms` and
/// `out_coeffs` room for `count * l0` values, `out_losses` for `count`.
#[no_mangle]
pub unsafe extern "C" fn itda_decompose(
    dict: *const ItdaDictionary,
    signals: *const f32,
    count: usize,
    d_model: usize,
    l0: usize,
    out_atoms: *mut i64,
    out_coeffs: *mut f64,
    out_losses: *mut f64,
) -> ItdaStatus {
    guard(|| {
        let dict = handle(dict, "dictionary")?;
        if count == 0 {
            return Ok(());
        }
        if signals.is_null() || out_atoms.is_null() || out_coeffs.is_null() || out_losses.is_null() {
            return Err(null("buffer"));
        }
        if d_model != dict.0.d_model() {
            return Err(invalid(format!(
                "signals have width {d_model}, dictionary {}",
                dict.0.d_model()
            )));
        }
        let slots = count.checked_mul(l0).ok_or_else(|| invalid("count * l0 overflows"))?;
        let len = count
            .checked_mul(d_model)
            .ok_or_else(|| invalid("count * d_model overflows"))?;
        let data = std::slice::from_raw_parts(signals, len);
        let view = itda::MatrixView::new(data, d_model)?;
        let codes = itda::matching_pursuit::mp_encode(view, dict.0.atoms().view(), &itda::MpConfig::new(l0))?;
        let atoms = std::slice::from_raw_parts_mut(out_atoms, slots);
        let coeffs = std::slice::from_raw_parts_mut(out_coeffs, slots);
        let losses = std::slice::from_raw_parts_mut(out_losses, count);
        atoms.fill(-1);
        coeffs.fill(0.0);
        for (b, code) in codes.iter().enumerate() {
            for (k, e) in code.entries.iter().enumerate() {
                atoms[b * l0 + k] = e.atom as i64;
                coeffs[b * l0 + k] = e.coefficient;
            }
            losses[b] = code.residual_sq;
        }
        Ok(())
    })
}

/// Jaccard index of the two dictionaries' label sets.
///
/// # Safety
/// Both handles must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn itda_jaccard(a: *const ItdaDictionary, b: *const ItdaDictionary, out: *mut f64) -> ItdaStatus {
    guard(|| {
        let a = handle(a, "dictionary a")?;
        let b = handle(b, "dictionary b")?;
        if out.is_null() {
            return Err(null("output pointer"));
        }
        *out = jaccard(
            &LabelSet::from_dictionary(&a.0, "a"),
            &LabelSet::from_dictionary(&b.0, "b"),
        );
        Ok(())
    })
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn itda_ce_loss_score(h_orig: f64, h_star: f64, h_zero: f64, out: *mut f64) -> ItdaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("output pointer"));
        }
        *out = ce_loss_score(&CeLossInputs { h_orig, h_star, h_zero })?;
        Ok(())
    })
}
