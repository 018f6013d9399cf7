//! C ABI for the level set traversal toolkit.
//!
//! Conventions: opaque handles, integer status codes, caller-owned output
//! buffers. Every function returns `LEVELSET_OK` (0) on success; on failure
//! it returns a nonzero code and stores a message retrievable through
//! [`levelset_last_error_message`] (thread-local, valid until the next call
//! on the same thread). The hand-maintained header lives at
//! `include/levelset.h`.

use levelset_core::attacks::{fgsm, pgd, AttackConfig};
use levelset_core::lst::{traverse, LstConfig, Termination};
use levelset_core::models::{load_checkpoint, ConfidenceModel, Model};
use levelset_core::tensor::Tensor;
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

pub const LEVELSET_OK: i32 = 0;
pub const LEVELSET_ERR_ARGUMENT: i32 = 1;
pub const LEVELSET_ERR_FORMAT: i32 = 2;
pub const LEVELSET_ERR_NUMERIC: i32 = 3;
pub const LEVELSET_ERR_PANIC: i32 = 4;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn fail(code: i32, message: &str) -> i32 {
    set_error(message);
    code
}

fn guard<F: FnOnce() -> i32>(body: F) -> i32 {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(code) => code,
        Err(_) => fail(LEVELSET_ERR_PANIC, "internal panic"),
    }
}

/// Opaque classifier handle; create with [`levelset_model_load`], destroy
/// with [`levelset_model_free`].
pub struct LevelsetModel {
    inner: Model,
}

/// Traversal hyperparameters (C layout). `use_clamp` toggles the pixel box
/// [clamp_lo, clamp_hi]; `early_exit` stops once the iterate is within
/// 1e-3 * sqrt(d) of the target.
#[repr(C)]
#[derive(Clone, Copy)]
pub struct LevelsetLstConfig {
    pub max_iterations: u64,
    pub eta: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub beta: f64,
    pub clamp_lo: f64,
    pub clamp_hi: f64,
    pub use_clamp: i32,
    pub early_exit: i32,
}

impl LevelsetLstConfig {
    fn to_core(self) -> LstConfig {
        LstConfig {
            max_iterations: self.max_iterations as usize,
            eta: self.eta,
            epsilon: self.epsilon,
            delta: self.delta,
            beta: self.beta,
            pixel_clamp: (self.use_clamp != 0).then_some((self.clamp_lo, self.clamp_hi)),
            early_exit: self.early_exit != 0,
            record_path: false,
        }
    }
}

/// Traversal outcome summary (C layout). `termination`: 0 converged,
/// 1 max-iterations, 2 confidence-guard.
#[repr(C)]
#[derive(Clone, Copy, Default)]
pub struct LevelsetLstSummary {
    pub termination: i32,
    pub iterations: u64,
    pub source_confidence: f64,
    pub final_confidence: f64,
}

/// Toolkit version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn levelset_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message for the most recent error on this thread. Never null; valid until
/// the next toolkit call on the same thread.
#[no_mangle]
pub extern "C" fn levelset_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// CIFAR-style traversal defaults (m=300, eta=1e-2, epsilon=2e-3,
/// delta=0.25, beta=0.9, pixel clamp [0,1]).
#[no_mangle]
pub extern "C" fn levelset_lst_config_cifar() -> LevelsetLstConfig {
    LevelsetLstConfig {
        max_iterations: 300,
        eta: 1e-2,
        epsilon: 2e-3,
        delta: 0.25,
        beta: 0.9,
        clamp_lo: 0.0,
        clamp_hi: 1.0,
        use_clamp: 1,
        early_exit: 0,
    }
}

/// ImageNet-style traversal defaults (m=400, delta=0.2, otherwise as CIFAR).
#[no_mangle]
pub extern "C" fn levelset_lst_config_imagenet() -> LevelsetLstConfig {
    LevelsetLstConfig {
        max_iterations: 400,
        delta: 0.2,
        ..levelset_lst_config_cifar()
    }
}

/// Loads a checkpoint from a nul-terminated path into a new handle.
///
/// # Safety
/// `path` must point to a valid nul-terminated string and `out` to a
/// writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn levelset_model_load(
    path: *const c_char,
    out: *mut *mut LevelsetModel,
) -> i32 {
    guard(|| {
        if path.is_null() || out.is_null() {
            return fail(LEVELSET_ERR_ARGUMENT, "null pointer argument");
        }
        let raw = unsafe { CStr::from_ptr(path) };
        let Ok(text) = raw.to_str() else {
            return fail(LEVELSET_ERR_ARGUMENT, "path is not valid UTF-8");
        };
        match load_checkpoint(&PathBuf::from(text)) {
            Ok(model) => {
                unsafe {
                    *out = Box::into_raw(Box::new(LevelsetModel { inner: model }));
                }
                LEVELSET_OK
            }
            Err(e) => fail(LEVELSET_ERR_FORMAT, &e.to_string()),
        }
    })
}

/// Releases a handle returned by [`levelset_model_load`]; null is a no-op.
///
/// # Safety
/// `model` must be a live handle from [`levelset_model_load`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn levelset_model_free(model: *mut LevelsetModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Flattened input length the model expects; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn levelset_model_input_len(model: *const LevelsetModel) -> usize {
    if model.is_null() {
        return 0;
    }
    unsafe { &*model }.inner.input_len()
}

/// Number of classes; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn levelset_model_num_classes(model: *const LevelsetModel) -> usize {
    if model.is_null() {
        return 0;
    }
    unsafe { &*model }.inner.num_classes()
}

unsafe fn slice_arg<'a>(ptr: *const f64, len: usize) -> Option<&'a [f64]> {
    if ptr.is_null() {
        None
    } else {
        Some(unsafe { std::slice::from_raw_parts(ptr, len) })
    }
}

fn tensor_from(model: &Model, data: &[f64]) -> Result<Tensor, String> {
    if data.len() != model.input_len() {
        return Err(format!(
            "input length {} does not match model ({})",
            data.len(),
            model.input_len()
        ));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err("input contains non-finite values".into());
    }
    Tensor::new(model.arch().input_shape(), data.to_vec()).map_err(|e| e.to_string())
}

/// Softmax probabilities at `input`; `out_probs` must hold `out_len` >=
/// num_classes values.
///
/// # Safety
/// `model` must be a live handle; `input` and `out_probs` must point to
/// readable/writable buffers of the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn levelset_model_predict(
    model: *const LevelsetModel,
    input: *const f64,
    input_len: usize,
    out_probs: *mut f64,
    out_len: usize,
) -> i32 {
    guard(|| {
        if model.is_null() || out_probs.is_null() {
            return fail(LEVELSET_ERR_ARGUMENT, "null pointer argument");
        }
        let model = &unsafe { &*model }.inner;
        let Some(data) = (unsafe { slice_arg(input, input_len) }) else {
            return fail(LEVELSET_ERR_ARGUMENT, "null input");
        };
        if out_len < model.num_classes() {
            return fail(LEVELSET_ERR_ARGUMENT, "output buffer too small");
        }
        let x = match tensor_from(model, data) {
            Ok(x) => x,
            Err(msg) => return fail(LEVELSET_ERR_ARGUMENT, &msg),
        };
        match model.predict(&x) {
            Ok(probs) => {
                let out = unsafe { std::slice::from_raw_parts_mut(out_probs, out_len) };
                out[..probs.len()].copy_from_slice(&probs);
                LEVELSET_OK
            }
            Err(e) => fail(LEVELSET_ERR_NUMERIC, &e.to_string()),
        }
    })
}

/// Argmax class at `input` (ties broken by the lowest index).
///
/// # Safety
/// `model` must be a live handle; `input` and `out_class` valid buffers.
#[no_mangle]
pub unsafe extern "C" fn levelset_model_predicted_class(
    model: *const LevelsetModel,
    input: *const f64,
    input_len: usize,
    out_class: *mut usize,
) -> i32 {
    guard(|| {
        if model.is_null() || out_class.is_null() {
            return fail(LEVELSET_ERR_ARGUMENT, "null pointer argument");
        }
        let model = &unsafe { &*model }.inner;
        let Some(data) = (unsafe { slice_arg(input, input_len) }) else {
            return fail(LEVELSET_ERR_ARGUMENT, "null input");
        };
        let x = match tensor_from(model, data) {
            Ok(x) => x,
            Err(msg) => return fail(LEVELSET_ERR_ARGUMENT, &msg),
        };
        match model.predicted_class(&x) {
            Ok(class) => {
                unsafe {
                    *out_class = class;
                }
                LEVELSET_OK
            }
            Err(e) => fail(LEVELSET_ERR_NUMERIC, &e.to_string()),
        }
    })
}

/// Level set traversal from `source` toward `target` holding confidence in
/// `class`. Writes the output point into `out_point` (length `len`) and, if
/// non-null, fills `out_summary`.
///
/// # Safety
/// `model` must be a live handle; `source`, `target`, `out_point` must hold
/// `len` values; `config` must point to a valid config; `out_summary` may be
/// null.
#[no_mangle]
pub unsafe extern "C" fn levelset_traverse(
    model: *const LevelsetModel,
    source: *const f64,
    target: *const f64,
    len: usize,
    class: usize,
    config: *const LevelsetLstConfig,
    out_point: *mut f64,
    out_summary: *mut LevelsetLstSummary,
) -> i32 {
    guard(|| {
        if model.is_null() || config.is_null() || out_point.is_null() {
            return fail(LEVELSET_ERR_ARGUMENT, "null pointer argument");
        }
        let model = &unsafe { &*model }.inner;
        let (Some(src), Some(tgt)) = (unsafe { slice_arg(source, len) }, unsafe {
            slice_arg(target, len)
        }) else {
            return fail(LEVELSET_ERR_ARGUMENT, "null input");
        };
        let source = match tensor_from(model, src) {
            Ok(x) => x,
            Err(msg) => return fail(LEVELSET_ERR_ARGUMENT, &msg),
        };
        let target = match tensor_from(model, tgt) {
            Ok(x) => x,
            Err(msg) => return fail(LEVELSET_ERR_ARGUMENT, &msg),
        };
        let core_config = unsafe { *config }.to_core();
        match traverse(model, &source, class, &target, &core_config) {
            Ok(result) => {
                let out = unsafe { std::slice::from_raw_parts_mut(out_point, len) };
                out.copy_from_slice(result.output.data());
                if !out_summary.is_null() {
                    unsafe {
                        *out_summary = LevelsetLstSummary {
                            termination: match result.termination {
                                Termination::Converged => 0,
                                Termination::MaxIterations => 1,
                                Termination::ConfidenceGuard => 2,
                            },
                            iterations: result.iterations() as u64,
                            source_confidence: result.source_confidence,
                            final_confidence: result.final_confidence,
                        };
                    }
                }
                LEVELSET_OK
            }
            Err(e) => {
                let code = match &e {
                    levelset_core::lst::LstError::NonFinite { .. } => LEVELSET_ERR_NUMERIC,
                    _ => LEVELSET_ERR_ARGUMENT,
                };
                fail(code, &e.to_string())
            }
        }
    })
}

/// Single-step signed-gradient attack within `radius`; writes the perturbed
/// input into `out_point`.
///
/// # Safety
/// `model` must be a live handle; `input` and `out_point` must hold `len`
/// values.
#[no_mangle]
pub unsafe extern "C" fn levelset_fgsm(
    model: *const LevelsetModel,
    input: *const f64,
    len: usize,
    class: usize,
    radius: f64,
    out_point: *mut f64,
) -> i32 {
    guard(|| {
        if model.is_null() || out_point.is_null() {
            return fail(LEVELSET_ERR_ARGUMENT, "null pointer argument");
        }
        let model = &unsafe { &*model }.inner;
        let Some(data) = (unsafe { slice_arg(input, len) }) else {
            return fail(LEVELSET_ERR_ARGUMENT, "null input");
        };
        let x = match tensor_from(model, data) {
            Ok(x) => x,
            Err(msg) => return fail(LEVELSET_ERR_ARGUMENT, &msg),
        };
        match fgsm(model, &x, class, radius) {
            Ok(adv) => {
                let out = unsafe { std::slice::from_raw_parts_mut(out_point, len) };
                out.copy_from_slice(adv.data());
                LEVELSET_OK
            }
            Err(e) => fail(LEVELSET_ERR_ARGUMENT, &e.to_string()),
        }
    })
}

/// Projected gradient descent within `radius`; writes the perturbed input
/// into `out_point`.
///
/// # Safety
/// `model` must be a live handle; `input` and `out_point` must hold `len`
/// values.
#[no_mangle]
pub unsafe extern "C" fn levelset_pgd(
    model: *const LevelsetModel,
    input: *const f64,
    len: usize,
    class: usize,
    radius: f64,
    step_size: f64,
    steps: usize,
    random_start: i32,
    seed: u64,
    out_point: *mut f64,
) -> i32 {
    guard(|| {
        if model.is_null() || out_point.is_null() {
            return fail(LEVELSET_ERR_ARGUMENT, "null pointer argument");
        }
        let model = &unsafe { &*model }.inner;
        let Some(data) = (unsafe { slice_arg(input, len) }) else {
            return fail(LEVELSET_ERR_ARGUMENT, "null input");
        };
        let x = match tensor_from(model, data) {
            Ok(x) => x,
            Err(msg) => return fail(LEVELSET_ERR_ARGUMENT, &msg),
        };
        let config = AttackConfig {
            radius,
            step_size,
            steps,
            random_start: random_start != 0,
            seed,
        };
        match pgd(model, &x, class, &config) {
            Ok(adv) => {
                let out = unsafe { std::slice::from_raw_parts_mut(out_point, len) };
                out.copy_from_slice(adv.data());
                LEVELSET_OK
            }
            Err(e) => fail(LEVELSET_ERR_ARGUMENT, &e.to_string()),
        }
    })
}
