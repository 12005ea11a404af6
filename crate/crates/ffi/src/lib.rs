//! C ABI over `cmsa-vqa`.
//!
//! Every function returns a [`CmsaStatus`]; on failure a message is kept per
//! thread and can be fetched with [`cmsa_last_error_message`]. Models and
//! bundles are opaque handles released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use cmsa_vqa::data::synth::QUESTION_LEN;
use cmsa_vqa::data::{Entry, QuestionKind, Split, TensorBundle, VqaSample};
use cmsa_vqa::harness::{self, load_checkpoint, vqa_from_checkpoint, RunConfig, VqaModel};
use cmsa_vqa::image::{spatial_map, ImageType};
use cmsa_vqa::numerics::{Graph, ParamStore, Tensor};
use cmsa_vqa::Error;

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CmsaStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Config = 4,
    Bundle = 5,
    Shape = 6,
    NonFinite = 7,
    CheckFailed = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> CmsaStatus {
    match e {
        Error::Shape { .. } | Error::Axis { .. } => CmsaStatus::Shape,
        Error::Index { .. } | Error::Invalid(_) | Error::Missing { .. } => CmsaStatus::InvalidArgument,
        Error::NonFinite { .. } => CmsaStatus::NonFinite,
        Error::Config(_) => CmsaStatus::Config,
        Error::Bundle(_) | Error::Truncated { .. } | Error::Json(_) => CmsaStatus::Bundle,
        Error::Io { .. } => CmsaStatus::Io,
    }
}

fn fail(status: CmsaStatus, msg: impl Into<String>) -> CmsaStatus {
    set_error(msg);
    status
}

/// Runs `f`, mapping library errors and panics to status codes.
fn guard(f: impl FnOnce() -> Result<(), CmsaStatus>) -> CmsaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CmsaStatus::Ok,
        Ok(Err(status)) => status,
        Err(_) => fail(CmsaStatus::Panic, "internal panic"),
    }
}

fn lib(e: Error) -> CmsaStatus {
    fail(status_of(&e), e.to_string())
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, CmsaStatus> {
    if p.is_null() {
        return Err(fail(CmsaStatus::NullArgument, "path is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| fail(CmsaStatus::InvalidArgument, "path is not UTF-8"))
}

unsafe fn out_slice<'a, T>(p: *mut T, len: usize, need: usize, what: &str) -> Result<&'a mut [T], CmsaStatus> {
    if p.is_null() {
        return Err(fail(CmsaStatus::NullArgument, format!("{what} is null")));
    }
    if len < need {
        return Err(fail(CmsaStatus::BufferTooSmall, format!("{what} needs {need} elements, got {len}")));
    }
    Ok(std::slice::from_raw_parts_mut(p, need))
}

fn nonnull<T>(p: *const T, what: &str) -> Result<(), CmsaStatus> {
    if p.is_null() {
        Err(fail(CmsaStatus::NullArgument, format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// Copies the calling thread's last error message (NUL-terminated, truncated
/// to fit) into `buf`. Returns the full message length in bytes.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn cmsa_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// A trained VQA model.
pub struct CmsaModel {
    model: VqaModel,
    store: ParamStore,
}

/// Loads a VQA checkpoint written by the training run.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cmsa_model_load(path: *const c_char, out: *mut *mut CmsaModel) -> CmsaStatus {
    guard(|| {
        let path = path_arg(path)?;
        nonnull(out, "out")?;
        let ckpt = load_checkpoint(&path).map_err(lib)?;
        let vocab = ckpt.store.get("q.emb_a").map_err(lib)?.shape()[0];
        let model = vqa_from_checkpoint(&ckpt, vocab).map_err(lib)?;
        *out = Box::into_raw(Box::new(CmsaModel {
            model,
            store: ckpt.store,
        }));
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from [`cmsa_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cmsa_model_free(model: *mut CmsaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Model input and output sizes.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct CmsaModelInfo {
    pub image_size: usize,
    pub in_channels: usize,
    pub question_len: usize,
    pub vocab_size: usize,
    pub num_answers: usize,
    pub grid: usize,
}

/// # Safety
/// `model` must be a live handle; `info` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cmsa_model_info(model: *const CmsaModel, info: *mut CmsaModelInfo) -> CmsaStatus {
    guard(|| {
        nonnull(model, "model")?;
        nonnull(info, "info")?;
        let m = &(*model).model;
        *info = CmsaModelInfo {
            image_size: m.cfg.image_size,
            in_channels: m.cfg.in_channels,
            question_len: m.cfg.l_w,
            vocab_size: m.question.cfg.vocab_size,
            num_answers: m.answer.mlp.dims.last().copied().unwrap_or(0),
            grid: m.cfg.grid(),
        };
        Ok(())
    })
}

/// Forward pass on one image (`[H×W×C]` row-major) and `question_len` token
/// ids. Writes answer logits and the three type-gate weights.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn cmsa_model_predict(
    model: *const CmsaModel,
    image: *const f64,
    image_len: usize,
    tokens: *const u32,
    tokens_len: usize,
    answer_logits: *mut f64,
    answer_logits_len: usize,
    gate: *mut f64,
    gate_len: usize,
) -> CmsaStatus {
    guard(|| {
        nonnull(model, "model")?;
        nonnull(image, "image")?;
        nonnull(tokens, "tokens")?;
        let CmsaModel { model, store } = &*model;
        let c = &model.cfg;
        let image = Tensor::new(
            [c.image_size, c.image_size, c.in_channels],
            std::slice::from_raw_parts(image, image_len).to_vec(),
        )
        .map_err(lib)?;
        let ids: Vec<usize> = std::slice::from_raw_parts(tokens, tokens_len).iter().map(|&t| t as usize).collect();
        let k = model.answer.mlp.dims.last().copied().unwrap_or(0);
        let logits_out = out_slice(answer_logits, answer_logits_len, k, "answer_logits")?;
        let gate_out = out_slice(gate, gate_len, 3, "gate")?;
        let mut g = Graph::new();
        let fwd = model.forward(&mut g, store, &image, &ids).map_err(lib)?;
        logits_out.copy_from_slice(g.value(fwd.answer_logits).data());
        gate_out.copy_from_slice(g.value(fwd.gate.weights).data());
        Ok(())
    })
}

/// Answer id and predicted image type for one sample.
///
/// # Safety
/// Pointers must be valid for the stated lengths; outputs valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cmsa_model_predict_class(
    model: *const CmsaModel,
    image: *const f64,
    image_len: usize,
    tokens: *const u32,
    tokens_len: usize,
    answer: *mut u32,
    image_type: *mut u32,
) -> CmsaStatus {
    guard(|| {
        nonnull(model, "model")?;
        nonnull(image, "image")?;
        nonnull(tokens, "tokens")?;
        nonnull(answer, "answer")?;
        nonnull(image_type, "image_type")?;
        let CmsaModel { model, store } = &*model;
        let c = &model.cfg;
        let sample = VqaSample {
            image: Tensor::new(
                [c.image_size, c.image_size, c.in_channels],
                std::slice::from_raw_parts(image, image_len).to_vec(),
            )
            .map_err(lib)?,
            token_ids: std::slice::from_raw_parts(tokens, tokens_len).iter().map(|&t| t as usize).collect(),
            answer_id: 0,
            type_id: ImageType::Abdomen,
            kind: QuestionKind::Open,
            split: Split::Test,
        };
        let (a, t) = model.predict(store, &sample).map_err(lib)?;
        *answer = a as u32;
        *image_type = t as u32;
        Ok(())
    })
}

/// Writes the `[grid×grid×8]` spatial map.
///
/// # Safety
/// `out` must be valid for `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn cmsa_spatial_map(grid: usize, out: *mut f64, out_len: usize) -> CmsaStatus {
    guard(|| {
        let s = spatial_map(grid).map_err(lib)?;
        out_slice(out, out_len, s.numel(), "out")?.copy_from_slice(s.data());
        Ok(())
    })
}

/// Runs the finite-difference check described by a config file. Returns
/// `CheckFailed` if any parameter exceeds the tolerance.
///
/// # Safety
/// `config_path` must be a NUL-terminated string; `worst_rel_err` null or
/// valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cmsa_gradcheck(config_path: *const c_char, worst_rel_err: *mut f64) -> CmsaStatus {
    guard(|| {
        let cfg = RunConfig::load(&path_arg(config_path)?).map_err(lib)?;
        let report = harness::run_gradcheck(&cfg, None).map_err(lib)?;
        let worst = report.worst().map_or(0.0, |p| p.worst_rel_err);
        if !worst_rel_err.is_null() {
            *worst_rel_err = worst;
        }
        if report.passed() {
            Ok(())
        } else {
            let name = report.worst().map(|p| p.name.clone()).unwrap_or_default();
            Err(fail(CmsaStatus::CheckFailed, format!("gradient check failed at {name}: {worst:e}")))
        }
    })
}

/// A tensor bundle opened for reading.
pub struct CmsaBundle {
    bundle: TensorBundle,
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cmsa_bundle_read(path: *const c_char, out: *mut *mut CmsaBundle) -> CmsaStatus {
    guard(|| {
        let path = path_arg(path)?;
        nonnull(out, "out")?;
        let bundle = TensorBundle::read(&path).map_err(lib)?;
        *out = Box::into_raw(Box::new(CmsaBundle { bundle }));
        Ok(())
    })
}

/// # Safety
/// `bundle` must come from [`cmsa_bundle_read`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cmsa_bundle_free(bundle: *mut CmsaBundle) {
    if !bundle.is_null() {
        drop(Box::from_raw(bundle));
    }
}

/// Number of entries, or 0 for a null handle.
///
/// # Safety
/// `bundle` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cmsa_bundle_len(bundle: *const CmsaBundle) -> usize {
    if bundle.is_null() {
        0
    } else {
        (*bundle).bundle.len()
    }
}

/// Copies the NUL-terminated name of entry `index` into `buf`.
///
/// # Safety
/// `bundle` must be a live handle; `buf` valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn cmsa_bundle_entry_name(
    bundle: *const CmsaBundle,
    index: usize,
    buf: *mut c_char,
    len: usize,
) -> CmsaStatus {
    guard(|| {
        nonnull(bundle, "bundle")?;
        let entries = (*bundle).bundle.entries();
        let (name, _) = entries.get(index).ok_or_else(|| {
            fail(CmsaStatus::InvalidArgument, format!("entry {index} out of range ({})", entries.len()))
        })?;
        let out = out_slice(buf, len, name.len() + 1, "buf")?;
        for (o, b) in out.iter_mut().zip(name.bytes()) {
            *o = b as c_char;
        }
        out[name.len()] = 0;
        Ok(())
    })
}

unsafe fn bundle_tensor<'a>(bundle: *const CmsaBundle, name: *const c_char) -> Result<&'a Tensor, CmsaStatus> {
    nonnull(bundle, "bundle")?;
    nonnull(name, "name")?;
    let name = CStr::from_ptr(name)
        .to_str()
        .map_err(|_| fail(CmsaStatus::InvalidArgument, "name is not UTF-8"))?;
    match (*bundle).bundle.get(name) {
        Some(Entry::F64(t)) => Ok(t),
        Some(Entry::Bytes(_)) => Err(fail(CmsaStatus::InvalidArgument, format!("{name} is a byte entry"))),
        None => Err(fail(CmsaStatus::InvalidArgument, format!("no entry named {name}"))),
    }
}

/// Writes the rank of an f64 entry and up to `dims_len` of its extents.
///
/// # Safety
/// `bundle` live; `name` NUL-terminated; `dims` valid for `dims_len`;
/// `rank` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cmsa_bundle_tensor_shape(
    bundle: *const CmsaBundle,
    name: *const c_char,
    dims: *mut usize,
    dims_len: usize,
    rank: *mut usize,
) -> CmsaStatus {
    guard(|| {
        let t = bundle_tensor(bundle, name)?;
        nonnull(rank, "rank")?;
        *rank = t.rank();
        if t.rank() > 0 {
            out_slice(dims, dims_len, t.rank(), "dims")?.copy_from_slice(t.shape());
        }
        Ok(())
    })
}

/// Copies the values of an f64 entry.
///
/// # Safety
/// `bundle` live; `name` NUL-terminated; `out` valid for `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn cmsa_bundle_tensor_data(
    bundle: *const CmsaBundle,
    name: *const c_char,
    out: *mut f64,
    out_len: usize,
) -> CmsaStatus {
    guard(|| {
        let t = bundle_tensor(bundle, name)?;
        out_slice(out, out_len, t.numel(), "out")?.copy_from_slice(t.data());
        Ok(())
    })
}

/// Number of words a question is padded to by the synthetic corpus.
#[no_mangle]
pub extern "C" fn cmsa_question_len() -> usize {
    QUESTION_LEN
}
