//! C ABI over the `couplformer` crate.
//!
//! Tensors and models are opaque heap handles released with their `_free`
//! function. Every fallible call returns a [`CplStatus`]; on failure
//! [`cpl_last_error`] describes the most recent error on the calling thread.
//! Output handles are written only on success. Panics never cross the
//! boundary: they are reported as [`CplStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use couplformer::attention::{self, AttentionGeometry};
use couplformer::bench::{self, Mechanism};
use couplformer::model::{load_checkpoint, Model};
use couplformer::tensor::{read_tensor, write_tensor};
use couplformer::{Error, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CplStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    NonFinite = 4,
    Format = 5,
    Config = 6,
    Io = 7,
    Internal = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CplMechanism {
    Standard = 0,
    Coupled = 1,
}

/// Per-layer attention cost.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CplCost {
    pub score_elements: u64,
    pub flops_scores: u64,
    pub flops_apply: u64,
    pub params: u64,
}

/// Opaque `f64` tensor.
pub struct CplTensor(Tensor);

/// Opaque trained model.
pub struct CplModel(Model);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> CplStatus {
    match e {
        Error::Shape { .. } => CplStatus::Shape,
        Error::NonFinite(_) => CplStatus::NonFinite,
        Error::Invalid(_) => CplStatus::InvalidArgument,
        Error::Format(_) => CplStatus::Format,
        Error::Config(_) => CplStatus::Config,
        Error::Io(_) => CplStatus::Io,
        _ => CplStatus::Internal,
    }
}

struct Fail(CplStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(CplStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CplStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            CplStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("panic: {msg}"));
            CplStatus::Panic
        }
    }
}

unsafe fn tensor_ref<'a>(t: *const CplTensor, what: &str) -> Result<&'a Tensor, Fail> {
    t.as_ref().map(|t| &t.0).ok_or_else(|| null(what))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(CplStatus::InvalidArgument, "path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn emit<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message for the last failed call on this thread; empty after a success.
/// Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn cpl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cpl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies `len` values from `data` into a new tensor of the given shape.
///
/// # Safety
/// `shape` must point to `rank` readable values (or be null with rank 0),
/// `data` to `len` readable values, and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cpl_tensor_new(
    shape: *const usize,
    rank: usize,
    data: *const f64,
    len: usize,
    out: *mut *mut CplTensor,
) -> CplStatus {
    guard(|| {
        let shape = match (shape.is_null(), rank) {
            (_, 0) => Vec::new(),
            (true, _) => return Err(null("shape")),
            (false, r) => std::slice::from_raw_parts(shape, r).to_vec(),
        };
        let data = match (data.is_null(), len) {
            (_, 0) => Vec::new(),
            (true, _) => return Err(null("data")),
            (false, n) => std::slice::from_raw_parts(data, n).to_vec(),
        };
        emit(out, CplTensor(Tensor::new(shape, data)?))
    })
}

/// Releases a tensor. Null is a no-op.
///
/// # Safety
/// `t` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cpl_tensor_free(t: *mut CplTensor) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Number of axes, or 0 for a null handle.
///
/// # Safety
/// `t` must be null or a live tensor handle.
#[no_mangle]
pub unsafe extern "C" fn cpl_tensor_rank(t: *const CplTensor) -> usize {
    t.as_ref().map_or(0, |t| t.0.rank())
}

/// Number of elements, or 0 for a null handle.
///
/// # Safety
/// `t` must be null or a live tensor handle.
#[no_mangle]
pub unsafe extern "C" fn cpl_tensor_numel(t: *const CplTensor) -> usize {
    t.as_ref().map_or(0, |t| t.0.numel())
}

/// Writes the extents into `out`, which holds `cap` values.
///
/// # Safety
/// `t` must be a live tensor handle and `out` must hold `cap` writable values.
#[no_mangle]
pub unsafe extern "C" fn cpl_tensor_shape(t: *const CplTensor, out: *mut usize, cap: usize) -> CplStatus {
    guard(|| {
        let t = tensor_ref(t, "tensor")?;
        if t.rank() > cap {
            return Err(Fail(CplStatus::InvalidArgument, format!("rank {} exceeds buffer of {cap}", t.rank())));
        }
        if t.rank() > 0 {
            if out.is_null() {
                return Err(null("output buffer"));
            }
            std::slice::from_raw_parts_mut(out, t.rank()).copy_from_slice(t.shape());
        }
        Ok(())
    })
}

/// Row-major elements, borrowed for the lifetime of the handle. Null for a
/// null handle.
///
/// # Safety
/// `t` must be null or a live tensor handle.
#[no_mangle]
pub unsafe extern "C" fn cpl_tensor_data(t: *const CplTensor) -> *const f64 {
    t.as_ref().map_or(ptr::null(), |t| t.0.data().as_ptr())
}

/// Writes the tensor to `path` in the CPLT binary format.
///
/// # Safety
/// `t` must be a live tensor handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cpl_tensor_save(t: *const CplTensor, path: *const c_char) -> CplStatus {
    guard(|| {
        let t = tensor_ref(t, "tensor")?;
        let mut file = BufWriter::new(File::create(path_arg(path)?).map_err(Error::from)?);
        write_tensor(&mut file, t)?;
        file.flush().map_err(Error::from)?;
        Ok(())
    })
}

/// Reads a CPLT file into a new tensor.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cpl_tensor_load(path: *const c_char, out: *mut *mut CplTensor) -> CplStatus {
    guard(|| {
        let mut file = BufReader::new(File::open(path_arg(path)?).map_err(Error::from)?);
        emit(out, CplTensor(read_tensor(&mut file)?))
    })
}

unsafe fn binary(
    a: *const CplTensor,
    b: *const CplTensor,
    out: *mut *mut CplTensor,
    op: impl FnOnce(&Tensor, &Tensor) -> couplformer::Result<Tensor>,
) -> CplStatus {
    guard(|| {
        let r = op(tensor_ref(a, "a")?, tensor_ref(b, "b")?)?;
        emit(out, CplTensor(r))
    })
}

/// Kronecker product of two matrices.
///
/// # Safety
/// `a`, `b` must be live tensor handles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cpl_kron(a: *const CplTensor, b: *const CplTensor, out: *mut *mut CplTensor) -> CplStatus {
    binary(a, b, out, Tensor::kron)
}

/// Matrix product of two matrices.
///
/// # Safety
/// `a`, `b` must be live tensor handles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cpl_matmul(a: *const CplTensor, b: *const CplTensor, out: *mut *mut CplTensor) -> CplStatus {
    binary(a, b, out, Tensor::matmul)
}

/// Softmax over the last axis.
///
/// # Safety
/// `a` must be a live tensor handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cpl_softmax_rows(a: *const CplTensor, out: *mut *mut CplTensor) -> CplStatus {
    guard(|| emit(out, CplTensor(tensor_ref(a, "a")?.softmax_rows()?)))
}

/// `A·X·Bᵀ` for square `A` (h×h), `B` (w×w) and `X` (h×w): the action of
/// `A⊗B` on the row-major flattening of `X`.
///
/// # Safety
/// All handles must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cpl_kron_apply(
    a: *const CplTensor,
    b: *const CplTensor,
    x: *const CplTensor,
    out: *mut *mut CplTensor,
) -> CplStatus {
    guard(|| {
        let r = attention::lemma1_apply(tensor_ref(a, "a")?, tensor_ref(b, "b")?, tensor_ref(x, "x")?)?;
        emit(out, CplTensor(r))
    })
}

/// Coupled score matrices from queries and keys shaped `[heads, h, w, d_head]`:
/// the row scores `[heads, h, h]` and column scores `[heads, w, w]`.
///
/// # Safety
/// `q`, `k` must be live tensor handles; `out_rows` and `out_cols` writable.
#[no_mangle]
pub unsafe extern "C" fn cpl_coupling_scores(
    q: *const CplTensor,
    k: *const CplTensor,
    out_rows: *mut *mut CplTensor,
    out_cols: *mut *mut CplTensor,
) -> CplStatus {
    guard(|| {
        if out_rows.is_null() || out_cols.is_null() {
            return Err(null("output pointer"));
        }
        let (a, b) = attention::coupling_scores(tensor_ref(q, "q")?, tensor_ref(k, "k")?)?;
        emit(out_rows, CplTensor(a))?;
        emit(out_cols, CplTensor(b))
    })
}

/// Closed-form cost of one attention layer on an `h×w` token grid.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cpl_analytic_cost(
    mechanism: CplMechanism,
    h: usize,
    w: usize,
    d: usize,
    heads: usize,
    out: *mut CplCost,
) -> CplStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("output pointer"))?;
        let m = match mechanism {
            CplMechanism::Standard => Mechanism::Standard,
            CplMechanism::Coupled => Mechanism::Coupled,
        };
        let c = bench::analytic_cost(m, AttentionGeometry::new(h, w, d, heads)?);
        *out = CplCost {
            score_elements: c.score_elements,
            flops_scores: c.flops_scores,
            flops_apply: c.flops_apply,
            params: c.params,
        };
        Ok(())
    })
}

/// Loads a checkpoint directory written by `couplformer train`.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cpl_model_load(dir: *const c_char, out: *mut *mut CplModel) -> CplStatus {
    guard(|| {
        let (_, model) = load_checkpoint(&path_arg(dir)?)?;
        emit(out, CplModel(model))
    })
}

/// Writes the expected input shape `[channels, height, width]` to `out`.
///
/// # Safety
/// `model` must be a live model handle and `out` hold 3 writable values.
#[no_mangle]
pub unsafe extern "C" fn cpl_model_input_shape(model: *const CplModel, out: *mut usize) -> CplStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.0;
        if out.is_null() {
            return Err(null("output buffer"));
        }
        let c = m.config();
        std::slice::from_raw_parts_mut(out, 3).copy_from_slice(&[c.in_channels, c.img_h, c.img_w]);
        Ok(())
    })
}

/// Class logits for one `[channels, height, width]` image.
///
/// # Safety
/// `model` and `image` must be live handles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cpl_model_predict(
    model: *const CplModel,
    image: *const CplTensor,
    out: *mut *mut CplTensor,
) -> CplStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.0;
        emit(out, CplTensor(m.predict(tensor_ref(image, "image")?)?))
    })
}

/// Releases a model. Null is a no-op.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cpl_model_free(model: *mut CplModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
