//! C ABI for the gradleak engine.
//!
//! Objects cross the boundary as opaque pointers created by `gl_*_new`-style
//! functions and released with the matching `gl_*_free`. Every fallible
//! function returns a [`GlStatus`]; on failure [`gl_last_error`] holds a
//! message for the calling thread. Panics never unwind into C.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use gradleak::attack::{self, Extraction};
use gradleak::experiment::{self, Command, ExperimentConfig};
use gradleak::init::{init_random, init_trap_layer, RandomScheme, TrapConfig};
use gradleak::nn::{self, Dense, Layer, Model, ModelGradients, Task};
use gradleak::{defense, rng, Error, Tensor};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GlStatus {
    Ok = 0,
    NullPointer = 1,
    Dimension = 2,
    Input = 3,
    State = 4,
    Config = 5,
    Format = 6,
    Io = 7,
    Json = 8,
    Csv = 9,
    Utf8 = 10,
    Panic = 11,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GlScheme {
    Gaussian = 0,
    XavierNormal = 1,
    XavierUniform = 2,
}

/// Extraction metrics.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GlMetrics {
    pub a: f64,
    pub p: f64,
    pub r: f64,
    pub n: usize,
    pub b: usize,
    pub active: usize,
    pub g0: usize,
    pub b0: usize,
}

/// Opaque model handle.
pub struct GlModel(Model);
/// Opaque gradient handle.
pub struct GlGradients(ModelGradients);
/// Opaque extraction handle.
pub struct GlExtraction(Extraction);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> GlStatus {
    match e {
        Error::Dimension(_) => GlStatus::Dimension,
        Error::Input(_) => GlStatus::Input,
        Error::State(_) => GlStatus::State,
        Error::Config(_) => GlStatus::Config,
        Error::Format(_) => GlStatus::Format,
        Error::Io(_) => GlStatus::Io,
        Error::Json(_) => GlStatus::Json,
        Error::Csv(_) => GlStatus::Csv,
    }
}

struct Fail(GlStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(GlStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> GlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            GlStatus::Ok
        }
        Ok(Err(Fail(s, m))) => {
            set_error(m);
            s
        }
        Err(_) => {
            set_error("panic inside gradleak".into());
            GlStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(GlStatus::Utf8, format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn put<T>(out: *mut *mut T, v: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = Box::into_raw(Box::new(v));
    Ok(())
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn gl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// `inputs → hidden → ReLU → classes` multiclass model, all weights zero.
#[no_mangle]
pub unsafe extern "C" fn gl_model_mlp(inputs: usize, hidden: usize, classes: usize, out: *mut *mut GlModel) -> GlStatus {
    guard(|| {
        let m = Model::new(
            vec![inputs],
            vec![
                Layer::Dense(Dense::new(inputs, hidden)),
                Layer::Relu,
                Layer::Dense(Dense::new(hidden, classes)),
            ],
            Task::Multiclass,
        )?;
        put(out, GlModel(m))
    })
}

/// Model from its JSON serialization.
#[no_mangle]
pub unsafe extern "C" fn gl_model_from_json(json: *const c_char, out: *mut *mut GlModel) -> GlStatus {
    guard(|| {
        let m: Model = serde_json::from_str(str_arg(json, "json")?).map_err(Error::from)?;
        m.validate()?;
        put(out, GlModel(m))
    })
}

#[no_mangle]
pub unsafe extern "C" fn gl_model_free(model: *mut GlModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

#[no_mangle]
pub unsafe extern "C" fn gl_model_input_len(model: *const GlModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.input_len())
}

#[no_mangle]
pub unsafe extern "C" fn gl_model_output_dim(model: *const GlModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.output_dim())
}

/// `sigma` is used by the Gaussian scheme only.
#[no_mangle]
pub unsafe extern "C" fn gl_model_init_random(model: *mut GlModel, scheme: GlScheme, sigma: f64, seed: u64) -> GlStatus {
    guard(|| {
        let m = model.as_mut().ok_or_else(|| null("model"))?;
        let s = match scheme {
            GlScheme::Gaussian => RandomScheme::Gaussian { sigma },
            GlScheme::XavierNormal => RandomScheme::XavierNormal,
            GlScheme::XavierUniform => RandomScheme::XavierUniform,
        };
        Ok(init_random(&mut m.0, s, &mut rng::stream(seed, rng::streams::INIT))?)
    })
}

/// Trap weights on dense layer `layer` with scale `s`.
#[no_mangle]
pub unsafe extern "C" fn gl_model_init_trap(model: *mut GlModel, layer: usize, s: f64, seed: u64) -> GlStatus {
    guard(|| {
        let m = model.as_mut().ok_or_else(|| null("model"))?;
        let cfg = TrapConfig::new(s, seed);
        Ok(init_trap_layer(&mut m.0, layer, &cfg, &mut rng::stream(seed, rng::streams::TRAP))?)
    })
}

/// Batch gradient for `batch` row-major examples and their labels.
#[no_mangle]
pub unsafe extern "C" fn gl_gradients_compute(
    model: *const GlModel,
    x: *const f64,
    batch: usize,
    labels: *const f64,
    out: *mut *mut GlGradients,
) -> GlStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.0;
        let xs = slice_arg(x, batch * m.input_len(), "x")?;
        let ys = slice_arg(labels, batch, "labels")?;
        let xt = Tensor::new(vec![batch, m.input_len()], xs.to_vec())?;
        let yt = Tensor::new(vec![batch], ys.to_vec())?;
        put(out, GlGradients(nn::gradients(m, &xt, &yt)?))
    })
}

#[no_mangle]
pub unsafe extern "C" fn gl_gradients_free(grads: *mut GlGradients) {
    if !grads.is_null() {
        drop(Box::from_raw(grads));
    }
}

#[no_mangle]
pub unsafe extern "C" fn gl_gradients_norm(grads: *const GlGradients) -> f64 {
    grads.as_ref().map_or(f64::NAN, |g| g.0.norm())
}

/// Scales the update to global L2 norm at most `c`.
#[no_mangle]
pub unsafe extern "C" fn gl_gradients_clip(grads: *mut GlGradients, c: f64) -> GlStatus {
    guard(|| {
        let g = grads.as_mut().ok_or_else(|| null("gradients"))?;
        Ok(defense::clip_in_place(&mut g.0, c)?)
    })
}

/// Candidates from dense layer `layer` (no input forwarding).
#[no_mangle]
pub unsafe extern "C" fn gl_extract(
    model: *const GlModel,
    grads: *const GlGradients,
    layer: usize,
    eps_active: f64,
    out: *mut *mut GlExtraction,
) -> GlStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.0;
        let g = &grads.as_ref().ok_or_else(|| null("gradients"))?.0;
        put(out, GlExtraction(attack::extract_from_model(m, g, layer, None, eps_active)?))
    })
}

#[no_mangle]
pub unsafe extern "C" fn gl_extraction_free(ex: *mut GlExtraction) {
    if !ex.is_null() {
        drop(Box::from_raw(ex));
    }
}

#[no_mangle]
pub unsafe extern "C" fn gl_extraction_count(ex: *const GlExtraction) -> usize {
    ex.as_ref().map_or(0, |e| e.0.active())
}

/// Copies candidate `index` into `out` (`len` values) and its row to `row`.
#[no_mangle]
pub unsafe extern "C" fn gl_extraction_candidate(
    ex: *const GlExtraction,
    index: usize,
    out: *mut f64,
    len: usize,
    row: *mut usize,
) -> GlStatus {
    guard(|| {
        let e = &ex.as_ref().ok_or_else(|| null("extraction"))?.0;
        let c = e
            .candidates
            .get(index)
            .ok_or_else(|| Fail(GlStatus::Input, format!("candidate {index} of {}", e.active())))?;
        if len != c.x.len() {
            return Err(Fail(GlStatus::Dimension, format!("buffer of {len} for {} values", c.x.len())));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(c.x.data());
        if !row.is_null() {
            *row = c.row;
        }
        Ok(())
    })
}

/// Scores candidates against `batch` row-major examples of `width` values.
#[no_mangle]
pub unsafe extern "C" fn gl_score(
    ex: *const GlExtraction,
    truth: *const f64,
    batch: usize,
    width: usize,
    tol_rel: f64,
    out: *mut GlMetrics,
) -> GlStatus {
    guard(|| {
        let e = &ex.as_ref().ok_or_else(|| null("extraction"))?.0;
        let t = Tensor::new(vec![batch, width], slice_arg(truth, batch * width, "truth")?.to_vec())?;
        let m = attack::score(e, &t, tol_rel)?.metrics;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = GlMetrics {
            a: m.a,
            p: m.p,
            r: m.r,
            n: m.n,
            b: m.b,
            active: m.active,
            g0: m.g0,
            b0: m.b0,
        };
        Ok(())
    })
}

/// Runs an experiment subcommand (`"active"`, `"sweep_s"`, ...) with a JSON
/// config (may be `"{}"`); outputs go to the config's `out` directory.
#[no_mangle]
pub unsafe extern "C" fn gl_run_experiment(command: *const c_char, config_json: *const c_char) -> GlStatus {
    guard(|| {
        let name = str_arg(command, "command")?;
        let cmd: Command = serde_json::from_value(serde_json::Value::String(name.into()))
            .map_err(|_| Fail(GlStatus::Config, format!("unknown command {name:?}")))?;
        let cfg = ExperimentConfig::from_json(cmd, str_arg(config_json, "config")?)?;
        experiment::run(&cfg)?;
        Ok(())
    })
}
