//! C ABI over the diffaug core.
//!
//! Objects cross the boundary as opaque handles created by the constructor
//! functions and released with the matching `*_free`. Every fallible call
//! returns a [`DiffaugStatus`]; on failure the message is available from
//! [`diffaug_last_error`] on the same thread. Arrays are row-major `double`
//! buffers whose lengths the caller states explicitly.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use diffaug::analysis::verify_theorem1;
use diffaug::classifier::{ClassifierInput, ClassifierKind, NetClassifier};
use diffaug::diffusion::{denoise_batch, DiffusionSchedule};
use diffaug::evaluation::{auroc, certified_radius, clopper_pearson_lower, prdc};
use diffaug::gmm::{posterior_moments, GaussianMixture};
use diffaug::linalg::{Matrix, Vector};
use diffaug::nnet::Checkpoint;
use diffaug::score::AnalyticScore;
use diffaug::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiffaugStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Numerical = 3,
    Io = 4,
    Panic = 5,
}

/// Diffusion noise schedule.
pub struct DiffaugSchedule(DiffusionSchedule);

/// Gaussian-mixture data distribution.
pub struct DiffaugMixture(GaussianMixture);

/// Trained classifier loaded from a checkpoint.
pub struct DiffaugClassifier(NetClassifier);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> DiffaugStatus {
    if e.is_numerical() {
        DiffaugStatus::Numerical
    } else if matches!(e, Error::Io { .. }) {
        DiffaugStatus::Io
    } else {
        DiffaugStatus::InvalidArgument
    }
}

struct Fail(DiffaugStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

type FfiResult = Result<(), Fail>;

fn guard(f: impl FnOnce() -> FfiResult) -> DiffaugStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DiffaugStatus::Ok,
        Ok(Err(Fail(s, msg))) => {
            set_error(msg);
            s
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            DiffaugStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(DiffaugStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(DiffaugStatus::InvalidArgument, msg.into())
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn slice<'a>(p: *const f64, n: usize, what: &str) -> Result<&'a [f64], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn slice_mut<'a>(p: *mut f64, n: usize, what: &str) -> Result<&'a mut [f64], Fail> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

unsafe fn write<T>(p: *mut T, v: T, what: &str) -> FfiResult {
    if p.is_null() {
        return Err(null(what));
    }
    p.write(v);
    Ok(())
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not UTF-8")))
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn diffaug_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn diffaug_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[no_mangle]
pub unsafe extern "C" fn diffaug_schedule_ve(sigma_min: f64, sigma_max: f64, out: *mut *mut DiffaugSchedule) -> DiffaugStatus {
    guard(|| {
        let s = DiffusionSchedule::Ve { sigma_min, sigma_max };
        s.validate()?;
        write(out, boxed(DiffaugSchedule(s)), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn diffaug_schedule_vp(beta_min: f64, beta_max: f64, out: *mut *mut DiffaugSchedule) -> DiffaugStatus {
    guard(|| {
        let s = DiffusionSchedule::Vp { beta_min, beta_max };
        s.validate()?;
        write(out, boxed(DiffaugSchedule(s)), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn diffaug_schedule_free(s: *mut DiffaugSchedule) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

#[no_mangle]
pub unsafe extern "C" fn diffaug_schedule_sigma(s: *const DiffaugSchedule, t: f64, out: *mut f64) -> DiffaugStatus {
    guard(|| write(out, deref(s, "schedule")?.0.sigma(t)?, "out"))
}

#[no_mangle]
pub unsafe extern "C" fn diffaug_schedule_mean_coeff(s: *const DiffaugSchedule, t: f64, out: *mut f64) -> DiffaugStatus {
    guard(|| write(out, deref(s, "schedule")?.0.mean_coeff(t)?, "out"))
}

#[no_mangle]
pub unsafe extern "C" fn diffaug_mixture_canonical(out: *mut *mut DiffaugMixture) -> DiffaugStatus {
    guard(|| write(out, boxed(DiffaugMixture(GaussianMixture::canonical())), "out"))
}

/// Builds a mixture from fixture JSON text.
#[no_mangle]
pub unsafe extern "C" fn diffaug_mixture_from_json(json: *const c_char, out: *mut *mut DiffaugMixture) -> DiffaugStatus {
    guard(|| {
        let g = GaussianMixture::from_json(c_str(json, "json")?)?;
        write(out, boxed(DiffaugMixture(g)), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn diffaug_mixture_free(m: *mut DiffaugMixture) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

#[no_mangle]
pub unsafe extern "C" fn diffaug_mixture_dim(m: *const DiffaugMixture) -> usize {
    m.as_ref().map_or(0, |m| m.0.dim())
}

#[no_mangle]
pub unsafe extern "C" fn diffaug_mixture_num_classes(m: *const DiffaugMixture) -> usize {
    m.as_ref().map_or(0, |m| m.0.num_classes())
}

unsafe fn point<'a>(m: &DiffaugMixture, x: *const f64, dim: usize) -> Result<&'a [f64], Fail> {
    if dim != m.0.dim() {
        return Err(invalid(format!("dim {dim} does not match the mixture ({})", m.0.dim())));
    }
    slice(x, dim, "x")
}

/// Exact score `grad log p_t(x)` into `out[dim]`.
#[no_mangle]
pub unsafe extern "C" fn diffaug_score(
    m: *const DiffaugMixture,
    s: *const DiffaugSchedule,
    x: *const f64,
    dim: usize,
    t: f64,
    out: *mut f64,
) -> DiffaugStatus {
    guard(|| {
        let (m, s) = (deref(m, "mixture")?, deref(s, "schedule")?);
        let x = point(m, x, dim)?;
        let out = slice_mut(out, dim, "out")?;
        out.copy_from_slice(m.0.at_time(&s.0, t)?.score(x).as_slice());
        Ok(())
    })
}

/// Posterior mean `E[m_t | x]` into `mean[dim]` and, when non-null, the
/// covariance into `cov[dim * dim]`.
#[no_mangle]
pub unsafe extern "C" fn diffaug_posterior(
    m: *const DiffaugMixture,
    s: *const DiffaugSchedule,
    x: *const f64,
    dim: usize,
    t: f64,
    mean: *mut f64,
    cov: *mut f64,
) -> DiffaugStatus {
    guard(|| {
        let (m, s) = (deref(m, "mixture")?, deref(s, "schedule")?);
        let x = Vector::from_column_slice(point(m, x, dim)?);
        let pm = posterior_moments(&m.0, &s.0, &x, t)?;
        slice_mut(mean, dim, "mean")?.copy_from_slice(pm.mean.as_slice());
        if !cov.is_null() {
            let c = slice_mut(cov, dim * dim, "cov")?;
            for i in 0..dim {
                for j in 0..dim {
                    c[i * dim + j] = pm.covariance[(i, j)];
                }
            }
        }
        Ok(())
    })
}

/// One-step denoising with the exact score. `x_hat[dim]` is on the mean
/// scale; `x0_scale[dim]` (optional) divides by the mean coefficient.
#[no_mangle]
pub unsafe extern "C" fn diffaug_denoise(
    m: *const DiffaugMixture,
    s: *const DiffaugSchedule,
    x: *const f64,
    dim: usize,
    t: f64,
    x_hat: *mut f64,
    x0_scale: *mut f64,
) -> DiffaugStatus {
    guard(|| {
        let (m, s) = (deref(m, "mixture")?, deref(s, "schedule")?);
        let x = Matrix::from_row_slice(1, dim, point(m, x, dim)?);
        let score = AnalyticScore::new(m.0.clone(), s.0);
        let b = denoise_batch(&s.0, &score, &x, &[t])?;
        slice_mut(x_hat, dim, "x_hat")?.copy_from_slice(b.x_hat.row(0).transpose().as_slice());
        if !x0_scale.is_null() {
            slice_mut(x0_scale, dim, "x0_scale")?.copy_from_slice(b.x0_scale.row(0).transpose().as_slice());
        }
        Ok(())
    })
}

/// Largest entrywise gap between the finite-difference denoiser Jacobian
/// and `Cov[m_t | x] / sigma^2(t)` at one point.
#[no_mangle]
pub unsafe extern "C" fn diffaug_theorem1_max_diff(
    m: *const DiffaugMixture,
    s: *const DiffaugSchedule,
    x: *const f64,
    dim: usize,
    t: f64,
    out: *mut f64,
) -> DiffaugStatus {
    guard(|| {
        let (m, s) = (deref(m, "mixture")?, deref(s, "schedule")?);
        let x = Vector::from_column_slice(point(m, x, dim)?);
        let score = AnalyticScore::new(m.0.clone(), s.0);
        let r = verify_theorem1(&m.0, &s.0, &score, &[(x, t)])?;
        write(out, r[0].max_abs_diff, "out")
    })
}

/// Bayes label of `x` at time `t`; the class posterior goes to
/// `posterior[num_classes]` when non-null.
#[no_mangle]
pub unsafe extern "C" fn diffaug_bayes(
    m: *const DiffaugMixture,
    s: *const DiffaugSchedule,
    x: *const f64,
    dim: usize,
    t: f64,
    label: *mut usize,
    posterior: *mut f64,
) -> DiffaugStatus {
    guard(|| {
        let (m, s) = (deref(m, "mixture")?, deref(s, "schedule")?);
        let x = point(m, x, dim)?;
        let b = m.0.at_time(&s.0, t)?.bayes(x);
        if !posterior.is_null() {
            slice_mut(posterior, b.posterior.len(), "posterior")?.copy_from_slice(&b.posterior);
        }
        write(label, b.label, "label")
    })
}

/// AUROC with the first list as positives, plus FPR at 95% TPR.
#[no_mangle]
pub unsafe extern "C" fn diffaug_auroc(
    in_scores: *const f64,
    n_in: usize,
    out_scores: *const f64,
    n_out: usize,
    auroc_out: *mut f64,
    fpr95_out: *mut f64,
) -> DiffaugStatus {
    guard(|| {
        let r = auroc(slice(in_scores, n_in, "in_scores")?, slice(out_scores, n_out, "out_scores")?)?;
        write(auroc_out, r.auroc, "auroc_out")?;
        if !fpr95_out.is_null() {
            write(fpr95_out, r.fpr_at_95_tpr, "fpr95_out")?;
        }
        Ok(())
    })
}

/// Precision, recall, density, coverage into `out[4]`.
#[no_mangle]
pub unsafe extern "C" fn diffaug_prdc(
    real: *const f64,
    n_real: usize,
    generated: *const f64,
    n_gen: usize,
    dim: usize,
    k: usize,
    out: *mut f64,
) -> DiffaugStatus {
    guard(|| {
        if dim == 0 {
            return Err(invalid("dim must be >= 1"));
        }
        let r = Matrix::from_row_slice(n_real, dim, slice(real, n_real * dim, "real")?);
        let g = Matrix::from_row_slice(n_gen, dim, slice(generated, n_gen * dim, "generated")?);
        let p = prdc(&r, &g, k)?;
        slice_mut(out, 4, "out")?.copy_from_slice(&p.as_array());
        Ok(())
    })
}

/// Clopper-Pearson lower confidence bound for `k` successes in `n`.
#[no_mangle]
pub unsafe extern "C" fn diffaug_clopper_pearson_lower(k: usize, n: usize, alpha: f64, out: *mut f64) -> DiffaugStatus {
    guard(|| {
        if n == 0 || k > n || !(alpha > 0.0 && alpha < 1.0) {
            return Err(invalid("need 0 <= k <= n, n >= 1 and 0 < alpha < 1"));
        }
        write(out, clopper_pearson_lower(k, n, alpha), "out")
    })
}

/// Certified radius `sigma * Phi^-1(p_lower)`. `certified` is set to 0 and
/// the radius to 0 when `p_lower <= 1/2` (abstain).
#[no_mangle]
pub unsafe extern "C" fn diffaug_certified_radius(
    sigma: f64,
    p_lower: f64,
    radius: *mut f64,
    certified: *mut i32,
) -> DiffaugStatus {
    guard(|| {
        if !(sigma > 0.0) || !(0.0..=1.0).contains(&p_lower) {
            return Err(invalid("need sigma > 0 and p_lower in [0, 1]"));
        }
        let r = certified_radius(sigma, p_lower);
        write(radius, r.unwrap_or(0.0), "radius")?;
        write(certified, r.is_some() as i32, "certified")
    })
}

/// Loads a plain classifier checkpoint written by `train-classifier`.
#[no_mangle]
pub unsafe extern "C" fn diffaug_classifier_load(path: *const c_char, out: *mut *mut DiffaugClassifier) -> DiffaugStatus {
    guard(|| {
        let p = c_str(path, "path")?;
        let clf = NetClassifier::from_checkpoint(&Checkpoint::load(Path::new(p))?)?;
        if clf.kind() != ClassifierKind::Plain {
            return Err(invalid(format!("{p}: only plain classifiers are exposed")));
        }
        write(out, boxed(DiffaugClassifier(clf)), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn diffaug_classifier_free(c: *mut DiffaugClassifier) {
    if !c.is_null() {
        drop(Box::from_raw(c));
    }
}

#[no_mangle]
pub unsafe extern "C" fn diffaug_classifier_num_classes(c: *const DiffaugClassifier) -> usize {
    c.as_ref().map_or(0, |c| c.0.classes())
}

/// Class probabilities of `n` points `x[n * dim]` into `out[n * classes]`.
#[no_mangle]
pub unsafe extern "C" fn diffaug_classifier_probs(
    c: *const DiffaugClassifier,
    x: *const f64,
    n: usize,
    dim: usize,
    out: *mut f64,
) -> DiffaugStatus {
    guard(|| {
        let c = deref(c, "classifier")?;
        if dim != c.0.dim() {
            return Err(invalid(format!("dim {dim} does not match the classifier ({})", c.0.dim())));
        }
        let x = Matrix::from_row_slice(n, dim, slice(x, n * dim, "x")?);
        let p = c.0.probs_for(&ClassifierInput::plain(&x))?;
        let k = p.ncols();
        let o = slice_mut(out, n * k, "out")?;
        for i in 0..n {
            for j in 0..k {
                o[i * k + j] = p[(i, j)];
            }
        }
        Ok(())
    })
}
