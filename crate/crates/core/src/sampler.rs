//! Reverse-time generation under the mixture marginal.

use ndarray::Zip;
use rand::Rng;

use crate::error::{Error, Result};
use crate::field::{ensure_same_shape, shape3, standard_normal, Field};
use crate::forward::truncated_init_unchecked;
use crate::mixfield::MixField;
use crate::predictors::Predictor;
use crate::schedules::{make_spaced_grid, NoiseSchedule};

pub const DEFAULT_QUADRATURE: usize = 8;

/// `Upsilon_t = sqrt(abar_t) (1 - Lambda_t)` and `lambda_t = sigma_t / Upsilon_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Reparam {
    pub upsilon: Field,
    pub lambda: Field,
}

/// Schedule and mixing values at a possibly fractional step index.
#[derive(Debug, Clone)]
pub(crate) struct Coeffs {
    pub(crate) sqrt_alpha_bar: f64,
    pub(crate) sigma: f64,
    pub(crate) mix: Field,
}

impl Coeffs {
    pub(crate) fn at(schedule: &NoiseSchedule, field: &MixField, u: f64) -> Self {
        if u.fract() == 0.0 {
            let t = u as usize;
            Self {
                sqrt_alpha_bar: schedule.sqrt_alpha_bar(t),
                sigma: schedule.sigma(t),
                mix: field.at(t).clone(),
            }
        } else {
            Self {
                sqrt_alpha_bar: schedule.alpha_bar_at(u).sqrt(),
                sigma: schedule.sigma_at(u),
                mix: field.at_fractional(u),
            }
        }
    }

    fn reparam(&self, t: usize) -> Result<Reparam> {
        if self.mix.iter().any(|&l| l >= 1.0) {
            return Err(Error::Singularity { t });
        }
        let upsilon = self.mix.mapv(|l| self.sqrt_alpha_bar * (1.0 - l));
        let lambda = upsilon.mapv(|u| self.sigma / u);
        Ok(Reparam { upsilon, lambda })
    }
}

fn check_field(schedule: &NoiseSchedule, field: &MixField) -> Result<()> {
    if field.steps() != schedule.steps() {
        return Err(Error::dims(&[schedule.steps()], &[field.steps()]));
    }
    Ok(())
}

fn check_index(schedule: &NoiseSchedule, t: usize) -> Result<()> {
    if t > schedule.steps() {
        return Err(Error::StepOutOfRange {
            t,
            max: schedule.steps(),
        });
    }
    Ok(())
}

/// Per-cell `Upsilon_t` and `lambda_t`. Fails where `Lambda_t = 1`.
pub fn reparam(schedule: &NoiseSchedule, field: &MixField, t: usize) -> Result<Reparam> {
    check_field(schedule, field)?;
    check_index(schedule, t)?;
    Coeffs::at(schedule, field, t as f64).reparam(t)
}

fn data_mixture(lambda: &Field, x_src: &Field, pred_x0: &Field) -> Field {
    let mut d = pred_x0.clone();
    Zip::from(&mut d)
        .and(lambda)
        .and(x_src)
        .for_each(|d, &l, &s| *d = l * s + (1.0 - l) * *d);
    d
}

fn check_shapes(x_t: &Field, other: &[&Field]) -> Result<()> {
    for f in other {
        ensure_same_shape(x_t, f)?;
    }
    Ok(())
}

/// `-(x_t - sqrt(abar_t) d_t) / sigma_t^2` with `d_t` built from `pred_x0`.
pub fn score_from_data_pred(
    x_t: &Field,
    pred_x0: &Field,
    lambda: &Field,
    x_src: &Field,
    schedule: &NoiseSchedule,
    t: usize,
) -> Result<Field> {
    check_index(schedule, t)?;
    check_shapes(x_t, &[pred_x0, lambda, x_src])?;
    let sigma = schedule.sigma(t);
    if sigma <= 0.0 {
        return Err(Error::UndefinedScore { t });
    }
    let d = data_mixture(lambda, x_src, pred_x0);
    let sab = schedule.sqrt_alpha_bar(t);
    Ok((x_t - &(d * sab)) / -(sigma * sigma))
}

/// Invert the noise prediction to a target-domain data prediction.
pub fn eps_to_x0(
    x_t: &Field,
    eps_pred: &Field,
    lambda: &Field,
    x_src: &Field,
    schedule: &NoiseSchedule,
    t: usize,
) -> Result<Field> {
    check_index(schedule, t)?;
    check_shapes(x_t, &[eps_pred, lambda, x_src])?;
    if lambda.iter().any(|&l| l >= 1.0) {
        return Err(Error::Singularity { t });
    }
    let sab = schedule.sqrt_alpha_bar(t);
    let sigma = schedule.sigma(t);
    let mut out = x_t.clone();
    Zip::from(&mut out)
        .and(eps_pred)
        .and(lambda)
        .and(x_src)
        .for_each(|o, &e, &l, &s| {
            let d = (*o - sigma * e) / sab;
            *o = (d - l * s) / (1.0 - l);
        });
    Ok(out)
}

/// Noise implied by a data prediction: `(x_t - sqrt(abar_t) d_t) / sigma_t`.
pub fn x0_to_eps(
    x_t: &Field,
    pred_x0: &Field,
    lambda: &Field,
    x_src: &Field,
    schedule: &NoiseSchedule,
    t: usize,
) -> Result<Field> {
    check_index(schedule, t)?;
    check_shapes(x_t, &[pred_x0, lambda, x_src])?;
    let sigma = schedule.sigma(t);
    if sigma <= 0.0 {
        return Err(Error::UndefinedScore { t });
    }
    let d = data_mixture(lambda, x_src, pred_x0);
    Ok((x_t - &(d * schedule.sqrt_alpha_bar(t))) / sigma)
}

/// Coefficients of the affine update `x_t = a x_s + b x_src + Upsilon_t w Phi + n z`
/// for one cell.
#[derive(Debug, Clone, Copy)]
struct StepCoeffs {
    a: f64,
    b: f64,
    /// `1 - lambda_t^2 / lambda_s^2`, the weight of a constant prediction.
    w: f64,
    noise: f64,
}

fn step_coeffs(ups_s: f64, lam_s: f64, mix_s: f64, ups_t: f64, lam_t: f64, mix_t: f64) -> StepCoeffs {
    let r = (lam_t * lam_t) / (lam_s * lam_s);
    StepCoeffs {
        a: ups_t * r / ups_s,
        b: ups_t * (mix_t / (1.0 - mix_t) - mix_s / (1.0 - mix_s) * r),
        w: 1.0 - r,
        noise: ups_t * (lam_t * lam_t * (1.0 - r)).max(0.0).sqrt(),
    }
}

struct StepSetup {
    s: Reparam,
    mix_s: Field,
    t: Reparam,
    mix_t: Field,
}

fn setup(schedule: &NoiseSchedule, field: &MixField, x_s: &Field, x_src: &Field, s: usize, t: usize) -> Result<StepSetup> {
    check_field(schedule, field)?;
    check_index(schedule, s)?;
    if t > s {
        return Err(Error::param("t", format!("target step {t} exceeds start step {s}")));
    }
    ensure_same_shape(field.at(0), x_s)?;
    ensure_same_shape(field.at(0), x_src)?;
    let cs = Coeffs::at(schedule, field, s as f64);
    let ct = Coeffs::at(schedule, field, t as f64);
    Ok(StepSetup {
        s: cs.reparam(s)?,
        t: ct.reparam(t)?,
        mix_s: cs.mix,
        mix_t: ct.mix,
    })
}

/// Combine transport, domain drift, prediction and noise terms in place.
fn combine<R: Rng + ?Sized>(
    st: &StepSetup,
    x_s: &Field,
    x_src: &Field,
    prediction_term: impl Fn(usize, f64) -> f64,
    stochastic: bool,
    rng: &mut R,
) -> Field {
    let z = if stochastic {
        Some(standard_normal(shape3(x_s), rng))
    } else {
        None
    };
    let xs = x_s.as_slice().expect("standard layout");
    let src = x_src.as_slice().expect("standard layout");
    let us = st.s.upsilon.as_slice().expect("standard layout");
    let ls = st.s.lambda.as_slice().expect("standard layout");
    let ms = st.mix_s.as_slice().expect("standard layout");
    let ut = st.t.upsilon.as_slice().expect("standard layout");
    let lt = st.t.lambda.as_slice().expect("standard layout");
    let mt = st.mix_t.as_slice().expect("standard layout");
    let out: Vec<f64> = (0..xs.len())
        .map(|i| {
            let k = step_coeffs(us[i], ls[i], ms[i], ut[i], lt[i], mt[i]);
            let mut v = k.a * xs[i] + k.b * src[i] + ut[i] * prediction_term(i, k.w);
            if let Some(z) = &z {
                v += k.noise * z.as_slice().expect("standard layout")[i];
            }
            v
        })
        .collect();
    Field::from_shape_vec(shape3(x_s), out).expect("same size")
}

/// One first-order step from `s` down to `t`, freezing the prediction at `s`.
#[allow(clippy::too_many_arguments)]
pub fn first_order_step<P: Predictor + ?Sized, R: Rng + ?Sized>(
    x_s: &Field,
    s: usize,
    t: usize,
    predictor: &P,
    x_src: &Field,
    field: &MixField,
    schedule: &NoiseSchedule,
    rng: &mut R,
    stochastic: bool,
) -> Result<Field> {
    let st = setup(schedule, field, x_s, x_src, s, t)?;
    if s == t {
        return Ok(x_s.clone());
    }
    let phi = predictor.predict(x_s, x_src, s as f64)?;
    ensure_same_shape(x_s, &phi)?;
    let phi = phi.as_slice().expect("standard layout").to_vec();
    Ok(combine(&st, x_s, x_src, |i, w| w * phi[i], stochastic, rng))
}

/// One step of the variation-of-constants solution with the prediction
/// integral resolved by `quadrature_n` panels.
///
/// Panels are uniform in step index between `t` and `s`; each panel's weight
/// is the exact integral of `2 lambda_t^2 / lambda^3` over that panel's
/// per-cell lambda range and the predictor is evaluated at the panel midpoint
/// with the state frozen at `x_s`. The integral is accumulated as
/// `(1 - r) Phi_s + sum_j w_j (Phi_j - Phi_s)`, so a prediction that does not
/// vary along the step reproduces [`first_order_step`] exactly.
#[allow(clippy::too_many_arguments)]
pub fn exact_reverse_step<P: Predictor + ?Sized, R: Rng + ?Sized>(
    x_s: &Field,
    s: usize,
    t: usize,
    predictor: &P,
    x_src: &Field,
    field: &MixField,
    schedule: &NoiseSchedule,
    rng: &mut R,
    stochastic: bool,
    quadrature_n: usize,
) -> Result<Field> {
    if quadrature_n == 0 {
        return Err(Error::param("quadrature_n", "need at least one panel"));
    }
    let st = setup(schedule, field, x_s, x_src, s, t)?;
    if s == t {
        return Ok(x_s.clone());
    }
    let phi_s = predictor.predict(x_s, x_src, s as f64)?;
    ensure_same_shape(x_s, &phi_s)?;
    let phi_s = phi_s.as_slice().expect("standard layout").to_vec();
    let n_cells = phi_s.len();
    let lam_t = st.t.lambda.as_slice().expect("standard layout");

    // Panel boundaries from t (j = 0) up to s (j = quadrature_n).
    let span = (s - t) as f64;
    let boundary_lambda = |j: usize| -> Result<Field> {
        if j == 0 {
            return Ok(st.t.lambda.clone());
        }
        if j == quadrature_n {
            return Ok(st.s.lambda.clone());
        }
        let u = t as f64 + span * j as f64 / quadrature_n as f64;
        Ok(Coeffs::at(schedule, field, u).reparam(t)?.lambda)
    };
    let inv_sq = |l: f64| if l > 0.0 { 1.0 / (l * l) } else { f64::INFINITY };

    let mut correction = vec![0.0; n_cells];
    let mut lower = boundary_lambda(0)?;
    for j in 0..quadrature_n {
        let upper = boundary_lambda(j + 1)?;
        let mid = t as f64 + span * (j as f64 + 0.5) / quadrature_n as f64;
        let phi_j = predictor.predict(x_s, x_src, mid)?;
        ensure_same_shape(x_s, &phi_j)?;
        let phi_j = phi_j.as_slice().expect("standard layout");
        let lo = lower.as_slice().expect("standard layout");
        let hi = upper.as_slice().expect("standard layout");
        for i in 0..n_cells {
            let diff = phi_j[i] - phi_s[i];
            if diff == 0.0 {
                continue;
            }
            // lambda_t^2 (1/lo^2 - 1/hi^2); the lower panel at t = 0 has weight
            // that collapses to 1 - lambda_0^2/hi^2 = 1 as lambda_0 -> 0.
            let w = if lam_t[i] == 0.0 {
                if j == 0 {
                    1.0
                } else {
                    0.0
                }
            } else {
                lam_t[i] * lam_t[i] * (inv_sq(lo[i]) - inv_sq(hi[i]))
            };
            correction[i] += w * diff;
        }
        lower = upper;
    }
    Ok(combine(
        &st,
        x_s,
        x_src,
        |i, w| w * phi_s[i] + correction[i],
        stochastic,
        rng,
    ))
}

/// Where the reverse chain starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitMode {
    /// `x_{t1} ~ N(sqrt(abar_{t1}) x_src, sigma_{t1}^2 I)`.
    #[default]
    Truncated,
    /// `x_{t1} = Upsilon_{t1} x_src + sigma_{t1} z`, kept for comparison.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StepMethod {
    #[default]
    FirstOrder,
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplerConfig {
    pub n: usize,
    pub t1: usize,
    pub stochastic: bool,
    pub quadrature_n: usize,
    pub init: InitMode,
    pub method: StepMethod,
}

impl SamplerConfig {
    pub fn new(n: usize, t1: usize) -> Self {
        Self {
            n,
            t1,
            stochastic: true,
            quadrature_n: DEFAULT_QUADRATURE,
            init: InitMode::Truncated,
            method: StepMethod::FirstOrder,
        }
    }

    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.n < 1 {
            return Err(Error::param("N", "need at least one step"));
        }
        if self.t1 < 1 || self.t1 >= schedule.steps() {
            return Err(Error::param("t1", format!("{} not in 1..{}", self.t1, schedule.steps())));
        }
        if self.quadrature_n < 1 {
            return Err(Error::param("quadrature_n", "need at least one panel"));
        }
        Ok(())
    }
}

/// Run the reverse chain from `t1` to 0 and clip the result to `[-1, 1]`.
pub fn sample<P: Predictor + ?Sized, R: Rng + ?Sized>(
    predictor: &P,
    x_src: &Field,
    cfg: &SamplerConfig,
    field: &MixField,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Field> {
    sample_with_observer(predictor, x_src, cfg, field, schedule, rng, |_, _| {})
}

/// As [`sample`], calling `observer(t, x_t)` on the initial state and after
/// every step (before clipping).
pub fn sample_with_observer<P: Predictor + ?Sized, R: Rng + ?Sized>(
    predictor: &P,
    x_src: &Field,
    cfg: &SamplerConfig,
    field: &MixField,
    schedule: &NoiseSchedule,
    rng: &mut R,
    mut observer: impl FnMut(usize, &Field),
) -> Result<Field> {
    cfg.validate(schedule)?;
    check_field(schedule, field)?;
    ensure_same_shape(field.at(0), x_src)?;
    if field.horizon() > cfg.t1 {
        return Err(Error::param(
            "t1",
            format!(
                "mixing field is not saturated after t1 = {} (horizon {}); build it with horizon t1",
                cfg.t1,
                field.horizon()
            ),
        ));
    }
    let grid = make_spaced_grid(schedule, cfg.n, cfg.t1)?;
    let mut x = match cfg.init {
        InitMode::Truncated => truncated_init_unchecked(schedule, x_src, cfg.t1, rng),
        InitMode::Literal => {
            let rp = reparam(schedule, field, cfg.t1)?;
            let z = standard_normal(shape3(x_src), rng);
            &rp.upsilon * x_src + z * schedule.sigma(cfg.t1)
        }
    };
    observer(cfg.t1, &x);
    for (s, t) in grid.steps() {
        x = match cfg.method {
            StepMethod::FirstOrder => {
                first_order_step(&x, s, t, predictor, x_src, field, schedule, rng, cfg.stochastic)?
            }
            StepMethod::Exact => exact_reverse_step(
                &x,
                s,
                t,
                predictor,
                x_src,
                field,
                schedule,
                rng,
                cfg.stochastic,
                cfg.quadrature_n,
            )?,
        };
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("sampler", format!("non-finite state at t={t}")));
        }
        observer(t, &x);
    }
    Ok(x.mapv(|v| v.clamp(-1.0, 1.0)))
}

/// Settings for [`euler_maruyama_reference`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EulerMaruyamaConfig {
    pub n_substeps: usize,
    /// Drop the diffusion term, leaving the mean recursion of the scheme.
    pub noise: bool,
}

/// Euler-Maruyama integration of the reverse-time SDE from step index
/// `t_from` down to `t_to` (fractional indices allowed), with the clean image
/// in the drift and score replaced by the predictor output.
#[allow(clippy::too_many_arguments)]
pub fn euler_maruyama_reference<P: Predictor + ?Sized, R: Rng + ?Sized>(
    x_init: &Field,
    t_from: f64,
    t_to: f64,
    predictor: &P,
    x_src: &Field,
    field: &MixField,
    schedule: &NoiseSchedule,
    rng: &mut R,
    cfg: EulerMaruyamaConfig,
) -> Result<Field> {
    check_field(schedule, field)?;
    ensure_same_shape(field.at(0), x_init)?;
    ensure_same_shape(field.at(0), x_src)?;
    let steps = schedule.steps() as f64;
    if !(0.0..=steps).contains(&t_to) || !(t_to..=steps).contains(&t_from) {
        return Err(Error::param("t", format!("need 0 <= {t_to} <= {t_from} <= {steps}")));
    }
    if cfg.n_substeps == 0 {
        return Err(Error::param("n_substeps", "need at least one substep"));
    }
    let du = (t_from - t_to) / cfg.n_substeps as f64;
    let dtau = du / steps;
    let mut x = x_init.clone();
    for k in 0..cfg.n_substeps {
        let u = t_from - du * k as f64;
        let (f, g) = schedule.continuous_coefficients(u / steps)?;
        let c = Coeffs::at(schedule, field, u);
        if c.sigma <= 0.0 {
            return Err(Error::UndefinedScore { t: u as usize });
        }
        let rate = field.rate_at(u) * steps;
        let phi = predictor.predict(&x, x_src, u)?;
        ensure_same_shape(&x, &phi)?;
        let d = data_mixture(&c.mix, x_src, &phi);
        let inv_var = 1.0 / (c.sigma * c.sigma);
        let g2 = g * g;
        let sab = c.sqrt_alpha_bar;
        let mut drift = x.clone();
        Zip::from(&mut drift)
            .and(&rate)
            .and(x_src)
            .and(&phi)
            .and(&d)
            .for_each(|v, &ld, &s, &p, &dd| {
                let xv = *v;
                let score = -(xv - sab * dd) * inv_var;
                *v = f * xv + sab * ld * (s - p) - g2 * score;
            });
        // Reverse time: step backward by dtau.
        x = x - drift * dtau;
        if cfg.noise {
            let z = standard_normal(shape3(&x), rng);
            x = x + z * (g * dtau.sqrt());
        }
    }
    Ok(x)
}
