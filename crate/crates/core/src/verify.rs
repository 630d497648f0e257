//! Numbered oracle and property checks.
//!
//! Every check measures its own wall-clock time and fails when it exceeds its
//! budget. Reference values come from independent computations: a plain VP
//! sampler, a fine-grid ODE integration, Monte Carlo regression, finite
//! differences and chained forward simulation.

use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::energy::{reference_instance, verify_strict_domination, SolverOptions, DEFAULT_GRID};
use crate::error::Result;
use crate::field::{max_abs_diff, rmse, standard_normal, Field};
use crate::forward::{domain_mixture, forward_marginal_sample, markov_step, mixture_increment, DomainPair};
use crate::mixfield::{logistic_squash, ChannelPolyParams, MixField, MixOptions, ModNetParams};
use crate::predictors::{
    batch_loss_and_grad, draw_batch, gaussian_posterior_predictor, moving_average, oracle_pair_predictor,
    train_score_matching, Mixer, Predictor, PredictorKind, ToyNet, ToyPredictor, TrainConfig,
};
use crate::sampler::{eps_to_x0, exact_reverse_step, first_order_step, sample, x0_to_eps, SamplerConfig};
use crate::schedules::{make_spaced_grid, NoiseSchedule};
use crate::tasks::{evaluate_pairs, gen_dataset, misalign, pair_seed, psnr, MetricReport, SyntheticTaskSpec, TaskKind};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub id: usize,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
    pub budget: Duration,
}

impl CheckReport {
    fn finish(id: usize, name: &'static str, budget_secs: u64, start: Instant, ok: bool, detail: String) -> Self {
        Self::from_elapsed(id, name, budget_secs, start.elapsed(), ok, detail)
    }

    fn from_elapsed(
        id: usize,
        name: &'static str,
        budget_secs: u64,
        elapsed: Duration,
        ok: bool,
        detail: String,
    ) -> Self {
        let budget = Duration::from_secs(budget_secs);
        Self {
            id,
            name,
            passed: ok && elapsed <= budget,
            detail,
            elapsed,
            budget,
        }
    }

    /// `[PASS] 3 forward-marginal consistency: ... (12.3 s / 120 s)`
    pub fn line(&self) -> String {
        format!(
            "[{}] {:>2} {}: {} ({:.1} s / {} s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail,
            self.elapsed.as_secs_f64(),
            self.budget.as_secs()
        )
    }
}

fn uniform_field<R: Rng + ?Sized>(shape: [usize; 3], lo: f64, hi: f64, rng: &mut R) -> Field {
    Field::from_shape_simple_fn(shape, || rng.random_range(lo..hi))
}

fn random_pair<R: Rng + ?Sized>(shape: [usize; 3], rng: &mut R) -> DomainPair {
    DomainPair::new(uniform_field(shape, -1.0, 1.0, rng), uniform_field(shape, -1.0, 1.0, rng))
        .expect("shapes match")
}

fn random_poly<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> ChannelPolyParams {
    let coeffs = Array2::from_shape_fn((channels, 4), |_| rng.random_range(-1.0..1.0));
    ChannelPolyParams::from_coeffs(coeffs).expect("valid coefficients")
}

/// 1. `logistic_squash(0) = eps`, `logistic_squash(1) = 1 - eps`.
pub fn logistic_calibration() -> Result<CheckReport> {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for eps in [1e-2, 1e-4, 1e-6] {
        let lo = logistic_squash(0.0, eps)?;
        let hi = logistic_squash(1.0, eps)?;
        worst = worst.max(((lo - eps) / eps).abs()).max(((hi - (1.0 - eps)) / (1.0 - eps)).abs());
    }
    Ok(CheckReport::finish(
        1,
        "logistic calibration",
        1,
        start,
        worst <= 1e-12,
        format!("max relative error {worst:.2e} (tol 1e-12)"),
    ))
}

/// 2. `Lambda_0 = 0`, `Lambda_T = 1` and interior values in `[eps, 1 - eps]`
/// for every variant on random parameters.
pub fn endpoint_clamps(seed: u64) -> Result<CheckReport> {
    let start = Instant::now();
    let sched = NoiseSchedule::default_vp();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [2, 6, 5];
    let mut failures = Vec::new();
    let mut fields = 0;
    for trial in 0..3 {
        let opts = MixOptions::default();
        let candidates = [
            MixField::linear(&sched, shape, opts)?,
            MixField::channel_poly(&random_poly(2, &mut rng), &sched, shape, opts)?,
            MixField::dynamic(&ModNetParams::random(2, 2.0, &mut rng), &sched, shape, opts)?,
        ];
        for field in candidates {
            fields += 1;
            let eps = field.eps();
            let steps = field.steps();
            if field.at(0).iter().any(|&v| v != 0.0) {
                failures.push(format!("{} trial {trial}: Lambda_0 != 0", field.variant().name()));
            }
            if field.at(steps).iter().any(|&v| v != 1.0) {
                failures.push(format!("{} trial {trial}: Lambda_T != 1", field.variant().name()));
            }
            let bad = (1..steps)
                .flat_map(|t| field.at(t).iter().copied().collect::<Vec<_>>())
                .filter(|v| !(eps..=1.0 - eps).contains(v))
                .count();
            if bad > 0 {
                failures.push(format!("{} trial {trial}: {bad} interior values outside [eps, 1-eps]", field.variant().name()));
            }
        }
    }
    let ok = failures.is_empty();
    let detail = if ok {
        format!("{fields} fields (linear/channel/dynamic), endpoints exact, interior clamped")
    } else {
        failures.join("; ")
    };
    Ok(CheckReport::finish(2, "endpoint clamps", 5, start, ok, detail))
}

#[derive(Clone)]
struct Moments {
    sum: Vec<f64>,
    sumsq: Vec<f64>,
    n: usize,
}

impl Moments {
    fn new(cells: usize) -> Self {
        Self {
            sum: vec![0.0; cells],
            sumsq: vec![0.0; cells],
            n: 0,
        }
    }

    fn add(&mut self, x: &Field) {
        for (i, &v) in x.iter().enumerate() {
            self.sum[i] += v;
            self.sumsq[i] += v * v;
        }
        self.n += 1;
    }

    fn merge(mut self, other: &Moments) -> Self {
        for i in 0..self.sum.len() {
            self.sum[i] += other.sum[i];
            self.sumsq[i] += other.sumsq[i];
        }
        self.n += other.n;
        self
    }

    fn mean(&self, i: usize) -> f64 {
        self.sum[i] / self.n as f64
    }

    fn var(&self, i: usize) -> f64 {
        let m = self.mean(i);
        (self.sumsq[i] / self.n as f64 - m * m) * self.n as f64 / (self.n as f64 - 1.0)
    }
}

/// Worst standardized mean gap and variance ratio range between two samples.
fn compare_moments(a: &Moments, b: &Moments) -> (f64, f64, f64) {
    let mut z_max: f64 = 0.0;
    let mut r_min = f64::INFINITY;
    let mut r_max: f64 = 0.0;
    for i in 0..a.sum.len() {
        let se = (a.var(i) / a.n as f64 + b.var(i) / b.n as f64).sqrt();
        z_max = z_max.max((a.mean(i) - b.mean(i)).abs() / se);
        let r = a.var(i) / b.var(i);
        r_min = r_min.min(r);
        r_max = r_max.max(r);
    }
    (z_max, r_min, r_max)
}

/// 3. Chained Markov transitions reproduce the direct marginal.
pub fn forward_marginal_consistency(n: usize, seed: u64) -> Result<CheckReport> {
    let start = Instant::now();
    let sched = NoiseSchedule::default_vp();
    let steps = sched.steps();
    let shape = [1, 8, 8];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let field = MixField::dynamic(&ModNetParams::random(1, 1.0, &mut rng), &sched, shape, MixOptions::default())?;
    let pair = random_pair(shape, &mut rng);
    let probes = [steps / 4, steps / 2, 3 * steps / 4];
    let cells = 64;

    const CHUNK: usize = 250;
    let chunks: Vec<usize> = (0..n.div_ceil(CHUNK)).collect();
    let chained: Vec<Vec<Moments>> = chunks
        .par_iter()
        .map(|&c| -> Result<Vec<Moments>> {
            let mut acc = vec![Moments::new(cells); probes.len()];
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                let mut rng = ChaCha8Rng::seed_from_u64(pair_seed(seed, i));
                let mut x = pair.x_tgt.clone();
                for t in 1..=probes[probes.len() - 1] {
                    x = markov_step(&sched, &field, &pair, &x, t, &mut rng)?;
                    if let Some(k) = probes.iter().position(|&p| p == t) {
                        acc[k].add(&x);
                    }
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let chained = chained.iter().fold(vec![Moments::new(cells); probes.len()], |acc, m| {
        acc.into_iter().zip(m).map(|(a, b)| a.merge(b)).collect()
    });

    let mut lines = Vec::new();
    let mut ok = true;
    for (k, &t) in probes.iter().enumerate() {
        let mut direct = Moments::new(cells);
        let mut rng = ChaCha8Rng::seed_from_u64(pair_seed(seed ^ 0xD1EC7, t));
        for _ in 0..n {
            direct.add(&forward_marginal_sample(&sched, &field, &pair, t, &mut rng)?.x_t);
        }
        let (z, lo, hi) = compare_moments(&chained[k], &direct);
        ok &= z < 4.0 && lo >= 0.9 && hi <= 1.1;
        lines.push(format!("t={t}: max|gap|/SE {z:.2}, var ratio [{lo:.3}, {hi:.3}]"));
    }
    Ok(CheckReport::finish(
        3,
        "forward-marginal consistency",
        120,
        start,
        ok,
        format!("N={n}; {}", lines.join("; ")),
    ))
}

/// 4. `d_t - d_{t-1} = (Lambda_t - Lambda_{t-1}) (x_src - x_tgt)`.
pub fn mixture_increment_identity(seed: u64) -> Result<CheckReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let shape = [rng.random_range(1..4), rng.random_range(1..9), rng.random_range(1..9)];
        let pair = random_pair(shape, &mut rng);
        let l_prev = uniform_field(shape, 0.0, 1.0, &mut rng);
        let l_t = uniform_field(shape, 0.0, 1.0, &mut rng);
        let lhs = domain_mixture(&l_t, &pair)? - domain_mixture(&l_prev, &pair)?;
        let rhs = mixture_increment(&l_t, &l_prev, &pair)?;
        worst = worst.max(max_abs_diff(&lhs, &rhs));
    }
    Ok(CheckReport::finish(
        4,
        "mixture-increment identity",
        1,
        start,
        worst < 1e-12,
        format!("100 instances, max abs difference {worst:.2e} (tol 1e-12)"),
    ))
}

/// 5. Strict domination of the pixelwise class on the heterogeneous
/// reference instance, no gap on the homogeneous control, and a descent
/// certificate that is negative and linear in its size.
pub fn strict_domination() -> Result<CheckReport> {
    let start = Instant::now();
    let opts = SolverOptions::default();
    let (spec, pair) = reference_instance(DEFAULT_GRID, true);
    let het = verify_strict_domination(&spec, &pair, &opts)?;
    let (spec, pair) = reference_instance(DEFAULT_GRID, false);
    let hom = verify_strict_domination(&spec, &pair, &opts)?;
    let rel_gap = het.gap / het.e_glob;
    let hom_rel = hom.gap.abs() / hom.e_glob;
    let cert = het.certificate.as_ref().expect("heterogeneous instance has a certificate");
    let (e0, d0) = cert.changes[0];
    let (e1, d1) = cert.changes[cert.changes.len() - 1];
    let ratio = (d1 / d0) / (e1 / e0);
    let ok = rel_gap >= 0.05 && hom_rel < 1e-3 && cert.is_linear_descent(0.1);
    Ok(CheckReport::finish(
        5,
        "strict domination",
        60,
        start,
        ok,
        format!(
            "E_glob {:.4}, E_pix {:.4}, gap/E_glob {rel_gap:.3} (>= 0.05); homogeneous |gap|/E_glob {hom_rel:.1e} (< 1e-3); \
             dE({e0:.0e}) = {d0:.3e}, dE({e1:.0e}) = {d1:.3e}, scaling ratio {ratio:.3} (1 = linear, tol 0.1)",
            het.e_glob, het.e_pix
        ),
    ))
}

/// Predictor returning a fixed field.
struct ConstantPredictor(Field);

impl Predictor for ConstantPredictor {
    fn predict(&self, _x_t: &Field, _x_src: &Field, _t: f64) -> Result<Field> {
        Ok(self.0.clone())
    }

    fn kind(&self) -> PredictorKind {
        PredictorKind::Trained
    }
}

/// Conditional mean of one reverse step with a constant prediction `phi`,
/// by explicit Euler in `y = x / Upsilon` with `n_sub` substeps uniform in
/// step index. Each substep uses the exact increments of `lambda` and of
/// `kappa = Lambda / (1 - Lambda)`:
/// `dy = (2 / lambda) (y - kappa x_src - phi) d lambda + x_src d kappa`.
fn ode_reference(
    x_s: &Field,
    s: usize,
    t: usize,
    phi: &Field,
    x_src: &Field,
    field: &MixField,
    schedule: &NoiseSchedule,
    n_sub: usize,
) -> Field {
    let at = |u: f64| -> (f64, Field) {
        let ab = schedule.alpha_bar_at(u);
        (ab, field.at_fractional(u))
    };
    let state = |u: f64| -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (ab, mix) = at(u);
        let sab = ab.sqrt();
        let sigma = (1.0 - ab).max(0.0).sqrt();
        let ups: Vec<f64> = mix.iter().map(|l| sab * (1.0 - l)).collect();
        let lam = ups.iter().map(|u| sigma / u).collect();
        let kap = mix.iter().map(|l| l / (1.0 - l)).collect();
        (ups, lam, kap)
    };
    let (ups_s, mut lam, mut kap) = state(s as f64);
    let src = x_src.as_slice().expect("standard layout");
    let ph = phi.as_slice().expect("standard layout");
    let mut y: Vec<f64> = x_s.iter().zip(&ups_s).map(|(x, u)| x / u).collect();
    let du = (s - t) as f64 / n_sub as f64;
    let mut ups_end = ups_s;
    for k in 1..=n_sub {
        let u = if k == n_sub { t as f64 } else { s as f64 - du * k as f64 };
        let (ups_n, lam_n, kap_n) = state(u);
        for i in 0..y.len() {
            let drift = 2.0 / lam[i] * (y[i] - kap[i] * src[i] - ph[i]);
            y[i] += drift * (lam_n[i] - lam[i]) + src[i] * (kap_n[i] - kap[i]);
        }
        lam = lam_n;
        kap = kap_n;
        ups_end = ups_n;
    }
    let out: Vec<f64> = y.iter().zip(&ups_end).map(|(y, u)| y * u).collect();
    Field::from_shape_vec(x_s.raw_dim(), out).expect("same size")
}

/// 6. Exact step equals the first-order step for a constant prediction, and
/// its deterministic part matches a 1000-substep ODE integration with the
/// oracle predictor.
pub fn sampler_exactness(seed: u64) -> Result<CheckReport> {
    let start = Instant::now();
    let sched = NoiseSchedule::default_vp();
    let shape = [1, 8, 8];
    let t1 = sched.steps() / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let field = MixField::dynamic(&ModNetParams::random(1, 1.0, &mut rng), &sched, shape, MixOptions::truncated(t1))?;
    let pair = random_pair(shape, &mut rng);
    let oracle = oracle_pair_predictor(&pair);
    let constant = ConstantPredictor(uniform_field(shape, -1.0, 1.0, &mut rng));
    let grid = make_spaced_grid(&sched, 10, t1)?;

    let mut identical = true;
    let mut worst_rmse: f64 = 0.0;
    for (s, t) in grid.steps() {
        let x_s = forward_marginal_sample(&sched, &field, &pair, s, &mut rng)?.x_t;
        let a = first_order_step(&x_s, s, t, &constant, &pair.x_src, &field, &sched, &mut rng, false)?;
        let b = exact_reverse_step(&x_s, s, t, &constant, &pair.x_src, &field, &sched, &mut rng, false, 8)?;
        identical &= a == b;
        let exact = exact_reverse_step(&x_s, s, t, &oracle, &pair.x_src, &field, &sched, &mut rng, false, 8)?;
        let reference = ode_reference(&x_s, s, t, &pair.x_tgt, &pair.x_src, &field, &sched, 1000);
        worst_rmse = worst_rmse.max(rmse(&exact, &reference));
    }
    Ok(CheckReport::finish(
        6,
        "sampler exactness",
        120,
        start,
        identical && worst_rmse < 1e-3,
        format!(
            "constant predictor bit-identical: {identical}; oracle vs 1000-substep ODE max per-step RMSE {worst_rmse:.2e} (tol 1e-3)"
        ),
    ))
}

/// 7. Oracle sampling reconstructs the target.
pub fn oracle_round_trip(seed: u64) -> Result<CheckReport> {
    let start = Instant::now();
    let sched = NoiseSchedule::default_vp();
    let t1 = sched.steps() / 2;
    let spec = SyntheticTaskSpec {
        kind: TaskKind::ContrastSwap,
        n: 20,
        height: 32,
        width: 32,
        channels: 1,
        seed,
    };
    let pairs = gen_dataset(&spec)?;
    let shape = pairs[0].shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fields = [
        MixField::linear(&sched, shape, MixOptions::truncated(t1))?,
        MixField::dynamic(&ModNetParams::random(1, 1.0, &mut rng), &sched, shape, MixOptions::truncated(t1))?,
    ];
    let cfg = SamplerConfig::new(50, t1);
    let mut ok = true;
    let mut parts = Vec::new();
    for field in &fields {
        let scores: Vec<f64> = pairs
            .par_iter()
            .enumerate()
            .map(|(i, p)| {
                let mut rng = ChaCha8Rng::seed_from_u64(pair_seed(seed, i));
                let out = sample(&oracle_pair_predictor(p), &p.x_src, &cfg, field, &sched, &mut rng)?;
                psnr(&out, &p.x_tgt)
            })
            .collect::<Result<_>>()?;
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        ok &= mean > 30.0;
        parts.push(format!("{} {mean:.1} dB", field.variant().name()));
    }
    Ok(CheckReport::finish(
        7,
        "oracle round-trip",
        60,
        start,
        ok,
        format!("mean PSNR over 20 pairs, N=50, t1={t1}: {} (> 30 dB)", parts.join(", ")),
    ))
}

/// Plain VP first-order data-prediction step written in log-SNR form:
/// `x_t = (sigma_t / sigma_s) e^{-h} x_s + alpha_t (1 - e^{-2h}) x0
///  + sigma_t sqrt(1 - e^{-2h}) z`, `h = log(alpha_t / sigma_t) - log(alpha_s / sigma_s)`.
fn plain_vp_step(x_s: &Field, x0: &Field, abar_s: f64, abar_t: f64, z: Option<&Field>) -> Field {
    let (alpha_s, sigma_s) = (abar_s.sqrt(), (1.0 - abar_s).sqrt());
    let (alpha_t, sigma_t) = (abar_t.sqrt(), (1.0 - abar_t).sqrt());
    let h = (alpha_t / sigma_t).ln() - (alpha_s / sigma_s).ln();
    let e = (-h).exp();
    let mut out = x_s * (sigma_t / sigma_s * e) + x0 * (alpha_t * (1.0 - e * e));
    if let Some(z) = z {
        out = out + z * (sigma_t * (1.0 - e * e).sqrt());
    }
    out
}

/// Predictor depending nonlinearly on state and source, for reduction tests.
struct Smooth;

impl Predictor for Smooth {
    fn predict(&self, x_t: &Field, x_src: &Field, t: f64) -> Result<Field> {
        let mut out = x_t.mapv(|v| (0.3 * v).tanh());
        out.zip_mut_with(x_src, |o, &s| *o += 0.5 * s * (1.0 + (t / 500.0).cos()) / 2.0);
        Ok(out)
    }

    fn kind(&self) -> PredictorKind {
        PredictorKind::Trained
    }
}

/// 8. With `Lambda = 0` the sampler stack is plain VP sampling.
pub fn vp_reduction(seed: u64) -> Result<CheckReport> {
    let start = Instant::now();
    let sched = NoiseSchedule::default_vp();
    let steps = sched.steps();
    let shape = [2, 6, 6];
    let zero = Field::zeros(shape);
    let slices = (0..=steps).map(|t| if t == steps { Field::ones(shape) } else { zero.clone() }).collect();
    let field = MixField::from_slices(slices, 1e-4)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x_src = uniform_field(shape, -1.0, 1.0, &mut rng);
    let mut worst: f64 = 0.0;
    for stochastic in [false, true] {
        let grid = make_spaced_grid(&sched, 25, 900)?;
        let mut x = standard_normal(shape, &mut rng);
        for (s, t) in grid.steps() {
            let phi = Smooth.predict(&x, &x_src, s as f64)?;
            // Both consume the same stream: one standard normal per cell in
            // row-major order.
            let mut rng_a = ChaCha8Rng::seed_from_u64(pair_seed(seed, s));
            let mut rng_b = rng_a.clone();
            let ours = first_order_step(&x, s, t, &Smooth, &x_src, &field, &sched, &mut rng_a, stochastic)?;
            let z = stochastic.then(|| Field::from_shape_simple_fn(shape, || rng_b.sample(StandardNormal)));
            let plain = plain_vp_step(&x, &phi, sched.alpha_bar(s), sched.alpha_bar(t), z.as_ref());
            worst = worst.max(max_abs_diff(&ours, &plain));
            if t > 0 {
                // Conversions reduce to DDPM's x0 <-> eps.
                let (a, sg) = (sched.alpha_bar(t).sqrt(), (1.0 - sched.alpha_bar(t)).sqrt());
                let eps = x0_to_eps(&ours, &phi, &zero, &x_src, &sched, t)?;
                worst = worst.max(max_abs_diff(&eps, &((&ours - &(&phi * a)) / sg)));
                let x0 = eps_to_x0(&ours, &eps, &zero, &x_src, &sched, t)?;
                worst = worst.max(max_abs_diff(&x0, &((&ours - &(&eps * sg)) / a)));
            }
            x = ours;
        }
    }
    Ok(CheckReport::finish(
        8,
        "VP reduction",
        30,
        start,
        worst < 1e-8,
        format!("max per-step deviation from plain VP sampler {worst:.2e} (tol 1e-8)"),
    ))
}

/// 9. The closed-form posterior gain matches Monte Carlo regression, and the
/// posterior mean beats prior-mean and naive-inversion baselines.
pub fn gaussian_posterior(draws: usize, seed: u64) -> Result<CheckReport> {
    let start = Instant::now();
    // A gentle schedule and the unsquashed linear field keep the signal
    // fraction of x_t large enough for the regression at 3T/4.
    let sched = NoiseSchedule::linear(1000, 1e-5, 1e-3)?;
    let steps = sched.steps();
    let shape = [1, 8, 8];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = MixOptions {
        raw_linear: true,
        ..MixOptions::default()
    };
    let field = MixField::linear(&sched, shape, opts)?;
    let mu0 = uniform_field(shape, -0.5, 0.5, &mut rng);
    let x_src = uniform_field(shape, -1.0, 1.0, &mut rng);
    let tau2 = 1.0;
    let post = gaussian_posterior_predictor(mu0.clone(), tau2, &field, &sched)?;
    let mut ok = true;
    let mut parts = Vec::new();
    for t in [steps / 4, steps / 2, 3 * steps / 4] {
        let lam = field.at(t);
        let sab = sched.sqrt_alpha_bar(t);
        let sigma = sched.sigma(t);
        let cells = mu0.len();
        // Per-cell running sums for the pooled regression of x0 on x_t.
        let (mut sx, mut sy, mut sxx, mut sxy) = (vec![0.0; cells], vec![0.0; cells], vec![0.0; cells], vec![0.0; cells]);
        let (mut mse_post, mut mse_prior, mut mse_naive) = (0.0, 0.0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(pair_seed(seed, t));
        for _ in 0..draws {
            let x0 = Field::from_shape_fn(shape, |idx| mu0[idx] + tau2.sqrt() * rng.sample::<f64, _>(StandardNormal));
            let pair = DomainPair::new(x_src.clone(), x0.clone())?;
            let d = domain_mixture(lam, &pair)?;
            let x_t = d * sab + standard_normal(shape, &mut rng) * sigma;
            let p = post.predict(&x_t, &x_src, t as f64)?;
            for i in 0..cells {
                let idx = [0, i / 8, i % 8];
                let (xv, yv) = (x_t[idx], x0[idx]);
                sx[i] += xv;
                sy[i] += yv;
                sxx[i] += xv * xv;
                sxy[i] += xv * yv;
                mse_post += (p[idx] - yv).powi(2);
                mse_prior += (mu0[idx] - yv).powi(2);
                let naive = (xv / sab - lam[idx] * x_src[idx]) / (1.0 - lam[idx]);
                mse_naive += (naive - yv).powi(2);
            }
        }
        let n = draws as f64;
        let (mut cov, mut var) = (0.0, 0.0);
        for i in 0..cells {
            cov += sxy[i] - sx[i] * sy[i] / n;
            var += sxx[i] - sx[i] * sx[i] / n;
        }
        let k_mc = cov / var;
        let k = post.gain(t as f64)[[0, 0, 0]];
        let rel = (k_mc - k).abs() / k;
        let dominates = mse_post <= mse_prior && mse_post <= mse_naive;
        ok &= rel < 0.01 && dominates;
        let norm = n * cells as f64;
        parts.push(format!(
            "t={t}: k {k:.4} vs MC {k_mc:.4} (rel {rel:.1e}); MSE post {:.4} prior {:.4} naive {:.4}",
            mse_post / norm,
            mse_prior / norm,
            mse_naive / norm
        ));
    }
    Ok(CheckReport::finish(
        9,
        "Gaussian-posterior oracle",
        120,
        start,
        ok,
        format!("{draws} draws; {}", parts.join("; ")),
    ))
}

/// Relative error with a floor for coordinates whose gradient vanishes.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// 10. Finite-difference agreement of the training gradient and a 2000-step
/// run that lowers the smoothed loss by at least 30%.
pub fn training_smoke(steps: usize, seed: u64) -> Result<CheckReport> {
    let start = Instant::now();
    let sched = NoiseSchedule::default_vp();
    let t1 = sched.steps() / 2;
    let spec = SyntheticTaskSpec {
        kind: TaskKind::ContrastSwap,
        n: 200,
        height: 16,
        width: 16,
        channels: 1,
        seed,
    };
    let data = gen_dataset(&spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mixer = Mixer::Dynamic {
        params: ModNetParams::init(1, &mut rng),
        opts: MixOptions::truncated(t1),
    };
    let net = ToyNet::init(seed, 1, crate::predictors::TOY_WIDTH);

    let draws = draw_batch(&data, &sched, t1, 4, &mut rng);
    let (_, grad, _) = batch_loss_and_grad(&net, &mixer, &sched, &data, &draws, false)?;
    let mut worst: f64 = 0.0;
    let h = 1e-5;
    for _ in 0..20 {
        let idx = rng.random_range(0..grad.len());
        let mut plus = net.clone();
        plus.params_mut()[idx] += h;
        let mut minus = net.clone();
        minus.params_mut()[idx] -= h;
        let lp = batch_loss_and_grad(&plus, &mixer, &sched, &data, &draws, false)?.0;
        let lm = batch_loss_and_grad(&minus, &mixer, &sched, &data, &draws, false)?.0;
        worst = worst.max(rel_err((lp - lm) / (2.0 * h), grad[idx]));
    }

    let cfg = TrainConfig {
        steps,
        seed,
        ..TrainConfig::default()
    };
    let out = train_score_matching(&data, net, mixer, &sched, &cfg)?;
    let window = 100.min(steps);
    let initial = out.losses[..window].iter().sum::<f64>() / window as f64;
    let last = *moving_average(&out.losses, window).last().expect("at least one step");
    let drop = 1.0 - last / initial;
    Ok(CheckReport::finish(
        10,
        "training smoke + gradient check",
        600,
        start,
        worst < 1e-3 && drop >= 0.3,
        format!(
            "FD max relative error {worst:.1e} on 20 coords (tol 1e-3); {steps} steps on 200 pairs: \
             smoothed loss {initial:.4} -> {last:.4}, drop {:.0}% (>= 30%)",
            100.0 * drop
        ),
    ))
}

/// Setup shared by the ablation, step-efficiency and robustness checks.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationConfig {
    pub size: usize,
    pub train_pairs: usize,
    pub test_pairs: usize,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub t1: usize,
    /// Sampler step counts; the largest is the reference budget.
    pub step_counts: Vec<usize>,
    pub shifts: Vec<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            size: 36,
            train_pairs: 200,
            test_pairs: 16,
            train: TrainConfig {
                steps: 3000,
                ..TrainConfig::default()
            },
            seeds: vec![0, 1, 2],
            t1: 500,
            step_counts: vec![5, 10, 20],
            shifts: vec![0, 1, 4, 8],
        }
    }
}

/// Seed-averaged test metrics of one schedule variant.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantScores {
    pub name: &'static str,
    /// `(N, psnr, dice, hausdorff)` for every sampler step count.
    pub by_steps: Vec<(usize, f64, f64, f64)>,
    /// `(shift, dice)` at the largest step count.
    pub by_shift: Vec<(usize, f64)>,
    /// Whether every generated sample was finite.
    pub finite: bool,
}

impl VariantScores {
    fn at_steps(&self, n: usize) -> (f64, f64, f64) {
        let &(_, p, d, h) = self.by_steps.iter().find(|r| r.0 == n).expect("evaluated step count");
        (p, d, h)
    }
}

#[derive(Debug, Clone)]
pub struct AblationResult {
    pub linear: VariantScores,
    pub dynamic: VariantScores,
    pub reference_steps: usize,
    /// Training plus evaluation at the reference step count.
    pub train_time: Duration,
    pub steps_time: Duration,
    pub shift_time: Duration,
}

fn add_row(acc: &mut [f64], row: &[f64]) {
    acc.iter_mut().zip(row).for_each(|(a, r)| *a += r);
}

/// Trains the linear and dynamic variants with identical budgets on
/// `shape_to_mask` and scores them on a held-out set.
pub fn run_ablation(cfg: &AblationConfig, seed: u64) -> Result<AblationResult> {
    let sched = NoiseSchedule::default_vp();
    let spec = SyntheticTaskSpec {
        kind: TaskKind::ShapeToMask,
        n: cfg.train_pairs,
        height: cfg.size,
        width: cfg.size,
        channels: 1,
        seed,
    };
    let train = gen_dataset(&spec)?;
    let test = gen_dataset(&SyntheticTaskSpec {
        n: cfg.test_pairs,
        seed: seed.wrapping_add(1),
        ..spec
    })?;
    let shape = train[0].shape();
    let reference = *cfg.step_counts.iter().max().expect("at least one step count");
    let opts = MixOptions::truncated(cfg.t1);
    let (mut train_time, mut steps_time, mut shift_time) = (Duration::ZERO, Duration::ZERO, Duration::ZERO);
    let mut scores = Vec::new();
    for dynamic in [false, true] {
        let mut steps_acc = vec![[0.0; 3]; cfg.step_counts.len()];
        let mut shift_acc = vec![0.0; cfg.shifts.len()];
        let mut finite = true;
        for &run_seed in &cfg.seeds {
            let start = Instant::now();
            let mixer = if dynamic {
                Mixer::Dynamic {
                    params: ModNetParams::init(1, &mut ChaCha8Rng::seed_from_u64(run_seed)),
                    opts,
                }
            } else {
                Mixer::Fixed(MixField::linear(&sched, shape, opts)?)
            };
            let net = ToyNet::init(run_seed, 1, crate::predictors::TOY_WIDTH);
            let tc = TrainConfig {
                seed: run_seed,
                ..cfg.train
            };
            let out = train_score_matching(&train, net, mixer, &sched, &tc)?;
            let field = out.mixer.build(&sched, shape)?;
            let predictor = ToyPredictor::new(out.net, &field, &sched)?;
            let evaluate = |n: usize, shift: usize| -> Result<(MetricReport, bool)> {
                let cfg = SamplerConfig::new(n, cfg.t1);
                let (gens, refs, masks) = test
                    .par_iter()
                    .enumerate()
                    .map(|(i, p)| {
                        let p = misalign(p, shift)?;
                        let mut rng = ChaCha8Rng::seed_from_u64(pair_seed(seed ^ run_seed, i));
                        let g = sample(&predictor, &p.x_src, &cfg, &field, &sched, &mut rng)?;
                        Ok((g, p.x_tgt, p.mask.expect("shape_to_mask carries masks")))
                    })
                    .collect::<Result<Vec<_>>>()?
                    .into_iter()
                    .fold((Vec::new(), Vec::new(), Vec::new()), |mut acc, (g, r, m)| {
                        acc.0.push(g);
                        acc.1.push(r);
                        acc.2.push(m);
                        acc
                    });
                let finite = gens.iter().all(|g| g.iter().all(|v| v.is_finite()));
                Ok((evaluate_pairs(&gens, &refs, Some(&masks))?, finite))
            };
            for (k, &n) in cfg.step_counts.iter().enumerate() {
                let t = Instant::now();
                let (r, ok) = evaluate(n, 0)?;
                finite &= ok;
                let row = [r.mean("psnr"), r.mean("dice"), r.mean("hausdorff")].map(|v| v.unwrap_or(f64::NAN));
                add_row(&mut steps_acc[k], &row);
                if n == reference {
                    train_time += start.elapsed();
                } else {
                    steps_time += t.elapsed();
                }
            }
            if dynamic {
                let t = Instant::now();
                for (k, &shift) in cfg.shifts.iter().enumerate() {
                    let (r, ok) = evaluate(reference, shift)?;
                    finite &= ok;
                    shift_acc[k] += r.mean("dice").unwrap_or(f64::NAN);
                }
                shift_time += t.elapsed();
            }
        }
        let m = cfg.seeds.len() as f64;
        scores.push(VariantScores {
            name: if dynamic { "dynamic" } else { "linear" },
            by_steps: cfg
                .step_counts
                .iter()
                .zip(&steps_acc)
                .map(|(&n, a)| (n, a[0] / m, a[1] / m, a[2] / m))
                .collect(),
            by_shift: if dynamic {
                cfg.shifts.iter().zip(&shift_acc).map(|(&s, d)| (s, d / m)).collect()
            } else {
                Vec::new()
            },
            finite,
        });
    }
    let dynamic = scores.pop().expect("two variants");
    let linear = scores.pop().expect("two variants");
    Ok(AblationResult {
        linear,
        dynamic,
        reference_steps: reference,
        train_time,
        steps_time,
        shift_time,
    })
}

/// 11. The dynamic schedule matches or beats the linear one on Dice and
/// Hausdorff at the reference step count.
pub fn ablation_direction(ab: &AblationResult) -> CheckReport {
    let n = ab.reference_steps;
    let (_, ld, lh) = ab.linear.at_steps(n);
    let (_, dd, dh) = ab.dynamic.at_steps(n);
    CheckReport::from_elapsed(
        11,
        "ablation direction",
        45 * 60,
        ab.train_time,
        ab.linear.finite && ab.dynamic.finite && dd >= ld && dh <= lh,
        format!("N={n}: dice dynamic {dd:.3} vs linear {ld:.3}; hausdorff dynamic {dh:.2} vs linear {lh:.2}"),
    )
}

/// 12. Fewest steps at which the dynamic variant reaches the linear
/// variant's PSNR at the reference step count.
pub fn step_efficiency(ab: &AblationResult) -> CheckReport {
    let n = ab.reference_steps;
    let (target, _, _) = ab.linear.at_steps(n);
    let reached = ab
        .dynamic
        .by_steps
        .iter()
        .filter(|r| r.1 >= target)
        .map(|r| r.0)
        .min();
    let curve: Vec<String> = ab.dynamic.by_steps.iter().map(|r| format!("N={} {:.2}", r.0, r.1)).collect();
    CheckReport::from_elapsed(
        12,
        "step efficiency",
        45 * 60,
        ab.steps_time,
        reached.is_some_and(|m| m <= n),
        format!(
            "linear N={n} PSNR {target:.2} dB; dynamic {} dB; reached at {}",
            curve.join(", "),
            reached.map_or("none".to_string(), |m| format!("N={m}"))
        ),
    )
}

/// 13. Dice under input misalignment degrades but keeps at least half its
/// aligned value at the largest shift.
pub fn misalignment_robustness(ab: &AblationResult) -> CheckReport {
    let shifts = &ab.dynamic.by_shift;
    let d0 = shifts.first().map_or(f64::NAN, |r| r.1);
    let (smax, dmax) = shifts.last().copied().unwrap_or((0, f64::NAN));
    let curve: Vec<String> = shifts.iter().map(|(s, d)| format!("{s}px {d:.3}")).collect();
    CheckReport::from_elapsed(
        13,
        "misalignment robustness",
        10 * 60,
        ab.shift_time,
        ab.dynamic.finite && shifts.iter().all(|r| r.1.is_finite()) && dmax < d0 && dmax >= 0.5 * d0,
        format!(
            "dynamic dice {}; need dice({smax}) < dice(0) and >= 0.5 * dice(0) = {:.3}",
            curve.join(", "),
            0.5 * d0
        ),
    )
}

/// Which checks `run_suite` performs.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Include the training ablation (11 to 13).
    pub ablation: bool,
    pub marginal_chains: usize,
    pub posterior_draws: usize,
    pub smoke_steps: usize,
    pub ablation_config: AblationConfig,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            seed: 20240,
            ablation: true,
            marginal_chains: 20_000,
            posterior_draws: 50_000,
            smoke_steps: 2000,
            ablation_config: AblationConfig::default(),
        }
    }
}

/// Runs every check in order, handing each report to `on_report` as soon as
/// it is available.
pub fn run_suite(opts: &SuiteOptions, mut on_report: impl FnMut(&CheckReport)) -> Result<Vec<CheckReport>> {
    let seed = opts.seed;
    let mut reports = Vec::new();
    let mut push = |r: CheckReport| {
        on_report(&r);
        reports.push(r);
    };
    push(logistic_calibration()?);
    push(endpoint_clamps(seed)?);
    push(forward_marginal_consistency(opts.marginal_chains, seed)?);
    push(mixture_increment_identity(seed)?);
    push(strict_domination()?);
    push(sampler_exactness(seed)?);
    push(oracle_round_trip(seed)?);
    push(vp_reduction(seed)?);
    push(gaussian_posterior(opts.posterior_draws, seed)?);
    push(training_smoke(opts.smoke_steps, seed)?);
    if opts.ablation {
        let ab = run_ablation(&opts.ablation_config, seed)?;
        push(ablation_direction(&ab));
        push(step_efficiency(&ab));
        push(misalignment_robustness(&ab));
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_runs_on_a_tiny_setup() {
        let cfg = AblationConfig {
            size: 16,
            train_pairs: 8,
            test_pairs: 3,
            train: TrainConfig {
                steps: 20,
                ..TrainConfig::default()
            },
            seeds: vec![0, 1],
            t1: 500,
            step_counts: vec![2, 4],
            shifts: vec![0, 1, 3],
        };
        let ab = run_ablation(&cfg, 5).unwrap();
        assert_eq!(ab.reference_steps, 4);
        assert_eq!(ab.linear.by_steps.len(), 2);
        assert!(ab.linear.by_shift.is_empty());
        assert_eq!(ab.dynamic.by_shift.len(), 3);
        assert!(ab.linear.finite && ab.dynamic.finite);
        for r in [ablation_direction(&ab), step_efficiency(&ab), misalignment_robustness(&ab)] {
            assert!(r.line().contains(r.name));
        }
    }

    #[test]
    fn report_line_marks_budget_overrun() {
        let r = CheckReport::from_elapsed(1, "x", 1, Duration::from_secs(2), true, "ok".into());
        assert!(!r.passed);
        assert!(r.line().starts_with("[FAIL]  1 x: ok"));
    }
}
