//! Variance-preserving noise schedules and sampler time grids.
//!
//! Steps are indexed `0..=T`. Index 0 is the clean state (`alpha_bar = 1`,
//! `sigma = 0`); the per-step rates `beta_t` are defined for `t = 1..=T`.
//! Continuous time `tau` in `[0, 1]` maps to the fractional index `tau * T`,
//! with `alpha_bar` interpolated log-linearly between grid points so that the
//! drift rate `f` is piecewise constant.

use std::io::Write;

use crate::error::{Error, Result};

/// Default step count of the diffusion horizon.
pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_MIN: f64 = 1e-4;
pub const DEFAULT_BETA_MAX: f64 = 2e-2;

/// Tolerance below which a negative `g^2` is treated as round-off.
const G2_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
    rho: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear ramp `beta_t` from `beta_min` at `t = 1` to `beta_max` at `t = T`.
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::param("T", format!("need at least 2 steps, got {steps}")));
        }
        if !(beta_min > 0.0 && beta_min < 1.0) {
            return Err(Error::param("beta_min", format!("{beta_min} not in (0, 1)")));
        }
        if !(beta_max >= beta_min && beta_max < 1.0) {
            return Err(Error::param(
                "beta_max",
                format!("{beta_max} not in [beta_min, 1)"),
            ));
        }
        let span = (steps - 1) as f64;
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_min + (beta_max - beta_min) * i as f64 / span)
            .collect();
        Self::from_betas(&betas)
    }

    /// Build from explicit per-step rates `beta_1..=beta_T`.
    pub fn from_betas(betas: &[f64]) -> Result<Self> {
        if betas.len() < 2 {
            return Err(Error::param(
                "T",
                format!("need at least 2 steps, got {}", betas.len()),
            ));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::param("beta", format!("{b} not in (0, 1)")));
        }
        let n = betas.len() + 1;
        let mut beta = Vec::with_capacity(n);
        let mut alpha = Vec::with_capacity(n);
        let mut alpha_bar = Vec::with_capacity(n);
        let mut sigma = Vec::with_capacity(n);
        let mut rho = Vec::with_capacity(n);
        beta.push(0.0);
        alpha.push(1.0);
        alpha_bar.push(1.0);
        sigma.push(0.0);
        rho.push(1.0);
        let mut acc = 1.0;
        for &b in betas {
            let a = 1.0 - b;
            let prev = acc;
            acc *= a;
            beta.push(b);
            alpha.push(a);
            alpha_bar.push(acc);
            sigma.push((1.0 - acc).sqrt());
            rho.push((acc / prev).sqrt());
        }
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
            sigma,
            rho,
        })
    }

    /// Linear schedule with the default horizon and rates.
    pub fn default_vp() -> Self {
        Self::linear(DEFAULT_STEPS, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX)
            .expect("default schedule parameters are valid")
    }

    /// The horizon `T`.
    pub fn steps(&self) -> usize {
        self.beta.len() - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn sqrt_alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t].sqrt()
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    /// `rho_t = sqrt(alpha_bar_t / alpha_bar_{t-1})`; equals 1 at `t = 0`.
    pub fn rho(&self, t: usize) -> f64 {
        self.rho[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Index of the interpolation segment `(k, k+1]` that contains the
    /// fractional index `u`.
    fn segment(&self, u: f64) -> usize {
        let k = u.ceil() as isize - 1;
        k.clamp(0, self.steps() as isize - 1) as usize
    }

    /// `alpha_bar` at a fractional step index, log-linear between grid points.
    pub fn alpha_bar_at(&self, u: f64) -> f64 {
        let k = self.segment(u);
        (self.alpha_bar[k].ln() + (u - k as f64) * self.alpha[k + 1].ln()).exp()
    }

    pub fn sigma_at(&self, u: f64) -> f64 {
        (1.0 - self.alpha_bar_at(u)).max(0.0).sqrt()
    }

    /// Drift and diffusion rates `(f, g)` of the continuous forward SDE at
    /// continuous time `tau` in `[0, 1]`.
    pub fn continuous_coefficients(&self, tau: f64) -> Result<(f64, f64)> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::param("t", format!("{tau} not in [0, 1]")));
        }
        let horizon = self.steps() as f64;
        let u = tau * horizon;
        let k = self.segment(u);
        // d/dtau ln alpha_bar is constant on the segment.
        let dln_alpha_bar = horizon * self.alpha[k + 1].ln();
        let f = 0.5 * dln_alpha_bar;
        let alpha_bar = self.alpha_bar_at(u);
        let sigma2 = 1.0 - alpha_bar;
        let dsigma2 = -alpha_bar * dln_alpha_bar;
        let g2 = dsigma2 - 2.0 * sigma2 * f;
        if g2 < -G2_TOLERANCE {
            return Err(Error::ScheduleInconsistency { t: tau, g2 });
        }
        Ok((f, g2.max(0.0).sqrt()))
    }

    /// Write `t,beta,alpha_bar,sigma` rows for every grid index.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t", "beta", "alpha_bar", "sigma"])?;
        for t in 0..=self.steps() {
            w.write_record(&[
                t.to_string(),
                format!("{:e}", self.beta[t]),
                format!("{:e}", self.alpha_bar[t]),
                format!("{:e}", self.sigma[t]),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Descending step indices visited by the sampler, from `t1` down to 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimeGrid {
    indices: Vec<usize>,
    t1: usize,
}

impl TimeGrid {
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn t1(&self) -> usize {
        self.t1
    }

    /// Successive `(s, t)` pairs with `s > t`.
    pub fn steps(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.indices.windows(2).map(|w| (w[0], w[1]))
    }
}

/// `n + 1` indices spaced uniformly in index space from `t1` to 0.
pub fn make_spaced_grid(schedule: &NoiseSchedule, n: usize, t1: usize) -> Result<TimeGrid> {
    if t1 == 0 || t1 >= schedule.steps() {
        return Err(Error::InfeasibleGrid(format!(
            "truncation index {t1} must lie in 1..{}",
            schedule.steps()
        )));
    }
    if n == 0 {
        return Err(Error::InfeasibleGrid("need at least one step".into()));
    }
    if n > t1 {
        return Err(Error::InfeasibleGrid(format!(
            "{n} steps do not fit below t1 = {t1}"
        )));
    }
    let indices = (0..=n)
        .map(|k| (t1 * (n - k) + n / 2) / n)
        .collect::<Vec<_>>();
    Ok(TimeGrid { indices, t1 })
}
