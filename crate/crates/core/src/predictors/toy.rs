//! Small convolutional data predictor with noise-level preconditioning.
//!
//! The network sees the mixture-inverted state `y = x0 + lambda z`, the source
//! image, `ln lambda` and a sinusoidal embedding of `t / T`. Its raw output `n`
//! is combined as `Phi = c_skip y + c_out n` with
//! `c_skip = s^2 / (s^2 + lambda^2)`, `c_out = lambda s / sqrt(s^2 + lambda^2)`
//! and the first input scaled by `c_in = 1 / sqrt(s^2 + lambda^2)`, where `s`
//! is the assumed data scale.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::field::{ensure_same_shape, shape3, Field};
use crate::mixfield::MixField;
use crate::nn::{Activation, ConvCache, ConvNet};
use crate::predictors::{Predictor, PredictorKind};
use crate::sampler::Coeffs;
use crate::schedules::NoiseSchedule;

pub const TOY_WIDTH: usize = 16;
pub const DEFAULT_SIGMA_DATA: f64 = 0.5;
const TIME_FREQS: [f64; 3] = [1.0, 4.0, 16.0];
const TIME_CHANNELS: usize = 2 * TIME_FREQS.len();
const LOG_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyNet {
    net: ConvNet,
    sigma_data: f64,
}

/// Forward state kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ToyCache {
    conv: ConvCache,
    n: Vec<f64>,
    y: Vec<f64>,
    lambda: Vec<f64>,
}

struct Precond {
    skip: f64,
    out: f64,
    inp: f64,
    d_skip: f64,
    d_out: f64,
    d_inp: f64,
}

fn precond(s: f64, lambda: f64) -> Precond {
    let q = s * s + lambda * lambda;
    let rq = q.sqrt();
    Precond {
        skip: s * s / q,
        out: lambda * s / rq,
        inp: 1.0 / rq,
        d_skip: -2.0 * lambda * s * s / (q * q),
        d_out: s * s * s / (q * rq),
        d_inp: -lambda / (q * rq),
    }
}

impl ToyNet {
    pub fn input_channels(channels: usize) -> usize {
        3 * channels + TIME_CHANNELS
    }

    /// Three 3x3 convolution layers of the given width with SiLU activations.
    pub fn init(seed: u64, channels: usize, width: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = [Self::input_channels(channels), width, width, channels];
        Self {
            net: ConvNet::init(&widths, Activation::Silu, None, 1.0, &mut rng),
            sigma_data: DEFAULT_SIGMA_DATA,
        }
    }

    pub fn from_net(net: ConvNet, sigma_data: f64) -> Result<Self> {
        let c = net.out_channels();
        if net.in_channels() != Self::input_channels(c) {
            return Err(Error::param(
                "toy_net",
                format!("expected {} input channels, got {}", Self::input_channels(c), net.in_channels()),
            ));
        }
        if !(sigma_data > 0.0) {
            return Err(Error::param("sigma_data", "must be positive"));
        }
        Ok(Self { net, sigma_data })
    }

    pub fn net(&self) -> &ConvNet {
        &self.net
    }

    pub fn sigma_data(&self) -> f64 {
        self.sigma_data
    }

    pub fn channels(&self) -> usize {
        self.net.out_channels()
    }

    pub fn params(&self) -> &[f64] {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.net.params_mut()
    }

    fn input(&self, y: &[f64], x_src: &[f64], lambda: &[f64], tau: f64, plane: usize) -> Vec<f64> {
        let n = y.len();
        let mut input = Vec::with_capacity(Self::input_channels(self.channels()) * plane);
        input.extend((0..n).map(|i| precond(self.sigma_data, lambda[i]).inp * y[i]));
        input.extend_from_slice(x_src);
        input.extend(lambda.iter().map(|&l| l.max(LOG_FLOOR).ln() / 4.0));
        for f in TIME_FREQS {
            input.extend(std::iter::repeat_n((PI * f * tau).sin(), plane));
            input.extend(std::iter::repeat_n((PI * f * tau).cos(), plane));
        }
        input
    }

    /// `Phi` from the inverted state, source and per-cell noise level, all in
    /// `C x H x W` row-major order.
    pub fn evaluate(
        &self,
        y: &[f64],
        x_src: &[f64],
        lambda: &[f64],
        tau: f64,
        shape: [usize; 3],
    ) -> (Vec<f64>, ToyCache) {
        let plane = shape[1] * shape[2];
        let input = self.input(y, x_src, lambda, tau, plane);
        let (n, conv) = self.net.forward_cached(&input, shape[1], shape[2]);
        let phi = (0..y.len())
            .map(|i| {
                let p = precond(self.sigma_data, lambda[i]);
                p.skip * y[i] + p.out * n[i]
            })
            .collect();
        (
            phi,
            ToyCache {
                conv,
                n,
                y: y.to_vec(),
                lambda: lambda.to_vec(),
            },
        )
    }

    /// Accumulate parameter gradients for `d loss / d Phi`. When `dy_dlambda`
    /// is supplied, also return `d loss / d lambda` per cell, with `y`
    /// varying with `lambda` at that rate.
    pub fn backward(
        &self,
        cache: &ToyCache,
        grad_phi: &[f64],
        grad_params: &mut [f64],
        dy_dlambda: Option<&[f64]>,
    ) -> Option<Vec<f64>> {
        let n_cells = grad_phi.len();
        let grad_n: Vec<f64> = (0..n_cells)
            .map(|i| grad_phi[i] * precond(self.sigma_data, cache.lambda[i]).out)
            .collect();
        let grad_input = self.net.backward(&cache.conv, &grad_n, grad_params);
        let dy = dy_dlambda?;
        let log_block = 2 * n_cells;
        Some(
            (0..n_cells)
                .map(|i| {
                    let l = cache.lambda[i];
                    let p = precond(self.sigma_data, l);
                    let direct = p.d_skip * cache.y[i] + p.skip * dy[i] + p.d_out * cache.n[i];
                    let via_scaled = grad_input[i] * (p.d_inp * cache.y[i] + p.inp * dy[i]);
                    let via_log = if l > LOG_FLOOR {
                        grad_input[log_block + i] / (4.0 * l)
                    } else {
                        0.0
                    };
                    grad_phi[i] * direct + via_scaled + via_log
                })
                .collect(),
        )
    }
}

/// A trained network bound to the schedule and mixing field it was trained on.
#[derive(Debug, Clone)]
pub struct ToyPredictor {
    net: ToyNet,
    field: MixField,
    schedule: NoiseSchedule,
}

impl ToyPredictor {
    pub fn new(net: ToyNet, field: &MixField, schedule: &NoiseSchedule) -> Result<Self> {
        if field.steps() != schedule.steps() {
            return Err(Error::dims(&[schedule.steps()], &[field.steps()]));
        }
        if field.shape()[0] != net.channels() {
            return Err(Error::dims(&[net.channels()], &[field.shape()[0]]));
        }
        Ok(Self {
            net,
            field: field.clone(),
            schedule: schedule.clone(),
        })
    }

    pub fn net(&self) -> &ToyNet {
        &self.net
    }

    pub fn field(&self) -> &MixField {
        &self.field
    }
}

impl Predictor for ToyPredictor {
    fn predict(&self, x_t: &Field, x_src: &Field, t: f64) -> Result<Field> {
        ensure_same_shape(self.field.at(0), x_t)?;
        ensure_same_shape(self.field.at(0), x_src)?;
        let c = Coeffs::at(&self.schedule, &self.field, t);
        if c.mix.iter().any(|&l| l >= 1.0) {
            return Err(Error::Singularity { t: t.round() as usize });
        }
        let mix = c.mix.as_slice().expect("standard layout");
        let xs = x_src.as_slice().expect("standard layout");
        let xt = x_t.as_slice().expect("standard layout");
        let mut y = Vec::with_capacity(xt.len());
        let mut lambda = Vec::with_capacity(xt.len());
        for i in 0..xt.len() {
            let keep = 1.0 - mix[i];
            y.push((xt[i] / c.sqrt_alpha_bar - mix[i] * xs[i]) / keep);
            lambda.push(c.sigma / (c.sqrt_alpha_bar * keep));
        }
        let tau = t / self.schedule.steps() as f64;
        let (phi, _) = self.net.evaluate(&y, xs, &lambda, tau, shape3(x_t));
        Ok(Field::from_shape_vec(shape3(x_t), phi).expect("same size"))
    }

    fn kind(&self) -> PredictorKind {
        PredictorKind::Trained
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixfield::MixOptions;

    #[test]
    fn same_seed_same_params() {
        assert_eq!(ToyNet::init(4, 1, 8), ToyNet::init(4, 1, 8));
        assert_ne!(ToyNet::init(4, 1, 8), ToyNet::init(5, 1, 8));
    }

    #[test]
    fn zeros_give_finite_output() {
        let sched = NoiseSchedule::linear(20, 1e-3, 5e-2).unwrap();
        let field = MixField::linear(&sched, [2, 5, 4], MixOptions::truncated(10)).unwrap();
        let p = ToyPredictor::new(ToyNet::init(0, 2, TOY_WIDTH), &field, &sched).unwrap();
        for t in [0.0, 3.5, 10.0] {
            let out = p.predict(&Field::zeros((2, 5, 4)), &Field::zeros((2, 5, 4)), t).unwrap();
            assert!(out.iter().all(|v| v.is_finite()));
        }
        assert!(matches!(
            p.predict(&Field::zeros((2, 5, 4)), &Field::zeros((2, 5, 4)), 11.0),
            Err(Error::Singularity { .. })
        ));
    }

    #[test]
    fn preconditioner_derivatives() {
        let s = 0.5;
        for l in [0.01, 0.3, 2.0, 40.0] {
            let h = 1e-6 * l;
            let (a, b) = (precond(s, l + h), precond(s, l - h));
            let p = precond(s, l);
            assert!(((a.skip - b.skip) / (2.0 * h) - p.d_skip).abs() < 1e-6);
            assert!(((a.out - b.out) / (2.0 * h) - p.d_out).abs() < 1e-6);
            assert!(((a.inp - b.inp) / (2.0 * h) - p.d_inp).abs() < 1e-6);
        }
    }

    #[test]
    fn lambda_gradient_matches_finite_differences() {
        let net = ToyNet::init(3, 1, 6);
        let shape = [1, 4, 4];
        let x0: Vec<f64> = (0..16).map(|i| ((i * 7 % 11) as f64 / 5.0) - 1.0).collect();
        let z: Vec<f64> = (0..16).map(|i| ((i * 5 % 13) as f64 / 6.0) - 1.0).collect();
        let src: Vec<f64> = (0..16).map(|i| (i as f64 / 8.0) - 1.0).collect();
        let lam0: Vec<f64> = (0..16).map(|i| 0.2 + 0.05 * i as f64).collect();
        let objective = |lam: &[f64]| -> f64 {
            let y: Vec<f64> = (0..16).map(|i| x0[i] + lam[i] * z[i]).collect();
            let (phi, _) = net.evaluate(&y, &src, lam, 0.4, shape);
            phi.iter().enumerate().map(|(i, p)| (x0[i] - p).powi(2) / lam[i].powi(2)).sum()
        };
        let y: Vec<f64> = (0..16).map(|i| x0[i] + lam0[i] * z[i]).collect();
        let (phi, cache) = net.evaluate(&y, &src, &lam0, 0.4, shape);
        let grad_phi: Vec<f64> = (0..16).map(|i| -2.0 * (x0[i] - phi[i]) / lam0[i].powi(2)).collect();
        let mut gp = vec![0.0; net.params().len()];
        let gl = net.backward(&cache, &grad_phi, &mut gp, Some(&z)).unwrap();
        for i in [0, 5, 10, 15] {
            let direct = -2.0 * (x0[i] - phi[i]).powi(2) / lam0[i].powi(3);
            let mut plus = lam0.clone();
            plus[i] += 1e-6;
            let mut minus = lam0.clone();
            minus[i] -= 1e-6;
            let fd = (objective(&plus) - objective(&minus)) / 2e-6;
            let an = gl[i] + direct;
            assert!((fd - an).abs() < 1e-5 * (1.0 + fd.abs()), "{i}: {fd} vs {an}");
        }
    }
}
