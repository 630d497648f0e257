//! Joint score-matching training of the toy predictor and mixing field.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{standard_normal, Field};
use crate::forward::DomainPair;
use crate::mixfield::{position_encoding, ChannelPolyParams, MixField, MixOptions, ModNetParams, Squash};
use crate::predictors::toy::ToyNet;
use crate::schedules::NoiseSchedule;

/// Source of the mixing field during training.
#[derive(Debug, Clone, PartialEq)]
pub enum Mixer {
    /// A fixed field; only the predictor is trained.
    Fixed(MixField),
    ChannelPoly { params: ChannelPolyParams, opts: MixOptions },
    Dynamic { params: ModNetParams, opts: MixOptions },
}

impl Mixer {
    pub fn build(&self, schedule: &NoiseSchedule, shape: [usize; 3]) -> Result<MixField> {
        match self {
            Mixer::Fixed(f) => {
                if f.shape() != shape {
                    return Err(Error::dims(&shape, &f.shape()));
                }
                Ok(f.clone())
            }
            Mixer::ChannelPoly { params, opts } => MixField::channel_poly(params, schedule, shape, *opts),
            Mixer::Dynamic { params, opts } => MixField::dynamic(params, schedule, shape, *opts),
        }
    }

    fn horizon(&self, schedule: &NoiseSchedule) -> usize {
        match self {
            Mixer::Fixed(f) => f.horizon(),
            Mixer::ChannelPoly { opts, .. } | Mixer::Dynamic { opts, .. } => {
                opts.horizon.unwrap_or(schedule.steps())
            }
        }
    }

    fn eps(&self) -> f64 {
        match self {
            Mixer::Fixed(f) => f.eps(),
            Mixer::ChannelPoly { opts, .. } | Mixer::Dynamic { opts, .. } => opts.eps,
        }
    }

    fn params(&self) -> &[f64] {
        match self {
            Mixer::Fixed(_) => &[],
            Mixer::ChannelPoly { params, .. } => params.coeffs().as_slice().expect("standard layout"),
            Mixer::Dynamic { params, .. } => params.params(),
        }
    }

    fn params_mut(&mut self) -> &mut [f64] {
        match self {
            Mixer::Fixed(_) => &mut [],
            Mixer::ChannelPoly { params, .. } => params.coeffs_mut().as_slice_mut().expect("standard layout"),
            Mixer::Dynamic { params, .. } => params.params_mut(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub mixer_lr_mult: f64,
    pub batch: usize,
    pub seed: u64,
    pub momentum: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 3e-2,
            mixer_lr_mult: 10.0,
            batch: 4,
            seed: 0,
            momentum: 0.9,
            clip_norm: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::param("train_steps", "need at least one step"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::param("lr", format!("{} must be positive", self.lr)));
        }
        if !(self.mixer_lr_mult >= 0.0) {
            return Err(Error::param("mixer_lr_mult", "must be non-negative"));
        }
        if self.batch < 1 {
            return Err(Error::param("batch", "need at least one sample per step"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::param("momentum", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub net: ToyNet,
    pub mixer: Mixer,
    pub losses: Vec<f64>,
}

/// One training example: which pair, which step, which noise.
#[derive(Debug, Clone)]
pub struct Draw {
    pub index: usize,
    pub t: usize,
    pub z: Field,
}

/// Steps eligible for training: `Lambda_t < 1` and `sigma_t > 0`.
pub fn training_steps(schedule: &NoiseSchedule, horizon: usize) -> std::ops::RangeInclusive<usize> {
    let last = if horizon < schedule.steps() {
        horizon
    } else {
        schedule.steps() - 1
    };
    1..=last
}

struct SampleGrad {
    loss: f64,
    net: Vec<f64>,
    mixer: Vec<f64>,
}

/// Loss and gradients for a batch. The loss is the per-element mean of
/// `(eps_hat - eps)^2`, which equals `((x0 - Phi) / lambda)^2`.
pub fn batch_loss_and_grad(
    net: &ToyNet,
    mixer: &Mixer,
    schedule: &NoiseSchedule,
    dataset: &[DomainPair],
    draws: &[Draw],
    want_mixer: bool,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let shape = dataset[0].shape();
    let horizon = mixer.horizon(schedule);
    let squash = Squash::new(mixer.eps())?;
    let posenc = position_encoding(shape[1], shape[2]);
    let scale = 1.0 / (draws.len() as f64 * (shape[0] * shape[1] * shape[2]) as f64);
    let n_mixer = mixer.params().len();
    let want_mixer = want_mixer && n_mixer > 0;

    let per_sample: Vec<Result<SampleGrad>> = draws
        .par_iter()
        .map(|draw| {
            let pair = &dataset[draw.index];
            let t = draw.t;
            let lam_lin = t as f64 / horizon as f64;
            let mut dyn_slice = None;
            let mix: Field = match mixer {
                Mixer::Fixed(f) => f.at(t).clone(),
                Mixer::ChannelPoly { params, .. } => {
                    let mut m = Array3::zeros(shape);
                    for (c, mut plane) in m.outer_iter_mut().enumerate() {
                        plane.fill(params.value(c, lam_lin, &squash));
                    }
                    m
                }
                Mixer::Dynamic { params, .. } => {
                    let s = params.slice(lam_lin, &posenc, &squash)?;
                    let m = s.lambda.clone();
                    dyn_slice = Some(s);
                    m
                }
            };
            let sab = schedule.sqrt_alpha_bar(t);
            let sigma = schedule.sigma(t);
            let x0 = pair.x_tgt.as_slice().expect("standard layout");
            let z = draw.z.as_slice().expect("standard layout");
            let m = mix.as_slice().expect("standard layout");
            let lambda: Vec<f64> = m.iter().map(|&l| sigma / (sab * (1.0 - l))).collect();
            let y: Vec<f64> = (0..x0.len()).map(|i| x0[i] + lambda[i] * z[i]).collect();
            let tau = t as f64 / schedule.steps() as f64;
            let (phi, cache) = net.evaluate(&y, pair.x_src.as_slice().expect("standard layout"), &lambda, tau, shape);
            let mut loss = 0.0;
            let mut grad_phi = vec![0.0; x0.len()];
            for i in 0..x0.len() {
                let r = (x0[i] - phi[i]) / lambda[i];
                loss += r * r;
                grad_phi[i] = -2.0 * r / lambda[i] * scale;
            }
            let mut g_net = vec![0.0; net.params().len()];
            let g_lambda = net.backward(&cache, &grad_phi, &mut g_net, want_mixer.then_some(z));
            let mut g_mixer = Vec::new();
            if let Some(gl) = g_lambda {
                // d loss / d Lambda through lambda = sigma / (sqrt(abar) (1 - Lambda)).
                let grad_mix: Vec<f64> = (0..x0.len())
                    .map(|i| {
                        let r = (x0[i] - phi[i]) / lambda[i];
                        let direct = -2.0 * r * r / lambda[i] * scale;
                        (gl[i] + direct) * lambda[i] / (1.0 - m[i])
                    })
                    .collect();
                g_mixer = vec![0.0; n_mixer];
                match mixer {
                    Mixer::Fixed(_) => {}
                    Mixer::ChannelPoly { params, .. } => {
                        let plane = shape[1] * shape[2];
                        let degree = params.degree();
                        for c in 0..shape[0] {
                            let total: f64 = grad_mix[c * plane..(c + 1) * plane].iter().sum();
                            for (i, g) in params.value_grad(c, lam_lin, &squash).into_iter().enumerate() {
                                g_mixer[c * (degree + 1) + i] += total * g;
                            }
                        }
                    }
                    Mixer::Dynamic { params, .. } => {
                        let slice = dyn_slice.as_ref().expect("dynamic slice computed");
                        let gm = Field::from_shape_vec(shape, grad_mix).expect("same size");
                        params.backprop_slice(slice, &gm, &squash, &mut g_mixer);
                    }
                }
            }
            Ok(SampleGrad {
                loss: loss * scale,
                net: g_net,
                mixer: g_mixer,
            })
        })
        .collect();

    let mut loss = 0.0;
    let mut g_net = vec![0.0; net.params().len()];
    let mut g_mixer = vec![0.0; if want_mixer { n_mixer } else { 0 }];
    for s in per_sample {
        let s = s?;
        loss += s.loss;
        for (a, b) in g_net.iter_mut().zip(&s.net) {
            *a += b;
        }
        for (a, b) in g_mixer.iter_mut().zip(&s.mixer) {
            *a += b;
        }
    }
    Ok((loss, g_net, g_mixer))
}

/// Draw a batch: pair indices, steps and noise, in a fixed order.
pub fn draw_batch<R: Rng + ?Sized>(
    dataset: &[DomainPair],
    schedule: &NoiseSchedule,
    horizon: usize,
    batch: usize,
    rng: &mut R,
) -> Vec<Draw> {
    let steps = training_steps(schedule, horizon);
    (0..batch)
        .map(|_| {
            let index = rng.random_range(0..dataset.len());
            let t = rng.random_range(steps.clone());
            let z = standard_normal(dataset[index].shape(), rng);
            Draw { index, t, z }
        })
        .collect()
}

fn check_dataset(dataset: &[DomainPair], net: &ToyNet) -> Result<[usize; 3]> {
    let first = dataset
        .first()
        .ok_or_else(|| Error::param("dataset", "training needs at least one pair"))?;
    let shape = first.shape();
    if let Some(bad) = dataset.iter().find(|p| p.shape() != shape) {
        return Err(Error::dims(&shape, &bad.shape()));
    }
    if shape[0] != net.channels() {
        return Err(Error::dims(&[net.channels()], &[shape[0]]));
    }
    Ok(shape)
}

/// Momentum SGD on the per-element noise-prediction error, updating the
/// mixer (when trainable) at `lr * mixer_lr_mult`.
pub fn train_score_matching(
    dataset: &[DomainPair],
    net: ToyNet,
    mixer: Mixer,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let shape = check_dataset(dataset, &net)?;
    if let Mixer::Fixed(f) = &mixer {
        if f.shape() != shape || f.steps() != schedule.steps() {
            return Err(Error::dims(&shape, &f.shape()));
        }
    }
    let horizon = mixer.horizon(schedule);
    let mut net = net;
    let mut mixer = mixer;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut vel_net = vec![0.0; net.params().len()];
    let mut vel_mix = vec![0.0; mixer.params().len()];
    let train_mixer = !vel_mix.is_empty() && cfg.mixer_lr_mult > 0.0;
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let draws = draw_batch(dataset, schedule, horizon, cfg.batch, &mut rng);
        let (loss, mut g_net, mut g_mix) = batch_loss_and_grad(&net, &mixer, schedule, dataset, &draws, train_mixer)?;
        let grads_finite = g_net.iter().chain(&g_mix).all(|g| g.is_finite());
        if !loss.is_finite() || !grads_finite {
            return Err(Error::NonFiniteLoss {
                step,
                t: draws[0].t,
                loss,
            });
        }
        if cfg.clip_norm > 0.0 {
            let norm = g_net.iter().chain(&g_mix).map(|g| g * g).sum::<f64>().sqrt();
            if norm > cfg.clip_norm {
                let k = cfg.clip_norm / norm;
                g_net.iter_mut().chain(g_mix.iter_mut()).for_each(|g| *g *= k);
            }
        }
        for ((p, v), g) in net.params_mut().iter_mut().zip(&mut vel_net).zip(&g_net) {
            *v = cfg.momentum * *v + g;
            *p -= cfg.lr * *v;
        }
        if train_mixer {
            let lr = cfg.lr * cfg.mixer_lr_mult;
            for ((p, v), g) in mixer.params_mut().iter_mut().zip(&mut vel_mix).zip(&g_mix) {
                *v = cfg.momentum * *v + g;
                *p -= lr * *v;
            }
        }
        losses.push(loss);
    }
    Ok(TrainOutput { net, mixer, losses })
}

/// Trailing moving average over at most `window` values.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, &v) in values.iter().enumerate() {
        sum += v;
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixfield::MixOptions;

    fn tiny_dataset(n: usize, shape: [usize; 3], seed: u64) -> Vec<DomainPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let s = Field::from_shape_simple_fn(shape, || rng.random_range(-1.0..1.0));
                let t = s.mapv(|v: f64| -v);
                DomainPair::new(s, t).unwrap()
            })
            .collect()
    }

    #[test]
    fn moving_average_examples() {
        assert_eq!(moving_average(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
    }

    #[test]
    fn training_is_reproducible() {
        let sched = NoiseSchedule::linear(50, 1e-3, 5e-2).unwrap();
        let data = tiny_dataset(6, [1, 6, 6], 1);
        let mixer = Mixer::Dynamic {
            params: ModNetParams::init(1, &mut ChaCha8Rng::seed_from_u64(2)),
            opts: MixOptions::truncated(30),
        };
        let cfg = TrainConfig {
            steps: 15,
            ..TrainConfig::default()
        };
        let a = train_score_matching(&data, ToyNet::init(1, 1, 6), mixer.clone(), &sched, &cfg).unwrap();
        let b = train_score_matching(&data, ToyNet::init(1, 1, 6), mixer, &sched, &cfg).unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.net, b.net);
        assert_eq!(a.mixer, b.mixer);
        assert!(a.losses.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn mixer_gradient_matches_finite_differences() {
        let sched = NoiseSchedule::linear(40, 1e-3, 5e-2).unwrap();
        let data = tiny_dataset(3, [1, 5, 5], 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mixers = [
            Mixer::Dynamic {
                params: ModNetParams::random(1, 0.5, &mut rng),
                opts: MixOptions::truncated(30),
            },
            Mixer::ChannelPoly {
                params: ChannelPolyParams::from_coeffs(
                    ndarray::Array2::from_shape_vec((1, 4), vec![0.05, 0.8, 0.1, -0.05]).unwrap(),
                )
                .unwrap(),
                opts: MixOptions::default(),
            },
        ];
        let net = ToyNet::init(2, 1, 4);
        for mixer in mixers {
            let draws = draw_batch(&data, &sched, mixer.horizon(&sched), 3, &mut rng);
            let (_, _, g) = batch_loss_and_grad(&net, &mixer, &sched, &data, &draws, true).unwrap();
            let n = g.len();
            for idx in [0, n / 3, n / 2, n - 1] {
                let mut plus = mixer.clone();
                plus.params_mut()[idx] += 1e-6;
                let mut minus = mixer.clone();
                minus.params_mut()[idx] -= 1e-6;
                let lp = batch_loss_and_grad(&net, &plus, &sched, &data, &draws, false).unwrap().0;
                let lm = batch_loss_and_grad(&net, &minus, &sched, &data, &draws, false).unwrap().0;
                let fd = (lp - lm) / 2e-6;
                assert!((fd - g[idx]).abs() < 1e-4 * (1.0 + fd.abs()), "{idx}: {fd} vs {}", g[idx]);
            }
        }
    }

    #[test]
    fn training_steps_exclude_singular_indices() {
        let sched = NoiseSchedule::linear(50, 1e-3, 5e-2).unwrap();
        assert_eq!(training_steps(&sched, 50), 1..=49);
        assert_eq!(training_steps(&sched, 25), 1..=25);
    }

    #[test]
    fn rejects_bad_config() {
        let sched = NoiseSchedule::linear(10, 1e-3, 5e-2).unwrap();
        let field = MixField::linear(&sched, [1, 3, 3], MixOptions::default()).unwrap();
        let data = tiny_dataset(2, [1, 3, 3], 0);
        let cfg = TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        };
        assert!(train_score_matching(&data, ToyNet::init(0, 1, 4), Mixer::Fixed(field.clone()), &sched, &cfg).is_err());
        assert!(train_score_matching(&[], ToyNet::init(0, 1, 4), Mixer::Fixed(field), &sched, &TrainConfig::default())
            .is_err());
    }
}
