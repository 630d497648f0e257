//! Data-prediction models `Phi(x_t, x_src, t) -> x0`.

mod toy;
mod train;

pub use toy::{ToyNet, ToyPredictor, TOY_WIDTH};
pub use train::{
    batch_loss_and_grad, draw_batch, moving_average, train_score_matching, training_steps, Draw, Mixer, TrainConfig,
    TrainOutput,
};

use crate::error::{Error, Result};
use crate::field::{ensure_same_shape, Field};
use crate::forward::DomainPair;
use crate::mixfield::MixField;
use crate::sampler::Coeffs;
use crate::schedules::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictorKind {
    OraclePair,
    GaussianPosterior,
    Trained,
}

/// A map from a noisy state to an estimate of the clean target image.
///
/// `t` is a step index; fractional values are used by quadrature and the
/// reference integrator.
pub trait Predictor: Sync {
    fn predict(&self, x_t: &Field, x_src: &Field, t: f64) -> Result<Field>;

    fn kind(&self) -> PredictorKind;
}

/// Returns the true target regardless of its inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct OraclePair {
    x_tgt: Field,
}

pub fn oracle_pair_predictor(pair: &DomainPair) -> OraclePair {
    OraclePair {
        x_tgt: pair.x_tgt.clone(),
    }
}

impl Predictor for OraclePair {
    fn predict(&self, x_t: &Field, _x_src: &Field, _t: f64) -> Result<Field> {
        ensure_same_shape(&self.x_tgt, x_t)?;
        Ok(self.x_tgt.clone())
    }

    fn kind(&self) -> PredictorKind {
        PredictorKind::OraclePair
    }
}

/// Posterior mean of `x0` under the mixture marginal with an independent
/// per-cell prior `x0 ~ N(mu0, tau2)`.
#[derive(Debug, Clone)]
pub struct GaussianPosterior {
    mu0: Field,
    tau2: f64,
    field: MixField,
    schedule: NoiseSchedule,
}

pub fn gaussian_posterior_predictor(
    mu0: Field,
    tau2: f64,
    field: &MixField,
    schedule: &NoiseSchedule,
) -> Result<GaussianPosterior> {
    if !(tau2 > 0.0 && tau2.is_finite()) {
        return Err(Error::param("tau2", format!("{tau2} must be positive")));
    }
    ensure_same_shape(field.at(0), &mu0)?;
    if field.steps() != schedule.steps() {
        return Err(Error::dims(&[schedule.steps()], &[field.steps()]));
    }
    Ok(GaussianPosterior {
        mu0,
        tau2,
        field: field.clone(),
        schedule: schedule.clone(),
    })
}

impl GaussianPosterior {
    /// Per-cell regression gain `k` at step `t`.
    pub fn gain(&self, t: f64) -> Field {
        let c = Coeffs::at(&self.schedule, &self.field, t);
        let sab = c.sqrt_alpha_bar;
        let s2 = c.sigma * c.sigma;
        c.mix.mapv(|l| {
            let a = sab * (1.0 - l);
            a * self.tau2 / (a * a * self.tau2 + s2)
        })
    }
}

impl Predictor for GaussianPosterior {
    fn predict(&self, x_t: &Field, x_src: &Field, t: f64) -> Result<Field> {
        ensure_same_shape(&self.mu0, x_t)?;
        ensure_same_shape(&self.mu0, x_src)?;
        let c = Coeffs::at(&self.schedule, &self.field, t);
        let k = self.gain(t);
        let mut out = self.mu0.clone();
        ndarray::Zip::from(&mut out)
            .and(x_t)
            .and(x_src)
            .and(&c.mix)
            .and(&k)
            .for_each(|o, &x, &s, &l, &k| {
                let mean = c.sqrt_alpha_bar * (l * s + (1.0 - l) * *o);
                *o += k * (x - mean);
            });
        Ok(out)
    }

    fn kind(&self) -> PredictorKind {
        PredictorKind::GaussianPosterior
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixfield::MixOptions;

    #[test]
    fn oracle_ignores_inputs() {
        let pair = DomainPair::new(Field::from_elem((1, 2, 2), 0.3), Field::from_elem((1, 2, 2), -0.4)).unwrap();
        let p = oracle_pair_predictor(&pair);
        let out = p.predict(&Field::zeros((1, 2, 2)), &pair.x_src, 17.0).unwrap();
        assert_eq!(out, pair.x_tgt);
        assert!(p.predict(&Field::zeros((1, 3, 2)), &pair.x_src, 1.0).is_err());
    }

    #[test]
    fn posterior_limits() {
        let sched = NoiseSchedule::linear(20, 1e-3, 5e-2).unwrap();
        let field = MixField::linear(&sched, [1, 1, 1], MixOptions::default()).unwrap();
        let mu0 = Field::from_elem((1, 1, 1), 0.2);
        let x_src = Field::from_elem((1, 1, 1), 0.7);
        let x_t = Field::from_elem((1, 1, 1), -0.3);
        let tight = gaussian_posterior_predictor(mu0.clone(), 1e-14, &field, &sched).unwrap();
        assert!((tight.predict(&x_t, &x_src, 10.0).unwrap()[[0, 0, 0]] - 0.2).abs() < 1e-10);

        // Noiseless limit: exact inversion of the mixture.
        let sched = NoiseSchedule::from_betas(&[1e-14, 1e-14, 0.5]).unwrap();
        let field = MixField::linear(&sched, [1, 1, 1], MixOptions::default()).unwrap();
        let p = gaussian_posterior_predictor(mu0, 1.0, &field, &sched).unwrap();
        let l = field.at(1)[[0, 0, 0]];
        let x0 = -0.6;
        let x = sched.sqrt_alpha_bar(1) * (l * 0.7 + (1.0 - l) * x0);
        let pred = p.predict(&Field::from_elem((1, 1, 1), x), &x_src, 1.0).unwrap();
        assert!((pred[[0, 0, 0]] - x0).abs() < 1e-6);
        assert!(gaussian_posterior_predictor(Field::zeros((1, 1, 1)), 0.0, &field, &sched).is_err());
    }
}
