//! Domain-mixture forward process.

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::field::{ensure_same_shape, shape3, standard_normal, Field};
use crate::mixfield::MixField;
use crate::schedules::NoiseSchedule;

/// A paired source/target sample with an optional binary label mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainPair {
    pub x_src: Field,
    pub x_tgt: Field,
    pub mask: Option<Array2<f64>>,
}

impl DomainPair {
    pub fn new(x_src: Field, x_tgt: Field) -> Result<Self> {
        ensure_same_shape(&x_src, &x_tgt)?;
        Ok(Self {
            x_src,
            x_tgt,
            mask: None,
        })
    }

    pub fn with_mask(mut self, mask: Array2<f64>) -> Result<Self> {
        let [_, h, w] = self.shape();
        if mask.dim() != (h, w) {
            return Err(Error::dims(&[h, w], mask.shape()));
        }
        if mask.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::param("mask", "mask must be binary"));
        }
        self.mask = Some(mask);
        Ok(self)
    }

    pub fn shape(&self) -> [usize; 3] {
        shape3(&self.x_src)
    }

    /// Reject values outside `[lo, hi]` in either image.
    pub fn check_range(&self, lo: f64, hi: f64) -> Result<()> {
        let bad = self
            .x_src
            .iter()
            .chain(self.x_tgt.iter())
            .find(|v| !(lo..=hi).contains(*v));
        match bad {
            Some(v) => Err(Error::param("pair", format!("value {v} outside [{lo}, {hi}]"))),
            None => Ok(()),
        }
    }

    /// Per-cell contrast `x_src - x_tgt`.
    pub fn contrast(&self) -> Field {
        &self.x_src - &self.x_tgt
    }
}

/// A noisy state together with the mixture that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureState {
    pub x_t: Field,
    pub t: usize,
    pub d_t: Field,
}

/// `Lambda * x_src + (1 - Lambda) * x_tgt`.
pub fn domain_mixture(lambda: &Field, pair: &DomainPair) -> Result<Field> {
    ensure_same_shape(&pair.x_src, lambda)?;
    let mut d = pair.x_tgt.clone();
    ndarray::Zip::from(&mut d)
        .and(lambda)
        .and(&pair.x_src)
        .for_each(|d, &l, &s| *d = l * s + (1.0 - l) * *d);
    Ok(d)
}

/// `d_t - d_{t-1} = (Lambda_t - Lambda_{t-1}) * (x_src - x_tgt)`.
pub fn mixture_increment(lambda_t: &Field, lambda_prev: &Field, pair: &DomainPair) -> Result<Field> {
    ensure_same_shape(&pair.x_src, lambda_t)?;
    ensure_same_shape(&pair.x_src, lambda_prev)?;
    Ok((lambda_t - lambda_prev) * pair.contrast())
}

fn check_compatible(schedule: &NoiseSchedule, field: &MixField, pair: &DomainPair) -> Result<()> {
    if field.steps() != schedule.steps() {
        return Err(Error::dims(&[schedule.steps()], &[field.steps()]));
    }
    if field.shape() != pair.shape() {
        return Err(Error::dims(&field.shape(), &pair.shape()));
    }
    Ok(())
}

fn check_step(schedule: &NoiseSchedule, t: usize) -> Result<()> {
    if t == 0 || t > schedule.steps() {
        return Err(Error::StepOutOfRange {
            t,
            max: schedule.steps(),
        });
    }
    Ok(())
}

/// Draw `x_t = sqrt(abar_t) d_t + sigma_t z`.
pub fn forward_marginal_sample<R: Rng + ?Sized>(
    schedule: &NoiseSchedule,
    field: &MixField,
    pair: &DomainPair,
    t: usize,
    rng: &mut R,
) -> Result<MixtureState> {
    check_compatible(schedule, field, pair)?;
    check_step(schedule, t)?;
    let d_t = domain_mixture(field.at(t), pair)?;
    let z = standard_normal(pair.shape(), rng);
    let x_t = &d_t * schedule.sqrt_alpha_bar(t) + z * schedule.sigma(t);
    Ok(MixtureState { x_t, t, d_t })
}

/// One transition `x_{t-1} -> x_t` that preserves the marginals.
pub fn markov_step<R: Rng + ?Sized>(
    schedule: &NoiseSchedule,
    field: &MixField,
    pair: &DomainPair,
    x_prev: &Field,
    t: usize,
    rng: &mut R,
) -> Result<Field> {
    check_compatible(schedule, field, pair)?;
    check_step(schedule, t)?;
    ensure_same_shape(&pair.x_src, x_prev)?;
    let rho = schedule.rho(t);
    let inc = mixture_increment(field.at(t), field.at(t - 1), pair)?;
    let z = standard_normal(pair.shape(), rng);
    Ok(x_prev * rho + inc * schedule.sqrt_alpha_bar(t) + z * (1.0 - rho * rho).sqrt())
}

/// Start of the reverse chain once the field has saturated:
/// `x_{t1} = sqrt(abar_{t1}) x_src + sigma_{t1} z`.
pub fn truncated_init<R: Rng + ?Sized>(
    schedule: &NoiseSchedule,
    x_src: &Field,
    t1: usize,
    rng: &mut R,
) -> Result<Field> {
    if t1 < 1 || t1 >= schedule.steps() {
        return Err(Error::param(
            "t1",
            format!("{t1} not in 1..{}", schedule.steps()),
        ));
    }
    Ok(truncated_init_unchecked(schedule, x_src, t1, rng))
}

/// As [`truncated_init`] without the `t1 < T` restriction.
pub(crate) fn truncated_init_unchecked<R: Rng + ?Sized>(
    schedule: &NoiseSchedule,
    x_src: &Field,
    t1: usize,
    rng: &mut R,
) -> Field {
    let z = standard_normal(shape3(x_src), rng);
    x_src * schedule.sqrt_alpha_bar(t1) + z * schedule.sigma(t1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixfield::{MixOptions, ModNetParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pair(shape: [usize; 3], seed: u64) -> DomainPair {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let src = Field::from_shape_simple_fn(shape, || rng.random_range(-1.0..1.0));
        let tgt = Field::from_shape_simple_fn(shape, || rng.random_range(-1.0..1.0));
        DomainPair::new(src, tgt).unwrap()
    }

    #[test]
    fn mixture_examples() {
        let p = DomainPair::new(Field::from_elem((1, 1, 1), 0.8), Field::zeros((1, 1, 1))).unwrap();
        let d = domain_mixture(&Field::from_elem((1, 1, 1), 0.25), &p).unwrap();
        assert!((d[[0, 0, 0]] - 0.2).abs() < 1e-15);
        let q = pair([2, 3, 3], 1);
        assert_eq!(domain_mixture(&Field::zeros((2, 3, 3)), &q).unwrap(), q.x_tgt);
        assert_eq!(domain_mixture(&Field::ones((2, 3, 3)), &q).unwrap(), q.x_src);
        assert!(domain_mixture(&Field::ones((1, 3, 3)), &q).is_err());
    }

    #[test]
    fn increment_examples() {
        let p = DomainPair::new(Field::from_elem((1, 1, 1), 0.5), Field::zeros((1, 1, 1))).unwrap();
        let inc = mixture_increment(&Field::from_elem((1, 1, 1), 0.3), &Field::from_elem((1, 1, 1), 0.2), &p).unwrap();
        assert!((inc[[0, 0, 0]] - 0.05).abs() < 1e-15);
        let same = DomainPair::new(p.x_src.clone(), p.x_src.clone()).unwrap();
        let inc = mixture_increment(&Field::ones((1, 1, 1)), &Field::zeros((1, 1, 1)), &same).unwrap();
        assert_eq!(inc[[0, 0, 0]], 0.0);
    }

    #[test]
    fn increment_identity_for_dynamic_field() {
        let sched = NoiseSchedule::linear(30, 1e-3, 5e-2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = MixField::dynamic(&ModNetParams::random(2, 3.0, &mut rng), &sched, [2, 4, 4], MixOptions::default())
            .unwrap();
        let p = pair([2, 4, 4], 4);
        for t in 1..=30 {
            let direct = domain_mixture(f.at(t), &p).unwrap() - domain_mixture(f.at(t - 1), &p).unwrap();
            let inc = mixture_increment(f.at(t), f.at(t - 1), &p).unwrap();
            assert!(crate::field::max_abs_diff(&direct, &inc) < 1e-12);
        }
    }

    #[test]
    fn marginal_at_end_is_source_scaled() {
        let sched = NoiseSchedule::linear(20, 1e-3, 5e-2).unwrap();
        let f = MixField::linear(&sched, [1, 2, 2], MixOptions::default()).unwrap();
        let p = pair([1, 2, 2], 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = forward_marginal_sample(&sched, &f, &p, 20, &mut rng).unwrap();
        assert_eq!(s.d_t, p.x_src);
        assert!(forward_marginal_sample(&sched, &f, &p, 0, &mut rng).is_err());
        assert!(forward_marginal_sample(&sched, &f, &p, 21, &mut rng).is_err());
    }

    #[test]
    fn markov_mean_telescopes() {
        let sched = NoiseSchedule::linear(20, 1e-3, 5e-2).unwrap();
        let f = MixField::linear(&sched, [1, 2, 2], MixOptions::default()).unwrap();
        let p = pair([1, 2, 2], 2);
        let t = 7;
        let prev_mean = domain_mixture(f.at(t - 1), &p).unwrap() * sched.sqrt_alpha_bar(t - 1);
        let inc = mixture_increment(f.at(t), f.at(t - 1), &p).unwrap();
        let mean = &prev_mean * sched.rho(t) + inc * sched.sqrt_alpha_bar(t);
        let expected = domain_mixture(f.at(t), &p).unwrap() * sched.sqrt_alpha_bar(t);
        assert!(crate::field::max_abs_diff(&mean, &expected) < 1e-14);
    }

    #[test]
    fn truncated_init_range() {
        let sched = NoiseSchedule::linear(20, 1e-3, 5e-2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Field::zeros((1, 2, 2));
        assert!(truncated_init(&sched, &x, 0, &mut rng).is_err());
        assert!(truncated_init(&sched, &x, 20, &mut rng).is_err());
        assert!(truncated_init(&sched, &x, 19, &mut rng).is_ok());
    }

    #[test]
    fn mask_validation() {
        let p = pair([1, 2, 3], 0);
        assert!(p.clone().with_mask(Array2::zeros((2, 3))).is_ok());
        assert!(p.clone().with_mask(Array2::zeros((3, 2))).is_err());
        assert!(p.with_mask(Array2::from_elem((2, 3), 0.5)).is_err());
    }
}
