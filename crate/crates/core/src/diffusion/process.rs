use ndarray::{Array2, ArrayView2, Zip};

use super::schedule::BetaSchedule;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `N` boxes in signal space at diffusion step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxState<T> {
    pub boxes: Array2<T>,
    pub t: usize,
}

impl<T: Scalar> BoxState<T> {
    pub fn new(boxes: Array2<T>, t: usize) -> Result<Self> {
        if boxes.ncols() != 4 {
            return Err(Error::arg(format!("box state needs 4 columns, got {}", boxes.ncols())));
        }
        if boxes.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("box state has non-finite coordinates"));
        }
        Ok(Self { boxes, t })
    }

    pub fn len(&self) -> usize {
        self.boxes.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.nrows() == 0
    }
}

fn check_shape<T>(a: &ArrayView2<T>, b: &ArrayView2<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        Err(Error::arg(format!(
            "{what} shape {:?} does not match boxes {:?}",
            b.shape(),
            a.shape()
        )))
    } else {
        Ok(())
    }
}

fn check_forward_step<T: Scalar>(schedule: &BetaSchedule<T>, t: usize) -> Result<()> {
    if t < 1 || t > schedule.steps() {
        Err(Error::arg(format!("timestep {t} outside 1..={}", schedule.steps())))
    } else {
        Ok(())
    }
}

/// Closed-form corruption `x_t = sqrt(ᾱ_t)·x_0 + sqrt(1-ᾱ_t)·n`.
pub fn corrupt<T: Scalar>(
    x0: &BoxState<T>,
    t: usize,
    noise: ArrayView2<T>,
    schedule: &BetaSchedule<T>,
) -> Result<BoxState<T>> {
    check_forward_step(schedule, t)?;
    check_shape(&x0.boxes.view(), &noise, "noise")?;
    let ab = schedule.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (T::one() - ab).sqrt());
    let boxes = Zip::from(&x0.boxes).and(&noise).map_collect(|&x, &n| a * x + b * n);
    Ok(BoxState { boxes, t })
}

/// One Markov step `x_t = sqrt(1-β_t)·x_{t-1} + sqrt(β_t)·n`.
pub fn single_step_diffuse<T: Scalar>(
    x_prev: &BoxState<T>,
    t: usize,
    noise: ArrayView2<T>,
    schedule: &BetaSchedule<T>,
) -> Result<BoxState<T>> {
    check_forward_step(schedule, t)?;
    if x_prev.t + 1 != t {
        return Err(Error::arg(format!(
            "state is at step {}, cannot advance to {t}",
            x_prev.t
        )));
    }
    check_shape(&x_prev.boxes.view(), &noise, "noise")?;
    let beta = schedule.beta(t)?;
    let (a, b) = ((T::one() - beta).sqrt(), beta.sqrt());
    let boxes = Zip::from(&x_prev.boxes).and(&noise).map_collect(|&x, &n| a * x + b * n);
    Ok(BoxState { boxes, t })
}

/// Inverts the closed form for `x_0` given a noise estimate.
pub fn predict_x0_from_noise<T: Scalar>(
    x_t: &BoxState<T>,
    eps_hat: ArrayView2<T>,
    t: usize,
    schedule: &BetaSchedule<T>,
) -> Result<Array2<T>> {
    check_forward_step(schedule, t)?;
    check_shape(&x_t.boxes.view(), &eps_hat, "noise estimate")?;
    let ab = schedule.alpha_bar(t)?;
    if ab < T::lit(1e-20) {
        return Err(Error::Numerical(format!("alpha_bar({t}) = {ab} too small to invert")));
    }
    let (a, b) = (ab.sqrt(), (T::one() - ab).sqrt());
    Ok(Zip::from(&x_t.boxes)
        .and(&eps_hat)
        .map_collect(|&x, &e| (x - b * e) / a))
}

/// Noise implied by a clean estimate: `ε = (x_t - sqrt(ᾱ_t)·x̂_0) / sqrt(1-ᾱ_t)`.
pub fn predict_noise_from_x0<T: Scalar>(
    x_t: &BoxState<T>,
    x0_hat: ArrayView2<T>,
    t: usize,
    schedule: &BetaSchedule<T>,
) -> Result<Array2<T>> {
    check_forward_step(schedule, t)?;
    check_shape(&x_t.boxes.view(), &x0_hat, "x0 estimate")?;
    let ab = schedule.alpha_bar(t)?;
    let denom = (T::one() - ab).sqrt();
    if denom <= T::zero() {
        return Err(Error::Numerical(format!("1 - alpha_bar({t}) is zero")));
    }
    let a = ab.sqrt();
    Ok(Zip::from(&x_t.boxes)
        .and(&x0_hat)
        .map_collect(|&x, &x0| (x - a * x0) / denom))
}

/// Skip-step reverse update from `t` to `t_prev`.
///
/// With `eta = 0` the update is deterministic and `noise` may be `None`; for `eta > 0`
/// a standard-normal `noise` of the box shape is required.
pub fn ddim_step<T: Scalar>(
    x_t: &BoxState<T>,
    x0_hat: ArrayView2<T>,
    t_prev: usize,
    schedule: &BetaSchedule<T>,
    eta: T,
    noise: Option<ArrayView2<T>>,
) -> Result<BoxState<T>> {
    let t = x_t.t;
    if t_prev >= t {
        return Err(Error::arg(format!("t_prev {t_prev} must be below t {t}")));
    }
    if !(eta >= T::zero() && eta <= T::one()) {
        return Err(Error::arg(format!("eta {eta} outside [0, 1]")));
    }
    let eps = predict_noise_from_x0(x_t, x0_hat, t, schedule)?;
    let ab_t = schedule.alpha_bar(t)?;
    let ab_prev = schedule.alpha_bar(t_prev)?;
    let sigma =
        eta * ((T::one() - ab_prev) / (T::one() - ab_t)).sqrt() * (T::one() - ab_t / ab_prev).max(T::zero()).sqrt();
    let c = (T::one() - ab_prev - sigma * sigma).max(T::zero()).sqrt();
    let a = ab_prev.sqrt();
    let mut boxes = Zip::from(&x0_hat).and(&eps).map_collect(|&x0, &e| a * x0 + c * e);
    if sigma > T::zero() {
        let z = noise.ok_or_else(|| Error::arg("eta > 0 requires a noise sample"))?;
        check_shape(&x_t.boxes.view(), &z, "noise")?;
        Zip::from(&mut boxes).and(&z).for_each(|b, &z| *b += sigma * z);
    }
    Ok(BoxState { boxes, t: t_prev })
}

/// Uniformly spaced `(t, t_prev)` pairs walking from `T` down to 0 in `steps` jumps.
pub fn sampling_timesteps(total: usize, steps: usize) -> Result<Vec<(usize, usize)>> {
    if steps < 1 || steps > total {
        return Err(Error::arg(format!("sampling steps {steps} outside 1..={total}")));
    }
    let at = |k: usize| (total * k + steps / 2) / steps;
    Ok((1..=steps).rev().map(|k| (at(k), at(k - 1))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{make_schedule, ScheduleKind};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal(rng: &mut ChaCha8Rng, n: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, 4), |_| StandardNormal.sample(rng))
    }

    #[test]
    fn zero_signal_gives_scaled_noise() {
        let s = make_schedule::<f64>(ScheduleKind::Linear, 1000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noise = normal(&mut rng, 3);
        let x0 = BoxState::new(Array2::zeros((3, 4)), 0).unwrap();
        let out = corrupt(&x0, 250, noise.view(), &s).unwrap();
        let k = (1.0 - s.alpha_bar(250).unwrap()).sqrt();
        assert_eq!(out.boxes, noise.mapv(|n| k * n));
        assert_eq!(out.t, 250);
    }

    #[test]
    fn zero_beta_is_identity() {
        let s = BetaSchedule::<f64>::from_betas_unchecked(vec![0.0; 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = BoxState::new(normal(&mut rng, 4), 0).unwrap();
        let noise = normal(&mut rng, 4);
        assert_eq!(corrupt(&x0, 5, noise.view(), &s).unwrap().boxes, x0.boxes);
        assert_eq!(single_step_diffuse(&x0, 1, noise.view(), &s).unwrap().boxes, x0.boxes);
    }

    #[test]
    fn zero_noise_step_contracts() {
        let s = make_schedule::<f64>(ScheduleKind::Linear, 100).unwrap();
        let x = BoxState::new(array![[1.0, -2.0, 0.5, 3.0]], 4).unwrap();
        let out = single_step_diffuse(&x, 5, Array2::zeros((1, 4)).view(), &s).unwrap();
        let k = (1.0 - s.beta(5).unwrap()).sqrt();
        assert_eq!(out.boxes, x.boxes.mapv(|v| v * k));
    }

    #[test]
    fn shape_and_step_errors() {
        let s = make_schedule::<f64>(ScheduleKind::Linear, 10).unwrap();
        let x0 = BoxState::new(Array2::zeros((2, 4)), 0).unwrap();
        assert!(corrupt(&x0, 1, Array2::zeros((3, 4)).view(), &s).is_err());
        assert!(corrupt(&x0, 0, Array2::zeros((2, 4)).view(), &s).is_err());
        assert!(corrupt(&x0, 11, Array2::zeros((2, 4)).view(), &s).is_err());
        assert!(single_step_diffuse(&x0, 2, Array2::zeros((2, 4)).view(), &s).is_err());
        assert!(BoxState::new(Array2::<f64>::zeros((2, 3)), 0).is_err());
        assert!(BoxState::new(array![[f64::NAN, 0.0, 0.0, 0.0]], 0).is_err());
    }

    #[test]
    fn inversion_recovers_x0() {
        let s = make_schedule::<f64>(ScheduleKind::Linear, 1000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for t in [1, 17, 500, 1000] {
            let x0 = BoxState::new(normal(&mut rng, 6), 0).unwrap();
            let n = normal(&mut rng, 6);
            let xt = corrupt(&x0, t, n.view(), &s).unwrap();
            let rec = predict_x0_from_noise(&xt, n.view(), t, &s).unwrap();
            for (a, b) in rec.iter().zip(x0.boxes.iter()) {
                assert!((a - b).abs() < 1e-9, "t={t}");
            }
            let zero = predict_x0_from_noise(&xt, Array2::zeros((6, 4)).view(), t, &s).unwrap();
            let k = s.alpha_bar(t).unwrap().sqrt();
            assert_eq!(zero, xt.boxes.mapv(|v| v / k));
        }
    }

    #[test]
    fn inversion_round_trip_from_random_state() {
        let s = make_schedule::<f64>(ScheduleKind::Cosine, 1000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xt = BoxState::new(normal(&mut rng, 5), 300).unwrap();
        let eps = normal(&mut rng, 5);
        let x0 = predict_x0_from_noise(&xt, eps.view(), 300, &s).unwrap();
        let again = corrupt(&BoxState::new(x0, 0).unwrap(), 300, eps.view(), &s).unwrap();
        for (a, b) in again.boxes.iter().zip(xt.boxes.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn tiny_alpha_bar_is_a_domain_error() {
        let s = BetaSchedule::<f64>::from_betas(vec![0.999_999_9; 4]).unwrap();
        let xt = BoxState::new(Array2::zeros((1, 4)), 4).unwrap();
        let err = predict_x0_from_noise(&xt, Array2::zeros((1, 4)).view(), 4, &s).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
    }

    #[test]
    fn ddim_to_zero_returns_x0_hat() {
        let s = make_schedule::<f64>(ScheduleKind::Linear, 1000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xt = BoxState::new(normal(&mut rng, 7), 1000).unwrap();
        let x0 = normal(&mut rng, 7);
        let out = ddim_step(&xt, x0.view(), 0, &s, 0.0, None).unwrap();
        assert_eq!(out.t, 0);
        assert_eq!(out.boxes, x0);
    }

    #[test]
    fn ddim_substitution_identity() {
        // With exact x0 and x_t = corrupt(x0, t, n), the deterministic step lands on
        // corrupt(x0, t_prev, n): the implied noise is n itself.
        let s = make_schedule::<f64>(ScheduleKind::Linear, 1000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x0 = BoxState::new(normal(&mut rng, 5), 0).unwrap();
        let n = normal(&mut rng, 5);
        let xt = corrupt(&x0, 800, n.view(), &s).unwrap();
        let eps = predict_noise_from_x0(&xt, x0.boxes.view(), 800, &s).unwrap();
        for (a, b) in eps.iter().zip(n.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
        let stepped = ddim_step(&xt, x0.boxes.view(), 300, &s, 0.0, None).unwrap();
        let direct = corrupt(&x0, 300, eps.view(), &s).unwrap();
        for (a, b) in stepped.boxes.iter().zip(direct.boxes.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn ddim_one_vs_two_steps_with_perfect_denoiser() {
        let s = make_schedule::<f64>(ScheduleKind::Linear, 1000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = normal(&mut rng, 4);
        let xt = BoxState::new(normal(&mut rng, 4), 1000).unwrap();
        let one = ddim_step(&xt, x0.view(), 0, &s, 0.0, None).unwrap();
        let mid = ddim_step(&xt, x0.view(), 500, &s, 0.0, None).unwrap();
        let two = ddim_step(&mid, x0.view(), 0, &s, 0.0, None).unwrap();
        for (a, b) in one.boxes.iter().zip(two.boxes.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn ddim_argument_errors() {
        let s = make_schedule::<f64>(ScheduleKind::Linear, 10).unwrap();
        let xt = BoxState::new(Array2::zeros((1, 4)), 5).unwrap();
        let x0 = Array2::zeros((1, 4));
        assert!(ddim_step(&xt, x0.view(), 5, &s, 0.0, None).is_err());
        assert!(ddim_step(&xt, x0.view(), 2, &s, 1.5, None).is_err());
        assert!(ddim_step(&xt, x0.view(), 2, &s, 0.5, None).is_err());
        let z = Array2::ones((1, 4));
        assert!(ddim_step(&xt, x0.view(), 2, &s, 0.5, Some(z.view())).is_ok());
    }

    #[test]
    fn timestep_grid() {
        assert_eq!(sampling_timesteps(1000, 1).unwrap(), vec![(1000, 0)]);
        assert_eq!(
            sampling_timesteps(1000, 4).unwrap(),
            vec![(1000, 750), (750, 500), (500, 250), (250, 0)]
        );
        assert!(sampling_timesteps(10, 0).is_err());
        assert!(sampling_timesteps(10, 11).is_err());
    }
}
