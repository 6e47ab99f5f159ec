//! Temporally correlated Rayleigh fading as a first-order autoregression.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Small-scale coefficients for a set of links.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FadingState {
    pub h: Vec<Complex64>,
    pub doppler_hz: f64,
}

/// AR(1) coefficient `J0(2 pi f_D dt)` clamped to `[0, 1]`.
pub fn ar1_coefficient(doppler_hz: f64, dt_s: f64) -> f64 {
    libm::j0(2.0 * std::f64::consts::PI * doppler_hz * dt_s).clamp(0.0, 1.0)
}

/// Circularly symmetric complex Gaussian with unit variance.
#[inline]
pub(crate) fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

impl FadingState {
    /// `len` coefficients drawn from the stationary distribution.
    pub fn stationary<R: Rng + ?Sized>(len: usize, doppler_hz: f64, rng: &mut R) -> Self {
        Self { h: (0..len).map(|_| complex_gaussian(rng)).collect(), doppler_hz }
    }

    pub fn rho(&self, dt_s: f64) -> f64 {
        ar1_coefficient(self.doppler_hz, dt_s)
    }

    pub fn step_with_rho<R: Rng + ?Sized>(&mut self, rho: f64, rng: &mut R) {
        let innovation = (1.0 - rho * rho).max(0.0).sqrt();
        for h in &mut self.h {
            *h = *h * rho + complex_gaussian(rng) * innovation;
        }
    }

    pub fn step<R: Rng + ?Sized>(&mut self, dt_s: f64, rng: &mut R) {
        let rho = self.rho(dt_s);
        self.step_with_rho(rho, rng);
    }
}

/// Advances every coefficient by `dt_s`, returning the new state.
pub fn step_fading<R: Rng + ?Sized>(state: &FadingState, dt_s: f64, rng: &mut R) -> FadingState {
    let mut next = state.clone();
    next.step(dt_s, rng);
    next
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn unit_rho_keeps_state() {
        let mut r = rng::stream(1, &[]);
        let s = FadingState::stationary(8, 0.0, &mut r);
        assert_eq!(s.rho(0.005), 1.0);
        let next = step_fading(&s, 0.005, &mut r);
        assert_eq!(s, next);
    }

    #[test]
    fn default_doppler_coefficient() {
        // 3 m/s at 6 GHz, 5 ms steps.
        let fd = 3.0 * 6e9 / crate::radiolink::SPEED_OF_LIGHT;
        let rho = ar1_coefficient(fd, 0.005);
        assert!((rho - 0.2906).abs() < 2e-3, "{rho}");
    }

    #[test]
    fn zero_rho_decorrelates() {
        let mut r = rng::stream(2, &[]);
        let mut s = FadingState::stationary(1, 0.0, &mut r);
        let (mut num, mut den_a, mut den_b) = (0.0, 0.0, 0.0);
        for _ in 0..10_000 {
            let before = s.h[0];
            s.step_with_rho(0.0, &mut r);
            let after = s.h[0];
            num += (before * after.conj()).re;
            den_a += before.norm_sqr();
            den_b += after.norm_sqr();
        }
        let corr = num / (den_a * den_b).sqrt();
        assert!(corr.abs() < 0.05, "{corr}");
    }

    #[test]
    fn long_run_power_is_unit() {
        let mut r = rng::stream(3, &[]);
        let mut s = FadingState::stationary(1, 60.0, &mut r);
        let mut acc = 0.0;
        let n = 100_000;
        for _ in 0..n {
            s.step(0.005, &mut r);
            acc += s.h[0].norm_sqr();
        }
        let mean = acc / n as f64;
        assert!((mean - 1.0).abs() < 0.02, "{mean}");
    }
}
