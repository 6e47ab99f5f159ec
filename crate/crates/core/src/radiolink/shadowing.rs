//! Spatially correlated log-normal shadowing.
//!
//! A stationary Gaussian field with covariance `sigma^2 exp(-d / d_corr)` is
//! sampled on a regular grid by circulant embedding: the covariance is
//! wrapped onto a torus twice the grid size, diagonalised by a 2-D FFT, and
//! white complex noise is coloured by the square-rooted spectrum. Values at
//! arbitrary points use the nearest grid node.
//!
//! The shadowing of a link combines the field at both of its ends so that
//! short links see little shadowing and long links see the full variance.

use std::sync::Arc;

use num_complex::Complex64;
use rand_distr::{Distribution, StandardNormal};
use rustfft::{Fft, FftPlanner};

use crate::rng;

/// Grid geometry plus the precomputed embedding spectrum. Reusable across
/// episodes; each call to [`ShadowGenerator::sample`] draws a fresh field.
#[derive(Clone)]
pub struct ShadowGenerator {
    origin: [f64; 2],
    resolution_m: f64,
    nx: usize,
    ny: usize,
    mx: usize,
    my: usize,
    decorr_m: f64,
    /// `sqrt(max(lambda, 0) / (mx * my))`, row-major `my x mx`.
    scale: Vec<f64>,
    fft_x: Arc<dyn Fft<f64>>,
    fft_y: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for ShadowGenerator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ShadowGenerator")
            .field("origin", &self.origin)
            .field("resolution_m", &self.resolution_m)
            .field("nx", &self.nx)
            .field("ny", &self.ny)
            .field("decorr_m", &self.decorr_m)
            .finish()
    }
}

/// A sampled unit-variance field scaled by `sigma_db` on lookup.
#[derive(Debug, Clone)]
pub struct ShadowField {
    origin: [f64; 2],
    resolution_m: f64,
    nx: usize,
    ny: usize,
    sigma_db: f64,
    decorr_m: f64,
    values: Vec<f64>,
}

impl ShadowGenerator {
    /// Grid covering `[origin, origin + extent]` at `resolution_m`.
    pub fn new(origin: [f64; 2], extent: [f64; 2], resolution_m: f64, decorr_m: f64) -> Self {
        assert!(resolution_m > 0.0 && decorr_m > 0.0);
        let nx = (extent[0] / resolution_m).ceil() as usize + 1;
        let ny = (extent[1] / resolution_m).ceil() as usize + 1;
        let (mx, my) = (2 * nx, 2 * ny);
        let mut planner = FftPlanner::new();
        let fft_x = planner.plan_fft_forward(mx);
        let fft_y = planner.plan_fft_forward(my);

        let mut buf = vec![Complex64::new(0.0, 0.0); mx * my];
        for iy in 0..my {
            let dy = iy.min(my - iy) as f64 * resolution_m;
            for ix in 0..mx {
                let dx = ix.min(mx - ix) as f64 * resolution_m;
                let d = (dx * dx + dy * dy).sqrt();
                buf[iy * mx + ix] = Complex64::new((-d / decorr_m).exp(), 0.0);
            }
        }
        fft2(&mut buf, mx, my, fft_x.as_ref(), fft_y.as_ref());
        let norm = (mx * my) as f64;
        let scale = buf.iter().map(|l| (l.re.max(0.0) / norm).sqrt()).collect();

        Self { origin, resolution_m, nx, ny, mx, my, decorr_m, scale, fft_x, fft_y }
    }

    /// Draws one field; identical for identical `seed`.
    pub fn sample(&self, sigma_db: f64, seed: u64) -> ShadowField {
        let mut r = rng::stream(seed, &[rng::tag::SHADOW]);
        let mut buf: Vec<Complex64> = self
            .scale
            .iter()
            .map(|&s| {
                let re: f64 = StandardNormal.sample(&mut r);
                let im: f64 = StandardNormal.sample(&mut r);
                Complex64::new(s * re, s * im)
            })
            .collect();
        fft2(&mut buf, self.mx, self.my, self.fft_x.as_ref(), self.fft_y.as_ref());
        let mut values = Vec::with_capacity(self.nx * self.ny);
        for iy in 0..self.ny {
            values.extend(buf[iy * self.mx..iy * self.mx + self.nx].iter().map(|c| c.re));
        }
        ShadowField {
            origin: self.origin,
            resolution_m: self.resolution_m,
            nx: self.nx,
            ny: self.ny,
            sigma_db,
            decorr_m: self.decorr_m,
            values,
        }
    }
}

fn fft2(buf: &mut [Complex64], mx: usize, my: usize, fft_x: &dyn Fft<f64>, fft_y: &dyn Fft<f64>) {
    fft_x.process(buf);
    let mut col = vec![Complex64::new(0.0, 0.0); my];
    for ix in 0..mx {
        for iy in 0..my {
            col[iy] = buf[iy * mx + ix];
        }
        fft_y.process(&mut col);
        for iy in 0..my {
            buf[iy * mx + ix] = col[iy];
        }
    }
}

impl ShadowField {
    /// Field value in dB at `p` (nearest grid node; points outside are clamped).
    pub fn value_at(&self, p: [f64; 2]) -> f64 {
        self.sigma_db * self.unit_value_at(p)
    }

    /// Unit-variance field value at `p`.
    pub fn unit_value_at(&self, p: [f64; 2]) -> f64 {
        let ix = ((p[0] - self.origin[0]) / self.resolution_m).round();
        let iy = ((p[1] - self.origin[1]) / self.resolution_m).round();
        let ix = (ix.max(0.0) as usize).min(self.nx - 1);
        let iy = (iy.max(0.0) as usize).min(self.ny - 1);
        self.values[iy * self.nx + ix]
    }

    pub fn sigma_db(&self) -> f64 {
        self.sigma_db
    }

    pub fn decorr_m(&self) -> f64 {
        self.decorr_m
    }

    /// Shadowing in dB of the link between `a` and `b`, for a link whose
    /// shadowing standard deviation is `link_sigma_db`.
    pub fn link_db(&self, a: [f64; 2], b: [f64; 2], link_sigma_db: f64) -> f64 {
        let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        link_sigma_db
            * link_correlation(d, self.decorr_m)
            * (self.unit_value_at(a) + self.unit_value_at(b))
    }
}

/// Weight applied to the sum of the two endpoint field values of a link of
/// length `d`: `(1 - rho) / (sqrt 2 * sqrt(1 + rho))` with `rho = exp(-d / d_corr)`.
/// With unit-variance endpoints this gives the link a standard deviation of
/// `1 - rho`.
pub fn link_correlation(d: f64, decorr_m: f64) -> f64 {
    let rho = (-d / decorr_m).exp();
    (1.0 - rho) / (std::f64::consts::SQRT_2 * (1.0 + rho).sqrt())
}

/// Samples a field covering all `positions` (with a one-decorrelation
/// margin) at one-metre resolution.
pub fn sample_shadowing(positions: &[[f64; 2]], decorr_m: f64, sigma_db: f64, seed: u64) -> ShadowField {
    let (mut lo, mut hi) = ([0.0f64; 2], [1.0f64; 2]);
    if let Some(first) = positions.first() {
        lo = *first;
        hi = *first;
        for p in positions {
            for a in 0..2 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
    }
    let margin = decorr_m;
    let origin = [lo[0] - margin, lo[1] - margin];
    let extent = [hi[0] - lo[0] + 2.0 * margin, hi[1] - lo[1] + 2.0 * margin];
    ShadowGenerator::new(origin, extent, 1.0, decorr_m).sample(sigma_db, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn deterministic_and_seed_dependent() {
        let g = ShadowGenerator::new([0.0, 0.0], [40.0, 30.0], 1.0, 10.0);
        let a = g.sample(4.0, 1);
        let b = g.sample(4.0, 1);
        let c = g.sample(4.0, 2);
        assert_eq!(a.values, b.values);
        assert_ne!(a.values, c.values);
        let p = [12.3, 7.7];
        assert_eq!(a.value_at(p), a.value_at(p));
    }

    #[test]
    fn short_links_nearly_unshadowed() {
        assert!(link_correlation(0.0, 10.0).abs() < 1e-15);
        assert!(link_correlation(0.5, 10.0) < 0.04);
        assert!((link_correlation(1e6, 10.0) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    /// Monte-Carlo over many fields: marginal std and correlation at 5, 10, 20 m.
    #[test]
    fn empirical_statistics() {
        let sigma = 4.0;
        let g = ShadowGenerator::new([0.0, 0.0], [60.0, 60.0], 1.0, 10.0);
        let mut r = rng::stream(99, &[]);
        let lags = [5.0, 10.0, 20.0];
        let mut sums = [(0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64); 3];
        let mut sq = 0.0;
        let mut count = 0usize;
        for seed in 0..300u64 {
            let f = g.sample(sigma, seed);
            for _ in 0..40 {
                let p = [r.random_range(0.0..60.0), r.random_range(0.0..60.0)];
                let v = f.value_at(p);
                sq += v * v;
                count += 1;
                for (slot, &lag) in sums.iter_mut().zip(&lags) {
                    // axis-aligned and diagonal directions
                    let theta = r.random_range(0..8) as f64 * std::f64::consts::FRAC_PI_4;
                    let q = [p[0] + lag * theta.cos(), p[1] + lag * theta.sin()];
                    if !(0.0..=60.0).contains(&q[0]) || !(0.0..=60.0).contains(&q[1]) {
                        continue;
                    }
                    let w = f.value_at(q);
                    slot.0 += v * w;
                    slot.1 += v * v;
                    slot.2 += w * w;
                    slot.3 += 1.0;
                    slot.4 += v + w;
                }
            }
        }
        let std = (sq / count as f64).sqrt();
        assert!((std - sigma).abs() / sigma < 0.05, "std {std}");
        for (slot, &lag) in sums.iter().zip(&lags) {
            let corr = slot.0 / (slot.1 * slot.2).sqrt();
            let want = (-lag / 10.0f64).exp();
            assert!((corr - want).abs() < 0.1, "lag {lag}: {corr} vs {want}");
        }
    }

    #[test]
    fn correlation_non_increasing_in_distance() {
        let g = ShadowGenerator::new([0.0, 0.0], [80.0, 10.0], 1.0, 10.0);
        let mut acc = vec![0.0; 30];
        let mut norm = 0.0;
        for seed in 0..200 {
            let f = g.sample(1.0, seed);
            for x0 in (0..40).step_by(4) {
                let v = f.value_at([x0 as f64, 5.0]);
                norm += v * v;
                for (lag, a) in acc.iter_mut().enumerate() {
                    *a += v * f.value_at([(x0 + lag) as f64, 5.0]);
                }
            }
        }
        let corr: Vec<f64> = acc.iter().map(|a| a / norm).collect();
        for w in corr.windows(2) {
            assert!(w[1] <= w[0] + 0.05, "{corr:?}");
        }
    }

    #[test]
    fn sample_shadowing_covers_positions() {
        let pts = [[0.0, 0.0], [25.0, 3.0], [10.0, -4.0]];
        let f = sample_shadowing(&pts, 10.0, 3.0, 5);
        for p in pts {
            assert!(f.value_at(p).is_finite());
            assert_eq!(f.value_at(p), f.value_at(p));
        }
        assert_eq!(f.sigma_db(), 3.0);
    }
}
