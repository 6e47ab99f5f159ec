//! Radio link budget: pathloss, LOS probability, shadowing, fading,
//! received power, SINR and finite-blocklength achievable rate.
//!
//! Pathloss follows the 3GPP TR 38.901 indoor-factory low-antenna
//! scenarios (InF-SL and InF-DL). All powers are handled in milliwatts
//! once they leave this module.

mod fading;
mod qfunc;
mod shadowing;
mod tensor;

pub use fading::{ar1_coefficient, step_fading, FadingState};
pub(crate) use fading::complex_gaussian;
pub use qfunc::inverse_q;
pub use shadowing::{link_correlation, sample_shadowing, ShadowField, ShadowGenerator};
pub use tensor::{sinr, sir, ChannelGainTensor};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Thermal noise density at room temperature.
pub const THERMAL_NOISE_DBM_PER_HZ: f64 = -174.0;

/// Constant multiplying the dispersion penalty in the rate expression (log10 e).
pub const DISPERSION_LOG_FACTOR: f64 = std::f64::consts::LOG10_E;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    /// Sparse clutter, low base-station antenna.
    #[serde(rename = "InF-SL")]
    InfSl,
    /// Dense clutter, low base-station antenna.
    #[serde(rename = "InF-DL")]
    InfDl,
}

impl Scenario {
    /// TR 38.901 NLOS shadow-fading standard deviation for the scenario.
    pub fn nlos_shadow_sigma_db(self) -> f64 {
        match self {
            Scenario::InfSl => 5.7,
            Scenario::InfDl => 7.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadioConfig {
    pub carrier_freq_hz: f64,
    /// Bandwidth of one channel.
    pub channel_bandwidth_hz: f64,
    pub num_channels: usize,
    pub tx_power_dbm: f64,
    pub noise_figure_db: f64,
    /// Codeword length in channel uses.
    pub blocklength: u32,
    pub decode_error_prob: f64,
    pub scenario: Scenario,
    /// Fraction of the floor covered by clutter.
    pub clutter_density: f64,
    pub clutter_size_m: f64,
    pub shadow_decorr_m: f64,
    /// Shadowing standard deviation of LOS links.
    pub shadow_sigma_db: f64,
    /// Shadowing standard deviation of NLOS links.
    pub shadow_sigma_nlos_db: f64,
    pub fading_doppler_hz: f64,
    pub ap_height_m: f64,
    pub device_height_m: f64,
}

impl Default for RadioConfig {
    fn default() -> Self {
        let carrier_freq_hz = 6e9;
        Self {
            carrier_freq_hz,
            channel_bandwidth_hz: 10e6,
            num_channels: 4,
            tx_power_dbm: -10.0,
            noise_figure_db: 10.0,
            blocklength: 256,
            decode_error_prob: 1e-5,
            scenario: Scenario::InfSl,
            clutter_density: 0.2,
            clutter_size_m: 10.0,
            shadow_decorr_m: 10.0,
            shadow_sigma_db: 4.3,
            shadow_sigma_nlos_db: Scenario::InfSl.nlos_shadow_sigma_db(),
            fading_doppler_hz: 3.0 * carrier_freq_hz / SPEED_OF_LIGHT,
            ap_height_m: 1.5,
            device_height_m: 1.5,
        }
    }
}

impl RadioConfig {
    /// Default parameters for `scenario` with the given clutter.
    pub fn for_scenario(scenario: Scenario, clutter_size_m: f64, clutter_density: f64) -> Self {
        Self {
            scenario,
            clutter_size_m,
            clutter_density,
            shadow_sigma_nlos_db: scenario.nlos_shadow_sigma_db(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_channels < 1 {
            return Err(Error::config("num_channels must be at least 1"));
        }
        let positive = [
            ("carrier_freq_hz", self.carrier_freq_hz),
            ("channel_bandwidth_hz", self.channel_bandwidth_hz),
            ("shadow_decorr_m", self.shadow_decorr_m),
            ("clutter_size_m", self.clutter_size_m),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.blocklength == 0 {
            return Err(Error::config("blocklength must be positive"));
        }
        if !(self.decode_error_prob > 0.0 && self.decode_error_prob < 1.0) {
            return Err(Error::config(format!(
                "decode_error_prob must lie in (0, 1), got {}",
                self.decode_error_prob
            )));
        }
        if !(0.0..=1.0).contains(&self.clutter_density) {
            return Err(Error::config(format!(
                "clutter_density must lie in [0, 1], got {}",
                self.clutter_density
            )));
        }
        if self.shadow_sigma_db < 0.0 || self.shadow_sigma_nlos_db < 0.0 {
            return Err(Error::config("shadowing sigma must be non-negative"));
        }
        if self.fading_doppler_hz < 0.0 {
            return Err(Error::config("fading_doppler_hz must be non-negative"));
        }
        Ok(())
    }

    pub fn carrier_ghz(&self) -> f64 {
        self.carrier_freq_hz / 1e9
    }
}

/// InF pathloss in dB for a 3D distance of at least one metre.
pub fn pathloss_db(d_3d_m: f64, config: &RadioConfig, los: bool) -> Result<f64> {
    if !(d_3d_m >= 1.0) {
        return Err(Error::domain(format!(
            "pathloss model is valid for d_3d >= 1 m, got {d_3d_m}"
        )));
    }
    let log_d = d_3d_m.log10();
    let log_f = config.carrier_ghz().log10();
    let los_pl = 31.84 + 21.5 * log_d + 19.0 * log_f;
    if los {
        return Ok(los_pl);
    }
    let sl = los_pl.max(33.0 + 25.5 * log_d + 20.0 * log_f);
    Ok(match config.scenario {
        Scenario::InfSl => sl,
        Scenario::InfDl => sl.max(18.6 + 35.7 * log_d + 20.0 * log_f),
    })
}

/// Probability that a link of horizontal length `d_2d_m` is in line of sight.
pub fn los_probability(d_2d_m: f64, config: &RadioConfig) -> f64 {
    let r = config.clutter_density;
    if d_2d_m <= 0.0 || r <= 0.0 {
        return 1.0;
    }
    if r >= 1.0 {
        return 0.0;
    }
    // exp(-d / k) with k = -d_clutter / ln(1 - r)
    (d_2d_m * (1.0 - r).ln() / config.clutter_size_m).exp().clamp(0.0, 1.0)
}

/// Receiver noise power over one channel, in mW.
pub fn noise_power_mw(config: &RadioConfig) -> f64 {
    dbm_to_mw(noise_power_dbm(config))
}

pub fn noise_power_dbm(config: &RadioConfig) -> f64 {
    THERMAL_NOISE_DBM_PER_HZ + config.noise_figure_db + 10.0 * config.channel_bandwidth_hz.log10()
}

#[inline]
pub fn dbm_to_mw(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0)
}

#[inline]
pub fn mw_to_dbm(mw: f64) -> f64 {
    10.0 * mw.log10()
}

/// Received power in mW for a link with the given large-scale losses and
/// small-scale coefficient.
#[inline]
pub fn compose_gain(pathloss_db: f64, shadow_db: f64, fading: Complex64, tx_power_dbm: f64) -> f64 {
    dbm_to_mw(tx_power_dbm - pathloss_db - shadow_db) * fading.norm_sqr()
}

/// Channel dispersion `1 - (1 + gamma)^-2`.
#[inline]
pub fn dispersion(gamma: f64) -> f64 {
    let inv = 1.0 / (1.0 + gamma);
    1.0 - inv * inv
}

/// Finite-blocklength spectral efficiency in bit/s/Hz, clamped at zero.
pub fn spectral_efficiency(gamma: f64, blocklength: u32, decode_error_prob: f64) -> Result<f64> {
    if !(decode_error_prob > 0.0 && decode_error_prob < 1.0) {
        return Err(Error::domain(format!(
            "decoding error probability must lie in (0, 1), got {decode_error_prob}"
        )));
    }
    let q = inverse_q(decode_error_prob);
    Ok(spectral_efficiency_with_q(gamma, blocklength, q))
}

/// Same as [`spectral_efficiency`] with a precomputed `Q^-1(eps)`.
#[inline]
pub fn spectral_efficiency_with_q(gamma: f64, blocklength: u32, q_inv: f64) -> f64 {
    let gamma = gamma.max(0.0);
    let penalty = (dispersion(gamma) / blocklength as f64).sqrt() * q_inv * DISPERSION_LOG_FACTOR;
    ((1.0 + gamma).log2() - penalty).max(0.0)
}

/// Finite-blocklength achievable rate in bit/s.
pub fn achievable_rate(gamma: f64, config: &RadioConfig) -> Result<f64> {
    Ok(config.channel_bandwidth_hz
        * spectral_efficiency(gamma, config.blocklength, config.decode_error_prob)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    // Frozen from an independent 50-digit evaluation of the same formulas.
    const PL_LOS_10M_6GHZ: f64 = 68.124_873_757_289_23;
    const PL_LOS_1M_6GHZ: f64 = 46.624_873_757_289_23;
    const RATE_10DB_L256_EPS1E5: f64 = 33_441_473.147_124_29;

    #[test]
    fn los_pathloss_reference_points() {
        let c = RadioConfig::default();
        assert_relative_eq!(pathloss_db(10.0, &c, true).unwrap(), PL_LOS_10M_6GHZ, epsilon = 1e-9);
        assert_relative_eq!(pathloss_db(1.0, &c, true).unwrap(), PL_LOS_1M_6GHZ, epsilon = 1e-9);
    }

    #[test]
    fn nlos_dominates_los() {
        for scenario in [Scenario::InfSl, Scenario::InfDl] {
            let c = RadioConfig { scenario, ..Default::default() };
            for d in [1.0, 1.5, 3.0, 10.0, 50.0, 200.0] {
                let los = pathloss_db(d, &c, true).unwrap();
                let nlos = pathloss_db(d, &c, false).unwrap();
                assert!(nlos >= los);
            }
        }
        let sl = RadioConfig::default();
        let dl = RadioConfig { scenario: Scenario::InfDl, ..Default::default() };
        assert!(pathloss_db(30.0, &dl, false).unwrap() >= pathloss_db(30.0, &sl, false).unwrap());
    }

    #[test]
    fn pathloss_rejects_short_links() {
        let c = RadioConfig::default();
        assert!(matches!(pathloss_db(0.5, &c, true), Err(Error::Domain(_))));
        assert!(pathloss_db(f64::NAN, &c, true).is_err());
    }

    #[test]
    fn los_probability_examples() {
        let c = RadioConfig::default();
        assert_eq!(los_probability(0.0, &c), 1.0);
        assert_relative_eq!(los_probability(10.0, &c), 0.8, epsilon = 1e-12);
        let open = RadioConfig { clutter_density: 0.0, ..Default::default() };
        assert_eq!(los_probability(1e6, &open), 1.0);
        let full = RadioConfig { clutter_density: 1.0, ..Default::default() };
        assert_eq!(los_probability(1.0, &full), 0.0);
    }

    #[test]
    fn noise_power_examples() {
        let c = RadioConfig::default();
        assert_relative_eq!(mw_to_dbm(noise_power_mw(&c)), -94.0, epsilon = 1e-12);
        assert_relative_eq!(noise_power_mw(&c), 10f64.powf(-9.4), max_relative = 1e-12);
        let unit = RadioConfig { noise_figure_db: 0.0, channel_bandwidth_hz: 1.0, ..Default::default() };
        assert_relative_eq!(noise_power_dbm(&unit), -174.0);
        let double = RadioConfig { channel_bandwidth_hz: 20e6, ..Default::default() };
        assert_relative_eq!(noise_power_dbm(&double) - noise_power_dbm(&c), 10.0 * 2f64.log10(), epsilon = 1e-12);
    }

    #[test]
    fn compose_gain_examples() {
        let one = Complex64::new(1.0, 0.0);
        assert_relative_eq!(compose_gain(0.0, 0.0, one, 0.0), 1.0);
        assert_relative_eq!(compose_gain(20.0, 0.0, one, 0.0), 0.01, max_relative = 1e-14);
        let half = Complex64::new(0.5f64.sqrt(), 0.0);
        assert_relative_eq!(
            compose_gain(68.12, 3.0, half, -10.0),
            3.863_402_925_478_511e-9,
            max_relative = 1e-12
        );
    }

    #[test]
    fn dispersion_examples() {
        assert_eq!(dispersion(0.0), 0.0);
        assert_eq!(dispersion(1.0), 0.75);
        assert!(dispersion(1e6) < 1.0 && dispersion(1e6) > 1.0 - 1e-11);
    }

    #[test]
    fn rate_examples() {
        let c = RadioConfig::default();
        assert_eq!(achievable_rate(0.0, &c).unwrap(), 0.0);
        assert_relative_eq!(achievable_rate(10.0, &c).unwrap(), RATE_10DB_L256_EPS1E5, max_relative = 1e-10);
        let long = RadioConfig { blocklength: 1_000_000_000, ..Default::default() };
        let shannon = c.channel_bandwidth_hz * 11f64.log2();
        let r = achievable_rate(10.0, &long).unwrap();
        assert!((shannon - r) / shannon < 1e-3);
        let bad = RadioConfig { decode_error_prob: 1.0, ..Default::default() };
        assert!(matches!(achievable_rate(1.0, &bad), Err(Error::Domain(_))));
    }

    #[test]
    fn config_validation() {
        assert!(RadioConfig::default().validate().is_ok());
        assert!(RadioConfig { num_channels: 0, ..Default::default() }.validate().is_err());
        assert!(RadioConfig { decode_error_prob: 0.0, ..Default::default() }.validate().is_err());
        assert!(RadioConfig { clutter_density: 1.5, ..Default::default() }.validate().is_err());
        assert!(RadioConfig { blocklength: 0, ..Default::default() }.validate().is_err());
    }

    proptest! {
        #[test]
        fn rate_monotone_and_below_shannon(g1 in 0.0f64..1e4, g2 in 0.0f64..1e4, eps in 1e-9f64..0.49, l in 1u32..5000) {
            let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
            let q = inverse_q(eps);
            let r_lo = spectral_efficiency_with_q(lo, l, q);
            let r_hi = spectral_efficiency_with_q(hi, l, q);
            prop_assert!(r_hi >= r_lo);
            prop_assert!(r_hi <= (1.0 + hi).log2() + 1e-12);
            let v = dispersion(hi);
            prop_assert!((0.0..1.0).contains(&v));
        }

        #[test]
        fn noise_increasing(nf in 0.0f64..20.0, b in 1e3f64..1e9, dnf in 1e-3f64..5.0, db in 1.0f64..1e6) {
            let base = RadioConfig { noise_figure_db: nf, channel_bandwidth_hz: b, ..Default::default() };
            let more_nf = RadioConfig { noise_figure_db: nf + dnf, ..base.clone() };
            let more_b = RadioConfig { channel_bandwidth_hz: b + db, ..base.clone() };
            prop_assert!(noise_power_mw(&more_nf) > noise_power_mw(&base));
            prop_assert!(noise_power_mw(&more_b) > noise_power_mw(&base));
        }
    }
}
