//! Uplink channel: distance pathloss, Rayleigh block fading, FDMA rate,
//! transmission time, and the closed-form outage probability.
//!
//! Everything here is linear scale and SI units (Hz, W, W/Hz, m, s, bits).
//! Conversions from dB happen once when a configuration is loaded.

use std::f64::consts::{LN_2, PI};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Speed of light used for the free-space reference gain, m/s.
pub const SPEED_OF_LIGHT: f64 = 3e8;

/// `10^((dbm - 30) / 10)`.
pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn watts_to_dbm(watts: f64) -> f64 {
    10.0 * watts.log10() + 30.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    pub carrier_hz: f64,
    pub pathloss_exponent: f64,
    /// Noise power spectral density `N0`, W/Hz.
    pub noise_psd: f64,
    /// Variance of the small-scale fading coefficient.
    pub fading_variance: f64,
    /// `(c / (4 pi f_c))^2`.
    pub beta0: f64,
}

impl ChannelParams {
    pub fn new(
        carrier_hz: f64,
        pathloss_exponent: f64,
        noise_psd: f64,
        fading_variance: f64,
    ) -> Result<Self> {
        for (name, v) in [
            ("carrier frequency", carrier_hz),
            ("pathloss exponent", pathloss_exponent),
            ("noise psd", noise_psd),
            ("fading variance", fading_variance),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        let beta0 = (SPEED_OF_LIGHT / (4.0 * PI * carrier_hz)).powi(2);
        Ok(Self {
            carrier_hz,
            pathloss_exponent,
            noise_psd,
            fading_variance,
            beta0,
        })
    }

    /// 3 GHz carrier, exponent 2.9, -174 dBm/Hz noise, unit fading variance.
    pub fn table_defaults() -> Self {
        Self::new(3e9, 2.9, dbm_to_watts(-174.0), 1.0).expect("defaults are valid")
    }
}

/// One client's channel in one round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelRealization {
    pub client_id: usize,
    pub distance_m: f64,
    /// `|h|^2`, linear.
    pub gain: f64,
}

/// `beta0 * d^-alpha`.
pub fn pathloss(distance_m: f64, params: &ChannelParams) -> Result<f64> {
    if !(distance_m > 0.0) {
        return Err(Error::invalid(format!(
            "distance must be positive, got {distance_m}"
        )));
    }
    Ok(params.beta0 * distance_m.powf(-params.pathloss_exponent))
}

/// Draws `|h|^2 = L(d) |o|^2` with `o ~ CN(0, sigma^2)`.
pub fn sample_gain<R: Rng + ?Sized>(
    rng: &mut R,
    client_id: usize,
    distance_m: f64,
    params: &ChannelParams,
) -> Result<ChannelRealization> {
    let scale = pathloss(distance_m, params)?;
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    let fading = 0.5 * params.fading_variance * (re * re + im * im);
    Ok(ChannelRealization {
        client_id,
        distance_m,
        gain: scale * fading,
    })
}

/// Distances drawn uniformly on `[inner, outer]`.
pub fn place_clients<R: Rng + ?Sized>(rng: &mut R, n: usize, inner: f64, outer: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(inner..=outer)).collect()
}

/// `B log2(1 + P |h|^2 / (B N0))`, bits/s. Zero bandwidth or power gives 0.
pub fn achievable_rate(bandwidth: f64, power: f64, gain: f64, noise_psd: f64) -> Result<f64> {
    if bandwidth < 0.0 || power < 0.0 || gain < 0.0 || !(noise_psd > 0.0) {
        return Err(Error::invalid(format!(
            "rate inputs must be nonnegative (B = {bandwidth}, P = {power}, gain = {gain}, N0 = {noise_psd})"
        )));
    }
    if bandwidth == 0.0 || power == 0.0 {
        return Ok(0.0);
    }
    let snr = power * gain / (bandwidth * noise_psd);
    Ok(bandwidth * snr.ln_1p() / LN_2)
}

/// Rate limit as bandwidth grows: `P |h|^2 / (N0 ln 2)`.
pub fn asymptotic_rate(power: f64, gain: f64, noise_psd: f64) -> f64 {
    power * gain / (noise_psd * LN_2)
}

/// `S / rate`; infinite when the rate is zero.
pub fn comm_time(packet_bits: f64, rate: f64) -> f64 {
    if rate <= 0.0 {
        f64::INFINITY
    } else {
        packet_bits / rate
    }
}

/// `Pr(S / rate > deadline)` under Rayleigh fading at distance `d`:
/// `1 - exp(-Q / P)` with `Q = B N0 / (L(d) sigma^2) (2^(S / (B deadline)) - 1)`.
///
/// Zero bandwidth or power is certain outage.
pub fn outage_probability(
    bandwidth: f64,
    power: f64,
    distance_m: f64,
    params: &ChannelParams,
    packet_bits: f64,
    deadline_s: f64,
) -> Result<f64> {
    if bandwidth < 0.0 || power < 0.0 || !(deadline_s > 0.0) || !(packet_bits >= 0.0) {
        return Err(Error::invalid(format!(
            "outage inputs out of range (B = {bandwidth}, P = {power}, S = {packet_bits}, deadline = {deadline_s})"
        )));
    }
    if bandwidth == 0.0 || power == 0.0 {
        return Ok(1.0);
    }
    let scale = pathloss(distance_m, params)?;
    let spectral = packet_bits / (bandwidth * deadline_s);
    let threshold = bandwidth * params.noise_psd / (scale * params.fading_variance)
        * (spectral * LN_2).exp_m1();
    let p = -(-threshold / power).exp_m1();
    Ok(p.clamp(0.0, 1.0))
}

/// `true` (received) with probability `1 - p`.
pub fn sample_transmission<R: Rng + ?Sized>(rng: &mut R, outage: f64) -> bool {
    let u: f64 = rng.random();
    u >= outage
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params() -> ChannelParams {
        ChannelParams::table_defaults()
    }

    #[test]
    fn db_conversions() {
        assert!((dbm_to_watts(20.0) - 0.1).abs() < 1e-15);
        assert!((dbm_to_watts(0.0) - 1e-3).abs() < 1e-18);
        assert!((watts_to_dbm(0.1) - 20.0).abs() < 1e-12);
    }

    #[test]
    fn pathloss_at_unit_distance_is_beta0() {
        let p = params();
        assert_eq!(pathloss(1.0, &p).unwrap(), p.beta0);
        assert!(pathloss(0.0, &p).is_err());
        assert!(pathloss(-3.0, &p).is_err());
    }

    #[test]
    fn pathloss_power_law_ratio() {
        let p = params();
        let ratio = pathloss(10.0, &p).unwrap() / pathloss(100.0, &p).unwrap();
        assert!((ratio / 10f64.powf(2.9) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pathloss_closed_form_at_100m() {
        // beta0 = (3e8 / (4 pi 3e9))^2 = (1 / (40 pi))^2 = 6.332573977646111e-5
        let beta0 = (1.0 / (40.0 * PI)).powi(2);
        assert!((beta0 - 6.332_573_977_646_111e-5).abs() < 1e-18);
        let expected = beta0 * 100f64.powf(-2.9);
        let got = pathloss(100.0, &params()).unwrap();
        assert!((got / expected - 1.0).abs() < 1e-14);
        assert!((got - 1.003_645_338_792_772_1e-10).abs() < 1e-22, "{got:e}");
    }

    #[test]
    fn fading_mean_matches_variance() {
        let p = ChannelParams::new(3e9, 2.9, 1e-20, 1.7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let scale = pathloss(50.0, &p).unwrap();
        let draws: Vec<f64> = (0..n)
            .map(|_| sample_gain(&mut rng, 0, 50.0, &p).unwrap().gain / scale)
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        // |o|^2 is exponential with mean sigma^2, so its standard deviation is sigma^2.
        let se = 1.7 / (n as f64).sqrt();
        assert!((mean - 1.7).abs() <= 3.0 * se, "mean {mean}");
    }

    #[test]
    fn vanishing_fading_variance_vanishes_gain() {
        let p = ChannelParams::new(3e9, 2.9, 1e-20, 1e-300).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(sample_gain(&mut rng, 0, 20.0, &p).unwrap().gain < 1e-300);
    }

    #[test]
    fn gain_draws_are_reproducible() {
        let p = params();
        let a = sample_gain(&mut ChaCha8Rng::seed_from_u64(9), 4, 120.0, &p).unwrap();
        let b = sample_gain(&mut ChaCha8Rng::seed_from_u64(9), 4, 120.0, &p).unwrap();
        assert_eq!(a.gain.to_bits(), b.gain.to_bits());
    }

    #[test]
    fn rate_at_unit_snr() {
        let n0 = 1e-20;
        let gain = 1e-9;
        let b = 1e6;
        let power = b * n0 / gain;
        let r = achievable_rate(b, power, gain, n0).unwrap();
        assert!((r - 1e6).abs() < 1e-6);
        assert_eq!(achievable_rate(b, 0.0, gain, n0).unwrap(), 0.0);
        assert_eq!(achievable_rate(0.0, 1.0, gain, n0).unwrap(), 0.0);
        assert!(achievable_rate(-1.0, 1.0, gain, n0).is_err());
        assert!(achievable_rate(1.0, -1.0, gain, n0).is_err());
    }

    #[test]
    fn rate_regression_at_table_values() {
        let p = params();
        let gain = pathloss(100.0, &p).unwrap();
        let r = achievable_rate(20e6, dbm_to_watts(20.0), gain, p.noise_psd).unwrap();
        // SNR = 0.1 * 1.00365e-10 / (2e7 * 10^-20.4) = 126.052
        let snr = 0.1 * gain / (20e6 * p.noise_psd);
        assert!((r - 20e6 * (1.0 + snr).log2()).abs() < 1e-3);
        assert!((r - 139_785_540.811_231_6).abs() < 1e-3, "{r}");
    }

    #[test]
    fn comm_time_cases() {
        assert_eq!(comm_time(1e6, 1e6), 1.0);
        assert_eq!(comm_time(1e6, 0.0), f64::INFINITY);
        assert_eq!(comm_time(3e5, 2e6), comm_time(3e5, 1e6) / 2.0);
    }

    #[test]
    fn outage_limits() {
        let p = params();
        let tiny = outage_probability(1e6, 0.1, 100.0, &p, 1e-9, 1e-3).unwrap();
        assert!(tiny < 1e-12);
        assert_eq!(
            outage_probability(0.0, 0.1, 100.0, &p, 640.0, 1e-3).unwrap(),
            1.0
        );
        assert_eq!(
            outage_probability(1e6, 0.0, 100.0, &p, 640.0, 1e-3).unwrap(),
            1.0
        );
    }

    #[test]
    fn outage_half_when_threshold_is_ln2() {
        let p = params();
        let (b, d, s, deadline) = (1e6, 200.0, 2e3, 1e-3);
        // Choose P so that Q / P = ln 2.
        let q = b * p.noise_psd / (pathloss(d, &p).unwrap() * p.fading_variance)
            * (2f64.powf(s / (b * deadline)) - 1.0);
        let power = q / LN_2;
        let pr = outage_probability(b, power, d, &p, s, deadline).unwrap();
        assert!((pr - 0.5).abs() < 1e-12);
    }

    #[test]
    fn transmission_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!((0..1000).all(|_| sample_transmission(&mut rng, 0.0)));
        assert!((0..1000).all(|_| !sample_transmission(&mut rng, 1.0)));
    }

    #[test]
    fn transmission_failure_frequency() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 10_000;
        let failures = (0..n)
            .filter(|_| !sample_transmission(&mut rng, 0.3))
            .count();
        let sigma = (0.3 * 0.7 / n as f64).sqrt();
        assert!((failures as f64 / n as f64 - 0.3).abs() <= 3.0 * sigma);
    }
}
