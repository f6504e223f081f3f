//! Frequency-selective fading in the subcarrier domain.
//!
//! With a cyclic prefix longer than the channel and a channel that is static
//! over a frame, each subcarrier sees a flat complex gain `h_k`, so the link
//! is simulated directly as `r = √p·h_k·s + v` without an IFFT.

use std::path::Path;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_SUBCARRIERS: usize = 512;
pub const DEFAULT_SPACING_HZ: f64 = 30e3;

const TDL_C_300NS: &str = include_str!("../data/tdl-c-300ns.json");

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tap {
    pub delay_s: f64,
    /// Linear power, normalized over the profile.
    pub power: f64,
}

/// Power-delay profile of a tapped delay line, normalized to unit total power.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TapProfile {
    pub label: String,
    taps: Vec<Tap>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TapRecord {
    delay_ns: f64,
    power_db: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ProfileFile {
    label: String,
    taps: Vec<TapRecord>,
}

impl TapProfile {
    /// Normalize `(delay_s, linear power)` pairs into a profile.
    pub fn new(label: impl Into<String>, taps: Vec<(f64, f64)>) -> Result<Self> {
        if taps.is_empty() {
            return Err(Error::InvalidArgument("tap profile has no taps".into()));
        }
        if taps
            .iter()
            .any(|&(d, p)| !(d >= 0.0 && d.is_finite()) || !(p >= 0.0 && p.is_finite()))
        {
            return Err(Error::InvalidArgument(
                "tap delays and powers must be finite and nonnegative".into(),
            ));
        }
        let total: f64 = taps.iter().map(|t| t.1).sum();
        if !(total > 0.0) {
            return Err(Error::InvalidArgument(
                "tap profile carries no power".into(),
            ));
        }
        Ok(Self {
            label: label.into(),
            taps: taps
                .into_iter()
                .map(|(delay_s, p)| Tap {
                    delay_s,
                    power: p / total,
                })
                .collect(),
        })
    }

    /// Exponential power-delay profile with the given RMS delay spread.
    ///
    /// Taps sit every `rms/4` out to `10·rms`, with powers `∝ exp(-τ/rms)`.
    pub fn exponential(rms_ns: f64) -> Result<Self> {
        if !(rms_ns > 0.0 && rms_ns.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "RMS delay spread {rms_ns} ns must be positive"
            )));
        }
        let rms = rms_ns * 1e-9;
        let taps = (0..=40)
            .map(|i| {
                let tau = i as f64 * rms / 4.0;
                (tau, (-tau / rms).exp())
            })
            .collect();
        Self::new(format!("exp-pdp({rms_ns})"), taps)
    }

    /// The TDL-C profile scaled to a 300 ns delay spread.
    pub fn tdl_c() -> Self {
        Self::from_json(TDL_C_300NS.as_bytes()).expect("bundled profile parses")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let file: ProfileFile = serde_json::from_slice(bytes).map_err(|e| Error::Malformed {
            what: "tap profile",
            detail: e.to_string(),
        })?;
        Self::new(
            file.label,
            file.taps
                .iter()
                .map(|t| (t.delay_ns * 1e-9, 10f64.powf(t.power_db / 10.0)))
                .collect(),
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&bytes)
    }

    /// Resolve a profile reference: `exp-pdp(<rms_ns>)`, `tdl-c`, or a path
    /// to a profile file.
    pub fn resolve(reference: &str) -> Result<Self> {
        let r = reference.trim();
        if let Some(inner) = r.strip_prefix("exp-pdp(").and_then(|s| s.strip_suffix(')')) {
            let rms: f64 = inner.trim().parse().map_err(|_| Error::Malformed {
                what: "profile reference",
                detail: format!("bad RMS delay in {r:?}"),
            })?;
            return Self::exponential(rms);
        }
        if r.eq_ignore_ascii_case("tdl-c") {
            return Ok(Self::tdl_c());
        }
        Self::load(r)
    }

    pub fn taps(&self) -> &[Tap] {
        &self.taps
    }

    pub fn rms_delay_spread(&self) -> f64 {
        let mean: f64 = self.taps.iter().map(|t| t.power * t.delay_s).sum();
        let second: f64 = self
            .taps
            .iter()
            .map(|t| t.power * t.delay_s * t.delay_s)
            .sum();
        (second - mean * mean).max(0.0).sqrt()
    }

    /// Frequency response of fixed tap gains at `n_sc` subcarriers.
    pub fn frequency_response(
        &self,
        tap_gains: &[Complex64],
        n_sc: usize,
        spacing: f64,
    ) -> Vec<Complex64> {
        let mut h = vec![Complex64::new(0.0, 0.0); n_sc];
        for (t, &g) in self.taps.iter().zip(tap_gains) {
            let omega = -2.0 * std::f64::consts::PI * spacing * t.delay_s;
            let step = Complex64::from_polar(1.0, omega);
            let mut phasor = Complex64::new(1.0, 0.0);
            for (k, hk) in h.iter_mut().enumerate() {
                // resync the recurrence periodically to bound drift
                if k % 64 == 0 {
                    phasor = Complex64::from_polar(1.0, omega * k as f64);
                }
                *hk += g * phasor;
                phasor *= step;
            }
        }
        h
    }
}

/// One coherence block: per-subcarrier gains plus the noise level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelRealization {
    pub gains: Vec<Complex64>,
    pub noise_var: f64,
    pub subcarrier_spacing: f64,
    pub seed: u64,
}

impl ChannelRealization {
    /// Deterministic channel from explicit gains, mostly for tests.
    pub fn from_gains(gains: Vec<Complex64>, noise_var: f64) -> Result<Self> {
        if gains.is_empty() || !(noise_var > 0.0) {
            return Err(Error::InvalidArgument(
                "need at least one subcarrier and positive noise".into(),
            ));
        }
        Ok(Self {
            gains,
            noise_var,
            subcarrier_spacing: DEFAULT_SPACING_HZ,
            seed: 0,
        })
    }

    pub fn n_sc(&self) -> usize {
        self.gains.len()
    }

    /// `|h_k|²` per subcarrier.
    pub fn gain_powers(&self) -> Vec<f64> {
        self.gains.iter().map(|h| h.norm_sqr()).collect()
    }

    pub fn digest(&self) -> String {
        let flat: Vec<f64> = self
            .gains
            .iter()
            .flat_map(|h| [h.re, h.im])
            .chain([self.noise_var, self.subcarrier_spacing])
            .collect();
        crate::digest::f64s_hex(&flat)
    }
}

/// Draw Rayleigh tap gains for `profile` and evaluate them on the subcarrier grid.
pub fn realize_channel(
    profile: &TapProfile,
    n_sc: usize,
    spacing: f64,
    noise_var: f64,
    seed: u64,
) -> Result<ChannelRealization> {
    if n_sc == 0 || !(spacing > 0.0) || !(noise_var > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "need n_sc >= 1, spacing > 0 and noise_var > 0 (got {n_sc}, {spacing}, {noise_var})"
        )));
    }
    let mut r = rng::stream(&[seed, rng::tag::CHANNEL]);
    let tap_gains: Vec<Complex64> = profile
        .taps
        .iter()
        .map(|t| complex_gaussian(&mut r, t.power))
        .collect();
    Ok(ChannelRealization {
        gains: profile.frequency_response(&tap_gains, n_sc, spacing),
        noise_var,
        subcarrier_spacing: spacing,
        seed,
    })
}

/// Circularly-symmetric complex Gaussian with total variance `var`.
#[inline]
pub fn complex_gaussian<R: Rng + ?Sized>(r: &mut R, var: f64) -> Complex64 {
    let sd = (0.5 * var).sqrt();
    Complex64::new(
        sd * r.sample::<f64, _>(StandardNormal),
        sd * r.sample::<f64, _>(StandardNormal),
    )
}

/// `√p·h·s + v` with `v ~ CN(0, noise_var)`.
#[inline]
pub fn transmit_symbol<R: Rng + ?Sized>(
    s: Complex64,
    power: f64,
    h: Complex64,
    noise_var: f64,
    r: &mut R,
) -> Complex64 {
    h * s * power.sqrt() + complex_gaussian(r, noise_var)
}

/// Zero-forcing equalization with perfect channel knowledge.
pub fn equalize(received: Complex64, power: f64, h: Complex64) -> Result<Complex64> {
    let g = h.norm_sqr();
    if !(power > 0.0) || g == 0.0 {
        return Err(Error::DegenerateEqualizer { power, gain: g });
    }
    Ok(received / (h * power.sqrt()))
}

/// Convert an SNR in dB to the noise variance for per-subcarrier power `p`.
pub fn noise_var_for_snr_db(snr_db: f64, per_subcarrier_power: f64) -> f64 {
    per_subcarrier_power / 10f64.powf(snr_db / 10.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profile_validation() {
        assert!(TapProfile::new("empty", vec![]).is_err());
        assert!(TapProfile::new("neg", vec![(0.0, -1.0)]).is_err());
        assert!(
            realize_channel(&TapProfile::exponential(300.0).unwrap(), 0, 30e3, 1.0, 1).is_err()
        );
        let p = TapProfile::new("two", vec![(0.0, 3.0), (1e-7, 1.0)]).unwrap();
        let total: f64 = p.taps().iter().map(|t| t.power).sum();
        assert!((total - 1.0).abs() < 1e-15);
    }

    #[test]
    fn bundled_and_generated_profiles() {
        let c = TapProfile::tdl_c();
        assert_eq!(c.taps().len(), 24);
        let total: f64 = c.taps().iter().map(|t| t.power).sum();
        assert!((total - 1.0).abs() < 1e-12);
        // TDL-C is normalized to unit RMS delay before scaling
        assert!(
            (c.rms_delay_spread() - 300e-9).abs() < 15e-9,
            "{}",
            c.rms_delay_spread()
        );

        let e = TapProfile::exponential(300.0).unwrap();
        assert!(
            (e.rms_delay_spread() - 300e-9).abs() < 30e-9,
            "{}",
            e.rms_delay_spread()
        );
        assert_eq!(TapProfile::resolve("exp-pdp(300)").unwrap(), e);
        assert_eq!(TapProfile::resolve("tdl-c").unwrap(), c);
        assert!(TapProfile::resolve("exp-pdp(abc)").is_err());
        assert!(TapProfile::resolve("/no/such/profile.json").is_err());
    }

    #[test]
    fn recurrence_matches_direct_sum() {
        let p = TapProfile::tdl_c();
        let gains: Vec<Complex64> = (0..p.taps().len())
            .map(|i| Complex64::new((i as f64 * 0.7).cos(), (i as f64 * 1.3).sin()))
            .collect();
        let h = p.frequency_response(&gains, 1024, 15e3);
        for (k, hk) in h.iter().enumerate() {
            let direct: Complex64 = p
                .taps()
                .iter()
                .zip(&gains)
                .map(|(t, g)| {
                    g * Complex64::from_polar(
                        1.0,
                        -2.0 * std::f64::consts::PI * 15e3 * k as f64 * t.delay_s,
                    )
                })
                .sum();
            assert!(
                (hk - direct).norm() < 1e-12,
                "k = {k}: {}",
                (hk - direct).norm()
            );
        }
    }

    #[test]
    fn single_tap_is_flat() {
        let p = TapProfile::new("flat", vec![(0.0, 1.0)]).unwrap();
        let ch = realize_channel(&p, 64, 30e3, 0.1, 9).unwrap();
        let g0 = ch.gains[0];
        assert!(ch.gains.iter().all(|h| (h - g0).norm() < 1e-15));
    }

    #[test]
    fn two_taps_half_symbol_apart_alternate() {
        let spacing = 30e3;
        let p = TapProfile::new("2path", vec![(0.0, 1.0), (1.0 / (2.0 * spacing), 1.0)]).unwrap();
        let ch = realize_channel(&p, 32, spacing, 1.0, 4).unwrap();
        for k in 0..30 {
            assert!((ch.gains[k] - ch.gains[k + 2]).norm() < 1e-9);
        }
        // closed form: h_k = g0 + (-1)^k g1
        let sum = ch.gains[0];
        let diff = ch.gains[1];
        let (g0, g1) = ((sum + diff) / 2.0, (sum - diff) / 2.0);
        assert!((ch.gains[4] - (g0 + g1)).norm() < 1e-9);
        assert!((ch.gains[5] - (g0 - g1)).norm() < 1e-9);
    }

    #[test]
    fn response_continuous_for_small_spacing() {
        let p = TapProfile::tdl_c();
        let ch = realize_channel(&p, 256, 10.0, 1.0, 2).unwrap();
        for w in ch.gains.windows(2) {
            assert!((w[1] - w[0]).norm() < 1e-3);
        }
    }

    #[test]
    fn mean_gain_is_unity() {
        let p = TapProfile::exponential(300.0).unwrap();
        let n = 10_000;
        let gains: Vec<Vec<Complex64>> = (0..n)
            .map(|s| realize_channel(&p, 512, 30e3, 1.0, s).unwrap().gains)
            .collect();
        for k in [0usize, 100, 511] {
            let samples: Vec<f64> = gains.iter().map(|g| g[k].norm_sqr()).collect();
            let mean = samples.iter().sum::<f64>() / n as f64;
            let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se = (var / n as f64).sqrt();
            assert!((mean - 1.0).abs() < 3.0 * se, "k={k}: {mean} ± {se}");
        }
    }

    #[test]
    fn transmit_and_equalize() {
        let mut r = rng::stream(&[1]);
        let h = Complex64::new(0.3, -1.1);
        let s = Complex64::new(0.7, 0.7);
        let clean = transmit_symbol(s, 2.0, h, 0.0, &mut r);
        assert!((clean - h * s * 2f64.sqrt()).norm() < 1e-15);
        assert!((equalize(clean, 2.0, h).unwrap() - s).norm() < 1e-15);
        assert!(equalize(clean, 0.0, h).is_err());
        assert!(equalize(clean, 1.0, Complex64::new(0.0, 0.0)).is_err());

        let silent = transmit_symbol(s, 0.0, h, 1.0, &mut r);
        assert!(silent.norm() > 0.0);
    }

    #[test]
    fn empirical_snr_and_post_equalizer_noise() {
        let mut r = rng::stream(&[2]);
        let h = Complex64::new(0.8, 0.5);
        let (p, noise_var) = (1.7, 0.05);
        let gamma = p * h.norm_sqr() / noise_var;
        let n = 1_000_000;
        let s = Complex64::new(
            std::f64::consts::FRAC_1_SQRT_2,
            -std::f64::consts::FRAC_1_SQRT_2,
        );
        let (mut noise_pow, mut eq_pow) = (0.0, 0.0);
        for _ in 0..n {
            let rx = transmit_symbol(s, p, h, noise_var, &mut r);
            noise_pow += (rx - h * s * p.sqrt()).norm_sqr();
            eq_pow += (equalize(rx, p, h).unwrap() - s).norm_sqr();
        }
        let measured = p * h.norm_sqr() / (noise_pow / n as f64);
        assert!((measured - gamma).abs() / gamma < 0.02);
        let eq_var = eq_pow / n as f64;
        let expect = noise_var / (p * h.norm_sqr());
        assert!((eq_var - expect).abs() / expect < 0.02);
    }

    #[test]
    fn snr_conversion() {
        assert!((noise_var_for_snr_db(10.0, 1.0) - 0.1).abs() < 1e-15);
        assert!((noise_var_for_snr_db(0.0, 2.0) - 2.0).abs() < 1e-15);
    }
}
