//! Monte Carlo harness for the full link.
//!
//! A trial quantizes one draw of the latent vector under an allocation plan,
//! pushes the bits through QAM over the faded subcarriers, and reconstructs
//! at the receiver. Experiments repeat this over channel realizations and
//! SNR points and compare per-element distortion with its target.

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocator::{optimize, AllocationPlan, AllocatorConfig, LatentStats};
use crate::channel::{
    equalize, noise_var_for_snr_db, realize_channel, transmit_symbol, ChannelRealization,
    TapProfile, DEFAULT_SPACING_HZ, DEFAULT_SUBCARRIERS,
};
use crate::digest;
use crate::error::{Error, Result};
use crate::library::{QuantizerLibrary, DEFAULT_DELTA};
use crate::modem::{awgn_ber, demodulate, modulate, snr_threshold, BerCount, ModulationOrder};
use crate::quantizer::{BscVector, Codeword, ScalarQuantizer};
use crate::rng::{self, tag};

/// How per-element variances are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "kebab-case")]
pub enum VarianceLaw {
    /// Log-uniform over `[lo, hi]`; `hi` defaults to the library's largest
    /// feasible variance. With `below_delta` set, that fraction of elements
    /// is drawn from `[lo, δ)` and the rest from `[δ, hi]`.
    LogUniform {
        lo: f64,
        #[serde(default)]
        hi: Option<f64>,
        #[serde(default)]
        below_delta: Option<f64>,
    },
    /// Explicit variances, cycled over the elements.
    Fixed { values: Vec<f64> },
    /// Pareto with shape 1.2 and scale 0.05, clamped.
    HeavyTail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "kebab-case")]
pub enum MeanLaw {
    Zero,
    Uniform { lo: f64, hi: f64 },
}

/// Synthetic stand-in for the latent statistics of a learned codec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSourceConfig {
    pub n_latents: usize,
    pub variance_law: VarianceLaw,
    pub mean_law: MeanLaw,
    pub clip_3sigma: bool,
    pub seed: u64,
}

impl Default for SyntheticSourceConfig {
    fn default() -> Self {
        Self {
            n_latents: 512,
            variance_law: VarianceLaw::LogUniform {
                lo: 0.01,
                hi: None,
                below_delta: None,
            },
            mean_law: MeanLaw::Zero,
            clip_3sigma: true,
            seed: 0,
        }
    }
}

impl SyntheticSourceConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_latents == 0 {
            return bad("source needs at least one latent".into());
        }
        match &self.variance_law {
            VarianceLaw::LogUniform {
                lo,
                hi,
                below_delta,
            } => {
                if !(*lo > 0.0 && lo.is_finite())
                    || hi.is_some_and(|h| !(h >= *lo && h.is_finite()))
                {
                    return bad(format!(
                        "log-uniform bounds need 0 < lo <= hi, got {lo}, {hi:?}"
                    ));
                }
                if below_delta.is_some_and(|f| !(0.0..=1.0).contains(&f)) {
                    return bad(format!(
                        "below_delta fraction {below_delta:?} outside [0, 1]"
                    ));
                }
            }
            VarianceLaw::Fixed { values } => {
                if values.is_empty() || values.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                    return bad(
                        "fixed variances must be a nonempty list of finite nonnegative values"
                            .into(),
                    );
                }
            }
            VarianceLaw::HeavyTail => {}
        }
        if let MeanLaw::Uniform { lo, hi } = self.mean_law {
            if !(lo <= hi && lo.is_finite() && hi.is_finite()) {
                return bad(format!("mean range [{lo}, {hi}] is empty"));
            }
        }
        Ok(())
    }
}

fn log_uniform<R: Rng + ?Sized>(r: &mut R, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return lo;
    }
    (lo.ln() + r.gen::<f64>() * (hi.ln() - lo.ln())).exp()
}

/// Draw `(μ_i, σ_i²)` from the source laws, clamping variances to
/// `max_variance`. Deterministic in `cfg.seed`.
pub fn generate_stats(
    cfg: &SyntheticSourceConfig,
    max_variance: f64,
    delta: f64,
) -> Result<LatentStats> {
    cfg.validate()?;
    let mut r = rng::stream(&[cfg.seed, tag::SOURCE]);
    let n = cfg.n_latents;
    let variances: Vec<f64> = match &cfg.variance_law {
        VarianceLaw::LogUniform {
            lo,
            hi,
            below_delta,
        } => {
            let hi = hi.unwrap_or(max_variance).max(*lo);
            (0..n)
                .map(|_| match below_delta {
                    None => log_uniform(&mut r, *lo, hi),
                    Some(f) => {
                        if r.gen::<f64>() < *f {
                            log_uniform(&mut r, *lo, delta.max(*lo))
                        } else {
                            log_uniform(&mut r, delta.max(*lo), hi)
                        }
                    }
                })
                .collect()
        }
        VarianceLaw::Fixed { values } => values.iter().copied().cycle().take(n).collect(),
        VarianceLaw::HeavyTail => (0..n)
            .map(|_| 0.05 * (1.0 - r.gen::<f64>()).powf(-1.0 / 1.2))
            .collect(),
    };
    let means = match cfg.mean_law {
        MeanLaw::Zero => vec![0.0; n],
        MeanLaw::Uniform { lo, hi } => (0..n).map(|_| lo + (hi - lo) * r.gen::<f64>()).collect(),
    };
    Ok(LatentStats::new(means, variances)?.clamped(max_variance))
}

/// One draw `y_i ~ N(μ_i, σ_i²)`, optionally clipped to `μ_i ± 3σ_i`.
pub fn sample_latents<R: Rng + ?Sized>(
    stats: &LatentStats,
    clip_3sigma: bool,
    r: &mut R,
) -> Vec<f64> {
    stats
        .means()
        .iter()
        .enumerate()
        .map(|(i, &mu)| {
            let mut z: f64 = r.sample(StandardNormal);
            if clip_3sigma {
                z = z.clamp(-3.0, 3.0);
            }
            mu + stats.std_dev(i) * z
        })
        .collect()
}

/// Statistics plus one sample, the latter drawn from `r`.
pub fn generate_latents<R: Rng + ?Sized>(
    cfg: &SyntheticSourceConfig,
    max_variance: f64,
    delta: f64,
    r: &mut R,
) -> Result<(LatentStats, Vec<f64>)> {
    let stats = generate_stats(cfg, max_variance, delta)?;
    let y = sample_latents(&stats, cfg.clip_3sigma, r);
    Ok((stats, y))
}

/// Outcome of one frame through the link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub seed: u64,
    pub epsilon_star: f64,
    pub t_sym: u64,
    pub bits_sent: u64,
    pub payload_bits: u64,
    pub bits: Vec<u32>,
    pub reconstruction: Vec<f64>,
    pub sq_error: Vec<f64>,
    /// `σ_i²/(σ_i²+1)`.
    pub target: Vec<f64>,
    /// `σ_i²·D*(1; b_i, ε̄*)`.
    pub predicted: Vec<f64>,
    pub subcarrier_errors: Vec<u64>,
    pub subcarrier_bits: Vec<u64>,
}

impl TrialResult {
    /// Realized BER on subcarrier `k`, if it carried any bits.
    pub fn realized_ber(&self, k: usize) -> Option<f64> {
        (self.subcarrier_bits[k] > 0)
            .then(|| self.subcarrier_errors[k] as f64 / self.subcarrier_bits[k] as f64)
    }

    pub fn bit_errors(&self) -> u64 {
        self.subcarrier_errors.iter().sum()
    }
}

fn quantizer_for<'a>(lib: &'a QuantizerLibrary, b: u32, q: usize) -> Result<&'a ScalarQuantizer> {
    lib.quantizer(b, q).ok_or_else(|| {
        Error::InvalidArgument(format!("library has no quantizer for b = {b}, index {q}"))
    })
}

/// Send one latent vector through the link under `plan`.
pub fn run_trial<R: Rng + ?Sized>(
    stats: &LatentStats,
    y: &[f64],
    plan: &AllocationPlan,
    lib: &QuantizerLibrary,
    channel: &ChannelRealization,
    r: &mut R,
) -> Result<TrialResult> {
    run_trial_with_noise(stats, y, plan, lib, channel, channel.noise_var, r)
}

/// [`run_trial`] with the receiver noise variance overridden; `0` gives an
/// error-free link.
pub fn run_trial_with_noise<R: Rng + ?Sized>(
    stats: &LatentStats,
    y: &[f64],
    plan: &AllocationPlan,
    lib: &QuantizerLibrary,
    channel: &ChannelRealization,
    noise_var: f64,
    r: &mut R,
) -> Result<TrialResult> {
    if y.len() != stats.len() || plan.bits.len() != stats.len() {
        return Err(Error::InvalidArgument(format!(
            "{} samples and {} bit depths for {} elements",
            y.len(),
            plan.bits.len(),
            stats.len()
        )));
    }
    if plan.channel_digest != channel.digest() || plan.stats_digest != stats.digest() {
        return Err(Error::InvalidArgument(
            "plan was built for a different channel or source".into(),
        ));
    }
    if plan.library_digest != lib.digest() {
        return Err(Error::InvalidArgument(
            "plan was built for a different library".into(),
        ));
    }
    let q = plan.epsilon_index;
    let n_sc = channel.n_sc();

    // transmitter: codewords in element order, MSB first, then padding
    let mapping = plan.mapping()?;
    let mut stream: Vec<bool> = Vec::with_capacity(mapping.slots.len());
    for (i, &b) in plan.bits.iter().enumerate() {
        if b == 0 {
            continue;
        }
        let cw = quantizer_for(lib, b, q)?.quantize(y[i], stats.means()[i], stats.std_dev(i));
        stream.extend((0..b).map(|j| (cw >> (b - 1 - j)) & 1 == 1));
    }
    stream.extend(plan.dummy_stream());
    if stream.len() != mapping.slots.len() {
        return Err(Error::Internal(format!(
            "{} stream bits for {} resource slots",
            stream.len(),
            mapping.slots.len()
        )));
    }

    let t_sym = plan.t_sym as usize;
    let mut labels = vec![0u32; t_sym * n_sc];
    for (&bit, s) in stream.iter().zip(&mapping.slots) {
        let m = plan.modulations[s.subcarrier as usize].bits();
        if bit {
            labels[s.symbol as usize * n_sc + s.subcarrier as usize] |=
                1 << (m - 1 - u32::from(s.position));
        }
    }

    // link
    let mut received = vec![0u32; t_sym * n_sc];
    let mut subcarrier_errors = vec![0u64; n_sc];
    let mut subcarrier_bits = vec![0u64; n_sc];
    for t in 0..t_sym {
        for (k, &m) in plan.modulations.iter().enumerate() {
            if !m.is_active() {
                continue;
            }
            let idx = t * n_sc + k;
            let (p, h) = (plan.powers[k], channel.gains[k]);
            let rx = transmit_symbol(modulate(labels[idx], m)?, p, h, noise_var, r);
            received[idx] = demodulate(equalize(rx, p, h)?, m)?;
            subcarrier_errors[k] += u64::from((received[idx] ^ labels[idx]).count_ones());
            subcarrier_bits[k] += u64::from(m.bits());
        }
    }

    // receiver: invert the mapping and dequantize
    let rx_stream: Vec<bool> = mapping
        .slots
        .iter()
        .map(|s| {
            let m = plan.modulations[s.subcarrier as usize].bits();
            (received[s.symbol as usize * n_sc + s.subcarrier as usize]
                >> (m - 1 - u32::from(s.position)))
                & 1
                == 1
        })
        .collect();
    let mut cursor = 0usize;
    let mut reconstruction = Vec::with_capacity(stats.len());
    let mut predicted = Vec::with_capacity(stats.len());
    for (i, &b) in plan.bits.iter().enumerate() {
        let (mu, var) = (stats.means()[i], stats.variances()[i]);
        if b == 0 {
            reconstruction.push(mu);
            predicted.push(var);
            continue;
        }
        let cw = rx_stream[cursor..cursor + b as usize]
            .iter()
            .fold(0 as Codeword, |acc, &bit| (acc << 1) | Codeword::from(bit));
        cursor += b as usize;
        reconstruction.push(quantizer_for(lib, b, q)?.dequantize(cw, mu, stats.std_dev(i)));
        predicted.push(var * lib.distortion(b, q));
    }

    Ok(TrialResult {
        seed: plan.seed,
        epsilon_star: plan.epsilon_star,
        t_sym: plan.t_sym,
        bits_sent: mapping.slots.len() as u64,
        payload_bits: mapping.payload_bits,
        bits: plan.bits.clone(),
        sq_error: y
            .iter()
            .zip(&reconstruction)
            .map(|(a, b)| (a - b).powi(2))
            .collect(),
        reconstruction,
        target: stats.variances().iter().map(|&v| v / (v + 1.0)).collect(),
        predicted,
        subcarrier_errors,
        subcarrier_bits,
    })
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub samples: u64,
}

impl MeanEstimate {
    pub fn from_sums(sum: f64, sum_sq: f64, n: u64) -> Self {
        if n == 0 {
            return Self {
                mean: 0.0,
                std_error: 0.0,
                samples: 0,
            };
        }
        let nf = n as f64;
        let mean = sum / nf;
        let var = if n > 1 {
            ((sum_sq - nf * mean * mean) / (nf - 1.0)).max(0.0)
        } else {
            0.0
        };
        Self {
            mean,
            std_error: (var / nf).sqrt(),
            samples: n,
        }
    }
}

/// Empirical MSE of `q` applied to `y ~ N(mean, std²)` with each codeword
/// bit flipped independently per `channel`.
pub fn bsc_mse(
    q: &ScalarQuantizer,
    channel: &BscVector,
    mean: f64,
    std: f64,
    samples: u64,
    seed: u64,
) -> Result<MeanEstimate> {
    let b = q.bit_depth();
    if channel.bits() != b {
        return Err(Error::InvalidArgument(format!(
            "{}-bit channel for a {b}-bit quantizer",
            channel.bits()
        )));
    }
    if !(std > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "standard deviation {std} must be positive"
        )));
    }
    let mut r = rng::stream(&[seed, tag::BSC]);
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..samples {
        let y = mean + std * r.sample::<f64, _>(StandardNormal);
        let mut cw = q.quantize(y, mean, std);
        for (j, &p) in channel.flips().iter().enumerate() {
            if r.gen::<f64>() < p {
                cw ^= 1 << (b as usize - 1 - j);
            }
        }
        let e = (y - q.dequantize(cw, mean, std)).powi(2);
        sum += e;
        sum_sq += e * e;
    }
    Ok(MeanEstimate::from_sums(sum, sum_sq, samples))
}

fn default_profile() -> String {
    "exp-pdp(300)".into()
}

fn default_frames() -> usize {
    1
}

fn default_subcarriers() -> usize {
    DEFAULT_SUBCARRIERS
}

fn default_spacing() -> f64 {
    DEFAULT_SPACING_HZ
}

fn default_delta() -> f64 {
    DEFAULT_DELTA
}

fn default_power() -> f64 {
    1.0
}

/// Experiment description, loadable from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub source: SyntheticSourceConfig,
    /// `exp-pdp(<rms ns>)`, `tdl-c`, or a profile file path.
    #[serde(default = "default_profile")]
    pub channel_profile: String,
    pub snr_db: Vec<f64>,
    pub trials: usize,
    /// Latent draws sent over each channel realization.
    #[serde(default = "default_frames")]
    pub frames_per_realization: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub library: Option<PathBuf>,
    #[serde(default = "default_subcarriers")]
    pub n_subcarriers: usize,
    #[serde(default = "default_spacing")]
    pub subcarrier_spacing_hz: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// Average power per subcarrier; the budget is this times `n_subcarriers`.
    #[serde(default = "default_power")]
    pub per_subcarrier_power: f64,
    #[serde(default)]
    pub per_trial_detail: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            source: SyntheticSourceConfig::default(),
            channel_profile: default_profile(),
            snr_db: vec![5.0, 10.0, 15.0],
            trials: 200,
            frames_per_realization: 1,
            seed: 0,
            library: None,
            n_subcarriers: DEFAULT_SUBCARRIERS,
            subcarrier_spacing_hz: DEFAULT_SPACING_HZ,
            delta: DEFAULT_DELTA,
            per_subcarrier_power: 1.0,
            per_trial_detail: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.source.validate()?;
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.snr_db.is_empty() || self.snr_db.iter().any(|s| !s.is_finite()) {
            return bad("snr_db must be a nonempty list of finite values".into());
        }
        if self.trials == 0 || self.frames_per_realization == 0 {
            return bad("trials and frames_per_realization must be positive".into());
        }
        if self.n_subcarriers == 0 || !(self.subcarrier_spacing_hz > 0.0) {
            return bad("need at least one subcarrier and positive spacing".into());
        }
        if !(self.delta >= 0.0) || !(self.per_subcarrier_power > 0.0) {
            return bad("delta must be nonnegative and per-subcarrier power positive".into());
        }
        Ok(())
    }

    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self> {
        let cfg: Self = serde_json::from_slice(bytes).map_err(|e| Error::Malformed {
            what: "experiment config",
            detail: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn digest(&self) -> String {
        digest::json_hex(self)
    }
}

/// Seeds for every random stream a trial consumes.
///
/// Channel taps and latent draws depend only on the trial (and frame), so
/// every SNR point sees the same realizations; noise also depends on the
/// SNR index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrialStreams {
    pub experiment_seed: u64,
    pub snr_index: usize,
    pub trial: usize,
}

impl TrialStreams {
    pub fn channel_seed(&self) -> u64 {
        rng::derive_seed(&[self.experiment_seed, self.trial as u64, tag::CHANNEL])
    }

    pub fn plan_seed(&self) -> u64 {
        rng::derive_seed(&[
            self.experiment_seed,
            self.snr_index as u64,
            self.trial as u64,
            tag::DUMMY,
        ])
    }

    pub fn samples(&self, frame: usize) -> rng::StreamRng {
        rng::stream(&[
            self.experiment_seed,
            self.trial as u64,
            frame as u64,
            tag::SAMPLE,
        ])
    }

    pub fn noise(&self, frame: usize) -> rng::StreamRng {
        rng::stream(&[
            self.experiment_seed,
            self.snr_index as u64,
            self.trial as u64,
            frame as u64,
            tag::NOISE,
        ])
    }
}

/// Aggregate over all trials at one SNR point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub snr_db: f64,
    pub channel_label: String,
    pub trials: usize,
    pub frames_per_realization: usize,
    /// Trials where no BER target had a usable rate.
    pub outages: usize,
    pub mean_t_sym: f64,
    pub mean_epsilon_star: f64,
    pub mean_payload_bits: f64,
    pub mean_dummy_bits: f64,
    /// Pooled bit error rate over all active subcarriers.
    pub realized_ber: f64,
    pub variances: Vec<f64>,
    pub target: Vec<f64>,
    pub mean_distortion: Vec<f64>,
    pub std_error: Vec<f64>,
    pub elements_checked: usize,
    pub violations: usize,
    pub violation_rate: f64,
    pub seed: u64,
    pub config_digest: String,
    pub library_digest: String,
    pub stats_digest: String,
    pub tool_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trial_detail: Option<Vec<TrialResult>>,
}

impl ExperimentReport {
    pub const CSV_HEADER: &'static str = "snr_db,channel,trials,frames,outages,mean_t_sym,mean_epsilon_star,\
mean_payload_bits,mean_dummy_bits,realized_ber,elements_checked,violations,violation_rate,seed,config_digest";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.snr_db,
            self.channel_label,
            self.trials,
            self.frames_per_realization,
            self.outages,
            self.mean_t_sym,
            self.mean_epsilon_star,
            self.mean_payload_bits,
            self.mean_dummy_bits,
            self.realized_ber,
            self.elements_checked,
            self.violations,
            self.violation_rate,
            self.seed,
            self.config_digest
        )
    }
}

pub fn reports_to_csv(reports: &[ExperimentReport]) -> String {
    let mut out = String::from(ExperimentReport::CSV_HEADER);
    out.push('\n');
    for r in reports {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

/// Per-realization outcome: the plan's frames, or an outage.
type TrialOutcome = Option<Vec<TrialResult>>;

fn run_realization(
    cfg: &ExperimentConfig,
    lib: &QuantizerLibrary,
    profile: &TapProfile,
    stats: &LatentStats,
    noise_var: f64,
    streams: TrialStreams,
) -> Result<TrialOutcome> {
    let channel = realize_channel(
        profile,
        cfg.n_subcarriers,
        cfg.subcarrier_spacing_hz,
        noise_var,
        streams.channel_seed(),
    )?;
    let alloc = AllocatorConfig {
        p_tot: cfg.per_subcarrier_power * cfg.n_subcarriers as f64,
        delta: cfg.delta,
        seed: streams.plan_seed(),
    };
    let plan = match optimize(lib, stats, &channel, &alloc) {
        Ok(p) => p,
        Err(Error::NoFeasibleRate) => return Ok(None),
        Err(e) => return Err(e),
    };
    (0..cfg.frames_per_realization)
        .map(|f| {
            let y = sample_latents(stats, cfg.source.clip_3sigma, &mut streams.samples(f));
            run_trial(stats, &y, &plan, lib, &channel, &mut streams.noise(f))
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

/// Run every SNR point of `cfg` against `lib`, one report per point.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    lib: &QuantizerLibrary,
) -> Result<Vec<ExperimentReport>> {
    cfg.validate()?;
    let profile = TapProfile::resolve(&cfg.channel_profile)?;
    let stats = generate_stats(&cfg.source, lib.max_feasible_variance(), cfg.delta)?;
    let config_digest = cfg.digest();
    let n = stats.len();

    cfg.snr_db
        .iter()
        .enumerate()
        .map(|(s, &snr_db)| {
            let noise_var = noise_var_for_snr_db(snr_db, cfg.per_subcarrier_power);
            let outcomes: Vec<TrialOutcome> = (0..cfg.trials)
                .into_par_iter()
                .map(|trial| {
                    let streams = TrialStreams {
                        experiment_seed: cfg.seed,
                        snr_index: s,
                        trial,
                    };
                    run_realization(cfg, lib, &profile, &stats, noise_var, streams)
                })
                .collect::<Result<_>>()?;

            let outages = outcomes.iter().filter(|o| o.is_none()).count();
            let served: Vec<&TrialResult> = outcomes.iter().flatten().flatten().collect();
            let realizations = (cfg.trials - outages).max(1) as f64;
            let plans: Vec<&TrialResult> = outcomes
                .iter()
                .flatten()
                .filter_map(|f| f.first())
                .collect();
            let mean_over_plans = |f: &dyn Fn(&TrialResult) -> f64| {
                plans.iter().map(|t| f(t)).sum::<f64>() / realizations
            };

            let mut sums = vec![(0.0, 0.0); n];
            for t in &served {
                for (acc, &e) in sums.iter_mut().zip(&t.sq_error) {
                    acc.0 += e;
                    acc.1 += e * e;
                }
            }
            let estimates: Vec<MeanEstimate> = sums
                .iter()
                .map(|&(a, b)| MeanEstimate::from_sums(a, b, served.len() as u64))
                .collect();
            let target: Vec<f64> = stats.variances().iter().map(|&v| v / (v + 1.0)).collect();
            let checked: Vec<usize> = (0..n)
                .filter(|&i| stats.variances()[i] >= cfg.delta)
                .collect();
            let violations = if served.is_empty() {
                0
            } else {
                checked
                    .iter()
                    .filter(|&&i| estimates[i].mean > target[i] + 3.0 * estimates[i].std_error)
                    .count()
            };
            let (errors, bits) = served.iter().fold((0u64, 0u64), |acc, t| {
                (
                    acc.0 + t.bit_errors(),
                    acc.1 + t.subcarrier_bits.iter().sum::<u64>(),
                )
            });

            let report = ExperimentReport {
                snr_db,
                channel_label: profile.label.clone(),
                trials: cfg.trials,
                frames_per_realization: cfg.frames_per_realization,
                outages,
                mean_t_sym: mean_over_plans(&|t| t.t_sym as f64),
                mean_epsilon_star: mean_over_plans(&|t| t.epsilon_star),
                mean_payload_bits: mean_over_plans(&|t| t.payload_bits as f64),
                mean_dummy_bits: mean_over_plans(&|t| (t.bits_sent - t.payload_bits) as f64),
                realized_ber: BerCount { errors, bits }.rate(),
                variances: stats.variances().to_vec(),
                target,
                mean_distortion: estimates.iter().map(|e| e.mean).collect(),
                std_error: estimates.iter().map(|e| e.std_error).collect(),
                elements_checked: checked.len(),
                violations,
                violation_rate: if checked.is_empty() {
                    0.0
                } else {
                    violations as f64 / checked.len() as f64
                },
                seed: cfg.seed,
                config_digest: config_digest.clone(),
                library_digest: lib.digest(),
                stats_digest: stats.digest(),
                tool_version: crate::TOOL_VERSION.to_string(),
                trial_detail: cfg
                    .per_trial_detail
                    .then(|| served.iter().map(|&t| t.clone()).collect()),
            };
            log::info!(
                "{snr_db} dB: mean T_sym {:.3}, mean eps* {:.5}, {} of {} elements violate",
                report.mean_t_sym,
                report.mean_epsilon_star,
                report.violations,
                report.elements_checked
            );
            Ok(report)
        })
        .collect()
}

/// One point of the modem-only BER check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BerCheckRow {
    pub bits_per_symbol: u32,
    pub target_ber: f64,
    pub snr: f64,
    pub measured: BerCount,
    pub relative_error: f64,
}

impl BerCheckRow {
    pub const CSV_HEADER: &'static str = "m,target_ber,snr,errors,bits,measured_ber,relative_error";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.bits_per_symbol,
            self.target_ber,
            self.snr,
            self.measured.errors,
            self.measured.bits,
            self.measured.rate(),
            self.relative_error
        )
    }
}

/// AWGN Monte Carlo at `γ_th(m, ε)` for every active order and target.
pub fn ber_check(targets: &[f64], bits_per_point: u64, seed: u64) -> Result<Vec<BerCheckRow>> {
    let points: Vec<(ModulationOrder, usize)> = ModulationOrder::ACTIVE
        .iter()
        .flat_map(|&m| (0..targets.len()).map(move |q| (m, q)))
        .collect();
    points
        .into_par_iter()
        .map(|(m, q)| {
            let target = targets[q];
            let snr = snr_threshold(m, target)?;
            let mut r = rng::stream(&[seed, u64::from(m.bits()), q as u64, tag::NOISE]);
            let measured = awgn_ber(m, snr, bits_per_point, &mut r)?;
            Ok(BerCheckRow {
                bits_per_symbol: m.bits(),
                target_ber: target,
                snr,
                measured,
                relative_error: (measured.rate() - target).abs() / target,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::library::{build_library, EpsilonGrid};
    use crate::quantizer::DesignConfig;
    use num_complex::Complex64;
    use std::sync::OnceLock;

    fn lib() -> &'static QuantizerLibrary {
        static LIB: OnceLock<QuantizerLibrary> = OnceLock::new();
        LIB.get_or_init(|| {
            let grid = EpsilonGrid::new(vec![0.005, 0.02, 0.05]).unwrap();
            let cfg = DesignConfig {
                restarts: 3,
                ..DesignConfig::default()
            };
            build_library(6, &grid, &cfg).unwrap()
        })
    }

    fn fixed(values: Vec<f64>, n: usize) -> SyntheticSourceConfig {
        SyntheticSourceConfig {
            n_latents: n,
            variance_law: VarianceLaw::Fixed { values },
            mean_law: MeanLaw::Uniform { lo: -1.0, hi: 1.0 },
            clip_3sigma: false,
            seed: 4,
        }
    }

    fn plan_for(stats: &LatentStats, ch: &ChannelRealization, seed: u64) -> AllocationPlan {
        let cfg = AllocatorConfig {
            p_tot: ch.n_sc() as f64,
            delta: DEFAULT_DELTA,
            seed,
        };
        optimize(lib(), stats, ch, &cfg).unwrap()
    }

    fn rayleigh(n_sc: usize, snr_db: f64, seed: u64) -> ChannelRealization {
        realize_channel(
            &TapProfile::exponential(300.0).unwrap(),
            n_sc,
            DEFAULT_SPACING_HZ,
            noise_var_for_snr_db(snr_db, 1.0),
            seed,
        )
        .unwrap()
    }

    #[test]
    fn degenerate_source_returns_means() {
        let (stats, y) =
            generate_latents(&fixed(vec![0.0], 5), 20.0, 0.4, &mut rng::stream(&[1])).unwrap();
        assert_eq!(y, stats.means());
    }

    #[test]
    fn sample_variance_matches() {
        let stats = LatentStats::new(vec![2.0, -1.0], vec![0.5, 9.0]).unwrap();
        let mut r = rng::stream(&[2]);
        let n = 100_000;
        let mut acc = [(0.0, 0.0); 2];
        let draws: Vec<Vec<f64>> = (0..n)
            .map(|_| sample_latents(&stats, false, &mut r))
            .collect();
        for (i, a) in acc.iter_mut().enumerate() {
            let mean: f64 = draws.iter().map(|d| d[i]).sum::<f64>() / n as f64;
            let dev: Vec<f64> = draws.iter().map(|d| (d[i] - mean).powi(2)).collect();
            let v = dev.iter().sum::<f64>() / (n - 1) as f64;
            // SE of the sample variance of a Gaussian is σ²·sqrt(2/(n-1))
            let se = stats.variances()[i] * (2.0 / (n - 1) as f64).sqrt();
            *a = (v, se);
            assert!(
                (v - stats.variances()[i]).abs() < 3.0 * se,
                "{v} vs {}",
                stats.variances()[i]
            );
        }
    }

    #[test]
    fn clipping_bounds_the_draw() {
        let stats = LatentStats::new(vec![1.0; 4], vec![4.0; 4]).unwrap();
        let mut r = rng::stream(&[3]);
        let worst = (0..20_000)
            .flat_map(|_| sample_latents(&stats, true, &mut r))
            .map(|y| (y - 1.0).abs() / 2.0)
            .fold(0.0, f64::max);
        assert_eq!(worst, 3.0);
    }

    #[test]
    fn generated_stats_respect_laws() {
        let cfg = SyntheticSourceConfig {
            n_latents: 2000,
            variance_law: VarianceLaw::LogUniform {
                lo: 0.01,
                hi: None,
                below_delta: Some(0.25),
            },
            ..SyntheticSourceConfig::default()
        };
        let s = generate_stats(&cfg, 20.0, 0.4).unwrap();
        assert!(s.variances().iter().all(|&v| (0.01..=20.0).contains(&v)));
        let below = s.variances().iter().filter(|&&v| v < 0.4).count() as f64 / 2000.0;
        assert!((below - 0.25).abs() < 0.05, "{below}");
        assert_eq!(generate_stats(&cfg, 20.0, 0.4).unwrap(), s);

        let heavy = SyntheticSourceConfig {
            variance_law: VarianceLaw::HeavyTail,
            ..cfg
        };
        let s = generate_stats(&heavy, 20.0, 0.4).unwrap();
        assert!(s.variances().iter().all(|&v| (0.05..=20.0).contains(&v)));
        assert!(s.variances().iter().any(|&v| v > 5.0));

        let bad = SyntheticSourceConfig {
            variance_law: VarianceLaw::LogUniform {
                lo: -1.0,
                hi: None,
                below_delta: None,
            },
            ..SyntheticSourceConfig::default()
        };
        assert!(generate_stats(&bad, 20.0, 0.4).is_err());
    }

    #[test]
    fn noiseless_link_is_bit_exact() {
        let src = SyntheticSourceConfig {
            n_latents: 40,
            variance_law: VarianceLaw::LogUniform {
                lo: 0.05,
                hi: None,
                below_delta: None,
            },
            mean_law: MeanLaw::Uniform { lo: -2.0, hi: 2.0 },
            clip_3sigma: true,
            seed: 8,
        };
        let lib = lib();
        let (stats, y) = generate_latents(
            &src,
            lib.max_feasible_variance(),
            0.4,
            &mut rng::stream(&[9]),
        )
        .unwrap();
        let ch = rayleigh(16, 10.0, 5);
        let plan = plan_for(&stats, &ch, 1);
        assert!(plan.t_sym > 0);
        let out =
            run_trial_with_noise(&stats, &y, &plan, lib, &ch, 0.0, &mut rng::stream(&[0])).unwrap();
        assert_eq!(out.bit_errors(), 0);
        for i in 0..stats.len() {
            let b = plan.bits[i];
            let want = if b == 0 {
                stats.means()[i]
            } else {
                let q = lib.quantizer(b, plan.epsilon_index).unwrap();
                q.dequantize(
                    q.quantize(y[i], stats.means()[i], stats.std_dev(i)),
                    stats.means()[i],
                    stats.std_dev(i),
                )
            };
            assert_eq!(out.reconstruction[i], want);
            assert_eq!(out.sq_error[i], (y[i] - want).powi(2));
        }
        assert_eq!(out.bits_sent, plan.t_sym * u64::from(plan.r_sym()));
    }

    #[test]
    fn trial_rejects_foreign_plan() {
        let stats = LatentStats::new(vec![0.0; 3], vec![1.0, 2.0, 3.0]).unwrap();
        let ch = rayleigh(8, 10.0, 1);
        let other = rayleigh(8, 10.0, 2);
        let plan = plan_for(&stats, &ch, 0);
        let y = vec![0.1, 0.2, 0.3];
        assert!(run_trial(&stats, &y, &plan, lib(), &other, &mut rng::stream(&[0])).is_err());
        assert!(run_trial(&stats, &y[..2], &plan, lib(), &ch, &mut rng::stream(&[0])).is_err());
    }

    #[test]
    fn realized_ber_tracks_target_per_subcarrier() {
        // one fixed plan, many frames: every active subcarrier sees BER ≈ ε̄*
        let stats = LatentStats::new(vec![0.0; 64], vec![8.0; 64]).unwrap();
        let ch = ChannelRealization::from_gains(
            (0..6)
                .map(|k| Complex64::new(0.4 + 0.3 * k as f64, 0.2))
                .collect(),
            noise_var_for_snr_db(12.0, 1.0),
        )
        .unwrap();
        let plan = plan_for(&stats, &ch, 0);
        let mut errors = vec![0u64; 6];
        let mut bits = vec![0u64; 6];
        let mut r = rng::stream(&[12]);
        let mut ys = rng::stream(&[13]);
        while bits
            .iter()
            .zip(&plan.modulations)
            .any(|(&b, m)| m.is_active() && b < 2_000_000)
        {
            let y = sample_latents(&stats, false, &mut ys);
            let out = run_trial(&stats, &y, &plan, lib(), &ch, &mut r).unwrap();
            for k in 0..6 {
                errors[k] += out.subcarrier_errors[k];
                bits[k] += out.subcarrier_bits[k];
            }
        }
        for k in 0..6 {
            if plan.modulations[k].is_active() {
                let ber = errors[k] as f64 / bits[k] as f64;
                let rel = (ber - plan.epsilon_star).abs() / plan.epsilon_star;
                assert!(rel < 0.1, "subcarrier {k}: {ber} vs {}", plan.epsilon_star);
            }
        }
    }

    #[test]
    fn affine_bsc_mse_scales_with_variance() {
        let lib = lib();
        let q = lib.quantizer(3, 1).unwrap();
        let ch = BscVector::uniform(lib.epsilons().get(1).unwrap(), 3).unwrap();
        let est = bsc_mse(q, &ch, -2.0, 1.5, 400_000, 7).unwrap();
        let want = 2.25 * q.normalized_distortion();
        assert!(
            (est.mean - want).abs() < 3.0 * est.std_error,
            "{} vs {want}",
            est.mean
        );
        assert!(bsc_mse(q, &BscVector::uniform(0.1, 2).unwrap(), 0.0, 1.0, 10, 0).is_err());
    }

    fn smoke_config() -> ExperimentConfig {
        ExperimentConfig {
            source: SyntheticSourceConfig {
                n_latents: 8,
                ..SyntheticSourceConfig::default()
            },
            snr_db: vec![5.0, 15.0],
            trials: 10,
            n_subcarriers: 16,
            seed: 21,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn smoke_experiment_is_deterministic() {
        let cfg = smoke_config();
        let a = run_experiment(&cfg, lib()).unwrap();
        let b = run_experiment(&cfg, lib()).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(
            serde_json::to_vec(&a).unwrap(),
            serde_json::to_vec(&b).unwrap()
        );
        assert_eq!(reports_to_csv(&a).lines().count(), 3);
        for r in &a {
            assert!((0.0..=1.0).contains(&r.violation_rate));
            assert_eq!(r.mean_distortion.len(), 8);
        }

        let mut doubled = cfg.clone();
        doubled.snr_db = vec![5.0, 15.0, 5.0, 15.0];
        let d = run_experiment(&doubled, lib()).unwrap();
        assert_eq!(d.len(), 4);
        assert_eq!(d[0].mean_distortion, a[0].mean_distortion);
    }

    #[test]
    fn single_trial_equals_manual_composition() {
        let mut cfg = smoke_config();
        cfg.trials = 1;
        cfg.snr_db = vec![10.0];
        cfg.per_trial_detail = true;
        let report = run_experiment(&cfg, lib()).unwrap().remove(0);
        let detail = report.trial_detail.unwrap();

        let lib = lib();
        let stats = generate_stats(&cfg.source, lib.max_feasible_variance(), cfg.delta).unwrap();
        let streams = TrialStreams {
            experiment_seed: cfg.seed,
            snr_index: 0,
            trial: 0,
        };
        let ch = realize_channel(
            &TapProfile::resolve(&cfg.channel_profile).unwrap(),
            cfg.n_subcarriers,
            cfg.subcarrier_spacing_hz,
            noise_var_for_snr_db(10.0, 1.0),
            streams.channel_seed(),
        )
        .unwrap();
        let plan = optimize(
            lib,
            &stats,
            &ch,
            &AllocatorConfig {
                p_tot: cfg.n_subcarriers as f64,
                delta: cfg.delta,
                seed: streams.plan_seed(),
            },
        )
        .unwrap();
        let y = sample_latents(&stats, cfg.source.clip_3sigma, &mut streams.samples(0));
        let manual = run_trial(&stats, &y, &plan, lib, &ch, &mut streams.noise(0)).unwrap();
        assert_eq!(detail, vec![manual.clone()]);
        assert_eq!(report.mean_distortion, manual.sq_error);
    }

    #[test]
    fn config_json_defaults_and_rejections() {
        let cfg =
            ExperimentConfig::from_json_bytes(br#"{"snr_db": [5, 10], "trials": 3}"#).unwrap();
        assert_eq!(cfg.n_subcarriers, 512);
        assert_eq!(cfg.channel_profile, "exp-pdp(300)");
        assert_eq!(cfg.source, SyntheticSourceConfig::default());
        assert!(ExperimentConfig::from_json_bytes(br#"{"snr_db": [], "trials": 3}"#).is_err());
        assert!(
            ExperimentConfig::from_json_bytes(br#"{"snr_db": [5], "trials": 3, "bogus": 1}"#)
                .is_err()
        );
        let round = ExperimentConfig::from_json_bytes(&serde_json::to_vec(&cfg).unwrap()).unwrap();
        assert_eq!(round, cfg);
    }

    #[test]
    fn ber_check_small() {
        let rows = ber_check(&[0.01, 0.05], 200_000, 3).unwrap();
        assert_eq!(rows.len(), 8);
        assert!(rows.iter().all(|r| r.relative_error < 0.1), "{rows:?}");
    }
}
