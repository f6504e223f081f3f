//! Channel-optimized scalar quantization of a standard Gaussian source.
//!
//! A quantizer sends codeword `u_l` when the source falls in region `l` and
//! the receiver reconstructs with the level attached to whatever codeword it
//! actually received. Over a bank of binary symmetric channels the
//! end-to-end MSE has a closed form in terms of the truncated moments of
//! `N(0,1)`, which is what both design steps and the evaluator use.
//!
//! Design alternates two updates:
//!
//! * regions, for fixed levels: sending `u_l` costs `y² - 2y·a_l + c_l` in
//!   expectation, with `a_l = E[ŷ | u_l]` and `c_l = E[ŷ² | u_l]`. The
//!   optimal partition is the lower envelope of these lines in `y`, so it
//!   is found with a convex-hull sweep; codewords whose line never touches
//!   the envelope get an empty region and are dropped from the active set.
//! * levels, for fixed regions: each received codeword reconstructs to the
//!   MMSE estimate of the source given that codeword.
//!
//! Neither step alone guarantees monotone descent once channel terms are
//! present, so every iterate is scored and the best one is kept.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{inv_q_function, truncated_moments, Interval, TruncatedMoments};
use crate::rng;

/// Largest supported codeword width.
pub const MAX_BIT_DEPTH: u32 = 10;

/// A `b`-bit codeword, most significant bit first.
pub type Codeword = u16;

/// Per-bit flip probabilities of a bank of parallel BSCs, indexed from the
/// most significant codeword bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct BscVector(Vec<f64>);

impl BscVector {
    pub fn new(flips: Vec<f64>) -> Result<Self> {
        if flips.is_empty() {
            return Err(Error::InvalidArgument(
                "BSC vector must have at least one bit".into(),
            ));
        }
        if flips.len() > MAX_BIT_DEPTH as usize {
            return Err(Error::InvalidArgument(format!(
                "BSC vector length {} exceeds {MAX_BIT_DEPTH}",
                flips.len()
            )));
        }
        if let Some(bad) = flips.iter().find(|e| !(0.0..=0.5).contains(*e)) {
            return Err(Error::InvalidArgument(format!(
                "flip probability {bad} outside [0, 0.5]"
            )));
        }
        Ok(Self(flips))
    }

    /// The same flip probability on every one of `bits` positions.
    pub fn uniform(epsilon: f64, bits: u32) -> Result<Self> {
        Self::new(vec![epsilon; bits as usize])
    }

    pub fn noiseless(bits: u32) -> Result<Self> {
        Self::uniform(0.0, bits)
    }

    pub fn flips(&self) -> &[f64] {
        &self.0
    }

    pub fn bits(&self) -> u32 {
        self.0.len() as u32
    }

    fn is_uniform(&self) -> bool {
        self.0.iter().all(|&e| e == self.0[0])
    }
}

impl TryFrom<Vec<f64>> for BscVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<BscVector> for Vec<f64> {
    fn from(v: BscVector) -> Self {
        v.0
    }
}

/// Probability that `sent` arrives as `received` over `channel`.
pub fn bsc_transition_prob(sent: Codeword, received: Codeword, channel: &BscVector) -> Result<f64> {
    let b = channel.bits();
    let limit = 1u32 << b;
    if u32::from(sent) >= limit || u32::from(received) >= limit {
        return Err(Error::InvalidArgument(format!(
            "codewords {sent:#b}/{received:#b} wider than the {b}-bit channel"
        )));
    }
    let diff = sent ^ received;
    Ok(channel
        .flips()
        .iter()
        .enumerate()
        .map(|(j, &e)| {
            if (diff >> (b - 1 - j as u32)) & 1 == 1 {
                e
            } else {
                1.0 - e
            }
        })
        .product())
}

/// Dense `P(received | sent)` table, row-major by sent codeword.
#[derive(Debug, Clone)]
pub(crate) struct TransitionMatrix {
    n: usize,
    p: Vec<f64>,
}

impl TransitionMatrix {
    pub(crate) fn new(channel: &BscVector) -> Self {
        let b = channel.bits();
        let n = 1usize << b;
        let mut p = vec![0.0; n * n];
        if channel.is_uniform() {
            let e = channel.flips()[0];
            let by_distance: Vec<f64> = (0..=b)
                .map(|d| e.powi(d as i32) * (1.0 - e).powi((b - d) as i32))
                .collect();
            for s in 0..n {
                for r in 0..n {
                    p[s * n + r] = by_distance[(s ^ r).count_ones() as usize];
                }
            }
        } else {
            for s in 0..n {
                for r in 0..n {
                    p[s * n + r] = bsc_transition_prob(s as Codeword, r as Codeword, channel)
                        .expect("codewords in range by construction");
                }
            }
        }
        Self { n, p }
    }

    #[inline]
    pub(crate) fn row(&self, sent: usize) -> &[f64] {
        &self.p[sent * self.n..(sent + 1) * self.n]
    }

    /// `(E[ŷ | sent], E[ŷ² | sent])` for the given reconstruction levels.
    #[inline]
    fn conditional_moments(&self, sent: usize, levels: &[f64]) -> (f64, f64) {
        self.row(sent)
            .iter()
            .zip(levels)
            .fold((0.0, 0.0), |(a, c), (&p, &r)| (a + p * r, c + p * r * r))
    }
}

/// Active regions of a quantizer in ascending order of the source axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    /// Interior thresholds `T_1 < … < T_{L-1}`.
    pub thresholds: Vec<f64>,
    /// Codeword sent for each of the `L` regions.
    pub codewords: Vec<Codeword>,
}

impl Partition {
    pub fn active_count(&self) -> usize {
        self.codewords.len()
    }

    fn region(&self, l: usize) -> Interval {
        let lo = if l == 0 {
            f64::NEG_INFINITY
        } else {
            self.thresholds[l - 1]
        };
        let hi = self.thresholds.get(l).copied().unwrap_or(f64::INFINITY);
        Interval::new_unchecked(lo, hi)
    }

    fn moments(&self) -> Vec<TruncatedMoments> {
        (0..self.codewords.len())
            .map(|l| truncated_moments(self.region(l)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarQuantizer {
    bit_depth: u32,
    thresholds: Vec<f64>,
    region_codewords: Vec<Codeword>,
    levels: Vec<f64>,
    designed_for: BscVector,
    normalized_distortion: f64,
}

impl ScalarQuantizer {
    /// Assemble a quantizer and cache its distortion under `designed_for`.
    pub fn new(partition: Partition, levels: Vec<f64>, designed_for: BscVector) -> Result<Self> {
        let b = designed_for.bits();
        let n = 1usize << b;
        if levels.len() != n {
            return Err(Error::InvalidArgument(format!(
                "{} levels for a {b}-bit quantizer",
                levels.len()
            )));
        }
        if levels.iter().any(|r| !r.is_finite()) {
            return Err(Error::InvalidArgument(
                "reconstruction levels must be finite".into(),
            ));
        }
        let Partition {
            thresholds,
            codewords,
        } = partition;
        if codewords.is_empty() || codewords.len() > n || thresholds.len() + 1 != codewords.len() {
            return Err(Error::InvalidArgument(format!(
                "{} thresholds for {} regions",
                thresholds.len(),
                codewords.len()
            )));
        }
        if thresholds.windows(2).any(|w| !(w[0] < w[1]))
            || thresholds.iter().any(|t| !t.is_finite())
        {
            return Err(Error::InvalidArgument(
                "thresholds must be finite and strictly increasing".into(),
            ));
        }
        let mut seen = vec![false; n];
        for &c in &codewords {
            let slot = seen.get_mut(c as usize).ok_or_else(|| {
                Error::InvalidArgument(format!("codeword {c} out of range for {b} bits"))
            })?;
            if std::mem::replace(slot, true) {
                return Err(Error::InvalidArgument(format!("codeword {c} mapped twice")));
            }
        }
        let mut q = Self {
            bit_depth: b,
            thresholds,
            region_codewords: codewords,
            levels,
            designed_for,
            normalized_distortion: f64::NAN,
        };
        q.normalized_distortion = distortion_with(
            &q.partition_ref(),
            &q.levels,
            &TransitionMatrix::new(&q.designed_for),
        );
        Ok(q)
    }

    pub fn bit_depth(&self) -> u32 {
        self.bit_depth
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn region_codewords(&self) -> &[Codeword] {
        &self.region_codewords
    }

    pub fn active_count(&self) -> usize {
        self.region_codewords.len()
    }

    pub fn designed_for(&self) -> &BscVector {
        &self.designed_for
    }

    /// `D*(1; b, ε)` cached at construction.
    pub fn normalized_distortion(&self) -> f64 {
        self.normalized_distortion
    }

    pub fn partition(&self) -> Partition {
        self.partition_ref()
    }

    fn partition_ref(&self) -> Partition {
        Partition {
            thresholds: self.thresholds.clone(),
            codewords: self.region_codewords.clone(),
        }
    }

    /// Index of the region containing the normalized value `ybar`; ties on a
    /// threshold go to the left region.
    pub fn region_index(&self, ybar: f64) -> usize {
        self.thresholds.partition_point(|&t| t < ybar)
    }

    pub fn quantize(&self, y: f64, mean: f64, std: f64) -> Codeword {
        debug_assert!(std > 0.0);
        self.region_codewords[self.region_index((y - mean) / std)]
    }

    pub fn dequantize(&self, codeword: Codeword, mean: f64, std: f64) -> f64 {
        std * self.levels[codeword as usize] + mean
    }
}

/// Free-function form of [`ScalarQuantizer::quantize`].
pub fn quantize(y: f64, mean: f64, std: f64, q: &ScalarQuantizer) -> Codeword {
    q.quantize(y, mean, std)
}

/// Free-function form of [`ScalarQuantizer::dequantize`].
pub fn dequantize(codeword: Codeword, mean: f64, std: f64, q: &ScalarQuantizer) -> f64 {
    q.dequantize(codeword, mean, std)
}

fn distortion_with(partition: &Partition, levels: &[f64], tm: &TransitionMatrix) -> f64 {
    partition
        .moments()
        .iter()
        .zip(&partition.codewords)
        .map(|(m, &cw)| {
            let (a, c) = tm.conditional_moments(cw as usize, levels);
            m.m2 - 2.0 * a * m.m1 + c * m.mass
        })
        .sum()
}

/// Expected end-to-end MSE of `q` on `N(0,1)` when its codewords cross `channel`.
pub fn analytic_distortion(q: &ScalarQuantizer, channel: &BscVector) -> Result<f64> {
    if channel.bits() != q.bit_depth {
        return Err(Error::InvalidArgument(format!(
            "{}-bit channel for a {}-bit quantizer",
            channel.bits(),
            q.bit_depth
        )));
    }
    Ok(distortion_with(
        &q.partition_ref(),
        &q.levels,
        &TransitionMatrix::new(channel),
    ))
}

/// Optimal partition for fixed reconstruction levels.
pub fn update_regions(levels: &[f64], channel: &BscVector) -> Result<Partition> {
    check_levels(levels, channel)?;
    Ok(regions_with(levels, &TransitionMatrix::new(channel)))
}

fn check_levels(levels: &[f64], channel: &BscVector) -> Result<()> {
    if levels.len() != 1usize << channel.bits() {
        return Err(Error::InvalidArgument(format!(
            "{} levels for a {}-bit channel",
            levels.len(),
            channel.bits()
        )));
    }
    if levels.iter().any(|r| !r.is_finite()) {
        return Err(Error::InvalidArgument("levels must be finite".into()));
    }
    Ok(())
}

fn regions_with(levels: &[f64], tm: &TransitionMatrix) -> Partition {
    let n = levels.len();
    let lines: Vec<(f64, f64)> = (0..n).map(|l| tm.conditional_moments(l, levels)).collect();

    // Sending codeword l costs c_l - 2·a_l·y (plus the common y²). Sweep the
    // lines by increasing slope magnitude a; the envelope minimum is
    // attained by the smallest a as y → -∞.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        lines[i]
            .0
            .total_cmp(&lines[j].0)
            .then(lines[i].1.total_cmp(&lines[j].1))
            .then(i.cmp(&j))
    });
    order.dedup_by(|later, earlier| lines[*later].0 == lines[*earlier].0);

    let crossing = |i: usize, j: usize| -> f64 {
        let ((ai, ci), (aj, cj)) = (lines[i], lines[j]);
        (cj - ci) / (2.0 * (aj - ai))
    };

    let mut hull: Vec<usize> = Vec::with_capacity(order.len());
    let mut bounds: Vec<f64> = Vec::with_capacity(order.len());
    for &j in &order {
        while let Some(&top) = hull.last() {
            let x = crossing(top, j);
            // top's region would be (bounds.last, x]; drop it if empty
            match bounds.last() {
                Some(&left) if x <= left => {
                    hull.pop();
                    bounds.pop();
                }
                _ => break,
            }
        }
        if let Some(&top) = hull.last() {
            let x = crossing(top, j);
            if !x.is_finite() {
                // lines too close to separate numerically; keep the earlier one
                continue;
            }
            bounds.push(x);
        }
        hull.push(j);
    }

    Partition {
        thresholds: bounds,
        codewords: hull.into_iter().map(|c| c as Codeword).collect(),
    }
}

/// MMSE reconstruction levels for a fixed partition.
pub fn update_levels(partition: &Partition, channel: &BscVector) -> Result<Vec<f64>> {
    if partition.thresholds.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidArgument(
            "thresholds must be strictly increasing".into(),
        ));
    }
    if partition.thresholds.len() + 1 != partition.codewords.len() {
        return Err(Error::InvalidArgument(
            "threshold/region count mismatch".into(),
        ));
    }
    let n = 1usize << channel.bits();
    if partition.codewords.iter().any(|&c| c as usize >= n) {
        return Err(Error::InvalidArgument("codeword wider than channel".into()));
    }
    Ok(levels_with(partition, &TransitionMatrix::new(channel)))
}

fn levels_with(partition: &Partition, tm: &TransitionMatrix) -> Vec<f64> {
    let moments = partition.moments();
    let mut num = vec![0.0; tm.n];
    let mut den = vec![0.0; tm.n];
    for (m, &cw) in moments.iter().zip(&partition.codewords) {
        for (q, &p) in tm.row(cw as usize).iter().enumerate() {
            num[q] += p * m.m1;
            den[q] += p * m.mass;
        }
    }
    num.iter()
        .zip(&den)
        .map(|(&nu, &de)| if de > 0.0 { nu / de } else { 0.0 })
        .collect()
}

/// Knobs for the alternating design.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignConfig {
    pub restarts: u32,
    pub max_iters: u32,
    pub rel_tol: f64,
    pub seed: u64,
}

impl Default for DesignConfig {
    fn default() -> Self {
        Self {
            restarts: 10,
            max_iters: 200,
            rel_tol: 1e-9,
            seed: 0,
        }
    }
}

impl DesignConfig {
    pub fn validate(&self) -> Result<()> {
        if self.restarts == 0 || self.max_iters == 0 || !(self.rel_tol > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "design config needs restarts >= 1, max_iters >= 1 and rel_tol > 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// A designed quantizer plus the distortion of every iterate scored on the way.
#[derive(Debug, Clone)]
pub struct DesignOutcome {
    pub quantizer: ScalarQuantizer,
    pub trace: Vec<f64>,
}

fn check_depth(b: u32) -> Result<()> {
    if b == 0 || b > MAX_BIT_DEPTH {
        return Err(Error::InvalidArgument(format!(
            "bit depth {b} outside 1..={MAX_BIT_DEPTH}"
        )));
    }
    Ok(())
}

/// Classical Lloyd-Max quantizer (noiseless channel), natural binary labels.
///
/// The Gaussian density is log-concave, so the Lloyd iteration has a unique
/// fixed point and a single well-placed start suffices; `cfg.restarts` and
/// `cfg.seed` are not used here.
pub fn design_lloyd_max(b: u32, cfg: &DesignConfig) -> Result<ScalarQuantizer> {
    check_depth(b)?;
    cfg.validate()?;
    let n = 1usize << b;
    // Panter-Dite start: point density ∝ φ^(1/3), i.e. quantiles of N(0, 3)
    let mut levels: Vec<f64> = (0..n)
        .map(|l| {
            let p = (l as f64 + 0.5) / n as f64;
            let z = if p < 0.5 {
                -inv_q_function(p).expect("p in (0, 0.5)")
            } else {
                inv_q_function(1.0 - p).expect("1 - p in (0, 0.5]")
            };
            3f64.sqrt() * z
        })
        .collect();
    let codewords: Vec<Codeword> = (0..n as Codeword).collect();
    let mut prev = f64::INFINITY;
    // Lloyd converges slowly at high resolution, so allow proportionally
    // more sweeps than the channel-optimized search; each sweep is O(2^b).
    let sweeps = cfg.max_iters.saturating_mul(1 << b.min(6));
    for _ in 0..sweeps {
        let thresholds: Vec<f64> = levels.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
        let partition = Partition {
            thresholds,
            codewords: codewords.clone(),
        };
        let moments = partition.moments();
        levels = moments.iter().map(|m| m.m1 / m.mass).collect();
        let d: f64 = moments
            .iter()
            .zip(&levels)
            .map(|(m, &r)| m.squared_error_about(r))
            .sum();
        if (prev - d).abs() <= cfg.rel_tol * d {
            break;
        }
        prev = d;
    }
    let thresholds = levels.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    ScalarQuantizer::new(
        Partition {
            thresholds,
            codewords,
        },
        levels,
        BscVector::noiseless(b)?,
    )
}

/// Channel-optimized quantizer for `channel`, best of all restarts.
pub fn design_channel_optimized(
    b: u32,
    channel: &BscVector,
    cfg: &DesignConfig,
) -> Result<ScalarQuantizer> {
    Ok(design_channel_optimized_traced(b, channel, cfg, None)?.quantizer)
}

/// Full design entry point.
///
/// `coarser`, when given, is a `(b-1)`-bit quantizer designed for the first
/// `b-1` entries of `channel`. Its split (each codeword extended by a zero
/// bit, each level duplicated) reproduces its distortion exactly at depth
/// `b`, so including it as a candidate makes the result no worse than the
/// coarser design; a perturbed copy of the split also seeds one extra
/// restart.
pub fn design_channel_optimized_traced(
    b: u32,
    channel: &BscVector,
    cfg: &DesignConfig,
    coarser: Option<&ScalarQuantizer>,
) -> Result<DesignOutcome> {
    check_depth(b)?;
    cfg.validate()?;
    if channel.bits() != b {
        return Err(Error::InvalidArgument(format!(
            "{}-bit channel for bit depth {b}",
            channel.bits()
        )));
    }
    let tm = TransitionMatrix::new(channel);
    let n = 1usize << b;
    let jitter = 0.3 / n as f64;
    let lloyd = design_lloyd_max(b, cfg)?;

    let mut search = Search {
        tm: &tm,
        cfg,
        best: None,
        trace: Vec::new(),
    };

    // restart 0: the Lloyd-Max quantizer itself, then iterate from it
    search.consider(lloyd.partition(), lloyd.levels().to_vec());
    search.iterate(lloyd.levels().to_vec());

    for r in 1..cfg.restarts {
        let mut rng = rng::stream(&[cfg.seed, rng::tag::RESTART, u64::from(b), u64::from(r)]);
        let start: Vec<f64> = lloyd
            .levels()
            .iter()
            .map(|&l| l + jitter * rng.sample::<f64, _>(StandardNormal))
            .collect();
        search.iterate(start);
    }

    if let Some(prev) = coarser {
        let compatible = prev.bit_depth() + 1 == b
            && prev.designed_for().flips() == &channel.flips()[..b as usize - 1];
        if compatible {
            let split_levels: Vec<f64> = (0..n).map(|q| prev.levels()[q >> 1]).collect();
            let split = Partition {
                thresholds: prev.thresholds().to_vec(),
                codewords: prev.region_codewords().iter().map(|&c| c << 1).collect(),
            };
            search.consider(split, split_levels.clone());
            let spread: Vec<f64> = split_levels
                .iter()
                .enumerate()
                .map(|(q, &l)| if q & 1 == 0 { l - jitter } else { l + jitter })
                .collect();
            search.iterate(spread);
        }
    }

    let Search { best, trace, .. } = search;
    let (partition, levels, _) = best.expect("at least one candidate scored");
    let quantizer = ScalarQuantizer::new(partition, levels, channel.clone())?;
    Ok(DesignOutcome { quantizer, trace })
}

struct Search<'a> {
    tm: &'a TransitionMatrix,
    cfg: &'a DesignConfig,
    best: Option<(Partition, Vec<f64>, f64)>,
    trace: Vec<f64>,
}

impl Search<'_> {
    fn consider(&mut self, partition: Partition, levels: Vec<f64>) -> f64 {
        let d = distortion_with(&partition, &levels, self.tm);
        self.trace.push(d);
        if self.best.as_ref().map_or(true, |(_, _, best)| d < *best) {
            self.best = Some((partition, levels, d));
        }
        d
    }

    fn iterate(&mut self, mut levels: Vec<f64>) {
        let mut prev = f64::INFINITY;
        for _ in 0..self.cfg.max_iters {
            let partition = regions_with(&levels, self.tm);
            levels = levels_with(&partition, self.tm);
            let d = self.consider(partition, levels.clone());
            if (prev - d).abs() <= self.cfg.rel_tol * d.abs().max(f64::MIN_POSITIVE) {
                break;
            }
            prev = d;
        }
    }
}
