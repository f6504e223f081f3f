//! Cross-layer resource allocation.
//!
//! For each BER target on the library grid the allocator finds the fewest
//! latent bits meeting every element's distortion target (P1) and the
//! highest per-symbol rate the power budget supports (P2). It then picks the
//! target with the best bits-to-rate ratio, spends any spare capacity on
//! greedy bit refinement (P3), and lays the bits out on the OFDM grid.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::ChannelRealization;
use crate::digest;
use crate::error::{Error, Result};
use crate::library::{normalized_target, QuantizerLibrary};
use crate::modem::{ModulationOrder, ThresholdRow};
use crate::rng;

/// Per-element Gaussian parameters `(μ_i, σ_i²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    means: Vec<f64>,
    variances: Vec<f64>,
}

impl LatentStats {
    pub fn new(means: Vec<f64>, variances: Vec<f64>) -> Result<Self> {
        if means.len() != variances.len() {
            return Err(Error::InvalidArgument(format!(
                "{} means but {} variances",
                means.len(),
                variances.len()
            )));
        }
        if means.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidArgument("means must be finite".into()));
        }
        if let Some(i) = variances.iter().position(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "variance {} at element {i} must be finite and nonnegative",
                variances[i]
            )));
        }
        Ok(Self { means, variances })
    }

    /// Copy with every variance clamped to `max_variance`.
    pub fn clamped(&self, max_variance: f64) -> Self {
        let clipped = self.variances.iter().filter(|&&v| v > max_variance).count();
        if clipped > 0 {
            log::debug!("clamped {clipped} variances to {max_variance}");
        }
        Self {
            means: self.means.clone(),
            variances: self
                .variances
                .iter()
                .map(|&v| v.min(max_variance))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn std_dev(&self, i: usize) -> f64 {
        self.variances[i].sqrt()
    }

    pub fn digest(&self) -> String {
        let flat: Vec<f64> = self.means.iter().chain(&self.variances).copied().collect();
        digest::f64s_hex(&flat)
    }
}

/// Residual variance `σ²/(σ²+1)` and its normalized form `1/(σ²+1)`.
pub fn target_distortion(sigma2: f64) -> (f64, f64) {
    (sigma2 / (sigma2 + 1.0), normalized_target(sigma2))
}

/// Result of P1 and P2 at one grid target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub epsilon_index: usize,
    pub b_lat: u64,
    pub r_sym: u32,
    pub feasible: bool,
}

/// Minimum bits per element meeting the distortion target at grid index `q`.
pub fn solve_p1(
    lib: &QuantizerLibrary,
    stats: &LatentStats,
    q: usize,
    delta: f64,
) -> Result<(Vec<u32>, u64)> {
    let bits = stats
        .variances()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            lib.min_bits_for_target(q, v, delta).map_err(|e| match e {
                Error::InfeasibleTarget {
                    variance, b_max, ..
                } => Error::InfeasibleTarget {
                    index: i,
                    variance,
                    b_max,
                },
                other => other,
            })
        })
        .collect::<Result<Vec<u32>>>()?;
    let total = bits.iter().map(|&b| u64::from(b)).sum();
    Ok((bits, total))
}

/// Modulation and power per subcarrier.
#[derive(Debug, Clone, PartialEq)]
pub struct Loading {
    pub modulations: Vec<ModulationOrder>,
    pub powers: Vec<f64>,
    pub r_sym: u32,
}

/// Min-heap entry ordered by cost, then index.
#[derive(Debug, Clone, Copy)]
struct Cheapest {
    cost: f64,
    index: usize,
}

impl PartialEq for Cheapest {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Cheapest {}

impl PartialOrd for Cheapest {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Cheapest {
    // reversed so that BinaryHeap pops the smallest cost, lowest index first
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.index.cmp(&self.index))
    }
}

/// Greedy power and modulation loading.
///
/// Starting from all subcarriers off, repeatedly raise the subcarrier whose
/// next modulation step costs the least extra power, and stop as soon as
/// that step no longer fits in `p_tot`.
pub fn solve_p2(channel: &ChannelRealization, p_tot: f64, gamma: &ThresholdRow) -> Result<Loading> {
    if !(p_tot > 0.0 && p_tot.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "power budget {p_tot} must be positive"
        )));
    }
    let gains = channel.gain_powers();
    let scale: Vec<f64> = gains.iter().map(|&g| channel.noise_var / g).collect();
    let step_cost = |k: usize, m: ModulationOrder| -> f64 {
        let i = m.index();
        (gamma[i + 1] - gamma[i]) * scale[k]
    };

    let mut modulations = vec![ModulationOrder::OFF; gains.len()];
    let mut heap: BinaryHeap<Cheapest> = (0..gains.len())
        .filter(|&k| gains[k] > 0.0)
        .map(|k| Cheapest {
            cost: step_cost(k, ModulationOrder::OFF),
            index: k,
        })
        .filter(|c| c.cost.is_finite())
        .collect();
    let mut used = 0.0;
    while let Some(c) = heap.pop() {
        if used + c.cost > p_tot {
            break;
        }
        used += c.cost;
        let m = modulations[c.index]
            .step_up()
            .expect("heap never holds a saturated subcarrier");
        modulations[c.index] = m;
        if m.step_up().is_some() {
            heap.push(Cheapest {
                cost: step_cost(c.index, m),
                index: c.index,
            });
        }
    }
    let powers = modulations
        .iter()
        .zip(&scale)
        .map(|(m, s)| {
            if m.is_active() {
                gamma[m.index()] * s
            } else {
                0.0
            }
        })
        .collect();
    let r_sym = modulations.iter().map(|m| m.bits()).sum();
    Ok(Loading {
        modulations,
        powers,
        r_sym,
    })
}

/// Outcome of the BER-target selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Selection {
    /// Position in the input slice.
    pub point: usize,
    pub t_sym: u64,
    /// A different feasible point that would need strictly fewer symbols.
    pub fewer_symbols_at: Option<usize>,
}

fn symbols_needed(p: &OperatingPoint) -> u64 {
    if p.b_lat == 0 {
        0
    } else {
        p.b_lat.div_ceil(u64::from(p.r_sym))
    }
}

/// Pick the feasible point with the smallest `B_lat / R_sym`.
///
/// Ratios are compared exactly by cross-multiplication; ties go to the
/// earlier point, which is the smaller target when points follow the grid.
/// A point with `B_lat = 0` needs no symbols and always wins.
pub fn select_epsilon(points: &[OperatingPoint]) -> Result<Selection> {
    let usable = |p: &OperatingPoint| p.feasible && (p.r_sym > 0 || p.b_lat == 0);
    let mut best: Option<usize> = None;
    for (i, p) in points.iter().enumerate() {
        if !usable(p) {
            continue;
        }
        best = match best {
            None => Some(i),
            Some(j) => {
                let b = &points[j];
                let lhs = u128::from(p.b_lat) * u128::from(b.r_sym);
                let rhs = u128::from(b.b_lat) * u128::from(p.r_sym);
                // an empty payload beats any ratio
                let better = if p.b_lat == 0 || b.b_lat == 0 {
                    p.b_lat == 0 && b.b_lat != 0
                } else {
                    lhs < rhs
                };
                Some(if better { i } else { j })
            }
        };
    }
    let point = best.ok_or(Error::NoFeasibleRate)?;
    let t_sym = symbols_needed(&points[point]);
    let fewer_symbols_at = points
        .iter()
        .enumerate()
        .filter(|(_, p)| usable(p))
        .min_by_key(|(i, p)| (symbols_needed(p), *i))
        .map(|(i, _)| i)
        .filter(|&i| symbols_needed(&points[i]) < t_sym);
    if let Some(i) = fewer_symbols_at {
        log::info!(
            "ratio rule picked grid index {} ({t_sym} symbols) but index {} needs {}",
            points[point].epsilon_index,
            points[i].epsilon_index,
            symbols_needed(&points[i])
        );
    }
    Ok(Selection {
        point,
        t_sym,
        fewer_symbols_at,
    })
}

/// Max-heap entry ordered by gain, then lowest index.
#[derive(Debug, Clone, Copy)]
struct Largest {
    gain: f64,
    index: usize,
}

impl PartialEq for Largest {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Largest {}

impl PartialOrd for Largest {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Largest {
    fn cmp(&self, other: &Self) -> Ordering {
        self.gain
            .total_cmp(&other.gain)
            .then_with(|| other.index.cmp(&self.index))
    }
}

/// Greedy refinement: spend `budget - Σ bits` one bit at a time on the
/// element with the largest weighted distortion drop. Returns the refined
/// bits and the leftover capacity that becomes padding.
pub fn solve_p3(
    lib: &QuantizerLibrary,
    stats: &LatentStats,
    bits: &[u32],
    q: usize,
    budget: u64,
) -> Result<(Vec<u32>, u64)> {
    if bits.len() != stats.len() {
        return Err(Error::InvalidArgument(format!(
            "{} bit depths for {} elements",
            bits.len(),
            stats.len()
        )));
    }
    let used: u64 = bits.iter().map(|&b| u64::from(b)).sum();
    let mut residual = budget.checked_sub(used).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "budget {budget} below the {used} bits already allocated"
        ))
    })?;
    let b_max = lib.b_max();
    let gain =
        |i: usize, b: u32| stats.variances()[i] * (lib.distortion(b, q) - lib.distortion(b + 1, q));
    let mut out = bits.to_vec();
    let mut heap: BinaryHeap<Largest> = out
        .iter()
        .enumerate()
        .filter(|&(_, &b)| b > 0 && b < b_max)
        .map(|(i, &b)| Largest {
            gain: gain(i, b),
            index: i,
        })
        .collect();
    while residual > 0 {
        let Some(top) = heap.pop() else { break };
        out[top.index] += 1;
        residual -= 1;
        let b = out[top.index];
        if b < b_max {
            heap.push(Largest {
                gain: gain(top.index, b),
                index: top.index,
            });
        }
    }
    Ok((out, residual))
}

/// Physical slot carrying one transmitted bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ResourceSlot {
    pub symbol: u32,
    pub subcarrier: u32,
    /// Bit position within the subcarrier's label, 0 being the MSB.
    pub position: u8,
}

/// Assignment of the transmitted bit stream to resource elements.
///
/// Stream index `n < payload_bits` is latent payload (codewords concatenated
/// in element order, MSB first); the rest is padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMapping {
    pub payload_bits: u64,
    pub slots: Vec<ResourceSlot>,
}

impl BitMapping {
    pub fn dummy_bits(&self) -> u64 {
        self.slots.len() as u64 - self.payload_bits
    }

    pub fn digest(&self) -> String {
        let mut bytes = Vec::with_capacity(self.slots.len() * 9 + 8);
        bytes.extend_from_slice(&self.payload_bits.to_le_bytes());
        for s in &self.slots {
            bytes.extend_from_slice(&s.symbol.to_le_bytes());
            bytes.extend_from_slice(&s.subcarrier.to_le_bytes());
            bytes.push(s.position);
        }
        digest::sha256_hex(&bytes)
    }
}

/// Fill the grid symbol-major: for each symbol, active subcarriers in
/// ascending order, each taking its next `m_k` stream bits.
pub fn map_bits_to_grid(
    bits: &[u32],
    t_sym: u64,
    modulations: &[ModulationOrder],
) -> Result<BitMapping> {
    let payload_bits: u64 = bits.iter().map(|&b| u64::from(b)).sum();
    let r_sym: u64 = modulations.iter().map(|m| u64::from(m.bits())).sum();
    let capacity = t_sym
        .checked_mul(r_sym)
        .ok_or_else(|| Error::Internal("grid capacity overflows".into()))?;
    if capacity < payload_bits {
        return Err(Error::Internal(format!(
            "{payload_bits} payload bits exceed grid capacity {capacity}"
        )));
    }
    let t_sym = u32::try_from(t_sym).map_err(|_| Error::Internal(format!("{t_sym} symbols")))?;
    let mut slots = Vec::with_capacity(capacity as usize);
    for symbol in 0..t_sym {
        for (k, m) in modulations.iter().enumerate() {
            for position in 0..m.bits() as u8 {
                slots.push(ResourceSlot {
                    symbol,
                    subcarrier: k as u32,
                    position,
                });
            }
        }
    }
    Ok(BitMapping {
        payload_bits,
        slots,
    })
}

/// Everything the transmitter and receiver need to agree on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationPlan {
    pub epsilon_star: f64,
    pub epsilon_index: usize,
    pub bits: Vec<u32>,
    pub modulations: Vec<ModulationOrder>,
    pub powers: Vec<f64>,
    pub t_sym: u64,
    pub dummy_bits: u64,
    pub p_tot: f64,
    pub delta: f64,
    pub seed: u64,
    pub mapping_digest: String,
    pub library_digest: String,
    pub channel_seed: u64,
    pub channel_digest: String,
    pub stats_digest: String,
    pub tool_version: String,
}

impl AllocationPlan {
    pub fn r_sym(&self) -> u32 {
        self.modulations.iter().map(|m| m.bits()).sum()
    }

    pub fn payload_bits(&self) -> u64 {
        self.bits.iter().map(|&b| u64::from(b)).sum()
    }

    pub fn total_power(&self) -> f64 {
        self.powers.iter().sum()
    }

    pub fn mapping(&self) -> Result<BitMapping> {
        map_bits_to_grid(&self.bits, self.t_sym, &self.modulations)
    }

    /// Pseudo-random pad bits, reproducible from the plan seed.
    pub fn dummy_stream(&self) -> Vec<bool> {
        let mut r = rng::stream(&[self.seed, rng::tag::DUMMY]);
        (0..self.dummy_bits).map(|_| r.gen()).collect()
    }

    pub fn to_json_bytes(&self) -> Vec<u8> {
        let mut v = serde_json::to_vec_pretty(self).expect("plan serializes");
        v.push(b'\n');
        v
    }

    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self> {
        serde_json::from_slice(bytes).map_err(|e| Error::Malformed {
            what: "allocation plan",
            detail: e.to_string(),
        })
    }

    /// Verify the plan against its inputs. Returns every violated property.
    pub fn check(&self, lib: &QuantizerLibrary, stats: &LatentStats) -> Vec<String> {
        let mut bad = Vec::new();
        if self.bits.len() != stats.len() {
            bad.push(format!(
                "{} bit depths for {} elements",
                self.bits.len(),
                stats.len()
            ));
            return bad;
        }
        if self.modulations.len() != self.powers.len() {
            bad.push("modulation and power vectors differ in length".into());
        }
        if self.stats_digest != stats.digest() {
            bad.push("stats digest mismatch".into());
        }
        if self.library_digest != lib.digest() {
            bad.push("library digest mismatch".into());
        }
        if lib.epsilons().get(self.epsilon_index) != Some(self.epsilon_star) {
            bad.push(format!(
                "epsilon {} is not grid entry {}",
                self.epsilon_star, self.epsilon_index
            ));
            return bad;
        }
        let total = self.total_power();
        if !(total <= self.p_tot + 1e-9) {
            bad.push(format!("power {total} exceeds budget {}", self.p_tot));
        }
        if self.powers.iter().any(|p| !(*p >= 0.0)) {
            bad.push("negative power".into());
        }
        for (k, (m, p)) in self.modulations.iter().zip(&self.powers).enumerate() {
            if !m.is_active() && *p != 0.0 {
                bad.push(format!("subcarrier {k} is off but carries power {p}"));
            }
        }
        let capacity = self.t_sym * u64::from(self.r_sym());
        if self.payload_bits() + self.dummy_bits != capacity {
            bad.push(format!(
                "{} payload + {} dummy bits != capacity {capacity}",
                self.payload_bits(),
                self.dummy_bits
            ));
        }
        if let Some(i) = self.bits.iter().position(|&b| b > lib.b_max()) {
            bad.push(format!("element {i} exceeds b_max"));
        }
        for (i, (&b, &v)) in self.bits.iter().zip(stats.variances()).enumerate() {
            if v >= self.delta
                && b <= lib.b_max()
                && lib.distortion(b, self.epsilon_index) > normalized_target(v)
            {
                bad.push(format!(
                    "element {i} (variance {v}) misses its distortion target at b = {b}"
                ));
            }
        }
        match self.mapping() {
            Ok(m) => {
                if m.digest() != self.mapping_digest {
                    bad.push("mapping digest mismatch".into());
                }
                if m.slots
                    .iter()
                    .any(|s| !self.modulations[s.subcarrier as usize].is_active())
                {
                    bad.push("bit mapped to an inactive subcarrier".into());
                }
            }
            Err(e) => bad.push(e.to_string()),
        }
        bad
    }
}

/// Inputs fixed across one call to [`optimize`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AllocatorConfig {
    pub p_tot: f64,
    pub delta: f64,
    pub seed: u64,
}

/// P1 and P2 at every grid target, in grid order.
pub fn operating_points(
    lib: &QuantizerLibrary,
    stats: &LatentStats,
    channel: &ChannelRealization,
    cfg: &AllocatorConfig,
) -> Result<Vec<(OperatingPoint, Option<(Vec<u32>, Loading)>)>> {
    (0..lib.epsilons().len())
        .into_par_iter()
        .map(|q| {
            let loading = solve_p2(channel, cfg.p_tot, lib.gamma_th(q))?;
            Ok(match solve_p1(lib, stats, q, cfg.delta) {
                Ok((bits, b_lat)) => (
                    OperatingPoint {
                        epsilon_index: q,
                        b_lat,
                        r_sym: loading.r_sym,
                        feasible: true,
                    },
                    Some((bits, loading)),
                ),
                Err(Error::InfeasibleTarget {
                    index, variance, ..
                }) => {
                    log::debug!("grid index {q}: element {index} (variance {variance}) infeasible");
                    (
                        OperatingPoint {
                            epsilon_index: q,
                            b_lat: 0,
                            r_sym: loading.r_sym,
                            feasible: false,
                        },
                        None,
                    )
                }
                Err(e) => return Err(e),
            })
        })
        .collect()
}

/// Full allocation: per-target P1/P2, target selection, refinement and
/// grid mapping.
pub fn optimize(
    lib: &QuantizerLibrary,
    stats: &LatentStats,
    channel: &ChannelRealization,
    cfg: &AllocatorConfig,
) -> Result<AllocationPlan> {
    if !(cfg.delta >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "delta {} must be nonnegative",
            cfg.delta
        )));
    }
    let solved = operating_points(lib, stats, channel, cfg)?;
    let points: Vec<OperatingPoint> = solved.iter().map(|s| s.0).collect();
    let selection = match select_epsilon(&points) {
        Ok(s) => s,
        Err(e) => {
            // name the offending element if P1 was the problem everywhere
            if points.iter().all(|p| !p.feasible) {
                solve_p1(lib, stats, 0, cfg.delta)?;
            }
            return Err(e);
        }
    };
    let point = points[selection.point];
    let q = point.epsilon_index;
    let (p1_bits, loading) = solved[selection.point]
        .1
        .clone()
        .expect("selected point is feasible");

    let (bits, modulations, powers, dummy_bits) = if selection.t_sym == 0 {
        let n_sc = channel.n_sc();
        (
            p1_bits,
            vec![ModulationOrder::OFF; n_sc],
            vec![0.0; n_sc],
            0,
        )
    } else {
        let budget = selection.t_sym * u64::from(loading.r_sym);
        let (bits, dummy) = if budget > point.b_lat {
            solve_p3(lib, stats, &p1_bits, q, budget)?
        } else {
            (p1_bits, 0)
        };
        (bits, loading.modulations, loading.powers, dummy)
    };

    let mapping = map_bits_to_grid(&bits, selection.t_sym, &modulations)?;
    if mapping.dummy_bits() != dummy_bits {
        return Err(Error::Internal(format!(
            "mapping pads {} bits, refinement left {dummy_bits}",
            mapping.dummy_bits()
        )));
    }
    Ok(AllocationPlan {
        epsilon_star: lib.epsilons().get(q).expect("index from grid"),
        epsilon_index: q,
        bits,
        modulations,
        powers,
        t_sym: selection.t_sym,
        dummy_bits,
        p_tot: cfg.p_tot,
        delta: cfg.delta,
        seed: cfg.seed,
        mapping_digest: mapping.digest(),
        library_digest: lib.digest(),
        channel_seed: channel.seed,
        channel_digest: channel.digest(),
        stats_digest: stats.digest(),
        tool_version: crate::TOOL_VERSION.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::library::{build_library, EpsilonGrid};
    use crate::modem::threshold_row;
    use crate::quantizer::DesignConfig;
    use num_complex::Complex64;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use std::collections::HashSet;
    use std::sync::OnceLock;

    fn lib() -> &'static QuantizerLibrary {
        static LIB: OnceLock<QuantizerLibrary> = OnceLock::new();
        LIB.get_or_init(|| {
            let grid = EpsilonGrid::new(vec![0.001, 0.01, 0.05]).unwrap();
            let cfg = DesignConfig {
                restarts: 3,
                ..DesignConfig::default()
            };
            build_library(5, &grid, &cfg).unwrap()
        })
    }

    fn flat(n: usize, noise_var: f64) -> ChannelRealization {
        ChannelRealization::from_gains(vec![Complex64::new(1.0, 0.0); n], noise_var).unwrap()
    }

    fn channel_from_powers(g: &[f64], noise_var: f64) -> ChannelRealization {
        ChannelRealization::from_gains(
            g.iter().map(|&p| Complex64::new(p.sqrt(), 0.0)).collect(),
            noise_var,
        )
        .unwrap()
    }

    /// Best rate over all `5^n` assignments whose direct power sum fits.
    fn p2_brute_force(gains: &[f64], noise_var: f64, p_tot: f64, row: &ThresholdRow) -> u32 {
        let n = gains.len();
        let mut best = 0;
        let mut idx = vec![0usize; n];
        loop {
            let power: f64 = (0..n).map(|k| row[idx[k]] * (noise_var / gains[k])).sum();
            if power <= p_tot {
                best = best.max(idx.iter().map(|&i| 2 * i as u32).sum());
            }
            let mut k = 0;
            while k < n {
                idx[k] += 1;
                if idx[k] < 5 {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
            if k == n {
                return best;
            }
        }
    }

    /// Minimum weighted distortion over every way to spend `residual` bits.
    fn p3_brute_force(
        lib: &QuantizerLibrary,
        var: &[f64],
        bits: &[u32],
        q: usize,
        residual: u32,
    ) -> f64 {
        fn go(
            lib: &QuantizerLibrary,
            var: &[f64],
            bits: &mut Vec<u32>,
            i: usize,
            left: u32,
            q: usize,
        ) -> f64 {
            if i == bits.len() {
                if left > 0 {
                    return f64::INFINITY;
                }
                return bits
                    .iter()
                    .zip(var)
                    .map(|(&b, &v)| v * lib.distortion(b, q))
                    .sum();
            }
            if bits[i] == 0 {
                return go(lib, var, bits, i + 1, left, q);
            }
            let room = (lib.b_max() - bits[i]).min(left);
            let mut best = f64::INFINITY;
            for extra in 0..=room {
                bits[i] += extra;
                best = best.min(go(lib, var, bits, i + 1, left - extra, q));
                bits[i] -= extra;
            }
            best
        }
        let capacity: u32 = bits
            .iter()
            .filter(|&&b| b > 0)
            .map(|&b| lib.b_max() - b)
            .sum();
        go(lib, var, &mut bits.to_vec(), 0, residual.min(capacity), q)
    }

    #[test]
    fn target_distortion_examples() {
        assert_eq!(target_distortion(0.0), (0.0, 1.0));
        assert_eq!(target_distortion(1.0), (0.5, 0.5));
        assert_eq!(target_distortion(3.0).0, 0.75);
    }

    #[test]
    fn stats_validation_and_clamp() {
        assert!(LatentStats::new(vec![0.0], vec![]).is_err());
        assert!(LatentStats::new(vec![0.0], vec![-1.0]).is_err());
        let s = LatentStats::new(vec![0.0, 1.0], vec![0.5, 50.0]).unwrap();
        assert_eq!(s.clamped(20.0).variances(), &[0.5, 20.0]);
    }

    #[test]
    fn p1_examples() {
        let lib = lib();
        let small = LatentStats::new(vec![0.0; 3], vec![0.1, 0.39, 0.0]).unwrap();
        assert_eq!(solve_p1(lib, &small, 2, 0.4).unwrap(), (vec![0, 0, 0], 0));
        let unit = LatentStats::new(vec![0.0], vec![1.0]).unwrap();
        assert_eq!(solve_p1(lib, &unit, 2, 0.4).unwrap(), (vec![1], 1));
        let huge = LatentStats::new(vec![0.0, 0.0], vec![1.0, 1e6]).unwrap();
        match solve_p1(lib, &huge, 2, 0.4) {
            Err(Error::InfeasibleTarget { index, .. }) => assert_eq!(index, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn p1_is_separable() {
        let lib = lib();
        let v = vec![0.5, 3.0, 12.0, 0.1, 7.0];
        let s = LatentStats::new(vec![0.0; 5], v.clone()).unwrap();
        let perm = [3, 0, 4, 1, 2];
        let sp = LatentStats::new(vec![0.0; 5], perm.iter().map(|&i| v[i]).collect()).unwrap();
        let (b, _) = solve_p1(lib, &s, 1, 0.4).unwrap();
        let (bp, _) = solve_p1(lib, &sp, 1, 0.4).unwrap();
        assert_eq!(bp, perm.iter().map(|&i| b[i]).collect::<Vec<_>>());
    }

    #[test]
    fn p2_small_budget_and_tie() {
        let row = threshold_row(0.01).unwrap();
        let ch = flat(2, 0.1);
        let none = solve_p2(&ch, 0.99 * row[1] * 0.1, &row).unwrap();
        assert_eq!(none.r_sym, 0);
        assert!(none.modulations.iter().all(|m| !m.is_active()));

        let one = solve_p2(&ch, 1.5 * row[1] * 0.1, &row).unwrap();
        assert_eq!(
            one.modulations,
            vec![ModulationOrder::QPSK, ModulationOrder::OFF]
        );

        let both = solve_p2(&ch, 2.0 * row[1] * 0.1, &row).unwrap();
        assert_eq!(both.modulations, vec![ModulationOrder::QPSK; 2]);
        assert_eq!(both.r_sym, 4);
    }

    #[test]
    fn p2_saturates_at_256qam() {
        let row = threshold_row(0.01).unwrap();
        let out = solve_p2(&flat(3, 1e-6), 1e6, &row).unwrap();
        assert_eq!(out.modulations, vec![ModulationOrder::QAM256; 3]);
        assert_eq!(out.r_sym, 24);
    }

    #[test]
    fn p2_matches_exhaustive_search() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for trial in 0..200 {
            let n = r.gen_range(1..=5);
            let eps = [0.001, 0.01, 0.05][trial % 3];
            let row = threshold_row(eps).unwrap();
            let gains: Vec<f64> = (0..n).map(|_| -r.gen::<f64>().max(1e-9).ln()).collect();
            let noise = 10f64.powf(r.gen_range(-2.0..0.0));
            let p_tot = r.gen_range(0.0..(n as f64 * row[4] * noise));
            let ch = channel_from_powers(&gains, noise);
            let greedy = solve_p2(&ch, p_tot.max(1e-12), &row).unwrap();
            assert!(greedy.powers.iter().sum::<f64>() <= p_tot.max(1e-12) + 1e-9);
            assert_eq!(
                greedy.r_sym,
                p2_brute_force(&gains, noise, p_tot.max(1e-12), &row),
                "trial {trial}"
            );
        }
    }

    #[test]
    fn selection_examples() {
        let pt = |q, b, r| OperatingPoint {
            epsilon_index: q,
            b_lat: b,
            r_sym: r,
            feasible: true,
        };
        let s = select_epsilon(&[pt(0, 100, 40), pt(1, 120, 60)]).unwrap();
        assert_eq!((s.point, s.t_sym), (1, 2));
        let tie = select_epsilon(&[pt(0, 100, 50), pt(1, 120, 60)]).unwrap();
        assert_eq!(tie.point, 0);
        let single = select_epsilon(&[pt(0, 7, 0), pt(1, 9, 4)]).unwrap();
        assert_eq!((single.point, single.t_sym), (1, 3));
        assert!(matches!(
            select_epsilon(&[pt(0, 7, 0)]),
            Err(Error::NoFeasibleRate)
        ));
        let empty = select_epsilon(&[pt(0, 0, 0), pt(1, 0, 4)]).unwrap();
        assert_eq!((empty.point, empty.t_sym), (0, 0));
    }

    #[test]
    fn p3_examples() {
        let lib = lib();
        let s = LatentStats::new(vec![0.0; 2], vec![4.0, 1.0]).unwrap();
        let (b, d) = solve_p3(lib, &s, &[1, 1], 0, 2).unwrap();
        assert_eq!((b, d), (vec![1, 1], 0));

        let (b, d) = solve_p3(lib, &s, &[1, 1], 0, 3).unwrap();
        let g0 = 4.0 * (lib.distortion(1, 0) - lib.distortion(2, 0));
        let g1 = 1.0 * (lib.distortion(1, 0) - lib.distortion(2, 0));
        assert!(g0 > g1);
        assert_eq!((b, d), (vec![2, 1], 0));

        // zero-bit elements never grow; saturation spills into padding
        let (b, d) = solve_p3(lib, &s, &[0, 4], 0, 10).unwrap();
        assert_eq!((b, d), (vec![0, 5], 5));

        assert!(solve_p3(lib, &s, &[2, 2], 0, 3).is_err());
    }

    #[test]
    fn p3_matches_exhaustive_search_on_convex_columns() {
        let lib = lib();
        let report = lib.report();
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut checked = 0;
        for _ in 0..300 {
            let q = r.gen_range(0..lib.epsilons().len());
            if !report.column_convex[q] {
                continue;
            }
            let n = r.gen_range(1..=6);
            let var: Vec<f64> = (0..n).map(|_| 10f64.powf(r.gen_range(-1.0..1.3))).collect();
            let bits: Vec<u32> = (0..n).map(|_| r.gen_range(0..=lib.b_max())).collect();
            let residual = r.gen_range(0..=6u32);
            let s = LatentStats::new(vec![0.0; n], var.clone()).unwrap();
            let budget = bits.iter().map(|&b| u64::from(b)).sum::<u64>() + u64::from(residual);
            let (out, dummy) = solve_p3(lib, &s, &bits, q, budget).unwrap();
            assert!(out.iter().zip(&bits).all(|(a, b)| a >= b));
            assert_eq!(
                out.iter().map(|&b| u64::from(b)).sum::<u64>() + dummy,
                budget
            );
            let got: f64 = out
                .iter()
                .zip(&var)
                .map(|(&b, &v)| v * lib.distortion(b, q))
                .sum();
            let want = p3_brute_force(lib, &var, &bits, q, residual);
            assert!(
                (got - want).abs() <= 1e-12 * want.max(1.0),
                "{got} vs {want}"
            );
            checked += 1;
        }
        assert!(checked > 100);
    }

    #[test]
    fn mapping_is_a_bijection() {
        let mods = [
            ModulationOrder::QPSK,
            ModulationOrder::OFF,
            ModulationOrder::QAM16,
        ];
        let m = map_bits_to_grid(&[3, 5, 2], 2, &mods).unwrap();
        assert_eq!(m.slots.len(), 12);
        assert_eq!(m.dummy_bits(), 2);
        let unique: HashSet<_> = m.slots.iter().collect();
        assert_eq!(unique.len(), 12);
        assert!(m.slots.iter().all(|s| s.subcarrier != 1));
        assert_eq!(
            m.slots[..3],
            [
                ResourceSlot {
                    symbol: 0,
                    subcarrier: 0,
                    position: 0
                },
                ResourceSlot {
                    symbol: 0,
                    subcarrier: 0,
                    position: 1
                },
                ResourceSlot {
                    symbol: 0,
                    subcarrier: 2,
                    position: 0
                },
            ]
        );
        assert_eq!(m.slots[6].symbol, 1);
        assert!(map_bits_to_grid(&[13], 2, &mods).is_err());

        let single = map_bits_to_grid(&[2], 1, &[ModulationOrder::QPSK]).unwrap();
        assert_eq!(single.dummy_bits(), 0);
        assert_eq!(single.slots.len(), 2);
    }

    #[test]
    fn empty_source_gives_empty_plan() {
        let lib = lib();
        let s = LatentStats::new(vec![1.0; 4], vec![0.0; 4]).unwrap();
        let cfg = AllocatorConfig {
            p_tot: 4.0,
            delta: 0.4,
            seed: 0,
        };
        let plan = optimize(lib, &s, &flat(4, 0.1), &cfg).unwrap();
        assert_eq!(plan.t_sym, 0);
        assert_eq!(plan.bits, vec![0; 4]);
        assert_eq!(plan.dummy_bits, 0);
        assert!(plan.check(lib, &s).is_empty());
    }

    #[test]
    fn flat_channel_picks_best_ratio() {
        let lib = lib();
        let s = LatentStats::new(
            vec![0.0; 16],
            (0..16).map(|i| 0.5 + 0.3 * i as f64).collect(),
        )
        .unwrap();
        let ch = flat(8, 0.01);
        let cfg = AllocatorConfig {
            p_tot: 8.0,
            delta: 0.4,
            seed: 3,
        };
        let plan = optimize(lib, &s, &ch, &cfg).unwrap();
        let ratios: Vec<f64> = (0..lib.epsilons().len())
            .map(|q| {
                let (_, b) = solve_p1(lib, &s, q, 0.4).unwrap();
                let r = solve_p2(&ch, 8.0, lib.gamma_th(q)).unwrap().r_sym;
                b as f64 / r as f64
            })
            .collect();
        let best = ratios
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1).then(a.0.cmp(&b.0)))
            .unwrap()
            .0;
        assert_eq!(plan.epsilon_index, best);
        assert!(plan.check(lib, &s).is_empty(), "{:?}", plan.check(lib, &s));
    }

    #[test]
    fn no_rate_is_an_error() {
        let lib = lib();
        let s = LatentStats::new(vec![0.0], vec![2.0]).unwrap();
        let cfg = AllocatorConfig {
            p_tot: 1e-9,
            delta: 0.4,
            seed: 0,
        };
        assert!(matches!(
            optimize(lib, &s, &flat(2, 1.0), &cfg),
            Err(Error::NoFeasibleRate)
        ));
    }

    #[test]
    fn plan_json_round_trip_and_tamper_detection() {
        let lib = lib();
        let s = LatentStats::new(vec![0.3; 6], vec![0.2, 1.0, 2.0, 4.0, 8.0, 15.0]).unwrap();
        let ch = flat(4, 0.05);
        let cfg = AllocatorConfig {
            p_tot: 4.0,
            delta: 0.4,
            seed: 9,
        };
        let plan = optimize(lib, &s, &ch, &cfg).unwrap();
        let bytes = plan.to_json_bytes();
        assert_eq!(AllocationPlan::from_json_bytes(&bytes).unwrap(), plan);
        assert_eq!(optimize(lib, &s, &ch, &cfg).unwrap().to_json_bytes(), bytes);
        let mut bad = plan.clone();
        bad.dummy_bits += 1;
        assert!(!bad.check(lib, &s).is_empty());
        let mut bad = plan.clone();
        bad.powers[0] += cfg.p_tot;
        assert!(!bad.check(lib, &s).is_empty());
        assert_eq!(plan.dummy_stream().len() as u64, plan.dummy_bits);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn ratio_winner_needs_fewest_symbols(
            raw in prop::collection::vec((0u64..500, 0u32..80, any::<bool>()), 1..12),
        ) {
            let points: Vec<OperatingPoint> = raw
                .iter()
                .enumerate()
                .map(|(q, &(b_lat, r_sym, feasible))| OperatingPoint { epsilon_index: q, b_lat, r_sym, feasible })
                .collect();
            if let Ok(s) = select_epsilon(&points) {
                prop_assert_eq!(s.fewer_symbols_at, None);
                let p = points[s.point];
                prop_assert!(p.feasible);
                prop_assert!(s.t_sym * u64::from(p.r_sym) >= p.b_lat);
            }
        }

        #[test]
        fn plans_satisfy_invariants(
            var in prop::collection::vec(0.0f64..25.0, 1..24),
            gains in prop::collection::vec(1e-3f64..4.0, 1..12),
            snr_db in -5.0f64..25.0,
            seed in any::<u64>(),
        ) {
            let lib = lib();
            let s = LatentStats::new(vec![0.0; var.len()], var).unwrap().clamped(lib.max_feasible_variance());
            let n_sc = gains.len();
            let ch = channel_from_powers(&gains, 10f64.powf(-snr_db / 10.0));
            let cfg = AllocatorConfig { p_tot: n_sc as f64, delta: 0.4, seed };
            match optimize(lib, &s, &ch, &cfg) {
                Ok(plan) => {
                    let bad = plan.check(lib, &s);
                    prop_assert!(bad.is_empty(), "{:?}", bad);
                }
                Err(Error::NoFeasibleRate) => {}
                Err(e) => prop_assert!(false, "{e}"),
            }
        }

        #[test]
        fn more_power_never_lowers_rate(
            gains in prop::collection::vec(1e-3f64..4.0, 1..16),
            p in 1e-3f64..50.0,
            extra in 0.0f64..50.0,
            q in 0usize..3,
        ) {
            let ch = channel_from_powers(&gains, 0.1);
            let row = lib().gamma_th(q);
            let a = solve_p2(&ch, p, row).unwrap().r_sym;
            let b = solve_p2(&ch, p + extra, row).unwrap().r_sym;
            prop_assert!(b >= a);
        }
    }
}
