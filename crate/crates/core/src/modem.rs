//! Gray-labeled square QAM and its bit-error model.
//!
//! Words are split into an in-phase half (the high bits) and a quadrature
//! half (the low bits), most significant bit first. Each half is a
//! reflected-binary Gray label of a PAM level, and level index 0 is the most
//! negative coordinate, so the all-zeros word always lands in the third
//! quadrant. The constellation is scaled to unit average energy.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::q_function;

/// SNR bracket searched by [`snr_threshold`].
pub const SNR_BRACKET: (f64, f64) = (1e-6, 1e6);

/// Bits per QAM symbol; 0 marks an unused subcarrier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct ModulationOrder(u8);

impl ModulationOrder {
    pub const OFF: Self = Self(0);
    pub const QPSK: Self = Self(2);
    pub const QAM16: Self = Self(4);
    pub const QAM64: Self = Self(6);
    pub const QAM256: Self = Self(8);
    /// Highest order in the candidate set.
    pub const MAX: Self = Self::QAM256;
    /// Active orders in increasing size.
    pub const ACTIVE: [Self; 4] = [Self::QPSK, Self::QAM16, Self::QAM64, Self::QAM256];

    pub fn new(bits: u8) -> Result<Self> {
        match bits {
            0 | 2 | 4 | 6 | 8 => Ok(Self(bits)),
            _ => Err(Error::InvalidArgument(format!(
                "modulation order {bits} not in {{0, 2, 4, 6, 8}}"
            ))),
        }
    }

    pub fn bits(self) -> u32 {
        u32::from(self.0)
    }

    pub fn is_active(self) -> bool {
        self.0 > 0
    }

    /// Position in `{0, 2, 4, 6, 8}`.
    pub fn index(self) -> usize {
        usize::from(self.0 / 2)
    }

    /// The next order up, or `None` at the ceiling.
    pub fn step_up(self) -> Option<Self> {
        (self < Self::MAX).then(|| Self(self.0 + 2))
    }

    fn levels_per_axis(self) -> u32 {
        1 << (self.0 / 2)
    }

    /// PAM spacing unit giving unit average symbol energy.
    fn scale(self) -> f64 {
        let points = f64::from(1u32 << self.0);
        (1.5 / (points - 1.0)).sqrt()
    }
}

impl TryFrom<u8> for ModulationOrder {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ModulationOrder> for u8 {
    fn from(m: ModulationOrder) -> u8 {
        m.0
    }
}

#[inline]
fn gray(i: u32) -> u32 {
    i ^ (i >> 1)
}

#[inline]
fn gray_inverse(mut g: u32) -> u32 {
    let mut i = g;
    while g > 1 {
        g >>= 1;
        i ^= g;
    }
    i
}

fn require_active(m: ModulationOrder) -> Result<()> {
    if !m.is_active() {
        return Err(Error::InvalidArgument(
            "modulation order 0 carries no bits".into(),
        ));
    }
    Ok(())
}

/// Map an `m`-bit word to its unit-energy QAM point.
pub fn modulate(bits: u32, m: ModulationOrder) -> Result<Complex64> {
    require_active(m)?;
    let half = m.bits() / 2;
    if bits >> m.bits() != 0 {
        return Err(Error::InvalidArgument(format!(
            "word {bits:#b} wider than {} bits",
            m.bits()
        )));
    }
    let mask = (1 << half) - 1;
    let (i_label, q_label) = (bits >> half, bits & mask);
    let coord = |label: u32| {
        let idx = gray_inverse(label);
        (2.0 * f64::from(idx) - f64::from(m.levels_per_axis() - 1)) * m.scale()
    };
    Ok(Complex64::new(coord(i_label), coord(q_label)))
}

/// Hard-decision demapping, per-axis nearest level. A point exactly between
/// two levels resolves to the lower one.
pub fn demodulate(symbol: Complex64, m: ModulationOrder) -> Result<u32> {
    require_active(m)?;
    let half = m.bits() / 2;
    let top = m.levels_per_axis() - 1;
    let slice = |x: f64| -> u32 {
        let t = 0.5 * (x / m.scale() + f64::from(top));
        // ceil(t - 1/2) rounds half down
        let idx = (t - 0.5).ceil();
        if idx.is_nan() || idx <= 0.0 {
            0
        } else if idx >= f64::from(top) {
            top
        } else {
            idx as u32
        }
    };
    Ok((gray(slice(symbol.re)) << half) | gray(slice(symbol.im)))
}

/// Full point/label table of one constellation.
#[derive(Debug, Clone)]
pub struct Constellation {
    pub order: ModulationOrder,
    pub points: Vec<Complex64>,
    pub labels: Vec<u32>,
}

impl Constellation {
    pub fn new(order: ModulationOrder) -> Result<Self> {
        require_active(order)?;
        let labels: Vec<u32> = (0..1u32 << order.bits()).collect();
        let points = labels
            .iter()
            .map(|&w| modulate(w, order))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            order,
            points,
            labels,
        })
    }

    pub fn mean_energy(&self) -> f64 {
        self.points.iter().map(|p| p.norm_sqr()).sum::<f64>() / self.points.len() as f64
    }
}

/// Approximate BER of Gray `2^m`-QAM at per-symbol SNR `gamma`.
///
/// Returns 0 for an inactive subcarrier.
pub fn ber_approx(m: ModulationOrder, gamma: f64) -> f64 {
    if !m.is_active() {
        return 0.0;
    }
    let mf = f64::from(m.bits());
    let points = f64::from(1u32 << m.bits());
    let root = points.sqrt();
    let arg = (3.0 * gamma / (points - 1.0)).sqrt();
    4.0 / mf * (1.0 - 1.0 / root) * q_function(arg)
        + 4.0 / mf * (1.0 - 2.0 / root) * q_function(3.0 * arg)
}

/// SNR at which [`ber_approx`] equals `target_ber`, by bisection on
/// [`SNR_BRACKET`] in the log domain.
pub fn snr_threshold(m: ModulationOrder, target_ber: f64) -> Result<f64> {
    require_active(m)?;
    if !(target_ber > 0.0 && target_ber < 0.5) {
        return Err(Error::InvalidArgument(format!(
            "target BER {target_ber} outside (0, 0.5)"
        )));
    }
    let (mut lo, mut hi) = SNR_BRACKET;
    if !(ber_approx(m, lo) > target_ber && ber_approx(m, hi) < target_ber) {
        return Err(Error::Bracket {
            m: m.bits(),
            target: target_ber,
            lo,
            hi,
        });
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if mid <= lo || mid >= hi {
            break;
        }
        if ber_approx(m, mid) > target_ber {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // pick whichever bracket end is closer in BER
    let (e_lo, e_hi) = (
        (ber_approx(m, lo) - target_ber).abs(),
        (ber_approx(m, hi) - target_ber).abs(),
    );
    Ok(if e_lo <= e_hi { lo } else { hi })
}

/// `γ_th(m, ε)` for every active order, indexed by [`ModulationOrder::index`];
/// slot 0 (inactive) is 0.
pub type ThresholdRow = [f64; 5];

pub fn threshold_row(target_ber: f64) -> Result<ThresholdRow> {
    let mut row = [0.0; 5];
    for m in ModulationOrder::ACTIVE {
        row[m.index()] = snr_threshold(m, target_ber)?;
    }
    Ok(row)
}

/// Whether the per-step SNR increments `γ_th(m+2) - γ_th(m)` are strictly
/// positive and nondecreasing in `m`, which is what makes greedy loading
/// optimal.
pub fn increments_convex(row: &ThresholdRow) -> bool {
    let inc: Vec<f64> = row.windows(2).map(|w| w[1] - w[0]).collect();
    inc.iter().all(|&d| d > 0.0) && inc.windows(2).all(|w| w[0] <= w[1])
}

/// Bit errors counted over an AWGN link at symbol SNR `gamma`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BerCount {
    pub errors: u64,
    pub bits: u64,
}

impl BerCount {
    pub fn rate(&self) -> f64 {
        if self.bits == 0 {
            0.0
        } else {
            self.errors as f64 / self.bits as f64
        }
    }

    pub fn merge(self, other: Self) -> Self {
        Self {
            errors: self.errors + other.errors,
            bits: self.bits + other.bits,
        }
    }
}

/// Monte Carlo hard-decision BER of `m` over AWGN with at least `min_bits`
/// uniformly random bits.
pub fn awgn_ber<R: Rng + ?Sized>(
    m: ModulationOrder,
    gamma: f64,
    min_bits: u64,
    rng: &mut R,
) -> Result<BerCount> {
    require_active(m)?;
    let per = u64::from(m.bits());
    let symbols = min_bits.div_ceil(per);
    let sd = (0.5 / gamma).sqrt();
    let mask = (1u32 << m.bits()) - 1;
    let mut errors = 0u64;
    for _ in 0..symbols {
        let word = rng.gen::<u32>() & mask;
        let s = modulate(word, m)?;
        let n = Complex64::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        ) * sd;
        let hat = demodulate(s + n, m)?;
        errors += u64::from((hat ^ word).count_ones());
    }
    Ok(BerCount {
        errors,
        bits: symbols * per,
    })
}
