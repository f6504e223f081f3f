//! Offline grid of channel-optimized quantizers.
//!
//! One quantizer is designed per `(b, ε̄)` pair, with every codeword bit
//! facing the same flip probability `ε̄`. Within an `ε̄` column depths are
//! designed in increasing order so that depth `b` can seed from depth
//! `b - 1`; columns are independent and built in parallel.
//!
//! # File format
//!
//! A library is stored as one JSON document:
//!
//! ```text
//! {
//!   "format_version": 1,
//!   "b_max": 8,
//!   "epsilons": [0.001, ...],
//!   "design": { "restarts": 10, "max_iters": 200, "rel_tol": 1e-9, "seed": 0 },
//!   "gamma_th": [[0.0, γ(2), γ(4), γ(6), γ(8)], ...],      // one row per ε̄
//!   "cells": [
//!     { "b": 1, "epsilon_index": 0, "epsilon": 0.001, "active_count": 2,
//!       "thresholds": [...], "levels": [...], "region_codewords": [...],
//!       "distortion": 0.36... },
//!     ...
//!   ]
//! }
//! ```
//!
//! Cells are ordered by `epsilon_index` then `b`. Floats are written in
//! shortest round-trip decimal and parsed with correct rounding, so values
//! survive a save/load cycle bit for bit.

use std::path::Path;
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modem::{increments_convex, threshold_row, ThresholdRow};
use crate::quantizer::{
    design_channel_optimized_traced, BscVector, Codeword, DesignConfig, Partition, ScalarQuantizer,
};

pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_B_MAX: u32 = 8;
pub const DEFAULT_DELTA: f64 = 0.4;

/// Sorted set of BER targets the library is designed for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EpsilonGrid(Vec<f64>);

impl EpsilonGrid {
    pub fn new(targets: Vec<f64>) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::InvalidArgument("epsilon grid is empty".into()));
        }
        if targets.iter().any(|&e| !(e > 0.0 && e < 0.5)) {
            return Err(Error::InvalidArgument(format!(
                "epsilon targets must lie in (0, 0.5): {targets:?}"
            )));
        }
        if targets.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidArgument(format!(
                "epsilon targets must be strictly increasing: {targets:?}"
            )));
        }
        Ok(Self(targets))
    }

    /// `count` targets spaced uniformly in log scale over `[lo, hi]`.
    pub fn log_uniform(lo: f64, hi: f64, count: usize) -> Result<Self> {
        if count == 0 || !(lo > 0.0 && hi >= lo) {
            return Err(Error::InvalidArgument(format!(
                "log grid needs 0 < lo <= hi and count >= 1, got [{lo}, {hi}] x {count}"
            )));
        }
        if count == 1 {
            return Self::new(vec![lo]);
        }
        let (a, b) = (lo.ln(), hi.ln());
        let mut v: Vec<f64> = (0..count)
            .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp())
            .collect();
        // pin the endpoints exactly
        v[0] = lo;
        v[count - 1] = hi;
        Self::new(v)
    }

    pub fn targets(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<f64> {
        self.0.get(index).copied()
    }
}

impl Default for EpsilonGrid {
    /// Ten targets log-uniform over `[0.001, 0.05]`.
    fn default() -> Self {
        Self::log_uniform(0.001, 0.05, 10).expect("static grid is valid")
    }
}

impl TryFrom<Vec<f64>> for EpsilonGrid {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<EpsilonGrid> for Vec<f64> {
    fn from(g: EpsilonGrid) -> Self {
        g.0
    }
}

#[derive(Debug, Clone)]
pub struct QuantizerLibrary {
    b_max: u32,
    epsilons: EpsilonGrid,
    design: DesignConfig,
    /// `columns[q][b - 1]`
    columns: Vec<Vec<ScalarQuantizer>>,
    gamma_th: Vec<ThresholdRow>,
    digest: OnceLock<String>,
}

impl PartialEq for QuantizerLibrary {
    fn eq(&self, other: &Self) -> bool {
        self.b_max == other.b_max
            && self.epsilons == other.epsilons
            && self.design == other.design
            && self.columns == other.columns
            && self.gamma_th == other.gamma_th
    }
}

/// Health checks run over a built library. None of these are fatal.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LibraryReport {
    /// Second differences `D(b+1) - 2D(b) + D(b-1)` per column, `b = 2..b_max-1`.
    pub second_differences: Vec<Vec<f64>>,
    /// Per column: distortion decreasing and convex in `b`.
    pub column_convex: Vec<bool>,
    /// Per column: distortion nonincreasing in `b` (up to 1e-12).
    pub column_monotone: Vec<bool>,
    /// `(b, q)` cells where `D(b, ε̄_q) < D(b, ε̄_{q-1}) - 1e-9`.
    pub row_violations: Vec<(u32, usize)>,
    /// Per column: SNR-threshold increments nondecreasing in the modulation order.
    pub gamma_convex: Vec<bool>,
}

impl LibraryReport {
    pub fn warnings(&self, lib: &QuantizerLibrary) -> Vec<String> {
        let mut out = Vec::new();
        for (q, ok) in self.column_convex.iter().enumerate() {
            if !ok {
                out.push(format!(
                    "distortion column for epsilon {} is not convex in b; greedy refinement may be suboptimal",
                    lib.epsilons.0[q]
                ));
            }
        }
        for (q, ok) in self.column_monotone.iter().enumerate() {
            if !ok {
                out.push(format!(
                    "distortion column for epsilon {} increases with b",
                    lib.epsilons.0[q]
                ));
            }
        }
        for &(b, q) in &self.row_violations {
            out.push(format!(
                "D({b}, {}) below D({b}, {}): design search likely stalled",
                lib.epsilons.0[q],
                lib.epsilons.0[q - 1]
            ));
        }
        for (q, ok) in self.gamma_convex.iter().enumerate() {
            if !ok {
                out.push(format!(
                    "SNR thresholds for epsilon {} are not convex in the modulation order",
                    lib.epsilons.0[q]
                ));
            }
        }
        out
    }
}

/// Design every `(b, ε̄)` cell.
pub fn build_library(
    b_max: u32,
    grid: &EpsilonGrid,
    cfg: &DesignConfig,
) -> Result<QuantizerLibrary> {
    if b_max == 0 || b_max > crate::quantizer::MAX_BIT_DEPTH {
        return Err(Error::InvalidArgument(format!(
            "b_max {b_max} out of range"
        )));
    }
    cfg.validate()?;
    let columns = grid
        .0
        .par_iter()
        .map(|&eps| -> Result<Vec<ScalarQuantizer>> {
            let mut column: Vec<ScalarQuantizer> = Vec::with_capacity(b_max as usize);
            for b in 1..=b_max {
                let channel = BscVector::uniform(eps, b)?;
                let outcome = design_channel_optimized_traced(b, &channel, cfg, column.last())?;
                log::debug!(
                    "designed b={b} eps={eps}: D={} active={}",
                    outcome.quantizer.normalized_distortion(),
                    outcome.quantizer.active_count()
                );
                column.push(outcome.quantizer);
            }
            Ok(column)
        })
        .collect::<Result<Vec<_>>>()?;
    let gamma_th = grid
        .0
        .iter()
        .map(|&e| threshold_row(e))
        .collect::<Result<Vec<_>>>()?;
    let lib = QuantizerLibrary {
        b_max,
        epsilons: grid.clone(),
        design: *cfg,
        columns,
        gamma_th,
        digest: OnceLock::new(),
    };
    for w in lib.report().warnings(&lib) {
        log::warn!("{w}");
    }
    Ok(lib)
}

impl QuantizerLibrary {
    pub fn b_max(&self) -> u32 {
        self.b_max
    }

    pub fn epsilons(&self) -> &EpsilonGrid {
        &self.epsilons
    }

    pub fn design_config(&self) -> &DesignConfig {
        &self.design
    }

    pub fn format_version(&self) -> u32 {
        FORMAT_VERSION
    }

    pub fn cell_count(&self) -> usize {
        self.columns.iter().map(Vec::len).sum()
    }

    /// Quantizer for depth `b >= 1` at grid index `q`.
    pub fn quantizer(&self, b: u32, q: usize) -> Option<&ScalarQuantizer> {
        if b == 0 {
            return None;
        }
        self.columns.get(q)?.get(b as usize - 1)
    }

    /// `D*(1; b, ε̄_q)`; depth 0 reconstructs the mean, so it costs the full
    /// unit variance.
    pub fn distortion(&self, b: u32, q: usize) -> f64 {
        if b == 0 {
            return 1.0;
        }
        self.columns[q][b as usize - 1].normalized_distortion()
    }

    /// Distortion column for grid index `q`, indexed by `b` from 0.
    pub fn distortion_column(&self, q: usize) -> Vec<f64> {
        (0..=self.b_max).map(|b| self.distortion(b, q)).collect()
    }

    pub fn gamma_th(&self, q: usize) -> &ThresholdRow {
        &self.gamma_th[q]
    }

    pub fn report(&self) -> LibraryReport {
        let cols: Vec<Vec<f64>> = (0..self.epsilons.len())
            .map(|q| (1..=self.b_max).map(|b| self.distortion(b, q)).collect())
            .collect();
        let second_differences: Vec<Vec<f64>> = cols
            .iter()
            .map(|c| c.windows(3).map(|w| w[2] - 2.0 * w[1] + w[0]).collect())
            .collect();
        let column_monotone: Vec<bool> = cols
            .iter()
            .map(|c| c.windows(2).all(|w| w[1] <= w[0] + 1e-12))
            .collect();
        let column_convex = second_differences
            .iter()
            .zip(&column_monotone)
            .map(|(sd, &mono)| mono && sd.iter().all(|&d| d >= 0.0))
            .collect();
        let mut row_violations = Vec::new();
        for b in 1..=self.b_max {
            for q in 1..self.epsilons.len() {
                if self.distortion(b, q) < self.distortion(b, q - 1) - 1e-9 {
                    row_violations.push((b, q));
                }
            }
        }
        LibraryReport {
            second_differences,
            column_convex,
            column_monotone,
            row_violations,
            gamma_convex: self.gamma_th.iter().map(increments_convex).collect(),
        }
    }

    /// Largest latent standard deviation whose distortion target is still
    /// reachable at `b_max` for every grid target.
    pub fn sigma_max(&self) -> f64 {
        let worst = self.distortion(self.b_max, self.epsilons.len() - 1);
        sigma_max_for(worst)
    }

    /// Largest variance `v <= σ_max²` for which `D(b_max, ε̄_max) <= 1/(v+1)`
    /// holds exactly in floating point.
    pub fn max_feasible_variance(&self) -> f64 {
        let worst = self.distortion(self.b_max, self.epsilons.len() - 1);
        let mut v = self.sigma_max().powi(2);
        while v > 0.0 && worst > 1.0 / (v + 1.0) {
            v = f64::from_bits(v.to_bits() - 1);
        }
        v
    }

    /// Smallest depth meeting the normalized target `1/(σ²+1)` at grid
    /// index `q`; 0 for negligible variances below `delta`.
    pub fn min_bits_for_target(&self, q: usize, sigma2: f64, delta: f64) -> Result<u32> {
        if q >= self.epsilons.len() {
            return Err(Error::InvalidArgument(format!(
                "epsilon index {q} out of range"
            )));
        }
        if !(sigma2 >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "variance {sigma2} must be nonnegative"
            )));
        }
        if sigma2 < delta {
            return Ok(0);
        }
        let target = normalized_target(sigma2);
        (1..=self.b_max)
            .find(|&b| self.distortion(b, q) <= target)
            .ok_or(Error::InfeasibleTarget {
                index: 0,
                variance: sigma2,
                b_max: self.b_max,
            })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_bytes(&bytes)
    }

    pub fn to_json_bytes(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec_pretty(&self.to_file()).expect("library serializes");
        bytes.push(b'\n');
        bytes
    }

    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self> {
        let malformed = |detail: String| Error::Malformed {
            what: "quantizer library",
            detail,
        };
        let value: serde_json::Value =
            serde_json::from_slice(bytes).map_err(|e| malformed(e.to_string()))?;
        let found = value
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| malformed("missing format_version".into()))?;
        if found != u64::from(FORMAT_VERSION) {
            return Err(Error::VersionMismatch {
                found: found as u32,
                expected: FORMAT_VERSION,
            });
        }
        let file: LibraryFile =
            serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?;
        Self::from_file(file)
    }

    /// Hash of the serialized library, used as an input digest downstream.
    pub fn digest(&self) -> String {
        self.digest
            .get_or_init(|| crate::digest::sha256_hex(&self.to_json_bytes()))
            .clone()
    }

    fn to_file(&self) -> LibraryFile {
        let cells = self
            .columns
            .iter()
            .enumerate()
            .flat_map(|(q, col)| {
                col.iter().map(move |qz| CellRecord {
                    b: qz.bit_depth(),
                    epsilon_index: q,
                    epsilon: self.epsilons.0[q],
                    active_count: qz.active_count(),
                    thresholds: qz.thresholds().to_vec(),
                    levels: qz.levels().to_vec(),
                    region_codewords: qz.region_codewords().to_vec(),
                    distortion: qz.normalized_distortion(),
                })
            })
            .collect();
        LibraryFile {
            format_version: FORMAT_VERSION,
            tool_version: crate::TOOL_VERSION.to_string(),
            b_max: self.b_max,
            epsilons: self.epsilons.clone(),
            design: self.design,
            gamma_th: self.gamma_th.clone(),
            cells,
        }
    }

    fn from_file(file: LibraryFile) -> Result<Self> {
        let malformed = |detail: String| Error::Malformed {
            what: "quantizer library",
            detail,
        };
        let n_eps = file.epsilons.len();
        if file.b_max == 0 || file.b_max > crate::quantizer::MAX_BIT_DEPTH {
            return Err(malformed(format!("b_max {} out of range", file.b_max)));
        }
        if file.cells.len() != n_eps * file.b_max as usize {
            return Err(malformed(format!(
                "{} cells for {} targets x {} depths",
                file.cells.len(),
                n_eps,
                file.b_max
            )));
        }
        if file.gamma_th.len() != n_eps {
            return Err(malformed(
                "gamma_th rows do not match the epsilon grid".into(),
            ));
        }
        let mut columns: Vec<Vec<ScalarQuantizer>> =
            vec![Vec::with_capacity(file.b_max as usize); n_eps];
        for (i, cell) in file.cells.into_iter().enumerate() {
            let (q, b) = (
                i / file.b_max as usize,
                (i % file.b_max as usize) as u32 + 1,
            );
            if cell.epsilon_index != q || cell.b != b || cell.epsilon != file.epsilons.0[q] {
                return Err(malformed(format!("cell {i} out of order")));
            }
            if cell.active_count != cell.region_codewords.len() {
                return Err(malformed(format!(
                    "cell {i}: active_count disagrees with codeword map"
                )));
            }
            let channel = BscVector::uniform(cell.epsilon, b)?;
            let qz = ScalarQuantizer::new(
                Partition {
                    thresholds: cell.thresholds,
                    codewords: cell.region_codewords,
                },
                cell.levels,
                channel,
            )
            .map_err(|e| malformed(format!("cell {i}: {e}")))?;
            if (qz.normalized_distortion() - cell.distortion).abs() > 1e-10 {
                return Err(malformed(format!(
                    "cell {i}: stored distortion {} but quantizer evaluates to {}",
                    cell.distortion,
                    qz.normalized_distortion()
                )));
            }
            columns[q].push(qz);
        }
        Ok(Self {
            b_max: file.b_max,
            epsilons: file.epsilons,
            design: file.design,
            columns,
            gamma_th: file.gamma_th,
            digest: OnceLock::new(),
        })
    }
}

/// `σ_max = sqrt(1/D - 1)` for the worst-case library distortion `D`.
pub fn sigma_max_for(worst_distortion: f64) -> f64 {
    (1.0 / worst_distortion - 1.0).sqrt()
}

/// Normalized distortion target `1/(σ²+1)`.
pub fn normalized_target(sigma2: f64) -> f64 {
    1.0 / (sigma2 + 1.0)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LibraryFile {
    format_version: u32,
    #[serde(default)]
    tool_version: String,
    b_max: u32,
    epsilons: EpsilonGrid,
    design: DesignConfig,
    gamma_th: Vec<ThresholdRow>,
    cells: Vec<CellRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CellRecord {
    b: u32,
    epsilon_index: usize,
    epsilon: f64,
    active_count: usize,
    thresholds: Vec<f64>,
    levels: Vec<f64>,
    region_codewords: Vec<Codeword>,
    distortion: f64,
}
