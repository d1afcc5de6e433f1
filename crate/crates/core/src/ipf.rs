//! Iterative proportional fitting of a seed table to row and column targets.
//!
//! Sweeps are row-first, then columns, in a fixed order so that results are
//! bit-reproducible. The convergence statistic is [`margin_deviation`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tabulate::{Composition, MarginVector};

/// Relative tolerance on the agreement of the row and column target totals.
pub const TOTALS_TOLERANCE: f64 = 1e-6;

/// Treatment of zero cells in the seed.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ZeroHandling {
    /// Zero seed cells stay zero.
    #[default]
    Structural,
    /// Zero seed cells are replaced by the given value before fitting.
    Epsilon(f64),
}

impl fmt::Display for ZeroHandling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ZeroHandling::Structural => write!(f, "structural"),
            ZeroHandling::Epsilon(v) => write!(f, "epsilon:{v}"),
        }
    }
}

impl FromStr for ZeroHandling {
    type Err = String;

    /// Accepts `structural`, `epsilon` (default value 0.5) or `epsilon:<v>`.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "structural" => Ok(ZeroHandling::Structural),
            "epsilon" => Ok(ZeroHandling::Epsilon(0.5)),
            other => {
                let v = other.strip_prefix("epsilon:").ok_or_else(|| {
                    format!("expected `structural` or `epsilon:<v>`, got `{other}`")
                })?;
                let v: f64 = v.parse().map_err(|e| format!("bad epsilon `{v}`: {e}"))?;
                if !(v.is_finite() && v > 0.0) {
                    return Err(format!("epsilon must be positive, got {v}"));
                }
                Ok(ZeroHandling::Epsilon(v))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IpfConfig {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub zero_handling: ZeroHandling,
}

impl Default for IpfConfig {
    fn default() -> Self {
        IpfConfig {
            tolerance: 1e-8,
            max_iterations: 1000,
            zero_handling: ZeroHandling::Structural,
        }
    }
}

impl IpfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance.is_finite() && self.tolerance > 0.0) {
            return Err(Error::invalid("IPF tolerance must be positive"));
        }
        if self.max_iterations == 0 {
            return Err(Error::invalid("IPF max_iterations must be at least 1"));
        }
        if let ZeroHandling::Epsilon(v) = self.zero_handling {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid("IPF epsilon must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MarginAxis {
    Row,
    Column,
}

/// The margin entry furthest from its target after the last sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstMargin {
    pub axis: MarginAxis,
    pub id: String,
    pub fitted: f64,
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IpfResult {
    pub fitted: Composition,
    /// Full row+column sweeps performed; 0 when the seed already fits.
    pub iterations_used: usize,
    pub converged: bool,
    pub final_deviation: f64,
    pub worst: Option<WorstMargin>,
}

fn relative_gap(fitted: f64, target: f64) -> f64 {
    (fitted - target).abs() / target.max(1.0)
}

struct Deviation {
    value: f64,
    axis: MarginAxis,
    index: usize,
    fitted: f64,
    target: f64,
}

fn deviation(cells: &[f64], n_cols: usize, rows: &[f64], cols: &[f64]) -> Deviation {
    let mut worst = Deviation {
        value: 0.0,
        axis: MarginAxis::Row,
        index: 0,
        fitted: 0.0,
        target: 0.0,
    };
    let mut col_sums = vec![0.0; n_cols];
    for (a, target) in rows.iter().enumerate() {
        let row = &cells[a * n_cols..(a + 1) * n_cols];
        let mut s = 0.0;
        for (acc, v) in col_sums.iter_mut().zip(row) {
            s += v;
            *acc += v;
        }
        let g = relative_gap(s, *target);
        if g > worst.value {
            worst = Deviation {
                value: g,
                axis: MarginAxis::Row,
                index: a,
                fitted: s,
                target: *target,
            };
        }
    }
    for (j, (s, target)) in col_sums.iter().zip(cols).enumerate() {
        let g = relative_gap(*s, *target);
        if g > worst.value {
            worst = Deviation {
                value: g,
                axis: MarginAxis::Column,
                index: j,
                fitted: *s,
                target: *target,
            };
        }
    }
    worst
}

fn align_targets(
    seed: &Composition,
    row_target: &MarginVector,
    col_target: &MarginVector,
) -> Result<(MarginVector, MarginVector)> {
    let rows = row_target
        .aligned_to(seed.area_ids())
        .map_err(|e| Error::IdMismatch(format!("row target vs seed areas: {e}")))?;
    let cols = col_target
        .aligned_to(seed.category_ids())
        .map_err(|e| Error::IdMismatch(format!("column target vs seed categories: {e}")))?;
    Ok((rows, cols))
}

/// Largest relative gap `|fitted − target| / max(target, 1)` over all row
/// and column margins.
pub fn margin_deviation(
    fitted: &Composition,
    row_target: &MarginVector,
    col_target: &MarginVector,
) -> Result<f64> {
    let (rows, cols) = align_targets(fitted, row_target, col_target)?;
    Ok(deviation(
        fitted.counts(),
        fitted.n_categories(),
        rows.values(),
        cols.values(),
    )
    .value)
}

/// Fits `seed` to the row and column targets by alternating proportional scaling.
///
/// Non-convergence is not an error: the result carries `converged = false`
/// and the worst margin so the caller can decide.
pub fn ipf_fit(
    seed: &Composition,
    row_target: &MarginVector,
    col_target: &MarginVector,
    cfg: &IpfConfig,
) -> Result<IpfResult> {
    cfg.validate()?;
    let (rows, cols) = align_targets(seed, row_target, col_target)?;
    let rows = rows.values();
    let cols = cols.values();
    let row_total: f64 = rows.iter().sum();
    let col_total: f64 = cols.iter().sum();
    let scale = row_total.max(col_total);
    if scale > 0.0 && (row_total - col_total).abs() / scale > TOTALS_TOLERANCE {
        return Err(Error::MarginTotalsMismatch {
            row_total,
            col_total,
        });
    }

    let n_cols = seed.n_categories();
    let mut cells: Vec<f64> = seed.counts().to_vec();
    if let ZeroHandling::Epsilon(eps) = cfg.zero_handling {
        for v in cells.iter_mut().filter(|v| **v == 0.0) {
            *v = eps;
        }
    }

    // Mass cannot be created in an empty line.
    for (a, target) in rows.iter().enumerate() {
        let mass: f64 = cells[a * n_cols..(a + 1) * n_cols].iter().sum();
        if *target > 0.0 && mass <= 0.0 {
            return Err(Error::EmptySeedLine {
                kind: "row",
                id: seed.area_ids()[a].clone(),
            });
        }
    }
    for (j, target) in cols.iter().enumerate() {
        let mass: f64 = (0..rows.len())
            .filter(|a| rows[*a] > 0.0)
            .map(|a| cells[a * n_cols + j])
            .sum();
        if *target > 0.0 && mass <= 0.0 {
            return Err(Error::EmptySeedLine {
                kind: "column",
                id: seed.category_ids()[j].clone(),
            });
        }
    }

    let mut dev = deviation(&cells, n_cols, rows, cols);
    let mut iterations = 0;
    while dev.value > cfg.tolerance && iterations < cfg.max_iterations {
        iterations += 1;
        for (a, target) in rows.iter().enumerate() {
            let row = &mut cells[a * n_cols..(a + 1) * n_cols];
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                let f = target / s;
                row.iter_mut().for_each(|v| *v *= f);
            }
        }
        let mut col_sums = vec![0.0; n_cols];
        for row in cells.chunks_exact(n_cols) {
            for (acc, v) in col_sums.iter_mut().zip(row) {
                *acc += v;
            }
        }
        let factors: Vec<f64> = col_sums
            .iter()
            .zip(cols)
            .map(|(s, t)| if *s > 0.0 { t / s } else { 1.0 })
            .collect();
        for row in cells.chunks_exact_mut(n_cols) {
            for (v, f) in row.iter_mut().zip(&factors) {
                *v *= f;
            }
        }
        dev = deviation(&cells, n_cols, rows, cols);
    }

    let converged = dev.value <= cfg.tolerance;
    let worst = (dev.value > 0.0).then(|| WorstMargin {
        axis: dev.axis,
        id: match dev.axis {
            MarginAxis::Row => seed.area_ids()[dev.index].clone(),
            MarginAxis::Column => seed.category_ids()[dev.index].clone(),
        },
        fitted: dev.fitted,
        target: dev.target,
    });
    if !converged {
        log::warn!(
            "IPF did not converge after {iterations} sweeps (deviation {:.3e})",
            dev.value
        );
    }
    Ok(IpfResult {
        fitted: seed.with_counts_unchecked(cells),
        iterations_used: iterations,
        converged,
        final_deviation: dev.value,
        worst,
    })
}
