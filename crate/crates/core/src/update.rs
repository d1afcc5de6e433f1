//! End-to-end census update for a target year: distribute large-area totals
//! with population shares, reconcile with the survey column margin, then fit
//! the census seed to both margins.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::ipf::{ipf_fit, IpfConfig, WorstMargin, ZeroHandling};
use crate::margins::{
    distribute, reconcile_margins, ReconcilePolicy, ShareProvenance, ShareVector,
};
use crate::tabulate::{Composition, MarginVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateRequest {
    /// Census composition at the base year.
    pub seed: Composition,
    /// Survey-based category totals for the target year.
    pub col_margin: MarginVector,
    /// Large-area population totals for the target year.
    pub large_totals: MarginVector,
    pub shares: ShareVector,
    pub ipf: IpfConfig,
    pub reconcile: ReconcilePolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IpfDiagnostics {
    pub iterations_used: usize,
    pub converged: bool,
    pub final_deviation: f64,
    pub worst: Option<WorstMargin>,
}

/// Audit record attached to every update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub shares_mode: ShareProvenance,
    pub dynamic_regions: Vec<String>,
    pub reconcile_policy: ReconcilePolicy,
    pub scale_factor: f64,
    pub zero_handling: ZeroHandling,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub base_time: i32,
    pub target_time: i32,
    pub config_digest: String,
    pub library_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateResult {
    pub fitted: Composition,
    pub row_margin_used: MarginVector,
    pub col_margin_used: MarginVector,
    pub ipf: IpfDiagnostics,
    pub provenance: Provenance,
}

fn config_digest(req: &UpdateRequest) -> String {
    #[derive(Serialize)]
    struct Config<'a> {
        ipf: &'a IpfConfig,
        reconcile: ReconcilePolicy,
        shares_mode: ShareProvenance,
        dynamic_regions: &'a [String],
    }
    let cfg = Config {
        ipf: &req.ipf,
        reconcile: req.reconcile,
        shares_mode: req.shares.provenance(),
        dynamic_regions: req.shares.dynamic_regions(),
    };
    let bytes = serde_json::to_vec(&cfg).expect("config serialises");
    hex::encode(Sha256::digest(bytes))
}

/// Row and column margins the fit will target, after reconciliation.
pub(crate) fn target_margins(
    seed: &Composition,
    col_margin: &MarginVector,
    large_totals: &MarginVector,
    shares: &ShareVector,
    policy: ReconcilePolicy,
) -> Result<(MarginVector, MarginVector, f64)> {
    let row = distribute(large_totals, shares)
        .and_then(|m| m.aligned_to(seed.area_ids()))
        .map_err(|e| e.at_stage("row margin"))?;
    let col = col_margin
        .aligned_to(seed.category_ids())
        .map_err(|e| e.at_stage("column margin"))?;
    let r = reconcile_margins(&row, &col, policy).map_err(|e| e.at_stage("reconcile"))?;
    Ok((r.row, r.col, r.factor))
}

pub fn spree_update(req: &UpdateRequest) -> Result<UpdateResult> {
    let (row, col, factor) = target_margins(
        &req.seed,
        &req.col_margin,
        &req.large_totals,
        &req.shares,
        req.reconcile,
    )?;
    let fit = ipf_fit(&req.seed, &row, &col, &req.ipf).map_err(|e| e.at_stage("ipf"))?;
    let target_time = req.large_totals.reference_time();
    Ok(UpdateResult {
        fitted: fit.fitted.with_reference_time(target_time),
        row_margin_used: row,
        col_margin_used: col,
        ipf: IpfDiagnostics {
            iterations_used: fit.iterations_used,
            converged: fit.converged,
            final_deviation: fit.final_deviation,
            worst: fit.worst,
        },
        provenance: Provenance {
            shares_mode: req.shares.provenance(),
            dynamic_regions: req.shares.dynamic_regions().to_vec(),
            reconcile_policy: req.reconcile,
            scale_factor: factor,
            zero_handling: req.ipf.zero_handling,
            tolerance: req.ipf.tolerance,
            max_iterations: req.ipf.max_iterations,
            base_time: req.seed.reference_time(),
            target_time,
            config_digest: config_digest(req),
            library_version: env!("CARGO_PKG_VERSION").to_string(),
        },
    })
}

/// Margins and shares for one target year.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YearInputs {
    pub year: i32,
    pub col_margin: MarginVector,
    pub large_totals: MarginVector,
    pub shares: ShareVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct YearOutcome {
    pub year: i32,
    pub result: Result<UpdateResult>,
}

/// Independent updates of the same census seed, one per year. Failed years
/// are reported in place; the others still run. Output follows input order.
pub fn batch_update(
    seed: &Composition,
    years: &[YearInputs],
    ipf: &IpfConfig,
    reconcile: ReconcilePolicy,
) -> Vec<YearOutcome> {
    years
        .par_iter()
        .map(|y| {
            let req = UpdateRequest {
                seed: seed.clone(),
                col_margin: y.col_margin.clone(),
                large_totals: y.large_totals.clone(),
                shares: y.shares.clone(),
                ipf: *ipf,
                reconcile,
            };
            YearOutcome {
                year: y.year,
                result: spree_update(&req),
            }
        })
        .collect()
}
