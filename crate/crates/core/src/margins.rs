//! Small-area row margins from large-area totals.
//!
//! Large-area totals (projections, or the cohort-component identity) are
//! distributed to small areas with within-region population shares. Shares
//! are either frozen at the census (`fixed`), re-estimated from auxiliary
//! population estimates (`dynamic`), or chosen region by region (`hybrid`).

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ipf::TOTALS_TOLERANCE;
use crate::tabulate::{
    index_map, row_margins, AreaHierarchy, Composition, MarginLevel, MarginVector,
};

/// Per-region share sums must equal one to this tolerance.
pub const SHARE_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShareProvenance {
    FixedCensus,
    DynamicAuxiliary,
    Hybrid,
}

/// The three share strategies, as chosen on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShareMode {
    Fixed,
    Dynamic,
    Hybrid,
}

impl ShareMode {
    pub const ALL: [ShareMode; 3] = [ShareMode::Fixed, ShareMode::Dynamic, ShareMode::Hybrid];

    pub fn name(&self) -> &'static str {
        match self {
            ShareMode::Fixed => "fixed",
            ShareMode::Dynamic => "dynamic",
            ShareMode::Hybrid => "hybrid",
        }
    }
}

impl fmt::Display for ShareMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShareMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "fixed" => Ok(ShareMode::Fixed),
            "dynamic" => Ok(ShareMode::Dynamic),
            "hybrid" => Ok(ShareMode::Hybrid),
            _ => Err(format!("unknown share mode `{s}` (fixed|dynamic|hybrid)")),
        }
    }
}

/// Within-large-area population shares of the small areas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShareVector {
    small_ids: Vec<String>,
    shares: Vec<f64>,
    hierarchy: AreaHierarchy,
    reference_time: i32,
    provenance: ShareProvenance,
    /// Large areas whose shares come from auxiliary data.
    dynamic_regions: Vec<String>,
}

impl ShareVector {
    pub fn small_ids(&self) -> &[String] {
        &self.small_ids
    }

    pub fn shares(&self) -> &[f64] {
        &self.shares
    }

    pub fn hierarchy(&self) -> &AreaHierarchy {
        &self.hierarchy
    }

    pub fn reference_time(&self) -> i32 {
        self.reference_time
    }

    pub fn provenance(&self) -> ShareProvenance {
        self.provenance
    }

    pub fn dynamic_regions(&self) -> &[String] {
        &self.dynamic_regions
    }

    pub fn get(&self, small: &str) -> Option<f64> {
        self.small_ids
            .iter()
            .position(|s| s == small)
            .map(|i| self.shares[i])
    }

    /// Sum of shares per large area, in hierarchy order.
    pub fn large_sums(&self) -> Vec<f64> {
        let ks = self
            .hierarchy
            .large_indices(&self.small_ids)
            .expect("share vector areas are assigned");
        let mut sums = vec![0.0; self.hierarchy.n_large()];
        for (k, s) in ks.iter().zip(&self.shares) {
            sums[*k] += s;
        }
        sums
    }

    /// Checks that each represented large area sums to one.
    pub fn check_sums(&self) -> Result<()> {
        let ks = self.hierarchy.large_indices(&self.small_ids)?;
        let present: HashSet<usize> = ks.iter().copied().collect();
        for (k, s) in self.large_sums().iter().enumerate() {
            if present.contains(&k) && (s - 1.0).abs() > SHARE_SUM_TOLERANCE {
                return Err(Error::invalid(format!(
                    "shares of large area `{}` sum to {s}",
                    self.hierarchy.large_ids()[k]
                )));
            }
        }
        Ok(())
    }

    pub fn to_margin(&self) -> MarginVector {
        MarginVector::new(
            self.small_ids.clone(),
            self.shares.clone(),
            MarginLevel::SmallArea,
            self.reference_time,
        )
        .expect("shares are valid margin values")
    }
}

fn shares_from_values(
    ids: &[String],
    values: &[f64],
    h: &AreaHierarchy,
    reference_time: i32,
    provenance: ShareProvenance,
) -> Result<ShareVector> {
    let ks = h.large_indices(ids)?;
    let mut totals = vec![0.0; h.n_large()];
    for (k, v) in ks.iter().zip(values) {
        totals[*k] += v;
    }
    let mut shares = Vec::with_capacity(ids.len());
    for (k, v) in ks.iter().zip(values) {
        if totals[*k] <= 0.0 {
            return Err(Error::ZeroLargeArea(h.large_ids()[*k].clone()));
        }
        shares.push(v / totals[*k]);
    }
    let dynamic_regions = match provenance {
        ShareProvenance::DynamicAuxiliary => {
            let present: HashSet<usize> = ks.iter().copied().collect();
            h.large_ids()
                .iter()
                .enumerate()
                .filter(|(k, _)| present.contains(k))
                .map(|(_, id)| id.clone())
                .collect()
        }
        _ => Vec::new(),
    };
    Ok(ShareVector {
        small_ids: ids.to_vec(),
        shares,
        hierarchy: h.clone(),
        reference_time,
        provenance,
        dynamic_regions,
    })
}

/// Shares frozen at the census: `Y_a / Y_k`.
pub fn fixed_shares(census: &Composition, h: &AreaHierarchy) -> Result<ShareVector> {
    let rows = row_margins(census);
    shares_from_values(
        rows.ids(),
        rows.values(),
        h,
        census.reference_time(),
        ShareProvenance::FixedCensus,
    )
}

/// Shares from small-area auxiliary population estimates. Only the
/// within-region distribution of the estimates is used, not their totals.
pub fn dynamic_shares(aux_pop: &MarginVector, h: &AreaHierarchy) -> Result<ShareVector> {
    shares_from_values(
        aux_pop.ids(),
        aux_pop.values(),
        h,
        aux_pop.reference_time(),
        ShareProvenance::DynamicAuxiliary,
    )
}

/// Regions selected for dynamic shares, with the change scores behind the choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridSelection {
    /// Selected large-area ids, in the order of the score vector.
    pub selected_large_ids: Vec<String>,
    pub change_scores: Vec<(String, f64)>,
    pub quantile_cutoff: f64,
}

impl HybridSelection {
    pub fn none() -> Self {
        HybridSelection {
            selected_large_ids: Vec::new(),
            change_scores: Vec::new(),
            quantile_cutoff: 0.0,
        }
    }

    pub fn is_selected(&self, large: &str) -> bool {
        self.selected_large_ids.iter().any(|s| s == large)
    }
}

/// Number of regions selected for a cutoff: `ceil(q·K)`.
pub fn selection_count(quantile_cutoff: f64, n_regions: usize) -> usize {
    // The small slack keeps exact products such as 0.25·12 from rounding up.
    let raw = quantile_cutoff * n_regions as f64;
    ((raw - 1e-9).ceil().max(0.0) as usize).min(n_regions)
}

/// Picks the `ceil(q·K)` regions with the largest absolute relative change
/// `|projected/baseline − 1|`. Ties go to the region listed first in `baseline`.
pub fn select_by_change(
    projected: &MarginVector,
    baseline: &MarginVector,
    quantile_cutoff: f64,
) -> Result<HybridSelection> {
    if !(0.0..=1.0).contains(&quantile_cutoff) {
        return Err(Error::invalid(format!(
            "quantile cutoff {quantile_cutoff} outside [0, 1]"
        )));
    }
    let projected = projected.aligned_to(baseline.ids())?;
    let mut scores = Vec::with_capacity(baseline.len());
    for ((id, base), proj) in baseline.iter().zip(projected.values()) {
        if base <= 0.0 {
            return Err(Error::invalid(format!(
                "baseline population of `{id}` is zero"
            )));
        }
        scores.push((id.to_string(), (proj / base - 1.0).abs()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // Stable sort keeps id order among equal scores.
    order.sort_by(|a, b| scores[*b].1.total_cmp(&scores[*a].1));
    let n = selection_count(quantile_cutoff, scores.len());
    let mut chosen: Vec<usize> = order[..n].to_vec();
    chosen.sort_unstable();
    Ok(HybridSelection {
        selected_large_ids: chosen.iter().map(|i| scores[*i].0.clone()).collect(),
        change_scores: scores,
        quantile_cutoff,
    })
}

/// Dynamic shares inside selected regions, fixed shares elsewhere. Each
/// region is taken wholesale from one source.
pub fn hybrid_shares(
    fixed: &ShareVector,
    dynamic: &ShareVector,
    sel: &HybridSelection,
) -> Result<ShareVector> {
    if fixed.hierarchy != dynamic.hierarchy {
        return Err(Error::invalid(
            "fixed and dynamic shares use different hierarchies",
        ));
    }
    if fixed.small_ids.len() != dynamic.small_ids.len() {
        return Err(Error::IdMismatch(
            "fixed and dynamic shares cover different small areas".into(),
        ));
    }
    let h = &fixed.hierarchy;
    let dyn_idx = index_map(&dynamic.small_ids);
    let ks = h.large_indices(&fixed.small_ids)?;
    let mut shares = Vec::with_capacity(fixed.shares.len());
    for ((id, s), k) in fixed.small_ids.iter().zip(&fixed.shares).zip(&ks) {
        if sel.is_selected(&h.large_ids()[*k]) {
            let i = dyn_idx.get(id.as_str()).ok_or_else(|| {
                Error::IdMismatch(format!("dynamic shares lack small area `{id}`"))
            })?;
            shares.push(dynamic.shares[*i]);
        } else {
            shares.push(*s);
        }
    }
    let dynamic_regions = h
        .large_ids()
        .iter()
        .filter(|k| sel.is_selected(k))
        .cloned()
        .collect();
    Ok(ShareVector {
        small_ids: fixed.small_ids.clone(),
        shares,
        hierarchy: h.clone(),
        reference_time: dynamic.reference_time,
        provenance: ShareProvenance::Hybrid,
        dynamic_regions,
    })
}

/// Small-area margins `Ŷ_a = Ŷ_k · p_a`, in the order of the share vector.
pub fn distribute(large_totals: &MarginVector, shares: &ShareVector) -> Result<MarginVector> {
    let h = &shares.hierarchy;
    let ks = h.large_indices(&shares.small_ids)?;
    let totals_idx = index_map(large_totals.ids());
    let mut values = Vec::with_capacity(ks.len());
    for (k, s) in ks.iter().zip(&shares.shares) {
        let large = &h.large_ids()[*k];
        let i = totals_idx
            .get(large.as_str())
            .ok_or_else(|| Error::IdMismatch(format!("no large-area total for `{large}`")))?;
        values.push(large_totals.values()[*i] * s);
    }
    MarginVector::new(
        shares.small_ids.clone(),
        values,
        MarginLevel::SmallArea,
        large_totals.reference_time(),
    )
}

/// Large-area demographic components for one period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentInputs {
    pub base_population: MarginVector,
    pub births: MarginVector,
    pub deaths: MarginVector,
    pub immigration: MarginVector,
    pub emigration: MarginVector,
}

/// `pop_t1 = pop_t0 + births − deaths + immigration − emigration`.
pub fn cohort_component(inputs: &ComponentInputs) -> Result<MarginVector> {
    let ids = inputs.base_population.ids();
    let births = inputs.births.aligned_to(ids)?;
    let deaths = inputs.deaths.aligned_to(ids)?;
    let imm = inputs.immigration.aligned_to(ids)?;
    let emi = inputs.emigration.aligned_to(ids)?;
    let mut values = Vec::with_capacity(ids.len());
    for (i, (id, base)) in inputs.base_population.iter().enumerate() {
        let v = base + births.values()[i] - deaths.values()[i] + imm.values()[i] - emi.values()[i];
        if v < 0.0 {
            return Err(Error::NegativeProjection {
                id: id.to_string(),
                value: v,
            });
        }
        values.push(v);
    }
    MarginVector::new(
        ids.to_vec(),
        values,
        MarginLevel::LargeArea,
        inputs.base_population.reference_time(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReconcilePolicy {
    /// Column margin rescaled to the row total (row margins are the benchmark).
    #[default]
    ScaleColToRow,
    ScaleRowToCol,
    Error,
}

impl fmt::Display for ReconcilePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReconcilePolicy::ScaleColToRow => "scale-col-to-row",
            ReconcilePolicy::ScaleRowToCol => "scale-row-to-col",
            ReconcilePolicy::Error => "error",
        })
    }
}

impl FromStr for ReconcilePolicy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "scale-col-to-row" => Ok(ReconcilePolicy::ScaleColToRow),
            "scale-row-to-col" => Ok(ReconcilePolicy::ScaleRowToCol),
            "error" => Ok(ReconcilePolicy::Error),
            _ => Err(format!(
                "unknown reconcile policy `{s}` (scale-col-to-row|scale-row-to-col|error)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reconciled {
    pub row: MarginVector,
    pub col: MarginVector,
    /// Factor applied to the rescaled margin (1 when nothing changed).
    pub factor: f64,
}

pub fn reconcile_margins(
    row: &MarginVector,
    col: &MarginVector,
    policy: ReconcilePolicy,
) -> Result<Reconciled> {
    let (rt, ct) = (row.total(), col.total());
    if !(rt > 0.0 && ct > 0.0) {
        return Err(Error::invalid(format!(
            "margin totals must be positive (rows {rt}, columns {ct})"
        )));
    }
    if rt == ct {
        return Ok(Reconciled {
            row: row.clone(),
            col: col.clone(),
            factor: 1.0,
        });
    }
    match policy {
        ReconcilePolicy::ScaleColToRow => {
            let factor = rt / ct;
            Ok(Reconciled {
                row: row.clone(),
                col: col.scaled(factor)?,
                factor,
            })
        }
        ReconcilePolicy::ScaleRowToCol => {
            let factor = ct / rt;
            Ok(Reconciled {
                row: row.scaled(factor)?,
                col: col.clone(),
                factor,
            })
        }
        ReconcilePolicy::Error => {
            if (rt - ct).abs() / rt.max(ct) > TOTALS_TOLERANCE {
                Err(Error::MarginTotalsMismatch {
                    row_total: rt,
                    col_total: ct,
                })
            } else {
                Ok(Reconciled {
                    row: row.clone(),
                    col: col.clone(),
                    factor: 1.0,
                })
            }
        }
    }
}
