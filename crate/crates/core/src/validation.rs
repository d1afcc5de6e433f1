//! Design-based Monte Carlo comparison of the share strategies against a
//! known truth.
//!
//! Replicate `r` uses stream `r` of the plan seed and draws, in order: the
//! base census replicate, the evaluation census replicate, then the survey
//! column margin. Auxiliary estimates are taken from `aux_pool[r % len]`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ipf::IpfConfig;
use crate::margins::{
    dynamic_shares, fixed_shares, hybrid_shares, select_by_change, HybridSelection,
    ReconcilePolicy, ShareMode, ShareVector,
};
use crate::mpi::POOR;
use crate::numeric::{pearson, SpreadSummary};
use crate::sampling::{multinomial, poisson, replicate_rng};
use crate::tabulate::{
    aggregate_to_large, column_margins, row_margins, to_probabilities, AreaHierarchy, Composition,
    MarginLevel, MarginVector,
};
use crate::uncertainty::{resample_column_margin_with, ColumnResample, SurveyDesign};
use crate::update::{spree_update, UpdateRequest};

/// Poisson population per area, then a multinomial split over categories.
pub fn replicate_census<R: rand::Rng + ?Sized>(truth: &Composition, rng: &mut R) -> Composition {
    let probs = to_probabilities(truth);
    let mut counts = Vec::with_capacity(truth.counts().len());
    for (a, row) in truth.rows().enumerate() {
        if probs.is_zero_row(a) {
            counts.extend(std::iter::repeat_n(0.0, row.len()));
            continue;
        }
        let n = poisson(rng, row.iter().sum());
        counts.extend(
            multinomial(rng, n, probs.row(a))
                .into_iter()
                .map(|x| x as f64),
        );
    }
    truth.with_counts_unchecked(counts)
}

fn check_lengths(estimates: &[f64], truths: &[f64]) -> Result<()> {
    if estimates.len() != truths.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} estimates against {} truths",
            estimates.len(),
            truths.len()
        )));
    }
    if estimates.is_empty() {
        return Err(Error::Empty("no replicates to evaluate".into()));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// `mean(est − truth) / mean(truth)`; `None` when the mean truth is zero.
pub fn relative_bias(estimates: &[f64], truths: &[f64]) -> Result<Option<f64>> {
    check_lengths(estimates, truths)?;
    let m = mean(truths);
    if m == 0.0 {
        return Ok(None);
    }
    let d: Vec<f64> = estimates.iter().zip(truths).map(|(e, t)| e - t).collect();
    Ok(Some(mean(&d) / m))
}

/// `sqrt(mean((est − truth)²)) / mean(truth)`; `None` when the mean truth is zero.
pub fn relative_rmse(estimates: &[f64], truths: &[f64]) -> Result<Option<f64>> {
    check_lengths(estimates, truths)?;
    let m = mean(truths);
    if m == 0.0 {
        return Ok(None);
    }
    let d: Vec<f64> = estimates
        .iter()
        .zip(truths)
        .map(|(e, t)| (e - t) * (e - t))
        .collect();
    Ok(Some(mean(&d).sqrt() / m))
}

/// Quartile label (0 = lowest change) for each area, by ascending score.
/// Equal scores keep input order. With `n = 4q + m`, the first `m` groups
/// get `q + 1` areas.
pub fn quartile_grouping(change_scores: &[f64]) -> Result<Vec<usize>> {
    let n = change_scores.len();
    if n < 4 {
        return Err(Error::invalid(format!(
            "quartile grouping needs at least 4 areas, got {n}"
        )));
    }
    if let Some(x) = change_scores.iter().find(|x| !x.is_finite()) {
        return Err(Error::invalid(format!("change score {x} is not finite")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|a, b| change_scores[*a].total_cmp(&change_scores[*b]));
    let (q, m) = (n / 4, n % 4);
    let mut labels = vec![0; n];
    let mut pos = 0;
    for g in 0..4 {
        let size = q + usize::from(g < m);
        for i in &order[pos..pos + size] {
            labels[*i] = g;
        }
        pos += size;
    }
    Ok(labels)
}

/// Turns the randomness of the harness off piece by piece.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationSwitches {
    /// Replicate both censuses; otherwise every replicate uses the truths.
    pub census_noise: bool,
    /// Resample the survey column margin; otherwise use the exact margin of the later truth.
    pub column_noise: bool,
}

impl Default for SimulationSwitches {
    fn default() -> Self {
        SimulationSwitches {
            census_noise: true,
            column_noise: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationPlan {
    pub replicates: usize,
    pub seed: u64,
    pub truth_t0: Composition,
    pub truth_t: Composition,
    pub hierarchy: AreaHierarchy,
    /// Projected large-area totals at the later time.
    pub large_totals_t: MarginVector,
    pub survey_design: SurveyDesign,
    /// Replicate small-area population estimates at the later time.
    pub aux_pool: Vec<MarginVector>,
    pub strategies: Vec<ShareMode>,
    pub hybrid_cutoff: f64,
    pub col_resample: ColumnResample,
    pub ipf: IpfConfig,
    pub reconcile: ReconcilePolicy,
    pub switches: SimulationSwitches,
}

impl SimulationPlan {
    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::invalid("simulation needs at least one replicate"));
        }
        if self.strategies.is_empty() {
            return Err(Error::invalid("no share strategy selected"));
        }
        self.truth_t0.check_same_shape(&self.truth_t)?;
        self.hierarchy.large_indices(self.truth_t0.area_ids())?;
        let needs_aux = self
            .strategies
            .iter()
            .any(|s| matches!(s, ShareMode::Dynamic | ShareMode::Hybrid));
        if needs_aux && self.aux_pool.is_empty() {
            return Err(Error::Empty(
                "dynamic and hybrid strategies need an auxiliary replicate pool".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.hybrid_cutoff) {
            return Err(Error::invalid(format!(
                "hybrid cutoff {} outside [0, 1]",
                self.hybrid_cutoff
            )));
        }
        self.ipf.validate()
    }
}

/// Metrics of one strategy in one area.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaMetrics {
    pub area_id: String,
    pub quartile: usize,
    pub share_relative_bias: Option<f64>,
    pub share_relative_rmse: Option<f64>,
    pub target_relative_bias: Option<f64>,
    pub target_relative_rmse: Option<f64>,
}

/// Quartile summaries of one strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuartileSummary {
    pub quartile: usize,
    pub n_areas: usize,
    /// Mean relative bias of the population shares, in %.
    pub share_mean_bias_pct: Option<f64>,
    /// Mean absolute relative bias of the population shares, in %.
    pub share_mean_abs_bias_pct: Option<f64>,
    /// Spread across areas of the target's relative bias, in %.
    pub target_bias_pct: Option<SpreadSummary>,
    /// Spread across areas of the target's relative RMSE, in %.
    pub target_rmse_pct: Option<SpreadSummary>,
    /// Correlation of estimated and true target values pooled over areas and replicates.
    pub target_correlation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyReport {
    pub strategy: ShareMode,
    pub areas: Vec<AreaMetrics>,
    pub quartiles: Vec<QuartileSummary>,
    pub overall_target_bias_pct: Option<SpreadSummary>,
    pub overall_target_rmse_pct: Option<SpreadSummary>,
    /// Areas where this strategy has the smallest absolute share bias.
    pub share_wins: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub replicates_requested: usize,
    pub replicates_completed: usize,
    pub failures: Vec<String>,
    pub seed: u64,
    /// Category whose proportion is evaluated.
    pub target_category: String,
    pub area_ids: Vec<String>,
    /// `|p_a,t / p_a − 1|` of the true shares.
    pub change_scores: Vec<f64>,
    pub quartiles: Vec<usize>,
    pub hybrid_selection: Option<HybridSelection>,
    pub strategies: Vec<StrategyReport>,
}

impl SimulationReport {
    pub fn strategy(&self, mode: ShareMode) -> Option<&StrategyReport> {
        self.strategies.iter().find(|s| s.strategy == mode)
    }
}

/// Proportion of `category` in every area; `None` for empty rows.
fn proportions(c: &Composition, category: usize) -> Vec<Option<f64>> {
    c.rows()
        .map(|r| {
            let t: f64 = r.iter().sum();
            (t > 0.0).then(|| r[category] / t)
        })
        .collect()
}

struct ReplicateOutcome {
    true_shares: Vec<f64>,
    true_target: Vec<Option<f64>>,
    /// `[strategy]` → (shares, target).
    estimates: Vec<(Vec<f64>, Vec<Option<f64>>)>,
}

fn run_replicate(
    r: usize,
    plan: &SimulationPlan,
    hybrid: Option<&HybridSelection>,
    target: usize,
) -> Result<ReplicateOutcome> {
    let mut rng = replicate_rng(plan.seed, r as u64);
    let (y0, yt) = if plan.switches.census_noise {
        let y0 = replicate_census(&plan.truth_t0, &mut rng);
        let yt = replicate_census(&plan.truth_t, &mut rng);
        (y0, yt)
    } else {
        (plan.truth_t0.clone(), plan.truth_t.clone())
    };
    let t = plan.truth_t.reference_time();
    let col = if plan.switches.column_noise {
        resample_column_margin_with(
            &plan.survey_design,
            plan.truth_t.category_ids(),
            t,
            plan.col_resample,
            &mut rng,
        )?
    } else {
        column_margins(&plan.truth_t)
    };

    let truth_shares = fixed_shares(&yt, &plan.hierarchy)?;
    let fixed = fixed_shares(&y0, &plan.hierarchy)?;
    let dynamic = if plan.aux_pool.is_empty() {
        None
    } else {
        let aux = plan.aux_pool[r % plan.aux_pool.len()].aligned_to(y0.area_ids())?;
        Some(dynamic_shares(&aux, &plan.hierarchy)?)
    };

    let mut estimates = Vec::with_capacity(plan.strategies.len());
    for mode in &plan.strategies {
        let shares: ShareVector = match (mode, &dynamic) {
            (ShareMode::Fixed, _) => fixed.clone(),
            (ShareMode::Dynamic, Some(d)) => d.clone(),
            (ShareMode::Hybrid, Some(d)) => hybrid_shares(&fixed, d, hybrid.expect("selection"))?,
            _ => unreachable!("plan validated"),
        };
        let req = UpdateRequest {
            seed: y0.clone(),
            col_margin: col.clone(),
            large_totals: plan.large_totals_t.clone(),
            shares,
            ipf: plan.ipf,
            reconcile: plan.reconcile,
        };
        let res = spree_update(&req)?;
        if !res.ipf.converged {
            return Err(Error::invalid(format!(
                "{mode} update did not converge (deviation {:.3e})",
                res.ipf.final_deviation
            )));
        }
        estimates.push((
            req.shares.shares().to_vec(),
            proportions(&res.fitted, target),
        ));
    }
    Ok(ReplicateOutcome {
        true_shares: truth_shares.shares().to_vec(),
        true_target: proportions(&yt, target),
        estimates,
    })
}

fn pct(x: Option<f64>) -> Option<f64> {
    x.map(|v| v * 100.0)
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| mean(&v))
}

pub fn run_simulation(plan: &SimulationPlan) -> Result<SimulationReport> {
    plan.validate()?;
    let target = plan.truth_t.category_index(POOR).unwrap_or(0);
    let areas = plan.truth_t0.area_ids().to_vec();
    let n_areas = areas.len();

    let p0 = fixed_shares(&plan.truth_t0, &plan.hierarchy)?;
    let pt = fixed_shares(&plan.truth_t, &plan.hierarchy)?;
    let change_scores: Vec<f64> = p0
        .shares()
        .iter()
        .zip(pt.shares())
        .map(|(a, b)| if *a > 0.0 { (b / a - 1.0).abs() } else { 0.0 })
        .collect();
    let quartiles = quartile_grouping(&change_scores)?;

    let hybrid = if plan.strategies.contains(&ShareMode::Hybrid) {
        let base = row_margins(&aggregate_to_large(&plan.truth_t0, &plan.hierarchy)?)
            .with_level(MarginLevel::LargeArea);
        Some(select_by_change(
            &plan.large_totals_t,
            &base,
            plan.hybrid_cutoff,
        )?)
    } else {
        None
    };

    let outcomes: Vec<Result<ReplicateOutcome>> = (0..plan.replicates)
        .into_par_iter()
        .map(|r| run_replicate(r, plan, hybrid.as_ref(), target))
        .collect();
    let mut done = Vec::with_capacity(outcomes.len());
    let mut failures = Vec::new();
    for (r, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(x) => done.push(x),
            Err(e) => {
                log::warn!("simulation replicate {r} failed: {e}");
                failures.push(format!("replicate {r}: {e}"));
            }
        }
    }
    if done.is_empty() {
        return Err(Error::TooManyDropped {
            dropped: plan.replicates,
            total: plan.replicates,
            reason: failures.first().cloned().unwrap_or_default(),
        });
    }

    let mut strategies = Vec::with_capacity(plan.strategies.len());
    for (s, mode) in plan.strategies.iter().enumerate() {
        let mut metrics = Vec::with_capacity(n_areas);
        // Pairs (estimate, truth) of the target, per area.
        let mut target_pairs: Vec<Vec<(f64, f64)>> = vec![Vec::new(); n_areas];
        for (a, id) in areas.iter().enumerate() {
            let est_p: Vec<f64> = done.iter().map(|o| o.estimates[s].0[a]).collect();
            let true_p: Vec<f64> = done.iter().map(|o| o.true_shares[a]).collect();
            for o in &done {
                if let (Some(e), Some(t)) = (o.estimates[s].1[a], o.true_target[a]) {
                    target_pairs[a].push((e, t));
                }
            }
            let (est_h, true_h): (Vec<f64>, Vec<f64>) = target_pairs[a].iter().copied().unzip();
            let (hb, hr) = if est_h.is_empty() {
                (None, None)
            } else {
                (
                    relative_bias(&est_h, &true_h)?,
                    relative_rmse(&est_h, &true_h)?,
                )
            };
            metrics.push(AreaMetrics {
                area_id: id.clone(),
                quartile: quartiles[a],
                share_relative_bias: relative_bias(&est_p, &true_p)?,
                share_relative_rmse: relative_rmse(&est_p, &true_p)?,
                target_relative_bias: hb,
                target_relative_rmse: hr,
            });
        }
        let quartile_rows = (0..4)
            .map(|q| {
                let members: Vec<usize> = (0..n_areas).filter(|a| quartiles[*a] == q).collect();
                let share_bias = members
                    .iter()
                    .filter_map(|a| metrics[*a].share_relative_bias);
                let bias: Vec<f64> = members
                    .iter()
                    .filter_map(|a| metrics[*a].target_relative_bias)
                    .map(|x| x * 100.0)
                    .collect();
                let rmse: Vec<f64> = members
                    .iter()
                    .filter_map(|a| metrics[*a].target_relative_rmse)
                    .map(|x| x * 100.0)
                    .collect();
                let (x, y): (Vec<f64>, Vec<f64>) = members
                    .iter()
                    .flat_map(|a| target_pairs[*a].iter().copied())
                    .unzip();
                QuartileSummary {
                    quartile: q,
                    n_areas: members.len(),
                    share_mean_bias_pct: pct(mean_of(share_bias.clone())),
                    share_mean_abs_bias_pct: pct(mean_of(share_bias.map(f64::abs))),
                    target_bias_pct: SpreadSummary::of(&bias),
                    target_rmse_pct: SpreadSummary::of(&rmse),
                    target_correlation: pearson(&x, &y),
                }
            })
            .collect();
        let all_bias: Vec<f64> = metrics
            .iter()
            .filter_map(|m| m.target_relative_bias)
            .map(|x| x * 100.0)
            .collect();
        let all_rmse: Vec<f64> = metrics
            .iter()
            .filter_map(|m| m.target_relative_rmse)
            .map(|x| x * 100.0)
            .collect();
        strategies.push(StrategyReport {
            strategy: *mode,
            areas: metrics,
            quartiles: quartile_rows,
            overall_target_bias_pct: SpreadSummary::of(&all_bias),
            overall_target_rmse_pct: SpreadSummary::of(&all_rmse),
            share_wins: 0,
        });
    }

    for a in 0..n_areas {
        let mut best: Option<(usize, f64)> = None;
        for (s, rep) in strategies.iter().enumerate() {
            if let Some(b) = rep.areas[a].share_relative_bias.map(f64::abs) {
                if best.is_none_or(|(_, x)| b < x) {
                    best = Some((s, b));
                }
            }
        }
        if let Some((s, _)) = best {
            strategies[s].share_wins += 1;
        }
    }

    Ok(SimulationReport {
        replicates_requested: plan.replicates,
        replicates_completed: done.len(),
        failures,
        seed: plan.seed,
        target_category: plan.truth_t.category_ids()[target].clone(),
        area_ids: areas,
        change_scores,
        quartiles,
        hybrid_selection: hybrid,
        strategies,
    })
}
