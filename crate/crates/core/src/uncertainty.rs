//! Mixed semiparametric bootstrap for the MSE and CV of updated cells.
//!
//! Replicate `b` draws from stream `b` of the master seed, in this order:
//!
//! 1. per area, in area order: `n_a ~ Poisson(Ŷ_a)` then
//!    `Multinomial(n_a, π̂_a)` (zero-population rows draw nothing);
//! 2. the auxiliary population vector, only when the shares have dynamic
//!    regions and auxiliary resampling is on;
//! 3. the survey column margin, stratum by stratum.
//!
//! The replicate is refitted to its own margins and
//! `MSE(a,j) = mean_b (Ŷ^b_aj − Ŷ^{Mult,b}_aj)²`.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ipf::ipf_fit;
use crate::margins::{dynamic_shares, hybrid_shares, HybridSelection, ShareVector};
use crate::mpi::poverty_columns;
use crate::numeric::SpreadSummary;
use crate::sampling::{multinomial, poisson, replicate_rng};
use crate::tabulate::{row_margins, to_probabilities, Composition, MarginLevel, MarginVector};
use crate::update::{spree_update, target_margins, UpdateRequest};

/// One survey observation contributing `weight` to category `category_id`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveyObservation {
    pub psu_id: String,
    pub stratum_id: String,
    pub category_id: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveyDesign {
    observations: Vec<SurveyObservation>,
}

/// Strata in first-appearance order, each with its PSUs in first-appearance order.
struct DesignIndex {
    /// `[stratum][psu]` → per-category weighted totals.
    psu_totals: Vec<Vec<Vec<f64>>>,
    /// `[stratum]` → (category index, weight) per observation.
    observations: Vec<Vec<(usize, f64)>>,
}

impl SurveyDesign {
    pub fn new(observations: Vec<SurveyObservation>) -> Result<Self> {
        if observations.is_empty() {
            return Err(Error::Empty("survey design has no observations".into()));
        }
        if let Some(o) = observations
            .iter()
            .find(|o| !(o.weight.is_finite() && o.weight > 0.0))
        {
            return Err(Error::invalid(format!(
                "survey weight {} in PSU `{}` is not positive",
                o.weight, o.psu_id
            )));
        }
        Ok(SurveyDesign { observations })
    }

    pub fn observations(&self) -> &[SurveyObservation] {
        &self.observations
    }

    fn index(&self, categories: &[String]) -> Result<DesignIndex> {
        let cat_idx: HashMap<&str, usize> = categories
            .iter()
            .enumerate()
            .map(|(i, c)| (c.as_str(), i))
            .collect();
        let mut strata: Vec<&str> = Vec::new();
        let mut psus: Vec<Vec<&str>> = Vec::new();
        let mut psu_totals: Vec<Vec<Vec<f64>>> = Vec::new();
        let mut observations: Vec<Vec<(usize, f64)>> = Vec::new();
        for o in &self.observations {
            let j = *cat_idx.get(o.category_id.as_str()).ok_or_else(|| {
                Error::invalid(format!(
                    "survey category `{}` is not in the composition",
                    o.category_id
                ))
            })?;
            let s = match strata.iter().position(|s| *s == o.stratum_id) {
                Some(s) => s,
                None => {
                    strata.push(&o.stratum_id);
                    psus.push(Vec::new());
                    psu_totals.push(Vec::new());
                    observations.push(Vec::new());
                    strata.len() - 1
                }
            };
            let p = match psus[s].iter().position(|p| *p == o.psu_id) {
                Some(p) => p,
                None => {
                    psus[s].push(&o.psu_id);
                    psu_totals[s].push(vec![0.0; categories.len()]);
                    psus[s].len() - 1
                }
            };
            psu_totals[s][p][j] += o.weight;
            observations[s].push((j, o.weight));
        }
        Ok(DesignIndex {
            psu_totals,
            observations,
        })
    }

    /// Weighted category totals without resampling.
    pub fn totals(&self, categories: &[String], reference_time: i32) -> Result<MarginVector> {
        let idx = self.index(categories)?;
        let mut values = vec![0.0; categories.len()];
        for stratum in &idx.psu_totals {
            for psu in stratum {
                for (v, x) in values.iter_mut().zip(psu) {
                    *v += x;
                }
            }
        }
        MarginVector::new(
            categories.to_vec(),
            values,
            MarginLevel::Category,
            reference_time,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ColumnResample {
    /// PSUs drawn with replacement within strata.
    #[default]
    PsuCluster,
    /// Individual observations drawn with replacement within strata.
    IidCategory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AuxResample {
    #[default]
    ResamplePool,
    None,
}

/// Switches that replace random draws by their expectations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DebugSwitches {
    /// `n_a = Ŷ_a` instead of a Poisson draw.
    pub poisson_at_mean: bool,
    /// `Ŷ^{Mult}_aj = n_a·π̂_aj` instead of a multinomial draw.
    pub multinomial_at_mean: bool,
    /// Use the supplied column margin instead of a survey resample.
    pub column_at_point: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub seed: u64,
    pub col_resample: ColumnResample,
    pub aux_resample: AuxResample,
    /// CV of the multiplicative perturbation used when no replicate pool is given.
    pub perturbation_cv: f64,
    /// Largest tolerated share of failed replicates.
    pub max_drop_fraction: f64,
    pub debug: DebugSwitches,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            replicates: 100,
            seed: 0,
            col_resample: ColumnResample::PsuCluster,
            aux_resample: AuxResample::ResamplePool,
            perturbation_cv: 0.05,
            max_drop_fraction: 0.10,
            debug: DebugSwitches::default(),
        }
    }
}

/// Column margin from PSUs resampled with replacement within each stratum
/// (same number of PSUs per stratum as observed).
pub fn resample_column_margin<R: Rng + ?Sized>(
    design: &SurveyDesign,
    categories: &[String],
    reference_time: i32,
    rng: &mut R,
) -> Result<MarginVector> {
    resample_column_margin_with(
        design,
        categories,
        reference_time,
        ColumnResample::PsuCluster,
        rng,
    )
}

pub fn resample_column_margin_with<R: Rng + ?Sized>(
    design: &SurveyDesign,
    categories: &[String],
    reference_time: i32,
    mode: ColumnResample,
    rng: &mut R,
) -> Result<MarginVector> {
    let idx = design.index(categories)?;
    let mut values = vec![0.0; categories.len()];
    match mode {
        ColumnResample::PsuCluster => {
            for stratum in &idx.psu_totals {
                let n = stratum.len();
                for _ in 0..n {
                    let psu = &stratum[rng.random_range(0..n)];
                    for (v, x) in values.iter_mut().zip(psu) {
                        *v += x;
                    }
                }
            }
        }
        ColumnResample::IidCategory => {
            for stratum in &idx.observations {
                let n = stratum.len();
                for _ in 0..n {
                    let (j, w) = stratum[rng.random_range(0..n)];
                    values[j] += w;
                }
            }
        }
    }
    MarginVector::new(
        categories.to_vec(),
        values,
        MarginLevel::Category,
        reference_time,
    )
}

/// Where auxiliary population replicates come from.
#[derive(Debug, Clone, Copy)]
pub enum AuxSource<'a> {
    /// Pre-generated replicate estimates; one is drawn uniformly.
    Pool(&'a [MarginVector]),
    /// A single estimate perturbed area by area with mean-one log-normal
    /// factors of the given CV. This fallback is a modelling choice of this
    /// library.
    Perturb { vector: &'a MarginVector, cv: f64 },
}

pub fn resample_aux_margin<R: Rng + ?Sized>(
    source: AuxSource<'_>,
    rng: &mut R,
) -> Result<MarginVector> {
    match source {
        AuxSource::Pool(pool) => {
            if pool.is_empty() {
                return Err(Error::Empty("auxiliary replicate pool is empty".into()));
            }
            Ok(pool[rng.random_range(0..pool.len())].clone())
        }
        AuxSource::Perturb { vector, cv } => {
            if cv == 0.0 {
                return Ok(vector.clone());
            }
            if !(cv.is_finite() && cv > 0.0) {
                return Err(Error::invalid(format!(
                    "perturbation CV {cv} must be non-negative"
                )));
            }
            let var = (1.0 + cv * cv).ln();
            let sd = var.sqrt();
            let values = vector
                .values()
                .iter()
                .map(|v| {
                    let z: f64 = StandardNormal.sample(rng);
                    v * (sd * z - var / 2.0).exp()
                })
                .collect();
            MarginVector::new(
                vector.ids().to_vec(),
                values,
                vector.level(),
                vector.reference_time(),
            )
        }
    }
}

/// Per-area uncertainty of the headcount ratio `poor / total`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadcountUncertainty {
    pub area_ids: Vec<String>,
    pub estimate: Vec<Option<f64>>,
    pub mse: Vec<Option<f64>>,
    pub cv: Vec<Option<f64>>,
    /// Headcount ratio of all areas pooled.
    pub overall_estimate: f64,
}

impl HeadcountUncertainty {
    /// Spread of the per-area CVs (in %) across areas.
    pub fn cv_summary_percent(&self) -> Option<SpreadSummary> {
        let cvs: Vec<f64> = self.cv.iter().flatten().map(|c| c * 100.0).collect();
        SpreadSummary::of(&cvs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellUncertainty {
    pub area_ids: Vec<String>,
    pub category_ids: Vec<String>,
    /// Point estimate `Ŷ_aj,t`, row-major.
    pub estimate: Vec<f64>,
    pub mse: Vec<f64>,
    /// `sqrt(MSE)/estimate`, absent where the estimate is zero.
    pub cv: Vec<Option<f64>>,
    /// Distribution of the refitted replicate cells.
    pub replicate_summary: Vec<SpreadSummary>,
    pub replicates_used: usize,
    pub replicates_dropped: usize,
    pub headcount: Option<HeadcountUncertainty>,
}

struct Replicate {
    mult: Vec<f64>,
    fitted: Vec<f64>,
}

/// Shares with the dynamic regions re-estimated from `aux`.
fn replicate_shares(shares: &ShareVector, aux: &MarginVector) -> Result<ShareVector> {
    let dynamic = dynamic_shares(&aux.aligned_to(shares.small_ids())?, shares.hierarchy())?;
    let sel = HybridSelection {
        selected_large_ids: shares.dynamic_regions().to_vec(),
        change_scores: Vec::new(),
        quantile_cutoff: 0.0,
    };
    hybrid_shares(shares, &dynamic, &sel)
}

#[allow(clippy::too_many_arguments)]
fn draw_replicate(
    b: usize,
    req: &UpdateRequest,
    point: &Composition,
    probs: &crate::tabulate::ProbabilityMatrix,
    lambdas: &[f64],
    base_row: &MarginVector,
    design: &SurveyDesign,
    aux_pool: Option<&[MarginVector]>,
    cfg: &BootstrapConfig,
) -> Result<Replicate> {
    let mut rng = replicate_rng(cfg.seed, b as u64);
    let n_cols = point.n_categories();

    let mut mult = Vec::with_capacity(point.counts().len());
    for (a, lambda) in lambdas.iter().enumerate() {
        if probs.is_zero_row(a) {
            mult.extend(std::iter::repeat_n(0.0, n_cols));
            continue;
        }
        let n = if cfg.debug.poisson_at_mean {
            *lambda
        } else {
            poisson(&mut rng, *lambda) as f64
        };
        if cfg.debug.multinomial_at_mean {
            mult.extend(probs.row(a).iter().map(|p| n * p));
        } else {
            let draw = multinomial(&mut rng, n.round() as u64, probs.row(a));
            mult.extend(draw.into_iter().map(|x| x as f64));
        }
    }
    let mult_comp = point.with_counts_unchecked(mult);

    let shares = if cfg.aux_resample == AuxResample::ResamplePool
        && !req.shares.dynamic_regions().is_empty()
    {
        let source = match aux_pool {
            Some(pool) => AuxSource::Pool(pool),
            None => AuxSource::Perturb {
                vector: base_row,
                cv: cfg.perturbation_cv,
            },
        };
        let aux = resample_aux_margin(source, &mut rng)?;
        replicate_shares(&req.shares, &aux)?
    } else {
        req.shares.clone()
    };

    let col = if cfg.debug.column_at_point {
        req.col_margin.clone()
    } else {
        resample_column_margin_with(
            design,
            point.category_ids(),
            req.col_margin.reference_time(),
            cfg.col_resample,
            &mut rng,
        )?
    };

    let (row, col, _) =
        target_margins(&mult_comp, &col, &req.large_totals, &shares, req.reconcile)?;
    let fit = ipf_fit(&mult_comp, &row, &col, &req.ipf)?;
    if !fit.converged {
        return Err(Error::invalid(format!(
            "replicate IPF did not converge (deviation {:.3e})",
            fit.final_deviation
        )));
    }
    Ok(Replicate {
        mult: mult_comp.counts().to_vec(),
        fitted: fit.fitted.counts().to_vec(),
    })
}

fn headcounts(counts: &[f64], poor: usize, non_poor: usize, n_cols: usize) -> Vec<Option<f64>> {
    counts
        .chunks_exact(n_cols)
        .map(|r| {
            let t = r[poor] + r[non_poor];
            (t > 0.0).then(|| r[poor] / t)
        })
        .collect()
}

/// Bootstrap MSE and CV of every cell of the updated composition.
pub fn bootstrap_mse(
    req: &UpdateRequest,
    design: &SurveyDesign,
    aux_pool: Option<&[MarginVector]>,
    cfg: &BootstrapConfig,
) -> Result<CellUncertainty> {
    if cfg.replicates == 0 {
        return Err(Error::invalid("bootstrap needs at least one replicate"));
    }
    let point_res = spree_update(req).map_err(|e| e.at_stage("point estimate"))?;
    if !point_res.ipf.converged {
        return Err(Error::invalid(
            "point estimate did not converge; bootstrap requires a converged fit",
        ));
    }
    let point = point_res.fitted;
    let probs = to_probabilities(&point);
    let lambdas: Vec<f64> = row_margins(&point).values().to_vec();
    let base_row = point_res.row_margin_used;

    let outcomes: Vec<Result<Replicate>> = (0..cfg.replicates)
        .into_par_iter()
        .map(|b| {
            draw_replicate(
                b, req, &point, &probs, &lambdas, &base_row, design, aux_pool, cfg,
            )
        })
        .collect();

    let mut reps = Vec::with_capacity(outcomes.len());
    let mut first_failure = None;
    for (b, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(r) => reps.push(r),
            Err(e) => {
                log::warn!("bootstrap replicate {b} dropped: {e}");
                first_failure.get_or_insert_with(|| e.to_string());
            }
        }
    }
    let dropped = cfg.replicates - reps.len();
    if reps.is_empty() || dropped as f64 > cfg.max_drop_fraction * cfg.replicates as f64 {
        return Err(Error::TooManyDropped {
            dropped,
            total: cfg.replicates,
            reason: first_failure.unwrap_or_default(),
        });
    }

    let n_cells = point.counts().len();
    let used = reps.len() as f64;
    let mut mse = vec![0.0; n_cells];
    for r in &reps {
        for (m, (f, y)) in mse.iter_mut().zip(r.fitted.iter().zip(&r.mult)) {
            *m += (f - y) * (f - y);
        }
    }
    mse.iter_mut().for_each(|m| *m /= used);
    let cv = mse
        .iter()
        .zip(point.counts())
        .map(|(m, e)| (*e > 0.0).then(|| m.sqrt() / e))
        .collect();
    let replicate_summary = (0..n_cells)
        .map(|i| {
            let v: Vec<f64> = reps.iter().map(|r| r.fitted[i]).collect();
            SpreadSummary::of(&v).expect("at least one replicate")
        })
        .collect();

    let headcount = poverty_columns(&point).ok().map(|(poor, non_poor)| {
        let n_cols = point.n_categories();
        let estimate = headcounts(point.counts(), poor, non_poor, n_cols);
        let mut sums = vec![0.0; point.n_areas()];
        let mut counts = vec![0usize; point.n_areas()];
        for r in &reps {
            let hf = headcounts(&r.fitted, poor, non_poor, n_cols);
            let hm = headcounts(&r.mult, poor, non_poor, n_cols);
            for a in 0..point.n_areas() {
                if let (Some(x), Some(y)) = (hf[a], hm[a]) {
                    sums[a] += (x - y) * (x - y);
                    counts[a] += 1;
                }
            }
        }
        let mse: Vec<Option<f64>> = sums
            .iter()
            .zip(&counts)
            .map(|(s, n)| (*n > 0).then(|| s / *n as f64))
            .collect();
        let cv = mse
            .iter()
            .zip(&estimate)
            .map(|(m, e)| match (m, e) {
                (Some(m), Some(e)) if *e > 0.0 => Some(m.sqrt() / e),
                _ => None,
            })
            .collect();
        let total_poor: f64 = point.counts().chunks_exact(n_cols).map(|r| r[poor]).sum();
        let total: f64 = point
            .counts()
            .chunks_exact(n_cols)
            .map(|r| r[poor] + r[non_poor])
            .sum();
        HeadcountUncertainty {
            area_ids: point.area_ids().to_vec(),
            estimate,
            mse,
            cv,
            overall_estimate: if total > 0.0 { total_poor / total } else { 0.0 },
        }
    });

    Ok(CellUncertainty {
        area_ids: point.area_ids().to_vec(),
        category_ids: point.category_ids().to_vec(),
        estimate: point.counts().to_vec(),
        mse,
        cv,
        replicate_summary,
        replicates_used: reps.len(),
        replicates_dropped: dropped,
        headcount,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ipf::IpfConfig;
    use crate::margins::{fixed_shares, ReconcilePolicy};
    use crate::tabulate::{aggregate_to_large, column_margins, AreaHierarchy};

    fn obs(psu: &str, stratum: &str, cat: &str, w: f64) -> SurveyObservation {
        SurveyObservation {
            psu_id: psu.into(),
            stratum_id: stratum.into(),
            category_id: cat.into(),
            weight: w,
        }
    }

    fn cats() -> Vec<String> {
        vec!["poor".into(), "non_poor".into()]
    }

    #[test]
    fn single_psu_margin_never_moves() {
        let d = SurveyDesign::new(vec![
            obs("p1", "s", "poor", 2.0),
            obs("p1", "s", "non_poor", 3.0),
        ])
        .unwrap();
        let mut rng = replicate_rng(3, 0);
        for _ in 0..20 {
            let m = resample_column_margin(&d, &cats(), 0, &mut rng).unwrap();
            assert_eq!(m.values(), &[2.0, 3.0]);
        }
    }

    #[test]
    fn identical_psus_have_zero_variance() {
        let d = SurveyDesign::new(vec![
            obs("p1", "s", "poor", 2.0),
            obs("p1", "s", "non_poor", 3.0),
            obs("p2", "s", "poor", 2.0),
            obs("p2", "s", "non_poor", 3.0),
        ])
        .unwrap();
        let mut rng = replicate_rng(3, 0);
        for _ in 0..20 {
            let m = resample_column_margin(&d, &cats(), 0, &mut rng).unwrap();
            assert_eq!(m.values(), &[4.0, 6.0]);
        }
    }

    #[test]
    fn design_errors() {
        assert!(SurveyDesign::new(vec![]).is_err());
        assert!(SurveyDesign::new(vec![obs("p", "s", "poor", 0.0)]).is_err());
        let d = SurveyDesign::new(vec![obs("p", "s", "rich", 1.0)]).unwrap();
        assert!(d.totals(&cats(), 0).is_err());
    }

    #[test]
    fn pool_draws_and_perturbation() {
        let v =
            MarginVector::from_pairs([("a", 1.0), ("b", 2.0)], MarginLevel::SmallArea, 0).unwrap();
        let mut rng = replicate_rng(1, 0);
        assert_eq!(
            resample_aux_margin(AuxSource::Pool(std::slice::from_ref(&v)), &mut rng).unwrap(),
            v
        );
        assert_eq!(
            resample_aux_margin(
                AuxSource::Perturb {
                    vector: &v,
                    cv: 0.0
                },
                &mut rng
            )
            .unwrap(),
            v
        );
        let pool = vec![v.clone(), v.clone(), v.clone()];
        for _ in 0..10 {
            assert_eq!(
                resample_aux_margin(AuxSource::Pool(&pool), &mut rng).unwrap(),
                v
            );
        }
        assert!(resample_aux_margin(AuxSource::Pool(&[]), &mut rng).is_err());
        let p = resample_aux_margin(
            AuxSource::Perturb {
                vector: &v,
                cv: 0.1,
            },
            &mut rng,
        )
        .unwrap();
        assert_ne!(p, v);
    }

    fn request() -> (UpdateRequest, AreaHierarchy) {
        let c = Composition::from_rows(
            ["a", "b", "c", "d"],
            ["poor", "non_poor"],
            &[
                vec![300.0, 700.0],
                vec![500.0, 500.0],
                vec![200.0, 1800.0],
                vec![900.0, 600.0],
            ],
            2013,
        )
        .unwrap();
        let h = AreaHierarchy::new([("a", "K"), ("b", "K"), ("c", "L"), ("d", "L")], None).unwrap();
        let large = row_margins(&aggregate_to_large(&c, &h).unwrap())
            .with_level(MarginLevel::LargeArea)
            .scaled(1.1)
            .unwrap()
            .with_reference_time(2016);
        let col = column_margins(&c).with_reference_time(2016);
        let aux = MarginVector::from_pairs(
            [("a", 1200.0), ("b", 900.0), ("c", 2000.0), ("d", 1700.0)],
            MarginLevel::SmallArea,
            2016,
        )
        .unwrap();
        let shares = dynamic_shares(&aux, &h).unwrap();
        (
            UpdateRequest {
                seed: c,
                col_margin: col,
                large_totals: large,
                shares,
                ipf: IpfConfig::default(),
                reconcile: ReconcilePolicy::default(),
            },
            h,
        )
    }

    fn point_design(req: &UpdateRequest) -> SurveyDesign {
        let col = column_margins(&req.seed);
        SurveyDesign::new(col.iter().map(|(c, v)| obs("p1", "s1", c, v)).collect()).unwrap()
    }

    #[test]
    fn replicate_shares_sum_to_one() {
        let (req, h) = request();
        let mut rng = replicate_rng(5, 0);
        let row = MarginVector::from_pairs(
            [("a", 1.0), ("b", 3.0), ("c", 2.0), ("d", 2.0)],
            MarginLevel::SmallArea,
            0,
        )
        .unwrap();
        for _ in 0..10 {
            let aux = resample_aux_margin(
                AuxSource::Perturb {
                    vector: &row,
                    cv: 0.3,
                },
                &mut rng,
            )
            .unwrap();
            let s = replicate_shares(&req.shares, &aux).unwrap();
            s.check_sums().unwrap();
            assert_eq!(s.hierarchy(), &h);
        }
    }

    #[test]
    fn degenerate_bootstrap_has_zero_mse() {
        let (req, _) = request();
        let cfg = BootstrapConfig {
            replicates: 5,
            seed: 1,
            aux_resample: AuxResample::None,
            debug: DebugSwitches {
                poisson_at_mean: true,
                multinomial_at_mean: true,
                column_at_point: false,
            },
            ..BootstrapConfig::default()
        };
        let u = bootstrap_mse(&req, &point_design(&req), None, &cfg).unwrap();
        assert!(u.mse.iter().all(|m| *m == 0.0));
        assert!(u.cv.iter().all(|c| *c == Some(0.0)));
        assert_eq!(u.replicates_used, 5);
    }

    #[test]
    fn single_replicate_and_determinism() {
        let (req, _) = request();
        let cfg = BootstrapConfig {
            replicates: 1,
            seed: 9,
            ..BootstrapConfig::default()
        };
        let d = point_design(&req);
        let u = bootstrap_mse(&req, &d, None, &cfg).unwrap();
        assert!(u.mse.iter().all(|m| *m >= 0.0));
        assert_eq!(u, bootstrap_mse(&req, &d, None, &cfg).unwrap());
        let h = u.headcount.unwrap();
        assert_eq!(h.cv.len(), 4);
        assert!(h.cv_summary_percent().is_some());
    }

    #[test]
    fn fixed_shares_are_not_resampled() {
        let (mut req, h) = request();
        req.shares = fixed_shares(&req.seed, &h).unwrap();
        let cfg = BootstrapConfig {
            replicates: 3,
            seed: 2,
            debug: DebugSwitches {
                poisson_at_mean: true,
                multinomial_at_mean: true,
                column_at_point: false,
            },
            ..BootstrapConfig::default()
        };
        let u = bootstrap_mse(&req, &point_design(&req), None, &cfg).unwrap();
        assert!(u.mse.iter().all(|m| *m == 0.0));
    }
}
