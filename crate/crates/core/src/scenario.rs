//! Synthetic two-census scenarios for the validation harness.
//!
//! Areas are named `r{k}a{i}` inside regions `r{k}` (both 1-based). Between
//! the censuses every region grows by its own rate, each area drifts by a
//! small random amount, and migrations move a fraction of one area's
//! population to another area of the same region.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mpi::{NON_POOR, POOR};
use crate::sampling::replicate_rng;
use crate::tabulate::{
    aggregate_to_large, row_margins, AreaHierarchy, Composition, MarginLevel, MarginVector,
};
use crate::uncertainty::{SurveyDesign, SurveyObservation};

const TRUTH_STREAM: u64 = u64::MAX;
const AUX_STREAM: u64 = u64::MAX - 1;
const SURVEY_STREAM: u64 = u64::MAX - 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Migration {
    pub from: String,
    pub to: String,
    /// Fraction of the origin's later population that moves.
    pub fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurveyShape {
    pub psus_per_region: usize,
    pub persons_per_psu: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub t0: i32,
    pub t: i32,
    pub regions: usize,
    pub areas_per_region: usize,
    /// Uniform range of base-census area populations.
    pub population: [f64; 2],
    /// Uniform range of base-census poverty rates.
    pub poverty_rate: [f64; 2],
    /// Additive change of every area's poverty rate.
    #[serde(default)]
    pub poverty_trend: f64,
    /// Growth of each region between the censuses, one entry per region.
    pub regional_growth: Vec<f64>,
    /// Standard deviation of the per-area relative drift.
    #[serde(default)]
    pub background_drift: f64,
    #[serde(default)]
    pub migrations: Vec<Migration>,
    /// CV of the replicate noise of the auxiliary estimates.
    pub aux_noise_cv: f64,
    /// CV of an area-level error shared by all auxiliary replicates.
    #[serde(default)]
    pub aux_bias_cv: f64,
    pub aux_replicates: usize,
    pub survey: SurveyShape,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.regions == 0 || self.areas_per_region == 0 {
            return Err(Error::invalid(
                "scenario needs at least one region and one area",
            ));
        }
        if self.regional_growth.len() != self.regions {
            return Err(Error::DimensionMismatch(format!(
                "{} regional growth rates for {} regions",
                self.regional_growth.len(),
                self.regions
            )));
        }
        let [lo, hi] = self.population;
        if !(lo >= 1.0 && hi >= lo) {
            return Err(Error::invalid(format!(
                "population range [{lo}, {hi}] is invalid"
            )));
        }
        let [lo, hi] = self.poverty_rate;
        if !(0.0..=1.0).contains(&lo) || !(lo..=1.0).contains(&hi) {
            return Err(Error::invalid(format!(
                "poverty rate range [{lo}, {hi}] is invalid"
            )));
        }
        if self.regional_growth.iter().any(|g| !(*g > -1.0)) {
            return Err(Error::invalid("regional growth must exceed -100%"));
        }
        for cv in [self.aux_noise_cv, self.aux_bias_cv, self.background_drift] {
            if !(cv.is_finite() && cv >= 0.0) {
                return Err(Error::invalid(format!(
                    "noise level {cv} must be non-negative"
                )));
            }
        }
        if self.aux_replicates == 0 {
            return Err(Error::invalid(
                "scenario needs at least one auxiliary replicate",
            ));
        }
        if self.survey.psus_per_region == 0 || self.survey.persons_per_psu == 0 {
            return Err(Error::invalid("survey needs PSUs and persons"));
        }
        Ok(())
    }

    pub fn area_ids(&self) -> Vec<String> {
        (1..=self.regions)
            .flat_map(|k| (1..=self.areas_per_region).map(move |i| format!("r{k}a{i}")))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub truth_t0: Composition,
    pub truth_t: Composition,
    pub hierarchy: AreaHierarchy,
    /// Exact regional totals of the later truth.
    pub large_totals_t: MarginVector,
    pub survey_design: SurveyDesign,
    pub aux_pool: Vec<MarginVector>,
}

fn lognormal_factor<R: Rng + ?Sized>(rng: &mut R, cv: f64) -> f64 {
    if cv == 0.0 {
        return 1.0;
    }
    let var = (1.0 + cv * cv).ln();
    let z: f64 = StandardNormal.sample(rng);
    (var.sqrt() * z - var / 2.0).exp()
}

fn composition(ids: &[String], pop: &[f64], rate: &[f64], time: i32) -> Result<Composition> {
    let counts = pop
        .iter()
        .zip(rate)
        .flat_map(|(p, r)| {
            let poor = (p * r).round();
            [poor, p - poor]
        })
        .collect();
    Composition::new(
        ids.to_vec(),
        vec![POOR.to_string(), NON_POOR.to_string()],
        counts,
        time,
    )
}

pub fn generate(cfg: &ScenarioConfig) -> Result<Scenario> {
    cfg.validate()?;
    let ids = cfg.area_ids();
    let n = ids.len();
    let region_of = |a: usize| a / cfg.areas_per_region;
    let hierarchy = AreaHierarchy::new(
        ids.iter()
            .enumerate()
            .map(|(a, id)| (id.clone(), format!("r{}", region_of(a) + 1))),
        None,
    )?;

    let mut rng = replicate_rng(cfg.seed, TRUTH_STREAM);
    let mut pop0 = Vec::with_capacity(n);
    let mut rate0 = Vec::with_capacity(n);
    for _ in 0..n {
        pop0.push(
            rng.random_range(cfg.population[0]..=cfg.population[1])
                .round(),
        );
        rate0.push(rng.random_range(cfg.poverty_rate[0]..=cfg.poverty_rate[1]));
    }
    let mut pop_t: Vec<f64> = pop0
        .iter()
        .enumerate()
        .map(|(a, p)| {
            let z: f64 = StandardNormal.sample(&mut rng);
            let drift = (1.0 + cfg.background_drift * z).max(0.0);
            (p * (1.0 + cfg.regional_growth[region_of(a)]) * drift).round()
        })
        .collect();
    let idx = |id: &str| {
        ids.iter()
            .position(|x| x == id)
            .ok_or_else(|| Error::UnknownArea(id.to_string()))
    };
    for m in &cfg.migrations {
        let (from, to) = (idx(&m.from)?, idx(&m.to)?);
        if region_of(from) != region_of(to) {
            return Err(Error::invalid(format!(
                "migration {} → {} crosses regions",
                m.from, m.to
            )));
        }
        if !(0.0..=1.0).contains(&m.fraction) {
            return Err(Error::invalid(format!(
                "migration fraction {} outside [0, 1]",
                m.fraction
            )));
        }
        let moved = (pop_t[from] * m.fraction).round();
        pop_t[from] -= moved;
        pop_t[to] += moved;
    }
    let rate_t: Vec<f64> = rate0
        .iter()
        .map(|r| (r + cfg.poverty_trend).clamp(0.0, 1.0))
        .collect();

    let truth_t0 = composition(&ids, &pop0, &rate0, cfg.t0)?;
    let truth_t = composition(&ids, &pop_t, &rate_t, cfg.t)?;
    let large_totals_t =
        row_margins(&aggregate_to_large(&truth_t, &hierarchy)?).with_level(MarginLevel::LargeArea);

    let mut rng = replicate_rng(cfg.seed, AUX_STREAM);
    let bias: Vec<f64> = (0..n)
        .map(|_| lognormal_factor(&mut rng, cfg.aux_bias_cv))
        .collect();
    let aux_pool = (0..cfg.aux_replicates)
        .map(|_| {
            let values = pop_t
                .iter()
                .zip(&bias)
                .map(|(p, b)| p * b * lognormal_factor(&mut rng, cfg.aux_noise_cv))
                .collect();
            MarginVector::new(ids.clone(), values, MarginLevel::SmallArea, cfg.t)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rng = replicate_rng(cfg.seed, SURVEY_STREAM);
    let persons = (cfg.survey.psus_per_region * cfg.survey.persons_per_psu) as f64;
    let mut observations = Vec::new();
    for k in 0..cfg.regions {
        let members: Vec<usize> = (0..n).filter(|a| region_of(*a) == k).collect();
        let region_pop: f64 = members.iter().map(|a| pop_t[*a]).sum();
        if region_pop <= 0.0 {
            continue;
        }
        let weight = region_pop / persons;
        for j in 0..cfg.survey.psus_per_region {
            // PSU location proportional to population.
            let mut u = rng.random_range(0.0..region_pop);
            let mut area = *members.last().expect("non-empty region");
            for a in &members {
                if u < pop_t[*a] {
                    area = *a;
                    break;
                }
                u -= pop_t[*a];
            }
            for _ in 0..cfg.survey.persons_per_psu {
                let poor = rng.random_bool(rate_t[area]);
                observations.push(SurveyObservation {
                    psu_id: format!("r{}p{}", k + 1, j + 1),
                    stratum_id: format!("r{}", k + 1),
                    category_id: if poor { POOR } else { NON_POOR }.to_string(),
                    weight,
                });
            }
        }
    }

    Ok(Scenario {
        truth_t0,
        truth_t,
        hierarchy,
        large_totals_t,
        survey_design: SurveyDesign::new(observations)?,
        aux_pool,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::margins::fixed_shares;

    fn config() -> ScenarioConfig {
        ScenarioConfig {
            seed: 1,
            t0: 2002,
            t: 2013,
            regions: 2,
            areas_per_region: 3,
            population: [1000.0, 5000.0],
            poverty_rate: [0.2, 0.6],
            poverty_trend: -0.05,
            regional_growth: vec![0.2, 0.1],
            background_drift: 0.0,
            migrations: vec![Migration {
                from: "r1a2".into(),
                to: "r1a1".into(),
                fraction: 0.3,
            }],
            aux_noise_cv: 0.0,
            aux_bias_cv: 0.0,
            aux_replicates: 3,
            survey: SurveyShape {
                psus_per_region: 4,
                persons_per_psu: 5,
            },
        }
    }

    #[test]
    fn migration_only_moves_its_own_areas() {
        let s = generate(&config()).unwrap();
        let p0 = fixed_shares(&s.truth_t0, &s.hierarchy).unwrap();
        let pt = fixed_shares(&s.truth_t, &s.hierarchy).unwrap();
        for (a, (x, y)) in p0.shares().iter().zip(pt.shares()).enumerate() {
            let changed = (x - y).abs() > 1e-3;
            assert_eq!(changed, a < 2, "area {a}: {x} vs {y}");
        }
        assert_eq!(s.truth_t0.area_ids()[0], "r1a1");
        assert_eq!(s.large_totals_t.ids(), &["r1", "r2"]);
    }

    #[test]
    fn exact_aux_and_design_totals() {
        let s = generate(&config()).unwrap();
        assert_eq!(s.aux_pool.len(), 3);
        assert_eq!(
            s.aux_pool[0],
            row_margins(&s.truth_t).with_level(MarginLevel::SmallArea)
        );
        let d = s
            .survey_design
            .totals(s.truth_t.category_ids(), 2013)
            .unwrap();
        assert!((d.total() - s.truth_t.total()).abs() < 1e-6 * s.truth_t.total());
        assert_eq!(s.survey_design.observations().len(), 40);
    }

    #[test]
    fn deterministic_and_rejects_bad_configs() {
        assert_eq!(generate(&config()).unwrap(), generate(&config()).unwrap());
        let mut c = config();
        c.migrations[0].to = "r2a1".into();
        assert!(generate(&c).is_err());
        let mut c = config();
        c.regional_growth.pop();
        assert!(generate(&c).is_err());
    }
}
