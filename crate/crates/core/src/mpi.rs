//! Multidimensional poverty: deprivation scores, headcount ratio `H`,
//! intensity `D`, `MPI = H·D` and indicator contributions, plus the
//! poor/non-poor tabulation that feeds the census update.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::exact_sum;
use crate::tabulate::{index_map, AreaHierarchy, Composition};

pub const POOR: &str = "poor";
pub const NON_POOR: &str = "non_poor";

/// Slack on the poverty cutoff comparison, absorbing decimal rounding of
/// user-supplied weights (e.g. 0.0555… for 1/18).
pub const CUTOFF_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorWeight {
    pub id: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpiProfile {
    pub indicators: Vec<IndicatorWeight>,
    #[serde(rename = "cutoff")]
    pub poverty_cutoff: f64,
}

impl MpiProfile {
    /// Nine indicators: nutrition is unavailable and child mortality carries
    /// the full health weight of 1/3.
    pub fn nine_indicator() -> Self {
        let mut indicators = vec![
            ("child_mortality", 1.0 / 3.0),
            ("years_of_schooling", 1.0 / 6.0),
            ("school_attendance", 1.0 / 6.0),
        ];
        indicators.extend(LIVING_STANDARDS.iter().map(|id| (*id, 1.0 / 18.0)));
        Self::from_pairs(&indicators, 1.0 / 3.0)
    }

    /// The ten-indicator global profile.
    pub fn global_ten() -> Self {
        let mut indicators = vec![
            ("nutrition", 1.0 / 6.0),
            ("child_mortality", 1.0 / 6.0),
            ("years_of_schooling", 1.0 / 6.0),
            ("school_attendance", 1.0 / 6.0),
        ];
        indicators.extend(LIVING_STANDARDS.iter().map(|id| (*id, 1.0 / 18.0)));
        Self::from_pairs(&indicators, 1.0 / 3.0)
    }

    fn from_pairs(pairs: &[(&str, f64)], cutoff: f64) -> Self {
        MpiProfile {
            indicators: pairs
                .iter()
                .map(|(id, w)| IndicatorWeight {
                    id: id.to_string(),
                    weight: *w,
                })
                .collect(),
            poverty_cutoff: cutoff,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.indicators.is_empty() {
            return Err(Error::invalid("profile has no indicators"));
        }
        if let Some(w) = self.indicators.iter().find(|w| !(w.weight > 0.0)) {
            return Err(Error::invalid(format!(
                "indicator `{}` has non-positive weight {}",
                w.id, w.weight
            )));
        }
        let total = exact_sum(self.indicators.iter().map(|w| w.weight));
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!(
                "indicator weights sum to {total}, not 1"
            )));
        }
        if !(self.poverty_cutoff > 0.0 && self.poverty_cutoff <= 1.0) {
            return Err(Error::invalid(format!(
                "poverty cutoff {} outside (0, 1]",
                self.poverty_cutoff
            )));
        }
        let ids: Vec<String> = self.indicators.iter().map(|w| w.id.clone()).collect();
        if index_map(&ids).len() != ids.len() {
            return Err(Error::invalid("duplicate indicator ids in profile"));
        }
        Ok(())
    }

    pub fn indicator_ids(&self) -> impl Iterator<Item = &str> {
        self.indicators.iter().map(|w| w.id.as_str())
    }
}

impl Default for MpiProfile {
    fn default() -> Self {
        Self::nine_indicator()
    }
}

const LIVING_STANDARDS: [&str; 6] = [
    "cooking_fuel",
    "sanitation",
    "drinking_water",
    "electricity",
    "housing",
    "assets",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Deprivation {
    Deprived,
    NotDeprived,
    Missing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HouseholdRecord {
    pub household_id: String,
    pub area_id: String,
    pub subgroup_id: String,
    /// Persons in the household, at least one.
    pub size: u32,
    /// Sampling weight multiplying the household size; 1 for census records.
    pub weight: f64,
    pub deprivations: IndexMap<String, Deprivation>,
}

impl HouseholdRecord {
    fn population_weight(&self, person_weighted: bool) -> f64 {
        if person_weighted {
            self.weight * f64::from(self.size)
        } else {
            self.weight
        }
    }

    fn flag(&self, indicator: &str) -> Result<Deprivation> {
        match self.deprivations.get(indicator) {
            None => Err(Error::invalid(format!(
                "household `{}` has no flag for indicator `{indicator}`",
                self.household_id
            ))),
            Some(Deprivation::Missing) => Err(Error::MissingDeprivation {
                household: self.household_id.clone(),
                indicator: indicator.to_string(),
            }),
            Some(d) => Ok(*d),
        }
    }

    fn check(&self, p: &MpiProfile) -> Result<()> {
        if self.size == 0 {
            return Err(Error::invalid(format!(
                "household `{}` has size 0",
                self.household_id
            )));
        }
        if !(self.weight.is_finite() && self.weight > 0.0) {
            return Err(Error::invalid(format!(
                "household `{}` has non-positive weight",
                self.household_id
            )));
        }
        if self.deprivations.len() != p.indicators.len() {
            return Err(Error::invalid(format!(
                "household `{}` carries {} indicator flags, profile has {}",
                self.household_id,
                self.deprivations.len(),
                p.indicators.len()
            )));
        }
        Ok(())
    }
}

/// Weighted number of deprivations, summed exactly.
pub fn deprivation_score(r: &HouseholdRecord, p: &MpiProfile) -> Result<f64> {
    let mut deprived = Vec::with_capacity(p.indicators.len());
    for w in &p.indicators {
        if r.flag(&w.id)? == Deprivation::Deprived {
            deprived.push(w.weight);
        }
    }
    Ok(exact_sum(deprived))
}

/// Poor when the score reaches the cutoff (inclusive).
pub fn is_poor(score: f64, p: &MpiProfile) -> bool {
    score >= p.poverty_cutoff - CUTOFF_SLACK
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpiResult {
    /// Headcount ratio `H`.
    pub headcount_ratio: f64,
    /// Intensity `D`: mean deprivation score among the poor (0 if none are poor).
    pub intensity: f64,
    pub mpi: f64,
    pub indicator_ids: Vec<String>,
    /// Share of the population deprived in each indicator, regardless of poverty status.
    pub uncensored_headcounts: Vec<f64>,
    /// Share of the population that is poor and deprived in each indicator.
    pub censored_headcounts: Vec<f64>,
    /// Percentage contributions `w_i·CH_i / MPI`; absent when `H = 0`.
    pub contributions: Option<Vec<f64>>,
    pub population_base: f64,
}

pub fn compute_mpi(
    records: &[HouseholdRecord],
    p: &MpiProfile,
    person_weighted: bool,
) -> Result<MpiResult> {
    p.validate()?;
    if records.is_empty() {
        return Err(Error::Empty("no household records".into()));
    }
    let n_ind = p.indicators.len();
    let mut pop = Vec::with_capacity(records.len());
    let mut poor_pop = Vec::new();
    let mut poor_score_mass = Vec::new();
    let mut deprived_mass = vec![Vec::new(); n_ind];
    let mut poor_deprived_mass = vec![Vec::new(); n_ind];
    for r in records {
        r.check(p)?;
        let w = r.population_weight(person_weighted);
        let score = deprivation_score(r, p)?;
        let poor = is_poor(score, p);
        pop.push(w);
        if poor {
            poor_pop.push(w);
            poor_score_mass.push(w * score);
        }
        for (i, ind) in p.indicators.iter().enumerate() {
            if r.flag(&ind.id)? == Deprivation::Deprived {
                deprived_mass[i].push(w);
                if poor {
                    poor_deprived_mass[i].push(w);
                }
            }
        }
    }
    let n = exact_sum(pop);
    let n_poor = exact_sum(poor_pop);
    let h = n_poor / n;
    let d = if n_poor > 0.0 {
        exact_sum(poor_score_mass) / n_poor
    } else {
        0.0
    };
    let mpi = h * d;
    let uncensored: Vec<f64> = deprived_mass
        .into_iter()
        .map(|m| exact_sum(m) / n)
        .collect();
    let censored: Vec<f64> = poor_deprived_mass
        .into_iter()
        .map(|m| exact_sum(m) / n)
        .collect();
    let contributions = (h > 0.0).then(|| {
        p.indicators
            .iter()
            .zip(&censored)
            .map(|(w, ch)| w.weight * ch / mpi)
            .collect()
    });
    Ok(MpiResult {
        headcount_ratio: h,
        intensity: d,
        mpi,
        indicator_ids: p.indicator_ids().map(String::from).collect(),
        uncensored_headcounts: uncensored,
        censored_headcounts: censored,
        contributions,
        population_base: n,
    })
}

/// Persons by `{poor, non_poor}` per small area of `h`, optionally restricted
/// to one subgroup. Areas without records get zero rows.
pub fn tabulate_poverty(
    records: &[HouseholdRecord],
    p: &MpiProfile,
    h: &AreaHierarchy,
    subgroup: Option<&str>,
    reference_time: i32,
) -> Result<Composition> {
    p.validate()?;
    let idx = index_map(h.small_ids());
    let mut counts = vec![0.0; h.small_ids().len() * 2];
    for r in records {
        let a = *idx
            .get(r.area_id.as_str())
            .ok_or_else(|| Error::UnknownArea(r.area_id.clone()))?;
        if subgroup.is_some_and(|g| g != r.subgroup_id) {
            continue;
        }
        r.check(p)?;
        let persons = r.population_weight(true);
        let col = if is_poor(deprivation_score(r, p)?, p) {
            0
        } else {
            1
        };
        counts[a * 2 + col] += persons;
    }
    Composition::new(
        h.small_ids().to_vec(),
        vec![POOR.to_string(), NON_POOR.to_string()],
        counts,
        reference_time,
    )
}

/// Per-area headcount ratio `poor / (poor + non_poor)`; `None` for empty rows.
pub fn headcount_from_composition(c: &Composition) -> Result<Vec<Option<f64>>> {
    let (poor, non_poor) = poverty_columns(c)?;
    Ok((0..c.n_areas())
        .map(|a| {
            let (p, n) = (c.get(a, poor), c.get(a, non_poor));
            (p + n > 0.0).then(|| p / (p + n))
        })
        .collect())
}

pub(crate) fn poverty_columns(c: &Composition) -> Result<(usize, usize)> {
    let poor = c
        .category_index(POOR)
        .ok_or_else(|| Error::invalid(format!("composition lacks a `{POOR}` category")))?;
    let non_poor = c
        .category_index(NON_POOR)
        .ok_or_else(|| Error::invalid(format!("composition lacks a `{NON_POOR}` category")))?;
    Ok((poor, non_poor))
}
