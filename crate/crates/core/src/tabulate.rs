//! Compositions (area × category count tables), margins and the
//! small-to-large area hierarchy.
//!
//! Identifiers are opaque strings kept in ingestion order; every operation
//! preserves that order.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_unique(ids: &[String], what: &str) -> Result<()> {
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::invalid(format!("duplicate {what} id `{id}`")));
        }
    }
    Ok(())
}

fn check_counts(values: &[f64], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite() || *v < 0.0) {
        Some(i) => Err(Error::invalid(format!(
            "{what} entry {i} is {} (must be finite and non-negative)",
            values[i]
        ))),
        None => Ok(()),
    }
}

/// Position lookup for an ordered id list.
pub(crate) fn index_map(ids: &[String]) -> HashMap<&str, usize> {
    ids.iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect()
}

/// An A×J table of non-negative counts over small areas × categories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Composition {
    area_ids: Vec<String>,
    category_ids: Vec<String>,
    /// Row-major, `area_ids.len() * category_ids.len()` entries.
    counts: Vec<f64>,
    reference_time: i32,
}

impl Composition {
    pub fn new(
        area_ids: Vec<String>,
        category_ids: Vec<String>,
        counts: Vec<f64>,
        reference_time: i32,
    ) -> Result<Self> {
        if counts.len() != area_ids.len() * category_ids.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} counts for a {}x{} composition",
                counts.len(),
                area_ids.len(),
                category_ids.len()
            )));
        }
        check_unique(&area_ids, "area")?;
        check_unique(&category_ids, "category")?;
        check_counts(&counts, "count")?;
        Ok(Composition {
            area_ids,
            category_ids,
            counts,
            reference_time,
        })
    }

    pub fn from_rows<S: Into<String>>(
        area_ids: impl IntoIterator<Item = S>,
        category_ids: impl IntoIterator<Item = S>,
        rows: &[Vec<f64>],
        reference_time: i32,
    ) -> Result<Self> {
        let area_ids: Vec<String> = area_ids.into_iter().map(Into::into).collect();
        let category_ids: Vec<String> = category_ids.into_iter().map(Into::into).collect();
        if rows.len() != area_ids.len() || rows.iter().any(|r| r.len() != category_ids.len()) {
            return Err(Error::DimensionMismatch(
                "row lengths do not match the identifier lists".into(),
            ));
        }
        let counts = rows.iter().flatten().copied().collect();
        Self::new(area_ids, category_ids, counts, reference_time)
    }

    /// Same identifiers and time, new counts.
    pub fn with_counts(&self, counts: Vec<f64>) -> Result<Self> {
        Self::new(
            self.area_ids.clone(),
            self.category_ids.clone(),
            counts,
            self.reference_time,
        )
    }

    pub(crate) fn with_counts_unchecked(&self, counts: Vec<f64>) -> Self {
        debug_assert_eq!(counts.len(), self.counts.len());
        Composition {
            area_ids: self.area_ids.clone(),
            category_ids: self.category_ids.clone(),
            counts,
            reference_time: self.reference_time,
        }
    }

    pub fn with_reference_time(mut self, t: i32) -> Self {
        self.reference_time = t;
        self
    }

    pub fn area_ids(&self) -> &[String] {
        &self.area_ids
    }

    pub fn category_ids(&self) -> &[String] {
        &self.category_ids
    }

    pub fn n_areas(&self) -> usize {
        self.area_ids.len()
    }

    pub fn n_categories(&self) -> usize {
        self.category_ids.len()
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    pub fn reference_time(&self) -> i32 {
        self.reference_time
    }

    pub fn get(&self, area: usize, category: usize) -> f64 {
        self.counts[area * self.category_ids.len() + category]
    }

    pub fn row(&self, area: usize) -> &[f64] {
        let j = self.category_ids.len();
        &self.counts[area * j..(area + 1) * j]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.n_areas()).map(move |a| self.row(a))
    }

    pub fn area_index(&self, id: &str) -> Option<usize> {
        self.area_ids.iter().position(|a| a == id)
    }

    pub fn category_index(&self, id: &str) -> Option<usize> {
        self.category_ids.iter().position(|c| c == id)
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        self.with_counts(self.counts.iter().map(|c| c * factor).collect())
    }

    /// Cell-wise sum of two compositions with identical identifiers.
    pub fn add(&self, other: &Composition) -> Result<Self> {
        self.check_same_shape(other)?;
        self.with_counts(
            self.counts
                .iter()
                .zip(&other.counts)
                .map(|(a, b)| a + b)
                .collect(),
        )
    }

    pub fn check_same_shape(&self, other: &Composition) -> Result<()> {
        if self.area_ids != other.area_ids || self.category_ids != other.category_ids {
            return Err(Error::DimensionMismatch(
                "compositions have different area or category identifiers".into(),
            ));
        }
        Ok(())
    }

    /// Rows reordered to follow `order`, which must be a permutation of the area ids.
    pub fn reorder_areas(&self, order: &[String]) -> Result<Self> {
        if order.len() != self.n_areas() {
            return Err(Error::IdMismatch("area order has wrong length".into()));
        }
        let idx = index_map(&self.area_ids);
        let mut counts = Vec::with_capacity(self.counts.len());
        for id in order {
            let a = *idx
                .get(id.as_str())
                .ok_or_else(|| Error::UnknownArea(id.clone()))?;
            counts.extend_from_slice(self.row(a));
        }
        Self::new(
            order.to_vec(),
            self.category_ids.clone(),
            counts,
            self.reference_time,
        )
    }
}

/// Which axis a margin vector describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MarginLevel {
    SmallArea,
    LargeArea,
    Category,
}

/// Totals keyed by identifier: row margins, large-area totals or column margins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginVector {
    ids: Vec<String>,
    values: Vec<f64>,
    level: MarginLevel,
    reference_time: i32,
}

impl MarginVector {
    pub fn new(
        ids: Vec<String>,
        values: Vec<f64>,
        level: MarginLevel,
        reference_time: i32,
    ) -> Result<Self> {
        if ids.len() != values.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} ids but {} values",
                ids.len(),
                values.len()
            )));
        }
        check_unique(&ids, "margin")?;
        check_counts(&values, "margin value")?;
        Ok(MarginVector {
            ids,
            values,
            level,
            reference_time,
        })
    }

    pub fn from_pairs<S: Into<String>>(
        pairs: impl IntoIterator<Item = (S, f64)>,
        level: MarginLevel,
        reference_time: i32,
    ) -> Result<Self> {
        let (ids, values): (Vec<String>, Vec<f64>) =
            pairs.into_iter().map(|(k, v)| (k.into(), v)).unzip();
        Self::new(ids, values, level, reference_time)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn level(&self) -> MarginLevel {
        self.level
    }

    pub fn reference_time(&self) -> i32 {
        self.reference_time
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<f64> {
        self.ids
            .iter()
            .position(|x| x == id)
            .map(|i| self.values[i])
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.ids
            .iter()
            .map(String::as_str)
            .zip(self.values.iter().copied())
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(
            self.ids.clone(),
            self.values.iter().map(|v| v * factor).collect(),
            self.level,
            self.reference_time,
        )
    }

    pub fn with_level(mut self, level: MarginLevel) -> Self {
        self.level = level;
        self
    }

    pub fn with_reference_time(mut self, t: i32) -> Self {
        self.reference_time = t;
        self
    }

    /// Values rearranged to follow `order`; every id in `order` must be present.
    pub fn aligned_to(&self, order: &[String]) -> Result<Self> {
        let idx = index_map(&self.ids);
        let mut values = Vec::with_capacity(order.len());
        for id in order {
            let i = idx
                .get(id.as_str())
                .ok_or_else(|| Error::IdMismatch(format!("margin has no entry for `{id}`")))?;
            values.push(self.values[*i]);
        }
        if order.len() != self.ids.len() {
            return Err(Error::IdMismatch(format!(
                "margin has {} entries, expected {}",
                self.ids.len(),
                order.len()
            )));
        }
        Self::new(order.to_vec(), values, self.level, self.reference_time)
    }
}

/// Assignment of small areas to disjoint large areas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaHierarchy {
    small_ids: Vec<String>,
    large_of: Vec<usize>,
    large_ids: Vec<String>,
}

impl AreaHierarchy {
    /// Builds from `(small, large)` pairs. Large ids follow first appearance
    /// unless `large_ids` is given explicitly.
    pub fn new<S: Into<String>>(
        assignments: impl IntoIterator<Item = (S, S)>,
        large_ids: Option<Vec<String>>,
    ) -> Result<Self> {
        let pairs: Vec<(String, String)> = assignments
            .into_iter()
            .map(|(s, l)| (s.into(), l.into()))
            .collect();
        let explicit = large_ids.is_some();
        let mut large_ids = large_ids.unwrap_or_default();
        check_unique(&large_ids, "large area")?;
        let mut large_idx: HashMap<String, usize> = large_ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        let mut small_ids = Vec::with_capacity(pairs.len());
        let mut large_of = Vec::with_capacity(pairs.len());
        for (small, large) in pairs {
            let k = match large_idx.get(&large) {
                Some(k) => *k,
                None if explicit => {
                    return Err(Error::invalid(format!(
                        "small area `{small}` refers to undeclared large area `{large}`"
                    )))
                }
                None => {
                    large_ids.push(large.clone());
                    large_idx.insert(large, large_ids.len() - 1);
                    large_ids.len() - 1
                }
            };
            small_ids.push(small);
            large_of.push(k);
        }
        check_unique(&small_ids, "small area")?;
        Ok(AreaHierarchy {
            small_ids,
            large_of,
            large_ids,
        })
    }

    /// Every small area is its own large area.
    pub fn identity(ids: &[String]) -> Result<Self> {
        Self::new(ids.iter().map(|s| (s.clone(), s.clone())), None)
    }

    pub fn small_ids(&self) -> &[String] {
        &self.small_ids
    }

    pub fn large_ids(&self) -> &[String] {
        &self.large_ids
    }

    pub fn n_large(&self) -> usize {
        self.large_ids.len()
    }

    pub fn large_of(&self, small: &str) -> Option<&str> {
        self.small_ids
            .iter()
            .position(|s| s == small)
            .map(|i| self.large_ids[self.large_of[i]].as_str())
    }

    /// Index into `large_ids` for each entry of `small_ids`, failing on the
    /// first unassigned area.
    pub fn large_indices(&self, small_ids: &[String]) -> Result<Vec<usize>> {
        let idx = index_map(&self.small_ids);
        small_ids
            .iter()
            .map(|s| {
                idx.get(s.as_str())
                    .map(|i| self.large_of[*i])
                    .ok_or_else(|| Error::UnassignedArea(s.clone()))
            })
            .collect()
    }

    /// `(small, large)` pairs in ingestion order.
    pub fn pairs(&self) -> impl Iterator<Item = (&str, &str)> {
        self.small_ids
            .iter()
            .zip(&self.large_of)
            .map(|(s, k)| (s.as_str(), self.large_ids[*k].as_str()))
    }
}

/// Row-conditional category probabilities of a composition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityMatrix {
    area_ids: Vec<String>,
    category_ids: Vec<String>,
    probs: Vec<f64>,
    zero_rows: Vec<bool>,
}

impl ProbabilityMatrix {
    pub fn area_ids(&self) -> &[String] {
        &self.area_ids
    }

    pub fn category_ids(&self) -> &[String] {
        &self.category_ids
    }

    pub fn row(&self, area: usize) -> &[f64] {
        let j = self.category_ids.len();
        &self.probs[area * j..(area + 1) * j]
    }

    /// Rows with zero source population; their probabilities are all zero
    /// and they are excluded from sampling.
    pub fn is_zero_row(&self, area: usize) -> bool {
        self.zero_rows[area]
    }

    pub fn zero_rows(&self) -> impl Iterator<Item = &str> {
        self.area_ids
            .iter()
            .zip(&self.zero_rows)
            .filter(|(_, z)| **z)
            .map(|(a, _)| a.as_str())
    }
}

pub fn row_margins(c: &Composition) -> MarginVector {
    MarginVector {
        ids: c.area_ids.clone(),
        values: c.rows().map(|r| r.iter().sum()).collect(),
        level: MarginLevel::SmallArea,
        reference_time: c.reference_time,
    }
}

pub fn column_margins(c: &Composition) -> MarginVector {
    let mut values = vec![0.0; c.n_categories()];
    for row in c.rows() {
        for (acc, v) in values.iter_mut().zip(row) {
            *acc += v;
        }
    }
    MarginVector {
        ids: c.category_ids.clone(),
        values,
        level: MarginLevel::Category,
        reference_time: c.reference_time,
    }
}

/// Sums small-area rows into their large areas (K×J, rows in `h.large_ids()` order).
pub fn aggregate_to_large(c: &Composition, h: &AreaHierarchy) -> Result<Composition> {
    let ks = h.large_indices(&c.area_ids)?;
    let j = c.n_categories();
    let mut counts = vec![0.0; h.n_large() * j];
    for (a, k) in ks.iter().enumerate() {
        for (acc, v) in counts[k * j..(k + 1) * j].iter_mut().zip(c.row(a)) {
            *acc += v;
        }
    }
    Composition::new(
        h.large_ids.clone(),
        c.category_ids.clone(),
        counts,
        c.reference_time,
    )
}

pub fn to_probabilities(c: &Composition) -> ProbabilityMatrix {
    let mut probs = Vec::with_capacity(c.counts.len());
    let mut zero_rows = Vec::with_capacity(c.n_areas());
    for row in c.rows() {
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            probs.extend(row.iter().map(|v| v / total));
            zero_rows.push(false);
        } else {
            probs.extend(std::iter::repeat_n(0.0, row.len()));
            zero_rows.push(true);
        }
    }
    ProbabilityMatrix {
        area_ids: c.area_ids.clone(),
        category_ids: c.category_ids.clone(),
        probs,
        zero_rows,
    }
}
