//! Saturated log-linear decomposition of a two-way composition under the
//! centered (zero-sum) parameterization:
//!
//! `log y[a][j] = overall + area[a] + category[j] + interaction[a][j]`
//!
//! The interaction term is the association structure that fitting to new
//! margins leaves untouched.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tabulate::Composition;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLinearDecomposition {
    pub area_ids: Vec<String>,
    pub category_ids: Vec<String>,
    pub overall: f64,
    pub area_effects: Vec<f64>,
    pub category_effects: Vec<f64>,
    /// Row-major A×J interaction terms.
    pub interaction: Vec<f64>,
}

impl LogLinearDecomposition {
    pub fn interaction_at(&self, area: usize, category: usize) -> f64 {
        self.interaction[area * self.category_ids.len() + category]
    }

    /// Cell-wise `exp` of the summed effects.
    pub fn reconstruct(&self) -> Result<Composition> {
        let j = self.category_ids.len();
        let counts = (0..self.area_ids.len())
            .flat_map(|a| {
                (0..j).map(move |c| {
                    (self.overall
                        + self.area_effects[a]
                        + self.category_effects[c]
                        + self.interaction_at(a, c))
                    .exp()
                })
            })
            .collect();
        Composition::new(self.area_ids.clone(), self.category_ids.clone(), counts, 0)
    }
}

fn check_positive(c: &Composition) -> Result<()> {
    let bad: Vec<String> = c
        .counts()
        .iter()
        .enumerate()
        .filter(|(_, v)| **v <= 0.0)
        .map(|(i, _)| {
            let (a, j) = (i / c.n_categories(), i % c.n_categories());
            format!("({}, {})", c.area_ids()[a], c.category_ids()[j])
        })
        .collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::NonPositiveCells(bad.join(", ")))
    }
}

pub fn decompose(c: &Composition) -> Result<LogLinearDecomposition> {
    if c.n_areas() == 0 || c.n_categories() == 0 {
        return Err(Error::Empty("composition has no cells".into()));
    }
    check_positive(c)?;
    let (na, nj) = (c.n_areas(), c.n_categories());
    let logs: Vec<f64> = c.counts().iter().map(|v| v.ln()).collect();
    let row_means: Vec<f64> = logs
        .chunks_exact(nj)
        .map(|r| r.iter().sum::<f64>() / nj as f64)
        .collect();
    let mut col_means = vec![0.0; nj];
    for r in logs.chunks_exact(nj) {
        for (m, v) in col_means.iter_mut().zip(r) {
            *m += v;
        }
    }
    col_means.iter_mut().for_each(|m| *m /= na as f64);
    let overall = row_means.iter().sum::<f64>() / na as f64;

    let interaction = logs
        .iter()
        .enumerate()
        .map(|(i, l)| l - row_means[i / nj] - col_means[i % nj] + overall)
        .collect();
    Ok(LogLinearDecomposition {
        area_ids: c.area_ids().to_vec(),
        category_ids: c.category_ids().to_vec(),
        overall,
        area_effects: row_means.iter().map(|m| m - overall).collect(),
        category_effects: col_means.iter().map(|m| m - overall).collect(),
        interaction,
    })
}

/// Largest absolute difference between the interaction terms of two
/// compositions over the same areas and categories.
pub fn association_distance(x: &Composition, y: &Composition) -> Result<f64> {
    x.check_same_shape(y)?;
    let dx = decompose(x)?;
    let dy = decompose(y)?;
    Ok(dx
        .interaction
        .iter()
        .zip(&dy.interaction)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}
