//! Centroid assignment of gridded population to administrative polygons.
//!
//! Coordinates are treated as planar lon/lat; no projection is applied.

use std::path::Path;

use geojson::{Feature, FeatureCollection, GeoJson, Geometry, Value};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{io_error, parse_error, read_to_string, write_atomic};
use crate::error::{Error, Result};
use crate::numeric::exact_sum;
use crate::tabulate::{MarginLevel, MarginVector};

/// Share of unassigned mass above which the aggregation carries a warning.
pub const UNASSIGNED_WARNING_SHARE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pixel {
    pub lon: f64,
    pub lat: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PixelTable {
    pixels: Vec<Pixel>,
}

impl PixelTable {
    pub fn new(pixels: Vec<Pixel>) -> Result<Self> {
        for (i, p) in pixels.iter().enumerate() {
            if !(p.lon.is_finite() && p.lat.is_finite()) {
                return Err(Error::invalid(format!(
                    "pixel {i} has non-finite coordinates"
                )));
            }
            if !(p.value.is_finite() && p.value >= 0.0) {
                return Err(Error::invalid(format!("pixel {i} has value {}", p.value)));
            }
        }
        Ok(PixelTable { pixels })
    }

    pub fn pixels(&self) -> &[Pixel] {
        &self.pixels
    }

    pub fn total(&self) -> f64 {
        exact_sum(self.pixels.iter().map(|p| p.value))
    }
}

/// A closed ring; the first vertex is repeated at the end.
pub type Ring = Vec<[f64; 2]>;

/// Exterior ring followed by any holes.
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    pub rings: Vec<Ring>,
}

impl Polygon {
    pub fn new(rings: Vec<Ring>) -> Result<Self> {
        if rings.is_empty() {
            return Err(Error::invalid("polygon without rings"));
        }
        for r in &rings {
            if r.len() < 4 {
                return Err(Error::invalid(format!(
                    "ring with {} vertices (need 4)",
                    r.len()
                )));
            }
            if r.first() != r.last() {
                return Err(Error::invalid("ring is not closed"));
            }
            if r.iter().flatten().any(|x| !x.is_finite()) {
                return Err(Error::invalid("ring has non-finite coordinates"));
            }
        }
        Ok(Polygon { rings })
    }

    /// Axis-aligned rectangle `[x0, x1] × [y0, y1]`.
    pub fn rectangle(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Polygon {
            rings: vec![vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1], [x0, y0]]],
        }
    }

    /// Even-odd rule over all rings; points on an edge count as inside.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let mut inside = false;
        for ring in &self.rings {
            for w in ring.windows(2) {
                let ([x1, y1], [x2, y2]) = (w[0], w[1]);
                if on_segment(x, y, x1, y1, x2, y2) {
                    return true;
                }
                if (y1 > y) != (y2 > y) {
                    let xi = x1 + (y - y1) * (x2 - x1) / (y2 - y1);
                    if x < xi {
                        inside = !inside;
                    }
                }
            }
        }
        inside
    }
}

fn on_segment(x: f64, y: f64, x1: f64, y1: f64, x2: f64, y2: f64) -> bool {
    let cross = (x2 - x1) * (y - y1) - (y2 - y1) * (x - x1);
    cross == 0.0 && x >= x1.min(x2) && x <= x1.max(x2) && y >= y1.min(y2) && y <= y1.max(y2)
}

/// Polygons keyed by small-area id, kept in ascending id order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AreaPolygonSet {
    areas: Vec<(String, Vec<Polygon>)>,
}

impl AreaPolygonSet {
    pub fn new(mut areas: Vec<(String, Vec<Polygon>)>) -> Result<Self> {
        areas.sort_by(|a, b| a.0.cmp(&b.0));
        if let Some(w) = areas.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::invalid(format!(
                "duplicate polygon for area `{}`",
                w[0].0
            )));
        }
        if let Some((id, _)) = areas.iter().find(|(_, p)| p.is_empty()) {
            return Err(Error::invalid(format!("area `{id}` has no polygon")));
        }
        Ok(AreaPolygonSet { areas })
    }

    pub fn area_ids(&self) -> Vec<String> {
        self.areas.iter().map(|(id, _)| id.clone()).collect()
    }

    pub fn areas(&self) -> &[(String, Vec<Polygon>)] {
        &self.areas
    }

    /// Index of the first area, in id order, containing the point.
    pub fn locate(&self, x: f64, y: f64) -> Option<usize> {
        self.areas
            .iter()
            .position(|(_, polys)| polys.iter().any(|p| p.contains(x, y)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PixelAggregation {
    /// Per-area sums, areas in id order.
    pub totals: MarginVector,
    pub pixels_per_area: Vec<usize>,
    pub unassigned_pixels: usize,
    pub unassigned_mass: f64,
    pub warning: Option<String>,
}

/// Sums pixel values into the area whose polygon contains each centroid.
pub fn aggregate_pixels(
    px: &PixelTable,
    polys: &AreaPolygonSet,
    reference_time: i32,
) -> Result<PixelAggregation> {
    if polys.areas.is_empty() {
        return Err(Error::Empty("polygon set has no areas".into()));
    }
    let located: Vec<Option<usize>> = px
        .pixels
        .par_iter()
        .map(|p| polys.locate(p.lon, p.lat))
        .collect();
    let n = polys.areas.len();
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut unassigned = Vec::new();
    for (p, a) in px.pixels.iter().zip(&located) {
        match a {
            Some(a) => values[*a].push(p.value),
            None => unassigned.push(p.value),
        }
    }
    let unassigned_mass = exact_sum(unassigned.iter().copied());
    let total = px.total();
    let warning = (total > 0.0 && unassigned_mass > UNASSIGNED_WARNING_SHARE * total).then(|| {
        format!(
            "{} pixels holding {:.2}% of the mass lie outside every polygon",
            unassigned.len(),
            100.0 * unassigned_mass / total
        )
    });
    Ok(PixelAggregation {
        totals: MarginVector::new(
            polys.area_ids(),
            values
                .iter()
                .map(|v| exact_sum(v.iter().copied()))
                .collect(),
            MarginLevel::SmallArea,
            reference_time,
        )?,
        pixels_per_area: values.iter().map(Vec::len).collect(),
        unassigned_pixels: unassigned.len(),
        unassigned_mass,
        warning,
    })
}

fn ring_from(positions: &[Vec<f64>]) -> Result<Ring> {
    positions
        .iter()
        .map(|p| match p.as_slice() {
            [x, y, ..] => Ok([*x, *y]),
            _ => Err(Error::invalid("position with fewer than two coordinates")),
        })
        .collect()
}

fn polygon_from(rings: &[Vec<Vec<f64>>]) -> Result<Polygon> {
    Polygon::new(rings.iter().map(|r| ring_from(r)).collect::<Result<_>>()?)
}

/// Reads a FeatureCollection whose features carry `properties.area_id`.
pub fn load_polygons(path: &Path) -> Result<AreaPolygonSet> {
    let file = path.display().to_string();
    let text = read_to_string(path)?;
    let gj: GeoJson = text
        .parse()
        .map_err(|e: geojson::Error| parse_error(&file, 0, e.to_string()))?;
    let GeoJson::FeatureCollection(fc) = gj else {
        return Err(parse_error(&file, 0, "expected a FeatureCollection"));
    };
    let mut areas = Vec::with_capacity(fc.features.len());
    for (i, f) in fc.features.iter().enumerate() {
        let ctx = |m: String| parse_error(&file, 0, format!("feature {i}: {m}"));
        let id = match f.property("area_id") {
            Some(serde_json::Value::String(s)) => s.clone(),
            Some(serde_json::Value::Number(n)) => n.to_string(),
            _ => return Err(ctx("missing string property `area_id`".into())),
        };
        let geom = f
            .geometry
            .as_ref()
            .ok_or_else(|| ctx("no geometry".into()))?;
        let polys = match &geom.value {
            Value::Polygon(p) => vec![polygon_from(p).map_err(|e| ctx(e.to_string()))?],
            Value::MultiPolygon(ps) => ps
                .iter()
                .map(|p| polygon_from(p))
                .collect::<Result<_>>()
                .map_err(|e| ctx(e.to_string()))?,
            _ => return Err(ctx("geometry is not a Polygon or MultiPolygon".into())),
        };
        areas.push((id, polys));
    }
    AreaPolygonSet::new(areas).map_err(|e| parse_error(&file, 0, e.to_string()))
}

pub fn save_polygons(path: &Path, set: &AreaPolygonSet) -> Result<()> {
    let features = set
        .areas
        .iter()
        .map(|(id, polys)| {
            let rings = |p: &Polygon| -> Vec<Vec<Vec<f64>>> {
                p.rings
                    .iter()
                    .map(|r| r.iter().map(|v| v.to_vec()).collect())
                    .collect()
            };
            let value = match polys.as_slice() {
                [p] => Value::Polygon(rings(p)),
                ps => Value::MultiPolygon(ps.iter().map(rings).collect()),
            };
            let mut props = serde_json::Map::new();
            props.insert("area_id".into(), serde_json::Value::String(id.clone()));
            Feature {
                bbox: None,
                geometry: Some(Geometry::new(value)),
                id: None,
                properties: Some(props),
                foreign_members: None,
            }
        })
        .collect();
    let fc = FeatureCollection {
        bbox: None,
        features,
        foreign_members: None,
    };
    let text = GeoJson::FeatureCollection(fc).to_string();
    write_atomic(path, text.as_bytes()).map_err(|e| io_error(path, e))
}
