//! CSV and JSON readers and writers for every input schema.
//!
//! | data | header |
//! |------|--------|
//! | composition | `area_id,category_id,count` |
//! | margin | `id,value` |
//! | hierarchy | `small_id,large_id` |
//! | households | `household_id,area_id,subgroup_id,size,weight,ind_<id>...` |
//! | survey design | `psu_id,stratum_id,category_id,weight` |
//! | projections | `large_id,year,population` |
//! | auxiliary estimates | `small_id,year,population` |
//! | auxiliary replicates | `replicate,small_id,population` |
//! | pixels | `lon,lat,value` |
//!
//! Fields are trimmed. Errors carry the file and the 1-based line number.
//! Writers replace their target atomically.

mod geo;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::de::DeserializeOwned;
use serde::Serialize;

pub use geo::{
    aggregate_pixels, load_polygons, save_polygons, AreaPolygonSet, Pixel, PixelAggregation,
    PixelTable, Polygon, Ring, UNASSIGNED_WARNING_SHARE,
};

use crate::error::{Error, Result};
use crate::mpi::{Deprivation, HouseholdRecord, MpiProfile};
use crate::tabulate::{AreaHierarchy, Composition, MarginLevel, MarginVector};
use crate::uncertainty::{SurveyDesign, SurveyObservation};

const INDICATOR_PREFIX: &str = "ind_";

pub(crate) fn parse_error(file: &str, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        file: file.to_string(),
        line,
        message: message.into(),
    }
}

pub(crate) fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

pub(crate) fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_error(path, e))
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(d) = dir {
        fs::create_dir_all(d)?;
    }
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })
}

struct Table {
    file: String,
    header: Vec<String>,
    rows: Vec<(u64, Vec<String>)>,
}

impl Table {
    fn read(path: &Path) -> Result<Self> {
        let file = path.display().to_string();
        let text = read_to_string(path)?;
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .flexible(false)
            .from_reader(text.as_bytes());
        let header = rdr
            .headers()
            .map_err(|e| parse_error(&file, 1, e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line());
                parse_error(&file, line, e.to_string())
            })?;
            let line = rec.position().map_or(0, |p| p.line());
            if rec.iter().all(str::is_empty) {
                continue;
            }
            rows.push((line, rec.iter().map(str::to_string).collect()));
        }
        Ok(Table { file, header, rows })
    }

    /// Reads a table whose header must equal `expected`.
    fn read_exact(path: &Path, expected: &[&str]) -> Result<Self> {
        let t = Self::read(path)?;
        if t.header != expected {
            return Err(parse_error(
                &t.file,
                1,
                format!(
                    "header `{}` does not match expected `{}`",
                    t.header.join(","),
                    expected.join(",")
                ),
            ));
        }
        Ok(t)
    }

    fn err(&self, line: u64, message: impl Into<String>) -> Error {
        parse_error(&self.file, line, message)
    }

    fn field<T: FromStr>(&self, line: u64, name: &str, raw: &str) -> Result<T> {
        raw.parse()
            .map_err(|_| self.err(line, format!("cannot parse {name} `{raw}`")))
    }

    fn id(&self, line: u64, name: &str, raw: &str) -> Result<String> {
        if raw.is_empty() {
            return Err(self.err(line, format!("empty {name}")));
        }
        Ok(raw.to_string())
    }

    fn count(&self, line: u64, name: &str, raw: &str) -> Result<f64> {
        let v: f64 = self.field(line, name, raw)?;
        if !(v.is_finite() && v >= 0.0) {
            return Err(self.err(line, format!("{name} {v} must be finite and non-negative")));
        }
        Ok(v)
    }

    fn non_empty(&self, what: &str) -> Result<()> {
        if self.rows.is_empty() {
            return Err(self.err(1, format!("no {what} rows")));
        }
        Ok(())
    }
}

fn write_csv<I, R>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| io_error(path, std::io::Error::other(e.to_string()));
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r.into_iter().collect::<Vec<_>>())
            .map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| io_error(path, std::io::Error::other(e.to_string())))?;
    write_atomic(path, &bytes).map_err(|e| io_error(path, e))
}

/// Long-format composition. Areas and categories follow first appearance;
/// absent cells are zero.
pub fn load_composition(path: &Path, reference_time: i32) -> Result<Composition> {
    let t = Table::read_exact(path, &["area_id", "category_id", "count"])?;
    t.non_empty("composition")?;
    let mut areas: IndexMap<String, ()> = IndexMap::new();
    let mut cats: IndexMap<String, ()> = IndexMap::new();
    let mut cells: HashMap<(usize, usize), f64> = HashMap::new();
    for (line, r) in &t.rows {
        let a = areas.insert_full(t.id(*line, "area_id", &r[0])?, ()).0;
        let c = cats.insert_full(t.id(*line, "category_id", &r[1])?, ()).0;
        let v = t.count(*line, "count", &r[2])?;
        if cells.insert((a, c), v).is_some() {
            return Err(t.err(*line, format!("duplicate cell ({}, {})", r[0], r[1])));
        }
    }
    let (na, nc) = (areas.len(), cats.len());
    let mut counts = vec![0.0; na * nc];
    for ((a, c), v) in cells {
        counts[a * nc + c] = v;
    }
    Composition::new(
        areas.into_keys().collect(),
        cats.into_keys().collect(),
        counts,
        reference_time,
    )
    .map_err(|e| t.err(0, e.to_string()))
}

pub fn save_composition(path: &Path, c: &Composition) -> Result<()> {
    let rows = c.area_ids().iter().enumerate().flat_map(|(a, area)| {
        c.category_ids()
            .iter()
            .enumerate()
            .map(move |(j, cat)| vec![area.clone(), cat.clone(), c.get(a, j).to_string()])
    });
    write_csv(path, &["area_id", "category_id", "count"], rows)
}

pub fn load_margin(path: &Path, level: MarginLevel, reference_time: i32) -> Result<MarginVector> {
    let t = Table::read_exact(path, &["id", "value"])?;
    t.non_empty("margin")?;
    let mut seen = HashSet::new();
    let mut ids = Vec::with_capacity(t.rows.len());
    let mut values = Vec::with_capacity(t.rows.len());
    for (line, r) in &t.rows {
        let id = t.id(*line, "id", &r[0])?;
        if !seen.insert(id.clone()) {
            return Err(t.err(*line, format!("duplicate id `{id}`")));
        }
        values.push(t.count(*line, "value", &r[1])?);
        ids.push(id);
    }
    MarginVector::new(ids, values, level, reference_time).map_err(|e| t.err(0, e.to_string()))
}

pub fn save_margin(path: &Path, m: &MarginVector) -> Result<()> {
    write_csv(
        path,
        &["id", "value"],
        m.iter().map(|(id, v)| vec![id.to_string(), v.to_string()]),
    )
}

pub fn load_hierarchy(path: &Path) -> Result<AreaHierarchy> {
    let t = Table::read_exact(path, &["small_id", "large_id"])?;
    t.non_empty("hierarchy")?;
    let mut seen = HashSet::new();
    let mut pairs = Vec::with_capacity(t.rows.len());
    for (line, r) in &t.rows {
        let small = t.id(*line, "small_id", &r[0])?;
        let large = t.id(*line, "large_id", &r[1])?;
        if !seen.insert(small.clone()) {
            return Err(t.err(*line, format!("small area `{small}` assigned twice")));
        }
        pairs.push((small, large));
    }
    AreaHierarchy::new(pairs, None).map_err(|e| t.err(0, e.to_string()))
}

pub fn save_hierarchy(path: &Path, h: &AreaHierarchy) -> Result<()> {
    write_csv(
        path,
        &["small_id", "large_id"],
        h.pairs().map(|(s, l)| vec![s.to_string(), l.to_string()]),
    )
}

fn deprivation(raw: &str) -> Option<Deprivation> {
    match raw {
        "1" | "true" | "TRUE" => Some(Deprivation::Deprived),
        "0" | "false" | "FALSE" => Some(Deprivation::NotDeprived),
        "" | "NA" => Some(Deprivation::Missing),
        _ => None,
    }
}

/// Household records; flags are `1`/`0`, with empty or `NA` for missing.
/// An empty file yields no records.
pub fn load_households(path: &Path) -> Result<Vec<HouseholdRecord>> {
    const FIXED: [&str; 5] = ["household_id", "area_id", "subgroup_id", "size", "weight"];
    let t = Table::read(path)?;
    if t.header.len() < FIXED.len() || t.header[..FIXED.len()] != FIXED {
        return Err(t.err(1, format!("header must start with `{}`", FIXED.join(","))));
    }
    let mut indicators = Vec::new();
    for h in &t.header[FIXED.len()..] {
        match h.strip_prefix(INDICATOR_PREFIX) {
            Some(id) if !id.is_empty() => {
                if indicators.contains(&id.to_string()) {
                    return Err(t.err(1, format!("indicator `{id}` appears twice")));
                }
                indicators.push(id.to_string());
            }
            _ => {
                return Err(t.err(
                    1,
                    format!("column `{h}` is not `{INDICATOR_PREFIX}<indicator>`"),
                ))
            }
        }
    }
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(t.rows.len());
    for (line, r) in &t.rows {
        let household_id = t.id(*line, "household_id", &r[0])?;
        if !seen.insert(household_id.clone()) {
            return Err(t.err(*line, format!("duplicate household `{household_id}`")));
        }
        let size: u32 = t.field(*line, "size", &r[3])?;
        if size == 0 {
            return Err(t.err(*line, "household size must be at least 1"));
        }
        let weight: f64 = t.field(*line, "weight", &r[4])?;
        if !(weight.is_finite() && weight > 0.0) {
            return Err(t.err(*line, format!("weight {weight} must be positive")));
        }
        let mut deprivations = IndexMap::with_capacity(indicators.len());
        for (id, raw) in indicators.iter().zip(&r[FIXED.len()..]) {
            let d = deprivation(raw).ok_or_else(|| {
                t.err(*line, format!("flag `{raw}` for `{id}` is not 0, 1 or NA"))
            })?;
            deprivations.insert(id.clone(), d);
        }
        out.push(HouseholdRecord {
            household_id,
            area_id: t.id(*line, "area_id", &r[1])?,
            subgroup_id: r[2].clone(),
            size,
            weight,
            deprivations,
        });
    }
    Ok(out)
}

pub fn save_households(path: &Path, records: &[HouseholdRecord]) -> Result<()> {
    let indicators: Vec<String> = records
        .first()
        .map(|r| r.deprivations.keys().cloned().collect())
        .unwrap_or_default();
    let mut header = vec!["household_id", "area_id", "subgroup_id", "size", "weight"]
        .into_iter()
        .map(str::to_string)
        .collect::<Vec<_>>();
    header.extend(indicators.iter().map(|i| format!("{INDICATOR_PREFIX}{i}")));
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut rows = Vec::with_capacity(records.len());
    for r in records {
        let mut row = vec![
            r.household_id.clone(),
            r.area_id.clone(),
            r.subgroup_id.clone(),
            r.size.to_string(),
            r.weight.to_string(),
        ];
        for i in &indicators {
            let flag = match r.deprivations.get(i) {
                Some(Deprivation::Deprived) => "1",
                Some(Deprivation::NotDeprived) => "0",
                _ => "NA",
            };
            row.push(flag.to_string());
        }
        rows.push(row);
    }
    write_csv(path, &header_refs, rows)
}

pub fn load_design(path: &Path) -> Result<SurveyDesign> {
    let t = Table::read_exact(path, &["psu_id", "stratum_id", "category_id", "weight"])?;
    t.non_empty("survey design")?;
    let mut psu_stratum: HashMap<String, String> = HashMap::new();
    let mut obs = Vec::with_capacity(t.rows.len());
    for (line, r) in &t.rows {
        let psu_id = t.id(*line, "psu_id", &r[0])?;
        let stratum_id = t.id(*line, "stratum_id", &r[1])?;
        if let Some(s) = psu_stratum.insert(psu_id.clone(), stratum_id.clone()) {
            if s != stratum_id {
                return Err(t.err(
                    *line,
                    format!("PSU `{psu_id}` appears in strata `{s}` and `{stratum_id}`"),
                ));
            }
        }
        let weight = t.count(*line, "weight", &r[3])?;
        if weight == 0.0 {
            return Err(t.err(*line, "weight must be positive"));
        }
        obs.push(SurveyObservation {
            psu_id,
            stratum_id,
            category_id: t.id(*line, "category_id", &r[2])?,
            weight,
        });
    }
    SurveyDesign::new(obs).map_err(|e| t.err(0, e.to_string()))
}

pub fn save_design(path: &Path, d: &SurveyDesign) -> Result<()> {
    write_csv(
        path,
        &["psu_id", "stratum_id", "category_id", "weight"],
        d.observations().iter().map(|o| {
            vec![
                o.psu_id.clone(),
                o.stratum_id.clone(),
                o.category_id.clone(),
                o.weight.to_string(),
            ]
        }),
    )
}

fn load_yearly(
    path: &Path,
    id_col: &'static str,
    level: MarginLevel,
) -> Result<BTreeMap<i32, MarginVector>> {
    let t = Table::read_exact(path, &[id_col, "year", "population"])?;
    t.non_empty("population")?;
    let mut by_year: BTreeMap<i32, (Vec<String>, Vec<f64>)> = BTreeMap::new();
    let mut seen = HashSet::new();
    for (line, r) in &t.rows {
        let id = t.id(*line, id_col, &r[0])?;
        let year: i32 = t.field(*line, "year", &r[1])?;
        let v: f64 = t.field(*line, "population", &r[2])?;
        if v < 0.0 {
            return Err(t.err(
                *line,
                Error::NegativeProjection { id, value: v }.to_string(),
            ));
        }
        if !v.is_finite() {
            return Err(t.err(*line, format!("population {v} is not finite")));
        }
        if !seen.insert((id.clone(), year)) {
            return Err(t.err(*line, format!("duplicate entry for `{id}` in {year}")));
        }
        let e = by_year.entry(year).or_default();
        e.0.push(id);
        e.1.push(v);
    }
    by_year
        .into_iter()
        .map(|(y, (ids, values))| {
            MarginVector::new(ids, values, level, y)
                .map(|m| (y, m))
                .map_err(|e| t.err(0, e.to_string()))
        })
        .collect()
}

fn save_yearly(path: &Path, id_col: &str, data: &BTreeMap<i32, MarginVector>) -> Result<()> {
    let rows = data.iter().flat_map(|(y, m)| {
        m.iter()
            .map(move |(id, v)| vec![id.to_string(), y.to_string(), v.to_string()])
    });
    write_csv(path, &[id_col, "year", "population"], rows)
}

/// Large-area population projections by year.
pub fn load_projections(path: &Path) -> Result<BTreeMap<i32, MarginVector>> {
    load_yearly(path, "large_id", MarginLevel::LargeArea)
}

pub fn save_projections(path: &Path, p: &BTreeMap<i32, MarginVector>) -> Result<()> {
    save_yearly(path, "large_id", p)
}

/// Small-area auxiliary population estimates by year.
pub fn load_aux(path: &Path) -> Result<BTreeMap<i32, MarginVector>> {
    load_yearly(path, "small_id", MarginLevel::SmallArea)
}

pub fn save_aux(path: &Path, a: &BTreeMap<i32, MarginVector>) -> Result<()> {
    save_yearly(path, "small_id", a)
}

/// Replicate auxiliary estimates, ordered by replicate number.
pub fn load_aux_pool(path: &Path, reference_time: i32) -> Result<Vec<MarginVector>> {
    let t = Table::read_exact(path, &["replicate", "small_id", "population"])?;
    t.non_empty("replicate")?;
    let mut reps: BTreeMap<u64, (Vec<String>, Vec<f64>)> = BTreeMap::new();
    for (line, r) in &t.rows {
        let rep: u64 = t.field(*line, "replicate", &r[0])?;
        let id = t.id(*line, "small_id", &r[1])?;
        let v = t.count(*line, "population", &r[2])?;
        let e = reps.entry(rep).or_default();
        if e.0.contains(&id) {
            return Err(t.err(*line, format!("duplicate `{id}` in replicate {rep}")));
        }
        e.0.push(id);
        e.1.push(v);
    }
    let pool: Vec<MarginVector> = reps
        .into_values()
        .map(|(ids, values)| MarginVector::new(ids, values, MarginLevel::SmallArea, reference_time))
        .collect::<Result<_>>()
        .map_err(|e| t.err(0, e.to_string()))?;
    let first: HashSet<&String> = pool[0].ids().iter().collect();
    if pool
        .iter()
        .any(|m| m.len() != first.len() || m.ids().iter().any(|i| !first.contains(i)))
    {
        return Err(t.err(0, "replicates cover different areas"));
    }
    Ok(pool)
}

pub fn save_aux_pool(path: &Path, pool: &[MarginVector]) -> Result<()> {
    let rows = pool.iter().enumerate().flat_map(|(r, m)| {
        m.iter()
            .map(move |(id, v)| vec![r.to_string(), id.to_string(), v.to_string()])
    });
    write_csv(path, &["replicate", "small_id", "population"], rows)
}

/// Pixel centroids; an empty file yields an empty table.
pub fn load_pixels(path: &Path) -> Result<PixelTable> {
    let t = Table::read_exact(path, &["lon", "lat", "value"])?;
    let mut px = Vec::with_capacity(t.rows.len());
    for (line, r) in &t.rows {
        let lon: f64 = t.field(*line, "lon", &r[0])?;
        let lat: f64 = t.field(*line, "lat", &r[1])?;
        if !(lon.is_finite() && lat.is_finite()) {
            return Err(t.err(*line, "coordinates must be finite"));
        }
        px.push(Pixel {
            lon,
            lat,
            value: t.count(*line, "value", &r[2])?,
        });
    }
    PixelTable::new(px).map_err(|e| t.err(0, e.to_string()))
}

pub fn save_pixels(path: &Path, px: &PixelTable) -> Result<()> {
    write_csv(
        path,
        &["lon", "lat", "value"],
        px.pixels()
            .iter()
            .map(|p| vec![p.lon.to_string(), p.lat.to_string(), p.value.to_string()]),
    )
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| parse_error(&path.display().to_string(), e.line() as u64, e.to_string()))
}

pub fn save_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serialisable value");
    bytes.push(b'\n');
    write_atomic(path, &bytes).map_err(|e| io_error(path, e))
}

pub fn load_profile(path: &Path) -> Result<MpiProfile> {
    let p: MpiProfile = load_json(path)?;
    p.validate()
        .map_err(|e| parse_error(&path.display().to_string(), 0, e.to_string()))?;
    Ok(p)
}
