//! The `spree` command line.
//!
//! Every subcommand writes its outputs under `--out` together with a
//! `manifest.json` recording input digests, the configuration digest, the
//! seed and the library version. Flags can also come from environment
//! variables (`SPREE_<FLAG>`) or from a flat JSON object given with
//! `--config`; explicit flags win over the config file, which wins over the
//! environment.
//!
//! Exit codes: 0 on success, 1 on data errors (with a JSON error object on
//! stderr), 2 on usage errors.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Error;
use crate::ingest::{self, save_json};
use crate::ipf::{IpfConfig, ZeroHandling};
use crate::loglinear::{association_distance, decompose};
use crate::margins::{
    dynamic_shares, fixed_shares, hybrid_shares, select_by_change, HybridSelection,
    ReconcilePolicy, ShareMode, ShareVector,
};
use crate::mpi::{compute_mpi, headcount_from_composition, tabulate_poverty, MpiProfile};
use crate::numeric::SpreadSummary;
use crate::scenario::{generate, ScenarioConfig};
use crate::tabulate::{aggregate_to_large, row_margins, AreaHierarchy, MarginLevel};
use crate::uncertainty::{
    bootstrap_mse, AuxResample, BootstrapConfig, ColumnResample, DebugSwitches,
};
use crate::update::{spree_update, UpdateRequest};
use crate::validation::{run_simulation, SimulationPlan, SimulationReport, SimulationSwitches};

const SUBCOMMANDS: [&str; 7] = [
    "update",
    "bootstrap",
    "validate",
    "mpi",
    "shares",
    "aggregate",
    "diagnose",
];

#[derive(Parser, Debug)]
#[command(
    name = "spree",
    version,
    about = "Small-area census updating with SPREE"
)]
pub struct Cli {
    /// JSON object of flag values for the subcommand (keys are flag names).
    #[arg(long, global = true, env = "SPREE_CONFIG")]
    pub config: Option<PathBuf>,
    /// Worker threads for bootstrap and validation (default: all cores).
    #[arg(long, global = true, env = "SPREE_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Update a census composition to a target year.
    Update(UpdateArgs),
    /// Bootstrap MSE and CV of the updated cells.
    Bootstrap(BootstrapArgs),
    /// Run the design-based validation study described by a plan file.
    Validate(ValidateArgs),
    /// Multidimensional poverty from household records.
    Mpi(MpiArgs),
    /// Within-region population shares.
    Shares(SharesArgs),
    /// Sum gridded population into areas by pixel centroid.
    Aggregate(AggregateArgs),
    /// Log-linear decomposition and association distance of two compositions.
    Diagnose(DiagnoseArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    Persons,
    Households,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ColResampleArg {
    PsuCluster,
    IidCategory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AuxResampleArg {
    ResamplePool,
    None,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct FitArgs {
    /// Largest relative margin deviation accepted by IPF.
    #[arg(long, default_value_t = 1e-8, env = "SPREE_TOLERANCE")]
    pub tolerance: f64,
    #[arg(long = "max-iter", default_value_t = 1000, env = "SPREE_MAX_ITER")]
    pub max_iter: usize,
    /// `structural` or `epsilon:<v>`.
    #[arg(long, default_value = "structural", env = "SPREE_ZEROS")]
    pub zeros: ZeroHandling,
    /// `scale-col-to-row`, `scale-row-to-col` or `error`.
    #[arg(long, default_value = "scale-col-to-row", env = "SPREE_RECONCILE")]
    pub reconcile: ReconcilePolicy,
}

impl FitArgs {
    fn ipf(&self) -> IpfConfig {
        IpfConfig {
            tolerance: self.tolerance,
            max_iterations: self.max_iter,
            zero_handling: self.zeros,
        }
    }
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct UpdateInputs {
    /// Survey category totals for the target year (`id,value`).
    #[arg(long = "col-margin", env = "SPREE_COL_MARGIN")]
    pub col_margin: PathBuf,
    /// Large-area projections (`large_id,year,population`).
    #[arg(long, env = "SPREE_PROJECTIONS")]
    pub projections: PathBuf,
    /// Small-to-large area assignment (`small_id,large_id`).
    #[arg(long, env = "SPREE_HIERARCHY")]
    pub hierarchy: PathBuf,
    #[arg(
        long = "shares-mode",
        default_value = "fixed",
        env = "SPREE_SHARES_MODE"
    )]
    pub shares_mode: ShareMode,
    /// Auxiliary small-area populations (`small_id,year,population`).
    #[arg(long, env = "SPREE_AUX")]
    pub aux: Option<PathBuf>,
    /// Share of regions given dynamic shares in hybrid mode.
    #[arg(long, default_value_t = 0.25, env = "SPREE_CUTOFF")]
    pub cutoff: f64,
    /// Target year.
    #[arg(long, env = "SPREE_YEAR")]
    pub year: i32,
    /// Census year of the composition.
    #[arg(long = "base-year", env = "SPREE_BASE_YEAR")]
    pub base_year: Option<i32>,
    /// Unit counted in the composition.
    #[arg(long, value_enum, env = "SPREE_UNIT")]
    pub unit: Unit,
    #[command(flatten)]
    pub fit: FitArgs,
}

#[derive(Args, Debug, Clone, Serialize)]
#[command(args_override_self = true)]
pub struct UpdateArgs {
    /// Census composition to update (`area_id,category_id,count`).
    #[arg(long = "seed", visible_alias = "census", env = "SPREE_CENSUS")]
    pub census: PathBuf,
    #[command(flatten)]
    pub inputs: UpdateInputs,
    #[arg(long, env = "SPREE_OUT")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
#[command(args_override_self = true)]
pub struct BootstrapArgs {
    /// Census composition to update (`area_id,category_id,count`).
    #[arg(long, env = "SPREE_CENSUS")]
    pub census: PathBuf,
    #[command(flatten)]
    pub inputs: UpdateInputs,
    /// Survey observations (`psu_id,stratum_id,category_id,weight`).
    #[arg(long, env = "SPREE_DESIGN")]
    pub design: PathBuf,
    /// Replicate auxiliary estimates: a CSV (`replicate,small_id,population`)
    /// or a directory holding `aux_pool.csv`.
    #[arg(long = "aux-pool", env = "SPREE_AUX_POOL")]
    pub aux_pool: Option<PathBuf>,
    #[arg(long, default_value_t = 100, env = "SPREE_REPLICATES")]
    pub replicates: usize,
    #[arg(long, default_value_t = 0, env = "SPREE_SEED")]
    pub seed: u64,
    #[arg(
        long = "col-resample",
        value_enum,
        default_value = "psu-cluster",
        env = "SPREE_COL_RESAMPLE"
    )]
    pub col_resample: ColResampleArg,
    #[arg(
        long = "aux-resample",
        value_enum,
        default_value = "resample-pool",
        env = "SPREE_AUX_RESAMPLE"
    )]
    pub aux_resample: AuxResampleArg,
    /// CV of the perturbation applied when no replicate pool is given.
    #[arg(
        long = "perturbation-cv",
        default_value_t = 0.05,
        env = "SPREE_PERTURBATION_CV"
    )]
    pub perturbation_cv: f64,
    #[arg(long = "max-drop", default_value_t = 0.10, env = "SPREE_MAX_DROP")]
    pub max_drop: f64,
    /// Replace Poisson draws by their means.
    #[arg(long = "debug-poisson-at-mean")]
    pub debug_poisson_at_mean: bool,
    /// Replace multinomial draws by their means.
    #[arg(long = "debug-multinomial-at-mean")]
    pub debug_multinomial_at_mean: bool,
    /// Use the supplied column margin instead of survey resamples.
    #[arg(long = "debug-column-at-point")]
    pub debug_column_at_point: bool,
    #[arg(long, env = "SPREE_OUT")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
#[command(args_override_self = true)]
pub struct ValidateArgs {
    /// Plan file (JSON) with either a `scenario` or file `inputs`.
    #[arg(long, env = "SPREE_PLAN")]
    pub plan: PathBuf,
    /// Overrides the plan seed.
    #[arg(long, env = "SPREE_SEED")]
    pub seed: Option<u64>,
    /// Overrides the plan replicate count.
    #[arg(long, env = "SPREE_REPLICATES")]
    pub replicates: Option<usize>,
    #[arg(long, env = "SPREE_OUT")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
#[command(args_override_self = true)]
pub struct MpiArgs {
    /// Household records (`household_id,area_id,subgroup_id,size,weight,ind_<id>...`).
    #[arg(long, env = "SPREE_HOUSEHOLDS")]
    pub households: PathBuf,
    /// Indicator weights and cutoff (JSON); the nine-indicator profile by default.
    #[arg(long, env = "SPREE_PROFILE")]
    pub profile: Option<PathBuf>,
    /// Restrict the area table to one subgroup.
    #[arg(long, env = "SPREE_SUBGROUP")]
    pub subgroup: Option<String>,
    /// Count households instead of persons.
    #[arg(long = "household-weighted")]
    pub household_weighted: bool,
    #[arg(long, default_value_t = 0, env = "SPREE_YEAR")]
    pub year: i32,
    #[arg(long, env = "SPREE_OUT")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
#[command(args_override_self = true)]
pub struct SharesArgs {
    #[arg(long, default_value = "fixed", env = "SPREE_MODE")]
    pub mode: ShareMode,
    #[arg(long, env = "SPREE_HIERARCHY")]
    pub hierarchy: PathBuf,
    /// Census composition (fixed and hybrid modes).
    #[arg(long, env = "SPREE_CENSUS")]
    pub census: Option<PathBuf>,
    /// Auxiliary populations (dynamic and hybrid modes).
    #[arg(long, env = "SPREE_AUX")]
    pub aux: Option<PathBuf>,
    /// Projections used to rank regions (hybrid mode).
    #[arg(long, env = "SPREE_PROJECTIONS")]
    pub projections: Option<PathBuf>,
    #[arg(long, default_value_t = 0.25, env = "SPREE_CUTOFF")]
    pub cutoff: f64,
    #[arg(long, env = "SPREE_YEAR")]
    pub year: i32,
    #[arg(long = "base-year", env = "SPREE_BASE_YEAR")]
    pub base_year: Option<i32>,
    #[arg(long, env = "SPREE_OUT")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
#[command(args_override_self = true)]
pub struct AggregateArgs {
    /// Pixel centroids (`lon,lat,value`).
    #[arg(long, env = "SPREE_PIXELS")]
    pub pixels: PathBuf,
    /// GeoJSON FeatureCollection with `properties.area_id`.
    #[arg(long, env = "SPREE_POLYGONS")]
    pub polygons: PathBuf,
    #[arg(long, default_value_t = 0, env = "SPREE_YEAR")]
    pub year: i32,
    /// Output CSV (`id,value`); the manifest is written beside it.
    #[arg(long, env = "SPREE_OUT")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
#[command(args_override_self = true)]
pub struct DiagnoseArgs {
    /// First composition (usually the census).
    #[arg(long)]
    pub census: PathBuf,
    /// Second composition (usually the fitted table).
    #[arg(long)]
    pub fitted: PathBuf,
    /// Also write `diagnose.json` and a manifest here.
    #[arg(long, env = "SPREE_OUT")]
    pub out: Option<PathBuf>,
}

/// Audit record written next to every output set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config_digest: String,
    pub inputs: Vec<InputDigest>,
    pub seed: Option<u64>,
    pub library_version: String,
    pub unit: Option<String>,
    pub outputs: Vec<String>,
    /// Unix seconds; `SOURCE_DATE_EPOCH` when set.
    pub started_at: u64,
    pub finished_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

fn now() -> u64 {
    if let Some(t) = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.parse().ok())
    {
        return t;
    }
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn file_digest(path: &Path) -> anyhow::Result<InputDigest> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(InputDigest {
        path: path.display().to_string(),
        sha256: hex::encode(Sha256::digest(bytes)),
    })
}

/// Digest of the subcommand arguments, ignoring where outputs go.
fn config_digest<T: Serialize>(args: &T) -> String {
    let mut v = serde_json::to_value(args).expect("arguments serialise");
    if let Some(o) = v.as_object_mut() {
        o.remove("out");
    }
    hex::encode(Sha256::digest(v.to_string()))
}

struct Run {
    subcommand: &'static str,
    started_at: u64,
    config_digest: String,
    inputs: Vec<PathBuf>,
    seed: Option<u64>,
    unit: Option<Unit>,
    outputs: Vec<String>,
}

impl Run {
    fn new<T: Serialize>(subcommand: &'static str, args: &T) -> Self {
        Run {
            subcommand,
            started_at: now(),
            config_digest: config_digest(args),
            inputs: Vec::new(),
            seed: None,
            unit: None,
            outputs: Vec::new(),
        }
    }

    fn input(&mut self, p: &Path) {
        self.inputs.push(p.to_path_buf());
    }

    fn csv(&mut self, dir: &Path, name: &str, text: &str) -> anyhow::Result<()> {
        let p = dir.join(name);
        ingest::write_atomic(&p, text.as_bytes())
            .with_context(|| format!("writing {}", p.display()))?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn json<T: Serialize>(&mut self, dir: &Path, name: &str, value: &T) -> anyhow::Result<()> {
        save_json(&dir.join(name), value)?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn finish(self, manifest_path: &Path) -> anyhow::Result<()> {
        let inputs = self
            .inputs
            .iter()
            .map(|p| file_digest(p))
            .collect::<anyhow::Result<_>>()?;
        let m = RunManifest {
            subcommand: self.subcommand.to_string(),
            config_digest: self.config_digest,
            inputs,
            seed: self.seed,
            library_version: env!("CARGO_PKG_VERSION").to_string(),
            unit: self.unit.map(|u| format!("{u:?}").to_lowercase()),
            outputs: self.outputs,
            started_at: self.started_at,
            finished_at: now(),
        };
        save_json(manifest_path, &m)?;
        Ok(())
    }
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "NA".to_string(), |v| v.to_string())
}

fn summary_cells(s: Option<&SpreadSummary>) -> String {
    match s {
        Some(s) => s.values().map(|v| v.to_string()).join(","),
        None => ["NA"; 6].join(","),
    }
}

fn summary_header() -> String {
    SpreadSummary::HEADER.join(",")
}

/// Update request built from the shared update flags.
fn build_request(
    census: &Path,
    a: &UpdateInputs,
    run: &mut Run,
) -> anyhow::Result<(UpdateRequest, Option<HybridSelection>)> {
    let base = a.base_year.unwrap_or(0);
    let seed = ingest::load_composition(census, base)?;
    let h = ingest::load_hierarchy(&a.hierarchy)?;
    let col = ingest::load_margin(&a.col_margin, MarginLevel::Category, a.year)?;
    let mut projections = ingest::load_projections(&a.projections)?;
    let large = projections
        .remove(&a.year)
        .ok_or_else(|| anyhow!("projections have no entries for {}", a.year))?;
    for p in [census, &a.hierarchy, &a.col_margin, &a.projections] {
        run.input(p);
    }
    let aux = |run: &mut Run| -> anyhow::Result<ShareVector> {
        let path = a
            .aux
            .as_ref()
            .ok_or_else(|| anyhow!("--aux is required for {} shares", a.shares_mode))?;
        run.input(path);
        let v = ingest::load_aux(path)?
            .remove(&a.year)
            .ok_or_else(|| anyhow!("auxiliary estimates have no entries for {}", a.year))?;
        Ok(dynamic_shares(&v, &h)?)
    };
    let (shares, selection) = match a.shares_mode {
        ShareMode::Fixed => (fixed_shares(&seed, &h)?, None),
        ShareMode::Dynamic => (aux(run)?, None),
        ShareMode::Hybrid => {
            let fixed = fixed_shares(&seed, &h)?;
            let dynamic = aux(run)?;
            let baseline =
                row_margins(&aggregate_to_large(&seed, &h)?).with_level(MarginLevel::LargeArea);
            let sel = select_by_change(&large, &baseline, a.cutoff)?;
            (hybrid_shares(&fixed, &dynamic, &sel)?, Some(sel))
        }
    };
    let ipf = a.fit.ipf();
    ipf.validate()?;
    run.unit = Some(a.unit);
    Ok((
        UpdateRequest {
            seed,
            col_margin: col,
            large_totals: large,
            shares,
            ipf,
            reconcile: a.fit.reconcile,
        },
        selection,
    ))
}

#[derive(Serialize)]
struct UpdateOutput<'a> {
    unit: Unit,
    provenance: &'a crate::update::Provenance,
    ipf: &'a crate::update::IpfDiagnostics,
    hybrid_selection: Option<&'a HybridSelection>,
}

fn cmd_update(a: &UpdateArgs) -> anyhow::Result<()> {
    let mut run = Run::new("update", a);
    let (req, sel) = build_request(&a.census, &a.inputs, &mut run)?;
    let res = spree_update(&req)?;
    if !res.ipf.converged {
        log::warn!(
            "IPF stopped after {} sweeps with deviation {:.3e}",
            res.ipf.iterations_used,
            res.ipf.final_deviation
        );
    }
    ingest::save_composition(&a.out.join("fitted.csv"), &res.fitted)?;
    ingest::save_margin(&a.out.join("row_margin.csv"), &res.row_margin_used)?;
    ingest::save_margin(&a.out.join("col_margin.csv"), &res.col_margin_used)?;
    run.outputs
        .extend(["fitted.csv", "row_margin.csv", "col_margin.csv"].map(String::from));
    run.json(
        &a.out,
        "provenance.json",
        &UpdateOutput {
            unit: a.inputs.unit,
            provenance: &res.provenance,
            ipf: &res.ipf,
            hybrid_selection: sel.as_ref(),
        },
    )?;
    run.finish(&a.out.join("manifest.json"))
}

fn cmd_bootstrap(a: &BootstrapArgs) -> anyhow::Result<()> {
    let mut run = Run::new("bootstrap", a);
    run.seed = Some(a.seed);
    let (req, _) = build_request(&a.census, &a.inputs, &mut run)?;
    let design = ingest::load_design(&a.design)?;
    run.input(&a.design);
    let pool = match &a.aux_pool {
        Some(p) => {
            let file = if p.is_dir() {
                p.join("aux_pool.csv")
            } else {
                p.clone()
            };
            run.input(&file);
            Some(ingest::load_aux_pool(&file, a.inputs.year)?)
        }
        None => None,
    };
    let cfg = BootstrapConfig {
        replicates: a.replicates,
        seed: a.seed,
        col_resample: match a.col_resample {
            ColResampleArg::PsuCluster => ColumnResample::PsuCluster,
            ColResampleArg::IidCategory => ColumnResample::IidCategory,
        },
        aux_resample: match a.aux_resample {
            AuxResampleArg::ResamplePool => AuxResample::ResamplePool,
            AuxResampleArg::None => AuxResample::None,
        },
        perturbation_cv: a.perturbation_cv,
        max_drop_fraction: a.max_drop,
        debug: DebugSwitches {
            poisson_at_mean: a.debug_poisson_at_mean,
            multinomial_at_mean: a.debug_multinomial_at_mean,
            column_at_point: a.debug_column_at_point,
        },
    };
    let u = bootstrap_mse(&req, &design, pool.as_deref(), &cfg)?;

    let mut cells = format!("area_id,category_id,estimate,mse,cv,{}\n", summary_header());
    let nc = u.category_ids.len();
    for (i, (e, m)) in u.estimate.iter().zip(&u.mse).enumerate() {
        let _ = writeln!(
            cells,
            "{},{},{e},{m},{},{}",
            u.area_ids[i / nc],
            u.category_ids[i % nc],
            opt(u.cv[i]),
            summary_cells(Some(&u.replicate_summary[i]))
        );
    }
    run.csv(&a.out, "cells.csv", &cells)?;
    if let Some(h) = &u.headcount {
        let mut t = String::from("area_id,headcount,mse,cv\n");
        for (i, id) in h.area_ids.iter().enumerate() {
            let _ = writeln!(
                t,
                "{id},{},{},{}",
                opt(h.estimate[i]),
                opt(h.mse[i]),
                opt(h.cv[i])
            );
        }
        run.csv(&a.out, "headcount.csv", &t)?;
        let s = h.cv_summary_percent();
        let t = format!(
            "H_est,{}\n{},{}\n",
            summary_header(),
            h.overall_estimate * 100.0,
            summary_cells(s.as_ref())
        );
        run.csv(&a.out, "headcount_cv_summary.csv", &t)?;
    }
    run.json(&a.out, "uncertainty.json", &u)?;
    run.finish(&a.out.join("manifest.json"))
}

fn default_strategies() -> Vec<ShareMode> {
    ShareMode::ALL.to_vec()
}

fn default_cutoff() -> f64 {
    0.25
}

/// Input files of a plan, relative to the plan file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanInputs {
    pub census_t0: PathBuf,
    pub census_t: PathBuf,
    pub t0: i32,
    pub t: i32,
    pub hierarchy: PathBuf,
    /// `id,value` margin of large-area totals at `t`.
    pub large_totals: PathBuf,
    pub design: PathBuf,
    pub aux_pool: Option<PathBuf>,
}

/// On-disk form of a simulation plan.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanFile {
    pub replicates: usize,
    pub seed: u64,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<ShareMode>,
    #[serde(default = "default_cutoff")]
    pub hybrid_cutoff: f64,
    #[serde(default)]
    pub col_resample: ColumnResample,
    #[serde(default)]
    pub ipf: Option<IpfConfig>,
    #[serde(default)]
    pub reconcile: ReconcilePolicy,
    #[serde(default)]
    pub switches: SimulationSwitches,
    pub scenario: Option<ScenarioConfig>,
    pub inputs: Option<PlanInputs>,
}

/// Reads a plan and resolves its data; returns the files it read.
pub fn load_plan(path: &Path) -> anyhow::Result<(SimulationPlan, Vec<PathBuf>)> {
    let f: PlanFile = ingest::load_json(path)?;
    let mut files = vec![path.to_path_buf()];
    let dir = path.parent().unwrap_or(Path::new("."));
    let base = |p: &PathBuf| dir.join(p);
    let (truth_t0, truth_t, hierarchy, large_totals_t, survey_design, aux_pool) =
        match (f.scenario, f.inputs) {
            (Some(s), None) => {
                let s = generate(&s)?;
                (
                    s.truth_t0,
                    s.truth_t,
                    s.hierarchy,
                    s.large_totals_t,
                    s.survey_design,
                    s.aux_pool,
                )
            }
            (None, Some(i)) => {
                let paths = [
                    &i.census_t0,
                    &i.census_t,
                    &i.hierarchy,
                    &i.large_totals,
                    &i.design,
                ];
                files.extend(paths.iter().map(|p| base(p)));
                let pool = match &i.aux_pool {
                    Some(p) => {
                        files.push(base(p));
                        ingest::load_aux_pool(&base(p), i.t)?
                    }
                    None => Vec::new(),
                };
                (
                    ingest::load_composition(&base(&i.census_t0), i.t0)?,
                    ingest::load_composition(&base(&i.census_t), i.t)?,
                    ingest::load_hierarchy(&base(&i.hierarchy))?,
                    ingest::load_margin(&base(&i.large_totals), MarginLevel::LargeArea, i.t)?,
                    ingest::load_design(&base(&i.design))?,
                    pool,
                )
            }
            _ => bail!("plan needs exactly one of `scenario` and `inputs`"),
        };
    Ok((
        SimulationPlan {
            replicates: f.replicates,
            seed: f.seed,
            truth_t0,
            truth_t,
            hierarchy,
            large_totals_t,
            survey_design,
            aux_pool,
            strategies: f.strategies,
            hybrid_cutoff: f.hybrid_cutoff,
            col_resample: f.col_resample,
            ipf: f.ipf.unwrap_or_default(),
            reconcile: f.reconcile,
            switches: f.switches,
        },
        files,
    ))
}

const QUARTILE_NAMES: [&str; 4] = ["Lowest", "2nd", "3rd", "Highest"];

/// CSV tables of a validation report, keyed by file name.
pub fn report_tables(r: &SimulationReport) -> BTreeMap<&'static str, String> {
    let mut out = BTreeMap::new();

    let mut t = String::from("quartile");
    for s in &r.strategies {
        let _ = write!(t, ",{0}_mean_bias_pct,{0}_mean_abs_bias_pct", s.strategy);
    }
    t.push('\n');
    for (q, name) in QUARTILE_NAMES.iter().enumerate() {
        t.push_str(name);
        for s in &r.strategies {
            let row = &s.quartiles[q];
            let _ = write!(
                t,
                ",{},{}",
                opt(row.share_mean_bias_pct),
                opt(row.share_mean_abs_bias_pct)
            );
        }
        t.push('\n');
    }
    out.insert("share_accuracy.csv", t);

    let mut t = format!("strategy,quartile,metric,{}\n", summary_header());
    for s in &r.strategies {
        for (metric, overall, pick) in [
            ("relative_bias_pct", &s.overall_target_bias_pct, 0),
            ("relative_rmse_pct", &s.overall_target_rmse_pct, 1),
        ] {
            for (q, name) in QUARTILE_NAMES.iter().enumerate() {
                let row = &s.quartiles[q];
                let v = if pick == 0 {
                    &row.target_bias_pct
                } else {
                    &row.target_rmse_pct
                };
                let _ = writeln!(
                    t,
                    "{},{name},{metric},{}",
                    s.strategy,
                    summary_cells(v.as_ref())
                );
            }
            let _ = writeln!(
                t,
                "{},All,{metric},{}",
                s.strategy,
                summary_cells(overall.as_ref())
            );
        }
    }
    out.insert("target_performance.csv", t);

    let mut t = String::from(
        "area_id,quartile,change_score,strategy,share_relative_bias,share_relative_rmse,target_relative_bias,target_relative_rmse\n",
    );
    for s in &r.strategies {
        for (a, m) in s.areas.iter().enumerate() {
            let _ = writeln!(
                t,
                "{},{},{},{},{},{},{},{}",
                m.area_id,
                QUARTILE_NAMES[m.quartile],
                r.change_scores[a],
                s.strategy,
                opt(m.share_relative_bias),
                opt(m.share_relative_rmse),
                opt(m.target_relative_bias),
                opt(m.target_relative_rmse)
            );
        }
    }
    out.insert("area_metrics.csv", t);

    let mut t = String::from("quartile,strategy,pearson\n");
    for (q, name) in QUARTILE_NAMES.iter().enumerate() {
        for s in &r.strategies {
            let _ = writeln!(
                t,
                "{name},{},{}",
                s.strategy,
                opt(s.quartiles[q].target_correlation)
            );
        }
    }
    out.insert("correlations.csv", t);

    let mut t = String::from("strategy,share_wins\n");
    for s in &r.strategies {
        let _ = writeln!(t, "{},{}", s.strategy, s.share_wins);
    }
    out.insert("win_counts.csv", t);
    out
}

fn cmd_validate(a: &ValidateArgs) -> anyhow::Result<()> {
    let mut run = Run::new("validate", a);
    let (mut plan, files) = load_plan(&a.plan)?;
    files.iter().for_each(|f| run.input(f));
    if let Some(s) = a.seed {
        plan.seed = s;
    }
    if let Some(r) = a.replicates {
        plan.replicates = r;
    }
    run.seed = Some(plan.seed);
    let report = run_simulation(&plan)?;
    if !report.failures.is_empty() {
        log::warn!("{} replicates failed", report.failures.len());
    }
    for (name, text) in report_tables(&report) {
        run.csv(&a.out, name, &text)?;
    }
    run.json(&a.out, "report.json", &report)?;
    run.finish(&a.out.join("manifest.json"))
}

#[derive(Serialize)]
struct MpiOutput {
    overall: crate::mpi::MpiResult,
    by_subgroup: BTreeMap<String, crate::mpi::MpiResult>,
    area_headcounts: Vec<(String, Option<f64>)>,
}

fn cmd_mpi(a: &MpiArgs) -> anyhow::Result<()> {
    let mut run = Run::new("mpi", a);
    let records = ingest::load_households(&a.households)?;
    run.input(&a.households);
    let profile = match &a.profile {
        Some(p) => {
            run.input(p);
            ingest::load_profile(p)?
        }
        None => MpiProfile::default(),
    };
    let weighted = !a.household_weighted;
    let overall = compute_mpi(&records, &profile, weighted)?;
    let mut groups: Vec<&str> = records.iter().map(|r| r.subgroup_id.as_str()).collect();
    groups.sort_unstable();
    groups.dedup();
    let mut by_subgroup = BTreeMap::new();
    for g in groups {
        let sub: Vec<_> = records
            .iter()
            .filter(|r| r.subgroup_id == g)
            .cloned()
            .collect();
        by_subgroup.insert(g.to_string(), compute_mpi(&sub, &profile, weighted)?);
    }
    let mut areas: Vec<String> = Vec::new();
    for r in &records {
        if !areas.contains(&r.area_id) {
            areas.push(r.area_id.clone());
        }
    }
    let h = AreaHierarchy::identity(&areas)?;
    let table = tabulate_poverty(&records, &profile, &h, a.subgroup.as_deref(), a.year)?;
    let hc = headcount_from_composition(&table)?;
    ingest::save_composition(&a.out.join("poverty_composition.csv"), &table)?;
    run.outputs.push("poverty_composition.csv".into());
    run.json(
        &a.out,
        "mpi.json",
        &MpiOutput {
            overall,
            by_subgroup,
            area_headcounts: areas.into_iter().zip(hc).collect(),
        },
    )?;
    run.finish(&a.out.join("manifest.json"))
}

fn cmd_shares(a: &SharesArgs) -> anyhow::Result<()> {
    let mut run = Run::new("shares", a);
    let h = ingest::load_hierarchy(&a.hierarchy)?;
    run.input(&a.hierarchy);
    let need = |p: &Option<PathBuf>, flag: &str| {
        p.clone()
            .ok_or_else(|| anyhow!("--{flag} is required for {} shares", a.mode))
    };
    let census = || -> anyhow::Result<crate::tabulate::Composition> {
        let p = need(&a.census, "census")?;
        Ok(ingest::load_composition(&p, a.base_year.unwrap_or(0))?)
    };
    let aux = |year: i32| -> anyhow::Result<ShareVector> {
        let p = need(&a.aux, "aux")?;
        let v = ingest::load_aux(&p)?
            .remove(&year)
            .ok_or_else(|| anyhow!("auxiliary estimates have no entries for {year}"))?;
        Ok(dynamic_shares(&v, &h)?)
    };
    let (shares, sel) = match a.mode {
        ShareMode::Fixed => (fixed_shares(&census()?, &h)?, None),
        ShareMode::Dynamic => (aux(a.year)?, None),
        ShareMode::Hybrid => {
            let c = census()?;
            let proj = ingest::load_projections(&need(&a.projections, "projections")?)?
                .remove(&a.year)
                .ok_or_else(|| anyhow!("projections have no entries for {}", a.year))?;
            let baseline =
                row_margins(&aggregate_to_large(&c, &h)?).with_level(MarginLevel::LargeArea);
            let sel = select_by_change(&proj, &baseline, a.cutoff)?;
            (
                hybrid_shares(&fixed_shares(&c, &h)?, &aux(a.year)?, &sel)?,
                Some(sel),
            )
        }
    };
    for p in [&a.census, &a.aux, &a.projections].into_iter().flatten() {
        run.input(p);
    }
    let mut t = String::from("small_id,large_id,share\n");
    for (id, s) in shares.small_ids().iter().zip(shares.shares()) {
        let large = shares.hierarchy().large_of(id).unwrap_or("");
        let _ = writeln!(t, "{id},{large},{s}");
    }
    run.csv(&a.out, "shares.csv", &t)?;
    if let Some(sel) = sel {
        run.json(&a.out, "selection.json", &sel)?;
    }
    run.finish(&a.out.join("manifest.json"))
}

#[derive(Serialize)]
struct AggregateSummary {
    unassigned_pixels: usize,
    unassigned_mass: f64,
    warning: Option<String>,
}

fn cmd_aggregate(a: &AggregateArgs) -> anyhow::Result<()> {
    let mut run = Run::new("aggregate", a);
    let px = ingest::load_pixels(&a.pixels)?;
    let polys = ingest::load_polygons(&a.polygons)?;
    run.input(&a.pixels);
    run.input(&a.polygons);
    let agg = ingest::aggregate_pixels(&px, &polys, a.year)?;
    if let Some(w) = &agg.warning {
        log::warn!("{w}");
    }
    ingest::save_margin(&a.out, &agg.totals)?;
    let name = a
        .out
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    run.outputs.push(name.clone());
    let summary_path = a.out.with_file_name(format!("{name}.summary.json"));
    save_json(
        &summary_path,
        &AggregateSummary {
            unassigned_pixels: agg.unassigned_pixels,
            unassigned_mass: agg.unassigned_mass,
            warning: agg.warning.clone(),
        },
    )?;
    run.outputs.push(format!("{name}.summary.json"));
    run.finish(&a.out.with_file_name(format!("{name}.manifest.json")))
}

#[derive(Serialize)]
struct Diagnosis {
    census: crate::loglinear::LogLinearDecomposition,
    fitted: crate::loglinear::LogLinearDecomposition,
    association_distance: f64,
}

fn cmd_diagnose(a: &DiagnoseArgs) -> anyhow::Result<()> {
    let mut run = Run::new("diagnose", a);
    let x = ingest::load_composition(&a.census, 0)?;
    let y = ingest::load_composition(&a.fitted, 0)?;
    run.input(&a.census);
    run.input(&a.fitted);
    let d = Diagnosis {
        census: decompose(&x)?,
        fitted: decompose(&y)?,
        association_distance: association_distance(&x, &y)?,
    };
    println!("{}", serde_json::to_string_pretty(&d)?);
    if let Some(out) = &a.out {
        run.json(out, "diagnose.json", &d)?;
        run.finish(&out.join("manifest.json"))?;
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Update(a) => cmd_update(a),
        Command::Bootstrap(a) => cmd_bootstrap(a),
        Command::Validate(a) => cmd_validate(a),
        Command::Mpi(a) => cmd_mpi(a),
        Command::Shares(a) => cmd_shares(a),
        Command::Aggregate(a) => cmd_aggregate(a),
        Command::Diagnose(a) => cmd_diagnose(a),
    }
}

/// Flags from a `--config` file, turned into arguments. Keys whose flag has
/// its environment variable set are skipped, so the environment wins.
fn config_args(path: &Path, subcommand: &str) -> anyhow::Result<Vec<OsString>> {
    let root = <Cli as clap::CommandFactory>::command();
    let env_set = |long: &str| {
        let sub = root.find_subcommand(subcommand);
        root.get_arguments()
            .chain(sub.into_iter().flat_map(|c| c.get_arguments()))
            .filter(|a| a.get_long() == Some(long))
            .filter_map(|a| a.get_env())
            .any(|e| std::env::var_os(e).is_some())
    };
    let v: serde_json::Value = ingest::load_json(path)?;
    let obj = v
        .as_object()
        .ok_or_else(|| anyhow!("config {} must be a JSON object", path.display()))?;
    let mut out = Vec::new();
    for (k, v) in obj {
        let long = k.replace('_', "-");
        if env_set(&long) {
            continue;
        }
        let flag = format!("--{long}");
        match v {
            serde_json::Value::Bool(true) => out.push(flag.into()),
            serde_json::Value::Bool(false) | serde_json::Value::Null => {}
            serde_json::Value::String(s) => out.extend([flag.into(), s.into()]),
            serde_json::Value::Number(n) => out.extend([flag.into(), n.to_string().into()]),
            _ => bail!("config value for `{k}` must be a scalar"),
        }
    }
    Ok(out)
}

/// Inserts config-file flags right after the subcommand so that explicit
/// flags, which come later, override them.
fn expand_config(args: Vec<OsString>) -> anyhow::Result<Vec<OsString>> {
    let mut config = std::env::var_os("SPREE_CONFIG").map(PathBuf::from);
    let mut sub = None;
    let mut i = 1;
    while i < args.len() {
        let s = args[i].to_string_lossy();
        if s == "--config" {
            config = args.get(i + 1).map(PathBuf::from);
            i += 2;
            continue;
        }
        if let Some(p) = s.strip_prefix("--config=") {
            config = Some(PathBuf::from(p));
        } else if sub.is_none() && SUBCOMMANDS.contains(&s.as_ref()) {
            sub = Some(i);
        }
        i += 1;
    }
    match (config, sub) {
        (Some(c), Some(at)) => {
            let mut out = args[..=at].to_vec();
            let name = args[at].to_string_lossy().into_owned();
            out.extend(config_args(&c, &name)?);
            out.extend_from_slice(&args[at + 1..]);
            Ok(out)
        }
        _ => Ok(args),
    }
}

fn error_json(kind: &str, message: &str) -> String {
    serde_json::json!({ "error": { "kind": kind, "message": message } }).to_string()
}

/// Runs the command line and returns the process exit code.
pub fn run<I: IntoIterator<Item = OsString>>(args: I) -> i32 {
    let _ =
        env_logger::Builder::from_env(env_logger::Env::default().filter_or("SPREE_LOG", "warn"))
            .try_init();
    let args = match expand_config(args.into_iter().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("{}", error_json("config", &format!("{e:#}")));
            return 2;
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match cli.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| dispatch(&cli)),
            Err(e) => Err(anyhow!("cannot start {n} worker threads: {e}")),
        },
        None => dispatch(&cli),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let kind = e.downcast_ref::<Error>().map_or("error", Error::kind);
            eprintln!("{}", error_json(kind, &format!("{e:#}")));
            1
        }
    }
}
