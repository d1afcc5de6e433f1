//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Binomial, Distribution, Poisson};

use spree::cli::load_plan;
use spree::ingest::{
    aggregate_pixels, load_aux_pool, load_composition, load_design, load_hierarchy, load_margin,
    load_pixels, load_polygons, load_projections, PixelTable,
};
use spree::ipf::{ipf_fit, IpfConfig};
use spree::loglinear::association_distance;
use spree::margins::{
    distribute, dynamic_shares, fixed_shares, hybrid_shares, select_by_change, ReconcilePolicy,
    ShareMode,
};
use spree::mpi::{
    compute_mpi, deprivation_score, headcount_from_composition, is_poor, Deprivation,
    HouseholdRecord, MpiProfile,
};
use spree::tabulate::{
    aggregate_to_large, column_margins, row_margins, AreaHierarchy, Composition, MarginLevel,
    MarginVector,
};
use spree::uncertainty::{bootstrap_mse, AuxResample, BootstrapConfig, DebugSwitches};
use spree::update::{spree_update, UpdateRequest};
use spree::validation::{relative_bias, relative_rmse, replicate_census, run_simulation};

type Outcome = Result<String, String>;
type Check = fn() -> Outcome;
type Split = Box<dyn Fn(f64, f64) -> usize>;
/// Per-category totals of each PSU, grouped by stratum.
type Strata = Vec<(String, Vec<(String, Vec<f64>)>)>;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(name)
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

fn within_time(start: Instant, limit: Duration) -> Result<Duration, String> {
    let t = start.elapsed();
    ensure(t < limit, || format!("took {t:?}, limit {limit:?}"))?;
    Ok(t)
}

fn ids(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

fn random_table(rng: &mut ChaCha20Rng, r: usize, c: usize, lo: f64, hi: f64) -> Composition {
    let counts = (0..r * c).map(|_| rng.random_range(lo..hi)).collect();
    Composition::new(ids("a", r), ids("c", c), counts, 0).unwrap()
}

// Alternating row/column scaling with the same stopping rule as the library.
fn oracle_ipf(seed: &[f64], c: usize, rows: &[f64], cols: &[f64], tol: f64) -> Vec<f64> {
    let r = rows.len();
    let mut x = seed.to_vec();
    let dev = |x: &[f64]| {
        let mut d: f64 = 0.0;
        for i in 0..r {
            let s: f64 = (0..c).map(|j| x[i * c + j]).sum();
            d = d.max((s - rows[i]).abs() / rows[i].max(1.0));
        }
        for j in 0..c {
            let s: f64 = (0..r).map(|i| x[i * c + j]).sum();
            d = d.max((s - cols[j]).abs() / cols[j].max(1.0));
        }
        d
    };
    for _ in 0..100_000 {
        if dev(&x) <= tol {
            break;
        }
        for i in 0..r {
            let s: f64 = (0..c).map(|j| x[i * c + j]).sum();
            (0..c).for_each(|j| x[i * c + j] *= rows[i] / s);
        }
        for j in 0..c {
            let s: f64 = (0..r).map(|i| x[i * c + j]).sum();
            (0..r).for_each(|i| x[i * c + j] *= cols[j] / s);
        }
    }
    x
}

fn random_fit_case(rng: &mut ChaCha20Rng) -> (Composition, MarginVector, MarginVector) {
    let (r, c) = (rng.random_range(2..=6), rng.random_range(2..=6));
    let seed = random_table(rng, r, c, 0.5, 100.0);
    let target = random_table(rng, r, c, 1.0, 100.0);
    (seed, row_margins(&target), column_margins(&target))
}

fn ipf_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(101);
    let (mut worst_margin, mut worst_or, mut worst_cell) = (0.0f64, 0.0f64, 0.0f64);
    for case in 0..1000 {
        let (seed, rows, cols) = random_fit_case(&mut rng);
        let fit = ipf_fit(&seed, &rows, &cols, &IpfConfig::default()).map_err(|e| e.to_string())?;
        ensure(fit.converged, || format!("case {case} did not converge"))?;
        let f = &fit.fitted;
        for (a, b) in row_margins(f).values().iter().zip(rows.values()) {
            worst_margin = worst_margin.max(rel(*a, *b));
        }
        for (a, b) in column_margins(f).values().iter().zip(cols.values()) {
            worst_margin = worst_margin.max(rel(*a, *b));
        }
        let (r, c) = (seed.n_areas(), seed.n_categories());
        for i in 0..r {
            for k in i + 1..r {
                for j in 0..c {
                    for l in j + 1..c {
                        let or = |x: &Composition| {
                            x.get(i, j) * x.get(k, l) / (x.get(i, l) * x.get(k, j))
                        };
                        worst_or = worst_or.max(rel(or(&seed), or(f)));
                    }
                }
            }
        }
        let oracle = oracle_ipf(seed.counts(), c, rows.values(), cols.values(), 1e-8);
        for (a, b) in f.counts().iter().zip(&oracle) {
            worst_cell = worst_cell.max(rel(*a, *b));
        }
    }
    ensure(worst_margin <= 1e-8, || {
        format!("margin error {worst_margin:.3e}")
    })?;
    ensure(worst_or <= 1e-6, || {
        format!("odds-ratio error {worst_or:.3e}")
    })?;
    ensure(worst_cell <= 1e-8, || {
        format!("oracle disagreement {worst_cell:.3e}")
    })?;
    let t = within_time(start, Duration::from_secs(10))?;
    Ok(format!(
        "1000 tables; margins {worst_margin:.1e}, odds ratios {worst_or:.1e}, oracle {worst_cell:.1e}, {t:.2?}"
    ))
}

fn association_preserved() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (seed, rows, cols) = random_fit_case(&mut rng);
        let fit = ipf_fit(&seed, &rows, &cols, &IpfConfig::default()).map_err(|e| e.to_string())?;
        worst = worst.max(association_distance(&seed, &fit.fitted).map_err(|e| e.to_string())?);
    }
    ensure(worst < 1e-6, || format!("association distance {worst:.3e}"))?;
    Ok(format!("100 instances; largest distance {worst:.1e}"))
}

fn random_hierarchy(rng: &mut ChaCha20Rng) -> (AreaHierarchy, Vec<usize>) {
    let k = rng.random_range(1..=5);
    let mut region = Vec::new();
    for r in 0..k {
        region.extend(std::iter::repeat_n(r, rng.random_range(1..=6)));
    }
    let h = AreaHierarchy::new(
        region
            .iter()
            .enumerate()
            .map(|(a, r)| (format!("a{a}"), format!("K{r}"))),
        None,
    )
    .unwrap();
    (h, region)
}

fn share_algebra() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(303);
    let (mut worst_sum, mut worst_inv, mut worst_cons) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let (h, region) = random_hierarchy(&mut rng);
        let n = region.len();
        let k = h.n_large();
        let census = random_table(&mut rng, n, 2, 1.0, 5000.0);
        let aux_values: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..1e5)).collect();
        let aux =
            MarginVector::new(ids("a", n), aux_values.clone(), MarginLevel::SmallArea, 1).unwrap();
        let e = |e: spree::Error| e.to_string();
        let fixed = fixed_shares(&census, &h).map_err(e)?;
        let dynamic = dynamic_shares(&aux, &h).map_err(e)?;
        let base = row_margins(&aggregate_to_large(&census, &h).map_err(e)?)
            .with_level(MarginLevel::LargeArea);
        let proj_values: Vec<f64> = base
            .values()
            .iter()
            .map(|v| v * rng.random_range(0.5..2.0))
            .collect();
        let proj =
            MarginVector::new(base.ids().to_vec(), proj_values, MarginLevel::LargeArea, 1).unwrap();
        let sel = select_by_change(&proj, &base, rng.random_range(0.0..=1.0)).map_err(e)?;
        let hybrid = hybrid_shares(&fixed, &dynamic, &sel).map_err(e)?;
        for s in [&fixed, &dynamic, &hybrid] {
            for v in s.large_sums() {
                worst_sum = worst_sum.max((v - 1.0).abs());
            }
        }

        let factors: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..100.0)).collect();
        let scaled: Vec<f64> = aux_values
            .iter()
            .zip(&region)
            .map(|(v, r)| v * factors[*r])
            .collect();
        let scaled = MarginVector::new(ids("a", n), scaled, MarginLevel::SmallArea, 1).unwrap();
        let rescaled = dynamic_shares(&scaled, &h).map_err(e)?;
        for (a, b) in dynamic.shares().iter().zip(rescaled.shares()) {
            worst_inv = worst_inv.max((a - b).abs());
        }

        for s in [&fixed, &dynamic, &hybrid] {
            let m = distribute(&proj, s).map_err(e)?;
            let mut sums = vec![0.0; k];
            for (v, r) in m.values().iter().zip(&region) {
                sums[*r] += v;
            }
            for (sum, total) in sums.iter().zip(proj.values()) {
                worst_cons = worst_cons.max(rel(*sum, *total));
            }
        }
    }
    ensure(worst_sum <= 1e-9, || {
        format!("share sum error {worst_sum:.3e}")
    })?;
    ensure(worst_inv <= 1e-12, || {
        format!("rescaling changed shares by {worst_inv:.3e}")
    })?;
    ensure(worst_cons <= 1e-12, || {
        format!("regional totals off by {worst_cons:.3e}")
    })?;
    Ok(format!(
        "1000 cases; sums {worst_sum:.1e}, rescaling {worst_inv:.1e}, conservation {worst_cons:.1e}"
    ))
}

const INDICATORS: [&str; 9] = [
    "child_mortality",
    "years_of_schooling",
    "school_attendance",
    "cooking_fuel",
    "sanitation",
    "drinking_water",
    "electricity",
    "housing",
    "assets",
];
// Weights in eighteenths.
const EIGHTEENTHS: [u64; 9] = [6, 3, 3, 1, 1, 1, 1, 1, 1];

fn household(id: usize, size: u32, deprived: &[bool]) -> HouseholdRecord {
    let deprivations: IndexMap<String, Deprivation> = INDICATORS
        .iter()
        .zip(deprived)
        .map(|(i, d)| {
            let flag = if *d {
                Deprivation::Deprived
            } else {
                Deprivation::NotDeprived
            };
            (i.to_string(), flag)
        })
        .collect();
    HouseholdRecord {
        household_id: format!("h{id}"),
        area_id: "a".into(),
        subgroup_id: "g".into(),
        size,
        weight: 1.0,
        deprivations,
    }
}

fn mpi_arithmetic() -> Outcome {
    let p = MpiProfile::nine_indicator();
    let e = |e: spree::Error| e.to_string();
    let mut flags = [false; 9];
    flags[0] = true;
    let child = deprivation_score(&household(0, 1, &flags), &p).map_err(e)?;
    let living = deprivation_score(
        &household(
            0,
            1,
            &[false, false, false, true, true, true, true, true, true],
        ),
        &p,
    )
    .map_err(e)?;
    ensure(child == 1.0 / 3.0, || {
        format!("child mortality alone scores {child:?}")
    })?;
    ensure(living == 1.0 / 3.0, || {
        format!("living standards score {living:?}")
    })?;
    ensure(is_poor(1.0 / 3.0, &p), || {
        "score 1/3 not classified poor".into()
    })?;
    let single = compute_mpi(&[household(0, 3, &flags)], &p, true).map_err(e)?;
    ensure(single.headcount_ratio == 1.0, || {
        "household at the cutoff not counted".into()
    })?;

    let mut rng = ChaCha20Rng::seed_from_u64(404);
    let (mut worst_phi, mut worst_d, mut worst_mpi) = (0.0f64, 0.0f64, 0.0f64);
    for case in 0..50 {
        let n = if case == 0 {
            200
        } else {
            rng.random_range(1..=200)
        };
        let rate = rng.random_range(0.05..0.6);
        let records: Vec<HouseholdRecord> = (0..n)
            .map(|i| {
                let flags: Vec<bool> = (0..9).map(|_| rng.random_bool(rate)).collect();
                household(i, rng.random_range(1..=12), &flags)
            })
            .collect();
        let res = compute_mpi(&records, &p, true).map_err(e)?;

        // One entry per person, scores in eighteenths.
        let mut persons = Vec::new();
        for r in &records {
            let score: u64 = INDICATORS
                .iter()
                .zip(EIGHTEENTHS)
                .filter(|(i, _)| r.deprivations[**i] == Deprivation::Deprived)
                .map(|(_, w)| w)
                .sum();
            persons.extend(std::iter::repeat_n(score, r.size as usize));
        }
        let poor: Vec<u64> = persons.iter().copied().filter(|s| *s >= 6).collect();
        let h = poor.len() as f64 / persons.len() as f64;
        ensure(res.headcount_ratio == h, || {
            format!("case {case}: H {} against {h}", res.headcount_ratio)
        })?;
        if !poor.is_empty() {
            let d = poor.iter().sum::<u64>() as f64 / (18 * poor.len()) as f64;
            worst_d = worst_d.max(rel(res.intensity, d));
            let phi: f64 = res
                .contributions
                .as_ref()
                .ok_or("no contributions with H > 0")?
                .iter()
                .sum();
            worst_phi = worst_phi.max((phi - 1.0).abs());
        }
        worst_mpi = worst_mpi.max(rel(res.mpi, res.headcount_ratio * res.intensity));
    }
    ensure(worst_mpi <= f64::EPSILON, || {
        format!("MPI differs from H·D by {worst_mpi:.3e}")
    })?;
    ensure(worst_phi <= 1e-9, || {
        format!("contributions off by {worst_phi:.3e}")
    })?;
    // Weights of 1/18 are not representable; D agrees to the last bits.
    ensure(worst_d <= 4.0 * f64::EPSILON, || {
        format!("intensity off by {worst_d:.3e}")
    })?;
    Ok(format!(
        "cutoff cases exact; 50 household sets up to 200 records, H exact, D {worst_d:.1e}, Σφ {worst_phi:.1e}"
    ))
}

struct BootstrapFixture {
    req: UpdateRequest,
    design: spree::uncertainty::SurveyDesign,
    pool: Vec<MarginVector>,
}

fn bootstrap_fixture() -> BootstrapFixture {
    let census = load_composition(&fixture("census_2013.csv"), 2013).unwrap();
    let h = load_hierarchy(&fixture("hierarchy.csv")).unwrap();
    let large = load_projections(&fixture("projections.csv")).unwrap()[&2016].clone();
    let col = load_margin(&fixture("col_margin_2016.csv"), MarginLevel::Category, 2016).unwrap();
    let aux = spree::ingest::load_aux(&fixture("aux.csv")).unwrap()[&2016].clone();
    let pool = load_aux_pool(&fixture("aux_pool.csv"), 2016).unwrap();
    let design = load_design(&fixture("design.csv")).unwrap();
    let req = UpdateRequest {
        shares: dynamic_shares(&aux, &h).unwrap(),
        seed: census,
        col_margin: col,
        large_totals: large,
        ipf: IpfConfig {
            tolerance: 1e-12,
            max_iterations: 10_000,
            ..IpfConfig::default()
        },
        reconcile: ReconcilePolicy::ScaleColToRow,
    };
    BootstrapFixture { req, design, pool }
}

// Poisson and multinomial census, pool draw, PSU resample, refit; the mean
// squared refit error per cell.
fn reference_mse(fx: &BootstrapFixture, point: &Composition, seed: u64, b_max: u64) -> Vec<f64> {
    let (n_areas, c) = (point.n_areas(), point.n_categories());
    let h = fx.req.shares.hierarchy();
    let region: Vec<&str> = point
        .area_ids()
        .iter()
        .map(|a| h.large_of(a).unwrap())
        .collect();
    let mut strata: Strata = Vec::new();
    for o in fx.design.observations() {
        let s = match strata.iter().position(|s| s.0 == o.stratum_id) {
            Some(i) => i,
            None => {
                strata.push((o.stratum_id.clone(), Vec::new()));
                strata.len() - 1
            }
        };
        let psus = &mut strata[s].1;
        let p = match psus.iter().position(|p| p.0 == o.psu_id) {
            Some(i) => i,
            None => {
                psus.push((o.psu_id.clone(), vec![0.0; c]));
                psus.len() - 1
            }
        };
        psus[p].1[point.category_index(&o.category_id).unwrap()] += o.weight;
    }
    let mut mse = vec![0.0; n_areas * c];
    for b in 0..b_max {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(b);
        let mut mult = Vec::new();
        for row in point.rows() {
            let lambda: f64 = row.iter().sum();
            let mut left = Poisson::new(lambda).unwrap().sample(&mut rng) as u64;
            let first = if left > 0 {
                Binomial::new(left, row[0] / lambda)
                    .unwrap()
                    .sample(&mut rng)
            } else {
                0
            };
            left -= first;
            mult.extend([first as f64, left as f64]);
        }
        let aux = &fx.pool[rng.random_range(0..fx.pool.len())];
        let mut region_aux: BTreeMap<&str, f64> = BTreeMap::new();
        for (a, k) in point.area_ids().iter().zip(&region) {
            *region_aux.entry(k).or_default() += aux.get(a).unwrap();
        }
        let rows: Vec<f64> = point
            .area_ids()
            .iter()
            .zip(&region)
            .map(|(a, k)| {
                fx.req.large_totals.get(k).unwrap() * (aux.get(a).unwrap() / region_aux[k])
            })
            .collect();
        let mut cols = vec![0.0; c];
        for (_, psus) in &strata {
            for _ in 0..psus.len() {
                let psu = &psus[rng.random_range(0..psus.len())].1;
                cols.iter_mut().zip(psu).for_each(|(v, x)| *v += x);
            }
        }
        let factor = rows.iter().sum::<f64>() / cols.iter().sum::<f64>();
        cols.iter_mut().for_each(|v| *v *= factor);
        let fitted = oracle_ipf(&mult, c, &rows, &cols, 1e-12);
        for (m, (f, y)) in mse.iter_mut().zip(fitted.iter().zip(&mult)) {
            *m += (f - y) * (f - y);
        }
    }
    mse.iter().map(|m| m / b_max as f64).collect()
}

fn bootstrap_fidelity() -> Outcome {
    let start = Instant::now();
    let fx = bootstrap_fixture();
    let e = |e: spree::Error| e.to_string();
    let degenerate = BootstrapConfig {
        replicates: 20,
        seed: 5,
        aux_resample: AuxResample::None,
        debug: DebugSwitches {
            poisson_at_mean: true,
            multinomial_at_mean: true,
            column_at_point: true,
        },
        ..BootstrapConfig::default()
    };
    let u = bootstrap_mse(&fx.req, &fx.design, Some(&fx.pool), &degenerate).map_err(e)?;
    ensure(u.mse.iter().all(|m| *m == 0.0), || {
        format!("degenerate MSE {:?}", u.mse)
    })?;

    let cfg = BootstrapConfig {
        replicates: 100,
        seed: 2016,
        ..BootstrapConfig::default()
    };
    let u = bootstrap_mse(&fx.req, &fx.design, Some(&fx.pool), &cfg).map_err(e)?;
    ensure(u.replicates_used == 100, || {
        format!("{} replicates dropped", u.replicates_dropped)
    })?;
    let point = spree_update(&fx.req).map_err(e)?.fitted;
    let reference = reference_mse(&fx, &point, cfg.seed, 100);
    let worst = u
        .mse
        .iter()
        .zip(&reference)
        .map(|(a, b)| rel(*a, *b))
        .fold(0.0, f64::max);
    ensure(worst <= 1e-9, || {
        format!("MSE differs from the reference by {worst:.3e}")
    })?;

    let again = bootstrap_mse(&fx.req, &fx.design, Some(&fx.pool), &cfg).map_err(e)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| e.to_string())?;
    let serial = pool
        .install(|| bootstrap_mse(&fx.req, &fx.design, Some(&fx.pool), &cfg))
        .map_err(e)?;
    let bits = |u: &spree::uncertainty::CellUncertainty| -> Vec<u64> {
        u.mse
            .iter()
            .chain(&u.estimate)
            .map(|v| v.to_bits())
            .collect()
    };
    ensure(
        u == again && u == serial && bits(&u) == bits(&serial),
        || "repeated runs differ".into(),
    )?;
    let t = within_time(start, Duration::from_secs(60))?;
    Ok(format!(
        "degenerate MSE 0; B=100 reference agreement {worst:.1e}; repeat and single-thread runs identical; {t:.2?}"
    ))
}

fn sampler_statistics() -> Outcome {
    let truth = Composition::from_rows(
        ["a1", "a2", "a3", "a4", "a5"],
        ["x", "y", "z"],
        &[
            vec![2.5, 7.5, 2.5],
            vec![100.0, 50.0, 50.0],
            vec![1000.0, 10.0, 490.0],
            vec![0.5, 0.5, 3.0],
            vec![3000.0, 4000.0, 3000.0],
        ],
        0,
    )
    .unwrap();
    let draws = 10_000;
    let mut sums = vec![0.0; truth.counts().len()];
    for i in 0..draws {
        let mut rng = spree::sampling::replicate_rng(606, i);
        let rep = replicate_census(&truth, &mut rng);
        sums.iter_mut().zip(rep.counts()).for_each(|(s, v)| *s += v);
    }
    let n = draws as f64;
    let mut worst = 0.0f64;
    for (a, row) in truth.rows().enumerate() {
        // The area total is Poisson(λ); each cell is Poisson(λπ).
        let lambda: f64 = row.iter().sum();
        let total: f64 = sums[a * 3..a * 3 + 3].iter().sum();
        worst = worst.max((total / n - lambda).abs() / (lambda / n).sqrt());
        for (j, mu) in row.iter().enumerate() {
            worst = worst.max((sums[a * 3 + j] / n - mu).abs() / (mu / n).sqrt());
        }
    }

    let probs = [0.1, 0.0, 0.6, 0.3];
    let trials = 40u64;
    let mut counts = [0.0; 4];
    let mut rng = spree::sampling::replicate_rng(607, 0);
    for _ in 0..draws {
        let x = spree::sampling::multinomial(&mut rng, trials, &probs);
        ensure(x.iter().sum::<u64>() == trials, || {
            "multinomial lost trials".into()
        })?;
        counts.iter_mut().zip(&x).for_each(|(s, v)| *s += *v as f64);
    }
    for (c, p) in counts.iter().zip(probs) {
        let mu = trials as f64 * p;
        if p == 0.0 {
            ensure(*c == 0.0, || "zero-probability category drawn".into())?;
            continue;
        }
        let sd = (trials as f64 * p * (1.0 - p) / n).sqrt();
        worst = worst.max((c / n - mu).abs() / sd);
    }
    ensure(worst <= 3.0, || format!("largest deviation {worst:.2}σ"))?;
    Ok(format!(
        "10⁴ draws on 5 areas; largest deviation {worst:.2}σ"
    ))
}

fn validation_pattern() -> Outcome {
    let start = Instant::now();
    let (plan, _) = load_plan(&fixture("shock.json")).map_err(|e| format!("{e:#}"))?;
    let report = run_simulation(&plan).map_err(|e| e.to_string())?;
    let abs_bias = |mode: ShareMode, q: usize| -> Result<f64, String> {
        report
            .strategy(mode)
            .and_then(|s| s.quartiles.iter().find(|x| x.quartile == q))
            .and_then(|x| x.share_mean_abs_bias_pct)
            .ok_or_else(|| format!("no {} summary for quartile {q}", mode.name()))
    };
    let (f3, d3) = (
        abs_bias(ShareMode::Fixed, 3)?,
        abs_bias(ShareMode::Dynamic, 3)?,
    );
    ensure(d3 < f3, || {
        format!("highest quartile: dynamic {d3:.3}% not below fixed {f3:.3}%")
    })?;
    let mut middle = Vec::new();
    for q in [1, 2] {
        let (f, d) = (
            abs_bias(ShareMode::Fixed, q)?,
            abs_bias(ShareMode::Dynamic, q)?,
        );
        ensure(f < d, || {
            format!("quartile {q}: fixed {f:.3}% not below dynamic {d:.3}%")
        })?;
        middle.push(format!("q{q} {f:.2}% vs {d:.2}%"));
    }
    let t = within_time(start, Duration::from_secs(300))?;
    Ok(format!(
        "R={}; highest fixed {f3:.2}% vs dynamic {d3:.2}%; fixed vs dynamic {}; {t:.2?}",
        report.replicates_completed,
        middle.join(", ")
    ))
}

fn metric_definitions() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(808);
    let (mut worst_b, mut worst_r) = (0.0f64, 0.0f64);
    for case in 0..1000 {
        let n = rng.random_range(1..=60);
        let truths: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1000.0)).collect();
        let est: Vec<f64> = truths
            .iter()
            .map(|t| t * rng.random_range(0.5..1.6))
            .collect();
        let b = relative_bias(&est, &truths)
            .map_err(|e| e.to_string())?
            .ok_or("no bias")?;
        let r = relative_rmse(&est, &truths)
            .map_err(|e| e.to_string())?
            .ok_or("no rmse")?;
        let mut sum_d = 0.0;
        let mut sum_d2 = 0.0;
        let mut sum_t = 0.0;
        for (e, t) in est.iter().zip(&truths) {
            sum_d += e - t;
            sum_d2 += (e - t) * (e - t);
            sum_t += t;
        }
        let nf = n as f64;
        let ob = sum_d / sum_t;
        let or = (sum_d2 / nf).sqrt() / (sum_t / nf);
        worst_b = worst_b.max((b - ob).abs() / ob.abs().max(1e-3));
        worst_r = worst_r.max(rel(r, or));
        ensure(r >= b.abs(), || {
            format!("case {case}: RMSE {r} below |bias| {b}")
        })?;
    }
    ensure(worst_b <= 1e-12 && worst_r <= 1e-12, || {
        format!("oracle disagreement: bias {worst_b:.3e}, rmse {worst_r:.3e}")
    })?;
    Ok(format!(
        "1000 instances; bias {worst_b:.1e}, rmse {worst_r:.1e}, RMSE ≥ |bias| throughout"
    ))
}

fn self_update_identity() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(909);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (h, region) = random_hierarchy(&mut rng);
        let c = rng.random_range(2..=5);
        let mut census = random_table(&mut rng, region.len(), c, 0.0, 5000.0);
        let counts: Vec<f64> = census
            .counts()
            .iter()
            .map(|v| {
                if rng.random_bool(0.1) {
                    0.0
                } else {
                    v.round() + 1.0
                }
            })
            .collect();
        census = census.with_counts(counts).unwrap();
        let e = |e: spree::Error| e.to_string();
        let req = UpdateRequest {
            large_totals: row_margins(&aggregate_to_large(&census, &h).map_err(e)?)
                .with_level(MarginLevel::LargeArea),
            col_margin: column_margins(&census),
            shares: fixed_shares(&census, &h).map_err(e)?,
            seed: census.clone(),
            ipf: IpfConfig::default(),
            reconcile: ReconcilePolicy::ScaleColToRow,
        };
        let fit = spree_update(&req).map_err(e)?;
        for (a, b) in fit.fitted.counts().iter().zip(census.counts()) {
            worst = worst.max((a - b).abs() / b.max(1.0));
        }
    }
    ensure(worst <= 1e-8, || {
        format!("self-update moved a cell by {worst:.3e}")
    })?;
    Ok(format!("100 instances; largest cell change {worst:.1e}"))
}

fn rectangle_oracle(px: &PixelTable, split: impl Fn(f64, f64) -> usize) -> [f64; 2] {
    let mut out = [0.0; 2];
    for p in px.pixels() {
        out[split(p.lon, p.lat)] += p.value;
    }
    out
}

fn pixel_aggregation() -> Outcome {
    let px = load_pixels(&fixture("pixels.csv")).map_err(|e| e.to_string())?;
    // Areas come back in id order: east/west and north/south.
    let cases: [(&str, Split); 2] = [
        (
            "grid_split_ew.geojson",
            Box::new(|x, _| usize::from(x < 5.0)),
        ),
        (
            "grid_split_ns.geojson",
            Box::new(|_, y| usize::from(y < 4.0)),
        ),
    ];
    let mut notes = Vec::new();
    for (file, split) in cases {
        let polys = load_polygons(&fixture(file)).map_err(|e| e.to_string())?;
        let agg = aggregate_pixels(&px, &polys, 2020).map_err(|e| e.to_string())?;
        let expected = rectangle_oracle(&px, split);
        ensure(agg.totals.values() == expected, || {
            format!(
                "{file}: {:?} against oracle {expected:?}",
                agg.totals.values()
            )
        })?;
        ensure(agg.unassigned_pixels == 0, || {
            format!("{file}: {} unassigned", agg.unassigned_pixels)
        })?;
        ensure(
            agg.totals.total() + agg.unassigned_mass == px.total(),
            || format!("{file}: mass lost"),
        )?;
        notes.push(format!("{:?}", agg.totals.values()));
    }

    // Partial cover: random dyadic pixels against a polygon with a hole.
    let mut rng = ChaCha20Rng::seed_from_u64(1010);
    let pixels = (0..2000)
        .map(|_| spree::ingest::Pixel {
            lon: rng.random_range(0..80) as f64 / 8.0 + 1.0 / 16.0,
            lat: rng.random_range(0..80) as f64 / 8.0 + 1.0 / 16.0,
            value: rng.random_range(0..1024) as f64 / 64.0,
        })
        .collect();
    let px = PixelTable::new(pixels).map_err(|e| e.to_string())?;
    let donut = spree::ingest::Polygon::new(vec![
        vec![[1.0, 1.0], [9.0, 1.0], [9.0, 9.0], [1.0, 9.0], [1.0, 1.0]],
        vec![[4.0, 4.0], [6.0, 4.0], [6.0, 6.0], [4.0, 6.0], [4.0, 4.0]],
    ])
    .map_err(|e| e.to_string())?;
    let polys = spree::ingest::AreaPolygonSet::new(vec![("d".into(), vec![donut])])
        .map_err(|e| e.to_string())?;
    let agg = aggregate_pixels(&px, &polys, 2020).map_err(|e| e.to_string())?;
    let inside = |x: f64, y: f64| {
        (1.0..=9.0).contains(&x)
            && (1.0..=9.0).contains(&y)
            && !((4.0..6.0).contains(&x) && (4.0..6.0).contains(&y))
    };
    let expected: f64 = px
        .pixels()
        .iter()
        .filter(|p| inside(p.lon, p.lat))
        .map(|p| p.value)
        .sum();
    ensure(agg.totals.values()[0] == expected, || {
        "partial cover disagrees with oracle".into()
    })?;
    ensure(
        agg.totals.total() + agg.unassigned_mass == px.total(),
        || "partial cover lost mass".into(),
    )?;
    Ok(format!(
        "ew {}, ns {}; 0 unassigned; partial cover conserved",
        notes[0], notes[1]
    ))
}

fn regional_headcount() -> Outcome {
    let c = load_composition(&fixture("dakar_2013.csv"), 2013).map_err(|e| e.to_string())?;
    let h = load_hierarchy(&fixture("dakar_hierarchy.csv")).map_err(|e| e.to_string())?;
    let by_head = headcount_from_composition(&c).map_err(|e| e.to_string())?;
    let female = by_head[c
        .area_index("dakar_female_head")
        .ok_or("no female-head row")?]
    .ok_or("empty row")?;
    let region = aggregate_to_large(&c, &h).map_err(|e| e.to_string())?;
    let overall =
        headcount_from_composition(&region).map_err(|e| e.to_string())?[0].ok_or("empty region")?;
    let (hf, ho) = (
        format!("{:.1}", female * 100.0),
        format!("{:.1}", overall * 100.0),
    );
    ensure(ho == "51.8" && hf == "50.3", || {
        format!("H {ho}%, H_female {hf}%")
    })?;
    Ok(format!("H {ho}%, H_female {hf}%"))
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_spree"))
        .args(args)
        .env("SOURCE_DATE_EPOCH", "1700000000")
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!(
            "spree {} failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

fn dir_bytes(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut files = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| e.to_string())? {
        let entry = entry.map_err(|e| e.to_string())?;
        let bytes = std::fs::read(entry.path()).map_err(|e| e.to_string())?;
        files.insert(entry.file_name().to_string_lossy().into_owned(), bytes);
    }
    Ok(files)
}

fn end_to_end_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let f = |n: &str| fixture(n).to_string_lossy().into_owned();
    let mut compared = 0;
    for (name, threads) in [("a", "1"), ("b", "4")] {
        let out = tmp.path().join(format!("validate_{name}"));
        run_cli(&[
            "--threads",
            threads,
            "validate",
            "--plan",
            &f("shock.json"),
            "--replicates",
            "100",
            "--out",
            &out.to_string_lossy(),
        ])?;
        let out = tmp.path().join(format!("bootstrap_{name}"));
        run_cli(&[
            "--threads",
            threads,
            "bootstrap",
            "--census",
            &f("census_2013.csv"),
            "--col-margin",
            &f("col_margin_2016.csv"),
            "--projections",
            &f("projections.csv"),
            "--hierarchy",
            &f("hierarchy.csv"),
            "--shares-mode",
            "dynamic",
            "--aux",
            &f("aux.csv"),
            "--aux-pool",
            &f("aux_pool.csv"),
            "--design",
            &f("design.csv"),
            "--year",
            "2016",
            "--base-year",
            "2013",
            "--unit",
            "persons",
            "--replicates",
            "100",
            "--seed",
            "11",
            "--out",
            &out.to_string_lossy(),
        ])?;
    }
    for kind in ["validate", "bootstrap"] {
        let a = dir_bytes(&tmp.path().join(format!("{kind}_a")))?;
        let b = dir_bytes(&tmp.path().join(format!("{kind}_b")))?;
        ensure(!a.is_empty() && a == b, || {
            let differing: Vec<&String> = a.keys().filter(|k| a.get(*k) != b.get(*k)).collect();
            format!("{kind} outputs differ: {differing:?}")
        })?;
        compared += a.len();
    }
    Ok(format!(
        "{compared} output files byte-identical across runs with 1 and 4 threads"
    ))
}

fn main() {
    let criteria: [(&str, Check); 12] = [
        ("IPF correctness", ipf_correctness),
        ("association structure preserved", association_preserved),
        ("share algebra", share_algebra),
        ("MPI arithmetic", mpi_arithmetic),
        ("bootstrap formula fidelity", bootstrap_fidelity),
        ("sampler statistics", sampler_statistics),
        ("validation pattern", validation_pattern),
        ("metric definitions", metric_definitions),
        ("self-update identity", self_update_identity),
        ("pixel aggregation", pixel_aggregation),
        ("regional headcount readout", regional_headcount),
        ("end-to-end determinism", end_to_end_determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail}", i + 1);
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
