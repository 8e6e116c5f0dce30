//! Experiment pipelines behind the CLI subcommands: single runs, budget
//! comparisons, coverage studies, tail calibration, and byte-exact replay.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use fredholm_mc::confidence::{
    asymptotic_band, calibrate_c3, subgaussian_band, BandKind, ConfidenceBand,
};
use fredholm_mc::dtm::{dtm_allocate, dtm_solve, Allocation, SolutionEstimate};
use fredholm_mc::grid::{Domain, GridFunction};
use fredholm_mc::problem::{FredholmProblem, FreeTerm, Kernel};
use fredholm_mc::recursive::{geometric_allocate, recursive_solve};
use fredholm_mc::reference::{choose_depth, neumann_iterate, solve_reference};
use fredholm_mc::rng::{derived_seed, scope, Stream};

use crate::config::{
    validate_for_compare, validate_for_coverage, AllocationChoice, BandChoice, BandTarget,
    C3Choice, DepthPolicy, ExperimentConfig, FreeTermForm, KernelForm, Method,
};
use crate::report::{
    to_json, AllocationReport, BandSummary, CalibrationReport, CompareReport, CompareRow,
    CoverageReport, OperatorConstants, RunReport, Versions, SCHEMA_VERSION,
};
use crate::CliError;

/// Derivation labels for harness-level seeds.
mod harness_scope {
    pub const COMPARE_DTM: u64 = 0x10;
    pub const COMPARE_REC: u64 = 0x11;
    pub const CALIBRATION: u64 = 0x20;
}

pub fn build_problem(cfg: &ExperimentConfig) -> Result<FredholmProblem, CliError> {
    let domain = Domain::new(cfg.problem.dim, cfg.problem.grid)?;
    let kernel = match cfg.problem.kernel_form {
        KernelForm::Constant => Kernel::Constant {
            lambda: cfg.problem.kernel_lambda,
        },
        KernelForm::Separable => Kernel::Separable {
            lambda: cfg.problem.kernel_lambda,
        },
        KernelForm::GaussianSmooth => Kernel::GaussianSmooth {
            lambda: cfg.problem.kernel_lambda,
            width: cfg.problem.kernel_w.unwrap_or(1.0),
        },
    };
    let free_term = match cfg.problem.free_term_form {
        FreeTermForm::One => FreeTerm::One,
        FreeTermForm::Identity => FreeTerm::Identity,
    };
    Ok(FredholmProblem::new(domain, kernel, free_term)?)
}

pub fn resolve_depth(cfg: &ExperimentConfig, problem: &FredholmProblem) -> usize {
    match cfg.depth {
        DepthPolicy::Fixed(m) => m,
        DepthPolicy::TargetEps(eps) => choose_depth(problem, eps),
    }
}

pub fn build_allocation(
    cfg: &ExperimentConfig,
    problem: &FredholmProblem,
    depth: usize,
) -> Result<Allocation, CliError> {
    let alloc = match &cfg.allocation {
        AllocationChoice::Manual(counts) => Allocation::manual(counts.clone())?,
        AllocationChoice::Geometric => {
            let budget = cfg
                .budget
                .ok_or_else(|| CliError::Config("budget required".into()))?;
            geometric_allocate(depth, budget)?
        }
        AllocationChoice::DtmOptimal => {
            let budget = cfg
                .budget
                .ok_or_else(|| CliError::Config("budget required".into()))?;
            dtm_allocate(problem, depth, budget)?
        }
    };
    Ok(alloc)
}

fn constants_of(problem: &FredholmProblem) -> OperatorConstants {
    OperatorConstants {
        rho: problem.rho(),
        rho_bar: problem.rho_bar(),
        rho2: problem.rho2(),
        beta: problem.beta(),
    }
}

fn allocation_report(alloc: &Allocation) -> AllocationReport {
    AllocationReport {
        scheme: alloc.scheme().as_str().to_string(),
        counts: alloc.counts().to_vec(),
        dtm_draw_cost: alloc.dtm_draws(),
        recursive_draw_cost: alloc.recursive_draws(),
    }
}

fn method_solve(
    cfg: &ExperimentConfig,
    problem: &FredholmProblem,
    alloc: &Allocation,
    seed: u64,
) -> SolutionEstimate {
    match cfg.method {
        Method::Dtm => dtm_solve(problem, alloc, seed, cfg.replicates),
        Method::Recursive => recursive_solve(problem, alloc, seed, cfg.replicates),
        Method::Reference => unreachable!("reference runs do not sample"),
    }
}

struct BandTargetData {
    oracle: GridFunction,
    margin: f64,
    label: &'static str,
}

fn band_target_data(
    cfg: &ExperimentConfig,
    problem: &FredholmProblem,
    depth: usize,
    reference: Option<&GridFunction>,
) -> Option<BandTargetData> {
    match cfg.band_target {
        BandTarget::Xm => Some(BandTargetData {
            oracle: neumann_iterate(problem, depth).truncated,
            margin: 0.0,
            label: "xm",
        }),
        BandTarget::Z => reference.map(|z| BandTargetData {
            oracle: z.clone(),
            margin: problem.truncation_bound(depth),
            label: "z",
        }),
    }
}

struct BuiltBand {
    band: ConfidenceBand,
    c3: Option<f64>,
    kind_label: String,
    target_label: &'static str,
    covers: Option<bool>,
    margin: f64,
}

/// Resolves the tail constant: a fixed value or a pilot calibration.
fn resolve_c3(
    cfg: &ExperimentConfig,
    problem: &FredholmProblem,
    alloc: &Allocation,
) -> Result<f64, CliError> {
    match cfg.band_c3 {
        C3Choice::Fixed(v) => Ok(v),
        C3Choice::Calibrate => Ok(calibrate_c3(
            problem,
            alloc,
            cfg.band_pilot_trials,
            derived_seed(cfg.seed, harness_scope::CALIBRATION, 0),
        )?),
    }
}

fn build_band(
    cfg: &ExperimentConfig,
    problem: &FredholmProblem,
    depth: usize,
    estimate: &SolutionEstimate,
    reference: Option<&GridFunction>,
    c3: Option<f64>,
    trial_seed: u64,
) -> Result<Option<BuiltBand>, CliError> {
    let raw = match cfg.band {
        BandChoice::None => return Ok(None),
        BandChoice::Asymptotic => asymptotic_band(
            estimate,
            cfg.band_level,
            cfg.band_sims,
            Stream::root(trial_seed).child(scope::GAUSSIAN_SIM),
        )?,
        BandChoice::Subgaussian => {
            let c3 = c3.expect("tail constant resolved before banding");
            subgaussian_band(estimate, cfg.band_level, c3)?
        }
    };
    let target = band_target_data(cfg, problem, depth, reference);
    let (band, covers, margin, target_label) = match target {
        Some(t) => {
            let band = if t.margin > 0.0 {
                raw.inflate(t.margin)
            } else {
                raw
            };
            let covers = band.contains(&t.oracle)?;
            (band, Some(covers), t.margin, t.label)
        }
        None => (raw, None, 0.0, "z"),
    };
    let mut kind_label = band.kind.as_str().to_string();
    if margin > 0.0 {
        kind_label.push_str("_truncation_inflated");
    }
    Ok(Some(BuiltBand {
        band,
        c3: c3.filter(|v| v.is_finite()),
        kind_label,
        target_label,
        covers,
        margin,
    }))
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), contents)?;
    Ok(())
}

fn solution_csv(
    domain: &Domain,
    estimate: &GridFunction,
    reference: Option<&GridFunction>,
) -> String {
    let mut out = String::new();
    for a in 0..domain.dim() {
        let _ = write!(out, "t{},", a + 1);
    }
    out.push_str("estimate,reference,abs_error\n");
    for (i, &e) in estimate.values().iter().enumerate() {
        for c in domain.point(i) {
            let _ = write!(out, "{c},");
        }
        match reference {
            Some(r) => {
                let rv = r.values()[i];
                let _ = writeln!(out, "{e},{rv},{}", (e - rv).abs());
            }
            None => {
                let _ = writeln!(out, "{e},,");
            }
        }
    }
    out
}

fn band_csv(domain: &Domain, estimate: &GridFunction, built: &BuiltBand, level: f64) -> String {
    let mut out = String::new();
    for a in 0..domain.dim() {
        let _ = write!(out, "t{},", a + 1);
    }
    out.push_str("estimate,lower,upper,kind,level\n");
    for (i, &e) in estimate.values().iter().enumerate() {
        for c in domain.point(i) {
            let _ = write!(out, "{c},");
        }
        let _ = writeln!(
            out,
            "{e},{},{},{},{level}",
            built.band.lower.values()[i],
            built.band.upper.values()[i],
            built.kind_label,
        );
    }
    out
}

/// The `solve` pipeline: build problem, compute the reference oracle, run the
/// selected method, optionally band it, and write the three artifacts.
pub fn run_solve(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunReport, CliError> {
    let problem = build_problem(cfg)?;
    let reference = if cfg.compute_reference || cfg.method == Method::Reference {
        Some(solve_reference(&problem, cfg.reference_tol)?)
    } else {
        None
    };
    let reference_fn = reference.as_ref().map(|r| r.solution.clone());

    let (estimate_fn, depth, allocation, draws, band) = match cfg.method {
        Method::Reference => {
            let r = reference.as_ref().expect("reference always solved here");
            (r.solution.clone(), r.depth, None, 0u64, None)
        }
        _ => {
            let depth = resolve_depth(cfg, &problem);
            let alloc = build_allocation(cfg, &problem, depth)?;
            let c3 = if cfg.band == BandChoice::Subgaussian {
                Some(resolve_c3(cfg, &problem, &alloc)?)
            } else {
                None
            };
            let estimate = method_solve(cfg, &problem, &alloc, cfg.seed);
            let band = build_band(
                cfg,
                &problem,
                depth,
                &estimate,
                reference_fn.as_ref(),
                c3,
                cfg.seed,
            )?;
            (
                estimate.mean,
                depth,
                Some(alloc),
                estimate.draws.value(),
                band,
            )
        }
    };

    let grid_max_error = reference_fn
        .as_ref()
        .map(|r| estimate_fn.sup_distance(r))
        .transpose()?;

    let mut artifacts = vec!["solution.csv".to_string()];
    if band.is_some() {
        artifacts.push("band.csv".to_string());
    }
    artifacts.push("report.json".to_string());

    let report = RunReport {
        schema_version: SCHEMA_VERSION,
        command: "solve".into(),
        config: cfg.clone(),
        constants: constants_of(&problem),
        depth,
        allocation: allocation.as_ref().map(allocation_report),
        draws,
        grid_max_error,
        band: band.as_ref().map(|b| BandSummary {
            kind: b.kind_label.clone(),
            level: cfg.band_level,
            target: b.target_label.to_string(),
            half_width: b.band.half_width,
            quantile: b.band.half_width_scale,
            c3: b.c3,
            truncation_margin: b.margin,
            covers_oracle: b.covers,
        }),
        artifacts,
        versions: Versions::current(),
    };

    write_file(
        out_dir,
        "solution.csv",
        &solution_csv(problem.domain(), &estimate_fn, reference_fn.as_ref()),
    )?;
    if let Some(built) = &band {
        write_file(
            out_dir,
            "band.csv",
            &band_csv(problem.domain(), &estimate_fn, built, cfg.band_level),
        )?;
    }
    write_file(out_dir, "report.json", &to_json(&report))?;
    Ok(report)
}

/// Root-mean-square of the per-replicate sup-norm errors against the oracle.
fn sup_rmse(estimate: &SolutionEstimate, oracle: &GridFunction) -> f64 {
    let reps = estimate.replicate_values();
    let acc: f64 = reps
        .iter()
        .map(|g| {
            let e = g.sup_distance(oracle).expect("same grid");
            e * e
        })
        .sum();
    (acc / reps.len() as f64).sqrt()
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// The `compare` pipeline: at each sweep budget, measure the dependent-trial
/// error, then place the recursive budget at the pooled equal-error point of
/// the two `c / sqrt(N)` curves and verify the errors agree within 20 %.
pub fn run_compare(cfg: &ExperimentConfig, out_dir: &Path) -> Result<CompareReport, CliError> {
    validate_for_compare(cfg)?;
    let problem = build_problem(cfg)?;
    let depth = resolve_depth(cfg, &problem);
    let oracle = neumann_iterate(&problem, depth).truncated;
    let gate = 4u64 << (depth + 1);

    // First pass: the dependent-trial error at every sweep budget, plus one
    // recursive pilot per budget. Pooling the per-row error constants keeps a
    // single noisy row from misplacing its matched budget.
    struct DtmSide {
        alloc: Allocation,
        counter: u64,
        rmse: f64,
    }
    let mut dtm_side: Vec<Option<DtmSide>> = Vec::new();
    let mut dtm_consts = Vec::new();
    let mut rec_consts = Vec::new();
    for (row_idx, &budget) in cfg.sweep.iter().enumerate() {
        match dtm_allocate(&problem, depth, budget) {
            Ok(alloc) => {
                let seed = derived_seed(cfg.seed, harness_scope::COMPARE_DTM, row_idx as u64);
                let est = dtm_solve(&problem, &alloc, seed, cfg.replicates);
                let rmse = sup_rmse(&est, &oracle);
                dtm_consts.push(rmse * (budget as f64).sqrt());
                dtm_side.push(Some(DtmSide {
                    alloc,
                    counter: est.draws.value(),
                    rmse,
                }));
            }
            Err(_) => {
                dtm_side.push(None);
                continue;
            }
        }
        let pilot_budget = (budget / 2).max(gate);
        if let Ok(pilot_alloc) = geometric_allocate(depth, pilot_budget) {
            let seed = derived_seed(
                cfg.seed,
                harness_scope::COMPARE_REC,
                (row_idx as u64) * 8 + 7,
            );
            let est = recursive_solve(&problem, &pilot_alloc, seed, cfg.replicates);
            rec_consts.push(sup_rmse(&est, &oracle) * (pilot_budget as f64).sqrt());
        }
    }
    let pooled_ratio = if dtm_consts.is_empty() || rec_consts.is_empty() {
        1.0
    } else {
        let c_rec = median(&mut rec_consts);
        let c_dtm = median(&mut dtm_consts);
        (c_rec / c_dtm).powi(2)
    };

    let mut rows = Vec::new();
    for (row_idx, &budget) in cfg.sweep.iter().enumerate() {
        let Some(dtm) = &dtm_side[row_idx] else {
            rows.push(infeasible_row(budget));
            continue;
        };
        let mut rec_budget = ((budget as f64 * pooled_ratio).round() as u64).max(gate);
        let mut matched = false;
        let mut rec_snapshot = None;
        for attempt in 0..5u64 {
            let rec_alloc = match geometric_allocate(depth, rec_budget) {
                Ok(a) => a,
                Err(_) => break,
            };
            let rec_seed = derived_seed(
                cfg.seed,
                harness_scope::COMPARE_REC,
                (row_idx as u64) * 8 + attempt,
            );
            let rec_est = recursive_solve(&problem, &rec_alloc, rec_seed, cfg.replicates);
            let rec_rmse = sup_rmse(&rec_est, &oracle);
            let ratio = rec_rmse / dtm.rmse;
            rec_snapshot = Some((rec_alloc, rec_est, rec_rmse));
            if (0.8..=1.2).contains(&ratio) {
                matched = true;
                break;
            }
            let proposal = (rec_budget as f64 * ratio * ratio).round() as u64;
            rec_budget = proposal.max(gate);
        }

        match rec_snapshot {
            Some((rec_alloc, rec_est, rec_rmse)) => {
                let dtm_draws = dtm.alloc.dtm_draws();
                let rec_draws = rec_alloc.recursive_draws();
                rows.push(CompareRow {
                    budget,
                    status: if matched { "matched" } else { "unmatched" }.into(),
                    dtm_counts: dtm.alloc.counts().to_vec(),
                    dtm_draws,
                    dtm_draws_counter: dtm.counter,
                    dtm_rmse: dtm.rmse,
                    rec_budget,
                    rec_counts: rec_alloc.counts().to_vec(),
                    rec_draws,
                    rec_draws_counter: rec_est.draws.value(),
                    rec_rmse,
                    rmse_ratio: rec_rmse / dtm.rmse,
                    draw_ratio: rec_draws as f64 / dtm_draws as f64,
                });
            }
            None => rows.push(infeasible_row(budget)),
        }
    }

    let mut csv = String::from(
        "budget,status,dtm_draws,dtm_rmse,rec_budget,rec_draws,rec_rmse,rmse_ratio,draw_ratio\n",
    );
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{}",
            r.budget,
            r.status,
            r.dtm_draws,
            r.dtm_rmse,
            r.rec_budget,
            r.rec_draws,
            r.rec_rmse,
            r.rmse_ratio,
            r.draw_ratio
        );
    }

    let report = CompareReport {
        schema_version: SCHEMA_VERSION,
        command: "compare".into(),
        config: cfg.clone(),
        constants: constants_of(&problem),
        depth,
        rows,
        artifacts: vec!["compare.csv".into(), "report.json".into()],
        versions: Versions::current(),
    };
    write_file(out_dir, "compare.csv", &csv)?;
    write_file(out_dir, "report.json", &to_json(&report))?;
    Ok(report)
}

fn infeasible_row(budget: u64) -> CompareRow {
    CompareRow {
        budget,
        status: "infeasible".into(),
        dtm_counts: Vec::new(),
        dtm_draws: 0,
        dtm_draws_counter: 0,
        dtm_rmse: f64::NAN,
        rec_budget: 0,
        rec_counts: Vec::new(),
        rec_draws: 0,
        rec_draws_counter: 0,
        rec_rmse: f64::NAN,
        rmse_ratio: f64::NAN,
        draw_ratio: f64::NAN,
    }
}

/// The `coverage` pipeline: repeat the full solve-and-band experiment with
/// derived seeds and report how often the band contains the oracle target.
pub fn run_coverage(cfg: &ExperimentConfig, out_dir: &Path) -> Result<CoverageReport, CliError> {
    validate_for_coverage(cfg)?;
    let problem = build_problem(cfg)?;
    let depth = resolve_depth(cfg, &problem);
    let alloc = build_allocation(cfg, &problem, depth)?;
    let reference = if cfg.band_target == BandTarget::Z {
        Some(solve_reference(&problem, cfg.reference_tol)?.solution)
    } else {
        None
    };
    let target = band_target_data(cfg, &problem, depth, reference.as_ref())
        .expect("coverage validated the oracle");
    let c3 = if cfg.band == BandChoice::Subgaussian {
        Some(resolve_c3(cfg, &problem, &alloc)?)
    } else {
        None
    };

    struct TrialRow {
        seed: u64,
        sup_error: f64,
        half_width: f64,
        covered: bool,
    }

    let trials: Vec<Result<TrialRow, CliError>> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| {
            let trial_seed = derived_seed(cfg.seed, scope::TRIAL, t);
            let estimate = method_solve(cfg, &problem, &alloc, trial_seed);
            let built = build_band(
                cfg,
                &problem,
                depth,
                &estimate,
                reference.as_ref(),
                c3,
                trial_seed,
            )?
            .expect("coverage always requests a band");
            Ok(TrialRow {
                seed: trial_seed,
                sup_error: estimate.mean.sup_distance(&target.oracle)?,
                half_width: built.band.half_width,
                covered: built.covers.unwrap_or(false),
            })
        })
        .collect();

    let mut csv = String::from("trial,seed,sup_error,half_width,covered\n");
    let mut covered = 0u64;
    for (t, row) in trials.into_iter().enumerate() {
        let row = row?;
        if row.covered {
            covered += 1;
        }
        let _ = writeln!(
            csv,
            "{t},{},{},{},{}",
            row.seed, row.sup_error, row.half_width, row.covered
        );
    }

    let band_kind = match cfg.band {
        BandChoice::Asymptotic => BandKind::AsymptoticClt.as_str(),
        BandChoice::Subgaussian => BandKind::NonAsymptoticSubgaussian.as_str(),
        BandChoice::None => unreachable!("validated above"),
    };
    let report = CoverageReport {
        schema_version: SCHEMA_VERSION,
        command: "coverage".into(),
        config: cfg.clone(),
        constants: constants_of(&problem),
        depth,
        trials: cfg.trials,
        covered,
        coverage: covered as f64 / cfg.trials as f64,
        band_kind: band_kind.to_string(),
        level: cfg.band_level,
        c3: c3.filter(|v| v.is_finite()),
        artifacts: vec!["coverage.csv".into(), "report.json".into()],
        versions: Versions::current(),
    };
    write_file(out_dir, "coverage.csv", &csv)?;
    write_file(out_dir, "report.json", &to_json(&report))?;
    Ok(report)
}

/// The `calibrate` pipeline: fit the subgaussian tail constant by pilots.
pub fn run_calibrate(
    cfg: &ExperimentConfig,
    out_dir: &Path,
) -> Result<CalibrationReport, CliError> {
    let problem = build_problem(cfg)?;
    let depth = resolve_depth(cfg, &problem);
    let alloc = build_allocation(cfg, &problem, depth)?;
    let c3 = calibrate_c3(
        &problem,
        &alloc,
        cfg.band_pilot_trials,
        derived_seed(cfg.seed, harness_scope::CALIBRATION, 0),
    )?;
    let report = CalibrationReport {
        schema_version: SCHEMA_VERSION,
        command: "calibrate".into(),
        config: cfg.clone(),
        constants: constants_of(&problem),
        depth,
        pilot_trials: cfg.band_pilot_trials,
        c3: if c3.is_finite() { Some(c3) } else { None },
        artifacts: vec!["report.json".into()],
        versions: Versions::current(),
    };
    write_file(out_dir, "report.json", &to_json(&report))?;
    Ok(report)
}

/// Outcome of a replay: the regenerated artifacts and whether each matched.
#[derive(Debug)]
pub struct ReplayOutcome {
    pub checked: Vec<(String, bool)>,
}

impl ReplayOutcome {
    pub fn all_match(&self) -> bool {
        self.checked.iter().all(|(_, ok)| *ok)
    }
}

/// Re-executes the command recorded in a report and byte-compares every
/// artifact against the originals sitting next to the report.
pub fn run_replay(report_path: &Path, out_dir: &Path) -> Result<ReplayOutcome, CliError> {
    let text = fs::read_to_string(report_path)?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("cannot parse report: {e}")))?;
    let command = value
        .get("command")
        .and_then(|c| c.as_str())
        .ok_or_else(|| CliError::Config("report has no command field".into()))?
        .to_string();
    let config: ExperimentConfig = serde_json::from_value(
        value
            .get("config")
            .cloned()
            .ok_or_else(|| CliError::Config("report has no config echo".into()))?,
    )
    .map_err(|e| CliError::Config(format!("cannot parse config echo: {e}")))?;
    let artifacts: Vec<String> = value
        .get("artifacts")
        .and_then(|a| a.as_array())
        .map(|a| {
            a.iter()
                .filter_map(|v| v.as_str().map(str::to_string))
                .collect()
        })
        .unwrap_or_default();

    match command.as_str() {
        "solve" => {
            run_solve(&config, out_dir)?;
        }
        "compare" => {
            run_compare(&config, out_dir)?;
        }
        "coverage" => {
            run_coverage(&config, out_dir)?;
        }
        "calibrate" => {
            run_calibrate(&config, out_dir)?;
        }
        other => {
            return Err(CliError::Config(format!(
                "report records unknown command '{other}'"
            )))
        }
    }

    let original_dir = report_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut checked = Vec::new();
    for name in artifacts {
        let old = fs::read(original_dir.join(&name))?;
        let new = fs::read(out_dir.join(&name))?;
        checked.push((name, old == new));
    }
    Ok(ReplayOutcome { checked })
}
