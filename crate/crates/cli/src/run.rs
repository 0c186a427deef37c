//! Dispatch of the three commands and the files they write.
//!
//! Every output file opens with `# config_hash=<sha256> seed=<n>`. Files:
//!
//! - `estimates.csv`: `parameter,estimate,lo,hi,method`; `NA` where no
//!   interval is available.
//! - `trace.csv` (frequentist): one row per profiling iteration.
//! - `chain.csv` (Bayesian): kept draws and log posterior.
//! - `surface.csv`: fitted `u` on the surface grid, dimension 1 fastest.
//! - `metrics.csv`, `replicates.csv` (simulate).
//! - `quotes.csv` (calibrate on synthetic quotes).
//! - `effective_config.toml`: the config with every default filled in.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use pdespline::basis::{tensor_design, BasisSpec1D, PointSet, TensorBasis};
use pdespline::bayes::{hpd_interval, run_chain, MarginalModel, PosteriorChain};
use pdespline::finance::{
    calibrate_volatility, ingest_options, synthetic_quotes, write_quotes, BsBasisSettings, BsDomain,
    CalibrationMode, CalibrationSettings, Coordinates, MAX_SKIPPED_FRACTION,
};
use pdespline::freq::{bootstrap, fit_frequentist, BootstrapSettings, ConstraintMode, FreqFit, FreqProblem};
use pdespline::pde::{build_constraints, face_points, Condition, PenaltyAssembler, Target};
use pdespline::rng::derive_seed;
use pdespline::sim::{run_study, simulate_dataset, StudySetup};

use crate::config::{
    build_pde, config_hash, effective_toml, eval_target, study_config, CalibrationSection,
    ConditionMode, Command, CoordinatesName, LoadedConfig, Method, RunConfig, Side, SurfaceSection,
};
use crate::error::CliError;
use crate::surface::{export_surface, surface_axes};

/// Seed streams derived from the run seed.
const STREAM_BOOTSTRAP: u64 = 1;
const STREAM_CHAIN: u64 = 2;
const STREAM_QUOTES: u64 = 3;

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Overrides `io.output_dir`.
    pub output_dir: Option<PathBuf>,
    pub verbose: bool,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub output_dir: PathBuf,
    pub files: Vec<PathBuf>,
    /// Problems that did not stop the run but make it a failure, such as a
    /// profiling loop that hit its iteration cap.
    pub warnings: Vec<String>,
}

struct Ctx {
    dir: PathBuf,
    prelude: Vec<String>,
    verbose: bool,
    files: Vec<PathBuf>,
    warnings: Vec<String>,
}

impl Ctx {
    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.files.push(p.clone());
        p
    }

    fn note(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("pdespline: {}", msg.as_ref());
        }
    }

    fn header(&self) -> String {
        self.prelude.iter().map(|p| format!("# {p}\n")).collect()
    }

    fn write(&mut self, name: &str, body: &str) -> Result<(), CliError> {
        let path = self.path(name);
        let text = format!("{}{body}", self.header());
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))
    }
}

pub fn run(loaded: &LoadedConfig, opts: &RunOptions) -> Result<RunReport, CliError> {
    let mut config = loaded.config.clone();
    let dir = match &opts.output_dir {
        Some(d) => {
            config.io.output_dir = d.display().to_string();
            d.clone()
        }
        None => loaded.resolve(&config.io.output_dir),
    };
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let hash = config_hash(&config)?;
    let mut ctx = Ctx {
        dir,
        prelude: vec![format!("config_hash={hash} seed={}", config.seed)],
        verbose: opts.verbose,
        files: vec![],
        warnings: vec![],
    };
    ctx.note(format!("{} (config_hash={hash})", config.command.name()));
    let effective = effective_toml(&config)?;
    ctx.write("effective_config.toml", &effective)?;

    match config.command {
        Command::Fit => run_fit(loaded, &config, &mut ctx)?,
        Command::Simulate => run_simulate(&config, &mut ctx)?,
        Command::Calibrate => run_calibrate(loaded, &config, &mut ctx)?,
    }
    Ok(RunReport {
        output_dir: ctx.dir,
        files: ctx.files,
        warnings: ctx.warnings,
    })
}

fn fmt(x: f64) -> String {
    format!("{x:.10e}")
}

struct EstimateRow {
    parameter: String,
    estimate: f64,
    interval: Option<(f64, f64)>,
    method: String,
}

fn estimates_body(rows: &[EstimateRow], level: f64) -> String {
    let mut out = format!("# intervals at level {level}\nparameter,estimate,lo,hi,method\n");
    for r in rows {
        let (lo, hi) = match r.interval {
            Some((a, b)) => (fmt(a), fmt(b)),
            None => ("NA".into(), "NA".into()),
        };
        let _ = writeln!(out, "{},{},{lo},{hi},{}", r.parameter, fmt(r.estimate), r.method);
    }
    out
}

fn trace_body(fit: &FreqFit, names: &[String]) -> String {
    let mut out = format!(
        "iter,{},tau,gamma,objective,rss,pen,trace_s,penalty_df,nm_evals\n",
        names.join(",")
    );
    for t in &fit.trace {
        let theta: Vec<String> = t.theta.iter().map(|&x| fmt(x)).collect();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            t.iter,
            theta.join(","),
            fmt(t.tau),
            fmt(t.gamma),
            fmt(t.objective),
            fmt(t.rss),
            fmt(t.pen),
            fmt(t.trace_s),
            fmt(t.penalty_df),
            t.nm_evals
        );
    }
    out
}

fn build_basis(c: &RunConfig) -> Result<TensorBasis, CliError> {
    let b = c.basis.as_ref().ok_or_else(|| CliError::Config("basis: missing".into()))?;
    let degree = b.degree.expect("degree is filled at parse time");
    let dims = b
        .dims
        .iter()
        .enumerate()
        .map(|(d, a)| {
            let spec = match (&a.n_basis, &a.knots) {
                (Some(n), _) => BasisSpec1D::equidistant(a.lo, a.hi, degree, *n),
                (None, Some(k)) => BasisSpec1D::new(a.lo, a.hi, degree, k.clone()),
                (None, None) => unreachable!("validated"),
            };
            spec.map_err(|e| CliError::Config(format!("basis.dims[{d}]: {e}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    TensorBasis::new(dims).map_err(|e| CliError::Config(format!("basis: {e}")))
}

fn build_conditions(c: &RunConfig, basis: &TensorBasis) -> Result<Vec<Condition>, CliError> {
    let p = basis.dim();
    let vars: Vec<String> = (1..=p).map(|d| format!("x{d}")).collect();
    c.conditions
        .iter()
        .enumerate()
        .map(|(i, sec)| {
            let points = match (&sec.face, &sec.points) {
                (Some(f), _) => face_points(basis, f.dim - 1, f.side == Side::Hi),
                (None, Some(pts)) => PointSet::Scatter(pts.clone()),
                (None, None) => unreachable!("validated"),
            };
            let target = match (&sec.target, &sec.values) {
                (_, Some(v)) => Target::Values(v.clone()),
                (Some(crate::config::Scalar::Number(x)), None) => Target::Constant(*x),
                (Some(crate::config::Scalar::Text(t)), None) => Target::Values(
                    eval_target(t, &vars, &points.rows())
                        .map_err(|m| CliError::Config(format!("conditions[{i}].target: {m}")))?,
                ),
                (None, None) => unreachable!("validated"),
            };
            Ok(Condition {
                label: sec.label.clone(),
                points,
                deriv_orders: sec.deriv.clone().expect("filled"),
                target,
            })
        })
        .collect()
}

/// Reads `x1,…,xp,value` rows; the header names are free.
pub fn read_observations(path: &Path, p: usize) -> Result<(Vec<Vec<f64>>, Vec<f64>), CliError> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(file);
    let mut points = Vec::new();
    let mut zeta = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(pdespline::Error::from)?;
        let line = rec.position().map(|p| p.line()).unwrap_or(i as u64 + 2);
        if rec.len() != p + 1 {
            return Err(pdespline::Error::Data(format!(
                "{}: line {line} has {} columns, expected {}",
                path.display(),
                rec.len(),
                p + 1
            ))
            .into());
        }
        let vals = rec
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| pdespline::Error::Data(format!("{}: line {line}: {e}", path.display())))?;
        zeta.push(vals[p]);
        points.push(vals[..p].to_vec());
    }
    if zeta.is_empty() {
        return Err(pdespline::Error::Data(format!("{}: no observations", path.display())).into());
    }
    Ok((points, zeta))
}

fn constraint_mode(c: &RunConfig) -> ConstraintMode {
    match c.estimator.conditions.unwrap_or(ConditionMode::None) {
        ConditionMode::None => ConstraintMode::None,
        ConditionMode::Ls => ConstraintMode::LeastSquares {
            kappa: c.estimator.kappa.expect("kappa is filled for ls"),
        },
        ConditionMode::Lagrange => ConstraintMode::Lagrange,
    }
}

fn bootstrap_settings(c: &RunConfig, replicates: usize) -> BootstrapSettings {
    BootstrapSettings {
        replicates,
        seed: derive_seed(c.seed, &[STREAM_BOOTSTRAP]),
        max_failed_fraction: c.estimator.freq.max_failed_fraction,
    }
}

fn chain_rows(chain: &PosteriorChain, level: f64, method: &str) -> Result<Vec<EstimateRow>, CliError> {
    let summary = chain.summary()?;
    chain
        .names
        .iter()
        .enumerate()
        .map(|(k, name)| {
            Ok(EstimateRow {
                parameter: name.clone(),
                estimate: summary.mean[k],
                interval: Some(hpd_interval(&chain.column(k), level)?),
                method: method.to_string(),
            })
        })
        .collect()
}

fn run_fit(loaded: &LoadedConfig, c: &RunConfig, ctx: &mut Ctx) -> Result<(), CliError> {
    let basis = build_basis(c)?;
    let p = basis.dim();
    let pde = build_pde(c.pde.as_ref().expect("validated"), p)?;
    let quad = c.basis.as_ref().expect("validated").quad_points;
    let assembler = PenaltyAssembler::new(&pde, &basis, quad)?;
    let input = loaded.resolve(c.io.input.as_deref().expect("validated"));
    let (points, zeta) = read_observations(&input, p)?;
    ctx.note(format!("{} observations from {}", zeta.len(), input.display()));
    let design = tensor_design(&basis, &PointSet::Scatter(points), &vec![0; p])?;
    let mode = constraint_mode(c);
    let cons = if mode == ConstraintMode::None {
        None
    } else {
        Some(build_constraints(&build_conditions(c, &basis)?, &basis)?)
    };
    let problem = FreqProblem::new(assembler, design, zeta, cons)?;
    let theta0 = c.estimator.theta0.clone().expect("validated");
    let names = pde.theta_names().to_vec();
    let level = c.estimator.level;
    let freq_settings = c.estimator.freq.settings();

    let c_hat = match c.estimator.method {
        Method::Freq => {
            let fit = fit_frequentist(&problem, mode, &theta0, &freq_settings)?;
            ctx.note(format!(
                "fit: theta={:?} gamma={:.4e} tau={:.4e} after {} iterations",
                fit.theta_hat,
                fit.gamma_hat,
                fit.tau_hat,
                fit.iterations()
            ));
            if !fit.converged {
                ctx.warnings.push(format!(
                    "profiling loop did not converge in {} iterations",
                    fit.iterations()
                ));
            }
            let reps = c.estimator.freq.bootstrap.unwrap_or(0);
            let boot = if reps > 0 {
                ctx.note(format!("bootstrap: {reps} replicates"));
                Some(bootstrap(&problem, &fit, &freq_settings, &bootstrap_settings(c, reps))?)
            } else {
                None
            };
            let method = format!("freq-{}", mode.name());
            let mut rows = Vec::new();
            for (k, name) in names.iter().enumerate() {
                rows.push(EstimateRow {
                    parameter: name.clone(),
                    estimate: fit.theta_hat[k],
                    interval: boot.as_ref().map(|b| b.interval(k, level)).transpose()?,
                    method: if boot.is_some() {
                        format!("{method} bootstrap")
                    } else {
                        method.clone()
                    },
                });
            }
            for (name, v) in [("gamma", fit.gamma_hat), ("tau", fit.tau_hat)] {
                rows.push(EstimateRow {
                    parameter: name.into(),
                    estimate: v,
                    interval: None,
                    method: method.clone(),
                });
            }
            ctx.write("estimates.csv", &estimates_body(&rows, level))?;
            ctx.write("trace.csv", &trace_body(&fit, &names))?;
            fit.c_hat
        }
        Method::Bayes => {
            let kappa = match mode {
                ConstraintMode::LeastSquares { kappa } => Some(kappa),
                _ => None,
            };
            let model = MarginalModel::new(&problem, kappa, c.estimator.priors.hyperparams())?;
            let settings = c.estimator.chain.settings();
            ctx.note(format!("chain: {} iterations", settings.iterations));
            let chain = run_chain(
                &model,
                &problem,
                &settings,
                &theta0,
                derive_seed(c.seed, &[STREAM_CHAIN]),
            )?;
            let method = format!("bayes-{} hpd", mode.name());
            let rows = chain_rows(&chain, level, &method)?;
            ctx.write("estimates.csv", &estimates_body(&rows, level))?;
            let path = ctx.path("chain.csv");
            chain.write_csv(&path, &ctx.prelude)?;
            let mean = &rows;
            let theta: Vec<f64> = mean[..names.len()].iter().map(|r| r.estimate).collect();
            let at = |n: &str| mean.iter().find(|r| r.parameter == n).map(|r| r.estimate);
            model.coefficient_mean(
                &theta,
                at("gamma").expect("gamma column"),
                at("tau").expect("tau column"),
                at("kappa").or(kappa),
            )?
        }
    };
    let surface = c.surface.as_ref().expect("filled");
    let axes = surface_axes(surface, &basis)?;
    let header: Vec<String> = (1..=p).map(|d| format!("x{d}")).collect();
    let path = ctx.path("surface.csv");
    export_surface(&c_hat, &basis, &axes, &header, "u_hat", &path, &ctx.prelude)?;
    Ok(())
}

fn run_simulate(c: &RunConfig, ctx: &mut Ctx) -> Result<(), CliError> {
    let study = study_config(c)?;
    let sec = c.study.as_ref().expect("filled");
    ctx.note(format!(
        "study: {} replicates x {} noise levels x {} estimators",
        study.replicates,
        study.noise_sds.len(),
        study.estimators.len()
    ));
    if sec.write_datasets {
        let setup = StudySetup::new(&study)?;
        let dir = ctx.dir.join("datasets");
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        let rows = setup.points.rows();
        for level in 0..study.noise_sds.len() {
            for rep in 0..study.replicates {
                let zeta = simulate_dataset(&study, &setup, level, rep)?;
                let mut body = String::from("x1,x2,zeta\n");
                for (x, z) in rows.iter().zip(&zeta) {
                    let _ = writeln!(body, "{},{},{}", x[0], x[1], fmt(*z));
                }
                ctx.write(&format!("datasets/level{level}_rep{rep}.csv"), &body)?;
            }
        }
    }
    let table = run_study(&study)?;
    for (est, level, rep, why) in &table.failures {
        ctx.note(format!("{est} level {level} replicate {rep} dropped: {why}"));
    }
    let path = ctx.path("metrics.csv");
    table.write(&path, &ctx.prelude)?;
    let path = ctx.path("replicates.csv");
    table.write_raw(&path, &ctx.prelude)?;
    Ok(())
}

fn calibration_settings(c: &RunConfig, cal: &CalibrationSection) -> CalibrationSettings {
    let coordinates = match cal.coordinates {
        CoordinatesName::Scaled => Coordinates::Scaled,
        CoordinatesName::Raw => Coordinates::Raw,
    };
    let mode = match c.estimator.method {
        Method::Freq => CalibrationMode::Freq {
            constraint: constraint_mode(c),
            settings: c.estimator.freq.settings(),
            bootstrap: bootstrap_settings(c, c.estimator.freq.bootstrap.expect("filled")),
        },
        Method::Bayes => CalibrationMode::Bayes {
            kappa: c.estimator.kappa.expect("filled"),
            chain: c.estimator.chain.settings(),
            hyper: c.estimator.priors.hyperparams(),
            seed: derive_seed(c.seed, &[STREAM_CHAIN]),
        },
    };
    CalibrationSettings {
        coordinates,
        rate: cal.rate,
        domain: cal.domain.as_ref().map(|d| BsDomain {
            x: (d.x[0], d.x[1]),
            tau: (d.tau[0], d.tau[1]),
        }),
        x_pad: cal.x_pad,
        basis: BsBasisSettings {
            interior_knots: [cal.interior_knots[0], cal.interior_knots[1]],
            degree: cal.degree,
            quad_points_per_span: cal.quad_points,
        },
        sigma0: cal.sigma0,
        level: c.estimator.level,
        mode,
    }
}

fn run_calibrate(loaded: &LoadedConfig, c: &RunConfig, ctx: &mut Ctx) -> Result<(), CliError> {
    let cal = c.calibration.as_ref().expect("filled");
    let quotes = match (&c.io.input, &cal.synthetic) {
        (Some(input), _) => {
            let path = loaded.resolve(input);
            let (quotes, skipped) = ingest_options(&path)?;
            for s in &skipped {
                ctx.note(format!("skipped {s}"));
            }
            if skipped.len() as f64 > MAX_SKIPPED_FRACTION * (quotes.len() + skipped.len()) as f64 {
                ctx.warnings.push(format!("{} quotes skipped from {}", skipped.len(), path.display()));
            }
            quotes
        }
        (None, Some(syn)) => {
            let quotes = synthetic_quotes(&syn.settings(derive_seed(c.seed, &[STREAM_QUOTES])))?;
            let path = ctx.path("quotes.csv");
            write_quotes(&path, &quotes)?;
            quotes
        }
        (None, None) => unreachable!("filled"),
    };
    ctx.note(format!("{} quotes", quotes.len()));
    let settings = calibration_settings(c, cal);
    let result = calibrate_volatility(&quotes, &settings)?;
    ctx.note(format!(
        "sigma={:.6} [{:.6}, {:.6}] max condition violation {:.3e}",
        result.sigma_hat, result.interval.0, result.interval.1, result.max_violation
    ));
    let mut rows = vec![EstimateRow {
        parameter: "sigma".into(),
        estimate: result.sigma_hat,
        interval: Some(result.interval),
        method: result.method.clone(),
    }];
    match &result.chain {
        Some(chain) => {
            rows.extend(chain_rows(chain, result.level, &result.method)?.into_iter().skip(1));
        }
        None => {
            for (name, v) in [("gamma", result.gamma_hat), ("tau", result.tau_hat)] {
                rows.push(EstimateRow {
                    parameter: name.into(),
                    estimate: v,
                    interval: None,
                    method: result.method.clone(),
                });
            }
        }
    }
    ctx.write("estimates.csv", &estimates_body(&rows, result.level))?;
    if let Some(fit) = &result.fit {
        if !fit.converged {
            ctx.warnings.push(format!(
                "profiling loop did not converge in {} iterations",
                fit.iterations()
            ));
        }
        ctx.write("trace.csv", &trace_body(fit, &["sigma".to_string()]))?;
    }
    if let Some(chain) = &result.chain {
        let path = ctx.path("chain.csv");
        chain.write_csv(&path, &ctx.prelude)?;
    }
    let surface: &SurfaceSection = c.surface.as_ref().expect("filled");
    let basis = &result.problem.basis;
    let axes = surface_axes(surface, basis)?;
    let (header, value) = match settings.coordinates {
        Coordinates::Scaled => (vec!["log_moneyness".to_string(), "tau".to_string()], "price_over_strike"),
        Coordinates::Raw => (vec!["spot".to_string(), "tau".to_string()], "price"),
    };
    let path = ctx.path("surface.csv");
    export_surface(&result.c_hat, basis, &axes, &header, value, &path, &ctx.prelude)?;
    Ok(())
}
