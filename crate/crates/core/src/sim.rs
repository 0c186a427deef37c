//! Diffusion simulation study: closed-form solution, noisy gridded data,
//! replicate orchestration and the summary metrics.
//!
//! The test problem is `u_{x1} + θ₁ u_{x2} + θ₂ u = 0` on `[-3, 3] × [0, 1]`
//! with `u(x1, 0) = 1/(1 + x1²)`, whose characteristic solution is
//! `exp(−(θ₂/θ₁) x2) / (1 + (x1 − x2/θ₁)²)`.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::basis::{linspace, tensor_design, BasisSpec1D, PointSet, TensorBasis};
use crate::bayes::{self, ChainSettings, Hyperparams, MarginalModel};
use crate::error::{Error, Result};
use crate::freq::{fit_frequentist, ConstraintMode, FreqProblem, FreqSettings};
use crate::pde::{
    build_constraints, face_points, Condition, ConstraintSet, Multiplier, PdeSpec, PdeTerm,
    PenaltyAssembler, Target, DEFAULT_QUAD_POINTS,
};
use crate::rng::rng_for;

/// Closed-form solution of the diffusion test problem.
pub fn diffusion_solution(x1: f64, x2: f64, theta: &[f64]) -> Result<f64> {
    let (t1, t2) = (theta[0], theta[1]);
    if t1 == 0.0 {
        return Err(Error::invalid("θ₁ must be non-zero"));
    }
    let s = x1 - x2 / t1;
    Ok((-(t2 / t1) * x2).exp() / (1.0 + s * s))
}

/// `u_{x1} + θ₁ u_{x2} + θ₂ u = 0`.
pub fn diffusion_pde() -> PdeSpec {
    PdeSpec::new(
        2,
        vec![
            PdeTerm::new(Multiplier::constant(1.0), vec![1, 0]),
            PdeTerm::new(Multiplier::theta(1.0, 0, 1), vec![0, 1]),
            PdeTerm::new(Multiplier::theta(1.0, 1, 1), vec![0, 0]),
        ],
        vec![],
        vec!["theta1".into(), "theta2".into()],
    )
    .expect("diffusion PDE is well formed")
}

/// `u(x1, 0) = 1/(1 + x1²)` sampled on the knot grid of the initial face.
pub fn diffusion_initial_condition(basis: &TensorBasis) -> Condition {
    Condition {
        label: "initial".into(),
        points: face_points(basis, 1, false),
        deriv_orders: vec![0, 0],
        target: Target::function(|x| 1.0 / (1.0 + x[0] * x[0])),
    }
}

/// Estimator arm of the study.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Estimator {
    Freq(ConstraintMode),
    /// Marginal-posterior sampler, with soft conditions at `kappa` if given.
    Bayes { kappa: Option<f64> },
}

impl Estimator {
    pub fn label(&self) -> String {
        match self {
            Estimator::Freq(m) => format!("freq-{}", m.name()),
            Estimator::Bayes { kappa: None } => "bayes-none".into(),
            Estimator::Bayes { kappa: Some(_) } => "bayes-ls".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    pub theta_true: [f64; 2],
    pub noise_sds: Vec<f64>,
    /// Observation grid: points per axis over the domain.
    pub grid: [usize; 2],
    pub domain: [(f64, f64); 2],
    pub n_basis: [usize; 2],
    pub degree: usize,
    /// Optional interior knots per dimension, replacing the equidistant ones.
    pub knots: [Option<Vec<f64>>; 2],
    pub quad_points_per_span: usize,
    pub replicates: usize,
    pub estimators: Vec<Estimator>,
    pub seed: u64,
    pub theta0: [f64; 2],
    pub freq: FreqSettings,
    pub chain: ChainSettings,
    pub hyper: Hyperparams,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            theta_true: [0.5, 1.5],
            noise_sds: vec![0.01],
            grid: [50, 50],
            domain: [(-3.0, 3.0), (0.0, 1.0)],
            n_basis: [28, 13],
            degree: 3,
            knots: [None, None],
            quad_points_per_span: DEFAULT_QUAD_POINTS,
            replicates: 50,
            estimators: vec![Estimator::Freq(ConstraintMode::LeastSquares { kappa: 1e6 })],
            seed: 1,
            theta0: [1.0, 1.0],
            freq: FreqSettings::default(),
            chain: ChainSettings::default(),
            hyper: Hyperparams::default(),
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.theta_true[0] == 0.0 {
            return Err(Error::invalid("θ₁ must be non-zero"));
        }
        if self.noise_sds.iter().any(|&s| !(s >= 0.0) || !s.is_finite()) {
            return Err(Error::invalid("noise standard deviations must be finite and ≥ 0"));
        }
        if self.grid.iter().any(|&n| n < 2) {
            return Err(Error::invalid("the observation grid needs at least 2 points per axis"));
        }
        if self.replicates == 0 {
            return Err(Error::invalid("at least one replicate is required"));
        }
        Ok(())
    }

    pub fn basis(&self) -> Result<TensorBasis> {
        let dims = (0..2)
            .map(|d| {
                let (lo, hi) = self.domain[d];
                match &self.knots[d] {
                    Some(k) => BasisSpec1D::new(lo, hi, self.degree, k.clone()),
                    None => BasisSpec1D::equidistant(lo, hi, self.degree, self.n_basis[d]),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        TensorBasis::new(dims)
    }

    pub fn grid_axes(&self) -> Vec<Vec<f64>> {
        (0..2)
            .map(|d| linspace(self.domain[d].0, self.domain[d].1, self.grid[d]))
            .collect()
    }
}

/// Everything about the study that does not change across replicates.
#[derive(Debug, Clone)]
pub struct StudySetup {
    pub basis: TensorBasis,
    pub assembler: PenaltyAssembler,
    pub conditions: ConstraintSet,
    pub points: PointSet,
    pub truth: Vec<f64>,
}

impl StudySetup {
    pub fn new(config: &StudyConfig) -> Result<Self> {
        config.validate()?;
        let basis = config.basis()?;
        let assembler =
            PenaltyAssembler::new(&diffusion_pde(), &basis, config.quad_points_per_span)?;
        let conditions = build_constraints(&[diffusion_initial_condition(&basis)], &basis)?;
        let points = PointSet::Grid(config.grid_axes());
        let truth = points
            .rows()
            .iter()
            .map(|x| diffusion_solution(x[0], x[1], &config.theta_true))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            basis,
            assembler,
            conditions,
            points,
            truth,
        })
    }

    pub fn problem(&self, zeta: Vec<f64>) -> Result<FreqProblem> {
        let design = tensor_design(&self.basis, &self.points, &[0, 0])?;
        FreqProblem::new(
            self.assembler.clone(),
            design,
            zeta,
            Some(self.conditions.clone()),
        )
    }
}

/// Noisy observations for one (noise level, replicate) pair, in grid order
/// (dimension 1 fastest).
pub fn simulate_dataset(
    config: &StudyConfig,
    setup: &StudySetup,
    level: usize,
    replicate: usize,
) -> Result<Vec<f64>> {
    let sd = *config
        .noise_sds
        .get(level)
        .ok_or_else(|| Error::invalid(format!("noise level {level} not configured")))?;
    let mut rng = rng_for(config.seed, &[level as u64, replicate as u64]);
    Ok(setup
        .truth
        .iter()
        .map(|u| {
            let e: f64 = rng.sample(StandardNormal);
            u + sd * e
        })
        .collect())
}

/// Estimates from one replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateResult {
    pub estimator: String,
    pub level: usize,
    pub replicate: usize,
    /// θ₁, θ₂, τ (point estimates).
    pub estimate: Vec<f64>,
    pub gamma: f64,
    /// Posterior standard deviations (Bayesian only).
    pub post_sd: Option<Vec<f64>>,
    /// HPD intervals at 80% and 95% (Bayesian only).
    pub hpd80: Option<Vec<(f64, f64)>>,
    pub hpd95: Option<Vec<(f64, f64)>>,
    pub converged: bool,
}

pub fn run_replicate(
    config: &StudyConfig,
    setup: &StudySetup,
    estimator: Estimator,
    level: usize,
    replicate: usize,
) -> Result<ReplicateResult> {
    let zeta = simulate_dataset(config, setup, level, replicate)?;
    let problem = setup.problem(zeta)?;
    match estimator {
        Estimator::Freq(mode) => {
            let fit = fit_frequentist(&problem, mode, &config.theta0, &config.freq)?;
            Ok(ReplicateResult {
                estimator: estimator.label(),
                level,
                replicate,
                estimate: vec![fit.theta_hat[0], fit.theta_hat[1], fit.tau_hat],
                gamma: fit.gamma_hat,
                post_sd: None,
                hpd80: None,
                hpd95: None,
                converged: fit.converged,
            })
        }
        Estimator::Bayes { kappa } => {
            let model = MarginalModel::new(&problem, kappa, config.hyper.clone())?;
            let seed = crate::rng::derive_seed(config.seed, &[level as u64, replicate as u64, 1]);
            let chain = bayes::run_chain(&model, &problem, &config.chain, &config.theta0, seed)?;
            let summary = chain.summary()?;
            let pick = |v: &Vec<f64>| vec![v[0], v[1], v[3]];
            let pick_iv = |v: &Vec<(f64, f64)>| vec![v[0], v[1], v[3]];
            Ok(ReplicateResult {
                estimator: estimator.label(),
                level,
                replicate,
                estimate: pick(&summary.mean),
                gamma: summary.mean[2],
                post_sd: Some(pick(&summary.sd)),
                hpd80: Some(pick_iv(&summary.hpd80)),
                hpd95: Some(pick_iv(&summary.hpd95)),
                converged: true,
            })
        }
    }
}

/// One row of the metrics table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub estimator: String,
    pub noise_sd: f64,
    pub parameter: String,
    pub truth: f64,
    pub r_bias: f64,
    pub r_rmse: f64,
    pub r_std: f64,
    pub mpsd: Option<f64>,
    pub cp80: Option<f64>,
    pub cp95: Option<f64>,
    pub mean_gamma: f64,
    pub n_used: usize,
    pub n_failed: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTable {
    pub rows: Vec<MetricRow>,
    pub replicates: Vec<ReplicateResult>,
    pub failures: Vec<(String, usize, usize, String)>,
}

/// Relative metrics of estimates `est` for a parameter with true value `truth`:
/// `(R-BIAS %, R-RMSE, R-STD)` with the population standard deviation, so
/// that `R-RMSE² = (R-BIAS/100)² + R-STD²`.
pub fn relative_metrics(est: &[f64], truth: f64) -> (f64, f64, f64) {
    let n = est.len() as f64;
    let rel: Vec<f64> = est.iter().map(|e| (e - truth) / truth).collect();
    let bias = rel.iter().sum::<f64>() / n;
    let rmse = (rel.iter().map(|r| r * r).sum::<f64>() / n).sqrt();
    let mean = est.iter().sum::<f64>() / n;
    let std = (est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n).sqrt() / truth.abs();
    (100.0 * bias, rmse, std)
}

/// Runs every estimator on every replicate of every noise level and reduces
/// the estimates to the metrics table. Replicates run on the rayon pool.
pub fn run_study(config: &StudyConfig) -> Result<MetricsTable> {
    if config.replicates < 2 {
        return Err(Error::invalid("a study needs at least 2 replicates"));
    }
    let setup = StudySetup::new(config)?;
    let mut jobs = Vec::new();
    for (e, est) in config.estimators.iter().enumerate() {
        for level in 0..config.noise_sds.len() {
            for rep in 0..config.replicates {
                jobs.push((e, *est, level, rep));
            }
        }
    }
    let outcomes: Vec<_> = jobs
        .par_iter()
        .map(|&(e, est, level, rep)| (e, est, level, rep, run_replicate(config, &setup, est, level, rep)))
        .collect();

    let mut table = MetricsTable {
        rows: Vec::new(),
        replicates: Vec::new(),
        failures: Vec::new(),
    };
    for (e, est) in config.estimators.iter().enumerate() {
        for (level, &sd) in config.noise_sds.iter().enumerate() {
            let mut ok = Vec::new();
            let mut failed = 0;
            for (oe, _, ol, rep, res) in &outcomes {
                if *oe != e || *ol != level {
                    continue;
                }
                match res {
                    Ok(r) if r.converged => ok.push(r.clone()),
                    Ok(_) => {
                        failed += 1;
                        table
                            .failures
                            .push((est.label(), level, *rep, "not converged".into()));
                    }
                    Err(err) => {
                        failed += 1;
                        table.failures.push((est.label(), level, *rep, err.to_string()));
                    }
                }
            }
            if failed as f64 > 0.1 * config.replicates as f64 {
                return Err(Error::TooManyFailures {
                    failed,
                    total: config.replicates,
                });
            }
            ok.sort_by_key(|r| r.replicate);
            let tau_true = if sd > 0.0 { 1.0 / (sd * sd) } else { f64::NAN };
            let params = [
                ("theta1", config.theta_true[0]),
                ("theta2", config.theta_true[1]),
                ("tau", tau_true),
            ];
            let mean_gamma = ok.iter().map(|r| r.gamma).sum::<f64>() / ok.len().max(1) as f64;
            for (k, (name, truth)) in params.iter().enumerate() {
                if !truth.is_finite() {
                    continue;
                }
                let ests: Vec<f64> = ok.iter().map(|r| r.estimate[k]).collect();
                let (r_bias, r_rmse, r_std) = relative_metrics(&ests, *truth);
                let bayes = matches!(est, Estimator::Bayes { .. });
                let cover = |get: fn(&ReplicateResult) -> &Option<Vec<(f64, f64)>>| {
                    let hits = ok
                        .iter()
                        .filter(|r| {
                            get(r)
                                .as_ref()
                                .map(|iv| iv[k].0 <= *truth && *truth <= iv[k].1)
                                .unwrap_or(false)
                        })
                        .count();
                    100.0 * hits as f64 / ok.len().max(1) as f64
                };
                table.rows.push(MetricRow {
                    estimator: est.label(),
                    noise_sd: sd,
                    parameter: name.to_string(),
                    truth: *truth,
                    r_bias,
                    r_rmse,
                    r_std,
                    mpsd: bayes.then(|| {
                        ok.iter()
                            .map(|r| r.post_sd.as_ref().map(|s| s[k]).unwrap_or(f64::NAN))
                            .sum::<f64>()
                            / ok.len().max(1) as f64
                    }),
                    cp80: bayes.then(|| cover(|r| &r.hpd80)),
                    cp95: bayes.then(|| cover(|r| &r.hpd95)),
                    mean_gamma,
                    n_used: ok.len(),
                    n_failed: failed,
                });
            }
            table.replicates.extend(ok);
        }
    }
    Ok(table)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6e}")).unwrap_or_else(|| "NA".into())
}

impl MetricsTable {
    pub const HEADER: &'static str = "estimator,noise_sd,parameter,truth,r_bias_pct,r_rmse,r_std,mpsd,cp80,cp95,mean_gamma,n_used,n_failed";

    /// Delimited table; `prelude` lines are written first as `#` comments.
    pub fn write(&self, path: &Path, prelude: &[String]) -> Result<()> {
        let mut out = String::new();
        for p in prelude {
            out.push_str(&format!("# {p}\n"));
        }
        out.push_str("# r_bias_pct = 100*mean((est-truth)/truth); r_rmse = sqrt(mean(((est-truth)/truth)^2)); ");
        out.push_str("r_std = population sd(est)/|truth|; mpsd = mean posterior sd (absolute); ");
        out.push_str("cp80/cp95 = % of replicates whose HPD interval covers truth\n");
        out.push_str(Self::HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{:.6e},{:.6e},{:.6e},{},{},{},{:.6e},{},{}\n",
                r.estimator,
                r.noise_sd,
                r.parameter,
                r.truth,
                r.r_bias,
                r.r_rmse,
                r.r_std,
                opt(r.mpsd),
                opt(r.cp80),
                opt(r.cp95),
                r.mean_gamma,
                r.n_used,
                r.n_failed
            ));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Per-replicate estimates alongside the table.
    pub fn write_raw(&self, path: &Path, prelude: &[String]) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let io = |e| Error::io(path, e);
        for p in prelude {
            writeln!(w, "# {p}").map_err(io)?;
        }
        writeln!(w, "estimator,level,replicate,theta1,theta2,tau,gamma,sd_theta1,sd_theta2,sd_tau")
            .map_err(io)?;
        for r in &self.replicates {
            let sd = |k: usize| opt(r.post_sd.as_ref().map(|s| s[k]));
            writeln!(
                w,
                "{},{},{},{:.10e},{:.10e},{:.10e},{:.10e},{},{},{}",
                r.estimator,
                r.level,
                r.replicate,
                r.estimate[0],
                r.estimate[1],
                r.estimate[2],
                r.gamma,
                sd(0),
                sd(1),
                sd(2)
            )
            .map_err(io)?;
        }
        w.flush().map_err(io)
    }
}
