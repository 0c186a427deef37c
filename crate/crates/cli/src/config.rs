//! Run configuration: TOML schema, defaults, validation and the effective
//! config echo.
//!
//! Every key is declared here. Unknown keys are collected across the whole
//! file and reported together. After parsing, command-dependent defaults are
//! written back into the struct so that the echoed effective config parses
//! to the same value.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use pdespline::basis::default_degree;
use pdespline::bayes::{ChainSettings, Hyperparams, ThetaPrior};
use pdespline::finance::{BsBasisSettings, SyntheticSettings};
use pdespline::freq::{BootstrapSettings, FreqSettings, DEFAULT_KAPPA};
use pdespline::optim::NelderMeadOptions;
use pdespline::pde::{Multiplier, PdeSpec, PdeTerm, Polynomial, ForcingTerm, DEFAULT_QUAD_POINTS};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Fit,
    Simulate,
    Calibrate,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Fit => "fit",
            Command::Simulate => "simulate",
            Command::Calibrate => "calibrate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: Command,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub basis: Option<BasisSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pde: Option<PdeSection>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub conditions: Vec<ConditionSection>,
    #[serde(default)]
    pub estimator: EstimatorSection,
    #[serde(default)]
    pub io: IoSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surface: Option<SurfaceSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub study: Option<StudySection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<CalibrationSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSection {
    /// Spline degree in every dimension; derived from the PDE order when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degree: Option<usize>,
    #[serde(default = "default_quad")]
    pub quad_points: usize,
    pub dims: Vec<AxisSection>,
}

fn default_quad() -> usize {
    DEFAULT_QUAD_POINTS
}

/// One axis: equidistant `n_basis` functions or explicit interior knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisSection {
    pub lo: f64,
    pub hi: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_basis: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knots: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdeSection {
    pub theta: Vec<String>,
    pub terms: Vec<TermSection>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub forcing: Vec<ForcingSection>,
}

/// `multiplier · Π_d poly_d(x_d) · ∂^deriv u`.
///
/// The multiplier is a product of factors separated by `*`: numbers and
/// parameter names with an optional integer power, e.g. `-0.5*sigma^2`.
/// `poly` lists ascending coefficients per dimension and defaults to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermSection {
    pub multiplier: Scalar,
    pub deriv: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub poly: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForcingSection {
    pub multiplier: Scalar,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub poly: Option<Vec<Vec<f64>>>,
}

/// A number, or text to be parsed (a multiplier product or an expression).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Number(f64),
    Text(String),
}

impl Scalar {
    fn text(&self) -> String {
        match self {
            Scalar::Number(x) => format!("{x}"),
            Scalar::Text(s) => s.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Lo,
    Hi,
}

/// Face `x_dim = lo|hi`, sampled on the knot grid of the other dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceSection {
    /// 1-based dimension.
    pub dim: usize,
    pub side: Side,
}

/// `∂^deriv u = target` on a face or at listed points.
///
/// `target` is a number or an expression in `x1, …, xp`; with explicit
/// `points`, `values` may give one target per point instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSection {
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deriv: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub face: Option<FaceSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<Scalar>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Freq,
    Bayes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditionMode {
    None,
    Ls,
    Lagrange,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorSection {
    pub method: Method,
    /// Defaults to `ls` when the run has conditions, `none` otherwise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub conditions: Option<ConditionMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta0: Option<Vec<f64>>,
    pub level: f64,
    pub freq: FreqSection,
    pub chain: ChainSection,
    pub priors: PriorSection,
}

impl Default for EstimatorSection {
    fn default() -> Self {
        Self {
            method: Method::Freq,
            conditions: None,
            kappa: None,
            theta0: None,
            level: 0.95,
            freq: FreqSection::default(),
            chain: ChainSection::default(),
            priors: PriorSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FreqSection {
    pub max_iter: usize,
    pub tol: f64,
    pub simplex_step: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau0: Option<f64>,
    pub nm_max_evals: usize,
    pub nm_xtol: f64,
    pub nm_ftol: f64,
    pub nm_stall_evals: usize,
    /// Bootstrap replicates for intervals; 0 for fit and 1000 for calibrate
    /// when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bootstrap: Option<usize>,
    pub max_failed_fraction: f64,
}

impl Default for FreqSection {
    fn default() -> Self {
        let f = FreqSettings::default();
        let b = BootstrapSettings::default();
        Self {
            max_iter: f.max_iter,
            tol: f.tol,
            simplex_step: f.simplex_step,
            gamma0: f.gamma0,
            tau0: f.tau0,
            nm_max_evals: f.nelder_mead.max_evals,
            nm_xtol: f.nelder_mead.xtol,
            nm_ftol: f.nelder_mead.ftol,
            nm_stall_evals: f.nelder_mead.stall_evals,
            bootstrap: None,
            max_failed_fraction: b.max_failed_fraction,
        }
    }
}

impl FreqSection {
    pub fn settings(&self) -> FreqSettings {
        FreqSettings {
            max_iter: self.max_iter,
            tol: self.tol,
            nelder_mead: NelderMeadOptions {
                max_evals: self.nm_max_evals,
                xtol: self.nm_xtol,
                ftol: self.nm_ftol,
                stall_evals: self.nm_stall_evals,
            },
            simplex_step: self.simplex_step,
            gamma0: self.gamma0,
            tau0: self.tau0,
        }
    }
}

/// Sampler settings. Chains always start from the frequentist fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChainSection {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub theta_step: f64,
    pub log_gamma_step: f64,
    pub log_tau_step: f64,
    pub log_kappa_step: f64,
    pub target_accept: f64,
    pub min_accept: f64,
    pub random_kappa: bool,
}

impl Default for ChainSection {
    fn default() -> Self {
        let c = ChainSettings::default();
        Self {
            iterations: c.iterations,
            burn_in: c.burn_in,
            thin: c.thin,
            theta_step: c.theta_step,
            log_gamma_step: c.log_gamma_step,
            log_tau_step: c.log_tau_step,
            log_kappa_step: c.log_kappa_step,
            target_accept: c.target_accept,
            min_accept: c.min_accept,
            random_kappa: c.random_kappa,
        }
    }
}

impl ChainSection {
    pub fn settings(&self) -> ChainSettings {
        ChainSettings {
            iterations: self.iterations,
            burn_in: self.burn_in,
            thin: self.thin,
            theta_step: self.theta_step,
            log_gamma_step: self.log_gamma_step,
            log_tau_step: self.log_tau_step,
            log_kappa_step: self.log_kappa_step,
            target_accept: self.target_accept,
            min_accept: self.min_accept,
            random_kappa: self.random_kappa,
            ..ChainSettings::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorSection {
    pub a_tau: f64,
    pub b_tau: f64,
    pub a_gamma: f64,
    pub b_gamma: f64,
    pub a_kappa: f64,
    pub b_kappa: f64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub theta: Vec<ThetaPriorSection>,
}

impl Default for PriorSection {
    fn default() -> Self {
        let h = Hyperparams::default();
        Self {
            a_tau: h.a_tau,
            b_tau: h.b_tau,
            a_gamma: h.a_gamma,
            b_gamma: h.b_gamma,
            a_kappa: h.a_kappa,
            b_kappa: h.b_kappa,
            theta: vec![],
        }
    }
}

impl PriorSection {
    pub fn hyperparams(&self) -> Hyperparams {
        Hyperparams {
            a_tau: self.a_tau,
            b_tau: self.b_tau,
            a_gamma: self.a_gamma,
            b_gamma: self.b_gamma,
            a_kappa: self.a_kappa,
            b_kappa: self.b_kappa,
            theta_prior: self.theta.iter().map(ThetaPriorSection::prior).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ThetaPriorSection {
    Flat,
    Positive,
    Normal { mean: f64, sd: f64 },
    Fixed { value: f64 },
}

impl ThetaPriorSection {
    pub fn prior(&self) -> ThetaPrior {
        match *self {
            ThetaPriorSection::Flat => ThetaPrior::Flat,
            ThetaPriorSection::Positive => ThetaPrior::Positive,
            ThetaPriorSection::Normal { mean, sd } => ThetaPrior::Normal { mean, sd },
            ThetaPriorSection::Fixed { value } => ThetaPrior::Fixed(value),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IoSection {
    /// Observations (fit) or quotes (calibrate); relative to the config file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<String>,
    pub output_dir: String,
}

impl Default for IoSection {
    fn default() -> Self {
        Self {
            input: None,
            output_dir: "out".into(),
        }
    }
}

/// Evaluation grid for the exported surface, in basis coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceSection {
    pub points: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lo: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hi: Option<Vec<f64>>,
}

const DEFAULT_SURFACE_POINTS: usize = 50;

/// The built-in diffusion study. Estimators are `freq-none`, `freq-ls`,
/// `freq-lagrange`, `bayes-none` and `bayes-ls`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudySection {
    pub theta_true: Vec<f64>,
    pub noise_sds: Vec<f64>,
    pub grid: Vec<usize>,
    pub domain: Vec<Vec<f64>>,
    pub n_basis: Vec<usize>,
    pub degree: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub knots_x1: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub knots_x2: Option<Vec<f64>>,
    pub quad_points: usize,
    pub replicates: usize,
    pub estimators: Vec<String>,
    pub kappa: f64,
    pub theta0: Vec<f64>,
    /// Also write every simulated data set under `datasets/`.
    pub write_datasets: bool,
}

impl Default for StudySection {
    fn default() -> Self {
        let s = pdespline::sim::StudyConfig::default();
        Self {
            theta_true: s.theta_true.to_vec(),
            noise_sds: s.noise_sds.clone(),
            grid: s.grid.to_vec(),
            domain: s.domain.iter().map(|&(a, b)| vec![a, b]).collect(),
            n_basis: s.n_basis.to_vec(),
            degree: s.degree,
            knots_x1: None,
            knots_x2: None,
            quad_points: s.quad_points_per_span,
            replicates: s.replicates,
            estimators: vec!["freq-ls".into()],
            kappa: DEFAULT_KAPPA,
            theta0: s.theta0.to_vec(),
            write_datasets: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoordinatesName {
    Scaled,
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSection {
    pub x: Vec<f64>,
    pub tau: Vec<f64>,
}

/// Black–Scholes volatility calibration. Quotes come from `io.input` or,
/// without one, from the `synthetic` generator seeded by the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationSection {
    pub coordinates: CoordinatesName,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub domain: Option<DomainSection>,
    pub x_pad: f64,
    pub interior_knots: Vec<usize>,
    pub degree: usize,
    pub quad_points: usize,
    pub sigma0: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSection>,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        let b = BsBasisSettings::default();
        Self {
            coordinates: CoordinatesName::Scaled,
            rate: None,
            domain: None,
            x_pad: 0.5,
            interior_knots: b.interior_knots.to_vec(),
            degree: b.degree,
            quad_points: b.quad_points_per_span,
            sigma0: 0.2,
            synthetic: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSection {
    pub sigma: f64,
    pub rate: f64,
    pub grid: Vec<usize>,
    pub moneyness: Vec<f64>,
    pub maturity: Vec<f64>,
    pub noise_sd: f64,
    pub strike: f64,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        let s = SyntheticSettings::default();
        Self {
            sigma: s.sigma,
            rate: s.rate,
            grid: s.grid.to_vec(),
            moneyness: vec![s.moneyness.0, s.moneyness.1],
            maturity: vec![s.maturity.0, s.maturity.1],
            noise_sd: s.noise_sd,
            strike: s.strike,
        }
    }
}

impl SyntheticSection {
    pub fn settings(&self, seed: u64) -> SyntheticSettings {
        SyntheticSettings {
            sigma: self.sigma,
            rate: self.rate,
            grid: [self.grid[0], self.grid[1]],
            moneyness: (self.moneyness[0], self.moneyness[1]),
            maturity: (self.maturity[0], self.maturity[1]),
            noise_sd: self.noise_sd,
            strike: self.strike,
            seed,
        }
    }
}

/// A parsed and validated config together with where it came from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    /// Directory relative paths in the config are resolved against.
    pub base_dir: PathBuf,
}

impl LoadedConfig {
    pub fn resolve(&self, path: &str) -> PathBuf {
        let p = Path::new(path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

pub fn parse_config(path: &Path) -> Result<LoadedConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let config = parse_config_str(&text)?;
    let base_dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    Ok(LoadedConfig { config, base_dir })
}

pub fn parse_config_str(text: &str) -> Result<RunConfig, CliError> {
    let de = toml::Deserializer::new(text);
    let mut unknown = BTreeSet::new();
    let parsed: Result<RunConfig, _> = serde_ignored::deserialize(de, |p| {
        // Optional sections show up as a `?` segment.
        unknown.insert(p.to_string().replace(".?", ""));
    });
    if !unknown.is_empty() {
        let keys: Vec<_> = unknown.into_iter().collect();
        return Err(CliError::Config(format!("unknown keys: {}", keys.join(", "))));
    }
    let mut config = parsed.map_err(|e| CliError::Config(e.to_string()))?;
    fill_defaults(&mut config)?;
    validate(&config)?;
    Ok(config)
}

fn cfg_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Writes command-dependent defaults back into the config. Idempotent.
fn fill_defaults(c: &mut RunConfig) -> Result<(), CliError> {
    let has_conditions = match c.command {
        Command::Fit => !c.conditions.is_empty(),
        Command::Calibrate => true,
        Command::Simulate => false,
    };
    if c.command != Command::Simulate {
        let mode = *c.estimator.conditions.get_or_insert(if has_conditions {
            ConditionMode::Ls
        } else {
            ConditionMode::None
        });
        if mode == ConditionMode::Ls && c.estimator.kappa.is_none() {
            c.estimator.kappa = Some(DEFAULT_KAPPA);
        }
    }
    match c.command {
        Command::Fit => {
            c.estimator.freq.bootstrap.get_or_insert(0);
            let pde_order = match &c.pde {
                Some(p) => p.terms.iter().map(|t| t.deriv.iter().sum::<usize>()).max().unwrap_or(0),
                None => 0,
            };
            if let Some(b) = &mut c.basis {
                b.degree.get_or_insert(default_degree(pde_order));
                if c.surface.is_none() {
                    c.surface = Some(SurfaceSection {
                        points: vec![DEFAULT_SURFACE_POINTS; b.dims.len()],
                        lo: None,
                        hi: None,
                    });
                }
            }
            for cond in &mut c.conditions {
                if cond.deriv.is_none() {
                    let p = c.basis.as_ref().map(|b| b.dims.len()).unwrap_or(0);
                    cond.deriv = Some(vec![0; p]);
                }
            }
        }
        Command::Simulate => {
            c.study.get_or_insert_with(StudySection::default);
        }
        Command::Calibrate => {
            c.estimator.freq.bootstrap.get_or_insert(BootstrapSettings::default().replicates);
            let cal = c.calibration.get_or_insert_with(CalibrationSection::default);
            if c.io.input.is_none() && cal.synthetic.is_none() {
                cal.synthetic = Some(SyntheticSection::default());
            }
            if c.surface.is_none() {
                c.surface = Some(SurfaceSection {
                    points: vec![DEFAULT_SURFACE_POINTS; 2],
                    lo: None,
                    hi: None,
                });
            }
        }
    }
    Ok(())
}

fn check_pos(path: &str, v: f64) -> Result<(), CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(cfg_err(format!("{path}: must be positive and finite, got {v}")))
    }
}

fn check_len<T>(path: &str, v: &[T], n: usize) -> Result<(), CliError> {
    if v.len() == n {
        Ok(())
    } else {
        Err(cfg_err(format!("{path}: expected {n} entries, got {}", v.len())))
    }
}

fn unused(section: &str, command: Command) -> CliError {
    cfg_err(format!("{section}: not used by command '{}'", command.name()))
}

pub fn validate(c: &RunConfig) -> Result<(), CliError> {
    if c.seed > i64::MAX as u64 {
        return Err(cfg_err(format!("seed: must not exceed {}", i64::MAX)));
    }
    if c.io.output_dir.is_empty() {
        return Err(cfg_err("io.output_dir: must not be empty"));
    }
    let e = &c.estimator;
    if !(e.level > 0.0 && e.level < 1.0) {
        return Err(cfg_err(format!("estimator.level: must lie in (0, 1), got {}", e.level)));
    }
    if let Some(k) = e.kappa {
        check_pos("estimator.kappa", k)?;
    }
    check_pos("estimator.freq.tol", e.freq.tol)?;
    check_pos("estimator.freq.simplex_step", e.freq.simplex_step)?;
    if e.freq.max_iter == 0 {
        return Err(cfg_err("estimator.freq.max_iter: must be at least 1"));
    }
    e.chain
        .settings()
        .validate()
        .map_err(|err| cfg_err(format!("estimator.chain: {err}")))?;

    match c.command {
        Command::Fit => validate_fit(c),
        Command::Simulate => validate_simulate(c),
        Command::Calibrate => validate_calibrate(c),
    }
}

fn validate_fit(c: &RunConfig) -> Result<(), CliError> {
    if c.study.is_some() {
        return Err(unused("study", c.command));
    }
    if c.calibration.is_some() {
        return Err(unused("calibration", c.command));
    }
    let basis = c.basis.as_ref().ok_or_else(|| cfg_err("basis: required for 'fit'"))?;
    let pde_sec = c.pde.as_ref().ok_or_else(|| cfg_err("pde: required for 'fit'"))?;
    if c.io.input.is_none() {
        return Err(cfg_err("io.input: required for 'fit'"));
    }
    let p = basis.dims.len();
    if p == 0 {
        return Err(cfg_err("basis.dims: at least one dimension is required"));
    }
    for (d, a) in basis.dims.iter().enumerate() {
        let path = format!("basis.dims[{d}]");
        if !(a.lo < a.hi) {
            return Err(cfg_err(format!("{path}: need lo < hi, got {} and {}", a.lo, a.hi)));
        }
        if a.n_basis.is_some() == a.knots.is_some() {
            return Err(cfg_err(format!("{path}: give exactly one of n_basis or knots")));
        }
    }
    if basis.quad_points < 2 {
        return Err(cfg_err("basis.quad_points: must be at least 2"));
    }
    let pde = build_pde(pde_sec, p)?;
    let e = &c.estimator;
    let theta0 = e
        .theta0
        .as_ref()
        .ok_or_else(|| cfg_err("estimator.theta0: required for 'fit'"))?;
    if theta0.len() != pde.n_theta() {
        return Err(cfg_err(format!(
            "estimator.theta0: expected {} values ({}), got {}",
            pde.n_theta(),
            pde.theta_names().join(", "),
            theta0.len()
        )));
    }
    let mode = e.conditions.unwrap_or(ConditionMode::None);
    if mode != ConditionMode::None && c.conditions.is_empty() {
        return Err(cfg_err(format!(
            "estimator.conditions: mode '{}' needs at least one [[conditions]] entry",
            mode_name(mode)
        )));
    }
    if e.method == Method::Bayes {
        if mode == ConditionMode::Lagrange {
            return Err(cfg_err("estimator.conditions: 'lagrange' is frequentist only; use 'ls' or 'none'"));
        }
        if e.priors.theta.len() != pde.n_theta() {
            return Err(cfg_err(format!(
                "estimator.priors.theta: one prior per parameter is required ({} declared, {} given)",
                pde.n_theta(),
                e.priors.theta.len()
            )));
        }
        e.priors
            .hyperparams()
            .validate(pde.n_theta())
            .map_err(|err| cfg_err(format!("estimator.priors: {err}")))?;
    }
    let var_names: Vec<String> = (1..=p).map(|d| format!("x{d}")).collect();
    for (i, cond) in c.conditions.iter().enumerate() {
        let path = format!("conditions[{i}]");
        let deriv = cond.deriv.as_deref().unwrap_or(&[]);
        check_len(&format!("{path}.deriv"), deriv, p)?;
        match (&cond.face, &cond.points) {
            (Some(f), None) => {
                if f.dim == 0 || f.dim > p {
                    return Err(cfg_err(format!("{path}.face.dim: must lie in 1..={p}, got {}", f.dim)));
                }
            }
            (None, Some(pts)) => {
                if pts.is_empty() {
                    return Err(cfg_err(format!("{path}.points: must not be empty")));
                }
                for (j, x) in pts.iter().enumerate() {
                    check_len(&format!("{path}.points[{j}]"), x, p)?;
                }
            }
            _ => return Err(cfg_err(format!("{path}: give exactly one of face or points"))),
        }
        match (&cond.target, &cond.values) {
            (Some(t), None) => {
                eval_target(&t.text(), &var_names, &[])
                    .map_err(|m| cfg_err(format!("{path}.target: {m}")))?;
            }
            (None, Some(v)) => {
                let n = cond.points.as_ref().map(|p| p.len()).ok_or_else(|| {
                    cfg_err(format!("{path}.values: only allowed with explicit points"))
                })?;
                check_len(&format!("{path}.values"), v, n)?;
            }
            _ => return Err(cfg_err(format!("{path}: give exactly one of target or values"))),
        }
    }
    let s = c.surface.as_ref().ok_or_else(|| cfg_err("surface: missing"))?;
    validate_surface(s, p)
}

fn validate_surface(s: &SurfaceSection, p: usize) -> Result<(), CliError> {
    check_len("surface.points", &s.points, p)?;
    if s.points.iter().any(|&n| n == 0) {
        return Err(cfg_err("surface.points: every axis needs at least one point"));
    }
    if let Some(lo) = &s.lo {
        check_len("surface.lo", lo, p)?;
    }
    if let Some(hi) = &s.hi {
        check_len("surface.hi", hi, p)?;
    }
    Ok(())
}

fn validate_simulate(c: &RunConfig) -> Result<(), CliError> {
    for (name, present) in [
        ("basis", c.basis.is_some()),
        ("pde", c.pde.is_some()),
        ("conditions", !c.conditions.is_empty()),
        ("surface", c.surface.is_some()),
        ("calibration", c.calibration.is_some()),
        ("io.input", c.io.input.is_some()),
        ("estimator.conditions", c.estimator.conditions.is_some()),
        ("estimator.kappa", c.estimator.kappa.is_some()),
        ("estimator.theta0", c.estimator.theta0.is_some()),
        ("estimator.freq.bootstrap", c.estimator.freq.bootstrap.is_some()),
    ] {
        if present {
            return Err(unused(name, c.command));
        }
    }
    let s = c.study.as_ref().expect("filled");
    check_len("study.theta_true", &s.theta_true, 2)?;
    check_len("study.grid", &s.grid, 2)?;
    check_len("study.domain", &s.domain, 2)?;
    for (d, r) in s.domain.iter().enumerate() {
        check_len(&format!("study.domain[{d}]"), r, 2)?;
    }
    check_len("study.n_basis", &s.n_basis, 2)?;
    check_len("study.theta0", &s.theta0, 2)?;
    check_pos("study.kappa", s.kappa)?;
    if s.estimators.is_empty() {
        return Err(cfg_err("study.estimators: at least one estimator is required"));
    }
    let mut any_bayes = false;
    for (i, name) in s.estimators.iter().enumerate() {
        let est = parse_estimator(name, s.kappa)
            .ok_or_else(|| cfg_err(format!("study.estimators[{i}]: unknown estimator '{name}'")))?;
        any_bayes |= matches!(est, pdespline::sim::Estimator::Bayes { .. });
    }
    if any_bayes && c.estimator.priors.theta.len() != 2 {
        return Err(cfg_err(
            "estimator.priors.theta: Bayesian study arms need one prior per parameter (2)",
        ));
    }
    let study = study_config(c).map_err(|e| cfg_err(format!("study: {e}")))?;
    study.validate().map_err(|e| cfg_err(format!("study: {e}")))?;
    study.basis().map_err(|e| cfg_err(format!("study: {e}")))?;
    if study.replicates < 2 {
        return Err(cfg_err("study.replicates: at least 2 are required"));
    }
    Ok(())
}

fn validate_calibrate(c: &RunConfig) -> Result<(), CliError> {
    for (name, present) in [
        ("basis", c.basis.is_some()),
        ("pde", c.pde.is_some()),
        ("conditions", !c.conditions.is_empty()),
        ("study", c.study.is_some()),
        ("estimator.theta0", c.estimator.theta0.is_some()),
    ] {
        if present {
            return Err(unused(name, c.command));
        }
    }
    let cal = c.calibration.as_ref().expect("filled");
    if c.io.input.is_some() && cal.synthetic.is_some() {
        return Err(cfg_err("calibration.synthetic: not allowed together with io.input"));
    }
    check_len("calibration.interior_knots", &cal.interior_knots, 2)?;
    check_pos("calibration.sigma0", cal.sigma0)?;
    if !(cal.x_pad >= 0.0) {
        return Err(cfg_err("calibration.x_pad: must be non-negative"));
    }
    if let Some(d) = &cal.domain {
        check_len("calibration.domain.x", &d.x, 2)?;
        check_len("calibration.domain.tau", &d.tau, 2)?;
    }
    if let Some(s) = &cal.synthetic {
        check_len("calibration.synthetic.grid", &s.grid, 2)?;
        check_len("calibration.synthetic.moneyness", &s.moneyness, 2)?;
        check_len("calibration.synthetic.maturity", &s.maturity, 2)?;
        check_pos("calibration.synthetic.sigma", s.sigma)?;
    }
    let mode = c.estimator.conditions.unwrap_or(ConditionMode::Ls);
    if c.estimator.method == Method::Bayes && mode != ConditionMode::Ls {
        return Err(cfg_err("estimator.conditions: Bayesian calibration uses 'ls' conditions"));
    }
    if c.estimator.method == Method::Freq && c.estimator.freq.bootstrap == Some(0) {
        return Err(cfg_err("estimator.freq.bootstrap: calibration needs at least 1 replicate for its interval"));
    }
    if !c.estimator.priors.theta.is_empty() {
        check_len("estimator.priors.theta", &c.estimator.priors.theta, 1)?;
    }
    validate_surface(c.surface.as_ref().expect("filled"), 2)
}

pub fn mode_name(m: ConditionMode) -> &'static str {
    match m {
        ConditionMode::None => "none",
        ConditionMode::Ls => "ls",
        ConditionMode::Lagrange => "lagrange",
    }
}

pub fn parse_estimator(name: &str, kappa: f64) -> Option<pdespline::sim::Estimator> {
    use pdespline::freq::ConstraintMode;
    use pdespline::sim::Estimator;
    Some(match name {
        "freq-none" => Estimator::Freq(ConstraintMode::None),
        "freq-ls" => Estimator::Freq(ConstraintMode::LeastSquares { kappa }),
        "freq-lagrange" => Estimator::Freq(ConstraintMode::Lagrange),
        "bayes-none" => Estimator::Bayes { kappa: None },
        "bayes-ls" => Estimator::Bayes { kappa: Some(kappa) },
        _ => return None,
    })
}

pub fn study_config(c: &RunConfig) -> Result<pdespline::sim::StudyConfig, CliError> {
    let s = c.study.as_ref().ok_or_else(|| cfg_err("study: missing"))?;
    let estimators = s
        .estimators
        .iter()
        .map(|n| parse_estimator(n, s.kappa).ok_or_else(|| cfg_err(format!("unknown estimator '{n}'"))))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(pdespline::sim::StudyConfig {
        theta_true: [s.theta_true[0], s.theta_true[1]],
        noise_sds: s.noise_sds.clone(),
        grid: [s.grid[0], s.grid[1]],
        domain: [(s.domain[0][0], s.domain[0][1]), (s.domain[1][0], s.domain[1][1])],
        n_basis: [s.n_basis[0], s.n_basis[1]],
        degree: s.degree,
        knots: [s.knots_x1.clone(), s.knots_x2.clone()],
        quad_points_per_span: s.quad_points,
        replicates: s.replicates,
        estimators,
        seed: c.seed,
        theta0: [s.theta0[0], s.theta0[1]],
        freq: c.estimator.freq.settings(),
        chain: c.estimator.chain.settings(),
        hyper: c.estimator.priors.hyperparams(),
    })
}

/// Parses a multiplier product such as `-0.5*sigma^2` against the declared
/// parameter names.
pub fn parse_multiplier(text: &str, names: &[String]) -> Result<Multiplier, String> {
    let mut constant = 1.0;
    let mut powers = vec![0u32; names.len()];
    for raw in text.split('*') {
        let mut f = raw.trim();
        if f.is_empty() {
            return Err(format!("empty factor in '{text}'"));
        }
        if let Ok(x) = f.parse::<f64>() {
            constant *= x;
            continue;
        }
        if let Some(rest) = f.strip_prefix('-') {
            constant = -constant;
            f = rest.trim();
        }
        let (name, power) = match f.split_once('^') {
            Some((n, p)) => (
                n.trim(),
                p.trim()
                    .parse::<u32>()
                    .map_err(|_| format!("power '{}' of '{}' is not a non-negative integer", p.trim(), n.trim()))?,
            ),
            None => (f, 1),
        };
        let k = names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| format!("undeclared parameter '{name}'"))?;
        powers[k] += power;
    }
    while powers.last() == Some(&0) {
        powers.pop();
    }
    Ok(Multiplier {
        constant,
        theta_powers: powers,
    })
}

fn polys(path: &str, poly: &Option<Vec<Vec<f64>>>, p: usize) -> Result<Vec<Polynomial>, CliError> {
    match poly {
        None => Ok(vec![Polynomial::one(); p]),
        Some(v) => {
            check_len(path, v, p)?;
            Ok(v.iter().map(|c| Polynomial(c.clone())).collect())
        }
    }
}

/// Builds the PDE from its config section.
pub fn build_pde(sec: &PdeSection, p: usize) -> Result<PdeSpec, CliError> {
    let mut seen = BTreeSet::new();
    for n in &sec.theta {
        if n.is_empty() || !seen.insert(n) {
            return Err(cfg_err(format!("pde.theta: names must be non-empty and distinct ('{n}')")));
        }
    }
    let mut terms = Vec::new();
    for (i, t) in sec.terms.iter().enumerate() {
        let path = format!("pde.terms[{i}]");
        let m = parse_multiplier(&t.multiplier.text(), &sec.theta)
            .map_err(|e| cfg_err(format!("{path}.multiplier: {e}")))?;
        check_len(&format!("{path}.deriv"), &t.deriv, p)?;
        terms.push(PdeTerm {
            multiplier: m,
            coeff_polys: polys(&format!("{path}.poly"), &t.poly, p)?,
            deriv_orders: t.deriv.clone(),
        });
    }
    let mut forcing = Vec::new();
    for (i, f) in sec.forcing.iter().enumerate() {
        let path = format!("pde.forcing[{i}]");
        let m = parse_multiplier(&f.multiplier.text(), &sec.theta)
            .map_err(|e| cfg_err(format!("{path}.multiplier: {e}")))?;
        forcing.push(ForcingTerm {
            multiplier: m,
            coeff_polys: polys(&format!("{path}.poly"), &f.poly, p)?,
        });
    }
    PdeSpec::new(p, terms, forcing, sec.theta.clone()).map_err(|e| cfg_err(format!("pde: {e}")))
}

/// Evaluates a target expression in `x1, …, xp` at every point.
pub fn eval_target(text: &str, vars: &[String], points: &[Vec<f64>]) -> Result<Vec<f64>, String> {
    use fasteval::Evaler;
    let parser = fasteval::Parser::new();
    let mut slab = fasteval::Slab::new();
    let expr = parser
        .parse(text, &mut slab.ps)
        .map_err(|e| format!("cannot parse '{text}': {e}"))?
        .from(&slab.ps);
    let eval_at = |x: &[f64]| {
        let mut lookup = |name: &str, _: Vec<f64>| vars.iter().position(|v| v == name).map(|k| x[k]);
        expr.eval(&slab, &mut lookup)
            .map_err(|e| format!("in '{text}': {e}"))
    };
    // Probe once so unknown names are reported even without points.
    eval_at(&vec![0.0; vars.len()])?;
    points.iter().map(|x| eval_at(x)).collect()
}

/// The config echoed to disk: every default filled in.
pub fn effective_toml(c: &RunConfig) -> Result<String, CliError> {
    toml::to_string(c).map_err(|e| CliError::Config(format!("cannot serialize config: {e}")))
}

/// SHA-256 of the effective config with `io.output_dir` blanked, so moving
/// the outputs does not change the hash.
pub fn config_hash(c: &RunConfig) -> Result<String, CliError> {
    let mut c = c.clone();
    c.io.output_dir.clear();
    let text = toml::to_string(&c).map_err(|e| CliError::Config(format!("cannot serialize config: {e}")))?;
    let digest = Sha256::digest(text.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}
