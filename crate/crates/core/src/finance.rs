//! Black–Scholes calibration: the call-price PDE as a penalty, no-arbitrage
//! edge conditions, quote ingestion and synthetic data.
//!
//! Time runs backwards as time to maturity `τ = T − t`, so the terminal
//! payoff becomes the `τ = 0` face. In scaled coordinates the state is
//! `y = C/E` over log-moneyness `x = ln(S/E)` and the PDE reads
//! `−y_τ + r y_x + ½σ²(y_xx − y_x) − r y = 0`, which is free of `S` and
//! collapses all strikes onto one surface.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::basis::{tensor_design, BasisSpec1D, PointSet, TensorBasis};
use crate::bayes::{self, ChainSettings, Hyperparams, MarginalModel, PosteriorChain, ThetaPrior};
use crate::error::{Error, Result};
use crate::freq::{
    bootstrap, fit_frequentist, BootstrapSettings, ConstraintMode, FreqFit, FreqProblem,
    FreqSettings,
};
use crate::pde::{
    build_constraints, face_points, Condition, ConstraintSet, Multiplier, PdeSpec, PdeTerm,
    PenaltyAssembler, Polynomial, Target, DEFAULT_QUAD_POINTS,
};
use crate::rng::rng_for;

/// Largest tolerated share of malformed rows in a quote file.
pub const MAX_SKIPPED_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct OptionQuote {
    pub spot: f64,
    pub strike: f64,
    /// Time to maturity in years.
    pub tau: f64,
    pub rate: f64,
    pub implied_vol: Option<f64>,
    pub price: f64,
}

impl OptionQuote {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.spot, self.strike, self.tau, self.rate, self.price]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Data("non-finite field".into()));
        }
        if !(self.spot > 0.0) {
            return Err(Error::Data(format!("spot {} is not positive", self.spot)));
        }
        if !(self.strike > 0.0) {
            return Err(Error::Data(format!("strike {} is not positive", self.strike)));
        }
        if !(self.price > 0.0) {
            return Err(Error::Data(format!("price {} is not positive", self.price)));
        }
        if self.tau < 0.0 {
            return Err(Error::Data(format!("time to maturity {} is negative", self.tau)));
        }
        Ok(())
    }
}

/// European call value; `(S − E)⁺` at `τ = 0`.
pub fn bs_price_closed_form(spot: f64, strike: f64, tau: f64, rate: f64, sigma: f64) -> f64 {
    if tau <= 0.0 {
        return (spot - strike).max(0.0);
    }
    let n = Normal::standard();
    let sd = sigma * tau.sqrt();
    let d1 = ((spot / strike).ln() + (rate + 0.5 * sigma * sigma) * tau) / sd;
    let d2 = d1 - sd;
    spot * n.cdf(d1) - strike * (-rate * tau).exp() * n.cdf(d2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coordinates {
    /// `(S, τ)` and the call price itself; one strike only.
    Raw,
    /// `(ln(S/E), τ)` and `C/E`.
    Scaled,
}

impl Coordinates {
    pub fn name(&self) -> &'static str {
        match self {
            Coordinates::Raw => "raw",
            Coordinates::Scaled => "scaled",
        }
    }
}

/// Rectangle in (spot coordinate, τ).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BsDomain {
    pub x: (f64, f64),
    pub tau: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BsBasisSettings {
    pub interior_knots: [usize; 2],
    pub degree: usize,
    pub quad_points_per_span: usize,
}

impl Default for BsBasisSettings {
    fn default() -> Self {
        Self {
            interior_knots: [25, 25],
            degree: 3,
            quad_points_per_span: DEFAULT_QUAD_POINTS,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BsProblem {
    pub pde: PdeSpec,
    pub conditions: Vec<Condition>,
    pub constraints: ConstraintSet,
    pub basis: TensorBasis,
    pub domain: BsDomain,
    pub coordinates: Coordinates,
    pub rate: f64,
    /// Strike of the raw price surface; 1 in scaled coordinates.
    pub strike: f64,
}

/// The call-price operator with θ = (σ).
pub fn bs_pde(rate: f64, coordinates: Coordinates) -> Result<PdeSpec> {
    if !rate.is_finite() || rate < 0.0 {
        return Err(Error::invalid(format!("rate must be finite and non-negative, got {rate}")));
    }
    let mut terms = vec![PdeTerm::new(Multiplier::constant(-1.0), vec![0, 1])];
    match coordinates {
        Coordinates::Raw => {
            if rate > 0.0 {
                terms.push(
                    PdeTerm::new(Multiplier::constant(rate), vec![1, 0])
                        .with_poly(0, Polynomial::monomial(1.0, 1)),
                );
            }
            terms.push(
                PdeTerm::new(Multiplier::theta(0.5, 0, 2), vec![2, 0])
                    .with_poly(0, Polynomial::monomial(1.0, 2)),
            );
        }
        Coordinates::Scaled => {
            if rate > 0.0 {
                terms.push(PdeTerm::new(Multiplier::constant(rate), vec![1, 0]));
            }
            terms.push(PdeTerm::new(Multiplier::theta(-0.5, 0, 2), vec![1, 0]));
            terms.push(PdeTerm::new(Multiplier::theta(0.5, 0, 2), vec![2, 0]));
        }
    }
    if rate > 0.0 {
        terms.push(PdeTerm::new(Multiplier::constant(-rate), vec![0, 0]));
    }
    PdeSpec::new(2, terms, vec![], vec!["sigma".into()])
}

/// PDE, basis and the three edge conditions: worthless far out of the money,
/// discounted intrinsic value far in the money, payoff at maturity.
pub fn bs_spec(
    rate: f64,
    domain: BsDomain,
    strike: f64,
    coordinates: Coordinates,
    basis: &BsBasisSettings,
) -> Result<BsProblem> {
    let pde = bs_pde(rate, coordinates)?;
    let (lo, hi) = domain.x;
    if !(lo < hi) || !(domain.tau.0 < domain.tau.1) {
        return Err(Error::invalid(format!("degenerate domain {domain:?}")));
    }
    if domain.tau.0 != 0.0 {
        return Err(Error::invalid("the maturity range must start at τ = 0"));
    }
    let strike = match coordinates {
        Coordinates::Raw => strike,
        Coordinates::Scaled => 1.0,
    };
    if !(strike > 0.0) {
        return Err(Error::invalid(format!("strike must be positive, got {strike}")));
    }
    let kink = match coordinates {
        Coordinates::Raw => strike,
        Coordinates::Scaled => 0.0,
    };
    if !(lo < kink && kink < hi) {
        return Err(Error::invalid(format!(
            "the domain [{lo}, {hi}] must contain the strike at {kink} in its interior"
        )));
    }
    let tb = TensorBasis::new(vec![
        BasisSpec1D::equidistant(lo, hi, basis.degree, basis.interior_knots[0] + basis.degree + 1)?,
        BasisSpec1D::equidistant(
            domain.tau.0,
            domain.tau.1,
            basis.degree,
            basis.interior_knots[1] + basis.degree + 1,
        )?,
    ])?;

    let upper = match coordinates {
        Coordinates::Raw => Target::function(move |p| hi - strike * (-rate * p[1]).exp()),
        Coordinates::Scaled => Target::function(move |p| hi.exp() - (-rate * p[1]).exp()),
    };
    let payoff = match coordinates {
        Coordinates::Raw => Target::function(move |p| (p[0] - strike).max(0.0)),
        Coordinates::Scaled => Target::function(|p| (p[0].exp() - 1.0).max(0.0)),
    };
    let conditions = vec![
        Condition {
            label: "lower".into(),
            points: face_points(&tb, 0, false),
            deriv_orders: vec![0, 0],
            target: Target::Constant(0.0),
        },
        Condition {
            label: "upper".into(),
            points: face_points(&tb, 0, true),
            deriv_orders: vec![0, 0],
            target: upper,
        },
        Condition {
            label: "terminal".into(),
            points: face_points(&tb, 1, false),
            deriv_orders: vec![0, 0],
            target: payoff,
        },
    ];
    let constraints = build_constraints(&conditions, &tb)?;
    Ok(BsProblem {
        pde,
        conditions,
        constraints,
        basis: tb,
        domain,
        coordinates,
        rate,
        strike,
    })
}

/// Reads `spot,strike,tau,rate,ivol,price` rows (any column order, `ivol`
/// optional). Invalid rows are skipped and reported with their line number.
pub fn ingest_options(path: &Path) -> Result<(Vec<OptionQuote>, Vec<String>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Data(format!("{}: {other:?}", path.display())),
        })?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let required = ["spot", "strike", "tau", "rate", "price"];
    let missing: Vec<&str> = required.iter().copied().filter(|n| col(n).is_none()).collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "{}: missing column(s) {}",
            path.display(),
            missing.join(", ")
        )));
    }
    let idx: Vec<usize> = required.iter().map(|n| col(n).unwrap()).collect();
    let ivol = col("ivol");

    let mut quotes = Vec::new();
    let mut skipped = Vec::new();
    let mut total = 0usize;
    for rec in rdr.records() {
        total += 1;
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                skipped.push(format!("line {line}: {e}"));
                continue;
            }
        };
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let field = |k: usize| -> std::result::Result<f64, String> {
            let raw = rec.get(k).unwrap_or("");
            raw.parse::<f64>()
                .map_err(|_| format!("column '{}' is not a number: '{raw}'", &headers[k]))
        };
        let parsed = (|| -> std::result::Result<OptionQuote, String> {
            let iv = match ivol.map(|k| rec.get(k).unwrap_or("")) {
                None | Some("") => None,
                Some(_) => Some(field(ivol.unwrap())?),
            };
            let q = OptionQuote {
                spot: field(idx[0])?,
                strike: field(idx[1])?,
                tau: field(idx[2])?,
                rate: field(idx[3])?,
                implied_vol: iv,
                price: field(idx[4])?,
            };
            q.validate().map_err(|e| e.to_string())?;
            Ok(q)
        })();
        match parsed {
            Ok(q) => quotes.push(q),
            Err(msg) => skipped.push(format!("line {line}: {msg}")),
        }
    }
    if total == 0 {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    if skipped.len() as f64 > MAX_SKIPPED_FRACTION * total as f64 {
        return Err(Error::Data(format!(
            "{}: {} of {total} rows are invalid, first: {}",
            path.display(),
            skipped.len(),
            skipped[0]
        )));
    }
    Ok((quotes, skipped))
}

/// Writes quotes in the ingestion schema.
pub fn write_quotes(path: &Path, quotes: &[OptionQuote]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{other:?}")),
    })?;
    w.write_record(["spot", "strike", "tau", "rate", "ivol", "price"])?;
    for q in quotes {
        let iv = q.implied_vol.map(|v| format!("{v}")).unwrap_or_default();
        w.write_record([
            format!("{}", q.spot),
            format!("{}", q.strike),
            format!("{}", q.tau),
            format!("{}", q.rate),
            iv,
            format!("{:.12e}", q.price),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSettings {
    pub sigma: f64,
    pub rate: f64,
    /// Points along moneyness `S/E` and maturity.
    pub grid: [usize; 2],
    pub moneyness: (f64, f64),
    pub maturity: (f64, f64),
    /// Noise standard deviation on the strike-scaled price `C/E`.
    pub noise_sd: f64,
    pub strike: f64,
    pub seed: u64,
}

impl Default for SyntheticSettings {
    fn default() -> Self {
        Self {
            sigma: 0.1,
            rate: 0.05,
            grid: [40, 20],
            moneyness: (0.8, 1.2),
            maturity: (0.05, 1.0),
            noise_sd: 0.001,
            strike: 1.0,
            seed: 1,
        }
    }
}

/// Closed-form prices on a moneyness × maturity grid plus Gaussian noise,
/// moneyness fastest. Noisy prices of far out-of-the-money quotes can be
/// zero or negative; they are kept so the noise stays unbiased.
pub fn synthetic_quotes(s: &SyntheticSettings) -> Result<Vec<OptionQuote>> {
    if s.grid[0] < 2 || s.grid[1] < 2 {
        return Err(Error::invalid("the synthetic grid needs at least 2 points per axis"));
    }
    if !(s.sigma > 0.0 && s.strike > 0.0 && s.noise_sd >= 0.0) {
        return Err(Error::invalid("σ and the strike must be positive, the noise non-negative"));
    }
    if !(s.moneyness.0 > 0.0 && s.moneyness.0 < s.moneyness.1 && s.maturity.0 < s.maturity.1) {
        return Err(Error::invalid("degenerate synthetic moneyness or maturity range"));
    }
    let m = crate::basis::linspace(s.moneyness.0, s.moneyness.1, s.grid[0]);
    let t = crate::basis::linspace(s.maturity.0, s.maturity.1, s.grid[1]);
    let mut rng = rng_for(s.seed, &[]);
    let mut out = Vec::with_capacity(m.len() * t.len());
    for &tau in &t {
        for &mi in &m {
            let spot = mi * s.strike;
            let clean = bs_price_closed_form(spot, s.strike, tau, s.rate, s.sigma);
            let e: f64 = rng.sample(StandardNormal);
            out.push(OptionQuote {
                spot,
                strike: s.strike,
                tau,
                rate: s.rate,
                implied_vol: Some(s.sigma),
                price: clean + s.strike * s.noise_sd * e,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum CalibrationMode {
    Freq {
        constraint: ConstraintMode,
        settings: FreqSettings,
        bootstrap: BootstrapSettings,
    },
    Bayes {
        kappa: f64,
        chain: ChainSettings,
        hyper: Hyperparams,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSettings {
    pub coordinates: Coordinates,
    /// Rate in the PDE; the mean quoted rate when absent.
    pub rate: Option<f64>,
    /// Explicit domain; otherwise symmetric in the spot coordinate around
    /// the strike with `x_pad` beyond the furthest quote, τ from 0.
    pub domain: Option<BsDomain>,
    pub x_pad: f64,
    pub basis: BsBasisSettings,
    pub sigma0: f64,
    pub level: f64,
    pub mode: CalibrationMode,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        Self {
            coordinates: Coordinates::Scaled,
            rate: None,
            domain: None,
            x_pad: 0.5,
            basis: BsBasisSettings::default(),
            sigma0: 0.2,
            level: 0.95,
            mode: CalibrationMode::Freq {
                constraint: ConstraintMode::LeastSquares { kappa: 1e6 },
                settings: FreqSettings::default(),
                bootstrap: BootstrapSettings::default(),
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct Calibration {
    pub sigma_hat: f64,
    pub interval: (f64, f64),
    pub level: f64,
    pub method: String,
    pub gamma_hat: f64,
    pub tau_hat: f64,
    /// Spline coefficients of the fitted surface (posterior mean of `c`
    /// at the posterior means in Bayesian mode).
    pub c_hat: Vec<f64>,
    pub problem: BsProblem,
    /// `‖Hĉ − v‖∞` of the fitted surface.
    pub max_violation: f64,
    pub fit: Option<FreqFit>,
    pub chain: Option<PosteriorChain>,
    pub bootstrap_dropped: usize,
}

/// Maps quotes to (point, value) in the chosen coordinates.
pub fn quote_points(quotes: &[OptionQuote], coordinates: Coordinates) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let mut pts = Vec::with_capacity(quotes.len());
    let mut vals = Vec::with_capacity(quotes.len());
    let strike0 = quotes.first().map(|q| q.strike).unwrap_or(1.0);
    for (i, q) in quotes.iter().enumerate() {
        match coordinates {
            Coordinates::Raw => {
                if (q.strike - strike0).abs() > 1e-12 * strike0 {
                    return Err(Error::invalid(format!(
                        "quote {i}: raw coordinates need a single strike ({} vs {strike0})",
                        q.strike
                    )));
                }
                pts.push(vec![q.spot, q.tau]);
                vals.push(q.price);
            }
            Coordinates::Scaled => {
                pts.push(vec![(q.spot / q.strike).ln(), q.tau]);
                vals.push(q.price / q.strike);
            }
        }
    }
    Ok((pts, vals))
}

/// Domain used when none is configured: τ from 0 to the longest maturity and
/// the x-range symmetric about the strike with `pad` beyond the furthest quote.
pub fn default_domain(pts: &[Vec<f64>], coordinates: Coordinates, strike: f64, pad: f64) -> BsDomain {
    let tau_hi = pts.iter().map(|p| p[1]).fold(0.0f64, f64::max);
    let centre = match coordinates {
        Coordinates::Raw => strike,
        Coordinates::Scaled => 0.0,
    };
    let reach = pts.iter().map(|p| (p[0] - centre).abs()).fold(0.0f64, f64::max);
    let half = match coordinates {
        Coordinates::Raw => (reach + pad * strike).min(centre),
        Coordinates::Scaled => reach + pad,
    };
    BsDomain {
        x: (centre - half, centre + half),
        tau: (0.0, if tau_hi > 0.0 { tau_hi } else { 1.0 }),
    }
}

/// Fits σ to the quotes and returns σ̂ with a bootstrap (frequentist) or
/// HPD (Bayesian) interval at `settings.level`.
pub fn calibrate_volatility(quotes: &[OptionQuote], settings: &CalibrationSettings) -> Result<Calibration> {
    if quotes.len() < 100 {
        return Err(Error::invalid(format!(
            "calibration needs at least 100 quotes, got {}",
            quotes.len()
        )));
    }
    let rate = match settings.rate {
        Some(r) => r,
        None => quotes.iter().map(|q| q.rate).sum::<f64>() / quotes.len() as f64,
    };
    let (pts, vals) = quote_points(quotes, settings.coordinates)?;
    let strike = match settings.coordinates {
        Coordinates::Raw => quotes[0].strike,
        Coordinates::Scaled => 1.0,
    };
    let domain = settings
        .domain
        .unwrap_or_else(|| default_domain(&pts, settings.coordinates, strike, settings.x_pad));
    let bs = bs_spec(rate, domain, strike, settings.coordinates, &settings.basis)?;
    for (i, p) in pts.iter().enumerate() {
        if !bs.basis.contains(p) {
            return Err(Error::invalid(format!(
                "quote {i} at ({}, {}) lies outside the domain {domain:?}",
                p[0], p[1]
            )));
        }
    }
    let assembler = PenaltyAssembler::new(&bs.pde, &bs.basis, settings.basis.quad_points_per_span)?;
    let design = tensor_design(&bs.basis, &PointSet::Scatter(pts), &[0, 0])?;
    let problem = FreqProblem::new(assembler, design, vals, Some(bs.constraints.clone()))?;
    let theta0 = [settings.sigma0];

    match &settings.mode {
        CalibrationMode::Freq {
            constraint,
            settings: fs,
            bootstrap: bs_settings,
        } => {
            let fit = fit_frequentist(&problem, *constraint, &theta0, fs)?;
            let boot = bootstrap(&problem, &fit, fs, bs_settings)?;
            let interval = boot.interval(0, settings.level)?;
            Ok(Calibration {
                sigma_hat: fit.theta_hat[0].abs(),
                interval: if fit.theta_hat[0] < 0.0 {
                    (-interval.1, -interval.0)
                } else {
                    interval
                },
                level: settings.level,
                method: format!("freq-{} bootstrap", constraint.name()),
                gamma_hat: fit.gamma_hat,
                tau_hat: fit.tau_hat,
                max_violation: bs.constraints.max_violation(&fit.c_hat),
                c_hat: fit.c_hat.clone(),
                problem: bs,
                bootstrap_dropped: boot.dropped.len(),
                fit: Some(fit),
                chain: None,
            })
        }
        CalibrationMode::Bayes {
            kappa,
            chain,
            hyper,
            seed,
        } => {
            let mut hyper = hyper.clone();
            if hyper.theta_prior.is_empty() {
                hyper.theta_prior = vec![ThetaPrior::Positive];
            }
            let model = MarginalModel::new(&problem, Some(*kappa), hyper)?;
            let ch = bayes::run_chain(&model, &problem, chain, &theta0, *seed)?;
            let summary = ch.summary()?;
            let interval = bayes::hpd_interval(&ch.column(0), settings.level)?;
            let (sigma, gamma, tau) = (summary.mean[0], summary.mean[1], summary.mean[2]);
            let c_hat = model.coefficient_mean(&[sigma], gamma, tau, None)?;
            Ok(Calibration {
                sigma_hat: sigma,
                interval,
                level: settings.level,
                method: "bayes-ls hpd".into(),
                gamma_hat: gamma,
                tau_hat: tau,
                max_violation: bs.constraints.max_violation(&c_hat),
                c_hat,
                problem: bs,
                bootstrap_dropped: 0,
                fit: None,
                chain: Some(ch),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn closed_form_limits() {
        assert_relative_eq!(bs_price_closed_form(1.2, 1.0, 0.0, 0.05, 0.1), 0.2);
        assert_eq!(bs_price_closed_form(0.8, 1.0, 0.0, 0.05, 0.1), 0.0);
        let deep = bs_price_closed_form(5.0, 1.0, 0.5, 0.05, 0.1);
        assert_relative_eq!(deep, 5.0 - (-0.025f64).exp(), epsilon = 1e-12);
        assert!(bs_price_closed_form(1.0, 1.0, 1e-10, 0.05, 0.1) < 1e-5);
    }

    #[test]
    fn closed_form_reference_value() {
        // S = E = 100, T = 1, r = 5%, σ = 20%
        assert_relative_eq!(
            bs_price_closed_form(100.0, 100.0, 1.0, 0.05, 0.2),
            10.450583572185565,
            epsilon = 1e-9
        );
    }

    #[test]
    fn scaled_operator_annihilates_closed_form() {
        let (r, s) = (0.05, 0.1);
        let y = |x: f64, t: f64| bs_price_closed_form(x.exp(), 1.0, t, r, s);
        let h = 1e-3;
        for &(x, t) in &[(-0.1, 0.3), (0.0, 0.5), (0.15, 0.9)] {
            let yt = (y(x, t + h) - y(x, t - h)) / (2.0 * h);
            let yx = (y(x + h, t) - y(x - h, t)) / (2.0 * h);
            let yxx = (y(x + h, t) - 2.0 * y(x, t) + y(x - h, t)) / (h * h);
            let res = -yt + r * yx + 0.5 * s * s * (yxx - yx) - r * y(x, t);
            assert!(res.abs() < 1e-4, "residual {res} at ({x}, {t})");
        }
    }

    #[test]
    fn raw_operator_annihilates_closed_form() {
        let (r, s, e) = (0.05, 0.1, 1.0);
        let c = |sp: f64, t: f64| bs_price_closed_form(sp, e, t, r, s);
        let h = 1e-3;
        for &(sp, t) in &[(0.9, 0.3), (1.0, 0.5), (1.15, 0.9)] {
            let ct = (c(sp, t + h) - c(sp, t - h)) / (2.0 * h);
            let cs = (c(sp + h, t) - c(sp - h, t)) / (2.0 * h);
            let css = (c(sp + h, t) - 2.0 * c(sp, t) + c(sp - h, t)) / (h * h);
            let res = -ct + r * sp * cs + 0.5 * s * s * sp * sp * css - r * c(sp, t);
            assert!(res.abs() < 1e-4, "residual {res} at ({sp}, {t})");
        }
    }

    #[test]
    fn pde_multipliers() {
        let pde = bs_pde(0.05, Coordinates::Raw).unwrap();
        let diff = pde.terms().iter().find(|t| t.deriv_orders == vec![2, 0]).unwrap();
        assert_relative_eq!(diff.multiplier.value(&[0.1]), 0.005, epsilon = 1e-15);
        assert_eq!(diff.coeff_polys[0], Polynomial::monomial(1.0, 2));
    }

    #[test]
    fn terminal_targets() {
        let dom = BsDomain {
            x: (0.0, 3.0),
            tau: (0.0, 1.0),
        };
        let bs = bs_spec(0.05, dom, 1.0, Coordinates::Raw, &BsBasisSettings::default()).unwrap();
        let term = &bs.conditions[2];
        let Target::Function(f) = &term.target else {
            panic!("terminal target should be a function")
        };
        assert_eq!(f(&[1.0, 0.0]), 0.0);
        assert_relative_eq!(f(&[2.0, 0.0]), 1.0);
    }

    #[test]
    fn domain_must_contain_strike() {
        let dom = BsDomain {
            x: (0.1, 0.5),
            tau: (0.0, 1.0),
        };
        assert!(bs_spec(0.05, dom, 1.0, Coordinates::Scaled, &BsBasisSettings::default()).is_err());
    }

    #[test]
    fn corner_rows_are_merged() {
        let dom = BsDomain {
            x: (-0.7, 0.7),
            tau: (0.0, 1.0),
        };
        let bs = bs_spec(0.05, dom, 1.0, Coordinates::Scaled, &BsBasisSettings::default()).unwrap();
        // 27 breakpoints per side: two τ faces of 27, terminal face of 27, two shared corners
        assert_eq!(bs.constraints.len(), 27 + 27 + 27 - 2);
    }

    #[test]
    fn ingest_reports_bad_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.csv");
        let mut text = String::from("spot,strike,tau,rate,ivol,price\n");
        for i in 0..40 {
            text.push_str(&format!("{},1,0.5,0.05,,0.1\n", 1.0 + 0.01 * i as f64));
        }
        text.push_str("1.0,1,0.5,0.05,,-0.2\n");
        std::fs::write(&path, &text).unwrap();
        let (q, skipped) = ingest_options(&path).unwrap();
        assert_eq!(q.len(), 40);
        assert_eq!(skipped.len(), 1);
        assert!(skipped[0].starts_with("line 42"), "{skipped:?}");

        std::fs::write(&path, "spot,strike,tau,rate,ivol,price\n").unwrap();
        assert!(ingest_options(&path).is_err());
        std::fs::write(&path, "spot,strike,tau,price\n1,1,1,1\n").unwrap();
        let err = ingest_options(&path).unwrap_err().to_string();
        assert!(err.contains("rate"), "{err}");
    }
}
