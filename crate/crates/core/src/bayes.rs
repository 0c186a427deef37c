//! Bayesian estimation with the spline coefficients integrated out.
//!
//! Prior: `c | θ, γ[, κ] ~ N(V₁⁻¹v₁, V₁⁻¹)` with `V₁ = γR(θ) [+ κHᵀH]` and
//! `v₁ = −γr(θ) [+ κHᵀv]`; Gamma priors on τ, γ (and κ); a per-component
//! prior on θ. The conditional posterior of `c` is `N(V₂⁻¹v₂, V₂⁻¹)` with
//! `V₂ = τBᵀB + V₁`, `v₂ = τBᵀζ + v₁`, which gives the marginal posterior of
//! `(θ, γ, τ[, κ])` in closed form up to a constant.
//!
//! R(θ) is singular along (approximate) PDE solutions, so a ridge
//! `ε = RIDGE_FLOOR · mean(diag R)` is always added: `V₁ = γ(R + εI) [+ κHᵀH]`.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::band::{dot, BandCholesky, SymBand};
use crate::basis::CoefLayout;
use crate::error::{Error, Result};
use crate::freq::{fit_frequentist, ConstraintMode, FreqProblem, FreqSettings, RIDGE_FLOOR};
use crate::pde::{ConstraintSet, PenaltyQuadratic};

/// Prior on one θ component.
#[derive(Debug, Clone, PartialEq)]
pub enum ThetaPrior {
    Flat,
    /// Flat on `(0, ∞)`.
    Positive,
    Normal { mean: f64, sd: f64 },
    /// Held at this value; the component is not sampled.
    Fixed(f64),
}

impl ThetaPrior {
    pub fn log_density(&self, x: f64) -> f64 {
        match self {
            ThetaPrior::Flat => 0.0,
            ThetaPrior::Positive => {
                if x > 0.0 {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
            ThetaPrior::Normal { mean, sd } => -0.5 * ((x - mean) / sd).powi(2) - sd.ln(),
            ThetaPrior::Fixed(v) => {
                if x == *v {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    pub a_tau: f64,
    pub b_tau: f64,
    pub a_gamma: f64,
    pub b_gamma: f64,
    pub a_kappa: f64,
    pub b_kappa: f64,
    /// One entry per θ component; an empty list means flat priors.
    pub theta_prior: Vec<ThetaPrior>,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            a_tau: 1.0,
            b_tau: 1e-6,
            a_gamma: 1.0,
            b_gamma: 1e-8,
            a_kappa: 1.0,
            b_kappa: 1e-6,
            theta_prior: vec![],
        }
    }
}

impl Hyperparams {
    pub fn validate(&self, n_theta: usize) -> Result<()> {
        for (name, v) in [
            ("a_tau", self.a_tau),
            ("b_tau", self.b_tau),
            ("a_gamma", self.a_gamma),
            ("b_gamma", self.b_gamma),
            ("a_kappa", self.a_kappa),
            ("b_kappa", self.b_kappa),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !self.theta_prior.is_empty() && self.theta_prior.len() != n_theta {
            return Err(Error::DimensionMismatch(format!(
                "{} θ priors for {n_theta} parameters",
                self.theta_prior.len()
            )));
        }
        for p in &self.theta_prior {
            if let ThetaPrior::Normal { sd, .. } = p {
                if !(*sd > 0.0) {
                    return Err(Error::invalid("θ prior standard deviations must be positive"));
                }
            }
        }
        Ok(())
    }

    fn theta(&self, k: usize) -> &ThetaPrior {
        self.theta_prior.get(k).unwrap_or(&ThetaPrior::Flat)
    }

    pub fn log_theta_prior(&self, theta: &[f64]) -> f64 {
        theta
            .iter()
            .enumerate()
            .map(|(k, &t)| self.theta(k).log_density(t))
            .sum()
    }
}

fn log_gamma_prior(x: f64, a: f64, b: f64) -> f64 {
    (a - 1.0) * x.ln() - b * x
}

/// `(V₁, v₁, log det V₁)` of the coefficient prior, in band order.
#[derive(Debug, Clone)]
pub struct PriorComponents {
    layout: CoefLayout,
    v1: SymBand,
    v1_vec: Vec<f64>,
    chol: BandCholesky,
    pub logdet_v1: f64,
    /// Ridge added to R before scaling by γ.
    pub ridge: f64,
}

impl PriorComponents {
    /// V₁ as a dense matrix in public order.
    pub fn v1_dense(&self) -> nalgebra::DMatrix<f64> {
        let n = self.layout.n();
        let mut out = nalgebra::DMatrix::zeros(n, n);
        for a in 0..n {
            for b in 0..n {
                let (ba, bb) = (self.layout.band_index(a), self.layout.band_index(b));
                if ba.abs_diff(bb) <= self.v1.bandwidth() {
                    out[(a, b)] = self.v1.get(ba, bb);
                }
            }
        }
        out
    }

    /// v₁ in public order.
    pub fn v1(&self) -> Vec<f64> {
        self.layout.to_public_vec(&self.v1_vec)
    }

    /// Prior mean `V₁⁻¹v₁` in public order.
    pub fn mean(&self) -> Vec<f64> {
        self.layout.to_public_vec(&self.chol.solve(&self.v1_vec))
    }

    /// `v₁ᵀV₁⁻¹v₁`.
    pub fn quad(&self) -> f64 {
        self.chol.inv_quad(&self.v1_vec)
    }
}

fn ridge_of(q: &PenaltyQuadratic) -> f64 {
    RIDGE_FLOOR * q.band().mean_diag().abs().max(f64::MIN_POSITIVE)
}

fn prior_parts(
    q: &PenaltyQuadratic,
    gamma: f64,
    cons: Option<(&SymBand, &[f64])>,
    kappa: f64,
) -> Result<PriorComponents> {
    let ridge = ridge_of(q);
    let mut v1 = q.band().clone();
    v1.add_diag(ridge);
    v1.scale(gamma);
    let mut v1_vec: Vec<f64> = q.r_band().iter().map(|r| -gamma * r).collect();
    if let Some((hth, htv)) = cons {
        v1.axpy(kappa, hth);
        for (a, b) in v1_vec.iter_mut().zip(htv) {
            *a += kappa * b;
        }
    }
    let chol = v1.cholesky().map_err(|e| {
        Error::SingularSystem(format!("prior precision V₁: {e}"))
    })?;
    Ok(PriorComponents {
        layout: q.layout().clone(),
        logdet_v1: chol.logdet(),
        v1,
        v1_vec,
        chol,
        ridge,
    })
}

/// Prior components at `(θ, γ[, κ])` for an assembled penalty.
pub fn prior_components(
    q: &PenaltyQuadratic,
    gamma: f64,
    cons: Option<(&ConstraintSet, f64)>,
) -> Result<PriorComponents> {
    if !(gamma > 0.0) {
        return Err(Error::invalid(format!("γ must be positive, got {gamma}")));
    }
    match cons {
        None => prior_parts(q, gamma, None, 0.0),
        Some((set, kappa)) => {
            let hth = set.h().gram(q.layout());
            let htv = set.htv_band(q.layout());
            prior_parts(q, gamma, Some((&hth, &htv)), kappa)
        }
    }
}

/// Marginal posterior of `(θ, γ, τ[, κ])` for one data set.
#[derive(Debug, Clone)]
pub struct MarginalModel {
    problem: FreqProblem,
    kappa: Option<f64>,
    hyper: Hyperparams,
    zz: f64,
}

/// Cached `V₁` quantities, reused while only τ changes.
#[derive(Debug, Clone)]
struct V1State {
    prior: PriorComponents,
    quad1: f64,
}

impl MarginalModel {
    /// `kappa` switches the soft conditions on (they must be present in `problem`).
    pub fn new(problem: &FreqProblem, kappa: Option<f64>, hyper: Hyperparams) -> Result<Self> {
        hyper.validate(problem.assembler().pde().n_theta())?;
        if let Some(k) = kappa {
            if !(k > 0.0) {
                return Err(Error::invalid(format!("κ must be positive, got {k}")));
            }
            if problem.constraints().is_none() {
                return Err(Error::invalid("κ given but the problem has no conditions"));
            }
        }
        let zz = dot(problem.zeta(), problem.zeta());
        Ok(Self {
            problem: problem.clone(),
            kappa,
            hyper,
            zz,
        })
    }

    pub fn problem(&self) -> &FreqProblem {
        &self.problem
    }

    pub fn hyper(&self) -> &Hyperparams {
        &self.hyper
    }

    pub fn has_conditions(&self) -> bool {
        self.kappa.is_some()
    }

    pub fn kappa(&self) -> Option<f64> {
        self.kappa
    }

    pub fn n_theta(&self) -> usize {
        self.problem.assembler().pde().n_theta()
    }

    fn cons(&self) -> Option<(&SymBand, &[f64])> {
        if self.kappa.is_some() {
            self.problem.hth_htv()
        } else {
            None
        }
    }

    pub fn penalty(&self, theta: &[f64]) -> Result<PenaltyQuadratic> {
        self.problem.assembler().assemble(theta)
    }

    pub fn prior(&self, theta: &[f64], gamma: f64, kappa: Option<f64>) -> Result<PriorComponents> {
        let q = self.penalty(theta)?;
        prior_parts(&q, gamma, self.cons(), kappa.or(self.kappa).unwrap_or(0.0))
    }

    fn v1_state(&self, q: &PenaltyQuadratic, gamma: f64, kappa: f64) -> Result<V1State> {
        let prior = prior_parts(q, gamma, self.cons(), kappa)?;
        let quad1 = prior.quad();
        Ok(V1State { prior, quad1 })
    }

    fn v2_parts(&self, v1: &V1State, tau: f64) -> Result<(BandCholesky, Vec<f64>)> {
        let mut v2 = self.problem.btb().scaled(tau);
        v2.axpy(1.0, &v1.prior.v1);
        let chol = v2
            .into_cholesky()
            .map_err(|e| Error::SingularSystem(format!("posterior precision V₂: {e}")))?;
        let rhs: Vec<f64> = self
            .problem
            .btz()
            .iter()
            .zip(&v1.prior.v1_vec)
            .map(|(z, v)| tau * z + v)
            .collect();
        Ok((chol, rhs))
    }

    fn hyper_terms(&self, gamma: f64, tau: f64, kappa: f64, theta: &[f64]) -> f64 {
        let h = &self.hyper;
        let mut s = log_gamma_prior(tau, h.a_tau, h.b_tau)
            + log_gamma_prior(gamma, h.a_gamma, h.b_gamma)
            + h.log_theta_prior(theta);
        if self.kappa.is_some() {
            s += log_gamma_prior(kappa, h.a_kappa, h.b_kappa);
        }
        s
    }

    fn marginal_from(&self, v1: &V1State, theta: &[f64], gamma: f64, tau: f64, kappa: f64) -> f64 {
        let (chol2, v2) = match self.v2_parts(v1, tau) {
            Ok(p) => p,
            Err(_) => return f64::NEG_INFINITY,
        };
        let n = self.problem.n_obs() as f64;
        let value = 0.5 * n * tau.ln() - 0.5 * tau * self.zz + 0.5 * v1.prior.logdet_v1
            - 0.5 * v1.quad1
            - 0.5 * chol2.logdet()
            + 0.5 * chol2.inv_quad(&v2)
            + self.hyper_terms(gamma, tau, kappa, theta);
        if value.is_nan() {
            f64::NEG_INFINITY
        } else {
            value
        }
    }

    fn kappa_or(&self, kappa: Option<f64>) -> f64 {
        kappa.or(self.kappa).unwrap_or(0.0)
    }

    /// Log marginal posterior up to a constant; `−∞` when a factorization fails
    /// or an argument is outside its support.
    pub fn log_marginal_posterior(
        &self,
        theta: &[f64],
        gamma: f64,
        tau: f64,
        kappa: Option<f64>,
    ) -> f64 {
        let kappa = self.kappa_or(kappa);
        if !(gamma > 0.0 && tau > 0.0) || (self.kappa.is_some() && !(kappa > 0.0)) {
            return f64::NEG_INFINITY;
        }
        let lp_theta = self.hyper.log_theta_prior(theta);
        if lp_theta == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        let q = match self.penalty(theta) {
            Ok(q) => q,
            Err(_) => return f64::NEG_INFINITY,
        };
        match self.v1_state(&q, gamma, kappa) {
            Ok(v1) => self.marginal_from(&v1, theta, gamma, tau, kappa),
            Err(_) => f64::NEG_INFINITY,
        }
    }

    /// Log joint posterior of `(c, θ, γ, τ[, κ])` (public-order `c`), with
    /// the same omitted constant as [`Self::log_marginal_posterior`].
    pub fn log_joint(
        &self,
        c: &[f64],
        theta: &[f64],
        gamma: f64,
        tau: f64,
        kappa: Option<f64>,
    ) -> Result<f64> {
        let kappa = self.kappa_or(kappa);
        let q = self.penalty(theta)?;
        let v1 = self.v1_state(&q, gamma, kappa)?;
        let layout = q.layout();
        let cb = layout.to_band_vec(c);
        let rss = self.problem.rss(c);
        let n = self.problem.n_obs() as f64;
        let prior_quad = v1.prior.v1.quad_form(&cb) - 2.0 * dot(&cb, &v1.prior.v1_vec) + v1.quad1;
        Ok(0.5 * n * tau.ln() - 0.5 * tau * rss + 0.5 * v1.prior.logdet_v1 - 0.5 * prior_quad
            + self.hyper_terms(gamma, tau, kappa, theta))
    }

    /// Log density of `c | θ, γ, τ[, κ], ζ ~ N(V₂⁻¹v₂, V₂⁻¹)` without the `2π` term.
    pub fn log_conditional_coefficients(
        &self,
        c: &[f64],
        theta: &[f64],
        gamma: f64,
        tau: f64,
        kappa: Option<f64>,
    ) -> Result<f64> {
        let kappa = self.kappa_or(kappa);
        let q = self.penalty(theta)?;
        let v1 = self.v1_state(&q, gamma, kappa)?;
        let (chol2, v2) = self.v2_parts(&v1, tau)?;
        let mean = chol2.solve(&v2);
        let cb = q.layout().to_band_vec(c);
        let diff: Vec<f64> = cb.iter().zip(&mean).map(|(a, b)| a - b).collect();
        let mut v2m = self.problem.btb().scaled(tau);
        v2m.axpy(1.0, &v1.prior.v1);
        Ok(0.5 * chol2.logdet() - 0.5 * v2m.quad_form(&diff))
    }

    /// Conditional posterior mean `V₂⁻¹v₂` (public order).
    pub fn coefficient_mean(
        &self,
        theta: &[f64],
        gamma: f64,
        tau: f64,
        kappa: Option<f64>,
    ) -> Result<Vec<f64>> {
        let q = self.penalty(theta)?;
        let v1 = self.v1_state(&q, gamma, self.kappa_or(kappa))?;
        let (chol2, v2) = self.v2_parts(&v1, tau)?;
        Ok(q.layout().to_public_vec(&chol2.solve(&v2)))
    }
}

/// One exact draw of `c ~ N(V₂⁻¹v₂, V₂⁻¹)` (public order).
pub fn draw_coefficients<R: Rng + ?Sized>(
    prior: &PriorComponents,
    problem: &FreqProblem,
    tau: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("τ must be positive, got {tau}")));
    }
    let mut v2 = problem.btb().scaled(tau);
    v2.axpy(1.0, &prior.v1);
    let chol = v2
        .into_cholesky()
        .map_err(|e| Error::SingularSystem(format!("posterior precision V₂: {e}")))?;
    let rhs: Vec<f64> = problem
        .btz()
        .iter()
        .zip(&prior.v1_vec)
        .map(|(z, v)| tau * z + v)
        .collect();
    let mean = chol.solve(&rhs);
    let mut e: Vec<f64> = (0..mean.len()).map(|_| rng.sample(StandardNormal)).collect();
    chol.sample_centered(&mut e);
    let c: Vec<f64> = mean.iter().zip(&e).map(|(m, z)| m + z).collect();
    Ok(prior.layout.to_public_vec(&c))
}

/// Shape and rate of `τ | c, ζ`.
pub fn tau_conditional(rss: f64, n_obs: usize, hyper: &Hyperparams) -> (f64, f64) {
    (n_obs as f64 / 2.0 + hyper.a_tau, rss / 2.0 + hyper.b_tau)
}

/// Shape and rate of `γ | θ, c` (unconstrained prior):
/// `M/2 + a_γ` and `(cᵀRc + 2cᵀr + rᵀR⁻¹r)/2 + b_γ`, with R ridge-floored.
pub fn gamma_conditional(c: &[f64], q: &PenaltyQuadratic, hyper: &Hyperparams) -> Result<(f64, f64)> {
    let cb = q.layout().to_band_vec(c);
    let mut quad = q.band().quad_form(&cb) + 2.0 * dot(&cb, q.r_band());
    if q.has_linear_part() {
        let mut rr = q.band().clone();
        rr.add_diag(ridge_of(q));
        let chol = rr
            .into_cholesky()
            .map_err(|e| Error::SingularSystem(format!("R with ridge floor: {e}")))?;
        quad += chol.inv_quad(q.r_band());
    }
    let rate = quad / 2.0 + hyper.b_gamma;
    if !(rate > 0.0) {
        return Err(Error::Numerical(format!("non-positive γ rate {rate}")));
    }
    Ok((q.n() as f64 / 2.0 + hyper.a_gamma, rate))
}

/// Shape and rate of `κ | c` under the soft-condition prior.
pub fn kappa_conditional(c: &[f64], cons: &ConstraintSet, hyper: &Hyperparams) -> (f64, f64) {
    let r2: f64 = cons.residual(c).iter().map(|r| r * r).sum();
    (cons.len() as f64 / 2.0 + hyper.a_kappa, r2 / 2.0 + hyper.b_kappa)
}

fn draw_gamma_dist<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> Result<f64> {
    if !(rate > 0.0) {
        return Err(Error::Numerical(format!("non-positive rate {rate}")));
    }
    let g = Gamma::new(shape, 1.0 / rate)
        .map_err(|e| Error::Numerical(format!("gamma({shape}, {rate}): {e}")))?;
    Ok(g.sample(rng))
}

/// Exact Gibbs draws of `(τ, γ)` given `c` for the unconstrained model.
pub fn draw_precisions<R: Rng + ?Sized>(
    c: &[f64],
    problem: &FreqProblem,
    q: &PenaltyQuadratic,
    hyper: &Hyperparams,
    rng: &mut R,
) -> Result<(f64, f64)> {
    let (st, rt) = tau_conditional(problem.rss(c), problem.n_obs(), hyper);
    let (sg, rg) = gamma_conditional(c, q, hyper)?;
    Ok((draw_gamma_dist(st, rt, rng)?, draw_gamma_dist(sg, rg, rng)?))
}

/// Starting point of a chain.
#[derive(Debug, Clone, PartialEq)]
pub enum ChainInit {
    /// Profiled frequentist fit from the configured θ₀.
    Frequentist,
    Given { theta: Vec<f64>, gamma: f64, tau: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainSettings {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    /// Initial θ proposal sd relative to |θ|; adapted during burn-in.
    pub theta_step: f64,
    pub log_gamma_step: f64,
    pub log_tau_step: f64,
    pub log_kappa_step: f64,
    pub target_accept: f64,
    pub min_accept: f64,
    /// Sample κ with its Gamma prior instead of holding it fixed.
    pub random_kappa: bool,
    pub init: ChainInit,
}

impl Default for ChainSettings {
    fn default() -> Self {
        Self {
            iterations: 20_000,
            burn_in: 5_000,
            thin: 1,
            theta_step: 1e-3,
            log_gamma_step: 0.5,
            log_tau_step: 0.03,
            log_kappa_step: 0.5,
            target_accept: 0.35,
            min_accept: 0.05,
            random_kappa: false,
            init: ChainInit::Frequentist,
        }
    }
}

impl ChainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.burn_in >= self.iterations {
            return Err(Error::invalid(format!(
                "need 0 ≤ burn-in < iterations, got {} and {}",
                self.burn_in, self.iterations
            )));
        }
        if self.thin == 0 {
            return Err(Error::invalid("thinning must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorChain {
    /// Column names: θ names, then `gamma`, `tau` and `kappa` when present.
    pub names: Vec<String>,
    /// Kept draws, one row per iteration after burn-in and thinning.
    pub draws: Vec<Vec<f64>>,
    pub log_posterior: Vec<f64>,
    /// Post-burn-in acceptance rate per block.
    pub acceptance: Vec<(String, f64)>,
    pub settings: ChainSettings,
    pub seed: u64,
    pub init: Vec<f64>,
    /// Final θ proposal standard deviations after adaptation.
    pub theta_proposal_sd: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainSummary {
    pub names: Vec<String>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub hpd80: Vec<(f64, f64)>,
    pub hpd95: Vec<(f64, f64)>,
}

impl PosteriorChain {
    pub fn column(&self, k: usize) -> Vec<f64> {
        self.draws.iter().map(|d| d[k]).collect()
    }

    pub fn column_by_name(&self, name: &str) -> Option<Vec<f64>> {
        self.names.iter().position(|n| n == name).map(|k| self.column(k))
    }

    pub fn summary(&self) -> Result<ChainSummary> {
        let k = self.names.len();
        let mut s = ChainSummary {
            names: self.names.clone(),
            mean: vec![],
            sd: vec![],
            hpd80: vec![],
            hpd95: vec![],
        };
        for j in 0..k {
            let col = self.column(j);
            let n = col.len() as f64;
            let m = col.iter().sum::<f64>() / n;
            let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
            s.mean.push(m);
            s.sd.push(v.sqrt());
            s.hpd80.push(hpd_interval(&col, 0.8)?);
            s.hpd95.push(hpd_interval(&col, 0.95)?);
        }
        Ok(s)
    }

    /// Writes the kept draws as comma-separated text.
    pub fn write_csv(&self, path: &Path, prelude: &[String]) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let io = |e| Error::io(path, e);
        for p in prelude {
            writeln!(w, "# {p}").map_err(io)?;
        }
        writeln!(w, "iter,{},log_post", self.names.join(",")).map_err(io)?;
        for (i, (d, lp)) in self.draws.iter().zip(&self.log_posterior).enumerate() {
            let row: Vec<String> = d.iter().map(|x| format!("{x:.12e}")).collect();
            writeln!(w, "{i},{},{lp:.12e}", row.join(",")).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// Shortest interval containing `⌈level·n⌉` of the sorted draws.
pub fn hpd_interval(draws: &[f64], level: f64) -> Result<(f64, f64)> {
    if draws.len() < 100 {
        return Err(Error::invalid(format!(
            "an HPD interval needs at least 100 draws, got {}",
            draws.len()
        )));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!("level must lie in (0, 1), got {level}")));
    }
    let mut s = draws.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let m = ((level * n as f64).ceil() as usize).clamp(1, n);
    let mut best = (s[0], s[m - 1]);
    for i in 1..=(n - m) {
        if s[i + m - 1] - s[i] < best.1 - best.0 {
            best = (s[i], s[i + m - 1]);
        }
    }
    Ok(best)
}

/// Batch length for proposal adaptation during burn-in.
const ADAPT_BATCH: usize = 50;

struct Adapter {
    log_scale: f64,
    accepted: usize,
    tried: usize,
    batches: usize,
}

impl Adapter {
    fn new(scale: f64) -> Self {
        Self {
            log_scale: scale.ln(),
            accepted: 0,
            tried: 0,
            batches: 0,
        }
    }

    fn scale(&self) -> f64 {
        self.log_scale.exp()
    }

    fn record(&mut self, accepted: bool) {
        self.tried += 1;
        if accepted {
            self.accepted += 1;
        }
    }

    /// Nudges the log step toward the target rate at the end of each batch.
    fn adapt(&mut self, target: f64) {
        if self.tried < ADAPT_BATCH {
            return;
        }
        self.batches += 1;
        let rate = self.accepted as f64 / self.tried as f64;
        let delta = (1.0 / (self.batches as f64).sqrt()).min(0.5);
        self.log_scale += if rate > target { delta } else { -delta };
        self.accepted = 0;
        self.tried = 0;
    }

    fn reset(&mut self) {
        self.accepted = 0;
        self.tried = 0;
    }
}

/// Lower Cholesky factor of a small symmetric positive definite matrix,
/// or `None` when it is not numerically definite.
fn small_cholesky(cov: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let d = cov.len();
    let mut l = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let v = cov[i][i] - s;
                if !(v > 0.0) {
                    return None;
                }
                l[i][j] = v.sqrt();
            } else {
                l[i][j] = (cov[i][j] - s) / l[j][j];
            }
        }
    }
    Some(l)
}

/// Metropolis-within-Gibbs on the marginal posterior: a Gaussian random-walk
/// block for the free θ components, then log-scale random walks for γ, τ
/// (and κ when random). During burn-in each block's step is tuned toward
/// `target_accept`, and the θ proposal shape follows the empirical
/// covariance of the burn-in draws. Nothing adapts after burn-in.
pub fn run_chain(
    model: &MarginalModel,
    problem: &FreqProblem,
    settings: &ChainSettings,
    theta0: &[f64],
    seed: u64,
) -> Result<PosteriorChain> {
    settings.validate()?;
    let n_theta = model.n_theta();
    if theta0.len() != n_theta {
        return Err(Error::DimensionMismatch(format!(
            "{} starting values for {n_theta} parameters",
            theta0.len()
        )));
    }
    let (mut theta, mut gamma, mut tau) = match &settings.init {
        ChainInit::Given { theta, gamma, tau } => (theta.clone(), *gamma, *tau),
        ChainInit::Frequentist => {
            let mode = match model.kappa {
                Some(kappa) => ConstraintMode::LeastSquares { kappa },
                None => ConstraintMode::None,
            };
            let fit = fit_frequentist(problem, mode, theta0, &FreqSettings::default())?;
            (fit.theta_hat, fit.gamma_hat, fit.tau_hat)
        }
    };
    let free: Vec<usize> = (0..n_theta)
        .filter(|&k| !matches!(model.hyper.theta(k), ThetaPrior::Fixed(_)))
        .collect();
    for k in 0..n_theta {
        if let ThetaPrior::Fixed(v) = model.hyper.theta(k) {
            theta[k] = *v;
        }
    }
    let mut kappa = model.kappa.unwrap_or(0.0);
    let random_kappa = settings.random_kappa && model.kappa.is_some();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q = model.penalty(&theta)?;
    let mut v1 = model.v1_state(&q, gamma, kappa)?;
    let mut lp = model.marginal_from(&v1, &theta, gamma, tau, kappa);
    if !lp.is_finite() {
        return Err(Error::Sampler(format!(
            "log posterior is not finite at the starting point θ = {theta:?}, γ = {gamma:e}, τ = {tau:e}"
        )));
    }
    let init_state: Vec<f64> = {
        let mut v = theta.clone();
        v.extend([gamma, tau]);
        if model.kappa.is_some() {
            v.push(kappa);
        }
        v
    };

    let d = free.len();
    let base_sd: Vec<f64> = free
        .iter()
        .map(|&k| settings.theta_step * theta[k].abs().max(1e-3))
        .collect();
    // proposal: θ_free + scale · L z, with L the shape factor
    let mut shape: Vec<Vec<f64>> = (0..d)
        .map(|i| (0..d).map(|j| if i == j { base_sd[i] } else { 0.0 }).collect())
        .collect();
    let mut a_theta = Adapter::new(1.0);
    let mut a_gamma = Adapter::new(settings.log_gamma_step);
    let mut a_tau = Adapter::new(settings.log_tau_step);
    let mut a_kappa = Adapter::new(settings.log_kappa_step);
    let mut history: Vec<Vec<f64>> = Vec::new();
    let mut counts = [(0usize, 0usize); 4];

    let mut names: Vec<String> = model.problem.assembler().pde().theta_names().to_vec();
    names.push("gamma".into());
    names.push("tau".into());
    if model.kappa.is_some() {
        names.push("kappa".into());
    }
    let mut draws = Vec::new();
    let mut log_post = Vec::new();
    let mut q_prop = q.clone();

    for it in 0..settings.iterations {
        let burning = it < settings.burn_in;

        // θ block
        if d > 0 {
            let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let s = a_theta.scale();
            let mut prop = theta.clone();
            for i in 0..d {
                let step: f64 = (0..=i).map(|j| shape[i][j] * z[j]).sum();
                prop[free[i]] += s * step;
            }
            let mut accepted = false;
            if model.hyper.log_theta_prior(&prop).is_finite()
                && model.problem.assembler().assemble_into(&prop, &mut q_prop).is_ok()
            {
                if let Ok(v1p) = model.v1_state(&q_prop, gamma, kappa) {
                    let lpp = model.marginal_from(&v1p, &prop, gamma, tau, kappa);
                    if lpp.is_finite() && rng.random::<f64>().ln() < lpp - lp {
                        theta = prop;
                        std::mem::swap(&mut q, &mut q_prop);
                        v1 = v1p;
                        lp = lpp;
                        accepted = true;
                    }
                }
            }
            a_theta.record(accepted);
            if !burning {
                counts[0].1 += 1;
                counts[0].0 += accepted as usize;
            }
        }

        // γ on the log scale; the Jacobian adds log γ to the target
        {
            let e: f64 = rng.sample(StandardNormal);
            let gp = gamma * (a_gamma.scale() * e).exp();
            let mut accepted = false;
            if let Ok(v1p) = model.v1_state(&q, gp, kappa) {
                let lpp = model.marginal_from(&v1p, &theta, gp, tau, kappa);
                if lpp.is_finite()
                    && rng.random::<f64>().ln() < lpp - lp + (gp / gamma).ln()
                {
                    gamma = gp;
                    v1 = v1p;
                    lp = lpp;
                    accepted = true;
                }
            }
            a_gamma.record(accepted);
            if !burning {
                counts[1].1 += 1;
                counts[1].0 += accepted as usize;
            }
        }

        // τ on the log scale, reusing the V₁ factorization
        {
            let e: f64 = rng.sample(StandardNormal);
            let tp = tau * (a_tau.scale() * e).exp();
            let lpp = model.marginal_from(&v1, &theta, gamma, tp, kappa);
            let accepted =
                lpp.is_finite() && rng.random::<f64>().ln() < lpp - lp + (tp / tau).ln();
            if accepted {
                tau = tp;
                lp = lpp;
            }
            a_tau.record(accepted);
            if !burning {
                counts[2].1 += 1;
                counts[2].0 += accepted as usize;
            }
        }

        if random_kappa {
            let e: f64 = rng.sample(StandardNormal);
            let kp = kappa * (a_kappa.scale() * e).exp();
            let mut accepted = false;
            if let Ok(v1p) = model.v1_state(&q, gamma, kp) {
                let lpp = model.marginal_from(&v1p, &theta, gamma, tau, kp);
                if lpp.is_finite() && rng.random::<f64>().ln() < lpp - lp + (kp / kappa).ln() {
                    kappa = kp;
                    v1 = v1p;
                    lp = lpp;
                    accepted = true;
                }
            }
            a_kappa.record(accepted);
            if !burning {
                counts[3].1 += 1;
                counts[3].0 += accepted as usize;
            }
        }

        if burning {
            if d > 0 {
                history.push(free.iter().map(|&k| theta[k]).collect());
            }
            let batch_end = a_gamma.tried >= ADAPT_BATCH;
            a_theta.adapt(settings.target_accept);
            a_gamma.adapt(settings.target_accept);
            a_tau.adapt(settings.target_accept);
            a_kappa.adapt(settings.target_accept);
            // reshape the θ proposal from the second half of the draws so far
            if batch_end && d > 0 && history.len() >= 500 && (it + 1) % (10 * ADAPT_BATCH) == 0 {
                let recent = &history[history.len() / 2..];
                if let Some(l) = empirical_shape(recent) {
                    shape = l;
                    a_theta.log_scale = (2.38 / (d as f64).sqrt()).ln();
                    a_theta.batches = a_theta.batches.min(4);
                }
            }
            if it + 1 == settings.burn_in {
                a_theta.reset();
                a_gamma.reset();
                a_tau.reset();
                a_kappa.reset();
            }
        } else if (it - settings.burn_in) % settings.thin == 0 {
            let mut row = theta.clone();
            row.extend([gamma, tau]);
            if model.kappa.is_some() {
                row.push(kappa);
            }
            draws.push(row);
            log_post.push(lp);
        }
    }

    let labels = ["theta", "gamma", "tau", "kappa"];
    let mut acceptance = Vec::new();
    for (b, (acc, tried)) in counts.iter().enumerate() {
        if *tried == 0 {
            continue;
        }
        let rate = *acc as f64 / *tried as f64;
        acceptance.push((labels[b].to_string(), rate));
        if rate < settings.min_accept {
            return Err(Error::Sampler(format!(
                "{} block acceptance {:.3} is below {} after adaptation",
                labels[b], rate, settings.min_accept
            )));
        }
    }
    let s = a_theta.scale();
    let theta_proposal_sd = (0..d)
        .map(|i| s * (0..=i).map(|j| shape[i][j].powi(2)).sum::<f64>().sqrt())
        .collect();
    Ok(PosteriorChain {
        names,
        draws,
        log_posterior: log_post,
        acceptance,
        settings: settings.clone(),
        seed,
        init: init_state,
        theta_proposal_sd,
    })
}

fn empirical_shape(draws: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = draws.len() as f64;
    let d = draws[0].len();
    let mean: Vec<f64> = (0..d)
        .map(|j| draws.iter().map(|x| x[j]).sum::<f64>() / n)
        .collect();
    let mut cov = vec![vec![0.0; d]; d];
    for x in draws {
        for i in 0..d {
            for j in 0..=i {
                cov[i][j] += (x[i] - mean[i]) * (x[j] - mean[j]) / (n - 1.0);
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            cov[j][i] = cov[i][j];
        }
        // keep the shape proper even for a stuck coordinate
        cov[i][i] += 1e-12 * mean[i].abs().max(1e-12).powi(2);
    }
    small_cholesky(&cov)
}

/// Full Gibbs sampler over `(c, τ, γ)` at fixed θ, unconstrained prior.
/// Only used to cross-check the marginal sampler on small problems.
pub fn run_gibbs(
    model: &MarginalModel,
    theta: &[f64],
    iterations: usize,
    burn_in: usize,
    init: (f64, f64),
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    if model.has_conditions() {
        return Err(Error::invalid("the Gibbs cross-check supports the unconstrained prior only"));
    }
    let q = model.penalty(theta)?;
    let (mut tau, mut gamma) = init;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(iterations.saturating_sub(burn_in));
    for it in 0..iterations {
        let prior = prior_parts(&q, gamma, None, 0.0)?;
        let c = draw_coefficients(&prior, &model.problem, tau, &mut rng)?;
        let (t, g) = draw_precisions(&c, &model.problem, &q, &model.hyper, &mut rng)?;
        tau = t;
        gamma = g;
        if it >= burn_in {
            out.push((tau, gamma));
        }
    }
    Ok(out)
}
