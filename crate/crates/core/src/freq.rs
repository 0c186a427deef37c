//! Frequentist estimation: penalized ridge solves for the coefficients,
//! soft and hard condition handling, profiling of (θ, τ), Schall updates
//! of the adhesion γ and residual bootstrap intervals.
//!
//! Internally every coefficient vector is kept in the band order of the
//! penalty's [`CoefLayout`]; the public functions take and return the
//! public (dimension-1-fastest) order.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use crate::band::{dot, BandCholesky, SymBand};
use crate::basis::{CoefLayout, DesignMatrix};
use crate::error::{Error, Result};
use crate::optim::{nelder_mead, NelderMeadOptions};
use crate::pde::{ConstraintSet, PenaltyAssembler, PenaltyQuadratic};
use crate::rng::rng_for;

/// Relative size of the diagonal ridge used when a system fails to factor.
pub const RIDGE_FLOOR: f64 = 1e-10;
/// Eigenvalues of R below this fraction of ‖R‖∞ count as null directions.
pub const NULL_EIG_FRACTION: f64 = 1e-9;
pub const DEFAULT_KAPPA: f64 = 1e6;
/// Default start puts the penalty this many times above the data term
/// (trace ratio), so the first θ search sees the PDE.
pub const GAMMA0_DOMINANCE: f64 = 1e4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConstraintMode {
    None,
    /// Soft conditions `κ‖Hc − v‖²` added to the criterion.
    LeastSquares { kappa: f64 },
    /// Hard conditions `Hc = v` through Lagrange multipliers.
    Lagrange,
}

impl ConstraintMode {
    pub fn name(&self) -> &'static str {
        match self {
            ConstraintMode::None => "none",
            ConstraintMode::LeastSquares { .. } => "ls",
            ConstraintMode::Lagrange => "lagrange",
        }
    }
}

fn factor(build: impl Fn() -> SymBand) -> Result<(BandCholesky, bool)> {
    let a = build();
    let floor = RIDGE_FLOOR * a.mean_diag().abs().max(f64::MIN_POSITIVE);
    match a.into_cholesky() {
        Ok(chol) => Ok((chol, false)),
        Err(_) => {
            let mut a = build();
            a.add_diag(floor);
            a.into_cholesky().map(|chol| (chol, true)).map_err(|e| {
                Error::SingularSystem(format!("{e}; ridge floor {floor:e} was not enough"))
            })
        }
    }
}

/// Rows of `H` as band-order vectors.
fn h_rows_band(h: &DesignMatrix, layout: &CoefLayout) -> Vec<Vec<(usize, f64)>> {
    (0..h.n_rows())
        .map(|i| {
            let (cols, vals) = h.row(i);
            cols.iter()
                .zip(vals)
                .map(|(&c, &v)| (layout.band_index(c), v))
                .collect()
        })
        .collect()
}

/// Indices of condition rows that are linear combinations of earlier rows
/// (modified Gram–Schmidt with a relative tolerance).
pub fn redundant_rows(h: &DesignMatrix) -> Vec<usize> {
    let dense = h.to_dense();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut redundant = Vec::new();
    for i in 0..dense.nrows() {
        let mut v: DVector<f64> = dense.row(i).transpose();
        let norm0 = v.norm();
        for b in &basis {
            let proj = b.dot(&v);
            v.axpy(-proj, b, 1.0);
        }
        // second pass for numerical orthogonality
        for b in &basis {
            let proj = b.dot(&v);
            v.axpy(-proj, b, 1.0);
        }
        let norm = v.norm();
        if norm0 == 0.0 || norm <= 1e-10 * norm0 {
            redundant.push(i);
        } else {
            basis.push(v / norm);
        }
    }
    redundant
}

/// Data, penalty and conditions of one fit, with the θ-free products
/// `BᵀB`, `Bᵀζ`, `HᵀH`, `Hᵀv` precomputed in band order.
#[derive(Debug, Clone)]
pub struct FreqProblem {
    assembler: PenaltyAssembler,
    design: DesignMatrix,
    zeta: Vec<f64>,
    btb: SymBand,
    btz: Vec<f64>,
    cons: Option<Constraints>,
}

#[derive(Debug, Clone)]
struct Constraints {
    set: ConstraintSet,
    hth: SymBand,
    htv: Vec<f64>,
    rows: Vec<Vec<(usize, f64)>>,
}

impl FreqProblem {
    pub fn new(
        assembler: PenaltyAssembler,
        design: DesignMatrix,
        zeta: Vec<f64>,
        cons: Option<ConstraintSet>,
    ) -> Result<Self> {
        let layout = assembler.layout().clone();
        if design.n_cols() != layout.n() {
            return Err(Error::DimensionMismatch(format!(
                "design has {} columns, basis has {} coefficients",
                design.n_cols(),
                layout.n()
            )));
        }
        if design.n_rows() != zeta.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} design rows for {} observations",
                design.n_rows(),
                zeta.len()
            )));
        }
        if zeta.is_empty() || zeta.iter().any(|z| !z.is_finite()) {
            return Err(Error::Data("observations must be non-empty and finite".into()));
        }
        let btb = design.gram(&layout);
        let btz = layout.to_band_vec(&design.tmul_vec(&zeta));
        let cons = match cons {
            None => None,
            Some(set) => {
                if set.h().n_cols() != layout.n() {
                    return Err(Error::DimensionMismatch(
                        "condition matrix does not match the basis".into(),
                    ));
                }
                Some(Constraints {
                    hth: set.h().gram(&layout),
                    htv: set.htv_band(&layout),
                    rows: h_rows_band(set.h(), &layout),
                    set,
                })
            }
        };
        Ok(Self {
            assembler,
            design,
            zeta,
            btb,
            btz,
            cons,
        })
    }

    pub fn assembler(&self) -> &PenaltyAssembler {
        &self.assembler
    }

    pub fn layout(&self) -> &CoefLayout {
        self.assembler.layout()
    }

    pub fn design(&self) -> &DesignMatrix {
        &self.design
    }

    pub fn zeta(&self) -> &[f64] {
        &self.zeta
    }

    pub fn n_obs(&self) -> usize {
        self.zeta.len()
    }

    pub fn constraints(&self) -> Option<&ConstraintSet> {
        self.cons.as_ref().map(|c| &c.set)
    }

    pub(crate) fn btb(&self) -> &SymBand {
        &self.btb
    }

    pub(crate) fn btz(&self) -> &[f64] {
        &self.btz
    }

    pub(crate) fn hth_htv(&self) -> Option<(&SymBand, &[f64])> {
        self.cons.as_ref().map(|c| (&c.hth, c.htv.as_slice()))
    }

    /// Same problem with new observations at the same points.
    pub fn with_zeta(&self, zeta: Vec<f64>) -> Result<Self> {
        if zeta.len() != self.zeta.len() {
            return Err(Error::DimensionMismatch("replacement data length differs".into()));
        }
        let btz = self
            .layout()
            .to_band_vec(&self.design.tmul_vec(&zeta));
        Ok(Self {
            zeta,
            btz,
            ..self.clone()
        })
    }

    fn require_cons(&self, mode: ConstraintMode) -> Result<Option<&Constraints>> {
        match mode {
            ConstraintMode::None => Ok(None),
            _ => self
                .cons
                .as_ref()
                .map(Some)
                .ok_or_else(|| Error::invalid(format!("mode '{}' needs conditions", mode.name()))),
        }
    }

    /// Residual sum of squares of public-order coefficients.
    pub fn rss(&self, c_public: &[f64]) -> f64 {
        self.design
            .mul_vec(c_public)
            .iter()
            .zip(&self.zeta)
            .map(|(f, z)| (z - f).powi(2))
            .sum()
    }

    fn rss_band(&self, c_band: &[f64]) -> f64 {
        self.rss(&self.layout().to_public_vec(c_band))
    }

    /// Inner solve at fixed `(θ, τ, γ)` using an already assembled penalty.
    fn solve_with(
        &self,
        q: &PenaltyQuadratic,
        tau: f64,
        gamma: f64,
        mode: ConstraintMode,
    ) -> Result<Inner> {
        let cons = self.require_cons(mode)?;
        let soft = match (mode, cons) {
            (ConstraintMode::LeastSquares { kappa }, Some(c)) if kappa > 0.0 => Some((kappa, c)),
            _ => None,
        };
        let build = || {
            let mut a = self.btb.scaled(tau);
            a.axpy(gamma, q.band());
            if let Some((kappa, c)) = soft {
                a.axpy(kappa, &c.hth);
            }
            a
        };
        let mut b: Vec<f64> = self
            .btz
            .iter()
            .zip(q.r_band())
            .map(|(z, r)| tau * z - gamma * r)
            .collect();
        if let Some((kappa, c)) = soft {
            for (bi, hv) in b.iter_mut().zip(&c.htv) {
                *bi += kappa * hv;
            }
        }
        let (chol, floored) = factor(build)?;
        let mut c = chol.solve(&b);
        let mut lagrange = None;
        if let (ConstraintMode::Lagrange, Some(cons)) = (mode, cons) {
            let parts = LagrangeParts::new(&chol, cons)?;
            let omega = parts.project(&mut c, cons)?;
            lagrange = Some((parts, omega));
        }
        Ok(Inner {
            c,
            chol,
            floored,
            lagrange,
        })
    }
}

struct Inner {
    c: Vec<f64>,
    chol: BandCholesky,
    floored: bool,
    lagrange: Option<(LagrangeParts, Vec<f64>)>,
}

/// `W = A⁻¹Hᵀ` and the factored Schur complement `G = HA⁻¹Hᵀ`.
struct LagrangeParts {
    w: Vec<Vec<f64>>,
    g: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl LagrangeParts {
    fn new(chol: &BandCholesky, cons: &Constraints) -> Result<Self> {
        let n = chol.dim();
        let k = cons.rows.len();
        let w: Vec<Vec<f64>> = cons
            .rows
            .iter()
            .map(|row| {
                let mut e = vec![0.0; n];
                for &(j, v) in row {
                    e[j] += v;
                }
                chol.solve_in_place(&mut e);
                e
            })
            .collect();
        let mut g = DMatrix::zeros(k, k);
        for i in 0..k {
            for j in 0..=i {
                let v: f64 = cons.rows[i].iter().map(|&(c, h)| h * w[j][c]).sum();
                g[(i, j)] = v;
                g[(j, i)] = v;
            }
        }
        let g = nalgebra::Cholesky::new(g).ok_or_else(|| {
            let rows = redundant_rows(cons.set.h());
            if rows.is_empty() {
                Error::SingularSystem("condition Schur complement is not positive definite".into())
            } else {
                Error::RedundantConditions { rows }
            }
        })?;
        Ok(Self { w, g })
    }

    fn h_times(cons: &Constraints, c: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            cons.rows.len(),
            cons.rows
                .iter()
                .map(|row| row.iter().map(|&(j, v)| v * c[j]).sum::<f64>()),
        )
    }

    /// Moves the unconstrained solution `c` onto `Hc = v`, returning ω.
    fn project(&self, c: &mut [f64], cons: &Constraints) -> Result<Vec<f64>> {
        let v = DVector::from_column_slice(cons.set.v());
        let tol = 1e-10 * (1.0 + cons.set.v_norm_inf());
        let mut omega = DVector::zeros(v.len());
        // the first pass computes ω; later passes refine Hc = v
        for pass in 0..4 {
            let e = Self::h_times(cons, c) - &v;
            if pass > 0 && e.amax() <= tol {
                break;
            }
            let delta = self.g.solve(&e);
            for (wj, &d) in self.w.iter().zip(delta.iter()) {
                for (ci, wi) in c.iter_mut().zip(wj) {
                    *ci -= d * wi;
                }
            }
            omega += delta;
        }
        Ok(omega.iter().copied().collect())
    }

    /// `tr(G⁻¹ WᵀMW)`, the reduction of `tr(A⁻¹M)` under the constraints.
    fn trace_correction(&self, m: &SymBand) -> f64 {
        let k = self.w.len();
        let mw: Vec<Vec<f64>> = self.w.iter().map(|w| m.mul_vec(w)).collect();
        let mut x = DMatrix::zeros(k, k);
        for i in 0..k {
            for j in 0..=i {
                let v = dot(&self.w[i], &mw[j]);
                x[(i, j)] = v;
                x[(j, i)] = v;
            }
        }
        self.g.solve(&x).trace()
    }
}

fn public_vec(layout: &CoefLayout, c: &[f64]) -> Vec<f64> {
    layout.to_public_vec(c)
}

fn problem_for(
    design: &DesignMatrix,
    zeta: &[f64],
    q: &PenaltyQuadratic,
    cons: Option<&ConstraintSet>,
) -> Result<(SymBand, Vec<f64>, Option<Constraints>)> {
    let layout = q.layout();
    if design.n_cols() != q.n() || design.n_rows() != zeta.len() {
        return Err(Error::DimensionMismatch(format!(
            "design {}×{}, data {}, penalty {}",
            design.n_rows(),
            design.n_cols(),
            zeta.len(),
            q.n()
        )));
    }
    let btb = design.gram(layout);
    let btz = layout.to_band_vec(&design.tmul_vec(zeta));
    let cons = cons.map(|set| Constraints {
        hth: set.h().gram(layout),
        htv: set.htv_band(layout),
        rows: h_rows_band(set.h(), layout),
        set: set.clone(),
    });
    Ok((btb, btz, cons))
}

fn check_precisions(tau: f64, gamma: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) || !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::invalid(format!(
            "need τ > 0 and γ ≥ 0, got τ = {tau}, γ = {gamma}"
        )));
    }
    Ok(())
}

fn solve_standalone(
    design: &DesignMatrix,
    zeta: &[f64],
    q: &PenaltyQuadratic,
    tau: f64,
    gamma: f64,
    cons: Option<&ConstraintSet>,
    mode: ConstraintMode,
) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
    check_precisions(tau, gamma)?;
    let (btb, btz, cons) = problem_for(design, zeta, q, cons)?;
    let soft = match (mode, &cons) {
        (ConstraintMode::LeastSquares { kappa }, Some(c)) => Some((kappa, c)),
        _ => None,
    };
    let build = || {
        let mut a = btb.scaled(tau);
        a.axpy(gamma, q.band());
        if let Some((kappa, c)) = soft {
            a.axpy(kappa, &c.hth);
        }
        a
    };
    let mut b: Vec<f64> = btz
        .iter()
        .zip(q.r_band())
        .map(|(z, r)| tau * z - gamma * r)
        .collect();
    if let Some((kappa, c)) = soft {
        for (bi, hv) in b.iter_mut().zip(&c.htv) {
            *bi += kappa * hv;
        }
    }
    let (chol, _) = factor(build)?;
    let mut c = chol.solve(&b);
    let mut omega = None;
    if let (ConstraintMode::Lagrange, Some(cons)) = (mode, &cons) {
        let redundant = redundant_rows(cons.set.h());
        if !redundant.is_empty() {
            return Err(Error::RedundantConditions { rows: redundant });
        }
        let parts = LagrangeParts::new(&chol, cons)?;
        omega = Some(parts.project(&mut c, cons)?);
    }
    Ok((public_vec(q.layout(), &c), omega))
}

/// `(τBᵀB + γR)⁻¹(τBᵀζ − γr)`.
pub fn solve_ridge(
    design: &DesignMatrix,
    zeta: &[f64],
    q: &PenaltyQuadratic,
    tau: f64,
    gamma: f64,
) -> Result<Vec<f64>> {
    Ok(solve_standalone(design, zeta, q, tau, gamma, None, ConstraintMode::None)?.0)
}

/// `(τBᵀB + γR + κHᵀH)⁻¹(τBᵀζ − γr + κHᵀv)`.
pub fn solve_ls_constrained(
    design: &DesignMatrix,
    zeta: &[f64],
    q: &PenaltyQuadratic,
    tau: f64,
    gamma: f64,
    cons: &ConstraintSet,
    kappa: f64,
) -> Result<Vec<f64>> {
    if !(kappa >= 0.0) {
        return Err(Error::invalid(format!("κ must be non-negative, got {kappa}")));
    }
    let mode = ConstraintMode::LeastSquares { kappa };
    Ok(solve_standalone(design, zeta, q, tau, gamma, Some(cons), mode)?.0)
}

/// Solves the bordered system `[[τBᵀB + γR, Hᵀ], [H, 0]] [c; ω] = [τBᵀζ − γr; v]`
/// through its Schur complement.
pub fn solve_lagrange(
    design: &DesignMatrix,
    zeta: &[f64],
    q: &PenaltyQuadratic,
    tau: f64,
    gamma: f64,
    cons: &ConstraintSet,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (c, omega) =
        solve_standalone(design, zeta, q, tau, gamma, Some(cons), ConstraintMode::Lagrange)?;
    Ok((c, omega.unwrap_or_default()))
}

/// Outcome of one Schall step.
#[derive(Debug, Clone, PartialEq)]
pub struct SchallStep {
    pub gamma: f64,
    /// PEN was not positive, so γ was multiplied by 10 instead.
    pub escalated: bool,
    pub trace_s: f64,
    pub penalty_df: f64,
    pub null_dim: usize,
    pub pen: f64,
}

/// Effective dimensions of the influence decomposition for the system that
/// produced `inner`: `(tr S, tr(A⁻¹R))`, with the constrained inverse in
/// Lagrange mode.
fn influence_traces(
    inner: &Inner,
    btb: &SymBand,
    r: &SymBand,
    tau: f64,
) -> (f64, f64) {
    let z = inner.chol.selected_inverse();
    let mut t_btb = z.frobenius_dot(btb);
    let mut t_r = z.frobenius_dot(r);
    if let Some((parts, _)) = &inner.lagrange {
        t_btb -= parts.trace_correction(btb);
        t_r -= parts.trace_correction(r);
    }
    (tau * t_btb, t_r)
}

fn schall_from(
    n_obs: usize,
    rss: f64,
    pen: f64,
    trace_s: f64,
    trace_ainv_r: f64,
    null_dim: usize,
    n_coef: usize,
    tau: f64,
    gamma: f64,
) -> SchallStep {
    let penalty_df = ((n_coef - null_dim.min(n_coef)) as f64 - gamma * trace_ainv_r).max(1.0);
    if !(pen > 0.0) || !pen.is_finite() {
        return SchallStep {
            gamma: gamma * 10.0,
            escalated: true,
            trace_s,
            penalty_df,
            null_dim,
            pen,
        };
    }
    let resid_df = (n_obs as f64 - trace_s).max(1.0);
    let ratio = (rss / resid_df) / (pen / penalty_df);
    SchallStep {
        gamma: tau * ratio,
        escalated: false,
        trace_s,
        penalty_df,
        null_dim,
        pen,
    }
}

/// Number of null directions of R, counted as eigenvalues below
/// `NULL_EIG_FRACTION · ‖R‖∞`.
pub fn penalty_null_dim(q: &PenaltyQuadratic) -> usize {
    let norm = q.band().norm_inf();
    if norm == 0.0 {
        return q.n();
    }
    q.band().count_eigenvalues_below(NULL_EIG_FRACTION * norm)
}

/// Schall update for the unconstrained fit `c` at `(τ, γ)`:
/// `γ_new = τ · (RSS / (N − tr S)) / (PEN / (tr S − q))`, so that `γ/τ`
/// equals the ratio of residual variance to penalty variance.
pub fn schall_update(
    design: &DesignMatrix,
    zeta: &[f64],
    c: &[f64],
    q: &PenaltyQuadratic,
    tau: f64,
    gamma: f64,
) -> Result<SchallStep> {
    check_precisions(tau, gamma)?;
    let (btb, _, _) = problem_for(design, zeta, q, None)?;
    let (chol, floored) = factor(|| {
        let mut a = btb.scaled(tau);
        a.axpy(gamma, q.band());
        a
    })?;
    let inner = Inner {
        c: q.layout().to_band_vec(c),
        chol,
        floored,
        lagrange: None,
    };
    let (trace_s, t_r) = influence_traces(&inner, &btb, q.band(), tau);
    let rss: f64 = design
        .mul_vec(c)
        .iter()
        .zip(zeta)
        .map(|(f, z)| (z - f).powi(2))
        .sum();
    let pen = q.value_band(&inner.c);
    Ok(schall_from(
        zeta.len(),
        rss,
        pen,
        trace_s,
        t_r,
        penalty_null_dim(q),
        q.n(),
        tau,
        gamma,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FreqSettings {
    pub max_iter: usize,
    /// Relative change of (θ, γ) below which the profiling loop stops.
    pub tol: f64,
    pub nelder_mead: NelderMeadOptions,
    /// Initial simplex step, relative to |θ_k| (absolute when θ_k = 0).
    pub simplex_step: f64,
    pub gamma0: Option<f64>,
    pub tau0: Option<f64>,
}

impl Default for FreqSettings {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-6,
            nelder_mead: NelderMeadOptions::default(),
            simplex_step: 0.1,
            gamma0: None,
            tau0: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub theta: Vec<f64>,
    pub tau: f64,
    pub gamma: f64,
    /// Profiled log-likelihood `N/2 log τ − τ/2 RSS`.
    pub objective: f64,
    pub rss: f64,
    pub pen: f64,
    pub trace_s: f64,
    pub penalty_df: f64,
    pub nm_evals: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FreqFit {
    pub mode: ConstraintMode,
    /// Public coefficient order.
    pub c_hat: Vec<f64>,
    pub theta_hat: Vec<f64>,
    pub tau_hat: f64,
    pub gamma_hat: f64,
    pub kappa: Option<f64>,
    pub omega: Option<Vec<f64>>,
    pub rss: f64,
    pub trace: Vec<TraceRow>,
    pub converged: bool,
    /// Simplex searches that stopped for lack of progress.
    pub simplex_stalls: usize,
    pub gamma_escalations: usize,
    pub ridge_floor_used: bool,
}

impl FreqFit {
    pub fn iterations(&self) -> usize {
        self.trace.len()
    }
}

fn variance(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n
}

/// Aitken Δ² extrapolation of the last three plain Schall iterates of
/// `ln γ`, used only while they contract monotonically.
fn aitken(g: &[f64]) -> Option<f64> {
    if g.len() < 3 {
        return None;
    }
    let (g0, g1, g2) = (g[g.len() - 3], g[g.len() - 2], g[g.len() - 1]);
    let (d1, d2) = (g1 - g0, g2 - g1);
    let ratio = d2 / d1;
    if !(ratio > 0.0 && ratio < 0.95) || d2.abs() < 1e-12 {
        return None;
    }
    let step = d2 * ratio / (1.0 - ratio);
    Some(g2 + step.clamp(-std::f64::consts::LN_10, std::f64::consts::LN_10))
}

/// `GAMMA0_DOMINANCE · τ₀ · tr(BᵀB) / tr R(θ₀)`, or 1 when R(θ₀) has no trace.
///
/// Starting from a weak penalty lets the profiled RSS ignore θ, and the
/// Schall update then settles on a nearly unpenalized fixed point.
pub fn default_gamma0(problem: &FreqProblem, q: &PenaltyQuadratic, tau0: f64) -> f64 {
    let tr_r: f64 = q.band().diag().iter().sum();
    let tr_b: f64 = problem.btb.diag().iter().sum();
    let g = GAMMA0_DOMINANCE * tau0 * tr_b / tr_r;
    if g.is_finite() && g > 0.0 {
        g
    } else {
        1.0
    }
}

/// Profiling loop: (a) inner solve, (b) Nelder–Mead over θ of the profiled
/// likelihood at fixed (τ, γ), then τ = N/RSS, (c) Schall update of γ.
pub fn fit_frequentist(
    problem: &FreqProblem,
    mode: ConstraintMode,
    theta0: &[f64],
    settings: &FreqSettings,
) -> Result<FreqFit> {
    let pde_n = problem.assembler.pde().n_theta();
    if theta0.len() != pde_n {
        return Err(Error::DimensionMismatch(format!(
            "{} starting values for {pde_n} parameters",
            theta0.len()
        )));
    }
    problem.require_cons(mode)?;
    if let (ConstraintMode::Lagrange, Some(c)) = (mode, &problem.cons) {
        let redundant = redundant_rows(c.set.h());
        if !redundant.is_empty() {
            return Err(Error::RedundantConditions { rows: redundant });
        }
    }
    let n_obs = problem.n_obs();
    let n_coef = problem.layout().n();
    let mut theta = theta0.to_vec();
    let mut tau = match settings.tau0 {
        Some(t) => t,
        None => {
            let v = variance(&problem.zeta);
            if v > 0.0 {
                1.0 / v
            } else {
                1.0
            }
        }
    };
    let mut q = problem.assembler.assemble(&theta)?;
    let mut gamma = match settings.gamma0 {
        Some(g) => g,
        None => default_gamma0(problem, &q, tau),
    };
    check_precisions(tau, gamma)?;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut stalls = 0;
    let mut escalations = 0;
    let mut floored_any = false;

    let mut last_move: Option<Vec<f64>> = None;
    let mut log_gammas = vec![gamma.ln()];
    for iter in 0..settings.max_iter {
        // (b) θ search at fixed (τ, γ); the inner solve depends on γ/τ only.
        // Later searches start from a simplex sized to the previous move.
        let step: Vec<f64> = theta
            .iter()
            .enumerate()
            .map(|(k, &t)| {
                let full = if t != 0.0 {
                    settings.simplex_step * t.abs()
                } else {
                    settings.simplex_step
                };
                match &last_move {
                    Some(m) => (4.0 * m[k]).clamp(1e-4 * full, full),
                    None => full,
                }
            })
            .collect();
        let mut scratch = q.clone();
        let nm = nelder_mead(
            |th| {
                if problem.assembler.assemble_into(th, &mut scratch).is_err() {
                    return f64::INFINITY;
                }
                match problem.solve_with(&scratch, tau, gamma, mode) {
                    Ok(inner) => problem.rss_band(&inner.c),
                    Err(_) => f64::INFINITY,
                }
            },
            &theta,
            &step,
            &settings.nelder_mead,
        );
        if nm.stalled {
            stalls += 1;
        }
        if !nm.f.is_finite() {
            return Err(Error::Numerical(format!(
                "no finite objective value near θ = {theta:?}"
            )));
        }
        let new_theta = nm.x;

        // (a) inner solve at the new θ and closed-form τ
        problem.assembler.assemble_into(&new_theta, &mut q)?;
        let inner = problem.solve_with(&q, tau, gamma, mode)?;
        floored_any |= inner.floored;
        let rss = problem.rss_band(&inner.c);
        let new_tau = if rss > 0.0 { n_obs as f64 / rss } else { f64::MAX.sqrt() };

        // (c) Schall update from the system that produced ĉ
        let (trace_s, t_r) = influence_traces(&inner, &problem.btb, q.band(), tau);
        let pen = q.value_band(&inner.c);
        let step = schall_from(
            n_obs,
            rss,
            pen,
            trace_s,
            t_r,
            penalty_null_dim(&q),
            n_coef,
            new_tau,
            gamma,
        );
        if step.escalated {
            escalations += 1;
        }
        let mut new_gamma = step.gamma;
        log_gammas.push(new_gamma.ln());
        if let Some(g) = aitken(&log_gammas) {
            new_gamma = g.exp();
            log_gammas.clear();
            log_gammas.push(g);
        }

        let change = new_theta
            .iter()
            .zip(&theta)
            .map(|(a, b)| (a - b).abs() / b.abs().max(1e-12))
            .chain(std::iter::once((new_gamma - gamma).abs() / gamma))
            .fold(0.0f64, f64::max);

        trace.push(TraceRow {
            iter,
            theta: new_theta.clone(),
            tau: new_tau,
            gamma: new_gamma,
            objective: 0.5 * n_obs as f64 * new_tau.ln() - 0.5 * new_tau * rss,
            rss,
            pen,
            trace_s,
            penalty_df: step.penalty_df,
            nm_evals: nm.evals,
        });
        last_move = Some(new_theta.iter().zip(&theta).map(|(a, b)| (a - b).abs()).collect());
        theta = new_theta;
        tau = new_tau;
        gamma = new_gamma;
        if !gamma.is_finite() || gamma <= 0.0 {
            return Err(Error::Numerical(format!("adhesion update diverged (γ = {gamma})")));
        }
        if change < settings.tol {
            converged = true;
            break;
        }
    }

    // final coefficients at the returned (θ, τ, γ)
    problem.assembler.assemble_into(&theta, &mut q)?;
    let inner = problem.solve_with(&q, tau, gamma, mode)?;
    floored_any |= inner.floored;
    let rss = problem.rss_band(&inner.c);
    if rss > 0.0 {
        tau = n_obs as f64 / rss;
    }
    Ok(FreqFit {
        mode,
        c_hat: problem.layout().to_public_vec(&inner.c),
        theta_hat: theta,
        tau_hat: tau,
        gamma_hat: gamma,
        kappa: match mode {
            ConstraintMode::LeastSquares { kappa } => Some(kappa),
            _ => None,
        },
        omega: inner.lagrange.map(|(_, w)| w),
        rss,
        trace,
        converged,
        simplex_stalls: stalls,
        gamma_escalations: escalations,
        ridge_floor_used: floored_any,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapSettings {
    pub replicates: usize,
    pub seed: u64,
    /// Largest tolerated share of failed replicates.
    pub max_failed_fraction: f64,
}

impl Default for BootstrapSettings {
    fn default() -> Self {
        Self {
            replicates: 1000,
            seed: 0,
            max_failed_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bootstrap {
    /// θ estimates of the kept replicates, in replicate order.
    pub draws: Vec<Vec<f64>>,
    /// Replicates that failed or did not converge, with the reason.
    pub dropped: Vec<(usize, String)>,
}

impl Bootstrap {
    pub fn parameter(&self, k: usize) -> Vec<f64> {
        self.draws.iter().map(|d| d[k]).collect()
    }

    /// Percentile interval for parameter `k`.
    pub fn interval(&self, k: usize, level: f64) -> Result<(f64, f64)> {
        percentile_interval(&self.parameter(k), level)
    }
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Equal-tailed percentile interval.
pub fn percentile_interval(draws: &[f64], level: f64) -> Result<(f64, f64)> {
    if draws.is_empty() {
        return Err(Error::invalid("no draws for a percentile interval"));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!("level must lie in (0, 1), got {level}")));
    }
    let mut s = draws.to_vec();
    s.sort_by(f64::total_cmp);
    let a = (1.0 - level) / 2.0;
    Ok((quantile_sorted(&s, a), quantile_sorted(&s, 1.0 - a)))
}

/// Residual bootstrap: refits on `ζ* = 𝓑ĉ + e*` with `e*` resampled from the
/// centered residuals, each replicate warm-started at the original fit.
pub fn bootstrap(
    problem: &FreqProblem,
    fit: &FreqFit,
    fit_settings: &FreqSettings,
    settings: &BootstrapSettings,
) -> Result<Bootstrap> {
    if settings.replicates == 0 {
        return Err(Error::invalid("bootstrap needs at least one replicate"));
    }
    let fitted = problem.design.mul_vec(&fit.c_hat);
    let mut resid: Vec<f64> = problem
        .zeta
        .iter()
        .zip(&fitted)
        .map(|(z, f)| z - f)
        .collect();
    let mean = resid.iter().sum::<f64>() / resid.len() as f64;
    resid.iter_mut().for_each(|r| *r -= mean);
    let warm = FreqSettings {
        gamma0: Some(fit.gamma_hat),
        tau0: Some(fit.tau_hat),
        ..fit_settings.clone()
    };
    let outcomes: Vec<(usize, Result<FreqFit>)> = (0..settings.replicates)
        .into_par_iter()
        .map(|b| {
            let mut rng = rng_for(settings.seed, &[b as u64]);
            let n = resid.len();
            let zeta: Vec<f64> = fitted
                .iter()
                .map(|f| f + resid[rng.random_range(0..n)])
                .collect();
            let res = problem
                .with_zeta(zeta)
                .and_then(|p| fit_frequentist(&p, fit.mode, &fit.theta_hat, &warm));
            (b, res)
        })
        .collect();
    let mut draws = Vec::new();
    let mut dropped = Vec::new();
    for (b, res) in outcomes {
        match res {
            Ok(f) if f.converged => draws.push(f.theta_hat),
            Ok(f) => dropped.push((b, format!("not converged after {} iterations", f.iterations()))),
            Err(e) => dropped.push((b, e.to_string())),
        }
    }
    let failed = dropped.len();
    if failed as f64 > settings.max_failed_fraction * settings.replicates as f64 {
        return Err(Error::TooManyFailures {
            failed,
            total: settings.replicates,
        });
    }
    Ok(Bootstrap { draws, dropped })
}

/// Percentile bootstrap intervals, one per parameter.
pub fn bootstrap_ci(
    problem: &FreqProblem,
    fit: &FreqFit,
    fit_settings: &FreqSettings,
    settings: &BootstrapSettings,
    level: f64,
) -> Result<Vec<(f64, f64)>> {
    let boot = bootstrap(problem, fit, fit_settings, settings)?;
    (0..fit.theta_hat.len())
        .map(|k| boot.interval(k, level))
        .collect()
}
