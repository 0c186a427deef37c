//! Declarative linear PDEs, their quadratic penalty in the spline
//! coefficients, and differential conditions as linear restrictions.
//!
//! A PDE is written as `Σ_k m_k(θ) a_k(x) D^{α_k} u + Σ_f m_f(θ) f(x) = 0`
//! where every coefficient function is a product of per-dimension
//! polynomials. Squaring and integrating the residual of `u = 𝓑c` gives
//! `PEN(c|θ) = cᵀR(θ)c + 2cᵀr(θ) + l(θ)`. Because the coefficients are
//! separable, every term pair contributes a Kronecker product of 1-D weighted
//! Gram matrices, and because θ only enters through monomial multipliers,
//! `R(θ) = Σ_β θ^β A_β` with θ-free blocks `A_β` that are computed once.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::band::{dot, SymBand};
use crate::basis::{tensor_design, BasisSpec1D, CoefLayout, DesignMatrix, PointSet, TensorBasis};
use crate::error::{Error, Result};

pub const DEFAULT_QUAD_POINTS: usize = 32;

/// Polynomial in one variable, coefficients in ascending powers.
#[derive(Debug, Clone, PartialEq)]
pub struct Polynomial(pub Vec<f64>);

impl Polynomial {
    pub fn constant(c: f64) -> Self {
        Polynomial(vec![c])
    }

    pub fn one() -> Self {
        Self::constant(1.0)
    }

    /// `coef · x^power`.
    pub fn monomial(coef: f64, power: usize) -> Self {
        let mut c = vec![0.0; power + 1];
        c[power] = coef;
        Polynomial(c)
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.0.iter().rev().fold(0.0, |acc, &c| acc * x + c)
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&c| c == 0.0)
    }

    pub fn degree(&self) -> usize {
        self.0.iter().rposition(|&c| c != 0.0).unwrap_or(0)
    }
}

/// `constant · ∏_k θ_k^{theta_powers[k]}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Multiplier {
    pub constant: f64,
    pub theta_powers: Vec<u32>,
}

impl Multiplier {
    pub fn constant(c: f64) -> Self {
        Self {
            constant: c,
            theta_powers: vec![],
        }
    }

    /// `c · θ_k^power`.
    pub fn theta(c: f64, k: usize, power: u32) -> Self {
        let mut theta_powers = vec![0; k + 1];
        theta_powers[k] = power;
        Self {
            constant: c,
            theta_powers,
        }
    }

    pub fn value(&self, theta: &[f64]) -> f64 {
        self.constant * monomial(&self.theta_powers, theta)
    }

    fn padded_powers(&self, n: usize) -> Vec<u32> {
        let mut p = self.theta_powers.clone();
        p.resize(n, 0);
        p
    }
}

fn monomial(powers: &[u32], theta: &[f64]) -> f64 {
    powers
        .iter()
        .zip(theta)
        .filter(|(&p, _)| p > 0)
        .map(|(&p, &t)| t.powi(p as i32))
        .product()
}

/// `multiplier · ∏_d coeff_polys[d](x_d) · D^{deriv_orders} u`.
#[derive(Debug, Clone, PartialEq)]
pub struct PdeTerm {
    pub multiplier: Multiplier,
    pub coeff_polys: Vec<Polynomial>,
    pub deriv_orders: Vec<usize>,
}

impl PdeTerm {
    /// Constant-coefficient term.
    pub fn new(multiplier: Multiplier, deriv_orders: Vec<usize>) -> Self {
        let coeff_polys = vec![Polynomial::one(); deriv_orders.len()];
        Self {
            multiplier,
            coeff_polys,
            deriv_orders,
        }
    }

    pub fn with_poly(mut self, dim: usize, poly: Polynomial) -> Self {
        self.coeff_polys[dim] = poly;
        self
    }
}

/// Source term `multiplier · ∏_d coeff_polys[d](x_d)`, free of u.
#[derive(Debug, Clone, PartialEq)]
pub struct ForcingTerm {
    pub multiplier: Multiplier,
    pub coeff_polys: Vec<Polynomial>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PdeSpec {
    dim: usize,
    terms: Vec<PdeTerm>,
    forcing: Vec<ForcingTerm>,
    theta_names: Vec<String>,
}

impl PdeSpec {
    pub fn new(
        dim: usize,
        terms: Vec<PdeTerm>,
        forcing: Vec<ForcingTerm>,
        theta_names: Vec<String>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("a PDE needs at least one dimension"));
        }
        if terms.is_empty() {
            return Err(Error::invalid("a PDE needs at least one term in u"));
        }
        let n_theta = theta_names.len();
        let check_common = |what: String, m: &Multiplier, polys: &[Polynomial]| -> Result<()> {
            if !m.constant.is_finite() {
                return Err(Error::invalid(format!("{what}: multiplier constant is not finite")));
            }
            if m.theta_powers.len() > n_theta {
                return Err(Error::invalid(format!(
                    "{what}: references θ index {} but only {n_theta} parameters are declared",
                    m.theta_powers.len() - 1
                )));
            }
            if polys.len() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "{what}: {} coefficient polynomials for {dim} dimensions",
                    polys.len()
                )));
            }
            if polys.iter().any(|p| p.0.is_empty() || p.0.iter().any(|c| !c.is_finite())) {
                return Err(Error::invalid(format!(
                    "{what}: coefficient polynomials must be non-empty and finite"
                )));
            }
            Ok(())
        };
        for (i, t) in terms.iter().enumerate() {
            check_common(format!("term {i}"), &t.multiplier, &t.coeff_polys)?;
            if t.deriv_orders.len() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "term {i}: {} derivative orders for {dim} dimensions",
                    t.deriv_orders.len()
                )));
            }
        }
        for (i, f) in forcing.iter().enumerate() {
            check_common(format!("forcing term {i}"), &f.multiplier, &f.coeff_polys)?;
        }
        Ok(Self {
            dim,
            terms,
            forcing,
            theta_names,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn terms(&self) -> &[PdeTerm] {
        &self.terms
    }

    pub fn forcing(&self) -> &[ForcingTerm] {
        &self.forcing
    }

    pub fn theta_names(&self) -> &[String] {
        &self.theta_names
    }

    pub fn n_theta(&self) -> usize {
        self.theta_names.len()
    }

    pub fn is_homogeneous(&self) -> bool {
        self.forcing.is_empty()
    }

    /// Highest total derivative order over all terms.
    pub fn order(&self) -> usize {
        self.terms
            .iter()
            .map(|t| t.deriv_orders.iter().sum::<usize>())
            .max()
            .unwrap_or(0)
    }

    fn check_basis(&self, basis: &TensorBasis) -> Result<()> {
        if basis.dim() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "PDE has {} dimensions, basis has {}",
                self.dim,
                basis.dim()
            )));
        }
        for (i, t) in self.terms.iter().enumerate() {
            for (d, &k) in t.deriv_orders.iter().enumerate() {
                let degree = basis.spec(d).degree();
                if k > degree {
                    return Err(Error::DerivativeTooHigh {
                        dim: d,
                        deriv: k,
                        degree,
                        context: format!(" (PDE term {i})"),
                    });
                }
            }
        }
        Ok(())
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.n_theta() {
            return Err(Error::DimensionMismatch(format!(
                "{} parameter values for {} declared parameters",
                theta.len(),
                self.n_theta()
            )));
        }
        Ok(())
    }

    /// Pointwise PDE residual of `u = 𝓑c` (public coefficient order).
    pub fn residual(
        &self,
        basis: &TensorBasis,
        theta: &[f64],
        c: &[f64],
        points: &[Vec<f64>],
    ) -> Result<Vec<f64>> {
        self.check_basis(basis)?;
        self.check_theta(theta)?;
        let set = PointSet::Scatter(points.to_vec());
        let mut out = vec![0.0; points.len()];
        for t in &self.terms {
            let m = t.multiplier.value(theta);
            let du = tensor_design(basis, &set, &t.deriv_orders)?.mul_vec(c);
            for (o, (x, v)) in out.iter_mut().zip(points.iter().zip(du)) {
                *o += m * separable(&t.coeff_polys, x) * v;
            }
        }
        for f in &self.forcing {
            let m = f.multiplier.value(theta);
            for (o, x) in out.iter_mut().zip(points) {
                *o += m * separable(&f.coeff_polys, x);
            }
        }
        Ok(out)
    }
}

fn separable(polys: &[Polynomial], x: &[f64]) -> f64 {
    polys.iter().zip(x).map(|(p, &xi)| p.eval(xi)).product()
}

/// Trapezoid nodes on every knot span: `(span, x, weight)`.
fn quad_nodes(spec: &BasisSpec1D, per_span: usize) -> Result<Vec<(usize, f64, f64)>> {
    if per_span < 2 {
        return Err(Error::invalid(format!(
            "quadrature needs at least 2 points per knot span, got {per_span}"
        )));
    }
    let mut nodes = Vec::new();
    for (span, a, b) in spec.spans() {
        let h = (b - a) / (per_span - 1) as f64;
        for i in 0..per_span {
            let x = if i + 1 == per_span { b } else { a + h * i as f64 };
            let w = if i == 0 || i + 1 == per_span { h / 2.0 } else { h };
            nodes.push((span, x, w));
        }
    }
    Ok(nodes)
}

/// `∫ poly_i poly_j B^{(deriv_i)} B^{(deriv_j)ᵀ} dx` over the basis domain by
/// composite trapezoid with `quad_points_per_span` nodes per knot span.
pub fn weighted_gram_1d(
    spec: &BasisSpec1D,
    deriv_i: usize,
    deriv_j: usize,
    poly_i: &Polynomial,
    poly_j: &Polynomial,
    quad_points_per_span: usize,
) -> Result<DMatrix<f64>> {
    let p = spec.degree();
    for d in [deriv_i, deriv_j] {
        if d > p {
            return Err(Error::DerivativeTooHigh {
                dim: 0,
                deriv: d,
                degree: p,
                context: String::new(),
            });
        }
    }
    let m = spec.n_basis();
    let mut g = DMatrix::zeros(m, m);
    let nd = deriv_i.max(deriv_j);
    for (span, x, w) in quad_nodes(spec, quad_points_per_span)? {
        let weight = w * poly_i.eval(x) * poly_j.eval(x);
        if weight == 0.0 {
            continue;
        }
        let ders = spec.local_derivatives(span, x, nd);
        let first = span - p;
        for (a, &ba) in ders[deriv_i].iter().enumerate() {
            let wa = weight * ba;
            for (b, &bb) in ders[deriv_j].iter().enumerate() {
                g[(first + a, first + b)] += wa * bb;
            }
        }
    }
    Ok(g)
}

/// `∫ poly · f · B^{(deriv)} dx`.
fn weighted_moment_1d(
    spec: &BasisSpec1D,
    deriv: usize,
    poly: &Polynomial,
    f: &Polynomial,
    quad: usize,
) -> Result<Vec<f64>> {
    let p = spec.degree();
    let mut s = vec![0.0; spec.n_basis()];
    for (span, x, w) in quad_nodes(spec, quad)? {
        let weight = w * poly.eval(x) * f.eval(x);
        if weight == 0.0 {
            continue;
        }
        let vals = spec.local_derivative(span, x, deriv);
        for (a, v) in vals.into_iter().enumerate() {
            s[span - p + a] += weight * v;
        }
    }
    Ok(s)
}

fn weighted_integral_1d(spec: &BasisSpec1D, f: &Polynomial, g: &Polynomial, quad: usize) -> Result<f64> {
    Ok(quad_nodes(spec, quad)?
        .into_iter()
        .map(|(_, x, w)| w * f.eval(x) * g.eval(x))
        .sum())
}

/// Adds `alpha · (K + Kᵀ)` (or `alpha · K` when `symmetric`) to `target`,
/// where `K = grams[p-1] ⊗ … ⊗ grams[0]` in public order.
fn add_kronecker(
    grams: &[DMatrix<f64>],
    alpha: f64,
    symmetric: bool,
    layout: &CoefLayout,
    target: &mut SymBand,
) {
    let p = grams.len();
    let sizes = layout.sizes();
    let degrees = layout.degrees();
    let n = layout.n();
    let mut ja = vec![0usize; p];
    let mut jb = vec![0usize; p];
    let mut off = vec![0usize; p];
    let widths: Vec<usize> = degrees.iter().map(|k| 2 * k + 1).collect();
    let n_off: usize = widths.iter().product();
    for a in 0..n {
        let mut rem = a;
        for d in 0..p {
            ja[d] = rem % sizes[d];
            rem /= sizes[d];
        }
        let ba = layout.band_index(a);
        off.iter_mut().for_each(|o| *o = 0);
        'offsets: for _ in 0..n_off {
            let mut valid = true;
            for d in 0..p {
                let j = ja[d] as isize + off[d] as isize - degrees[d] as isize;
                if j < 0 || j >= sizes[d] as isize {
                    valid = false;
                    break;
                }
                jb[d] = j as usize;
            }
            if valid {
                let bb = layout.band_index_multi(&jb);
                if bb <= ba {
                    let mut k_ab = 1.0;
                    let mut k_ba = 1.0;
                    for d in 0..p {
                        k_ab *= grams[d][(ja[d], jb[d])];
                        k_ba *= grams[d][(jb[d], ja[d])];
                    }
                    let v = if symmetric { k_ab } else { k_ab + k_ba };
                    if v != 0.0 {
                        target.add(ba, bb, alpha * v);
                    }
                }
            }
            for d in 0..p {
                off[d] += 1;
                if off[d] < widths[d] {
                    continue 'offsets;
                }
                off[d] = 0;
            }
        }
    }
}

/// Explicit Kronecker product `mats[p-1] ⊗ … ⊗ mats[0]` as a dense matrix.
pub fn kron_dense(mats: &[DMatrix<f64>]) -> DMatrix<f64> {
    let mut out = mats[0].clone();
    for m in &mats[1..] {
        out = m.kronecker(&out);
    }
    out
}

/// `(R(θ), r(θ), l(θ))` with R held as a band matrix in the layout's order.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyQuadratic {
    layout: CoefLayout,
    band: SymBand,
    r: Vec<f64>,
    l: f64,
}

impl PenaltyQuadratic {
    pub fn n(&self) -> usize {
        self.r.len()
    }

    pub fn layout(&self) -> &CoefLayout {
        &self.layout
    }

    /// R in layout order.
    pub fn band(&self) -> &SymBand {
        &self.band
    }

    /// r in layout order.
    pub fn r_band(&self) -> &[f64] {
        &self.r
    }

    pub fn l(&self) -> f64 {
        self.l
    }

    /// r in public coefficient order.
    pub fn r(&self) -> Vec<f64> {
        self.layout.to_public_vec(&self.r)
    }

    pub fn has_linear_part(&self) -> bool {
        self.l != 0.0 || self.r.iter().any(|&v| v != 0.0)
    }

    /// R as a dense matrix in public coefficient order.
    pub fn dense_r(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut out = DMatrix::zeros(n, n);
        for a in 0..n {
            let ba = self.layout.band_index(a);
            for b in 0..n {
                let bb = self.layout.band_index(b);
                if ba.abs_diff(bb) <= self.band.bandwidth() {
                    out[(a, b)] = self.band.get(ba, bb);
                }
            }
        }
        out
    }

    /// PEN for coefficients in layout order.
    pub fn value_band(&self, c: &[f64]) -> f64 {
        self.band.quad_form(c) + 2.0 * dot(c, &self.r) + self.l
    }

    /// PEN for coefficients in public order.
    pub fn value(&self, c: &[f64]) -> Result<f64> {
        if c.len() != self.n() {
            return Err(Error::DimensionMismatch(format!(
                "{} coefficients for a penalty of size {}",
                c.len(),
                self.n()
            )));
        }
        Ok(self.value_band(&self.layout.to_band_vec(c)))
    }
}

pub fn penalty_value(q: &PenaltyQuadratic, c: &[f64]) -> Result<f64> {
    q.value(c)
}

#[derive(Debug, Clone)]
struct Block {
    powers: Vec<u32>,
    mat: Option<SymBand>,
    vec: Option<Vec<f64>>,
    scalar: f64,
}

/// Precomputed θ-free penalty blocks for one (PDE, basis, quadrature) triple.
/// Re-assembly for a new θ is a weighted sum of the cached blocks.
#[derive(Debug, Clone)]
pub struct PenaltyAssembler {
    pde: PdeSpec,
    basis: TensorBasis,
    layout: CoefLayout,
    quad: usize,
    blocks: Vec<Block>,
}

impl PenaltyAssembler {
    pub fn new(pde: &PdeSpec, basis: &TensorBasis, quad_points_per_span: usize) -> Result<Self> {
        pde.check_basis(basis)?;
        let layout = basis.layout();
        let n = layout.n();
        let bw = layout.bandwidth();
        let p = pde.dim();
        let nt = pde.n_theta();
        let mut index: HashMap<Vec<u32>, usize> = HashMap::new();
        let mut blocks: Vec<Block> = Vec::new();
        let mut block_for = |powers: Vec<u32>, blocks: &mut Vec<Block>| -> usize {
            *index.entry(powers.clone()).or_insert_with(|| {
                blocks.push(Block {
                    powers,
                    mat: None,
                    vec: None,
                    scalar: 0.0,
                });
                blocks.len() - 1
            })
        };

        let terms = pde.terms();
        for (i, ti) in terms.iter().enumerate() {
            for (j, tj) in terms.iter().enumerate().skip(i) {
                let alpha = ti.multiplier.constant * tj.multiplier.constant;
                if alpha == 0.0 {
                    continue;
                }
                let grams = (0..p)
                    .map(|d| {
                        weighted_gram_1d(
                            basis.spec(d),
                            ti.deriv_orders[d],
                            tj.deriv_orders[d],
                            &ti.coeff_polys[d],
                            &tj.coeff_polys[d],
                            quad_points_per_span,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                let powers = add_powers(&ti.multiplier, &tj.multiplier, nt);
                let b = block_for(powers, &mut blocks);
                let mat = blocks[b].mat.get_or_insert_with(|| SymBand::zeros(n, bw));
                add_kronecker(&grams, alpha, i == j, &layout, mat);
            }
        }

        for t in terms {
            for f in pde.forcing() {
                let alpha = t.multiplier.constant * f.multiplier.constant;
                if alpha == 0.0 {
                    continue;
                }
                let moments = (0..p)
                    .map(|d| {
                        weighted_moment_1d(
                            basis.spec(d),
                            t.deriv_orders[d],
                            &t.coeff_polys[d],
                            &f.coeff_polys[d],
                            quad_points_per_span,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                let b = block_for(add_powers(&t.multiplier, &f.multiplier, nt), &mut blocks);
                let v = blocks[b].vec.get_or_insert_with(|| vec![0.0; n]);
                let sizes = layout.sizes();
                for (a, slot) in (0..n).map(|a| (a, layout.band_index(a))) {
                    let mut rem = a;
                    let mut prod = alpha;
                    for d in 0..p {
                        prod *= moments[d][rem % sizes[d]];
                        rem /= sizes[d];
                    }
                    v[slot] += prod;
                }
            }
        }

        let forcing = pde.forcing();
        for (i, fi) in forcing.iter().enumerate() {
            for fj in forcing.iter().skip(i) {
                let mut alpha = fi.multiplier.constant * fj.multiplier.constant;
                for d in 0..p {
                    alpha *= weighted_integral_1d(
                        basis.spec(d),
                        &fi.coeff_polys[d],
                        &fj.coeff_polys[d],
                        quad_points_per_span,
                    )?;
                }
                if !std::ptr::eq(fi, fj) {
                    alpha *= 2.0;
                }
                let b = block_for(add_powers(&fi.multiplier, &fj.multiplier, nt), &mut blocks);
                blocks[b].scalar += alpha;
            }
        }

        Ok(Self {
            pde: pde.clone(),
            basis: basis.clone(),
            layout,
            quad: quad_points_per_span,
            blocks,
        })
    }

    pub fn pde(&self) -> &PdeSpec {
        &self.pde
    }

    pub fn basis(&self) -> &TensorBasis {
        &self.basis
    }

    pub fn layout(&self) -> &CoefLayout {
        &self.layout
    }

    pub fn quad_points_per_span(&self) -> usize {
        self.quad
    }

    pub fn assemble(&self, theta: &[f64]) -> Result<PenaltyQuadratic> {
        let mut q = PenaltyQuadratic {
            layout: self.layout.clone(),
            band: SymBand::zeros(self.layout.n(), self.layout.bandwidth()),
            r: vec![0.0; self.layout.n()],
            l: 0.0,
        };
        self.assemble_into(theta, &mut q)?;
        Ok(q)
    }

    /// Overwrites `q` (which must come from this assembler) with the penalty at θ.
    pub fn assemble_into(&self, theta: &[f64], q: &mut PenaltyQuadratic) -> Result<()> {
        self.pde.check_theta(theta)?;
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::invalid(format!("non-finite parameter vector {theta:?}")));
        }
        q.band.fill_zero();
        q.r.iter_mut().for_each(|v| *v = 0.0);
        q.l = 0.0;
        for b in &self.blocks {
            let w = monomial(&b.powers, theta);
            if let Some(m) = &b.mat {
                q.band.axpy(w, m);
            }
            if let Some(v) = &b.vec {
                for (o, x) in q.r.iter_mut().zip(v) {
                    *o += w * x;
                }
            }
            q.l += w * b.scalar;
        }
        Ok(())
    }
}

fn add_powers(a: &Multiplier, b: &Multiplier, n: usize) -> Vec<u32> {
    a.padded_powers(n)
        .into_iter()
        .zip(b.padded_powers(n))
        .map(|(x, y)| x + y)
        .collect()
}

/// One-shot assembly; prefer [`PenaltyAssembler`] when θ changes repeatedly.
pub fn assemble_penalty(
    pde: &PdeSpec,
    basis: &TensorBasis,
    theta: &[f64],
    quad_points_per_span: usize,
) -> Result<PenaltyQuadratic> {
    PenaltyAssembler::new(pde, basis, quad_points_per_span)?.assemble(theta)
}

/// Value prescribed by a condition at each of its points.
#[derive(Clone)]
pub enum Target {
    Constant(f64),
    Values(Vec<f64>),
    Function(Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>),
}

impl Target {
    pub fn function(f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Target::Function(Arc::new(f))
    }
}

impl fmt::Debug for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Constant(c) => write!(f, "Constant({c})"),
            Target::Values(v) => write!(f, "Values({} entries)", v.len()),
            Target::Function(_) => write!(f, "Function(..)"),
        }
    }
}

/// `D^{deriv_orders} u(x) = target(x)` for every sampled `x`.
#[derive(Debug, Clone)]
pub struct Condition {
    pub label: String,
    pub points: PointSet,
    pub deriv_orders: Vec<usize>,
    pub target: Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionPoint {
    pub condition: usize,
    pub point: Vec<f64>,
    pub deriv_orders: Vec<usize>,
}

/// Linear restrictions `Hc = v` on the public-order coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSet {
    h: DesignMatrix,
    v: Vec<f64>,
    meta: Vec<ConditionPoint>,
}

impl ConstraintSet {
    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }

    pub fn h(&self) -> &DesignMatrix {
        &self.h
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    pub fn meta(&self) -> &[ConditionPoint] {
        &self.meta
    }

    /// `Hc − v`.
    pub fn residual(&self, c: &[f64]) -> Vec<f64> {
        self.h
            .mul_vec(c)
            .into_iter()
            .zip(&self.v)
            .map(|(a, b)| a - b)
            .collect()
    }

    pub fn max_violation(&self, c: &[f64]) -> f64 {
        self.residual(c).into_iter().fold(0.0, |m, r| m.max(r.abs()))
    }

    pub fn v_norm_inf(&self) -> f64 {
        self.v.iter().fold(0.0, |m, r: &f64| m.max(r.abs()))
    }

    /// `Hᵀv` in layout order.
    pub fn htv_band(&self, layout: &CoefLayout) -> Vec<f64> {
        layout.to_band_vec(&self.h.tmul_vec(&self.v))
    }

    pub fn select_rows(&self, keep: &[usize]) -> ConstraintSet {
        ConstraintSet {
            h: self.h.select_rows(keep),
            v: keep.iter().map(|&i| self.v[i]).collect(),
            meta: keep.iter().map(|&i| self.meta[i].clone()).collect(),
        }
    }
}

/// Stacks the condition rows into `(H, v)`. Repeated (point, derivative)
/// pairs, such as domain corners shared by two faces, are kept once; they
/// must agree on their target.
pub fn build_constraints(conditions: &[Condition], basis: &TensorBasis) -> Result<ConstraintSet> {
    if conditions.is_empty() {
        return Err(Error::invalid("no conditions given"));
    }
    let mut seen: HashMap<(Vec<u64>, Vec<usize>), usize> = HashMap::new();
    let mut parts = Vec::new();
    let mut v = Vec::new();
    let mut meta = Vec::new();
    for (ci, cond) in conditions.iter().enumerate() {
        let rows = cond.points.rows();
        if rows.is_empty() {
            return Err(Error::invalid(format!(
                "condition '{}' has no sample points",
                cond.label
            )));
        }
        let rows: Vec<Vec<f64>> = rows
            .into_iter()
            .map(|r| {
                if r.len() != basis.dim() {
                    return Err(Error::DimensionMismatch(format!(
                        "condition '{}' point has {} coordinates, basis has {}",
                        cond.label,
                        r.len(),
                        basis.dim()
                    )));
                }
                r.iter()
                    .enumerate()
                    .map(|(d, &x)| basis.spec(d).check_point(d, x))
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<_>>()?;
        let targets: Vec<f64> = match &cond.target {
            Target::Constant(c) => vec![*c; rows.len()],
            Target::Values(vals) => {
                if vals.len() != rows.len() {
                    return Err(Error::DimensionMismatch(format!(
                        "condition '{}': {} target values for {} points",
                        cond.label,
                        vals.len(),
                        rows.len()
                    )));
                }
                vals.clone()
            }
            Target::Function(f) => rows.iter().map(|x| f(x)).collect(),
        };
        let mut keep = Vec::with_capacity(rows.len());
        for (i, (x, &t)) in rows.iter().zip(&targets).enumerate() {
            if !t.is_finite() {
                return Err(Error::invalid(format!(
                    "condition '{}' target at {x:?} is not finite",
                    cond.label
                )));
            }
            let key = (x.iter().map(|c| c.to_bits()).collect(), cond.deriv_orders.clone());
            if let Some(&row) = seen.get(&key) {
                let prev: f64 = v[row];
                if (prev - t).abs() > 1e-12 * (1.0 + prev.abs()) {
                    return Err(Error::invalid(format!(
                        "conditions disagree at {x:?}: {prev} vs {t} (condition '{}')",
                        cond.label
                    )));
                }
                continue;
            }
            seen.insert(key, v.len());
            v.push(t);
            meta.push(ConditionPoint {
                condition: ci,
                point: x.clone(),
                deriv_orders: cond.deriv_orders.clone(),
            });
            keep.push(i);
        }
        let kept: Vec<Vec<f64>> = keep.iter().map(|&i| rows[i].clone()).collect();
        if !kept.is_empty() {
            parts.push(tensor_design(basis, &PointSet::Scatter(kept), &cond.deriv_orders)?);
        }
    }
    let h = DesignMatrix::vstack(&parts)?;
    if h.n_rows() > h.n_cols() {
        return Err(Error::invalid(format!(
            "{} condition rows exceed the {} spline coefficients",
            h.n_rows(),
            h.n_cols()
        )));
    }
    Ok(ConstraintSet { h, v, meta })
}

/// Knot-grid sample of the face `x_dim = lo` (or `hi`).
pub fn face_points(basis: &TensorBasis, dim: usize, at_hi: bool) -> PointSet {
    let axes = (0..basis.dim())
        .map(|d| {
            let s = basis.spec(d);
            if d == dim {
                vec![if at_hi { s.hi() } else { s.lo() }]
            } else {
                s.breakpoints()
            }
        })
        .collect();
    PointSet::Grid(axes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::eval_basis_1d;
    use approx::assert_relative_eq;

    fn diffusion() -> PdeSpec {
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
        .unwrap()
    }

    fn small_basis() -> TensorBasis {
        TensorBasis::new(vec![
            BasisSpec1D::equidistant(-3.0, 3.0, 3, 7).unwrap(),
            BasisSpec1D::equidistant(0.0, 1.0, 3, 6).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn hat_gram_diagonal() {
        let s = BasisSpec1D::new(0.0, 4.0, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let g = weighted_gram_1d(&s, 0, 0, &Polynomial::one(), &Polynomial::one(), 64).unwrap();
        for i in 1..4 {
            assert_relative_eq!(g[(i, i)], 2.0 / 3.0, max_relative = 1e-3);
        }
        let z = weighted_gram_1d(&s, 0, 0, &Polynomial::constant(0.0), &Polynomial::one(), 8).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
        assert!(weighted_gram_1d(&s, 0, 0, &Polynomial::one(), &Polynomial::one(), 1).is_err());
    }

    #[test]
    fn homogeneous_penalty_has_no_linear_part() {
        let q = assemble_penalty(&diffusion(), &small_basis(), &[0.5, 1.5], 32).unwrap();
        assert!(!q.has_linear_part());
        assert!(q.band().norm_inf() > 0.0);
        assert_eq!(q.value(&vec![0.0; 42]).unwrap(), 0.0);
    }

    #[test]
    fn identity_term_gives_tensor_gram() {
        let basis = small_basis();
        let pde = PdeSpec::new(
            2,
            vec![PdeTerm::new(Multiplier::constant(1.0), vec![0, 0])],
            vec![],
            vec![],
        )
        .unwrap();
        let q = assemble_penalty(&pde, &basis, &[], 16).unwrap();
        let one = Polynomial::one();
        let g1 = weighted_gram_1d(basis.spec(0), 0, 0, &one, &one, 16).unwrap();
        let g2 = weighted_gram_1d(basis.spec(1), 0, 0, &one, &one, 16).unwrap();
        let k = kron_dense(&[g1, g2]);
        assert!((q.dense_r() - k).abs().max() < 1e-12);
    }

    #[test]
    fn forcing_terms_fill_r_and_l() {
        // u - x1 = 0 on one dimension; u = x1 is representable so PEN has a zero
        let s = BasisSpec1D::equidistant(0.0, 2.0, 2, 5).unwrap();
        let basis = TensorBasis::new(vec![s.clone()]).unwrap();
        let pde = PdeSpec::new(
            1,
            vec![PdeTerm::new(Multiplier::constant(1.0), vec![0])],
            vec![ForcingTerm {
                multiplier: Multiplier::constant(-1.0),
                coeff_polys: vec![Polynomial(vec![0.0, 1.0])],
            }],
            vec![],
        )
        .unwrap();
        let q = assemble_penalty(&pde, &basis, &[], 32).unwrap();
        assert!(q.has_linear_part());
        assert_relative_eq!(q.l(), 8.0 / 3.0, max_relative = 1e-3);
        // greville abscissae reproduce the identity function
        let t = s.knots();
        let c: Vec<f64> = (0..5).map(|i| (t[i + 1] + t[i + 2]) / 2.0).collect();
        let b = eval_basis_1d(&s, &[0.3, 1.7], 0).unwrap();
        let u = &b * nalgebra::DVector::from_vec(c.clone());
        assert_relative_eq!(u[0], 0.3, epsilon = 1e-12);
        assert!(q.value(&c).unwrap().abs() < 1e-10);
    }

    #[test]
    fn derivative_too_high_names_term() {
        let pde = PdeSpec::new(
            2,
            vec![PdeTerm::new(Multiplier::constant(1.0), vec![0, 4])],
            vec![],
            vec![],
        )
        .unwrap();
        let err = assemble_penalty(&pde, &small_basis(), &[], 8).unwrap_err();
        assert!(err.to_string().contains("term 0"), "{err}");
    }

    #[test]
    fn undeclared_theta_is_rejected() {
        let err = PdeSpec::new(
            1,
            vec![PdeTerm::new(Multiplier::theta(1.0, 2, 1), vec![0])],
            vec![],
            vec!["a".into()],
        )
        .unwrap_err();
        assert!(err.to_string().contains("term 0"));
    }

    #[test]
    fn conditions_and_faces() {
        let basis = small_basis();
        let cons = build_constraints(
            &[Condition {
                label: "initial".into(),
                points: face_points(&basis, 1, false),
                deriv_orders: vec![0, 0],
                target: Target::function(|x| 1.0 / (1.0 + x[0] * x[0])),
            }],
            &basis,
        )
        .unwrap();
        assert_eq!(cons.len(), basis.spec(0).breakpoints().len());
        let at0 = cons.meta().iter().position(|m| m.point[0] == 0.0).unwrap();
        assert_eq!(cons.v()[at0], 1.0);
        for s in cons.h().row_sums() {
            assert_relative_eq!(s, 1.0, epsilon = 1e-12);
        }
        assert!(build_constraints(&[], &basis).is_err());
    }

    #[test]
    fn shared_corners_are_deduplicated() {
        let basis = small_basis();
        let lo = Condition {
            label: "x1 low".into(),
            points: face_points(&basis, 0, false),
            deriv_orders: vec![0, 0],
            target: Target::Constant(0.0),
        };
        let init = Condition {
            label: "initial".into(),
            points: face_points(&basis, 1, false),
            deriv_orders: vec![0, 0],
            target: Target::Constant(0.0),
        };
        let cons = build_constraints(&[lo, init.clone()], &basis).unwrap();
        let n1 = basis.spec(1).breakpoints().len();
        let n0 = basis.spec(0).breakpoints().len();
        assert_eq!(cons.len(), n0 + n1 - 1);
        let clash = Condition {
            target: Target::Constant(1.0),
            ..init
        };
        let lo = Condition {
            label: "x1 low".into(),
            points: face_points(&basis, 0, false),
            deriv_orders: vec![0, 0],
            target: Target::Constant(0.0),
        };
        assert!(build_constraints(&[lo, clash], &basis).is_err());
    }
}
