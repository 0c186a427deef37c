//! One-dimensional B-spline bases on clamped knot vectors and their
//! tensor products.
//!
//! Tensor coefficients are laid out with dimension 1 varying fastest, i.e.
//! the coefficient for multi-index `(j_1, …, j_p)` sits at
//! `j_1 + M_1 (j_2 + M_2 (j_3 + …))`. This is the layout used by every public
//! vector in the crate and by the exported coefficient files. Internally the
//! banded solvers may use a different dimension order; see [`CoefLayout`].

use crate::band::SymBand;
use crate::error::{Error, Result};
use nalgebra::DMatrix;

/// Points this close to a domain edge (relative to its width) are snapped
/// onto the edge instead of being rejected.
const EDGE_SNAP: f64 = 1e-10;

/// A univariate B-spline basis on a clamped knot vector.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisSpec1D {
    lo: f64,
    hi: f64,
    degree: usize,
    interior: Vec<f64>,
    knots: Vec<f64>,
}

impl BasisSpec1D {
    /// Builds the clamped knot vector: `degree + 1` copies of each domain end
    /// around the user's interior knots.
    pub fn new(lo: f64, hi: f64, degree: usize, interior: Vec<f64>) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::invalid(format!(
                "basis domain [{lo}, {hi}] must be finite with lo < hi"
            )));
        }
        for (i, &x) in interior.iter().enumerate() {
            if !x.is_finite() || x <= lo || x >= hi {
                return Err(Error::InvalidKnot {
                    index: i,
                    value: x,
                    reason: format!("must lie strictly inside ({lo}, {hi})"),
                });
            }
            if i > 0 && x <= interior[i - 1] {
                return Err(Error::InvalidKnot {
                    index: i,
                    value: x,
                    reason: format!("not greater than the previous knot {}", interior[i - 1]),
                });
            }
        }
        let mut knots = Vec::with_capacity(interior.len() + 2 * (degree + 1));
        knots.extend(std::iter::repeat_n(lo, degree + 1));
        knots.extend_from_slice(&interior);
        knots.extend(std::iter::repeat_n(hi, degree + 1));
        Ok(Self {
            lo,
            hi,
            degree,
            interior,
            knots,
        })
    }

    /// Equally spaced interior knots giving exactly `n_basis` functions.
    pub fn equidistant(lo: f64, hi: f64, degree: usize, n_basis: usize) -> Result<Self> {
        if n_basis < degree + 1 {
            return Err(Error::invalid(format!(
                "{n_basis} basis functions requested but degree {degree} needs at least {}",
                degree + 1
            )));
        }
        let n_int = n_basis - degree - 1;
        let interior = (1..=n_int)
            .map(|i| lo + (hi - lo) * i as f64 / (n_int + 1) as f64)
            .collect();
        Self::new(lo, hi, degree, interior)
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn interior_knots(&self) -> &[f64] {
        &self.interior
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn n_basis(&self) -> usize {
        self.interior.len() + self.degree + 1
    }

    /// Distinct knot values, domain ends included.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut b = Vec::with_capacity(self.interior.len() + 2);
        b.push(self.lo);
        b.extend_from_slice(&self.interior);
        b.push(self.hi);
        b
    }

    /// Knot spans as `(span index, left, right)`.
    pub fn spans(&self) -> Vec<(usize, f64, f64)> {
        let bp = self.breakpoints();
        bp.windows(2)
            .enumerate()
            .map(|(s, w)| (s + self.degree, w[0], w[1]))
            .collect()
    }

    pub(crate) fn check_point(&self, dim: usize, x: f64) -> Result<f64> {
        let tol = EDGE_SNAP * (self.hi - self.lo);
        if x.is_nan() || x < self.lo - tol || x > self.hi + tol {
            return Err(Error::OutsideDomain {
                dim,
                value: x,
                lo: self.lo,
                hi: self.hi,
            });
        }
        Ok(x.clamp(self.lo, self.hi))
    }

    /// Index `μ` of the knot span containing `x`, with `t[μ] ≤ x < t[μ+1]`.
    /// The right end of the domain belongs to the last span.
    pub fn find_span(&self, x: f64) -> usize {
        let m = self.n_basis();
        if x >= self.knots[m] {
            return m - 1;
        }
        let (mut lo, mut hi) = (self.degree, m);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if x < self.knots[mid] {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        lo
    }

    /// Values of the `degree + 1` functions that are nonzero on `span`,
    /// differentiated `deriv` times, evaluated with that span's polynomial
    /// piece. Entry `r` belongs to basis function `span - degree + r`.
    pub fn local_derivative(&self, span: usize, x: f64, deriv: usize) -> Vec<f64> {
        let all = self.local_derivatives(span, x, deriv);
        all.into_iter().nth(deriv).unwrap()
    }

    /// Derivatives `0..=nd` of the nonzero functions on `span`.
    pub fn local_derivatives(&self, span: usize, x: f64, nd: usize) -> Vec<Vec<f64>> {
        let p = self.degree;
        let t = &self.knots;
        let mut ndu = vec![vec![0.0; p + 1]; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        ndu[0][0] = 1.0;
        for j in 1..=p {
            left[j] = x - t[span + 1 - j];
            right[j] = t[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                ndu[j][r] = right[r + 1] + left[j - r];
                let temp = ndu[r][j - 1] / ndu[j][r];
                ndu[r][j] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            ndu[j][j] = saved;
        }
        let mut ders = vec![vec![0.0; p + 1]; nd + 1];
        for j in 0..=p {
            ders[0][j] = ndu[j][p];
        }
        let mut a = [vec![0.0; p + 1], vec![0.0; p + 1]];
        for r in 0..=p {
            let (mut s1, mut s2) = (0usize, 1usize);
            a[0][0] = 1.0;
            for k in 1..=nd.min(p) {
                let mut d = 0.0;
                let rk = r as isize - k as isize;
                let pk = p - k;
                if r >= k {
                    a[s2][0] = a[s1][0] / ndu[pk + 1][rk as usize];
                    d = a[s2][0] * ndu[rk as usize][pk];
                }
                let j1 = if rk >= -1 { 1 } else { (-rk) as usize };
                let j2 = if r as isize - 1 <= pk as isize { k - 1 } else { p - r };
                for j in j1..=j2 {
                    let idx = (rk + j as isize) as usize;
                    a[s2][j] = (a[s1][j] - a[s1][j - 1]) / ndu[pk + 1][idx];
                    d += a[s2][j] * ndu[idx][pk];
                }
                if r <= pk {
                    a[s2][k] = -a[s1][k - 1] / ndu[pk + 1][r];
                    d += a[s2][k] * ndu[r][pk];
                }
                ders[k][r] = d;
                std::mem::swap(&mut s1, &mut s2);
            }
        }
        let mut factor = p as f64;
        for k in 1..=nd.min(p) {
            for v in ders[k].iter_mut() {
                *v *= factor;
            }
            factor *= (p - k) as f64;
        }
        ders
    }

    fn check_deriv(&self, dim: usize, deriv: usize) -> Result<()> {
        if deriv > self.degree {
            return Err(Error::DerivativeTooHigh {
                dim,
                deriv,
                degree: self.degree,
                context: String::new(),
            });
        }
        Ok(())
    }

    /// First nonzero column and local values at `x`.
    fn eval_local(&self, dim: usize, x: f64, deriv: usize) -> Result<(usize, Vec<f64>)> {
        let x = self.check_point(dim, x)?;
        let span = self.find_span(x);
        Ok((span - self.degree, self.local_derivative(span, x, deriv)))
    }
}

/// Clamped basis from a domain, a degree, and sorted interior knot positions.
pub fn build_knots(lo: f64, hi: f64, degree: usize, positions: &[f64]) -> Result<BasisSpec1D> {
    BasisSpec1D::new(lo, hi, degree, positions.to_vec())
}

/// Dense `N × M` matrix of basis values (or derivatives) at `points`.
pub fn eval_basis_1d(spec: &BasisSpec1D, points: &[f64], deriv: usize) -> Result<DMatrix<f64>> {
    spec.check_deriv(0, deriv)?;
    let mut out = DMatrix::zeros(points.len(), spec.n_basis());
    for (i, &x) in points.iter().enumerate() {
        let (first, vals) = spec.eval_local(0, x, deriv)?;
        for (r, v) in vals.into_iter().enumerate() {
            out[(i, first + r)] = v;
        }
    }
    Ok(out)
}

/// Degree rule of thumb: PDE order plus two.
pub fn default_degree(pde_order: usize) -> usize {
    pde_order + 2
}

/// Tensor product of univariate bases.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBasis {
    dims: Vec<BasisSpec1D>,
}

impl TensorBasis {
    pub fn new(dims: Vec<BasisSpec1D>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::invalid("a tensor basis needs at least one dimension"));
        }
        Ok(Self { dims })
    }

    pub fn dim(&self) -> usize {
        self.dims.len()
    }

    pub fn spec(&self, d: usize) -> &BasisSpec1D {
        &self.dims[d]
    }

    pub fn specs(&self) -> &[BasisSpec1D] {
        &self.dims
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.dims.iter().map(|s| s.n_basis()).collect()
    }

    pub fn n_coef(&self) -> usize {
        self.dims.iter().map(|s| s.n_basis()).product()
    }

    /// Public (dimension-1-fastest) index of a coefficient multi-index.
    pub fn flat_index(&self, multi: &[usize]) -> usize {
        let mut idx = 0;
        let mut stride = 1;
        for (d, &j) in multi.iter().enumerate() {
            idx += j * stride;
            stride *= self.dims[d].n_basis();
        }
        idx
    }

    pub fn layout(&self) -> CoefLayout {
        CoefLayout::new(
            &self.sizes(),
            &self.dims.iter().map(|s| s.degree()).collect::<Vec<_>>(),
        )
    }

    /// Whether `point` lies in the closed domain box.
    pub fn contains(&self, point: &[f64]) -> bool {
        point.len() == self.dim()
            && point
                .iter()
                .zip(&self.dims)
                .enumerate()
                .all(|(d, (&x, s))| s.check_point(d, x).is_ok())
    }
}

/// Evaluation points for [`tensor_design`].
#[derive(Debug, Clone, PartialEq)]
pub enum PointSet {
    /// One coordinate axis per dimension; rows enumerate their outer
    /// product with dimension 1 varying fastest.
    Grid(Vec<Vec<f64>>),
    /// Arbitrary points, one `p`-vector per row.
    Scatter(Vec<Vec<f64>>),
}

impl PointSet {
    pub fn len(&self) -> usize {
        match self {
            PointSet::Grid(axes) => axes.iter().map(|a| a.len()).product(),
            PointSet::Scatter(rows) => rows.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Materializes the points as rows, in design-row order.
    pub fn rows(&self) -> Vec<Vec<f64>> {
        match self {
            PointSet::Grid(axes) => grid_rows(axes),
            PointSet::Scatter(rows) => rows.clone(),
        }
    }
}

/// Outer product of `axes`, dimension 1 fastest.
pub fn grid_rows(axes: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let total: usize = axes.iter().map(|a| a.len()).product();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; axes.len()];
    for _ in 0..total {
        out.push(idx.iter().enumerate().map(|(d, &i)| axes[d][i]).collect());
        for d in 0..axes.len() {
            idx[d] += 1;
            if idx[d] < axes[d].len() {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

/// Equally spaced axis with `n` points covering `[lo, hi]`.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n)
            .map(|i| {
                if i + 1 == n {
                    hi
                } else {
                    lo + (hi - lo) * i as f64 / (n - 1) as f64
                }
            })
            .collect(),
    }
}

/// Sparse tensor-product design matrix. Every row stores the same number of
/// structural entries, `∏ (degree_d + 1)`, in increasing column order.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    n_rows: usize,
    n_cols: usize,
    deriv_orders: Vec<usize>,
    nnz_row: usize,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl DesignMatrix {
    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn deriv_orders(&self) -> &[usize] {
        &self.deriv_orders
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = i * self.nnz_row..(i + 1) * self.nnz_row;
        (&self.cols[r.clone()], &self.vals[r])
    }

    pub fn nnz_per_row(&self) -> usize {
        self.nnz_row
    }

    pub fn mul_vec(&self, c: &[f64]) -> Vec<f64> {
        assert_eq!(c.len(), self.n_cols, "coefficient length mismatch");
        (0..self.n_rows)
            .map(|i| {
                let (cols, vals) = self.row(i);
                cols.iter().zip(vals).map(|(&j, &v)| v * c[j]).sum()
            })
            .collect()
    }

    /// `Bᵀ y`.
    pub fn tmul_vec(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.n_rows, "row count mismatch");
        let mut out = vec![0.0; self.n_cols];
        for (i, &yi) in y.iter().enumerate() {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                out[j] += v * yi;
            }
        }
        out
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n_rows).map(|i| self.row(i).1.iter().sum()).collect()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n_rows, self.n_cols);
        for i in 0..self.n_rows {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                m[(i, j)] += v;
            }
        }
        m
    }

    /// Adds `alpha · BᵀB` to `target`, which is indexed in `layout` order.
    pub fn accumulate_gram(&self, layout: &CoefLayout, alpha: f64, target: &mut SymBand) {
        let mut idx = vec![0usize; self.nnz_row];
        for i in 0..self.n_rows {
            let (cols, vals) = self.row(i);
            for (slot, &c) in idx.iter_mut().zip(cols) {
                *slot = layout.band_index(c);
            }
            for a in 0..self.nnz_row {
                let va = alpha * vals[a];
                if va == 0.0 {
                    continue;
                }
                // structural columns within a row are distinct
                for b in 0..=a {
                    target.add(idx[a], idx[b], va * vals[b]);
                }
            }
        }
    }

    /// `BᵀB` in `layout` order.
    pub fn gram(&self, layout: &CoefLayout) -> SymBand {
        let mut g = SymBand::zeros(layout.n(), layout.bandwidth());
        self.accumulate_gram(layout, 1.0, &mut g);
        g
    }

    /// Stacks designs with matching column counts and row widths.
    pub fn vstack(parts: &[DesignMatrix]) -> Result<DesignMatrix> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("cannot stack an empty list of designs"))?;
        let mut out = DesignMatrix {
            n_rows: 0,
            n_cols: first.n_cols,
            deriv_orders: first.deriv_orders.clone(),
            nnz_row: first.nnz_row,
            cols: Vec::new(),
            vals: Vec::new(),
        };
        for d in parts {
            if d.n_cols != out.n_cols || d.nnz_row != out.nnz_row {
                return Err(Error::DimensionMismatch(
                    "stacked designs must share their basis".into(),
                ));
            }
            out.n_rows += d.n_rows;
            out.cols.extend_from_slice(&d.cols);
            out.vals.extend_from_slice(&d.vals);
        }
        Ok(out)
    }

    /// Keeps the rows listed in `keep`, in that order.
    pub fn select_rows(&self, keep: &[usize]) -> DesignMatrix {
        let mut cols = Vec::with_capacity(keep.len() * self.nnz_row);
        let mut vals = Vec::with_capacity(keep.len() * self.nnz_row);
        for &i in keep {
            let (c, v) = self.row(i);
            cols.extend_from_slice(c);
            vals.extend_from_slice(v);
        }
        DesignMatrix {
            n_rows: keep.len(),
            n_cols: self.n_cols,
            deriv_orders: self.deriv_orders.clone(),
            nnz_row: self.nnz_row,
            cols,
            vals,
        }
    }
}

/// Tensor-product design (or mixed partial derivative design) at `points`.
///
/// Grid mode yields the Kronecker product `B_p ⊗ … ⊗ B_1` of the
/// per-axis matrices; scatter mode yields the row-wise (face-splitting)
/// product, one row per point.
pub fn tensor_design(
    basis: &TensorBasis,
    points: &PointSet,
    deriv_orders: &[usize],
) -> Result<DesignMatrix> {
    let p = basis.dim();
    if deriv_orders.len() != p {
        return Err(Error::DimensionMismatch(format!(
            "{} derivative orders given for a {p}-dimensional basis",
            deriv_orders.len()
        )));
    }
    for (d, &k) in deriv_orders.iter().enumerate() {
        basis.spec(d).check_deriv(d, k)?;
    }
    match points {
        PointSet::Grid(axes) => {
            if axes.len() != p {
                return Err(Error::DimensionMismatch(format!(
                    "{} grid axes given for a {p}-dimensional basis",
                    axes.len()
                )));
            }
            // evaluate each axis once, then combine
            let per_axis: Vec<Vec<(usize, Vec<f64>)>> = axes
                .iter()
                .enumerate()
                .map(|(d, axis)| {
                    axis.iter()
                        .map(|&x| basis.spec(d).eval_local(d, x, deriv_orders[d]))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<_>>()?;
            let total: usize = axes.iter().map(|a| a.len()).product();
            let mut builder = RowBuilder::new(basis, deriv_orders, total);
            let mut idx = vec![0usize; p];
            for _ in 0..total {
                let locals: Vec<&(usize, Vec<f64>)> =
                    (0..p).map(|d| &per_axis[d][idx[d]]).collect();
                builder.push(&locals);
                for d in 0..p {
                    idx[d] += 1;
                    if idx[d] < axes[d].len() {
                        break;
                    }
                    idx[d] = 0;
                }
            }
            Ok(builder.finish())
        }
        PointSet::Scatter(rows) => {
            let mut builder = RowBuilder::new(basis, deriv_orders, rows.len());
            for (i, row) in rows.iter().enumerate() {
                if row.len() != p {
                    return Err(Error::DimensionMismatch(format!(
                        "point {i} has {} coordinates, basis has {p} dimensions",
                        row.len()
                    )));
                }
                let locals = row
                    .iter()
                    .enumerate()
                    .map(|(d, &x)| basis.spec(d).eval_local(d, x, deriv_orders[d]))
                    .collect::<Result<Vec<_>>>()?;
                let refs: Vec<&(usize, Vec<f64>)> = locals.iter().collect();
                builder.push(&refs);
            }
            Ok(builder.finish())
        }
    }
}

struct RowBuilder {
    strides: Vec<usize>,
    widths: Vec<usize>,
    nnz_row: usize,
    n_cols: usize,
    deriv_orders: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    n_rows: usize,
}

impl RowBuilder {
    fn new(basis: &TensorBasis, deriv_orders: &[usize], rows: usize) -> Self {
        let sizes = basis.sizes();
        let mut strides = Vec::with_capacity(sizes.len());
        let mut s = 1;
        for &m in &sizes {
            strides.push(s);
            s *= m;
        }
        let widths: Vec<usize> = basis.specs().iter().map(|b| b.degree() + 1).collect();
        let nnz_row = widths.iter().product();
        Self {
            strides,
            widths,
            nnz_row,
            n_cols: s,
            deriv_orders: deriv_orders.to_vec(),
            cols: Vec::with_capacity(rows * nnz_row),
            vals: Vec::with_capacity(rows * nnz_row),
            n_rows: 0,
        }
    }

    fn push(&mut self, locals: &[&(usize, Vec<f64>)]) {
        let p = locals.len();
        let mut off = vec![0usize; p];
        for _ in 0..self.nnz_row {
            let mut col = 0;
            let mut v = 1.0;
            for d in 0..p {
                col += (locals[d].0 + off[d]) * self.strides[d];
                v *= locals[d].1[off[d]];
            }
            self.cols.push(col);
            self.vals.push(v);
            for d in 0..p {
                off[d] += 1;
                if off[d] < self.widths[d] {
                    break;
                }
                off[d] = 0;
            }
        }
        self.n_rows += 1;
    }

    fn finish(self) -> DesignMatrix {
        DesignMatrix {
            n_rows: self.n_rows,
            n_cols: self.n_cols,
            deriv_orders: self.deriv_orders,
            nnz_row: self.nnz_row,
            cols: self.cols,
            vals: self.vals,
        }
    }
}

/// Maps public coefficient indices to the dimension order that minimizes
/// the bandwidth of tensor Gram-type matrices.
///
/// Two coefficients interact only if their multi-indices differ by at most
/// `degree_d` in every dimension. With dimension order `o_1, …, o_p`
/// (fastest first) the band half-width is `Σ_i degree_{o_i} ∏_{j<i} M_{o_j}`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefLayout {
    sizes: Vec<usize>,
    degrees: Vec<usize>,
    band_strides: Vec<usize>,
    bandwidth: usize,
    to_band: Vec<usize>,
    to_public: Vec<usize>,
}

impl CoefLayout {
    pub fn new(sizes: &[usize], degrees: &[usize]) -> Self {
        let p = sizes.len();
        let mut best: Option<(usize, Vec<usize>)> = None;
        for order in permutations(p) {
            let mut bw = 0;
            let mut stride = 1;
            for &d in &order {
                bw += degrees[d] * stride;
                stride *= sizes[d];
            }
            if best.as_ref().is_none_or(|(b, _)| bw < *b) {
                best = Some((bw, order));
            }
        }
        let (bandwidth, order) = best.unwrap();
        let mut band_strides = vec![0; p];
        let mut stride = 1;
        for &d in &order {
            band_strides[d] = stride;
            stride *= sizes[d];
        }
        let n: usize = sizes.iter().product();
        let mut to_band = vec![0; n];
        let mut to_public = vec![0; n];
        let mut multi = vec![0usize; p];
        for (public, slot) in to_band.iter_mut().enumerate() {
            let mut rem = public;
            for d in 0..p {
                multi[d] = rem % sizes[d];
                rem /= sizes[d];
            }
            let b: usize = (0..p).map(|d| multi[d] * band_strides[d]).sum();
            *slot = b;
            to_public[b] = public;
        }
        Self {
            sizes: sizes.to_vec(),
            degrees: degrees.to_vec(),
            band_strides,
            bandwidth: bandwidth.min(n.saturating_sub(1)),
            to_band,
            to_public,
        }
    }

    pub fn n(&self) -> usize {
        self.to_band.len()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn degrees(&self) -> &[usize] {
        &self.degrees
    }

    pub fn bandwidth(&self) -> usize {
        self.bandwidth
    }

    #[inline]
    pub fn band_index(&self, public: usize) -> usize {
        self.to_band[public]
    }

    /// Band index of a coefficient multi-index.
    #[inline]
    pub fn band_index_multi(&self, multi: &[usize]) -> usize {
        multi
            .iter()
            .zip(&self.band_strides)
            .map(|(&j, &s)| j * s)
            .sum()
    }

    pub fn to_band_vec(&self, public: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; public.len()];
        for (i, &v) in public.iter().enumerate() {
            out[self.to_band[i]] = v;
        }
        out
    }

    pub fn to_public_vec(&self, band: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; band.len()];
        for (b, &v) in band.iter().enumerate() {
            out[self.to_public[b]] = v;
        }
        out
    }
}

fn permutations(p: usize) -> Vec<Vec<usize>> {
    fn rec(cur: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if cur.len() == used.len() {
            out.push(cur.clone());
            return;
        }
        for d in 0..used.len() {
            if !used[d] {
                used[d] = true;
                cur.push(d);
                rec(cur, used, out);
                cur.pop();
                used[d] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; p], &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cubic(lo: f64, hi: f64, m: usize) -> BasisSpec1D {
        BasisSpec1D::equidistant(lo, hi, 3, m).unwrap()
    }

    #[test]
    fn basis_counts() {
        let s = BasisSpec1D::equidistant(0.0, 1.0, 3, 29).unwrap();
        assert_eq!(s.interior_knots().len(), 25);
        assert_eq!(s.n_basis(), 29);
        let s = BasisSpec1D::new(0.0, 1.0, 0, vec![]).unwrap();
        assert_eq!(s.n_basis(), 1);
        let interior = linspace(-3.0, 3.0, 26)[1..25].to_vec();
        let s = build_knots(-3.0, 3.0, 3, &interior).unwrap();
        assert_eq!(s.n_basis(), 28);
        assert_eq!(s.knots().len(), 24 + 8);
        assert_eq!(&s.knots()[..4], &[-3.0; 4]);
    }

    #[test]
    fn invalid_knots_are_named() {
        let err = BasisSpec1D::new(0.0, 1.0, 3, vec![0.2, 0.1]).unwrap_err();
        assert!(matches!(err, Error::InvalidKnot { index: 1, .. }), "{err}");
        let err = BasisSpec1D::new(0.0, 1.0, 3, vec![0.5, 1.0]).unwrap_err();
        assert!(matches!(err, Error::InvalidKnot { index: 1, .. }));
        assert!(BasisSpec1D::new(1.0, 1.0, 3, vec![]).is_err());
    }

    #[test]
    fn hat_functions_at_span_midpoint() {
        let s = BasisSpec1D::new(0.0, 4.0, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let b = eval_basis_1d(&s, &[1.5], 0).unwrap();
        assert_eq!(b.ncols(), 5);
        assert!((b[(0, 1)] - 0.5).abs() < 1e-15);
        assert!((b[(0, 2)] - 0.5).abs() < 1e-15);
        assert_eq!(b.row(0).iter().filter(|v| **v != 0.0).count(), 2);
    }

    #[test]
    fn right_endpoint_uses_left_limit() {
        let s = cubic(0.0, 1.0, 7);
        let b = eval_basis_1d(&s, &[1.0, 0.0], 0).unwrap();
        assert!((b[(0, 6)] - 1.0).abs() < 1e-15);
        assert!((b[(1, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn out_of_domain_and_high_derivative_fail() {
        let s = cubic(0.0, 1.0, 7);
        assert!(matches!(
            eval_basis_1d(&s, &[1.5], 0),
            Err(Error::OutsideDomain { .. })
        ));
        assert!(matches!(
            eval_basis_1d(&s, &[0.5], 4),
            Err(Error::DerivativeTooHigh { .. })
        ));
    }

    #[test]
    fn derivative_matches_finite_differences() {
        let s = BasisSpec1D::new(-1.0, 2.0, 3, vec![-0.4, 0.1, 0.35, 1.2]).unwrap();
        let h = 1e-6;
        for &x in &[-0.8, -0.2, 0.2, 0.7, 1.5, 1.9] {
            let d = eval_basis_1d(&s, &[x], 1).unwrap();
            let fp = eval_basis_1d(&s, &[x + h], 0).unwrap();
            let fm = eval_basis_1d(&s, &[x - h], 0).unwrap();
            for j in 0..s.n_basis() {
                let fd = (fp[(0, j)] - fm[(0, j)]) / (2.0 * h);
                let scale = d[(0, j)].abs().max(1.0);
                assert!((fd - d[(0, j)]).abs() < 1e-6 * scale, "x={x} j={j}");
            }
            let d2 = eval_basis_1d(&s, &[x], 2).unwrap();
            let dp = eval_basis_1d(&s, &[x + h], 1).unwrap();
            let dm = eval_basis_1d(&s, &[x - h], 1).unwrap();
            for j in 0..s.n_basis() {
                let fd = (dp[(0, j)] - dm[(0, j)]) / (2.0 * h);
                assert!((fd - d2[(0, j)]).abs() < 1e-5 * d2[(0, j)].abs().max(1.0));
            }
        }
    }

    #[test]
    fn grid_design_is_kronecker_product() {
        let b1 = cubic(-3.0, 3.0, 6);
        let b2 = BasisSpec1D::equidistant(0.0, 1.0, 2, 5).unwrap();
        let basis = TensorBasis::new(vec![b1.clone(), b2.clone()]).unwrap();
        let a1 = vec![-2.5, -0.1, 0.7];
        let a2 = vec![0.0, 0.3, 0.55, 1.0];
        let grid = tensor_design(&basis, &PointSet::Grid(vec![a1.clone(), a2.clone()]), &[1, 0])
            .unwrap()
            .to_dense();
        assert_eq!(grid.shape(), (12, 30));
        let m1 = eval_basis_1d(&b1, &a1, 1).unwrap();
        let m2 = eval_basis_1d(&b2, &a2, 0).unwrap();
        let kron = m2.kronecker(&m1);
        assert!((grid - kron).abs().max() < 1e-14);
    }

    #[test]
    fn one_dimensional_tensor_matches_eval() {
        let b1 = cubic(0.0, 2.0, 8);
        let basis = TensorBasis::new(vec![b1.clone()]).unwrap();
        let pts = vec![0.0, 0.3, 1.1, 2.0];
        let d = tensor_design(&basis, &PointSet::Grid(vec![pts.clone()]), &[1])
            .unwrap()
            .to_dense();
        assert_eq!(d, eval_basis_1d(&b1, &pts, 1).unwrap());
    }

    #[test]
    fn layout_picks_smaller_bandwidth() {
        let l = CoefLayout::new(&[28, 13], &[3, 3]);
        assert_eq!(l.bandwidth(), 3 * 13 + 3);
        let mut seen = vec![false; 28 * 13];
        for i in 0..28 * 13 {
            seen[l.band_index(i)] = true;
        }
        assert!(seen.iter().all(|&s| s));
        let v: Vec<f64> = (0..364).map(|i| i as f64).collect();
        assert_eq!(l.to_public_vec(&l.to_band_vec(&v)), v);
    }

    proptest! {
        #[test]
        fn partition_of_unity_and_local_support(
            x1 in -3.0f64..3.0, x2 in 0.0f64..1.0, deg1 in 0usize..5, deg2 in 1usize..4
        ) {
            let b1 = BasisSpec1D::new(-3.0, 3.0, deg1, vec![-2.0, -0.5, 0.0, 1.3]).unwrap();
            let b2 = BasisSpec1D::equidistant(0.0, 1.0, deg2, deg2 + 4).unwrap();
            let basis = TensorBasis::new(vec![b1, b2]).unwrap();
            let d = tensor_design(&basis, &PointSet::Scatter(vec![vec![x1, x2]]), &[0, 0]).unwrap();
            prop_assert!((d.row_sums()[0] - 1.0).abs() < 1e-12);
            let nz = d.row(0).1.iter().filter(|v| **v != 0.0).count();
            prop_assert!(nz <= (deg1 + 1) * (deg2 + 1));
            let d1 = tensor_design(&basis, &PointSet::Scatter(vec![vec![x1, x2]]), &[0, 1]).unwrap();
            prop_assert!(d1.row_sums()[0].abs() < 1e-10);
        }

        #[test]
        fn grid_and_scatter_agree(n1 in 1usize..5, n2 in 1usize..5, shift in 0.0f64..0.5) {
            let basis = TensorBasis::new(vec![cubic(-3.0, 3.0, 7), cubic(0.0, 1.0, 6)]).unwrap();
            let a1: Vec<f64> = (0..n1).map(|i| -3.0 + shift + i as f64 * 1.1).collect();
            let a2: Vec<f64> = (0..n2).map(|i| shift * 0.5 + i as f64 * 0.12).collect();
            let grid = PointSet::Grid(vec![a1, a2]);
            let scatter = PointSet::Scatter(grid.rows());
            for deriv in [[0, 0], [1, 0], [2, 1]] {
                let g = tensor_design(&basis, &grid, &deriv).unwrap().to_dense();
                let s = tensor_design(&basis, &scatter, &deriv).unwrap().to_dense();
                prop_assert!((g - s).abs().max() <= 1e-14);
            }
        }
    }
}
