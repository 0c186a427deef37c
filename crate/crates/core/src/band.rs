//! Symmetric banded matrices and their Cholesky factorization.
//!
//! Every system matrix built from tensor-product B-splines (Gram matrices,
//! penalty matrices, condition products) only couples coefficients whose
//! supports overlap, so it is banded once the coefficients are ordered
//! suitably. Storage is the lower band by columns (the LAPACK `L` band
//! layout): column `j` holds `(j, j) ..= (j + bw, j)`, so the updates of a
//! right-looking factorization are contiguous.

use crate::error::{Error, Result};
use nalgebra::DMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct SymBand {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl SymBand {
    pub fn zeros(n: usize, bw: usize) -> Self {
        let bw = bw.min(n.saturating_sub(1));
        Self {
            n,
            bw,
            data: vec![0.0; n * (bw + 1)],
        }
    }

    pub fn identity(n: usize, bw: usize) -> Self {
        let mut m = Self::zeros(n, bw);
        m.add_diag(1.0);
        m
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && i - j <= self.bw);
        j * (self.bw + 1) + (i - j)
    }

    /// Entry `(i, j)`; zero outside the band.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        if i - j > self.bw {
            0.0
        } else {
            self.data[self.idx(i, j)]
        }
    }

    /// Adds `v` to the symmetric pair `(i, j)` / `(j, i)`.
    ///
    /// Panics if the entry lies outside the band.
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        assert!(
            i - j <= self.bw,
            "entry ({i}, {j}) outside bandwidth {}",
            self.bw
        );
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    pub fn add_diag(&mut self, v: f64) {
        for i in 0..self.n {
            let k = self.idx(i, i);
            self.data[k] += v;
        }
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.data[self.idx(i, i)]).collect()
    }

    pub fn mean_diag(&self) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        self.diag().iter().sum::<f64>() / self.n as f64
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|x| *x = 0.0);
    }

    /// `self += alpha * other`. `other` may have a narrower band.
    pub fn axpy(&mut self, alpha: f64, other: &SymBand) {
        assert_eq!(self.n, other.n, "dimension mismatch in band axpy");
        if other.bw == self.bw {
            for (a, b) in self.data.iter_mut().zip(&other.data) {
                *a += alpha * b;
            }
            return;
        }
        assert!(other.bw <= self.bw, "cannot add a wider band");
        let (w, wo) = (self.bw + 1, other.bw + 1);
        for j in 0..self.n {
            let len = (other.bw + 1).min(self.n - j);
            let dst = &mut self.data[j * w..j * w + len];
            for (a, b) in dst.iter_mut().zip(&other.data[j * wo..j * wo + len]) {
                *a += alpha * b;
            }
        }
    }

    /// Overwrites `self` with `alpha * other`.
    pub fn assign_scaled(&mut self, alpha: f64, other: &SymBand) {
        if other.bw == self.bw && other.n == self.n {
            for (a, b) in self.data.iter_mut().zip(&other.data) {
                *a = alpha * b;
            }
        } else {
            self.fill_zero();
            self.axpy(alpha, other);
        }
    }

    /// `alpha * self` as a new matrix.
    pub fn scaled(&self, alpha: f64) -> SymBand {
        SymBand {
            n: self.n,
            bw: self.bw,
            data: self.data.iter().map(|x| alpha * x).collect(),
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|x| *x *= alpha);
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        let w = self.bw + 1;
        let mut y = vec![0.0; self.n];
        for j in 0..self.n {
            let m = self.bw.min(self.n - 1 - j);
            let col = &self.data[j * w..j * w + m + 1];
            let xj = x[j];
            let mut acc = col[0] * xj;
            for (t, a) in col.iter().enumerate().skip(1) {
                acc += a * x[j + t];
                y[j + t] += a * xj;
            }
            y[j] += acc;
        }
        y
    }

    /// `xᵀ A x`.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        let ax = self.mul_vec(x);
        dot(&ax, x)
    }

    /// Frobenius inner product `Σ_ij A_ij B_ij` of two symmetric band matrices.
    pub fn frobenius_dot(&self, other: &SymBand) -> f64 {
        assert_eq!(self.n, other.n);
        let bw = self.bw.min(other.bw);
        let mut s = 0.0;
        for j in 0..self.n {
            for i in j..=(j + bw).min(self.n - 1) {
                let p = self.data[self.idx(i, j)] * other.data[other.idx(i, j)];
                s += if i == j { p } else { 2.0 * p };
            }
        }
        s
    }

    /// Largest absolute row sum, an upper bound on the spectral radius.
    pub fn norm_inf(&self) -> f64 {
        let mut rows = vec![0.0f64; self.n];
        for j in 0..self.n {
            for i in j..=(j + self.bw).min(self.n - 1) {
                let a = self.data[self.idx(i, j)].abs();
                rows[i] += a;
                if j != i {
                    rows[j] += a;
                }
            }
        }
        rows.into_iter().fold(0.0, f64::max)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for j in 0..self.n {
            for i in j..=(j + self.bw).min(self.n - 1) {
                let v = self.data[self.idx(i, j)];
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        m
    }

    /// Lower-triangular band Cholesky factor `A = L Lᵀ`.
    pub fn cholesky(&self) -> Result<BandCholesky> {
        self.clone().into_cholesky()
    }

    /// As [`Self::cholesky`], factoring in place in the matrix's own storage.
    pub fn into_cholesky(self) -> Result<BandCholesky> {
        let Self { n, bw, data: mut l } = self;
        #[cfg(target_arch = "x86_64")]
        {
            if std::arch::is_x86_feature_detected!("avx2")
                && std::arch::is_x86_feature_detected!("fma")
            {
                // SAFETY: both target features were detected at runtime
                unsafe { cholesky_avx2(&mut l, n, bw)? };
                return Ok(BandCholesky { n, bw, l });
            }
        }
        cholesky_in_place(&mut l, n, bw)?;
        Ok(BandCholesky { n, bw, l })
    }

    /// Cholesky with a diagonal ridge `floor` added only when the plain
    /// factorization fails. Returns the factor and whether the ridge was used.
    pub fn cholesky_with_floor(&self, floor: f64) -> Result<(BandCholesky, bool)> {
        match self.cholesky() {
            Ok(c) => Ok((c, false)),
            Err(_) => {
                let mut m = self.clone();
                m.add_diag(floor);
                m.cholesky().map(|c| (c, true))
            }
        }
    }

    /// Number of eigenvalues strictly below `shift`, from the inertia of the
    /// band `LDLᵀ` factorization of `A - shift·I` (Sylvester's law).
    pub fn count_eigenvalues_below(&self, shift: f64) -> usize {
        let (n, bw) = (self.n, self.bw);
        let w = bw + 1;
        let mut a = self.data.clone();
        for j in 0..n {
            a[j * w] -= shift;
        }
        let tiny = f64::EPSILON * self.norm_inf().max(f64::MIN_POSITIVE);
        let mut neg = 0;
        for k in 0..n {
            let (head, tail) = a.split_at_mut((k + 1) * w);
            let ck = &mut head[k * w..];
            let mut d = ck[0];
            if d.abs() < tiny {
                d = if d < 0.0 { -tiny } else { tiny };
            }
            if d < 0.0 {
                neg += 1;
            }
            let m = bw.min(n - 1 - k);
            // a_ij -= a_ik a_jk / d for the trailing block
            for t in 1..=m {
                let f = ck[t] / d;
                let cj = &mut tail[(t - 1) * w..(t - 1) * w + (m - t + 1)];
                for (x, y) in cj.iter_mut().zip(&ck[t..=m]) {
                    *x -= f * y;
                }
            }
        }
        neg
    }
}

#[derive(Debug, Clone)]
pub struct BandCholesky {
    n: usize,
    bw: usize,
    l: Vec<f64>,
}

impl BandCholesky {
    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.l[j * (self.bw + 1) + (i - j)]
    }

    pub fn logdet(&self) -> f64 {
        2.0 * (0..self.n).map(|i| self.at(i, i).ln()).sum::<f64>()
    }

    /// Solves `L y = b` in place.
    pub fn forward_in_place(&self, b: &mut [f64]) {
        let w = self.bw + 1;
        for j in 0..self.n {
            let m = self.bw.min(self.n - 1 - j);
            let col = &self.l[j * w..j * w + m + 1];
            let xj = b[j] / col[0];
            b[j] = xj;
            for (y, a) in b[j + 1..=j + m].iter_mut().zip(&col[1..]) {
                *y -= a * xj;
            }
        }
    }

    /// Solves `Lᵀ x = y` in place.
    pub fn backward_in_place(&self, b: &mut [f64]) {
        let w = self.bw + 1;
        for i in (0..self.n).rev() {
            let m = self.bw.min(self.n - 1 - i);
            let col = &self.l[i * w..i * w + m + 1];
            let s = dot(&col[1..], &b[i + 1..=i + m]);
            b[i] = (b[i] - s) / col[0];
        }
    }

    pub fn solve_in_place(&self, b: &mut [f64]) {
        self.forward_in_place(b);
        self.backward_in_place(b);
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    /// `bᵀ A⁻¹ b` computed as `‖L⁻¹ b‖²`.
    pub fn inv_quad(&self, b: &[f64]) -> f64 {
        let mut y = b.to_vec();
        self.forward_in_place(&mut y);
        dot(&y, &y)
    }

    /// Entries of `A⁻¹` inside the band (Takahashi recurrences).
    pub fn selected_inverse(&self) -> SymBand {
        let (n, bw) = (self.n, self.bw);
        let w = bw + 1;
        let mut z = SymBand::zeros(n, bw);
        let mut acc = vec![0.0; w];
        for j in (0..n).rev() {
            let m = bw.min(n - 1 - j);
            let lcol = &self.l[j * w..j * w + m + 1];
            let ljj = lcol[0];
            // acc[t] = Σ_k Z[j+t, k] L[k, j] over k in j+1 ..= j+m
            acc[..=m].iter_mut().for_each(|a| *a = 0.0);
            for t in 1..=m {
                let k = j + t;
                let zk = &z.data[k * w..k * w + (m - t) + 1];
                acc[t] += dot(zk, &lcol[t..=m]);
                let lk = lcol[t];
                for (a, zv) in acc[t + 1..=m].iter_mut().zip(&zk[1..]) {
                    *a += lk * zv;
                }
            }
            let zj = &mut z.data[j * w..j * w + m + 1];
            for t in 1..=m {
                zj[t] = -acc[t] / ljj;
            }
            let s = dot(&zj[1..], &lcol[1..]);
            zj[0] = (1.0 / ljj - s) / ljj;
        }
        z
    }

    /// Maps a standard-normal vector `e` to `L⁻ᵀ e`, a draw from `N(0, A⁻¹)`.
    pub fn sample_centered(&self, e: &mut [f64]) {
        self.backward_in_place(e);
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn cholesky_avx2(l: &mut [f64], n: usize, bw: usize) -> Result<()> {
    cholesky_in_place(l, n, bw)
}

/// Pivot columns handled together by the trailing update.
const PANEL: usize = 4;

/// Right-looking band Cholesky on column-major lower storage. Pivots are
/// taken in panels of four so each trailing column is read once per panel.
#[inline(always)]
fn cholesky_in_place(l: &mut [f64], n: usize, bw: usize) -> Result<()> {
    let w = bw + 1;
    let mut k = 0;
    while k < n {
        let p = PANEL.min(n - k);
        // factor the panel; each pivot updates the remaining panel columns
        for q in 0..p {
            let kk = k + q;
            let (head, tail) = l.split_at_mut((kk + 1) * w);
            let ck = &mut head[kk * w..];
            let d = ck[0];
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite { pivot: kk, value: d });
            }
            let lkk = d.sqrt();
            ck[0] = lkk;
            let m = bw.min(n - 1 - kk);
            let inv = 1.0 / lkk;
            for v in &mut ck[1..=m] {
                *v *= inv;
            }
            for t in 1..(p - q).min(m + 1) {
                let f = ck[t];
                let cj = &mut tail[(t - 1) * w..(t - 1) * w + (m - t + 1)];
                for (a, b) in cj.iter_mut().zip(&ck[t..=m]) {
                    *a -= f * b;
                }
            }
        }
        // trailing columns reached by the panel
        let last = (k + p - 1 + bw).min(n - 1);
        let (head, tail) = l.split_at_mut((k + p) * w);
        let piv = &head[k * w..];
        for j in (k + p)..=last {
            let cj = &mut tail[(j - k - p) * w..(j - k - p + 1) * w];
            if p == PANEL && j <= k + bw {
                // rows j..=common are reached by all four pivots
                let f: [f64; PANEL] = std::array::from_fn(|q| piv[q * w + (j - k - q)]);
                let common = (k + bw).min(n - 1);
                let len = common + 1 - j;
                let s0 = &piv[j - k..j - k + len];
                let s1 = &piv[w + j - k - 1..w + j - k - 1 + len];
                let s2 = &piv[2 * w + j - k - 2..2 * w + j - k - 2 + len];
                let s3 = &piv[3 * w + j - k - 3..3 * w + j - k - 3 + len];
                for ((((a, b0), b1), b2), b3) in cj[..len].iter_mut().zip(s0).zip(s1).zip(s2).zip(s3) {
                    *a -= f[0] * b0 + f[1] * b1 + f[2] * b2 + f[3] * b3;
                }
                for (q, &fq) in f.iter().enumerate().skip(1) {
                    let kq = k + q;
                    let hi = (kq + bw).min(n - 1);
                    for i in common + 1..=hi {
                        cj[i - j] -= fq * piv[q * w + (i - kq)];
                    }
                }
            } else {
                for q in 0..p {
                    let kq = k + q;
                    if j > kq + bw {
                        continue;
                    }
                    let hi = (kq + bw).min(n - 1);
                    let fq = piv[q * w + (j - kq)];
                    for i in j..=hi {
                        cj[i - j] -= fq * piv[q * w + (i - kq)];
                    }
                }
            }
        }
        k += p;
    }
    Ok(())
}

/// Inner product with eight independent accumulators so the loop vectorizes.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, bw: usize, seed: u64) -> SymBand {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = SymBand::zeros(n, bw);
        for i in 0..n {
            for j in i.saturating_sub(bw)..=i {
                m.add(i, j, rng.random_range(-1.0..1.0));
            }
        }
        m.add_diag(2.0 * (bw as f64 + 1.0));
        m
    }

    #[test]
    fn cholesky_matches_dense() {
        let a = random_spd(40, 5, 1);
        let dense = a.to_dense();
        let chol = a.cholesky().unwrap();
        let dchol = dense.clone().cholesky().unwrap();
        let det_dense = 2.0 * dchol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        assert!((chol.logdet() - det_dense).abs() < 1e-10);
        let b: Vec<f64> = (0..40).map(|i| (i as f64 * 0.3).sin()).collect();
        let x = chol.solve(&b);
        let xd = dchol.solve(&nalgebra::DVector::from_vec(b.clone()));
        for i in 0..40 {
            assert!((x[i] - xd[i]).abs() < 1e-12);
        }
        assert!((chol.inv_quad(&b) - crate::band::dot(&b, &x)).abs() < 1e-10);
    }

    #[test]
    fn selected_inverse_matches_dense_inverse() {
        let a = random_spd(30, 4, 7);
        let inv = a.to_dense().try_inverse().unwrap();
        let z = a.cholesky().unwrap().selected_inverse();
        for i in 0..30usize {
            for j in i.saturating_sub(4)..=i {
                assert!((z.get(i, j) - inv[(i, j)]).abs() < 1e-12, "({i},{j})");
            }
        }
    }

    #[test]
    fn inertia_counts_eigenvalues() {
        let a = random_spd(25, 3, 3);
        let eig = a.to_dense().symmetric_eigenvalues();
        for shift in [0.0, 5.0, 8.0, 10.0, 100.0] {
            let expected = eig.iter().filter(|&&e| e < shift).count();
            assert_eq!(a.count_eigenvalues_below(shift), expected, "shift {shift}");
        }
    }

    #[test]
    fn mul_vec_and_frobenius() {
        let a = random_spd(12, 2, 5);
        let b = random_spd(12, 3, 6);
        let x: Vec<f64> = (0..12).map(|i| i as f64 - 4.0).collect();
        let y = a.mul_vec(&x);
        let yd = a.to_dense() * nalgebra::DVector::from_vec(x.clone());
        for i in 0..12 {
            assert!((y[i] - yd[i]).abs() < 1e-12);
        }
        let f = a.to_dense().component_mul(&b.to_dense()).sum();
        assert!((a.frobenius_dot(&b) - f).abs() < 1e-10);
        let mut c = b.clone();
        c.axpy(2.0, &a);
        assert!((c.to_dense() - (b.to_dense() + 2.0 * a.to_dense())).norm() < 1e-12);
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let mut a = SymBand::identity(4, 1);
        a.add(2, 2, -3.0);
        assert!(matches!(
            a.cholesky(),
            Err(Error::NotPositiveDefinite { pivot: 2, .. })
        ));
    }
}
