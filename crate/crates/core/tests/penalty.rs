mod common;

use nalgebra::DMatrix;
use proptest::prelude::*;

use pdespline::basis::{eval_basis_1d, BasisSpec1D, TensorBasis};
use pdespline::pde::{
    kron_dense, weighted_gram_1d, Multiplier, PdeSpec, PdeTerm, PenaltyAssembler, Polynomial,
};
use pdespline::sim::diffusion_pde;

use common::{diffusion_basis, random_vec};

/// Trapezoid nodes and weights with `per_span` points on every knot span.
fn span_trapezoid(spec: &BasisSpec1D, per_span: usize) -> (Vec<f64>, Vec<f64>) {
    let mut xs = Vec::new();
    let mut ws = Vec::new();
    let bp = spec.breakpoints();
    for w in bp.windows(2) {
        let h = (w[1] - w[0]) / (per_span - 1) as f64;
        for i in 0..per_span {
            xs.push(if i + 1 == per_span { w[1] } else { w[0] + h * i as f64 });
            ws.push(if i == 0 || i + 1 == per_span { h / 2.0 } else { h });
        }
    }
    (xs, ws)
}

/// Dense penalty of the diffusion operator with the same trapezoid rule the
/// assembler uses, built from per-point residual rows.
fn dense_diffusion_penalty(basis: &TensorBasis, theta: &[f64], per_span: usize) -> DMatrix<f64> {
    let (s1, s2) = (basis.spec(0), basis.spec(1));
    let (x1, w1) = span_trapezoid(s1, per_span);
    let (x2, w2) = span_trapezoid(s2, per_span);
    let (b1, d1) = (eval_basis_1d(s1, &x1, 0).unwrap(), eval_basis_1d(s1, &x1, 1).unwrap());
    let (b2, d2) = (eval_basis_1d(s2, &x2, 0).unwrap(), eval_basis_1d(s2, &x2, 1).unwrap());
    let (n1, n2) = (s1.n_basis(), s2.n_basis());
    let m = n1 * n2;
    let mut r = DMatrix::zeros(m, m);
    let mut row = vec![0.0; m];
    for i in 0..x1.len() {
        for j in 0..x2.len() {
            for a in 0..n1 {
                for b in 0..n2 {
                    row[a + n1 * b] = d1[(i, a)] * b2[(j, b)]
                        + theta[0] * b1[(i, a)] * d2[(j, b)]
                        + theta[1] * b1[(i, a)] * b2[(j, b)];
                }
            }
            let w = w1[i] * w2[j];
            for p in 0..m {
                if row[p] == 0.0 {
                    continue;
                }
                for q in 0..m {
                    r[(p, q)] += w * row[p] * row[q];
                }
            }
        }
    }
    r
}

#[test]
fn assembled_penalty_matches_dense_construction() {
    let basis = diffusion_basis(7, 6);
    let theta = [0.7, -1.2];
    let per_span = 6;
    let q = PenaltyAssembler::new(&diffusion_pde(), &basis, per_span)
        .unwrap()
        .assemble(&theta)
        .unwrap();
    let dense = dense_diffusion_penalty(&basis, &theta, per_span);
    let assembled = q.dense_r();
    let rel = (&assembled - &dense).amax() / dense.amax();
    assert!(rel < 1e-12, "relative difference {rel:e}");
    assert!(!q.has_linear_part());
}

#[test]
fn penalty_is_quadratic_in_theta() {
    let basis = diffusion_basis(8, 6);
    let asm = PenaltyAssembler::new(&diffusion_pde(), &basis, 8).unwrap();
    let c = random_vec(basis.n_coef(), 1.0, 5);
    let (t0, dir) = ([0.3, 0.8], [0.4, -0.25]);
    let f: Vec<f64> = (0..4)
        .map(|k| {
            let th = [t0[0] + k as f64 * dir[0], t0[1] + k as f64 * dir[1]];
            asm.assemble(&th).unwrap().value(&c).unwrap()
        })
        .collect();
    // third difference of a quadratic vanishes
    let third = f[3] - 3.0 * f[2] + 3.0 * f[1] - f[0];
    assert!(third.abs() < 1e-10 * f.iter().map(|v| v.abs()).fold(0.0, f64::max));
}

#[test]
fn scaling_every_multiplier_scales_the_penalty_by_its_square() {
    // u_{x1} + θ₁u_{x2} + θ₂u with θ doubled and u_{x1} doubled is 2× the residual
    let basis = diffusion_basis(8, 6);
    let doubled = PdeSpec::new(
        2,
        vec![
            PdeTerm::new(Multiplier::constant(2.0), vec![1, 0]),
            PdeTerm::new(Multiplier::theta(1.0, 0, 1), vec![0, 1]),
            PdeTerm::new(Multiplier::theta(1.0, 1, 1), vec![0, 0]),
        ],
        vec![],
        vec!["a".into(), "b".into()],
    )
    .unwrap();
    let c = random_vec(basis.n_coef(), 1.0, 6);
    let base = PenaltyAssembler::new(&diffusion_pde(), &basis, 16)
        .unwrap()
        .assemble(&[0.5, 1.5])
        .unwrap()
        .value(&c)
        .unwrap();
    let twice = PenaltyAssembler::new(&doubled, &basis, 16)
        .unwrap()
        .assemble(&[1.0, 3.0])
        .unwrap()
        .value(&c)
        .unwrap();
    assert!((twice - 4.0 * base).abs() < 1e-10 * base);
}

#[test]
fn trapezoid_error_is_second_order() {
    let basis = diffusion_basis(10, 8);
    let c = random_vec(basis.n_coef(), 1.0, 101);
    let pen = |k: usize| {
        PenaltyAssembler::new(&diffusion_pde(), &basis, k)
            .unwrap()
            .assemble(&[0.5, 1.5])
            .unwrap()
            .value(&c)
            .unwrap()
    };
    // spacing halves when per-span points go k → 2k − 1
    let v: Vec<f64> = [9, 17, 33, 65].iter().map(|&k| pen(k)).collect();
    for w in v.windows(3) {
        let ratio = (w[0] - w[1]) / (w[1] - w[2]);
        assert!((3.9..4.1).contains(&ratio), "ratio {ratio}");
    }
}

#[test]
fn separable_term_is_a_kronecker_product() {
    let basis = diffusion_basis(6, 5);
    let pde = PdeSpec::new(
        2,
        vec![PdeTerm::new(Multiplier::constant(1.0), vec![1, 1])
            .with_poly(0, Polynomial(vec![1.0, 0.5]))
            .with_poly(1, Polynomial::monomial(2.0, 2))],
        vec![],
        vec![],
    )
    .unwrap();
    let q = PenaltyAssembler::new(&pde, &basis, 12).unwrap().assemble(&[]).unwrap();
    let p1 = Polynomial(vec![1.0, 0.5]);
    let p2 = Polynomial::monomial(2.0, 2);
    let g1 = weighted_gram_1d(basis.spec(0), 1, 1, &p1, &p1, 12).unwrap();
    let g2 = weighted_gram_1d(basis.spec(1), 1, 1, &p2, &p2, 12).unwrap();
    let expected = kron_dense(&[g1, g2]);
    assert!((q.dense_r() - &expected).amax() < 1e-12 * expected.amax());
}

#[test]
fn forcing_enters_linear_and_constant_parts() {
    // (u + θ)² = cᵀGc + 2θ cᵀ∫B + θ²·area
    let basis = diffusion_basis(6, 5);
    let pde = PdeSpec::new(
        2,
        vec![PdeTerm::new(Multiplier::constant(1.0), vec![0, 0])],
        vec![pdespline::pde::ForcingTerm {
            multiplier: Multiplier::theta(1.0, 0, 1),
            coeff_polys: vec![Polynomial::one(), Polynomial::one()],
        }],
        vec!["k".into()],
    )
    .unwrap();
    let q = PenaltyAssembler::new(&pde, &basis, 12).unwrap().assemble(&[2.0]).unwrap();
    let c = vec![1.0; basis.n_coef()];
    // with c ≡ 1 the spline is 1 everywhere, so PEN = (1 + 2)² · 6
    let pen = q.value(&c).unwrap();
    assert!((pen - 54.0).abs() < 1e-9, "{pen}");
    assert!((q.l() - 24.0).abs() < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn penalty_is_non_negative_and_symmetric(seed in 0u64..10_000, t1 in -2.0..2.0f64, t2 in -2.0..2.0f64) {
        let basis = diffusion_basis(7, 5);
        let q = PenaltyAssembler::new(&diffusion_pde(), &basis, 6).unwrap().assemble(&[t1, t2]).unwrap();
        let c = random_vec(basis.n_coef(), 1.0, seed);
        prop_assert!(q.value(&c).unwrap() >= -1e-12);
        let r = q.dense_r();
        prop_assert!((&r - r.transpose()).amax() <= 1e-14 * r.amax());
    }
}
