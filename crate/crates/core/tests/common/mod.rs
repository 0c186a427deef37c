#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use pdespline::basis::{linspace, tensor_design, BasisSpec1D, PointSet, TensorBasis};
use pdespline::freq::FreqProblem;
use pdespline::pde::{build_constraints, PenaltyAssembler, DEFAULT_QUAD_POINTS};
use pdespline::sim::{diffusion_initial_condition, diffusion_pde, diffusion_solution};

pub const THETA: [f64; 2] = [0.5, 1.5];

pub fn diffusion_basis(n1: usize, n2: usize) -> TensorBasis {
    TensorBasis::new(vec![
        BasisSpec1D::equidistant(-3.0, 3.0, 3, n1).unwrap(),
        BasisSpec1D::equidistant(0.0, 1.0, 3, n2).unwrap(),
    ])
    .unwrap()
}

/// Noisy diffusion data on a `grid` lattice, fitted with an `n1 × n2` basis
/// and the initial condition as constraints.
pub fn diffusion_problem(n1: usize, n2: usize, grid: [usize; 2], sd: f64, seed: u64) -> FreqProblem {
    let basis = diffusion_basis(n1, n2);
    let points = PointSet::Grid(vec![linspace(-3.0, 3.0, grid[0]), linspace(0.0, 1.0, grid[1])]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zeta: Vec<f64> = points
        .rows()
        .iter()
        .map(|x| {
            let e: f64 = rng.sample(StandardNormal);
            diffusion_solution(x[0], x[1], &THETA).unwrap() + sd * e
        })
        .collect();
    let cons = build_constraints(&[diffusion_initial_condition(&basis)], &basis).unwrap();
    let assembler = PenaltyAssembler::new(&diffusion_pde(), &basis, DEFAULT_QUAD_POINTS).unwrap();
    let design = tensor_design(&basis, &points, &[0, 0]).unwrap();
    FreqProblem::new(assembler, design, zeta, Some(cons)).unwrap()
}

pub fn random_vec(n: usize, scale: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect()
}

pub fn norm2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}
