//! Derivative-free Nelder–Mead minimization.

#[derive(Debug, Clone, PartialEq)]
pub struct NelderMeadOptions {
    pub max_evals: usize,
    /// Stop once the simplex diameter falls below `xtol · (1 + ‖x_best‖∞)`.
    pub xtol: f64,
    /// ... and the spread of simplex values below `ftol · (1 + |f_best|)`.
    pub ftol: f64,
    /// Give up after this many evaluations without a new best value.
    pub stall_evals: usize,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            max_evals: 2000,
            xtol: 1e-8,
            ftol: 1e-14,
            stall_evals: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NelderMeadResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    pub converged: bool,
    pub stalled: bool,
}

/// Minimizes `f` from `x0` with initial simplex offsets `step` along each
/// axis. Non-finite function values are treated as `+∞`.
pub fn nelder_mead<F>(mut f: F, x0: &[f64], step: &[f64], opts: &NelderMeadOptions) -> NelderMeadResult
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    let mut evals = 0usize;
    let mut best = f64::INFINITY;
    let mut since_best = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize, best: &mut f64, since: &mut usize| {
        *evals += 1;
        let v = f(x);
        let v = if v.is_finite() { v } else { f64::INFINITY };
        if v < *best {
            *best = v;
            *since = 0;
        } else {
            *since += 1;
        }
        v
    };

    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let v0 = eval(x0, &mut evals, &mut best, &mut since_best);
    simplex.push((x0.to_vec(), v0));
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += step[i];
        let v = eval(&x, &mut evals, &mut best, &mut since_best);
        simplex.push((x, v));
    }

    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    let mut converged = false;
    let mut stalled = false;
    loop {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let fb = simplex[0].1;
        let fw = simplex[n].1;
        let scale = 1.0 + simplex[0].0.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let diam = simplex[1..]
            .iter()
            .map(|(x, _)| {
                x.iter()
                    .zip(&simplex[0].0)
                    .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
            })
            .fold(0.0f64, f64::max);
        if diam <= opts.xtol * scale && (fw - fb).abs() <= opts.ftol * (1.0 + fb.abs()) {
            converged = true;
            break;
        }
        if evals >= opts.max_evals {
            break;
        }
        if since_best >= opts.stall_evals {
            stalled = true;
            break;
        }

        let mut centroid = vec![0.0; n];
        for (x, _) in &simplex[..n] {
            for (c, v) in centroid.iter_mut().zip(x) {
                *c += v / n as f64;
            }
        }
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[n].0)
                .map(|(c, w)| c + t * (w - c))
                .collect()
        };
        let xr = along(-alpha);
        let fr = eval(&xr, &mut evals, &mut best, &mut since_best);
        if fr < simplex[0].1 {
            let xe = along(-gamma);
            let fe = eval(&xe, &mut evals, &mut best, &mut since_best);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
            continue;
        }
        let (xc, fc) = if fr < simplex[n].1 {
            let xc = along(-rho);
            let fc = eval(&xc, &mut evals, &mut best, &mut since_best);
            (xc, fc)
        } else {
            let xc = along(rho);
            let fc = eval(&xc, &mut evals, &mut best, &mut since_best);
            (xc, fc)
        };
        if fc < simplex[n].1.min(fr) {
            simplex[n] = (xc, fc);
            continue;
        }
        let x0 = simplex[0].0.clone();
        for (x, v) in simplex.iter_mut().skip(1) {
            for (xi, bi) in x.iter_mut().zip(&x0) {
                *xi = bi + sigma * (*xi - bi);
            }
            *v = eval(x, &mut evals, &mut best, &mut since_best);
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, fx) = simplex.swap_remove(0);
    NelderMeadResult {
        x,
        f: fx,
        evals,
        converged,
        stalled,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let opts = NelderMeadOptions {
            stall_evals: 500,
            ..Default::default()
        };
        let r = nelder_mead(f, &[-1.2, 1.0], &[0.1, 0.1], &opts);
        assert!(r.converged, "{r:?}");
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn one_dimensional_quadratic() {
        let r = nelder_mead(|x| (x[0] - 0.1).powi(2), &[0.3], &[0.01], &Default::default());
        assert!((r.x[0] - 0.1).abs() < 1e-8);
    }

    #[test]
    fn flat_function_stalls() {
        let opts = NelderMeadOptions {
            xtol: 0.0,
            ftol: 0.0,
            ..Default::default()
        };
        let r = nelder_mead(|_| 1.0, &[0.0, 0.0], &[1.0, 1.0], &opts);
        assert!(r.stalled);
        assert!(r.evals <= 60);
    }
}
