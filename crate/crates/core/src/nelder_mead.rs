//! Derivative-free simplex minimizer used by the distribution fits.

#[derive(Debug, Clone, Copy)]
pub struct Options {
    pub max_evals: usize,
    /// Stop when the spread of simplex values falls below this.
    pub f_tol: f64,
    /// Stop when the simplex diameter falls below this.
    pub x_tol: f64,
}

impl Default for Options {
    fn default() -> Self {
        Self {
            max_evals: 2000,
            f_tol: 1e-14,
            x_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
}

/// Minimize `f` starting from `x0` with initial simplex edge `step`.
///
/// Non-finite function values are treated as `+∞`.
pub fn minimize<F>(mut f: F, x0: &[f64], step: f64, opts: Options) -> Minimum
where
    F: FnMut(&[f64]) -> f64,
{
    let dim = x0.len();
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };

    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(dim + 1);
    simplex.push((x0.to_vec(), eval(x0, &mut evals)));
    for i in 0..dim {
        let mut x = x0.to_vec();
        x[i] += step;
        let fx = eval(&x, &mut evals);
        simplex.push((x, fx));
    }

    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    while evals < opts.max_evals {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].1;
        let worst = simplex[dim].1;
        let diameter = simplex[1..]
            .iter()
            .map(|(x, _)| {
                x.iter()
                    .zip(&simplex[0].0)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        if (worst - best).abs() <= opts.f_tol * (1.0 + best.abs()) && diameter <= opts.x_tol {
            break;
        }
        if diameter <= opts.x_tol * 1e-3 {
            break;
        }

        let mut centroid = vec![0.0; dim];
        for (x, _) in &simplex[..dim] {
            for (c, xi) in centroid.iter_mut().zip(x) {
                *c += xi / dim as f64;
            }
        }
        let along = |t: f64, from: &[f64]| -> Vec<f64> {
            centroid
                .iter()
                .zip(from)
                .map(|(c, w)| c + t * (c - w))
                .collect()
        };

        let xr = along(alpha, &simplex[dim].0);
        let fr = eval(&xr, &mut evals);
        if fr < simplex[0].1 {
            let xe = along(gamma, &simplex[dim].0);
            let fe = eval(&xe, &mut evals);
            simplex[dim] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[dim - 1].1 {
            simplex[dim] = (xr, fr);
        } else {
            let (xc, fc) = if fr < worst {
                let xc = along(rho, &xr);
                let fc = eval(&xc, &mut evals);
                (xc, fc)
            } else {
                let xc = along(-rho, &simplex[dim].0);
                let fc = eval(&xc, &mut evals);
                (xc, fc)
            };
            if fc < fr.min(worst) {
                simplex[dim] = (xc, fc);
            } else {
                // shrink toward the best vertex
                let x_best = simplex[0].0.clone();
                for vertex in simplex.iter_mut().skip(1) {
                    for (xi, bi) in vertex.0.iter_mut().zip(&x_best) {
                        *xi = bi + sigma * (*xi - bi);
                    }
                    vertex.1 = eval(&vertex.0, &mut evals);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, f) = simplex.swap_remove(0);
    Minimum { x, f, evals }
}
