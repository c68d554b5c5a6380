//! Derivative-free minimisation (Nelder–Mead with standard coefficients).

/// Outcome of one Nelder–Mead run.
#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct NelderMead {
    pub max_evals: usize,
    pub initial_step: f64,
    /// Stop when the spread of simplex values falls below this.
    pub f_tol: f64,
    /// ...and the simplex diameter falls below this.
    pub x_tol: f64,
}

impl Default for NelderMead {
    fn default() -> Self {
        Self {
            max_evals: 500,
            initial_step: 0.5,
            f_tol: 1e-8,
            x_tol: 1e-6,
        }
    }
}

impl NelderMead {
    /// Minimises `f` from `x0`. Non-finite values are treated as `+inf`.
    pub fn minimise<F: FnMut(&[f64]) -> f64>(&self, mut f: F, x0: &[f64]) -> Minimum {
        let d = x0.len();
        let mut evals = 0usize;
        let mut eval = |x: &[f64], evals: &mut usize| {
            *evals += 1;
            let v = f(x);
            if v.is_nan() {
                f64::INFINITY
            } else {
                v
            }
        };
        if d == 0 {
            let value = eval(x0, &mut evals);
            return Minimum {
                x: vec![],
                value,
                evaluations: evals,
                converged: true,
            };
        }

        let mut simplex: Vec<Vec<f64>> = vec![x0.to_vec()];
        for i in 0..d {
            let mut v = x0.to_vec();
            v[i] += self.initial_step;
            simplex.push(v);
        }
        let mut values: Vec<f64> = simplex.iter().map(|x| eval(x, &mut evals)).collect();
        let mut converged = false;

        while evals < self.max_evals {
            let mut order: Vec<usize> = (0..=d).collect();
            order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
            simplex = order.iter().map(|&i| simplex[i].clone()).collect();
            values = order.iter().map(|&i| values[i]).collect();

            let spread = values[d] - values[0];
            let diameter = simplex[1..]
                .iter()
                .map(|x| x.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
                .fold(0.0, f64::max);
            if values[0].is_finite() && spread.abs() <= self.f_tol && diameter <= self.x_tol {
                converged = true;
                break;
            }

            let centroid: Vec<f64> = (0..d).map(|j| simplex[..d].iter().map(|x| x[j]).sum::<f64>() / d as f64).collect();
            let along = |t: f64| -> Vec<f64> { (0..d).map(|j| centroid[j] + t * (simplex[d][j] - centroid[j])).collect() };

            let xr = along(-1.0);
            let fr = eval(&xr, &mut evals);
            if fr < values[0] {
                let xe = along(-2.0);
                let fe = eval(&xe, &mut evals);
                if fe < fr {
                    simplex[d] = xe;
                    values[d] = fe;
                } else {
                    simplex[d] = xr;
                    values[d] = fr;
                }
            } else if fr < values[d - 1] {
                simplex[d] = xr;
                values[d] = fr;
            } else {
                let (xc, fc) = if fr < values[d] {
                    let xc = along(-0.5);
                    let fc = eval(&xc, &mut evals);
                    (xc, fc)
                } else {
                    let xc = along(0.5);
                    let fc = eval(&xc, &mut evals);
                    (xc, fc)
                };
                if fc < values[d].min(fr) {
                    simplex[d] = xc;
                    values[d] = fc;
                } else {
                    for i in 1..=d {
                        let x: Vec<f64> = (0..d).map(|j| simplex[0][j] + 0.5 * (simplex[i][j] - simplex[0][j])).collect();
                        values[i] = eval(&x, &mut evals);
                        simplex[i] = x;
                    }
                }
            }
        }

        let best = (0..=d).min_by(|&a, &b| values[a].total_cmp(&values[b])).unwrap_or(0);
        Minimum {
            x: simplex[best].clone(),
            value: values[best],
            evaluations: evals,
            converged,
        }
    }
}
