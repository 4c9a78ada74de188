//! Nelder-Mead downhill simplex.
//!
//! Standard coefficients: reflection 1, expansion 2, contraction 0.5,
//! shrink 0.5. Convergence needs both a small simplex and a flat objective
//! across its vertices.

#[derive(Clone, Debug)]
pub struct SimplexOptions {
    /// Initial edge length along each axis (one value per parameter or a single shared value).
    pub initial_step: Vec<f64>,
    /// Converged when the largest vertex distance from the best vertex is below this.
    pub x_tol: f64,
    /// ... and the objective spread across vertices is below this.
    pub f_tol: f64,
    pub max_evals: usize,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        Self { initial_step: vec![0.1], x_tol: 1e-8, f_tol: 1e-12, max_evals: 100_000 }
    }
}

#[derive(Clone, Debug)]
pub struct SimplexResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    pub converged: bool,
}

const REFLECT: f64 = 1.0;
const EXPAND: f64 = 2.0;
const CONTRACT: f64 = 0.5;
const SHRINK: f64 = 0.5;

pub fn minimize<F: FnMut(&[f64]) -> f64>(mut f: F, start: &[f64], opts: &SimplexOptions) -> SimplexResult {
    let n = start.len();
    assert!(n > 0, "need at least one parameter");
    let step = |k: usize| opts.initial_step.get(k).copied().unwrap_or(opts.initial_step[0]);

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

    let mut pts: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    pts.push(start.to_vec());
    for k in 0..n {
        let mut p = start.to_vec();
        p[k] += step(k);
        pts.push(p);
    }
    let mut vals: Vec<f64> = pts.iter().map(|p| eval(p, &mut evals)).collect();

    let mut converged = false;
    loop {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        pts = order.iter().map(|&i| pts[i].clone()).collect();
        vals = order.iter().map(|&i| vals[i]).collect();

        let diameter = pts[1..]
            .iter()
            .map(|p| p.iter().zip(&pts[0]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        let spread = vals[n] - vals[0];
        if diameter < opts.x_tol && spread < opts.f_tol {
            converged = true;
            break;
        }
        if evals >= opts.max_evals {
            break;
        }

        let centroid: Vec<f64> = (0..n).map(|k| pts[..n].iter().map(|p| p[k]).sum::<f64>() / n as f64).collect();
        let along = |coef: f64| -> Vec<f64> { centroid.iter().zip(&pts[n]).map(|(c, w)| c + coef * (c - w)).collect() };

        let xr = along(REFLECT);
        let fr = eval(&xr, &mut evals);
        if fr < vals[0] {
            let xe = along(EXPAND);
            let fe = eval(&xe, &mut evals);
            if fe < fr {
                pts[n] = xe;
                vals[n] = fe;
            } else {
                pts[n] = xr;
                vals[n] = fr;
            }
            continue;
        }
        if fr < vals[n - 1] {
            pts[n] = xr;
            vals[n] = fr;
            continue;
        }
        if fr < vals[n] {
            // outside contraction
            let xc = along(CONTRACT * REFLECT);
            let fc = eval(&xc, &mut evals);
            if fc <= fr {
                pts[n] = xc;
                vals[n] = fc;
                continue;
            }
        } else {
            // inside contraction
            let xc = along(-CONTRACT);
            let fc = eval(&xc, &mut evals);
            if fc < vals[n] {
                pts[n] = xc;
                vals[n] = fc;
                continue;
            }
        }
        for i in 1..=n {
            let shrunk: Vec<f64> = pts[i].iter().zip(&pts[0]).map(|(p, b)| b + SHRINK * (p - b)).collect();
            vals[i] = eval(&shrunk, &mut evals);
            pts[i] = shrunk;
        }
    }

    let best = (0..=n).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap();
    SimplexResult { x: pts[best].clone(), f: vals[best], evals, converged }
}

/// Runs [`minimize`] repeatedly from the previous optimum until a restart no
/// longer improves the objective. Guards against premature collapse of the
/// simplex on anisotropic objectives.
pub fn minimize_restarting<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    start: &[f64],
    opts: &SimplexOptions,
    max_restarts: usize,
) -> SimplexResult {
    let mut best = minimize(&mut f, start, opts);
    let mut evals = best.evals;
    for _ in 0..max_restarts {
        if evals >= opts.max_evals {
            break;
        }
        let budget = SimplexOptions { max_evals: opts.max_evals - evals, ..opts.clone() };
        let next = minimize(&mut f, &best.x, &budget);
        evals += next.evals;
        let improved = next.f < best.f - opts.f_tol;
        if next.f <= best.f {
            best = SimplexResult { evals, ..next };
        }
        if !improved {
            break;
        }
    }
    best.evals = evals;
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let opts = SimplexOptions { initial_step: vec![0.5], x_tol: 1e-10, f_tol: 1e-20, max_evals: 20_000 };
        let r = minimize_restarting(f, &[-1.2, 1.0], &opts, 5);
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-7 && (r.x[1] - 1.0).abs() < 1e-7, "{:?}", r.x);
    }

    #[test]
    fn quadratic_bowl_converges_within_tolerances() {
        let f = |x: &[f64]| x.iter().enumerate().map(|(k, v)| (k as f64 + 1.0) * (v - 0.3).powi(2)).sum::<f64>();
        let r = minimize(f, &[2.0, -1.0, 0.0, 4.0], &SimplexOptions::default());
        assert!(r.converged);
        for v in &r.x {
            assert!((v - 0.3).abs() < 1e-7);
        }
    }

    #[test]
    fn reports_non_convergence_when_budget_runs_out() {
        let f = |x: &[f64]| x[0] * x[0] + x[1] * x[1];
        let opts = SimplexOptions { max_evals: 10, ..Default::default() };
        let r = minimize(f, &[5.0, 5.0], &opts);
        assert!(!r.converged);
        assert!(r.evals >= 10);
        assert!(r.f < 50.0);
    }

    #[test]
    fn nan_is_treated_as_uphill() {
        let f = |x: &[f64]| if x[0] < 0.0 { f64::NAN } else { (x[0] - 1.0).powi(2) };
        let r = minimize(f, &[0.05], &SimplexOptions::default());
        assert!((r.x[0] - 1.0).abs() < 1e-7);
    }
}
