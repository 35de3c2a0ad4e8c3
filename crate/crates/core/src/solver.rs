//! Accelerated projected gradient descent on a box.
//!
//! Used by the MPC prior and the offline optimum. Objectives here are smooth
//! convex piecewise quadratics, so a fixed `1/L` step with Nesterov momentum
//! and gradient-based restarts converges linearly.

use log::debug;

#[derive(Debug, Clone)]
pub struct BoxSolution {
    pub x: Vec<f64>,
    pub value: f64,
    /// Norm of the projected-gradient mapping at `x`.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct BoxSolverOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for BoxSolverOptions {
    fn default() -> Self {
        Self { tolerance: 1e-8, max_iterations: 10_000 }
    }
}

fn project(x: &mut [f64], lo: f64, hi: f64) {
    for v in x.iter_mut() {
        *v = v.clamp(lo, hi);
    }
}

/// Minimise `f` over `[lo, hi]^n`. `eval` writes the gradient and returns the
/// objective value.
pub fn minimize_box<F>(mut eval: F, start: &[f64], lo: f64, hi: f64, lipschitz: f64, opts: BoxSolverOptions) -> BoxSolution
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = start.len();
    let step = 1.0 / lipschitz;
    let mut x = start.to_vec();
    project(&mut x, lo, hi);
    let mut y = x.clone();
    let mut x_next = vec![0.0; n];
    let mut grad = vec![0.0; n];
    let mut t = 1.0f64;

    let mut best = x.clone();
    let mut best_value = f64::INFINITY;
    let mut best_residual = f64::INFINITY;
    let mut iterations = 0;

    while iterations < opts.max_iterations {
        iterations += 1;
        let value_y = eval(&y, &mut grad);
        for i in 0..n {
            x_next[i] = (y[i] - step * grad[i]).clamp(lo, hi);
        }
        // Projected-gradient mapping at y.
        let residual = lipschitz * x_next.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        if residual < best_residual || (residual == best_residual && value_y < best_value) {
            best_residual = residual;
            best_value = value_y;
            best.copy_from_slice(&y);
        }
        if residual < opts.tolerance {
            return BoxSolution { x: best, value: best_value, residual: best_residual, iterations, converged: true };
        }
        // Restart momentum when it points uphill.
        let uphill: f64 = grad.iter().zip(x_next.iter().zip(&x)).map(|(g, (a, b))| g * (a - b)).sum();
        let t_next = if uphill > 0.0 { 1.0 } else { 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt()) };
        let momentum = if uphill > 0.0 { 0.0 } else { (t - 1.0) / t_next };
        for i in 0..n {
            y[i] = (x_next[i] + momentum * (x_next[i] - x[i])).clamp(lo, hi);
        }
        x.copy_from_slice(&x_next);
        t = t_next;
    }
    debug!("box solver stopped after {iterations} iterations, residual {best_residual:.3e}");
    let value = eval(&best, &mut grad);
    BoxSolution { x: best, value, residual: best_residual, iterations, converged: false }
}
