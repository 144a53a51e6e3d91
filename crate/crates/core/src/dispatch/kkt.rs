//! First-order optimality check for candidate dispatches.
//!
//! Multipliers are recomputed from scratch by nonnegative least squares on the
//! constraints that are active at the candidate, so the check does not trust
//! anything a solver reports.

use nalgebra::{DMatrix, DVector};

use crate::powerflow::Dispatch;

use super::problem::QpProblem;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KktReport {
    /// Infinity norm of `grad - sum(lambda_i n_i)` at the best nonnegative multipliers.
    pub stationarity: f64,
    /// Largest bound or band violation.
    pub primal_feasibility: f64,
    /// Largest `lambda_i * |slack_i|` over the constraints deemed active.
    pub complementarity: f64,
    pub active_box: usize,
    pub active_voltage: usize,
}

impl KktReport {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal_feasibility)
            .max(self.complementarity)
    }
}

/// Constraints with slack at most `tol` count as active.
pub fn kkt_check(problem: &QpProblem, candidate: &Dispatch, tol: f64) -> KktReport {
    let mut report = KktReport::default();

    for (&q, &b) in candidate.q_g.iter().zip(&problem.bounds) {
        report.primal_feasibility = report.primal_feasibility.max(q.abs() - b);
    }
    let (_, v) = problem.evaluate(candidate);
    for &vi in &v[1..] {
        let low = (1.0 - problem.epsilon) - vi;
        let high = vi - (1.0 + problem.epsilon);
        report.primal_feasibility = report.primal_feasibility.max(low).max(high);
    }

    let m = problem.dim();
    if m == 0 {
        return report;
    }
    let q = problem.restrict(candidate);
    let grad = problem.gradient(&q);

    let mut normals: Vec<DVector<f64>> = Vec::new();
    let mut slacks: Vec<f64> = Vec::new();
    for c in &problem.constraints {
        let slack = c.halfspace.normal.dot(&q) - c.halfspace.rhs;
        if slack <= tol {
            if c.kind.is_voltage() {
                report.active_voltage += 1;
            } else {
                report.active_box += 1;
            }
            normals.push(c.halfspace.normal.clone());
            slacks.push(slack);
        }
    }

    if normals.is_empty() {
        report.stationarity = grad.amax();
        return report;
    }
    let n_mat = DMatrix::from_columns(&normals);
    let lambda = nnls(&n_mat, &grad);
    report.stationarity = (&grad - &n_mat * &lambda).amax();
    report.complementarity = lambda
        .iter()
        .zip(&slacks)
        .map(|(l, s)| l * s.abs())
        .fold(0.0, f64::max);
    report
}

/// Lawson-Hanson nonnegative least squares: `min |A x - b|` over `x >= 0`.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let k = a.ncols();
    let mut x = DVector::zeros(k);
    let mut passive = vec![false; k];
    let scale = a.amax().max(f64::MIN_POSITIVE) * b.amax().max(f64::MIN_POSITIVE);
    let tol = 1e-14 * scale * (k as f64).max(1.0);

    for _ in 0..3 * k + 10 {
        let w = a.transpose() * (b - a * &x);
        let pick = (0..k)
            .filter(|&i| !passive[i] && w[i] > tol)
            .max_by(|&i, &j| w[i].total_cmp(&w[j]));
        let Some(t) = pick else { break };
        passive[t] = true;

        loop {
            let idx: Vec<usize> = (0..k).filter(|&i| passive[i]).collect();
            let sub = DMatrix::from_fn(a.nrows(), idx.len(), |r, c| a[(r, idx[c])]);
            let sol = match sub.svd(true, true).solve(b, 1e-13) {
                Ok(s) => s,
                Err(_) => return x,
            };
            if sol.iter().all(|&v| v > 0.0) {
                for (c, &i) in idx.iter().enumerate() {
                    x[i] = sol[c];
                }
                break;
            }
            let mut alpha = f64::INFINITY;
            for (c, &i) in idx.iter().enumerate() {
                if sol[c] <= 0.0 {
                    let denom = x[i] - sol[c];
                    if denom > 0.0 {
                        alpha = alpha.min(x[i] / denom);
                    } else {
                        alpha = 0.0;
                    }
                }
            }
            for (c, &i) in idx.iter().enumerate() {
                x[i] += alpha * (sol[c] - x[i]);
                if x[i] <= 1e-300 {
                    x[i] = 0.0;
                    passive[i] = false;
                }
            }
            if idx.iter().all(|&i| !passive[i]) {
                break;
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nnls_interior_and_clamped() {
        let a = DMatrix::identity(2, 2);
        let b = DVector::from_row_slice(&[1.0, -2.0]);
        let x = nnls(&a, &b);
        assert!((x[0] - 1.0).abs() < 1e-14);
        assert_eq!(x[1], 0.0);

        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 1.0, 0.0, 1.0]);
        let b = DVector::from_row_slice(&[2.0, 3.0, 1.0]);
        let x = nnls(&a, &b);
        assert!((x[0] - 2.0).abs() < 1e-12 && (x[1] - 1.0).abs() < 1e-12);
    }
}
