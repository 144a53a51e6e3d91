//! Dense solvers for strictly convex QPs `min 1/2 x'Hx + c'x` under linear
//! inequalities.
//!
//! [`solve_dual_active_set`] is the Goldfarb-Idnani dual method: it starts at
//! the unconstrained minimizer and adds violated constraints one at a time,
//! keeping the multipliers dual feasible. Infeasibility shows up as a violated
//! constraint that cannot be satisfied by any primal or dual step.
//!
//! [`solve_admm`] is an operator-splitting method with a polishing step. It is
//! slower and only used as an independent cross-check that accepts arbitrary
//! starting points.

use nalgebra::{DMatrix, DVector};

/// `normal . x >= rhs`
#[derive(Debug, Clone, PartialEq)]
pub struct Halfspace {
    pub normal: DVector<f64>,
    pub rhs: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSettings {
    /// Largest tolerated violation `rhs - normal . x` at termination.
    pub feas_tol: f64,
    pub max_iter: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            feas_tol: 1e-12,
            max_iter: 10_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    /// The constraint that could not be added.
    Infeasible {
        constraint: usize,
    },
    MaxIter,
    /// Hessian has no Cholesky factor.
    NotConvex,
}

#[derive(Debug, Clone)]
pub struct QpOutcome {
    pub x: DVector<f64>,
    pub status: QpStatus,
    /// Active constraint indices with their multipliers.
    pub active: Vec<(usize, f64)>,
    pub iterations: usize,
}

fn givens(a: f64, b: f64) -> (f64, f64, f64) {
    let h = a.hypot(b);
    if h == 0.0 {
        (1.0, 0.0, 0.0)
    } else {
        (a / h, b / h, h)
    }
}

fn rotate_columns(j: &mut DMatrix<f64>, i: usize, k: usize, c: f64, s: f64) {
    for row in 0..j.nrows() {
        let (a, b) = (j[(row, i)], j[(row, k)]);
        j[(row, i)] = c * a + s * b;
        j[(row, k)] = -s * a + c * b;
    }
}

/// Factorization state: `J' N = [R; 0]` for the active normals `N`, with
/// `J J' = H^{-1}`.
struct Factors {
    j: DMatrix<f64>,
    r: DMatrix<f64>,
    q: usize,
}

impl Factors {
    fn add(&mut self, mut d: DVector<f64>) {
        let n = d.len();
        let q = self.q;
        for i in (q + 1..n).rev() {
            if d[i] == 0.0 {
                continue;
            }
            let (c, s, h) = givens(d[i - 1], d[i]);
            d[i - 1] = h;
            d[i] = 0.0;
            rotate_columns(&mut self.j, i - 1, i, c, s);
        }
        for row in 0..=q {
            self.r[(row, q)] = d[row];
        }
        self.q += 1;
    }

    fn drop(&mut self, l: usize) {
        let q = self.q;
        for col in l..q - 1 {
            for row in 0..q {
                self.r[(row, col)] = self.r[(row, col + 1)];
            }
        }
        for row in 0..q {
            self.r[(row, q - 1)] = 0.0;
        }
        for i in l..q - 1 {
            let (c, s, h) = givens(self.r[(i, i)], self.r[(i + 1, i)]);
            self.r[(i, i)] = h;
            self.r[(i + 1, i)] = 0.0;
            for col in i + 1..q - 1 {
                let (a, b) = (self.r[(i, col)], self.r[(i + 1, col)]);
                self.r[(i, col)] = c * a + s * b;
                self.r[(i + 1, col)] = -s * a + c * b;
            }
            rotate_columns(&mut self.j, i, i + 1, c, s);
        }
        self.q -= 1;
    }

    /// Solves `R[..q, ..q] r = d[..q]`.
    #[allow(clippy::needless_range_loop)]
    fn back_substitute(&self, d: &DVector<f64>) -> Vec<f64> {
        let q = self.q;
        let mut r = vec![0.0; q];
        for i in (0..q).rev() {
            let mut acc = d[i];
            for k in i + 1..q {
                acc -= self.r[(i, k)] * r[k];
            }
            r[i] = acc / self.r[(i, i)];
        }
        r
    }
}

pub fn solve_dual_active_set(
    hessian: &DMatrix<f64>,
    linear: &DVector<f64>,
    constraints: &[Halfspace],
    settings: &QpSettings,
) -> QpOutcome {
    let n = linear.len();
    let Some(chol) = hessian.clone().cholesky() else {
        return QpOutcome {
            x: DVector::zeros(n),
            status: QpStatus::NotConvex,
            active: Vec::new(),
            iterations: 0,
        };
    };
    let mut x = chol.solve(&(-linear));
    let lower = chol.l();
    let j = lower
        .tr_solve_lower_triangular(&DMatrix::identity(n, n))
        .expect("Cholesky factor has a positive diagonal");
    let mut f = Factors {
        j,
        r: DMatrix::zeros(n, n),
        q: 0,
    };
    let mut active: Vec<usize> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let mut is_active = vec![false; constraints.len()];
    let mut iterations = 0;

    let finish = |x, status, active: &[usize], u: &[f64], iterations| QpOutcome {
        x,
        status,
        active: active.iter().copied().zip(u.iter().copied()).collect(),
        iterations,
    };

    loop {
        let mut worst: Option<(usize, f64)> = None;
        for (i, c) in constraints.iter().enumerate() {
            if is_active[i] {
                continue;
            }
            let slack = c.normal.dot(&x) - c.rhs;
            if slack < -settings.feas_tol && worst.is_none_or(|(_, s)| slack < s) {
                worst = Some((i, slack));
            }
        }
        let Some((p, mut slack)) = worst else {
            return finish(x, QpStatus::Optimal, &active, &u, iterations);
        };
        let normal = &constraints[p].normal;
        let mut u_new = 0.0;

        loop {
            iterations += 1;
            if iterations > settings.max_iter {
                return finish(x, QpStatus::MaxIter, &active, &u, iterations);
            }
            let d = f.j.transpose() * normal;
            let q = f.q;
            let z = f.j.columns(q, n - q) * d.rows(q, n - q);
            let r = f.back_substitute(&d);

            let mut partial: Option<(f64, usize)> = None;
            for (k, &rk) in r.iter().enumerate() {
                if rk > 0.0 {
                    let t = u[k] / rk;
                    if partial.is_none_or(|(best, _)| t < best) {
                        partial = Some((t, k));
                    }
                }
            }
            let tail = d.rows(q, n - q).norm();
            let full = if tail > 1e-12 * d.norm() {
                Some(-slack / z.dot(normal))
            } else {
                None
            };

            match (full, partial) {
                (None, None) => {
                    return finish(
                        x,
                        QpStatus::Infeasible { constraint: p },
                        &active,
                        &u,
                        iterations,
                    );
                }
                (None, Some((t, l))) => {
                    for (uk, rk) in u.iter_mut().zip(&r) {
                        *uk -= t * rk;
                    }
                    u_new += t;
                    is_active[active[l]] = false;
                    active.remove(l);
                    u.remove(l);
                    f.drop(l);
                }
                (Some(t2), partial) => {
                    let (t, drop) = match partial {
                        Some((t1, l)) if t1 < t2 => (t1, Some(l)),
                        _ => (t2, None),
                    };
                    x += t * &z;
                    for (uk, rk) in u.iter_mut().zip(&r) {
                        *uk -= t * rk;
                    }
                    u_new += t;
                    match drop {
                        None => {
                            f.add(d);
                            active.push(p);
                            u.push(u_new);
                            is_active[p] = true;
                            break;
                        }
                        Some(l) => {
                            is_active[active[l]] = false;
                            active.remove(l);
                            u.remove(l);
                            f.drop(l);
                            slack = normal.dot(&x) - constraints[p].rhs;
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdmmSettings {
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub eps: f64,
    pub max_iter: usize,
    pub polish: bool,
}

impl Default for AdmmSettings {
    fn default() -> Self {
        Self {
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            eps: 1e-9,
            max_iter: 20_000,
            polish: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdmmOutcome {
    pub x: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub polished: bool,
}

/// ADMM on `min 1/2 x'Hx + c'x  s.t.  lower <= A x <= upper`, started at `x0`.
///
/// Rows of `A` and `H` are expected to be reasonably scaled by the caller. When
/// `polish` is set, the active set guessed from the dual iterate is solved
/// exactly and kept if it is primal and dual feasible.
pub fn solve_admm(
    hessian: &DMatrix<f64>,
    linear: &DVector<f64>,
    a: &DMatrix<f64>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    x0: &DVector<f64>,
    settings: &AdmmSettings,
) -> AdmmOutcome {
    let n = linear.len();
    let m = a.nrows();
    let rho = settings.rho;
    let sigma = settings.sigma;
    let alpha = settings.alpha;
    let kkt = hessian + DMatrix::identity(n, n) * sigma + a.transpose() * a * rho;
    let chol = kkt
        .cholesky()
        .expect("ADMM system matrix is positive definite");

    let project = |v: &DVector<f64>| DVector::from_fn(m, |i, _| v[i].clamp(lower[i], upper[i]));
    let mut x = x0.clone();
    let mut z = project(&(a * &x));
    let mut y = DVector::zeros(m);
    let mut iterations = 0;
    let mut converged = false;

    while iterations < settings.max_iter {
        iterations += 1;
        let rhs = &x * sigma - linear + a.transpose() * (&z * rho - &y);
        let x_tilde = chol.solve(&rhs);
        let z_tilde = a * &x_tilde;
        let x_next = &x_tilde * alpha + &x * (1.0 - alpha);
        let z_relaxed = &z_tilde * alpha + &z * (1.0 - alpha);
        let z_next = project(&(&z_relaxed + &y / rho));
        y += (&z_relaxed - &z_next) * rho;
        x = x_next;
        z = z_next;

        if iterations % 10 == 0 {
            let ax = a * &x;
            let primal = (&ax - &z).amax();
            let dual = (hessian * &x + linear + a.transpose() * &y).amax();
            let scale = ax.amax().max(z.amax()).max(1.0);
            if primal <= settings.eps * scale && dual <= settings.eps {
                converged = true;
                break;
            }
        }
    }

    let mut polished = false;
    if settings.polish {
        if let Some(xp) = polish(hessian, linear, a, lower, upper, &x, &y) {
            x = xp;
            polished = true;
        }
    }
    AdmmOutcome {
        x,
        iterations,
        converged,
        polished,
    }
}

fn polish(
    hessian: &DMatrix<f64>,
    linear: &DVector<f64>,
    a: &DMatrix<f64>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    x: &DVector<f64>,
    y: &DVector<f64>,
) -> Option<DVector<f64>> {
    let n = linear.len();
    let ax = a * x;
    let mut rows = Vec::new();
    for i in 0..a.nrows() {
        let width = (upper[i] - lower[i]).abs().max(1e-12);
        let near_lower = ax[i] - lower[i] <= 1e-6 * width;
        let near_upper = upper[i] - ax[i] <= 1e-6 * width;
        if y[i] < 0.0 && near_lower {
            rows.push((i, lower[i]));
        } else if y[i] > 0.0 && near_upper {
            rows.push((i, upper[i]));
        }
    }
    let k = rows.len();
    let mut sys = DMatrix::zeros(n + k, n + k);
    let mut rhs = DVector::zeros(n + k);
    sys.view_mut((0, 0), (n, n)).copy_from(hessian);
    for a_i in 0..n {
        rhs[a_i] = -linear[a_i];
    }
    for (r, &(i, bound)) in rows.iter().enumerate() {
        for col in 0..n {
            sys[(n + r, col)] = a[(i, col)];
            sys[(col, n + r)] = a[(i, col)];
        }
        rhs[n + r] = bound;
    }
    let sol = sys.lu().solve(&rhs)?;
    let xp = sol.rows(0, n).into_owned();
    let axp = a * &xp;
    for i in 0..a.nrows() {
        let tol = 1e-9 * (1.0 + lower[i].abs().max(upper[i].abs()));
        if axp[i] < lower[i] - tol || axp[i] > upper[i] + tol {
            return None;
        }
    }
    // Multipliers in the `H x + c + A' y = 0` convention: lower rows need y <= 0.
    for (r, &(i, bound)) in rows.iter().enumerate() {
        let yi = sol[n + r];
        let sign_ok = if bound == lower[i] && bound != upper[i] {
            yi <= 1e-12
        } else if bound == upper[i] && bound != lower[i] {
            yi >= -1e-12
        } else {
            true
        };
        if !sign_ok {
            return None;
        }
    }
    Some(xp)
}
