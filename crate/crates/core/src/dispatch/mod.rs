//! Reactive setpoint policies: do-nothing, local compensation and the
//! loss-minimizing linearized QP.

pub mod kkt;
pub mod oracle;
pub mod problem;
pub mod qp;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::circuit::Circuit;
use crate::error::{Error, Result};
use crate::powerflow::{
    losses, solve_ac, solve_lin, Dispatch, Policy, DEFAULT_AC_MAX_ITER, DEFAULT_AC_TOL,
};

pub use kkt::{kkt_check, KktReport};
pub use oracle::{brute_force_oracle, DEFAULT_GRID_STEPS};
pub use problem::{ConstraintKind, QpProblem};
use qp::{AdmmSettings, QpSettings, QpStatus};

pub const DEFAULT_QP_TOL: f64 = 1e-8;

pub fn zero_dispatch(circuit: &Circuit) -> Dispatch {
    Dispatch::zeros(circuit.n(), Policy::Zero)
}

/// Each inverter cancels as much of its own node's reactive load as its
/// headroom allows; nothing is communicated between nodes.
pub fn local_dispatch(circuit: &Circuit) -> Result<Dispatch> {
    let q_g = circuit
        .nodes
        .iter()
        .map(|load| {
            let bound = load.capacity_bound()?;
            Ok(if load.has_pv {
                load.q_c.clamp(-bound, bound)
            } else {
                0.0
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dispatch {
        q_g,
        policy: Policy::Local,
    })
}

/// Linearized losses with denominators frozen at the substation voltage; the
/// quantity the QP minimizes.
pub fn lin_objective(circuit: &Circuit, dispatch: &Dispatch) -> Result<f64> {
    let state = solve_lin(circuit, dispatch)?;
    Ok(circuit
        .links
        .iter()
        .zip(state.p.iter().zip(&state.q))
        .map(|(l, (p, q))| l.r * (p * p + q * q))
        .sum::<f64>()
        / circuit.v0_squared)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

#[derive(Debug, Clone)]
pub struct DispatchSolution {
    pub dispatch: Dispatch,
    pub objective_value: f64,
    pub kkt_residual: f64,
    pub status: SolveStatus,
    /// Node whose voltage constraint could not be met, for infeasible runs.
    pub certificate_node: Option<usize>,
    pub active_box: usize,
    pub active_voltage: usize,
    pub iterations: usize,
}

#[derive(Serialize)]
struct SolutionExport<'a> {
    policy: Policy,
    q_g: &'a [f64],
    q_g_kvar: Vec<f64>,
    objective: f64,
    kkt_residual: f64,
    status: SolveStatus,
    certificate_node: Option<usize>,
    active_box: usize,
    active_voltage: usize,
}

impl DispatchSolution {
    /// JSON with the policy, setpoints (per-unit and kVAr), objective, KKT
    /// residual and status.
    pub fn to_json(&self, circuit: &Circuit) -> Result<String> {
        let export = SolutionExport {
            policy: self.dispatch.policy,
            q_g: &self.dispatch.q_g,
            q_g_kvar: self
                .dispatch
                .q_g
                .iter()
                .map(|&q| circuit.bases.pu_to_kilo(q))
                .collect(),
            objective: self.objective_value,
            kkt_residual: self.kkt_residual,
            status: self.status,
            certificate_node: self.certificate_node,
            active_box: self.active_box,
            active_voltage: self.active_voltage,
        };
        Ok(serde_json::to_string_pretty(&export)?)
    }
}

/// Which QP method [`optimal_dispatch_with`] runs.
#[derive(Debug, Clone, PartialEq)]
pub enum QpMethod {
    DualActiveSet,
    /// Operator splitting from the given full dispatch (zero when `None`).
    Admm {
        start: Option<Vec<f64>>,
    },
}

pub fn optimal_dispatch(circuit: &Circuit, epsilon: f64, qp_tol: f64) -> Result<DispatchSolution> {
    optimal_dispatch_with(circuit, epsilon, qp_tol, &QpMethod::DualActiveSet)
}

pub fn optimal_dispatch_with(
    circuit: &Circuit,
    epsilon: f64,
    qp_tol: f64,
    method: &QpMethod,
) -> Result<DispatchSolution> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::InvalidParam {
            field: "epsilon",
            reason: "must lie in (0, 1)".into(),
        });
    }
    let problem = QpProblem::build(circuit, epsilon)?;
    let v0 = circuit.v0_squared;
    if v0 < 1.0 - epsilon || v0 > 1.0 + epsilon {
        return Ok(infeasible(&problem, 0, 0));
    }

    let (q, status, iterations) = if problem.dim() == 0 {
        let zero = DVector::zeros(0);
        let offender = problem.base_v_squared[1..]
            .iter()
            .position(|&v| v < 1.0 - epsilon || v > 1.0 + epsilon);
        if let Some(i) = offender {
            return Ok(infeasible(&problem, i + 1, 0));
        }
        (zero, SolveStatus::Optimal, 0)
    } else {
        match method {
            QpMethod::DualActiveSet => {
                let rows: Vec<_> = problem
                    .constraints
                    .iter()
                    .map(|c| c.halfspace.clone())
                    .collect();
                let out = qp::solve_dual_active_set(
                    &problem.hessian,
                    &problem.linear,
                    &rows,
                    &QpSettings::default(),
                );
                match out.status {
                    QpStatus::Optimal => (out.x, SolveStatus::Optimal, out.iterations),
                    QpStatus::MaxIter | QpStatus::NotConvex => {
                        (out.x, SolveStatus::MaxIter, out.iterations)
                    }
                    QpStatus::Infeasible { constraint } => {
                        let node = problem.constraints[constraint].kind.node();
                        log::info!("voltage band infeasible, certificate node {node}");
                        return Ok(infeasible(&problem, node, out.iterations));
                    }
                }
            }
            QpMethod::Admm { start } => solve_scaled_admm(&problem, start.as_deref()),
        }
    };

    // Snap round-off outside the box back onto it.
    let mut q = q;
    for (a, &k) in problem.vars.iter().enumerate() {
        let b = problem.bounds[k - 1];
        q[a] = q[a].clamp(-b, b);
    }
    let dispatch = problem.expand(&q, Policy::Optimal);
    let report = kkt_check(&problem, &dispatch, qp_tol);
    let status = if status == SolveStatus::Optimal && report.max() > qp_tol {
        log::warn!(
            "QP stopped with KKT residual {:e} above {:e}",
            report.max(),
            qp_tol
        );
        SolveStatus::MaxIter
    } else {
        status
    };
    log::debug!(
        "optimal dispatch: {} box and {} voltage constraints active, kkt {:e}",
        report.active_box,
        report.active_voltage,
        report.max()
    );
    Ok(DispatchSolution {
        objective_value: problem.objective(&q),
        dispatch,
        kkt_residual: report.max(),
        status,
        certificate_node: None,
        active_box: report.active_box,
        active_voltage: report.active_voltage,
        iterations,
    })
}

fn infeasible(problem: &QpProblem, node: usize, iterations: usize) -> DispatchSolution {
    let q = DVector::zeros(problem.dim());
    DispatchSolution {
        dispatch: problem.expand(&q, Policy::Optimal),
        objective_value: problem.objective(&q),
        kkt_residual: f64::INFINITY,
        status: SolveStatus::Infeasible,
        certificate_node: Some(node),
        active_box: 0,
        active_voltage: 0,
        iterations,
    }
}

/// ADMM in variables scaled to `[-1, 1]`, with unit-norm constraint rows.
fn solve_scaled_admm(
    problem: &QpProblem,
    start: Option<&[f64]>,
) -> (DVector<f64>, SolveStatus, usize) {
    let m = problem.dim();
    let scale = DVector::from_fn(m, |a, _| problem.bounds[problem.vars[a] - 1]);
    let d = nalgebra::DMatrix::from_diagonal(&scale);
    let mut h = &d * &problem.hessian * &d;
    let mut c = &d * &problem.linear;
    let obj_scale = h.amax().max(f64::MIN_POSITIVE);
    h /= obj_scale;
    c /= obj_scale;

    let (a, mut lo, mut hi) = problem.two_sided();
    let mut a = a * &d;
    for i in 0..a.nrows() {
        let norm = a.row(i).norm();
        if norm > 0.0 {
            a.row_mut(i).scale_mut(1.0 / norm);
            lo[i] /= norm;
            hi[i] /= norm;
        }
    }
    let x0 = match start {
        Some(full) => DVector::from_fn(m, |a, _| full[problem.vars[a] - 1] / scale[a]),
        None => DVector::zeros(m),
    };
    let out = qp::solve_admm(&h, &c, &a, &lo, &hi, &x0, &AdmmSettings::default());
    let status = if out.converged || out.polished {
        SolveStatus::Optimal
    } else {
        SolveStatus::MaxIter
    };
    (out.x.component_mul(&scale), status, out.iterations)
}

/// Percent of zero-dispatch AC losses removed by `dispatch`.
pub fn savings(circuit: &Circuit, dispatch: &Dispatch) -> Result<f64> {
    savings_with(circuit, dispatch, DEFAULT_AC_TOL, DEFAULT_AC_MAX_ITER)
}

pub fn savings_with(
    circuit: &Circuit,
    dispatch: &Dispatch,
    ac_tol: f64,
    max_iter: usize,
) -> Result<f64> {
    let baseline = ac_losses(circuit, &zero_dispatch(circuit), ac_tol, max_iter)?;
    let controlled = ac_losses(circuit, dispatch, ac_tol, max_iter)?;
    percent_saved(baseline, controlled)
}

pub fn ac_losses(
    circuit: &Circuit,
    dispatch: &Dispatch,
    ac_tol: f64,
    max_iter: usize,
) -> Result<f64> {
    let state = solve_ac(circuit, dispatch, ac_tol, max_iter)?;
    Ok(losses(circuit, &state))
}

pub fn percent_saved(baseline: f64, controlled: f64) -> Result<f64> {
    if baseline.is_nan() || baseline <= 0.0 {
        return Err(Error::UndefinedSavings { losses: controlled });
    }
    Ok(100.0 * (baseline - controlled) / baseline)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::{generate_circuit, Bases, LinkImpedance, NodeLoad, ScenarioParams};

    fn kw(v: f64) -> f64 {
        Bases::default().kilo_to_pu(v)
    }

    #[test]
    fn local_clamp() {
        let c = Circuit {
            nodes: vec![
                NodeLoad::with_pv(kw(2.0), kw(0.2), kw(1.0), kw(1.1)),
                NodeLoad::with_pv(kw(3.0), kw(1.0), kw(1.0), kw(1.1)),
                NodeLoad::consumer(kw(3.0), kw(0.7)),
                NodeLoad::with_pv(kw(1.0), -kw(1.0), kw(1.0), kw(1.1)),
            ],
            links: vec![
                LinkImpedance {
                    r: 1e-4,
                    x: 1e-4,
                    length: 250.0
                };
                4
            ],
            v0_squared: 1.0,
            bases: Bases::default(),
        };
        let d = local_dispatch(&c).unwrap();
        let b = kw(0.21f64.sqrt());
        assert!((d.q_g[0] - kw(0.2)).abs() < 1e-15);
        assert!((d.q_g[1] - b).abs() < 1e-15);
        assert!((b - kw(0.458_257_569_495_584)).abs() < 1e-15);
        assert_eq!(d.q_g[2], 0.0);
        assert!((d.q_g[3] + b).abs() < 1e-15);
        assert_eq!(d.policy, Policy::Local);
    }

    #[test]
    fn local_cancels_everything_with_generous_headroom() {
        let c = generate_circuit(&ScenarioParams {
            penetration_r: 1.0,
            s_value: 2.0,
            ..Default::default()
        })
        .unwrap();
        let d = local_dispatch(&c).unwrap();
        let lin = solve_lin(&c, &d).unwrap();
        assert!(lin.q.iter().all(|q| q.abs() < 1e-15));
    }

    #[test]
    fn zero_headroom_gives_baseline() {
        let mut c = generate_circuit(&ScenarioParams {
            n: 20,
            penetration_r: 0.5,
            s_value: 1.0,
            ..Default::default()
        })
        .unwrap();
        for node in &mut c.nodes {
            node.q_c = 0.0;
        }
        let sol = optimal_dispatch(&c, 0.05, DEFAULT_QP_TOL).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!(sol.dispatch.q_g.iter().all(|&q| q == 0.0));
        let base = lin_objective(&c, &zero_dispatch(&c)).unwrap();
        assert!((sol.objective_value - base).abs() <= 1e-15 * base);
    }

    #[test]
    fn optimal_satisfies_kkt_and_bounds() {
        let c = generate_circuit(&ScenarioParams::default()).unwrap();
        let sol = optimal_dispatch(&c, 0.05, DEFAULT_QP_TOL).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!(sol.kkt_residual <= DEFAULT_QP_TOL);
        assert!(sol.dispatch.bound_violation(&c).unwrap() <= 1e-9);
        let direct = lin_objective(&c, &sol.dispatch).unwrap();
        assert!((direct - sol.objective_value).abs() <= 1e-12 * direct);
    }

    #[test]
    fn zero_dispatch_is_not_stationary() {
        let c = generate_circuit(&ScenarioParams {
            s_value: 1.5,
            ..Default::default()
        })
        .unwrap();
        let p = QpProblem::build(&c, 0.05).unwrap();
        let report = kkt_check(&p, &zero_dispatch(&c), DEFAULT_QP_TOL);
        assert!(report.stationarity > 1e-6, "{report:?}");
        assert_eq!(report.primal_feasibility.max(0.0), 0.0);
    }

    #[test]
    fn kkt_reports_box_violation() {
        let c = generate_circuit(&ScenarioParams::default()).unwrap();
        let p = QpProblem::build(&c, 0.05).unwrap();
        let k = c.pv_nodes()[0];
        let mut d = zero_dispatch(&c);
        d.q_g[k - 1] = p.bounds[k - 1] + 1e-3;
        let report = kkt_check(&p, &d, DEFAULT_QP_TOL);
        assert!((report.primal_feasibility - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn infeasible_band_reports_node() {
        let c = generate_circuit(&ScenarioParams {
            p_c_range: [30.0, 40.0],
            penetration_r: 0.2,
            ..Default::default()
        })
        .unwrap();
        let sol = optimal_dispatch(&c, 0.05, DEFAULT_QP_TOL).unwrap();
        assert_eq!(sol.status, SolveStatus::Infeasible);
        let node = sol.certificate_node.unwrap();
        assert!(node >= 1 && node <= c.n());
    }

    #[test]
    fn savings_of_zero_dispatch_is_zero() {
        let c = generate_circuit(&ScenarioParams::default()).unwrap();
        assert_eq!(savings(&c, &zero_dispatch(&c)).unwrap(), 0.0);
    }

    #[test]
    fn savings_undefined_without_losses() {
        let c = generate_circuit(&ScenarioParams {
            p_c_range: [0.0, 0.0],
            penetration_r: 0.0,
            ..Default::default()
        })
        .unwrap();
        assert!(matches!(
            savings(&c, &zero_dispatch(&c)),
            Err(Error::UndefinedSavings { .. })
        ));
    }

    #[test]
    fn admm_agrees_with_active_set() {
        let c = generate_circuit(&ScenarioParams {
            n: 30,
            penetration_r: 0.6,
            ..Default::default()
        })
        .unwrap();
        let gi = optimal_dispatch(&c, 0.05, DEFAULT_QP_TOL).unwrap();
        let admm = optimal_dispatch_with(&c, 0.05, DEFAULT_QP_TOL, &QpMethod::Admm { start: None })
            .unwrap();
        assert_eq!(admm.status, SolveStatus::Optimal);
        for (a, b) in gi.dispatch.q_g.iter().zip(&admm.dispatch.q_g) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn solution_json_fields() {
        let c = generate_circuit(&ScenarioParams {
            n: 10,
            ..Default::default()
        })
        .unwrap();
        let sol = optimal_dispatch(&c, 0.05, DEFAULT_QP_TOL).unwrap();
        let v: serde_json::Value = serde_json::from_str(&sol.to_json(&c).unwrap()).unwrap();
        assert_eq!(v["policy"], "OPTIMAL");
        assert_eq!(v["status"], "OPTIMAL");
        assert_eq!(v["q_g"].as_array().unwrap().len(), 10);
        assert!(v["objective"].as_f64().unwrap() > 0.0);
        assert!(v["kkt_residual"].as_f64().unwrap() <= DEFAULT_QP_TOL);
    }
}
