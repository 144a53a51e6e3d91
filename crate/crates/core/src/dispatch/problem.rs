//! Reduced LinDistFlow loss-minimization QP in the inverter coordinates.
//!
//! Real flows do not depend on reactive dispatch, so only the reactive part of
//! the objective varies. With loss denominators frozen at the substation
//! voltage, losses are `1/2 q'Hq + c'q + const` where
//! `H[a][b] = 2 R(min(k_a, k_b)) / V0^2` and `R(k)` is the resistance between
//! the substation and node `k`. Squared voltages are affine in `q` with slope
//! `2 X(min(i, k))`.

use nalgebra::{DMatrix, DVector};

use crate::circuit::Circuit;
use crate::error::Result;
use crate::powerflow::{net_injections, Dispatch, Policy};

use super::qp::Halfspace;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintKind {
    /// `q_g >= -bound` at a node.
    BoxLower(usize),
    /// `q_g <= bound` at a node.
    BoxUpper(usize),
    /// `v^2 >= 1 - eps` at a node.
    VoltageFloor(usize),
    /// `v^2 <= 1 + eps` at a node.
    VoltageCeiling(usize),
}

impl ConstraintKind {
    pub fn node(&self) -> usize {
        match *self {
            ConstraintKind::BoxLower(j)
            | ConstraintKind::BoxUpper(j)
            | ConstraintKind::VoltageFloor(j)
            | ConstraintKind::VoltageCeiling(j) => j,
        }
    }

    pub fn is_voltage(&self) -> bool {
        matches!(
            self,
            ConstraintKind::VoltageFloor(_) | ConstraintKind::VoltageCeiling(_)
        )
    }
}

#[derive(Debug, Clone)]
pub struct Constraint {
    pub kind: ConstraintKind,
    pub halfspace: Halfspace,
}

#[derive(Debug, Clone)]
pub struct QpProblem {
    /// 1-based node of each decision variable: PV nodes with nonzero headroom.
    pub vars: Vec<usize>,
    /// Headroom at every node (zero without PV).
    pub bounds: Vec<f64>,
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub constant: f64,
    /// Every row reads `normal . q >= rhs`.
    pub constraints: Vec<Constraint>,
    pub epsilon: f64,
    pub v0_squared: f64,
    /// Linearized squared voltages at zero dispatch, nodes `0..=n`.
    pub base_v_squared: Vec<f64>,
    r: Vec<f64>,
    x: Vec<f64>,
    p_flow: Vec<f64>,
    q_load: Vec<f64>,
}

impl QpProblem {
    pub fn build(circuit: &Circuit, epsilon: f64) -> Result<QpProblem> {
        let n = circuit.n();
        let bounds = circuit.capacity_bounds()?;
        let vars: Vec<usize> = (1..=n)
            .filter(|&k| circuit.node(k).has_pv && bounds[k - 1] > 0.0)
            .collect();
        let m = vars.len();
        let v0 = circuit.v0_squared;
        let r: Vec<f64> = circuit.links.iter().map(|l| l.r).collect();
        let x: Vec<f64> = circuit.links.iter().map(|l| l.x).collect();

        let zero = Dispatch::zeros(n, Policy::Zero);
        let (p_net, q_net) = net_injections(circuit, &zero);
        let p_flow = suffix(&p_net);
        let q_flow = suffix(&q_net);

        // Prefix sums over links 0..k, indexed by node k.
        let mut r_cum = vec![0.0; n + 1];
        let mut x_cum = vec![0.0; n + 1];
        let mut rq_cum = vec![0.0; n + 1];
        let mut base_v_squared = vec![v0; n + 1];
        for j in 0..n {
            r_cum[j + 1] = r_cum[j] + r[j];
            x_cum[j + 1] = x_cum[j] + x[j];
            rq_cum[j + 1] = rq_cum[j] + r[j] * q_flow[j];
            base_v_squared[j + 1] = base_v_squared[j] - 2.0 * (r[j] * p_flow[j] + x[j] * q_flow[j]);
        }

        let hessian = DMatrix::from_fn(m, m, |a, b| 2.0 * r_cum[vars[a].min(vars[b])] / v0);
        let linear = DVector::from_fn(m, |a, _| -2.0 * rq_cum[vars[a]] / v0);
        let constant = (0..n)
            .map(|j| r[j] * (p_flow[j] * p_flow[j] + q_flow[j] * q_flow[j]))
            .sum::<f64>()
            / v0;

        let mut constraints = Vec::with_capacity(2 * m + 2 * n);
        for (a, &k) in vars.iter().enumerate() {
            let b = bounds[k - 1];
            let unit = DVector::from_fn(m, |i, _| if i == a { 1.0 } else { 0.0 });
            constraints.push(Constraint {
                kind: ConstraintKind::BoxLower(k),
                halfspace: Halfspace {
                    normal: unit.clone(),
                    rhs: -b,
                },
            });
            constraints.push(Constraint {
                kind: ConstraintKind::BoxUpper(k),
                halfspace: Halfspace {
                    normal: -unit,
                    rhs: -b,
                },
            });
        }
        if m > 0 {
            for i in 1..=n {
                let slope = DVector::from_fn(m, |a, _| 2.0 * x_cum[vars[a].min(i)]);
                constraints.push(Constraint {
                    kind: ConstraintKind::VoltageFloor(i),
                    halfspace: Halfspace {
                        normal: slope.clone(),
                        rhs: (1.0 - epsilon) - base_v_squared[i],
                    },
                });
                constraints.push(Constraint {
                    kind: ConstraintKind::VoltageCeiling(i),
                    halfspace: Halfspace {
                        normal: -slope,
                        rhs: base_v_squared[i] - (1.0 + epsilon),
                    },
                });
            }
        }

        Ok(QpProblem {
            vars,
            bounds,
            hessian,
            linear,
            constant,
            constraints,
            epsilon,
            v0_squared: v0,
            base_v_squared,
            r,
            x,
            p_flow,
            q_load: q_net,
        })
    }

    pub fn n(&self) -> usize {
        self.bounds.len()
    }

    pub fn dim(&self) -> usize {
        self.vars.len()
    }

    /// Decision-variable view of a full dispatch.
    pub fn restrict(&self, dispatch: &Dispatch) -> DVector<f64> {
        DVector::from_fn(self.dim(), |a, _| dispatch.q_g[self.vars[a] - 1])
    }

    /// Full dispatch with zeros off the decision variables.
    pub fn expand(&self, q: &DVector<f64>, policy: Policy) -> Dispatch {
        let mut q_g = vec![0.0; self.n()];
        for (a, &k) in self.vars.iter().enumerate() {
            q_g[k - 1] = q[a];
        }
        Dispatch { q_g, policy }
    }

    pub fn objective(&self, q: &DVector<f64>) -> f64 {
        0.5 * q.dot(&(&self.hessian * q)) + self.linear.dot(q) + self.constant
    }

    pub fn gradient(&self, q: &DVector<f64>) -> DVector<f64> {
        &self.hessian * q + &self.linear
    }

    /// Linearized reactive flows and squared voltages for an arbitrary full dispatch.
    pub fn evaluate(&self, dispatch: &Dispatch) -> (Vec<f64>, Vec<f64>) {
        let n = self.n();
        let mut q_flow = vec![0.0; n];
        let mut acc = 0.0;
        for j in (0..n).rev() {
            acc += self.q_load[j] - dispatch.q_g[j];
            q_flow[j] = acc;
        }
        let mut v = vec![self.v0_squared; n + 1];
        for j in 0..n {
            v[j + 1] = v[j] - 2.0 * (self.r[j] * self.p_flow[j] + self.x[j] * q_flow[j]);
        }
        (q_flow, v)
    }

    /// Objective of an arbitrary full dispatch (nonzero entries off the decision
    /// variables included).
    pub fn full_objective(&self, dispatch: &Dispatch) -> f64 {
        let (q_flow, _) = self.evaluate(dispatch);
        (0..self.n())
            .map(|j| self.r[j] * (self.p_flow[j] * self.p_flow[j] + q_flow[j] * q_flow[j]))
            .sum::<f64>()
            / self.v0_squared
    }

    /// Two-sided form `lower <= A q <= upper`: box rows first, then one voltage
    /// row per load node.
    pub fn two_sided(&self) -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
        let m = self.dim();
        let rows: Vec<&Constraint> = self
            .constraints
            .iter()
            .filter(|c| {
                matches!(
                    c.kind,
                    ConstraintKind::BoxLower(_) | ConstraintKind::VoltageFloor(_)
                )
            })
            .collect();
        let mut a = DMatrix::zeros(rows.len(), m);
        let mut lower = DVector::zeros(rows.len());
        let mut upper = DVector::zeros(rows.len());
        for (i, c) in rows.iter().enumerate() {
            a.row_mut(i).copy_from(&c.halfspace.normal.transpose());
            lower[i] = c.halfspace.rhs;
            upper[i] = match c.kind {
                ConstraintKind::BoxLower(k) => self.bounds[k - 1],
                ConstraintKind::VoltageFloor(j) => (1.0 + self.epsilon) - self.base_v_squared[j],
                _ => unreachable!(),
            };
        }
        (a, lower, upper)
    }
}

fn suffix(values: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    let mut acc = 0.0;
    for (o, v) in out.iter_mut().zip(values).rev() {
        acc += v;
        *o = acc;
    }
    out
}
