//! AC branch-flow (DistFlow) and linearized (LinDistFlow) power flow on the feeder.
//!
//! Flows `p[j]`, `q[j]` live on link `j` (node `j` to `j + 1`), so `p[0]` is the
//! substation injection. Squared voltages are indexed by node, `0..=n`. Beyond
//! node `n` nothing is exported.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::circuit::{Bases, Circuit};
use crate::error::{Error, Result};

pub const DEFAULT_AC_TOL: f64 = 1e-10;
pub const DEFAULT_AC_MAX_ITER: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Model {
    Ac,
    Lin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Policy {
    Zero,
    Local,
    Optimal,
    Custom,
}

impl Policy {
    pub fn as_str(&self) -> &'static str {
        match self {
            Policy::Zero => "ZERO",
            Policy::Local => "LOCAL",
            Policy::Optimal => "OPTIMAL",
            Policy::Custom => "CUSTOM",
        }
    }
}

/// Inverter reactive setpoints, one per load node (index `j - 1` for node `j`).
/// Positive values inject reactive power into the feeder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dispatch {
    pub q_g: Vec<f64>,
    pub policy: Policy,
}

impl Dispatch {
    pub fn zeros(n: usize, policy: Policy) -> Self {
        Self {
            q_g: vec![0.0; n],
            policy,
        }
    }

    pub fn custom(q_g: Vec<f64>) -> Self {
        Self {
            q_g,
            policy: Policy::Custom,
        }
    }

    /// Largest amount by which any setpoint exceeds its node's headroom.
    pub fn bound_violation(&self, circuit: &Circuit) -> Result<f64> {
        let bounds = circuit.capacity_bounds()?;
        Ok(self
            .q_g
            .iter()
            .zip(&bounds)
            .map(|(q, b)| (q.abs() - b).max(0.0))
            .fold(0.0, f64::max))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowState {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub v_squared: Vec<f64>,
    pub model: Model,
}

impl FlowState {
    pub fn n(&self) -> usize {
        self.p.len()
    }

    /// Flows leaving node `j`, zero past the last node.
    fn flow_out(&self, j: usize) -> (f64, f64) {
        if j < self.p.len() {
            (self.p[j], self.q[j])
        } else {
            (0.0, 0.0)
        }
    }
}

fn check_dims(circuit: &Circuit, dispatch: &Dispatch) -> Result<()> {
    let n = circuit.n();
    if circuit.links.len() != n {
        return Err(Error::DimensionMismatch {
            what: "links",
            expected: n,
            actual: circuit.links.len(),
        });
    }
    if dispatch.q_g.len() != n {
        return Err(Error::DimensionMismatch {
            what: "dispatch",
            expected: n,
            actual: dispatch.q_g.len(),
        });
    }
    Ok(())
}

/// Net extraction `(p_j, q_j)` at every load node under a dispatch.
pub fn net_injections(circuit: &Circuit, dispatch: &Dispatch) -> (Vec<f64>, Vec<f64>) {
    circuit
        .nodes
        .iter()
        .zip(&dispatch.q_g)
        .map(|(l, qg)| (l.p_c - l.p_g, l.q_c - qg))
        .unzip()
}

fn suffix_sums(values: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    let mut acc = 0.0;
    for (o, v) in out.iter_mut().zip(values).rev() {
        acc += v;
        *o = acc;
    }
    out
}

/// Closed-form linearized flows: suffix sums of net loads and a linear voltage drop.
pub fn solve_lin(circuit: &Circuit, dispatch: &Dispatch) -> Result<FlowState> {
    check_dims(circuit, dispatch)?;
    let (p_net, q_net) = net_injections(circuit, dispatch);
    let p = suffix_sums(&p_net);
    let q = suffix_sums(&q_net);
    let mut v_squared = Vec::with_capacity(circuit.n() + 1);
    let mut v = circuit.v0_squared;
    v_squared.push(v);
    for ((link, pj), qj) in circuit.links.iter().zip(&p).zip(&q) {
        v -= 2.0 * (link.r * pj + link.x * qj);
        v_squared.push(v);
    }
    Ok(FlowState {
        p,
        q,
        v_squared,
        model: Model::Lin,
    })
}

/// Converged AC state together with the residual after each sweep.
#[derive(Debug, Clone)]
pub struct AcSolve {
    pub state: FlowState,
    pub residual_history: Vec<f64>,
}

impl AcSolve {
    pub fn iterations(&self) -> usize {
        self.residual_history.len()
    }
}

pub fn solve_ac(
    circuit: &Circuit,
    dispatch: &Dispatch,
    tol: f64,
    max_iter: usize,
) -> Result<FlowState> {
    solve_ac_traced(circuit, dispatch, tol, max_iter).map(|s| s.state)
}

/// Backward/forward sweep on the DistFlow equations.
///
/// The backward pass accumulates downstream load plus the link losses evaluated
/// at the previous iterate; the forward pass recomputes squared voltages from
/// the substation. Starts from a flat voltage profile with zero losses.
#[allow(clippy::needless_range_loop)]
pub fn solve_ac_traced(
    circuit: &Circuit,
    dispatch: &Dispatch,
    tol: f64,
    max_iter: usize,
) -> Result<AcSolve> {
    check_dims(circuit, dispatch)?;
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::InvalidParam {
            field: "tol",
            reason: "must be positive".into(),
        });
    }
    let n = circuit.n();
    let (p_net, q_net) = net_injections(circuit, dispatch);
    let mut state = FlowState {
        p: vec![0.0; n],
        q: vec![0.0; n],
        v_squared: vec![circuit.v0_squared; n + 1],
        model: Model::Ac,
    };
    // Loss term r_j-free part (P^2 + Q^2) / V^2 per link, from the previous iterate.
    let mut loss = vec![0.0; n];
    let mut history = Vec::new();
    let mut last = f64::INFINITY;

    for _ in 0..max_iter {
        let (mut acc_p, mut acc_q) = (0.0, 0.0);
        for j in (0..n).rev() {
            let link = &circuit.links[j];
            acc_p += p_net[j] + link.r * loss[j];
            acc_q += q_net[j] + link.x * loss[j];
            state.p[j] = acc_p;
            state.q[j] = acc_q;
        }

        for j in 0..n {
            let link = &circuit.links[j];
            let v = state.v_squared[j];
            let s2 = state.p[j] * state.p[j] + state.q[j] * state.q[j];
            let z2 = link.r * link.r + link.x * link.x;
            let next = v - 2.0 * (link.r * state.p[j] + link.x * state.q[j]) + z2 * s2 / v;
            if next.is_nan() || next <= 0.0 {
                return Err(Error::VoltageCollapse {
                    node: j + 1,
                    v_squared: next,
                });
            }
            state.v_squared[j + 1] = next;
            loss[j] = s2 / v;
        }

        last = residuals(circuit, dispatch, &state).max();
        history.push(last);
        log::trace!("ac sweep {}: residual {:e}", history.len(), last);
        if last <= tol {
            return Ok(AcSolve {
                state,
                residual_history: history,
            });
        }
    }
    Err(Error::NonConvergence {
        iterations: max_iter,
        residual: last,
    })
}

/// Largest absolute residual of each DistFlow equation over all links.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Residuals {
    pub real: f64,
    pub reactive: f64,
    pub voltage: f64,
}

impl Residuals {
    pub fn max(&self) -> f64 {
        self.real.max(self.reactive).max(self.voltage)
    }
}

/// Evaluates the AC branch-flow equations on `state`, using its own voltages.
pub fn residuals(circuit: &Circuit, dispatch: &Dispatch, state: &FlowState) -> Residuals {
    let (p_net, q_net) = net_injections(circuit, dispatch);
    let mut out = Residuals::default();
    for (j, link) in circuit.links.iter().enumerate() {
        let v = state.v_squared[j];
        let (pj, qj) = (state.p[j], state.q[j]);
        let s2_over_v = (pj * pj + qj * qj) / v;
        let (p_next, q_next) = state.flow_out(j + 1);
        let real = p_next - (pj - link.r * s2_over_v - p_net[j]);
        let reactive = q_next - (qj - link.x * s2_over_v - q_net[j]);
        let z2 = link.r * link.r + link.x * link.x;
        let voltage =
            state.v_squared[j + 1] - (v - 2.0 * (link.r * pj + link.x * qj) + z2 * s2_over_v);
        out.real = out.real.max(real.abs());
        out.reactive = out.reactive.max(reactive.abs());
        out.voltage = out.voltage.max(voltage.abs());
    }
    out
}

/// Resistive losses `sum_j r_j (P_j^2 + Q_j^2) / V_j^2`, per-unit.
pub fn losses(circuit: &Circuit, state: &FlowState) -> f64 {
    circuit
        .links
        .iter()
        .enumerate()
        .map(|(j, link)| {
            link.r * (state.p[j] * state.p[j] + state.q[j] * state.q[j]) / state.v_squared[j]
        })
        .sum()
}

/// Result of checking squared voltages against `[1 - eps, 1 + eps]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandCheck {
    pub ok: bool,
    pub min_node: usize,
    pub min_v_squared: f64,
    pub max_node: usize,
    pub max_v_squared: f64,
}

impl BandCheck {
    /// Node with the largest excursion outside the band, if any.
    pub fn offender(&self, epsilon: f64) -> Option<usize> {
        if self.ok {
            return None;
        }
        let low = (1.0 - epsilon) - self.min_v_squared;
        let high = self.max_v_squared - (1.0 + epsilon);
        Some(if low >= high {
            self.min_node
        } else {
            self.max_node
        })
    }
}

pub fn voltage_band_ok(state: &FlowState, epsilon: f64) -> BandCheck {
    let mut check = BandCheck {
        ok: true,
        min_node: 0,
        min_v_squared: f64::INFINITY,
        max_node: 0,
        max_v_squared: f64::NEG_INFINITY,
    };
    for (j, &v) in state.v_squared.iter().enumerate() {
        if v < check.min_v_squared {
            check.min_v_squared = v;
            check.min_node = j;
        }
        if v > check.max_v_squared {
            check.max_v_squared = v;
            check.max_node = j;
        }
    }
    check.ok = check.min_v_squared >= 1.0 - epsilon && check.max_v_squared <= 1.0 + epsilon;
    check
}

/// Writes `node,v_squared,v,P_out,Q_out`, one row per node `0..=n`.
///
/// Voltages are per-unit; outgoing flows are converted to kW and kVAr. The last
/// node exports nothing.
pub fn write_flow_csv<W: Write>(state: &FlowState, bases: &Bases, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["node", "v_squared", "v", "P_out", "Q_out"])?;
    for (j, &v2) in state.v_squared.iter().enumerate() {
        let (p, q) = state.flow_out(j);
        w.write_record([
            j.to_string(),
            v2.to_string(),
            v2.sqrt().to_string(),
            bases.pu_to_kilo(p).to_string(),
            bases.pu_to_kilo(q).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
