//! Exhaustive grid search over inverter setpoints for tiny instances.
//!
//! Evaluates flows, voltages and the frozen-denominator loss objective with its
//! own loops; it shares no code with the QP assembly or solvers.

use crate::circuit::Circuit;
use crate::error::{Error, Result};
use crate::powerflow::{Dispatch, Policy};

pub const MAX_ORACLE_PV: usize = 4;
pub const DEFAULT_GRID_STEPS: usize = 101;

/// Grid point with the lowest linearized losses among those inside the band.
///
/// Each PV node's interval `[-bound, bound]` is split into `grid_steps` evenly
/// spaced points (a single point at zero when the bound is zero).
pub fn brute_force_oracle(circuit: &Circuit, epsilon: f64, grid_steps: usize) -> Result<Dispatch> {
    let n = circuit.n();
    let pv: Vec<usize> = (0..n).filter(|&i| circuit.nodes[i].has_pv).collect();
    if pv.len() > MAX_ORACLE_PV {
        return Err(Error::OracleTooLarge {
            max: MAX_ORACLE_PV,
            actual: pv.len(),
        });
    }
    if grid_steps < 2 {
        return Err(Error::InvalidParam {
            field: "grid_steps",
            reason: "need at least two points".into(),
        });
    }

    let grids: Vec<Vec<f64>> = pv
        .iter()
        .map(|&i| {
            let load = &circuit.nodes[i];
            let radicand = load.s * load.s - load.p_g * load.p_g;
            if radicand < 0.0 {
                return Err(Error::CapacityBelowOutput {
                    s: load.s,
                    p_g: load.p_g,
                });
            }
            let bound = radicand.sqrt();
            if bound == 0.0 {
                return Ok(vec![0.0]);
            }
            Ok((0..grid_steps)
                .map(|k| -bound + 2.0 * bound * k as f64 / (grid_steps - 1) as f64)
                .collect())
        })
        .collect::<Result<_>>()?;

    // Real flows do not change with the reactive setpoints.
    let mut p_flow = vec![0.0; n];
    let mut acc = 0.0;
    for j in (0..n).rev() {
        acc += circuit.nodes[j].p_c - circuit.nodes[j].p_g;
        p_flow[j] = acc;
    }

    let v0 = circuit.v0_squared;
    let in_band = |v: f64| v >= 1.0 - epsilon && v <= 1.0 + epsilon;
    if !in_band(v0) {
        return Err(Error::OracleInfeasible);
    }

    let mut q_g = vec![0.0; n];
    let mut q_flow = vec![0.0; n];
    let mut counter = vec![0usize; pv.len()];
    let mut best: Option<(f64, Vec<f64>)> = None;

    'grid: loop {
        for (slot, &i) in pv.iter().enumerate() {
            q_g[i] = grids[slot][counter[slot]];
        }
        let mut acc = 0.0;
        for j in (0..n).rev() {
            acc += circuit.nodes[j].q_c - q_g[j];
            q_flow[j] = acc;
        }
        let mut v = v0;
        let mut feasible = true;
        let mut objective = 0.0;
        for j in 0..n {
            let link = &circuit.links[j];
            objective += link.r * (p_flow[j] * p_flow[j] + q_flow[j] * q_flow[j]);
            v -= 2.0 * (link.r * p_flow[j] + link.x * q_flow[j]);
            if !in_band(v) {
                feasible = false;
                break;
            }
        }
        if feasible {
            objective /= v0;
            if best.as_ref().is_none_or(|(b, _)| objective < *b) {
                best = Some((objective, q_g.clone()));
            }
        }

        for slot in 0..pv.len() {
            counter[slot] += 1;
            if counter[slot] < grids[slot].len() {
                continue 'grid;
            }
            counter[slot] = 0;
        }
        break;
    }

    best.map(|(_, q_g)| Dispatch {
        q_g,
        policy: Policy::Custom,
    })
    .ok_or(Error::OracleInfeasible)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::{Bases, LinkImpedance, NodeLoad};

    fn line(nodes: Vec<NodeLoad>) -> Circuit {
        let n = nodes.len();
        Circuit {
            nodes,
            links: vec![
                LinkImpedance {
                    r: 1e-3,
                    x: 1.2e-3,
                    length: 250.0,
                };
                n
            ],
            v0_squared: 1.0,
            bases: Bases::default(),
        }
    }

    #[test]
    fn zero_load_picks_zero() {
        let c = line(vec![
            NodeLoad::with_pv(0.0, 0.0, 0.01, 0.011),
            NodeLoad::consumer(0.0, 0.0),
        ]);
        let d = brute_force_oracle(&c, 0.05, 3).unwrap();
        assert_eq!(d.q_g, vec![0.0, 0.0]);
    }

    #[test]
    fn single_inverter_compensates_its_own_load() {
        // Bound 0.02 on a 201-point grid has spacing 2e-4; q_c = 0.006 sits on it.
        let c = line(vec![
            NodeLoad::consumer(0.02, 0.0),
            NodeLoad::with_pv(0.03, 0.006, 0.0, 0.02),
        ]);
        let d = brute_force_oracle(&c, 0.05, 201).unwrap();
        assert!((d.q_g[1] - 0.006).abs() < 1e-12, "{:?}", d.q_g);
    }

    #[test]
    fn rejects_too_many_inverters() {
        let c = line(vec![NodeLoad::with_pv(0.0, 0.0, 0.0, 0.01); 5]);
        assert!(matches!(
            brute_force_oracle(&c, 0.05, 3),
            Err(Error::OracleTooLarge { .. })
        ));
    }

    #[test]
    fn infeasible_band() {
        let c = line(vec![NodeLoad::with_pv(30.0, 0.0, 0.0, 0.01)]);
        assert!(matches!(
            brute_force_oracle(&c, 0.05, 11),
            Err(Error::OracleInfeasible)
        ));
    }
}
