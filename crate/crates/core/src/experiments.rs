//! Seeded Monte Carlo sweeps over inverter rating `s` and PV penetration `r`.
//!
//! Realization `k` uses seed `base_params.seed + k`. One feeder is drawn per
//! `(r, k)` and reused for every `s` and every policy, since the inverter
//! rating does not enter the random draws. Rows are sorted by
//! `(s, r, policy, seed)` before aggregation, so output does not depend on
//! evaluation order.

use std::io::Write;
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::circuit::{generate_circuit, Circuit, ScenarioParams};
use crate::dispatch::{
    ac_losses, lin_objective, local_dispatch, optimal_dispatch, percent_saved, zero_dispatch,
    DispatchSolution, SolveStatus, DEFAULT_QP_TOL,
};
use crate::error::{Error, Result};
use crate::powerflow::{
    solve_ac, Dispatch, FlowState, Policy, DEFAULT_AC_MAX_ITER, DEFAULT_AC_TOL,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub base_params: ScenarioParams,
    /// Inverter ratings in kVA.
    pub s_values: Vec<f64>,
    pub r_values: Vec<f64>,
    pub n_realizations: usize,
    pub policies: Vec<Policy>,
    pub ac_tol: f64,
    pub ac_max_iter: usize,
    pub qp_tol: f64,
    pub parallel: bool,
}

impl SweepSpec {
    pub fn new(base_params: ScenarioParams, s_values: Vec<f64>, r_values: Vec<f64>) -> Self {
        Self {
            base_params,
            s_values,
            r_values,
            n_realizations: 20,
            policies: vec![Policy::Zero, Policy::Local, Policy::Optimal],
            ac_tol: DEFAULT_AC_TOL,
            ac_max_iter: DEFAULT_AC_MAX_ITER,
            qp_tol: DEFAULT_QP_TOL,
            parallel: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &'static str, reason: &str| {
            Err(Error::InvalidParam {
                field,
                reason: reason.to_string(),
            })
        };
        if self.s_values.is_empty() {
            return bad("s_values", "must not be empty");
        }
        if self.r_values.is_empty() {
            return bad("r_values", "must not be empty");
        }
        if self.policies.is_empty() {
            return bad("policies", "must not be empty");
        }
        if self.policies.contains(&Policy::Custom) {
            return bad("policies", "sweeps run ZERO, LOCAL or OPTIMAL");
        }
        if self.n_realizations == 0 {
            return bad("n_realizations", "must be at least 1");
        }
        if self.s_values.iter().any(|&s| !(s.is_finite() && s >= 0.0)) {
            return bad("s_values", "must be finite and nonnegative");
        }
        for &r in &self.r_values {
            ScenarioParams {
                penetration_r: r,
                ..self.base_params.clone()
            }
            .validate()?;
        }
        Ok(())
    }
}

/// One evaluated (s, r, policy, seed) instance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub s: f64,
    pub r: f64,
    pub policy: Policy,
    pub seed: u64,
    /// AC losses removed relative to zero dispatch, percent.
    pub savings_pct: f64,
    /// Same, on the linearized frozen-denominator objective.
    pub savings_lin_pct: f64,
    pub losses_kw: f64,
    pub baseline_losses_kw: f64,
    pub lin_objective: f64,
    pub active_voltage: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepFailure {
    pub s: f64,
    pub r: f64,
    pub policy: Policy,
    pub seed: u64,
    pub infeasible: bool,
    pub reason: String,
}

/// Statistics for one (s, r, policy) cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSummary {
    pub s: f64,
    pub r: f64,
    pub policy: Policy,
    pub count: usize,
    pub mean_savings_pct: f64,
    pub min_savings_pct: f64,
    pub max_savings_pct: f64,
    pub mean_savings_lin_pct: f64,
    pub mean_losses_kw: f64,
    pub infeasible: usize,
    pub failed: usize,
    /// Mean LOCAL savings over mean OPTIMAL savings in the same (s, r); LOCAL rows only.
    pub local_to_optimal: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub failures: Vec<SweepFailure>,
}

impl SweepResult {
    pub fn cell(&self, s: f64, r: f64, policy: Policy) -> Option<CellSummary> {
        summarize(self)
            .into_iter()
            .find(|c| c.s == s && c.r == r && c.policy == policy)
    }
}

fn key_cmp(a: (f64, f64, Policy, u64), b: (f64, f64, Policy, u64)) -> std::cmp::Ordering {
    a.0.total_cmp(&b.0)
        .then(a.1.total_cmp(&b.1))
        .then(a.2.cmp(&b.2))
        .then(a.3.cmp(&b.3))
}

struct Unit {
    r: f64,
    seed: u64,
}

fn policy_dispatch(
    circuit: &Circuit,
    policy: Policy,
    spec: &SweepSpec,
) -> Result<(Dispatch, Option<DispatchSolution>)> {
    match policy {
        Policy::Zero => Ok((zero_dispatch(circuit), None)),
        Policy::Local => Ok((local_dispatch(circuit)?, None)),
        Policy::Optimal => {
            let sol = optimal_dispatch(circuit, spec.base_params.epsilon, spec.qp_tol)?;
            match sol.status {
                SolveStatus::Optimal => Ok((sol.dispatch.clone(), Some(sol))),
                SolveStatus::Infeasible => Err(Error::Infeasible {
                    node: sol.certificate_node.unwrap_or(0),
                }),
                SolveStatus::MaxIter => Err(Error::NonConvergence {
                    iterations: sol.iterations,
                    residual: sol.kkt_residual,
                }),
            }
        }
        Policy::Custom => unreachable!("rejected by SweepSpec::validate"),
    }
}

fn run_unit(spec: &SweepSpec, unit: &Unit) -> (Vec<SweepRow>, Vec<SweepFailure>) {
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let params = ScenarioParams {
        penetration_r: unit.r,
        seed: unit.seed,
        ..spec.base_params.clone()
    };
    let fail_all = |failures: &mut Vec<SweepFailure>, s: f64, err: &Error| {
        for &policy in &spec.policies {
            failures.push(SweepFailure {
                s,
                r: unit.r,
                policy,
                seed: unit.seed,
                infeasible: matches!(err, Error::Infeasible { .. }),
                reason: err.to_string(),
            });
        }
    };

    let base = match generate_circuit(&params) {
        Ok(c) => c,
        Err(e) => {
            for &s in &spec.s_values {
                fail_all(&mut failures, s, &e);
            }
            return (rows, failures);
        }
    };
    let zero = zero_dispatch(&base);
    let baseline = ac_losses(&base, &zero, spec.ac_tol, spec.ac_max_iter)
        .and_then(|l| lin_objective(&base, &zero).map(|o| (l, o)));
    let (baseline_loss, baseline_obj) = match baseline {
        Ok(v) => v,
        Err(e) => {
            log::warn!("seed {} r {}: baseline failed: {e}", unit.seed, unit.r);
            for &s in &spec.s_values {
                fail_all(&mut failures, s, &e);
            }
            return (rows, failures);
        }
    };

    for &s in &spec.s_values {
        if s < params.p_g_value {
            let e = Error::InvalidParam {
                field: "s_values",
                reason: format!("{s} kVA is below p_g_value {}", params.p_g_value),
            };
            fail_all(&mut failures, s, &e);
            continue;
        }
        let circuit = base.with_capacity(base.bases.kilo_to_pu(s));
        for &policy in &spec.policies {
            let evaluated = policy_dispatch(&circuit, policy, spec).and_then(|(d, sol)| {
                let loss = ac_losses(&circuit, &d, spec.ac_tol, spec.ac_max_iter)?;
                let obj = lin_objective(&circuit, &d)?;
                Ok((loss, obj, sol.map_or(0, |s| s.active_voltage)))
            });
            match evaluated {
                Ok((loss, obj, active_voltage)) => {
                    let saved = percent_saved(baseline_loss, loss);
                    let saved_lin = percent_saved(baseline_obj, obj);
                    match (saved, saved_lin) {
                        (Ok(savings_pct), Ok(savings_lin_pct)) => rows.push(SweepRow {
                            s,
                            r: unit.r,
                            policy,
                            seed: unit.seed,
                            savings_pct,
                            savings_lin_pct,
                            losses_kw: base.bases.pu_to_kilo(loss),
                            baseline_losses_kw: base.bases.pu_to_kilo(baseline_loss),
                            lin_objective: obj,
                            active_voltage,
                        }),
                        (Err(e), _) | (_, Err(e)) => failures.push(SweepFailure {
                            s,
                            r: unit.r,
                            policy,
                            seed: unit.seed,
                            infeasible: false,
                            reason: e.to_string(),
                        }),
                    }
                    if active_voltage > 0 {
                        log::info!(
                            "s {s} r {} seed {}: {active_voltage} voltage constraints active",
                            unit.r,
                            unit.seed
                        );
                    }
                }
                Err(e) => {
                    log::warn!(
                        "s {s} r {} seed {} {}: {e}",
                        unit.r,
                        unit.seed,
                        policy.as_str()
                    );
                    failures.push(SweepFailure {
                        s,
                        r: unit.r,
                        policy,
                        seed: unit.seed,
                        infeasible: matches!(e, Error::Infeasible { .. }),
                        reason: e.to_string(),
                    });
                }
            }
        }
    }
    (rows, failures)
}

/// Evaluates every (s, r, policy, realization) combination. Individual
/// failures are recorded and never abort the sweep.
pub fn run_sweep(spec: &SweepSpec) -> Result<SweepResult> {
    spec.validate()?;
    let units: Vec<Unit> = spec
        .r_values
        .iter()
        .flat_map(|&r| {
            (0..spec.n_realizations as u64).map(move |k| Unit {
                r,
                seed: spec.base_params.seed.wrapping_add(k),
            })
        })
        .collect();

    let parts: Vec<(Vec<SweepRow>, Vec<SweepFailure>)> = if spec.parallel {
        units.par_iter().map(|u| run_unit(spec, u)).collect()
    } else {
        units.iter().map(|u| run_unit(spec, u)).collect()
    };

    let mut result = SweepResult::default();
    for (rows, failures) in parts {
        result.rows.extend(rows);
        result.failures.extend(failures);
    }
    result
        .rows
        .sort_by(|a, b| key_cmp((a.s, a.r, a.policy, a.seed), (b.s, b.r, b.policy, b.seed)));
    result
        .failures
        .sort_by(|a, b| key_cmp((a.s, a.r, a.policy, a.seed), (b.s, b.r, b.policy, b.seed)));
    Ok(result)
}

/// Per-cell statistics in `(s, r, policy)` order.
pub fn summarize(result: &SweepResult) -> Vec<CellSummary> {
    let mut keys: Vec<(f64, f64, Policy)> = result
        .rows
        .iter()
        .map(|r| (r.s, r.r, r.policy))
        .chain(result.failures.iter().map(|f| (f.s, f.r, f.policy)))
        .collect();
    keys.sort_by(|a, b| key_cmp((a.0, a.1, a.2, 0), (b.0, b.1, b.2, 0)));
    keys.dedup();

    let mut cells: Vec<CellSummary> = keys
        .into_iter()
        .map(|(s, r, policy)| {
            let rows: Vec<&SweepRow> = result
                .rows
                .iter()
                .filter(|x| x.s == s && x.r == r && x.policy == policy)
                .collect();
            let fails = result
                .failures
                .iter()
                .filter(|x| x.s == s && x.r == r && x.policy == policy);
            let (infeasible, failed) =
                fails.fold(
                    (0, 0),
                    |(i, f), x| {
                        if x.infeasible {
                            (i + 1, f)
                        } else {
                            (i, f + 1)
                        }
                    },
                );
            let count = rows.len();
            let mean = |f: fn(&SweepRow) -> f64| {
                if count == 0 {
                    f64::NAN
                } else {
                    rows.iter().map(|x| f(x)).sum::<f64>() / count as f64
                }
            };
            CellSummary {
                s,
                r,
                policy,
                count,
                mean_savings_pct: mean(|x| x.savings_pct),
                min_savings_pct: rows.iter().map(|x| x.savings_pct).fold(f64::NAN, f64::min),
                max_savings_pct: rows.iter().map(|x| x.savings_pct).fold(f64::NAN, f64::max),
                mean_savings_lin_pct: mean(|x| x.savings_lin_pct),
                mean_losses_kw: mean(|x| x.losses_kw),
                infeasible,
                failed,
                local_to_optimal: None,
            }
        })
        .collect();

    let optimal: Vec<(f64, f64, f64)> = cells
        .iter()
        .filter(|c| c.policy == Policy::Optimal)
        .map(|c| (c.s, c.r, c.mean_savings_pct))
        .collect();
    for cell in cells.iter_mut().filter(|c| c.policy == Policy::Local) {
        if let Some(&(_, _, opt)) = optimal.iter().find(|o| o.0 == cell.s && o.1 == cell.r) {
            if opt > 0.0 && cell.count > 0 {
                cell.local_to_optimal = Some(cell.mean_savings_pct / opt);
            }
        }
    }
    cells
}

fn fmt_float(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

pub const SUMMARY_HEADER: [&str; 12] = [
    "s_kva",
    "r",
    "policy",
    "n",
    "mean_savings_pct",
    "min_savings_pct",
    "max_savings_pct",
    "mean_savings_lin_pct",
    "mean_losses_kw",
    "infeasible",
    "failed",
    "local_to_optimal",
];

/// One line per (s, r, policy) cell, stable column order.
pub fn write_summary_csv<W: Write>(result: &SweepResult, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SUMMARY_HEADER)?;
    for c in summarize(result) {
        w.write_record([
            c.s.to_string(),
            c.r.to_string(),
            c.policy.as_str().to_string(),
            c.count.to_string(),
            fmt_float(c.mean_savings_pct),
            fmt_float(c.min_savings_pct),
            fmt_float(c.max_savings_pct),
            fmt_float(c.mean_savings_lin_pct),
            fmt_float(c.mean_losses_kw),
            c.infeasible.to_string(),
            c.failed.to_string(),
            c.local_to_optimal.map(fmt_float).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Raw per-realization rows. Failures go to the manifest.
pub fn write_rows_csv<W: Write>(result: &SweepResult, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "s_kva",
        "r",
        "policy",
        "seed",
        "savings_pct",
        "savings_lin_pct",
        "losses_kw",
        "baseline_losses_kw",
        "lin_objective",
        "active_voltage",
    ])?;
    for row in &result.rows {
        w.write_record([
            row.s.to_string(),
            row.r.to_string(),
            row.policy.as_str().to_string(),
            row.seed.to_string(),
            row.savings_pct.to_string(),
            row.savings_lin_pct.to_string(),
            row.losses_kw.to_string(),
            row.baseline_losses_kw.to_string(),
            row.lin_objective.to_string(),
            row.active_voltage.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest<'a> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'a str,
    pub spec: &'a SweepSpec,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub rows: usize,
    pub failures: &'a [SweepFailure],
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl<'a> RunManifest<'a> {
    pub fn new(
        command: &'a str,
        spec: &'a SweepSpec,
        result: &'a SweepResult,
        started_unix: u64,
    ) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command,
            spec,
            started_unix,
            finished_unix: unix_now(),
            rows: result.rows.len(),
            failures: &result.failures,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Baseline and optimally dispatched AC operating points for one feeder.
#[derive(Debug, Clone)]
pub struct ProfileCase {
    pub circuit: Circuit,
    pub baseline: FlowState,
    pub optimal: FlowState,
    pub solution: DispatchSolution,
}

impl ProfileCase {
    /// `V_j / V_0` for both operating points.
    pub fn voltage_ratios(&self) -> (Vec<f64>, Vec<f64>) {
        let ratio = |s: &FlowState| {
            let v0 = s.v_squared[0].sqrt();
            s.v_squared
                .iter()
                .map(|v| v.sqrt() / v0)
                .collect::<Vec<_>>()
        };
        (ratio(&self.baseline), ratio(&self.optimal))
    }
}

pub fn voltage_profile_case(
    params: &ScenarioParams,
    ac_tol: f64,
    ac_max_iter: usize,
    qp_tol: f64,
) -> Result<ProfileCase> {
    let circuit = generate_circuit(params)?;
    let solution = optimal_dispatch(&circuit, params.epsilon, qp_tol)?;
    match solution.status {
        SolveStatus::Optimal => {}
        SolveStatus::Infeasible => {
            return Err(Error::Infeasible {
                node: solution.certificate_node.unwrap_or(0),
            })
        }
        SolveStatus::MaxIter => {
            return Err(Error::NonConvergence {
                iterations: solution.iterations,
                residual: solution.kkt_residual,
            })
        }
    }
    let baseline = solve_ac(&circuit, &zero_dispatch(&circuit), ac_tol, ac_max_iter)?;
    let optimal = solve_ac(&circuit, &solution.dispatch, ac_tol, ac_max_iter)?;
    Ok(ProfileCase {
        circuit,
        baseline,
        optimal,
        solution,
    })
}

/// `node,v_ratio_baseline,v_ratio_optimal,q_g_kvar` for nodes `0..=n`.
pub fn write_profile_csv<W: Write>(case: &ProfileCase, out: W) -> Result<()> {
    let (base, opt) = case.voltage_ratios();
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["node", "v_ratio_baseline", "v_ratio_optimal", "q_g_kvar"])?;
    for j in 0..base.len() {
        let q = if j == 0 {
            0.0
        } else {
            case.circuit
                .bases
                .pu_to_kilo(case.solution.dispatch.q_g[j - 1])
        };
        w.write_record([
            j.to_string(),
            base[j].to_string(),
            opt[j].to_string(),
            q.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
