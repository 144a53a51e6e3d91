//! `voltvar` command line.
//!
//! Settings resolve as flags, then `VOLTVAR_*` environment variables, then the
//! JSON file given by `--config`, then built-in defaults. Powers on the command
//! line are in kW, kVAr and kVA.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::circuit::{generate_circuit, Circuit, ScenarioParams};
use crate::dispatch::{
    lin_objective, local_dispatch, optimal_dispatch, zero_dispatch, DispatchSolution, SolveStatus,
    DEFAULT_QP_TOL,
};
use crate::error::{Error, Result};
use crate::experiments::{
    run_sweep, unix_now, voltage_profile_case, write_profile_csv, write_rows_csv,
    write_summary_csv, RunManifest, SweepSpec,
};
use crate::powerflow::{
    losses, solve_ac, solve_lin, write_flow_csv, Dispatch, Model, Policy, DEFAULT_AC_MAX_ITER,
    DEFAULT_AC_TOL,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;

const DEFAULT_S_GRID: &str = "1.0:2.0:0.1";
const DEFAULT_R_GRID: &str = "0.0:1.0:0.1";
const DEFAULT_REALIZATIONS: usize = 20;

/// Contents of a `--config` file. Every field is optional; unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub params: ScenarioParams,
    pub circuit: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub policy: Option<Policy>,
    pub model: Option<Model>,
    pub ac_tol: Option<f64>,
    pub ac_max_iter: Option<usize>,
    pub qp_tol: Option<f64>,
    pub s_grid: Option<String>,
    pub r_grid: Option<String>,
    pub realizations: Option<usize>,
    pub parallel: Option<bool>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "voltvar",
    version,
    about = "Reactive power dispatch on radial distribution feeders"
)]
pub struct Cli {
    /// JSON settings file; flags and environment take precedence
    #[arg(long, global = true, env = "VOLTVAR_CONFIG")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw one feeder realization and write it as JSON
    Generate {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// PV penetration fraction [default: 0.5]
        #[arg(long, env = "VOLTVAR_R")]
        r: Option<f64>,
        /// Inverter rating in kVA [default: 1.1]
        #[arg(long, env = "VOLTVAR_S")]
        s: Option<f64>,
        /// Output path [default: stdout]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Power flow for one circuit under a dispatch policy; prints node CSV and a losses line
    Solve {
        #[arg(long)]
        circuit: Option<PathBuf>,
        /// [default: zero]
        #[arg(long, value_enum)]
        policy: Option<PolicyArg>,
        /// [default: ac]
        #[arg(long, value_enum)]
        model: Option<ModelArg>,
        /// Voltage band half-width on v^2 (optimal policy only) [default: 0.05]
        #[arg(long, env = "VOLTVAR_EPSILON")]
        epsilon: Option<f64>,
        #[command(flatten)]
        solver: SolverArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute a dispatch for one circuit and write it as JSON
    Dispatch {
        #[arg(long)]
        circuit: Option<PathBuf>,
        /// [default: optimal]
        #[arg(long, value_enum)]
        policy: Option<PolicyArg>,
        /// Voltage band half-width on v^2 [default: 0.05]
        #[arg(long, env = "VOLTVAR_EPSILON")]
        epsilon: Option<f64>,
        #[command(flatten)]
        solver: SolverArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Savings versus inverter rating
    SweepS(SweepArgs),
    /// Savings versus PV penetration
    SweepR(SweepArgs),
    /// Voltage profile with and without optimal dispatch for one realization
    Profile {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// PV penetration fraction [default: 0.5]
        #[arg(long, env = "VOLTVAR_R")]
        r: Option<f64>,
        /// Inverter rating in kVA [default: 1.1]
        #[arg(long, env = "VOLTVAR_S")]
        s: Option<f64>,
        #[command(flatten)]
        solver: SolverArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Default, Args)]
pub struct ScenarioArgs {
    /// Number of load nodes [default: 100]
    #[arg(long, env = "VOLTVAR_N")]
    pub n: Option<usize>,
    /// Base RNG seed [default: 7]
    #[arg(long, env = "VOLTVAR_SEED")]
    pub seed: Option<u64>,
    /// Voltage band half-width on v^2 [default: 0.05]
    #[arg(long, env = "VOLTVAR_EPSILON")]
    pub epsilon: Option<f64>,
    /// Real output per PV inverter in kW [default: 1.0]
    #[arg(long, env = "VOLTVAR_P_G")]
    pub p_g: Option<f64>,
    /// Upper end of the uniform real load draw in kW [default: 4.0]
    #[arg(long, env = "VOLTVAR_P_C_MAX")]
    pub p_c_max: Option<f64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct SolverArgs {
    /// AC sweep residual tolerance in p.u. [default: 1e-10]
    #[arg(long, env = "VOLTVAR_AC_TOL")]
    pub ac_tol: Option<f64>,
    /// AC sweep iteration cap [default: 50]
    #[arg(long, env = "VOLTVAR_AC_MAX_ITER")]
    pub ac_max_iter: Option<usize>,
    /// KKT tolerance for the optimal dispatch [default: 1e-8]
    #[arg(long, env = "VOLTVAR_QP_TOL")]
    pub qp_tol: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    /// Penetration grid: value, comma list, or start:stop:step
    /// [default: 0.0:1.0:0.1 for sweep-r, 0.5 for sweep-s]
    #[arg(long, env = "VOLTVAR_R")]
    pub r: Option<String>,
    /// Inverter rating grid in kVA, same syntax
    /// [default: 1.0:2.0:0.1 for sweep-s, 1.1 for sweep-r]
    #[arg(long, env = "VOLTVAR_S")]
    pub s: Option<String>,
    /// Realizations per cell; realization k uses seed + k [default: 20]
    #[arg(long, env = "VOLTVAR_REALIZATIONS")]
    pub realizations: Option<usize>,
    /// Evaluate realizations on all cores; output is unchanged
    #[arg(long)]
    pub parallel: bool,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Summary CSV path [default: stdout]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-realization CSV path
    #[arg(long)]
    pub rows: Option<PathBuf>,
    /// Run manifest path [default: <out>.manifest.json when --out is given]
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    Zero,
    Local,
    Optimal,
}

impl From<PolicyArg> for Policy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Zero => Policy::Zero,
            PolicyArg::Local => Policy::Local,
            PolicyArg::Optimal => Policy::Optimal,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    Ac,
    Lin,
}

impl From<ModelArg> for Model {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Ac => Model::Ac,
            ModelArg::Lin => Model::Lin,
        }
    }
}

/// Parses `1.1`, `0.9,1.0` or `start:stop:step`. Ranges include `stop` when
/// it is reached within 1e-12; grid points are rounded to 12 decimals so that
/// `1.0:2.0:0.1` yields `1.2` rather than `1.2000000000000002`.
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let bad = |reason: String| Error::InvalidParam {
        field: "grid",
        reason,
    };
    let number = |s: &str| {
        s.trim()
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| bad(format!("`{s}` is not a finite number")))
    };
    let parts: Vec<&str> = text.split(':').collect();
    match parts.as_slice() {
        [start, stop, step] => {
            let (start, stop, step) = (number(start)?, number(stop)?, number(step)?);
            if step <= 0.0 {
                return Err(bad("step must be positive".into()));
            }
            if stop < start {
                return Err(bad("stop is below start".into()));
            }
            let mut out = Vec::new();
            for k in 0.. {
                let v = start + k as f64 * step;
                if v > stop + 1e-12 {
                    break;
                }
                out.push(if (v - stop).abs() <= 1e-12 {
                    stop
                } else {
                    (v * 1e12).round() / 1e12
                });
            }
            Ok(out)
        }
        [list] => {
            let values = list.split(',').map(number).collect::<Result<Vec<_>>>()?;
            if values.is_empty() {
                return Err(bad("empty grid".into()));
            }
            Ok(values)
        }
        _ => Err(bad(format!(
            "`{text}` is neither a list nor start:stop:step"
        ))),
    }
}

struct Tolerances {
    ac_tol: f64,
    ac_max_iter: usize,
    qp_tol: f64,
}

fn tolerances(args: &SolverArgs, file: &RunConfig) -> Tolerances {
    Tolerances {
        ac_tol: args.ac_tol.or(file.ac_tol).unwrap_or(DEFAULT_AC_TOL),
        ac_max_iter: args
            .ac_max_iter
            .or(file.ac_max_iter)
            .unwrap_or(DEFAULT_AC_MAX_ITER),
        qp_tol: args.qp_tol.or(file.qp_tol).unwrap_or(DEFAULT_QP_TOL),
    }
}

fn scenario(args: &ScenarioArgs, file: &RunConfig) -> ScenarioParams {
    let mut p = file.params.clone();
    if let Some(n) = args.n {
        p.n = n;
    }
    if let Some(seed) = args.seed {
        p.seed = seed;
    }
    if let Some(eps) = args.epsilon {
        p.epsilon = eps;
    }
    if let Some(p_g) = args.p_g {
        p.p_g_value = p_g;
    }
    if let Some(hi) = args.p_c_max {
        p.p_c_range[1] = hi;
    }
    p
}

fn missing(field: &'static str) -> Error {
    Error::InvalidParam {
        field,
        reason: "required (flag or config file)".into(),
    }
}

fn load_circuit(flag: &Option<PathBuf>, file: &RunConfig) -> Result<Circuit> {
    let path = flag
        .as_ref()
        .or(file.circuit.as_ref())
        .ok_or_else(|| missing("circuit"))?;
    Circuit::from_json(&fs::read_to_string(path)?)
}

fn emit(
    out: &Option<PathBuf>,
    file: &RunConfig,
    stdout: &mut dyn Write,
    bytes: &[u8],
) -> Result<()> {
    match out.as_ref().or(file.out.as_ref()) {
        Some(path) => fs::write(path, bytes)?,
        None => stdout.write_all(bytes)?,
    }
    Ok(())
}

/// The dispatch for `policy`, plus the solver report when the policy is OPTIMAL.
fn dispatch_for(
    circuit: &Circuit,
    policy: Policy,
    epsilon: f64,
    qp_tol: f64,
) -> Result<(Dispatch, Option<DispatchSolution>)> {
    match policy {
        Policy::Zero => Ok((zero_dispatch(circuit), None)),
        Policy::Local => Ok((local_dispatch(circuit)?, None)),
        _ => {
            let sol = optimal_dispatch(circuit, epsilon, qp_tol)?;
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
    }
}

fn plain_dispatch_json(circuit: &Circuit, dispatch: &Dispatch) -> Result<String> {
    let kvar: Vec<f64> = dispatch
        .q_g
        .iter()
        .map(|&q| circuit.bases.pu_to_kilo(q))
        .collect();
    let value = serde_json::json!({
        "policy": dispatch.policy,
        "q_g": dispatch.q_g,
        "q_g_kvar": kvar,
        "objective": lin_objective(circuit, dispatch)?,
    });
    Ok(serde_json::to_string_pretty(&value)?)
}

/// Node CSV for `circuit` under `policy`, followed by `# losses_kw,<value>`.
pub fn solve_report(
    circuit: &Circuit,
    policy: Policy,
    model: Model,
    epsilon: f64,
    ac_tol: f64,
    ac_max_iter: usize,
    qp_tol: f64,
) -> Result<Vec<u8>> {
    let (dispatch, _) = dispatch_for(circuit, policy, epsilon, qp_tol)?;
    let state = match model {
        Model::Ac => solve_ac(circuit, &dispatch, ac_tol, ac_max_iter)?,
        Model::Lin => solve_lin(circuit, &dispatch)?,
    };
    let mut buf = Vec::new();
    write_flow_csv(&state, &circuit.bases, &mut buf)?;
    writeln!(
        buf,
        "# losses_kw,{}",
        circuit.bases.pu_to_kilo(losses(circuit, &state))
    )?;
    Ok(buf)
}

fn run_sweep_command(
    args: &SweepArgs,
    file: &RunConfig,
    swept_s: bool,
    command: &str,
    stdout: &mut dyn Write,
) -> Result<()> {
    let base = scenario(&args.scenario, file);
    let tol = tolerances(&args.solver, file);
    let s_text = args.s.clone().or(file.s_grid.clone()).unwrap_or_else(|| {
        if swept_s {
            DEFAULT_S_GRID.into()
        } else {
            base.s_value.to_string()
        }
    });
    let r_text = args.r.clone().or(file.r_grid.clone()).unwrap_or_else(|| {
        if swept_s {
            base.penetration_r.to_string()
        } else {
            DEFAULT_R_GRID.into()
        }
    });
    let mut spec = SweepSpec::new(base, parse_grid(&s_text)?, parse_grid(&r_text)?);
    spec.n_realizations = args
        .realizations
        .or(file.realizations)
        .unwrap_or(DEFAULT_REALIZATIONS);
    spec.parallel = args.parallel || file.parallel.unwrap_or(false);
    spec.ac_tol = tol.ac_tol;
    spec.ac_max_iter = tol.ac_max_iter;
    spec.qp_tol = tol.qp_tol;

    let started = unix_now();
    let result = run_sweep(&spec)?;
    if !result.failures.is_empty() {
        log::warn!(
            "{} instances failed; see the manifest",
            result.failures.len()
        );
    }

    let mut summary = Vec::new();
    write_summary_csv(&result, &mut summary)?;
    let out = args.out.as_ref().or(file.out.as_ref());
    emit(&args.out, file, stdout, &summary)?;
    if let Some(path) = &args.rows {
        let mut rows = Vec::new();
        write_rows_csv(&result, &mut rows)?;
        fs::write(path, rows)?;
    }
    let manifest_path = args.manifest.clone().or_else(|| {
        out.map(|p| {
            let mut name = p.as_os_str().to_owned();
            name.push(".manifest.json");
            PathBuf::from(name)
        })
    });
    if let Some(path) = manifest_path {
        fs::write(
            path,
            RunManifest::new(command, &spec, &result, started).to_json()?,
        )?;
    }
    Ok(())
}

fn execute(cli: Cli, stdout: &mut dyn Write) -> Result<()> {
    let file = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    match &cli.command {
        Command::Generate {
            scenario: sc,
            r,
            s,
            out,
        } => {
            let mut params = scenario(sc, &file);
            if let Some(r) = r {
                params.penetration_r = *r;
            }
            if let Some(s) = s {
                params.s_value = *s;
            }
            let circuit = generate_circuit(&params)?;
            emit(out, &file, stdout, circuit.to_json()?.as_bytes())
        }
        Command::Solve {
            circuit,
            policy,
            model,
            epsilon,
            solver,
            out,
        } => {
            let c = load_circuit(circuit, &file)?;
            let tol = tolerances(solver, &file);
            let policy = policy
                .map(Policy::from)
                .or(file.policy)
                .unwrap_or(Policy::Zero);
            let model = model.map(Model::from).or(file.model).unwrap_or(Model::Ac);
            let eps = epsilon.unwrap_or(file.params.epsilon);
            let report = solve_report(
                &c,
                policy,
                model,
                eps,
                tol.ac_tol,
                tol.ac_max_iter,
                tol.qp_tol,
            )?;
            emit(out, &file, stdout, &report)
        }
        Command::Dispatch {
            circuit,
            policy,
            epsilon,
            solver,
            out,
        } => {
            let c = load_circuit(circuit, &file)?;
            let tol = tolerances(solver, &file);
            let policy = policy
                .map(Policy::from)
                .or(file.policy)
                .unwrap_or(Policy::Optimal);
            let eps = epsilon.unwrap_or(file.params.epsilon);
            let json = match dispatch_for(&c, policy, eps, tol.qp_tol)? {
                (_, Some(sol)) => sol.to_json(&c)?,
                (d, None) => plain_dispatch_json(&c, &d)?,
            };
            emit(out, &file, stdout, json.as_bytes())
        }
        Command::SweepS(args) => run_sweep_command(args, &file, true, "sweep-s", stdout),
        Command::SweepR(args) => run_sweep_command(args, &file, false, "sweep-r", stdout),
        Command::Profile {
            scenario: sc,
            r,
            s,
            solver,
            out,
        } => {
            let mut params = scenario(sc, &file);
            if let Some(r) = r {
                params.penetration_r = *r;
            }
            if let Some(s) = s {
                params.s_value = *s;
            }
            let tol = tolerances(solver, &file);
            let case = voltage_profile_case(&params, tol.ac_tol, tol.ac_max_iter, tol.qp_tol)?;
            let mut buf = Vec::new();
            write_profile_csv(&case, &mut buf)?;
            emit(out, &file, stdout, &buf)
        }
    }
}

fn error_json(kind: &str, message: &str, code: i32) -> String {
    serde_json::json!({ "error": kind, "message": message, "exit_code": code }).to_string()
}

/// Runs the tool and returns the process exit code. Errors are written to
/// `stderr` as one JSON object per line.
pub fn run<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(stdout, "{e}");
                return EXIT_OK;
            }
            let _ = writeln!(
                stderr,
                "{}",
                error_json("usage", e.to_string().trim_end(), EXIT_USAGE)
            );
            return EXIT_USAGE;
        }
    };
    match execute(cli, stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let code = if e.is_numerical() {
                EXIT_NUMERICAL
            } else {
                EXIT_USAGE
            };
            let _ = writeln!(stderr, "{}", error_json(e.kind(), &e.to_string(), code));
            code
        }
    }
}
