use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParam { field: &'static str, reason: String },

    #[error("inverter capacity {s} is below real output {p_g}")]
    CapacityBelowOutput { s: f64, p_g: f64 },

    #[error("expected {expected} entries for {what}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("AC sweep did not converge in {iterations} iterations (last residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("voltage collapse at node {node}: v^2 = {v_squared}")]
    VoltageCollapse { node: usize, v_squared: f64 },

    #[error("baseline losses are zero, savings are undefined (dispatch losses {losses:e} p.u.)")]
    UndefinedSavings { losses: f64 },

    #[error("oracle found no grid point inside the voltage band")]
    OracleInfeasible,

    #[error("oracle limited to {max} PV nodes, circuit has {actual}")]
    OracleTooLarge { max: usize, actual: usize },

    #[error("voltage band infeasible, certificate node {node}")]
    Infeasible { node: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures of the numerics (as opposed to bad input or I/O).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonConvergence { .. }
                | Error::VoltageCollapse { .. }
                | Error::UndefinedSavings { .. }
                | Error::OracleInfeasible
                | Error::Infeasible { .. }
        )
    }

    /// Short machine-readable tag.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidParam { .. } => "invalid_param",
            Error::CapacityBelowOutput { .. } => "capacity_below_output",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::NonConvergence { .. } => "non_convergence",
            Error::VoltageCollapse { .. } => "voltage_collapse",
            Error::UndefinedSavings { .. } => "undefined_savings",
            Error::OracleInfeasible => "oracle_infeasible",
            Error::OracleTooLarge { .. } => "oracle_too_large",
            Error::Infeasible { .. } => "infeasible",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
