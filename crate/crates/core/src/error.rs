use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("demand {demand} exceeds supply {supply}")]
    OverDemand { demand: f64, supply: f64 },

    #[error("landscape is degenerate (zero variance)")]
    DegenerateLandscape,

    #[error("target spend {target} is infeasible: feasible range is [{t_min}, {t_bar}]")]
    Infeasible { target: f64, t_min: f64, t_bar: f64 },

    #[error("contract set is infeasible: {reason}")]
    InfeasibleContracts { reason: String },

    #[error("{solver} did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence {
        solver: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("jacobian is singular at p_min={x}, p_max={y}")]
    SingularJacobian { x: f64, y: f64 },

    #[error("price window collapsed to a point at p_min={x}, p_max={y}")]
    DegenerateWindow { x: f64, y: f64 },

    #[error("window [{lo}, {hi}] carries no probability mass")]
    ZeroMassWindow { lo: f64, hi: f64 },

    #[error("allocation increases near price {at}")]
    IncreasingAllocation { at: f64 },

    #[error("total allocation {total} exceeds supply at price {at}")]
    ExceedsSupply { at: f64, total: f64 },

    #[error("no spend multiplier up to {cap} makes the contract set decentralizable")]
    NoDecentralizingMultiplier { cap: f64 },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    /// True for failures of an iterative method rather than of the inputs.
    pub fn is_convergence_failure(&self) -> bool {
        matches!(
            self,
            Error::NonConvergence { .. } | Error::SingularJacobian { .. } | Error::DegenerateWindow { .. }
        )
    }

    pub fn is_infeasible(&self) -> bool {
        matches!(self, Error::Infeasible { .. } | Error::InfeasibleContracts { .. })
    }
}
