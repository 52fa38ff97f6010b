use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: argument outside the domain at flat index {index}")]
    Domain { op: &'static str, index: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite gradient in parameter block `{block}`")]
    NonFiniteGradient { block: String },

    #[error("non-finite network output from `{layer}`")]
    NonFiniteOutput { layer: String },

    #[error("rollout {rollout} produced a non-finite value at timestep {timestep}")]
    NonFiniteRollout { rollout: usize, timestep: usize },

    #[error(
        "MINE objective diverged (critic norm {theta_norm:.4e}, joint mean {joint_mean:.4e}, \
         marginal mean {marginal_mean:.4e})"
    )]
    MineDiverged {
        theta_norm: f64,
        joint_mean: f64,
        marginal_mean: f64,
    },

    #[error("estimate outside tolerance: {0}")]
    Tolerance(String),

    #[error("no feasible policy: best expected cost {best_cost} exceeds the cap {cap}")]
    NoFeasiblePolicy { best_cost: f64, cap: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// `line` is 1-based within the config file, 0 when the problem is not
    /// tied to a file line.
    #[error("config error: {message}")]
    Config { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// True for failures caused by the numbers themselves rather than by
    /// malformed input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Domain { .. }
                | Error::NonFiniteGradient { .. }
                | Error::NonFiniteOutput { .. }
                | Error::NonFiniteRollout { .. }
                | Error::MineDiverged { .. }
                | Error::Tolerance(_)
        )
    }
}
