use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] cmflow::Error),
    /// Arguments or inputs that are individually valid but unusable together.
    #[error("{0}")]
    Usage(String),
    /// A verification command ran to completion and found a violation.
    #[error("{0}")]
    CheckFailed(String),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn kind(&self) -> &'static str {
        use cmflow::Error as E;
        match self {
            CliError::Usage(_) => "usage",
            CliError::CheckFailed(_) => "check_failed",
            CliError::Core(e) => match e {
                E::DegenerateGeometry(_) => "degenerate_geometry",
                E::InvalidConfig(_) => "invalid_config",
                E::EmptyFrame => "empty_frame",
                E::ZeroRangePoint { .. } => "zero_range_point",
                E::ShapeMismatch(_) => "shape_mismatch",
                E::DomainError(_) => "domain_error",
                E::NonScalarOutput(_) => "non_scalar_output",
                E::NonFiniteLoss { .. } => "non_finite_loss",
                E::Invariant(_) => "invariant",
                E::Format(_) => "format",
                E::Io(_) => "io",
                E::Json(_) => "json",
            },
        }
    }

    /// 1 for bad configs, paths and arguments; 2 when the inputs or the
    /// computation violate an invariant.
    pub fn exit_code(&self) -> i32 {
        use cmflow::Error as E;
        match self {
            CliError::Usage(_) => 1,
            CliError::CheckFailed(_) => 2,
            CliError::Core(e) => match e {
                E::InvalidConfig(_) | E::Format(_) | E::Io(_) | E::Json(_) => 1,
                _ => 2,
            },
        }
    }

    /// Single-line JSON rendering for stderr.
    pub fn to_line(&self) -> String {
        serde_json::json!({
            "error": self.kind(),
            "code": self.exit_code(),
            "message": self.to_string().replace('\n', " "),
        })
        .to_string()
    }
}
