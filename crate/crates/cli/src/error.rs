use mapf_gnn::datastore::StoreError;
use mapf_gnn::executor::ExecError;
use mapf_gnn::expert::ExpertError;
use mapf_gnn::policy::WeightsError;
use mapf_gnn::training::TrainError;
use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    /// The requested work was dominated by unsolvable or timed-out instances,
    /// or a correctness check found disagreements.
    #[error("{0}")]
    Infeasible(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Infeasible(_) => 3,
            CliError::Io(_) => 4,
            CliError::Other(_) => 1,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Infeasible(_) => "infeasible",
            CliError::Io(_) => "io",
            CliError::Other(_) => "error",
        }
    }

    /// Single-line JSON for stderr.
    pub fn to_json_line(&self) -> String {
        json!({ "error": self.kind(), "exit_code": self.exit_code(), "message": self.to_string() }).to_string()
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<WeightsError> for CliError {
    fn from(e: WeightsError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<ExecError> for CliError {
    fn from(e: ExecError) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<ExpertError> for CliError {
    fn from(e: ExpertError) -> Self {
        match e {
            ExpertError::Timeout(_) | ExpertError::Infeasible | ExpertError::Unreachable { .. } => CliError::Infeasible(e.to_string()),
            ExpertError::InvalidCase(_) => CliError::Config(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Store(s) => s.into(),
            TrainError::InvalidConfig(m) => CliError::Config(m),
            other => CliError::Other(other.to_string()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_and_single_line() {
        let e = CliError::Io("a\nb".into());
        assert_eq!(e.exit_code(), 4);
        assert!(!e.to_json_line().contains('\n'));
        assert_eq!(CliError::from(ExpertError::Infeasible).exit_code(), 3);
        assert_eq!(CliError::from(TrainError::InvalidConfig("x".into())).exit_code(), 2);
    }
}
