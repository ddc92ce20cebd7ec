use std::fmt;

/// Error classes printed in the one-line error report.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Config,
    Io,
    Data,
    Model,
    Diverged,
}

impl Kind {
    pub fn as_str(self) -> &'static str {
        match self {
            Kind::Config => "config",
            Kind::Io => "io",
            Kind::Data => "data",
            Kind::Model => "model",
            Kind::Diverged => "diverged",
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            Kind::Config => 2,
            Kind::Io => 3,
            Kind::Data => 4,
            Kind::Model => 5,
            Kind::Diverged => 6,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

impl CliError {
    pub fn new(kind: Kind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }
}

/// `error kind=<kind> message=<json string>`, always on one line.
impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msg = serde_json::to_string(&self.message).expect("string serializes");
        write!(f, "error kind={} message={}", self.kind.as_str(), msg)
    }
}

impl std::error::Error for CliError {}

impl From<hoi_core::DatasetError> for CliError {
    fn from(e: hoi_core::DatasetError) -> Self {
        let kind = match e {
            hoi_core::DatasetError::Io { .. } => Kind::Io,
            _ => Kind::Data,
        };
        CliError::new(kind, e.to_string())
    }
}

impl From<hoi_core::FeatureError> for CliError {
    fn from(e: hoi_core::FeatureError) -> Self {
        let kind = match e {
            hoi_core::FeatureError::Io(_) => Kind::Io,
            _ => Kind::Data,
        };
        CliError::new(kind, e.to_string())
    }
}

impl From<hoi_core::ModelError> for CliError {
    fn from(e: hoi_core::ModelError) -> Self {
        let kind = match e {
            hoi_core::ModelError::Io(_) => Kind::Io,
            hoi_core::ModelError::Config(_) => Kind::Config,
            _ => Kind::Model,
        };
        CliError::new(kind, e.to_string())
    }
}

impl From<hoi_core::TrainError> for CliError {
    fn from(e: hoi_core::TrainError) -> Self {
        let kind = match e {
            hoi_core::TrainError::Diverged { .. } => Kind::Diverged,
            hoi_core::TrainError::Config(_) => Kind::Config,
            hoi_core::TrainError::Feature(_) => Kind::Data,
            hoi_core::TrainError::Model(_) => Kind::Model,
        };
        CliError::new(kind, e.to_string())
    }
}

impl From<hoi_core::InferenceError> for CliError {
    fn from(e: hoi_core::InferenceError) -> Self {
        match e {
            hoi_core::InferenceError::Feature(e) => e.into(),
            hoi_core::InferenceError::Model(e) => e.into(),
        }
    }
}

impl From<hoi_core::EvalError> for CliError {
    fn from(e: hoi_core::EvalError) -> Self {
        let kind = match e {
            hoi_core::EvalError::Io(_) => Kind::Io,
            _ => Kind::Data,
        };
        CliError::new(kind, e.to_string())
    }
}
