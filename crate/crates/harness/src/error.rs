use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, HarnessError>;

/// Pipeline stages, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Simulate,
    Train,
    Calibrate,
    Detect,
    Report,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Simulate => "simulate",
            Stage::Train => "train",
            Stage::Calibrate => "calibrate",
            Stage::Detect => "detect",
            Stage::Report => "report",
        })
    }
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),

    #[error("stage {stage} failed (replay with --seed {seed}): {source}")]
    Stage {
        stage: Stage,
        seed: u64,
        #[source]
        source: radar_ood::Error,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl HarnessError {
    pub fn config(msg: impl Into<String>) -> Self {
        HarnessError::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 for configuration, 3 for numeric or training failures, 4 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Io { .. } => 4,
            HarnessError::Stage { source, .. } => match source {
                radar_ood::Error::Io(_) | radar_ood::Error::Format { .. } => 4,
                _ => 3,
            },
        }
    }
}

/// Attaches stage and seed to core errors.
pub trait StageContext<T> {
    fn stage(self, stage: Stage, seed: u64) -> Result<T>;
}

impl<T> StageContext<T> for radar_ood::Result<T> {
    fn stage(self, stage: Stage, seed: u64) -> Result<T> {
        self.map_err(|source| HarnessError::Stage { stage, seed, source })
    }
}
