use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: fslam_core::Error,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    #[error("{0}")]
    Format(String),
    #[error("empty mask: no pixel passes the validity test")]
    EmptyMask,
    #[error(transparent)]
    Core(#[from] fslam_core::Error),
}

impl HarnessError {
    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// Tags a core error with the pipeline stage that raised it.
pub trait StageContext<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageContext<T> for fslam_core::Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|source| HarnessError::Stage { stage, source })
    }
}
