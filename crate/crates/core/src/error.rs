use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("step {t} out of range 1..={steps}")]
    StepOutOfRange { t: usize, steps: usize },

    #[error("invalid model dimensions: {0}")]
    InvalidDims(String),

    #[error("batch length mismatch: {0}")]
    BatchMismatch(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("invalid mixture: {0}")]
    InvalidMixture(String),

    #[error("invalid training config: {0}")]
    InvalidTrainConfig(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("invalid reward: {0}")]
    InvalidReward(String),

    #[error("{op} is not supported for the {variant} reward")]
    UnsupportedReward {
        op: &'static str,
        variant: &'static str,
    },

    #[error("invalid guidance config: {0}")]
    InvalidGuidance(String),

    #[error("no KL bound is defined for method {0}")]
    NoKlBound(&'static str),

    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("{count} of {total} samples are not finite")]
    NonFiniteSamples { count: usize, total: usize },

    #[error("sample moments overflow")]
    MomentOverflow,

    #[error("covariance is not positive definite")]
    NotPositiveDefinite,

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u64, expected: u64 },

    #[error("malformed checkpoint: {0}")]
    CheckpointMalformed(String),

    #[error("checkpoint shape mismatch in {layer}: {detail}")]
    CheckpointShape { layer: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
