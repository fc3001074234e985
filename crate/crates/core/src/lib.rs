//! Toy-scale pipeline for steering a diffusion policy away from failure modes
//! at inference time.
//!
//! The pipeline, end to end:
//!
//! 1. [`env`] — a deterministic 2D navigation task with a trap region, a goal
//!    disc, and a scripted two-mode expert.
//! 2. [`policy`] — a DDPM-style action-chunk policy trained on expert
//!    demonstrations, with staged checkpointing and receding-horizon execution.
//! 3. [`mil`] — a gated-attention multiple-instance-learning model that learns
//!    trajectory outcomes from bags of (observation, action-chunk) instances and
//!    exposes per-instance attention weights.
//! 4. [`labeling`] — z-score thresholding of attention weights into
//!    success-relevant / failure-relevant / irrelevant instance pseudo-labels.
//! 5. [`guide`] — a three-class relevance classifier trained on the pseudo-labels,
//!    exposing log-probability gradients with respect to the action chunk.
//! 6. [`guidance`] — injection of those gradients into the reverse diffusion
//!    process, under constant or alternating schedules.
//! 7. [`harness`] — rollout collection, paired-seed evaluation, and the
//!    guidance-strength / z-score sensitivity sweeps.
//!
//! All learned models sit on [`nn`], a minimal dense-network substrate with
//! reverse-mode gradients (with respect to parameters and inputs) and an
//! adaptive-moment optimizer. Everything is 64-bit and deterministic given seeds.

pub mod config;
pub mod env;
pub mod guidance;
pub mod guide;
pub mod harness;
pub mod labeling;
pub mod mil;
pub mod nn;
pub mod policy;
pub mod seeding;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {context} (expected {expected}, got {got})")]
    ShapeMismatch {
        context: String,
        expected: usize,
        got: usize,
    },

    #[error("tape does not match network (stale or from a different net): {0}")]
    StaleTape(String),

    #[error("non-finite gradient in layer {layer}")]
    NonFiniteGradient { layer: usize },

    #[error("training loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("cannot step a terminal environment state")]
    TerminalStep,

    #[error("demonstration set is empty")]
    EmptyDemos,

    #[error("demonstration {index} has {steps} steps, too short to cut a window")]
    DemoTooShort { index: usize, steps: usize },

    #[error("z-score undefined for a single-instance attention vector")]
    ZScoreUndefined,

    #[error("length mismatch: {context} ({left} vs {right})")]
    LengthMismatch {
        context: String,
        left: usize,
        right: usize,
    },

    #[error("training set contains only `{0}` bags; both outcomes are required")]
    SingleClassBags(String),

    #[error("rollout corpus contains only `{outcome}` outcomes over {episodes} episodes; relevance discovery needs both classes")]
    SingleClassCorpus { outcome: String, episodes: usize },

    #[error("instance dataset is missing class {class} (counts: sr={sr}, fr={fr}, ir={ir})")]
    MissingClass {
        class: String,
        sr: usize,
        fr: usize,
        ir: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors that mean a pipeline stage's preconditions were not met
    /// (as opposed to usage or I/O problems). The CLI maps these to exit code 2.
    pub fn is_precondition(&self) -> bool {
        matches!(
            self,
            Error::SingleClassBags(_)
                | Error::SingleClassCorpus { .. }
                | Error::MissingClass { .. }
                | Error::EmptyDemos
                | Error::DemoTooShort { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
