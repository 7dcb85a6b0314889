//! Error and event types shared across the crate.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

/// Where a non-finite value was first observed during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExplosionSite {
    /// Inside a residual block: (stage index, block index within stage).
    Block { stage: usize, block: usize },
    /// In the classifier logits or the loss value.
    Loss,
}

/// First occurrence of a NaN/Inf activation, loss, or gradient.
///
/// Explosions are reported as data, not panics, so a training run can be
/// halted cleanly and the event written to the run record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExplosionEvent {
    pub step: usize,
    pub epoch: usize,
    pub site: ExplosionSite,
}

impl ExplosionEvent {
    /// Flat code used in the run-record CSV: the global block ordinal, or -1
    /// when the explosion surfaced at the loss.
    pub fn site_code(&self, blocks_per_stage: &[usize]) -> i64 {
        match self.site {
            ExplosionSite::Block { stage, block } => {
                let before: usize = blocks_per_stage.iter().take(stage).sum();
                (before + block) as i64
            }
            ExplosionSite::Loss => -1,
        }
    }
}

#[derive(Debug)]
pub enum Error {
    /// Operation received tensors whose shapes do not fit together.
    ShapeMismatch { op: &'static str, detail: String },
    /// Invalid configuration value or combination.
    Config(String),
    /// API misuse (e.g. backward on a non-scalar).
    Usage(String),
    /// Malformed input data (dataset files, checkpoints).
    Format(String),
    /// Numerical explosion detected during a forward pass.
    Explosion(ExplosionEvent),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, detail } => write!(f, "{op}: shape mismatch: {detail}"),
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Usage(msg) => write!(f, "usage error: {msg}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Explosion(ev) => write!(
                f,
                "numerical explosion at step {} epoch {} ({:?})",
                ev.step, ev.epoch, ev.site
            ),
            Error::Io(e) => write!(f, "I/O error: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub(crate) fn shape_err(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}
