//! Command-line pipeline around `inhomarkov-core`: configuration, file
//! formats, and one function per pipeline stage.
//!
//! Every stage reads the previous stage's files under the output directory
//! and writes flat CSV/JSON, so stages can run independently.

pub mod config;
pub mod formats;
pub mod pipeline;

pub use config::RunConfig;

/// A problem with the inputs or configuration rather than with the numerics.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct InputError(pub String);

/// Process exit status for a failed command: 1 for numerical failures
/// (divergence, non-finite gradients), 2 for everything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let numerical = err
        .chain()
        .filter_map(|e| e.downcast_ref::<inhomarkov_core::Error>())
        .any(inhomarkov_core::Error::is_numerical);
    if numerical {
        1
    } else {
        2
    }
}
