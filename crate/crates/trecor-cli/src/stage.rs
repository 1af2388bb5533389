//! Failure plumbing. Every error leaving a subcommand is tagged with the
//! pipeline stage that produced it and the hash of the invocation's input,
//! so failures in scripted batch runs stay attributable. The tagged error is
//! then mapped onto the process exit contract: 0 ok, 2 configuration or
//! input problem, 3 numerical failure inside a sampler.

use std::fmt;

use trecor::gibbs::GibbsError;
use trecor::randdist::DistError;

#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub input_hash: String,
    pub source: anyhow::Error,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let short = &self.input_hash[..self.input_hash.len().min(12)];
        // `:#` flattens the anyhow context chain onto one line.
        write!(f, "stage {} failed (input {}): {:#}", self.stage, short, self.source)
    }
}

impl std::error::Error for StageError {}

/// Adapter for `.map_err(stage("fit", &hash))`.
pub fn stage<E>(name: &'static str, input_hash: &str) -> impl FnOnce(E) -> StageError
where
    E: Into<anyhow::Error>,
{
    let input_hash = input_hash.to_string();
    move |e| StageError { stage: name, input_hash, source: e.into() }
}

/// Exit code for a tagged error. Failed factorizations and sweep-level
/// numerical breakdowns exit 3; everything else is treated as a problem with
/// the configuration or the inputs and exits 2.
pub fn exit_code(err: &StageError) -> i32 {
    for cause in err.source.chain() {
        if let Some(g) = cause.downcast_ref::<GibbsError>() {
            if matches!(g, GibbsError::Numerical { .. }) {
                return 3;
            }
        }
        if let Some(d) = cause.downcast_ref::<DistError>() {
            if matches!(d, DistError::NotPositiveDefinite { .. }) {
                return 3;
            }
        }
    }
    2
}
