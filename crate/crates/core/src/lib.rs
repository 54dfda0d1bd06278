//! Branch-targeted fuzzing for textual targets with a language model in the
//! loop.
//!
//! The pipeline has three stages:
//!
//! * [`dataset`] runs a seed corpus, harvests branches that were executed in
//!   only one direction, and turns each into a [`slicer::Question`]: the
//!   source of every function on the call stack leading to the branch plus a
//!   request to invert its outcome.
//! * [`reward`] scores a generated input against the original one with a
//!   function-trace prefix distance and a four-way case split, and serves that
//!   score over HTTP for external trainers.
//! * [`fuzzloop`] runs a mutation fuzzer whose newly discovered uncovered
//!   branches feed a [`scheduler::QuestionQueue`] drained by a
//!   [`modelclient::ModelClient`].
//!
//! Two instrumented toy interpreters ([`targets::builtin_target`]) make the
//! whole pipeline runnable without external tooling.

pub mod coverage;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod fuzzloop;
pub mod modelclient;
pub mod reward;
pub mod scheduler;
pub mod slicer;
pub mod targets;

use base64::Engine as _;
use sha2::{Digest, Sha256};

pub use coverage::{BranchKey, BranchSite, CoverageSet, ExecutionFeedback, UncoveredBranch};
pub use error::{
    CampaignError, CoverageError, DatasetError, EvalError, ModelError, RewardError, SliceError, TargetError,
};
pub use targets::{builtin_target, ProgramIndex, TargetAdapter};

/// Hex prefix of a SHA-256 over NUL-separated parts. Stable across runs and
/// platforms.
pub fn stable_hash(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for (i, p) in parts.iter().enumerate() {
        if i > 0 {
            h.update([0u8]);
        }
        h.update(p.as_bytes());
    }
    let digest = h.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

pub fn b64_encode(bytes: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

pub fn b64_decode(text: &str) -> Result<Vec<u8>, base64::DecodeError> {
    base64::engine::general_purpose::STANDARD.decode(text.trim())
}
