//! Engine for AI-mediated collaborative qualitative coding.
//!
//! Two coders annotate transcripts; their coding histories train a text
//! classifier that serves ranked code suggestions through a dual-slot
//! hot-swap engine. Sessions enforce the collaboration condition and phase
//! rules, and the metrics module computes agreement, diversity, coverage,
//! completion and timing from a session's event log.

pub mod clock;
pub mod codebook;
pub mod corpus;
pub mod metrics;
pub mod par;
pub mod replay;
pub mod serving;
pub mod session;
pub mod suggest;
