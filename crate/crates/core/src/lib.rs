//! Personalized, context-aware query rewriting.
//!
//! The crate covers the whole loop: mining "when to rewrite" samples out of
//! search session logs ([`mining`]), a posterior reward built from historical
//! query statistics ([`reward`]), a finite-candidate log-linear rewrite policy
//! ([`policy`]) trained with supervised fine-tuning followed by group-relative
//! policy optimization ([`trainer`]), and an online flow that serves rewrites
//! through a pre-built query to documents cache in parallel with the
//! traditional recall path ([`fakeindex`], [`serving`]). [`harness`] holds the
//! metrics, the simulated A/B test and the CLI.

pub mod cli;
pub mod error;
pub mod fakeindex;
pub mod harness;
pub mod logstore;
pub mod mining;
pub mod policy;
pub mod reward;
pub mod serving;
pub mod text;
pub mod trainer;

pub use error::{Error, Result};
