//! Daily-batch cyber threat intelligence extraction over forum threads.
//!
//! The crate covers the whole loop: corpus ingestion and daily chunking,
//! schema-driven prompting and response parsing, a completion backend with
//! record/replay, the batch pipeline, an append-only store, and the two-coder
//! evaluation arithmetic behind the accuracy report.

pub mod backend;
pub mod corpus;
pub mod demo;
pub mod eval;
pub mod pipeline;
pub mod review;
pub mod schema;
pub mod store;

mod hashing;
pub mod timefmt;

pub use hashing::sha256_hex;
