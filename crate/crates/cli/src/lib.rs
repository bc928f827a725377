//! Harness library behind the `weightsmith` binary: verification suites
//! and the versioned JSON serialization layer.

pub mod schema;
pub mod suites;
