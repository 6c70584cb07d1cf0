//! Check suites shared by the per-area integration tests and the acceptance run.
//! Each suite returns a one-line summary on success and a description of the
//! first violation on failure.
#![allow(dead_code)]

pub mod grad;
pub mod suites;
