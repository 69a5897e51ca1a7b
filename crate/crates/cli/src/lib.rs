//! File plumbing and the local JSON API used by the `clickprep` binary.

pub mod files;
pub mod server;
