//! CLI and `/v1` HTTP service over monoprobe runs.

pub mod api;
pub mod cli;
