//! File formats, corpus IO and the `nahw` command-line pipeline built on
//! `nahw-core`.

pub mod error;
pub mod format;
pub mod fsutil;
pub mod config;
pub mod input;
pub mod cmd;
