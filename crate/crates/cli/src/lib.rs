//! Command-line front end: PGM/PPM codecs, box and config files, and the
//! `enhance`, `track`, `eval`, `init` and `selftest` commands.

pub mod commands;
pub mod error;
pub mod pnm;
pub mod selftest;
pub mod text;

pub use commands::{cmd_enhance, cmd_eval, cmd_init, cmd_track, RunConfig};
pub use error::{code, CliError, CliResult};
