//! CLI entry points, configuration loading, JSONL ingestion, and run
//! manifests: the plumbing that ties the other modules into
//! reproducible experiments.

pub mod cli;
pub mod io;
pub mod manifest;

pub use cli::run;
pub use io::{read_patients, read_raw, write_patients, LoadedCohort};
pub use manifest::{digest_file, sha256_hex, RunManifest, MANIFEST_FILE};
