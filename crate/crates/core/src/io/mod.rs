//! File formats, synthetic streams, configuration and the run harness.

pub mod config;
pub mod format;
pub mod grid;
pub mod run;
pub mod snapshot;
pub mod synth;

pub use config::RunConfig;
pub use format::{read_stream, write_stream, SampleRecord, StreamHeader, StreamReader, StreamWriter};
pub use grid::{grid_search, GridReport, GridRow, GridSpec};
pub use run::{run_engine, run_records, RunOutcome, RunSummary, SampleLog};
pub use snapshot::{read_snapshot, write_snapshot, Snapshot};
pub use synth::{synth_in_memory, synth_stream, SynthSpec, SynthStream};
