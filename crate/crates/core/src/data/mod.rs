//! Multi-task time-series batches, synthetic generators and CSV ingestion.

mod batch;
mod csv_io;
mod split;
mod synthetic;

pub use batch::EpisodeBatch;
pub use csv_io::{ingest_csv, parse_csv, read_csv, write_csv, CsvSchema, IngestReport, CSV_VERSION_LINE};
pub use split::{
    DatasetManifest, DatasetSplit, SplitEntry, SplitFractions, MANIFEST_FILE, MANIFEST_FORMAT, SPLIT_NAMES,
};
pub use synthetic::{
    generate_imbalanced_tasks, generate_temporal_tasks, is_late, temporal_bayes_scores, Generated, SyntheticSpec,
    TaskLink, TaskRule,
};
