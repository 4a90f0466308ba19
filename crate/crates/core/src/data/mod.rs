//! Scan records, NIfTI I/O, score binning and dataset partitioning.

pub mod manifest;
pub mod nifti;
pub mod record;
pub mod split;
pub mod volume;

pub use manifest::DatasetIndex;
pub use nifti::{load_nifti, read_header, save_nifti};
pub use record::{score_to_class, FatigueClass, Group, ScanRecord, Task, N_CLASSES};
pub use split::{make_kfold, make_kfold_with, make_splits, make_splits_with, Grouping, SplitSpec};
pub use volume::VolumeSeries;

use rayon::prelude::*;

/// Loads every record's scan, in record order, reading files in parallel.
pub fn load_scans(records: &[ScanRecord]) -> crate::Result<Vec<VolumeSeries>> {
    records.par_iter().map(|r| load_nifti(&r.path)).collect()
}
