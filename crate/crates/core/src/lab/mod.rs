//! Experiment configuration, verification batteries and end-to-end runs.

mod config;
mod dup;
mod run;
mod suites;
mod table;

pub use config::{
    DuplicatedClassSetup, ExperimentConfig, ManifoldSetup, OverfitCopySetup, Setup, SpecRef, ZooSetup,
    CONFIG_SCHEMA_VERSION, PRESETS,
};
pub use dup::{metric_battery, mitigation_battery, DupData, DupFixture};
pub use run::{region_of, run_experiment, RunReport, StageRecord, REPORT_FILE};
pub use suites::{
    atom_pair_probability, conditioning_suite, copy_suite, duplication_suite, estimator_suite,
    gaussian_flipd_closed_form, setup_suite, verify_suite, SUITES,
};
pub use table::{num, Check, ColumnDoc, CsvTable, SuiteTable, TableSchema};
