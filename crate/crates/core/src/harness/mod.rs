//! Experiment orchestration: datasets, configuration, sweeps and reports.

mod data;
mod spec;
mod sweep;

pub use data::{
    load_cifar10, load_dataset, parse_cifar10, read_dataset, resolve_data_path, synth_dataset, write_dataset, Dataset,
    Provenance, SynthSpec, CIFAR_RECORD,
};
pub use spec::{schema_text, AttackSpec, CompareSpec, DataSource, DataSpec, DictionarySpec, ExperimentSpec, SweepSpec, Variant};
pub use sweep::{
    compare_defenses, prepare_data, prepare_dictionary, rerun_manifest, run_sweep, train_variant, CompareRow, Manifest,
    SweepOutput, SweepRow,
};
