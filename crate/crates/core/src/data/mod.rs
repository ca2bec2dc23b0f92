//! Deterministic synthetic motion clips and their on-disk dataset format.

mod dataset;
mod synth;

pub use dataset::{
    generate_dataset, index_hash, load_entry, read_dataset, read_index, read_spec, stratified_split, write_dataset,
    Dataset, IndexEntry, Sample, Split, INDEX_FILE, SPEC_FILE, VAL_FRACTION,
};
pub use synth::{generate_sample, permute_frames, SynthSpec, CLASS_NAMES};
