//! Survey data model.

pub mod codebook;
pub mod dataset;
pub mod flags;

pub use codebook::{Block, Code, Codebook, Condition, FieldKind, FieldSpec, Sign};
pub use dataset::{
    load_dataset, read_records, sample_composition, split, subgroup_defs_milton, CellState, Dataset, Provenance, Respondent,
    SubgroupDef,
};
pub use flags::{derive_flags, VulnerabilityFlags};
