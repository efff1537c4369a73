//! Resources compiled into the library.

pub const CODEBOOK: &str = include_str!("../resources/codebook.json");
pub const SUBGROUPS: &str = include_str!("../resources/subgroups.json");
pub const ACS_FLORIDA: &str = include_str!("../resources/acs_florida.json");
pub const MILTON_COMPOSITION: &str = include_str!("../resources/milton_composition.json");
pub const COVERAGE_PRIOR: &str = include_str!("../resources/coverage_prior.json");
pub const SYNTH_MILTON_LIKE: &str = include_str!("../resources/synth_milton_like.json");
pub const TOY6: &str = include_str!("../resources/fixtures/toy6.csv");
pub const CONSTRUCTS: &str = include_str!("../resources/constructs.json");
pub const AUDIT_CANNED_RESPONSE: &str = include_str!("../resources/audit_canned_response.json");
pub const MILTON_LIKE_946: &str = include_str!("../resources/fixtures/milton_like_946.csv");
pub const VALIDATION_189: &str = include_str!("../resources/fixtures/validation_189.csv");
pub const ASSISTANT_TRAIN_757: &str = include_str!("../resources/fixtures/assistant_train_757.csv");
