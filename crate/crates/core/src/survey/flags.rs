use log::warn;
use serde::{Deserialize, Serialize};

use super::codebook::{Code, Codebook};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VulnerabilityFlags {
    pub low_income: bool,
    pub minority: bool,
    pub renter: bool,
    pub disabled: bool,
    pub compound: bool,
}

impl VulnerabilityFlags {
    pub fn from_parts(low_income: bool, minority: bool, renter: bool, disabled: bool) -> Self {
        let count = [low_income, minority, renter, disabled].iter().filter(|&&b| b).count();
        Self { low_income, minority, renter, disabled, compound: count >= 2 }
    }

    pub fn count(&self) -> usize {
        [self.low_income, self.minority, self.renter, self.disabled].iter().filter(|&&b| b).count()
    }
}

/// Derive the four vulnerability flags and the compound indicator.
///
/// A flag whose source field is absent is set false; the returned list
/// names each such field.
pub fn derive_flags(answers: &[Option<Code>], cb: &Codebook) -> (VulnerabilityFlags, Vec<String>) {
    let rules = &cb.flag_rules;
    let mut missing = Vec::new();
    let mut label_of = |name: &str| -> Option<&str> {
        let idx = cb.field_index(name)?;
        match answers.get(idx).copied().flatten() {
            Some(code) => Some(cb.fields[idx].label(code)),
            None => {
                missing.push(name.to_string());
                None
            }
        }
    };

    let low_income = label_of(&rules.income_field)
        .and_then(|l| rules.income_upper_bounds.get(l).copied().flatten())
        .is_some_and(|upper| upper <= rules.low_income_max);
    let minority = label_of(&rules.race_field).is_some_and(|l| l != rules.majority_race);
    let renter = label_of(&rules.housing_field).is_some_and(|l| rules.renter_labels.iter().any(|r| r == l));
    let disabled = label_of(&rules.health_field).is_some_and(|l| l != rules.no_difficulty_label);

    for m in &missing {
        warn!("flag source field `{m}` is absent; flag set false");
    }
    (VulnerabilityFlags::from_parts(low_income, minority, renter, disabled), missing)
}
