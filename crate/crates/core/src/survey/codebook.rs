//! Survey codebook: field definitions, level maps, PMT stages and the
//! annexes (aliases, flag rules, theoretical edge signs, synonyms) that the
//! rest of the pipeline keys on.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of a level within a field's level list (0-based).
pub type Code = u8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Block {
    A,
    B,
    C,
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Block::A => "A",
            Block::B => "B",
            Block::C => "C",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Categorical,
    Ordinal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Level {
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ordinal: Option<u8>,
}

/// `field` takes one of `labels`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Condition {
    pub field: String,
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub block: Block,
    pub kind: FieldKind,
    pub levels: Vec<Level>,
    pub pmt_stage: u8,
    #[serde(default)]
    pub skip_logic: bool,
    /// Stage at which a persona field is additionally read as theory evidence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theory_stage: Option<u8>,
    /// For skip-logic fields: the item is asked when any condition holds.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub applicable_when: Vec<Condition>,
}

impl FieldSpec {
    pub fn is_ordinal(&self) -> bool {
        self.kind == FieldKind::Ordinal
    }

    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    pub fn label(&self, code: Code) -> &str {
        &self.levels[code as usize].label
    }

    pub fn code_of(&self, label: &str) -> Option<Code> {
        self.levels.iter().position(|l| l.label == label).map(|i| i as Code)
    }

    /// Ordinal value (1-based) of a level; `None` for categorical fields.
    pub fn ordinal(&self, code: Code) -> Option<u8> {
        self.is_ordinal().then_some(code + 1)
    }

    pub fn is_target(&self) -> bool {
        self.block != Block::A
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageInfo {
    pub stage: u8,
    pub construct: String,
    pub role: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlagRules {
    pub income_field: String,
    /// Upper bound (USD) of each income bracket; `None` for open-ended brackets.
    pub income_upper_bounds: BTreeMap<String, Option<u64>>,
    pub low_income_max: u64,
    pub race_field: String,
    pub majority_race: String,
    pub housing_field: String,
    pub renter_labels: Vec<String>,
    pub health_field: String,
    pub no_difficulty_label: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sign {
    #[serde(rename = "+")]
    Positive,
    #[serde(rename = "-")]
    Negative,
}

impl Sign {
    pub fn matches(self, value: f64) -> bool {
        match self {
            Sign::Positive => value > 0.0,
            Sign::Negative => value < 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeSign {
    pub source: String,
    pub target: String,
    pub sign: Sign,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Codebook {
    pub version: String,
    pub fields: Vec<FieldSpec>,
    #[serde(default)]
    pub aliases: BTreeMap<String, String>,
    #[serde(default)]
    pub stages: Vec<StageInfo>,
    pub flag_rules: FlagRules,
    #[serde(default)]
    pub edge_signs: Vec<EdgeSign>,
    #[serde(default)]
    pub synonyms: BTreeMap<String, Vec<String>>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl PartialEq for Codebook {
    fn eq(&self, other: &Self) -> bool {
        self.version == other.version
            && self.fields == other.fields
            && self.aliases == other.aliases
            && self.flag_rules == other.flag_rules
            && self.edge_signs == other.edge_signs
    }
}

impl Codebook {
    pub fn from_json(text: &str) -> Result<Self> {
        let mut cb: Codebook = serde_json::from_str(text)?;
        cb.normalize()?;
        Ok(cb)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// The shipped Milton-style instrument.
    pub fn milton() -> Self {
        Self::from_json(crate::resources::CODEBOOK).expect("embedded codebook is valid")
    }

    fn normalize(&mut self) -> Result<()> {
        for f in &mut self.fields {
            if f.is_ordinal() {
                f.levels.sort_by_key(|l| l.ordinal);
            }
        }
        self.index = self.fields.iter().enumerate().map(|(i, f)| (f.name.clone(), i)).collect();
        self.validate()
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Codebook(m));
        if self.index.len() != self.fields.len() {
            return bad("field names are not unique".into());
        }
        for f in &self.fields {
            if f.levels.is_empty() {
                return bad(format!("field `{}` has no levels", f.name));
            }
            let labels: BTreeSet<&str> = f.levels.iter().map(|l| l.label.as_str()).collect();
            if labels.len() != f.levels.len() {
                return bad(format!("field `{}` has duplicate labels", f.name));
            }
            if f.is_ordinal() {
                if f.levels.len() > 5 {
                    return bad(format!("ordinal field `{}` has more than 5 levels", f.name));
                }
                for (i, l) in f.levels.iter().enumerate() {
                    if l.ordinal != Some(i as u8 + 1) {
                        return bad(format!("ordinal field `{}` levels are not contiguous from 1", f.name));
                    }
                }
            } else if f.levels.len() > u8::MAX as usize {
                return bad(format!("field `{}` has too many levels", f.name));
            }
            let stage_ok = match f.block {
                Block::A => f.pmt_stage == 0,
                Block::B => (1..=2).contains(&f.pmt_stage),
                Block::C => (3..=6).contains(&f.pmt_stage),
            };
            if !stage_ok {
                return bad(format!("field `{}` in block {} has stage {}", f.name, f.block, f.pmt_stage));
            }
            for c in &f.applicable_when {
                self.check_condition(c)?;
            }
        }
        for (alias, canon) in &self.aliases {
            if !self.index.contains_key(canon) {
                return bad(format!("alias `{alias}` points at unknown field `{canon}`"));
            }
        }
        for s in &self.edge_signs {
            for name in [&s.source, &s.target] {
                if self.field_index(name).is_none() {
                    return bad(format!("edge sign references unknown field `{name}`"));
                }
            }
        }
        let r = &self.flag_rules;
        for (field, labels) in [
            (&r.income_field, r.income_upper_bounds.keys().cloned().collect::<Vec<_>>()),
            (&r.race_field, vec![r.majority_race.clone()]),
            (&r.housing_field, r.renter_labels.clone()),
            (&r.health_field, vec![r.no_difficulty_label.clone()]),
        ] {
            self.check_condition(&Condition { field: field.clone(), labels })?;
        }
        Ok(())
    }

    /// Checks that a condition names a known field and known labels.
    pub fn check_condition(&self, c: &Condition) -> Result<()> {
        let idx = self.field_index(&c.field).ok_or_else(|| Error::UnknownField(c.field.clone()))?;
        for label in &c.labels {
            if self.fields[idx].code_of(label).is_none() {
                return Err(Error::Codebook(format!("`{label}` is not a level of `{}`", c.field)));
            }
        }
        Ok(())
    }

    /// Resolve a name or alias to its canonical field index.
    pub fn field_index(&self, name: &str) -> Option<usize> {
        self.index
            .get(name)
            .or_else(|| self.aliases.get(name).and_then(|c| self.index.get(c)))
            .copied()
    }

    pub fn require(&self, name: &str) -> Result<usize> {
        self.field_index(name).ok_or_else(|| Error::UnknownField(name.to_string()))
    }

    pub fn canonical_name(&self, name: &str) -> Option<&str> {
        self.field_index(name).map(|i| self.fields[i].name.as_str())
    }

    pub fn field(&self, idx: usize) -> &FieldSpec {
        &self.fields[idx]
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn block_fields(&self, block: Block) -> Vec<usize> {
        (0..self.fields.len()).filter(|&i| self.fields[i].block == block).collect()
    }

    /// Block B and C fields in canonical order: the prediction targets.
    pub fn target_fields(&self) -> Vec<usize> {
        (0..self.fields.len()).filter(|&i| self.fields[i].is_target()).collect()
    }

    pub fn stage_info(&self, stage: u8) -> Option<&StageInfo> {
        self.stages.iter().find(|s| s.stage == stage)
    }

    /// Stage at which a field enters theory-level commentary.
    pub fn theory_stage(&self, idx: usize) -> u8 {
        let f = &self.fields[idx];
        f.theory_stage.unwrap_or(f.pmt_stage)
    }

    pub fn declared_sign(&self, source: usize, target: usize) -> Option<Sign> {
        self.edge_signs
            .iter()
            .find(|s| {
                self.field_index(&s.source) == Some(source) && self.field_index(&s.target) == Some(target)
            })
            .map(|s| s.sign)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("codebook serializes")
    }

    /// Content hash over the canonical serialization.
    pub fn hash(&self) -> String {
        crate::rng::content_hash(self.to_json().as_bytes())
    }
}
