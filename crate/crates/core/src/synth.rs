//! Synthetic survey generator with a linear latent cascade.
//!
//! Block A answers are drawn from independent marginals. Each Block B/C
//! field has a latent score that is a weighted sum of encoded upstream
//! answers plus Gaussian noise, standardized and cut at equal-probability
//! normal quantiles into 1..K. Compound-vulnerable respondents receive a
//! per-field shift expressed in Likert units.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::survey::{derive_flags, Block, Code, Codebook, Dataset, Provenance};

/// Ordinal-mean change per unit latent shift for five equal-probability
/// bins of a standard normal: `2·(φ(Φ⁻¹(0.2)) + φ(Φ⁻¹(0.4)))`.
pub const LIKERT_PER_SD: f64 = 1.3326;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EffectForm {
    #[default]
    Linear,
    /// `+1` when the source's 1-based level exceeds `above`, else `-1`.
    Step { above: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeEffect {
    pub source: String,
    pub target: String,
    pub coef: f64,
    #[serde(default, skip_serializing_if = "is_linear")]
    pub form: EffectForm,
}

fn is_linear(f: &EffectForm) -> bool {
    *f == EffectForm::Linear
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n: usize,
    pub seed: u64,
    /// Level probabilities for every Block A field, in codebook level order.
    pub marginals: BTreeMap<String, Vec<f64>>,
    pub cascade: Vec<CascadeEffect>,
    #[serde(default)]
    pub noise_sd: BTreeMap<String, f64>,
    #[serde(default = "one")]
    pub default_noise_sd: f64,
    #[serde(default)]
    pub vulnerable_shift: BTreeMap<String, f64>,
    pub vulnerable_fraction: f64,
}

fn one() -> f64 {
    1.0
}

impl GeneratorConfig {
    pub fn milton_like() -> Self {
        serde_json::from_str(crate::resources::SYNTH_MILTON_LIKE).expect("embedded generator config")
    }

    pub fn with_n_seed(mut self, n: usize, seed: u64) -> Self {
        self.n = n;
        self.seed = seed;
        self
    }

    pub fn noise_for(&self, field: &str) -> f64 {
        self.noise_sd.get(field).copied().unwrap_or(self.default_noise_sd)
    }

    /// Compound fraction implied by the Block A marginals under independence.
    pub fn implied_compound_fraction(&self, cb: &Codebook) -> Result<f64> {
        let r = &cb.flag_rules;
        let share = |field: &str, pred: &dyn Fn(&str) -> bool| -> Result<f64> {
            let idx = cb.require(field)?;
            let probs = self
                .marginals
                .get(&cb.fields[idx].name)
                .ok_or_else(|| Error::Config(format!("no marginal for `{field}`")))?;
            Ok(cb.fields[idx]
                .levels
                .iter()
                .zip(probs)
                .filter(|(l, _)| pred(&l.label))
                .map(|(_, p)| p)
                .sum())
        };
        let p = [
            share(&r.income_field, &|l| {
                r.income_upper_bounds.get(l).copied().flatten().is_some_and(|u| u <= r.low_income_max)
            })?,
            share(&r.race_field, &|l| l != r.majority_race)?,
            share(&r.housing_field, &|l| r.renter_labels.iter().any(|x| x == l))?,
            share(&r.health_field, &|l| l != r.no_difficulty_label)?,
        ];
        let mut total = 0.0;
        for bits in 0u8..16 {
            if bits.count_ones() >= 2 {
                total += (0..4).map(|k| if bits & (1 << k) != 0 { p[k] } else { 1.0 - p[k] }).product::<f64>();
            }
        }
        Ok(total)
    }

    pub fn validate(&self, cb: &Codebook) -> Result<()> {
        for &i in &cb.block_fields(Block::A) {
            let f = &cb.fields[i];
            let probs = self
                .marginals
                .get(&f.name)
                .ok_or_else(|| Error::Config(format!("no marginal for Block A field `{}`", f.name)))?;
            if probs.len() != f.level_count() {
                return Err(Error::Config(format!(
                    "marginal for `{}` has {} entries, field has {} levels",
                    f.name,
                    probs.len(),
                    f.level_count()
                )));
            }
            let sum: f64 = probs.iter().sum();
            if probs.iter().any(|p| *p < 0.0) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("marginals for `{}` sum to {sum}, not 1", f.name)));
            }
        }
        for name in self.marginals.keys() {
            let idx = cb.require(name)?;
            if cb.fields[idx].block != Block::A {
                return Err(Error::Config(format!("marginal given for non-persona field `{name}`")));
            }
        }
        for e in &self.cascade {
            let s = cb.require(&e.source)?;
            let t = cb.require(&e.target)?;
            if cb.fields[s].pmt_stage >= cb.fields[t].pmt_stage {
                return Err(Error::Config(format!("effect {} -> {} is not stage-increasing", e.source, e.target)));
            }
        }
        for name in self.vulnerable_shift.keys().chain(self.noise_sd.keys()) {
            let idx = cb.require(name)?;
            if cb.fields[idx].block == Block::A {
                return Err(Error::Config(format!("`{name}` is a persona field")));
            }
        }
        if self.noise_sd.values().chain([&self.default_noise_sd]).any(|s| *s < 0.0) {
            return Err(Error::Config("noise sd must be non-negative".into()));
        }
        let implied = self.implied_compound_fraction(cb)?;
        if (implied - self.vulnerable_fraction).abs() > 0.05 {
            return Err(Error::Config(format!(
                "marginals imply compound fraction {implied:.3}, target {:.3} is more than 5pp away",
                self.vulnerable_fraction
            )));
        }
        Ok(())
    }
}

/// Standardized numeric encoding of a level index for a field with `levels`
/// levels (zero mean, unit variance under a uniform level distribution).
pub fn encode_level(code: Code, levels: usize) -> f64 {
    if levels < 2 {
        return 0.0;
    }
    let l = levels as f64;
    (code as f64 - (l - 1.0) / 2.0) / ((l * l - 1.0) / 12.0).sqrt()
}

/// Cut points `Φ⁻¹(i/K)`, `i = 1..K-1`.
pub fn thresholds(levels: usize) -> Vec<f64> {
    let normal = Normal::standard();
    (1..levels).map(|i| normal.inverse_cdf(i as f64 / levels as f64)).collect()
}

fn discretize(z: f64, cuts: &[f64]) -> Code {
    cuts.iter().take_while(|&&c| z > c).count() as Code
}

struct Plan {
    targets: Vec<TargetPlan>,
    skip_conditions: Vec<(usize, Vec<(usize, Vec<Code>)>)>,
}

struct TargetPlan {
    field: usize,
    effects: Vec<(usize, f64, EffectForm)>,
    noise: f64,
    scale: f64,
    shift: f64,
    cuts: Vec<f64>,
}

fn plan(config: &GeneratorConfig, cb: &Codebook) -> Result<Plan> {
    let mut order = cb.target_fields();
    order.sort_by_key(|&i| (cb.fields[i].pmt_stage, i));
    let mut targets = Vec::new();
    for field in order {
        let name = &cb.fields[field].name;
        let mut effects = Vec::new();
        for e in &config.cascade {
            if cb.require(&e.target)? == field {
                effects.push((cb.require(&e.source)?, e.coef, e.form));
            }
        }
        let noise = config.noise_for(name);
        let var: f64 = effects.iter().map(|(_, c, _)| c * c).sum::<f64>() + noise * noise;
        let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
        targets.push(TargetPlan {
            field,
            effects,
            noise,
            scale,
            shift: config.vulnerable_shift.get(name).copied().unwrap_or(0.0) / LIKERT_PER_SD,
            cuts: thresholds(cb.fields[field].level_count()),
        });
    }
    let mut skip_conditions = Vec::new();
    for (i, f) in cb.fields.iter().enumerate() {
        if f.skip_logic && !f.applicable_when.is_empty() {
            let mut conds = Vec::new();
            for c in &f.applicable_when {
                let idx = cb.require(&c.field)?;
                conds.push((idx, c.labels.iter().filter_map(|l| cb.fields[idx].code_of(l)).collect()));
            }
            skip_conditions.push((i, conds));
        }
    }
    Ok(Plan { targets, skip_conditions })
}

fn draw_categorical<R: Rng>(rng: &mut R, probs: &[f64]) -> Code {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i as Code;
        }
    }
    (probs.len() - 1) as Code
}

/// Draw the Block A answers of respondent `index`.
pub fn sample_block_a(config: &GeneratorConfig, cb: &Codebook, index: usize) -> Vec<Option<Code>> {
    let mut rng = stream(config.seed, &[b"persona", &(index as u64).to_le_bytes()]);
    let mut answers = vec![None; cb.len()];
    for i in cb.block_fields(Block::A) {
        answers[i] = Some(draw_categorical(&mut rng, &config.marginals[&cb.fields[i].name]));
    }
    answers
}

fn source_value(cb: &Codebook, answers: &[Option<Code>], field: usize, form: EffectForm) -> f64 {
    let Some(code) = answers[field] else { return 0.0 };
    match form {
        EffectForm::Linear => encode_level(code, cb.fields[field].level_count()),
        EffectForm::Step { above } => {
            if code as f64 + 1.0 > above {
                1.0
            } else {
                -1.0
            }
        }
    }
}

fn complete_one(config: &GeneratorConfig, cb: &Codebook, plan: &Plan, id: &str, answers: &mut [Option<Code>]) {
    let (flags, _) = derive_flags(answers, cb);
    let mut rng = stream(config.seed, &[b"cascade", id.as_bytes()]);
    for t in &plan.targets {
        let eps: f64 = rng.sample(StandardNormal);
        let mut z: f64 = t.effects.iter().map(|&(s, c, form)| c * source_value(cb, answers, s, form)).sum();
        z += t.noise * eps;
        z /= t.scale;
        if flags.compound {
            z += t.shift;
        }
        answers[t.field] = Some(discretize(z, &t.cuts));
    }
    for (field, conds) in &plan.skip_conditions {
        let applies = conds.iter().any(|(f, codes)| answers[*f].is_some_and(|c| codes.contains(&c)));
        if !applies {
            answers[*field] = None;
        }
    }
}

/// Fill Block B/C for respondents whose Block A answers are given.
pub fn complete_responses(
    config: &GeneratorConfig,
    cb: Arc<Codebook>,
    personas: Vec<(String, Vec<Option<Code>>)>,
) -> Result<Dataset> {
    let plan = plan(config, &cb)?;
    let rows: Vec<(String, Vec<Option<Code>>)> = personas
        .into_par_iter()
        .map(|(id, mut answers)| {
            complete_one(config, &cb, &plan, &id, &mut answers);
            (id, answers)
        })
        .collect();
    Ok(Dataset::from_answers(cb, rows, Provenance::Synthetic))
}

pub fn respondent_id(index: usize) -> String {
    format!("S{:05}", index + 1)
}

pub fn generate(config: &GeneratorConfig, cb: Arc<Codebook>) -> Result<Dataset> {
    config.validate(&cb)?;
    let personas = (0..config.n)
        .into_par_iter()
        .map(|i| (respondent_id(i), sample_block_a(config, &cb, i)))
        .collect();
    complete_responses(config, cb, personas)
}

pub mod fixtures {
    //! Builders for the shipped fixture files.

    use rand::seq::SliceRandom;

    use super::*;

    /// Exact level counts per Block A field for the 946-respondent fixture.
    /// Race and Hispanic are assigned jointly.
    const EXACT_COUNTS: &[(&str, &[(&str, usize)])] = &[
        (
            "Income",
            &[
                ("Under $20,000", 120),
                ("$20,000–$34,999", 141),
                ("$35,000–$45,999", 100),
                ("$46,000–$74,999", 236),
                ("$75,000–$149,999", 250),
                ("$150,000 or more", 99),
            ],
        ),
        (
            "Housing",
            &[
                ("Single-family home", 520),
                ("Condo or townhouse", 80),
                ("Apartment", 260),
                ("Mobile home", 63),
                ("Other", 23),
            ],
        ),
        (
            "Health_Issue",
            &[
                ("No difficulties experienced", 671),
                ("Mobility difficulty", 90),
                ("Chronic illness", 130),
                ("Other difficulty", 55),
            ],
        ),
    ];

    /// (Race, Hispanic, count)
    const ETHNICITY: &[(&str, &str, usize)] = &[
        ("White", "No", 631),
        ("White", "Yes", 60),
        ("Other", "Yes", 42),
        ("Black", "No", 161),
        ("Asian", "No", 33),
        ("Other", "No", 19),
    ];

    pub const MILTON_N: usize = 946;

    /// A 946-respondent dataset whose subgroup composition reproduces the
    /// published sample percentages.
    pub fn milton_like(cb: Arc<Codebook>, seed: u64) -> Result<Dataset> {
        let config = GeneratorConfig::milton_like().with_n_seed(MILTON_N, seed);
        config.validate(&cb)?;
        let mut personas: Vec<Vec<Option<Code>>> =
            (0..MILTON_N).map(|i| sample_block_a(&config, &cb, i)).collect();

        let mut assign = |field_names: &[&str], rows: Vec<Vec<&str>>, tag: &str| -> Result<()> {
            let idx: Vec<usize> = field_names.iter().map(|f| cb.require(f)).collect::<Result<_>>()?;
            let mut rows = rows;
            rows.shuffle(&mut stream(seed, &[b"fixture", tag.as_bytes()]));
            for (p, labels) in personas.iter_mut().zip(rows) {
                for (&f, l) in idx.iter().zip(labels) {
                    p[f] = Some(cb.fields[f].code_of(l).ok_or_else(|| Error::Codebook(l.to_string()))?);
                }
            }
            Ok(())
        };

        let eth: Vec<Vec<&str>> =
            ETHNICITY.iter().flat_map(|&(r, h, n)| std::iter::repeat_n(vec![r, h], n)).collect();
        assign(&["Race", "Hispanic"], eth, "ethnicity")?;
        for (field, counts) in EXACT_COUNTS {
            let rows: Vec<Vec<&str>> = counts.iter().flat_map(|&(l, n)| std::iter::repeat_n(vec![l], n)).collect();
            assign(&[field], rows, field)?;
        }
        let rows = personas.into_iter().enumerate().map(|(i, a)| (format!("M{:04}", i + 1), a)).collect();
        let mut ds = complete_responses(&config, cb, rows)?;
        ds.provenance = Provenance::Synthetic;
        Ok(ds)
    }

    /// 189 respondents, exactly `compound` of them compound-vulnerable.
    /// Compound respondents always have a dependent so that every Block C
    /// item applies to them.
    pub fn validation(cb: Arc<Codebook>, seed: u64, n: usize, compound: usize) -> Result<Dataset> {
        let config = GeneratorConfig::milton_like().with_n_seed(n, seed);
        config.validate(&cb)?;
        let dep = cb.require("Dep_Children")?;
        let yes = cb.fields[dep].code_of("Yes").ok_or_else(|| Error::Codebook("Dep_Children=Yes".into()))?;
        let (mut comp, mut rest) = (Vec::new(), Vec::new());
        let mut i = 0;
        while comp.len() < compound || rest.len() < n - compound {
            let mut a = sample_block_a(&config, &cb, i);
            i += 1;
            if derive_flags(&a, &cb).0.compound {
                if comp.len() < compound {
                    a[dep] = Some(yes);
                    comp.push(a);
                }
            } else if rest.len() < n - compound {
                rest.push(a);
            }
        }
        let mut all: Vec<Vec<Option<Code>>> = comp.into_iter().chain(rest).collect();
        all.shuffle(&mut stream(seed, &[b"fixture", b"validation-order"]));
        let rows = all.into_iter().enumerate().map(|(i, a)| (format!("V{:03}", i + 1), a)).collect();
        complete_responses(&config, cb, rows)
    }

    pub const FIXTURE_SEED: u64 = 2024;
    pub const VALIDATION_N: usize = 189;
    pub const VALIDATION_COMPOUND: usize = 72;

    /// Training split of the 946-row fixture with a split ballot:
    /// `Hurricane_Experience` is recorded only on odd rows and `Prep_Start`
    /// only on even rows, so the two are never observed jointly.
    pub fn assistant_training(cb: Arc<Codebook>, seed: u64) -> Result<Dataset> {
        let full = milton_like(cb.clone(), seed)?;
        let (mut train, _) = crate::survey::split(&full, seed, 0.8)?;
        let exp = cb.require("Hurricane_Experience")?;
        let start = cb.require("Prep_Start")?;
        for (i, r) in train.respondents.iter_mut().enumerate() {
            r.answers[if i % 2 == 0 { exp } else { start }] = None;
        }
        Ok(train)
    }
}
