//! Prompted prediction of Block B/C answers from a persona.
//!
//! Eight configurations share one pipeline: assemble an evidence pack from
//! the training data, render a prompt, call a [`ChatProvider`], parse one
//! `Field: <integer>` line per target.

pub mod embed;
pub mod evidence;
pub mod parse;
pub mod provider;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ConditionalDistribution, CooccurrenceGraph, GraphVariant};
use crate::rng::stream;
use crate::survey::{Block, Code, Codebook, Dataset, Respondent};

pub use embed::{build_embedding_index, cosine, EmbeddingIndex, Embedder, HashedEmbedder};
pub use evidence::{
    check_labels, gower, nearest_peers, persona_text, vulnerability_deltas, Distribution, EvidencePack, Exemplar,
    ExemplarKind,
};
pub use parse::{parse_response, schema_targets, schema_text, target_specs, TargetSpec};
pub use provider::{
    request_key, ApiStyle, CannedProvider, ChatProvider, LiveProvider, RecordingProvider, ReplayProvider, ReplayRecord,
    StubProvider, DEFAULT_TEMPERATURE,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodKind {
    Zs,
    Fs,
    Er,
    Gr,
    Staged,
    Marginal,
    Atlm,
    Ve,
}

impl MethodKind {
    pub const ALL: [MethodKind; 8] = [
        MethodKind::Zs,
        MethodKind::Fs,
        MethodKind::Er,
        MethodKind::Gr,
        MethodKind::Staged,
        MethodKind::Marginal,
        MethodKind::Atlm,
        MethodKind::Ve,
    ];

    pub fn display_name(self) -> &'static str {
        match self {
            MethodKind::Zs => "ZS-LLM",
            MethodKind::Fs => "FS-LLM",
            MethodKind::Er => "ER-LLM",
            MethodKind::Gr => "GR-LLM",
            MethodKind::Staged => "Staged-TLM",
            MethodKind::Marginal => "Marginal-TLM",
            MethodKind::Atlm => "A-TLM",
            MethodKind::Ve => "VE-TLM",
        }
    }

    pub fn graph_variant(self) -> Option<GraphVariant> {
        match self {
            MethodKind::Zs | MethodKind::Fs | MethodKind::Er => None,
            MethodKind::Gr => Some(GraphVariant::DataDriven),
            MethodKind::Ve => Some(GraphVariant::Validated),
            MethodKind::Staged | MethodKind::Marginal | MethodKind::Atlm => Some(GraphVariant::Pmt),
        }
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.display_name())
    }
}

impl FromStr for MethodKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s.to_ascii_lowercase().chars().filter(|c| c.is_ascii_alphanumeric()).collect();
        Ok(match norm.as_str() {
            "zs" | "zsllm" => MethodKind::Zs,
            "fs" | "fsllm" => MethodKind::Fs,
            "er" | "erllm" => MethodKind::Er,
            "gr" | "grllm" => MethodKind::Gr,
            "staged" | "stagedtlm" => MethodKind::Staged,
            "marginal" | "marginaltlm" => MethodKind::Marginal,
            "atlm" => MethodKind::Atlm,
            "ve" | "vetlm" => MethodKind::Ve,
            _ => return Err(Error::Config(format!("unknown method `{s}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MethodConfig {
    pub kind: MethodKind,
    pub k_examples: usize,
    pub k_retrieval: usize,
    pub k_peers: usize,
    pub delta_threshold: f64,
    /// A-TLM components; both on for the full method.
    pub use_peers: bool,
    pub use_deltas: bool,
    pub temperature: f64,
    /// Per-field Gower weights for peer search (default 1).
    pub peer_weights: BTreeMap<String, f64>,
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self {
            kind: MethodKind::Marginal,
            k_examples: 5,
            k_retrieval: 5,
            k_peers: 5,
            delta_threshold: 0.10,
            use_peers: true,
            use_deltas: true,
            temperature: DEFAULT_TEMPERATURE,
            peer_weights: BTreeMap::new(),
        }
    }
}

impl MethodConfig {
    pub fn new(kind: MethodKind) -> Self {
        Self { kind, ..Default::default() }
    }

    /// A-TLM with a chosen subset of its two signals.
    pub fn atlm_variant(use_peers: bool, use_deltas: bool) -> Self {
        Self { kind: MethodKind::Atlm, use_peers, use_deltas, ..Default::default() }
    }

    pub fn tag(&self) -> String {
        match (self.kind, self.use_peers, self.use_deltas) {
            (MethodKind::Atlm, true, true) => "A-TLM".into(),
            (MethodKind::Atlm, true, false) => "Marginal+peers".into(),
            (MethodKind::Atlm, false, true) => "Marginal+deltas".into(),
            (MethodKind::Atlm, false, false) => "Marginal-TLM".into(),
            (k, _, _) => k.display_name().into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_examples == 0 || self.k_peers == 0 {
            return Err(Error::Config("k_examples and k_peers must be positive".into()));
        }
        if !(self.delta_threshold >= 0.0) {
            return Err(Error::Config("delta_threshold must be non-negative".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(Error::Config(format!("temperature {} out of range", self.temperature)));
        }
        Ok(())
    }
}

/// The respondent being predicted: known answers (Block A, plus observed
/// Block B/C cells in imputation runs) and the compound flag.
#[derive(Debug, Clone, PartialEq)]
pub struct Persona {
    pub id: String,
    pub answers: Vec<Option<Code>>,
    pub compound: bool,
}

impl Persona {
    /// Block A only.
    pub fn block_a(r: &Respondent, cb: &Codebook) -> Self {
        let answers = cb.fields.iter().zip(&r.answers).map(|(f, a)| if f.block == Block::A { *a } else { None }).collect();
        Self { id: r.id.clone(), answers, compound: r.flags.compound }
    }

    /// Every answer the respondent has.
    pub fn observed(r: &Respondent) -> Self {
        Self { id: r.id.clone(), answers: r.answers.clone(), compound: r.flags.compound }
    }

    fn evidence(&self, except: usize) -> Vec<(usize, Code)> {
        self.answers.iter().enumerate().filter(|&(f, _)| f != except).filter_map(|(f, a)| a.map(|c| (f, c))).collect()
    }
}

/// Training-side resources shared by all methods of a run.
pub struct TrainingContext {
    pub train: Arc<Dataset>,
    pub pmt: Arc<CooccurrenceGraph>,
    pub data_driven: Arc<CooccurrenceGraph>,
    pub validated: Arc<CooccurrenceGraph>,
    pub embedder: Arc<dyn Embedder>,
    pub index: EmbeddingIndex,
}

impl TrainingContext {
    pub fn new(train: Arc<Dataset>, embedder: Arc<dyn Embedder>) -> Result<Self> {
        check_labels(&train.codebook)?;
        let pmt = CooccurrenceGraph::build(&train)?;
        let validated = pmt.validated_subgraph(&train)?;
        let data_driven = CooccurrenceGraph::build_data_driven(&train)?;
        let index = build_embedding_index(&train, embedder.as_ref())?;
        Ok(Self {
            train,
            pmt: Arc::new(pmt),
            data_driven: Arc::new(data_driven),
            validated: Arc::new(validated),
            embedder,
            index,
        })
    }

    pub fn graph(&self, variant: GraphVariant) -> &Arc<CooccurrenceGraph> {
        match variant {
            GraphVariant::Pmt => &self.pmt,
            GraphVariant::Validated => &self.validated,
            GraphVariant::DataDriven => &self.data_driven,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub system: String,
    pub user: String,
    pub pack: Option<EvidencePack>,
    pub targets: Vec<TargetSpec>,
    /// Conditions worth surfacing, e.g. marginal fallbacks or an empty
    /// retrieval.
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub respondent: String,
    pub method: String,
    pub stage: Option<u8>,
    pub provider: String,
    pub system: String,
    pub user: String,
    /// Raw replies in order; two when the repair retry fired.
    pub responses: Vec<String>,
    pub flags: Vec<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub respondent: String,
    pub method: String,
    /// Ordinal answer per Block B/C field name.
    pub answers: BTreeMap<String, u8>,
    pub transcripts: Vec<Transcript>,
}

#[derive(Debug)]
pub struct PredictionFailure {
    pub error: Error,
    pub transcripts: Vec<Transcript>,
}

impl From<PredictionFailure> for Error {
    fn from(f: PredictionFailure) -> Self {
        f.error
    }
}

const SYSTEM_BASE: &str = "You simulate how a specific Florida resident answered a survey about daily time use and preparation for Hurricane Milton. \
Answer every listed item on its numeric scale. Reply only with the requested lines.";

fn system_text(config: &MethodConfig) -> String {
    let extra = match config.kind {
        MethodKind::Zs => "Rely on your general knowledge; no survey data is provided.",
        MethodKind::Fs => "Example respondents from the same survey are shown as input-output pairs.",
        MethodKind::Er => "Training respondents retrieved by profile similarity are shown with their answers.",
        MethodKind::Gr => "The evidence gives answer distributions among training respondents who share attributes with this person.",
        MethodKind::Staged => "Answer only the items of the current stage; earlier-stage answers are given as fixed upstream values.",
        MethodKind::Marginal | MethodKind::Ve => {
            "The evidence gives marginal and conditional answer distributions from a theory-ordered graph of training data. Weigh all of it in one judgement."
        }
        MethodKind::Atlm => {
            "The evidence gives marginal and conditional answer distributions from a theory-ordered graph of training data, the most similar training respondents, \
and for compound-vulnerable respondents a subgroup section. Treat the subgroup section as a soft directional cue rather than a numerical override."
        }
    };
    format!("{SYSTEM_BASE} {extra}")
}

fn to_distribution(c: &ConditionalDistribution) -> Distribution {
    Distribution {
        target: c.target.clone(),
        given: c.sources.iter().map(|s| (s.field.clone(), s.level.clone())).collect(),
        probabilities: c.probabilities.clone(),
        n: c.support_n,
        fallback: c.fallback.is_some(),
    }
}

/// A configured method bound to a training context and run seed.
pub struct Engine {
    pub config: MethodConfig,
    pub ctx: Arc<TrainingContext>,
    pub seed: u64,
    pub deltas: BTreeMap<String, f64>,
    fs_rows: Vec<usize>,
}

impl Engine {
    pub fn new(config: MethodConfig, ctx: Arc<TrainingContext>, seed: u64) -> Result<Self> {
        config.validate()?;
        let deltas = vulnerability_deltas(&ctx.train, config.delta_threshold);
        let n = ctx.train.len();
        let k = config.k_examples.min(n);
        let mut rng = stream(seed, &[b"fs-exemplars"]);
        let mut fs_rows = sample(&mut rng, n, k).into_vec();
        fs_rows.sort_unstable();
        Ok(Self { config, ctx, seed, deltas, fs_rows })
    }

    pub fn codebook(&self) -> &Arc<Codebook> {
        &self.ctx.train.codebook
    }

    /// Training rows used as few-shot exemplars (fixed per run seed).
    pub fn fs_rows(&self) -> &[usize] {
        &self.fs_rows
    }

    fn base_pack(&self, persona: &Persona) -> EvidencePack {
        let cb = self.codebook();
        EvidencePack {
            persona: evidence::profile(cb, &persona.answers),
            observed: cb
                .target_fields()
                .into_iter()
                .filter_map(|f| persona.answers[f].and_then(|c| cb.fields[f].ordinal(c)).map(|o| (cb.fields[f].name.clone(), o)))
                .collect(),
            ..Default::default()
        }
    }

    fn conditionals(&self, graph: &CooccurrenceGraph, persona: &Persona, targets: &[usize], flags: &mut Vec<String>) -> Result<Vec<Distribution>> {
        targets
            .iter()
            .map(|&t| {
                let c = graph.conditional(t, &persona.evidence(t))?;
                if c.fallback.is_some() {
                    flags.push(format!("{}: marginal fallback", c.target));
                }
                Ok(to_distribution(&c))
            })
            .collect()
    }

    fn render(&self, persona: &Persona, pack: Option<EvidencePack>, targets: Vec<usize>, flags: Vec<String>) -> Prompt {
        let cb = self.codebook();
        let specs = target_specs(cb, &targets);
        let schema = schema_text(cb, &specs);
        let user = match &pack {
            Some(p) => format!("Evidence for this respondent:\n{}\n\n{schema}", p.render()),
            None => {
                let mut s = format!("Respondent profile:\n{}", persona_text(cb, &persona.answers));
                let known: Vec<String> = cb
                    .target_fields()
                    .into_iter()
                    .filter_map(|f| persona.answers[f].and_then(|c| cb.fields[f].ordinal(c)).map(|o| format!("{}: {o}\n", cb.fields[f].name)))
                    .collect();
                if !known.is_empty() {
                    s.push_str("\nAnswers already given by this respondent:\n");
                    s.extend(known);
                }
                format!("{s}\n{schema}")
            }
        };
        Prompt { system: system_text(&self.config), user, pack, targets: specs, flags }
    }

    /// Single-call prompt for every method except Staged (which uses
    /// [`Engine::stage_prompt`]).
    pub fn prompt(&self, persona: &Persona) -> Result<Prompt> {
        let cb = self.codebook().clone();
        let train = &self.ctx.train;
        let targets = cb.target_fields();
        let mut flags = Vec::new();
        let pack = match self.config.kind {
            MethodKind::Zs => None,
            MethodKind::Fs => {
                let mut p = self.base_pack(persona);
                p.exemplar_kind = Some(ExemplarKind::Random);
                p.exemplars = self.fs_rows.iter().map(|&i| evidence::exemplar(&cb, &train.respondents[i], None)).collect();
                Some(p)
            }
            MethodKind::Er => {
                if self.config.k_retrieval == 0 {
                    flags.push("empty retrieval (k=0): prompt degenerates to zero-shot".into());
                    None
                } else {
                    let q = self.ctx.embedder.embed(&persona_text(&cb, &persona.answers))?;
                    let mut p = self.base_pack(persona);
                    p.exemplar_kind = Some(ExemplarKind::Retrieved);
                    p.exemplars = self
                        .ctx
                        .index
                        .retrieve(&q, self.config.k_retrieval)
                        .into_iter()
                        .map(|(i, s)| evidence::exemplar(&cb, &train.respondents[i], Some(s)))
                        .collect();
                    Some(p)
                }
            }
            MethodKind::Gr => {
                let mut p = self.base_pack(persona);
                p.conditionals = self.conditionals(&self.ctx.data_driven, persona, &targets, &mut flags)?;
                Some(p)
            }
            MethodKind::Staged => return Err(Error::Config("Staged-TLM uses stage prompts".into())),
            MethodKind::Marginal | MethodKind::Ve | MethodKind::Atlm => {
                let graph = self.ctx.graph(self.config.kind.graph_variant().unwrap());
                let mut p = self.base_pack(persona);
                p.marginals = targets.iter().map(|&t| graph.marginal(t).map(|m| to_distribution(&m))).collect::<Result<_>>()?;
                p.conditionals = self.conditionals(graph, persona, &targets, &mut flags)?;
                if self.config.kind == MethodKind::Atlm {
                    if self.config.use_peers {
                        p.exemplar_kind = Some(ExemplarKind::Peers);
                        p.exemplars = nearest_peers(&persona.answers, train, self.config.k_peers, &self.config.peer_weights)
                            .into_iter()
                            .map(|(r, d)| evidence::exemplar(&cb, r, Some(d)))
                            .collect();
                    }
                    if self.config.use_deltas && persona.compound {
                        p.deltas = self.deltas.iter().map(|(k, v)| (k.clone(), *v)).collect();
                    }
                }
                Some(p)
            }
        };
        Ok(self.render(persona, pack, targets, flags))
    }

    /// Prompt for one cascade stage given committed upstream answers.
    pub fn stage_prompt(&self, persona: &Persona, stage: u8, upstream: &BTreeMap<String, u8>) -> Result<Prompt> {
        let cb = self.codebook().clone();
        let targets: Vec<usize> = cb.target_fields().into_iter().filter(|&f| cb.fields[f].pmt_stage == stage).collect();
        let mut conditioned = persona.clone();
        let mut up = Vec::new();
        for (name, &ord) in upstream {
            let f = cb.require(name)?;
            if conditioned.answers[f].is_none() {
                let code = cb.fields[f].levels.iter().position(|l| l.ordinal == Some(ord)).ok_or_else(|| {
                    Error::Parse(format!("{name}: upstream ordinal {ord} has no level"))
                })? as Code;
                conditioned.answers[f] = Some(code);
                up.push((name.clone(), ord));
            }
        }
        let mut flags = Vec::new();
        let mut p = self.base_pack(persona);
        p.conditionals = self.conditionals(&self.ctx.pmt, &conditioned, &targets, &mut flags)?;
        p.upstream = up;
        Ok(self.render(persona, Some(p), targets, flags))
    }

    fn exchange(
        &self,
        persona: &Persona,
        prompt: &Prompt,
        stage: Option<u8>,
        provider: &dyn ChatProvider,
    ) -> (std::result::Result<BTreeMap<String, u8>, Error>, Transcript) {
        let mut t = Transcript {
            respondent: persona.id.clone(),
            method: self.config.tag(),
            stage,
            provider: provider.id(),
            system: prompt.system.clone(),
            user: prompt.user.clone(),
            responses: Vec::new(),
            flags: prompt.flags.clone(),
            error: None,
        };
        let temp = self.config.temperature;
        let first = match provider.complete(&prompt.system, &prompt.user, temp) {
            Ok(r) => r,
            Err(e) => {
                t.error = Some(e.to_string());
                return (Err(e), t);
            }
        };
        t.responses.push(first.clone());
        let err = match parse_response(&first, &prompt.targets) {
            Ok(a) => return (Ok(a), t),
            Err(e) => e,
        };
        let repair = format!(
            "{}\n\nYour previous reply could not be used ({err}). Reply again with exactly one `Field: <integer>` line for every field listed above, using only the allowed values.",
            prompt.user
        );
        let second = match provider.complete(&prompt.system, &repair, temp) {
            Ok(r) => r,
            Err(e) => {
                t.error = Some(e.to_string());
                return (Err(e), t);
            }
        };
        t.responses.push(second.clone());
        let out = parse_response(&second, &prompt.targets);
        if let Err(e) = &out {
            t.error = Some(e.to_string());
        }
        (out, t)
    }

    pub fn predict(&self, persona: &Persona, provider: &dyn ChatProvider) -> std::result::Result<PredictionSet, PredictionFailure> {
        if self.config.kind == MethodKind::Staged {
            return self.staged(persona, provider);
        }
        let prompt = self.prompt(persona).map_err(|error| PredictionFailure { error, transcripts: Vec::new() })?;
        let (answers, t) = self.exchange(persona, &prompt, None, provider);
        match answers {
            Ok(answers) => Ok(PredictionSet { respondent: persona.id.clone(), method: self.config.tag(), answers, transcripts: vec![t] }),
            Err(error) => Err(PredictionFailure { error, transcripts: vec![t] }),
        }
    }

    /// Six sequential stage calls; each stage conditions on the answers
    /// committed by earlier stages.
    pub fn staged(&self, persona: &Persona, provider: &dyn ChatProvider) -> std::result::Result<PredictionSet, PredictionFailure> {
        let mut committed = BTreeMap::new();
        let mut transcripts = Vec::new();
        let mut stages: Vec<u8> = self.codebook().target_fields().iter().map(|&f| self.codebook().fields[f].pmt_stage).collect();
        stages.sort_unstable();
        stages.dedup();
        for stage in stages {
            let prompt = match self.stage_prompt(persona, stage, &committed) {
                Ok(p) => p,
                Err(error) => return Err(PredictionFailure { error, transcripts }),
            };
            let (answers, t) = self.exchange(persona, &prompt, Some(stage), provider);
            transcripts.push(t);
            match answers {
                Ok(a) => committed.extend(a),
                Err(error) => return Err(PredictionFailure { error, transcripts }),
            }
        }
        Ok(PredictionSet { respondent: persona.id.clone(), method: self.config.tag(), answers: committed, transcripts })
    }

    /// Predict for many personas in parallel; results keep input order.
    pub fn predict_all(
        &self,
        personas: &[Persona],
        provider: &dyn ChatProvider,
    ) -> Vec<std::result::Result<PredictionSet, PredictionFailure>> {
        personas.par_iter().map(|p| self.predict(p, provider)).collect()
    }
}

/// Append transcripts as JSON lines.
pub fn write_transcripts<W: std::io::Write>(mut w: W, sets: &[PredictionSet]) -> Result<()> {
    for s in sets {
        for t in &s.transcripts {
            serde_json::to_writer(&mut w, t)?;
            w.write_all(b"\n")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests;
