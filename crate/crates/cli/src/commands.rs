//! One function per subcommand. Each artifact-producing command writes into
//! `<out>/<command>-<manifest id>/` and prints that directory on stdout.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{info, warn};
use serde::Serialize;
use serde_json::{json, Value};

use pmtkg::audit::{audit_instrument, compute_gap, gap_table, percents, validate_prior, ConstructAudit, ConstructDefs, CoveragePrior};
use pmtkg::eval::{evaluate_stage3, run_benchmark, BenchmarkConfig, MaskScope, MethodSpec};
use pmtkg::graph::{CooccurrenceGraph, GraphVariant};
use pmtkg::impute::{ipw_mi, mean_impute, mice_pmm, missforest};
use pmtkg::llm::{
    CannedProvider, ChatProvider, Embedder, Engine, HashedEmbedder, LiveProvider, MethodConfig, MethodKind, Persona,
    RecordingProvider, ReplayProvider, StubProvider, TrainingContext,
};
use pmtkg::missing::{apply, mask_association, MaskedDataset, MissingnessMask};
use pmtkg::resources;
use pmtkg::rng::derive_seed;
use pmtkg::survey::{read_records, sample_composition, subgroup_defs_milton, Block, Code, Codebook, Dataset, Provenance, SubgroupDef};
use pmtkg::synth::{generate, GeneratorConfig};
use pmtkg::{Error, Result};
use pmtkg_assistant::service::{load_state, serve};

use crate::config::{CliConfig, ImputeMethod, ProviderConfig, ProviderKind};
use crate::manifest::{InputRef, RunManifest};
use crate::{
    AblationArgs, AuditArgs, BenchmarkArgs, Cli, Command, CoverageArgs, EvaluateArgs, GraphBuildArgs, GraphCommand,
    GraphFileArgs, GraphQueryArgs, ImputeArgs, IngestArgs, PredictArgs, ProviderArgs, ServeArgs, SimulateArgs, SynthArgs,
};

struct Ctx {
    cfg: CliConfig,
    out: PathBuf,
    cb: Arc<Codebook>,
    cb_input: InputRef,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn json_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("config serializes")
}

fn pretty<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s.into_bytes())
}

impl Ctx {
    fn new(cli: &Cli) -> Result<Self> {
        let mut cfg = CliConfig::load(cli.config.as_deref())?;
        if let Some(cb) = &cli.codebook {
            cfg.codebook = Some(cb.clone());
        }
        let (cb, cb_input) = match &cfg.codebook {
            Some(p) => {
                let bytes = read(p)?;
                let cb = Codebook::from_json(std::str::from_utf8(&bytes).map_err(|e| Error::Codebook(e.to_string()))?)?;
                (cb, InputRef::new("codebook", p.display().to_string(), &bytes))
            }
            None => (Codebook::milton(), InputRef::new("codebook", "builtin:codebook.json", resources::CODEBOOK.as_bytes())),
        };
        let out = cli.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
        Ok(Ctx { cfg, out, cb: Arc::new(cb), cb_input })
    }

    fn records(&self, role: &str, path: Option<&Path>, builtin: (&str, &str)) -> Result<(Dataset, InputRef)> {
        match path {
            Some(p) => {
                let bytes = read(p)?;
                let ds = read_records(bytes.as_slice(), self.cb.clone(), Provenance::Real)?;
                Ok((ds, InputRef::new(role, p.display().to_string(), &bytes)))
            }
            None => {
                let ds = read_records(builtin.1.as_bytes(), self.cb.clone(), Provenance::Synthetic)?;
                Ok((ds, InputRef::new(role, format!("builtin:{}", builtin.0), builtin.1.as_bytes())))
            }
        }
    }

    /// Manifest and freshly created run directory.
    fn start(&self, command: &str, config: Value, mut inputs: Vec<InputRef>, seeds: Vec<u64>) -> Result<Run> {
        inputs.insert(0, self.cb_input.clone());
        let manifest = RunManifest::new(command, config, inputs, seeds);
        let dir = manifest.run_dir(&self.out);
        std::fs::create_dir_all(&dir)?;
        info!("{command}: writing to {}", dir.display());
        Ok(Run { manifest, dir, written: Vec::new() })
    }
}

const FIXTURE_946: (&str, &str) = ("milton_like_946.csv", resources::MILTON_LIKE_946);
const FIXTURE_189: (&str, &str) = ("validation_189.csv", resources::VALIDATION_189);

struct Run {
    manifest: RunManifest,
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl Run {
    fn put(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let p = self.dir.join(name);
        std::fs::write(&p, bytes)?;
        self.written.push(p);
        Ok(())
    }

    fn finish(mut self) -> Result<PathBuf> {
        self.manifest.finish(&self.dir, &self.written)?;
        println!("{}", self.dir.display());
        Ok(self.dir)
    }
}

fn chat_provider(cfg: &ProviderConfig, args: &ProviderArgs) -> Result<(Box<dyn ChatProvider>, ProviderConfig)> {
    let eff = ProviderConfig {
        kind: args.provider.unwrap_or(cfg.kind),
        replay_dir: args.replay_dir.clone().unwrap_or_else(|| cfg.replay_dir.clone()),
    };
    let p: Box<dyn ChatProvider> = match eff.kind {
        ProviderKind::Stub => Box::new(StubProvider),
        ProviderKind::Replay => Box::new(ReplayProvider::new(eff.replay_dir.clone())),
        ProviderKind::Live => Box::new(RecordingProvider::new(LiveProvider::from_env()?, eff.replay_dir.clone())?),
    };
    Ok((p, eff))
}

fn embedder() -> Arc<dyn Embedder> {
    Arc::new(HashedEmbedder::default())
}

pub fn run(cli: &Cli) -> Result<()> {
    let ctx = Ctx::new(cli)?;
    match &cli.command {
        Command::Ingest(a) => ingest(&ctx, a),
        Command::Synth(a) => synth(&ctx, a),
        Command::Graph { command } => match command {
            GraphCommand::Build(a) => graph_build(&ctx, a),
            GraphCommand::Stats(a) => graph_stats(&ctx, a),
            GraphCommand::Query(a) => graph_query(&ctx, a),
        },
        Command::Simulate(a) => simulate(&ctx, a),
        Command::Impute(a) => impute(&ctx, a),
        Command::Predict(a) => predict(&ctx, a),
        Command::Evaluate(a) => evaluate(&ctx, a),
        Command::Benchmark(a) => benchmark(&ctx, a),
        Command::Ablation(a) => ablation(&ctx, a),
        Command::Audit(a) => audit(&ctx, a),
        Command::Coverage(a) => coverage(&ctx, a),
        Command::Serve(a) => serve_cmd(&ctx, a),
    }
}

fn ingest(ctx: &Ctx, a: &IngestArgs) -> Result<()> {
    let (ds, input) = ctx.records("records", Some(&a.records), FIXTURE_946)?;
    let mut inputs = vec![input];
    let defs: Vec<SubgroupDef> = match &a.subgroups {
        Some(p) => {
            let bytes = read(p)?;
            inputs.push(InputRef::new("subgroups", p.display().to_string(), &bytes));
            serde_json::from_slice(&bytes)?
        }
        None => subgroup_defs_milton(),
    };
    let composition = sample_composition(&ds, &defs)?;
    let cb = &ds.codebook;
    let fields: Vec<Value> = cb
        .fields
        .iter()
        .enumerate()
        .map(|(f, spec)| {
            let observed = ds.respondents.iter().filter(|r| r.answers[f].is_some()).count();
            json!({ "field": spec.name, "block": spec.block, "observed": observed, "blank": ds.len() - observed })
        })
        .collect();
    let compound = ds.respondents.iter().filter(|r| r.flags.compound).count();
    let summary = json!({ "respondents": ds.len(), "compound": compound, "fields": fields });

    let mut run = ctx.start("ingest", json!({ "subgroups": defs }), inputs, vec![])?;
    run.put("records.csv", ds.to_csv_string().as_bytes())?;
    run.put("composition.json", &pretty(&composition)?)?;
    run.put("summary.json", &pretty(&summary)?)?;
    run.finish()?;
    Ok(())
}

fn synth(ctx: &Ctx, a: &SynthArgs) -> Result<()> {
    let sc = &ctx.cfg.synth;
    let mut inputs = Vec::new();
    let mut g = match a.generator.as_ref().or(sc.generator.as_ref()) {
        Some(p) => {
            let bytes = read(p)?;
            inputs.push(InputRef::new("generator", p.display().to_string(), &bytes));
            serde_json::from_slice(&bytes)?
        }
        None => GeneratorConfig::milton_like(),
    };
    if let Some(n) = a.n.or(sc.n) {
        g.n = n;
    }
    if let Some(s) = a.seed.or(sc.seed) {
        g.seed = s;
    }
    for (k, v) in sc.vulnerable_shift.iter().map(|(k, v)| (k.clone(), *v)).chain(a.shifts.iter().cloned()) {
        g.vulnerable_shift.insert(k, v);
    }
    let ds = generate(&g, ctx.cb.clone())?;
    let mut run = ctx.start("synth", json_value(&g), inputs, vec![g.seed])?;
    run.put("records.csv", ds.to_csv_string().as_bytes())?;
    run.put("generator_config.json", &pretty(&g)?)?;
    run.finish()?;
    Ok(())
}

fn graph_stats_json(g: &CooccurrenceGraph) -> Value {
    json!({
        "graph_hash": g.hash(),
        "variant": g.variant,
        "built_from_n": g.built_from_n,
        "codebook_hash": g.codebook().hash(),
        "stats": g.stats,
    })
}

fn load_graph(ctx: &Ctx, path: &Path) -> Result<(CooccurrenceGraph, InputRef)> {
    let bytes = read(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok((CooccurrenceGraph::from_json(text, ctx.cb.clone())?, InputRef::new("graph", path.display().to_string(), &bytes)))
}

fn graph_build(ctx: &Ctx, a: &GraphBuildArgs) -> Result<()> {
    let (ds, input) = ctx.records("records", a.records.as_deref(), FIXTURE_946)?;
    let variant = a.variant.unwrap_or(ctx.cfg.graph.variant);
    let alpha = a.alpha.unwrap_or(ctx.cfg.graph.alpha);
    let g = match variant {
        GraphVariant::Validated => CooccurrenceGraph::build_with(&ds, GraphVariant::Pmt, alpha)?.validated_subgraph(&ds)?,
        v => CooccurrenceGraph::build_with(&ds, v, alpha)?,
    };
    let mut run = ctx.start("graph build", json!({ "variant": variant, "alpha": alpha }), vec![input], vec![])?;
    run.put("graph.json", g.to_json().as_bytes())?;
    run.put("stats.json", &pretty(&graph_stats_json(&g))?)?;
    run.finish()?;
    Ok(())
}

fn graph_stats(ctx: &Ctx, a: &GraphFileArgs) -> Result<()> {
    let (g, input) = load_graph(ctx, &a.graph)?;
    let mut run = ctx.start("graph stats", Value::Null, vec![input], vec![])?;
    run.put("stats.json", &pretty(&graph_stats_json(&g))?)?;
    run.finish()?;
    Ok(())
}

/// A level given by label or by ordinal.
fn level_code(cb: &Codebook, field: usize, level: &str) -> Result<Code> {
    let spec = &cb.fields[field];
    if let Some(c) = spec.code_of(level) {
        return Ok(c);
    }
    level
        .parse::<u8>()
        .ok()
        .and_then(|o| spec.levels.iter().position(|l| l.ordinal == Some(o)))
        .map(|c| c as Code)
        .ok_or_else(|| Error::Config(format!("`{level}` is not a level of {}", spec.name)))
}

fn graph_query(ctx: &Ctx, a: &GraphQueryArgs) -> Result<()> {
    let (g, input) = load_graph(ctx, &a.graph)?;
    let cb = g.codebook().clone();
    let target = cb.require(&a.target)?;
    let evidence =
        a.given.iter().map(|(f, l)| -> Result<(usize, Code)> { let i = cb.require(f)?; Ok((i, level_code(&cb, i, l)?)) }).collect::<Result<Vec<_>>>()?;
    let dist = g.conditional(target, &evidence)?;
    let labels: Vec<&str> = cb.fields[target].levels.iter().map(|l| l.label.as_str()).collect();
    let given: BTreeMap<&str, &str> = a.given.iter().map(|(f, l)| (f.as_str(), l.as_str())).collect();
    let out = json!({
        "target": cb.fields[target].name,
        "given": given,
        "labels": labels,
        "expectation": cb.fields[target].is_ordinal().then(|| dist.expectation()),
        "distribution": dist,
    });
    let mut run = ctx.start("graph query", json!({ "target": a.target, "given": given }), vec![input], vec![])?;
    run.put("query.json", &pretty(&out)?)?;
    run.finish()?;
    Ok(())
}

fn simulate(ctx: &Ctx, a: &SimulateArgs) -> Result<()> {
    let (ds, input) = ctx.records("records", a.records.as_deref(), FIXTURE_946)?;
    let mechanism = a.mechanism.unwrap_or(ctx.cfg.simulate.mechanism);
    let seed = a.seed.unwrap_or(ctx.cfg.simulate.seed);
    let params = ctx.cfg.simulate.params;
    let masked = apply(Arc::new(ds), mechanism, params, seed)?;
    let mut csv = Vec::new();
    masked.mask.write_csv(&masked.truth, &mut csv)?;
    let summary = json!({
        "mechanism": mechanism,
        "seed": seed,
        "deleted_cells": masked.mask.deleted_count(),
        "overall_rate": masked.overall_rate(),
        "block_b_rate": masked.block_rate(Block::B),
        "block_c_rate": masked.block_rate(Block::C),
        "association": mask_association(&masked),
    });
    let config = json!({ "mechanism": mechanism, "params": params });
    let mut run = ctx.start("simulate", config, vec![input], vec![seed])?;
    run.put("mask.json", masked.mask.to_json().as_bytes())?;
    run.put("mask.csv", &csv)?;
    run.put("summary.json", &pretty(&summary)?)?;
    run.finish()?;
    Ok(())
}

fn impute(ctx: &Ctx, a: &ImputeArgs) -> Result<()> {
    let (ds, input) = ctx.records("records", a.records.as_deref(), FIXTURE_946)?;
    let mask_bytes = read(&a.mask)?;
    let mask: MissingnessMask = serde_json::from_slice(&mask_bytes)?;
    let ids: Vec<&str> = ds.respondents.iter().map(|r| r.id.as_str()).collect();
    if mask.respondent_ids.iter().map(String::as_str).ne(ids.iter().copied()) {
        return Err(Error::KeyMismatch("mask respondents differ from the records".into()));
    }
    if mask.fields.iter().map(String::as_str).ne(ds.codebook.fields.iter().map(|f| f.name.as_str())) {
        return Err(Error::KeyMismatch("mask fields differ from the codebook".into()));
    }
    let masked = MaskedDataset::new(Arc::new(ds), mask)?;
    let ic = &ctx.cfg.impute;
    let method = a.method.unwrap_or(ic.method);
    let seed = a.seed.unwrap_or(ic.seed);
    let (config, inputs) = (
        json!({ "method": method, "mice": ic.mice, "forest": ic.forest, "ipw": ic.ipw }),
        vec![input, InputRef::new("mask", a.mask.display().to_string(), &mask_bytes)],
    );
    let mut extra: Vec<(&str, Vec<u8>)> = Vec::new();
    let run_out = match method {
        ImputeMethod::Mean => mean_impute(&masked),
        ImputeMethod::Mice => mice_pmm(&masked, &ic.mice, seed)?,
        ImputeMethod::Missforest => missforest(&masked, &ic.forest, seed),
        ImputeMethod::Ipwmi => {
            let r = ipw_mi(&masked, &ic.ipw, seed)?;
            extra.push(("weights.json", pretty(&r.weights)?));
            extra.push(("pooled.json", pretty(&r.pooled)?));
            r.run
        }
    };
    let imputed: usize = run_out.deleted.iter().map(|r| r.iter().filter(|&&d| d).count()).sum();
    let out_of_range = run_out.out_of_range();
    let preserved = run_out.preserves_observed(&masked);
    let summary = json!({
        "method": run_out.method,
        "seed": seed,
        "m": run_out.m(),
        "imputed_cells": imputed,
        "out_of_range": out_of_range,
        "observed_preserved": preserved,
        "config": run_out.config,
    });
    let mut run = ctx.start("impute", config, inputs, vec![seed])?;
    for k in 0..run_out.m() {
        let mut buf = Vec::new();
        run_out.write_csv(k, &mut buf)?;
        run.put(&format!("completed_{}.csv", k + 1), &buf)?;
    }
    for (name, bytes) in &extra {
        run.put(name, bytes)?;
    }
    run.put("summary.json", &pretty(&summary)?)?;
    run.finish()?;
    if out_of_range > 0 {
        return Err(Error::Gate(format!("check 3 (imputed range): {out_of_range} imputed cells out of range")));
    }
    if !preserved {
        return Err(Error::Gate("check 5 (observed preservation): an observed cell changed".into()));
    }
    Ok(())
}

fn method_config(name: &str) -> Result<MethodConfig> {
    Ok(MethodConfig::new(name.parse::<MethodKind>()?))
}

fn predict(ctx: &Ctx, a: &PredictArgs) -> Result<()> {
    let (train, train_in) = ctx.records("train", a.train.as_deref(), FIXTURE_946)?;
    let (valid, valid_in) = ctx.records("validation", a.validation.as_deref(), FIXTURE_189)?;
    let mc = method_config(a.method.as_deref().unwrap_or(&ctx.cfg.predict.method))?;
    let seed = a.seed.unwrap_or(ctx.cfg.predict.seed);
    let (provider, pcfg) = chat_provider(&ctx.cfg.provider, &a.provider)?;
    let tag = mc.tag();
    let tctx = Arc::new(TrainingContext::new(Arc::new(train), embedder())?);
    let engine = Engine::new(mc.clone(), tctx, derive_seed(seed, &[b"llm", tag.as_bytes()]))?;
    let cb = valid.codebook.clone();
    let personas: Vec<Persona> = valid.respondents.iter().map(|r| Persona::block_a(r, &cb)).collect();
    let results = engine.predict_all(&personas, provider.as_ref());

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["respondent", "field", "predicted", "observed"])?;
    let mut transcripts = Vec::new();
    let mut failures = Vec::new();
    for (i, res) in results.iter().enumerate() {
        let r = &valid.respondents[i];
        match res {
            Ok(set) => {
                for f in cb.target_fields() {
                    let name = &cb.fields[f].name;
                    if let Some(p) = set.answers.get(name) {
                        let obs = valid.ordinal(i, f).map_or(String::new(), |o| o.to_string());
                        w.write_record([r.id.as_str(), name.as_str(), &p.to_string(), &obs])?;
                    }
                }
                transcripts.extend(set.transcripts.iter().cloned());
            }
            Err(fail) => {
                failures.push(json!({ "respondent": r.id, "error": fail.error.to_string() }));
                transcripts.extend(fail.transcripts.iter().cloned());
            }
        }
    }
    let predictions = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    let mut tbuf = Vec::new();
    for t in &transcripts {
        serde_json::to_writer(&mut tbuf, t)?;
        tbuf.push(b'\n');
    }
    let summary = json!({
        "method": tag,
        "provider": provider.id(),
        "respondents": valid.len(),
        "predicted": valid.len() - failures.len(),
        "failures": failures,
    });
    let config = json!({ "method": mc, "provider": pcfg });
    let mut run = ctx.start("predict", config, vec![train_in, valid_in], vec![seed])?;
    run.put("predictions.csv", &predictions)?;
    run.put("transcripts.jsonl", &tbuf)?;
    run.put("summary.json", &pretty(&summary)?)?;
    run.finish()?;
    if !failures.is_empty() {
        return Err(Error::Provider(format!("{} of {} respondents failed", failures.len(), valid.len())));
    }
    Ok(())
}

fn evaluate(ctx: &Ctx, a: &EvaluateArgs) -> Result<()> {
    let (train, train_in) = ctx.records("train", a.train.as_deref(), FIXTURE_946)?;
    let (valid, valid_in) = ctx.records("validation", a.validation.as_deref(), FIXTURE_189)?;
    let names = a.methods.clone().unwrap_or_else(|| ctx.cfg.evaluate.methods.clone());
    let methods = names.iter().map(|m| method_config(m)).collect::<Result<Vec<_>>>()?;
    let seed = a.seed.unwrap_or(ctx.cfg.evaluate.seed);
    let (provider, pcfg) = chat_provider(&ctx.cfg.provider, &a.provider)?;
    let report = evaluate_stage3(Arc::new(train), &valid, &methods, provider.as_ref(), embedder(), seed)?;
    let config = json!({ "methods": methods, "provider": pcfg });
    let mut run = ctx.start("evaluate", config, vec![train_in, valid_in], vec![seed])?;
    run.written = report.write(&run.dir)?;
    run.finish()?;
    if !report.errors.is_empty() {
        return Err(Error::Provider(report.errors.join("; ")));
    }
    Ok(())
}

fn benchmark(ctx: &Ctx, a: &BenchmarkArgs) -> Result<()> {
    let (ds, input) = ctx.records("records", a.records.as_deref(), FIXTURE_946)?;
    let mut bc: BenchmarkConfig = ctx.cfg.benchmark.clone();
    if let Some(ms) = &a.methods {
        bc.methods = ms.iter().map(|m| m.parse::<MethodSpec>()).collect::<Result<_>>()?;
    }
    if let Some(m) = &a.mechanisms {
        bc.mechanisms = m.clone();
    }
    if let Some(s) = &a.seeds {
        bc.seeds = s.0.clone();
    }
    match a.scope.as_deref() {
        Some("full") => bc.mask_scope = MaskScope::Full,
        Some(_) => bc.mask_scope = MaskScope::Validation,
        None => {}
    }
    if a.no_ablation {
        bc.ablation = false;
    }
    if a.transcripts {
        bc.keep_transcripts = true;
    }
    bc.validate()?;
    let (provider, pcfg) = chat_provider(&ctx.cfg.provider, &a.provider)?;
    let report = run_benchmark(&ds, &bc, provider.as_ref(), embedder())?;
    let config = json!({ "benchmark": bc, "provider": pcfg, "force": a.force });
    let mut run = ctx.start("benchmark", config, vec![input], bc.seeds.clone())?;
    match report.write(&run.dir, a.force) {
        Ok(w) => run.written = w,
        Err(Error::Gate(failed)) => {
            run.written.push(run.dir.join("gate.json"));
            run.finish()?;
            return Err(Error::Gate(failed));
        }
        Err(e) => return Err(e),
    }
    run.finish()?;
    if !report.gate.passed() {
        warn!("sanity gate failed; tables emitted because of --force");
    }
    if !report.errors.is_empty() {
        return Err(Error::Provider(report.errors.join("; ")));
    }
    Ok(())
}

fn ablation(ctx: &Ctx, a: &AblationArgs) -> Result<()> {
    let (ds, input) = ctx.records("records", a.records.as_deref(), FIXTURE_946)?;
    let ac = &ctx.cfg.ablation;
    let bc = BenchmarkConfig {
        methods: Vec::new(),
        mechanisms: a.mechanisms.clone().unwrap_or_else(|| ac.mechanisms.clone()),
        seeds: a.seeds.clone().map_or_else(|| ac.seeds.clone(), |s| s.0),
        ablation: true,
        ..ctx.cfg.benchmark.clone()
    };
    let (provider, pcfg) = chat_provider(&ctx.cfg.provider, &a.provider)?;
    let report = run_benchmark(&ds, &bc, provider.as_ref(), embedder())?;
    let config = json!({ "benchmark": bc, "provider": pcfg });
    let mut run = ctx.start("ablation", config, vec![input], bc.seeds.clone())?;
    run.written = report.write_ablation(&run.dir)?;
    run.finish()?;
    if !report.errors.is_empty() {
        return Err(Error::Provider(report.errors.join("; ")));
    }
    Ok(())
}

fn audit_table(a: &ConstructAudit) -> String {
    let mut s = format!("{:<28} {:>5}  Items\n", "Construct", "Score");
    for c in &a.constructs {
        let items = if c.items.is_empty() { "-".to_string() } else { c.items.join(", ") };
        s.push_str(&format!("{:<28} {:>5}  {items}\n", c.construct, c.score));
    }
    s
}

fn audit(ctx: &Ctx, a: &AuditArgs) -> Result<()> {
    let (provider, input, pcfg): (Box<dyn ChatProvider>, InputRef, Value) = match &a.response {
        Some(p) => {
            let bytes = read(p)?;
            let text = String::from_utf8(bytes.clone()).map_err(|e| Error::Audit(e.to_string()))?;
            (Box::new(CannedProvider { response: text }), InputRef::new("response", p.display().to_string(), &bytes), json!("canned"))
        }
        None => {
            let kind = a.provider.provider.unwrap_or(ctx.cfg.provider.kind);
            if kind == ProviderKind::Stub {
                let text = resources::AUDIT_CANNED_RESPONSE;
                let input = InputRef::new("response", "builtin:audit_canned_response.json", text.as_bytes());
                (Box::new(CannedProvider { response: text.into() }), input, json!("stub"))
            } else {
                let (p, cfg) = chat_provider(&ctx.cfg.provider, &a.provider)?;
                let input = InputRef::new("constructs", "builtin:constructs.json", resources::CONSTRUCTS.as_bytes());
                (p, input, json_value(&cfg))
            }
        }
    };
    let result = audit_instrument(&ctx.cb, &ConstructDefs::builtin(), provider.as_ref())?;
    let mut run = ctx.start("audit", json!({ "provider": pcfg }), vec![input], vec![])?;
    run.put("audit.json", &pretty(&result)?)?;
    run.put("audit.txt", audit_table(&result).as_bytes())?;
    run.finish()?;
    Ok(())
}

fn percent_map(role: &str, path: Option<&Path>, builtin: (&str, &str)) -> Result<(BTreeMap<String, f64>, InputRef)> {
    match path {
        Some(p) => {
            let bytes = read(p)?;
            Ok((serde_json::from_slice(&bytes)?, InputRef::new(role, p.display().to_string(), &bytes)))
        }
        None => Ok((serde_json::from_str(builtin.1)?, InputRef::new(role, format!("builtin:{}", builtin.0), builtin.1.as_bytes()))),
    }
}

fn coverage(ctx: &Ctx, a: &CoverageArgs) -> Result<()> {
    let (sample, sample_in) = match &a.records {
        Some(_) => {
            let (ds, input) = ctx.records("records", a.records.as_deref(), FIXTURE_946)?;
            (sample_composition(&ds, &subgroup_defs_milton())?, input)
        }
        None => percent_map("sample", a.sample.as_deref(), ("milton_composition.json", resources::MILTON_COMPOSITION))?,
    };
    let (reference, acs_in) = percent_map("reference", a.acs.as_deref(), ("acs_florida.json", resources::ACS_FLORIDA))?;
    let (prior, prior_in) = match &a.prior {
        Some(p) => {
            let bytes = read(p)?;
            (serde_json::from_slice::<CoveragePrior>(&bytes)?, InputRef::new("prior", p.display().to_string(), &bytes))
        }
        None => (CoveragePrior::builtin(), InputRef::new("prior", "builtin:coverage_prior.json", resources::COVERAGE_PRIOR.as_bytes())),
    };
    let threshold = a.divergence_threshold.unwrap_or(ctx.cfg.coverage.divergence_threshold);
    let mut gaps = compute_gap(&percents(&sample)?, &percents(&reference)?)?;
    let validation = validate_prior(&prior, &gaps, threshold)?;
    gaps.spearman_rho = Some(validation.rho);
    gaps.validated = Some(validation.validated);
    let mut run = ctx.start("coverage", json!({ "divergence_threshold": threshold }), vec![sample_in, acs_in, prior_in], vec![])?;
    run.put("gap_report.json", &pretty(&gaps)?)?;
    run.put("prior_validation.json", &pretty(&validation)?)?;
    run.put("gap_table.txt", gap_table(&gaps, Some(&prior)).as_bytes())?;
    run.finish()?;
    Ok(())
}

fn serve_cmd(ctx: &Ctx, a: &ServeArgs) -> Result<()> {
    let mut sc = ctx.cfg.serve.clone();
    if let Some(g) = &a.graph {
        sc.graph_path = g.clone();
    }
    if let Some(b) = &a.bind {
        sc.bind = b.clone();
    }
    if sc.codebook_path.is_none() {
        sc.codebook_path = ctx.cfg.codebook.clone();
    }
    let state = load_state(&sc)?;
    if state.assistant.is_none() {
        warn!("starting without a graph; /ask, /health and /graph/stats answer 503");
    }
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(serve(state, &sc.bind))
}
