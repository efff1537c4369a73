//! Stage 3 response prediction and the Stage 4 scenario grid.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use log::{debug, info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::gate::{sanity_gate, GateReport, RunBundle, ScenarioRun};
use super::metrics::OlsSpec;
use super::report::{metric_report, write_reports_csv, CellSelection, MetricReport, ReportInput};
use crate::error::{Error, Result};
use crate::impute::{ipw_mi, mean_impute, mice_pmm, missforest, ForestConfig, ImputationRun, IpwConfig, IpwWeights, MiceConfig};
use crate::llm::{ChatProvider, Embedder, Engine, MethodConfig, MethodKind, Persona, PredictionSet, TrainingContext};
use crate::missing::{apply, MaskedDataset, Mechanism, MechanismParams};
use crate::rng::derive_seed;
use crate::survey::{split, Block, Code, Dataset};

/// One method of the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MethodSpec {
    Mean,
    Mice,
    MissForest,
    IpwMi,
    Llm { config: MethodConfig },
}

impl MethodSpec {
    pub fn llm(kind: MethodKind) -> Self {
        MethodSpec::Llm { config: MethodConfig::new(kind) }
    }

    pub fn name(&self) -> String {
        match self {
            MethodSpec::Mean => "Mean".into(),
            MethodSpec::Mice => "MICE+PMM".into(),
            MethodSpec::MissForest => "missForest".into(),
            MethodSpec::IpwMi => "IPW/MI".into(),
            MethodSpec::Llm { config } => config.tag(),
        }
    }

    /// The eight rows of the Block C comparison table.
    pub fn table_methods() -> Vec<MethodSpec> {
        let mut v: Vec<MethodSpec> =
            [MethodKind::Zs, MethodKind::Fs, MethodKind::Staged, MethodKind::Marginal, MethodKind::Atlm].map(MethodSpec::llm).into();
        v.extend([MethodSpec::IpwMi, MethodSpec::Mice, MethodSpec::MissForest]);
        v
    }
}

impl FromStr for MethodSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s.to_ascii_lowercase().chars().filter(|c| c.is_ascii_alphanumeric()).collect();
        Ok(match norm.as_str() {
            "mean" => MethodSpec::Mean,
            "mice" | "micepmm" => MethodSpec::Mice,
            "missforest" | "forest" => MethodSpec::MissForest,
            "ipw" | "ipwmi" => MethodSpec::IpwMi,
            _ => MethodSpec::llm(s.parse()?),
        })
    }
}

/// Rows a mask may touch: only the validation rows, or every row (training
/// rows then enter the graph with their deletions).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskScope {
    Validation,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub methods: Vec<MethodSpec>,
    pub mechanisms: Vec<Mechanism>,
    pub seeds: Vec<u64>,
    pub train_ratio: f64,
    pub mask_scope: MaskScope,
    pub params: MechanismParams,
    pub mice: MiceConfig,
    pub forest: ForestConfig,
    pub ipw: IpwConfig,
    pub ols: OlsSpec,
    pub ablation: bool,
    pub blocks: Vec<Block>,
    pub keep_transcripts: bool,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            methods: MethodSpec::table_methods(),
            mechanisms: Mechanism::ALL.to_vec(),
            seeds: vec![1],
            train_ratio: 0.8,
            mask_scope: MaskScope::Validation,
            params: MechanismParams::default(),
            mice: MiceConfig::default(),
            forest: ForestConfig::default(),
            ipw: IpwConfig::default(),
            ols: OlsSpec::default(),
            ablation: true,
            blocks: vec![Block::B, Block::C],
            keep_transcripts: false,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() && !self.ablation {
            return Err(Error::Config("no methods selected".into()));
        }
        if self.mechanisms.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("need at least one mechanism and one seed".into()));
        }
        if self.blocks.iter().any(|b| *b == Block::A) {
            return Err(Error::Config("Block A is never imputed".into()));
        }
        for m in &self.mechanisms {
            self.params.validate(*m)?;
        }
        for spec in &self.methods {
            if let MethodSpec::Llm { config } = spec {
                config.validate()?;
            }
        }
        Ok(())
    }
}

/// The four A-TLM ablation variants in table order.
pub fn ablation_variants() -> Vec<(String, MethodConfig)> {
    vec![
        ("Marginal-TLM (baseline)".into(), MethodConfig::atlm_variant(false, false)),
        ("+ Peer examples only".into(), MethodConfig::atlm_variant(true, false)),
        ("+ Vulnerability cue only".into(), MethodConfig::atlm_variant(false, true)),
        ("+ Both signals (A-TLM)".into(), MethodConfig::atlm_variant(true, true)),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub scenario: String,
    pub seed: u64,
    pub n_cells: usize,
    pub rmse: f64,
    pub signed_bias: f64,
    pub compound_n: usize,
    pub compound_bias: Option<f64>,
    pub non_compound_n: usize,
    pub non_compound_bias: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub config: BenchmarkConfig,
    pub dataset_rows: usize,
    pub provider: String,
    pub reports: Vec<MetricReport>,
    pub ablation: Vec<AblationRow>,
    pub gate: GateReport,
    pub errors: Vec<String>,
    #[serde(skip)]
    pub transcripts: Vec<PredictionSet>,
}

/// Training rows followed by validation rows, and the training row count.
pub fn train_then_validation(dataset: &Dataset, seed: u64, ratio: f64) -> Result<(Arc<Dataset>, usize)> {
    let (train, valid) = split(dataset, seed, ratio)?;
    let n_train = train.len();
    let mut respondents = train.respondents;
    respondents.extend(valid.respondents);
    Ok((Arc::new(Dataset::new(dataset.codebook.clone(), respondents, dataset.provenance)), n_train))
}

/// Mask every row, then clear the training rows when the scope says so.
/// Cell draws are keyed by respondent and field, so validation cells get the
/// same decision under both scopes.
pub fn scenario_mask(
    truth: Arc<Dataset>,
    n_train: usize,
    mechanism: Mechanism,
    params: MechanismParams,
    seed: u64,
    scope: MaskScope,
) -> Result<MaskedDataset> {
    let masked = apply(truth.clone(), mechanism, params, seed)?;
    if scope == MaskScope::Full {
        return Ok(masked);
    }
    let mut mask = masked.mask;
    for row in mask.cells.iter_mut().take(n_train) {
        row.iter_mut().for_each(|c| *c = false);
    }
    MaskedDataset::new(truth, mask)
}

fn code_of(ds: &Dataset, field: usize, ordinal: u8) -> Result<Code> {
    ds.codebook.fields[field]
        .levels
        .iter()
        .position(|l| l.ordinal == Some(ordinal))
        .map(|c| c as Code)
        .ok_or_else(|| Error::Parse(format!("{}: ordinal {ordinal} has no level", ds.codebook.fields[field].name)))
}

/// Predict the deleted cells of `rows` with one LLM method. Rows without a
/// deletion are not sent to the provider.
pub fn llm_imputation(
    engine: &Engine,
    masked: &MaskedDataset,
    rows: &[usize],
    provider: &dyn ChatProvider,
) -> Result<(ImputationRun, Vec<PredictionSet>)> {
    let cb = masked.truth.codebook.clone();
    let targets = cb.target_fields();
    let asked: Vec<usize> = rows.iter().copied().filter(|&r| targets.iter().any(|&f| masked.is_deleted(r, f))).collect();
    let personas: Vec<Persona> = asked.iter().map(|&r| Persona::observed(&masked.observed.respondents[r])).collect();
    let mut completed = masked.observed.clone();
    let mut deleted = vec![vec![false; cb.len()]; masked.truth.len()];
    let mut sets = Vec::with_capacity(asked.len());
    for (&r, res) in asked.iter().zip(engine.predict_all(&personas, provider)) {
        let set = res.map_err(|f| Error::Provider(format!("{} respondent {}: {}", engine.config.tag(), masked.truth.respondents[r].id, f.error)))?;
        for &f in &targets {
            if masked.is_deleted(r, f) {
                let name = &cb.fields[f].name;
                let o = *set.answers.get(name).ok_or_else(|| Error::Parse(format!("{name}: no prediction")))?;
                completed.respondents[r].answers[f] = Some(code_of(&completed, f, o)?);
                deleted[r][f] = true;
            }
        }
        sets.push(set);
    }
    let run = ImputationRun {
        method: engine.config.tag(),
        seed: engine.seed,
        config: serde_json::to_value(&engine.config)?,
        completed: vec![completed],
        deleted,
    };
    Ok((run, sets))
}

struct MethodOutcome {
    run: ImputationRun,
    weights: Option<IpwWeights>,
    transcripts: Vec<PredictionSet>,
}

fn seed_for(seed: u64, what: &str, mechanism: Mechanism) -> u64 {
    derive_seed(seed, &[what.as_bytes(), mechanism.to_string().as_bytes()])
}

fn run_method(
    spec: &MethodSpec,
    config: &BenchmarkConfig,
    masked: &MaskedDataset,
    ctx: &Arc<TrainingContext>,
    rows: &[usize],
    provider: &dyn ChatProvider,
    seed: u64,
) -> Result<MethodOutcome> {
    let mech = masked.mask.mechanism;
    let s = seed_for(seed, &spec.name(), mech);
    Ok(match spec {
        MethodSpec::Mean => MethodOutcome { run: mean_impute(masked), weights: None, transcripts: Vec::new() },
        MethodSpec::Mice => MethodOutcome { run: mice_pmm(masked, &config.mice, s)?, weights: None, transcripts: Vec::new() },
        MethodSpec::MissForest => MethodOutcome { run: missforest(masked, &config.forest, s), weights: None, transcripts: Vec::new() },
        MethodSpec::IpwMi => {
            let r = ipw_mi(masked, &config.ipw, s)?;
            MethodOutcome { run: r.run, weights: Some(r.weights), transcripts: Vec::new() }
        }
        MethodSpec::Llm { config: mc } => {
            let engine = Engine::new(mc.clone(), ctx.clone(), derive_seed(seed, &[b"llm", mc.tag().as_bytes()]))?;
            let (run, sets) = llm_imputation(&engine, masked, rows, provider)?;
            MethodOutcome { run, weights: None, transcripts: sets }
        }
    })
}

struct ScenarioOutput {
    scenario: ScenarioRun,
    reports: Vec<MetricReport>,
    ablation: Vec<AblationRow>,
    errors: Vec<String>,
    transcripts: Vec<PredictionSet>,
}

fn report_for(
    method: &str,
    outcome: &MethodOutcome,
    masked: &MaskedDataset,
    rows: &[usize],
    block: Block,
    seed: u64,
    ols: &OlsSpec,
) -> Result<MetricReport> {
    let sel = CellSelection::deleted(masked, rows, Some(block));
    metric_report(&ReportInput {
        method,
        scenario: &masked.mask.mechanism.to_string(),
        block: Some(block),
        seed,
        truth: &masked.truth,
        completed: &outcome.run.completed,
        deleted: &outcome.run.deleted,
        selection: &sel,
        rows,
        weights: outcome.weights.as_ref().map(|w| w.weights.as_slice()),
        ols: Some(ols),
        embedder: None,
    })
}

fn run_scenario(
    truth: Arc<Dataset>,
    n_train: usize,
    mechanism: Mechanism,
    seed: u64,
    config: &BenchmarkConfig,
    provider: &dyn ChatProvider,
    embedder: &Arc<dyn Embedder>,
) -> Result<ScenarioOutput> {
    let masked = Arc::new(scenario_mask(truth.clone(), n_train, mechanism, config.params, seed_for(seed, "mask", mechanism), config.mask_scope)?);
    let rows: Vec<usize> = (n_train..truth.len()).collect();
    let train_rows: Vec<usize> = (0..n_train).collect();
    let ctx = Arc::new(TrainingContext::new(Arc::new(masked.observed.subset(&train_rows)), embedder.clone())?);
    let mut out = ScenarioOutput {
        scenario: ScenarioRun {
            seed,
            masked: masked.clone(),
            maskable_from: if config.mask_scope == MaskScope::Full { 0 } else { n_train },
            runs: Vec::new(),
            weights: Vec::new(),
        },
        reports: Vec::new(),
        ablation: Vec::new(),
        errors: Vec::new(),
        transcripts: Vec::new(),
    };
    let mut cache: Vec<(MethodConfig, ImputationRun)> = Vec::new();
    for spec in &config.methods {
        let name = spec.name();
        info!("{name} under {mechanism}, seed {seed}");
        let outcome = match run_method(spec, config, &masked, &ctx, &rows, provider, seed) {
            Ok(o) => o,
            Err(e) => {
                out.errors.push(format!("{name} {mechanism} seed {seed}: {e}"));
                continue;
            }
        };
        for &block in &config.blocks {
            if CellSelection::deleted(&masked, &rows, Some(block)).is_empty() {
                debug!("{name} {mechanism} seed {seed}: no deleted {block} cells");
                continue;
            }
            match report_for(&name, &outcome, &masked, &rows, block, seed, &config.ols) {
                Ok(r) => out.reports.push(r),
                Err(e) => warn!("{name} {mechanism} seed {seed}: {e}"),
            }
        }
        if let MethodSpec::Llm { config: mc } = spec {
            cache.push((mc.clone(), outcome.run.clone()));
        }
        if let Some(w) = outcome.weights {
            out.scenario.weights.push((name.clone(), w));
        }
        if config.keep_transcripts {
            out.transcripts.extend(outcome.transcripts);
        }
        out.scenario.runs.push(outcome.run);
    }
    if config.ablation {
        for (variant, mc) in ablation_variants() {
            let run = match cache.iter().find(|(c, _)| *c == mc) {
                Some((_, run)) => run.clone(),
                None => {
                    let spec = MethodSpec::Llm { config: mc.clone() };
                    match run_method(&spec, config, &masked, &ctx, &rows, provider, seed) {
                        Ok(o) => {
                            out.scenario.runs.push(o.run.clone());
                            o.run
                        }
                        Err(e) => {
                            out.errors.push(format!("{variant} {mechanism} seed {seed}: {e}"));
                            continue;
                        }
                    }
                }
            };
            let outcome = MethodOutcome { run, weights: None, transcripts: Vec::new() };
            match report_for(&variant, &outcome, &masked, &rows, Block::C, seed, &config.ols) {
                Ok(r) => out.ablation.push(AblationRow {
                    variant,
                    scenario: r.scenario.clone(),
                    seed,
                    n_cells: r.n_cells,
                    rmse: r.rmse,
                    signed_bias: r.signed_bias,
                    compound_n: r.compound.n_cells,
                    compound_bias: r.compound.signed_bias,
                    non_compound_n: r.non_compound.n_cells,
                    non_compound_bias: r.non_compound.signed_bias,
                }),
                Err(e) => warn!("{variant} {mechanism} seed {seed}: {e}"),
            }
        }
    }
    Ok(out)
}

/// Every (seed, mechanism) cell of the grid, each method scored on the
/// deleted validation cells of each block, followed by the sanity gate.
pub fn run_benchmark(
    dataset: &Dataset,
    config: &BenchmarkConfig,
    provider: &dyn ChatProvider,
    embedder: Arc<dyn Embedder>,
) -> Result<BenchmarkReport> {
    config.validate()?;
    let mut prepared = Vec::new();
    for &seed in &config.seeds {
        let (truth, n_train) = train_then_validation(dataset, seed, config.train_ratio)?;
        for &mech in &config.mechanisms {
            prepared.push((truth.clone(), n_train, mech, seed));
        }
    }
    let outputs: Vec<Result<ScenarioOutput>> = prepared
        .par_iter()
        .map(|(truth, n_train, mech, seed)| run_scenario(truth.clone(), *n_train, *mech, *seed, config, provider, &embedder))
        .collect();
    let mut bundle = RunBundle::default();
    let mut report = BenchmarkReport {
        config: config.clone(),
        dataset_rows: dataset.len(),
        provider: provider.id(),
        reports: Vec::new(),
        ablation: Vec::new(),
        gate: GateReport { checks: Vec::new() },
        errors: Vec::new(),
        transcripts: Vec::new(),
    };
    for o in outputs {
        let o = o?;
        bundle.scenarios.push(o.scenario);
        report.reports.extend(o.reports);
        report.ablation.extend(o.ablation);
        report.errors.extend(o.errors);
        report.transcripts.extend(o.transcripts);
    }
    report.gate = sanity_gate(&bundle);
    if !report.gate.passed() {
        warn!("sanity gate failed:\n{}", report.gate.summary());
    }
    Ok(report)
}

fn mean_of(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn signed(x: f64) -> String {
    if x >= 0.0 {
        format!("+{x:.3}")
    } else {
        format!("{x:.3}")
    }
}

fn method_order(reports: &[MetricReport]) -> Vec<String> {
    let mut seen: Vec<String> = Vec::new();
    for r in reports {
        if !seen.contains(&r.method) {
            seen.push(r.method.clone());
        }
    }
    seen
}

impl BenchmarkReport {
    fn cell(&self, method: &str, scenario: &str, block: &str) -> Option<(f64, f64)> {
        let hits: Vec<&MetricReport> =
            self.reports.iter().filter(|r| r.method == method && r.scenario == scenario && r.block == block).collect();
        Some((mean_of(hits.iter().map(|r| r.rmse))?, mean_of(hits.iter().map(|r| r.signed_bias))?))
    }

    fn scenarios(&self) -> Vec<String> {
        self.config.mechanisms.iter().map(|m| m.to_string()).collect()
    }

    /// Method × scenario × {RMSE, bias} for one block, averaged over seeds.
    pub fn block_table(&self, block: Block) -> String {
        let label = super::report::block_label(Some(block));
        let scen = self.scenarios();
        let mut s = format!("{label} imputation: RMSE and signed bias (mean over {} seed(s))\n", self.config.seeds.len());
        let _ = write!(s, "{:<26}", "Method");
        for sc in &scen {
            let _ = write!(s, " {:>9} {:>9}", format!("{sc} RMSE"), format!("{sc} Bias"));
        }
        s.push('\n');
        for m in method_order(&self.reports) {
            let _ = write!(s, "{m:<26}");
            for sc in &scen {
                match self.cell(&m, sc, label) {
                    Some((r, b)) => {
                        let _ = write!(s, " {r:>9.3} {:>9}", signed(b));
                    }
                    None => {
                        let _ = write!(s, " {:>9} {:>9}", "-", "-");
                    }
                }
            }
            s.push('\n');
        }
        s
    }

    /// Variant × scenario signed bias on Block C, with compound-stratum bias.
    pub fn ablation_table(&self) -> String {
        let scen = self.scenarios();
        let mut s = String::from("Component ablation: signed bias on Block C (compound stratum in brackets)\n");
        let _ = write!(s, "{:<26}", "Variant");
        for sc in &scen {
            let _ = write!(s, " {sc:>18}");
        }
        s.push('\n');
        for (variant, _) in ablation_variants() {
            let _ = write!(s, "{variant:<26}");
            for sc in &scen {
                let rows: Vec<&AblationRow> = self.ablation.iter().filter(|r| r.variant == variant && r.scenario == *sc).collect();
                let all = mean_of(rows.iter().map(|r| r.signed_bias));
                let comp = mean_of(rows.iter().filter_map(|r| r.compound_bias));
                let text = match (all, comp) {
                    (Some(a), Some(c)) => format!("{} [{}]", signed(a), signed(c)),
                    (Some(a), None) => format!("{} [-]", signed(a)),
                    _ => "-".into(),
                };
                let _ = write!(s, " {text:>18}");
            }
            s.push('\n');
        }
        s
    }

    fn plot_rmse(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["method", "scenario", "block", "rmse"])?;
        for block in &self.config.blocks {
            let label = super::report::block_label(Some(*block));
            for m in method_order(&self.reports) {
                for sc in self.scenarios() {
                    if let Some((r, _)) = self.cell(&m, &sc, label) {
                        w.write_record([m.as_str(), sc.as_str(), label, &format!("{r:.6}")])?;
                    }
                }
            }
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    fn plot_frontier(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["method", "scenario", "rmse", "signed_bias"])?;
        for m in method_order(&self.reports) {
            for sc in self.scenarios() {
                if let Some((r, b)) = self.cell(&m, &sc, "Block C") {
                    w.write_record([m.as_str(), sc.as_str(), &format!("{r:.6}"), &format!("{b:.6}")])?;
                }
            }
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    fn plot_subgroup(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["method", "scenario", "stratum", "n_cells", "signed_bias"])?;
        for m in method_order(&self.reports) {
            for sc in self.scenarios() {
                let hits: Vec<&MetricReport> =
                    self.reports.iter().filter(|r| r.method == m && r.scenario == sc && r.block == "Block C").collect();
                if hits.is_empty() {
                    continue;
                }
                for (stratum, pick) in [("compound", true), ("non_compound", false)] {
                    let st = |r: &&MetricReport| if pick { r.compound.clone() } else { r.non_compound.clone() };
                    let n: usize = hits.iter().map(|r| st(r).n_cells).sum();
                    let bias = mean_of(hits.iter().filter_map(|r| st(r).signed_bias));
                    w.write_record([
                        m.as_str(),
                        sc.as_str(),
                        stratum,
                        &n.to_string(),
                        &bias.map(|b| format!("{b:.6}")).unwrap_or_default(),
                    ])?;
                }
            }
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    fn ablation_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["variant", "scenario", "seed", "n_cells", "rmse", "signed_bias", "compound_n", "compound_bias", "non_compound_n", "non_compound_bias"])?;
        let f = |x: Option<f64>| x.map(|v| format!("{v:.6}")).unwrap_or_default();
        for r in &self.ablation {
            w.write_record([
                r.variant.clone(),
                r.scenario.clone(),
                r.seed.to_string(),
                r.n_cells.to_string(),
                format!("{:.6}", r.rmse),
                format!("{:.6}", r.signed_bias),
                r.compound_n.to_string(),
                f(r.compound_bias),
                r.non_compound_n.to_string(),
                f(r.non_compound_bias),
            ])?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    /// Write tables, CSVs, JSON and plot data into `dir`. A failed gate
    /// blocks emission unless `force` is set; the gate report is written
    /// either way.
    pub fn write(&self, dir: &Path, force: bool) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let mut put = |name: &str, bytes: &[u8]| -> Result<()> {
            let p = dir.join(name);
            std::fs::write(&p, bytes)?;
            written.push(p);
            Ok(())
        };
        put("gate.json", serde_json::to_string_pretty(&self.gate)?.as_bytes())?;
        if !self.gate.passed() && !force {
            let names: Vec<String> = self.gate.failures().iter().map(|c| format!("check {} ({})", c.id, c.name)).collect();
            return Err(Error::Gate(names.join(", ")));
        }
        let mut metrics = Vec::new();
        write_reports_csv(&mut metrics, &self.reports)?;
        put("metrics.csv", &metrics)?;
        put("metrics.json", serde_json::to_string_pretty(self)?.as_bytes())?;
        let mut tables = String::new();
        for b in &self.config.blocks {
            tables.push_str(&self.block_table(*b));
            tables.push('\n');
        }
        if self.config.ablation {
            tables.push_str(&self.ablation_table());
            tables.push('\n');
        }
        tables.push_str("Sanity gate\n");
        tables.push_str(&self.gate.summary());
        put("tables.txt", tables.as_bytes())?;
        if self.config.ablation {
            put("ablation.csv", &self.ablation_csv()?)?;
        }
        put("plot_rmse_by_scenario.csv", &self.plot_rmse()?)?;
        put("plot_bias_rmse_frontier.csv", &self.plot_frontier()?)?;
        put("plot_subgroup_bias.csv", &self.plot_subgroup()?)?;
        if !self.transcripts.is_empty() {
            let mut buf = Vec::new();
            crate::llm::write_transcripts(&mut buf, &self.transcripts)?;
            put("transcripts.jsonl", &buf)?;
        }
        Ok(written)
    }
}

impl BenchmarkReport {
    /// Ablation table, CSV and JSON only. No imputer runs, so the gate
    /// does not apply.
    pub fn write_ablation(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let files = [
            ("ablation.txt", self.ablation_table().into_bytes()),
            ("ablation.csv", self.ablation_csv()?),
            ("ablation.json", serde_json::to_string_pretty(&self.ablation)?.into_bytes()),
        ];
        let mut out = Vec::new();
        for (name, bytes) in files {
            let p = dir.join(name);
            std::fs::write(&p, bytes)?;
            out.push(p);
        }
        if !self.transcripts.is_empty() {
            let p = dir.join("transcripts.jsonl");
            let mut buf = Vec::new();
            crate::llm::write_transcripts(&mut buf, &self.transcripts)?;
            std::fs::write(&p, buf)?;
            out.push(p);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage3Report {
    pub provider: String,
    pub reports: Vec<MetricReport>,
    pub errors: Vec<String>,
    #[serde(skip)]
    pub transcripts: Vec<PredictionSet>,
}

impl Stage3Report {
    /// Method × {Blk B, Blk C, Combined} MAE.
    pub fn mae_table(&self) -> String {
        let mut s = format!("{:<16} {:>7} {:>7} {:>9}\n", "Method", "Blk B", "Blk C", "Combined");
        for m in method_order(&self.reports) {
            let get = |b: &str| {
                self.reports.iter().find(|r| r.method == m && r.block == b).map_or("-".to_string(), |r| format!("{:.3}", r.mae))
            };
            let _ = writeln!(s, "{m:<16} {:>7} {:>7} {:>9}", get("Block B"), get("Block C"), get("Combined"));
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut csvbuf = Vec::new();
        write_reports_csv(&mut csvbuf, &self.reports)?;
        let files = [
            ("stage3_metrics.csv", csvbuf),
            ("stage3_metrics.json", serde_json::to_string_pretty(self)?.into_bytes()),
            ("stage3_mae.txt", self.mae_table().into_bytes()),
        ];
        let mut out = Vec::new();
        for (name, bytes) in files {
            let p = dir.join(name);
            std::fs::write(&p, bytes)?;
            out.push(p);
        }
        if !self.transcripts.is_empty() {
            let p = dir.join("stage3_transcripts.jsonl");
            let mut buf = Vec::new();
            crate::llm::write_transcripts(&mut buf, &self.transcripts)?;
            std::fs::write(&p, buf)?;
            out.push(p);
        }
        Ok(out)
    }
}

/// Predict every Block B/C answer of `validation` from Block A alone and
/// score per block and combined.
pub fn evaluate_stage3(
    train: Arc<Dataset>,
    validation: &Dataset,
    methods: &[MethodConfig],
    provider: &dyn ChatProvider,
    embedder: Arc<dyn Embedder>,
    seed: u64,
) -> Result<Stage3Report> {
    let ctx = Arc::new(TrainingContext::new(train, embedder.clone())?);
    let cb = validation.codebook.clone();
    let targets = cb.target_fields();
    let rows: Vec<usize> = (0..validation.len()).collect();
    let personas: Vec<Persona> = validation.respondents.iter().map(|r| Persona::block_a(r, &cb)).collect();
    let mut deleted = vec![vec![false; cb.len()]; validation.len()];
    for (r, row) in deleted.iter_mut().enumerate() {
        for &f in &targets {
            row[f] = validation.respondents[r].answers[f].is_some();
        }
    }
    let mut out = Stage3Report { provider: provider.id(), reports: Vec::new(), errors: Vec::new(), transcripts: Vec::new() };
    for mc in methods {
        let tag = mc.tag();
        let engine = Engine::new(mc.clone(), ctx.clone(), derive_seed(seed, &[b"llm", tag.as_bytes()]))?;
        let mut completed = validation.clone();
        let mut failed = None;
        let mut sets = Vec::new();
        for (r, res) in engine.predict_all(&personas, provider).into_iter().enumerate() {
            match res {
                Ok(set) => {
                    for &f in &targets {
                        if validation.respondents[r].answers[f].is_some() {
                            let o = set.answers[&cb.fields[f].name];
                            completed.respondents[r].answers[f] = Some(code_of(validation, f, o)?);
                        }
                    }
                    sets.push(set);
                }
                Err(e) => {
                    failed = Some(format!("{tag} respondent {}: {}", validation.respondents[r].id, e.error));
                    break;
                }
            }
        }
        if let Some(e) = failed {
            out.errors.push(e);
            continue;
        }
        let copies = [completed];
        for block in [Some(Block::B), Some(Block::C), None] {
            let sel = CellSelection::targets(validation, &rows, block);
            out.reports.push(metric_report(&ReportInput {
                method: &tag,
                scenario: "stage3",
                block,
                seed,
                truth: validation,
                completed: &copies,
                deleted: &deleted,
                selection: &sel,
                rows: &rows,
                weights: None,
                ols: Some(&OlsSpec::default()),
                embedder: Some(embedder.as_ref()),
            })?);
        }
        out.transcripts.extend(sets);
    }
    Ok(out)
}
