use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use super::*;
use crate::synth::{generate, GeneratorConfig};

fn context(n: usize, seed: u64) -> Arc<TrainingContext> {
    let ds = generate(&GeneratorConfig::milton_like().with_n_seed(n, seed), Arc::new(Codebook::milton())).unwrap();
    Arc::new(TrainingContext::new(Arc::new(ds), Arc::new(HashedEmbedder::default())).unwrap())
}

fn persona_from(ctx: &TrainingContext, compound: bool) -> Persona {
    let r = ctx.train.respondents.iter().find(|r| r.flags.compound == compound).unwrap();
    Persona::block_a(r, &ctx.train.codebook)
}

fn dist(target: &str, p: Vec<f64>) -> Distribution {
    Distribution { target: target.into(), given: vec![], probabilities: p, n: 10, fallback: false }
}

#[test]
fn pack_round_trips() {
    let pack = EvidencePack {
        persona: vec![("Income".into(), "Under $20,000".into()), ("Age".into(), "35-44".into())],
        observed: vec![("Time_Family".into(), 3)],
        marginals: vec![dist("Prep_Stress", vec![0.1, 0.2, 0.3, 0.25, 0.15])],
        conditionals: vec![
            Distribution {
                target: "Prep_Stress".into(),
                given: vec![("Age".into(), "35-44".into())],
                probabilities: vec![1.0 / 3.0, 0.0, 0.2, 0.4, 1.0 / 15.0],
                n: 57,
                fallback: false,
            },
            Distribution { fallback: true, ..dist("Prep_Time", vec![0.2; 5]) },
        ],
        exemplar_kind: Some(ExemplarKind::Peers),
        exemplars: vec![Exemplar {
            id: "S00003".into(),
            score: Some(0.0625),
            profile: vec![("Age".into(), "35-44".into())],
            answers: vec![("Time_Family".into(), 4), ("Prep_Stress".into(), 2)],
        }],
        deltas: vec![("Prep_Start".into(), -0.523456789)],
        upstream: vec![("Time_Sleep".into(), 2)],
    };
    let text = format!("intro\n{}\nschema", pack.render());
    assert_eq!(EvidencePack::parse(&text).unwrap(), Some(pack));
    assert_eq!(EvidencePack::parse("no pack here").unwrap(), None);
    assert!(EvidencePack::parse("<<<EVIDENCE>>>\n[marginals]\n").is_err());
}

#[test]
fn stub_arithmetic() {
    let mut pack = EvidencePack { conditionals: vec![dist("Prep_Stress", vec![0.0, 0.0, 1.0, 0.0, 0.0])], ..Default::default() };
    assert_eq!(StubProvider::answer(Some(&pack), "Prep_Stress", 1, 5), 3);
    // E = 2.4
    pack.conditionals = vec![dist("Prep_Stress", vec![0.2, 0.4, 0.2, 0.2, 0.0])];
    assert!((pack.conditionals[0].expectation() - 2.4).abs() < 1e-12);
    pack.deltas = vec![("Prep_Stress".into(), -0.5)];
    assert_eq!(StubProvider::answer(Some(&pack), "Prep_Stress", 1, 5), 2);
    pack.deltas = vec![("Prep_Stress".into(), -9.0)];
    assert_eq!(StubProvider::answer(Some(&pack), "Prep_Stress", 1, 5), 1);
    assert_eq!(StubProvider::answer(None, "Prep_Stress", 1, 5), 3);
}

#[test]
fn zero_shot_has_no_training_numbers_and_stub_answers_midpoint() {
    let ctx = context(150, 1);
    let engine = Engine::new(MethodConfig::new(MethodKind::Zs), ctx.clone(), 42).unwrap();
    let persona = persona_from(&ctx, false);
    let prompt = engine.prompt(&persona).unwrap();
    assert!(prompt.pack.is_none());
    assert!(!prompt.user.contains(evidence::PACK_OPEN) && !prompt.user.contains("p=["));
    let set = engine.predict(&persona, &StubProvider).unwrap();
    assert_eq!(set.answers.len(), 16);
    assert!(set.answers.values().all(|&v| v == 3));
}

#[test]
fn marginal_stub_equals_graph_expectation() {
    let ctx = context(300, 2);
    let engine = Engine::new(MethodConfig::new(MethodKind::Marginal), ctx.clone(), 42).unwrap();
    let cb = ctx.train.codebook.clone();
    for r in ctx.train.respondents.iter().take(25) {
        let persona = Persona::block_a(r, &cb);
        let set = engine.predict(&persona, &StubProvider).unwrap();
        let evidence: Vec<(usize, Code)> = cb.block_fields(Block::A).into_iter().filter_map(|f| r.answers[f].map(|c| (f, c))).collect();
        for t in cb.target_fields() {
            let c = ctx.pmt.conditional(t, &evidence).unwrap();
            let e: f64 = c.probabilities.iter().enumerate().map(|(i, p)| (i + 1) as f64 * p).sum();
            assert_eq!(set.answers[&cb.fields[t].name], e.round().clamp(1.0, 5.0) as u8, "{} {}", r.id, cb.fields[t].name);
        }
    }
}

#[test]
fn pack_numbers_trace_to_graph() {
    let ctx = context(200, 3);
    let engine = Engine::new(MethodConfig::new(MethodKind::Marginal), ctx.clone(), 1).unwrap();
    let persona = persona_from(&ctx, true);
    let prompt = engine.prompt(&persona).unwrap();
    let parsed = EvidencePack::parse(&prompt.user).unwrap().unwrap();
    assert_eq!(Some(parsed.clone()), prompt.pack);
    let cb = &ctx.train.codebook;
    for d in &parsed.marginals {
        let m = ctx.pmt.marginal(cb.require(&d.target).unwrap()).unwrap();
        assert_eq!(m.probabilities, d.probabilities);
        assert_eq!(m.support_n, d.n);
    }
}

#[test]
fn atlm_sections_depend_on_compound_flag() {
    let ctx = context(300, 4);
    let engine = Engine::new(MethodConfig::new(MethodKind::Atlm), ctx.clone(), 1).unwrap();
    assert!(!engine.deltas.is_empty());
    let vuln = engine.prompt(&persona_from(&ctx, true)).unwrap();
    let pack = vuln.pack.as_ref().unwrap();
    assert_eq!(pack.exemplars.len(), 5);
    assert!(!pack.deltas.is_empty());
    assert!(vuln.user.contains("[deltas]") && vuln.user.contains("[exemplars peers]"));
    let other = engine.prompt(&persona_from(&ctx, false)).unwrap();
    assert!(other.user.contains("[exemplars peers]"));
    assert!(!other.user.contains("[deltas]"));
    for text in [&vuln.system, &vuln.user] {
        let lower = text.to_lowercase();
        for banned in ["add the", "add each", "plus the delta", "sum the"] {
            assert!(!lower.contains(banned), "{banned}");
        }
    }
    assert!(vuln.system.contains("soft directional cue rather than a numerical override"));
}

#[test]
fn atlm_stub_applies_delta() {
    let ctx = context(300, 5);
    let engine = Engine::new(MethodConfig::new(MethodKind::Atlm), ctx.clone(), 1).unwrap();
    let persona = persona_from(&ctx, true);
    let prompt = engine.prompt(&persona).unwrap();
    let set = engine.predict(&persona, &StubProvider).unwrap();
    let pack = prompt.pack.unwrap();
    for (field, v) in &set.answers {
        let d = pack.conditionals.iter().find(|d| &d.target == field).unwrap();
        let delta = engine.deltas.get(field).copied().unwrap_or(0.0);
        assert_eq!(*v, (d.expectation() + delta).round().clamp(1.0, 5.0) as u8);
    }
}

#[test]
fn few_shot_exemplars_fixed_per_seed() {
    let ctx = context(100, 6);
    let a = Engine::new(MethodConfig::new(MethodKind::Fs), ctx.clone(), 42).unwrap();
    let b = Engine::new(MethodConfig::new(MethodKind::Fs), ctx.clone(), 42).unwrap();
    assert_eq!(a.fs_rows(), b.fs_rows());
    assert_eq!(a.fs_rows().len(), 5);
    let p = persona_from(&ctx, false);
    assert_eq!(a.prompt(&p).unwrap(), b.prompt(&p).unwrap());
}

#[test]
fn empty_retrieval_degenerates_to_zero_shot() {
    let ctx = context(60, 7);
    let cfg = MethodConfig { k_retrieval: 0, ..MethodConfig::new(MethodKind::Er) };
    let prompt = Engine::new(cfg, ctx.clone(), 1).unwrap().prompt(&persona_from(&ctx, false)).unwrap();
    assert!(prompt.pack.is_none());
    assert_eq!(prompt.flags.len(), 1);
}

#[test]
fn retrieval_ranks_identical_persona_first() {
    let ctx = context(80, 8);
    let r = &ctx.train.respondents[17];
    let engine = Engine::new(MethodConfig::new(MethodKind::Er), ctx.clone(), 1).unwrap();
    let prompt = engine.prompt(&Persona::block_a(r, &ctx.train.codebook)).unwrap();
    let top = &prompt.pack.unwrap().exemplars[0];
    assert!((top.score.unwrap() - 1.0).abs() < 1e-12);
    let same: Vec<&Respondent> = ctx.train.respondents.iter().filter(|x| {
        ctx.train.codebook.block_fields(Block::A).iter().all(|&f| x.answers[f] == r.answers[f])
    }).collect();
    assert!(same.iter().any(|x| x.id == top.id));
}

#[test]
fn staged_chain_matches_oracle() {
    let ctx = context(300, 9);
    let engine = Engine::new(MethodConfig::new(MethodKind::Staged), ctx.clone(), 1).unwrap();
    let cb = ctx.train.codebook.clone();
    let r = &ctx.train.respondents[3];
    let set = engine.predict(&Persona::block_a(r, &cb), &StubProvider).unwrap();
    assert_eq!(set.transcripts.len(), 6);
    assert_eq!(set.transcripts.iter().map(|t| t.stage.unwrap()).collect::<Vec<_>>(), vec![1, 2, 3, 4, 5, 6]);
    let mut known: Vec<Option<Code>> = r.answers.iter().enumerate().map(|(f, a)| if cb.fields[f].block == Block::A { *a } else { None }).collect();
    for stage in 1..=6u8 {
        let targets: Vec<usize> = cb.target_fields().into_iter().filter(|&f| cb.fields[f].pmt_stage == stage).collect();
        let mut committed = Vec::new();
        for &t in &targets {
            let ev: Vec<(usize, Code)> = known.iter().enumerate().filter_map(|(f, a)| a.map(|c| (f, c))).collect();
            let c = ctx.pmt.conditional(t, &ev).unwrap();
            let v = c.expectation().round().clamp(1.0, 5.0) as u8;
            assert_eq!(set.answers[&cb.fields[t].name], v);
            committed.push((t, v - 1));
        }
        for (t, code) in committed {
            known[t] = Some(code);
        }
    }
}

struct Scripted {
    replies: Mutex<Vec<String>>,
}

impl ChatProvider for Scripted {
    fn id(&self) -> String {
        "scripted".into()
    }
    fn complete(&self, _s: &str, _u: &str, _t: f64) -> crate::Result<String> {
        Ok(self.replies.lock().unwrap().remove(0))
    }
}

#[test]
fn repair_retry_then_error() {
    let ctx = context(60, 10);
    let engine = Engine::new(MethodConfig::new(MethodKind::Zs), ctx.clone(), 1).unwrap();
    let persona = persona_from(&ctx, false);
    let good: String = ctx.train.codebook.target_fields().iter().map(|&f| format!("{}: 2\n", ctx.train.codebook.fields[f].name)).collect();
    let p = Scripted { replies: Mutex::new(vec!["I cannot answer".into(), good.clone()]) };
    let set = engine.predict(&persona, &p).unwrap();
    assert_eq!(set.transcripts[0].responses.len(), 2);
    let bad = good.replace("Prep_Stress: 2", "Prep_Stress: 7");
    let p = Scripted { replies: Mutex::new(vec![bad.clone(), bad]) };
    let err = engine.predict(&persona, &p).unwrap_err();
    assert!(err.error.to_string().contains("Prep_Stress"));
    assert_eq!(err.transcripts[0].responses.len(), 2);
}

#[test]
fn parse_rejects_out_of_range_naming_field() {
    let targets = vec![TargetSpec { field: "Prep_Stress".into(), min: 1, max: 5 }];
    let e = parse_response("Prep_Stress: 7", &targets).unwrap_err();
    assert!(e.to_string().contains("Prep_Stress"));
    assert_eq!(parse_response("- **Prep_Stress**: 4", &targets).unwrap()["Prep_Stress"], 4);
}

#[test]
fn recording_then_replay() {
    let dir = tempfile::tempdir().unwrap();
    let rec = RecordingProvider::new(StubProvider, dir.path()).unwrap();
    let ctx = context(80, 11);
    let engine = Engine::new(MethodConfig::new(MethodKind::Marginal), ctx.clone(), 1).unwrap();
    let persona = persona_from(&ctx, true);
    let live = engine.predict(&persona, &rec).unwrap();
    let replayed = engine.predict(&persona, &ReplayProvider::new(dir.path())).unwrap();
    assert_eq!(live.answers, replayed.answers);
    let other = persona_from(&ctx, false);
    let miss = engine.predict(&other, &ReplayProvider::new(dir.path()));
    assert!(miss.is_err() || other.answers == persona.answers);
}

#[test]
fn live_provider_requires_environment() {
    if std::env::var("PMTKG_LLM_URL").is_err() {
        assert!(LiveProvider::from_env().is_err());
    }
}

#[test]
fn deltas_threshold_and_degenerate_cases() {
    let cb = Arc::new(Codebook::milton());
    let f = cb.require("Prep_Start").unwrap();
    let base = generate(&GeneratorConfig::milton_like().with_n_seed(12, 3), cb.clone()).unwrap();
    // Set Prep_Start so compound mean and overall mean differ by a known amount.
    let mut ds = base.clone();
    let compound: Vec<bool> = ds.respondents.iter().map(|r| r.flags.compound).collect();
    let nc = compound.iter().filter(|&&c| c).count();
    assert!(nc > 0 && nc < 12);
    for (i, r) in ds.respondents.iter_mut().enumerate() {
        r.answers[f] = Some(if compound[i] { 0 } else { 2 });
    }
    let d = vulnerability_deltas(&ds, 0.10);
    let all_mean = (nc as f64 * 1.0 + (12 - nc) as f64 * 3.0) / 12.0;
    assert!((d["Prep_Start"] - (1.0 - all_mean)).abs() < 1e-12);
    let mut only = ds.clone();
    only.respondents.retain(|r| r.flags.compound);
    assert!(vulnerability_deltas(&only, 0.10).is_empty());
    let mut none = ds.clone();
    none.respondents.retain(|r| !r.flags.compound);
    assert!(vulnerability_deltas(&none, 0.10).is_empty());
}

#[test]
fn gower_hand_values_and_peer_ranking() {
    let cb = Arc::new(Codebook::milton());
    let ds = generate(&GeneratorConfig::milton_like().with_n_seed(20, 4), cb.clone()).unwrap();
    let a = &ds.respondents[0].answers;
    let b = &ds.respondents[1].answers;
    let fields = cb.block_fields(Block::A);
    let mut hand = 0.0;
    for &f in &fields {
        let spec = &cb.fields[f];
        let (x, y) = (a[f].unwrap(), b[f].unwrap());
        hand += if spec.is_ordinal() {
            let levels = spec.level_count() as f64;
            (x as f64 - y as f64).abs() / (levels - 1.0)
        } else {
            (x != y) as u8 as f64
        };
    }
    hand /= fields.len() as f64;
    let w = BTreeMap::new();
    assert!((gower(&cb, a, b, &w) - hand).abs() < 1e-12);
    let peers = nearest_peers(a, &ds, 5, &w);
    assert_eq!(peers[0].0.id, ds.respondents[0].id);
    assert_eq!(peers[0].1, 0.0);
    assert!(peers.windows(2).all(|p| p[0].1 < p[1].1 || (p[0].1 == p[1].1 && p[0].0.id < p[1].0.id)));
    assert_eq!(nearest_peers(a, &ds, 20, &w).len(), 20);
}

#[test]
fn hashed_embedder_matches_brute_force() {
    let e = HashedEmbedder::default();
    let text = "Age: 35-44\nIncome: Under $20,000\nIncome: again";
    let v = e.embed(text).unwrap();
    let mut counts = vec![0.0; e.dim];
    for t in ["age", "35", "44", "income", "under", "20", "000", "income", "again"] {
        counts[e.bucket(t)] += 1.0;
    }
    let norm = counts.iter().map(|x: &f64| x * x).sum::<f64>().sqrt();
    for (a, b) in v.iter().zip(&counts) {
        assert!((a - b / norm).abs() < 1e-12);
    }
    assert!((cosine(&v, &v) - 1.0).abs() < 1e-12);
}
