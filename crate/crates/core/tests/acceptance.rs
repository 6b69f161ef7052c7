//! Acceptance checks, one line per criterion. Runs offline against scripted
//! models and cassettes. Exits non-zero if any criterion fails.

mod common;

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use num_bigint::BigInt;
use num_rational::{BigRational, Ratio};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use induct_core::clustering::{cluster_aspects, cluster_iterative, strip_examples, ClusterConfig};
use induct_core::gateway::{Cassette, CassetteMode, ChatBackend, Gateway, GatewayConfig, ModelRequest, ScriptedBackend};
use induct_core::grounding::{ground_all, ground_feedback};
use induct_core::judging::{failure_rate, metric_score};
use induct_core::ladder::{
    keydoor::{self, Action, Layout},
    ladder_report, run_episode, DirectiveAgent, Ladder,
};
use induct_core::metaeval::{evaluate_metric_set, match_instance, oracle_match, quality_report, Instance};
use induct_core::optimizer::{optimize, select_best, CandidateScore, OptimizerConfig, StopReason};
use induct_core::workspace::{RunDir, Workspace};
use induct_core::{
    Aspect, BehaviorRef, Error, Feedback, Fraction, InstanceId, Metric, MetricSet, Provenance, Rating,
    RatingValue, Sign, Split, Step, Trait, Trajectory,
};

use common::{gateway, ladder_world, number_in, theme_clusterer_with, theme_grounder, theme_judge, theme_matcher};

const ORACLE_INSTANCES: usize = 50;
const ORACLE_MAX_ASPECTS: usize = 6;
const ORACLE_MAX_TRAITS: usize = 6;
const ORACLE_TIME_LIMIT: Duration = Duration::from_secs(5);
const FORMULA_MULTISETS: usize = 1_000;
const SELECTION_LISTS: usize = 10_000;
const SELECTION_SHUFFLES: usize = 100;
const SELECTION_BAND: f64 = 0.01;
const TRACE_MAX_ROUNDS: usize = 3;
const FROZEN_FIXTURES: usize = 200;
const ABLATION_FIXTURES: usize = 20;
const E2E_TRAJECTORIES: usize = 12;
const E2E_HOLDOUT: f64 = 0.2;
const E2E_SEED: u64 = 7;
const LADDER_GOLDEN: &str = include_str!("fixtures/ladder_golden.csv");
const GROUNDING_CASES: usize = 256;

fn main() {
    let criteria: [(&str, fn()); 9] = [
        ("coverage/redundancy oracle", oracle_agreement),
        ("formula fidelity", formula_fidelity),
        ("selection-rule fidelity", selection_rule),
        ("optimizer loop trace", optimizer_trace),
        ("frozen definitions", frozen_definitions),
        ("ablation direction", ablation_direction),
        ("end-to-end determinism", end_to_end_determinism),
        ("ladder statistics", ladder_statistics),
        ("grounding bounds", grounding_bounds),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        match catch_unwind(AssertUnwindSafe(check)) {
            Ok(()) => println!("PASS  {name} ({:.2?})", start.elapsed()),
            Err(e) => {
                failed += 1;
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                println!("FAIL  {name}: {msg}");
            }
        }
    }
    let _ = std::panic::take_hook();
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn sign(rng: &mut ChaCha8Rng) -> Sign {
    if rng.random_bool(0.5) {
        Sign::Positive
    } else {
        Sign::Negative
    }
}

fn aspect(id: &str, traj: &str, s: Sign) -> Aspect {
    Aspect {
        id: id.to_string(),
        feedback_id: format!("fb-{traj}"),
        trajectory_id: traj.to_string(),
        sign: s,
        feedback_text: format!("feedback for {id}"),
        behavior: BehaviorRef {
            step_start: 0,
            step_end: 0,
            excerpt: format!("behavior {id}"),
        },
    }
}

fn metric(id: &str) -> Metric {
    Metric {
        id: id.to_string(),
        name: id.to_string(),
        definition: format!("definition of {id}"),
        good_examples: vec![],
        bad_examples: vec![],
    }
}

fn metric_set(ids: &[String]) -> MetricSet {
    let metrics: Vec<Metric> = ids.iter().map(|i| metric(i)).collect();
    let provenance = Provenance::default();
    MetricSet {
        id: MetricSet::content_id(None, metrics.len(), &provenance, &metrics),
        parent_id: None,
        requested_n: metrics.len(),
        provenance,
        metrics,
    }
}

// ---------------------------------------------------------------------------

struct OracleCase {
    id: InstanceId,
    aspects: Vec<Aspect>,
    traits: Vec<Trait>,
    relation: Vec<(String, String)>,
}

/// Every assignment of aspects to (related trait | nothing); keep the one with
/// the most matched aspects, then the lexicographically smallest pair list.
fn exhaustive_pairs(c: &OracleCase) -> Vec<(String, String)> {
    let choices: Vec<Vec<Option<&str>>> = c
        .aspects
        .iter()
        .map(|_| {
            std::iter::once(None)
                .chain(c.traits.iter().map(|t| Some(t.metric_id.as_str())))
                .collect()
        })
        .collect();
    let related: HashSet<(&str, &str)> = c.relation.iter().map(|(a, t)| (a.as_str(), t.as_str())).collect();
    let mut best: Option<(usize, Vec<(String, String)>)> = None;
    let mut idx = vec![0usize; c.aspects.len()];
    loop {
        let mut ok = true;
        let mut pairs = Vec::new();
        for (k, a) in c.aspects.iter().enumerate() {
            if let Some(t) = choices[k][idx[k]] {
                let tr = c.traits.iter().find(|x| x.metric_id == t).unwrap();
                if !related.contains(&(a.id.as_str(), t)) || tr.polarity != a.sign {
                    ok = false;
                    break;
                }
                pairs.push((a.id.clone(), t.to_string()));
            }
        }
        if ok {
            pairs.sort();
            let better = match &best {
                None => true,
                Some((n, p)) => pairs.len() > *n || (pairs.len() == *n && pairs < *p),
            };
            if better {
                best = Some((pairs.len(), pairs));
            }
        }
        // odometer increment
        let mut k = 0;
        loop {
            if k == idx.len() {
                return best.map(|b| b.1).unwrap_or_default();
            }
            idx[k] += 1;
            if idx[k] < choices[k].len() {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

fn oracle_cases(rng: &mut ChaCha8Rng) -> Vec<OracleCase> {
    (0..ORACLE_INSTANCES)
        .map(|i| {
            let traj = format!("t{i:02}");
            let aspects: Vec<Aspect> = (0..rng.random_range(1..=ORACLE_MAX_ASPECTS))
                .map(|k| aspect(&format!("{traj}-a{k}"), &traj, sign(rng)))
                .collect();
            let traits: Vec<Trait> = (0..rng.random_range(0..=ORACLE_MAX_TRAITS))
                .map(|k| Trait {
                    trajectory_id: traj.clone(),
                    metric_id: format!("m{k}"),
                    polarity: sign(rng),
                })
                .collect();
            let density: f64 = rng.random_range(0.1..0.9);
            let mut relation = Vec::new();
            for a in &aspects {
                for t in &traits {
                    if t.polarity == a.sign && rng.random_bool(density) {
                        relation.push((a.id.clone(), t.metric_id.clone()));
                    }
                }
            }
            OracleCase {
                id: InstanceId {
                    trajectory_id: traj.clone(),
                    feedback_id: format!("fb-{traj}"),
                },
                aspects,
                traits,
                relation,
            }
        })
        .collect()
}

fn oracle_agreement() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cases = oracle_cases(&mut rng);
    let table: Arc<HashMap<String, Vec<String>>> = Arc::new(cases.iter().flat_map(|c| c.relation.iter()).fold(
        HashMap::new(),
        |mut m, (a, t)| {
            m.entry(a.clone()).or_insert_with(Vec::new).push(t.clone());
            m
        },
    ));
    // Similarity-table matcher: for each aspect, the smallest listed trait id
    // that the table relates to it.
    let tbl = table.clone();
    let (g, _) = gateway(move |req| {
        let traits: Vec<String> = common::block_json(req, "traits")
            .as_array()
            .unwrap()
            .iter()
            .map(|t| t["id"].as_str().unwrap().to_string())
            .collect();
        let matches: Vec<Value> = common::block_json(req, "aspects")
            .as_array()
            .unwrap()
            .iter()
            .map(|a| {
                let id = a["id"].as_str().unwrap();
                let pick = tbl
                    .get(id)
                    .into_iter()
                    .flatten()
                    .filter(|t| traits.contains(t))
                    .min()
                    .cloned();
                json!({"aspect_id": id, "trait_id": pick})
            })
            .collect();
        json!({ "matches": matches }).to_string()
    });
    let ms = metric_set(&(0..ORACLE_MAX_TRAITS).map(|k| format!("m{k}")).collect::<Vec<_>>());

    let mut model_records = Vec::new();
    let mut oracle_records = Vec::new();
    let (mut aspects_total, mut aspects_matched, mut traits_total, mut traits_unmatched) = (0u64, 0u64, 0u64, 0u64);
    for c in &cases {
        let rec = match_instance(&g, c.id.clone(), &c.aspects, &c.traits, &ms).unwrap();
        let orc = oracle_match(c.id.clone(), &c.aspects, &c.traits, &c.relation);
        let expected = exhaustive_pairs(c);
        let mut got: Vec<(String, String)> = rec
            .pairs
            .iter()
            .filter_map(|p| p.matched.as_ref().map(|t| (p.aspect_id.clone(), t.metric_id.clone())))
            .collect();
        got.sort();
        assert_eq!(got, expected, "model matching differs from exhaustive search on {}", c.id.trajectory_id);
        assert_eq!(rec, orc, "model matching differs from oracle_match on {}", c.id.trajectory_id);
        let hit: BTreeSet<&str> = expected.iter().map(|(_, t)| t.as_str()).collect();
        aspects_total += c.aspects.len() as u64;
        aspects_matched += expected.len() as u64;
        traits_total += c.traits.len() as u64;
        traits_unmatched += c.traits.iter().filter(|t| !hit.contains(t.metric_id.as_str())).count() as u64;
        model_records.push(rec);
        oracle_records.push(orc);
    }
    let a = quality_report(&model_records, &ms.id, Split::All).unwrap();
    let b = quality_report(&oracle_records, &ms.id, Split::All).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        (a.counts.aspects_total, a.counts.aspects_matched, a.counts.traits_total, a.counts.traits_unmatched),
        (aspects_total, aspects_matched, traits_total, traits_unmatched)
    );
    assert_eq!(
        Ratio::new(a.coverage.numerator(), a.coverage.denominator()),
        Ratio::new(aspects_matched, aspects_total)
    );
    match a.redundancy {
        Some(r) => assert_eq!(
            Ratio::new(r.numerator(), r.denominator()),
            Ratio::new(traits_unmatched, traits_total)
        ),
        None => assert_eq!(traits_total, 0),
    }
    let elapsed = start.elapsed();
    assert!(elapsed < ORACLE_TIME_LIMIT, "took {elapsed:?}");
}

// ---------------------------------------------------------------------------

fn formula_fidelity() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let values = [RatingValue::PlusOne, RatingValue::MinusOne, RatingValue::NotApplicable];
    for case in 0..FORMULA_MULTISETS {
        let len = rng.random_range(0..40);
        let ratings: Vec<Rating> = (0..len)
            .map(|k| Rating {
                trajectory_id: format!("t{k}"),
                metric_id: if rng.random_bool(0.8) { "target".into() } else { "other".into() },
                value: *values.choose(&mut rng).unwrap(),
                rationale: String::new(),
            })
            .collect();
        let (mut pos, mut neg) = (0u64, 0u64);
        for r in ratings.iter().filter(|r| r.metric_id == "target") {
            match r.value.as_str() {
                "+1" => pos += 1,
                "-1" => neg += 1,
                _ => {}
            }
        }
        let score = metric_score(&ratings, "target");
        let failure = failure_rate(&ratings, "target");
        if pos + neg == 0 {
            assert!(score.is_none() && failure.is_none(), "case {case}: defined without ±1 ratings");
            continue;
        }
        let s = score.unwrap();
        let f = failure.unwrap();
        let s = Ratio::new(s.numerator(), s.denominator());
        let f = Ratio::new(f.numerator(), f.denominator());
        assert_eq!(s, Ratio::new(pos, pos + neg), "case {case}: score");
        assert_eq!(f, Ratio::new(neg, pos + neg), "case {case}: failure rate");
        assert_eq!(s + f, Ratio::from_integer(1), "case {case}: score + failure");
    }
}

// ---------------------------------------------------------------------------

fn big(f: Fraction) -> BigRational {
    BigRational::new(BigInt::from(f.numerator()), BigInt::from(f.denominator()))
}

/// The rule written out directly: keep coverage ≥ max − band, then least
/// redundancy (undefined last), smaller n, lower candidate index, id.
fn selection_oracle(list: &[CandidateScore], band: &BigRational) -> String {
    let best = list.iter().map(|c| big(c.coverage)).max().unwrap();
    let floor = best - band;
    let mut keep: Vec<&CandidateScore> = list.iter().filter(|c| big(c.coverage) >= floor).collect();
    keep.sort_by(|a, b| {
        let ra = a.redundancy.map(big);
        let rb = b.redundancy.map(big);
        let red = match (ra, rb) {
            (Some(x), Some(y)) => x.cmp(&y),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => std::cmp::Ordering::Equal,
        };
        red.then(a.metric_set.requested_n.cmp(&b.metric_set.requested_n))
            .then(a.metric_set.provenance.candidate_index.cmp(&b.metric_set.provenance.candidate_index))
            .then(a.metric_set.id.cmp(&b.metric_set.id))
    });
    keep[0].metric_set.id.clone()
}

fn random_fraction(rng: &mut ChaCha8Rng) -> Fraction {
    let den = *[100u64, 200, 7, 24, 1000].choose(rng).unwrap();
    Fraction::new(rng.random_range(0..=den), den).unwrap()
}

fn selection_rule() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let band_f = Fraction::from_decimal(SELECTION_BAND).unwrap();
    let band = BigRational::new(BigInt::from(1), BigInt::from(100));
    assert_eq!(big(band_f), band);
    for case in 0..SELECTION_LISTS {
        let len = rng.random_range(1..=12);
        let mut list: Vec<CandidateScore> = (0..len)
            .map(|k| {
                let n = rng.random_range(4..=13);
                let metrics: Vec<Metric> = (0..n).map(|i| metric(&format!("m{i}"))).collect();
                let idx = rng.random_range(0..20);
                CandidateScore {
                    metric_set: MetricSet {
                        id: format!("ms-{case}-{k}"),
                        parent_id: None,
                        requested_n: n,
                        provenance: Provenance {
                            seed: 0,
                            candidate_index: idx,
                            examples_stripped: false,
                        },
                        metrics,
                    },
                    coverage: random_fraction(&mut rng),
                    redundancy: if rng.random_bool(0.1) { None } else { Some(random_fraction(&mut rng)) },
                }
            })
            .collect();
        // Plant exact band-edge candidates now and then.
        if rng.random_bool(0.3) && len > 1 {
            let c0 = list[0].coverage;
            if let Some(edge) = c0.checked_sub(&band_f) {
                list[1].coverage = edge;
            }
        }
        let expected = selection_oracle(&list, &band);
        assert_eq!(select_best(&list, band_f).unwrap().metric_set.id, expected, "list {case}");
        for _ in 0..SELECTION_SHUFFLES {
            list.shuffle(&mut rng);
            assert_eq!(select_best(&list, band_f).unwrap().metric_set.id, expected, "list {case}, shuffled");
        }
    }
}

// ---------------------------------------------------------------------------

fn theme_world_gateway() -> Gateway {
    gateway(common::theme_world).0
}

fn optimizer_trace() {
    let g = theme_world_gateway();
    let instances = common::theme_instances(12);
    let cfg = OptimizerConfig::default();
    let out = optimize(&g, &instances, &cfg).unwrap();
    let h = &out.history;

    // Hand-enumerated: coverage(n) = 4·min(n,6)/24; redundancy 0 up to six
    // metrics and k/(2+k) for 6+k (k fillers rated +1 on all 12 trajectories).
    let coverage = |n: usize| Ratio::new(4 * n.min(6) as u64, 24);
    let redundancy = |n: usize| Ratio::new(n.saturating_sub(6) as u64, (2 + n.saturating_sub(6)) as u64);
    let expected_rounds = [([4usize, 13usize], 6usize, 4usize), ([4, 8], 6, 4)];
    assert_eq!(h.rounds.len(), expected_rounds.len(), "round count");
    assert!(h.rounds.len() <= TRACE_MAX_ROUNDS);
    for (r, (range, n_sel, idx_sel)) in h.rounds.iter().zip(expected_rounds) {
        assert_eq!(r.n_range, range, "round {} range", r.round);
        let expected_len = (range[1] - range[0] + 1) * cfg.sets_per_n;
        assert_eq!(r.candidates.len(), expected_len);
        for c in &r.candidates {
            assert_eq!(Ratio::new(c.coverage.numerator(), c.coverage.denominator()), coverage(c.n));
            let red = c.redundancy.unwrap();
            assert_eq!(Ratio::new(red.numerator(), red.denominator()), redundancy(c.n), "n={}", c.n);
        }
        let sel: Vec<_> = r.candidates.iter().filter(|c| c.selected).collect();
        assert_eq!(sel.len(), 1);
        assert_eq!((sel[0].n, sel[0].candidate_index), (n_sel, idx_sel), "round {} selection", r.round);
        // The winner sits inside the band.
        let max = r.candidates.iter().map(|c| c.coverage).max_by(|a, b| a.cmp_value(b)).unwrap();
        let band = Fraction::from_decimal(cfg.coverage_band).unwrap();
        assert!(sel[0].coverage.checked_add(&band).unwrap().cmp_value(&max).is_ge());
    }
    assert_eq!(h.stop_reason, StopReason::RepeatN);
    assert!(h.converged);
    assert_eq!(out.metric_set.metrics.len(), 6);
    assert!(out.report().coverage.same_value(&Fraction::ONE));
    assert_eq!(h.selected_metric_set_id, out.metric_set.id);
}

// ---------------------------------------------------------------------------

fn random_text(rng: &mut ChaCha8Rng, words: usize) -> String {
    const VOCAB: [&str; 12] = [
        "agent", "  spaced", "trailing ", "ünïcödé", "quote\"d", "tab\there", "line", "plan", "step", "—", "task", "x",
    ];
    (0..words).map(|_| *VOCAB.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

fn frozen_definitions() {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let aspects: Vec<Aspect> = (0..4)
        .map(|k| aspect(&format!("a{k}"), "t0", if k % 2 == 0 { Sign::Positive } else { Sign::Negative }))
        .collect();
    for case in 0..FROZEN_FIXTURES {
        let n = rng.random_range(1..=8);
        let metrics: Vec<Metric> = (0..n)
            .map(|k| {
                let words = rng.random_range(3..12);
                (k, random_text(&mut rng, 2), random_text(&mut rng, words))
            })
            .map(|(k, name, definition)| Metric {
                id: format!("metric-{k}"),
                name: format!("Metric {k} {name}"),
                definition,
                good_examples: vec![format!("example {k}")],
                bad_examples: vec![],
            })
            .collect();
        let parent = MetricSet {
            id: format!("ms-parent-{case}"),
            parent_id: None,
            requested_n: n,
            provenance: Provenance::default(),
            metrics,
        };
        let new_metrics = rng.random_range(0..3);

        // Well-behaved: copies existing triples and adds new metrics.
        let (g, _) = gateway(move |req| {
            let existing = common::block_json(req, "existing_metrics");
            let mut out: Vec<Value> = existing
                .as_array()
                .unwrap()
                .iter()
                .map(|m| json!({"id": m["id"], "name": m["name"], "definition": m["definition"], "good_aspects": ["a0"], "bad_aspects": ["a1"]}))
                .collect();
            for j in 0..new_metrics {
                out.push(json!({"id": "", "name": format!("New {j}"), "definition": "Fresh.", "good_aspects": ["a2"], "bad_aspects": []}));
            }
            json!({ "metrics": out }).to_string()
        });
        let child = cluster_iterative(&g, &aspects, &parent, case as u64, &ClusterConfig::default()).unwrap();
        assert_eq!(child.parent_id.as_deref(), Some(parent.id.as_str()));
        assert_eq!(child.metrics.len(), n + new_metrics);
        for m in &parent.metrics {
            let c = child.metric(&m.id).unwrap_or_else(|| panic!("case {case}: {} dropped", m.id));
            assert_eq!(c.name.as_bytes(), m.name.as_bytes(), "case {case}");
            assert_eq!(c.definition.as_bytes(), m.definition.as_bytes(), "case {case}");
        }

        // Misbehaving: rewrites one definition on every attempt.
        let victim = rng.random_range(0..n);
        let edit = rng.random_range(0..3);
        let (bad, backend) = gateway(move |req| {
            let existing = common::block_json(req, "existing_metrics");
            let out: Vec<Value> = existing
                .as_array()
                .unwrap()
                .iter()
                .enumerate()
                .map(|(k, m)| {
                    let mut def = m["definition"].as_str().unwrap().to_string();
                    if k == victim {
                        def = match edit {
                            0 => format!("{def} "),
                            1 => def.to_uppercase() + "!",
                            _ => format!("Improved: {def}"),
                        };
                    }
                    json!({"id": m["id"], "name": m["name"], "definition": def, "good_aspects": ["a0"], "bad_aspects": []})
                })
                .collect();
            json!({ "metrics": out }).to_string()
        });
        match cluster_iterative(&bad, &aspects, &parent, case as u64, &ClusterConfig::default()) {
            Err(Error::FrozenDefinition { metric_id }) => assert_eq!(metric_id, format!("metric-{victim}")),
            other => panic!("case {case}: expected FrozenDefinition, got {other:?}"),
        }
        assert_eq!(backend.calls(), 2, "one corrective re-prompt before failing");
    }
}

// ---------------------------------------------------------------------------

fn ablation_direction() {
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    for case in 0..ABLATION_FIXTURES {
        let trajectories = rng.random_range(6..=12);
        let mut opaque: Vec<usize> = (0..common::THEMES).filter(|_| rng.random_bool(0.5)).collect();
        if opaque.is_empty() {
            opaque.push(rng.random_range(0..common::THEMES));
        }
        let op = opaque.clone();
        let (g, _) = gateway(move |req| match common::kind(req) {
            common::Kind::Clusterer => theme_clusterer_with(req, &op),
            common::Kind::Judge => theme_judge(req),
            common::Kind::Matcher => theme_matcher(req),
            common::Kind::Grounder => theme_grounder(req),
            other => panic!("{other:?}"),
        });
        let instances = common::theme_instances(trajectories);
        let aspects: Vec<Aspect> = instances.iter().flat_map(|i| i.aspects.clone()).collect();
        let ms = cluster_aspects(&g, &aspects, common::THEMES, case as u64, &ClusterConfig::default()).unwrap();
        let full = evaluate_metric_set(&g, &ms, &instances, Split::Train).unwrap().report;
        let stripped_ms = strip_examples(&ms);
        let stripped = evaluate_metric_set(&g, &stripped_ms, &instances, Split::Train).unwrap().report;

        // Planted: aspects on opaque themes can only be matched through examples.
        let planted = aspects
            .iter()
            .filter(|a| opaque.contains(&number_in(&a.feedback_text).unwrap()))
            .count() as u64;
        let total = aspects.len() as u64;
        let f = Ratio::new(full.coverage.numerator(), full.coverage.denominator());
        let s = Ratio::new(stripped.coverage.numerator(), stripped.coverage.denominator());
        assert!(s < f, "case {case}: stripping did not reduce coverage");
        assert_eq!(f - s, Ratio::new(planted, total), "case {case}: decrease differs from planted amount");
    }
}

// ---------------------------------------------------------------------------

fn pipeline_report(gw: &Gateway, root: &std::path::Path) -> Vec<u8> {
    let ws = Workspace::open(root).unwrap();
    let input = root.join("input.jsonl");
    std::fs::write(&input, common::theme_jsonl(E2E_TRAJECTORIES)).unwrap();
    assert_eq!(ws.import_trajectories(&input).unwrap().count, E2E_TRAJECTORIES);
    let split = ws.split_holdout(E2E_HOLDOUT, E2E_SEED).unwrap();
    assert_eq!((split.train.len(), split.holdout.len()), (10, 2));
    for i in 0..E2E_TRAJECTORIES {
        let f = common::theme_feedback(i);
        ws.submit_feedback(&f.trajectory_id, &f.annotator, &f.text, &f.created_at).unwrap();
    }
    let pairs = ws.annotated_pairs(Split::Train).unwrap();
    let refs: Vec<(&Trajectory, &Feedback)> = pairs.iter().map(|(t, f)| (t, f)).collect();
    let aspects = ground_all(gw, &refs).unwrap();
    let instances: Vec<Instance> = pairs
        .iter()
        .zip(aspects)
        .map(|((t, f), aspects)| Instance {
            trajectory: t.clone(),
            feedback: f.clone(),
            aspects,
        })
        .collect();
    let out = optimize(gw, &instances, &OptimizerConfig::default()).unwrap();
    let run = RunDir {
        path: ws.runs_dir().join("e2e"),
    };
    let path = run.write_report(out.report()).unwrap();
    std::fs::read(path).unwrap()
}

fn end_to_end_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cassette_path = dir.path().join("cassette.jsonl");
    let backend: Arc<dyn ChatBackend> = Arc::new(ScriptedBackend::new(|r| Ok(common::theme_world(r))));

    let record = Gateway::with_mode(
        Some(backend),
        Some(Arc::new(Cassette::open(&cassette_path).unwrap())),
        CassetteMode::Record,
        GatewayConfig::default(),
    )
    .unwrap()
    .with_max_parallel(8);
    let recorded = pipeline_report(&record, &dir.path().join("ws-record"));

    let mut reports = vec![recorded];
    for (k, parallel) in [1usize, 8, 1].into_iter().enumerate() {
        let cassette = Arc::new(Cassette::open(&cassette_path).unwrap());
        let replay = Gateway::replay(cassette, GatewayConfig::default()).with_max_parallel(parallel);
        reports.push(pipeline_report(&replay, &dir.path().join(format!("ws-replay-{k}"))));
    }
    for (k, r) in reports.iter().enumerate().skip(1) {
        assert!(r == &reports[0], "report.json differs between run 0 and run {k}");
    }
    let report: Value = serde_json::from_slice(&reports[0]).unwrap();
    assert_eq!(report["split"], "train");
}

// ---------------------------------------------------------------------------

/// Full-state breadth-first search over (position, key held, door open),
/// written against the game rules independently of the environment code.
fn bfs_solution_length(layout: &Layout) -> Option<usize> {
    type S = ((usize, usize), bool, bool);
    let start: S = (layout.start, false, false);
    let mut dist: HashMap<S, usize> = HashMap::from([(start, 0)]);
    let mut queue = VecDeque::from([start]);
    let free = |p: (usize, usize), open: bool| !layout.is_wall(p) && (p != layout.door || open);
    while let Some(s @ (pos, key, open)) = queue.pop_front() {
        let d = dist[&s];
        if pos == layout.goal {
            return Some(d);
        }
        let (x, y) = pos;
        let mut next: Vec<S> = Vec::new();
        for (dx, dy) in [(0i64, -1i64), (0, 1), (-1, 0), (1, 0)] {
            let (nx, ny) = (x as i64 + dx, y as i64 + dy);
            if nx >= 0 && ny >= 0 && free((nx as usize, ny as usize), open) {
                next.push(((nx as usize, ny as usize), key, open));
            }
        }
        if !key && pos == layout.key {
            next.push((pos, true, open));
        }
        let (ddx, ddy) = layout.door;
        if key && !open && x.abs_diff(ddx) + y.abs_diff(ddy) == 1 {
            next.push((pos, key, true));
        }
        for n in next {
            if let std::collections::hash_map::Entry::Vacant(e) = dist.entry(n) {
                e.insert(d + 1);
                queue.push_back(n);
            }
        }
    }
    None
}

fn ladder_statistics() {
    let (g, _) = gateway(ladder_world::models);
    let cfg = ladder_world::config();
    let ladder = Ladder {
        gateway: &g,
        policy: &DirectiveAgent,
        feedback: &ladder_world::feedback,
        config: cfg.clone(),
    };
    let out = ladder.run().unwrap();
    let stages = &out.run.stages;
    assert_eq!(stages.len(), 3);

    let csv = ladder_report(stages);
    assert_eq!(csv, LADDER_GOLDEN, "CSV differs from golden file");

    // Statistics recomputed from the per-iteration means.
    let mut means: Vec<Ratio<u64>> = Vec::new();
    let mut prev_max = Ratio::from_integer(0u64);
    for s in stages {
        assert_eq!(s.iterations.len(), 4);
        assert_eq!(s.annotations, 18);
        for it in &s.iterations {
            let m = Ratio::new(it.mean_score.numerator(), it.mean_score.denominator());
            means.push(m);
            let max = *means.iter().max().unwrap();
            let sum = means.iter().fold(Ratio::from_integer(0u64), |a, b| a + b);
            let avg = sum / Ratio::from_integer(means.len() as u64);
            let rm = Ratio::new(it.running_max_mean.numerator(), it.running_max_mean.denominator());
            let ca = Ratio::new(it.cumulative_avg_mean.numerator(), it.cumulative_avg_mean.denominator());
            assert_eq!(rm, max);
            assert!(rm >= prev_max, "running max decreased");
            prev_max = rm;
            assert_eq!(ca, avg, "cumulative average is not the exact mean");

            // Success rate over the full task set, replayed independently.
            let prompt = &out.run.prompts[&it.prompt_digest];
            let mut wins = 0u64;
            for id in &cfg.runner.full_tasks {
                let t = run_episode(&keydoor::task(id).unwrap(), &DirectiveAgent, prompt, cfg.runner.step_cap, "check").unwrap();
                wins += u64::from(t.success == Some(true));
            }
            let sr = Ratio::new(it.success_rate.numerator(), it.success_rate.denominator());
            assert_eq!(sr, Ratio::new(wins, cfg.runner.full_tasks.len() as u64));
        }
    }
    // Parent chain: stage k+1 extends stage k.
    for w in out.metric_sets.windows(2) {
        assert_eq!(w[1].parent_id.as_deref(), Some(w[0].id.as_str()));
    }
    assert_eq!(out.final_prompt, ladder_world::prompts()[3]);

    // The final prompt solves every task optimally: its action count equals
    // the breadth-first-search optimum.
    for task in keydoor::catalogue() {
        let optimum = bfs_solution_length(&task.layout).expect("solvable");
        let t = run_episode(&task, &DirectiveAgent, &out.final_prompt, 30, "bfs").unwrap();
        assert_eq!(t.success, Some(true), "{}", task.id);
        let actions = t.steps.iter().filter(|s| s.action != "done").count();
        assert_eq!(actions, optimum, "{} is not solved optimally", task.id);
        if task.id == "kd-01" {
            assert!(t.steps.len() <= 12);
        }
        assert!(t.steps.iter().all(|s| s.action == "done" || Action::parse(&s.action).is_some()));
    }
}

// ---------------------------------------------------------------------------

fn grounding_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for case in 0..GROUNDING_CASES {
        let len = rng.random_range(1..=15);
        let t = Trajectory {
            id: format!("t{case}"),
            task: "task".into(),
            agent: String::new(),
            source: String::new(),
            steps: (0..len).map(|i| Step::new(i, format!("obs {i}"), format!("act {i}"))).collect(),
            success: None,
        };
        let f = Feedback {
            id: format!("f{case}"),
            trajectory_id: t.id.clone(),
            annotator: "a".into(),
            text: "Mixed feedback.".into(),
            created_at: String::new(),
        };
        // Two scripted attempts, each a list of raw (start, end) ranges that
        // may fall outside [0, len).
        let mut attempt = || -> Vec<(i64, i64)> {
            (0..rng.random_range(1..=4))
                .map(|_| {
                    let a = rng.random_range(-2..len as i64 + 3);
                    let b = if rng.random_bool(0.8) { a + rng.random_range(0..3) } else { a - 1 };
                    (a, b)
                })
                .collect()
        };
        let attempts = [attempt(), attempt()];
        let valid = |r: &[(i64, i64)]| r.iter().all(|&(a, b)| a >= 0 && a <= b && b < len as i64);
        let scripted = attempts.clone();
        let seen = Arc::new(Mutex::new(0usize));
        let seen2 = seen.clone();
        let (g, _) = gateway(move |req: &ModelRequest| {
            *seen2.lock().unwrap() += 1;
            let ranges = &scripted[req.followups().min(1)];
            let aspects: Vec<Value> = ranges
                .iter()
                .map(|&(a, b)| json!({"feedback_text": format!("part {a}-{b}"), "sign": "negative", "step_start": a, "step_end": b, "excerpt": ""}))
                .collect();
            json!({ "aspects": aspects }).to_string()
        });
        let result = ground_feedback(&g, &t, &f);
        let calls = *seen.lock().unwrap();
        let accepted = if valid(&attempts[0]) {
            assert_eq!(calls, 1, "case {case}");
            attempts[0].len()
        } else if valid(&attempts[1]) {
            assert_eq!(calls, 2, "case {case}: repair path not taken");
            attempts[1].len()
        } else {
            assert_eq!(calls, 2, "case {case}");
            assert!(matches!(result, Err(Error::GroundingBounds { .. })), "case {case}: {result:?}");
            continue;
        };
        let aspects = result.unwrap();
        assert_eq!(aspects.len(), accepted);
        for a in aspects {
            assert!(a.behavior.step_start <= a.behavior.step_end && a.behavior.step_end < len, "case {case}");
        }
    }
}
