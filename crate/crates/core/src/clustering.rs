//! Behavior clustering: group aspects into named metrics with definitions
//! and example lists, extend an existing set without touching its
//! definitions, and strip examples for ablations.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::gateway::{field, Gateway, ModelRequest, ModelRole, OutputSchema, SchemaType};
use crate::model::{Aspect, Metric, MetricSet, Provenance, Sign};
use crate::text::{normalize_whitespace, tagged, unique_slug};

const CARDINALITY_REPROMPTS: u32 = 3;
const SCHEMA_REPROMPTS: u32 = 1;
const FROZEN_REPROMPTS: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    /// Approximate token budget for the rendered aspect list (4 chars/token).
    pub token_budget: usize,
    /// Nouns for the "don't limit to one particular ..." instruction.
    pub domain_nouns: [String; 2],
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            token_budget: 100_000,
            domain_nouns: ["website".to_string(), "character".to_string()],
        }
    }
}

fn granularity_instruction(cfg: &ClusterConfig) -> String {
    format!(
        "The granularity of the grouping should be minimal; only very similar behaviors are grouped \
         together; but don't limit to one particular {} or one particular {}.",
        cfg.domain_nouns[0], cfg.domain_nouns[1]
    )
}

fn metric_shape_instruction() -> &'static str {
    "Each metric has a short name, a definition summarizing the criteria of positive behavior, \
     the ids of positive aspects that are good examples (good_aspects) and the ids of negative \
     aspects that are bad examples (bad_aspects). A positive and a negative aspect about the same \
     dimension of behavior belong to the same metric. Every metric needs at least one example."
}

fn cluster_schema(with_id: bool) -> OutputSchema {
    let mut fields = Vec::new();
    if with_id {
        fields.push(field("id", SchemaType::String));
    }
    fields.extend([
        field("name", SchemaType::String),
        field("definition", SchemaType::String),
        field("good_aspects", SchemaType::array(SchemaType::String)),
        field("bad_aspects", SchemaType::array(SchemaType::String)),
    ]);
    OutputSchema::new(
        "metrics",
        vec![field("metrics", SchemaType::array(SchemaType::object(fields)))],
    )
}

#[derive(Debug, Clone, Deserialize)]
struct RawMetric {
    #[serde(default)]
    id: String,
    name: String,
    definition: String,
    good_aspects: Vec<String>,
    bad_aspects: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct RawMetrics {
    metrics: Vec<RawMetric>,
}

/// Aspects in seeded presentation order, truncated round-robin per sign to
/// fit the token budget.
fn present_aspects<'a>(aspects: &'a [Aspect], seed: u64, cfg: &ClusterConfig) -> Result<Vec<&'a Aspect>> {
    let mut order: Vec<&Aspect> = aspects.iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cost = |a: &Aspect| render_aspect(a).to_string().chars().count() / 4 + 1;
    let total: usize = order.iter().map(|a| cost(a)).sum();
    if total <= cfg.token_budget {
        return Ok(order);
    }
    let (pos, neg): (Vec<&Aspect>, Vec<&Aspect>) = order.iter().partition(|a| a.sign == Sign::Positive);
    let (mut pi, mut ni, mut used) = (0, 0, 0);
    let mut kept = Vec::new();
    let mut take_pos = true;
    while pi < pos.len() || ni < neg.len() {
        let next = if (take_pos && pi < pos.len()) || ni >= neg.len() {
            pi += 1;
            pos[pi - 1]
        } else {
            ni += 1;
            neg[ni - 1]
        };
        take_pos = !take_pos;
        let c = cost(next);
        if used + c > cfg.token_budget {
            break;
        }
        used += c;
        kept.push(next);
    }
    if kept.len() * 2 < aspects.len() {
        return Err(Error::PromptBudget(format!(
            "only {} of {} aspects fit in {} tokens",
            kept.len(),
            aspects.len(),
            cfg.token_budget
        )));
    }
    tracing::warn!(kept = kept.len(), total = aspects.len(), "aspect list truncated to fit the prompt budget");
    let keep: HashSet<&str> = kept.iter().map(|a| a.id.as_str()).collect();
    Ok(order.into_iter().filter(|a| keep.contains(a.id.as_str())).collect())
}

fn render_aspect(a: &Aspect) -> serde_json::Value {
    json!({
        "id": a.id,
        "sign": a.sign.as_str(),
        "feedback": a.feedback_text,
        "behavior": a.behavior.excerpt,
    })
}

fn render_aspects(aspects: &[&Aspect]) -> String {
    let list: Vec<_> = aspects.iter().map(|a| render_aspect(a)).collect();
    serde_json::to_string_pretty(&list).unwrap_or_default()
}

enum Issue {
    Cardinality { expected: usize, got: usize },
    Schema(String),
    Frozen(String),
}

impl Issue {
    fn correction(&self) -> String {
        match self {
            Issue::Cardinality { expected, got } => format!(
                "You returned {got} metrics. Return exactly {expected} metrics."
            ),
            Issue::Schema(m) => format!("{m} Fix this and reply again."),
            Issue::Frozen(id) => format!(
                "The existing metric {id} was changed or dropped. Do not change the definitions of the \
                 existing metrics: copy every existing metric's id, name and definition exactly, and \
                 only add examples or new metrics."
            ),
        }
    }
}

/// Send `req` and re-prompt on validation issues, each kind within its own
/// re-prompt budget.
fn run<T>(gw: &Gateway, req: ModelRequest, mut validate: impl FnMut(Vec<RawMetric>) -> std::result::Result<T, Issue>) -> Result<T> {
    let (mut card, mut schema, mut frozen) = (0, 0, 0);
    let mut current = req;
    loop {
        let resp = gw.complete(&current)?;
        let raw: RawMetrics = serde_json::from_value(resp.structured.clone().unwrap_or_default())
            .map_err(|e| Error::Schema(e.to_string()))?;
        let issue = match validate(raw.metrics) {
            Ok(v) => return Ok(v),
            Err(issue) => issue,
        };
        let (used, budget) = match &issue {
            Issue::Cardinality { .. } => (&mut card, CARDINALITY_REPROMPTS),
            Issue::Schema(_) => (&mut schema, SCHEMA_REPROMPTS),
            Issue::Frozen(_) => (&mut frozen, FROZEN_REPROMPTS),
        };
        if *used >= budget {
            return Err(match issue {
                Issue::Cardinality { expected, got } => Error::Cardinality { expected, got },
                Issue::Schema(m) => Error::Schema(m),
                Issue::Frozen(metric_id) => Error::FrozenDefinition { metric_id },
            });
        }
        *used += 1;
        tracing::debug!(correction = %issue.correction(), "re-prompting clusterer");
        current = current.followup(&resp.text, issue.correction());
    }
}

/// Examples for a raw metric, routed by the referenced aspect's sign.
/// Unknown ids are ignored.
fn resolve_examples(raw: &RawMetric, by_id: &HashMap<&str, &Aspect>) -> (Vec<String>, Vec<String>) {
    let mut good = Vec::new();
    let mut bad = Vec::new();
    for id in raw.good_aspects.iter().chain(&raw.bad_aspects) {
        let Some(a) = by_id.get(id.trim()) else {
            tracing::warn!(aspect = %id, "clusterer referenced an unknown aspect");
            continue;
        };
        let list = match a.sign {
            Sign::Positive => &mut good,
            Sign::Negative => &mut bad,
        };
        let ex = normalize_whitespace(&a.behavior.excerpt);
        if !list.contains(&ex) {
            list.push(ex);
        }
    }
    (good, bad)
}

fn check_new_metric(raw: &RawMetric, good: &[String], bad: &[String]) -> std::result::Result<(), Issue> {
    if raw.definition.trim().is_empty() || raw.name.trim().is_empty() {
        return Err(Issue::Schema(format!("Metric {:?} has an empty name or definition.", raw.name)));
    }
    if good.is_empty() && bad.is_empty() {
        return Err(Issue::Schema(format!(
            "Metric {:?} has no examples; reference at least one aspect id from the list.",
            raw.name
        )));
    }
    Ok(())
}

pub fn cluster_request(gw: &Gateway, presented: &[&Aspect], n: usize, seed: u64, cfg: &ClusterConfig) -> ModelRequest {
    let system = format!(
        "You cluster grounded feedback aspects about AI agent behavior into evaluation metrics. \
         Group the aspects into exactly {n} metrics. {} {}",
        granularity_instruction(cfg),
        metric_shape_instruction()
    );
    let user = format!(
        "{}\n\nReturn exactly {n} metrics.",
        tagged("aspects", &render_aspects(presented))
    );
    gw.request(ModelRole::Clusterer)
        .system(system)
        .user(user)
        .schema(cluster_schema(false))
        .seed(seed)
}

/// Cluster aspects into exactly `n` metrics.
pub fn cluster_aspects(gw: &Gateway, aspects: &[Aspect], n: usize, seed: u64, cfg: &ClusterConfig) -> Result<MetricSet> {
    cluster_aspects_with(
        gw,
        aspects,
        n,
        Provenance {
            seed,
            candidate_index: 0,
            examples_stripped: false,
        },
        cfg,
    )
}

/// [`cluster_aspects`] with explicit provenance; the seed in `provenance`
/// drives presentation order and the request seed hint.
pub fn cluster_aspects_with(
    gw: &Gateway,
    aspects: &[Aspect],
    n: usize,
    provenance: Provenance,
    cfg: &ClusterConfig,
) -> Result<MetricSet> {
    if aspects.is_empty() {
        return Err(Error::InvalidArgument("no aspects to cluster".into()));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("metric count must be at least 1".into()));
    }
    let presented = present_aspects(aspects, provenance.seed, cfg)?;
    let by_id: HashMap<&str, &Aspect> = aspects.iter().map(|a| (a.id.as_str(), a)).collect();
    let req = cluster_request(gw, &presented, n, provenance.seed, cfg);
    let metrics = run(gw, req, |raw| {
        if raw.len() != n {
            return Err(Issue::Cardinality {
                expected: n,
                got: raw.len(),
            });
        }
        let mut taken = HashSet::new();
        let mut out = Vec::with_capacity(n);
        for r in &raw {
            let (good, bad) = resolve_examples(r, &by_id);
            check_new_metric(r, &good, &bad)?;
            out.push(Metric {
                id: unique_slug(&r.name, &mut taken),
                name: r.name.trim().to_string(),
                definition: r.definition.trim().to_string(),
                good_examples: good,
                bad_examples: bad,
            });
        }
        Ok(out)
    })?;
    Ok(MetricSet {
        id: MetricSet::content_id(None, n, &provenance, &metrics),
        parent_id: None,
        requested_n: n,
        provenance,
        metrics,
    })
}

pub fn iterative_request(
    gw: &Gateway,
    presented: &[&Aspect],
    existing: &MetricSet,
    seed: u64,
    cfg: &ClusterConfig,
) -> ModelRequest {
    let system = format!(
        "You cluster grounded feedback aspects about AI agent behavior into evaluation metrics. \
         You are given existing metrics. Do not change the definitions of the existing metrics: \
         return every existing metric with its id, name and definition copied exactly. Only add new \
         behaviors to the existing metrics as examples, and add new metrics if necessary, with an \
         empty id. {} {}",
        granularity_instruction(cfg),
        metric_shape_instruction()
    );
    let frozen: Vec<_> = existing
        .metrics
        .iter()
        .map(|m| json!({"id": m.id, "name": m.name, "definition": m.definition}))
        .collect();
    let user = format!(
        "{}\n\n{}",
        tagged("existing_metrics", &serde_json::to_string_pretty(&frozen).unwrap_or_default()),
        tagged("aspects", &render_aspects(presented))
    );
    gw.request(ModelRole::Clusterer)
        .system(system)
        .user(user)
        .schema(cluster_schema(true))
        .seed(seed)
}

/// Extend `existing` with examples and new metrics drawn from `aspects`.
/// Existing (id, name, definition) triples are kept byte-identical; a reply
/// that alters or drops one gets one corrective re-prompt.
pub fn cluster_iterative(
    gw: &Gateway,
    aspects: &[Aspect],
    existing: &MetricSet,
    seed: u64,
    cfg: &ClusterConfig,
) -> Result<MetricSet> {
    if aspects.is_empty() {
        return Err(Error::InvalidArgument("no aspects to cluster".into()));
    }
    let presented = present_aspects(aspects, seed, cfg)?;
    let by_id: HashMap<&str, &Aspect> = aspects.iter().map(|a| (a.id.as_str(), a)).collect();
    let req = iterative_request(gw, &presented, existing, seed, cfg);
    let metrics = run(gw, req, |raw| {
        for m in &existing.metrics {
            let kept = raw
                .iter()
                .any(|r| r.id == m.id && r.name == m.name && r.definition == m.definition);
            if !kept {
                return Err(Issue::Frozen(m.id.clone()));
            }
        }
        let mut merged: Vec<Metric> = existing.metrics.clone();
        let mut taken: HashSet<String> = existing.metrics.iter().map(|m| m.id.clone()).collect();
        let mut seen_existing = HashSet::new();
        for r in &raw {
            let (good, bad) = resolve_examples(r, &by_id);
            if let Some(slot) = merged.iter_mut().find(|m| m.id == r.id && !r.id.is_empty()) {
                if !seen_existing.insert(r.id.clone()) {
                    continue;
                }
                for g in good {
                    if !slot.good_examples.contains(&g) {
                        slot.good_examples.push(g);
                    }
                }
                for b in bad {
                    if !slot.bad_examples.contains(&b) {
                        slot.bad_examples.push(b);
                    }
                }
                continue;
            }
            check_new_metric(r, &good, &bad)?;
            merged.push(Metric {
                id: unique_slug(&r.name, &mut taken),
                name: r.name.trim().to_string(),
                definition: r.definition.trim().to_string(),
                good_examples: good,
                bad_examples: bad,
            });
        }
        Ok(merged)
    })?;
    let provenance = Provenance {
        seed,
        candidate_index: 0,
        examples_stripped: false,
    };
    Ok(MetricSet {
        id: MetricSet::content_id(Some(&existing.id), metrics.len(), &provenance, &metrics),
        parent_id: Some(existing.id.clone()),
        requested_n: metrics.len(),
        provenance,
        metrics,
    })
}

/// Same metrics with every example removed. Idempotent.
pub fn strip_examples(ms: &MetricSet) -> MetricSet {
    if ms.provenance.examples_stripped {
        return ms.clone();
    }
    let mut out = ms.clone();
    out.id = format!("{}-stripped", ms.id);
    out.provenance.examples_stripped = true;
    for m in &mut out.metrics {
        m.good_examples.clear();
        m.bad_examples.clear();
    }
    out
}

/// Re-stamp a set with new provenance, recomputing its content id.
pub fn with_provenance(mut ms: MetricSet, provenance: Provenance) -> MetricSet {
    ms.id = MetricSet::content_id(ms.parent_id.as_deref(), ms.requested_n, &provenance, &ms.metrics);
    ms.provenance = provenance;
    ms
}
