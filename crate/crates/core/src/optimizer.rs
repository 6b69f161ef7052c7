//! Metric-set search: generate candidate sets over a range of sizes, score
//! each by coverage and redundancy, keep the lowest-redundancy candidate
//! within a coverage band of the best, and narrow the size range around the
//! winner until the selection stabilises.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::clustering::{cluster_aspects_with, ClusterConfig};
use crate::error::{Error, Result};
use crate::fraction::Fraction;
use crate::gateway::{parallel_map, parallel_map_results, Gateway};
use crate::metaeval::{evaluate_metric_set, Evaluation, Instance};
use crate::model::{Aspect, MetricSet, Provenance, QualityReport, Split};
use crate::text::sha256_hex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub n_min: usize,
    pub n_max: usize,
    pub sets_per_n: usize,
    pub coverage_band: f64,
    pub refine_radius: usize,
    pub max_rounds: usize,
    pub seed: u64,
    /// Absolute change in both coverage and redundancy below which the
    /// selection counts as converged.
    pub tolerance: f64,
    pub clustering: ClusterConfig,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            n_min: 4,
            n_max: 13,
            sets_per_n: 2,
            coverage_band: 0.01,
            refine_radius: 2,
            max_rounds: 5,
            seed: 0,
            tolerance: 0.005,
            clustering: ClusterConfig::default(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.n_min < 1 {
            return bad("n_min must be at least 1");
        }
        if self.n_min > self.n_max {
            return bad("n_min must not exceed n_max");
        }
        if self.sets_per_n < 1 {
            return bad("sets_per_n must be at least 1");
        }
        if self.max_rounds < 1 {
            return bad("max_rounds must be at least 1");
        }
        if Fraction::from_decimal(self.coverage_band).is_none() {
            return bad("coverage_band must be a non-negative number");
        }
        if Fraction::from_decimal(self.tolerance).is_none() {
            return bad("tolerance must be a non-negative number");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateScore {
    pub metric_set: MetricSet,
    pub coverage: Fraction,
    /// `None` when the candidate produced no traits at all; ranks last.
    pub redundancy: Option<Fraction>,
}

impl CandidateScore {
    pub fn n(&self) -> usize {
        self.metric_set.requested_n
    }

    pub fn candidate_index(&self) -> usize {
        self.metric_set.provenance.candidate_index
    }
}

fn cmp_redundancy(a: &Option<Fraction>, b: &Option<Fraction>) -> Ordering {
    match (a, b) {
        (Some(x), Some(y)) => x.cmp_value(y),
        (Some(_), None) => Ordering::Less,
        (None, Some(_)) => Ordering::Greater,
        (None, None) => Ordering::Equal,
    }
}

/// Among candidates whose coverage is at least the maximum coverage minus
/// `band`, the one with the lowest redundancy; ties go to the smaller metric
/// count, then the lower candidate index, then the set id. Independent of
/// input order. `None` only for an empty list.
pub fn select_best(scored: &[CandidateScore], band: Fraction) -> Option<&CandidateScore> {
    let best = scored.iter().map(|c| c.coverage).max_by(|a, b| a.cmp_value(b))?;
    scored
        .iter()
        // coverage >= best - band, written without subtraction
        .filter(|c| c.coverage.checked_add(&band).is_some_and(|s| s.cmp_value(&best) != Ordering::Less))
        .min_by(|a, b| {
            cmp_redundancy(&a.redundancy, &b.redundancy)
                .then(a.n().cmp(&b.n()))
                .then(a.candidate_index().cmp(&b.candidate_index()))
                .then(a.metric_set.id.cmp(&b.metric_set.id))
        })
}

/// Seed for the k-th candidate of size n in a round.
pub fn candidate_seed(seed: u64, round: usize, n: usize, k: usize) -> u64 {
    let h = sha256_hex(format!("{seed}:{round}:{n}:{k}").as_bytes());
    u64::from_str_radix(&h[..16], 16).unwrap_or(seed)
}

/// `(n, k)` jobs for a size range, sizes ascending then k ascending; the
/// position in this list is the candidate index.
fn round_jobs(lo: usize, hi: usize, sets_per_n: usize) -> Vec<(usize, usize)> {
    (lo..=hi).flat_map(|n| (0..sets_per_n).map(move |k| (n, k))).collect()
}

fn generate_round(
    gw: &Gateway,
    aspects: &[Aspect],
    (lo, hi): (usize, usize),
    round: usize,
    cfg: &OptimizerConfig,
) -> Result<Vec<MetricSet>> {
    let jobs = round_jobs(lo, hi, cfg.sets_per_n);
    let outcomes = parallel_map_results(&jobs, gw.max_parallel(), |idx, &(n, k)| {
        let provenance = Provenance {
            seed: candidate_seed(cfg.seed, round, n, k),
            candidate_index: idx,
            examples_stripped: false,
        };
        cluster_aspects_with(gw, aspects, n, provenance, &cfg.clustering)
    });
    let mut survivors = Vec::new();
    for (idx, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(ms) => survivors.push(ms),
            Err(e @ (Error::Cardinality { .. } | Error::Schema(_))) => {
                tracing::warn!(candidate = idx, n = jobs[idx].0, error = %e, "dropping candidate");
            }
            Err(e) => return Err(e),
        }
    }
    if survivors.len() * 2 < jobs.len() {
        return Err(Error::Optimizer(format!(
            "only {} of {} candidate sets survived clustering in round {round}",
            survivors.len(),
            jobs.len()
        )));
    }
    Ok(survivors)
}

/// First-round candidates over `[n_min, n_max]`.
pub fn generate_candidates(gw: &Gateway, aspects: &[Aspect], cfg: &OptimizerConfig) -> Result<Vec<MetricSet>> {
    cfg.validate()?;
    if aspects.is_empty() {
        return Err(Error::InvalidArgument("no aspects to cluster".into()));
    }
    generate_round(gw, aspects, (cfg.n_min, cfg.n_max), 1, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub metric_set_id: String,
    pub n: usize,
    pub candidate_index: usize,
    pub coverage: Fraction,
    pub redundancy: Option<Fraction>,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub n_range: [usize; 2],
    pub candidates: Vec<CandidateRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Coverage and redundancy both moved less than the tolerance.
    Converged,
    /// The selected metric count repeated.
    RepeatN,
    MaxRounds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeHistory {
    pub rounds: Vec<RoundRecord>,
    pub converged: bool,
    pub stop_reason: StopReason,
    pub selected_metric_set_id: String,
}

#[derive(Debug, Clone)]
pub struct OptimizeOutcome {
    pub metric_set: MetricSet,
    /// Train-split judging, matches and report for the selected set.
    pub evaluation: Evaluation,
    pub history: OptimizeHistory,
    /// Every generated candidate set, all rounds.
    pub candidates: Vec<MetricSet>,
}

impl OptimizeOutcome {
    pub fn report(&self) -> &QualityReport {
        &self.evaluation.report
    }
}

fn within(a: Fraction, b: Fraction, tol: Fraction) -> bool {
    let diff = a.checked_sub(&b).or_else(|| b.checked_sub(&a)).unwrap_or(Fraction::ZERO);
    diff.cmp_value(&tol) == Ordering::Less
}

fn stable(prev: &CandidateScore, cur: &CandidateScore, tol: Fraction) -> bool {
    let red = match (prev.redundancy, cur.redundancy) {
        (Some(a), Some(b)) => within(a, b, tol),
        (None, None) => true,
        _ => false,
    };
    red && within(prev.coverage, cur.coverage, tol)
}

/// Run the band-and-refine search over the train instances.
pub fn optimize(gw: &Gateway, train: &[Instance], cfg: &OptimizerConfig) -> Result<OptimizeOutcome> {
    cfg.validate()?;
    let aspects: Vec<Aspect> = train.iter().flat_map(|i| i.aspects.iter().cloned()).collect();
    if aspects.is_empty() {
        return Err(Error::EmptyEvaluation("train instances carry no aspects".into()));
    }
    let band = Fraction::from_decimal(cfg.coverage_band).expect("validated");
    let tol = Fraction::from_decimal(cfg.tolerance).expect("validated");

    let mut range = (cfg.n_min, cfg.n_max);
    let mut rounds = Vec::new();
    let mut all_candidates = Vec::new();
    let mut winners: Vec<(CandidateScore, Evaluation)> = Vec::new();
    let mut stop = StopReason::MaxRounds;

    for round in 1..=cfg.max_rounds {
        let candidates = generate_round(gw, &aspects, range, round, cfg)?;
        let evaluations = parallel_map(&candidates, gw.max_parallel(), |_, ms| {
            evaluate_metric_set(gw, ms, train, Split::Train)
        })?;
        let scored: Vec<CandidateScore> = candidates
            .iter()
            .zip(&evaluations)
            .map(|(ms, ev)| CandidateScore {
                metric_set: ms.clone(),
                coverage: ev.report.coverage,
                redundancy: ev.report.redundancy,
            })
            .collect();
        let chosen = select_best(&scored, band).expect("at least one survivor").clone();
        let pos = scored
            .iter()
            .position(|c| c.metric_set.id == chosen.metric_set.id)
            .expect("chosen from scored");
        tracing::info!(
            round,
            n = chosen.n(),
            coverage = %chosen.coverage.render(),
            redundancy = %chosen.redundancy.map(|r| r.render()).unwrap_or_else(|| "undefined".into()),
            "round selection"
        );
        rounds.push(RoundRecord {
            round,
            n_range: [range.0, range.1],
            candidates: scored
                .iter()
                .enumerate()
                .map(|(i, c)| CandidateRecord {
                    metric_set_id: c.metric_set.id.clone(),
                    n: c.n(),
                    candidate_index: c.candidate_index(),
                    coverage: c.coverage,
                    redundancy: c.redundancy,
                    selected: i == pos,
                })
                .collect(),
        });
        all_candidates.extend(candidates);

        let reason = winners.last().and_then(|(prev, _)| {
            if prev.n() == chosen.n() {
                Some(StopReason::RepeatN)
            } else if stable(prev, &chosen, tol) {
                Some(StopReason::Converged)
            } else {
                None
            }
        });
        let n = chosen.n();
        winners.push((chosen, evaluations[pos].clone()));
        if let Some(r) = reason {
            stop = r;
            break;
        }
        range = (
            n.saturating_sub(cfg.refine_radius).max(1),
            (n + cfg.refine_radius).min(cfg.n_max),
        );
    }

    let converged = stop != StopReason::MaxRounds;
    let (winner, evaluation) = if converged {
        winners.pop().expect("one winner per round")
    } else {
        let scores: Vec<CandidateScore> = winners.iter().map(|(c, _)| c.clone()).collect();
        let best = select_best(&scores, band).expect("non-empty").metric_set.id.clone();
        winners
            .into_iter()
            .find(|(c, _)| c.metric_set.id == best)
            .expect("best is among winners")
    };
    Ok(OptimizeOutcome {
        history: OptimizeHistory {
            rounds,
            converged,
            stop_reason: stop,
            selected_metric_set_id: winner.metric_set.id.clone(),
        },
        metric_set: winner.metric_set,
        evaluation,
        candidates: all_candidates,
    })
}

/// Quality of a chosen set on held-out instances.
pub fn evaluate_holdout(gw: &Gateway, ms: &MetricSet, holdout: &[Instance]) -> Result<Evaluation> {
    if holdout.is_empty() {
        return Err(Error::EmptyEvaluation("holdout split is empty".into()));
    }
    evaluate_metric_set(gw, ms, holdout, Split::Holdout)
}
