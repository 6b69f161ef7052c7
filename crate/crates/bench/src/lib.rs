//! Seeded fixtures for the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use induct_core::model::{Aspect, BehaviorRef, InstanceId, MatchRecord, Metric, MetricSet, Provenance, Sign, Trait};
use induct_core::optimizer::CandidateScore;
use induct_core::Fraction;

fn sign(rng: &mut ChaCha8Rng) -> Sign {
    if rng.random_bool(0.5) {
        Sign::Positive
    } else {
        Sign::Negative
    }
}

/// One matching problem: aspects, traits and the aspect→metric relation.
pub struct MatchCase {
    pub instance_id: InstanceId,
    pub aspects: Vec<Aspect>,
    pub traits: Vec<Trait>,
    pub relation: Vec<(String, String)>,
}

pub fn match_case(seed: u64, n_aspects: usize, n_traits: usize) -> MatchCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let instance_id = InstanceId {
        trajectory_id: format!("t{seed}"),
        feedback_id: format!("f{seed}"),
    };
    let aspects: Vec<Aspect> = (0..n_aspects)
        .map(|i| Aspect {
            id: format!("a{i}"),
            feedback_id: instance_id.feedback_id.clone(),
            trajectory_id: instance_id.trajectory_id.clone(),
            sign: sign(&mut rng),
            feedback_text: format!("aspect {i}"),
            behavior: BehaviorRef {
                step_start: 0,
                step_end: 0,
                excerpt: String::new(),
            },
        })
        .collect();
    let traits: Vec<Trait> = (0..n_traits)
        .map(|j| Trait {
            trajectory_id: instance_id.trajectory_id.clone(),
            metric_id: format!("m{j:02}"),
            polarity: sign(&mut rng),
        })
        .collect();
    let mut relation = Vec::new();
    for a in &aspects {
        for t in &traits {
            if rng.random_bool(0.3) {
                relation.push((a.id.clone(), t.metric_id.clone()));
            }
        }
    }
    MatchCase {
        instance_id,
        aspects,
        traits,
        relation,
    }
}

pub fn match_records(seed: u64, instances: usize) -> Vec<MatchRecord> {
    (0..instances as u64)
        .map(|k| {
            let c = match_case(seed * 100_003 + k, 6, 6);
            induct_core::metaeval::oracle_match(c.instance_id, &c.aspects, &c.traits, &c.relation)
        })
        .collect()
}

pub fn candidate_scores(seed: u64, count: usize) -> Vec<CandidateScore> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|k| {
            let n = rng.random_range(4..=13);
            let metric_set = MetricSet {
                id: format!("ms-{k:03}"),
                parent_id: None,
                requested_n: n,
                provenance: Provenance {
                    seed,
                    candidate_index: k,
                    examples_stripped: false,
                },
                metrics: (0..n)
                    .map(|i| Metric {
                        id: format!("m{i}"),
                        name: format!("M{i}"),
                        definition: String::new(),
                        good_examples: vec![],
                        bad_examples: vec![],
                    })
                    .collect(),
            };
            let den = 100;
            CandidateScore {
                metric_set,
                coverage: Fraction::new(rng.random_range(0..=den), den).unwrap(),
                redundancy: rng
                    .random_bool(0.9)
                    .then(|| Fraction::new(rng.random_range(0..=den), den).unwrap()),
            }
        })
        .collect()
}
