//! Turning redundant worker votes into one verdict.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::graph::{Answer, Vote};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationRule {
    #[default]
    Majority,
    /// Log-odds weighting by each worker's running gold accuracy.
    QualityWeighted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregationPolicy {
    /// Accepted votes required per query round. Must be odd.
    pub redundancy_k: u32,
    pub rule: AggregationRule,
    /// Estimated accuracy per worker, in [0, 1]. Missing workers count as 0.5.
    #[serde(default)]
    pub worker_quality: BTreeMap<String, f64>,
}

impl Default for AggregationPolicy {
    fn default() -> Self {
        Self {
            redundancy_k: 3,
            rule: AggregationRule::Majority,
            worker_quality: BTreeMap::new(),
        }
    }
}

impl AggregationPolicy {
    pub fn majority(redundancy_k: u32) -> Self {
        Self {
            redundancy_k,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.redundancy_k == 0 || self.redundancy_k.is_multiple_of(2) {
            return Err(format!(
                "redundancy_k must be odd and >= 1, got {}",
                self.redundancy_k
            ));
        }
        if let Some((w, q)) = self
            .worker_quality
            .iter()
            .find(|(_, q)| !(0.0..=1.0).contains(*q))
        {
            return Err(format!("quality of worker {w} is {q}, outside [0, 1]"));
        }
        Ok(())
    }

    fn quality(&self, worker: &str) -> f64 {
        self.worker_quality.get(worker).copied().unwrap_or(0.5)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregate {
    Decided(Answer),
    NeedsMore,
}

/// Running gold-question tally per worker.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerQuality {
    tallies: BTreeMap<String, (u32, u32)>,
}

impl WorkerQuality {
    pub fn record(&mut self, worker: &str, correct: bool) {
        let t = self.tallies.entry(worker.to_string()).or_insert((0, 0));
        t.1 += 1;
        if correct {
            t.0 += 1;
        }
    }

    /// Laplace-smoothed accuracy: (correct + 1) / (answered + 2).
    pub fn estimate(&self, worker: &str) -> f64 {
        let (c, t) = self.tallies.get(worker).copied().unwrap_or((0, 0));
        (f64::from(c) + 1.0) / (f64::from(t) + 2.0)
    }

    pub fn estimates(&self) -> BTreeMap<String, f64> {
        self.tallies
            .keys()
            .map(|w| (w.clone(), self.estimate(w)))
            .collect()
    }
}

/// One vote per (task, pair): padded repeats of a question inside a task
/// are answered by the same worker and carry no extra evidence.
pub fn effective_votes(votes: &[Vote]) -> Vec<&Vote> {
    let mut seen = BTreeSet::new();
    votes
        .iter()
        .filter(|v| seen.insert((v.task_id, v.pair)))
        .collect()
}

/// Verdict for one pair over all of its accumulated votes.
///
/// Fewer than `redundancy_k` effective votes gives `NeedsMore`. Under
/// majority, a tie (possible once re-query rounds accumulate) goes to the
/// majority of the latest round, then to `Different`.
pub fn aggregate_votes(votes: &[Vote], policy: &AggregationPolicy) -> Aggregate {
    let votes = effective_votes(votes);
    if votes.len() < policy.redundancy_k as usize {
        return Aggregate::NeedsMore;
    }
    if policy.rule == AggregationRule::QualityWeighted {
        let informative = votes
            .iter()
            .any(|v| (policy.quality(&v.worker_id) - 0.5).abs() > f64::EPSILON);
        if informative {
            let mut same = 0.0;
            let mut diff = 0.0;
            for v in &votes {
                let q = policy.quality(&v.worker_id).clamp(0.01, 0.99);
                let w = (q / (1.0 - q)).ln();
                match v.answer {
                    Answer::Same => same += w,
                    Answer::Different => diff += w,
                }
            }
            if (same - diff).abs() > 1e-12 {
                return Aggregate::Decided(if same > diff {
                    Answer::Same
                } else {
                    Answer::Different
                });
            }
        }
    }
    Aggregate::Decided(majority(&votes))
}

fn majority(votes: &[&Vote]) -> Answer {
    let count = |vs: &mut dyn Iterator<Item = &&Vote>| {
        vs.fold((0usize, 0usize), |(s, d), v| match v.answer {
            Answer::Same => (s + 1, d),
            Answer::Different => (s, d + 1),
        })
    };
    let (s, d) = count(&mut votes.iter());
    if s != d {
        return if s > d { Answer::Same } else { Answer::Different };
    }
    let latest = votes.iter().map(|v| v.round).max().unwrap_or(0);
    let (s, d) = count(&mut votes.iter().filter(|v| v.round == latest));
    if s > d {
        Answer::Same
    } else {
        Answer::Different
    }
}
