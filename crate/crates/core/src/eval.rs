//! Agreement with a reference grouping, and sampled precision.
//!
//! Agreement for one type `c` is the Jaccard overlap between the types the
//! reference groups with `c` and the types the algorithm groups with `c`,
//! both excluding `c` itself. When both sets are empty, `c` stands alone in
//! both groupings and scores 1.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classlist::ClassList;
use crate::taxonomy::NodeId;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("type {0} is missing from a partition")]
    UnknownType(NodeId),
    #[error("the partitions share no types")]
    EmptyOverlap,
    #[error("empty sample")]
    EmptySample,
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
}

/// Disjoint classes over node ids, with a reverse lookup.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Partition {
    classes: Vec<BTreeSet<NodeId>>,
    class_of: BTreeMap<NodeId, usize>,
}

impl Partition {
    pub fn new<I, C>(classes: I) -> Result<Self, EvalError>
    where
        I: IntoIterator<Item = C>,
        C: IntoIterator<Item = NodeId>,
    {
        let mut out = Partition::default();
        for class in classes {
            let set: BTreeSet<NodeId> = class.into_iter().collect();
            if set.is_empty() {
                continue;
            }
            let idx = out.classes.len();
            for id in &set {
                if out.class_of.insert(*id, idx).is_some() {
                    return Err(EvalError::InvalidPartition(format!("{id} appears twice")));
                }
            }
            out.classes.push(set);
        }
        Ok(out)
    }

    pub fn from_class_list(list: &ClassList) -> Self {
        Self::new(list.classes.iter().map(|c| c.members.iter().copied()))
            .expect("class list is a partition")
    }

    pub fn classes(&self) -> &[BTreeSet<NodeId>] {
        &self.classes
    }

    pub fn domain(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.class_of.keys().copied()
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.class_of.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Classmates of `id`, excluding `id`.
    pub fn classmates(&self, id: NodeId) -> Option<BTreeSet<NodeId>> {
        let idx = *self.class_of.get(&id)?;
        let mut set = self.classes[idx].clone();
        set.remove(&id);
        Some(set)
    }

    /// Restriction to `domain`, dropping classes that become empty.
    pub fn restrict(&self, domain: &BTreeSet<NodeId>) -> Partition {
        Partition::new(
            self.classes
                .iter()
                .map(|c| c.intersection(domain).copied().collect::<Vec<_>>()),
        )
        .expect("restriction of a partition is a partition")
    }

    /// Same grouping regardless of class order.
    pub fn equivalent(&self, other: &Partition) -> bool {
        let a: BTreeSet<&BTreeSet<NodeId>> = self.classes.iter().collect();
        let b: BTreeSet<&BTreeSet<NodeId>> = other.classes.iter().collect();
        a == b
    }

    /// `{"classes":[[id,...],...]}`
    pub fn to_json(&self) -> String {
        let file = PartitionFile {
            classes: self.classes.iter().map(|c| c.iter().copied().collect()).collect(),
        };
        serde_json::to_string(&file).expect("partition serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        let file: PartitionFile =
            serde_json::from_str(text).map_err(|e| EvalError::InvalidPartition(e.to_string()))?;
        Self::new(file.classes)
    }
}

#[derive(Serialize, Deserialize)]
struct PartitionFile {
    classes: Vec<Vec<NodeId>>,
}

/// Jaccard overlap of `c`'s classmates under the two partitions.
pub fn pairwise_agreement(c: NodeId, alg: &Partition, exp: &Partition) -> Result<f64, EvalError> {
    let s_alg = alg.classmates(c).ok_or(EvalError::UnknownType(c))?;
    let s_exp = exp.classmates(c).ok_or(EvalError::UnknownType(c))?;
    let union = s_alg.union(&s_exp).count();
    if union == 0 {
        return Ok(1.0);
    }
    let inter = s_alg.intersection(&s_exp).count();
    Ok(inter as f64 / union as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub per_type: BTreeMap<NodeId, f64>,
    pub mean: f64,
    pub mean_percent: f64,
    pub n_evaluated: usize,
}

impl AgreementReport {
    /// Mean as a percentage with two decimals, e.g. `81.09%`.
    pub fn percent_string(&self) -> String {
        format!("{:.2}%", self.mean_percent)
    }
}

/// Mean agreement over the types both partitions cover. Both partitions are
/// first restricted to that shared domain, so types the reference never
/// graded do not count against the algorithm.
pub fn mean_agreement(alg: &Partition, exp: &Partition) -> Result<AgreementReport, EvalError> {
    let shared: BTreeSet<NodeId> = exp.domain().filter(|id| alg.contains(*id)).collect();
    if shared.is_empty() {
        return Err(EvalError::EmptyOverlap);
    }
    let alg = alg.restrict(&shared);
    let exp = exp.restrict(&shared);
    let mut per_type = BTreeMap::new();
    for id in &shared {
        per_type.insert(*id, pairwise_agreement(*id, &alg, &exp)?);
    }
    let mean = per_type.values().sum::<f64>() / per_type.len() as f64;
    Ok(AgreementReport {
        n_evaluated: per_type.len(),
        per_type,
        mean,
        mean_percent: mean * 100.0,
    })
}

/// One manually checked image.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrecisionSample {
    pub image: String,
    pub class_id: u32,
    pub correct: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrecisionEstimate {
    pub n: u64,
    pub correct: u64,
    pub fraction: f64,
    /// Wilson score interval at 95%.
    pub interval: (f64, f64),
}

const Z_95: f64 = 1.959_963_984_540_054;

pub fn wilson_interval(correct: u64, n: u64, z: f64) -> (f64, f64) {
    let n_f = n as f64;
    let p = correct as f64 / n_f;
    let z2 = z * z;
    let denom = 1.0 + z2 / n_f;
    let center = (p + z2 / (2.0 * n_f)) / denom;
    let half = z / denom * (p * (1.0 - p) / n_f + z2 / (4.0 * n_f * n_f)).sqrt();
    ((center - half).max(0.0), (center + half).min(1.0))
}

pub fn precision_from_counts(correct: u64, n: u64) -> Result<PrecisionEstimate, EvalError> {
    if n == 0 {
        return Err(EvalError::EmptySample);
    }
    Ok(PrecisionEstimate {
        n,
        correct,
        fraction: correct as f64 / n as f64,
        interval: wilson_interval(correct, n, Z_95),
    })
}

pub fn precision_estimate(samples: &[PrecisionSample]) -> Result<PrecisionEstimate, EvalError> {
    let correct = samples.iter().filter(|s| s.correct).count() as u64;
    precision_from_counts(correct, samples.len() as u64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(v: &[u32]) -> Vec<NodeId> {
        v.iter().map(|i| NodeId(*i)).collect()
    }

    fn part(classes: &[&[u32]]) -> Partition {
        Partition::new(classes.iter().map(|c| ids(c))).unwrap()
    }

    #[test]
    fn identical_classmates() {
        let p = part(&[&[0, 1, 2]]);
        assert_eq!(pairwise_agreement(NodeId(0), &p, &p).unwrap(), 1.0);
    }

    #[test]
    fn partial_overlap_is_one_third() {
        // c=0, S_exp={1,2}, S_alg={2,3}
        let exp = part(&[&[0, 1, 2], &[3]]);
        let alg = part(&[&[0, 2, 3], &[1]]);
        let s = pairwise_agreement(NodeId(0), &alg, &exp).unwrap();
        assert!((s - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn both_empty_is_full_agreement() {
        let p = part(&[&[0], &[1]]);
        assert_eq!(pairwise_agreement(NodeId(0), &p, &p).unwrap(), 1.0);
    }

    #[test]
    fn unknown_type() {
        let p = part(&[&[0]]);
        assert_eq!(
            pairwise_agreement(NodeId(5), &p, &p),
            Err(EvalError::UnknownType(NodeId(5)))
        );
    }

    #[test]
    fn means() {
        let all: Vec<u32> = (0..10).collect();
        let exp = part(&[&all]);
        assert_eq!(mean_agreement(&exp, &exp).unwrap().mean, 1.0);
        let singles: Vec<Vec<NodeId>> = (0..10).map(|i| vec![NodeId(i)]).collect();
        let alg = Partition::new(singles).unwrap();
        let r = mean_agreement(&alg, &exp).unwrap();
        assert_eq!(r.mean, 0.0);
        assert_eq!(r.n_evaluated, 10);
        let other = part(&[&[20, 21]]);
        assert_eq!(mean_agreement(&other, &exp), Err(EvalError::EmptyOverlap));
    }

    #[test]
    fn percent_format() {
        let r = AgreementReport {
            per_type: BTreeMap::new(),
            mean: 0.810_9,
            mean_percent: 81.09,
            n_evaluated: 92,
        };
        assert_eq!(r.percent_string(), "81.09%");
    }

    #[test]
    fn precision_values() {
        let all_ok: Vec<PrecisionSample> = (0..100)
            .map(|i| PrecisionSample {
                image: format!("{i}"),
                class_id: 0,
                correct: true,
            })
            .collect();
        assert_eq!(precision_estimate(&all_ok).unwrap().fraction, 1.0);
        let big = precision_from_counts(16_422, 17_000).unwrap();
        assert!((big.fraction - 0.966).abs() < 1e-12);
        let half = precision_from_counts(50, 100).unwrap();
        assert!((half.interval.0 - 0.4038).abs() < 5e-4);
        assert!((half.interval.1 - 0.5962).abs() < 5e-4);
        assert_eq!(precision_estimate(&[]), Err(EvalError::EmptySample));
    }

    #[test]
    fn partition_rejects_overlap_and_round_trips() {
        assert!(Partition::new(vec![ids(&[0, 1]), ids(&[1])]).is_err());
        let p = part(&[&[0, 3], &[1]]);
        let back = Partition::from_json(&p.to_json()).unwrap();
        assert!(p.equivalent(&back));
        assert_eq!(p.to_json(), "{\"classes\":[[0,3],[1]]}");
    }
}
