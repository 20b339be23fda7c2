//! Merge graph over trim nodes and the pair-query schedule.
//!
//! Every pair the schedule may ask about is registered with a
//! [`PairState`]; "same" verdicts are the graph's undirected edges. Sibling
//! groups enumerate candidate pairs bottom-up: first all trims within one
//! (make, model, body, year), then same-named trims across years, compared
//! through the representative of each year's merged component.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classlist::ClassList;
use crate::taxonomy::{NodeId, TaxonomyForest, TrimKey, YearKey};
use crate::unionfind::DisjointSet;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("pair {0} was never scheduled")]
    UnknownPair(Pair),
    #[error("pair {pair} is {state:?}, not awaiting a verdict")]
    NotAwaitingVerdict { pair: Pair, state: PairState },
    #[error("phase violation: {0} unresolved pair(s) remain, first {1}")]
    PhaseViolation(usize, Pair),
    #[error("pair {0} is a self-loop")]
    SelfLoop(NodeId),
}

/// Unordered pair of distinct nodes, stored low id first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "[NodeId; 2]", try_from = "[NodeId; 2]")]
pub struct Pair(NodeId, NodeId);

impl Pair {
    /// Panics on a self-loop; use [`Pair::try_new`] for untrusted input.
    pub fn new(a: NodeId, b: NodeId) -> Self {
        Self::try_new(a, b).expect("pair endpoints must differ")
    }

    pub fn try_new(a: NodeId, b: NodeId) -> Result<Self, GraphError> {
        match a.cmp(&b) {
            std::cmp::Ordering::Less => Ok(Self(a, b)),
            std::cmp::Ordering::Greater => Ok(Self(b, a)),
            std::cmp::Ordering::Equal => Err(GraphError::SelfLoop(a)),
        }
    }

    pub fn lo(self) -> NodeId {
        self.0
    }

    pub fn hi(self) -> NodeId {
        self.1
    }

    pub fn contains(self, n: NodeId) -> bool {
        self.0 == n || self.1 == n
    }
}

impl From<Pair> for [NodeId; 2] {
    fn from(p: Pair) -> Self {
        [p.0, p.1]
    }
}

impl TryFrom<[NodeId; 2]> for Pair {
    type Error = GraphError;
    fn try_from(v: [NodeId; 2]) -> Result<Self, Self::Error> {
        Pair::try_new(v[0], v[1])
    }
}

impl fmt::Display for Pair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.0, self.1)
    }
}

/// A worker's answer to one binary question.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Answer {
    Same,
    Different,
}

impl Answer {
    pub fn flip(self) -> Self {
        match self {
            Answer::Same => Answer::Different,
            Answer::Different => Answer::Same,
        }
    }
}

/// One accepted answer to a non-gold pair question.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vote {
    pub query_id: String,
    pub pair: Pair,
    pub worker_id: String,
    pub answer: Answer,
    pub round: u32,
    pub task_id: u64,
    pub timestamp: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairState {
    Unqueried,
    Pending,
    Same,
    Different,
    NeedsRequery,
}

impl PairState {
    pub fn is_resolved(self) -> bool {
        matches!(self, PairState::Same | PairState::Different)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub state: PairState,
    /// Query round the pair is currently collecting votes for.
    pub round: u32,
    /// How many times the pair has been placed into a task.
    pub dispatches: u32,
    pub votes: Vec<Vote>,
}

impl PairRecord {
    fn new() -> Self {
        Self {
            state: PairState::Unqueried,
            round: 0,
            dispatches: 0,
            votes: Vec::new(),
        }
    }

    pub fn current_round_votes(&self) -> impl Iterator<Item = &Vote> {
        let round = self.round;
        self.votes.iter().filter(move |v| v.round == round)
    }

    /// Number of query rounds after the first.
    pub fn requeries(&self) -> u32 {
        self.round
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeGraph {
    vertices: usize,
    #[serde(with = "pair_map")]
    pairs: BTreeMap<Pair, PairRecord>,
}

mod pair_map {
    use super::{Pair, PairRecord};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::collections::BTreeMap;

    #[derive(Serialize, Deserialize)]
    struct Entry<R> {
        pair: Pair,
        #[serde(flatten)]
        record: R,
    }

    pub fn serialize<S: Serializer>(
        map: &BTreeMap<Pair, PairRecord>,
        s: S,
    ) -> Result<S::Ok, S::Error> {
        let entries: Vec<Entry<&PairRecord>> = map
            .iter()
            .map(|(pair, record)| Entry { pair: *pair, record })
            .collect();
        entries.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> Result<BTreeMap<Pair, PairRecord>, D::Error> {
        let entries: Vec<Entry<PairRecord>> = Vec::deserialize(d)?;
        Ok(entries.into_iter().map(|e| (e.pair, e.record)).collect())
    }
}

impl MergeGraph {
    pub fn new(vertices: usize) -> Self {
        Self {
            vertices,
            pairs: BTreeMap::new(),
        }
    }

    pub fn for_forest(forest: &TaxonomyForest) -> Self {
        Self::new(forest.len())
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices
    }

    /// Registers a pair as queryable. Returns false if it already was.
    pub fn schedule(&mut self, pair: Pair) -> bool {
        assert!(pair.hi().index() < self.vertices, "pair {pair} out of range");
        if self.pairs.contains_key(&pair) {
            return false;
        }
        self.pairs.insert(pair, PairRecord::new());
        true
    }

    pub fn state(&self, pair: Pair) -> Option<PairState> {
        self.pairs.get(&pair).map(|r| r.state)
    }

    pub fn record(&self, pair: Pair) -> Option<&PairRecord> {
        self.pairs.get(&pair)
    }

    pub fn records(&self) -> impl Iterator<Item = (&Pair, &PairRecord)> {
        self.pairs.iter()
    }

    /// Marks a pair as placed into a task.
    pub fn mark_dispatched(&mut self, pair: Pair) -> Result<(), GraphError> {
        let rec = self
            .pairs
            .get_mut(&pair)
            .ok_or(GraphError::UnknownPair(pair))?;
        if matches!(rec.state, PairState::Unqueried | PairState::NeedsRequery) {
            rec.state = PairState::Pending;
        }
        rec.dispatches += 1;
        Ok(())
    }

    /// Appends accepted votes without deciding the pair.
    pub fn add_votes(&mut self, pair: Pair, votes: Vec<Vote>) -> Result<(), GraphError> {
        let rec = self
            .pairs
            .get_mut(&pair)
            .ok_or(GraphError::UnknownPair(pair))?;
        rec.votes.extend(votes);
        Ok(())
    }

    /// Appends `votes` to the pair's history and fixes its state to `verdict`.
    /// A "same" verdict makes the pair an edge, "different" removes it.
    pub fn record_verdict(
        &mut self,
        pair: Pair,
        verdict: Answer,
        votes: Vec<Vote>,
    ) -> Result<(), GraphError> {
        let rec = self
            .pairs
            .get_mut(&pair)
            .ok_or(GraphError::UnknownPair(pair))?;
        match rec.state {
            PairState::Pending | PairState::NeedsRequery | PairState::Unqueried => {}
            state => return Err(GraphError::NotAwaitingVerdict { pair, state }),
        }
        rec.votes.extend(votes);
        rec.state = match verdict {
            Answer::Same => PairState::Same,
            Answer::Different => PairState::Different,
        };
        Ok(())
    }

    /// Reopens a resolved pair for another round of votes.
    pub fn mark_requery(&mut self, pair: Pair, round: u32) -> Result<(), GraphError> {
        let rec = self
            .pairs
            .get_mut(&pair)
            .ok_or(GraphError::UnknownPair(pair))?;
        rec.state = PairState::NeedsRequery;
        rec.round = round;
        Ok(())
    }

    pub fn is_edge(&self, pair: Pair) -> bool {
        self.state(pair) == Some(PairState::Same)
    }

    pub fn edges(&self) -> impl Iterator<Item = Pair> + '_ {
        self.pairs
            .iter()
            .filter(|(_, r)| r.state == PairState::Same)
            .map(|(p, _)| *p)
    }

    pub fn state_counts(&self) -> BTreeMap<PairState, usize> {
        let mut counts = BTreeMap::new();
        for rec in self.pairs.values() {
            *counts.entry(rec.state).or_insert(0) += 1;
        }
        counts
    }

    /// Connected components over "same" edges, each sorted, ordered by
    /// their lowest member.
    pub fn components(&self) -> Vec<Vec<NodeId>> {
        let mut ds = DisjointSet::new(self.vertices);
        for e in self.edges() {
            ds.union(e.lo().index(), e.hi().index());
        }
        let mut by_root: BTreeMap<usize, Vec<NodeId>> = BTreeMap::new();
        for v in 0..self.vertices {
            let root = ds.find(v);
            by_root.entry(root).or_default().push(NodeId(v as u32));
        }
        let mut comps: Vec<Vec<NodeId>> = by_root.into_values().collect();
        comps.sort_by_key(|c| c[0]);
        comps
    }

    pub fn component_count(&self) -> usize {
        self.components().len()
    }

    /// Final class list: one named class per connected component.
    pub fn connected_components(&self, forest: &TaxonomyForest) -> ClassList {
        ClassList::from_components(self.components(), forest)
    }
}

/// Which cross-year pairs are compared for one trim name.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum YearPairPolicy {
    /// Consecutive calendar years only; a missing year splits the chain.
    #[default]
    Adjacent,
    /// Every pair of years in which the trim exists.
    AllPairs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKind {
    WithinYear,
    CrossYear,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKey {
    WithinYear(YearKey),
    /// Trim bucket plus the first year of the run it covers.
    CrossYear(TrimKey, i32),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiblingGroup {
    pub kind: GroupKind,
    pub key: GroupKey,
    pub members: Vec<NodeId>,
    pub policy: YearPairPolicy,
}

impl SiblingGroup {
    /// Candidate pairs in schedule order.
    pub fn pairs(&self) -> Vec<Pair> {
        let m = &self.members;
        match (self.kind, self.policy) {
            (GroupKind::CrossYear, YearPairPolicy::Adjacent) => {
                m.windows(2).map(|w| Pair::new(w[0], w[1])).collect()
            }
            _ => {
                let mut out = Vec::with_capacity(m.len() * m.len().saturating_sub(1) / 2);
                for i in 0..m.len() {
                    for j in i + 1..m.len() {
                        out.push(Pair::new(m[i], m[j]));
                    }
                }
                out
            }
        }
    }
}

/// One group per (make, model, body, year) bucket holding at least two trims,
/// in key order.
pub fn within_year_groups(forest: &TaxonomyForest) -> Vec<SiblingGroup> {
    forest
        .year_index()
        .iter()
        .filter(|(_, ids)| ids.len() >= 2)
        .map(|(key, ids)| SiblingGroup {
            kind: GroupKind::WithinYear,
            key: GroupKey::WithinYear(key.clone()),
            members: ids.clone(),
            policy: YearPairPolicy::AllPairs,
        })
        .collect()
}

/// Fails with the first unresolved within-year pair, if any.
pub fn ensure_within_year_resolved(
    forest: &TaxonomyForest,
    graph: &MergeGraph,
) -> Result<(), GraphError> {
    let mut unresolved = Vec::new();
    for group in within_year_groups(forest) {
        for pair in group.pairs() {
            if !graph.state(pair).is_some_and(PairState::is_resolved) {
                unresolved.push(pair);
            }
        }
    }
    match unresolved.first() {
        Some(first) => Err(GraphError::PhaseViolation(unresolved.len(), *first)),
        None => Ok(()),
    }
}

/// Lowest node id of each node's within-year component.
fn within_year_representatives(forest: &TaxonomyForest, graph: &MergeGraph) -> Vec<NodeId> {
    let mut ds = DisjointSet::new(forest.len());
    for e in graph.edges() {
        let (a, b) = (forest.node(e.lo()), forest.node(e.hi()));
        if let (Some(a), Some(b)) = (a, b) {
            if a.year_key() == b.year_key() {
                ds.union(a.id.index(), b.id.index());
            }
        }
    }
    let mut lowest: BTreeMap<usize, NodeId> = BTreeMap::new();
    for id in forest.ids() {
        let root = ds.find(id.index());
        lowest.entry(root).or_insert(id);
    }
    forest
        .ids()
        .map(|id| lowest[&ds.find(id.index())])
        .collect()
}

/// Cross-year groups over the current within-year merges.
///
/// For each (make, model, body, trim) present in two or more years, members
/// are the representatives of the within-year components holding that trim,
/// one per year in year order. Under [`YearPairPolicy::Adjacent`] a gap in
/// years splits the trim into separate runs.
pub fn cross_year_groups(
    forest: &TaxonomyForest,
    graph: &MergeGraph,
    policy: YearPairPolicy,
) -> Result<Vec<SiblingGroup>, GraphError> {
    ensure_within_year_resolved(forest, graph)?;
    let reps = within_year_representatives(forest, graph);
    let year_of = |id: NodeId| forest.node(id).map(|n| n.year).unwrap_or_default();
    let mut groups = Vec::new();
    for (key, ids) in forest.trim_index() {
        let runs: Vec<&[NodeId]> = match policy {
            YearPairPolicy::AllPairs => vec![ids.as_slice()],
            YearPairPolicy::Adjacent => {
                let mut runs = Vec::new();
                let mut start = 0;
                for i in 1..=ids.len() {
                    if i == ids.len() || year_of(ids[i]) != year_of(ids[i - 1]) + 1 {
                        runs.push(&ids[start..i]);
                        start = i;
                    }
                }
                runs
            }
        };
        for run in runs.into_iter().filter(|r| r.len() >= 2) {
            groups.push(SiblingGroup {
                kind: GroupKind::CrossYear,
                key: GroupKey::CrossYear(key.clone(), year_of(run[0])),
                members: run.iter().map(|id| reps[id.index()]).collect(),
                policy,
            });
        }
    }
    Ok(groups)
}

/// Pairs of the group still waiting for a verdict, in schedule order.
/// Pairs never registered with the graph count as unqueried.
pub fn pending_pairs(group: &SiblingGroup, graph: &MergeGraph) -> Vec<Pair> {
    group
        .pairs()
        .into_iter()
        .filter(|p| match graph.state(*p) {
            None => true,
            Some(s) => matches!(
                s,
                PairState::Unqueried | PairState::NeedsRequery | PairState::Pending
            ),
        })
        .collect()
}

/// Pairs judged different whose endpoints are nevertheless connected by
/// "same" edges among the group's members. A transitively closed group has
/// none.
pub fn clique_violations(graph: &MergeGraph, group: &SiblingGroup) -> Result<Vec<Pair>, GraphError> {
    let candidates = group.pairs();
    let unresolved: Vec<Pair> = candidates
        .iter()
        .copied()
        .filter(|p| !graph.state(*p).is_some_and(PairState::is_resolved))
        .collect();
    if let Some(first) = unresolved.first() {
        return Err(GraphError::PhaseViolation(unresolved.len(), *first));
    }
    let comp = group_components(graph, group);
    let mut out: BTreeSet<Pair> = BTreeSet::new();
    let members: BTreeSet<NodeId> = group.members.iter().copied().collect();
    for (i, a) in members.iter().enumerate() {
        for b in members.iter().skip(i + 1) {
            let p = Pair::new(*a, *b);
            if comp[a] == comp[b] && graph.state(p) == Some(PairState::Different) {
                out.insert(p);
            }
        }
    }
    Ok(out.into_iter().collect())
}

/// Component label per member over "same" edges among group members.
fn group_components(graph: &MergeGraph, group: &SiblingGroup) -> BTreeMap<NodeId, usize> {
    let members: Vec<NodeId> = {
        let set: BTreeSet<NodeId> = group.members.iter().copied().collect();
        set.into_iter().collect()
    };
    let pos: BTreeMap<NodeId, usize> = members.iter().enumerate().map(|(i, n)| (*n, i)).collect();
    let mut ds = DisjointSet::new(members.len());
    for (i, a) in members.iter().enumerate() {
        for b in members.iter().skip(i + 1) {
            if graph.is_edge(Pair::new(*a, *b)) {
                ds.union(i, pos[b]);
            }
        }
    }
    members.iter().map(|n| (*n, ds.find(pos[n]))).collect()
}

/// Pairs to reopen for a set of violations: the violating pairs plus the
/// "same" edges touching their endpoints inside the violating component.
pub fn requery_set(graph: &MergeGraph, group: &SiblingGroup, violations: &[Pair]) -> Vec<Pair> {
    let comp = group_components(graph, group);
    let mut reopen: BTreeSet<Pair> = violations.iter().copied().collect();
    let nodes: BTreeSet<NodeId> = violations.iter().flat_map(|p| [p.lo(), p.hi()]).collect();
    for p in group.pairs() {
        if !graph.is_edge(p) {
            continue;
        }
        let touches = nodes.iter().any(|n| {
            p.contains(*n) && comp.get(n).is_some_and(|c| comp.get(&p.lo()) == Some(c))
        });
        if touches {
            reopen.insert(p);
        }
    }
    reopen.into_iter().collect()
}

/// Reopens [`requery_set`] for the next round. Returns the reopened pairs.
pub fn mark_for_requery(
    graph: &mut MergeGraph,
    group: &SiblingGroup,
    violations: &[Pair],
    round: u32,
) -> Result<Vec<Pair>, GraphError> {
    let reopen = requery_set(graph, group, violations);
    for p in &reopen {
        graph.mark_requery(*p, round)?;
    }
    Ok(reopen)
}

/// Members of each within-year component, keyed by its lowest node id.
pub fn within_year_components(
    forest: &TaxonomyForest,
    graph: &MergeGraph,
) -> BTreeMap<NodeId, Vec<NodeId>> {
    let reps = within_year_representatives(forest, graph);
    let mut out: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
    for id in forest.ids() {
        out.entry(reps[id.index()]).or_default().push(id);
    }
    out
}
