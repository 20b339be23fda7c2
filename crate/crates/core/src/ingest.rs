//! Listing ingestion: query construction, title matching, harvesting and
//! car/not-car verification of harvested images.
//!
//! Matching is whole-token: a post matches a query when every query token
//! appears as a token of the normalized title. Posts matching more than one
//! query are skipped rather than guessed at.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregate::{aggregate_votes, Aggregate, AggregationPolicy, AggregationRule, WorkerQuality};
use crate::classlist::ClassList;
use crate::cost::{CostLedger, Money};
use crate::engine::WorkerBackend;
use crate::graph::{Answer, Pair, Vote};
use crate::rng::mix;
use crate::sim::TruthSource;
use crate::tasks::{
    build_tasks, grade_task, GoldBank, GoldQuestion, QueryItem, Subject, TaskError, TaskStatus,
    IMAGE_PROMPT,
};
use crate::taxonomy::{NodeId, TaxonomyForest, TrimNode};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("invalid policy: {0}")]
    Policy(String),
    #[error("node {0} is not in the forest")]
    UnknownNode(NodeId),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ListingPost {
    pub post_id: u64,
    pub title: String,
    #[serde(default)]
    pub body: String,
    #[serde(rename = "images", default)]
    pub image_refs: Vec<String>,
    #[serde(default)]
    pub source: String,
}

/// Reads a JSON-lines corpus. Blank lines are skipped.
pub fn read_corpus(path: &Path) -> Result<Vec<ListingPost>, IngestError> {
    let reader = BufReader::new(File::open(path)?);
    let mut posts = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let post: ListingPost = serde_json::from_str(&line).map_err(|e| IngestError::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?;
        if post.title.trim().is_empty() {
            return Err(IngestError::Malformed {
                line: i + 1,
                message: "empty title".into(),
            });
        }
        posts.push(post);
    }
    Ok(posts)
}

pub fn write_corpus(posts: &[ListingPost]) -> String {
    posts
        .iter()
        .map(|p| serde_json::to_string(p).expect("post serializes") + "\n")
        .collect()
}

/// Lowercases, splits on whitespace and hyphens, and strips everything but
/// letters and digits from each piece.
pub fn normalize_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| c.is_whitespace() || c == '-')
        .map(|w| {
            w.chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySpec {
    pub node_id: NodeId,
    pub tokens: Vec<String>,
}

/// Tokens of year, make, model, body and trim, in that order.
pub fn build_query(node: &TrimNode) -> QuerySpec {
    let mut tokens = normalize_tokens(&node.year.to_string());
    for field in [&node.make, &node.model, &node.body, &node.trim] {
        tokens.extend(normalize_tokens(field));
    }
    QuerySpec {
        node_id: node.id,
        tokens,
    }
}

pub fn build_queries(forest: &TaxonomyForest) -> Vec<QuerySpec> {
    forest.nodes().iter().map(build_query).collect()
}

pub fn match_post(query: &QuerySpec, post: &ListingPost) -> bool {
    let title: BTreeSet<String> = normalize_tokens(&post.title).into_iter().collect();
    query.tokens.iter().all(|t| title.contains(t))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verification {
    Unverified,
    Car,
    NotCar,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateImage {
    pub image_ref: String,
    pub node_id: NodeId,
    pub post_id: u64,
    pub verification: Verification,
}

impl CandidateImage {
    /// Only Unverified may change, and only to a final verdict.
    pub fn set_verification(&mut self, v: Verification) -> bool {
        if self.verification != Verification::Unverified || v == Verification::Unverified {
            return false;
        }
        self.verification = v;
        true
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AmbiguousPost {
    pub post_id: u64,
    pub nodes: Vec<NodeId>,
    /// Images this post owned after deduplication; none become candidates.
    pub image_refs: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HarvestResult {
    /// Sorted by image ref.
    pub candidates: Vec<CandidateImage>,
    /// Sorted by post id.
    pub ambiguous: Vec<AmbiguousPost>,
}

impl HarvestResult {
    pub fn ambiguous_images(&self) -> usize {
        self.ambiguous.iter().map(|a| a.image_refs.len()).sum()
    }
}

/// Matches every post against every query through an inverted token index.
///
/// An image shared by several matched posts belongs to the lowest post id;
/// if that post is ambiguous the image is skipped. The result does not
/// depend on corpus order.
pub fn harvest(corpus: &[ListingPost], queries: &[QuerySpec]) -> HarvestResult {
    let mut index: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (qi, q) in queries.iter().enumerate() {
        let distinct: BTreeSet<&String> = q.tokens.iter().collect();
        for t in distinct {
            index.entry(t.as_str()).or_default().push(qi);
        }
    }
    let mut matched: BTreeMap<u64, (&ListingPost, Vec<NodeId>)> = BTreeMap::new();
    for post in corpus {
        let title: BTreeSet<String> = normalize_tokens(&post.title).into_iter().collect();
        let mut hits: BTreeMap<usize, usize> = BTreeMap::new();
        for t in &title {
            if let Some(qs) = index.get(t.as_str()) {
                for qi in qs {
                    *hits.entry(*qi).or_default() += 1;
                }
            }
        }
        let mut nodes: Vec<NodeId> = hits
            .into_iter()
            .filter(|(qi, n)| {
                let q = &queries[*qi];
                let distinct: BTreeSet<&String> = q.tokens.iter().collect();
                !q.tokens.is_empty() && *n == distinct.len()
            })
            .map(|(qi, _)| queries[qi].node_id)
            .collect();
        nodes.sort();
        nodes.dedup();
        if nodes.is_empty() {
            continue;
        }
        // duplicate post ids: keep the first by title order for determinism
        let entry = matched.entry(post.post_id).or_insert((post, nodes.clone()));
        if (post.title.as_str(), &post.image_refs) < (entry.0.title.as_str(), &entry.0.image_refs) {
            *entry = (post, nodes);
        }
    }

    let mut owner: BTreeMap<&str, u64> = BTreeMap::new();
    for (pid, (post, _)) in &matched {
        for img in &post.image_refs {
            owner.entry(img.as_str()).or_insert(*pid);
        }
    }
    let mut result = HarvestResult::default();
    for (pid, (post, nodes)) in &matched {
        let owned: Vec<String> = post
            .image_refs
            .iter()
            .filter(|i| owner.get(i.as_str()) == Some(pid))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .cloned()
            .collect();
        if nodes.len() > 1 {
            result.ambiguous.push(AmbiguousPost {
                post_id: *pid,
                nodes: nodes.clone(),
                image_refs: owned,
            });
        } else {
            result.candidates.extend(owned.into_iter().map(|image_ref| CandidateImage {
                image_ref,
                node_id: nodes[0],
                post_id: *pid,
                verification: Verification::Unverified,
            }));
        }
    }
    result.candidates.sort_by(|a, b| a.image_ref.cmp(&b.image_ref));
    result
}

/// Ground truth for image questions: listed refs contain a car.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageTruth {
    pub cars: BTreeSet<String>,
    pub not_cars: BTreeSet<String>,
}

impl TruthSource for ImageTruth {
    fn truth(&self, subject: &Subject) -> Option<Answer> {
        match subject {
            Subject::Image(i) if self.cars.contains(i) => Some(Answer::Same),
            Subject::Image(i) if self.not_cars.contains(i) => Some(Answer::Different),
            _ => None,
        }
    }
}

/// Image golds: "yes" is recorded as [`Answer::Same`], "no" as
/// [`Answer::Different`]. The image is shown on both sides.
pub fn image_gold_bank(n_car: usize, n_not_car: usize) -> GoldBank {
    let gold = |id: String, img: String, answer| GoldQuestion {
        gold_id: id,
        left_images: vec![img.clone()],
        right_images: vec![img],
        answer,
    };
    let mut entries = Vec::new();
    for i in 0..n_car {
        entries.push(gold(format!("car-{i}"), format!("ref/car/{i:03}.jpg"), Answer::Same));
    }
    for i in 0..n_not_car {
        entries.push(gold(
            format!("notcar-{i}"),
            format!("ref/notcar/{i:03}.jpg"),
            Answer::Different,
        ));
    }
    GoldBank::new(entries)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyStats {
    pub total: u64,
    pub retained: u64,
    /// Judged not-car, or still undecided when the wave cap was hit.
    pub excluded: u64,
    pub unresolved: u64,
    pub ambiguous_skipped: u64,
    pub waves: u64,
    pub tasks_issued: u64,
    pub tasks_accepted: u64,
    pub tasks_rejected: u64,
    pub votes: u64,
    pub cost: Money,
}

impl VerifyStats {
    /// retained + excluded + ambiguous-skipped = total.
    pub fn conserved(&self) -> bool {
        self.retained + self.excluded + self.ambiguous_skipped == self.total
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyOptions {
    pub seed: u64,
    pub price_per_task: Money,
    /// Gives up on images still undecided after this many waves.
    pub max_waves: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            price_per_task: Money::from_cents(10),
            max_waves: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyOutcome {
    pub candidates: Vec<CandidateImage>,
    pub stats: VerifyStats,
}

impl VerifyOutcome {
    pub fn retained(&self) -> impl Iterator<Item = &CandidateImage> {
        self.candidates
            .iter()
            .filter(|c| c.verification == Verification::Car)
    }
}

// Aggregation works per subject, so each image's votes share one key.
const IMAGE_VOTE_KEY: (u32, u32) = (0, 1);

/// Runs car/not-car tasks in waves until every candidate has a verdict.
/// Each wave asks once about every undecided image; rejected tasks are
/// unpaid and their images are asked again in the next wave.
pub fn verify_images(
    harvest: &HarvestResult,
    backend: &mut dyn WorkerBackend,
    policy: &AggregationPolicy,
    golds: &GoldBank,
    options: &VerifyOptions,
) -> Result<VerifyOutcome, IngestError> {
    policy.validate().map_err(IngestError::Policy)?;
    let mut candidates = harvest.candidates.clone();
    let mut stats = VerifyStats {
        total: (candidates.len() + harvest.ambiguous_images()) as u64,
        ambiguous_skipped: harvest.ambiguous_images() as u64,
        ..VerifyStats::default()
    };
    if candidates.is_empty() {
        return Ok(VerifyOutcome { candidates, stats });
    }
    golds.validate()?;
    let key = Pair::new(NodeId(IMAGE_VOTE_KEY.0), NodeId(IMAGE_VOTE_KEY.1));
    let mut votes: Vec<Vec<Vote>> = vec![Vec::new(); candidates.len()];
    let mut attempts = vec![0u32; candidates.len()];
    let mut quality = WorkerQuality::default();
    let mut ledger = CostLedger::new(options.price_per_task);
    let mut next_task = 0u64;

    while stats.waves < options.max_waves {
        let open: Vec<usize> = (0..candidates.len())
            .filter(|i| candidates[*i].verification == Verification::Unverified)
            .collect();
        if open.is_empty() {
            break;
        }
        let items: Vec<QueryItem> = open
            .iter()
            .map(|i| QueryItem {
                subject: Subject::Image(candidates[*i].image_ref.clone()),
                left_images: vec![candidates[*i].image_ref.clone()],
                right_images: vec![candidates[*i].image_ref.clone()],
                attempt: attempts[*i],
            })
            .collect();
        let by_ref: BTreeMap<&str, usize> = open
            .iter()
            .map(|i| (candidates[*i].image_ref.as_str(), *i))
            .collect();
        let seed = mix(options.seed, &[stats.waves]);
        let tasks = build_tasks(&items, golds, IMAGE_PROMPT, seed, next_task, 0)?;
        next_task += tasks.len() as u64;
        stats.tasks_issued += tasks.len() as u64;
        for i in &open {
            attempts[*i] += 1;
        }
        for task in &tasks {
            let sub = backend.answer(task);
            let grade = grade_task(task, &sub.answers)?;
            for ok in grade.gold_correct {
                quality.record(&sub.worker_id, ok);
            }
            if grade.status != TaskStatus::Accepted {
                stats.tasks_rejected += 1;
                continue;
            }
            stats.tasks_accepted += 1;
            let mut n = 0;
            for (pos, q) in task.non_gold() {
                let Subject::Image(img) = &q.subject else { continue };
                let idx = by_ref[img.as_str()];
                votes[idx].push(Vote {
                    query_id: q.query_id.clone(),
                    pair: key,
                    worker_id: sub.worker_id.clone(),
                    answer: sub.answers[pos],
                    round: 0,
                    task_id: task.task_id,
                    timestamp: task.task_id,
                });
                n += 1;
            }
            stats.votes += n;
            ledger.pay(n);
        }
        let mut wave_policy = policy.clone();
        if wave_policy.rule == AggregationRule::QualityWeighted {
            wave_policy.worker_quality = quality.estimates();
        }
        for i in open {
            if let Aggregate::Decided(a) = aggregate_votes(&votes[i], &wave_policy) {
                let v = match a {
                    Answer::Same => Verification::Car,
                    Answer::Different => Verification::NotCar,
                };
                candidates[i].set_verification(v);
            }
        }
        stats.waves += 1;
    }

    for c in &candidates {
        match c.verification {
            Verification::Car => stats.retained += 1,
            Verification::NotCar => stats.excluded += 1,
            Verification::Unverified => {
                stats.excluded += 1;
                stats.unresolved += 1;
            }
        }
    }
    stats.cost = ledger.total_crowd_cost;
    Ok(VerifyOutcome { candidates, stats })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub class_id: u32,
    pub class_name: String,
    pub post_id: u64,
}

/// One entry per retained image, labelled with the class of its node.
pub fn build_manifest(
    candidates: &[CandidateImage],
    classes: &ClassList,
) -> Result<Vec<ManifestEntry>, IngestError> {
    let mut out = Vec::new();
    for c in candidates {
        if c.verification != Verification::Car {
            continue;
        }
        let class = classes
            .class_of(c.node_id)
            .ok_or(IngestError::UnknownNode(c.node_id))?;
        out.push(ManifestEntry {
            image: c.image_ref.clone(),
            class_id: class.id,
            class_name: class.name.clone(),
            post_id: c.post_id,
        });
    }
    out.sort_by(|a, b| a.image.cmp(&b.image));
    Ok(out)
}

pub fn manifest_jsonl(entries: &[ManifestEntry]) -> String {
    entries
        .iter()
        .map(|e| serde_json::to_string(e).expect("manifest serializes") + "\n")
        .collect()
}

/// How a synthetic post's title was built.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PostKind {
    /// All query tokens of one node, shuffled, with filler words.
    Planted,
    /// Query tokens glued together or extended, so only substring search
    /// would find them.
    SubstringTrap,
    /// Tokens of two sibling trims, so the post matches both.
    Ambiguous,
    Noise,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticCorpus {
    pub posts: Vec<ListingPost>,
    pub kinds: Vec<PostKind>,
    /// Node each planted or trap post was built from.
    pub planted_node: Vec<Option<NodeId>>,
    pub truth: ImageTruth,
}

const FILLER: [&str; 8] = ["clean", "title", "low", "miles", "must", "see", "obo", "runs"];

/// Corpus of `n_posts` posts over `forest`: roughly half planted matches,
/// a sixth substring traps, a twentieth two-trim ambiguous titles, the rest
/// noise. About one image in six is
/// planted as not containing a car.
pub fn synth_corpus(forest: &TaxonomyForest, n_posts: usize, seed: u64) -> SyntheticCorpus {
    use rand::seq::SliceRandom;
    use rand::Rng;
    let mut rng = crate::rng::rng_for(seed, &[0x434f_5250]);
    let mut out = SyntheticCorpus {
        posts: Vec::with_capacity(n_posts),
        kinds: Vec::with_capacity(n_posts),
        planted_node: Vec::with_capacity(n_posts),
        truth: ImageTruth::default(),
    };
    let nodes = forest.nodes();
    for pid in 0..n_posts as u64 {
        let roll: f64 = rng.gen();
        let (kind, node) = if nodes.is_empty() || roll >= 0.7 {
            (PostKind::Noise, None)
        } else if roll < 0.5 {
            (PostKind::Planted, Some(&nodes[rng.gen_range(0..nodes.len())]))
        } else if roll < 0.65 {
            (PostKind::SubstringTrap, Some(&nodes[rng.gen_range(0..nodes.len())]))
        } else {
            (PostKind::Ambiguous, Some(&nodes[rng.gen_range(0..nodes.len())]))
        };
        let mut words: Vec<String> = match (kind, node) {
            (PostKind::Planted, Some(n)) => build_query(n).tokens,
            (PostKind::SubstringTrap, Some(n)) => {
                let mut t = build_query(n).tokens;
                let i = rng.gen_range(0..t.len());
                if i + 1 < t.len() && rng.gen_bool(0.5) {
                    let glued = format!("{}{}", t[i], t[i + 1]);
                    t.splice(i..i + 2, [glued]);
                } else {
                    t[i].push('x');
                }
                t
            }
            (PostKind::Ambiguous, Some(n)) => {
                let mut t = build_query(n).tokens;
                let siblings = &forest.year_index()[&n.year_key()];
                if let Some(other) = siblings.iter().find(|s| **s != n.id) {
                    let extra = normalize_tokens(&forest.node(*other).expect("indexed").trim);
                    t.extend(extra);
                }
                t
            }
            _ => Vec::new(),
        };
        for _ in 0..rng.gen_range(1..4) {
            words.push(FILLER[rng.gen_range(0..FILLER.len())].to_string());
        }
        words.shuffle(&mut rng);
        let n_images = rng.gen_range(0..4);
        let images: Vec<String> = (0..n_images).map(|k| format!("post/{pid}/{k}.jpg")).collect();
        for img in &images {
            if rng.gen_bool(1.0 / 6.0) {
                out.truth.not_cars.insert(img.clone());
            } else {
                out.truth.cars.insert(img.clone());
            }
        }
        out.posts.push(ListingPost {
            post_id: pid,
            title: words.join(" "),
            body: String::new(),
            image_refs: images,
            source: "synthetic".into(),
        });
        out.kinds.push(kind);
        out.planted_node.push(node.map(|n| n.id));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::RawTrimRecord;

    fn node(year: i32, make: &str, model: &str, body: &str, trim: &str) -> TrimNode {
        let f = TaxonomyForest::load(vec![RawTrimRecord::new(make, model, body, year, trim)
            .with_images(["x.jpg".to_string()])])
        .unwrap();
        f.nodes()[0].clone()
    }

    fn post(id: u64, title: &str, images: &[&str]) -> ListingPost {
        ListingPost {
            post_id: id,
            title: title.into(),
            body: String::new(),
            image_refs: images.iter().map(|s| s.to_string()).collect(),
            source: "test".into(),
        }
    }

    #[test]
    fn query_tokens() {
        let q = build_query(&node(2011, "GMC", "Sierra-1500", "extended cab", "sle"));
        assert_eq!(q.tokens, ["2011", "gmc", "sierra", "1500", "extended", "cab", "sle"]);
        let q = build_query(&node(2010, "Honda", "Accord", "sedan", "EX-L"));
        assert_eq!(q.tokens, ["2010", "honda", "accord", "sedan", "ex", "l"]);
    }

    #[test]
    fn title_matching() {
        let q = build_query(&node(2010, "Honda", "Accord", "sedan", "lx"));
        assert!(match_post(&q, &post(1, "2010 Honda Accord LX sedan low miles", &[])));
        assert!(!match_post(&q, &post(2, "2010 Honda Accord EX sedan", &[])));
        assert!(!match_post(&q, &post(3, "2010 hondaaccord lx sedan", &[])));
        let mut in_body = post(4, "great car", &[]);
        in_body.body = "2010 Honda Accord LX sedan".into();
        assert!(!match_post(&q, &in_body));
    }

    #[test]
    fn harvest_rules() {
        let queries = vec![
            build_query(&node(2010, "Honda", "Accord", "sedan", "lx")),
            QuerySpec {
                node_id: NodeId(1),
                tokens: vec!["2010".into(), "honda".into(), "accord".into(), "sedan".into(), "ex".into()],
            },
        ];
        let single = harvest(&[post(1, "2010 honda accord sedan lx", &["a", "b", "c"])], &queries);
        assert_eq!(single.candidates.len(), 3);
        assert!(single.ambiguous.is_empty());
        let both = harvest(&[post(1, "2010 honda accord sedan lx ex", &["a"])], &queries);
        assert!(both.candidates.is_empty());
        assert_eq!(both.ambiguous.len(), 1);
        // shared image goes to the lowest post id
        let shared = harvest(
            &[
                post(9, "2010 honda accord sedan ex", &["s"]),
                post(2, "2010 honda accord sedan lx", &["s"]),
            ],
            &queries,
        );
        assert_eq!(shared.candidates.len(), 1);
        assert_eq!(shared.candidates[0].post_id, 2);
    }

    #[test]
    fn verification_transitions_once() {
        let mut c = CandidateImage {
            image_ref: "a".into(),
            node_id: NodeId(0),
            post_id: 0,
            verification: Verification::Unverified,
        };
        assert!(!c.set_verification(Verification::Unverified));
        assert!(c.set_verification(Verification::Car));
        assert!(!c.set_verification(Verification::NotCar));
        assert_eq!(c.verification, Verification::Car);
    }

    #[test]
    fn empty_candidates_cost_nothing() {
        struct Never;
        impl WorkerBackend for Never {
            fn answer(&mut self, _: &crate::tasks::Task) -> crate::engine::Submission {
                unreachable!()
            }
        }
        let out = verify_images(
            &HarvestResult::default(),
            &mut Never,
            &AggregationPolicy::default(),
            &image_gold_bank(2, 2),
            &VerifyOptions::default(),
        )
        .unwrap();
        assert!(out.candidates.is_empty());
        assert_eq!(out.stats.tasks_issued, 0);
        assert!(out.stats.conserved());
    }
}
