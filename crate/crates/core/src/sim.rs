//! Synthetic worlds and simulated workers.
//!
//! A world is a taxonomy forest plus the planted visual classes the crowd is
//! supposed to recover. Classes are built only along the comparison
//! adjacency (within-year siblings, same-named trims in consecutive years),
//! so every planted class is reachable by the pair schedule.
//!
//! Simulated workers err asymmetrically: by default they miss real
//! differences (answer "same" for a different pair) far more often than they
//! invent differences. Spammers ignore the question and flip a coin.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::vote_log_text;
use crate::classlist::ClassList;
use crate::cost::{cost_report, CostModel, CostReport};
use crate::engine::{Engine, EngineConfig, EngineError, PhaseReport, Submission, WorkerBackend};
use crate::eval::{mean_agreement, Partition};
use crate::graph::{Answer, Pair, Vote};
use crate::rng::{hash_str, rng_for};
use crate::tasks::{BinaryQuery, GoldBank, GoldQuestion, Subject, Task};
use crate::taxonomy::{NodeId, RawTrimRecord, TaxonomyForest};
use crate::unionfind::DisjointSet;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("no ground truth for {0}")]
    UnknownNode(String),
    #[error("invalid world spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Answers the simulator treats as correct.
pub trait TruthSource {
    fn truth(&self, subject: &Subject) -> Option<Answer>;

    /// Pairs that are hard to tell apart; see [`WorkerProfile::subtle_multiplier`].
    fn is_subtle(&self, _subject: &Subject) -> bool {
        false
    }
}

/// Planted visual classes over every node of a world.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroundTruthPartition {
    class_of: Vec<u32>,
    /// Design generation per node; different classes in one generation are
    /// the subtle pairs.
    generation_of: Vec<u32>,
}

impl GroundTruthPartition {
    pub fn new(class_of: Vec<u32>, generation_of: Vec<u32>) -> Self {
        assert_eq!(class_of.len(), generation_of.len());
        Self {
            class_of,
            generation_of,
        }
    }

    pub fn from_partition(p: &Partition, n: usize) -> Result<Self, SimError> {
        let mut class_of = vec![u32::MAX; n];
        for (i, class) in p.classes().iter().enumerate() {
            for id in class {
                let slot = class_of
                    .get_mut(id.index())
                    .ok_or_else(|| SimError::UnknownNode(id.to_string()))?;
                *slot = i as u32;
            }
        }
        if let Some(missing) = class_of.iter().position(|c| *c == u32::MAX) {
            return Err(SimError::Spec(format!("node {missing} has no class")));
        }
        let generation_of = vec![0; n];
        Ok(Self {
            class_of,
            generation_of,
        })
    }

    pub fn len(&self) -> usize {
        self.class_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_of.is_empty()
    }

    pub fn class_of(&self, id: NodeId) -> Option<u32> {
        self.class_of.get(id.index()).copied()
    }

    pub fn same(&self, pair: Pair) -> Option<bool> {
        Some(self.class_of(pair.lo())? == self.class_of(pair.hi())?)
    }

    pub fn partition(&self) -> Partition {
        let mut classes: BTreeMap<u32, Vec<NodeId>> = BTreeMap::new();
        for (i, c) in self.class_of.iter().enumerate() {
            classes.entry(*c).or_default().push(NodeId(i as u32));
        }
        Partition::new(classes.into_values()).expect("labels form a partition")
    }

    pub fn class_count(&self) -> usize {
        self.partition().len()
    }
}

impl TruthSource for GroundTruthPartition {
    fn truth(&self, subject: &Subject) -> Option<Answer> {
        match subject {
            Subject::Pair(p) => self
                .same(*p)
                .map(|s| if s { Answer::Same } else { Answer::Different }),
            _ => None,
        }
    }

    fn is_subtle(&self, subject: &Subject) -> bool {
        match subject {
            Subject::Pair(p) => {
                let (a, b) = (p.lo().index(), p.hi().index());
                a < self.len()
                    && b < self.len()
                    && self.class_of[a] != self.class_of[b]
                    && self.generation_of[a] == self.generation_of[b]
            }
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkerProfile {
    pub worker_id: String,
    /// Chance of answering "same" when the truth is "different".
    pub p_false_same: f64,
    /// Chance of answering "different" when the truth is "same".
    pub p_false_diff: f64,
    pub is_spammer: bool,
    /// Scales `p_false_same` on subtle pairs; 1.0 disables it.
    #[serde(default = "one")]
    pub subtle_multiplier: f64,
}

fn one() -> f64 {
    1.0
}

impl WorkerProfile {
    pub fn noiseless(id: impl Into<String>) -> Self {
        Self {
            worker_id: id.into(),
            p_false_same: 0.0,
            p_false_diff: 0.0,
            is_spammer: false,
            subtle_multiplier: 1.0,
        }
    }

    pub fn spammer(id: impl Into<String>) -> Self {
        Self {
            is_spammer: true,
            ..Self::noiseless(id)
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        for (name, p) in [("p_false_same", self.p_false_same), ("p_false_diff", self.p_false_diff)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SimError::Spec(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if self.subtle_multiplier < 0.0 {
            return Err(SimError::Spec("subtle_multiplier must be >= 0".into()));
        }
        Ok(())
    }
}

/// One simulated answer. Golds are judged against their own answer, other
/// questions against `truth`.
pub fn simulate_answer<R: Rng + ?Sized>(
    worker: &WorkerProfile,
    query: &BinaryQuery,
    truth: &dyn TruthSource,
    rng: &mut R,
) -> Result<Answer, SimError> {
    let correct = match query.gold_answer {
        Some(a) => a,
        None => truth
            .truth(&query.subject)
            .ok_or_else(|| SimError::UnknownNode(query.subject.to_string()))?,
    };
    let u: f64 = rng.gen();
    if worker.is_spammer {
        return Ok(if u < 0.5 { Answer::Same } else { Answer::Different });
    }
    let p_flip = match correct {
        Answer::Different => {
            let m = if truth.is_subtle(&query.subject) {
                worker.subtle_multiplier
            } else {
                1.0
            };
            (worker.p_false_same * m).min(1.0)
        }
        Answer::Same => worker.p_false_diff,
    };
    Ok(if u < p_flip { correct.flip() } else { correct })
}

const SALT_WORKER: u64 = 0x5752_4b52;
const SALT_GOLD: u64 = 0x474f_4c44;
const SALT_ITEM: u64 = 0x4954_454d;

/// Stateless simulated crowd.
///
/// The worker for a task is drawn from the task's questions, and each
/// non-gold answer from the question's subject and how often it was asked
/// before, so the same question gets the same draw in two runs that differ
/// elsewhere.
pub struct SimBackend<'a> {
    pub workers: Vec<WorkerProfile>,
    pub truth: &'a dyn TruthSource,
    pub seed: u64,
}

impl<'a> SimBackend<'a> {
    pub fn new(workers: Vec<WorkerProfile>, truth: &'a dyn TruthSource, seed: u64) -> Self {
        assert!(!workers.is_empty(), "worker pool is empty");
        Self {
            workers,
            truth,
            seed,
        }
    }
}

fn subject_key(s: &Subject) -> u64 {
    match s {
        Subject::Pair(p) => (u64::from(p.lo().0) << 32) | u64::from(p.hi().0),
        Subject::Image(i) => hash_str(i),
        Subject::Gold(g) => hash_str(g),
    }
}

/// Content key of a task: its non-gold subjects and their attempt counts.
/// Two runs that issue the same questions draw the same worker, whatever
/// the task ids are.
fn task_key(task: &Task) -> u64 {
    let parts: Vec<u64> = task
        .non_gold()
        .flat_map(|(_, q)| [subject_key(&q.subject), u64::from(q.attempt)])
        .collect();
    crate::rng::mix(0x5441_534b, &parts)
}

impl WorkerBackend for SimBackend<'_> {
    fn answer(&mut self, task: &Task) -> Submission {
        let key = task_key(task);
        let mut pick = rng_for(self.seed, &[SALT_WORKER, key]);
        let worker = &self.workers[pick.gen_range(0..self.workers.len())];
        let answers = task
            .questions
            .iter()
            .enumerate()
            .map(|(pos, q)| {
                let mut r = if q.is_gold {
                    rng_for(self.seed, &[SALT_GOLD, key, pos as u64])
                } else {
                    rng_for(self.seed, &[SALT_ITEM, subject_key(&q.subject), u64::from(q.attempt)])
                };
                simulate_answer(worker, q, self.truth, &mut r).unwrap_or(Answer::Different)
            })
            .collect();
        Submission {
            worker_id: worker.worker_id.clone(),
            answers,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldSpec {
    pub seed: u64,
    pub n_makes: u32,
    pub models_per_make: u32,
    pub bodies_per_model: u32,
    pub first_year: i32,
    pub n_years: u32,
    /// Inclusive range for the number of trim names per model/body.
    pub trims_per_year: (u32, u32),
    /// Chance a trim name is offered in a given year.
    pub trim_presence: f64,
    /// Inclusive range of consecutive years one design lasts.
    pub generation_length: (u32, u32),
    /// Chance a trim shares its appearance with the previous sibling trim.
    pub trim_merge_probability: f64,
    pub images_per_trim: u32,
    pub n_workers: u32,
    pub spammer_fraction: f64,
    pub p_false_same: f64,
    pub p_false_diff: f64,
    pub subtle_multiplier: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_makes: 3,
            models_per_make: 2,
            bodies_per_model: 1,
            first_year: 2000,
            n_years: 8,
            trims_per_year: (2, 6),
            trim_presence: 0.85,
            generation_length: (2, 4),
            trim_merge_probability: 0.35,
            images_per_trim: 2,
            n_workers: 20,
            spammer_fraction: 0.1,
            p_false_same: 0.15,
            p_false_diff: 0.02,
            subtle_multiplier: 1.0,
        }
    }
}

impl WorldSpec {
    /// Same world with error-free workers and no spammers.
    pub fn noiseless(mut self) -> Self {
        self.p_false_same = 0.0;
        self.p_false_diff = 0.0;
        self.spammer_fraction = 0.0;
        self
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let counts = [
            ("n_makes", self.n_makes),
            ("models_per_make", self.models_per_make),
            ("bodies_per_model", self.bodies_per_model),
            ("n_years", self.n_years),
            ("trims_per_year.0", self.trims_per_year.0),
            ("generation_length.0", self.generation_length.0),
            ("images_per_trim", self.images_per_trim),
            ("n_workers", self.n_workers),
        ];
        for (name, v) in counts {
            if v < 1 {
                return Err(SimError::Spec(format!("{name} must be >= 1")));
            }
        }
        if self.trims_per_year.1 < self.trims_per_year.0 {
            return Err(SimError::Spec("trims_per_year range is empty".into()));
        }
        if self.generation_length.1 < self.generation_length.0 {
            return Err(SimError::Spec("generation_length range is empty".into()));
        }
        for (name, p) in [
            ("trim_presence", self.trim_presence),
            ("trim_merge_probability", self.trim_merge_probability),
            ("spammer_fraction", self.spammer_fraction),
            ("p_false_same", self.p_false_same),
            ("p_false_diff", self.p_false_diff),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SimError::Spec(format!("{name} = {p} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        let spec: Self = toml::from_str(text).map_err(|e| SimError::Spec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("world spec serializes")
    }

    /// Worker pool: the last `round(n * spammer_fraction)` workers spam.
    pub fn workers(&self) -> Vec<WorkerProfile> {
        let n = self.n_workers as usize;
        let spammers = (self.n_workers as f64 * self.spammer_fraction).round() as usize;
        (0..n)
            .map(|i| WorkerProfile {
                worker_id: format!("w{i:03}"),
                p_false_same: self.p_false_same,
                p_false_diff: self.p_false_diff,
                is_spammer: i >= n - spammers.min(n),
                subtle_multiplier: self.subtle_multiplier,
            })
            .collect()
    }
}

pub struct World {
    pub forest: TaxonomyForest,
    pub truth: GroundTruthPartition,
    pub golds: GoldBank,
}

const BODY_NAMES: [&str; 5] = ["sedan", "coupe", "wagon", "suv", "hatchback"];
const TRIM_NAMES: [&str; 10] = [
    "base", "lx", "ex", "se", "sport", "limited", "touring", "gl", "gls", "premium",
];

fn trim_name(i: usize) -> String {
    TRIM_NAMES
        .get(i)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("trim{i}"))
}

/// Generates a world deterministically from `spec.seed`.
pub fn synth_world(spec: &WorldSpec) -> Result<World, SimError> {
    spec.validate()?;
    let mut rng = rng_for(spec.seed, &[0x57_4f52_4c44]);
    let mut records = Vec::new();
    // (make, model, body, generation, look) label per node, plus generation id
    let mut labels: Vec<(u32, u32)> = Vec::new();
    let mut next_look = 0u32;
    let mut next_gen = 0u32;
    for mk in 0..spec.n_makes {
        let make = format!("Make{mk:02}");
        for md in 0..spec.models_per_make {
            let model = format!("Model{md}");
            for b in 0..spec.bodies_per_model {
                let body = BODY_NAMES
                    .get(b as usize)
                    .map(|s| s.to_string())
                    .unwrap_or_else(|| format!("body{b}"));
                let n_trims = rng.gen_range(spec.trims_per_year.0..=spec.trims_per_year.1) as usize;
                let mut year = 0u32;
                while year < spec.n_years {
                    let len = rng
                        .gen_range(spec.generation_length.0..=spec.generation_length.1)
                        .min(spec.n_years - year);
                    let gen_id = next_gen;
                    next_gen += 1;
                    let mut looks = Vec::with_capacity(n_trims);
                    for t in 0..n_trims {
                        if t > 0 && rng.gen_bool(spec.trim_merge_probability) {
                            looks.push(looks[t - 1]);
                        } else {
                            looks.push(next_look);
                            next_look += 1;
                        }
                    }
                    for y in year..year + len {
                        let mut present: Vec<usize> =
                            (0..n_trims).filter(|_| rng.gen_bool(spec.trim_presence)).collect();
                        if present.is_empty() {
                            present.push(rng.gen_range(0..n_trims));
                        }
                        let calendar = spec.first_year + y as i32;
                        for t in present {
                            let trim = trim_name(t);
                            let images = (0..spec.images_per_trim).map(|k| {
                                format!(
                                    "img/{}/{}/{}/{}/{}/{}.jpg",
                                    make.to_lowercase(),
                                    model.to_lowercase(),
                                    body,
                                    calendar,
                                    trim,
                                    k
                                )
                            });
                            records.push(
                                RawTrimRecord::new(&make, &model, &body, calendar, &trim)
                                    .with_images(images),
                            );
                            labels.push((looks[t], gen_id));
                        }
                    }
                    year += len;
                }
            }
        }
    }
    let forest = TaxonomyForest::load(records).map_err(|e| SimError::Spec(e.to_string()))?;
    let looks: Vec<u32> = labels.iter().map(|l| l.0).collect();
    let generation_of: Vec<u32> = labels.iter().map(|l| l.1).collect();
    let class_of = refine_to_reachable(&forest, &looks);
    let truth = GroundTruthPartition::new(class_of, generation_of);
    let golds = world_golds(&forest, spec.seed);
    Ok(World {
        forest,
        truth,
        golds,
    })
}

/// Splits each labelled group into its components under the comparison
/// adjacency, so every class can be reached by the pair schedule.
fn refine_to_reachable(forest: &TaxonomyForest, labels: &[u32]) -> Vec<u32> {
    let mut ds = DisjointSet::new(forest.len());
    for ids in forest.year_index().values() {
        for (i, a) in ids.iter().enumerate() {
            for b in &ids[i + 1..] {
                if labels[a.index()] == labels[b.index()] {
                    ds.union(a.index(), b.index());
                }
            }
        }
    }
    for ids in forest.trim_index().values() {
        for w in ids.windows(2) {
            let (a, b) = (w[0], w[1]);
            let consecutive = forest.node(b).map(|n| n.year) == forest.node(a).map(|n| n.year + 1);
            if consecutive && labels[a.index()] == labels[b.index()] {
                ds.union(a.index(), b.index());
            }
        }
    }
    let mut ids: BTreeMap<usize, u32> = BTreeMap::new();
    (0..forest.len())
        .map(|i| {
            let root = ds.find(i);
            let next = ids.len() as u32;
            *ids.entry(root).or_insert(next)
        })
        .collect()
}

/// Golds from the world itself: a trim against another photo of itself
/// ("same") and trims of two different makes ("different").
fn world_golds(forest: &TaxonomyForest, seed: u64) -> GoldBank {
    let mut rng = rng_for(seed, &[SALT_GOLD]);
    let mut ids: Vec<NodeId> = forest.ids().collect();
    ids.shuffle(&mut rng);
    let mut entries = Vec::new();
    for id in ids.iter().take(20) {
        let n = forest.node(*id).expect("id from forest");
        if n.exemplar_images.len() >= 2 {
            entries.push(GoldQuestion {
                gold_id: format!("same-{id}"),
                left_images: vec![n.exemplar_images[0].clone()],
                right_images: vec![n.exemplar_images[1].clone()],
                answer: Answer::Same,
            });
        }
    }
    let mut diffs = 0;
    for (i, a) in ids.iter().enumerate() {
        if diffs >= 20 {
            break;
        }
        let na = forest.node(*a).expect("id from forest");
        if let Some(b) = ids[i + 1..]
            .iter()
            .find(|b| forest.node(**b).is_some_and(|nb| nb.make != na.make))
        {
            let nb = forest.node(*b).expect("id from forest");
            entries.push(GoldQuestion {
                gold_id: format!("diff-{a}-{b}"),
                left_images: vec![na.exemplar_images[0].clone()],
                right_images: vec![nb.exemplar_images[0].clone()],
                answer: Answer::Different,
            });
            diffs += 1;
        }
    }
    if entries.iter().filter(|g| g.answer == Answer::Different).count() == 0 {
        entries.extend(GoldBank::reference(0, 10).entries);
    }
    if entries.len() < 2 {
        entries.extend(GoldBank::reference(10, 0).entries);
    }
    GoldBank::new(entries)
}

/// The four-trim, two-year example: red, green and yellow look alike in
/// both years and did not change between them; blue is distinct. With
/// `blue_persists` false the blue trim also changed between years, giving
/// three classes.
pub fn fig4_world(blue_persists: bool) -> World {
    let mut records = Vec::new();
    for year in [2001, 2002] {
        for trim in ["red", "green", "yellow", "blue"] {
            records.push(
                RawTrimRecord::new("Example", "Car", "sedan", year, trim).with_images([
                    format!("fig4/{year}/{trim}/0.jpg"),
                    format!("fig4/{year}/{trim}/1.jpg"),
                ]),
            );
        }
    }
    let forest = TaxonomyForest::load(records).expect("fixture is valid");
    // ids: 0..3 = 2001 red, green, yellow, blue; 4..7 = 2002
    let class_of = vec![0, 0, 0, 1, 0, 0, 0, if blue_persists { 1 } else { 2 }];
    let truth = GroundTruthPartition::new(class_of, vec![0; 8]);
    World {
        forest,
        truth,
        golds: GoldBank::reference(4, 4),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub version: String,
    pub world: Option<WorldSpec>,
    pub config: EngineConfig,
    pub backend_seed: u64,
    pub n_trims: usize,
    pub n_true_classes: usize,
    pub n_classes: usize,
    pub agreement: f64,
    pub exact_recovery: bool,
    pub votes: u64,
    pub cost: CostReport,
    pub phases: Vec<PhaseReport>,
}

impl SimReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

pub struct SimOutcome {
    pub class_list: ClassList,
    pub votes: Vec<Vote>,
    pub report: SimReport,
}

impl SimOutcome {
    pub fn vote_log(&self) -> String {
        vote_log_text(&self.votes)
    }
}

/// Summarizes a finished engine against the planted truth.
pub fn summarize(
    engine: &Engine,
    truth: &GroundTruthPartition,
    world: Option<WorldSpec>,
    backend_seed: u64,
) -> SimReport {
    let class_list = engine.class_list();
    let alg = Partition::from_class_list(&class_list);
    let exp = truth.partition();
    let agreement = mean_agreement(&alg, &exp).map(|r| r.mean).unwrap_or(1.0);
    SimReport {
        version: env!("CARGO_PKG_VERSION").to_string(),
        world,
        config: engine.config().clone(),
        backend_seed,
        n_trims: engine.forest().len(),
        n_true_classes: exp.len(),
        n_classes: class_list.len(),
        agreement,
        exact_recovery: alg.equivalent(&exp),
        votes: engine.votes_recorded(),
        cost: cost_report(engine.ledger(), &CostModel::quoted()),
        phases: engine.reports().to_vec(),
    }
}

/// Runs a whole world through the engine with the given worker pool.
pub fn run_world(
    world: &World,
    workers: Vec<WorkerProfile>,
    config: &EngineConfig,
    backend_seed: u64,
    spec: Option<WorldSpec>,
) -> Result<SimOutcome, SimError> {
    for w in &workers {
        w.validate()?;
    }
    let mut engine = Engine::new(world.forest.clone(), world.golds.clone(), config.clone())?;
    let mut backend = SimBackend::new(workers, &world.truth, backend_seed);
    let mut votes = Vec::new();
    engine.run(&mut backend, None, &mut |v| votes.extend_from_slice(v))?;
    let report = summarize(&engine, &world.truth, spec, backend_seed);
    Ok(SimOutcome {
        class_list: engine.class_list(),
        votes,
        report,
    })
}

pub fn backend_seed(world_seed: u64, config_seed: u64) -> u64 {
    crate::rng::mix(world_seed, &[config_seed, 0x4241_434b])
}

/// Synthesizes the world for `spec`, runs the full pipeline with its worker
/// pool and scores the result against the planted classes.
pub fn run_pipeline_sim(spec: &WorldSpec, config: &EngineConfig) -> Result<SimOutcome, SimError> {
    let world = synth_world(spec)?;
    run_world(
        &world,
        spec.workers(),
        config,
        backend_seed(spec.seed, config.seed),
        Some(spec.clone()),
    )
}
