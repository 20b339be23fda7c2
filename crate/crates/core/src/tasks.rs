//! Six-question work units with two embedded gold standards.

use std::fmt;
use std::io::Read;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Answer, Pair};
use crate::rng::rng_for;

pub const QUESTIONS_PER_TASK: usize = 6;
pub const GOLDS_PER_TASK: usize = 2;
pub const ITEMS_PER_TASK: usize = QUESTIONS_PER_TASK - GOLDS_PER_TASK;

pub const PAIR_PROMPT: &str = "Are these two cars the same?";
pub const IMAGE_PROMPT: &str = "Does this image contain a car?";

/// The 15 unordered slot pairs a task's two golds can occupy.
pub const GOLD_SLOT_PAIRS: [[usize; 2]; 15] = [
    [0, 1], [0, 2], [0, 3], [0, 4], [0, 5],
    [1, 2], [1, 3], [1, 4], [1, 5],
    [2, 3], [2, 4], [2, 5],
    [3, 4], [3, 5],
    [4, 5],
];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TaskError {
    #[error("gold bank holds {0} question(s); at least 2 are required")]
    InsufficientGolds(usize),
    #[error("expected {expected} answers, got {got}")]
    WrongAnswerCount { expected: usize, got: usize },
    #[error("gold bank: {0}")]
    BadGold(String),
}

/// What a question asks about.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subject {
    Pair(Pair),
    /// Car / not-car verification of one harvested image.
    Image(String),
    Gold(String),
}

impl fmt::Display for Subject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Subject::Pair(p) => write!(f, "pair{p}"),
            Subject::Image(i) => write!(f, "image:{i}"),
            Subject::Gold(g) => write!(f, "gold:{g}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryQuery {
    pub query_id: String,
    pub subject: Subject,
    pub prompt: String,
    pub left_images: Vec<String>,
    pub right_images: Vec<String>,
    pub is_gold: bool,
    pub gold_answer: Option<Answer>,
    /// How many times this subject had been dispatched before this task.
    pub attempt: u32,
}

/// A non-gold question waiting to be packaged.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueryItem {
    pub subject: Subject,
    pub left_images: Vec<String>,
    pub right_images: Vec<String>,
    pub attempt: u32,
}

/// Gold question with a known answer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldQuestion {
    pub gold_id: String,
    pub left_images: Vec<String>,
    pub right_images: Vec<String>,
    pub answer: Answer,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldBank {
    pub entries: Vec<GoldQuestion>,
}

impl GoldBank {
    pub fn new(entries: Vec<GoldQuestion>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Bank of `n_same + n_diff` golds over opaque reference images, for
    /// fixtures whose forest offers no second make to contrast against.
    pub fn reference(n_same: usize, n_diff: usize) -> Self {
        let mut entries = Vec::new();
        for i in 0..n_same {
            entries.push(GoldQuestion {
                gold_id: format!("ref-same-{i}"),
                left_images: vec![format!("ref/{i:03}a.jpg")],
                right_images: vec![format!("ref/{i:03}b.jpg")],
                answer: Answer::Same,
            });
        }
        for i in 0..n_diff {
            entries.push(GoldQuestion {
                gold_id: format!("ref-diff-{i}"),
                left_images: vec![format!("ref/{:03}c.jpg", i)],
                right_images: vec![format!("ref/{:03}d.jpg", i)],
                answer: Answer::Different,
            });
        }
        Self { entries }
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        for g in &self.entries {
            if g.left_images.is_empty() || g.right_images.is_empty() {
                return Err(TaskError::BadGold(format!("{} has no images", g.gold_id)));
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for g in &self.entries {
            out.push_str(&serde_json::to_string(g).expect("gold serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl<R: Read>(mut reader: R) -> Result<Self, TaskError> {
        let mut text = String::new();
        reader
            .read_to_string(&mut text)
            .map_err(|e| TaskError::BadGold(e.to_string()))?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let g: GoldQuestion = serde_json::from_str(line)
                .map_err(|e| TaskError::BadGold(format!("line {}: {e}", i + 1)))?;
            entries.push(g);
        }
        let bank = Self { entries };
        bank.validate()?;
        Ok(bank)
    }

    pub fn from_path(path: &Path) -> Result<Self, TaskError> {
        let f = std::fs::File::open(path)
            .map_err(|e| TaskError::BadGold(format!("{}: {e}", path.display())))?;
        Self::from_jsonl(f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Open,
    Submitted,
    Accepted,
    Rejected,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub task_id: u64,
    pub questions: Vec<BinaryQuery>,
    pub gold_positions: [usize; 2],
    pub assigned_worker: Option<String>,
    pub status: TaskStatus,
    /// Query round the task was built for.
    pub round: u32,
}

impl Task {
    pub fn non_gold(&self) -> impl Iterator<Item = (usize, &BinaryQuery)> {
        self.questions.iter().enumerate().filter(|(_, q)| !q.is_gold)
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        if self.questions.len() != QUESTIONS_PER_TASK {
            return Err(format!("{} questions", self.questions.len()));
        }
        let golds: Vec<usize> = self
            .questions
            .iter()
            .enumerate()
            .filter(|(_, q)| q.is_gold)
            .map(|(i, _)| i)
            .collect();
        if golds != self.gold_positions.to_vec() {
            return Err(format!(
                "gold flags at {golds:?}, positions {:?}",
                self.gold_positions
            ));
        }
        for q in &self.questions {
            if q.is_gold != q.gold_answer.is_some() {
                return Err(format!("{}: gold flag and answer disagree", q.query_id));
            }
            if q.left_images.is_empty() || q.right_images.is_empty() {
                return Err(format!("{}: missing images", q.query_id));
            }
        }
        Ok(())
    }
}

/// Packs `items` four to a task and adds two golds per task at uniformly
/// drawn slot positions. A final partial chunk is padded by cycling its own
/// items. Slots and golds depend only on `seed`; task ids count up from
/// `first_task_id`.
pub fn build_tasks(
    items: &[QueryItem],
    golds: &GoldBank,
    prompt: &str,
    seed: u64,
    first_task_id: u64,
    round: u32,
) -> Result<Vec<Task>, TaskError> {
    if golds.len() < GOLDS_PER_TASK {
        return Err(TaskError::InsufficientGolds(golds.len()));
    }
    let mut rng = rng_for(seed, &[]);
    let mut tasks = Vec::with_capacity(items.len().div_ceil(ITEMS_PER_TASK));
    for (i, chunk) in items.chunks(ITEMS_PER_TASK).enumerate() {
        let task_id = first_task_id + i as u64;
        let slots = GOLD_SLOT_PAIRS[rng.gen_range(0..GOLD_SLOT_PAIRS.len())];
        let picked = sample(&mut rng, golds.len(), GOLDS_PER_TASK);
        let mut fill = chunk.iter().cycle();
        let mut gold_iter = picked.iter();
        let questions = (0..QUESTIONS_PER_TASK)
            .map(|pos| {
                let query_id = format!("t{task_id}-q{pos}");
                if slots.contains(&pos) {
                    let g = &golds.entries[gold_iter.next().expect("two golds")];
                    BinaryQuery {
                        query_id,
                        subject: Subject::Gold(g.gold_id.clone()),
                        prompt: prompt.to_string(),
                        left_images: g.left_images.clone(),
                        right_images: g.right_images.clone(),
                        is_gold: true,
                        gold_answer: Some(g.answer),
                        attempt: 0,
                    }
                } else {
                    let item = fill.next().expect("non-empty chunk");
                    BinaryQuery {
                        query_id,
                        subject: item.subject.clone(),
                        prompt: prompt.to_string(),
                        left_images: item.left_images.clone(),
                        right_images: item.right_images.clone(),
                        is_gold: false,
                        gold_answer: None,
                        attempt: item.attempt,
                    }
                }
            })
            .collect();
        tasks.push(Task {
            task_id,
            questions,
            gold_positions: slots,
            assigned_worker: None,
            status: TaskStatus::Open,
            round,
        });
    }
    Ok(tasks)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskGrade {
    pub status: TaskStatus,
    pub gold_correct: [bool; 2],
}

/// Accepts a task only when both gold answers are correct.
pub fn grade_task(task: &Task, answers: &[Answer]) -> Result<TaskGrade, TaskError> {
    if answers.len() != task.questions.len() {
        return Err(TaskError::WrongAnswerCount {
            expected: task.questions.len(),
            got: answers.len(),
        });
    }
    let gold_correct = task
        .gold_positions
        .map(|pos| task.questions[pos].gold_answer == Some(answers[pos]));
    let status = if gold_correct.iter().all(|c| *c) {
        TaskStatus::Accepted
    } else {
        TaskStatus::Rejected
    };
    Ok(TaskGrade {
        status,
        gold_correct,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::NodeId;
    use std::collections::BTreeSet;

    fn items(n: u32) -> Vec<QueryItem> {
        (0..n)
            .map(|i| QueryItem {
                subject: Subject::Pair(Pair::new(NodeId(2 * i), NodeId(2 * i + 1))),
                left_images: vec![format!("l{i}")],
                right_images: vec![format!("r{i}")],
                attempt: 0,
            })
            .collect()
    }

    #[test]
    fn eight_pairs_make_two_tasks() {
        let tasks = build_tasks(&items(8), &GoldBank::reference(3, 3), PAIR_PROMPT, 1, 0, 0).unwrap();
        assert_eq!(tasks.len(), 2);
        for t in &tasks {
            t.check_invariants().unwrap();
            assert_eq!(t.questions.iter().filter(|q| q.is_gold).count(), 2);
            let distinct: BTreeSet<_> = t.non_gold().map(|(_, q)| q.subject.clone()).collect();
            assert_eq!(distinct.len(), 4);
        }
        assert_eq!(tasks[1].task_id, 1);
    }

    #[test]
    fn single_pair_is_padded() {
        let tasks = build_tasks(&items(1), &GoldBank::reference(1, 1), PAIR_PROMPT, 9, 5, 0).unwrap();
        assert_eq!(tasks.len(), 1);
        let t = &tasks[0];
        t.check_invariants().unwrap();
        let subjects: Vec<_> = t.non_gold().map(|(_, q)| q.subject.clone()).collect();
        assert_eq!(subjects.len(), 4);
        assert!(subjects.iter().all(|s| *s == subjects[0]));
        let golds: BTreeSet<_> = t.questions.iter().filter(|q| q.is_gold).map(|q| q.subject.clone()).collect();
        assert_eq!(golds.len(), 2, "golds drawn without replacement");
    }

    #[test]
    fn insufficient_golds() {
        assert_eq!(
            build_tasks(&items(4), &GoldBank::reference(1, 0), PAIR_PROMPT, 0, 0, 0),
            Err(TaskError::InsufficientGolds(1))
        );
    }

    #[test]
    fn deterministic_for_seed() {
        let bank = GoldBank::reference(5, 5);
        let a = build_tasks(&items(12), &bank, PAIR_PROMPT, 3, 0, 0).unwrap();
        let b = build_tasks(&items(12), &bank, PAIR_PROMPT, 3, 0, 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn grading_requires_both_golds() {
        let t = build_tasks(&items(4), &GoldBank::reference(2, 2), PAIR_PROMPT, 4, 0, 0)
            .unwrap()
            .remove(0);
        let truthful: Vec<Answer> = t
            .questions
            .iter()
            .map(|q| q.gold_answer.unwrap_or(Answer::Same))
            .collect();
        assert_eq!(grade_task(&t, &truthful).unwrap().status, TaskStatus::Accepted);
        let mut wrong = truthful.clone();
        wrong[t.gold_positions[1]] = wrong[t.gold_positions[1]].flip();
        let g = grade_task(&t, &wrong).unwrap();
        assert_eq!(g.status, TaskStatus::Rejected);
        assert_eq!(g.gold_correct, [true, false]);
        assert_eq!(
            grade_task(&t, &truthful[..5]),
            Err(TaskError::WrongAnswerCount { expected: 6, got: 5 })
        );
    }

    #[test]
    fn slot_table_is_complete() {
        let set: BTreeSet<[usize; 2]> = GOLD_SLOT_PAIRS.iter().copied().collect();
        assert_eq!(set.len(), 15);
        assert!(set.iter().all(|[a, b]| a < b && *b < 6));
    }

    #[test]
    fn gold_bank_jsonl_round_trip() {
        let bank = GoldBank::reference(2, 2);
        let back = GoldBank::from_jsonl(bank.to_jsonl().as_bytes()).unwrap();
        assert_eq!(bank, back);
        assert!(GoldBank::from_jsonl("{\"gold_id\":\"x\",\"left_images\":[],\"right_images\":[\"a\"],\"answer\":\"same\"}".as_bytes()).is_err());
    }
}
