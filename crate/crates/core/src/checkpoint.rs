//! Durable state: atomic snapshot writes and the append-only vote log.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::graph::{Answer, Pair, Vote};

/// Writes `bytes` to a sibling temp file, syncs it, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

/// One line of the vote log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteLogRecord {
    pub pair: Pair,
    pub worker: String,
    pub answer: Answer,
    pub round: u32,
    pub timestamp: u64,
    pub task: u64,
}

impl From<&Vote> for VoteLogRecord {
    fn from(v: &Vote) -> Self {
        Self {
            pair: v.pair,
            worker: v.worker_id.clone(),
            answer: v.answer,
            round: v.round,
            timestamp: v.timestamp,
            task: v.task_id,
        }
    }
}

pub fn vote_log_line(v: &Vote) -> String {
    let mut s = serde_json::to_string(&VoteLogRecord::from(v)).expect("vote serializes");
    s.push('\n');
    s
}

pub fn vote_log_text<'a>(votes: impl IntoIterator<Item = &'a Vote>) -> String {
    votes.into_iter().map(vote_log_line).collect()
}

/// Append-only JSON-lines vote log.
pub struct VoteLog {
    file: File,
    lines: u64,
}

impl VoteLog {
    pub fn create(path: &Path) -> io::Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let file = File::create(path)?;
        Ok(Self { file, lines: 0 })
    }

    /// Reopens an existing log, dropping anything past the first `offset`
    /// lines (votes written after the last checkpoint).
    pub fn resume(path: &Path, offset: u64) -> io::Result<Self> {
        let mut keep = 0u64;
        let mut lines = 0u64;
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            for line in reader.split(b'\n') {
                if lines == offset {
                    break;
                }
                keep += line?.len() as u64 + 1;
                lines += 1;
            }
        }
        if lines < offset {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("vote log has {lines} line(s), checkpoint expects {offset}"),
            ));
        }
        let file = OpenOptions::new().create(true).write(true).truncate(false).open(path)?;
        file.set_len(keep)?;
        let mut file = OpenOptions::new().append(true).open(path)?;
        file.flush()?;
        Ok(Self { file, lines })
    }

    pub fn append(&mut self, votes: &[Vote]) -> io::Result<()> {
        if votes.is_empty() {
            return Ok(());
        }
        self.file.write_all(vote_log_text(votes).as_bytes())?;
        self.file.flush()?;
        self.lines += votes.len() as u64;
        Ok(())
    }

    pub fn lines(&self) -> u64 {
        self.lines
    }
}
