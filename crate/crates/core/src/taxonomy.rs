//! Taxonomy forest of trim nodes.
//!
//! Each make is the root of its own tree; leaves are trims identified by the
//! 5-tuple (make, model, body, year, trim). The forest keeps two indexes that
//! drive the pair schedule: trims sharing (make, model, body, year) and years
//! sharing (make, model, body, trim).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("duplicate trim {0}")]
    DuplicateTrim(String),
    #[error("record {line}: missing field `{field}`")]
    MissingField { line: usize, field: &'static str },
    #[error("record {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Dense node identifier; indexes [`TaxonomyForest::nodes`].
#[derive(
    Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrimNode {
    pub id: NodeId,
    pub make: String,
    pub model: String,
    pub body: String,
    pub year: i32,
    pub trim: String,
    pub exemplar_images: Vec<String>,
}

impl TrimNode {
    pub fn year_key(&self) -> YearKey {
        YearKey {
            make: self.make.clone(),
            model: self.model.clone(),
            body: self.body.clone(),
            year: self.year,
        }
    }

    pub fn trim_key(&self) -> TrimKey {
        TrimKey {
            make: self.make.clone(),
            model: self.model.clone(),
            body: self.body.clone(),
            trim: self.trim.clone(),
        }
    }

    pub fn display_name(&self) -> String {
        format!(
            "{} {} {} {} {}",
            self.year, self.make, self.model, self.body, self.trim
        )
    }
}

/// (make, model, body, year): the within-year sibling bucket.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct YearKey {
    pub make: String,
    pub model: String,
    pub body: String,
    pub year: i32,
}

/// (make, model, body, trim): the cross-year bucket.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TrimKey {
    pub make: String,
    pub model: String,
    pub body: String,
    pub trim: String,
}

/// One input row, before validation.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawTrimRecord {
    #[serde(default)]
    pub make: String,
    #[serde(default)]
    pub model: String,
    #[serde(default)]
    pub body: String,
    #[serde(default)]
    pub year: Option<i32>,
    #[serde(default)]
    pub trim: String,
    #[serde(default)]
    pub images: Vec<String>,
}

impl RawTrimRecord {
    pub fn new(make: &str, model: &str, body: &str, year: i32, trim: &str) -> Self {
        Self {
            make: make.to_string(),
            model: model.to_string(),
            body: body.to_string(),
            year: Some(year),
            trim: trim.to_string(),
            images: Vec::new(),
        }
    }

    pub fn with_images<I, S>(mut self, images: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.images = images.into_iter().map(Into::into).collect();
        self
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TaxonomyForest {
    nodes: Vec<TrimNode>,
    by_year: BTreeMap<YearKey, Vec<NodeId>>,
    by_trim: BTreeMap<TrimKey, Vec<NodeId>>,
}

impl TaxonomyForest {
    /// Validates and indexes `records`. Node ids follow input order.
    pub fn load(records: Vec<RawTrimRecord>) -> Result<Self, TaxonomyError> {
        let mut seen = BTreeSet::new();
        let mut nodes = Vec::with_capacity(records.len());
        for (i, rec) in records.into_iter().enumerate() {
            let line = i + 1;
            let year = rec.year.ok_or(TaxonomyError::MissingField { line, field: "year" })?;
            for (field, value) in [
                ("make", &rec.make),
                ("model", &rec.model),
                ("body", &rec.body),
                ("trim", &rec.trim),
            ] {
                if value.trim().is_empty() {
                    return Err(TaxonomyError::MissingField { line, field });
                }
            }
            let key = (
                rec.make.clone(),
                rec.model.clone(),
                rec.body.clone(),
                year,
                rec.trim.clone(),
            );
            if !seen.insert(key) {
                return Err(TaxonomyError::DuplicateTrim(format!(
                    "{year} {} {} {} {}",
                    rec.make, rec.model, rec.body, rec.trim
                )));
            }
            let id = u32::try_from(nodes.len()).map_err(|_| TaxonomyError::Malformed {
                line,
                message: "too many nodes".into(),
            })?;
            nodes.push(TrimNode {
                id: NodeId(id),
                make: rec.make,
                model: rec.model,
                body: rec.body,
                year,
                trim: rec.trim,
                exemplar_images: rec.images,
            });
        }
        let mut forest = Self {
            nodes,
            ..Self::default()
        };
        forest.rebuild_index();
        Ok(forest)
    }

    /// Recomputes both indexes from the node list.
    pub fn rebuild_index(&mut self) {
        self.by_year.clear();
        self.by_trim.clear();
        for node in &self.nodes {
            self.by_year.entry(node.year_key()).or_default().push(node.id);
            self.by_trim.entry(node.trim_key()).or_default().push(node.id);
        }
        let nodes = &self.nodes;
        for ids in self.by_year.values_mut() {
            ids.sort_by(|a, b| nodes[a.index()].trim.cmp(&nodes[b.index()].trim).then(a.cmp(b)));
        }
        for ids in self.by_trim.values_mut() {
            ids.sort_by_key(|id| nodes[id.index()].year);
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[TrimNode] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> Option<&TrimNode> {
        self.nodes.get(id.index())
    }

    pub fn ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.iter().map(|n| n.id)
    }

    /// Trims sharing (make, model, body, year), sorted by trim name.
    pub fn year_index(&self) -> &BTreeMap<YearKey, Vec<NodeId>> {
        &self.by_year
    }

    /// Nodes sharing (make, model, body, trim), sorted by year.
    pub fn trim_index(&self) -> &BTreeMap<TrimKey, Vec<NodeId>> {
        &self.by_trim
    }

    pub fn makes(&self) -> BTreeSet<&str> {
        self.nodes.iter().map(|n| n.make.as_str()).collect()
    }

    /// Stable digest of the node list; used to tie a checkpoint to its inputs.
    pub fn fingerprint(&self) -> u64 {
        let mut h = crate::rng::hash_str("");
        for n in &self.nodes {
            let line = format!(
                "{}|{}|{}|{}|{}|{}|{}",
                n.id,
                n.make,
                n.model,
                n.body,
                n.year,
                n.trim,
                n.exemplar_images.join(";")
            );
            h = crate::rng::mix(h, &[crate::rng::hash_str(&line)]);
        }
        h
    }

    /// Reads CSV (header required) or JSON-lines, chosen by extension.
    pub fn from_path(path: &Path) -> Result<Self, TaxonomyError> {
        let file = std::fs::File::open(path)?;
        let is_csv = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
        let records = if is_csv {
            read_csv(file)?
        } else {
            read_jsonl(file)?
        };
        Self::load(records)
    }
}

#[derive(Deserialize)]
struct CsvRow {
    make: Option<String>,
    model: Option<String>,
    body: Option<String>,
    year: Option<String>,
    trim: Option<String>,
    images: Option<String>,
}

/// Parses taxonomy CSV with columns make,model,body,year,trim,images.
/// `images` holds semicolon-separated references.
pub fn read_csv<R: Read>(reader: R) -> Result<Vec<RawTrimRecord>, TaxonomyError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<CsvRow>().enumerate() {
        let line = i + 1;
        let row = row.map_err(|e| TaxonomyError::Malformed {
            line,
            message: e.to_string(),
        })?;
        let year = match row.year.as_deref().map(str::trim) {
            None | Some("") => None,
            Some(y) => Some(y.parse::<i32>().map_err(|_| TaxonomyError::Malformed {
                line,
                message: format!("year `{y}` is not an integer"),
            })?),
        };
        out.push(RawTrimRecord {
            make: row.make.unwrap_or_default(),
            model: row.model.unwrap_or_default(),
            body: row.body.unwrap_or_default(),
            year,
            trim: row.trim.unwrap_or_default(),
            images: row
                .images
                .unwrap_or_default()
                .split(';')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(String::from)
                .collect(),
        });
    }
    Ok(out)
}

pub fn read_jsonl<R: Read>(reader: R) -> Result<Vec<RawTrimRecord>, TaxonomyError> {
    let mut text = String::new();
    let mut reader = reader;
    reader.read_to_string(&mut text)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawTrimRecord =
            serde_json::from_str(line).map_err(|e| TaxonomyError::Malformed {
                line: i + 1,
                message: e.to_string(),
            })?;
        out.push(rec);
    }
    Ok(out)
}

/// Writes records as JSON-lines in the input schema.
pub fn write_jsonl(forest: &TaxonomyForest) -> String {
    let mut out = String::new();
    for n in forest.nodes() {
        let rec = RawTrimRecord {
            make: n.make.clone(),
            model: n.model.clone(),
            body: n.body.clone(),
            year: Some(n.year),
            trim: n.trim.clone(),
            images: n.exemplar_images.clone(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        out.push('\n');
    }
    out
}
