//! Benchmark data model: documents and their variant families, QA probes,
//! query-condition records, positive sets and the attribution split.
//!
//! A corpus lives on disk as a directory of line-delimited JSON files
//! (`documents.jsonl`, `probes.jsonl`, `queries.jsonl`). Loading
//! cross-references every record and materializes one [`PositiveSet`] per
//! query, so evaluation never has to walk variant families again.

mod split;
pub mod synth;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use split::{carve_validation, split_corpus, Ratio, SplitManifest};
pub use synth::{synth_corpus, SynthSpec};

pub const DOCUMENTS_FILE: &str = "documents.jsonl";
pub const PROBES_FILE: &str = "probes.jsonl";
pub const QUERIES_FILE: &str = "queries.jsonl";
pub const SPLIT_FILE: &str = "split.json";

/// Probes per original on full-size benchmarks.
pub const EXPECTED_PROBES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VariantKind {
    Original,
    Paraphrase,
    Retro,
    Anti,
}

impl VariantKind {
    /// Source-preserving kinds count as valid attribution targets.
    pub fn is_positive(self) -> bool {
        !matches!(self, VariantKind::Anti)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Condition {
    Clean,
    Obfuscate,
    RolePlay,
    NoiseInjection,
    Indirect,
}

impl Condition {
    pub const ALL: [Condition; 5] = [
        Condition::Clean,
        Condition::Obfuscate,
        Condition::RolePlay,
        Condition::NoiseInjection,
        Condition::Indirect,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Clean => "Clean",
            Condition::Obfuscate => "Obfuscate",
            Condition::RolePlay => "RolePlay",
            Condition::NoiseInjection => "NoiseInjection",
            Condition::Indirect => "Indirect",
        }
    }

    pub fn is_transformed(self) -> bool {
        self != Condition::Clean
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Condition::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown query condition {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub title: String,
    pub body: String,
    pub variant_kind: VariantKind,
    /// Original article of the family; equals `doc_id` for originals.
    pub parent_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QAProbe {
    pub probe_id: String,
    pub parent_id: String,
    pub probe_index: u32,
    pub question: String,
    pub reference_answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub probe_id: String,
    pub condition: Condition,
    pub transformed_question: String,
    pub response: String,
    pub target_model: String,
}

/// Valid sources for one query: the parent original plus its
/// paraphrase and retro variants.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositiveSet {
    pub query_id: String,
    pub valid_doc_ids: BTreeSet<String>,
}

impl PositiveSet {
    pub fn contains(&self, doc_id: &str) -> bool {
        self.valid_doc_ids.contains(doc_id)
    }
}

/// A fully cross-referenced, immutable corpus.
#[derive(Debug, Clone)]
pub struct Corpus {
    documents: Vec<Document>,
    probes: Vec<QAProbe>,
    queries: Vec<QueryRecord>,
    doc_index: HashMap<String, usize>,
    probe_index: HashMap<String, usize>,
    query_index: HashMap<String, usize>,
    family: BTreeMap<String, Vec<usize>>,
    positives: HashMap<String, PositiveSet>,
    warnings: Vec<String>,
}

impl Corpus {
    /// Validates the records and materializes positive sets.
    pub fn new(documents: Vec<Document>, probes: Vec<QAProbe>, queries: Vec<QueryRecord>) -> Result<Self> {
        let mut doc_index = HashMap::with_capacity(documents.len());
        for (i, doc) in documents.iter().enumerate() {
            if doc_index.insert(doc.doc_id.clone(), i).is_some() {
                return Err(Error::DuplicateId(doc.doc_id.clone()));
            }
        }

        let mut family: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for doc in &documents {
            if doc.variant_kind == VariantKind::Original {
                if doc.parent_id != doc.doc_id {
                    return Err(Error::MissingParent {
                        doc_id: doc.doc_id.clone(),
                        parent_id: doc.parent_id.clone(),
                    });
                }
                family.insert(doc.doc_id.clone(), Vec::new());
            }
        }
        for (i, doc) in documents.iter().enumerate() {
            match family.get_mut(&doc.parent_id) {
                Some(members) => members.push(i),
                None => {
                    return Err(Error::MissingParent {
                        doc_id: doc.doc_id.clone(),
                        parent_id: doc.parent_id.clone(),
                    })
                }
            }
        }

        let mut probe_index = HashMap::with_capacity(probes.len());
        let mut probes_per_parent: HashMap<&str, usize> = HashMap::new();
        for (i, probe) in probes.iter().enumerate() {
            if probe_index.insert(probe.probe_id.clone(), i).is_some() {
                return Err(Error::DuplicateId(probe.probe_id.clone()));
            }
            if !family.contains_key(&probe.parent_id) {
                return Err(Error::MissingParent {
                    doc_id: probe.probe_id.clone(),
                    parent_id: probe.parent_id.clone(),
                });
            }
            if probe.reference_answer.trim().is_empty() {
                return Err(Error::malformed(
                    PROBES_FILE,
                    i + 1,
                    format!("probe {} has an empty reference answer", probe.probe_id),
                ));
            }
            *probes_per_parent.entry(probe.parent_id.as_str()).or_default() += 1;
        }

        let mut warnings = Vec::new();
        for parent in family.keys() {
            let n = probes_per_parent.get(parent.as_str()).copied().unwrap_or(0);
            if n != EXPECTED_PROBES {
                warnings.push(format!("original {parent} has {n} probes (expected {EXPECTED_PROBES})"));
            }
        }

        let mut query_index = HashMap::with_capacity(queries.len());
        let mut triples = HashSet::with_capacity(queries.len());
        for (i, query) in queries.iter().enumerate() {
            if query_index.insert(query.query_id.clone(), i).is_some() {
                return Err(Error::DuplicateId(query.query_id.clone()));
            }
            let Some(&p) = probe_index.get(&query.probe_id) else {
                return Err(Error::malformed(
                    QUERIES_FILE,
                    i + 1,
                    format!("unknown probe {}", query.probe_id),
                ));
            };
            if query.condition == Condition::Clean && query.transformed_question != probes[p].question {
                return Err(Error::malformed(
                    QUERIES_FILE,
                    i + 1,
                    "Clean query must repeat the original question",
                ));
            }
            if !triples.insert((&query.probe_id, query.condition, &query.target_model)) {
                return Err(Error::DuplicateId(format!(
                    "({}, {}, {})",
                    query.probe_id, query.condition, query.target_model
                )));
            }
        }

        let parent_positives: HashMap<&str, BTreeSet<String>> = family
            .iter()
            .map(|(parent, members)| {
                let set = members
                    .iter()
                    .map(|&i| &documents[i])
                    .filter(|d| d.variant_kind.is_positive())
                    .map(|d| d.doc_id.clone())
                    .collect();
                (parent.as_str(), set)
            })
            .collect();
        let positives = queries
            .iter()
            .map(|q| {
                let parent = probes[probe_index[&q.probe_id]].parent_id.as_str();
                let set = PositiveSet {
                    query_id: q.query_id.clone(),
                    valid_doc_ids: parent_positives[parent].clone(),
                };
                (q.query_id.clone(), set)
            })
            .collect();

        Ok(Self {
            documents,
            probes,
            queries,
            doc_index,
            probe_index,
            query_index,
            family,
            positives,
            warnings,
        })
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn probes(&self) -> &[QAProbe] {
        &self.probes
    }

    pub fn queries(&self) -> &[QueryRecord] {
        &self.queries
    }

    /// Ingestion notes, e.g. originals with fewer than five probes.
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn document(&self, doc_id: &str) -> Option<&Document> {
        self.doc_index.get(doc_id).map(|&i| &self.documents[i])
    }

    pub fn probe(&self, probe_id: &str) -> Option<&QAProbe> {
        self.probe_index.get(probe_id).map(|&i| &self.probes[i])
    }

    pub fn query(&self, query_id: &str) -> Option<&QueryRecord> {
        self.query_index.get(query_id).map(|&i| &self.queries[i])
    }

    /// Original doc_ids in ascending order.
    pub fn parent_ids(&self) -> impl Iterator<Item = &str> {
        self.family.keys().map(String::as_str)
    }

    pub fn n_parents(&self) -> usize {
        self.family.len()
    }

    /// Every document of a family, the original included.
    pub fn family(&self, parent_id: &str) -> impl Iterator<Item = &Document> {
        self.family
            .get(parent_id)
            .into_iter()
            .flatten()
            .map(|&i| &self.documents[i])
    }

    pub fn anti_documents(&self, parent_id: &str) -> impl Iterator<Item = &Document> {
        self.family(parent_id).filter(|d| d.variant_kind == VariantKind::Anti)
    }

    /// Parent original of the probe behind a query.
    pub fn query_parent(&self, query_id: &str) -> Option<&str> {
        let query = self.query(query_id)?;
        self.probe(&query.probe_id).map(|p| p.parent_id.as_str())
    }

    pub fn positives(&self, query_id: &str) -> Option<&PositiveSet> {
        self.positives.get(query_id)
    }

    /// Valid sources for a probe, independent of any query.
    pub fn probe_positives(&self, probe_id: &str) -> BTreeSet<String> {
        self.probe(probe_id)
            .map(|p| {
                self.family(&p.parent_id)
                    .filter(|d| d.variant_kind.is_positive())
                    .map(|d| d.doc_id.clone())
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Sorted doc_ids, the canonical candidate order.
    pub fn sorted_doc_ids(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = self.documents.iter().map(|d| d.doc_id.as_str()).collect();
        ids.sort_unstable();
        ids
    }

    pub fn target_models(&self) -> BTreeSet<&str> {
        self.queries.iter().map(|q| q.target_model.as_str()).collect()
    }
}

fn read_jsonl<T: DeserializeOwned>(path: &Path, file: &str) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::malformed(file, i + 1, e))?);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for record in records {
        serde_json::to_writer(&mut out, record)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Loads `documents.jsonl`, `probes.jsonl` and (when present)
/// `queries.jsonl` from a corpus directory.
pub fn load_corpus(dir: impl AsRef<Path>) -> Result<Corpus> {
    let dir = dir.as_ref();
    let documents = read_jsonl(&dir.join(DOCUMENTS_FILE), DOCUMENTS_FILE)?;
    let probes = read_jsonl(&dir.join(PROBES_FILE), PROBES_FILE)?;
    let queries_path = dir.join(QUERIES_FILE);
    let queries = if queries_path.exists() {
        read_jsonl(&queries_path, QUERIES_FILE)?
    } else {
        Vec::new()
    };
    let corpus = Corpus::new(documents, probes, queries)?;
    for w in corpus.warnings() {
        log::warn!("{w}");
    }
    Ok(corpus)
}

pub fn save_corpus(corpus: &Corpus, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    write_jsonl(&dir.join(DOCUMENTS_FILE), corpus.documents())?;
    write_jsonl(&dir.join(PROBES_FILE), corpus.probes())?;
    write_jsonl(&dir.join(QUERIES_FILE), corpus.queries())?;
    Ok(())
}
