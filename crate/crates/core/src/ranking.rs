//! Ranked candidate lists: the common output of every attribution method.

use std::cmp::Ordering;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One scored candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub doc_id: String,
    pub score: f64,
}

/// Per-query ordering of candidate documents, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub query_id: String,
    pub method: String,
    pub entries: Vec<Scored>,
}

/// Descending score, ties broken by ascending doc_id.
pub fn rank_order(a: &Scored, b: &Scored) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.doc_id.cmp(&b.doc_id))
}

impl RankedList {
    /// Sorts the scored candidates into rank order.
    pub fn from_scores(query_id: impl Into<String>, method: impl Into<String>, mut entries: Vec<Scored>) -> Self {
        entries.sort_by(rank_order);
        Self {
            query_id: query_id.into(),
            method: method.into(),
            entries,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn top(&self, k: usize) -> &[Scored] {
        &self.entries[..k.min(self.entries.len())]
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|s| s.doc_id.as_str())
    }

    pub fn truncated(&self, k: usize) -> Self {
        Self {
            query_id: self.query_id.clone(),
            method: self.method.clone(),
            entries: self.top(k).to_vec(),
        }
    }

    /// Relabels the list with a different method name.
    pub fn with_method(mut self, method: impl Into<String>) -> Self {
        self.method = method.into();
        self
    }
}

#[derive(Serialize, Deserialize)]
struct RankingRecord {
    query_id: String,
    method: String,
    ranking: Vec<(String, f64)>,
    k: usize,
}

/// Writes one JSON line per list, keeping the first `depth` entries.
pub fn write_rankings<'a, W: Write>(
    mut out: W,
    lists: impl IntoIterator<Item = &'a RankedList>,
    depth: usize,
) -> Result<()> {
    for list in lists {
        let top = list.top(depth);
        let record = RankingRecord {
            query_id: list.query_id.clone(),
            method: list.method.clone(),
            ranking: top.iter().map(|s| (s.doc_id.clone(), s.score)).collect(),
            k: top.len(),
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_rankings<R: BufRead>(input: R, file: &str) -> Result<Vec<RankedList>> {
    let mut lists = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RankingRecord = serde_json::from_str(&line).map_err(|e| Error::malformed(file, i + 1, e))?;
        if record.k != record.ranking.len() {
            return Err(Error::malformed(file, i + 1, "k does not match ranking length"));
        }
        lists.push(RankedList {
            query_id: record.query_id,
            method: record.method,
            entries: record
                .ranking
                .into_iter()
                .map(|(doc_id, score)| Scored { doc_id, score })
                .collect(),
        });
    }
    Ok(lists)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(id: &str, score: f64) -> Scored {
        Scored {
            doc_id: id.into(),
            score,
        }
    }

    #[test]
    fn ties_fall_back_to_doc_id() {
        let list = RankedList::from_scores("q", "m", vec![s("b", 1.0), s("a", 1.0), s("c", 2.0)]);
        assert_eq!(list.ids().collect::<Vec<_>>(), ["c", "a", "b"]);
    }

    #[test]
    fn jsonl_round_trip_truncates_to_depth() {
        let list = RankedList::from_scores("q1", "dense", vec![s("a", 0.5), s("b", 0.25), s("c", 0.0)]);
        let mut buf = Vec::new();
        write_rankings(&mut buf, [&list], 2).unwrap();
        let back = read_rankings(buf.as_slice(), "rankings.jsonl").unwrap();
        assert_eq!(back, vec![list.truncated(2)]);
    }
}
