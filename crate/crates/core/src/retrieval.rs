//! Exhaustive dense cosine retrieval over feature vectors.
//!
//! Sentence-embedding baselines (answer-only and QA query modes) and the
//! finetuned-embedding baseline are all instances of the same ranker over
//! different [`FeatureBundle`] sources.

use crate::corpus::{Corpus, QueryRecord};
use crate::error::{Error, Result};
use crate::features::{l2_norm, mode_key, FeatureBundle};
use crate::lexical::QueryMode;
use crate::ranking::{rank_order, RankedList, Scored};

/// Row-major document matrix in ascending doc_id order.
#[derive(Debug, Clone)]
pub struct VectorIndex {
    dim: usize,
    ids: Vec<String>,
    rows: Vec<f32>,
    norms: Vec<f64>,
    normalized: bool,
}

impl VectorIndex {
    pub fn from_rows<'a>(
        dim: usize,
        rows: impl IntoIterator<Item = (&'a str, &'a [f32])>,
        normalize: bool,
    ) -> Result<Self> {
        let mut items: Vec<(&str, &[f32])> = rows.into_iter().collect();
        items.sort_unstable_by(|a, b| a.0.cmp(b.0));
        let mut ids = Vec::with_capacity(items.len());
        let mut data = Vec::with_capacity(items.len() * dim);
        let mut norms = Vec::with_capacity(items.len());
        for (id, v) in items {
            if v.len() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    found: v.len(),
                });
            }
            let n = l2_norm(v);
            if normalize {
                if n == 0.0 {
                    return Err(Error::ZeroVector(id.to_string()));
                }
                data.extend(v.iter().map(|&x| (x as f64 / n) as f32));
                norms.push(1.0);
            } else {
                data.extend_from_slice(v);
                norms.push(n);
            }
            ids.push(id.to_string());
        }
        Ok(Self {
            dim,
            ids,
            rows: data,
            norms,
            normalized: normalize,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    /// Cosine of `query` against every row, in row order. Zero vectors
    /// score 0.
    pub fn cosines(&self, query: &[f32]) -> Result<Vec<f64>> {
        if query.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                found: query.len(),
            });
        }
        let qn = l2_norm(query);
        Ok((0..self.len())
            .map(|i| {
                let denom = qn * self.norms[i];
                if denom == 0.0 {
                    return 0.0;
                }
                let dot: f64 = self.row(i).iter().zip(query).map(|(&a, &b)| a as f64 * b as f64).sum();
                dot / denom
            })
            .collect())
    }

    pub fn rank_all(&self, query_id: &str, method: &str, query: &[f32]) -> Result<RankedList> {
        let entries = self
            .ids
            .iter()
            .zip(self.cosines(query)?)
            .map(|(id, score)| Scored {
                doc_id: id.clone(),
                score,
            })
            .collect();
        Ok(RankedList::from_scores(query_id, method, entries))
    }
}

/// Index over every entry of a single-vector bundle.
pub fn build_index(bundle: &FeatureBundle, normalize: bool) -> Result<VectorIndex> {
    if bundle.kind().is_multi_vector() {
        return Err(Error::InvalidConfig(format!(
            "cannot index multi-vector bundle {}",
            bundle.source_label
        )));
    }
    VectorIndex::from_rows(
        bundle.dim(),
        bundle.iter().map(|(id, v)| (id, v[0].as_slice())),
        normalize,
    )
}

/// Index over the given documents only (bundles usually also hold
/// query-side entries).
pub fn build_doc_index<'a>(
    bundle: &FeatureBundle,
    doc_ids: impl IntoIterator<Item = &'a str>,
    normalize: bool,
) -> Result<VectorIndex> {
    if bundle.kind().is_multi_vector() {
        return Err(Error::InvalidConfig(format!(
            "cannot index multi-vector bundle {}",
            bundle.source_label
        )));
    }
    let mut rows = Vec::new();
    let mut missing = Vec::new();
    for id in doc_ids {
        match bundle.vector(id) {
            Some(v) => rows.push((id, v)),
            None => missing.push(id.to_string()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingItem(missing));
    }
    VectorIndex::from_rows(bundle.dim(), rows, normalize)
}

/// Top-`k` rows by descending cosine, ties by ascending doc_id.
pub fn cosine_rank(query: &[f32], index: &VectorIndex, k: usize) -> Result<RankedList> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    let mut entries: Vec<Scored> = index
        .ids
        .iter()
        .zip(index.cosines(query)?)
        .map(|(id, score)| Scored {
            doc_id: id.clone(),
            score,
        })
        .collect();
    if k < entries.len() {
        entries.select_nth_unstable_by(k - 1, rank_order);
        entries.truncate(k);
    }
    Ok(RankedList::from_scores("", "cosine", entries))
}

/// The query's embedding for a retrieval mode.
pub fn query_vector<'a>(query: &QueryRecord, bundle: &'a FeatureBundle, mode: QueryMode) -> Result<&'a [f32]> {
    let key = mode_key(&query.query_id, mode);
    bundle.vector(&key).ok_or(Error::MissingItem(vec![key]))
}

/// Dense baseline: rank all documents for one query.
pub fn dense_rank(
    index: &VectorIndex,
    bundle: &FeatureBundle,
    query: &QueryRecord,
    mode: QueryMode,
    method: &str,
) -> Result<RankedList> {
    index.rank_all(&query.query_id, method, query_vector(query, bundle, mode)?)
}

/// Method label for a dense baseline, e.g. `dense-synth-text-a-qa`.
pub fn dense_label(bundle: &FeatureBundle, mode: QueryMode) -> String {
    format!("dense-{}-{}", bundle.source_label, mode.label())
}

pub fn corpus_doc_index(bundle: &FeatureBundle, corpus: &Corpus, normalize: bool) -> Result<VectorIndex> {
    build_doc_index(bundle, corpus.sorted_doc_ids(), normalize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureKind;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bundle(rows: &[(&str, Vec<f32>)]) -> FeatureBundle {
        let dim = rows[0].1.len();
        FeatureBundle::from_single(
            FeatureKind::TextEmbedding,
            dim,
            rows.iter().map(|(id, v)| (id.to_string(), v.clone())),
            "t",
        )
        .unwrap()
    }

    #[test]
    fn unit_rows_are_kept() {
        let b = bundle(&[("a", vec![1.0, 0.0]), ("b", vec![0.0, 1.0]), ("c", vec![0.6, 0.8])]);
        let idx = build_index(&b, true).unwrap();
        assert_eq!(idx.len(), 3);
        assert_eq!(idx.row(2), &[0.6, 0.8]);
    }

    #[test]
    fn long_rows_are_rescaled() {
        let b = bundle(&[("a", vec![2.0, 0.0])]);
        assert_eq!(build_index(&b, true).unwrap().row(0), &[1.0, 0.0]);
    }

    #[test]
    fn zero_row_is_rejected() {
        let b = bundle(&[("a", vec![1.0, 0.0]), ("z", vec![0.0, 0.0])]);
        assert!(matches!(build_index(&b, true), Err(Error::ZeroVector(id)) if id == "z"));
        assert!(build_index(&b, false).is_ok());
    }

    #[test]
    fn exact_match_ranks_first_with_unit_score() {
        let b = bundle(&[("a", vec![1.0, 2.0, 3.0]), ("b", vec![3.0, 2.0, 1.0])]);
        let idx = build_index(&b, true).unwrap();
        let list = cosine_rank(&[3.0, 2.0, 1.0], &idx, 2).unwrap();
        assert_eq!(list.entries[0].doc_id, "b");
        assert!((list.entries[0].score - 1.0).abs() < 1e-6);
    }

    #[test]
    fn orthogonal_query_keeps_doc_id_order() {
        let b = bundle(&[
            ("c", vec![1.0, 0.0, 0.0]),
            ("a", vec![0.0, 1.0, 0.0]),
            ("b", vec![1.0, 1.0, 0.0]),
        ]);
        let idx = build_index(&b, true).unwrap();
        let list = cosine_rank(&[0.0, 0.0, 1.0], &idx, 3).unwrap();
        assert_eq!(list.ids().collect::<Vec<_>>(), ["a", "b", "c"]);
        assert!(list.entries.iter().all(|s| s.score == 0.0));
    }

    #[test]
    fn dimension_mismatch() {
        let b = bundle(&[("a", vec![1.0, 0.0])]);
        let idx = build_index(&b, true).unwrap();
        assert!(matches!(cosine_rank(&[1.0], &idx, 1), Err(Error::DimMismatch { .. })));
    }

    fn sort_oracle(rows: &[(String, Vec<f32>)], q: &[f32], k: usize) -> Vec<String> {
        let cos = |v: &[f32]| {
            let dot: f64 = v.iter().zip(q).map(|(a, b)| *a as f64 * *b as f64).sum();
            let nv: f64 = v.iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt();
            let nq: f64 = q.iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt();
            dot / (nv * nq)
        };
        let mut scored: Vec<(f64, &String)> = rows.iter().map(|(id, v)| (cos(v), id)).collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(b.1)));
        scored.into_iter().take(k).map(|(_, id)| id.clone()).collect()
    }

    #[test]
    fn matches_exhaustive_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..50 {
            let n = if trial == 0 { 5 } else { rng.random_range(5..300) };
            let rows: Vec<(String, Vec<f32>)> = (0..n)
                .map(|i| {
                    (
                        format!("d{i:03}"),
                        (0..8).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    )
                })
                .collect();
            let q: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let k = if trial == 0 { 5 } else { rng.random_range(1..=n) };
            let idx = VectorIndex::from_rows(8, rows.iter().map(|(a, b)| (a.as_str(), b.as_slice())), true).unwrap();
            let got: Vec<String> = cosine_rank(&q, &idx, k).unwrap().ids().map(str::to_string).collect();
            assert_eq!(got, sort_oracle(&rows, &q, k));
        }
    }

    #[test]
    fn query_vector_picks_mode_entry() {
        let q = QueryRecord {
            query_id: "q1".into(),
            probe_id: "p".into(),
            condition: crate::corpus::Condition::Clean,
            transformed_question: String::new(),
            response: String::new(),
            target_model: "m".into(),
        };
        let b = bundle(&[("q1#answer", vec![1.0, 0.0]), ("d", vec![0.0, 1.0])]);
        assert_eq!(query_vector(&q, &b, QueryMode::AnswerOnly).unwrap(), &[1.0, 0.0]);
        assert!(matches!(
            query_vector(&q, &b, QueryMode::QA),
            Err(Error::MissingItem(ids)) if ids == ["q1#qa"]
        ));
    }

    proptest! {
        #[test]
        fn ranking_ignores_positive_query_scale(
            seed in 0u64..1000,
            scale in 0.01f32..100.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<(String, Vec<f32>)> = (0..40)
                .map(|i| (format!("d{i:02}"), (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()))
                .collect();
            let idx = VectorIndex::from_rows(6, rows.iter().map(|(a, b)| (a.as_str(), b.as_slice())), true).unwrap();
            let q: Vec<f32> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let qs: Vec<f32> = q.iter().map(|x| x * scale).collect();
            let a: Vec<String> = cosine_rank(&q, &idx, 40).unwrap().ids().map(str::to_string).collect();
            let b: Vec<String> = cosine_rank(&qs, &idx, 40).unwrap().ids().map(str::to_string).collect();
            prop_assert_eq!(a, b);
        }
    }
}
