//! Pre-extracted feature vectors: the engine's only view of any language
//! model or text embedder.
//!
//! A [`FeatureBundle`] maps item ids (doc ids, query ids, or query ids
//! suffixed with a retrieval mode) to one or more `f32` vectors of a shared
//! dimension. Bundles are immutable once loaded.

pub mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::lexical::{read_u16, read_u32, QueryMode};

pub use synth::{synth_features, SynthBundles, SynthFeatureSpec};

const MAGIC: [u8; 4] = *b"PVFB";
const VERSION: u16 = 1;

/// Tolerance on the unit-norm invariant of direction kinds.
pub const NORM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureKind {
    TextEmbedding,
    HiddenState,
    LMHeadRowSum,
    DocDirection,
    ChunkDirections,
}

impl FeatureKind {
    pub fn code(self) -> u8 {
        match self {
            FeatureKind::TextEmbedding => 0,
            FeatureKind::HiddenState => 1,
            FeatureKind::LMHeadRowSum => 2,
            FeatureKind::DocDirection => 3,
            FeatureKind::ChunkDirections => 4,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => FeatureKind::TextEmbedding,
            1 => FeatureKind::HiddenState,
            2 => FeatureKind::LMHeadRowSum,
            3 => FeatureKind::DocDirection,
            4 => FeatureKind::ChunkDirections,
            other => return Err(Error::UnknownKind(other)),
        })
    }

    pub fn requires_unit_norm(self) -> bool {
        matches!(self, FeatureKind::DocDirection | FeatureKind::ChunkDirections)
    }

    pub fn is_multi_vector(self) -> bool {
        self == FeatureKind::ChunkDirections
    }
}

/// Key of a query's embedding for a retrieval mode, e.g. `q17#qa`.
pub fn mode_key(query_id: &str, mode: QueryMode) -> String {
    format!("{query_id}#{}", mode.label())
}

pub fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
}

/// Returns `None` for the zero vector.
pub fn normalized(v: &[f32]) -> Option<Vec<f32>> {
    let n = l2_norm(v);
    (n > 0.0).then(|| v.iter().map(|&x| (x as f64 / n) as f32).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Metadata {
    source_label: String,
    layer_label: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    kind: FeatureKind,
    dim: usize,
    entries: BTreeMap<String, Vec<Vec<f32>>>,
    pub source_label: String,
    pub layer_label: Option<String>,
}

impl FeatureBundle {
    /// Validates dimension, vector counts and (for direction kinds) unit norm.
    pub fn new(
        kind: FeatureKind,
        dim: usize,
        entries: BTreeMap<String, Vec<Vec<f32>>>,
        source_label: impl Into<String>,
        layer_label: Option<String>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConfig("bundle dim must be positive".into()));
        }
        for (id, vectors) in &entries {
            if vectors.is_empty() || (!kind.is_multi_vector() && vectors.len() != 1) {
                return Err(Error::InvalidConfig(format!(
                    "{id} has {} vectors in a {kind:?} bundle",
                    vectors.len()
                )));
            }
            for v in vectors {
                if v.len() != dim {
                    return Err(Error::DimMismatch {
                        expected: dim,
                        found: v.len(),
                    });
                }
                if kind.requires_unit_norm() {
                    let norm = l2_norm(v);
                    if (norm - 1.0).abs() > NORM_TOLERANCE {
                        return Err(Error::NotNormalized {
                            item_id: id.clone(),
                            norm,
                        });
                    }
                }
            }
        }
        Ok(Self {
            kind,
            dim,
            entries,
            source_label: source_label.into(),
            layer_label,
        })
    }

    /// Convenience constructor for single-vector kinds.
    pub fn from_single(
        kind: FeatureKind,
        dim: usize,
        entries: impl IntoIterator<Item = (String, Vec<f32>)>,
        source_label: impl Into<String>,
    ) -> Result<Self> {
        let entries = entries.into_iter().map(|(k, v)| (k, vec![v])).collect();
        Self::new(kind, dim, entries, source_label, None)
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn vectors(&self, id: &str) -> Option<&[Vec<f32>]> {
        self.entries.get(id).map(Vec::as_slice)
    }

    /// First (for single-vector kinds, only) vector of an entry.
    pub fn vector(&self, id: &str) -> Option<&[f32]> {
        self.entries.get(id).map(|v| v[0].as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[Vec<f32>])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(&MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&[self.kind.code()])?;
        out.write_all(&(self.dim as u32).to_le_bytes())?;
        out.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (id, vectors) in &self.entries {
            let id_bytes = id.as_bytes();
            let len =
                u16::try_from(id_bytes.len()).map_err(|_| Error::InvalidConfig(format!("item id {id} too long")))?;
            out.write_all(&len.to_le_bytes())?;
            out.write_all(id_bytes)?;
            out.write_all(&(vectors.len() as u32).to_le_bytes())?;
            for v in vectors {
                for x in v {
                    out.write_all(&x.to_le_bytes())?;
                }
            }
        }
        let meta = serde_json::to_vec(&Metadata {
            source_label: self.source_label.clone(),
            layer_label: self.layer_label.clone(),
        })?;
        out.write_all(&(meta.len() as u32).to_le_bytes())?;
        out.write_all(&meta)?;
        Ok(())
    }

    pub fn read<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if magic != MAGIC {
            return Err(Error::BadMagic {
                expected: MAGIC,
                found: magic,
            });
        }
        let version = read_u16(&mut input)?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let mut code = [0u8; 1];
        input.read_exact(&mut code)?;
        let kind = FeatureKind::from_code(code[0])?;
        let dim = read_u32(&mut input)? as usize;
        let count = read_u32(&mut input)? as usize;
        let mut entries = BTreeMap::new();
        let mut buf = vec![0u8; dim * 4];
        for _ in 0..count {
            let mut id = vec![0u8; read_u16(&mut input)? as usize];
            input.read_exact(&mut id)?;
            let id = String::from_utf8(id).map_err(|e| Error::malformed("feature bundle", entries.len() + 1, e))?;
            let n_vec = read_u32(&mut input)? as usize;
            let mut vectors = Vec::with_capacity(n_vec);
            for _ in 0..n_vec {
                input.read_exact(&mut buf)?;
                vectors.push(
                    buf.chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect(),
                );
            }
            if entries.insert(id.clone(), vectors).is_some() {
                return Err(Error::DuplicateId(id));
            }
        }
        let mut meta = vec![0u8; read_u32(&mut input)? as usize];
        input.read_exact(&mut meta)?;
        let meta: Metadata = serde_json::from_slice(&meta)?;
        Self::new(kind, dim, entries, meta.source_label, meta.layer_label)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write(&mut out)?;
        out.flush()?;
        Ok(())
    }
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<FeatureBundle> {
    FeatureBundle::read(BufReader::new(File::open(path)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureMode {
    /// Target-model hidden states.
    LLM,
    /// QA-style text embeddings.
    QA,
    /// LLM vector followed by the QA vector.
    Concat,
}

/// Final scorer inputs: one vector per query and per document.
#[derive(Debug, Clone)]
pub struct FeatureTable {
    pub mode: FeatureMode,
    pub dim: usize,
    queries: BTreeMap<String, Vec<f32>>,
    docs: BTreeMap<String, Vec<f32>>,
}

impl FeatureTable {
    pub fn query(&self, query_id: &str) -> Option<&[f32]> {
        self.queries.get(query_id).map(Vec::as_slice)
    }

    pub fn doc(&self, doc_id: &str) -> Option<&[f32]> {
        self.docs.get(doc_id).map(Vec::as_slice)
    }

    pub fn docs(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.docs.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn n_docs(&self) -> usize {
        self.docs.len()
    }
}

/// Looks up response-side and document-side entries for one feature kind.
struct Side<'a> {
    bundle: &'a FeatureBundle,
    query_key: fn(&str) -> String,
}

fn side_vectors(
    corpus: &Corpus,
    side: &Side<'_>,
    missing: &mut BTreeSet<String>,
) -> (BTreeMap<String, Vec<f32>>, BTreeMap<String, Vec<f32>>) {
    let mut queries = BTreeMap::new();
    for q in corpus.queries() {
        let key = (side.query_key)(&q.query_id);
        match side.bundle.vector(&key) {
            Some(v) => {
                queries.insert(q.query_id.clone(), v.to_vec());
            }
            None => {
                missing.insert(key);
            }
        }
    }
    let mut docs = BTreeMap::new();
    for d in corpus.documents() {
        match side.bundle.vector(&d.doc_id) {
            Some(v) => {
                docs.insert(d.doc_id.clone(), v.to_vec());
            }
            None => {
                missing.insert(d.doc_id.clone());
            }
        }
    }
    (queries, docs)
}

/// Builds per-item scorer inputs for `mode`.
///
/// The LLM side reads queries under their plain id from a hidden-state
/// bundle; the QA side reads `query_id#qa` from a text-embedding bundle.
/// Documents are keyed by doc_id in both.
pub fn assemble_features(
    corpus: &Corpus,
    llm: Option<&FeatureBundle>,
    qa: Option<&FeatureBundle>,
    mode: FeatureMode,
) -> Result<FeatureTable> {
    fn need<'b>(b: Option<&'b FeatureBundle>, mode: FeatureMode, what: &str) -> Result<&'b FeatureBundle> {
        b.ok_or_else(|| Error::InvalidConfig(format!("{mode:?} mode needs a {what} bundle")))
    }
    let mut missing = BTreeSet::new();
    let llm_side = match mode {
        FeatureMode::LLM | FeatureMode::Concat => Some(Side {
            bundle: need(llm, mode, "hidden-state")?,
            query_key: |q| q.to_string(),
        }),
        FeatureMode::QA => None,
    };
    let qa_side = match mode {
        FeatureMode::QA | FeatureMode::Concat => Some(Side {
            bundle: need(qa, mode, "text-embedding")?,
            query_key: |q| mode_key(q, QueryMode::QA),
        }),
        FeatureMode::LLM => None,
    };
    let llm_parts = llm_side.as_ref().map(|s| side_vectors(corpus, s, &mut missing));
    let qa_parts = qa_side.as_ref().map(|s| side_vectors(corpus, s, &mut missing));
    if !missing.is_empty() {
        return Err(Error::MissingItem(missing.into_iter().collect()));
    }
    let (queries, docs, dim) = match (llm_parts, qa_parts) {
        (Some((q, d)), None) => (q, d, llm_side.unwrap().bundle.dim()),
        (None, Some((q, d))) => (q, d, qa_side.unwrap().bundle.dim()),
        (Some((lq, ld)), Some((qq, qd))) => {
            let join = |a: BTreeMap<String, Vec<f32>>, b: &BTreeMap<String, Vec<f32>>| {
                a.into_iter()
                    .map(|(k, mut v)| {
                        v.extend_from_slice(&b[&k]);
                        (k, v)
                    })
                    .collect()
            };
            let dim = llm_side.unwrap().bundle.dim() + qa_side.unwrap().bundle.dim();
            (join(lq, &qq), join(ld, &qd), dim)
        }
        (None, None) => unreachable!("every mode selects at least one side"),
    };
    Ok(FeatureTable {
        mode,
        dim,
        queries,
        docs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_corpus, SynthSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bytes(b: &FeatureBundle) -> Vec<u8> {
        let mut buf = Vec::new();
        b.write(&mut buf).unwrap();
        buf
    }

    #[test]
    fn single_unit_vector_loads() {
        let b = FeatureBundle::from_single(
            FeatureKind::DocDirection,
            4,
            [("d".to_string(), vec![0.5, 0.5, 0.5, 0.5])],
            "test",
        )
        .unwrap();
        let back = FeatureBundle::read(bytes(&b).as_slice()).unwrap();
        assert_eq!(back.dim(), 4);
        assert_eq!(back, b);
    }

    #[test]
    fn unnormalized_direction_is_rejected_on_load() {
        // Write through a permissive kind, then flip the kind byte.
        let b = FeatureBundle::from_single(FeatureKind::HiddenState, 2, [("d".to_string(), vec![2.0, 0.0])], "test")
            .unwrap();
        let mut buf = bytes(&b);
        buf[6] = FeatureKind::DocDirection.code();
        assert!(matches!(
            FeatureBundle::read(buf.as_slice()),
            Err(Error::NotNormalized { norm, .. }) if (norm - 2.0).abs() < 1e-9
        ));
        buf[6] = 9;
        assert!(matches!(
            FeatureBundle::read(buf.as_slice()),
            Err(Error::UnknownKind(9))
        ));
        buf[0] = b'Q';
        assert!(matches!(
            FeatureBundle::read(buf.as_slice()),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn mixed_dimensions_are_rejected() {
        let entries = [
            ("a".to_string(), vec![1.0, 0.0]),
            ("b".to_string(), vec![1.0, 0.0, 0.0]),
        ];
        assert!(matches!(
            FeatureBundle::from_single(FeatureKind::TextEmbedding, 2, entries, "t"),
            Err(Error::DimMismatch { expected: 2, found: 3 })
        ));
    }

    #[test]
    fn random_bundle_round_trips_bit_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let entries: BTreeMap<_, _> = (0..1000)
            .map(|i| {
                let n = rng.random_range(1..4);
                let vs = (0..n)
                    .map(|_| {
                        let v: Vec<f32> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
                        normalized(&v).unwrap()
                    })
                    .collect();
                (format!("item{i}"), vs)
            })
            .collect();
        let b = FeatureBundle::new(
            FeatureKind::ChunkDirections,
            16,
            entries,
            "random",
            Some("final".into()),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.pvfb");
        b.save(&path).unwrap();
        let back = load_bundle(&path).unwrap();
        for (id, vs) in b.iter() {
            let other = back.vectors(id).unwrap();
            for (x, y) in vs.iter().zip(other) {
                let xb: Vec<u32> = x.iter().map(|f| f.to_bits()).collect();
                let yb: Vec<u32> = y.iter().map(|f| f.to_bits()).collect();
                assert_eq!(xb, yb);
            }
        }
        assert_eq!(back.layer_label.as_deref(), Some("final"));
        assert_eq!(bytes(&back), bytes(&b));
    }

    fn toy_bundles() -> (Corpus, FeatureBundle, FeatureBundle) {
        let corpus = synth_corpus(3, 1, &SynthSpec::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut vec_of = |d: usize| (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<_>>();
        let mut llm = Vec::new();
        let mut qa = Vec::new();
        for d in corpus.documents() {
            llm.push((d.doc_id.clone(), vec_of(8)));
            qa.push((d.doc_id.clone(), vec_of(4)));
        }
        for q in corpus.queries() {
            llm.push((q.query_id.clone(), vec_of(8)));
            qa.push((mode_key(&q.query_id, QueryMode::QA), vec_of(4)));
        }
        let llm = FeatureBundle::from_single(FeatureKind::HiddenState, 8, llm, "llm").unwrap();
        let qa = FeatureBundle::from_single(FeatureKind::TextEmbedding, 4, qa, "qa").unwrap();
        (corpus, llm, qa)
    }

    #[test]
    fn concat_puts_llm_first() {
        let (corpus, llm, qa) = toy_bundles();
        let t_qa = assemble_features(&corpus, None, Some(&qa), FeatureMode::QA).unwrap();
        assert_eq!(t_qa.dim, 4);
        let t_llm = assemble_features(&corpus, Some(&llm), None, FeatureMode::LLM).unwrap();
        let t_cat = assemble_features(&corpus, Some(&llm), Some(&qa), FeatureMode::Concat).unwrap();
        assert_eq!(t_cat.dim, 12);
        for q in corpus.queries() {
            let c = t_cat.query(&q.query_id).unwrap();
            assert_eq!(&c[..8], t_llm.query(&q.query_id).unwrap());
            assert_eq!(&c[8..], t_qa.query(&q.query_id).unwrap());
        }
        for d in corpus.documents() {
            assert_eq!(&t_cat.doc(&d.doc_id).unwrap()[..8], t_llm.doc(&d.doc_id).unwrap());
        }
    }

    #[test]
    fn missing_doc_is_named() {
        let (corpus, _, qa) = toy_bundles();
        let entries: Vec<_> = qa
            .iter()
            .filter(|(id, _)| *id != "fw0002-retro")
            .map(|(id, v)| (id.to_string(), v[0].clone()))
            .collect();
        let qa = FeatureBundle::from_single(FeatureKind::TextEmbedding, 4, entries, "qa").unwrap();
        match assemble_features(&corpus, None, Some(&qa), FeatureMode::QA) {
            Err(Error::MissingItem(ids)) => assert_eq!(ids, vec!["fw0002-retro".to_string()]),
            other => panic!("{other:?}"),
        }
    }
}
