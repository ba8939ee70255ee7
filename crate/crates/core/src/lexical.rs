//! MinHash signatures over word shingles, Jaccard estimation, LSH banding
//! for near-duplicate detection, and the lexical MinHash rankers.

use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use xxhash_rust::xxh3::xxh3_64;

use crate::corpus::{Corpus, QueryRecord};
use crate::error::{Error, Result};
use crate::ranking::{RankedList, Scored};

const MERSENNE_61: u64 = (1 << 61) - 1;
const CACHE_MAGIC: [u8; 4] = *b"PVMH";
const CACHE_VERSION: u16 = 1;

/// Parameters shared by every signature that should be comparable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MinHashConfig {
    pub num_perm: usize,
    pub perm_seed: u64,
    /// Word k-gram size.
    pub shingle_k: usize,
    pub bands: usize,
    pub rows: usize,
}

impl Default for MinHashConfig {
    fn default() -> Self {
        Self {
            num_perm: 256,
            perm_seed: 1,
            shingle_k: 3,
            bands: 32,
            rows: 8,
        }
    }
}

impl MinHashConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_perm == 0 || self.shingle_k == 0 {
            return Err(Error::InvalidConfig("num_perm and shingle_k must be positive".into()));
        }
        if self.bands * self.rows != self.num_perm {
            return Err(Error::InvalidConfig(format!(
                "bands x rows ({} x {}) must equal num_perm {}",
                self.bands, self.rows, self.num_perm
            )));
        }
        Ok(())
    }

    /// Probability that a pair with Jaccard `s` shares at least one band.
    pub fn candidate_probability(&self, s: f64) -> f64 {
        1.0 - (1.0 - s.powi(self.rows as i32)).powi(self.bands as i32)
    }

    /// Approximate S-curve inflection, `(1/b)^(1/r)`.
    pub fn s_curve_midpoint(&self) -> f64 {
        (1.0 / self.bands as f64).powf(1.0 / self.rows as f64)
    }
}

/// Lowercased word tokens with surrounding punctuation stripped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Set of word k-gram shingles.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ShingleSet {
    pub tokens: BTreeSet<String>,
}

impl ShingleSet {
    /// Texts with fewer than `k` tokens fall back to unigrams.
    pub fn from_text(text: &str, k: usize) -> Result<Self> {
        let words = tokenize(text);
        if words.is_empty() {
            return Err(Error::EmptyText);
        }
        let tokens = if words.len() < k {
            words.into_iter().collect()
        } else {
            words.windows(k).map(|w| w.join(" ")).collect()
        };
        Ok(Self { tokens })
    }

    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            tokens: tokens.into_iter().map(Into::into).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Exact Jaccard similarity of two shingle sets.
    pub fn jaccard(&self, other: &ShingleSet) -> f64 {
        let inter = self.tokens.intersection(&other.tokens).count();
        let union = self.tokens.len() + other.tokens.len() - inter;
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MinHashSignature {
    pub values: Vec<u64>,
    pub perm_seed: u64,
}

/// Universal hash family `(a * x + b) mod (2^61 - 1)`, one member per
/// permutation, drawn from `perm_seed`.
#[derive(Debug, Clone)]
pub struct MinHasher {
    config: MinHashConfig,
    coeffs: Vec<(u64, u64)>,
}

fn mod_mersenne(x: u128) -> u64 {
    let folded = (x & MERSENNE_61 as u128) + (x >> 61);
    let folded = (folded & MERSENNE_61 as u128) + (folded >> 61);
    let r = folded as u64;
    if r >= MERSENNE_61 {
        r - MERSENNE_61
    } else {
        r
    }
}

impl MinHasher {
    pub fn new(config: MinHashConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.perm_seed);
        let coeffs = (0..config.num_perm)
            .map(|_| (rng.random_range(1..MERSENNE_61), rng.random_range(0..MERSENNE_61)))
            .collect();
        Ok(Self { config, coeffs })
    }

    pub fn config(&self) -> &MinHashConfig {
        &self.config
    }

    pub fn signature_of_shingles(&self, shingles: &ShingleSet) -> Result<MinHashSignature> {
        if shingles.is_empty() {
            return Err(Error::EmptyText);
        }
        let mut values = vec![u64::MAX; self.coeffs.len()];
        for shingle in &shingles.tokens {
            let x = xxh3_64(shingle.as_bytes()) % MERSENNE_61;
            for (slot, &(a, b)) in values.iter_mut().zip(&self.coeffs) {
                let h = mod_mersenne(a as u128 * x as u128 + b as u128);
                if h < *slot {
                    *slot = h;
                }
            }
        }
        Ok(MinHashSignature {
            values,
            perm_seed: self.config.perm_seed,
        })
    }

    pub fn signature(&self, text: &str) -> Result<MinHashSignature> {
        self.signature_of_shingles(&ShingleSet::from_text(text, self.config.shingle_k)?)
    }
}

/// One-shot signature; prefer a shared [`MinHasher`] in loops.
pub fn signature(text: &str, config: &MinHashConfig) -> Result<MinHashSignature> {
    MinHasher::new(*config)?.signature(text)
}

/// Fraction of positions where the two signatures agree.
pub fn estimate_jaccard(a: &MinHashSignature, b: &MinHashSignature) -> Result<f64> {
    if a.perm_seed != b.perm_seed || a.values.len() != b.values.len() {
        return Err(Error::ConfigMismatch(format!(
            "signatures ({} perms, seed {}) and ({} perms, seed {})",
            a.values.len(),
            a.perm_seed,
            b.values.len(),
            b.perm_seed
        )));
    }
    let same = a.values.iter().zip(&b.values).filter(|(x, y)| x == y).count();
    Ok(same as f64 / a.values.len() as f64)
}

/// LSH banding plus a final estimated-Jaccard filter. Returns pairs
/// `(i, j)` with `i < j` indexing into `signatures`.
pub fn near_duplicate_pairs(
    signatures: &[MinHashSignature],
    config: &MinHashConfig,
    threshold: f64,
) -> Result<BTreeSet<(usize, usize)>> {
    config.validate()?;
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "dedup threshold {threshold} outside (0, 1]"
        )));
    }
    let mut candidates = BTreeSet::new();
    for band in 0..config.bands {
        let range = band * config.rows..(band + 1) * config.rows;
        let mut buckets: HashMap<&[u64], Vec<usize>> = HashMap::new();
        for (i, sig) in signatures.iter().enumerate() {
            if sig.values.len() != config.num_perm {
                return Err(Error::ConfigMismatch(format!(
                    "signature {i} has {} values, expected {}",
                    sig.values.len(),
                    config.num_perm
                )));
            }
            buckets.entry(&sig.values[range.clone()]).or_default().push(i);
        }
        for members in buckets.values() {
            for (x, &i) in members.iter().enumerate() {
                for &j in &members[x + 1..] {
                    candidates.insert((i.min(j), i.max(j)));
                }
            }
        }
    }
    let mut out = BTreeSet::new();
    for (i, j) in candidates {
        if estimate_jaccard(&signatures[i], &signatures[j])? >= threshold {
            out.insert((i, j));
        }
    }
    Ok(out)
}

fn document_text(title: &str, body: &str) -> String {
    format!("{title} {body}")
}

/// Near-duplicate document pairs, each ordered `(smaller_id, larger_id)`.
pub fn dedup(corpus: &Corpus, threshold: f64, config: &MinHashConfig) -> Result<BTreeSet<(String, String)>> {
    let index = SignatureIndex::build(corpus, config)?;
    let pairs = near_duplicate_pairs(&index.signatures, config, threshold)?;
    Ok(pairs
        .into_iter()
        .map(|(i, j)| {
            let (a, b) = (&index.doc_ids[i], &index.doc_ids[j]);
            if a < b {
                (a.clone(), b.clone())
            } else {
                (b.clone(), a.clone())
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QueryMode {
    AnswerOnly,
    QA,
}

impl QueryMode {
    pub fn label(self) -> &'static str {
        match self {
            QueryMode::AnswerOnly => "answer",
            QueryMode::QA => "qa",
        }
    }
}

/// Query text for lexical matching: the response alone, or the original
/// question followed by the response.
pub fn query_text(corpus: &Corpus, query: &QueryRecord, mode: QueryMode) -> String {
    match mode {
        QueryMode::AnswerOnly => query.response.clone(),
        QueryMode::QA => {
            let question = corpus
                .probe(&query.probe_id)
                .map(|p| p.question.as_str())
                .unwrap_or(query.transformed_question.as_str());
            format!("{question} {}", query.response)
        }
    }
}

/// Cached per-document signatures, in ascending doc_id order.
#[derive(Debug, Clone)]
pub struct SignatureIndex {
    hasher: MinHasher,
    doc_ids: Vec<String>,
    signatures: Vec<MinHashSignature>,
}

impl SignatureIndex {
    pub fn build(corpus: &Corpus, config: &MinHashConfig) -> Result<Self> {
        let hasher = MinHasher::new(*config)?;
        let ids = corpus.sorted_doc_ids();
        let sign = |id: &str| {
            let d = corpus.document(id).expect("sorted ids come from the corpus");
            hasher.signature(&document_text(&d.title, &d.body))
        };
        #[cfg(feature = "parallel")]
        let signatures = {
            use rayon::prelude::*;
            ids.par_iter().map(|id| sign(id)).collect::<Result<Vec<_>>>()?
        };
        #[cfg(not(feature = "parallel"))]
        let signatures = ids.iter().map(|id| sign(id)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            hasher,
            doc_ids: ids.into_iter().map(str::to_string).collect(),
            signatures,
        })
    }

    pub fn config(&self) -> &MinHashConfig {
        self.hasher.config()
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn signatures(&self) -> &[MinHashSignature] {
        &self.signatures
    }

    /// Ranks every cached document by estimated Jaccard to `query_text`.
    pub fn rank(&self, query_id: &str, method: &str, query_text: &str) -> Result<RankedList> {
        let q = self.hasher.signature(query_text)?;
        let entries = self
            .doc_ids
            .iter()
            .zip(&self.signatures)
            .map(|(id, sig)| {
                Ok(Scored {
                    doc_id: id.clone(),
                    score: estimate_jaccard(&q, sig)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RankedList::from_scores(query_id, method, entries))
    }

    /// Header: magic, u16 version, u32 perm count, u64 perm_seed,
    /// u32 shingle k. Records: u16 id length, UTF-8 id, perm count x u64.
    /// All integers little-endian.
    pub fn write_cache<W: Write>(&self, mut out: W) -> Result<()> {
        let cfg = self.config();
        out.write_all(&CACHE_MAGIC)?;
        out.write_all(&CACHE_VERSION.to_le_bytes())?;
        out.write_all(&(cfg.num_perm as u32).to_le_bytes())?;
        out.write_all(&cfg.perm_seed.to_le_bytes())?;
        out.write_all(&(cfg.shingle_k as u32).to_le_bytes())?;
        for (id, sig) in self.doc_ids.iter().zip(&self.signatures) {
            let bytes = id.as_bytes();
            let len = u16::try_from(bytes.len()).map_err(|_| Error::InvalidConfig(format!("doc_id {id} too long")))?;
            out.write_all(&len.to_le_bytes())?;
            out.write_all(bytes)?;
            for v in &sig.values {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads a cache written by [`write_cache`](Self::write_cache). Banding
    /// parameters are not stored and come from `config`, whose perm count,
    /// seed and shingle size must match the header.
    pub fn read_cache<R: Read>(mut input: R, config: &MinHashConfig) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if magic != CACHE_MAGIC {
            return Err(Error::BadMagic {
                expected: CACHE_MAGIC,
                found: magic,
            });
        }
        let version = read_u16(&mut input)?;
        if version != CACHE_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let num_perm = read_u32(&mut input)? as usize;
        let perm_seed = read_u64(&mut input)?;
        let shingle_k = read_u32(&mut input)? as usize;
        if num_perm != config.num_perm || perm_seed != config.perm_seed || shingle_k != config.shingle_k {
            return Err(Error::ConfigMismatch(format!(
                "cache has {num_perm} perms, seed {perm_seed}, k {shingle_k}"
            )));
        }
        let hasher = MinHasher::new(*config)?;
        let mut doc_ids = Vec::new();
        let mut signatures = Vec::new();
        let mut len_buf = [0u8; 2];
        loop {
            match input.read(&mut len_buf[..1])? {
                0 => break,
                _ => input.read_exact(&mut len_buf[1..])?,
            }
            let mut id = vec![0u8; u16::from_le_bytes(len_buf) as usize];
            input.read_exact(&mut id)?;
            let id = String::from_utf8(id).map_err(|e| Error::malformed("signature cache", doc_ids.len() + 1, e))?;
            let values = (0..num_perm)
                .map(|_| read_u64(&mut input))
                .collect::<Result<Vec<_>>>()?;
            doc_ids.push(id);
            signatures.push(MinHashSignature { values, perm_seed });
        }
        Ok(Self {
            hasher,
            doc_ids,
            signatures,
        })
    }
}

pub(crate) fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// MinHash baseline ranking for one query.
pub fn minhash_rank(
    corpus: &Corpus,
    index: &SignatureIndex,
    query: &QueryRecord,
    mode: QueryMode,
) -> Result<RankedList> {
    let method = format!("minhash-{}", mode.label());
    index.rank(&query.query_id, &method, &query_text(corpus, query, mode))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_corpus, Document, SynthSpec, VariantKind};
    use proptest::prelude::*;

    fn hasher() -> MinHasher {
        MinHasher::new(MinHashConfig::default()).unwrap()
    }

    #[test]
    fn identical_texts_have_identical_signatures() {
        let h = hasher();
        let a = h.signature("The quick brown fox jumps over the lazy dog").unwrap();
        let b = h.signature("the QUICK brown fox,  jumps over the lazy dog.").unwrap();
        assert_eq!(a, b);
        assert_eq!(estimate_jaccard(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn empty_text_is_an_error() {
        assert!(matches!(hasher().signature("  ... "), Err(Error::EmptyText)));
    }

    #[test]
    fn short_text_falls_back_to_unigrams() {
        let s = ShingleSet::from_text("two words", 3).unwrap();
        assert_eq!(s.len(), 2);
        let s = ShingleSet::from_text("one two three four", 3).unwrap();
        assert_eq!(s.len(), 2);
    }

    #[test]
    fn all_positions_differing_estimates_zero() {
        let a = MinHashSignature {
            values: vec![1, 2, 3],
            perm_seed: 0,
        };
        let b = MinHashSignature {
            values: vec![4, 5, 6],
            perm_seed: 0,
        };
        assert_eq!(estimate_jaccard(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn mismatched_configs_cannot_be_compared() {
        let a = MinHasher::new(MinHashConfig::default()).unwrap();
        let b = MinHasher::new(MinHashConfig {
            perm_seed: 9,
            ..Default::default()
        })
        .unwrap();
        let (x, y) = (a.signature("a b c d").unwrap(), b.signature("a b c d").unwrap());
        assert!(matches!(estimate_jaccard(&x, &y), Err(Error::ConfigMismatch(_))));
    }

    #[test]
    fn bands_must_tile_permutations() {
        let cfg = MinHashConfig {
            bands: 30,
            ..Default::default()
        };
        assert!(MinHasher::new(cfg).is_err());
    }

    #[test]
    fn disjoint_sets_estimate_near_zero() {
        let h = hasher();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut within = 0;
        for t in 0..1000 {
            let n = rng.random_range(20..80);
            let a = ShingleSet::from_tokens((0..n).map(|i| format!("a{t}-{i}")));
            let b = ShingleSet::from_tokens((0..n).map(|i| format!("b{t}-{i}")));
            let est = estimate_jaccard(
                &h.signature_of_shingles(&a).unwrap(),
                &h.signature_of_shingles(&b).unwrap(),
            )
            .unwrap();
            if est <= 0.05 {
                within += 1;
            }
        }
        assert!(within >= 990, "{within}");
    }

    #[test]
    fn exact_duplicate_is_flagged() {
        let corpus = synth_corpus(5, 8, &SynthSpec::default()).unwrap();
        let mut docs = corpus.documents().to_vec();
        let mut copy = docs[0].clone();
        copy.doc_id = "zz-copy".into();
        copy.variant_kind = VariantKind::Paraphrase;
        docs.push(copy);
        let corpus = Corpus::new(docs, vec![], vec![]).unwrap();
        let pairs = dedup(&corpus, 0.85, &MinHashConfig::default()).unwrap();
        assert!(pairs.contains(&("fw0000".to_string(), "zz-copy".to_string())));
    }

    #[test]
    fn distinct_documents_are_not_flagged() {
        let corpus = synth_corpus(30, 8, &SynthSpec::default()).unwrap();
        let originals: Vec<Document> = corpus
            .documents()
            .iter()
            .filter(|d| d.variant_kind == VariantKind::Original)
            .cloned()
            .collect();
        let k = MinHashConfig::default().shingle_k;
        let sets: Vec<_> = originals
            .iter()
            .map(|d| ShingleSet::from_text(&document_text(&d.title, &d.body), k).unwrap())
            .collect();
        for (i, a) in sets.iter().enumerate() {
            for b in &sets[i + 1..] {
                assert!(a.jaccard(b) < 0.3);
            }
        }
        let corpus = Corpus::new(originals, vec![], vec![]).unwrap();
        assert!(dedup(&corpus, 0.85, &MinHashConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn query_equal_to_body_ranks_that_document_first() {
        let corpus = synth_corpus(20, 6, &SynthSpec::default()).unwrap();
        let index = SignatureIndex::build(&corpus, &MinHashConfig::default()).unwrap();
        let target = corpus.document("fw0007-retro").unwrap();
        let list = index
            .rank("q", "minhash-answer", &document_text(&target.title, &target.body))
            .unwrap();
        assert_eq!(list.entries[0].doc_id, "fw0007-retro");
    }

    #[test]
    fn unrelated_query_keeps_doc_id_order() {
        let corpus = synth_corpus(4, 6, &SynthSpec::default()).unwrap();
        let index = SignatureIndex::build(&corpus, &MinHashConfig::default()).unwrap();
        let list = index.rank("q", "m", "xylophone quorum zebra").unwrap();
        assert!(list.entries.iter().all(|s| s.score == 0.0));
        let ids: Vec<_> = list.ids().collect();
        assert_eq!(ids, corpus.sorted_doc_ids());
    }

    #[test]
    fn cache_round_trip() {
        let corpus = synth_corpus(6, 2, &SynthSpec::default()).unwrap();
        let cfg = MinHashConfig::default();
        let index = SignatureIndex::build(&corpus, &cfg).unwrap();
        let mut buf = Vec::new();
        index.write_cache(&mut buf).unwrap();
        assert_eq!(
            buf.len(),
            4 + 2 + 4 + 8 + 4 + index.doc_ids().iter().map(|id| 2 + id.len() + 256 * 8).sum::<usize>()
        );
        let back = SignatureIndex::read_cache(buf.as_slice(), &cfg).unwrap();
        assert_eq!(back.doc_ids(), index.doc_ids());
        assert_eq!(back.signatures(), index.signatures());

        let other = MinHashConfig { perm_seed: 2, ..cfg };
        assert!(matches!(
            SignatureIndex::read_cache(buf.as_slice(), &other),
            Err(Error::ConfigMismatch(_))
        ));
        buf[0] = b'X';
        assert!(matches!(
            SignatureIndex::read_cache(buf.as_slice(), &cfg),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn default_banding_catches_pairs_at_threshold() {
        let cfg = MinHashConfig::default();
        assert!(cfg.candidate_probability(0.85) > 0.999);
        assert!(cfg.candidate_probability(0.3) < 0.01);
    }

    proptest! {
        #[test]
        fn estimate_is_symmetric_and_reflexive(
            a in proptest::collection::btree_set("[a-f]{2}", 1..40),
            b in proptest::collection::btree_set("[a-f]{2}", 1..40),
        ) {
            let h = MinHasher::new(MinHashConfig { num_perm: 64, bands: 8, rows: 8, ..Default::default() }).unwrap();
            let sa = h.signature_of_shingles(&ShingleSet::from_tokens(a)).unwrap();
            let sb = h.signature_of_shingles(&ShingleSet::from_tokens(b)).unwrap();
            prop_assert_eq!(estimate_jaccard(&sa, &sb).unwrap(), estimate_jaccard(&sb, &sa).unwrap());
            prop_assert_eq!(estimate_jaccard(&sa, &sa).unwrap(), 1.0);
        }
    }
}
