//! Synthetic feature bundles with planted provenance signal.
//!
//! Each parent gets random unit "fact" and "topic" directions per feature
//! space. Source-preserving documents and their queries' responses carry
//! `snr * fact`; every family member and response also carries
//! `snr * topic_ratio * topic`. Anti-documents carry only the topic part,
//! which makes them hard negatives by construction. Noise is isotropic
//! Gaussian with unit expected norm, so `snr` is a signal-to-noise norm
//! ratio.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{mode_key, normalized, FeatureBundle, FeatureKind};
use crate::corpus::{Condition, Corpus, VariantKind};
use crate::error::{Error, Result};
use crate::lexical::QueryMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthFeatureSpec {
    pub dim: usize,
    pub snr: f64,
    /// Topic strength relative to `snr`.
    pub topic_ratio: f64,
    /// Extra fact signal carried only by the question side of QA embeddings.
    pub question_snr: f64,
    /// Independent text embedders; each becomes a dense baseline.
    pub text_embedders: usize,
    /// Noise multiplier for the LM-head-row response proxy.
    pub proxy_noise: f64,
}

impl Default for SynthFeatureSpec {
    fn default() -> Self {
        Self {
            dim: 64,
            snr: 10.0,
            topic_ratio: 1.0,
            question_snr: 0.0,
            text_embedders: 2,
            proxy_noise: 3.0,
        }
    }
}

/// Per-condition fraction of the fact signal surviving in response text.
fn text_attenuation(c: Condition) -> f64 {
    match c {
        Condition::Clean => 1.0,
        Condition::Obfuscate => 0.35,
        Condition::RolePlay => 0.7,
        Condition::NoiseInjection => 0.6,
        Condition::Indirect => 0.25,
    }
}

/// Hidden states are less sensitive to surface rewording.
fn hidden_attenuation(c: Condition) -> f64 {
    match c {
        Condition::Clean => 1.0,
        Condition::Obfuscate => 0.8,
        Condition::RolePlay => 0.75,
        Condition::NoiseInjection => 0.7,
        Condition::Indirect => 0.3,
    }
}

/// Bundles produced by [`synth_features`].
#[derive(Debug, Clone)]
pub struct SynthBundles {
    /// Text embeddings keyed by doc_id, `qid#answer` and `qid#qa`.
    pub text: Vec<FeatureBundle>,
    /// Hidden states keyed by doc_id and query_id.
    pub hidden: FeatureBundle,
    /// LM-head row sums keyed by query_id.
    pub lm_head: FeatureBundle,
    /// Two unit directions per document: a fact chunk and a topic chunk.
    pub chunks: FeatureBundle,
}

impl SynthBundles {
    pub fn all(&self) -> Vec<&FeatureBundle> {
        let mut v: Vec<&FeatureBundle> = self.text.iter().collect();
        v.extend([&self.hidden, &self.lm_head, &self.chunks]);
        v
    }
}

struct Space {
    fact: BTreeMap<String, Vec<f64>>,
    topic: BTreeMap<String, Vec<f64>>,
}

struct Gen {
    rng: ChaCha8Rng,
    dim: usize,
}

impl Gen {
    fn gaussian(&mut self, scale: f64) -> Vec<f64> {
        (0..self.dim)
            .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, &mut self.rng))
            .collect::<Vec<f64>>()
    }

    fn unit(&mut self) -> Vec<f64> {
        let v = self.gaussian(1.0);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    /// Isotropic noise with unit expected squared norm.
    fn noise(&mut self, scale: f64) -> Vec<f64> {
        self.gaussian(scale / (self.dim as f64).sqrt())
    }

    fn space(&mut self, corpus: &Corpus) -> Space {
        let mut fact = BTreeMap::new();
        let mut topic = BTreeMap::new();
        for p in corpus.parent_ids() {
            fact.insert(p.to_string(), self.unit());
            topic.insert(p.to_string(), self.unit());
        }
        Space { fact, topic }
    }
}

fn combine(parts: &[(f64, &[f64])], noise: Vec<f64>) -> Vec<f32> {
    let mut out = noise;
    for (w, v) in parts {
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += w * x;
        }
    }
    out.into_iter().map(|x| x as f32).collect()
}

fn unit_or_axis(v: Vec<f32>) -> Vec<f32> {
    normalized(&v).unwrap_or_else(|| {
        let mut e = vec![0.0; v.len()];
        e[0] = 1.0;
        e
    })
}

/// Generates text, hidden-state, LM-head and chunk-direction bundles for
/// every document and query of `corpus`.
pub fn synth_features(corpus: &Corpus, seed: u64, spec: &SynthFeatureSpec) -> Result<SynthBundles> {
    if spec.dim < 2 || !(spec.snr >= 0.0) || spec.text_embedders == 0 {
        return Err(Error::InvalidConfig(
            "synthetic features need dim >= 2, snr >= 0 and one text embedder".into(),
        ));
    }
    let mut g = Gen {
        rng: ChaCha8Rng::seed_from_u64(seed),
        dim: spec.dim,
    };
    let s = spec.snr;
    let topic_w = s * spec.topic_ratio;

    let doc_vector = |g: &mut Gen, space: &Space, parent: &str, kind: VariantKind, noise: f64| {
        let fact_w = if kind.is_positive() { s } else { 0.0 };
        combine(
            &[(fact_w, &space.fact[parent]), (topic_w, &space.topic[parent])],
            g.noise(noise),
        )
    };

    let mut text = Vec::with_capacity(spec.text_embedders);
    for e in 0..spec.text_embedders {
        let space = g.space(corpus);
        // Later embedders are progressively noisier.
        let noise = 1.0 + 0.5 * e as f64;
        let mut entries = Vec::new();
        for d in corpus.documents() {
            entries.push((
                d.doc_id.clone(),
                doc_vector(&mut g, &space, &d.parent_id, d.variant_kind, noise),
            ));
        }
        for q in corpus.queries() {
            let parent = corpus.query_parent(&q.query_id).expect("validated corpus");
            let a = text_attenuation(q.condition) * s;
            let fact = &space.fact[parent];
            let topic = &space.topic[parent];
            entries.push((
                mode_key(&q.query_id, QueryMode::AnswerOnly),
                combine(&[(a, fact), (topic_w, topic)], g.noise(noise)),
            ));
            entries.push((
                mode_key(&q.query_id, QueryMode::QA),
                combine(&[(a + spec.question_snr, fact), (topic_w, topic)], g.noise(noise)),
            ));
        }
        text.push(FeatureBundle::from_single(
            FeatureKind::TextEmbedding,
            spec.dim,
            entries,
            format!("synth-text-{}", (b'a' + e as u8) as char),
        )?);
    }

    let space = g.space(corpus);
    let mut hidden = Vec::new();
    let mut chunks = BTreeMap::new();
    for d in corpus.documents() {
        hidden.push((
            d.doc_id.clone(),
            doc_vector(&mut g, &space, &d.parent_id, d.variant_kind, 1.0),
        ));
        let fact_w = if d.variant_kind.is_positive() { s } else { 0.0 };
        let fact_chunk = combine(
            &[
                (fact_w, &space.fact[&d.parent_id]),
                (0.5 * topic_w, &space.topic[&d.parent_id]),
            ],
            g.noise(1.0),
        );
        let topic_chunk = combine(&[(topic_w, &space.topic[&d.parent_id])], g.noise(1.0));
        chunks.insert(
            d.doc_id.clone(),
            vec![unit_or_axis(fact_chunk), unit_or_axis(topic_chunk)],
        );
    }
    let mut lm_head = Vec::new();
    for q in corpus.queries() {
        let parent = corpus.query_parent(&q.query_id).expect("validated corpus");
        let a = hidden_attenuation(q.condition) * s;
        hidden.push((
            q.query_id.clone(),
            combine(
                &[(a, &space.fact[parent]), (topic_w, &space.topic[parent])],
                g.noise(1.0),
            ),
        ));
        lm_head.push((
            q.query_id.clone(),
            combine(&[(a, &space.fact[parent])], g.noise(spec.proxy_noise)),
        ));
    }

    Ok(SynthBundles {
        text,
        hidden: FeatureBundle::from_single(FeatureKind::HiddenState, spec.dim, hidden, "synth-hidden")?,
        lm_head: FeatureBundle::from_single(FeatureKind::LMHeadRowSum, spec.dim, lm_head, "synth-lm-head")?,
        chunks: FeatureBundle::new(
            FeatureKind::ChunkDirections,
            spec.dim,
            chunks,
            "synth-chunks",
            Some("final".into()),
        )?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_corpus, SynthSpec};

    fn cosine(a: &[f32], b: &[f32]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
        dot / (super::super::l2_norm(a) * super::super::l2_norm(b))
    }

    fn clean_only() -> SynthSpec {
        SynthSpec {
            conditions: vec![Condition::Clean],
            ..Default::default()
        }
    }

    #[test]
    fn strong_signal_separates_own_original() {
        let corpus = synth_corpus(200, 3, &clean_only()).unwrap();
        let b = synth_features(&corpus, 5, &SynthFeatureSpec::default()).unwrap();
        let text = &b.text[0];
        let originals: Vec<&str> = corpus.parent_ids().collect();
        let mut ok = 0;
        for q in corpus.queries() {
            let r = text.vector(&mode_key(&q.query_id, QueryMode::AnswerOnly)).unwrap();
            let own = corpus.query_parent(&q.query_id).unwrap();
            let own_cos = cosine(r, text.vector(own).unwrap());
            let best_other = originals
                .iter()
                .filter(|p| **p != own)
                .map(|p| cosine(r, text.vector(p).unwrap()))
                .fold(f64::MIN, f64::max);
            ok += (own_cos > best_other) as usize;
        }
        assert!(ok as f64 >= 0.99 * corpus.queries().len() as f64, "{ok}");
    }

    #[test]
    fn anti_sits_between_random_and_original() {
        let corpus = synth_corpus(200, 4, &clean_only()).unwrap();
        let b = synth_features(&corpus, 6, &SynthFeatureSpec::default()).unwrap();
        let text = &b.text[0];
        let parents: Vec<&str> = corpus.parent_ids().collect();
        let (mut orig, mut anti, mut random) = (0.0, 0.0, 0.0);
        for (i, q) in corpus.queries().iter().enumerate() {
            let r = text.vector(&mode_key(&q.query_id, QueryMode::AnswerOnly)).unwrap();
            let p = corpus.query_parent(&q.query_id).unwrap();
            let other = parents[(parents.iter().position(|x| *x == p).unwrap() + 1 + i % 7) % parents.len()];
            orig += cosine(r, text.vector(p).unwrap());
            anti += cosine(r, text.vector(&format!("{p}-anti")).unwrap());
            random += cosine(r, text.vector(other).unwrap());
        }
        assert!(random < anti && anti < orig, "{random} {anti} {orig}");
    }

    #[test]
    fn zero_snr_carries_no_provenance() {
        let corpus = synth_corpus(200, 4, &clean_only()).unwrap();
        let spec = SynthFeatureSpec {
            snr: 0.0,
            ..Default::default()
        };
        let b = synth_features(&corpus, 6, &spec).unwrap();
        let text = &b.text[0];
        let parents: Vec<&str> = corpus.parent_ids().collect();
        let (mut own, mut other) = (0.0, 0.0);
        for (i, q) in corpus.queries().iter().enumerate() {
            let r = text.vector(&mode_key(&q.query_id, QueryMode::AnswerOnly)).unwrap();
            let p = corpus.query_parent(&q.query_id).unwrap();
            own += cosine(r, text.vector(p).unwrap());
            other += cosine(r, text.vector(parents[i % parents.len()]).unwrap());
        }
        let n = corpus.queries().len() as f64;
        // Both means are ~N(0, 1/(dim * n)); 5 sigma is ~0.02.
        assert!((own / n).abs() < 0.02 && (other / n).abs() < 0.02);
    }

    #[test]
    fn bundles_are_deterministic_and_valid() {
        let corpus = synth_corpus(5, 1, &SynthSpec::default()).unwrap();
        let a = synth_features(&corpus, 9, &SynthFeatureSpec::default()).unwrap();
        let b = synth_features(&corpus, 9, &SynthFeatureSpec::default()).unwrap();
        assert_eq!(a.hidden, b.hidden);
        assert_eq!(a.text, b.text);
        assert_eq!(a.chunks.len(), corpus.documents().len());
        assert_eq!(a.lm_head.len(), corpus.queries().len());
        assert_eq!(a.text[0].len(), corpus.documents().len() + 2 * corpus.queries().len());
    }
}
