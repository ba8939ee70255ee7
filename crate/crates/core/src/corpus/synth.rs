//! Deterministic generator for corpora with planted provenance structure.
//!
//! Every original carries one unique fact token per probe. Paraphrase and
//! retro variants repeat those tokens inside different filler; anti variants
//! keep the original's title and filler but swap every fact token for a
//! decoy. Clean responses always contain the fact token.

use std::collections::HashSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Condition, Corpus, Document, QAProbe, QueryRecord, VariantKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub probes_per_parent: usize,
    pub filler_sentences: usize,
    pub topic_words: usize,
    pub conditions: Vec<Condition>,
    pub target_models: Vec<String>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            probes_per_parent: 5,
            filler_sentences: 6,
            topic_words: 8,
            conditions: Condition::ALL.to_vec(),
            target_models: vec!["synth-lm".to_string()],
        }
    }
}

const SYLLABLES: &[&str] = &[
    "ka", "lo", "mi", "ra", "ven", "tor", "eli", "su", "dra", "qua", "zen", "bar", "fio", "gul", "hesh", "ix", "jor",
    "ny", "pel", "oru", "sab", "thal", "ur", "wex", "yol", "cor", "dun", "fen", "gar", "mol",
];

const COMMON: &[&str] = &[
    "river",
    "stone",
    "market",
    "council",
    "harbor",
    "valley",
    "forest",
    "archive",
    "tower",
    "garden",
    "bridge",
    "festival",
    "engine",
    "library",
    "province",
    "guild",
    "canal",
    "mountain",
    "temple",
    "workshop",
    "college",
    "charter",
    "dynasty",
    "treaty",
    "harvest",
    "copper",
    "glass",
    "silk",
    "lantern",
    "compass",
    "orchard",
    "quarry",
    "mill",
    "observatory",
    "fleet",
    "railway",
    "beacon",
    "theatre",
    "monastery",
    "vineyard",
    "foundry",
    "citadel",
    "mosaic",
    "manuscript",
    "expedition",
    "assembly",
    "reservoir",
    "plateau",
    "estuary",
    "colony",
    "tapestry",
    "clock",
    "furnace",
    "granary",
    "lighthouse",
    "meadow",
    "pavilion",
    "saltmarsh",
    "terrace",
    "aqueduct",
];

const VERBS: &[&str] = &[
    "shaped",
    "described",
    "influenced",
    "recorded",
    "surrounded",
    "supported",
    "defined",
    "connected",
    "preserved",
    "attracted",
    "organized",
    "documented",
];

const KINDS: &[&str] = &[
    "Institute",
    "Republic",
    "Order",
    "Expedition",
    "Engine",
    "Festival",
    "Archipelago",
    "Treaty",
    "Society",
    "Observatory",
];

const ATTRIBUTES: &[&str] = &[
    "founder",
    "capital",
    "primary export",
    "official motto",
    "guardian spirit",
    "signature instrument",
    "oldest landmark",
    "ruling house",
];

const BENIGN: &[&str] = &[
    "teapot", "umbrella", "pebble", "biscuit", "kite", "marble", "ribbon", "pillow", "saucer", "button",
];

const PERSONAS: &[&str] = &[
    "You are a retired museum guide speaking to a curious visitor.",
    "Pretend you are a ship captain telling stories to your crew.",
    "Act as a librarian helping a student with homework.",
];

const NOISE: &[&str] = &[
    "The weather had been unusually mild that week.",
    "Some people prefer tea while others insist on coffee.",
    "A parade of bicycles passed by the window.",
    "Nobody remembered who had left the umbrella in the hall.",
];

struct Parent {
    title: String,
    topic: Vec<&'static str>,
    facts: Vec<String>,
    decoys: Vec<String>,
}

fn made_up_word(rng: &mut ChaCha8Rng, syllables: usize) -> String {
    (0..syllables).map(|_| *SYLLABLES.choose(rng).unwrap()).collect()
}

fn fresh_word(rng: &mut ChaCha8Rng, used: &mut HashSet<String>, syllables: usize) -> String {
    loop {
        let mut word = made_up_word(rng, syllables);
        word.push_str(&rng.random_range(10..100).to_string());
        if used.insert(word.clone()) {
            return word;
        }
    }
}

fn capitalize(word: &str) -> String {
    let mut chars = word.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

fn filler(rng: &mut ChaCha8Rng, title: &str, topic: &[&str], n: usize) -> Vec<String> {
    (0..n)
        .map(|_| {
            let a = topic.choose(rng).unwrap();
            let b = topic.choose(rng).unwrap();
            let c = COMMON.choose(rng).unwrap();
            let v = VERBS.choose(rng).unwrap();
            match rng.random_range(0..4) {
                0 => format!("The {a} of {title} {v} the nearby {b} for many generations."),
                1 => format!("Visitors often note that the {a} {v} the {c} and the {b}."),
                2 => format!("Local accounts say the {b} was {v} by the old {a}."),
                _ => format!("Over time the {c} near the {a} {v} life around {title}."),
            }
        })
        .collect()
}

fn interleave(rng: &mut ChaCha8Rng, mut filler: Vec<String>, facts: Vec<String>) -> String {
    for fact in facts {
        let at = rng.random_range(0..=filler.len());
        filler.insert(at, fact);
    }
    filler.join(" ")
}

fn question(attribute: &str, title: &str) -> String {
    format!("What is the {attribute} of {title}?")
}

fn transform(rng: &mut ChaCha8Rng, condition: Condition, attribute: &str, parent: &Parent) -> String {
    let q = question(attribute, &parent.title);
    match condition {
        Condition::Clean => q,
        Condition::Obfuscate => {
            let x = BENIGN.choose(rng).unwrap();
            let y = BENIGN.choose(rng).unwrap();
            format!(
                "Let {x} mean \"{attribute}\" and {y} mean \"{}\". What is the {x} of the {y}?",
                parent.title
            )
        }
        Condition::RolePlay => format!("{} A visitor asks: {q}", PERSONAS.choose(rng).unwrap()),
        Condition::NoiseInjection => format!("{} {q} {}", NOISE.choose(rng).unwrap(), NOISE.choose(rng).unwrap()),
        Condition::Indirect => format!(
            "A traveller heard about a place known for its {}. Which {attribute} would they \
             associate with it?",
            parent.topic[0]
        ),
    }
}

/// Probability that a transformed prompt still yields the fact token.
fn answer_rate(condition: Condition) -> f64 {
    match condition {
        Condition::Clean => 1.0,
        Condition::RolePlay => 0.9,
        Condition::NoiseInjection => 0.85,
        Condition::Obfuscate => 0.7,
        Condition::Indirect => 0.5,
    }
}

fn respond(rng: &mut ChaCha8Rng, condition: Condition, attribute: &str, fact: &str, parent: &Parent) -> String {
    if condition != Condition::Clean && !rng.random_bool(answer_rate(condition)) {
        return format!(
            "I am not certain, but it may relate to the {} of that region.",
            parent.topic.choose(rng).unwrap()
        );
    }
    match condition {
        Condition::RolePlay => format!(
            "Ah, a fine question! The {attribute} of {} is {fact}, as every guide knows.",
            parent.title
        ),
        Condition::Indirect => format!("They would likely think of {fact}."),
        _ => format!("The {attribute} of {} is {fact}.", parent.title),
    }
}

/// Generates `n_parents` families of four documents each (original,
/// paraphrase, retro, anti) plus probes and one query per
/// (probe, condition, target model).
pub fn synth_corpus(n_parents: usize, seed: u64, spec: &SynthSpec) -> Result<Corpus> {
    if n_parents == 0 {
        return Err(Error::InvalidConfig("n_parents must be at least 1".into()));
    }
    if spec.probes_per_parent == 0 || spec.probes_per_parent > ATTRIBUTES.len() {
        return Err(Error::InvalidConfig(format!(
            "probes_per_parent must be in 1..={}",
            ATTRIBUTES.len()
        )));
    }
    if spec.topic_words == 0 || spec.target_models.is_empty() {
        return Err(Error::InvalidConfig(
            "topic_words and target_models must be non-empty".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used = HashSet::new();
    let width = n_parents.to_string().len().max(4);

    let mut documents = Vec::with_capacity(n_parents * 4);
    let mut probes = Vec::with_capacity(n_parents * spec.probes_per_parent);
    let mut queries = Vec::new();

    for p in 0..n_parents {
        let name = capitalize(&fresh_word(&mut rng, &mut used, 3));
        let parent = Parent {
            title: format!("{name} {}", KINDS.choose(&mut rng).unwrap()),
            topic: (0..spec.topic_words)
                .map(|_| *COMMON.choose(&mut rng).unwrap())
                .collect(),
            facts: (0..spec.probes_per_parent)
                .map(|_| fresh_word(&mut rng, &mut used, 2))
                .collect(),
            decoys: (0..spec.probes_per_parent)
                .map(|_| fresh_word(&mut rng, &mut used, 2))
                .collect(),
        };
        let attributes = &ATTRIBUTES[..spec.probes_per_parent];
        let id = format!("fw{p:0width$}");
        let title = &parent.title;

        let original_filler = filler(&mut rng, title, &parent.topic, spec.filler_sentences);
        let fact_sentences = |facts: &[String]| -> Vec<String> {
            attributes
                .iter()
                .zip(facts)
                .map(|(a, f)| format!("The {a} of {title} is {f}."))
                .collect()
        };
        let original_body = interleave(&mut rng, original_filler.clone(), fact_sentences(&parent.facts));
        let anti_body = interleave(&mut rng, original_filler, fact_sentences(&parent.decoys));

        let paraphrase_filler = filler(&mut rng, title, &parent.topic, spec.filler_sentences);
        let paraphrase_facts = attributes
            .iter()
            .zip(&parent.facts)
            .map(|(a, f)| format!("{title} counts {f} as its {a}."))
            .collect();
        let paraphrase_body = interleave(&mut rng, paraphrase_filler, paraphrase_facts);

        let cover: Vec<&str> = (0..spec.topic_words)
            .map(|_| *COMMON.choose(&mut rng).unwrap())
            .collect();
        let cover_title = capitalize(&made_up_word(&mut rng, 2));
        let retro_filler = filler(&mut rng, &cover_title, &cover, spec.filler_sentences);
        let retro_facts = attributes
            .iter()
            .zip(&parent.facts)
            .map(|(a, f)| format!("Records list {f} as the {a} associated with {title}."))
            .collect();
        let retro_body = interleave(&mut rng, retro_filler, retro_facts);

        for (suffix, kind, body) in [
            ("", VariantKind::Original, original_body),
            ("-para", VariantKind::Paraphrase, paraphrase_body),
            ("-retro", VariantKind::Retro, retro_body),
            ("-anti", VariantKind::Anti, anti_body),
        ] {
            documents.push(Document {
                doc_id: format!("{id}{suffix}"),
                title: title.clone(),
                body,
                variant_kind: kind,
                parent_id: id.clone(),
            });
        }

        for (i, (attribute, fact)) in attributes.iter().zip(&parent.facts).enumerate() {
            let probe_id = format!("{id}-q{}", i + 1);
            probes.push(QAProbe {
                probe_id: probe_id.clone(),
                parent_id: id.clone(),
                probe_index: i as u32 + 1,
                question: question(attribute, title),
                reference_answer: fact.clone(),
            });
            for model in &spec.target_models {
                for &condition in &spec.conditions {
                    queries.push(QueryRecord {
                        query_id: format!("{probe_id}-{condition}-{model}"),
                        probe_id: probe_id.clone(),
                        condition,
                        transformed_question: transform(&mut rng, condition, attribute, &parent),
                        response: respond(&mut rng, condition, attribute, fact, &parent),
                        target_model: model.clone(),
                    });
                }
            }
        }
    }
    Corpus::new(documents, probes, queries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{save_corpus, EXPECTED_PROBES};
    use std::collections::{BTreeSet, HashMap};

    fn tokens(text: &str) -> BTreeSet<String> {
        text.split_whitespace()
            .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
            .filter(|w| !w.is_empty())
            .collect()
    }

    fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
        a.intersection(b).count() as f64 / a.union(b).count() as f64
    }

    #[test]
    fn one_parent_builds_one_family() {
        let corpus = synth_corpus(1, 0, &SynthSpec::default()).unwrap();
        assert_eq!(corpus.documents().len(), 4);
        assert_eq!(corpus.probes().len(), 5);
        let anti = corpus.document("fw0000-anti").unwrap();
        for probe in corpus.probes() {
            assert!(!anti.body.contains(&probe.reference_answer));
            assert!(corpus
                .document("fw0000")
                .unwrap()
                .body
                .contains(&probe.reference_answer));
        }
    }

    #[test]
    fn variants_carry_fact_tokens_and_clean_responses_contain_them() {
        let corpus = synth_corpus(10, 4, &SynthSpec::default()).unwrap();
        for probe in corpus.probes() {
            for doc in corpus.family(&probe.parent_id) {
                assert_eq!(
                    doc.body.contains(&probe.reference_answer),
                    doc.variant_kind.is_positive(),
                    "{}",
                    doc.doc_id
                );
            }
        }
        for q in corpus.queries().iter().filter(|q| q.condition == Condition::Clean) {
            let probe = corpus.probe(&q.probe_id).unwrap();
            assert!(q.response.contains(&probe.reference_answer));
        }
    }

    #[test]
    fn output_is_byte_identical_across_runs() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        save_corpus(&synth_corpus(50, 11, &SynthSpec::default()).unwrap(), a.path()).unwrap();
        save_corpus(&synth_corpus(50, 11, &SynthSpec::default()).unwrap(), b.path()).unwrap();
        for file in ["documents.jsonl", "probes.jsonl", "queries.jsonl"] {
            assert_eq!(
                std::fs::read(a.path().join(file)).unwrap(),
                std::fs::read(b.path().join(file)).unwrap()
            );
        }
    }

    #[test]
    fn two_hundred_parents_satisfy_invariants_on_rescan() {
        let corpus = synth_corpus(200, 1, &SynthSpec::default()).unwrap();
        assert_eq!(corpus.documents().len(), 800);
        assert_eq!(corpus.probes().len(), 1000);
        assert!(corpus.warnings().is_empty());

        // Independent re-scan of the raw records.
        let ids: HashSet<_> = corpus.documents().iter().map(|d| &d.doc_id).collect();
        assert_eq!(ids.len(), 800);
        let kinds: HashMap<_, _> = corpus
            .documents()
            .iter()
            .map(|d| (d.doc_id.as_str(), d.variant_kind))
            .collect();
        for d in corpus.documents() {
            assert_eq!(kinds[d.parent_id.as_str()], VariantKind::Original);
        }
        let mut per_parent: HashMap<&str, usize> = HashMap::new();
        for p in corpus.probes() {
            *per_parent.entry(&p.parent_id).or_default() += 1;
        }
        assert!(per_parent.values().all(|&n| n == EXPECTED_PROBES));
        for q in corpus.queries() {
            let pos = corpus.positives(&q.query_id).unwrap();
            assert_eq!(pos.valid_doc_ids.len(), 3);
            assert!(pos
                .valid_doc_ids
                .iter()
                .all(|id| kinds[id.as_str()] != VariantKind::Anti));
        }
    }

    #[test]
    fn anti_is_lexically_closer_than_other_originals() {
        let corpus = synth_corpus(200, 2, &SynthSpec::default()).unwrap();
        let originals: Vec<_> = corpus
            .documents()
            .iter()
            .filter(|d| d.variant_kind == VariantKind::Original)
            .map(|d| (d.doc_id.clone(), tokens(&d.body)))
            .collect();
        let mut ok = 0;
        for (id, toks) in &originals {
            let anti = tokens(&corpus.document(&format!("{id}-anti")).unwrap().body);
            let own = jaccard(toks, &anti);
            let best_other = originals
                .iter()
                .filter(|(other, _)| other != id)
                .map(|(_, t)| jaccard(toks, t))
                .fold(0.0, f64::max);
            if own > best_other {
                ok += 1;
            }
        }
        assert!(ok as f64 >= 0.95 * originals.len() as f64, "{ok}/200");
    }
}
