//! Browser demo: MinHash estimates, fusion-weight sweeps and the
//! activation-patching approximation chain, each returned as JSON.

use std::collections::BTreeMap;

use pvrank::corpus::PositiveSet;
use pvrank::eval::recall_at_k;
use pvrank::fusion::{default_grid, fuse, tune_lambda, Combiner, FusionConfig};
use pvrank::lexical::{estimate_jaccard, MinHashConfig, MinHasher, ShingleSet};
use pvrank::ranking::{RankedList, Scored};
use pvrank::steering::{exact_patch_gain, fidelity_trials, first_order_gain, spearman, FidelityConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Serialize)]
pub struct MinHashView {
    pub shingles_a: usize,
    pub shingles_b: usize,
    pub exact: f64,
    pub estimate: f64,
    pub candidate_probability: f64,
}

pub fn minhash_view(a: &str, b: &str, shingle_k: usize) -> pvrank::Result<MinHashView> {
    let config = MinHashConfig {
        shingle_k,
        ..MinHashConfig::default()
    };
    let hasher = MinHasher::new(config)?;
    let sa = ShingleSet::from_text(a, shingle_k)?;
    let sb = ShingleSet::from_text(b, shingle_k)?;
    let estimate = estimate_jaccard(&hasher.signature_of_shingles(&sa)?, &hasher.signature_of_shingles(&sb)?)?;
    Ok(MinHashView {
        shingles_a: sa.len(),
        shingles_b: sb.len(),
        exact: sa.jaccard(&sb),
        estimate,
        candidate_probability: config.candidate_probability(estimate),
    })
}

#[derive(Debug, Serialize)]
pub struct SweepView {
    pub lambdas: Vec<f64>,
    pub zscore: Vec<f64>,
    pub rrf: Vec<f64>,
    pub best_combiner: Combiner,
    pub best_lambda: f64,
    pub best_recall: f64,
}

/// Synthetic queries with one positive each; both lists carry the
/// positive's signal plus independent unit Gaussian noise.
pub fn sweep_view(
    seed: u64,
    n_queries: usize,
    n_docs: usize,
    method_snr: f64,
    prior_snr: f64,
    k: usize,
) -> pvrank::Result<SweepView> {
    if n_queries == 0 || n_docs < 2 || k == 0 {
        return Err(pvrank::Error::InvalidConfig(
            "need queries, two documents and k >= 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pick = Uniform::new(0, n_docs).expect("n_docs >= 2");
    let mut method = BTreeMap::new();
    let mut prior = BTreeMap::new();
    let mut positives = BTreeMap::new();
    for q in 0..n_queries {
        let qid = format!("q{q:04}");
        let pos = pick.sample(&mut rng);
        let list = |snr: f64, rng: &mut ChaCha8Rng| {
            let entries = (0..n_docs)
                .map(|d| {
                    let noise: f64 = StandardNormal.sample(rng);
                    Scored {
                        doc_id: format!("d{d:04}"),
                        score: noise + if d == pos { snr } else { 0.0 },
                    }
                })
                .collect();
            RankedList::from_scores(&qid, "demo", entries)
        };
        method.insert(qid.clone(), list(method_snr, &mut rng));
        prior.insert(qid.clone(), list(prior_snr, &mut rng));
        positives.insert(
            qid.clone(),
            PositiveSet {
                query_id: qid,
                valid_doc_ids: [format!("d{pos:04}")].into_iter().collect(),
            },
        );
    }
    let lambdas = default_grid();
    let curve = |combiner: Combiner| -> pvrank::Result<Vec<f64>> {
        lambdas
            .iter()
            .map(|&lambda| {
                let config = FusionConfig {
                    combiner,
                    lambda,
                    ..FusionConfig::default()
                };
                let mut hits = 0usize;
                for (qid, a) in &method {
                    hits += recall_at_k(&fuse(a, &prior[qid], &config)?, &positives[qid], k)? as usize;
                }
                Ok(hits as f64 / n_queries as f64)
            })
            .collect()
    };
    let zscore = curve(Combiner::ZScore)?;
    let rrf = curve(Combiner::RRF)?;
    let tuned = tune_lambda(
        &method,
        &prior,
        &positives,
        &[Combiner::ZScore, Combiner::RRF],
        &FusionConfig::default(),
        k,
    )?;
    Ok(SweepView {
        lambdas,
        zscore,
        rrf,
        best_combiner: tuned.config.combiner,
        best_lambda: tuned.config.lambda,
        best_recall: tuned.val_recall,
    })
}

#[derive(Debug, Serialize)]
pub struct CandidateView {
    pub exact: f64,
    pub first_order: f64,
    /// `g . v` with the candidate-independent term dropped.
    pub gradient: f64,
    pub proxy: f64,
}

#[derive(Debug, Serialize)]
pub struct ChainView {
    pub alpha: f64,
    pub candidates: Vec<CandidateView>,
    pub max_rel_error: f64,
    pub spearman_exact_vs_gradient: f64,
    pub spearman_gradient_vs_proxy: f64,
}

/// One TinyLM trial: exact patched gains against their expansions.
pub fn chain_view(seed: u64, alpha: f64, n_candidates: usize) -> pvrank::Result<ChainView> {
    let config = FidelityConfig {
        n_trials: 1,
        n_candidates,
        seed,
        ..FidelityConfig::default()
    };
    let (lm, trials) = fidelity_trials(&config)?;
    let t = &trials[0];
    let mut g_sum = vec![0.0; lm.hidden()];
    for (h, &y) in t.states.iter().zip(&t.answer) {
        for (a, b) in g_sum.iter_mut().zip(pvrank::steering::exact_sensitivity(&lm, h, y)?) {
            *a += b;
        }
    }
    let mut proxy = vec![0.0; lm.hidden()];
    for &y in &t.answer {
        for (a, b) in proxy.iter_mut().zip(lm.head.row(y)) {
            *a += b;
        }
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut candidates = Vec::new();
    for v in &t.candidates {
        candidates.push(CandidateView {
            exact: exact_patch_gain(&lm, &t.states, &t.answer, v, alpha)?,
            first_order: first_order_gain(&lm, &t.states, &t.answer, v, alpha)?,
            gradient: dot(&g_sum, v),
            proxy: dot(&proxy, v),
        });
    }
    let col = |f: fn(&CandidateView) -> f64| candidates.iter().map(f).collect::<Vec<_>>();
    let exact = col(|c| c.exact);
    let gradient = col(|c| c.gradient);
    Ok(ChainView {
        alpha,
        max_rel_error: candidates
            .iter()
            .map(|c| (c.exact - c.first_order).abs() / (c.exact.abs() + 1e-12))
            .fold(0.0, f64::max),
        spearman_exact_vs_gradient: spearman(&exact, &gradient),
        spearman_gradient_vs_proxy: spearman(&gradient, &col(|c| c.proxy)),
        candidates,
    })
}

fn to_js<T: Serialize>(r: pvrank::Result<T>) -> Result<String, JsValue> {
    let v = r.map_err(|e| JsValue::from_str(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsValue::from_str(&e.to_string()))
}

#[wasm_bindgen]
pub fn minhash_compare(a: &str, b: &str, shingle_k: u32) -> Result<String, JsValue> {
    to_js(minhash_view(a, b, shingle_k as usize))
}

#[wasm_bindgen]
pub fn fusion_sweep(
    seed: u32,
    n_queries: u32,
    n_docs: u32,
    method_snr: f64,
    prior_snr: f64,
    k: u32,
) -> Result<String, JsValue> {
    to_js(sweep_view(
        seed as u64,
        n_queries as usize,
        n_docs as usize,
        method_snr,
        prior_snr,
        k as usize,
    ))
}

#[wasm_bindgen]
pub fn taylor_chain(seed: u32, alpha: f64, n_candidates: u32) -> Result<String, JsValue> {
    to_js(chain_view(seed as u64, alpha, n_candidates as usize))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_texts_estimate_one() {
        let v = minhash_view("a b c d e f", "a b c d e f", 2).unwrap();
        assert_eq!(v.exact, 1.0);
        assert_eq!(v.estimate, 1.0);
        assert!(v.candidate_probability > 0.999);
    }

    #[test]
    fn sweep_follows_the_stronger_list() {
        let v = sweep_view(1, 60, 40, 0.0, 6.0, 5).unwrap();
        assert_eq!(v.lambdas.len(), 21);
        assert!(v.zscore[20] > v.zscore[0]);
        assert!(v.best_recall >= v.zscore[20] && v.best_lambda > 0.0);
        let w = sweep_view(1, 60, 40, 6.0, 0.0, 5).unwrap();
        assert!(w.best_lambda < 0.5);
    }

    #[test]
    fn chain_is_accurate_at_small_alpha() {
        let v = chain_view(4, 1e-4, 8).unwrap();
        assert_eq!(v.candidates.len(), 8);
        assert!(v.max_rel_error < 5e-3);
        assert!(v.spearman_exact_vs_gradient > 0.99);
    }

    #[test]
    fn bad_inputs_are_errors() {
        assert!(sweep_view(0, 0, 10, 1.0, 1.0, 5).is_err());
        assert!(chain_view(0, 2.0, 4).is_err());
        assert!(minhash_view("", "x", 1).is_err());
    }
}
