//! Activation-steering scores: document directions, the LM-head-row
//! response proxy, chunk-max document scoring, and a tiny softmax language
//! model on which the exact patched gain, its first-order expansion and
//! the proxy can be compared.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{l2_norm, normalized, FeatureBundle, FeatureKind};
use crate::ranking::{RankedList, Scored};

/// Mask-weighted mean of `states`, L2-normalized.
pub fn doc_direction(states: &[&[f32]], mask: &[f32]) -> Result<Vec<f32>> {
    let dim = states.first().map_or(0, |s| s.len());
    if states.len() != mask.len() {
        return Err(Error::DimMismatch {
            expected: states.len(),
            found: mask.len(),
        });
    }
    let mut acc = vec![0.0f64; dim];
    let mut weight = 0.0f64;
    for (s, &m) in states.iter().zip(mask) {
        if s.len() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                found: s.len(),
            });
        }
        if m == 0.0 {
            continue;
        }
        weight += m as f64;
        for (a, &x) in acc.iter_mut().zip(s.iter()) {
            *a += m as f64 * x as f64;
        }
    }
    if weight == 0.0 {
        return Err(Error::AllMasked);
    }
    let mean: Vec<f32> = acc.iter().map(|a| (a / weight) as f32).collect();
    normalized(&mean).ok_or_else(|| Error::ZeroVector("mean hidden state".into()))
}

/// Unit-norm directions per document, one or several (chunks) each.
#[derive(Debug, Clone, PartialEq)]
pub struct DocDirectionStore {
    dim: usize,
    layer_label: String,
    dirs: BTreeMap<String, Vec<Vec<f32>>>,
}

impl DocDirectionStore {
    pub fn new(dim: usize, layer_label: impl Into<String>) -> Self {
        Self {
            dim,
            layer_label: layer_label.into(),
            dirs: BTreeMap::new(),
        }
    }

    /// Normalizes and stores the directions of one document.
    pub fn insert(&mut self, doc_id: impl Into<String>, vectors: Vec<Vec<f32>>) -> Result<()> {
        let doc_id = doc_id.into();
        if vectors.is_empty() {
            return Err(Error::MissingItem(vec![doc_id]));
        }
        let mut unit = Vec::with_capacity(vectors.len());
        for v in vectors {
            if v.len() != self.dim {
                return Err(Error::DimMismatch {
                    expected: self.dim,
                    found: v.len(),
                });
            }
            unit.push(normalized(&v).ok_or_else(|| Error::ZeroVector(doc_id.clone()))?);
        }
        self.dirs.insert(doc_id, unit);
        Ok(())
    }

    pub fn from_bundle(bundle: &FeatureBundle) -> Result<Self> {
        if !matches!(bundle.kind(), FeatureKind::DocDirection | FeatureKind::ChunkDirections) {
            return Err(Error::UnknownKind(bundle.kind().code()));
        }
        let mut store = Self::new(bundle.dim(), bundle.layer_label.clone().unwrap_or_default());
        for (id, vectors) in bundle.iter() {
            store.insert(id, vectors.to_vec())?;
        }
        Ok(store)
    }

    pub fn to_bundle(&self) -> Result<FeatureBundle> {
        FeatureBundle::new(
            FeatureKind::ChunkDirections,
            self.dim,
            self.dirs.clone(),
            "doc-directions",
            Some(self.layer_label.clone()),
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.dirs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dirs.is_empty()
    }

    pub fn directions(&self, doc_id: &str) -> Option<&[Vec<f32>]> {
        self.dirs.get(doc_id).map(Vec::as_slice)
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.dirs.keys().map(String::as_str)
    }
}

/// Sum of LM-head rows over the generated answer tokens, stored
/// normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseProxy {
    pub query_id: String,
    pub g: Vec<f32>,
}

impl ResponseProxy {
    pub fn from_vector(query_id: impl Into<String>, g: &[f32]) -> Result<Self> {
        let query_id = query_id.into();
        let g = normalized(g).ok_or_else(|| Error::ZeroVector(query_id.clone()))?;
        Ok(Self { query_id, g })
    }
}

/// Raw row-sum `sum_i W[y_i]`.
pub fn head_row_sum(tokens: &[usize], head: ArrayView2<'_, f32>) -> Result<Vec<f32>> {
    if tokens.is_empty() {
        return Err(Error::EmptyText);
    }
    let mut acc = vec![0.0f64; head.ncols()];
    for &t in tokens {
        if t >= head.nrows() {
            return Err(Error::TokenOutOfRange {
                token: t,
                vocab: head.nrows(),
            });
        }
        for (a, &w) in acc.iter_mut().zip(head.row(t)) {
            *a += w as f64;
        }
    }
    Ok(acc.into_iter().map(|a| a as f32).collect())
}

pub fn response_proxy(query_id: &str, tokens: &[usize], head: ArrayView2<'_, f32>) -> Result<ResponseProxy> {
    ResponseProxy::from_vector(query_id, &head_row_sum(tokens, head)?)
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let n = l2_norm(a) * l2_norm(b);
    if n == 0.0 {
        0.0
    } else {
        dot / n
    }
}

/// Cosine of the proxy with the document direction, or the maximum over
/// the document's chunks.
pub fn activation_score(proxy: &[f32], store: &DocDirectionStore, doc_id: &str) -> Result<f64> {
    if proxy.len() != store.dim {
        return Err(Error::DimMismatch {
            expected: store.dim,
            found: proxy.len(),
        });
    }
    let dirs = store
        .directions(doc_id)
        .ok_or_else(|| Error::MissingItem(vec![doc_id.to_string()]))?;
    Ok(dirs.iter().map(|d| cosine(proxy, d)).fold(f64::NEG_INFINITY, f64::max))
}

/// Ranks every stored document for one response.
pub fn steer_rank(proxy: &ResponseProxy, store: &DocDirectionStore, method: &str) -> Result<RankedList> {
    let entries = store
        .doc_ids()
        .map(|id| {
            Ok(Scored {
                doc_id: id.to_string(),
                score: activation_score(&proxy.g, store, id)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RankedList::from_scores(&proxy.query_id, method, entries))
}

/// Softmax language-model head over a seeded random affine stand-in for
/// the transformer body.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyLM {
    /// `[vocab, hidden]`
    pub head: Array2<f64>,
    ctx_map: Array2<f64>,
    ctx_bias: Array1<f64>,
}

impl TinyLM {
    pub const DEFAULT_VOCAB: usize = 50;
    pub const DEFAULT_HIDDEN: usize = 16;
    pub const DEFAULT_HEAD_SCALE: f64 = 3.0;

    pub fn new(vocab: usize, hidden: usize, seed: u64) -> Self {
        Self::with_head_scale(vocab, hidden, Self::DEFAULT_HEAD_SCALE, seed)
    }

    /// Head entries are N(0, scale^2 / hidden); the context map is
    /// N(0, 1 / hidden) with a small bias.
    pub fn with_head_scale(vocab: usize, hidden: usize, head_scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sd = 1.0 / (hidden as f64).sqrt();
        let mut normal = |scale: f64| scale * Distribution::<f64>::sample(&StandardNormal, &mut rng);
        let head = Array2::from_shape_simple_fn((vocab, hidden), || normal(head_scale * sd));
        let ctx_map = Array2::from_shape_simple_fn((hidden, hidden), || normal(sd));
        let ctx_bias = Array1::from_shape_simple_fn(hidden, || normal(0.1));
        Self {
            head,
            ctx_map,
            ctx_bias,
        }
    }

    pub fn default_seeded(seed: u64) -> Self {
        Self::new(Self::DEFAULT_VOCAB, Self::DEFAULT_HIDDEN, seed)
    }

    pub fn vocab(&self) -> usize {
        self.head.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.head.ncols()
    }

    /// Hidden state produced for a context embedding.
    pub fn hidden_state(&self, context: &[f64]) -> Vec<f64> {
        (self.ctx_map.dot(&ArrayView1::from(context)) + &self.ctx_bias).to_vec()
    }

    pub fn probs(&self, h: &[f64]) -> Vec<f64> {
        let z = self.head.dot(&ArrayView1::from(h));
        let m = z.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let e: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    pub fn log_prob(&self, h: &[f64], y: usize) -> Result<f64> {
        self.check_token(y)?;
        let z = self.head.dot(&ArrayView1::from(h));
        let m = z.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        Ok(z[y] - lse)
    }

    fn check_token(&self, y: usize) -> Result<()> {
        if y >= self.vocab() {
            return Err(Error::TokenOutOfRange {
                token: y,
                vocab: self.vocab(),
            });
        }
        Ok(())
    }
}

/// `h + alpha (v - h)`, exact when `v == h`.
fn patch(h: &[f64], v: &[f64], alpha: f64) -> Vec<f64> {
    h.iter().zip(v).map(|(&a, &b)| a + alpha * (b - a)).collect()
}

/// Exact change in answer log-likelihood when every context state is
/// convexly mixed toward `v` with weight `alpha`.
pub fn exact_patch_gain(lm: &TinyLM, states: &[Vec<f64>], answer: &[usize], v: &[f64], alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidConfig(format!("alpha {alpha} not in (0, 1]")));
    }
    if states.len() != answer.len() {
        return Err(Error::DimMismatch {
            expected: answer.len(),
            found: states.len(),
        });
    }
    let mut total = 0.0;
    for (h, &y) in states.iter().zip(answer) {
        total += lm.log_prob(&patch(h, v, alpha), y)? - lm.log_prob(h, y)?;
    }
    Ok(total)
}

/// Gradient of `log p(y | h)` with respect to `h`: `W_y - E_p[W_w]`.
pub fn exact_sensitivity(lm: &TinyLM, h: &[f64], y: usize) -> Result<Vec<f64>> {
    lm.check_token(y)?;
    let p = Array1::from(lm.probs(h));
    let expected = lm.head.t().dot(&p);
    Ok((&lm.head.row(y) - &expected).to_vec())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `alpha * sum_i g_i . (v - h_i)`.
pub fn first_order_gain(lm: &TinyLM, states: &[Vec<f64>], answer: &[usize], v: &[f64], alpha: f64) -> Result<f64> {
    let mut total = 0.0;
    for (h, &y) in states.iter().zip(answer) {
        let g = exact_sensitivity(lm, h, y)?;
        let d: Vec<f64> = v.iter().zip(h).map(|(a, b)| a - b).collect();
        total += dot(&g, &d);
    }
    Ok(alpha * total)
}

/// Average ranks, ties sharing the mean of their positions.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; 1.0 when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return 1.0;
    }
    cov / (va * vb).sqrt()
}

fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..x.len() {
        if x[i] > x[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FidelityConfig {
    pub vocab: usize,
    pub hidden: usize,
    pub head_scale: f64,
    pub n_trials: usize,
    pub n_candidates: usize,
    pub answer_len: usize,
    pub alphas: Vec<f64>,
    pub seed: u64,
}

impl Default for FidelityConfig {
    fn default() -> Self {
        Self {
            vocab: TinyLM::DEFAULT_VOCAB,
            hidden: TinyLM::DEFAULT_HIDDEN,
            head_scale: TinyLM::DEFAULT_HEAD_SCALE,
            n_trials: 500,
            n_candidates: 8,
            answer_len: 20,
            alphas: vec![1e-3, 1e-4],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaFidelity {
    pub alpha: f64,
    /// `|exact - first order| / (|exact| + 1e-12)` over every
    /// (trial, candidate) pair.
    pub max_rel_error: f64,
    pub median_rel_error: f64,
    /// Mean over trials of the Spearman correlation across candidates.
    pub spearman_exact_vs_gradient: f64,
    pub min_spearman_exact_vs_gradient: f64,
    pub top1_exact_vs_gradient: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub config: FidelityConfig,
    pub per_alpha: Vec<AlphaFidelity>,
    /// Mean Spearman correlation of the full first-order gain with `g . v`;
    /// the dropped `-g . h` term is document-independent.
    pub spearman_first_order_vs_gradient: f64,
    pub spearman_gradient_vs_proxy: f64,
    pub top1_gradient_vs_proxy: f64,
    /// Largest `||g - fd||_inf / ||g||_inf` of the sensitivity against
    /// central differences.
    pub sensitivity_fd_rel_error: f64,
}

/// Central-difference gradient of `log p(y | h)`.
pub fn finite_difference_sensitivity(lm: &TinyLM, h: &[f64], y: usize, step: f64) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(h.len());
    let mut hp = h.to_vec();
    for i in 0..h.len() {
        hp[i] = h[i] + step;
        let up = lm.log_prob(&hp, y)?;
        hp[i] = h[i] - step;
        let down = lm.log_prob(&hp, y)?;
        hp[i] = h[i];
        out.push((up - down) / (2.0 * step));
    }
    Ok(out)
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, &b| a.max(b.abs()))
}

/// Answer-token hidden states, answer tokens and unit candidate
/// directions of one fidelity trial.
#[derive(Debug, Clone, PartialEq)]
pub struct FidelityTrial {
    pub states: Vec<Vec<f64>>,
    pub answer: Vec<usize>,
    pub candidates: Vec<Vec<f64>>,
}

fn sample_trial(lm: &TinyLM, config: &FidelityConfig, rng: &mut ChaCha8Rng) -> FidelityTrial {
    let d = lm.hidden();
    let mut gauss = |n: usize| -> Vec<f64> {
        (0..n)
            .map(|_| Distribution::<f64>::sample(&StandardNormal, rng))
            .collect()
    };
    let states = (0..config.answer_len).map(|_| lm.hidden_state(&gauss(d))).collect();
    let candidates = (0..config.n_candidates)
        .map(|_| {
            let v = gauss(d);
            let n = dot(&v, &v).sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect();
    let answer = (0..config.answer_len)
        .map(|_| rng.random_range(0..lm.vocab()))
        .collect();
    FidelityTrial {
        states,
        answer,
        candidates,
    }
}

/// The model and seeded trials behind [`proxy_fidelity_report`].
pub fn fidelity_trials(config: &FidelityConfig) -> Result<(TinyLM, Vec<FidelityTrial>)> {
    if config.n_trials == 0 || config.n_candidates == 0 || config.answer_len == 0 {
        return Err(Error::InvalidConfig(
            "fidelity trials, candidates and answer length must be positive".into(),
        ));
    }
    let lm = TinyLM::with_head_scale(config.vocab, config.hidden, config.head_scale, config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let trials = (0..config.n_trials)
        .map(|_| sample_trial(&lm, config, &mut rng))
        .collect();
    Ok((lm, trials))
}

/// Compares exact patched gains, their first-order expansion and the
/// LM-head proxy over seeded random trials.
pub fn proxy_fidelity_report(config: &FidelityConfig) -> Result<FidelityReport> {
    let (lm, trials) = fidelity_trials(config)?;

    let mut sens_err: f64 = 0.0;
    let mut grad_scores = Vec::with_capacity(trials.len());
    let mut proxy_scores = Vec::with_capacity(trials.len());
    let mut first_full = Vec::with_capacity(trials.len());
    for t in &trials {
        let mut g_sum = vec![0.0; lm.hidden()];
        let mut const_term = 0.0;
        for (h, &y) in t.states.iter().zip(&t.answer) {
            let g = exact_sensitivity(&lm, h, y)?;
            let fd = finite_difference_sensitivity(&lm, h, y, 1e-5)?;
            let diff: Vec<f64> = g.iter().zip(&fd).map(|(a, b)| a - b).collect();
            sens_err = sens_err.max(inf_norm(&diff) / inf_norm(&g).max(f64::MIN_POSITIVE));
            const_term += dot(&g, h);
            for (a, b) in g_sum.iter_mut().zip(&g) {
                *a += b;
            }
        }
        let mut proxy = vec![0.0; lm.hidden()];
        for &y in &t.answer {
            for (a, b) in proxy.iter_mut().zip(lm.head.row(y)) {
                *a += b;
            }
        }
        let grad: Vec<f64> = t.candidates.iter().map(|v| dot(&g_sum, v)).collect();
        first_full.push(grad.iter().map(|s| s - const_term).collect::<Vec<_>>());
        proxy_scores.push(t.candidates.iter().map(|v| dot(&proxy, v)).collect::<Vec<_>>());
        grad_scores.push(grad);
    }

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut per_alpha = Vec::new();
    for &alpha in &config.alphas {
        let mut rel = Vec::new();
        let mut corr = Vec::new();
        let mut top1 = 0usize;
        for (t, grad) in trials.iter().zip(&grad_scores) {
            let mut exact = Vec::with_capacity(t.candidates.len());
            for v in &t.candidates {
                let e = exact_patch_gain(&lm, &t.states, &t.answer, v, alpha)?;
                let f = first_order_gain(&lm, &t.states, &t.answer, v, alpha)?;
                rel.push((e - f).abs() / (e.abs() + 1e-12));
                exact.push(e);
            }
            corr.push(spearman(&exact, grad));
            top1 += (argmax(&exact) == argmax(grad)) as usize;
        }
        rel.sort_by(f64::total_cmp);
        per_alpha.push(AlphaFidelity {
            alpha,
            max_rel_error: *rel.last().expect("non-empty"),
            median_rel_error: rel[rel.len() / 2],
            spearman_exact_vs_gradient: mean(&corr),
            min_spearman_exact_vs_gradient: corr.iter().copied().fold(f64::INFINITY, f64::min),
            top1_exact_vs_gradient: top1 as f64 / trials.len() as f64,
        });
    }
    let pair_corr = |a: &[Vec<f64>], b: &[Vec<f64>]| {
        let c: Vec<f64> = a.iter().zip(b).map(|(x, y)| spearman(x, y)).collect();
        mean(&c)
    };
    let top1_proxy = grad_scores
        .iter()
        .zip(&proxy_scores)
        .filter(|(g, p)| argmax(g) == argmax(p))
        .count();
    Ok(FidelityReport {
        config: config.clone(),
        per_alpha,
        spearman_first_order_vs_gradient: pair_corr(&first_full, &grad_scores),
        spearman_gradient_vs_proxy: pair_corr(&grad_scores, &proxy_scores),
        top1_gradient_vs_proxy: top1_proxy as f64 / trials.len() as f64,
        sensitivity_fd_rel_error: sens_err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn single_state_direction() {
        let d = doc_direction(&[&[3.0, 4.0]], &[1.0]).unwrap();
        assert_relative_eq!(d[0], 0.6, epsilon = 1e-7);
        assert_relative_eq!(d[1], 0.8, epsilon = 1e-7);
        let same = doc_direction(&[&[1.0, 2.0], &[1.0, 2.0]], &[1.0, 1.0]).unwrap();
        let one = doc_direction(&[&[1.0, 2.0]], &[1.0]).unwrap();
        assert_eq!(same, one);
    }

    #[test]
    fn mask_selects_surviving_states() {
        let states: Vec<Vec<f32>> = vec![
            vec![1.0, 0.0, 2.0],
            vec![9.0, 9.0, 9.0],
            vec![0.0, 3.0, 1.0],
            vec![-4.0, 5.0, 0.0],
        ];
        let views: Vec<&[f32]> = states.iter().map(Vec::as_slice).collect();
        let got = doc_direction(&views, &[1.0, 0.0, 1.0, 0.0]).unwrap();
        let mean = [0.5f32, 1.5, 1.5];
        let n = (0.25f32 + 2.25 + 2.25).sqrt();
        for (g, m) in got.iter().zip(mean) {
            assert_relative_eq!(*g, m / n, epsilon = 1e-6);
        }
        assert!(matches!(doc_direction(&views, &[0.0; 4]), Err(Error::AllMasked)));
    }

    #[test]
    fn proxy_gathers_head_rows() {
        let head = Array2::from_shape_fn((6, 3), |(i, j)| (i * 3 + j) as f32 - 4.0);
        assert_eq!(head_row_sum(&[2], head.view()).unwrap(), head.row(2).to_vec());
        let twice: Vec<f32> = head.row(4).iter().map(|v| 2.0 * v).collect();
        assert_eq!(head_row_sum(&[4, 4], head.view()).unwrap(), twice);
        let tokens = [0, 5, 3, 3, 1];
        let mut brute = [0.0f32; 3];
        for &t in &tokens {
            for j in 0..3 {
                brute[j] += head[[t, j]];
            }
        }
        assert_eq!(head_row_sum(&tokens, head.view()).unwrap(), brute);
        assert!(matches!(
            head_row_sum(&[6], head.view()),
            Err(Error::TokenOutOfRange { token: 6, vocab: 6 })
        ));
    }

    fn store_with(docs: &[(&str, Vec<Vec<f32>>)]) -> DocDirectionStore {
        let mut s = DocDirectionStore::new(docs[0].1[0].len(), "final");
        for (id, v) in docs {
            s.insert(*id, v.clone()).unwrap();
        }
        s
    }

    #[test]
    fn chunk_max_rule() {
        let s = store_with(&[
            ("a", vec![vec![1.0, 0.0]]),
            (
                "b",
                vec![vec![0.2, (1.0f32 - 0.04).sqrt()], vec![0.7, (1.0f32 - 0.49).sqrt()]],
            ),
        ]);
        assert_relative_eq!(activation_score(&[2.0, 0.0], &s, "a").unwrap(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(activation_score(&[1.0, 0.0], &s, "b").unwrap(), 0.7, epsilon = 1e-6);
        assert_eq!(
            activation_score(&[1.0, 0.0], &s, "a").unwrap(),
            activation_score(&[7.5, 0.0], &s, "a").unwrap()
        );
        assert!(matches!(
            activation_score(&[1.0], &s, "a"),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn steer_rank_matches_cosine_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let docs: Vec<(String, Vec<f32>)> = (0..100)
            .map(|i| {
                (
                    format!("d{i:03}"),
                    (0..8).map(|_| rng.random_range(-1.0..1.0)).collect(),
                )
            })
            .collect();
        let mut s = DocDirectionStore::new(8, "final");
        for (id, v) in &docs {
            s.insert(id.clone(), vec![v.clone()]).unwrap();
        }
        let q: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let proxy = ResponseProxy::from_vector("q", &q).unwrap();
        let got: Vec<String> = steer_rank(&proxy, &s, "steer")
            .unwrap()
            .ids()
            .map(str::to_string)
            .collect();
        let mut brute: Vec<(f64, String)> = docs.iter().map(|(id, v)| (cosine(&q, v), id.clone())).collect();
        brute.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        assert_eq!(got, brute.into_iter().map(|(_, id)| id).collect::<Vec<_>>());
    }

    #[test]
    fn store_round_trips_through_bundle() {
        let s = store_with(&[("a", vec![vec![3.0, 4.0], vec![0.0, 1.0]]), ("b", vec![vec![1.0, 1.0]])]);
        let back = DocDirectionStore::from_bundle(&s.to_bundle().unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn softmax_normalizes() {
        let lm = TinyLM::default_seeded(1);
        let h = lm.hidden_state(&[0.3; 16]);
        let p = lm.probs(&h);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn patch_gain_edge_cases() {
        let lm = TinyLM::default_seeded(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let states: Vec<Vec<f64>> = (0..4)
            .map(|_| lm.hidden_state(&(0..16).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()))
            .collect();
        let answer = [1, 7, 7, 30];
        let v = normalized_f64(&states[0]);
        assert!(exact_patch_gain(&lm, &states, &answer, &v, 1e-12).unwrap().abs() <= 1e-8);
        let fixed = vec![v.clone(); 4];
        for alpha in [1e-3, 0.5, 1.0] {
            assert_eq!(exact_patch_gain(&lm, &fixed, &answer, &v, alpha).unwrap(), 0.0);
        }
        assert!(exact_patch_gain(&lm, &states, &answer, &v, 0.0).is_err());
    }

    fn normalized_f64(v: &[f64]) -> Vec<f64> {
        let n = dot(v, v).sqrt();
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn sensitivity_limits() {
        let mut lm = TinyLM::default_seeded(5);
        let row = lm.head.row(0).to_owned();
        for mut r in lm.head.rows_mut() {
            r.assign(&row);
        }
        let g = exact_sensitivity(&lm, &[0.5; 16], 3).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-12));

        let mut lm = TinyLM::default_seeded(5);
        let h: Vec<f64> = lm.head.row(9).to_vec();
        lm.head.row_mut(9).mapv_inplace(|x| x * 1e3);
        let g = exact_sensitivity(&lm, &h, 9).unwrap();
        assert!(lm.probs(&h)[9] > 1.0 - 1e-9);
        assert!(inf_norm(&g) < 1e-6, "{g:?}");
        assert!(matches!(
            exact_sensitivity(&lm, &h, 50),
            Err(Error::TokenOutOfRange { .. })
        ));
    }

    #[test]
    fn sensitivity_matches_finite_differences() {
        let lm = TinyLM::default_seeded(6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let h = lm.hidden_state(&(0..16).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<_>>());
            let y = rng.random_range(0..50);
            let g = exact_sensitivity(&lm, &h, y).unwrap();
            let fd = finite_difference_sensitivity(&lm, &h, y, 1e-5).unwrap();
            let diff: Vec<f64> = g.iter().zip(&fd).map(|(a, b)| a - b).collect();
            assert!(inf_norm(&diff) / inf_norm(&g) < 1e-6);
        }
    }

    #[test]
    fn spearman_basics() {
        assert_relative_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), 1.0);
        assert_relative_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), -1.0);
        // Ties share average ranks: ranks (1.5, 1.5, 3) vs (1, 2, 3).
        assert_relative_eq!(
            spearman(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]),
            0.75f64.sqrt(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn scaled_copies_of_one_direction_agree_everywhere() {
        let lm = TinyLM::default_seeded(8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let states: Vec<Vec<f64>> = (0..3)
            .map(|_| lm.hidden_state(&(0..16).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()))
            .collect();
        let answer = [4, 8, 15];
        let base = normalized_f64(&(0..16).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>());
        let scales = [0.5, 2.0, 1.0, 3.0];
        let mut proxy = vec![0.0; 16];
        for &y in &answer {
            for (a, b) in proxy.iter_mut().zip(lm.head.row(y)) {
                *a += b;
            }
        }
        let mut g_sum = vec![0.0; 16];
        for (h, &y) in states.iter().zip(&answer) {
            for (a, b) in g_sum.iter_mut().zip(exact_sensitivity(&lm, h, y).unwrap()) {
                *a += b;
            }
        }
        let cos = |a: &[f64], b: &[f64]| dot(a, b) / (dot(a, a) * dot(b, b)).sqrt();
        for target in [&g_sum, &proxy] {
            let scores: Vec<f64> = scales
                .iter()
                .map(|s| cos(target, &base.iter().map(|x| x * s).collect::<Vec<_>>()))
                .collect();
            assert!(scores.iter().all(|&x| (x - scores[0]).abs() < 1e-12), "{scores:?}");
        }
    }

    #[test]
    fn small_fidelity_report() {
        let config = FidelityConfig {
            n_trials: 20,
            ..FidelityConfig::default()
        };
        let r = proxy_fidelity_report(&config).unwrap();
        assert_eq!(r.per_alpha.len(), 2);
        assert!(r.per_alpha[0].max_rel_error <= 0.05);
        assert!(r.per_alpha[1].max_rel_error <= 0.005);
        assert!(r.per_alpha[0].spearman_exact_vs_gradient >= 0.99);
        assert_relative_eq!(r.spearman_first_order_vs_gradient, 1.0);
        assert!(r.sensitivity_fd_rel_error < 1e-6);
        assert_eq!(r, proxy_fidelity_report(&config).unwrap());
    }
}
