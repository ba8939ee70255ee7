//! Supervised provenance scorer: a shared two-layer projection network
//! scoring response/document compatibility by temperature-scaled cosine,
//! trained with InfoNCE over in-batch, mined and anti-document negatives.
//!
//! The network is `f(x) = W2 · drop(relu(W1 x + b1)) + b2`, followed by L2
//! normalization. Setting both biases to zero gives the bias-free form.
//! Forward and backward passes are written out by hand and are generic over
//! the float type, so the f32 training path has an f64 shadow for gradient
//! checks.

mod checkpoint;
mod train;

use std::fmt::Debug;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::corpus::PositiveSet;
use crate::error::{Error, Result};
use crate::ranking::{RankedList, Scored};
use crate::retrieval::VectorIndex;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointMeta};
pub use train::{train, EpochLog, TrainConfig, TrainingLog};

/// Pre-normalization norms below this are treated as degenerate.
pub const DEGENERATE_NORM: f64 = 1e-12;

pub trait Real:
    Float + FromPrimitive + NumAssign + LinalgScalar + ScalarOperand + Debug + Send + Sync + 'static
{
}

impl<T> Real for T where
    T: Float + FromPrimitive + NumAssign + LinalgScalar + ScalarOperand + Debug + Send + Sync + 'static
{
}

fn cast<F: Real>(x: f64) -> F {
    F::from_f64(x).expect("f64 converts to any Real")
}

/// Layer sizes and scoring hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScorerArch {
    pub hidden: usize,
    pub proj: usize,
    pub tau: f64,
    pub dropout_p: f64,
}

impl Default for ScorerArch {
    fn default() -> Self {
        Self {
            hidden: 2048,
            proj: 512,
            tau: 0.05,
            dropout_p: 0.1,
        }
    }
}

/// Network weights plus temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<F> {
    /// `[hidden, input_dim]`
    pub w1: Array2<F>,
    pub b1: Array1<F>,
    /// `[proj, hidden]`
    pub w2: Array2<F>,
    pub b2: Array1<F>,
    pub tau: F,
    pub dropout_p: F,
}

pub type ScorerParams = Params<f32>;

/// Gradients with the same shapes as [`Params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<F> {
    pub w1: Array2<F>,
    pub b1: Array1<F>,
    pub w2: Array2<F>,
    pub b2: Array1<F>,
}

/// Seeded source of dropout masks.
#[derive(Debug, Clone)]
pub struct DropoutStream(ChaCha8Rng);

impl DropoutStream {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Inverted-dropout mask: entries are 0 or `1 / (1 - p)`.
    fn mask<F: Real>(&mut self, rows: usize, cols: usize, p: F) -> Array2<F> {
        let p = p.to_f64().unwrap_or(0.0);
        let keep = cast::<F>(1.0 / (1.0 - p));
        Array2::from_shape_simple_fn(
            (rows, cols),
            || {
                if self.0.random::<f64>() < p {
                    F::zero()
                } else {
                    keep
                }
            },
        )
    }
}

/// Intermediate values of a batch forward pass.
pub struct Forward<F> {
    x: Array2<F>,
    a1: Array2<F>,
    mask: Option<Array2<F>>,
    hd: Array2<F>,
    norms: Array1<F>,
    /// Unit-norm projections, one row per input.
    pub z: Array2<F>,
}

/// One InfoNCE term: an anchor row scored against a positive (first) and
/// negatives, all given as row indices of the batch input matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    pub anchor: usize,
    pub candidates: Vec<usize>,
}

impl<F: Real> Params<F> {
    /// PyTorch-style uniform init with bound `1/sqrt(fan_in)`.
    pub fn init(input_dim: usize, arch: &ScorerArch, seed: u64) -> Result<Self> {
        if input_dim == 0 || arch.hidden == 0 || arch.proj == 0 {
            return Err(Error::InvalidConfig("layer sizes must be positive".into()));
        }
        if !(arch.tau > 0.0) || !(0.0..1.0).contains(&arch.dropout_p) {
            return Err(Error::InvalidConfig(format!(
                "tau must be positive and dropout in [0, 1): tau {}, p {}",
                arch.tau, arch.dropout_p
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |rows: usize, cols: usize, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            Array2::from_shape_simple_fn((rows, cols), || cast::<F>(dist.sample(&mut rng)))
        };
        let w1 = uniform(arch.hidden, input_dim, input_dim);
        let b1 = uniform(1, arch.hidden, input_dim).row(0).to_owned();
        let w2 = uniform(arch.proj, arch.hidden, arch.hidden);
        let b2 = uniform(1, arch.proj, arch.hidden).row(0).to_owned();
        Ok(Self {
            w1,
            b1,
            w2,
            b2,
            tau: cast(arch.tau),
            dropout_p: cast(arch.dropout_p),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.nrows()
    }

    pub fn proj(&self) -> usize {
        self.w2.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let shapes_ok =
            self.b1.len() == self.w1.nrows() && self.w2.ncols() == self.w1.nrows() && self.b2.len() == self.w2.nrows();
        if !shapes_ok {
            return Err(Error::InvalidConfig("inconsistent parameter shapes".into()));
        }
        if !(self.tau > F::zero()) {
            return Err(Error::InvalidConfig("tau must be positive".into()));
        }
        let finite = self
            .w1
            .iter()
            .chain(&self.b1)
            .chain(&self.w2)
            .chain(&self.b2)
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidConfig("non-finite parameters".into()));
        }
        Ok(())
    }

    pub fn map<G: Real>(&self, f: impl Fn(F) -> G + Copy) -> Params<G> {
        Params {
            w1: self.w1.mapv(f),
            b1: self.b1.mapv(f),
            w2: self.w2.mapv(f),
            b2: self.b2.mapv(f),
            tau: f(self.tau),
            dropout_p: f(self.dropout_p),
        }
    }

    /// Batch forward pass. Dropout is applied only when a stream is given.
    pub fn forward(&self, x: ArrayView2<'_, F>, dropout: Option<&mut DropoutStream>) -> Result<Forward<F>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimMismatch {
                expected: self.input_dim(),
                found: x.ncols(),
            });
        }
        let a1 = x.dot(&self.w1.t()) + &self.b1;
        let h = a1.mapv(|v| v.max(F::zero()));
        let mask = match dropout {
            Some(stream) if self.dropout_p > F::zero() => Some(stream.mask(h.nrows(), h.ncols(), self.dropout_p)),
            _ => None,
        };
        let hd = match &mask {
            Some(m) => &h * m,
            None => h,
        };
        let f = hd.dot(&self.w2.t()) + &self.b2;
        let tiny = cast::<F>(DEGENERATE_NORM);
        let mut norms = Array1::zeros(f.nrows());
        let mut z = f;
        for (i, mut row) in z.axis_iter_mut(Axis(0)).enumerate() {
            let n = row.dot(&row).sqrt();
            norms[i] = n;
            if n < tiny {
                log::warn!("degenerate projection norm {n:?}; using canonical axis");
                row.fill(F::zero());
                row[0] = F::one();
            } else {
                row /= n;
            }
        }
        Ok(Forward {
            x: x.to_owned(),
            a1,
            mask,
            hd,
            norms,
            z,
        })
    }

    /// Unit-norm projection of one input vector.
    pub fn project(&self, x: &[F], dropout: Option<&mut DropoutStream>) -> Result<Array1<F>> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("one row");
        Ok(self.forward(view, dropout)?.z.row(0).to_owned())
    }

    /// Unit-norm projections of a matrix of inputs (inference mode).
    pub fn project_rows(&self, x: ArrayView2<'_, F>) -> Result<Array2<F>> {
        Ok(self.forward(x, None)?.z)
    }

    /// `<f(x_r), f(x_D)> / tau` at inference.
    pub fn score(&self, x_r: &[F], x_d: &[F]) -> Result<F> {
        let zr = self.project(x_r, None)?;
        let zd = self.project(x_d, None)?;
        Ok(zr.dot(&zd) / self.tau)
    }

    /// Backward pass from the gradient with respect to the unit
    /// projections.
    pub fn backward(&self, fwd: &Forward<F>, dz: ArrayView2<'_, F>) -> Grads<F> {
        let tiny = cast::<F>(DEGENERATE_NORM);
        let mut df = Array2::zeros(dz.raw_dim());
        for i in 0..dz.nrows() {
            let n = fwd.norms[i];
            if n < tiny {
                continue;
            }
            let z = fwd.z.row(i);
            let g = dz.row(i);
            let proj = z.dot(&g);
            let mut out = df.row_mut(i);
            out.assign(&((&g - &(&z * proj)) / n));
        }
        let w2 = df.t().dot(&fwd.hd);
        let b2 = df.sum_axis(Axis(0));
        let mut dh = df.dot(&self.w2);
        if let Some(m) = &fwd.mask {
            dh *= m;
        }
        ndarray::Zip::from(&mut dh).and(&fwd.a1).for_each(|d, &a| {
            if a <= F::zero() {
                *d = F::zero();
            }
        });
        let w1 = dh.t().dot(&fwd.x);
        let b1 = dh.sum_axis(Axis(0));
        Grads { w1, b1, w2, b2 }
    }
}

fn logsumexp<F: Real>(s: &[F]) -> F {
    let m = s.iter().copied().fold(F::neg_infinity(), F::max);
    m + s.iter().map(|&v| (v - m).exp()).fold(F::zero(), |a, b| a + b).ln()
}

/// `-log(e^{s_0} / sum_j e^{s_j})` with log-sum-exp stabilization, where
/// `scores[0]` is the positive.
pub fn infonce_from_scores<F: Real>(scores: &[F]) -> Result<F> {
    if scores.len() < 2 {
        return Err(Error::NoNegatives);
    }
    Ok(logsumexp(scores) - scores[0])
}

/// InfoNCE of one response against a positive and its negatives.
pub fn infonce_loss<F: Real>(params: &Params<F>, x_r: &[F], x_pos: &[F], negatives: &[&[F]]) -> Result<F> {
    if negatives.is_empty() {
        return Err(Error::NoNegatives);
    }
    let zr = params.project(x_r, None)?;
    let mut scores = vec![zr.dot(&params.project(x_pos, None)?) / params.tau];
    for neg in negatives {
        scores.push(zr.dot(&params.project(neg, None)?) / params.tau);
    }
    infonce_from_scores(&scores)
}

/// Mean InfoNCE over `instances` and its gradient with respect to every
/// parameter tensor.
pub fn batch_loss_and_grad<F: Real>(
    params: &Params<F>,
    x: ArrayView2<'_, F>,
    instances: &[Instance],
    dropout: Option<&mut DropoutStream>,
) -> Result<(F, Grads<F>)> {
    if instances.is_empty() {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    let fwd = params.forward(x, dropout)?;
    let z = &fwd.z;
    let inv_tau = F::one() / params.tau;
    let inv_b = F::one() / cast::<F>(instances.len() as f64);
    let mut dz = Array2::<F>::zeros(z.raw_dim());
    let mut total = F::zero();
    for inst in instances {
        if inst.candidates.len() < 2 {
            return Err(Error::NoNegatives);
        }
        let anchor = z.row(inst.anchor);
        let scores: Vec<F> = inst
            .candidates
            .iter()
            .map(|&c| anchor.dot(&z.row(c)) * inv_tau)
            .collect();
        let lse = logsumexp(&scores);
        total = total + lse - scores[0];
        let mut d_anchor = Array1::<F>::zeros(z.ncols());
        for (j, (&c, &s)) in inst.candidates.iter().zip(&scores).enumerate() {
            let mut g = (s - lse).exp();
            if j == 0 {
                g = g - F::one();
            }
            let g = g * inv_b * inv_tau;
            d_anchor.scaled_add(g, &z.row(c));
            let mut row = dz.row_mut(c);
            row.scaled_add(g, &anchor);
        }
        let mut row = dz.row_mut(inst.anchor);
        row += &d_anchor;
    }
    let grads = params.backward(&fwd, dz.view());
    Ok((total * inv_b, grads))
}

/// Documents projected once per checkpoint, in ascending doc_id order.
#[derive(Debug, Clone)]
pub struct ProjectedDocs {
    ids: Vec<String>,
    z: Array2<f32>,
}

impl ProjectedDocs {
    pub fn build<'a>(params: &ScorerParams, docs: impl IntoIterator<Item = (&'a str, &'a [f32])>) -> Result<Self> {
        let mut docs: Vec<(&str, &[f32])> = docs.into_iter().collect();
        docs.sort_unstable_by(|a, b| a.0.cmp(b.0));
        let dim = params.input_dim();
        let mut x = Array2::<f32>::zeros((docs.len(), dim));
        for (i, (_, v)) in docs.iter().enumerate() {
            if v.len() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    found: v.len(),
                });
            }
            x.row_mut(i).assign(&ArrayView1::from(*v));
        }
        let mut z = Array2::zeros((docs.len(), params.proj()));
        // Chunked to bound the hidden-layer buffer.
        for start in (0..docs.len()).step_by(1024) {
            let end = (start + 1024).min(docs.len());
            let part = params.project_rows(x.slice(s![start..end, ..]))?;
            z.slice_mut(s![start..end, ..]).assign(&part);
        }
        Ok(Self {
            ids: docs.into_iter().map(|(id, _)| id.to_string()).collect(),
            z,
        })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Scores every projected candidate against one response with a single
/// matrix-vector product. Anti-documents stay in the candidate list.
pub fn rank_with_scorer(
    params: &ScorerParams,
    docs: &ProjectedDocs,
    query_id: &str,
    method: &str,
    x_r: &[f32],
) -> Result<RankedList> {
    let zr = params.project(x_r, None)?;
    let scores = docs.z.dot(&zr) / params.tau;
    let entries = docs
        .ids
        .iter()
        .zip(scores.iter())
        .map(|(id, &s)| Scored {
            doc_id: id.clone(),
            score: s as f64,
        })
        .collect();
    Ok(RankedList::from_scores(query_id, method, entries))
}

/// Top-`n` cosine hits for `query` that are not positives.
pub fn mine_negatives(index: &VectorIndex, query: &[f32], positives: &PositiveSet, n: usize) -> Result<Vec<String>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let list = index.rank_all("", "mine", query)?;
    Ok(list
        .entries
        .into_iter()
        .filter(|s| !positives.contains(&s.doc_id))
        .take(n)
        .map(|s| s.doc_id)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::Array2;
    use std::collections::BTreeSet;

    fn small_arch() -> ScorerArch {
        ScorerArch {
            hidden: 16,
            proj: 6,
            tau: 0.05,
            dropout_p: 0.1,
        }
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn inference_is_deterministic_and_unit_norm() {
        let p = Params::<f32>::init(5, &small_arch(), 1).unwrap();
        let x = [0.3f32, -1.0, 2.0, 0.1, 0.0];
        let a = p.project(&x, None).unwrap();
        let b = p.project(&x, None).unwrap();
        assert_eq!(a, b);
        assert!((a.dot(&a).sqrt() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn dropout_changes_training_projection_only() {
        let p = Params::<f32>::init(5, &small_arch(), 1).unwrap();
        let x = [0.3f32, -1.0, 2.0, 0.1, 0.0];
        let mut s1 = DropoutStream::new(3);
        let mut s2 = DropoutStream::new(3);
        let a = p.project(&x, Some(&mut s1)).unwrap();
        let b = p.project(&x, Some(&mut s2)).unwrap();
        assert_eq!(a, b, "same seed, same mask");
        assert!((a.dot(&a).sqrt() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn constant_network_outputs_bias_direction() {
        let mut p = Params::<f64>::init(3, &small_arch(), 2).unwrap();
        p.w1.fill(0.0);
        p.w2.fill(0.0);
        p.b2.fill(0.0);
        p.b2[0] = 1.0;
        for x in [[1.0, 2.0, 3.0], [-5.0, 0.0, 0.5]] {
            let z = p.project(&x, None).unwrap();
            assert_eq!(z[0], 1.0);
            assert!(z.iter().skip(1).all(|&v| v == 0.0));
        }
    }

    #[test]
    fn degenerate_projection_maps_to_axis() {
        let mut p = Params::<f64>::init(3, &small_arch(), 2).unwrap();
        p.w2.fill(0.0);
        p.b2.fill(0.0);
        let z = p.project(&[1.0, 1.0, 1.0], None).unwrap();
        assert_eq!(z[0], 1.0);
        assert!(z.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn identical_inputs_score_inverse_tau() {
        let p = Params::<f64>::init(4, &small_arch(), 3).unwrap();
        let x = [0.1, 0.2, -0.3, 0.4];
        assert_relative_eq!(p.score(&x, &x).unwrap(), 20.0, max_relative = 1e-12);
    }

    #[test]
    fn orthogonal_projections_score_zero() {
        let mut p = Params::<f64>::init(
            2,
            &ScorerArch {
                hidden: 2,
                proj: 2,
                ..small_arch()
            },
            3,
        )
        .unwrap();
        p.w1 = Array2::eye(2);
        p.b1.fill(0.0);
        p.w2 = Array2::eye(2);
        p.b2.fill(0.0);
        assert_eq!(p.score(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
    }

    /// Straight-line loops, no ndarray.
    fn naive_score(p: &Params<f64>, a: &[f64], b: &[f64]) -> f64 {
        let proj = |x: &[f64]| {
            let h: Vec<f64> = (0..p.hidden())
                .map(|i| {
                    let mut acc = p.b1[i];
                    for j in 0..x.len() {
                        acc += p.w1[[i, j]] * x[j];
                    }
                    acc.max(0.0)
                })
                .collect();
            let f: Vec<f64> = (0..p.proj())
                .map(|i| {
                    let mut acc = p.b2[i];
                    for j in 0..h.len() {
                        acc += p.w2[[i, j]] * h[j];
                    }
                    acc
                })
                .collect();
            let n = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            f.into_iter().map(|v| v / n).collect::<Vec<_>>()
        };
        let (za, zb) = (proj(a), proj(b));
        za.iter().zip(&zb).map(|(x, y)| x * y).sum::<f64>() / p.tau
    }

    #[test]
    fn score_matches_naive_reimplementation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for seed in 0..20 {
            let p = Params::<f64>::init(7, &small_arch(), seed).unwrap();
            let a = random_vec(&mut rng, 7);
            let b = random_vec(&mut rng, 7);
            assert_relative_eq!(
                p.score(&a, &b).unwrap(),
                naive_score(&p, &a, &b),
                max_relative = 1e-6,
                epsilon = 1e-9
            );
        }
    }

    #[test]
    fn equal_scores_give_log_one_plus_m() {
        for m in [1usize, 2, 7, 127] {
            let scores = vec![3.25f64; m + 1];
            assert_relative_eq!(
                infonce_from_scores(&scores).unwrap(),
                ((1 + m) as f64).ln(),
                epsilon = 1e-12
            );
        }
        let p = Params::<f64>::init(3, &small_arch(), 4).unwrap();
        let x = [0.5, -0.5, 1.0];
        let loss = infonce_loss(&p, &x, &x, &[&x]).unwrap();
        assert_relative_eq!(loss, std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn loss_requires_negatives() {
        let p = Params::<f64>::init(3, &small_arch(), 4).unwrap();
        assert!(matches!(
            infonce_loss(&p, &[1.0; 3], &[1.0; 3], &[]),
            Err(Error::NoNegatives)
        ));
    }

    #[test]
    fn loss_is_nonnegative_and_vanishes_with_margin() {
        assert!(infonce_from_scores(&[0.0f64, 5.0, -2.0]).unwrap() >= 0.0);
        assert!(infonce_from_scores(&[1000.0f64, 0.0, -3.0]).unwrap() < 1e-12);
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let arch = ScorerArch {
            hidden: 9,
            proj: 5,
            tau: 0.5,
            dropout_p: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = Params::<f64>::init(4, &arch, 8).unwrap();
        let x = Array2::from_shape_fn((6, 4), |_| rng.random_range(-1.0..1.0));
        let instances = vec![
            Instance {
                anchor: 0,
                candidates: vec![1, 2, 3],
            },
            Instance {
                anchor: 4,
                candidates: vec![5, 1, 2, 3],
            },
        ];
        let (_, g) = batch_loss_and_grad(&p, x.view(), &instances, None).unwrap();
        let loss = |q: &Params<f64>| batch_loss_and_grad(q, x.view(), &instances, None).unwrap().0;
        let h = 1e-5;
        for (i, j) in [(0, 0), (3, 2), (8, 1)] {
            let mut a = p.clone();
            a.w1[[i, j]] += h;
            let mut b = p.clone();
            b.w1[[i, j]] -= h;
            let fd = (loss(&a) - loss(&b)) / (2.0 * h);
            assert_relative_eq!(g.w1[[i, j]], fd, max_relative = 1e-4, epsilon = 1e-9);
        }
        for i in 0..5 {
            let mut a = p.clone();
            a.b2[i] += h;
            let mut b = p.clone();
            b.b2[i] -= h;
            let fd = (loss(&a) - loss(&b)) / (2.0 * h);
            assert_relative_eq!(g.b2[i], fd, max_relative = 1e-4, epsilon = 1e-9);
        }
    }

    #[test]
    fn mined_negatives_skip_positives() {
        let rows: Vec<(String, Vec<f32>)> = vec![
            ("pos".into(), vec![1.0, 0.0]),
            ("near".into(), vec![0.9, 0.1]),
            ("far".into(), vec![0.0, 1.0]),
        ];
        let idx = VectorIndex::from_rows(2, rows.iter().map(|(a, b)| (a.as_str(), b.as_slice())), true).unwrap();
        let positives = PositiveSet {
            query_id: "q".into(),
            valid_doc_ids: BTreeSet::from(["pos".to_string()]),
        };
        assert!(mine_negatives(&idx, &[1.0, 0.0], &positives, 0).unwrap().is_empty());
        assert_eq!(mine_negatives(&idx, &[1.0, 0.0], &positives, 1).unwrap(), ["near"]);
        assert_eq!(
            mine_negatives(&idx, &[1.0, 0.0], &positives, 5).unwrap(),
            ["near", "far"]
        );
    }

    fn toy_docs(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<(String, Vec<f32>)> {
        (0..n)
            .map(|i| {
                (
                    format!("d{i:03}"),
                    (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                )
            })
            .collect()
    }

    #[test]
    fn matrix_ranking_agrees_with_pairwise_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = Params::<f32>::init(6, &small_arch(), 10).unwrap();
        let docs = toy_docs(40, 6, &mut rng);
        let projected = ProjectedDocs::build(&p, docs.iter().map(|(a, b)| (a.as_str(), b.as_slice()))).unwrap();
        for _ in 0..100 {
            let q: Vec<f32> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let list = rank_with_scorer(&p, &projected, "q", "scorer", &q).unwrap();
            let pairwise = RankedList::from_scores(
                "q",
                "scorer",
                docs.iter()
                    .map(|(id, v)| Scored {
                        doc_id: id.clone(),
                        score: p.score(&q, v).unwrap() as f64,
                    })
                    .collect(),
            );
            assert_eq!(list.ids().collect::<Vec<_>>(), pairwise.ids().collect::<Vec<_>>());
        }
    }

    #[test]
    fn identical_projections_fall_back_to_doc_id() {
        let p = Params::<f32>::init(2, &small_arch(), 10).unwrap();
        let docs = vec![("b", vec![1.0f32, 2.0]), ("a", vec![1.0, 2.0]), ("c", vec![1.0, 2.0])];
        let projected = ProjectedDocs::build(&p, docs.iter().map(|(a, b)| (*a, b.as_slice()))).unwrap();
        let list = rank_with_scorer(&p, &projected, "q", "s", &[0.5, 0.1]).unwrap();
        assert_eq!(list.ids().collect::<Vec<_>>(), ["a", "b", "c"]);
        let one = ProjectedDocs::build(&p, [("only", [1.0f32, 0.0].as_slice())]).unwrap();
        assert_eq!(
            rank_with_scorer(&p, &one, "q", "s", &[0.5, 0.1]).unwrap().entries[0].doc_id,
            "only"
        );
    }

    #[test]
    fn ranking_is_invariant_to_temperature() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = Params::<f32>::init(6, &small_arch(), 13).unwrap();
        let mut hot = p.clone();
        hot.tau = 3.7;
        let docs = toy_docs(50, 6, &mut rng);
        let pd = ProjectedDocs::build(&p, docs.iter().map(|(a, b)| (a.as_str(), b.as_slice()))).unwrap();
        let q: Vec<f32> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = rank_with_scorer(&p, &pd, "q", "s", &q).unwrap();
        let b = rank_with_scorer(&hot, &pd, "q", "s", &q).unwrap();
        assert_eq!(a.ids().collect::<Vec<_>>(), b.ids().collect::<Vec<_>>());
    }
}
