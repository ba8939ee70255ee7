use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use ndarray::{Array2, ArrayView1};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{batch_loss_and_grad, DropoutStream, Grads, Instance, Params, ProjectedDocs, ScorerArch, ScorerParams};
use crate::corpus::{carve_validation, Condition, Corpus, SplitManifest};
use crate::error::{Error, Result};
use crate::eval::recall_at_k;
use crate::features::FeatureTable;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub arch: ScorerArch,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub n_mined_negs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub val_fraction: f64,
    pub val_k: usize,
    /// Query conditions used as training instances.
    pub train_conditions: Vec<Condition>,
    /// Restrict training and validation to one target model.
    pub target_model: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: ScorerArch::default(),
            lr: 1e-4,
            batch_size: 128,
            max_epochs: 8,
            seed: 0,
            n_mined_negs: 4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            val_fraction: 0.1,
            val_k: 10,
            train_conditions: Condition::ALL.to_vec(),
            target_model: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig("batch_size must be at least 2".into()));
        }
        if self.max_epochs == 0 || self.val_k == 0 {
            return Err(Error::InvalidConfig("max_epochs and val_k must be positive".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig("lr must be positive and betas in [0, 1)".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "val_fraction {} not in (0, 1)",
                self.val_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub batches: usize,
    pub val_recall: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_recall: Option<f64>,
    pub n_instances: usize,
    pub n_val_queries: usize,
}

impl TrainingLog {
    /// One JSON object per epoch.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for e in &self.epochs {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

struct Example {
    query_id: String,
    positives: Vec<String>,
    negatives: Vec<String>,
}

struct AdamW {
    m: Grads<f32>,
    v: Grads<f32>,
    t: i32,
}

impl AdamW {
    fn new(p: &ScorerParams) -> Self {
        let zeros = || Grads {
            w1: Array2::zeros(p.w1.raw_dim()),
            b1: ndarray::Array1::zeros(p.b1.len()),
            w2: Array2::zeros(p.w2.raw_dim()),
            b2: ndarray::Array1::zeros(p.b2.len()),
        };
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    fn step(&mut self, p: &mut ScorerParams, g: &Grads<f32>, c: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let bc1 = 1.0 - b1.powi(self.t);
        let bc2 = 1.0 - b2.powi(self.t);
        let (lr, wd, eps) = (c.lr as f32, c.weight_decay as f32, c.eps as f32);
        let update = |w: &mut [f32], g: &[f32], m: &mut [f32], v: &mut [f32]| {
            for i in 0..w.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                w[i] -= lr * (mh / (vh.sqrt() + eps) + wd * w[i]);
            }
        };
        update(
            p.w1.as_slice_mut().expect("standard layout"),
            g.w1.as_slice().expect("standard layout"),
            self.m.w1.as_slice_mut().expect("standard layout"),
            self.v.w1.as_slice_mut().expect("standard layout"),
        );
        update(
            p.b1.as_slice_mut().expect("contiguous"),
            g.b1.as_slice().expect("contiguous"),
            self.m.b1.as_slice_mut().expect("contiguous"),
            self.v.b1.as_slice_mut().expect("contiguous"),
        );
        update(
            p.w2.as_slice_mut().expect("standard layout"),
            g.w2.as_slice().expect("standard layout"),
            self.m.w2.as_slice_mut().expect("standard layout"),
            self.v.w2.as_slice_mut().expect("standard layout"),
        );
        update(
            p.b2.as_slice_mut().expect("contiguous"),
            g.b2.as_slice().expect("contiguous"),
            self.m.b2.as_slice_mut().expect("contiguous"),
            self.v.b2.as_slice_mut().expect("contiguous"),
        );
    }
}

fn keep_query(config: &TrainConfig, model: &str) -> bool {
    config.target_model.as_deref().is_none_or(|m| m == model)
}

/// Validation Recall@k over Clean queries of `parents`, dropout off.
fn validation_recall(
    params: &ScorerParams,
    corpus: &Corpus,
    features: &FeatureTable,
    queries: &[String],
    k: usize,
) -> Result<f64> {
    let docs = ProjectedDocs::build(params, features.docs())?;
    let mut hits = 0.0;
    for qid in queries {
        let x = features
            .query(qid)
            .ok_or_else(|| Error::MissingItem(vec![qid.clone()]))?;
        let list = super::rank_with_scorer(params, &docs, qid, "scorer", x)?;
        let positives = corpus
            .positives(qid)
            .ok_or_else(|| Error::MissingItem(vec![qid.clone()]))?;
        hits += recall_at_k(&list, positives, k)? as u8 as f64;
    }
    Ok(hits / queries.len() as f64)
}

/// Trains the scorer on training-side queries and returns the checkpoint
/// with the best validation Recall@k.
///
/// `mined` maps query ids to retrieval-mined negatives; entries beyond
/// `n_mined_negs` are ignored and positives are always filtered out.
pub fn train(
    corpus: &Corpus,
    features: &FeatureTable,
    split: &SplitManifest,
    mined: &BTreeMap<String, Vec<String>>,
    config: &TrainConfig,
) -> Result<(ScorerParams, TrainingLog)> {
    config.validate()?;
    let (fit, val) = carve_validation(&split.train_parent_ids, config.val_fraction, split.seed);
    let mut examples = Vec::new();
    let mut val_queries = Vec::new();
    for q in corpus.queries() {
        if !keep_query(config, &q.target_model) {
            continue;
        }
        let parent = corpus.query_parent(&q.query_id).expect("validated corpus");
        if val.contains(parent) {
            if q.condition == Condition::Clean {
                val_queries.push(q.query_id.clone());
            }
            continue;
        }
        if !fit.contains(parent) || !config.train_conditions.contains(&q.condition) {
            continue;
        }
        let pos = corpus.positives(&q.query_id).expect("validated corpus");
        let positives: Vec<String> = pos
            .valid_doc_ids
            .iter()
            .filter(|d| features.doc(d).is_some())
            .cloned()
            .collect();
        if positives.is_empty() {
            continue;
        }
        let mut negatives: BTreeSet<String> = corpus.anti_documents(parent).map(|d| d.doc_id.clone()).collect();
        if let Some(list) = mined.get(&q.query_id) {
            negatives.extend(
                list.iter()
                    .filter(|d| !pos.contains(d))
                    .take(config.n_mined_negs)
                    .cloned(),
            );
        }
        negatives.retain(|d| features.doc(d).is_some());
        examples.push(Example {
            query_id: q.query_id.clone(),
            positives,
            negatives: negatives.into_iter().collect(),
        });
    }
    if examples.is_empty() {
        return Err(Error::InvalidConfig("no training instances on the fit side".into()));
    }
    if val_queries.is_empty() {
        log::warn!("empty validation slice; keeping the final epoch");
    }

    let mut params = Params::<f32>::init(features.dim, &config.arch, config.seed)?;
    let mut opt = AdamW::new(&params);
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut dropout = DropoutStream::new(config.seed.wrapping_add(2));
    let mut log = TrainingLog {
        n_instances: examples.len(),
        n_val_queries: val_queries.len(),
        ..TrainingLog::default()
    };
    let mut best: Option<(f64, ScorerParams)> = None;
    let mut order: Vec<usize> = (0..examples.len()).collect();

    for epoch in 0..config.max_epochs {
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let chosen: Vec<&str> = chunk
                .iter()
                .map(|&i| {
                    examples[i]
                        .positives
                        .choose(&mut order_rng)
                        .expect("non-empty")
                        .as_str()
                })
                .collect();
            let (x, instances) = assemble_batch(features, &examples, chunk, &chosen, corpus)?;
            let (loss, grads) = batch_loss_and_grad(&params, x.view(), &instances, Some(&mut dropout))?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            opt.step(&mut params, &grads, config);
            loss_sum += loss as f64;
            batches += 1;
        }
        let val_recall = if val_queries.is_empty() {
            None
        } else {
            Some(validation_recall(
                &params,
                corpus,
                features,
                &val_queries,
                config.val_k,
            )?)
        };
        log::info!(
            "epoch {epoch}: loss {:.4}, val recall@{} {:?}",
            loss_sum / batches as f64,
            config.val_k,
            val_recall
        );
        log.epochs.push(EpochLog {
            epoch,
            mean_loss: loss_sum / batches as f64,
            batches,
            val_recall,
        });
        let improved = match (&best, val_recall) {
            (None, _) => true,
            (Some((score, _)), Some(r)) => r > *score,
            (Some(_), None) => true,
        };
        if improved {
            log.best_epoch = epoch;
            log.best_val_recall = val_recall;
            best = Some((val_recall.unwrap_or(f64::NEG_INFINITY), params.clone()));
        }
    }
    let (_, best_params) = best.expect("at least one epoch");
    Ok((best_params, log))
}

/// Stacks anchors then unique documents into one input matrix and emits
/// one InfoNCE instance per anchor, positive first.
fn assemble_batch(
    features: &FeatureTable,
    examples: &[Example],
    chunk: &[usize],
    chosen: &[&str],
    corpus: &Corpus,
) -> Result<(Array2<f32>, Vec<Instance>)> {
    let n_anchor = chunk.len();
    let mut doc_rows: BTreeMap<String, usize> = BTreeMap::new();
    let mut doc_order: Vec<String> = Vec::new();
    let mut instances = Vec::with_capacity(n_anchor);
    for (slot, &i) in chunk.iter().enumerate() {
        let ex = &examples[i];
        let pos = corpus.positives(&ex.query_id).expect("validated corpus");
        let in_batch = chosen
            .iter()
            .enumerate()
            .filter(|&(other, c)| other != slot && !pos.contains(c))
            .map(|(_, c)| *c);
        let ids = std::iter::once(chosen[slot])
            .chain(ex.negatives.iter().map(String::as_str))
            .chain(in_batch);
        let mut candidates = Vec::new();
        for id in ids {
            let row = *doc_rows.entry(id.to_string()).or_insert_with(|| {
                doc_order.push(id.to_string());
                n_anchor + doc_order.len() - 1
            });
            if !candidates.contains(&row) {
                candidates.push(row);
            }
        }
        instances.push(Instance {
            anchor: slot,
            candidates,
        });
    }

    let mut x = Array2::<f32>::zeros((n_anchor + doc_order.len(), features.dim));
    for (slot, &i) in chunk.iter().enumerate() {
        let qid = &examples[i].query_id;
        let v = features
            .query(qid)
            .ok_or_else(|| Error::MissingItem(vec![qid.clone()]))?;
        x.row_mut(slot).assign(&ArrayView1::from(v));
    }
    for (r, id) in doc_order.iter().enumerate() {
        let v = features.doc(id).ok_or_else(|| Error::MissingItem(vec![id.clone()]))?;
        x.row_mut(n_anchor + r).assign(&ArrayView1::from(v));
    }
    Ok((x, instances))
}
