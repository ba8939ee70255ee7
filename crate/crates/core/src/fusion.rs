//! Score-level fusion of two ranked lists over the same candidates.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::PositiveSet;
use crate::error::{Error, Result};
use crate::eval::recall_at_k;
use crate::ranking::{RankedList, Scored};

pub const DEFAULT_RRF_K0: u32 = 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Combiner {
    ZScore,
    RRF,
}

/// `0.0, 0.05, ..., 1.0`
pub fn default_grid() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub combiner: Combiner,
    pub lambda: f64,
    pub rrf_k0: u32,
    pub lambda_grid: Vec<f64>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            combiner: Combiner::ZScore,
            lambda: 0.0,
            rrf_k0: DEFAULT_RRF_K0,
            lambda_grid: default_grid(),
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)?;
        check_grid(&self.lambda_grid)?;
        if self.rrf_k0 == 0 {
            return Err(Error::InvalidConfig("rrf_k0 must be positive".into()));
        }
        Ok(())
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidConfig(format!("lambda {lambda} not in [0, 1]")));
    }
    Ok(())
}

fn check_grid(grid: &[f64]) -> Result<()> {
    let sorted = grid.windows(2).all(|w| w[0] < w[1]);
    if !sorted || grid.first() != Some(&0.0) || grid.last() != Some(&1.0) {
        return Err(Error::InvalidConfig("lambda grid must ascend from 0 to 1".into()));
    }
    Ok(())
}

fn check_candidates(a: &RankedList, b: &RankedList) -> Result<()> {
    let sa: BTreeSet<&str> = a.ids().collect();
    let sb: BTreeSet<&str> = b.ids().collect();
    if sa.len() != a.len() || sb.len() != b.len() {
        return Err(Error::CandidateMismatch(format!(
            "duplicate candidates for query {}",
            a.query_id
        )));
    }
    if sa != sb {
        let only_a: Vec<&str> = sa.difference(&sb).take(3).copied().collect();
        let only_b: Vec<&str> = sb.difference(&sa).take(3).copied().collect();
        return Err(Error::CandidateMismatch(format!(
            "query {}: only in {}: {only_a:?}; only in {}: {only_b:?}",
            a.query_id, a.method, b.method
        )));
    }
    Ok(())
}

fn fused_list(a: &RankedList, scores: BTreeMap<&str, f64>) -> RankedList {
    let entries = scores
        .into_iter()
        .map(|(id, score)| Scored {
            doc_id: id.to_string(),
            score,
        })
        .collect();
    RankedList::from_scores(&a.query_id, "fused", entries)
}

/// Standardized scores; a zero-variance list maps every candidate to 0.
fn zscores(list: &RankedList) -> BTreeMap<&str, f64> {
    let n = list.len() as f64;
    let mean = list.entries.iter().map(|s| s.score).sum::<f64>() / n;
    let var = list.entries.iter().map(|s| (s.score - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    list.entries
        .iter()
        .map(|s| {
            let z = if sd > 0.0 { (s.score - mean) / sd } else { 0.0 };
            (s.doc_id.as_str(), z)
        })
        .collect()
}

/// `(1 - lambda) z_a + lambda z_b`.
pub fn zscore_fuse(a: &RankedList, b: &RankedList, lambda: f64) -> Result<RankedList> {
    check_lambda(lambda)?;
    check_candidates(a, b)?;
    let zb = zscores(b);
    let fused = zscores(a)
        .into_iter()
        .map(|(id, za)| (id, (1.0 - lambda) * za + lambda * zb[id]))
        .collect();
    Ok(fused_list(a, fused))
}

/// `(1 - lambda) / (k0 + rank_a) + lambda / (k0 + rank_b)` with 1-based
/// ranks.
pub fn rrf_fuse(a: &RankedList, b: &RankedList, lambda: f64, k0: u32) -> Result<RankedList> {
    check_lambda(lambda)?;
    check_candidates(a, b)?;
    let k0 = k0 as f64;
    let rank_b: BTreeMap<&str, f64> = b.ids().enumerate().map(|(i, id)| (id, (i + 1) as f64)).collect();
    let fused = a
        .ids()
        .enumerate()
        .map(|(i, id)| {
            let ra = (i + 1) as f64;
            (id, (1.0 - lambda) / (k0 + ra) + lambda / (k0 + rank_b[id]))
        })
        .collect();
    Ok(fused_list(a, fused))
}

pub fn fuse(a: &RankedList, b: &RankedList, config: &FusionConfig) -> Result<RankedList> {
    match config.combiner {
        Combiner::ZScore => zscore_fuse(a, b, config.lambda),
        Combiner::RRF => rrf_fuse(a, b, config.lambda, config.rrf_k0),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunedFusion {
    pub config: FusionConfig,
    pub val_recall: f64,
    pub n_val_queries: usize,
}

/// Sweeps `combiners` x `base.lambda_grid` on validation queries and keeps
/// the best Recall@k. Ties go to the smaller lambda, then to the earlier
/// combiner.
pub fn tune_lambda(
    method_lists: &BTreeMap<String, RankedList>,
    prior_lists: &BTreeMap<String, RankedList>,
    positives: &BTreeMap<String, PositiveSet>,
    combiners: &[Combiner],
    base: &FusionConfig,
    k: usize,
) -> Result<TunedFusion> {
    check_grid(&base.lambda_grid)?;
    if method_lists.is_empty() {
        return Err(Error::EmptyValidation);
    }
    if combiners.is_empty() {
        return Err(Error::InvalidConfig("no combiner to tune".into()));
    }
    let mut best: Option<(f64, Combiner, f64)> = None;
    for &combiner in combiners {
        for &lambda in &base.lambda_grid {
            let config = FusionConfig {
                combiner,
                lambda,
                ..base.clone()
            };
            let mut hits = 0usize;
            for (qid, a) in method_lists {
                let b = prior_lists.get(qid).ok_or_else(|| Error::MissingRanking {
                    method: "prior".into(),
                    query_id: qid.clone(),
                })?;
                let p = positives.get(qid).ok_or_else(|| Error::EmptyPositives(qid.clone()))?;
                hits += recall_at_k(&fuse(a, b, &config)?, p, k)? as usize;
            }
            let recall = hits as f64 / method_lists.len() as f64;
            let better = match best {
                None => true,
                Some((r, _, l)) => recall > r || (recall == r && lambda < l),
            };
            if better {
                best = Some((recall, combiner, lambda));
            }
        }
    }
    let (val_recall, combiner, lambda) = best.expect("non-empty sweep");
    Ok(TunedFusion {
        config: FusionConfig {
            combiner,
            lambda,
            ..base.clone()
        },
        val_recall,
        n_val_queries: method_lists.len(),
    })
}
