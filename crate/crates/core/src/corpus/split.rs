use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Corpus;
use crate::error::{Error, Result};

/// A ratio `num/den` strictly between 0 and 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Ratio {
    num: u64,
    den: u64,
}

impl Ratio {
    pub fn new(num: u64, den: u64) -> Result<Self> {
        if den == 0 || num == 0 || num >= den {
            return Err(Error::InvalidConfig(format!("ratio {num}/{den} must lie in (0, 1)")));
        }
        Ok(Self { num, den })
    }

    pub fn four_fifths() -> Self {
        Self { num: 4, den: 5 }
    }

    /// `round(self * n)` with halves rounded up, in exact integer arithmetic.
    pub fn round_mul(self, n: usize) -> usize {
        let n = n as u128;
        ((2 * self.num as u128 * n + self.den as u128) / (2 * self.den as u128)) as usize
    }

    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl Default for Ratio {
    fn default() -> Self {
        Self::four_fifths()
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for Ratio {
    type Err = Error;

    /// Accepts `"4/5"` or a decimal such as `"0.8"`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidConfig(format!("cannot parse ratio {s:?}"));
        let s = s.trim();
        if let Some((n, d)) = s.split_once('/') {
            let n = n.trim().parse().map_err(|_| bad())?;
            let d = d.trim().parse().map_err(|_| bad())?;
            return Ratio::new(n, d);
        }
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        if !int.trim_start_matches('0').is_empty() || frac.is_empty() || frac.len() > 9 {
            return Err(bad());
        }
        let num: u64 = frac.parse().map_err(|_| bad())?;
        Ratio::new(num, 10u64.pow(frac.len() as u32))
    }
}

impl TryFrom<String> for Ratio {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Ratio> for String {
    fn from(r: Ratio) -> String {
        r.to_string()
    }
}

/// Partition of parent ids into attribution-train and eval sides.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratio: Ratio,
    pub train_parent_ids: BTreeSet<String>,
    pub eval_parent_ids: BTreeSet<String>,
}

impl SplitManifest {
    pub fn is_train(&self, parent_id: &str) -> bool {
        self.train_parent_ids.contains(parent_id)
    }

    pub fn is_eval(&self, parent_id: &str) -> bool {
        self.eval_parent_ids.contains(parent_id)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

fn shuffled(ids: impl IntoIterator<Item = String>, seed: u64) -> Vec<String> {
    let mut ids: Vec<String> = ids.into_iter().collect();
    ids.sort_unstable();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    ids
}

/// Seeded shuffle of parent ids; the first `round(ratio * N)` become train.
pub fn split_corpus(corpus: &Corpus, ratio: Ratio, seed: u64) -> Result<SplitManifest> {
    if corpus.n_parents() == 0 {
        return Err(Error::EmptyCorpus);
    }
    let ids = shuffled(corpus.parent_ids().map(str::to_string), seed);
    let n_train = ratio.round_mul(ids.len());
    let (train, eval) = ids.split_at(n_train);
    Ok(SplitManifest {
        seed,
        ratio,
        train_parent_ids: train.iter().cloned().collect(),
        eval_parent_ids: eval.iter().cloned().collect(),
    })
}

/// Carves a seeded validation slice of parents out of the training side.
/// Returns `(fit, validation)`; the validation side holds
/// `max(1, round(fraction * N))` parents when `N >= 2`.
pub fn carve_validation(
    train_parent_ids: &BTreeSet<String>,
    fraction: f64,
    seed: u64,
) -> (BTreeSet<String>, BTreeSet<String>) {
    let ids = shuffled(train_parent_ids.iter().cloned(), seed ^ 0x05ee_d0f7_a11d);
    let n = ids.len();
    let n_val = if n < 2 {
        0
    } else {
        ((fraction * n as f64).round() as usize).clamp(1, n - 1)
    };
    let (val, fit) = ids.split_at(n_val);
    (fit.iter().cloned().collect(), val.iter().cloned().collect())
}
