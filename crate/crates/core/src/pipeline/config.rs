use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Ratio, DOCUMENTS_FILE, PROBES_FILE, QUERIES_FILE};
use crate::error::{Error, Result};
use crate::features::FeatureMode;
use crate::fusion::{default_grid, Combiner, DEFAULT_RRF_K0};
use crate::lexical::MinHashConfig;
use crate::scorer::TrainConfig;
use crate::steering::FidelityConfig;

/// Methods a run can request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    MinhashAnswer,
    MinhashQa,
    /// Cosine retrieval for every text bundle in both query modes.
    Dense,
    Scorer,
    Steer,
    SteerFuse,
    ScorerFuseAblation,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::MinhashAnswer,
        Method::MinhashQa,
        Method::Dense,
        Method::Scorer,
        Method::Steer,
        Method::SteerFuse,
        Method::ScorerFuseAblation,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub ratio: Ratio,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            ratio: Ratio::four_fifths(),
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerStage {
    pub feature_mode: FeatureMode,
    /// Source label of the text bundle used as QA features; defaults to the
    /// first text bundle.
    pub text_bundle: Option<String>,
    /// Source label of the text bundle used to mine negatives.
    pub mining_bundle: Option<String>,
}

impl Default for ScorerStage {
    fn default() -> Self {
        Self {
            feature_mode: FeatureMode::QA,
            text_bundle: None,
            mining_bundle: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionStage {
    pub combiners: Vec<Combiner>,
    pub lambda_grid: Vec<f64>,
    pub rrf_k0: u32,
    /// Method label of the retrieval prior; defaults to the QA-mode dense
    /// baseline of the first text bundle.
    pub prior: Option<String>,
    /// Cutoff maximized on the validation slice.
    pub tune_k: usize,
}

impl Default for FusionStage {
    fn default() -> Self {
        Self {
            combiners: vec![Combiner::ZScore, Combiner::RRF],
            lambda_grid: default_grid(),
            rrf_k0: DEFAULT_RRF_K0,
            prior: None,
            tune_k: 10,
        }
    }
}

/// Declarative run description, read from TOML. Relative paths resolve
/// against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: PathBuf,
    pub bundles: Vec<PathBuf>,
    pub output_dir: PathBuf,
    pub methods: Vec<Method>,
    pub k_list: Vec<usize>,
    pub report_k: usize,
    /// Scorer training seeds; the first one feeds the main tables.
    pub seeds: Vec<u64>,
    /// Entries kept per query in rankings files.
    pub ranking_depth: usize,
    pub split: SplitConfig,
    pub minhash: MinHashConfig,
    pub scorer: ScorerStage,
    pub train: TrainConfig,
    pub fusion: FusionStage,
    /// Proxy-fidelity check written next to steering runs.
    pub fidelity: FidelityConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: PathBuf::from("corpus"),
            bundles: Vec::new(),
            output_dir: PathBuf::from("runs"),
            methods: Method::ALL.to_vec(),
            k_list: vec![1, 5, 10],
            report_k: 10,
            seeds: vec![0],
            ranking_depth: 100,
            split: SplitConfig::default(),
            minhash: MinHashConfig::default(),
            scorer: ScorerStage::default(),
            train: TrainConfig::default(),
            fusion: FusionStage::default(),
            fidelity: FidelityConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Reads a config file and resolves its relative paths.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingPath(path.to_path_buf()));
        }
        let mut config = Self::from_toml(&fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.corpus);
        fix(&mut self.output_dir);
        self.bundles.iter_mut().for_each(fix);
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn wants(&self, m: Method) -> bool {
        self.methods.contains(&m)
    }

    /// Checks paths and parameters without writing anything.
    pub fn validate(&self) -> Result<()> {
        for p in [self.corpus.join(DOCUMENTS_FILE), self.corpus.join(PROBES_FILE)] {
            if !p.exists() {
                return Err(Error::MissingPath(p));
            }
        }
        for b in &self.bundles {
            if !b.exists() {
                return Err(Error::MissingPath(b.clone()));
            }
        }
        if self.methods.is_empty() {
            return Err(Error::InvalidConfig("no methods requested".into()));
        }
        if self.k_list.is_empty() || self.k_list.contains(&0) {
            return Err(Error::InvalidConfig("k_list must hold positive cutoffs".into()));
        }
        if !self.k_list.contains(&self.report_k) {
            return Err(Error::InvalidConfig(format!(
                "report_k {} not in k_list",
                self.report_k
            )));
        }
        let max_k = *self.k_list.iter().max().expect("non-empty");
        if self.ranking_depth < max_k.max(self.fusion.tune_k) {
            return Err(Error::InvalidConfig(format!(
                "ranking_depth {} is below the largest cutoff",
                self.ranking_depth
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("at least one seed is required".into()));
        }
        self.minhash.validate()?;
        self.train.validate()?;
        if self.fusion.combiners.is_empty() || self.fusion.tune_k == 0 {
            return Err(Error::InvalidConfig(
                "fusion needs a combiner and a positive tune_k".into(),
            ));
        }
        crate::fusion::FusionConfig {
            lambda_grid: self.fusion.lambda_grid.clone(),
            rrf_k0: self.fusion.rrf_k0,
            ..Default::default()
        }
        .validate()?;
        Ok(())
    }

    /// Digest of every input that can change an artifact: the config with
    /// paths replaced by file contents.
    pub fn digest(&self) -> Result<String> {
        let mut h = Sha256::new();
        let mut portable = self.clone();
        portable.corpus = PathBuf::new();
        portable.output_dir = PathBuf::new();
        portable.bundles = Vec::new();
        h.update(serde_json::to_vec(&portable)?);
        for name in [DOCUMENTS_FILE, PROBES_FILE, QUERIES_FILE] {
            let p = self.corpus.join(name);
            h.update(name.as_bytes());
            if p.exists() {
                h.update(file_digest(&p)?);
            }
        }
        for b in &self.bundles {
            h.update(file_digest(b)?);
        }
        Ok(hex::encode(h.finalize()))
    }
}

pub fn file_digest(path: &Path) -> Result<[u8; 32]> {
    let bytes = fs::read(path)?;
    Ok(Sha256::digest(&bytes).into())
}
