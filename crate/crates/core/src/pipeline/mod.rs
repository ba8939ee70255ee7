//! Reproducible runs: corpus, features, methods, fusion, eval and report.
//!
//! Every artifact lands under `output_dir/run-<digest>` where the digest
//! covers the config and the bytes of every input file. A stage whose
//! output file already exists is loaded instead of recomputed, so deleting
//! downstream artifacts re-executes only those stages. Files are written
//! through a temporary name and renamed, so a crashed stage never leaves a
//! file that looks finished.

mod config;
mod report;
mod synth;

use std::cell::{OnceCell, RefCell};
use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::corpus::{carve_validation, load_corpus, split_corpus, Condition, Corpus, PositiveSet, SplitManifest};
use crate::error::{Error, Result};
use crate::eval::{evaluate, write_cells_csv, EvalCell, MethodRankings};
use crate::features::{
    assemble_features, load_bundle, mode_key, FeatureBundle, FeatureKind, FeatureMode, FeatureTable,
};
use crate::fusion::{fuse, tune_lambda, FusionConfig, TunedFusion};
use crate::lexical::{minhash_rank, QueryMode, SignatureIndex};
use crate::ranking::{read_rankings, write_rankings, RankedList};
use crate::retrieval::{corpus_doc_index, dense_label, dense_rank, VectorIndex};
use crate::scorer::{
    load_checkpoint, mine_negatives, rank_with_scorer, save_checkpoint, train, CheckpointMeta, ProjectedDocs,
    ScorerParams, TrainConfig,
};
use crate::steering::{proxy_fidelity_report, steer_rank, DocDirectionStore, FidelityReport, ResponseProxy};

pub use config::{file_digest, FusionStage, Method, RunConfig, ScorerStage, SplitConfig};
pub use report::{is_baseline, report, write_report};
pub use synth::{make_synth, SynthOptions, SynthOutput};

pub const CONFIG_FILE: &str = "config.toml";
pub const INCOMPLETE_FILE: &str = "INCOMPLETE";
pub const METADATA_FILE: &str = "metadata.json";
pub const CELLS_FILE: &str = "cells.csv";
pub const DELTAS_FILE: &str = "deltas.csv";
pub const REPORT_FILE: &str = "report.md";
pub const FIDELITY_FILE: &str = "steering_fidelity.json";
pub const SEED_SUMMARY_FILE: &str = "seed_summary.json";
pub const SIGNATURE_CACHE_FILE: &str = "cache/signatures.bin";
/// Environment variable holding the worker-pool size.
pub const WORKERS_ENV: &str = "PVRANK_WORKERS";

pub const SCORER_LABEL: &str = "scorer";
pub const STEER_LABEL: &str = "steer";
pub const STEER_FUSE_LABEL: &str = "steer-fuse";
pub const SCORER_FUSE_LABEL: &str = "scorer-fuse";

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Worker threads; `None` uses one per core.
    pub workers: Option<usize>,
}

impl RunOptions {
    pub fn from_env() -> Result<Self> {
        match std::env::var(WORKERS_ENV) {
            Ok(v) => match v.trim().parse::<usize>() {
                Ok(n) if n > 0 => Ok(Self { workers: Some(n) }),
                _ => Err(Error::InvalidConfig(format!(
                    "{WORKERS_ENV}={v} is not a positive integer"
                ))),
            },
            Err(_) => Ok(Self::default()),
        }
    }
}

/// Where a run landed and which stages did work.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub executed: Vec<String>,
    pub cached: Vec<String>,
}

#[derive(Debug, Serialize)]
struct Metadata<'a> {
    digest: &'a str,
    started_unix: u64,
    finished_unix: u64,
    executed: &'a [String],
    cached: &'a [String],
}

/// Tuned weights for one fused method, one entry per (model, condition).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionEntry {
    pub model: String,
    pub condition: Condition,
    pub prior: String,
    pub tuned: TunedFusion,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Writes `path` through a sibling temporary file.
pub(crate) fn write_atomic(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut out = BufWriter::new(File::create(&tmp)?);
        body(&mut out)?;
        out.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        w.write_all(b"\n")?;
        Ok(())
    })
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

/// File-name-safe form of a label.
fn slug(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' {
                c
            } else {
                '-'
            }
        })
        .collect()
}

fn par_rank<F>(qids: &[String], f: F) -> Result<MethodRankings>
where
    F: Fn(&str) -> Result<RankedList> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    let lists = {
        use rayon::prelude::*;
        qids.par_iter().map(|q| f(q)).collect::<Result<Vec<_>>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let lists = qids.iter().map(|q| f(q)).collect::<Result<Vec<_>>>()?;
    Ok(qids.iter().cloned().zip(lists).collect())
}

fn stage<T>(name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().map_err(|e| match e {
        e @ Error::Stage { .. } => e,
        e => e.in_stage(name),
    })
}

/// Input bundles sorted into roles by kind.
struct Inputs {
    corpus: Corpus,
    text: Vec<FeatureBundle>,
    hidden: Option<FeatureBundle>,
    lm_head: Option<FeatureBundle>,
    directions: Option<DocDirectionStore>,
}

fn load_inputs(config: &RunConfig) -> Result<Inputs> {
    let corpus = stage("corpus", || load_corpus(&config.corpus))?;
    stage("bundles", || {
        let mut inputs = Inputs {
            corpus,
            text: Vec::new(),
            hidden: None,
            lm_head: None,
            directions: None,
        };
        let duplicate =
            |what: &str, path: &Path| Error::InvalidConfig(format!("second {what} bundle {}", path.display()));
        for path in &config.bundles {
            let bundle = load_bundle(path)?;
            match bundle.kind() {
                FeatureKind::TextEmbedding => {
                    if inputs.text.iter().any(|b| b.source_label == bundle.source_label) {
                        return Err(duplicate("text-embedding", path));
                    }
                    inputs.text.push(bundle);
                }
                FeatureKind::HiddenState => {
                    if inputs.hidden.replace(bundle).is_some() {
                        return Err(duplicate("hidden-state", path));
                    }
                }
                FeatureKind::LMHeadRowSum => {
                    if inputs.lm_head.replace(bundle).is_some() {
                        return Err(duplicate("LM-head", path));
                    }
                }
                FeatureKind::DocDirection | FeatureKind::ChunkDirections => {
                    if inputs
                        .directions
                        .replace(DocDirectionStore::from_bundle(&bundle)?)
                        .is_some()
                    {
                        return Err(duplicate("direction", path));
                    }
                }
            }
        }
        Ok(inputs)
    })
}

/// A method computed directly from the inputs, without training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Base {
    MinHash(QueryMode),
    Dense(usize, QueryMode),
}

const MODES: [QueryMode; 2] = [QueryMode::AnswerOnly, QueryMode::QA];

struct Runner<'a> {
    config: &'a RunConfig,
    dir: PathBuf,
    inputs: Inputs,
    split: SplitManifest,
    eval_qids: Vec<String>,
    val_qids: Vec<String>,
    signatures: OnceCell<SignatureIndex>,
    features: OnceCell<FeatureTable>,
    mined: OnceCell<BTreeMap<String, Vec<String>>>,
    executed: RefCell<Vec<String>>,
    cached: RefCell<Vec<String>>,
}

impl<'a> Runner<'a> {
    fn mark(&self, name: String, ran: bool) {
        if ran {
            self.executed.borrow_mut().push(name);
        } else {
            self.cached.borrow_mut().push(name);
        }
    }

    fn corpus(&self) -> &Corpus {
        &self.inputs.corpus
    }

    fn base_label(&self, base: Base) -> String {
        match base {
            Base::MinHash(mode) => format!("minhash-{}", mode.label()),
            Base::Dense(i, mode) => dense_label(&self.inputs.text[i], mode),
        }
    }

    fn requested_bases(&self) -> Vec<Base> {
        let mut out = Vec::new();
        if self.config.wants(Method::MinhashAnswer) {
            out.push(Base::MinHash(QueryMode::AnswerOnly));
        }
        if self.config.wants(Method::MinhashQa) {
            out.push(Base::MinHash(QueryMode::QA));
        }
        if self.config.wants(Method::Dense) {
            for i in 0..self.inputs.text.len() {
                out.extend(MODES.map(|m| Base::Dense(i, m)));
            }
        }
        out
    }

    fn all_bases(&self) -> Vec<Base> {
        let mut out: Vec<Base> = MODES.map(Base::MinHash).to_vec();
        for i in 0..self.inputs.text.len() {
            out.extend(MODES.map(|m| Base::Dense(i, m)));
        }
        out
    }

    fn prior(&self) -> Result<Base> {
        let label = match &self.config.fusion.prior {
            Some(l) => l.clone(),
            None => {
                let first = self.inputs.text.first().ok_or_else(|| {
                    Error::InvalidConfig("fusion needs a prior; no text-embedding bundle given".into())
                })?;
                dense_label(first, QueryMode::QA)
            }
        };
        self.all_bases()
            .into_iter()
            .find(|b| self.base_label(*b) == label)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown fusion prior {label}")))
    }

    fn text_bundle(&self, label: Option<&String>) -> Result<&FeatureBundle> {
        match label {
            None => self
                .inputs
                .text
                .first()
                .ok_or_else(|| Error::InvalidConfig("no text-embedding bundle given".into())),
            Some(l) => self
                .inputs
                .text
                .iter()
                .find(|b| &b.source_label == l)
                .ok_or_else(|| Error::InvalidConfig(format!("no text-embedding bundle labelled {l}"))),
        }
    }

    /// Checks that every requested method has the bundles it reads.
    fn check_requirements(&self) -> Result<()> {
        let c = self.config;
        if c.wants(Method::Dense) && self.inputs.text.is_empty() {
            return Err(Error::InvalidConfig("dense needs a text-embedding bundle".into()));
        }
        let scorer = c.wants(Method::Scorer) || c.wants(Method::ScorerFuseAblation);
        if scorer {
            match c.scorer.feature_mode {
                FeatureMode::QA => {
                    self.text_bundle(c.scorer.text_bundle.as_ref())?;
                }
                FeatureMode::LLM => {
                    if self.inputs.hidden.is_none() {
                        return Err(Error::InvalidConfig(
                            "LLM feature mode needs a hidden-state bundle".into(),
                        ));
                    }
                }
                FeatureMode::Concat => {
                    self.text_bundle(c.scorer.text_bundle.as_ref())?;
                    if self.inputs.hidden.is_none() {
                        return Err(Error::InvalidConfig(
                            "Concat feature mode needs a hidden-state bundle".into(),
                        ));
                    }
                }
            }
            if c.train.n_mined_negs > 0 {
                self.text_bundle(c.scorer.mining_bundle.as_ref())?;
            }
        }
        if (c.wants(Method::Steer) || c.wants(Method::SteerFuse))
            && (self.inputs.lm_head.is_none() || self.inputs.directions.is_none())
        {
            return Err(Error::InvalidConfig(
                "steer needs LM-head and document-direction bundles".into(),
            ));
        }
        if c.wants(Method::SteerFuse) || c.wants(Method::ScorerFuseAblation) {
            self.prior()?;
        }
        Ok(())
    }

    fn signatures(&self) -> Result<&SignatureIndex> {
        if let Some(s) = self.signatures.get() {
            return Ok(s);
        }
        let path = self.dir.join(SIGNATURE_CACHE_FILE);
        let index = if path.exists() {
            self.mark("minhash-signatures".into(), false);
            SignatureIndex::read_cache(BufReader::new(File::open(&path)?), &self.config.minhash)?
        } else {
            let index = SignatureIndex::build(self.corpus(), &self.config.minhash)?;
            write_atomic(&path, |w| index.write_cache(w))?;
            self.mark("minhash-signatures".into(), true);
            index
        };
        Ok(self.signatures.get_or_init(|| index))
    }

    fn compute_base(&self, base: Base, qids: &[String]) -> Result<MethodRankings> {
        let corpus = self.corpus();
        let query = |qid: &str| {
            corpus
                .query(qid)
                .ok_or_else(|| Error::MissingItem(vec![qid.to_string()]))
        };
        match base {
            Base::MinHash(mode) => {
                let index = stage("minhash", || self.signatures())?;
                stage("minhash", || {
                    par_rank(qids, |q| minhash_rank(corpus, index, query(q)?, mode))
                })
            }
            Base::Dense(i, mode) => stage("dense", || {
                let bundle = &self.inputs.text[i];
                let index = corpus_doc_index(bundle, corpus, true)?;
                let label = dense_label(bundle, mode);
                par_rank(qids, |q| dense_rank(&index, bundle, query(q)?, mode, &label))
            }),
        }
    }

    /// Eval-query rankings stored at `rel`, loaded if present.
    fn cached_rankings(
        &self,
        rel: &str,
        stage_name: &str,
        compute: impl FnOnce() -> Result<MethodRankings>,
    ) -> Result<MethodRankings> {
        let path = self.dir.join(rel);
        if path.exists() {
            self.mark(rel.to_string(), false);
            return stage(stage_name, || {
                let lists = read_rankings(BufReader::new(File::open(&path)?), rel)?;
                Ok(lists.into_iter().map(|l| (l.query_id.clone(), l)).collect())
            });
        }
        let lists = compute()?;
        stage(stage_name, || {
            write_atomic(&path, |w| write_rankings(w, lists.values(), self.config.ranking_depth))
        })?;
        self.mark(rel.to_string(), true);
        Ok(lists)
    }

    fn features(&self) -> Result<&FeatureTable> {
        if let Some(f) = self.features.get() {
            return Ok(f);
        }
        let c = &self.config.scorer;
        let qa = match c.feature_mode {
            FeatureMode::LLM => None,
            _ => Some(self.text_bundle(c.text_bundle.as_ref())?),
        };
        let table = assemble_features(self.corpus(), self.inputs.hidden.as_ref(), qa, c.feature_mode)?;
        Ok(self.features.get_or_init(|| table))
    }

    /// Retrieval-mined negatives for every training-side query.
    fn mined(&self) -> Result<&BTreeMap<String, Vec<String>>> {
        if let Some(m) = self.mined.get() {
            return Ok(m);
        }
        let n = self.config.train.n_mined_negs;
        let mut mined = BTreeMap::new();
        if n > 0 {
            let bundle = self.text_bundle(self.config.scorer.mining_bundle.as_ref())?;
            let index = corpus_doc_index(bundle, self.corpus(), true)?;
            let corpus = self.corpus();
            let qids: Vec<String> = corpus
                .queries()
                .iter()
                .filter(|q| corpus.query_parent(&q.query_id).is_some_and(|p| self.split.is_train(p)))
                .map(|q| q.query_id.clone())
                .collect();
            #[cfg(feature = "parallel")]
            let lists = {
                use rayon::prelude::*;
                qids.par_iter()
                    .map(|q| mine_one(corpus, &index, bundle, q, n))
                    .collect::<Result<Vec<_>>>()?
            };
            #[cfg(not(feature = "parallel"))]
            let lists = qids
                .iter()
                .map(|q| mine_one(corpus, &index, bundle, q, n))
                .collect::<Result<Vec<_>>>()?;
            mined = qids.into_iter().zip(lists).collect();
        }
        Ok(self.mined.get_or_init(|| mined))
    }

    fn models(&self) -> Vec<String> {
        self.corpus().target_models().into_iter().map(str::to_string).collect()
    }

    fn seed_dir(&self, seed: u64) -> String {
        format!("seeds/seed-{seed}")
    }

    /// One checkpoint per target model, trained or loaded.
    fn scorers(&self, seed: u64) -> Result<BTreeMap<String, ScorerParams>> {
        let mut out = BTreeMap::new();
        for model in self.models() {
            let rel = format!("checkpoints/scorer-{}-seed{seed}.pvsm", slug(&model));
            let path = self.dir.join(&rel);
            let params = if path.exists() {
                self.mark(rel, false);
                stage("scorer-train", || load_checkpoint(&path))?.0
            } else {
                let params = stage("scorer-train", || {
                    let features = self.features()?;
                    let mined = self.mined()?;
                    let config = TrainConfig {
                        seed,
                        target_model: Some(model.clone()),
                        ..self.config.train.clone()
                    };
                    let (params, log) = train(self.corpus(), features, &self.split, mined, &config)?;
                    let log_path = path.with_extension("train_log.jsonl");
                    write_atomic(&log_path, |w| log.write_jsonl(w))?;
                    let meta = CheckpointMeta {
                        dropout_p: config.arch.dropout_p,
                        seed,
                        feature_mode: format!("{:?}", self.config.scorer.feature_mode),
                        log,
                    };
                    let mut tmp = path.as_os_str().to_owned();
                    tmp.push(".tmp");
                    save_checkpoint(&tmp, &params, &meta)?;
                    fs::rename(&tmp, &path)?;
                    Ok(params)
                })?;
                self.mark(rel, true);
                params
            };
            out.insert(model, params);
        }
        Ok(out)
    }

    fn scorer_rank(&self, scorers: &BTreeMap<String, ScorerParams>, qids: &[String]) -> Result<MethodRankings> {
        stage("scorer-rank", || {
            let features = self.features()?;
            let projected = scorers
                .iter()
                .map(|(m, p)| Ok((m.as_str(), ProjectedDocs::build(p, features.docs())?)))
                .collect::<Result<BTreeMap<_, _>>>()?;
            let corpus = self.corpus();
            par_rank(qids, |qid| {
                let q = corpus
                    .query(qid)
                    .ok_or_else(|| Error::MissingItem(vec![qid.to_string()]))?;
                let params = &scorers[&q.target_model];
                let x = features
                    .query(qid)
                    .ok_or_else(|| Error::MissingItem(vec![qid.to_string()]))?;
                rank_with_scorer(params, &projected[q.target_model.as_str()], qid, SCORER_LABEL, x)
            })
        })
    }

    fn steer_rankings(&self, qids: &[String]) -> Result<MethodRankings> {
        stage("steer", || {
            let head = self.inputs.lm_head.as_ref().expect("checked requirements");
            let store = self.inputs.directions.as_ref().expect("checked requirements");
            par_rank(qids, |qid| {
                let g = head
                    .vector(qid)
                    .ok_or_else(|| Error::MissingItem(vec![qid.to_string()]))?;
                steer_rank(&ResponseProxy::from_vector(qid, g)?, store, STEER_LABEL)
            })
        })
    }

    /// Tunes the fusion weight per (model, condition) on validation
    /// queries, or loads the stored choice.
    fn fusion_entries(
        &self,
        rel: &str,
        method_val: &MethodRankings,
        prior_val: &MethodRankings,
    ) -> Result<Vec<FusionEntry>> {
        let path = self.dir.join(rel);
        if path.exists() {
            self.mark(rel.to_string(), false);
            return stage("fusion", || read_json(&path));
        }
        let prior_label = self.base_label(self.prior()?);
        let entries = stage("fusion", || {
            let corpus = self.corpus();
            let base = FusionConfig {
                lambda_grid: self.config.fusion.lambda_grid.clone(),
                rrf_k0: self.config.fusion.rrf_k0,
                ..Default::default()
            };
            let mut groups: BTreeMap<(String, Condition), Vec<&String>> = BTreeMap::new();
            for qid in &self.val_qids {
                let q = corpus.query(qid).expect("validation ids come from the corpus");
                groups
                    .entry((q.target_model.clone(), q.condition))
                    .or_default()
                    .push(qid);
            }
            let mut entries = Vec::new();
            for model in self.models() {
                for condition in self.conditions() {
                    let ids = groups.get(&(model.clone(), condition)).cloned().unwrap_or_default();
                    let pick = |m: &MethodRankings| -> BTreeMap<String, RankedList> {
                        ids.iter().map(|q| ((*q).clone(), m[*q].clone())).collect()
                    };
                    let positives: BTreeMap<String, PositiveSet> = ids
                        .iter()
                        .filter_map(|q| corpus.positives(q).map(|p| ((*q).clone(), p.clone())))
                        .collect();
                    let tuned = tune_lambda(
                        &pick(method_val),
                        &pick(prior_val),
                        &positives,
                        &self.config.fusion.combiners,
                        &base,
                        self.config.fusion.tune_k,
                    )?;
                    entries.push(FusionEntry {
                        model: model.clone(),
                        condition,
                        prior: prior_label.clone(),
                        tuned,
                    });
                }
            }
            write_json(&path, &entries)?;
            Ok(entries)
        })?;
        self.mark(rel.to_string(), true);
        Ok(entries)
    }

    fn conditions(&self) -> Vec<Condition> {
        let present: BTreeSet<Condition> = self.corpus().queries().iter().map(|q| q.condition).collect();
        Condition::ALL.into_iter().filter(|c| present.contains(c)).collect()
    }

    /// Fused eval rankings for `method` with the retrieval prior.
    fn fused(
        &self,
        label: &str,
        rankings_rel: &str,
        fusion_rel: &str,
        method: impl Fn(&[String]) -> Result<MethodRankings>,
    ) -> Result<MethodRankings> {
        self.cached_rankings(rankings_rel, "fusion", || {
            let prior = self.prior()?;
            let entries = if self.dir.join(fusion_rel).exists() {
                self.fusion_entries(fusion_rel, &BTreeMap::new(), &BTreeMap::new())?
            } else {
                let method_val = method(&self.val_qids)?;
                let prior_val = self.compute_base(prior, &self.val_qids)?;
                self.fusion_entries(fusion_rel, &method_val, &prior_val)?
            };
            let by_cell: BTreeMap<(&str, Condition), &FusionConfig> = entries
                .iter()
                .map(|e| ((e.model.as_str(), e.condition), &e.tuned.config))
                .collect();
            let method_eval = method(&self.eval_qids)?;
            let prior_eval = self.compute_base(prior, &self.eval_qids)?;
            stage("fusion", || {
                let corpus = self.corpus();
                method_eval
                    .iter()
                    .map(|(qid, a)| {
                        let q = corpus.query(qid).expect("eval ids come from the corpus");
                        let config = by_cell
                            .get(&(q.target_model.as_str(), q.condition))
                            .ok_or_else(|| Error::MissingItem(vec![format!("fusion weight for {qid}")]))?;
                        let fused = fuse(a, &prior_eval[qid], config)?.with_method(label);
                        Ok((qid.clone(), fused))
                    })
                    .collect()
            })
        })
    }

    fn eval_cells(&self, rel: &str, rankings: &BTreeMap<String, MethodRankings>) -> Result<Vec<EvalCell>> {
        let path = self.dir.join(rel);
        if path.exists() {
            self.mark(rel.to_string(), false);
            return stage("eval", || crate::eval::read_cells_csv(File::open(&path)?));
        }
        let cells = stage("eval", || {
            let cells = evaluate(self.corpus(), rankings, &self.eval_qids, &self.config.k_list)?;
            write_atomic(&path, |w| write_cells_csv(w, &cells))?;
            Ok(cells)
        })?;
        self.mark(rel.to_string(), true);
        Ok(cells)
    }

    fn run(&self) -> Result<()> {
        let c = self.config;
        let mut main: BTreeMap<String, MethodRankings> = BTreeMap::new();
        for base in self.requested_bases() {
            let label = self.base_label(base);
            let rel = format!("rankings/{}.jsonl", slug(&label));
            let lists = self.cached_rankings(
                &rel,
                if matches!(base, Base::MinHash(_)) {
                    "minhash"
                } else {
                    "dense"
                },
                || self.compute_base(base, &self.eval_qids),
            )?;
            main.insert(label, lists);
        }
        if c.wants(Method::Steer) {
            let lists =
                self.cached_rankings("rankings/steer.jsonl", "steer", || self.steer_rankings(&self.eval_qids))?;
            main.insert(STEER_LABEL.into(), lists);
        }
        if c.wants(Method::SteerFuse) {
            let lists = self.fused(
                STEER_FUSE_LABEL,
                "rankings/steer-fuse.jsonl",
                "fusion/steer-fuse.json",
                |q| self.steer_rankings(q),
            )?;
            main.insert(STEER_FUSE_LABEL.into(), lists);
        }

        let scorer = c.wants(Method::Scorer);
        let ablation = c.wants(Method::ScorerFuseAblation);
        let mut per_seed: Vec<Vec<EvalCell>> = Vec::new();
        if scorer || ablation {
            for (i, &seed) in c.seeds.iter().enumerate() {
                let sd = self.seed_dir(seed);
                let scorers: OnceCell<BTreeMap<String, ScorerParams>> = OnceCell::new();
                let get = || -> Result<&BTreeMap<String, ScorerParams>> {
                    if let Some(s) = scorers.get() {
                        return Ok(s);
                    }
                    let s = self.scorers(seed)?;
                    Ok(scorers.get_or_init(|| s))
                };
                let mut seeded: BTreeMap<String, MethodRankings> = BTreeMap::new();
                if scorer {
                    let rel = format!("{sd}/rankings/{SCORER_LABEL}.jsonl");
                    let lists =
                        self.cached_rankings(&rel, "scorer-rank", || self.scorer_rank(get()?, &self.eval_qids))?;
                    seeded.insert(SCORER_LABEL.into(), lists);
                }
                if ablation {
                    let lists = self.fused(
                        SCORER_FUSE_LABEL,
                        &format!("{sd}/rankings/{SCORER_FUSE_LABEL}.jsonl"),
                        &format!("{sd}/fusion/{SCORER_FUSE_LABEL}.json"),
                        |q| self.scorer_rank(get()?, q),
                    )?;
                    seeded.insert(SCORER_FUSE_LABEL.into(), lists);
                }
                per_seed.push(self.eval_cells(&format!("{sd}/{CELLS_FILE}"), &seeded)?);
                if i == 0 {
                    for (label, lists) in &seeded {
                        let rel = format!("rankings/{}.jsonl", slug(label));
                        let path = self.dir.join(&rel);
                        if path.exists() {
                            self.mark(rel, false);
                        } else {
                            stage("rankings", || {
                                write_atomic(&path, |w| write_rankings(w, lists.values(), c.ranking_depth))
                            })?;
                            self.mark(rel, true);
                        }
                    }
                    main.extend(seeded);
                }
            }
        }

        let cells_path = self.dir.join(CELLS_FILE);
        if cells_path.exists() {
            self.mark(CELLS_FILE.into(), false);
        } else {
            stage("eval", || {
                let mut cells = evaluate(self.corpus(), &main, &self.eval_qids, &c.k_list)?;
                cells.sort_by(|a, b| a.key().cmp(&b.key()));
                write_atomic(&cells_path, |w| write_cells_csv(w, &cells))
            })?;
            self.mark(CELLS_FILE.into(), true);
        }

        if c.wants(Method::Steer) || c.wants(Method::SteerFuse) {
            let path = self.dir.join(FIDELITY_FILE);
            if path.exists() {
                self.mark(FIDELITY_FILE.into(), false);
            } else {
                stage("fidelity", || {
                    let report: FidelityReport = proxy_fidelity_report(&c.fidelity)?;
                    write_json(&path, &report)
                })?;
                self.mark(FIDELITY_FILE.into(), true);
            }
        }

        let report_path = self.dir.join(REPORT_FILE);
        if report_path.exists() {
            self.mark(REPORT_FILE.into(), false);
        } else {
            stage("report", || write_report(&self.dir, c))?;
            self.mark(REPORT_FILE.into(), true);
        }
        Ok(())
    }
}

fn mine_one(corpus: &Corpus, index: &VectorIndex, bundle: &FeatureBundle, qid: &str, n: usize) -> Result<Vec<String>> {
    let key = mode_key(qid, QueryMode::QA);
    let v = bundle
        .vector(&key)
        .ok_or_else(|| Error::MissingItem(vec![key.clone()]))?;
    let positives = corpus
        .positives(qid)
        .ok_or_else(|| Error::EmptyPositives(qid.to_string()))?;
    mine_negatives(index, v, positives, n)
}

/// Query ids of the eval side, or of every query when the split leaves
/// the eval side empty.
fn eval_query_ids(corpus: &Corpus, split: &SplitManifest) -> Vec<String> {
    let mut ids: Vec<String> = corpus
        .queries()
        .iter()
        .filter(|q| corpus.query_parent(&q.query_id).is_some_and(|p| split.is_eval(p)))
        .map(|q| q.query_id.clone())
        .collect();
    if ids.is_empty() {
        log::warn!("eval split is empty; evaluating on every query");
        ids = corpus.queries().iter().map(|q| q.query_id.clone()).collect();
    }
    ids.sort();
    ids
}

fn validation_query_ids(corpus: &Corpus, split: &SplitManifest, fraction: f64) -> Vec<String> {
    let (_, val) = carve_validation(&split.train_parent_ids, fraction, split.seed);
    let mut ids: Vec<String> = corpus
        .queries()
        .iter()
        .filter(|q| corpus.query_parent(&q.query_id).is_some_and(|p| val.contains(p)))
        .map(|q| q.query_id.clone())
        .collect();
    ids.sort();
    ids
}

/// Directory a config's artifacts go to.
pub fn run_dir(config: &RunConfig) -> Result<PathBuf> {
    let digest = config.digest()?;
    Ok(config.output_dir.join(format!("run-{}", &digest[..16])))
}

/// Validates `config`, then runs every requested stage with a worker pool
/// sized by `options`.
pub fn run(config: &RunConfig, options: &RunOptions) -> Result<RunOutcome> {
    #[cfg(feature = "parallel")]
    {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = options.workers {
            builder = builder.num_threads(n);
        }
        let pool = builder.build().map_err(|e| Error::InvalidConfig(e.to_string()))?;
        pool.install(|| run_inner(config))
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = options;
        run_inner(config)
    }
}

fn run_inner(config: &RunConfig) -> Result<RunOutcome> {
    stage("validate", || config.validate())?;
    let inputs = load_inputs(config)?;
    let digest = stage("validate", || config.digest())?;
    let dir = config.output_dir.join(format!("run-{}", &digest[..16]));
    let started = unix_now();

    let split_path = dir.join(crate::corpus::SPLIT_FILE);
    let (split, split_cached) = stage("split", || {
        if split_path.exists() {
            Ok((SplitManifest::load(&split_path)?, true))
        } else {
            Ok((
                split_corpus(&inputs.corpus, config.split.ratio, config.split.seed)?,
                false,
            ))
        }
    })?;
    let eval_qids = eval_query_ids(&inputs.corpus, &split);
    let val_qids = validation_query_ids(&inputs.corpus, &split, config.train.val_fraction);
    let runner = Runner {
        config,
        dir: dir.clone(),
        inputs,
        split,
        eval_qids,
        val_qids,
        signatures: OnceCell::new(),
        features: OnceCell::new(),
        mined: OnceCell::new(),
        executed: RefCell::new(Vec::new()),
        cached: RefCell::new(Vec::new()),
    };
    stage("validate", || runner.check_requirements())?;

    fs::create_dir_all(&dir)?;
    let incomplete = dir.join(INCOMPLETE_FILE);
    fs::write(&incomplete, "run in progress\n")?;
    write_atomic(&dir.join(CONFIG_FILE), |w| {
        w.write_all(config.to_toml()?.as_bytes())?;
        Ok(())
    })?;
    if !split_cached {
        stage("split", || runner.split.save(&split_path))?;
    }
    runner.mark(crate::corpus::SPLIT_FILE.into(), !split_cached);

    if let Err(e) = runner.run() {
        fs::write(&incomplete, format!("{e}\n"))?;
        return Err(e);
    }
    let executed = runner.executed.into_inner();
    let cached = runner.cached.into_inner();
    write_json(
        &dir.join(METADATA_FILE),
        &Metadata {
            digest: &digest,
            started_unix: started,
            finished_unix: unix_now(),
            executed: &executed,
            cached: &cached,
        },
    )?;
    fs::remove_file(&incomplete)?;
    Ok(RunOutcome {
        run_dir: dir,
        executed,
        cached,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SynthSpec;
    use crate::features::SynthFeatureSpec;
    use crate::scorer::ScorerArch;

    fn small(dir: &Path, n: usize) -> RunConfig {
        let out = make_synth(
            dir,
            &SynthOptions {
                n_parents: n,
                seed: 3,
                corpus: SynthSpec::default(),
                features: SynthFeatureSpec {
                    dim: 16,
                    ..Default::default()
                },
            },
        )
        .unwrap();
        let mut c = RunConfig::load(&out.config_path).unwrap();
        c.train.arch = ScorerArch {
            hidden: 32,
            proj: 16,
            ..Default::default()
        };
        c.train.max_epochs = 2;
        c.train.lr = 1e-3;
        c.train.batch_size = 16;
        c.fidelity.n_trials = 5;
        c
    }

    #[test]
    fn slugs_are_file_safe() {
        assert_eq!(slug("dense-a/b qa"), "dense-a-b-qa");
    }

    #[test]
    fn workers_env_must_be_positive() {
        std::env::set_var(WORKERS_ENV, "0");
        assert!(RunOptions::from_env().is_err());
        std::env::set_var(WORKERS_ENV, "2");
        assert_eq!(RunOptions::from_env().unwrap().workers, Some(2));
        std::env::remove_var(WORKERS_ENV);
        assert_eq!(RunOptions::from_env().unwrap(), RunOptions::default());
    }

    #[test]
    fn toy_minhash_run_writes_rankings_and_cells() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = small(dir.path(), 1);
        c.methods = vec![Method::MinhashAnswer];
        let out = run(&c, &RunOptions::default()).unwrap();
        let d = &out.run_dir;
        assert!(d.join("rankings/minhash-answer.jsonl").exists());
        let cells = crate::eval::read_cells_csv(File::open(d.join(CELLS_FILE)).unwrap()).unwrap();
        assert!(!cells.is_empty());
        assert!(cells.iter().all(|c| c.method == "minhash-answer"));
        assert!(!d.join(INCOMPLETE_FILE).exists());
        assert!(d.join(REPORT_FILE).exists());
    }

    #[test]
    fn missing_bundle_fails_before_writing() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = small(dir.path(), 2);
        c.bundles.push(dir.path().join("absent.pvfb"));
        c.output_dir = dir.path().join("fresh-runs");
        match run(&c, &RunOptions::default()) {
            Err(Error::Stage { stage, source }) => {
                assert_eq!(stage, "validate");
                assert!(matches!(*source, Error::MissingPath(ref p) if p.ends_with("absent.pvfb")));
            }
            other => panic!("expected a validation error, got {other:?}"),
        }
        assert!(!c.output_dir.exists());
    }

    #[test]
    fn full_run_is_reproducible_and_cached_by_stage() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = small(dir.path(), 12);
        c.seeds = vec![0, 1];
        let first = run(&c, &RunOptions { workers: Some(2) }).unwrap();
        let d = first.run_dir.clone();
        for f in [
            CELLS_FILE,
            REPORT_FILE,
            FIDELITY_FILE,
            SEED_SUMMARY_FILE,
            "fusion/steer-fuse.json",
            "seeds/seed-1/fusion/scorer-fuse.json",
            "rankings/steer.jsonl",
            "rankings/scorer.jsonl",
            "rankings/scorer-fuse.jsonl",
        ] {
            assert!(d.join(f).exists(), "{f} missing");
        }
        let cells = fs::read(d.join(CELLS_FILE)).unwrap();
        let again = run(&c, &RunOptions::default()).unwrap();
        assert_eq!(again.run_dir, d);
        assert!(again.executed.is_empty(), "{:?}", again.executed);

        fs::remove_file(d.join(CELLS_FILE)).unwrap();
        fs::remove_file(d.join("rankings/steer-fuse.jsonl")).unwrap();
        let partial = run(&c, &RunOptions::default()).unwrap();
        assert_eq!(partial.executed, ["rankings/steer-fuse.jsonl", CELLS_FILE]);
        assert_eq!(fs::read(d.join(CELLS_FILE)).unwrap(), cells);

        let other = dir.path().join("elsewhere");
        let mut moved = c.clone();
        moved.output_dir = other;
        let fresh = run(&moved, &RunOptions { workers: Some(1) }).unwrap();
        assert_eq!(fs::read(fresh.run_dir.join(CELLS_FILE)).unwrap(), cells);
        for f in [
            "rankings/scorer.jsonl",
            "checkpoints/scorer-synth-lm-seed0.pvsm",
            SEED_SUMMARY_FILE,
        ] {
            assert_eq!(
                fs::read(d.join(f)).unwrap(),
                fs::read(fresh.run_dir.join(f)).unwrap(),
                "{f}"
            );
        }
    }
}
