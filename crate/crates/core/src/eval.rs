//! Recall@k evaluation, per-cell tables, best-of-baselines comparison,
//! win counts, transformed-query averages and seed summaries.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::corpus::{Condition, Corpus, PositiveSet};
use crate::error::{Error, Result};
use crate::ranking::RankedList;

pub const DEFAULT_K_LIST: [usize; 3] = [1, 5, 10];

/// True iff any valid positive is among the top-k. Anti-documents are never
/// members of a positive set, so they cannot produce a hit.
pub fn recall_at_k(ranked: &RankedList, positives: &PositiveSet, k: usize) -> Result<bool> {
    if positives.valid_doc_ids.is_empty() {
        return Err(Error::EmptyPositives(positives.query_id.clone()));
    }
    Ok(ranked.top(k).iter().any(|s| positives.contains(&s.doc_id)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCell {
    pub method: String,
    pub model: String,
    pub condition: Condition,
    pub k: usize,
    pub recall: f64,
    pub hits: usize,
    pub n: usize,
}

impl EvalCell {
    pub fn key(&self) -> (&str, &str, Condition, usize) {
        (&self.method, &self.model, self.condition, self.k)
    }
}

/// Rankings of one method, keyed by query id.
pub type MethodRankings = BTreeMap<String, RankedList>;

/// One cell per (method, model, condition, k) over `query_ids`.
pub fn evaluate(
    corpus: &Corpus,
    rankings: &BTreeMap<String, MethodRankings>,
    query_ids: &[String],
    k_list: &[usize],
) -> Result<Vec<EvalCell>> {
    if k_list.contains(&0) {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    let mut cells = Vec::new();
    for (method, lists) in rankings {
        let mut tally: BTreeMap<(String, Condition, usize), (usize, usize)> = BTreeMap::new();
        for qid in query_ids {
            let query = corpus.query(qid).ok_or_else(|| Error::MissingItem(vec![qid.clone()]))?;
            let list = lists.get(qid).ok_or_else(|| Error::MissingRanking {
                method: method.clone(),
                query_id: qid.clone(),
            })?;
            let positives = corpus
                .positives(qid)
                .ok_or_else(|| Error::EmptyPositives(qid.clone()))?;
            for &k in k_list {
                let hit = recall_at_k(list, positives, k)?;
                let slot = tally
                    .entry((query.target_model.clone(), query.condition, k))
                    .or_default();
                slot.0 += hit as usize;
                slot.1 += 1;
            }
        }
        for ((model, condition, k), (hits, n)) in tally {
            cells.push(EvalCell {
                method: method.clone(),
                model,
                condition,
                k,
                recall: hits as f64 / n as f64,
                hits,
                n,
            });
        }
    }
    Ok(cells)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub method: String,
    pub model: String,
    pub condition: Condition,
    pub recall: f64,
    pub best_baseline: String,
    pub baseline_recall: f64,
    pub delta: f64,
    pub win: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub k: usize,
    pub models: Vec<String>,
    pub conditions: Vec<Condition>,
    pub baselines: Vec<String>,
    pub methods: Vec<String>,
    /// Non-baseline methods against the best baseline of each cell.
    pub comparisons: Vec<Comparison>,
    /// method -> (wins, cells)
    pub wins: BTreeMap<String, (usize, usize)>,
    /// method -> condition -> mean over models
    pub condition_means: BTreeMap<String, BTreeMap<Condition, f64>>,
    /// method -> model -> mean over transformed conditions
    pub transformed_means: BTreeMap<String, BTreeMap<String, f64>>,
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    s / n as f64
}

/// Compares every non-baseline method with the best baseline per
/// (model, condition) at cutoff `k`. Wins use strict inequality. With no
/// baselines only the means are filled in.
pub fn aggregate(cells: &[EvalCell], baselines: &BTreeSet<String>, k: usize) -> Result<AggregateReport> {
    let at_k: Vec<&EvalCell> = cells.iter().filter(|c| c.k == k).collect();
    let models: BTreeSet<&str> = at_k.iter().map(|c| c.model.as_str()).collect();
    let conditions: BTreeSet<Condition> = at_k.iter().map(|c| c.condition).collect();
    let methods: BTreeSet<&str> = at_k.iter().map(|c| c.method.as_str()).collect();
    if models.is_empty() {
        return Err(Error::IncompleteGrid(format!("no cells at k={k}")));
    }
    let mut grid: BTreeMap<(&str, &str, Condition), f64> = BTreeMap::new();
    for c in &at_k {
        grid.insert((&c.method, &c.model, c.condition), c.recall);
    }
    for &m in &methods {
        for &model in &models {
            for &cond in &conditions {
                if !grid.contains_key(&(m, model, cond)) {
                    return Err(Error::IncompleteGrid(format!("{m} / {model} / {cond} at k={k}")));
                }
            }
        }
    }
    for b in baselines {
        if !methods.contains(b.as_str()) {
            return Err(Error::IncompleteGrid(format!("baseline {b} has no cells at k={k}")));
        }
    }
    let proposed: Vec<&str> = if baselines.is_empty() {
        Vec::new()
    } else {
        methods.iter().copied().filter(|m| !baselines.contains(*m)).collect()
    };

    let mut comparisons = Vec::new();
    let mut wins = BTreeMap::new();
    for &m in &proposed {
        let mut won = 0;
        let mut total = 0;
        for &model in &models {
            for &cond in &conditions {
                let recall = grid[&(m, model, cond)];
                // First maximum in label order.
                let (best, best_recall) = baselines
                    .iter()
                    .map(|b| (b.as_str(), grid[&(b.as_str(), model, cond)]))
                    .fold(None, |acc: Option<(&str, f64)>, (b, r)| match acc {
                        Some((_, br)) if br >= r => acc,
                        _ => Some((b, r)),
                    })
                    .ok_or_else(|| Error::IncompleteGrid("empty baseline set".into()))?;
                let win = recall > best_recall;
                won += win as usize;
                total += 1;
                comparisons.push(Comparison {
                    method: m.to_string(),
                    model: model.to_string(),
                    condition: cond,
                    recall,
                    best_baseline: best.to_string(),
                    baseline_recall: best_recall,
                    delta: recall - best_recall,
                    win,
                });
            }
        }
        wins.insert(m.to_string(), (won, total));
    }

    let mut condition_means = BTreeMap::new();
    let mut transformed_means = BTreeMap::new();
    for &m in &methods {
        let per_cond: BTreeMap<Condition, f64> = conditions
            .iter()
            .map(|&cond| (cond, mean(models.iter().map(|model| grid[&(m, *model, cond)]))))
            .collect();
        condition_means.insert(m.to_string(), per_cond);
        let transformed: Vec<Condition> = conditions.iter().copied().filter(|c| c.is_transformed()).collect();
        if !transformed.is_empty() {
            let per_model: BTreeMap<String, f64> = models
                .iter()
                .map(|&model| {
                    (
                        model.to_string(),
                        mean(transformed.iter().map(|&c| grid[&(m, model, c)])),
                    )
                })
                .collect();
            transformed_means.insert(m.to_string(), per_model);
        }
    }

    Ok(AggregateReport {
        k,
        models: models.into_iter().map(str::to_string).collect(),
        conditions: conditions.into_iter().collect(),
        baselines: baselines.iter().cloned().collect(),
        methods: methods.into_iter().map(str::to_string).collect(),
        comparisons,
        wins,
        condition_means,
        transformed_means,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedCell {
    pub method: String,
    pub model: String,
    pub condition: Condition,
    pub k: usize,
    pub mean: f64,
    pub std: f64,
    pub n_seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub cells: Vec<SeedCell>,
    /// method -> k -> condition -> mean of per-cell stds
    pub mean_std: BTreeMap<String, BTreeMap<usize, BTreeMap<Condition, f64>>>,
}

/// Sample mean and (n-1) standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.iter().all(|&v| v == values[0]) {
        return (values.first().copied().unwrap_or(f64::NAN), 0.0);
    }
    let m = mean(values.iter().copied());
    let ss: f64 = values.iter().map(|v| (v - m).powi(2)).sum();
    (m, (ss / (values.len() - 1) as f64).sqrt())
}

/// Per-cell mean and sample std across seeds. Each element of `runs` is
/// the cell set of one seed.
pub fn seed_summary(runs: &[Vec<EvalCell>]) -> Result<SeedSummary> {
    let mut by_cell: BTreeMap<(String, String, Condition, usize), Vec<f64>> = BTreeMap::new();
    for run in runs {
        for c in run {
            let (m, model, cond, k) = c.key();
            by_cell
                .entry((m.to_string(), model.to_string(), cond, k))
                .or_default()
                .push(c.recall);
        }
    }
    let mut cells = Vec::with_capacity(by_cell.len());
    let mut stds: BTreeMap<String, BTreeMap<usize, BTreeMap<Condition, Vec<f64>>>> = BTreeMap::new();
    for ((method, model, condition, k), values) in by_cell {
        if values.len() < 2 {
            return Err(Error::SingleSeed(format!("{method} / {model} / {condition} at k={k}")));
        }
        let (mean, std) = mean_std(&values);
        stds.entry(method.clone())
            .or_default()
            .entry(k)
            .or_default()
            .entry(condition)
            .or_default()
            .push(std);
        cells.push(SeedCell {
            method,
            model,
            condition,
            k,
            mean,
            std,
            n_seeds: values.len(),
        });
    }
    let mean_std = stds
        .into_iter()
        .map(|(m, by_k)| {
            let by_k = by_k
                .into_iter()
                .map(|(k, by_c)| (k, by_c.into_iter().map(|(c, v)| (c, mean(v))).collect()))
                .collect();
            (m, by_k)
        })
        .collect();
    Ok(SeedSummary { cells, mean_std })
}

pub fn write_cells_csv<W: Write>(out: W, cells: &[EvalCell]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for c in cells {
        w.serialize(c).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_cells_csv<R: Read>(input: R) -> Result<Vec<EvalCell>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::MalformedRecord {
        file: "cells.csv".into(),
        line,
        reason: e.to_string(),
    }
}

/// Per-cell deltas against the best baseline, for plotting.
pub fn write_deltas_csv<W: Write>(out: W, report: &AggregateReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for c in &report.comparisons {
        w.serialize(c).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn pct(r: f64) -> String {
    format!("{:.1}", 100.0 * r)
}

/// Markdown tables: per-condition means, best-baseline comparison with
/// wins, transformed-query averages, and seed robustness when available.
pub fn render_report(report: &AggregateReport, seeds: Option<&SeedSummary>) -> String {
    let k = report.k;
    let mut md = String::new();
    let conds = &report.conditions;
    let _ = writeln!(md, "# Attribution report\n");
    let _ = writeln!(md, "## Recall@{k} by condition (mean over models)\n");
    let _ = write!(md, "| Method |");
    for c in conds {
        let _ = write!(md, " {c} |");
    }
    let _ = writeln!(md);
    let _ = writeln!(md, "|---|{}", "---|".repeat(conds.len()));
    for m in &report.methods {
        let tag = if report.baselines.contains(m) { "" } else { " *" };
        let _ = write!(md, "| {m}{tag} |");
        for c in conds {
            let _ = write!(md, " {} |", pct(report.condition_means[m][c]));
        }
        let _ = writeln!(md);
    }
    let _ = writeln!(md, "\n`*` marks methods compared against the baselines.\n");

    for (m, (won, total)) in &report.wins {
        let _ = writeln!(md, "## {m} vs best baseline (Recall@{k})\n");
        let _ = writeln!(md, "| Model | Condition | Best baseline | Baseline | {m} | Delta |");
        let _ = writeln!(md, "|---|---|---|---|---|---|");
        for c in report.comparisons.iter().filter(|c| &c.method == m) {
            let mark = if c.win { " **" } else { "" };
            let _ = writeln!(
                md,
                "| {} | {} | {} | {} | {}{} | {:+.1} |",
                c.model,
                c.condition,
                c.best_baseline,
                pct(c.baseline_recall),
                pct(c.recall),
                mark,
                100.0 * c.delta
            );
        }
        let _ = writeln!(md, "\nWins: {won}/{total} cells.\n");
    }

    if !report.transformed_means.is_empty() {
        let _ = writeln!(
            md,
            "## Average transformed-query Recall@{k} by model (Clean excluded)\n"
        );
        let _ = write!(md, "| Method |");
        for model in &report.models {
            let _ = write!(md, " {model} |");
        }
        let _ = writeln!(md, " Mean |");
        let _ = writeln!(md, "|---|{}---|", "---|".repeat(report.models.len()));
        for (m, per_model) in &report.transformed_means {
            let _ = write!(md, "| {m} |");
            for model in &report.models {
                let _ = write!(md, " {} |", pct(per_model[model]));
            }
            let _ = writeln!(md, " {} |", pct(mean(per_model.values().copied())));
        }
        let _ = writeln!(md);
    }

    if let Some(s) = seeds {
        let _ = writeln!(md, "## Seed robustness (Recall@{k}, mean ± std)\n");
        let _ = writeln!(md, "| Method | Model | Condition | Mean | Std | Seeds |");
        let _ = writeln!(md, "|---|---|---|---|---|---|");
        for c in s.cells.iter().filter(|c| c.k == k) {
            let _ = writeln!(
                md,
                "| {} | {} | {} | {} | {} | {} |",
                c.method,
                c.model,
                c.condition,
                pct(c.mean),
                pct(c.std),
                c.n_seeds
            );
        }
        let _ = writeln!(md);
        for (m, by_k) in &s.mean_std {
            if let Some(by_c) = by_k.get(&k) {
                let avg = mean(by_c.values().copied());
                let _ = writeln!(md, "Average std for {m}: {} points.", pct(avg));
            }
        }
    }
    md
}
