use std::collections::BTreeSet;
use std::fs::{self, File};
use std::path::{Path, PathBuf};

use super::{
    write_atomic, write_json, RunConfig, CELLS_FILE, CONFIG_FILE, DELTAS_FILE, REPORT_FILE, SEED_SUMMARY_FILE,
};
use crate::error::{Error, Result};
use crate::eval::{aggregate, read_cells_csv, render_report, seed_summary, write_deltas_csv};

/// Lexical and dense retrieval labels are the baselines of every table.
pub fn is_baseline(method: &str) -> bool {
    method.starts_with("minhash-") || method.starts_with("dense-")
}

/// Renders `report.md`, the delta table and, with two or more seeds, the
/// seed summary from the cells stored in `run_dir`.
pub fn write_report(run_dir: &Path, config: &RunConfig) -> Result<()> {
    let cells = read_cells_csv(File::open(run_dir.join(CELLS_FILE))?)?;
    let baselines: BTreeSet<String> = cells
        .iter()
        .map(|c| c.method.clone())
        .filter(|m| is_baseline(m))
        .collect();
    let agg = aggregate(&cells, &baselines, config.report_k)?;
    let summary = if config.seeds.len() >= 2 {
        let mut runs = Vec::new();
        for s in &config.seeds {
            let path = run_dir.join(format!("seeds/seed-{s}/{CELLS_FILE}"));
            if path.exists() {
                runs.push(read_cells_csv(File::open(path)?)?);
            }
        }
        if runs.len() == config.seeds.len() {
            let summary = seed_summary(&runs)?;
            write_json(&run_dir.join(SEED_SUMMARY_FILE), &summary)?;
            Some(summary)
        } else {
            None
        }
    } else {
        None
    };
    if !baselines.is_empty() {
        write_atomic(&run_dir.join(DELTAS_FILE), |w| write_deltas_csv(w, &agg))?;
    }
    let md = render_report(&agg, summary.as_ref());
    write_atomic(&run_dir.join(REPORT_FILE), |w| {
        std::io::Write::write_all(w, md.as_bytes())?;
        Ok(())
    })
}

/// Regenerates the report of an existing run directory.
pub fn report(run_dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = run_dir.as_ref();
    let config_path = dir.join(CONFIG_FILE);
    if !config_path.exists() {
        return Err(Error::MissingPath(config_path));
    }
    let config = RunConfig::from_toml(&fs::read_to_string(&config_path)?)?;
    let cells = dir.join(CELLS_FILE);
    if !cells.exists() {
        return Err(Error::MissingPath(cells));
    }
    write_report(dir, &config).map_err(|e| e.in_stage("report"))?;
    Ok(dir.join(REPORT_FILE))
}
