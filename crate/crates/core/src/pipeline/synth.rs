use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{write_atomic, RunConfig};
use crate::corpus::{save_corpus, synth_corpus, SynthSpec};
use crate::error::Result;
use crate::features::{synth_features, SynthFeatureSpec};

pub const SYNTH_CONFIG_FILE: &str = "pvrank.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthOptions {
    pub n_parents: usize,
    pub seed: u64,
    pub corpus: SynthSpec,
    pub features: SynthFeatureSpec,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            n_parents: 200,
            seed: 0,
            corpus: SynthSpec::default(),
            features: SynthFeatureSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub corpus_dir: PathBuf,
    pub bundles: Vec<PathBuf>,
    /// Run config pointing at the generated files, with default settings.
    pub config_path: PathBuf,
}

/// Writes a synthetic corpus, its feature bundles and a run config under
/// `out`.
pub fn make_synth(out: impl AsRef<Path>, options: &SynthOptions) -> Result<SynthOutput> {
    let out = out.as_ref();
    let corpus = synth_corpus(options.n_parents, options.seed, &options.corpus)?;
    let bundles = synth_features(&corpus, options.seed, &options.features)?;
    let corpus_dir = out.join("corpus");
    fs::create_dir_all(&corpus_dir)?;
    save_corpus(&corpus, &corpus_dir)?;
    let mut rel = Vec::new();
    for b in bundles.all() {
        let name = PathBuf::from("features").join(format!("{}.pvfb", super::slug(&b.source_label)));
        let path = out.join(&name);
        fs::create_dir_all(path.parent().expect("joined path"))?;
        b.save(&path)?;
        rel.push(name);
    }
    let config = RunConfig {
        corpus: PathBuf::from("corpus"),
        bundles: rel.clone(),
        output_dir: PathBuf::from("runs"),
        ..RunConfig::default()
    };
    let config_path = out.join(SYNTH_CONFIG_FILE);
    let text = config.to_toml()?;
    write_atomic(&config_path, |w| {
        std::io::Write::write_all(w, text.as_bytes())?;
        Ok(())
    })?;
    Ok(SynthOutput {
        corpus_dir,
        bundles: rel.into_iter().map(|p| out.join(p)).collect(),
        config_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::load_corpus;
    use crate::features::load_bundle;

    fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
        let mut out = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn one_parent_gives_a_four_document_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let out = make_synth(
            dir.path(),
            &SynthOptions {
                n_parents: 1,
                ..Default::default()
            },
        )
        .unwrap();
        let corpus = load_corpus(&out.corpus_dir).unwrap();
        assert_eq!(corpus.documents().len(), 4);
        for b in &out.bundles {
            load_bundle(b).unwrap();
        }
        let config = RunConfig::load(&out.config_path).unwrap();
        config.validate().unwrap();
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let opts = SynthOptions {
            n_parents: 5,
            seed: 9,
            ..Default::default()
        };
        make_synth(a.path(), &opts).unwrap();
        make_synth(b.path(), &opts).unwrap();
        assert_eq!(tree(a.path()), tree(b.path()));
    }
}
