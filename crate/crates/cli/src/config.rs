//! Run configuration: TOML on disk, flag overrides, path resolution.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use zsl_core::dataio::{load_dataset, Dataset, LoadOptions};
use zsl_core::evaluation::{Embedding, ExperimentConfig, Metric};
use zsl_core::inference::Matcher;
use zsl_core::regression::HyperParams;
use zsl_core::wordvec::{AttributeTable, EmbeddingSource, WordVectorStore};

/// Invalid or incomplete configuration (exit code 2).
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuxData {
    pub features: PathBuf,
    pub labels: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub features: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub word_vectors: Option<PathBuf>,
    pub attributes: Option<PathBuf>,
    pub aux: Vec<AuxData>,
    /// L2-normalize feature rows on load.
    pub normalize: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            features: None,
            labels: None,
            word_vectors: None,
            attributes: None,
            aux: Vec::new(),
            normalize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub embedding: Embedding,
    pub matcher: Matcher,
    pub self_train: bool,
    pub renormalize_adapted: bool,
    pub augment: bool,
    pub n_splits: usize,
    pub seed: u64,
    pub metric: Metric,
    /// Retained test percentage per class name.
    pub subsample: BTreeMap<String, f64>,
    pub distractors_per_class: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        let d = ExperimentConfig::default();
        ExperimentSection {
            embedding: d.embedding,
            matcher: d.matcher,
            self_train: d.self_train,
            renormalize_adapted: d.renormalize_adapted,
            augment: d.augment,
            n_splits: d.n_splits,
            seed: d.seed,
            metric: d.metric,
            subsample: BTreeMap::new(),
            distractors_per_class: d.distractors_per_class,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
    pub retain_predictions: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub experiment: ExperimentSection,
    pub hyper: HyperParams,
    pub output: OutputSection,
}

fn absolute(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        toml::from_str(text).map_err(|e| config_error(format!("config: {e}")))
    }

    /// Reads a config file; relative paths inside it are taken relative to the file.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let base = std::path::absolute(&base).unwrap_or(base);
        cfg.rebase(&base);
        Ok(cfg)
    }

    /// Makes every path absolute against `base`.
    pub fn rebase(&mut self, base: &Path) {
        let d = &mut self.data;
        for p in [
            &mut d.features,
            &mut d.labels,
            &mut d.word_vectors,
            &mut d.attributes,
            &mut self.output.dir,
        ]
        .into_iter()
        .flatten()
        {
            *p = absolute(base, p);
        }
        for a in &mut d.aux {
            a.features = absolute(base, &a.features);
            a.labels = absolute(base, &a.labels);
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.data.features.is_none() || self.data.labels.is_none() {
            return Err(config_error("[data] needs both `features` and `labels`"));
        }
        if self.data.word_vectors.is_none() && self.data.attributes.is_none() {
            return Err(config_error("[data] needs `word_vectors`, `attributes`, or both"));
        }
        if self.experiment.augment && self.data.aux.is_empty() {
            return Err(config_error("experiment.augment is set but [data] lists no `aux` datasets"));
        }
        Ok(())
    }

    pub fn output_dir(&self) -> anyhow::Result<&Path> {
        self.output
            .dir
            .as_deref()
            .ok_or_else(|| config_error("no output directory (set [output] dir or pass --out)"))
    }

    /// Core experiment settings, with class names resolved against `dataset`.
    pub fn experiment_config(&self, dataset: &Dataset) -> anyhow::Result<ExperimentConfig> {
        let e = &self.experiment;
        let mut subsample = BTreeMap::new();
        for (name, &pct) in &e.subsample {
            let id = dataset
                .class_names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| config_error(format!("subsample names unknown class {name:?}")))?;
            subsample.insert(id, pct);
        }
        let cfg = ExperimentConfig {
            embedding: e.embedding,
            matcher: e.matcher,
            self_train: e.self_train,
            renormalize_adapted: e.renormalize_adapted,
            augment: e.augment,
            hyper: self.hyper,
            n_splits: e.n_splits,
            seed: e.seed,
            metric: e.metric,
            subsample,
            distractors_per_class: e.distractors_per_class,
            retain_predictions: self.output.retain_predictions,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Everything loaded from disk for one run.
pub struct Inputs {
    pub dataset: Dataset,
    pub source: EmbeddingSource,
    pub aux: Vec<Dataset>,
}

impl Inputs {
    pub fn load(cfg: &RunConfig) -> anyhow::Result<Self> {
        cfg.validate()?;
        let opts = LoadOptions {
            normalize: cfg.data.normalize,
        };
        let d = &cfg.data;
        let dataset = load_dataset(d.features.as_ref().unwrap(), d.labels.as_ref().unwrap(), opts)?;
        let words = d.word_vectors.as_ref().map(WordVectorStore::load).transpose()?;
        let attrs = d.attributes.as_ref().map(AttributeTable::load).transpose()?;
        let source = match (words, attrs) {
            (Some(words), Some(attributes)) => EmbeddingSource::Concatenated { words, attributes },
            (Some(w), None) => EmbeddingSource::WordVectors(w),
            (None, Some(a)) => EmbeddingSource::Attributes(a),
            (None, None) => unreachable!("validated"),
        };
        let aux = d
            .aux
            .iter()
            .map(|a| load_dataset(&a.features, &a.labels, opts))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Inputs { dataset, source, aux })
    }
}
