//! Metrics and the multi-split experiment runner.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{build_augmented_rows, generate_splits, subsample_test, Dataset, ZeroShotSplit, SEED_MIX};
use crate::error::{Result, ZslError};
use crate::inference::{predict, self_train, DistanceMatrix, Matcher};
use crate::linalg::normalize_columns;
use crate::regression::{EmbeddingModel, HyperParams, Regressor};
use crate::wordvec::{ClassMatrix, PrototypeSource};

/// Fraction of exact matches.
pub fn accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(ZslError::Dimension(format!("{} predictions for {} labels", predicted.len(), truth.len())));
    }
    if truth.is_empty() {
        return Err(ZslError::Data("accuracy of an empty set".into()));
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Finite-sum average precision. Instances are ranked by descending score,
/// ties by ascending index.
pub fn average_precision(scores: &[f64], relevant: &[bool]) -> Result<f64> {
    if scores.len() != relevant.len() {
        return Err(ZslError::Dimension(format!(
            "{} scores for {} relevance flags",
            scores.len(),
            relevant.len()
        )));
    }
    let positives = relevant.iter().filter(|&&r| r).count();
    if positives == 0 {
        return Err(ZslError::Data("average precision needs at least one relevant instance".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if relevant[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

/// Per-class AP over the columns of `scores` (instances x classes) and
/// their mean. Classes without positives are skipped.
pub fn mean_average_precision(scores: &Array2<f64>, truth: &[usize]) -> Result<(f64, Vec<Option<f64>>)> {
    if scores.nrows() != truth.len() {
        return Err(ZslError::Dimension(format!("{} score rows for {} labels", scores.nrows(), truth.len())));
    }
    let mut per_class = Vec::with_capacity(scores.ncols());
    for (j, col) in scores.axis_iter(Axis(1)).enumerate() {
        let rel: Vec<bool> = truth.iter().map(|&t| t == j).collect();
        if !rel.contains(&true) {
            log::warn!("class {j} has no test instances; skipped from mAP");
            per_class.push(None);
            continue;
        }
        per_class.push(Some(average_precision(&col.to_vec(), &rel)?));
    }
    let valid: Vec<f64> = per_class.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(ZslError::Data("no class has relevant instances".into()));
    }
    Ok((valid.iter().sum::<f64>() / valid.len() as f64, per_class))
}

/// Probability that a random positive outscores a random negative, ties ½.
pub fn auc(positive: &[f64], negative: &[f64]) -> Result<f64> {
    if positive.is_empty() || negative.is_empty() {
        return Err(ZslError::Data("AUC needs both positives and negatives".into()));
    }
    let mut all: Vec<(f64, bool)> = positive.iter().map(|&s| (s, true)).chain(negative.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // mid-ranks, 1-based
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * all[i..=j].iter().filter(|e| e.1).count() as f64;
        i = j + 1;
    }
    let p = positive.len() as f64;
    let n = negative.len() as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Accuracy,
    Map,
    Auc,
}

/// Which regression model maps features into the semantic space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Embedding {
    Ridge,
    Manifold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub embedding: Embedding,
    pub matcher: Matcher,
    pub self_train: bool,
    /// Rescale adapted prototypes to unit length.
    pub renormalize_adapted: bool,
    /// Pool the auxiliary datasets into the labeled set.
    pub augment: bool,
    pub hyper: HyperParams,
    pub n_splits: usize,
    pub seed: u64,
    pub metric: Metric,
    /// Retained percentage of test rows per class id.
    pub subsample: BTreeMap<usize, f64>,
    /// Training instances per training class held out as AUC negatives.
    pub distractors_per_class: usize,
    pub retain_predictions: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            embedding: Embedding::Manifold,
            matcher: Matcher::Nn,
            self_train: false,
            renormalize_adapted: true,
            augment: false,
            hyper: HyperParams::default(),
            n_splits: 50,
            seed: 0,
            metric: Metric::Accuracy,
            subsample: BTreeMap::new(),
            distractors_per_class: 0,
            retain_predictions: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        if self.n_splits == 0 {
            return Err(ZslError::Param("n_splits must be positive".into()));
        }
        match (self.metric, self.distractors_per_class) {
            (Metric::Auc, 0) => return Err(ZslError::Param("AUC needs distractors_per_class > 0".into())),
            (Metric::Accuracy | Metric::Map, d) if d > 0 => return Err(ZslError::Param("distractors are only used with the AUC metric".into())),
            _ => {}
        }
        if self.self_train && self.hyper.self_train_k == 0 {
            return Err(ZslError::Param("self_train_k must be positive".into()));
        }
        Ok(())
    }
}

/// Inputs shared by every split.
#[derive(Clone, Copy)]
pub struct ExperimentData<'a> {
    pub target: &'a Dataset,
    pub prototypes: &'a dyn PrototypeSource,
    pub aux: &'a [Dataset],
}

impl<'a> ExperimentData<'a> {
    pub fn new(target: &'a Dataset, prototypes: &'a dyn PrototypeSource) -> Self {
        ExperimentData {
            target,
            prototypes,
            aux: &[],
        }
    }

    pub fn with_aux(mut self, aux: &'a [Dataset]) -> Self {
        self.aux = aux;
        self
    }
}

/// Test-batch decisions kept for later analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetainedPredictions {
    /// Dataset row indices.
    pub instances: Vec<usize>,
    /// Dataset class ids.
    pub truth: Vec<usize>,
    pub predicted: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub split_id: usize,
    pub seed: u64,
    pub train_classes: Vec<usize>,
    pub test_classes: Vec<usize>,
    pub value: f64,
    /// Accuracy of each test class, aligned with `test_classes`.
    pub class_accuracy: Vec<f64>,
    /// Per-class AP aligned with `test_classes` when the metric is mAP.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_ap: Option<Vec<Option<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predictions: Option<RetainedPredictions>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub dataset: String,
    pub config: ExperimentConfig,
    pub per_split: Vec<SplitResult>,
    pub mean: f64,
    pub std: f64,
    pub runtime_seconds: f64,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl ExperimentReport {
    pub fn values(&self) -> Vec<f64> {
        self.per_split.iter().map(|s| s.value).collect()
    }

    /// The report with wall-clock time zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        ExperimentReport {
            runtime_seconds: 0.0,
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| ZslError::Format(format!("report: {e}")))
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json() + "\n").map_err(|e| ZslError::io(path, e))
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| ZslError::io(path, e))?)
    }

    /// Flat `split_id,metric` table.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |e| ZslError::io(path, e);
        let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        writeln!(w, "split_id,metric").map_err(io)?;
        for s in &self.per_split {
            writeln!(w, "{},{}", s.split_id, s.value).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// Seed for everything random inside one split.
pub fn split_seed(base: u64, split_id: usize) -> u64 {
    base ^ (split_id as u64).wrapping_mul(SEED_MIX)
}

/// Runs `config.n_splits` random splits of the target dataset on a pool of
/// `threads` workers (0 = one per core).
pub fn run_experiment(data: ExperimentData<'_>, config: &ExperimentConfig, threads: usize) -> Result<ExperimentReport> {
    config.validate()?;
    let splits = generate_splits(data.target.num_classes(), config.n_splits, config.seed)?;
    run_splits(data, config, &splits, threads)
}

/// Runs an explicit list of splits.
pub fn run_splits(data: ExperimentData<'_>, config: &ExperimentConfig, splits: &[ZeroShotSplit], threads: usize) -> Result<ExperimentReport> {
    config.validate()?;
    if splits.is_empty() {
        return Err(ZslError::Param("no splits to run".into()));
    }
    if config.augment && data.aux.is_empty() {
        return Err(ZslError::Param("augmentation requested without auxiliary datasets".into()));
    }
    let start = Instant::now();
    let classes = data.prototypes.class_matrix(&data.target.class_names)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| ZslError::Param(format!("thread pool: {e}")))?;
    let results: Vec<Result<SplitResult>> = pool.install(|| {
        splits
            .par_iter()
            .map(|split| {
                evaluate_split(data, &classes, config, split).map_err(|e| ZslError::Split {
                    split_id: split.split_id,
                    source: Box::new(e),
                })
            })
            .collect()
    });
    let per_split = results.into_iter().collect::<Result<Vec<_>>>()?;
    let values: Vec<f64> = per_split.iter().map(|s| s.value).collect();
    let (mean, std) = mean_std(&values);
    Ok(ExperimentReport {
        dataset: data.target.name.clone(),
        config: config.clone(),
        per_split,
        mean,
        std,
        runtime_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Holds out up to `per_class` rows of every training class (at least one
/// row stays for training). Returns (kept, held out), both sorted.
fn hold_out_distractors(target: &Dataset, train_classes: &[usize], per_class: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kept = Vec::new();
    let mut held = Vec::new();
    for &c in train_classes {
        let rows = target.rows_of(&[c]);
        let take = per_class.min(rows.len().saturating_sub(1));
        let picked: Vec<usize> = rand::seq::index::sample(&mut rng, rows.len(), take).into_vec();
        for (i, r) in rows.into_iter().enumerate() {
            if picked.contains(&i) {
                held.push(r);
            } else {
                kept.push(r);
            }
        }
    }
    kept.sort_unstable();
    held.sort_unstable();
    (kept, held)
}

/// Everything computed for one split before matching.
#[derive(Debug, Clone)]
pub struct PreparedSplit {
    pub seed: u64,
    /// Dataset rows of the test instances.
    pub test_rows: Vec<usize>,
    /// Held-out training rows appended to the batch as negatives.
    pub distractors: Vec<usize>,
    /// Unit projections of the batch (test rows, then distractors), d_z x n.
    pub projections: Array2<f64>,
    /// Unit test-class prototypes, d_z x C_te.
    pub prototypes: Array2<f64>,
    /// Self-trained prototypes, when enabled.
    pub adapted: Option<Array2<f64>>,
}

impl PreparedSplit {
    /// Prototypes used for matching.
    pub fn matching_prototypes(&self) -> &Array2<f64> {
        self.adapted.as_ref().unwrap_or(&self.prototypes)
    }
}

/// Model fitted for one split, with the rows it was fitted around.
#[derive(Debug, Clone)]
pub struct SplitModel {
    pub seed: u64,
    pub test_rows: Vec<usize>,
    pub distractors: Vec<usize>,
    pub model: EmbeddingModel,
}

/// Selects the split's rows and fits the configured embedding.
///
/// `classes` holds the prototype of every target class in dataset order.
pub fn fit_split(data: ExperimentData<'_>, classes: &ClassMatrix, config: &ExperimentConfig, split: &ZeroShotSplit) -> Result<SplitModel> {
    let target = data.target;
    if split.train_classes.is_empty() || split.test_classes.is_empty() {
        return Err(ZslError::Param("split needs both training and test classes".into()));
    }
    let seed = split_seed(config.seed, split.split_id);
    let (train_rows, distractors) = if config.metric == Metric::Auc {
        hold_out_distractors(target, &split.train_classes, config.distractors_per_class, seed)
    } else {
        (target.rows_of(&split.train_classes), Vec::new())
    };
    let test_rows = if config.subsample.is_empty() {
        target.rows_of(&split.test_classes)
    } else {
        subsample_test(target, split, &config.subsample, seed)?
    };
    let batch_rows: Vec<usize> = test_rows.iter().chain(&distractors).copied().collect();
    let x_batch = target.rows(&batch_rows);

    let mut params = config.hyper;
    if config.embedding == Embedding::Ridge {
        params.manifold = 0.0;
    }
    let regressor = Regressor::new(params);
    let model = if config.augment {
        let test_names: Vec<String> = split.test_classes.iter().map(|&c| target.class_names[c].clone()).collect();
        let set = build_augmented_rows(target, &train_rows, &test_names, data.aux, data.prototypes)?;
        match config.embedding {
            Embedding::Ridge => regressor.fit_ridge(set.features.view(), set.targets.view())?,
            Embedding::Manifold => regressor.fit_augmented(&set, x_batch.view())?,
        }
    } else {
        let x_train = target.rows(&train_rows);
        let cols: Vec<usize> = train_rows.iter().map(|&r| target.labels[r]).collect();
        let z_train = classes.matrix.select(Axis(1), &cols);
        match config.embedding {
            Embedding::Ridge => regressor.fit_ridge(x_train.view(), z_train.view())?,
            Embedding::Manifold => regressor.fit_manifold(x_train.view(), z_train.view(), x_batch.view())?,
        }
    };
    Ok(SplitModel {
        seed,
        test_rows,
        distractors,
        model,
    })
}

/// Fits the embedding for one split, projects the test batch and, if
/// configured, self-trains the test prototypes.
pub fn prepare_split(data: ExperimentData<'_>, classes: &ClassMatrix, config: &ExperimentConfig, split: &ZeroShotSplit) -> Result<PreparedSplit> {
    let SplitModel {
        seed,
        test_rows,
        distractors,
        model,
    } = fit_split(data, classes, config, split)?;
    let batch_rows: Vec<usize> = test_rows.iter().chain(&distractors).copied().collect();
    let x_batch = data.target.rows(&batch_rows);
    let projections = model.project(x_batch.view())?.vectors;

    let mut prototypes = classes.select(&split.test_classes);
    normalize_columns(&mut prototypes);
    let adapted = if config.self_train {
        Some(self_train(
            prototypes.view(),
            projections.view(),
            config.hyper.self_train_k,
            config.renormalize_adapted,
        )?)
    } else {
        None
    };
    Ok(PreparedSplit {
        seed,
        test_rows,
        distractors,
        projections,
        prototypes,
        adapted,
    })
}

/// Fits, projects, optionally self-trains, matches and scores one split.
pub fn evaluate_split(data: ExperimentData<'_>, classes: &ClassMatrix, config: &ExperimentConfig, split: &ZeroShotSplit) -> Result<SplitResult> {
    let target = data.target;
    let prepared = prepare_split(data, classes, config, split)?;
    let seed = prepared.seed;
    let test_rows = &prepared.test_rows;
    let n_batch = test_rows.len() + prepared.distractors.len();
    let distances = DistanceMatrix::between(prepared.projections.view(), prepared.matching_prototypes().view())?;

    // local class index of every test row
    let local: Vec<usize> = test_rows
        .iter()
        .map(|&r| split.test_classes.binary_search(&target.labels[r]).expect("test row of a test class"))
        .collect();
    let n_test = test_rows.len();
    let test_distances = if prepared.distractors.is_empty() {
        distances.clone()
    } else {
        DistanceMatrix::from_values(distances.values.slice(ndarray::s![..n_test, ..]).to_owned())?
    };
    let prediction = predict(config.matcher, &test_distances)?;

    let mut class_accuracy = vec![0.0; split.test_classes.len()];
    let mut class_count = vec![0usize; split.test_classes.len()];
    for (&t, &p) in local.iter().zip(&prediction.labels) {
        class_count[t] += 1;
        if t == p {
            class_accuracy[t] += 1.0;
        }
    }
    for (a, &n) in class_accuracy.iter_mut().zip(&class_count) {
        if n > 0 {
            *a /= n as f64;
        }
    }

    let mut class_ap = None;
    let value = match config.metric {
        Metric::Accuracy => accuracy(&prediction.labels, &local)?,
        Metric::Map => {
            let (map, per_class) = mean_average_precision(&(-&test_distances.values), &local)?;
            class_ap = Some(per_class);
            map
        }
        Metric::Auc => {
            let mut total = 0.0;
            for j in 0..split.test_classes.len() {
                let col = distances.values.column(j);
                let pos: Vec<f64> = (0..n_test).filter(|&i| local[i] == j).map(|i| -col[i]).collect();
                let neg: Vec<f64> = (n_test..n_batch).map(|i| -col[i]).collect();
                total += auc(&pos, &neg)?;
            }
            total / split.test_classes.len() as f64
        }
    };

    let predictions = config.retain_predictions.then(|| RetainedPredictions {
        instances: test_rows.clone(),
        truth: test_rows.iter().map(|&r| target.labels[r]).collect(),
        predicted: prediction.labels.iter().map(|&p| split.test_classes[p]).collect(),
    });
    Ok(SplitResult {
        split_id: split.split_id,
        seed,
        train_classes: split.train_classes.clone(),
        test_classes: split.test_classes.clone(),
        value,
        class_accuracy,
        class_ap,
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_synthetic, SyntheticSpec};

    #[test]
    fn accuracy_examples() {
        assert!((accuracy(&[0, 1, 1], &[0, 1, 0]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(accuracy(&[2, 2], &[2, 2]).unwrap(), 1.0);
        assert!(accuracy(&[], &[]).is_err());
        assert!(accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn ap_examples() {
        let ap = average_precision(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(average_precision(&[0.1, 0.9, 0.5], &[false, true, true]).unwrap(), 1.0);
        assert!(average_precision(&[0.1], &[false]).is_err());
        // tie goes to the lower index
        assert_eq!(average_precision(&[0.5, 0.5], &[true, false]).unwrap(), 1.0);
        assert_eq!(average_precision(&[0.5, 0.5], &[false, true]).unwrap(), 0.5);
    }

    #[test]
    fn map_skips_empty_class() {
        let scores = ndarray::array![[1.0, 0.0, 0.2], [0.0, 1.0, 0.1]];
        let (m, per) = mean_average_precision(&scores, &[0, 1]).unwrap();
        assert_eq!(m, 1.0);
        assert_eq!(per[2], None);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.8], &[0.1, 0.2]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5, 0.5], &[0.5]).unwrap(), 0.5);
        assert_eq!(auc(&[0.1], &[0.5, 0.05]).unwrap(), 0.5);
        assert!(auc(&[], &[0.1]).is_err());
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }

    #[test]
    fn config_validation() {
        let mut c = ExperimentConfig {
            metric: Metric::Auc,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        c.distractors_per_class = 3;
        c.validate().unwrap();
        c.metric = Metric::Map;
        assert!(c.validate().is_err());
    }

    fn planted() -> crate::dataio::SyntheticData {
        generate_synthetic(&SyntheticSpec {
            noise_sigma: 0.0,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn planted_noiseless_is_perfect() {
        let syn = planted();
        let config = ExperimentConfig {
            embedding: Embedding::Ridge,
            hyper: HyperParams {
                ridge: 1e-10,
                ..Default::default()
            },
            ..Default::default()
        };
        let data = ExperimentData::new(&syn.dataset, &syn.prototypes);
        let report = run_splits(data, &config, std::slice::from_ref(&syn.split), 1).unwrap();
        assert_eq!(report.mean, 1.0);
        assert_eq!(report.per_split[0].class_accuracy, vec![1.0; 4]);
    }

    #[test]
    fn metrics_and_retention() {
        let syn = generate_synthetic(&SyntheticSpec::default()).unwrap();
        let data = ExperimentData::new(&syn.dataset, &syn.prototypes);
        let mut config = ExperimentConfig {
            n_splits: 3,
            metric: Metric::Map,
            retain_predictions: true,
            ..Default::default()
        };
        let r = run_experiment(data, &config, 2).unwrap();
        assert_eq!(r.per_split.len(), 3);
        let p = r.per_split[0].predictions.as_ref().unwrap();
        assert_eq!(p.instances.len(), p.predicted.len());
        assert!(r.per_split.iter().all(|s| s.value > 0.0 && s.value <= 1.0));

        config.metric = Metric::Auc;
        config.distractors_per_class = 5;
        let r = run_experiment(data, &config, 2).unwrap();
        assert!(r.per_split.iter().all(|s| (0.0..=1.0).contains(&s.value)));
        // held-out rows never reach the test predictions
        let p = r.per_split[0].predictions.as_ref().unwrap();
        assert!(p.truth.iter().all(|c| r.per_split[0].test_classes.contains(c)));
    }

    #[test]
    fn split_errors_carry_id() {
        let syn = planted();
        let config = ExperimentConfig {
            matcher: Matcher::Gc,
            subsample: (0..10).map(|c| (c, 1.0)).collect(),
            ..Default::default()
        };
        let data = ExperimentData::new(&syn.dataset, &syn.prototypes);
        let split = ZeroShotSplit {
            split_id: 7,
            train_classes: (0..9).collect(),
            test_classes: vec![9],
            seed: 0,
        };
        match run_splits(data, &config, &[split], 1) {
            Err(ZslError::Split { split_id: 7, .. }) => {}
            other => panic!("expected split error, got {other:?}"),
        }
    }

    #[test]
    fn report_json_round_trip() {
        let syn = planted();
        let data = ExperimentData::new(&syn.dataset, &syn.prototypes);
        let config = ExperimentConfig {
            n_splits: 2,
            ..Default::default()
        };
        let r = run_experiment(data, &config, 1).unwrap();
        assert_eq!(ExperimentReport::from_json(&r.to_json()).unwrap(), r);
    }
}
