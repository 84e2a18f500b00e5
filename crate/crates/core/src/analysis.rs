//! Post-hoc transferability analysis over stored split outcomes.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::ZeroShotSplit;
use crate::error::{Result, ZslError};
use crate::evaluation::{evaluate_split, prepare_split, ExperimentConfig, ExperimentData, ExperimentReport, SplitResult};
use crate::linalg::normalize_columns;
use crate::wordvec::ClassMatrix;

pub const MIN_SPLITS: usize = 10;
pub const MIN_CO_OCCURRENCE: usize = 3;

/// Which classes trained a split and how well each test class did.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitOutcomeRecord {
    pub split_id: usize,
    pub in_train: Vec<bool>,
    /// `Some` exactly for the split's test classes.
    pub test_accuracy: Vec<Option<f64>>,
}

impl SplitOutcomeRecord {
    pub fn from_split(result: &SplitResult, num_classes: usize) -> Result<Self> {
        let mut in_train = vec![false; num_classes];
        let mut test_accuracy = vec![None; num_classes];
        if result.class_accuracy.len() != result.test_classes.len() {
            return Err(ZslError::Data(format!(
                "split {}: accuracy list does not match test classes",
                result.split_id
            )));
        }
        for &c in &result.train_classes {
            *in_train.get_mut(c).ok_or_else(|| out_of_range(c, num_classes))? = true;
        }
        for (&c, &e) in result.test_classes.iter().zip(&result.class_accuracy) {
            if c >= num_classes {
                return Err(out_of_range(c, num_classes));
            }
            if in_train[c] {
                return Err(ZslError::Data(format!("split {}: class {c} is both train and test", result.split_id)));
            }
            if !(0.0..=1.0).contains(&e) {
                return Err(ZslError::Data(format!("split {}: accuracy {e} outside [0, 1]", result.split_id)));
            }
            test_accuracy[c] = Some(e);
        }
        Ok(SplitOutcomeRecord {
            split_id: result.split_id,
            in_train,
            test_accuracy,
        })
    }
}

fn out_of_range(c: usize, n: usize) -> ZslError {
    ZslError::Data(format!("class {c} out of range for {n} classes"))
}

/// Records for every split of a report; fails if predictions were not retained.
pub fn records_from_report(report: &ExperimentReport, num_classes: usize) -> Result<Vec<SplitOutcomeRecord>> {
    if report.per_split.iter().any(|s| s.predictions.is_none()) {
        return Err(ZslError::Param(
            "report has no retained per-split predictions; rerun eval with prediction retention enabled".into(),
        ));
    }
    report.per_split.iter().map(|s| SplitOutcomeRecord::from_split(s, num_classes)).collect()
}

/// Denominator of the inclusion/accuracy correlation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorrelationNorm {
    /// `std(b) std(e)`, a correlation coefficient in [-1, 1].
    #[default]
    Pearson,
    /// `var(b) var(e)`.
    Variance,
}

/// Ordered `corr(i, j)`: inclusion of class `i` in training vs accuracy on test class `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferCorrelationMatrix {
    /// NaN where masked.
    pub values: Array2<f64>,
    pub valid: Array2<bool>,
}

impl TransferCorrelationMatrix {
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.valid[[i, j]].then(|| self.values[[i, j]])
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Square CSV with class-name headers; masked cells are empty.
    pub fn write_csv(&self, path: impl AsRef<Path>, class_names: &[String]) -> Result<()> {
        write_matrix_csv(path, class_names, |i, j| self.get(i, j))
    }
}

fn write_matrix_csv(path: impl AsRef<Path>, names: &[String], cell: impl Fn(usize, usize) -> Option<f64>) -> Result<()> {
    let path = path.as_ref();
    let io = |e| ZslError::io(path, e);
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(w, "class,{}", names.join(",")).map_err(io)?;
    for (i, name) in names.iter().enumerate() {
        write!(w, "{name}").map_err(io)?;
        for j in 0..names.len() {
            match cell(i, j) {
                Some(v) => write!(w, ",{v}").map_err(io)?,
                None => write!(w, ",").map_err(io)?,
            }
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Population covariance over its product of spreads; `None` on zero spread.
fn correlation(b: &[f64], e: &[f64], norm: CorrelationNorm) -> Option<f64> {
    let n = b.len() as f64;
    let mb = b.iter().sum::<f64>() / n;
    let me = e.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vb = 0.0;
    let mut ve = 0.0;
    for (x, y) in b.iter().zip(e) {
        cov += (x - mb) * (y - me);
        vb += (x - mb) * (x - mb);
        ve += (y - me) * (y - me);
    }
    let (cov, vb, ve) = (cov / n, vb / n, ve / n);
    if vb <= 0.0 || ve <= 0.0 {
        return None;
    }
    Some(match norm {
        CorrelationNorm::Pearson => (cov / (vb.sqrt() * ve.sqrt())).clamp(-1.0, 1.0),
        CorrelationNorm::Variance => cov / (vb * ve),
    })
}

/// Correlates training inclusion of class `i` with test accuracy of class `j`
/// across the splits in which `j` was tested.
pub fn transfer_correlation(records: &[SplitOutcomeRecord], norm: CorrelationNorm) -> Result<TransferCorrelationMatrix> {
    if records.len() < MIN_SPLITS {
        return Err(ZslError::Param(format!(
            "transfer correlation needs at least {MIN_SPLITS} splits, got {}",
            records.len()
        )));
    }
    let c = records[0].in_train.len();
    if records.iter().any(|r| r.in_train.len() != c || r.test_accuracy.len() != c) {
        return Err(ZslError::Data("records disagree on the number of classes".into()));
    }
    let mut values = Array2::from_elem((c, c), f64::NAN);
    let mut valid = Array2::from_elem((c, c), false);
    let columns: Vec<Vec<Option<f64>>> = (0..c)
        .into_par_iter()
        .map(|j| {
            let tested: Vec<&SplitOutcomeRecord> = records.iter().filter(|r| r.test_accuracy[j].is_some()).collect();
            let e: Vec<f64> = tested.iter().map(|r| r.test_accuracy[j].unwrap()).collect();
            (0..c)
                .map(|i| {
                    if i == j || tested.len() < MIN_CO_OCCURRENCE {
                        return None;
                    }
                    let b: Vec<f64> = tested.iter().map(|r| if r.in_train[i] { 1.0 } else { 0.0 }).collect();
                    correlation(&b, &e, norm)
                })
                .collect()
        })
        .collect();
    for (j, col) in columns.into_iter().enumerate() {
        for (i, v) in col.into_iter().enumerate() {
            if let Some(v) = v {
                values[[i, j]] = v;
                valid[[i, j]] = true;
            }
        }
    }
    Ok(TransferCorrelationMatrix { values, valid })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AffinityOp {
    Max,
    Mean,
    Min,
}

/// `1 - ‖g_i - g_j‖` between unit class vectors (columns of `classes`).
pub fn affinity_matrix(classes: ArrayView2<f64>) -> Array2<f64> {
    let c = classes.ncols();
    Array2::from_shape_fn((c, c), |(i, j)| {
        let d: f64 = classes.column(i).iter().zip(classes.column(j)).map(|(a, b)| (a - b) * (a - b)).sum();
        1.0 - d.sqrt()
    })
}

/// Relatedness of every class to a test set.
#[derive(Debug, Clone, PartialEq)]
pub struct Relatedness {
    pub max: Vec<f64>,
    pub mean: Vec<f64>,
    pub min: Vec<f64>,
}

impl Relatedness {
    pub fn get(&self, op: AffinityOp) -> &[f64] {
        match op {
            AffinityOp::Max => &self.max,
            AffinityOp::Mean => &self.mean,
            AffinityOp::Min => &self.min,
        }
    }
}

/// Max, mean and min affinity of each class (column of `classes`) to the test classes.
pub fn classname_affinity(classes: ArrayView2<f64>, test_classes: &[usize]) -> Result<Relatedness> {
    if test_classes.is_empty() {
        return Err(ZslError::Param("class-name affinity needs a non-empty test set".into()));
    }
    if let Some(&bad) = test_classes.iter().find(|&&j| j >= classes.ncols()) {
        return Err(out_of_range(bad, classes.ncols()));
    }
    let aff = affinity_matrix(classes);
    let c = classes.ncols();
    let mut out = Relatedness {
        max: vec![f64::NEG_INFINITY; c],
        mean: vec![0.0; c],
        min: vec![f64::INFINITY; c],
    };
    for i in 0..c {
        for &j in test_classes {
            let a = aff[[i, j]];
            out.max[i] = out.max[i].max(a);
            out.min[i] = out.min[i].min(a);
            out.mean[i] += a;
        }
        out.mean[i] /= test_classes.len() as f64;
        // rounding can push the mean a hair outside [min, max]
        out.mean[i] = out.mean[i].clamp(out.min[i], out.max[i]);
    }
    Ok(out)
}

/// Pairwise affinities plus their percentile rank among all ordered pairs `i ≠ j`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityReport {
    pub affinity: Array2<f64>,
    pub percentile: Array2<f64>,
}

impl AffinityReport {
    pub fn new(classes: ArrayView2<f64>) -> Result<Self> {
        let c = classes.ncols();
        if c < 2 {
            return Err(ZslError::Param("affinity report needs at least two classes".into()));
        }
        let affinity = affinity_matrix(classes);
        let mut pairs: Vec<f64> = affinity.indexed_iter().filter(|((i, j), _)| i != j).map(|(_, &v)| v).collect();
        pairs.sort_by(f64::total_cmp);
        let total = pairs.len() as f64;
        let percentile = affinity.mapv(|a| pairs.partition_point(|&v| v <= a) as f64 / total);
        Ok(AffinityReport { affinity, percentile })
    }

    pub fn write_csv(&self, affinity_path: impl AsRef<Path>, percentile_path: impl AsRef<Path>, class_names: &[String]) -> Result<()> {
        write_matrix_csv(affinity_path, class_names, |i, j| Some(self.affinity[[i, j]]))?;
        write_matrix_csv(percentile_path, class_names, |i, j| Some(self.percentile[[i, j]]))
    }
}

/// Pearson correlation between the valid transfer correlations and the
/// matching class-pair affinities.
pub fn agreement_coefficient(corr: &TransferCorrelationMatrix, affinity: &Array2<f64>) -> Result<f64> {
    if corr.values.dim() != affinity.dim() {
        return Err(ZslError::Dimension("correlation and affinity matrices differ in shape".into()));
    }
    let (x, y): (Vec<f64>, Vec<f64>) = corr
        .valid
        .indexed_iter()
        .filter(|(_, &v)| v)
        .map(|(ij, _)| (corr.values[ij], affinity[ij]))
        .unzip();
    if x.len() < 3 {
        return Err(ZslError::Data(format!("only {} valid class pairs to compare", x.len())));
    }
    correlation(&x, &y, CorrelationNorm::Pearson).ok_or_else(|| ZslError::Degenerate("constant correlations or affinities".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub percent: f64,
    /// Mean metric of models trained on the top `percent`% related classes.
    pub related: f64,
    /// Mean metric of models trained on the bottom `100 - percent`%.
    pub unrelated: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetCurve {
    pub op: AffinityOp,
    pub baseline: f64,
    pub points: Vec<CurvePoint>,
}

impl SubsetCurve {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |e| ZslError::io(path, e);
        let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        writeln!(w, "percent,related,unrelated,baseline").map_err(io)?;
        for p in &self.points {
            writeln!(w, "{},{},{},{}", p.percent, p.related, p.unrelated, self.baseline).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    /// Smallest percentage at which the related model beats the unrelated one.
    pub fn first_crossing(&self) -> Option<f64> {
        self.points.iter().find(|p| p.related > p.unrelated).map(|p| p.percent)
    }
}

/// Training classes of `split` ordered from most to least related (ties by class id).
fn rank_training_classes(classes: ArrayView2<f64>, split: &ZeroShotSplit, op: AffinityOp) -> Result<Vec<usize>> {
    let rel = classname_affinity(classes, &split.test_classes)?;
    let scores = rel.get(op);
    let mut order = split.train_classes.clone();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(order)
}

fn share(n: usize, percent: f64) -> usize {
    ((n as f64) * percent / 100.0).round() as usize
}

/// Accuracy of models trained on the most related (top S%) and least related
/// (bottom 100-S%) training classes, averaged over `splits`.
pub fn related_subset_curve(
    data: ExperimentData<'_>,
    config: &ExperimentConfig,
    splits: &[ZeroShotSplit],
    percents: &[f64],
    op: AffinityOp,
    threads: usize,
) -> Result<SubsetCurve> {
    config.validate()?;
    if splits.is_empty() {
        return Err(ZslError::Param("no splits for the subset curve".into()));
    }
    if let Some(p) = percents.iter().find(|&&p| !(p > 0.0 && p <= 100.0)) {
        return Err(ZslError::Param(format!("subset percentage {p} outside (0, 100]")));
    }
    let classes = data.prototypes.class_matrix(&data.target.class_names)?;
    let mut unit = classes.matrix.clone();
    normalize_columns(&mut unit);

    // job = (split index, Some((percent index, related?))) or None for the baseline
    let mut jobs: Vec<(usize, ZeroShotSplit)> = Vec::new();
    for (si, split) in splits.iter().enumerate() {
        let order = rank_training_classes(unit.view(), split, op)?;
        let n = order.len();
        jobs.push((si, split.clone()));
        for &p in percents {
            let top = share(n, p).clamp(1, n);
            let bottom = share(n, 100.0 - p).clamp(1, n);
            for subset in [&order[..top], &order[n - bottom..]] {
                let mut train = subset.to_vec();
                train.sort_unstable();
                jobs.push((
                    si,
                    ZeroShotSplit {
                        train_classes: train,
                        ..split.clone()
                    },
                ));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| ZslError::Param(format!("thread pool: {e}")))?;
    let values: Vec<Result<f64>> = pool.install(|| {
        jobs.par_iter()
            .map(|(_, s)| {
                evaluate_split(data, &classes, config, s).map(|r| r.value).map_err(|e| ZslError::Split {
                    split_id: s.split_id,
                    source: Box::new(e),
                })
            })
            .collect()
    });
    let values = values.into_iter().collect::<Result<Vec<f64>>>()?;

    let per_split = 1 + 2 * percents.len();
    let n = splits.len() as f64;
    let mut baseline = 0.0;
    let mut related = vec![0.0; percents.len()];
    let mut unrelated = vec![0.0; percents.len()];
    for chunk in values.chunks(per_split) {
        baseline += chunk[0];
        for k in 0..percents.len() {
            related[k] += chunk[1 + 2 * k];
            unrelated[k] += chunk[2 + 2 * k];
        }
    }
    Ok(SubsetCurve {
        op,
        baseline: baseline / n,
        points: percents
            .iter()
            .enumerate()
            .map(|(k, &p)| CurvePoint {
                percent: p,
                related: related[k] / n,
                unrelated: unrelated[k] / n,
            })
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionRole {
    Instance,
    Prototype,
    AdaptedPrototype,
}

impl ProjectionRole {
    fn as_str(self) -> &'static str {
        match self {
            ProjectionRole::Instance => "instance",
            ProjectionRole::Prototype => "prototype",
            ProjectionRole::AdaptedPrototype => "adapted_prototype",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "instance" => ProjectionRole::Instance,
            "prototype" => ProjectionRole::Prototype,
            "adapted_prototype" => ProjectionRole::AdaptedPrototype,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionRow {
    pub role: ProjectionRole,
    /// Dataset row for instances, class id for prototypes.
    pub id: usize,
    pub label: String,
    pub vector: Vec<f64>,
}

/// Projected test instances and test-class prototypes of one split.
pub fn split_projections(data: ExperimentData<'_>, config: &ExperimentConfig, split: &ZeroShotSplit) -> Result<Vec<ProjectionRow>> {
    let classes: ClassMatrix = data.prototypes.class_matrix(&data.target.class_names)?;
    let prepared = prepare_split(data, &classes, config, split)?;
    let target = data.target;
    let mut rows = Vec::new();
    for (k, &r) in prepared.test_rows.iter().enumerate() {
        rows.push(ProjectionRow {
            role: ProjectionRole::Instance,
            id: r,
            label: target.class_names[target.labels[r]].clone(),
            vector: prepared.projections.column(k).to_vec(),
        });
    }
    let mut push_protos = |m: &Array2<f64>, role| {
        for (k, &c) in split.test_classes.iter().enumerate() {
            rows.push(ProjectionRow {
                role,
                id: c,
                label: target.class_names[c].clone(),
                vector: m.column(k).to_vec(),
            });
        }
    };
    push_protos(&prepared.prototypes, ProjectionRole::Prototype);
    if let Some(adapted) = &prepared.adapted {
        push_protos(adapted, ProjectionRole::AdaptedPrototype);
    }
    Ok(rows)
}

/// CSV `role,id,label,v0,...`; values are printed with round-trip precision.
pub fn export_projections(path: impl AsRef<Path>, rows: &[ProjectionRow]) -> Result<()> {
    let path = path.as_ref();
    let io = |e| ZslError::io(path, e);
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    let dim = rows.first().map_or(0, |r| r.vector.len());
    let header: Vec<String> = (0..dim).map(|k| format!("v{k}")).collect();
    writeln!(w, "role,id,label,{}", header.join(",")).map_err(io)?;
    for r in rows {
        let vals: Vec<String> = r.vector.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{},{},{},{}", r.role.as_str(), r.id, r.label, vals.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_projections(path: impl AsRef<Path>) -> Result<Vec<ProjectionRow>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| ZslError::io(path, e))?;
    let source = path.display().to_string();
    let parse_err = |line: usize, message: String| ZslError::Parse {
        path: source.clone(),
        line,
        message,
    };
    let mut rows = Vec::new();
    for (k, line) in BufReader::new(file).lines().enumerate().skip(1) {
        let line = line.map_err(|e| ZslError::io(path, e))?;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 3 {
            return Err(parse_err(k + 1, "expected role,id,label,...".into()));
        }
        let role = ProjectionRole::parse(fields[0]).ok_or_else(|| parse_err(k + 1, format!("unknown role {:?}", fields[0])))?;
        let id = fields[1].parse().map_err(|e| parse_err(k + 1, format!("bad id: {e}")))?;
        let vector = fields[3..]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|e| parse_err(k + 1, format!("bad value {f:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(ProjectionRow {
            role,
            id,
            label: fields[2].to_string(),
            vector,
        });
    }
    Ok(rows)
}
