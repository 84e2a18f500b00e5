//! Matching projected test instances to class prototypes.
//!
//! All matchers consume the full distance matrix of the test batch. NRM
//! rescales each prototype's column of distances to unit L2 norm; GC replaces
//! distances by the rank of the instance among all test instances for that
//! prototype. Neither changes the ordering of instances for a fixed
//! prototype, only the ordering of prototypes for a fixed instance.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ZslError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Matcher {
    Nn,
    Nrm,
    Gc,
}

impl std::fmt::Display for Matcher {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Matcher::Nn => "nn",
            Matcher::Nrm => "nrm",
            Matcher::Gc => "gc",
        })
    }
}

impl std::str::FromStr for Matcher {
    type Err = ZslError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nn" => Ok(Matcher::Nn),
            "nrm" => Ok(Matcher::Nrm),
            "gc" => Ok(Matcher::Gc),
            other => Err(ZslError::Param(format!("unknown matcher {other:?} (expected nn, nrm or gc)"))),
        }
    }
}

/// Euclidean distances, one row per test instance and one column per prototype.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub values: Array2<f64>,
}

impl DistanceMatrix {
    /// Distances between projection columns (d_z x n_u) and prototype columns (d_z x C).
    pub fn between(projections: ArrayView2<f64>, prototypes: ArrayView2<f64>) -> Result<Self> {
        if projections.nrows() != prototypes.nrows() {
            return Err(ZslError::Dimension(format!(
                "projections are {}-dim, prototypes {}-dim",
                projections.nrows(),
                prototypes.nrows()
            )));
        }
        if prototypes.ncols() == 0 {
            return Err(ZslError::Param("no prototypes to match against".into()));
        }
        let mut values = Array2::zeros((projections.ncols(), prototypes.ncols()));
        values.axis_iter_mut(Axis(0)).into_par_iter().enumerate().for_each(|(i, mut row)| {
            let p = projections.column(i);
            for (j, v) in row.iter_mut().enumerate() {
                *v = p.iter().zip(prototypes.column(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            }
        });
        Self::from_values(values)
    }

    pub fn from_values(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|v| v.is_nan()) {
            return Err(ZslError::Data("distance matrix contains NaN".into()));
        }
        if values.ncols() == 0 {
            return Err(ZslError::Param("no prototypes to match against".into()));
        }
        Ok(DistanceMatrix { values })
    }

    pub fn n_instances(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.values.ncols()
    }
}

/// Per-instance decision of one matcher.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Index into the prototype columns.
    pub labels: Vec<usize>,
    /// Negated effective distance per instance and class; higher is better.
    pub scores: Array2<f64>,
    pub matcher: Matcher,
    pub self_trained: bool,
}

impl Prediction {
    /// Score of the chosen class for each instance.
    pub fn chosen_scores(&self) -> Vec<f64> {
        self.labels.iter().enumerate().map(|(i, &c)| self.scores[[i, c]]).collect()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>, instance_ids: &[usize], class_labels: &[String]) -> Result<()> {
        let path = path.as_ref();
        if instance_ids.len() != self.labels.len() {
            return Err(ZslError::Dimension(format!(
                "{} instance ids for {} predictions",
                instance_ids.len(),
                self.labels.len()
            )));
        }
        let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| ZslError::io(path, e))?);
        let io = |e| ZslError::io(path, e);
        writeln!(w, "instance_id,predicted_class,score").map_err(io)?;
        for ((id, &c), s) in instance_ids.iter().zip(&self.labels).zip(self.chosen_scores()) {
            writeln!(w, "{id},{},{s}", class_labels[c]).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// Row-wise argmin; ties resolve to the lowest column.
fn argmin_rows(effective: &Array2<f64>) -> Vec<usize> {
    effective
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v < row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn from_effective(effective: Array2<f64>, matcher: Matcher) -> Prediction {
    let labels = argmin_rows(&effective);
    Prediction {
        labels,
        scores: -effective,
        matcher,
        self_trained: false,
    }
}

pub fn nn_predict(distances: &DistanceMatrix) -> Prediction {
    from_effective(distances.values.clone(), Matcher::Nn)
}

/// Per-prototype L2 normalization of the distance column, then NN.
pub fn nrm_predict(distances: &DistanceMatrix) -> Result<Prediction> {
    if distances.n_instances() == 0 {
        return Err(ZslError::Param("NRM needs at least one test instance".into()));
    }
    let mut effective = distances.values.clone();
    for (j, mut col) in effective.axis_iter_mut(Axis(1)).enumerate() {
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            col /= norm;
        } else {
            log::warn!("prototype {j} coincides with every projection; leaving its distances unscaled");
        }
    }
    Ok(from_effective(effective, Matcher::Nrm))
}

/// `rank[i, y]` = number of other instances at distance ≤ `d[i, y]` from prototype `y`.
pub fn gc_ranks(distances: &DistanceMatrix) -> Array2<f64> {
    let mut ranks = Array2::zeros(distances.values.raw_dim());
    for (col_in, mut col_out) in distances.values.axis_iter(Axis(1)).zip(ranks.axis_iter_mut(Axis(1))) {
        let mut sorted: Vec<f64> = col_in.to_vec();
        sorted.sort_by(f64::total_cmp);
        for (d, r) in col_in.iter().zip(col_out.iter_mut()) {
            // count includes the instance itself
            *r = (sorted.partition_point(|v| v <= d) - 1) as f64;
        }
    }
    ranks
}

/// Globally corrected matching: predict the class under which the instance ranks best.
pub fn gc_predict(distances: &DistanceMatrix) -> Result<Prediction> {
    if distances.n_instances() < 2 {
        return Err(ZslError::Param("GC needs at least two test instances".into()));
    }
    Ok(from_effective(gc_ranks(distances), Matcher::Gc))
}

pub fn predict(matcher: Matcher, distances: &DistanceMatrix) -> Result<Prediction> {
    match matcher {
        Matcher::Nn => Ok(nn_predict(distances)),
        Matcher::Nrm => nrm_predict(distances),
        Matcher::Gc => gc_predict(distances),
    }
}

/// Replaces each prototype by the mean of its `k` nearest projections.
///
/// Inputs are unit-norm columns. Neighbours are searched from the prototype's
/// side (ties to the lower instance index); `k` above the number of
/// projections is clamped. With `renormalize` the adapted prototypes are
/// scaled back to unit length.
pub fn self_train(prototypes: ArrayView2<f64>, projections: ArrayView2<f64>, k: usize, renormalize: bool) -> Result<Array2<f64>> {
    let n_u = projections.ncols();
    if n_u == 0 {
        return Err(ZslError::Param("self-training needs test projections".into()));
    }
    if k == 0 {
        return Err(ZslError::Param("self-training neighbour count must be positive".into()));
    }
    if prototypes.nrows() != projections.nrows() {
        return Err(ZslError::Dimension("prototype and projection dimensions differ".into()));
    }
    let k = if k > n_u {
        log::warn!("self-training k={k} exceeds {n_u} test instances; clamping");
        n_u
    } else {
        k
    };
    let distances = DistanceMatrix::between(prototypes, projections)?;
    let mut adapted = Array2::zeros(prototypes.raw_dim());
    for (j, mut out) in adapted.axis_iter_mut(Axis(1)).enumerate() {
        let row = distances.values.row(j);
        let mut idx: Vec<usize> = (0..n_u).collect();
        let cmp = |a: &usize, b: &usize| row[*a].total_cmp(&row[*b]).then(a.cmp(b));
        if k < n_u {
            idx.select_nth_unstable_by(k - 1, cmp);
            idx.truncate(k);
        }
        idx.sort_unstable();
        for &i in &idx {
            out += &projections.column(i);
        }
        out /= k as f64;
        if renormalize {
            let norm = out.dot(&out).sqrt();
            if norm > 0.0 {
                out /= norm;
            } else {
                log::warn!("adapted prototype {j} averaged to zero; keeping it unnormalized");
            }
        }
    }
    Ok(adapted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn nearest_neighbour_basic() {
        let d = DistanceMatrix::between(array![[1.0], [0.0]].view(), array![[1.0, 0.0], [0.0, 1.0]].view()).unwrap();
        assert_eq!(d.values.row(0).to_vec(), vec![0.0, 2f64.sqrt()]);
        assert_eq!(nn_predict(&d).labels, vec![0]);
    }

    #[test]
    fn ties_pick_lowest_class() {
        let d = DistanceMatrix::from_values(array![[0.9, 0.5, 0.7, 0.5]]).unwrap();
        assert_eq!(nn_predict(&d).labels, vec![1]);
    }

    #[test]
    fn nrm_column_scaling() {
        let d = DistanceMatrix::from_values(array![[3.0], [4.0]]).unwrap();
        let p = nrm_predict(&d).unwrap();
        assert_eq!(p.scores.column(0).to_vec(), vec![-0.6, -0.8]);
    }

    #[test]
    fn nrm_leaves_zero_column_alone() {
        let d = DistanceMatrix::from_values(array![[0.0, 1.0], [0.0, 2.0]]).unwrap();
        let p = nrm_predict(&d).unwrap();
        assert_eq!(p.scores.column(0).to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn gc_rank_counting() {
        let d = DistanceMatrix::from_values(array![[0.2], [0.5], [0.1]]).unwrap();
        assert_eq!(gc_ranks(&d).column(0).to_vec(), vec![1.0, 2.0, 0.0]);
        let dup = DistanceMatrix::from_values(array![[0.3, 0.1], [0.3, 0.1], [0.5, 0.9]]).unwrap();
        let r = gc_ranks(&dup);
        assert_eq!(r.row(0).to_vec(), vec![1.0, 1.0]);
        assert_eq!(r.row(1).to_vec(), vec![1.0, 1.0]);
        assert!(gc_predict(&DistanceMatrix::from_values(array![[0.1]]).unwrap()).is_err());
    }

    #[test]
    fn empty_prototypes_rejected() {
        let err = DistanceMatrix::between(array![[1.0]].view(), Array2::<f64>::zeros((1, 0)).view()).unwrap_err();
        assert!(matches!(err, ZslError::Param(_)));
    }

    #[test]
    fn self_train_global_mean_when_k_is_everything() {
        let proj = array![[0.0, 0.0], [1.0, 1.0]]; // (0,1) and (0,3) after normalization
        let proto = array![[1.0], [0.0]];
        let adapted = self_train(proto.view(), proj.view(), 2, true).unwrap();
        assert_eq!(adapted.column(0).to_vec(), vec![0.0, 1.0]);
        // k above n_u clamps
        assert_eq!(self_train(proto.view(), proj.view(), 50, true).unwrap(), adapted);
        assert!(self_train(proto.view(), Array2::zeros((2, 0)).view(), 1, true).is_err());
    }

    #[test]
    fn self_train_k1_picks_nearest_projection() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let proj = array![[1.0, 0.0, s], [0.0, 1.0, s]];
        let proto = array![[0.9, 0.1], [0.1, 0.9]];
        let adapted = self_train(proto.view(), proj.view(), 1, true).unwrap();
        assert_eq!(adapted.column(0).to_vec(), vec![1.0, 0.0]);
        assert_eq!(adapted.column(1).to_vec(), vec![0.0, 1.0]);
    }

    #[test]
    fn all_identical_adapted_prototypes_collapse_to_class_zero() {
        let proj = array![[1.0, 0.0, 0.6], [0.0, 1.0, 0.8]];
        let proto = array![[1.0, 0.0, 0.6], [0.0, 1.0, 0.8]];
        let adapted = self_train(proto.view(), proj.view(), 3, true).unwrap();
        let d = DistanceMatrix::between(proj.view(), adapted.view()).unwrap();
        assert_eq!(nn_predict(&d).labels, vec![0, 0, 0]);
    }

    #[test]
    fn matcher_parsing() {
        assert_eq!("gc".parse::<Matcher>().unwrap(), Matcher::Gc);
        assert!("knn".parse::<Matcher>().is_err());
    }

    #[test]
    fn prediction_csv() {
        let dir = tempfile::tempdir().unwrap();
        let d = DistanceMatrix::from_values(array![[0.5, 0.25], [0.0, 1.0]]).unwrap();
        let p = nn_predict(&d);
        let path = dir.path().join("p.csv");
        p.write_csv(&path, &[10, 11], &["a".into(), "b".into()]).unwrap();
        assert_eq!(
            std::fs::read_to_string(path).unwrap(),
            "instance_id,predicted_class,score\n10,b,-0.25\n11,a,-0\n"
        );
    }
}
