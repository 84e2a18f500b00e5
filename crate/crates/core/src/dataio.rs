//! Datasets, zero-shot splits, auxiliary-data augmentation and synthetic
//! generators with a planted visual-to-semantic map.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, ZslError};
use crate::linalg::normalize_rows;
use crate::wordvec::{canonical_name, ClassMatrix, PrototypeSource};

pub const FEATURE_MAGIC: &[u8; 4] = b"ZSLF";
pub const FEATURE_VERSION: u32 = 1;

/// Odd multiplier used to decorrelate derived seeds.
pub(crate) const SEED_MIX: u64 = 0x9E37_79B9_7F4A_7C15;

/// Labeled feature matrix, one row per instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// N x d_x
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, features: Array2<f64>, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        let name = name.into();
        if features.nrows() != labels.len() {
            return Err(ZslError::Format(format!(
                "{name}: {} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some((i, _)) = features.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(ZslError::Data(format!("{name}: non-finite feature at row {}, column {}", i.0, i.1)));
        }
        let c = class_names.len();
        let mut seen = vec![false; c];
        for (i, &l) in labels.iter().enumerate() {
            if l >= c {
                return Err(ZslError::Data(format!("{name}: label {l} of row {i} out of range 0..{c}")));
            }
            seen[l] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(ZslError::Data(format!("{name}: class {:?} has no instances", class_names[missing])));
        }
        Ok(Dataset {
            name,
            features,
            labels,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Row indices whose label is in `classes`, in row order.
    pub fn rows_of(&self, classes: &[usize]) -> Vec<usize> {
        let mut member = vec![false; self.num_classes()];
        for &c in classes {
            member[c] = true;
        }
        (0..self.len()).filter(|&i| member[self.labels[i]]).collect()
    }

    pub fn rows(&self, indices: &[usize]) -> Array2<f64> {
        self.features.select(Axis(0), indices)
    }

    pub fn normalize_features(&mut self) {
        normalize_rows(&mut self.features);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    /// Per-row L2 normalization of the features.
    pub normalize: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions { normalize: true }
    }
}

/// Reads a feature matrix, detecting the binary container by its magic bytes
/// and otherwise parsing `id,f0,...` CSV.
pub fn read_features(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let path = path.as_ref();
    let mut file = BufReader::new(File::open(path).map_err(|e| ZslError::io(path, e))?);
    let head = file.fill_buf().map_err(|e| ZslError::io(path, e))?;
    if head.starts_with(FEATURE_MAGIC) {
        read_features_binary(file, path)
    } else {
        read_features_csv(file, path)
    }
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], path: &Path, what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| ZslError::Format(format!("{}: truncated {what}: {e}", path.display())))
}

fn read_features_binary<R: Read>(mut r: R, path: &Path) -> Result<Array2<f64>> {
    let mut magic = [0u8; 4];
    read_exact_or(&mut r, &mut magic, path, "magic")?;
    let mut b4 = [0u8; 4];
    read_exact_or(&mut r, &mut b4, path, "version")?;
    let version = u32::from_le_bytes(b4);
    if version != FEATURE_VERSION {
        return Err(ZslError::Format(format!(
            "{}: unsupported feature file version {version}",
            path.display()
        )));
    }
    let mut b8 = [0u8; 8];
    read_exact_or(&mut r, &mut b8, path, "row count")?;
    let n = u64::from_le_bytes(b8) as usize;
    read_exact_or(&mut r, &mut b8, path, "column count")?;
    let d = u64::from_le_bytes(b8) as usize;
    let total = n
        .checked_mul(d)
        .and_then(|t| t.checked_mul(4))
        .ok_or_else(|| ZslError::Format(format!("{}: header dimensions overflow", path.display())))?;
    let mut raw = vec![0u8; total];
    read_exact_or(&mut r, &mut raw, path, "feature payload")?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| ZslError::io(path, e))? != 0 {
        return Err(ZslError::Format(format!("{}: trailing bytes after {n}x{d} payload", path.display())));
    }
    let values: Vec<f64> = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    Ok(Array2::from_shape_vec((n, d), values).expect("payload length checked"))
}

fn read_features_csv<R: Read>(r: R, path: &Path) -> Result<Array2<f64>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(r);
    let headers = rdr.headers().map_err(|e| ZslError::Format(format!("{}: {e}", path.display())))?.clone();
    if headers.is_empty() || &headers[0] != "id" {
        return Err(ZslError::Format(format!("{}: CSV header must start with `id`", path.display())));
    }
    let d = headers.len() - 1;
    let mut values = Vec::new();
    let mut n = 0;
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| ZslError::Parse {
            path: path.display().to_string(),
            line,
            message: e.to_string(),
        })?;
        if rec.len() != d + 1 {
            return Err(ZslError::Parse {
                path: path.display().to_string(),
                line,
                message: format!("expected {} fields, found {}", d + 1, rec.len()),
            });
        }
        for f in rec.iter().skip(1) {
            let v: f64 = f.parse().map_err(|e| ZslError::Parse {
                path: path.display().to_string(),
                line,
                message: format!("bad float {f:?}: {e}"),
            })?;
            values.push(v);
        }
        n += 1;
    }
    Ok(Array2::from_shape_vec((n, d), values).expect("row lengths checked"))
}

/// Writes the binary container; values are stored as little-endian f32.
pub fn write_features_binary(path: impl AsRef<Path>, features: &Array2<f64>) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path).map_err(|e| ZslError::io(path, e))?);
    let io = |e| ZslError::io(path, e);
    w.write_all(FEATURE_MAGIC).map_err(io)?;
    w.write_all(&FEATURE_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(features.nrows() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&(features.ncols() as u64).to_le_bytes()).map_err(io)?;
    for row in features.rows() {
        for &v in row {
            w.write_all(&(v as f32).to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn write_features_csv(path: impl AsRef<Path>, features: &Array2<f64>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| ZslError::Format(format!("{}: {e}", path.display())))?;
    let csv_err = |e: csv::Error| ZslError::Format(format!("{}: {e}", path.display()));
    let mut header = vec!["id".to_string()];
    header.extend((0..features.ncols()).map(|j| format!("f{j}")));
    w.write_record(&header).map_err(csv_err)?;
    for (i, row) in features.rows().into_iter().enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| ZslError::io(path, e))
}

pub fn write_labels(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path).map_err(|e| ZslError::io(path, e))?);
    for &l in &dataset.labels {
        writeln!(w, "{}", dataset.class_names[l]).map_err(|e| ZslError::io(path, e))?;
    }
    w.flush().map_err(|e| ZslError::io(path, e))
}

fn read_labels(path: &Path) -> Result<Vec<String>> {
    let file = File::open(path).map_err(|e| ZslError::io(path, e))?;
    let mut labels = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| ZslError::io(path, e))?;
        let name = line.trim();
        if name.is_empty() {
            return Err(ZslError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: "empty class name".into(),
            });
        }
        labels.push(name.to_string());
    }
    Ok(labels)
}

/// Loads features plus a label file holding one class name per row.
pub fn load_dataset(feature_path: impl AsRef<Path>, label_path: impl AsRef<Path>, options: LoadOptions) -> Result<Dataset> {
    let feature_path = feature_path.as_ref();
    let features = read_features(feature_path)?;
    let names = read_labels(label_path.as_ref())?;
    if names.len() != features.nrows() {
        return Err(ZslError::Format(format!(
            "{} has {} rows but {} has {} labels",
            feature_path.display(),
            features.nrows(),
            label_path.as_ref().display(),
            names.len()
        )));
    }
    let mut class_names: Vec<String> = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    let labels = names
        .into_iter()
        .map(|n| {
            *index.entry(n.clone()).or_insert_with(|| {
                class_names.push(n);
                class_names.len() - 1
            })
        })
        .collect();
    let name = feature_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    let mut dataset = Dataset::new(name, features, labels, class_names)?;
    if options.normalize {
        dataset.normalize_features();
    }
    Ok(dataset)
}

/// One train/test partition of the class set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZeroShotSplit {
    pub split_id: usize,
    pub train_classes: Vec<usize>,
    pub test_classes: Vec<usize>,
    pub seed: u64,
}

impl ZeroShotSplit {
    fn from_permutation(split_id: usize, seed: u64, perm: &[usize]) -> Self {
        let n_test = perm.len() / 2;
        let mut test = perm[..n_test].to_vec();
        let mut train = perm[n_test..].to_vec();
        test.sort_unstable();
        train.sort_unstable();
        ZeroShotSplit {
            split_id,
            train_classes: train,
            test_classes: test,
            seed,
        }
    }
}

/// Random 50/50 class splits; the test side gets `floor(C/2)` classes.
///
/// Split `s` is drawn from the sub-seed `seed ^ s`. With 20 or more splits,
/// any class that never landed on a test side is swapped in for the most
/// over-represented test class of some split, so every class is evaluated.
pub fn generate_splits(num_classes: usize, n_splits: usize, seed: u64) -> Result<Vec<ZeroShotSplit>> {
    if num_classes < 2 {
        return Err(ZslError::Param(format!("need at least 2 classes to split, got {num_classes}")));
    }
    if n_splits == 0 {
        return Err(ZslError::Param("n_splits must be positive".into()));
    }
    let mut splits: Vec<ZeroShotSplit> = (0..n_splits)
        .map(|s| {
            let sub = seed ^ s as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(sub);
            let mut perm: Vec<usize> = (0..num_classes).collect();
            perm.shuffle(&mut rng);
            ZeroShotSplit::from_permutation(s, sub, &perm)
        })
        .collect();
    if n_splits >= 20 {
        ensure_test_coverage(&mut splits, num_classes);
    }
    Ok(splits)
}

fn ensure_test_coverage(splits: &mut [ZeroShotSplit], num_classes: usize) {
    let mut counts = test_frequencies(splits, num_classes);
    while let Some(missing) = counts.iter().position(|&c| c == 0) {
        // most frequent test class overall; first split holding it
        let (donor, _) = counts
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .expect("non-empty");
        let split = splits
            .iter_mut()
            .find(|s| s.test_classes.contains(&donor))
            .expect("donor appears in some test set");
        log::debug!(
            "split {}: swapping class {donor} out of test for uncovered class {missing}",
            split.split_id
        );
        split.test_classes.retain(|&c| c != donor);
        split.test_classes.push(missing);
        split.test_classes.sort_unstable();
        split.train_classes.retain(|&c| c != missing);
        split.train_classes.push(donor);
        split.train_classes.sort_unstable();
        counts[donor] -= 1;
        counts[missing] += 1;
    }
}

/// How many splits hold each class on the test side.
pub fn test_frequencies(splits: &[ZeroShotSplit], num_classes: usize) -> Vec<usize> {
    let mut counts = vec![0usize; num_classes];
    for s in splits {
        for &c in &s.test_classes {
            counts[c] += 1;
        }
    }
    counts
}

/// Labeled regression data: target-train rows first, then auxiliary rows.
#[derive(Debug, Clone)]
pub struct AugmentedTrainSet {
    /// n x d_x
    pub features: Array2<f64>,
    /// d_z x n
    pub targets: Array2<f64>,
    /// Source dataset name per row.
    pub provenance: Vec<String>,
    pub n_target: usize,
    pub n_aux: usize,
}

impl AugmentedTrainSet {
    pub fn len(&self) -> usize {
        self.n_target + self.n_aux
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Assembles the labeled set for one split from the target's training
/// classes plus every auxiliary class whose name does not exactly match a
/// target test class.
pub fn build_augmented(target: &Dataset, split: &ZeroShotSplit, aux: &[Dataset], prototypes: &dyn PrototypeSource) -> Result<AugmentedTrainSet> {
    let rows = target.rows_of(&split.train_classes);
    let test_names: Vec<String> = split.test_classes.iter().map(|&c| target.class_names[c].clone()).collect();
    build_augmented_rows(target, &rows, &test_names, aux, prototypes)
}

/// Like [`build_augmented`] with an explicit list of target training rows.
pub fn build_augmented_rows(
    target: &Dataset,
    train_rows: &[usize],
    test_class_names: &[String],
    aux: &[Dataset],
    prototypes: &dyn PrototypeSource,
) -> Result<AugmentedTrainSet> {
    let target_z = prototypes.class_matrix(&target.class_names)?;
    let mut blocks_x = vec![target.rows(train_rows)];
    let mut blocks_z = vec![target_z
        .matrix
        .select(Axis(1), &train_rows.iter().map(|&r| target.labels[r]).collect::<Vec<_>>())];
    let mut provenance = vec![target.name.clone(); train_rows.len()];
    let excluded: Vec<String> = test_class_names.iter().map(|n| canonical_name(n)).collect();
    let mut n_aux = 0;
    for ds in aux {
        if ds.feature_dim() != target.feature_dim() {
            return Err(ZslError::Dimension(format!(
                "auxiliary dataset {} has {} features, target has {}",
                ds.name,
                ds.feature_dim(),
                target.feature_dim()
            )));
        }
        let kept: Vec<usize> = (0..ds.num_classes())
            .filter(|&c| {
                let keep = !excluded.contains(&canonical_name(&ds.class_names[c]));
                if !keep {
                    log::info!("dropping auxiliary class {:?} of {}: matches a test class", ds.class_names[c], ds.name);
                }
                keep
            })
            .collect();
        if kept.is_empty() {
            continue;
        }
        let names: Vec<String> = kept.iter().map(|&c| ds.class_names[c].clone()).collect();
        let z = prototypes.class_matrix(&names)?;
        let mut column_of = vec![usize::MAX; ds.num_classes()];
        for (j, &c) in kept.iter().enumerate() {
            column_of[c] = j;
        }
        let rows = ds.rows_of(&kept);
        let cols: Vec<usize> = rows.iter().map(|&r| column_of[ds.labels[r]]).collect();
        blocks_x.push(ds.rows(&rows));
        blocks_z.push(z.matrix.select(Axis(1), &cols));
        provenance.extend(std::iter::repeat_n(ds.name.clone(), rows.len()));
        n_aux += rows.len();
    }
    let xs: Vec<_> = blocks_x.iter().map(|b| b.view()).collect();
    let zs: Vec<_> = blocks_z.iter().map(|b| b.view()).collect();
    Ok(AugmentedTrainSet {
        features: ndarray::concatenate(Axis(0), &xs).expect("feature dims checked"),
        targets: ndarray::concatenate(Axis(1), &zs).expect("prototype dims agree"),
        provenance,
        n_target: train_rows.len(),
        n_aux,
    })
}

/// Per-class subsample of the split's test rows.
///
/// `percent` maps class id to the retained percentage in (0, 100]; classes
/// not in the map keep all their rows. Returned indices are sorted.
pub fn subsample_test(dataset: &Dataset, split: &ZeroShotSplit, percent: &BTreeMap<usize, f64>, seed: u64) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for &c in &split.test_classes {
        let rows = dataset.rows_of(&[c]);
        let p = percent.get(&c).copied().unwrap_or(100.0);
        if !(p > 0.0 && p <= 100.0) {
            return Err(ZslError::Param(format!("subsample percentage {p} for class {c} outside (0, 100]")));
        }
        let mut keep = ((rows.len() as f64) * p / 100.0).round() as usize;
        if keep == 0 {
            log::warn!("class {c}: {p}% of {} rows rounds to zero, keeping one", rows.len());
            keep = 1;
        }
        if keep >= rows.len() {
            out.extend(rows);
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (c as u64).wrapping_mul(SEED_MIX));
        let picked = rand::seq::index::sample(&mut rng, rows.len(), keep);
        out.extend(picked.into_iter().map(|i| rows[i]));
    }
    out.sort_unstable();
    Ok(out)
}

/// Parameters of the planted-map generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub train_classes: usize,
    pub test_classes: usize,
    pub per_class: usize,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub noise_sigma: f64,
    pub shift_sigma: f64,
    /// Extra isotropic noise on test-class instances only.
    #[serde(default)]
    pub test_noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            train_classes: 6,
            test_classes: 4,
            per_class: 30,
            feature_dim: 20,
            embed_dim: 5,
            noise_sigma: 0.05,
            shift_sigma: 0.0,
            test_noise_sigma: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.train_classes == 0 || self.test_classes == 0 || self.per_class == 0 || self.embed_dim == 0 {
            return Err(ZslError::Param("synthetic counts must be positive".into()));
        }
        if self.feature_dim < self.embed_dim {
            return Err(ZslError::Param(format!(
                "feature_dim {} must be at least embed_dim {}",
                self.feature_dim, self.embed_dim
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.shift_sigma >= 0.0 && self.test_noise_sigma >= 0.0) {
            return Err(ZslError::Param("noise and shift must be non-negative".into()));
        }
        Ok(())
    }
}

/// Output of a generator: the data plus everything needed to check recovery.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub dataset: Dataset,
    /// Unit-norm class embeddings, column per class.
    pub prototypes: ClassMatrix,
    /// Planted map(s) from semantic to visual space, d_x x d_z each.
    pub maps: Vec<Array2<f64>>,
    /// Map index used by each class.
    pub map_of_class: Vec<usize>,
    /// The designated split (train classes first).
    pub split: ZeroShotSplit,
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Array1<f64> {
    loop {
        let v: Array1<f64> = Array1::from_shape_simple_fn(dim, || StandardNormal.sample(rng));
        let n = v.dot(&v).sqrt();
        if n > 1e-12 {
            return v / n;
        }
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

/// Random d_x x d_z map with orthonormal columns, so `‖B z‖ = ‖z‖`.
fn orthonormal_map(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    loop {
        let mut b = gaussian_matrix(rng, rows, cols);
        let mut ok = true;
        for j in 0..cols {
            for k in 0..j {
                let proj = b.column(j).dot(&b.column(k));
                let prev = b.column(k).to_owned();
                b.column_mut(j).scaled_add(-proj, &prev);
            }
            let norm = b.column(j).dot(&b.column(j)).sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            b.column_mut(j).mapv_inplace(|v| v / norm);
        }
        if ok {
            return b;
        }
    }
}

fn class_names(count: usize) -> Vec<String> {
    (0..count).map(|c| format!("c{c}")).collect()
}

/// Planted-map data: class embeddings uniform on the unit sphere, visual
/// class means `B z_c`, Gaussian instance noise, and a per-class offset of
/// norm `shift_sigma` added to every test-class instance.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let c_total = spec.train_classes + spec.test_classes;
    let mut z = Array2::zeros((spec.embed_dim, c_total));
    for c in 0..c_total {
        z.column_mut(c).assign(&unit_gaussian(&mut rng, spec.embed_dim));
    }
    let map = orthonormal_map(&mut rng, spec.feature_dim, spec.embed_dim);
    let means = map.dot(&z);
    // drawn unconditionally so the noise stream does not depend on shift_sigma
    let offsets: Vec<Array1<f64>> = (0..spec.test_classes)
        .map(|_| unit_gaussian(&mut rng, spec.feature_dim) * spec.shift_sigma)
        .collect();
    let mut features = Array2::zeros((c_total * spec.per_class, spec.feature_dim));
    let mut labels = Vec::with_capacity(c_total * spec.per_class);
    for c in 0..c_total {
        let mut mean = means.column(c).to_owned();
        if c >= spec.train_classes {
            mean += &offsets[c - spec.train_classes];
        }
        for k in 0..spec.per_class {
            let mut row = features.row_mut(c * spec.per_class + k);
            row.assign(&mean);
            if spec.noise_sigma > 0.0 {
                for v in row.iter_mut() {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    *v += spec.noise_sigma * e;
                }
            }
            labels.push(c);
        }
    }
    if spec.test_noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ SEED_MIX);
        let first = spec.train_classes * spec.per_class;
        for v in features.slice_mut(ndarray::s![first.., ..]).iter_mut() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *v += spec.test_noise_sigma * e;
        }
    }
    let names = class_names(c_total);
    let dataset = Dataset::new("synthetic", features, labels, names.clone())?;
    Ok(SyntheticData {
        dataset,
        prototypes: ClassMatrix { names, matrix: z },
        maps: vec![map],
        map_of_class: vec![0; c_total],
        split: ZeroShotSplit {
            split_id: 0,
            train_classes: (0..spec.train_classes).collect(),
            test_classes: (spec.train_classes..c_total).collect(),
            seed: spec.seed,
        },
    })
}

/// Parameters of the clustered generator used for transferability checks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusteredSpec {
    pub clusters: usize,
    pub classes_per_cluster: usize,
    pub per_class: usize,
    pub feature_dim: usize,
    pub embed_dim: usize,
    /// Spread of class embeddings around their cluster centre.
    pub cluster_spread: f64,
    /// Scale of the cluster-specific perturbation of the shared map.
    pub map_divergence: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for ClusteredSpec {
    fn default() -> Self {
        ClusteredSpec {
            clusters: 2,
            classes_per_cluster: 12,
            per_class: 20,
            feature_dim: 30,
            embed_dim: 4,
            cluster_spread: 0.6,
            map_divergence: 1.0,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

/// Classes grouped into clusters; each cluster maps semantics to visual
/// space through its own map, so transfer works best between classes of the
/// same cluster. Class `c` belongs to cluster `c / classes_per_cluster`.
pub fn generate_clustered(spec: &ClusteredSpec) -> Result<SyntheticData> {
    if spec.clusters == 0 || spec.per_class == 0 || spec.embed_dim == 0 {
        return Err(ZslError::Param("clustered generator counts must be positive".into()));
    }
    if spec.classes_per_cluster < 2 {
        return Err(ZslError::Param("clusters need at least two classes".into()));
    }
    if spec.feature_dim < spec.embed_dim {
        return Err(ZslError::Param("feature_dim must be at least embed_dim".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let c_total = spec.clusters * spec.classes_per_cluster;
    let shared = orthonormal_map(&mut rng, spec.feature_dim, spec.embed_dim);
    let mut maps = Vec::with_capacity(spec.clusters);
    let mut z = Array2::zeros((spec.embed_dim, c_total));
    for k in 0..spec.clusters {
        let centre = unit_gaussian(&mut rng, spec.embed_dim);
        for i in 0..spec.classes_per_cluster {
            let noise: Array1<f64> = Array1::from_shape_simple_fn(spec.embed_dim, || StandardNormal.sample(&mut rng));
            let v = &centre + &(noise * spec.cluster_spread);
            let n = v.dot(&v).sqrt();
            z.column_mut(k * spec.classes_per_cluster + i).assign(&(v / n));
        }
        let perturb = orthonormal_map(&mut rng, spec.feature_dim, spec.embed_dim);
        maps.push(&shared + &(perturb * spec.map_divergence));
    }
    let map_of_class: Vec<usize> = (0..c_total).map(|c| c / spec.classes_per_cluster).collect();
    let mut features = Array2::zeros((c_total * spec.per_class, spec.feature_dim));
    let mut labels = Vec::with_capacity(c_total * spec.per_class);
    for c in 0..c_total {
        let mean = maps[map_of_class[c]].dot(&z.column(c));
        for k in 0..spec.per_class {
            let mut row = features.row_mut(c * spec.per_class + k);
            row.assign(&mean);
            for v in row.iter_mut() {
                let e: f64 = StandardNormal.sample(&mut rng);
                *v += spec.noise_sigma * e;
            }
            labels.push(c);
        }
    }
    let names = class_names(c_total);
    let dataset = Dataset::new("clustered", features, labels, names.clone())?;
    // designated split: half of cluster 0 is tested; the other half trains
    // alongside as many classes from every other cluster
    let cpc = spec.classes_per_cluster;
    let n_test = (cpc / 2).max(1);
    let per_cluster_train = cpc - n_test;
    let train_classes = (0..spec.clusters)
        .flat_map(|k| {
            let start = k * cpc + if k == 0 { n_test } else { 0 };
            start..start + per_cluster_train
        })
        .collect();
    Ok(SyntheticData {
        dataset,
        prototypes: ClassMatrix { names, matrix: z },
        maps,
        map_of_class,
        split: ZeroShotSplit {
            split_id: 0,
            train_classes,
            test_classes: (0..n_test).collect(),
            seed: spec.seed,
        },
    })
}
