//! Visual-to-semantic regression.
//!
//! The mapping is `f(x) = A k(X_basis, x)` with the linear kernel. For the
//! transductive variants the basis holds the labeled rows followed by the
//! unlabeled rows, the labeled mask `J` is the leading identity block and
//! the coefficients solve
//!
//! ```text
//! A (K J + γ_A n_l I + γ_I n_l / (n_l + n_u)² · K L) = Z̃
//! ```
//!
//! where `Z̃` holds the labeled targets followed by zero columns. Plain kernel
//! ridge regression is the special case without unlabeled rows or graph.
//!
//! Two solvers produce the same `A`. The dual solver factorizes the n x n
//! system directly. The primal solver uses `K = X Xᵀ`: with
//! `P = J + c L` and `γ = γ_A n_l`, the collapsed map `W = A X` equals
//! `Z̃ X (γ I + Xᵀ P X)⁻¹`, a d_x x d_x symmetric positive-definite solve,
//! and `A = (Z̃ − W Xᵀ P) / γ`. The primal route is used automatically when
//! there are fewer feature dimensions than basis rows.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::dataio::AugmentedTrainSet;
use crate::error::{Result, ZslError};
use crate::graph::{build_knn_graph, laplacian_quadratic, KnnGraph};
use crate::linalg::{normalize_columns, solve_right};

/// Smallest accepted ridge weight. With no ridge term the kernel system is
/// numerically singular and recognition collapses to chance.
pub const MIN_RIDGE: f64 = 1e-12;

pub const MODEL_MAGIC: &[u8; 4] = b"ZSLA";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperParams {
    /// Ridge weight γ_A.
    pub ridge: f64,
    /// Manifold weight γ_I.
    pub manifold: f64,
    /// Neighbours per node in the manifold graph.
    pub graph_k: usize,
    /// Neighbours averaged per prototype in self-training.
    pub self_train_k: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            ridge: 1e-6,
            manifold: 40.0,
            graph_k: 5,
            self_train_k: 100,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.ridge >= MIN_RIDGE) || !self.ridge.is_finite() {
            return Err(ZslError::Param(format!(
                "ridge weight {} below minimum {MIN_RIDGE:e}: an unregularized kernel system is numerically singular and performs near chance",
                self.ridge
            )));
        }
        if !(self.manifold >= 0.0) || !self.manifold.is_finite() {
            return Err(ZslError::Param(format!(
                "manifold weight {} must be finite and non-negative",
                self.manifold
            )));
        }
        if self.graph_k == 0 || self.self_train_k == 0 {
            return Err(ZslError::Param("graph_k and self_train_k must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Ridge,
    Manifold,
    AugmentedRidge,
    AugmentedManifold,
}

impl Variant {
    fn tag(self) -> u8 {
        match self {
            Variant::Ridge => 0,
            Variant::Manifold => 1,
            Variant::AugmentedRidge => 2,
            Variant::AugmentedManifold => 3,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => Variant::Ridge,
            1 => Variant::Manifold,
            2 => Variant::AugmentedRidge,
            3 => Variant::AugmentedManifold,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStrategy {
    /// Primal when d_x < n, dual otherwise.
    #[default]
    Auto,
    /// Factorize the n x n kernel system.
    Dual,
    /// Factorize the d_x x d_x system of the collapsed linear map.
    Primal,
}

/// Everything needed to state the regression problem.
#[derive(Debug, Clone)]
pub struct FitProblem {
    /// n x d_x, labeled rows first.
    pub basis: Array2<f64>,
    /// d_z x n, zero columns for the unlabeled rows.
    pub targets: Array2<f64>,
    pub n_labeled: usize,
    pub graph: Option<KnnGraph>,
}

impl FitProblem {
    pub fn new(labeled: ArrayView2<f64>, targets: ArrayView2<f64>, unlabeled: ArrayView2<f64>, graph: Option<KnnGraph>) -> Result<Self> {
        let n_l = labeled.nrows();
        if n_l == 0 {
            return Err(ZslError::Param("no labeled rows to fit".into()));
        }
        if targets.ncols() != n_l {
            return Err(ZslError::Dimension(format!("{} target columns for {n_l} labeled rows", targets.ncols())));
        }
        if unlabeled.nrows() > 0 && unlabeled.ncols() != labeled.ncols() {
            return Err(ZslError::Dimension(format!(
                "unlabeled rows have {} features, labeled rows {}",
                unlabeled.ncols(),
                labeled.ncols()
            )));
        }
        let n = n_l + unlabeled.nrows();
        if let Some(g) = &graph {
            if g.num_nodes() != n {
                return Err(ZslError::Dimension(format!("graph has {} nodes, problem has {n} rows", g.num_nodes())));
            }
        }
        let basis = if unlabeled.nrows() > 0 {
            ndarray::concatenate(Axis(0), &[labeled, unlabeled]).expect("column counts checked")
        } else {
            labeled.to_owned()
        };
        let mut full_targets = Array2::zeros((targets.nrows(), n));
        full_targets.slice_mut(s![.., ..n_l]).assign(&targets);
        Ok(FitProblem {
            basis,
            targets: full_targets,
            n_labeled: n_l,
            graph,
        })
    }

    pub fn len(&self) -> usize {
        self.basis.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.basis.nrows() == 0
    }

    pub fn n_unlabeled(&self) -> usize {
        self.len() - self.n_labeled
    }

    pub fn embed_dim(&self) -> usize {
        self.targets.nrows()
    }

    /// Linear kernel over the basis.
    pub fn kernel(&self) -> Array2<f64> {
        linear_kernel(self.basis.view(), self.basis.view()).expect("same matrix")
    }

    /// Dense diagonal labeled mask `J`.
    pub fn labeled_mask(&self) -> Array2<f64> {
        let mut j = Array2::zeros((self.len(), self.len()));
        for i in 0..self.n_labeled {
            j[[i, i]] = 1.0;
        }
        j
    }

    fn ridge_scale(&self, params: &HyperParams) -> f64 {
        params.ridge * self.n_labeled as f64
    }

    fn manifold_scale(&self, params: &HyperParams) -> f64 {
        match self.graph {
            Some(_) if params.manifold > 0.0 => {
                let n = self.len() as f64;
                params.manifold * self.n_labeled as f64 / (n * n)
            }
            _ => 0.0,
        }
    }

    /// `P X` with `P = J + c L`.
    fn weighted_basis(&self, c: f64) -> Result<Array2<f64>> {
        let mut px = self.basis.clone();
        px.slice_mut(s![self.n_labeled.., ..]).fill(0.0);
        if c > 0.0 {
            let lx = self.graph.as_ref().expect("c > 0 implies graph").laplacian_apply(self.basis.view())?;
            px.scaled_add(c, &lx);
        }
        Ok(px)
    }
}

/// Gram matrix `X_a X_bᵀ` of two row sets.
pub fn linear_kernel(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Array2<f64>> {
    if a.ncols() != b.ncols() {
        return Err(ZslError::Dimension(format!(
            "kernel between {}-dim and {}-dim rows",
            a.ncols(),
            b.ncols()
        )));
    }
    Ok(a.dot(&b.t()))
}

/// Fitted visual-to-semantic map.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    pub variant: Variant,
    pub params: HyperParams,
    /// d_z x n
    pub coefficients: Array2<f64>,
    /// n x d_x
    pub basis: Array2<f64>,
    /// Collapsed linear map `A X_basis`, d_z x d_x.
    pub weights: Array2<f64>,
    pub n_labeled: usize,
}

/// Column-normalized projections.
#[derive(Debug, Clone)]
pub struct Projection {
    /// d_z x m, unit columns except for flagged ones.
    pub vectors: Array2<f64>,
    /// Columns whose raw projection was zero; left as zero vectors.
    pub degenerate: Vec<usize>,
}

impl EmbeddingModel {
    pub fn embed_dim(&self) -> usize {
        self.coefficients.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.basis.ncols()
    }

    fn check_rows(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.feature_dim() {
            return Err(ZslError::Dimension(format!(
                "model expects {} features, got {}",
                self.feature_dim(),
                x.ncols()
            )));
        }
        Ok(())
    }

    /// Raw projections `f(x)` (d_z x m) of the rows of `x`.
    pub fn project_raw(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_rows(&x)?;
        Ok(self.weights.dot(&x.t()))
    }

    /// `A K(X_basis, x)` evaluated literally through the kernel.
    pub fn project_kernel(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_rows(&x)?;
        Ok(self.coefficients.dot(&linear_kernel(self.basis.view(), x)?))
    }

    /// Projections normalized to unit length for matching.
    pub fn project(&self, x: ArrayView2<f64>) -> Result<Projection> {
        let mut vectors = self.project_raw(x)?;
        let degenerate = normalize_columns(&mut vectors);
        for &j in &degenerate {
            log::warn!("instance {j} projects to the zero vector");
            vectors.column_mut(j).fill(0.0);
        }
        Ok(Projection { vectors, degenerate })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| ZslError::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| ZslError::io(path, e))?;
        w.flush().map_err(|e| ZslError::io(path, e))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&MODEL_VERSION.to_le_bytes())?;
        w.write_all(&[self.variant.tag()])?;
        for v in [self.embed_dim(), self.basis.nrows(), self.feature_dim(), self.n_labeled] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        w.write_all(&self.params.ridge.to_le_bytes())?;
        w.write_all(&self.params.manifold.to_le_bytes())?;
        w.write_all(&(self.params.graph_k as u64).to_le_bytes())?;
        w.write_all(&(self.params.self_train_k as u64).to_le_bytes())?;
        for m in [&self.coefficients, &self.basis, &self.weights] {
            for v in m.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| ZslError::io(path, e))?;
        Self::read_from(&mut BufReader::new(file)).map_err(|e| match e {
            ZslError::Format(m) => ZslError::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let trunc = |e: std::io::Error| ZslError::Format(format!("truncated model file: {e}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(trunc)?;
        if &magic != MODEL_MAGIC {
            return Err(ZslError::Format("not a model file (bad magic)".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(trunc)?;
        let version = u32::from_le_bytes(b4);
        if version != MODEL_VERSION {
            return Err(ZslError::Format(format!("unsupported model version {version}")));
        }
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag).map_err(trunc)?;
        let variant = Variant::from_tag(tag[0]).ok_or_else(|| ZslError::Format(format!("unknown variant tag {}", tag[0])))?;
        let mut b8 = [0u8; 8];
        let mut next_u64 = |r: &mut R| -> Result<u64> {
            r.read_exact(&mut b8).map_err(trunc)?;
            Ok(u64::from_le_bytes(b8))
        };
        let d_z = next_u64(r)? as usize;
        let n = next_u64(r)? as usize;
        let d_x = next_u64(r)? as usize;
        let n_labeled = next_u64(r)? as usize;
        let ridge = f64::from_bits(next_u64(r)?);
        let manifold = f64::from_bits(next_u64(r)?);
        let graph_k = next_u64(r)? as usize;
        let self_train_k = next_u64(r)? as usize;
        if n_labeled > n {
            return Err(ZslError::Format(format!("{n_labeled} labeled rows exceed basis size {n}")));
        }
        let mut read_matrix = |rows: usize, cols: usize| -> Result<Array2<f64>> {
            let len = rows
                .checked_mul(cols)
                .and_then(|l| l.checked_mul(8))
                .ok_or_else(|| ZslError::Format("model dimensions overflow".into()))?;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf).map_err(trunc)?;
            let vals = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            Ok(Array2::from_shape_vec((rows, cols), vals).expect("length computed"))
        };
        let coefficients = read_matrix(d_z, n)?;
        let basis = read_matrix(n, d_x)?;
        let weights = read_matrix(d_z, d_x)?;
        Ok(EmbeddingModel {
            variant,
            params: HyperParams {
                ridge,
                manifold,
                graph_k,
                self_train_k,
            },
            coefficients,
            basis,
            weights,
            n_labeled,
        })
    }
}

/// Fitting front end bundling hyperparameters and solver choice.
#[derive(Debug, Clone, Copy, Default)]
pub struct Regressor {
    pub params: HyperParams,
    pub strategy: SolveStrategy,
}

impl Regressor {
    pub fn new(params: HyperParams) -> Self {
        Regressor {
            params,
            strategy: SolveStrategy::Auto,
        }
    }

    pub fn with_strategy(mut self, strategy: SolveStrategy) -> Self {
        self.strategy = strategy;
        self
    }

    /// Kernel ridge regression on the labeled rows only.
    pub fn fit_ridge(&self, x_train: ArrayView2<f64>, z_train: ArrayView2<f64>) -> Result<EmbeddingModel> {
        let empty = Array2::zeros((0, x_train.ncols()));
        let problem = FitProblem::new(x_train, z_train, empty.view(), None)?;
        self.solve(&problem, Variant::Ridge)
    }

    /// Transductive fit with the unlabeled rows in the basis and, when the
    /// manifold weight is positive, a KNN graph over all rows.
    pub fn fit_manifold(&self, x_train: ArrayView2<f64>, z_train: ArrayView2<f64>, x_test: ArrayView2<f64>) -> Result<EmbeddingModel> {
        let problem = self.transductive_problem(x_train, z_train, x_test)?;
        self.solve(&problem, Variant::Manifold)
    }

    /// Transductive fit on an augmented labeled set.
    pub fn fit_augmented(&self, train: &AugmentedTrainSet, x_test: ArrayView2<f64>) -> Result<EmbeddingModel> {
        let problem = self.transductive_problem(train.features.view(), train.targets.view(), x_test)?;
        let variant = if self.params.manifold > 0.0 {
            Variant::AugmentedManifold
        } else {
            Variant::AugmentedRidge
        };
        self.solve(&problem, variant)
    }

    fn transductive_problem(&self, x_train: ArrayView2<f64>, z_train: ArrayView2<f64>, x_test: ArrayView2<f64>) -> Result<FitProblem> {
        self.params.validate()?;
        let graph = if self.params.manifold > 0.0 {
            if x_test.nrows() == 0 {
                return Err(ZslError::Param(
                    "manifold regularization needs unlabeled rows (or a zero manifold weight)".into(),
                ));
            }
            if x_test.ncols() != x_train.ncols() {
                return Err(ZslError::Dimension(format!(
                    "test rows have {} features, training rows {}",
                    x_test.ncols(),
                    x_train.ncols()
                )));
            }
            let all = ndarray::concatenate(Axis(0), &[x_train, x_test]).expect("checked");
            Some(build_knn_graph(all.view(), self.params.graph_k)?)
        } else {
            None
        };
        FitProblem::new(x_train, z_train, x_test, graph)
    }

    /// Solves the closed-form system of an assembled problem.
    pub fn solve(&self, problem: &FitProblem, variant: Variant) -> Result<EmbeddingModel> {
        self.params.validate()?;
        let primal = match self.strategy {
            SolveStrategy::Auto => problem.basis.ncols() < problem.len(),
            SolveStrategy::Dual => false,
            SolveStrategy::Primal => true,
        };
        let (coefficients, weights) = if primal {
            solve_primal(problem, &self.params)?
        } else {
            solve_dual(problem, &self.params)?
        };
        if coefficients.iter().chain(weights.iter()).any(|v| !v.is_finite()) {
            return Err(ZslError::Numerical {
                message: "fitted coefficients are not finite".into(),
                condition: f64::INFINITY,
            });
        }
        Ok(EmbeddingModel {
            variant,
            params: self.params,
            coefficients,
            basis: problem.basis.clone(),
            weights,
            n_labeled: problem.n_labeled,
        })
    }
}

/// The n x n system matrix `K J + γ_A n_l I + c K L`.
pub fn system_matrix(problem: &FitProblem, params: &HyperParams) -> Result<Array2<f64>> {
    let k = problem.kernel();
    let n_l = problem.n_labeled;
    let mut m = k.clone();
    m.slice_mut(s![.., n_l..]).fill(0.0);
    let c = problem.manifold_scale(params);
    if c > 0.0 {
        let lk = problem.graph.as_ref().expect("c > 0 implies graph").laplacian_apply(k.view())?;
        m.scaled_add(c, &lk.t());
    }
    let gamma = problem.ridge_scale(params);
    m.diag_mut().mapv_inplace(|v| v + gamma);
    Ok(m)
}

fn solve_dual(problem: &FitProblem, params: &HyperParams) -> Result<(Array2<f64>, Array2<f64>)> {
    let m = system_matrix(problem, params)?;
    let symmetric = problem.n_unlabeled() == 0 && problem.manifold_scale(params) == 0.0;
    let (a, _cond) = solve_right(m.view(), problem.targets.view(), symmetric)?;
    let w = a.dot(&problem.basis);
    Ok((a, w))
}

fn solve_primal(problem: &FitProblem, params: &HyperParams) -> Result<(Array2<f64>, Array2<f64>)> {
    let gamma = problem.ridge_scale(params);
    let c = problem.manifold_scale(params);
    let px = problem.weighted_basis(c)?;
    let g = problem.basis.t().dot(&px);
    let mut system = (&g + &g.t()) * 0.5;
    system.diag_mut().mapv_inplace(|v| v + gamma);
    let rhs = problem.targets.dot(&problem.basis);
    let (w, _cond) = solve_right(system.view(), rhs.view(), true)?;
    let a = (&problem.targets - &w.dot(&px.t())) / gamma;
    Ok((a, w))
}

pub fn fit_ridge(x_train: ArrayView2<f64>, z_train: ArrayView2<f64>, ridge: f64) -> Result<EmbeddingModel> {
    let params = HyperParams {
        ridge,
        manifold: 0.0,
        ..HyperParams::default()
    };
    Regressor::new(params).fit_ridge(x_train, z_train)
}

pub fn fit_manifold(x_train: ArrayView2<f64>, z_train: ArrayView2<f64>, x_test: ArrayView2<f64>, params: HyperParams) -> Result<EmbeddingModel> {
    Regressor::new(params).fit_manifold(x_train, z_train, x_test)
}

pub fn fit_augmented(train: &AugmentedTrainSet, x_test: ArrayView2<f64>, params: HyperParams) -> Result<EmbeddingModel> {
    Regressor::new(params).fit_augmented(train, x_test)
}

/// Value of the transductive objective
///
/// ```text
/// 1/n_l ‖Z̃ − A K J‖² + γ_A Tr(A K Aᵀ) + γ_I/(n_l+n_u)² Tr(Kᵀ Aᵀ A K L)
/// ```
///
/// and its gradient with respect to `A`.
pub fn loss_and_gradient(problem: &FitProblem, coefficients: ArrayView2<f64>, ridge: f64, manifold: f64) -> Result<(f64, Array2<f64>)> {
    let n = problem.len();
    if coefficients.dim() != (problem.embed_dim(), n) {
        return Err(ZslError::Dimension(format!(
            "coefficients {:?}, expected {:?}",
            coefficients.dim(),
            (problem.embed_dim(), n)
        )));
    }
    let n_l = problem.n_labeled as f64;
    let k = problem.kernel();
    let mut kj = k.clone();
    kj.slice_mut(s![.., problem.n_labeled..]).fill(0.0);
    let residual = &problem.targets - &coefficients.dot(&kj);
    let ak = coefficients.dot(&k);
    let mut loss = residual.iter().map(|v| v * v).sum::<f64>() / n_l + ridge * (&ak * &coefficients).sum();
    let mut grad = residual.dot(&kj.t()) * (-2.0 / n_l) + &ak * (2.0 * ridge);
    if let Some(graph) = problem.graph.as_ref().filter(|_| manifold > 0.0) {
        let c = manifold / (n as f64 * n as f64);
        loss += c * laplacian_quadratic(ak.view(), graph)?;
        let fl = graph.laplacian_apply(ak.t())?.reversed_axes();
        grad.scaled_add(2.0 * c, &fl.dot(&k));
    }
    Ok((loss, grad))
}
