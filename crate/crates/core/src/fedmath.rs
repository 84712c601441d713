//! Learning tasks: per-client losses and gradients, the weighted global
//! objective, its smoothness / strong-convexity constants, and a
//! high-precision centralized solver for the optimum.
//!
//! Losses are strongly convex by construction (an `l2` term with `lambda > 0`
//! is always present), so the constants `L` and `mu` exist and the optimum is
//! unique.

use std::ops::Deref;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense model parameter vector with finite entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelVector(Vec<f64>);

impl ModelVector {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if let Some(i) = coords.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "model coordinate {i} is not finite ({})",
                coords[i]
            )));
        }
        Ok(Self(coords))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// `self - rhs`, squared Euclidean norm.
    pub fn dist_sq(&self, rhs: &ModelVector) -> f64 {
        sq_dist(&self.0, &rhs.0)
    }

    /// `self - step * direction`.
    pub fn stepped(&self, step: f64, direction: &[f64]) -> Self {
        Self(
            self.0
                .iter()
                .zip(direction)
                .map(|(w, g)| w - step * g)
                .collect(),
        )
    }
}

impl Deref for ModelVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Labeled samples owned by one client. Features are stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    dim: usize,
    features: Vec<f64>,
    labels: Vec<f64>,
}

impl ClientDataset {
    pub fn new(dim: usize, rows: Vec<Vec<f64>>, labels: Vec<f64>) -> Result<Self> {
        if rows.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} feature rows but {} labels",
                rows.len(),
                labels.len()
            )));
        }
        let mut features = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: row.len(),
                });
            }
            features.extend(row);
        }
        Self::from_flat(dim, features, labels)
    }

    pub fn from_flat(dim: usize, features: Vec<f64>, labels: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("feature dimension must be positive"));
        }
        if labels.is_empty() {
            return Err(Error::invalid("a client dataset needs at least one sample"));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::invalid(format!(
                "{} feature values do not form {} rows of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        if features.iter().chain(&labels).any(|v| !v.is_finite()) {
            return Err(Error::invalid("dataset contains non-finite values"));
        }
        Ok(Self {
            dim,
            features,
            labels,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of samples, `D_i`.
    pub fn count(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn row(&self, l: usize) -> &[f64] {
        &self.features[l * self.dim..(l + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = (&[f64], f64)> + '_ {
        self.features
            .chunks_exact(self.dim)
            .zip(self.labels.iter().copied())
    }

    /// All clients' samples concatenated in client order.
    pub fn pooled(datasets: &[ClientDataset]) -> Result<ClientDataset> {
        let first = datasets
            .first()
            .ok_or_else(|| Error::invalid("no client datasets"))?;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for ds in datasets {
            if ds.dim != first.dim {
                return Err(Error::DimensionMismatch {
                    expected: first.dim,
                    actual: ds.dim,
                });
            }
            features.extend_from_slice(&ds.features);
            labels.extend_from_slice(&ds.labels);
        }
        Self::from_flat(first.dim, features, labels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// `1/2 (x.w - y)^2`
    RidgeRegression,
    /// `log(1 + exp(-y x.w))`, labels in {-1, +1}
    L2RegularizedLogistic,
}

/// Per-sample loss plus an `lambda/2 ||w||^2` regularizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    kind: LossKind,
    lambda: f64,
}

impl LossSpec {
    pub fn new(kind: LossKind, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::invalid(format!(
                "regularizer must be positive and finite, got {lambda}"
            )));
        }
        Ok(Self { kind, lambda })
    }

    pub fn ridge(lambda: f64) -> Result<Self> {
        Self::new(LossKind::RidgeRegression, lambda)
    }

    pub fn logistic(lambda: f64) -> Result<Self> {
        Self::new(LossKind::L2RegularizedLogistic, lambda)
    }

    pub fn kind(&self) -> LossKind {
        self.kind
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    fn sample_loss(&self, margin: f64, y: f64) -> f64 {
        match self.kind {
            LossKind::RidgeRegression => 0.5 * (margin - y) * (margin - y),
            LossKind::L2RegularizedLogistic => softplus(-y * margin),
        }
    }

    /// Derivative of the per-sample loss with respect to the margin `x.w`.
    fn sample_slope(&self, margin: f64, y: f64) -> f64 {
        match self.kind {
            LossKind::RidgeRegression => margin - y,
            LossKind::L2RegularizedLogistic => -y * sigmoid(-y * margin),
        }
    }

    /// Second derivative with respect to the margin.
    fn sample_curvature(&self, margin: f64, y: f64) -> f64 {
        match self.kind {
            LossKind::RidgeRegression => 1.0,
            LossKind::L2RegularizedLogistic => {
                let s = sigmoid(y * margin);
                y * y * s * (1.0 - s)
            }
        }
    }
}

/// Smoothness `L` and strong-convexity `mu` of the global objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessConstants {
    pub l: f64,
    pub mu: f64,
}

impl SmoothnessConstants {
    pub fn new(l: f64, mu: f64) -> Result<Self> {
        if !(mu > 0.0 && mu <= l && l.is_finite()) {
            return Err(Error::invalid(format!(
                "need 0 < mu <= L, got mu = {mu}, L = {l}"
            )));
        }
        Ok(Self { l, mu })
    }

    /// `mu / L`.
    pub fn inverse_condition(&self) -> f64 {
        self.mu / self.l
    }
}

/// Centralized minimizer of the global objective.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimum {
    pub w_star: ModelVector,
    pub f_star: f64,
    pub grad_norm: f64,
}

fn check_dim(w: &[f64], data: &ClientDataset) -> Result<()> {
    if w.len() != data.dim {
        return Err(Error::DimensionMismatch {
            expected: data.dim,
            actual: w.len(),
        });
    }
    Ok(())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn sq_norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Local objective `f_i(w)`: mean per-sample loss plus the regularizer.
pub fn local_loss(w: &[f64], data: &ClientDataset, spec: &LossSpec) -> Result<f64> {
    check_dim(w, data)?;
    let total: f64 = data
        .rows()
        .map(|(x, y)| spec.sample_loss(dot(x, w), y))
        .sum();
    Ok(total / data.count() as f64 + 0.5 * spec.lambda * sq_norm(w))
}

/// `grad f_i(w) = (1/D_i) sum_l grad F_i(w, xi_l) + lambda w`.
pub fn local_gradient(w: &[f64], data: &ClientDataset, spec: &LossSpec) -> Result<Vec<f64>> {
    check_dim(w, data)?;
    let mut grad = vec![0.0; data.dim];
    for (x, y) in data.rows() {
        let slope = spec.sample_slope(dot(x, w), y);
        for (g, xj) in grad.iter_mut().zip(x) {
            *g += slope * xj;
        }
    }
    let inv = 1.0 / data.count() as f64;
    for (g, wj) in grad.iter_mut().zip(w) {
        *g = *g * inv + spec.lambda * wj;
    }
    Ok(grad)
}

/// `epochs` full-gradient steps of size `eta` starting from `w`.
pub fn local_update(
    w: &ModelVector,
    data: &ClientDataset,
    spec: &LossSpec,
    eta: f64,
    epochs: usize,
) -> Result<ModelVector> {
    let first = local_gradient(w, data, spec)?;
    local_update_with_gradient(w, &first, data, spec, eta, epochs)
}

/// Same as [`local_update`] but reuses an already computed `grad f_i(w)` for
/// the first epoch.
pub fn local_update_with_gradient(
    w: &ModelVector,
    first_gradient: &[f64],
    data: &ClientDataset,
    spec: &LossSpec,
    eta: f64,
    epochs: usize,
) -> Result<ModelVector> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::invalid(format!(
            "learning rate must be positive, got {eta}"
        )));
    }
    if epochs == 0 {
        return Err(Error::invalid("at least one local epoch is required"));
    }
    check_dim(first_gradient, data)?;
    let mut current = w.stepped(eta, first_gradient);
    for _ in 1..epochs {
        let g = local_gradient(&current, data, spec)?;
        current = current.stepped(eta, &g);
    }
    Ok(current)
}

/// Data-size weights `D_i / D`.
pub fn data_weights(datasets: &[ClientDataset]) -> Vec<f64> {
    let total: usize = datasets.iter().map(ClientDataset::count).sum();
    datasets
        .iter()
        .map(|d| d.count() as f64 / total as f64)
        .collect()
}

/// `f(w) = sum_i (D_i / D) f_i(w)`.
pub fn global_loss(w: &[f64], datasets: &[ClientDataset], spec: &LossSpec) -> Result<f64> {
    if datasets.is_empty() {
        return Err(Error::invalid("no client datasets"));
    }
    let mut acc = 0.0;
    for (ds, weight) in datasets.iter().zip(data_weights(datasets)) {
        acc += weight * local_loss(w, ds, spec)?;
    }
    Ok(acc)
}

/// `grad f(w) = sum_i (D_i / D) grad f_i(w)`.
pub fn global_gradient(w: &[f64], datasets: &[ClientDataset], spec: &LossSpec) -> Result<Vec<f64>> {
    if datasets.is_empty() {
        return Err(Error::invalid("no client datasets"));
    }
    let mut acc = vec![0.0; w.len()];
    for (ds, weight) in datasets.iter().zip(data_weights(datasets)) {
        let g = local_gradient(w, ds, spec)?;
        for (a, gj) in acc.iter_mut().zip(&g) {
            *a += weight * gj;
        }
    }
    Ok(acc)
}

/// `(1/D) X^T X` over the pooled samples.
fn pooled_gram(datasets: &[ClientDataset]) -> Result<DMatrix<f64>> {
    let pool = ClientDataset::pooled(datasets)?;
    let d = pool.dim;
    let x = DMatrix::from_row_slice(pool.count(), d, &pool.features);
    Ok(x.transpose() * &x / pool.count() as f64)
}

/// Smoothness `L` and strong-convexity modulus `mu` of the
/// global objective, computed on the pooled data.
///
/// Ridge: the extreme eigenvalues of `(1/D) X^T X`, shifted by `lambda`.
/// Logistic: the curvature of the log-loss is at most 1/4, so
/// `L = lambda_max(X^T X / 4D) + lambda` and `mu = lambda`.
pub fn smoothness_constants(
    datasets: &[ClientDataset],
    spec: &LossSpec,
) -> Result<SmoothnessConstants> {
    let gram = pooled_gram(datasets)?;
    let eig = gram.symmetric_eigenvalues();
    let top = eig.max().max(0.0);
    let bottom = eig.min().max(0.0);
    let (l, mu) = match spec.kind {
        LossKind::RidgeRegression => (top + spec.lambda, bottom + spec.lambda),
        LossKind::L2RegularizedLogistic => (top / 4.0 + spec.lambda, spec.lambda),
    };
    SmoothnessConstants::new(l, mu.min(l))
}

const ORACLE_TOL: f64 = 1e-12;
const ORACLE_MAX_ITERS: usize = 200;

/// Centralized minimizer `w*` and `f* = f(w*)`, solved until
/// `||grad f(w*)|| <= 1e-12`.
pub fn optimal_value(datasets: &[ClientDataset], spec: &LossSpec) -> Result<Optimum> {
    let pool = ClientDataset::pooled(datasets)?;
    let d = pool.dim;
    let mut w = DVector::<f64>::zeros(d);
    let mut grad_norm = f64::INFINITY;

    for _ in 0..ORACLE_MAX_ITERS {
        let g = global_gradient(w.as_slice(), datasets, spec)?;
        grad_norm = sq_norm(&g).sqrt();
        if grad_norm <= ORACLE_TOL {
            break;
        }
        let hessian = pooled_hessian(&pool, w.as_slice(), spec);
        let step = hessian
            .cholesky()
            .ok_or_else(|| Error::OracleFailure("Hessian is not positive definite".into()))?
            .solve(&DVector::from_vec(g));
        w = match spec.kind {
            // Quadratic: the Newton step is exact up to rounding; repeating it
            // is iterative refinement.
            LossKind::RidgeRegression => &w - &step,
            // Inside the quadratic-convergence region the loss is flat to
            // rounding, so the line search would stall; step fully there.
            LossKind::L2RegularizedLogistic if grad_norm < 1e-6 => &w - &step,
            LossKind::L2RegularizedLogistic => damped_newton_step(&pool, &w, &step, spec)?,
        };
    }
    if grad_norm > ORACLE_TOL {
        return Err(Error::OracleFailure(format!(
            "gradient norm {grad_norm:e} after {ORACLE_MAX_ITERS} iterations"
        )));
    }
    let w_star = ModelVector::new(w.as_slice().to_vec())?;
    let f_star = global_loss(&w_star, datasets, spec)?;
    Ok(Optimum {
        w_star,
        f_star,
        grad_norm,
    })
}

fn pooled_hessian(pool: &ClientDataset, w: &[f64], spec: &LossSpec) -> DMatrix<f64> {
    let d = pool.dim;
    let mut h = DMatrix::<f64>::zeros(d, d);
    for (x, y) in pool.rows() {
        let c = spec.sample_curvature(dot(x, w), y);
        let xv = DVector::from_column_slice(x);
        h.ger(c, &xv, &xv, 1.0);
    }
    h /= pool.count() as f64;
    for j in 0..d {
        h[(j, j)] += spec.lambda;
    }
    h
}

fn damped_newton_step(
    pool: &ClientDataset,
    w: &DVector<f64>,
    step: &DVector<f64>,
    spec: &LossSpec,
) -> Result<DVector<f64>> {
    let f0 = local_loss(w.as_slice(), pool, spec)?;
    let mut t = 1.0;
    for _ in 0..60 {
        let candidate = w - step * t;
        if local_loss(candidate.as_slice(), pool, spec)? <= f0 {
            return Ok(candidate);
        }
        t *= 0.5;
    }
    // Near the optimum the loss is flat to rounding; take the full step.
    Ok(w - step)
}

/// `f(w) - f*`.
///
/// For ridge the gap is evaluated as the exact quadratic form
/// `1/2 (w - w*)^T H (w - w*)`, which stays accurate far below the rounding
/// floor of `f(w) - f*` when both are O(1).
pub fn optimality_gap(
    w: &[f64],
    optimum: &Optimum,
    datasets: &[ClientDataset],
    spec: &LossSpec,
) -> Result<f64> {
    match spec.kind {
        LossKind::RidgeRegression => {
            let diff: Vec<f64> = w
                .iter()
                .zip(optimum.w_star.iter())
                .map(|(a, b)| a - b)
                .collect();
            let mut acc = 0.0;
            for (ds, weight) in datasets.iter().zip(data_weights(datasets)) {
                check_dim(&diff, ds)?;
                let local: f64 = ds.rows().map(|(x, _)| dot(x, &diff).powi(2)).sum();
                acc += weight * local / ds.count() as f64;
            }
            Ok(0.5 * (acc + spec.lambda * sq_norm(&diff)))
        }
        LossKind::L2RegularizedLogistic => Ok(global_loss(w, datasets, spec)? - optimum.f_star),
    }
}
