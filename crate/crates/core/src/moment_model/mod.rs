//! Moment condition models: registries of moment coordinates, augmentation by
//! free offsets v, grand-model construction and priors over ψ = (θ, v).

mod family;
mod grand;
mod prior;
mod spec;

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{BetelError, Result};

pub use family::{Coordinate, CoordinateKey, Link, MomentFunction, Primitive, RegressionMoments};
pub use grand::{build_grand_model, GrandModelBundle};
pub use prior::{default_prior, training_sample_prior, PriorSpec, StudentTPrior};
pub use spec::{make_model, ColumnSpec, ModelSpec};

/// ψ = (θ, v): free interest parameters followed by free augmented parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterPoint {
    pub theta: Vec<f64>,
    pub v: Vec<f64>,
}

impl ParameterPoint {
    pub fn new(theta: Vec<f64>, v: Vec<f64>) -> Self {
        Self { theta, v }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = self.theta.clone();
        out.extend_from_slice(&self.v);
        out
    }

    pub fn dim(&self) -> usize {
        self.theta.len() + self.v.len()
    }
}

/// n × d matrix of moment evaluations, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentMatrix {
    n: usize,
    d: usize,
    values: Vec<f64>,
}

impl MomentMatrix {
    pub fn new(n: usize, d: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * d {
            return Err(BetelError::DimensionMismatch { expected: n * d, got: values.len() });
        }
        Ok(Self { n, d, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * d);
        for r in rows {
            if r.len() != d {
                return Err(BetelError::DimensionMismatch { expected: d, got: r.len() });
            }
            values.extend_from_slice(r);
        }
        Self::new(rows.len(), d, values)
    }

    /// Single-column matrix.
    pub fn from_column(col: &[f64]) -> Self {
        Self { n: col.len(), d: 1, values: col.to_vec() }
    }

    pub fn n_rows(&self) -> usize {
        self.n
    }

    pub fn n_cols(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.d + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, j)).collect()
    }

    pub fn column_means(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.d];
        for i in 0..self.n {
            for (acc, x) in m.iter_mut().zip(self.row(i)) {
                *acc += x;
            }
        }
        m.iter_mut().for_each(|x| *x /= self.n as f64);
        m
    }

    /// Rows mapped g ↦ A g.
    pub fn transform(&self, a: &DMatrix<f64>) -> Result<Self> {
        if a.ncols() != self.d {
            return Err(BetelError::DimensionMismatch { expected: self.d, got: a.ncols() });
        }
        let k = a.nrows();
        let mut values = vec![0.0; self.n * k];
        for i in 0..self.n {
            let g = self.row(i);
            for r in 0..k {
                values[i * k + r] = (0..self.d).map(|c| a[(r, c)] * g[c]).sum();
            }
        }
        Self::new(self.n, k, values)
    }
}

/// A moment condition model E[g(X, θ) − V] = 0 over a selection of registry
/// coordinates. θ keeps the registry's full layout; pinned entries are zero.
#[derive(Debug, Clone)]
pub struct MomentModel {
    name: String,
    registry: Arc<dyn MomentFunction>,
    coords: Vec<usize>,
    coord_meta: Vec<Coordinate>,
    theta_labels: Vec<String>,
    active_mask: Vec<bool>,
    fixed_theta_mask: Vec<bool>,
}

impl MomentModel {
    /// Model over every coordinate of `registry`.
    pub fn new(
        name: impl Into<String>,
        registry: Arc<dyn MomentFunction>,
        active_mask: Vec<bool>,
        fixed_theta_mask: Vec<bool>,
    ) -> Result<Self> {
        let coords = (0..registry.coordinates().len()).collect();
        Self::with_coordinates(name, registry, coords, active_mask, fixed_theta_mask)
    }

    /// Model over the registry coordinates `coords`, in that order.
    pub fn with_coordinates(
        name: impl Into<String>,
        registry: Arc<dyn MomentFunction>,
        coords: Vec<usize>,
        active_mask: Vec<bool>,
        fixed_theta_mask: Vec<bool>,
    ) -> Result<Self> {
        let all = registry.coordinates();
        let theta_labels = registry.theta_labels();
        if coords.is_empty() {
            return Err(BetelError::InvalidModel("model has no moment coordinates".into()));
        }
        if let Some(&bad) = coords.iter().find(|&&c| c >= all.len()) {
            return Err(BetelError::InvalidModel(format!("coordinate index {bad} out of range")));
        }
        for (i, c) in coords.iter().enumerate() {
            if coords[..i].contains(c) {
                return Err(BetelError::InvalidModel(format!(
                    "coordinate `{}` selected twice",
                    all[*c].label
                )));
            }
        }
        if active_mask.len() != coords.len() {
            return Err(BetelError::DimensionMismatch {
                expected: coords.len(),
                got: active_mask.len(),
            });
        }
        if fixed_theta_mask.len() != theta_labels.len() {
            return Err(BetelError::DimensionMismatch {
                expected: theta_labels.len(),
                got: fixed_theta_mask.len(),
            });
        }
        let coord_meta: Vec<Coordinate> = coords.iter().map(|&c| all[c].clone()).collect();
        let model = Self {
            name: name.into(),
            registry,
            coords,
            coord_meta,
            theta_labels,
            active_mask,
            fixed_theta_mask,
        };
        if model.d_v() + model.p() > model.d() {
            return Err(BetelError::InvalidModel(format!(
                "model `{}` frees {} of {} restrictions with {} parameters; at most d - p may be free",
                model.name,
                model.d_v(),
                model.d(),
                model.p()
            )));
        }
        Ok(model)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn family(&self) -> &str {
        self.registry.family()
    }

    pub fn registry(&self) -> &Arc<dyn MomentFunction> {
        &self.registry
    }

    pub fn registry_coordinates(&self) -> &[usize] {
        &self.coords
    }

    pub fn coordinates(&self) -> &[Coordinate] {
        &self.coord_meta
    }

    pub fn coordinate_labels(&self) -> Vec<String> {
        self.coord_meta.iter().map(|c| c.label.clone()).collect()
    }

    pub fn active_mask(&self) -> &[bool] {
        &self.active_mask
    }

    pub fn fixed_theta_mask(&self) -> &[bool] {
        &self.fixed_theta_mask
    }

    /// Labels of the full θ layout, pinned entries included.
    pub fn theta_layout(&self) -> &[String] {
        &self.theta_labels
    }

    pub fn d(&self) -> usize {
        self.coords.len()
    }

    pub fn p(&self) -> usize {
        self.fixed_theta_mask.iter().filter(|f| !**f).count()
    }

    pub fn d_v(&self) -> usize {
        self.active_mask.iter().filter(|a| !**a).count()
    }

    /// dim(ψ) = p + d_v.
    pub fn dim(&self) -> usize {
        self.p() + self.d_v()
    }

    /// Positions within the d coordinates whose offset is free.
    pub fn free_coordinates(&self) -> Vec<usize> {
        (0..self.d()).filter(|&j| !self.active_mask[j]).collect()
    }

    /// Positions in the full θ layout that are sampled.
    pub fn free_theta_indices(&self) -> Vec<usize> {
        (0..self.fixed_theta_mask.len()).filter(|&k| !self.fixed_theta_mask[k]).collect()
    }

    /// Reporting labels of ψ: free θ names, then `v[<coordinate>]`.
    pub fn parameter_labels(&self) -> Vec<String> {
        let mut labels: Vec<String> =
            self.free_theta_indices().into_iter().map(|k| self.theta_labels[k].clone()).collect();
        labels.extend(self.free_coordinates().into_iter().map(|j| format!("v[{}]", self.coord_meta[j].label)));
        labels
    }

    pub fn point_from_slice(&self, psi: &[f64]) -> Result<ParameterPoint> {
        if psi.len() != self.dim() {
            return Err(BetelError::DimensionMismatch { expected: self.dim(), got: psi.len() });
        }
        let p = self.p();
        Ok(ParameterPoint::new(psi[..p].to_vec(), psi[p..].to_vec()))
    }

    /// Full θ with pinned entries set to zero.
    pub fn theta_full(&self, theta_free: &[f64]) -> Vec<f64> {
        let mut full = vec![0.0; self.fixed_theta_mask.len()];
        for (k, t) in self.free_theta_indices().into_iter().zip(theta_free) {
            full[k] = *t;
        }
        full
    }

    /// Rows g^A(x_i, ψ) = g(x_i, θ) − V.
    pub fn eval_moments(&self, psi: &ParameterPoint, data: &Dataset) -> Result<MomentMatrix> {
        if psi.theta.len() != self.p() {
            return Err(BetelError::DimensionMismatch { expected: self.p(), got: psi.theta.len() });
        }
        if psi.v.len() != self.d_v() {
            return Err(BetelError::DimensionMismatch { expected: self.d_v(), got: psi.v.len() });
        }
        let n = data.n_rows();
        let d = self.d();
        let mut values = vec![0.0; n * d];
        self.registry.evaluate(data, &self.theta_full(&psi.theta), &self.coords, &mut values)?;
        let free = self.free_coordinates();
        for i in 0..n {
            let row = &mut values[i * d..(i + 1) * d];
            for (&j, v) in free.iter().zip(&psi.v) {
                row[j] -= v;
            }
            if let Some(j) = row.iter().position(|x| !x.is_finite()) {
                return Err(BetelError::NonFiniteMoment { row: i, coordinate: j });
            }
        }
        MomentMatrix::new(n, d, values)
    }

    pub fn eval_moments_flat(&self, psi: &[f64], data: &Dataset) -> Result<MomentMatrix> {
        self.eval_moments(&self.point_from_slice(psi)?, data)
    }

    /// Starting ψ: the family's cheap θ estimate (zeros if none) and v set to
    /// the sample means of the free coordinates at that θ.
    pub fn initial_point(&self, data: &Dataset) -> Result<ParameterPoint> {
        let full = self
            .registry
            .initial_theta(data)
            .unwrap_or_else(|| vec![0.0; self.fixed_theta_mask.len()]);
        let theta: Vec<f64> = self.free_theta_indices().into_iter().map(|k| full[k]).collect();
        let zero_v = ParameterPoint::new(theta.clone(), vec![0.0; self.d_v()]);
        let g = self.eval_moments(&zero_v, data)?;
        let means = g.column_means();
        let v = self.free_coordinates().into_iter().map(|j| means[j]).collect();
        Ok(ParameterPoint::new(theta, v))
    }
}
