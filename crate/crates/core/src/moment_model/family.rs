use std::any::Any;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{BetelError, Result};

/// Identity of a moment restriction: two coordinates are the same restriction
/// iff their primitive and the columns they touch agree.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CoordinateKey {
    pub primitive: String,
    pub columns: Vec<String>,
}

/// One coordinate of a moment registry.
#[derive(Debug, Clone, PartialEq)]
pub struct Coordinate {
    pub key: CoordinateKey,
    pub label: String,
    /// Indices into the registry's θ layout that this coordinate depends on.
    pub involves: Vec<usize>,
}

/// A registry of moment coordinates g(x, θ) over a shared θ layout.
///
/// Registered families implement this trait; it is also the extension point
/// for user-supplied moment functions. Implementations must be pure.
pub trait MomentFunction: Send + Sync + fmt::Debug {
    fn family(&self) -> &str;

    /// Labels of the full θ layout.
    fn theta_labels(&self) -> Vec<String>;

    /// All coordinates this registry can evaluate, in registry order.
    fn coordinates(&self) -> Vec<Coordinate>;

    /// Fails when `data` lacks a column the registry binds.
    fn check_data(&self, data: &Dataset) -> Result<()>;

    /// Writes g(x_i, θ) for the `selected` coordinates into `out`, row-major
    /// with `selected.len()` columns. `theta` has the full layout.
    fn evaluate(
        &self,
        data: &Dataset,
        theta: &[f64],
        selected: &[usize],
        out: &mut [f64],
    ) -> Result<()>;

    /// Cheap starting value for θ, if the family knows one.
    fn initial_theta(&self, _data: &Dataset) -> Option<Vec<f64>> {
        None
    }

    /// Registry containing the coordinates and parameters of `self` and
    /// every member of `others`, or `None` when they cannot be merged.
    fn union(&self, _others: &[Arc<dyn MomentFunction>]) -> Option<Arc<dyn MomentFunction>> {
        None
    }

    fn as_any(&self) -> &dyn Any;
}

/// Building blocks of the registered regression families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    /// r
    Residual,
    /// r · column
    ResidualTimes { column: String },
    /// r^power − offset
    ResidualPower {
        power: u32,
        #[serde(default)]
        offset: f64,
    },
    /// (r / √μ)² − 1, count families only
    Dispersion,
}

impl Primitive {
    pub fn key(&self) -> CoordinateKey {
        match self {
            Primitive::Residual => CoordinateKey { primitive: "residual".into(), columns: vec![] },
            Primitive::ResidualTimes { column } => CoordinateKey {
                primitive: "residual_times".into(),
                columns: vec![column.clone()],
            },
            Primitive::ResidualPower { power, offset } => CoordinateKey {
                primitive: format!("residual_power:{power}:{offset:?}"),
                columns: vec![],
            },
            Primitive::Dispersion => {
                CoordinateKey { primitive: "dispersion".into(), columns: vec![] }
            }
        }
    }

    pub fn label(&self) -> String {
        match self {
            Primitive::Residual => "e".into(),
            Primitive::ResidualTimes { column } => format!("e*{column}"),
            Primitive::ResidualPower { power, offset } if *offset == 0.0 => format!("e^{power}"),
            Primitive::ResidualPower { power, offset } => format!("e^{power}-{offset}"),
            Primitive::Dispersion => "dispersion".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Link {
    /// r = y − x'θ
    Identity,
    /// μ = exp(x'θ), r = y − μ
    Log,
}

/// Residual-based moments for linear, IV, location and count regressions.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionMoments {
    family: String,
    link: Link,
    response: String,
    intercept: bool,
    regressors: Vec<String>,
    primitives: Vec<Primitive>,
}

impl RegressionMoments {
    pub fn new(
        family: impl Into<String>,
        link: Link,
        response: impl Into<String>,
        intercept: bool,
        regressors: Vec<String>,
        primitives: Vec<Primitive>,
    ) -> Result<Self> {
        let family = family.into();
        if primitives.is_empty() {
            return Err(BetelError::InvalidModel("no moment coordinates declared".into()));
        }
        for (i, p) in primitives.iter().enumerate() {
            if primitives[..i].iter().any(|q| q.key() == p.key()) {
                return Err(BetelError::InvalidModel(format!(
                    "moment `{}` declared twice",
                    p.label()
                )));
            }
            if *p == Primitive::Dispersion && link != Link::Log {
                return Err(BetelError::InvalidModel(
                    "dispersion moment requires a count family".into(),
                ));
            }
            if let Primitive::ResidualPower { power: 0, .. } = p {
                return Err(BetelError::InvalidModel("residual power must be positive".into()));
            }
        }
        if !intercept && regressors.is_empty() {
            return Err(BetelError::InvalidModel("model has no parameters".into()));
        }
        Ok(Self { family, link, response: response.into(), intercept, regressors, primitives })
    }

    pub fn primitives(&self) -> &[Primitive] {
        &self.primitives
    }

    fn n_theta(&self) -> usize {
        usize::from(self.intercept) + self.regressors.len()
    }
}

impl MomentFunction for RegressionMoments {
    fn family(&self) -> &str {
        &self.family
    }

    fn theta_labels(&self) -> Vec<String> {
        let mut labels = Vec::with_capacity(self.n_theta());
        if self.intercept {
            labels.push("intercept".into());
        }
        labels.extend(self.regressors.iter().cloned());
        labels
    }

    fn coordinates(&self) -> Vec<Coordinate> {
        let all: Vec<usize> = (0..self.n_theta()).collect();
        self.primitives
            .iter()
            .map(|p| Coordinate { key: p.key(), label: p.label(), involves: all.clone() })
            .collect()
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        data.column(&self.response)?;
        for r in &self.regressors {
            data.column(r)?;
        }
        for p in &self.primitives {
            if let Primitive::ResidualTimes { column } = p {
                data.column(column)?;
            }
        }
        Ok(())
    }

    fn evaluate(
        &self,
        data: &Dataset,
        theta: &[f64],
        selected: &[usize],
        out: &mut [f64],
    ) -> Result<()> {
        if theta.len() != self.n_theta() {
            return Err(BetelError::DimensionMismatch { expected: self.n_theta(), got: theta.len() });
        }
        let n = data.n_rows();
        let k = selected.len();
        debug_assert_eq!(out.len(), n * k);
        let y = data.column(&self.response)?;
        let xs: Vec<&[f64]> =
            self.regressors.iter().map(|r| data.column(r)).collect::<Result<_>>()?;
        let (base, slopes) =
            if self.intercept { (theta[0], &theta[1..]) } else { (0.0, theta) };
        enum Op<'a> {
            Resid,
            Times(&'a [f64]),
            Power(i32, f64),
            Disp,
        }
        let ops: Vec<Op> = selected
            .iter()
            .map(|&j| {
                Ok(match &self.primitives[j] {
                    Primitive::Residual => Op::Resid,
                    Primitive::ResidualTimes { column } => Op::Times(data.column(column)?),
                    Primitive::ResidualPower { power, offset } => Op::Power(*power as i32, *offset),
                    Primitive::Dispersion => Op::Disp,
                })
            })
            .collect::<Result<_>>()?;
        for i in 0..n {
            let mut eta = base;
            for (b, x) in slopes.iter().zip(&xs) {
                eta += b * x[i];
            }
            let (r, mu) = match self.link {
                Link::Identity => (y[i] - eta, 1.0),
                Link::Log => {
                    let mu = eta.exp();
                    (y[i] - mu, mu)
                }
            };
            let row = &mut out[i * k..(i + 1) * k];
            for (slot, op) in row.iter_mut().zip(&ops) {
                *slot = match op {
                    Op::Resid => r,
                    Op::Times(c) => r * c[i],
                    Op::Power(p, c) => r.powi(*p) - c,
                    Op::Disp => r * r / mu - 1.0,
                };
            }
        }
        Ok(())
    }

    fn initial_theta(&self, data: &Dataset) -> Option<Vec<f64>> {
        let y = data.column(&self.response).ok()?;
        let n = y.len();
        let p = self.n_theta();
        if n < p {
            return None;
        }
        let xs: Vec<&[f64]> =
            self.regressors.iter().map(|r| data.column(r)).collect::<Result<_>>().ok()?;
        let design = DMatrix::from_fn(n, p, |i, j| {
            if self.intercept {
                if j == 0 { 1.0 } else { xs[j - 1][i] }
            } else {
                xs[j][i]
            }
        });
        let target = DVector::from_iterator(
            n,
            y.iter().map(|&v| match self.link {
                Link::Identity => v,
                Link::Log => (v.max(0.0) + 0.5).ln(),
            }),
        );
        let xtx = design.transpose() * &design;
        let xty = design.transpose() * target;
        let sol = xtx.cholesky()?.solve(&xty);
        sol.iter().all(|v| v.is_finite()).then(|| sol.iter().copied().collect())
    }

    fn union(&self, others: &[Arc<dyn MomentFunction>]) -> Option<Arc<dyn MomentFunction>> {
        let mut merged = self.clone();
        for other in others {
            let other = other.as_any().downcast_ref::<RegressionMoments>()?;
            if other.link != merged.link
                || other.response != merged.response
                || other.intercept != merged.intercept
            {
                return None;
            }
            if other.family != merged.family {
                merged.family = match merged.link {
                    Link::Identity => "linear".into(),
                    Link::Log => "count".into(),
                };
            }
            for r in &other.regressors {
                if !merged.regressors.contains(r) {
                    merged.regressors.push(r.clone());
                }
            }
            for p in &other.primitives {
                if !merged.primitives.iter().any(|q| q.key() == p.key()) {
                    merged.primitives.push(p.clone());
                }
            }
        }
        Some(Arc::new(merged))
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}
