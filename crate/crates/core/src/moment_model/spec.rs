use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{BetelError, Result};

use super::{Link, MomentModel, Primitive, RegressionMoments};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnSpec {
    pub response: String,
    #[serde(default)]
    pub regressors: Vec<String>,
    #[serde(default)]
    pub instruments: Vec<String>,
}

/// Structured declaration of a model from one of the registered families:
/// `linear`, `iv`, `location` (alias `mean`) and `count`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default)]
    pub name: Option<String>,
    pub family: String,
    /// Optional cross-check of the number of moment coordinates.
    #[serde(default)]
    pub d: Option<usize>,
    pub columns: ColumnSpec,
    #[serde(default)]
    pub intercept: Option<bool>,
    /// Defaults depend on the family; see [`make_model`].
    #[serde(default)]
    pub moments: Option<Vec<Primitive>>,
    /// `true` marks an active restriction; defaults to all active.
    #[serde(default)]
    pub active_mask: Option<Vec<bool>>,
    /// Interest parameters pinned to zero, by label.
    #[serde(default)]
    pub fixed_theta: Vec<String>,
}

/// Builds a model from a registered family.
///
/// Default moments: `location` uses the residual; `linear` the residual and
/// the residual times each regressor; `iv` the residual and the residual times
/// each instrument; `count` the residual times each regressor. Only `count`
/// omits the intercept by default.
pub fn make_model(spec: &ModelSpec) -> Result<MomentModel> {
    let cols = &spec.columns;
    let times = |names: &[String]| -> Vec<Primitive> {
        names.iter().map(|c| Primitive::ResidualTimes { column: c.clone() }).collect()
    };
    let (family, link, intercept, regressors, default_moments) = match spec.family.as_str() {
        "location" | "mean" => {
            if !cols.regressors.is_empty() {
                return Err(BetelError::InvalidModel("location family takes no regressors".into()));
            }
            ("location", Link::Identity, true, vec![], vec![Primitive::Residual])
        }
        "linear" => {
            let mut m = vec![Primitive::Residual];
            m.extend(times(&cols.regressors));
            ("linear", Link::Identity, spec.intercept.unwrap_or(true), cols.regressors.clone(), m)
        }
        "iv" => {
            if cols.instruments.is_empty() {
                return Err(BetelError::InvalidModel("iv family needs instruments".into()));
            }
            let mut m = vec![Primitive::Residual];
            m.extend(times(&cols.instruments));
            ("iv", Link::Identity, spec.intercept.unwrap_or(true), cols.regressors.clone(), m)
        }
        "count" => (
            "count",
            Link::Log,
            spec.intercept.unwrap_or(false),
            cols.regressors.clone(),
            times(&cols.regressors),
        ),
        other => return Err(BetelError::UnknownFamily(other.to_string())),
    };
    let moments = spec.moments.clone().unwrap_or(default_moments);
    let registry =
        RegressionMoments::new(family, link, cols.response.clone(), intercept, regressors, moments)?;
    let d = registry.primitives().len();
    if let Some(declared) = spec.d {
        if declared != d {
            return Err(BetelError::InvalidModel(format!(
                "declared d = {declared} but {d} moments are listed"
            )));
        }
    }
    let active = spec.active_mask.clone().unwrap_or_else(|| vec![true; d]);
    if active.len() != d {
        return Err(BetelError::InvalidModel(format!(
            "active_mask has {} entries for {d} moments",
            active.len()
        )));
    }
    let registry = Arc::new(registry);
    let labels = super::MomentFunction::theta_labels(registry.as_ref());
    let mut fixed = vec![false; labels.len()];
    for name in &spec.fixed_theta {
        let k = labels.iter().position(|l| l == name).ok_or_else(|| {
            BetelError::InvalidModel(format!("cannot pin unknown parameter `{name}`"))
        })?;
        fixed[k] = true;
    }
    let name = spec.name.clone().unwrap_or_else(|| family.to_string());
    MomentModel::new(name, registry, active, fixed)
}
