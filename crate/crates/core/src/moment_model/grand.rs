use std::collections::HashSet;
use std::sync::Arc;

use crate::error::{BetelError, Result};

use super::{CoordinateKey, MomentFunction, MomentModel};

/// The grand model and every candidate rewritten against its moment vector.
#[derive(Debug, Clone)]
pub struct GrandModelBundle {
    pub grand: MomentModel,
    pub reformulated: Vec<MomentModel>,
    /// Human-readable record of choices made while reformulating.
    pub notes: Vec<String>,
}

impl GrandModelBundle {
    pub fn model_names(&self) -> Vec<String> {
        self.reformulated.iter().map(|m| m.name().to_string()).collect()
    }
}

fn shared_registry(models: &[MomentModel]) -> Result<Arc<dyn MomentFunction>> {
    let first = models[0].registry().clone();
    if models.iter().all(|m| Arc::ptr_eq(m.registry(), &first)) {
        return Ok(first);
    }
    let others: Vec<Arc<dyn MomentFunction>> =
        models[1..].iter().map(|m| m.registry().clone()).collect();
    first.union(&others).ok_or_else(|| {
        BetelError::NotComparable("models do not draw on a shared moment registry".into())
    })
}

/// Builds the grand model nesting `models` and rewrites each of them so that
/// all share one moment vector and one θ layout.
///
/// Coordinates are matched by [`CoordinateKey`]. For each model: interest
/// parameters it lacks but whose moments involve them are pinned to zero;
/// parameters foreign to all its moments stay free and the first matching
/// absent coordinates in registry order stay active to identify them; every
/// other absent coordinate gets a free offset.
pub fn build_grand_model(models: &[MomentModel]) -> Result<GrandModelBundle> {
    if models.is_empty() {
        return Err(BetelError::InvalidModel("no models to combine".into()));
    }
    let registry = shared_registry(models)?;
    let reg_coords = registry.coordinates();
    let reg_labels = registry.theta_labels();
    let key_index = |key: &CoordinateKey| reg_coords.iter().position(|c| &c.key == key);

    // Grand coordinates in order of first appearance; union of used parameters.
    let mut grand_coords: Vec<usize> = Vec::new();
    let mut used: HashSet<usize> = HashSet::new();
    let mut per_model: Vec<(Vec<(usize, bool)>, HashSet<usize>)> = Vec::new();
    for m in models {
        let mut present = Vec::with_capacity(m.d());
        for (c, &active) in m.coordinates().iter().zip(m.active_mask()) {
            let idx = key_index(&c.key).ok_or_else(|| {
                BetelError::NotComparable(format!("coordinate `{}` missing from registry", c.label))
            })?;
            if !grand_coords.contains(&idx) {
                grand_coords.push(idx);
            }
            present.push((idx, active));
        }
        let mut params = HashSet::new();
        for k in m.free_theta_indices() {
            let label = &m.theta_layout()[k];
            let g = reg_labels.iter().position(|l| l == label).ok_or_else(|| {
                BetelError::NotComparable(format!("parameter `{label}` missing from registry"))
            })?;
            params.insert(g);
            used.insert(g);
        }
        per_model.push((present, params));
    }

    let grand_fixed: Vec<bool> = (0..reg_labels.len()).map(|k| !used.contains(&k)).collect();
    let grand = MomentModel::with_coordinates(
        "grand",
        registry.clone(),
        grand_coords.clone(),
        vec![true; grand_coords.len()],
        grand_fixed.clone(),
    )?;

    let mut notes = Vec::new();
    let mut reformulated = Vec::with_capacity(models.len());
    for (m, (present, params)) in models.iter().zip(per_model) {
        let involved: HashSet<usize> = present
            .iter()
            .flat_map(|(idx, _)| reg_coords[*idx].involves.iter().copied())
            .collect();
        let mut fixed = grand_fixed.clone();
        let mut extras = Vec::new();
        for k in 0..reg_labels.len() {
            if grand_fixed[k] || params.contains(&k) {
                continue;
            }
            if involved.contains(&k) {
                fixed[k] = true;
            } else {
                extras.push(k);
            }
        }
        let mut needed = extras.len();
        let mut active = Vec::with_capacity(grand_coords.len());
        for &idx in &grand_coords {
            if let Some(&(_, a)) = present.iter().find(|(i, _)| *i == idx) {
                active.push(a);
            } else if needed > 0
                && reg_coords[idx].involves.iter().any(|k| extras.contains(k))
            {
                needed -= 1;
                active.push(true);
                notes.push(format!(
                    "{}: kept `{}` active to identify foreign parameters",
                    m.name(),
                    reg_coords[idx].label
                ));
            } else {
                active.push(false);
            }
        }
        if needed > 0 {
            return Err(BetelError::NotComparable(format!(
                "{}: too few restrictions identify its foreign parameters",
                m.name()
            )));
        }
        let reformed = MomentModel::with_coordinates(
            m.name(),
            registry.clone(),
            grand_coords.clone(),
            active,
            fixed,
        )
        .map_err(|e| match e {
            BetelError::InvalidModel(msg) => BetelError::NotComparable(msg),
            other => other,
        })?;
        reformulated.push(reformed);
    }
    Ok(GrandModelBundle { grand, reformulated, notes })
}

#[cfg(test)]
mod tests {
    use std::any::Any;

    use super::*;
    use crate::data::Dataset;
    use crate::moment_model::{Coordinate, Link, Primitive, RegressionMoments};

    fn linear(moments: Vec<Primitive>, regressors: &[&str]) -> MomentModel {
        let reg = RegressionMoments::new(
            "linear",
            Link::Identity,
            "y",
            true,
            regressors.iter().map(|s| s.to_string()).collect(),
            moments,
        )
        .unwrap();
        let d = reg.primitives().len();
        let p = 1 + regressors.len();
        MomentModel::new("m", Arc::new(reg), vec![true; d], vec![false; p]).unwrap()
    }

    fn e() -> Primitive {
        Primitive::Residual
    }
    fn ez() -> Primitive {
        Primitive::ResidualTimes { column: "z".into() }
    }
    fn e3() -> Primitive {
        Primitive::ResidualPower { power: 3, offset: 0.0 }
    }
    fn e2() -> Primitive {
        Primitive::ResidualPower { power: 2, offset: 1.0 }
    }

    #[test]
    fn example1_pair() {
        let a = linear(vec![e(), ez()], &["z"]).with_name("M1");
        let b = linear(vec![e(), ez(), e3()], &["z"]).with_name("M2");
        let bundle = build_grand_model(&[a, b]).unwrap();
        assert_eq!(bundle.grand.d(), 3);
        assert_eq!(bundle.reformulated[0].active_mask(), &[true, true, false]);
        assert_eq!(bundle.reformulated[1].active_mask(), &[true, true, true]);
        assert!(bundle.reformulated.iter().all(|m| m.p() == 2));
    }

    #[test]
    fn three_nested_models() {
        let m1 = linear(vec![e(), ez(), e3(), e2()], &["z"]);
        let m2 = linear(vec![e(), ez(), e2()], &["z"]);
        let m3 = linear(vec![e(), e2()], &["z"]);
        let bundle = build_grand_model(&[m1, m2, m3]).unwrap();
        let masks: Vec<_> = bundle.reformulated.iter().map(|m| m.active_mask().to_vec()).collect();
        assert_eq!(masks[0], vec![true, true, true, true]);
        assert_eq!(masks[1], vec![true, true, false, true]);
        assert_eq!(masks[2], vec![true, false, false, true]);
    }

    #[test]
    fn single_model_is_unchanged() {
        let m = linear(vec![e(), ez(), e3()], &["z"]);
        let m = MomentModel::new("only", m.registry().clone(), vec![true, true, false], vec![false; 2])
            .unwrap();
        let bundle = build_grand_model(std::slice::from_ref(&m)).unwrap();
        assert_eq!(bundle.reformulated[0].active_mask(), m.active_mask());
        assert_eq!(bundle.grand.d(), m.d());
    }

    #[test]
    fn absent_interest_parameter_is_pinned() {
        let small = linear(vec![e(), ez()], &["z"]);
        let big = linear(
            vec![e(), ez(), Primitive::ResidualTimes { column: "w".into() }],
            &["z", "w"],
        );
        let bundle = build_grand_model(&[small, big]).unwrap();
        let r = &bundle.reformulated[0];
        assert_eq!(r.fixed_theta_mask(), &[false, false, true]);
        assert_eq!(r.active_mask(), &[true, true, false]);
        assert_eq!(bundle.reformulated[1].p(), 3);
    }

    #[test]
    fn rebuilding_is_idempotent() {
        let m1 = linear(vec![e(), ez(), e3(), e2()], &["z"]);
        let m2 = linear(vec![e(), e2()], &["z"]);
        let first = build_grand_model(&[m1, m2]).unwrap();
        let second = build_grand_model(&first.reformulated).unwrap();
        for (a, b) in first.reformulated.iter().zip(&second.reformulated) {
            assert_eq!(a.active_mask(), b.active_mask());
            assert_eq!(a.fixed_theta_mask(), b.fixed_theta_mask());
            assert_eq!(a.d(), b.d());
        }
    }

    /// Two unrelated scalar means sharing one registry: g = (x − a, y − b).
    #[derive(Debug)]
    struct TwoMeans;

    impl MomentFunction for TwoMeans {
        fn family(&self) -> &str {
            "two_means"
        }
        fn theta_labels(&self) -> Vec<String> {
            vec!["a".into(), "b".into()]
        }
        fn coordinates(&self) -> Vec<Coordinate> {
            ["x", "y"]
                .iter()
                .enumerate()
                .map(|(k, c)| Coordinate {
                    key: CoordinateKey { primitive: "mean".into(), columns: vec![c.to_string()] },
                    label: format!("{c}-mean"),
                    involves: vec![k],
                })
                .collect()
        }
        fn check_data(&self, data: &Dataset) -> Result<()> {
            data.column("x").and(data.column("y")).map(|_| ())
        }
        fn evaluate(&self, data: &Dataset, theta: &[f64], sel: &[usize], out: &mut [f64]) -> Result<()> {
            let cols = [data.column("x")?, data.column("y")?];
            for i in 0..data.n_rows() {
                for (s, &j) in sel.iter().enumerate() {
                    out[i * sel.len() + s] = cols[j][i] - theta[j];
                }
            }
            Ok(())
        }
        fn as_any(&self) -> &dyn Any {
            self
        }
    }

    #[test]
    fn foreign_parameter_keeps_its_identifying_restriction() {
        let reg: Arc<dyn MomentFunction> = Arc::new(TwoMeans);
        let only_a =
            MomentModel::with_coordinates("A", reg.clone(), vec![0], vec![true], vec![false, true])
                .unwrap();
        let both =
            MomentModel::with_coordinates("AB", reg, vec![0, 1], vec![true, true], vec![false, false])
                .unwrap();
        let bundle = build_grand_model(&[only_a, both]).unwrap();
        let r = &bundle.reformulated[0];
        assert_eq!(r.fixed_theta_mask(), &[false, false]);
        assert_eq!(r.active_mask(), &[true, true]);
        assert_eq!(bundle.notes.len(), 1);
    }
}
