//! Named parameter collections and their gradient counterparts.

use std::collections::HashMap;

use ndarray::ArrayD;

use crate::error::DiffError;

/// Ordered, named collection of real-valued arrays. The name set and the
/// shapes are fixed at construction; updates must preserve both.
#[derive(Debug, Clone)]
pub struct ParamSet {
    entries: Vec<(String, ArrayD<f64>)>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, value));
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries
            .iter()
            .all(|(_, v)| v.iter().all(|x| x.is_finite()))
    }

    /// Checks that `other` has the same names in the same order with the
    /// same shapes.
    pub fn congruent(&self, other: &ParamSet) -> Result<(), DiffError> {
        if self.entries.len() != other.entries.len() {
            return Err(DiffError::Structural(format!(
                "parameter count mismatch: {} vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for ((na, va), (nb, vb)) in self.entries.iter().zip(other.entries.iter()) {
            if na != nb {
                return Err(DiffError::Structural(format!(
                    "parameter name mismatch: {na} vs {nb}"
                )));
            }
            if va.shape() != vb.shape() {
                return Err(DiffError::ShapeMismatch {
                    context: "param congruence",
                    lhs: va.shape().to_vec(),
                    rhs: vb.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Elementwise map over every array, preserving structure.
    pub fn map(&self, mut f: impl FnMut(&str, &ArrayD<f64>) -> ArrayD<f64>) -> ParamSet {
        let mut out = ParamSet::new();
        for (n, v) in &self.entries {
            let nv = f(n, v);
            assert_eq!(nv.shape(), v.shape(), "map must preserve shapes");
            out.insert(n.clone(), nv);
        }
        out
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient of a scalar objective with respect to a [`ParamSet`]:
/// structurally congruent named arrays.
#[derive(Debug, Clone)]
pub struct GradSet {
    pub(crate) values: ParamSet,
}

impl GradSet {
    pub fn zeros_like(params: &ParamSet) -> Self {
        GradSet {
            values: params.map(|_, v| ArrayD::zeros(v.raw_dim())),
        }
    }

    pub fn from_params(values: ParamSet) -> Self {
        GradSet { values }
    }

    pub fn into_params(self) -> ParamSet {
        self.values
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.values.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.values.iter()
    }

    pub fn congruent(&self, params: &ParamSet) -> Result<(), DiffError> {
        self.values.congruent(params)
    }

    pub fn all_finite(&self) -> bool {
        self.values.all_finite()
    }

    /// Max absolute entry, useful for diagnostics and convergence checks.
    pub fn max_abs(&self) -> f64 {
        self.values
            .iter()
            .flat_map(|(_, v)| v.iter())
            .fold(0.0f64, |m, &x| m.max(x.abs()))
    }
}
