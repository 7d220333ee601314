use std::fmt;
use std::sync::Arc;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{argument, config, Result};

/// Images are `[C, H, W]` tensors with values in `[0, 1]`.
pub type Image = Array3<f64>;

/// One value per generative factor, in factor order.
pub type FactorTuple = Vec<usize>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Factor {
    pub name: String,
    pub cardinality: usize,
}

impl Factor {
    pub fn new(name: impl Into<String>, cardinality: usize) -> Self {
        Self {
            name: name.into(),
            cardinality,
        }
    }
}

/// Named generative factors with the classification target marked.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorSpec {
    factors: Vec<Factor>,
    predictive_index: usize,
    known_nuisance_indices: Vec<usize>,
}

impl FactorSpec {
    pub fn new(
        factors: Vec<Factor>,
        predictive_index: usize,
        known_nuisance_indices: Vec<usize>,
    ) -> Result<Self> {
        if factors.is_empty() {
            return Err(config("factor spec has no factors"));
        }
        if let Some(f) = factors.iter().find(|f| f.cardinality < 2) {
            return Err(config(format!(
                "factor `{}` has cardinality {} (< 2)",
                f.name, f.cardinality
            )));
        }
        if predictive_index >= factors.len() {
            return Err(config(format!(
                "predictive index {predictive_index} out of range for {} factors",
                factors.len()
            )));
        }
        for &i in &known_nuisance_indices {
            if i >= factors.len() {
                return Err(config(format!("known nuisance index {i} out of range")));
            }
            if i == predictive_index {
                return Err(config("predictive factor cannot also be a known nuisance"));
            }
        }
        Ok(Self {
            factors,
            predictive_index,
            known_nuisance_indices,
        })
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn num_factors(&self) -> usize {
        self.factors.len()
    }

    pub fn cardinality(&self, i: usize) -> usize {
        self.factors[i].cardinality
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.cardinality).collect()
    }

    pub fn predictive_index(&self) -> usize {
        self.predictive_index
    }

    pub fn known_nuisance_indices(&self) -> &[usize] {
        &self.known_nuisance_indices
    }

    pub fn num_classes(&self) -> usize {
        self.cardinality(self.predictive_index)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.factors.iter().position(|f| f.name == name)
    }

    /// Product of cardinalities.
    pub fn combinations(&self) -> usize {
        self.factors.iter().map(|f| f.cardinality).product()
    }

    pub fn validate_tuple(&self, tuple: &[usize]) -> Result<()> {
        if tuple.len() != self.factors.len() {
            return Err(argument(format!(
                "factor tuple has {} entries, expected {}",
                tuple.len(),
                self.factors.len()
            )));
        }
        for (v, f) in tuple.iter().zip(&self.factors) {
            if *v >= f.cardinality {
                return Err(argument(format!(
                    "value {v} out of range for factor `{}` (cardinality {})",
                    f.name, f.cardinality
                )));
            }
        }
        Ok(())
    }
}

/// Deterministic factor-tuple to image mapping.
pub trait Renderer: Send + Sync {
    fn image_shape(&self) -> ImageShape;

    /// `tuple` has already been validated against the grid's spec.
    fn render(&self, tuple: &[usize]) -> Image;
}

/// A factor spec paired with its renderer.
#[derive(Clone)]
pub struct FactorGrid {
    spec: FactorSpec,
    renderer: Arc<dyn Renderer>,
}

impl fmt::Debug for FactorGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FactorGrid")
            .field("spec", &self.spec)
            .field("image_shape", &self.renderer.image_shape())
            .finish()
    }
}

impl FactorGrid {
    pub fn new(spec: FactorSpec, renderer: Arc<dyn Renderer>) -> Self {
        Self { spec, renderer }
    }

    pub fn spec(&self) -> &FactorSpec {
        &self.spec
    }

    pub fn image_shape(&self) -> ImageShape {
        self.renderer.image_shape()
    }

    pub fn render(&self, tuple: &[usize]) -> Result<Image> {
        self.spec.validate_tuple(tuple)?;
        Ok(self.renderer.render(tuple))
    }

    pub fn label(&self, tuple: &[usize]) -> usize {
        tuple[self.spec.predictive_index]
    }

    /// Every tuple of the full grid in lexicographic order.
    pub fn enumerate(&self) -> Vec<FactorTuple> {
        let domain: Vec<Vec<usize>> = self
            .spec
            .cardinalities()
            .into_iter()
            .map(|c| (0..c).collect())
            .collect();
        cartesian(&domain)
    }
}

/// Lexicographic Cartesian product of per-factor value lists.
pub fn cartesian(domain: &[Vec<usize>]) -> Vec<FactorTuple> {
    let total: usize = domain.iter().map(Vec::len).product();
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return out;
    }
    let mut cursor = vec![0usize; domain.len()];
    loop {
        out.push(cursor.iter().zip(domain).map(|(&c, d)| d[c]).collect());
        let mut axis = domain.len();
        loop {
            if axis == 0 {
                return out;
            }
            axis -= 1;
            cursor[axis] += 1;
            if cursor[axis] < domain[axis].len() {
                break;
            }
            cursor[axis] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_degenerate_specs() {
        assert!(FactorSpec::new(vec![Factor::new("a", 1)], 0, vec![]).is_err());
        let f = vec![Factor::new("a", 2), Factor::new("b", 3)];
        assert!(FactorSpec::new(f.clone(), 0, vec![0]).is_err());
        assert!(FactorSpec::new(f.clone(), 2, vec![]).is_err());
        let spec = FactorSpec::new(f, 0, vec![1]).unwrap();
        assert_eq!(spec.combinations(), 6);
        assert!(spec.validate_tuple(&[1, 3]).is_err());
        assert!(spec.validate_tuple(&[1]).is_err());
    }

    #[test]
    fn cartesian_is_lexicographic() {
        let t = cartesian(&[vec![0, 1], vec![4, 5, 6]]);
        assert_eq!(t.len(), 6);
        assert_eq!(t[0], vec![0, 4]);
        assert_eq!(t[1], vec![0, 5]);
        assert_eq!(t[5], vec![1, 6]);
        assert!(cartesian(&[vec![0], vec![]]).is_empty());
    }
}
