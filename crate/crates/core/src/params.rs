//! Named collections of matrices that can be averaged and optimized.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// A keyed set of trainable matrices.
///
/// Iteration order is the lexicographic order of the keys, which makes every
/// reduction over a parameter set deterministic.
pub trait ParamSet<T: Scalar>: Clone {
    fn tensors(&self) -> Vec<(String, &Matrix<T>)>;

    fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix<T>)>;

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.len()).sum()
    }

    fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, m) in out.tensors_mut() {
            m.scale_in_place(T::zero());
        }
        out
    }

    /// Same keys with the same shapes.
    fn is_congruent(&self, other: &Self) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        a.len() == b.len()
            && a.iter()
                .zip(&b)
                .all(|((ka, ma), (kb, mb))| ka == kb && ma.shape() == mb.shape())
    }

    /// `self += coeff · other`, tensor by tensor.
    fn axpy(&mut self, coeff: T, other: &Self) -> Result<()> {
        if !self.is_congruent(other) {
            return Err(incongruent(self, other));
        }
        for ((_, dst), (_, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            dst.axpy(coeff, src)?;
        }
        Ok(())
    }

    fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite())
    }

    /// Values of every tensor concatenated in key order.
    fn flatten(&self) -> Vec<T> {
        self.tensors()
            .into_iter()
            .flat_map(|(_, m)| m.as_slice().to_vec())
            .collect()
    }
}

fn incongruent<T: Scalar, P: ParamSet<T>>(a: &P, b: &P) -> Error {
    let first_diff = a
        .tensors()
        .iter()
        .zip(b.tensors())
        .find(|((ka, ma), (kb, mb))| ka != kb || ma.shape() != mb.shape())
        .map(|((ka, ma), (kb, mb))| format!("{ka} {:?} vs {kb} {:?}", ma.shape(), mb.shape()))
        .unwrap_or_else(|| format!("{} vs {} tensors", a.tensors().len(), b.tensors().len()));
    Error::Protocol(format!("incongruent parameter sets: {first_diff}"))
}

/// Plain name → matrix map, used for backbone weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightSet<T> {
    tensors: BTreeMap<String, Matrix<T>>,
}

impl<T: Scalar> WeightSet<T> {
    pub fn new() -> Self {
        WeightSet {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, m: Matrix<T>) {
        self.tensors.insert(name.into(), m);
    }

    pub fn get(&self, name: &str) -> Result<&Matrix<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown weight `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Matrix<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("unknown weight `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn shapes(&self) -> BTreeMap<String, (usize, usize)> {
        self.tensors.iter().map(|(k, v)| (k.clone(), v.shape())).collect()
    }

    /// Copy of the tensors whose names satisfy `keep`.
    pub fn filter(&self, keep: impl Fn(&str) -> bool) -> Self {
        WeightSet {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| keep(k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Overwrites matching tensors with those of `other`; every key of
    /// `other` must already exist with the same shape.
    pub fn overwrite_from(&mut self, other: &Self) -> Result<()> {
        for (k, v) in &other.tensors {
            let dst = self.get_mut(k)?;
            if dst.shape() != v.shape() {
                return Err(Error::Shape {
                    op: "overwrite_from",
                    left: dst.shape(),
                    right: v.shape(),
                });
            }
            *dst = v.clone();
        }
        Ok(())
    }
}

impl<T: Scalar> ParamSet<T> for WeightSet<T> {
    fn tensors(&self) -> Vec<(String, &Matrix<T>)> {
        self.tensors.iter().map(|(k, v)| (k.clone(), v)).collect()
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.clone(), v)).collect()
    }
}

impl<T: Scalar> FromIterator<(String, Matrix<T>)> for WeightSet<T> {
    fn from_iter<I: IntoIterator<Item = (String, Matrix<T>)>>(iter: I) -> Self {
        WeightSet {
            tensors: iter.into_iter().collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(vals: &[(&str, f64)]) -> WeightSet<f64> {
        vals.iter()
            .map(|(k, v)| (k.to_string(), Matrix::filled(2, 2, *v)))
            .collect()
    }

    #[test]
    fn axpy_and_zeros_like() {
        let mut a = set(&[("a", 1.0), ("b", 2.0)]);
        let b = set(&[("a", 1.0), ("b", 1.0)]);
        a.axpy(2.0, &b).unwrap();
        assert_eq!(a.get("a").unwrap()[(0, 0)], 3.0);
        assert_eq!(a.get("b").unwrap()[(1, 1)], 4.0);
        assert_eq!(a.zeros_like().flatten(), vec![0.0; 8]);
        assert_eq!(a.param_count(), 8);
    }

    #[test]
    fn axpy_rejects_different_keys() {
        let mut a = set(&[("a", 1.0)]);
        let b = set(&[("b", 1.0)]);
        assert!(matches!(a.axpy(1.0, &b), Err(Error::Protocol(_))));
    }

    #[test]
    fn filter_and_overwrite() {
        let mut a = set(&[("keep.x", 1.0), ("drop.y", 2.0)]);
        let sub = a.filter(|k| k.starts_with("keep"));
        assert_eq!(sub.len(), 1);
        let replacement = set(&[("keep.x", 9.0)]);
        a.overwrite_from(&replacement).unwrap();
        assert_eq!(a.get("keep.x").unwrap()[(0, 0)], 9.0);
        assert!(a.overwrite_from(&set(&[("missing", 0.0)])).is_err());
    }
}
