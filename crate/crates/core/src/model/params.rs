use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A trainable tensor with a stable name, e.g. `conv2.weight`.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// An ordered collection of named tensors. Gradients and optimizer moments
/// reuse the same type with the same names and shapes as the parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.push(Param {
            name: name.into(),
            value,
        });
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: Tensor::zeros(p.value.shape().to_vec()),
                })
                .collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.value)
    }

    pub fn data(&self, index: usize) -> &[f64] {
        self.params[index].value.data()
    }

    pub fn data_mut(&mut self, index: usize) -> &mut [f64] {
        self.params[index].value.data_mut()
    }

    /// Checks that `other` has the same names and shapes in the same order.
    pub fn check_compatible(&self, other: &ParamSet) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::Shape(format!(
                "parameter count {} vs {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::Shape(format!(
                    "parameter {} {:?} vs {} {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
        }
        Ok(())
    }

    /// `self += alpha * other`; the sets must be compatible.
    pub fn add_scaled(&mut self, other: &ParamSet, alpha: f64) {
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            for (x, y) in a.value.data_mut().iter_mut().zip(b.value.data()) {
                *x += alpha * y;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for p in &mut self.params {
            for x in p.value.data_mut() {
                *x *= alpha;
            }
        }
    }

    /// Concatenation of all entries in parameter order.
    pub fn flatten(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }

    /// Name of the `flat`-th scalar entry, e.g. `conv1.bias[3]`.
    pub fn entry_name(&self, mut flat: usize) -> Option<String> {
        for p in &self.params {
            if flat < p.value.len() {
                return Some(format!("{}[{}]", p.name, flat));
            }
            flat -= p.value.len();
        }
        None
    }

    /// Mutable access to the `flat`-th scalar entry.
    pub fn entry_mut(&mut self, mut flat: usize) -> Option<&mut f64> {
        for p in &mut self.params {
            if flat < p.value.len() {
                return Some(&mut p.value.data_mut()[flat]);
            }
            flat -= p.value.len();
        }
        None
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_entries_are_named_by_parameter() {
        let mut set = ParamSet::new();
        set.push("a", Tensor::zeros(vec![2]));
        set.push("b", Tensor::zeros(vec![3]));
        assert_eq!(set.numel(), 5);
        assert_eq!(set.entry_name(1).as_deref(), Some("a[1]"));
        assert_eq!(set.entry_name(2).as_deref(), Some("b[0]"));
        assert_eq!(set.entry_name(5), None);
        *set.entry_mut(4).unwrap() = 7.0;
        assert_eq!(set.get("b").unwrap().data(), &[0.0, 0.0, 7.0]);
    }
}
