use super::graph::{Graph, Var};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Ordered, uniquely named collection of tensors.
///
/// Used for trainable parameters, for their gradients and perturbations, and
/// for batch-norm running statistics. Iteration follows insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Default for ParameterSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParameterSet<T> {
    pub fn new() -> Self {
        ParameterSet { entries: Vec::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.position(&name).is_some() {
            return Err(Error::invalid(format!("duplicate parameter name `{}`", name)));
        }
        self.entries.push((name, value));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter `{}`", name)))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Global Euclidean norm over every entry, accumulated in `f64`.
    pub fn global_norm(&self) -> f64 {
        self.entries.iter().map(|(_, t)| t.sq_norm_f64()).sum::<f64>().sqrt()
    }

    /// Fails unless both sets have identical names, order and shapes.
    pub fn check_aligned(&self, other: &Self) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::invalid(format!(
                "parameter sets differ in length: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for ((na, ta), (nb, tb)) in self.entries.iter().zip(&other.entries) {
            if na != nb {
                return Err(Error::invalid(format!("parameter name mismatch: `{}` vs `{}`", na, nb)));
            }
            if ta.shape() != tb.shape() {
                return Err(Error::shape("parameters", format!("`{}`: {:?} vs {:?}", na, ta.shape(), tb.shape())));
            }
        }
        Ok(())
    }

    /// `self += scale * other`, elementwise per entry.
    pub fn axpy(&mut self, scale: T, other: &Self) -> Result<()> {
        self.check_aligned(other)?;
        for ((_, a), (_, b)) in self.entries.iter_mut().zip(&other.entries) {
            for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += scale * y;
            }
        }
        Ok(())
    }

    /// A set with the same names and shapes filled by `f(name, tensor)`.
    pub fn map(&self, mut f: impl FnMut(&str, &Tensor<T>) -> Tensor<T>) -> Self {
        ParameterSet {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), f(n, t))).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|_, t| Tensor::zeros(t.shape()))
    }

    /// Builds a set from names aligned with tensors.
    pub fn from_entries(entries: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut set = ParameterSet::new();
        for (n, t) in entries {
            set.insert(n, t)?;
        }
        Ok(set)
    }

    pub fn into_entries(self) -> Vec<(String, Tensor<T>)> {
        self.entries
    }

    /// FNV-1a hash over names, shapes and raw value bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        let mut buf = Vec::new();
        for (n, t) in &self.entries {
            feed(n.as_bytes());
            for &d in t.shape() {
                feed(&(d as u64).to_le_bytes());
            }
            buf.clear();
            for &v in t.data() {
                v.write_le(&mut buf);
            }
            feed(&buf);
        }
        h
    }
}

/// Graph handles for every entry of a [`ParameterSet`], in the same order.
#[derive(Clone, Debug)]
pub struct ParamVars {
    entries: Vec<(String, Var)>,
}

impl ParamVars {
    /// Records every parameter as a leaf (`trainable`) or a constant.
    pub fn record<T: Real>(graph: &mut Graph<T>, params: &ParameterSet<T>, trainable: bool) -> Self {
        let entries = params
            .iter()
            .map(|(n, t)| {
                let v = if trainable {
                    graph.leaf(t.clone())
                } else {
                    graph.constant(t.clone())
                };
                (n.to_string(), v)
            })
            .collect();
        ParamVars { entries }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::invalid(format!("missing parameter `{}`", name)))
    }

    pub fn vars(&self) -> Vec<Var> {
        self.entries.iter().map(|(_, v)| *v).collect()
    }

    /// Gradients of `output` for every parameter, as a named set.
    pub fn gradients<T: Real>(&self, graph: &Graph<T>, output: Var) -> Result<ParameterSet<T>> {
        let grads = graph.gradient(output, &self.vars())?;
        Ok(ParameterSet {
            entries: self.entries.iter().map(|(n, _)| n.clone()).zip(grads).collect(),
        })
    }
}
