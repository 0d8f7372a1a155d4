//! Dense tensors and a define-by-run reverse-mode autodiff engine.

mod graph;
mod kernels;
mod params;
mod tensor;

use std::collections::BTreeMap;

pub use graph::{BatchStats, Graph, Var};
pub use params::{ParamVars, ParameterSet};
pub use tensor::{DType, Real, Tensor};

use crate::error::{Error, Result};

/// Named input tensors for [`evaluate`].
pub type Bindings<T> = BTreeMap<String, Tensor<T>>;

/// Leaf variables created for each binding.
pub struct Inputs {
    vars: BTreeMap<String, Var>,
}

impl Inputs {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnboundInput(name.to_string()))
    }
}

/// A recorded graph together with its named inputs and outputs.
pub struct Evaluation<T> {
    pub graph: Graph<T>,
    pub inputs: Inputs,
    outputs: BTreeMap<String, Var>,
}

impl<T: Real> Evaluation<T> {
    pub fn output(&self, name: &str) -> Result<&Tensor<T>> {
        self.graph.value(self.output_var(name)?)
    }

    pub fn output_var(&self, name: &str) -> Result<Var> {
        self.outputs
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("no output named `{}`", name)))
    }

    /// Gradient of the scalar output `output` with respect to the named inputs.
    pub fn gradient(&self, output: &str, wrt: &[&str]) -> Result<Vec<Tensor<T>>> {
        let out = self.output_var(output)?;
        let vars = wrt
            .iter()
            .map(|n| self.inputs.get(n))
            .collect::<Result<Vec<_>>>()?;
        self.graph.gradient(out, &vars)
    }
}

/// Binds every named tensor as a differentiable leaf, then runs `build` to
/// record the computation and name its outputs.
///
/// With `strict` set, any op producing a non-finite value fails the call.
pub fn evaluate<T, F>(bindings: &Bindings<T>, strict: bool, build: F) -> Result<Evaluation<T>>
where
    T: Real,
    F: FnOnce(&mut Graph<T>, &Inputs) -> Result<Vec<(String, Var)>>,
{
    let mut graph = if strict { Graph::strict() } else { Graph::new() };
    let vars = bindings
        .iter()
        .map(|(n, t)| (n.clone(), graph.leaf(t.clone())))
        .collect();
    let inputs = Inputs { vars };
    let outputs = build(&mut graph, &inputs)?.into_iter().collect();
    Ok(Evaluation {
        graph,
        inputs,
        outputs,
    })
}

#[cfg(test)]
mod tests;
