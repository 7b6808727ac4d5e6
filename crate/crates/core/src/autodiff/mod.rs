//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation of one forward pass; [`Graph::backward`]
//! sweeps it once in reverse and deposits gradients on the leaves that asked
//! for them. Only the primitives the survival model needs are provided.

mod graph;
mod tensor;

pub use graph::{BatchNormState, BatchStats, CustomOp, Graph, Mode, Var};
pub use tensor::Tensor;

/// Finite-difference gradient checking for graph functions.
pub mod gradcheck {
    use super::{Graph, Tensor, Var};
    use crate::error::{Error, Result};

    /// Largest elementwise `|analytic - central| / max(1, |central|)` over all
    /// inputs of the scalar function `f`, with central differences of step
    /// `h`.
    pub fn max_relative_error(
        inputs: &[Tensor],
        h: f64,
        f: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
    ) -> Result<f64> {
        let eval = |ts: &[Tensor]| -> Result<f64> {
            let mut g = Graph::new();
            let vars: Vec<Var> = ts.iter().map(|t| g.param(t.clone())).collect();
            let loss = f(&mut g, &vars)?;
            Ok(g.value(loss).item())
        };
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        if g.value(loss).numel() != 1 {
            return Err(Error::InvalidArgument(
                "gradient check needs a scalar function".into(),
            ));
        }
        g.backward(loss)?;
        let mut worst = 0.0f64;
        for (i, v) in vars.iter().enumerate() {
            let analytic = g
                .grad(*v)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
            for (j, &a) in analytic.iter().enumerate() {
                let mut plus = inputs.to_vec();
                plus[i].data_mut()[j] += h;
                let mut minus = inputs.to_vec();
                minus[i].data_mut()[j] -= h;
                let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
                let err = (a - numeric).abs() / numeric.abs().max(1.0);
                worst = worst.max(err);
            }
        }
        Ok(worst)
    }

    #[cfg(test)]
    pub(crate) fn max_rel_error(
        inputs: &[Tensor],
        h: f64,
        f: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
    ) -> f64 {
        max_relative_error(inputs, h, f).unwrap()
    }
}
