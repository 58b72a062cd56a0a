//! Parameterized layers: parameters live in a [`ParamStore`], forward passes
//! are recorded on a [`Graph`].

use rand::Rng;

use super::graph::{Bound, Graph, Var};
use super::params::{trunc_normal, ParamId, ParamStore};
use super::tensor::Tensor;
use super::{LayerNormParams, LayerParams, MlpParams, LN_EPS};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl LinearLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), trunc_normal(&[d_in, d_out], std, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[d_out])));
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p.var(self.weight), self.bias.map(|b| p.var(b)))
    }

    /// Plain-tensor copy of the parameters.
    pub fn params(&self, store: &ParamStore) -> LayerParams {
        LayerParams {
            weight: store.get(self.weight).clone(),
            bias: self
                .bias
                .map(|b| store.get(b).clone())
                .unwrap_or_else(|| Tensor::zeros(&[self.d_out])),
        }
    }
}

#[derive(Clone, Debug)]
pub struct NormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl NormLayer {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[d], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p.var(self.gamma), p.var(self.beta), LN_EPS)
    }

    pub fn params(&self, store: &ParamStore) -> LayerNormParams {
        LayerNormParams {
            gamma: store.get(self.gamma).clone(),
            beta: store.get(self.beta).clone(),
        }
    }
}

/// Two-layer MLP with GELU, hidden width `4·d`.
#[derive(Clone, Debug)]
pub struct MlpLayer {
    pub fc1: LinearLayer,
    pub fc2: LinearLayer,
}

impl MlpLayer {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, std: f64, rng: &mut impl Rng) -> Self {
        Self {
            fc1: LinearLayer::new(store, &format!("{name}.fc1"), d, 4 * d, true, std, rng),
            fc2: LinearLayer::new(store, &format!("{name}.fc2"), 4 * d, d, true, std, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, p, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, p, h)
    }

    pub fn params(&self, store: &ParamStore) -> MlpParams {
        MlpParams {
            fc1: self.fc1.params(store),
            fc2: self.fc2.params(store),
        }
    }
}
