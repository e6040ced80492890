//! Layer helpers shared by the pipeline stages.

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{self, ParamStore};
use crate::tensor::{Real, Tensor};

/// `x[R × in] · W[in × out] + b`.
pub fn linear<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, x: Var, w: &str, b: Option<&str>) -> Result<Var> {
    let wv = g.param(store, w)?;
    let y = g.matmul(x, wv)?;
    match b {
        Some(b) => {
            let bv = g.param(store, b)?;
            g.add_row(y, bv)
        }
        None => Ok(y),
    }
}

/// `elu(x) + 1`, strictly positive.
pub fn kernel_map<T: Real>(g: &mut Graph<T>, x: Var) -> Var {
    let e = g.elu(x);
    g.shift(e, T::one())
}

/// Two-layer perceptron `in → hidden → out` with an `elu + 1` activation,
/// parameters `{prefix}.{w1,b1,w2,b2}`.
pub fn mlp<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, x: Var, prefix: &str) -> Result<Var> {
    let h = linear(g, store, x, &format!("{prefix}.w1"), Some(&format!("{prefix}.b1")))?;
    let h = kernel_map(g, h);
    linear(g, store, h, &format!("{prefix}.w2"), Some(&format!("{prefix}.b2")))
}

pub fn init_linear<R: Rng>(store: &mut ParamStore, rng: &mut R, w: &str, b: Option<&str>, fan_in: usize, fan_out: usize) {
    store.insert(w, params::uniform_fan_in(rng, &[fan_in, fan_out], fan_in));
    if let Some(b) = b {
        store.insert(b, Tensor::zeros(&[fan_out]));
    }
}

pub fn init_mlp<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, inp: usize, hidden: usize, out: usize) {
    init_linear(store, rng, &format!("{prefix}.w1"), Some(&format!("{prefix}.b1")), inp, hidden);
    init_linear(store, rng, &format!("{prefix}.w2"), Some(&format!("{prefix}.b2")), hidden, out);
}

pub fn init_norm(store: &mut ParamStore, prefix: &str, c: usize) {
    store.insert(format!("{prefix}.gain"), Tensor::ones(&[c]));
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[c]));
}

pub fn layer_norm<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, x: Var, prefix: &str) -> Result<Var> {
    let gain = g.param(store, &format!("{prefix}.gain"))?;
    let bias = g.param(store, &format!("{prefix}.bias"))?;
    g.layer_norm(x, gain, bias, T::of(1e-5))
}
