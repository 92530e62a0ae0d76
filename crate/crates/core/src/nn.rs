//! Small layers shared by the aggregator, router and backbone.

use rand::{Rng, RngCore};

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

/// `x W + b` with `W: in x out`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut R) -> Self {
        let w = store.glorot(&format!("{name}.w"), d_in, d_out, rng);
        let b = bias.then(|| store.zeros(&format!("{name}.b"), 1, d_out));
        Self { w, b }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Row-wise layer normalization with learnable gain and bias.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(&format!("{name}.gain"), Tensor::filled(1, dim, 1.0)),
            bias: store.zeros(&format!("{name}.bias"), 1, dim),
        }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let n = g.layer_norm(x, LN_EPS);
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        let y = g.mul_row(n, gain);
        g.add_row(y, bias)
    }
}

/// Short-lived reborrow of an optional RNG, for passing it down repeatedly.
pub fn reborrow<'a>(rng: &'a mut Option<&mut dyn RngCore>) -> Option<&'a mut dyn RngCore> {
    match rng {
        Some(r) => Some(&mut **r),
        None => None,
    }
}

/// Inverted dropout. Identity when `rng` is `None` or `p == 0`.
pub fn dropout(g: &mut Graph, x: Var, p: f64, rng: Option<&mut dyn RngCore>) -> Var {
    let Some(rng) = rng else { return x };
    if p <= 0.0 {
        return x;
    }
    let (r, c) = g.shape(x);
    let keep = 1.0 / (1.0 - p);
    let mask = (0..r * c).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
    g.mul_const(x, &Tensor::new(r, c, mask))
}
