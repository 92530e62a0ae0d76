//! Selective state-space backbone and the last-token prediction head.
//!
//! Each block: pre-norm, input and gate projections to `E = expand * D`
//! channels, depthwise causal convolution with SiLU, input-dependent step
//! size `dt = softplus(low-rank(x) + bias)` and readouts `B`, `C`, a diagonal
//! scan with `A = -exp(a_log)`, SiLU gating, output projection, dropout and a
//! residual connection. The stack ends with a layer norm.

use rand::{Rng, RngCore};

use crate::autodiff::{sigmoid, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{dropout, reborrow, LayerNorm, Linear};

/// Bound applied to the logit before the sigmoid.
pub const LOGIT_CLAMP: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsmConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub d_state: usize,
    pub d_conv: usize,
    pub expand: usize,
}

impl SsmConfig {
    pub fn inner(&self) -> usize {
        self.expand * self.d_model
    }

    pub fn dt_rank(&self) -> usize {
        self.d_model.div_ceil(16)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("d_state", self.d_state),
            ("d_conv", self.d_conv),
            ("expand", self.expand),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SsmBlock {
    pub norm: LayerNorm,
    pub in_x: Linear,
    pub in_z: Linear,
    /// `E x d_conv`.
    pub conv_w: ParamId,
    /// `1 x E`.
    pub conv_b: ParamId,
    pub dt_down: Linear,
    pub dt_up: Linear,
    pub b_proj: Linear,
    pub c_proj: Linear,
    /// `E x d_state`.
    pub a_log: ParamId,
    /// `1 x E` skip.
    pub d_skip: ParamId,
    pub out: Linear,
}

#[derive(Clone, Debug)]
pub struct SsmParams {
    pub config: SsmConfig,
    pub blocks: Vec<SsmBlock>,
    pub final_norm: LayerNorm,
}

/// Inverse of softplus for positive `y`.
fn inv_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl SsmParams {
    pub fn new<R: Rng>(store: &mut ParamStore, config: SsmConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (d, e, s, k, r) = (config.d_model, config.inner(), config.d_state, config.d_conv, config.dt_rank());
        let mut blocks = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = format!("ssm{l}");
            let conv_bound = 1.0 / (k as f64).sqrt();
            let conv = (0..e * k).map(|_| rng.gen_range(-conv_bound..conv_bound)).collect();
            let dt_bias: Vec<f64> = (0..e)
                .map(|_| {
                    let u: f64 = rng.gen();
                    inv_softplus((1e-3f64.ln() + u * (1e-1f64.ln() - 1e-3f64.ln())).exp())
                })
                .collect();
            let a_log = (0..e).flat_map(|_| (1..=s).map(|j| (j as f64).ln())).collect();
            let dt_up = Linear::new(store, &format!("{p}.dt_up"), r, e, true, rng);
            store.get_mut(dt_up.b.expect("bias")).data_mut().copy_from_slice(&dt_bias);
            blocks.push(SsmBlock {
                norm: LayerNorm::new(store, &format!("{p}.norm"), d),
                in_x: Linear::new(store, &format!("{p}.in_x"), d, e, false, rng),
                in_z: Linear::new(store, &format!("{p}.in_z"), d, e, false, rng),
                conv_w: store.add(format!("{p}.conv_w"), Tensor::new(e, k, conv)),
                conv_b: store.zeros(format!("{p}.conv_b"), 1, e),
                dt_down: Linear::new(store, &format!("{p}.dt_down"), e, r, false, rng),
                dt_up,
                b_proj: Linear::new(store, &format!("{p}.b_proj"), e, s, false, rng),
                c_proj: Linear::new(store, &format!("{p}.c_proj"), e, s, false, rng),
                a_log: store.add(format!("{p}.a_log"), Tensor::new(e, s, a_log)),
                d_skip: store.add(format!("{p}.d_skip"), Tensor::filled(1, e, 1.0)),
                out: Linear::new(store, &format!("{p}.out"), e, d, false, rng),
            });
        }
        Ok(Self { config, blocks, final_norm: LayerNorm::new(store, "ssm.final_norm", d) })
    }
}

fn check_finite(g: &Graph, v: Var, what: &str) -> Result<()> {
    let t = g.value(v);
    if t.is_finite() {
        return Ok(());
    }
    let bad = t.data().iter().filter(|x| !x.is_finite()).count();
    Err(Error::NonFinite(format!("{what}: {bad} of {} activations are not finite", t.len())))
}

/// One block applied to `x [L, D]`.
pub fn block_forward(
    g: &mut Graph,
    store: &ParamStore,
    blk: &SsmBlock,
    x: Var,
    p_drop: f64,
    rng: Option<&mut dyn RngCore>,
) -> Var {
    let h = blk.norm.apply(g, store, x);
    let xb = blk.in_x.apply(g, store, h);
    let zb = blk.in_z.apply(g, store, h);
    let cw = g.param(store, blk.conv_w);
    let cb = g.param(store, blk.conv_b);
    let xc = g.causal_conv(xb, cw, cb);
    let xc = g.silu(xc);
    let dt = blk.dt_down.apply(g, store, xc);
    let dt = blk.dt_up.apply(g, store, dt);
    let dt = g.softplus(dt);
    let bm = blk.b_proj.apply(g, store, xc);
    let cm = blk.c_proj.apply(g, store, xc);
    let a_log = g.param(store, blk.a_log);
    let a = g.exp(a_log);
    let a = g.scale(a, -1.0);
    let dsk = g.param(store, blk.d_skip);
    let y = g.selective_scan(xc, dt, a, bm, cm, dsk);
    let gate = g.silu(zb);
    let y = g.mul(y, gate);
    let y = blk.out.apply(g, store, y);
    let y = dropout(g, y, p_drop, rng);
    g.add(x, y)
}

/// Runs the block stack and the final norm over `x [L, D]`.
pub fn encode(
    g: &mut Graph,
    store: &ParamStore,
    params: &SsmParams,
    x: Var,
    p_drop: f64,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<Var> {
    let (l, d) = g.shape(x);
    if l == 0 {
        return Err(Error::InvalidInput("cannot encode an empty sequence".into()));
    }
    if d != params.config.d_model {
        return Err(Error::Shape(format!("token width {d} vs d_model {}", params.config.d_model)));
    }
    check_finite(g, x, "backbone input")?;
    let mut h = x;
    for (i, blk) in params.blocks.iter().enumerate() {
        h = block_forward(g, store, blk, h, p_drop, reborrow(&mut rng));
        check_finite(g, h, &format!("block {i} output"))?;
    }
    Ok(params.final_norm.apply(g, store, h))
}

#[derive(Clone, Copy, Debug)]
pub struct Head {
    pub linear: Linear,
}

impl Head {
    pub fn new<R: Rng>(store: &mut ParamStore, dim: usize, rng: &mut R) -> Self {
        Self { linear: Linear::new(store, "head", dim, 1, true, rng) }
    }
}

/// Logit from the last row of `h`, clamped to `[-30, 30]`, and its probability.
pub fn pool_and_predict(g: &mut Graph, store: &ParamStore, head: &Head, h: Var) -> Result<(Var, f64)> {
    let l = g.shape(h).0;
    if l == 0 {
        return Err(Error::InvalidInput("empty backbone output".into()));
    }
    let last = g.gather_rows(h, &[l - 1]);
    let logit = head.linear.apply(g, store, last);
    let logit = g.clip(logit, -LOGIT_CLAMP, LOGIT_CLAMP);
    check_finite(g, logit, "logit")?;
    let p = sigmoid(g.value(logit).item());
    Ok((logit, p))
}
