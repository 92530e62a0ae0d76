//! Flattening of a grid window into one token per (step, variable) cell,
//! normalization of time and staleness, and the event embedding
//! `z = CVE_t(tau) + CVE_x(x) + Emb(v) + CVE_gap(delta)`.

use std::fmt::Write as _;

use rand::Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::event_store::EventWindow;

/// Flattened per-cell token stream. Token `i` is cell
/// `(l, v) = (i / V, i % V)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub n_steps: usize,
    pub n_vars: usize,
    pub t_max: f64,
    pub values: Vec<f64>,
    pub mask: Vec<f64>,
    /// Raw gaps in minutes.
    pub gaps: Vec<f64>,
    pub times: Vec<f64>,
    pub var_index: Vec<usize>,
    /// Time mapped to `[-1, 1]`.
    pub tau: Vec<f64>,
    /// Log-scaled staleness in `[0, 1]`.
    pub staleness: Vec<f64>,
    /// `2 * staleness - 1`.
    pub delta: Vec<f64>,
    /// Distinct grid times (one per step).
    pub step_times: Vec<f64>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn step_of(&self, i: usize) -> usize {
        i / self.n_vars
    }
}

#[inline]
pub fn normalized_time(t: f64, t_max: f64) -> f64 {
    (2.0 * t / t_max - 1.0).clamp(-1.0, 1.0)
}

#[inline]
pub fn normalized_staleness(gap: f64, t_max: f64) -> f64 {
    (gap.ln_1p() / t_max.ln_1p()).clamp(0.0, 1.0)
}

pub fn normalize_time(times: &[f64], t_max: f64) -> Result<Vec<f64>> {
    if !(t_max > 0.0) {
        return Err(Error::InvalidInput(format!("window length {t_max} must be positive")));
    }
    Ok(times.iter().map(|&t| normalized_time(t, t_max)).collect())
}

/// Returns `(staleness, delta)`; negative gaps mean corrupt input.
pub fn normalize_gap(gaps: &[f64], t_max: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(t_max > 0.0) {
        return Err(Error::InvalidInput(format!("window length {t_max} must be positive")));
    }
    if let Some(g) = gaps.iter().find(|&&g| !(g >= 0.0)) {
        return Err(Error::InvalidInput(format!("negative or NaN gap {g}")));
    }
    let staleness: Vec<f64> = gaps.iter().map(|&g| normalized_staleness(g, t_max)).collect();
    let delta = staleness.iter().map(|&s| 2.0 * s - 1.0).collect();
    Ok((staleness, delta))
}

/// Row-major flattening plus the normalized time and gap fields.
pub fn flatten(window: &EventWindow) -> Result<TokenSequence> {
    window.validate()?;
    let (l_n, v_n) = (window.n_steps, window.n_vars);
    let n = l_n * v_n;
    let times: Vec<f64> = (0..n).map(|i| window.times[i / v_n]).collect();
    let var_index = (0..n).map(|i| i % v_n).collect();
    let tau = normalize_time(&times, window.t_max)?;
    let (staleness, delta) = normalize_gap(&window.gaps, window.t_max)?;
    Ok(TokenSequence {
        n_steps: l_n,
        n_vars: v_n,
        t_max: window.t_max,
        values: window.values.clone(),
        mask: window.mask.iter().map(|&m| f64::from(u8::from(m))).collect(),
        gaps: window.gaps.clone(),
        times,
        var_index,
        tau,
        staleness,
        delta,
        step_times: window.times.clone(),
    })
}

/// Continuous-value embedding: scalar -> `tanh(x * w + b)` -> `D x D` map.
#[derive(Clone, Copy, Debug)]
pub struct Cve {
    pub lift_w: ParamId,
    pub lift_b: ParamId,
    pub proj: ParamId,
}

impl Cve {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        Self {
            lift_w: store.glorot(format!("{name}.lift_w"), 1, dim, rng),
            lift_b: store.zeros(format!("{name}.lift_b"), 1, dim),
            proj: store.glorot(format!("{name}.proj"), dim, dim, rng),
        }
    }

    pub fn dim(&self, store: &ParamStore) -> usize {
        store.get(self.proj).cols()
    }

    /// Embeds a column of scalars `[n, 1]` into `[n, D]`.
    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.lift_w);
        let b = g.param(store, self.lift_b);
        let p = g.param(store, self.proj);
        let h = g.matmul(x, w);
        let h = g.add_row(h, b);
        let h = g.tanh(h);
        g.matmul(h, p)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EmbeddingParams {
    pub time: Cve,
    pub value: Cve,
    pub gap: Cve,
    /// `V x D` variable table.
    pub variable: ParamId,
}

impl EmbeddingParams {
    pub fn new<R: Rng>(store: &mut ParamStore, n_vars: usize, dim: usize, rng: &mut R) -> Self {
        Self {
            time: Cve::new(store, "embed.time", dim, rng),
            value: Cve::new(store, "embed.value", dim, rng),
            gap: Cve::new(store, "embed.gap", dim, rng),
            variable: store.glorot("embed.variable", n_vars, dim, rng),
        }
    }
}

/// Builds `Z [N, D]`. With `use_gap = false` the staleness term is dropped.
pub fn embed(
    g: &mut Graph,
    store: &ParamStore,
    params: &EmbeddingParams,
    seq: &TokenSequence,
    use_gap: bool,
) -> Result<Var> {
    let table = store.get(params.variable);
    if table.rows() != seq.n_vars {
        return Err(Error::Shape(format!(
            "variable table has {} rows, sequence has {} variables",
            table.rows(),
            seq.n_vars
        )));
    }
    let dim = table.cols();
    for cve in [params.time, params.value, params.gap] {
        if cve.dim(store) != dim {
            return Err(Error::Shape(format!(
                "embedding width {} vs variable table width {dim}",
                cve.dim(store)
            )));
        }
    }

    // Time embedding depends only on the step, so embed the L grid times once.
    let step_tau: Vec<f64> = seq
        .step_times
        .iter()
        .map(|&t| normalized_time(t, seq.t_max))
        .collect();
    let step_tau = g.input(Tensor::column(step_tau));
    let e_time_steps = params.time.apply(g, store, step_tau);
    let step_idx: Vec<usize> = (0..seq.len()).map(|i| seq.step_of(i)).collect();
    let e_time = g.gather_rows(e_time_steps, &step_idx);

    let x = g.input(Tensor::column(seq.values.clone()));
    let e_value = params.value.apply(g, store, x);

    let table = g.param(store, params.variable);
    let e_var = g.gather_rows(table, &seq.var_index);

    let mut z = g.add(e_time, e_value);
    z = g.add(z, e_var);
    if use_gap {
        let d = g.input(Tensor::column(seq.delta.clone()));
        let e_gap = params.gap.apply(g, store, d);
        z = g.add(z, e_gap);
    }
    Ok(z)
}

/// Per-token CSV dump: cell fields followed by the embedding row.
pub fn tokens_csv(seq: &TokenSequence, z: &Tensor) -> String {
    let mut s = String::from("index,step,variable,time_min,tau,value,mask,gap_min,staleness,delta");
    for j in 0..z.cols() {
        let _ = write!(s, ",z{j}");
    }
    s.push('\n');
    for i in 0..seq.len() {
        let _ = write!(
            s,
            "{i},{},{},{},{},{},{},{},{},{}",
            seq.step_of(i),
            seq.var_index[i],
            seq.times[i],
            seq.tau[i],
            seq.values[i],
            seq.mask[i],
            seq.gaps[i],
            seq.staleness[i],
            seq.delta[i]
        );
        for &v in z.row_slice(i) {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}
