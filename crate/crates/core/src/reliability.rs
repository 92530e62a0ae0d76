//! Per-token reliability weights with a learnable decay rate per variable:
//! `lambda_c = softplus(w_c) + lambda_min` and
//! `rel_i = m_i + (1 - m_i) * exp(-lambda_{v_i} * gap_i)`, gap in minutes.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::autodiff::{softplus, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::event_store::{EventWindow, VariableDictionary};
use crate::tokenizer::TokenSequence;

/// Lower clamp on the exponent `-lambda * gap`.
pub const MIN_EXPONENT: f64 = -50.0;

#[derive(Clone, Copy, Debug)]
pub struct DecayParams {
    /// Raw logits, `V x 1`.
    pub logits: ParamId,
    pub lambda_min: f64,
}

impl DecayParams {
    pub fn new(store: &mut ParamStore, n_vars: usize, init_logit: f64, lambda_min: f64) -> Self {
        assert!(lambda_min > 0.0, "lambda_min must be positive");
        Self {
            logits: store.add("decay.logits", Tensor::filled(n_vars, 1, init_logit)),
            lambda_min,
        }
    }
}

/// Decay rates as plain numbers.
pub fn decay_rates(store: &ParamStore, params: &DecayParams) -> Vec<f64> {
    store
        .get(params.logits)
        .data()
        .iter()
        .map(|&w| softplus(w) + params.lambda_min)
        .collect()
}

/// Decay rates on the graph, `V x 1`.
pub fn decay_rates_var(g: &mut Graph, store: &ParamStore, params: &DecayParams) -> Var {
    let w = g.param(store, params.logits);
    let sp = g.softplus(w);
    g.add_scalar(sp, params.lambda_min)
}

/// Reliability weights on the graph, `N x 1`.
pub fn reliability(g: &mut Graph, store: &ParamStore, params: &DecayParams, seq: &TokenSequence) -> Var {
    let lambda = decay_rates_var(g, store, params);
    let per_token = g.gather_rows(lambda, &seq.var_index);
    let neg_gap = Tensor::column(seq.gaps.iter().map(|&d| -d).collect());
    let arg = g.mul_const(per_token, &neg_gap);
    let arg = g.clip(arg, MIN_EXPONENT, f64::INFINITY);
    let decay = g.exp(arg);
    let missing = Tensor::column(seq.mask.iter().map(|&m| 1.0 - m).collect());
    let decayed = g.mul_const(decay, &missing);
    g.add_const(decayed, &Tensor::column(seq.mask.clone()))
}

/// Constant weights of 1, used when the gate is ablated.
pub fn unit_reliability(g: &mut Graph, seq: &TokenSequence) -> Var {
    g.input(Tensor::filled(seq.len(), 1, 1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecayRow {
    pub name: String,
    pub group: String,
    pub decay: f64,
    pub coverage: f64,
    /// Mean gap over all cells, in hours.
    pub mean_gap_h: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecayReport {
    pub variables: Vec<DecayRow>,
    /// Group-wise means, ordered by group name.
    pub groups: Vec<DecayRow>,
}

/// Per-variable decay rates with coverage and mean gap from `windows`, plus
/// group means. `groups` gives one label per variable.
pub fn decay_report(
    store: &ParamStore,
    params: &DecayParams,
    dict: &VariableDictionary,
    groups: &[String],
    windows: &[EventWindow],
) -> Result<DecayReport> {
    let rates = decay_rates(store, params);
    if groups.len() != rates.len() || dict.len() != rates.len() {
        return Err(Error::InvalidInput(format!(
            "{} group labels and {} names for {} variables",
            groups.len(),
            dict.len(),
            rates.len()
        )));
    }
    if let Some(bad) = groups.iter().find(|g| g.trim().is_empty() || g.contains(',')) {
        return Err(Error::InvalidInput(format!("bad group label {bad:?}")));
    }
    let v_n = rates.len();
    let mut obs = vec![0.0; v_n];
    let mut gap = vec![0.0; v_n];
    let mut cells = 0.0;
    for w in windows {
        if w.n_vars != v_n {
            return Err(Error::Shape("window variable count differs from decay table".into()));
        }
        for (i, (&m, &d)) in w.mask.iter().zip(&w.gaps).enumerate() {
            obs[i % v_n] += f64::from(u8::from(m));
            gap[i % v_n] += d;
        }
        cells += w.n_steps as f64;
    }
    let cells = cells.max(1.0);
    let variables: Vec<DecayRow> = (0..v_n)
        .map(|v| DecayRow {
            name: dict.name(v).to_string(),
            group: groups[v].clone(),
            decay: rates[v],
            coverage: obs[v] / cells,
            mean_gap_h: gap[v] / cells / 60.0,
        })
        .collect();

    let mut by_group: BTreeMap<&str, Vec<&DecayRow>> = BTreeMap::new();
    for r in &variables {
        by_group.entry(r.group.as_str()).or_default().push(r);
    }
    let groups = by_group
        .into_iter()
        .map(|(name, rows)| {
            let k = rows.len() as f64;
            DecayRow {
                name: name.to_string(),
                group: name.to_string(),
                decay: rows.iter().map(|r| r.decay).sum::<f64>() / k,
                coverage: rows.iter().map(|r| r.coverage).sum::<f64>() / k,
                mean_gap_h: rows.iter().map(|r| r.mean_gap_h).sum::<f64>() / k,
            }
        })
        .collect();
    Ok(DecayReport { variables, groups })
}

impl DecayReport {
    /// `kind,name,group,decay,coverage,mean_gap_h` with `kind` in
    /// `{variable, group}`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("kind,name,group,decay,coverage,mean_gap_h\n");
        for (kind, rows) in [("variable", &self.variables), ("group", &self.groups)] {
            for r in rows {
                let _ = writeln!(
                    s,
                    "{kind},{},{},{},{},{}",
                    r.name, r.group, r.decay, r.coverage, r.mean_gap_h
                );
            }
        }
        s
    }
}
