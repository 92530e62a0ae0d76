use std::fmt::Write as _;

use super::{EventWindow, VariableDictionary};
use crate::error::{Error, Result};
use crate::tokenizer::normalized_staleness;

/// Positive-minus-negative differences of per-cell coverage (mean mask) and
/// mean normalized staleness, laid out `L x V` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CohortStats {
    pub n_steps: usize,
    pub n_vars: usize,
    pub times: Vec<f64>,
    pub delta_coverage: Vec<f64>,
    pub delta_staleness: Vec<f64>,
}

fn group_means(samples: &[&EventWindow]) -> (Vec<f64>, Vec<f64>) {
    let w0 = samples[0];
    let n = w0.n_steps * w0.n_vars;
    let mut cov = vec![0.0; n];
    let mut stale = vec![0.0; n];
    for w in samples {
        for i in 0..n {
            cov[i] += f64::from(u8::from(w.mask[i]));
            stale[i] += normalized_staleness(w.gaps[i], w.t_max);
        }
    }
    let k = samples.len() as f64;
    cov.iter_mut().for_each(|c| *c /= k);
    stale.iter_mut().for_each(|s| *s /= k);
    (cov, stale)
}

/// Compares the two label groups cell by cell.
pub fn cohort_observation_stats(samples: &[EventWindow]) -> Result<CohortStats> {
    cohort_stats_between(
        &samples.iter().filter(|w| w.label == 1).collect::<Vec<_>>(),
        &samples.iter().filter(|w| w.label == 0).collect::<Vec<_>>(),
    )
}

/// `positive - negative` for two explicit groups.
pub fn cohort_stats_between(positive: &[&EventWindow], negative: &[&EventWindow]) -> Result<CohortStats> {
    if positive.is_empty() || negative.is_empty() {
        return Err(Error::InvalidInput(
            "cohort statistics need at least one sample of each label".into(),
        ));
    }
    let w0 = positive[0];
    if positive.iter().chain(negative).any(|w| w.n_steps != w0.n_steps || w.n_vars != w0.n_vars) {
        return Err(Error::Shape("samples disagree on grid shape".into()));
    }
    let (cp, sp) = group_means(positive);
    let (cn, sn) = group_means(negative);
    Ok(CohortStats {
        n_steps: w0.n_steps,
        n_vars: w0.n_vars,
        times: w0.times.clone(),
        delta_coverage: cp.iter().zip(&cn).map(|(a, b)| a - b).collect(),
        delta_staleness: sp.iter().zip(&sn).map(|(a, b)| a - b).collect(),
    })
}

impl CohortStats {
    /// Long-format CSV: `step,time_min,variable,delta_coverage,delta_staleness`.
    pub fn to_csv(&self, dict: &VariableDictionary) -> String {
        let mut s = String::from("step,time_min,variable,delta_coverage,delta_staleness\n");
        for l in 0..self.n_steps {
            for v in 0..self.n_vars {
                let i = l * self.n_vars + v;
                let _ = writeln!(
                    s,
                    "{l},{},{},{},{}",
                    self.times[l],
                    dict.name(v),
                    self.delta_coverage[i],
                    self.delta_staleness[i]
                );
            }
        }
        s
    }

    /// Mean difference over the last `steps` rows for each variable.
    pub fn late_delta_coverage(&self, steps: usize) -> Vec<f64> {
        let from = self.n_steps.saturating_sub(steps);
        (0..self.n_vars)
            .map(|v| {
                (from..self.n_steps)
                    .map(|l| self.delta_coverage[l * self.n_vars + v])
                    .sum::<f64>()
                    / (self.n_steps - from) as f64
            })
            .collect()
    }
}
