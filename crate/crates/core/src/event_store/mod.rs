//! Sample data model: raw event records, the regular-grid [`EventWindow`],
//! event-log ingestion, the synthetic cohort generator and cohort-level
//! observation statistics.

mod io;
mod stats;
mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_events, read_dictionary, read_groups, write_events, write_labels, LoadOptions};
pub use stats::{cohort_observation_stats, CohortStats};
pub use synth::{synthesize_cohort, synthesize_events, CohortSpec, SyntheticCohort};

/// One raw measurement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub patient_id: String,
    /// Minutes since the window start.
    pub time_min: f64,
    pub variable: usize,
    pub value: f64,
}

/// Regular time grid over `[0, t_max)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub grid_step: f64,
    pub t_max: f64,
    pub n_vars: usize,
}

impl GridSpec {
    pub fn new(grid_step: f64, t_max: f64, n_vars: usize) -> Result<Self> {
        if !(grid_step > 0.0) || !(t_max > 0.0) {
            return Err(Error::InvalidInput(format!(
                "grid step {grid_step} and window length {t_max} must be positive"
            )));
        }
        let steps = t_max / grid_step;
        if (steps - steps.round()).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "grid step {grid_step} does not divide window length {t_max}"
            )));
        }
        if n_vars == 0 {
            return Err(Error::InvalidInput("need at least one variable".into()));
        }
        Ok(Self {
            grid_step,
            t_max,
            n_vars,
        })
    }

    pub fn n_steps(&self) -> usize {
        (self.t_max / self.grid_step).round() as usize
    }

    /// Grid row holding an event at `time`. `t_max` itself lands in the last row.
    pub fn row_of(&self, time: f64) -> usize {
        ((time / self.grid_step).floor() as usize).min(self.n_steps() - 1)
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.n_steps()).map(|l| l as f64 * self.grid_step).collect()
    }
}

/// One sample on a regular grid: `L x V` values, mask and gaps, row-major
/// over `(step, variable)`.
///
/// `values` holds the raw forward-filled measurement; cells before a
/// variable's first observation hold 0. Gaps are minutes since the last
/// observed grid row of that variable, or since the window start when the
/// variable has not been observed yet.
#[derive(Clone, Debug, PartialEq)]
pub struct EventWindow {
    pub patient_id: String,
    pub n_steps: usize,
    pub n_vars: usize,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
    pub times: Vec<f64>,
    pub gaps: Vec<f64>,
    pub label: u8,
    pub t_max: f64,
}

impl EventWindow {
    /// Builds a window from `(time, variable, value)` triples. Within one
    /// grid cell the event with the latest time wins; equal times keep the
    /// one that comes last in `events`.
    pub fn from_events(
        patient_id: impl Into<String>,
        grid: &GridSpec,
        events: &[(f64, usize, f64)],
        label: u8,
    ) -> Result<Self> {
        let (l_n, v_n) = (grid.n_steps(), grid.n_vars);
        let mut latest: Vec<Option<(f64, f64)>> = vec![None; l_n * v_n];
        for &(time, var, value) in events {
            if !(0.0..=grid.t_max).contains(&time) {
                return Err(Error::InvalidInput(format!(
                    "event time {time} outside [0, {}]",
                    grid.t_max
                )));
            }
            if var >= v_n {
                return Err(Error::InvalidInput(format!("variable {var} out of range {v_n}")));
            }
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("value at time {time}, variable {var}")));
            }
            let cell = &mut latest[grid.row_of(time) * v_n + var];
            match cell {
                Some((t, _)) if *t > time => {}
                _ => *cell = Some((time, value)),
            }
        }
        let observed: Vec<Option<f64>> = latest.into_iter().map(|c| c.map(|(_, v)| v)).collect();
        Ok(Self::from_grid(patient_id, grid, &observed, label))
    }

    /// Builds a window from per-cell observations (`None` = missing).
    pub fn from_grid(
        patient_id: impl Into<String>,
        grid: &GridSpec,
        observed: &[Option<f64>],
        label: u8,
    ) -> Self {
        let (l_n, v_n) = (grid.n_steps(), grid.n_vars);
        assert_eq!(observed.len(), l_n * v_n);
        let times = grid.times();
        let mut values = vec![0.0; l_n * v_n];
        let mut mask = vec![false; l_n * v_n];
        let mut gaps = vec![0.0; l_n * v_n];
        for v in 0..v_n {
            let mut last: Option<(usize, f64)> = None;
            for l in 0..l_n {
                let i = l * v_n + v;
                if let Some(x) = observed[i] {
                    mask[i] = true;
                    values[i] = x;
                    last = Some((l, x));
                } else {
                    let (since, fill) = match last {
                        Some((row, x)) => (times[row], x),
                        None => (times[0], 0.0),
                    };
                    values[i] = fill;
                    gaps[i] = times[l] - since;
                }
            }
        }
        Self {
            patient_id: patient_id.into(),
            n_steps: l_n,
            n_vars: v_n,
            values,
            mask,
            times,
            gaps,
            label,
            t_max: grid.t_max,
        }
    }

    #[inline]
    pub fn idx(&self, l: usize, v: usize) -> usize {
        l * self.n_vars + v
    }

    pub fn n_observed(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Whether `(l, v)` has an observation at or before step `l`.
    pub fn has_history(&self, l: usize, v: usize) -> bool {
        (0..=l).any(|r| self.mask[self.idx(r, v)])
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_steps * self.n_vars;
        if self.n_steps == 0 || self.n_vars == 0 {
            return Err(Error::InvalidInput("empty grid".into()));
        }
        if self.values.len() != n || self.mask.len() != n || self.gaps.len() != n {
            return Err(Error::Shape(format!(
                "window {}: arrays do not match {}x{}",
                self.patient_id, self.n_steps, self.n_vars
            )));
        }
        if self.times.len() != self.n_steps {
            return Err(Error::Shape(format!("window {}: times length", self.patient_id)));
        }
        if self.times[0] < 0.0
            || self.times[self.n_steps - 1] > self.t_max
            || self.times.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(Error::InvalidInput(format!(
                "window {}: times must increase strictly within [0, t_max]",
                self.patient_id
            )));
        }
        if self.label > 1 {
            return Err(Error::InvalidInput(format!("window {}: label {}", self.patient_id, self.label)));
        }
        if !self.values.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite(format!("window {} values", self.patient_id)));
        }
        for (i, (&g, &m)) in self.gaps.iter().zip(&self.mask).enumerate() {
            if !(g >= 0.0) || (m && g != 0.0) {
                return Err(Error::InvalidInput(format!(
                    "window {}: bad gap {g} at cell {i}",
                    self.patient_id
                )));
            }
        }
        Ok(())
    }
}

/// Index-to-name mapping for variables; line number in the dictionary file
/// is the index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VariableDictionary {
    names: Vec<String>,
}

impl VariableDictionary {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::InvalidInput("empty variable dictionary".into()));
        }
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() || names[..i].contains(n) {
                return Err(Error::InvalidInput(format!("bad or duplicate variable name {n:?}")));
            }
        }
        Ok(Self { names })
    }

    /// Names `v0 .. v{n-1}`.
    pub fn indexed(n: usize) -> Self {
        Self {
            names: (0..n).map(|i| format!("v{i}")).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    /// Resolves a name, falling back to a bare in-range index.
    pub fn resolve(&self, token: &str) -> Option<usize> {
        self.names
            .iter()
            .position(|n| n == token)
            .or_else(|| token.parse::<usize>().ok().filter(|&i| i < self.names.len()))
    }
}

/// Variable-wise z-scoring fitted on observed training values.
///
/// Forward-filled cells are scored like the observation they copy; cells
/// with no observation history become 0.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn fit(windows: &[EventWindow]) -> Result<Self> {
        let v_n = windows
            .first()
            .ok_or_else(|| Error::InvalidInput("cannot fit normalizer on no samples".into()))?
            .n_vars;
        let mut sum = vec![0.0; v_n];
        let mut sum_sq = vec![0.0; v_n];
        let mut count = vec![0usize; v_n];
        for w in windows {
            if w.n_vars != v_n {
                return Err(Error::Shape("windows disagree on variable count".into()));
            }
            for (i, (&x, &m)) in w.values.iter().zip(&w.mask).enumerate() {
                if m {
                    let v = i % v_n;
                    sum[v] += x;
                    sum_sq[v] += x * x;
                    count[v] += 1;
                }
            }
        }
        let mut mean = vec![0.0; v_n];
        let mut std = vec![1.0; v_n];
        for v in 0..v_n {
            if count[v] > 0 {
                let n = count[v] as f64;
                mean[v] = sum[v] / n;
                let var = (sum_sq[v] / n - mean[v] * mean[v]).max(0.0);
                std[v] = if var > 1e-12 { var.sqrt() } else { 1.0 };
            }
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, w: &EventWindow) -> EventWindow {
        let mut out = w.clone();
        for v in 0..w.n_vars {
            let mut seen = false;
            for l in 0..w.n_steps {
                let i = w.idx(l, v);
                seen |= w.mask[i];
                out.values[i] = if seen {
                    (w.values[i] - self.mean[v]) / self.std[v]
                } else {
                    0.0
                };
            }
        }
        out
    }
}
