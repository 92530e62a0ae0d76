//! Synthetic irregular cohort with controllable informative missingness.
//!
//! Variables split into a frequently charted "flagged" group (indices
//! `0..n_flagged`) and a sparse remainder. Every patient has a per-variable
//! offset plus measurement noise. Positive patients get an onset time drawn
//! uniformly from the middle half of the window; after it
//!
//! - the first `n_drift` non-flagged variables drift by up to `drift`
//!   standard deviations (linear ramp over a quarter window), and
//! - flagged variables are charted more often: the per-step observation
//!   probability `p` becomes `p + strength * boost * (1 - p)`.
//!
//! Each sample draws from its own ChaCha stream keyed by its index, so
//! generation is order-independent and runs sample-parallel.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::{EventRecord, EventWindow, GridSpec, VariableDictionary};
use crate::config::KvConfig;
use crate::error::{Error, Result};

const ONSET_LO: f64 = 0.25;
const ONSET_HI: f64 = 0.75;
const RAMP_FRAC: f64 = 0.25;

#[derive(Clone, Debug, PartialEq)]
pub struct CohortSpec {
    pub n_patients: usize,
    pub n_vars: usize,
    pub n_flagged: usize,
    pub t_max: f64,
    pub grid_step: f64,
    pub prevalence: f64,
    /// Per-step observation probability of flagged variables.
    pub rate_flagged: f64,
    /// Per-step observation probability of the other variables.
    pub rate_other: f64,
    /// Informative-missingness strength in `[0, 1]`.
    pub strength: f64,
    pub boost: f64,
    pub drift: f64,
    pub n_drift: usize,
    pub patient_sd: f64,
    pub noise: f64,
    /// Chance that an observed cell carries a second, later event.
    pub repeat_prob: f64,
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            n_patients: 1000,
            n_vars: 17,
            n_flagged: 7,
            t_max: 2880.0,
            grid_step: 60.0,
            prevalence: 0.15,
            rate_flagged: 0.5,
            rate_other: 0.1,
            strength: 0.8,
            boost: 0.6,
            drift: 1.0,
            n_drift: 4,
            patient_sd: 1.0,
            noise: 0.5,
            repeat_prob: 0.1,
            seed: 0,
        }
    }
}

pub struct SyntheticCohort {
    pub records: Vec<EventRecord>,
    pub labels: Vec<(String, u8)>,
    pub dictionary: VariableDictionary,
    /// Group label per variable: `flagged` or `other`.
    pub groups: Vec<String>,
}

impl CohortSpec {
    pub const KEYS: &'static [&'static str] = &[
        "n_patients",
        "n_vars",
        "n_flagged",
        "t_max",
        "grid_step",
        "prevalence",
        "rate_flagged",
        "rate_other",
        "strength",
        "boost",
        "drift",
        "n_drift",
        "patient_sd",
        "noise",
        "repeat_prob",
        "seed",
    ];

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_patients == 0 {
            return bad("n_patients must be positive".into());
        }
        if self.n_flagged > self.n_vars || self.n_drift > self.n_vars - self.n_flagged {
            return bad(format!(
                "n_flagged {} and n_drift {} do not fit {} variables",
                self.n_flagged, self.n_drift, self.n_vars
            ));
        }
        if !(self.prevalence > 0.0 && self.prevalence < 1.0) {
            return bad(format!("prevalence {} must lie in (0, 1)", self.prevalence));
        }
        let rate_ok = |r: f64| r > 0.0 && r <= 1.0;
        if !rate_ok(self.rate_flagged) || !rate_ok(self.rate_other) {
            return bad(format!(
                "observation rates {} / {} must lie in (0, 1]",
                self.rate_flagged, self.rate_other
            ));
        }
        if !(0.0..=1.0).contains(&self.strength) || !(0.0..=1.0).contains(&self.boost) {
            return bad("strength and boost must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.repeat_prob) || self.noise < 0.0 || self.patient_sd < 0.0 {
            return bad("repeat_prob in [0,1], noise and patient_sd nonnegative".into());
        }
        GridSpec::new(self.grid_step, self.t_max, self.n_vars)?;
        Ok(())
    }

    pub fn grid(&self) -> GridSpec {
        GridSpec {
            grid_step: self.grid_step,
            t_max: self.t_max,
            n_vars: self.n_vars,
        }
    }

    pub fn dictionary(&self) -> VariableDictionary {
        let names = (0..self.n_vars)
            .map(|v| {
                if v < self.n_flagged {
                    format!("flagged_{v:02}")
                } else {
                    format!("other_{:02}", v - self.n_flagged)
                }
            })
            .collect();
        VariableDictionary::new(names).expect("generated names are unique")
    }

    pub fn groups(&self) -> Vec<String> {
        (0..self.n_vars)
            .map(|v| if v < self.n_flagged { "flagged" } else { "other" }.to_string())
            .collect()
    }

    /// Expected per-cell coverage of flagged variables in positive minus
    /// negative patients, averaged over the window.
    pub fn expected_flagged_coverage_margin(&self) -> f64 {
        let grid = self.grid();
        let times = grid.times();
        let p_after: f64 = times
            .iter()
            .map(|&t| ((t / self.t_max - ONSET_LO) / (ONSET_HI - ONSET_LO)).clamp(0.0, 1.0))
            .sum::<f64>()
            / times.len() as f64;
        self.strength * self.boost * (1.0 - self.rate_flagged) * p_after
    }

    fn mean_sd(v: usize) -> (f64, f64) {
        (10.0 * (v + 1) as f64, 1.0 + 0.25 * v as f64)
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        kv.reject_unknown(Self::KEYS)?;
        let d = Self::default();
        let spec = Self {
            n_patients: kv.get_or("n_patients", d.n_patients)?,
            n_vars: kv.get_or("n_vars", d.n_vars)?,
            n_flagged: kv.get_or("n_flagged", d.n_flagged)?,
            t_max: kv.get_or("t_max", d.t_max)?,
            grid_step: kv.get_or("grid_step", d.grid_step)?,
            prevalence: kv.get_or("prevalence", d.prevalence)?,
            rate_flagged: kv.get_or("rate_flagged", d.rate_flagged)?,
            rate_other: kv.get_or("rate_other", d.rate_other)?,
            strength: kv.get_or("strength", d.strength)?,
            boost: kv.get_or("boost", d.boost)?,
            drift: kv.get_or("drift", d.drift)?,
            n_drift: kv.get_or("n_drift", d.n_drift)?,
            patient_sd: kv.get_or("patient_sd", d.patient_sd)?,
            noise: kv.get_or("noise", d.noise)?,
            repeat_prob: kv.get_or("repeat_prob", d.repeat_prob)?,
            seed: kv.get_or("seed", d.seed)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("n_patients", self.n_patients);
        kv.set("n_vars", self.n_vars);
        kv.set("n_flagged", self.n_flagged);
        kv.set("t_max", self.t_max);
        kv.set("grid_step", self.grid_step);
        kv.set("prevalence", self.prevalence);
        kv.set("rate_flagged", self.rate_flagged);
        kv.set("rate_other", self.rate_other);
        kv.set("strength", self.strength);
        kv.set("boost", self.boost);
        kv.set("drift", self.drift);
        kv.set("n_drift", self.n_drift);
        kv.set("patient_sd", self.patient_sd);
        kv.set("noise", self.noise);
        kv.set("repeat_prob", self.repeat_prob);
        kv.set("seed", self.seed);
        kv
    }
}

struct Patient {
    id: String,
    label: u8,
    events: Vec<(f64, usize, f64)>,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn simulate_patient(spec: &CohortSpec, index: usize) -> Patient {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let label = u8::from(rng.gen_bool(spec.prevalence));
    let onset = rng.gen_range(ONSET_LO..ONSET_HI) * spec.t_max;
    let offsets: Vec<f64> = (0..spec.n_vars).map(|_| spec.patient_sd * gaussian(&mut rng)).collect();
    let grid = spec.grid();
    let drift_range = spec.n_flagged..spec.n_flagged + spec.n_drift;

    let mut events = Vec::new();
    for (l, &t0) in grid.times().iter().enumerate() {
        let after_onset = label == 1 && t0 >= onset;
        for v in 0..spec.n_vars {
            let base = if v < spec.n_flagged {
                spec.rate_flagged
            } else {
                spec.rate_other
            };
            let p = if after_onset && v < spec.n_flagged {
                base + spec.strength * spec.boost * (1.0 - base)
            } else {
                base
            };
            if !rng.gen_bool(p) {
                continue;
            }
            let n_events = if rng.gen_bool(spec.repeat_prob) { 2 } else { 1 };
            let mut times: Vec<f64> = (0..n_events)
                .map(|_| t0 + rng.gen::<f64>() * spec.grid_step)
                .collect();
            times.sort_by(f64::total_cmp);
            let (mean, sd) = CohortSpec::mean_sd(v);
            for t in times {
                let mut z = offsets[v] + spec.noise * gaussian(&mut rng);
                if label == 1 && drift_range.contains(&v) && t > onset {
                    z += spec.drift * ((t - onset) / (RAMP_FRAC * spec.t_max)).min(1.0);
                }
                events.push((t, v, mean + sd * z));
            }
        }
        debug_assert!(l < grid.n_steps());
    }
    events.sort_by(|a, b| a.0.total_cmp(&b.0));
    Patient {
        id: format!("p{index:06}"),
        label,
        events,
    }
}

/// Generates raw event records and labels.
pub fn synthesize_events(spec: &CohortSpec) -> Result<SyntheticCohort> {
    spec.validate()?;
    let patients: Vec<Patient> = (0..spec.n_patients)
        .into_par_iter()
        .map(|i| simulate_patient(spec, i))
        .collect();
    let mut records = Vec::new();
    let mut labels = Vec::with_capacity(patients.len());
    for p in patients {
        for &(time_min, variable, value) in &p.events {
            records.push(EventRecord {
                patient_id: p.id.clone(),
                time_min,
                variable,
                value,
            });
        }
        labels.push((p.id, p.label));
    }
    Ok(SyntheticCohort {
        records,
        labels,
        dictionary: spec.dictionary(),
        groups: spec.groups(),
    })
}

/// Generates grid windows directly. Patients without any event are dropped,
/// matching what ingestion of the same records would do.
pub fn synthesize_cohort(spec: &CohortSpec) -> Result<Vec<EventWindow>> {
    spec.validate()?;
    let grid = spec.grid();
    let windows: Result<Vec<Option<EventWindow>>> = (0..spec.n_patients)
        .into_par_iter()
        .map(|i| {
            let p = simulate_patient(spec, i);
            if p.events.is_empty() {
                return Ok(None);
            }
            EventWindow::from_events(p.id, &grid, &p.events, p.label).map(Some)
        })
        .collect();
    Ok(windows?.into_iter().flatten().collect())
}
