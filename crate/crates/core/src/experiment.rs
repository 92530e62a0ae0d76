//! Seed-averaged experiments: one fixed patient-level split, with the seed
//! varying initialization, dropout and shuffling only.

use std::fmt;

use crate::aggregator::ScaleSet;
use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::event_store::{EventWindow, LoadOptions};
use crate::metrics::{Metrics, MetricsReport, RESULTS_HEADER};
use crate::model::{Ablation, ModelConfig};
use crate::train::{evaluate, split_patients, train, Prepared, Split, TrainConfig, TrainOutcome};

/// Every setting of a training run, read from and snapshotted to one flat
/// config.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ablation: Ablation,
    /// Patients with fewer events are dropped at load time.
    pub min_events: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            ablation: Ablation::default(),
            min_events: LoadOptions::default().min_events,
        }
    }
}

impl RunConfig {
    pub fn keys() -> Vec<&'static str> {
        let mut k: Vec<&str> = Vec::new();
        k.extend_from_slice(ModelConfig::KEYS);
        k.extend_from_slice(TrainConfig::KEYS);
        k.extend_from_slice(Ablation::KEYS);
        k.push("min_events");
        k
    }

    /// Rejects unknown keys; absent keys keep their defaults.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        kv.reject_unknown(&Self::keys())?;
        Ok(Self {
            model: ModelConfig::from_kv(kv)?,
            train: TrainConfig::from_kv(kv)?,
            ablation: Ablation::from_kv(kv)?,
            min_events: kv.get_or("min_events", LoadOptions::default().min_events)?,
        })
    }

    /// Snapshot with every key spelled out.
    pub fn to_kv(&self) -> KvConfig {
        let mut kv = self.model.to_kv();
        kv.merge(&self.train.to_kv());
        kv.merge(&self.ablation.to_kv());
        kv.set("min_events", self.min_events);
        kv
    }

    pub fn load_options(&self) -> LoadOptions {
        LoadOptions { grid_step: self.model.grid_step, t_max: self.model.t_max, min_events: self.min_events }
    }
}

/// Rows of the ablation table: the full model and one removal per component.
pub const ABLATION_ROWS: &[&str] = &[
    "full",
    "no_reliability_gate",
    "no_dt_embedding",
    "no_stats_augment",
    "no_weaving",
    "no_token_router",
];

/// Expands `all` to [`ABLATION_ROWS`] and checks every other name.
pub fn resolve_variants(names: &[String]) -> Result<Vec<String>> {
    let mut out: Vec<String> = Vec::new();
    for n in names {
        let expanded: Vec<String> = if n == "all" {
            ABLATION_ROWS.iter().map(|s| s.to_string()).collect()
        } else {
            Ablation::variant(n)?;
            vec![n.clone()]
        };
        for e in expanded {
            if !out.contains(&e) {
                out.push(e);
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Config("no variants requested".into()));
    }
    Ok(out)
}

/// Patient-level split of a cohort with the configured split seed.
pub fn cohort_split(windows: &[EventWindow], cfg: &TrainConfig) -> Result<Split> {
    split_patients(&windows.iter().map(|w| w.label).collect::<Vec<_>>(), cfg.split_seed)
}

/// Test-split metrics of a trained model, with hard routing.
pub fn test_metrics(windows: &[EventWindow], split: &Split, outcome: &TrainOutcome) -> Result<(Vec<f64>, Metrics)> {
    let test: Vec<&EventWindow> = split.test.iter().map(|&i| &windows[i]).collect();
    evaluate(&outcome.model, &Prepared::new(&test, &outcome.normalizer)?)
}

/// Trains and tests one model per seed in `cfg.seeds`.
pub fn run_seeds(
    windows: &[EventWindow],
    split: &Split,
    model_config: &ModelConfig,
    ablation: Ablation,
    cfg: &TrainConfig,
) -> Result<MetricsReport> {
    let mut per_seed = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let outcome = train(windows, split, model_config, ablation, cfg, seed, None)?;
        let (_, m) = test_metrics(windows, split, &outcome)?;
        log::info!("seed {seed}: best epoch {} test auprc {:.4}", outcome.best_epoch, m.auprc);
        per_seed.push(m);
    }
    MetricsReport::new(cfg.seeds.clone(), per_seed)
}

/// Labelled seed-averaged rows.
#[derive(Clone, Debug, Default)]
pub struct ResultTable {
    pub rows: Vec<(String, MetricsReport)>,
}

impl ResultTable {
    pub fn get(&self, label: &str) -> Option<&MetricsReport> {
        self.rows.iter().find(|(l, _)| l == label).map(|(_, r)| r)
    }

    /// Per-seed rows followed by `mean` and `std` rows for every label.
    pub fn to_csv(&self) -> String {
        let mut s = RESULTS_HEADER.to_string();
        for (label, report) in &self.rows {
            s.push_str(&report.csv_rows(label));
        }
        s
    }
}

pub fn run_ablation(
    windows: &[EventWindow],
    split: &Split,
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    variants: &[String],
) -> Result<ResultTable> {
    let mut table = ResultTable::default();
    for name in resolve_variants(variants)? {
        log::info!("variant {name}");
        let report = run_seeds(windows, split, model_config, Ablation::variant(&name)?, cfg)?;
        table.rows.push((name, report));
    }
    Ok(table)
}

#[derive(Clone, Debug, PartialEq)]
pub enum SweepAxis {
    Scales(Vec<ScaleSet>),
    /// `None` turns the router off.
    Budget(Vec<Option<usize>>),
}

impl SweepAxis {
    /// `scales` values are `+`-joined sets (`60+120+240`); `budget` values
    /// are integers or `off`.
    pub fn parse(axis: &str, values: &[String]) -> Result<Self> {
        let axis = match axis {
            "scales" => Self::Scales(
                values
                    .iter()
                    .map(|v| {
                        let s = v
                            .split('+')
                            .map(|x| x.trim().parse::<f64>().map_err(|e| Error::Config(format!("scale {x:?}: {e}"))))
                            .collect::<Result<Vec<_>>>()?;
                        ScaleSet::new(s)
                    })
                    .collect::<Result<_>>()?,
            ),
            "budget" => Self::Budget(
                values
                    .iter()
                    .map(|v| match v.trim() {
                        "off" => Ok(None),
                        x => x.parse().map(Some).map_err(|e| Error::Config(format!("budget {x:?}: {e}"))),
                    })
                    .collect::<Result<_>>()?,
            ),
            _ => return Err(Error::Config(format!("unknown sweep axis {axis:?}; expected scales or budget"))),
        };
        if axis.is_empty() {
            return Err(Error::Config("sweep needs at least one value".into()));
        }
        Ok(axis)
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Scales(v) => v.len(),
            Self::Budget(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn points(&self, base: &ModelConfig, ablation: Ablation) -> Vec<(String, ModelConfig, Ablation)> {
        match self {
            Self::Scales(sets) => sets
                .iter()
                .map(|s| (ScaleLabel(s).to_string(), ModelConfig { scales: s.clone(), ..base.clone() }, ablation))
                .collect(),
            Self::Budget(ks) => ks
                .iter()
                .map(|k| match k {
                    Some(k) => (k.to_string(), ModelConfig { budget: *k, ..base.clone() }, ablation),
                    None => ("off".to_string(), base.clone(), Ablation { no_token_router: true, ..ablation }),
                })
                .collect(),
        }
    }
}

struct ScaleLabel<'a>(&'a ScaleSet);

impl fmt::Display for ScaleLabel<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.as_slice().iter().map(|s| s.to_string()).collect();
        f.write_str(&parts.join("+"))
    }
}

/// One seed-averaged row per sweep value.
pub fn run_sweep(
    windows: &[EventWindow],
    split: &Split,
    model_config: &ModelConfig,
    ablation: Ablation,
    cfg: &TrainConfig,
    axis: &SweepAxis,
) -> Result<ResultTable> {
    if axis.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let mut table = ResultTable::default();
    for (label, mc, ab) in axis.points(model_config, ablation) {
        mc.validate()?;
        log::info!("sweep point {label}");
        table.rows.push((label, run_seeds(windows, split, &mc, ab, cfg)?));
    }
    Ok(table)
}
