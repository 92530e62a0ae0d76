//! Structured-text checkpoints.
//!
//! ```text
//! relagg-checkpoint v1
//! [model]
//! d_model=96
//! ...
//! [ablation]
//! no_reliability_gate=false
//! ...
//! [meta]
//! n_vars=17
//! seed=0
//! [normalizer]
//! mean=0.1,-2.5,...
//! std=1,0.7,...
//! [params]
//! embed.value 1 96 0.0123 -0.4 ...
//! ```
//!
//! Parameter lines are `name rows cols` followed by `rows * cols` row-major
//! values in shortest round-trip decimal form, so loading is bit-exact.

use std::fmt::Write as _;
use std::path::Path;

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::event_store::Normalizer;
use crate::model::{Ablation, Model, ModelConfig};

pub const MAGIC: &str = "relagg-checkpoint v1";

/// A trained model with the normalization it was trained under.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub normalizer: Normalizer,
}

fn join(xs: &[f64]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut s = format!("{MAGIC}\n[model]\n{}[ablation]\n{}", m.config.to_kv().render(), m.ablation.to_kv().render());
        let _ = write!(s, "[meta]\nn_vars={}\nseed={}\n", m.n_vars, m.seed);
        let _ = write!(s, "[normalizer]\nmean={}\nstd={}\n", join(&self.normalizer.mean), join(&self.normalizer.std));
        s.push_str("[params]\n");
        for (_, name, t) in m.store.iter() {
            let _ = write!(s, "{name} {} {}", t.rows(), t.cols());
            for x in t.data() {
                let _ = write!(s, " {x}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str, source: &str) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse { file: source.to_string(), line, msg };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim() == MAGIC => {}
            _ => return Err(err(1, format!("missing header {MAGIC:?}"))),
        }
        let mut sections: Vec<(String, Vec<(usize, &str)>)> = Vec::new();
        for (i, l) in lines {
            let t = l.trim();
            if t.is_empty() {
                continue;
            }
            if let Some(name) = t.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
                if sections.iter().any(|(n, _)| n == name) {
                    return Err(err(i + 1, format!("duplicate section [{name}]")));
                }
                sections.push((name.to_string(), Vec::new()));
            } else if let Some((_, body)) = sections.last_mut() {
                body.push((i + 1, t));
            } else {
                return Err(err(i + 1, "content before the first section".into()));
            }
        }
        let section = |name: &str| {
            sections
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, b)| b.as_slice())
                .ok_or_else(|| err(0, format!("missing section [{name}]")))
        };
        let kv_of = |name: &str| -> Result<KvConfig> {
            let body: Vec<&str> = section(name)?.iter().map(|(_, l)| *l).collect();
            KvConfig::parse(&body.join("\n"), &format!("{source} [{name}]"))
        };

        let model_kv = kv_of("model")?;
        model_kv.reject_unknown(ModelConfig::KEYS)?;
        let config = ModelConfig::from_kv(&model_kv)?;
        let ablation_kv = kv_of("ablation")?;
        ablation_kv.reject_unknown(Ablation::KEYS)?;
        let ablation = Ablation::from_kv(&ablation_kv)?;
        let meta = kv_of("meta")?;
        meta.reject_unknown(&["n_vars", "seed"])?;
        let n_vars: usize = meta.get("n_vars")?.ok_or_else(|| err(0, "meta lacks n_vars".into()))?;
        let seed: u64 = meta.get("seed")?.ok_or_else(|| err(0, "meta lacks seed".into()))?;
        let norm_kv = kv_of("normalizer")?;
        norm_kv.reject_unknown(&["mean", "std"])?;
        let normalizer = Normalizer {
            mean: norm_kv.get_list("mean")?.ok_or_else(|| err(0, "normalizer lacks mean".into()))?,
            std: norm_kv.get_list("std")?.ok_or_else(|| err(0, "normalizer lacks std".into()))?,
        };
        if normalizer.mean.len() != n_vars || normalizer.std.len() != n_vars {
            return Err(err(0, format!("normalizer does not cover {n_vars} variables")));
        }

        let mut model = Model::new(config, ablation, n_vars, seed)?;
        let mut seen = vec![false; model.store.len()];
        for &(line, l) in section("params")? {
            let mut parts = l.split_ascii_whitespace();
            let name = parts.next().unwrap_or_default();
            let id = model.store.find(name).ok_or_else(|| err(line, format!("unknown parameter {name:?}")))?;
            let mut dim = || -> Result<usize> {
                parts
                    .next()
                    .and_then(|p| p.parse().ok())
                    .ok_or_else(|| err(line, format!("bad shape for {name}")))
            };
            let (rows, cols) = (dim()?, dim()?);
            let values = parts
                .map(|p| p.parse::<f64>().map_err(|e| err(line, format!("{name}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            let t = model.store.get_mut(id);
            if t.shape() != (rows, cols) || values.len() != rows * cols {
                return Err(err(
                    line,
                    format!("{name}: expected {:?}, found {rows}x{cols} with {} values", t.shape(), values.len()),
                ));
            }
            if std::mem::replace(&mut seen[id.index()], true) {
                return Err(err(line, format!("parameter {name} given twice")));
            }
            t.data_mut().copy_from_slice(&values);
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            let id = model.store.ids().nth(i).expect("index in range");
            return Err(err(0, format!("missing parameter {}", model.store.name(id))));
        }
        Ok(Self { model, normalizer })
    }

    /// Writes through a temporary file so a crash never leaves a torn file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_text()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, &path.display().to_string())
    }
}
