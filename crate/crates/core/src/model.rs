//! The full classifier: token embedding, reliability gate, multi-scale
//! aggregation, routing, selective SSM and head.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aggregator::{aggregate, AggregateOptions, AggregatorParams, MultiScaleSequence, ScaleSet, POOL_EPS};
pub use crate::aggregator::WeavingMode;
use crate::autodiff::{Graph, ParamStore, Var};
use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::nn::reborrow;
use crate::reliability::{reliability, unit_reliability, DecayParams};
use crate::router::{route_hard, route_soft, score, RouterParams};
use crate::ssm::{encode, pool_and_predict, Head, SsmConfig, SsmParams};
use crate::tokenizer::{embed, EmbeddingParams, TokenSequence};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub d_state: usize,
    pub d_conv: usize,
    pub expand: usize,
    pub lambda_min: f64,
    pub init_decay_logit: f64,
    pub budget: usize,
    pub scales: ScaleSet,
    pub t_max: f64,
    pub grid_step: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 96,
            n_layers: 5,
            d_state: 96,
            d_conv: 2,
            expand: 3,
            lambda_min: 4.289e-4,
            init_decay_logit: -2.717,
            budget: 32,
            scales: ScaleSet::default(),
            t_max: 2880.0,
            grid_step: 60.0,
        }
    }
}

impl ModelConfig {
    pub const KEYS: &'static [&'static str] = &[
        "d_model",
        "n_layers",
        "d_state",
        "d_conv",
        "expand",
        "lambda_min",
        "init_decay_logit",
        "budget",
        "scales",
        "pooling",
        "t_max",
        "grid_step",
    ];

    pub fn ssm(&self) -> SsmConfig {
        SsmConfig {
            d_model: self.d_model,
            n_layers: self.n_layers,
            d_state: self.d_state,
            d_conv: self.d_conv,
            expand: self.expand,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.ssm().validate()?;
        if !(self.lambda_min > 0.0 && self.lambda_min.is_finite()) {
            return Err(Error::Config("lambda_min must be positive".into()));
        }
        if !self.init_decay_logit.is_finite() {
            return Err(Error::Config("init_decay_logit must be finite".into()));
        }
        if self.budget == 0 {
            return Err(Error::Config("budget must be at least 1".into()));
        }
        if !(self.grid_step > 0.0 && self.t_max > 0.0) || (self.t_max / self.grid_step).fract() != 0.0 {
            return Err(Error::Config("grid_step must be positive and divide t_max".into()));
        }
        Ok(())
    }

    /// Reads the model keys from `kv`; absent keys keep their defaults.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = Self::default();
        if let Some(p) = kv.raw("pooling") {
            if p != "last" {
                return Err(Error::Config(format!("pooling={p:?} is not supported; only \"last\"")));
            }
        }
        let scales = match kv.get_list::<f64>("scales")? {
            Some(v) => ScaleSet::new(v)?,
            None => d.scales.clone(),
        };
        let c = Self {
            d_model: kv.get_or("d_model", d.d_model)?,
            n_layers: kv.get_or("n_layers", d.n_layers)?,
            d_state: kv.get_or("d_state", d.d_state)?,
            d_conv: kv.get_or("d_conv", d.d_conv)?,
            expand: kv.get_or("expand", d.expand)?,
            lambda_min: kv.get_or("lambda_min", d.lambda_min)?,
            init_decay_logit: kv.get_or("init_decay_logit", d.init_decay_logit)?,
            budget: kv.get_or("budget", d.budget)?,
            scales,
            t_max: kv.get_or("t_max", d.t_max)?,
            grid_step: kv.get_or("grid_step", d.grid_step)?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("d_model", self.d_model);
        kv.set("n_layers", self.n_layers);
        kv.set("d_state", self.d_state);
        kv.set("d_conv", self.d_conv);
        kv.set("expand", self.expand);
        kv.set("lambda_min", self.lambda_min);
        kv.set("init_decay_logit", self.init_decay_logit);
        kv.set("budget", self.budget);
        kv.set_list("scales", self.scales.as_slice());
        kv.set("pooling", "last");
        kv.set("t_max", self.t_max);
        kv.set("grid_step", self.grid_step);
        kv
    }
}

/// Component switches. The default is the full model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablation {
    pub no_reliability_gate: bool,
    pub no_dt_embedding: bool,
    pub no_stats_augment: bool,
    pub no_token_router: bool,
    pub weaving: WeavingMode,
}

impl Ablation {
    pub const KEYS: &'static [&'static str] = &[
        "no_reliability_gate",
        "no_dt_embedding",
        "no_stats_augment",
        "no_token_router",
        "no_weaving",
        "random_weaving",
    ];

    /// Variant names accepted by [`Ablation::variant`].
    pub const VARIANTS: &'static [&'static str] = &[
        "full",
        "no_reliability_gate",
        "no_dt_embedding",
        "no_stats_augment",
        "no_weaving",
        "no_token_router",
        "random_weaving",
    ];

    pub fn from_flags(
        no_reliability_gate: bool,
        no_dt_embedding: bool,
        no_stats_augment: bool,
        no_token_router: bool,
        no_weaving: bool,
        random_weaving: bool,
    ) -> Result<Self> {
        let weaving = match (no_weaving, random_weaving) {
            (true, true) => {
                return Err(Error::Config("no_weaving and random_weaving are mutually exclusive".into()))
            }
            (true, false) => WeavingMode::Concat,
            (false, true) => WeavingMode::Random,
            (false, false) => WeavingMode::Chronological,
        };
        Ok(Self { no_reliability_gate, no_dt_embedding, no_stats_augment, no_token_router, weaving })
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let f = |k: &str| kv.get_or(k, false);
        Self::from_flags(
            f("no_reliability_gate")?,
            f("no_dt_embedding")?,
            f("no_stats_augment")?,
            f("no_token_router")?,
            f("no_weaving")?,
            f("random_weaving")?,
        )
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("no_reliability_gate", self.no_reliability_gate);
        kv.set("no_dt_embedding", self.no_dt_embedding);
        kv.set("no_stats_augment", self.no_stats_augment);
        kv.set("no_token_router", self.no_token_router);
        kv.set("no_weaving", self.weaving == WeavingMode::Concat);
        kv.set("random_weaving", self.weaving == WeavingMode::Random);
        kv
    }

    /// The full model with one named component removed or replaced.
    pub fn variant(name: &str) -> Result<Self> {
        let mut a = Self::default();
        match name {
            "full" => {}
            "no_reliability_gate" => a.no_reliability_gate = true,
            "no_dt_embedding" => a.no_dt_embedding = true,
            "no_stats_augment" => a.no_stats_augment = true,
            "no_weaving" => a.weaving = WeavingMode::Concat,
            "no_token_router" => a.no_token_router = true,
            "random_weaving" => a.weaving = WeavingMode::Random,
            _ => return Err(Error::Config(format!("unknown variant {name:?}"))),
        }
        Ok(a)
    }
}

#[derive(Clone, Debug)]
pub struct ModelParams {
    pub embed: EmbeddingParams,
    pub decay: DecayParams,
    pub agg: AggregatorParams,
    pub router: RouterParams,
    pub ssm: SsmParams,
    pub head: Head,
}

/// Soft gating while training, hard top-k for evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RouteMode {
    Soft,
    Hard,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    pub mode: RouteMode,
    pub dropout: f64,
    /// Per-sample key that fixes the random weaving permutation.
    pub sample_key: u64,
}

impl ForwardOptions {
    pub fn eval(sample_key: u64) -> Self {
        Self { mode: RouteMode::Hard, dropout: 0.0, sample_key }
    }
}

/// Everything a forward pass produces, for training and for the dumps.
#[derive(Clone, Debug)]
pub struct Forward {
    pub tokens: Var,
    pub reliability: Var,
    pub multiscale: MultiScaleSequence,
    pub scores: Option<Vec<f64>>,
    /// Positions in `multiscale` fed to the backbone, in order.
    pub selected: Vec<usize>,
    pub logit: Var,
    pub prob: f64,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub ablation: Ablation,
    pub n_vars: usize,
    pub seed: u64,
    pub params: ModelParams,
    pub store: ParamStore,
}

/// Stable 64-bit FNV-1a hash, used to key per-sample randomness by id.
pub fn sample_key(id: &str) -> u64 {
    id.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

impl Model {
    pub fn new(config: ModelConfig, ablation: Ablation, n_vars: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if n_vars == 0 {
            return Err(Error::Config("model needs at least one variable".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let params = ModelParams {
            embed: EmbeddingParams::new(&mut store, n_vars, d, &mut rng),
            decay: DecayParams::new(&mut store, n_vars, config.init_decay_logit, config.lambda_min),
            agg: AggregatorParams::new(&mut store, &config.scales, d, &mut rng),
            router: RouterParams::new(&mut store, d, &mut rng),
            ssm: SsmParams::new(&mut store, config.ssm(), &mut rng)?,
            head: Head::new(&mut store, d, &mut rng),
        };
        Ok(Self { config, ablation, n_vars, seed, params, store })
    }

    pub fn forward(&self, g: &mut Graph, seq: &TokenSequence, opts: &ForwardOptions, rng: Option<&mut dyn RngCore>) -> Result<Forward> {
        self.forward_with(&self.store, g, seq, opts, rng)
    }

    /// Forward pass against an explicit parameter store with this model's
    /// layout. `rng` drives dropout.
    pub fn forward_with(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        seq: &TokenSequence,
        opts: &ForwardOptions,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Forward> {
        if seq.n_vars != self.n_vars {
            return Err(Error::Shape(format!("sequence has {} variables, model expects {}", seq.n_vars, self.n_vars)));
        }
        if seq.t_max != self.config.t_max {
            return Err(Error::Shape(format!("window of {} minutes, model expects {}", seq.t_max, self.config.t_max)));
        }
        let p = &self.params;
        let a = &self.ablation;
        let tokens = embed(g, store, &p.embed, seq, !a.no_dt_embedding)?;
        let rel = if a.no_reliability_gate {
            unit_reliability(g, seq)
        } else {
            reliability(g, store, &p.decay, seq)
        };
        let agg_opts = AggregateOptions {
            eps: POOL_EPS,
            stats_augment: !a.no_stats_augment,
            weaving: a.weaving,
            dropout: opts.dropout,
        };
        let mut weave_rng = ChaCha8Rng::seed_from_u64(self.seed);
        weave_rng.set_stream(opts.sample_key);
        let ms = aggregate(
            g,
            store,
            &p.agg,
            &self.config.scales,
            seq,
            tokens,
            rel,
            &agg_opts,
            reborrow(&mut rng),
            Some(&mut weave_rng),
        )?;

        let (routed, scores, selected) = if a.no_token_router {
            (ms.z, None, (0..ms.len()).collect())
        } else {
            let s = score(g, store, &p.router, ms.z);
            let sv = g.value(s).data().to_vec();
            match opts.mode {
                RouteMode::Soft => (route_soft(g, ms.z, s), Some(sv), (0..ms.len()).collect()),
                RouteMode::Hard => {
                    let (z, sel) = route_hard(g, ms.z, s, &ms.times, self.config.budget)?;
                    (z, Some(sv), sel)
                }
            }
        };
        let h = encode(g, store, &p.ssm, routed, opts.dropout, reborrow(&mut rng))?;
        let (logit, prob) = pool_and_predict(g, store, &p.head, h)?;
        Ok(Forward { tokens, reliability: rel, multiscale: ms, scores, selected, logit, prob })
    }

    /// Probability under hard routing and no dropout.
    pub fn predict(&self, seq: &TokenSequence, sample_key: u64) -> Result<f64> {
        let mut g = Graph::no_grad();
        Ok(self.forward(&mut g, seq, &ForwardOptions::eval(sample_key), None)?.prob)
    }
}
