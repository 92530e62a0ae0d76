//! Multi-scale bucketing, reliability-weighted pooling, statistics augmentation
//! and chronological weaving.
//!
//! At scale `s` a token at normalized time `tau` falls in bucket
//! `floor(u / s)` with `u = (tau + 1) / 2 * T_max` minutes. Each non-empty
//! bucket becomes one summary token centred at `(k + 1/2) s`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{dropout, reborrow, LayerNorm, Linear};
use crate::tokenizer::{normalized_time, Cve, TokenSequence};

/// Denominator guard for pooled means.
pub const POOL_EPS: f64 = 1e-8;

/// Ordered set of temporal scales in minutes.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleSet(Vec<f64>);

impl ScaleSet {
    pub fn new(scales: Vec<f64>) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::Config("scale set is empty".into()));
        }
        for (i, &s) in scales.iter().enumerate() {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::Config(format!("scale {s} must be positive")));
            }
            if scales[..i].contains(&s) {
                return Err(Error::Config(format!("duplicate scale {s}")));
            }
        }
        Ok(Self(scales))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Upper bound on summary tokens for a window of `t_max` minutes.
    pub fn token_bound(&self, t_max: f64) -> usize {
        self.0.iter().map(|&s| (t_max / s).ceil() as usize).sum()
    }
}

impl Default for ScaleSet {
    fn default() -> Self {
        Self(vec![60.0, 120.0, 240.0])
    }
}

/// How per-scale token lists are merged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum WeavingMode {
    /// Sort by bucket centre; ties by scale then bucket index.
    #[default]
    Chronological,
    /// Scale-major blocks in scale-set order.
    Concat,
    /// Seeded random permutation.
    Random,
}

impl WeavingMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Chronological => "chronological",
            Self::Concat => "none",
            Self::Random => "random",
        }
    }
}

/// Minutes from normalized time, snapped to a micro-minute grid so that the
/// round trip through `tau` does not push grid times across a bucket edge.
pub fn restored_minutes(tau: f64, t_max: f64) -> f64 {
    ((tau + 1.0) / 2.0 * t_max * 1e6).round() / 1e6
}

pub fn bucket_index(u: f64, s: f64) -> usize {
    (u / s).floor().max(0.0) as usize
}

pub fn bucket_center(k: usize, s: f64) -> f64 {
    (k as f64 + 0.5) * s
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bucket {
    pub index: usize,
    /// Token indices in ascending order.
    pub members: Vec<usize>,
}

/// Non-empty buckets at scale `s`, ordered by index.
pub fn bucketize(seq: &TokenSequence, s: f64) -> Vec<Bucket> {
    let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &tau) in seq.tau.iter().enumerate() {
        map.entry(bucket_index(restored_minutes(tau, seq.t_max), s)).or_default().push(i);
    }
    map.into_iter().map(|(index, members)| Bucket { index, members }).collect()
}

/// `[log(1 + n_obs), coverage, log(1 + sum rel), rel-weighted staleness]`.
pub fn bucket_stats(members: &[usize], mask: &[f64], rel: &[f64], staleness: &[f64], eps: f64) -> [f64; 4] {
    let n_obs: f64 = members.iter().map(|&i| mask[i]).sum();
    let w: f64 = members.iter().map(|&i| rel[i]).sum();
    let st: f64 = members.iter().map(|&i| rel[i] * staleness[i]).sum();
    [n_obs.ln_1p(), n_obs / members.len() as f64, w.ln_1p(), st / (w + eps)]
}

#[derive(Clone, Debug)]
pub struct AggregatorParams {
    /// Per-scale dispersion transforms, indexed like the scale set.
    pub dispersion: Vec<(LayerNorm, Linear)>,
    pub stats_hidden: Linear,
    pub stats_out: Linear,
    pub center: Cve,
    /// `|S| x D`.
    pub scale_table: ParamId,
}

impl AggregatorParams {
    pub fn new<R: Rng>(store: &mut ParamStore, scales: &ScaleSet, dim: usize, rng: &mut R) -> Self {
        let dispersion = (0..scales.len())
            .map(|i| {
                let ln = LayerNorm::new(store, &format!("agg.phi{i}.ln"), dim);
                (ln, Linear::new(store, &format!("agg.phi{i}.proj"), dim, dim, true, rng))
            })
            .collect();
        Self {
            dispersion,
            stats_hidden: Linear::new(store, "agg.stats.hidden", 4, dim, true, rng),
            stats_out: Linear::new(store, "agg.stats.out", dim, dim, true, rng),
            center: Cve::new(store, "agg.center", dim, rng),
            scale_table: store.glorot("agg.scale_table", scales.len(), dim, rng),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AggregateOptions {
    pub eps: f64,
    pub stats_augment: bool,
    pub weaving: WeavingMode,
    pub dropout: f64,
}

impl Default for AggregateOptions {
    fn default() -> Self {
        Self { eps: POOL_EPS, stats_augment: true, weaving: WeavingMode::Chronological, dropout: 0.0 }
    }
}

/// Where a summary token came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Provenance {
    pub scale_index: usize,
    pub scale: f64,
    pub bucket: usize,
    pub center: f64,
    pub n_members: usize,
    pub stats: [f64; 4],
}

/// Summary tokens after weaving. `mask` is all ones since empty buckets are
/// never emitted.
#[derive(Clone, Debug)]
pub struct MultiScaleSequence {
    pub z: Var,
    pub mask: Vec<f64>,
    pub times: Vec<f64>,
    pub provenance: Vec<Provenance>,
}

impl MultiScaleSequence {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Pooled means and clipped dispersion on the graph for one scale, given a
/// dense bucket id per token. Returns `(mu, nu, sum_rel)`.
pub fn pool_and_dispersion(
    g: &mut Graph,
    z: Var,
    rel: Var,
    seg: &[usize],
    n_buckets: usize,
    eps: f64,
) -> (Var, Var, Var) {
    let w = g.segment_sum(rel, seg, n_buckets);
    let den = g.add_scalar(w, eps);
    let rz = g.mul_col(z, rel);
    let num = g.segment_sum(rz, seg, n_buckets);
    let mu = g.div_col(num, den);
    let z2 = g.square(z);
    let rz2 = g.mul_col(z2, rel);
    let num2 = g.segment_sum(rz2, seg, n_buckets);
    let m2 = g.div_col(num2, den);
    let mu2 = g.square(mu);
    let var = g.sub(m2, mu2);
    let nu = g.clip(var, 0.0, f64::INFINITY);
    (mu, nu, w)
}

/// Builds the woven multi-scale sequence from token embeddings `z [N, D]`
/// and reliability weights `rel [N, 1]`. `rng` drives dropout; `weave_rng`
/// is only read in random weaving mode.
#[allow(clippy::too_many_arguments)]
pub fn aggregate(
    g: &mut Graph,
    store: &ParamStore,
    params: &AggregatorParams,
    scales: &ScaleSet,
    seq: &TokenSequence,
    z: Var,
    rel: Var,
    opts: &AggregateOptions,
    mut rng: Option<&mut dyn RngCore>,
    weave_rng: Option<&mut dyn RngCore>,
) -> Result<MultiScaleSequence> {
    if seq.is_empty() {
        return Err(Error::InvalidInput("cannot aggregate an empty token sequence".into()));
    }
    let dim = g.shape(z).1;
    if g.shape(z).0 != seq.len() || g.shape(rel) != (seq.len(), 1) {
        return Err(Error::Shape("token embeddings or weights do not match the sequence".into()));
    }
    let rel_vals = g.value(rel).data().to_vec();
    let mut blocks = Vec::with_capacity(scales.len());
    let mut prov = Vec::new();
    for (si, &s) in scales.as_slice().iter().enumerate() {
        let buckets = bucketize(seq, s);
        let k_n = buckets.len();
        let mut seg = vec![0usize; seq.len()];
        for (b, bucket) in buckets.iter().enumerate() {
            for &i in &bucket.members {
                seg[i] = b;
            }
        }
        let (mut mu, nu, w) = pool_and_dispersion(g, z, rel, &seg, k_n, opts.eps);
        if opts.stats_augment {
            let (ln, proj) = params
                .dispersion
                .get(si)
                .ok_or_else(|| Error::Shape(format!("no dispersion transform for scale {si}")))?;
            let h = ln.apply(g, store, nu);
            let h = proj.apply(g, store, h);
            mu = g.add(mu, h);

            // Count and coverage carry no gradient; weight-dependent terms do.
            let mut n_obs = Vec::with_capacity(k_n);
            let mut cover = Vec::with_capacity(k_n);
            for b in &buckets {
                let n: f64 = b.members.iter().map(|&i| seq.mask[i]).sum();
                n_obs.push(n.ln_1p());
                cover.push(n / b.members.len() as f64);
            }
            let c0 = g.input(Tensor::column(n_obs));
            let c1 = g.input(Tensor::column(cover));
            let c2 = g.log1p(w);
            let rst = g.mul_const(rel, &Tensor::column(seq.staleness.clone()));
            let st = g.segment_sum(rst, &seg, k_n);
            let den = g.add_scalar(w, opts.eps);
            let c3 = g.div(st, den);
            let stats = g.concat_cols(&[c0, c1, c2, c3]);
            let h = params.stats_hidden.apply(g, store, stats);
            let h = g.tanh(h);
            let h = dropout(g, h, opts.dropout, reborrow(&mut rng));
            let h = params.stats_out.apply(g, store, h);
            mu = g.add(mu, h);
        }
        let centers: Vec<f64> = buckets.iter().map(|b| bucket_center(b.index, s)).collect();
        let theta = g.input(Tensor::column(centers.iter().map(|&c| normalized_time(c, seq.t_max)).collect()));
        let ce = params.center.apply(g, store, theta);
        mu = g.add(mu, ce);
        let table = g.param(store, params.scale_table);
        if g.shape(table).1 != dim {
            return Err(Error::Shape(format!("scale table width {} vs token width {dim}", g.shape(table).1)));
        }
        let se = g.gather_rows(table, &vec![si; k_n]);
        mu = g.add(mu, se);

        for (b, c) in buckets.iter().zip(centers) {
            prov.push(Provenance {
                scale_index: si,
                scale: s,
                bucket: b.index,
                center: c,
                n_members: b.members.len(),
                stats: bucket_stats(&b.members, &seq.mask, &rel_vals, &seq.staleness, opts.eps),
            });
        }
        blocks.push(mu);
    }
    let concat = g.concat_rows(&blocks);
    let order = weave_order(&prov, opts.weaving, weave_rng)?;
    let z = g.gather_rows(concat, &order);
    let provenance: Vec<Provenance> = order.iter().map(|&i| prov[i].clone()).collect();
    Ok(MultiScaleSequence {
        z,
        mask: vec![1.0; provenance.len()],
        times: provenance.iter().map(|p| p.center).collect(),
        provenance,
    })
}

/// Permutation applied to the scale-major concatenation.
pub fn weave_order(prov: &[Provenance], mode: WeavingMode, rng: Option<&mut dyn RngCore>) -> Result<Vec<usize>> {
    let mut order: Vec<usize> = (0..prov.len()).collect();
    match mode {
        WeavingMode::Concat => {}
        WeavingMode::Chronological => order.sort_by(|&a, &b| {
            let (pa, pb) = (&prov[a], &prov[b]);
            pa.center
                .total_cmp(&pb.center)
                .then(pa.scale.total_cmp(&pb.scale))
                .then(pa.bucket.cmp(&pb.bucket))
        }),
        WeavingMode::Random => {
            let rng = rng.ok_or_else(|| Error::InvalidInput("random weaving needs an RNG".into()))?;
            order.shuffle(rng);
        }
    }
    Ok(order)
}

/// `scale,bucket,center,n_members,log_n_obs,coverage,log_weight,staleness`.
pub fn buckets_csv(seq: &MultiScaleSequence) -> String {
    let mut s = String::from("position,scale,bucket,center,n_members,log_n_obs,coverage,log_weight,staleness\n");
    for (j, p) in seq.provenance.iter().enumerate() {
        let _ = writeln!(
            s,
            "{j},{},{},{},{},{},{},{},{}",
            p.scale, p.bucket, p.center, p.n_members, p.stats[0], p.stats[1], p.stats[2], p.stats[3]
        );
    }
    s
}
