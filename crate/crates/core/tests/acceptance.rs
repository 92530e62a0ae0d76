//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `ACCEPTANCE_ONLY=1,7` restricts the run to the listed criteria.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relagg_core::aggregator::{bucketize, pool_and_dispersion, weave_order, Provenance, ScaleSet, POOL_EPS};
use relagg_core::autodiff::gradcheck::relative_error;
use relagg_core::autodiff::{Graph, ParamStore, Tensor};
use relagg_core::event_store::{synthesize_cohort, EventWindow, GridSpec, Normalizer};
use relagg_core::experiment::{cohort_split, run_ablation, run_seeds, RunConfig, ABLATION_ROWS};
use relagg_core::metrics::{auprc, auroc, brier, ece};
use relagg_core::model::{ForwardOptions, RouteMode};
use relagg_core::reliability::{decay_rates, reliability, DecayParams};
use relagg_core::router::{score, select_top_k, RouterParams};
use relagg_core::ssm::{encode, SsmConfig, SsmParams};
use relagg_core::tokenizer::{flatten, normalize_gap, normalize_time};
use relagg_core::train::{batch_gradient, Prepared, TrainConfig};
use relagg_core::{Ablation, CohortSpec, MetricsReport, Model, ModelConfig, WeavingMode};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn report_dir() -> PathBuf {
    let d = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&d).expect("report directory");
    d
}

/// A random grid window with a few never-observed cells.
fn random_window<R: Rng>(rng: &mut R, grid: &GridSpec, p_obs: f64, label: u8) -> EventWindow {
    let cells = grid.n_steps() * grid.n_vars;
    let observed: Vec<Option<f64>> = (0..cells)
        .map(|_| rng.gen_bool(p_obs).then(|| rng.gen_range(-3.0..3.0)))
        .collect();
    EventWindow::from_grid(format!("r{}", rng.gen::<u32>()), grid, &observed, label)
}

// ---------------------------------------------------------------- 1

fn max_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn criterion_1() -> Check {
    const TOL: f64 = 1e-10;
    const INSTANCES: usize = 120;
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut note = |k: &'static str, e: f64| {
        let w = worst.entry(k).or_insert(0.0);
        *w = w.max(e);
    };
    for _ in 0..INSTANCES {
        let t_max = [480.0, 1440.0, 2880.0][rng.gen_range(0..3)];
        let n = rng.gen_range(1..60);

        // Normalized time, staleness and its signed form.
        let times: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..t_max)).collect();
        let tau = normalize_time(&times, t_max).unwrap();
        let tau_o: Vec<f64> = times.iter().map(|t| (2.0 * t / t_max - 1.0).max(-1.0).min(1.0)).collect();
        note("time", max_err(&tau, &tau_o));
        let gaps: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..2.0 * t_max)).collect();
        let (st, delta) = normalize_gap(&gaps, t_max).unwrap();
        let st_o: Vec<f64> = gaps.iter().map(|g| ((1.0 + g).ln() / (1.0 + t_max).ln()).min(1.0)).collect();
        note("staleness", max_err(&st, &st_o));
        note("delta", max_err(&delta, &st_o.iter().map(|s| 2.0 * s - 1.0).collect::<Vec<_>>()));

        // Decay rates and reliability weights on a random window.
        let n_vars = rng.gen_range(1..6);
        let grid = GridSpec::new(60.0, t_max, n_vars).unwrap();
        let p_obs = rng.gen_range(0.1..0.9);
        let w = random_window(&mut rng, &grid, p_obs, 0);
        let seq = flatten(&w).unwrap();
        let mut store = ParamStore::new();
        let lambda_min = 4.289e-4;
        let dp = DecayParams::new(&mut store, n_vars, 0.0, lambda_min);
        let logits: Vec<f64> = (0..n_vars).map(|_| rng.gen_range(-6.0..2.0)).collect();
        store.get_mut(dp.logits).data_mut().copy_from_slice(&logits);
        let lam_o: Vec<f64> = logits.iter().map(|x| (1.0 + x.exp()).ln() + lambda_min).collect();
        note("decay", max_err(&decay_rates(&store, &dp), &lam_o));
        let mut g = Graph::no_grad();
        let rel = reliability(&mut g, &store, &dp, &seq);
        let rel = g.value(rel).data().to_vec();
        let rel_o: Vec<f64> = (0..seq.len())
            .map(|i| {
                let (l, v) = (i / n_vars, i % n_vars);
                let cell = w.idx(l, v);
                if w.mask[cell] {
                    1.0
                } else {
                    (-(lam_o[v] * w.gaps[cell]).min(50.0)).exp()
                }
            })
            .collect();
        note("reliability", max_err(&rel, &rel_o));

        // Bucket membership and centres from raw grid minutes.
        for &s in &[60.0, 120.0, 240.0] {
            let buckets = bucketize(&seq, s);
            let mut want: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for i in 0..seq.len() {
                want.entry((w.times[i / n_vars] / s) as usize).or_default().push(i);
            }
            let got: BTreeMap<usize, Vec<usize>> = buckets.iter().map(|b| (b.index, b.members.clone())).collect();
            note("bucket", if got == want { 0.0 } else { f64::INFINITY });
        }

        // Reliability-weighted pooling and clipped dispersion.
        let d = rng.gen_range(1..5);
        let nb = rng.gen_range(1..6);
        let seg: Vec<usize> = (0..n).map(|i| if i < nb { i } else { rng.gen_range(0..nb) }).collect();
        let z = Tensor::new(n, d, (0..n * d).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let r: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut g = Graph::no_grad();
        let zv = g.input(z.clone());
        let rv = g.input(Tensor::column(r.clone()));
        let (mu, nu, wsum) = pool_and_dispersion(&mut g, zv, rv, &seg, nb, POOL_EPS);
        let (mut mu_o, mut nu_o, mut w_o) = (Vec::new(), Vec::new(), Vec::new());
        for b in 0..nb {
            let mut wt = 0.0;
            for i in 0..n {
                if seg[i] == b {
                    wt += r[i];
                }
            }
            w_o.push(wt);
            for c in 0..d {
                let (mut s1, mut s2) = (0.0, 0.0);
                for i in 0..n {
                    if seg[i] == b {
                        s1 += r[i] * z.get(i, c);
                        s2 += r[i] * z.get(i, c) * z.get(i, c);
                    }
                }
                let m = s1 / (wt + POOL_EPS);
                mu_o.push(m);
                nu_o.push((s2 / (wt + POOL_EPS) - m * m).max(0.0));
            }
        }
        note("pool_mean", max_err(g.value(mu).data(), &mu_o));
        note("dispersion", max_err(g.value(nu).data(), &nu_o));
        note("weight_sum", max_err(g.value(wsum).data(), &w_o));

        // Router scores.
        let mut store = ParamStore::new();
        let rp = RouterParams::new(&mut store, d, &mut rng);
        store.get_mut(rp.b).data_mut()[0] = rng.gen_range(-1.0..1.0);
        let mut g = Graph::no_grad();
        let zv = g.input(z.clone());
        let sv = score(&mut g, &store, &rp, zv);
        let wr = store.get(rp.w).data().to_vec();
        let br = store.get(rp.b).item();
        let s_o: Vec<f64> = (0..n).map(|i| (0..d).map(|c| wr[c] * z.get(i, c)).sum::<f64>() + br).collect();
        note("router_score", max_err(g.value(sv).data(), &s_o));
    }

    // Bucket statistics through the full model, against scalar recomputation.
    let cfg = ModelConfig { d_model: 8, n_layers: 1, d_state: 4, expand: 2, t_max: 1440.0, ..ModelConfig::default() };
    for k in 0..INSTANCES {
        let n_vars = rng.gen_range(1..5);
        let grid = GridSpec::new(60.0, cfg.t_max, n_vars).unwrap();
        let p_obs = rng.gen_range(0.05..0.95);
        let w = random_window(&mut rng, &grid, p_obs, 0);
        let seq = flatten(&w).unwrap();
        let mut model = Model::new(cfg.clone(), Ablation::variant("no_token_router").unwrap(), n_vars, k as u64).unwrap();
        let logits: Vec<f64> = (0..n_vars).map(|_| rng.gen_range(-8.0..0.0)).collect();
        model.store.get_mut(model.params.decay.logits).data_mut().copy_from_slice(&logits);
        let mut g = Graph::no_grad();
        let f = model.forward(&mut g, &seq, &ForwardOptions::eval(0), None).unwrap();
        let rel = g.value(f.reliability).data().to_vec();
        let mut e: f64 = 0.0;
        for p in &f.multiscale.provenance {
            let members: Vec<usize> =
                (0..seq.len()).filter(|&i| (w.times[i / n_vars] / p.scale) as usize == p.bucket).collect();
            let n_obs = members.iter().filter(|&&i| w.mask[i]).count() as f64;
            let wt: f64 = members.iter().map(|&i| rel[i]).sum();
            let stale: f64 = members
                .iter()
                .map(|&i| rel[i] * ((1.0 + w.gaps[i]).ln() / (1.0 + w.t_max).ln()).min(1.0))
                .sum();
            let want = [(1.0 + n_obs).ln(), n_obs / members.len() as f64, (1.0 + wt).ln(), stale / (wt + POOL_EPS)];
            e = e.max(max_err(&p.stats, &want));
            e = e.max((p.center - (p.bucket as f64 + 0.5) * p.scale).abs());
            if p.n_members != members.len() {
                e = f64::INFINITY;
            }
        }
        note("bucket_stats", e);
    }

    let bad: Vec<String> = worst.iter().filter(|(_, &e)| !(e < TOL)).map(|(k, e)| format!("{k}={e:e}")).collect();
    let overall = worst.values().cloned().fold(0.0, f64::max);
    ensure(bad.is_empty(), || format!("tolerance {TOL:e} exceeded: {}", bad.join(", ")))?;
    Ok(format!("{} formula groups x {INSTANCES} instances, max abs error {overall:.1e}", worst.len()))
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Check {
    const INSTANCES: usize = 1000;
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut max_n = 0;
    for _ in 0..INSTANCES {
        // Partition exactness on windows with up to 10^4 tokens.
        let step = [15.0, 30.0, 60.0][rng.gen_range(0..3)];
        let t_max = step * rng.gen_range(1..200) as f64;
        let l = (t_max / step) as usize;
        let n_vars = rng.gen_range(1..=(10_000 / l).clamp(1, 40));
        let grid = GridSpec::new(step, t_max, n_vars).unwrap();
        let seq = flatten(&random_window(&mut rng, &grid, 0.3, 0)).unwrap();
        max_n = max_n.max(seq.len());
        let s = [15.0, 60.0, 90.0, 240.0, 1000.0][rng.gen_range(0..5)];
        let mut seen = vec![0u8; seq.len()];
        for b in bucketize(&seq, s) {
            ensure(!b.members.is_empty(), || "empty bucket emitted".into())?;
            for &i in &b.members {
                seen[i] += 1;
                let t = seq.step_times[seq.step_of(i)];
                ensure((t / s).floor() as usize == b.index, || format!("token at {t} in bucket {} of scale {s}", b.index))?;
            }
        }
        ensure(seen.iter().all(|&c| c == 1), || "buckets do not partition the tokens".into())?;

        // Weaving: permutation and nondecreasing time.
        let n_prov = rng.gen_range(1..90);
        let prov: Vec<Provenance> = (0..n_prov)
            .map(|_| {
                let si = rng.gen_range(0..3);
                let scale = [60.0, 120.0, 240.0][si];
                let bucket = rng.gen_range(0..12);
                Provenance { scale_index: si, scale, bucket, center: (bucket as f64 + 0.5) * scale, n_members: 1, stats: [0.0; 4] }
            })
            .collect();
        for mode in [WeavingMode::Chronological, WeavingMode::Concat, WeavingMode::Random] {
            let mut wr = ChaCha8Rng::seed_from_u64(rng.gen());
            let order = weave_order(&prov, mode, Some(&mut wr)).unwrap();
            let mut sorted = order.clone();
            sorted.sort_unstable();
            ensure(sorted == (0..n_prov).collect::<Vec<_>>(), || format!("{mode:?} weaving is not a permutation"))?;
            if mode == WeavingMode::Chronological {
                ensure(order.windows(2).all(|p| prov[p[0]].center <= prov[p[1]].center), || "woven times decrease".into())?;
            }
        }

        // Router budget, optimality against a full sort, chronology.
        let n_tok = rng.gen_range(1..120);
        let k = rng.gen_range(1..64);
        let scores: Vec<f64> = (0..n_tok).map(|_| f64::from(rng.gen_range(-4i32..4)) * 0.25).collect();
        let times: Vec<f64> = (0..n_tok).map(|_| 30.0 * rng.gen_range(0..96) as f64).collect();
        let sel = select_top_k(&scores, &times, k).unwrap();
        ensure(sel.len() == k.min(n_tok), || format!("budget {k} over {n_tok} tokens kept {}", sel.len()))?;
        let mut oracle: Vec<usize> = (0..n_tok).collect();
        oracle.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(times[a].total_cmp(&times[b])).then(a.cmp(&b)));
        let want: BTreeSet<usize> = oracle[..k.min(n_tok)].iter().copied().collect();
        ensure(sel.iter().copied().collect::<BTreeSet<_>>() == want, || "selection differs from full-sort oracle".into())?;
        ensure(sel.windows(2).all(|p| times[p[0]] <= times[p[1]]), || "selected tokens not chronological".into())?;

        // Token count bound for the reference window and scale set.
        let scales = ScaleSet::default();
        let grid = GridSpec::new(60.0, 2880.0, rng.gen_range(1..20)).unwrap();
        let p_obs = rng.gen_range(0.0..1.0);
        let seq = flatten(&random_window(&mut rng, &grid, p_obs, 0)).unwrap();
        let n_tok: usize = scales.as_slice().iter().map(|&s| bucketize(&seq, s).len()).sum();
        ensure(n_tok <= 84, || format!("{n_tok} summary tokens"))?;
    }
    ensure(ScaleSet::default().token_bound(2880.0) == 84, || "token bound is not 84".into())?;
    Ok(format!("{INSTANCES} instances per invariant, largest window {max_n} tokens"))
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let cfg = ModelConfig {
        d_model: 8,
        n_layers: 1,
        d_state: 4,
        d_conv: 2,
        expand: 2,
        budget: 16,
        t_max: 480.0,
        ..ModelConfig::default()
    };
    let n_vars = 3;
    let grid = GridSpec::new(60.0, cfg.t_max, n_vars).unwrap();
    let windows: Vec<EventWindow> = (0..4).map(|i| random_window(&mut rng, &grid, 0.5, (i % 2) as u8)).collect();
    let norm = Normalizer::fit(&windows).unwrap();
    let data = Prepared::new(&windows.iter().collect::<Vec<_>>(), &norm).unwrap();
    let mut model = Model::new(cfg.clone(), Ablation::default(), n_vars, 7).unwrap();
    model.store.get_mut(model.params.decay.logits).data_mut().copy_from_slice(&[-1.0, -2.5, -4.0]);
    let n_tok = {
        let mut g = Graph::no_grad();
        model.forward(&mut g, &data.seqs[0], &ForwardOptions::eval(data.keys[0]), None).unwrap().multiscale.len()
    };
    ensure(n_tok <= 16, || format!("{n_tok} routed tokens"))?;

    let batch: Vec<usize> = (0..4).collect();
    let (_, grads) = batch_gradient(&model, &model.store, &data, &batch, 0.0, 0).map_err(|e| e.to_string())?;
    let loss = |s: &ParamStore| -> f64 {
        batch
            .iter()
            .map(|&i| {
                let mut g = Graph::no_grad();
                let opts = ForwardOptions { mode: RouteMode::Soft, dropout: 0.0, sample_key: data.keys[i] };
                let f = model.forward_with(s, &mut g, &data.seqs[i], &opts, None).unwrap();
                let l = g.bce_with_logits(f.logit, f64::from(data.labels[i]));
                g.value(l).item()
            })
            .sum::<f64>()
            / batch.len() as f64
    };
    let group_of = |name: &str| -> &'static str {
        match name {
            n if n.starts_with("embed") => "embeddings",
            n if n.starts_with("decay") => "decay_logits",
            n if n.starts_with("agg.phi") => "dispersion_proj",
            n if n.starts_with("agg.stats") => "stats_mlp",
            n if n.starts_with("agg.") => "bucket_embeddings",
            n if n.starts_with("router") => "router",
            n if n.starts_with("ssm") => "ssm",
            n if n.starts_with("head") => "head",
            _ => "other",
        }
    };
    let eps = 1e-5;
    let mut groups: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut probe = model.store.clone();
    for id in model.store.ids().collect::<Vec<_>>() {
        let entry = groups.entry(group_of(model.store.name(id))).or_default();
        for j in 0..model.store.get(id).len() {
            let orig = probe.get(id).data()[j];
            probe.get_mut(id).data_mut()[j] = orig + eps;
            let plus = loss(&probe);
            probe.get_mut(id).data_mut()[j] = orig - eps;
            let minus = loss(&probe);
            probe.get_mut(id).data_mut()[j] = orig;
            entry.0.push(grads.get(id).data()[j]);
            entry.1.push((plus - minus) / (2.0 * eps));
        }
    }
    let mut worst: f64 = 0.0;
    for (name, (analytic, numeric)) in &groups {
        let err = relative_error(analytic, numeric, 1e-9);
        let norm = analytic.iter().map(|x| x * x).sum::<f64>().sqrt();
        ensure(norm > 1e-9, || format!("group {name} has a zero gradient; check is vacuous"))?;
        ensure(err < 1e-3, || format!("group {name}: relative error {err:e}"))?;
        worst = worst.max(err);
    }
    ensure(!groups.contains_key("other"), || "unclassified parameters".into())?;
    Ok(format!("{} groups, {} tokens, worst relative error {worst:.1e}", groups.len(), n_tok))
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let cfg = SsmConfig { d_model: 96, n_layers: 5, d_state: 96, d_conv: 2, expand: 3 };
    let mut store = ParamStore::new();
    let params = SsmParams::new(&mut store, cfg, &mut rng).unwrap();
    let run = |x: &Tensor| -> Tensor {
        let mut g = Graph::no_grad();
        let xv = g.input(x.clone());
        let h = encode(&mut g, &store, &params, xv, 0.0, None).unwrap();
        g.value(h).clone()
    };
    let random_x = |rng: &mut ChaCha8Rng, n: usize| Tensor::new(n, 96, (0..n * 96).map(|_| rng.gen_range(-1.0..1.0)).collect());

    // Perturbing token t leaves every earlier output bit-identical.
    let n = 40;
    let x = random_x(&mut rng, n);
    let base = run(&x);
    for t in [0, 7, 20, 39] {
        let mut xp = x.clone();
        for c in 0..96 {
            xp.set(t, c, xp.get(t, c) + rng.gen_range(0.5..2.0));
        }
        let out = run(&xp);
        for r in 0..t {
            ensure(out.row_slice(r) == base.row_slice(r), || format!("output {r} changed when token {t} moved"))?;
        }
        ensure(out.row_slice(t) != base.row_slice(t), || format!("output {t} ignores its own token"))?;
    }

    // Wall-clock growth per quadrupling of the routed length.
    let sizes = [16usize, 64, 256, 1024];
    let mut times = Vec::new();
    for &n in &sizes {
        let x = random_x(&mut rng, n);
        run(&x);
        let reps = if n >= 1024 { 5 } else { 9 };
        let best = (0..reps)
            .map(|_| {
                let t0 = Instant::now();
                std::hint::black_box(run(&x));
                t0.elapsed()
            })
            .min()
            .unwrap();
        times.push(best.as_secs_f64());
    }
    let factors: Vec<f64> = times.windows(2).map(|w| w[1] / (4.0 * w[0])).collect();
    let shown: Vec<String> = factors.iter().map(|f| format!("{f:.2}")).collect();
    let ms: Vec<String> = times.iter().map(|t| format!("{:.1}ms", t * 1e3)).collect();
    ensure(factors.iter().all(|&f| f < 1.3), || format!("superlinearity factors {shown:?} (times {ms:?})"))?;
    Ok(format!("causal under 4 perturbations; times {ms:?}, factors {shown:?}"))
}

// ---------------------------------------------------------------- 5 and 6

/// Learning-task fixture shared by criteria 5 and 6.
mod learning {
    use super::*;

    pub const N_SEEDS: u64 = 5;
    pub const BUDGET: Duration = Duration::from_secs(15 * 60);
    pub const PREVALENCE: f64 = 0.15;
    /// Test AUPRC of the last-observed-value logistic regression on this
    /// cohort and split, computed by [`baseline_auprc`] before any model
    /// tuning.
    pub const BASELINE_AUPRC: f64 = 0.490702213893921;

    pub fn cohort() -> CohortSpec {
        CohortSpec { n_patients: 4000, prevalence: PREVALENCE, strength: 0.8, seed: 2024, ..CohortSpec::default() }
    }

    /// A model small enough to train five seeds on one CPU core within the
    /// runtime budget.
    pub fn model() -> ModelConfig {
        ModelConfig { d_model: 8, n_layers: 1, d_state: 4, expand: 2, ..ModelConfig::default() }
    }

    pub fn train_config() -> TrainConfig {
        TrainConfig { lr: 2e-3, max_epochs: 30, patience: 10, seeds: (0..N_SEEDS).collect(), ..TrainConfig::default() }
    }

    fn last_observed(w: &EventWindow, norm: &Normalizer) -> Vec<f64> {
        let w = norm.apply(w);
        let mut f = vec![0.0; w.n_vars + 1];
        for v in 0..w.n_vars {
            for l in 0..w.n_steps {
                if w.mask[w.idx(l, v)] {
                    f[v] = w.values[w.idx(l, v)];
                }
            }
        }
        f[w.n_vars] = 1.0;
        f
    }

    /// Logistic regression on the last observed (train-normalized) value of
    /// each variable, fitted by full-batch gradient descent.
    pub fn baseline_auprc(windows: &[EventWindow], split: &relagg_core::train::Split) -> f64 {
        let train: Vec<EventWindow> = split.train.iter().map(|&i| windows[i].clone()).collect();
        let norm = Normalizer::fit(&train).unwrap();
        let x: Vec<Vec<f64>> = train.iter().map(|w| last_observed(w, &norm)).collect();
        let y: Vec<f64> = train.iter().map(|w| f64::from(w.label)).collect();
        let mut beta = vec![0.0; x[0].len()];
        for _ in 0..3000 {
            let mut g = vec![0.0; beta.len()];
            for (xi, yi) in x.iter().zip(&y) {
                let z: f64 = xi.iter().zip(&beta).map(|(a, b)| a * b).sum();
                let p = 1.0 / (1.0 + (-z).exp());
                for (gj, xj) in g.iter_mut().zip(xi) {
                    *gj += (p - yi) * xj;
                }
            }
            for (b, gj) in beta.iter_mut().zip(&g) {
                *b -= 0.5 * gj / x.len() as f64;
            }
        }
        let probs: Vec<f64> = split
            .test
            .iter()
            .map(|&i| {
                let xi = last_observed(&windows[i], &norm);
                1.0 / (1.0 + (-xi.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>()).exp())
            })
            .collect();
        let labels: Vec<u8> = split.test.iter().map(|&i| windows[i].label).collect();
        auprc(&probs, &labels).unwrap()
    }
}

struct LearningRun {
    windows: Vec<EventWindow>,
    split: relagg_core::train::Split,
    full: MetricsReport,
}

fn criterion_5(shared: &mut Option<LearningRun>) -> Check {
    let windows = synthesize_cohort(&learning::cohort()).map_err(|e| e.to_string())?;
    let tc = learning::train_config();
    let split = cohort_split(&windows, &tc).map_err(|e| e.to_string())?;
    let baseline = learning::baseline_auprc(&windows, &split);
    ensure((baseline - learning::BASELINE_AUPRC).abs() < 1e-9, || {
        format!("baseline fixture drifted: {baseline} vs recorded {}", learning::BASELINE_AUPRC)
    })?;
    let t0 = Instant::now();
    let full = run_seeds(&windows, &split, &learning::model(), Ablation::default(), &tc).map_err(|e| e.to_string())?;
    let elapsed = t0.elapsed();
    let (mean, std) = full.auprc();
    let per_seed: Vec<String> = full.per_seed.iter().map(|m| format!("{:.3}", m.auprc)).collect();
    let summary = format!(
        "test AUPRC {mean:.4} +- {std:.4} (seeds {}), baseline {baseline:.4}, prevalence {}, {:.0}s",
        per_seed.join("/"),
        learning::PREVALENCE,
        elapsed.as_secs_f64()
    );
    std::fs::write(report_dir().join("criterion5.csv"), relagg_core::metrics::RESULTS_HEADER.to_string() + &full.csv_rows("full"))
        .map_err(|e| e.to_string())?;
    *shared = Some(LearningRun { windows, split, full });
    ensure(mean >= learning::PREVALENCE + 0.30, || format!("margin over prevalence too small: {summary}"))?;
    ensure(mean > baseline, || format!("does not beat the baseline: {summary}"))?;
    ensure(elapsed < learning::BUDGET, || format!("over the runtime budget: {summary}"))?;
    Ok(summary)
}

fn criterion_6(shared: &Option<LearningRun>) -> Check {
    // Hard structure check on a small cohort.
    let spec = CohortSpec { n_patients: 80, n_vars: 4, n_flagged: 2, n_drift: 1, t_max: 480.0, prevalence: 0.4, seed: 6, ..CohortSpec::default() };
    let windows = synthesize_cohort(&spec).map_err(|e| e.to_string())?;
    let mc = ModelConfig { d_model: 8, n_layers: 1, d_state: 4, expand: 2, budget: 6, t_max: 480.0, ..ModelConfig::default() };
    let tc = TrainConfig { max_epochs: 1, batch_size: 16, seeds: vec![0, 1], ..TrainConfig::default() };
    let split = cohort_split(&windows, &tc).map_err(|e| e.to_string())?;
    let table = run_ablation(&windows, &split, &mc, &tc, &["all".to_string()]).map_err(|e| e.to_string())?;
    let labels: Vec<&str> = table.rows.iter().map(|(l, _)| l.as_str()).collect();
    ensure(labels == ABLATION_ROWS, || format!("ablation rows {labels:?}"))?;
    let csv = table.to_csv();
    let means = csv.lines().filter(|l| l.split(',').nth(1) == Some("mean")).count();
    ensure(means == 6, || format!("{means} mean rows"))?;

    // Soft direction check on the learning task.
    let Some(run) = shared else {
        return Err("criterion 5 did not produce the full-model runs".into());
    };
    let no_gate = run_seeds(&run.windows, &run.split, &learning::model(), Ablation::variant("no_reliability_gate").unwrap(), &learning::train_config())
        .map_err(|e| e.to_string())?;
    let (full, full_sd) = run.full.auprc();
    let (ng, ng_sd) = no_gate.auprc();
    let held = full >= ng;
    let text = format!(
        "full model vs no_reliability_gate on the informative-missingness cohort ({} seeds)\n\
         full                 AUPRC {full:.4} +- {full_sd:.4}\n\
         no_reliability_gate  AUPRC {ng:.4} +- {ng_sd:.4}\n\
         direction full >= no_reliability_gate: {}\n",
        learning::N_SEEDS,
        if held { "held" } else { "NOT held" }
    );
    let path = report_dir().join("criterion6_report.txt");
    let mut body = text.clone();
    body.push('\n');
    body.push_str(relagg_core::metrics::RESULTS_HEADER);
    body.push_str(&run.full.csv_rows("full"));
    body.push_str(&no_gate.csv_rows("no_reliability_gate"));
    std::fs::write(&path, body).map_err(|e| e.to_string())?;
    Ok(format!(
        "6-row table ok; direction {} (full {full:.4} vs no gate {ng:.4}); report {}",
        if held { "held" } else { "NOT held, soft criterion" },
        path.display()
    ))
}

// ---------------------------------------------------------------- 7

mod oracle {
    pub fn auroc(s: &[f64], y: &[u8]) -> f64 {
        let (mut num, mut pairs) = (0.0, 0.0);
        for i in 0..s.len() {
            for j in 0..s.len() {
                if y[i] == 1 && y[j] == 0 {
                    pairs += 1.0;
                    if s[i] > s[j] {
                        num += 1.0;
                    } else if s[i] == s[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / pairs
    }

    /// Step-wise average precision over every distinct threshold.
    pub fn auprc(s: &[f64], y: &[u8]) -> f64 {
        let mut th: Vec<f64> = s.to_vec();
        th.sort_by(|a, b| b.total_cmp(a));
        th.dedup();
        let pos = y.iter().filter(|&&v| v == 1).count() as f64;
        let (mut ap, mut prev_recall) = (0.0, 0.0);
        for t in th {
            let tp = s.iter().zip(y).filter(|(&si, &yi)| si >= t && yi == 1).count() as f64;
            let k = s.iter().filter(|&&si| si >= t).count() as f64;
            let recall = tp / pos;
            ap += (recall - prev_recall) * tp / k;
            prev_recall = recall;
        }
        ap
    }

    pub fn ece(p: &[f64], y: &[u8]) -> f64 {
        let mut total = 0.0;
        for b in 0..10 {
            let (lo, hi) = (b as f64 / 10.0, (b + 1) as f64 / 10.0);
            let idx: Vec<usize> = (0..p.len()).filter(|&i| p[i] >= lo && (p[i] < hi || (b == 9 && p[i] <= 1.0))).collect();
            if idx.is_empty() {
                continue;
            }
            let conf = idx.iter().map(|&i| p[i]).sum::<f64>() / idx.len() as f64;
            let acc = idx.iter().map(|&i| f64::from(y[i])).sum::<f64>() / idx.len() as f64;
            total += idx.len() as f64 / p.len() as f64 * (conf - acc).abs();
        }
        total
    }

    pub fn brier(p: &[f64], y: &[u8]) -> f64 {
        p.iter().zip(y).map(|(pi, &yi)| (pi - f64::from(yi)).powi(2)).sum::<f64>() / p.len() as f64
    }
}

fn criterion_7() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut worst: f64 = 0.0;
    for k in 0..200 {
        let n = rng.gen_range(2..150);
        let mut y: Vec<u8> = (0..n).map(|_| u8::from(rng.gen_bool(0.3))).collect();
        y[0] = 1;
        y[1] = 0;
        y.shuffle(&mut rng);
        // Every third set is coarsely quantized to force ties.
        let s: Vec<f64> = (0..n)
            .map(|_| if k % 3 == 0 { f64::from(rng.gen_range(0..8)) / 8.0 } else { rng.gen_range(0.0..1.0) })
            .collect();
        let pairs = [
            (auroc(&s, &y).unwrap(), oracle::auroc(&s, &y)),
            (auprc(&s, &y).unwrap(), oracle::auprc(&s, &y)),
            (brier(&s, &y).unwrap(), oracle::brier(&s, &y)),
            (ece(&s, &y).unwrap(), oracle::ece(&s, &y)),
        ];
        for (name, (got, want)) in ["auroc", "auprc", "brier", "ece"].iter().zip(pairs) {
            let e = (got - want).abs();
            ensure(e < 1e-9, || format!("{name} off by {e:e} on set {k}"))?;
            worst = worst.max(e);
        }
    }
    let y = [1u8, 0, 1, 0, 0, 1];
    let perfect: Vec<f64> = y.iter().map(|&v| f64::from(v)).collect();
    ensure(auroc(&perfect, &y).unwrap() == 1.0 && auprc(&perfect, &y).unwrap() == 1.0 && brier(&perfect, &y).unwrap() == 0.0, || {
        "perfect predictor is not exact".into()
    })?;
    let yb = [1u8, 0, 1, 0];
    let half = [0.5; 4];
    ensure(brier(&half, &yb).unwrap() == 0.25 && ece(&half, &yb).unwrap() == 0.0, || "constant 0.5 is not exact".into())?;
    Ok(format!("200 random sets, max deviation {worst:.1e}; closed forms exact"))
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Check {
    let spec = CohortSpec { n_patients: 200, n_vars: 6, n_flagged: 3, n_drift: 2, t_max: 960.0, prevalence: 0.3, seed: 8, ..CohortSpec::default() };
    let windows = synthesize_cohort(&spec).map_err(|e| e.to_string())?;
    let mut run = RunConfig::default();
    run.model = ModelConfig { d_model: 8, n_layers: 2, d_state: 4, expand: 2, budget: 12, t_max: 960.0, ..ModelConfig::default() };
    run.ablation = Ablation::variant("random_weaving").unwrap();
    run.train = TrainConfig { max_epochs: 3, batch_size: 32, lr: 3e-3, seeds: vec![0, 1], ..TrainConfig::default() };
    let csv = || -> Result<String, String> {
        let split = cohort_split(&windows, &run.train).map_err(|e| e.to_string())?;
        let r = run_seeds(&windows, &split, &run.model, run.ablation, &run.train).map_err(|e| e.to_string())?;
        Ok(relagg_core::metrics::RESULTS_HEADER.to_string() + &r.csv_rows("random_weaving"))
    };
    let (a, b) = (csv()?, csv()?);
    ensure(a == b, || format!("metrics differ between runs:\n{a}\n{b}"))?;
    Ok(format!("two runs produced the same {}-byte metrics CSV", a.len()))
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Check {
    let snapshot = RunConfig::default().to_kv().render();
    let expected = [
        ("lr", "0.0005904"),
        ("weight_decay", "0.000001709"),
        ("dropout", "0.032"),
        ("grad_clip", "0.5"),
        ("d_model", "96"),
        ("n_layers", "5"),
        ("d_state", "96"),
        ("d_conv", "2"),
        ("expand", "3"),
        ("lambda_min", "0.0004289"),
        ("init_decay_logit", "-2.717"),
        ("budget", "32"),
        ("scales", "60,120,240"),
        ("pooling", "last"),
    ];
    let lines: BTreeMap<&str, &str> = snapshot.lines().filter_map(|l| l.split_once('=')).collect();
    for (k, v) in expected {
        ensure(lines.get(k) == Some(&v), || format!("{k}: expected {v}, snapshot has {:?}", lines.get(k)))?;
    }
    let back = RunConfig::from_kv(&relagg_core::config::KvConfig::parse(&snapshot, "snapshot").unwrap()).map_err(|e| e.to_string())?;
    ensure(back == RunConfig::default(), || "snapshot does not reload to the defaults".into())?;
    Ok(format!("{} reference values present; snapshot reloads to the defaults", expected.len()))
}

// ---------------------------------------------------------------- driver

fn main() -> ExitCode {
    let only: Option<BTreeSet<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |i: u32| only.as_ref().map_or(true, |s| s.contains(&i));
    let mut shared: Option<LearningRun> = None;
    let titles = [
        "unit-formula oracles",
        "structural invariants",
        "end-to-end gradients",
        "causality and complexity",
        "learning sanity",
        "ablation table and direction",
        "metrics correctness",
        "reproducibility",
        "defaults conformance",
    ];
    let mut failed = 0;
    for (i, title) in (1u32..).zip(titles) {
        if !wanted(i) {
            continue;
        }
        let t0 = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| match i {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(),
            5 => criterion_5(&mut shared),
            6 => criterion_6(&shared),
            7 => criterion_7(),
            8 => criterion_8(),
            _ => criterion_9(),
        }))
        .unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = t0.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS criterion {i} ({title}): {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {i} ({title}): {detail} [{secs:.1}s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}
