//! Budgeted token routing: a linear score per token, a logistic gate while
//! training and hard top-k with chronological reordering at inference.

use std::fmt::Write as _;

use rand::Rng;

use crate::aggregator::Provenance;
use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct RouterParams {
    /// `D x 1`.
    pub w: ParamId,
    /// `1 x 1`.
    pub b: ParamId,
}

/// Initial router bias. `sigmoid(3) ~ 0.95`, so the training gate starts
/// close to the identity that hard routing applies to selected tokens.
pub const INIT_BIAS: f64 = 3.0;

impl RouterParams {
    pub fn new<R: Rng>(store: &mut ParamStore, dim: usize, rng: &mut R) -> Self {
        let w = store.glorot("router.w", dim, 1, rng);
        let b = store.zeros("router.b", 1, 1);
        store.get_mut(b).data_mut()[0] = INIT_BIAS;
        Self { w, b }
    }
}

/// `s = Z w + b`, `N x 1`.
pub fn score(g: &mut Graph, store: &ParamStore, p: &RouterParams, z: Var) -> Var {
    let w = g.param(store, p.w);
    let b = g.param(store, p.b);
    let s = g.matmul(z, w);
    g.add_row(s, b)
}

/// `sigmoid(s_j) * Z_j` for every token.
pub fn route_soft(g: &mut Graph, z: Var, scores: Var) -> Var {
    let gate = g.sigmoid(scores);
    g.mul_col(z, gate)
}

/// Indices of the `k` highest scores (ties: earlier time, then lower index),
/// returned in chronological order.
pub fn select_top_k(scores: &[f64], times: &[f64], k: usize) -> Result<Vec<usize>> {
    if scores.is_empty() {
        return Err(Error::InvalidInput("no tokens to route".into()));
    }
    if k == 0 {
        return Err(Error::Config("token budget must be at least 1".into()));
    }
    if scores.len() != times.len() {
        return Err(Error::Shape(format!("{} scores vs {} times", scores.len(), times.len())));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("router score {i} is {}", scores[i])));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then(times[a].total_cmp(&times[b]))
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx.sort_by(|&a, &b| times[a].total_cmp(&times[b]).then(a.cmp(&b)));
    Ok(idx)
}

/// Hard routing on the graph: gathers the selected rows of `z`.
pub fn route_hard(g: &mut Graph, z: Var, scores: Var, times: &[f64], k: usize) -> Result<(Var, Vec<usize>)> {
    let sel = select_top_k(&g.value(scores).data().to_vec(), times, k)?;
    Ok((g.gather_rows(z, &sel), sel))
}

/// `sample,position,scale,bucket,center,score,selected`.
pub fn routing_csv_header() -> &'static str {
    "sample,position,scale,bucket,center,score,selected\n"
}

pub fn routing_csv_rows(sample: &str, prov: &[Provenance], scores: &[f64], selected: &[usize]) -> String {
    let mut s = String::new();
    for (j, (p, sc)) in prov.iter().zip(scores).enumerate() {
        let _ = writeln!(
            s,
            "{sample},{j},{},{},{},{sc},{}",
            p.scale,
            p.bucket,
            p.center,
            u8::from(selected.contains(&j))
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::gradcheck::{param_difference, relative_error};
    use crate::autodiff::Tensor;

    fn scores_of(store: &ParamStore, p: &RouterParams, z: &Tensor) -> Vec<f64> {
        let mut g = Graph::no_grad();
        let zv = g.input(z.clone());
        let s = score(&mut g, store, p, zv);
        g.value(s).data().to_vec()
    }

    #[test]
    fn score_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let p = RouterParams::new(&mut store, 3, &mut rng);
        let z = Tensor::new(2, 3, vec![1.0, -2.0, 0.5, 0.3, 0.0, 4.0]);
        store.get_mut(p.b).set(0, 0, 0.25);
        let s = scores_of(&store, &p, &z);
        let w = store.get(p.w).data().to_vec();
        for j in 0..2 {
            let dot: f64 = (0..3).map(|c| w[c] * z.get(j, c)).sum();
            assert!((s[j] - (dot + 0.25)).abs() < 1e-15);
        }
        let doubled = Tensor::new(2, 3, z.data().iter().map(|x| 2.0 * x).collect());
        let s2 = scores_of(&store, &p, &doubled);
        for j in 0..2 {
            assert!((s2[j] - (2.0 * (s[j] - 0.25) + 0.25)).abs() < 1e-14);
        }
        store.get_mut(p.w).data_mut().fill(0.0);
        assert_eq!(scores_of(&store, &p, &z), vec![0.25, 0.25]);
    }

    #[test]
    fn soft_gate_examples() {
        let mut g = Graph::no_grad();
        let z = g.input(Tensor::new(2, 2, vec![2.0, -4.0, 1.0, 1.0]));
        let s = g.input(Tensor::column(vec![0.0, 40.0]));
        let out = route_soft(&mut g, z, s);
        assert_eq!(g.value(out).row_slice(0), &[1.0, -2.0]);
        assert!((g.value(out).get(1, 0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn soft_gate_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let p = RouterParams::new(&mut store, 4, &mut rng);
        let z = Tensor::new(6, 4, (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let probe = Tensor::new(6, 4, (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let loss = |s: &ParamStore, g: &mut Graph| {
            let zv = g.input(z.clone());
            let sc = score(g, s, &p, zv);
            let out = route_soft(g, zv, sc);
            let m = g.mul_const(out, &probe);
            g.sum(m)
        };
        let mut g = Graph::new();
        let l = loss(&store, &mut g);
        let grads = g.backward(l).unwrap().param_grads(&store);
        for id in [p.w, p.b] {
            let numeric = param_difference(&store, id, 1e-5, |s| {
                let mut g = Graph::no_grad();
                let l = loss(s, &mut g);
                g.value(l).item()
            });
            assert!(relative_error(grads.get(id).data(), &numeric, 1e-12) < 1e-6);
        }
    }

    #[test]
    fn top_k_examples() {
        let times: Vec<f64> = (0..10).map(|i| 30.0 + 60.0 * i as f64).collect();
        let scores: Vec<f64> = (0..10).map(|i| (i * 7 % 10) as f64).collect();
        assert_eq!(select_top_k(&scores, &times, 32).unwrap(), (0..10).collect::<Vec<_>>());
        let decreasing: Vec<f64> = (0..10).map(|i| -(i as f64)).collect();
        assert_eq!(select_top_k(&decreasing, &times, 3).unwrap(), vec![0, 1, 2]);
        assert!(select_top_k(&[], &[], 3).is_err());
        assert!(select_top_k(&[1.0], &[0.0], 0).is_err());
        assert!(select_top_k(&[f64::NAN], &[0.0], 1).is_err());
        // Tie on score: earlier time wins, then lower index.
        assert_eq!(select_top_k(&[1.0, 1.0, 1.0], &[90.0, 30.0, 30.0], 1).unwrap(), vec![1]);
        assert_eq!(select_top_k(&[1.0, 1.0, 1.0], &[90.0, 30.0, 30.0], 2).unwrap(), vec![1, 2]);
    }

    proptest! {
        #[test]
        fn top_k_matches_full_sort_oracle(
            items in prop::collection::vec((-3i32..3, 0usize..20), 1..90),
            k in 1usize..40,
            shift in -5.0f64..5.0,
        ) {
            let scores: Vec<f64> = items.iter().map(|&(s, _)| f64::from(s) * 0.5).collect();
            let times: Vec<f64> = items.iter().map(|&(_, t)| 30.0 * t as f64).collect();
            let sel = select_top_k(&scores, &times, k).unwrap();
            prop_assert_eq!(sel.len(), k.min(scores.len()));
            for w in sel.windows(2) {
                prop_assert!(times[w[0]] <= times[w[1]]);
            }
            let mut oracle: Vec<(f64, f64, usize)> = scores.iter().zip(&times).enumerate().map(|(i, (&s, &t))| (-s, t, i)).collect();
            oracle.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut want: Vec<usize> = oracle.iter().take(k).map(|x| x.2).collect();
            let mut got = sel.clone();
            want.sort_unstable();
            got.sort_unstable();
            prop_assert_eq!(&got, &want);
            let min_sel = sel.iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
            let max_rej = (0..scores.len()).filter(|i| !sel.contains(i)).map(|i| scores[i]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(min_sel >= max_rej);
            let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
            let mut sel_shift = select_top_k(&shifted, &times, k).unwrap();
            sel_shift.sort_unstable();
            prop_assert_eq!(sel_shift, got);
        }
    }

    #[test]
    fn hard_route_gathers_selected_rows() {
        let mut g = Graph::no_grad();
        let z = g.input(Tensor::new(3, 1, vec![10.0, 20.0, 30.0]));
        let s = g.input(Tensor::column(vec![0.1, 0.9, 0.5]));
        let (out, sel) = route_hard(&mut g, z, s, &[90.0, 30.0, 60.0], 2).unwrap();
        assert_eq!(sel, vec![1, 2]);
        assert_eq!(g.value(out).data(), &[20.0, 30.0]);
    }
}
