//! Fused diagonal selective scan.
//!
//! For every channel `e` and state slot `s`:
//!
//! ```text
//! h[t,e,s] = exp(dt[t,e] * A[e,s]) * h[t-1,e,s] + dt[t,e] * B[t,s] * u[t,e]
//! y[t,e]   = sum_s C[t,s] * h[t,e,s] + D[e] * u[t,e]
//! ```
//!
//! with `h[-1] = 0`. Cost is `O(L * E * S)` in time; the backward pass needs
//! every hidden state, so the forward keeps them when gradients are enabled.

use super::graph::Var;
use super::Tensor;

pub(crate) struct ScanInputs<'a> {
    pub u: (Var, &'a Tensor),
    pub dt: (Var, &'a Tensor),
    pub a: (Var, &'a Tensor),
    pub b: (Var, &'a Tensor),
    pub c: (Var, &'a Tensor),
    pub d: (Var, &'a Tensor),
}

pub(crate) struct ScanNode {
    u: Var,
    dt: Var,
    a: Var,
    b: Var,
    c: Var,
    d: Var,
    /// `L * E * S` states, row-major over `(t, e, s)`. Empty without grad.
    states: Vec<f64>,
}

pub(crate) fn forward(inp: ScanInputs<'_>, keep_states: bool) -> (ScanNode, Tensor) {
    let (u, dt, a, b, c, d) = (inp.u.1, inp.dt.1, inp.a.1, inp.b.1, inp.c.1, inp.d.1);
    let (l, e) = u.shape();
    let s = a.cols();
    assert_eq!(dt.shape(), (l, e), "scan: dt shape");
    assert_eq!(a.rows(), e, "scan: A rows");
    assert_eq!(b.shape(), (l, s), "scan: B shape");
    assert_eq!(c.shape(), (l, s), "scan: C shape");
    assert_eq!(d.len(), e, "scan: D length");

    let mut h = vec![0.0; e * s];
    let mut states = if keep_states {
        Vec::with_capacity(l * e * s)
    } else {
        Vec::new()
    };
    let mut y = vec![0.0; l * e];
    let (ad, bd, cd) = (a.data(), b.data(), c.data());
    for t in 0..l {
        let brow = &bd[t * s..(t + 1) * s];
        let crow = &cd[t * s..(t + 1) * s];
        for ch in 0..e {
            let step = dt.get(t, ch);
            let x = u.get(t, ch);
            let hrow = &mut h[ch * s..(ch + 1) * s];
            let arow = &ad[ch * s..(ch + 1) * s];
            let mut acc = 0.0;
            for k in 0..s {
                let decay = (step * arow[k]).exp();
                hrow[k] = decay * hrow[k] + step * brow[k] * x;
                acc += crow[k] * hrow[k];
            }
            y[t * e + ch] = acc + d.data()[ch] * x;
        }
        if keep_states {
            states.extend_from_slice(&h);
        }
    }
    let node = ScanNode {
        u: inp.u.0,
        dt: inp.dt.0,
        a: inp.a.0,
        b: inp.b.0,
        c: inp.c.0,
        d: inp.d.0,
        states,
    };
    (node, Tensor::new(l, e, y))
}

pub(crate) fn backward<'a>(
    node: &ScanNode,
    gy: &[f64],
    value: impl Fn(Var) -> &'a Tensor,
) -> Vec<(Var, Vec<f64>)> {
    let (u, dt, a, b, c, d) = (
        value(node.u),
        value(node.dt),
        value(node.a),
        value(node.b),
        value(node.c),
        value(node.d),
    );
    let (l, e) = u.shape();
    let s = a.cols();
    assert_eq!(node.states.len(), l * e * s, "scan backward without stored states");

    let mut gu = vec![0.0; l * e];
    let mut gdt = vec![0.0; l * e];
    let mut ga = vec![0.0; e * s];
    let mut gb = vec![0.0; l * s];
    let mut gc = vec![0.0; l * s];
    let mut gd = vec![0.0; e];
    // dL/dh[t] contributed through h[t+1].
    let mut carry = vec![0.0; e * s];
    let zeros = vec![0.0; e * s];
    let (ad, bd, cd) = (a.data(), b.data(), c.data());

    for t in (0..l).rev() {
        let h_t = &node.states[t * e * s..(t + 1) * e * s];
        let h_prev = if t == 0 {
            &zeros[..]
        } else {
            &node.states[(t - 1) * e * s..t * e * s]
        };
        let brow = &bd[t * s..(t + 1) * s];
        let crow = &cd[t * s..(t + 1) * s];
        for ch in 0..e {
            let g_out = gy[t * e + ch];
            let step = dt.get(t, ch);
            let x = u.get(t, ch);
            let arow = &ad[ch * s..(ch + 1) * s];
            let mut g_step = 0.0;
            let mut g_x = g_out * d.data()[ch];
            gd[ch] += g_out * x;
            for k in 0..s {
                let idx = ch * s + k;
                let gh = g_out * crow[k] + carry[idx];
                gc[t * s + k] += g_out * h_t[idx];
                let decay = (step * arow[k]).exp();
                let g_decay = gh * h_prev[idx];
                g_step += g_decay * decay * arow[k] + gh * brow[k] * x;
                ga[idx] += g_decay * decay * step;
                gb[t * s + k] += gh * step * x;
                g_x += gh * step * brow[k];
                carry[idx] = gh * decay;
            }
            gdt[t * e + ch] += g_step;
            gu[t * e + ch] += g_x;
        }
    }
    vec![
        (node.u, gu),
        (node.dt, gdt),
        (node.a, ga),
        (node.b, gb),
        (node.c, gc),
        (node.d, gd),
    ]
}
