//! Central finite-difference checks of analytic gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};
use crate::graph::AttentionKind;
use crate::model::{self, ModelConfig};
use crate::rng;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

/// `|a − n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn scalar<T: Real>(g: &Graph<T>, v: Var) -> Result<f64> {
    g.value(v)
        .item()
        .map(Real::f64)
        .ok_or_else(|| Error::Contract(format!("expected a scalar, got {:?}", g.shape(v))))
}

/// Max relative error between the gradient of scalar `f` at `x` and its
/// central difference with the given step.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, step: T) -> Result<f64>
where
    T: Real,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let y = f(&mut g, xv)?;
    g.backward(y)?;
    let analytic = g
        .grad(xv)
        .map(|t| t.data().to_vec())
        .unwrap_or_else(|| vec![T::zero(); x.len()]);
    let eval = |probe: &Tensor<T>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(probe.clone());
        let y = f(&mut g, v)?;
        scalar(&g, y)
    };
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * step.f64());
        worst = worst.max(relative_error(analytic[i].f64(), numeric));
    }
    Ok(worst)
}

/// Same check over selected `(parameter index, element)` coordinates of a
/// parameter store; `f` builds the loss from the store.
pub fn grad_check_params<T, F>(
    store: &ParamStore<T>,
    coords: &[(usize, usize)],
    step: T,
    f: F,
) -> Result<f64>
where
    T: Real,
    F: Fn(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
{
    let mut g = Graph::new();
    let y = f(&mut g, store)?;
    g.backward(y)?;
    let mut analytic = vec![0.0; coords.len()];
    for (p, grad) in g.param_grads() {
        for (slot, &(pi, e)) in coords.iter().enumerate() {
            if pi == p {
                analytic[slot] += grad.data()[e].f64();
            }
        }
    }
    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for (slot, &(pi, e)) in coords.iter().enumerate() {
        let orig = probe.entry(pi).value.data()[e];
        let mut at = |v: T| -> Result<f64> {
            probe.entry_mut(pi).value.data_mut()[e] = v;
            let mut g = Graph::new();
            let y = f(&mut g, &probe)?;
            scalar(&g, y)
        };
        let up = at(orig + step)?;
        let down = at(orig - step)?;
        probe.entry_mut(pi).value.data_mut()[e] = orig;
        let numeric = (up - down) / (2.0 * step.f64());
        worst = worst.max(relative_error(analytic[slot], numeric));
    }
    Ok(worst)
}

/// Worst relative error per layer type on random inputs, plus the end-to-end
/// loss over sampled parameters of a small model.
pub fn suite(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut r = rng::stream(seed, "gradcheck");
    let mut rand = |shape: &[usize], scale: f64| -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let v = (0..n)
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut r);
                scale * e
            })
            .collect();
        Tensor::new(shape, v).expect("shape")
    };
    let step = 1e-5;
    let mut out = Vec::new();

    // Each check contracts the output with a fixed random tensor so every
    // component of the gradient is exercised.
    fn project(g: &mut Graph<f64>, y: Var, w: &Tensor<f64>) -> Result<Var> {
        let c = g.constant(w.clone());
        let p = g.mul(y, c)?;
        Ok(g.sum(p))
    }

    let (a, b, wp) = (rand(&[5, 4], 1.0), rand(&[4, 3], 1.0), rand(&[5, 3], 1.0));
    let bias = rand(&[3], 1.0);
    let err = grad_check(
        |g, x| {
            let bb = g.constant(b.clone());
            let m = g.matmul(x, bb)?;
            let c = g.constant(bias.clone());
            let y = g.add_row(m, c)?;
            project(g, y, &wp)
        },
        &a,
        step,
    )?;
    let err_w = grad_check(
        |g, w| {
            let aa = g.constant(a.clone());
            let y = g.matmul(aa, w)?;
            project(g, y, &wp)
        },
        &b,
        step,
    )?;
    out.push(("matmul", err.max(err_w)));

    let (x, wx) = (rand(&[6, 4], 1.0), rand(&[6, 4], 1.0));
    out.push(("elu", grad_check(|g, x| { let y = g.elu(x); project(g, y, &wx) }, &x, step)?));
    out.push(("sigmoid", grad_check(|g, x| { let y = g.sigmoid(x); project(g, y, &wx) }, &x, step)?));
    out.push(("square", grad_check(|g, x| { let y = g.square(x); project(g, y, &wx) }, &x, step)?));
    let den = rand(&[6, 4], 1.0).map(|v| v.abs() + 0.5);
    out.push((
        "divide",
        grad_check(
            |g, x| {
                let d = g.constant(den.clone());
                let y = g.div(d, x, 1e-6)?;
                project(g, y, &wx)
            },
            &den,
            step,
        )?,
    ));

    let (gain, lnb) = (rand(&[4], 1.0), rand(&[4], 1.0));
    out.push((
        "layer_norm",
        grad_check(
            |g, x| {
                let (ga, bi) = (g.constant(gain.clone()), g.constant(lnb.clone()));
                let y = g.layer_norm(x, ga, bi, 1e-5)?;
                project(g, y, &wx)
            },
            &x,
            step,
        )?,
    ));

    let (img, cw, cb, wc) = (rand(&[2, 5, 5, 2], 1.0), rand(&[3, 2, 3, 3], 0.5), rand(&[3], 0.1), rand(&[2, 5, 5, 3], 1.0));
    let e_x = grad_check(
        |g, x| {
            let (w, b) = (g.constant(cw.clone()), g.constant(cb.clone()));
            let y = g.conv2d(x, w, b)?;
            project(g, y, &wc)
        },
        &img,
        step,
    )?;
    let e_w = grad_check(
        |g, w| {
            let (x, b) = (g.constant(img.clone()), g.constant(cb.clone()));
            let y = g.conv2d(x, w, b)?;
            project(g, y, &wc)
        },
        &cw,
        step,
    )?;
    out.push(("conv2d", e_x.max(e_w)));

    let (tok, k1, w_gate) = (rand(&[6, 8], 1.0), rand(&[3], 0.5), rand(&[6, 8], 1.0));
    let gate_bias = rand(&[1], 0.1);
    out.push((
        "gating",
        grad_check(
            |g, x| {
                let m = g.group_mean(x, 2)?;
                let (w, b) = (g.constant(k1.clone()), g.constant(gate_bias.clone()));
                let c = g.channel_conv1d(m, w, b)?;
                let s = g.sigmoid(c);
                let y = g.group_scale(x, s, 2)?;
                project(g, y, &w_gate)
            },
            &tok,
            step,
        )?,
    ));

    let (qkv, wa) = (rand(&[8, 12], 1.0), rand(&[8, 4], 1.0));
    for (name, kind) in [
        ("la3_attention", AttentionKind::La3 { eps: 1e-6, bound: 1e4 }),
        ("softmax_attention", AttentionKind::Softmax),
    ] {
        let e = grad_check(
            |g, x| {
                let cols = |lo: usize| (0..8 * 4).map(move |i| (i / 4) * 12 + lo + i % 4).collect::<Vec<_>>();
                let q = g.gather(x, cols(0), &[8, 4])?;
                let k = g.gather(x, cols(4), &[8, 4])?;
                let v = g.gather(x, cols(8), &[8, 4])?;
                let y = g.attention(q, k, v, 2, 2, kind)?;
                project(g, y, &wa)
            },
            &qkv,
            step,
        )?;
        out.push((name, e));
    }

    let cfg = ModelConfig {
        image: 8,
        patch: 4,
        channels: 8,
        heads: 2,
        depth: 1,
        ..ModelConfig::default()
    };
    let mut store: ParamStore<f64> = model::init_params(&cfg, seed)?.cast();
    // Zero-initialized gates would hide their own gradients.
    for i in 0..store.len() {
        let e = store.entry_mut(i);
        if e.value.data().iter().all(|&v| v == 0.0) {
            let n = e.value.len();
            let fill = rand(&[n], 0.1);
            e.value.data_mut().copy_from_slice(fill.data());
        }
    }
    let batch = rand(&[2, 8, 8, 1], 0.15).map(|v| v + 0.5);
    let target = rand(&[2, 8, 8, 1], 0.1).map(|v| v + 0.5);
    let numel: Vec<usize> = (0..store.len()).map(|i| store.entry(i).value.len()).collect();
    let mut coords = Vec::with_capacity(20);
    let mut pick = rng::stream(seed, "gradcheck-coords");
    while coords.len() < 20 {
        let p = pick.random_range(0..numel.len());
        coords.push((p, pick.random_range(0..numel[p])));
    }
    let e2e = grad_check_params(&store, &coords, step, |g, s| {
        let x = g.constant(batch.clone());
        let st = model::forward_graph(g, s, &cfg, x, None)?;
        let t = g.constant(target.clone());
        let d = g.sub(st.recon, t)?;
        let sq = g.square(d);
        let recon = g.mean(sq);
        let za = g.slice_rows(st.z_out, 0, cfg.tokens())?;
        let zb = g.slice_rows(st.z_out, cfg.tokens(), cfg.tokens())?;
        let dz = g.sub(za, zb)?;
        let dsq = g.square(dz);
        let dir = g.mean(dsq);
        let dir = g.scale(dir, 0.1);
        g.add(recon, dir)
    })?;
    out.push(("end_to_end", e2e));
    Ok(out)
}
