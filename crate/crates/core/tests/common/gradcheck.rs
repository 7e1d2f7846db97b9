//! Analytic-vs-numeric gradient comparisons for each tape op.
//!
//! The analytic side runs through `cyclet::nncore::Tape` in f32; the numeric
//! side is central differences (step `H`) of the f64 reference ops in
//! `oracle`. Each check returns the worst norm-wise relative error over all of
//! the op's differentiable inputs.

#![allow(dead_code)]

use cyclet::nncore::{GroupName, ParamSet, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::oracle::{self, dot, finite_diff, rel_err, widen};

pub const H: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;
pub const SEEDS: u64 = 20;

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
}

/// Values bounded away from zero so a step of `H` never crosses a ReLU kink.
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05f32..1.0);
            if rng.gen_bool(0.5) { m } else { -m }
        })
        .collect()
}

fn t(shape: &[usize], data: Vec<f32>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvFlavor {
    Dense2d,
    Depthwise,
    Pointwise,
}

pub fn check_conv(seed: u64, flavor: ConvFlavor) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0);
    let n = rng.gen_range(1..=2);
    let ci = rng.gen_range(1..=3);
    let h = rng.gen_range(3..=8);
    let w = rng.gen_range(3..=8);
    let (k, stride, pad, co) = match flavor {
        ConvFlavor::Pointwise => (1, 1, 0, rng.gen_range(1..=4)),
        ConvFlavor::Depthwise => (rng.gen_range(1..=3), rng.gen_range(1..=2), rng.gen_range(0..=1), ci),
        ConvFlavor::Dense2d => (rng.gen_range(1..=3), rng.gen_range(1..=2), rng.gen_range(0..=1), rng.gen_range(1..=4)),
    };
    let geom = oracle::Conv { n, ci, h, w, co, k, stride, pad, depthwise: flavor == ConvFlavor::Depthwise };
    let (ho, wo) = geom.out_hw();
    let x = uniform(&mut rng, n * ci * h * w);
    let wt = uniform(&mut rng, geom.weight_len());
    let b = uniform(&mut rng, co);
    let r = uniform(&mut rng, n * co * ho * wo);

    let mut ps = ParamSet::new();
    let w_shape = [co, if geom.depthwise { 1 } else { ci }, k, k];
    let wid = ps.register(GroupName::Backbone, "w", t(&w_shape, wt.clone()));
    let bid = ps.register(GroupName::Backbone, "b", t(&[co], b.clone()));
    let mut tape = Tape::new(&ps);
    let xv = tape.input_with_grad(t(&[n, ci, h, w], x.clone()));
    let (wv, bv) = (tape.param(wid), tape.param(bid));
    let y = match flavor {
        ConvFlavor::Dense2d => tape.conv2d(xv, wv, bv, stride, pad),
        ConvFlavor::Depthwise => tape.depthwise_conv2d(xv, wv, bv, stride, pad),
        ConvFlavor::Pointwise => tape.pointwise_conv(xv, wv, bv),
    }
    .unwrap();
    assert_eq!(tape.value(y).unwrap().shape(), &[n, co, ho, wo]);
    let grads = tape.backward_with_seed(y, t(&[n, co, ho, wo], r.clone())).unwrap();

    let (x64, w64, b64, r64) = (widen(&x), widen(&wt), widen(&b), widen(&r));
    let gx = finite_diff(&x64, H, |xx| dot(&oracle::conv(xx, &w64, &b64, &geom), &r64));
    let gw = finite_diff(&w64, H, |ww| dot(&oracle::conv(&x64, ww, &b64, &geom), &r64));
    let gb = finite_diff(&b64, H, |bb| dot(&oracle::conv(&x64, &w64, bb, &geom), &r64));
    [
        rel_err(grads.wrt(xv).unwrap().data(), &gx),
        rel_err(grads.get(wid).unwrap().data(), &gw),
        rel_err(grads.get(bid).unwrap().data(), &gb),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

pub fn check_dense(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xde);
    let (n, din, dout) = (rng.gen_range(1..=4), rng.gen_range(1..=8), rng.gen_range(1..=8));
    let x = uniform(&mut rng, n * din);
    let w = uniform(&mut rng, dout * din);
    let b = uniform(&mut rng, dout);
    let r = uniform(&mut rng, n * dout);
    let mut ps = ParamSet::new();
    let wid = ps.register(GroupName::Head, "w", t(&[dout, din], w.clone()));
    let bid = ps.register(GroupName::Head, "b", t(&[dout], b.clone()));
    let mut tape = Tape::new(&ps);
    let xv = tape.input_with_grad(t(&[n, din], x.clone()));
    let (wv, bv) = (tape.param(wid), tape.param(bid));
    let y = tape.dense(xv, wv, bv).unwrap();
    let grads = tape.backward_with_seed(y, t(&[n, dout], r.clone())).unwrap();
    let (x64, w64, b64, r64) = (widen(&x), widen(&w), widen(&b), widen(&r));
    let f = |xx: &[f64], ww: &[f64], bb: &[f64]| dot(&oracle::dense(xx, ww, bb, n, din, dout), &r64);
    [
        rel_err(grads.wrt(xv).unwrap().data(), &finite_diff(&x64, H, |v| f(v, &w64, &b64))),
        rel_err(grads.get(wid).unwrap().data(), &finite_diff(&w64, H, |v| f(&x64, v, &b64))),
        rel_err(grads.get(bid).unwrap().data(), &finite_diff(&b64, H, |v| f(&x64, &w64, v))),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

pub fn check_max_pool(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x3a);
    let (n, c) = (rng.gen_range(1..=2), rng.gen_range(1..=3));
    let k = rng.gen_range(2..=3);
    let stride = rng.gen_range(1..=2);
    let h = rng.gen_range(k..=8);
    let w = rng.gen_range(k..=8);
    let len = n * c * h * w;
    // Distinct values spaced 0.01 apart: a step of H never changes a window's argmax.
    let mut order: Vec<usize> = (0..len).collect();
    for i in (1..len).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let x: Vec<f32> = order.iter().map(|&o| o as f32 * 0.01 - 0.5).collect();
    let (ho, wo) = ((h - k) / stride + 1, (w - k) / stride + 1);
    let r = uniform(&mut rng, n * c * ho * wo);
    let ps = ParamSet::new();
    let mut tape = Tape::new(&ps);
    let xv = tape.input_with_grad(t(&[n, c, h, w], x.clone()));
    let y = tape.max_pool2d(xv, k, stride).unwrap();
    let grads = tape.backward_with_seed(y, t(&[n, c, ho, wo], r.clone())).unwrap();
    let r64 = widen(&r);
    let num = finite_diff(&widen(&x), H, |xx| dot(&oracle::max_pool(xx, n * c, h, w, k, stride), &r64));
    rel_err(grads.wrt(xv).unwrap().data(), &num)
}

pub fn check_global_avg_pool(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9a);
    let (n, c, h, w) = (rng.gen_range(1..=3), rng.gen_range(1..=4), rng.gen_range(1..=8), rng.gen_range(1..=8));
    let x = uniform(&mut rng, n * c * h * w);
    let r = uniform(&mut rng, n * c);
    let ps = ParamSet::new();
    let mut tape = Tape::new(&ps);
    let xv = tape.input_with_grad(t(&[n, c, h, w], x.clone()));
    let y = tape.global_avg_pool(xv).unwrap();
    let grads = tape.backward_with_seed(y, t(&[n, c], r.clone())).unwrap();
    let r64 = widen(&r);
    let num = finite_diff(&widen(&x), H, |xx| dot(&oracle::global_avg_pool(xx, n * c, h * w), &r64));
    rel_err(grads.wrt(xv).unwrap().data(), &num)
}

pub fn check_relu(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e);
    let len = rng.gen_range(1..=64);
    let x = away_from_zero(&mut rng, len);
    let r = uniform(&mut rng, len);
    let ps = ParamSet::new();
    let mut tape = Tape::new(&ps);
    let xv = tape.input_with_grad(t(&[len], x.clone()));
    let y = tape.relu(xv).unwrap();
    let grads = tape.backward_with_seed(y, t(&[len], r.clone())).unwrap();
    let r64 = widen(&r);
    let num = finite_diff(&widen(&x), H, |xx| dot(&oracle::relu(xx), &r64));
    rel_err(grads.wrt(xv).unwrap().data(), &num)
}

pub fn check_softmax(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x50);
    let (n, k) = (rng.gen_range(1..=4), rng.gen_range(2..=8));
    let x: Vec<f32> = uniform(&mut rng, n * k).iter().map(|v| v * 3.0).collect();
    let r = uniform(&mut rng, n * k);
    let ps = ParamSet::new();
    let mut tape = Tape::new(&ps);
    let xv = tape.input_with_grad(t(&[n, k], x.clone()));
    let y = tape.softmax(xv).unwrap();
    let grads = tape.backward_with_seed(y, t(&[n, k], r.clone())).unwrap();
    let r64 = widen(&r);
    let num = finite_diff(&widen(&x), H, |xx| dot(&oracle::softmax(xx, k), &r64));
    rel_err(grads.wrt(xv).unwrap().data(), &num)
}

pub fn check_softmax_cross_entropy(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xce);
    let (n, k) = (rng.gen_range(1..=6), rng.gen_range(2..=8));
    let z: Vec<f32> = uniform(&mut rng, n * k).iter().map(|v| v * 3.0).collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
    let ps = ParamSet::new();
    let mut tape = Tape::new(&ps);
    let zv = tape.input_with_grad(t(&[n, k], z.clone()));
    let loss = tape.softmax_cross_entropy(zv, &labels).unwrap();
    let grads = tape.backward(loss).unwrap();
    let num = finite_diff(&widen(&z), H, |zz| oracle::softmax_cross_entropy(zz, &labels, k));
    rel_err(grads.wrt(zv).unwrap().data(), &num)
}

/// dense -> relu -> dense -> softmax cross-entropy, gradients for every parameter.
pub fn check_mlp(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x11);
    let (n, din, hid, k) = (rng.gen_range(1..=4), rng.gen_range(2..=6), rng.gen_range(2..=8), rng.gen_range(2..=5));
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
    // Redraw until every hidden pre-activation is clear of the ReLU kink.
    let (x, w1, b1) = loop {
        let x = uniform(&mut rng, n * din);
        let w1 = uniform(&mut rng, hid * din);
        let b1 = uniform(&mut rng, hid);
        let pre = oracle::dense(&widen(&x), &widen(&w1), &widen(&b1), n, din, hid);
        if pre.iter().all(|v| v.abs() > 0.02) {
            break (x, w1, b1);
        }
    };
    let w2 = uniform(&mut rng, k * hid);
    let b2 = uniform(&mut rng, k);

    let mut ps = ParamSet::new();
    let ids = [
        ps.register(GroupName::Backbone, "w1", t(&[hid, din], w1.clone())),
        ps.register(GroupName::Backbone, "b1", t(&[hid], b1.clone())),
        ps.register(GroupName::Head, "w2", t(&[k, hid], w2.clone())),
        ps.register(GroupName::Head, "b2", t(&[k], b2.clone())),
    ];
    let mut tape = Tape::new(&ps);
    let xv = tape.input(t(&[n, din], x.clone()));
    let p: Vec<_> = ids.iter().map(|&id| tape.param(id)).collect();
    let h1 = tape.dense(xv, p[0], p[1]).unwrap();
    let a1 = tape.relu(h1).unwrap();
    let z = tape.dense(a1, p[2], p[3]).unwrap();
    let loss = tape.softmax_cross_entropy(z, &labels).unwrap();
    let grads = tape.backward(loss).unwrap();

    let x64 = widen(&x);
    let theta: Vec<Vec<f64>> = [&w1, &b1, &w2, &b2].iter().map(|v| widen(v)).collect();
    let f = |th: &[Vec<f64>]| {
        let a = oracle::relu(&oracle::dense(&x64, &th[0], &th[1], n, din, hid));
        oracle::softmax_cross_entropy(&oracle::dense(&a, &th[2], &th[3], n, hid, k), &labels, k)
    };
    let mut worst: f64 = 0.0;
    for (slot, &id) in ids.iter().enumerate() {
        let num = finite_diff(&theta[slot], H, |v| {
            let mut th = theta.clone();
            th[slot] = v.to_vec();
            f(&th)
        });
        worst = worst.max(rel_err(grads.get(id).unwrap().data(), &num));
    }
    worst
}

/// Worst relative error per op over `SEEDS` random instances.
pub fn all_ops() -> Vec<(&'static str, f64)> {
    type Check = fn(u64) -> f64;
    let checks: [(&str, Check); 10] = [
        ("dense", check_dense),
        ("conv2d", |s| check_conv(s, ConvFlavor::Dense2d)),
        ("depthwise_conv2d", |s| check_conv(s, ConvFlavor::Depthwise)),
        ("pointwise_conv", |s| check_conv(s, ConvFlavor::Pointwise)),
        ("max_pool2d", check_max_pool),
        ("global_avg_pool", check_global_avg_pool),
        ("relu", check_relu),
        ("softmax", check_softmax),
        ("softmax_cross_entropy", check_softmax_cross_entropy),
        ("mlp", check_mlp),
    ];
    checks
        .iter()
        .map(|(name, f)| (*name, (0..SEEDS).map(f).fold(0.0, f64::max)))
        .collect()
}
