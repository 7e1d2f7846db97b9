//! 64-bit reference implementations of every differentiable op, written as
//! plain nested loops with no shared code from the crate, plus a central
//! finite-difference driver.

#![allow(dead_code, clippy::too_many_arguments)]

/// `x [n, din]`, `w [dout, din]`, `b [dout]`.
pub fn dense(x: &[f64], w: &[f64], b: &[f64], n: usize, din: usize, dout: usize) -> Vec<f64> {
    let mut y = vec![0.0; n * dout];
    for i in 0..n {
        for o in 0..dout {
            let mut s = b[o];
            for j in 0..din {
                s += x[i * din + j] * w[o * din + j];
            }
            y[i * dout + o] = s;
        }
    }
    y
}

#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub n: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub depthwise: bool,
}

impl Conv {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    pub fn weight_len(&self) -> usize {
        let per = if self.depthwise { 1 } else { self.ci };
        self.co * per * self.k * self.k
    }
}

/// Direct convolution with zero padding; depthwise when `c.depthwise`.
pub fn conv(x: &[f64], wt: &[f64], b: &[f64], c: &Conv) -> Vec<f64> {
    let (ho, wo) = c.out_hw();
    let mut y = vec![0.0; c.n * c.co * ho * wo];
    for n in 0..c.n {
        for o in 0..c.co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = b[o];
                    let chans: Vec<usize> = if c.depthwise { vec![o] } else { (0..c.ci).collect() };
                    for (ci_local, &ch) in chans.iter().enumerate() {
                        for ky in 0..c.k {
                            for kx in 0..c.k {
                                let iy = (oy * c.stride + ky) as isize - c.pad as isize;
                                let ix = (ox * c.stride + kx) as isize - c.pad as isize;
                                if iy < 0 || ix < 0 || iy >= c.h as isize || ix >= c.w as isize {
                                    continue;
                                }
                                let xv = x[((n * c.ci + ch) * c.h + iy as usize) * c.w + ix as usize];
                                let widx = if c.depthwise {
                                    (o * c.k + ky) * c.k + kx
                                } else {
                                    ((o * c.ci + ci_local) * c.k + ky) * c.k + kx
                                };
                                s += xv * wt[widx];
                            }
                        }
                    }
                    y[((n * c.co + o) * ho + oy) * wo + ox] = s;
                }
            }
        }
    }
    y
}

pub fn max_pool(x: &[f64], planes: usize, h: usize, w: usize, k: usize, s: usize) -> Vec<f64> {
    let (ho, wo) = ((h - k) / s + 1, (w - k) / s + 1);
    let mut y = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut m = f64::NEG_INFINITY;
                for ky in 0..k {
                    for kx in 0..k {
                        m = m.max(x[(p * h + oy * s + ky) * w + ox * s + kx]);
                    }
                }
                y.push(m);
            }
        }
    }
    y
}

pub fn global_avg_pool(x: &[f64], planes: usize, hw: usize) -> Vec<f64> {
    (0..planes).map(|p| x[p * hw..(p + 1) * hw].iter().sum::<f64>() / hw as f64).collect()
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

pub fn softmax(x: &[f64], k: usize) -> Vec<f64> {
    let mut y = Vec::with_capacity(x.len());
    for row in x.chunks(k) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        y.extend(e.iter().map(|v| v / s));
    }
    y
}

/// Mean negative log-likelihood.
pub fn softmax_cross_entropy(z: &[f64], labels: &[usize], k: usize) -> f64 {
    let p = softmax(z, k);
    labels.iter().enumerate().map(|(i, &y)| -p[i * k + y].ln()).sum::<f64>() / labels.len() as f64
}

/// Central differences of a scalar function with respect to every coordinate of `x`.
pub fn finite_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|)` (zero when both vanish).
pub fn rel_err(analytic: &[f32], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&a, &b) in analytic.iter().zip(numeric) {
        let a = a as f64;
        diff += (a - b) * (a - b);
        na += a * a;
        nb += b * b;
    }
    let scale = na.sqrt().max(nb.sqrt());
    if scale < 1e-12 {
        0.0
    } else {
        diff.sqrt() / scale
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn widen(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

/// Pseudo-label decision on a probability vector given in exact integer
/// units (`counts[c] / total`), against a threshold `tau_units / total`.
/// Returns the lowest index holding the maximum when it meets the threshold.
pub fn pseudo_label_units(counts: &[u32], tau_units: u32) -> Option<usize> {
    let mut best = 0;
    for c in 1..counts.len() {
        if counts[c] > counts[best] {
            best = c;
        }
    }
    (counts[best] >= tau_units).then_some(best)
}

/// Top-k membership by explicit ranking: sort classes by descending
/// probability, ties by ascending index, and look for the label among the
/// first `k`.
pub fn in_top_k_sorted(row: &[f32], label: usize, k: usize) -> bool {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
    idx[..k].contains(&label)
}

pub fn topk_sorted(probs: &[f32], k_classes: usize, labels: &[usize], k: usize) -> f64 {
    let hits = probs.chunks(k_classes).zip(labels).filter(|(row, &y)| in_top_k_sorted(row, y, k)).count();
    hits as f64 / labels.len() as f64
}

/// Step decay computed by repeated multiplication.
pub fn step_decay(lr0: f64, factor: f64, period: u32, epoch: u32) -> f64 {
    let mut lr = lr0;
    for _ in 0..epoch / period {
        lr *= factor;
    }
    lr
}

/// Composite score from percentages: `2 (top1% + top3%) / 100 / (C runtime)`.
pub fn score_from_percent(top1_pct: f64, top3_pct: f64, runtime_ms: f64, c: f64) -> f64 {
    let sum = (top1_pct + top3_pct) / 100.0;
    sum * 2.0 / c / runtime_ms
}
