//! Straight-line reimplementations of the fused forward passes, written
//! loop by loop from the layer definitions and sharing no code with the
//! library kernels.

#![allow(dead_code)]

use mtldrive::mgmi::{GateParams, GateUnit, ModalityFeatures};
use mtldrive::mts::{MtsBlockParams, StemParams, ViewSequence};
use mtldrive::nn::Conv;
use mtldrive::ssm::SsmParams;
use mtldrive::{ParamId, ParamStore64 as ParamStore, RunningStats, Tensor64 as Tensor};

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softplus(x: f64) -> f64 {
    (1.0 + x.exp()).ln()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn bins(len: usize, target: usize) -> Vec<(usize, usize)> {
    (0..target)
        .map(|i| (i * len / target, (i + 1) * len / target))
        .collect()
}

/// Adaptive average pooling of one `h × w` plane to `th × tw`.
fn adaptive(plane: &[f64], h: usize, w: usize, th: usize, tw: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for (y0, y1) in bins(h, th) {
        for (x0, x1) in bins(w, tw) {
            let mut s = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    s += plane[y * w + x];
                }
            }
            out.push(s / ((y1 - y0) * (x1 - x0)) as f64);
        }
    }
    out
}

/// Stem: per view, per frame, per colour depthwise filtering, per-frame
/// colour mixing, adaptive pooling, then interleaving frames and views.
pub fn stem(store: &ParamStore, sp: &StemParams, views: &[ViewSequence]) -> Vec<f64> {
    let (t, v) = (sp.frames, sp.views.len());
    let q = sp.channels / (t * v);
    let [oh, ow] = sp.out_hw;
    let mut out = vec![0.0; sp.channels * oh * ow];
    for (vi, (dw, pw)) in sp.convs.iter().enumerate() {
        let f = &views
            .iter()
            .find(|s| s.view == sp.views[vi])
            .unwrap()
            .frames;
        let (h, w) = (f.shape()[2], f.shape()[3]);
        let k = store.get(dw.weight).shape()[2];
        let stride = dw.stride[0];
        let pad = k / 2;
        let (dh, dwid) = (
            (h + 2 * pad - k) / stride + 1,
            (w + 2 * pad - k) / stride + 1,
        );
        let dwt = store.get(dw.weight);
        let dwb = store.get(dw.bias.unwrap());
        let pwt = store.get(pw.weight);
        let pwb = store.get(pw.bias.unwrap());
        for frame in 0..t {
            let mut filtered = vec![vec![0.0; dh * dwid]; 3];
            for col in 0..3 {
                let ch = frame * 3 + col;
                for i in 0..dh {
                    for j in 0..dwid {
                        let mut s = 0.0;
                        for u in 0..k {
                            for vv in 0..k {
                                let y = (i * stride + u) as isize - pad as isize;
                                let x = (j * stride + vv) as isize - pad as isize;
                                if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                                    s += dwt.at(&[ch, 0, u, vv])
                                        * f.at(&[frame, col, y as usize, x as usize]);
                                }
                            }
                        }
                        filtered[col][i * dwid + j] = s + dwb.at(&[ch]);
                    }
                }
            }
            for jj in 0..q {
                let oc = frame * q + jj;
                let mixed: Vec<f64> = (0..dh * dwid)
                    .map(|pix| {
                        (0..3)
                            .map(|col| pwt.at(&[oc, col, 0, 0]) * filtered[col][pix])
                            .sum::<f64>()
                            + pwb.at(&[oc])
                    })
                    .collect();
                let pooled = adaptive(&mixed, dh, dwid, oh, ow);
                let dst = frame * (q * v) + vi * q + jj;
                out[dst * oh * ow..(dst + 1) * oh * ow].copy_from_slice(&pooled);
            }
        }
    }
    out
}

/// Unrolled diagonal recurrence over the frame groups of `[T × G × L]` data
/// laid out flat, with per-step parameter rows `tau·G + g`.
fn recurrence(
    u: &[f64],
    [t, g, l]: [usize; 3],
    a: &[f64],
    b: &[f64],
    c: &[f64],
    d: &[f64],
    n: usize,
    backward: bool,
) -> Vec<f64> {
    let mut y = vec![0.0; u.len()];
    for gi in 0..g {
        for pix in 0..l {
            let mut hs = vec![0.0; n];
            for tau in 0..t {
                let frame = if backward { t - 1 - tau } else { tau };
                let row = tau * g + gi;
                let xv = u[(frame * g + gi) * l + pix];
                let mut o = d[row] * xv;
                for k in 0..n {
                    let decay = (-softplus(a[row * n + k])).exp();
                    hs[k] = decay * hs[k] + b[row * n + k] * xv;
                    o += c[row * n + k] * hs[k];
                }
                y[(frame * g + gi) * l + pix] = o;
            }
        }
    }
    y
}

/// Scan of `[T × G × L]` input; `backward` visits frames last to first.
pub fn scan(x: &Tensor, p: &SsmParams, backward: bool) -> Vec<f64> {
    let s = x.shape();
    recurrence(
        x.data(),
        [s[0], s[1], s[2]],
        p.a.data(),
        p.b.data(),
        p.c_mat.data(),
        p.d.data(),
        p.state(),
        backward,
    )
}

/// Channel gate `σ(D + A·1/√n + (B·Cᵀ)·1/√C)`.
pub fn gate(a: &[f64], b: &[f64], c: &[f64], d: &[f64], channels: usize, n: usize) -> Vec<f64> {
    let ds = 1.0 / (n as f64).sqrt();
    let dd = 1.0 / (channels as f64).sqrt();
    (0..channels)
        .map(|i| {
            let mut pre = d[i] + (0..n).map(|k| a[i * n + k] * ds).sum::<f64>();
            for j in 0..channels {
                pre += (0..n).map(|k| b[i * n + k] * c[j * n + k]).sum::<f64>() * dd;
            }
            sigmoid(pre)
        })
        .collect()
}

/// 1×1 convolution with bias on `[Cin × L]` data.
fn pointwise(store: &ParamStore, conv: &Conv, x: &[f64], cin: usize, len: usize) -> Vec<f64> {
    let w = store.get(conv.weight);
    let b = store.get(conv.bias.unwrap());
    let cout = w.shape()[0];
    let mut out = vec![0.0; cout * len];
    for o in 0..cout {
        for l in 0..len {
            out[o * len + l] = b.at(&[o])
                + (0..cin)
                    .map(|i| w.at(&[o, i, 0, 0]) * x[i * len + l])
                    .sum::<f64>();
        }
    }
    out
}

/// Dual-path block on one sample `[C × H × W]`.
pub fn mts_block(store: &ParamStore, bp: &MtsBlockParams, x: &Tensor) -> Vec<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let hw = h * w;
    let t = bp.frames;
    let g = c / t;
    let get = |id: ParamId| store.get(id).to_vec();
    let cw = get(bp.conv1d.weight);
    let cb = get(bp.conv1d.bias.unwrap())[0];
    let mut u = vec![0.0; c * hw];
    for ch in 0..c {
        for pix in 0..hw {
            let mut s = cb;
            for k in 0..3 {
                let src = ch as isize + k as isize - 1;
                if src >= 0 && (src as usize) < c {
                    s += cw[k] * x.data()[src as usize * hw + pix];
                }
            }
            u[ch * hw + pix] = gelu(s);
        }
    }
    let n = store.get(bp.a_fwd).shape()[1];
    let (bmat, cmat) = (get(bp.b), get(bp.c_mat));
    let (a_f, d_f) = (get(bp.a_fwd), get(bp.d_fwd));
    let sf = recurrence(&u, [t, g, hw], &a_f, &bmat, &cmat, &d_f, n, false);
    let sb = recurrence(
        &u,
        [t, g, hw],
        &get(bp.a_bwd.unwrap()),
        &bmat,
        &cmat,
        &get(bp.d_bwd.unwrap()),
        n,
        true,
    );
    let mut local = vec![0.0; c * hw];
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let (mut s, mut cnt) = (0.0, 0.0);
                for y in i.saturating_sub(1)..(i + 2).min(h) {
                    for xx in j.saturating_sub(1)..(j + 2).min(w) {
                        s += sf[ch * hw + y * w + xx];
                        cnt += 1.0;
                    }
                }
                local[ch * hw + i * w + j] = s / cnt;
            }
        }
    }
    let f_l = pointwise(store, &bp.local, &local, c, hw);
    let mut glob = vec![0.0; c * hw];
    for ch in 0..c {
        let pooled = adaptive(&sb[ch * hw..(ch + 1) * hw], h, w, bp.grid, bp.grid);
        for i in 0..h {
            for j in 0..w {
                glob[ch * hw + i * w + j] = pooled[(i * bp.grid / h) * bp.grid + j * bp.grid / w];
            }
        }
    }
    let f_g = pointwise(store, bp.global.as_ref().unwrap(), &glob, c, hw);
    let gate = gate(&a_f, &bmat, &cmat, &d_f, c, n);
    let z: Vec<f64> = (0..c * hw)
        .map(|i| gate[i / hw] * (f_l[i] + f_g[i]))
        .collect();
    let z = pointwise(store, &bp.out, &z, c, hw);
    let gamma = get(bp.gamma)[0];
    (0..c * hw).map(|i| x.data()[i] + gamma * z[i]).collect()
}

/// Shared features of one sample: channel attention over the concatenated
/// modality features.
pub fn shared_attention(store: &ParamStore, gp: &GateParams, m: &ModalityFeatures) -> Vec<f64> {
    let s = m.features[0].shape();
    let (c, l) = (s[0], s[1] * s[2]);
    let mc = m.features.len() * c;
    let x: Vec<f64> = m.features.iter().flat_map(|f| f.to_vec()).collect();
    let att = gp.attention.as_ref().unwrap();
    let q = pointwise(store, &att.q, &x, mc, l);
    let k = pointwise(store, &att.k, &x, mc, l);
    let v = pointwise(store, &att.v, &x, mc, l);
    let mut out = vec![0.0; c * l];
    for i in 0..c {
        let scores: Vec<f64> = (0..c)
            .map(|j| (0..l).map(|t| q[i * l + t] * k[j * l + t]).sum::<f64>() / (l as f64).sqrt())
            .collect();
        let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        for t in 0..l {
            out[i * l + t] = (0..c).map(|j| e[j] / z * v[j * l + t]).sum();
        }
    }
    out
}

/// Per-modality gates of one task unit, `[M·C × L]` flat.
pub fn task_gates(
    store: &ParamStore,
    running: &[RunningStats<f64>],
    unit: &GateUnit,
    shared: &[f64],
    c: usize,
    l: usize,
) -> Vec<f64> {
    let g = pointwise(store, &unit.conv, shared, c, l);
    let rs = &running[unit.norm.slot];
    let scale = store.get(unit.norm.scale);
    let shift = store.get(unit.norm.shift);
    (0..g.len())
        .map(|i| {
            let ch = i / l;
            let z = (g[i] - rs.mean[ch]) / (rs.var[ch] + unit.norm.eps).sqrt() * scale.at(&[ch])
                + shift.at(&[ch]);
            sigmoid(z)
        })
        .collect()
}

/// Fused features of one task for one sample: modality features weighted by
/// their gates and summed.
pub fn task_fuse(
    store: &ParamStore,
    running: &[RunningStats<f64>],
    unit: &GateUnit,
    m: &ModalityFeatures,
    shared: &[f64],
) -> Vec<f64> {
    let s = m.features[0].shape();
    let (c, l) = (s[0], s[1] * s[2]);
    let gate = task_gates(store, running, unit, shared, c, l);
    (0..c * l)
        .map(|i| {
            (0..m.features.len())
                .map(|mi| m.features[mi].data()[i] * gate[mi * c * l + i])
                .sum()
        })
        .collect()
}
