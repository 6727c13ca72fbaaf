//! Slice-level forward and backward kernels used by the tape.
//!
//! Everything here works on flat row-major buffers with explicit geometry, so
//! the kernels stay independent of the autodiff bookkeeping.

use crate::scalar::{lit, Scalar};

/// `c[m×p] = a[m×k] · b[k×p]`.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, p: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * p];
    matmul_into(a, b, &mut c, m, k, p);
    c
}

/// Accumulating `c += a · b`, i-k-j order.
pub fn matmul_into<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let crow = &mut c[i * p..(i + 1) * p];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == T::zero() {
                continue;
            }
            let brow = &b[kk * p..(kk + 1) * p];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// `c += a · bᵀ` with `a[m×p]`, `b[k×p]`, `c[m×k]`.
pub fn matmul_bt_into<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, p: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * p..(i + 1) * p];
        for j in 0..k {
            let brow = &b[j * p..(j + 1) * p];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s = s + x * y;
            }
            c[i * k + j] = c[i * k + j] + s;
        }
    }
}

/// `c += aᵀ · b` with `a[m×k]`, `b[m×p]`, `c[k×p]`.
pub fn matmul_at_into<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let brow = &b[i * p..(i + 1) * p];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[kk * p..(kk + 1) * p];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Geometry of a grouped convolution over three spatial axes. Lower-rank
/// convolutions use leading size-1 axes with unit kernel and zero padding.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub groups: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    fn in_len(&self) -> usize {
        self.input.iter().product()
    }

    fn out_len(&self) -> usize {
        self.output.iter().product()
    }

    fn k_len(&self) -> usize {
        self.kernel.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.groups == 1
            && self.kernel == [1, 1, 1]
            && self.stride == [1, 1, 1]
            && self.pad == [0, 0, 0]
    }

    /// Input coordinate along `axis` for output index `o` and kernel tap `k`.
    #[inline]
    fn src(&self, axis: usize, o: usize, k: usize) -> Option<usize> {
        let pos = (o * self.stride[axis] + k) as isize - self.pad[axis] as isize;
        (pos >= 0 && (pos as usize) < self.input[axis]).then_some(pos as usize)
    }
}

/// Cross-correlation. `w` is `[cout × cin/groups × kd × kh × kw]`.
pub fn conv_forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let (il, ol, kl) = (g.in_len(), g.out_len(), g.k_len());
    let mut out = vec![T::zero(); g.batch * g.cout * ol];
    if g.is_pointwise() {
        for n in 0..g.batch {
            matmul_into(
                w,
                &x[n * g.cin * il..(n + 1) * g.cin * il],
                &mut out[n * g.cout * ol..(n + 1) * g.cout * ol],
                g.cout,
                g.cin,
                ol,
            );
        }
    } else {
        let cin_g = g.cin / g.groups;
        let cout_g = g.cout / g.groups;
        for n in 0..g.batch {
            for co in 0..g.cout {
                let grp = co / cout_g;
                let obase = (n * g.cout + co) * ol;
                for ci in 0..cin_g {
                    let cidx = grp * cin_g + ci;
                    let xbase = (n * g.cin + cidx) * il;
                    let wbase = (co * cin_g + ci) * kl;
                    for kd in 0..g.kernel[0] {
                        for kh in 0..g.kernel[1] {
                            for kw in 0..g.kernel[2] {
                                let wv = w[wbase + (kd * g.kernel[1] + kh) * g.kernel[2] + kw];
                                for od in 0..g.output[0] {
                                    let Some(id) = g.src(0, od, kd) else { continue };
                                    for oh in 0..g.output[1] {
                                        let Some(ih) = g.src(1, oh, kh) else { continue };
                                        let orow = obase + (od * g.output[1] + oh) * g.output[2];
                                        let irow = xbase + (id * g.input[1] + ih) * g.input[2];
                                        for ow in 0..g.output[2] {
                                            if let Some(iw) = g.src(2, ow, kw) {
                                                out[orow + ow] = out[orow + ow] + wv * x[irow + iw];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(b) = bias {
        for n in 0..g.batch {
            for co in 0..g.cout {
                let base = (n * g.cout + co) * ol;
                for v in &mut out[base..base + ol] {
                    *v = *v + b[co];
                }
            }
        }
    }
    out
}

/// Gradients of `conv_forward` with respect to input, weight and bias.
pub fn conv_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    gout: &[T],
    g: &ConvGeom,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (il, ol, kl) = (g.in_len(), g.out_len(), g.k_len());
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); w.len()];
    let mut gb = vec![T::zero(); g.cout];
    for n in 0..g.batch {
        for co in 0..g.cout {
            let base = (n * g.cout + co) * ol;
            gb[co] = gb[co] + gout[base..base + ol].iter().copied().sum();
        }
    }
    if g.is_pointwise() {
        for n in 0..g.batch {
            let xs = &x[n * g.cin * il..(n + 1) * g.cin * il];
            let gs = &gout[n * g.cout * ol..(n + 1) * g.cout * ol];
            // gw[cout×cin] += gout[cout×L] · xᵀ
            matmul_bt_into(gs, xs, &mut gw, g.cout, ol, g.cin);
            // gx[cin×L] += wᵀ · gout
            matmul_at_into(
                w,
                gs,
                &mut gx[n * g.cin * il..(n + 1) * g.cin * il],
                g.cout,
                g.cin,
                ol,
            );
        }
        return (gx, gw, gb);
    }
    let cin_g = g.cin / g.groups;
    let cout_g = g.cout / g.groups;
    for n in 0..g.batch {
        for co in 0..g.cout {
            let grp = co / cout_g;
            let obase = (n * g.cout + co) * ol;
            for ci in 0..cin_g {
                let cidx = grp * cin_g + ci;
                let xbase = (n * g.cin + cidx) * il;
                let wbase = (co * cin_g + ci) * kl;
                for kd in 0..g.kernel[0] {
                    for kh in 0..g.kernel[1] {
                        for kw in 0..g.kernel[2] {
                            let widx = wbase + (kd * g.kernel[1] + kh) * g.kernel[2] + kw;
                            let wv = w[widx];
                            let mut acc = T::zero();
                            for od in 0..g.output[0] {
                                let Some(id) = g.src(0, od, kd) else { continue };
                                for oh in 0..g.output[1] {
                                    let Some(ih) = g.src(1, oh, kh) else { continue };
                                    let orow = obase + (od * g.output[1] + oh) * g.output[2];
                                    let irow = xbase + (id * g.input[1] + ih) * g.input[2];
                                    for ow in 0..g.output[2] {
                                        if let Some(iw) = g.src(2, ow, kw) {
                                            let go = gout[orow + ow];
                                            acc = acc + go * x[irow + iw];
                                            gx[irow + iw] = gx[irow + iw] + go * wv;
                                        }
                                    }
                                }
                            }
                            gw[widx] = gw[widx] + acc;
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Separable box-averaging plan over up to three trailing spatial axes.
///
/// Each output index on each axis averages a contiguous input range; fixed
/// windows (clipped to the valid region) and adaptive bins share this form.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolPlan {
    pub outer: usize,
    pub input: [usize; 3],
    pub ranges: [Vec<(usize, usize)>; 3],
}

impl PoolPlan {
    pub fn output(&self) -> [usize; 3] {
        [
            self.ranges[0].len(),
            self.ranges[1].len(),
            self.ranges[2].len(),
        ]
    }

    /// Fixed window; padded positions are excluded from the divisor.
    pub fn fixed_axis(input: usize, k: usize, stride: usize, pad: usize) -> Vec<(usize, usize)> {
        let out = (input + 2 * pad - k) / stride + 1;
        (0..out)
            .map(|o| {
                let start = (o * stride) as isize - pad as isize;
                let end = start + k as isize;
                (start.max(0) as usize, (end.min(input as isize)) as usize)
            })
            .collect()
    }

    /// Bin `i` covers `[floor(i·L/t), floor((i+1)·L/t))`.
    pub fn adaptive_axis(input: usize, target: usize) -> Vec<(usize, usize)> {
        (0..target)
            .map(|i| (i * input / target, (i + 1) * input / target))
            .collect()
    }
}

pub fn pool_forward<T: Scalar>(x: &[T], p: &PoolPlan) -> Vec<T> {
    let il: usize = p.input.iter().product();
    let o = p.output();
    let ol: usize = o.iter().product();
    let mut out = vec![T::zero(); p.outer * ol];
    for b in 0..p.outer {
        let xb = &x[b * il..(b + 1) * il];
        for (od, &(d0, d1)) in p.ranges[0].iter().enumerate() {
            for (oh, &(h0, h1)) in p.ranges[1].iter().enumerate() {
                for (ow, &(w0, w1)) in p.ranges[2].iter().enumerate() {
                    let mut s = T::zero();
                    for d in d0..d1 {
                        for h in h0..h1 {
                            let row = (d * p.input[1] + h) * p.input[2];
                            for w in w0..w1 {
                                s = s + xb[row + w];
                            }
                        }
                    }
                    let count = (d1 - d0) * (h1 - h0) * (w1 - w0);
                    out[b * ol + (od * o[1] + oh) * o[2] + ow] = s / T::from_usize_lossy(count);
                }
            }
        }
    }
    out
}

pub fn pool_backward<T: Scalar>(gout: &[T], p: &PoolPlan) -> Vec<T> {
    let il: usize = p.input.iter().product();
    let o = p.output();
    let ol: usize = o.iter().product();
    let mut gx = vec![T::zero(); p.outer * il];
    for b in 0..p.outer {
        for (od, &(d0, d1)) in p.ranges[0].iter().enumerate() {
            for (oh, &(h0, h1)) in p.ranges[1].iter().enumerate() {
                for (ow, &(w0, w1)) in p.ranges[2].iter().enumerate() {
                    let count = (d1 - d0) * (h1 - h0) * (w1 - w0);
                    let g =
                        gout[b * ol + (od * o[1] + oh) * o[2] + ow] / T::from_usize_lossy(count);
                    for d in d0..d1 {
                        for h in h0..h1 {
                            let row = b * il + (d * p.input[1] + h) * p.input[2];
                            for w in w0..w1 {
                                gx[row + w] = gx[row + w] + g;
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Nearest-neighbour index maps over up to three trailing axes:
/// output index `i` reads input `floor(i·in/out)`.
#[derive(Clone, Debug, PartialEq)]
pub struct UpsamplePlan {
    pub outer: usize,
    pub input: [usize; 3],
    pub maps: [Vec<usize>; 3],
}

impl UpsamplePlan {
    pub fn axis(input: usize, output: usize) -> Vec<usize> {
        (0..output).map(|i| i * input / output).collect()
    }

    pub fn output(&self) -> [usize; 3] {
        [self.maps[0].len(), self.maps[1].len(), self.maps[2].len()]
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let il: usize = self.input.iter().product();
        let o = self.output();
        let ol: usize = o.iter().product();
        for b in 0..self.outer {
            for (od, &d) in self.maps[0].iter().enumerate() {
                for (oh, &h) in self.maps[1].iter().enumerate() {
                    for (ow, &w) in self.maps[2].iter().enumerate() {
                        f(
                            b * ol + (od * o[1] + oh) * o[2] + ow,
                            b * il + (d * self.input[1] + h) * self.input[2] + w,
                        );
                    }
                }
            }
        }
    }
}

pub fn upsample_forward<T: Scalar>(x: &[T], p: &UpsamplePlan) -> Vec<T> {
    let ol: usize = p.output().iter().product();
    let mut out = vec![T::zero(); p.outer * ol];
    p.for_each(|o, i| out[o] = x[i]);
    out
}

pub fn upsample_backward<T: Scalar>(gout: &[T], p: &UpsamplePlan) -> Vec<T> {
    let il: usize = p.input.iter().product();
    let mut gx = vec![T::zero(); p.outer * il];
    p.for_each(|o, i| gx[i] = gx[i] + gout[o]);
    gx
}

#[inline]
pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn softplus<T: Scalar>(v: T) -> T {
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}

#[inline]
pub fn std_normal_cdf<T: Scalar>(v: T) -> T {
    lit::<T>(0.5) * (T::one() + (v / lit::<T>(std::f64::consts::SQRT_2)).erf())
}

#[inline]
pub fn std_normal_pdf<T: Scalar>(v: T) -> T {
    lit::<T>(1.0 / (2.0 * std::f64::consts::PI).sqrt()) * (lit::<T>(-0.5) * v * v).exp()
}

/// Exact GELU, `x·Φ(x)`.
#[inline]
pub fn gelu<T: Scalar>(v: T) -> T {
    v * std_normal_cdf(v)
}

#[inline]
pub fn gelu_grad<T: Scalar>(v: T) -> T {
    std_normal_cdf(v) + v * std_normal_pdf(v)
}

/// Softmax along the middle axis of an `[outer × len × inner]` view.
pub fn softmax<T: Scalar>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let mut m = T::neg_infinity();
            for j in 0..len {
                m = m.max(x[idx(j)]);
            }
            let mut s = T::zero();
            for j in 0..len {
                let e = (x[idx(j)] - m).exp();
                out[idx(j)] = e;
                s = s + e;
            }
            for j in 0..len {
                out[idx(j)] = out[idx(j)] / s;
            }
        }
    }
    out
}

pub fn softmax_backward<T: Scalar>(
    y: &[T],
    gy: &[T],
    outer: usize,
    len: usize,
    inner: usize,
) -> Vec<T> {
    let mut gx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let dot: T = (0..len).map(|j| y[idx(j)] * gy[idx(j)]).sum();
            for j in 0..len {
                gx[idx(j)] = y[idx(j)] * (gy[idx(j)] - dot);
            }
        }
    }
    gx
}

/// Per-channel statistics over an `[N × C × R]` view (biased variance).
pub fn channel_stats<T: Scalar>(x: &[T], n: usize, c: usize, r: usize) -> (Vec<T>, Vec<T>) {
    let count = T::from_usize_lossy(n * r);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            let base = (b * c + ch) * r;
            s = s + x[base..base + r].iter().copied().sum();
        }
        let m = s / count;
        let mut v = T::zero();
        for b in 0..n {
            let base = (b * c + ch) * r;
            for &xv in &x[base..base + r] {
                v = v + (xv - m) * (xv - m);
            }
        }
        mean[ch] = m;
        var[ch] = v / count;
    }
    (mean, var)
}

/// Geometry of the diagonal linear state-space scan.
///
/// The input is viewed as `[batch × steps × groups × positions]`; the
/// parameters as `[steps × groups × state]` (`d`: `[steps × groups]`), so each
/// scan step has its own parameter slice.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScanGeom {
    pub batch: usize,
    pub steps: usize,
    pub groups: usize,
    pub positions: usize,
    pub state: usize,
    pub reverse: bool,
}

impl ScanGeom {
    #[inline]
    fn input_step(&self, tau: usize) -> usize {
        if self.reverse {
            self.steps - 1 - tau
        } else {
            tau
        }
    }

    #[inline]
    fn x_index(&self, n: usize, t: usize, g: usize, l: usize) -> usize {
        ((n * self.steps + t) * self.groups + g) * self.positions + l
    }

    #[inline]
    fn h_index(&self, n: usize, tau: usize, g: usize, l: usize) -> usize {
        self.x_index(n, tau, g, l) * self.state
    }
}

/// `h_τ = exp(a_τ)⊙h_{τ−1} + b_τ·x_τ`, `y_τ = ⟨c_τ, h_τ⟩ + d_τ·x_τ`, with
/// `τ` running over time in ascending order, or descending when `reverse`.
/// Returns `y` and, when `keep_states`, every hidden state (for backward).
pub fn scan_forward<T: Scalar>(
    x: &[T],
    log_decay: &[T],
    b: &[T],
    c: &[T],
    d: &[T],
    geom: &ScanGeom,
    keep_states: bool,
) -> (Vec<T>, Vec<T>) {
    let s = geom.state;
    let decay: Vec<T> = log_decay.iter().map(|v| v.exp()).collect();
    let mut y = vec![T::zero(); x.len()];
    let mut states = if keep_states {
        vec![T::zero(); x.len() * s]
    } else {
        Vec::new()
    };
    let mut h = vec![T::zero(); s];
    for n in 0..geom.batch {
        for g in 0..geom.groups {
            for l in 0..geom.positions {
                h.iter_mut().for_each(|v| *v = T::zero());
                for tau in 0..geom.steps {
                    let t = geom.input_step(tau);
                    let xi = geom.x_index(n, t, g, l);
                    let xv = x[xi];
                    let pbase = (tau * geom.groups + g) * s;
                    let mut acc = d[tau * geom.groups + g] * xv;
                    for k in 0..s {
                        h[k] = decay[pbase + k] * h[k] + b[pbase + k] * xv;
                        acc = acc + c[pbase + k] * h[k];
                    }
                    y[xi] = acc;
                    if keep_states {
                        let hb = geom.h_index(n, tau, g, l);
                        states[hb..hb + s].copy_from_slice(&h);
                    }
                }
            }
        }
    }
    (y, states)
}

pub struct ScanGrads<T> {
    pub x: Vec<T>,
    pub log_decay: Vec<T>,
    pub b: Vec<T>,
    pub c: Vec<T>,
    pub d: Vec<T>,
}

#[allow(clippy::too_many_arguments)]
pub fn scan_backward<T: Scalar>(
    x: &[T],
    log_decay: &[T],
    b: &[T],
    c: &[T],
    d: &[T],
    states: &[T],
    gy: &[T],
    geom: &ScanGeom,
) -> ScanGrads<T> {
    let s = geom.state;
    let decay: Vec<T> = log_decay.iter().map(|v| v.exp()).collect();
    let mut gr = ScanGrads {
        x: vec![T::zero(); x.len()],
        log_decay: vec![T::zero(); log_decay.len()],
        b: vec![T::zero(); b.len()],
        c: vec![T::zero(); c.len()],
        d: vec![T::zero(); d.len()],
    };
    let mut carry = vec![T::zero(); s];
    for n in 0..geom.batch {
        for g in 0..geom.groups {
            for l in 0..geom.positions {
                carry.iter_mut().for_each(|v| *v = T::zero());
                for tau in (0..geom.steps).rev() {
                    let t = geom.input_step(tau);
                    let xi = geom.x_index(n, t, g, l);
                    let xv = x[xi];
                    let gyv = gy[xi];
                    let pbase = (tau * geom.groups + g) * s;
                    let hb = geom.h_index(n, tau, g, l);
                    let dix = tau * geom.groups + g;
                    gr.d[dix] = gr.d[dix] + gyv * xv;
                    let mut gx = d[dix] * gyv;
                    for k in 0..s {
                        let h = states[hb + k];
                        let gh = c[pbase + k] * gyv + carry[k];
                        gr.c[pbase + k] = gr.c[pbase + k] + gyv * h;
                        gr.b[pbase + k] = gr.b[pbase + k] + gh * xv;
                        gx = gx + b[pbase + k] * gh;
                        let prev = if tau > 0 {
                            states[geom.h_index(n, tau - 1, g, l) + k]
                        } else {
                            T::zero()
                        };
                        gr.log_decay[pbase + k] =
                            gr.log_decay[pbase + k] + gh * prev * decay[pbase + k];
                        carry[k] = decay[pbase + k] * gh;
                    }
                    gr.x[xi] = gr.x[xi] + gx;
                }
            }
        }
    }
    gr
}
