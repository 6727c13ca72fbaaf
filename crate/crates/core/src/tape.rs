//! Tape-based reverse-mode automatic differentiation.
//!
//! Every primitive appends one node holding its output value and whatever it
//! needs for the backward pass. Nodes are appended in execution order, so the
//! tape is topologically sorted by construction and `backward` is a single
//! reverse sweep.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, PoolPlan, ScanGeom, UpsamplePlan};
use crate::params::{ParamId, ParamStore};
use crate::scalar::{lit, Scalar};
use crate::tensor::{numel, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvKind {
    D1,
    D2,
    D3,
    /// One kernel per channel, `[C × 1 × kh × kw]`.
    Depthwise2d,
}

impl ConvKind {
    pub fn spatial_rank(self) -> usize {
        match self {
            ConvKind::D1 => 1,
            ConvKind::D2 | ConvKind::Depthwise2d => 2,
            ConvKind::D3 => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PoolKind {
    /// Window average; padded cells are excluded from the divisor.
    AvgFixed {
        kernel: Vec<usize>,
        stride: Vec<usize>,
        pad: Vec<usize>,
    },
    /// Contiguous-bin average to a target size per pooled axis.
    AvgAdaptive { target: Vec<usize> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Gelu,
    Softplus,
    Softmax { axis: usize },
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Running mean/variance of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub momentum: T,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            momentum: lit(0.1),
        }
    }

    pub fn update(&mut self, stats: &BatchStats<T>) {
        let m = self.momentum;
        for (r, &b) in self.mean.iter_mut().zip(&stats.mean) {
            *r = (T::one() - m) * *r + m * b;
        }
        for (r, &b) in self.var.iter_mut().zip(&stats.var) {
            *r = (T::one() - m) * *r + m * b;
        }
    }

    pub fn cast<U: Scalar>(&self) -> RunningStats<U> {
        let c = |v: &Vec<T>| {
            v.iter()
                .map(|x| U::from_f64_lossy(x.to_f64_lossy()))
                .collect()
        };
        RunningStats {
            mean: c(&self.mean),
            var: c(&self.var),
            momentum: U::from_f64_lossy(self.momentum.to_f64_lossy()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a, T> {
    Train,
    Eval(&'a RunningStats<T>),
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MulScalar(Var, Var),
    ScaleChannels {
        x: Var,
        g: Var,
        c: usize,
        inner: usize,
    },
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        p: usize,
    },
    Transpose {
        x: Var,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        chunks: Vec<usize>,
    },
    Slice {
        x: Var,
        outer: usize,
        in_chunk: usize,
        start: usize,
        len: usize,
    },
    Conv {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Pool {
        x: Var,
        plan: PoolPlan,
    },
    Upsample {
        x: Var,
        plan: UpsamplePlan,
    },
    Sigmoid(Var),
    Gelu(Var),
    Softplus(Var),
    Neg(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    BatchNorm {
        x: Var,
        scale: Var,
        shift: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
        n: usize,
        c: usize,
        r: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        fan_in: usize,
        fan_out: usize,
    },
    Sum(Var),
    Dot {
        x: Var,
        w: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
        k: usize,
    },
    Scan {
        x: Var,
        a: Var,
        b: Var,
        c: Var,
        d: Var,
        geom: ScanGeom,
        states: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records primitive operations for one forward pass.
#[derive(Debug)]
pub struct Tape<T: Scalar = f64> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn expand(values: &[usize], rank: usize, what: &str) -> Result<Vec<usize>> {
    match values.len() {
        1 => Ok(vec![values[0]; rank]),
        n if n == rank => Ok(values.to_vec()),
        n => Err(Error::Argument(format!(
            "{what}: expected 1 or {rank} values, got {n}"
        ))),
    }
}

/// Left-pad per-axis values to three axes.
fn pad3(values: &[usize], fill: usize) -> [usize; 3] {
    let mut out = [fill; 3];
    out[3 - values.len()..].copy_from_slice(values);
    out
}

impl<T: Scalar> Tape<T> {
    /// A tape that records gradients.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            params: HashMap::new(),
        }
    }

    /// A tape for inference: nothing requires grad and no backward state is kept.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn out(shape: &[usize], data: Vec<T>) -> Tensor<T> {
        Tensor::from_parts(shape.to_vec(), data.into())
    }

    /// Input tensor; tracked when `t.requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad;
        let mut t = t;
        t.grad = None;
        self.push(t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let mut t = t;
        t.grad = None;
        self.push(t, Op::Leaf, false)
    }

    /// Bind a parameter, reusing the same node on repeated calls.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let mut t = store.get(id).clone();
        t.grad = None;
        let v = self.push(t, Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Vec<T> {
        self.value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = Self::out(self.shape(a), self.zip(a, b, |x, y| x + y));
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = Self::out(self.shape(a), self.zip(a, b, |x, y| x - y));
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = Self::out(self.shape(a), self.zip(a, b, |x, y| x * y));
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    /// Multiply by a fixed constant.
    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let v = self.value(x).map(|e| e * factor);
        let rg = self.any_grad(&[x]);
        self.push(v, Op::Scale(x, factor), rg)
    }

    /// Multiply by a one-element tensor on the tape.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::dim("mul_scalar", self.shape(s), &[1]));
        }
        let sv = self.value(s).data()[0];
        let v = self.value(x).map(|e| e * sv);
        let rg = self.any_grad(&[x, s]);
        Ok(self.push(v, Op::MulScalar(x, s), rg))
    }

    /// Scale axis 1 of `[N × C × ...]` by `g[C]`.
    pub fn scale_channels(&mut self, x: Var, g: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let c = self.value(g).len();
        if xs.len() < 2 || xs[1] != c {
            return Err(Error::dim("scale_channels", &xs, self.shape(g)));
        }
        let inner: usize = xs[2..].iter().product();
        let gd = self.value(g).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &e)| e * gd[(i / inner) % c])
            .collect();
        let v = Self::out(&xs, data);
        let rg = self.any_grad(&[x, g]);
        Ok(self.push(v, Op::ScaleChannels { x, g, c, inner }, rg))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| -e);
        let rg = self.any_grad(&[x]);
        self.push(v, Op::Neg(x), rg)
    }

    /// `[m×k]·[k×p]`, or batched `[B×m×k]·[B×k×p]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, p) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, p]) if k == k2 => (1, *m, *k, *p),
            ([ba, m, k], [bb, k2, p]) if ba == bb && k == k2 => (*ba, *m, *k, *p),
            _ => return Err(Error::dim("matmul", &sa, &sb)),
        };
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut data = vec![T::zero(); batch * m * p];
        for i in 0..batch {
            kernels::matmul_into(
                &ad[i * m * k..(i + 1) * m * k],
                &bd[i * k * p..(i + 1) * k * p],
                &mut data[i * m * p..(i + 1) * m * p],
                m,
                k,
                p,
            );
        }
        let shape = if sa.len() == 2 {
            vec![m, p]
        } else {
            vec![batch, m, p]
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Self::out(&shape, data),
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                p,
            },
            rg,
        ))
    }

    /// Swap the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (batch, rows, cols) = match s.as_slice() {
            [r, c] => (1, *r, *c),
            [b, r, c] => (*b, *r, *c),
            _ => {
                return Err(Error::shape(
                    "transpose",
                    format!("rank {} unsupported", s.len()),
                ))
            }
        };
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(xd.len());
        for i in 0..batch {
            data.extend(kernels::transpose(
                &xd[i * rows * cols..(i + 1) * rows * cols],
                rows,
                cols,
            ));
        }
        let mut shape = s.clone();
        let n = shape.len();
        shape.swap(n - 1, n - 2);
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Self::out(&shape, data),
            Op::Transpose {
                x,
                batch,
                rows,
                cols,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Argument("concat of zero tensors".into()))?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(Error::Argument(format!(
                "concat axis {axis} for rank {}",
                s0.len()
            )));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            if s.len() != s0.len() || s[..axis] != s0[..axis] || s[axis + 1..] != s0[axis + 1..] {
                return Err(Error::dim("concat", &s0, s));
            }
            total += s[axis];
        }
        let outer: usize = s0[..axis].iter().product();
        let inner: usize = s0[axis + 1..].iter().product();
        let chunks: Vec<usize> = inputs
            .iter()
            .map(|v| self.shape(*v)[axis] * inner)
            .collect();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &ch) in inputs.iter().zip(&chunks) {
                data.extend_from_slice(&self.value(*v).data()[o * ch..(o + 1) * ch]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let rg = self.any_grad(inputs);
        Ok(self.push(
            Self::out(&shape, data),
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                chunks,
            },
            rg,
        ))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::Argument(format!(
                "slice {start}..{} of axis {axis} in {s:?}",
                start + len
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let in_chunk = s[axis] * inner;
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * in_chunk + start * inner;
            data.extend_from_slice(&xd[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Self::out(&shape, data),
            Op::Slice {
                x,
                outer,
                in_chunk,
                start: start * inner,
                len: len * inner,
            },
            rg,
        ))
    }

    /// Cross-correlation over `[N × Cin × spatial...]` with `w` of shape
    /// `[Cout × Cin/groups × kernel...]`; the group count is `Cin / w.shape[1]`
    /// (always `Cin` for [`ConvKind::Depthwise2d`]). `stride` and `pad` take one value or
    /// one per spatial axis. Output size per axis is
    /// `floor((in + 2·pad − k)/stride) + 1`.
    pub fn conv(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        kind: ConvKind,
        stride: &[usize],
        pad: &[usize],
    ) -> Result<Var> {
        let rank = kind.spatial_rank();
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != rank + 2 || ws.len() != rank + 2 {
            return Err(Error::dim("convolve", &xs, &ws));
        }
        let stride = expand(stride, rank, "stride")?;
        let pad = expand(pad, rank, "padding")?;
        if stride.contains(&0) {
            return Err(Error::Argument("convolve: zero stride".into()));
        }
        let (cin, cout) = (xs[1], ws[0]);
        let groups = match kind {
            ConvKind::Depthwise2d => {
                if ws[1] != 1 || cout != cin {
                    return Err(Error::dim("convolve(depthwise)", &xs, &ws));
                }
                cin
            }
            _ => {
                // grouped when the kernel sees a divisor of the input channels
                if ws[1] == 0 || cin % ws[1] != 0 || cout % (cin / ws[1]) != 0 {
                    return Err(Error::dim("convolve", &xs, &ws));
                }
                cin / ws[1]
            }
        };
        let mut out_sp = Vec::with_capacity(rank);
        for i in 0..rank {
            let padded = xs[2 + i] + 2 * pad[i];
            if ws[2 + i] > padded || ws[2 + i] == 0 {
                return Err(Error::dim(
                    "convolve: kernel larger than padded input",
                    &xs,
                    &ws,
                ));
            }
            out_sp.push((padded - ws[2 + i]) / stride[i] + 1);
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::dim("convolve bias", self.shape(b), &[cout]));
            }
        }
        let geom = ConvGeom {
            batch: xs[0],
            cin,
            cout,
            groups,
            input: pad3(&xs[2..], 1),
            kernel: pad3(&ws[2..], 1),
            stride: pad3(&stride, 1),
            pad: pad3(&pad, 0),
            output: pad3(&out_sp, 1),
        };
        let data = kernels::conv_forward(
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let mut shape = vec![xs[0], cout];
        shape.extend_from_slice(&out_sp);
        let mut deps = vec![x, w];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(Self::out(&shape, data), Op::Conv { x, w, bias, geom }, rg))
    }

    /// Average pooling over the trailing 1–3 axes (as many as the kind names).
    pub fn pool(&mut self, x: Var, kind: &PoolKind) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (rank, ranges): (usize, Vec<Vec<(usize, usize)>>) = match kind {
            PoolKind::AvgFixed {
                kernel,
                stride,
                pad,
            } => {
                let rank = kernel.len();
                if rank == 0 || rank > 3 || rank > xs.len() {
                    return Err(Error::Argument(format!(
                        "pool window rank {rank} for {xs:?}"
                    )));
                }
                let stride = expand(stride, rank, "pool stride")?;
                let pad = expand(pad, rank, "pool padding")?;
                if kernel.contains(&0) || stride.contains(&0) {
                    return Err(Error::Argument("pool: zero-size window or stride".into()));
                }
                let base = xs.len() - rank;
                let mut ranges = Vec::with_capacity(rank);
                for i in 0..rank {
                    if kernel[i] > xs[base + i] + 2 * pad[i] || pad[i] >= kernel[i] {
                        return Err(Error::Argument(format!(
                            "pool window {kernel:?} (pad {pad:?}) does not fit {xs:?}"
                        )));
                    }
                    ranges.push(PoolPlan::fixed_axis(
                        xs[base + i],
                        kernel[i],
                        stride[i],
                        pad[i],
                    ));
                }
                (rank, ranges)
            }
            PoolKind::AvgAdaptive { target } => {
                let rank = target.len();
                if rank == 0 || rank > 3 || rank > xs.len() {
                    return Err(Error::Argument(format!(
                        "pool target rank {rank} for {xs:?}"
                    )));
                }
                let base = xs.len() - rank;
                let mut ranges = Vec::with_capacity(rank);
                for i in 0..rank {
                    if target[i] == 0 {
                        return Err(Error::Argument("pool: zero-size target".into()));
                    }
                    if target[i] > xs[base + i] {
                        return Err(Error::Argument(format!(
                            "pool target {target:?} exceeds input {xs:?}"
                        )));
                    }
                    ranges.push(PoolPlan::adaptive_axis(xs[base + i], target[i]));
                }
                (rank, ranges)
            }
        };
        let base = xs.len() - rank;
        let mut r3: [Vec<(usize, usize)>; 3] = [vec![(0, 1)], vec![(0, 1)], vec![(0, 1)]];
        for (i, r) in ranges.into_iter().enumerate() {
            r3[3 - rank + i] = r;
        }
        let plan = PoolPlan {
            outer: xs[..base].iter().product(),
            input: pad3(&xs[base..], 1),
            ranges: r3,
        };
        let data = kernels::pool_forward(self.value(x).data(), &plan);
        let mut shape = xs[..base].to_vec();
        shape.extend_from_slice(&plan.output()[3 - rank..]);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Self::out(&shape, data), Op::Pool { x, plan }, rg))
    }

    /// Nearest-neighbour resize of the trailing `target.len()` axes.
    pub fn upsample_nearest(&mut self, x: Var, target: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let rank = target.len();
        if rank == 0 || rank > 3 || rank > xs.len() || target.contains(&0) {
            return Err(Error::Argument(format!(
                "upsample target {target:?} for {xs:?}"
            )));
        }
        let base = xs.len() - rank;
        let mut maps: [Vec<usize>; 3] = [vec![0], vec![0], vec![0]];
        for i in 0..rank {
            maps[3 - rank + i] = UpsamplePlan::axis(xs[base + i], target[i]);
        }
        let plan = UpsamplePlan {
            outer: xs[..base].iter().product(),
            input: pad3(&xs[base..], 1),
            maps,
        };
        let data = kernels::upsample_forward(self.value(x).data(), &plan);
        let mut shape = xs[..base].to_vec();
        shape.extend_from_slice(target);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Self::out(&shape, data), Op::Upsample { x, plan }, rg))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let rg = self.any_grad(&[x]);
        Ok(match kind {
            Activation::Sigmoid => {
                let v = self.value(x).map(kernels::sigmoid);
                self.push(v, Op::Sigmoid(x), rg)
            }
            Activation::Gelu => {
                let v = self.value(x).map(kernels::gelu);
                self.push(v, Op::Gelu(x), rg)
            }
            Activation::Softplus => {
                let v = self.value(x).map(kernels::softplus);
                self.push(v, Op::Softplus(x), rg)
            }
            Activation::Softmax { axis } => {
                let s = self.shape(x).to_vec();
                if axis >= s.len() {
                    return Err(Error::Argument(format!(
                        "softmax axis {axis} for rank {}",
                        s.len()
                    )));
                }
                let outer: usize = s[..axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let len = s[axis];
                let data = kernels::softmax(self.value(x).data(), outer, len, inner);
                self.push(
                    Self::out(&s, data),
                    Op::Softmax {
                        x,
                        outer,
                        len,
                        inner,
                    },
                    rg,
                )
            }
        })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
            .expect("sigmoid is infallible")
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Gelu)
            .expect("gelu is infallible")
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Softplus)
            .expect("softplus is infallible")
    }

    /// Batch norm over axis 1 of `[N × C × ...]`. Training mode returns the
    /// batch statistics so the caller can fold them into its running stats.
    pub fn batchnorm(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        eps: T,
        mode: BnMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::shape(
                "batchnorm",
                format!("rank {} input", xs.len()),
            ));
        }
        let (n, c) = (xs[0], xs[1]);
        let r: usize = xs[2..].iter().product();
        if self.shape(scale) != [c] {
            return Err(Error::dim("batchnorm scale", &xs, self.shape(scale)));
        }
        if self.shape(shift) != [c] {
            return Err(Error::dim("batchnorm shift", &xs, self.shape(shift)));
        }
        let (mean, var, stats) = match mode {
            BnMode::Train => {
                let (m, v) = kernels::channel_stats(self.value(x).data(), n, c, r);
                (m.clone(), v.clone(), Some(BatchStats { mean: m, var: v }))
            }
            BnMode::Eval(rs) => {
                if rs.mean.len() != c || rs.var.len() != c {
                    return Err(Error::dim("batchnorm running stats", &xs, &[rs.mean.len()]));
                }
                (rs.mean.clone(), rs.var.clone(), None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (sd, hd) = (self.value(scale).data(), self.value(shift).data());
        let xd = self.value(x).data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut data = vec![T::zero(); xd.len()];
        for (i, (&xv, (xh, out))) in xd
            .iter()
            .zip(xhat.iter_mut().zip(data.iter_mut()))
            .enumerate()
        {
            let ch = (i / r) % c;
            *xh = (xv - mean[ch]) * inv_std[ch];
            *out = sd[ch] * *xh + hd[ch];
        }
        let rg = self.any_grad(&[x, scale, shift]);
        let train = matches!(mode, BnMode::Train);
        let v = self.push(
            Self::out(&xs, data),
            Op::BatchNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
                train,
                n,
                c,
                r,
            },
            rg,
        );
        Ok((v, stats))
    }

    /// Affine map over the last axis: `x[..×in]·w[in×out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let fan_in = *xs
            .last()
            .ok_or_else(|| Error::shape("linear", "scalar input"))?;
        if ws.len() != 2 || ws[0] != fan_in {
            return Err(Error::dim("linear", &xs, &ws));
        }
        let fan_out = ws[1];
        if let Some(bv) = b {
            if self.shape(bv) != [fan_out] {
                return Err(Error::dim("linear bias", &ws, self.shape(bv)));
            }
        }
        let rows = numel(&xs) / fan_in.max(1);
        let mut data = kernels::matmul(
            self.value(x).data(),
            self.value(w).data(),
            rows,
            fan_in,
            fan_out,
        );
        if let Some(bv) = b {
            let bd = self.value(bv).data();
            for row in data.chunks_mut(fan_out) {
                for (o, &bb) in row.iter_mut().zip(bd) {
                    *o = *o + bb;
                }
            }
        }
        let mut shape = xs.clone();
        *shape.last_mut().unwrap() = fan_out;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            Self::out(&shape, data),
            Op::Linear {
                x,
                w,
                b,
                rows,
                fan_in,
                fan_out,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, T::one() / T::from_usize_lossy(n))
    }

    /// `Σ x·w` against fixed weights; used for probe losses.
    pub fn dot(&mut self, x: Var, weights: &Tensor<T>) -> Result<Var> {
        if self.shape(x) != weights.shape() {
            return Err(Error::dim("dot", self.shape(x), weights.shape()));
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a * b)
            .sum();
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::scalar(s),
            Op::Dot {
                x,
                w: weights.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over the batch of `−log softmax(logits)[label]`, logits `[N × K]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        let (n, k) = match s.as_slice() {
            [n, k] => (*n, *k),
            _ => {
                return Err(Error::shape(
                    "cross_entropy",
                    format!("logits {s:?} must be [N × K]"),
                ))
            }
        };
        if labels.len() != n {
            return Err(Error::Input(format!(
                "{} labels for batch of {n}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Input(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let probs = kernels::softmax(self.value(logits).data(), n, k, 1);
        let ld = self.value(logits).data();
        let mut total = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            let row = &ld[i * k..(i + 1) * k];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            total = total + lse - row[y];
        }
        let loss = total / T::from_usize_lossy(n.max(1));
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                k,
            },
            rg,
        ))
    }

    /// Diagonal state-space scan over `[N × C × ...]`, where axis 1 carries
    /// `steps` consecutive groups of `C/steps` channels. `log_decay`, `b`, `c`
    /// are `[C × state]` and `d` is `[C]`.
    #[allow(clippy::too_many_arguments)]
    pub fn scan(
        &mut self,
        x: Var,
        log_decay: Var,
        b: Var,
        c: Var,
        d: Var,
        steps: usize,
        reverse: bool,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || steps == 0 || xs[1] % steps != 0 {
            return Err(Error::shape(
                "scan",
                format!("input {xs:?} does not split into {steps} steps"),
            ));
        }
        let ch = xs[1];
        let ps = self.shape(log_decay).to_vec();
        if ps.len() != 2 || ps[0] != ch {
            return Err(Error::dim("scan transition", &xs, &ps));
        }
        for p in [b, c] {
            if self.shape(p) != ps.as_slice() {
                return Err(Error::dim("scan projection", &ps, self.shape(p)));
            }
        }
        if self.shape(d) != [ch] {
            return Err(Error::dim("scan skip", &xs, self.shape(d)));
        }
        let geom = ScanGeom {
            batch: xs[0],
            steps,
            groups: ch / steps,
            positions: xs[2..].iter().product(),
            state: ps[1],
            reverse,
        };
        let rg = self.any_grad(&[x, log_decay, b, c, d]) && self.grad_enabled;
        let (y, states) = kernels::scan_forward(
            self.value(x).data(),
            self.value(log_decay).data(),
            self.value(b).data(),
            self.value(c).data(),
            self.value(d).data(),
            &geom,
            rg,
        );
        Ok(self.push(
            Self::out(&xs, y),
            Op::Scan {
                x,
                a: log_decay,
                b,
                c,
                d,
                geom,
                states,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar loss. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Argument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::EmptyTape);
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        let mut visited = 0;
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = (if matches!(node.op, Op::Leaf) {
                None
            } else {
                grads[i].take()
            }) else {
                continue;
            };
            visited += 1;
            self.backprop(i, &g, &mut grads);
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients {
            grads,
            shapes,
            params: self.params,
            visited,
        })
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, delta: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, d) in existing.iter_mut().zip(delta) {
                        *e = *e + d;
                    }
                }
                slot => *slot = Some(delta),
            }
        };
        let out = self.nodes[i].value.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a), val(*b));
                acc(*a, g.iter().zip(bd).map(|(&gv, &bv)| gv * bv).collect());
                acc(*b, g.iter().zip(ad).map(|(&gv, &av)| gv * av).collect());
            }
            Op::Scale(x, f) => acc(*x, g.iter().map(|&v| v * *f).collect()),
            Op::MulScalar(x, s) => {
                let sv = val(*s)[0];
                let xd = val(*x);
                acc(*x, g.iter().map(|&v| v * sv).collect());
                acc(*s, vec![g.iter().zip(xd).map(|(&gv, &xv)| gv * xv).sum()]);
            }
            Op::ScaleChannels {
                x,
                g: gate,
                c,
                inner,
            } => {
                let (xd, gd) = (val(*x), val(*gate));
                acc(
                    *x,
                    g.iter()
                        .enumerate()
                        .map(|(j, &gv)| gv * gd[(j / inner) % c])
                        .collect(),
                );
                let mut gg = vec![T::zero(); *c];
                for (j, (&gv, &xv)) in g.iter().zip(xd).enumerate() {
                    let ch = (j / inner) % c;
                    gg[ch] = gg[ch] + gv * xv;
                }
                acc(*gate, gg);
            }
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                p,
            } => {
                let (ad, bd) = (val(*a), val(*b));
                let (m, k, p) = (*m, *k, *p);
                let mut ga = vec![T::zero(); ad.len()];
                let mut gb = vec![T::zero(); bd.len()];
                for bi in 0..*batch {
                    let gs = &g[bi * m * p..(bi + 1) * m * p];
                    kernels::matmul_bt_into(
                        gs,
                        &bd[bi * k * p..(bi + 1) * k * p],
                        &mut ga[bi * m * k..(bi + 1) * m * k],
                        m,
                        p,
                        k,
                    );
                    kernels::matmul_at_into(
                        &ad[bi * m * k..(bi + 1) * m * k],
                        gs,
                        &mut gb[bi * k * p..(bi + 1) * k * p],
                        m,
                        k,
                        p,
                    );
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Transpose {
                x,
                batch,
                rows,
                cols,
            } => {
                let mut gx = Vec::with_capacity(g.len());
                for bi in 0..*batch {
                    gx.extend(kernels::transpose(
                        &g[bi * rows * cols..(bi + 1) * rows * cols],
                        *cols,
                        *rows,
                    ));
                }
                acc(*x, gx);
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Concat {
                inputs,
                outer,
                chunks,
            } => {
                let total: usize = chunks.iter().sum();
                for (idx, v) in inputs.iter().enumerate() {
                    let off: usize = chunks[..idx].iter().sum();
                    let ch = chunks[idx];
                    let mut gx = Vec::with_capacity(outer * ch);
                    for o in 0..*outer {
                        gx.extend_from_slice(&g[o * total + off..o * total + off + ch]);
                    }
                    acc(*v, gx);
                }
            }
            Op::Slice {
                x,
                outer,
                in_chunk,
                start,
                len,
            } => {
                let mut gx = vec![T::zero(); outer * in_chunk];
                for o in 0..*outer {
                    gx[o * in_chunk + start..o * in_chunk + start + len]
                        .copy_from_slice(&g[o * len..(o + 1) * len]);
                }
                acc(*x, gx);
            }
            Op::Conv { x, w, bias, geom } => {
                let (gx, gw, gb) = kernels::conv_backward(val(*x), val(*w), g, geom);
                acc(*x, gx);
                acc(*w, gw);
                if let Some(b) = bias {
                    acc(*b, gb);
                }
            }
            Op::Pool { x, plan } => acc(*x, kernels::pool_backward(g, plan)),
            Op::Upsample { x, plan } => acc(*x, kernels::upsample_backward(g, plan)),
            Op::Sigmoid(x) => acc(
                *x,
                g.iter()
                    .zip(out)
                    .map(|(&gv, &y)| gv * y * (T::one() - y))
                    .collect(),
            ),
            Op::Gelu(x) => acc(
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(&gv, &xv)| gv * kernels::gelu_grad(xv))
                    .collect(),
            ),
            Op::Softplus(x) => acc(
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(&gv, &xv)| gv * kernels::sigmoid(xv))
                    .collect(),
            ),
            Op::Neg(x) => acc(*x, g.iter().map(|&v| -v).collect()),
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => acc(*x, kernels::softmax_backward(out, g, *outer, *len, *inner)),
            Op::BatchNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
                train,
                n,
                c,
                r,
            } => {
                let (n, c, r) = (*n, *c, *r);
                let sd = val(*scale);
                let mut gsum = vec![T::zero(); c];
                let mut gxh = vec![T::zero(); c];
                for (j, (&gv, &xh)) in g.iter().zip(xhat).enumerate() {
                    let ch = (j / r) % c;
                    gsum[ch] = gsum[ch] + gv;
                    gxh[ch] = gxh[ch] + gv * xh;
                }
                let m = T::from_usize_lossy(n * r);
                let gx = g
                    .iter()
                    .zip(xhat)
                    .enumerate()
                    .map(|(j, (&gv, &xh))| {
                        let ch = (j / r) % c;
                        if *train {
                            sd[ch] * inv_std[ch] * (gv - gsum[ch] / m - xh * gxh[ch] / m)
                        } else {
                            sd[ch] * inv_std[ch] * gv
                        }
                    })
                    .collect();
                acc(*x, gx);
                acc(*scale, gxh);
                acc(*shift, gsum);
            }
            Op::Linear {
                x,
                w,
                b,
                rows,
                fan_in,
                fan_out,
            } => {
                let (xd, wd) = (val(*x), val(*w));
                let mut gx = vec![T::zero(); xd.len()];
                kernels::matmul_bt_into(g, wd, &mut gx, *rows, *fan_out, *fan_in);
                let mut gw = vec![T::zero(); wd.len()];
                kernels::matmul_at_into(xd, g, &mut gw, *rows, *fan_in, *fan_out);
                acc(*x, gx);
                acc(*w, gw);
                if let Some(bv) = b {
                    let mut gb = vec![T::zero(); *fan_out];
                    for row in g.chunks(*fan_out) {
                        for (o, &gv) in gb.iter_mut().zip(row) {
                            *o = *o + gv;
                        }
                    }
                    acc(*bv, gb);
                }
            }
            Op::Sum(x) => acc(*x, vec![g[0]; self.nodes[x.0].value.len()]),
            Op::Dot { x, w } => acc(*x, w.iter().map(|&wv| wv * g[0]).collect()),
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                k,
            } => {
                let n = T::from_usize_lossy(labels.len().max(1));
                let mut gl = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    gl[i * k + y] = gl[i * k + y] - T::one();
                }
                acc(*logits, gl.into_iter().map(|v| v * g[0] / n).collect());
            }
            Op::Scan {
                x,
                a,
                b,
                c,
                d,
                geom,
                states,
            } => {
                let gr = kernels::scan_backward(
                    val(*x),
                    val(*a),
                    val(*b),
                    val(*c),
                    val(*d),
                    states,
                    g,
                    geom,
                );
                acc(*x, gr.x);
                acc(*a, gr.log_decay);
                acc(*b, gr.b);
                acc(*c, gr.c);
                acc(*d, gr.d);
            }
        }
    }
}

/// Result of a backward pass: gradients of every tracked leaf.
#[derive(Debug)]
pub struct Gradients<T: Scalar = f64> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    params: HashMap<ParamId, Var>,
    visited: usize,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to a tracked leaf. Untouched leaves
    /// that require grad get zeros; untracked values get `None`.
    pub fn wrt(&self, v: Var) -> Option<Tensor<T>> {
        let data = self.grads.get(v.0)?.clone()?;
        Some(Tensor::from_parts(self.shapes[v.0].clone(), data.into()))
    }

    pub fn param(&self, id: ParamId) -> Option<Tensor<T>> {
        self.params.get(&id).and_then(|&v| self.wrt(v))
    }

    /// Number of non-leaf nodes processed by the sweep.
    pub fn nodes_visited(&self) -> usize {
        self.visited
    }

    /// Store parameter gradients in `store` (zeros for parameters that were
    /// bound but did not influence the loss).
    pub fn apply_to(&self, store: &mut ParamStore<T>) -> Result<()> {
        for (&id, &v) in &self.params {
            let g = match &self.grads[v.0] {
                Some(g) => g.clone(),
                None => vec![T::zero(); store.get(id).len()],
            };
            store.set_grad(id, g)?;
        }
        Ok(())
    }
}
