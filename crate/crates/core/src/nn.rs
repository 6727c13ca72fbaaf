//! Layer plumbing shared by the network modules: parameter registration,
//! the per-pass context, and convolution / linear / batch-norm layers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{BatchStats, BnMode, ConvKind, RunningStats, Tape, Var};
use crate::tensor::Tensor;

/// Registers parameters under hierarchical names and allocates batch-norm
/// running-statistic slots.
#[derive(Debug)]
pub struct Builder {
    pub store: ParamStore<f64>,
    /// Channel count of each running-statistics slot.
    pub norms: Vec<usize>,
    rng: ChaCha8Rng,
    prefix: Vec<String>,
}

impl Builder {
    pub fn new(seed: u64) -> Self {
        Self {
            store: ParamStore::new(),
            norms: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: Vec::new(),
        }
    }

    /// Run `f` with `name` appended to the parameter-name prefix.
    pub fn scope<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        self.prefix.push(name.to_string());
        let out = f(self);
        self.prefix.pop();
        out
    }

    fn full_name(&self, name: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(name.to_string());
        parts.join(".")
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn add(&mut self, name: &str, value: Tensor<f64>) -> ParamId {
        let full = self.full_name(name);
        self.store.add(full, value)
    }

    /// Uniform in `±1/√fan_in`.
    pub fn add_fan_in(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let full = self.full_name(name);
        self.store.add_fan_in(full, shape, fan_in, &mut self.rng)
    }

    /// He-uniform: uniform in `±√(6/fan_in)`, variance-preserving through
    /// rectifier-like activations.
    pub fn add_he(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        self.uniform(name, shape, -bound, bound)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], lo: f64, hi: f64) -> ParamId {
        let t = Tensor::uniform(shape, lo, hi, &mut self.rng);
        self.add(name, t)
    }

    fn norm_slot(&mut self, channels: usize) -> usize {
        self.norms.push(channels);
        self.norms.len() - 1
    }

    /// Fresh running statistics for every allocated slot.
    pub fn running_stats(&self) -> Vec<RunningStats<f64>> {
        self.norms.iter().map(|&c| RunningStats::new(c)).collect()
    }
}

/// One forward pass: a tape plus the parameters and normalisation state it reads.
#[derive(Debug)]
pub struct Pass<'a, T: Scalar> {
    pub tape: Tape<T>,
    store: &'a ParamStore<T>,
    running: &'a [RunningStats<T>],
    train: bool,
    batch_stats: Vec<(usize, BatchStats<T>)>,
}

impl<'a, T: Scalar> Pass<'a, T> {
    /// Gradient-recording pass; batch norm uses batch statistics.
    pub fn train(store: &'a ParamStore<T>, running: &'a [RunningStats<T>]) -> Self {
        Self {
            tape: Tape::new(),
            store,
            running,
            train: true,
            batch_stats: Vec::new(),
        }
    }

    /// Inference pass; batch norm uses running statistics.
    pub fn eval(store: &'a ParamStore<T>, running: &'a [RunningStats<T>]) -> Self {
        Self {
            tape: Tape::inference(),
            store,
            running,
            train: false,
            batch_stats: Vec::new(),
        }
    }

    /// Continue recording on an existing tape, e.g. one handed out by a
    /// gradient checker.
    pub fn on_tape(
        tape: Tape<T>,
        store: &'a ParamStore<T>,
        running: &'a [RunningStats<T>],
        train: bool,
    ) -> Self {
        Self {
            tape,
            store,
            running,
            train,
            batch_stats: Vec::new(),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.tape.value(v)
    }

    /// Hand back the tape and the batch statistics of each norm slot used.
    pub fn finish(self) -> (Tape<T>, Vec<(usize, BatchStats<T>)>) {
        (self.tape, self.batch_stats)
    }
}

/// Convolution with an optional bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub kind: ConvKind,
    pub stride: Vec<usize>,
    pub pad: Vec<usize>,
}

impl Conv {
    /// `weight_shape` is `[Cout × Cin/groups × kernel...]`.
    pub fn new(
        b: &mut Builder,
        name: &str,
        kind: ConvKind,
        weight_shape: &[usize],
        stride: &[usize],
        pad: &[usize],
    ) -> Self {
        let fan_in: usize = weight_shape[1..].iter().product();
        b.scope(name, |b| Self {
            weight: b.add_he("weight", weight_shape, fan_in),
            bias: Some(b.add_fan_in("bias", &[weight_shape[0]], fan_in)),
            kind,
            stride: stride.to_vec(),
            pad: pad.to_vec(),
        })
    }

    /// 1×1 convolution `cin → cout` over `[N × C × H × W]`.
    pub fn pointwise(b: &mut Builder, name: &str, cin: usize, cout: usize) -> Self {
        Self::new(b, name, ConvKind::D2, &[cout, cin, 1, 1], &[1], &[0])
    }

    pub fn forward<T: Scalar>(&self, p: &mut Pass<'_, T>, x: Var) -> Result<Var> {
        let w = p.param(self.weight);
        let bias = self.bias.map(|id| p.param(id));
        p.tape.conv(x, w, bias, self.kind, &self.stride, &self.pad)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

/// Affine map over the last axis, weight `[in × out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(b: &mut Builder, name: &str, input: usize, output: usize) -> Self {
        b.scope(name, |b| Self {
            weight: b.add_he("weight", &[input, output], input),
            bias: b.add_fan_in("bias", &[output], input),
        })
    }

    pub fn forward<T: Scalar>(&self, p: &mut Pass<'_, T>, x: Var) -> Result<Var> {
        let w = p.param(self.weight);
        let b = p.param(self.bias);
        p.tape.linear(x, w, Some(b))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

/// Batch normalisation over axis 1 with a running-statistics slot.
#[derive(Clone, Debug)]
pub struct Norm {
    pub scale: ParamId,
    pub shift: ParamId,
    pub slot: usize,
    pub eps: f64,
}

impl Norm {
    pub fn new(b: &mut Builder, name: &str, channels: usize, eps: f64) -> Self {
        let slot = b.norm_slot(channels);
        b.scope(name, |b| Self {
            scale: b.add("scale", Tensor::ones(&[channels])),
            shift: b.add("shift", Tensor::zeros(&[channels])),
            slot,
            eps,
        })
    }

    pub fn forward<T: Scalar>(&self, p: &mut Pass<'_, T>, x: Var) -> Result<Var> {
        let scale = p.param(self.scale);
        let shift = p.param(self.shift);
        let eps = T::from_f64_lossy(self.eps);
        if p.train {
            let (y, stats) = p.tape.batchnorm(x, scale, shift, eps, BnMode::Train)?;
            if let Some(s) = stats {
                p.batch_stats.push((self.slot, s));
            }
            Ok(y)
        } else {
            let running = p.running;
            let (y, _) =
                p.tape
                    .batchnorm(x, scale, shift, eps, BnMode::Eval(&running[self.slot]))?;
            Ok(y)
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.scale, self.shift]
    }
}

/// View a single sample as a batch of one; rank-`rank` inputs are already
/// batched. Returns whether an axis was added.
pub(crate) fn add_batch<T: Scalar>(t: &Tensor<T>, rank: usize) -> Result<(Tensor<T>, bool)> {
    match t.rank() {
        r if r + 1 == rank => {
            let mut s = vec![1];
            s.extend_from_slice(t.shape());
            Ok((t.reshape(&s)?, true))
        }
        r if r == rank => Ok((t.clone(), false)),
        _ => Err(Error::shape(
            "batch",
            format!("expected rank {} or {rank}, got {:?}", rank - 1, t.shape()),
        )),
    }
}

pub(crate) fn drop_batch<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    t.reshape(&t.shape()[1..])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scoped_names_and_counts() {
        let mut b = Builder::new(0);
        let lin = b.scope("head", |b| Linear::new(b, "fc", 10, 4));
        assert_eq!(b.store.name(lin.weight), "head.fc.weight");
        assert_eq!(b.store.num_scalars(), 44);
        let n = Norm::new(&mut b, "bn", 6, 1e-5);
        assert_eq!(n.slot, 0);
        assert_eq!(b.running_stats()[0].mean.len(), 6);
    }

    #[test]
    fn train_pass_records_batch_stats() {
        let mut b = Builder::new(1);
        let n = Norm::new(&mut b, "bn", 2, 1e-5);
        let running = b.running_stats();
        let mut p = Pass::train(&b.store, &running);
        let x = p.input(Tensor::from_fn(&[3, 2], |i| i as f64));
        n.forward(&mut p, x).unwrap();
        let (_, stats) = p.finish();
        assert_eq!(stats.len(), 1);
        assert_eq!(stats[0].0, 0);
    }
}
