//! Task-gated multimodal integration: shared self-attention over the
//! concatenated modality features, then one sigmoid gate unit per task that
//! weights each modality spatially.

use crate::config::{Modality, ModelConfig, Task};
use crate::error::{Error, Result};
use crate::nn::{add_batch, drop_batch, Builder, Conv, Norm, Pass};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Activation, RunningStats, Var};
use crate::tensor::Tensor;

/// Branch outputs to fuse, each `[C × H × W]` (or batched), in modality order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityFeatures<T: Scalar = f64> {
    pub modalities: Vec<Modality>,
    pub features: Vec<Tensor<T>>,
}

impl<T: Scalar> ModalityFeatures<T> {
    /// All three modalities: exterior, interior, joints.
    pub fn new(h1: Tensor<T>, h2: Tensor<T>, h3: Tensor<T>) -> Self {
        Self {
            modalities: Modality::ALL.to_vec(),
            features: vec![h1, h2, h3],
        }
    }

    fn validate(&self) -> Result<()> {
        let first = self
            .features
            .first()
            .ok_or_else(|| Error::Argument("no modality features".into()))?;
        for f in &self.features[1..] {
            if f.shape() != first.shape() {
                return Err(Error::dim("modality features", first.shape(), f.shape()));
            }
        }
        if self.features.len() != self.modalities.len() {
            return Err(Error::Argument(
                "one feature tensor per modality required".into(),
            ));
        }
        Ok(())
    }
}

/// Query, key and value projections `M·C → C`.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Conv,
    pub k: Conv,
    pub v: Conv,
}

/// Convolution `C → M·C`, batch norm over all `M·C` channels, sigmoid.
#[derive(Clone, Debug)]
pub struct GateUnit {
    pub conv: Conv,
    pub norm: Norm,
}

#[derive(Clone, Debug)]
pub struct GateParams {
    pub modalities: Vec<Modality>,
    pub tasks: Vec<Task>,
    pub channels: usize,
    /// Absent when shared features are the plain modality mean.
    pub attention: Option<Attention>,
    /// One unit per task in `tasks` order, or a single unit shared by all.
    pub units: Vec<GateUnit>,
}

impl GateParams {
    pub fn new(
        b: &mut Builder,
        modalities: &[Modality],
        tasks: &[Task],
        channels: usize,
        self_attention: bool,
        multi_gating: bool,
        eps: f64,
    ) -> Self {
        let (c, m) = (channels, modalities.len());
        let attention = self_attention.then(|| {
            b.scope("attention", |b| Attention {
                q: Conv::pointwise(b, "q", m * c, c),
                k: Conv::pointwise(b, "k", m * c, c),
                v: Conv::pointwise(b, "v", m * c, c),
            })
        });
        let names: Vec<&str> = if multi_gating {
            tasks.iter().map(|t| t.name()).collect()
        } else {
            vec!["shared"]
        };
        let units = names
            .iter()
            .map(|name| {
                b.scope(&format!("gate_{name}"), |b| GateUnit {
                    conv: Conv::pointwise(b, "conv", c, m * c),
                    norm: Norm::new(b, "bn", m * c, eps),
                })
            })
            .collect();
        Self {
            modalities: modalities.to_vec(),
            tasks: tasks.to_vec(),
            channels,
            attention,
            units,
        }
    }

    pub fn for_config(b: &mut Builder, cfg: &ModelConfig) -> Self {
        let a = &cfg.ablation;
        Self::new(
            b,
            &a.active_modalities(),
            &a.active_tasks(),
            cfg.channels,
            !a.no_self_attention,
            !a.no_multi_gating,
            cfg.bn_eps,
        )
    }

    /// Gate unit serving the `i`-th active task.
    pub fn unit(&self, i: usize) -> &GateUnit {
        &self.units[i.min(self.units.len() - 1)]
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        if let Some(a) = &self.attention {
            for c in [&a.q, &a.k, &a.v] {
                ids.extend(c.param_ids());
            }
        }
        for u in &self.units {
            ids.extend(u.conv.param_ids());
            ids.extend(u.norm.param_ids());
        }
        ids
    }
}

fn check_same<T: Scalar>(p: &Pass<'_, T>, hs: &[Var]) -> Result<Vec<usize>> {
    let first = hs
        .first()
        .map(|&h| p.tape.shape(h).to_vec())
        .ok_or_else(|| Error::Argument("no modality features".into()))?;
    for &h in &hs[1..] {
        if p.tape.shape(h) != first.as_slice() {
            return Err(Error::dim("modality features", &first, p.tape.shape(h)));
        }
    }
    if first.len() != 4 {
        return Err(Error::shape(
            "fusion",
            format!("expected [N×C×H×W], got {first:?}"),
        ));
    }
    Ok(first)
}

/// Task-shared features `S = softmax(Q·Kᵀ/√(HW))·V`, `[N × C × H × W]`.
pub fn shared_attention_var<T: Scalar>(
    p: &mut Pass<'_, T>,
    gp: &GateParams,
    hs: &[Var],
) -> Result<Var> {
    let s = check_same(p, hs)?;
    let Some(att) = &gp.attention else {
        let mut acc = hs[0];
        for &h in &hs[1..] {
            acc = p.tape.add(acc, h)?;
        }
        let inv = T::from_usize_lossy(hs.len()).recip();
        return Ok(p.tape.scale(acc, inv));
    };
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let x = p.tape.concat(hs, 1)?;
    let attn = attention_weights_var(p, att, x, [n, c, h * w])?;
    let v = att.v.forward(p, x)?;
    let v = p.tape.reshape(v, &[n, c, h * w])?;
    let out = p.tape.matmul(attn, v)?;
    p.tape.reshape(out, &[n, c, h, w])
}

/// Row-stochastic channel attention `softmax(Q·Kᵀ/√L)`, `[N × C × C]`, from
/// the concatenated features `x`.
fn attention_weights_var<T: Scalar>(
    p: &mut Pass<'_, T>,
    att: &Attention,
    x: Var,
    [n, c, l]: [usize; 3],
) -> Result<Var> {
    let q = att.q.forward(p, x)?;
    let k = att.k.forward(p, x)?;
    let q = p.tape.reshape(q, &[n, c, l])?;
    let k = p.tape.reshape(k, &[n, c, l])?;
    let kt = p.tape.transpose(k)?;
    let scores = p.tape.matmul(q, kt)?;
    let scores = p.tape.scale(scores, T::from_usize_lossy(l).sqrt().recip());
    p.tape.activation(scores, Activation::Softmax { axis: 2 })
}

/// `F = Σ_i H_i ⊙ g_i` with `g = σ(BN(Conv(S)))` split per modality.
/// Returns the fused features and each modality's gate.
pub fn task_fuse_var<T: Scalar>(
    p: &mut Pass<'_, T>,
    unit: &GateUnit,
    hs: &[Var],
    shared: Var,
) -> Result<(Var, Vec<Var>)> {
    let s = check_same(p, hs)?;
    let c = s[1];
    let g = unit.conv.forward(p, shared)?;
    let g = unit.norm.forward(p, g)?;
    let g = p.tape.sigmoid(g);
    if p.tape.shape(g)[1] != c * hs.len() {
        return Err(Error::dim("gate channels", p.tape.shape(g), &s));
    }
    let mut gates = Vec::with_capacity(hs.len());
    let mut fused = None;
    for (i, &h) in hs.iter().enumerate() {
        let gi = p.tape.slice(g, 1, i * c, c)?;
        let term = p.tape.mul(h, gi)?;
        fused = Some(match fused {
            Some(acc) => p.tape.add(acc, term)?,
            None => term,
        });
        gates.push(gi);
    }
    Ok((fused.expect("at least one modality"), gates))
}

/// Fused features per active task plus gate telemetry: mean gate per
/// (task, modality), `None` for inactive entries.
pub type Telemetry = [[Option<f64>; 3]; 4];

pub fn fuse_all_var<T: Scalar>(
    p: &mut Pass<'_, T>,
    gp: &GateParams,
    hs: &[Var],
) -> Result<(Vec<Var>, Telemetry)> {
    let shared = shared_attention_var(p, gp, hs)?;
    let mut tel: Telemetry = [[None; 3]; 4];
    let mut outs = Vec::with_capacity(gp.tasks.len());
    let mut cached: Option<(Var, Vec<Var>)> = None;
    for (i, task) in gp.tasks.iter().enumerate() {
        let (f, gates) = if gp.units.len() == 1 && cached.is_some() {
            cached.clone().unwrap()
        } else {
            let r = task_fuse_var(p, gp.unit(i), hs, shared)?;
            cached = Some(r.clone());
            r
        };
        for (m, g) in gp.modalities.iter().zip(&gates) {
            tel[task.index()][m.index()] = Some(p.value(*g).mean().to_f64_lossy());
        }
        outs.push(f);
    }
    Ok((outs, tel))
}

/// Concatenation baseline: channel concat, then a 1×1 conv back to `C`.
#[derive(Clone, Debug)]
pub struct ConcatFuse {
    pub conv: Conv,
}

impl ConcatFuse {
    pub fn new(b: &mut Builder, modalities: usize, channels: usize) -> Self {
        Self {
            conv: Conv::pointwise(b, "concat_fuse", modalities * channels, channels),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.conv.param_ids()
    }
}

pub fn concat_fuse_var<T: Scalar>(p: &mut Pass<'_, T>, cf: &ConcatFuse, hs: &[Var]) -> Result<Var> {
    check_same(p, hs)?;
    let x = p.tape.concat(hs, 1)?;
    cf.conv.forward(p, x)
}

fn bind<T: Scalar>(p: &mut Pass<'_, T>, m: &ModalityFeatures<T>) -> Result<(Vec<Var>, bool)> {
    m.validate()?;
    let mut single = false;
    let mut vars = Vec::with_capacity(m.features.len());
    for f in &m.features {
        let (t, s) = add_batch(f, 4)?;
        single = s;
        vars.push(p.input(t));
    }
    Ok((vars, single))
}

fn unbatch<T: Scalar>(t: &Tensor<T>, single: bool) -> Result<Tensor<T>> {
    if single {
        drop_batch(t)
    } else {
        Ok(t.clone())
    }
}

/// Shared features `S` for one sample (or a batch).
pub fn shared_attention<T: Scalar>(
    store: &ParamStore<T>,
    gp: &GateParams,
    m: &ModalityFeatures<T>,
) -> Result<Tensor<T>> {
    let mut p = Pass::eval(store, &[]);
    let (hs, single) = bind(&mut p, m)?;
    let s = shared_attention_var(&mut p, gp, &hs)?;
    unbatch(p.value(s), single)
}

/// Channel attention matrix `[C × C]` (or `[N × C × C]` batched); `None`
/// when self-attention is ablated.
pub fn attention_weights<T: Scalar>(
    store: &ParamStore<T>,
    gp: &GateParams,
    m: &ModalityFeatures<T>,
) -> Result<Option<Tensor<T>>> {
    let Some(att) = &gp.attention else {
        return Ok(None);
    };
    let mut p = Pass::eval(store, &[]);
    let (hs, single) = bind(&mut p, m)?;
    let s = check_same(&p, &hs)?;
    let x = p.tape.concat(&hs, 1)?;
    let a = attention_weights_var(&mut p, att, x, [s[0], s[1], s[2] * s[3]])?;
    let a = p.value(a);
    Ok(Some(if single { drop_batch(a)? } else { a.clone() }))
}

/// Fused features of task `r ∈ {1, 2, 3, 4}` (index into the active tasks),
/// with batch norm on running statistics.
pub fn task_fuse<T: Scalar>(
    store: &ParamStore<T>,
    running: &[RunningStats<T>],
    gp: &GateParams,
    m: &ModalityFeatures<T>,
    shared: &Tensor<T>,
    r: usize,
) -> Result<Tensor<T>> {
    if r == 0 || r > gp.tasks.len() {
        return Err(Error::Argument(format!(
            "task index {r} outside 1..={}",
            gp.tasks.len()
        )));
    }
    let mut p = Pass::eval(store, running);
    let (hs, single) = bind(&mut p, m)?;
    let s = p.input(add_batch(shared, 4)?.0);
    let (f, _) = task_fuse_var(&mut p, gp.unit(r - 1), &hs, s)?;
    unbatch(p.value(f), single)
}

/// Fused features for every active task plus gate telemetry.
pub fn fuse_all<T: Scalar>(
    store: &ParamStore<T>,
    running: &[RunningStats<T>],
    gp: &GateParams,
    m: &ModalityFeatures<T>,
) -> Result<(Vec<Tensor<T>>, Telemetry)> {
    let mut p = Pass::eval(store, running);
    let (hs, single) = bind(&mut p, m)?;
    let (fs, tel) = fuse_all_var(&mut p, gp, &hs)?;
    let outs = fs
        .iter()
        .map(|&f| unbatch(p.value(f), single))
        .collect::<Result<_>>()?;
    Ok((outs, tel))
}

pub fn concat_fuse<T: Scalar>(
    store: &ParamStore<T>,
    cf: &ConcatFuse,
    m: &ModalityFeatures<T>,
) -> Result<Tensor<T>> {
    let mut p = Pass::eval(store, &[]);
    let (hs, single) = bind(&mut p, m)?;
    let y = concat_fuse_var(&mut p, cf, &hs)?;
    unbatch(p.value(y), single)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_params, GradCheckOptions};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn feats(c: usize, h: usize, w: usize, seed: u64) -> ModalityFeatures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = || Tensor::uniform(&[c, h, w], -1.0, 1.0, &mut rng);
        ModalityFeatures::new(t(), t(), t())
    }

    fn build(c: usize, seed: u64) -> (Builder, GateParams) {
        let mut b = Builder::new(seed);
        let gp = GateParams::new(&mut b, &Modality::ALL, &Task::ALL, c, true, true, 1e-5);
        (b, gp)
    }

    fn zero_conv(store: &mut ParamStore, conv: &Conv) {
        for id in conv.param_ids() {
            let s = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&s)).unwrap();
        }
    }

    /// 1×1 conv on `[Cin × L]` data.
    fn pw(store: &ParamStore, conv: &Conv, x: &[f64], cin: usize, len: usize) -> Vec<f64> {
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

    fn concat(m: &ModalityFeatures) -> Vec<f64> {
        m.features.iter().flat_map(|f| f.to_vec()).collect()
    }

    fn running(b: &Builder, seed: u64) -> Vec<RunningStats<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        b.norms
            .iter()
            .map(|&c| RunningStats {
                mean: Tensor::<f64>::uniform(&[c], -0.5, 0.5, &mut rng).to_vec(),
                var: Tensor::<f64>::uniform(&[c], 0.5, 2.0, &mut rng).to_vec(),
                momentum: 0.1,
            })
            .collect()
    }

    #[test]
    fn zero_query_gives_uniform_attention() {
        let (mut b, gp) = build(3, 0);
        zero_conv(&mut b.store, &gp.attention.as_ref().unwrap().q);
        let m = feats(3, 2, 2, 1);
        let s = shared_attention(&b.store, &gp, &m).unwrap();
        let v = pw(
            &b.store,
            &gp.attention.as_ref().unwrap().v,
            &concat(&m),
            9,
            4,
        );
        for i in 0..3 {
            for t in 0..4 {
                let mean = (0..3).map(|j| v[j * 4 + t]).sum::<f64>() / 3.0;
                assert!((s.at(&[i, t / 2, t % 2]) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_value_gives_zero() {
        let (mut b, gp) = build(3, 1);
        zero_conv(&mut b.store, &gp.attention.as_ref().unwrap().v);
        let s = shared_attention(&b.store, &gp, &feats(3, 2, 2, 2)).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let (b, gp) = build(2, 0);
        let mut m = feats(2, 2, 2, 0);
        m.features[2] = Tensor::zeros(&[2, 3, 2]);
        assert!(matches!(
            shared_attention(&b.store, &gp, &m),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn zero_preactivations_average_modalities() {
        let (mut b, gp) = build(3, 2);
        for u in &gp.units {
            zero_conv(&mut b.store, &u.conv);
        }
        let rs = b.running_stats();
        let m = feats(3, 2, 2, 3);
        let s = shared_attention(&b.store, &gp, &m).unwrap();
        let f = task_fuse(&b.store, &rs, &gp, &m, &s, 2).unwrap();
        for i in 0..12 {
            let e =
                0.5 * (m.features[0].data()[i] + m.features[1].data()[i] + m.features[2].data()[i]);
            assert!((f.data()[i] - e).abs() < 1e-12);
        }
        let (_, tel) = fuse_all(&b.store, &rs, &gp, &m).unwrap();
        assert!(tel.iter().flatten().all(|v| *v == Some(0.5)));
    }

    #[test]
    fn task_index_out_of_range() {
        let (b, gp) = build(2, 0);
        let rs = b.running_stats();
        let m = feats(2, 2, 2, 0);
        let s = Tensor::zeros(&[2, 2, 2]);
        for r in [0, 5] {
            assert!(matches!(
                task_fuse(&b.store, &rs, &gp, &m, &s, r),
                Err(Error::Argument(_))
            ));
        }
    }

    #[test]
    fn identical_task_params_give_identical_features() {
        let (mut b, gp) = build(3, 6);
        for u in &gp.units[1..] {
            for (src, dst) in gp.units[0]
                .conv
                .param_ids()
                .into_iter()
                .zip(u.conv.param_ids())
            {
                let v = b.store.get(src).clone();
                b.store.set(dst, v).unwrap();
            }
        }
        let rs = b.running_stats();
        let (fs, tel) = fuse_all(&b.store, &rs, &gp, &feats(3, 2, 2, 7)).unwrap();
        for f in &fs[1..] {
            assert_eq!(f, &fs[0]);
        }
        assert!(tel.iter().all(|row| row == &tel[0]));
    }

    #[test]
    fn concat_fuse_cases() {
        let mut b = Builder::new(0);
        let cf = ConcatFuse::new(&mut b, 3, 2);
        let m = feats(2, 2, 2, 8);
        let sel = Tensor::from_fn(&[2, 6, 1, 1], |i| if i / 6 == i % 6 { 1.0 } else { 0.0 });
        let mut store = b.store.clone();
        store.set(cf.conv.weight, sel).unwrap();
        store
            .set(cf.conv.bias.unwrap(), Tensor::zeros(&[2]))
            .unwrap();
        assert_eq!(concat_fuse(&store, &cf, &m).unwrap(), m.features[0]);
        let zero = ModalityFeatures::new(
            Tensor::zeros(&[2, 2, 2]),
            Tensor::zeros(&[2, 2, 2]),
            Tensor::zeros(&[2, 2, 2]),
        );
        assert!(concat_fuse(&store, &cf, &zero)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let y = concat_fuse(&b.store, &cf, &m).unwrap();
        let o = pw(&b.store, &cf.conv, &concat(&m), 6, 4);
        assert!(y.data().iter().zip(&o).all(|(a, b)| (a - b).abs() < 1e-10));
    }

    #[test]
    fn mean_and_shared_gate_ablations() {
        let mut b = Builder::new(0);
        let gp = GateParams::new(&mut b, &Modality::ALL, &Task::ALL, 2, false, false, 1e-5);
        assert!(gp.attention.is_none());
        assert_eq!(gp.units.len(), 1);
        let m = feats(2, 2, 2, 1);
        let s = shared_attention(&b.store, &gp, &m).unwrap();
        for i in 0..8 {
            let e =
                (m.features[0].data()[i] + m.features[1].data()[i] + m.features[2].data()[i]) / 3.0;
            assert!((s.data()[i] - e).abs() < 1e-15);
        }
        let rs = b.running_stats();
        let (fs, _) = fuse_all(&b.store, &rs, &gp, &m).unwrap();
        assert_eq!(fs.len(), 4);
        assert!(fs.iter().all(|f| f == &fs[0]));
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..3 {
            let (mut b, gp) = build(2, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 30);
            let inputs: Vec<ParamId> = (0..3)
                .map(|i| b.uniform(&format!("h{i}"), &[2, 2, 2, 2], -1.0, 1.0))
                .collect();
            let probe = Tensor::uniform(&[2, 2, 2, 2], -1.0, 1.0, &mut rng);
            // Batch norm in training mode cancels any per-channel constant
            // added before it, so gate-conv biases have an exactly zero
            // gradient; they are checked separately below.
            let biases: Vec<ParamId> = gp.units.iter().filter_map(|u| u.conv.bias).collect();
            let mut ids: Vec<ParamId> = gp
                .param_ids()
                .into_iter()
                .filter(|id| !biases.contains(id))
                .collect();
            ids.extend(&inputs);
            let report = check_params(
                &b.store,
                &ids,
                |tape, store| {
                    let mut p = Pass::on_tape(std::mem::take(tape), store, &[], true);
                    let hs: Vec<Var> = inputs.iter().map(|&id| p.param(id)).collect();
                    let (fs, _) = fuse_all_var(&mut p, &gp, &hs)?;
                    let mut loss = p.tape.dot(fs[0], &probe)?;
                    for (k, &f) in fs.iter().enumerate().skip(1) {
                        let scaled = probe.map(|v| v * (k as f64 + 1.0));
                        let l = p.tape.dot(f, &scaled)?;
                        loss = p.tape.add(loss, l)?;
                    }
                    *tape = p.finish().0;
                    Ok(loss)
                },
                &GradCheckOptions::default(),
            )
            .unwrap();
            assert!(
                report.passed(),
                "{:?}",
                report.failures().collect::<Vec<_>>()
            );

            let mut p = Pass::train(&b.store, &[]);
            let hs: Vec<Var> = inputs.iter().map(|&id| p.param(id)).collect();
            let (fs, _) = fuse_all_var(&mut p, &gp, &hs).unwrap();
            let loss = p.tape.dot(fs[0], &probe).unwrap();
            let grads = p.finish().0.backward(loss).unwrap();
            for id in biases {
                if let Some(g) = grads.param(id) {
                    assert!(g.data().iter().all(|v| v.abs() < 1e-10));
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn attention_rows_are_stochastic_and_gates_bounded(seed in 0u64..10_000, scale in 0.1f64..5.0) {
            let (b, gp) = build(3, seed);
            let m = feats(3, 2, 3, seed + 1);
            let m = ModalityFeatures { features: m.features.iter().map(|f| f.map(|v| v * scale)).collect(), ..m };
            let a = attention_weights(&b.store, &gp, &m).unwrap().unwrap();
            prop_assert_eq!(a.shape(), &[3, 3]);
            for i in 0..3 {
                let s: f64 = (0..3).map(|j| a.at(&[i, j])).sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
            }
            let rs = running(&b, seed);
            let (_, tel) = fuse_all(&b.store, &rs, &gp, &m).unwrap();
            let mut p = Pass::eval(&b.store, &rs);
            let (hs, _) = bind(&mut p, &m).unwrap();
            let s = shared_attention_var(&mut p, &gp, &hs).unwrap();
            let (_, gates) = task_fuse_var(&mut p, &gp.units[0], &hs, s).unwrap();
            for g in gates {
                prop_assert!(p.value(g).data().iter().all(|&v| v > 0.0 && v < 1.0));
            }
            prop_assert!(tel.iter().flatten().all(|v| v.is_some_and(|x| x > 0.0 && x < 1.0)));
        }
    }
}
