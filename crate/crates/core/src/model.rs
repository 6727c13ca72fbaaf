//! The assembled network: two image branches and the joint branch feed the
//! fusion stage, whose per-task features go to the classification heads.

use crate::config::{Modality, ModelConfig, Task};
use crate::data::SampleBundle;
use crate::error::{Error, Result};
use crate::heads::{argmax, head_var, total_loss_var, Head, MetricsAccumulator, Sgd, TaskMetrics};
use crate::joints::{joints_var, JointsParams};
use crate::mgmi::{concat_fuse_var, fuse_all_var, ConcatFuse, GateParams, Telemetry};
use crate::mts::{MtsBranch, ViewId};
use crate::nn::{Builder, Pass};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{RunningStats, Var};
use crate::tensor::Tensor;

/// Gated multimodal integration or the concatenation baseline.
#[derive(Clone, Debug)]
pub enum Fusion {
    Gated(GateParams),
    Concat(ConcatFuse),
}

impl Fusion {
    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            Fusion::Gated(g) => g.param_ids(),
            Fusion::Concat(c) => c.param_ids(),
        }
    }
}

/// Architecture: parameter handles for every module of one configuration.
#[derive(Clone, Debug)]
pub struct Network {
    pub cfg: ModelConfig,
    pub tasks: Vec<Task>,
    pub modalities: Vec<Modality>,
    pub exterior: Option<MtsBranch>,
    pub interior: Option<MtsBranch>,
    pub joints: Option<JointsParams>,
    pub fusion: Fusion,
    pub heads: Vec<Head>,
}

/// Parameter count of one module.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModuleCount {
    pub module: &'static str,
    pub params: usize,
}

impl Network {
    /// Per-module learnable scalar counts, in forward order.
    pub fn breakdown<T: Scalar>(&self, store: &ParamStore<T>) -> Vec<ModuleCount> {
        let count = |ids: Vec<ParamId>| ids.iter().map(|&id| store.get(id).len()).sum();
        let mut out = Vec::new();
        let mut push = |module, ids: Option<Vec<ParamId>>| {
            if let Some(ids) = ids {
                out.push(ModuleCount {
                    module,
                    params: count(ids),
                });
            }
        };
        push("exterior", self.exterior.as_ref().map(MtsBranch::param_ids));
        push("interior", self.interior.as_ref().map(MtsBranch::param_ids));
        push("joints", self.joints.as_ref().map(JointsParams::param_ids));
        push(
            match self.fusion {
                Fusion::Gated(_) => "mgmi",
                Fusion::Concat(_) => "concat_fuse",
            },
            Some(self.fusion.param_ids()),
        );
        push(
            "heads",
            Some(self.heads.iter().flat_map(Head::param_ids).collect()),
        );
        out
    }
}

/// Batched network input.
#[derive(Clone, Debug)]
pub struct Batch<T: Scalar = f64> {
    /// `[N × T × 3 × H_v × W_v]` per view, exterior then interior order.
    pub views: Vec<(ViewId, Tensor<T>)>,
    /// `[N × T × J × 3]`.
    pub joints: Tensor<T>,
    /// Labels per task, in task order.
    pub labels: [Vec<usize>; 4],
}

impl<T: Scalar> Batch<T> {
    pub fn from_samples(samples: &[&SampleBundle<T>]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Argument("empty batch".into()))?;
        let mut views = Vec::with_capacity(6);
        for v in first.views() {
            let frames: Vec<Tensor<T>> = samples
                .iter()
                .map(|s| {
                    s.view(v.view).map(|x| x.frames.clone()).ok_or_else(|| {
                        Error::Input(format!("sample {}: missing view {}", s.id, v.view.name()))
                    })
                })
                .collect::<Result<_>>()?;
            views.push((v.view, Tensor::stack(&frames)?));
        }
        let joints: Vec<Tensor<T>> = samples.iter().map(|s| s.joints.joints.clone()).collect();
        let labels = [0, 1, 2, 3].map(|r| samples.iter().map(|s| s.labels[r]).collect());
        Ok(Self {
            views,
            joints: Tensor::stack(&joints)?,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.joints.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn view(&self, id: ViewId) -> Result<&Tensor<T>> {
        self.views
            .iter()
            .find(|(v, _)| *v == id)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Input(format!("batch lacks view {}", id.name())))
    }
}

/// Forward result: logits per active task and gate telemetry (when gated).
#[derive(Debug)]
pub struct Output {
    pub logits: Vec<Var>,
    pub telemetry: Telemetry,
}

/// Whole-network forward over a batch.
pub fn network_var<T: Scalar>(
    p: &mut Pass<'_, T>,
    net: &Network,
    batch: &Batch<T>,
) -> Result<Output> {
    let mut features = Vec::with_capacity(net.modalities.len());
    for &m in &net.modalities {
        let f = match m {
            Modality::Exterior | Modality::Interior => {
                let (branch, ids) = match m {
                    Modality::Exterior => (net.exterior.as_ref(), ViewId::EXTERIOR),
                    _ => (net.interior.as_ref(), ViewId::INTERIOR),
                };
                let branch = branch.expect("active modality has a branch");
                let views = ids
                    .iter()
                    .map(|&v| Ok(p.input(batch.view(v)?.clone())))
                    .collect::<Result<Vec<Var>>>()?;
                branch.forward(p, &views)?
            }
            Modality::Joints => {
                let x = p.input(batch.joints.clone());
                joints_var(
                    p,
                    net.joints.as_ref().expect("active modality has a branch"),
                    x,
                )?
            }
        };
        features.push(f);
    }
    let (fused, telemetry) = match &net.fusion {
        Fusion::Gated(gp) => fuse_all_var(p, gp, &features)?,
        Fusion::Concat(cf) => {
            let f = concat_fuse_var(p, cf, &features)?;
            (vec![f; net.tasks.len()], [[None; 3]; 4])
        }
    };
    let logits = net
        .heads
        .iter()
        .zip(fused)
        .map(|(h, f)| head_var(p, h, f))
        .collect::<Result<_>>()?;
    Ok(Output { logits, telemetry })
}

/// Loss and per-task losses of one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub task_losses: Vec<f64>,
}

/// Network plus weights and normalisation statistics.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f64> {
    pub net: Network,
    pub store: ParamStore<T>,
    pub running: Vec<RunningStats<T>>,
}

impl Model<f64> {
    /// Build and initialise from `cfg.seed`.
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let a = &cfg.ablation;
        let modalities = a.active_modalities();
        let mut b = Builder::new(cfg.seed);
        let has = |m| modalities.contains(&m);
        let exterior = has(Modality::Exterior)
            .then(|| b.scope("exterior", |b| MtsBranch::new(b, cfg, &ViewId::EXTERIOR)))
            .transpose()?;
        let interior = has(Modality::Interior)
            .then(|| b.scope("interior", |b| MtsBranch::new(b, cfg, &ViewId::INTERIOR)))
            .transpose()?;
        let joints =
            has(Modality::Joints).then(|| b.scope("joints", |b| JointsParams::for_config(b, cfg)));
        let fusion = if a.no_mgmi {
            Fusion::Concat(ConcatFuse::new(&mut b, modalities.len(), cfg.channels))
        } else {
            Fusion::Gated(b.scope("mgmi", |b| GateParams::for_config(b, cfg)))
        };
        let heads = Head::for_config(&mut b, cfg)?;
        let running = b.running_stats();
        Ok(Self {
            net: Network {
                cfg: cfg.clone(),
                tasks: a.active_tasks(),
                modalities,
                exterior,
                interior,
                joints,
                fusion,
                heads,
            },
            store: b.store,
            running,
        })
    }
}

impl<T: Scalar> Model<T> {
    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Same network and weights at another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            net: self.net.clone(),
            store: self.store.cast(),
            running: self.running.iter().map(RunningStats::cast).collect(),
        }
    }

    fn active_labels(&self, batch: &Batch<T>) -> Vec<Vec<usize>> {
        self.net
            .tasks
            .iter()
            .map(|t| batch.labels[t.index()].clone())
            .collect()
    }

    /// One optimisation step on `batch`: forward with batch statistics,
    /// summed task loss, backward, running-statistics update, SGD update.
    pub fn train_step(&mut self, opt: &mut Sgd<T>, batch: &Batch<T>) -> Result<StepStats> {
        let labels = self.active_labels(batch);
        let mut p = Pass::train(&self.store, &self.running);
        let out = network_var(&mut p, &self.net, batch)?;
        let (loss, terms) = total_loss_var(&mut p.tape, &out.logits, &labels)?;
        let stats = StepStats {
            loss: p.value(loss).data()[0].to_f64_lossy(),
            task_losses: terms
                .iter()
                .map(|&t| p.value(t).data()[0].to_f64_lossy())
                .collect(),
        };
        if !stats.loss.is_finite() {
            return Err(Error::NonFinite {
                name: "loss".into(),
            });
        }
        let (tape, batch_stats) = p.finish();
        let grads = tape.backward(loss)?;
        for (slot, s) in &batch_stats {
            self.running[*slot].update(s);
        }
        opt.step(&mut self.store, &grads)?;
        Ok(stats)
    }

    /// Inference logits `[N × K]` per active task and gate telemetry.
    pub fn predict(&self, batch: &Batch<T>) -> Result<(Vec<Tensor<T>>, Telemetry)> {
        let mut p = Pass::eval(&self.store, &self.running);
        let out = network_var(&mut p, &self.net, batch)?;
        Ok((
            out.logits.iter().map(|&l| p.value(l).clone()).collect(),
            out.telemetry,
        ))
    }

    /// Accuracy, loss and sample-weighted mean gate telemetry over `samples`.
    pub fn evaluate(&self, samples: &[SampleBundle<T>], batch_size: usize) -> Result<TaskMetrics> {
        if samples.is_empty() || batch_size == 0 {
            return Err(Error::Argument(
                "evaluation needs samples and a positive batch size".into(),
            ));
        }
        let mut acc = MetricsAccumulator::default();
        let mut tel_sum = [[0.0; 3]; 4];
        let mut tel_seen = [[false; 3]; 4];
        for chunk in samples.chunks(batch_size) {
            let refs: Vec<&SampleBundle<T>> = chunk.iter().collect();
            let batch = Batch::from_samples(&refs)?;
            let (logits, tel) = self.predict(&batch)?;
            let labels = self.active_labels(&batch);
            let mut tape = crate::tape::Tape::inference();
            for ((task, l), y) in self.net.tasks.iter().zip(&logits).zip(&labels) {
                let k = l.shape()[1];
                let preds: Vec<usize> = l.data().chunks(k).map(argmax).collect();
                let lv = tape.constant(l.clone());
                let ce = tape.cross_entropy(lv, y)?;
                acc.add(*task, &preds, y, tape.value(ce).data()[0].to_f64_lossy())?;
            }
            for (r, row) in tel.iter().enumerate() {
                for (m, v) in row.iter().enumerate() {
                    if let Some(v) = v {
                        tel_sum[r][m] += v * chunk.len() as f64;
                        tel_seen[r][m] = true;
                    }
                }
            }
        }
        let mut m = acc.finish(&self.net.tasks)?;
        let n = samples.len() as f64;
        for r in 0..4 {
            for k in 0..3 {
                m.gate_telemetry[r][k] = tel_seen[r][k].then(|| tel_sum[r][k] / n);
            }
        }
        m.param_count = self.num_params();
        Ok(m)
    }
}
