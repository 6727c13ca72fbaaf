//! Per-task classification heads, the summed cross-entropy objective,
//! accuracy metrics, and momentum SGD with a step learning-rate schedule.

use serde::Serialize;

use crate::config::{ModelConfig, Schedule, Task};
use crate::error::{Error, Result};
use crate::mgmi::Telemetry;
use crate::nn::{add_batch, Builder, Linear, Pass};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Gradients, PoolKind, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TaskSpec {
    pub task: Task,
    pub num_classes: usize,
}

impl TaskSpec {
    pub fn new(task: Task, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::config(
                "classes",
                format!("{} needs at least 2 classes", task.name()),
            ));
        }
        Ok(Self { task, num_classes })
    }
}

/// Global average pooling followed by a linear classifier.
#[derive(Clone, Debug)]
pub struct Head {
    pub spec: TaskSpec,
    pub linear: Linear,
}

impl Head {
    pub fn new(b: &mut Builder, spec: TaskSpec, channels: usize) -> Self {
        let linear = b.scope("head", |b| {
            Linear::new(b, spec.task.name(), channels, spec.num_classes)
        });
        Self { spec, linear }
    }

    /// One head per active task.
    pub fn for_config(b: &mut Builder, cfg: &ModelConfig) -> Result<Vec<Self>> {
        cfg.ablation
            .active_tasks()
            .into_iter()
            .map(|t| {
                Ok(Self::new(
                    b,
                    TaskSpec::new(t, cfg.num_classes(t))?,
                    cfg.channels,
                ))
            })
            .collect()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.linear.param_ids()
    }
}

/// Logits `[N × K]` from task features `[N × C × H × W]`.
pub fn head_var<T: Scalar>(p: &mut Pass<'_, T>, head: &Head, f: Var) -> Result<Var> {
    let s = p.tape.shape(f).to_vec();
    if s.len() != 4 {
        return Err(Error::shape(
            "head",
            format!("expected [N×C×H×W], got {s:?}"),
        ));
    }
    let pooled = p
        .tape
        .pool(f, &PoolKind::AvgAdaptive { target: vec![1, 1] })?;
    let flat = p.tape.reshape(pooled, &[s[0], s[1]])?;
    head.linear.forward(p, flat)
}

/// Logits `[K]` for one `[C × H × W]` feature map (or `[N × K]` for a batch).
pub fn head_forward<T: Scalar>(
    store: &ParamStore<T>,
    head: &Head,
    f: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (x, single) = add_batch(f, 4)?;
    let mut p = Pass::eval(store, &[]);
    let x = p.input(x);
    let y = head_var(&mut p, head, x)?;
    let y = p.value(y);
    if single {
        y.reshape(&[head.spec.num_classes])
    } else {
        Ok(y.clone())
    }
}

/// Sum over tasks of the batch-mean cross-entropy; also returns each task's term.
pub fn total_loss_var<T: Scalar>(
    tape: &mut Tape<T>,
    logits: &[Var],
    labels: &[Vec<usize>],
) -> Result<(Var, Vec<Var>)> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(Error::Argument(format!(
            "{} logit sets for {} label sets",
            logits.len(),
            labels.len()
        )));
    }
    let mut terms = Vec::with_capacity(logits.len());
    for (&l, y) in logits.iter().zip(labels) {
        terms.push(tape.cross_entropy(l, y)?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok((total, terms))
}

/// Summed cross-entropy of one sample: `logits[r]` is `[K_r]`, `labels[r]` its class.
pub fn total_loss<T: Scalar>(logits: &[Tensor<T>], labels: &[usize]) -> Result<T> {
    let mut tape = Tape::inference();
    let mut vars = Vec::with_capacity(logits.len());
    for l in logits {
        let k = l.len();
        vars.push(tape.constant(l.reshape(&[1, k])?));
    }
    let labels: Vec<Vec<usize>> = labels.iter().map(|&y| vec![y]).collect();
    let (total, _) = total_loss_var(&mut tape, &vars, &labels)?;
    Ok(tape.value(total).data()[0])
}

pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0
}

/// Fraction of matching entries.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Argument(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Argument("accuracy of an empty dataset".into()));
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Arithmetic mean of per-task accuracies.
pub fn mean_accuracy(acc: &[f64]) -> f64 {
    acc.iter().sum::<f64>() / acc.len() as f64
}

/// Evaluation summary. Tasks that are not trained have `None` entries.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TaskMetrics {
    pub accuracy: [Option<f64>; 4],
    pub mean_accuracy: f64,
    pub loss: [Option<f64>; 4],
    pub loss_total: f64,
    pub gate_telemetry: Telemetry,
    pub param_count: usize,
    pub fps: f64,
}

/// Per-task running counts; merging two accumulators is associative and
/// commutative, so evaluation can be sharded.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsAccumulator {
    pub correct: [usize; 4],
    pub total: [usize; 4],
    pub loss_sum: [f64; 4],
}

impl MetricsAccumulator {
    /// Record one batch for `task`; `loss` is the batch-mean cross-entropy.
    pub fn add(
        &mut self,
        task: Task,
        predictions: &[usize],
        labels: &[usize],
        loss: f64,
    ) -> Result<()> {
        if predictions.len() != labels.len() {
            return Err(Error::Argument(
                "prediction and label streams differ in length".into(),
            ));
        }
        let r = task.index();
        self.correct[r] += predictions
            .iter()
            .zip(labels)
            .filter(|(p, l)| p == l)
            .count();
        self.total[r] += labels.len();
        self.loss_sum[r] += loss * labels.len() as f64;
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) {
        for r in 0..4 {
            self.correct[r] += other.correct[r];
            self.total[r] += other.total[r];
            self.loss_sum[r] += other.loss_sum[r];
        }
    }

    pub fn finish(&self, tasks: &[Task]) -> Result<TaskMetrics> {
        if tasks.is_empty() || tasks.iter().any(|t| self.total[t.index()] == 0) {
            return Err(Error::Argument("metrics of an empty dataset".into()));
        }
        let mut m = TaskMetrics::default();
        for &t in tasks {
            let r = t.index();
            let n = self.total[r] as f64;
            m.accuracy[r] = Some(self.correct[r] as f64 / n);
            m.loss[r] = Some(self.loss_sum[r] / n);
        }
        let acc: Vec<f64> = m.accuracy.iter().flatten().copied().collect();
        m.mean_accuracy = mean_accuracy(&acc);
        m.loss_total = m.loss.iter().flatten().sum();
        Ok(m)
    }
}

/// Metrics over whole prediction/label streams, one stream per task in `tasks`.
pub fn compute_metrics(
    tasks: &[Task],
    predictions: &[Vec<usize>],
    labels: &[Vec<usize>],
) -> Result<TaskMetrics> {
    if predictions.len() != tasks.len() || labels.len() != tasks.len() {
        return Err(Error::Argument(
            "one prediction and label stream per task required".into(),
        ));
    }
    let mut acc = MetricsAccumulator::default();
    for ((&t, p), l) in tasks.iter().zip(predictions).zip(labels) {
        acc.add(t, p, l, 0.0)?;
    }
    acc.finish(tasks)
}

/// One line of the metrics log; field order is the serialized order.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_der: Option<f64>,
    pub loss_dbr: Option<f64>,
    pub loss_tcr: Option<f64>,
    pub loss_vbr: Option<f64>,
    pub acc_der: Option<f64>,
    pub acc_dbr: Option<f64>,
    pub acc_tcr: Option<f64>,
    pub acc_vbr: Option<f64>,
    pub macc: f64,
    /// Task × modality, row-major.
    pub gate_telemetry: Vec<Option<f64>>,
    pub param_count: usize,
    pub fps: f64,
}

impl MetricsRecord {
    pub fn new(epoch: usize, m: &TaskMetrics) -> Self {
        Self {
            epoch,
            loss_total: m.loss_total,
            loss_der: m.loss[0],
            loss_dbr: m.loss[1],
            loss_tcr: m.loss[2],
            loss_vbr: m.loss[3],
            acc_der: m.accuracy[0],
            acc_dbr: m.accuracy[1],
            acc_tcr: m.accuracy[2],
            acc_vbr: m.accuracy[3],
            macc: m.mean_accuracy,
            gate_telemetry: m.gate_telemetry.iter().flatten().copied().collect(),
            param_count: m.param_count,
            fps: m.fps,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics record serializes")
    }
}

/// Momentum SGD with coupled L2 weight decay:
/// `v ← μ·v + g + λ·w`, `w ← w − η·v`, with `η` from the schedule.
#[derive(Clone, Debug)]
pub struct Sgd<T: Scalar = f64> {
    pub schedule: Schedule,
    pub epoch: usize,
    velocity: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(schedule: Schedule) -> Self {
        Self {
            schedule,
            epoch: 0,
            velocity: Vec::new(),
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.schedule.rate(self.epoch)
    }

    /// Update every parameter that has a gradient. A non-finite gradient
    /// aborts the step before anything changes and names the parameter.
    /// With `clip_norm` set, the gradient is first rescaled so its global
    /// L2 norm (over all updated parameters) does not exceed it.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        let updates: Vec<(ParamId, Tensor<T>)> = store
            .ids()
            .filter_map(|id| grads.param(id).map(|g| (id, g)))
            .collect();
        for (id, g) in &updates {
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    name: store.name(*id).to_string(),
                });
            }
        }
        let norm = updates
            .iter()
            .flat_map(|(_, g)| g.data().iter())
            .map(|g| g.to_f64_lossy().powi(2))
            .sum::<f64>()
            .sqrt();
        let clip = match self.schedule.clip_norm {
            Some(c) if norm > c => T::from_f64_lossy(c / norm),
            _ => T::one(),
        };
        let eta = T::from_f64_lossy(self.learning_rate());
        let mu = T::from_f64_lossy(self.schedule.momentum);
        let wd = T::from_f64_lossy(self.schedule.weight_decay);
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        for (id, g) in updates {
            let w = store.get(id);
            let v = self.velocity[id.index()].get_or_insert_with(|| vec![T::zero(); w.len()]);
            let data: Vec<T> = w
                .data()
                .iter()
                .zip(g.data())
                .zip(v.iter_mut())
                .map(|((&w, &g), v)| {
                    *v = mu * *v + clip * g + wd * w;
                    w - eta * *v
                })
                .collect();
            store.set(id, Tensor::new(w.shape().to_vec(), data)?)?;
        }
        Ok(())
    }
}

/// Stop when the validation mean accuracy has not improved by at least
/// `min_delta` for `patience` consecutive epochs.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    pub min_delta: f64,
    best: Option<f64>,
    stale: usize,
}

impl Default for EarlyStopping {
    /// 0.1 percentage points over 15 epochs.
    fn default() -> Self {
        Self::new(15, 0.001)
    }
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        Self {
            patience,
            min_delta,
            best: None,
            stale: 0,
        }
    }

    /// Record one epoch's score; returns whether training should stop.
    pub fn observe(&mut self, macc: f64) -> bool {
        match self.best {
            Some(b) if macc < b + self.min_delta => self.stale += 1,
            _ => {
                self.best = Some(macc);
                self.stale = 0;
            }
        }
        self.stale >= self.patience
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }
}
