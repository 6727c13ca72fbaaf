//! Harness operations behind the command line: parameter counting,
//! throughput benchmarking, gradient-check runs, toy training and ablations.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{Modality, ModelConfig, Task};
use crate::data::{augment, generate_synthetic, SampleBundle, SyntheticRecipe};
use crate::error::{Error, Result};
use crate::gradcheck::{check, check_params, GradCheckOptions, GradCheckReport};
use crate::heads::{head_var, total_loss_var, Head, MetricsRecord, Sgd, TaskMetrics};
use crate::joints::{joints_var, JointsParams};
use crate::mgmi::{concat_fuse_var, fuse_all_var, ConcatFuse, GateParams};
use crate::model::{network_var, Batch, Model, ModuleCount};
use crate::mts::{mts_block_var, stem_var, MtsBlockParams, StemParams, ViewId};
use crate::nn::{Builder, Pass};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Activation, BnMode, ConvKind, PoolKind, RunningStats, Tape, Var};
use crate::tensor::Tensor;

/// Short stable fingerprint of a configuration.
pub fn config_hash(cfg: &ModelConfig) -> String {
    let digest = Sha256::digest(cfg.to_text().as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamReport {
    pub total: usize,
    pub breakdown: Vec<ModuleCount>,
}

/// Exact learnable-scalar count of the network `cfg` describes.
pub fn count_params(cfg: &ModelConfig) -> Result<ParamReport> {
    let model = Model::new(cfg)?;
    Ok(ParamReport {
        total: model.num_params(),
        breakdown: model.net.breakdown(&model.store),
    })
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct BenchRecord {
    pub config_hash: String,
    pub param_count: usize,
    /// Samples per second over the measured window; a sample is one full
    /// multimodal bundle.
    pub fps: f64,
    pub latency_p50_ms: f64,
    pub latency_p95_ms: f64,
    pub threads: usize,
    pub duration_s: f64,
    pub batch_size: usize,
    pub batches: usize,
    pub warmup_batches: usize,
    pub precision: &'static str,
}

/// Batches run before timing starts.
pub const WARMUP_BATCHES: usize = 10;

/// Nearest-rank percentile of sorted values.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Single-precision inference throughput. `threads` workers share the
/// weights and each run whole batches until `duration_s` has elapsed.
pub fn bench_fps(
    cfg: &ModelConfig,
    batch_size: usize,
    duration_s: f64,
    threads: usize,
) -> Result<BenchRecord> {
    if !(duration_s > 0.0) {
        return Err(Error::Argument(format!(
            "duration must be positive, got {duration_s}"
        )));
    }
    if batch_size == 0 || threads == 0 {
        return Err(Error::Argument(
            "batch size and thread count must be positive".into(),
        ));
    }
    let model = Model::new(cfg)?.cast::<f32>();
    let recipe = SyntheticRecipe::for_config(cfg, 0.1);
    let samples: Vec<SampleBundle<f32>> = generate_synthetic(&recipe, batch_size, cfg.seed)?
        .map(|s| s.cast())
        .collect();
    let refs: Vec<&SampleBundle<f32>> = samples.iter().collect();
    let batch = Batch::from_samples(&refs)?;
    for _ in 0..WARMUP_BATCHES {
        model.predict(&batch)?;
    }
    let window = Duration::from_secs_f64(duration_s);
    let start = Instant::now();
    let per_worker: Vec<Result<Vec<f64>>> = std::thread::scope(|s| {
        let workers: Vec<_> = (0..threads)
            .map(|_| {
                s.spawn(|| {
                    let mut lat = Vec::new();
                    while start.elapsed() < window || lat.is_empty() {
                        let t0 = Instant::now();
                        model.predict(&batch)?;
                        lat.push(t0.elapsed().as_secs_f64() * 1e3);
                    }
                    Ok(lat)
                })
            })
            .collect();
        workers
            .into_iter()
            .map(|w| w.join().expect("bench worker panicked"))
            .collect()
    });
    let wall = start.elapsed().as_secs_f64();
    let mut latencies: Vec<f64> = Vec::new();
    for w in per_worker {
        latencies.extend(w?);
    }
    latencies.sort_by(f64::total_cmp);
    Ok(BenchRecord {
        config_hash: config_hash(cfg),
        param_count: model.num_params(),
        fps: (latencies.len() * batch_size) as f64 / wall,
        latency_p50_ms: percentile(&latencies, 0.50),
        latency_p95_ms: percentile(&latencies, 0.95),
        threads,
        duration_s: wall,
        batch_size,
        batches: latencies.len(),
        warmup_batches: WARMUP_BATCHES,
        precision: "f32",
    })
}

/// Modules accepted by [`gradcheck_run`].
pub const GRADCHECK_SELECTORS: [&str; 8] = [
    "tensor-core",
    "ssm",
    "stem",
    "mts_block",
    "joints",
    "mgmi",
    "heads",
    "network",
];

fn probe_loss(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let w = Tensor::uniform(
        &shape,
        -1.0,
        1.0,
        &mut ChaCha8Rng::seed_from_u64(seed ^ 0x9e37),
    );
    tape.dot(out, &w)
}

/// Central-difference check of every parameter tensor of the selected
/// module (and its input), on a desk-sized configuration built from `seed`.
pub fn gradcheck_run(
    selector: &str,
    seed: u64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = |shape: &[usize]| Tensor::uniform(shape, -1.0, 1.0, &mut rng);
    let mut b = Builder::new(seed);
    match selector {
        "tensor-core" => {
            let mut report = GradCheckReport {
                tolerance: opts.tolerance,
                tensors: Vec::new(),
            };
            type Probe = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;
            let running = RunningStats {
                mean: vec![0.1, -0.2],
                var: vec![0.5, 2.0],
                momentum: 0.1,
            };
            let cases: Vec<(&str, Vec<Tensor>, Probe)> = vec![
                (
                    "matmul.",
                    vec![u(&[3, 4]), u(&[4, 2])],
                    Box::new(move |t, v| {
                        let o = t.matmul(v[0], v[1])?;
                        probe_loss(t, o, seed)
                    }),
                ),
                (
                    "conv2d.",
                    vec![u(&[2, 2, 5, 5]), u(&[3, 2, 3, 3]), u(&[3])],
                    Box::new(move |t, v| {
                        let o = t.conv(v[0], v[1], Some(v[2]), ConvKind::D2, &[2], &[1])?;
                        probe_loss(t, o, seed)
                    }),
                ),
                (
                    "depthwise.",
                    vec![u(&[1, 3, 5, 5]), u(&[3, 1, 3, 3])],
                    Box::new(move |t, v| {
                        let o = t.conv(v[0], v[1], None, ConvKind::Depthwise2d, &[1], &[1])?;
                        probe_loss(t, o, seed)
                    }),
                ),
                (
                    "conv3d.",
                    vec![u(&[1, 2, 3, 4, 3]), u(&[2, 2, 3, 3, 3])],
                    Box::new(move |t, v| {
                        let o = t.conv(v[0], v[1], None, ConvKind::D3, &[1], &[1])?;
                        probe_loss(t, o, seed)
                    }),
                ),
                (
                    "pool.",
                    vec![u(&[2, 2, 5, 4])],
                    Box::new(move |t, v| {
                        let kind = PoolKind::AvgFixed {
                            kernel: vec![3, 3],
                            stride: vec![1],
                            pad: vec![1],
                        };
                        let a = t.pool(v[0], &kind)?;
                        let b = t.pool(a, &PoolKind::AvgAdaptive { target: vec![3, 2] })?;
                        let c = t.upsample_nearest(b, &[5, 4])?;
                        probe_loss(t, c, seed)
                    }),
                ),
                (
                    "activation.",
                    vec![u(&[3, 4])],
                    Box::new(move |t, v| {
                        let s = t.sigmoid(v[0]);
                        let g = t.gelu(v[0]);
                        let p = t.softplus(v[0]);
                        let sm = t.activation(v[0], Activation::Softmax { axis: 1 })?;
                        let a = t.add(s, g)?;
                        let b = t.mul(p, sm)?;
                        let c = t.sub(a, b)?;
                        probe_loss(t, c, seed)
                    }),
                ),
                (
                    "batchnorm.",
                    vec![u(&[3, 2, 2]), u(&[2]), u(&[2])],
                    Box::new(move |t, v| {
                        let (a, _) = t.batchnorm(v[0], v[1], v[2], 1e-5, BnMode::Train)?;
                        let (b, _) = t.batchnorm(v[0], v[1], v[2], 1e-5, BnMode::Eval(&running))?;
                        let c = t.add(a, b)?;
                        probe_loss(t, c, seed)
                    }),
                ),
                (
                    "linear_ce.",
                    vec![u(&[3, 4]), u(&[4, 3]), u(&[3])],
                    Box::new(move |t, v| {
                        let o = t.linear(v[0], v[1], Some(v[2]))?;
                        t.cross_entropy(o, &[0, 2, 1])
                    }),
                ),
                (
                    "scan.",
                    vec![u(&[2, 6, 3]), u(&[6, 2]), u(&[6, 2]), u(&[6, 2]), u(&[6])],
                    Box::new(move |t, v| {
                        let la = t.softplus(v[1]);
                        let la = t.neg(la);
                        let f = t.scan(v[0], la, v[2], v[3], v[4], 3, false)?;
                        let b = t.scan(v[0], la, v[2], v[3], v[4], 3, true)?;
                        let s = t.add(f, b)?;
                        probe_loss(t, s, seed)
                    }),
                ),
            ];
            for (prefix, inputs, f) in cases {
                let named: Vec<(String, Tensor)> = inputs
                    .into_iter()
                    .enumerate()
                    .map(|(i, t)| (format!("in{i}"), t))
                    .collect();
                let mut o = opts.clone();
                o.corrupt = opts
                    .corrupt
                    .as_ref()
                    .and_then(|c| c.strip_prefix(prefix))
                    .map(str::to_string);
                report.merge(check(&named, f, &o)?, prefix);
            }
            Ok(report)
        }
        "ssm" => {
            let x = u(&[2, 8, 3]);
            let a = u(&[8, 2]);
            let bm = u(&[8, 2]);
            let c = u(&[8, 2]);
            let d = u(&[8]);
            let inputs: Vec<(String, Tensor)> = [("x", x), ("a", a), ("b", bm), ("c", c), ("d", d)]
                .into_iter()
                .map(|(n, t)| (n.to_string(), t))
                .collect();
            check(
                &inputs,
                |t, v| {
                    let la = t.softplus(v[1]);
                    let la = t.neg(la);
                    let f = t.scan(v[0], la, v[2], v[3], v[4], 4, false)?;
                    let r = t.scan(v[0], la, v[2], v[3], v[4], 4, true)?;
                    let s = t.add(f, r)?;
                    probe_loss(t, s, seed)
                },
                opts,
            )
        }
        "stem" => {
            let sp = StemParams::new(&mut b, &ViewId::EXTERIOR, 2, 12, [3, 3], 3, 2)?;
            let views: Vec<ParamId> = ViewId::EXTERIOR
                .iter()
                .map(|v| b.uniform(&format!("input.{}", v.name()), &[2, 2, 3, 6, 6], 0.0, 1.0))
                .collect();
            let mut ids = sp.param_ids();
            ids.extend(&views);
            run_params(
                &b.store,
                &ids,
                |p| {
                    let vs: Vec<Var> = views.iter().map(|&id| p.param(id)).collect();
                    stem_var(p, &sp, &vs)
                },
                seed,
                opts,
            )
        }
        "mts_block" => {
            let mut report = GradCheckReport {
                tolerance: opts.tolerance,
                tensors: Vec::new(),
            };
            for (dual, global_local, tag) in [
                (true, true, "full."),
                (false, true, "no_dual_scan."),
                (true, false, "no_global_local."),
            ] {
                let mut b = Builder::new(seed);
                let bp = MtsBlockParams::new(&mut b, 8, 4, 2, 2, dual, global_local)?;
                let x = b.uniform("input", &[2, 8, 3, 3], -1.0, 1.0);
                let mut ids = bp.param_ids();
                ids.push(x);
                let r = run_params(
                    &b.store,
                    &ids,
                    |p| {
                        let v = p.param(x);
                        mts_block_var(p, &bp, v)
                    },
                    seed,
                    opts,
                )?;
                report.merge(r, tag);
            }
            Ok(report)
        }
        "joints" => {
            let jp = JointsParams::new(&mut b, 4, 3, 4, [2, 2]);
            let x = b.uniform("input", &[2, 4, 3, 3], 0.0, 1.0);
            let mut ids = jp.param_ids();
            ids.push(x);
            run_params(
                &b.store,
                &ids,
                |p| {
                    let v = p.param(x);
                    joints_var(p, &jp, v)
                },
                seed,
                opts,
            )
        }
        "mgmi" => {
            let gp = GateParams::new(&mut b, &Modality::ALL, &Task::ALL, 2, true, true, 1e-5);
            let cf = ConcatFuse::new(&mut b, 3, 2);
            let hs: Vec<ParamId> = (0..3)
                .map(|i| b.uniform(&format!("input.h{i}"), &[2, 2, 2, 2], -1.0, 1.0))
                .collect();
            // gate-conv biases precede batch norm, which cancels them exactly
            let biases: Vec<ParamId> = gp.units.iter().filter_map(|u| u.conv.bias).collect();
            let mut ids: Vec<ParamId> = gp
                .param_ids()
                .into_iter()
                .filter(|id| !biases.contains(id))
                .collect();
            ids.extend(cf.param_ids());
            ids.extend(&hs);
            run_params(
                &b.store,
                &ids,
                |p| {
                    let vs: Vec<Var> = hs.iter().map(|&id| p.param(id)).collect();
                    let (fs, _) = fuse_all_var(p, &gp, &vs)?;
                    let c = concat_fuse_var(p, &cf, &vs)?;
                    let mut parts = fs;
                    parts.push(c);
                    p.tape.concat(&parts, 1)
                },
                seed,
                opts,
            )
        }
        "heads" => {
            let heads: Vec<Head> = Task::ALL
                .iter()
                .map(|&t| Ok(Head::new(&mut b, crate::heads::TaskSpec::new(t, 3)?, 4)))
                .collect::<Result<_>>()?;
            let f = b.uniform("input", &[3, 4, 2, 2], -1.0, 1.0);
            let mut ids: Vec<ParamId> = heads.iter().flat_map(Head::param_ids).collect();
            ids.push(f);
            let labels = vec![vec![0, 2, 1], vec![1, 1, 0], vec![2, 0, 0], vec![0, 1, 2]];
            check_params(
                &b.store,
                &ids,
                |tape, store| {
                    let mut p = Pass::on_tape(std::mem::take(tape), store, &[], true);
                    let x = p.param(f);
                    let logits = heads
                        .iter()
                        .map(|h| head_var(&mut p, h, x))
                        .collect::<Result<Vec<_>>>()?;
                    let (l, _) = total_loss_var(&mut p.tape, &logits, &labels)?;
                    *tape = p.finish().0;
                    Ok(l)
                },
                opts,
            )
        }
        "network" => {
            let mut cfg = ModelConfig::toy();
            cfg.frame_count = 2;
            cfg.channels = 6;
            cfg.height = 2;
            cfg.width = 2;
            cfg.state_dim = 2;
            cfg.view_height = 4;
            cfg.view_width = 4;
            cfg.global_grid = 1;
            cfg.joint_count = 3;
            cfg.classes = [2; 4];
            cfg.seed = seed;
            let model = Model::new(&cfg)?;
            let recipe = SyntheticRecipe::for_config(&cfg, 0.1);
            let samples: Vec<SampleBundle> = generate_synthetic(&recipe, 3, seed)?.collect();
            let refs: Vec<&SampleBundle> = samples.iter().collect();
            let batch = Batch::from_samples(&refs)?;
            let gate_biases: Vec<ParamId> = match &model.net.fusion {
                crate::model::Fusion::Gated(gp) => {
                    gp.units.iter().filter_map(|u| u.conv.bias).collect()
                }
                crate::model::Fusion::Concat(_) => Vec::new(),
            };
            let ids: Vec<ParamId> = model
                .store
                .ids()
                .filter(|id| !gate_biases.contains(id))
                .collect();
            let labels: Vec<Vec<usize>> = model
                .net
                .tasks
                .iter()
                .map(|t| batch.labels[t.index()].clone())
                .collect();
            check_params(
                &model.store,
                &ids,
                |tape, store| {
                    let mut p = Pass::on_tape(std::mem::take(tape), store, &model.running, true);
                    let out = network_var(&mut p, &model.net, &batch)?;
                    let (l, _) = total_loss_var(&mut p.tape, &out.logits, &labels)?;
                    *tape = p.finish().0;
                    Ok(l)
                },
                opts,
            )
        }
        other => Err(Error::Argument(format!(
            "unknown gradcheck module {other:?}; expected one of {}",
            GRADCHECK_SELECTORS.join(", ")
        ))),
    }
}

/// Check `ids` under a probe loss on the module output built by `f`.
fn run_params<F>(
    store: &ParamStore<f64>,
    ids: &[ParamId],
    f: F,
    seed: u64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Pass<'_, f64>) -> Result<Var>,
{
    check_params(
        store,
        ids,
        |tape, store| {
            let mut p = Pass::on_tape(std::mem::take(tape), store, &[], true);
            let out = f(&mut p)?;
            let l = probe_loss(&mut p.tape, out, seed)?;
            *tape = p.finish().0;
            Ok(l)
        },
        opts,
    )
}

/// Toy-training knobs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub steps: usize,
    pub train_samples: usize,
    pub eval_samples: usize,
    /// Evaluate on the held-out set every this many steps (and at the end).
    pub eval_every: usize,
    pub augment: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 200,
            train_samples: 512,
            eval_samples: 256,
            eval_every: 50,
            augment: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    /// Training loss of every step.
    pub losses: Vec<f64>,
    /// One record per evaluation.
    pub records: Vec<MetricsRecord>,
    /// Held-out metrics after the last step.
    pub metrics: TaskMetrics,
    pub model: Model,
}

impl TrainReport {
    pub fn initial_loss(&self) -> f64 {
        self.losses[0]
    }

    /// Mean training loss over the last ten steps.
    pub fn final_loss(&self) -> f64 {
        let tail = &self.losses[self.losses.len().saturating_sub(10)..];
        tail.iter().sum::<f64>() / tail.len() as f64
    }
}

/// Train on synthetic data from `recipe` (seeded by `cfg.seed`) and evaluate
/// on an independently seeded held-out set. `log` receives each record.
pub fn train_toy(
    cfg: &ModelConfig,
    recipe: &SyntheticRecipe,
    opts: &TrainOptions,
    mut log: impl FnMut(&MetricsRecord),
) -> Result<TrainReport> {
    if opts.steps == 0 || opts.train_samples == 0 || opts.eval_samples == 0 {
        return Err(Error::Argument(
            "steps and sample counts must be positive".into(),
        ));
    }
    let mut model = Model::new(cfg)?;
    let train: Vec<SampleBundle> =
        generate_synthetic(recipe, opts.train_samples, cfg.seed)?.collect();
    let held_out: Vec<SampleBundle> =
        generate_synthetic(recipe, opts.eval_samples, cfg.seed ^ 0x5eed_0f_e7a1)?.collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut opt = Sgd::new(cfg.schedule.clone());
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(opts.steps);
    let mut records = Vec::new();
    let eval_every = opts.eval_every.max(1);
    let mut metrics = None;
    for step in 0..opts.steps {
        if order.len() < cfg.batch_size {
            let mut fresh: Vec<usize> = (0..train.len()).collect();
            fresh.shuffle(&mut rng);
            order.extend(fresh);
        }
        let picked: Vec<usize> = order.drain(..cfg.batch_size.min(order.len())).collect();
        let samples: Vec<SampleBundle> = picked
            .iter()
            .map(|&i| {
                if opts.augment {
                    augment(&train[i], rand::Rng::random(&mut rng)).0
                } else {
                    train[i].clone()
                }
            })
            .collect();
        let refs: Vec<&SampleBundle> = samples.iter().collect();
        opt.epoch = step * cfg.batch_size / train.len();
        let stats = model.train_step(&mut opt, &Batch::from_samples(&refs)?)?;
        losses.push(stats.loss);
        if (step + 1) % eval_every == 0 || step + 1 == opts.steps {
            let m = model.evaluate(&held_out, cfg.batch_size.max(16))?;
            let record = MetricsRecord::new(opt.epoch, &m);
            log(&record);
            records.push(record);
            metrics = Some(m);
        }
    }
    Ok(TrainReport {
        losses,
        records,
        metrics: metrics.expect("evaluated at the last step"),
        model,
    })
}

/// One ablation variant's outcome.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub params: usize,
    pub macc: f64,
    /// Held-out accuracy per task, `None` for dropped tasks.
    pub accuracy: [Option<f64>; 4],
}

/// Named configuration variants derived from `base`.
pub fn ablation_variants(base: &ModelConfig, names: &[&str]) -> Result<Vec<(String, ModelConfig)>> {
    names
        .iter()
        .map(|&name| {
            let mut c = base.clone();
            let a = &mut c.ablation;
            let only = |keep: Modality| {
                Modality::ALL
                    .into_iter()
                    .filter(|&m| m != keep)
                    .collect::<Vec<_>>()
            };
            match name {
                "full" => {}
                "no_mgmi" => a.no_mgmi = true,
                "no_dual_scan" => a.no_dual_scan = true,
                "no_global_local" => a.no_global_local = true,
                "no_self_attention" => a.no_self_attention = true,
                "no_multi_gating" => a.no_multi_gating = true,
                "exterior_only" => a.drop_modalities = only(Modality::Exterior),
                "interior_only" => a.drop_modalities = only(Modality::Interior),
                "joints_only" => a.drop_modalities = only(Modality::Joints),
                "driver_tasks" => a.drop_tasks = vec![Task::Tcr, Task::Vbr],
                "traffic_tasks" => a.drop_tasks = vec![Task::Der, Task::Dbr],
                other => {
                    return Err(Error::Argument(format!(
                        "unknown ablation variant {other:?}"
                    )))
                }
            }
            c.validate()?;
            Ok((name.to_string(), c))
        })
        .collect()
}

/// All variant names understood by [`ablation_variants`].
pub const ABLATION_VARIANTS: [&str; 11] = [
    "full",
    "no_mgmi",
    "no_dual_scan",
    "no_global_local",
    "no_self_attention",
    "no_multi_gating",
    "exterior_only",
    "interior_only",
    "joints_only",
    "driver_tasks",
    "traffic_tasks",
];

/// Count and toy-train each variant on the same synthetic data. Mean
/// accuracy is over all four tasks, with dropped tasks counted as chance
/// level, so variants that train fewer tasks stay comparable.
pub fn ablate(
    variants: &[(String, ModelConfig)],
    recipe: &SyntheticRecipe,
    opts: &TrainOptions,
) -> Result<Vec<AblationRow>> {
    variants
        .iter()
        .map(|(name, cfg)| {
            let r = train_toy(cfg, recipe, opts, |_| {})?;
            let acc = r.metrics.accuracy;
            let macc = Task::ALL
                .iter()
                .map(|t| acc[t.index()].unwrap_or(1.0 / cfg.num_classes(*t) as f64))
                .sum::<f64>()
                / 4.0;
            Ok(AblationRow {
                variant: name.clone(),
                params: r.model.num_params(),
                macc,
                accuracy: acc,
            })
        })
        .collect()
}
