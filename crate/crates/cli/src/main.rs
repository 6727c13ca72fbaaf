//! `mtldrive` command line: parameter counting, throughput benchmarking,
//! gradient checks, toy training, ablation sweeps and synthetic data export.
//!
//! Human-readable output is an aligned table on stdout. `--out <path>` also
//! writes one JSON record per line (`--out -` sends the records to stdout
//! instead of the table). Exit codes: 0 success, 1 validation failure,
//! 2 usage error.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::builder::PossibleValuesParser;
use clap::{Args, Parser, Subcommand, ValueEnum};
use comfy_table::presets::NOTHING;
use comfy_table::{CellAlignment, Table};
use rayon::prelude::*;
use serde::Serialize;

use mtldrive::bench::{
    ablate, ablation_variants, bench_fps, config_hash, count_params, gradcheck_run, train_toy,
    AblationRow, TrainOptions, ABLATION_VARIANTS, GRADCHECK_SELECTORS,
};
use mtldrive::config::{parse_config, Modality, ModelConfig, Task};
use mtldrive::data::{generate_synthetic, write_sample, SyntheticRecipe};
use mtldrive::gradcheck::GradCheckOptions;
use mtldrive::heads::MetricsRecord;

#[derive(Parser)]
#[command(
    name = "mtldrive",
    version,
    about = "Multimodal multi-task driving network: tooling and experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Count learnable parameters, per module.
    Params {
        #[command(flatten)]
        common: Common,
    },
    /// Measure single-precision inference throughput and latency.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Samples per forward pass.
        #[arg(long, default_value_t = 1)]
        batch: usize,
        /// Measured wall time in seconds (warm-up excluded).
        #[arg(long, default_value_t = 3.0)]
        duration: f64,
        /// Inference workers sharing the weights.
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Finite-difference gradient checks of every parameterised module.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Modules to check; all when omitted.
        #[arg(long, value_delimiter = ',', value_parser = PossibleValuesParser::new(GRADCHECK_SELECTORS))]
        select: Vec<String>,
        /// Maximum relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Selectors checked in parallel.
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Test hook: perturb the analytic gradient of tensors whose
        /// name starts with this prefix.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Train on planted-signal synthetic data and report held-out metrics.
    TrainToy {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainArgs,
        /// Pixel/joint noise standard deviation.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
    },
    /// Train named configuration variants and compare mean accuracy.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainArgs,
        /// Variants to run; all when omitted.
        #[arg(long, value_delimiter = ',', value_parser = PossibleValuesParser::new(ABLATION_VARIANTS))]
        variants: Vec<String>,
        /// Pixel/joint noise standard deviation.
        #[arg(long, default_value_t = 0.5)]
        noise: f64,
        /// Seeds `seed..seed+repeats` averaged per variant.
        #[arg(long, default_value_t = 1)]
        repeats: u64,
        /// Variants trained in parallel.
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Write synthetic samples in the dataset directory layout.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Number of samples.
        #[arg(long, default_value_t = 20)]
        count: usize,
        /// Pixel/joint noise standard deviation.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        /// Dataset root directory.
        #[arg(long)]
        dir: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// `key=value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base configuration when no file is given.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Overrides the configuration's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// JSON-lines output file; `-` for stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 512)]
    train_samples: usize,
    #[arg(long, default_value_t = 256)]
    eval_samples: usize,
    #[arg(long, default_value_t = 50)]
    eval_every: usize,
    /// Random horizontal/vertical flips of training samples.
    #[arg(long)]
    augment: bool,
}

impl TrainArgs {
    fn options(&self) -> TrainOptions {
        TrainOptions {
            steps: self.steps,
            train_samples: self.train_samples,
            eval_samples: self.eval_samples,
            eval_every: self.eval_every,
            augment: self.augment,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Full-size configuration.
    Default,
    /// Desk-scale configuration.
    Toy,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Validation(anyhow::Error),
    Usage(anyhow::Error),
}

impl From<mtldrive::Error> for Failure {
    fn from(e: mtldrive::Error) -> Self {
        match e {
            mtldrive::Error::Argument(_) => Failure::Usage(e.into()),
            _ => Failure::Validation(e.into()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Validation(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Validation(e.into())
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(e)) => {
            eprintln!("usage error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Outcome {
    match command {
        Command::Params { common } => params(&common),
        Command::Bench {
            common,
            batch,
            duration,
            threads,
        } => bench(&common, batch, duration, threads),
        Command::Gradcheck {
            common,
            select,
            tolerance,
            threads,
            corrupt,
        } => gradcheck(&common, &select, tolerance, threads, corrupt),
        Command::TrainToy {
            common,
            train,
            noise,
        } => train_cmd(&common, &train, noise),
        Command::Ablate {
            common,
            train,
            variants,
            noise,
            repeats,
            threads,
        } => ablate_cmd(&common, &train, &variants, noise, repeats, threads),
        Command::GenData {
            common,
            count,
            noise,
            dir,
        } => gen_data(&common, count, noise, &dir),
    }
}

/// Configuration from `--config`, else the preset (or the command's default).
fn load_config(common: &Common, default: Preset) -> Result<ModelConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Failure::Validation(anyhow::anyhow!("reading {}: {e}", path.display()))
            })?;
            parse_config(&text)?
        }
        None => match common.preset.unwrap_or(default) {
            Preset::Default => ModelConfig::default(),
            Preset::Toy => ModelConfig::toy(),
        },
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Where records go and whether the table is printed.
struct Sink {
    records: Option<Box<dyn Write>>,
    table: bool,
}

impl Sink {
    fn open(out: Option<&Path>) -> Result<Self, Failure> {
        Ok(match out {
            None => Sink {
                records: None,
                table: true,
            },
            Some(p) if p.as_os_str() == "-" => Sink {
                records: Some(Box::new(io::stdout())),
                table: false,
            },
            Some(p) => Sink {
                records: Some(Box::new(BufWriter::new(File::create(p)?))),
                table: true,
            },
        })
    }

    fn record(&mut self, line: &str) -> Outcome {
        if let Some(w) = &mut self.records {
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    fn json(&mut self, value: &impl Serialize) -> Outcome {
        let line = serde_json::to_string(value)?;
        self.record(&line)
    }

    fn print(&self, table: &Table) {
        if self.table {
            println!("{table}");
        }
    }

    fn note(&self, text: &str) {
        if self.table {
            println!("{text}");
        }
    }

    fn finish(mut self) -> Outcome {
        if let Some(w) = &mut self.records {
            w.flush()?;
        }
        Ok(())
    }
}

/// Borderless table; every column after the first is right-aligned.
fn table(header: &[&str]) -> Table {
    let mut t = Table::new();
    t.load_style(NOTHING).set_header(header.to_vec());
    for i in 1..header.len() {
        if let Some(c) = t.column_mut(i) {
            c.set_cell_alignment(CellAlignment::Right);
        }
    }
    t
}

fn pct(v: Option<f64>) -> String {
    v.map_or("-".into(), |a| format!("{:.2}", 100.0 * a))
}

fn params(common: &Common) -> Outcome {
    let cfg = load_config(common, Preset::Default)?;
    let report = count_params(&cfg)?;
    let mut sink = Sink::open(common.out.as_deref())?;
    let mut t = table(&["module", "params"]);
    for m in &report.breakdown {
        t.add_row(vec![m.module.to_string(), m.params.to_string()]);
    }
    t.add_row(vec!["total".to_string(), report.total.to_string()]);
    sink.print(&t);
    let breakdown: serde_json::Map<String, serde_json::Value> = report
        .breakdown
        .iter()
        .map(|m| (m.module.to_string(), m.params.into()))
        .collect();
    sink.json(&serde_json::json!({
        "config_hash": config_hash(&cfg),
        "total": report.total,
        "breakdown": breakdown,
    }))?;
    sink.finish()
}

fn bench(common: &Common, batch: usize, duration: f64, threads: usize) -> Outcome {
    let cfg = load_config(common, Preset::Default)?;
    let r = bench_fps(&cfg, batch, duration, threads)?;
    let mut sink = Sink::open(common.out.as_deref())?;
    let mut t = table(&[
        "config", "params", "threads", "batch", "batches", "fps", "p50 ms", "p95 ms",
    ]);
    t.add_row(vec![
        r.config_hash.clone(),
        r.param_count.to_string(),
        r.threads.to_string(),
        r.batch_size.to_string(),
        r.batches.to_string(),
        format!("{:.2}", r.fps),
        format!("{:.3}", r.latency_p50_ms),
        format!("{:.3}", r.latency_p95_ms),
    ]);
    sink.print(&t);
    sink.json(&r)?;
    sink.finish()
}

#[derive(Serialize)]
struct GradLine<'a> {
    selector: &'a str,
    seed: u64,
    tensor: &'a str,
    max_rel_err: f64,
    elements: usize,
    passed: bool,
}

fn gradcheck(
    common: &Common,
    select: &[String],
    tolerance: f64,
    threads: usize,
    corrupt: Option<String>,
) -> Outcome {
    if common.config.is_some() || common.preset.is_some() {
        return Err(Failure::Usage(anyhow::anyhow!(
            "gradcheck builds its own desk-sized modules; only --seed applies"
        )));
    }
    let seed = common.seed.unwrap_or(0);
    let selectors: Vec<&str> = if select.is_empty() {
        GRADCHECK_SELECTORS.to_vec()
    } else {
        select.iter().map(String::as_str).collect()
    };
    let opts = GradCheckOptions {
        tolerance,
        seed,
        corrupt,
        ..GradCheckOptions::default()
    };
    let reports = pool(threads)?.install(|| {
        selectors
            .par_iter()
            .map(|s| gradcheck_run(s, seed, &opts))
            .collect::<mtldrive::Result<Vec<_>>>()
    })?;
    let mut sink = Sink::open(common.out.as_deref())?;
    let mut t = table(&["tensor", "checked", "max rel err", "status"]);
    let mut failed = Vec::new();
    for (sel, report) in selectors.iter().zip(&reports) {
        for c in &report.tensors {
            t.add_row(vec![
                format!("{sel}/{}", c.name),
                c.elements_checked.to_string(),
                format!("{:.3e}", c.max_rel_err),
                if c.passed { "ok" } else { "FAIL" }.to_string(),
            ]);
            sink.json(&GradLine {
                selector: sel,
                seed,
                tensor: &c.name,
                max_rel_err: c.max_rel_err,
                elements: c.elements_checked,
                passed: c.passed,
            })?;
        }
        failed.extend(report.failures().map(|c| format!("{sel}/{}", c.name)));
    }
    sink.print(&t);
    sink.finish()?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Validation(anyhow::anyhow!(
            "gradient check failed (tolerance {tolerance:e}) for: {}",
            failed.join(", ")
        )))
    }
}

fn train_cmd(common: &Common, train: &TrainArgs, noise: f64) -> Outcome {
    let cfg = load_config(common, Preset::Toy)?;
    let recipe = SyntheticRecipe::for_config(&cfg, noise);
    let mut sink = Sink::open(common.out.as_deref())?;
    let mut lines = Vec::new();
    let report = train_toy(&cfg, &recipe, &train.options(), |r: &MetricsRecord| {
        lines.push(r.clone())
    })?;
    let mut t = table(&[
        "epoch", "loss", "der %", "dbr %", "tcr %", "vbr %", "macc %",
    ]);
    for r in &lines {
        t.add_row(vec![
            r.epoch.to_string(),
            format!("{:.4}", r.loss_total),
            pct(r.acc_der),
            pct(r.acc_dbr),
            pct(r.acc_tcr),
            pct(r.acc_vbr),
            format!("{:.2}", 100.0 * r.macc),
        ]);
        sink.record(&r.to_json_line())?;
    }
    sink.print(&t);
    sink.note(&format!(
        "\ntraining loss: first step {:.4}, last ten steps {:.4}\n\nmean gate activation (task × modality):",
        report.initial_loss(),
        report.final_loss()
    ));
    let mut g = table(&["task", "exterior", "interior", "joints"]);
    for task in Task::ALL {
        let row = report.metrics.gate_telemetry[task.index()];
        let mut cells = vec![task.name().to_string()];
        cells.extend(
            Modality::ALL
                .iter()
                .map(|m| row[m.index()].map_or("-".into(), |v| format!("{v:.4}"))),
        );
        g.add_row(cells);
    }
    sink.print(&g);
    sink.finish()
}

fn ablate_cmd(
    common: &Common,
    train: &TrainArgs,
    names: &[String],
    noise: f64,
    repeats: u64,
    threads: usize,
) -> Outcome {
    if repeats == 0 {
        return Err(Failure::Usage(anyhow::anyhow!(
            "--repeats must be positive"
        )));
    }
    let base = load_config(common, Preset::Toy)?;
    let names: Vec<&str> = if names.is_empty() {
        ABLATION_VARIANTS.to_vec()
    } else {
        names.iter().map(String::as_str).collect()
    };
    let variants = ablation_variants(&base, &names)?;
    for (_, cfg) in &variants {
        cfg.validate()?;
    }
    let opts = train.options();
    let jobs: Vec<(usize, u64)> = (0..variants.len())
        .flat_map(|v| (0..repeats).map(move |r| (v, r)))
        .collect();
    let runs = pool(threads)?.install(|| {
        jobs.par_iter()
            .map(|&(v, r)| {
                let (name, cfg) = &variants[v];
                let mut cfg = cfg.clone();
                cfg.seed = base.seed.wrapping_add(r);
                let recipe = SyntheticRecipe::for_config(&cfg, noise);
                ablate(&[(name.clone(), cfg)], &recipe, &opts).map(|mut rows| rows.remove(0))
            })
            .collect::<mtldrive::Result<Vec<AblationRow>>>()
    })?;
    let mut sink = Sink::open(common.out.as_deref())?;
    let mut t = table(&[
        "variant", "params", "macc %", "der %", "dbr %", "tcr %", "vbr %",
    ]);
    for rows in runs.chunks(repeats as usize) {
        let row = average(rows);
        let mut cells = vec![
            row.variant.clone(),
            row.params.to_string(),
            format!("{:.2}", 100.0 * row.macc),
        ];
        cells.extend(row.accuracy.iter().map(|a| pct(*a)));
        t.add_row(cells);
        sink.json(&row)?;
    }
    sink.print(&t);
    sink.finish()
}

/// Mean of repeated runs of one variant.
fn average(rows: &[AblationRow]) -> AblationRow {
    let n = rows.len() as f64;
    let mut accuracy = [None; 4];
    for (i, a) in accuracy.iter_mut().enumerate() {
        if rows[0].accuracy[i].is_some() {
            *a = Some(rows.iter().filter_map(|r| r.accuracy[i]).sum::<f64>() / n);
        }
    }
    AblationRow {
        variant: rows[0].variant.clone(),
        params: rows[0].params,
        macc: rows.iter().map(|r| r.macc).sum::<f64>() / n,
        accuracy,
    }
}

#[derive(Serialize)]
struct SampleLine {
    id: String,
    path: String,
    labels: [usize; 4],
}

fn gen_data(common: &Common, count: usize, noise: f64, dir: &Path) -> Outcome {
    if count == 0 {
        return Err(Failure::Usage(anyhow::anyhow!("--count must be positive")));
    }
    let cfg = load_config(common, Preset::Toy)?;
    let recipe = SyntheticRecipe::for_config(&cfg, noise);
    let mut sink = Sink::open(common.out.as_deref())?;
    std::fs::create_dir_all(dir)?;
    let mut per_class = [[0usize; 4]; 4];
    for sample in generate_synthetic(&recipe, count, cfg.seed)? {
        let path = write_sample(dir, &sample)?;
        for (task, &k) in sample.labels.iter().enumerate() {
            if let Some(c) = per_class[task].get_mut(k) {
                *c += 1;
            }
        }
        sink.json(&SampleLine {
            id: sample.id.clone(),
            path: path.display().to_string(),
            labels: sample.labels,
        })?;
    }
    let mut t = table(&["task", "class 0", "class 1", "class 2", "class 3"]);
    for task in Task::ALL {
        let mut cells = vec![task.name().to_string()];
        cells.extend(per_class[task.index()].iter().map(|c| c.to_string()));
        t.add_row(cells);
    }
    sink.note(&format!("wrote {count} samples to {}", dir.display()));
    sink.print(&t);
    sink.finish()
}

fn pool(threads: usize) -> Result<rayon::ThreadPool, Failure> {
    if threads == 0 {
        return Err(Failure::Usage(anyhow::anyhow!(
            "--threads must be positive"
        )));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Failure::Validation(e.into()))
}
