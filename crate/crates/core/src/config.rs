//! Model configuration: a flat `key=value` text format with `#` comments.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// The four driving tasks, in log order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    /// Driver emotion recognition.
    Der,
    /// Driver behaviour recognition.
    Dbr,
    /// Traffic context recognition.
    Tcr,
    /// Vehicle behaviour recognition.
    Vbr,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Der, Task::Dbr, Task::Tcr, Task::Vbr];

    pub fn name(self) -> &'static str {
        match self {
            Task::Der => "der",
            Task::Dbr => "dbr",
            Task::Tcr => "tcr",
            Task::Vbr => "vbr",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn parse(s: &str) -> Option<Task> {
        Task::ALL.into_iter().find(|t| t.name() == s)
    }
}

/// The three feature branches fused by the integrator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    /// Front, left and right views outside the vehicle.
    Exterior,
    /// Inside view plus face and body crops.
    Interior,
    /// Driver joint sequence.
    Joints,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Exterior, Modality::Interior, Modality::Joints];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Exterior => "exterior",
            Modality::Interior => "interior",
            Modality::Joints => "joints",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn parse(s: &str) -> Option<Modality> {
        Modality::ALL.into_iter().find(|m| m.name() == s)
    }
}

/// Architectural ablations; each flag is independent.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Ablation {
    /// Replace gated fusion with channel concatenation and a 1×1 conv.
    pub no_mgmi: bool,
    /// Forward scan on both paths.
    pub no_dual_scan: bool,
    /// Local path only, duplicated in place of the global path.
    pub no_global_local: bool,
    /// Shared features are the modality mean instead of self-attention.
    pub no_self_attention: bool,
    /// One gate unit shared by all tasks.
    pub no_multi_gating: bool,
    pub drop_tasks: Vec<Task>,
    pub drop_modalities: Vec<Modality>,
}

impl Ablation {
    pub fn active_tasks(&self) -> Vec<Task> {
        Task::ALL
            .into_iter()
            .filter(|t| !self.drop_tasks.contains(t))
            .collect()
    }

    pub fn active_modalities(&self) -> Vec<Modality> {
        Modality::ALL
            .into_iter()
            .filter(|m| !self.drop_modalities.contains(m))
            .collect()
    }
}

/// Step schedule: `rates[i]` applies from `milestones[i-1]` (inclusive) on.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub rates: Vec<f64>,
    /// Epochs at which the rate moves to the next entry; one fewer than `rates`.
    pub milestones: Vec<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Rescale the whole gradient to this L2 norm when it is larger.
    pub clip_norm: Option<f64>,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            rates: vec![1e-3, 5e-4, 5e-5],
            milestones: vec![25, 51],
            momentum: 0.9,
            weight_decay: 1e-4,
            clip_norm: None,
        }
    }
}

impl Schedule {
    pub fn rate(&self, epoch: usize) -> f64 {
        let stage = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.rates[stage.min(self.rates.len() - 1)]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Frames per sample, `T`.
    pub frame_count: usize,
    /// Feature width `C`; channel `t·C/T + j` belongs to frame `t`.
    pub channels: usize,
    /// Spatial size of every branch output.
    pub height: usize,
    pub width: usize,
    /// State dimension `n` of the temporal scans.
    pub state_dim: usize,
    /// Temporal blocks per image branch.
    pub depth: usize,
    /// Input frame size of each camera view.
    pub view_height: usize,
    pub view_width: usize,
    pub stem_stride: usize,
    /// Target grid of the global path's adaptive pooling.
    pub global_grid: usize,
    pub joint_count: usize,
    /// Class counts in task order der, dbr, tcr, vbr.
    pub classes: [usize; 4],
    pub bn_eps: f64,
    pub batch_size: usize,
    /// Train / test / validation fractions.
    pub split: [f64; 3],
    pub schedule: Schedule,
    pub ablation: Ablation,
    pub seed: u64,
}

/// Camera views per image branch.
pub const VIEWS_PER_BRANCH: usize = 3;

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frame_count: 16,
            channels: 144,
            height: 7,
            width: 7,
            state_dim: 16,
            depth: 2,
            view_height: 64,
            view_width: 64,
            stem_stride: 2,
            global_grid: 3,
            joint_count: 17,
            classes: [4; 4],
            bn_eps: 1e-5,
            batch_size: 24,
            split: [0.65, 0.15, 0.20],
            schedule: Schedule::default(),
            ablation: Ablation::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration used by tests and the toy training loop.
    pub fn toy() -> Self {
        Self {
            frame_count: 4,
            channels: 36,
            height: 4,
            width: 4,
            state_dim: 4,
            depth: 1,
            view_height: 8,
            view_width: 8,
            global_grid: 2,
            joint_count: 5,
            batch_size: 8,
            schedule: Schedule {
                rates: vec![0.08, 0.008],
                milestones: vec![2],
                momentum: 0.9,
                weight_decay: 1e-4,
                clip_norm: Some(5.0),
            },
            ..Self::default()
        }
    }

    pub fn group_width(&self) -> usize {
        self.channels / self.frame_count
    }

    /// Spatial size after the stem's depthwise convolution.
    pub fn stem_output(&self) -> (usize, usize) {
        let f = |v: usize| (v + 2).saturating_sub(3) / self.stem_stride + 1;
        (f(self.view_height), f(self.view_width))
    }

    pub fn num_classes(&self, task: Task) -> usize {
        self.classes[task.index()]
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("frame_count", self.frame_count),
            ("channels", self.channels),
            ("height", self.height),
            ("width", self.width),
            ("state_dim", self.state_dim),
            ("depth", self.depth),
            ("view_height", self.view_height),
            ("view_width", self.view_width),
            ("stem_stride", self.stem_stride),
            ("global_grid", self.global_grid),
            ("joint_count", self.joint_count),
            ("batch_size", self.batch_size),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.channels % self.frame_count != 0 {
            return Err(Error::config(
                "channels",
                format!(
                    "C % T == 0 violated: channels {} not divisible by frame_count {}",
                    self.channels, self.frame_count
                ),
            ));
        }
        if self.group_width() % VIEWS_PER_BRANCH != 0 {
            return Err(Error::config(
                "channels",
                format!(
                    "channels {} must split into {} views per frame (C % (3·T) == 0)",
                    self.channels, VIEWS_PER_BRANCH
                ),
            ));
        }
        let (sh, sw) = self.stem_output();
        if self.height > sh || self.width > sw {
            return Err(Error::config(
                "height",
                format!(
                    "{}×{} exceeds stem output {sh}×{sw}",
                    self.height, self.width
                ),
            ));
        }
        if self.global_grid > self.height.min(self.width) {
            return Err(Error::config("global_grid", "exceeds feature map size"));
        }
        for (task, &k) in Task::ALL.iter().zip(&self.classes) {
            if k < 2 {
                return Err(Error::config(
                    "classes",
                    format!("{} needs at least 2 classes", task.name()),
                ));
            }
        }
        if !(self.bn_eps > 0.0) {
            return Err(Error::config("bn_eps", "must be positive"));
        }
        if self.split.iter().any(|f| !(*f >= 0.0))
            || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::config(
                "split",
                "fractions must be non-negative and sum to 1",
            ));
        }
        let s = &self.schedule;
        if s.rates.is_empty() || s.milestones.len() + 1 != s.rates.len() {
            return Err(Error::config(
                "lr",
                "need exactly one more rate than milestones",
            ));
        }
        if s.rates.iter().any(|r| !(*r >= 0.0)) {
            return Err(Error::config("lr", "rates must be non-negative"));
        }
        if s.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(
                "lr_milestones",
                "must be strictly increasing",
            ));
        }
        if !(0.0..1.0).contains(&s.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        if !(s.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        if s.clip_norm.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
            return Err(Error::config("clip_norm", "must be positive and finite"));
        }
        if self.ablation.active_tasks().is_empty() {
            return Err(Error::config("drop_tasks", "every task dropped"));
        }
        if self.ablation.active_modalities().is_empty() {
            return Err(Error::config("drop_modalities", "every modality dropped"));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        fn list<T: ToString>(v: &[T]) -> String {
            v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
        }
        let a = &self.ablation;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        kv("frame_count", self.frame_count.to_string());
        kv("channels", self.channels.to_string());
        kv("height", self.height.to_string());
        kv("width", self.width.to_string());
        kv("state_dim", self.state_dim.to_string());
        kv("depth", self.depth.to_string());
        kv("view_height", self.view_height.to_string());
        kv("view_width", self.view_width.to_string());
        kv("stem_stride", self.stem_stride.to_string());
        kv("global_grid", self.global_grid.to_string());
        kv("joint_count", self.joint_count.to_string());
        kv("classes", list(&self.classes));
        kv("bn_eps", format!("{:e}", self.bn_eps));
        kv("batch_size", self.batch_size.to_string());
        kv("split", list(&self.split));
        kv("lr", list(&self.schedule.rates));
        kv("lr_milestones", list(&self.schedule.milestones));
        kv("momentum", self.schedule.momentum.to_string());
        kv("weight_decay", self.schedule.weight_decay.to_string());
        kv(
            "clip_norm",
            self.schedule
                .clip_norm
                .map_or("none".into(), |c| c.to_string()),
        );
        kv("no_mgmi", a.no_mgmi.to_string());
        kv("no_dual_scan", a.no_dual_scan.to_string());
        kv("no_global_local", a.no_global_local.to_string());
        kv("no_self_attention", a.no_self_attention.to_string());
        kv("no_multi_gating", a.no_multi_gating.to_string());
        kv(
            "drop_tasks",
            list(&a.drop_tasks.iter().map(|t| t.name()).collect::<Vec<_>>()),
        );
        kv(
            "drop_modalities",
            list(
                &a.drop_modalities
                    .iter()
                    .map(|m| m.name())
                    .collect::<Vec<_>>(),
            ),
        );
        kv("seed", self.seed.to_string());
        out
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse {v:?}")))
}

fn items(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty())
}

fn nums<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    items(v).map(|s| num(key, s)).collect()
}

fn fixed<T: std::str::FromStr + Copy, const N: usize>(key: &str, v: &str) -> Result<[T; N]> {
    let values: Vec<T> = nums(key, v)?;
    values
        .try_into()
        .map_err(|_| Error::config(key, format!("expected {N} values")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        other => Err(Error::config(
            key,
            format!("expected true/false, got {other:?}"),
        )),
    }
}

/// Split one line into `key=value` pairs. Commas separate pairs as well as
/// list items; a comma-separated piece without `=` continues the previous value.
fn pairs(line: &str) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = Vec::new();
    for piece in line.split(',') {
        match piece.split_once('=') {
            Some((k, v)) => out.push((k.trim().to_string(), v.trim().to_string())),
            None => match out.last_mut() {
                Some(last) => {
                    last.1.push(',');
                    last.1.push_str(piece.trim());
                }
                None => out.push((piece.trim().to_string(), String::new())),
            },
        }
    }
    out
}

/// Parse configuration text over the defaults; unknown keys are rejected and
/// the result is validated.
pub fn parse_config(text: &str) -> Result<ModelConfig> {
    let mut c = ModelConfig::default();
    for raw in text.lines() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        for (key, v) in pairs(line) {
            let k = key.as_str();
            let v = v.as_str();
            match k {
                "frame_count" => c.frame_count = num(k, v)?,
                "channels" => c.channels = num(k, v)?,
                "height" => c.height = num(k, v)?,
                "width" => c.width = num(k, v)?,
                "state_dim" => c.state_dim = num(k, v)?,
                "depth" => c.depth = num(k, v)?,
                "view_height" => c.view_height = num(k, v)?,
                "view_width" => c.view_width = num(k, v)?,
                "stem_stride" => c.stem_stride = num(k, v)?,
                "global_grid" => c.global_grid = num(k, v)?,
                "joint_count" => c.joint_count = num(k, v)?,
                "classes" => c.classes = fixed(k, v)?,
                "bn_eps" => c.bn_eps = num(k, v)?,
                "batch_size" => c.batch_size = num(k, v)?,
                "split" => c.split = fixed(k, v)?,
                "lr" => c.schedule.rates = nums(k, v)?,
                "lr_milestones" => c.schedule.milestones = nums(k, v)?,
                "momentum" => c.schedule.momentum = num(k, v)?,
                "weight_decay" => c.schedule.weight_decay = num(k, v)?,
                "clip_norm" => {
                    c.schedule.clip_norm = if v == "none" { None } else { Some(num(k, v)?) }
                }
                "no_mgmi" => c.ablation.no_mgmi = flag(k, v)?,
                "no_dual_scan" => c.ablation.no_dual_scan = flag(k, v)?,
                "no_global_local" => c.ablation.no_global_local = flag(k, v)?,
                "no_self_attention" => c.ablation.no_self_attention = flag(k, v)?,
                "no_multi_gating" => c.ablation.no_multi_gating = flag(k, v)?,
                "drop_tasks" => {
                    c.ablation.drop_tasks = items(v)
                        .map(|s| {
                            Task::parse(s)
                                .ok_or_else(|| Error::config(k, format!("unknown task {s:?}")))
                        })
                        .collect::<Result<_>>()?
                }
                "drop_modalities" => {
                    c.ablation.drop_modalities = items(v)
                        .map(|s| {
                            Modality::parse(s)
                                .ok_or_else(|| Error::config(k, format!("unknown modality {s:?}")))
                        })
                        .collect::<Result<_>>()?
                }
                "seed" => c.seed = num(k, v)?,
                _ => return Err(Error::config(k, "unknown key")),
            }
        }
    }
    c.validate()?;
    Ok(c)
}
