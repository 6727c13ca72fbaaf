//! Multimodal samples: a synthetic generator with planted task signals, an
//! on-disk sample directory loader/writer, and flip augmentation.
//!
//! Sample directory layout, one folder per sample id:
//!
//! ```text
//! <id>/front|left|right|inside/frame_000.t3tn ...   one [3×H×W] tensor (or .ppm) per frame
//! <id>/boxes.txt                                   face and body boxes, `x0 y0 x1 y1` per line
//! <id>/joints.t3jt                                 joint sequence
//! <id>/labels.txt                                  four integers: der dbr tcr vbr
//! ```
//!
//! Face and body views are crops of the inside camera.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::config::{Modality, ModelConfig, Task};
use crate::error::{Error, Result};
use crate::joints::JointSequence;
use crate::mts::{ViewId, ViewSequence};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Pixel rectangle `[x0, x1) × [y0, y1)` in inside-camera coordinates.
pub type BoundingBox = [usize; 4];

/// One multimodal sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBundle<T: Scalar = f64> {
    pub id: String,
    /// Front, left, right.
    pub exterior: Vec<ViewSequence<T>>,
    /// Inside, face, body.
    pub interior: Vec<ViewSequence<T>>,
    pub joints: JointSequence<T>,
    /// Class per task, in task order.
    pub labels: [usize; 4],
    /// Face and body boxes the interior crops were taken from.
    pub boxes: [BoundingBox; 2],
}

impl<T: Scalar> SampleBundle<T> {
    pub fn views(&self) -> impl Iterator<Item = &ViewSequence<T>> {
        self.exterior.iter().chain(&self.interior)
    }

    pub fn view(&self, id: ViewId) -> Option<&ViewSequence<T>> {
        self.views().find(|v| v.view == id)
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        for (views, ids) in [
            (&self.exterior, ViewId::EXTERIOR),
            (&self.interior, ViewId::INTERIOR),
        ] {
            if views.iter().map(|v| v.view).ne(ids) {
                return Err(Error::Input(format!(
                    "sample {}: views out of order",
                    self.id
                )));
            }
            for v in views {
                v.validate(cfg.frame_count)?;
            }
        }
        self.joints.validate(cfg.frame_count, cfg.joint_count)?;
        for task in Task::ALL {
            let k = cfg.num_classes(task);
            if self.labels[task.index()] >= k {
                return Err(Error::Input(format!(
                    "sample {}: {} label {} outside {k} classes",
                    self.id,
                    task.name(),
                    self.labels[task.index()]
                )));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> SampleBundle<U> {
        let views = |vs: &[ViewSequence<T>]| {
            vs.iter()
                .map(|v| ViewSequence {
                    view: v.view,
                    frames: v.frames.cast(),
                })
                .collect()
        };
        SampleBundle {
            id: self.id.clone(),
            exterior: views(&self.exterior),
            interior: views(&self.interior),
            joints: JointSequence {
                joints: self.joints.joints.cast(),
            },
            labels: self.labels,
            boxes: self.boxes,
        }
    }
}

/// Bilinear resize of `[C × H × W]` with half-pixel centres; the identity
/// when the size is unchanged.
pub fn resize<T: Scalar>(img: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let s = img.shape();
    if s.len() != 3 || s[1] == 0 || s[2] == 0 {
        return Err(Error::shape(
            "resize",
            format!("expected [C×H×W], got {s:?}"),
        ));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let src = |o: usize, len: usize, out: usize| {
        let x = ((o as f64 + 0.5) * len as f64 / out as f64 - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = x.floor() as usize;
        (i0, (i0 + 1).min(len - 1), x - i0 as f64)
    };
    let d = img.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &d[ch * h * w..(ch + 1) * h * w];
        for oy in 0..out_h {
            let (y0, y1, fy) = src(oy, h, out_h);
            let fy = T::from_f64_lossy(fy);
            for ox in 0..out_w {
                let (x0, x1, fx) = src(ox, w, out_w);
                let fx = T::from_f64_lossy(fx);
                let top = plane[y0 * w + x0] * (T::one() - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (T::one() - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (T::one() - fy) + bottom * fy);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

/// Crop `[C × H × W]` to a box.
pub fn crop<T: Scalar>(img: &Tensor<T>, b: BoundingBox) -> Result<Tensor<T>> {
    let s = img.shape();
    let [x0, y0, x1, y1] = b;
    if s.len() != 3 || x0 >= x1 || y0 >= y1 || x1 > s[2] || y1 > s[1] {
        return Err(Error::Input(format!("box {b:?} outside image {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = Vec::with_capacity(s[0] * (y1 - y0) * (x1 - x0));
    for ch in 0..s[0] {
        for y in y0..y1 {
            let row = ch * h * w + y * w;
            out.extend_from_slice(&img.data()[row + x0..row + x1]);
        }
    }
    Tensor::new(vec![s[0], y1 - y0, x1 - x0], out)
}

/// Face and body views cropped from the inside camera's frames `[T × 3 × H × W]`,
/// each resized to `out_h × out_w`.
pub fn interior_crops<T: Scalar>(
    inside: &Tensor<T>,
    boxes: [BoundingBox; 2],
    out_h: usize,
    out_w: usize,
) -> Result<[Tensor<T>; 2]> {
    let frames = inside.shape()[0];
    let crops = boxes.map(|b| -> Result<Tensor<T>> {
        let per_frame = (0..frames)
            .map(|t| resize(&crop(&inside.index_first(t), b)?, out_h, out_w))
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack(&per_frame)
    });
    let [face, body] = crops;
    Ok([face?, body?])
}

/// Where a task's class code is planted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Carrier {
    /// A colour channel of one camera view; class `k` brightens a patch in
    /// frames `t` with `t mod K == k`.
    Image { view: ViewId, channel: usize },
    /// Joints `j` with `j mod stride == offset`; class `k` sets their
    /// confidence to the `k`-th of `K` evenly spaced levels.
    Joints { offset: usize, stride: usize },
}

/// Planted-signal recipe: which modality carries each task's label.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticRecipe {
    /// Designated modality per task, in task order.
    pub designated: [Modality; 4],
    /// Pattern amplitude per task.
    pub amplitude: [f64; 4],
    /// Standard deviation of additive Gaussian noise on pixels and joints.
    pub noise: f64,
    pub frames: usize,
    pub view_hw: [usize; 2],
    pub joint_count: usize,
    pub classes: [usize; 4],
}

/// Background pixel level.
const BASE: f64 = 0.1;
/// Baseline confidence of joints that carry no code.
const BASE_CONFIDENCE: f64 = 0.5;

impl SyntheticRecipe {
    /// Exterior cameras carry traffic context and vehicle behaviour, the
    /// inside camera carries driver behaviour, joints carry driver emotion
    /// with a weaker copy in the interior views.
    pub fn for_config(cfg: &ModelConfig, noise: f64) -> Self {
        Self {
            designated: [
                Modality::Joints,
                Modality::Interior,
                Modality::Exterior,
                Modality::Exterior,
            ],
            amplitude: [0.8; 4],
            noise,
            frames: cfg.frame_count,
            view_hw: [cfg.view_height, cfg.view_width],
            joint_count: cfg.joint_count,
            classes: cfg.classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for m in Modality::ALL {
            if !self.designated.contains(&m) {
                return Err(Error::config(
                    "designated",
                    format!("no task is carried by {}", m.name()),
                ));
            }
        }
        let per_modality = |m: Modality| self.designated.iter().filter(|&&d| d == m).count();
        if per_modality(Modality::Exterior) > 3 || per_modality(Modality::Interior) > 3 {
            return Err(Error::config(
                "designated",
                "at most three tasks per image modality",
            ));
        }
        if per_modality(Modality::Joints) > self.joint_count {
            return Err(Error::config(
                "designated",
                "more joint-carried tasks than joints",
            ));
        }
        if let Some(&k) = self.classes.iter().find(|&&k| k < 2 || k > self.frames) {
            return Err(Error::config(
                "classes",
                format!("{k} classes need 2 ≤ K ≤ frame_count"),
            ));
        }
        if self.view_hw.iter().any(|&v| v < 4) {
            return Err(Error::config(
                "view_height",
                "synthetic views need at least 4×4 pixels",
            ));
        }
        if !(self.noise >= 0.0) || self.amplitude.iter().any(|a| !(*a >= 0.0)) {
            return Err(Error::config(
                "noise",
                "noise and amplitudes must be non-negative",
            ));
        }
        Ok(())
    }

    /// Carrier of each task: image tasks take successive views of their
    /// modality (and successive colour channels), joint tasks interleave
    /// over the joints.
    pub fn carriers(&self) -> [Carrier; 4] {
        let joint_tasks = self
            .designated
            .iter()
            .filter(|&&m| m == Modality::Joints)
            .count();
        let mut used = [0usize; 3];
        self.designated.map(|m| {
            let i = used[m.index()];
            used[m.index()] += 1;
            match m {
                Modality::Exterior => Carrier::Image {
                    view: ViewId::EXTERIOR[i],
                    channel: i % 3,
                },
                Modality::Interior => Carrier::Image {
                    // face and body are crops of the inside view, so interior
                    // codes are planted on the inside camera
                    view: ViewId::Inside,
                    channel: i % 3,
                },
                Modality::Joints => Carrier::Joints {
                    offset: i,
                    stride: joint_tasks,
                },
            }
        })
    }

    /// Face box (upper right) and body box (lower half) of the inside view.
    pub fn boxes(&self) -> [BoundingBox; 2] {
        let [h, w] = self.view_hw;
        [[w / 2, 0, w, h / 2], [0, h / 2, w, h]]
    }

    /// Rows `[h/4, 3h/4)`, columns `[0, w/2)`: off-centre so flips move it.
    pub fn patch(&self) -> BoundingBox {
        let [h, w] = self.view_hw;
        [0, h / 4, w / 2, 3 * h / 4]
    }

    /// Confidence level of class `k` among `classes`.
    pub fn level(k: usize, classes: usize) -> f64 {
        0.25 + 0.5 * k as f64 / (classes - 1) as f64
    }
}

/// Deterministic stream of synthetic samples; labels cycle through balanced
/// per-task permutations.
pub struct SyntheticStream {
    recipe: SyntheticRecipe,
    carriers: [Carrier; 4],
    rng: ChaCha8Rng,
    noise: Option<Normal<f64>>,
    remaining: usize,
    index: usize,
    pending: Vec<[usize; 4]>,
}

/// `count` samples from `recipe`, bit-identical for a fixed `seed`.
pub fn generate_synthetic(
    recipe: &SyntheticRecipe,
    count: usize,
    seed: u64,
) -> Result<SyntheticStream> {
    recipe.validate()?;
    if count == 0 {
        return Err(Error::Argument("sample count must be positive".into()));
    }
    let noise = (recipe.noise > 0.0)
        .then(|| Normal::new(0.0, recipe.noise).map_err(|e| Error::Argument(e.to_string())))
        .transpose()?;
    Ok(SyntheticStream {
        carriers: recipe.carriers(),
        recipe: recipe.clone(),
        rng: ChaCha8Rng::seed_from_u64(seed),
        noise,
        remaining: count,
        index: 0,
        pending: Vec::new(),
    })
}

impl SyntheticStream {
    /// Next block of label tuples: each task's classes in an independent
    /// random order, so every block is balanced per task.
    fn refill(&mut self) {
        let block = self.recipe.classes.iter().copied().fold(1, num_lcm);
        let mut columns: Vec<Vec<usize>> = self
            .recipe
            .classes
            .iter()
            .map(|&k| {
                let mut c: Vec<usize> = (0..block).map(|i| i % k).collect();
                c.shuffle(&mut self.rng);
                c
            })
            .collect();
        self.pending = (0..block)
            .map(|_| [0, 1, 2, 3].map(|r| columns[r].pop().expect("block sized")))
            .collect();
    }

    fn sample(&mut self, labels: [usize; 4]) -> SampleBundle {
        let r = &self.recipe;
        let [h, w] = r.view_hw;
        let t_len = r.frames;
        let mut images: Vec<Vec<f64>> = vec![vec![BASE; t_len * 3 * h * w]; 4];
        let [px0, py0, px1, py1] = r.patch();
        let raise = |img: &mut Vec<f64>, ch: usize, t: usize, amount: f64, region: BoundingBox| {
            let [x0, y0, x1, y1] = region;
            for y in y0..y1 {
                for x in x0..x1 {
                    img[((t * 3 + ch) * h + y) * w + x] += amount;
                }
            }
        };
        let slot = |v: ViewId| match v {
            ViewId::Front => 0,
            ViewId::Left => 1,
            ViewId::Right => 2,
            _ => 3,
        };
        let mut confidence = vec![BASE_CONFIDENCE; r.joint_count];
        for (task, carrier) in self.carriers.iter().enumerate() {
            let k = labels[task];
            let classes = r.classes[task];
            let amp = r.amplitude[task];
            match *carrier {
                Carrier::Image { view, channel } => {
                    for t in (0..t_len).filter(|t| t % classes == k) {
                        raise(
                            &mut images[slot(view)],
                            channel,
                            t,
                            amp,
                            [px0, py0, px1, py1],
                        );
                    }
                }
                Carrier::Joints { offset, stride } => {
                    for j in (offset..r.joint_count).step_by(stride) {
                        confidence[j] = SyntheticRecipe::level(k, classes);
                    }
                }
            }
        }
        // skeleton: joint j on a diagonal arc, jittered per sample
        let jitter: Vec<[f64; 2]> = (0..r.joint_count)
            .map(|_| {
                [
                    self.rng.random_range(-0.05..0.05),
                    self.rng.random_range(-0.05..0.05),
                ]
            })
            .collect();
        let mut joints = Vec::with_capacity(t_len * r.joint_count * 3);
        for _ in 0..t_len {
            for j in 0..r.joint_count {
                let s = (j as f64 + 0.5) / r.joint_count as f64;
                joints.extend_from_slice(&[
                    0.2 + 0.6 * s + jitter[j][0],
                    0.3 + 0.4 * (s * 3.0).sin().abs() + jitter[j][1],
                    confidence[j],
                ]);
            }
        }
        let noise = self.noise;
        let rng = &mut self.rng;
        let mut noisy = |mut d: Vec<f64>, shape: Vec<usize>| {
            for v in &mut d {
                if let Some(n) = &noise {
                    *v += n.sample(rng);
                }
                *v = v.clamp(0.0, 1.0);
            }
            Tensor::new(shape, d).expect("generator shapes")
        };
        let images: Vec<Tensor> = images
            .into_iter()
            .map(|d| noisy(d, vec![t_len, 3, h, w]))
            .collect();
        let joints = noisy(joints, vec![t_len, r.joint_count, 3]);
        let boxes = r.boxes();
        let [face, body] = interior_crops(&images[3], boxes, h, w).expect("boxes inside the view");
        let seq = |view, frames| ViewSequence { view, frames };
        let mut it = images.into_iter();
        SampleBundle {
            id: format!("syn{:06}", self.index),
            exterior: vec![
                seq(ViewId::Front, it.next().unwrap()),
                seq(ViewId::Left, it.next().unwrap()),
                seq(ViewId::Right, it.next().unwrap()),
            ],
            interior: vec![
                seq(ViewId::Inside, it.next().unwrap()),
                seq(ViewId::Face, face),
                seq(ViewId::Body, body),
            ],
            joints: JointSequence { joints },
            labels,
            boxes,
        }
    }
}

fn num_lcm(a: usize, b: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    a / gcd(a, b) * b
}

impl Iterator for SyntheticStream {
    type Item = SampleBundle;

    fn next(&mut self) -> Option<SampleBundle> {
        if self.remaining == 0 {
            return None;
        }
        if self.pending.is_empty() {
            self.refill();
        }
        let labels = self.pending.pop().expect("refilled");
        let s = self.sample(labels);
        self.remaining -= 1;
        self.index += 1;
        Some(s)
    }
}

/// Mirror every view and the joints: horizontal flips reverse image columns
/// and map `x ↦ 1 − x`, vertical flips reverse rows and map `y ↦ 1 − y`.
pub fn flip<T: Scalar>(b: &SampleBundle<T>, horizontal: bool, vertical: bool) -> SampleBundle<T> {
    let mut out = b.clone();
    for v in out.exterior.iter_mut().chain(out.interior.iter_mut()) {
        if horizontal {
            v.frames = v.frames.flip_axis(3);
        }
        if vertical {
            v.frames = v.frames.flip_axis(2);
        }
    }
    let d: Vec<T> = out
        .joints
        .joints
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| match i % 3 {
            0 if horizontal => T::one() - v,
            1 if vertical => T::one() - v,
            _ => v,
        })
        .collect();
    out.joints.joints = Tensor::new(out.joints.joints.shape().to_vec(), d).expect("same shape");
    out
}

/// Random horizontal and vertical flips, each with probability 1/2, applied
/// consistently to all views, frames and joints. Returns the flips drawn.
pub fn augment<T: Scalar>(b: &SampleBundle<T>, seed: u64) -> (SampleBundle<T>, [bool; 2]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flips = [rng.random_bool(0.5), rng.random_bool(0.5)];
    (flip(b, flips[0], flips[1]), flips)
}

/// Stable position of a sample id in `[0, 2⁶⁴)`.
pub fn id_hash(id: &str) -> u64 {
    let digest = Sha256::digest(id.as_bytes());
    u64::from_be_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Largest-remainder apportionment of `n` items over `fractions`.
pub fn split_sizes(n: usize, fractions: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let assigned: usize = sizes.iter().sum();
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        sizes[i] += 1;
    }
    sizes
}

/// Partition ids by hash order into train / test / validation groups with
/// largest-remainder sizes. Returns indices into `ids` per group.
pub fn split_ids(ids: &[String], fractions: [f64; 3]) -> [Vec<usize>; 3] {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by_key(|&i| (id_hash(&ids[i]), ids[i].clone()));
    let sizes = split_sizes(ids.len(), &fractions);
    let mut groups: [Vec<usize>; 3] = Default::default();
    let mut it = order.into_iter();
    for (g, &n) in groups.iter_mut().zip(&sizes) {
        g.extend(it.by_ref().take(n));
        g.sort_unstable();
    }
    groups
}

/// Lazily loaded samples of one split.
pub struct SampleStream {
    dirs: Vec<PathBuf>,
    next: usize,
    frames: usize,
    view_hw: [usize; 2],
}

impl SampleStream {
    pub fn len(&self) -> usize {
        self.dirs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dirs.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.dirs.iter().map(|d| sample_id(d)).collect()
    }
}

impl Iterator for SampleStream {
    type Item = Result<SampleBundle>;

    fn next(&mut self) -> Option<Self::Item> {
        let dir = self.dirs.get(self.next)?;
        self.next += 1;
        Some(load_sample(dir, self.frames, self.view_hw))
    }
}

/// Splits of a sample directory, plus the number of skipped samples.
pub struct SampleSplits {
    pub train: SampleStream,
    pub test: SampleStream,
    pub validation: SampleStream,
    /// Samples skipped because a modality file was missing.
    pub warnings: usize,
}

const CAMERAS: [ViewId; 4] = [ViewId::Front, ViewId::Left, ViewId::Right, ViewId::Inside];

fn sample_id(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn frame_path(dir: &Path, view: ViewId, t: usize) -> Option<PathBuf> {
    ["t3tn", "ppm"]
        .iter()
        .map(|ext| dir.join(view.name()).join(format!("frame_{t:03}.{ext}")))
        .find(|p| p.is_file())
}

fn is_complete(dir: &Path, frames: usize) -> bool {
    ["boxes.txt", "joints.t3jt", "labels.txt"]
        .iter()
        .all(|f| dir.join(f).is_file())
        && CAMERAS
            .iter()
            .all(|&v| (0..frames).all(|t| frame_path(dir, v, t).is_some()))
}

/// Index a sample directory and split it by id hash; `fractions` are
/// train / test / validation. Samples are decoded when the streams are read.
pub fn load_sample_dir(
    root: impl AsRef<Path>,
    fractions: [f64; 3],
    cfg: &ModelConfig,
) -> Result<SampleSplits> {
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::config(
            "split",
            "fractions must be non-negative and sum to 1",
        ));
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root.as_ref())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let total = dirs.len();
    dirs.retain(|d| is_complete(d, cfg.frame_count));
    let warnings = total - dirs.len();
    let ids: Vec<String> = dirs.iter().map(|d| sample_id(d)).collect();
    let [train, test, validation] = split_ids(&ids, fractions).map(|g| SampleStream {
        dirs: g.into_iter().map(|i| dirs[i].clone()).collect(),
        next: 0,
        frames: cfg.frame_count,
        view_hw: [cfg.view_height, cfg.view_width],
    });
    Ok(SampleSplits {
        train,
        test,
        validation,
        warnings,
    })
}

/// Binary PPM (`P6`, 8-bit) as `[3 × H × W]` in `[0, 1]`.
pub fn read_ppm(bytes: &[u8]) -> Result<Tensor> {
    let bad = |m: &str| Error::Format(format!("ppm: {m}"));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields
            .push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not text"))?);
    }
    if fields[0] != "P6" {
        return Err(bad("only binary P6 rasters are supported"));
    }
    let dims: Vec<usize> = fields[1..]
        .iter()
        .map(|f| f.parse().map_err(|_| bad("bad header number")))
        .collect::<Result<_>>()?;
    let (w, h, max) = (dims[0], dims[1], dims[2]);
    if max == 0 || max > 255 {
        return Err(bad("only 8-bit rasters are supported"));
    }
    let payload = bytes
        .get(pos + 1..pos + 1 + w * h * 3)
        .ok_or_else(|| bad("truncated payload"))?;
    let mut out = vec![0.0; 3 * h * w];
    for (i, px) in payload.chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * h * w + i] = px[c] as f64 / max as f64;
        }
    }
    Tensor::new(vec![3, h, w], out)
}

fn read_frame(path: &Path) -> Result<Tensor> {
    let t = if path.extension().is_some_and(|e| e == "ppm") {
        read_ppm(&fs::read(path)?)?
    } else {
        Tensor::load(path)?
    };
    if t.rank() != 3 || t.shape()[0] != 3 {
        return Err(Error::Format(format!(
            "{}: frame shape {:?}, expected [3×H×W]",
            path.display(),
            t.shape()
        )));
    }
    // 8-bit values stored as floats are rescaled
    if t.data().iter().any(|&v| v > 1.0) {
        return Ok(t.map(|v| (v / 255.0).clamp(0.0, 1.0)));
    }
    Ok(t.map(|v| v.clamp(0.0, 1.0)))
}

fn parse_ints(path: &Path, text: &str) -> Result<Vec<usize>> {
    text.split_whitespace()
        .map(|s| {
            s.parse().map_err(|_| {
                Error::Format(format!(
                    "{}: {s:?} is not a non-negative integer",
                    path.display()
                ))
            })
        })
        .collect()
}

/// Decode one sample folder, resizing frames to `view_hw`.
pub fn load_sample(dir: &Path, frames: usize, view_hw: [usize; 2]) -> Result<SampleBundle> {
    let [vh, vw] = view_hw;
    let missing = |what: String| Error::Input(format!("{}: missing {what}", dir.display()));
    let mut cams = Vec::with_capacity(4);
    let mut raw_inside = Vec::new();
    for view in CAMERAS {
        let mut per_frame = Vec::with_capacity(frames);
        for t in 0..frames {
            let path = frame_path(dir, view, t)
                .ok_or_else(|| missing(format!("{} frame {t}", view.name())))?;
            let f = read_frame(&path)?;
            if view == ViewId::Inside {
                raw_inside.push(f.clone());
            }
            per_frame.push(resize(&f, vh, vw)?);
        }
        cams.push(ViewSequence {
            view,
            frames: Tensor::stack(&per_frame)?,
        });
    }
    let boxes_path = dir.join("boxes.txt");
    let b = parse_ints(&boxes_path, &fs::read_to_string(&boxes_path)?)?;
    let boxes: [BoundingBox; 2] = match b.as_slice() {
        [a, b, c, d, e, f, g, h] => [[*a, *b, *c, *d], [*e, *f, *g, *h]],
        _ => {
            return Err(Error::Format(format!(
                "{}: expected two boxes of four integers",
                boxes_path.display()
            )))
        }
    };
    let crops = boxes.map(|bx| -> Result<Tensor> {
        let per_frame = raw_inside
            .iter()
            .map(|f| resize(&crop(f, bx)?, vh, vw))
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack(&per_frame)
    });
    let [face, body] = crops;
    let joints = JointSequence::load(dir.join("joints.t3jt"))?;
    if joints.frames() != frames {
        return Err(Error::Format(format!(
            "{}: joints have {} frames, expected {frames}",
            dir.display(),
            joints.frames()
        )));
    }
    let labels_path = dir.join("labels.txt");
    let l = parse_ints(&labels_path, &fs::read_to_string(&labels_path)?)?;
    let labels: [usize; 4] = l
        .try_into()
        .map_err(|_| Error::Format(format!("{}: expected four labels", labels_path.display())))?;
    let mut cams = cams.into_iter();
    Ok(SampleBundle {
        id: sample_id(dir),
        exterior: cams.by_ref().take(3).collect(),
        interior: vec![
            cams.next().expect("inside camera"),
            ViewSequence {
                view: ViewId::Face,
                frames: face?,
            },
            ViewSequence {
                view: ViewId::Body,
                frames: body?,
            },
        ],
        joints,
        labels,
        boxes,
    })
}

/// Write a sample in the directory layout (face and body are stored as
/// boxes on the inside camera, not as images).
pub fn write_sample(root: impl AsRef<Path>, b: &SampleBundle) -> Result<PathBuf> {
    let dir = root.as_ref().join(&b.id);
    for view in CAMERAS {
        let seq = b
            .view(view)
            .ok_or_else(|| Error::Input(format!("sample {}: missing {}", b.id, view.name())))?;
        let vdir = dir.join(view.name());
        fs::create_dir_all(&vdir)?;
        for t in 0..seq.frames.shape()[0] {
            seq.frames
                .index_first(t)
                .save(vdir.join(format!("frame_{t:03}.t3tn")))?;
        }
    }
    let boxes: Vec<String> = b
        .boxes
        .iter()
        .map(|bx| {
            bx.iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect();
    fs::write(dir.join("boxes.txt"), boxes.join("\n") + "\n")?;
    b.joints.save(dir.join("joints.t3jt"))?;
    let labels: Vec<String> = b.labels.iter().map(usize::to_string).collect();
    fs::write(dir.join("labels.txt"), labels.join(" ") + "\n")?;
    Ok(dir)
}

/// Class count per task implied by the labels present (at least 2).
pub fn infer_class_counts<'a>(samples: impl IntoIterator<Item = &'a SampleBundle>) -> [usize; 4] {
    let mut counts = [2; 4];
    for s in samples {
        for (c, &l) in counts.iter_mut().zip(&s.labels) {
            *c = (*c).max(l + 1);
        }
    }
    counts
}
