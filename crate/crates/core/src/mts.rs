//! Multi-view temporal feature extraction: the view stem and the dual-path
//! state-space block.
//!
//! Feature maps are `[N × C × H × W]` with channel `t·C' + v·q + j` holding
//! feature `j` of view `v` at frame `t` (`C' = C/T`, `q = C'/V`), so the
//! temporal scans can recover the frame axis.

use crate::config::{Ablation, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{add_batch, drop_batch, Builder, Conv, Pass};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::ssm::{gate_var, scan_var, ScanDirection, SsmVars};
use crate::tape::{ConvKind, PoolKind, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ViewId {
    Front,
    Left,
    Right,
    Inside,
    Face,
    Body,
}

impl ViewId {
    pub const ALL: [ViewId; 6] = [
        ViewId::Front,
        ViewId::Left,
        ViewId::Right,
        ViewId::Inside,
        ViewId::Face,
        ViewId::Body,
    ];
    pub const EXTERIOR: [ViewId; 3] = [ViewId::Front, ViewId::Left, ViewId::Right];
    pub const INTERIOR: [ViewId; 3] = [ViewId::Inside, ViewId::Face, ViewId::Body];

    pub fn name(self) -> &'static str {
        match self {
            ViewId::Front => "front",
            ViewId::Left => "left",
            ViewId::Right => "right",
            ViewId::Inside => "inside",
            ViewId::Face => "face",
            ViewId::Body => "body",
        }
    }

    pub fn parse(s: &str) -> Option<ViewId> {
        ViewId::ALL.into_iter().find(|v| v.name() == s)
    }
}

/// One camera's frames, `[T × 3 × H_v × W_v]` with pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewSequence<T: Scalar = f64> {
    pub view: ViewId,
    pub frames: Tensor<T>,
}

impl<T: Scalar> ViewSequence<T> {
    pub fn validate(&self, frame_count: usize) -> Result<()> {
        let s = self.frames.shape();
        if s.len() != 4 || s[1] != 3 || s[0] != frame_count {
            return Err(Error::Input(format!(
                "view {}: expected [{frame_count}×3×H×W] frames, got {s:?}",
                self.view.name()
            )));
        }
        let (lo, hi) = (T::zero(), T::one());
        if self.frames.data().iter().any(|&p| !(p >= lo && p <= hi)) {
            return Err(Error::Input(format!(
                "view {}: pixel outside [0, 1]",
                self.view.name()
            )));
        }
        Ok(())
    }
}

/// Per-view depthwise + per-frame pointwise convolution, then adaptive
/// pooling to the branch's feature size.
#[derive(Clone, Debug)]
pub struct StemParams {
    pub views: Vec<ViewId>,
    /// `(depthwise, pointwise)` per view, in `views` order.
    pub convs: Vec<(Conv, Conv)>,
    pub frames: usize,
    pub channels: usize,
    pub out_hw: [usize; 2],
}

impl StemParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut Builder,
        views: &[ViewId],
        frames: usize,
        channels: usize,
        out_hw: [usize; 2],
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        if views.is_empty() || channels % (frames * views.len()) != 0 {
            return Err(Error::config(
                "channels",
                format!(
                    "{channels} channels do not split into {frames} frames × {} views",
                    views.len()
                ),
            ));
        }
        let per_view = channels / views.len();
        let convs = views
            .iter()
            .map(|v| {
                b.scope(v.name(), |b| {
                    let dw = Conv::new(
                        b,
                        "depthwise",
                        ConvKind::Depthwise2d,
                        &[3 * frames, 1, kernel, kernel],
                        &[stride],
                        &[kernel / 2],
                    );
                    // groups = frames: each frame's three colour channels feed only that frame's features
                    let pw = Conv::new(
                        b,
                        "pointwise",
                        ConvKind::D2,
                        &[per_view, 3, 1, 1],
                        &[1],
                        &[0],
                    );
                    (dw, pw)
                })
            })
            .collect();
        Ok(Self {
            views: views.to_vec(),
            convs,
            frames,
            channels,
            out_hw,
        })
    }

    pub fn for_config(b: &mut Builder, cfg: &ModelConfig, views: &[ViewId]) -> Result<Self> {
        Self::new(
            b,
            views,
            cfg.frame_count,
            cfg.channels,
            [cfg.height, cfg.width],
            3,
            cfg.stem_stride,
        )
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.convs
            .iter()
            .flat_map(|(a, b)| a.param_ids().into_iter().chain(b.param_ids()))
            .collect()
    }
}

/// Stem over batched views `[N × T × 3 × H_v × W_v]`, in `sp.views` order.
pub fn stem_var<T: Scalar>(p: &mut Pass<'_, T>, sp: &StemParams, views: &[Var]) -> Result<Var> {
    if views.len() != sp.views.len() {
        return Err(Error::Input(format!(
            "stem expects {} views, got {}",
            sp.views.len(),
            views.len()
        )));
    }
    let q = sp.channels / (sp.frames * sp.views.len());
    let mut parts = Vec::with_capacity(views.len());
    for ((&x, (dw, pw)), id) in views.iter().zip(&sp.convs).zip(&sp.views) {
        let s = p.tape.shape(x).to_vec();
        if s.len() != 5 || s[1] != sp.frames || s[2] != 3 {
            return Err(Error::Input(format!(
                "view {}: expected [N×{}×3×H×W], got {s:?}",
                id.name(),
                sp.frames
            )));
        }
        let n = s[0];
        let x = p.tape.reshape(x, &[n, 3 * sp.frames, s[3], s[4]])?;
        let x = dw.forward(p, x)?;
        let x = pw.forward(p, x)?;
        let x = p.tape.pool(
            x,
            &PoolKind::AvgAdaptive {
                target: sp.out_hw.to_vec(),
            },
        )?;
        parts.push(
            p.tape
                .reshape(x, &[n, sp.frames, q, sp.out_hw[0], sp.out_hw[1]])?,
        );
    }
    let n = p.tape.shape(parts[0])[0];
    let joined = p.tape.concat(&parts, 2)?;
    p.tape
        .reshape(joined, &[n, sp.channels, sp.out_hw[0], sp.out_hw[1]])
}

/// Stem of one sample; returns `F_f` as `[C × H × W]`.
pub fn stem<T: Scalar>(
    store: &ParamStore<T>,
    sp: &StemParams,
    views: &[ViewSequence<T>],
) -> Result<Tensor<T>> {
    let mut p = Pass::eval(store, &[]);
    let mut vars = Vec::with_capacity(sp.views.len());
    for id in &sp.views {
        let v = views
            .iter()
            .find(|v| v.view == *id)
            .ok_or_else(|| Error::Input(format!("missing view {}", id.name())))?;
        v.validate(sp.frames)?;
        let mut shape = vec![1];
        shape.extend_from_slice(v.frames.shape());
        vars.push(p.input(v.frames.reshape(&shape)?));
    }
    let out = stem_var(&mut p, sp, &vars)?;
    drop_batch(p.value(out))
}

/// Dual-path temporal block: `F_o = F_f + γ·LN(W_ssm ⊙ (F_l + F_g))`.
#[derive(Clone, Debug)]
pub struct MtsBlockParams {
    /// Kernel-3 convolution along the channel axis.
    pub conv1d: Conv,
    pub a_fwd: ParamId,
    pub d_fwd: ParamId,
    /// Backward-path transition and skip; absent when no path scans backward.
    pub a_bwd: Option<ParamId>,
    pub d_bwd: Option<ParamId>,
    /// Input and output projections shared by both scan paths.
    pub b: ParamId,
    pub c_mat: ParamId,
    pub local: Conv,
    /// Absent when the block keeps the local path only.
    pub global: Option<Conv>,
    pub gamma: ParamId,
    pub out: Conv,
    pub frames: usize,
    pub grid: usize,
    pub dual_scan: bool,
}

impl MtsBlockParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut Builder,
        channels: usize,
        frames: usize,
        state: usize,
        grid: usize,
        dual_scan: bool,
        global_local: bool,
    ) -> Result<Self> {
        if channels % frames != 0 {
            return Err(Error::config(
                "channels",
                format!("C % T == 0 violated: {channels} channels, {frames} frames"),
            ));
        }
        let c = channels;
        let s = (state as f64).sqrt().recip();
        let conv1d = Conv::new(b, "conv1d", ConvKind::D2, &[1, 1, 3, 1], &[1], &[1, 0]);
        let a_fwd = b.uniform("ssm_fwd.A", &[c, state], -1.0, 1.0);
        let d_fwd = b.add("ssm_fwd.D", Tensor::ones(&[c]));
        let backward = dual_scan && global_local;
        let (a_bwd, d_bwd) = if backward {
            (
                Some(b.uniform("ssm_bwd.A", &[c, state], -1.0, 1.0)),
                Some(b.add("ssm_bwd.D", Tensor::ones(&[c]))),
            )
        } else {
            (None, None)
        };
        let bp = b.uniform("ssm.B", &[c, state], -s, s);
        let cp = b.uniform("ssm.C", &[c, state], -s, s);
        let local = Conv::pointwise(b, "local", c, c);
        let global = global_local.then(|| Conv::pointwise(b, "global", c, c));
        let gamma = b.add("gamma", Tensor::full(&[1], 0.5));
        let out = Conv::pointwise(b, "out", c, c);
        Ok(Self {
            conv1d,
            a_fwd,
            d_fwd,
            a_bwd,
            d_bwd,
            b: bp,
            c_mat: cp,
            local,
            global,
            gamma,
            out,
            frames,
            grid,
            dual_scan: backward,
        })
    }

    pub fn for_config(b: &mut Builder, cfg: &ModelConfig) -> Result<Self> {
        let a: &Ablation = &cfg.ablation;
        Self::new(
            b,
            cfg.channels,
            cfg.frame_count,
            cfg.state_dim,
            cfg.global_grid,
            !a.no_dual_scan,
            !a.no_global_local,
        )
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.conv1d.param_ids();
        ids.extend([self.a_fwd, self.d_fwd]);
        ids.extend(self.a_bwd);
        ids.extend(self.d_bwd);
        ids.extend([self.b, self.c_mat]);
        ids.extend(self.local.param_ids());
        if let Some(g) = &self.global {
            ids.extend(g.param_ids());
        }
        ids.push(self.gamma);
        ids.extend(self.out.param_ids());
        ids
    }
}

pub fn mts_block_var<T: Scalar>(p: &mut Pass<'_, T>, bp: &MtsBlockParams, x: Var) -> Result<Var> {
    let s = p.tape.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::shape(
            "mts_block",
            format!("expected [N×C×H×W], got {s:?}"),
        ));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if c % bp.frames != 0 {
        return Err(Error::config(
            "channels",
            format!("C % T == 0 violated: {c} channels, {} frames", bp.frames),
        ));
    }
    let u = p.tape.reshape(x, &[n, 1, c, h * w])?;
    let u = bp.conv1d.forward(p, u)?;
    let u = p.tape.reshape(u, &[n, c, h, w])?;
    let u = p.tape.gelu(u);

    let shared_b = p.param(bp.b);
    let shared_c = p.param(bp.c_mat);
    let fwd = SsmVars {
        a: p.param(bp.a_fwd),
        b: shared_b,
        c_mat: shared_c,
        d: p.param(bp.d_fwd),
    };
    let sf = scan_var(&mut p.tape, u, &fwd, bp.frames, ScanDirection::Forward)?;
    let local = p.tape.pool(
        sf,
        &PoolKind::AvgFixed {
            kernel: vec![3, 3],
            stride: vec![1],
            pad: vec![1],
        },
    )?;
    let f_l = bp.local.forward(p, local)?;

    let mixed = match &bp.global {
        Some(global) => {
            let sb = match (bp.a_bwd, bp.d_bwd) {
                (Some(a), Some(d)) if bp.dual_scan => {
                    let bwd = SsmVars {
                        a: p.param(a),
                        b: shared_b,
                        c_mat: shared_c,
                        d: p.param(d),
                    };
                    scan_var(&mut p.tape, u, &bwd, bp.frames, ScanDirection::Backward)?
                }
                _ => sf,
            };
            let g = p.tape.pool(
                sb,
                &PoolKind::AvgAdaptive {
                    target: vec![bp.grid, bp.grid],
                },
            )?;
            let g = p.tape.upsample_nearest(g, &[h, w])?;
            let f_g = global.forward(p, g)?;
            p.tape.add(f_l, f_g)?
        }
        None => {
            let two = T::one() + T::one();
            p.tape.scale(f_l, two)
        }
    };

    let gate = gate_var(&mut p.tape, &fwd)?;
    let z = p.tape.scale_channels(mixed, gate)?;
    let z = bp.out.forward(p, z)?;
    let gamma = p.param(bp.gamma);
    let z = p.tape.mul_scalar(z, gamma)?;
    p.tape.add(x, z)
}

/// Apply blocks in order.
pub fn mts_stack_var<T: Scalar>(
    p: &mut Pass<'_, T>,
    blocks: &[MtsBlockParams],
    x: Var,
) -> Result<Var> {
    if blocks.is_empty() {
        return Err(Error::config("depth", "at least one block is required"));
    }
    blocks.iter().try_fold(x, |x, bp| mts_block_var(p, bp, x))
}

/// One block on `[C × H × W]` (or batched `[N × C × H × W]`) features.
pub fn mts_block<T: Scalar>(
    store: &ParamStore<T>,
    bp: &MtsBlockParams,
    f_f: &Tensor<T>,
) -> Result<Tensor<T>> {
    mts_stack(store, std::slice::from_ref(bp), f_f)
}

pub fn mts_stack<T: Scalar>(
    store: &ParamStore<T>,
    blocks: &[MtsBlockParams],
    f_f: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (x, single) = add_batch(f_f, 4)?;
    let mut p = Pass::eval(store, &[]);
    let xv = p.input(x);
    let y = mts_stack_var(&mut p, blocks, xv)?;
    if single {
        drop_batch(p.value(y))
    } else {
        Ok(p.value(y).clone())
    }
}

/// One image branch: stem followed by a block stack.
#[derive(Clone, Debug)]
pub struct MtsBranch {
    pub stem: StemParams,
    pub blocks: Vec<MtsBlockParams>,
}

impl MtsBranch {
    pub fn new(b: &mut Builder, cfg: &ModelConfig, views: &[ViewId]) -> Result<Self> {
        let stem = b.scope("stem", |b| StemParams::for_config(b, cfg, views))?;
        let blocks = (0..cfg.depth)
            .map(|i| b.scope(&format!("block{i}"), |b| MtsBlockParams::for_config(b, cfg)))
            .collect::<Result<_>>()?;
        Ok(Self { stem, blocks })
    }

    pub fn forward<T: Scalar>(&self, p: &mut Pass<'_, T>, views: &[Var]) -> Result<Var> {
        let f = stem_var(p, &self.stem, views)?;
        mts_stack_var(p, &self.blocks, f)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.stem.param_ids();
        for b in &self.blocks {
            ids.extend(b.param_ids());
        }
        ids
    }
}
