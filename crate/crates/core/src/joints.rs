//! 3D-CNN branch over driver joint sequences, and the joint file format.
//!
//! File layout: magic `T3JT`, `u32` frame count, `u32` joint count, then
//! `T·J·3` little-endian `f32` values `(x, y, confidence)`.

use std::io::{Read, Write};
use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Builder, Conv, Linear, Pass};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{ConvKind, PoolKind, Var};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"T3JT";

/// Joint positions `[T × J × 3]`: normalised image `x`, `y` and a confidence.
#[derive(Clone, Debug, PartialEq)]
pub struct JointSequence<T: Scalar = f64> {
    pub joints: Tensor<T>,
}

impl<T: Scalar> JointSequence<T> {
    pub fn frames(&self) -> usize {
        self.joints.shape()[0]
    }

    pub fn joint_count(&self) -> usize {
        self.joints.shape()[1]
    }

    pub fn validate(&self, frames: usize, joints: usize) -> Result<()> {
        let s = self.joints.shape();
        if s != [frames, joints, 3] {
            return Err(Error::Input(format!(
                "joint sequence: expected [{frames}×{joints}×3], got {s:?}"
            )));
        }
        if self
            .joints
            .data()
            .iter()
            .any(|&v| !(v >= T::zero() && v <= T::one()))
        {
            return Err(Error::Input("joint sequence: value outside [0, 1]".into()));
        }
        Ok(())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.frames() as u32).to_le_bytes())?;
        w.write_all(&(self.joint_count() as u32).to_le_bytes())?;
        for &v in self.joints.data() {
            w.write_all(&(v.to_f64_lossy() as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut head = [0u8; 12];
        r.read_exact(&mut head)
            .map_err(|_| Error::Format("joint file: truncated header".into()))?;
        if &head[..4] != MAGIC {
            return Err(Error::Format("joint file: bad magic".into()));
        }
        let t = u32::from_le_bytes(head[4..8].try_into().unwrap()) as usize;
        let j = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
        let mut bytes = vec![0u8; t * j * 3 * 4];
        r.read_exact(&mut bytes)
            .map_err(|_| Error::Format("joint file: truncated payload".into()))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| T::from_f64_lossy(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        Ok(Self {
            joints: Tensor::new(vec![t, j, 3], data)?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Channel widths of the two convolution stages.
pub const JOINT_WIDTHS: [usize; 2] = [16, 32];

#[derive(Clone, Debug)]
pub struct JointsParams {
    pub conv1: Conv,
    pub conv2: Conv,
    pub proj: Linear,
    pub frames: usize,
    pub joints: usize,
    pub channels: usize,
    pub out_hw: [usize; 2],
}

impl JointsParams {
    pub fn new(
        b: &mut Builder,
        frames: usize,
        joints: usize,
        channels: usize,
        out_hw: [usize; 2],
    ) -> Self {
        let [w1, w2] = JOINT_WIDTHS;
        Self {
            conv1: Conv::new(b, "conv1", ConvKind::D3, &[w1, 1, 3, 3, 3], &[1], &[1]),
            conv2: Conv::new(b, "conv2", ConvKind::D3, &[w2, w1, 3, 3, 3], &[1], &[1]),
            proj: Linear::new(b, "proj", w2, channels),
            frames,
            joints,
            channels,
            out_hw,
        }
    }

    pub fn for_config(b: &mut Builder, cfg: &ModelConfig) -> Self {
        Self::new(
            b,
            cfg.frame_count,
            cfg.joint_count,
            cfg.channels,
            [cfg.height, cfg.width],
        )
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.conv1.param_ids();
        ids.extend(self.conv2.param_ids());
        ids.extend(self.proj.param_ids());
        ids
    }
}

/// Batched joints `[N × T × J × 3]` → `[N × C × H × W]`.
///
/// Conv3d + GELU + pool to `(⌈T/2⌉, ⌈J/2⌉, 3)`, conv3d + GELU + global pool,
/// linear to `C`, then broadcast over `H × W`.
pub fn joints_var<T: Scalar>(p: &mut Pass<'_, T>, jp: &JointsParams, x: Var) -> Result<Var> {
    let s = p.tape.shape(x).to_vec();
    if s.len() != 4 || s[3] != 3 || s[1] != jp.frames {
        return Err(Error::Input(format!(
            "joints: expected [N×{}×{}×3], got {s:?}",
            jp.frames, jp.joints
        )));
    }
    if s[2] != jp.joints {
        return Err(Error::Input(format!(
            "joints: expected {} joints, got {}",
            jp.joints, s[2]
        )));
    }
    let n = s[0];
    let x = p.tape.reshape(x, &[n, 1, jp.frames, jp.joints, 3])?;
    let x = jp.conv1.forward(p, x)?;
    let x = p.tape.gelu(x);
    let x = p.tape.pool(
        x,
        &PoolKind::AvgAdaptive {
            target: vec![jp.frames.div_ceil(2), jp.joints.div_ceil(2), 3],
        },
    )?;
    let x = jp.conv2.forward(p, x)?;
    let x = p.tape.gelu(x);
    let x = p.tape.pool(
        x,
        &PoolKind::AvgAdaptive {
            target: vec![1, 1, 1],
        },
    )?;
    let x = p.tape.reshape(x, &[n, JOINT_WIDTHS[1]])?;
    let x = jp.proj.forward(p, x)?;
    let x = p.tape.reshape(x, &[n, jp.channels, 1, 1])?;
    p.tape.upsample_nearest(x, &jp.out_hw)
}

/// Branch output `H₃` of one sample, `[C × H × W]`.
pub fn joints_forward<T: Scalar>(
    store: &ParamStore<T>,
    jp: &JointsParams,
    seq: &JointSequence<T>,
) -> Result<Tensor<T>> {
    if seq.joints.rank() != 3 || seq.joint_count() != jp.joints {
        return Err(Error::Input(format!(
            "joints: expected {} joints, got shape {:?}",
            jp.joints,
            seq.joints.shape()
        )));
    }
    let mut p = Pass::eval(store, &[]);
    let mut shape = vec![1];
    shape.extend_from_slice(seq.joints.shape());
    let x = p.input(seq.joints.reshape(&shape)?);
    let y = joints_var(&mut p, jp, x)?;
    p.value(y)
        .reshape(&[jp.channels, jp.out_hw[0], jp.out_hw[1]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_params, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(t: usize, j: usize, seed: u64) -> JointSequence {
        JointSequence {
            joints: Tensor::uniform(&[t, j, 3], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
    }

    /// Direct 3D cross-correlation, zero padding 1, kernel 3, on `[C × D × H × W]`.
    fn conv3(x: &[f64], dims: [usize; 4], w: &Tensor, b: &Tensor) -> Vec<f64> {
        let [cin, d, h, wd] = dims;
        let cout = w.shape()[0];
        let mut out = vec![0.0; cout * d * h * wd];
        for co in 0..cout {
            for z in 0..d {
                for y in 0..h {
                    for xx in 0..wd {
                        let mut s = 0.0;
                        for ci in 0..cin {
                            for kz in 0..3 {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let (sz, sy, sx) = (z + kz, y + ky, xx + kx);
                                        if sz < 1 || sy < 1 || sx < 1 || sz > d || sy > h || sx > wd
                                        {
                                            continue;
                                        }
                                        let src = ((ci * d + sz - 1) * h + sy - 1) * wd + sx - 1;
                                        s += w.at(&[co, ci, kz, ky, kx]) * x[src];
                                    }
                                }
                            }
                        }
                        out[((co * d + z) * h + y) * wd + xx] = s + b.at(&[co]);
                    }
                }
            }
        }
        out
    }

    fn pool3(x: &[f64], dims: [usize; 4], target: [usize; 3]) -> Vec<f64> {
        let [c, d, h, w] = dims;
        let bins = |len: usize, t: usize| -> Vec<(usize, usize)> {
            (0..t).map(|i| (i * len / t, (i + 1) * len / t)).collect()
        };
        let mut out = Vec::new();
        for ch in 0..c {
            for &(z0, z1) in &bins(d, target[0]) {
                for &(y0, y1) in &bins(h, target[1]) {
                    for &(x0, x1) in &bins(w, target[2]) {
                        let mut s = 0.0;
                        for z in z0..z1 {
                            for y in y0..y1 {
                                for xx in x0..x1 {
                                    s += x[((ch * d + z) * h + y) * w + xx];
                                }
                            }
                        }
                        out.push(s / ((z1 - z0) * (y1 - y0) * (x1 - x0)) as f64);
                    }
                }
            }
        }
        out
    }

    fn oracle(store: &ParamStore, jp: &JointsParams, s: &JointSequence) -> Vec<f64> {
        let (t, j) = (jp.frames, jp.joints);
        let get = |id: ParamId| store.get(id).clone();
        let a = conv3(
            s.joints.data(),
            [1, t, j, 3],
            &get(jp.conv1.weight),
            &get(jp.conv1.bias.unwrap()),
        );
        let a: Vec<f64> = a.into_iter().map(gelu).collect();
        let (t2, j2) = (t.div_ceil(2), j.div_ceil(2));
        let a = pool3(&a, [16, t, j, 3], [t2, j2, 3]);
        let a = conv3(
            &a,
            [16, t2, j2, 3],
            &get(jp.conv2.weight),
            &get(jp.conv2.bias.unwrap()),
        );
        let a: Vec<f64> = a.into_iter().map(gelu).collect();
        let pooled = pool3(&a, [32, t2, j2, 3], [1, 1, 1]);
        let w = get(jp.proj.weight);
        let bias = get(jp.proj.bias);
        let [h, wd] = jp.out_hw;
        let mut out = Vec::new();
        for c in 0..jp.channels {
            let v: f64 = (0..32).map(|i| pooled[i] * w.at(&[i, c])).sum::<f64>() + bias.at(&[c]);
            out.extend(std::iter::repeat_n(v, h * wd));
        }
        out
    }

    #[test]
    fn zero_input_and_biases_give_zero() {
        let mut b = Builder::new(0);
        let jp = JointsParams::new(&mut b, 4, 5, 6, [2, 2]);
        for id in [jp.conv1.bias.unwrap(), jp.conv2.bias.unwrap(), jp.proj.bias] {
            let s = b.store.get(id).shape().to_vec();
            b.store.set(id, Tensor::zeros(&s)).unwrap();
        }
        let s = JointSequence {
            joints: Tensor::zeros(&[4, 5, 3]),
        };
        let h = joints_forward(&b.store, &jp, &s).unwrap();
        assert_eq!(h.shape(), &[6, 2, 2]);
        assert!(h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_inputs_give_identical_outputs() {
        let mut b = Builder::new(1);
        let jp = JointsParams::new(&mut b, 4, 5, 6, [3, 3]);
        let mut s = seq(4, 5, 2);
        s.joints = Tensor::from_fn(&[4, 5, 3], |i| {
            if i % 3 == 2 {
                1.0
            } else {
                s.joints.data()[i]
            }
        });
        let twin = s.clone();
        assert_eq!(
            joints_forward(&b.store, &jp, &s).unwrap(),
            joints_forward(&b.store, &jp, &twin).unwrap()
        );
    }

    #[test]
    fn matches_straight_line_oracle() {
        for seed in 0..3 {
            let mut b = Builder::new(seed);
            let jp = JointsParams::new(&mut b, 4, 5, 8, [3, 3]);
            let s = seq(4, 5, seed + 3);
            let h = joints_forward(&b.store, &jp, &s).unwrap();
            let o = oracle(&b.store, &jp, &s);
            let diff = h
                .data()
                .iter()
                .zip(&o)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-10, "{diff}");
        }
    }

    #[test]
    fn joint_count_mismatch_is_input_error() {
        let mut b = Builder::new(0);
        let jp = JointsParams::new(&mut b, 4, 5, 6, [2, 2]);
        assert!(matches!(
            joints_forward(&b.store, &jp, &seq(4, 6, 0)),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn file_round_trip_and_errors() {
        let s = seq(3, 4, 9);
        let mut bytes = Vec::new();
        s.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"T3JT");
        assert_eq!(bytes.len(), 12 + 3 * 4 * 3 * 4);
        let back = JointSequence::<f64>::read_from(bytes.as_slice()).unwrap();
        assert!(back.joints.max_abs_diff(&s.joints) < 1e-6);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            JointSequence::<f64>::read_from(bad.as_slice()),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            JointSequence::<f64>::read_from(&bytes[..bytes.len() - 1]),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..3 {
            let mut b = Builder::new(seed);
            let jp = JointsParams::new(&mut b, 3, 4, 4, [2, 2]);
            let x = b.add(
                "input",
                seq(3, 4, seed).joints.reshape(&[1, 3, 4, 3]).unwrap(),
            );
            let probe = Tensor::uniform(
                &[1, 4, 2, 2],
                -1.0,
                1.0,
                &mut ChaCha8Rng::seed_from_u64(seed + 50),
            );
            let mut ids = jp.param_ids();
            ids.push(x);
            let report = check_params(
                &b.store,
                &ids,
                |tape, store| {
                    let mut p = Pass::on_tape(std::mem::take(tape), store, &[], false);
                    let xv = p.param(x);
                    let y = joints_var(&mut p, &jp, xv)?;
                    let l = p.tape.dot(y, &probe)?;
                    *tape = p.finish().0;
                    Ok(l)
                },
                &GradCheckOptions::default(),
            )
            .unwrap();
            assert!(
                report.passed(),
                "{:?}",
                report.failures().collect::<Vec<_>>()
            );
        }
    }
}
