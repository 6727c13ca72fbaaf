//! Diagonal state-space machinery: the bidirectional temporal scan and the
//! parameter-derived channel gate.
//!
//! Channels carry `T` temporal groups of `C' = C / T` channels each; channel
//! `t·C' + c'` holds feature `c'` of frame `t`. The scan runs over `t`, so the
//! parameter rows used at step `t` are the rows of that frame's group.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScanDirection {
    Forward,
    Backward,
}

impl ScanDirection {
    pub fn is_reverse(self) -> bool {
        self == ScanDirection::Backward
    }
}

/// All-ones vector scaled to unit Euclidean norm.
pub fn unit_vector<T: Scalar>(len: usize) -> Tensor<T> {
    Tensor::full(&[len], T::from_usize_lossy(len).sqrt().recip())
}

/// State-space parameters for `C` channels with state dimension `n`.
///
/// `a` is the unconstrained transition parameter: the scan decays by
/// `exp(−softplus(a))`, keeping every per-step factor in `(0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams<T: Scalar = f64> {
    pub a: Tensor<T>,
    pub b: Tensor<T>,
    pub c_mat: Tensor<T>,
    pub d: Tensor<T>,
}

impl<T: Scalar> SsmParams<T> {
    pub fn zeros(channels: usize, state: usize) -> Self {
        Self {
            a: Tensor::zeros(&[channels, state]),
            b: Tensor::zeros(&[channels, state]),
            c_mat: Tensor::zeros(&[channels, state]),
            d: Tensor::zeros(&[channels]),
        }
    }

    pub fn random(channels: usize, state: usize, rng: &mut impl Rng) -> Self {
        Self {
            a: Tensor::uniform(&[channels, state], -1.0, 1.0, rng),
            b: Tensor::uniform(&[channels, state], -1.0, 1.0, rng),
            c_mat: Tensor::uniform(&[channels, state], -1.0, 1.0, rng),
            d: Tensor::uniform(&[channels], -1.0, 1.0, rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.d.shape()[0]
    }

    pub fn state(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn d_state(&self) -> Tensor<T> {
        unit_vector(self.state())
    }

    pub fn d_dim(&self) -> Tensor<T> {
        unit_vector(self.channels())
    }

    /// Per-step log decay `−softplus(a)`.
    pub fn log_decay(&self) -> Tensor<T> {
        self.a.map(|v| -crate::kernels::softplus(v))
    }

    pub fn validate(&self) -> Result<()> {
        if self.d.rank() != 1 || self.a.rank() != 2 {
            return Err(Error::dim("ssm params", self.a.shape(), self.d.shape()));
        }
        let expect = [self.channels(), self.a.shape()[1]];
        for t in [&self.a, &self.b, &self.c_mat] {
            if t.shape() != expect {
                return Err(Error::dim("ssm params", &expect, t.shape()));
            }
        }
        for (name, t) in [
            ("A", &self.a),
            ("B", &self.b),
            ("C", &self.c_mat),
            ("D", &self.d),
        ] {
            if !t.all_finite() {
                return Err(Error::NonFinite { name: name.into() });
            }
        }
        Ok(())
    }

    fn bind(&self, tape: &mut Tape<T>) -> SsmVars {
        SsmVars {
            a: tape.constant(self.a.clone()),
            b: tape.constant(self.b.clone()),
            c_mat: tape.constant(self.c_mat.clone()),
            d: tape.constant(self.d.clone()),
        }
    }
}

/// State-space parameters bound on a tape.
#[derive(Clone, Copy, Debug)]
pub struct SsmVars {
    pub a: Var,
    pub b: Var,
    pub c_mat: Var,
    pub d: Var,
}

/// `σ(A·d_state + (B·C_matᵀ)·d_dim + D)`, shape `[C]`.
pub fn gate_var<T: Scalar>(tape: &mut Tape<T>, p: &SsmVars) -> Result<Var> {
    let ashape = tape.shape(p.a).to_vec();
    if ashape.len() != 2
        || tape.shape(p.b) != ashape.as_slice()
        || tape.shape(p.c_mat) != ashape.as_slice()
    {
        return Err(Error::dim("gate", &ashape, tape.shape(p.b)));
    }
    let (c, n) = (ashape[0], ashape[1]);
    if tape.shape(p.d) != [c] {
        return Err(Error::dim("gate", &ashape, tape.shape(p.d)));
    }
    let d_state = tape.constant(unit_vector::<T>(n).reshape(&[n, 1])?);
    let d_dim = tape.constant(unit_vector::<T>(c).reshape(&[c, 1])?);
    let row = tape.matmul(p.a, d_state)?;
    let ct = tape.transpose(p.c_mat)?;
    let bc = tape.matmul(p.b, ct)?;
    let mix = tape.matmul(bc, d_dim)?;
    let pre = tape.add(row, mix)?;
    let pre = tape.reshape(pre, &[c])?;
    let pre = tape.add(pre, p.d)?;
    Ok(tape.sigmoid(pre))
}

/// Scan `x: [N × C × …]` whose channels hold `steps` temporal groups.
pub fn scan_var<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    p: &SsmVars,
    steps: usize,
    dir: ScanDirection,
) -> Result<Var> {
    let sp = tape.softplus(p.a);
    let log_decay = tape.neg(sp);
    tape.scan(x, log_decay, p.b, p.c_mat, p.d, steps, dir.is_reverse())
}

/// Channel gate of the state-space parameters; every entry lies in `(0, 1)`.
pub fn compute_gate<T: Scalar>(p: &SsmParams<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::inference();
    let vars = p.bind(&mut tape);
    let g = gate_var(&mut tape, &vars)?;
    Ok(tape.value(g).clone())
}

/// Scan `x: [T × C' × L]` with parameters covering all `T·C'` channels.
pub fn scan<T: Scalar>(x: &Tensor<T>, p: &SsmParams<T>, dir: ScanDirection) -> Result<Tensor<T>> {
    if x.rank() != 3 {
        return Err(Error::shape(
            "scan",
            format!("expected [T×C'×L], got {:?}", x.shape()),
        ));
    }
    let (steps, group, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if p.channels() != steps * group {
        return Err(Error::dim("scan", x.shape(), p.a.shape()));
    }
    let mut tape = Tape::inference();
    let vars = p.bind(&mut tape);
    let xv = tape.constant(x.reshape(&[1, steps * group, len])?);
    let y = scan_var(&mut tape, xv, &vars, steps, dir)?;
    tape.value(y).reshape(x.shape())
}

/// Gradients of a loss with respect to [`SsmParams`].
#[derive(Clone, Debug, Default)]
pub struct SsmGrads<T: Scalar = f64> {
    pub a: Option<Tensor<T>>,
    pub b: Option<Tensor<T>>,
    pub c_mat: Option<Tensor<T>>,
    pub d: Option<Tensor<T>>,
}

/// Plain gradient step `θ ← θ − η·∂L/∂θ` on A, B, C and D.
pub fn apply_update<T: Scalar>(
    p: &SsmParams<T>,
    grads: &SsmGrads<T>,
    eta: T,
) -> Result<SsmParams<T>> {
    let step = |name: &str, w: &Tensor<T>, g: &Option<Tensor<T>>| -> Result<Tensor<T>> {
        let g = g
            .as_ref()
            .ok_or_else(|| Error::Precondition(format!("missing gradient for {name}")))?;
        if g.shape() != w.shape() {
            return Err(Error::dim("apply_update", w.shape(), g.shape()));
        }
        let data = w
            .data()
            .iter()
            .zip(g.data())
            .map(|(&w, &g)| w - eta * g)
            .collect();
        Tensor::new(w.shape().to_vec(), data)
    };
    Ok(SsmParams {
        a: step("A", &p.a, &grads.a)?,
        b: step("B", &p.b, &grads.b)?,
        c_mat: step("C", &p.c_mat, &grads.c_mat)?,
        d: step("D", &p.d, &grads.d)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check, GradCheckOptions};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn unit_vectors_have_unit_norm() {
        let u: Tensor<f64> = unit_vector(7);
        let norm: f64 = u.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gate_of_zero_params_is_one_half() {
        let g = compute_gate(&SsmParams::<f64>::zeros(5, 3)).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn gate_saturates_with_large_skip() {
        let mut p = SsmParams::<f64>::zeros(4, 2);
        p.d = Tensor::full(&[4], 10.0);
        for v in compute_gate(&p).unwrap().data() {
            assert!((v - 0.99995).abs() < 1e-5);
            assert!(*v < 1.0);
        }
    }

    #[test]
    fn gate_hand_example() {
        let p = SsmParams {
            a: t(&[2, 1], &[1.0, 0.0]),
            b: t(&[2, 1], &[1.0, 1.0]),
            c_mat: t(&[2, 1], &[2.0, 2.0]),
            d: t(&[2], &[0.0, 0.0]),
        };
        let r = 4.0 / 2f64.sqrt();
        let expected = [1.0 / (1.0 + (-(1.0 + r)).exp()), 1.0 / (1.0 + (-r).exp())];
        let g = compute_gate(&p).unwrap();
        for (a, e) in g.data().iter().zip(expected) {
            assert!((a - e).abs() < 1e-15);
        }
        // preactivations [3.8284, 2.8284]
        assert!((g.data()[0] - 0.978_718_941_823_771).abs() < 1e-12);
        assert!((g.data()[1] - 0.944_192_780_792_830).abs() < 1e-12);
    }

    #[test]
    fn gate_rejects_inconsistent_shapes() {
        let mut p = SsmParams::<f64>::zeros(3, 2);
        p.b = Tensor::zeros(&[3, 1]);
        assert!(matches!(compute_gate(&p), Err(Error::Dimension { .. })));
        assert!(p.validate().is_err());
    }

    #[test]
    fn single_step_has_no_history() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = SsmParams::<f64>::random(3, 2, &mut rng);
        let x = Tensor::uniform(&[1, 3, 4], -1.0, 1.0, &mut rng);
        let y = scan(&x, &p, ScanDirection::Forward).unwrap();
        for c in 0..3 {
            let cb: f64 = (0..2).map(|k| p.c_mat.at(&[c, k]) * p.b.at(&[c, k])).sum();
            for l in 0..4 {
                let xv = x.at(&[0, c, l]);
                assert!((y.at(&[0, c, l]) - (cb * xv + p.d.at(&[c]) * xv)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn unit_decay_gives_prefix_sums() {
        // softplus(−50) ≈ 2e-22, so the per-step decay rounds to exactly 1.
        let p = SsmParams {
            a: Tensor::full(&[3, 1], -50.0),
            b: Tensor::ones(&[3, 1]),
            c_mat: Tensor::ones(&[3, 1]),
            d: Tensor::zeros(&[3]),
        };
        let x = t(&[3, 1, 1], &[1.0, 2.0, 3.0]);
        assert_eq!(
            scan(&x, &p, ScanDirection::Forward).unwrap().data(),
            &[1.0, 3.0, 6.0]
        );
        assert_eq!(
            scan(&x, &p, ScanDirection::Backward).unwrap().data(),
            &[6.0, 5.0, 3.0]
        );
    }

    #[test]
    fn scan_rejects_step_mismatch() {
        let p = SsmParams::<f64>::zeros(8, 1);
        assert!(matches!(
            scan(&Tensor::zeros(&[3, 2, 1]), &p, ScanDirection::Forward),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn scan_gradients_match_finite_differences() {
        for seed in 0..3u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = SsmParams::<f64>::random(6, 2, &mut rng);
            let x = Tensor::uniform(&[2, 6, 3], -1.0, 1.0, &mut rng);
            let probe = Tensor::uniform(&[2, 6, 3], -1.0, 1.0, &mut rng);
            let inputs = vec![
                ("x".to_string(), x),
                ("A".to_string(), p.a.clone()),
                ("B".to_string(), p.b.clone()),
                ("C".to_string(), p.c_mat.clone()),
                ("D".to_string(), p.d.clone()),
            ];
            for dir in [ScanDirection::Forward, ScanDirection::Backward] {
                let report = check(
                    &inputs,
                    |tape, v| {
                        let vars = SsmVars {
                            a: v[1],
                            b: v[2],
                            c_mat: v[3],
                            d: v[4],
                        };
                        let y = scan_var(tape, v[0], &vars, 3, dir)?;
                        let g = gate_var(tape, &vars)?;
                        let gs = tape.sum(g);
                        let s = tape.dot(y, &probe)?;
                        tape.add(s, gs)
                    },
                    &GradCheckOptions::default(),
                )
                .unwrap();
                assert!(report.passed(), "{report:?}");
            }
        }
    }

    #[test]
    fn update_steps() {
        let p = SsmParams {
            b: t(&[1, 1], &[1.0]),
            ..SsmParams::<f64>::zeros(1, 1)
        };
        let zero = SsmGrads {
            a: Some(Tensor::zeros(&[1, 1])),
            b: Some(Tensor::zeros(&[1, 1])),
            c_mat: Some(Tensor::zeros(&[1, 1])),
            d: Some(Tensor::zeros(&[1])),
        };
        assert_eq!(apply_update(&p, &zero, 0.1).unwrap(), p);
        let g = SsmGrads {
            b: Some(t(&[1, 1], &[2.0])),
            ..zero.clone()
        };
        assert_eq!(apply_update(&p, &g, 0.0).unwrap(), p);
        let q = apply_update(&p, &g, 0.1).unwrap();
        assert!((q.b.data()[0] - 0.8).abs() < 1e-15);
        let missing = SsmGrads { d: None, ..zero };
        assert!(matches!(
            apply_update(&p, &missing, 0.1),
            Err(Error::Precondition(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn gate_is_strictly_bounded(seed in 0u64..10_000, scale in 0.01f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut p = SsmParams::<f64>::random(4, 2, &mut rng);
            p.a = p.a.map(|v| v * scale);
            p.d = p.d.map(|v| v * scale);
            for v in compute_gate(&p).unwrap().data() {
                prop_assert!(*v > 0.0 && *v < 1.0);
            }
        }

        #[test]
        fn scan_is_linear(seed in 0u64..10_000, alpha in -2.0f64..2.0, beta in -2.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = SsmParams::<f64>::random(8, 2, &mut rng);
            let x = Tensor::uniform(&[4, 2, 3], -1.0, 1.0, &mut rng);
            let y = Tensor::uniform(&[4, 2, 3], -1.0, 1.0, &mut rng);
            let mix = Tensor::from_fn(&[4, 2, 3], |i| alpha * x.data()[i] + beta * y.data()[i]);
            for dir in [ScanDirection::Forward, ScanDirection::Backward] {
                let lhs = scan(&mix, &p, dir).unwrap();
                let sx = scan(&x, &p, dir).unwrap();
                let sy = scan(&y, &p, dir).unwrap();
                let rhs = Tensor::from_fn(&[4, 2, 3], |i| alpha * sx.data()[i] + beta * sy.data()[i]);
                prop_assert!(lhs.max_abs_diff(&rhs) < 1e-10);
            }
        }

        #[test]
        fn backward_is_reversed_forward(seed in 0u64..10_000, steps in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = SsmParams::<f64>::random(steps * 2, 3, &mut rng);
            let x = Tensor::uniform(&[steps, 2, 5], -1.0, 1.0, &mut rng);
            let back = scan(&x, &p, ScanDirection::Backward).unwrap();
            let fwd = scan(&x.flip_axis(0), &p, ScanDirection::Forward).unwrap().flip_axis(0);
            prop_assert_eq!(back, fwd);
        }

    }
}
