use super::{Real, Tape, Tensor, Var};
use crate::error::Result;

/// A scalar-valued computation that can be replayed at any precision.
pub trait GradFn {
    fn eval<T: Real>(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var>;
}

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(input, element, analytic, numeric)` at the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
    /// Elements whose step straddled a non-differentiable point and were
    /// compared at a refined step instead.
    pub refined: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Denominator floor of the relative error, so that gradients that are
/// zero up to rounding compare on absolute terms.
const REL_FLOOR: f64 = 1e-3;

/// One-sided slopes differing by more than this (relative) mark a kink.
const KINK_TOL: f64 = 1e-3;

/// Refinements tried at a kink, each dividing the step by 100.
const MAX_REFINE: usize = 3;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compares the reverse-mode gradient of `f` against a central difference
/// of step `step`, both evaluated in `f64`.
///
/// At most `max_per_input` elements of each input are perturbed, spread
/// evenly across the tensor. When the forward and backward one-sided
/// slopes disagree, the step crossed a kink (a ReLU or clamp boundary) and
/// the central difference is repeated with a smaller step. A kink that
/// survives every refinement sits at the point itself; there any value
/// between the two one-sided slopes is a valid subgradient.
pub fn gradcheck<F: GradFn>(
    f: &F,
    inputs: &[Tensor<f32>],
    step: f64,
    max_per_input: usize,
) -> Result<GradCheckReport> {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.cast())).collect();
    let loss = f.eval(&mut tape, &vars)?;
    let mut grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();

    let base: Vec<Tensor<f64>> = inputs.iter().map(|t| t.cast()).collect();
    let eval64 = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f.eval(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };
    let f0 = eval64(&base)?;

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
        refined: 0,
    };
    let mut xs = base.clone();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.len();
        let stride = n.div_ceil(max_per_input.max(1)).max(1);
        for e in (0..n).step_by(stride) {
            let x0 = base[i].data()[e];
            let mut probe = |h: f64| -> Result<(f64, f64)> {
                xs[i].data_mut()[e] = x0 + h;
                let plus = eval64(&xs)?;
                xs[i].data_mut()[e] = x0 - h;
                let minus = eval64(&xs)?;
                xs[i].data_mut()[e] = x0;
                Ok(((plus - f0) / h, (f0 - minus) / h))
            };
            let (mut fwd, mut bwd) = probe(step)?;
            let mut h = step;
            let mut refinements = 0;
            while rel_err(fwd, bwd) > KINK_TOL && refinements < MAX_REFINE {
                h /= 100.0;
                (fwd, bwd) = probe(h)?;
                refinements += 1;
            }
            if refinements > 0 {
                report.refined += 1;
            }
            let a = analytic[i].data()[e];
            let numeric = 0.5 * (fwd + bwd);
            let err = if rel_err(fwd, bwd) <= KINK_TOL {
                rel_err(a, numeric)
            } else if a >= fwd.min(bwd) && a <= fwd.max(bwd) {
                0.0
            } else {
                rel_err(a, fwd).min(rel_err(a, bwd))
            };
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((i, e, a, numeric));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct ConvReluBce;

    impl GradFn for ConvReluBce {
        fn eval<T: Real>(&self, tape: &mut Tape<T>, v: &[Var]) -> Result<Var> {
            let h = tape.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
            let h = tape.relu(h)?;
            let logits = tape.conv2d(h, v[3], None, 1, 1)?;
            let p = tape.softmax_channels(logits)?;
            let target: Vec<bool> = (0..20).map(|i| i % 3 == 0).collect();
            tape.bce_foreground(p, &target)
        }
    }

    #[test]
    fn conv_relu_bce_stack_agrees_with_central_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut r = |shape: &[usize]| Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0f32..1.0));
        let inputs = vec![r(&[2, 4, 5]), r(&[3, 2, 3, 3]), r(&[3]), r(&[2, 3, 3, 3])];
        let rep = gradcheck(&ConvReluBce, &inputs, 1e-3, usize::MAX).unwrap();
        assert!(rep.passed(1e-3), "{rep:?}");
        assert!(rep.checked > 100);
    }

    struct SumRelu;

    impl GradFn for SumRelu {
        fn eval<T: Real>(&self, tape: &mut Tape<T>, v: &[Var]) -> Result<Var> {
            let r = tape.relu(v[0])?;
            tape.sum(r)
        }
    }

    #[test]
    fn kink_at_the_point_accepts_a_subgradient() {
        let x = Tensor::new([3], vec![0.0f32, 0.5, -0.5]).unwrap();
        let rep = gradcheck(&SumRelu, &[x], 1e-3, usize::MAX).unwrap();
        assert_eq!(rep.refined, 1);
        assert!(rep.passed(1e-9), "{rep:?}");
    }

    /// Weighted sum so every output element gets a distinct upstream gradient.
    fn weighted<T: Real>(tape: &mut Tape<T>, y: Var) -> Result<Var> {
        let shape = tape.value(y).shape().to_vec();
        let w = tape.constant(Tensor::from_fn(shape, |i| T::lit(((i * 7919) % 13) as f64 / 13.0 - 0.4)));
        let p = tape.mul(y, w)?;
        tape.sum(p)
    }

    macro_rules! op {
        (|$t:ident, $v:ident| $body:expr) => {{
            struct Op;
            impl GradFn for Op {
                fn eval<T: Real>(&self, $t: &mut Tape<T>, $v: &[Var]) -> Result<Var> {
                    let y = $body?;
                    weighted($t, y)
                }
            }
            Op
        }};
    }

    fn check(op: &impl GradFn, shapes: &[&[usize]], seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor<f32>> = shapes
            .iter()
            .map(|s| Tensor::from_fn(s.to_vec(), |_| rng.random_range(-1.0f32..1.0)))
            .collect();
        let rep = gradcheck(op, &inputs, 1e-3, 64).unwrap();
        assert!(rep.passed(1e-3), "{rep:?}");
    }

    #[test]
    fn each_op_agrees_with_central_difference() {
        check(&op!(|t, v| t.center_pivot(v[0], v[1], v[2], Some(v[3]), 1)), &[&[2, 3, 4, 4, 3], &[3, 2, 3, 3], &[3, 2, 3, 3], &[3]], 1);
        check(&op!(|t, v| t.center_pivot(v[0], v[1], v[2], None, 2)), &[&[2, 3, 3, 5, 4], &[2, 2, 3, 3], &[2, 2, 1, 3]], 2);
        check(&op!(|t, v| t.group_norm(v[0], v[1], v[2], 2)), &[&[4, 3, 2, 2], &[4], &[4]], 3);
        check(&op!(|t, v| t.resize(v[0], 5, 3)), &[&[2, 3, 4]], 4);
        check(&op!(|t, v| t.resize(v[0], 6, 4)), &[&[2, 3, 2, 2, 2]], 5);
        check(&op!(|t, v| t.mean_trailing(v[0], 3)), &[&[2, 3, 2, 2, 2]], 6);
        check(&op!(|t, v| t.pool_support(v[0], 2, 1)), &[&[2, 2, 2, 4, 3]], 7);
        check(&op!(|t, v| t.concat_channels(v[0], v[1])), &[&[2, 3, 3], &[1, 3, 3]], 8);
        check(&op!(|t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 1)), &[&[2, 5, 6], &[3, 2, 3, 3], &[3]], 9);
        check(&op!(|t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1)), &[&[2, 5, 6], &[3, 2, 3, 3], &[3]], 12);
        check(
            &op!(|t, v| {
                let p = t.softmax_channels(v[0])?;
                t.log_clamped(p, T::lit(1e-7))
            }),
            &[&[3, 3, 4]],
            10,
        );
        check(
            &op!(|t, v| {
                let p = t.softmax_channels(v[0])?;
                t.bce_foreground(p, &[true, false, false, true, true, false])
            }),
            &[&[2, 2, 3]],
            11,
        );
    }
}
