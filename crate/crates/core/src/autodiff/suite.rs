//! Finite-difference checks for every primitive on the tape, on small
//! random inputs. Each case reduces the primitive's output to a scalar by
//! a fixed random projection so every output coordinate is exercised.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, GradCheckReport, ParamSet, Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

type Build = fn(&mut Tape, &[Var]) -> Result<Var>;

struct Case {
    name: &'static str,
    inputs: Vec<(Vec<usize>, Sampler)>,
    build: Build,
}

#[derive(Clone, Copy)]
enum Sampler {
    Uniform,
    /// Magnitude bounded away from zero; sign random.
    AwayFromZero,
    Positive,
}

fn sample(rng: &mut ChaCha8Rng, shape: &[usize], s: Sampler) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| match s {
            Sampler::Uniform => rng.random_range(-1.0..1.0),
            Sampler::AwayFromZero => {
                let m = rng.random_range(0.3..1.0);
                if rng.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            }
            Sampler::Positive => rng.random_range(0.5..1.5),
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Sum of `y ⊙ r` for a deterministic pseudo-random `r`.
fn project(t: &mut Tape, y: Var) -> Result<Var> {
    let n = t.value(y).len();
    let r: Vec<f64> = (0..n).map(|i| ((i as f64 * 0.7548776662).fract() - 0.4) * 1.3).collect();
    let shape = t.shape(y).to_vec();
    let rv = t.constant(Tensor::from_parts(shape, r));
    let p = t.mul(y, rv)?;
    Ok(t.sum(p))
}

fn cases() -> Vec<Case> {
    use Sampler::*;
    let c = |name, inputs: Vec<(Vec<usize>, Sampler)>, build: Build| Case { name, inputs, build };
    vec![
        c("add", vec![(vec![3, 4], Uniform), (vec![3, 4], Uniform)], |t, v| {
            let y = t.add(v[0], v[1])?;
            project(t, y)
        }),
        c("sub", vec![(vec![3, 4], Uniform), (vec![3, 4], Uniform)], |t, v| {
            let y = t.sub(v[0], v[1])?;
            project(t, y)
        }),
        c("mul", vec![(vec![3, 4], Uniform), (vec![3, 4], Uniform)], |t, v| {
            let y = t.mul(v[0], v[1])?;
            project(t, y)
        }),
        c("div", vec![(vec![3, 4], Uniform), (vec![3, 4], Positive)], |t, v| {
            let y = t.div(v[0], v[1])?;
            project(t, y)
        }),
        c("scale+add_scalar", vec![(vec![5], Uniform)], |t, v| {
            let y = t.scale(v[0], -1.7);
            let y = t.add_scalar(y, 0.3);
            project(t, y)
        }),
        c("mul_const", vec![(vec![6], Uniform)], |t, v| {
            let y = t.mul_const(v[0], vec![1.0, 0.0, 2.0, -1.0, 0.5, 0.0])?;
            project(t, y)
        }),
        c("mul_scalar", vec![(vec![2, 3], Uniform), (vec![1], Uniform)], |t, v| {
            let y = t.mul_scalar(v[0], v[1])?;
            project(t, y)
        }),
        c("add_bcast", vec![(vec![2, 3, 2], Uniform), (vec![3], Uniform)], |t, v| {
            let y = t.add_bcast(v[0], v[1], 2)?;
            project(t, y)
        }),
        c("mul_bcast", vec![(vec![2, 3, 2], Uniform), (vec![3], Uniform)], |t, v| {
            let y = t.mul_bcast(v[0], v[1], 2)?;
            project(t, y)
        }),
        c("relu", vec![(vec![8], AwayFromZero)], |t, v| {
            let y = t.relu(v[0]);
            project(t, y)
        }),
        c("sigmoid", vec![(vec![6], Uniform)], |t, v| {
            let y = t.sigmoid(v[0]);
            project(t, y)
        }),
        c("sqrt", vec![(vec![6], Positive)], |t, v| {
            let y = t.sqrt(v[0]);
            project(t, y)
        }),
        c("mean", vec![(vec![2, 5], Uniform)], |t, v| {
            let y = t.mul(v[0], v[0])?;
            Ok(t.mean(y))
        }),
        c("sum_axis0", vec![(vec![4, 3], Uniform)], |t, v| {
            let y = t.sum_axis0(v[0])?;
            project(t, y)
        }),
        c("reshape", vec![(vec![2, 6], Uniform)], |t, v| {
            let y = t.reshape(v[0], &[3, 4])?;
            project(t, y)
        }),
        c("matmul", vec![(vec![3, 4], Uniform), (vec![4, 2], Uniform)], |t, v| {
            let y = t.matmul(v[0], v[1], false)?;
            project(t, y)
        }),
        c("matmul_nt", vec![(vec![3, 4], Uniform), (vec![5, 4], Uniform)], |t, v| {
            let y = t.matmul(v[0], v[1], true)?;
            project(t, y)
        }),
        c("softmax", vec![(vec![3, 5], Uniform)], |t, v| {
            let y = t.softmax(v[0])?;
            project(t, y)
        }),
        c("conv2d_stride1", vec![(vec![5, 4, 2], Uniform), (vec![3, 3, 2, 3], Uniform)], |t, v| {
            let y = t.conv2d(v[0], v[1], 1, 1)?;
            project(t, y)
        }),
        c("conv2d_stride2", vec![(vec![6, 6, 2], Uniform), (vec![3, 3, 2, 2], Uniform)], |t, v| {
            let y = t.conv2d(v[0], v[1], 2, 1)?;
            project(t, y)
        }),
        c("conv_transpose2d", vec![(vec![3, 3, 2], Uniform), (vec![3, 3, 3, 2], Uniform)], |t, v| {
            let y = t.conv_transpose2d(v[0], v[1], 2, 1)?;
            project(t, y)
        }),
        c("rfft2_even", vec![(vec![4, 4, 2], Uniform)], |t, v| {
            let y = t.rfft2(v[0])?;
            project(t, y)
        }),
        c("rfft2_odd", vec![(vec![3, 5, 1], Uniform)], |t, v| {
            let y = t.rfft2(v[0])?;
            project(t, y)
        }),
        c("irfft2_even", vec![(vec![4, 3, 2, 2], Uniform)], |t, v| {
            let y = t.irfft2(v[0], 4)?;
            project(t, y)
        }),
        c("irfft2_odd", vec![(vec![3, 3, 1, 2], Uniform)], |t, v| {
            let y = t.irfft2(v[0], 5)?;
            project(t, y)
        }),
        c("cmul", vec![(vec![3, 2], Uniform), (vec![3, 2], Uniform)], |t, v| {
            let y = t.cmul(v[0], v[1])?;
            project(t, y)
        }),
        c("cmul_conj", vec![(vec![3, 2], Uniform), (vec![3, 2], Uniform)], |t, v| {
            let y = t.cmul_conj(v[0], v[1])?;
            project(t, y)
        }),
        c("cmul_real", vec![(vec![4, 2], Uniform), (vec![4], Uniform)], |t, v| {
            let y = t.cmul_real(v[0], v[1])?;
            project(t, y)
        }),
        c("cinner_re", vec![(vec![4, 2], Uniform), (vec![4, 2], Uniform)], |t, v| {
            let y = t.cinner_re(v[0], v[1])?;
            project(t, y)
        }),
        c("cabs", vec![(vec![5, 2], AwayFromZero)], |t, v| {
            let y = t.cabs(v[0])?;
            project(t, y)
        }),
        c("carg", vec![(vec![5, 2], Positive)], |t, v| {
            // Positive real parts keep every sample off the branch cut.
            let y = t.carg(v[0])?;
            project(t, y)
        }),
        c("cexp_i", vec![(vec![5], Uniform)], |t, v| {
            let y = t.cexp_i(v[0]);
            project(t, y)
        }),
        c("cnormalize", vec![(vec![5, 2], AwayFromZero)], |t, v| {
            let y = t.cnormalize(v[0], 1e-12)?;
            project(t, y)
        }),
        c("cnormalize_or", vec![(vec![5, 2], AwayFromZero), (vec![5, 2], Uniform)], |t, v| {
            // A threshold of 0.6 routes some entries to the fallback.
            let y = t.cnormalize_or(v[0], v[1], 0.6)?;
            project(t, y)
        }),
        c("block_cmatmul", vec![(vec![3, 4, 2], Uniform), (vec![2, 3, 2, 2], Uniform)], |t, v| {
            let y = t.block_cmatmul(v[0], v[1])?;
            project(t, y)
        }),
        c("softmax_dft_chain", vec![(vec![4, 4, 1], Uniform)], |t, v| {
            let z = t.rfft2(v[0])?;
            let a = t.cabs(z)?;
            let s = t.reshape(a, &[4, 3])?;
            let p = t.softmax(s)?;
            let q = t.mul(p, s)?;
            project(t, q)
        }),
    ]
}

/// Run the finite-difference check on every primitive.
pub fn primitive_gradient_suite(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for case in cases() {
        let mut theta = ParamSet::new();
        for (i, (shape, sampler)) in case.inputs.iter().enumerate() {
            theta.insert(format!("x{i}"), sample(&mut rng, shape, *sampler))?;
        }
        let report = grad_check(case.build, &theta, FD_STEP, FD_TOL)?;
        out.push((case.name, report));
    }
    Ok(out)
}
