//! Central finite-difference gradient checking.
//!
//! Only forward evaluations are used to form the numerical estimate, so the
//! check is independent of the backward implementation it validates.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{BatchNormConfig, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub probes: usize,
}

/// Denominator floor so exactly-zero gradients do not divide by zero.
const REL_FLOOR: f64 = 1e-6;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compare `backward` against central differences for every input of `f`.
///
/// Non-scalar outputs are reduced with a fixed random projection. At most
/// `max_probes` elements per input are perturbed (all, if fewer).
pub fn check_gradients<F>(
    inputs: &[Tensor<f64>],
    f: F,
    eps: f64,
    max_probes: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut projection: Option<Tensor<f64>> = None;

    let mut eval = |values: &[Tensor<f64>], track: bool| -> Result<(Tape<f64>, Var, Vec<Var>)> {
        let mut tape = Tape::new();
        let vars = values
            .iter()
            .map(|v| {
                if track {
                    tape.variable(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        let loss = if tape.value(out).len() == 1 {
            out
        } else {
            let shape = tape.shape(out).to_vec();
            let proj = projection
                .get_or_insert_with(|| Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0)));
            tape.weighted_sum(out, proj)?
        };
        Ok((tape, loss, vars))
    };

    let (tape, loss, vars) = eval(inputs, true)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let mut probe_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let mut worst = 0.0f64;
    let mut probes = 0;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let mut idx: Vec<usize> = (0..input.len()).collect();
        if idx.len() > max_probes {
            idx.shuffle(&mut probe_rng);
            idx.truncate(max_probes);
        }
        for &k in &idx {
            let orig = input.data()[k];
            work[i].data_mut()[k] = orig + eps;
            let (t, l, _) = eval(&work, false)?;
            let plus = t.value(l).item();
            work[i].data_mut()[k] = orig - eps;
            let (t, l, _) = eval(&work, false)?;
            let minus = t.value(l).item();
            work[i].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(rel_error(analytic[i][k], numeric));
            probes += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        probes,
    })
}

/// Every differentiable op exercised by [`check_op`].
pub const DIFFERENTIABLE_OPS: &[&str] = &[
    "conv2d",
    "conv_transpose2d",
    "maxpool2d",
    "relu",
    "sigmoid",
    "batchnorm2d_train",
    "batchnorm2d_eval",
    "linear",
    "add",
    "concat_channels",
    "upsample_nearest",
    "global_avg_pool",
    "weighted_sum",
    "sigmoid_cross_entropy",
    "l2_pixelwise",
    "l2_z",
];

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero, so ReLU kinks are never straddled.
fn off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn binary(shape: &[usize], p: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| if rng.random_bool(p) { 1.0 } else { 0.0 })
}

/// Random mask with at least one active entry.
fn mask(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut m: Vec<f64> = (0..len).map(|_| if rng.random_bool(0.7) { 1.0 } else { 0.0 }).collect();
    let k = rng.random_range(0..len);
    m[k] = 1.0;
    m
}

/// Run one randomized gradient check of `op` (one of [`DIFFERENTIABLE_OPS`]).
pub fn check_op(op: &str, seed: u64, eps: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    const PROBES: usize = 48;
    match op {
        "conv2d" => {
            let b = r.random_range(1..=2);
            let cin = r.random_range(1..=3);
            let cout = r.random_range(1..=3);
            let k = r.random_range(1..=3);
            let s = r.random_range(1..=2);
            let p = r.random_range(0..k);
            let h = r.random_range(k.max(3)..=7);
            let w = r.random_range(k.max(3)..=7);
            let inputs = [
                uniform(&[b, cin, h, w], -1.0, 1.0, r),
                uniform(&[cout, cin, k, k], -1.0, 1.0, r),
                uniform(&[cout], -1.0, 1.0, r),
            ];
            check_gradients(
                &inputs,
                |t, v| t.conv2d(v[0], v[1], Some(v[2]), (s, s), (p, p)),
                eps,
                PROBES,
                seed,
            )
        }
        "conv_transpose2d" => {
            let b = r.random_range(1..=2);
            let cin = r.random_range(1..=3);
            let cout = r.random_range(1..=3);
            let k = r.random_range(2..=4);
            let s = r.random_range(1..=2);
            let p = r.random_range(0..k / 2 + 1);
            let h = r.random_range(2..=5);
            let w = r.random_range(2..=5);
            let inputs = [
                uniform(&[b, cin, h, w], -1.0, 1.0, r),
                uniform(&[cin, cout, k, k], -1.0, 1.0, r),
                uniform(&[cout], -1.0, 1.0, r),
            ];
            check_gradients(
                &inputs,
                |t, v| t.conv_transpose2d(v[0], v[1], Some(v[2]), (s, s), (p, p)),
                eps,
                PROBES,
                seed,
            )
        }
        "maxpool2d" => {
            let (b, c) = (r.random_range(1..=2), r.random_range(1..=3));
            let k = r.random_range(2..=3);
            let s = r.random_range(1..=2);
            let p = r.random_range(0..=1);
            let h = r.random_range(k..=7);
            let w = r.random_range(k..=7);
            // Distinct values 0.01 apart keep every window's maximum unique.
            let n = b * c * h * w;
            let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - 0.5).collect();
            vals.shuffle(r);
            let x = Tensor::new(vec![b, c, h, w], vals)?;
            check_gradients(&[x], |t, v| t.maxpool2d(v[0], (k, k), (s, s), (p, p)), eps, PROBES, seed)
        }
        "relu" => {
            let x = off_zero(&[2, 3, 4, 4], r);
            check_gradients(&[x], |t, v| t.relu(v[0]), eps, PROBES, seed)
        }
        "sigmoid" => {
            let x = uniform(&[2, 2, 3, 3], -4.0, 4.0, r);
            check_gradients(&[x], |t, v| t.sigmoid(v[0]), eps, PROBES, seed)
        }
        "batchnorm2d_train" | "batchnorm2d_eval" => {
            let training = op == "batchnorm2d_train";
            let (b, c) = (r.random_range(2..=3), r.random_range(1..=3));
            let (h, w) = (r.random_range(2..=4), r.random_range(2..=4));
            let inputs = [
                uniform(&[b, c, h, w], -2.0, 2.0, r),
                uniform(&[c], 0.5, 1.5, r),
                uniform(&[c], -0.5, 0.5, r),
            ];
            let rm: Vec<f64> = (0..c).map(|_| r.random_range(-0.5..0.5)).collect();
            let rv: Vec<f64> = (0..c).map(|_| r.random_range(0.5..2.0)).collect();
            check_gradients(
                &inputs,
                |t, v| {
                    let (mut m, mut s) = (rm.clone(), rv.clone());
                    t.batch_norm2d(v[0], v[1], v[2], &mut m, &mut s, BatchNormConfig::default(), training)
                },
                eps,
                PROBES,
                seed,
            )
        }
        "linear" => {
            let (b, f, o) = (r.random_range(1..=4), r.random_range(1..=6), r.random_range(1..=5));
            let inputs = [
                uniform(&[b, f], -1.0, 1.0, r),
                uniform(&[o, f], -1.0, 1.0, r),
                uniform(&[o], -1.0, 1.0, r),
            ];
            check_gradients(&inputs, |t, v| t.linear(v[0], v[1], Some(v[2])), eps, PROBES, seed)
        }
        "add" => {
            let shape = [r.random_range(1..=3), 2, 3, r.random_range(1..=4)];
            let inputs = [uniform(&shape, -1.0, 1.0, r), uniform(&shape, -1.0, 1.0, r)];
            // Fan-out: `a` is used twice, so its gradient must be summed.
            check_gradients(
                &inputs,
                |t, v| {
                    let s = t.add(v[0], v[1])?;
                    t.add(s, v[0])
                },
                eps,
                PROBES,
                seed,
            )
        }
        "concat_channels" => {
            let (b, h, w) = (r.random_range(1..=2), r.random_range(1..=4), r.random_range(1..=4));
            let parts = r.random_range(2..=3);
            let inputs: Vec<Tensor<f64>> = (0..parts)
                .map(|_| {
                    let c = r.random_range(1..=3);
                    uniform(&[b, c, h, w], -1.0, 1.0, r)
                })
                .collect();
            check_gradients(&inputs, |t, v| t.concat_channels(v), eps, PROBES, seed)
        }
        "upsample_nearest" => {
            let f = r.random_range(1..=3);
            let x = uniform(&[r.random_range(1..=2), 2, 3, 2], -1.0, 1.0, r);
            check_gradients(&[x], |t, v| t.upsample_nearest(v[0], f), eps, PROBES, seed)
        }
        "global_avg_pool" => {
            let x = uniform(&[r.random_range(1..=3), 3, r.random_range(1..=4), 3], -1.0, 1.0, r);
            check_gradients(&[x], |t, v| t.global_avg_pool(v[0]), eps, PROBES, seed)
        }
        "weighted_sum" => {
            let x = uniform(&[2, 3], -1.0, 1.0, r);
            let w = uniform(&[2, 3], -1.0, 1.0, r);
            check_gradients(&[x], |t, v| t.weighted_sum(v[0], &w), eps, PROBES, seed)
        }
        "sigmoid_cross_entropy" => {
            let shape = [r.random_range(1..=2), r.random_range(1..=3), 3, 4];
            let logits = uniform(&shape, -5.0, 5.0, r);
            let targets = binary(&shape, 0.3, r);
            let m = mask(shape[0] * shape[1], r);
            check_gradients(
                &[logits],
                |t, v| t.sigmoid_cross_entropy(v[0], &targets, Some(&m)),
                eps,
                PROBES,
                seed,
            )
        }
        "l2_pixelwise" => {
            let shape = [r.random_range(1..=2), r.random_range(1..=3), 3, 3];
            let pred = uniform(&shape, -1.0, 1.0, r);
            let target = uniform(&shape, -1.0, 1.0, r);
            let m = mask(shape[0] * shape[1], r);
            check_gradients(
                &[pred],
                |t, v| t.l2_pixelwise(v[0], &target, Some(&m)),
                eps,
                PROBES,
                seed,
            )
        }
        "l2_z" => {
            let shape = [r.random_range(1..=4), r.random_range(1..=6)];
            let pred = uniform(&shape, -10.0, 10.0, r);
            let target = uniform(&shape, -10.0, 10.0, r);
            let m = mask(shape[0] * shape[1], r);
            check_gradients(&[pred], |t, v| t.l2_z(v[0], &target, Some(&m)), eps, PROBES, seed)
        }
        other => Err(crate::error::TensorError::UnknownName(other.to_string())),
    }
}

/// Worst-case result of `cases` randomized checks of one op.
#[derive(Debug, Clone)]
pub struct OpSummary {
    pub op: &'static str,
    pub cases: usize,
    pub max_rel_error: f64,
}

pub fn run_suite(cases: usize, eps: f64) -> Result<Vec<OpSummary>> {
    DIFFERENTIABLE_OPS
        .iter()
        .map(|&op| {
            let mut worst = 0.0f64;
            for seed in 0..cases as u64 {
                worst = worst.max(check_op(op, seed * 7919 + 17, eps)?.max_rel_error);
            }
            Ok(OpSummary {
                op,
                cases,
                max_rel_error: worst,
            })
        })
        .collect()
}
