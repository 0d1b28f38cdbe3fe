//! Central finite-difference checking of every differentiable operation.
//!
//! All checks run at `f64`. Each op is wrapped into a scalar objective
//! `sum(out * R)` with a fixed random projection `R`, so that gradients that
//! would vanish under a plain sum (normalization, softmax) are still probed.
//! Inputs are drawn away from kinks (relu at zero, max-pool ties).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Names of every registered differentiable op, in report order.
pub const OPS: &[&str] = &[
    "conv2d",
    "maxpool2",
    "batchnorm_train",
    "batchnorm_eval",
    "relu",
    "sigmoid",
    "linear",
    "global_avg_pool",
    "spatial_pyramid_pool",
    "channel_scale",
    "broadcast_mul",
    "softmax_cross_entropy",
    "index_select",
    "mean_groups",
    "concat_channels",
    "reshape_add_scale",
];

/// Finite-difference step relative to the magnitude of the probed value.
pub const STEP: f64 = 1e-3;

/// Maximum number of coordinates probed per input tensor.
const MAX_PROBES: usize = 48;

#[derive(Clone, Debug)]
pub struct OpReport {
    pub op: &'static str,
    pub instances: usize,
    pub probes: usize,
    pub worst_rel_err: f64,
}

impl OpReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.worst_rel_err < tolerance
    }
}

/// `|a - n| / max(1, |a|, |n|)`: relative for large gradients, absolute for
/// small ones.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Scalar function of the input variables recorded on a tape.
pub type Objective<'a> = dyn for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>> + 'a;

fn eval(f: &Objective<'_>, inputs: &[Tensor<f64>]) -> Result<f64> {
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    Ok(f(&tape, &vars)?.scalar())
}

/// Worst relative error between reverse-mode and central-difference
/// gradients of `f` over `inputs`, probing a random subset of coordinates.
/// Inputs listed in `frozen` are treated as constants.
pub fn check_gradients(
    f: &Objective<'_>,
    inputs: &[Tensor<f64>],
    frozen: &[usize],
    rng: &mut impl Rng,
) -> Result<(f64, usize)> {
    let tape = Tape::new();
    let vars: Vec<_> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if frozen.contains(&i) {
                tape.constant(t.clone())
            } else {
                tape.variable(t)
            }
        })
        .collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut worst: f64 = 0.0;
    let mut probes = 0;
    for (i, input) in inputs.iter().enumerate() {
        if frozen.contains(&i) {
            continue;
        }
        let analytic = grads.wrt(vars[i]);
        let mut coords: Vec<usize> = (0..input.numel()).collect();
        coords.shuffle(rng);
        coords.truncate(MAX_PROBES);
        for c in coords {
            let x = input.data()[c];
            let h = STEP * x.abs().max(1.0);
            let mut shifted = inputs.to_vec();
            shifted[i].data_mut()[c] = x + h;
            let up = eval(f, &shifted)?;
            shifted[i].data_mut()[c] = x - h;
            let down = eval(f, &shifted)?;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(analytic[c], numeric));
            probes += 1;
        }
    }
    Ok((worst, probes))
}

fn normal(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let dist = rand_distr::StandardNormal;
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(dist))
}

/// Values bounded away from zero, for ops with a kink at the origin.
fn away_from_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.05..1.5);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// A shuffled ladder of distinct values spaced 0.05 apart: no ties and
/// no argmax flips under a 1e-3 perturbation.
fn distinct(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * 0.05).collect();
    vals.shuffle(rng);
    Tensor::new(shape, vals).expect("valid shape")
}

/// `sum(out * proj)`, the scalar objective used for every op.
fn project<'t>(out: Var<'t, f64>, proj: &Tensor<f64>) -> Result<Var<'t, f64>> {
    let tape = out.tape();
    let n = out.numel();
    let w = tape.constant(proj.reshaped(&[1, n])?);
    let zero = tape.constant(Tensor::zeros(&[1]));
    out.reshape(&[1, n])?.linear(w, zero)?.reshape(&[1])
}

/// Inputs, indices of inputs held fixed, and the scalar objective.
type Instance = (Vec<Tensor<f64>>, Vec<usize>, Box<Objective<'static>>);

fn instance(op: &str, rng: &mut ChaCha8Rng) -> Result<Instance> {
    let b = rng.gen_range(1..=2);
    let c = rng.gen_range(1..=3);
    let h = rng.gen_range(3..=6);
    let w = rng.gen_range(3..=6);
    let proj_for = |rng: &mut ChaCha8Rng, n: usize| normal(rng, &[n]);

    Ok(match op {
        "conv2d" => {
            let o = rng.gen_range(1..=3);
            let x = normal(rng, &[b, c, h, w]);
            let k = normal(rng, &[o, c, 3, 3]);
            let bias = normal(rng, &[o]);
            let p = proj_for(rng, b * o * h * w);
            (
                vec![x, k, bias],
                vec![],
                Box::new(move |_t, v| project(v[0].conv2d(v[1], v[2])?, &p)),
            )
        }
        "maxpool2" => {
            let x = distinct(rng, &[b, c, h + 1, w + 1]);
            let p = proj_for(rng, b * c * h.div_ceil(2) * w.div_ceil(2));
            (vec![x], vec![], Box::new(move |_t, v| project(v[0].maxpool2()?, &p)))
        }
        "batchnorm_train" => {
            let x = normal(rng, &[b + 1, c, h, w]);
            let s = normal(rng, &[c]);
            let sh = normal(rng, &[c]);
            let p = proj_for(rng, (b + 1) * c * h * w);
            (
                vec![x, s, sh],
                vec![],
                Box::new(move |_t, v| project(v[0].batch_norm_train(v[1], v[2], 1e-5)?.0, &p)),
            )
        }
        "batchnorm_eval" => {
            let x = normal(rng, &[b, c, h, w]);
            let s = normal(rng, &[c]);
            let sh = normal(rng, &[c]);
            let mean: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let var: Vec<f64> = (0..c).map(|_| rng.gen_range(0.5..2.0)).collect();
            let p = proj_for(rng, b * c * h * w);
            (
                vec![x, s, sh],
                vec![],
                Box::new(move |_t, v| project(v[0].batch_norm_eval(v[1], v[2], &mean, &var, 1e-5)?, &p)),
            )
        }
        "relu" => {
            let x = away_from_zero(rng, &[b, c, h]);
            let p = proj_for(rng, b * c * h);
            (vec![x], vec![], Box::new(move |_t, v| project(v[0].relu(), &p)))
        }
        "sigmoid" => {
            let x = normal(rng, &[b, c, h]);
            let p = proj_for(rng, b * c * h);
            (vec![x], vec![], Box::new(move |_t, v| project(v[0].sigmoid(), &p)))
        }
        "linear" => {
            let (di, dout) = (rng.gen_range(1..=6), rng.gen_range(1..=5));
            let x = normal(rng, &[b + 1, di]);
            let wt = normal(rng, &[dout, di]);
            let bias = normal(rng, &[dout]);
            let p = proj_for(rng, (b + 1) * dout);
            (
                vec![x, wt, bias],
                vec![],
                Box::new(move |_t, v| project(v[0].linear(v[1], v[2])?, &p)),
            )
        }
        "global_avg_pool" => {
            let x = normal(rng, &[b, c, h, w]);
            let p = proj_for(rng, b * c);
            (
                vec![x],
                vec![],
                Box::new(move |_t, v| project(v[0].global_avg_pool()?, &p)),
            )
        }
        "spatial_pyramid_pool" => {
            let x = distinct(rng, &[b, c, h, w]);
            let levels = vec![1, 2, 3];
            let p = proj_for(rng, b * c * 14);
            (
                vec![x],
                vec![],
                Box::new(move |_t, v| project(v[0].spatial_pyramid_pool(&levels)?, &p)),
            )
        }
        "channel_scale" => {
            let x = normal(rng, &[b, c, h, w]);
            let wt = normal(rng, &[b, c]);
            let p = proj_for(rng, b * c * h * w);
            (
                vec![x, wt],
                vec![],
                Box::new(move |_t, v| project(v[0].channel_scale(v[1])?, &p)),
            )
        }
        "broadcast_mul" => {
            let x = normal(rng, &[b, c, h, w]);
            let m = normal(rng, &[b, 1, h, w]);
            let p = proj_for(rng, b * c * h * w);
            (
                vec![x, m],
                vec![],
                Box::new(move |_t, v| project(v[0].broadcast_mul(v[1])?, &p)),
            )
        }
        "softmax_cross_entropy" => {
            let (rows, k) = (rng.gen_range(1..=4), rng.gen_range(2..=6));
            let x = normal(rng, &[rows, k]);
            let targets: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..k)).collect();
            (
                vec![x],
                vec![],
                Box::new(move |_t, v| v[0].softmax_cross_entropy(&targets)),
            )
        }
        "index_select" => {
            let x = normal(rng, &[h, c]);
            let idx: Vec<usize> = (0..5).map(|_| rng.gen_range(0..h)).collect();
            let p = proj_for(rng, 5 * c);
            (
                vec![x],
                vec![],
                Box::new(move |_t, v| project(v[0].index_select(&idx)?, &p)),
            )
        }
        "mean_groups" => {
            let x = normal(rng, &[h, c]);
            let groups: Vec<Vec<usize>> = (0..3)
                .map(|_| (0..rng.gen_range(1..=3)).map(|_| rng.gen_range(0..h)).collect())
                .collect();
            let p = proj_for(rng, 3 * c);
            (
                vec![x],
                vec![],
                Box::new(move |_t, v| project(v[0].mean_groups(&groups)?, &p)),
            )
        }
        "concat_channels" => {
            let x = normal(rng, &[b, c, h, w]);
            let y = normal(rng, &[b, c + 1, h, w]);
            let p = proj_for(rng, b * (2 * c + 1) * h * w);
            (
                vec![x, y],
                vec![],
                Box::new(move |_t, v| project(v[0].concat_channels(v[1])?, &p)),
            )
        }
        "reshape_add_scale" => {
            let x = normal(rng, &[b, c * h]);
            let y = normal(rng, &[b * c, h]);
            let k: f64 = rng.gen_range(-2.0..2.0);
            (
                vec![x, y],
                vec![],
                Box::new(move |_t, v| {
                    let s = v[0].reshape(&[b * c, h])?.add(v[1])?.scale(k);
                    Ok(s.add(s)?.mean())
                }),
            )
        }
        other => return Err(Error::Contract(format!("unknown op '{other}'"))),
    })
}

/// Runs `instances` random checks of one op.
pub fn check_op(op: &str, seed: u64, instances: usize) -> Result<OpReport> {
    let name = OPS
        .iter()
        .copied()
        .find(|&o| o == op)
        .ok_or_else(|| Error::Contract(format!("unknown op '{op}'")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fxhash(name));
    let mut worst: f64 = 0.0;
    let mut probes = 0;
    for _ in 0..instances {
        let (inputs, frozen, f) = instance(name, &mut rng)?;
        let (err, n) = check_gradients(f.as_ref(), &inputs, &frozen, &mut rng)?;
        worst = worst.max(err);
        probes += n;
    }
    Ok(OpReport {
        op: name,
        instances,
        probes,
        worst_rel_err: worst,
    })
}

fn fxhash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    })
}
