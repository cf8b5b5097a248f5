use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::harness::{check_gradients, signed_uniform, Coverage, GradReport};
use crate::attention::{centered_covariance, patch_merge, patch_split, Awca, Psnl};
use crate::autodiff::{Tape, Var};
use crate::data::{default_css, BANDS};
use crate::error::{Error, Result};
use crate::loss::{combined_loss, css_loss, mrae, LossConfig, DEFAULT_FLOOR};
use crate::model::{Awan, AwanConfig, Drab};
use crate::params::{Bound, ParamSet};
use crate::tensor::Tensor;

/// Tolerance for single operations and layers.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Tolerance for the end-to-end training loss of the tiny network.
pub const MODEL_TOLERANCE: f64 = 1e-3;
/// Parameters probed in the end-to-end check.
pub const MODEL_SAMPLES: usize = 50;

/// Every target accepted by [`gradcheck`], besides `all`.
pub const TARGETS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "div",
    "abs",
    "neg",
    "scale",
    "sum",
    "mean",
    "matmul",
    "batch_matmul",
    "reshape",
    "permute",
    "slice",
    "concat",
    "conv2d_k1",
    "conv2d_k3",
    "conv2d_k5",
    "relu",
    "prelu",
    "softmax",
    "sigmoid",
    "scale_channels",
    "adaptive_weighted_pooling",
    "awca_forward",
    "centered_covariance",
    "psnl_attend",
    "psnl_module",
    "patch_split_merge",
    "drab_forward",
    "mrae",
    "css_loss",
    "combined_loss",
    "full_model",
];

type OpFn<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;
type LayerFn<'a> = dyn Fn(&mut Tape<f64>, &Bound, &[Var]) -> Result<Var> + 'a;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn op(target: &str, seed: u64, shapes: &[&[usize]], f: &OpFn<'_>) -> Result<GradReport> {
    let mut r = rng(seed);
    let inputs: Vec<_> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| (format!("input{i}"), signed_uniform(s, &mut r)))
        .collect();
    Ok(GradReport {
        target: target.to_string(),
        tolerance: OP_TOLERANCE,
        groups: check_gradients(&inputs, f, Coverage::All, seed)?,
        invariant: Vec::new(),
    })
}

/// Parameters only ever added to every softmax logit alike.
fn shift_invariant(name: &str) -> bool {
    name.ends_with(".pool.bias")
}

/// Checks gradients with respect to both the inputs and every parameter.
/// Shift-invariant parameters are held fixed during probing and must
/// instead have a vanishing analytic gradient.
fn layer(
    target: &str,
    seed: u64,
    params: &ParamSet<f64>,
    inputs: Vec<(String, Tensor<f64>)>,
    coverage: Coverage,
    tolerance: f64,
    f: &LayerFn<'_>,
) -> Result<GradReport> {
    let n_inputs = inputs.len();
    let held: Vec<bool> = params.iter().map(|(name, _)| shift_invariant(name)).collect();
    let mut all = inputs;
    all.extend(
        params
            .iter()
            .zip(&held)
            .filter(|(_, &h)| !h)
            .map(|((name, t), _)| (name.to_string(), t.clone())),
    );
    let wrapped = |tape: &mut Tape<f64>, vars: &[Var]| {
        let mut probed = vars[n_inputs..].iter();
        let bound_vars = params
            .tensors()
            .iter()
            .zip(&held)
            .map(|(t, &h)| if h { tape.constant(t.clone()) } else { *probed.next().expect("probed") })
            .collect();
        f(tape, &Bound::from_vars(bound_vars), &vars[..n_inputs])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = all[..n_inputs].iter().map(|(_, t)| tape.constant(t.clone())).collect();
    let bound = params.bind(&mut tape, true);
    let out = f(&mut tape, &bound, &vars)?;
    let shape = tape.value(out).shape().to_vec();
    let weights = tape.constant(signed_uniform(&shape, &mut rng(seed ^ 0x1417)));
    let weighted = tape.mul(out, weights)?;
    let root = tape.sum_all(weighted)?;
    let grads = bound.gradients(params, &tape.backward(root)?);
    let invariant = params
        .iter()
        .zip(&held)
        .zip(&grads)
        .filter(|((_, &h), _)| h)
        .map(|(((name, _), _), g)| (name.to_string(), g.max_abs()))
        .collect();

    Ok(GradReport {
        target: target.to_string(),
        tolerance,
        groups: check_gradients(&all, &wrapped, coverage, seed)?,
        invariant,
    })
}

/// Replaces every parameter with values of magnitude 0.05–0.5.
fn jitter(params: &mut ParamSet<f64>, seed: u64) {
    let mut r = rng(seed ^ 0x5eed);
    for t in params.tensors_mut() {
        *t = signed_uniform(t.shape(), &mut r).scale(0.5);
    }
}

fn input(name: &str, shape: &[usize], seed: u64) -> (String, Tensor<f64>) {
    (name.to_string(), signed_uniform(shape, &mut rng(seed ^ 0x1a2b)))
}

fn reference_cube(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, 0.2, 1.0, &mut rng(seed ^ 0x9c7))
}

fn single(target: &str, seed: u64) -> Result<GradReport> {
    match target {
        "add" => op(target, seed, &[&[3, 4], &[3, 4]], &|t, x| t.add(x[0], x[1])),
        "sub" => op(target, seed, &[&[3, 4], &[3, 4]], &|t, x| t.sub(x[0], x[1])),
        "mul" => op(target, seed, &[&[3, 4], &[3, 4]], &|t, x| t.mul(x[0], x[1])),
        "div" => op(target, seed, &[&[3, 4], &[3, 4]], &|t, x| t.div(x[0], x[1])),
        "abs" => op(target, seed, &[&[3, 4]], &|t, x| t.abs(x[0])),
        "neg" => op(target, seed, &[&[3, 4]], &|t, x| t.neg(x[0])),
        "scale" => op(target, seed, &[&[3, 4]], &|t, x| t.scale(x[0], -1.7)),
        "sum" => op(target, seed, &[&[2, 3, 4]], &|t, x| t.sum(x[0], &[0, 2])),
        "mean" => op(target, seed, &[&[2, 3, 4]], &|t, x| t.mean(x[0], &[1])),
        "matmul" => op(target, seed, &[&[3, 4], &[4, 5]], &|t, x| t.matmul(x[0], x[1])),
        "batch_matmul" => op(target, seed, &[&[2, 3, 4], &[2, 4, 2]], &|t, x| t.batch_matmul(x[0], x[1])),
        "reshape" => op(target, seed, &[&[2, 6]], &|t, x| t.reshape(x[0], &[3, 4])),
        "permute" => op(target, seed, &[&[2, 3, 4]], &|t, x| t.permute(x[0], &[2, 0, 1])),
        "slice" => op(target, seed, &[&[2, 5, 3]], &|t, x| t.slice(x[0], 1, 1, 4)),
        "concat" => op(target, seed, &[&[2, 2, 3], &[2, 1, 3]], &|t, x| t.concat(&[x[0], x[1]], 1)),
        "conv2d_k1" => op(target, seed, &[&[2, 3, 4, 5], &[2, 3, 1, 1], &[2]], &|t, x| {
            t.conv2d(x[0], x[1], Some(x[2]))
        }),
        "conv2d_k3" => op(target, seed, &[&[2, 2, 4, 5], &[3, 2, 3, 3], &[3]], &|t, x| {
            t.conv2d(x[0], x[1], Some(x[2]))
        }),
        "conv2d_k5" => op(target, seed, &[&[1, 2, 4, 6], &[2, 2, 5, 5], &[2]], &|t, x| {
            t.conv2d(x[0], x[1], Some(x[2]))
        }),
        "relu" => op(target, seed, &[&[3, 4]], &|t, x| t.relu(x[0])),
        "prelu" => op(target, seed, &[&[2, 3, 2, 2], &[3]], &|t, x| t.prelu(x[0], x[1])),
        "softmax" => op(target, seed, &[&[2, 5, 3]], &|t, x| t.softmax(x[0], 1)),
        "sigmoid" => op(target, seed, &[&[3, 4]], &|t, x| t.sigmoid(x[0])),
        "scale_channels" => op(target, seed, &[&[2, 3, 2, 2], &[2, 3]], &|t, x| t.scale_channels(x[0], x[1])),
        "centered_covariance" => op(target, seed, &[&[2, 5, 3]], &|t, x| centered_covariance(t, x[0])),
        "patch_split_merge" => op(target, seed, &[&[1, 2, 5, 3]], &|t, x| {
            let q = patch_split(t, x[0])?;
            patch_merge(t, q)
        }),
        "adaptive_weighted_pooling" | "awca_forward" => {
            let mut params = ParamSet::new();
            let awca = Awca::new(&mut params, "awca", 4, 2, &mut rng(seed))?;
            jitter(&mut params, seed);
            let x = vec![input("input", &[2, 4, 3, 3], seed)];
            let pooled = target == "adaptive_weighted_pooling";
            layer(target, seed, &params, x, Coverage::All, OP_TOLERANCE, &|t, b, x| {
                if pooled {
                    awca.adaptive_weighted_pooling(t, b, x[0])
                } else {
                    awca.forward(t, b, x[0])
                }
            })
        }
        "psnl_attend" | "psnl_module" => {
            let mut params = ParamSet::new();
            let psnl = Psnl::new(&mut params, "psnl", 8, 2, &mut rng(seed))?;
            jitter(&mut params, seed);
            let attend = target == "psnl_attend";
            let shape: &[usize] = if attend { &[1, 8, 4, 4] } else { &[1, 8, 5, 4] };
            let x = vec![input("input", shape, seed)];
            layer(target, seed, &params, x, Coverage::All, OP_TOLERANCE, &|t, b, x| {
                if attend {
                    psnl.attend(t, b, x[0])
                } else {
                    psnl.forward(t, b, x[0])
                }
            })
        }
        "drab_forward" => {
            let mut params = ParamSet::new();
            let block = Drab::new(&mut params, "block", 4, 2, &mut rng(seed))?;
            jitter(&mut params, seed);
            let x = vec![
                input("features", &[1, 4, 4, 4], seed),
                input("residual", &[1, 4, 4, 4], seed + 1),
            ];
            layer(target, seed, &params, x, Coverage::All, OP_TOLERANCE, &|t, b, x| {
                let (f, r) = block.forward(t, b, x[0], x[1])?;
                let r = t.scale(r, 0.5)?;
                t.add(f, r)
            })
        }
        "mrae" | "css_loss" | "combined_loss" => {
            let gt = reference_cube(&[2, BANDS, 2, 3], seed);
            let phi = default_css().conv_weight::<f64>();
            let f: Box<OpFn> = match target {
                "mrae" => Box::new(move |t, x| {
                    let g = t.constant(gt.clone());
                    mrae(t, g, x[0], Some(DEFAULT_FLOOR))
                }),
                "css_loss" => Box::new(move |t, x| {
                    let g = t.constant(gt.clone());
                    css_loss(t, g, x[0], &phi)
                }),
                _ => Box::new(move |t, x| {
                    let g = t.constant(gt.clone());
                    Ok(combined_loss(t, g, x[0], Some(&phi), &LossConfig::default())?.total)
                }),
            };
            op(target, seed, &[&[2, BANDS, 2, 3]], &*f)
        }
        "full_model" => {
            let (model, params) = Awan::init::<f64>(AwanConfig::tiny(), &mut rng(seed))?;
            let rgb = Tensor::uniform([1, 3, 4, 4], 0.0, 1.0, &mut rng(seed ^ 0x4a));
            let gt = reference_cube(&[1, BANDS, 4, 4], seed);
            let phi = default_css().conv_weight::<f64>();
            layer(
                target,
                seed,
                &params,
                Vec::new(),
                Coverage::Sample(MODEL_SAMPLES),
                MODEL_TOLERANCE,
                &|t, b, _| {
                    let x = t.constant(rgb.clone());
                    let pred = model.forward(t, b, x)?;
                    let g = t.constant(gt.clone());
                    Ok(combined_loss(t, g, pred, Some(&phi), &LossConfig::default())?.total)
                },
            )
        }
        other => Err(Error::UnknownTarget(other.to_string())),
    }
}

/// Runs one named target, or every target for `all`.
pub fn gradcheck(target: &str, seed: u64) -> Result<Vec<GradReport>> {
    if target == "all" {
        TARGETS.iter().map(|t| single(t, seed)).collect()
    } else {
        Ok(vec![single(target, seed)?])
    }
}
