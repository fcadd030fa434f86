//! Central finite-difference checks of every differentiable op and of
//! the toy architectures end to end. Shared by the core gradient tests
//! and the acceptance target.

use msrt_core::encoder::{forward, Architecture};
use msrt_core::nn::Module;
use msrt_core::{Classifier, Graph, Model, ModelConfig, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-4;
/// Whole-model steps move thousands of ReLU inputs at once; at 1e-4 some
/// of them cross zero and the difference quotient straddles a kink.
pub const H_MODEL: f64 = 1e-6;
pub const CASES_PER_OP: usize = 20;
pub const OP_TOL: f64 = 1e-5;
pub const MODEL_TOL: f64 = 1e-4;

/// Error of one gradient entry: relative, or absolute when the analytic
/// value is below 1e-6 (reported as a pass/fail 0 / inf).
fn entry_error(analytic: f64, numeric: f64) -> f64 {
    if analytic.abs() < 1e-6 {
        if (analytic - numeric).abs() < 1e-7 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs())
    }
}

type Build<'a> = &'a dyn Fn(&mut Graph, &[Tensor]) -> Result<Tensor>;

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Values bounded away from zero, for ops with a kink there.
fn off_kink(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m: f64 = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

/// Scalar probe `sum(f(inputs) ⊙ r)` for a fixed random `r`.
fn probe(
    inputs: &[(Vec<usize>, Vec<f64>)],
    f: Build,
    r: &[f64],
    grads: bool,
) -> (f64, Vec<Vec<f64>>) {
    let mut g = Graph::new();
    let ts: Vec<Tensor> = inputs
        .iter()
        .map(|(s, v)| g.variable(s, v.clone()).unwrap())
        .collect();
    let out = f(&mut g, &ts).unwrap();
    let shape = g.shape(out).to_vec();
    let rt = g.constant(&shape, r.to_vec()).unwrap();
    let prod = g.mul(out, rt).unwrap();
    let loss = g.sum(prod).unwrap();
    let value = g.value(loss)[0];
    if !grads {
        return (value, Vec::new());
    }
    g.backward(loss).unwrap();
    let gs = ts.iter().map(|t| g.grad(*t).unwrap().to_vec()).collect();
    (value, gs)
}

/// Maximum entry error over every input element.
fn check(inputs: Vec<(Vec<usize>, Vec<f64>)>, f: Build, rng: &mut ChaCha8Rng) -> f64 {
    let out_len = {
        let mut g = Graph::inference();
        let ts: Vec<Tensor> = inputs
            .iter()
            .map(|(s, v)| g.constant(s, v.clone()).unwrap())
            .collect();
        let out = f(&mut g, &ts).unwrap();
        g.value(out).len()
    };
    let r = uniform(rng, out_len);
    let (_, analytic) = probe(&inputs, f, &r, true);
    let mut worst: f64 = 0.0;
    for i in 0..inputs.len() {
        for j in 0..inputs[i].1.len() {
            let mut plus = inputs.clone();
            plus[i].1[j] += H;
            let mut minus = inputs.clone();
            minus[i].1[j] -= H;
            let numeric =
                (probe(&plus, f, &r, false).0 - probe(&minus, f, &r, false).0) / (2.0 * H);
            worst = worst.max(entry_error(analytic[i][j], numeric));
        }
    }
    worst
}

/// Worst entry error over all random cases of one op.
fn run_op(seed: u64, mut case: impl FnMut(&mut ChaCha8Rng) -> f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..CASES_PER_OP)
        .map(|_| case(&mut rng))
        .fold(0.0, f64::max)
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn input(rng: &mut ChaCha8Rng, shape: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let n = shape.iter().product();
    (shape.to_vec(), uniform(rng, n))
}

/// Random `[r, c]` input with both sides in `lo..=hi`.
fn matrix(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> (Vec<usize>, Vec<f64>) {
    let shape = [dim(rng, lo, hi), dim(rng, lo, hi)];
    input(rng, &shape)
}

/// `(op name, worst entry error)` for every differentiable op and one
/// composite chain.
pub fn op_errors() -> Vec<(&'static str, f64)> {
    vec![
        (
            "matmul",
            run_op(1, |rng| {
                let (m, k, n) = (dim(rng, 1, 5), dim(rng, 1, 5), dim(rng, 1, 5));
                let ins = vec![input(rng, &[m, k]), input(rng, &[k, n])];
                check(ins, &|g, t| g.matmul(t[0], t[1]), rng)
            }),
        ),
        (
            "matmul_nt",
            run_op(2, |rng| {
                let (m, k, n) = (dim(rng, 1, 5), dim(rng, 1, 5), dim(rng, 1, 5));
                let ins = vec![input(rng, &[m, k]), input(rng, &[n, k])];
                check(ins, &|g, t| g.matmul_nt(t[0], t[1]), rng)
            }),
        ),
        (
            "transpose",
            run_op(3, |rng| {
                let ins = vec![matrix(rng, 1, 5)];
                check(ins, &|g, t| g.transpose(t[0]), rng)
            }),
        ),
        (
            "conv1d",
            run_op(4, |rng| {
                let (cin, cout, k) = (dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 4));
                let stride = dim(rng, 1, 2);
                let pad = dim(rng, 0, 2);
                let len = dim(rng, k.saturating_sub(2 * pad).max(1), 9);
                let ins = vec![
                    input(rng, &[cin, len]),
                    input(rng, &[cout, cin, k]),
                    input(rng, &[cout]),
                ];
                check(ins, &|g, t| g.conv1d(t[0], t[1], t[2], stride, pad), rng)
            }),
        ),
        (
            "add",
            run_op(5, |rng| {
                let s = [dim(rng, 1, 4), dim(rng, 1, 4)];
                check(
                    vec![input(rng, &s), input(rng, &s)],
                    &|g, t| g.add(t[0], t[1]),
                    rng,
                )
            }),
        ),
        (
            "mul",
            run_op(6, |rng| {
                let s = [dim(rng, 1, 4), dim(rng, 1, 4)];
                check(
                    vec![input(rng, &s), input(rng, &s)],
                    &|g, t| g.mul(t[0], t[1]),
                    rng,
                )
            }),
        ),
        (
            "scale",
            run_op(7, |rng| {
                let c: f64 = rng.random_range(-3.0..3.0);
                let n = dim(rng, 1, 6);
                check(vec![input(rng, &[n])], &move |g, t| g.scale(t[0], c), rng)
            }),
        ),
        (
            "relu",
            run_op(8, |rng| {
                let n = dim(rng, 1, 12);
                check(vec![(vec![n], off_kink(rng, n))], &|g, t| g.relu(t[0]), rng)
            }),
        ),
        (
            "add_row_bias",
            run_op(9, |rng| {
                let (r, d) = (dim(rng, 1, 5), dim(rng, 1, 5));
                check(
                    vec![input(rng, &[r, d]), input(rng, &[d])],
                    &|g, t| g.add_row_bias(t[0], t[1]),
                    rng,
                )
            }),
        ),
        (
            "sum",
            run_op(10, |rng| {
                check(vec![matrix(rng, 1, 4)], &|g, t| g.sum(t[0]), rng)
            }),
        ),
        (
            "mean",
            run_op(11, |rng| {
                check(vec![matrix(rng, 1, 4)], &|g, t| g.mean(t[0]), rng)
            }),
        ),
        (
            "mean_rows",
            run_op(12, |rng| {
                check(vec![matrix(rng, 1, 5)], &|g, t| g.mean_rows(t[0]), rng)
            }),
        ),
        (
            "softmax",
            run_op(13, |rng| {
                let rank = dim(rng, 1, 3);
                let shape: Vec<usize> = (0..rank).map(|_| dim(rng, 1, 4)).collect();
                let axis = dim(rng, 0, rank - 1);
                check(
                    vec![input(rng, &shape)],
                    &move |g, t| g.softmax(t[0], axis),
                    rng,
                )
            }),
        ),
        (
            "layer_norm",
            run_op(14, |rng| {
                let (r, d) = (dim(rng, 1, 4), dim(rng, 2, 6));
                let ins = vec![input(rng, &[r, d]), input(rng, &[d]), input(rng, &[d])];
                check(ins, &|g, t| g.layer_norm(t[0], t[1], t[2], 1e-5), rng)
            }),
        ),
        (
            "cross_entropy",
            run_op(15, |rng| {
                let (b, c) = (dim(rng, 1, 4), dim(rng, 2, 6));
                let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
                let mut ins = vec![input(rng, &[b, c])];
                ins[0].1.iter_mut().for_each(|x| *x *= 3.0);
                check(ins, &move |g, t| g.cross_entropy(t[0], &labels), rng)
            }),
        ),
        (
            "multi_head_attention",
            run_op(16, |rng| {
                let (t, heads, dh) = (dim(rng, 1, 6), dim(rng, 1, 3), dim(rng, 1, 4));
                let s = [t, heads * dh];
                let ins = vec![input(rng, &s), input(rng, &s), input(rng, &s)];
                check(
                    ins,
                    &move |g, x| g.multi_head_attention(x[0], x[1], x[2], heads),
                    rng,
                )
            }),
        ),
        (
            "upsample_nearest",
            run_op(17, |rng| {
                let (c, l) = (dim(rng, 1, 3), dim(rng, 1, 6));
                let target = dim(rng, l, 3 * l);
                check(
                    vec![input(rng, &[c, l])],
                    &move |g, t| g.upsample_nearest(t[0], target),
                    rng,
                )
            }),
        ),
        (
            "slice_cols",
            run_op(18, |rng| {
                let (r, c) = (dim(rng, 1, 4), dim(rng, 1, 6));
                let start = dim(rng, 0, c - 1);
                let width = dim(rng, 1, c - start);
                check(
                    vec![input(rng, &[r, c])],
                    &move |g, t| g.slice_cols(t[0], start, width),
                    rng,
                )
            }),
        ),
        (
            "slice_rows",
            run_op(19, |rng| {
                let (r, c) = (dim(rng, 1, 6), dim(rng, 1, 4));
                let start = dim(rng, 0, r - 1);
                let n = dim(rng, 1, r - start);
                check(
                    vec![input(rng, &[r, c])],
                    &move |g, t| g.slice_rows(t[0], start, n),
                    rng,
                )
            }),
        ),
        (
            "concat_cols",
            run_op(20, |rng| {
                let r = dim(rng, 1, 4);
                let (a, b) = (dim(rng, 1, 3), dim(rng, 1, 3));
                let ins = vec![input(rng, &[r, a]), input(rng, &[r, b])];
                check(ins, &|g, t| g.concat_cols(t), rng)
            }),
        ),
        (
            "concat_rows",
            run_op(21, |rng| {
                let c = dim(rng, 1, 4);
                let (a, b) = (dim(rng, 1, 3), dim(rng, 1, 3));
                let ins = vec![input(rng, &[a, c]), input(rng, &[b, c])];
                check(ins, &|g, t| g.concat_rows(t), rng)
            }),
        ),
        (
            "reshape",
            run_op(22, |rng| {
                let (a, b) = (dim(rng, 1, 4), dim(rng, 1, 4));
                check(
                    vec![input(rng, &[a, b])],
                    &move |g, t| g.reshape(t[0], &[b, a]),
                    rng,
                )
            }),
        ),
        (
            "conv-relu-norm-mean",
            run_op(23, |rng| {
                // Positive biases keep most ReLUs open so no normalized row is
                // near-constant; such rows have a curvature of order 1/sigma^3 and
                // the h = 1e-4 quotient is then limited by truncation, not by the
                // backward pass.
                let (cin, cout, len) = (dim(rng, 1, 3), dim(rng, 2, 4), dim(rng, 6, 10));
                let bias: Vec<f64> = (0..cout).map(|_| rng.random_range(0.5..1.5)).collect();
                let ins = vec![
                    input(rng, &[cin, len]),
                    input(rng, &[cout, cin, 3]),
                    (vec![cout], bias),
                    input(rng, &[len]),
                    input(rng, &[len]),
                ];
                check(
                    ins,
                    &|g, t| {
                        let y = g.conv1d(t[0], t[1], t[2], 1, 1)?;
                        let y = g.relu(y)?;
                        let y = g.layer_norm(y, t[3], t[4], 1e-5)?;
                        g.mean(y)
                    },
                    rng,
                )
            }),
        ),
    ]
}

fn batch_loss(model: &Model, batch: &[f64], labels: &[usize]) -> f64 {
    let len = model.config().input_len;
    let mut g = Graph::inference();
    let x = g.constant(&[labels.len(), 1, len], batch.to_vec()).unwrap();
    let logits = forward(model, &mut g, x).unwrap();
    let loss = g.cross_entropy(logits, labels).unwrap();
    g.value(loss)[0]
}

/// Every parameter tensor, a few random entries each.
pub fn end_to_end(architecture: Architecture, input_len: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig {
        architecture,
        seed,
        ..ModelConfig::toy(input_len, 16)
    };
    let model = Model::new(cfg).unwrap();
    let labels = [3usize, 7];
    let batch = uniform(&mut rng, 2 * input_len);

    let mut g = Graph::new();
    let x = g.constant(&[2, 1, input_len], batch.clone()).unwrap();
    let logits = forward(&model, &mut g, x).unwrap();
    assert_eq!(g.shape(logits), [2, 10]);
    let loss = g.cross_entropy(logits, &labels).unwrap();
    g.backward(loss).unwrap();

    let mut named = Vec::new();
    model.named_params("", &mut named);
    let analytic: Vec<Vec<f64>> = named
        .iter()
        .map(|(n, p)| {
            g.param_grad(p)
                .unwrap_or_else(|| panic!("{n} received no gradient"))
                .to_vec()
        })
        .collect();
    let sizes: Vec<usize> = named.iter().map(|(_, p)| p.len()).collect();
    let names: Vec<String> = named.iter().map(|(n, _)| n.clone()).collect();
    drop(named);

    let mut worst: f64 = 0.0;
    for (pi, &size) in sizes.iter().enumerate() {
        for _ in 0..3.min(size) {
            let j = rng.random_range(0..size);
            let shifted = |delta: f64| {
                let mut m = model.clone();
                let mut ps = Vec::new();
                m.params_mut(&mut ps);
                ps[pi].data_mut()[j] += delta;
                batch_loss(&m, &batch, &labels)
            };
            let numeric = (shifted(H_MODEL) - shifted(-H_MODEL)) / (2.0 * H_MODEL);
            let e = entry_error(analytic[pi][j], numeric);
            if e >= MODEL_TOL {
                eprintln!(
                    "{}[{j}]: analytic {} numeric {numeric}",
                    names[pi], analytic[pi][j]
                );
            }
            worst = worst.max(e);
        }
    }
    worst
}
