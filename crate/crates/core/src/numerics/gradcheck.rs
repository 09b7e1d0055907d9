//! Central finite-difference checks for every registered graph op.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BnMode, BnStats, Graph, Tensor, Triplet, Var};
use crate::error::{input_err, Result};

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Per-op tolerance on the relative error.
pub const OP_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub op: String,
    pub seed: u64,
    pub max_rel_error: f64,
    pub elements: usize,
    /// Probes dropped because the difference interval straddled a kink.
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares analytic and central-difference gradients of `build` with respect
/// to every input flagged in `check`. Non-scalar outputs are reduced with a
/// fixed random projection so every output element participates.
pub fn grad_check<F>(inputs: &[Tensor<f64>], check: &[bool], seed: u64, build: F) -> Result<(f64, usize)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f00d);
    let probe = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        g.value(out).shape().to_vec()
    };
    let projection = (probe.iter().product::<usize>() > 1).then(|| {
        let n = probe.iter().product();
        Tensor::from_parts(probe.clone(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    });

    let eval = |values: &[Tensor<f64>], with_grad: bool| -> Result<(f64, Vec<Option<Vec<f64>>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values
            .iter()
            .zip(check)
            .map(|(t, &c)| g.leaf(t.clone(), with_grad && c))
            .collect();
        let out = build(&mut g, &vars)?;
        let loss = match &projection {
            Some(p) => {
                let w = g.constant(p.clone());
                let prod = g.mul(out, w)?;
                g.sum(prod)
            }
            None => out,
        };
        let value = g.value(loss).item();
        let mut grads = Vec::new();
        if with_grad {
            g.backward(loss)?;
            grads = vars.iter().map(|&v| g.grad(v).map(<[f64]>::to_vec)).collect();
        }
        Ok((value, grads))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut worst = 0.0f64;
    let mut count = 0;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, &c) in check.iter().enumerate() {
        if !c {
            continue;
        }
        let a = analytic[k]
            .as_ref()
            .ok_or_else(|| input_err!("input {k} received no gradient"))?;
        for i in 0..inputs[k].numel() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + FD_STEP;
            let (fp, _) = eval(&work, false)?;
            work[k].data_mut()[i] = orig - FD_STEP;
            let (fm, _) = eval(&work, false)?;
            work[k].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            worst = worst.max(rel_error(a[i], numeric));
            count += 1;
        }
    }
    Ok((worst, count))
}

type Builder = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

struct OpCase {
    inputs: Vec<Tensor<f64>>,
    check: Vec<bool>,
    build: Builder,
}

/// Names accepted by [`check_op`].
pub const REGISTERED_OPS: &[&str] = &[
    "conv2d",
    "channel_bias",
    "linear",
    "matmul",
    "batch_norm",
    "batch_norm_spatial",
    "batch_norm_eval",
    "relu",
    "tanh",
    "sigmoid",
    "global_average_pool",
    "weighted_average_pool",
    "softmax_cross_entropy",
    "concat",
    "add",
    "mul",
    "scale",
    "sum",
    "mean",
    "triplet_loss",
];

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

/// Uniform in ±[0.05, 1.5]: keeps inputs away from the relu kink.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.5);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

fn case(name: &str, rng: &mut ChaCha8Rng) -> Result<OpCase> {
    let r = |rng: &mut ChaCha8Rng, s: &[usize]| uniform(rng, s, -1.0, 1.0);
    let c = match name {
        "conv2d" => {
            let stride = rng.gen_range(1..=2);
            let pad = rng.gen_range(0..=1);
            OpCase {
                inputs: vec![r(rng, &[2, 3, 5, 4]), r(rng, &[4, 3, 3, 3])],
                check: vec![true, true],
                build: Box::new(move |g, v| g.conv2d(v[0], v[1], stride, pad)),
            }
        }
        "channel_bias" => OpCase {
            inputs: vec![r(rng, &[2, 3, 3, 2]), r(rng, &[3])],
            check: vec![true, true],
            build: Box::new(|g, v| g.channel_bias(v[0], v[1])),
        },
        "linear" => OpCase {
            inputs: vec![r(rng, &[2, 3]), r(rng, &[3, 4]), r(rng, &[4])],
            check: vec![true, true, true],
            build: Box::new(|g, v| g.linear(v[0], v[1], v[2])),
        },
        "matmul" => OpCase {
            inputs: vec![r(rng, &[3, 4]), r(rng, &[4, 2])],
            check: vec![true, true],
            build: Box::new(|g, v| g.matmul(v[0], v[1])),
        },
        "batch_norm" | "batch_norm_spatial" => {
            let shape: &[usize] = if name == "batch_norm" { &[5, 3] } else { &[3, 2, 2, 3] };
            let c = shape[1];
            OpCase {
                inputs: vec![
                    uniform(rng, shape, -2.0, 2.0),
                    uniform(rng, &[c], 0.5, 1.5),
                    r(rng, &[c]),
                ],
                check: vec![true, true, true],
                build: Box::new(move |g, v| {
                    let mut stats = BnStats::new(c);
                    g.batch_norm(v[0], v[1], v[2], BnMode::Train(&mut stats))
                }),
            }
        }
        "batch_norm_eval" => {
            let stats = BnStats {
                mean: uniform(rng, &[3], -0.5, 0.5).into_data(),
                var: uniform(rng, &[3], 0.5, 2.0).into_data(),
            };
            OpCase {
                inputs: vec![r(rng, &[4, 3]), uniform(rng, &[3], 0.5, 1.5), r(rng, &[3])],
                check: vec![true, true, true],
                build: Box::new(move |g, v| g.batch_norm(v[0], v[1], v[2], BnMode::Eval(&stats))),
            }
        }
        "relu" => OpCase {
            inputs: vec![away_from_zero(rng, &[3, 4])],
            check: vec![true],
            build: Box::new(|g, v| Ok(g.relu(v[0]))),
        },
        "tanh" => OpCase {
            inputs: vec![uniform(rng, &[3, 4], -2.0, 2.0)],
            check: vec![true],
            build: Box::new(|g, v| Ok(g.tanh(v[0]))),
        },
        "sigmoid" => OpCase {
            inputs: vec![uniform(rng, &[3, 4], -4.0, 4.0)],
            check: vec![true],
            build: Box::new(|g, v| Ok(g.sigmoid(v[0]))),
        },
        "global_average_pool" => OpCase {
            inputs: vec![r(rng, &[2, 3, 3, 2])],
            check: vec![true],
            build: Box::new(|g, v| g.global_average_pool(v[0])),
        },
        "weighted_average_pool" => OpCase {
            inputs: vec![r(rng, &[1, 2, 3, 3]), uniform(rng, &[1, 1, 3, 3], 0.0, 1.0)],
            check: vec![true, true],
            build: Box::new(|g, v| g.weighted_average_pool(v[0], v[1])),
        },
        "softmax_cross_entropy" => {
            let targets: Vec<usize> = (0..4).map(|_| rng.gen_range(0..5)).collect();
            OpCase {
                inputs: vec![uniform(rng, &[4, 5], -2.0, 2.0)],
                check: vec![true],
                build: Box::new(move |g, v| g.softmax_cross_entropy(v[0], &targets)),
            }
        }
        "concat" => OpCase {
            inputs: vec![r(rng, &[2, 3]), r(rng, &[2, 2]), r(rng, &[2, 1])],
            check: vec![true, true, true],
            build: Box::new(|g, v| g.concat(v)),
        },
        "add" => OpCase {
            inputs: vec![r(rng, &[2, 3]), r(rng, &[2, 3])],
            check: vec![true, true],
            build: Box::new(|g, v| g.add(v[0], v[1])),
        },
        "mul" => OpCase {
            inputs: vec![r(rng, &[2, 3]), r(rng, &[2, 3])],
            check: vec![true, true],
            build: Box::new(|g, v| g.mul(v[0], v[1])),
        },
        "scale" => {
            let f = rng.gen_range(-2.0..2.0);
            OpCase {
                inputs: vec![r(rng, &[2, 3])],
                check: vec![true],
                build: Box::new(move |g, v| Ok(g.scale(v[0], f))),
            }
        }
        "sum" => OpCase {
            inputs: vec![r(rng, &[2, 3])],
            check: vec![true],
            build: Box::new(|g, v| Ok(g.sum(v[0]))),
        },
        "mean" => OpCase {
            inputs: vec![r(rng, &[2, 3])],
            check: vec![true],
            build: Box::new(|g, v| Ok(g.mean(v[0]))),
        },
        "triplet_loss" => {
            let n = 6;
            let emb = r(rng, &[n, 3]);
            let triplets: Vec<Triplet> = (0..n)
                .map(|a| {
                    let positive = (a + 1 + rng.gen_range(0..n - 1)) % n;
                    let mut negative = rng.gen_range(0..n);
                    while negative == a || negative == positive {
                        negative = rng.gen_range(0..n);
                    }
                    Triplet {
                        anchor: a,
                        positive,
                        negative,
                    }
                })
                .collect();
            // Keep every hinge clear of its kink.
            let hinge_args: Vec<f64> = triplets
                .iter()
                .map(|t| {
                    super::graph::sq_dist(emb.row(t.anchor), emb.row(t.positive))
                        - super::graph::sq_dist(emb.row(t.anchor), emb.row(t.negative))
                })
                .collect();
            let mut margin = rng.gen_range(0.1..0.6);
            while hinge_args.iter().any(|h| (h + margin).abs() < 1e-3) {
                margin += 0.01;
            }
            OpCase {
                inputs: vec![emb],
                check: vec![true],
                build: Box::new(move |g, v| g.triplet_loss(v[0], &triplets, margin)),
            }
        }
        other => return Err(input_err!("unknown op '{other}'; known ops: {}", REGISTERED_OPS.join(", "))),
    };
    Ok(c)
}

/// Gradient check of one registered op on seeded random inputs.
pub fn check_op(name: &str, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = case(name, &mut rng)?;
    let (max_rel_error, elements) = grad_check(&c.inputs, &c.check, seed, &c.build)?;
    Ok(GradCheckReport {
        op: name.to_string(),
        seed,
        max_rel_error,
        elements,
        skipped: 0,
    })
}
