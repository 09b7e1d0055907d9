//! Finite-difference check of the whole network on the tiny configuration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ForwardPass, ModelConfig, ModelParams};
use crate::dataset::AttributeSchema;
use crate::error::Result;
use crate::numerics::gradcheck::{rel_error, GradCheckReport, FD_STEP};
use crate::numerics::{Tensor, Triplet};
use crate::objective::{attribute_loss, identity_loss, mine_triplets, triplet_loss};

/// Tolerance on the relative error of the end-to-end check.
pub const END_TO_END_TOLERANCE: f64 = 1e-3;

/// Elements checked per parameter tensor.
const PROBES_PER_TENSOR: usize = 4;

struct Problem {
    images: Tensor<f64>,
    targets: Vec<usize>,
    attr_labels: Vec<Vec<usize>>,
    g_triplets: Vec<Triplet>,
    f_triplets: Vec<Triplet>,
    margin: f64,
}

const LAMBDA: f64 = 0.1;

/// Sum of both stage objectives with the triplets held fixed, so the loss is
/// a smooth function of the parameters near the probe point.
fn loss(params: &ModelParams<f64>, pb: &Problem, with_grads: bool) -> Result<(f64, Vec<Option<Vec<f64>>>)> {
    let mut work = params.clone();
    let mut fp = ForwardPass::train(&mut work);
    let out = fp.full(&pb.images)?;
    let g = &mut fp.graph;
    let id_g = identity_loss(g, out.stage1.id_logits, &pb.targets)?;
    let tri_g = triplet_loss(g, out.stage1.g, &pb.g_triplets, pb.margin)?;
    let attr = attribute_loss(g, &out.stage1.attr_logits, &pb.attr_labels)?;
    let attr = g.scale(attr, LAMBDA);
    let id_l = identity_loss(g, out.local_logits, &pb.targets)?;
    let tri_f = triplet_loss(g, out.f, &pb.f_triplets, pb.margin)?;
    let mut total = id_g;
    for term in [tri_g, attr, id_l, tri_f] {
        total = g.add(total, term)?;
    }
    let value = g.value(total).item();
    if !with_grads {
        return Ok((value, Vec::new()));
    }
    g.backward(total)?;
    Ok((value, fp.param_grads(|_| true)?))
}

/// Distances the hinge compares, for keeping the margin off the kink.
fn hinge_args(emb: &[f64], dim: usize, triplets: &[Triplet]) -> Vec<f64> {
    let d = |a: usize, b: usize| -> f64 {
        (0..dim).map(|i| (emb[a * dim + i] - emb[b * dim + i]).powi(2)).sum()
    };
    triplets
        .iter()
        .map(|t| d(t.anchor, t.positive) - d(t.anchor, t.negative))
        .collect()
}

fn problem(params: &ModelParams<f64>, rng: &mut ChaCha8Rng) -> Result<Problem> {
    let c = &params.config;
    let n = 6;
    let images = Tensor::new(
        &[n, c.in_channels, c.image_height, c.image_width],
        (0..n * c.in_channels * c.image_height * c.image_width)
            .map(|_| rng.gen_range(0.0..1.0))
            .collect(),
    )?;
    let targets: Vec<usize> = (0..n).map(|i| i / 2).collect();
    let attr_labels = c
        .schema
        .groups
        .iter()
        .map(|g| (0..n).map(|_| rng.gen_range(0..g.num_classes)).collect())
        .collect();
    let mut pb = Problem {
        images,
        targets,
        attr_labels,
        g_triplets: Vec::new(),
        f_triplets: Vec::new(),
        margin: rng.gen_range(0.1..0.5),
    };
    // Mine once on the unperturbed parameters.
    let mut work = params.clone();
    let mut fp = ForwardPass::train(&mut work);
    let out = fp.full(&pb.images)?;
    let g = fp.graph.value(out.stage1.g);
    let f = fp.graph.value(out.f);
    pb.g_triplets = mine_triplets(g.data(), g.shape()[1], &pb.targets);
    pb.f_triplets = mine_triplets(f.data(), f.shape()[1], &pb.targets);
    let mut args = hinge_args(g.data(), g.shape()[1], &pb.g_triplets);
    args.extend(hinge_args(f.data(), f.shape()[1], &pb.f_triplets));
    while args.iter().any(|h| (h + pb.margin).abs() < 1e-3) {
        pb.margin += 0.01;
    }
    Ok(pb)
}

/// Tiny network with every parameter jittered away from its initial value.
pub fn tiny_params(seed: u64) -> Result<ModelParams<f64>> {
    let cfg = ModelConfig::tiny(AttributeSchema::default_synthetic(), 3);
    let mut params = ModelParams::init_f64(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a11);
    for p in &mut params.params {
        p.tensor.data_mut().iter_mut().for_each(|x| *x += rng.gen_range(-0.2..0.2));
    }
    Ok(params)
}

/// Whether the one-sided differences disagree by more than curvature allows,
/// meaning a ReLU switched inside `[x − h, x + h]`.
fn straddles_kink(down: f64, mid: f64, up: f64) -> bool {
    let (fwd, bwd) = ((up - mid) / FD_STEP, (mid - down) / FD_STEP);
    (fwd - bwd).abs() > KINK_TOLERANCE * (fwd.abs() + bwd.abs()).max(1e-6)
}

const KINK_TOLERANCE: f64 = 1e-3;

/// Redraws per tensor when a probe lands on a kink.
const MAX_REDRAWS: usize = 8;

/// Central differences against backprop for both stage objectives on the
/// tiny configuration, probing a few random elements of every parameter.
pub fn end_to_end_grad_check(seed: u64) -> Result<GradCheckReport> {
    let mut params = tiny_params(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pb = problem(&params, &mut rng)?;
    let (mid, analytic) = loss(&params, &pb, true)?;
    let noise = 100.0 * f64::EPSILON * mid.abs().max(1.0) / FD_STEP;
    let mut worst = 0.0f64;
    let (mut elements, mut skipped) = (0, 0);
    for t in 0..params.params.len() {
        let a = analytic[t].clone().expect("every parameter is active");
        let n = params.params[t].tensor.numel();
        let (mut probed, mut redraws) = (0, 0);
        while probed < PROBES_PER_TENSOR.min(n) {
            let i = rng.gen_range(0..n);
            let orig = params.params[t].tensor.data()[i];
            params.params[t].tensor.data_mut()[i] = orig + FD_STEP;
            let (up, _) = loss(&params, &pb, false)?;
            params.params[t].tensor.data_mut()[i] = orig - FD_STEP;
            let (down, _) = loss(&params, &pb, false)?;
            params.params[t].tensor.data_mut()[i] = orig;
            if redraws < MAX_REDRAWS && straddles_kink(down, mid, up) {
                log::debug!("{}[{i}] sits on a kink, redrawing", params.params[t].name);
                redraws += 1;
                skipped += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * FD_STEP);
            // Gradients that vanish exactly (biases ahead of BN) leave only
            // rounding noise in the difference quotient.
            if (a[i] - numeric).abs() > noise {
                worst = worst.max(rel_error(a[i], numeric));
            }
            elements += 1;
            probed += 1;
        }
    }
    Ok(GradCheckReport {
        op: "end_to_end".to_string(),
        seed,
        max_rel_error: worst,
        elements,
        skipped,
    })
}
