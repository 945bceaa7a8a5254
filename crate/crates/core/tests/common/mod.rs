//! Check suites shared by the core integration tests and the acceptance
//! target. Each returns the worst observed error so callers can apply
//! their own tolerance and print it.
#![allow(dead_code)]

use latentdr::attention::{
    cross_attention, pool_mix, self_attention, AttentionWeights, NormPlacement, TransformerBlock,
};
use latentdr::gradcheck::{central_difference_4, check, compare, GradCheckReport, DEFAULT_STEP};
use latentdr::latentdr::{
    build_soft_label, degrade, forward_losses, restore, AblationVariant, AugmentRngs, DegraderBody, DegradationKind,
    LossOptions, OperatorConfig,
};
use latentdr::metrics::{alignment, uniformity};
use latentdr::model::{Encoder, ModelBundle, ModelConfig};
use latentdr::{Graph, ParameterRegistry, Result, RngStreams, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;

pub const SEEDS: u64 = 20;
pub const OP_TOL: f64 = 1e-5;
pub const E2E_TOL: f64 = 1e-4;
/// The objective chains several layer norms over 4-wide rows; their
/// curvature calls for the fourth-order stencil.
pub const E2E_STEP: f64 = 1e-4;

pub fn random(shape: &[usize], seed: u64, name: &str) -> Tensor {
    let mut rng = RngStreams::new(seed).stream(name);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn random_with(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// A named check and the worst result over its seeds.
#[derive(Clone, Debug)]
pub struct Checked {
    pub name: String,
    pub report: GradCheckReport,
}

/// `Σ out ⊙ W` for a fixed random `W`, so every output entry matters.
fn weighted(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let w = g.constant(random(g.shape(out), seed, "weights"));
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

fn worst(reports: impl Iterator<Item = GradCheckReport>) -> GradCheckReport {
    reports
        .reduce(|a, b| if b.max_rel_err > a.max_rel_err { b } else { a })
        .expect("at least one seed")
}

fn check_op<F>(name: &str, shapes: &[&[usize]], build: F) -> Checked
where
    F: Fn(&mut Graph, &[Var], u64) -> Result<Var>,
{
    let report = worst((0..SEEDS).map(|seed| {
        let inputs: Vec<Tensor> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| random(s, seed, &format!("input{i}")))
            .collect();
        check(&inputs, DEFAULT_STEP, |g, v| {
            let out = build(g, v, seed)?;
            weighted(g, out, seed)
        })
        .unwrap()
    }));
    Checked { name: name.to_string(), report }
}

fn attention_weights(seed: u64, dim: usize) -> (ParameterRegistry, AttentionWeights) {
    let mut reg = ParameterRegistry::new();
    let attn = AttentionWeights::init(&mut reg, "a", dim, 2, 2, &mut RngStreams::new(seed).stream("init")).unwrap();
    (reg, attn)
}

/// Every differentiable operation, with respect to its inputs.
pub fn op_checks() -> Vec<Checked> {
    let mut out = vec![
        check_op("matmul", &[&[3, 4], &[4, 2]], |g, v, _| g.matmul(v[0], v[1])),
        check_op("add", &[&[3, 4], &[3, 4]], |g, v, _| g.add(v[0], v[1])),
        check_op("mul", &[&[3, 4], &[3, 4]], |g, v, _| g.mul(v[0], v[1])),
        check_op("add_row", &[&[3, 4], &[4]], |g, v, _| g.add_row(v[0], v[1])),
        check_op("scale", &[&[2, 5]], |g, v, _| Ok(g.scale(v[0], -1.7))),
        check_op("transpose", &[&[3, 5]], |g, v, _| g.transpose(v[0])),
        check_op("slice_cols", &[&[3, 6]], |g, v, _| g.slice_cols(v[0], 2, 3)),
        check_op("concat_cols", &[&[3, 2], &[3, 4]], |g, v, _| g.concat_cols(&[v[0], v[1]])),
        check_op("sum", &[&[3, 3]], |g, v, _| Ok(g.sum(v[0]))),
        check_op("mean", &[&[3, 3]], |g, v, _| Ok(g.mean(v[0]))),
        check_op("add_scalars", &[&[3, 3], &[2, 2]], |g, v, _| {
            let (a, b) = (g.mean(v[0]), g.sum(v[1]));
            let b2 = g.scale(b, 0.5);
            g.add_scalars(&[a, b2, a])
        }),
        check_op("gelu", &[&[4, 5]], |g, v, _| Ok(g.gelu(v[0]))),
        check_op("softmax_rows", &[&[4, 5]], |g, v, _| {
            let s = g.scale(v[0], 3.0);
            g.softmax_rows(s)
        }),
        check_op("layer_norm", &[&[4, 6], &[6], &[6]], |g, v, _| g.layer_norm(v[0], v[1], v[2])),
        check_op("dropout", &[&[4, 5]], |g, v, seed| {
            let mut rng = RngStreams::new(seed).stream("mask");
            let mask = (0..20).map(|_| if rng.gen_bool(0.5) { 2.0 } else { 0.0 }).collect();
            Ok(g.dropout_with_mask(v[0], mask))
        }),
        check_op("cross_entropy_soft", &[&[4, 3]], |g, v, seed| {
            let mut rng = RngStreams::new(seed).stream("targets");
            let mut t = Vec::new();
            for _ in 0..4 {
                let row: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
                let s: f64 = row.iter().sum();
                t.extend(row.iter().map(|x| x / s));
            }
            let mut logits = g.scale(v[0], 2.0);
            logits = g.add(logits, v[0])?;
            g.cross_entropy_soft(logits, &Tensor::matrix(4, 3, t).unwrap())
        }),
        check_op("self_attention", &[&[4, 4]], |g, v, seed| {
            let (reg, attn) = attention_weights(seed, 4);
            let mut rng = RngStreams::new(0).stream("d");
            self_attention(g, &reg, v[0], &attn, 0.0, false, &mut rng)
        }),
        check_op("cross_attention", &[&[3, 4], &[5, 4]], |g, v, seed| {
            let (reg, attn) = attention_weights(seed, 4);
            let mut rng = RngStreams::new(0).stream("d");
            cross_attention(g, &reg, v[0], v[1], &attn, 0.0, false, &mut rng)
        }),
        check_op("pool_mix", &[&[6, 3]], |g, v, seed| {
            let mut rng = RngStreams::new(seed).stream("subset");
            Ok(pool_mix(g, v[0], 0.5, &mut rng)?.0)
        }),
        check_op("encoder", &[&[3, 5]], |g, v, seed| {
            let mut reg = ParameterRegistry::new();
            let enc = Encoder::init(&mut reg, &[5, 6, 4], &mut RngStreams::new(seed).stream("enc")).unwrap();
            enc.forward(g, &reg, v[0])
        }),
    ];
    for norm in [NormPlacement::PostLn, NormPlacement::PreLn] {
        out.push(check_op(&format!("transformer_block/{norm}"), &[&[4, 4]], |g, v, seed| {
            let (mut reg, attn) = attention_weights(seed, 4);
            let block =
                TransformerBlock::init(&mut reg, "b", 4, 3, norm, &mut RngStreams::new(seed).stream("block")).unwrap();
            let mut rng = RngStreams::new(0).stream("d");
            block.forward(g, &reg, v[0], |g, x| self_attention(g, &reg, x, &attn, 0.0, false, &mut rng))
        }));
    }
    out
}

/// d=4, C=3, dropout off.
pub fn small_bundle(kind: DegradationKind, norm: NormPlacement, share: bool, seed: u64) -> ModelBundle {
    let mut operator = OperatorConfig::defaults_for(kind, 4);
    operator.norm = norm;
    operator.heads = 2;
    operator.d_head = 2;
    operator.d_ff = 3;
    operator.dropout = 0.0;
    operator.subset_fraction = 0.67;
    operator.noise_scale = 0.3;
    let cfg = ModelConfig {
        input_dim: 5,
        hidden: vec![6],
        latent_dim: 4,
        classes: 3,
        share_classifier: share,
        operator,
    };
    ModelBundle::new(&cfg, &RngStreams::new(seed).child("model")).unwrap()
}

/// Gradient of the selected total (B=3) with respect to every parameter.
pub fn objective_check(bundle: &ModelBundle, variant: AblationVariant, seed: u64) -> GradCheckReport {
    let x = random(&[3, 5], seed, "x");
    let mut lrng = RngStreams::new(seed).stream("labels");
    let labels: Vec<usize> = (0..3).map(|_| lrng.gen_range(0..3)).collect();
    let opts = LossOptions::default();
    let aug = || AugmentRngs::from_streams(&RngStreams::new(seed).child("augment"));

    let pass = forward_losses(bundle, &x, &labels, variant, &opts, &mut aug()).unwrap();
    let grads = pass.graph.backward(pass.total).unwrap();
    let ids: Vec<_> = bundle.registry.ids().collect();
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| {
            pass.graph
                .bound_param(id)
                .and_then(|v| grads.get(v))
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; bundle.registry.get(id).value().numel()])
        })
        .collect();
    let numeric = central_difference_4(&bundle.registry.values(), E2E_STEP, |point| {
        let mut b = bundle.clone();
        for (&id, t) in ids.iter().zip(point) {
            b.registry.set_value(id, t.clone())?;
        }
        Ok(forward_losses(&b, &x, &labels, variant, &opts, &mut aug())?.breakdown.total)
    })
    .unwrap();
    compare(&analytic, &numeric)
}

/// The D+R objective for each degradation kind, alternating norm placement.
pub fn objective_checks() -> Vec<Checked> {
    [DegradationKind::SelfAttention, DegradationKind::Pool, DegradationKind::Gaussian]
        .into_iter()
        .map(|kind| Checked {
            name: format!("d_plus_r/{kind}"),
            report: worst((0..SEEDS).map(|seed| {
                let norm = if seed % 2 == 0 { NormPlacement::PostLn } else { NormPlacement::PreLn };
                objective_check(&small_bundle(kind, norm, true, seed), AblationVariant::DPlusR, seed)
            })),
        })
        .collect()
}

fn bundle(kind: DegradationKind, norm: NormPlacement, dim: usize, share: bool, seed: u64) -> ModelBundle {
    let mut operator = OperatorConfig::defaults_for(kind, dim);
    operator.norm = norm;
    let cfg = ModelConfig {
        input_dim: 6,
        hidden: vec![10],
        latent_dim: dim,
        classes: 4,
        share_classifier: share,
        operator,
    };
    ModelBundle::new(&cfg, &RngStreams::new(seed)).unwrap()
}

/// Largest change in restored latents when keys/values are permuted, over
/// `cases` random inputs and permutations.
pub fn restoration_permutation_error(cases: u64) -> f64 {
    let mut rng = RngStreams::new(1).stream("cases");
    let mut worst = 0.0f64;
    for case in 0..cases {
        let norm = if case % 2 == 0 { NormPlacement::PostLn } else { NormPlacement::PreLn };
        let b = bundle(DegradationKind::SelfAttention, norm, 8, true, case);
        let (rows, keys) = (rng.gen_range(1..6), rng.gen_range(1..9));
        let z_d = random_with(rows, 8, &mut rng);
        let z = random_with(keys, 8, &mut rng);
        let mut perm: Vec<usize> = (0..keys).collect();
        perm.shuffle(&mut rng);
        let run = |keys: &Tensor| {
            let mut g = Graph::new();
            let (q, k) = (g.constant(z_d.clone()), g.constant(keys.clone()));
            let mut r = RngStreams::new(0).stream("d");
            let out = restore(&mut g, &b.registry, q, k, b.restorer.as_ref().unwrap(), false, &mut r).unwrap();
            g.value(out).clone()
        };
        worst = worst.max(max_diff(&run(&z), &run(&z.select_rows(&perm).unwrap())));
    }
    worst
}

/// Equivariance error of the self-attention mixer and of the whole
/// degradation layer in evaluation mode, as `(mixer, layer)`.
pub fn self_attention_equivariance_error(cases: u64) -> (f64, f64) {
    let mut rng = RngStreams::new(2).stream("cases");
    let (mut mixer_worst, mut layer_worst) = (0.0f64, 0.0f64);
    for case in 0..cases {
        let b = bundle(DegradationKind::SelfAttention, NormPlacement::PostLn, 8, true, case);
        let degrader = b.degrader.as_ref().unwrap();
        let DegraderBody::SelfAttention { attention, .. } = &degrader.body else {
            unreachable!()
        };
        let n = rng.gen_range(2..9);
        let z = random_with(n, 8, &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let zp = z.select_rows(&perm).unwrap();

        let mixer = |input: &Tensor| {
            let mut g = Graph::new();
            let v = g.constant(input.clone());
            let mut r = RngStreams::new(0).stream("d");
            let out = self_attention(&mut g, &b.registry, v, attention, 0.5, false, &mut r).unwrap();
            g.value(out).clone()
        };
        mixer_worst = mixer_worst.max(max_diff(&mixer(&z).select_rows(&perm).unwrap(), &mixer(&zp)));

        let layer = |input: &Tensor| {
            let mut g = Graph::new();
            let v = g.constant(input.clone());
            let mut rngs = AugmentRngs::from_streams(&RngStreams::new(0));
            let out = degrade(&mut g, &b.registry, v, degrader, false, &mut rngs).unwrap().output;
            g.value(out).clone()
        };
        layer_worst = layer_worst.max(max_diff(&layer(&z).select_rows(&perm).unwrap(), &layer(&zp)));
    }
    (mixer_worst, layer_worst)
}

/// Largest `|total − (l1 + l2 + l3)|` over random batches of every kind.
pub fn loss_sum_error(cases: u64) -> f64 {
    let mut rng = RngStreams::new(3).stream("cases");
    let mut worst = 0.0f64;
    for case in 0..cases {
        let kind = [DegradationKind::SelfAttention, DegradationKind::Pool, DegradationKind::Gaussian][case as usize % 3];
        let b = bundle(kind, NormPlacement::PostLn, 32, case % 2 == 0, case);
        let n = rng.gen_range(2..12);
        let x = random_with(n, 6, &mut rng);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
        let mut aug = AugmentRngs::from_streams(&RngStreams::new(case));
        let pass = forward_losses(&b, &x, &labels, AblationVariant::DPlusR, &LossOptions::default(), &mut aug).unwrap();
        let bd = pass.breakdown;
        worst = worst.max((bd.total - (bd.l_original + bd.l_degraded + bd.l_restored)).abs());
    }
    worst
}

/// Whether a batch holding one class gets that class back as its soft label.
pub fn single_class_soft_label_is_label() -> bool {
    (0..4).all(|class| {
        let labels = vec![class; 5];
        let y = Tensor::one_hot(&labels, 4).unwrap();
        build_soft_label(&y).unwrap().broadcast(5) == y
    })
}

/// Largest gap between the shared classifier's gradient of the total and
/// the sum of its per-term gradients.
pub fn shared_classifier_gradient_error(cases: u64) -> f64 {
    let mut rng = RngStreams::new(5).stream("cases");
    let mut worst = 0.0f64;
    for case in 0..cases {
        let b = bundle(DegradationKind::SelfAttention, NormPlacement::PostLn, 16, true, case);
        let x = random_with(6, 6, &mut rng);
        let labels: Vec<usize> = (0..6).map(|_| rng.gen_range(0..4)).collect();
        let mut aug = AugmentRngs::from_streams(&RngStreams::new(case));
        let pass = forward_losses(&b, &x, &labels, AblationVariant::DPlusR, &LossOptions::default(), &mut aug).unwrap();
        let g = &pass.graph;
        let total = g.backward(pass.total).unwrap();
        let parts = [
            g.backward(pass.l_original).unwrap(),
            g.backward(pass.l_degraded.unwrap()).unwrap(),
            g.backward(pass.l_restored.unwrap()).unwrap(),
        ];
        for id in [b.classifier.linear.weight, b.classifier.linear.bias] {
            let v = g.bound_param(id).unwrap();
            for (j, &w) in total.get(v).unwrap().iter().enumerate() {
                let sum: f64 = parts.iter().map(|p| p.get(v).map_or(0.0, |gr| gr[j])).sum();
                worst = worst.max((w - sum).abs());
            }
        }
    }
    worst
}

/// Squared distance between normalised rows via the Gram identity
/// `‖a‖² + ‖b‖² − 2a·b`, computed independently of the metric code.
fn gram_sq_dist(x: &Tensor, i: usize, j: usize) -> f64 {
    let norm = |r: usize| x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
    let (ni, nj) = (norm(i), norm(j));
    let dot: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| a * b).sum();
    (2.0 - 2.0 * dot / (ni * nj)).max(0.0)
}

pub fn brute_alignment(x: &Tensor, classes: &[usize]) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for i in 0..x.rows() {
        for j in (i + 1)..x.rows() {
            if classes[i] == classes[j] {
                sum += gram_sq_dist(x, i, j);
                n += 1;
            }
        }
    }
    sum / n as f64
}

pub fn brute_uniformity(x: &Tensor) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for i in 0..x.rows() {
        for j in 0..x.rows() {
            if i != j {
                sum += (-2.0 * gram_sq_dist(x, i, j)).exp();
                n += 1;
            }
        }
    }
    (sum / n as f64).ln()
}

/// Largest gap between the metrics and their brute-force oracles for
/// clouds of up to 64 rows.
pub fn metric_oracle_error() -> f64 {
    let mut worst = 0.0f64;
    for n in [2usize, 3, 6, 8, 17, 33, 64] {
        for seed in 0..5u64 {
            let x = random(&[n, 5], seed * 100 + n as u64, "features");
            // two rows per class at least, so alignment is defined
            let classes: Vec<usize> = (0..n).map(|i| (i / 2 + seed as usize) % 3).collect();
            let a = alignment(&x, &classes).unwrap().value;
            worst = worst.max((a - brute_alignment(&x, &classes)).abs());
            let u = uniformity(&x).unwrap().value;
            worst = worst.max((u - brute_uniformity(&x)).abs());
        }
    }
    worst
}

/// Identical cloud gives alignment 0 and uniformity 0; an antipodal pair
/// gives uniformity −8. All exact.
pub fn metric_closed_forms_hold() -> bool {
    let cloud = Tensor::from_rows(&[[0.3, -0.4, 1.2]; 5]).unwrap();
    let anti = Tensor::from_rows(&[[0.0, 2.0, 0.0], [0.0, -5.0, 0.0]]).unwrap();
    alignment(&cloud, &[0, 0, 1, 1, 1]).unwrap().value == 0.0
        && uniformity(&cloud).unwrap().value == 0.0
        && uniformity(&anti).unwrap().value == -8.0
}
