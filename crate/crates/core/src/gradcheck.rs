//! Finite-difference verification of every analytic gradient in the crate.
//!
//! Each component is checked on seeded random instances with `N <= 8`, `d <= 6`, `M <= 5`,
//! `k <= 6`, using central differences with step [`FD_STEP`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attributes::AttributeTable;
use crate::error::Result;
use crate::layers::{Mlp, Parameters};
use crate::losses::{self, LossKind};
use crate::margin_net::{MarginMatrix, MarginNet};
use crate::model::{ClassifierHead, Encoder, Model};
use crate::numerics::Matrix;
use crate::train::{grad_check_detailed, loss_and_gradient, GradCheck};

pub const FD_STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-5;
pub const DEFAULT_INSTANCES: usize = 20;

#[derive(Debug, Clone, Serialize)]
pub struct ComponentResult {
    pub name: String,
    pub max_rel_error: f64,
    /// Worst error among coordinates whose disagreement exceeds the difference-quotient
    /// roundoff; a failing component with a small value here is limited by `f64`, not wrong.
    pub max_rel_error_above_roundoff: f64,
    pub instances: usize,
    pub passed: bool,
}

/// Every loss variant checked by the suite.
pub fn suite_losses() -> Vec<LossKind> {
    vec![
        LossKind::Softmax,
        LossKind::ModifiedSoftmax,
        LossKind::ASoftmax { m: 2 },
        LossKind::ASoftmax { m: 3 },
        LossKind::ASoftmax { m: 4 },
        LossKind::CosFace { s: 4.0, m: 0.35 },
        LossKind::ArcFace { s: 4.0, m: 0.5 },
        LossKind::Atam,
    ]
}

struct Instance {
    z: Matrix,
    head: ClassifierHead,
    bias: Vec<f64>,
    labels: Vec<usize>,
    margins: MarginMatrix,
    table: AttributeTable,
    x: Matrix,
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + seed);
    let n = rng.random_range(2..=8);
    let d = rng.random_range(2..=6);
    let m = rng.random_range(2..=5);
    let k = rng.random_range(1..=6);
    sized_instance(&mut rng, n, d, m, k)
}

/// The end-to-end model: input 4, one hidden layer of 8, d = 4, M = 3, N = 5.
fn tiny_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(0x7171_0000 + seed);
    let k = rng.random_range(1..=6);
    sized_instance(&mut rng, 5, 4, 3, k)
}

fn sized_instance(rng: &mut ChaCha8Rng, n: usize, d: usize, m: usize, k: usize) -> Instance {
    let z = random_matrix(rng, n, d, -2.0, 2.0);
    let head = ClassifierHead::from_raw(random_matrix(rng, d, m, -1.0, 1.0));
    let bias = (0..m).map(|_| rng.random_range(-0.5..0.5)).collect();
    let labels = (0..n).map(|_| rng.random_range(0..m)).collect();
    let mut upper = Vec::new();
    for _ in 0..m * m {
        upper.push(rng.random_range(1.1..3.0));
    }
    let margins = MarginMatrix::from_fn(m, |j, y| upper[j * m + y]).unwrap();
    let table = AttributeTable::new(
        (0..m)
            .map(|_| (0..k).map(|_| f64::from(rng.random_range(0..2u8))).collect())
            .collect(),
    )
    .unwrap();
    let x = random_matrix(rng, n, 4, -1.5, 1.5);
    Instance {
        z,
        head,
        bias,
        labels,
        margins,
        table,
        x,
    }
}

fn upper_entries(m: &Matrix) -> Vec<f64> {
    let k = m.rows();
    (0..k).flat_map(|j| (j + 1..k).map(move |y| (j, y))).map(|(j, y)| m[(j, y)]).collect()
}

fn margins_from_upper(classes: usize, upper: &[f64]) -> MarginMatrix {
    let mut it = upper.iter();
    let mut values = Matrix::identity(classes);
    for j in 0..classes {
        for y in j + 1..classes {
            let v = *it.next().unwrap();
            values[(j, y)] = v;
            values[(y, j)] = v;
        }
    }
    // Finite-difference probes stay far above the `>= 1` bound.
    MarginMatrix::new(values).expect("margins stay valid")
}

/// Loss-level check: gradients w.r.t. the embeddings, the raw head (through the unit-norm
/// reparameterization, or directly for the biased softmax), the bias, and the ATAM margins.
pub fn check_loss(kind: &LossKind, seed: u64) -> Result<GradCheck> {
    let inst = instance(seed);
    let eval = |z: &Matrix, head: &ClassifierHead, bias: &[f64], margins: &MarginMatrix| -> Result<losses::LossOutput> {
        if kind.uses_bias() {
            losses::softmax_ce(z, head.raw(), bias, &inst.labels)
        } else {
            let (w, _) = head.head_weights()?;
            losses::evaluate(kind, z, &w, bias, &inst.labels, Some(margins))
        }
    };
    let out = eval(&inst.z, &inst.head, &inst.bias, &inst.margins)?;
    let mut worst = GradCheck::default();

    let z_shape = (inst.z.rows(), inst.z.cols());
    worst = worst.merge(grad_check_detailed(
        |p| {
            let z = Matrix::from_vec(z_shape.0, z_shape.1, p.to_vec()).unwrap();
            eval(&z, &inst.head, &inst.bias, &inst.margins).unwrap().loss
        },
        inst.z.as_slice(),
        out.d_z.as_slice(),
        FD_STEP,
    ));

    let d_head = if kind.uses_bias() {
        out.d_w.clone()
    } else {
        let (_, cache) = inst.head.head_weights()?;
        inst.head.head_backward(&cache, &out.d_w)?
    };
    let h_shape = (inst.head.raw().rows(), inst.head.raw().cols());
    worst = worst.merge(grad_check_detailed(
        |p| {
            let head = ClassifierHead::from_raw(Matrix::from_vec(h_shape.0, h_shape.1, p.to_vec()).unwrap());
            eval(&inst.z, &head, &inst.bias, &inst.margins).unwrap().loss
        },
        inst.head.raw().as_slice(),
        d_head.as_slice(),
        FD_STEP,
    ));

    if let Some(db) = &out.d_bias {
        worst = worst.merge(grad_check_detailed(
            |p| eval(&inst.z, &inst.head, p, &inst.margins).unwrap().loss,
            &inst.bias,
            db,
            FD_STEP,
        ));
    }

    if kind.uses_margins() {
        let classes = inst.margins.classes();
        worst = worst.merge(grad_check_detailed(
            |p| {
                let mm = margins_from_upper(classes, p);
                eval(&inst.z, &inst.head, &inst.bias, &mm).unwrap().loss
            },
            &upper_entries(inst.margins.as_matrix()),
            &upper_entries(&out.d_margins),
            FD_STEP,
        ));
    }
    Ok(worst)
}

// Zero biases combined with binary attributes put pre-activations exactly on the ReLU kink,
// where finite differences are meaningless.
fn randomize_biases(mlp: &mut Mlp, rng: &mut ChaCha8Rng) {
    for layer in &mut mlp.layers {
        layer.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
    }
}

/// A tiny full model whose margin network produces margins above 1 so every branch is live.
fn tiny_model(inst: &Instance, rng: &mut ChaCha8Rng) -> Result<Model> {
    let d = inst.head.embedding_dim();
    let mut encoder = Encoder::new(inst.x.cols(), &[8], d, rng)?;
    randomize_biases(encoder.mlp_mut(), rng);
    let k = inst.table.attr_dim();
    let mut mlp = Mlp::glorot(&[2 * k, 5, 4, 1], rng)?;
    randomize_biases(&mut mlp, rng);
    mlp.layers.last_mut().unwrap().bias[0] = 0.8;
    Ok(Model {
        encoder,
        head: inst.head.clone(),
        bias: inst.bias.clone(),
        margin_net: Some(MarginNet::from_mlp(mlp)?),
    })
}

/// End-to-end check of `loss_and_gradient` w.r.t. every raw model parameter.
pub fn check_end_to_end(kind: &LossKind, seed: u64) -> Result<GradCheck> {
    let inst = tiny_instance(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(0xe2e + seed);
    let model = tiny_model(&inst, &mut rng)?;
    let (_, grad) = loss_and_gradient(&model, kind, &inst.x, &inst.labels, Some(&inst.table))?;
    let mut probe = model.clone();
    Ok(grad_check_detailed(
        |p| {
            probe.assign_flat(p);
            loss_and_gradient(&probe, kind, &inst.x, &inst.labels, Some(&inst.table))
                .unwrap()
                .0
        },
        &model.flatten(),
        &grad.flatten(),
        FD_STEP,
    ))
}

/// Margin network alone: gradient of a positively weighted total of all pair margins.
pub fn check_margin_net(seed: u64) -> Result<GradCheck> {
    let inst = instance(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(0x3a7 + seed);
    let model = tiny_model(&inst, &mut rng)?;
    let net = model.margin_net.unwrap();
    let m = inst.table.class_count();
    // Mixed-sign weights can cancel a gradient down to the finite-difference roundoff floor.
    let weights = random_matrix(&mut rng, m, m, 0.5, 1.5);
    let objective = |net: &MarginNet| -> f64 {
        let mm = net.margin_matrix(&inst.table).unwrap();
        (0..m)
            .flat_map(|j| (j + 1..m).map(move |y| (j, y)))
            .map(|(j, y)| weights[(j, y)] * mm.get(j, y))
            .sum()
    };
    let batch = net.margin_batch(&inst.table)?;
    let mut d = Matrix::zeros(m, m);
    for j in 0..m {
        for y in j + 1..m {
            d[(j, y)] = weights[(j, y)];
        }
    }
    let grad = net.margin_batch_backward(&batch, &d)?;
    let mut probe = net.clone();
    Ok(grad_check_detailed(
        |p| {
            probe.assign_flat(p);
            objective(&probe)
        },
        &net.flatten(),
        &grad.flatten(),
        FD_STEP,
    ))
}

/// Encoder alone: gradient of `Σ G ⊙ encode(X)` for a fixed random `G`.
pub fn check_encoder(seed: u64) -> Result<GradCheck> {
    let inst = instance(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(0xec0 + seed);
    let mut enc = Encoder::new(inst.x.cols(), &[7, 6], inst.z.cols(), &mut rng)?;
    randomize_biases(enc.mlp_mut(), &mut rng);
    let g = random_matrix(&mut rng, inst.x.rows(), inst.z.cols(), -1.0, 1.0);
    let (_, cache) = enc.encode_batch(&inst.x)?;
    let grad = enc.encoder_backward(&cache, &g)?;
    let mut probe = enc.clone();
    Ok(grad_check_detailed(
        |p| {
            probe.assign_flat(p);
            let (z, _) = probe.encode_batch(&inst.x).unwrap();
            crate::numerics::dot(z.as_slice(), g.as_slice())
        },
        &enc.flatten(),
        &grad.flatten(),
        FD_STEP,
    ))
}

/// Head normalization alone: gradient of `Σ G ⊙ W(V)` w.r.t. the raw head `V`.
pub fn check_head(seed: u64) -> Result<GradCheck> {
    let inst = instance(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(0x4ead + seed);
    let raw = inst.head.raw().clone();
    let g = random_matrix(&mut rng, raw.rows(), raw.cols(), -1.0, 1.0);
    let (_, cache) = inst.head.head_weights()?;
    let grad = inst.head.head_backward(&cache, &g)?;
    Ok(grad_check_detailed(
        |p| {
            let head = ClassifierHead::from_raw(Matrix::from_vec(raw.rows(), raw.cols(), p.to_vec()).unwrap());
            let (w, _) = head.head_weights().unwrap();
            crate::numerics::dot(w.as_slice(), g.as_slice())
        },
        raw.as_slice(),
        grad.as_slice(),
        FD_STEP,
    ))
}

fn summarize(name: String, instances: usize, mut check: impl FnMut(u64) -> Result<GradCheck>) -> Result<ComponentResult> {
    let mut worst = GradCheck::default();
    for seed in 0..instances as u64 {
        worst = worst.merge(check(seed)?);
    }
    Ok(ComponentResult {
        name,
        max_rel_error: worst.max_rel_error,
        max_rel_error_above_roundoff: worst.max_rel_error_above_roundoff,
        instances,
        passed: worst.max_rel_error < TOLERANCE,
    })
}

/// Runs the suite: each loss at the loss level, the margin network, the encoder and the head
/// normalization.
pub fn run_gradient_suite(instances: usize) -> Result<Vec<ComponentResult>> {
    let mut results = Vec::new();
    for kind in suite_losses() {
        results.push(summarize(format!("loss/{}", kind.name()), instances, |s| check_loss(&kind, s))?);
    }
    results.push(summarize("margin_net".into(), instances, check_margin_net)?);
    results.push(summarize("encoder".into(), instances, check_encoder)?);
    results.push(summarize("head_normalization".into(), instances, check_head)?);
    Ok(results)
}

/// End-to-end checks of the tiny model for every loss, over `instances` seeds.
pub fn run_end_to_end(instances: usize) -> Result<Vec<ComponentResult>> {
    suite_losses()
        .iter()
        .map(|kind| summarize(format!("model/{}", kind.name()), instances, |s| check_end_to_end(kind, s)))
        .collect()
}
