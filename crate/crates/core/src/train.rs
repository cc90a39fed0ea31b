//! Deterministic minibatch SGD over encoder, head and margin network.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attributes::AttributeTable;
use crate::data::{stream_rng, Dataset};
use crate::error::{Error, Result};
use crate::layers::Parameters;
use crate::losses::{self, LossKind};
use crate::margin_net::MarginMatrix;
use crate::model::Model;
use crate::numerics::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossKind,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default = "defaults::lr_decay")]
    pub lr_decay: f64,
    #[serde(default = "defaults::decay_interval")]
    pub decay_interval: usize,
    #[serde(default = "defaults::lr_floor")]
    pub lr_floor: f64,
    #[serde(default = "defaults::momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub seed: u64,
}

/// Default optimizer settings.
pub mod defaults {
    pub fn epochs() -> usize {
        50
    }
    pub fn batch_size() -> usize {
        64
    }
    pub fn lr() -> f64 {
        0.1
    }
    pub fn lr_decay() -> f64 {
        0.9
    }
    pub fn decay_interval() -> usize {
        5
    }
    pub fn lr_floor() -> f64 {
        1e-6
    }
    pub fn momentum() -> f64 {
        0.9
    }
}

impl TrainConfig {
    pub fn new(loss: LossKind) -> Self {
        TrainConfig {
            loss,
            epochs: defaults::epochs(),
            batch_size: defaults::batch_size(),
            lr: defaults::lr(),
            lr_decay: defaults::lr_decay(),
            decay_interval: defaults::decay_interval(),
            lr_floor: defaults::lr_floor(),
            momentum: defaults::momentum(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        self.loss.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be > 0");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must be in (0, 1]");
        }
        if self.decay_interval == 0 {
            return bad("decay_interval must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if !(self.lr_floor >= 0.0) {
            return bad("lr_floor must be >= 0");
        }
        Ok(())
    }
}

/// `lr0 · decay^⌊epoch / interval⌋`, held at the floor once it reaches it.
pub fn lr_schedule(cfg: &TrainConfig, epoch: usize) -> f64 {
    let steps = epoch / cfg.decay_interval.max(1);
    let lr = cfg.lr * cfg.lr_decay.powi(steps.min(i32::MAX as usize) as i32);
    if lr <= cfg.lr_floor {
        cfg.lr_floor
    } else {
        lr
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sample-weighted mean of the batch losses seen during the epoch.
    pub loss: f64,
    pub lr: f64,
    pub seconds: f64,
    /// Margins after the epoch (ATAM only).
    pub margins: Option<MarginMatrix>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    /// `epoch,loss,lr,seconds`. Wall time is left empty unless `with_time` is set so that
    /// reruns produce identical files.
    pub fn to_csv(&self, with_time: bool) -> String {
        let mut out = String::from("epoch,loss,lr,seconds\n");
        for r in &self.epochs {
            if with_time {
                out.push_str(&format!("{},{},{},{}\n", r.epoch, r.loss, r.lr, r.seconds));
            } else {
                out.push_str(&format!("{},{},{},\n", r.epoch, r.loss, r.lr));
            }
        }
        out
    }
}

/// Loss on a batch and its gradient w.r.t. every model parameter (same layout as `model`).
pub fn loss_and_gradient(
    model: &Model,
    kind: &LossKind,
    x: &Matrix,
    labels: &[usize],
    attributes: Option<&AttributeTable>,
) -> Result<(f64, Model)> {
    let margin_batch = if kind.uses_margins() {
        let (net, table) = match (&model.margin_net, attributes) {
            (Some(net), Some(table)) => (net, table),
            _ => return Err(Error::InvalidConfig("ATAM requires attributes".into())),
        };
        Some(net.margin_batch(table)?)
    } else {
        None
    };
    let (z, enc_cache) = model.encoder.encode_batch(x)?;
    let (w, head_cache) = model.classifier_weights(kind)?;
    let out = losses::evaluate(
        kind,
        &z,
        &w,
        &model.bias,
        labels,
        margin_batch.as_ref().map(|b| &b.margins),
    )?;

    let mut grad = model.zeros_like();
    let enc_grad = model.encoder.encoder_backward(&enc_cache, &out.d_z)?;
    let d_head = match &head_cache {
        Some(cache) => model.head.head_backward(cache, &out.d_w)?,
        None => out.d_w.clone(),
    };
    let margin_grad = match (&margin_batch, &model.margin_net) {
        (Some(batch), Some(net)) => Some(net.margin_batch_backward(batch, &out.d_margins)?),
        _ => None,
    };
    {
        let mut slices = grad.param_slices_mut().into_iter();
        for s in enc_grad.param_slices() {
            slices.next().unwrap().copy_from_slice(s);
        }
        slices.next().unwrap().copy_from_slice(d_head.as_slice());
        if let Some(db) = &out.d_bias {
            slices.next().unwrap().copy_from_slice(db);
        } else {
            slices.next();
        }
        if let Some(mg) = &margin_grad {
            for s in mg.param_slices() {
                slices.next().unwrap().copy_from_slice(s);
            }
        }
    }
    Ok((out.loss, grad))
}

/// Minibatch SGD with momentum (`v ← μv + g`, `θ ← θ − lr·v`) over seeded shuffles.
/// The margin matrix is recomputed once per batch from the current margin-network parameters.
pub fn sgd_train(cfg: &TrainConfig, ds: &Dataset, mut model: Model) -> Result<(Model, History)> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::InsufficientSamples("empty training set".into()));
    }
    if ds.input_dim() != model.encoder.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.encoder.input_dim(),
            actual: ds.input_dim(),
        });
    }
    if ds.classes() != model.classes() {
        return Err(Error::DimensionMismatch {
            expected: model.classes(),
            actual: ds.classes(),
        });
    }
    if cfg.loss.uses_margins() && (ds.attributes.is_none() || model.margin_net.is_none()) {
        return Err(Error::InvalidConfig("ATAM requires attributes".into()));
    }
    let attributes = ds.attributes.as_ref();
    let mut rng = stream_rng(cfg.seed, 7);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut velocity = vec![0.0; model.param_count()];
    let mut history = History::default();

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = lr_schedule(cfg, epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let x = ds.features.select_rows(idx);
            let labels: Vec<usize> = idx.iter().map(|&i| ds.labels[i]).collect();
            let (loss, grad) = loss_and_gradient(&model, &cfg.loss, &x, &labels, attributes)?;
            let grad = grad.flatten();
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { epoch, batch });
            }
            loss_sum += loss * idx.len() as f64;
            let mut offset = 0;
            for slice in model.param_slices_mut() {
                for p in slice.iter_mut() {
                    let v = &mut velocity[offset];
                    *v = cfg.momentum * *v + grad[offset];
                    *p -= lr * *v;
                    offset += 1;
                }
            }
        }
        let margins = match (&model.margin_net, attributes, cfg.loss.uses_margins()) {
            (Some(net), Some(table), true) => Some(net.margin_matrix(table)?),
            _ => None,
        };
        history.epochs.push(EpochRecord {
            epoch,
            loss: loss_sum / ds.len() as f64,
            lr,
            seconds: started.elapsed().as_secs_f64(),
            margins,
        });
    }
    Ok((model, history))
}

/// Largest relative disagreement between `analytic` and central differences of `f` at `params`:
/// `max_i |g_a − g_fd| / max(1e-12, |g_a| + |g_fd|)`.
pub fn grad_check(f: impl FnMut(&[f64]) -> f64, params: &[f64], analytic: &[f64], step: f64) -> f64 {
    grad_check_detailed(f, params, analytic, step).max_rel_error
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Same maximum, but skipping coordinates whose absolute disagreement is within the
    /// floating-point noise of the difference quotient, `2 ε max(|f(p±h)|) / 2h`.
    pub max_rel_error_above_roundoff: f64,
}

impl GradCheck {
    pub fn merge(self, other: GradCheck) -> GradCheck {
        GradCheck {
            max_rel_error: self.max_rel_error.max(other.max_rel_error),
            max_rel_error_above_roundoff: self.max_rel_error_above_roundoff.max(other.max_rel_error_above_roundoff),
        }
    }
}

pub fn grad_check_detailed(mut f: impl FnMut(&[f64]) -> f64, params: &[f64], analytic: &[f64], step: f64) -> GradCheck {
    assert_eq!(params.len(), analytic.len());
    let mut p = params.to_vec();
    let mut worst: f64 = 0.0;
    let mut worst_above: f64 = 0.0;
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + step;
        let plus = f(&p);
        p[i] = orig - step;
        let minus = f(&p);
        p[i] = orig;
        let fd = (plus - minus) / (2.0 * step);
        let diff = (analytic[i] - fd).abs();
        let rel = diff / (analytic[i].abs() + fd.abs()).max(1e-12);
        worst = worst.max(rel);
        let noise = 2.0 * f64::EPSILON * plus.abs().max(minus.abs()) / (2.0 * step);
        if diff > noise {
            worst_above = worst_above.max(rel);
        }
    }
    GradCheck {
        max_rel_error: worst,
        max_rel_error_above_roundoff: worst_above,
    }
}
