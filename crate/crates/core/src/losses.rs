//! Softmax-family classification losses with analytic gradients.
//!
//! All angular variants share one engine: for sample `i` and class `j` the cosine
//! `c = <z_i, w_j> / ||z_i||` (columns of `W` are unit-norm) is mapped through a per-loss
//! function `g` and scaled either by `||z_i||` or by a fixed `s`:
//!
//! | loss        | target logit            | non-target logit             | scale    |
//! |-------------|-------------------------|------------------------------|----------|
//! | modified    | `c`                     | `c`                          | `‖z‖`    |
//! | A-Softmax   | `ψ(θ)`                  | `c`                          | `‖z‖`    |
//! | normalized  | `c`                     | `c`                          | `s`      |
//! | CosFace     | `c - m`                 | `c`                          | `s`      |
//! | ArcFace     | `cos(θ + m)`            | `c`                          | `s`      |
//! | ATAM        | `c`                     | `cos(θ / m_{j,y})`           | `‖z‖`    |
//!
//! `dW` is the gradient w.r.t. the unit-norm weights treated as free entries; the projection
//! back onto the raw head parameters happens in [`crate::model::ClassifierHead`].

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::margin_net::MarginMatrix;
use crate::numerics::{clamp_cos, cross_entropy, dot, norm, Matrix};

/// Tolerance on `||W_j|| = 1` accepted by the angular losses.
pub const UNIT_NORM_TOL: f64 = 1e-10;

pub const DEFAULT_SCALE: f64 = 30.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    /// Batch mean.
    pub loss: f64,
    /// `N × d`
    pub d_z: Matrix,
    /// `d × M`
    pub d_w: Matrix,
    /// Present only for the biased softmax.
    pub d_bias: Option<Vec<f64>>,
    /// `M × M`, zero diagonal. Each off-diagonal entry holds the gradient w.r.t. the shared
    /// margin of that unordered pair, so `(j, y)` and `(y, j)` carry the same total.
    pub d_margins: Matrix,
}

/// Loss selection as it appears in experiment configs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", try_from = "RawLossKind")]
pub enum LossKind {
    Softmax,
    ModifiedSoftmax,
    ASoftmax { m: u32 },
    #[serde(rename = "cosface")]
    CosFace { s: f64, m: f64 },
    #[serde(rename = "arcface")]
    ArcFace { s: f64, m: f64 },
    Atam,
}

// Flat form used for parsing so that parameters a loss does not take are rejected.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLossKind {
    kind: String,
    s: Option<f64>,
    m: Option<f64>,
}

impl TryFrom<RawLossKind> for LossKind {
    type Error = String;

    fn try_from(raw: RawLossKind) -> std::result::Result<Self, String> {
        let none = |kind: LossKind| match (raw.s, raw.m) {
            (None, None) => Ok(kind),
            _ => Err(format!("loss `{}` takes no parameters", raw.kind)),
        };
        let margin = || raw.m.ok_or_else(|| format!("loss `{}` requires `m`", raw.kind));
        match raw.kind.as_str() {
            "softmax" => none(LossKind::Softmax),
            "modified_softmax" => none(LossKind::ModifiedSoftmax),
            "atam" => none(LossKind::Atam),
            "a_softmax" => {
                if raw.s.is_some() {
                    return Err("loss `a_softmax` takes no scale".into());
                }
                let m = margin()?;
                if m.fract() != 0.0 || !(1.0..=u32::MAX as f64).contains(&m) {
                    return Err("A-Softmax margin must be a positive integer".into());
                }
                Ok(LossKind::ASoftmax { m: m as u32 })
            }
            "cosface" => Ok(LossKind::CosFace {
                s: raw.s.unwrap_or(DEFAULT_SCALE),
                m: margin()?,
            }),
            "arcface" => Ok(LossKind::ArcFace {
                s: raw.s.unwrap_or(DEFAULT_SCALE),
                m: margin()?,
            }),
            other => Err(format!("unknown loss kind `{other}`")),
        }
    }
}

impl LossKind {
    pub fn name(&self) -> String {
        match self {
            LossKind::Softmax => "softmax".into(),
            LossKind::ModifiedSoftmax => "modified_softmax".into(),
            LossKind::ASoftmax { m } => format!("a_softmax(m={m})"),
            LossKind::CosFace { s, m } => format!("cosface(s={s},m={m})"),
            LossKind::ArcFace { s, m } => format!("arcface(s={s},m={m})"),
            LossKind::Atam => "atam".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.into()));
        match *self {
            LossKind::ASoftmax { m } if m < 1 => bad("A-Softmax margin must be >= 1"),
            LossKind::CosFace { s, m } | LossKind::ArcFace { s, m } if !(s > 0.0) || !(m >= 0.0) => {
                bad("scale must be > 0 and margin >= 0")
            }
            LossKind::ArcFace { m, .. } if m >= PI => bad("ArcFace margin must be < pi"),
            _ => Ok(()),
        }
    }

    pub fn uses_bias(&self) -> bool {
        matches!(self, LossKind::Softmax)
    }

    pub fn uses_margins(&self) -> bool {
        matches!(self, LossKind::Atam)
    }
}

/// The A-Softmax angle function: `(-1)^k cos(mθ) - 2k` on `[kπ/m, (k+1)π/m]`.
pub fn a_softmax_psi(theta: f64, m: u32) -> Result<f64> {
    check_theta(theta)?;
    Ok(psi_and_derivative(theta, m).0)
}

/// Derivative of [`a_softmax_psi`] w.r.t. `theta`.
pub fn a_softmax_psi_derivative(theta: f64, m: u32) -> Result<f64> {
    check_theta(theta)?;
    Ok(psi_and_derivative(theta, m).1)
}

fn check_theta(theta: f64) -> Result<()> {
    if (0.0..=PI).contains(&theta) {
        Ok(())
    } else {
        Err(Error::AngleOutOfRange(theta))
    }
}

fn psi_and_derivative(theta: f64, m: u32) -> (f64, f64) {
    let mf = f64::from(m.max(1));
    let k = ((mf * theta / PI).floor() as u32).min(m.max(1) - 1);
    let sign = if k.is_multiple_of(2) { 1.0 } else { -1.0 };
    let value = sign * (mf * theta).cos() - 2.0 * f64::from(k);
    let derivative = -sign * mf * (mf * theta).sin();
    (value, derivative)
}

/// Cross-entropy of `W^T z_i + b` (`W` is `d × M`, unconstrained).
pub fn softmax_ce(z: &Matrix, w: &Matrix, bias: &[f64], labels: &[usize]) -> Result<LossOutput> {
    let (n, d, m) = check_shapes(z, w, labels)?;
    if bias.len() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            actual: bias.len(),
        });
    }
    let wt = w.transpose();
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut d_z = Matrix::zeros(n, d);
    let mut d_wt = Matrix::zeros(m, d);
    let mut d_bias = vec![0.0; m];
    let mut logits = vec![0.0; m];
    for i in 0..n {
        let zi = z.row(i);
        for (j, l) in logits.iter_mut().enumerate() {
            *l = dot(zi, wt.row(j)) + bias[j];
        }
        let y = labels[i];
        let ce = cross_entropy(&logits, y)?;
        loss += ce;
        for j in 0..m {
            let gamma = ((logits[j] - logits[y] - ce).exp() - f64::from(j == y)) * inv_n;
            d_bias[j] += gamma;
            for (dz, wv) in d_z.row_mut(i).iter_mut().zip(wt.row(j)) {
                *dz += gamma * wv;
            }
            for (dw, zv) in d_wt.row_mut(j).iter_mut().zip(zi) {
                *dw += gamma * zv;
            }
        }
    }
    Ok(LossOutput {
        loss: loss * inv_n,
        d_z,
        d_w: d_wt.transpose(),
        d_bias: Some(d_bias),
        d_margins: Matrix::zeros(m, m),
    })
}

pub fn modified_softmax(z: &Matrix, w_unit: &Matrix, labels: &[usize]) -> Result<LossOutput> {
    angular_loss(z, w_unit, labels, Angular::Modified)
}

pub fn a_softmax(z: &Matrix, w_unit: &Matrix, labels: &[usize], m: u32) -> Result<LossOutput> {
    if m < 1 {
        return Err(Error::InvalidConfig("A-Softmax margin must be >= 1".into()));
    }
    angular_loss(z, w_unit, labels, Angular::ASoftmax(m))
}

/// Softmax over `s · cos θ` with internally normalized embeddings.
pub fn normalized_softmax(z: &Matrix, w_unit: &Matrix, labels: &[usize], s: f64) -> Result<LossOutput> {
    check_scale(s, 0.0)?;
    angular_loss(z, w_unit, labels, Angular::CosFace { s, m: 0.0 })
}

pub fn cosface(z: &Matrix, w_unit: &Matrix, labels: &[usize], s: f64, m: f64) -> Result<LossOutput> {
    check_scale(s, m)?;
    angular_loss(z, w_unit, labels, Angular::CosFace { s, m })
}

/// Target angle `θ + m` is clamped to `π`.
pub fn arcface(z: &Matrix, w_unit: &Matrix, labels: &[usize], s: f64, m: f64) -> Result<LossOutput> {
    check_scale(s, m)?;
    angular_loss(z, w_unit, labels, Angular::ArcFace { s, m })
}

pub fn atam(z: &Matrix, w_unit: &Matrix, labels: &[usize], margins: &MarginMatrix) -> Result<LossOutput> {
    let m = w_unit.cols();
    if margins.classes() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            actual: margins.classes(),
        });
    }
    for r in 0..m {
        for c in 0..m {
            let v = margins.get(r, c);
            if !(v >= 1.0 && v.is_finite()) {
                return Err(Error::InvalidMargin { row: r, col: c, value: v });
            }
        }
    }
    angular_loss(z, w_unit, labels, Angular::Atam(margins))
}

/// Dispatches on a [`LossKind`]. `bias` is used by the plain softmax only; `margins` by ATAM only.
pub fn evaluate(
    kind: &LossKind,
    z: &Matrix,
    w: &Matrix,
    bias: &[f64],
    labels: &[usize],
    margins: Option<&MarginMatrix>,
) -> Result<LossOutput> {
    match *kind {
        LossKind::Softmax => softmax_ce(z, w, bias, labels),
        LossKind::ModifiedSoftmax => modified_softmax(z, w, labels),
        LossKind::ASoftmax { m } => a_softmax(z, w, labels, m),
        LossKind::CosFace { s, m } => cosface(z, w, labels, s, m),
        LossKind::ArcFace { s, m } => arcface(z, w, labels, s, m),
        LossKind::Atam => match margins {
            Some(mm) => atam(z, w, labels, mm),
            None => atam(z, w, labels, &MarginMatrix::ones(w.cols())),
        },
    }
}

fn check_scale(s: f64, m: f64) -> Result<()> {
    if s > 0.0 && m >= 0.0 && s.is_finite() && m.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("need s > 0 and m >= 0, got s={s}, m={m}")))
    }
}

fn check_shapes(z: &Matrix, w: &Matrix, labels: &[usize]) -> Result<(usize, usize, usize)> {
    let (n, d, m) = (z.rows(), z.cols(), w.cols());
    if n == 0 {
        return Err(Error::EmptyVector);
    }
    if w.rows() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: w.rows(),
        });
    }
    if labels.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: labels.len(),
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= m) {
        return Err(Error::LabelOutOfRange { label, classes: m });
    }
    Ok((n, d, m))
}

#[derive(Clone, Copy)]
enum Angular<'a> {
    Modified,
    ASoftmax(u32),
    CosFace { s: f64, m: f64 },
    ArcFace { s: f64, m: f64 },
    Atam(&'a MarginMatrix),
}

/// Per-class transform of the cosine: value, d/dc, and d/d(margin) for ATAM.
struct Mapped {
    value: f64,
    d_cos: f64,
    d_margin: f64,
}

impl Angular<'_> {
    fn fixed_scale(&self) -> Option<f64> {
        match *self {
            Angular::CosFace { s, .. } | Angular::ArcFace { s, .. } => Some(s),
            _ => None,
        }
    }

    fn map(&self, cos: f64, clamped: bool, is_target: bool, j: usize, y: usize) -> Mapped {
        let plain = Mapped {
            value: cos,
            d_cos: if clamped { 0.0 } else { 1.0 },
            d_margin: 0.0,
        };
        // dθ/dc = -1/sin θ; zero when clamping is active.
        let theta = || cos.acos();
        match *self {
            Angular::Modified => plain,
            Angular::ASoftmax(m) if is_target => {
                let t = theta();
                let (value, dpsi) = psi_and_derivative(t, m);
                Mapped {
                    value,
                    d_cos: if clamped { 0.0 } else { -dpsi / t.sin() },
                    d_margin: 0.0,
                }
            }
            Angular::CosFace { m, .. } if is_target => Mapped {
                value: cos - m,
                ..plain
            },
            Angular::ArcFace { m, .. } if is_target => {
                let t = theta();
                if t + m >= PI {
                    Mapped {
                        value: -1.0,
                        d_cos: 0.0,
                        d_margin: 0.0,
                    }
                } else {
                    Mapped {
                        value: (t + m).cos(),
                        d_cos: if clamped { 0.0 } else { (t + m).sin() / t.sin() },
                        d_margin: 0.0,
                    }
                }
            }
            Angular::Atam(margins) if !is_target => {
                let mm = margins.get(j, y);
                let t = theta();
                let (sin_q, cos_q) = (t / mm).sin_cos();
                Mapped {
                    value: cos_q,
                    d_cos: if clamped { 0.0 } else { sin_q / (mm * t.sin()) },
                    d_margin: sin_q * t / (mm * mm),
                }
            }
            _ => plain,
        }
    }
}

fn angular_loss(z: &Matrix, w_unit: &Matrix, labels: &[usize], kind: Angular<'_>) -> Result<LossOutput> {
    let (n, d, m) = check_shapes(z, w_unit, labels)?;
    let wt = w_unit.transpose();
    for j in 0..m {
        let nrm = norm(wt.row(j));
        if (nrm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::NonUnitWeight { column: j, norm: nrm });
        }
    }
    let inv_n = 1.0 / n as f64;
    let fixed_scale = kind.fixed_scale();
    let mut loss = 0.0;
    let mut d_z = Matrix::zeros(n, d);
    let mut d_wt = Matrix::zeros(m, d);
    let mut d_margins = Matrix::zeros(m, m);
    let mut mapped = Vec::with_capacity(m);
    let mut logits = vec![0.0; m];
    let mut cosines = vec![0.0; m];
    for i in 0..n {
        let zi = z.row(i);
        let y = labels[i];
        let r = norm(zi);
        if !(r > 0.0 && r.is_finite()) {
            return Err(Error::DegenerateVector);
        }
        let scale = fixed_scale.unwrap_or(r);
        mapped.clear();
        for j in 0..m {
            let (c, clamped) = clamp_cos(dot(zi, wt.row(j)) / r);
            cosines[j] = c;
            let mp = kind.map(c, clamped, j == y, j, y);
            logits[j] = scale * mp.value;
            mapped.push(mp);
        }
        let ce = cross_entropy(&logits, y)?;
        loss += ce;

        let dz = d_z.row_mut(i);
        for j in 0..m {
            let gamma = ((logits[j] - logits[y] - ce).exp() - f64::from(j == y)) * inv_n;
            if gamma == 0.0 {
                continue;
            }
            let mp = &mapped[j];
            // logit = scale(r) · g(c),  c = <z, w_j> / r
            let d_r = if fixed_scale.is_none() { mp.value } else { 0.0 };
            let d_c = scale * mp.d_cos;
            let coef_w = gamma * d_c / r;
            let coef_z = gamma * (d_r / r - d_c * cosines[j] / r / r);
            for ((dzk, zk), wk) in dz.iter_mut().zip(zi).zip(wt.row(j)) {
                *dzk += coef_w * wk + coef_z * zk;
            }
            for (dwk, zk) in d_wt.row_mut(j).iter_mut().zip(zi) {
                *dwk += coef_w * zk;
            }
            if j != y && mp.d_margin != 0.0 {
                let g = gamma * scale * mp.d_margin;
                let (a, b) = (j.min(y), j.max(y));
                d_margins[(a, b)] += g;
            }
        }
    }
    for a in 0..m {
        for b in a + 1..m {
            d_margins[(b, a)] = d_margins[(a, b)];
        }
    }
    Ok(LossOutput {
        loss: loss * inv_n,
        d_z,
        d_w: d_wt.transpose(),
        d_bias: None,
        d_margins,
    })
}
