//! Desk-scale feature extractor and the weight-normalized classifier head.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Mlp, MlpCache, Parameters};
use crate::losses::LossKind;
use crate::margin_net::MarginNet;
use crate::numerics::{dot, norm, Matrix};

pub const DEFAULT_HIDDEN: [usize; 2] = [64, 64];
pub const DEFAULT_EMBEDDING_DIM: usize = 16;

/// Fully connected encoder, ReLU between layers, linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    mlp: Mlp,
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    inner: MlpCache,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, hidden: &[usize], embedding_dim: usize, rng: &mut R) -> Result<Self> {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(embedding_dim);
        Ok(Encoder {
            mlp: Mlp::glorot(&dims, rng)?,
        })
    }

    pub fn from_mlp(mlp: Mlp) -> Self {
        Encoder { mlp }
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn embedding_dim(&self) -> usize {
        self.mlp.output_dim()
    }

    pub fn encode(&self, x: &[f64]) -> Result<(Vec<f64>, EncoderCache)> {
        let xm = Matrix::from_vec(1, x.len(), x.to_vec())?;
        let (z, cache) = self.encode_batch(&xm)?;
        Ok((z.into_vec(), cache))
    }

    /// Embeds every row of `x`.
    pub fn encode_batch(&self, x: &Matrix) -> Result<(Matrix, EncoderCache)> {
        let inner = self.mlp.forward(x)?;
        Ok((inner.output().clone(), EncoderCache { inner }))
    }

    pub fn encoder_backward(&self, cache: &EncoderCache, d_z: &Matrix) -> Result<Mlp> {
        let mut grad = self.mlp.zeros_like();
        self.mlp.backward_into(&cache.inner, d_z, &mut grad)?;
        Ok(grad)
    }
}

impl Parameters for Encoder {
    fn param_slices(&self) -> Vec<&[f64]> {
        self.mlp.param_slices()
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.mlp.param_slices_mut()
    }
}

/// Raw weights `V` (`d × M`); the classifier uses `W_j = V_j / ||V_j||`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierHead {
    raw: Matrix,
    #[serde(skip)]
    generation: u64,
}

impl PartialEq for ClassifierHead {
    fn eq(&self, other: &Self) -> bool {
        self.raw == other.raw
    }
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    generation: u64,
    norms: Vec<f64>,
    unit: Matrix,
}

impl ClassifierHead {
    /// Standard-normal raw columns.
    pub fn new<R: Rng + ?Sized>(embedding_dim: usize, classes: usize, rng: &mut R) -> Self {
        let mut raw = Matrix::zeros(embedding_dim, classes);
        for v in raw.as_mut_slice() {
            *v = StandardNormal.sample(rng);
        }
        ClassifierHead { raw, generation: 0 }
    }

    pub fn from_raw(raw: Matrix) -> Self {
        ClassifierHead { raw, generation: 0 }
    }

    pub fn raw(&self) -> &Matrix {
        &self.raw
    }

    pub fn embedding_dim(&self) -> usize {
        self.raw.rows()
    }

    pub fn classes(&self) -> usize {
        self.raw.cols()
    }

    pub fn head_weights(&self) -> Result<(Matrix, HeadCache)> {
        let (d, m) = (self.raw.rows(), self.raw.cols());
        let mut unit = Matrix::zeros(d, m);
        let mut norms = Vec::with_capacity(m);
        for j in 0..m {
            let col = self.raw.column(j);
            let n = norm(&col);
            if !(n > 0.0 && n.is_finite()) {
                return Err(Error::DegenerateVector);
            }
            for (k, v) in col.iter().enumerate() {
                unit[(k, j)] = v / n;
            }
            norms.push(n);
        }
        let cache = HeadCache {
            generation: self.generation,
            norms,
            unit: unit.clone(),
        };
        Ok((unit, cache))
    }

    /// Pulls a gradient w.r.t. the unit columns back to the raw columns:
    /// `dV_j = (I - w_j w_j^T) dW_j / ||V_j||`.
    pub fn head_backward(&self, cache: &HeadCache, d_w: &Matrix) -> Result<Matrix> {
        if cache.generation != self.generation
            || d_w.rows() != self.raw.rows()
            || d_w.cols() != self.raw.cols()
        {
            return Err(Error::StaleCache);
        }
        let mut d_v = Matrix::zeros(d_w.rows(), d_w.cols());
        for j in 0..d_w.cols() {
            let w = cache.unit.column(j);
            let g = d_w.column(j);
            let proj = dot(&w, &g);
            for k in 0..w.len() {
                d_v[(k, j)] = (g[k] - w[k] * proj) / cache.norms[j];
            }
        }
        Ok(d_v)
    }
}

impl Parameters for ClassifierHead {
    fn param_slices(&self) -> Vec<&[f64]> {
        vec![self.raw.as_slice()]
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.generation += 1;
        vec![self.raw.as_mut_slice()]
    }
}

/// Everything that is trained: encoder, head, softmax bias and the optional margin network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub encoder: Encoder,
    pub head: ClassifierHead,
    /// Only read by the biased softmax loss.
    pub bias: Vec<f64>,
    pub margin_net: Option<MarginNet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_embedding_dim")]
    pub embedding_dim: usize,
    #[serde(default = "default_margin_hidden")]
    pub margin_hidden: Vec<usize>,
}

fn default_hidden() -> Vec<usize> {
    DEFAULT_HIDDEN.to_vec()
}

fn default_embedding_dim() -> usize {
    DEFAULT_EMBEDDING_DIM
}

fn default_margin_hidden() -> Vec<usize> {
    crate::margin_net::DEFAULT_MARGIN_HIDDEN.to_vec()
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: default_hidden(),
            embedding_dim: default_embedding_dim(),
            margin_hidden: default_margin_hidden(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim < 2 {
            return Err(Error::InvalidConfig("embedding_dim must be >= 2".into()));
        }
        if self.hidden.iter().chain(&self.margin_hidden).any(|&h| h == 0) {
            return Err(Error::InvalidConfig("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

impl Model {
    /// Draws encoder, head and margin network in that order from `rng`.
    pub fn new<R: Rng + ?Sized>(
        cfg: &ModelConfig,
        input_dim: usize,
        classes: usize,
        attr_dim: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::new(input_dim, &cfg.hidden, cfg.embedding_dim, rng)?;
        let head = ClassifierHead::new(cfg.embedding_dim, classes, rng);
        let margin_net = attr_dim
            .map(|k| MarginNet::new(k, &cfg.margin_hidden, rng))
            .transpose()?;
        Ok(Model {
            encoder,
            head,
            bias: vec![0.0; classes],
            margin_net,
        })
    }

    pub fn classes(&self) -> usize {
        self.head.classes()
    }

    /// Classifier matrix as a loss sees it: raw `V` for the biased softmax, unit columns otherwise.
    pub fn classifier_weights(&self, kind: &LossKind) -> Result<(Matrix, Option<HeadCache>)> {
        if kind.uses_bias() {
            Ok((self.head.raw().clone(), None))
        } else {
            let (w, cache) = self.head.head_weights()?;
            Ok((w, Some(cache)))
        }
    }

    /// A gradient holder with the same shape and all entries zero.
    pub fn zeros_like(&self) -> Model {
        let mut g = self.clone();
        for s in g.param_slices_mut() {
            s.fill(0.0);
        }
        g
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>, config_hash: &str) -> Result<()> {
        let path = path.as_ref();
        let ckpt = CheckpointRef {
            format: CHECKPOINT_FORMAT,
            version: CHECKPOINT_VERSION,
            config_hash,
            model: self,
        };
        let text = serde_json::to_string_pretty(&ckpt).expect("model serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Returns the model and the config hash it was trained under.
    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, String)> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::UnreadableCheckpoint(format!("{}: {e}", path.display())))?;
        let ckpt: Checkpoint =
            serde_json::from_str(&text).map_err(|e| Error::UnreadableCheckpoint(e.to_string()))?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::UnreadableCheckpoint(format!(
                "unsupported format {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        ckpt.model.check_consistency()?;
        Ok((ckpt.model, ckpt.config_hash))
    }

    fn check_consistency(&self) -> Result<()> {
        let bad = |m: String| Err(Error::UnreadableCheckpoint(m));
        if self.encoder.embedding_dim() != self.head.embedding_dim() {
            return bad("encoder output and head dimensions differ".into());
        }
        if self.bias.len() != self.head.classes() {
            return bad("bias length differs from class count".into());
        }
        let shapes_ok = |mlp: &Mlp| {
            mlp.layers.iter().all(|l| {
                l.weight.as_slice().len() == l.weight.rows() * l.weight.cols()
                    && l.bias.len() == l.output_dim()
            }) && Mlp::new(mlp.layers.clone()).is_ok()
        };
        if !shapes_ok(self.encoder.mlp()) || !self.margin_net.as_ref().is_none_or(|m| shapes_ok(m.mlp())) {
            return bad("inconsistent layer shapes".into());
        }
        if self.head.raw().as_slice().len() != self.head.embedding_dim() * self.head.classes() {
            return bad("inconsistent head shape".into());
        }
        if !self.flatten().iter().all(|v| v.is_finite()) {
            return bad("non-finite parameters".into());
        }
        Ok(())
    }
}

pub const CHECKPOINT_FORMAT: &str = "atamlab-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize)]
struct CheckpointRef<'a> {
    format: &'a str,
    version: u32,
    config_hash: &'a str,
    model: &'a Model,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format: String,
    version: u32,
    config_hash: String,
    model: Model,
}

impl Parameters for Model {
    fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = self.encoder.param_slices();
        out.extend(self.head.param_slices());
        out.push(&self.bias);
        if let Some(m) = &self.margin_net {
            out.extend(m.param_slices());
        }
        out
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.encoder.param_slices_mut();
        out.extend(self.head.param_slices_mut());
        out.push(&mut self.bias);
        if let Some(m) = &mut self.margin_net {
            out.extend(m.param_slices_mut());
        }
        out
    }
}
