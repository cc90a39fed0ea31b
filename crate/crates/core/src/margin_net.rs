//! Attribute branch: a three-layer MLP mapping a pair of class attribute vectors to a margin `>= 1`.
//!
//! The pair is concatenated in canonical order (lexicographically smaller vector first) so the
//! margin is symmetric in its arguments. The final pre-activation goes through `ReLU(x) + 1`.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attributes::AttributeTable;
use crate::error::{Error, Result};
use crate::layers::{Dense, Mlp, MlpCache, Parameters};
use crate::numerics::Matrix;

pub const DEFAULT_MARGIN_HIDDEN: [usize; 2] = [32, 32];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginNet {
    mlp: Mlp,
}

/// Activations of one or more `margin_forward` evaluations.
#[derive(Debug, Clone)]
pub struct MarginCache {
    inner: MlpCache,
}

/// Pairwise margins for `M` classes. Symmetric, every entry `>= 1`, diagonal `1`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginMatrix {
    values: Matrix,
}

impl MarginMatrix {
    pub fn new(values: Matrix) -> Result<Self> {
        if values.rows() != values.cols() {
            return Err(Error::DimensionMismatch {
                expected: values.rows(),
                actual: values.cols(),
            });
        }
        for r in 0..values.rows() {
            for c in 0..values.cols() {
                let v = values[(r, c)];
                if !(v >= 1.0 && v.is_finite()) {
                    return Err(Error::InvalidMargin { row: r, col: c, value: v });
                }
            }
        }
        Ok(MarginMatrix { values })
    }

    pub fn ones(classes: usize) -> Self {
        let mut values = Matrix::zeros(classes, classes);
        values.as_mut_slice().fill(1.0);
        MarginMatrix { values }
    }

    /// Builds a symmetric matrix from upper-triangle entries; diagonal is 1.
    pub fn from_fn(classes: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut values = Matrix::zeros(classes, classes);
        for j in 0..classes {
            values[(j, j)] = 1.0;
            for y in j + 1..classes {
                let v = f(j, y);
                values[(j, y)] = v;
                values[(y, j)] = v;
            }
        }
        MarginMatrix::new(values)
    }

    pub fn classes(&self) -> usize {
        self.values.rows()
    }

    pub fn get(&self, j: usize, y: usize) -> f64 {
        self.values[(j, y)]
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.values
    }
}

/// Margins for every unordered class pair plus the activations needed for backprop.
#[derive(Debug, Clone)]
pub struct MarginBatch {
    pub margins: MarginMatrix,
    pairs: Vec<(usize, usize)>,
    cache: MarginCache,
}

/// Concatenates two attribute vectors with the lexicographically smaller one first.
pub fn canonical_concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    let order = a
        .iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| *o != Ordering::Equal)
        .unwrap_or(Ordering::Equal);
    let (first, second) = if order == Ordering::Greater { (b, a) } else { (a, b) };
    let mut out = Vec::with_capacity(a.len() + b.len());
    out.extend_from_slice(first);
    out.extend_from_slice(second);
    out
}

#[inline]
fn relu_plus_one(x: f64) -> f64 {
    x.max(0.0) + 1.0
}

impl MarginNet {
    /// Hidden layers Glorot-uniform, final layer zero so every margin starts at exactly 1.
    pub fn new<R: Rng + ?Sized>(attr_dim: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        if attr_dim == 0 {
            return Err(Error::InvalidConfig("attribute dimension must be positive".into()));
        }
        let mut dims = vec![2 * attr_dim];
        dims.extend_from_slice(hidden);
        let mut layers: Vec<Dense> = dims.windows(2).map(|w| Dense::glorot(w[0], w[1], rng)).collect();
        layers.push(Dense::zeros(*dims.last().unwrap(), 1));
        Ok(MarginNet { mlp: Mlp::new(layers)? })
    }

    pub fn from_mlp(mlp: Mlp) -> Result<Self> {
        if mlp.output_dim() != 1 || !mlp.input_dim().is_multiple_of(2) {
            return Err(Error::InvalidConfig(
                "margin network needs an even input width and a scalar output".into(),
            ));
        }
        Ok(MarginNet { mlp })
    }

    pub fn attr_dim(&self) -> usize {
        self.mlp.input_dim() / 2
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    pub fn zero_grad(&self) -> Mlp {
        self.mlp.zeros_like()
    }

    fn check_dims(&self, a: &[f64], b: &[f64]) -> Result<()> {
        for v in [a, b] {
            if v.len() != self.attr_dim() {
                return Err(Error::DimensionMismatch {
                    expected: self.attr_dim(),
                    actual: v.len(),
                });
            }
        }
        Ok(())
    }

    pub fn margin_forward(&self, a_j: &[f64], a_y: &[f64]) -> Result<(f64, MarginCache)> {
        self.check_dims(a_j, a_y)?;
        let x = Matrix::from_vec(1, 2 * self.attr_dim(), canonical_concat(a_j, a_y))?;
        let inner = self.mlp.forward(&x)?;
        let margin = relu_plus_one(inner.output()[(0, 0)]);
        Ok((margin, MarginCache { inner }))
    }

    /// Gradient of the margin (scaled by `d_margin`) w.r.t. every MLP parameter.
    pub fn margin_backward(&self, cache: &MarginCache, d_margin: f64) -> Result<Mlp> {
        if cache.inner.batch_len() != 1 {
            return Err(Error::StaleCache);
        }
        let mut grad = self.zero_grad();
        self.backward_rows(cache, &[d_margin], &mut grad)?;
        Ok(grad)
    }

    fn backward_rows(&self, cache: &MarginCache, d_margins: &[f64], grad: &mut Mlp) -> Result<()> {
        let pre = cache.inner.output();
        if pre.rows() != d_margins.len() {
            return Err(Error::StaleCache);
        }
        let d_pre: Vec<f64> = d_margins
            .iter()
            .zip(pre.as_slice())
            .map(|(&d, &p)| if p > 0.0 { d } else { 0.0 })
            .collect();
        if d_pre.iter().all(|d| *d == 0.0) {
            // ReLU dead for every row (or zero upstream gradient); still validate the cache.
            if cache.inner.generation() != self.mlp.generation() {
                return Err(Error::StaleCache);
            }
            return Ok(());
        }
        let d_out = Matrix::from_vec(d_pre.len(), 1, d_pre)?;
        self.mlp.backward_into(&cache.inner, &d_out, grad)?;
        Ok(())
    }

    pub fn margin_matrix(&self, table: &AttributeTable) -> Result<MarginMatrix> {
        Ok(self.margin_batch(table)?.margins)
    }

    /// Evaluates every unordered class pair in one batched forward pass.
    pub fn margin_batch(&self, table: &AttributeTable) -> Result<MarginBatch> {
        let m = table.class_count();
        if table.attr_dim() != self.attr_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.attr_dim(),
                actual: table.attr_dim(),
            });
        }
        let pairs: Vec<(usize, usize)> = (0..m)
            .flat_map(|j| (j + 1..m).map(move |y| (j, y)))
            .collect();
        let width = 2 * self.attr_dim();
        let mut x = Vec::with_capacity(pairs.len() * width);
        for &(j, y) in &pairs {
            x.extend(canonical_concat(table.row(j), table.row(y)));
        }
        let x = Matrix::from_vec(pairs.len(), width, x)?;
        let inner = if pairs.is_empty() {
            None
        } else {
            Some(self.mlp.forward(&x)?)
        };
        let mut values = Matrix::zeros(m, m);
        for j in 0..m {
            values[(j, j)] = 1.0;
        }
        if let Some(inner) = &inner {
            for (p, &(j, y)) in pairs.iter().enumerate() {
                let v = relu_plus_one(inner.output()[(p, 0)]);
                values[(j, y)] = v;
                values[(y, j)] = v;
            }
        }
        let cache = match inner {
            Some(inner) => MarginCache { inner },
            None => MarginCache {
                inner: self.mlp.forward(&Matrix::zeros(0, width))?,
            },
        };
        Ok(MarginBatch {
            margins: MarginMatrix::new(values)?,
            pairs,
            cache,
        })
    }

    /// Routes a dense margin gradient (one value per unordered pair, read from the upper
    /// triangle) back into MLP parameter gradients.
    pub fn margin_batch_backward(&self, batch: &MarginBatch, d_margins: &Matrix) -> Result<Mlp> {
        let m = batch.margins.classes();
        if d_margins.rows() != m || d_margins.cols() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                actual: d_margins.rows(),
            });
        }
        let d: Vec<f64> = batch.pairs.iter().map(|&(j, y)| d_margins[(j, y)]).collect();
        let mut grad = self.zero_grad();
        if !d.is_empty() {
            self.backward_rows(&batch.cache, &d, &mut grad)?;
        }
        Ok(grad)
    }
}

impl Parameters for MarginNet {
    fn param_slices(&self) -> Vec<&[f64]> {
        self.mlp.param_slices()
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.mlp.param_slices_mut()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_net(k: usize, seed: u64) -> MarginNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = MarginNet::new(k, &[5, 4], &mut rng).unwrap();
        // Randomize the final layer so the ReLU is not dead everywhere.
        let mut rng2 = ChaCha8Rng::seed_from_u64(seed + 1000);
        let last = Dense::glorot(4, 1, &mut rng2);
        let mut layers = net.mlp.layers.clone();
        *layers.last_mut().unwrap() = last;
        layers.last_mut().unwrap().bias[0] = 1.5;
        net.mlp = Mlp::new(layers).unwrap();
        net
    }

    #[test]
    fn zero_final_layer_gives_unit_margin() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = MarginNet::new(3, &DEFAULT_MARGIN_HIDDEN, &mut rng).unwrap();
        let (m, _) = net.margin_forward(&[1.0, 0.0, 1.0], &[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(m, 1.0);
        let table = AttributeTable::new(vec![vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 0.0]]).unwrap();
        let mm = net.margin_matrix(&table).unwrap();
        assert_eq!(mm.as_matrix().as_slice(), &[1.0; 4]);
    }

    #[test]
    fn dimension_mismatch() {
        let net = random_net(3, 1);
        assert!(net.margin_forward(&[1.0, 0.0], &[0.0, 0.5, 1.0]).is_err());
    }

    #[test]
    fn matrix_entries_match_standalone_forward() {
        let net = random_net(4, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let rows: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..4).map(|_| rng.random::<f64>()).collect())
            .collect();
        let table = AttributeTable::new(rows).unwrap();
        let mm = net.margin_matrix(&table).unwrap();
        for j in 0..3 {
            assert_eq!(mm.get(j, j), 1.0);
            for y in 0..3 {
                assert_eq!(mm.get(j, y), mm.get(y, j));
                if j != y {
                    let (m, _) = net.margin_forward(table.row(j), table.row(y)).unwrap();
                    assert_eq!(mm.get(j, y), m);
                    assert!(m >= 1.0);
                }
            }
        }
    }

    #[test]
    fn dead_relu_gives_zero_gradient() {
        let mut net = random_net(2, 11);
        let last = net.mlp.layers.len() - 1;
        net.mlp.layers[last].bias[0] = -100.0;
        let (m, cache) = net.margin_forward(&[0.2, 0.4], &[0.9, 0.1]).unwrap();
        assert_eq!(m, 1.0);
        let g = net.margin_backward(&cache, 1.0).unwrap();
        assert!(g.flatten().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let net = random_net(2, 12);
        let (_, cache) = net.margin_forward(&[0.2, 0.4], &[0.9, 0.1]).unwrap();
        let g = net.margin_backward(&cache, 0.0).unwrap();
        assert!(g.flatten().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn stale_cache_detected() {
        let mut net = random_net(2, 13);
        let (_, cache) = net.margin_forward(&[0.2, 0.4], &[0.9, 0.1]).unwrap();
        net.param_slices_mut()[0][0] += 0.1;
        assert!(matches!(net.margin_backward(&cache, 1.0), Err(Error::StaleCache)));
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in 0..5 {
            let mut net = random_net(3, 20 + seed);
            let a = [0.1, 0.8, 0.5];
            let b = [0.7, 0.2, 0.4];
            let (m0, cache) = net.margin_forward(&a, &b).unwrap();
            assert!(m0 > 1.0);
            let g = net.margin_backward(&cache, 1.0).unwrap().flatten();
            let base = net.flatten();
            let h = 1e-6;
            let mut max_rel: f64 = 0.0;
            for i in 0..base.len() {
                let mut p = base.clone();
                p[i] += h;
                net.assign_flat(&p);
                let plus = net.margin_forward(&a, &b).unwrap().0;
                p[i] -= 2.0 * h;
                net.assign_flat(&p);
                let minus = net.margin_forward(&a, &b).unwrap().0;
                let fd = (plus - minus) / (2.0 * h);
                let rel = (g[i] - fd).abs() / (g[i].abs() + fd.abs()).max(1e-12);
                if (g[i] - fd).abs() > 1e-10 {
                    max_rel = max_rel.max(rel);
                }
            }
            net.assign_flat(&base);
            assert!(max_rel < 1e-5, "seed {seed}: {max_rel}");
        }
    }

    #[test]
    fn batch_backward_equals_sum_of_single_backwards() {
        let net = random_net(2, 31);
        let table =
            AttributeTable::new(vec![vec![0.1, 0.9], vec![0.5, 0.5], vec![1.0, 0.0], vec![0.3, 0.3]])
                .unwrap();
        let batch = net.margin_batch(&table).unwrap();
        let mut d = Matrix::zeros(4, 4);
        let mut expected = vec![0.0; net.param_count()];
        let mut weight = 0.25;
        for j in 0..4 {
            for y in j + 1..4 {
                d[(j, y)] = weight;
                d[(y, j)] = weight;
                let (_, c) = net.margin_forward(table.row(j), table.row(y)).unwrap();
                let g = net.margin_backward(&c, weight).unwrap().flatten();
                expected.iter_mut().zip(&g).for_each(|(e, v)| *e += v);
                weight += 0.5;
            }
        }
        let got = net.margin_batch_backward(&batch, &d).unwrap().flatten();
        for (a, b) in got.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn margin_matrix_rejects_values_below_one() {
        let mut v = Matrix::identity(2);
        v[(0, 1)] = 0.5;
        v[(1, 0)] = 0.5;
        let err = MarginMatrix::new(v).unwrap_err();
        assert!(err.to_string().contains("invalid margin"));
    }

    proptest! {
        #[test]
        fn margin_symmetric_and_at_least_one(
            seed in 0u64..1000,
            a in prop::collection::vec(0.0..=1.0f64, 3),
            b in prop::collection::vec(0.0..=1.0f64, 3),
            bias in -2.0..2.0f64,
        ) {
            let mut net = random_net(3, seed);
            let last = net.mlp.layers.len() - 1;
            net.mlp.layers[last].bias[0] = bias;
            let (m_ab, _) = net.margin_forward(&a, &b).unwrap();
            let (m_ba, _) = net.margin_forward(&b, &a).unwrap();
            prop_assert_eq!(m_ab.to_bits(), m_ba.to_bits());
            prop_assert!(m_ab >= 1.0);
        }
    }
}
