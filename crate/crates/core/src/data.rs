//! Synthetic attribute-driven datasets, CSV ingestion, stratified splits and verification pairs.
//!
//! Synthetic classes are built so that attribute geometry is planted in input space: class `c`
//! draws binary attributes `a_c ~ Bernoulli(0.5)^k`, its prototype is `p_c = G a_c + u_c` with a
//! fixed `G` (entries `N(0, 1/k)`) and a small offset `u_c ~ N(0, 0.1² I)`, and samples are
//! `p_c + N(0, σ² I)`. Classes with more differing attributes therefore sit further apart.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attributes::{parse_header, parse_values, AttributeTable};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Minimum samples per synthetic class.
pub const MIN_CLASS_SIZE: usize = 3;

const PROTOTYPE_OFFSET_STD: f64 = 0.1;

/// A deterministic RNG for one named purpose under a seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
    pub attributes: Option<AttributeTable>,
    pub split: Vec<Split>,
    classes: usize,
}

impl Dataset {
    /// Checks that labels are dense in `0..classes` and the attribute table (if any) covers them.
    pub fn new(
        features: Matrix,
        labels: Vec<usize>,
        ids: Vec<String>,
        attributes: Option<AttributeTable>,
        classes: usize,
    ) -> Result<Self> {
        if features.rows() != labels.len() || ids.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: features.rows(),
                actual: labels.len(),
            });
        }
        if labels.is_empty() {
            return Err(Error::InsufficientSamples("dataset is empty".into()));
        }
        let mut seen = vec![false; classes];
        for &l in &labels {
            if l >= classes {
                return Err(Error::LabelOutOfRange { label: l, classes });
            }
            seen[l] = true;
        }
        if let Some(c) = seen.iter().position(|s| !s) {
            return Err(Error::InsufficientSamples(format!("class {c} has no samples")));
        }
        if let Some(t) = &attributes {
            if t.class_count() != classes {
                return Err(Error::IncompleteAttributeTable(t.class_count().min(classes)));
            }
        }
        let split = vec![Split::Train; labels.len()];
        Ok(Dataset {
            features,
            labels,
            ids,
            attributes,
            split,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.classes];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }

    /// Subset by row indices (order preserved), tagged with `split`.
    pub fn subset(&self, indices: &[usize], split: Split) -> Dataset {
        Dataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            attributes: self.attributes.clone(),
            split: vec![split; indices.len()],
            classes: self.classes,
        }
    }

    /// Features CSV: `id,label,f0,...,f{D-1}`.
    pub fn features_csv(&self) -> String {
        let mut out = String::from("id,label");
        for f in 0..self.input_dim() {
            out.push_str(&format!(",f{f}"));
        }
        out.push('\n');
        for i in 0..self.len() {
            out.push_str(&format!("{},{}", self.ids[i], self.labels[i]));
            for v in self.features.row(i) {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub classes: usize,
    pub attr_dim: usize,
    pub input_dim: usize,
    /// Samples per class; the head-class size when `long_tail_exponent` is set.
    pub per_class: usize,
    #[serde(default)]
    pub long_tail_exponent: Option<f64>,
    pub sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 10,
            attr_dim: 6,
            input_dim: 16,
            per_class: 20,
            long_tail_exponent: None,
            sigma: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.classes < 2 {
            return bad("classes must be >= 2");
        }
        if self.attr_dim < 1 {
            return bad("attr_dim must be >= 1");
        }
        if self.input_dim < 1 {
            return bad("input_dim must be >= 1");
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad("sigma must be >= 0");
        }
        if self.per_class < MIN_CLASS_SIZE {
            return bad("per_class must be >= 3");
        }
        if let Some(e) = self.long_tail_exponent {
            if !(e >= 0.0 && e.is_finite()) {
                return bad("long_tail_exponent must be >= 0");
            }
        }
        Ok(())
    }

    /// `max(3, round(per_class · (c + 1)^(-exponent)))` for class `c`, or `per_class` when uniform.
    pub fn class_sizes(&self) -> Vec<usize> {
        (0..self.classes)
            .map(|c| match self.long_tail_exponent {
                None => self.per_class,
                Some(e) => {
                    let size = (self.per_class as f64 * ((c + 1) as f64).powf(-e)).round() as usize;
                    size.max(MIN_CLASS_SIZE)
                }
            })
            .collect()
    }
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let (m, k, d) = (cfg.classes, cfg.attr_dim, cfg.input_dim);

    let mut g_rng = stream_rng(cfg.seed, 1);
    let g_scale = 1.0 / (k as f64).sqrt();
    let g: Vec<f64> = (0..d * k)
        .map(|_| g_scale * { let v: f64 = StandardNormal.sample(&mut g_rng); v })
        .collect();

    let mut a_rng = stream_rng(cfg.seed, 2);
    let coin = Bernoulli::new(0.5).expect("valid probability");
    let attrs: Vec<Vec<f64>> = (0..m)
        .map(|_| (0..k).map(|_| f64::from(u8::from(coin.sample(&mut a_rng)))).collect())
        .collect();

    let mut u_rng = stream_rng(cfg.seed, 3);
    let offset = Normal::new(0.0, PROTOTYPE_OFFSET_STD).expect("valid std");
    let prototypes: Vec<Vec<f64>> = attrs
        .iter()
        .map(|a| {
            (0..d)
                .map(|r| {
                    let ga: f64 = (0..k).map(|c| g[r * k + c] * a[c]).sum();
                    ga + offset.sample(&mut u_rng)
                })
                .collect()
        })
        .collect();

    let mut x_rng = stream_rng(cfg.seed, 4);
    let sizes = cfg.class_sizes();
    let total: usize = sizes.iter().sum();
    let mut features = Vec::with_capacity(total * d);
    let mut labels = Vec::with_capacity(total);
    for (c, &n) in sizes.iter().enumerate() {
        for _ in 0..n {
            for &p in &prototypes[c] {
                let noise: f64 = StandardNormal.sample(&mut x_rng);
                features.push(p + cfg.sigma * noise);
            }
            labels.push(c);
        }
    }
    let ids = (0..total).map(|i| format!("s{i}")).collect();
    Dataset::new(
        Matrix::from_vec(total, d, features)?,
        labels,
        ids,
        Some(AttributeTable::new(attrs)?),
        m,
    )
}

/// Reads a features CSV and an optional attribute CSV (class-level `class,...` or per-image
/// `id,label,...`; per-image rows are averaged per class).
pub fn load_csv_dataset(features_path: impl AsRef<Path>, attributes_path: Option<&Path>) -> Result<Dataset> {
    let path = features_path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(path, 1, "missing header"))?;
    let cols = parse_header(path, header, "id")?;
    if cols < 2 || header.split(',').nth(1).map(str::trim) != Some("label") {
        return Err(Error::parse(path, 1, "header must be id,label,f0,..."));
    }
    let dim = cols - 1;
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut features = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != dim + 2 {
            return Err(Error::parse(
                path,
                line_no,
                format!("expected {} columns, found {}", dim + 2, fields.len()),
            ));
        }
        let label: usize = fields[1]
            .parse()
            .map_err(|_| Error::parse(path, line_no, format!("bad label {:?}", fields[1])))?;
        ids.push(fields[0].to_string());
        labels.push(label);
        features.extend(parse_values(path, line_no, &fields[2..])?);
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let attributes = attributes_path
        .map(|p| load_attribute_csv(p, classes))
        .transpose()?;
    Dataset::new(
        Matrix::from_vec(labels.len(), dim, features)?,
        labels,
        ids,
        attributes,
        classes,
    )
}

fn load_attribute_csv(path: &Path, classes: usize) -> Result<AttributeTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let first = text.lines().next().unwrap_or("");
    if first.split(',').next().map(str::trim) != Some("id") {
        return AttributeTable::load(path, classes);
    }
    let cols = parse_header(path, first, "id")?;
    if cols < 2 {
        return Err(Error::parse(path, 1, "header must be id,label,a0,..."));
    }
    let k = cols - 1;
    let mut sums = vec![vec![0.0; k]; classes];
    let mut counts = vec![0usize; classes];
    for (idx, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != k + 2 {
            return Err(Error::parse(
                path,
                line_no,
                format!("expected {} columns, found {}", k + 2, fields.len()),
            ));
        }
        let label: usize = fields[1]
            .parse()
            .map_err(|_| Error::parse(path, line_no, format!("bad label {:?}", fields[1])))?;
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let values = parse_values(path, line_no, &fields[2..])?;
        if let Some(&value) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::AttributeOutOfRange { class: label, value });
        }
        sums[label].iter_mut().zip(&values).for_each(|(s, v)| *s += v);
        counts[label] += 1;
    }
    let rows = sums
        .into_iter()
        .zip(&counts)
        .enumerate()
        .map(|(c, (row, &n))| {
            if n == 0 {
                Err(Error::IncompleteAttributeTable(c))
            } else {
                Ok(row.into_iter().map(|s| s / n as f64).collect())
            }
        })
        .collect::<Result<Vec<_>>>()?;
    AttributeTable::new(rows)
}

/// Stratified split: class `c` with `n` samples sends `round(n · fraction)` to test.
pub fn split_train_test(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidConfig("test_fraction must be in (0, 1)".into()));
    }
    let mut rng = stream_rng(seed, 5);
    let mut by_class = vec![Vec::new(); ds.classes()];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (c, mut idx) in by_class.into_iter().enumerate() {
        let n_test = (idx.len() as f64 * test_fraction).round() as usize;
        if n_test >= idx.len() {
            return Err(Error::InsufficientSamples(format!(
                "class {c} with {} samples would have no training samples",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((ds.subset(&train, Split::Train), ds.subset(&test, Split::Test)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pair {
    pub a: usize,
    pub b: usize,
    pub same: bool,
}

/// `num_pairs / 2` positive pairs and the rest negative, distinct where the pool allows,
/// shuffled into one list.
pub fn make_verification_pairs(ds: &Dataset, num_pairs: usize, seed: u64) -> Result<Vec<Pair>> {
    if num_pairs < 2 {
        return Err(Error::InvalidConfig("need at least 2 pairs".into()));
    }
    let n_pos = num_pairs / 2;
    let n_neg = num_pairs - n_pos;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.classes()];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let eligible: Vec<&Vec<usize>> = by_class.iter().filter(|v| v.len() >= 2).collect();
    if eligible.is_empty() {
        return Err(Error::InsufficientSamples(
            "no class has two samples for a positive pair".into(),
        ));
    }
    if by_class.iter().filter(|v| !v.is_empty()).count() < 2 {
        return Err(Error::InsufficientSamples("need two classes for negative pairs".into()));
    }
    let mut rng = stream_rng(seed, 6);
    let pos_pool: usize = eligible.iter().map(|v| v.len() * (v.len() - 1) / 2).sum();
    let n = ds.len();
    let neg_pool = n * (n - 1) / 2 - by_class.iter().map(|v| v.len() * v.len().saturating_sub(1) / 2).sum::<usize>();

    let mut pairs = Vec::with_capacity(num_pairs);
    let positives = sample_pairs(&mut rng, n_pos, pos_pool, |rng| {
        let class = eligible[rng.random_range(0..eligible.len())];
        let i = rng.random_range(0..class.len());
        let mut j = rng.random_range(0..class.len() - 1);
        if j >= i {
            j += 1;
        }
        (class[i], class[j])
    });
    pairs.extend(positives.into_iter().map(|(a, b)| Pair { a, b, same: true }));
    let negatives = sample_pairs(&mut rng, n_neg, neg_pool, |rng| loop {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if ds.labels[a] != ds.labels[b] {
            break (a, b);
        }
    });
    pairs.extend(negatives.into_iter().map(|(a, b)| Pair { a, b, same: false }));
    pairs.shuffle(&mut rng);
    Ok(pairs)
}

/// Draws `count` unordered pairs, distinct until the pool of size `pool` is exhausted.
fn sample_pairs(
    rng: &mut ChaCha8Rng,
    count: usize,
    pool: usize,
    mut draw: impl FnMut(&mut ChaCha8Rng) -> (usize, usize),
) -> Vec<(usize, usize)> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let (a, b) = draw(rng);
        let key = (a.min(b), a.max(b));
        if seen.len() < pool && !seen.insert(key) {
            continue;
        }
        out.push(key);
    }
    out
}
