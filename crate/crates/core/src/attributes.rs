//! Class-level attribute vectors.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One attribute vector in `[0, 1]^k` per class id `0..M`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeTable {
    attr_dim: usize,
    rows: Vec<Vec<f64>>,
}

impl AttributeTable {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let attr_dim = rows.first().map_or(0, Vec::len);
        if attr_dim == 0 {
            return Err(Error::InvalidConfig(
                "attribute table needs at least one class and one attribute".into(),
            ));
        }
        for (class, row) in rows.iter().enumerate() {
            if row.len() != attr_dim {
                return Err(Error::DimensionMismatch {
                    expected: attr_dim,
                    actual: row.len(),
                });
            }
            if let Some(&value) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::AttributeOutOfRange { class, value });
            }
        }
        Ok(AttributeTable { attr_dim, rows })
    }

    pub fn class_count(&self) -> usize {
        self.rows.len()
    }

    pub fn attr_dim(&self) -> usize {
        self.attr_dim
    }

    pub fn row(&self, class: usize) -> &[f64] {
        &self.rows[class]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Reads `class,a0,...,a{k-1}` with exactly one row per class.
    pub fn load(path: impl AsRef<Path>, expected_classes: usize) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut rows: Vec<Option<Vec<f64>>> = vec![None; expected_classes];
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::parse(path, 1, "missing header"))?;
        let attr_dim = parse_header(path, header, "class")?;
        for (idx, line) in lines {
            let line_no = idx + 1;
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != attr_dim + 1 {
                return Err(Error::parse(
                    path,
                    line_no,
                    format!("expected {} columns, found {}", attr_dim + 1, fields.len()),
                ));
            }
            let class: usize = fields[0]
                .parse()
                .map_err(|_| Error::parse(path, line_no, format!("bad class id {:?}", fields[0])))?;
            if class >= expected_classes {
                return Err(Error::LabelOutOfRange {
                    label: class,
                    classes: expected_classes,
                });
            }
            let values = parse_values(path, line_no, &fields[1..])?;
            if let Some(&value) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::AttributeOutOfRange { class, value });
            }
            if rows[class].is_some() {
                return Err(Error::DuplicateClass(class));
            }
            rows[class] = Some(values);
        }
        let rows = rows
            .into_iter()
            .enumerate()
            .map(|(c, r)| r.ok_or(Error::IncompleteAttributeTable(c)))
            .collect::<Result<Vec<_>>>()?;
        AttributeTable::new(rows)
    }

    /// Writes the class-level CSV format read by [`AttributeTable::load`].
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class");
        for a in 0..self.attr_dim {
            out.push_str(&format!(",a{a}"));
        }
        out.push('\n');
        for (class, row) in self.rows.iter().enumerate() {
            out.push_str(&class.to_string());
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Returns the number of `a*` columns after `first` in a header line.
pub(crate) fn parse_header(path: &Path, header: &str, first: &str) -> Result<usize> {
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.first() != Some(&first) {
        return Err(Error::parse(path, 1, format!("header must start with {first:?}")));
    }
    Ok(cols.len() - 1)
}

pub(crate) fn parse_values(path: &Path, line: usize, fields: &[&str]) -> Result<Vec<f64>> {
    fields
        .iter()
        .map(|f| {
            f.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::parse(path, line, format!("bad number {f:?}")))
        })
        .collect()
}

/// L1 distance between attribute vectors (Hamming distance on binary vectors).
pub fn attribute_discrepancy(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum())
}
