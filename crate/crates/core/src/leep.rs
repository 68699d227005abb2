//! LEEP transferability score from a source model's output distributions on
//! target images and the target labels.

use std::path::Path;

use crate::error::{contract_err, Error, Result};

/// Marginals below this are smoothed.
pub const EPSILON: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct LeepInput {
    /// Row `i` is the source model's distribution over source classes `Z`.
    pub dummy_dist: Vec<Vec<f64>>,
    pub target_labels: Vec<usize>,
    pub num_target_classes: usize,
}

impl LeepInput {
    /// The target class count is `max(label) + 1`.
    pub fn new(dummy_dist: Vec<Vec<f64>>, target_labels: Vec<usize>) -> Result<Self> {
        let k = target_labels.iter().max().map_or(0, |m| m + 1);
        Self::with_classes(dummy_dist, target_labels, k)
    }

    pub fn with_classes(dummy_dist: Vec<Vec<f64>>, target_labels: Vec<usize>, num_target_classes: usize) -> Result<Self> {
        let input = Self { dummy_dist, target_labels, num_target_classes };
        input.validate()?;
        Ok(input)
    }

    pub fn len(&self) -> usize {
        self.target_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target_labels.is_empty()
    }

    pub fn source_classes(&self) -> usize {
        self.dummy_dist.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dummy_dist.len();
        if n == 0 || n != self.target_labels.len() {
            return contract_err(format!("{n} distributions for {} labels", self.target_labels.len()));
        }
        let z = self.source_classes();
        if z == 0 {
            return contract_err("distributions must have at least one source class");
        }
        for (i, row) in self.dummy_dist.iter().enumerate() {
            if row.len() != z {
                return contract_err(format!("row {i} has {} entries, expected {z}", row.len()));
            }
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return contract_err(format!("row {i} has a negative or non-finite entry"));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return contract_err(format!("row {i} sums to {s}"));
            }
        }
        if let Some(&l) = self.target_labels.iter().find(|&&l| l >= self.num_target_classes) {
            return contract_err(format!("label {l} outside {} target classes", self.num_target_classes));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalTable {
    /// `|Y| x |Z|`, entry `[y][z] = P(y | z)`.
    pub conditional: Vec<Vec<f64>>,
    pub marginal: Vec<f64>,
}

/// Empirical joint `P(y, z) = (1/n) sum_i N(x_i)_z [y_i = y]`, its source
/// marginal and the conditional. Columns whose marginal is below [`EPSILON`]
/// are smoothed towards uniform so they still sum to one.
pub fn empirical_conditional(input: &LeepInput) -> Result<ConditionalTable> {
    input.validate()?;
    let n = input.len() as f64;
    let (ny, nz) = (input.num_target_classes, input.source_classes());
    let mut joint = vec![vec![0.0; nz]; ny];
    for (row, &y) in input.dummy_dist.iter().zip(&input.target_labels) {
        for (j, &p) in joint[y].iter_mut().zip(row) {
            *j += p;
        }
    }
    for r in joint.iter_mut() {
        for v in r.iter_mut() {
            *v /= n;
        }
    }
    let marginal: Vec<f64> = (0..nz).map(|z| joint.iter().map(|r| r[z]).sum()).collect();
    let conditional = joint
        .iter()
        .map(|r| {
            (0..nz)
                .map(|z| {
                    if marginal[z] < EPSILON {
                        (r[z] + EPSILON / ny as f64) / (marginal[z] + EPSILON)
                    } else {
                        r[z] / marginal[z]
                    }
                })
                .collect()
        })
        .collect();
    Ok(ConditionalTable { conditional, marginal })
}

/// `(1/n) sum_i log(sum_z P(y_i | z) N(x_i)_z)`; never positive.
pub fn leep_score(input: &LeepInput) -> Result<f64> {
    let table = empirical_conditional(input)?;
    let total: f64 = input
        .dummy_dist
        .iter()
        .zip(&input.target_labels)
        .map(|(row, &y)| {
            let eep: f64 = table.conditional[y].iter().zip(row).map(|(c, p)| c * p).sum();
            eep.ln()
        })
        .sum();
    Ok((total / input.len() as f64).min(0.0))
}

/// Reads `z0,...,zK,label` rows (with that header).
pub fn read_leep_csv(path: &Path) -> Result<LeepInput> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let label_col = headers
        .iter()
        .position(|h| h == "label")
        .ok_or_else(|| Error::Config(format!("{}: no `label` column", path.display())))?;
    let (mut dist, mut labels) = (Vec::new(), Vec::new());
    for rec in r.records() {
        let rec = rec?;
        let mut row = Vec::with_capacity(rec.len() - 1);
        for (i, field) in rec.iter().enumerate() {
            if i == label_col {
                labels.push(field.trim().parse::<usize>().map_err(|_| Error::Config(format!("bad label `{field}`")))?);
            } else {
                row.push(field.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad probability `{field}`")))?);
            }
        }
        dist.push(row);
    }
    LeepInput::new(dist, labels).map_err(|e| match e {
        Error::Contract(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_leep_csv(path: &Path, input: &LeepInput) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
    let mut header: Vec<String> = (0..input.source_classes()).map(|z| format!("z{z}")).collect();
    header.push("label".into());
    w.write_record(&header)?;
    for (row, y) in input.dummy_dist.iter().zip(&input.target_labels) {
        let mut rec: Vec<String> = row.iter().map(|p| format!("{p:e}")).collect();
        rec.push(y.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
