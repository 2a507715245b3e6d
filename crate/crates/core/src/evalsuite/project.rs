//! Two-dimensional principal component view of an embedding table.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use super::table::EmbeddingTable;
use crate::datamodel::Domain;
use crate::error::{CopeError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    /// Coordinates of every table row on the top two principal axes.
    pub points: Vec<[f64; 2]>,
    /// Unit principal axes, largest variance first. Each axis is signed so
    /// that its largest-magnitude component is positive.
    pub axes: [Vec<f64>; 2],
    /// Variance along each axis.
    pub variances: [f64; 2],
}

#[derive(Serialize)]
struct CsvRow<'a> {
    row: usize,
    sample_id: &'a str,
    product_id: &'a str,
    domain: Domain,
    x: f64,
    y: f64,
}

pub fn project2d(table: &EmbeddingTable) -> Result<Projection> {
    let (n, d) = (table.len(), table.dim());
    if n == 0 || d < 2 {
        return Err(CopeError::Contract(format!("need rows and width >= 2, got {n} x {d}")));
    }
    let x = DMatrix::from_fn(n, d, |i, j| f64::from(table.row(i)[j]));
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let axis = |k: usize| -> Vec<f64> {
        let v = eig.eigenvectors.column(order[k]);
        let mut lead = 0;
        for j in 1..d {
            if v[j].abs() > v[lead].abs() {
                lead = j;
            }
        }
        let sign = if v[lead] < 0.0 { -1.0 } else { 1.0 };
        v.iter().map(|c| c * sign).collect()
    };
    let axes = [axis(0), axis(1)];
    let points = (0..n)
        .map(|i| {
            let r = centered.row(i);
            [0, 1].map(|k| r.iter().zip(&axes[k]).map(|(a, b)| a * b).sum())
        })
        .collect();
    Ok(Projection {
        points,
        variances: [eig.eigenvalues[order[0]].max(0.0), eig.eigenvalues[order[1]].max(0.0)],
        axes,
    })
}

/// Writes `row,sample_id,product_id,domain,x,y` with a header line.
pub fn write_projection_csv(table: &EmbeddingTable, proj: &Projection, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for (i, p) in proj.points.iter().enumerate() {
        let m = table.meta(i);
        w.serialize(CsvRow {
            row: i,
            sample_id: &m.sample_id,
            product_id: &m.product_id,
            domain: m.domain,
            x: p[0],
            y: p[1],
        })
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> CopeError {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => CopeError::Io(io),
            other => CopeError::Format(format!("{other:?}")),
        }
    } else {
        CopeError::Format(e.to_string())
    }
}
