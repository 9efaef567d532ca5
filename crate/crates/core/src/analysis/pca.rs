use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct PcaResult {
    /// `n × out_dims` projected coordinates.
    pub coords: Tensor<f64>,
    /// `out_dims × d`, one unit component per row (zero rows for padded components).
    pub components: Tensor<f64>,
    /// Eigenvalues of the population covariance, all `d` of them, descending.
    pub eigenvalues: Vec<f64>,
    pub mean: Vec<f64>,
}

/// Projects mean-centered points onto the top `out_dims` principal components.
///
/// The covariance divides by `n`. Components are ordered by eigenvalue and
/// each is signed so its largest-magnitude loading is positive. Components
/// with (numerically) zero variance are replaced by zero rows.
pub fn pca_project<T: Scalar>(points: &Tensor<T>, out_dims: usize) -> Result<PcaResult> {
    if points.rank() != 2 {
        return Err(Error::shape("pca points", &[0, 0], points.shape()));
    }
    let (n, d) = (points.rows(), points.cols());
    if out_dims > d {
        return Err(Error::Config(format!("cannot project {d}-d data onto {out_dims} components")));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        mean.iter_mut().zip(points.row(i)).for_each(|(m, v)| *m += v.as_f64());
    }
    if n > 0 {
        mean.iter_mut().for_each(|m| *m /= n as f64);
    }
    let centered = DMatrix::from_fn(n, d, |i, j| points.row(i)[j].as_f64() - mean[j]);
    let cov = if n > 0 {
        centered.transpose() * &centered / n as f64
    } else {
        DMatrix::zeros(d, d)
    };
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let scale = eigenvalues.first().copied().unwrap_or(0.0).abs().max(1.0);

    let mut components = vec![0.0; out_dims * d];
    for (r, &i) in order.iter().take(out_dims).enumerate() {
        if eigenvalues[r] <= 1e-12 * scale {
            continue;
        }
        let v = eig.eigenvectors.column(i);
        let mut lead = 0;
        for j in 1..d {
            if v[j].abs() > v[lead].abs() {
                lead = j;
            }
        }
        let sign = if v[lead] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..d {
            components[r * d + j] = sign * v[j];
        }
    }
    let comp = DMatrix::from_row_slice(out_dims, d, &components);
    let proj = &centered * comp.transpose();
    let mut coords = Vec::with_capacity(n * out_dims);
    for i in 0..n {
        for j in 0..out_dims {
            coords.push(proj[(i, j)]);
        }
    }
    Ok(PcaResult {
        coords: Tensor::new(vec![n, out_dims], coords)?,
        components: Tensor::new(vec![out_dims, d], components)?,
        eigenvalues: eigenvalues.into_iter().map(|e| e.max(0.0)).collect(),
        mean,
    })
}
