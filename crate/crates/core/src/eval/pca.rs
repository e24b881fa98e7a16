use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaResult {
    /// `[n x k]` coordinates of the centered data on the principal axes.
    pub projection: Vec<Vec<f64>>,
    /// Share of total variance per component, non-increasing.
    pub explained_variance_ratio: Vec<f64>,
    /// `[k x d]` unit principal axes.
    pub components: Vec<Vec<f64>>,
}

/// Projects rows of `embeddings` onto the top `k` principal axes. Each axis
/// is oriented so its largest-magnitude loading is positive.
pub fn pca_project(embeddings: &Array2<f64>, k: usize) -> Result<PcaResult> {
    let (n, d) = embeddings.dim();
    if n < 2 {
        return Err(Error::Input(format!("PCA needs at least 2 points, got {n}")));
    }
    if k == 0 || k > d {
        return Err(Error::Input(format!("cannot take {k} components of {d}-dimensional data")));
    }
    let mean = embeddings.mean_axis(ndarray::Axis(0)).unwrap();
    let centered = embeddings - &mean;
    let x = DMatrix::from_row_iterator(n, d, centered.iter().copied());
    let cov = x.transpose() * &x / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    if total <= 0.0 {
        return Err(Error::Degenerate("all points coincide; no variance to project".into()));
    }
    let mut components = Vec::with_capacity(k);
    let mut ratios = Vec::with_capacity(k);
    for &i in order.iter().take(k) {
        let mut axis: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
        let pivot = axis.iter().cloned().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if pivot < 0.0 {
            axis.iter_mut().for_each(|v| *v = -*v);
        }
        components.push(axis);
        ratios.push(eig.eigenvalues[i].max(0.0) / total);
    }
    let projection = centered
        .rows()
        .into_iter()
        .map(|row| components.iter().map(|c| row.iter().zip(c).map(|(a, b)| a * b).sum()).collect())
        .collect();
    Ok(PcaResult { projection, explained_variance_ratio: ratios, components })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn rank_one_data_has_one_component() {
        let pts = Array2::from_shape_fn((6, 3), |(i, j)| (i as f64 - 2.0) * [1.0, -2.0, 0.5][j] + [3.0, 1.0, -1.0][j]);
        let r = pca_project(&pts, 2).unwrap();
        assert!((r.explained_variance_ratio[0] - 1.0).abs() < 1e-9);
        assert!(r.explained_variance_ratio[1].abs() < 1e-9);
    }

    #[test]
    fn axis_aligned_data_projects_to_itself() {
        // Variances 4 and 1 along x and y.
        let pts = array![[2.0, 0.0], [-2.0, 0.0], [0.0, 1.0], [0.0, -1.0]];
        let r = pca_project(&pts, 2).unwrap();
        assert!((r.explained_variance_ratio[0] - 0.8).abs() < 1e-12);
        for (p, q) in r.projection.iter().zip(pts.rows()) {
            assert!((p[0].abs() - q[0].abs()).abs() < 1e-12);
            assert!((p[1].abs() - q[1].abs()).abs() < 1e-12);
        }
        assert!(r.components[0][0] > 0.0 && r.components[1][1] > 0.0);
    }

    #[test]
    fn preconditions() {
        assert!(pca_project(&array![[1.0, 2.0]], 1).is_err());
        assert!(pca_project(&array![[1.0, 2.0], [0.0, 1.0]], 3).is_err());
        assert!(matches!(pca_project(&array![[1.0, 2.0], [1.0, 2.0]], 1), Err(Error::Degenerate(_))));
    }

    proptest! {
        #[test]
        fn full_rank_projection_preserves_distances(
            vals in prop::collection::vec(-10.0f64..10.0, 12..=12),
        ) {
            let pts = Array2::from_shape_vec((4, 3), vals).unwrap();
            prop_assume!(pts.rows().into_iter().any(|r| r != pts.row(0)));
            let r = pca_project(&pts, 3).unwrap();
            for i in 0..4 {
                for j in 0..4 {
                    let orig: f64 = (&pts.row(i) - &pts.row(j)).mapv(|v| v * v).sum().sqrt();
                    let proj: f64 = r.projection[i].iter().zip(&r.projection[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                    prop_assert!((orig - proj).abs() < 1e-9);
                }
            }
            let ratios = &r.explained_variance_ratio;
            prop_assert!(ratios.windows(2).all(|w| w[0] >= w[1]));
        }
    }
}
