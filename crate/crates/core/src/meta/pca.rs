use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::MetaError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaResult {
    /// One row of `dims` coordinates per embedding.
    pub coordinates: Vec<Vec<f64>>,
    /// Share of total variance along each returned direction.
    pub explained_variance: Vec<f64>,
    /// Unit principal directions, largest-magnitude entry positive.
    pub directions: Vec<Vec<f64>>,
}

/// Projects mean-centred embeddings onto their top `dims` principal
/// directions.
pub fn pca_project(embeddings: &[Vec<f64>], dims: usize) -> Result<PcaResult, MetaError> {
    let n = embeddings.len();
    if n < 3 {
        return Err(MetaError::Method(format!("PCA needs at least 3 embeddings, got {n}")));
    }
    let d = embeddings[0].len();
    if d == 0 || embeddings.iter().any(|e| e.len() != d) {
        return Err(MetaError::Method("PCA needs non-empty embeddings of equal length".into()));
    }
    let mut x = DMatrix::from_fn(n, d, |i, j| embeddings[i][j]);
    for j in 0..d {
        let mean = x.column(j).mean();
        x.column_mut(j).add_scalar_mut(-mean);
    }
    let svd = x.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let total: f64 = svd.singular_values.iter().map(|s| s * s).sum();
    let scale = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));

    let mut directions = Vec::with_capacity(dims);
    let mut explained = Vec::with_capacity(dims);
    for k in 0..dims {
        let sv = order.get(k).map_or(0.0, |&i| svd.singular_values[i]);
        if total <= 0.0 || sv <= 1e-12 * scale * (n as f64).sqrt() {
            directions.push(vec![0.0; d]);
            explained.push(0.0);
            continue;
        }
        let mut dir: Vec<f64> = v_t.row(order[k]).iter().copied().collect();
        let lead = dir.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if lead < 0.0 {
            dir.iter_mut().for_each(|v| *v = -*v);
        }
        explained.push(sv * sv / total);
        directions.push(dir);
    }
    let coordinates = (0..n)
        .map(|i| {
            directions
                .iter()
                .map(|dir| x.row(i).iter().zip(dir).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect();
    Ok(PcaResult {
        coordinates,
        explained_variance: explained,
        directions,
    })
}
