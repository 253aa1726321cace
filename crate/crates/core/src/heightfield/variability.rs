//! Dataset variability from the leading principal-component variances.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::{GridMap, HeightfieldError, MapDataset, LAYERS};

/// Largest flattened vector length produced by [`default_downsample`].
pub const MAX_FLAT_DIM: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimator {
    /// Divide by n − 1.
    Sample,
    /// Divide by n.
    Population,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariabilityParams {
    /// Number of leading components summed.
    pub components: usize,
    /// Average-pool factor applied to each layer before flattening.
    pub downsample: usize,
    /// Reference variance mapping raw variability onto [0, 1].
    pub reference: f64,
}

/// Smallest pooling factor keeping the flattened two-layer vector within
/// [`MAX_FLAT_DIM`] entries.
pub fn default_downsample(width: usize, height: usize) -> usize {
    (1..=width.max(height))
        .find(|d| LAYERS * width.div_ceil(*d) * height.div_ceil(*d) <= MAX_FLAT_DIM)
        .unwrap_or(width.max(height))
}

/// Average-pool both layers by `d` (edge blocks average the cells they
/// contain) and concatenate terrain then canopy.
pub fn flatten_pooled(map: &GridMap, d: usize) -> Vec<f64> {
    let (w, h) = (map.width(), map.height());
    let (pw, ph) = (w.div_ceil(d), h.div_ceil(d));
    let mut out = Vec::with_capacity(LAYERS * pw * ph);
    for layer in [map.terrain(), map.canopy()] {
        for by in 0..ph {
            for bx in 0..pw {
                let (mut sum, mut count) = (0.0, 0usize);
                for y in by * d..((by + 1) * d).min(h) {
                    for x in bx * d..((bx + 1) * d).min(w) {
                        sum += layer[y * w + x] as f64;
                        count += 1;
                    }
                }
                out.push(sum / count as f64);
            }
        }
    }
    out
}

/// Sum of the `p` largest eigenvalues of the covariance of `vectors`.
///
/// The eigenproblem is solved on whichever of the n×n Gram matrix or the
/// D×D covariance is smaller; both share their nonzero spectrum.
pub fn raw_variability(vectors: &[Vec<f64>], p: usize, estimator: Estimator) -> Result<f64, HeightfieldError> {
    let n = vectors.len();
    if n < 2 {
        return Err(HeightfieldError::TooFewRecords { need: 2, have: n });
    }
    let dim = vectors[0].len();
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(HeightfieldError::ShapeMismatch);
    }
    if p == 0 || dim < p {
        return Err(HeightfieldError::BadVariabilityParams(format!(
            "need 1 <= p <= dimension, got p = {p}, dimension = {dim}"
        )));
    }
    let denom = match estimator {
        Estimator::Sample => (n - 1) as f64,
        Estimator::Population => n as f64,
    };
    let mut mean = vec![0.0; dim];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, dim, |i, j| vectors[i][j] - mean[j]);
    if centered.iter().all(|&v| v == 0.0) {
        return Ok(0.0);
    }
    let gram = if n <= dim {
        &centered * centered.transpose()
    } else {
        centered.transpose() * &centered
    } / denom;
    let mut eig: Vec<f64> = SymmetricEigen::new(gram)
        .eigenvalues
        .iter()
        .map(|&e| e.max(0.0))
        .collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    Ok(eig.iter().take(p).sum())
}

/// Normalized dataset variability Λ_var ∈ [0, 1].
pub fn dataset_variability(dataset: &MapDataset, params: &VariabilityParams) -> Result<f64, HeightfieldError> {
    if !(params.reference.is_finite() && params.reference > 0.0) {
        return Err(HeightfieldError::BadVariabilityParams(format!(
            "reference variance must be positive, got {}",
            params.reference
        )));
    }
    if params.downsample == 0 {
        return Err(HeightfieldError::BadVariabilityParams("downsample factor 0".into()));
    }
    let vectors: Vec<Vec<f64>> = dataset
        .maps()
        .map(|m| flatten_pooled(m, params.downsample))
        .collect();
    let raw = raw_variability(&vectors, params.components, Estimator::Sample)?;
    Ok((raw / params.reference).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heightfield::EnvRecord;

    fn const_map(v: f32, id: u64) -> GridMap {
        GridMap::bare(8, 8, 0.5, vec![v; 64], id).unwrap()
    }

    #[test]
    fn identical_maps_give_zero() {
        let ds = MapDataset::from_maps((0..4).map(|i| const_map(1.5, i)).collect(), "t").unwrap();
        let p = VariabilityParams { components: 3, downsample: 2, reference: 1.0 };
        assert_eq!(dataset_variability(&ds, &p).unwrap(), 0.0);
    }

    #[test]
    fn two_point_example() {
        // centered points are ±1 in 4 dims: top eigenvalue 2·4/(2−1) = 8
        let v = vec![vec![0.0; 4], vec![2.0; 4]];
        let raw = raw_variability(&v, 1, Estimator::Sample).unwrap();
        assert!((raw - 8.0).abs() < 1e-12);
        assert!(((raw / 8.0).min(1.0) - 1.0).abs() < 1e-12);
        let pop = raw_variability(&v, 1, Estimator::Population).unwrap();
        assert!((pop - 4.0).abs() < 1e-12);
    }

    #[test]
    fn downsample_default_bounds_dimension() {
        assert_eq!(default_downsample(32, 32), 2);
        assert_eq!(default_downsample(8, 8), 1);
        assert_eq!(default_downsample(16, 16), 1);
        assert_eq!(default_downsample(64, 64), 4);
        for (w, h) in [(33, 17), (100, 40), (9, 200)] {
            let d = default_downsample(w, h);
            assert!(2 * w.div_ceil(d) * h.div_ceil(d) <= MAX_FLAT_DIM);
        }
    }

    #[test]
    fn pooling_averages_blocks() {
        let t: Vec<f32> = (0..64).map(|i| (i % 8) as f32).collect();
        let m = GridMap::bare(8, 8, 0.5, t, 0).unwrap();
        let f = flatten_pooled(&m, 2);
        assert_eq!(f.len(), 2 * 16);
        assert_eq!(&f[..4], &[0.5, 2.5, 4.5, 6.5]);
    }

    #[test]
    fn rejects_bad_params() {
        let ds = MapDataset::from_maps(vec![const_map(0.0, 0)], "t").unwrap();
        let p = VariabilityParams { components: 1, downsample: 1, reference: 1.0 };
        assert!(matches!(
            dataset_variability(&ds, &p),
            Err(HeightfieldError::TooFewRecords { .. })
        ));
        let mut ds2 = ds.clone();
        ds2.push(EnvRecord::new(const_map(1.0, 1), "t")).unwrap();
        let too_many = VariabilityParams { components: 129, ..p };
        assert!(dataset_variability(&ds2, &too_many).is_err());
        let bad_ref = VariabilityParams { reference: 0.0, ..p };
        assert!(dataset_variability(&ds2, &bad_ref).is_err());
    }

    #[test]
    fn uses_covariance_branch_when_n_exceeds_dim() {
        let v: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, (i * i) as f64 * 0.1]).collect();
        let a = raw_variability(&v, 2, Estimator::Sample).unwrap();
        // total variance = trace of the covariance
        let var = |j: usize| {
            let m = v.iter().map(|x| x[j]).sum::<f64>() / 6.0;
            v.iter().map(|x| (x[j] - m).powi(2)).sum::<f64>() / 5.0
        };
        assert!((a - (var(0) + var(1))).abs() < 1e-10);
    }
}
