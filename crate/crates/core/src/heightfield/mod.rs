//! Two-layer heightfield environments and dataset bookkeeping.

mod io;
mod slope;
mod variability;

pub use io::{load_dataset_dir, load_map, load_meta, save_dataset_dir, save_map, save_meta, MapMeta};
pub use slope::slope_map;
pub use variability::{
    dataset_variability, default_downsample, flatten_pooled, raw_variability, Estimator,
    VariabilityParams,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MIN_DIM: usize = 8;
pub const LAYERS: usize = 2;

#[derive(Debug, Error)]
pub enum HeightfieldError {
    #[error("map dimensions {width}x{height} below minimum {MIN_DIM}")]
    TooSmall { width: usize, height: usize },
    #[error("resolution must be positive and finite, got {0}")]
    BadResolution(f32),
    #[error("layer length {got} does not match {width}x{height}")]
    LayerLength { got: usize, width: usize, height: usize },
    #[error("non-finite value in {layer} at ({x}, {y})")]
    NonFinite { layer: &'static str, x: usize, y: usize },
    #[error("canopy below terrain at ({x}, {y}): canopy {canopy} < terrain {terrain}")]
    CanopyBelowTerrain { x: usize, y: usize, canopy: f32, terrain: f32 },
    #[error("bad EHF1 file: {0}")]
    Format(String),
    #[error("normalization scale must be positive and finite")]
    BadScale,
    #[error("dataset needs at least {need} records, has {have}")]
    TooFewRecords { need: usize, have: usize },
    #[error("invalid variability parameters: {0}")]
    BadVariabilityParams(String),
    #[error("maps in dataset have mismatched dimensions")]
    ShapeMismatch,
    #[error("duplicate environment id {0}")]
    DuplicateId(u64),
    #[error("unknown environment id {0}")]
    UnknownId(u64),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("metadata error: {0}")]
    Meta(#[from] serde_json::Error),
}

pub type EnvId = u64;

/// A W×H raster with a terrain-elevation layer and a surface-canopy layer,
/// both in meters, stored row-major (`index = y * width + x`).
#[derive(Debug, Clone, PartialEq)]
pub struct GridMap {
    width: usize,
    height: usize,
    resolution: f32,
    terrain: Vec<f32>,
    canopy: Vec<f32>,
    pub id: EnvId,
}

impl GridMap {
    pub fn new(
        width: usize,
        height: usize,
        resolution: f32,
        terrain: Vec<f32>,
        canopy: Vec<f32>,
        id: EnvId,
    ) -> Result<Self, HeightfieldError> {
        let map = Self { width, height, resolution, terrain, canopy, id };
        map.validate()?;
        Ok(map)
    }

    /// A map with zero terrain and no plants.
    pub fn flat(width: usize, height: usize, resolution: f32, id: EnvId) -> Result<Self, HeightfieldError> {
        let n = width * height;
        Self::new(width, height, resolution, vec![0.0; n], vec![0.0; n], id)
    }

    /// A map whose canopy equals its terrain (no plants).
    pub fn bare(
        width: usize,
        height: usize,
        resolution: f32,
        terrain: Vec<f32>,
        id: EnvId,
    ) -> Result<Self, HeightfieldError> {
        let canopy = terrain.clone();
        Self::new(width, height, resolution, terrain, canopy, id)
    }

    pub fn validate(&self) -> Result<(), HeightfieldError> {
        let (w, h) = (self.width, self.height);
        if w < MIN_DIM || h < MIN_DIM {
            return Err(HeightfieldError::TooSmall { width: w, height: h });
        }
        if !(self.resolution.is_finite() && self.resolution > 0.0) {
            return Err(HeightfieldError::BadResolution(self.resolution));
        }
        for layer in [&self.terrain, &self.canopy] {
            if layer.len() != w * h {
                return Err(HeightfieldError::LayerLength { got: layer.len(), width: w, height: h });
            }
        }
        for i in 0..w * h {
            let (x, y) = (i % w, i / w);
            let (t, c) = (self.terrain[i], self.canopy[i]);
            if !t.is_finite() {
                return Err(HeightfieldError::NonFinite { layer: "terrain", x, y });
            }
            if !c.is_finite() {
                return Err(HeightfieldError::NonFinite { layer: "canopy", x, y });
            }
            if c < t {
                return Err(HeightfieldError::CanopyBelowTerrain { x, y, canopy: c, terrain: t });
            }
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn resolution(&self) -> f32 {
        self.resolution
    }

    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    pub fn terrain(&self) -> &[f32] {
        &self.terrain
    }

    pub fn canopy(&self) -> &[f32] {
        &self.canopy
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn terrain_at(&self, x: usize, y: usize) -> f32 {
        self.terrain[self.index(x, y)]
    }

    #[inline]
    pub fn canopy_at(&self, x: usize, y: usize) -> f32 {
        self.canopy[self.index(x, y)]
    }

    pub fn same_shape(&self, other: &GridMap) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Layer-major view: terrain cells followed by canopy cells.
    pub fn layers_f64(&self) -> Vec<f64> {
        self.terrain
            .iter()
            .chain(self.canopy.iter())
            .map(|&v| v as f64)
            .collect()
    }

    /// Rebuild a map from layer-major values, enforcing canopy ≥ terrain by
    /// cellwise max.
    pub fn from_layers_f64(
        width: usize,
        height: usize,
        resolution: f32,
        values: &[f64],
        id: EnvId,
    ) -> Result<Self, HeightfieldError> {
        let n = width * height;
        if values.len() != LAYERS * n {
            return Err(HeightfieldError::LayerLength { got: values.len() / LAYERS, width, height });
        }
        let terrain: Vec<f32> = values[..n].iter().map(|&v| v as f32).collect();
        let canopy = values[n..]
            .iter()
            .zip(&terrain)
            .map(|(&c, &t)| (c as f32).max(t))
            .collect();
        Self::new(width, height, resolution, terrain, canopy, id)
    }

    /// Same map with a constant added to both layers.
    pub fn offset(&self, dz: f32) -> GridMap {
        GridMap {
            terrain: self.terrain.iter().map(|v| v + dz).collect(),
            canopy: self.canopy.iter().map(|v| v + dz).collect(),
            ..self.clone()
        }
    }
}

/// Per-layer affine normalization into the diffusion working range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; LAYERS],
    pub scale: [f64; LAYERS],
}

impl NormStats {
    pub fn identity() -> Self {
        Self { mean: [0.0; LAYERS], scale: [1.0; LAYERS] }
    }

    pub fn validate(&self) -> Result<(), HeightfieldError> {
        let ok = self.mean.iter().all(|m| m.is_finite())
            && self.scale.iter().all(|s| s.is_finite() && *s > 0.0);
        if ok {
            Ok(())
        } else {
            Err(HeightfieldError::BadScale)
        }
    }

    /// Mean per layer and the largest absolute deviation from it, so every
    /// map in the set lands in [-1, 1].
    pub fn fit<'a>(maps: impl IntoIterator<Item = &'a GridMap>) -> Result<Self, HeightfieldError> {
        let maps: Vec<&GridMap> = maps.into_iter().collect();
        if maps.is_empty() {
            return Err(HeightfieldError::TooFewRecords { need: 1, have: 0 });
        }
        let mut mean = [0.0; LAYERS];
        let mut scale = [0.0f64; LAYERS];
        for (layer, m) in mean.iter_mut().enumerate() {
            let (sum, count) = maps.iter().fold((0.0, 0usize), |(s, c), map| {
                let cells = if layer == 0 { map.terrain() } else { map.canopy() };
                (s + cells.iter().map(|&v| v as f64).sum::<f64>(), c + cells.len())
            });
            *m = sum / count as f64;
        }
        for (layer, s) in scale.iter_mut().enumerate() {
            for map in &maps {
                let cells = if layer == 0 { map.terrain() } else { map.canopy() };
                for &v in cells {
                    *s = s.max((v as f64 - mean[layer]).abs());
                }
            }
            if *s <= 1e-9 {
                *s = 1.0;
            }
        }
        Ok(Self { mean, scale })
    }
}

/// Map layer values into the working range: `(v - mean) / scale` per layer.
pub fn normalize(map: &GridMap, stats: &NormStats) -> Result<Vec<f64>, HeightfieldError> {
    stats.validate()?;
    let n = map.cells();
    let mut out = map.layers_f64();
    for (i, v) in out.iter_mut().enumerate() {
        let layer = i / n;
        *v = (*v - stats.mean[layer]) / stats.scale[layer];
    }
    Ok(out)
}

/// Inverse of [`normalize`] on layer-major values.
pub fn denormalize(values: &[f64], cells: usize, stats: &NormStats) -> Result<Vec<f64>, HeightfieldError> {
    stats.validate()?;
    Ok(values
        .iter()
        .enumerate()
        .map(|(i, &v)| v * stats.scale[i / cells] + stats.mean[i / cells])
        .collect())
}

/// An environment plus curriculum bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvRecord {
    pub map: GridMap,
    /// Navigation success rate; `None` until first evaluated.
    pub success_rate: Option<f64>,
    pub weight: f64,
    pub select_count: u64,
    /// Epoch of the last success-rate evaluation, -1 if never evaluated.
    pub last_eval_epoch: i64,
    pub provenance: String,
}

impl EnvRecord {
    pub fn new(map: GridMap, provenance: impl Into<String>) -> Self {
        Self {
            map,
            success_rate: None,
            weight: 1.0,
            select_count: 0,
            last_eval_epoch: -1,
            provenance: provenance.into(),
        }
    }

    pub fn id(&self) -> EnvId {
        self.map.id
    }
}

/// Ordered collection of environment records with fixed normalization stats.
#[derive(Debug, Clone, PartialEq)]
pub struct MapDataset {
    records: Vec<EnvRecord>,
    pub stats: NormStats,
    next_id: EnvId,
}

impl MapDataset {
    pub fn new(stats: NormStats) -> Self {
        Self { records: Vec::new(), stats, next_id: 0 }
    }

    /// Build a dataset from maps, fitting normalization stats over them.
    pub fn from_maps(maps: Vec<GridMap>, provenance: &str) -> Result<Self, HeightfieldError> {
        let stats = NormStats::fit(&maps)?;
        let mut ds = Self::new(stats);
        for m in maps {
            ds.push(EnvRecord::new(m, provenance))?;
        }
        Ok(ds)
    }

    pub fn records(&self) -> &[EnvRecord] {
        &self.records
    }

    pub fn records_mut(&mut self) -> &mut [EnvRecord] {
        &mut self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Next id that has never been handed out by this dataset.
    pub fn next_id(&self) -> EnvId {
        self.next_id
    }

    /// Reserve `n` consecutive fresh ids.
    pub fn reserve_ids(&mut self, n: u64) -> EnvId {
        let first = self.next_id;
        self.next_id += n;
        first
    }

    pub fn push(&mut self, record: EnvRecord) -> Result<(), HeightfieldError> {
        let id = record.id();
        if self.records.iter().any(|r| r.id() == id) {
            return Err(HeightfieldError::DuplicateId(id));
        }
        if let Some(first) = self.records.first() {
            if !first.map.same_shape(&record.map) {
                return Err(HeightfieldError::ShapeMismatch);
            }
        }
        self.next_id = self.next_id.max(id + 1);
        self.records.push(record);
        Ok(())
    }

    pub fn position(&self, id: EnvId) -> Option<usize> {
        self.records.iter().position(|r| r.id() == id)
    }

    pub fn get(&self, id: EnvId) -> Result<&EnvRecord, HeightfieldError> {
        self.position(id)
            .map(|i| &self.records[i])
            .ok_or(HeightfieldError::UnknownId(id))
    }

    pub fn get_mut(&mut self, id: EnvId) -> Result<&mut EnvRecord, HeightfieldError> {
        match self.position(id) {
            Some(i) => Ok(&mut self.records[i]),
            None => Err(HeightfieldError::UnknownId(id)),
        }
    }

    pub fn maps(&self) -> impl Iterator<Item = &GridMap> {
        self.records.iter().map(|r| &r.map)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(id: EnvId) -> GridMap {
        let terrain: Vec<f32> = (0..64).map(|i| (i % 8) as f32 * 0.25).collect();
        GridMap::bare(8, 8, 0.5, terrain, id).unwrap()
    }

    #[test]
    fn rejects_small_and_inverted_maps() {
        assert!(matches!(
            GridMap::flat(4, 8, 0.5, 0),
            Err(HeightfieldError::TooSmall { .. })
        ));
        let mut canopy = vec![0.0; 64];
        canopy[9] = -0.1;
        let err = GridMap::new(8, 8, 0.5, vec![0.0; 64], canopy, 0).unwrap_err();
        assert!(matches!(err, HeightfieldError::CanopyBelowTerrain { x: 1, y: 1, .. }));
        let mut t = vec![0.0; 64];
        t[3] = f32::NAN;
        assert!(matches!(
            GridMap::bare(8, 8, 0.5, t, 0),
            Err(HeightfieldError::NonFinite { .. })
        ));
        assert!(GridMap::flat(8, 8, 0.0, 0).is_err());
    }

    #[test]
    fn normalize_examples() {
        let stats = NormStats { mean: [0.0, 0.0], scale: [1.0, 1.0] };
        let mut t = vec![0.0; 64];
        t[0] = 0.5;
        let m = GridMap::bare(8, 8, 0.5, t, 0).unwrap();
        assert_eq!(normalize(&m, &stats).unwrap()[0], 0.5);

        let stats = NormStats { mean: [2.0, 2.0], scale: [4.0, 4.0] };
        let m = GridMap::bare(8, 8, 0.5, vec![6.0; 64], 0).unwrap();
        assert_eq!(normalize(&m, &stats).unwrap()[0], 1.0);
    }

    #[test]
    fn zero_scale_rejected() {
        let stats = NormStats { mean: [0.0, 0.0], scale: [0.0, 1.0] };
        let m = GridMap::flat(8, 8, 0.5, 0).unwrap();
        assert!(matches!(normalize(&m, &stats), Err(HeightfieldError::BadScale)));
        assert!(denormalize(&[0.0; 128], 64, &stats).is_err());
    }

    #[test]
    fn fitted_stats_map_into_unit_range() {
        let maps = vec![ramp(0), ramp(1).offset(3.0)];
        let stats = NormStats::fit(&maps).unwrap();
        for m in &maps {
            let v = normalize(m, &stats).unwrap();
            assert!(v.iter().all(|x| x.abs() <= 1.0 + 1e-12));
        }
    }

    #[test]
    fn dataset_ids_unique_and_monotone() {
        let mut ds = MapDataset::from_maps(vec![ramp(0), ramp(1)], "test").unwrap();
        assert_eq!(ds.next_id(), 2);
        assert!(matches!(
            ds.push(EnvRecord::new(ramp(1), "dup")),
            Err(HeightfieldError::DuplicateId(1))
        ));
        let id = ds.reserve_ids(3);
        assert_eq!(id, 2);
        assert_eq!(ds.next_id(), 5);
        let big = GridMap::flat(9, 8, 0.5, 9).unwrap();
        assert!(matches!(
            ds.push(EnvRecord::new(big, "x")),
            Err(HeightfieldError::ShapeMismatch)
        ));
    }

    #[test]
    fn from_layers_enforces_canopy_order() {
        let mut v = vec![0.0; 128];
        v[64] = -1.0;
        let m = GridMap::from_layers_f64(8, 8, 0.5, &v, 0).unwrap();
        assert_eq!(m.canopy()[0], 0.0);
    }
}
