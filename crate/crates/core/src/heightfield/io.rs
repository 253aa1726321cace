//! EHF1 heightfield files and dataset directories.
//!
//! Layout (little-endian):
//!
//! ```text
//! "EHF1" | u32 width | u32 height | u32 layers (=2) | f32 resolution
//! f32 terrain[height][width] | f32 canopy[height][width]
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{EnvId, EnvRecord, GridMap, HeightfieldError, MapDataset, NormStats, LAYERS};

const MAGIC: &[u8; 4] = b"EHF1";
const HEADER_LEN: usize = 20;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HeightfieldError + '_ {
    move |source| HeightfieldError::Io { path: path.display().to_string(), source }
}

pub(crate) fn encode_map(map: &GridMap) -> Result<Vec<u8>, HeightfieldError> {
    map.validate()?;
    let mut buf = Vec::with_capacity(HEADER_LEN + LAYERS * map.cells() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(map.width() as u32).to_le_bytes());
    buf.extend_from_slice(&(map.height() as u32).to_le_bytes());
    buf.extend_from_slice(&(LAYERS as u32).to_le_bytes());
    buf.extend_from_slice(&map.resolution().to_le_bytes());
    for v in map.terrain().iter().chain(map.canopy()) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

pub(crate) fn decode_map(bytes: &[u8], id: EnvId) -> Result<GridMap, HeightfieldError> {
    let fmt = |m: &str| HeightfieldError::Format(m.to_string());
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(fmt("missing EHF1 magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let (width, height, layers) = (u32_at(4), u32_at(8), u32_at(12));
    let resolution = f32::from_le_bytes(bytes[16..20].try_into().unwrap());
    if layers != LAYERS {
        return Err(fmt(&format!("layer count {layers}, expected {LAYERS}")));
    }
    let n = width
        .checked_mul(height)
        .ok_or_else(|| fmt("dimension overflow"))?;
    if bytes.len() != HEADER_LEN + LAYERS * n * 4 {
        return Err(fmt(&format!(
            "payload is {} bytes, expected {}",
            bytes.len() - HEADER_LEN,
            LAYERS * n * 4
        )));
    }
    let cells: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let (terrain, canopy) = cells.split_at(n);
    GridMap::new(width, height, resolution, terrain.to_vec(), canopy.to_vec(), id)
}

/// Write `map` as an EHF1 file. Invalid maps (non-finite values, canopy below
/// terrain) are refused before anything is written.
pub fn save_map(map: &GridMap, path: impl AsRef<Path>) -> Result<(), HeightfieldError> {
    let path = path.as_ref();
    let bytes = encode_map(map)?;
    fs::write(path, bytes).map_err(io_err(path))
}

/// Read an EHF1 file. The file carries no id; the caller supplies it (or it
/// comes from the sidecar).
pub fn load_map(path: impl AsRef<Path>, id: EnvId) -> Result<GridMap, HeightfieldError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_map(&bytes, id)
}

/// JSON sidecar stored next to an EHF1 file as `<name>.meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapMeta {
    pub id: EnvId,
    pub provenance: String,
    pub success_rate: Option<f64>,
}

fn meta_path(map_path: &Path) -> PathBuf {
    let stem = map_path.file_stem().unwrap_or_default().to_string_lossy();
    map_path.with_file_name(format!("{stem}.meta.json"))
}

pub fn save_meta(map_path: impl AsRef<Path>, meta: &MapMeta) -> Result<(), HeightfieldError> {
    let path = meta_path(map_path.as_ref());
    let mut text = serde_json::to_string_pretty(meta)?;
    text.push('\n');
    fs::write(&path, text).map_err(io_err(&path))
}

pub fn load_meta(map_path: impl AsRef<Path>) -> Result<Option<MapMeta>, HeightfieldError> {
    let path = meta_path(map_path.as_ref());
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    Ok(Some(serde_json::from_str(&text)?))
}

#[derive(Serialize, Deserialize)]
struct DatasetIndex {
    stats: NormStats,
    next_id: EnvId,
    ids: Vec<EnvId>,
}

fn map_file(dir: &Path, id: EnvId) -> PathBuf {
    dir.join(format!("env_{id:06}.ehf"))
}

/// Persist a dataset as one EHF1 file plus sidecar per record and an
/// `index.json` holding record order and normalization stats.
pub fn save_dataset_dir(dataset: &MapDataset, dir: impl AsRef<Path>) -> Result<(), HeightfieldError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for rec in dataset.records() {
        let path = map_file(dir, rec.id());
        save_map(&rec.map, &path)?;
        save_meta(
            &path,
            &MapMeta { id: rec.id(), provenance: rec.provenance.clone(), success_rate: rec.success_rate },
        )?;
    }
    let index = DatasetIndex {
        stats: dataset.stats,
        next_id: dataset.next_id(),
        ids: dataset.records().iter().map(|r| r.id()).collect(),
    };
    let path = dir.join("index.json");
    let mut text = serde_json::to_string_pretty(&index)?;
    text.push('\n');
    fs::write(&path, text).map_err(io_err(&path))
}

/// Load a dataset written by [`save_dataset_dir`]. Curriculum counters start
/// fresh; success rates come from the sidecars.
pub fn load_dataset_dir(dir: impl AsRef<Path>) -> Result<MapDataset, HeightfieldError> {
    let dir = dir.as_ref();
    let path = dir.join("index.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let index: DatasetIndex = serde_json::from_str(&text)?;
    let mut ds = MapDataset::new(index.stats);
    for id in index.ids {
        let path = map_file(dir, id);
        let map = load_map(&path, id)?;
        let mut rec = EnvRecord::new(map, "loaded");
        if let Some(meta) = load_meta(&path)? {
            rec.provenance = meta.provenance;
            rec.success_rate = meta.success_rate;
        }
        ds.push(rec)?;
    }
    ds.reserve_ids(index.next_id.saturating_sub(ds.next_id()));
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_map_layout() {
        let m = GridMap::flat(8, 8, 0.5, 0).unwrap();
        let bytes = encode_map(&m).unwrap();
        assert_eq!(bytes.len(), 16 + 4 + 2 * 8 * 8 * 4);
        assert_eq!(&bytes[..4], b"EHF1");
        assert_eq!(&bytes[4..8], &8u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &0.5f32.to_le_bytes());
        assert_eq!(decode_map(&bytes, 0).unwrap(), m);
    }

    #[test]
    fn refuses_invalid_maps() {
        let m = GridMap::flat(8, 8, 0.5, 0).unwrap();
        let mut bytes = encode_map(&m).unwrap();
        // canopy cell 0 below terrain cell 0
        let off = 20 + 64 * 4;
        bytes[off..off + 4].copy_from_slice(&(-1.0f32).to_le_bytes());
        assert!(matches!(
            decode_map(&bytes, 0),
            Err(HeightfieldError::CanopyBelowTerrain { .. })
        ));
        assert!(decode_map(&bytes[..30], 0).is_err());
        assert!(decode_map(b"NOPE0000000000000000", 0).is_err());
    }

    #[test]
    fn file_and_sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ehf");
        let t: Vec<f32> = (0..80).map(|i| i as f32 * 0.1).collect();
        let m = GridMap::bare(10, 8, 0.25, t, 3).unwrap();
        save_map(&m, &path).unwrap();
        assert_eq!(load_map(&path, 3).unwrap(), m);
        let meta = MapMeta { id: 3, provenance: "unit".into(), success_rate: Some(0.25) };
        save_meta(&path, &meta).unwrap();
        assert!(dir.path().join("a.meta.json").exists());
        assert_eq!(load_meta(&path).unwrap(), Some(meta));
    }

    #[test]
    fn dataset_dir_preserves_order() {
        let dir = tempfile::tempdir().unwrap();
        let maps: Vec<GridMap> = [5u64, 1, 3]
            .iter()
            .map(|&id| GridMap::bare(8, 8, 0.5, vec![id as f32; 64], id).unwrap())
            .collect();
        let mut ds = MapDataset::from_maps(maps, "boot").unwrap();
        ds.reserve_ids(4);
        ds.records_mut()[1].success_rate = Some(0.5);
        save_dataset_dir(&ds, dir.path()).unwrap();
        let back = load_dataset_dir(dir.path()).unwrap();
        let ids: Vec<_> = back.records().iter().map(|r| r.id()).collect();
        assert_eq!(ids, vec![5, 1, 3]);
        assert_eq!(back.stats, ds.stats);
        assert_eq!(back.next_id(), ds.next_id());
        assert_eq!(back.records()[1].success_rate, Some(0.5));
    }

    fn arb_map() -> impl Strategy<Value = GridMap> {
        (8usize..12, 8usize..12).prop_flat_map(|(w, h)| {
            (
                prop::collection::vec(-50.0f32..50.0, w * h),
                prop::collection::vec(0.0f32..5.0, w * h),
                0.05f32..2.0,
            )
                .prop_map(move |(t, plant, res)| {
                    let c = t.iter().zip(&plant).map(|(a, b)| a + b).collect();
                    GridMap::new(w, h, res, t, c, 0).unwrap()
                })
        })
    }

    proptest! {
        #[test]
        fn round_trip_is_bitwise(m in arb_map()) {
            let bytes = encode_map(&m).unwrap();
            let back = decode_map(&bytes, 0).unwrap();
            for (a, b) in m.terrain().iter().chain(m.canopy()).zip(back.terrain().iter().chain(back.canopy())) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
            prop_assert_eq!(encode_map(&back).unwrap(), bytes);
        }
    }
}
