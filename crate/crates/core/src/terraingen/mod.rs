//! Procedural terrain, bootstrap datasets, and the adaptive procedural
//! baseline.

mod plants;

pub use plants::{convex_hull, instantiate_plants, point_in_hull, segment_canopy, PlantCrown};

use std::f64::consts::PI;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::heightfield::{EnvId, EnvRecord, GridMap, HeightfieldError, MapDataset};
use crate::rng::Rng;
use crate::synthesis::WeightParams;

#[derive(Debug, Error)]
pub enum TerrainError {
    #[error("invalid terrain parameters: {0}")]
    BadParams(String),
    #[error("empty or inverted range for {0}")]
    EmptyRange(&'static str),
    #[error("no terrain families configured")]
    NoFamilies,
    #[error("family {0:?} is not tracked by this generator")]
    UnknownFamily(Family),
    #[error("bootstrap needs at least 2 maps, got {0}")]
    TooFewMaps(usize),
    #[error(transparent)]
    Heightfield(#[from] HeightfieldError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Hills,
    Steps,
    Ridges,
    FractalNoise,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Hills, Family::Steps, Family::Ridges, Family::FractalNoise];

    pub fn name(self) -> &'static str {
        match self {
            Family::Hills => "hills",
            Family::Steps => "steps",
            Family::Ridges => "ridges",
            Family::FractalNoise => "fractal_noise",
        }
    }

    pub fn parse(s: &str) -> Option<Family> {
        Family::ALL.into_iter().find(|f| f.name() == s)
    }

    /// Family encoded in a provenance tag of the form `<source>:<family>`.
    pub fn from_provenance(provenance: &str) -> Option<Family> {
        provenance.rsplit_once(':').and_then(|(_, f)| Family::parse(f))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TerrainParams {
    pub family: Family,
    /// Peak-to-peak scale of the terrain, meters.
    pub amplitude: f64,
    /// Cycles per map side.
    pub frequency: f64,
    /// Quantization step for the steps family, meters.
    pub step_height: f64,
    /// Weight of fine fractal detail, in [0, 1].
    pub roughness: f64,
    /// Expected plants per map.
    pub plant_density: f64,
    /// Plant height range, meters.
    pub plant_height: (f64, f64),
}

impl TerrainParams {
    pub fn validate(&self) -> Result<(), TerrainError> {
        let bad = |m: &str| Err(TerrainError::BadParams(m.to_string()));
        if !(self.amplitude >= 0.0 && self.amplitude.is_finite()) {
            return bad("amplitude must be >= 0");
        }
        if !(self.step_height >= 0.0 && self.step_height.is_finite()) {
            return bad("step height must be >= 0");
        }
        if !(self.frequency > 0.0 && self.frequency.is_finite()) {
            return bad("frequency must be > 0");
        }
        if !(0.0..=1.0).contains(&self.roughness) {
            return bad("roughness must lie in [0, 1]");
        }
        if !(self.plant_density >= 0.0 && self.plant_density.is_finite()) {
            return bad("plant density must be >= 0");
        }
        let (lo, hi) = self.plant_height;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad("plant height range must satisfy 0 < lo <= hi");
        }
        Ok(())
    }
}

/// Closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Span {
    pub lo: f64,
    pub hi: f64,
}

impl Span {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    fn check(&self, name: &'static str) -> Result<(), TerrainError> {
        if self.lo <= self.hi && self.lo.is_finite() && self.hi.is_finite() {
            Ok(())
        } else {
            Err(TerrainError::EmptyRange(name))
        }
    }

    fn draw(&self, rng: &mut Rng) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.random_range(self.lo..=self.hi)
        }
    }

    /// Affine position `t ∈ [0, 1]` inside the span.
    pub fn lerp(&self, t: f64) -> f64 {
        self.lo + (self.hi - self.lo) * t
    }
}

/// Parameter ranges for procedural sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TerrainRanges {
    pub families: Vec<Family>,
    pub amplitude: Span,
    pub frequency: Span,
    pub step_height: Span,
    pub roughness: Span,
    pub plant_density: Span,
    pub plant_height: Span,
}

impl Default for TerrainRanges {
    fn default() -> Self {
        Self {
            families: Family::ALL.to_vec(),
            amplitude: Span::new(0.2, 2.4),
            frequency: Span::new(0.75, 2.5),
            step_height: Span::new(0.1, 0.4),
            roughness: Span::new(0.0, 0.6),
            plant_density: Span::new(0.0, 10.0),
            plant_height: Span::new(0.8, 3.0),
        }
    }
}

impl TerrainRanges {
    pub fn validate(&self) -> Result<(), TerrainError> {
        if self.families.is_empty() {
            return Err(TerrainError::NoFamilies);
        }
        self.amplitude.check("amplitude")?;
        self.frequency.check("frequency")?;
        self.step_height.check("step_height")?;
        self.roughness.check("roughness")?;
        self.plant_density.check("plant_density")?;
        self.plant_height.check("plant_height")?;
        Ok(())
    }
}

/// Raster size shared by every generated map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapShape {
    pub width: usize,
    pub height: usize,
    pub resolution: f32,
}

impl Default for MapShape {
    fn default() -> Self {
        Self { width: 32, height: 32, resolution: 0.5 }
    }
}

/// Uniform independent draw of every parameter; the family is uniform over
/// `ranges.families`.
pub fn pg_sample(ranges: &TerrainRanges, rng: &mut Rng) -> Result<TerrainParams, TerrainError> {
    ranges.validate()?;
    let family = ranges.families[rng.random_range(0..ranges.families.len())];
    pg_sample_family(ranges, family, rng)
}

/// As [`pg_sample`] with the family fixed.
pub fn pg_sample_family(ranges: &TerrainRanges, family: Family, rng: &mut Rng) -> Result<TerrainParams, TerrainError> {
    ranges.validate()?;
    let amplitude = ranges.amplitude.draw(rng);
    let frequency = ranges.frequency.draw(rng);
    let step_height = ranges.step_height.draw(rng);
    let roughness = ranges.roughness.draw(rng);
    let plant_density = ranges.plant_density.draw(rng);
    let params = TerrainParams {
        family,
        amplitude,
        frequency,
        step_height,
        roughness,
        plant_density,
        plant_height: (ranges.plant_height.lo, ranges.plant_height.hi),
    };
    params.validate()?;
    Ok(params)
}

/// Sum of three randomly oriented cosine waves with peak-to-peak ≈ amplitude.
fn cosine_hills(w: usize, h: usize, amplitude: f64, frequency: f64, rng: &mut Rng) -> Vec<f64> {
    let side = w.max(h) as f64;
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let theta = rng.random_range(0.0..PI);
            let phase = rng.random_range(0.0..2.0 * PI);
            let f = frequency * rng.random_range(0.7..1.3);
            (theta.cos(), theta.sin(), phase, f)
        })
        .collect();
    let a = amplitude / 6.0;
    (0..w * h)
        .map(|i| {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            waves
                .iter()
                .map(|(c, s, p, f)| a * (2.0 * PI * f * (c * x + s * y) / side + p).cos())
                .sum()
        })
        .collect()
}

/// Diamond–square midpoint displacement on the smallest 2ⁿ+1 grid covering
/// the map, cropped and rescaled so its peak-to-peak equals `amplitude`.
fn midpoint_displacement(w: usize, h: usize, amplitude: f64, roughness: f64, rng: &mut Rng) -> Vec<f64> {
    let mut n = 1;
    while n + 1 < w.max(h) {
        n *= 2;
    }
    let size = n + 1;
    let mut g = vec![0.0f64; size * size];
    let idx = |x: usize, y: usize| y * size + x;
    for (x, y) in [(0, 0), (n, 0), (0, n), (n, n)] {
        g[idx(x, y)] = rng.random_range(-1.0..1.0);
    }
    let decay = 0.35 + 0.5 * roughness;
    let mut scale = 1.0;
    let mut step = n;
    while step > 1 {
        let half = step / 2;
        for y in (half..n).step_by(step) {
            for x in (half..n).step_by(step) {
                let avg = (g[idx(x - half, y - half)]
                    + g[idx(x + half, y - half)]
                    + g[idx(x - half, y + half)]
                    + g[idx(x + half, y + half)])
                    / 4.0;
                g[idx(x, y)] = avg + scale * rng.random_range(-1.0..1.0);
            }
        }
        for y in (0..=n).step_by(half) {
            let start = if (y / half) % 2 == 0 { half } else { 0 };
            for x in (start..=n).step_by(step) {
                let mut sum = 0.0;
                let mut cnt = 0.0;
                if x >= half {
                    sum += g[idx(x - half, y)];
                    cnt += 1.0;
                }
                if x + half <= n {
                    sum += g[idx(x + half, y)];
                    cnt += 1.0;
                }
                if y >= half {
                    sum += g[idx(x, y - half)];
                    cnt += 1.0;
                }
                if y + half <= n {
                    sum += g[idx(x, y + half)];
                    cnt += 1.0;
                }
                g[idx(x, y)] = sum / cnt + scale * rng.random_range(-1.0..1.0);
            }
        }
        scale *= decay;
        step = half;
    }
    let crop: Vec<f64> = (0..w * h).map(|i| g[idx(i % w, i / w)]).collect();
    let lo = crop.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = crop.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if span <= 0.0 {
        return vec![0.0; w * h];
    }
    crop.iter().map(|v| amplitude * ((v - lo) / span - 0.5)).collect()
}

/// Directional ridges: |sin| profile along a random direction.
fn ridges(w: usize, h: usize, amplitude: f64, frequency: f64, rng: &mut Rng) -> Vec<f64> {
    let side = w.max(h) as f64;
    let theta = rng.random_range(0.0..PI);
    let phase = rng.random_range(0.0..PI);
    let (c, s) = (theta.cos(), theta.sin());
    (0..w * h)
        .map(|i| {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            amplitude * ((PI * frequency * (c * x + s * y) / side + phase).sin().abs() - 0.5)
        })
        .collect()
}

/// Smooth compact radial falloff: (1 − (d/r)²)² inside radius r.
pub fn plant_profile(d: f64, radius: f64) -> f64 {
    if d >= radius {
        0.0
    } else {
        let q = 1.0 - (d / radius).powi(2);
        q * q
    }
}

/// Generate one map from `params`. The canopy layer is the terrain plus
/// radially decaying plant blobs.
pub fn gen_parametric_terrain(
    params: &TerrainParams,
    shape: MapShape,
    rng: &mut Rng,
    id: EnvId,
) -> Result<GridMap, TerrainError> {
    params.validate()?;
    let (w, h) = (shape.width, shape.height);
    let a = params.amplitude;
    let mut terrain = match params.family {
        Family::Hills | Family::Steps => cosine_hills(w, h, a, params.frequency, rng),
        Family::Ridges => ridges(w, h, a, params.frequency, rng),
        Family::FractalNoise => midpoint_displacement(w, h, a, params.roughness, rng),
    };
    if params.family != Family::FractalNoise && params.roughness > 0.0 && a > 0.0 {
        let detail = midpoint_displacement(w, h, 0.25 * a * params.roughness, 0.8, rng);
        terrain.iter_mut().zip(&detail).for_each(|(t, d)| *t += d);
    }
    if params.family == Family::Steps && params.step_height > 0.0 {
        let q = params.step_height;
        terrain.iter_mut().for_each(|t| *t = (*t / q).round() * q);
    }

    let mut canopy = terrain.clone();
    let whole = params.plant_density.floor() as usize;
    let extra = rng.random::<f64>() < params.plant_density.fract();
    let count = whole + usize::from(extra);
    let (hlo, hhi) = params.plant_height;
    for _ in 0..count {
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        let height = if hlo == hhi { hlo } else { rng.random_range(hlo..=hhi) };
        let radius: f64 = rng.random_range(1.5..3.0);
        let reach = radius.ceil() as isize;
        let (ix, iy) = (cx.floor() as isize, cy.floor() as isize);
        for y in (iy - reach).max(0)..=(iy + reach).min(h as isize - 1) {
            for x in (ix - reach).max(0)..=(ix + reach).min(w as isize - 1) {
                let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
                let i = y as usize * w + x as usize;
                let top = terrain[i] + height * plant_profile(d, radius);
                canopy[i] = canopy[i].max(top);
            }
        }
    }
    let to32 = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect::<Vec<f32>>();
    let terrain = to32(terrain);
    let canopy: Vec<f32> = to32(canopy)
        .into_iter()
        .zip(&terrain)
        .map(|(c, &t)| c.max(t))
        .collect();
    Ok(GridMap::new(w, h, shape.resolution, terrain, canopy, id)?)
}

/// Initial dataset of `count` procedural maps stratified evenly across the
/// configured families; normalization stats are fitted over the set.
pub fn bootstrap_dataset(
    count: usize,
    ranges: &TerrainRanges,
    shape: MapShape,
    rng: &mut Rng,
) -> Result<MapDataset, TerrainError> {
    if count < 2 {
        return Err(TerrainError::TooFewMaps(count));
    }
    ranges.validate()?;
    let family_of = |i: usize| ranges.families[i % ranges.families.len()];
    let maps = (0..count)
        .map(|i| {
            let params = pg_sample_family(ranges, family_of(i), rng)?;
            gen_parametric_terrain(&params, shape, rng, i as EnvId)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut ds = MapDataset::from_maps(maps, "bootstrap")?;
    for (i, r) in ds.records_mut().iter_mut().enumerate() {
        r.provenance = format!("bootstrap:{}", family_of(i).name());
    }
    Ok(ds)
}

/// Adaptive procedural generation: one difficulty scalar per family, moved
/// toward the target difficulty by the difficulty weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApgState {
    pub ranges: TerrainRanges,
    /// `(family, difficulty)` for every tracked family.
    pub difficulty: Vec<(Family, f64)>,
    pub bounds: (f64, f64),
    pub rate: f64,
    /// Half-width of the uniform jitter applied around the difficulty when
    /// sampling parameters.
    pub jitter: f64,
}

impl ApgState {
    pub fn new(ranges: TerrainRanges, initial: f64, rate: f64) -> Result<Self, TerrainError> {
        ranges.validate()?;
        let bounds = (0.0, 1.0);
        let difficulty = ranges
            .families
            .iter()
            .map(|&f| (f, initial.clamp(bounds.0, bounds.1)))
            .collect();
        Ok(Self { ranges, difficulty, bounds, rate, jitter: 0.1 })
    }

    pub fn difficulty_of(&self, family: Family) -> Result<f64, TerrainError> {
        self.difficulty
            .iter()
            .find(|(f, _)| *f == family)
            .map(|(_, d)| *d)
            .ok_or(TerrainError::UnknownFamily(family))
    }

    /// Parameters for `family` at its current difficulty: every "harder"
    /// parameter moves affinely across its range with difficulty.
    pub fn params_for(&self, family: Family, rng: &mut Rng) -> Result<TerrainParams, TerrainError> {
        let d = self.difficulty_of(family)?;
        let t = (d + rng.random_range(-self.jitter..=self.jitter)).clamp(0.0, 1.0);
        let r = &self.ranges;
        let params = TerrainParams {
            family,
            amplitude: r.amplitude.lerp(t),
            frequency: r.frequency.draw(rng),
            step_height: r.step_height.lerp(t),
            roughness: r.roughness.lerp(t),
            plant_density: r.plant_density.lerp(t),
            plant_height: (r.plant_height.lo, r.plant_height.hi),
        };
        params.validate()?;
        Ok(params)
    }
}

/// d ← clamp(d + rate · sign(s − s̄) · (1 − w)).
pub fn apg_adapt(
    state: &mut ApgState,
    family: Family,
    success_rate: f64,
    weight: f64,
    params: &WeightParams,
) -> Result<(), TerrainError> {
    let (lo, hi) = state.bounds;
    let rate = state.rate;
    let entry = state
        .difficulty
        .iter_mut()
        .find(|(f, _)| *f == family)
        .ok_or(TerrainError::UnknownFamily(family))?;
    let dir = if success_rate > params.desired_difficulty {
        1.0
    } else if success_rate < params.desired_difficulty {
        -1.0
    } else {
        0.0
    };
    entry.1 = (entry.1 + rate * dir * (1.0 - weight)).clamp(lo, hi);
    Ok(())
}

/// A new record for a procedurally generated map, tagged `<source>:<family>`.
pub fn procedural_record(map: GridMap, source: &str, family: Family) -> EnvRecord {
    EnvRecord::new(map, format!("{source}:{}", family.name()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heightfield::{dataset_variability, VariabilityParams};
    use crate::rng::stream;
    use crate::synthesis::difficulty_weight;
    use proptest::prelude::*;

    fn base(family: Family) -> TerrainParams {
        TerrainParams {
            family,
            amplitude: 1.5,
            frequency: 1.5,
            step_height: 0.3,
            roughness: 0.4,
            plant_density: 4.0,
            plant_height: (1.0, 2.0),
        }
    }

    #[test]
    fn zero_amplitude_no_plants_is_flat() {
        for f in Family::ALL {
            let p = TerrainParams { amplitude: 0.0, plant_density: 0.0, ..base(f) };
            let m = gen_parametric_terrain(&p, MapShape::default(), &mut stream(1, &[]), 0).unwrap();
            assert!(m.terrain().iter().all(|&t| t == 0.0), "{f:?}");
            assert_eq!(m.terrain(), m.canopy());
        }
    }

    #[test]
    fn steps_are_quantized() {
        let p = TerrainParams { step_height: 0.3, ..base(Family::Steps) };
        let m = gen_parametric_terrain(&p, MapShape::default(), &mut stream(2, &[]), 0).unwrap();
        let distinct: std::collections::BTreeSet<i64> =
            m.terrain().iter().map(|&t| (t as f64 / 0.3).round() as i64).collect();
        assert!(distinct.len() > 1);
        for &t in m.terrain() {
            let q = t as f64 / 0.3;
            assert!((q - q.round()).abs() * 0.3 < 1e-6, "{t}");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        for f in Family::ALL {
            let a = gen_parametric_terrain(&base(f), MapShape::default(), &mut stream(3, &[]), 0).unwrap();
            let b = gen_parametric_terrain(&base(f), MapShape::default(), &mut stream(3, &[]), 0).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn invalid_params_rejected() {
        let mut p = base(Family::Hills);
        p.frequency = 0.0;
        assert!(gen_parametric_terrain(&p, MapShape::default(), &mut stream(1, &[]), 0).is_err());
        let r = TerrainRanges { families: vec![], ..TerrainRanges::default() };
        assert!(matches!(pg_sample(&r, &mut stream(1, &[])), Err(TerrainError::NoFamilies)));
        let r = TerrainRanges { amplitude: Span::new(2.0, 1.0), ..TerrainRanges::default() };
        assert!(matches!(pg_sample(&r, &mut stream(1, &[])), Err(TerrainError::EmptyRange("amplitude"))));
    }

    #[test]
    fn degenerate_range_returns_endpoint() {
        let r = TerrainRanges { amplitude: Span::new(0.7, 0.7), ..TerrainRanges::default() };
        let p = pg_sample(&r, &mut stream(1, &[])).unwrap();
        assert_eq!(p.amplitude, 0.7);
    }

    #[test]
    fn uniform_draws_have_half_mean() {
        let r = TerrainRanges { roughness: Span::new(0.0, 1.0), ..TerrainRanges::default() };
        let mut rng = stream(5, &[]);
        let mean: f64 = (0..10_000).map(|_| pg_sample(&r, &mut rng).unwrap().roughness).sum::<f64>() / 1e4;
        assert!((mean - 0.5).abs() < 0.02, "{mean}");
    }

    #[test]
    fn bootstrap_stratifies_families() {
        let r = TerrainRanges::default();
        let ds = bootstrap_dataset(4, &r, MapShape::default(), &mut stream(6, &[])).unwrap();
        assert_eq!(ds.len(), 4);
        let fams: Vec<_> = ds.records().iter().map(|r| Family::from_provenance(&r.provenance).unwrap()).collect();
        assert_eq!(fams, Family::ALL.to_vec());
        assert!(bootstrap_dataset(1, &r, MapShape::default(), &mut stream(6, &[])).is_err());
        let again = bootstrap_dataset(4, &r, MapShape::default(), &mut stream(6, &[])).unwrap();
        assert_eq!(ds, again);
    }

    #[test]
    fn bootstrap_of_64_has_variability() {
        let ds = bootstrap_dataset(64, &TerrainRanges::default(), MapShape::default(), &mut stream(7, &[])).unwrap();
        let v = dataset_variability(&ds, &VariabilityParams { components: 3, downsample: 2, reference: 1e9 }).unwrap();
        assert!(v > 0.0);
    }

    #[test]
    fn apg_update_rule() {
        let wp = WeightParams { desired_difficulty: 0.5, temperature: 0.2 };
        let mut st = ApgState::new(TerrainRanges::default(), 0.3, 0.1).unwrap();
        apg_adapt(&mut st, Family::Hills, 0.5, 1.0, &wp).unwrap();
        assert_eq!(st.difficulty_of(Family::Hills).unwrap(), 0.3);
        let w = difficulty_weight(0.9, &wp);
        apg_adapt(&mut st, Family::Hills, 0.9, w, &wp).unwrap();
        let expect = 0.3 + 0.1 * (1.0 - (-4.0f64).exp());
        assert!((st.difficulty_of(Family::Hills).unwrap() - expect).abs() < 1e-12);
        for _ in 0..100 {
            apg_adapt(&mut st, Family::Ridges, 1.0, difficulty_weight(1.0, &wp), &wp).unwrap();
        }
        assert_eq!(st.difficulty_of(Family::Ridges).unwrap(), 1.0);
        let narrow = TerrainRanges { families: vec![Family::Hills], ..TerrainRanges::default() };
        let mut st2 = ApgState::new(narrow, 0.5, 0.1).unwrap();
        assert!(matches!(
            apg_adapt(&mut st2, Family::Steps, 0.9, 0.5, &wp),
            Err(TerrainError::UnknownFamily(Family::Steps))
        ));
    }

    proptest! {
        #[test]
        fn draws_respect_bounds(seed in any::<u64>()) {
            let r = TerrainRanges::default();
            let p = pg_sample(&r, &mut stream(seed, &[])).unwrap();
            prop_assert!(p.amplitude >= r.amplitude.lo && p.amplitude <= r.amplitude.hi);
            prop_assert!(p.frequency >= r.frequency.lo && p.frequency <= r.frequency.hi);
            prop_assert!(p.step_height >= r.step_height.lo && p.step_height <= r.step_height.hi);
            prop_assert!(p.roughness >= r.roughness.lo && p.roughness <= r.roughness.hi);
            prop_assert!(p.plant_density >= r.plant_density.lo && p.plant_density <= r.plant_density.hi);
        }

        #[test]
        fn generated_maps_are_valid(seed in any::<u64>(), fi in 0usize..4) {
            let mut rng = stream(seed, &[]);
            let p = pg_sample_family(&TerrainRanges::default(), Family::ALL[fi], &mut rng).unwrap();
            let m = gen_parametric_terrain(&p, MapShape::default(), &mut rng, 0).unwrap();
            prop_assert!(m.validate().is_ok());
        }

        #[test]
        fn apg_difficulty_stays_in_bounds(updates in prop::collection::vec((0.0f64..=1.0, 0usize..4), 0..60)) {
            let wp = WeightParams::default();
            let mut st = ApgState::new(TerrainRanges::default(), 0.5, 0.3).unwrap();
            for (s, fi) in updates {
                apg_adapt(&mut st, Family::ALL[fi], s, difficulty_weight(s, &wp), &wp).unwrap();
                for (_, d) in &st.difficulty {
                    prop_assert!(*d >= 0.0 && *d <= 1.0);
                }
            }
        }
    }
}
