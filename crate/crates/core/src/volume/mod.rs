//! Volumes, en-face projection maps, the MVOL container, pair manifests and
//! the synthetic vessel phantom.

mod manifest;
mod mvol;
mod phantom;

pub use manifest::{ManifestEntry, PairManifest, Split};
pub use mvol::{decode_volume, encode_volume, read_volume, write_volume, MVOL_MAGIC, MVOL_VERSION};
pub use phantom::{generate_dataset, generate_phantom, generate_phantom_pair, PhantomConfig, PhantomPair};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::FeatureGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Oct,
    Octa,
    Oct2Octa,
}

impl Modality {
    pub fn code(self) -> u8 {
        match self {
            Modality::Oct => 0,
            Modality::Octa => 1,
            Modality::Oct2Octa => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Modality::Oct),
            1 => Some(Modality::Octa),
            2 => Some(Modality::Oct2Octa),
            _ => None,
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Modality::Oct => "oct",
            Modality::Octa => "octa",
            Modality::Oct2Octa => "oct2octa",
        })
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "oct" => Ok(Modality::Oct),
            "octa" => Ok(Modality::Octa),
            "oct2octa" => Ok(Modality::Oct2Octa),
            other => Err(Error::Config(format!("unknown modality {other:?}"))),
        }
    }
}

/// A normalized scalar volume with axes `(L, W, D)`; `D` is depth and is
/// the fastest-varying axis in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    values: Vec<f32>,
    modality: Modality,
}

impl Volume {
    pub fn new(dims: [usize; 3], values: Vec<f32>, modality: Modality) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Shape(format!("volume dims must be positive, got {dims:?}")));
        }
        let want = dims[0] * dims[1] * dims[2];
        if values.len() != want {
            return Err(Error::Shape(format!(
                "volume {dims:?} needs {want} values, got {}",
                values.len()
            )));
        }
        if let Some((i, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(Error::Validation(format!("voxel {i} has value {v} outside [0,1]")));
        }
        Ok(Self { dims, values, modality })
    }

    pub fn filled(dims: [usize; 3], value: f32, modality: Modality) -> Result<Self> {
        Self::new(dims, vec![value; dims[0] * dims[1] * dims[2]], modality)
    }

    /// Builds a volume from a single-channel grid, clamping into `[0, 1]`.
    pub fn from_grid(grid: &FeatureGrid, modality: Modality) -> Result<Self> {
        if grid.channels() != 1 {
            return Err(Error::Shape(format!(
                "volume needs a single-channel grid, got {} channels",
                grid.channels()
            )));
        }
        if !grid.is_finite() {
            return Err(Error::Validation("grid contains non-finite values".into()));
        }
        let values = grid.data().iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect();
        Self::new(grid.dims(), values, modality)
    }

    pub fn to_grid(&self) -> FeatureGrid {
        FeatureGrid::from_vec(1, self.dims, self.values.iter().map(|&v| v as f64).collect())
            .expect("volume length is consistent")
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn with_modality(mut self, modality: Modality) -> Self {
        self.modality = modality;
        self
    }

    #[inline]
    pub fn index(&self, l: usize, w: usize, d: usize) -> usize {
        (l * self.dims[1] + w) * self.dims[2] + d
    }

    #[inline]
    pub fn get(&self, l: usize, w: usize, d: usize) -> f32 {
        self.values[self.index(l, w, d)]
    }

    /// Multiplies every voxel by `a`, which must lie in `[0, 1]`.
    pub fn scaled(&self, a: f32) -> Result<Self> {
        if !(0.0..=1.0).contains(&a) {
            return Err(Error::Validation(format!("scale {a} outside [0,1]")));
        }
        Self::new(self.dims, self.values.iter().map(|v| v * a).collect(), self.modality)
    }

    /// Axis-aligned sub-volume starting at `origin`.
    pub fn crop(&self, origin: [usize; 3], size: [usize; 3]) -> Result<Self> {
        for a in 0..3 {
            if size[a] == 0 || origin[a] + size[a] > self.dims[a] {
                return Err(Error::Shape(format!(
                    "crop {origin:?}+{size:?} outside volume {:?}",
                    self.dims
                )));
            }
        }
        let mut values = Vec::with_capacity(size[0] * size[1] * size[2]);
        for l in 0..size[0] {
            for w in 0..size[1] {
                let start = self.index(origin[0] + l, origin[1] + w, origin[2]);
                values.extend_from_slice(&self.values[start..start + size[2]]);
            }
        }
        Self::new(size, values, self.modality)
    }

    /// Axial slice at depth `d` as a row-major `L x W` image.
    pub fn depth_slice(&self, d: usize) -> Vec<f64> {
        let [l, w, _] = self.dims;
        let mut out = Vec::with_capacity(l * w);
        for a in 0..l {
            for b in 0..w {
                out.push(self.get(a, b, d) as f64);
            }
        }
        out
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum::<f64>() / self.values.len() as f64
    }
}

/// En-face projection: the depth-mean of a volume, `L x W`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMap {
    dims: [usize; 2],
    values: Vec<f64>,
}

impl ProjectionMap {
    pub fn new(dims: [usize; 2], values: Vec<f64>) -> Result<Self> {
        if dims[0] * dims[1] != values.len() || values.is_empty() {
            return Err(Error::Shape(format!(
                "projection map {dims:?} with {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("projection map has non-finite values".into()));
        }
        Ok(Self { dims, values })
    }

    /// Depth-mean of a single-channel grid. Used on raw network outputs
    /// during training.
    pub fn from_grid(grid: &FeatureGrid) -> Result<Self> {
        if grid.channels() != 1 {
            return Err(Error::Shape("projection needs a single-channel grid".into()));
        }
        let [l, w, d] = grid.dims();
        let values = grid
            .data()
            .chunks_exact(d)
            .map(|col| col.iter().sum::<f64>() / d as f64)
            .collect();
        Self::new([l, w], values)
    }

    pub fn dims(&self) -> [usize; 2] {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, l: usize, w: usize) -> f64 {
        self.values[l * self.dims[1] + w]
    }

    /// Min-max rescaled copy for display only; metrics never use this.
    pub fn display_normalized(&self) -> Vec<f64> {
        let lo = self.values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        self.values
            .iter()
            .map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 })
            .collect()
    }
}

/// Averages each `(l, w)` column over the depth axis.
pub fn projection_map(vol: &Volume) -> ProjectionMap {
    let [l, w, d] = vol.dims();
    let values = vol
        .values()
        .chunks_exact(d)
        .map(|col| col.iter().map(|&v| v as f64).sum::<f64>() / d as f64)
        .collect();
    ProjectionMap::new([l, w], values).expect("volume values are finite")
}
