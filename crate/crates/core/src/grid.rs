//! Multi-channel 3D feature grids, laid out channel-major with the last
//! spatial axis fastest: `data[((c * l + i) * w + j) * d + k]`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    channels: usize,
    dims: [usize; 3],
    data: Vec<f64>,
}

impl FeatureGrid {
    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        Self {
            channels,
            dims,
            data: vec![0.0; channels * dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn from_vec(channels: usize, dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        let want = channels * dims[0] * dims[1] * dims[2];
        if data.len() != want {
            return Err(Error::Shape(format!(
                "grid {channels}x{dims:?} needs {want} values, got {}",
                data.len()
            )));
        }
        Ok(Self { channels, dims, data })
    }

    pub fn filled(channels: usize, dims: [usize; 3], value: f64) -> Self {
        let mut g = Self::zeros(channels, dims);
        g.data.fill(value);
        g
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    /// Number of voxels per channel.
    pub fn spatial_len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.spatial_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.spatial_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &FeatureGrid) -> bool {
        self.channels == other.channels && self.dims == other.dims
    }

    pub fn check_same_shape(&self, other: &FeatureGrid, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: {}x{:?} vs {}x{:?}",
                self.channels, self.dims, other.channels, other.dims
            )))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Feature vectors as rows: `out[p * channels + c]`, spatial position
    /// `p` in layout order.
    pub fn to_rows(&self) -> Vec<f64> {
        let n = self.spatial_len();
        let c = self.channels;
        let mut rows = vec![0.0; n * c];
        for ch in 0..c {
            for (p, v) in self.channel(ch).iter().enumerate() {
                rows[p * c + ch] = *v;
            }
        }
        rows
    }

    /// Inverse of [`FeatureGrid::to_rows`].
    pub fn from_rows(channels: usize, dims: [usize; 3], rows: &[f64]) -> Result<Self> {
        let mut g = Self::zeros(channels, dims);
        let n = g.spatial_len();
        if rows.len() != n * channels {
            return Err(Error::Shape(format!(
                "expected {} row values, got {}",
                n * channels,
                rows.len()
            )));
        }
        for p in 0..n {
            for ch in 0..channels {
                g.data[ch * n + p] = rows[p * channels + ch];
            }
        }
        Ok(g)
    }

    pub fn add_assign(&mut self, other: &FeatureGrid) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }
}
