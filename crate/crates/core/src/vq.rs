//! Codebooks, nearest-codeword quantization and the VQ-VAE loss terms.
//!
//! Conventions: distances are Euclidean, ties go to the lowest index, the
//! reconstruction term is a mean absolute error over voxels, and the codebook
//! and commitment terms are means over feature vectors of the squared L2
//! distance between a feature and its codeword.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::FeatureGrid;
use crate::par;
use crate::volume::Volume;

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    n: usize,
    d: usize,
    entries: Vec<f64>,
}

impl Codebook {
    pub fn new(n: usize, d: usize, entries: Vec<f64>) -> Result<Self> {
        if n < 2 || d < 1 {
            return Err(Error::Config(format!("codebook needs N >= 2 and d >= 1, got {n}x{d}")));
        }
        if entries.len() != n * d {
            return Err(Error::Shape(format!(
                "codebook {n}x{d} needs {} values, got {}",
                n * d,
                entries.len()
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("codebook has non-finite entries".into()));
        }
        Ok(Self { n, d, entries })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.entries[k * self.d..(k + 1) * self.d]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// Index of the nearest entry; the lowest index wins ties.
    pub fn nearest(&self, z: &[f64]) -> usize {
        nearest_row(&self.entries, self.d, z)
    }
}

pub(crate) fn nearest_row(entries: &[f64], d: usize, z: &[f64]) -> usize {
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for (k, row) in entries.chunks_exact(d).enumerate() {
        let dist: f64 = row.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
        if dist < best_dist {
            best_dist = dist;
            best = k;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizeResult {
    /// One codebook index per spatial position, in layout order.
    pub indices: Vec<usize>,
    pub quantized: FeatureGrid,
    /// `mean ||sg[u] - q||^2`; drives the codebook.
    pub codebook_term: f64,
    /// `mean ||sg[q] - u||^2`; drives the encoder.
    pub commitment_term: f64,
}

pub fn vq_quantize(features: &FeatureGrid, cb: &Codebook) -> Result<QuantizeResult> {
    quantize_with(features, cb.entries(), cb.len(), cb.dim())
}

pub(crate) fn quantize_with(features: &FeatureGrid, entries: &[f64], n: usize, d: usize) -> Result<QuantizeResult> {
    if features.channels() != d {
        return Err(Error::Shape(format!(
            "feature channels {} != codebook dim {d}",
            features.channels()
        )));
    }
    debug_assert_eq!(entries.len(), n * d);
    if !features.is_finite() {
        return Err(Error::Validation("features contain non-finite values".into()));
    }
    let rows = features.to_rows();
    let m = features.spatial_len();
    let indices = par::map_range(m, |p| nearest_row(entries, d, &rows[p * d..(p + 1) * d]));
    let mut qrows = vec![0.0; m * d];
    let mut sq = 0.0;
    for (p, &k) in indices.iter().enumerate() {
        let q = &entries[k * d..(k + 1) * d];
        qrows[p * d..(p + 1) * d].copy_from_slice(q);
        sq += q
            .iter()
            .zip(&rows[p * d..(p + 1) * d])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    let term = sq / m as f64;
    Ok(QuantizeResult {
        indices,
        quantized: FeatureGrid::from_rows(d, features.dims(), &qrows)?,
        codebook_term: term,
        commitment_term: term,
    })
}

/// Gradients of the two quantization terms.
#[derive(Debug, Clone, PartialEq)]
pub struct VqTermGrads {
    /// Gradient of `commitment_weight * commitment_term` w.r.t. the features.
    pub features: FeatureGrid,
    /// Gradient of `codebook_term` w.r.t. the codebook entries, `N x d` row-major.
    pub codebook: Vec<f64>,
}

impl QuantizeResult {
    /// Applies the stop-gradient rules: the codebook term only reaches the
    /// codebook and the commitment term only reaches the features.
    pub fn term_gradients(&self, features: &FeatureGrid, n_entries: usize, commitment_weight: f64) -> VqTermGrads {
        let d = features.channels();
        let m = features.spatial_len();
        let scale = 2.0 / m as f64;
        let mut gfeat = FeatureGrid::zeros(d, features.dims());
        let mut gcb = vec![0.0; n_entries * d];
        for c in 0..d {
            let u = features.channel(c);
            let q = self.quantized.channel(c);
            let g = gfeat.channel_mut(c);
            for p in 0..m {
                let diff = u[p] - q[p];
                g[p] = commitment_weight * scale * diff;
            }
        }
        // Codebook rows accumulate in position order.
        for p in 0..m {
            let k = self.indices[p];
            for c in 0..d {
                let diff = self.quantized.channel(c)[p] - features.channel(c)[p];
                gcb[k * d + c] += scale * diff;
            }
        }
        VqTermGrads {
            features: gfeat,
            codebook: gcb,
        }
    }
}

/// Forward value of the straight-through estimator: the quantized grid.
/// Its backward pass is the identity (see [`straight_through_backward`]).
pub fn straight_through(features: &FeatureGrid, quantized: &FeatureGrid) -> Result<FeatureGrid> {
    features.check_same_shape(quantized, "straight_through")?;
    Ok(quantized.clone())
}

/// Gradient w.r.t. the unquantized features given the gradient w.r.t. the
/// straight-through output.
pub fn straight_through_backward(grad_out: &FeatureGrid) -> FeatureGrid {
    grad_out.clone()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VqVaeLoss {
    pub total: f64,
    pub reconstruction: f64,
    pub codebook: f64,
    pub commitment: f64,
}

impl VqVaeLoss {
    pub fn new(reconstruction: f64, codebook: f64, commitment: f64, commitment_weight: f64) -> Self {
        Self {
            total: reconstruction + codebook + commitment_weight * commitment,
            reconstruction,
            codebook,
            commitment,
        }
    }
}

/// Mean absolute error between a target volume and its reconstruction plus
/// the two quantization terms, all weighted 1.
pub fn vqvae_loss(x: &Volume, x_hat: &Volume, qr: &QuantizeResult) -> Result<VqVaeLoss> {
    vqvae_loss_weighted(x, x_hat, qr, 1.0)
}

pub fn vqvae_loss_weighted(
    x: &Volume,
    x_hat: &Volume,
    qr: &QuantizeResult,
    commitment_weight: f64,
) -> Result<VqVaeLoss> {
    if x.dims() != x_hat.dims() {
        return Err(Error::Shape(format!(
            "reconstruction dims {:?} != target dims {:?}",
            x_hat.dims(),
            x.dims()
        )));
    }
    let rec = x
        .values()
        .iter()
        .zip(x_hat.values())
        .map(|(a, b)| (*a as f64 - *b as f64).abs())
        .sum::<f64>()
        / x.len() as f64;
    Ok(VqVaeLoss::new(
        rec,
        qr.codebook_term,
        qr.commitment_term,
        commitment_weight,
    ))
}

/// `mean |target - pred|` and its gradient w.r.t. `pred` (subgradient 0 at ties).
pub fn l1_with_grad(target: &FeatureGrid, pred: &FeatureGrid) -> (f64, FeatureGrid) {
    debug_assert!(target.same_shape(pred));
    let n = pred.data().len() as f64;
    let mut grad = FeatureGrid::zeros(pred.channels(), pred.dims());
    let mut sum = 0.0;
    for ((g, &t), &p) in grad.data_mut().iter_mut().zip(target.data()).zip(pred.data()) {
        let diff = p - t;
        sum += diff.abs();
        *g = if diff > 0.0 {
            1.0 / n
        } else if diff < 0.0 {
            -1.0 / n
        } else {
            0.0
        };
    }
    (sum / n, grad)
}
