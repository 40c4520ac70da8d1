//! Synthetic retinal vessel phantoms.
//!
//! A phantom is a layered retina (bands along depth under a gently curved
//! inner surface) crossed by tubular vessels that run roughly parallel to the
//! en-face plane inside the inner retina. The OCT volume shows the layers with
//! speckle, a dark vessel lumen and a shadow below each vessel. The OCTA
//! volume shows low decorrelation noise everywhere and bright flow inside the
//! vessels, except for vessel segments that are dropped to imitate scan
//! dropout.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Modality, Volume};
use crate::error::{Error, Result};
use crate::par;

/// Arc length of one dropout segment, in voxels.
const SEGMENT_LEN: f64 = 6.0;
const STEP: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    pub vessel_count: usize,
    /// Inclusive radius range in voxels.
    pub vessel_radius_range: (f64, f64),
    pub speckle_noise_sd: f64,
    /// Probability that a vessel segment is missing from the OCTA volume.
    pub discontinuity_rate: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dims: [32, 32, 32],
            vessel_count: 6,
            vessel_radius_range: (1.0, 2.0),
            speckle_noise_sd: 0.05,
            discontinuity_rate: 0.1,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.vessel_radius_range;
        if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && hi >= lo) {
            return Err(Error::Config(format!(
                "vessel_radius_range must be positive with min <= max, got {:?}",
                self.vessel_radius_range
            )));
        }
        if !(0.0..=1.0).contains(&self.discontinuity_rate) {
            return Err(Error::Config(format!(
                "discontinuity_rate {} outside [0,1]",
                self.discontinuity_rate
            )));
        }
        if !(self.speckle_noise_sd.is_finite() && self.speckle_noise_sd >= 0.0) {
            return Err(Error::Config(format!(
                "speckle_noise_sd must be >= 0, got {}",
                self.speckle_noise_sd
            )));
        }
        let need = (2.0 * lo.ceil() + 4.0) as usize;
        let min_dim = *self.dims.iter().min().unwrap();
        if min_dim < need.max(8) {
            return Err(Error::Config(format!(
                "dims {:?} too small for vessels of radius {lo} (need every side >= {})",
                self.dims,
                need.max(8)
            )));
        }
        Ok(())
    }

    /// Config for subject `i` of a generated dataset.
    pub fn for_subject(&self, i: usize) -> Self {
        Self {
            seed: splitmix64(self.seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
            ..self.clone()
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct PhantomPair {
    pub oct: Volume,
    pub octa: Volume,
    /// Every voxel inside a generated vessel.
    pub vessel_mask: Vec<bool>,
    /// Vessel voxels that survive dropout, i.e. bright in the OCTA volume.
    pub visible_mask: Vec<bool>,
    /// Sampled centerline points `(l, w, d)` per vessel.
    pub centerlines: Vec<Vec<[f64; 3]>>,
}

/// OCT reflectivity of the band at relative retinal depth `t` in `[0, 1)`.
fn band_intensity(t: f64) -> f64 {
    const BANDS: [(f64, f64); 8] = [
        (0.10, 0.75),
        (0.22, 0.45),
        (0.35, 0.60),
        (0.47, 0.30),
        (0.57, 0.55),
        (0.82, 0.25),
        (0.92, 0.70),
        (1.00, 0.90),
    ];
    if t < 0.0 {
        return 0.03;
    }
    for (upper, v) in BANDS {
        if t < upper {
            return v;
        }
    }
    (0.4 - 0.3 * (t - 1.0)).max(0.1)
}

pub fn generate_phantom(cfg: &PhantomConfig) -> Result<PhantomPair> {
    cfg.validate()?;
    let [nl, nw, nd] = cfg.dims;
    let n = nl * nw * nd;
    let idx = |l: usize, w: usize, d: usize| (l * nw + w) * nd + d;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");

    // Inner retinal surface and thickness.
    let f1 = rng.random_range(0.5..1.5);
    let f2 = rng.random_range(0.5..1.5);
    let p1 = rng.random_range(0.0..1.0);
    let p2 = rng.random_range(0.0..1.0);
    let d = nd as f64;
    let thickness = 0.6 * d;
    let surface = |l: f64, w: f64| -> f64 {
        0.15 * d
            + 0.05 * d * (2.0 * PI * (l / nl as f64 * f1 + p1)).sin() * (2.0 * PI * (w / nw as f64 * f2 + p2)).cos()
    };

    let mut vessel_mask = vec![false; n];
    let mut visible_mask = vec![false; n];
    let mut dist = vec![f64::INFINITY; n];
    let mut centerlines = Vec::with_capacity(cfg.vessel_count);
    // Deepest vessel voxel per (l, w) column, for shadowing.
    let mut shadow_from = vec![usize::MAX; nl * nw];

    let (r_lo, r_hi) = cfg.vessel_radius_range;
    for _ in 0..cfg.vessel_count {
        let radius = if r_hi > r_lo {
            rng.random_range(r_lo..=r_hi)
        } else {
            r_lo
        };
        let rel_depth = rng.random_range(0.12..0.40);
        // Start on a random edge, head into the interior.
        let edge = rng.random_range(0..4u8);
        let s = rng.random_range(0.1..0.9);
        let (mut l, mut w, base_heading) = match edge {
            0 => (0.0, s * nw as f64, 0.0),
            1 => (nl as f64 - 1.0, s * nw as f64, PI),
            2 => (s * nl as f64, 0.0, PI / 2.0),
            _ => (s * nl as f64, nw as f64 - 1.0, -PI / 2.0),
        };
        let mut heading = base_heading + rng.random_range(-0.6..0.6);
        let max_steps = ((2 * (nl + nw)) as f64 / STEP) as usize;
        let mut points = Vec::new();
        for _ in 0..max_steps {
            if l < 0.0 || w < 0.0 || l > nl as f64 - 1.0 || w > nw as f64 - 1.0 {
                break;
            }
            let z = (surface(l, w) + rel_depth * thickness).clamp(0.0, d - 1.0);
            points.push([l, w, z]);
            heading += 0.08 * unit.sample(&mut rng);
            l += STEP * heading.cos();
            w += STEP * heading.sin();
        }
        let segments = (points.len() as f64 * STEP / SEGMENT_LEN).ceil() as usize;
        let dropped: Vec<bool> = (0..segments.max(1))
            .map(|_| rng.random::<f64>() < cfg.discontinuity_rate)
            .collect();

        let reach = radius.ceil() as isize;
        for (pi, p) in points.iter().enumerate() {
            let seg = ((pi as f64 * STEP) / SEGMENT_LEN) as usize;
            let keep = !dropped[seg.min(dropped.len() - 1)];
            let c = [p[0].round() as isize, p[1].round() as isize, p[2].round() as isize];
            for dl in -reach..=reach {
                for dw in -reach..=reach {
                    for dz in -reach..=reach {
                        let (a, b, z) = (c[0] + dl, c[1] + dw, c[2] + dz);
                        if a < 0 || b < 0 || z < 0 || a >= nl as isize || b >= nw as isize || z >= nd as isize {
                            continue;
                        }
                        let r2 = (a as f64 - p[0]).powi(2) + (b as f64 - p[1]).powi(2) + (z as f64 - p[2]).powi(2);
                        let r = r2.sqrt();
                        let centre_voxel = dl == 0 && dw == 0 && dz == 0;
                        if r <= radius || centre_voxel {
                            let i = idx(a as usize, b as usize, z as usize);
                            vessel_mask[i] = true;
                            if keep {
                                visible_mask[i] = true;
                            }
                            if r < dist[i] {
                                dist[i] = r;
                            }
                            let col = a as usize * nw + b as usize;
                            if shadow_from[col] == usize::MAX || z as usize > shadow_from[col] {
                                shadow_from[col] = z as usize;
                            }
                        }
                    }
                }
            }
        }
        centerlines.push(points);
    }

    let sd = cfg.speckle_noise_sd;
    let mut oct = vec![0f32; n];
    let mut octa = vec![0f32; n];
    for a in 0..nl {
        for b in 0..nw {
            let top = surface(a as f64, b as f64);
            let shadow = shadow_from[a * nw + b];
            for z in 0..nd {
                let i = idx(a, b, z);
                let t = (z as f64 - top) / thickness;
                let mut refl = band_intensity(t);
                if vessel_mask[i] {
                    refl *= 0.55;
                } else if shadow != usize::MAX && z > shadow {
                    refl *= 0.6;
                }
                let speckle = refl * (1.0 + sd * unit.sample(&mut rng)) + 0.5 * sd * unit.sample(&mut rng);
                oct[i] = speckle.clamp(0.0, 1.0) as f32;

                let flow = if visible_mask[i] {
                    let radius_frac = (dist[i] / r_hi.max(1.0)).min(1.0);
                    0.70 + 0.20 * (1.0 - radius_frac) + 0.5 * sd * unit.sample(&mut rng)
                } else {
                    0.04 + 0.04 * rng.random::<f64>()
                };
                octa[i] = flow.clamp(0.0, 1.0) as f32;
            }
        }
    }

    Ok(PhantomPair {
        oct: Volume::new(cfg.dims, oct, Modality::Oct)?,
        octa: Volume::new(cfg.dims, octa, Modality::Octa)?,
        vessel_mask,
        visible_mask,
        centerlines,
    })
}

pub fn generate_phantom_pair(cfg: &PhantomConfig) -> Result<(Volume, Volume)> {
    let p = generate_phantom(cfg)?;
    Ok((p.oct, p.octa))
}

/// `count` subjects with per-subject seeds derived from `cfg.seed`,
/// generated in parallel and returned in subject order.
pub fn generate_dataset(cfg: &PhantomConfig, count: usize) -> Result<Vec<PhantomPair>> {
    cfg.validate()?;
    par::map_range(count, |i| generate_phantom(&cfg.for_subject(i)))
        .into_iter()
        .collect()
}
