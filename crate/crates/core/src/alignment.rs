//! Stage-2 guidance losses.
//!
//! * Semantic alignment: bottleneck features are cut into non-overlapping
//!   `S x S` patches over the en-face axes (depth pooled), projected by a head
//!   (average pool + fully connected), L2-normalized, and contrasted with a
//!   cross-entropy over patch positions: the embedding of the pre-trained model
//!   at `(i, j)` is the anchor, the translator's embedding at `(i, j)` the
//!   positive and all other positions the negatives.
//! * Structure alignment: projection maps are cut into patches, the pairwise
//!   cosine similarities of the flattened patches form a `K x K` matrix, and the
//!   loss is the mean absolute difference of two such matrices over all ordered
//!   off-diagonal pairs.
//!
//! Minimizing the contrastive loss `L` over `K` positions tightens the bound
//! `I(P; Q) >= ln(K - 1) - E[L]`; see [`mutual_information_bound`].

use std::sync::atomic::{AtomicBool, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::FeatureGrid;
use crate::nets::{Grads, ParamId, ParamSet};
use crate::volume::ProjectionMap;

const NORM_TOL: f64 = 1e-6;

/// Patch sizes and embedding width. `None` picks the default side:
/// the full bottleneck resolution when it is at most 8 per side (`S = 1`),
/// otherwise `side / 8`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignmentConfig {
    pub feature_patch: Option<usize>,
    pub map_patch: Option<usize>,
    pub embed_dim: usize,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            feature_patch: None,
            map_patch: None,
            embed_dim: 32,
        }
    }
}

impl AlignmentConfig {
    pub fn feature_patch_for(&self, dims: [usize; 3]) -> usize {
        self.feature_patch.unwrap_or_else(|| {
            let side = dims[0].min(dims[1]);
            if side <= 8 {
                1
            } else {
                (side / 8).max(1)
            }
        })
    }

    pub fn map_patch_for(&self, dims: [usize; 2]) -> usize {
        self.map_patch.unwrap_or_else(|| (dims[0].min(dims[1]) / 8).max(1))
    }
}

/// Average pooling followed by a fully connected layer.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    pub in_dim: usize,
    pub out_dim: usize,
    weight: ParamId,
    bias: ParamId,
}

impl ProjectionHead {
    pub fn new<R: Rng>(params: &mut ParamSet, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = params.add_uniform(format!("{name}.weight"), vec![out_dim, in_dim], bound, rng);
        let bias = params.add_uniform(format!("{name}.bias"), vec![out_dim], bound, rng);
        Self {
            in_dim,
            out_dim,
            weight,
            bias,
        }
    }

    /// Re-attaches to `{name}.weight` / `{name}.bias` already in `params`.
    pub fn from_params(params: &ParamSet, name: &str) -> Result<Self> {
        let missing = || Error::Format(format!("missing projection head {name}"));
        let weight = params.id(&format!("{name}.weight")).ok_or_else(missing)?;
        let bias = params.id(&format!("{name}.bias")).ok_or_else(missing)?;
        match (params.shape(weight), params.shape(bias)) {
            (&[o, i], &[ob]) if o == ob => Ok(Self {
                in_dim: i,
                out_dim: o,
                weight,
                bias,
            }),
            _ => Err(Error::Format(format!("malformed projection head {name}"))),
        }
    }

    pub fn weight_id(&self) -> ParamId {
        self.weight
    }

    pub fn bias_id(&self) -> ParamId {
        self.bias
    }

    fn apply(&self, params: &ParamSet, x: &[f64]) -> Vec<f64> {
        let w = params.get(self.weight);
        let b = params.get(self.bias);
        (0..self.out_dim)
            .map(|o| {
                b[o] + w[o * self.in_dim..(o + 1) * self.in_dim]
                    .iter()
                    .zip(x)
                    .map(|(a, c)| a * c)
                    .sum::<f64>()
            })
            .collect()
    }
}

/// `K = (L/S) * (W/S)` embeddings, row-major over the patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbeddingGrid {
    pub grid: [usize; 2],
    pub dim: usize,
    pub patch_side: usize,
    pub normalized: bool,
    pub embeddings: Vec<f64>,
}

impl PatchEmbeddingGrid {
    pub fn len(&self) -> usize {
        self.grid[0] * self.grid[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, k: usize) -> &[f64] {
        &self.embeddings[k * self.dim..(k + 1) * self.dim]
    }

    /// Builds a grid from raw embeddings, optionally L2-normalizing them.
    pub fn from_embeddings(grid: [usize; 2], dim: usize, embeddings: Vec<f64>, normalize: bool) -> Result<Self> {
        if embeddings.len() != grid[0] * grid[1] * dim || dim == 0 {
            return Err(Error::Shape(format!(
                "{grid:?} grid of {dim}-d embeddings needs {} values, got {}",
                grid[0] * grid[1] * dim,
                embeddings.len()
            )));
        }
        let mut g = Self {
            grid,
            dim,
            patch_side: 1,
            normalized: false,
            embeddings,
        };
        if normalize {
            for row in g.embeddings.chunks_exact_mut(dim) {
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > 0.0 {
                    row.iter_mut().for_each(|v| *v /= n);
                }
            }
            g.normalized = true;
        }
        Ok(g)
    }

    fn check_normalized(&self) -> Result<()> {
        if !self.normalized {
            return Err(Error::Validation("patch embeddings are not L2-normalized".into()));
        }
        for (k, row) in self.embeddings.chunks_exact(self.dim).enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (n - 1.0).abs() > NORM_TOL {
                return Err(Error::Validation(format!("embedding {k} has norm {n}")));
            }
        }
        Ok(())
    }
}

/// Activations kept for [`patchify_backward`].
#[derive(Debug, Clone)]
pub struct PatchTape {
    feature_channels: usize,
    feature_dims: [usize; 3],
    side: usize,
    pooled: Vec<f64>,
    projected: Vec<f64>,
}

fn pool_patches(fg: &FeatureGrid, s: usize) -> Result<([usize; 2], Vec<f64>)> {
    let [l, w, d] = fg.dims();
    if s == 0 || l % s != 0 || w % s != 0 {
        return Err(Error::Shape(format!(
            "feature dims {:?} not divisible by patch side {s}",
            fg.dims()
        )));
    }
    let grid = [l / s, w / s];
    let c = fg.channels();
    let k = grid[0] * grid[1];
    let mut pooled = vec![0.0; k * c];
    let inv = 1.0 / (s * s * d) as f64;
    for ch in 0..c {
        let x = fg.channel(ch);
        for gi in 0..grid[0] {
            for gj in 0..grid[1] {
                let mut sum = 0.0;
                for a in gi * s..(gi + 1) * s {
                    for b in gj * s..(gj + 1) * s {
                        sum += x[(a * w + b) * d..][..d].iter().sum::<f64>();
                    }
                }
                pooled[(gi * grid[1] + gj) * c + ch] = sum * inv;
            }
        }
    }
    Ok((grid, pooled))
}

/// Patch embeddings of a feature grid, L2-normalized.
pub fn patchify_features(
    fg: &FeatureGrid,
    s: usize,
    head: &ProjectionHead,
    params: &ParamSet,
) -> Result<PatchEmbeddingGrid> {
    patchify_with_tape(fg, s, head, params).map(|(g, _)| g)
}

pub fn patchify_with_tape(
    fg: &FeatureGrid,
    s: usize,
    head: &ProjectionHead,
    params: &ParamSet,
) -> Result<(PatchEmbeddingGrid, PatchTape)> {
    if fg.channels() != head.in_dim {
        return Err(Error::Shape(format!(
            "head expects {} channels, features have {}",
            head.in_dim,
            fg.channels()
        )));
    }
    let (grid, pooled) = pool_patches(fg, s)?;
    let k = grid[0] * grid[1];
    let c = fg.channels();
    let mut projected = Vec::with_capacity(k * head.out_dim);
    for p in 0..k {
        projected.extend(head.apply(params, &pooled[p * c..(p + 1) * c]));
    }
    let mut out = PatchEmbeddingGrid::from_embeddings(grid, head.out_dim, projected.clone(), true)?;
    out.patch_side = s;
    Ok((
        out,
        PatchTape {
            feature_channels: c,
            feature_dims: fg.dims(),
            side: s,
            pooled,
            projected,
        },
    ))
}

/// Backpropagates a gradient w.r.t. the normalized embeddings through the
/// normalization, the head (accumulating into `grads`) and the pooling.
/// Returns the gradient w.r.t. the feature grid.
pub fn patchify_backward(
    tape: &PatchTape,
    head: &ProjectionHead,
    params: &ParamSet,
    grad_emb: &[f64],
    grads: &mut Grads,
) -> FeatureGrid {
    let e = head.out_dim;
    let c = tape.feature_channels;
    let k = tape.projected.len() / e;
    let w = params.get(head.weight);
    let mut g_pooled = vec![0.0; k * c];
    {
        let (gw, gb) = grads.pair_mut(head.weight, head.bias);
        for p in 0..k {
            let z = &tape.projected[p * e..(p + 1) * e];
            let g = &grad_emb[p * e..(p + 1) * e];
            let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            let mut gz = vec![0.0; e];
            if norm > 0.0 {
                let y_dot_g: f64 = z.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() / norm;
                for o in 0..e {
                    gz[o] = (g[o] - z[o] / norm * y_dot_g) / norm;
                }
            }
            let x = &tape.pooled[p * c..(p + 1) * c];
            for o in 0..e {
                gb[o] += gz[o];
                for i in 0..c {
                    gw[o * c + i] += gz[o] * x[i];
                    g_pooled[p * c + i] += gz[o] * w[o * c + i];
                }
            }
        }
    }
    let [l, wd, d] = tape.feature_dims;
    let s = tape.side;
    let gcols = wd / s;
    let inv = 1.0 / (s * s * d) as f64;
    let mut g = FeatureGrid::zeros(c, tape.feature_dims);
    for ch in 0..c {
        let gc = g.channel_mut(ch);
        for a in 0..l {
            for b in 0..wd {
                let p = (a / s) * gcols + b / s;
                let v = g_pooled[p * c + ch] * inv;
                gc[(a * wd + b) * d..][..d].iter_mut().for_each(|x| *x = v);
            }
        }
    }
    g
}

/// Softmax over `anchor . P_m / tau` for every candidate `m`.
pub fn contrastive_distribution(anchor: &[f64], candidates: &PatchEmbeddingGrid, tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("temperature must be > 0, got {tau}")));
    }
    if anchor.len() != candidates.dim {
        return Err(Error::Shape(format!(
            "anchor dim {} vs candidate dim {}",
            anchor.len(),
            candidates.dim
        )));
    }
    let logits: Vec<f64> = (0..candidates.len())
        .map(|m| dot(anchor, candidates.get(m)) / tau)
        .collect();
    Ok(softmax(&logits))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|v| v / z).collect()
}

/// Contrastive loss with gradients w.r.t. both embedding sets.
#[derive(Debug, Clone, PartialEq)]
pub struct CsaOutput {
    pub loss: f64,
    pub grad_anchor: Vec<f64>,
    pub grad_candidates: Vec<f64>,
}

/// Mean over anchor positions of `-log softmax(Q_a . P / tau)[a]`.
/// `anchors` come from the pre-trained model, `candidates` from the translator.
pub fn csa_loss(anchors: &PatchEmbeddingGrid, candidates: &PatchEmbeddingGrid, tau: f64) -> Result<f64> {
    csa_loss_with_grad(anchors, candidates, tau).map(|o| o.loss)
}

pub fn csa_loss_with_grad(
    anchors: &PatchEmbeddingGrid,
    candidates: &PatchEmbeddingGrid,
    tau: f64,
) -> Result<CsaOutput> {
    if anchors.grid != candidates.grid || anchors.dim != candidates.dim {
        return Err(Error::Shape(format!(
            "anchor grid {:?}x{} vs candidate grid {:?}x{}",
            anchors.grid, anchors.dim, candidates.grid, candidates.dim
        )));
    }
    anchors.check_normalized()?;
    candidates.check_normalized()?;
    let k = anchors.len();
    let e = anchors.dim;
    let mut loss = 0.0;
    let mut g_q = vec![0.0; k * e];
    let mut g_p = vec![0.0; k * e];
    for a in 0..k {
        let q = anchors.get(a);
        let probs = contrastive_distribution(q, candidates, tau)?;
        let logits: Vec<f64> = (0..k).map(|m| dot(q, candidates.get(m)) / tau).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - logits[a];
        for m in 0..k {
            let ds = (probs[m] - if m == a { 1.0 } else { 0.0 }) / (k as f64 * tau);
            let p = candidates.get(m);
            for c in 0..e {
                g_q[a * e + c] += ds * p[c];
                g_p[m * e + c] += ds * q[c];
            }
        }
    }
    Ok(CsaOutput {
        loss: loss / k as f64,
        grad_anchor: g_q,
        grad_candidates: g_p,
    })
}

/// Right-hand side of the mutual information bound, `ln(K - 1) - loss`.
pub fn mutual_information_bound(k: usize, loss: f64) -> f64 {
    ((k as f64) - 1.0).ln() - loss
}

/// Pairwise patch cosine similarities; the diagonal is excluded and stored as 0.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub k: usize,
    pub values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.values[a * self.k + b]
    }
}

/// Flattened patches, index `i * (W/S) + j`, each patch row-major.
fn map_patches(pm: &ProjectionMap, s: usize) -> Result<(usize, usize, Vec<f64>)> {
    let [l, w] = pm.dims();
    if s == 0 || l % s != 0 || w % s != 0 {
        return Err(Error::Shape(format!(
            "map dims {:?} not divisible by patch side {s}",
            pm.dims()
        )));
    }
    let cols = w / s;
    let k = (l / s) * cols;
    let len = s * s;
    let mut out = vec![0.0; k * len];
    for a in 0..l {
        for b in 0..w {
            let p = (a / s) * cols + b / s;
            out[p * len + (a % s) * s + (b % s)] = pm.get(a, b);
        }
    }
    Ok((k, len, out))
}

static ZERO_PATCH_WARNED: AtomicBool = AtomicBool::new(false);

fn warn_zero_patch() {
    if !ZERO_PATCH_WARNED.swap(true, Ordering::Relaxed) {
        log::warn!("projection map has an all-zero patch; its cosine similarities are set to 0");
    }
}

/// Patches scaled to unit norm, with their norms. `None` marks a patch whose
/// norm is zero or too small to invert.
fn unit_patches(patches: &[f64], len: usize) -> Vec<Option<(Vec<f64>, f64)>> {
    patches
        .chunks_exact(len)
        .map(|p| {
            let n = p.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if n == 0.0 || !(1.0 / n).is_finite() {
                return None;
            }
            // Rescale before squaring so tiny patches do not underflow.
            let r: Vec<f64> = p.iter().map(|v| v / n).collect();
            let rn = dot(&r, &r).sqrt();
            let norm = n * rn;
            (1.0 / norm)
                .is_finite()
                .then(|| (r.iter().map(|v| v / rn).collect(), norm))
        })
        .collect()
}

/// Cosine of two unit patches, `None` if either is zero-norm.
fn unit_cos(a: &Option<(Vec<f64>, f64)>, b: &Option<(Vec<f64>, f64)>) -> Option<f64> {
    match (a, b) {
        (Some((a, _)), Some((b, _))) => Some(dot(a, b).clamp(-1.0, 1.0)),
        _ => None,
    }
}

pub fn patch_cosine_matrix(pm: &ProjectionMap, s: usize) -> Result<SimilarityMatrix> {
    let (k, len, patches) = map_patches(pm, s)?;
    let units = unit_patches(&patches, len);
    if units.iter().any(Option::is_none) {
        warn_zero_patch();
    }
    let mut values = vec![0.0; k * k];
    for a in 0..k {
        for b in (a + 1)..k {
            let c = unit_cos(&units[a], &units[b]).unwrap_or(0.0);
            values[a * k + b] = c;
            values[b * k + a] = c;
        }
    }
    Ok(SimilarityMatrix { k, values })
}

fn mean_abs_offdiag(a: &SimilarityMatrix, b: &SimilarityMatrix) -> f64 {
    let k = a.k;
    if k < 2 {
        return 0.0;
    }
    let mut sum = 0.0;
    for i in 0..k {
        for j in 0..k {
            if i != j {
                sum += (a.get(i, j) - b.get(i, j)).abs();
            }
        }
    }
    sum / (k * (k - 1)) as f64
}

/// Mean over ordered off-diagonal pairs of `|C_pre - C_trans|`.
pub fn vsa_loss(pm_pretrained: &ProjectionMap, pm_translated: &ProjectionMap, s: usize) -> Result<f64> {
    if pm_pretrained.dims() != pm_translated.dims() {
        return Err(Error::Shape(format!(
            "projection maps {:?} vs {:?}",
            pm_pretrained.dims(),
            pm_translated.dims()
        )));
    }
    let a = patch_cosine_matrix(pm_pretrained, s)?;
    let b = patch_cosine_matrix(pm_translated, s)?;
    Ok(mean_abs_offdiag(&a, &b))
}

/// [`vsa_loss`] and its gradient w.r.t. the translated map (row-major `L x W`).
pub fn vsa_loss_with_grad(
    pm_pretrained: &ProjectionMap,
    pm_translated: &ProjectionMap,
    s: usize,
) -> Result<(f64, Vec<f64>)> {
    let loss = vsa_loss(pm_pretrained, pm_translated, s)?;
    let target = patch_cosine_matrix(pm_pretrained, s)?;
    let (k, len, patches) = map_patches(pm_translated, s)?;
    let units = unit_patches(&patches, len);
    let mut g_patches = vec![0.0; k * len];
    if k >= 2 {
        let scale = 1.0 / (k * (k - 1)) as f64;
        for a in 0..k {
            for b in (a + 1)..k {
                let (Some((ua, na)), Some((ub, nb))) = (&units[a], &units[b]) else {
                    continue;
                };
                let cos = dot(ua, ub);
                // Both (a, b) and (b, a) contribute.
                let diff = target.get(a, b) - cos.clamp(-1.0, 1.0);
                if diff == 0.0 {
                    continue;
                }
                let dl_dcos = -2.0 * scale * diff.signum();
                // d cos / d p_a = (u_b - cos u_a) / |p_a|
                let (ga, gb) = (dl_dcos / na, dl_dcos / nb);
                for t in 0..len {
                    g_patches[a * len + t] += ga * (ub[t] - cos * ua[t]);
                    g_patches[b * len + t] += gb * (ua[t] - cos * ub[t]);
                }
            }
        }
    }
    let [l, w] = pm_translated.dims();
    let cols = w / s;
    let mut grad = vec![0.0; l * w];
    for a in 0..l {
        for b in 0..w {
            let p = (a / s) * cols + b / s;
            grad[a * w + b] = g_patches[p * len + (a % s) * s + (b % s)];
        }
    }
    Ok((loss, grad))
}
