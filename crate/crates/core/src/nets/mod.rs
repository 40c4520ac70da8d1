//! 3D convolutional VQ-VAE used for the OCT model, the OCTA model and the
//! OCT to OCTA translator.
//!
//! Encoder: stem conv, then `blocks` stages of `resblocks_per_block`
//! pre-activation residual blocks followed by a stride-2 conv that doubles the
//! channel count, then a 1x1x1 conv to the codebook dimension. The decoder
//! mirrors it with nearest-neighbour upsampling + conv, and ends in a sigmoid
//! so outputs stay in `[0, 1]`.
//!
//! With [`CodebookLevels::PerDownsample`] every downsampling stage except the
//! last gets its own codebook; those quantized maps are added back into the
//! decoder at the matching resolution.

mod layers;
mod params;

pub use params::{Grads, ParamId, ParamSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::FeatureGrid;
use crate::ops::{self, ConvGeom};
use crate::volume::{Modality, Volume};
use crate::vq::{self, Codebook, QuantizeResult};
use layers::{Conv, ResBlock, ResTape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodebookLevels {
    #[default]
    BottleneckOnly,
    PerDownsample,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub blocks: usize,
    pub resblocks_per_block: usize,
    pub base_channels: usize,
    pub downsample_factor_per_block: usize,
    pub codebook_levels: CodebookLevels,
    /// Codebook entry count `N`.
    pub codebook_size: usize,
    /// Codeword dimension `d`.
    pub codebook_dim: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            blocks: 4,
            resblocks_per_block: 2,
            base_channels: 8,
            downsample_factor_per_block: 2,
            codebook_levels: CodebookLevels::BottleneckOnly,
            codebook_size: 512,
            codebook_dim: 64,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks < 1 || self.base_channels < 1 {
            return Err(Error::Config("blocks and base_channels must be >= 1".into()));
        }
        if self.downsample_factor_per_block != 2 {
            return Err(Error::Config(format!(
                "only a downsample factor of 2 is supported, got {}",
                self.downsample_factor_per_block
            )));
        }
        if self.codebook_size < 2 || self.codebook_dim < 1 {
            return Err(Error::Config("codebook needs N >= 2 and d >= 1".into()));
        }
        Ok(())
    }

    /// Channel width after stage `i` (`i = 0` is the stem).
    pub fn channels(&self, i: usize) -> usize {
        self.base_channels << i
    }

    pub fn total_downsample(&self) -> usize {
        1 << self.blocks
    }

    pub fn check_dims(&self, dims: [usize; 3]) -> Result<()> {
        let f = self.total_downsample();
        if dims.iter().any(|&n| n == 0 || n % f != 0) {
            return Err(Error::Shape(format!(
                "volume dims {dims:?} must be divisible by {f} (2^{} blocks)",
                self.blocks
            )));
        }
        Ok(())
    }

    pub fn feature_dims(&self, dims: [usize; 3]) -> [usize; 3] {
        let f = self.total_downsample();
        [dims[0] / f, dims[1] / f, dims[2] / f]
    }

    pub fn skip_levels(&self) -> usize {
        match self.codebook_levels {
            CodebookLevels::BottleneckOnly => 0,
            CodebookLevels::PerDownsample => self.blocks - 1,
        }
    }
}

#[derive(Debug, Clone)]
struct EncStage {
    res: Vec<ResBlock>,
    down: Conv,
}

#[derive(Debug, Clone)]
struct DecStage {
    up: Conv,
    res: Vec<ResBlock>,
}

#[derive(Debug, Clone)]
struct Arch {
    stem: Conv,
    enc: Vec<EncStage>,
    pre_quant: Conv,
    codebook: ParamId,
    skip_codebooks: Vec<ParamId>,
    post_quant: Conv,
    /// Indexed by stage; run in reverse.
    dec: Vec<DecStage>,
    out: Conv,
}

#[derive(Debug, Clone)]
struct EncStageTape {
    res: Vec<ResTape>,
    down_in: FeatureGrid,
}

#[derive(Debug, Clone)]
struct EncTape {
    x: FeatureGrid,
    stages: Vec<EncStageTape>,
    pre_in: FeatureGrid,
    pre_act: FeatureGrid,
}

#[derive(Debug, Clone)]
struct DecStageTape {
    up_in: FeatureGrid,
    res: Vec<ResTape>,
}

#[derive(Debug, Clone)]
struct DecTape {
    q: FeatureGrid,
    /// Indexed by stage.
    stages: Vec<Option<DecStageTape>>,
    out_in: FeatureGrid,
    out_act: FeatureGrid,
}

/// Everything a training step needs from one forward pass.
#[derive(Debug, Clone)]
pub struct TrainForward {
    /// Decoder output in `[0, 1]`, one channel.
    pub recon: FeatureGrid,
    /// Unquantized bottleneck features `u`.
    pub features: FeatureGrid,
    pub quant: QuantizeResult,
    /// Unquantized and quantized skip maps, one per skip level.
    pub skip_features: Vec<FeatureGrid>,
    pub skip_quants: Vec<QuantizeResult>,
    enc: EncTape,
    dec: DecTape,
}

impl TrainForward {
    /// Sum of codebook terms over all codebooks.
    pub fn codebook_term(&self) -> f64 {
        self.quant.codebook_term + self.skip_quants.iter().map(|q| q.codebook_term).sum::<f64>()
    }

    /// Sum of commitment terms over all codebooks.
    pub fn commitment_term(&self) -> f64 {
        self.quant.commitment_term + self.skip_quants.iter().map(|q| q.commitment_term).sum::<f64>()
    }
}

/// Extra upstream gradients injected at the bottleneck by other losses.
#[derive(Debug, Clone, Copy, Default)]
pub struct BottleneckGrads<'a> {
    /// Gradient w.r.t. the unquantized features `u`.
    pub features: Option<&'a FeatureGrid>,
    /// Gradient w.r.t. the quantized features; routed to the selected codebook rows.
    pub quantized: Option<&'a FeatureGrid>,
}

#[derive(Debug, Clone)]
pub struct VqVae {
    config: NetConfig,
    params: ParamSet,
    arch: Arch,
}

impl VqVae {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let b = config.blocks;
        let r = config.resblocks_per_block;
        let c = |i| config.channels(i);

        let stem = Conv::new(&mut p, "enc.stem", ConvGeom::same(1, c(0), 3), &mut rng);
        let enc = (0..b)
            .map(|i| EncStage {
                res: (0..r)
                    .map(|j| ResBlock::new(&mut p, &format!("enc.stage{i}.res{j}"), c(i), &mut rng))
                    .collect(),
                down: Conv::new(
                    &mut p,
                    &format!("enc.stage{i}.down"),
                    ConvGeom {
                        in_channels: c(i),
                        out_channels: c(i + 1),
                        kernel: 3,
                        stride: 2,
                        pad: 1,
                    },
                    &mut rng,
                ),
            })
            .collect();
        let pre_quant = Conv::new(
            &mut p,
            "enc.pre_quant",
            ConvGeom::same(c(b), config.codebook_dim, 1),
            &mut rng,
        );

        let n = config.codebook_size;
        let cb_bound = 1.0 / n as f64;
        let codebook = p.add_uniform("codebook", vec![n, config.codebook_dim], cb_bound, &mut rng);
        let skip_codebooks = (0..config.skip_levels())
            .map(|i| p.add_uniform(format!("codebook.skip{i}"), vec![n, c(i + 1)], cb_bound, &mut rng))
            .collect();

        let post_quant = Conv::new(
            &mut p,
            "dec.post_quant",
            ConvGeom::same(config.codebook_dim, c(b), 1),
            &mut rng,
        );
        let dec = (0..b)
            .map(|i| DecStage {
                up: Conv::new(
                    &mut p,
                    &format!("dec.stage{i}.up"),
                    ConvGeom::same(c(i + 1), c(i), 3),
                    &mut rng,
                ),
                res: (0..r)
                    .map(|j| ResBlock::new(&mut p, &format!("dec.stage{i}.res{j}"), c(i), &mut rng))
                    .collect(),
            })
            .collect();
        let out = Conv::new(&mut p, "dec.out", ConvGeom::same(c(0), 1, 3), &mut rng);

        Ok(Self {
            config,
            params: p,
            arch: Arch {
                stem,
                enc,
                pre_quant,
                codebook,
                skip_codebooks,
                post_quant,
                dec,
                out,
            },
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn codebook_id(&self) -> ParamId {
        self.arch.codebook
    }

    pub fn codebook(&self) -> Codebook {
        Codebook::new(
            self.config.codebook_size,
            self.config.codebook_dim,
            self.params.get(self.arch.codebook).to_vec(),
        )
        .expect("codebook parameters are well-formed")
    }

    /// Id of the weight of the encoder's final (pre-quantization) layer.
    pub fn pre_quant_ids(&self) -> (ParamId, ParamId) {
        (self.arch.pre_quant.weight, self.arch.pre_quant.bias)
    }

    fn encode_grid(&self, x: FeatureGrid) -> (FeatureGrid, Vec<FeatureGrid>, EncTape) {
        let p = &self.params;
        let mut h = self.arch.stem.forward(p, &x);
        let mut stages = Vec::with_capacity(self.arch.enc.len());
        let mut skips = Vec::new();
        for (i, st) in self.arch.enc.iter().enumerate() {
            let mut res = Vec::with_capacity(st.res.len());
            for rb in &st.res {
                let (y, t) = rb.forward(p, h);
                res.push(t);
                h = y;
            }
            let down_in = h;
            h = st.down.forward(p, &down_in);
            if i < self.config.skip_levels() {
                skips.push(h.clone());
            }
            stages.push(EncStageTape { res, down_in });
        }
        let pre_act = ops::silu(&h);
        let u = self.arch.pre_quant.forward(p, &pre_act);
        (
            u,
            skips,
            EncTape {
                x,
                stages,
                pre_in: h,
                pre_act,
            },
        )
    }

    fn encode_backward(&self, tape: &EncTape, grad_u: &FeatureGrid, grad_skips: &[FeatureGrid], grads: &mut Grads) {
        let p = &self.params;
        let g = self.arch.pre_quant.backward(p, &tape.pre_act, grad_u, grads);
        let mut g = ops::silu_backward(&tape.pre_in, &g);
        for (i, st) in self.arch.enc.iter().enumerate().rev() {
            if let Some(gs) = grad_skips.get(i) {
                g.add_assign(gs);
            }
            let stt = &tape.stages[i];
            g = st.down.backward(p, &stt.down_in, &g, grads);
            for (rb, rt) in st.res.iter().zip(&stt.res).rev() {
                g = rb.backward(p, rt, &g, grads);
            }
        }
        let _ = self.arch.stem.backward(p, &tape.x, &g, grads);
    }

    fn decode_grid(&self, q: FeatureGrid, skips: &[FeatureGrid]) -> (FeatureGrid, DecTape) {
        let p = &self.params;
        let mut h = self.arch.post_quant.forward(p, &q);
        let mut stages: Vec<Option<DecStageTape>> = vec![None; self.arch.dec.len()];
        for (i, st) in self.arch.dec.iter().enumerate().rev() {
            if let Some(s) = skips.get(i) {
                h.add_assign(s);
            }
            let up_in = ops::upsample2(&h);
            h = st.up.forward(p, &up_in);
            let mut res = Vec::with_capacity(st.res.len());
            for rb in &st.res {
                let (y, t) = rb.forward(p, h);
                res.push(t);
                h = y;
            }
            stages[i] = Some(DecStageTape { up_in, res });
        }
        let out_act = ops::silu(&h);
        let mut y = self.arch.out.forward(p, &out_act);
        y.data_mut().iter_mut().for_each(|v| *v = ops::sigmoid(*v));
        (
            y,
            DecTape {
                q,
                stages,
                out_in: h,
                out_act,
            },
        )
    }

    /// Returns the gradient w.r.t. the decoder input and each skip input.
    fn decode_backward(
        &self,
        tape: &DecTape,
        recon: &FeatureGrid,
        grad_recon: &FeatureGrid,
        grads: &mut Grads,
    ) -> (FeatureGrid, Vec<FeatureGrid>) {
        let p = &self.params;
        let mut g_logits = grad_recon.clone();
        for (g, &y) in g_logits.data_mut().iter_mut().zip(recon.data()) {
            *g *= y * (1.0 - y);
        }
        let g = self.arch.out.backward(p, &tape.out_act, &g_logits, grads);
        let mut g = ops::silu_backward(&tape.out_in, &g);
        let mut g_skips = vec![FeatureGrid::zeros(0, [0, 0, 0]); self.config.skip_levels()];
        for (i, st) in self.arch.dec.iter().enumerate() {
            let stt = tape.stages[i].as_ref().expect("decoder stage recorded");
            for (rb, rt) in st.res.iter().zip(&stt.res).rev() {
                g = rb.backward(p, rt, &g, grads);
            }
            g = st.up.backward(p, &stt.up_in, &g, grads);
            g = ops::upsample2_backward(&g);
            if i < g_skips.len() {
                g_skips[i] = g.clone();
            }
        }
        let gq = self.arch.post_quant.backward(p, &tape.q, &g, grads);
        (gq, g_skips)
    }

    fn quantize_level(&self, id: ParamId, u: &FeatureGrid) -> Result<QuantizeResult> {
        let shape = self.params.shape(id);
        vq::quantize_with(u, self.params.get(id), shape[0], shape[1])
    }

    /// Full forward pass keeping every activation needed by [`VqVae::backward`].
    pub fn forward_train(&self, x: &FeatureGrid) -> Result<TrainForward> {
        if x.channels() != 1 {
            return Err(Error::Shape(format!("expected 1 input channel, got {}", x.channels())));
        }
        self.config.check_dims(x.dims())?;
        let (u, skip_features, enc) = self.encode_grid(x.clone());
        let quant = self.quantize_level(self.arch.codebook, &u)?;
        let mut skip_quants = Vec::with_capacity(skip_features.len());
        for (id, s) in self.arch.skip_codebooks.iter().zip(&skip_features) {
            skip_quants.push(self.quantize_level(*id, s)?);
        }
        // Straight-through: the decoder sees the codewords, gradients pass to u.
        let dec_in = vq::straight_through(&u, &quant.quantized)?;
        let skip_in: Vec<FeatureGrid> = skip_quants.iter().map(|q| q.quantized.clone()).collect();
        let (recon, dec) = self.decode_grid(dec_in, &skip_in);
        Ok(TrainForward {
            recon,
            features: u,
            quant,
            skip_features,
            skip_quants,
            enc,
            dec,
        })
    }

    /// Backpropagates `grad_recon` (w.r.t. the reconstruction), the codebook
    /// and weighted commitment terms of every codebook, and any extra
    /// bottleneck gradients. Accumulates into `grads`.
    pub fn backward(
        &self,
        fwd: &TrainForward,
        grad_recon: &FeatureGrid,
        extra: BottleneckGrads<'_>,
        commitment_weight: f64,
        grads: &mut Grads,
    ) {
        let (g_dec_in, g_skip_in) = self.decode_backward(&fwd.dec, &fwd.recon, grad_recon, grads);

        let n = self.config.codebook_size;
        let terms = fwd.quant.term_gradients(&fwd.features, n, commitment_weight);
        let mut g_u = vq::straight_through_backward(&g_dec_in);
        g_u.add_assign(&terms.features);
        if let Some(gf) = extra.features {
            g_u.add_assign(gf);
        }
        {
            let gcb = grads.get_mut(self.arch.codebook);
            for (a, b) in gcb.iter_mut().zip(&terms.codebook) {
                *a += b;
            }
            if let Some(gq) = extra.quantized {
                let d = gq.channels();
                for (pos, &k) in fwd.quant.indices.iter().enumerate() {
                    for c in 0..d {
                        gcb[k * d + c] += gq.channel(c)[pos];
                    }
                }
            }
        }

        let mut g_skip_u = Vec::with_capacity(fwd.skip_quants.len());
        for (i, (sq, su)) in fwd.skip_quants.iter().zip(&fwd.skip_features).enumerate() {
            let t = sq.term_gradients(su, n, commitment_weight);
            let mut g = vq::straight_through_backward(&g_skip_in[i]);
            g.add_assign(&t.features);
            g_skip_u.push(g);
            let gcb = grads.get_mut(self.arch.skip_codebooks[i]);
            for (a, b) in gcb.iter_mut().zip(&t.codebook) {
                *a += b;
            }
        }
        self.encode_backward(&fwd.enc, &g_u, &g_skip_u, grads);
    }

    /// Unquantized bottleneck features of a volume.
    pub fn encode(&self, vol: &Volume) -> Result<FeatureGrid> {
        self.config.check_dims(vol.dims())?;
        Ok(self.encode_grid(vol.to_grid()).0)
    }

    /// Decodes bottleneck codes. Only valid without skip codebooks; see
    /// [`VqVae::decode_levels`].
    pub fn decode(&self, q: &FeatureGrid) -> Result<Volume> {
        if self.config.skip_levels() > 0 {
            return Err(Error::Config("per-downsample codebooks need decode_levels".into()));
        }
        self.decode_levels(q, &[])
    }

    pub fn decode_levels(&self, q: &FeatureGrid, skips: &[FeatureGrid]) -> Result<Volume> {
        Volume::from_grid(&self.decode_to_grid(q, skips)?, Modality::Oct2Octa)
    }

    /// Decoder output without the `f32` rounding of [`Volume`].
    pub fn decode_to_grid(&self, q: &FeatureGrid, skips: &[FeatureGrid]) -> Result<FeatureGrid> {
        if q.channels() != self.config.codebook_dim {
            return Err(Error::Shape(format!(
                "decoder expects {} channels, got {}",
                self.config.codebook_dim,
                q.channels()
            )));
        }
        if skips.len() != self.config.skip_levels() {
            return Err(Error::Shape(format!(
                "decoder expects {} skip maps, got {}",
                self.config.skip_levels(),
                skips.len()
            )));
        }
        for (i, s) in skips.iter().enumerate() {
            let f = 1usize << (i + 1);
            let want = [
                q.dims()[0] << self.config.blocks,
                q.dims()[1] << self.config.blocks,
                q.dims()[2] << self.config.blocks,
            ];
            let want = [want[0] / f, want[1] / f, want[2] / f];
            if s.channels() != self.config.channels(i + 1) || s.dims() != want {
                return Err(Error::Shape(format!(
                    "skip map {i} has shape {}x{:?}",
                    s.channels(),
                    s.dims()
                )));
            }
        }
        Ok(self.decode_grid(q.clone(), skips).0)
    }

    /// Encode, quantize, decode. Returns the reconstruction, the bottleneck
    /// quantization and the unquantized bottleneck features.
    pub fn forward_vqvae(&self, vol: &Volume) -> Result<(Volume, QuantizeResult, FeatureGrid)> {
        let fwd = self.forward_train(&vol.to_grid())?;
        let out = Volume::from_grid(&fwd.recon, vol.modality())?;
        Ok((out, fwd.quant, fwd.features))
    }

    /// Replaces all parameters; layout must match this architecture.
    pub fn load_params(&mut self, params: &ParamSet) -> Result<()> {
        self.params.load_from(params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny(levels: CodebookLevels) -> NetConfig {
        NetConfig {
            blocks: 2,
            resblocks_per_block: 1,
            base_channels: 2,
            downsample_factor_per_block: 2,
            codebook_levels: levels,
            codebook_size: 6,
            codebook_dim: 3,
        }
    }

    fn random_volume(seed: u64, dims: [usize; 3]) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims[0] * dims[1] * dims[2];
        Volume::new(dims, (0..n).map(|_| rng.random::<f32>()).collect(), Modality::Oct).unwrap()
    }

    #[test]
    fn encoder_output_shape_for_32_cube() {
        let cfg = NetConfig {
            base_channels: 2,
            resblocks_per_block: 1,
            codebook_size: 8,
            codebook_dim: 4,
            ..Default::default()
        };
        let net = VqVae::new(cfg, 0).unwrap();
        let v = random_volume(1, [32, 32, 32]);
        let u = net.encode(&v).unwrap();
        assert_eq!(u.dims(), [2, 2, 2]);
        assert_eq!(u.channels(), 4);
        let (rec, qr, _) = net.forward_vqvae(&v).unwrap();
        assert_eq!(rec.dims(), [32, 32, 32]);
        assert_eq!(qr.indices.len(), 8);
    }

    #[test]
    fn indivisible_dims_are_shape_errors() {
        let net = VqVae::new(tiny(CodebookLevels::BottleneckOnly), 0).unwrap();
        let v = random_volume(1, [8, 8, 6]);
        assert!(matches!(net.encode(&v), Err(Error::Shape(_))));
        assert!(matches!(net.forward_vqvae(&v), Err(Error::Shape(_))));
    }

    #[test]
    fn deterministic_construction_and_outputs() {
        let a = VqVae::new(tiny(CodebookLevels::BottleneckOnly), 5).unwrap();
        let b = VqVae::new(tiny(CodebookLevels::BottleneckOnly), 5).unwrap();
        assert_eq!(a.params().hash(), b.params().hash());
        let v = random_volume(2, [8, 8, 8]);
        assert_eq!(a.encode(&v).unwrap(), b.encode(&v).unwrap());
        assert_eq!(a.encode(&v).unwrap(), a.encode(&v).unwrap());
        let c = VqVae::new(tiny(CodebookLevels::BottleneckOnly), 6).unwrap();
        assert_ne!(a.params().hash(), c.params().hash());
    }

    #[test]
    fn zeroed_final_encoder_layer_gives_zero_features() {
        let mut net = VqVae::new(tiny(CodebookLevels::BottleneckOnly), 1).unwrap();
        let (w, b) = net.pre_quant_ids();
        net.params_mut().get_mut(w).fill(0.0);
        net.params_mut().get_mut(b).fill(0.0);
        let u = net.encode(&random_volume(3, [8, 8, 8])).unwrap();
        assert!(u.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn decoder_outputs_in_unit_interval_and_shape_round_trip() {
        for levels in [CodebookLevels::BottleneckOnly, CodebookLevels::PerDownsample] {
            let net = VqVae::new(tiny(levels), 2).unwrap();
            for dims in [[8, 8, 8], [4, 8, 12]] {
                let v = random_volume(4, dims);
                let fwd = net.forward_train(&v.to_grid()).unwrap();
                assert_eq!(fwd.recon.dims(), dims);
                assert!(fwd.recon.data().iter().all(|&y| (0.0..=1.0).contains(&y)));
                let cb = net.codebook();
                let rows = fwd.quant.quantized.to_rows();
                for (p, &k) in fwd.quant.indices.iter().enumerate() {
                    assert_eq!(&rows[p * 3..p * 3 + 3], cb.row(k));
                }
            }
        }
    }

    #[test]
    fn decode_matches_training_forward() {
        let net = VqVae::new(tiny(CodebookLevels::BottleneckOnly), 2).unwrap();
        let v = random_volume(4, [8, 8, 8]);
        let fwd = net.forward_train(&v.to_grid()).unwrap();
        let dec = net.decode(&fwd.quant.quantized).unwrap();
        assert_eq!(dec, Volume::from_grid(&fwd.recon, Modality::Oct2Octa).unwrap());
        let skip = VqVae::new(tiny(CodebookLevels::PerDownsample), 2).unwrap();
        assert!(skip.decode(&fwd.quant.quantized).is_err());
        assert!(net.decode(&FeatureGrid::zeros(2, [2, 2, 2])).is_err());
    }

    /// Scalar objective for finite-difference checks: mean |x - recon| plus
    /// the (forward-equal) quantization terms.
    fn objective(net: &VqVae, x: &FeatureGrid) -> f64 {
        let fwd = net.forward_train(x).unwrap();
        let (l1, _) = vq::l1_with_grad(x, &fwd.recon);
        l1
    }

    #[test]
    fn decoder_parameter_gradient_matches_finite_differences() {
        let net = VqVae::new(tiny(CodebookLevels::BottleneckOnly), 3).unwrap();
        let x = random_volume(5, [8, 8, 8]).to_grid();
        let fwd = net.forward_train(&x).unwrap();
        let (_, g_rec) = vq::l1_with_grad(&x, &fwd.recon);
        let mut grads = net.params().zero_grads();
        net.backward(&fwd, &g_rec, BottleneckGrads::default(), 0.0, &mut grads);
        let mut checked = 0;
        for name in [
            "dec.out.weight",
            "dec.stage0.up.weight",
            "dec.post_quant.bias",
            "dec.stage1.res0.conv2.weight",
        ] {
            let id = net.params().id(name).unwrap();
            for j in [0usize, 3] {
                let analytic = grads.get(id)[j];
                let h = 1e-5;
                let mut plus = net.clone();
                plus.params_mut().get_mut(id)[j] += h;
                let mut minus = net.clone();
                minus.params_mut().get_mut(id)[j] -= h;
                let fd = (objective(&plus, &x) - objective(&minus, &x)) / (2.0 * h);
                let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-8);
                assert!(rel < 1e-3, "{name}[{j}] analytic {analytic} fd {fd}");
                checked += 1;
            }
        }
        assert_eq!(checked, 8);
    }
}
