use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{self, ProjectionHead};
use crate::error::{Error, Result};
use crate::grid::FeatureGrid;
use crate::nets::{BottleneckGrads, Grads, ParamSet, VqVae};
use crate::volume::{ProjectionMap, Volume};
use crate::vq::{l1_with_grad, VqVaeLoss};

use super::config::TrainConfig;

const TRANSLATOR_FEATURES: &str = "head.translator_features";
const PRETRAINED_OCT: &str = "head.pretrained_oct";
const TRANSLATOR_QUANTIZED: &str = "head.translator_quantized";
const PRETRAINED_OCTA: &str = "head.pretrained_octa";

/// The four projection heads of stage 2, in one parameter set.
#[derive(Debug, Clone)]
pub struct GuidanceHeads {
    pub params: ParamSet,
    /// Translator's unquantized features, contrasted with the OCT model.
    pub translator_features: ProjectionHead,
    pub pretrained_oct: ProjectionHead,
    /// Translator's quantized features, contrasted with the OCTA model.
    pub translator_quantized: ProjectionHead,
    pub pretrained_octa: ProjectionHead,
}

impl GuidanceHeads {
    pub fn new(translator: &VqVae, frozen: &FrozenModels, embed_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let t = translator.config().codebook_dim;
        let translator_features = ProjectionHead::new(&mut params, TRANSLATOR_FEATURES, t, embed_dim, &mut rng);
        let pretrained_oct = ProjectionHead::new(
            &mut params,
            PRETRAINED_OCT,
            frozen.oct.config().codebook_dim,
            embed_dim,
            &mut rng,
        );
        let translator_quantized = ProjectionHead::new(&mut params, TRANSLATOR_QUANTIZED, t, embed_dim, &mut rng);
        let pretrained_octa = ProjectionHead::new(
            &mut params,
            PRETRAINED_OCTA,
            frozen.octa.config().codebook_dim,
            embed_dim,
            &mut rng,
        );
        Self {
            params,
            translator_features,
            pretrained_oct,
            translator_quantized,
            pretrained_octa,
        }
    }

    pub fn from_params(params: ParamSet) -> Result<Self> {
        Ok(Self {
            translator_features: ProjectionHead::from_params(&params, TRANSLATOR_FEATURES)?,
            pretrained_oct: ProjectionHead::from_params(&params, PRETRAINED_OCT)?,
            translator_quantized: ProjectionHead::from_params(&params, TRANSLATOR_QUANTIZED)?,
            pretrained_octa: ProjectionHead::from_params(&params, PRETRAINED_OCTA)?,
            params,
        })
    }
}

/// Stage-1 models used as fixed guidance.
#[derive(Debug, Clone)]
pub struct FrozenModels {
    pub oct: VqVae,
    pub octa: VqVae,
}

/// What the frozen models contribute for one sample.
#[derive(Debug, Clone)]
pub struct FrozenOutputs {
    /// Unquantized bottleneck features of the OCT model on the OCT input.
    pub oct_features: FeatureGrid,
    /// Quantized bottleneck features of the OCTA model on the OCTA target.
    pub octa_quantized: FeatureGrid,
    /// Projection map of the OCTA model's reconstruction.
    pub octa_map: ProjectionMap,
}

impl FrozenModels {
    pub fn hashes(&self) -> super::FrozenHashes {
        super::FrozenHashes {
            oct: self.oct.params().hash(),
            octa: self.octa.params().hash(),
        }
    }

    pub fn outputs(&self, oct: &Volume, octa: &Volume) -> Result<FrozenOutputs> {
        let oct_features = self.oct.encode(oct)?;
        let fwd = self.octa.forward_train(&octa.to_grid())?;
        Ok(FrozenOutputs {
            oct_features,
            octa_quantized: fwd.quant.quantized,
            octa_map: ProjectionMap::from_grid(&fwd.recon)?,
        })
    }

    /// Checks that translator and frozen bottlenecks share a spatial grid.
    pub fn check_compatible(&self, translator: &VqVae, dims: [usize; 3]) -> Result<()> {
        let t = translator.config();
        for (what, m) in [("oct", &self.oct), ("octa", &self.octa)] {
            m.config().check_dims(dims)?;
            if m.config().feature_dims(dims) != t.feature_dims(dims) {
                return Err(Error::Shape(format!(
                    "{what} model bottleneck {:?} differs from the translator's {:?}",
                    m.config().feature_dims(dims),
                    t.feature_dims(dims)
                )));
            }
        }
        Ok(())
    }
}

/// Term breakdown of the stage-2 objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage2Terms {
    pub total: f64,
    pub reconstruction: f64,
    pub codebook: f64,
    pub commitment: f64,
    pub commitment_weight: f64,
    pub oct: f64,
    pub octa: f64,
    pub proj: f64,
    pub lambda: f64,
}

impl Stage2Terms {
    fn new(vq: VqVaeLoss, commitment_weight: f64, oct: f64, octa: f64, proj: f64, lambda: f64) -> Self {
        Self {
            total: vq.total + lambda * (oct + octa + proj),
            reconstruction: vq.reconstruction,
            codebook: vq.codebook,
            commitment: vq.commitment,
            commitment_weight,
            oct,
            octa,
            proj,
            lambda,
        }
    }

    /// Recomputes the weighted sum from the individual terms.
    pub fn recomputed_total(&self) -> f64 {
        self.reconstruction
            + self.codebook
            + self.commitment_weight * self.commitment
            + self.lambda * (self.oct + self.octa + self.proj)
    }
}

pub(crate) struct Stage2Grads<'a> {
    pub model: &'a mut Grads,
    pub heads: &'a mut Grads,
}

/// Loss of one (OCT, OCTA) pair; accumulates gradients when `grads` is set.
pub(crate) fn stage2_sample(
    translator: &VqVae,
    heads: &GuidanceHeads,
    frozen: &FrozenOutputs,
    oct: &Volume,
    octa: &Volume,
    cfg: &TrainConfig,
    grads: Option<Stage2Grads<'_>>,
) -> Result<Stage2Terms> {
    if oct.dims() != octa.dims() {
        return Err(Error::Shape(format!("pair dims {:?} vs {:?}", oct.dims(), octa.dims())));
    }
    let fwd = translator.forward_train(&oct.to_grid())?;
    if fwd.features.dims() != frozen.oct_features.dims() || fwd.quant.quantized.dims() != frozen.octa_quantized.dims() {
        return Err(Error::Shape(format!(
            "translator bottleneck {:?} vs frozen {:?}",
            fwd.features.dims(),
            frozen.oct_features.dims()
        )));
    }
    let (rec, g_rec) = l1_with_grad(&octa.to_grid(), &fwd.recon);
    let w = cfg.commitment_weight;
    let vq = VqVaeLoss::new(rec, fwd.codebook_term(), fwd.commitment_term(), w);
    let lambda = cfg.lambda;
    let hp = &heads.params;

    let csa = if cfg.use_csa {
        let s = cfg.alignment.feature_patch_for(fwd.features.dims());
        let (p_u, t_pu) = alignment::patchify_with_tape(&fwd.features, s, &heads.translator_features, hp)?;
        let (q_oct, t_qo) = alignment::patchify_with_tape(&frozen.oct_features, s, &heads.pretrained_oct, hp)?;
        let l_oct = alignment::csa_loss_with_grad(&q_oct, &p_u, cfg.tau)?;
        let (p_q, t_pq) = alignment::patchify_with_tape(&fwd.quant.quantized, s, &heads.translator_quantized, hp)?;
        let (q_octa, t_qa) = alignment::patchify_with_tape(&frozen.octa_quantized, s, &heads.pretrained_octa, hp)?;
        let l_octa = alignment::csa_loss_with_grad(&q_octa, &p_q, cfg.tau)?;
        Some((l_oct, l_octa, [t_pu, t_qo, t_pq, t_qa]))
    } else {
        None
    };
    let vsa = if cfg.use_vsa {
        let pm = ProjectionMap::from_grid(&fwd.recon)?;
        let s = cfg.alignment.map_patch_for(pm.dims());
        Some(alignment::vsa_loss_with_grad(&frozen.octa_map, &pm, s)?)
    } else {
        None
    };

    let (oct_term, octa_term) = csa.as_ref().map_or((0.0, 0.0), |(a, b, _)| (a.loss, b.loss));
    let proj_term = vsa.as_ref().map_or(0.0, |(l, _)| *l);
    let terms = Stage2Terms::new(vq, w, oct_term, octa_term, proj_term, lambda);

    if let Some(g) = grads {
        let mut grad_recon = g_rec;
        if let Some((_, g_pm)) = &vsa {
            let d = grad_recon.dims()[2];
            let scale = lambda / d as f64;
            for (col, gp) in grad_recon.data_mut().chunks_exact_mut(d).zip(g_pm) {
                col.iter_mut().for_each(|v| *v += scale * gp);
            }
        }
        let scaled = |v: &[f64]| -> Vec<f64> { v.iter().map(|x| x * lambda).collect() };
        let mut g_u = None;
        let mut g_q = None;
        if let Some((l_oct, l_octa, [t_pu, t_qo, t_pq, t_qa])) = &csa {
            g_u = Some(alignment::patchify_backward(
                t_pu,
                &heads.translator_features,
                hp,
                &scaled(&l_oct.grad_candidates),
                g.heads,
            ));
            alignment::patchify_backward(t_qo, &heads.pretrained_oct, hp, &scaled(&l_oct.grad_anchor), g.heads);
            g_q = Some(alignment::patchify_backward(
                t_pq,
                &heads.translator_quantized,
                hp,
                &scaled(&l_octa.grad_candidates),
                g.heads,
            ));
            alignment::patchify_backward(t_qa, &heads.pretrained_octa, hp, &scaled(&l_octa.grad_anchor), g.heads);
        }
        translator.backward(
            &fwd,
            &grad_recon,
            BottleneckGrads {
                features: g_u.as_ref(),
                quantized: g_q.as_ref(),
            },
            w,
            g.model,
        );
    }
    Ok(terms)
}

/// Stage-2 objective for one pair, with the frozen models evaluated here.
pub fn stage2_loss(
    oct: &Volume,
    octa: &Volume,
    translator: &VqVae,
    frozen: &FrozenModels,
    heads: &GuidanceHeads,
    cfg: &TrainConfig,
) -> Result<Stage2Terms> {
    frozen.check_compatible(translator, oct.dims())?;
    let out = frozen.outputs(oct, octa)?;
    stage2_sample(translator, heads, &out, oct, octa, cfg, None)
}

/// [`stage2_loss`] plus gradients w.r.t. translator and head parameters.
pub fn stage2_gradients(
    oct: &Volume,
    octa: &Volume,
    translator: &VqVae,
    frozen: &FrozenModels,
    heads: &GuidanceHeads,
    cfg: &TrainConfig,
) -> Result<(Stage2Terms, Grads, Grads)> {
    frozen.check_compatible(translator, oct.dims())?;
    let out = frozen.outputs(oct, octa)?;
    let mut gm = translator.params().zero_grads();
    let mut gh = heads.params.zero_grads();
    let t = stage2_sample(
        translator,
        heads,
        &out,
        oct,
        octa,
        cfg,
        Some(Stage2Grads {
            model: &mut gm,
            heads: &mut gh,
        }),
    )?;
    Ok((t, gm, gh))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::NetConfig;
    use crate::volume::{generate_phantom_pair, PhantomConfig};

    fn tiny_net() -> NetConfig {
        NetConfig {
            blocks: 2,
            resblocks_per_block: 1,
            base_channels: 2,
            codebook_size: 8,
            codebook_dim: 3,
            ..Default::default()
        }
    }

    fn setup() -> (Volume, Volume, VqVae, FrozenModels, GuidanceHeads) {
        let pc = PhantomConfig {
            dims: [16, 16, 16],
            vessel_count: 3,
            seed: 5,
            ..Default::default()
        };
        let (oct, octa) = generate_phantom_pair(&pc).unwrap();
        let translator = VqVae::new(tiny_net(), 1).unwrap();
        let frozen = FrozenModels {
            oct: VqVae::new(tiny_net(), 2).unwrap(),
            octa: VqVae::new(tiny_net(), 3).unwrap(),
        };
        let heads = GuidanceHeads::new(&translator, &frozen, 4, 9);
        (oct, octa, translator, frozen, heads)
    }

    #[test]
    fn lambda_zero_is_plain_vqvae_loss() {
        let (oct, octa, t, f, h) = setup();
        let cfg = TrainConfig {
            lambda: 0.0,
            ..Default::default()
        };
        let terms = stage2_loss(&oct, &octa, &t, &f, &h, &cfg).unwrap();
        let (recon, qr, _) = t.forward_vqvae(&oct).unwrap();
        let plain = crate::vq::vqvae_loss(&octa, &recon, &qr).unwrap();
        assert!((terms.total - plain.total).abs() < 1e-6);
        assert!(terms.oct > 0.0 && terms.proj > 0.0);
    }

    #[test]
    fn total_equals_weighted_term_sum() {
        let (oct, octa, t, f, h) = setup();
        let cfg = TrainConfig::default();
        let terms = stage2_loss(&oct, &octa, &t, &f, &h, &cfg).unwrap();
        assert!((terms.total - terms.recomputed_total()).abs() < 1e-6);
        let manual =
            terms.reconstruction + terms.codebook + terms.commitment + 0.5 * (terms.oct + terms.octa + terms.proj);
        assert!((terms.total - manual).abs() < 1e-6);
    }

    #[test]
    fn translator_matching_frozen_octa_zeroes_projection_term() {
        let (oct, octa, _, f, _) = setup();
        // Translator equal to the OCTA model, fed the OCTA volume.
        let t = f.octa.clone();
        let h = GuidanceHeads::new(&t, &f, 4, 9);
        let cfg = TrainConfig::default();
        let out = f.outputs(&octa, &octa).unwrap();
        let terms = stage2_sample(&t, &h, &out, &octa, &octa, &cfg, None).unwrap();
        assert_eq!(terms.proj, 0.0);
        let _ = oct;
    }

    #[test]
    fn mismatched_bottlenecks_are_rejected() {
        let (oct, octa, _, f, _) = setup();
        let t = VqVae::new(
            NetConfig {
                blocks: 1,
                ..tiny_net()
            },
            1,
        )
        .unwrap();
        let h = GuidanceHeads::new(&t, &f, 4, 9);
        assert!(matches!(
            stage2_loss(&oct, &octa, &t, &f, &h, &TrainConfig::default()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn heads_rebuild_from_params() {
        let (_, _, t, f, h) = setup();
        let back = GuidanceHeads::from_params(h.params.clone()).unwrap();
        assert_eq!(back.translator_quantized.out_dim, 4);
        assert_eq!(back.pretrained_octa.in_dim, f.octa.config().codebook_dim);
        assert!(GuidanceHeads::from_params(t.params().clone()).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (oct, octa, t, f, h) = setup();
        let cfg = TrainConfig::default();
        let (_, gm, gh) = stage2_gradients(&oct, &octa, &t, &f, &h, &cfg).unwrap();
        let eps = 1e-6;
        let check = |fd: f64, an: f64, what: &str| {
            let scale = fd.abs().max(an.abs()).max(1e-6);
            assert!((fd - an).abs() / scale < 1e-3, "{what}: fd {fd} vs analytic {an}");
        };
        // Translator parameters downstream of the quantizer.
        for name in [
            "dec.post_quant.weight",
            "dec.stage1.up.weight",
            "dec.stage0.res0.conv2.weight",
            "dec.out.bias",
        ] {
            let id = t.params().id(name).unwrap();
            for k in 0..t.params().get(id).len().min(2) {
                let mut tp = t.clone();
                tp.params_mut().get_mut(id)[k] += eps;
                let mut tm = t.clone();
                tm.params_mut().get_mut(id)[k] -= eps;
                let fp = stage2_loss(&oct, &octa, &tp, &f, &h, &cfg).unwrap().total;
                let fm = stage2_loss(&oct, &octa, &tm, &f, &h, &cfg).unwrap().total;
                check((fp - fm) / (2.0 * eps), gm.get(id)[k], name);
            }
        }
        for head in [
            &h.translator_features,
            &h.pretrained_oct,
            &h.translator_quantized,
            &h.pretrained_octa,
        ] {
            for id in [head.weight_id(), head.bias_id()] {
                let mut hp = h.clone();
                hp.params.get_mut(id)[1] += eps;
                let mut hm = h.clone();
                hm.params.get_mut(id)[1] -= eps;
                let fp = stage2_loss(&oct, &octa, &t, &f, &hp, &cfg).unwrap().total;
                let fm = stage2_loss(&oct, &octa, &t, &f, &hm, &cfg).unwrap().total;
                check((fp - fm) / (2.0 * eps), gh.get(id)[1], h.params.name(id));
            }
        }
    }
}
