//! Stage-1 pretraining, stage-2 translator training and inference.
//!
//! Every run is a pure function of the training pairs, the configs and the
//! seed: batch order comes from a per-epoch permutation seeded by
//! `(seed, epoch)` and crops from `(seed, step, item)`, so a run resumed from
//! a checkpoint replays exactly the batches of the uninterrupted run.

mod adam;
mod checkpoint;
mod config;
mod stage2;

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics;
use crate::nets::{BottleneckGrads, NetConfig, VqVae};
use crate::volume::{write_volume, Modality, PairManifest, Volume};
use crate::vq::{l1_with_grad, VqVaeLoss};

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, FrozenHashes, OptimizerState, CKPT_MAGIC, CKPT_VERSION};
pub use config::{Stage, TrainConfig};
pub use stage2::{stage2_gradients, stage2_loss, FrozenModels, FrozenOutputs, GuidanceHeads, Stage2Terms};

use stage2::{stage2_sample, Stage2Grads};

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: u64,
    pub total: f64,
    pub reconstruction: f64,
    pub codebook: f64,
    pub commitment: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oct: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub octa: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proj: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_psnr: Option<f64>,
    pub wall_ms: f64,
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

/// Optional run plumbing shared by both stages.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions<'a> {
    /// Receives the log, periodic/last/best checkpoints and diagnostic dumps.
    pub out_dir: Option<&'a Path>,
    /// Validation pairs scored by PSNR for best-checkpoint selection.
    pub val: Option<&'a [(Volume, Volume)]>,
    pub resume: Option<&'a Checkpoint>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRecord>,
    pub best: Option<Checkpoint>,
}

/// SplitMix64 finalizer over two words.
pub(crate) fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Item indices of the batch at `step`.
pub fn batch_indices(seed: u64, step: u64, n: usize, batch_size: usize) -> Vec<usize> {
    let spe = n.div_ceil(batch_size) as u64;
    let epoch = step / spe;
    let b = (step % spe) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch)));
    order[b * batch_size..((b + 1) * batch_size).min(n)].to_vec()
}

fn crop_origin(seed: u64, step: u64, item: usize, dims: [usize; 3], crop: [usize; 3]) -> [usize; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(seed, step), item as u64));
    let mut o = [0; 3];
    for i in 0..3 {
        o[i] = rng.random_range(0..=dims[i] - crop[i]);
    }
    o
}

fn check_pairs(pairs: &[(Volume, Volume)], net: &NetConfig, cfg: &TrainConfig) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::Validation("training manifest is empty".into()));
    }
    for (i, (a, b)) in pairs.iter().enumerate() {
        if a.dims() != b.dims() {
            return Err(Error::Shape(format!("pair {i}: dims {:?} vs {:?}", a.dims(), b.dims())));
        }
        let dims = match cfg.crop {
            Some(c) => {
                if (0..3).any(|k| c[k] > a.dims()[k]) {
                    return Err(Error::Shape(format!(
                        "crop {c:?} exceeds volume {:?} of pair {i}",
                        a.dims()
                    )));
                }
                c
            }
            None => a.dims(),
        };
        net.check_dims(dims)?;
    }
    Ok(())
}

/// The (possibly cropped) pair used for `item` at `step`.
fn sample(
    pairs: &[(Volume, Volume)],
    cfg: &TrainConfig,
    step: u64,
    item: usize,
) -> Result<(Volume, Volume, [usize; 3])> {
    let (a, b) = &pairs[item];
    match cfg.crop {
        Some(c) if c != a.dims() => {
            let o = crop_origin(cfg.seed, step, item, a.dims(), c);
            Ok((a.crop(o, c)?, b.crop(o, c)?, o))
        }
        _ => Ok((a.clone(), b.clone(), [0; 3])),
    }
}

struct RunFiles {
    dir: Option<PathBuf>,
    log: Option<File>,
}

impl RunFiles {
    fn open(dir: Option<&Path>, resume: bool) -> Result<Self> {
        let Some(dir) = dir else {
            return Ok(Self { dir: None, log: None });
        };
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOG_FILE);
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(resume)
            .truncate(!resume)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            dir: Some(dir.to_path_buf()),
            log: Some(file),
        })
    }

    fn record(&mut self, r: &LogRecord) -> Result<()> {
        if let (Some(f), Some(dir)) = (&mut self.log, &self.dir) {
            writeln!(f, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(dir.join(LOG_FILE), e))?;
        }
        Ok(())
    }

    fn save(&self, name: &str, ck: &Checkpoint) -> Result<()> {
        if let Some(dir) = &self.dir {
            ck.save(dir.join(name))?;
        }
        Ok(())
    }

    /// Inputs are validated up front, so a validation failure inside a step
    /// means the activations diverged.
    fn diverged(&self, step: u64, e: Error, batch: &[(Volume, Volume)]) -> Error {
        match e {
            Error::Validation(m) => self.non_finite(step, &format!("non-finite activations ({m})"), batch),
            other => other,
        }
    }

    /// Writes the offending batch as MVOL files and builds the abort error.
    fn non_finite(&self, step: u64, detail: &str, batch: &[(Volume, Volume)]) -> Error {
        let dir = match &self.dir {
            Some(d) => d.join(format!("diagnostic_step{step}")),
            None => std::env::temp_dir().join(format!("octa-vq-diagnostic-{}-step{step}", std::process::id())),
        };
        let mut written = std::fs::create_dir_all(&dir).is_ok();
        for (k, (a, b)) in batch.iter().enumerate() {
            written &= write_volume(a, dir.join(format!("item{k}_input.mvol"))).is_ok();
            written &= write_volume(b, dir.join(format!("item{k}_target.mvol"))).is_ok();
        }
        let where_ = if written {
            format!("batch dumped to {}", dir.display())
        } else {
            "batch dump failed".into()
        };
        log::error!("non-finite loss at step {step}: {detail}; {where_}");
        Error::NonFinite {
            step,
            detail: format!("{detail}; {where_}"),
        }
    }
}

fn grad_detail<const N: usize>(loss: f64, bad: [Option<&str>; N]) -> String {
    match bad.iter().flatten().next() {
        Some(name) => format!("loss={loss}, non-finite gradient in {name}"),
        None => format!("loss={loss}"),
    }
}

fn should(every: u64, step: u64, total: u64) -> bool {
    step == total || (every > 0 && step.is_multiple_of(every))
}

fn mean_psnr(
    net: &VqVae,
    pairs: &[(Volume, Volume)],
    window: Option<[usize; 3]>,
    input_is_target: bool,
) -> Result<f64> {
    let mut sum = 0.0;
    for (a, b) in pairs {
        let input = if input_is_target { b } else { a };
        let out = translate_with(net, input, window)?;
        sum += metrics::psnr(&out, b)?;
    }
    Ok(sum / pairs.len() as f64)
}

/// Stage-1 pretraining of a reconstruction VQVAE on one modality.
pub fn train_stage1(
    manifest: &PairManifest,
    modality: Modality,
    net: &NetConfig,
    cfg: &TrainConfig,
    opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    let pairs = manifest.load_all()?;
    train_stage1_on(&pairs, modality, net, cfg, opts)
}

/// [`train_stage1`] on pairs already in memory. The model reconstructs the
/// first (OCT) or second (OCTA) element of each pair.
pub fn train_stage1_on(
    pairs: &[(Volume, Volume)],
    modality: Modality,
    net_cfg: &NetConfig,
    cfg: &TrainConfig,
    opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    let stage = Stage::for_modality(modality)?;
    if cfg.stage != stage {
        return Err(Error::Config(format!(
            "config stage {} does not match modality {modality}",
            cfg.stage
        )));
    }
    cfg.validate()?;
    net_cfg.validate()?;
    check_pairs(pairs, net_cfg, cfg)?;
    let pick = |p: &(Volume, Volume)| {
        if modality == Modality::Oct {
            p.0.clone()
        } else {
            p.1.clone()
        }
    };
    let own: Vec<(Volume, Volume)> = pairs.iter().map(|p| (pick(p), pick(p))).collect();
    let val: Option<Vec<(Volume, Volume)>> = opts.val.map(|v| v.iter().map(|p| (pick(p), pick(p))).collect());

    let mut net = VqVae::new(net_cfg.clone(), cfg.seed)?;
    let mut opt = AdamState::new(net.params());
    let mut step = 0;
    let mut best_psnr: Option<f64> = None;
    if let Some(ck) = opts.resume {
        check_resume(ck, stage, net_cfg, cfg)?;
        net.load_params(&ck.params)?;
        opt = ck.optimizer.as_ref().expect("checked").model.clone();
        step = ck.step;
        best_psnr = ck.best_val_psnr;
    }
    let mut files = RunFiles::open(opts.out_dir, opts.resume.is_some())?;
    let total_steps = cfg.total_steps(pairs.len());
    let adam = cfg.adam();
    let mut log = Vec::new();
    let mut best = None;
    let snapshot = |net: &VqVae, opt: &AdamState, step: u64, best_psnr: Option<f64>| Checkpoint {
        stage,
        train_config: cfg.clone(),
        net_config: net_cfg.clone(),
        step,
        params: net.params().clone(),
        heads: None,
        optimizer: Some(OptimizerState {
            model: opt.clone(),
            heads: None,
        }),
        frozen: None,
        best_val_psnr: best_psnr,
    };

    while step < total_steps {
        let t0 = Instant::now();
        let idx = batch_indices(cfg.seed, step, own.len(), cfg.batch_size);
        let mut grads = net.params().zero_grads();
        let mut acc = [0.0; 4];
        let mut batch = Vec::with_capacity(idx.len());
        for &i in &idx {
            let (x, _, _) = sample(&own, cfg, step, i)?;
            batch.push((x.clone(), x.clone()));
            let fwd = net
                .forward_train(&x.to_grid())
                .map_err(|e| files.diverged(step + 1, e, &batch))?;
            let (rec, g_rec) = l1_with_grad(&x.to_grid(), &fwd.recon);
            let l = VqVaeLoss::new(rec, fwd.codebook_term(), fwd.commitment_term(), cfg.commitment_weight);
            net.backward(
                &fwd,
                &g_rec,
                BottleneckGrads::default(),
                cfg.commitment_weight,
                &mut grads,
            );
            for (a, v) in acc
                .iter_mut()
                .zip([l.total, l.reconstruction, l.codebook, l.commitment])
            {
                *a += v;
            }
        }
        let nb = idx.len() as f64;
        acc.iter_mut().for_each(|v| *v /= nb);
        grads.scale(1.0 / nb);
        if !acc[0].is_finite() || !grads.all_finite() {
            let detail = grad_detail(acc[0], [grads.first_non_finite(net.params())]);
            return Err(files.non_finite(step + 1, &detail, &batch));
        }
        opt.step(&adam, net.params_mut(), &grads);
        if !net.params().all_finite() {
            return Err(files.non_finite(step + 1, "parameters became non-finite after the update", &batch));
        }
        step += 1;

        let mut rec = LogRecord {
            step,
            epoch: (step - 1) / cfg.steps_per_epoch(own.len()),
            total: acc[0],
            reconstruction: acc[1],
            codebook: acc[2],
            commitment: acc[3],
            oct: None,
            octa: None,
            proj: None,
            lambda: None,
            val_psnr: None,
            wall_ms: 0.0,
        };
        if let Some(v) = &val {
            if should(cfg.validate_every, step, total_steps) {
                let p = mean_psnr(&net, v, cfg.crop, true)?;
                rec.val_psnr = Some(p);
                if best_psnr.is_none_or(|b| p > b) {
                    best_psnr = Some(p);
                    let ck = snapshot(&net, &opt, step, best_psnr);
                    files.save(BEST_CHECKPOINT, &ck)?;
                    best = Some(ck);
                }
            }
        }
        rec.wall_ms = t0.elapsed().as_secs_f64() * 1e3;
        log::debug!(
            "stage {stage} step {step}/{total_steps} loss {:.5} rec {:.5}",
            rec.total,
            rec.reconstruction
        );
        files.record(&rec)?;
        log.push(rec);
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            files.save(&format!("step_{step:06}.ckpt"), &snapshot(&net, &opt, step, best_psnr))?;
        }
    }
    let checkpoint = snapshot(&net, &opt, step, best_psnr);
    files.save(LAST_CHECKPOINT, &checkpoint)?;
    Ok(TrainOutcome { checkpoint, log, best })
}

fn check_resume(ck: &Checkpoint, stage: Stage, net: &NetConfig, cfg: &TrainConfig) -> Result<()> {
    if ck.stage != stage {
        return Err(Error::Config(format!(
            "cannot resume a stage {} checkpoint as stage {stage}",
            ck.stage
        )));
    }
    if &ck.net_config != net || !cfg.same_run(&ck.train_config) {
        return Err(Error::Config(
            "resume config differs from the checkpoint's snapshot".into(),
        ));
    }
    if ck.optimizer.is_none() {
        return Err(Error::Config("checkpoint has no optimizer state to resume from".into()));
    }
    Ok(())
}

/// Stage-2 translator training guided by two frozen stage-1 checkpoints.
pub fn train_stage2(
    manifest: &PairManifest,
    net: &NetConfig,
    cfg: &TrainConfig,
    ckpt_oct: &Checkpoint,
    ckpt_octa: &Checkpoint,
    opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    let pairs = manifest.load_all()?;
    train_stage2_on(&pairs, net, cfg, ckpt_oct, ckpt_octa, opts)
}

pub fn train_stage2_on(
    pairs: &[(Volume, Volume)],
    net_cfg: &NetConfig,
    cfg: &TrainConfig,
    ckpt_oct: &Checkpoint,
    ckpt_octa: &Checkpoint,
    opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    if cfg.stage != Stage::Stage2 {
        return Err(Error::Config(format!("config stage {} is not 2", cfg.stage)));
    }
    for (ck, want) in [(ckpt_oct, Stage::Stage1Oct), (ckpt_octa, Stage::Stage1Octa)] {
        if ck.stage != want {
            return Err(Error::Config(format!(
                "expected a stage {want} checkpoint, got stage {}",
                ck.stage
            )));
        }
    }
    cfg.validate()?;
    net_cfg.validate()?;
    check_pairs(pairs, net_cfg, cfg)?;
    let frozen = FrozenModels {
        oct: ckpt_oct.model()?,
        octa: ckpt_octa.model()?,
    };
    let hashes = frozen.hashes();
    let mut net = VqVae::new(net_cfg.clone(), cfg.seed)?;
    frozen.check_compatible(&net, cfg.crop.unwrap_or(pairs[0].0.dims()))?;
    let mut heads = GuidanceHeads::new(&net, &frozen, cfg.alignment.embed_dim, mix_seed(cfg.seed, 0x4845_4144));
    let mut opt = AdamState::new(net.params());
    let mut opt_heads = AdamState::new(&heads.params);
    let mut step = 0;
    let mut best_psnr: Option<f64> = None;
    if let Some(ck) = opts.resume {
        check_resume(ck, Stage::Stage2, net_cfg, cfg)?;
        if ck.frozen.as_ref() != Some(&hashes) {
            return Err(Error::Validation(
                "frozen checkpoints differ from the ones this run was trained with".into(),
            ));
        }
        net.load_params(&ck.params)?;
        let hp = ck
            .heads
            .clone()
            .ok_or_else(|| Error::Format("stage-2 checkpoint without heads".into()))?;
        heads.params.load_from(&hp)?;
        let o = ck.optimizer.as_ref().expect("checked");
        opt = o.model.clone();
        opt_heads = o
            .heads
            .clone()
            .ok_or_else(|| Error::Format("stage-2 checkpoint without head optimizer state".into()))?;
        step = ck.step;
        best_psnr = ck.best_val_psnr;
    }
    let mut files = RunFiles::open(opts.out_dir, opts.resume.is_some())?;
    let total_steps = cfg.total_steps(pairs.len());
    let adam = cfg.adam();
    let mut log = Vec::new();
    let mut best = None;
    // Frozen outputs depend only on the sample, so full-volume runs reuse them.
    let mut cache: HashMap<usize, FrozenOutputs> = HashMap::new();
    let snapshot =
        |net: &VqVae, heads: &GuidanceHeads, opt: &AdamState, oh: &AdamState, step: u64, best_psnr: Option<f64>| {
            Checkpoint {
                stage: Stage::Stage2,
                train_config: cfg.clone(),
                net_config: net_cfg.clone(),
                step,
                params: net.params().clone(),
                heads: Some(heads.params.clone()),
                optimizer: Some(OptimizerState {
                    model: opt.clone(),
                    heads: Some(oh.clone()),
                }),
                frozen: Some(hashes.clone()),
                best_val_psnr: best_psnr,
            }
        };

    while step < total_steps {
        let t0 = Instant::now();
        let idx = batch_indices(cfg.seed, step, pairs.len(), cfg.batch_size);
        let mut gm = net.params().zero_grads();
        let mut gh = heads.params.zero_grads();
        let mut sum: Option<Stage2Terms> = None;
        let mut batch = Vec::with_capacity(idx.len());
        for &i in &idx {
            let (oct, octa, _) = sample(pairs, cfg, step, i)?;
            batch.push((oct.clone(), octa.clone()));
            let fresh;
            let out = if cfg.crop.is_none_or(|c| c == oct.dims()) {
                if let std::collections::hash_map::Entry::Vacant(e) = cache.entry(i) {
                    e.insert(frozen.outputs(&oct, &octa)?);
                }
                &cache[&i]
            } else {
                fresh = frozen.outputs(&oct, &octa)?;
                &fresh
            };
            let t = stage2_sample(
                &net,
                &heads,
                out,
                &oct,
                &octa,
                cfg,
                Some(Stage2Grads {
                    model: &mut gm,
                    heads: &mut gh,
                }),
            )
            .map_err(|e| files.diverged(step + 1, e, &batch))?;
            sum = Some(match sum {
                None => t,
                Some(s) => add_terms(&s, &t),
            });
        }
        let nb = idx.len() as f64;
        let t = scale_terms(&sum.expect("non-empty batch"), 1.0 / nb);
        gm.scale(1.0 / nb);
        gh.scale(1.0 / nb);
        if !t.total.is_finite() || !gm.all_finite() || !gh.all_finite() {
            let detail = grad_detail(
                t.total,
                [gm.first_non_finite(net.params()), gh.first_non_finite(&heads.params)],
            );
            return Err(files.non_finite(step + 1, &detail, &batch));
        }
        opt.step(&adam, net.params_mut(), &gm);
        opt_heads.step(&adam, &mut heads.params, &gh);
        if !net.params().all_finite() || !heads.params.all_finite() {
            return Err(files.non_finite(step + 1, "parameters became non-finite after the update", &batch));
        }
        step += 1;

        let mut rec = LogRecord {
            step,
            epoch: (step - 1) / cfg.steps_per_epoch(pairs.len()),
            total: t.total,
            reconstruction: t.reconstruction,
            codebook: t.codebook,
            commitment: t.commitment,
            oct: Some(t.oct),
            octa: Some(t.octa),
            proj: Some(t.proj),
            lambda: Some(t.lambda),
            val_psnr: None,
            wall_ms: 0.0,
        };
        if let Some(v) = opts.val {
            if should(cfg.validate_every, step, total_steps) {
                let p = mean_psnr(&net, v, cfg.crop, false)?;
                rec.val_psnr = Some(p);
                if best_psnr.is_none_or(|b| p > b) {
                    best_psnr = Some(p);
                    let ck = snapshot(&net, &heads, &opt, &opt_heads, step, best_psnr);
                    files.save(BEST_CHECKPOINT, &ck)?;
                    best = Some(ck);
                }
            }
        }
        rec.wall_ms = t0.elapsed().as_secs_f64() * 1e3;
        log::debug!(
            "stage 2 step {step}/{total_steps} loss {:.5} rec {:.5}",
            rec.total,
            rec.reconstruction
        );
        files.record(&rec)?;
        log.push(rec);
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            files.save(
                &format!("step_{step:06}.ckpt"),
                &snapshot(&net, &heads, &opt, &opt_heads, step, best_psnr),
            )?;
        }
    }
    if frozen.hashes() != hashes {
        return Err(Error::Validation(
            "frozen stage-1 parameters changed during training".into(),
        ));
    }
    let checkpoint = snapshot(&net, &heads, &opt, &opt_heads, step, best_psnr);
    files.save(LAST_CHECKPOINT, &checkpoint)?;
    Ok(TrainOutcome { checkpoint, log, best })
}

fn add_terms(a: &Stage2Terms, b: &Stage2Terms) -> Stage2Terms {
    Stage2Terms {
        total: a.total + b.total,
        reconstruction: a.reconstruction + b.reconstruction,
        codebook: a.codebook + b.codebook,
        commitment: a.commitment + b.commitment,
        commitment_weight: a.commitment_weight,
        oct: a.oct + b.oct,
        octa: a.octa + b.octa,
        proj: a.proj + b.proj,
        lambda: a.lambda,
    }
}

fn scale_terms(a: &Stage2Terms, s: f64) -> Stage2Terms {
    Stage2Terms {
        total: a.total * s,
        reconstruction: a.reconstruction * s,
        codebook: a.codebook * s,
        commitment: a.commitment * s,
        oct: a.oct * s,
        octa: a.octa * s,
        proj: a.proj * s,
        ..*a
    }
}

/// Output modality of a checkpoint's model.
fn output_modality(stage: Stage) -> Modality {
    stage.modality().unwrap_or(Modality::Oct2Octa)
}

/// Runs a checkpoint's model on a full volume. Volumes larger than the
/// training crop are processed in half-overlapping windows whose outputs are
/// averaged where they overlap.
pub fn translate(ckpt: &Checkpoint, vol: &Volume) -> Result<Volume> {
    let net = ckpt.model()?;
    Ok(translate_with(&net, vol, ckpt.train_config.crop)?.with_modality(output_modality(ckpt.stage)))
}

fn window_starts(dim: usize, win: usize) -> Vec<usize> {
    let stride = (win / 2).max(1);
    let mut s: Vec<usize> = (0..=dim - win).step_by(stride).collect();
    if *s.last().unwrap() != dim - win {
        s.push(dim - win);
    }
    s
}

pub fn translate_with(net: &VqVae, vol: &Volume, window: Option<[usize; 3]>) -> Result<Volume> {
    let dims = vol.dims();
    let win = match window {
        Some(w) => [w[0].min(dims[0]), w[1].min(dims[1]), w[2].min(dims[2])],
        None => dims,
    };
    net.config().check_dims(win)?;
    if win == dims {
        return Ok(net.forward_vqvae(vol)?.0.with_modality(Modality::Oct2Octa));
    }
    let mut sum = vec![0.0f64; vol.len()];
    let mut count = vec![0u32; vol.len()];
    for &a in &window_starts(dims[0], win[0]) {
        for &b in &window_starts(dims[1], win[1]) {
            for &c in &window_starts(dims[2], win[2]) {
                let out = net.forward_vqvae(&vol.crop([a, b, c], win)?)?.0;
                for l in 0..win[0] {
                    for w in 0..win[1] {
                        for d in 0..win[2] {
                            let k = vol.index(a + l, b + w, c + d);
                            sum[k] += out.get(l, w, d) as f64;
                            count[k] += 1;
                        }
                    }
                }
            }
        }
    }
    let values = sum.iter().zip(&count).map(|(s, &n)| (s / n as f64) as f32).collect();
    Volume::new(dims, values, Modality::Oct2Octa)
}

/// Codebook indices a model selects over a set of volumes.
pub fn collect_indices(net: &VqVae, vols: &[&Volume]) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for v in vols {
        out.extend(net.forward_vqvae(v)?.1.indices);
    }
    Ok(out)
}
