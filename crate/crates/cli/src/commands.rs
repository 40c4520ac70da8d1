//! Thin wrappers over the library: resolve paths, run, write artifacts.

use std::path::{Path, PathBuf};

use log::info;
use octa_vq::metrics::{self, MetricsRecord, ReportRow};
use octa_vq::trainer::{self, Checkpoint, Stage, TrainOptions, BEST_CHECKPOINT, LAST_CHECKPOINT, LOG_FILE};
use octa_vq::volume::{
    generate_dataset, projection_map, read_volume, write_volume, ManifestEntry, Modality, PairManifest, Split, Volume,
};
use octa_vq::{Error, Result};

use crate::config::{resolve_out, ExperimentConfig};
use crate::plot;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const PREDICTIONS_FILE: &str = "predictions.txt";
pub const CODEBOOK_STATS_FILE: &str = "codebook_stats.json";

fn out_dir(cfg: &ExperimentConfig, default: &str) -> PathBuf {
    resolve_out(cfg.paths.out_dir.as_deref().unwrap_or(Path::new(default)))
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Config(format!("missing --{flag}")))
}

fn load_val(cfg: &ExperimentConfig) -> Result<Option<Vec<(Volume, Volume)>>> {
    cfg.paths
        .val_manifest
        .as_ref()
        .map(|p| PairManifest::read(p)?.load_all())
        .transpose()
}

fn load_resume(cfg: &ExperimentConfig) -> Result<Option<Checkpoint>> {
    cfg.paths.resume.as_ref().map(Checkpoint::load).transpose()
}

pub fn gen_synthetic(cfg: &ExperimentConfig, split: Split) -> Result<()> {
    let dir = out_dir(cfg, "synthetic");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    cfg.write_snapshot(&dir, "gen-synthetic")?;
    let pairs = generate_dataset(&cfg.phantom, cfg.count)?;
    let mut entries = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let id = format!("subject_{i:03}");
        let oct_path = dir.join(format!("{id}_oct.mvol"));
        let octa_path = dir.join(format!("{id}_octa.mvol"));
        write_volume(&p.oct, &oct_path)?;
        write_volume(&p.octa, &octa_path)?;
        entries.push(ManifestEntry {
            oct_path,
            octa_path,
            subject_id: id,
        });
    }
    let manifest = PairManifest::new(entries, split);
    let path = dir.join(MANIFEST_FILE);
    manifest.write(&path)?;
    PairManifest::read(&path)?.validate()?;
    info!("wrote {} pairs to {}", manifest.len(), dir.display());
    println!("{}", path.display());
    Ok(())
}

pub fn pretrain(cfg: &ExperimentConfig, modality: Modality) -> Result<()> {
    let mut cfg = cfg.clone();
    cfg.train.stage = Stage::for_modality(modality)?;
    let dir = out_dir(&cfg, &format!("pretrain-{modality}"));
    let manifest = PairManifest::read(required(&cfg.paths.manifest, "manifest")?)?;
    let val = load_val(&cfg)?;
    let resume = load_resume(&cfg)?;
    cfg.write_snapshot(&dir, "pretrain")?;
    let opts = TrainOptions {
        out_dir: Some(&dir),
        val: val.as_deref(),
        resume: resume.as_ref(),
    };
    let out = trainer::train_stage1(&manifest, modality, &cfg.net, &cfg.train, opts)?;
    report_done(&dir, &out.log);
    Ok(())
}

pub fn train(cfg: &ExperimentConfig) -> Result<()> {
    let mut cfg = cfg.clone();
    cfg.train.stage = Stage::Stage2;
    let dir = out_dir(&cfg, "train");
    let manifest = PairManifest::read(required(&cfg.paths.manifest, "manifest")?)?;
    let oct = Checkpoint::load(required(&cfg.paths.oct_checkpoint, "oct-checkpoint")?)?;
    let octa = Checkpoint::load(required(&cfg.paths.octa_checkpoint, "octa-checkpoint")?)?;
    let val = load_val(&cfg)?;
    let resume = load_resume(&cfg)?;
    cfg.write_snapshot(&dir, "train")?;
    let opts = TrainOptions {
        out_dir: Some(&dir),
        val: val.as_deref(),
        resume: resume.as_ref(),
    };
    let out = trainer::train_stage2(&manifest, &cfg.net, &cfg.train, &oct, &octa, opts)?;
    report_done(&dir, &out.log);
    Ok(())
}

fn report_done(dir: &Path, log: &[trainer::LogRecord]) {
    if let Some(last) = log.last() {
        info!(
            "step {} total {:.5} reconstruction {:.5}",
            last.step, last.total, last.reconstruction
        );
    }
    println!("{}", dir.join(LAST_CHECKPOINT).display());
}

/// Input column a checkpoint's model consumes.
fn input_of(stage: Stage, pair: (Volume, Volume)) -> Volume {
    match stage {
        Stage::Stage1Octa => pair.1,
        Stage::Stage1Oct | Stage::Stage2 => pair.0,
    }
}

pub fn translate(cfg: &ExperimentConfig) -> Result<()> {
    let ckpt = Checkpoint::load(required(&cfg.paths.checkpoint, "checkpoint")?)?;
    if let Some(input) = &cfg.paths.input {
        let output = required(&cfg.paths.output, "output")?;
        let vol = read_volume(input)?;
        let out = trainer::translate(&ckpt, &vol)?;
        write_volume(&out, output)?;
        println!("{}", output.display());
        return Ok(());
    }
    let manifest = PairManifest::read(required(&cfg.paths.manifest, "manifest or --input")?)?;
    let dir = out_dir(cfg, "translate");
    cfg.write_snapshot(&dir, "translate")?;
    let mut entries = Vec::with_capacity(manifest.len());
    for (i, e) in manifest.entries.iter().enumerate() {
        let pair = manifest.load_pair(i)?;
        let out = trainer::translate(&ckpt, &input_of(ckpt.stage, pair))?;
        let pred_path = dir.join(format!("{}_pred.mvol", e.subject_id));
        write_volume(&out, &pred_path)?;
        let target = match ckpt.stage {
            Stage::Stage1Oct => e.oct_path.clone(),
            Stage::Stage1Octa | Stage::Stage2 => e.octa_path.clone(),
        };
        entries.push(ManifestEntry {
            oct_path: std::path::absolute(&pred_path).map_err(|err| Error::io(&pred_path, err))?,
            octa_path: std::path::absolute(&target).map_err(|err| Error::io(&target, err))?,
            subject_id: e.subject_id.clone(),
        });
    }
    let path = dir.join(PREDICTIONS_FILE);
    PairManifest::new(entries, manifest.split).write(&path)?;
    info!("translated {} volumes into {}", manifest.len(), dir.display());
    println!("{}", path.display());
    Ok(())
}

pub fn eval(cfg: &ExperimentConfig) -> Result<()> {
    let manifest = PairManifest::read(required(&cfg.paths.manifest, "manifest")?)?;
    let ckpt = cfg.paths.checkpoint.as_ref().map(Checkpoint::load).transpose()?;
    let dir = out_dir(cfg, "eval");
    cfg.write_snapshot(&dir, "eval")?;
    let mut rows = Vec::new();
    let (mut vols, mut maps) = (Vec::new(), Vec::new());
    for (i, e) in manifest.entries.iter().enumerate() {
        let (a, b) = manifest.load_pair(i)?;
        let (pred, target) = match &ckpt {
            Some(c) => {
                let target = if c.stage == Stage::Stage1Oct {
                    a.clone()
                } else {
                    b.clone()
                };
                (trainer::translate(c, &input_of(c.stage, (a, b)))?, target)
            }
            None => (a, b),
        };
        let v = MetricsRecord::for_volumes(&pred, &target)?;
        let m = MetricsRecord::for_maps(&projection_map(&pred), &projection_map(&target))?;
        rows.push(ReportRow {
            label: e.subject_id.clone(),
            record: v.clone(),
        });
        rows.push(ReportRow {
            label: e.subject_id.clone(),
            record: m.clone(),
        });
        vols.push(v);
        maps.push(m);
    }
    if !vols.is_empty() {
        rows.push(ReportRow {
            label: "mean".into(),
            record: MetricsRecord::average(&vols)?,
        });
        rows.push(ReportRow {
            label: "mean".into(),
            record: MetricsRecord::average(&maps)?,
        });
    }
    metrics::write_report(&dir, &rows)?;
    print!("{}", metrics::summary_table(&rows));
    Ok(())
}

pub fn codebook_stats(cfg: &ExperimentConfig) -> Result<()> {
    let ckpt = Checkpoint::load(required(&cfg.paths.checkpoint, "checkpoint")?)?;
    let manifest = PairManifest::read(required(&cfg.paths.manifest, "manifest")?)?;
    let dir = out_dir(cfg, "codebook-stats");
    cfg.write_snapshot(&dir, "codebook-stats")?;
    let net = ckpt.model()?;
    let inputs = manifest
        .load_all()?
        .into_iter()
        .map(|p| input_of(ckpt.stage, p))
        .collect::<Vec<_>>();
    let refs: Vec<&Volume> = inputs.iter().collect();
    let report = metrics::codebook_utilization(trainer::collect_indices(&net, &refs)?, ckpt.net_config.codebook_size)?;
    let path = dir.join(CODEBOOK_STATS_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n").map_err(|e| Error::io(&path, e))?;
    println!(
        "used {} of {} entries ({:.1}%)",
        report.used_entries,
        report.total_entries,
        100.0 * report.rate
    );
    Ok(())
}

pub fn plot(cfg: &ExperimentConfig, limit: usize) -> Result<()> {
    let run_dir = required(&cfg.paths.run_dir, "run-dir")?;
    let dir = cfg
        .paths
        .out_dir
        .as_deref()
        .map(resolve_out)
        .unwrap_or_else(|| run_dir.to_path_buf());
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut written = Vec::new();

    let log_path = run_dir.join(LOG_FILE);
    if log_path.exists() {
        let text = std::fs::read_to_string(&log_path).map_err(|e| Error::io(&log_path, e))?;
        let log = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str::<trainer::LogRecord>)
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let total: Vec<(f64, f64)> = log.iter().map(|r| (r.step as f64, r.total)).collect();
        let rec: Vec<(f64, f64)> = log.iter().map(|r| (r.step as f64, r.reconstruction)).collect();
        let path = dir.join("loss.png");
        plot::line_chart(&[&total, &rec], &path)?;
        written.push(path);
        let val: Vec<(f64, f64)> = log
            .iter()
            .filter_map(|r| r.val_psnr.map(|p| (r.step as f64, p)))
            .collect();
        if !val.is_empty() {
            let path = dir.join("val_psnr.png");
            plot::line_chart(&[&val], &path)?;
            written.push(path);
        }
    }

    if let Some(m) = &cfg.paths.manifest {
        let ckpt_path = match &cfg.paths.checkpoint {
            Some(p) => p.clone(),
            None => [BEST_CHECKPOINT, LAST_CHECKPOINT]
                .iter()
                .map(|f| run_dir.join(f))
                .find(|p| p.exists())
                .ok_or_else(|| Error::Config(format!("no checkpoint in {}; pass --checkpoint", run_dir.display())))?,
        };
        let ckpt = Checkpoint::load(&ckpt_path)?;
        let manifest = PairManifest::read(m)?;
        for (i, e) in manifest.entries.iter().enumerate().take(limit) {
            let (oct, octa) = manifest.load_pair(i)?;
            let pred = trainer::translate(&ckpt, &input_of(ckpt.stage, (oct.clone(), octa.clone())))?;
            let path = dir.join(format!("maps_{}.png", e.subject_id));
            plot::map_panels(
                &[&projection_map(&oct), &projection_map(&octa), &projection_map(&pred)],
                &path,
            )?;
            written.push(path);
        }
    }
    if written.is_empty() {
        return Err(Error::Config(format!(
            "nothing to plot: {} has no {LOG_FILE} and no --manifest was given",
            run_dir.display()
        )));
    }
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}
