mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use octa_vq::nets::CodebookLevels;
use octa_vq::volume::{Modality, Split};
use octa_vq::{Error, Result};

use config::ExperimentConfig;

#[derive(Parser, Debug)]
#[command(name = "octa-vq", version, about = "Vector-quantized OCT to OCTA volume translation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic vessel-phantom pairs and a manifest.
    GenSynthetic {
        #[arg(long, default_value = "train")]
        split: Split,
        #[command(flatten)]
        common: Common,
    },
    /// Stage-1 pretraining of a single-modality VQVAE.
    Pretrain {
        #[arg(long)]
        modality: Modality,
        #[command(flatten)]
        common: Common,
    },
    /// Stage-2 translator training against two pretrained checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Translate one volume (`--input`/`--output`) or every OCT volume of a manifest.
    Translate {
        #[command(flatten)]
        common: Common,
    },
    /// Volume and projection-map metrics; without a checkpoint the manifest's
    /// first column is taken as the prediction.
    Eval {
        #[command(flatten)]
        common: Common,
    },
    /// Codebook usage of a checkpoint over a manifest.
    CodebookStats {
        #[command(flatten)]
        common: Common,
    },
    /// Loss curves and projection-map panels as PNG files.
    Plot {
        /// Subjects drawn as map panels.
        #[arg(long, default_value_t = 4)]
        limit: usize,
        #[command(flatten)]
        common: Common,
    },
}

/// Flags shared by every subcommand. Each mirrors an `ExperimentConfig`
/// field; values from `--config` take precedence.
#[derive(Args, Debug, Default)]
struct Common {
    /// JSON experiment config applied over the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; relative paths resolve under $OCTVQ_OUT_ROOT.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,

    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    val_manifest: Option<PathBuf>,
    #[arg(long)]
    oct_checkpoint: Option<PathBuf>,
    #[arg(long)]
    octa_checkpoint: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    run_dir: Option<PathBuf>,

    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    commitment_weight: Option<f64>,
    /// Training crop as LxWxD.
    #[arg(long, value_parser = parse_dims)]
    crop: Option<[usize; 3]>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    validate_every: Option<u64>,
    #[arg(long)]
    no_csa: bool,
    #[arg(long)]
    no_vsa: bool,
    #[arg(long)]
    embed_dim: Option<usize>,

    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    resblocks: Option<usize>,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    codebook_size: Option<usize>,
    #[arg(long)]
    codebook_dim: Option<usize>,
    /// Quantize every downsampling level, not just the bottleneck.
    #[arg(long)]
    per_downsample: bool,

    #[arg(long)]
    count: Option<usize>,
    /// Phantom volume dims as LxWxD.
    #[arg(long, value_parser = parse_dims)]
    dims: Option<[usize; 3]>,
    #[arg(long)]
    vessels: Option<usize>,
    #[arg(long)]
    radius_min: Option<f64>,
    #[arg(long)]
    radius_max: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    dropout_rate: Option<f64>,
}

fn parse_dims(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(['x', 'X', ',']).collect();
    if parts.len() != 3 {
        return Err(format!("expected LxWxD, got {s:?}"));
    }
    let mut out = [0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.trim().parse().map_err(|_| format!("bad dimension {p:?}"))?;
    }
    Ok(out)
}

impl Common {
    fn experiment(&self) -> Result<ExperimentConfig> {
        let mut c = ExperimentConfig::default();
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { c.$($field).+ = v; })*
            };
        }
        set!(
            seed => seed,
            count => count,
            lr => train.learning_rate,
            lambda => train.lambda,
            tau => train.tau,
            batch_size => train.batch_size,
            epochs => train.epochs,
            commitment_weight => train.commitment_weight,
            checkpoint_every => train.checkpoint_every,
            validate_every => train.validate_every,
            embed_dim => train.alignment.embed_dim,
            blocks => net.blocks,
            resblocks => net.resblocks_per_block,
            base_channels => net.base_channels,
            codebook_size => net.codebook_size,
            codebook_dim => net.codebook_dim,
            dims => phantom.dims,
            vessels => phantom.vessel_count,
            noise => phantom.speckle_noise_sd,
            dropout_rate => phantom.discontinuity_rate,
        );
        let r = &mut c.phantom.vessel_radius_range;
        *r = (self.radius_min.unwrap_or(r.0), self.radius_max.unwrap_or(r.1));
        c.train.max_steps = self.max_steps.or(c.train.max_steps);
        c.train.crop = self.crop.or(c.train.crop);
        c.train.use_csa &= !self.no_csa;
        c.train.use_vsa &= !self.no_vsa;
        if self.per_downsample {
            c.net.codebook_levels = CodebookLevels::PerDownsample;
        }
        let p = &mut c.paths;
        for (slot, flag) in [
            (&mut p.manifest, &self.manifest),
            (&mut p.val_manifest, &self.val_manifest),
            (&mut p.oct_checkpoint, &self.oct_checkpoint),
            (&mut p.octa_checkpoint, &self.octa_checkpoint),
            (&mut p.checkpoint, &self.checkpoint),
            (&mut p.resume, &self.resume),
            (&mut p.input, &self.input),
            (&mut p.output, &self.output),
            (&mut p.run_dir, &self.run_dir),
            (&mut p.out_dir, &self.out),
        ] {
            if flag.is_some() {
                *slot = flag.clone();
            }
        }
        c.merged_with_file(self.config.as_deref())
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynthetic { split, common } => commands::gen_synthetic(&common.experiment()?, split),
        Command::Pretrain { modality, common } => commands::pretrain(&common.experiment()?, modality),
        Command::Train { common } => commands::train(&common.experiment()?),
        Command::Translate { common } => commands::translate(&common.experiment()?),
        Command::Eval { common } => commands::eval(&common.experiment()?),
        Command::CodebookStats { common } => commands::codebook_stats(&common.experiment()?),
        Command::Plot { limit, common } => commands::plot(&common.experiment()?, limit),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}

/// `error code=E_... message="..."` on a single line.
fn error_line(e: &Error) -> String {
    let msg = e.to_string().replace(['\n', '\r'], " ");
    format!("error code={} message={:?}", e.code(), msg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dims_parse() {
        assert_eq!(parse_dims("32x16x8").unwrap(), [32, 16, 8]);
        assert_eq!(parse_dims("4,4,4").unwrap(), [4, 4, 4]);
        assert!(parse_dims("4x4").is_err());
        assert!(parse_dims("4xax4").is_err());
    }

    #[test]
    fn flags_reach_the_config() {
        let cli = Cli::try_parse_from([
            "octa-vq",
            "pretrain",
            "--modality",
            "octa",
            "--seed",
            "5",
            "--lr",
            "0.001",
            "--blocks",
            "2",
            "--crop",
            "16x16x16",
            "--per-downsample",
            "--no-vsa",
        ])
        .unwrap();
        let Command::Pretrain { modality, common } = cli.command else {
            panic!("wrong subcommand");
        };
        assert_eq!(modality, Modality::Octa);
        let c = common.experiment().unwrap();
        assert_eq!(c.train.seed, 5);
        assert_eq!(c.train.learning_rate, 0.001);
        assert_eq!(c.net.blocks, 2);
        assert_eq!(c.train.crop, Some([16, 16, 16]));
        assert_eq!(c.net.codebook_levels, CodebookLevels::PerDownsample);
        assert!(c.train.use_csa && !c.train.use_vsa);
    }

    #[test]
    fn error_line_is_single_line() {
        let line = error_line(&Error::Format("bad\nmagic".into()));
        assert!(line.starts_with("error code=E_FORMAT message="));
        assert!(!line.contains('\n'));
    }
}
