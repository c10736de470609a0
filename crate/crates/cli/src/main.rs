use std::path::PathBuf;
use std::process::ExitCode;

use caduf::degrade::Family;
use caduf_cli::commands::{self, InferArgs, SynthArgs, TrainArgs};
use caduf_cli::io::config::Profile;
use caduf_cli::CliResult;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "caduf", version, about = "Multiple-degradation super-resolution with a deblur/upsample/refine cascade")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    Sm,
    Cm,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Paper,
    Desk,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Paper => Profile::Paper,
            ProfileArg::Desk => Profile::Desk,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write procedural RGB test images
    Corpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 96)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Degrade a corpus of PNG images into a training/evaluation dataset
    Synth {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum)]
        family: FamilyArg,
        #[arg(long)]
        scale: usize,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Synthesis threads (output does not depend on this)
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Write an untrained, identity-initialized checkpoint
    Init {
        #[arg(long)]
        scale: usize,
        #[arg(long, value_enum, default_value = "desk")]
        profile: ProfileArg,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the HR images of a manifest
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "desk")]
        profile: ProfileArg,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Loss log (CSV); defaults to the checkpoint path with a .csv extension
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Super-resolve one LR image
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        lr: PathBuf,
        #[arg(long)]
        kernel: PathBuf,
        /// LR-space kernel; fitted from --kernel when absent
        #[arg(long)]
        klow: Option<PathBuf>,
        #[arg(long)]
        scale: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint and the bicubic baseline on a manifest
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Corpus { out, count, size, seed } => {
            let paths = commands::corpus(&out, count, size, seed)?;
            println!("wrote {} images to {}", paths.len(), out.display());
        }
        Command::Synth {
            corpus,
            family,
            scale,
            count,
            seed,
            out,
            workers,
        } => {
            let family = match family {
                FamilyArg::Sm => Family::GaussianSM,
                FamilyArg::Cm => Family::GaussianCM,
            };
            let m = commands::synth(&SynthArgs {
                corpus,
                family,
                scale,
                count,
                seed,
                out: out.clone(),
                workers,
            })?;
            println!("wrote {} samples and {}", m.entries.len(), out.join("manifest.txt").display());
        }
        Command::Init {
            scale,
            profile,
            config,
            seed,
            out,
        } => {
            let settings = commands::settings(profile.into(), scale, config.as_deref())?;
            let ck = commands::init(&settings, seed, &out)?;
            println!("wrote {} ({} tensors)", out.display(), ck.len());
        }
        Command::Train {
            manifest,
            profile,
            config,
            out,
            log,
            seed,
        } => {
            let summary = commands::train(&TrainArgs {
                manifest,
                profile: profile.into(),
                config,
                out: out.clone(),
                log,
                seed,
            })?;
            println!(
                "{} steps in {:.1} s; wrote {} and {}",
                summary.steps,
                summary.seconds,
                out.display(),
                summary.log.display()
            );
        }
        Command::Infer {
            ckpt,
            lr,
            kernel,
            klow,
            scale,
            out,
        } => {
            let x = commands::infer(&InferArgs {
                ckpt,
                lr,
                kernel,
                klow,
                scale,
                out: out.clone(),
            })?;
            let (_, _, h, w) = x.dims4()?;
            println!("wrote {w}x{h} image to {}", out.display());
        }
        Command::Eval { ckpt, manifest, out } => {
            let report = commands::eval(&ckpt, &manifest, &out)?;
            for m in report.methods() {
                let s = report.summary(m).expect("method has rows");
                println!("{:8} {} images  PSNR {:.3} dB  SSIM {:.4}", s.method, s.count, s.psnr, s.ssim);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
