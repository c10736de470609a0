//! The subcommands, callable without going through argument parsing.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use caduf::cascade::{Cascade, CascadeConfig};
use caduf::corpus::procedural_corpus;
use caduf::degrade::{bicubic_upsample, sample_spec, synthesize, Family, Kernel};
use caduf::error::Error;
use caduf::metrics::{mac_count, psnr, ssim, ImageScore, MetricsReport};
use caduf::operator::{fit_learned_pinv, DownsampleOperator, KlowFitter, LearnedPinv, PinvFitConfig, PseudoInverse};
use caduf::tensor::Tensor;
use caduf::train::{mean_psnr, Event, Schedule, Trainer, CSV_HEADER};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{CliError, CliResult};
use crate::io::checkpoint::Checkpoint;
use crate::io::config::{Profile, Settings};
use crate::io::kernel::{read_blur_kernel, read_kernel, write_kernel};
use crate::io::manifest::{Manifest, ManifestEntry};
use crate::io::model::{load_model, save_model};
use crate::io::{io_error, read_png, read_text, write_png};

/// LR sides are padded up to a multiple of this before inference.
pub const LR_MULTIPLE: usize = 4;

fn input(msg: impl Into<String>) -> CliError {
    CliError::Input(msg.into())
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| io_error(path, e).into())
}

/// Runs `f` on a pool of `workers` threads, or on the global pool.
fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> CliResult<T> {
    match workers {
        None => Ok(f()),
        Some(0) => Err(input("--workers must be positive")),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| input(format!("cannot start {n} workers: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Writes `count` procedural `size × size` PNG images named `img_<i>.png`.
pub fn corpus(out: &Path, count: usize, size: usize, seed: u64) -> CliResult<Vec<PathBuf>> {
    if count == 0 || size < 8 {
        return Err(input("need at least one image of side >= 8"));
    }
    create_dir(out)?;
    let images = procedural_corpus(seed, count, size, size)?;
    images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let path = out.join(format!("img_{i:04}.png"));
            write_png(&path, img)?;
            Ok(path)
        })
        .collect()
}

/// PNG files of a directory in name order.
fn list_pngs(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| input(format!("cannot read corpus {}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(input(format!("no PNG images in {}", dir.display())));
    }
    Ok(paths)
}

pub struct SynthArgs {
    pub corpus: PathBuf,
    pub family: Family,
    pub scale: usize,
    pub count: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub workers: Option<usize>,
}

/// Synthesizes `count` pairs: sample `i` degrades corpus image `i mod n`
/// (cropped so the LR sides are multiples of 4) with a spec drawn from
/// stream `i` of the seed.
pub fn synth(args: &SynthArgs) -> CliResult<Manifest> {
    let s = args.scale;
    if !matches!(s, 2 | 4) {
        return Err(input(format!("scale must be 2 or 4, got {s}")));
    }
    if args.count == 0 {
        return Err(input("--count must be positive"));
    }
    let paths = list_pngs(&args.corpus)?;
    let step = LR_MULTIPLE * s;
    let images: Vec<Tensor> = paths
        .iter()
        .map(|p| {
            let x = read_png(p).map_err(|e| input(format!("unreadable corpus image: {e}")))?;
            let (_, _, h, w) = x.dims4()?;
            let (ch, cw) = (h - h % step, w - w % step);
            if ch == 0 || cw == 0 {
                return Err(input(format!("{} is smaller than {step} pixels", p.display())));
            }
            Ok(crop_rect(&x, ch, cw)?)
        })
        .collect::<CliResult<_>>()?;
    for sub in ["hr", "lr", "kernel", "klow"] {
        create_dir(&args.out.join(sub))?;
    }
    let fitter = KlowFitter::standard(s)?;
    let entries = with_workers(args.workers, || {
        (0..args.count)
            .into_par_iter()
            .map(|i| synth_one(args, &images, &fitter, i))
            .collect::<CliResult<Vec<_>>>()
    })??;
    let mut manifest = Manifest::new(".");
    manifest.base = args.out.clone();
    manifest.entries = entries;
    manifest.write(&args.out.join("manifest.txt"))?;
    Ok(manifest)
}

fn crop_rect(x: &Tensor, h: usize, w: usize) -> caduf::error::Result<Tensor> {
    let (n, c, ih, iw) = x.dims4()?;
    if (h, w) == (ih, iw) {
        return Ok(x.clone());
    }
    let plane = ih * iw;
    Ok(Tensor::from_fn(&[n, c, h, w], |k| {
        let (p, r) = (k / (h * w), k % (h * w));
        x.data()[p * plane + (r / w) * iw + r % w]
    }))
}

fn synth_one(args: &SynthArgs, images: &[Tensor], fitter: &KlowFitter, i: usize) -> CliResult<ManifestEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    rng.set_stream(i as u64);
    let x = &images[i % images.len()];
    let spec = sample_spec(&mut rng, args.family, args.scale)?;
    let pair = synthesize(x, &spec, |k, _| Ok(fitter.fit(k)?.kernel))?;
    let id = format!("{i:05}");
    let rel = |dir: &str, ext: &str| PathBuf::from(format!("{dir}/{id}.{ext}"));
    let entry = ManifestEntry {
        hr: rel("hr", "png"),
        lr: rel("lr", "png"),
        kernel: rel("kernel", "txt"),
        klow: rel("klow", "txt"),
        scale: args.scale,
        noise: spec.noise,
        seed: spec.seed,
        id,
    };
    write_png(&args.out.join(&entry.hr), &pair.x)?;
    write_png(&args.out.join(&entry.lr), &pair.y)?;
    write_kernel(&args.out.join(&entry.kernel), pair.kernel.kernel())?;
    write_kernel(&args.out.join(&entry.klow), &pair.klow)?;
    Ok(entry)
}

/// The pseudo-inverse stored with every checkpoint.
pub fn fit_pinv(scale: usize) -> CliResult<LearnedPinv> {
    let op = DownsampleOperator::anchor(scale)?;
    let fit = fit_learned_pinv(&op, &PinvFitConfig::default())?;
    if !fit.converged {
        eprintln!(
            "note: pseudo-inverse fit stopped at loss {:.3e} after {} steps",
            fit.loss, fit.steps
        );
    }
    Ok(fit.pinv)
}

pub fn settings(profile: Profile, scale: usize, config: Option<&Path>) -> CliResult<Settings> {
    let mut s = Settings::profile(profile, scale);
    if let Some(path) = config {
        s.apply(&read_text(path)?)?;
    } else {
        s.apply("")?;
    }
    Ok(s)
}

/// Writes an untrained (identity-initialized) model.
pub fn init(settings: &Settings, seed: u64, out: &Path) -> CliResult<Checkpoint> {
    let pinv = Arc::new(fit_pinv(settings.model.scale)?);
    let model = Cascade::init(settings.model, seed, PseudoInverse::Learned(pinv.clone()))?;
    let ck = save_model(&model, &pinv)?;
    ck.write(out)?;
    Ok(ck)
}

fn checked_manifest(path: &Path) -> CliResult<Manifest> {
    let m = Manifest::read(path)?;
    if m.entries.is_empty() {
        return Err(input(format!("{} lists no images", path.display())));
    }
    let missing = m.missing_files();
    if !missing.is_empty() {
        return Err(CliError::MissingFiles(missing));
    }
    Ok(m)
}

pub struct TrainArgs {
    pub manifest: PathBuf,
    pub profile: Profile,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    /// Loss log; defaults to the checkpoint path with a `.csv` extension.
    pub log: Option<PathBuf>,
    pub seed: u64,
}

pub struct TrainSummary {
    pub steps: u64,
    pub seconds: f64,
    /// Mean PSNR of `x̂` and of bicubic upsampling over the fixed sample pool.
    pub pool_psnr: Option<(f64, f64)>,
    pub log: PathBuf,
}

/// Trains on the HR images of a manifest and writes the checkpoint and loss log.
pub fn train(args: &TrainArgs) -> CliResult<TrainSummary> {
    let manifest = checked_manifest(&args.manifest)?;
    let scale = manifest.scale()?;
    let settings = settings(args.profile, scale, args.config.as_deref())?;
    println!("schedule ({} profile):", match args.profile {
        Profile::Paper => "paper",
        Profile::Desk => "desk",
    });
    print!("{}", Schedule(&settings.train));
    let corpus: Vec<Tensor> = manifest
        .entries
        .iter()
        .map(|e| read_png(&manifest.resolve(&e.hr)))
        .collect::<caduf::error::Result<_>>()?;
    let pinv = Arc::new(fit_pinv(scale)?);
    let model = Cascade::init(settings.model, args.seed, PseudoInverse::Learned(pinv.clone()))?;
    let log_path = args.log.clone().unwrap_or_else(|| args.out.with_extension("csv"));
    let mut log = fs::File::create(&log_path).map_err(|e| io_error(&log_path, e))?;
    let mut log_err = None;
    writeln!(log, "{CSV_HEADER}").map_err(|e| io_error(&log_path, e))?;

    let start = Instant::now();
    let mut trainer = Trainer::new(model, corpus, settings.train.clone())?;
    trainer.run(|event| match event {
        Event::Step(r) => {
            if let Err(e) = writeln!(log, "{}", r.csv_line()) {
                log_err.get_or_insert(e);
            }
        }
        Event::Epoch(r) => match r.val_psnr {
            Some(v) => eprintln!("epoch {} (phase {}): loss {:.4e}, validation PSNR {v:.2} dB", r.epoch, r.phase, r.loss),
            None => eprintln!("epoch {} (phase {}): loss {:.4e}", r.epoch, r.phase, r.loss),
        },
    })?;
    if let Some(e) = log_err {
        return Err(io_error(&log_path, e).into());
    }
    let seconds = start.elapsed().as_secs_f64();
    let pool_psnr = trainer.pool().map(|p| mean_psnr(trainer.model(), p)).transpose()?;
    if let Some((ours, bic)) = pool_psnr {
        println!("training pool: PSNR {ours:.2} dB vs bicubic {bic:.2} dB ({:+.2} dB)", ours - bic);
    }
    let steps = trainer.steps_taken();
    save_model(trainer.model(), &pinv)?.write(&args.out)?;
    Ok(TrainSummary {
        steps,
        seconds,
        pool_psnr,
        log: log_path,
    })
}

/// Replicate-pads the bottom and right edges up to multiples of `q`.
pub fn pad_to_multiple(y: &Tensor, q: usize) -> caduf::error::Result<Tensor> {
    let (n, c, h, w) = y.dims4()?;
    let (ph, pw) = (h.div_ceil(q) * q, w.div_ceil(q) * q);
    if (ph, pw) == (h, w) {
        return Ok(y.clone());
    }
    Ok(Tensor::from_fn(&[n, c, ph, pw], |k| {
        let (p, r) = (k / (ph * pw), k % (ph * pw));
        let (i, j) = ((r / pw).min(h - 1), (r % pw).min(w - 1));
        y.data()[p * h * w + i * w + j]
    }))
}

/// `x̂` for one LR image, padding as needed and cropping the result back.
pub fn super_resolve(model: &Cascade, y: &Tensor, klow: &Kernel) -> caduf::error::Result<Tensor> {
    let (_, _, h, w) = y.dims4()?;
    let s = model.config().scale;
    let padded = pad_to_multiple(y, LR_MULTIPLE)?;
    let out = model.forward(&padded, std::slice::from_ref(klow))?;
    let x = if padded.shape() == y.shape() {
        out.x_hat
    } else {
        crop_rect(&out.x_hat, h * s, w * s)?
    };
    Ok(x)
}

fn load_checkpoint(path: &Path) -> CliResult<Cascade> {
    Ok(load_model(&Checkpoint::read(path)?)?.0)
}

pub struct InferArgs {
    pub ckpt: PathBuf,
    pub lr: PathBuf,
    pub kernel: PathBuf,
    pub klow: Option<PathBuf>,
    pub scale: usize,
    pub out: PathBuf,
}

pub fn infer(args: &InferArgs) -> CliResult<Tensor> {
    let model = load_checkpoint(&args.ckpt)?;
    let s = model.config().scale;
    if args.scale != s {
        return Err(input(format!("checkpoint is for scale {s}, not {}", args.scale)));
    }
    let y = read_png(&args.lr)?;
    let kernel = read_blur_kernel(&args.kernel)?;
    let klow = match &args.klow {
        Some(p) => read_kernel(p)?,
        None => KlowFitter::standard(s)?.fit(&kernel)?.kernel,
    };
    let x = super_resolve(&model, &y, &klow)?;
    write_png(&args.out, &x)?;
    Ok(x)
}

/// MACs of the separable bicubic baseline: 4 taps per pass per output value.
fn bicubic_macs(h: usize, w: usize, s: usize) -> u64 {
    (8 * 3 * h * s * w * s) as u64
}

/// Scores the model and the bicubic baseline on every manifest entry.
pub fn eval(ckpt: &Path, manifest: &Path, out: &Path) -> CliResult<MetricsReport> {
    let model = load_checkpoint(ckpt)?;
    let m = checked_manifest(manifest)?;
    let s = model.config().scale;
    if m.scale()? != s {
        return Err(input(format!("checkpoint is for scale {s}, manifest for {}", m.scale()?)));
    }
    let rows: Vec<[ImageScore; 2]> = m
        .entries
        .par_iter()
        .map(|e| score_entry(&model, &m, e))
        .collect::<CliResult<_>>()?;
    let mut report = MetricsReport::new(model.config().ablation.to_string());
    for pair in rows {
        for r in pair {
            report.push(r);
        }
    }
    fs::write(out, report.to_jsonl()).map_err(|e| io_error(out, e))?;
    Ok(report)
}

fn score_entry(model: &Cascade, m: &Manifest, e: &ManifestEntry) -> CliResult<[ImageScore; 2]> {
    let s = model.config().scale;
    let x = read_png(&m.resolve(&e.hr))?;
    let y = read_png(&m.resolve(&e.lr))?;
    let klow = read_kernel(&m.resolve(&e.klow))?;
    let (_, _, h, w) = y.dims4()?;
    if x.shape() != [1, 3, h * s, w * s] {
        return Err(input(format!("entry {}: HR size does not match LR size x{s}", e.id)));
    }
    let x_hat = super_resolve(model, &y, &klow)?.map(|v| v.clamp(0.0, 1.0));
    let bic = bicubic_upsample(&y, s)?.map(|v| v.clamp(0.0, 1.0));
    let cfg: &CascadeConfig = model.config();
    let macs = mac_count(cfg, h.div_ceil(LR_MULTIPLE) * LR_MULTIPLE, w.div_ceil(LR_MULTIPLE) * LR_MULTIPLE)?.total;
    let macs = u64::try_from(macs).map_err(|_| Error::invalid("MAC count overflows"))?;
    Ok([
        ImageScore {
            id: e.id.clone(),
            method: "model".into(),
            psnr: psnr(&x_hat, &x, 1.0)?,
            ssim: ssim(&x_hat, &x)?,
            macs,
        },
        ImageScore {
            id: e.id.clone(),
            method: "bicubic".into(),
            psnr: psnr(&bic, &x, 1.0)?,
            ssim: ssim(&bic, &x)?,
            macs: bicubic_macs(h, w, s),
        },
    ])
}
