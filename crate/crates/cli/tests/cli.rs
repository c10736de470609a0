use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use caduf::degrade::{bicubic_upsample, gaussian_kernel, linear_motion_kernel, Family, Kernel};
use caduf_cli::commands::{self, InferArgs, SynthArgs};
use caduf_cli::io::checkpoint::Checkpoint;
use caduf_cli::io::config::Profile;
use caduf_cli::io::kernel::{format_kernel, parse_blur_kernel, parse_kernel};
use caduf_cli::io::manifest::Manifest;
use caduf_cli::io::read_png;
use proptest::prelude::*;
use serde_json::Value;
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_caduf");

/// Corpus, a 12-sample x2 dataset and an untrained x2 checkpoint, built once.
struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let f = Fixture { dir };
        commands::corpus(&f.path("corpus"), 4, 64, 1).unwrap();
        commands::synth(&synth_args(&f.path("corpus"), &f.path("ds"), None)).unwrap();
        let settings = commands::settings(Profile::Desk, 2, None).unwrap();
        commands::init(&settings, 0, &f.path("init.ckpt")).unwrap();
        f
    })
}

fn synth_args(corpus: &Path, out: &Path, workers: Option<usize>) -> SynthArgs {
    SynthArgs {
        corpus: corpus.to_path_buf(),
        family: Family::GaussianCM,
        scale: 2,
        count: 12,
        seed: 7,
        out: out.to_path_buf(),
        workers,
    }
}

fn files_under(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn run(args: &[&str]) -> (i32, String) {
    let out = Command::new(BIN).args(args).output().unwrap();
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
}

#[test]
fn synth_writes_count_artifacts() {
    let f = fixture();
    let m = Manifest::read(&f.path("ds/manifest.txt")).unwrap();
    assert_eq!(m.entries.len(), 12);
    for sub in ["hr", "lr", "kernel", "klow"] {
        assert_eq!(fs::read_dir(f.path("ds").join(sub)).unwrap().count(), 12, "{sub}");
    }
    assert!(m.missing_files().is_empty());
}

#[test]
fn synth_is_deterministic_across_reruns_and_workers() {
    let f = fixture();
    let reference = files_under(&f.path("ds"));
    for workers in [Some(1), Some(3)] {
        let tmp = tempfile::tempdir().unwrap();
        commands::synth(&synth_args(&f.path("corpus"), tmp.path(), workers)).unwrap();
        let again = files_under(tmp.path());
        assert_eq!(again.len(), reference.len());
        for ((pa, a), (pb, b)) in reference.iter().zip(&again) {
            assert_eq!(pa, pb);
            assert!(a == b, "{} differs with {workers:?} workers", pa.display());
        }
    }
}

#[test]
fn written_kernels_validate() {
    let f = fixture();
    let m = Manifest::read(&f.path("ds/manifest.txt")).unwrap();
    for e in &m.entries {
        let text = fs::read_to_string(m.resolve(&e.kernel)).unwrap();
        let k = parse_blur_kernel(&text).unwrap();
        let k = k.kernel();
        assert!(k.height() % 2 == 1 && k.width() % 2 == 1);
        assert!((k.sum() - 1.0).abs() <= 1e-6);
        assert!(text.ends_with('\n'));
        let klow = parse_kernel(&fs::read_to_string(m.resolve(&e.klow)).unwrap()).unwrap();
        assert!(klow.height() % 2 == 1 && klow.width() % 2 == 1);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn kernel_text_round_trips(sigma in 0.2f64..4.0, angle in 0.0f64..180.0, length in 1.0f64..15.0) {
        for k in [gaussian_kernel(sigma, 15).unwrap(), linear_motion_kernel(angle, length).unwrap()] {
            let text = format_kernel(k.kernel());
            prop_assert_eq!(&parse_kernel(&text).unwrap(), k.kernel());
            prop_assert_eq!(&parse_blur_kernel(&text).unwrap(), &k);
        }
    }

    #[test]
    fn arbitrary_kernels_round_trip(h in 0usize..4, w in 0usize..4, seed in any::<u64>()) {
        let (h, w) = (2 * h + 1, 2 * w + 1);
        let taps: Vec<f64> = (0..h * w)
            .map(|i| f64::from_bits((seed.wrapping_mul(i as u64 + 1) >> 12) | 0x3f00_0000_0000_0000))
            .collect();
        let k = Kernel::new(h, w, taps).unwrap();
        prop_assert_eq!(parse_kernel(&format_kernel(&k)).unwrap(), k);
    }
}

#[test]
fn checkpoint_load_save_is_byte_identical() {
    let f = fixture();
    let bytes = fs::read(f.path("init.ckpt")).unwrap();
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(ck.to_bytes(), bytes);
    let (model, pinv) = caduf_cli::io::model::load_model(&ck).unwrap();
    assert_eq!(caduf_cli::io::model::save_model(&model, &pinv).unwrap().to_bytes(), bytes);
}

fn infer_args(f: &Fixture, lr: &Path, kernel: &Path, out: &Path) -> InferArgs {
    InferArgs {
        ckpt: f.path("init.ckpt"),
        lr: lr.to_path_buf(),
        kernel: kernel.to_path_buf(),
        klow: None,
        scale: 2,
        out: out.to_path_buf(),
    }
}

#[test]
fn infer_shape_for_x4() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("small.cfg");
    fs::write(&cfg, "width=8\nblocks_deblur=1\nblocks_upsample=1\nblocks_refine=1\nextractor_fine=8\nextractor_coarse=8\n").unwrap();
    let settings = commands::settings(Profile::Desk, 4, Some(&cfg)).unwrap();
    let ckpt = tmp.path().join("x4.ckpt");
    commands::init(&settings, 0, &ckpt).unwrap();
    commands::corpus(&tmp.path().join("img"), 1, 48, 3).unwrap();
    let kernel = tmp.path().join("k.txt");
    fs::write(&kernel, format_kernel(gaussian_kernel(1.2, 7).unwrap().kernel())).unwrap();
    let out = tmp.path().join("sr.png");
    let x = commands::infer(&InferArgs {
        ckpt,
        lr: tmp.path().join("img/img_0000.png"),
        kernel,
        klow: None,
        scale: 4,
        out: out.clone(),
    })
    .unwrap();
    assert_eq!(x.shape(), &[1, 3, 192, 192]);
    let img = image::open(&out).unwrap();
    assert_eq!((img.width(), img.height()), (192, 192));
}

#[test]
fn infer_is_deterministic_and_golden() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    commands::corpus(&tmp.path().join("img"), 1, 24, 5).unwrap();
    let delta = tmp.path().join("delta.txt");
    fs::write(&delta, "KERNEL 1\n1 1\n1\n").unwrap();
    let lr = tmp.path().join("img/img_0000.png");
    let (a, b) = (tmp.path().join("a.png"), tmp.path().join("b.png"));
    commands::infer(&infer_args(f, &lr, &delta, &a)).unwrap();
    commands::infer(&infer_args(f, &lr, &delta, &b)).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let pixels = image::open(&a).unwrap().to_rgb8().into_raw();
    assert_eq!(pixels.len(), 48 * 48 * 3);
    let hash = crc32fast::hash(&pixels);
    assert_eq!(hash, GOLDEN_DELTA_HASH, "golden image changed: {hash:#010x}");
}

/// CRC32 of the decoded RGB bytes of `x̂` for the delta-kernel case above.
const GOLDEN_DELTA_HASH: u32 = 0x71f8_6e43;

fn jsonl(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn eval_rows_and_summaries() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("report.jsonl");
    commands::eval(&f.path("init.ckpt"), &f.path("ds/manifest.txt"), &out).unwrap();
    let lines = jsonl(&out);
    assert_eq!(lines[0]["type"], "header");
    assert_eq!(lines[0]["variant"], "CADUF");

    let m = Manifest::read(&f.path("ds/manifest.txt")).unwrap();
    let images: Vec<&Value> = lines.iter().filter(|v| v["type"] == "image").collect();
    assert_eq!(images.len(), 2 * m.entries.len());
    for e in &m.entries {
        let row = images
            .iter()
            .find(|v| v["id"] == e.id.as_str() && v["method"] == "bicubic")
            .unwrap();
        let x = read_png(&m.resolve(&e.hr)).unwrap();
        let y = read_png(&m.resolve(&e.lr)).unwrap();
        let bic = bicubic_upsample(&y, 2).unwrap();
        let mse = x
            .data()
            .iter()
            .zip(bic.data())
            .map(|(a, b)| (a - b.clamp(0.0, 1.0)).powi(2))
            .sum::<f64>()
            / x.len() as f64;
        let expect = -10.0 * mse.log10();
        let got = row["psnr"].as_f64().unwrap();
        assert!((got - expect).abs() < 1e-6, "{}: {got} vs {expect}", e.id);
    }

    for method in ["model", "bicubic"] {
        let rows: Vec<&&Value> = images.iter().filter(|v| v["method"] == method).collect();
        let summary = lines
            .iter()
            .find(|v| v["type"] == "summary" && v["method"] == method)
            .unwrap();
        assert_eq!(summary["count"].as_u64().unwrap() as usize, rows.len());
        for key in ["psnr", "ssim", "macs"] {
            let mean = rows.iter().map(|r| r[key].as_f64().unwrap()).sum::<f64>() / rows.len() as f64;
            let got = summary[key].as_f64().unwrap();
            assert!((got - mean).abs() <= 1e-12 * mean.abs().max(1.0), "{method} {key}");
        }
    }
}

#[test]
fn eval_header_names_the_configured_variant() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let cases = [
        ("use_D=false\nuse_projection=false\nuse_F=false\nuse_E=false\nuse_blurred_input=false\nuse_PI_anchor=false\n", "P(y_w)"),
        ("propagate_features=false\nuse_E=false\nuse_blurred_input=false\n", "CNN-Cascade"),
        ("use_E=false\n", "FUD(y,y_w)"),
    ];
    for (i, (text, name)) in cases.iter().enumerate() {
        let cfg = tmp.path().join(format!("v{i}.cfg"));
        fs::write(&cfg, format!("width=8\nblocks_deblur=1\nblocks_upsample=1\nblocks_refine=1\n{text}")).unwrap();
        let ckpt = tmp.path().join(format!("v{i}.ckpt"));
        let settings = commands::settings(Profile::Desk, 2, Some(&cfg)).unwrap();
        commands::init(&settings, 0, &ckpt).unwrap();
        let out = tmp.path().join(format!("v{i}.jsonl"));
        commands::eval(&ckpt, &f.path("ds/manifest.txt"), &out).unwrap();
        assert_eq!(jsonl(&out)[0]["variant"], *name);
    }
}

#[test]
fn input_errors_exit_with_2() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let ck = f.path("init.ckpt");
    let ck = ck.to_str().unwrap();

    let (code, err) = run(&["synth", "--corpus", "/nonexistent", "--family", "sm", "--scale", "2", "--count", "1", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code, 2, "{err}");

    let bad = tmp.path().join("bad.txt");
    fs::write(&bad, "KERNEL 1\n3 3\n1 2\n").unwrap();
    let lr = f.path("ds/lr/00000.png");
    let out = tmp.path().join("o.png");
    let (code, err) = run(&["infer", "--ckpt", ck, "--lr", lr.to_str().unwrap(), "--kernel", bad.to_str().unwrap(), "--scale", "2", "--out", out.to_str().unwrap()]);
    assert_eq!(code, 2);
    assert!(err.contains("kernel"), "{err}");

    // a manifest pointing at deleted files lists every missing one
    let ds = tmp.path().join("ds");
    fs::create_dir(&ds).unwrap();
    for e in files_under(&f.path("ds")) {
        let p = ds.join(&e.0);
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        fs::write(p, e.1).unwrap();
    }
    fs::remove_file(ds.join("hr/00003.png")).unwrap();
    fs::remove_file(ds.join("klow/00007.txt")).unwrap();
    let report = tmp.path().join("r.jsonl");
    let manifest = ds.join("manifest.txt");
    let (code, err) = run(&["eval", "--ckpt", ck, "--manifest", manifest.to_str().unwrap(), "--out", report.to_str().unwrap()]);
    assert_eq!(code, 2);
    assert!(err.contains("00003.png") && err.contains("00007.txt"), "{err}");

    let cfg = tmp.path().join("typo.cfg");
    fs::write(&cfg, "widht=8\n").unwrap();
    let (code, err) = run(&["train", "--manifest", f.path("ds/manifest.txt").to_str().unwrap(), "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("t.ckpt").to_str().unwrap()]);
    assert_eq!(code, 2);
    assert!(err.contains("widht"), "{err}");
}

#[test]
fn numeric_failure_exits_with_3() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("hot.cfg");
    fs::write(
        &cfg,
        "width=8\nblocks_deblur=1\nblocks_upsample=1\nblocks_refine=1\nepochs_a=1\nepochs_b=0\nlr_drop=2\nbatches_per_epoch=3\nbatch=2\nvalidation=0\npool=2\nlr=1e300\nlr_late=1e300\n",
    )
    .unwrap();
    let (code, err) = run(&[
        "train",
        "--manifest",
        f.path("ds/manifest.txt").to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        tmp.path().join("t.ckpt").to_str().unwrap(),
    ]);
    assert_eq!(code, 3, "{err}");
    assert!(err.contains("non-finite"), "{err}");
}

#[test]
fn short_training_run_writes_checkpoint_and_log() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("short.cfg");
    fs::write(
        &cfg,
        "width=8\nblocks_deblur=1\nblocks_upsample=1\nblocks_refine=1\nepochs_a=1\nepochs_b=1\nlr_drop=2\nbatches_per_epoch=2\nbatch=2\nvalidation=0\npool=2\n",
    )
    .unwrap();
    let out = tmp.path().join("t.ckpt");
    let summary = commands::train(&commands::TrainArgs {
        manifest: f.path("ds/manifest.txt"),
        profile: Profile::Desk,
        config: Some(cfg),
        out: out.clone(),
        log: None,
        seed: 0,
    })
    .unwrap();
    assert_eq!(summary.steps, 4);
    let log = fs::read_to_string(&summary.log).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "step,phase,lr,L_D,L_U,L_F,total");
    assert_eq!(lines.len(), 5);
    assert!(lines[3].starts_with("2,B,"));
    let bytes = fs::read(&out).unwrap();
    assert_eq!(Checkpoint::from_bytes(&bytes).unwrap().to_bytes(), bytes);
}

#[test]
fn paper_profile_prints_schedule() {
    let settings = commands::settings(Profile::Paper, 4, None).unwrap();
    let text = caduf::train::Schedule(&settings.train).to_string();
    assert!(text.contains("140 epochs"), "{text}");
    assert!(text.contains("phase A: epochs 1-20"));
    assert!(text.contains("epochs 21-110"));
    assert!(text.contains("epochs 111-140  lr 1e-5"));
}
