use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_orthovit");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed ({:?}):\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn manifest(dir: &Path) -> BTreeMap<String, String> {
    std::fs::read_to_string(dir.join("manifest.txt"))
        .unwrap()
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

fn aggregates(csv: &Path) -> Vec<(String, String)> {
    std::fs::read_to_string(csv)
        .unwrap()
        .lines()
        .filter(|l| l.starts_with("aggregate,"))
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[1].to_string(), f[3].to_string())
        })
        .collect()
}

fn count_header(path: &Path) -> u32 {
    let b = std::fs::read(path).unwrap();
    u32::from_le_bytes(b[8..12].try_into().unwrap())
}

/// 60-image dataset and a one-epoch pretraining of a tiny model.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
    ckpt: PathBuf,
}

const TINY: [&str; 8] = ["--depth", "1", "--embed-dim", "16", "--heads", "2", "--probe-depth", "1"];

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let data = root.join("data");
    ok(&["gen-data", "--out", p(&data), "--count", "60", "--seed", "3"]);
    let run_dir = root.join("pre");
    let mut args = vec![
        "pretrain",
        "--data",
        p(&data),
        "--out",
        p(&run_dir),
        "--epochs",
        "2",
        "--warmup-epochs",
        "1",
        "--batch",
        "16",
        "--lr",
        "1e-3",
    ];
    args.extend(TINY);
    ok(&args);
    Fixture {
        ckpt: run_dir.join("checkpoint.uorp"),
        _dir: dir,
        root,
        data,
    }
}

#[test]
fn gen_data_splits_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["gen-data", "--out", p(&a), "--count", "1000", "--seed", "9"]);
    ok(&["gen-data", "--out", p(&b), "--count", "1000", "--seed", "9"]);
    let counts: Vec<u32> = ["train", "val", "test"]
        .iter()
        .map(|s| count_header(&a.join(format!("{s}.ornc"))))
        .collect();
    assert_eq!(counts, [800, 100, 100]);
    let (ma, mb) = (manifest(&a), manifest(&b));
    for split in ["train", "val", "test"] {
        let key = format!("artifact.{split}.sha256");
        assert_eq!(ma[&key], mb[&key]);
    }
    assert_eq!(ma["seed"], "9");
    assert_eq!(ma["command"], "gen-data");
}

#[test]
fn pretrain_zero_epochs_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["gen-data", "--out", p(&data), "--count", "40", "--seed", "1"]);
    let mut hashes = vec![];
    for (name, epochs) in [("init", "0"), ("r1", "2"), ("r2", "2")] {
        let out = dir.path().join(name);
        let mut args = vec![
            "pretrain",
            "--data",
            p(&data),
            "--out",
            p(&out),
            "--epochs",
            epochs,
            "--warmup-epochs",
            "0",
            "--batch",
            "8",
            "--seed",
            "5",
        ];
        args.extend(TINY);
        ok(&args);
        assert!(out.join("checkpoint.uorp").exists());
        let m = manifest(&out);
        assert_eq!(m["seed"], "5");
        hashes.push((
            m["artifact.checkpoint.sha256"].clone(),
            std::fs::read_to_string(out.join("loss.csv")).unwrap(),
        ));
    }
    assert_eq!(hashes[0].1.lines().count(), 1, "zero epochs writes only the header");
    assert_eq!(hashes[1], hashes[2]);
    assert_ne!(hashes[0].0, hashes[1].0);
}

#[test]
fn config_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["gen-data", "--out", p(&data), "--count", "20"]);
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        "# smoke\nembed_dim = 16\ndepth = 1\nheads = 2\nepochs = 3\nweight_decay = 0.1\n",
    )
    .unwrap();
    let out = dir.path().join("run");
    ok(&[
        "pretrain",
        "--data",
        p(&data),
        "--out",
        p(&out),
        "--config",
        p(&cfg),
        "--epochs",
        "0",
        "--batch",
        "32",
    ]);
    let m = manifest(&out);
    assert_eq!(m["config.epochs"], "0", "flag beats config file");
    assert_eq!(m["config.weight_decay"], "0.1", "config file beats default");
    assert_eq!(m["config.embed_dim"], "16", "config file beats preset");
    assert_eq!(m["config.heads"], "2");
    assert_eq!(m["config.patch_size"], "4", "preset value kept");
    assert_eq!(m["config.base_lr"], "0.000075", "learning rate follows batch size");

    std::fs::write(&cfg, "bogus_key = 1\n").unwrap();
    assert_eq!(
        code(&["pretrain", "--data", p(&data), "--out", p(&out), "--config", p(&cfg)]),
        3
    );
}

#[test]
fn error_classes_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&["gen-data", "--out", p(&data), "--count", "20", "--no-such-flag"]), 2);
    ok(&["gen-data", "--out", p(&data), "--count", "20", "--size", "32"]);
    let out = dir.path().join("o");
    // 32×32 data against the 28×28 preset.
    assert_eq!(code(&["pretrain", "--data", p(&data), "--out", p(&out), "--epochs", "0"]), 3);
    assert_eq!(
        code(&["pretrain", "--data", p(&dir.path().join("missing")), "--out", p(&out)]),
        4
    );
    let bad = dir.path().join("bad.ornc");
    std::fs::write(&bad, b"NOPE and more bytes than a header needs").unwrap();
    assert_eq!(code(&["pretrain", "--data", p(&bad), "--out", p(&out)]), 5);
    assert_eq!(code(&["gen-data", "--out", p(&out), "--classes", "1"]), 3);
}

#[test]
fn help_lists_every_flag() {
    let out = ok(&["pretrain", "--help"]);
    let text = String::from_utf8(out.stdout).unwrap();
    for flag in [
        "--data", "--preset", "--epochs", "--batch", "--seed", "--out", "--config", "--lr", "--resume", "--depth",
    ] {
        assert!(text.contains(flag), "{flag} missing from help");
    }
}

#[test]
fn evaluation_workflows() {
    let f = fixture();

    let rec = f.root.join("rec");
    ok(&[
        "eval",
        "--ckpt",
        p(&f.ckpt),
        "--data",
        p(&f.data),
        "--protocol",
        "reconstruction",
        "--out",
        p(&rec),
    ]);
    let agg = aggregates(&rec.join("report.csv"));
    let metrics: Vec<&str> = agg.iter().map(|(m, _)| m.as_str()).collect();
    assert_eq!(metrics, ["psnr_recon", "ssim_recon", "psnr_anatomy", "ssim_anatomy"]);
    let rows = std::fs::read_to_string(rec.join("report.csv")).unwrap().lines().count();
    assert_eq!(rows, 1 + 6 * 4 + 4, "header, 6 test images × 4 metrics, aggregates");

    let rev = f.root.join("rev");
    ok(&[
        "eval",
        "--ckpt",
        p(&f.ckpt),
        "--data",
        p(&f.data),
        "--protocol",
        "revision",
        "--out",
        p(&rev),
        "--kinds",
        "contrast,solarize",
        "--severities",
        "2,3",
    ]);
    assert_eq!(aggregates(&rev.join("report.csv")).len(), 2 * 2 * 3);
    assert_eq!(
        code(&[
            "eval",
            "--ckpt",
            p(&f.ckpt),
            "--data",
            p(&f.data),
            "--protocol",
            "robustness",
            "--out",
            p(&rev)
        ]),
        3
    );

    let dumps = f.root.join("dumps");
    ok(&[
        "revise",
        "--ckpt",
        p(&f.ckpt),
        "--data",
        p(&f.data),
        "--out",
        p(&dumps),
        "--count",
        "2",
        "--kinds",
        "gamma",
        "--severities",
        "3",
    ]);
    let img = std::fs::read(dumps.join("images/00001_gamma_3_revised.pgm")).unwrap();
    assert!(img.starts_with(b"P5\n28 28\n255\n"));
    assert_eq!(img.len(), 13 + 28 * 28);
    assert!(dumps.join("images/00000_clean.pgm").exists());
    assert!(dumps.join("images/00000_gamma_3_corrupted.pgm").exists());

    // Strict loading refuses an autoencoder checkpoint for a probe.
    let probe_dir = f.root.join("probe");
    let probe_args = [
        "probe",
        "--ckpt",
        p(&f.ckpt),
        "--data",
        p(&f.data),
        "--task",
        "disease",
        "--out",
        p(&probe_dir),
        "--epochs",
        "2",
        "--batch",
        "16",
    ];
    assert_eq!(code(&probe_args), 6);
    let mut with_flag = probe_args.to_vec();
    with_flag.push("--allow-missing");
    ok(&with_flag);
    let agg = aggregates(&probe_dir.join("report.csv"));
    assert_eq!(
        agg,
        [
            ("acc".to_string(), "clean".to_string()),
            ("auc".to_string(), "clean".to_string())
        ]
    );
    let probe_ckpt = probe_dir.join("probe.uorp");

    let det = f.root.join("detect");
    ok(&[
        "probe",
        "--ckpt",
        p(&f.ckpt),
        "--data",
        p(&f.data),
        "--task",
        "detect",
        "--out",
        p(&det),
        "--epochs",
        "1",
        "--warmup-epochs",
        "0",
        "--allow-missing",
    ]);
    assert_eq!(aggregates(&det.join("report.csv")).len(), 2);

    let rob = f.root.join("rob");
    ok(&[
        "robustness",
        "--ckpt",
        p(&f.ckpt),
        "--probe-ckpt",
        p(&probe_ckpt),
        "--data",
        p(&f.data),
        "--out",
        p(&rob),
    ]);
    let agg = aggregates(&rob.join("report.csv"));
    assert_eq!(agg.len(), 2 * 3 * 2, "kinds × severities × (acc, auc)");
    assert!(agg.iter().any(|(m, g)| m == "auc" && g == "pixelate:3"));
    assert_eq!(aggregates(&rob.join("baseline.csv")).len(), 2);

    // A detection probe or a foreign encoder is rejected.
    assert_eq!(
        code(&[
            "robustness",
            "--ckpt",
            p(&f.ckpt),
            "--probe-ckpt",
            p(&det.join("probe.uorp")),
            "--data",
            p(&f.data),
            "--out",
            p(&rob)
        ]),
        3
    );
    let other = f.root.join("other");
    let mut args = vec![
        "pretrain",
        "--data",
        p(&f.data),
        "--out",
        p(&other),
        "--epochs",
        "0",
        "--seed",
        "77",
    ];
    args.extend(TINY);
    ok(&args);
    assert_eq!(
        code(&[
            "robustness",
            "--ckpt",
            p(&other.join("checkpoint.uorp")),
            "--probe-ckpt",
            p(&probe_ckpt),
            "--data",
            p(&f.data),
            "--out",
            p(&rob)
        ]),
        6
    );
    // Autoencoder evaluation refuses a probe checkpoint.
    assert_eq!(
        code(&[
            "eval",
            "--ckpt",
            p(&probe_ckpt),
            "--data",
            p(&f.data),
            "--protocol",
            "reconstruction",
            "--out",
            p(&rec)
        ]),
        6
    );
}

#[test]
fn resume_continues_the_stored_run() {
    let f = fixture();
    let out = f.root.join("resumed");
    ok(&[
        "pretrain",
        "--data",
        p(&f.data),
        "--out",
        p(&out),
        "--resume",
        p(&f.ckpt),
        "--epochs",
        "3",
    ]);
    let m = manifest(&out);
    assert_eq!(m["epochs_completed"], "3");
    assert_eq!(m["steps_completed"], "9", "3 steps per epoch over 48 training images");
    assert_eq!(m["config.base_lr"], "0.001", "stored learning rate carried over");
    assert_eq!(m["config.embed_dim"], "16");
    assert_eq!(std::fs::read_to_string(out.join("loss.csv")).unwrap().lines().count(), 1 + 3);
}
