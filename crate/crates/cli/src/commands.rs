use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use orthovit::checkpoint::{check_config, Checkpoint, LoadMode, KIND_AUTOENCODER, KIND_PROBE};
use orthovit::corruption::{severity_sweep, CorruptionKind, HELD_OUT_KINDS, TRAINING_KINDS};
use orthovit::data::{generate_synthetic, split_ranges, to_u8, Dataset, DatasetHeader, ImageBatch, SyntheticSpec};
use orthovit::metrics::EvalReport;
use orthovit::model::{is_encoder_param, Autoencoder, ModelConfig};
use orthovit::train::{
    evaluate_classification, evaluate_reconstruction, evaluate_revision, evaluate_robustness, probe_checkpoint, train_probe,
    write_history, Pretrainer, ProbeRecord, ProbeTask, Protocol, TrainConfig,
};
use orthovit::{Error, Result};

use crate::manifest::{parse_kv, Manifest};
use crate::{EvalArgs, GenDataArgs, ModelFlags, PretrainArgs, ProbeArgs, ReviseArgs, RobustnessArgs, SweepFlags, TrainFlags};

pub const SPLITS: [&str; 3] = ["train", "val", "test"];
const CHECKPOINT_FILE: &str = "checkpoint.uorp";
const PROBE_FILE: &str = "probe.uorp";
const REPORT_FILE: &str = "report.csv";

const MODEL_KEYS: [&str; 8] = [
    "image_h",
    "image_w",
    "channels",
    "patch_size",
    "embed_dim",
    "depth",
    "heads",
    "probe_depth",
];

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

pub fn split_file(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.ornc"))
}

/// `data` is either a dataset directory or a single ORNC file.
fn resolve_split(data: &Path, split: &str) -> PathBuf {
    if data.is_dir() {
        split_file(data, split)
    } else {
        data.to_path_buf()
    }
}

fn load_split(data: &Path, split: &str, manifest: &mut Manifest) -> Result<(PathBuf, Dataset)> {
    let path = resolve_split(data, split);
    let ds = Dataset::read(&path)?;
    manifest.input(&format!("data.{split}"), &path)?;
    Ok((path, ds))
}

fn dims_problems(cfg: &ModelConfig, h: &DatasetHeader) -> Vec<String> {
    [
        ("image_h", cfg.image_h, h.height),
        ("image_w", cfg.image_w, h.width),
        ("channels", cfg.channels, h.channels),
    ]
    .into_iter()
    .filter(|(_, m, d)| m != d)
    .map(|(k, m, d)| format!("{k}: {m} in model, {d} in data"))
    .collect()
}

fn check_ckpt_data(cfg: &ModelConfig, ds: &Dataset) -> Result<()> {
    let problems = dims_problems(cfg, &ds.header());
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Mismatch(problems))
    }
}

fn read_config_file(path: &Path, allowed: &[&str], manifest: &mut Manifest) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let kv = parse_kv(&text, path)?;
    for k in kv.keys() {
        if !allowed.contains(&k.as_str()) {
            return Err(Error::Config(format!("{}: unknown key {k:?}", path.display())));
        }
    }
    manifest.input("config", path)?;
    Ok(kv)
}

fn apply_model_kv(cfg: &ModelConfig, kv: &BTreeMap<String, String>) -> Result<ModelConfig> {
    let mut merged: BTreeMap<String, String> = cfg.to_kv().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    for (k, v) in kv {
        if MODEL_KEYS.contains(&k.as_str()) {
            merged.insert(k.clone(), v.clone());
        }
    }
    ModelConfig::from_kv(&merged)
}

fn apply_model_flags(cfg: &ModelConfig, f: &ModelFlags) -> Result<ModelConfig> {
    let mut kv = BTreeMap::new();
    for (k, v) in [
        ("patch_size", f.patch_size),
        ("embed_dim", f.embed_dim),
        ("depth", f.depth),
        ("heads", f.heads),
        ("probe_depth", f.probe_depth),
    ] {
        if let Some(v) = v {
            kv.insert(k.to_string(), v.to_string());
        }
    }
    apply_model_kv(cfg, &kv)
}

/// Applies set flags; returns whether the learning rate was given.
fn apply_train_flags(cfg: &mut TrainConfig, f: &TrainFlags) -> bool {
    if let Some(v) = f.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = f.batch {
        cfg.batch_size = v;
    }
    if let Some(v) = f.seed {
        cfg.seed = v;
    }
    if let Some(v) = f.lr {
        cfg.base_lr = v;
    }
    if let Some(v) = f.weight_decay {
        cfg.weight_decay = v;
    }
    if let Some(v) = f.warmup_epochs {
        cfg.warmup_epochs = v;
    }
    if f.max_steps.is_some() {
        cfg.max_steps = f.max_steps;
    }
    if let Some(v) = f.beta1 {
        cfg.beta1 = v;
    }
    if let Some(v) = f.beta2 {
        cfg.beta2 = v;
    }
    if let Some(v) = f.corruptions_per_image {
        cfg.corruptions_per_image = v;
    }
    f.lr.is_some()
}

fn print_aggregates(report: &EvalReport) {
    println!("{:<16} {:<22} {:>10} {:>6}", "metric", "group", "mean", "n");
    for a in report.aggregates() {
        println!("{:<16} {:<22} {:>10.4} {:>6}", a.metric, a.group, a.mean, a.count);
    }
}

fn write_report(report: &EvalReport, dir: &Path, name: &str, role: &str, manifest: &mut Manifest) -> Result<()> {
    let path = dir.join(name);
    report.write_csv(&path)?;
    manifest.artifact(role, &path)
}

fn parse_kinds(names: &[String], default: &[CorruptionKind]) -> Result<Vec<CorruptionKind>> {
    if names.is_empty() {
        return Ok(default.to_vec());
    }
    names
        .iter()
        .map(|n| {
            let kind: CorruptionKind = n.parse()?;
            if kind == CorruptionKind::Clean {
                return Err(Error::Config("clean is not a corruption kind for a sweep".into()));
            }
            Ok(kind)
        })
        .collect()
}

fn sweep_config(sweep: &SweepFlags, kinds: &[CorruptionKind], manifest: &mut Manifest) -> Result<()> {
    if let Some(bad) = sweep.severities.iter().find(|s| !(1..=3).contains(*s)) {
        return Err(Error::Config(format!("severity {bad} outside 1..=3")));
    }
    let names: Vec<&str> = kinds.iter().map(|k| k.name()).collect();
    let sevs: Vec<String> = sweep.severities.iter().map(u8::to_string).collect();
    manifest.config([
        ("kinds", names.join(",")),
        ("severities", sevs.join(",")),
        ("eval_seed", sweep.seed.to_string()),
    ]);
    manifest.set("seed", sweep.seed);
    Ok(())
}

fn load_autoencoder_ckpt(path: &Path, manifest: &mut Manifest) -> Result<Checkpoint> {
    let ck = Checkpoint::read(path)?;
    manifest.input("ckpt", path)?;
    if ck.kind() != KIND_AUTOENCODER {
        return Err(Error::Mismatch(vec![format!(
            "{} is a {:?} checkpoint, expected {KIND_AUTOENCODER:?}",
            path.display(),
            ck.kind()
        )]));
    }
    Ok(ck)
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let mut manifest = Manifest::new("gen-data");
    let spec = SyntheticSpec {
        count: a.count,
        height: a.size,
        width: a.size,
        channels: a.channels,
        classes: a.classes,
        seed: a.seed,
    };
    manifest.config([
        ("count", a.count.to_string()),
        ("size", a.size.to_string()),
        ("channels", a.channels.to_string()),
        ("classes", a.classes.to_string()),
    ]);
    manifest.set("seed", a.seed);
    let ds = generate_synthetic(&spec)?;
    create_dir(&a.out)?;
    for (split, range) in SPLITS.iter().zip(split_ranges(a.count)) {
        let path = split_file(&a.out, split);
        let part = ds.subset(range);
        part.write(&path)?;
        manifest.set(format!("artifact.{split}.count"), part.len());
        manifest.artifact(split, &path)?;
        println!("{split}: {} images -> {}", part.len(), path.display());
    }
    manifest.write(&a.out)?;
    Ok(())
}

/// Defaults < preset < config file < flags. The learning rate follows the
/// batch size unless set explicitly. A resumed run starts from the
/// configuration stored in its checkpoint instead of defaults and preset.
fn resolve_pretrain(
    a: &PretrainArgs,
    resume: Option<&Checkpoint>,
    manifest: &mut Manifest,
) -> Result<(ModelConfig, TrainConfig)> {
    let (mut model, mut train, mut lr_given) = match resume {
        Some(ck) => {
            let stored: BTreeMap<String, String> = ck
                .meta
                .iter()
                .filter_map(|(k, v)| k.strip_prefix("train.").map(|k| (k.to_string(), v.clone())))
                .collect();
            let mut train = TrainConfig::default();
            train.apply_kv(&stored)?;
            (ck.model_config()?, train, true)
        }
        None => (ModelConfig::preset(&a.preset)?, TrainConfig::default(), false),
    };
    if let Some(path) = &a.config {
        let mut allowed = MODEL_KEYS.to_vec();
        allowed.extend(TrainConfig::keys());
        let kv = read_config_file(path, &allowed, manifest)?;
        model = apply_model_kv(&model, &kv)?;
        train.apply_kv(&kv)?;
        lr_given |= kv.contains_key("base_lr");
    }
    model = apply_model_flags(&model, &a.model)?;
    lr_given |= apply_train_flags(&mut train, &a.train);
    if !lr_given {
        train.base_lr = TrainConfig::default_base_lr(train.batch_size);
    }
    train.validate()?;
    Ok((model, train))
}

pub fn pretrain(a: &PretrainArgs) -> Result<()> {
    let mut manifest = Manifest::new("pretrain");
    let resume = match &a.resume {
        Some(path) => {
            manifest.input("resume", path)?;
            Some(Checkpoint::read(path)?)
        }
        None => None,
    };
    let (model_cfg, train_cfg) = resolve_pretrain(a, resume.as_ref(), &mut manifest)?;
    let (_, ds) = load_split(&a.data, "train", &mut manifest)?;
    let problems = dims_problems(&model_cfg, &ds.header());
    if !problems.is_empty() {
        return Err(Error::Config(format!(
            "model configuration does not fit the data: {}",
            problems.join("; ")
        )));
    }
    manifest.set("preset", if resume.is_some() { "resumed" } else { a.preset.as_str() });
    manifest.config(model_cfg.to_kv());
    manifest.config(train_cfg.to_kv());
    manifest.set("seed", train_cfg.seed);

    let mut trainer = match &resume {
        Some(ck) => {
            check_config(&ck.model_config()?, &model_cfg)?;
            Pretrainer::resume(ck, train_cfg.clone())?
        }
        None => Pretrainer::new(Autoencoder::new(model_cfg.clone(), train_cfg.seed)?, train_cfg.clone())?,
    };
    let data = ds.to_batch();
    let mut history = vec![];
    while !trainer.is_done(data.len()) {
        let records = trainer.run_epoch(&data)?;
        if let Some(last) = records.last() {
            eprintln!(
                "epoch {}/{} step {} lr {:.3e} loss {:.5} (rs {:.5}, ri {:.5})",
                trainer.epoch, train_cfg.epochs, trainer.step, last.lr, last.total, last.synthetic, last.anatomy
            );
        }
        history.extend(records);
    }

    create_dir(&a.out)?;
    let ck_path = a.out.join(CHECKPOINT_FILE);
    trainer.checkpoint()?.write(&ck_path)?;
    manifest.artifact("checkpoint", &ck_path)?;
    let loss_path = a.out.join("loss.csv");
    write_history(&loss_path, &history)?;
    manifest.artifact("loss", &loss_path)?;
    manifest.set("epochs_completed", trainer.epoch);
    manifest.set("steps_completed", trainer.step);
    manifest.write(&a.out)?;
    println!("checkpoint -> {}", ck_path.display());
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let mut manifest = Manifest::new("eval");
    let protocol: Protocol = a.protocol.parse()?;
    let ck = load_autoencoder_ckpt(&a.ckpt, &mut manifest)?;
    let model = ck.load_autoencoder(None, LoadMode::Strict)?;
    let (_, test) = load_split(&a.data, "test", &mut manifest)?;
    check_ckpt_data(model.config(), &test)?;
    manifest.config([("protocol", a.protocol.clone())]);
    let test = test.to_batch();
    let report = match protocol {
        Protocol::Reconstruction => {
            manifest.set("seed", 0);
            evaluate_reconstruction(&model, &test)?
        }
        Protocol::Revision => {
            let kinds = parse_kinds(&a.sweep.kinds, &TRAINING_KINDS)?;
            sweep_config(&a.sweep, &kinds, &mut manifest)?;
            evaluate_revision(&model, &test, &kinds, &a.sweep.severities, a.sweep.seed)?
        }
        other => {
            return Err(Error::Config(format!(
                "eval runs reconstruction or revision; {other:?} has its own command"
            )))
        }
    };
    create_dir(&a.out)?;
    write_report(&report, &a.out, REPORT_FILE, "report", &mut manifest)?;
    manifest.write(&a.out)?;
    print_aggregates(&report);
    Ok(())
}

/// Binary PGM for one channel, PPM for three; other channel counts are
/// stacked vertically into one PGM.
fn write_image(path_stem: &Path, pixels: &[f32], c: usize, h: usize, w: usize) -> Result<PathBuf> {
    let bytes: Vec<u8> = pixels.iter().map(|&p| to_u8(p)).collect();
    let (path, mut out) = if c == 3 {
        let mut rgb = Vec::with_capacity(bytes.len());
        for i in 0..h * w {
            rgb.extend((0..3).map(|ch| bytes[ch * h * w + i]));
        }
        let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
        out.extend(rgb);
        (path_stem.with_extension("ppm"), out)
    } else {
        (
            path_stem.with_extension("pgm"),
            format!("P5\n{w} {}\n255\n", h * c).into_bytes(),
        )
    };
    if c != 3 {
        out.extend(bytes);
    }
    std::fs::write(&path, out).map_err(io_err(&path))?;
    Ok(path)
}

pub fn revise(a: &ReviseArgs) -> Result<()> {
    let mut manifest = Manifest::new("revise");
    let ck = load_autoencoder_ckpt(&a.ckpt, &mut manifest)?;
    let model = ck.load_autoencoder(None, LoadMode::Strict)?;
    let (_, test) = load_split(&a.data, "test", &mut manifest)?;
    check_ckpt_data(model.config(), &test)?;
    let kinds = parse_kinds(&a.sweep.kinds, &TRAINING_KINDS)?;
    sweep_config(&a.sweep, &kinds, &mut manifest)?;
    manifest.config([("count", a.count.to_string())]);
    let all = test.to_batch();
    let test = all.slice(0..a.count.min(all.len()));

    let report = evaluate_revision(&model, &test, &kinds, &a.sweep.severities, a.sweep.seed)?;
    let image_dir = a.out.join("images");
    create_dir(&image_dir)?;
    let (c, h, w) = test.dims();
    for (j, &id) in test.ids.iter().enumerate() {
        write_image(&image_dir.join(format!("{id:05}_clean")), test.image(j), c, h, w)?;
    }
    for corrupted in severity_sweep(&test, &kinds, &a.sweep.severities, a.sweep.seed)? {
        let revised = ImageBatch::unlabeled(model.reconstruct(&corrupted.images)?.anatomy);
        for (j, &id) in corrupted.ids.iter().enumerate() {
            let spec = corrupted.corruptions[j].expect("sweep annotates every image");
            let stem = format!("{id:05}_{}_{}", spec.kind.name(), spec.severity);
            write_image(&image_dir.join(format!("{stem}_corrupted")), corrupted.image(j), c, h, w)?;
            write_image(&image_dir.join(format!("{stem}_revised")), revised.image(j), c, h, w)?;
        }
    }
    manifest.set("artifact.images.path", image_dir.display());
    write_report(&report, &a.out, REPORT_FILE, "report", &mut manifest)?;
    manifest.write(&a.out)?;
    print_aggregates(&report);
    Ok(())
}

const PROBE_EPOCHS: usize = 20;
const PROBE_LR: f64 = 3e-3;
const PROBE_WARMUP_EPOCHS: usize = 1;

fn resolve_probe_train(a: &ProbeArgs, manifest: &mut Manifest) -> Result<TrainConfig> {
    let mut cfg = TrainConfig {
        epochs: PROBE_EPOCHS,
        base_lr: PROBE_LR,
        warmup_epochs: PROBE_WARMUP_EPOCHS,
        ..TrainConfig::default()
    };
    if let Some(path) = &a.config {
        let kv = read_config_file(path, &TrainConfig::keys(), manifest)?;
        cfg.apply_kv(&kv)?;
    }
    apply_train_flags(&mut cfg, &a.train);
    cfg.validate()?;
    Ok(cfg)
}

fn probe_history_csv(history: &[ProbeRecord]) -> String {
    let mut out = String::from("step,lr,loss\n");
    for r in history {
        out.push_str(&format!("{},{:?},{:?}\n", r.step, r.lr, r.loss));
    }
    out
}

pub fn probe(a: &ProbeArgs) -> Result<()> {
    let mut manifest = Manifest::new("probe");
    let task: ProbeTask = a.task.parse()?;
    if !a.data.is_dir() {
        return Err(Error::Config(format!(
            "--data must be a dataset directory with train.ornc and test.ornc, got {}",
            a.data.display()
        )));
    }
    let cfg = resolve_probe_train(a, &mut manifest)?;
    let ck = Checkpoint::read(&a.ckpt)?;
    manifest.input("ckpt", &a.ckpt)?;
    let (_, train) = load_split(&a.data, "train", &mut manifest)?;
    let (_, test) = load_split(&a.data, "test", &mut manifest)?;
    let classes = task.classes(train.num_classes);
    let mode = if a.allow_missing {
        LoadMode::AllowMissing
    } else {
        LoadMode::Strict
    };
    let mut probe = ck.load_probe(classes, cfg.seed, mode)?;
    check_ckpt_data(probe.config(), &train)?;
    check_ckpt_data(probe.config(), &test)?;
    manifest.config([
        ("task", task.name().to_string()),
        ("classes", classes.to_string()),
        ("allow_missing", a.allow_missing.to_string()),
    ]);
    manifest.config(probe.config().to_kv());
    manifest.config(cfg.to_kv());
    manifest.set("seed", cfg.seed);

    let history = train_probe(&mut probe, &train.to_batch(), task, &cfg)?;
    if let Some(last) = history.last() {
        eprintln!("probe {} steps, final loss {:.5}", history.len(), last.loss);
    }
    let report = evaluate_classification(&probe, &test.to_batch(), task, cfg.seed)?;

    create_dir(&a.out)?;
    let probe_path = a.out.join(PROBE_FILE);
    probe_checkpoint(&probe, task)?.write(&probe_path)?;
    manifest.artifact("probe", &probe_path)?;
    let loss_path = a.out.join("probe_loss.csv");
    std::fs::write(&loss_path, probe_history_csv(&history)).map_err(io_err(&loss_path))?;
    manifest.artifact("loss", &loss_path)?;
    write_report(&report, &a.out, REPORT_FILE, "report", &mut manifest)?;
    manifest.write(&a.out)?;
    print_aggregates(&report);
    Ok(())
}

pub fn robustness(a: &RobustnessArgs) -> Result<()> {
    let mut manifest = Manifest::new("robustness");
    let ae_ck = load_autoencoder_ckpt(&a.ckpt, &mut manifest)?;
    let ae = ae_ck.load_autoencoder(None, LoadMode::Strict)?;
    let probe_ck = Checkpoint::read(&a.probe_ckpt)?;
    manifest.input("probe_ckpt", &a.probe_ckpt)?;
    if probe_ck.kind() != KIND_PROBE {
        return Err(Error::Mismatch(vec![format!(
            "{} is not a probe checkpoint",
            a.probe_ckpt.display()
        )]));
    }
    if probe_ck.get("task") != Some(ProbeTask::Disease.name()) {
        return Err(Error::Config(format!(
            "robustness needs a disease probe, {} was trained for {:?}",
            a.probe_ckpt.display(),
            probe_ck.get("task").unwrap_or("unknown")
        )));
    }
    let probe = probe_ck.load_probe(probe_ck.get_parsed("classes")?, 0, LoadMode::Strict)?;
    check_config(probe.config(), ae.config())?;
    let differing: Vec<String> = probe
        .params()
        .iter()
        .filter(|(n, t)| is_encoder_param(n) && ae.params().by_name(n) != Some(*t))
        .map(|(n, _)| format!("{n}: probe encoder differs from the autoencoder checkpoint"))
        .collect();
    if !differing.is_empty() {
        return Err(Error::Mismatch(differing));
    }
    let (_, test) = load_split(&a.data, "test", &mut manifest)?;
    check_ckpt_data(probe.config(), &test)?;
    if test.num_classes != probe.classes() {
        return Err(Error::Mismatch(vec![format!(
            "probe has {} classes, data has {}",
            probe.classes(),
            test.num_classes
        )]));
    }
    let kinds = parse_kinds(&a.sweep.kinds, &HELD_OUT_KINDS)?;
    sweep_config(&a.sweep, &kinds, &mut manifest)?;
    let test = test.to_batch();

    let baseline = evaluate_classification(&probe, &test, ProbeTask::Disease, a.sweep.seed)?;
    let report = evaluate_robustness(&probe, &test, &kinds, &a.sweep.severities, a.sweep.seed)?;
    create_dir(&a.out)?;
    write_report(&baseline, &a.out, "baseline.csv", "baseline", &mut manifest)?;
    write_report(&report, &a.out, REPORT_FILE, "report", &mut manifest)?;
    manifest.write(&a.out)?;
    print_aggregates(&baseline);
    print_aggregates(&report);
    Ok(())
}
