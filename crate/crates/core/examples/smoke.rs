//! Smoke-scale end-to-end run: pretraining, revision and probes on the
//! procedural two-class dataset.

use std::time::Instant;

use orthovit::corruption::{HELD_OUT_KINDS, TRAINING_KINDS};
use orthovit::data::{generate_synthetic, split_ranges, SyntheticSpec};
use orthovit::model::{Autoencoder, ModelConfig, ProbeClassifier};
use orthovit::train::{
    evaluate_classification, evaluate_reconstruction, evaluate_revision, evaluate_robustness, pretrain, train_probe, ProbeTask,
    TrainConfig,
};

fn main() -> orthovit::Result<()> {
    let args: Vec<f64> = std::env::args().skip(1).map(|a| a.parse().unwrap()).collect();
    let lr = args.first().copied().unwrap_or(4e-2);
    let steps = args.get(1).copied().unwrap_or(500.0) as usize;
    let ds = generate_synthetic(&SyntheticSpec {
        count: 1000,
        height: 28,
        width: 28,
        channels: 1,
        classes: 2,
        seed: 1,
    })?;
    let [tr, _, te] = split_ranges(ds.len());
    let (train, test) = (ds.subset(tr).to_batch(), ds.subset(te).to_batch());
    let config = ModelConfig {
        embed_dim: 32,
        depth: 2,
        heads: 4,
        ..ModelConfig::preset_small()
    };
    let cfg = TrainConfig {
        epochs: 39,
        batch_size: 64,
        base_lr: lr,
        warmup_epochs: 8,
        seed: 7,
        max_steps: Some(steps),
        ..Default::default()
    };
    let t = Instant::now();
    let (trainer, hist) = pretrain(Autoencoder::new(config, 7)?, &train, &cfg)?;
    println!(
        "pretrain {:.1}s steps {} loss {:.5} -> {:.5}",
        t.elapsed().as_secs_f64(),
        hist.len(),
        hist[0].total,
        hist.last().unwrap().total
    );
    let rec = evaluate_reconstruction(&trainer.model, &test)?;
    for a in rec.aggregates() {
        println!("  {} {} {:.3}", a.metric, a.group, a.mean);
    }
    let t = Instant::now();
    let rev = evaluate_revision(&trainer.model, &test, &TRAINING_KINDS, &[1, 2, 3], 3)?;
    println!("revision {:.1}s", t.elapsed().as_secs_f64());
    for k in TRAINING_KINDS {
        for s in 1..=3 {
            let g = format!("{k}:{s}");
            println!(
                "  {g:18} S {:.2} A {:.2} Shat {:.2}",
                rev.aggregate("psnr_corrupted", &g).unwrap(),
                rev.aggregate("psnr_anatomy", &g).unwrap(),
                rev.aggregate("psnr_synthetic", &g).unwrap()
            );
        }
    }
    let pcfg = TrainConfig {
        epochs: 20,
        batch_size: 64,
        base_lr: 3e-3,
        warmup_epochs: 1,
        seed: 9,
        ..Default::default()
    };
    for task in [ProbeTask::Disease, ProbeTask::Detection] {
        let t = Instant::now();
        let mut probe = ProbeClassifier::from_autoencoder(&trainer.model, task.classes(2), 11)?;
        let h = train_probe(&mut probe, &train, task, &pcfg)?;
        let r = evaluate_classification(&probe, &test, task, 5)?;
        println!(
            "probe {:?} {:.1}s loss {:.3}->{:.3} {:?}",
            task,
            t.elapsed().as_secs_f64(),
            h[0].loss,
            h.last().unwrap().loss,
            r.aggregates().iter().map(|a| (a.metric.clone(), a.mean)).collect::<Vec<_>>()
        );
        if task == ProbeTask::Disease {
            let rb = evaluate_robustness(&probe, &test, &HELD_OUT_KINDS, &[1, 2, 3], 4)?;
            for a in rb.aggregates() {
                println!("  {} {} {:.3}", a.metric, a.group, a.mean);
            }
        }
    }
    Ok(())
}
