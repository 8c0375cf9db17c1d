//! Architecture contracts: patch round trip, decoder symmetry, gradient
//! separation between the two reconstruction losses, and encoder freeze.

use orthovit::data::{generate_synthetic, SyntheticSpec};
use orthovit::model::{is_encoder_param, Autoencoder, ModelConfig, ProbeClassifier, ANATOMY_DECODER, SYNTHETIC_DECODER};
use orthovit::nn::{patchify, unpatchify, PatchGrid};
use orthovit::tensor::{Tape, Tensor};
use orthovit::train::{train_probe, ProbeTask, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{perturb_params, random, tiny_config};
use super::Outcome;

pub fn patch_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cases = [
        (28, 28, 1, 4),
        (8, 12, 3, 4),
        (224, 224, 3, 16),
        (6, 6, 2, 1),
        (10, 10, 1, 10),
    ];
    for (h, w, c, p) in cases {
        let grid = PatchGrid::new(h, w, c, p).unwrap();
        let img = Tensor::<f32>::from_fn([2, c, h, w], |_| rng.gen::<f32>());
        let tokens = patchify(&img, &grid).unwrap();
        if tokens.shape() != [2, grid.tokens(), grid.patch_dim()] {
            return Outcome::new("patch_round_trip", false, format!("token shape {:?}", tokens.shape()));
        }
        let back = unpatchify(&tokens, &grid).unwrap();
        let same = back.data().iter().zip(img.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same || back.shape() != img.shape() {
            return Outcome::new("patch_round_trip", false, format!("mismatch for {h}x{w}x{c} p{p}"));
        }
    }
    Outcome::new("patch_round_trip", true, format!("{} shapes bitwise", cases.len()))
}

/// Patch `(gy, gx)` of the token grid holds pixel `(gy·p + r, gx·p + q)`
/// of channel `ch` at offset `(r·p + q)·C + ch`.
pub fn patch_layout() -> Outcome {
    let grid = PatchGrid::new(8, 12, 2, 4).unwrap();
    let img = Tensor::<f32>::from_fn([1, 2, 8, 12], |i| i as f32);
    let tokens = patchify(&img, &grid).unwrap();
    let mut ok = true;
    for gy in 0..2 {
        for gx in 0..3 {
            for r in 0..4 {
                for q in 0..4 {
                    for ch in 0..2 {
                        let pixel = img.data()[ch * 96 + (gy * 4 + r) * 12 + gx * 4 + q];
                        let tok = tokens.data()[(gy * 3 + gx) * 32 + (r * 4 + q) * 2 + ch];
                        ok &= pixel == tok;
                    }
                }
            }
        }
    }
    Outcome::new("patch_layout", ok, "row-major grid, (row, col, channel) within a patch")
}

pub fn decoder_symmetry(cfg: &ModelConfig) -> Outcome {
    let model = Autoencoder::<f32>::new(cfg.clone(), 1).unwrap();
    let collect = |prefix: &str| -> Vec<(String, Vec<usize>)> {
        model
            .params()
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|rest| (rest.to_string(), t.shape().to_vec())))
            .collect()
    };
    let syn = collect(&format!("{SYNTHETIC_DECODER}."));
    let ana = collect(&format!("{ANATOMY_DECODER}."));
    let encoder_blocks = model
        .params()
        .iter()
        .filter(|(n, _)| n.starts_with("encoder.block") && n.ends_with("norm1.gamma"))
        .count();
    let decoder_blocks = syn
        .iter()
        .filter(|(n, _)| n.starts_with("block") && n.ends_with("norm1.gamma"))
        .count();
    let passed = !syn.is_empty() && syn == ana && encoder_blocks == cfg.depth && decoder_blocks == cfg.depth;
    Outcome::new(
        "decoder_symmetry",
        passed,
        format!(
            "{} tensors per decoder, depth {decoder_blocks} vs encoder {encoder_blocks}",
            syn.len()
        ),
    )
}

/// `L_RS` never reaches the anatomy decoder and `L_RI` never reaches the
/// synthetic decoder; both reach the encoder.
pub fn gradient_separation() -> Outcome {
    let mut model = Autoencoder::<f64>::new(tiny_config(), 3).unwrap();
    perturb_params(model.params_mut(), 4);
    let clean = random(&[2, 1, 8, 8], 5).map(|v| 0.5 + 0.4 * v);
    let synthetic = clean.map(|v| 1.0 - v);
    let mut detail = vec![];
    let mut passed = true;
    for (which, silent) in [("L_RS", ANATOMY_DECODER), ("L_RI", SYNTHETIC_DECODER)] {
        let mut tape = Tape::new();
        let b = model.params().bind(&mut tape, |_| true);
        let l = model.loss_var(&mut tape, &b, &clean, &synthetic).unwrap();
        let loss = if which == "L_RS" { l.synthetic } else { l.anatomy };
        let grads = tape.backward(loss).unwrap();
        let mut silent_nonzero = 0;
        let mut encoder_norm = 0.0;
        for id in model.params().ids() {
            let name = model.params().name(id);
            let g = grads.get(b.var(id)).unwrap();
            if name.starts_with(silent) {
                silent_nonzero += g.data().iter().filter(|v| **v != 0.0).count();
            }
            if is_encoder_param(name) {
                encoder_norm += g.data().iter().map(|v| v * v).sum::<f64>();
            }
        }
        passed &= silent_nonzero == 0 && encoder_norm > 0.0;
        detail.push(format!(
            "{which}: {silent_nonzero} nonzero in {silent}, encoder |g|²={encoder_norm:.2e}"
        ));
    }
    Outcome::new("gradient_separation", passed, detail.join("; "))
}

/// A few probe optimizer steps leave every encoder tensor bitwise intact
/// while the head moves.
pub fn encoder_freeze() -> Outcome {
    let cfg = tiny_config();
    let ae = Autoencoder::<f32>::new(cfg.clone(), 8).unwrap();
    let probe = ProbeClassifier::from_autoencoder(&ae, 2, 9).unwrap();
    let before = probe.params().clone();
    let data = generate_synthetic(&SyntheticSpec {
        count: 32,
        height: 8,
        width: 8,
        channels: 1,
        classes: 2,
        seed: 10,
    })
    .unwrap()
    .to_batch();
    let mut moved_encoder = 0;
    let mut moved_head = 0;
    for task in [ProbeTask::Disease, ProbeTask::Detection] {
        let mut p = ProbeClassifier::from_autoencoder(&ae, task.classes(2), 9).unwrap();
        let snapshot = p.params().clone();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            base_lr: 1e-2,
            warmup_epochs: 0,
            ..TrainConfig::default()
        };
        train_probe(&mut p, &data, task, &cfg).unwrap();
        for ((name, a), (_, b)) in p.params().iter().zip(snapshot.iter()) {
            let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            if is_encoder_param(name) && !same {
                moved_encoder += 1;
            }
            if !is_encoder_param(name) && !same {
                moved_head += 1;
            }
        }
    }
    // Direct gradient audit as well.
    let z = probe.encode(&data.slice(0..4).images).unwrap();
    let (_, grads) = probe.loss_and_grads(&z, &data.labels[..4]).unwrap();
    let encoder_grad_nonzero: usize = probe
        .params()
        .iter()
        .zip(&grads)
        .filter(|((n, _), _)| is_encoder_param(n))
        .map(|(_, g)| g.data().iter().filter(|v| **v != 0.0).count())
        .sum();
    let unchanged_probe = probe.params() == &before;
    let passed = moved_encoder == 0 && moved_head > 0 && encoder_grad_nonzero == 0 && unchanged_probe;
    Outcome::new(
        "encoder_freeze",
        passed,
        format!("{moved_encoder} encoder tensors moved, {moved_head} head tensors moved, {encoder_grad_nonzero} nonzero encoder grads"),
    )
}

pub fn suite() -> Vec<Outcome> {
    vec![
        patch_round_trip(),
        patch_layout(),
        decoder_symmetry(&ModelConfig::preset_small()),
        decoder_symmetry(&tiny_config()),
        gradient_separation(),
        encoder_freeze(),
    ]
}
