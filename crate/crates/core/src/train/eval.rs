//! Evaluation protocols producing [`EvalReport`]s.

use std::str::FromStr;

use super::{detection_batch, ProbeTask};
use crate::corruption::{severity_sweep, CorruptionKind, CorruptionSpec};
use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::metrics::{accuracy, argmax_rows, default_auc_mode, psnr_per_image, roc_auc, ssim_per_image, EvalReport};
use crate::model::{Autoencoder, ProbeClassifier};
use crate::tensor::Tensor;

/// Images per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    Reconstruction,
    Revision,
    Classification,
    Robustness,
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reconstruction" => Ok(Protocol::Reconstruction),
            "revision" => Ok(Protocol::Revision),
            "classification" => Ok(Protocol::Classification),
            "robustness" => Ok(Protocol::Robustness),
            _ => Err(Error::config(format!("unknown protocol {s:?}"))),
        }
    }
}

fn chunks(n: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    (0..n).step_by(EVAL_CHUNK).map(move |s| s..(s + EVAL_CHUNK).min(n))
}

/// PSNR/SSIM of `Î = D(E(I))` and `Î_A = D_A(E(I))` against clean `I`.
pub fn evaluate_reconstruction(model: &Autoencoder<f32>, test: &ImageBatch) -> Result<EvalReport> {
    let mut report = EvalReport::new();
    for range in chunks(test.len()) {
        let part = test.slice(range);
        let out = model.reconstruct(&part.images)?;
        let metrics = [
            ("psnr_recon", psnr_per_image(&out.synthetic, &part.images)?),
            ("ssim_recon", ssim_per_image(&out.synthetic, &part.images)?),
            ("psnr_anatomy", psnr_per_image(&out.anatomy, &part.images)?),
            ("ssim_anatomy", ssim_per_image(&out.anatomy, &part.images)?),
        ];
        for (j, &id) in part.ids.iter().enumerate() {
            for (name, values) in &metrics {
                report.push(id, name, values[j], "clean", "clean");
            }
        }
    }
    Ok(report)
}

/// For every `(kind, severity)`: PSNR(S, I), PSNR(Î_A, I) and PSNR(Ŝ, S)
/// with `S` the corrupted test image.
pub fn evaluate_revision(
    model: &Autoencoder<f32>,
    test: &ImageBatch,
    kinds: &[CorruptionKind],
    severities: &[u8],
    seed: u64,
) -> Result<EvalReport> {
    let mut report = EvalReport::new();
    let sweeps = severity_sweep(test, kinds, severities, seed)?;
    for corrupted in &sweeps {
        for range in chunks(test.len()) {
            let clean = test.slice(range.clone());
            let s = corrupted.slice(range);
            let out = model.reconstruct(&s.images)?;
            let metrics = [
                ("psnr_corrupted", psnr_per_image(&s.images, &clean.images)?),
                ("psnr_anatomy", psnr_per_image(&out.anatomy, &clean.images)?),
                ("psnr_synthetic", psnr_per_image(&out.synthetic, &s.images)?),
            ];
            for (j, &id) in s.ids.iter().enumerate() {
                let spec = s.corruptions[j].expect("sweep annotates every image");
                for (name, values) in &metrics {
                    report.push(id, name, values[j], spec.to_string(), spec.group());
                }
            }
        }
    }
    Ok(report)
}

fn logits_for(probe: &ProbeClassifier<f32>, images: &ImageBatch) -> Result<Tensor<f32>> {
    let mut data = vec![];
    for range in chunks(images.len()) {
        data.extend_from_slice(probe.forward(&images.slice(range).images)?.data());
    }
    Tensor::new(vec![images.len(), probe.classes()], data)
}

fn classification_rows(report: &mut EvalReport, probe: &ProbeClassifier<f32>, batch: &ImageBatch, group: &str) -> Result<()> {
    let logits = logits_for(probe, batch)?;
    let pred = argmax_rows(&logits)?;
    for (j, &id) in batch.ids.iter().enumerate() {
        let annotation = match batch.corruptions[j] {
            Some(spec) if group != "clean" => spec.to_string(),
            _ => format!("label={}", batch.labels[j]),
        };
        report.push(id, "acc", (pred[j] == batch.labels[j]) as u8 as f64, annotation, group);
    }
    let auc = roc_auc(&logits, &batch.labels, default_auc_mode(probe.classes()))?;
    report.push_summary("auc", group, auc, batch.len());
    debug_assert!((report.aggregate("acc", group).unwrap() - accuracy(&logits, &batch.labels)?).abs() < 1e-12);
    Ok(())
}

/// ACC and AUC of the probe. Disease uses clean test images; detection
/// corrupts them with stratified labels derived from `seed`.
pub fn evaluate_classification(
    probe: &ProbeClassifier<f32>,
    test: &ImageBatch,
    task: ProbeTask,
    seed: u64,
) -> Result<EvalReport> {
    let mut report = EvalReport::new();
    match task {
        ProbeTask::Disease => classification_rows(&mut report, probe, test, "clean")?,
        ProbeTask::Detection => classification_rows(&mut report, probe, &detection_batch(test, seed)?, "detect")?,
    }
    Ok(report)
}

/// Disease ACC and AUC per `(kind, severity)` of held-out corruptions.
pub fn evaluate_robustness(
    probe: &ProbeClassifier<f32>,
    test: &ImageBatch,
    kinds: &[CorruptionKind],
    severities: &[u8],
    seed: u64,
) -> Result<EvalReport> {
    let mut report = EvalReport::new();
    for corrupted in severity_sweep(test, kinds, severities, seed)? {
        let group = corrupted.corruptions[0]
            .map(|s: CorruptionSpec| s.group())
            .unwrap_or_default();
        classification_rows(&mut report, probe, &corrupted, &group)?;
    }
    Ok(report)
}
