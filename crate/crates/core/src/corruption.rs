//! Seeded image distortions: seven training kinds, two held-out kinds.
//!
//! A [`CorruptionSpec`] is fully determined by `kind:severity:seed`; any
//! parameter sign choice is resolved from the seed. Outputs are always
//! clamped to `[0, 1]`.

use std::fmt;
use std::str::FromStr;

use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CorruptionKind {
    Clean,
    GaussianNoise,
    SaltPepper,
    Brightness,
    Contrast,
    Gamma,
    GaussianBlur,
    Solarize,
    BoxBlur,
    Pixelate,
}

use CorruptionKind::*;

/// Kinds used to build training inputs.
pub const TRAINING_KINDS: [CorruptionKind; 7] = [GaussianNoise, SaltPepper, Brightness, Contrast, Gamma, GaussianBlur, Solarize];

/// Kinds never seen in training, used for robustness sweeps.
pub const HELD_OUT_KINDS: [CorruptionKind; 2] = [BoxBlur, Pixelate];

pub const SEVERITIES: [u8; 3] = [1, 2, 3];

// streams for the counter RNG
const PIXEL_STREAM: u64 = 1;
const SIGN_STREAM: u64 = 2;
const SAMPLE_STREAM: u64 = 3;

impl CorruptionKind {
    pub fn name(self) -> &'static str {
        match self {
            Clean => "clean",
            GaussianNoise => "gaussian_noise",
            SaltPepper => "salt_pepper",
            Brightness => "brightness",
            Contrast => "contrast",
            Gamma => "gamma",
            GaussianBlur => "gaussian_blur",
            Solarize => "solarize",
            BoxBlur => "box_blur",
            Pixelate => "pixelate",
        }
    }

    pub fn all() -> [CorruptionKind; 10] {
        [
            Clean,
            GaussianNoise,
            SaltPepper,
            Brightness,
            Contrast,
            Gamma,
            GaussianBlur,
            Solarize,
            BoxBlur,
            Pixelate,
        ]
    }

    /// Class index for corruption detection: 0 is clean, 1..=7 the training kinds.
    pub fn detection_label(self) -> Option<usize> {
        if self == Clean {
            return Some(0);
        }
        TRAINING_KINDS.iter().position(|&k| k == self).map(|i| i + 1)
    }

    pub fn from_detection_label(label: usize) -> Option<Self> {
        match label {
            0 => Some(Clean),
            l => TRAINING_KINDS.get(l - 1).copied(),
        }
    }

    /// Parameter that leaves an image unchanged.
    fn identity_param(self) -> f64 {
        match self {
            Clean | GaussianNoise | SaltPepper | Brightness | GaussianBlur | BoxBlur => 0.0,
            Contrast | Gamma | Pixelate => 1.0,
            Solarize => f64::INFINITY,
        }
    }

    /// Magnitude table per severity 1..=3; `(weaker, stronger)` for kinds with two directions.
    fn table(self, severity: u8) -> (f64, Option<f64>) {
        let i = severity as usize - 1;
        match self {
            Clean => (0.0, None),
            GaussianNoise => ([0.05, 0.10, 0.20][i], None),
            SaltPepper => ([0.01, 0.03, 0.08][i], None),
            Brightness => ([0.1, 0.2, 0.35][i], Some(-[0.1, 0.2, 0.35][i])),
            Contrast => ([0.8, 0.6, 0.4][i], Some([1.25, 1.6, 2.2][i])),
            Gamma => ([0.8, 0.6, 0.5][i], Some([1.25, 1.6, 2.0][i])),
            GaussianBlur => ([0.5, 1.0, 1.5][i], None),
            Solarize => ([0.9, 0.75, 0.6][i], None),
            BoxBlur => ([1.0, 2.0, 3.0][i], None),
            Pixelate => ([2.0, 4.0, 7.0][i], None),
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::all()
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown corruption kind {s:?}")))
    }
}

/// One deterministic distortion application.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    /// 0 is the identity; 1..=3 index the severity tables.
    pub severity: u8,
    /// Resolved parameter (σ, fraction, shift, scale, exponent, threshold, radius or factor).
    pub param: f64,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8, seed: u64) -> Result<Self> {
        if severity > 3 {
            return Err(Error::config(format!("severity must be 0..=3, got {severity}")));
        }
        if kind == Clean && severity != 0 {
            return Err(Error::config("the clean kind only has severity 0"));
        }
        let param = if severity == 0 {
            kind.identity_param()
        } else {
            match kind.table(severity) {
                (p, None) => p,
                (p, Some(q)) => {
                    if rng::bits(seed, SIGN_STREAM, 0) & 1 == 0 {
                        p
                    } else {
                        q
                    }
                }
            }
        };
        Ok(CorruptionSpec {
            kind,
            severity,
            param,
            seed,
        })
    }

    pub fn clean() -> Self {
        CorruptionSpec {
            kind: Clean,
            severity: 0,
            param: 0.0,
            seed: 0,
        }
    }

    /// A spec with an explicit parameter instead of a severity-table value.
    pub fn with_param(kind: CorruptionKind, param: f64, seed: u64) -> Self {
        CorruptionSpec {
            kind,
            severity: 0,
            param,
            seed,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.kind == Clean || self.param == self.kind.identity_param()
    }

    /// `kind:severity` without the seed, for grouping reports.
    pub fn group(&self) -> String {
        format!("{}:{}", self.kind, self.severity)
    }

    /// Distorts one `[C, H, W]` image; `stream` separates images sharing a seed.
    pub fn apply_image(&self, image: &[f32], channels: usize, height: usize, width: usize, stream: u64) -> Vec<f32> {
        debug_assert_eq!(image.len(), channels * height * width);
        if self.is_identity() {
            return image.to_vec();
        }
        let seed = rng::derive(self.seed, &[PIXEL_STREAM, stream]);
        let p = self.param;
        let plane = height * width;
        let out: Vec<f32> = match self.kind {
            Clean => image.to_vec(),
            GaussianNoise => image
                .iter()
                .enumerate()
                .map(|(i, &x)| (x as f64 + p * rng::normal(seed, 0, i as u64)) as f32)
                .collect(),
            SaltPepper => image
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    if rng::uniform(seed, 1, i as u64) < p {
                        if rng::uniform(seed, 2, i as u64) < 0.5 {
                            0.0
                        } else {
                            1.0
                        }
                    } else {
                        x
                    }
                })
                .collect(),
            Brightness => image.iter().map(|&x| (x as f64 + p) as f32).collect(),
            Contrast => {
                let mean = image.iter().map(|&x| x as f64).sum::<f64>() / image.len() as f64;
                image.iter().map(|&x| (mean + p * (x as f64 - mean)) as f32).collect()
            }
            Gamma => image.iter().map(|&x| (x.max(0.0) as f64).powf(p) as f32).collect(),
            GaussianBlur => {
                let radius = (3.0 * p).ceil() as isize;
                let weights: Vec<f64> = (-radius..=radius).map(|k| (-(k * k) as f64 / (2.0 * p * p)).exp()).collect();
                let total: f64 = weights.iter().sum();
                let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
                image
                    .chunks(plane)
                    .flat_map(|ch| separable(ch, height, width, &weights))
                    .collect()
            }
            Solarize => image.iter().map(|&x| if x as f64 >= p { 1.0 - x } else { x }).collect(),
            BoxBlur => {
                let r = p as usize;
                let weights = vec![1.0 / (2 * r + 1) as f64; 2 * r + 1];
                image
                    .chunks(plane)
                    .flat_map(|ch| separable(ch, height, width, &weights))
                    .collect()
            }
            Pixelate => image
                .chunks(plane)
                .flat_map(|ch| pixelate(ch, height, width, p as usize))
                .collect(),
        };
        out.into_iter().map(|v| v.clamp(0.0, 1.0)).collect()
    }

    /// Applies the spec to every image of a batch (image `i` uses stream `i`).
    pub fn apply(&self, batch: &ImageBatch) -> Result<ImageBatch> {
        let (c, h, w) = batch.dims();
        let mut data = Vec::with_capacity(batch.images.len());
        for i in 0..batch.len() {
            data.extend(self.apply_image(batch.image(i), c, h, w, i as u64));
        }
        Ok(ImageBatch {
            images: Tensor::new(batch.images.shape().to_vec(), data)?,
            labels: batch.labels.clone(),
            ids: batch.ids.clone(),
            corruptions: vec![Some(*self); batch.len()],
        })
    }
}

impl fmt::Display for CorruptionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.kind, self.severity, self.seed)
    }
}

impl FromStr for CorruptionSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let [kind, severity, seed] = parts[..] else {
            return Err(Error::config(format!("corruption spec {s:?} is not kind:severity:seed")));
        };
        let severity = severity
            .parse()
            .map_err(|_| Error::config(format!("bad severity in {s:?}")))?;
        let seed = seed.parse().map_err(|_| Error::config(format!("bad seed in {s:?}")))?;
        CorruptionSpec::new(kind.parse()?, severity, seed)
    }
}

/// Edge-replicating separable convolution of one plane.
fn separable(plane: &[f32], height: usize, width: usize, weights: &[f64]) -> Vec<f32> {
    let r = (weights.len() / 2) as isize;
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0f64; plane.len()];
    for y in 0..height {
        for x in 0..width {
            tmp[y * width + x] = weights
                .iter()
                .enumerate()
                .map(|(k, w)| w * plane[y * width + clampi(x as isize + k as isize - r, width)] as f64)
                .sum();
        }
    }
    let mut out = vec![0f32; plane.len()];
    for y in 0..height {
        for x in 0..width {
            out[y * width + x] = weights
                .iter()
                .enumerate()
                .map(|(k, w)| w * tmp[clampi(y as isize + k as isize - r, height) * width + x])
                .sum::<f64>() as f32;
        }
    }
    out
}

/// Replaces each `factor × factor` block (partial at the edges) by its mean.
fn pixelate(plane: &[f32], height: usize, width: usize, factor: usize) -> Vec<f32> {
    let mut out = vec![0f32; plane.len()];
    for by in (0..height).step_by(factor) {
        for bx in (0..width).step_by(factor) {
            let (ye, xe) = ((by + factor).min(height), (bx + factor).min(width));
            let mut sum = 0f64;
            for y in by..ye {
                for x in bx..xe {
                    sum += plane[y * width + x] as f64;
                }
            }
            let mean = (sum / ((ye - by) * (xe - bx)) as f64) as f32;
            for y in by..ye {
                for x in bx..xe {
                    out[y * width + x] = mean;
                }
            }
        }
    }
    out
}

/// Draws a training distortion: the clean identity or one of the seven
/// training kinds, each with probability 1/8, at a uniform severity.
pub fn sample_training_spec(seed: u64) -> CorruptionSpec {
    let choice = rng::below(seed, SAMPLE_STREAM, 0, TRAINING_KINDS.len() as u64 + 1) as usize;
    if choice == 0 {
        return CorruptionSpec::clean();
    }
    let severity = 1 + rng::below(seed, SAMPLE_STREAM, 1, 3) as u8;
    let spec_seed = rng::bits(seed, SAMPLE_STREAM, 2);
    CorruptionSpec::new(TRAINING_KINDS[choice - 1], severity, spec_seed).expect("table severities are valid")
}

/// Draws `count` training distortions to apply in sequence. `count == 1`
/// is the default single-corruption regime.
pub fn sample_training_chain(seed: u64, count: usize) -> Vec<CorruptionSpec> {
    (0..count as u64)
        .map(|i| sample_training_spec(if i == 0 { seed } else { rng::derive(seed, &[i]) }))
        .collect()
}

/// One corrupted copy of `images` per `(kind, severity)`, annotated per image.
/// Each image gets its own seed derived from `seed` and its sample id.
pub fn severity_sweep(images: &ImageBatch, kinds: &[CorruptionKind], severities: &[u8], seed: u64) -> Result<Vec<ImageBatch>> {
    let (c, h, w) = images.dims();
    let mut out = Vec::with_capacity(kinds.len() * severities.len());
    for &kind in kinds {
        for &severity in severities {
            let mut data = Vec::with_capacity(images.images.len());
            let mut specs = Vec::with_capacity(images.len());
            for i in 0..images.len() {
                let spec_seed = rng::derive(seed, &[kind as u64, severity as u64, images.ids[i]]);
                let spec = if severity == 0 {
                    CorruptionSpec::new(kind, 0, spec_seed)?
                } else {
                    CorruptionSpec::new(kind, severity, spec_seed)?
                };
                data.extend(spec.apply_image(images.image(i), c, h, w, 0));
                specs.push(Some(spec));
            }
            out.push(ImageBatch {
                images: Tensor::new(images.images.shape().to_vec(), data)?,
                labels: images.labels.clone(),
                ids: images.ids.clone(),
                corruptions: specs,
            });
        }
    }
    Ok(out)
}
