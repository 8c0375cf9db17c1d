//! Scalar reference implementations of the metrics, written independently
//! of the library code, and randomized comparisons against them.

use orthovit::metrics::{accuracy, binary_auc, psnr_per_image, roc_auc, ssim_per_image, AucMode};
use orthovit::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Outcome;

pub const CASES: usize = 200;
pub const TOL: f64 = 1e-9;

pub fn ref_psnr(a: &[f32], b: &[f32]) -> f64 {
    let mut sq = 0.0;
    for i in 0..a.len() {
        let d = a[i] as f64 - b[i] as f64;
        sq += d * d;
    }
    let mse = sq / a.len() as f64;
    if mse < 1e-10 {
        100.0
    } else {
        -10.0 * mse.log10()
    }
}

/// Two-pass windowed SSIM with a directly built 2-D Gaussian.
pub fn ref_ssim(a: &[f32], b: &[f32], c: usize, h: usize, w: usize) -> f64 {
    let k = 7usize;
    let sigma = 1.5f64;
    let mut win = [[0.0f64; 7]; 7];
    let mut total_w = 0.0;
    for (dy, row) in win.iter_mut().enumerate() {
        for (dx, cell) in row.iter_mut().enumerate() {
            let (y, x) = (dy as f64 - 3.0, dx as f64 - 3.0);
            *cell = (-(x * x + y * y) / (2.0 * sigma * sigma)).exp();
            total_w += *cell;
        }
    }
    let (c1, c2) = (1e-4, 9e-4);
    let mut acc = 0.0;
    for ch in 0..c {
        let at = |img: &[f32], y: usize, x: usize| img[ch * h * w + y * w + x] as f64;
        let mut sum = 0.0;
        let mut count = 0usize;
        for y0 in 0..=h - k {
            for x0 in 0..=w - k {
                let (mut mu_a, mut mu_b) = (0.0, 0.0);
                for dy in 0..k {
                    for dx in 0..k {
                        let wt = win[dy][dx] / total_w;
                        mu_a += wt * at(a, y0 + dy, x0 + dx);
                        mu_b += wt * at(b, y0 + dy, x0 + dx);
                    }
                }
                let (mut var_a, mut var_b, mut cov) = (0.0, 0.0, 0.0);
                for dy in 0..k {
                    for dx in 0..k {
                        let wt = win[dy][dx] / total_w;
                        let da = at(a, y0 + dy, x0 + dx) - mu_a;
                        let db = at(b, y0 + dy, x0 + dx) - mu_b;
                        var_a += wt * da * da;
                        var_b += wt * db * db;
                        cov += wt * da * db;
                    }
                }
                sum += (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2) / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
                count += 1;
            }
        }
        acc += sum / count as f64;
    }
    acc / c as f64
}

pub fn ref_accuracy(logits: &[f64], k: usize, labels: &[usize]) -> f64 {
    let mut correct = 0;
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits[i * k..(i + 1) * k];
        let mut best = 0;
        for j in 1..k {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    correct as f64 / labels.len() as f64
}

/// Pair counting: fraction of (positive, negative) pairs ranked correctly,
/// ties counting one half.
pub fn ref_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let mut pairs = 0.0;
    let mut wins = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if positive[i] && !positive[j] {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

fn ref_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn ref_macro_auc(logits: &[f64], k: usize, labels: &[usize]) -> f64 {
    let probs: Vec<Vec<f64>> = logits.chunks(k).map(ref_softmax).collect();
    let mut total = 0.0;
    let mut classes = 0;
    for c in 0..k {
        let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        if !pos.contains(&true) {
            continue;
        }
        let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        total += ref_auc(&scores, &pos);
        classes += 1;
    }
    total / classes as f64
}

fn image_pair(rng: &mut ChaCha8Rng) -> (Tensor<f32>, Tensor<f32>) {
    let c = rng.gen_range(1..=3);
    let h = rng.gen_range(7..=16);
    let w = rng.gen_range(7..=16);
    let n = rng.gen_range(1..=3);
    let a = Tensor::from_fn([n, c, h, w], |_| rng.gen::<f32>());
    let noise: f32 = [0.0, 0.001, 0.05, 0.3][rng.gen_range(0..4)];
    let b = Tensor::from_fn([n, c, h, w], |i| {
        (a.data()[i] + noise * (rng.gen::<f32>() - 0.5)).clamp(0.0, 1.0)
    });
    (a, b)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn psnr_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut worst: f64 = 0.0;
    for _ in 0..CASES {
        let (a, b) = image_pair(&mut rng);
        let l: usize = a.shape()[1..].iter().product();
        let got = psnr_per_image(&a, &b).unwrap();
        let want: Vec<f64> = a
            .data()
            .chunks(l)
            .zip(b.data().chunks(l))
            .map(|(x, y)| ref_psnr(x, y))
            .collect();
        worst = worst.max(max_diff(&got, &want));
    }
    Outcome::new(
        "psnr_oracle",
        worst <= TOL,
        format!("max |Δ| = {worst:.2e} over {CASES} cases"),
    )
}

pub fn ssim_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for _ in 0..CASES {
        let (a, b) = image_pair(&mut rng);
        let s = a.shape().to_vec();
        let l = s[1] * s[2] * s[3];
        let got = ssim_per_image(&a, &b).unwrap();
        let want: Vec<f64> = a
            .data()
            .chunks(l)
            .zip(b.data().chunks(l))
            .map(|(x, y)| ref_ssim(x, y, s[1], s[2], s[3]))
            .collect();
        worst = worst.max(max_diff(&got, &want));
    }
    Outcome::new(
        "ssim_oracle",
        worst <= TOL,
        format!("max |Δ| = {worst:.2e} over {CASES} cases"),
    )
}

/// Logits quantized to a coarse grid so ties occur.
fn logits_case(rng: &mut ChaCha8Rng) -> (Vec<f64>, usize, Vec<usize>) {
    let k = rng.gen_range(2..=6);
    let n = rng.gen_range(4..=40);
    let steps = [2.0, 4.0, 1000.0][rng.gen_range(0..3)];
    let logits: Vec<f64> = (0..n * k)
        .map(|_| (rng.gen_range(-2.0..2.0f64) * steps).round() / steps)
        .collect();
    let mut labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
    labels[0] = 0;
    labels[1] = 1;
    (logits, k, labels)
}

pub fn accuracy_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst: f64 = 0.0;
    for _ in 0..CASES {
        let (logits, k, labels) = logits_case(&mut rng);
        let t = Tensor::new([labels.len(), k], logits.clone()).unwrap();
        worst = worst.max((accuracy(&t, &labels).unwrap() - ref_accuracy(&logits, k, &labels)).abs());
    }
    Outcome::new(
        "accuracy_oracle",
        worst <= TOL,
        format!("max |Δ| = {worst:.2e} over {CASES} cases"),
    )
}

pub fn auc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut worst: f64 = 0.0;
    for case in 0..CASES {
        let (logits, k, labels) = logits_case(&mut rng);
        let t = Tensor::new([labels.len(), k], logits.clone()).unwrap();
        let (got, want) = if case % 2 == 0 {
            // Raw binary scores with ties.
            let scores: Vec<f64> = logits.iter().step_by(k).cloned().collect();
            let pos: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
            (binary_auc(&scores, &pos).unwrap(), ref_auc(&scores, &pos))
        } else {
            (
                roc_auc(&t, &labels, AucMode::OvrMacro).unwrap(),
                ref_macro_auc(&logits, k, &labels),
            )
        };
        worst = worst.max((got - want).abs());
    }
    // The binary softmax mode against pair counting on p(class 1).
    for _ in 0..CASES / 4 {
        let n = rng.gen_range(4..30);
        let logits: Vec<f64> = (0..2 * n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let t = Tensor::new([n, 2], logits.clone()).unwrap();
        let scores: Vec<f64> = logits.chunks(2).map(|r| ref_softmax(r)[1]).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        worst = worst.max((roc_auc(&t, &labels, AucMode::Binary).unwrap() - ref_auc(&scores, &pos)).abs());
    }
    Outcome::new(
        "auc_oracle",
        worst <= TOL,
        format!("max |Δ| = {worst:.2e} over {} cases", CASES + CASES / 4),
    )
}

pub fn auc_worked_example() -> Outcome {
    let scores = [0.1, 0.4, 0.35, 0.8];
    let pos = [false, false, true, true];
    let got = binary_auc(&scores, &pos).unwrap();
    let pairs = ref_auc(&scores, &pos);
    Outcome::new(
        "auc_example",
        got == 0.75 && pairs == 0.75,
        format!("library {got}, pair count {pairs}"),
    )
}

pub fn suite() -> Vec<Outcome> {
    vec![
        psnr_oracle(),
        ssim_oracle(),
        accuracy_oracle(),
        auc_oracle(),
        auc_worked_example(),
    ]
}
