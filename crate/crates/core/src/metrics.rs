//! Image quality and classification metrics, and the tabular report they
//! feed. Everything is accumulated in f64.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// PSNR returned when the images are (numerically) identical.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 7;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

pub fn mse(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("mse", &[a.len()], &[b.len()]));
    }
    Ok(a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / a.len() as f64)
}

/// Peak signal-to-noise ratio in dB for peak value `max_val`.
pub fn psnr(a: &[f32], b: &[f32], max_val: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok(10.0 * (max_val * max_val / m).log10())
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for gy in &g {
        for gx in &g {
            w.push(gy * gx / (s * s));
        }
    }
    w
}

/// Mean windowed SSIM of two `[C, H, W]` images over valid window
/// positions, averaged over channels. Dynamic range is 1.
pub fn ssim(a: &[f32], b: &[f32], channels: usize, height: usize, width: usize) -> Result<f64> {
    let n = channels * height * width;
    if a.len() != n || b.len() != n {
        return Err(Error::dim("ssim", &[a.len(), b.len()], &[n, n]));
    }
    if height < SSIM_WINDOW || width < SSIM_WINDOW {
        return Err(Error::dim("ssim window", &[height, width], &[SSIM_WINDOW, SSIM_WINDOW]));
    }
    let win = gaussian_window();
    let (oh, ow) = (height - SSIM_WINDOW + 1, width - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for c in 0..channels {
        let pa = &a[c * height * width..(c + 1) * height * width];
        let pb = &b[c * height * width..(c + 1) * height * width];
        let mut plane = 0.0;
        for y in 0..oh {
            for x in 0..ow {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let w = win[dy * SSIM_WINDOW + dx];
                        let i = (y + dy) * width + x + dx;
                        let (va, vb) = (pa[i] as f64, pb[i] as f64);
                        ma += w * va;
                        mb += w * vb;
                        saa += w * va * va;
                        sbb += w * vb * vb;
                        sab += w * va * vb;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                plane +=
                    ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            }
        }
        total += plane / (oh * ow) as f64;
    }
    Ok(total / channels as f64)
}

/// Per-image PSNR for two `[N, C, H, W]` batches.
pub fn psnr_per_image<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Vec<f64>> {
    per_image(a, b, |x, y, _| psnr(x, y, 1.0))
}

/// Per-image SSIM for two `[N, C, H, W]` batches.
pub fn ssim_per_image<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Vec<f64>> {
    per_image(a, b, |x, y, s| ssim(x, y, s[1], s[2], s[3]))
}

fn per_image<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(&[f32], &[f32], &[usize]) -> Result<f64>) -> Result<Vec<f64>> {
    if a.shape() != b.shape() || a.rank() != 4 {
        return Err(Error::dim("per-image metric", a.shape(), b.shape()));
    }
    let shape = a.shape().to_vec();
    let l = shape[1] * shape[2] * shape[3];
    let a: Vec<f32> = a.data().iter().map(|v| v.f64() as f32).collect();
    let b: Vec<f32> = b.data().iter().map(|v| v.f64() as f32).collect();
    a.chunks(l).zip(b.chunks(l)).map(|(x, y)| f(x, y, &shape)).collect()
}

/// Index of the largest logit per row; ties go to the lowest index.
pub fn argmax_rows<T: Real>(logits: &Tensor<T>) -> Result<Vec<usize>> {
    if logits.rank() != 2 {
        return Err(Error::dim("argmax", logits.shape(), &[0, 0]));
    }
    let k = logits.shape()[1];
    Ok(logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

fn check_labels(n: usize, k: usize, labels: &[usize]) -> Result<()> {
    if labels.len() != n {
        return Err(Error::dim("labels", &[labels.len()], &[n]));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::config(format!("label {l} out of range for {k} classes")));
    }
    Ok(())
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let pred = argmax_rows(logits)?;
    check_labels(pred.len(), logits.shape()[1], labels)?;
    Ok(pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64)
}

/// Binary ROC-AUC via the tie-aware rank statistic: P(s⁺ > s⁻) + ½·P(tie).
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::dim("auc", &[scores.len()], &[positive.len()]));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite { op: "auc".into() });
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Undefined(format!(
            "AUC needs both classes, got {n_pos} positive and {n_neg} negative"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; tied block shares its midrank
        let midrank = (i + j + 2) as f64 / 2.0;
        rank_sum += midrank * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AucMode {
    /// Two classes; the score is the softmax probability of class 1.
    Binary,
    /// Unweighted mean of one-vs-rest AUCs over softmax probabilities,
    /// taken over the classes that occur in `labels`.
    OvrMacro,
}

pub fn softmax_rows<T: Real>(logits: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
    if logits.rank() != 2 {
        return Err(Error::dim("softmax", logits.shape(), &[0, 0]));
    }
    Ok(logits
        .data()
        .chunks(logits.shape()[1])
        .map(|row| {
            let m = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v.f64() - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|x| x / s).collect()
        })
        .collect())
}

pub fn roc_auc<T: Real>(logits: &Tensor<T>, labels: &[usize], mode: AucMode) -> Result<f64> {
    let probs = softmax_rows(logits)?;
    let k = logits.shape()[1];
    check_labels(probs.len(), k, labels)?;
    match mode {
        AucMode::Binary => {
            if k != 2 {
                return Err(Error::config(format!("binary AUC needs 2 classes, got {k}")));
            }
            let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
            let pos: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
            binary_auc(&scores, &pos)
        }
        AucMode::OvrMacro => {
            let mut total = 0.0;
            let mut present = 0;
            for c in 0..k {
                let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
                if !pos.contains(&true) {
                    continue;
                }
                let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
                total += binary_auc(&scores, &pos).map_err(|e| Error::Undefined(format!("class {c}: {e}")))?;
                present += 1;
            }
            Ok(total / present as f64)
        }
    }
}

/// `Binary` for two classes, `OvrMacro` otherwise.
pub fn default_auc_mode(classes: usize) -> AucMode {
    if classes == 2 {
        AucMode::Binary
    } else {
        AucMode::OvrMacro
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub sample_id: u64,
    pub metric: String,
    pub value: f64,
    /// Corruption spec string or class label.
    pub annotation: String,
    /// Aggregation key, e.g. `gaussian_noise:2` or `clean`.
    pub group: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub metric: String,
    pub group: String,
    pub mean: f64,
    pub count: usize,
}

/// Per-sample metric rows plus aggregates per `(metric, group)`.
///
/// Mean aggregates are derived from the rows. Metrics only defined over a
/// whole set (AUC) are added with [`EvalReport::push_summary`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    summaries: Vec<Aggregate>,
}

impl EvalReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, sample_id: u64, metric: &str, value: f64, annotation: impl Into<String>, group: impl Into<String>) {
        self.rows.push(ReportRow {
            sample_id,
            metric: metric.into(),
            value,
            annotation: annotation.into(),
            group: group.into(),
        });
    }

    pub fn push_summary(&mut self, metric: &str, group: impl Into<String>, value: f64, count: usize) {
        self.summaries.push(Aggregate {
            metric: metric.into(),
            group: group.into(),
            mean: value,
            count,
        });
    }

    pub fn extend(&mut self, other: EvalReport) {
        self.rows.extend(other.rows);
        self.summaries.extend(other.summaries);
    }

    /// Means in first-seen `(group, metric)` order, then summaries.
    pub fn aggregates(&self) -> Vec<Aggregate> {
        let mut index: HashMap<(&str, &str), usize> = HashMap::new();
        let mut acc: Vec<(&str, &str, f64, usize)> = vec![];
        for r in &self.rows {
            let slot = *index.entry((&r.metric, &r.group)).or_insert_with(|| {
                acc.push((&r.metric, &r.group, 0.0, 0));
                acc.len() - 1
            });
            acc[slot].2 += r.value;
            acc[slot].3 += 1;
        }
        acc.into_iter()
            .map(|(metric, group, sum, count)| Aggregate {
                metric: metric.into(),
                group: group.into(),
                mean: sum / count as f64,
                count,
            })
            .chain(self.summaries.iter().cloned())
            .collect()
    }

    pub fn aggregate(&self, metric: &str, group: &str) -> Option<f64> {
        self.aggregates()
            .into_iter()
            .find(|a| a.metric == metric && a.group == group)
            .map(|a| a.mean)
    }

    /// `sample_id,metric,value,annotation`; aggregate rows use the sample id
    /// `aggregate` and carry the group as annotation.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample_id,metric,value,annotation\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.6},{}",
                r.sample_id,
                r.metric,
                r.value,
                csv_field(&r.annotation)
            );
        }
        for a in self.aggregates() {
            let _ = writeln!(out, "aggregate,{},{:.6},{}", a.metric, a.mean, csv_field(&a.group));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_cap_and_closed_form() {
        let a = vec![0.3f32; 16];
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), 100.0);
        let b: Vec<f32> = vec![0.0; 4];
        let c: Vec<f32> = vec![0.1; 4];
        let p = psnr(&b, &c, 1.0).unwrap();
        assert!((p - 20.0).abs() < 1e-5, "{p}");
        assert!(psnr(&b, &a, 1.0).is_err());
    }

    #[test]
    fn ssim_identity_and_constants() {
        let a: Vec<f32> = (0..64).map(|i| (i % 7) as f32 / 7.0).collect();
        assert!((ssim(&a, &a, 1, 8, 8).unwrap() - 1.0).abs() < 1e-9);
        let k = vec![0.4f32; 64];
        assert!((ssim(&k, &k, 1, 8, 8).unwrap() - 1.0).abs() < 1e-9);
        assert!(ssim(&a[..36], &a[..36], 1, 6, 6).is_err());
    }

    #[test]
    fn accuracy_hand_count() {
        let logits = Tensor::new([4, 2], vec![1.0f64, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(accuracy(&logits, &[0, 1, 1, 0]).unwrap(), 0.75);
        let tie = Tensor::new([1, 3], vec![2.0f64, 2.0, 2.0]).unwrap();
        assert_eq!(argmax_rows(&tie).unwrap(), vec![0]);
        assert!(accuracy(&logits, &[0, 1, 2, 0]).is_err());
    }

    #[test]
    fn auc_examples() {
        let pos = [false, false, true, true];
        assert_eq!(binary_auc(&[0.1, 0.4, 0.35, 0.8], &pos).unwrap(), 0.75);
        assert_eq!(binary_auc(&[0.1, 0.2, 0.3, 0.4], &pos).unwrap(), 1.0);
        assert_eq!(binary_auc(&[0.5; 4], &pos).unwrap(), 0.5);
        assert!(matches!(binary_auc(&[0.1, 0.2], &[true, true]), Err(Error::Undefined(_))));
    }

    #[test]
    fn macro_auc_skips_absent_classes() {
        let logits = Tensor::new([3, 3], vec![1.0f64, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        // Class 2 never occurs; classes 0 and 1 are both perfectly ranked.
        assert_eq!(roc_auc(&logits, &[0, 1, 1], AucMode::OvrMacro).unwrap(), 1.0);
        assert!(roc_auc(&logits, &[0, 1, 2], AucMode::OvrMacro).unwrap() > 0.5);
        // A single class present leaves nothing to rank against.
        assert!(matches!(
            roc_auc(&logits, &[1, 1, 1], AucMode::OvrMacro),
            Err(Error::Undefined(_))
        ));
    }

    #[test]
    fn report_aggregates_and_csv() {
        let mut r = EvalReport::new();
        r.push(0, "psnr", 20.0, "clean", "clean");
        r.push(1, "psnr", 30.0, "clean", "clean");
        r.push(0, "psnr", 10.0, "box_blur:1:5", "box_blur:1");
        r.push_summary("auc", "clean", 0.9, 2);
        let aggs = r.aggregates();
        assert_eq!(aggs.len(), 3);
        assert_eq!(r.aggregate("psnr", "clean"), Some(25.0));
        let csv = r.to_csv();
        assert!(csv.starts_with("sample_id,metric,value,annotation\n"));
        assert!(csv.contains("1,psnr,30.000000,clean\n"));
        assert!(csv.contains("aggregate,psnr,25.000000,clean\n"));
        assert!(csv.contains("aggregate,auc,0.900000,clean\n"));
        assert!(!csv.contains('\r'));
    }
}
