//! Image batches, the ORNC dataset container and the procedural dataset
//! generator.
//!
//! ORNC layout (all integers little-endian):
//!
//! ```text
//! "ORNC" | version u32 | count u32 | channels u32 | height u32 | width u32 | num_classes u32
//! pixels: count·C·H·W u8, row-major per image
//! labels: count u8
//! ```

use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use crate::corruption::CorruptionSpec;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const ORNC_MAGIC: [u8; 4] = *b"ORNC";
pub const ORNC_VERSION: u32 = 1;
pub const ORNC_HEADER_LEN: u64 = 28;

/// `N×C×H×W` pixels in `[0, 1]` with per-image labels, ids and corruption
/// annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    /// Stable sample ids (the record index in the source file).
    pub ids: Vec<u64>,
    pub corruptions: Vec<Option<CorruptionSpec>>,
}

impl ImageBatch {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, ids: Vec<u64>) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::dim("image batch", images.shape(), &[0, 0, 0, 0]));
        }
        let n = images.shape()[0];
        if labels.len() != n || ids.len() != n {
            return Err(Error::dim("image batch labels", &[labels.len(), ids.len()], &[n, n]));
        }
        Ok(ImageBatch {
            images,
            labels,
            ids,
            corruptions: vec![None; n],
        })
    }

    /// Labels all zero, ids `0..N`.
    pub fn unlabeled(images: Tensor<f32>) -> Self {
        let n = images.shape()[0];
        Self::new(images, vec![0; n], (0..n as u64).collect()).expect("rank-4 images")
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(channels, height, width)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    fn image_len(&self) -> usize {
        let (c, h, w) = self.dims();
        c * h * w
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let l = self.image_len();
        &self.images.data()[i * l..(i + 1) * l]
    }

    /// Gathers the given rows in order.
    pub fn select(&self, indices: &[usize]) -> ImageBatch {
        let (c, h, w) = self.dims();
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        ImageBatch {
            images: Tensor::new(vec![indices.len(), c, h, w], data).expect("non-empty selection"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
            corruptions: indices.iter().map(|&i| self.corruptions[i]).collect(),
        }
    }

    pub fn slice(&self, range: Range<usize>) -> ImageBatch {
        self.select(&range.collect::<Vec<_>>())
    }

    /// Concatenates batches with equal image dimensions.
    pub fn concat(parts: &[ImageBatch]) -> Result<ImageBatch> {
        let first = parts.first().ok_or_else(|| Error::config("nothing to concatenate"))?;
        let (c, h, w) = first.dims();
        let mut out = ImageBatch {
            images: Tensor::zeros([1, 1, 1, 1]),
            labels: vec![],
            ids: vec![],
            corruptions: vec![],
        };
        let mut data = vec![];
        for p in parts {
            if p.dims() != (c, h, w) {
                return Err(Error::dim("concat", first.images.shape(), p.images.shape()));
            }
            data.extend_from_slice(p.images.data());
            out.labels.extend_from_slice(&p.labels);
            out.ids.extend_from_slice(&p.ids);
            out.corruptions.extend_from_slice(&p.corruptions);
        }
        out.images = Tensor::new(vec![out.labels.len(), c, h, w], data)?;
        Ok(out)
    }

    /// Quantizes to u8 (round half away from zero after clamping).
    pub fn to_u8(&self) -> Vec<u8> {
        self.images.data().iter().map(|&x| to_u8(x)).collect()
    }
}

pub fn to_u8(x: f32) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// ORNC header fields.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetHeader {
    pub version: u32,
    pub count: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
}

impl DatasetHeader {
    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn file_len(&self) -> u64 {
        ORNC_HEADER_LEN + (self.count * self.image_len() + self.count) as u64
    }

    fn to_bytes(self) -> Vec<u8> {
        let mut out = ORNC_MAGIC.to_vec();
        for v in [
            self.version,
            self.count as u32,
            self.channels as u32,
            self.height as u32,
            self.width as u32,
            self.num_classes as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < ORNC_HEADER_LEN as usize {
            return Err(Error::Format {
                offset: bytes.len() as u64,
                message: format!("truncated header: expected {ORNC_HEADER_LEN} bytes, found {}", bytes.len()),
            });
        }
        if bytes[..4] != ORNC_MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: format!("bad magic {:?}, expected \"ORNC\"", String::from_utf8_lossy(&bytes[..4])),
            });
        }
        let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let header = DatasetHeader {
            version: field(0),
            count: field(1) as usize,
            channels: field(2) as usize,
            height: field(3) as usize,
            width: field(4) as usize,
            num_classes: field(5) as usize,
        };
        if header.version != ORNC_VERSION {
            return Err(Error::Format {
                offset: 4,
                message: format!("unsupported version {}", header.version),
            });
        }
        if header.channels == 0 || header.height == 0 || header.width == 0 {
            return Err(Error::Format {
                offset: 12,
                message: "zero image extent".into(),
            });
        }
        Ok(header)
    }
}

/// A whole ORNC dataset held in memory as raw bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        num_classes: usize,
        pixels: Vec<u8>,
        labels: Vec<u8>,
    ) -> Result<Self> {
        let ds = Dataset {
            channels,
            height,
            width,
            num_classes,
            pixels,
            labels,
        };
        if ds.pixels.len() != ds.labels.len() * ds.image_len() {
            return Err(Error::config(format!(
                "{} pixel bytes do not hold {} images of {}",
                ds.pixels.len(),
                ds.labels.len(),
                ds.image_len()
            )));
        }
        if let Some(i) = ds.labels.iter().position(|&l| l as usize >= num_classes) {
            return Err(Error::config(format!(
                "label {} of image {i} is not below {num_classes}",
                ds.labels[i]
            )));
        }
        Ok(ds)
    }

    pub fn header(&self) -> DatasetHeader {
        DatasetHeader {
            version: ORNC_VERSION,
            count: self.len(),
            channels: self.channels,
            height: self.height,
            width: self.width,
            num_classes: self.num_classes,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.header().to_bytes();
        out.extend_from_slice(&self.pixels);
        out.extend_from_slice(&self.labels);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let h = DatasetHeader::parse(bytes)?;
        check_length(&h, bytes.len() as u64)?;
        let start = ORNC_HEADER_LEN as usize;
        let split = start + h.count * h.image_len();
        let labels = bytes[split..].to_vec();
        check_labels(&h, &labels, split as u64)?;
        Ok(Dataset {
            channels: h.channels,
            height: h.height,
            width: h.width,
            num_classes: h.num_classes,
            pixels: bytes[start..split].to_vec(),
            labels,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&self.to_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Records `range` as a new dataset.
    pub fn subset(&self, range: Range<usize>) -> Dataset {
        let l = self.image_len();
        Dataset {
            pixels: self.pixels[range.start * l..range.end * l].to_vec(),
            labels: self.labels[range.clone()].to_vec(),
            ..self.clone()
        }
    }

    /// Every record as one batch, pixels scaled by 1/255, ids equal to record indices.
    pub fn to_batch(&self) -> ImageBatch {
        decode_records(&self.pixels, &self.labels, self.channels, self.height, self.width, 0)
    }
}

fn decode_records(pixels: &[u8], labels: &[u8], c: usize, h: usize, w: usize, first_id: u64) -> ImageBatch {
    let data = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    let n = labels.len();
    ImageBatch::new(
        Tensor::new(vec![n, c, h, w], data).expect("record block matches header"),
        labels.iter().map(|&l| l as usize).collect(),
        (first_id..first_id + n as u64).collect(),
    )
    .expect("consistent record block")
}

fn check_length(h: &DatasetHeader, actual: u64) -> Result<()> {
    let expected = h.file_len();
    if actual != expected {
        return Err(Error::Format {
            offset: actual.min(expected),
            message: format!("file length mismatch: expected {expected} bytes, found {actual}"),
        });
    }
    Ok(())
}

fn check_labels(h: &DatasetHeader, labels: &[u8], offset: u64) -> Result<()> {
    if let Some(i) = labels.iter().position(|&l| l as usize >= h.num_classes) {
        return Err(Error::Format {
            offset: offset + i as u64,
            message: format!("label {} is not below num_classes {}", labels[i], h.num_classes),
        });
    }
    Ok(())
}

/// Random-access ORNC reader that keeps only the header and the label
/// block in memory; pixels are read per request.
#[derive(Debug)]
pub struct DatasetReader {
    path: PathBuf,
    file: File,
    header: DatasetHeader,
    labels: Vec<u8>,
}

impl DatasetReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let actual = file.metadata().map_err(|e| Error::io(&path, e))?.len();
        let mut head = vec![0u8; (ORNC_HEADER_LEN).min(actual) as usize];
        file.read_exact(&mut head).map_err(|e| Error::io(&path, e))?;
        let header = DatasetHeader::parse(&head)?;
        check_length(&header, actual)?;
        let label_offset = ORNC_HEADER_LEN + (header.count * header.image_len()) as u64;
        let mut labels = vec![0u8; header.count];
        file.seek(SeekFrom::Start(label_offset))
            .and_then(|_| file.read_exact(&mut labels))
            .map_err(|e| Error::io(&path, e))?;
        check_labels(&header, &labels, label_offset)?;
        Ok(DatasetReader {
            path,
            file,
            header,
            labels,
        })
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }

    pub fn len(&self) -> usize {
        self.header.count
    }

    pub fn is_empty(&self) -> bool {
        self.header.count == 0
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Reads the records at `indices`, in that order.
    pub fn read_indices(&mut self, indices: &[usize]) -> Result<ImageBatch> {
        let h = self.header;
        let l = h.image_len();
        let mut pixels = vec![0u8; indices.len() * l];
        for (slot, &i) in indices.iter().enumerate() {
            if i >= h.count {
                return Err(Error::config(format!("record {i} out of range for {} records", h.count)));
            }
            let offset = ORNC_HEADER_LEN + (i * l) as u64;
            self.file
                .seek(SeekFrom::Start(offset))
                .and_then(|_| self.file.read_exact(&mut pixels[slot * l..(slot + 1) * l]))
                .map_err(|e| Error::io(&self.path, e))?;
        }
        let labels: Vec<u8> = indices.iter().map(|&i| self.labels[i]).collect();
        let mut batch = decode_records(&pixels, &labels, h.channels, h.height, h.width, 0);
        batch.ids = indices.iter().map(|&i| i as u64).collect();
        Ok(batch)
    }

    /// Sequential batches of `batch_size`; the last one may be shorter.
    pub fn batches(&mut self, batch_size: usize) -> Batches<'_> {
        self.batches_in_order((0..self.len()).collect(), batch_size)
    }

    /// Batches over a caller-chosen record order (e.g. a seeded shuffle).
    pub fn batches_in_order(&mut self, order: Vec<usize>, batch_size: usize) -> Batches<'_> {
        Batches {
            reader: self,
            order,
            batch_size: batch_size.max(1),
            next: 0,
        }
    }
}

pub struct Batches<'a> {
    reader: &'a mut DatasetReader,
    order: Vec<usize>,
    batch_size: usize,
    next: usize,
}

impl Iterator for Batches<'_> {
    type Item = Result<ImageBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.order.len() {
            return None;
        }
        let end = (self.next + self.batch_size).min(self.order.len());
        let idx = self.order[self.next..end].to_vec();
        self.next = end;
        Some(self.reader.read_indices(&idx))
    }
}

/// Seeded Fisher–Yates permutation of `0..n`.
pub fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng::below(seed, 0, i as u64, i as u64 + 1) as usize;
        order.swap(i, j);
    }
    order
}

/// Parameters of the procedural dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
    pub seed: u64,
}

/// Shape family per class when more than two classes are requested.
const FAMILIES: [&str; 8] = [
    "disc",
    "square",
    "cross",
    "rings",
    "stripes_0",
    "stripes_45",
    "stripes_90",
    "stripes_135",
];

/// Procedural shapes on a smooth textured background; image `i` has label
/// `i mod classes`.
///
/// With two classes the set is the bright-vs-dark variant: both classes
/// draw discs and squares, class 0 on a dark background and class 1 on a
/// brighter one. With more classes each class is one shape family.
/// Foreground intensity is always about 0.9 so every image has pixels
/// above every solarize threshold.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if !(2..=8).contains(&spec.classes) {
        return Err(Error::config(format!("classes must be in 2..=8, got {}", spec.classes)));
    }
    if spec.height < 8 || spec.width < 8 || spec.channels == 0 {
        return Err(Error::config("synthetic images must be at least 8×8 with one channel"));
    }
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let mut pixels = Vec::with_capacity(spec.count * c * h * w);
    let mut labels = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let label = i % spec.classes;
        let seed = rng::derive(spec.seed, &[i as u64]);
        let u = |k: u64| rng::uniform(seed, 0, k);
        let family = if spec.classes == 2 {
            rng::below(seed, 1, 0, 2) as usize
        } else {
            label
        };
        let background = match (spec.classes, label) {
            (2, 0) => 0.08 + 0.04 * u(0),
            (2, _) => 0.38 + 0.04 * u(0),
            _ => 0.08 + 0.2 * u(0),
        };
        let size = h.min(w) as f64;
        let cy = h as f64 * (0.4 + 0.2 * u(1));
        let cx = w as f64 * (0.4 + 0.2 * u(2));
        let radius = size * (0.22 + 0.1 * u(3));
        let fg = 0.88 + 0.04 * u(4);
        // low-frequency texture
        let (fy, fx, phase) = (1.0 + 2.0 * u(5), 1.0 + 2.0 * u(6), std::f64::consts::TAU * u(7));
        let amp = 0.015 * (1.0 + u(8));
        for ch in 0..c {
            let gain = 1.0 - 0.08 * ch as f64;
            for y in 0..h {
                for x in 0..w {
                    let ty = y as f64 / h as f64;
                    let tx = x as f64 / w as f64;
                    let texture = amp * (std::f64::consts::TAU * (fy * ty + fx * tx) + phase).sin();
                    // 2×2 supersampled coverage for anti-aliased edges
                    let mut cover = 0.0;
                    for (sy, sx) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                        let dy = y as f64 + sy - cy;
                        let dx = x as f64 + sx - cx;
                        if inside(FAMILIES[family], dy, dx, radius) {
                            cover += 0.25;
                        }
                    }
                    let bg = background + texture;
                    let v = gain * (bg + cover * (fg - bg));
                    pixels.push(to_u8(v as f32));
                }
            }
        }
        labels.push(label as u8);
    }
    Dataset::new(c, h, w, spec.classes, pixels, labels)
}

fn inside(family: &str, dy: f64, dx: f64, r: f64) -> bool {
    let d = (dy * dy + dx * dx).sqrt();
    let stripes = |deg: f64| {
        let t = deg.to_radians();
        let along = dx * t.cos() + dy * t.sin();
        d < r * 1.1 && (along / 5.0).rem_euclid(1.0) < 0.5
    };
    match family {
        "disc" => d < r,
        "square" => dy.abs().max(dx.abs()) < r * 0.85,
        "cross" => (dx.abs() < r / 3.0 && dy.abs() < r) || (dy.abs() < r / 3.0 && dx.abs() < r),
        "rings" => (0.3 * r..0.55 * r).contains(&d) || (0.8 * r..r).contains(&d),
        "stripes_0" => stripes(0.0),
        "stripes_45" => stripes(45.0),
        "stripes_90" => stripes(90.0),
        "stripes_135" => stripes(135.0),
        _ => unreachable!("unknown family"),
    }
}

/// Train/val/test record ranges in an 8:1:1 ratio.
pub fn split_ranges(count: usize) -> [Range<usize>; 3] {
    let train = count * 8 / 10;
    let val = count / 10;
    [0..train, train..train + val, train + val..count]
}
