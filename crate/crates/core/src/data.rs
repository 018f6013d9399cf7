//! Dataset ingestion, image output, and report serialization.
//!
//! Covers the CIFAR-10 binary layout (bit-exact reader/writer pair), a
//! deterministic synthetic 2-D blob generator, binary P6 pixmaps for images
//! and confidence heatmaps, and the CSV conventions shared by every report
//! (fixed column order, 17 significant digits per float).

use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("truncated file: length {len} is not a multiple of {record} bytes")]
    Truncated { len: usize, record: usize },
    #[error("record {record}: label byte {value} exceeds 9")]
    LabelByte { record: usize, value: u8 },
    #[error("value {value} outside [0,1] at index {index}")]
    Range { value: f64, index: usize },
    #[error("invalid spec: {0}")]
    Spec(String),
    #[error("image shape {0:?} not writable (need [h,w], [1,h,w] or [3,h,w])")]
    ImageShape(Vec<usize>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A classifier input with its label. `pixels` is the raw input tensor in
/// [0,1]; for image data the shape is [channels, height, width].
#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub label: usize,
    pub pixels: Tensor,
}

/// A train/test split with its provenance.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
    pub classes: usize,
    pub input_shape: Vec<usize>,
    pub id: String,
}

// ── CIFAR-10 binary format ──────────────────────────────────────────
//
// One record is 3073 bytes: a label byte in 0..=9 followed by 3072 pixel
// bytes laid out as three 1024-byte channel planes (R, G, B), each row-major
// 32x32. Pixel value = byte / 255.

pub const CIFAR_RECORD_BYTES: usize = 3073;
const CIFAR_PLANE: usize = 1024;

pub fn read_cifar10_binary(path: &Path) -> Result<Vec<LabeledImage>, DataError> {
    let bytes = std::fs::read(path)?;
    parse_cifar10_records(&bytes)
}

pub fn parse_cifar10_records(bytes: &[u8]) -> Result<Vec<LabeledImage>, DataError> {
    if bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(DataError::Truncated {
            len: bytes.len(),
            record: CIFAR_RECORD_BYTES,
        });
    }
    let mut images = Vec::with_capacity(bytes.len() / CIFAR_RECORD_BYTES);
    for (record, chunk) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        let label = chunk[0];
        if label > 9 {
            return Err(DataError::LabelByte {
                record,
                value: label,
            });
        }
        let data: Vec<f64> = chunk[1..].iter().map(|&b| b as f64 / 255.0).collect();
        debug_assert_eq!(data.len(), 3 * CIFAR_PLANE);
        images.push(LabeledImage {
            label: label as usize,
            pixels: Tensor::new(vec![3, 32, 32], data).expect("bytes are finite"),
        });
    }
    Ok(images)
}

/// Byte-exact inverse of [`read_cifar10_binary`] for pixel values that are
/// multiples of 1/255; arbitrary values quantize with rounding half-up.
pub fn write_cifar10_binary(path: &Path, images: &[LabeledImage]) -> Result<(), DataError> {
    let mut bytes = Vec::with_capacity(images.len() * CIFAR_RECORD_BYTES);
    for (record, image) in images.iter().enumerate() {
        if image.label > 9 {
            return Err(DataError::LabelByte {
                record,
                value: image.label as u8,
            });
        }
        bytes.push(image.label as u8);
        for (index, &v) in image.pixels.data().iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return Err(DataError::Range { value: v, index });
            }
            bytes.push((v * 255.0 + 0.5).floor() as u8);
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

// ── synthetic datasets ──────────────────────────────────────────────

/// Isotropic Gaussian clusters in the unit box. Classes may own several
/// centers (multimodal classes), assigned through `center_labels`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobDatasetSpec {
    pub centers: Vec<Vec<f64>>,
    /// Class label of each center; defaults to one class per center.
    pub center_labels: Vec<usize>,
    pub std_dev: f64,
    pub samples_per_class: usize,
    pub seed: u64,
}

impl BlobDatasetSpec {
    fn one_center_per_class(centers: Vec<Vec<f64>>, std_dev: f64, per_class: usize, seed: u64) -> Self {
        let center_labels = (0..centers.len()).collect();
        BlobDatasetSpec {
            centers,
            center_labels,
            std_dev,
            samples_per_class: per_class,
            seed,
        }
    }

    /// Default experiment layout: four classes at the corners of the unit
    /// square's inner quarter grid.
    pub fn four_corner_classes(seed: u64) -> Self {
        Self::one_center_per_class(
            vec![
                vec![0.25, 0.25],
                vec![0.75, 0.25],
                vec![0.25, 0.75],
                vec![0.75, 0.75],
            ],
            0.06,
            250,
            seed,
        )
    }

    /// Two well-separated classes (center distance ~ 10 sigma).
    pub fn two_separated_classes(seed: u64) -> Self {
        Self::one_center_per_class(vec![vec![0.25, 0.5], vec![0.75, 0.5]], 0.05, 200, seed)
    }

    /// Five classes on a horizontal line; straight paths between samples of
    /// non-adjacent classes must cross intermediate class territory.
    pub fn collinear_classes(seed: u64) -> Self {
        Self::one_center_per_class(
            (0..5).map(|i| vec![0.1 + 0.2 * i as f64, 0.5]).collect(),
            0.045,
            200,
            seed,
        )
    }

    /// Four classes with random centers in a 32-dimensional unit box. High
    /// input dimension gives the traversal a wide orthogonal complement to
    /// move through, the regime where iteration-count and step-size trends
    /// are observable.
    pub fn high_dimensional_classes(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0xb10b));
        let dim = 32;
        let centers = (0..4)
            .map(|_| (0..dim).map(|_| rng.random_range(0.1..0.9)).collect())
            .collect();
        Self::one_center_per_class(centers, 0.1, 150, seed)
    }

    /// Three classes, each split over three interleaved islands on a line.
    /// Any straight path between distinct islands of one class crosses the
    /// territory of another, which makes disconnected high-confidence
    /// endpoints observable even in two dimensions.
    pub fn interleaved_multimodal(seed: u64) -> Self {
        BlobDatasetSpec {
            centers: (0..9).map(|i| vec![0.1 + 0.1 * i as f64, 0.5]).collect(),
            center_labels: (0..9).map(|i| i % 3).collect(),
            std_dev: 0.025,
            samples_per_class: 150,
            seed,
        }
    }

    /// Three classes, each split over three islands scattered in general
    /// position over the unit square. Straight paths between islands cross
    /// foreign territory while leaving the traversal room to curve around
    /// obstacles.
    pub fn scattered_multimodal(seed: u64) -> Self {
        BlobDatasetSpec {
            centers: vec![
                vec![0.20, 0.20],
                vec![0.80, 0.50],
                vec![0.35, 0.85],
                vec![0.50, 0.15],
                vec![0.20, 0.60],
                vec![0.75, 0.80],
                vec![0.80, 0.20],
                vec![0.50, 0.50],
                vec![0.15, 0.35],
            ],
            center_labels: vec![0, 0, 0, 1, 1, 1, 2, 2, 2],
            std_dev: 0.04,
            samples_per_class: 150,
            seed,
        }
    }

    pub fn classes(&self) -> usize {
        self.center_labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.centers.len() < 2 {
            return Err(DataError::Spec("need at least two centers".into()));
        }
        if self.center_labels.len() != self.centers.len() {
            return Err(DataError::Spec(
                "center_labels must parallel centers".into(),
            ));
        }
        let classes = self.classes();
        if classes < 2 {
            return Err(DataError::Spec("need at least two classes".into()));
        }
        for class in 0..classes {
            if !self.center_labels.contains(&class) {
                return Err(DataError::Spec(format!("class {class} has no center")));
            }
        }
        let dim = self.centers[0].len();
        if dim == 0 || self.centers.iter().any(|c| c.len() != dim) {
            return Err(DataError::Spec("centers must share a positive dimension".into()));
        }
        for i in 0..self.centers.len() {
            for j in (i + 1)..self.centers.len() {
                if self.centers[i] == self.centers[j] {
                    return Err(DataError::Spec(format!(
                        "centers {i} and {j} coincide"
                    )));
                }
            }
        }
        if !(self.std_dev > 0.0) {
            return Err(DataError::Spec("std_dev must be positive".into()));
        }
        if self.samples_per_class == 0 {
            return Err(DataError::Spec("samples_per_class must be positive".into()));
        }
        Ok(())
    }
}

fn gaussian_pair(rng: &mut ChaCha8Rng) -> (f64, f64) {
    // Box-Muller; u1 strictly positive to keep the log finite
    let u1: f64 = loop {
        let u = rng.random::<f64>();
        if u > f64::MIN_POSITIVE {
            break u;
        }
    };
    let u2: f64 = rng.random();
    let r = (-2.0 * u1.ln()).sqrt();
    let theta = 2.0 * std::f64::consts::PI * u2;
    (r * theta.cos(), r * theta.sin())
}

/// Deterministic Gaussian clusters clamped to the unit box, split 80/20 by
/// index within each class. Multimodal classes cycle their samples over
/// their centers.
pub fn generate_blobs(spec: &BlobDatasetSpec) -> Result<Dataset, DataError> {
    spec.validate()?;
    let dim = spec.centers[0].len();
    let classes = spec.classes();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    let train_per_class = (spec.samples_per_class * 4) / 5;
    for label in 0..classes {
        let class_centers: Vec<&Vec<f64>> = spec
            .centers
            .iter()
            .zip(&spec.center_labels)
            .filter(|(_, &l)| l == label)
            .map(|(c, _)| c)
            .collect();
        for i in 0..spec.samples_per_class {
            let center = class_centers[i % class_centers.len()];
            let mut values = Vec::with_capacity(dim);
            while values.len() < dim {
                let (a, b) = gaussian_pair(&mut rng);
                values.push(a);
                if values.len() < dim {
                    values.push(b);
                }
            }
            let data: Vec<f64> = values
                .iter()
                .zip(center)
                .map(|(&n, &c)| (c + spec.std_dev * n).clamp(0.0, 1.0))
                .collect();
            let sample = LabeledImage {
                label,
                pixels: Tensor::new(vec![dim], data).expect("finite sample"),
            };
            if i < train_per_class {
                train.push(sample);
            } else {
                test.push(sample);
            }
        }
    }
    Ok(Dataset {
        train,
        test,
        classes,
        input_shape: vec![dim],
        id: format!("blobs-k{classes}-s{}", spec.seed),
    })
}

/// Procedurally generated 32x32x3 images in the CIFAR-10 class/shape mold:
/// each class is a distinct oriented wave pattern with a class color tint
/// plus per-image noise. Pixel values are byte-quantized so the dataset
/// round-trips exactly through the CIFAR binary format.
pub fn synthetic_cifar(per_class: usize, seed: u64) -> Vec<LabeledImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(10 * per_class);
    for label in 0..10usize {
        let fx = 1.0 + (label % 5) as f64;
        let fy = 1.0 + (label / 5) as f64 * 2.0;
        let tint = [
            0.5 + 0.35 * ((label as f64 * 2.399) % 1.0 - 0.5),
            0.5 + 0.35 * ((label as f64 * 1.618) % 1.0 - 0.5),
            0.5 + 0.35 * ((label as f64 * 0.901) % 1.0 - 0.5),
        ];
        for _ in 0..per_class {
            let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let mut data = Vec::with_capacity(3 * CIFAR_PLANE);
            let mut noise = Vec::with_capacity(CIFAR_PLANE);
            for _ in 0..CIFAR_PLANE {
                noise.push(rng.random_range(-1.0..1.0));
            }
            for (ch, &t) in tint.iter().enumerate() {
                for y in 0..32 {
                    for x in 0..32 {
                        let angle = std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) / 32.0
                            + phase
                            + ch as f64 * 0.7;
                        let v = t + 0.3 * angle.sin() + 0.08 * noise[y * 32 + x];
                        let byte = (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor().min(255.0);
                        data.push(byte / 255.0);
                    }
                }
            }
            images.push(LabeledImage {
                label,
                pixels: Tensor::new(vec![3, 32, 32], data).expect("finite pixels"),
            });
        }
    }
    // deterministic shuffle so classes interleave
    let mut order: Vec<usize> = (0..images.len()).collect();
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order.into_iter().map(|i| images[i].clone()).collect()
}

// ── P6 pixmap output ────────────────────────────────────────────────

/// Writes pixels in [0,1] as a binary P6 pixmap (maxval 255, rounding
/// half-up). Accepts [h,w], [1,h,w] (grayscale, replicated) or [3,h,w].
pub fn write_image(path: &Path, pixels: &Tensor) -> Result<(), DataError> {
    let (channels, h, w) = match pixels.shape() {
        [h, w] => (1, *h, *w),
        [1, h, w] => (1, *h, *w),
        [3, h, w] => (3, *h, *w),
        other => return Err(DataError::ImageShape(other.to_vec())),
    };
    for (index, &v) in pixels.data().iter().enumerate() {
        if !(0.0..=1.0).contains(&v) {
            return Err(DataError::Range { value: v, index });
        }
    }
    let quant = |v: f64| (v * 255.0 + 0.5).floor() as u8;
    let mut out = Vec::with_capacity(3 * h * w + 32);
    out.extend_from_slice(format!("P6\n{w} {h}\n255\n").as_bytes());
    let d = pixels.data();
    for y in 0..h {
        for x in 0..w {
            if channels == 1 {
                let b = quant(d[y * w + x]);
                out.extend_from_slice(&[b, b, b]);
            } else {
                for c in 0..3 {
                    out.push(quant(d[(c * h + y) * w + x]));
                }
            }
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Parses a P6 pixmap produced by [`write_image`] back into a [3,h,w] tensor.
pub fn read_image(path: &Path) -> Result<Tensor, DataError> {
    let bytes = std::fs::read(path)?;
    let header_err = || DataError::Spec("not a P6 pixmap".into());
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| header_err())?);
    }
    if fields.len() != 4 || fields[0] != "P6" || fields[3] != "255" {
        return Err(header_err());
    }
    let w: usize = fields[1].parse().map_err(|_| header_err())?;
    let h: usize = fields[2].parse().map_err(|_| header_err())?;
    pos += 1; // single whitespace after maxval
    let body = &bytes[pos..];
    if body.len() != 3 * h * w {
        return Err(DataError::Truncated {
            len: body.len(),
            record: 3 * h * w,
        });
    }
    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[(c * h + y) * w + x] = body[(y * w + x) * 3 + c] as f64 / 255.0;
            }
        }
    }
    Ok(Tensor::new(vec![3, h, w], data).expect("bytes are finite"))
}

// ── confidence heatmaps ─────────────────────────────────────────────

/// Rectangular grid of optional confidence values; `None` marks unsampled
/// cells (rendered in the sentinel color).
#[derive(Debug, Clone)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub cells: Vec<Option<f64>>,
}

impl Heatmap {
    pub fn new(height: usize, width: usize) -> Self {
        Heatmap {
            height,
            width,
            cells: vec![None; height * width],
        }
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.cells[row * self.width + col] = Some(value);
    }
}

/// Fixed five-anchor colormap from dark violet (0.0) to bright yellow (1.0).
const COLORMAP: [(f64, [u8; 3]); 5] = [
    (0.00, [68, 1, 84]),
    (0.25, [59, 82, 139]),
    (0.50, [33, 145, 140]),
    (0.75, [94, 201, 98]),
    (1.00, [253, 231, 37]),
];

/// Sentinel color for unsampled heatmap cells.
const SENTINEL: [u8; 3] = [255, 255, 255];

pub fn colormap(value: f64) -> [u8; 3] {
    let v = value.clamp(0.0, 1.0);
    for pair in COLORMAP.windows(2) {
        let (lo, lo_c) = pair[0];
        let (hi, hi_c) = pair[1];
        if v <= hi {
            let t = (v - lo) / (hi - lo);
            let mut rgb = [0u8; 3];
            for (i, c) in rgb.iter_mut().enumerate() {
                let mixed = lo_c[i] as f64 + t * (hi_c[i] as f64 - lo_c[i] as f64);
                *c = (mixed + 0.5).floor() as u8;
            }
            return rgb;
        }
    }
    COLORMAP[4].1
}

/// Renders a heatmap as a P6 pixmap with `cell_px` x `cell_px` blocks per
/// cell. Confidence 0 maps to dark, 1 to bright.
pub fn write_heatmap(path: &Path, map: &Heatmap, cell_px: usize) -> Result<(), DataError> {
    if cell_px == 0 {
        return Err(DataError::Spec("cell_px must be positive".into()));
    }
    for (index, cell) in map.cells.iter().enumerate() {
        if let Some(v) = cell {
            if !(0.0..=1.0).contains(v) {
                return Err(DataError::Range { value: *v, index });
            }
        }
    }
    let (h, w) = (map.height * cell_px, map.width * cell_px);
    let mut out = Vec::with_capacity(3 * h * w + 32);
    out.extend_from_slice(format!("P6\n{w} {h}\n255\n").as_bytes());
    for y in 0..h {
        for x in 0..w {
            let cell = map.cells[(y / cell_px) * map.width + (x / cell_px)];
            let rgb = match cell {
                Some(v) => colormap(v),
                None => SENTINEL,
            };
            out.extend_from_slice(&rgb);
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

// ── CSV conventions ─────────────────────────────────────────────────

/// Formats a float with 17 significant digits, enough to round-trip f64.
pub fn csv_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes a CSV with a fixed header and pre-rendered rows.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), DataError> {
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "{}", header.join(","))?;
    for row in rows {
        writeln!(file, "{}", row.join(","))?;
    }
    Ok(())
}
