//! Datasets: seeded synthetic blobs, IDX image files, and CSV tables.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Feature matrix `[m, p]` with class labels in `[0, classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    classes: usize,
    pub provenance: String,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize, provenance: impl Into<String>) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::Invalid(format!("features must be a matrix, got {:?}", features.shape())));
        }
        if features.rows() != labels.len() {
            return Err(Error::Invalid(format!("{} feature rows vs {} labels", features.rows(), labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Invalid(format!("label {bad} out of range for {classes} classes")));
        }
        if !features.all_finite() {
            return Err(Error::Invalid("non-finite feature value".into()));
        }
        Ok(Self { features, labels, classes, provenance: provenance.into() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.features.cols()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Rows `idx`, in that order.
    pub fn rows(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let p = self.width();
        let mut data = Vec::with_capacity(idx.len() * p);
        for &i in idx {
            data.extend_from_slice(&self.features.data()[i * p..(i + 1) * p]);
        }
        let x = Tensor::matrix(idx.len(), p, data).expect("row selection shape");
        (x, idx.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, idx: &[usize], tag: &str) -> Dataset {
        let (features, labels) = self.rows(idx);
        Dataset { features, labels, classes: self.classes, provenance: format!("{}[{tag}]", self.provenance) }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

/// Gaussian clusters centred on the unit circle, one per class.
///
/// A `label_noise` fraction of examples (in expectation) has its label
/// replaced by a different class drawn uniformly.
pub fn gen_blobs(seed: u64, m: usize, classes: usize, spread: f64, label_noise: f64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Invalid("blobs need at least two classes".into()));
    }
    if m < classes {
        return Err(Error::Invalid(format!("blobs need m >= classes, got m = {m}, classes = {classes}")));
    }
    if !(0.0..=1.0).contains(&label_noise) {
        return Err(Error::Invalid(format!("label noise {label_noise} outside [0, 1]")));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::Invalid(format!("spread {spread} must be finite and non-negative")));
    }
    let mut rng = rng::stream(seed, Stream::Data);
    let noise = Normal::new(0.0, spread).map_err(|e| Error::Invalid(e.to_string()))?;
    let mut data = Vec::with_capacity(2 * m);
    let mut labels = Vec::with_capacity(m);
    for i in 0..m {
        let y = i % classes;
        let angle = std::f64::consts::TAU * y as f64 / classes as f64;
        data.push(angle.cos() + noise.sample(&mut rng));
        data.push(angle.sin() + noise.sample(&mut rng));
        let label = if rng.random::<f64>() < label_noise {
            let shift = rng.random_range(1..classes);
            (y + shift) % classes
        } else {
            y
        };
        labels.push(label);
    }
    let provenance = format!("blobs(seed={seed},m={m},classes={classes},spread={spread},label_noise={label_noise})");
    Dataset::new(Tensor::matrix(m, 2, data)?, labels, classes, provenance)
}

fn read_u32_be(bytes: &[u8], at: usize, context: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(context, "truncated header"))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses an IDX image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], context: &str) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = read_u32_be(bytes, 0, context)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(context, format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let n = read_u32_be(bytes, 4, context)? as usize;
    let rows = read_u32_be(bytes, 8, context)? as usize;
    let cols = read_u32_be(bytes, 12, context)? as usize;
    let need = n * rows * cols;
    let payload = &bytes[16..];
    if payload.len() != need {
        return Err(Error::format(context, format!("payload has {} bytes, header promises {need}", payload.len())));
    }
    Ok((n, rows, cols, payload.to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8], context: &str) -> Result<Vec<u8>> {
    let magic = read_u32_be(bytes, 0, context)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(context, format!("bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let n = read_u32_be(bytes, 4, context)? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(Error::format(context, format!("payload has {} bytes, header promises {n}", payload.len())));
    }
    Ok(payload.to_vec())
}

/// Loads an IDX image/label pair; pixels are scaled to `[0, 1]` and each
/// image is flattened row-major.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img_ctx = images.display().to_string();
    let lab_ctx = labels.display().to_string();
    let (n, rows, cols, pixels) = parse_idx_images(&read_file(images)?, &img_ctx)?;
    let raw_labels = parse_idx_labels(&read_file(labels)?, &lab_ctx)?;
    if raw_labels.len() != n {
        return Err(Error::format(lab_ctx, format!("{} labels for {n} images", raw_labels.len())));
    }
    let labels: Vec<usize> = raw_labels.iter().map(|&y| y as usize).collect();
    let classes = labels.iter().max().map(|&c| c + 1).unwrap_or(1).max(10);
    let features = Tensor::matrix(n, rows * cols, pixels.iter().map(|&p| p as f64 / 255.0).collect())?;
    Dataset::new(features, labels, classes, format!("idx({img_ctx})"))
}

pub fn encode_idx_images(count: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, count as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// CSV with a header row; every column but the last is a feature and the
/// last column is an integer class label.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let ctx = path.display().to_string();
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(ctx.clone(), format!("{other:?}")),
    })?;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::format(ctx.clone(), e.to_string()))?;
        if record.len() < 2 {
            return Err(Error::format(ctx, format!("row {} needs features and a label", line + 2)));
        }
        let p = record.len() - 1;
        if *width.get_or_insert(p) != p {
            return Err(Error::format(ctx, format!("row {} has {} features, expected {p}", line + 2, p)));
        }
        for field in record.iter().take(p) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::format(ctx.clone(), format!("row {}: `{field}` is not a number", line + 2)))?;
            data.push(v);
        }
        let y: usize = record[p]
            .trim()
            .parse()
            .map_err(|_| Error::format(ctx.clone(), format!("row {}: label `{}` is not a class index", line + 2, &record[p])))?;
        labels.push(y);
    }
    let p = width.unwrap_or(0);
    let classes = labels.iter().max().map(|&c| c + 1).unwrap_or(0);
    Dataset::new(Tensor::matrix(labels.len(), p, data)?, labels, classes, format!("csv({ctx})"))
}

pub fn write_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let p = dataset.width();
    let header: Vec<String> = (0..p).map(|i| format!("x{i}")).chain(["label".to_string()]).collect();
    let mut out = header.join(",");
    out.push('\n');
    for (r, y) in dataset.labels().iter().enumerate() {
        for v in &dataset.features().data()[r * p..(r + 1) * p] {
            out.push_str(&format!("{v:?},"));
        }
        out.push_str(&format!("{y}\n"));
    }
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

fn check_fractions(fractions: [f64; 3]) -> Result<()> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Invalid(format!("split fractions {fractions:?} must be in [0, 1] and sum to 1")));
    }
    Ok(())
}

fn cut(n: usize, fractions: [f64; 3]) -> (usize, usize) {
    let a = ((fractions[0] * n as f64).round() as usize).min(n);
    let b = ((fractions[1] * n as f64).round() as usize).min(n - a);
    (a, a + b)
}

/// Seeded permutation then contiguous slicing into (train, held-out, test).
pub fn split(dataset: &Dataset, fractions: [f64; 3], seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    check_fractions(fractions)?;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng::stream(seed, Stream::Data));
    let (a, b) = cut(order.len(), fractions);
    Ok((
        dataset.subset(&order[..a], "train"),
        dataset.subset(&order[a..b], "heldout"),
        dataset.subset(&order[b..], "test"),
    ))
}

/// Like [`split`], but cuts each class separately so per-class counts
/// follow the fractions within one example.
pub fn split_stratified(dataset: &Dataset, fractions: [f64; 3], seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    check_fractions(fractions)?;
    let mut rng = rng::stream(seed, Stream::Data);
    let mut parts: [Vec<usize>; 3] = Default::default();
    for c in 0..dataset.classes() {
        let mut idx: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.labels()[i] == c).collect();
        idx.shuffle(&mut rng);
        let (a, b) = cut(idx.len(), fractions);
        parts[0].extend_from_slice(&idx[..a]);
        parts[1].extend_from_slice(&idx[a..b]);
        parts[2].extend_from_slice(&idx[b..]);
    }
    for p in &mut parts {
        p.shuffle(&mut rng);
    }
    Ok((
        dataset.subset(&parts[0], "train"),
        dataset.subset(&parts[1], "heldout"),
        dataset.subset(&parts[2], "test"),
    ))
}
