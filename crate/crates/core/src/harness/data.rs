//! Dataset ingestion: IDX files, CSV rows and synthetic generators.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// In-memory classification dataset; `features` is `len × prod(sample_shape)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sample_shape: Vec<usize>,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(
        sample_shape: Vec<usize>,
        features: Vec<f64>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let per: usize = sample_shape.iter().product();
        if per == 0 || features.len() != per * labels.len() {
            return Err(Error::Data(format!(
                "{} feature values do not fill {} samples of shape {sample_shape:?}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset features".into()));
        }
        Ok(Self {
            sample_shape,
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let per = self.sample_len();
        &self.features[i * per..(i + 1) * per]
    }

    /// Gathers `indices` into a `[B, sample_shape…]` tensor and label list.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let per = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.sample_shape);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (
            Tensor::new(shape, data).expect("dataset holds finite values"),
            labels,
        )
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            features.extend_from_slice(self.sample(i));
        }
        Dataset {
            sample_shape: self.sample_shape.clone(),
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSplit {
    pub train: Dataset,
    pub test: Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        num_classes: Option<usize>,
    },
    /// Rows of `label,feature,…`; a non-numeric first row is treated as a header.
    Csv {
        train: PathBuf,
        test: PathBuf,
        num_classes: Option<usize>,
    },
    GaussianBlobs {
        classes: usize,
        dim: usize,
        train_size: usize,
        test_size: usize,
        spread: f64,
        seed: u64,
    },
    /// Binary task whose separating feature is only resolved at `k` or more
    /// activation bits.
    BitGated {
        k: u32,
        train_size: usize,
        test_size: usize,
        seed: u64,
    },
    /// 8×8 handwritten-digit-style glyphs. With `cache_dir` set the images are
    /// written as IDX files on first use and read back from there afterwards.
    Digits {
        train_size: usize,
        test_size: usize,
        noise: f64,
        seed: u64,
        cache_dir: Option<PathBuf>,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Digits {
            train_size: 1000,
            test_size: 1000,
            noise: 0.25,
            seed: 2024,
            cache_dir: None,
        }
    }
}

pub fn ingest_dataset(spec: &DatasetSpec) -> Result<DataSplit> {
    let split = match spec {
        DatasetSpec::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            num_classes,
        } => {
            let train = read_idx_pair(train_images, train_labels, *num_classes)?;
            let classes = num_classes.unwrap_or(train.num_classes);
            let test = read_idx_pair(test_images, test_labels, Some(classes))?;
            DataSplit { train, test }
        }
        DatasetSpec::Csv {
            train,
            test,
            num_classes,
        } => {
            let train = read_csv(train, *num_classes)?;
            let test = read_csv(test, Some(num_classes.unwrap_or(train.num_classes)))?;
            if train.sample_shape != test.sample_shape {
                return Err(Error::Data("train and test CSV widths differ".into()));
            }
            DataSplit { train, test }
        }
        DatasetSpec::GaussianBlobs {
            classes,
            dim,
            train_size,
            test_size,
            spread,
            seed,
        } => gaussian_blobs(*classes, *dim, *train_size, *test_size, *spread, *seed)?,
        DatasetSpec::BitGated {
            k,
            train_size,
            test_size,
            seed,
        } => bit_gated(*k, *train_size, *test_size, *seed)?,
        DatasetSpec::Digits {
            train_size,
            test_size,
            noise,
            seed,
            cache_dir,
        } => digits(*train_size, *test_size, *noise, *seed, cache_dir.as_deref())?,
    };
    if split.train.is_empty() || split.test.is_empty() {
        return Err(Error::Data("train and test sets must be non-empty".into()));
    }
    Ok(split)
}

// ---------------------------------------------------------------- IDX

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Data("truncated IDX header".into()))
}

/// Parses an unsigned-byte IDX image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Data(format!(
            "bad IDX image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let body = &bytes[16..];
    if body.len() != n * rows * cols {
        return Err(Error::Data(format!(
            "IDX image payload has {} bytes, header promises {n}x{rows}x{cols}",
            body.len()
        )));
    }
    Ok((n, rows, cols, body.to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Data(format!(
            "bad IDX label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Data(format!(
            "IDX label payload has {} bytes, header promises {n}",
            body.len()
        )));
    }
    Ok(body.to_vec())
}

pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let n = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
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

pub fn read_idx_pair(images: &Path, labels: &Path, num_classes: Option<usize>) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_idx_images(&read_file(images)?)?;
    let labels = parse_idx_labels(&read_file(labels)?)?;
    if labels.len() != n {
        return Err(Error::Data(format!(
            "{n} images but {} labels",
            labels.len()
        )));
    }
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    let classes = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    Dataset::new(
        vec![1, rows, cols],
        pixels.iter().map(|&p| p as f64 / 255.0).collect(),
        labels,
        classes,
    )
}

// ---------------------------------------------------------------- CSV

pub fn read_csv(path: &Path, num_classes: Option<usize>) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut width = None;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let Some(first) = record.get(0) else { continue };
        let label: usize = match first.parse() {
            Ok(l) => l,
            Err(_) if row_idx == 0 => continue,
            Err(_) => {
                return Err(Error::Data(format!(
                    "{}: row {} has non-integer label `{first}`",
                    path.display(),
                    row_idx + 1
                )))
            }
        };
        let row_width = record.len() - 1;
        match width {
            None => width = Some(row_width),
            Some(w) if w != row_width => {
                return Err(Error::Data(format!(
                    "{}: row {} has {row_width} features, expected {w}",
                    path.display(),
                    row_idx + 1
                )))
            }
            Some(_) => {}
        }
        for field in record.iter().skip(1) {
            features.push(field.parse::<f64>().map_err(|_| {
                Error::Data(format!(
                    "{}: row {} has non-numeric feature `{field}`",
                    path.display(),
                    row_idx + 1
                ))
            })?);
        }
        labels.push(label);
    }
    let width = width.ok_or_else(|| Error::Data(format!("{}: no rows", path.display())))?;
    let classes = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    Dataset::new(vec![width], features, labels, classes)
}

// ---------------------------------------------------------------- synthetic

fn gaussian_blobs(
    classes: usize,
    dim: usize,
    train_size: usize,
    test_size: usize,
    spread: f64,
    seed: u64,
) -> Result<DataSplit> {
    if classes < 2 || dim == 0 || !(spread > 0.0) {
        return Err(Error::Config(
            "gaussian blobs need >= 2 classes, dim >= 1 and positive spread".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| rng.gen_range(-3.0..3.0)).collect())
        .collect();
    let noise = Normal::new(0.0, spread).expect("positive spread");
    let mut make = |n: usize| -> Result<Dataset> {
        let mut features = Vec::with_capacity(n * dim);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % classes;
            features.extend(centers[c].iter().map(|&m| m + noise.sample(&mut rng)));
            labels.push(c);
        }
        Dataset::new(vec![dim], features, labels, classes)
    };
    let train = make(train_size)?;
    let test = make(test_size)?;
    Ok(DataSplit { train, test })
}

/// Level index of `v ∈ [0, 1]` on the unsigned `bits` grid (ties to even).
fn grid_level(v: f64, bits: u32) -> f64 {
    (v * ((1u64 << bits) - 1) as f64).round_ties_even()
}

/// Picks adjacent `k`-bit grid points `j/L, (j+1)/L` that collapse onto the same
/// level at every lower bitwidth, maximizing the distance to the nearest lower-bit
/// rounding boundary. Returns `(low, high, margin)`.
pub fn bit_gated_pair(k: u32) -> Result<(f64, f64, f64)> {
    if !(3..=12).contains(&k) {
        return Err(Error::Config(format!("bit-gated k = {k} outside [3, 12]")));
    }
    let steps = ((1u64 << k) - 1) as f64;
    let mut best: Option<(f64, f64, f64)> = None;
    for j in 0..(1u64 << k) - 1 {
        let (lo, hi) = (j as f64 / steps, (j + 1) as f64 / steps);
        let mut margin = f64::INFINITY;
        let mut collapses = true;
        for b in 2..k {
            if grid_level(lo, b) != grid_level(hi, b) {
                collapses = false;
                break;
            }
            let l = ((1u64 << b) - 1) as f64;
            for v in [lo, hi] {
                let frac = v * l - (v * l).floor();
                margin = margin.min((frac - 0.5).abs() / l);
            }
        }
        if collapses && best.is_none_or(|(_, _, m)| margin > m) {
            best = Some((lo, hi, margin));
        }
    }
    best.ok_or_else(|| Error::Config(format!("no collapsing pair for k = {k}")))
}

/// Features `[gate, anchor]`: the anchor is pinned at 1.0 so the per-tensor
/// activation scale is exactly `1 / (2^bits - 1)`; the gate takes the low or high
/// value of [`bit_gated_pair`] (class 0 / 1) plus jitter well inside every
/// rounding margin. Classes alternate so each contiguous pair is balanced.
fn bit_gated(k: u32, train_size: usize, test_size: usize, seed: u64) -> Result<DataSplit> {
    let (lo, hi, margin) = bit_gated_pair(k)?;
    let k_half_step = 0.5 / ((1u64 << k) - 1) as f64;
    let jitter = 0.25 * margin.min(k_half_step);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut make = |n: usize| -> Result<Dataset> {
        let mut features = Vec::with_capacity(2 * n);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % 2;
            let base = if class == 0 { lo } else { hi };
            features.push((base + rng.gen_range(-jitter..=jitter)).clamp(0.0, 1.0));
            features.push(1.0);
            labels.push(class);
        }
        Dataset::new(vec![2], features, labels, 2)
    };
    let train = make(train_size)?;
    let test = make(test_size)?;
    Ok(DataSplit { train, test })
}

/// 5×7 bitmaps, one string per row, `#` for ink.
const GLYPHS: [[&str; 7]; 10] = [
    [".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."],
    ["..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."],
    [".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"],
    ["#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."],
    ["...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."],
    ["#####", "#....", "####.", "....#", "....#", "#...#", ".###."],
    ["..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."],
    ["#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."],
    [".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."],
    [".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."],
];

pub const DIGIT_SIDE: usize = 8;

/// Renders one glyph with random placement, stroke intensity, per-stroke
/// dropout and additive noise, quantized to bytes like a scanned image.
fn render_digit(class: usize, noise: f64, rng: &mut ChaCha8Rng, gauss: &Normal<f64>) -> Vec<u8> {
    let mut img = [0.0f64; DIGIT_SIDE * DIGIT_SIDE];
    let dx = rng.gen_range(0..=DIGIT_SIDE - 5);
    let dy = rng.gen_range(0..=DIGIT_SIDE - 7);
    let ink = rng.gen_range(0.55..1.0);
    let thicken = rng.gen_bool(0.3);
    for (r, row) in GLYPHS[class].iter().enumerate() {
        for (c, ch) in row.bytes().enumerate() {
            if ch != b'#' || rng.gen_bool(0.1) {
                continue;
            }
            let (y, x) = (r + dy, c + dx);
            img[y * DIGIT_SIDE + x] = ink;
            if thicken && x + 1 < DIGIT_SIDE {
                let p = &mut img[y * DIGIT_SIDE + x + 1];
                *p = p.max(0.5 * ink);
            }
        }
    }
    img.iter()
        .map(|&v| ((v + noise * gauss.sample(rng)).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

fn digit_bytes(n: usize, noise: f64, rng: &mut ChaCha8Rng) -> (Vec<u8>, Vec<u8>) {
    let gauss = Normal::new(0.0, 1.0).expect("unit normal");
    let mut labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
    labels.shuffle(rng);
    let pixels = labels
        .iter()
        .flat_map(|&l| render_digit(l as usize, noise, rng, &gauss))
        .collect();
    (pixels, labels)
}

fn digits(
    train_size: usize,
    test_size: usize,
    noise: f64,
    seed: u64,
    cache_dir: Option<&Path>,
) -> Result<DataSplit> {
    if !(noise >= 0.0) {
        return Err(Error::Config("digit noise must be nonnegative".into()));
    }
    let generate = || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let train = digit_bytes(train_size, noise, &mut rng);
        let test = digit_bytes(test_size, noise, &mut rng);
        (train, test)
    };
    let Some(dir) = cache_dir else {
        let ((trp, trl), (tep, tel)) = generate();
        let to_ds = |p: Vec<u8>, l: Vec<u8>| {
            Dataset::new(
                vec![1, DIGIT_SIDE, DIGIT_SIDE],
                p.iter().map(|&v| v as f64 / 255.0).collect(),
                l.into_iter().map(usize::from).collect(),
                10,
            )
        };
        return Ok(DataSplit {
            train: to_ds(trp, trl)?,
            test: to_ds(tep, tel)?,
        });
    };
    let tag = format!("digits-{seed}-{train_size}-{test_size}-{noise}");
    let paths = [
        dir.join(format!("{tag}-train-images.idx3-ubyte")),
        dir.join(format!("{tag}-train-labels.idx1-ubyte")),
        dir.join(format!("{tag}-test-images.idx3-ubyte")),
        dir.join(format!("{tag}-test-labels.idx1-ubyte")),
    ];
    if !paths.iter().all(|p| p.exists()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let ((trp, trl), (tep, tel)) = generate();
        let blobs = [
            encode_idx_images(DIGIT_SIDE, DIGIT_SIDE, &trp),
            encode_idx_labels(&trl),
            encode_idx_images(DIGIT_SIDE, DIGIT_SIDE, &tep),
            encode_idx_labels(&tel),
        ];
        for (p, b) in paths.iter().zip(blobs) {
            fs::write(p, b).map_err(|e| Error::io(p, e))?;
        }
    }
    Ok(DataSplit {
        train: read_idx_pair(&paths[0], &paths[1], Some(10))?,
        test: read_idx_pair(&paths[2], &paths[3], Some(10))?,
    })
}
