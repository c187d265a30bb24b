//! Dataset loading, preprocessing, augmentation and synthetic data.
//!
//! Real data comes in as IDX containers (MNIST family) or CIFAR binary
//! batches. For tests and self-contained runs there are two generators: a
//! linearly separable blob task and a procedural 28x28 glyph task (digit
//! strokes or garment silhouettes) that is written out as genuine IDX files
//! so runs exercise the same loading path as real data.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use std::io::{Read, Write};
use std::path::Path;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq)]
pub enum Normalization {
    Raw,
    Scale01,
    MeanStd { mean: Vec<f64>, std: Vec<f64> },
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train_images: Tensor,
    pub train_labels: Vec<usize>,
    pub test_images: Tensor,
    pub test_labels: Vec<usize>,
    pub n_classes: usize,
    pub norm: Normalization,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        let (nt, ..) = self.train_images.dims4();
        let (ne, ..) = self.test_images.dims4();
        if nt != self.train_labels.len() || ne != self.test_labels.len() {
            return Err(Error::Dataset("image/label count mismatch".into()));
        }
        if self.train_images.shape()[1..] != self.test_images.shape()[1..] {
            return Err(Error::Dataset("train/test image shapes differ".into()));
        }
        if let Some(&bad) =
            self.train_labels.iter().chain(&self.test_labels).find(|&&l| l >= self.n_classes)
        {
            return Err(Error::LabelOutOfRange { label: bad, n_classes: self.n_classes });
        }
        Ok(())
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.train_images.shape();
        (s[1], s[2], s[3])
    }

    /// Keeps the first `train_n`/`test_n` examples.
    pub fn truncate(&mut self, train_n: usize, test_n: usize) {
        let trunc = |images: &Tensor, labels: &mut Vec<usize>, n: usize| -> Tensor {
            let (total, h, w, c) = images.dims4();
            let keep = n.min(total);
            labels.truncate(keep);
            Tensor::from_vec(&[keep, h, w, c], images.data()[..keep * h * w * c].to_vec()).unwrap()
        };
        self.train_images = trunc(&self.train_images, &mut self.train_labels, train_n);
        self.test_images = trunc(&self.test_images, &mut self.test_labels, test_n);
    }
}

// ---------------------------------------------------------------------------
// IDX container

struct IdxReader<R> {
    inner: R,
    offset: usize,
    path: String,
}

impl<R: Read> IdxReader<R> {
    fn read_exact(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(|_| Error::Parse {
            path: self.path.clone(),
            detail: format!("truncated at byte offset {}", self.offset),
        })?;
        self.offset += buf.len();
        Ok(())
    }

    fn read_u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b)?;
        Ok(u32::from_be_bytes(b))
    }
}

/// Reads an IDX image file: raw pixel values 0..255 as f64, shape [n,h,w,1].
pub fn load_idx_images(path: &Path) -> Result<Tensor> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = IdxReader {
        inner: std::io::BufReader::new(file),
        offset: 0,
        path: path.display().to_string(),
    };
    let magic = r.read_u32()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Parse {
            path: r.path,
            detail: format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let n = r.read_u32()? as usize;
    let h = r.read_u32()? as usize;
    let w = r.read_u32()? as usize;
    let mut bytes = vec![0u8; n * h * w];
    r.read_exact(&mut bytes)?;
    let data: Vec<f64> = bytes.iter().map(|&b| f64::from(b)).collect();
    Tensor::from_vec(&[n, h, w, 1], data)
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = IdxReader {
        inner: std::io::BufReader::new(file),
        offset: 0,
        path: path.display().to_string(),
    };
    let magic = r.read_u32()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Parse {
            path: r.path,
            detail: format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let n = r.read_u32()? as usize;
    let mut bytes = vec![0u8; n];
    r.read_exact(&mut bytes)?;
    Ok(bytes.into_iter().map(usize::from).collect())
}

pub fn write_idx_images(path: &Path, images: &[u8], n: usize, h: usize, w: usize) -> Result<()> {
    assert_eq!(images.len(), n * h * w);
    let io_err = |e| Error::io(path.display().to_string(), e);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    f.write_all(&IDX_IMAGES_MAGIC.to_be_bytes()).map_err(io_err)?;
    for v in [n as u32, h as u32, w as u32] {
        f.write_all(&v.to_be_bytes()).map_err(io_err)?;
    }
    f.write_all(images).map_err(io_err)?;
    f.flush().map_err(io_err)
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let io_err = |e| Error::io(path.display().to_string(), e);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    f.write_all(&IDX_LABELS_MAGIC.to_be_bytes()).map_err(io_err)?;
    f.write_all(&(labels.len() as u32).to_be_bytes()).map_err(io_err)?;
    f.write_all(labels).map_err(io_err)?;
    f.flush().map_err(io_err)
}

/// Loads an MNIST-layout directory: train-images-idx3-ubyte,
/// train-labels-idx1-ubyte, t10k-images-idx3-ubyte, t10k-labels-idx1-ubyte.
pub fn load_idx_dir(dir: &Path) -> Result<Dataset> {
    let train_images = load_idx_images(&dir.join("train-images-idx3-ubyte"))?;
    let train_labels = load_idx_labels(&dir.join("train-labels-idx1-ubyte"))?;
    let test_images = load_idx_images(&dir.join("t10k-images-idx3-ubyte"))?;
    let test_labels = load_idx_labels(&dir.join("t10k-labels-idx1-ubyte"))?;
    if train_images.shape()[0] != train_labels.len() || test_images.shape()[0] != test_labels.len()
    {
        return Err(Error::Dataset(format!(
            "count mismatch in {}: {} images vs {} labels (train), {} vs {} (test)",
            dir.display(),
            train_images.shape()[0],
            train_labels.len(),
            test_images.shape()[0],
            test_labels.len()
        )));
    }
    let n_classes = train_labels.iter().chain(&test_labels).max().map_or(0, |m| m + 1);
    let ds = Dataset {
        train_images,
        train_labels,
        test_images,
        test_labels,
        n_classes,
        norm: Normalization::Raw,
    };
    ds.validate()?;
    Ok(ds)
}

// ---------------------------------------------------------------------------
// CIFAR binary batches

/// One CIFAR binary batch: records of 1 label byte + 3072 planar RGB bytes.
/// Returns raw 0..255 pixels in NHWC.
pub fn load_cifar_batch(path: &Path) -> Result<(Tensor, Vec<usize>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    const REC: usize = 1 + 3072;
    if bytes.is_empty() || bytes.len() % REC != 0 {
        return Err(Error::Parse {
            path: path.display().to_string(),
            detail: format!("file size {} is not a multiple of {REC}", bytes.len()),
        });
    }
    let n = bytes.len() / REC;
    let mut labels = Vec::with_capacity(n);
    let mut data = vec![0.0f64; n * 32 * 32 * 3];
    for (ex, rec) in bytes.chunks_exact(REC).enumerate() {
        labels.push(usize::from(rec[0]));
        let pixels = &rec[1..];
        for ch in 0..3 {
            for s in 0..1024 {
                data[ex * 3072 + s * 3 + ch] = f64::from(pixels[ch * 1024 + s]);
            }
        }
    }
    Ok((Tensor::from_vec(&[n, 32, 32, 3], data)?, labels))
}

// ---------------------------------------------------------------------------
// Preprocessing

/// Divides raw 0..255 pixels by 255.
pub fn scale01(mut ds: Dataset) -> Result<Dataset> {
    for t in [&ds.train_images, &ds.test_images] {
        if let Some(&bad) = t.data().iter().find(|&&v| !(0.0..=255.0).contains(&v)) {
            return Err(Error::Dataset(format!("pixel {bad} outside [0, 255]")));
        }
    }
    for t in [&mut ds.train_images, &mut ds.test_images] {
        for v in t.data_mut() {
            *v /= 255.0;
        }
    }
    ds.norm = Normalization::Scale01;
    Ok(ds)
}

/// Per-channel standardization; constants come from the training split only
/// and are applied to both splits.
pub fn normalize_meanstd(mut ds: Dataset) -> Result<Dataset> {
    let (_, _, _, c) = ds.train_images.dims4();
    let m = ds.train_images.len() / c;
    let mut mean = vec![0.0; c];
    for (i, &v) in ds.train_images.data().iter().enumerate() {
        mean[i % c] += v;
    }
    for v in &mut mean {
        *v /= m as f64;
    }
    let mut var = vec![0.0; c];
    for (i, &v) in ds.train_images.data().iter().enumerate() {
        let d = v - mean[i % c];
        var[i % c] += d * d;
    }
    let mut std = vec![0.0; c];
    for (ch, v) in var.iter().enumerate() {
        let s = (v / m as f64).sqrt();
        if s == 0.0 {
            return Err(Error::Dataset(format!("channel {ch} has zero standard deviation")));
        }
        std[ch] = s;
    }
    for t in [&mut ds.train_images, &mut ds.test_images] {
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v = (*v - mean[i % c]) / std[i % c];
        }
    }
    ds.norm = Normalization::MeanStd { mean, std };
    Ok(ds)
}

// ---------------------------------------------------------------------------
// Augmentation

/// Shift bounds: 10% of each spatial dim, rounded to the nearest pixel.
pub fn shift_bound(extent: usize) -> i64 {
    (0.1 * extent as f64).round() as i64
}

/// One image shifted by (dx, dy) with zero padding, optionally mirrored
/// horizontally first.
pub fn shift_flip_one(
    img: &[f64],
    h: usize,
    w: usize,
    c: usize,
    dy: i64,
    dx: i64,
    flip: bool,
) -> Vec<f64> {
    let mut out = vec![0.0; h * w * c];
    for i in 0..h as i64 {
        let si = i - dy;
        if si < 0 || si >= h as i64 {
            continue;
        }
        for j in 0..w as i64 {
            let sj0 = j - dx;
            if sj0 < 0 || sj0 >= w as i64 {
                continue;
            }
            let sj = if flip { w as i64 - 1 - sj0 } else { sj0 };
            let src = ((si * w as i64 + sj) * c as i64) as usize;
            let dst = ((i * w as i64 + j) * c as i64) as usize;
            out[dst..dst + c].copy_from_slice(&img[src..src + c]);
        }
    }
    out
}

/// Independent per-image shifts uniform in +-10% of each spatial dim and a
/// fair-coin horizontal flip. Labels are the caller's business and never
/// change.
pub fn augment<R: Rng>(batch: &Tensor, rng: &mut R) -> Tensor {
    let (n, h, w, c) = batch.dims4();
    let (bh, bw) = (shift_bound(h), shift_bound(w));
    let per = h * w * c;
    let mut out = vec![0.0; batch.len()];
    for ex in 0..n {
        let flip = rng.gen_bool(0.5);
        let dy = rng.gen_range(-bh..=bh);
        let dx = rng.gen_range(-bw..=bw);
        let img = &batch.data()[ex * per..(ex + 1) * per];
        out[ex * per..(ex + 1) * per].copy_from_slice(&shift_flip_one(img, h, w, c, dy, dx, flip));
    }
    Tensor::from_vec(batch.shape(), out).unwrap()
}

// ---------------------------------------------------------------------------
// Synthetic data: separable blobs

/// Linearly separable by construction: class k lights up cell k of a grid
/// laid over the image, plus mild noise. Balanced labels, fixed-seed
/// reproducible. Test split is one fifth of the train size per class.
pub fn synthetic_blobs<R: Rng>(
    n_classes: usize,
    n_per_class: usize,
    size: usize,
    rng: &mut R,
) -> Dataset {
    assert!(n_classes >= 2 && size >= 8);
    let grid = (n_classes as f64).sqrt().ceil() as usize;
    let cell = size / grid;
    let n_test_per_class = (n_per_class / 5).max(1);
    let gen_split = |rng: &mut R, per_class: usize| -> (Tensor, Vec<usize>) {
        let n = per_class * n_classes;
        let mut data = vec![0.0; n * size * size];
        let mut labels = Vec::with_capacity(n);
        for ex in 0..n {
            let class = ex % n_classes;
            labels.push(class);
            let (gi, gj) = (class / grid, class % grid);
            let img = &mut data[ex * size * size..(ex + 1) * size * size];
            for v in img.iter_mut() {
                *v = rng.gen_range(0.0..0.15);
            }
            for i in gi * cell..(gi * cell + cell).min(size) {
                for j in gj * cell..(gj * cell + cell).min(size) {
                    img[i * size + j] = rng.gen_range(0.7..1.0);
                }
            }
        }
        (Tensor::from_vec(&[n, size, size, 1], data).unwrap(), labels)
    };
    let (train_images, train_labels) = gen_split(rng, n_per_class);
    let (test_images, test_labels) = gen_split(rng, n_test_per_class);
    Dataset { train_images, train_labels, test_images, test_labels, n_classes, norm: Normalization::Raw }
}

// ---------------------------------------------------------------------------
// Synthetic data: procedural 28x28 glyphs

/// Glyph family for the generated IDX datasets.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum GlyphStyle {
    /// Digit-like stroke drawings, one glyph per class.
    Digits,
    /// Garment-like filled silhouettes with stripe texture.
    Shapes,
}

const GLYPH_SIZE: usize = 28;

fn digit_strokes(class: usize) -> Vec<Vec<(f64, f64)>> {
    match class {
        0 => vec![vec![
            (0.30, 0.15), (0.70, 0.15), (0.85, 0.40), (0.85, 0.70), (0.70, 0.90),
            (0.30, 0.90), (0.15, 0.70), (0.15, 0.40), (0.30, 0.15),
        ]],
        1 => vec![vec![(0.35, 0.30), (0.55, 0.12), (0.55, 0.90)]],
        2 => vec![vec![
            (0.20, 0.30), (0.35, 0.12), (0.65, 0.12), (0.80, 0.30), (0.75, 0.45),
            (0.20, 0.90), (0.85, 0.90),
        ]],
        3 => vec![vec![
            (0.20, 0.15), (0.70, 0.15), (0.80, 0.30), (0.55, 0.48), (0.80, 0.65),
            (0.70, 0.88), (0.20, 0.88),
        ]],
        4 => vec![vec![(0.65, 0.90), (0.65, 0.12), (0.20, 0.60), (0.85, 0.60)]],
        5 => vec![vec![
            (0.80, 0.12), (0.25, 0.12), (0.20, 0.45), (0.65, 0.45), (0.80, 0.62),
            (0.70, 0.88), (0.20, 0.88),
        ]],
        6 => vec![vec![
            (0.70, 0.12), (0.35, 0.30), (0.20, 0.60), (0.35, 0.88), (0.65, 0.88),
            (0.80, 0.65), (0.60, 0.50), (0.25, 0.55),
        ]],
        7 => vec![vec![(0.15, 0.12), (0.85, 0.12), (0.45, 0.90)]],
        8 => vec![
            vec![(0.50, 0.12), (0.75, 0.25), (0.50, 0.48), (0.25, 0.30), (0.50, 0.12)],
            vec![(0.50, 0.48), (0.80, 0.68), (0.50, 0.90), (0.20, 0.70), (0.50, 0.48)],
        ],
        9 => vec![vec![
            (0.75, 0.40), (0.50, 0.50), (0.30, 0.35), (0.45, 0.12), (0.70, 0.15),
            (0.75, 0.40), (0.70, 0.90),
        ]],
        _ => panic!("glyph class out of range"),
    }
}

fn shape_polygon(class: usize) -> Vec<(f64, f64)> {
    match class {
        0 => vec![
            (0.10, 0.25), (0.35, 0.15), (0.65, 0.15), (0.90, 0.25), (0.80, 0.45),
            (0.70, 0.40), (0.70, 0.90), (0.30, 0.90), (0.30, 0.40), (0.20, 0.45),
        ],
        1 => vec![
            (0.30, 0.10), (0.70, 0.10), (0.75, 0.90), (0.55, 0.90), (0.50, 0.45),
            (0.45, 0.90), (0.25, 0.90),
        ],
        2 => vec![(0.05, 0.30), (0.30, 0.12), (0.70, 0.12), (0.95, 0.30), (0.85, 0.90), (0.15, 0.90)],
        3 => vec![(0.40, 0.10), (0.60, 0.10), (0.55, 0.35), (0.80, 0.90), (0.20, 0.90), (0.45, 0.35)],
        4 => vec![
            (0.20, 0.12), (0.80, 0.12), (0.85, 0.90), (0.60, 0.90), (0.60, 0.50),
            (0.40, 0.50), (0.40, 0.90), (0.15, 0.90),
        ],
        5 => vec![(0.10, 0.70), (0.90, 0.55), (0.90, 0.70), (0.10, 0.85)],
        6 => vec![
            (0.15, 0.20), (0.40, 0.10), (0.50, 0.30), (0.60, 0.10), (0.85, 0.20),
            (0.75, 0.55), (0.75, 0.90), (0.25, 0.90), (0.25, 0.55),
        ],
        7 => vec![(0.10, 0.60), (0.50, 0.50), (0.90, 0.65), (0.90, 0.80), (0.10, 0.80)],
        8 => vec![(0.15, 0.40), (0.85, 0.40), (0.90, 0.90), (0.10, 0.90)],
        9 => vec![(0.30, 0.10), (0.55, 0.10), (0.55, 0.55), (0.90, 0.65), (0.90, 0.85), (0.30, 0.85)],
        _ => panic!("shape class out of range"),
    }
}

struct Jitter {
    angle: f64,
    scale: f64,
    dx: f64,
    dy: f64,
}

impl Jitter {
    fn draw<R: Rng>(rng: &mut R) -> Self {
        Jitter {
            angle: rng.gen_range(-0.20..0.20),
            scale: rng.gen_range(0.78..1.12),
            dx: rng.gen_range(-2.0..2.0),
            dy: rng.gen_range(-2.0..2.0),
        }
    }

    fn apply(&self, p: (f64, f64)) -> (f64, f64) {
        let (x, y) = (p.0 - 0.5, p.1 - 0.5);
        let (s, c) = self.angle.sin_cos();
        let xr = self.scale * (c * x - s * y);
        let yr = self.scale * (s * x + c * y);
        (
            (xr + 0.5) * GLYPH_SIZE as f64 + self.dx,
            (yr + 0.5) * GLYPH_SIZE as f64 + self.dy,
        )
    }
}

fn stamp_disk(canvas: &mut [f64], x: f64, y: f64, radius: f64, intensity: f64) {
    let r = radius.ceil() as i64;
    let (cx, cy) = (x.round() as i64, y.round() as i64);
    for i in (cy - r).max(0)..=(cy + r).min(GLYPH_SIZE as i64 - 1) {
        for j in (cx - r).max(0)..=(cx + r).min(GLYPH_SIZE as i64 - 1) {
            let d2 = (i as f64 - y).powi(2) + (j as f64 - x).powi(2);
            if d2 <= radius * radius {
                let slot = &mut canvas[(i as usize) * GLYPH_SIZE + j as usize];
                *slot = slot.max(intensity);
            }
        }
    }
}

fn draw_polyline(canvas: &mut [f64], pts: &[(f64, f64)], thickness: f64, intensity: f64) {
    for seg in pts.windows(2) {
        let (x0, y0) = seg[0];
        let (x1, y1) = seg[1];
        let len = ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt().max(1e-9);
        let steps = (len * 2.0).ceil() as usize;
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            stamp_disk(canvas, x0 + t * (x1 - x0), y0 + t * (y1 - y0), thickness, intensity);
        }
    }
}

fn fill_polygon(canvas: &mut [f64], pts: &[(f64, f64)], intensity: impl Fn(usize, usize) -> f64) {
    for i in 0..GLYPH_SIZE {
        for j in 0..GLYPH_SIZE {
            let (px, py) = (j as f64 + 0.5, i as f64 + 0.5);
            let mut inside = false;
            let n = pts.len();
            for k in 0..n {
                let (x0, y0) = pts[k];
                let (x1, y1) = pts[(k + 1) % n];
                if (y0 > py) != (y1 > py) {
                    let xin = x0 + (py - y0) / (y1 - y0) * (x1 - x0);
                    if px < xin {
                        inside = !inside;
                    }
                }
            }
            if inside {
                canvas[i * GLYPH_SIZE + j] = intensity(i, j);
            }
        }
    }
}

/// One 28x28 glyph image as raw bytes.
pub fn render_glyph<R: Rng>(style: GlyphStyle, class: usize, rng: &mut R) -> Vec<u8> {
    let mut canvas = vec![0.0f64; GLYPH_SIZE * GLYPH_SIZE];
    let jitter = Jitter::draw(rng);
    let base = rng.gen_range(150.0..255.0);
    match style {
        GlyphStyle::Digits => {
            let thickness = rng.gen_range(1.0..1.9);
            for stroke in digit_strokes(class) {
                let pts: Vec<(f64, f64)> = stroke.iter().map(|&p| jitter.apply(p)).collect();
                draw_polyline(&mut canvas, &pts, thickness, base);
            }
        }
        GlyphStyle::Shapes => {
            let pts: Vec<(f64, f64)> = shape_polygon(class).iter().map(|&p| jitter.apply(p)).collect();
            let phase = rng.gen_range(0usize..4);
            let stripe = rng.gen_range(0.55..1.0);
            fill_polygon(&mut canvas, &pts, |i, _| {
                if (i + phase) % 4 < 2 {
                    base
                } else {
                    base * stripe
                }
            });
        }
    }
    // Speckle noise and a light box blur for anti-aliased texture.
    for v in canvas.iter_mut() {
        if rng.gen_bool(0.04) {
            *v = (*v + rng.gen_range(0.0..90.0)).min(255.0);
        }
    }
    let mut blurred = vec![0.0f64; GLYPH_SIZE * GLYPH_SIZE];
    for i in 0..GLYPH_SIZE {
        for j in 0..GLYPH_SIZE {
            let mut acc = 0.0;
            let mut cnt = 0.0;
            for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    let (ii, jj) = (i as i64 + di, j as i64 + dj);
                    if ii >= 0 && ii < GLYPH_SIZE as i64 && jj >= 0 && jj < GLYPH_SIZE as i64 {
                        acc += canvas[ii as usize * GLYPH_SIZE + jj as usize];
                        cnt += 1.0;
                    }
                }
            }
            blurred[i * GLYPH_SIZE + j] = acc / cnt;
        }
    }
    blurred.iter().map(|&v| v.clamp(0.0, 255.0) as u8).collect()
}

/// Writes a balanced procedural glyph dataset as MNIST-layout IDX files.
pub fn generate_glyph_idx(
    dir: &Path,
    style: GlyphStyle,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut rng = crate::rng::rng_from(seed, "glyphs", 0);
    let mut gen = |n: usize| -> (Vec<u8>, Vec<u8>) {
        let mut images = Vec::with_capacity(n * GLYPH_SIZE * GLYPH_SIZE);
        let mut labels = Vec::with_capacity(n);
        for ex in 0..n {
            let class = ex % 10;
            labels.push(class as u8);
            images.extend(render_glyph(style, class, &mut rng));
        }
        (images, labels)
    };
    let (ti, tl) = gen(n_train);
    write_idx_images(&dir.join("train-images-idx3-ubyte"), &ti, n_train, GLYPH_SIZE, GLYPH_SIZE)?;
    write_idx_labels(&dir.join("train-labels-idx1-ubyte"), &tl)?;
    let (ei, el) = gen(n_test);
    write_idx_images(&dir.join("t10k-images-idx3-ubyte"), &ei, n_test, GLYPH_SIZE, GLYPH_SIZE)?;
    write_idx_labels(&dir.join("t10k-labels-idx1-ubyte"), &el)?;
    Ok(())
}
