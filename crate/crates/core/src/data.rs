//! Datasets, augmentation and the dual loader.
//!
//! The dual loader serves two independently shuffled streams over the same
//! dataset: an augmented one for the classification loss and a raw one for
//! the generative (energy) loss. Rows of the raw stream are byte-for-byte
//! copies of stored samples.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};
use crate::seeds;

/// Closed interval every sample (and every SGLD iterate) is kept inside.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClampRange {
    pub lo: f64,
    pub hi: f64,
}

impl ClampRange {
    pub const UNIT: ClampRange = ClampRange { lo: -1.0, hi: 1.0 };

    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        let c = ClampRange { lo, hi };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lo < self.hi) || !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(Error::invalid(format!("invalid clamp range [{}, {}]", self.lo, self.hi)));
        }
        Ok(())
    }

    /// Bounds rounded into `T`.
    pub fn bounds<T: Real>(&self) -> (T, T) {
        (T::lit(self.lo), T::lit(self.hi))
    }

    pub fn contains_all<T: Real>(&self, values: &[T]) -> bool {
        let (lo, hi) = self.bounds::<T>();
        values.iter().all(|&v| v >= lo && v <= hi)
    }

    /// `[min, max]` widened by 10% of the span on each side.
    fn padded(min: f64, max: f64) -> Self {
        let span = (max - min).max(1e-6);
        ClampRange {
            lo: min - 0.1 * span,
            hi: max + 0.1 * span,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DataKind {
    Toy2d,
    Image { channels: usize, height: usize, width: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub kind: DataKind,
    pub classes: usize,
    pub clamp: ClampRange,
}

/// Labeled samples in data units, every value inside `meta.clamp`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    /// `[n, sample...]`
    pub samples: Tensor<T>,
    pub labels: Vec<usize>,
    pub split: Split,
    pub meta: DatasetMeta,
}

impl<T: Real> Dataset<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.rows() != self.labels.len() {
            return Err(Error::invalid(format!(
                "{} samples but {} labels",
                self.samples.rows(),
                self.labels.len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= self.meta.classes) {
            return Err(Error::invalid(format!("label {} out of range for {} classes", bad, self.meta.classes)));
        }
        if !self.meta.clamp.contains_all(self.samples.data()) {
            return Err(Error::invalid("sample values outside the clamp range"));
        }
        Ok(())
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Dataset {
            samples: self.samples.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            split: self.split,
            meta: self.meta.clone(),
        }
    }

    /// The first `n` rows (or all of them).
    pub fn head(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn sample_shape(&self) -> &[usize] {
        self.samples.row_shape()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ToyKind {
    Rings,
    Gaussians8,
    Moons,
}

impl FromStr for ToyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rings" => Ok(ToyKind::Rings),
            "gaussians8" => Ok(ToyKind::Gaussians8),
            "moons" => Ok(ToyKind::Moons),
            other => Err(Error::invalid(format!("unknown toy dataset `{}`", other))),
        }
    }
}

impl fmt::Display for ToyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ToyKind::Rings => "rings",
            ToyKind::Gaussians8 => "gaussians8",
            ToyKind::Moons => "moons",
        })
    }
}

/// Toy geometry is defined in unit coordinates (gaussians8 on the unit
/// circle, rings of radius ½ and 1, the usual two moons) and then scaled by
/// this factor, together with the noise. Noise 0.1 therefore gives modes of
/// unit variance, the scale an SGLD step size of 1 is suited to.
pub const TOY_SCALE: f64 = 10.0;

pub const GAUSSIANS8_RADIUS: f64 = TOY_SCALE;

/// Centers of the eight-Gaussian mixture, evenly spaced on a circle.
pub fn gaussians8_centers() -> Vec<[f64; 2]> {
    (0..8)
        .map(|k| {
            let a = std::f64::consts::PI * 2.0 * k as f64 / 8.0;
            [GAUSSIANS8_RADIUS * a.cos(), GAUSSIANS8_RADIUS * a.sin()]
        })
        .collect()
}

/// Distance between neighbouring gaussians8 centers.
pub fn gaussians8_spacing() -> f64 {
    2.0 * GAUSSIANS8_RADIUS * (std::f64::consts::PI / 8.0).sin()
}

impl ToyKind {
    pub fn classes(self) -> usize {
        2
    }

    /// Nominal bounding box (±4 noise std), padded by 10%. Shared by every
    /// draw with the same noise, so train and test sets agree.
    pub fn clamp(self, noise: f64) -> ClampRange {
        let m = 4.0 * noise;
        let (lo, hi) = match self {
            ToyKind::Gaussians8 | ToyKind::Rings => (-1.0 - m, 1.0 + m),
            ToyKind::Moons => (-1.0 - m, 2.0 + m),
        };
        ClampRange::padded(lo * TOY_SCALE, hi * TOY_SCALE)
    }
}

/// Labeled 2D toy dataset, deterministic per seed.
///
/// `gaussians8` places point `i` on center `i mod 8` and labels centers
/// alternately, so classes are balanced to within one sample. Rare points
/// beyond the nominal box are clipped into the clamp range.
pub fn synth_toy<T: Real>(kind: ToyKind, n: usize, noise: f64, seed: u64) -> Result<Dataset<T>> {
    if n < kind.classes() {
        return Err(Error::invalid(format!("need at least {} samples", kind.classes())));
    }
    if !(noise >= 0.0) {
        return Err(Error::invalid("noise must be non-negative"));
    }
    let mut rng = seeds::rng(seed);
    let clamp = kind.clamp(noise);
    let centers = gaussians8_centers();
    let mut points: Vec<([f64; 2], usize)> = Vec::with_capacity(n);
    for i in 0..n {
        let (base, label) = match kind {
            ToyKind::Gaussians8 => (centers[i % 8], i % 2),
            ToyKind::Rings => {
                let r = if i % 2 == 0 { 0.5 * TOY_SCALE } else { TOY_SCALE };
                let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                ([r * a.cos(), r * a.sin()], i % 2)
            }
            ToyKind::Moons => {
                let t: f64 = rng.random_range(0.0..std::f64::consts::PI);
                let s = TOY_SCALE;
                if i % 2 == 0 {
                    ([s * t.cos(), s * t.sin()], 0)
                } else {
                    ([s * (1.0 - t.cos()), s * (0.5 - t.sin())], 1)
                }
            }
        };
        let mut p = base;
        if noise > 0.0 {
            for v in &mut p {
                let z: f64 = rng.sample(StandardNormal);
                *v = (*v + TOY_SCALE * noise * z).clamp(clamp.lo, clamp.hi);
            }
        }
        points.push((p, label));
    }
    points.shuffle(&mut rng);
    let flat: Vec<f64> = points.iter().flat_map(|(p, _)| *p).collect();
    Ok(Dataset {
        samples: Tensor::from_f64(&[n, 2], &flat)?,
        labels: points.iter().map(|(_, y)| *y).collect(),
        split: Split::Train,
        meta: DatasetMeta {
            name: kind.to_string(),
            kind: DataKind::Toy2d,
            classes: kind.classes(),
            clamp,
        },
    })
}

pub const SHAPE_CLASSES: usize = 4;

/// Synthetic grayscale images in `[-1, 1]`: a filled square, a plus sign, a
/// horizontal bar and a vertical bar, each jittered by up to one pixel and
/// given mild intensity noise.
pub fn synth_shapes<T: Real>(n: usize, size: usize, seed: u64) -> Result<Dataset<T>> {
    if size < 8 || size % 4 != 0 {
        return Err(Error::invalid("image size must be a multiple of 4, at least 8"));
    }
    if n < SHAPE_CLASSES {
        return Err(Error::invalid(format!("need at least {} samples", SHAPE_CLASSES)));
    }
    let mut rng = seeds::rng(seed);
    let mut data = Vec::with_capacity(n * size * size);
    let mut labels = Vec::with_capacity(n);
    let (q, h) = (size / 4, size / 2);
    for i in 0..n {
        let class = i % SHAPE_CLASSES;
        let dy = rng.random_range(-1i64..=1) as isize;
        let dx = rng.random_range(-1i64..=1) as isize;
        let fg: f64 = rng.random_range(0.6..1.0);
        for y in 0..size {
            for x in 0..size {
                let yy = y as isize - dy;
                let xx = x as isize - dx;
                let inside = |lo: usize, hi: usize, v: isize| v >= lo as isize && v < hi as isize;
                let on = match class {
                    0 => inside(q, size - q, yy) && inside(q, size - q, xx),
                    1 => (inside(h - 1, h + 1, yy) && inside(2, size - 2, xx)) || (inside(h - 1, h + 1, xx) && inside(2, size - 2, yy)),
                    2 => inside(h - 2, h + 2, yy) && inside(2, size - 2, xx),
                    _ => inside(h - 2, h + 2, xx) && inside(2, size - 2, yy),
                };
                let z: f64 = rng.sample(StandardNormal);
                let v = if on { fg } else { -1.0 } + 0.05 * z;
                data.push(T::lit(v.clamp(-1.0, 1.0)));
            }
        }
        labels.push(class);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let samples = Tensor::new(vec![n, 1, size, size], data)?;
    Ok(Dataset {
        samples: samples.select_rows(&order),
        labels: order.iter().map(|&i| labels[i]).collect(),
        split: Split::Train,
        meta: DatasetMeta {
            name: "shapes".into(),
            kind: DataKind::Image {
                channels: 1,
                height: size,
                width: size,
            },
            classes: SHAPE_CLASSES,
            clamp: ClampRange::UNIT,
        },
    })
}

/// Reads a `x1,x2,label` CSV. The clamp range is the data bounding box
/// widened by 10%. With `classes`, labels at or above it are rejected;
/// otherwise the class count is `max label + 1`.
pub fn load_csv2d<T: Real>(path: &Path, classes: Option<usize>) -> Result<Dataset<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::format("csv2d", "empty file"))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols != ["x1", "x2", "label"] {
        return Err(Error::format("csv2d", format!("header must be `x1,x2,label`, got `{}`", header)));
    }
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let parts: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = || Error::format("csv2d", format!("line {}: `{}`", lineno + 2, line));
        if parts.len() != 3 {
            return Err(bad());
        }
        let x1: f64 = parts[0].parse().map_err(|_| bad())?;
        let x2: f64 = parts[1].parse().map_err(|_| bad())?;
        let y: usize = parts[2].parse().map_err(|_| bad())?;
        if !x1.is_finite() || !x2.is_finite() {
            return Err(bad());
        }
        values.extend([x1, x2]);
        labels.push(y);
    }
    if labels.is_empty() {
        return Err(Error::format("csv2d", "no rows"));
    }
    let max_label = *labels.iter().max().unwrap();
    let classes = match classes {
        Some(c) if max_label >= c => {
            return Err(Error::invalid(format!("label {} out of range for {} classes", max_label, c)))
        }
        Some(c) => c,
        None => (max_label + 1).max(2),
    };
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("csv").to_string();
    let ds = Dataset {
        samples: Tensor::from_f64(&[labels.len(), 2], &values)?,
        labels,
        split: Split::Train,
        meta: DatasetMeta {
            name,
            kind: DataKind::Toy2d,
            classes,
            clamp: ClampRange::padded(min, max),
        },
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes `x1,x2,label` rows using shortest round-trip float formatting.
pub fn write_csv2d<T: Real>(path: &Path, ds: &Dataset<T>) -> Result<()> {
    if ds.samples.row_shape() != [2] {
        return Err(Error::invalid("csv2d holds two-dimensional samples only"));
    }
    let mut out = String::from("x1,x2,label\n");
    for i in 0..ds.len() {
        let r = ds.samples.row(i);
        out.push_str(&format!("{},{},{}\n", r[0], r[1], ds.labels[i]));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

const IDX_UBYTE: u8 = 0x08;

fn read_idx_header(bytes: &[u8], what: &'static str) -> Result<(Vec<usize>, usize)> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 || bytes[2] != IDX_UBYTE {
        return Err(Error::format(what, "bad IDX magic number"));
    }
    let rank = bytes[3] as usize;
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::format(what, "truncated header"));
    }
    let dims = (0..rank)
        .map(|k| u32::from_be_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().unwrap()) as usize)
        .collect();
    Ok((dims, header))
}

/// Reads an IDX image/label pair. Pixels map affinely from `[0, 255]` to `[-1, 1]`.
pub fn load_idx<T: Real>(images: &Path, labels: &Path, classes: Option<usize>) -> Result<Dataset<T>> {
    let ib = fs::read(images).map_err(|e| Error::io(images, e))?;
    let lb = fs::read(labels).map_err(|e| Error::io(labels, e))?;
    let (idims, ioff) = read_idx_header(&ib, "idx images")?;
    let (ldims, loff) = read_idx_header(&lb, "idx labels")?;
    let (n, c, h, w) = match idims.as_slice() {
        [n, h, w] => (*n, 1, *h, *w),
        [n, c, h, w] => (*n, *c, *h, *w),
        _ => return Err(Error::format("idx images", "expected 3 or 4 dimensions")),
    };
    if ldims.len() != 1 {
        return Err(Error::format("idx labels", "expected 1 dimension"));
    }
    if ldims[0] != n {
        return Err(Error::format(
            "idx",
            format!("{} images but {} labels", n, ldims[0]),
        ));
    }
    let per = c * h * w;
    if ib.len() != ioff + n * per {
        return Err(Error::format("idx images", "truncated payload"));
    }
    if lb.len() != loff + n {
        return Err(Error::format("idx labels", "truncated payload"));
    }
    let data: Vec<T> = ib[ioff..].iter().map(|&p| T::lit(p as f64 / 127.5 - 1.0)).collect();
    let labels: Vec<usize> = lb[loff..].iter().map(|&y| y as usize).collect();
    let max_label = labels.iter().copied().max().unwrap_or(0);
    let classes = match classes {
        Some(k) if max_label >= k => {
            return Err(Error::invalid(format!("label {} out of range for {} classes", max_label, k)))
        }
        Some(k) => k,
        None => (max_label + 1).max(2),
    };
    let name = images.file_stem().and_then(|s| s.to_str()).unwrap_or("idx").to_string();
    let ds = Dataset {
        samples: Tensor::new(vec![n, c, h, w], data)?,
        labels,
        split: Split::Train,
        meta: DatasetMeta {
            name,
            kind: DataKind::Image { channels: c, height: h, width: w },
            classes,
            clamp: ClampRange::UNIT,
        },
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes an image dataset as an IDX pair (values rounded to 8-bit pixels).
pub fn write_idx<T: Real>(images: &Path, labels: &Path, ds: &Dataset<T>) -> Result<()> {
    let shape = ds.samples.shape();
    if shape.len() != 4 {
        return Err(Error::invalid("IDX export needs [n, c, h, w] images"));
    }
    let mut ib = vec![0, 0, IDX_UBYTE, if shape[1] == 1 { 3 } else { 4 }];
    let dims: Vec<usize> = if shape[1] == 1 {
        vec![shape[0], shape[2], shape[3]]
    } else {
        shape.to_vec()
    };
    for d in dims {
        ib.extend_from_slice(&(d as u32).to_be_bytes());
    }
    ib.extend(ds.samples.data().iter().map(|v| ((v.as_f64() + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8));
    let mut lb = vec![0, 0, IDX_UBYTE, 1];
    lb.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    for &y in &ds.labels {
        if y > 255 {
            return Err(Error::invalid("IDX labels must fit in one byte"));
        }
        lb.push(y as u8);
    }
    fs::write(images, ib).map_err(|e| Error::io(images, e))?;
    fs::write(labels, lb).map_err(|e| Error::io(labels, e))
}

/// Where a dataset comes from, in CLI notation.
///
/// * `toy:<rings|gaussians8|moons>[:n=..][:noise=..][:seed=..]`
/// * `img:shapes[:n=..][:size=..][:seed=..]`
/// * `idx:<images>:<labels>`
/// * `csv:<path>`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DataSource {
    Toy { kind: ToyKind, n: usize, noise: f64, seed: u64 },
    Shapes { n: usize, size: usize, seed: u64 },
    Idx { images: PathBuf, labels: PathBuf },
    Csv { path: PathBuf },
}

fn parse_opts(parts: &[&str]) -> Result<Vec<(String, String)>> {
    parts
        .iter()
        .map(|p| {
            p.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::Config(format!("expected key=value in data spec, got `{}`", p)))
        })
        .collect()
}

fn opt<V: FromStr>(opts: &[(String, String)], key: &str, default: V) -> Result<V> {
    match opts.iter().find(|(k, _)| k == key) {
        Some((_, v)) => v
            .parse()
            .map_err(|_| Error::Config(format!("bad value `{}` for data option `{}`", v, key))),
        None => Ok(default),
    }
}

fn check_keys(opts: &[(String, String)], allowed: &[&str]) -> Result<()> {
    for (k, _) in opts {
        if !allowed.contains(&k.as_str()) {
            return Err(Error::Config(format!("unknown data option `{}`", k)));
        }
    }
    Ok(())
}

impl FromStr for DataSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["toy", name, rest @ ..] => {
                let opts = parse_opts(rest)?;
                check_keys(&opts, &["n", "noise", "seed"])?;
                Ok(DataSource::Toy {
                    kind: name.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
                    n: opt(&opts, "n", 4096)?,
                    noise: opt(&opts, "noise", 0.1)?,
                    seed: opt(&opts, "seed", 7)?,
                })
            }
            ["img", "shapes", rest @ ..] => {
                let opts = parse_opts(rest)?;
                check_keys(&opts, &["n", "size", "seed"])?;
                Ok(DataSource::Shapes {
                    n: opt(&opts, "n", 1024)?,
                    size: opt(&opts, "size", 16)?,
                    seed: opt(&opts, "seed", 7)?,
                })
            }
            ["idx", images, labels] => Ok(DataSource::Idx {
                images: PathBuf::from(images),
                labels: PathBuf::from(labels),
            }),
            ["csv", path] => Ok(DataSource::Csv { path: PathBuf::from(path) }),
            _ => Err(Error::Config(format!("unrecognized data spec `{}`", s))),
        }
    }
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataSource::Toy { kind, n, noise, seed } => write!(f, "toy:{kind}:n={n}:noise={noise}:seed={seed}"),
            DataSource::Shapes { n, size, seed } => write!(f, "img:shapes:n={n}:size={size}:seed={seed}"),
            DataSource::Idx { images, labels } => write!(f, "idx:{}:{}", images.display(), labels.display()),
            DataSource::Csv { path } => write!(f, "csv:{}", path.display()),
        }
    }
}

impl DataSource {
    pub fn load<T: Real>(&self) -> Result<Dataset<T>> {
        match self {
            DataSource::Toy { kind, n, noise, seed } => synth_toy(*kind, *n, *noise, *seed),
            DataSource::Shapes { n, size, seed } => synth_shapes(*n, *size, *seed),
            DataSource::Idx { images, labels } => load_idx(images, labels, None),
            DataSource::Csv { path } => load_csv2d(path, None),
        }
    }

    /// Held-out counterpart for generated sources: a quarter as many samples
    /// from a different seed. File sources have no implicit test split.
    pub fn default_test(&self) -> Option<DataSource> {
        match self {
            DataSource::Toy { kind, n, noise, seed } => Some(DataSource::Toy {
                kind: *kind,
                n: (n / 4).max(kind.classes()),
                noise: *noise,
                seed: seed.wrapping_add(1),
            }),
            DataSource::Shapes { n, size, seed } => Some(DataSource::Shapes {
                n: (n / 4).max(SHAPE_CLASSES),
                size: *size,
                seed: seed.wrapping_add(1),
            }),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum AugOp {
    /// Mirror the width axis with probability `prob`.
    HorizontalFlip { prob: f64 },
    /// Pad every border by `pad` pixels of `fill`, then crop a random window of the original size.
    PadCrop { pad: usize, fill: f64 },
}

/// Ordered image augmentations; non-image inputs pass through unchanged.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPipeline {
    pub ops: Vec<AugOp>,
}

impl AugmentationPipeline {
    pub fn identity() -> Self {
        Self::default()
    }

    /// Flip with probability 0.5, then pad-crop with fill at the clamp lower bound.
    pub fn flip_and_crop(pad: usize, fill: f64) -> Self {
        AugmentationPipeline {
            ops: vec![AugOp::HorizontalFlip { prob: 0.5 }, AugOp::PadCrop { pad, fill }],
        }
    }

    pub fn is_identity(&self) -> bool {
        self.ops.is_empty()
    }
}

/// Applies `pipeline` to every image of a `[n, c, h, w]` batch independently.
pub fn augment<T: Real, R: Rng + ?Sized>(x: &Tensor<T>, pipeline: &AugmentationPipeline, rng: &mut R) -> Result<Tensor<T>> {
    if pipeline.is_identity() || x.rank() != 4 {
        return Ok(x.clone());
    }
    let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    for op in &pipeline.ops {
        if let AugOp::PadCrop { pad, .. } = op {
            if *pad >= h.min(w) {
                return Err(Error::invalid(format!("pad width {} must be below image size {}x{}", pad, h, w)));
            }
        }
    }
    let mut out = x.clone();
    let mut scratch = vec![T::zero(); c * h * w];
    for i in 0..x.rows() {
        let img = out.row_mut(i);
        for op in &pipeline.ops {
            match *op {
                AugOp::HorizontalFlip { prob } => {
                    if rng.random::<f64>() < prob {
                        for row in img.chunks_mut(w) {
                            row.reverse();
                        }
                    }
                }
                AugOp::PadCrop { pad, fill } => {
                    let oy = rng.random_range(0..=2 * pad);
                    let ox = rng.random_range(0..=2 * pad);
                    let fill = T::lit(fill);
                    for ch in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                // source coordinates in the unpadded image
                                let sy = (y + oy) as isize - pad as isize;
                                let sx = (xx + ox) as isize - pad as isize;
                                let inside = sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize;
                                scratch[(ch * h + y) * w + xx] = if inside {
                                    img[(ch * h + sy as usize) * w + sx as usize]
                                } else {
                                    fill
                                };
                            }
                        }
                    }
                    img.copy_from_slice(&scratch);
                }
            }
        }
    }
    Ok(out)
}

/// Paired mini-batches for one training step.
#[derive(Clone, Debug)]
pub struct DualBatch<T> {
    /// Augmented inputs for the classification loss.
    pub clf_x: Tensor<T>,
    pub clf_y: Vec<usize>,
    /// Raw dataset rows for the generative loss.
    pub gen_x: Tensor<T>,
    /// Dataset indices of the `gen_x` rows.
    pub gen_idx: Vec<usize>,
}

/// Two independently shuffled epoch streams over one dataset.
pub struct DualLoader {
    batch: usize,
    len: usize,
    clf_order: Vec<usize>,
    gen_order: Vec<usize>,
    cursor: usize,
    fresh_epoch: bool,
    rng_clf: ChaCha8Rng,
    rng_gen: ChaCha8Rng,
    /// Also augment the generative branch (ablation only; breaks gen-branch purity).
    pub augment_gen: bool,
}

impl DualLoader {
    pub fn new(len: usize, batch: usize, clf_seed: u64, gen_seed: u64) -> Result<Self> {
        if batch == 0 || batch > len {
            return Err(Error::invalid(format!("batch size {} must lie in [1, {}]", batch, len)));
        }
        Ok(DualLoader {
            batch,
            len,
            clf_order: (0..len).collect(),
            gen_order: (0..len).collect(),
            cursor: 0,
            fresh_epoch: true,
            rng_clf: seeds::rng(clf_seed),
            rng_gen: seeds::rng(gen_seed),
            augment_gen: false,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.len.div_ceil(self.batch)
    }

    /// The next batch pair, or `None` at the end of an epoch. The call after
    /// `None` reshuffles both streams and starts a new epoch. The last batch
    /// of an epoch may be short.
    pub fn next<T: Real>(&mut self, dataset: &Dataset<T>, pipeline: &AugmentationPipeline) -> Result<Option<DualBatch<T>>> {
        if dataset.len() != self.len {
            return Err(Error::invalid("dataset length changed under the loader"));
        }
        if self.fresh_epoch {
            self.clf_order.shuffle(&mut self.rng_clf);
            self.gen_order.shuffle(&mut self.rng_gen);
            self.cursor = 0;
            self.fresh_epoch = false;
        }
        if self.cursor >= self.len {
            self.fresh_epoch = true;
            return Ok(None);
        }
        let end = (self.cursor + self.batch).min(self.len);
        let clf_idx = &self.clf_order[self.cursor..end];
        let gen_idx = self.gen_order[self.cursor..end].to_vec();
        self.cursor = end;

        let raw_clf = dataset.samples.select_rows(clf_idx);
        let clf_x = augment(&raw_clf, pipeline, &mut self.rng_clf)?;
        let clf_y = clf_idx.iter().map(|&i| dataset.labels[i]).collect();
        let mut gen_x = dataset.samples.select_rows(&gen_idx);
        if self.augment_gen {
            gen_x = augment(&gen_x, pipeline, &mut self.rng_gen)?;
        }
        Ok(Some(DualBatch {
            clf_x,
            clf_y,
            gen_x,
            gen_idx,
        }))
    }
}
