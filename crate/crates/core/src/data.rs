//! Data sources: 2-D toy distributions, standard-normal noise and CIFAR-10
//! binary batches.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::rng::{rng_from_seed, LabRng};
use crate::{Batch, Error, NoiseBatch, Result};

/// Anything that can produce `n`-row batches of a fixed dimension.
pub trait DataSource: Sync {
    fn dim(&self) -> usize;
    fn draw(&self, n: usize, rng: &mut LabRng) -> Result<Batch>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ToyKind {
    Gauss8,
    Checkerboard,
    SwissRoll,
    TwoMoons,
}

impl ToyKind {
    pub fn name(self) -> &'static str {
        match self {
            ToyKind::Gauss8 => "gauss8",
            ToyKind::Checkerboard => "checkerboard",
            ToyKind::SwissRoll => "swissroll",
            ToyKind::TwoMoons => "twomoons",
        }
    }
}

impl fmt::Display for ToyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ToyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match key.as_str() {
            "gauss8" | "8gaussians" | "eightgaussians" => Ok(ToyKind::Gauss8),
            "checkerboard" => Ok(ToyKind::Checkerboard),
            "swissroll" => Ok(ToyKind::SwissRoll),
            "twomoons" | "moons" => Ok(ToyKind::TwoMoons),
            _ => Err(Error::arg(format!("unknown toy dataset {s:?}"))),
        }
    }
}

/// A named 2-D distribution.
///
/// `scale` sets the size of the support (ring radius for `Gauss8`, half-width
/// for `Checkerboard`, outer radius for `SwissRoll`, a plain multiplier for
/// `TwoMoons`); `spread` is the standard deviation of the Gaussian jitter
/// added to each point (unused by `Checkerboard`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyDataset {
    pub kind: ToyKind,
    pub scale: f64,
    pub spread: f64,
}

impl ToyDataset {
    pub fn new(kind: ToyKind) -> Self {
        let (scale, spread) = match kind {
            ToyKind::Gauss8 => (2.0, 0.1),
            ToyKind::Checkerboard => (2.0, 0.0),
            ToyKind::SwissRoll => (2.0, 0.05),
            ToyKind::TwoMoons => (1.0, 0.05),
        };
        Self {
            kind,
            scale,
            spread,
        }
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn with_spread(mut self, spread: f64) -> Self {
        self.spread = spread;
        self
    }

    /// Centres of the eight modes of `Gauss8`.
    pub fn gauss8_centers(scale: f64) -> [[f64; 2]; 8] {
        std::array::from_fn(|k| {
            let a = k as f64 * std::f64::consts::FRAC_PI_4;
            [scale * a.cos(), scale * a.sin()]
        })
    }

    fn point(&self, rng: &mut LabRng) -> [f64; 2] {
        use std::f64::consts::PI;
        let spread = self.spread;
        let jitter = |rng: &mut LabRng| -> f64 { spread * rng.sample::<f64, _>(StandardNormal) };
        match self.kind {
            ToyKind::Gauss8 => {
                let k = rng.gen_range(0..8);
                let c = Self::gauss8_centers(self.scale)[k];
                [c[0] + jitter(rng), c[1] + jitter(rng)]
            }
            ToyKind::Checkerboard => {
                let x1: f64 = rng.gen_range(-2.0..2.0);
                let lift = if rng.gen::<bool>() { 0.0 } else { -2.0 };
                let x2 = rng.gen::<f64>() + lift + x1.floor().rem_euclid(2.0);
                let s = self.scale / 2.0;
                [x1 * s, x2 * s]
            }
            ToyKind::SwissRoll => {
                let t = 1.5 * PI * (1.0 + 2.0 * rng.gen::<f64>());
                let s = self.scale / (4.5 * PI);
                [t * t.cos() * s + jitter(rng), t * t.sin() * s + jitter(rng)]
            }
            ToyKind::TwoMoons => {
                let theta = PI * rng.gen::<f64>();
                let (x, y) = if rng.gen::<bool>() {
                    (theta.cos(), theta.sin())
                } else {
                    (1.0 - theta.cos(), 0.5 - theta.sin())
                };
                [
                    (x - 0.5) * self.scale + jitter(rng),
                    (y - 0.25) * self.scale + jitter(rng),
                ]
            }
        }
    }

    pub fn sample_with(&self, n: usize, rng: &mut LabRng) -> Result<Batch> {
        if n == 0 {
            return Err(Error::arg("sample count must be at least 1"));
        }
        let mut flat = Vec::with_capacity(2 * n);
        for _ in 0..n {
            flat.extend(self.point(rng));
        }
        Batch::new(Array2::from_shape_vec((n, 2), flat).expect("n x 2"))
    }
}

impl DataSource for ToyDataset {
    fn dim(&self) -> usize {
        2
    }

    fn draw(&self, n: usize, rng: &mut LabRng) -> Result<Batch> {
        self.sample_with(n, rng)
    }
}

/// `n` i.i.d. draws from `ds`; a pure function of its arguments.
pub fn sample_toy(ds: &ToyDataset, n: usize, seed: u64) -> Result<Batch> {
    ds.sample_with(n, &mut rng_from_seed(seed))
}

pub fn sample_noise_with(n: usize, d: usize, rng: &mut LabRng) -> Result<NoiseBatch> {
    if n == 0 || d == 0 {
        return Err(Error::arg(format!("noise shape {n}x{d} must be non-empty")));
    }
    let points = Array2::from_shape_simple_fn((n, d), || rng.sample(StandardNormal));
    NoiseBatch::new(points)
}

/// `n × d` i.i.d. standard-normal noise.
pub fn sample_noise(n: usize, d: usize, seed: u64) -> Result<NoiseBatch> {
    sample_noise_with(n, d, &mut rng_from_seed(seed))
}

/// Standard-normal "data", the surrogate used when no image file is at hand.
#[derive(Debug, Clone, Copy)]
pub struct GaussianSource {
    pub d: usize,
}

impl DataSource for GaussianSource {
    fn dim(&self) -> usize {
        self.d
    }

    fn draw(&self, n: usize, rng: &mut LabRng) -> Result<Batch> {
        sample_noise_with(n, self.d, rng).map(Batch::from)
    }
}

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CHANNELS: usize = 3;
pub const CIFAR_PIXELS: usize = CIFAR_SIDE * CIFAR_SIDE * CIFAR_CHANNELS;
pub const CIFAR_RECORD: usize = CIFAR_PIXELS + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Normalization {
    /// `byte / 127.5 − 1`, in `[−1, 1]`.
    #[default]
    Signed,
    /// `byte / 255`, in `[0, 1]`.
    Unit,
}

impl Normalization {
    pub fn name(self) -> &'static str {
        match self {
            Normalization::Signed => "signed",
            Normalization::Unit => "unit",
        }
    }

    fn apply(self, byte: u8) -> f64 {
        match self {
            Normalization::Signed => f64::from(byte) / 127.5 - 1.0,
            Normalization::Unit => f64::from(byte) / 255.0,
        }
    }
}

/// CIFAR-10 images, flattened channels-last (`(y, x, c)` row-major).
///
/// The file stores each image channel-planar; rows here are reordered so
/// that every distance computation sees one fixed layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDataset {
    bytes: Vec<u8>,
    labels: Vec<u8>,
}

fn planar_to_hwc(planar: &[u8], out: &mut Vec<u8>) {
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    for p in 0..plane {
        for c in 0..CIFAR_CHANNELS {
            out.push(planar[c * plane + p]);
        }
    }
}

impl ImageDataset {
    pub fn parse(raw: &[u8]) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::Format {
                offset: 0,
                message: "empty file".into(),
            });
        }
        if raw.len() % CIFAR_RECORD != 0 {
            let offset = raw.len() - raw.len() % CIFAR_RECORD;
            return Err(Error::Format {
                offset,
                message: format!(
                    "truncated record: {} trailing bytes, records are {CIFAR_RECORD} bytes",
                    raw.len() % CIFAR_RECORD
                ),
            });
        }
        let n = raw.len() / CIFAR_RECORD;
        let mut bytes = Vec::with_capacity(n * CIFAR_PIXELS);
        let mut labels = Vec::with_capacity(n);
        for (k, record) in raw.chunks_exact(CIFAR_RECORD).enumerate() {
            let label = record[0];
            if label > 9 {
                return Err(Error::Format {
                    offset: k * CIFAR_RECORD,
                    message: format!("label {label} outside 0..=9"),
                });
            }
            labels.push(label);
            planar_to_hwc(&record[1..], &mut bytes);
        }
        Ok(Self { bytes, labels })
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Pixel matrix (`n × 3072`) in `[−1, 1]`.
    pub fn pixels(&self) -> Array2<f64> {
        self.pixels_with(Normalization::Signed)
    }

    pub fn pixels_with(&self, norm: Normalization) -> Array2<f64> {
        Array2::from_shape_vec(
            (self.n(), CIFAR_PIXELS),
            self.bytes.iter().map(|&b| norm.apply(b)).collect(),
        )
        .expect("n x 3072")
    }

    /// Rows `rows` as a batch.
    pub fn select(&self, rows: &[usize], norm: Normalization) -> Result<Batch> {
        let mut flat = Vec::with_capacity(rows.len() * CIFAR_PIXELS);
        for &r in rows {
            if r >= self.n() {
                return Err(Error::arg(format!("image index {r} out of range")));
            }
            flat.extend(
                self.bytes[r * CIFAR_PIXELS..(r + 1) * CIFAR_PIXELS]
                    .iter()
                    .map(|&b| norm.apply(b)),
            );
        }
        Batch::new(
            Array2::from_shape_vec((rows.len(), CIFAR_PIXELS), flat)
                .map_err(|e| Error::dim(e.to_string()))?,
        )
    }

    /// Serializes back to the on-disk binary layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let plane = CIFAR_SIDE * CIFAR_SIDE;
        let mut out = Vec::with_capacity(self.n() * CIFAR_RECORD);
        for (k, &label) in self.labels.iter().enumerate() {
            out.push(label);
            let hwc = &self.bytes[k * CIFAR_PIXELS..(k + 1) * CIFAR_PIXELS];
            for c in 0..CIFAR_CHANNELS {
                out.extend((0..plane).map(|p| hwc[p * CIFAR_CHANNELS + c]));
            }
        }
        out
    }
}

pub fn load_cifar10_binary(path: impl AsRef<Path>) -> Result<ImageDataset> {
    let path = path.as_ref();
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    ImageDataset::parse(&raw)
}

/// Random image subsets (without replacement) at a fixed normalization.
#[derive(Debug, Clone)]
pub struct ImageSource<'a> {
    pub images: &'a ImageDataset,
    pub normalization: Normalization,
}

impl DataSource for ImageSource<'_> {
    fn dim(&self) -> usize {
        CIFAR_PIXELS
    }

    fn draw(&self, n: usize, rng: &mut LabRng) -> Result<Batch> {
        if n > self.images.n() {
            return Err(Error::arg(format!(
                "batch of {n} requested from {} images",
                self.images.n()
            )));
        }
        let rows = sample_indices(rng, self.images.n(), n).into_vec();
        self.images.select(&rows, self.normalization)
    }
}
