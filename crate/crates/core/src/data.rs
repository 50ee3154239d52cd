//! Synthetic datasets, the label-noise transform, and the dataset CSV format.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffnet::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset spec: {0}")]
    Spec(String),
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

/// Flattened samples with a ±1 sensitive label and a class target.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: Vec<f64>,
    dim: usize,
    s: Vec<i8>,
    target: Vec<usize>,
    split: Vec<Split>,
    n_classes: usize,
}

impl Dataset {
    pub fn new(
        x: Vec<f64>,
        dim: usize,
        s: Vec<i8>,
        target: Vec<usize>,
        split: Vec<Split>,
        n_classes: usize,
    ) -> Result<Self, DataError> {
        let n = s.len();
        if dim == 0 || x.len() != n * dim {
            return Err(DataError::Invalid(format!("{} values for {n} samples of width {dim}", x.len())));
        }
        if target.len() != n || split.len() != n {
            return Err(DataError::Invalid("label, target and split lengths differ".into()));
        }
        if s.iter().any(|&v| v != 1 && v != -1) {
            return Err(DataError::Invalid("sensitive labels must be -1 or 1".into()));
        }
        if let Some(t) = target.iter().find(|&&t| t >= n_classes) {
            return Err(DataError::Invalid(format!("target {t} outside 0..{n_classes}")));
        }
        Ok(Self { x, dim, s, target, split, n_classes })
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    pub fn s(&self) -> &[i8] {
        &self.s
    }

    pub fn target(&self) -> &[usize] {
        &self.target
    }

    pub fn split(&self) -> &[Split] {
        &self.split
    }

    /// All samples as an `n × dim` matrix.
    pub fn features(&self) -> Tensor {
        Tensor::matrix(self.len(), self.dim, self.x.clone())
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == split).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut x = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            x.extend_from_slice(self.row(i));
        }
        Dataset {
            x,
            dim: self.dim,
            s: idx.iter().map(|&i| self.s[i]).collect(),
            target: idx.iter().map(|&i| self.target[i]).collect(),
            split: idx.iter().map(|&i| self.split[i]).collect(),
            n_classes: self.n_classes,
        }
    }

    pub fn part(&self, split: Split) -> Dataset {
        self.subset(&self.indices(split))
    }

    /// Same labels and splits with new features (e.g. transformed samples).
    pub fn with_features(&self, x: Vec<f64>, dim: usize) -> Result<Dataset, DataError> {
        Dataset::new(x, dim, self.s.clone(), self.target.clone(), self.split.clone(), self.n_classes)
    }

    /// Equal counts of both sensitive labels within each split.
    pub fn is_balanced(&self) -> bool {
        [Split::Train, Split::Test].iter().all(|&sp| {
            let idx = self.indices(sp);
            let pos = idx.iter().filter(|&&i| self.s[i] == 1).count();
            2 * pos == idx.len()
        })
    }
}

/// Glyph-on-background images: the background shape is the sensitive label,
/// the glyph is the target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapesSpec {
    pub image_side: usize,
    pub n_samples: usize,
    pub glyph_classes: usize,
    pub noise_std: f64,
    /// Maximum glyph offset in pixels along each axis.
    pub jitter: usize,
    pub seed: u64,
}

impl Default for ShapesSpec {
    fn default() -> Self {
        Self { image_side: 16, n_samples: 8_000, glyph_classes: 4, noise_std: 0.05, jitter: 2, seed: 0 }
    }
}

const BACKGROUND_LEVEL: f64 = 0.4;
const GLYPH_LEVEL: f64 = 1.0;
const TRAIN_FRACTION: f64 = 0.8;

const GLYPHS: [[&str; 5]; 8] = [
    ["#...#", ".#.#.", "..#..", ".#.#.", "#...#"],
    ["..#..", "..#..", "#####", "..#..", "..#.."],
    ["#####", "..#..", "..#..", "..#..", "..#.."],
    ["#....", "#....", "#....", "#....", "#####"],
    ["#...#", "#...#", "#####", "#...#", "#...#"],
    ["#####", "...#.", "..#..", ".#...", "#####"],
    ["#...#", "#...#", ".#.#.", ".#.#.", "..#.."],
    [".###.", "#...#", "#...#", "#...#", ".###."],
];

/// Background shapes; index 0 is the circle (s = −1), 1 the square (s = +1).
fn background(side: usize, square: bool) -> Vec<f64> {
    let mut img = vec![0.0; side * side];
    let lo = 1.0;
    let hi = side as f64 - 2.0;
    let c = (side as f64 - 1.0) / 2.0;
    let r = c - 1.0;
    for y in 0..side {
        for x in 0..side {
            let (fx, fy) = (x as f64, y as f64);
            let on = if square {
                let inside = fx >= lo && fx <= hi && fy >= lo && fy <= hi;
                inside && (fx == lo || fx == hi || fy == lo || fy == hi)
            } else {
                let d = ((fx - c).powi(2) + (fy - c).powi(2)).sqrt();
                (d - r).abs() < 0.6
            };
            if on {
                img[y * side + x] = BACKGROUND_LEVEL;
            }
        }
    }
    img
}

impl ShapesSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Spec(m));
        if self.n_samples == 0 || self.n_samples % 2 != 0 {
            return bad(format!("n_samples must be positive and even, got {}", self.n_samples));
        }
        if self.glyph_classes < 2 || self.glyph_classes > GLYPHS.len() {
            return bad(format!("glyph_classes must be in 2..={}, got {}", GLYPHS.len(), self.glyph_classes));
        }
        if self.image_side < 5 + 2 * self.jitter + 4 {
            return bad(format!(
                "image_side {} too small for a 5-pixel glyph with jitter {}",
                self.image_side, self.jitter
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std must be non-negative, got {}", self.noise_std));
        }
        Ok(())
    }
}

fn stratified_split(s: &[i8], target: &[usize], n_classes: usize, rng: &mut ChaCha8Rng) -> Vec<Split> {
    let mut split = vec![Split::Test; s.len()];
    for label in [-1i8, 1] {
        for class in 0..n_classes {
            let mut group: Vec<usize> =
                (0..s.len()).filter(|&i| s[i] == label && target[i] == class).collect();
            group.shuffle(rng);
            let n_train = (group.len() as f64 * TRAIN_FRACTION).round() as usize;
            for &i in &group[..n_train] {
                split[i] = Split::Train;
            }
        }
    }
    split
}

pub fn gen_shapes(spec: &ShapesSpec) -> Result<Dataset, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let side = spec.image_side;
    let backgrounds = [background(side, false), background(side, true)];
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("valid normal");

    // Sample k gets background k % 2 and glyph (k / 2) % classes, so both
    // backgrounds see every glyph equally often; the order is then shuffled.
    let mut order: Vec<usize> = (0..spec.n_samples).collect();
    order.shuffle(&mut rng);

    let n = spec.n_samples;
    let mut x = Vec::with_capacity(n * side * side);
    let mut s = Vec::with_capacity(n);
    let mut target = Vec::with_capacity(n);
    let origin = (side - 5) / 2;
    for &k in &order {
        let bg = k % 2;
        let glyph = (k / 2) % spec.glyph_classes;
        let j = spec.jitter as i64;
        let dx = rng.gen_range(-j..=j);
        let dy = rng.gen_range(-j..=j);
        let mut img = backgrounds[bg].clone();
        for (gy, row) in GLYPHS[glyph].iter().enumerate() {
            for (gx, ch) in row.bytes().enumerate() {
                if ch == b'#' {
                    let px = (origin as i64 + gx as i64 + dx) as usize;
                    let py = (origin as i64 + gy as i64 + dy) as usize;
                    let p = &mut img[py * side + px];
                    *p = p.max(GLYPH_LEVEL);
                }
            }
        }
        for p in img.iter_mut() {
            if spec.noise_std > 0.0 {
                *p += noise.sample(&mut rng);
            }
            *p = p.clamp(0.0, 1.0);
        }
        x.extend_from_slice(&img);
        s.push(if bg == 1 { 1 } else { -1 });
        target.push(glyph);
    }
    let split = stratified_split(&s, &target, spec.glyph_classes, &mut rng);
    Dataset::new(x, side * side, s, target, split, spec.glyph_classes)
}

/// One-dimensional two-class Gaussian data: `s = −1 ~ N(0, σ²)`,
/// `s = +1 ~ N(δ, σ²)`. The target repeats the class (0 or 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaussianPairSpec {
    pub delta: f64,
    pub sigma: f64,
    pub n_per_class: usize,
    pub seed: u64,
}

impl Default for GaussianPairSpec {
    fn default() -> Self {
        Self { delta: 1.0, sigma: 1.0, n_per_class: 2_000, seed: 0 }
    }
}

pub fn gen_gaussian_pair(spec: &GaussianPairSpec) -> Result<Dataset, DataError> {
    if spec.n_per_class < 100 {
        return Err(DataError::Spec(format!("n_per_class must be at least 100, got {}", spec.n_per_class)));
    }
    if !(spec.sigma > 0.0 && spec.sigma.is_finite()) || !spec.delta.is_finite() {
        return Err(DataError::Spec("sigma must be positive and delta finite".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.sigma).expect("valid normal");
    let n = 2 * spec.n_per_class;
    let mut x = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    let mut target = Vec::with_capacity(n);
    for i in 0..n {
        let positive = i % 2 == 1;
        let mean = if positive { spec.delta } else { 0.0 };
        x.push(mean + noise.sample(&mut rng));
        s.push(if positive { 1 } else { -1 });
        target.push(usize::from(positive));
    }
    let split = stratified_split(&s, &target, 2, &mut rng);
    Dataset::new(x, 1, s, target, split, 2)
}

/// `I(X;S)` in nats for the equal-weight mixture of `N(0, σ²)` and
/// `N(δ, σ²)`, by composite Simpson quadrature over ±12σ around both means.
pub fn gaussian_pair_mi(delta: f64, sigma: f64) -> f64 {
    let norm = 1.0 / (sigma * (2.0 * std::f64::consts::PI).sqrt());
    let pdf = |x: f64, mu: f64| norm * (-(x - mu).powi(2) / (2.0 * sigma * sigma)).exp();
    let lo = delta.min(0.0) - 12.0 * sigma;
    let hi = delta.max(0.0) + 12.0 * sigma;
    let f = |x: f64| {
        let (a, b) = (pdf(x, 0.0), pdf(x, delta));
        let mix = 0.5 * (a + b);
        let term = |p: f64| if p > 0.0 && mix > 0.0 { 0.5 * p * (p / mix).ln() } else { 0.0 };
        term(a) + term(b)
    };
    let steps = 20_000;
    let h = (hi - lo) / steps as f64;
    let mut total = f(lo) + f(hi);
    for k in 1..steps {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        total += w * f(lo + k as f64 * h);
    }
    total * h / 3.0
}

/// Replaces a `ratio` fraction of the training targets with uniformly drawn
/// classes. Test targets are left alone.
pub fn inject_label_noise(dataset: &Dataset, ratio: f64, seed: u64) -> Result<Dataset, DataError> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(DataError::Spec(format!("noise ratio must lie in [0, 1], got {ratio}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = dataset.indices(Split::Train);
    let k = (ratio * train.len() as f64).round() as usize;
    train.shuffle(&mut rng);
    let mut out = dataset.clone();
    for &i in &train[..k] {
        out.target[i] = rng.gen_range(0..dataset.n_classes);
    }
    Ok(out)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

/// Writes one split as `target,s,p0,...,pK` with 9 significant digits.
pub fn write_csv(dataset: &Dataset, split: Split, path: &Path) -> Result<(), DataError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let mut header = String::from("target,s");
    for k in 0..dataset.dim {
        header.push_str(&format!(",p{k}"));
    }
    writeln!(w, "{header}").map_err(io_err(path))?;
    for i in dataset.indices(split) {
        let mut line = format!("{},{}", dataset.target[i], dataset.s[i]);
        for v in dataset.row(i) {
            line.push(',');
            line.push_str(&format_sig9(*v));
        }
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Scientific notation with 9 significant digits.
pub fn format_sig9(v: f64) -> String {
    format!("{v:.8e}")
}

/// Raw rows of a dataset CSV: `(features, dim, s, target)`.
pub type CsvRows = (Vec<f64>, usize, Vec<i8>, Vec<usize>);

pub fn read_csv(path: &Path) -> Result<CsvRows, DataError> {
    let parse_err = |msg: String| DataError::Parse { path: path.to_path_buf(), msg };
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(source) => DataError::Io { path: path.to_path_buf(), source },
        other => parse_err(format!("{other:?}")),
    })?;
    let headers = reader.headers().map_err(|e| parse_err(e.to_string()))?.clone();
    if headers.len() < 3 || &headers[0] != "target" || &headers[1] != "s" {
        return Err(parse_err("header must start with target,s,p0".into()));
    }
    for (k, h) in headers.iter().skip(2).enumerate() {
        if h != format!("p{k}") {
            return Err(parse_err(format!("column {} should be p{k}, found {h}", k + 2)));
        }
    }
    let dim = headers.len() - 2;
    let (mut x, mut s, mut target) = (Vec::new(), Vec::new(), Vec::new());
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| parse_err(e.to_string()))?;
        let row = line + 2;
        let t: usize = record[0].trim().parse().map_err(|_| parse_err(format!("line {row}: bad target")))?;
        let label: i8 = record[1].trim().parse().map_err(|_| parse_err(format!("line {row}: bad s")))?;
        if label != 1 && label != -1 {
            return Err(parse_err(format!("line {row}: s must be -1 or 1")));
        }
        for field in record.iter().skip(2) {
            let v: f64 = field.trim().parse().map_err(|_| parse_err(format!("line {row}: bad value {field}")))?;
            x.push(v);
        }
        s.push(label);
        target.push(t);
    }
    if s.is_empty() {
        return Err(parse_err("no samples".into()));
    }
    Ok((x, dim, s, target))
}

/// Loads a train/test pair of dataset CSVs. The class count is the largest
/// target plus one unless `n_classes` is given.
pub fn load_split_csv(train: &Path, test: &Path, n_classes: Option<usize>) -> Result<Dataset, DataError> {
    let (mut x, dim, mut s, mut target) = read_csv(train)?;
    let n_train = s.len();
    let (xt, dim_t, st, tt) = read_csv(test)?;
    if dim != dim_t {
        return Err(DataError::Invalid(format!("train width {dim} but test width {dim_t}")));
    }
    x.extend(xt);
    s.extend(st);
    target.extend(tt);
    let mut split = vec![Split::Train; n_train];
    split.resize(s.len(), Split::Test);
    let classes = n_classes.unwrap_or_else(|| target.iter().max().map_or(1, |m| m + 1));
    Dataset::new(x, dim, s, target, split, classes)
}
