//! Hyperspectral data model: cubes, patches, caption corpora, the
//! imbalanced-small-sample split, the toy scene generator and the
//! sample-balance expansion plan.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{bail, Result};
use crate::tensor::Matrix;

pub const DEFAULT_PATCH_SIDE: usize = 9;

/// A `C×H×W` spectral raster with its label raster.
#[derive(Debug, Clone, PartialEq)]
pub struct HsiCube {
    bands: usize,
    height: usize,
    width: usize,
    /// Band-major: value of band `b` at `(r, c)` is `data[(b·H + r)·W + c]`.
    data: Vec<f32>,
    /// Row-major, `0` = unlabeled.
    labels: Vec<u16>,
    class_count: u16,
}

impl HsiCube {
    /// `class_count` is taken as the largest label present.
    pub fn new(bands: usize, height: usize, width: usize, data: Vec<f32>, labels: Vec<u16>) -> Result<Self> {
        if bands < 4 {
            bail!(Validation, "cube needs at least 4 bands, got {bands}");
        }
        if data.len() != bands * height * width {
            bail!(Validation, "cube data has {} values, expected {}", data.len(), bands * height * width);
        }
        if labels.len() != height * width {
            bail!(Validation, "label raster has {} values, expected {}", labels.len(), height * width);
        }
        let class_count = labels.iter().copied().max().unwrap_or(0);
        Ok(Self { bands, height, width, data, labels, class_count })
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn class_count(&self) -> u16 {
        self.class_count
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn label(&self, row: usize, col: usize) -> u16 {
        self.labels[row * self.width + col]
    }

    #[inline]
    pub fn value(&self, band: usize, row: usize, col: usize) -> f32 {
        self.data[(band * self.height + row) * self.width + col]
    }

    pub fn spectrum(&self, row: usize, col: usize) -> Vec<f32> {
        (0..self.bands).map(|b| self.value(b, row, col)).collect()
    }

    /// Labeled pixel count per class, index `i` holding class `i + 1`.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count as usize];
        for &l in &self.labels {
            if l > 0 {
                counts[l as usize - 1] += 1;
            }
        }
        counts
    }

    pub fn is_normalized(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }
}

/// Reference into a [`CaptionCorpus`]: caption `index` of class `class`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CaptionRef {
    pub class: u16,
    pub index: usize,
}

/// A `C×S×S` window of a cube.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub bands: usize,
    pub side: usize,
    /// Band-major `C×S×S`.
    pub pixels: Vec<f32>,
    /// `0` when unlabeled.
    pub center_label: u16,
    pub caption: Option<CaptionRef>,
    /// Cube position of the centre pixel, when cut from a cube.
    pub origin: Option<(usize, usize)>,
}

impl Patch {
    pub fn value(&self, band: usize, row: usize, col: usize) -> f32 {
        self.pixels[(band * self.side + row) * self.side + col]
    }

    pub fn center_spectrum(&self) -> Vec<f64> {
        let h = self.side / 2;
        (0..self.bands).map(|b| self.value(b, h, h) as f64).collect()
    }

    /// Pixel-major `(S·S)×C` matrix.
    pub fn to_pixel_matrix(&self) -> Matrix {
        let p = self.side * self.side;
        let mut m = Matrix::zeros(p, self.bands);
        for b in 0..self.bands {
            for i in 0..p {
                m.set(i, b, self.pixels[b * p + i] as f64);
            }
        }
        m
    }

    /// Inverse of [`Patch::to_pixel_matrix`]; label and caption are unset.
    pub fn from_pixel_matrix(m: &Matrix, side: usize) -> Self {
        let p = side * side;
        assert_eq!(m.rows(), p, "pixel matrix rows must equal side²");
        let bands = m.cols();
        let mut pixels = vec![0.0f32; bands * p];
        for b in 0..bands {
            for i in 0..p {
                pixels[b * p + i] = m.get(i, b) as f32;
            }
        }
        Self { bands, side, pixels, center_label: 0, caption: None, origin: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Granularity {
    Coarse,
    Fine,
}

impl Granularity {
    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::Coarse => "coarse",
            Granularity::Fine => "fine",
        }
    }
}

/// Captions per class.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionCorpus {
    pub entries: BTreeMap<u16, Vec<String>>,
    pub granularity: Granularity,
}

impl CaptionCorpus {
    pub fn new(granularity: Granularity) -> Self {
        Self { entries: BTreeMap::new(), granularity }
    }

    pub fn push(&mut self, class: u16, caption: impl Into<String>) {
        self.entries.entry(class).or_default().push(caption.into());
    }

    pub fn get(&self, r: CaptionRef) -> Option<&str> {
        self.entries.get(&r.class).and_then(|v| v.get(r.index)).map(String::as_str)
    }

    pub fn captions(&self, class: u16) -> &[String] {
        self.entries.get(&class).map_or(&[], Vec::as_slice)
    }

    /// All captions in class order.
    pub fn iter(&self) -> impl Iterator<Item = (CaptionRef, &str)> {
        self.entries
            .iter()
            .flat_map(|(&class, v)| v.iter().enumerate().map(move |(index, s)| (CaptionRef { class, index }, s.as_str())))
    }

    /// Class owning an exact caption string, if any.
    pub fn class_of(&self, caption: &str) -> Option<u16> {
        self.iter().find(|(_, s)| *s == caption).map(|(r, _)| r.class)
    }

    /// Every class in `1..=class_count` needs at least one caption.
    pub fn validate(&self, class_count: u16) -> Result<()> {
        for c in 1..=class_count {
            if self.captions(c).is_empty() {
                bail!(Validation, "class {c} has no caption");
            }
        }
        Ok(())
    }
}

/// Per-band min–max scaling to `[0, 1]`; constant bands map to 0.
pub fn normalize(cube: &HsiCube) -> Result<HsiCube> {
    if let Some(i) = cube.data.iter().position(|v| !v.is_finite()) {
        bail!(Validation, "non-finite value at flat index {i}");
    }
    let plane = cube.height * cube.width;
    let mut data = cube.data.clone();
    for band in data.chunks_mut(plane) {
        let (lo, hi) = band.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v as f64), hi.max(v as f64))
        });
        let range = hi - lo;
        for v in band.iter_mut() {
            *v = if range > 0.0 { ((*v as f64 - lo) / range) as f32 } else { 0.0 };
        }
    }
    Ok(HsiCube { data, ..cube.clone() })
}

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// `C×side×side` window centred at `(row, col)` with mirror padding at the
/// borders. The caption is left unset.
pub fn extract_patch(cube: &HsiCube, row: usize, col: usize, side: usize) -> Result<Patch> {
    if side.is_multiple_of(2) || side == 0 {
        bail!(Argument, "patch side must be odd, got {side}");
    }
    if row >= cube.height || col >= cube.width {
        bail!(Argument, "pixel ({row}, {col}) outside {}×{} cube", cube.height, cube.width);
    }
    let half = (side / 2) as isize;
    let mut pixels = Vec::with_capacity(cube.bands * side * side);
    for b in 0..cube.bands {
        for dr in -half..=half {
            let r = reflect(row as isize + dr, cube.height);
            for dc in -half..=half {
                let c = reflect(col as isize + dc, cube.width);
                pixels.push(cube.value(b, r, c));
            }
        }
    }
    Ok(Patch {
        bands: cube.bands,
        side,
        pixels,
        center_label: cube.label(row, col),
        caption: None,
        origin: Some((row, col)),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitSpec {
    /// Training patches per class, index `i` for class `i + 1`.
    pub per_class_train: Vec<usize>,
    pub seed: u64,
    pub unlabeled_pool_size: usize,
    pub patch_side: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IssdSplit {
    pub train: Vec<Patch>,
    pub test: Vec<Patch>,
    pub unlabeled: Vec<Patch>,
}

impl IssdSplit {
    pub fn train_counts(&self, class_count: u16) -> Vec<usize> {
        count_labels(&self.train, class_count)
    }

    pub fn test_counts(&self, class_count: u16) -> Vec<usize> {
        count_labels(&self.test, class_count)
    }
}

/// Per-class counts of labeled patches, index `i` for class `i + 1`.
pub fn count_labels(patches: &[Patch], class_count: u16) -> Vec<usize> {
    let mut counts = vec![0; class_count as usize];
    for p in patches {
        if p.center_label > 0 && p.center_label <= class_count {
            counts[p.center_label as usize - 1] += 1;
        }
    }
    counts
}

/// Random per-class train/test split plus an unlabeled pool drawn from
/// label-0 pixels. Labeled patches get captions round-robin per class.
pub fn sample_issd_split(cube: &HsiCube, corpus: &CaptionCorpus, spec: &SplitSpec) -> Result<IssdSplit> {
    let k = cube.class_count as usize;
    if spec.per_class_train.len() != k {
        bail!(Validation, "split lists {} class counts, cube has {k} classes", spec.per_class_train.len());
    }
    corpus.validate(cube.class_count)?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k + 1];
    for (i, &l) in cube.labels.iter().enumerate() {
        by_class[l as usize].push(i);
    }
    for (ci, &n) in spec.per_class_train.iter().enumerate() {
        let avail = by_class[ci + 1].len();
        if n == 0 {
            bail!(Validation, "class {} needs at least one training sample", ci + 1);
        }
        if avail < n + 1 {
            bail!(Validation, "class {} has {avail} labeled pixels, needs at least {}", ci + 1, n + 1);
        }
    }
    let mut rng = crate::rng_stream(spec.seed, 0);
    let w = cube.width;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (ci, &n) in spec.per_class_train.iter().enumerate() {
        let class = (ci + 1) as u16;
        let mut pixels = by_class[ci + 1].clone();
        pixels.shuffle(&mut rng);
        let captions = corpus.captions(class).len();
        for (j, &pix) in pixels.iter().enumerate() {
            let mut p = extract_patch(cube, pix / w, pix % w, spec.patch_side)?;
            p.caption = Some(CaptionRef { class, index: j % captions });
            if j < n {
                train.push(p);
            } else {
                test.push(p);
            }
        }
    }
    let mut pool = by_class[0].clone();
    pool.shuffle(&mut rng);
    let unlabeled = pool
        .iter()
        .take(spec.unlabeled_pool_size)
        .map(|&pix| extract_patch(cube, pix / w, pix % w, spec.patch_side))
        .collect::<Result<Vec<_>>>()?;
    Ok(IssdSplit { train, test, unlabeled })
}

/// Output of [`generate_toy_scene`].
#[derive(Debug, Clone, PartialEq)]
pub struct ToyScene {
    pub cube: HsiCube,
    pub corpus: CaptionCorpus,
    /// Noise-free spectral signature per class, before normalization.
    pub signatures: Vec<Vec<f64>>,
    /// Voronoi class of every pixel, including the unlabeled boundary.
    pub regions: Vec<u16>,
}

const SHAPE_WORDS: [&str; 6] = ["compact", "elongated", "irregular", "fragmented", "rounded", "narrow"];
const TOY_NOISE: f64 = 0.05;
const TOY_MIXING: f64 = 0.3;

/// Desk-scale synthetic scene.
///
/// Each class gets a smooth signature made of one to three Gaussian bumps
/// over the band axis. The layout is a Voronoi partition of `2·classes`
/// random sites. Pixels within one pixel of a region of another class are
/// mixed 70/30 with that class's signature and left unlabeled. Every pixel
/// then gets 5% multiplicative noise, and the cube is normalized per band.
pub fn generate_toy_scene(classes: usize, bands: usize, size: (usize, usize), seed: u64) -> Result<ToyScene> {
    if classes < 2 {
        bail!(Argument, "toy scene needs at least 2 classes, got {classes}");
    }
    if bands < 4 {
        bail!(Argument, "toy scene needs at least 4 bands, got {bands}");
    }
    if classes > u16::MAX as usize - 1 {
        bail!(Argument, "too many classes: {classes}");
    }
    let (h, w) = size;
    if h == 0 || w == 0 {
        bail!(Argument, "toy scene size must be nonzero");
    }
    let mut rng = crate::rng_stream(seed, 0);
    let nb = bands as f64;
    let signatures: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let bumps = rng.random_range(1..=3);
            let params: Vec<(f64, f64, f64)> = (0..bumps)
                .map(|_| {
                    let center = rng.random_range(0.0..nb - 1.0);
                    let width = rng.random_range((nb / 8.0).max(0.5)..(nb / 3.0).max(1.0));
                    let amp = rng.random_range(0.3..1.0);
                    (center, width, amp)
                })
                .collect();
            (0..bands)
                .map(|b| {
                    let x = b as f64;
                    0.05 + params.iter().map(|(c, s, a)| a * libm::exp(-(x - c) * (x - c) / (2.0 * s * s))).sum::<f64>()
                })
                .collect()
        })
        .collect();

    let sites: Vec<(f64, f64, u16)> = (0..2 * classes)
        .map(|i| (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64), (i % classes + 1) as u16))
        .collect();
    let mut regions = vec![0u16; h * w];
    for r in 0..h {
        for c in 0..w {
            let (mut best, mut best_d) = (0, f64::INFINITY);
            for (i, &(sr, sc, _)) in sites.iter().enumerate() {
                let d = (sr - r as f64) * (sr - r as f64) + (sc - c as f64) * (sc - c as f64);
                if d < best_d {
                    best = i;
                    best_d = d;
                }
            }
            regions[r * w + c] = sites[best].2;
        }
    }

    let mut adjacency = vec![vec![0usize; classes + 1]; classes + 1];
    let mut labels = vec![0u16; h * w];
    let mut raw = vec![0.0f64; bands * h * w];
    for r in 0..h {
        for c in 0..w {
            let own = regions[r * w + c];
            let mut counts = vec![0usize; classes + 1];
            for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    let (rr, cc) = (r as isize + dr, c as isize + dc);
                    if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                        continue;
                    }
                    let other = regions[rr as usize * w + cc as usize];
                    if other != own {
                        counts[other as usize] += 1;
                    }
                }
            }
            let neighbor = (1..=classes).filter(|&k| counts[k] > 0).max_by_key(|&k| (counts[k], usize::MAX - k));
            let sig_own = &signatures[own as usize - 1];
            for b in 0..bands {
                let base = match neighbor {
                    Some(n) => (1.0 - TOY_MIXING) * sig_own[b] + TOY_MIXING * signatures[n - 1][b],
                    None => sig_own[b],
                };
                let noise: f64 = rng.sample(StandardNormal);
                raw[(b * h + r) * w + c] = (base * (1.0 + TOY_NOISE * noise)).max(0.0);
            }
            match neighbor {
                Some(n) => adjacency[own as usize][n] += 1,
                None => labels[r * w + c] = own,
            }
        }
    }

    let mut corpus = CaptionCorpus::new(Granularity::Fine);
    for class in 1..=classes {
        let adjacent = (1..=classes)
            .filter(|&k| adjacency[class][k] > 0)
            .max_by_key(|&k| (adjacency[class][k], usize::MAX - k))
            .unwrap_or(class % classes + 1);
        let first = rng.random_range(0..SHAPE_WORDS.len());
        let second = (first + rng.random_range(1..SHAPE_WORDS.len())) % SHAPE_WORDS.len();
        for shape in [SHAPE_WORDS[first], SHAPE_WORDS[second]] {
            corpus.push(class as u16, format!("class {class} region, {shape}, adjacent to class {adjacent}"));
        }
    }

    let data = raw.into_iter().map(|v| v as f32).collect();
    let cube = normalize(&HsiCube::new(bands, h, w, data, labels)?)?;
    Ok(ToyScene { cube, corpus, signatures, regions })
}

/// Convenience wrapper returning only the cube and its captions.
pub fn generate_toy_cube(classes: usize, bands: usize, size: (usize, usize), seed: u64) -> Result<(HsiCube, CaptionCorpus)> {
    let scene = generate_toy_scene(classes, bands, size, seed)?;
    Ok((scene.cube, scene.corpus))
}

/// Sample-balance expansion plan: `r(i) = ceil(λ·max(N)/N(i))`,
/// `Ñ(i) = r(i)·N(i)`.
pub fn sbr_expansion_plan(counts: &[usize], lambda: f64) -> Result<Vec<usize>> {
    if counts.is_empty() {
        bail!(Argument, "empty class counts");
    }
    if !(lambda > 0.0) || !lambda.is_finite() {
        bail!(Argument, "sample balance rate must be positive, got {lambda}");
    }
    if let Some(i) = counts.iter().position(|&n| n == 0) {
        bail!(Argument, "class at index {i} has zero samples");
    }
    let max = *counts.iter().max().unwrap_or(&1) as f64;
    Ok(counts
        .iter()
        .map(|&n| {
            let ratio = lambda * max / n as f64;
            // absorb representation error so exact integers stay exact
            let r = libm::ceil(ratio - 1e-9 * ratio.max(1.0)).max(1.0) as usize;
            r * n
        })
        .collect())
}

/// Spectral angle in radians between two spectra.
pub fn spectral_angle(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = libm::sqrt(a.iter().map(|x| x * x).sum::<f64>());
    let nb = libm::sqrt(b.iter().map(|x| x * x).sum::<f64>());
    libm::acos((dot / (na * nb)).clamp(-1.0, 1.0))
}
