//! Synthetic, self-labelled distortion corpus.
//!
//! Each procedural reference image is degraded by four distortion kinds at
//! five levels. Labels come from a fixed formula that is strictly
//! decreasing in the level, so rank-based metrics have a well-defined
//! target without human ratings.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::RgbImage;

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const MANIFEST_HEADER: [&str; 7] = ["id", "ref_path", "dist_path", "kind", "level", "mos", "split"];
pub const MIN_LEVEL: u8 = 1;
pub const MAX_LEVEL: u8 = 5;
const OCCLUSION_BLOCK: usize = 8;

/// Stable 64-bit seed for a named sub-stream of `seed`.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 has 32 bytes"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DistortionKind {
    BlockOcclusion,
    SparseSampling,
    GaussianNoise,
    GaussianBlur,
}

impl DistortionKind {
    pub const ALL: [DistortionKind; 4] = [
        DistortionKind::BlockOcclusion,
        DistortionKind::SparseSampling,
        DistortionKind::GaussianNoise,
        DistortionKind::GaussianBlur,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DistortionKind::BlockOcclusion => "block_occlusion",
            DistortionKind::SparseSampling => "sparse_sampling",
            DistortionKind::GaussianNoise => "gaussian_noise",
            DistortionKind::GaussianBlur => "gaussian_blur",
        }
    }

    /// Per-kind severity weight of the label formula.
    pub fn mos_weight(self) -> f64 {
        match self {
            DistortionKind::BlockOcclusion => 1.2,
            DistortionKind::SparseSampling => 1.0,
            DistortionKind::GaussianNoise => 0.9,
            DistortionKind::GaussianBlur => 0.8,
        }
    }
}

impl fmt::Display for DistortionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DistortionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DistortionKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::contract(format!("unknown distortion kind {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DistortionSpec {
    kind: DistortionKind,
    level: u8,
    seed: u64,
}

impl DistortionSpec {
    pub fn new(kind: DistortionKind, level: u8, seed: u64) -> Result<Self> {
        if !(MIN_LEVEL..=MAX_LEVEL).contains(&level) {
            return Err(Error::contract(format!(
                "distortion level must be in [{MIN_LEVEL}, {MAX_LEVEL}], got {level}"
            )));
        }
        Ok(Self { kind, level, seed })
    }

    pub fn kind(&self) -> DistortionKind {
        self.kind
    }

    pub fn level(&self) -> u8 {
        self.level
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Deterministic procedural image: sinusoidal gratings, soft blobs and flat
/// rectangles, each channel stretched to the full 0–255 range.
pub fn gen_base_image(seed: u64, size: usize) -> Result<RgbImage> {
    if size == 0 || !size.is_multiple_of(32) {
        return Err(Error::contract(format!(
            "image size must be a positive multiple of 32, got {size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = size * size;
    let mut field = vec![[0.0f64; 3]; n];
    let tau = std::f64::consts::TAU;

    for _ in 0..rng.random_range(2..=3) {
        let freq = rng.random_range(1.0..6.0);
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let phase = rng.random_range(0.0..tau);
        let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let (dx, dy) = (angle.cos(), angle.sin());
        for (i, px) in field.iter_mut().enumerate() {
            let (x, y) = ((i % size) as f64 / size as f64, (i / size) as f64 / size as f64);
            let v = (tau * freq * (x * dx + y * dy) + phase).sin();
            for c in 0..3 {
                px[c] += tint[c] * v;
            }
        }
    }
    for _ in 0..rng.random_range(3..=5) {
        let cx = rng.random_range(0.0..size as f64);
        let cy = rng.random_range(0.0..size as f64);
        let radius = rng.random_range(size as f64 / 16.0..size as f64 / 4.0);
        let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
        for (i, px) in field.iter_mut().enumerate() {
            let (x, y) = ((i % size) as f64 - cx, (i / size) as f64 - cy);
            let w = (-(x * x + y * y) / (2.0 * radius * radius)).exp();
            for c in 0..3 {
                px[c] += tint[c] * w;
            }
        }
    }
    for _ in 0..rng.random_range(1..=2) {
        let w = rng.random_range(size / 8..=size / 3);
        let h = rng.random_range(size / 8..=size / 3);
        let x0 = rng.random_range(0..size - w);
        let y0 = rng.random_range(0..size - h);
        let value: [f64; 3] = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                field[y * size + x] = value;
            }
        }
    }

    let mut data = vec![0u8; n * 3];
    for c in 0..3 {
        let (lo, hi) = field.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), px| {
            (lo.min(px[c]), hi.max(px[c]))
        });
        let span = (hi - lo).max(1e-12);
        for (i, px) in field.iter().enumerate() {
            data[i * 3 + c] = ((px[c] - lo) / span * 255.0).round() as u8;
        }
    }
    RgbImage::new(size, size, data)
}

pub fn apply_distortion(img: &RgbImage, spec: &DistortionSpec) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let level = spec.level as usize;
    let (w, h) = (img.width(), img.height());
    let mut out = img.clone();
    match spec.kind {
        DistortionKind::BlockOcclusion => {
            let (cols, rows) = (w / OCCLUSION_BLOCK, h / OCCLUSION_BLOCK);
            let cells = sample(&mut rng, cols * rows, level.min(cols * rows));
            for cell in cells {
                let (bx, by) = ((cell % cols) * OCCLUSION_BLOCK, (cell / cols) * OCCLUSION_BLOCK);
                // paint colour must differ from every covered pixel
                let color = loop {
                    let c: [u8; 3] = rng.random();
                    let clash =
                        (by..by + OCCLUSION_BLOCK).any(|y| (bx..bx + OCCLUSION_BLOCK).any(|x| img.pixel(x, y) == c));
                    if !clash {
                        break c;
                    }
                };
                for y in by..by + OCCLUSION_BLOCK {
                    for x in bx..bx + OCCLUSION_BLOCK {
                        out.set_pixel(x, y, color);
                    }
                }
            }
        }
        DistortionKind::SparseSampling => {
            let count = (0.04 * level as f64 * (w * h) as f64).round() as usize;
            for i in sample(&mut rng, w * h, count) {
                out.set_pixel(i % w, i / w, [0, 0, 0]);
            }
        }
        DistortionKind::GaussianNoise => {
            let normal = Normal::new(0.0, 4.0 * level as f64).expect("positive sigma");
            for v in out.data_mut() {
                *v = (*v as f64 + normal.sample(&mut rng)).round().clamp(0.0, 255.0) as u8;
            }
        }
        DistortionKind::GaussianBlur => {
            out = gaussian_blur(img, 0.5 * level as f64);
        }
    }
    out
}

/// Separable Gaussian blur, kernel width `2⌈3σ⌉+1`, clamped edges.
pub fn gaussian_blur(img: &RgbImage, sigma: f64) -> RgbImage {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let (w, h) = (img.width() as isize, img.height() as isize);
    let src: Vec<f64> = img.data().iter().map(|&v| v as f64).collect();
    let mut tmp = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (k, d) in kernel.iter().zip(-radius..=radius) {
                    let sx = (x + d).clamp(0, w - 1);
                    acc += k * src[((y * w + sx) * 3 + c as isize) as usize];
                }
                tmp[((y * w + x) * 3 + c as isize) as usize] = acc;
            }
        }
    }
    let mut data = vec![0u8; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (k, d) in kernel.iter().zip(-radius..=radius) {
                    let sy = (y + d).clamp(0, h - 1);
                    acc += k * tmp[((sy * w + x) * 3 + c as isize) as usize];
                }
                data[((y * w + x) * 3 + c as isize) as usize] = acc.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    RgbImage::new(img.width(), img.height(), data).expect("same dimensions")
}

/// Label in [0.05, 0.95]: `1 − 0.14 · level · weight(kind)`.
pub fn synth_mos(spec: &DistortionSpec) -> f64 {
    (1.0 - 0.14 * spec.level as f64 * spec.kind.mos_weight()).clamp(0.05, 0.95)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::contract(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub id: String,
    pub ref_path: String,
    pub dist_path: String,
    pub kind: DistortionKind,
    pub level: u8,
    pub mos: f64,
    pub split: Split,
}

impl ManifestRow {
    /// The reference image id this row was derived from.
    pub fn reference_id(&self) -> &str {
        self.ref_path
            .rsplit('/')
            .next()
            .and_then(|f| f.strip_suffix(".ppm"))
            .unwrap_or(&self.ref_path)
    }
}

/// Rows of `manifest.csv`, with paths relative to `root`.
#[derive(Clone, Debug)]
pub struct Manifest {
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
}

/// A loaded (reference, distorted, label) triple.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub reference: RgbImage,
    pub distorted: RgbImage,
    pub kind: DistortionKind,
    pub level: u8,
    pub mos: f64,
}

impl Manifest {
    /// Reads `manifest.csv` from `path`, which may name the file or its
    /// directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        let csv_err = |source| Error::Csv {
            path: file.clone(),
            source,
        };
        let mut reader = csv::Reader::from_path(&file).map_err(csv_err)?;
        let header = reader.headers().map_err(csv_err)?.clone();
        if header.iter().ne(MANIFEST_HEADER) {
            return Err(Error::format(
                &file,
                0,
                format!("unexpected header {:?}", header.iter().collect::<Vec<_>>()),
            ));
        }
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record.map_err(csv_err)?;
            let offset = record.position().map_or(0, |p| p.byte());
            let bad = |what: &str| Error::format(&file, offset, format!("invalid {what}"));
            let level: u8 = record[4].parse().map_err(|_| bad("level"))?;
            if !(MIN_LEVEL..=MAX_LEVEL).contains(&level) {
                return Err(bad("level"));
            }
            rows.push(ManifestRow {
                id: record[0].to_string(),
                ref_path: record[1].to_string(),
                dist_path: record[2].to_string(),
                kind: record[3].parse().map_err(|_| bad("kind"))?,
                level,
                mos: record[5].parse().map_err(|_| bad("mos"))?,
                split: record[6].parse().map_err(|_| bad("split"))?,
            });
        }
        Ok(Self { root, rows })
    }

    pub fn write(&self) -> Result<()> {
        let file = self.root.join(MANIFEST_FILE);
        let csv_err = |source| Error::Csv {
            path: file.clone(),
            source,
        };
        let mut writer = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(&file)
            .map_err(csv_err)?;
        writer.write_record(MANIFEST_HEADER).map_err(csv_err)?;
        for r in &self.rows {
            writer
                .write_record([
                    r.id.as_str(),
                    &r.ref_path,
                    &r.dist_path,
                    r.kind.as_str(),
                    &r.level.to_string(),
                    &format!("{:.6}", r.mos),
                    r.split.as_str(),
                ])
                .map_err(csv_err)?;
        }
        writer.flush().map_err(|e| Error::io(&file, e))
    }

    pub fn rows_in(&self, split: Split) -> impl Iterator<Item = &ManifestRow> {
        self.rows.iter().filter(move |r| r.split == split)
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Sample>> {
        self.rows_in(split)
            .map(|r| {
                Ok(Sample {
                    id: r.id.clone(),
                    reference: RgbImage::read_ppm(self.root.join(&r.ref_path))?,
                    distorted: RgbImage::read_ppm(self.root.join(&r.dist_path))?,
                    kind: r.kind,
                    level: r.level,
                    mos: r.mos,
                })
            })
            .collect()
    }
}

pub const IMAGE_SIZE: usize = 64;

/// Writes `n_base` reference images, their 20 distorted variants each and
/// `manifest.csv` under `out_dir`. The first `⌊0.8·n_base⌋` references of a
/// seeded shuffle form the training split; all variants follow their
/// reference.
pub fn build_dataset(out_dir: impl AsRef<Path>, n_base: usize, seed: u64) -> Result<Manifest> {
    let root = out_dir.as_ref().to_path_buf();
    for sub in ["ref", "dist"] {
        let dir = root.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }

    let mut order: Vec<usize> = (0..n_base).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "split")));
    let n_train = n_base * 4 / 5;
    let mut split = vec![Split::Test; n_base];
    for &r in &order[..n_train] {
        split[r] = Split::Train;
    }

    let mut rows = Vec::with_capacity(n_base * 20);
    for (r, &split) in split.iter().enumerate() {
        let ref_id = format!("ref{r:03}");
        let reference = gen_base_image(derive_seed(seed, &ref_id), IMAGE_SIZE)?;
        let ref_path = format!("ref/{ref_id}.ppm");
        reference.write_ppm(root.join(&ref_path))?;
        for kind in DistortionKind::ALL {
            for level in MIN_LEVEL..=MAX_LEVEL {
                let id = format!("{ref_id}_{kind}_{level}");
                let spec = DistortionSpec::new(kind, level, derive_seed(seed, &id))?;
                let dist_path = format!("dist/{id}.ppm");
                apply_distortion(&reference, &spec).write_ppm(root.join(&dist_path))?;
                rows.push(ManifestRow {
                    id,
                    ref_path: ref_path.clone(),
                    dist_path,
                    kind,
                    level,
                    // stored rounded so in-memory and on-disk labels tie identically
                    mos: (synth_mos(&spec) * 1e6).round() / 1e6,
                    split,
                });
            }
        }
    }
    let manifest = Manifest { root, rows };
    manifest.write()?;
    Ok(manifest)
}
