//! Synthetic unbalanced segmentation datasets and their on-disk formats.
//!
//! Each generated sample is a grayscale image holding one large random
//! ellipse (class 1) with a smaller ellipse strictly inside it (class 2) on
//! background (class 0). The small structure occupies only a couple percent
//! of the pixels and, by default, sits barely above the noise floor, so the
//! task is skewed along both axes that make rare-structure segmentation
//! hard: extreme class imbalance and low contrast. Images and masks travel
//! as binary PGM files listed by a CSV manifest; both formats round-trip
//! bit-exactly.

use crate::error::{Error, Result};
use crate::loss::LabelMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::path::{Path, PathBuf};

/// Mean intensity of the background class; class `k` sits at
/// `BASE_INTENSITY + k * contrast`.
pub const BASE_INTENSITY: f64 = 0.15;

/// Large-ellipse semi-axes are drawn uniformly from this range, as a
/// fraction of `min(H, W)`. The lower bound keeps the large class above
/// ~9% of the pixels, so any admissible small-class fraction stays below it.
const LARGE_AXIS_RANGE: (f64, f64) = (0.17, 0.28);

/// Small-ellipse semi-axes are drawn within ±25% of the radius implied by
/// the target pixel fraction.
const SMALL_AXIS_JITTER: (f64, f64) = (0.75, 1.25);

/// Placement attempts per sample before generation gives up.
const GEOMETRY_RETRIES: usize = 200;

/// One image with its ground-truth mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// H×W grayscale intensities in `[0, 1]`, row-major.
    pub image: Vec<f64>,
    /// Per-pixel class indices, shape `[1, H, W]`.
    pub mask: LabelMap,
    pub id: String,
}

/// An immutable collection of same-shaped samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Generator settings for the nested-ellipse family.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    /// Always 3: background, large structure, small structure.
    pub num_classes: usize,
    /// Target fraction of pixels in the small class.
    pub small_fraction: f64,
    /// Standard deviation of the additive Gaussian intensity noise.
    pub noise_std: f64,
    /// Mean-intensity step between adjacent classes.
    pub contrast: f64,
    pub count: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 64,
            width: 64,
            num_classes: 3,
            small_fraction: 0.02,
            noise_std: 0.05,
            // 2.4 noise standard deviations between adjacent class means:
            // classes overlap enough that a per-pixel threshold cannot
            // separate them, which is what keeps the rare class hard.
            contrast: 0.12,
            count: 50,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config(format!(
                "image size {}x{} is too small for ellipse placement (minimum 8x8)",
                self.height, self.width
            )));
        }
        if self.num_classes != 3 {
            return Err(Error::Config(format!(
                "the generator draws exactly background/large/small, so num_classes must be 3, got {}",
                self.num_classes
            )));
        }
        // The cap keeps the small class strictly below the smallest possible
        // large-ellipse footprint (~9% of the pixels).
        if !(self.small_fraction > 0.0 && self.small_fraction < 0.05) {
            return Err(Error::Config(format!(
                "small_fraction must lie in (0, 0.05), got {}",
                self.small_fraction
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!(
                "noise_std must be finite and non-negative, got {}",
                self.noise_std
            )));
        }
        if !(self.contrast > 0.0 && self.contrast < 1.0) {
            return Err(Error::Config(format!(
                "contrast must lie in (0, 1), got {}",
                self.contrast
            )));
        }
        if self.count == 0 {
            return Err(Error::Config("count must be at least 1".into()));
        }
        Ok(())
    }
}

/// Pixel-center membership test for an axis-aligned ellipse.
fn rasterize(h: usize, w: usize, cx: f64, cy: f64, ax: f64, ay: f64) -> Vec<bool> {
    let mut m = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let dx = (x as f64 + 0.5 - cx) / ax;
            let dy = (y as f64 + 0.5 - cy) / ay;
            m[y * w + x] = dx * dx + dy * dy <= 1.0;
        }
    }
    m
}

/// Generate `config.count` samples deterministically from `config.seed`.
pub fn generate(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let (h, w) = (config.height, config.width);
    let total = (h * w) as f64;
    let min_side = h.min(w) as f64;
    // Radius that would hit the target fraction exactly for a circle.
    let r_target = (config.small_fraction * total / std::f64::consts::PI).sqrt();
    let id_width = config.count.to_string().len().max(3);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = Normal::new(0.0, config.noise_std)
        .map_err(|e| Error::Config(format!("invalid noise_std: {e}")))?;

    let mut samples = Vec::with_capacity(config.count);
    for i in 0..config.count {
        let mask = place_ellipses(&mut rng, config, r_target)?;
        let mut image = vec![0.0; h * w];
        for (px, &class) in image.iter_mut().zip(&mask) {
            let mean = BASE_INTENSITY + class as f64 * config.contrast;
            *px = (mean + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
        samples.push(Sample {
            image,
            mask: LabelMap::new(vec![1, h, w], mask)?,
            id: format!("im{i:0id_width$}"),
        });
        // Guard against pathological configs that slip past validation.
        debug_assert!(min_side >= 8.0);
    }
    Ok(Dataset {
        samples,
        height: h,
        width: w,
        num_classes: config.num_classes,
    })
}

/// Draw one admissible nested-ellipse mask, retrying until the geometry
/// satisfies every invariant: the small ellipse strictly inside the large
/// one (all 8-neighbors of small pixels are non-background), the achieved
/// small fraction within ±50% of the target, and background > large > small
/// pixel counts.
fn place_ellipses(rng: &mut ChaCha8Rng, config: &SynthConfig, r_target: f64) -> Result<Vec<usize>> {
    let (h, w) = (config.height, config.width);
    let total = (h * w) as f64;
    let min_side = h.min(w) as f64;
    let lo = config.small_fraction * 0.5;
    let hi = config.small_fraction * 1.5;

    for _ in 0..GEOMETRY_RETRIES {
        let ax = rng.random_range(LARGE_AXIS_RANGE.0..LARGE_AXIS_RANGE.1) * min_side;
        let ay = rng.random_range(LARGE_AXIS_RANGE.0..LARGE_AXIS_RANGE.1) * min_side;
        if 2.0 * ax + 4.0 > w as f64 || 2.0 * ay + 4.0 > h as f64 {
            continue;
        }
        let cx = rng.random_range(ax + 2.0..w as f64 - ax - 2.0);
        let cy = rng.random_range(ay + 2.0..h as f64 - ay - 2.0);

        let sax = rng.random_range(SMALL_AXIS_JITTER.0..SMALL_AXIS_JITTER.1) * r_target;
        let say = rng.random_range(SMALL_AXIS_JITTER.0..SMALL_AXIS_JITTER.1) * r_target;
        let room_x = ax - sax - 2.0;
        let room_y = ay - say - 2.0;
        if room_x <= 0.0 || room_y <= 0.0 {
            continue;
        }
        let scx = rng.random_range(cx - room_x..cx + room_x);
        let scy = rng.random_range(cy - room_y..cy + room_y);

        let large = rasterize(h, w, cx, cy, ax, ay);
        let small = rasterize(h, w, scx, scy, sax, say);

        let small_count = small.iter().filter(|&&b| b).count();
        let frac = small_count as f64 / total;
        if frac < lo || frac > hi {
            continue;
        }
        if !strictly_inside(&large, &small, h, w) {
            continue;
        }
        let large_only = large
            .iter()
            .zip(&small)
            .filter(|(&l, &s)| l && !s)
            .count();
        let background = h * w - large_only - small_count;
        if !(background > large_only && large_only > small_count) {
            continue;
        }

        let mut mask = vec![0usize; h * w];
        for i in 0..h * w {
            if small[i] {
                mask[i] = 2;
            } else if large[i] {
                mask[i] = 1;
            }
        }
        return Ok(mask);
    }
    Err(Error::Config(format!(
        "could not place an admissible nested ellipse within {GEOMETRY_RETRIES} attempts; \
         target small-class fraction {} is unreachable at {}x{}",
        config.small_fraction, config.height, config.width
    )))
}

/// True when every small pixel lies inside the large ellipse and all of its
/// 8-neighbors exist and are non-background.
fn strictly_inside(large: &[bool], small: &[bool], h: usize, w: usize) -> bool {
    for y in 0..h {
        for x in 0..w {
            if !small[y * w + x] {
                continue;
            }
            if !large[y * w + x] {
                return false;
            }
            if y == 0 || y == h - 1 || x == 0 || x == w - 1 {
                return false;
            }
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let ny = (y as i64 + dy) as usize;
                    let nx = (x as i64 + dx) as usize;
                    if !large[ny * w + nx] {
                        return false;
                    }
                }
            }
        }
    }
    true
}

/// Seed-deterministic random partition into train/val/test.
pub fn split(
    dataset: &Dataset,
    n_train: usize,
    n_val: usize,
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    let n = dataset.len();
    if n_train + n_val > n {
        return Err(Error::Usage(format!(
            "split needs n_train + n_val <= count, got {n_train} + {n_val} > {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |range: std::ops::Range<usize>| Dataset {
        samples: order[range].iter().map(|&i| dataset.samples[i].clone()).collect(),
        height: dataset.height,
        width: dataset.width,
        num_classes: dataset.num_classes,
    };
    Ok((
        pick(0..n_train),
        pick(n_train..n_train + n_val),
        pick(n_train + n_val..n),
    ))
}

/// Stack samples into network inputs: images `[N, 1, H, W]` and labels
/// `[N, H, W]`.
pub fn batch(samples: &[&Sample]) -> Result<(Vec<usize>, Vec<f64>, LabelMap)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Usage("batch needs at least one sample".into()))?;
    let (h, w) = (first.mask.shape()[1], first.mask.shape()[2]);
    let n = samples.len();
    let mut images = Vec::with_capacity(n * h * w);
    let mut labels = Vec::with_capacity(n * h * w);
    for s in samples {
        if s.mask.shape() != [1, h, w] {
            return Err(Error::shape(
                "batch",
                "sample shape",
                format!("[1, {h}, {w}]"),
                format!("{:?}", s.mask.shape()),
            ));
        }
        images.extend_from_slice(&s.image);
        labels.extend_from_slice(s.mask.data());
    }
    Ok((
        vec![n, 1, h, w],
        images,
        LabelMap::new(vec![n, h, w], labels)?,
    ))
}

// ── PGM (binary, P5) ────────────────────────────────────────────────

/// Write an 8-bit binary PGM: `P5\n{w} {h}\n255\n` followed by row-major
/// payload bytes.
pub fn write_pgm(path: &Path, width: usize, height: usize, bytes: &[u8]) -> Result<()> {
    if bytes.len() != width * height {
        return Err(Error::shape("write_pgm", "payload", width * height, bytes.len()));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(bytes);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Read an 8-bit binary PGM, returning `(width, height, payload)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if !raw.starts_with(b"P5") {
        return Err(Error::format(path, "not a binary PGM (magic is not \"P5\")"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // Skip whitespace and `#` comment lines between header tokens.
        loop {
            match raw.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while raw.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::format(path, "truncated header")),
            }
        }
        let start = pos;
        while raw.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if pos == start {
            return Err(Error::format(path, "malformed header token"));
        }
        *field = std::str::from_utf8(&raw[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(path, "malformed header token"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::format(path, format!("expected maxval 255, got {maxval}")));
    }
    match raw.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::format(path, "missing separator before payload")),
    }
    let payload = &raw[pos..];
    if payload.len() < width * height {
        return Err(Error::format(
            path,
            format!("payload holds {} bytes, expected {}", payload.len(), width * height),
        ));
    }
    if payload.len() > width * height {
        return Err(Error::format(
            path,
            format!("{} trailing bytes after payload", payload.len() - width * height),
        ));
    }
    Ok((width, height, payload.to_vec()))
}

/// Save a sample as `{id}.pgm` (image, quantized by `round(x * 255)`) and
/// `{id}_mask.pgm` (raw class indices) inside `dir`; returns the two file
/// names.
pub fn save_sample(dir: &Path, sample: &Sample) -> Result<(String, String)> {
    let [_, h, w] = [sample.mask.shape()[0], sample.mask.shape()[1], sample.mask.shape()[2]];
    let image_name = format!("{}.pgm", sample.id);
    let mask_name = format!("{}_mask.pgm", sample.id);
    let image_bytes: Vec<u8> = sample.image.iter().map(|&x| (x * 255.0).round() as u8).collect();
    let mask_bytes: Vec<u8> = sample.mask.data().iter().map(|&c| c as u8).collect();
    write_pgm(&dir.join(&image_name), w, h, &image_bytes)?;
    write_pgm(&dir.join(&mask_name), w, h, &mask_bytes)?;
    Ok((image_name, mask_name))
}

/// Load a sample from its image and mask PGM files; intensities are
/// dequantized to `byte / 255`.
pub fn load_sample(
    image_path: &Path,
    mask_path: &Path,
    id: &str,
    num_classes: usize,
) -> Result<Sample> {
    let (iw, ih, image_bytes) = read_pgm(image_path)?;
    let (mw, mh, mask_bytes) = read_pgm(mask_path)?;
    if (iw, ih) != (mw, mh) {
        return Err(Error::format(
            mask_path,
            format!("mask is {mw}x{mh} but image is {iw}x{ih}"),
        ));
    }
    let mut mask = Vec::with_capacity(mask_bytes.len());
    for &b in &mask_bytes {
        let c = b as usize;
        if c >= num_classes {
            return Err(Error::format(
                mask_path,
                format!("mask value {c} is not a class index (num_classes = {num_classes})"),
            ));
        }
        mask.push(c);
    }
    Ok(Sample {
        image: image_bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        mask: LabelMap::new(vec![1, ih, iw], mask)?,
        id: id.to_string(),
    })
}

// ── manifest ────────────────────────────────────────────────────────

pub const MANIFEST_HEADER: &str = "id,image_path,mask_path";

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub id: String,
    pub image_path: String,
    pub mask_path: String,
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.id, r.image_path, r.mask_path));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == MANIFEST_HEADER => {}
        other => {
            return Err(Error::format(
                path,
                format!("expected header {MANIFEST_HEADER:?}, found {other:?}"),
            ))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::format(path, format!("line {}: expected 3 fields", i + 2)));
        }
        rows.push(ManifestRow {
            id: fields[0].to_string(),
            image_path: fields[1].to_string(),
            mask_path: fields[2].to_string(),
        });
    }
    Ok(rows)
}

/// Save every sample into `dir` and write `manifest.csv` (relative paths)
/// beside them; returns the manifest path.
pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rows = Vec::with_capacity(dataset.len());
    for s in &dataset.samples {
        let (image_path, mask_path) = save_sample(dir, s)?;
        rows.push(ManifestRow { id: s.id.clone(), image_path, mask_path });
    }
    let manifest = dir.join("manifest.csv");
    write_manifest(&manifest, &rows)?;
    Ok(manifest)
}

/// Load a dataset from a manifest; relative paths resolve against the
/// manifest's directory.
pub fn load_dataset(manifest_path: &Path, num_classes: usize) -> Result<Dataset> {
    let rows = read_manifest(manifest_path)?;
    if rows.is_empty() {
        return Err(Error::format(manifest_path, "manifest lists no samples"));
    }
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut samples = Vec::with_capacity(rows.len());
    for r in &rows {
        samples.push(load_sample(
            &base.join(&r.image_path),
            &base.join(&r.mask_path),
            &r.id,
            num_classes,
        )?);
    }
    let (h, w) = (samples[0].mask.shape()[1], samples[0].mask.shape()[2]);
    for s in &samples {
        if s.mask.shape() != [1, h, w] {
            return Err(Error::format(
                manifest_path,
                format!("sample {} is {:?}, expected [1, {h}, {w}]", s.id, s.mask.shape()),
            ));
        }
    }
    Ok(Dataset { samples, height: h, width: w, num_classes })
}
