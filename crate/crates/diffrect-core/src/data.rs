//! Synthetic dataset generation, labeled/unlabeled splitting, and dataset
//! directory I/O.
//!
//! Each sample carries `C−1` non-overlapping foreground shapes (disk,
//! ellipse, ring, cycled by class) over a noisy, unevenly lit background.
//! Class intensities are jittered per sample and overlap across classes, so
//! shape is a necessary cue — intensity thresholding alone cannot solve the
//! task; in particular the first two foreground classes (disk vs ellipse)
//! are near-identical in intensity and differ only geometrically.
//!
//! Images are quantized to the 16-bit lattice at generation time, so the
//! PNG round trip is bit-exact on the stored `f64` values.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::contract;
use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::rng::{derive_rng, Stream};
use crate::scs::{build_color_set, ColorSet};

/// One image/mask pair. Unlabeled training samples keep their mask for
/// evaluation only.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// Grayscale image in [0,1], on the 16-bit lattice.
    pub image: Array2<f64>,
    pub mask: LabelMask,
}

/// Deterministic labeled/unlabeled split request.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitSpec {
    pub labeled_ratio: f64,
    pub seed: u64,
}

/// A dataset directory: samples plus the train/val partition stored in
/// `meta.json`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub classes: usize,
    pub size: usize,
    pub seed: u64,
    pub samples: Vec<Sample>,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    classes: usize,
    size: usize,
    seed: u64,
    train_ids: Vec<String>,
    val_ids: Vec<String>,
}

impl Dataset {
    /// Bundles generated samples into a dataset with a deterministic
    /// train/val partition: ids are shuffled by `seed` and the last
    /// `round(val_fraction·n)` (at least one when `n ≥ 2`) become validation
    /// cases.
    pub fn assemble(
        samples: Vec<Sample>,
        classes: usize,
        size: usize,
        seed: u64,
        val_fraction: f64,
    ) -> Result<Self> {
        contract!(!samples.is_empty(), "cannot assemble an empty dataset");
        contract!(
            (0.0..1.0).contains(&val_fraction),
            "val_fraction must lie in [0,1), got {val_fraction}"
        );
        let n = samples.len();
        let mut order: Vec<usize> = (0..n).collect();
        // Iteration 1 keeps this draw disjoint from `split_labeled`, which
        // derives its shuffle at iteration 0 of the same stream.
        let mut rng = derive_rng(seed, 1, Stream::Batch);
        for i in (1..n).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut val_count = (val_fraction * n as f64).round() as usize;
        if n >= 2 && val_fraction > 0.0 {
            val_count = val_count.clamp(1, n - 1);
        } else {
            val_count = 0;
        }
        let split = n - val_count;
        let id_at = |i: usize| samples[order[i]].id.clone();
        let train_ids = (0..split).map(id_at).collect();
        let val_ids = (split..n).map(id_at).collect();
        Ok(Self { classes, size, seed, samples, train_ids, val_ids })
    }

    pub fn sample(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn train_samples(&self) -> Vec<&Sample> {
        self.train_ids.iter().filter_map(|id| self.sample(id)).collect()
    }

    pub fn val_samples(&self) -> Vec<&Sample> {
        self.val_ids.iter().filter_map(|id| self.sample(id)).collect()
    }
}

/// Foreground radius bounds as fractions of the image side.
const RADIUS_FRAC: (f64, f64) = (1.0 / 8.0, 1.0 / 5.0);
/// Base intensities cycled by class (background is drawn separately);
/// per-sample jitter overlaps neighboring entries.
const CLASS_BASE_INTENSITY: [f64; 3] = [0.55, 0.60, 0.78];
const CLASS_INTENSITY_JITTER: f64 = 0.12;
const BACKGROUND_INTENSITY: (f64, f64) = (0.15, 0.30);
const NOISE_SIGMA: f64 = 0.05;
const PLACE_RETRIES: usize = 200;
const SAMPLE_RESTARTS: usize = 50;

#[derive(Clone, Copy)]
enum ShapeKind {
    Disk,
    Ring,
    Ellipse,
}

#[derive(Clone, Copy)]
struct Shape {
    kind: ShapeKind,
    cx: f64,
    cy: f64,
    r: f64,
    theta: f64,
}

impl Shape {
    fn contains(&self, y: f64, x: f64, grow: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        match self.kind {
            ShapeKind::Disk => dx * dx + dy * dy <= (self.r + grow).powi(2),
            ShapeKind::Ring => {
                let d2 = dx * dx + dy * dy;
                let outer = (self.r + grow).powi(2);
                if grow > 0.0 {
                    // Dilated footprint: the full disk, so nothing nests in
                    // the hole of a ring.
                    d2 <= outer
                } else {
                    let inner = (0.55 * self.r).powi(2);
                    d2 >= inner && d2 <= outer
                }
            }
            ShapeKind::Ellipse => {
                let (a, b) = (self.r + grow, 0.6 * self.r + grow);
                let u = dx * self.theta.cos() + dy * self.theta.sin();
                let v = -dx * self.theta.sin() + dy * self.theta.cos();
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            }
        }
    }
}

fn shape_for_class(class: usize) -> ShapeKind {
    match (class - 1) % 3 {
        0 => ShapeKind::Disk,
        1 => ShapeKind::Ellipse,
        _ => ShapeKind::Ring,
    }
}

fn try_generate_sample(
    idx: usize,
    classes: usize,
    size: usize,
    rng: &mut ChaCha8Rng,
) -> Option<Sample> {
    let s = size as f64;
    let (rmin, rmax) = (RADIUS_FRAC.0 * s, RADIUS_FRAC.1 * s);
    let bg = rng.random_range(BACKGROUND_INTENSITY.0..=BACKGROUND_INTENSITY.1);
    // Smooth illumination: a tilted plane plus one low-frequency bump.
    let (ba, bb, bd) = (
        rng.random_range(-0.08..=0.08),
        rng.random_range(-0.08..=0.08),
        rng.random_range(-0.08..=0.08),
    );
    let (phase_u, phase_v) = (rng.random::<f64>(), rng.random::<f64>());

    let mut mask = Array2::<u8>::zeros((size, size));
    let mut shapes = Vec::new();
    for class in 1..classes {
        let kind = shape_for_class(class);
        let mut placed = false;
        for _ in 0..PLACE_RETRIES {
            let r = rng.random_range(rmin..=rmax);
            let margin = r + 2.0;
            let cx = rng.random_range(margin..=s - margin);
            let cy = rng.random_range(margin..=s - margin);
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let cand = Shape { kind, cx, cy, r, theta };
            // The dilated footprint must be empty: shapes never touch.
            let clear = !shapes.iter().any(|other: &Shape| {
                region_overlaps(cand, *other, size)
            });
            if clear {
                paint(&mut mask, cand, class as u8, size);
                shapes.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }
    // All classes must actually appear (tiny shapes always rasterize to ≥1
    // pixel at the allowed radii).
    for class in 0..classes {
        if !mask.iter().any(|&v| v as usize == class) {
            return None;
        }
    }

    let mut intensity = vec![bg];
    for class in 1..classes {
        let base = CLASS_BASE_INTENSITY[(class - 1) % CLASS_BASE_INTENSITY.len()];
        intensity
            .push(base + rng.random_range(-CLASS_INTENSITY_JITTER..=CLASS_INTENSITY_JITTER));
    }

    let mut image = Array2::zeros((size, size));
    for y in 0..size {
        for x in 0..size {
            let u = x as f64 / s;
            let v = y as f64 / s;
            let bias = ba * (u - 0.5)
                + bb * (v - 0.5)
                + bd
                    * (std::f64::consts::PI * (u + phase_u)).sin()
                    * (std::f64::consts::PI * (v + phase_v)).sin();
            let noise: f64 = rng.sample(StandardNormal);
            let val = intensity[mask[[y, x]] as usize] + bias + NOISE_SIGMA * noise;
            // Quantize to the 16-bit lattice so PNG storage is lossless.
            image[[y, x]] = (val.clamp(0.0, 1.0) * 65535.0).round() / 65535.0;
        }
    }
    Some(Sample {
        id: format!("s{idx:04}"),
        image,
        mask: LabelMask::new(mask, classes).expect("constructed in range"),
    })
}

fn region_overlaps(a: Shape, b: Shape, size: usize) -> bool {
    // Rasterized test with one pixel of clearance on each side.
    for y in 0..size {
        for x in 0..size {
            let (yf, xf) = (y as f64, x as f64);
            if a.contains(yf, xf, 1.0) && b.contains(yf, xf, 1.0) {
                return true;
            }
        }
    }
    false
}

fn paint(mask: &mut Array2<u8>, shape: Shape, class: u8, size: usize) {
    for y in 0..size {
        for x in 0..size {
            if shape.contains(y as f64, x as f64, 0.0) {
                mask[[y, x]] = class;
            }
        }
    }
}

/// Generates `n` deterministic samples; per-sample RNG streams make the
/// result independent of generation order.
pub fn synth_generate(n: usize, classes: usize, size: usize, seed: u64) -> Result<Vec<Sample>> {
    contract!(n >= 1, "need at least one sample");
    contract!((2..=64).contains(&classes), "classes must lie in 2..=64, got {classes}");
    contract!(size >= 32, "size must be ≥ 32, got {size}");
    let mut out = Vec::with_capacity(n);
    for idx in 0..n {
        let mut sample = None;
        for attempt in 0..SAMPLE_RESTARTS {
            let mut rng = derive_rng(
                seed,
                (idx * SAMPLE_RESTARTS + attempt) as u64,
                Stream::Data,
            );
            if let Some(s) = try_generate_sample(idx, classes, size, &mut rng) {
                sample = Some(s);
                break;
            }
        }
        out.push(sample.ok_or_else(|| {
            Error::Contract(format!("shape placement infeasible for sample {idx}"))
        })?);
    }
    Ok(out)
}

/// Deterministic shuffle-then-cut split; the labeled side gets
/// `max(1, round(ratio·N))` samples.
pub fn split_labeled(ds: &[Sample], spec: &SplitSpec) -> Result<(Vec<Sample>, Vec<Sample>)> {
    contract!(!ds.is_empty(), "cannot split an empty dataset");
    contract!(
        spec.labeled_ratio > 0.0 && spec.labeled_ratio <= 1.0,
        "labeled_ratio must lie in (0,1], got {}",
        spec.labeled_ratio
    );
    let n = ds.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = derive_rng(spec.seed, 0, Stream::Batch);
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let count = ((spec.labeled_ratio * n as f64).round() as usize).clamp(1, n);
    let labeled = order[..count].iter().map(|&i| ds[i].clone()).collect();
    let unlabeled = order[count..].iter().map(|&i| ds[i].clone()).collect();
    Ok((labeled, unlabeled))
}

fn image_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("images").join(format!("{id}.png"))
}

fn mask_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("masks").join(format!("{id}.png"))
}

/// Writes a grayscale image in [0,1] as a 16-bit PNG.
pub fn write_image_png(path: &Path, image: &Array2<f64>) -> Result<()> {
    let (h, w) = image.dim();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::parse(path, format!("png header: {e}")))?;
    let mut bytes = Vec::with_capacity(h * w * 2);
    for v in image.iter() {
        let q = (v * 65535.0).round() as u16;
        bytes.extend_from_slice(&q.to_be_bytes());
    }
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::parse(path, format!("png write: {e}")))
}

/// Writes a label mask as an indexed PNG whose palette is the class color set.
pub fn write_mask_png(path: &Path, mask: &LabelMask, colors: &ColorSet) -> Result<()> {
    let (h, w) = mask.shape();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    let palette: Vec<u8> = colors.colors().iter().flat_map(|c| c.iter().copied()).collect();
    enc.set_palette(palette);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::parse(path, format!("png header: {e}")))?;
    let bytes: Vec<u8> = mask.data().iter().copied().collect();
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::parse(path, format!("png write: {e}")))
}

fn read_png(path: &Path) -> Result<(png::OutputInfo, Vec<u8>, Option<Vec<u8>>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::parse(path, format!("png decode: {e}")))?;
    let palette = reader.info().palette.as_ref().map(|p| p.to_vec());
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::parse(path, "image dimensions overflow".to_string()))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::parse(path, format!("png frame: {e}")))?;
    buf.truncate(info.buffer_size());
    Ok((info, buf, palette))
}

/// Reads a 16-bit grayscale PNG back onto the [0,1] lattice.
pub fn read_image_png(path: &Path) -> Result<Array2<f64>> {
    let (info, buf, _) = read_png(path)?;
    contract_parse(
        path,
        info.color_type == png::ColorType::Grayscale
            && info.bit_depth == png::BitDepth::Sixteen,
        "expected 16-bit grayscale",
    )?;
    let (h, w) = (info.height as usize, info.width as usize);
    let mut out = Array2::zeros((h, w));
    for (i, px) in buf.chunks_exact(2).enumerate() {
        out[[i / w, i % w]] = f64::from(u16::from_be_bytes([px[0], px[1]])) / 65535.0;
    }
    Ok(out)
}

fn contract_parse(path: &Path, ok: bool, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::parse(path, msg.to_string()))
    }
}

/// Reads an indexed palette PNG written by [`write_mask_png`].
pub fn read_mask_png(path: &Path, classes: usize) -> Result<LabelMask> {
    let (info, buf, palette) = read_png(path)?;
    contract_parse(
        path,
        info.color_type == png::ColorType::Indexed && info.bit_depth == png::BitDepth::Eight,
        "expected 8-bit indexed mask",
    )?;
    let palette = palette.ok_or_else(|| Error::parse(path, "missing palette".to_string()))?;
    let expected = build_color_set(classes)?;
    contract_parse(path, palette.len() % 3 == 0, "palette length not a multiple of 3")?;
    // Map palette entries to classes by exact color match.
    let mut index_to_class = Vec::with_capacity(palette.len() / 3);
    for entry in palette.chunks_exact(3) {
        let rgb = [entry[0], entry[1], entry[2]];
        let class = (0..classes).find(|&c| expected.color(c) == rgb);
        index_to_class.push(class.ok_or_else(|| {
            Error::parse(path, format!("unknown palette color {rgb:?} for {classes} classes"))
        })?);
    }
    let (h, w) = (info.height as usize, info.width as usize);
    contract_parse(path, buf.len() == h * w, "pixel count mismatch")?;
    let mut data = Array2::zeros((h, w));
    for (i, &idx) in buf.iter().enumerate() {
        let class = *index_to_class
            .get(idx as usize)
            .ok_or_else(|| Error::parse(path, format!("palette index {idx} out of range")))?;
        data[[i / w, i % w]] = class as u8;
    }
    LabelMask::new(data, classes)
}

/// Writes `images/<id>.png`, `masks/<id>.png`, and `meta.json`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(dir, e))?;
    fs::create_dir_all(dir.join("masks")).map_err(|e| Error::io(dir, e))?;
    let colors = build_color_set(ds.classes)?;
    for s in &ds.samples {
        write_image_png(&image_path(dir, &s.id), &s.image)?;
        write_mask_png(&mask_path(dir, &s.id), &s.mask, &colors)?;
    }
    let meta = Meta {
        classes: ds.classes,
        size: ds.size,
        seed: ds.seed,
        train_ids: ds.train_ids.clone(),
        val_ids: ds.val_ids.clone(),
    };
    let path = dir.join("meta.json");
    let json = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::parse(&path, format!("meta encode: {e}")))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

/// Loads a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: Meta = serde_json::from_str(&text)
        .map_err(|e| Error::parse(&meta_path, format!("meta decode: {e}")))?;
    let mut samples = Vec::new();
    for id in meta.train_ids.iter().chain(meta.val_ids.iter()) {
        let image = read_image_png(&image_path(dir, id))?;
        let mask = read_mask_png(&mask_path(dir, id), meta.classes)?;
        contract!(
            image.dim() == mask.shape(),
            "sample {id}: image {:?} vs mask {:?}",
            image.dim(),
            mask.shape()
        );
        samples.push(Sample { id: id.clone(), image, mask });
    }
    Ok(Dataset {
        classes: meta.classes,
        size: meta.size,
        seed: meta.seed,
        samples,
        train_ids: meta.train_ids,
        val_ids: meta.val_ids,
    })
}
