//! Dataset ingestion: procedurally generated shapes, CIFAR-10 binary batches
//! and class-per-directory image folders.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{DatasetKind, DatasetSource, Split};
use crate::error::{Result, StellarError};
use crate::raster::Image;

pub const SYNTHETIC_CLASSES: usize = 10;
pub const CIFAR_RECORD: usize = 3073;
const CIFAR_SIDE: usize = 32;

/// Images with labels; labels only ever feed the evaluation probes.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// SplitMix64 finalizer, used to derive independent seeds.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match i as i32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Whether the normalized offset `(u, v)` from the shape centre (unit = shape
/// radius) is inside shape `class`.
fn inside(class: usize, u: f32, v: f32) -> bool {
    let (au, av) = (u.abs(), v.abs());
    match class {
        0 => u * u + v * v <= 1.0,
        1 => au <= 0.8 && av <= 0.8,
        2 => v <= 0.8 && v >= -0.8 && au <= (v + 0.8) * 0.6,
        3 => (0.55..=1.0).contains(&(u * u + v * v).sqrt()),
        4 => (au <= 0.3 && av <= 1.0) || (av <= 0.3 && au <= 1.0),
        5 => au + av <= 1.0,
        6 => (u * u) / 0.25 + v * v <= 1.0,
        7 => au <= 0.9 && av <= 0.9 && !(u > -0.3 && v < 0.3),
        8 => au <= 0.9 && ((v + 0.9) % 0.6) < 0.3 && av <= 0.9,
        _ => au <= 0.9 && av <= 0.9 && (au - av).abs() <= 0.25,
    }
}

/// One procedurally drawn image, fully determined by `(seed, index)`. The
/// label is the shape class; colour, position, size and background vary.
pub fn synthetic_shape(seed: u64, index: u64, size: usize) -> (Image, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, index));
    let label = rng.gen_range(0..SYNTHETIC_CLASSES);
    let s = size as f32;
    let radius = rng.gen_range(0.3..0.42) * s;
    let cy = rng.gen_range(0.8 * radius..s - 0.8 * radius);
    let cx = rng.gen_range(0.8 * radius..s - 0.8 * radius);
    let fg_h: f32 = rng.gen();
    let fg = hsv(fg_h, rng.gen_range(0.5..1.0), rng.gen_range(0.6..1.0));
    let bg_a = hsv((fg_h + rng.gen_range(0.25..0.75)) % 1.0, rng.gen_range(0.0..0.6), rng.gen_range(0.1..0.5));
    let bg_b = hsv(rng.gen(), rng.gen_range(0.0..0.6), rng.gen_range(0.1..0.5));
    let angle: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
    let (dy, dx) = (angle.sin(), angle.cos());
    let mut img = Image::filled(3, size, size, 0.0);
    for y in 0..size {
        for x in 0..size {
            let (py, px) = (y as f32 + 0.5, x as f32 + 0.5);
            let t = ((py / s - 0.5) * dy + (px / s - 0.5) * dx + 0.5).clamp(0.0, 1.0);
            let on = inside(label, (px - cx) / radius, (py - cy) / radius);
            for c in 0..3 {
                let base = if on { fg[c] } else { bg_a[c] * (1.0 - t) + bg_b[c] * t };
                let noise = rng.gen_range(-0.03..0.03);
                img.set(c, y, x, (base + noise).clamp(0.0, 1.0));
            }
        }
    }
    (img, label)
}

fn ingestion(path: &Path, reason: impl Into<String>) -> StellarError {
    StellarError::Ingestion {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Parses one CIFAR-10 binary batch: records of one label byte followed by
/// 1024 red, 1024 green and 1024 blue bytes. A file whose length is not a
/// whole number of records is rejected without returning any of it.
pub fn parse_cifar_batch(path: &Path, bytes: &[u8]) -> Result<Vec<(Image, usize)>> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(ingestion(
            path,
            format!("{} bytes is not a whole number of {CIFAR_RECORD}-byte records", bytes.len()),
        ));
    }
    bytes
        .chunks_exact(CIFAR_RECORD)
        .enumerate()
        .map(|(i, rec)| {
            let label = rec[0] as usize;
            if label >= 10 {
                return Err(ingestion(path, format!("record {i} has label {label}")));
            }
            let data = rec[1..].iter().map(|&b| b as f32 / 255.0).collect();
            Ok((Image::new(3, CIFAR_SIDE, CIFAR_SIDE, data)?, label))
        })
        .collect()
}

fn cifar_files(root: &Path, split: Split) -> Vec<PathBuf> {
    match split {
        Split::Train => (1..=5).map(|i| root.join(format!("data_batch_{i}.bin"))).collect(),
        Split::Test => vec![root.join("test_batch.bin")],
    }
}

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp"];

fn load_folder(root: &Path, size: usize, limit: usize) -> Result<Dataset> {
    let read_dir = |p: &Path| -> Result<Vec<PathBuf>> {
        let mut v = fs::read_dir(p)
            .map_err(|e| ingestion(p, e.to_string()))?
            .map(|e| e.map(|e| e.path()).map_err(|e| ingestion(p, e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        v.sort();
        Ok(v)
    };
    let classes: Vec<PathBuf> = read_dir(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if classes.is_empty() {
        return Err(ingestion(root, "no class directories"));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    'outer: for (label, dir) in classes.iter().enumerate() {
        for file in read_dir(dir)? {
            if limit > 0 && images.len() >= limit {
                break 'outer;
            }
            let ext = file.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
            if !IMAGE_EXTENSIONS.contains(&ext.as_str()) {
                return Err(StellarError::UnsupportedFormat(file.display().to_string()));
            }
            images.push(load_image(&file)?.resize(size, size));
            labels.push(label);
        }
    }
    Ok(Dataset {
        images,
        labels,
        num_classes: classes.len(),
    })
}

/// Decodes an image file to RGB in `[0, 1]` at its native size.
pub fn load_image(path: &Path) -> Result<Image> {
    let decoded = image::open(path).map_err(|e| ingestion(path, e.to_string()))?.to_rgb8();
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let mut img = Image::filled(3, h, w, 0.0);
    for (x, y, px) in decoded.enumerate_pixels() {
        for c in 0..3 {
            img.set(c, y as usize, x as usize, px[c] as f32 / 255.0);
        }
    }
    Ok(img)
}

/// Writes a 3-channel image as 8-bit RGB; the format follows the extension.
pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    if img.channels() != 3 {
        return Err(StellarError::invalid("save_image expects 3 channels"));
    }
    let out = image::RgbImage::from_fn(img.width() as u32, img.height() as u32, |x, y| {
        let px = |c| (img.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    out.save(path).map_err(|e| match e {
        image::ImageError::IoError(e) => StellarError::Io(e),
        other => StellarError::UnsupportedFormat(format!("{}: {other}", path.display())),
    })
}

/// Loads every image of `source` at `size × size`.
pub fn load_dataset(source: &DatasetSource, size: usize) -> Result<Dataset> {
    match source.kind {
        DatasetKind::SyntheticShapes => {
            if source.limit == 0 {
                return Err(StellarError::invalid("synthetic-shapes needs a positive image count"));
            }
            // Train and test draw from disjoint index ranges.
            let offset = match source.split {
                Split::Train => 0,
                Split::Test => 1 << 40,
            };
            let (images, labels) = (0..source.limit as u64)
                .map(|i| synthetic_shape(source.seed, offset + i, size))
                .unzip();
            Ok(Dataset {
                images,
                labels,
                num_classes: SYNTHETIC_CLASSES,
            })
        }
        DatasetKind::Cifar10Binary => {
            let mut images = Vec::new();
            let mut labels = Vec::new();
            for file in cifar_files(&source.root, source.split) {
                let bytes = fs::read(&file).map_err(|e| ingestion(&file, e.to_string()))?;
                for (img, label) in parse_cifar_batch(&file, &bytes)? {
                    if source.limit > 0 && images.len() >= source.limit {
                        break;
                    }
                    images.push(if size == CIFAR_SIDE { img } else { img.resize(size, size) });
                    labels.push(label);
                }
            }
            Ok(Dataset {
                images,
                labels,
                num_classes: 10,
            })
        }
        DatasetKind::ImageFolder => load_folder(&source.root, size, source.limit),
    }
}
