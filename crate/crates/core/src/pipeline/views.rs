//! Multi-view augmentation: one global crop, masked patch subsets of it and
//! small local crops.

use rand::seq::index::sample;
use rand::Rng;

use super::config::TrainConfig;
use crate::raster::{CropBox, Image};

/// Largest hue rotation of the colour jitter, in turns.
pub const HUE_JITTER: f32 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedView {
    /// Photometrically re-augmented copy of the global crop.
    pub image: Image,
    /// Sorted indices of the patches that stay visible.
    pub visible: Vec<usize>,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalCrop {
    pub image: Image,
    pub crop: CropBox,
    pub flipped: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewBatch {
    pub global_view: Image,
    pub global_crop: CropBox,
    pub global_flipped: bool,
    pub masked_views: Vec<MaskedView>,
    pub local_crops: Vec<LocalCrop>,
    pub augmentation_seed: u64,
}

/// Number of patches left visible at masking `ratio`: `⌈(1 − ratio)·n⌉`.
pub fn visible_count(n: usize, ratio: f64) -> usize {
    // The small offset keeps exact products such as 0.25·16 from rounding up.
    (((1.0 - ratio) * n as f64) - 1e-9).ceil().max(1.0) as usize
}

/// Box covering a uniformly drawn fraction of the image area with a
/// log-uniform aspect ratio in `[3/4, 4/3]`.
pub fn random_resized_box<R: Rng>(rng: &mut R, h: usize, w: usize, scale: (f64, f64)) -> CropBox {
    let area = (h * w) as f64;
    let frac = if scale.0 < scale.1 { rng.gen_range(scale.0..scale.1) } else { scale.0 };
    let log_ar = rng.gen_range((0.75f64).ln()..(4.0f64 / 3.0).ln());
    let ar = log_ar.exp();
    let (mut bw, mut bh) = ((frac * area * ar).sqrt(), (frac * area / ar).sqrt());
    if bw > w as f64 || bh > h as f64 {
        let side = (frac * area).sqrt();
        bw = side.min(w as f64);
        bh = (frac * area / bw).min(h as f64);
    }
    CropBox {
        top: rng.gen::<f64>() * (h as f64 - bh),
        left: rng.gen::<f64>() * (w as f64 - bw),
        height: bh,
        width: bw,
    }
}

fn luma(img: &Image, y: usize, x: usize) -> f32 {
    0.299 * img.get(0, y, x) + 0.587 * img.get(1, y, x) + 0.114 * img.get(2, y, x)
}

fn grayscale(img: &mut Image) {
    for y in 0..img.height() {
        for x in 0..img.width() {
            let l = luma(img, y, x);
            for c in 0..3 {
                img.set(c, y, x, l);
            }
        }
    }
}

fn blur(img: &Image, sigma: f32) -> Image {
    let radius = (2.0 * sigma).ceil() as i64;
    let kernel: Vec<f32> = (-radius..=radius).map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f32 = kernel.iter().sum();
    let (h, w) = (img.height() as i64, img.width() as i64);
    let pass = |src: &Image, horizontal: bool| {
        let mut out = src.clone();
        for c in 0..src.channels() {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (k, &kv) in kernel.iter().enumerate() {
                        let o = k as i64 - radius;
                        let (yy, xx) = if horizontal {
                            (y, (x + o).clamp(0, w - 1))
                        } else {
                            ((y + o).clamp(0, h - 1), x)
                        };
                        acc += kv * src.get(c, yy as usize, xx as usize);
                    }
                    out.set(c, y as usize, x as usize, acc / norm);
                }
            }
        }
        out
    };
    pass(&pass(img, true), false)
}

/// Rotates hue by `turns` of a full circle in YIQ space.
fn rotate_hue(img: &mut Image, turns: f32) {
    let (s, c) = (turns * std::f32::consts::TAU).sin_cos();
    for y in 0..img.height() {
        for x in 0..img.width() {
            let (r, g, b) = (img.get(0, y, x), img.get(1, y, x), img.get(2, y, x));
            let yy = 0.299 * r + 0.587 * g + 0.114 * b;
            let i = 0.596 * r - 0.274 * g - 0.322 * b;
            let q = 0.211 * r - 0.523 * g + 0.312 * b;
            let (i, q) = (i * c - q * s, i * s + q * c);
            img.set(0, y, x, yy + 0.956 * i + 0.621 * q);
            img.set(1, y, x, yy - 0.272 * i - 0.647 * q);
            img.set(2, y, x, yy - 1.106 * i + 1.703 * q);
        }
    }
}

/// Colour jitter (p = 0.8), grayscale (p = 0.2) and Gaussian blur (p = 0.5).
pub fn photometric<R: Rng>(img: &Image, rng: &mut R) -> Image {
    let mut out = img.clone();
    if rng.gen_bool(0.8) {
        let brightness: f32 = rng.gen_range(0.6..1.4);
        let contrast: f32 = rng.gen_range(0.6..1.4);
        let saturation: f32 = rng.gen_range(0.6..1.4);
        let hue: f32 = rng.gen_range(-HUE_JITTER..HUE_JITTER);
        out.data_mut().iter_mut().for_each(|v| *v *= brightness);
        let n = (out.height() * out.width()) as f32;
        let mean = (0..out.height())
            .flat_map(|y| (0..out.width()).map(move |x| (y, x)))
            .map(|(y, x)| luma(&out, y, x))
            .sum::<f32>()
            / n;
        out.data_mut().iter_mut().for_each(|v| *v = mean + (*v - mean) * contrast);
        for y in 0..out.height() {
            for x in 0..out.width() {
                let l = luma(&out, y, x);
                for c in 0..3 {
                    let v = out.get(c, y, x);
                    out.set(c, y, x, l + (v - l) * saturation);
                }
            }
        }
        rotate_hue(&mut out, hue);
    }
    if rng.gen_bool(0.2) {
        grayscale(&mut out);
    }
    if rng.gen_bool(0.5) {
        out = blur(&out, rng.gen_range(0.1..1.0));
    }
    out.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    out
}

fn crop_view<R: Rng>(image: &Image, size: usize, scale: (f64, f64), rng: &mut R) -> (Image, CropBox, bool) {
    let b = random_resized_box(rng, image.height(), image.width(), scale);
    let mut view = image.resample(b, size, size);
    let flipped = rng.gen_bool(0.5);
    if flipped {
        view = view.flip_horizontal();
    }
    (view, b, flipped)
}

/// Draws every view of one image from `rng` alone.
pub fn make_views<R: Rng>(image: &Image, config: &TrainConfig, mask_ratio: f64, rng: &mut R) -> ViewBatch {
    let augmentation_seed = rng.gen();
    let enc = &config.model.encoder;
    let size = enc.image_size;
    let (geometric, global_crop, global_flipped) = crop_view(image, size, config.global_scale, rng);
    let global_view = photometric(&geometric, rng);
    let n = enc.n();
    let keep = visible_count(n, mask_ratio);
    let masked_views = (0..config.n_masked_views)
        .map(|_| {
            let mut visible = sample(rng, n, keep).into_vec();
            visible.sort_unstable();
            MaskedView {
                image: photometric(&geometric, rng),
                visible,
                ratio: mask_ratio,
            }
        })
        .collect();
    let local_crops = (0..config.n_local_crops)
        .map(|_| {
            let (view, crop, flipped) = crop_view(image, size, config.local_scale, rng);
            LocalCrop {
                image: photometric(&view, rng),
                crop,
                flipped,
            }
        })
        .collect();
    ViewBatch {
        global_view,
        global_crop,
        global_flipped,
        masked_views,
        local_crops,
        augmentation_seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::data::synthetic_shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fixed_seed_gives_identical_views() {
        let (img, _) = synthetic_shape(0, 3, 32);
        let cfg = TrainConfig::default();
        let a = make_views(&img, &cfg, 0.8, &mut ChaCha8Rng::seed_from_u64(5));
        let b = make_views(&img, &cfg, 0.8, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        assert_eq!(a.masked_views.len(), 6);
        assert_eq!(a.local_crops.len(), 6);
        assert_ne!(a, make_views(&img, &cfg, 0.8, &mut ChaCha8Rng::seed_from_u64(6)));
    }

    #[test]
    fn visible_counts() {
        assert_eq!(visible_count(64, 0.8), 13);
        assert_eq!(visible_count(64, 0.6), 26);
        assert_eq!(visible_count(16, 0.75), 4);
        assert_eq!(visible_count(4, 0.99), 1);
        let (img, _) = synthetic_shape(0, 1, 32);
        let v = make_views(&img, &TrainConfig::default(), 0.8, &mut ChaCha8Rng::seed_from_u64(1));
        for m in &v.masked_views {
            assert_eq!(m.visible.len(), 13);
            assert!(m.visible.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn crop_scales_respected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10_000 {
            for (h, w, scale) in [(32, 32, (0.36, 1.0)), (32, 32, (0.06, 0.36)), (24, 40, (0.36, 1.0))] {
                let b = random_resized_box(&mut rng, h, w, scale);
                let frac = b.area() / (h * w) as f64;
                assert!(frac >= scale.0 - 1e-9 && frac <= scale.1 + 1e-9, "{frac}");
                assert!(b.top >= 0.0 && b.left >= 0.0);
                assert!(b.top + b.height <= h as f64 + 1e-9 && b.left + b.width <= w as f64 + 1e-9);
            }
        }
    }

    #[test]
    fn photometric_stays_in_range() {
        let (img, _) = synthetic_shape(4, 4, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let out = photometric(&img, &mut rng);
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let flat = Image::filled(3, 6, 6, 0.4);
        let b = blur(&flat, 0.8);
        assert!(b.data().iter().all(|v| (v - 0.4).abs() < 1e-6));
    }
}
