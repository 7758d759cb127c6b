use std::io::Write;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Result, StellarError};
use crate::raster::{CropBox, Image};
use crate::transport::{extract_matching, CostMatrix, Matching, OtConfig};

pub const SHIFT_CSV_HEADER: &str = "shift,axis,rel_delta_S,rel_delta_L";
pub const CROP_CSV_HEADER: &str = "encoder,scale_low,scale_high,mean_cos_dist,std_cos_dist";

/// Anything that maps a square image to its factors. Implementations must be
/// deterministic for the probes to mean anything.
pub trait ImageEncoder: Sync {
    fn name(&self) -> &str;

    /// Side length in pixels of the expected input.
    fn input_size(&self) -> usize;

    /// `(S, L)` with shapes `r × d` and `n × r`.
    fn factors(&self, image: &Image) -> Result<(Array2<f64>, Array2<f64>)>;

    /// Pooled representation used by the crop probe; mean of the sparse tokens.
    fn pooled(&self, image: &Image) -> Result<Array1<f64>> {
        let (s, _) = self.factors(image)?;
        Ok(s.mean_axis(Axis(0)).expect("r >= 1"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShiftAxis {
    X,
    Y,
}

impl ShiftAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            ShiftAxis::X => "x",
            ShiftAxis::Y => "y",
        }
    }
}

impl std::str::FromStr for ShiftAxis {
    type Err = StellarError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x" => Ok(ShiftAxis::X),
            "y" => Ok(ShiftAxis::Y),
            other => Err(StellarError::invalid(format!("axis must be x or y, got `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShiftProbeResult {
    pub shift_pixels: usize,
    pub axis: ShiftAxis,
    pub rel_delta_s: f64,
    pub rel_delta_l: f64,
}

fn frobenius(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn rel_delta(moved: &Array2<f64>, base: &Array2<f64>) -> f64 {
    let diff = moved - base;
    frobenius(&diff) / frobenius(base).max(1e-12)
}

/// Encodes the top-left `input_size` window and the same window moved by each
/// shift, aligns the two token sets by entropic OT and reports how much of the
/// change lands in `S` versus `L`.
pub fn shift_probe(
    encoder: &dyn ImageEncoder,
    image: &Image,
    shifts: &[usize],
    axis: ShiftAxis,
    ot: &OtConfig,
) -> Result<Vec<ShiftProbeResult>> {
    let size = encoder.input_size();
    let window = |shift: usize| -> Result<Image> {
        let (top, left) = match axis {
            ShiftAxis::X => (0, shift),
            ShiftAxis::Y => (shift, 0),
        };
        image.crop(top, left, size, size)
    };
    let base_img = window(0)?;
    // Fail before any encoding when a shift leaves the image.
    let crops = shifts.iter().map(|&s| window(s)).collect::<Result<Vec<_>>>()?;
    let (s0, l0) = encoder.factors(&base_img)?;

    let mut out = Vec::with_capacity(shifts.len());
    for (&shift, crop) in shifts.iter().zip(&crops) {
        let (s1, l1) = encoder.factors(crop)?;
        if s1.dim() != s0.dim() || l1.dim() != l0.dim() {
            return Err(StellarError::shape("shift_probe", format!("{:?}", s0.dim()), format!("{:?}", s1.dim())));
        }
        let matching = if s1 == s0 {
            Matching::identity(s0.nrows())
        } else {
            let cost = CostMatrix::from_tokens(s1.view(), s0.view())?;
            extract_matching(&ot.solve(&cost)?)
        };
        let sigma = &matching.sigma;
        let s_ref = Array2::from_shape_fn(s1.dim(), |(i, k)| s0[[sigma[i], k]]);
        let l_ref = Array2::from_shape_fn(l1.dim(), |(p, i)| l0[[p, sigma[i]]]);
        out.push(ShiftProbeResult {
            shift_pixels: shift,
            axis,
            rel_delta_s: rel_delta(&s1, &s_ref),
            rel_delta_l: rel_delta(&l1, &l_ref),
        });
    }
    Ok(out)
}

pub fn shift_csv(results: &[ShiftProbeResult], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "{SHIFT_CSV_HEADER}")?;
    for r in results {
        writeln!(w, "{},{},{:?},{:?}", r.shift_pixels, r.axis.as_str(), r.rel_delta_s, r.rel_delta_l)?;
    }
    Ok(())
}

/// Cosine-distance distribution of one encoder under random resized crops.
#[derive(Clone, Debug, PartialEq)]
pub struct CropRobustness {
    pub encoder: String,
    pub scale_low: f64,
    pub scale_high: f64,
    pub distances: Vec<f64>,
}

impl CropRobustness {
    pub fn mean(&self) -> f64 {
        if self.distances.is_empty() {
            return 0.0;
        }
        self.distances.iter().sum::<f64>() / self.distances.len() as f64
    }

    pub fn std(&self) -> f64 {
        if self.distances.is_empty() {
            return 0.0;
        }
        let m = self.mean();
        (self.distances.iter().map(|d| (d - m) * (d - m)).sum::<f64>() / self.distances.len() as f64).sqrt()
    }
}

fn cosine_distance(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    if a == b {
        return 0.0;
    }
    let dot = a.dot(b);
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    (1.0 - dot / (na * nb).max(1e-8)).clamp(0.0, 2.0)
}

/// Square box covering a uniformly drawn fraction of the image area.
fn random_box(rng: &mut ChaCha8Rng, h: usize, w: usize, scale: (f64, f64)) -> CropBox {
    let frac = if scale.0 < scale.1 { rng.gen_range(scale.0..=scale.1) } else { scale.1 };
    let side = (frac * (h * w) as f64).sqrt().min(h as f64).min(w as f64);
    let top = rng.gen::<f64>() * (h as f64 - side);
    let left = rng.gen::<f64>() * (w as f64 - side);
    CropBox {
        top,
        left,
        height: side,
        width: side,
    }
}

/// For every encoder, the cosine distance between the pooled feature of each
/// image and of `crops_per_image` random resized crops of it. The crop boxes
/// are drawn once from `seed` and shared by all encoders.
pub fn crop_robustness_probe(
    encoders: &[&dyn ImageEncoder],
    images: &[Image],
    scale_range: (f64, f64),
    crops_per_image: usize,
    seed: u64,
) -> Result<Vec<CropRobustness>> {
    let (lo, hi) = scale_range;
    if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
        return Err(StellarError::invalid(format!("scale range must satisfy 0 < low <= high <= 1, got ({lo}, {hi})")));
    }
    if images.is_empty() {
        return Err(StellarError::invalid("crop probe needs at least one image"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let boxes: Vec<Vec<CropBox>> = images
        .iter()
        .map(|img| (0..crops_per_image).map(|_| random_box(&mut rng, img.height(), img.width(), scale_range)).collect())
        .collect();

    encoders
        .iter()
        .map(|enc| {
            let size = enc.input_size();
            let per_image: Vec<Vec<f64>> = images
                .par_iter()
                .zip(&boxes)
                .map(|(img, img_boxes)| {
                    let base = enc.pooled(&img.resize(size, size))?;
                    img_boxes
                        .iter()
                        .map(|b| Ok(cosine_distance(&base, &enc.pooled(&img.resample(*b, size, size))?)))
                        .collect::<Result<Vec<f64>>>()
                })
                .collect::<Result<_>>()?;
            Ok(CropRobustness {
                encoder: enc.name().to_string(),
                scale_low: lo,
                scale_high: hi,
                distances: per_image.into_iter().flatten().collect(),
            })
        })
        .collect()
}

pub fn crop_csv(results: &[CropRobustness], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "{CROP_CSV_HEADER}")?;
    for r in results {
        writeln!(w, "{},{:?},{:?},{:?},{:?}", r.encoder, r.scale_low, r.scale_high, r.mean(), r.std())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Tokens are fixed random vectors tinted by the image mean; localization
    /// follows each pixel row's brightness, so shifting moves `L` more than `S`.
    struct Toy {
        size: usize,
        tokens: Array2<f64>,
    }

    impl Toy {
        fn new(size: usize) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            Self {
                size,
                tokens: Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0)),
            }
        }
    }

    impl ImageEncoder for Toy {
        fn name(&self) -> &str {
            "toy"
        }

        fn input_size(&self) -> usize {
            self.size
        }

        fn factors(&self, image: &Image) -> Result<(Array2<f64>, Array2<f64>)> {
            let mean = image.data().iter().map(|v| *v as f64).sum::<f64>() / image.data().len() as f64;
            let s = &self.tokens + mean;
            let n = image.height();
            let mut l = Array2::zeros((n, 3));
            for y in 0..n {
                let b = image.get(0, y, 0) as f64;
                let w = [1.0 + b, 1.0 + 2.0 * b, 1.0];
                let t: f64 = w.iter().sum();
                for j in 0..3 {
                    l[[y, j]] = w[j] / t;
                }
            }
            Ok((s, l))
        }
    }

    struct Constant;

    impl ImageEncoder for Constant {
        fn name(&self) -> &str {
            "constant"
        }

        fn input_size(&self) -> usize {
            8
        }

        fn factors(&self, _: &Image) -> Result<(Array2<f64>, Array2<f64>)> {
            Ok((Array2::from_elem((2, 3), 0.5), Array2::from_elem((4, 2), 0.5)))
        }
    }

    fn stripes(h: usize, w: usize) -> Image {
        let mut img = Image::filled(3, h, w, 0.0);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    img.set(c, y, x, ((y * 7 + x * 3 + c) % 11) as f32 / 10.0);
                }
            }
        }
        img
    }

    #[test]
    fn zero_shift_is_exactly_zero() {
        let enc = Toy::new(8);
        let r = shift_probe(&enc, &stripes(16, 16), &[0, 0], ShiftAxis::Y, &OtConfig::default()).unwrap();
        assert!(r.iter().all(|p| p.rel_delta_s == 0.0 && p.rel_delta_l == 0.0));
    }

    #[test]
    fn shifted_windows_move_localization() {
        let enc = Toy::new(8);
        let r = shift_probe(&enc, &stripes(16, 16), &[2, 4], ShiftAxis::Y, &OtConfig::default()).unwrap();
        assert!(r.iter().all(|p| p.rel_delta_l > 0.0 && p.rel_delta_s >= 0.0));
        let mut buf = Vec::new();
        shift_csv(&r, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("shift,axis,rel_delta_S,rel_delta_L\n2,y,"));
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn out_of_bounds_shift_errors() {
        let enc = Toy::new(8);
        assert!(shift_probe(&enc, &stripes(10, 10), &[3], ShiftAxis::X, &OtConfig::default()).is_err());
    }

    #[test]
    fn matching_undoes_token_reordering() {
        // Reversing the token order on any non-base input must not register as change in S.
        struct Reorder(Toy);
        impl ImageEncoder for Reorder {
            fn name(&self) -> &str {
                "reorder"
            }
            fn input_size(&self) -> usize {
                self.0.size
            }
            fn factors(&self, image: &Image) -> Result<(Array2<f64>, Array2<f64>)> {
                let s = self.0.tokens.clone();
                let l = Array2::from_shape_fn((image.height(), 3), |(_, j)| [0.2, 0.3, 0.5][j]);
                if image.get(0, 0, 0) == 0.0 {
                    Ok((s, l))
                } else {
                    let rev = |m: &Array2<f64>| m.slice(ndarray::s![.., ..;-1]).to_owned();
                    Ok((s.slice(ndarray::s![..;-1, ..]).to_owned(), rev(&l)))
                }
            }
        }
        let enc = Reorder(Toy::new(8));
        let r = shift_probe(&enc, &stripes(16, 16), &[1], ShiftAxis::Y, &OtConfig::default()).unwrap();
        assert!(r[0].rel_delta_s < 1e-12);
        assert!(r[0].rel_delta_l < 1e-12);
    }

    #[test]
    fn crop_probe_trivial_cases() {
        let imgs = vec![stripes(12, 12), stripes(16, 16)];
        let toy = Toy::new(8);
        let full = crop_robustness_probe(&[&toy], &imgs, (1.0, 1.0), 3, 0).unwrap();
        assert!(full[0].distances.iter().all(|d| *d < 1e-12), "{:?}", full[0].distances);

        let both = crop_robustness_probe(&[&Constant, &toy], &imgs, (0.5, 1.0), 5, 0).unwrap();
        assert_eq!(both[0].distances, vec![0.0; 10]);
        assert_eq!(both[0].mean(), 0.0);
        assert_eq!(both[1].distances.len(), 10);
        let again = crop_robustness_probe(&[&Constant, &toy], &imgs, (0.5, 1.0), 5, 0).unwrap();
        assert_eq!(both, again);

        let mut buf = Vec::new();
        crop_csv(&both, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("\nconstant,0.5,1.0,0.0,0.0\n"));

        assert!(crop_robustness_probe(&[&toy], &imgs, (0.0, 1.0), 1, 0).is_err());
        assert!(crop_robustness_probe(&[&toy], &[], (0.5, 1.0), 1, 0).is_err());
    }
}
