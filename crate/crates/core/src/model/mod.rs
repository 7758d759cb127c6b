//! Toy ViT encoder with latent queries, the localization head, a light
//! decoder and the EMA teacher.

mod checkpoint;
mod config;
mod net;

use ndarray::{Array1, Array2, ArrayView2, Axis};

pub use checkpoint::{decode_records, encode_records, read_checkpoint, write_checkpoint, MAGIC, VERSION};
pub use config::{DecoderConfig, EncoderConfig, ModelConfig, CHANNELS, MLP_RATIO};
pub use net::{EncodedVars, HeadIds, Layout, Net};

use crate::error::{Result, StellarError};
use crate::factorization::{ImageEncoder, LocalizationMatrix, SemanticMatrix};
use crate::raster::Image;
use crate::tensor::{Graph, ParamStore, Real, Tensor};

/// Result of encoding one image.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub sparse: SemanticMatrix,
    /// `U`, one row per encoded patch.
    pub dense: Array2<f64>,
    pub cls: Array1<f64>,
}

/// `W1`, `W2` (both `d × d`) and the softmax temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalizationHead {
    pub w1: Array2<f64>,
    pub w2: Array2<f64>,
    pub tau_spatial: f64,
}

fn unit_rows(m: Array2<f64>) -> Array2<f64> {
    crate::objectives::normalize_rows(m.view())
}

/// `L = softmax_r(cos(U·W1, S·W2) / tau_spatial)`.
pub fn localize(head: &LocalizationHead, dense: ArrayView2<f64>, sparse: &SemanticMatrix) -> Result<LocalizationMatrix> {
    let d = head.w1.nrows();
    if dense.ncols() != d || sparse.d() != head.w2.nrows() {
        return Err(StellarError::shape(
            "localize",
            format!("width {d}"),
            format!("dense {} / sparse {}", dense.ncols(), sparse.d()),
        ));
    }
    if !(head.tau_spatial > 0.0) {
        return Err(StellarError::invalid("tau_spatial must be positive"));
    }
    let u = unit_rows(dense.dot(&head.w1));
    let s = unit_rows(sparse.values.dot(&head.w2));
    let l = crate::objectives::softmax_rows(u.dot(&s.t()).view(), head.tau_spatial);
    Ok(LocalizationMatrix::new_unchecked(l))
}

/// Teacher parameters and their momentum.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherState<T = f32> {
    pub params: ParamStore<T>,
    pub momentum: f64,
}

/// `teacher ← m·teacher + (1 − m)·student` over the teacher's parameters,
/// which must be a name- and shape-matching prefix of `student`.
pub fn ema_update_in_place<T: Real>(teacher: &mut ParamStore<T>, student: &ParamStore<T>, momentum: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(StellarError::invalid(format!("momentum must lie in [0, 1], got {momentum}")));
    }
    if teacher.len() > student.len() {
        return Err(StellarError::shape("ema_update", teacher.len(), student.len()));
    }
    for id in teacher.ids() {
        let (t, s) = (teacher.get(id), student.get(id));
        if teacher.name(id) != student.name(id) || t.shape() != s.shape() {
            return Err(StellarError::shape(
                "ema_update",
                format!("{} {:?}", teacher.name(id), t.shape()),
                format!("{} {:?}", student.name(id), s.shape()),
            ));
        }
    }
    let m = T::of(momentum);
    let keep = T::of(1.0 - momentum);
    for id in teacher.ids() {
        let src = student.get(id).data();
        for (t, &s) in teacher.get_mut(id).data_mut().iter_mut().zip(src) {
            *t = m * *t + keep * s;
        }
    }
    Ok(())
}

pub fn ema_update<T: Real>(teacher: &TeacherState<T>, student: &ParamStore<T>, momentum: f64) -> Result<TeacherState<T>> {
    let mut next = teacher.clone();
    ema_update_in_place(&mut next.params, student, momentum)?;
    next.momentum = momentum;
    Ok(next)
}

/// Parameters with their configuration and layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T = f32> {
    config: ModelConfig,
    layout: Layout,
    pub params: ParamStore<T>,
}

impl Model<f32> {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (params, layout) = net::init(config, seed);
        Ok(Self {
            config: config.clone(),
            layout,
            params,
        })
    }
}

impl<T: Real> Model<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.cast(),
        }
    }

    /// The student parameters the teacher shadows.
    pub fn student_params(&self) -> ParamStore<T> {
        self.params.prefix(self.layout.student_len)
    }

    /// A copy whose student parameters come from `student` (e.g. the
    /// teacher) while the decoder is kept.
    pub fn with_student(&self, student: &ParamStore<T>) -> Result<Self> {
        let mut out = self.clone();
        if student.len() != self.layout.student_len {
            return Err(StellarError::shape("with_student", self.layout.student_len, student.len()));
        }
        for id in student.ids() {
            let slot = out.params.get_mut(id);
            if slot.shape() != student.get(id).shape() {
                return Err(StellarError::shape("with_student", format!("{:?}", slot.shape()), format!("{:?}", student.get(id).shape())));
            }
            *slot = student.get(id).clone();
        }
        Ok(out)
    }

    pub fn net<'a>(&'a self, g: &'a Graph<T>) -> Net<'a, T> {
        Net {
            g,
            store: &self.params,
            layout: &self.layout,
            config: &self.config,
        }
    }

    pub fn localization_head(&self) -> LocalizationHead {
        let get = |id| self.params.get(id).cast::<f64>().to_array2();
        LocalizationHead {
            w1: get(self.layout.loc_w1),
            w2: get(self.layout.loc_w2),
            tau_spatial: self.config.encoder.tau_spatial,
        }
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        let s = self.config.encoder.image_size;
        if image.channels() != CHANNELS || image.height() != s || image.width() != s {
            return Err(StellarError::invalid(format!(
                "expected a {CHANNELS}x{s}x{s} image, got {}x{}x{}",
                image.channels(),
                image.height(),
                image.width()
            )));
        }
        Ok(())
    }

    /// Patch rows of `image` as `[n, patch_dim]` values.
    pub fn patchify(&self, image: &Image) -> Result<Vec<f32>> {
        self.check_image(image)?;
        image.to_patches(self.config.encoder.patch_size)
    }

    /// Encodes full images (`visible = None`) or one common set of visible
    /// patch indices, in eval mode.
    pub fn encode_batch(&self, images: &[Image], visible: Option<&[usize]>) -> Result<Vec<EncoderOutput>> {
        let enc = &self.config.encoder;
        let n = enc.n();
        let all: Vec<usize> = (0..n).collect();
        let vis = visible.unwrap_or(&all);
        if vis.is_empty() {
            return Err(StellarError::invalid("mask leaves no visible patch"));
        }
        let mut seen = vec![false; n];
        for &i in vis {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(StellarError::invalid(format!("visible index {i} out of range or repeated")));
            }
        }
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let pd = enc.patch_dim();
        let m = vis.len();
        let mut data = Vec::with_capacity(images.len() * m * pd);
        for img in images {
            let patches = self.patchify(img)?;
            for &i in vis {
                data.extend(patches[i * pd..(i + 1) * pd].iter().map(|&v| T::of(v as f64)));
            }
        }
        let positions: Vec<usize> = (0..images.len()).flat_map(|_| vis.iter().copied()).collect();
        let g = Graph::new();
        let out = self.net(&g).encode(&Tensor::new(vec![images.len(), m, pd], data), &positions);
        let (cls, sparse, dense) = (g.value(out.cls), g.value(out.sparse), g.value(out.dense));
        let d = enc.width;
        let to64 = |t: &[T], rows: usize| Array2::from_shape_fn((rows, d), |(i, k)| t[i * d + k].f64());
        (0..images.len())
            .map(|b| {
                Ok(EncoderOutput {
                    sparse: SemanticMatrix::new(to64(&sparse.data()[b * enc.r * d..], enc.r))?,
                    dense: to64(&dense.data()[b * m * d..], m),
                    cls: Array1::from_iter(cls.data()[b * d..(b + 1) * d].iter().map(|v| v.f64())),
                })
            })
            .collect()
    }

    pub fn encode(&self, image: &Image, visible: Option<&[usize]>) -> Result<EncoderOutput> {
        Ok(self.encode_batch(std::slice::from_ref(image), visible)?.remove(0))
    }

    /// `(S, L)` of a full image.
    pub fn factorize(&self, image: &Image) -> Result<(SemanticMatrix, LocalizationMatrix)> {
        let out = self.encode(image, None)?;
        let loc = localize(&self.localization_head(), out.dense.view(), &out.sparse)?;
        Ok((out.sparse, loc))
    }

    /// Decodes an `n × d` latent into an image.
    pub fn decode(&self, composed: ArrayView2<f64>) -> Result<Image> {
        let enc = &self.config.encoder;
        if composed.dim() != (enc.n(), enc.width) {
            return Err(StellarError::shape(
                "decode",
                format!("({}, {})", enc.n(), enc.width),
                format!("{:?}", composed.dim()),
            ));
        }
        let g = Graph::new();
        let z = g.constant(Tensor::new(
            vec![1, enc.n(), enc.width],
            composed.iter().map(|&v| T::of(v)).collect(),
        ));
        let out = g.value(self.net(&g).decode(z));
        let px: Vec<f32> = out.data().iter().map(|v| v.f64() as f32).collect();
        Image::from_patches(&px, CHANNELS, enc.image_size, enc.image_size, enc.patch_size)
    }

    /// `decode(L·S)` of an image.
    pub fn reconstruct(&self, image: &Image) -> Result<Image> {
        let (s, l) = self.factorize(image)?;
        self.decode(crate::factorization::compose(&l, &s)?.view())
    }

    /// Parameters as checkpoint records named `student.*` and `decoder.*`.
    pub fn records(&self) -> Vec<(String, Tensor<f32>)> {
        self.params
            .iter()
            .map(|(id, name, t)| {
                let ns = if id.0 < self.layout.student_len { "student" } else { "decoder" };
                (format!("{ns}.{name}"), t.cast())
            })
            .collect()
    }

    /// Overwrites every parameter from `records` (as written by
    /// [`records`](Self::records)); all names must be present with
    /// matching shapes.
    pub fn load_records(&mut self, records: &[(String, Tensor<f32>)]) -> Result<()> {
        let by_name: std::collections::HashMap<&str, &Tensor<f32>> =
            records.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let student_len = self.layout.student_len;
        for id in self.params.ids().collect::<Vec<_>>() {
            let ns = if id.0 < student_len { "student" } else { "decoder" };
            let key = format!("{ns}.{}", self.params.name(id));
            let t = by_name
                .get(key.as_str())
                .ok_or_else(|| StellarError::invalid(format!("checkpoint lacks {key}")))?;
            if t.shape() != self.params.get(id).shape() {
                return Err(StellarError::shape("load_records", format!("{:?}", self.params.get(id).shape()), format!("{key} {:?}", t.shape())));
            }
            *self.params.get_mut(id) = t.cast();
        }
        Ok(())
    }
}

impl<T: Real> ImageEncoder for Model<T> {
    fn name(&self) -> &str {
        "model"
    }

    fn input_size(&self) -> usize {
        self.config.encoder.image_size
    }

    fn factors(&self, image: &Image) -> Result<(Array2<f64>, Array2<f64>)> {
        let (s, l) = self.factorize(image)?;
        Ok((s.values, l.values))
    }
}

/// Mean over rows.
pub fn mean_rows(m: &Array2<f64>) -> Array1<f64> {
    m.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(m.ncols()))
}

#[cfg(test)]
mod tests;
