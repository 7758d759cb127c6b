use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{ModelConfig, MLP_RATIO};
use crate::tensor::{Graph, ParamId, ParamStore, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct BlockIds {
    ln1: (ParamId, ParamId),
    qkv: (ParamId, ParamId),
    proj: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
}

/// Two-layer projector onto the unit sphere plus its prototype bank.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadIds {
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
    pub prototypes: ParamId,
}

/// Parameter ids of every component. Student parameters (encoder,
/// localization head, projectors, prototypes) come first and the decoder
/// last, so the teacher is the store's first `student_len` entries.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    patch: (ParamId, ParamId),
    pos: ParamId,
    cls: ParamId,
    queries: ParamId,
    blocks: Vec<BlockIds>,
    norm: (ParamId, ParamId),
    pub loc_w1: ParamId,
    pub loc_w2: ParamId,
    pub sparse_head: HeadIds,
    pub cls_head: HeadIds,
    pub student_len: usize,
    dec_in: (ParamId, ParamId),
    dec_pos: ParamId,
    dec_blocks: Vec<BlockIds>,
    dec_norm: (ParamId, ParamId),
    dec_out: (ParamId, ParamId),
}

struct Init<'a> {
    store: &'a mut ParamStore<f32>,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn add(&mut self, name: &str, shape: &[usize], data: Vec<f32>) -> ParamId {
        self.store.insert(name, Tensor::new(shape.to_vec(), data))
    }

    fn fill(&mut self, name: &str, shape: &[usize], v: f32) -> ParamId {
        self.store.insert(name, Tensor::full(shape, v))
    }

    fn normal(&mut self, name: &str, shape: &[usize], std: f32) -> ParamId {
        let dist = Normal::new(0.0f32, std).expect("valid std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.add(name, shape, data)
    }

    /// `[fan_in, fan_out]` weight with Xavier-uniform entries and a zero bias.
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> (ParamId, ParamId) {
        let bound = (6.0 / (fan_in + fan_out) as f32).sqrt();
        let data = (0..fan_in * fan_out).map(|_| self.rng.gen_range(-bound..bound)).collect();
        let w = self.add(&format!("{name}.w"), &[fan_in, fan_out], data);
        let b = self.fill(&format!("{name}.b"), &[fan_out], 0.0);
        (w, b)
    }

    fn norm(&mut self, name: &str, d: usize) -> (ParamId, ParamId) {
        (self.fill(&format!("{name}.g"), &[d], 1.0), self.fill(&format!("{name}.b"), &[d], 0.0))
    }

    fn block(&mut self, name: &str, d: usize) -> BlockIds {
        BlockIds {
            ln1: self.norm(&format!("{name}.ln1"), d),
            qkv: self.linear(&format!("{name}.qkv"), d, 3 * d),
            proj: self.linear(&format!("{name}.proj"), d, d),
            ln2: self.norm(&format!("{name}.ln2"), d),
            fc1: self.linear(&format!("{name}.fc1"), d, MLP_RATIO * d),
            fc2: self.linear(&format!("{name}.fc2"), MLP_RATIO * d, d),
        }
    }

    fn head(&mut self, name: &str, d: usize, p: usize, k: usize) -> HeadIds {
        let fc1 = self.linear(&format!("{name}.fc1"), d, d);
        let fc2 = self.linear(&format!("{name}.fc2"), d, p);
        let prototypes = self.normal(&format!("{name}.prototypes"), &[k, p], 1.0);
        HeadIds { fc1, fc2, prototypes }
    }
}

/// 2-D sine/cosine table used as the starting point of the learned
/// positional embeddings.
fn sincos_table(grid: usize, d: usize) -> Vec<f32> {
    let quarter = d / 4;
    let mut out = vec![0.0f32; grid * grid * d];
    for gy in 0..grid {
        for gx in 0..grid {
            let row = &mut out[(gy * grid + gx) * d..(gy * grid + gx + 1) * d];
            for (axis, pos) in [gy, gx].into_iter().enumerate() {
                for j in 0..quarter {
                    let freq = 1.0 / 10000f64.powf(j as f64 / quarter.max(1) as f64);
                    let a = pos as f64 * freq;
                    row[axis * 2 * quarter + j] = a.sin() as f32;
                    row[axis * 2 * quarter + quarter + j] = a.cos() as f32;
                }
            }
        }
    }
    out
}

pub(super) fn init(config: &ModelConfig, seed: u64) -> (ParamStore<f32>, Layout) {
    let enc = &config.encoder;
    let dec = &config.decoder;
    let (d, n, pd) = (enc.width, enc.n(), enc.patch_dim());
    let mut store = ParamStore::new();
    let mut it = Init {
        store: &mut store,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let patch = it.linear("patch_embed", pd, d);
    let pos = it.add("pos_embed", &[n, d], sincos_table(enc.grid(), d));
    let cls = it.normal("cls", &[1, d], 0.02);
    let queries = it.normal("queries", &[enc.r, d], 0.02);
    let blocks = (0..enc.depth).map(|i| it.block(&format!("blocks.{i}"), d)).collect();
    let norm = it.norm("norm", d);
    let loc_w1 = it.linear("loc.w1", d, d).0;
    let loc_w2 = it.linear("loc.w2", d, d).0;
    let sparse_head = it.head("head_sparse", d, enc.projector_dim, enc.k_sparse);
    let cls_head = it.head("head_cls", d, enc.projector_dim, enc.k_cls);
    let student_len = it.store.len();

    let dw = dec.width;
    let dec_in = it.linear("dec.embed", d, dw);
    let dec_pos = it.add("dec.pos_embed", &[n, dw], sincos_table(enc.grid(), dw));
    let dec_blocks = (0..dec.depth).map(|i| it.block(&format!("dec.blocks.{i}"), dw)).collect();
    let dec_norm = it.norm("dec.norm", dw);
    let dec_out = it.linear("dec.out", dw, pd);
    let bias = it.store.get_mut(dec_out.1);
    bias.data_mut().iter_mut().for_each(|v| *v = 0.5);

    let layout = Layout {
        patch,
        pos,
        cls,
        queries,
        blocks,
        norm,
        loc_w1,
        loc_w2,
        sparse_head,
        cls_head,
        student_len,
        dec_in,
        dec_pos,
        dec_blocks,
        dec_norm,
        dec_out,
    };
    (store, layout)
}

/// Graph outputs of one encoder pass.
#[derive(Clone, Copy, Debug)]
pub struct EncodedVars {
    /// `[B, d]`
    pub cls: Var,
    /// `[B, r, d]`
    pub sparse: Var,
    /// `[B, n_visible, d]`
    pub dense: Var,
}

/// Builds model computations on a graph over one parameter store.
pub struct Net<'a, T: Real> {
    pub g: &'a Graph<T>,
    pub store: &'a ParamStore<T>,
    pub layout: &'a Layout,
    pub config: &'a ModelConfig,
}

impl<T: Real> Net<'_, T> {
    fn p(&self, id: ParamId) -> Var {
        self.g.param(self.store, id)
    }

    fn linear(&self, x: Var, ids: (ParamId, ParamId)) -> Var {
        self.g.linear(x, self.p(ids.0), self.p(ids.1))
    }

    fn norm(&self, x: Var, ids: (ParamId, ParamId)) -> Var {
        self.g.layer_norm(x, self.p(ids.0), self.p(ids.1))
    }

    fn block(&self, x: Var, b: &BlockIds, heads: usize) -> Var {
        let h = self.norm(x, b.ln1);
        let qkv = self.linear(h, b.qkv);
        let a = self.g.attention(qkv, heads);
        let x = self.g.add(x, self.linear(a, b.proj));
        let h = self.norm(x, b.ln2);
        let h = self.g.gelu(self.linear(h, b.fc1));
        self.g.add(x, self.linear(h, b.fc2))
    }

    /// `patches` is `[B, m, patch_dim]`; `positions` holds the `B·m` patch
    /// indices the rows came from, batch-major.
    pub fn encode(&self, patches: &Tensor<T>, positions: &[usize]) -> EncodedVars {
        let enc = &self.config.encoder;
        let (bs, m) = (patches.shape()[0], patches.shape()[1]);
        assert_eq!(positions.len(), bs * m, "one position per patch row");
        let d = enc.width;
        let l = self.layout;
        let x = self.g.constant(patches.clone());
        let tokens = self.linear(x, l.patch);
        let pos = self.g.gather_rows(self.p(l.pos), positions);
        let pos = self.g.reshape(pos, &[bs, m, d]);
        let tokens = self.g.add(tokens, pos);
        let cls = self.g.broadcast(self.p(l.cls), bs);
        let queries = self.g.broadcast(self.p(l.queries), bs);
        let mut x = self.g.concat_tokens(&[cls, queries, tokens]);
        for b in &l.blocks {
            x = self.block(x, b, enc.heads);
        }
        let x = self.norm(x, l.norm);
        let cls = self.g.narrow_tokens(x, 0, 1);
        EncodedVars {
            cls: self.g.reshape(cls, &[bs, d]),
            sparse: self.g.narrow_tokens(x, 1, enc.r),
            dense: self.g.narrow_tokens(x, 1 + enc.r, m),
        }
    }

    /// `softmax_r(cos(U·W1, S·W2) / tau_spatial)` as `[B, n, r]`.
    pub fn localize(&self, dense: Var, sparse: Var) -> Var {
        let u = self.g.l2_normalize(self.g.matmul(dense, self.p(self.layout.loc_w1), false));
        let s = self.g.l2_normalize(self.g.matmul(sparse, self.p(self.layout.loc_w2), false));
        let cos = self.g.bmm(u, s, true);
        self.g.softmax(cos, T::of(self.config.encoder.tau_spatial))
    }

    /// `[B, n, d]` latent to `[B, n, patch_dim]` pixels clamped to `[0, 1]`.
    pub fn decode(&self, z: Var) -> Var {
        let l = self.layout;
        let bs = self.g.shape(z)[0];
        let x = self.linear(z, l.dec_in);
        let mut x = self.g.add(x, self.g.broadcast(self.p(l.dec_pos), bs));
        for b in &l.dec_blocks {
            x = self.block(x, b, self.config.decoder.heads);
        }
        let x = self.norm(x, l.dec_norm);
        let out = self.linear(x, l.dec_out);
        self.g.clamp(out, T::zero(), T::one())
    }

    /// Prototype logits `normalize(h(x)) · normalize(C)ᵀ` for rows of `x`
    /// (any leading shape, flattened).
    pub fn logits(&self, x: Var, head: &HeadIds) -> Var {
        let h = self.g.gelu(self.linear(x, head.fc1));
        let h = self.g.l2_normalize(self.linear(h, head.fc2));
        let p = self.g.shape(h).last().copied().unwrap_or(0);
        let rows = self.g.shape(h).iter().product::<usize>() / p.max(1);
        let h = self.g.reshape(h, &[rows, p]);
        let c = self.g.l2_normalize(self.p(head.prototypes));
        self.g.matmul(h, c, true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sincos_rows_are_distinct() {
        let t = sincos_table(4, 8);
        let rows: Vec<&[f32]> = t.chunks(8).collect();
        for i in 0..rows.len() {
            for j in 0..i {
                assert_ne!(rows[i], rows[j]);
            }
        }
    }

    #[test]
    fn student_parameters_precede_decoder() {
        let cfg = ModelConfig::default();
        let (store, layout) = init(&cfg, 0);
        for (id, name, _) in store.iter() {
            assert_eq!(id.0 < layout.student_len, !name.starts_with("dec."), "{name}");
        }
        assert_eq!(store.get(layout.queries).shape(), &[16, 128]);
        assert_eq!(crate::model::CHANNELS, 3);
    }
}
