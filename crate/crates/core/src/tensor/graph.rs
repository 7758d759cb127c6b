use std::cell::RefCell;
use std::collections::HashMap;

use ndarray::ArrayView2;

use super::{gemm, MatMut, MatRef, ParamId, ParamStore, Real, Tensor};
use crate::objectives;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Param,
    MatMul { a: Var, b: Var, trans_b: bool },
    Bmm { a: Var, b: Var, trans_b: bool },
    AddBias { x: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, s: T },
    LayerNorm { x: Var, gamma: Var, beta: Var, stats: Vec<(T, T)> },
    Gelu { x: Var },
    Attention { qkv: Var, heads: usize, probs: Vec<T> },
    Softmax { x: Var, tau: T },
    L2Normalize { x: Var, norms: Vec<T> },
    Broadcast { x: Var },
    Concat { parts: Vec<(Var, usize)> },
    Narrow { x: Var, start: usize },
    GatherRows { table: Var, idx: Vec<usize> },
    Reshape { x: Var },
    MeanTokens { x: Var },
    Clamp { x: Var, lo: T, hi: T },
    /// Scalar loss whose local gradient was computed in the forward pass.
    Loss { x: Var, local_grad: Tensor<T> },
    WeightedSum { terms: Vec<(Var, T)> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so the node
/// list is already a topological order for the backward sweep.
pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    param_vars: RefCell<HashMap<ParamId, Var>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for every parameter that entered the graph.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params
            .iter()
            .filter_map(|&(id, v)| self.grads[v.0].as_ref().map(|g| (id, g)))
    }

    /// Gradient for every parameter in `store`, zeros for unused ones.
    pub fn param_grads(&self, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        let mut out: Vec<Tensor<T>> = store.iter().map(|(_, _, v)| Tensor::zeros(v.shape())).collect();
        for (id, g) in self.params() {
            out[id.0] = g.clone();
        }
        out
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            param_vars: RefCell::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].needs_grad)
    }

    /// Borrow a node's value.
    pub fn with<R>(&self, v: Var, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        self.with(v, Tensor::clone)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.with(v, |t| t.shape().to_vec())
    }

    pub fn item(&self, v: Var) -> T {
        self.with(v, Tensor::item)
    }

    pub fn constant(&self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives a gradient (used by tests and gradient checks).
    pub fn input(&self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Parameter leaf; repeated requests for the same id share one node so
    /// gradients from every use accumulate.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.borrow().get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, true);
        self.param_vars.borrow_mut().insert(id, v);
        v
    }

    /// `a · b` where `a` is `[.., k]` and `b` is `[k, n]` (or `[n, k]` with
    /// `trans_b`).
    pub fn matmul(&self, a: Var, b: Var, trans_b: bool) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            assert_eq!(tb.rank(), 2, "matmul rhs must be rank 2");
            let (k, n) = if trans_b {
                (tb.shape()[1], tb.shape()[0])
            } else {
                (tb.shape()[0], tb.shape()[1])
            };
            assert_eq!(ta.cols(), k, "matmul inner dimension {:?} x {:?}", ta.shape(), tb.shape());
            let m = ta.rows();
            let mut shape = ta.shape().to_vec();
            *shape.last_mut().unwrap() = n;
            let mut out = Tensor::zeros(&shape);
            let bref = if trans_b {
                MatRef::dense(tb.data(), 0, n, k).t()
            } else {
                MatRef::dense(tb.data(), 0, k, n)
            };
            gemm(
                T::one(),
                MatRef::dense(ta.data(), 0, m, k),
                bref,
                T::zero(),
                MatMut::dense(out.data_mut(), 0, m, n),
            );
            out
        };
        let ng = self.needs(&[a, b]);
        self.push(out, Op::MatMul { a, b, trans_b }, ng)
    }

    pub fn linear(&self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w, false);
        self.add_bias(y, b)
    }

    /// Batched `[B, m, k] · [B, k, n]` (or `[B, n, k]` with `trans_b`).
    pub fn bmm(&self, a: Var, b: Var, trans_b: bool) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            assert!(ta.rank() == 3 && tb.rank() == 3, "bmm operands must be rank 3");
            let (bs, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
            assert_eq!(tb.shape()[0], bs, "bmm batch");
            let n = if trans_b {
                assert_eq!(tb.shape()[2], k, "bmm inner");
                tb.shape()[1]
            } else {
                assert_eq!(tb.shape()[1], k, "bmm inner");
                tb.shape()[2]
            };
            let mut out = Tensor::zeros(&[bs, m, n]);
            for i in 0..bs {
                let bref = if trans_b {
                    MatRef::dense(tb.data(), i * n * k, n, k).t()
                } else {
                    MatRef::dense(tb.data(), i * k * n, k, n)
                };
                gemm(
                    T::one(),
                    MatRef::dense(ta.data(), i * m * k, m, k),
                    bref,
                    T::zero(),
                    MatMut::dense(out.data_mut(), i * m * n, m, n),
                );
            }
            out
        };
        let ng = self.needs(&[a, b]);
        self.push(out, Op::Bmm { a, b, trans_b }, ng)
    }

    pub fn add_bias(&self, x: Var, b: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let (tx, tb) = (&nodes[x.0].value, &nodes[b.0].value);
            let n = tx.cols();
            assert_eq!(tb.numel(), n, "bias length");
            let mut out = tx.clone();
            for row in out.data_mut().chunks_mut(n) {
                for (o, &bv) in row.iter_mut().zip(tb.data()) {
                    *o += bv;
                }
            }
            out
        };
        let ng = self.needs(&[x, b]);
        self.push(out, Op::AddBias { x, b }, ng)
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let nodes = self.nodes.borrow();
        let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |x, y| x + y);
        let ng = self.needs(&[a, b]);
        self.push(out, Op::Add { a, b }, ng)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |x, y| x - y);
        let ng = self.needs(&[a, b]);
        self.push(out, Op::Sub { a, b }, ng)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |x, y| x * y);
        let ng = self.needs(&[a, b]);
        self.push(out, Op::Mul { a, b }, ng)
    }

    pub fn scale(&self, x: Var, s: T) -> Var {
        let out = self.with(x, |t| t.map(|v| v * s));
        let ng = self.needs(&[x]);
        self.push(out, Op::Scale { x, s }, ng)
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var) -> Var {
        let eps = T::of(1e-6);
        let (out, stats) = {
            let nodes = self.nodes.borrow();
            let (tx, tg, tb) = (&nodes[x.0].value, &nodes[gamma.0].value, &nodes[beta.0].value);
            let d = tx.cols();
            assert_eq!(tg.numel(), d, "layer_norm gamma");
            assert_eq!(tb.numel(), d, "layer_norm beta");
            let inv_d = T::one() / T::of(d as f64);
            let mut out = Tensor::zeros(tx.shape());
            let mut stats = Vec::with_capacity(tx.rows());
            for (row, orow) in tx.data().chunks(d).zip(out.data_mut().chunks_mut(d)) {
                let mean = row.iter().copied().sum::<T>() * inv_d;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
                let rstd = T::one() / (var + eps).sqrt();
                for j in 0..d {
                    orow[j] = (row[j] - mean) * rstd * tg.data()[j] + tb.data()[j];
                }
                stats.push((mean, rstd));
            }
            (out, stats)
        };
        let ng = self.needs(&[x, gamma, beta]);
        self.push(out, Op::LayerNorm { x, gamma, beta, stats }, ng)
    }

    pub fn gelu(&self, x: Var) -> Var {
        let out = self.with(x, |t| t.map(gelu_fwd));
        let ng = self.needs(&[x]);
        self.push(out, Op::Gelu { x }, ng)
    }

    /// Multi-head self-attention over a fused `[B, T, 3d]` q/k/v projection.
    pub fn attention(&self, qkv: Var, heads: usize) -> Var {
        let (out, probs) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[qkv.0].value;
            assert_eq!(t.rank(), 3, "attention expects [B, T, 3d]");
            let (bs, len, three_d) = (t.shape()[0], t.shape()[1], t.shape()[2]);
            assert_eq!(three_d % 3, 0, "attention width");
            let d = three_d / 3;
            assert_eq!(d % heads, 0, "width {d} not divisible by {heads} heads");
            let dh = d / heads;
            let scale = T::one() / T::of(dh as f64).sqrt();
            let mut out = Tensor::zeros(&[bs, len, d]);
            let mut probs = vec![T::zero(); bs * heads * len * len];
            for b in 0..bs {
                let base = b * len * three_d;
                for h in 0..heads {
                    let p_off = (b * heads + h) * len * len;
                    let q = MatRef::new(t.data(), base + h * dh, len, dh, three_d, 1);
                    let k = MatRef::new(t.data(), base + d + h * dh, len, dh, three_d, 1);
                    let v = MatRef::new(t.data(), base + 2 * d + h * dh, len, dh, three_d, 1);
                    gemm(scale, q, k.t(), T::zero(), MatMut::dense(&mut probs, p_off, len, len));
                    for row in probs[p_off..p_off + len * len].chunks_mut(len) {
                        softmax_in_place(row);
                    }
                    gemm(
                        T::one(),
                        MatRef::dense(&probs, p_off, len, len),
                        v,
                        T::zero(),
                        MatMut::new(out.data_mut(), b * len * d + h * dh, len, dh, d, 1),
                    );
                }
            }
            (out, probs)
        };
        let ng = self.needs(&[qkv]);
        self.push(out, Op::Attention { qkv, heads, probs }, ng)
    }

    /// Softmax of `x / tau` over the last axis.
    pub fn softmax(&self, x: Var, tau: T) -> Var {
        let out = self.with(x, |t| {
            let n = t.cols();
            let mut out = t.map(|v| v / tau);
            for row in out.data_mut().chunks_mut(n) {
                softmax_in_place(row);
            }
            out
        });
        let ng = self.needs(&[x]);
        self.push(out, Op::Softmax { x, tau }, ng)
    }

    /// Rows scaled to unit Euclidean norm, with the norm clamped below at 1e-8.
    pub fn l2_normalize(&self, x: Var) -> Var {
        let (out, norms) = self.with(x, |t| {
            let n = t.cols();
            let mut out = t.clone();
            let mut norms = Vec::with_capacity(t.rows());
            for row in out.data_mut().chunks_mut(n) {
                let norm = clamped_norm(row);
                for v in row.iter_mut() {
                    *v /= norm;
                }
                norms.push(norm);
            }
            (out, norms)
        });
        let ng = self.needs(&[x]);
        self.push(out, Op::L2Normalize { x, norms }, ng)
    }

    /// Repeat `x` along a new leading batch axis.
    pub fn broadcast(&self, x: Var, batch: usize) -> Var {
        let out = self.with(x, |t| {
            let mut shape = vec![batch];
            shape.extend_from_slice(t.shape());
            let mut data = Vec::with_capacity(batch * t.numel());
            for _ in 0..batch {
                data.extend_from_slice(t.data());
            }
            Tensor::new(shape, data)
        });
        let ng = self.needs(&[x]);
        self.push(out, Op::Broadcast { x }, ng)
    }

    /// Concatenate rank-3 tensors along axis 1.
    pub fn concat_tokens(&self, parts: &[Var]) -> Var {
        let (out, sizes) = {
            let nodes = self.nodes.borrow();
            let first = &nodes[parts[0].0].value;
            assert_eq!(first.rank(), 3, "concat_tokens expects rank 3");
            let (bs, d) = (first.shape()[0], first.shape()[2]);
            let sizes: Vec<usize> = parts
                .iter()
                .map(|p| {
                    let s = nodes[p.0].value.shape();
                    assert!(s.len() == 3 && s[0] == bs && s[2] == d, "concat_tokens shape {s:?}");
                    s[1]
                })
                .collect();
            let total: usize = sizes.iter().sum();
            let mut data = Vec::with_capacity(bs * total * d);
            for b in 0..bs {
                for (p, &len) in parts.iter().zip(&sizes) {
                    let src = nodes[p.0].value.data();
                    data.extend_from_slice(&src[b * len * d..(b + 1) * len * d]);
                }
            }
            (Tensor::new(vec![bs, total, d], data), sizes)
        };
        let ng = self.needs(parts);
        let parts = parts.iter().copied().zip(sizes).collect();
        self.push(out, Op::Concat { parts }, ng)
    }

    /// Slice `len` tokens starting at `start` along axis 1 of a rank-3 tensor.
    pub fn narrow_tokens(&self, x: Var, start: usize, len: usize) -> Var {
        let out = self.with(x, |t| {
            assert_eq!(t.rank(), 3, "narrow_tokens expects rank 3");
            let (bs, total, d) = (t.shape()[0], t.shape()[1], t.shape()[2]);
            assert!(start + len <= total, "narrow_tokens out of range");
            let mut data = Vec::with_capacity(bs * len * d);
            for b in 0..bs {
                let off = (b * total + start) * d;
                data.extend_from_slice(&t.data()[off..off + len * d]);
            }
            Tensor::new(vec![bs, len, d], data)
        });
        let ng = self.needs(&[x]);
        self.push(out, Op::Narrow { x, start }, ng)
    }

    /// Rows of a rank-2 table selected by `idx`, giving `[idx.len(), d]`.
    pub fn gather_rows(&self, table: Var, idx: &[usize]) -> Var {
        let out = self.with(table, |t| {
            let d = t.cols();
            let mut data = Vec::with_capacity(idx.len() * d);
            for &i in idx {
                assert!(i < t.rows(), "gather index {i} out of range");
                data.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
            }
            Tensor::new(vec![idx.len(), d], data)
        });
        let ng = self.needs(&[table]);
        self.push(out, Op::GatherRows { table, idx: idx.to_vec() }, ng)
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let out = self.with(x, |t| t.clone().reshape(shape));
        let ng = self.needs(&[x]);
        self.push(out, Op::Reshape { x }, ng)
    }

    /// Mean over axis 1 of a rank-3 tensor.
    pub fn mean_tokens(&self, x: Var) -> Var {
        let out = self.with(x, |t| {
            assert_eq!(t.rank(), 3, "mean_tokens expects rank 3");
            let (bs, len, d) = (t.shape()[0], t.shape()[1], t.shape()[2]);
            let inv = T::one() / T::of(len as f64);
            let mut out = Tensor::zeros(&[bs, d]);
            for b in 0..bs {
                for i in 0..len {
                    let row = &t.data()[(b * len + i) * d..(b * len + i + 1) * d];
                    for (o, &v) in out.data_mut()[b * d..(b + 1) * d].iter_mut().zip(row) {
                        *o += v * inv;
                    }
                }
            }
            out
        });
        let ng = self.needs(&[x]);
        self.push(out, Op::MeanTokens { x }, ng)
    }

    pub fn clamp(&self, x: Var, lo: T, hi: T) -> Var {
        let out = self.with(x, |t| t.map(|v| v.max(lo).min(hi)));
        let ng = self.needs(&[x]);
        self.push(out, Op::Clamp { x, lo, hi }, ng)
    }

    /// Mean squared error against a constant target of the same shape.
    pub fn mse(&self, x: Var, target: &Tensor<T>) -> Var {
        let (loss, grad) = self.with(x, |t| {
            assert_eq!(t.shape(), target.shape(), "mse shape");
            objectives::mse_with_grad(t.data(), target.data())
        });
        let shape = self.shape(x);
        self.loss_node(x, loss, Tensor::new(shape, grad))
    }

    /// Mean over rows of `-Σ_k t_k log softmax(x / tau)_k` against constant
    /// targets; `x` is flattened to `[N, K]`.
    pub fn soft_cross_entropy(&self, logits: Var, targets: &Tensor<T>, tau: T) -> Var {
        let (loss, grad) = self.with(logits, |t| {
            assert_eq!(t.numel(), targets.numel(), "soft_cross_entropy shape");
            let z = t.view2();
            let q = ArrayView2::from_shape(z.dim(), targets.data()).expect("target shape");
            objectives::soft_cross_entropy_with_grad(q, z, tau)
        });
        let shape = self.shape(logits);
        let grad = Tensor::new(shape, grad.into_raw_vec_and_offset().0);
        self.loss_node(logits, loss, grad)
    }

    /// KoLeo regularizer averaged over the token sets of a `[B, r, d]` tensor.
    pub fn koleo(&self, x: Var) -> Var {
        let (loss, grad) = self.with(x, |t| {
            assert_eq!(t.rank(), 3, "koleo expects [B, r, d]");
            let (bs, r, d) = (t.shape()[0], t.shape()[1], t.shape()[2]);
            let inv_b = T::one() / T::of(bs as f64);
            let mut loss = T::zero();
            let mut grad = Vec::with_capacity(t.numel());
            for b in 0..bs {
                let set = ArrayView2::from_shape((r, d), &t.data()[b * r * d..(b + 1) * r * d]).unwrap();
                let (l, g) = objectives::koleo_with_grad(set);
                loss += l * inv_b;
                grad.extend(g.iter().map(|&v| v * inv_b));
            }
            (loss, Tensor::new(t.shape().to_vec(), grad))
        });
        self.loss_node(x, loss, grad)
    }

    fn loss_node(&self, x: Var, loss: T, local_grad: Tensor<T>) -> Var {
        let ng = self.needs(&[x]);
        self.push(Tensor::scalar(loss), Op::Loss { x, local_grad }, ng)
    }

    /// `Σ w_i · term_i` over scalar terms.
    pub fn weighted_sum(&self, terms: &[(Var, T)]) -> Var {
        let total = terms
            .iter()
            .map(|&(v, w)| self.item(v) * w)
            .fold(T::zero(), |a, b| a + b);
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let ng = self.needs(&vars);
        self.push(Tensor::scalar(total), Op::WeightedSum { terms: terms.to_vec() }, ng)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.numel(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            if !nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(dout) = grads[i].take() else { continue };
            match &nodes[i].op {
                Op::Leaf | Op::Param => {
                    grads[i] = Some(dout);
                }
                Op::MatMul { a, b, trans_b } => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (m, k) = (ta.rows(), ta.cols());
                    let n = dout.cols();
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        // dA = dOut · Bᵀ where B is b or bᵀ.
                        let bt = if *trans_b {
                            MatRef::dense(tb.data(), 0, n, k)
                        } else {
                            MatRef::dense(tb.data(), 0, k, n).t()
                        };
                        gemm(
                            T::one(),
                            MatRef::dense(dout.data(), 0, m, n),
                            bt,
                            T::one(),
                            MatMut::dense(ga.data_mut(), 0, m, k),
                        );
                    }
                    if let Some(gb) = slot(&mut grads, &nodes, *b) {
                        if *trans_b {
                            gemm(
                                T::one(),
                                MatRef::dense(dout.data(), 0, m, n).t(),
                                MatRef::dense(ta.data(), 0, m, k),
                                T::one(),
                                MatMut::dense(gb.data_mut(), 0, n, k),
                            );
                        } else {
                            gemm(
                                T::one(),
                                MatRef::dense(ta.data(), 0, m, k).t(),
                                MatRef::dense(dout.data(), 0, m, n),
                                T::one(),
                                MatMut::dense(gb.data_mut(), 0, k, n),
                            );
                        }
                    }
                }
                Op::Bmm { a, b, trans_b } => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (bs, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                    let n = dout.shape()[2];
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        for i in 0..bs {
                            let bt = if *trans_b {
                                MatRef::dense(tb.data(), i * n * k, n, k)
                            } else {
                                MatRef::dense(tb.data(), i * k * n, k, n).t()
                            };
                            gemm(
                                T::one(),
                                MatRef::dense(dout.data(), i * m * n, m, n),
                                bt,
                                T::one(),
                                MatMut::dense(ga.data_mut(), i * m * k, m, k),
                            );
                        }
                    }
                    if let Some(gb) = slot(&mut grads, &nodes, *b) {
                        for i in 0..bs {
                            let at = MatRef::dense(ta.data(), i * m * k, m, k);
                            let d = MatRef::dense(dout.data(), i * m * n, m, n);
                            if *trans_b {
                                gemm(T::one(), d.t(), at, T::one(), MatMut::dense(gb.data_mut(), i * n * k, n, k));
                            } else {
                                gemm(T::one(), at.t(), d, T::one(), MatMut::dense(gb.data_mut(), i * k * n, k, n));
                            }
                        }
                    }
                }
                Op::AddBias { x, b } => {
                    if let Some(gb) = slot(&mut grads, &nodes, *b) {
                        let n = gb.numel();
                        for row in dout.data().chunks(n) {
                            for (g, &d) in gb.data_mut().iter_mut().zip(row) {
                                *g += d;
                            }
                        }
                    }
                    accumulate(&mut grads, &nodes, *x, dout);
                }
                Op::Add { a, b } => {
                    if nodes[b.0].needs_grad {
                        accumulate(&mut grads, &nodes, *b, dout.clone());
                    }
                    accumulate(&mut grads, &nodes, *a, dout);
                }
                Op::Sub { a, b } => {
                    if nodes[b.0].needs_grad {
                        accumulate(&mut grads, &nodes, *b, dout.map(|v| -v));
                    }
                    accumulate(&mut grads, &nodes, *a, dout);
                }
                Op::Mul { a, b } => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        for ((g, &d), &y) in ga.data_mut().iter_mut().zip(dout.data()).zip(tb.data()) {
                            *g += d * y;
                        }
                    }
                    if let Some(gb) = slot(&mut grads, &nodes, *b) {
                        for ((g, &d), &y) in gb.data_mut().iter_mut().zip(dout.data()).zip(ta.data()) {
                            *g += d * y;
                        }
                    }
                }
                Op::Scale { x, s } => {
                    let s = *s;
                    accumulate(&mut grads, &nodes, *x, dout.map(|v| v * s));
                }
                Op::LayerNorm { x, gamma, beta, stats } => {
                    let (tx, tg) = (&nodes[x.0].value, &nodes[gamma.0].value);
                    let d = tx.cols();
                    let inv_d = T::one() / T::of(d as f64);
                    if let Some(gg) = slot(&mut grads, &nodes, *gamma) {
                        for ((row, drow), &(mean, rstd)) in
                            tx.data().chunks(d).zip(dout.data().chunks(d)).zip(stats)
                        {
                            for j in 0..d {
                                gg.data_mut()[j] += drow[j] * (row[j] - mean) * rstd;
                            }
                        }
                    }
                    if let Some(gb) = slot(&mut grads, &nodes, *beta) {
                        for drow in dout.data().chunks(d) {
                            for (g, &v) in gb.data_mut().iter_mut().zip(drow) {
                                *g += v;
                            }
                        }
                    }
                    if let Some(gx) = slot(&mut grads, &nodes, *x) {
                        let mut dxhat = vec![T::zero(); d];
                        for (((row, drow), grow), &(mean, rstd)) in tx
                            .data()
                            .chunks(d)
                            .zip(dout.data().chunks(d))
                            .zip(gx.data_mut().chunks_mut(d))
                            .zip(stats)
                        {
                            let mut s1 = T::zero();
                            let mut s2 = T::zero();
                            for j in 0..d {
                                dxhat[j] = drow[j] * tg.data()[j];
                                let xhat = (row[j] - mean) * rstd;
                                s1 += dxhat[j];
                                s2 += dxhat[j] * xhat;
                            }
                            s1 *= inv_d;
                            s2 *= inv_d;
                            for j in 0..d {
                                let xhat = (row[j] - mean) * rstd;
                                grow[j] += rstd * (dxhat[j] - s1 - xhat * s2);
                            }
                        }
                    }
                }
                Op::Gelu { x } => {
                    let tx = &nodes[x.0].value;
                    if let Some(gx) = slot(&mut grads, &nodes, *x) {
                        for ((g, &d), &v) in gx.data_mut().iter_mut().zip(dout.data()).zip(tx.data()) {
                            *g += d * gelu_grad(v);
                        }
                    }
                }
                Op::Attention { qkv, heads, probs } => {
                    let t = &nodes[qkv.0].value;
                    let (bs, len, three_d) = (t.shape()[0], t.shape()[1], t.shape()[2]);
                    let d = three_d / 3;
                    let dh = d / heads;
                    let scale = T::one() / T::of(dh as f64).sqrt();
                    if let Some(gq) = slot(&mut grads, &nodes, *qkv) {
                        let mut dp = vec![T::zero(); len * len];
                        for b in 0..bs {
                            let base = b * len * three_d;
                            for h in 0..*heads {
                                let p_off = (b * heads + h) * len * len;
                                let p = MatRef::dense(probs, p_off, len, len);
                                let d_o = MatRef::new(dout.data(), b * len * d + h * dh, len, dh, d, 1);
                                let q = MatRef::new(t.data(), base + h * dh, len, dh, three_d, 1);
                                let k = MatRef::new(t.data(), base + d + h * dh, len, dh, three_d, 1);
                                let v = MatRef::new(t.data(), base + 2 * d + h * dh, len, dh, three_d, 1);
                                // dV = Pᵀ dO
                                gemm(
                                    T::one(),
                                    p.t(),
                                    d_o,
                                    T::one(),
                                    MatMut::new(gq.data_mut(), base + 2 * d + h * dh, len, dh, three_d, 1),
                                );
                                // dP = dO Vᵀ, then softmax backward in place.
                                gemm(T::one(), d_o, v.t(), T::zero(), MatMut::dense(&mut dp, 0, len, len));
                                for (drow, prow) in dp.chunks_mut(len).zip(probs[p_off..p_off + len * len].chunks(len)) {
                                    let dot: T = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                                    for (dv, &pv) in drow.iter_mut().zip(prow) {
                                        *dv = pv * (*dv - dot);
                                    }
                                }
                                let ds = MatRef::dense(&dp, 0, len, len);
                                gemm(
                                    scale,
                                    ds,
                                    k,
                                    T::one(),
                                    MatMut::new(gq.data_mut(), base + h * dh, len, dh, three_d, 1),
                                );
                                gemm(
                                    scale,
                                    ds.t(),
                                    q,
                                    T::one(),
                                    MatMut::new(gq.data_mut(), base + d + h * dh, len, dh, three_d, 1),
                                );
                            }
                        }
                    }
                }
                Op::Softmax { x, tau } => {
                    let y = &nodes[i].value;
                    let n = y.cols();
                    if let Some(gx) = slot(&mut grads, &nodes, *x) {
                        for ((grow, drow), yrow) in gx
                            .data_mut()
                            .chunks_mut(n)
                            .zip(dout.data().chunks(n))
                            .zip(y.data().chunks(n))
                        {
                            let dot: T = drow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                            for j in 0..n {
                                grow[j] += yrow[j] * (drow[j] - dot) / *tau;
                            }
                        }
                    }
                }
                Op::L2Normalize { x, norms } => {
                    let y = &nodes[i].value;
                    let n = y.cols();
                    let floor = T::of(1e-8);
                    if let Some(gx) = slot(&mut grads, &nodes, *x) {
                        for (((grow, drow), yrow), &norm) in gx
                            .data_mut()
                            .chunks_mut(n)
                            .zip(dout.data().chunks(n))
                            .zip(y.data().chunks(n))
                            .zip(norms)
                        {
                            let dot: T = if norm > floor {
                                drow.iter().zip(yrow).map(|(&a, &b)| a * b).sum()
                            } else {
                                T::zero()
                            };
                            for j in 0..n {
                                grow[j] += (drow[j] - yrow[j] * dot) / norm;
                            }
                        }
                    }
                }
                Op::Broadcast { x } => {
                    if let Some(gx) = slot(&mut grads, &nodes, *x) {
                        let n = gx.numel();
                        for chunk in dout.data().chunks(n) {
                            for (g, &v) in gx.data_mut().iter_mut().zip(chunk) {
                                *g += v;
                            }
                        }
                    }
                }
                Op::Concat { parts } => {
                    let (bs, total, d) = (dout.shape()[0], dout.shape()[1], dout.shape()[2]);
                    let mut offset = 0;
                    for &(p, len) in parts {
                        if let Some(gp) = slot(&mut grads, &nodes, p) {
                            for b in 0..bs {
                                let src = &dout.data()[(b * total + offset) * d..(b * total + offset + len) * d];
                                for (g, &v) in gp.data_mut()[b * len * d..(b + 1) * len * d].iter_mut().zip(src) {
                                    *g += v;
                                }
                            }
                        }
                        offset += len;
                    }
                }
                Op::Narrow { x, start } => {
                    let (bs, len, d) = (dout.shape()[0], dout.shape()[1], dout.shape()[2]);
                    if let Some(gx) = slot(&mut grads, &nodes, *x) {
                        let total = gx.shape()[1];
                        for b in 0..bs {
                            let dst = &mut gx.data_mut()[(b * total + start) * d..(b * total + start + len) * d];
                            for (g, &v) in dst.iter_mut().zip(&dout.data()[b * len * d..(b + 1) * len * d]) {
                                *g += v;
                            }
                        }
                    }
                }
                Op::GatherRows { table, idx } => {
                    if let Some(gt) = slot(&mut grads, &nodes, *table) {
                        let d = gt.cols();
                        for (r, &row) in idx.iter().enumerate() {
                            for j in 0..d {
                                gt.data_mut()[row * d + j] += dout.data()[r * d + j];
                            }
                        }
                    }
                }
                Op::Reshape { x } => {
                    let shape = nodes[x.0].value.shape().to_vec();
                    accumulate(&mut grads, &nodes, *x, dout.reshape(&shape));
                }
                Op::MeanTokens { x } => {
                    if let Some(gx) = slot(&mut grads, &nodes, *x) {
                        let (bs, len, d) = (gx.shape()[0], gx.shape()[1], gx.shape()[2]);
                        let inv = T::one() / T::of(len as f64);
                        for b in 0..bs {
                            for t in 0..len {
                                for j in 0..d {
                                    gx.data_mut()[(b * len + t) * d + j] += dout.data()[b * d + j] * inv;
                                }
                            }
                        }
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    let tx = &nodes[x.0].value;
                    if let Some(gx) = slot(&mut grads, &nodes, *x) {
                        for ((g, &d), &v) in gx.data_mut().iter_mut().zip(dout.data()).zip(tx.data()) {
                            if v >= *lo && v <= *hi {
                                *g += d;
                            }
                        }
                    }
                }
                Op::Loss { x, local_grad } => {
                    let s = dout.item();
                    if let Some(gx) = slot(&mut grads, &nodes, *x) {
                        for (g, &v) in gx.data_mut().iter_mut().zip(local_grad.data()) {
                            *g += s * v;
                        }
                    }
                }
                Op::WeightedSum { terms } => {
                    let s = dout.item();
                    for &(v, w) in terms {
                        if nodes[v.0].needs_grad {
                            accumulate(&mut grads, &nodes, v, Tensor::scalar(s * w));
                        }
                    }
                }
            }
        }

        let params = self
            .param_vars
            .borrow()
            .iter()
            .map(|(&id, &v)| (id, v))
            .collect();
        Grads { grads, params }
    }
}

fn slot<'a, T: Real>(grads: &'a mut [Option<Tensor<T>>], nodes: &[Node<T>], v: Var) -> Option<&'a mut Tensor<T>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape())))
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], nodes: &[Node<T>], v: Var, g: Tensor<T>) {
    if !nodes[v.0].needs_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        empty => *empty = Some(g),
    }
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn clamped_norm<T: Real>(row: &[T]) -> T {
    row.iter().map(|&v| v * v).sum::<T>().sqrt().max(T::of(1e-8))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_fwd<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of d(sum(w ⊙ f(x)))/dx for a graph builder.
    fn check(shapes: &[&[usize]], build: impl Fn(&Graph<f64>, &[Var]) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
        let probe_shape = {
            let g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
            let y = build(&g, &vars);
            g.shape(y)
        };
        let w = rand_tensor(&mut rng, &probe_shape);
        let eval = |inputs: &[Tensor<f64>]| -> f64 {
            let g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
            let y = build(&g, &vars);
            g.with(y, |t| t.data().iter().zip(w.data()).map(|(a, b)| a * b).sum())
        };
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let y = build(&g, &vars);
        let wv = g.constant(w.clone());
        let prod = g.mul(y, wv);
        let flat = g.reshape(prod, &[1, w.numel()]);
        let ones = g.constant(Tensor::full(&[w.numel(), 1], 1.0));
        let total = g.matmul(flat, ones, false);
        let total = g.reshape(total, &[]);
        let grads = g.backward(total);
        for (k, v) in vars.iter().enumerate() {
            let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
            for idx in 0..inputs[k].numel() {
                let h = 1e-6;
                let mut plus = inputs.clone();
                plus[k].data_mut()[idx] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[idx] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[idx];
                let denom = a.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (a - numeric).abs() / denom < 1e-5,
                    "input {k} coord {idx}: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn matmul_grad() {
        check(&[&[2, 3, 4], &[4, 5]], |g, v| g.matmul(v[0], v[1], false));
        check(&[&[3, 4], &[5, 4]], |g, v| g.matmul(v[0], v[1], true));
    }

    #[test]
    fn bmm_grad() {
        check(&[&[2, 3, 4], &[2, 4, 5]], |g, v| g.bmm(v[0], v[1], false));
        check(&[&[2, 3, 4], &[2, 5, 4]], |g, v| g.bmm(v[0], v[1], true));
    }

    #[test]
    fn elementwise_grads() {
        check(&[&[3, 4], &[4]], |g, v| g.add_bias(v[0], v[1]));
        check(&[&[3, 4], &[3, 4]], |g, v| g.add(v[0], v[1]));
        check(&[&[3, 4], &[3, 4]], |g, v| g.sub(v[0], v[1]));
        check(&[&[3, 4], &[3, 4]], |g, v| g.mul(v[0], v[1]));
        check(&[&[3, 4]], |g, v| g.scale(v[0], 0.7));
        check(&[&[3, 4]], |g, v| g.gelu(v[0]));
    }

    #[test]
    fn layer_norm_grad() {
        check(&[&[2, 3, 6], &[6], &[6]], |g, v| g.layer_norm(v[0], v[1], v[2]));
    }

    #[test]
    fn attention_grad() {
        check(&[&[2, 5, 12]], |g, v| g.attention(v[0], 2));
    }

    #[test]
    fn softmax_and_normalize_grads() {
        check(&[&[3, 5]], |g, v| g.softmax(v[0], 0.3));
        check(&[&[3, 5]], |g, v| g.l2_normalize(v[0]));
    }

    #[test]
    fn token_plumbing_grads() {
        check(&[&[3, 4]], |g, v| g.broadcast(v[0], 2));
        check(&[&[2, 1, 4], &[2, 3, 4]], |g, v| g.concat_tokens(&[v[0], v[1]]));
        check(&[&[2, 5, 4]], |g, v| g.narrow_tokens(v[0], 1, 3));
        check(&[&[5, 3]], |g, v| g.gather_rows(v[0], &[4, 0, 4, 2]));
        check(&[&[2, 5, 4]], |g, v| g.mean_tokens(v[0]));
        check(&[&[2, 6]], |g, v| g.reshape(v[0], &[3, 4]));
    }

    #[test]
    fn loss_grads() {
        let target = Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64) / 12.0).collect());
        check(&[&[3, 4]], |g, v| g.mse(v[0], &target));
        let mut t = Tensor::zeros(&[3, 4]);
        for (i, x) in t.data_mut().iter_mut().enumerate() {
            *x = ((i * 7) % 5) as f64;
        }
        let rows: Vec<f64> = t.data().chunks(4).map(|r| r.iter().sum()).collect();
        for (i, x) in t.data_mut().iter_mut().enumerate() {
            *x /= rows[i / 4];
        }
        check(&[&[3, 4]], |g, v| g.soft_cross_entropy(v[0], &t, 0.5));
        check(&[&[2, 4, 3]], |g, v| g.koleo(v[0]));
        check(&[&[3, 4], &[3, 4]], |g, v| {
            let a = g.mse(v[0], &target);
            let b = g.mse(v[1], &target);
            g.weighted_sum(&[(a, 0.3), (b, 2.0)])
        });
    }

    #[test]
    fn shared_param_accumulates() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let g = Graph::<f64>::new();
        let w1 = g.param(&store, id);
        let w2 = g.param(&store, id);
        assert_eq!(w1, w2);
        let s = g.add(w1, w2);
        let loss = g.mse(s, &Tensor::zeros(&[2, 2]));
        let grads = g.backward(loss);
        let pg = grads.param_grads(&store);
        // d/dw mean((2w)^2) = 8w/4
        assert_eq!(pg[0].data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn constants_receive_no_grad() {
        let g = Graph::<f64>::new();
        let c = g.constant(Tensor::full(&[2, 2], 1.0));
        let x = g.input(Tensor::full(&[2, 2], 2.0));
        let y = g.mul(c, x);
        let loss = g.mse(y, &Tensor::zeros(&[2, 2]));
        let grads = g.backward(loss);
        assert!(grads.get(c).is_none());
        assert!(grads.get(x).is_some());
    }
}
