//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node holding its output value and
//! a closure mapping the output gradient to parent gradients. Graphs are built
//! per forward pass and dropped afterwards. Inference graphs
//! ([`Graph::inference`]) skip the closures entirely.

use std::collections::HashMap;

use crate::nn::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

type BackwardFn<T> = Box<dyn Fn(&[&Tensor<T>], &Tensor<T>, &Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<Var>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    param: Option<ParamId>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    params: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of every parameter that took part in the pass.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().filter_map(|&(id, i)| self.grads[i].as_ref().map(|g| (id, g)))
    }

    pub fn into_params(self) -> Vec<(ParamId, Tensor<T>)> {
        let mut grads = self.grads;
        self.params.into_iter().filter_map(|(id, i)| grads[i].take().map(|g| (id, g))).collect()
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// A graph that records gradients.
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grad_enabled: true, params: HashMap::new() }
    }

    /// A graph that only evaluates.
    pub fn inference() -> Self {
        Graph { grad_enabled: false, ..Self::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn into_value(mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(&[0]))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: requires_grad && self.grad_enabled,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false, None)
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true, None)
    }

    /// Leaf for a trainable parameter; repeated calls reuse the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone(), true, Some(id));
        self.params.insert(id, v);
        v
    }

    /// Records a node computed outside the built-in ops. `backward` receives
    /// the parent values, the output value and the output gradient, and
    /// returns one optional gradient per parent.
    pub fn custom(
        &mut self,
        parents: &[Var],
        value: Tensor<T>,
        backward: impl Fn(&[&Tensor<T>], &Tensor<T>, &Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var {
        let requires_grad =
            self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.to_vec(),
            backward: if requires_grad { Some(Box::new(backward)) } else { None },
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Backpropagates from a single-element `output`.
    pub fn backward(&self, output: Var) -> Grads<T> {
        assert_eq!(self.value(output).len(), 1, "backward needs a scalar output");
        let seed = Tensor::ones(self.shape(output));
        self.backward_seeded(output, seed)
    }

    /// Backpropagates an explicit output gradient.
    pub fn backward_seeded(&self, output: Var, seed: Tensor<T>) -> Grads<T> {
        assert_eq!(seed.shape(), self.shape(output), "seed gradient shape mismatch");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else { continue };
            let Some(grad) = grads[i].take() else { continue };
            let parent_values: Vec<&Tensor<T>> =
                node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let parent_grads = backward(&parent_values, &node.value, &grad);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.nodes[p.0].value.shape());
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        let params = self.nodes.iter().enumerate().filter_map(|(i, n)| n.param.map(|id| (id, i))).collect();
        Grads { grads, params }
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = broadcast_zip(self.value(a), self.value(b), |x, y| x + y);
        self.custom(&[a, b], value, |p, _, g| {
            vec![Some(reduce_to(g, p[0].shape())), Some(reduce_to(g, p[1].shape()))]
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = broadcast_zip(self.value(a), self.value(b), |x, y| x - y);
        self.custom(&[a, b], value, |p, _, g| {
            vec![Some(reduce_to(g, p[0].shape())), Some(reduce_to(&g.map(|v| -v), p[1].shape()))]
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = broadcast_zip(self.value(a), self.value(b), |x, y| x * y);
        self.custom(&[a, b], value, |p, _, g| {
            let ga = broadcast_zip3(g, p[1], |g, y| g * y);
            let gb = broadcast_zip3(g, p[0], |g, x| g * x);
            vec![Some(reduce_to(&ga, p[0].shape())), Some(reduce_to(&gb, p[1].shape()))]
        })
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let value = self.value(x).map(|v| v * scale + shift);
        self.custom(&[x], value, move |_, _, g| vec![Some(g.scale(scale))])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        self.custom(&[x], value, |p, _, g| {
            vec![Some(g.zip_map(p[0], |g, x| if x > T::zero() { g } else { T::zero() }))]
        })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.custom(&[x], value, |_, y, g| vec![Some(g.zip_map(y, |g, y| g * y * (T::one() - y)))])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * sigmoid(v));
        self.custom(&[x], value, |p, _, g| {
            vec![Some(g.zip_map(p[0], |g, x| {
                let s = sigmoid(x);
                g * s * (T::one() + x * (T::one() - s))
            }))]
        })
    }

    /// Elementwise `min(x, ceiling)`; the gradient flows where `x < ceiling`.
    pub fn clamp_max(&mut self, x: Var, ceiling: T) -> Var {
        let value = self.value(x).map(|v| v.min(ceiling));
        self.custom(&[x], value, move |p, _, g| {
            vec![Some(g.zip_map(p[0], |g, x| if x < ceiling { g } else { T::zero() }))]
        })
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.custom(&[x], value, |p, _, g| vec![Some(Tensor::full(p[0].shape(), g.data()[0]))])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = T::of_usize(self.value(x).len());
        let s = self.sum_all(x);
        self.affine(s, T::one() / n, T::zero())
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mse shape mismatch");
        let n = T::of_usize(va.len());
        let value =
            Tensor::scalar(va.data().iter().zip(vb.data()).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>() / n);
        self.custom(&[a, b], value, move |p, _, g| {
            let k = T::of(2.0) * g.data()[0] / n;
            let d = p[0].zip_map(p[1], |x, y| (x - y) * k);
            let nd = d.map(|v| -v);
            vec![Some(d), Some(nd)]
        })
    }

    /// Mean over every axis but the first: `[N, ...] -> [N]`.
    pub fn mean_per_item(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = v.shape()[0];
        let per = v.len() / n;
        let inv = T::one() / T::of_usize(per);
        let value = Tensor::from_fn(&[n], |i| v.item(i).iter().copied().sum::<T>() * inv);
        self.custom(&[x], value, move |p, _, g| {
            let mut out = Tensor::zeros(p[0].shape());
            for i in 0..n {
                let gi = g.data()[i] * inv;
                out.item_mut(i).iter_mut().for_each(|o| *o = gi);
            }
            vec![Some(out)]
        })
    }

    /// Spatial mean: `[N, C, H, W] -> [N, C, 1, 1]`.
    pub fn mean_hw(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let hw = h * w;
        let inv = T::one() / T::of_usize(hw);
        let v = self.value(x);
        let value = Tensor::from_fn(&[n, c, 1, 1], |i| {
            v.data()[i * hw..(i + 1) * hw].iter().copied().sum::<T>() * inv
        });
        self.custom(&[x], value, move |p, _, g| {
            let mut out = Tensor::zeros(p[0].shape());
            for (i, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
                let gi = g.data()[i] * inv;
                chunk.iter_mut().for_each(|o| *o = gi);
            }
            vec![Some(out)]
        })
    }

    // ---- shape -------------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).clone().reshaped(shape).expect("reshape size mismatch");
        self.custom(&[x], value, |p, _, g| {
            vec![Some(g.clone().reshaped(p[0].shape()).expect("reshape grad"))]
        })
    }

    /// Swaps the last two axes of a rank-3 tensor.
    pub fn transpose12(&mut self, x: Var) -> Var {
        let value = transpose12(self.value(x));
        self.custom(&[x], value, |_, _, g| vec![Some(transpose12(g))])
    }

    /// Concatenation along axis 1.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&v| self.value(v)).collect();
        let value = concat1(&values);
        let widths: Vec<usize> = values.iter().map(|t| t.shape()[1]).collect();
        self.custom(parts, value, move |p, _, g| {
            let mut start = 0;
            widths
                .iter()
                .zip(p)
                .map(|(&w, part)| {
                    let out = narrow1(g, start, w, part.shape());
                    start += w;
                    Some(out)
                })
                .collect()
        })
    }

    /// `x[:, start..start + len, ...]`.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x);
        let mut shape = v.shape().to_vec();
        shape[1] = len;
        let value = narrow1(v, start, len, &shape);
        self.custom(&[x], value, move |p, _, g| {
            let mut out = Tensor::zeros(p[0].shape());
            scatter1(&mut out, g, start);
            vec![Some(out)]
        })
    }

    /// Nearest-neighbour upsampling by `factor` of an `[N, C, H, W]` tensor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let (ho, wo) = (h * factor, w * factor);
        let v = self.value(x);
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        for (src, dst) in v.data().chunks(h * w).zip(out.data_mut().chunks_mut(ho * wo)) {
            for y in 0..ho {
                for xx in 0..wo {
                    dst[y * wo + xx] = src[(y / factor) * w + xx / factor];
                }
            }
        }
        self.custom(&[x], out, move |p, _, g| {
            let mut dx = Tensor::zeros(p[0].shape());
            for (dst, src) in dx.data_mut().chunks_mut(h * w).zip(g.data().chunks(ho * wo)) {
                for y in 0..ho {
                    for xx in 0..wo {
                        dst[(y / factor) * w + xx / factor] += src[y * wo + xx];
                    }
                }
            }
            vec![Some(dx)]
        })
    }

    /// Sub-pixel rearrangement `[N, C*s*s, H, W] -> [N, C, H*s, W*s]` with
    /// `out[c, y*s+dy, x*s+dx] = in[c*s*s + dy*s + dx, y, x]`.
    pub fn pixel_shuffle(&mut self, x: Var, s: usize) -> Var {
        let value = pixel_shuffle_nchw(self.value(x), s);
        self.custom(&[x], value, move |_, _, g| vec![Some(pixel_unshuffle_nchw(g, s))])
    }

    // ---- linear algebra ----------------------------------------------------

    /// Batched product of `[B, M, K]` and `[B, K, N]` (rank 2 is a batch of one).
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = bmm(self.value(a), false, self.value(b), false);
        self.custom(&[a, b], value, |p, _, g| {
            let ga = bmm(g, false, p[1], true);
            let gb = bmm(p[0], true, g, false);
            vec![Some(ga), Some(gb)]
        })
    }

    /// `x W^T + b` for `x: [N, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let wv = self.value(weight);
        let bv = self.value(bias);
        let (n, fin) = (xv.shape()[0], xv.shape()[1]);
        let fout = wv.shape()[0];
        assert_eq!(wv.shape(), &[fout, fin], "linear weight shape");
        let mut out = Tensor::zeros(&[n, fout]);
        for row in out.data_mut().chunks_mut(fout) {
            row.copy_from_slice(bv.data());
        }
        T::gemm(n, fin, fout, T::one(), xv.data(), (fin as isize, 1), wv.data(), (1, fin as isize), T::one(), out.data_mut(), (fout as isize, 1));
        self.custom(&[x, weight, bias], out, move |p, _, g| {
            let mut gx = Tensor::zeros(&[n, fin]);
            T::gemm(n, fout, fin, T::one(), g.data(), (fout as isize, 1), p[1].data(), (fin as isize, 1), T::zero(), gx.data_mut(), (fin as isize, 1));
            let mut gw = Tensor::zeros(&[fout, fin]);
            T::gemm(fout, n, fin, T::one(), g.data(), (1, fout as isize), p[0].data(), (fin as isize, 1), T::zero(), gw.data_mut(), (fin as isize, 1));
            let mut gb = Tensor::zeros(&[fout]);
            for row in g.data().chunks(fout) {
                for (b, &v) in gb.data_mut().iter_mut().zip(row) {
                    *b += v;
                }
            }
            vec![Some(gx), Some(gw), Some(gb)]
        })
    }

    /// 2D convolution (cross-correlation) of `[N, C, H, W]` with `[O, C, kh, kw]`
    /// weights, zero padding `pad` on every side.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Var {
        let spec = {
            let (n, c, h, w) = self.value(x).dims4();
            let ws = self.value(weight).shape();
            assert_eq!(ws.len(), 4, "conv weight must be [O, C, kh, kw]");
            assert_eq!(ws[1], c, "conv input has {c} channels, weight expects {}", ws[1]);
            ConvSpec::new(n, c, h, w, ws[0], ws[2], ws[3], stride, pad)
        };
        let mut out = conv_forward(&spec, self.value(x), self.value(weight));
        if let Some(b) = bias {
            let bv = self.value(b);
            let hw = spec.ho * spec.wo;
            for (i, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
                let bias = bv.data()[i % spec.o];
                chunk.iter_mut().for_each(|v| *v += bias);
            }
        }
        let mut parents = vec![x, weight];
        parents.extend(bias);
        let has_bias = bias.is_some();
        self.custom(&parents, out, move |p, _, g| {
            let (gx, gw) = conv_backward(&spec, p[0], p[1], g);
            let mut grads = vec![Some(gx), Some(gw)];
            if has_bias {
                let hw = spec.ho * spec.wo;
                let mut gb = Tensor::zeros(&[spec.o]);
                for (i, chunk) in g.data().chunks(hw).enumerate() {
                    gb.data_mut()[i % spec.o] += chunk.iter().copied().sum::<T>();
                }
                grads.push(Some(gb));
            }
            grads
        })
    }

    /// Group normalization of `[N, C, H, W]` with per-channel affine `gamma`, `beta`.
    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: T) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert!(c % groups == 0, "{c} channels not divisible into {groups} groups");
        let block = (c / groups) * h * w;
        let hw = h * w;
        let xv = self.value(x);
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let mut xhat = Tensor::zeros(xv.shape());
        let mut inv_std = Vec::with_capacity(n * groups);
        for (src, dst) in xv.data().chunks(block).zip(xhat.data_mut().chunks_mut(block)) {
            let m = T::of_usize(block);
            let mean = src.iter().copied().sum::<T>() / m;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * inv;
            }
        }
        let mut out = xhat.clone();
        for (i, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
            let ch = i % c;
            chunk.iter_mut().for_each(|v| *v = *v * gv[ch] + bv[ch]);
        }
        self.custom(&[x, gamma, beta], out, move |p, _, g| {
            let gamma = p[1].data();
            let mut gx = Tensor::zeros(p[0].shape());
            let mut ggamma = Tensor::zeros(&[c]);
            let mut gbeta = Tensor::zeros(&[c]);
            let cpg = c / groups;
            for blk in 0..n * groups {
                let base = blk * block;
                let inv = inv_std[blk];
                let m = T::of_usize(block);
                let mut sum_d = T::zero();
                let mut sum_dx = T::zero();
                for j in 0..block {
                    let ch = (blk % groups) * cpg + j / hw;
                    let dy = g.data()[base + j];
                    let xh = xhat.data()[base + j];
                    ggamma.data_mut()[ch] += dy * xh;
                    gbeta.data_mut()[ch] += dy;
                    let d = dy * gamma[ch];
                    sum_d += d;
                    sum_dx += d * xh;
                }
                for j in 0..block {
                    let ch = (blk % groups) * cpg + j / hw;
                    let d = g.data()[base + j] * gamma[ch];
                    let xh = xhat.data()[base + j];
                    gx.data_mut()[base + j] = inv / m * (m * d - sum_d - xh * sum_dx);
                }
            }
            vec![Some(gx), Some(ggamma), Some(gbeta)]
        })
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let d = *v.shape().last().expect("softmax of scalar");
        let mut out = v.clone();
        for row in out.data_mut().chunks_mut(d) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut s = T::zero();
            for e in row.iter_mut() {
                *e = (*e - m).exp();
                s += *e;
            }
            let inv = T::one() / s;
            row.iter_mut().for_each(|e| *e *= inv);
        }
        self.custom(&[x], out, move |_, y, g| {
            let mut gx = g.clone();
            for (grow, yrow) in gx.data_mut().chunks_mut(d).zip(y.data().chunks(d)) {
                let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                for (gv, &yv) in grow.iter_mut().zip(yrow) {
                    *gv = yv * (*gv - dot);
                }
            }
            vec![Some(gx)]
        })
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

// ---- broadcasting helpers --------------------------------------------------

fn padded_shape(shape: &[usize], rank: usize) -> Vec<usize> {
    let mut out = vec![1; rank - shape.len()];
    out.extend_from_slice(shape);
    out
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let rank = a.len().max(b.len());
    let (pa, pb) = (padded_shape(a, rank), padded_shape(b, rank));
    pa.iter()
        .zip(&pb)
        .map(|(&x, &y)| {
            assert!(x == y || x == 1 || y == 1, "cannot broadcast {a:?} with {b:?}");
            x.max(y)
        })
        .collect()
}

/// Row-major strides of `shape` viewed inside `out_shape`, zero on broadcast axes.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let padded = padded_shape(shape, out_shape.len());
    let mut strides = vec![0; padded.len()];
    let mut acc = 1;
    for i in (0..padded.len()).rev() {
        strides[i] = if padded[i] == 1 && out_shape[i] != 1 { 0 } else { acc };
        acc *= padded[i];
    }
    strides
}

/// Visits every output index with the matching offsets into `a` and `b`.
fn for_each_broadcast(out_shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total: usize = out_shape.iter().product();
    if total == 0 {
        return;
    }
    let rank = out_shape.len();
    let mut idx = vec![0; rank];
    let (mut oa, mut ob) = (0, 0);
    for o in 0..total {
        f(o, oa, ob);
        for d in (0..rank).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            oa -= sa[d] * idx[d];
            ob -= sb[d] * idx[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn broadcast_zip<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let shape = broadcast_shape(a.shape(), b.shape());
    let (sa, sb) = (broadcast_strides(a.shape(), &shape), broadcast_strides(b.shape(), &shape));
    let mut out = Tensor::zeros(&shape);
    let (ad, bd) = (a.data(), b.data());
    let od = out.data_mut();
    for_each_broadcast(&shape, &sa, &sb, |o, ia, ib| od[o] = f(ad[ia], bd[ib]));
    out
}

/// `f(g, y)` where `g` has the full output shape and `y` broadcasts into it.
fn broadcast_zip3<T: Scalar>(g: &Tensor<T>, y: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    if g.shape() == y.shape() {
        return g.zip_map(y, f);
    }
    let shape = g.shape().to_vec();
    let sg = broadcast_strides(&shape, &shape);
    let sy = broadcast_strides(y.shape(), &shape);
    let mut out = Tensor::zeros(&shape);
    let (gd, yd) = (g.data(), y.data());
    let od = out.data_mut();
    for_each_broadcast(&shape, &sg, &sy, |o, ig, iy| od[o] = f(gd[ig], yd[iy]));
    out
}

/// Sums `g` over the axes on which `shape` was broadcast.
pub(crate) fn reduce_to<T: Scalar>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let out_shape = g.shape().to_vec();
    let st = broadcast_strides(shape, &out_shape);
    let sg = broadcast_strides(&out_shape, &out_shape);
    let mut out = Tensor::zeros(shape);
    let gd = g.data();
    let od = out.data_mut();
    for_each_broadcast(&out_shape, &st, &sg, |_, it, ig| od[it] += gd[ig]);
    out
}

fn transpose12<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    assert_eq!(s.len(), 3, "transpose12 expects rank 3");
    let (b, m, n) = (s[0], s[1], s[2]);
    let mut out = Tensor::zeros(&[b, n, m]);
    let (src, dst) = (x.data(), out.data_mut());
    for bi in 0..b {
        let base = bi * m * n;
        for i in 0..m {
            for j in 0..n {
                dst[base + j * m + i] = src[base + i * n + j];
            }
        }
    }
    out
}

fn outer_inner(shape: &[usize]) -> (usize, usize) {
    (shape[0], shape[2..].iter().product())
}

fn concat1<T: Scalar>(parts: &[&Tensor<T>]) -> Tensor<T> {
    let first = parts[0].shape();
    let (outer, inner) = outer_inner(first);
    let total: usize = parts.iter().map(|p| p.shape()[1]).sum();
    for p in parts {
        assert_eq!(p.shape()[0], outer, "concat batch mismatch");
        assert_eq!(&p.shape()[2..], &first[2..], "concat trailing dims mismatch");
    }
    let mut shape = first.to_vec();
    shape[1] = total;
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let w = p.shape()[1] * inner;
            data.extend_from_slice(&p.data()[o * w..(o + 1) * w]);
        }
    }
    Tensor::new(&shape, data).expect("concat size")
}

fn narrow1<T: Scalar>(x: &Tensor<T>, start: usize, len: usize, shape: &[usize]) -> Tensor<T> {
    let (outer, inner) = outer_inner(x.shape());
    let width = x.shape()[1];
    assert!(start + len <= width, "narrow out of range");
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * width + start) * inner;
        data.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    Tensor::new(shape, data).expect("narrow size")
}

fn scatter1<T: Scalar>(out: &mut Tensor<T>, part: &Tensor<T>, start: usize) {
    let (outer, inner) = outer_inner(out.shape());
    let width = out.shape()[1];
    let len = part.shape()[1];
    for o in 0..outer {
        let base = (o * width + start) * inner;
        out.data_mut()[base..base + len * inner]
            .copy_from_slice(&part.data()[o * len * inner..(o + 1) * len * inner]);
    }
}

pub(crate) fn pixel_shuffle_nchw<T: Scalar>(x: &Tensor<T>, s: usize) -> Tensor<T> {
    let (n, cs, h, w) = x.dims4();
    assert!(cs % (s * s) == 0, "pixel_shuffle: {cs} channels not divisible by {}", s * s);
    let c = cs / (s * s);
    let (ho, wo) = (h * s, w * s);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let (src, dst) = (x.data(), out.data_mut());
    for ni in 0..n {
        for ci in 0..c {
            for dy in 0..s {
                for dx in 0..s {
                    let ic = ci * s * s + dy * s + dx;
                    let sbase = (ni * cs + ic) * h * w;
                    let dbase = (ni * c + ci) * ho * wo;
                    for y in 0..h {
                        for xx in 0..w {
                            dst[dbase + (y * s + dy) * wo + xx * s + dx] = src[sbase + y * w + xx];
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn pixel_unshuffle_nchw<T: Scalar>(x: &Tensor<T>, s: usize) -> Tensor<T> {
    let (n, c, ho, wo) = x.dims4();
    let (h, w) = (ho / s, wo / s);
    let cs = c * s * s;
    let mut out = Tensor::zeros(&[n, cs, h, w]);
    let (src, dst) = (x.data(), out.data_mut());
    for ni in 0..n {
        for ci in 0..c {
            for dy in 0..s {
                for dx in 0..s {
                    let ic = ci * s * s + dy * s + dx;
                    let dbase = (ni * cs + ic) * h * w;
                    let sbase = (ni * c + ci) * ho * wo;
                    for y in 0..h {
                        for xx in 0..w {
                            dst[dbase + y * w + xx] = src[sbase + (y * s + dy) * wo + xx * s + dx];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Batched matmul with optional transposition of either operand's last two axes.
fn bmm<T: Scalar>(a: &Tensor<T>, ta: bool, b: &Tensor<T>, tb: bool) -> Tensor<T> {
    let (sa, sb) = (a.shape(), b.shape());
    assert_eq!(sa.len(), sb.len(), "matmul rank mismatch");
    let rank = sa.len();
    assert!(rank == 2 || rank == 3, "matmul expects rank 2 or 3");
    let batch = if rank == 3 { sa[0] } else { 1 };
    if rank == 3 {
        assert_eq!(sb[0], batch, "matmul batch mismatch");
    }
    let (ar, ac) = (sa[rank - 2], sa[rank - 1]);
    let (br, bc) = (sb[rank - 2], sb[rank - 1]);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    assert_eq!(k, k2, "matmul inner dims {sa:?} x {sb:?}");
    let a_str = if ta { (1, ac as isize) } else { (ac as isize, 1) };
    let b_str = if tb { (1, bc as isize) } else { (bc as isize, 1) };
    let shape: Vec<usize> = if rank == 3 { vec![batch, m, n] } else { vec![m, n] };
    let mut out = Tensor::zeros(&shape);
    for bi in 0..batch {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &a.data()[bi * ar * ac..(bi + 1) * ar * ac],
            a_str,
            &b.data()[bi * br * bc..(bi + 1) * br * bc],
            b_str,
            T::zero(),
            &mut out.data_mut()[bi * m * n..(bi + 1) * m * n],
            (n as isize, 1),
        );
    }
    out
}

// ---- convolution -----------------------------------------------------------

#[derive(Debug, Clone, Copy)]
struct ConvSpec {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvSpec {
    #[allow(clippy::too_many_arguments)]
    fn new(n: usize, c: usize, h: usize, w: usize, o: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Self {
        assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "conv kernel larger than padded input");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        ConvSpec { n, c, h, w, o, kh, kw, stride, pad, ho, wo }
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }
}

fn im2col<T: Scalar>(s: &ConvSpec, img: &[T], cols: &mut [T]) {
    let howo = s.ho * s.wo;
    for c in 0..s.c {
        for ky in 0..s.kh {
            for kx in 0..s.kw {
                let row = &mut cols[((c * s.kh + ky) * s.kw + kx) * howo..][..howo];
                for oy in 0..s.ho {
                    let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                    let dst = &mut row[oy * s.wo..(oy + 1) * s.wo];
                    if iy < 0 || iy >= s.h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &img[(c * s.h + iy as usize) * s.w..][..s.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                        *d = if ix < 0 || ix >= s.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(s: &ConvSpec, cols: &[T], img: &mut [T]) {
    let howo = s.ho * s.wo;
    for c in 0..s.c {
        for ky in 0..s.kh {
            for kx in 0..s.kw {
                let row = &cols[((c * s.kh + ky) * s.kw + kx) * howo..][..howo];
                for oy in 0..s.ho {
                    let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    let dst = &mut img[(c * s.h + iy as usize) * s.w..][..s.w];
                    for ox in 0..s.wo {
                        let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                        if ix >= 0 && ix < s.w as isize {
                            dst[ix as usize] += row[oy * s.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward<T: Scalar>(s: &ConvSpec, x: &Tensor<T>, w: &Tensor<T>) -> Tensor<T> {
    let howo = s.ho * s.wo;
    let k = s.patch();
    let mut out = Tensor::zeros(&[s.n, s.o, s.ho, s.wo]);
    let mut cols = if s.is_pointwise() { Vec::new() } else { vec![T::zero(); k * howo] };
    for ni in 0..s.n {
        let img = x.item(ni);
        let rhs: &[T] = if s.is_pointwise() {
            img
        } else {
            im2col(s, img, &mut cols);
            &cols
        };
        T::gemm(s.o, k, howo, T::one(), w.data(), (k as isize, 1), rhs, (howo as isize, 1), T::zero(), out.item_mut(ni), (howo as isize, 1));
    }
    out
}

fn conv_backward<T: Scalar>(s: &ConvSpec, x: &Tensor<T>, w: &Tensor<T>, g: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let howo = s.ho * s.wo;
    let k = s.patch();
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(w.shape());
    let mut cols = if s.is_pointwise() { Vec::new() } else { vec![T::zero(); k * howo] };
    let mut gcols = vec![T::zero(); k * howo];
    for ni in 0..s.n {
        let img = x.item(ni);
        let go = g.item(ni);
        let rhs: &[T] = if s.is_pointwise() {
            img
        } else {
            im2col(s, img, &mut cols);
            &cols
        };
        // dW += g [O, HW] * cols^T [HW, K]
        T::gemm(s.o, howo, k, T::one(), go, (howo as isize, 1), rhs, (1, howo as isize), T::one(), gw.data_mut(), (k as isize, 1));
        if s.is_pointwise() {
            T::gemm(k, s.o, howo, T::one(), w.data(), (1, k as isize), go, (howo as isize, 1), T::zero(), gx.item_mut(ni), (howo as isize, 1));
        } else {
            T::gemm(k, s.o, howo, T::one(), w.data(), (1, k as isize), go, (howo as isize, 1), T::zero(), &mut gcols, (howo as isize, 1));
            col2im(s, &gcols, gx.item_mut(ni));
        }
    }
    (gx, gw)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: u64) -> impl FnMut(usize) -> f64 {
        let mut s = seed;
        move |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        }
    }

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::from_fn(shape, lcg(seed))
    }

    /// Compares analytic input gradients of `f` (reduced by a fixed random
    /// projection) with central differences.
    fn check_grads(inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
        let proj_seed = 99;
        let eval = |vals: &[Tensor<f64>]| -> f64 {
            let mut g = Graph::new();
            let vars: Vec<Var> = vals.iter().map(|t| g.input(t.clone())).collect();
            let out = f(&mut g, &vars);
            let y = g.value(out);
            let p = rand_tensor(y.shape(), proj_seed);
            y.data().iter().zip(p.data()).map(|(a, b)| a * b).sum()
        };
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars);
        let p = rand_tensor(g.shape(out), proj_seed);
        let grads = g.backward_seeded(out, p);
        let h = 1e-6;
        for (k, v) in vars.iter().enumerate() {
            let analytic = grads.get(*v).expect("input gradient");
            for i in 0..inputs[k].len() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[i] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[i];
                assert!(
                    (a - numeric).abs() <= 1e-6 + 1e-5 * numeric.abs(),
                    "input {k} element {i}: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn elementwise_grads() {
        check_grads(vec![rand_tensor(&[2, 3, 2, 2], 1), rand_tensor(&[2, 3, 1, 1], 2)], |g, v| {
            let a = g.mul(v[0], v[1]);
            let b = g.add(a, v[1]);
            let c = g.sub(b, v[0]);
            let d = g.silu(c);
            let e = g.sigmoid(d);
            g.affine(e, 3.0, 1.0)
        });
    }

    #[test]
    fn relu_and_clamp_grads() {
        check_grads(vec![rand_tensor(&[3, 4], 3)], |g, v| {
            let r = g.relu(v[0]);
            g.clamp_max(r, 0.4)
        });
    }

    #[test]
    fn reduction_grads() {
        check_grads(vec![rand_tensor(&[2, 2, 3, 3], 4), rand_tensor(&[2, 2, 3, 3], 5)], |g, v| {
            let m = g.mean_hw(v[0]);
            let p = g.mean_per_item(v[1]);
            let p = g.reshape(p, &[2, 1, 1, 1]);
            let s = g.mul(m, p);
            let e = g.mse(v[0], v[1]);
            let sm = g.mean_all(s);
            g.add(sm, e)
        });
    }

    #[test]
    fn conv_grads() {
        for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (1, 2, 5)] {
            check_grads(
                vec![rand_tensor(&[2, 3, 5, 6], 6), rand_tensor(&[4, 3, k, k], 7), rand_tensor(&[4], 8)],
                |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad),
            );
        }
    }

    #[test]
    fn conv_matches_direct_sum() {
        let x = rand_tensor(&[1, 2, 4, 5], 10);
        let w = rand_tensor(&[3, 2, 3, 3], 11);
        let mut g = Graph::inference();
        let (vx, vw) = (g.constant(x.clone()), g.constant(w.clone()));
        let out = g.conv2d(vx, vw, None, 1, 1);
        let y = g.value(out);
        for o in 0..3 {
            for oy in 0..4 {
                for ox in 0..5 {
                    let mut acc = 0.0;
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (iy, ix) = (oy as isize + ky as isize - 1, ox as isize + kx as isize - 1);
                                if iy >= 0 && iy < 4 && ix >= 0 && ix < 5 {
                                    acc += x.data()[(c * 4 + iy as usize) * 5 + ix as usize]
                                        * w.data()[((o * 2 + c) * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                    }
                    assert!((y.data()[(o * 4 + oy) * 5 + ox] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn linear_and_matmul_grads() {
        check_grads(vec![rand_tensor(&[3, 4], 12), rand_tensor(&[5, 4], 13), rand_tensor(&[5], 14)], |g, v| {
            g.linear(v[0], v[1], v[2])
        });
        check_grads(vec![rand_tensor(&[2, 3, 4], 15), rand_tensor(&[2, 4, 2], 16)], |g, v| {
            let m = g.matmul(v[0], v[1]);
            let t = g.transpose12(m);
            g.softmax_last(t)
        });
    }

    #[test]
    fn group_norm_grads() {
        check_grads(vec![rand_tensor(&[2, 4, 3, 3], 17), rand_tensor(&[4], 18), rand_tensor(&[4], 19)], |g, v| {
            g.group_norm(v[0], 2, v[1], v[2], 1e-5)
        });
    }

    #[test]
    fn shape_op_grads() {
        check_grads(vec![rand_tensor(&[1, 8, 2, 3], 20), rand_tensor(&[1, 2, 4, 6], 21)], |g, v| {
            let ps = g.pixel_shuffle(v[0], 2);
            let cat = g.concat(&[ps, v[1]]);
            let nar = g.narrow(cat, 1, 3);
            g.upsample_nearest(nar, 2)
        });
    }

    #[test]
    fn softmax_rows_are_stochastic() {
        let mut g = Graph::inference();
        let x = g.constant(rand_tensor(&[2, 3, 7], 22).scale(10.0));
        let y = g.softmax_last(x);
        for row in g.value(y).data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn param_nodes_are_shared_and_reported() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::full(&[2], 3.0));
        let mut g = Graph::new();
        let a = g.param(&store, id);
        let b = g.param(&store, id);
        assert_eq!(a, b);
        let m = g.mul(a, b);
        let s = g.sum_all(m);
        let grads = g.backward(s);
        let pg: Vec<_> = grads.params().collect();
        assert_eq!(pg.len(), 1);
        assert_eq!(pg[0].1.data(), &[6.0, 6.0]);
    }

    #[test]
    fn inference_graph_keeps_no_tape() {
        let mut g = Graph::<f32>::inference();
        let x = g.input(Tensor::ones(&[2]));
        let y = g.relu(x);
        assert!(g.nodes[y.0].backward.is_none());
    }
}
