//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied during one forward pass.
//! Losses are evaluated outside the tape: the caller computes the loss value
//! and its gradient with respect to some graph outputs, then seeds
//! [`Graph::backward`] with those gradients.

use rand::Rng;

use super::gemm::gemm;
use super::params::{ParamId, ParamStore};
use super::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Scale(Var, f32),
    /// `b` has shape `[C]` or `[N, C]`, broadcast over trailing dims of `x`.
    Bias { x: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Linear { x: Var, w: Var, b: Option<Var> },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, stats: Vec<(f32, f32)> },
    LayerNorm { x: Var, gamma: Var, beta: Var, stats: Vec<(f32, f32)> },
    Silu(Var),
    Relu(Var),
    Upsample2x(Var),
    Concat(Var, Var),
    ToTokens(Var),
    FromTokens(Var),
    HeadScores { q: Var, k: Var, heads: usize, scale: f32 },
    Softmax(Var),
    HeadApply { p: Var, v: Var, heads: usize },
    Dropout { x: Var, mask: Vec<f32> },
    Embedding { table: Var, ids: Vec<usize> },
    AddRows { x: Var, delta: Var, rows: Vec<usize> },
    TokenMix { x: Var, w: Var, b: Var },
    MeanSpatial(Var),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradients of every parameter leaf that required one.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params
            .iter()
            .filter_map(|&(id, v)| self.grads[v.0].as_ref().map(|g| (id, g)))
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(ParamId, Var)>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that never requires gradients; used for inference.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input (never differentiated unless `requires_grad`).
    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf holding a copy of a stored parameter; differentiable iff the
    /// parameter is trainable.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Param,
            requires_grad: p.trainable && self.grad_enabled,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.push((id, v));
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let value = self.value(x).map(|v| v * s);
        self.push(value, Op::Scale(x, s), &[x])
    }

    pub fn bias(&mut self, x: Var, b: Var) -> Var {
        let xv = self.value(x);
        let bv = self.value(b);
        let (n, c) = (xv.dim(0), xv.dim(1));
        let inner = xv.numel() / (n * c);
        let per_sample = bv.shape().len() == 2;
        if per_sample {
            assert_eq!(bv.shape(), &[n, c]);
        } else {
            assert_eq!(bv.shape(), &[c]);
        }
        let mut out = xv.clone();
        let bd = bv.data();
        for (blk, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let bi = if per_sample { blk } else { blk % c };
            let add = bd[bi];
            chunk.iter_mut().for_each(|v| *v += add);
        }
        self.push(out, Op::Bias { x, b }, &[x, b])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, ci, h, wd) = dims4(xv);
        let (co, wci, k, _) = dims4(wv);
        assert_eq!(ci, wci, "conv2d channel mismatch: input {ci}, weight {wci}");
        let (ho, wo) = conv_out(h, wd, k, stride, pad);
        let p = ho * wo;
        let kk = ci * k * k;
        let mut out = vec![0.0f32; n * co * p];
        let mut cols = vec![0.0f32; kk * p];
        let direct = k == 1 && stride == 1 && pad == 0;
        for s in 0..n {
            let xs = &xv.data()[s * ci * h * wd..(s + 1) * ci * h * wd];
            let cols_ref: &[f32] = if direct {
                xs
            } else {
                im2col(xs, ci, h, wd, k, stride, pad, ho, wo, &mut cols);
                &cols
            };
            gemm(
                co,
                kk,
                p,
                1.0,
                wv.data(),
                false,
                cols_ref,
                false,
                0.0,
                &mut out[s * co * p..(s + 1) * co * p],
            );
        }
        if let Some(b) = b {
            let bd = self.value(b).data();
            for (blk, chunk) in out.chunks_mut(p).enumerate() {
                let add = bd[blk % co];
                chunk.iter_mut().for_each(|v| *v += add);
            }
        }
        let value = Tensor::new(&[n, co, ho, wo], out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            &inputs,
        )
    }

    /// `x[..., in] * w[out, in]^T + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (out_f, in_f) = (wv.dim(0), wv.dim(1));
        let last = *xv.shape().last().unwrap();
        assert_eq!(last, in_f, "linear input features {last} != weight {in_f}");
        let m = xv.numel() / in_f;
        let mut out = vec![0.0f32; m * out_f];
        gemm(m, in_f, out_f, 1.0, xv.data(), false, wv.data(), true, 0.0, &mut out);
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_mut(out_f) {
                row.iter_mut().zip(bd).for_each(|(v, bb)| *v += bb);
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = out_f;
        let value = Tensor::new(&shape, out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(value, Op::Linear { x, w, b }, &inputs)
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        const EPS: f32 = 1e-5;
        let xv = self.value(x);
        let (n, c) = (xv.dim(0), xv.dim(1));
        assert_eq!(c % groups, 0, "channels {c} not divisible by {groups} groups");
        let inner = xv.numel() / (n * c);
        let cg = c / groups;
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut out = vec![0.0f32; xv.numel()];
        let mut stats = Vec::with_capacity(n * groups);
        for s in 0..n {
            for g in 0..groups {
                let start = (s * c + g * cg) * inner;
                let len = cg * inner;
                let seg = &xv.data()[start..start + len];
                let mean = seg.iter().sum::<f32>() / len as f32;
                let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / len as f32;
                let rstd = 1.0 / (var + EPS).sqrt();
                stats.push((mean, rstd));
                for ch in 0..cg {
                    let cidx = g * cg + ch;
                    let off = start + ch * inner;
                    for i in 0..inner {
                        out[off + i] = (xv.data()[off + i] - mean) * rstd * gd[cidx] + bd[cidx];
                    }
                }
            }
        }
        let value = Tensor::new(xv.shape(), out);
        self.push(
            value,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
            &[x, gamma, beta],
        )
    }

    /// Normalizes over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f32 = 1e-5;
        let xv = self.value(x);
        let d = *xv.shape().last().unwrap();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut out = vec![0.0f32; xv.numel()];
        let mut stats = Vec::with_capacity(xv.numel() / d);
        for (row, o) in xv.data().chunks(d).zip(out.chunks_mut(d)) {
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let rstd = 1.0 / (var + EPS).sqrt();
            stats.push((mean, rstd));
            for i in 0..d {
                o[i] = (row[i] - mean) * rstd * gd[i] + bd[i];
            }
        }
        let value = Tensor::new(xv.shape(), out);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            },
            &[x, gamma, beta],
        )
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * sigmoid(v));
        self.push(value, Op::Silu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = dims4(xv);
        let mut out = vec![0.0f32; n * c * 4 * h * w];
        for (plane, o) in xv.data().chunks(h * w).zip(out.chunks_mut(4 * h * w)) {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    o[y * 2 * w + xx] = plane[(y / 2) * w + xx / 2];
                }
            }
        }
        let value = Tensor::new(&[n, c, 2 * h, 2 * w], out);
        self.push(value, Op::Upsample2x(x), &[x])
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let value = Tensor::concat_channels(&[self.value(a), self.value(b)]);
        self.push(value, Op::Concat(a, b), &[a, b])
    }

    /// `[N, C, H, W] -> [N, H*W, C]`.
    pub fn to_tokens(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = dims4(xv);
        let value = Tensor::new(&[n, h * w, c], transpose_blocks(xv.data(), n, c, h * w));
        self.push(value, Op::ToTokens(x), &[x])
    }

    /// `[N, H*W, C] -> [N, C, H, W]`.
    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Var {
        let xv = self.value(x);
        let (n, p, c) = (xv.dim(0), xv.dim(1), xv.dim(2));
        assert_eq!(p, h * w);
        let value = Tensor::new(&[n, c, h, w], transpose_blocks(xv.data(), n, p, c));
        self.push(value, Op::FromTokens(x), &[x])
    }

    /// Per-head scaled dot products: `q [N, Q, C]`, `k [N, L, C]` ->
    /// `[N * heads, Q, L]`.
    pub fn head_scores(&mut self, q: Var, k: Var, heads: usize) -> Var {
        let qv = self.value(q);
        let kv = self.value(k);
        let (n, nq, c) = (qv.dim(0), qv.dim(1), qv.dim(2));
        let nl = kv.dim(1);
        assert_eq!(kv.dim(2), c);
        assert_eq!(c % heads, 0);
        let dh = c / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut out = vec![0.0f32; n * heads * nq * nl];
        for s in 0..n {
            for hh in 0..heads {
                let o = &mut out[(s * heads + hh) * nq * nl..(s * heads + hh + 1) * nq * nl];
                for i in 0..nq {
                    let qrow = &qv.data()[(s * nq + i) * c + hh * dh..(s * nq + i) * c + (hh + 1) * dh];
                    for l in 0..nl {
                        let krow =
                            &kv.data()[(s * nl + l) * c + hh * dh..(s * nl + l) * c + (hh + 1) * dh];
                        o[i * nl + l] = scale * dot(qrow, krow);
                    }
                }
            }
        }
        let value = Tensor::new(&[n * heads, nq, nl], out);
        self.push(value, Op::HeadScores { q, k, heads, scale }, &[q, k])
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = *xv.shape().last().unwrap();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(d) {
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let value = Tensor::new(xv.shape(), out);
        self.push(value, Op::Softmax(x), &[x])
    }

    /// `p [N * heads, Q, L]`, `v [N, L, C]` -> `[N, Q, C]`.
    pub fn head_apply(&mut self, p: Var, v: Var, heads: usize) -> Var {
        let pv = self.value(p);
        let vv = self.value(v);
        let (n, nl, c) = (vv.dim(0), vv.dim(1), vv.dim(2));
        let nq = pv.dim(1);
        let dh = c / heads;
        let mut out = vec![0.0f32; n * nq * c];
        for s in 0..n {
            for hh in 0..heads {
                let pb = &pv.data()[(s * heads + hh) * nq * nl..];
                for i in 0..nq {
                    let orow = &mut out[(s * nq + i) * c + hh * dh..(s * nq + i) * c + (hh + 1) * dh];
                    for l in 0..nl {
                        let w = pb[i * nl + l];
                        let vrow = &vv.data()[(s * nl + l) * c + hh * dh..];
                        for d in 0..dh {
                            orow[d] += w * vrow[d];
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[n, nq, c], out);
        self.push(value, Op::HeadApply { p, v, heads }, &[p, v])
    }

    /// Inverted dropout; identity when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f32, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let n = self.value(x).numel();
        let mask: Vec<f32> = (0..n)
            .map(|_| if rng.gen::<f32>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let xv = self.value(x);
        let value = Tensor::new(
            xv.shape(),
            xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect(),
        );
        self.push(value, Op::Dropout { x, mask }, &[x])
    }

    /// Gathers rows of `table [V, D]` for `ids` laid out as `shape`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], shape: &[usize]) -> Var {
        let tv = self.value(table);
        let d = tv.dim(1);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let mut full = shape.to_vec();
        full.push(d);
        let value = Tensor::new(&full, out);
        self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Adds `delta [D]` to the listed flat rows of `x [..., D]`.
    pub fn add_rows(&mut self, x: Var, delta: Var, rows: &[usize]) -> Var {
        let mut value = self.value(x).clone();
        let dv = self.value(delta).data().to_vec();
        let d = dv.len();
        for &r in rows {
            value.data_mut()[r * d..(r + 1) * d]
                .iter_mut()
                .zip(&dv)
                .for_each(|(a, b)| *a += b);
        }
        self.push(
            value,
            Op::AddRows {
                x,
                delta,
                rows: rows.to_vec(),
            },
            &[x, delta],
        )
    }

    /// Mixes tokens along the sequence axis: `out[n, i] = sum_j w[i, j] x[n, j] + b[i]`.
    pub fn token_mix(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.value(x);
        let (n, l, d) = (xv.dim(0), xv.dim(1), xv.dim(2));
        let wv = self.value(w);
        assert_eq!(wv.shape(), &[l, l]);
        let bd = self.value(b).data();
        let mut out = vec![0.0f32; n * l * d];
        for s in 0..n {
            gemm(
                l,
                l,
                d,
                1.0,
                wv.data(),
                false,
                &xv.data()[s * l * d..],
                false,
                0.0,
                &mut out[s * l * d..(s + 1) * l * d],
            );
            for i in 0..l {
                out[(s * l + i) * d..(s * l + i + 1) * d]
                    .iter_mut()
                    .for_each(|v| *v += bd[i]);
            }
        }
        let value = Tensor::new(&[n, l, d], out);
        self.push(value, Op::TokenMix { x, w, b }, &[x, w, b])
    }

    /// `[N, C, H, W] -> [N, C]` average over spatial positions.
    pub fn mean_spatial(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c) = (xv.dim(0), xv.dim(1));
        let inner = xv.numel() / (n * c);
        let out = xv
            .data()
            .chunks(inner)
            .map(|ch| ch.iter().sum::<f32>() / inner as f32)
            .collect();
        let value = Tensor::new(&[n, c], out);
        self.push(value, Op::MeanSpatial(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).clone().reshape(shape);
        self.push(value, Op::Reshape(x), &[x])
    }

    /// Runs the reverse sweep from externally computed output gradients.
    pub fn backward(&self, seeds: Vec<(Var, Tensor)>) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            assert_eq!(
                g.shape(),
                self.value(v).shape(),
                "seed gradient shape mismatch"
            );
            self.accumulate(&mut grads, v, g);
        }
        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf | Op::Param) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
        }
        Gradients {
            grads,
            params: self.params.clone(),
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.accumulate(grads, *x, g.map(|v| v * s));
            }
            Op::Bias { x, b } => {
                if self.wants(*b) {
                    let bv = self.value(*b);
                    let xv = self.value(*x);
                    let (n, c) = (xv.dim(0), xv.dim(1));
                    let inner = xv.numel() / (n * c);
                    let mut db = Tensor::zeros(bv.shape());
                    let per_sample = bv.shape().len() == 2;
                    for (blk, chunk) in g.data().chunks(inner).enumerate() {
                        let bi = if per_sample { blk } else { blk % c };
                        db.data_mut()[bi] += chunk.iter().sum::<f32>();
                    }
                    self.accumulate(grads, *b, db);
                }
                self.accumulate(grads, *x, g.clone());
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => self.conv_backward(g, *x, *w, *b, *stride, *pad, grads),
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (out_f, in_f) = (wv.dim(0), wv.dim(1));
                let m = xv.numel() / in_f;
                if self.wants(*x) {
                    let mut dx = vec![0.0f32; m * in_f];
                    gemm(m, out_f, in_f, 1.0, g.data(), false, wv.data(), false, 0.0, &mut dx);
                    self.accumulate(grads, *x, Tensor::new(xv.shape(), dx));
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0f32; out_f * in_f];
                    gemm(out_f, m, in_f, 1.0, g.data(), true, xv.data(), false, 0.0, &mut dw);
                    self.accumulate(grads, *w, Tensor::new(wv.shape(), dw));
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![0.0f32; out_f];
                        for row in g.data().chunks(out_f) {
                            db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                        }
                        self.accumulate(grads, *b, Tensor::new(&[out_f], db));
                    }
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            } => {
                let xv = self.value(*x);
                let (n, c) = (xv.dim(0), xv.dim(1));
                let inner = xv.numel() / (n * c);
                let cg = c / groups;
                let gd = self.value(*gamma).data();
                let mut dx = vec![0.0f32; xv.numel()];
                let mut dgamma = vec![0.0f32; c];
                let mut dbeta = vec![0.0f32; c];
                for s in 0..n {
                    for gi in 0..*groups {
                        let (mean, rstd) = stats[s * groups + gi];
                        let start = (s * c + gi * cg) * inner;
                        let len = (cg * inner) as f32;
                        let mut sum_dxhat = 0.0f32;
                        let mut sum_dxhat_xhat = 0.0f32;
                        for ch in 0..cg {
                            let cidx = gi * cg + ch;
                            let off = start + ch * inner;
                            for k in 0..inner {
                                let xhat = (xv.data()[off + k] - mean) * rstd;
                                let gv = g.data()[off + k];
                                dgamma[cidx] += gv * xhat;
                                dbeta[cidx] += gv;
                                let dxhat = gv * gd[cidx];
                                sum_dxhat += dxhat;
                                sum_dxhat_xhat += dxhat * xhat;
                            }
                        }
                        for ch in 0..cg {
                            let cidx = gi * cg + ch;
                            let off = start + ch * inner;
                            for k in 0..inner {
                                let xhat = (xv.data()[off + k] - mean) * rstd;
                                let dxhat = g.data()[off + k] * gd[cidx];
                                dx[off + k] = rstd / len
                                    * (len * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape(), dx));
                self.accumulate(grads, *gamma, Tensor::new(&[c], dgamma));
                self.accumulate(grads, *beta, Tensor::new(&[c], dbeta));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let xv = self.value(*x);
                let d = *xv.shape().last().unwrap();
                let gd = self.value(*gamma).data();
                let mut dx = vec![0.0f32; xv.numel()];
                let mut dgamma = vec![0.0f32; d];
                let mut dbeta = vec![0.0f32; d];
                for (r, ((row, grow), dxr)) in xv
                    .data()
                    .chunks(d)
                    .zip(g.data().chunks(d))
                    .zip(dx.chunks_mut(d))
                    .enumerate()
                {
                    let (mean, rstd) = stats[r];
                    let mut s1 = 0.0f32;
                    let mut s2 = 0.0f32;
                    for k in 0..d {
                        let xhat = (row[k] - mean) * rstd;
                        dgamma[k] += grow[k] * xhat;
                        dbeta[k] += grow[k];
                        let dxhat = grow[k] * gd[k];
                        s1 += dxhat;
                        s2 += dxhat * xhat;
                    }
                    let df = d as f32;
                    for k in 0..d {
                        let xhat = (row[k] - mean) * rstd;
                        let dxhat = grow[k] * gd[k];
                        dxr[k] = rstd / df * (df * dxhat - s1 - xhat * s2);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape(), dx));
                self.accumulate(grads, *gamma, Tensor::new(&[d], dgamma));
                self.accumulate(grads, *beta, Tensor::new(&[d], dbeta));
            }
            Op::Silu(x) => {
                let dx = self.value(*x).zip_map(g, |v, gv| {
                    let s = sigmoid(v);
                    gv * (s + v * s * (1.0 - s))
                });
                self.accumulate(grads, *x, dx);
            }
            Op::Relu(x) => {
                let dx = self
                    .value(*x)
                    .zip_map(g, |v, gv| if v > 0.0 { gv } else { 0.0 });
                self.accumulate(grads, *x, dx);
            }
            Op::Upsample2x(x) => {
                let xv = self.value(*x);
                let (_, _, h, w) = dims4(xv);
                let mut dx = vec![0.0f32; xv.numel()];
                for (plane, gp) in dx.chunks_mut(h * w).zip(g.data().chunks(4 * h * w)) {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            plane[(y / 2) * w + xx / 2] += gp[y * 2 * w + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape(), dx));
            }
            Op::Concat(a, b) => {
                let (ca, cb) = (self.value(*a).dim(1), self.value(*b).dim(1));
                let (n, _, h, w) = dims4(g);
                let hw = h * w;
                let mut ga = Vec::with_capacity(n * ca * hw);
                let mut gb = Vec::with_capacity(n * cb * hw);
                for s in 0..n {
                    let base = s * (ca + cb) * hw;
                    ga.extend_from_slice(&g.data()[base..base + ca * hw]);
                    gb.extend_from_slice(&g.data()[base + ca * hw..base + (ca + cb) * hw]);
                }
                self.accumulate(grads, *a, Tensor::new(&[n, ca, h, w], ga));
                self.accumulate(grads, *b, Tensor::new(&[n, cb, h, w], gb));
            }
            Op::ToTokens(x) => {
                let (n, p, c) = (g.dim(0), g.dim(1), g.dim(2));
                let dx = transpose_blocks(g.data(), n, p, c);
                self.accumulate(grads, *x, Tensor::new(self.value(*x).shape(), dx));
            }
            Op::FromTokens(x) => {
                let (n, c) = (g.dim(0), g.dim(1));
                let p = g.numel() / (n * c);
                let dx = transpose_blocks(g.data(), n, c, p);
                self.accumulate(grads, *x, Tensor::new(self.value(*x).shape(), dx));
            }
            Op::HeadScores { q, k, heads, scale } => {
                let qv = self.value(*q);
                let kv = self.value(*k);
                let (n, nq, c) = (qv.dim(0), qv.dim(1), qv.dim(2));
                let nl = kv.dim(1);
                let dh = c / heads;
                let mut dq = vec![0.0f32; qv.numel()];
                let mut dk = vec![0.0f32; kv.numel()];
                for s in 0..n {
                    for hh in 0..*heads {
                        let gb = &g.data()[(s * heads + hh) * nq * nl..];
                        for i in 0..nq {
                            let qo = (s * nq + i) * c + hh * dh;
                            for l in 0..nl {
                                let gs = gb[i * nl + l] * scale;
                                if gs == 0.0 {
                                    continue;
                                }
                                let ko = (s * nl + l) * c + hh * dh;
                                for d in 0..dh {
                                    dq[qo + d] += gs * kv.data()[ko + d];
                                    dk[ko + d] += gs * qv.data()[qo + d];
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *q, Tensor::new(qv.shape(), dq));
                self.accumulate(grads, *k, Tensor::new(kv.shape(), dk));
            }
            Op::Softmax(x) => {
                let d = *out.shape().last().unwrap();
                let mut dx = vec![0.0f32; out.numel()];
                for ((p, gr), o) in out
                    .data()
                    .chunks(d)
                    .zip(g.data().chunks(d))
                    .zip(dx.chunks_mut(d))
                {
                    let dotp: f32 = p.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for k in 0..d {
                        o[k] = p[k] * (gr[k] - dotp);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(out.shape(), dx));
            }
            Op::HeadApply { p, v, heads } => {
                let pv = self.value(*p);
                let vv = self.value(*v);
                let (n, nl, c) = (vv.dim(0), vv.dim(1), vv.dim(2));
                let nq = pv.dim(1);
                let dh = c / heads;
                let mut dp = vec![0.0f32; pv.numel()];
                let mut dv = vec![0.0f32; vv.numel()];
                for s in 0..n {
                    for hh in 0..*heads {
                        let pbase = (s * heads + hh) * nq * nl;
                        for i in 0..nq {
                            let go = (s * nq + i) * c + hh * dh;
                            let grow = &g.data()[go..go + dh];
                            for l in 0..nl {
                                let vo = (s * nl + l) * c + hh * dh;
                                let vrow = &vv.data()[vo..vo + dh];
                                dp[pbase + i * nl + l] = dot(grow, vrow);
                                let w = pv.data()[pbase + i * nl + l];
                                for d in 0..dh {
                                    dv[vo + d] += w * grow[d];
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *p, Tensor::new(pv.shape(), dp));
                self.accumulate(grads, *v, Tensor::new(vv.shape(), dv));
            }
            Op::Dropout { x, mask } => {
                let dx = Tensor::new(
                    g.shape(),
                    g.data().iter().zip(mask).map(|(a, m)| a * m).collect(),
                );
                self.accumulate(grads, *x, dx);
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let d = tv.dim(1);
                let mut dt = Tensor::zeros(tv.shape());
                for (r, &id) in ids.iter().enumerate() {
                    dt.data_mut()[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(&g.data()[r * d..(r + 1) * d])
                        .for_each(|(a, b)| *a += b);
                }
                self.accumulate(grads, *table, dt);
            }
            Op::AddRows { x, delta, rows } => {
                if self.wants(*delta) {
                    let d = self.value(*delta).numel();
                    let mut dd = vec![0.0f32; d];
                    for &r in rows {
                        dd.iter_mut()
                            .zip(&g.data()[r * d..(r + 1) * d])
                            .for_each(|(a, b)| *a += b);
                    }
                    self.accumulate(grads, *delta, Tensor::new(&[d], dd));
                }
                self.accumulate(grads, *x, g.clone());
            }
            Op::TokenMix { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, l, d) = (xv.dim(0), xv.dim(1), xv.dim(2));
                let mut dx = vec![0.0f32; xv.numel()];
                let mut dw = vec![0.0f32; l * l];
                let mut db = vec![0.0f32; l];
                for s in 0..n {
                    let gs = &g.data()[s * l * d..(s + 1) * l * d];
                    let xs = &xv.data()[s * l * d..(s + 1) * l * d];
                    gemm(l, l, d, 1.0, wv.data(), true, gs, false, 0.0, &mut dx[s * l * d..]);
                    gemm(l, d, l, 1.0, gs, false, xs, true, 1.0, &mut dw);
                    for i in 0..l {
                        db[i] += gs[i * d..(i + 1) * d].iter().sum::<f32>();
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape(), dx));
                self.accumulate(grads, *w, Tensor::new(&[l, l], dw));
                self.accumulate(grads, *b, Tensor::new(&[l], db));
            }
            Op::MeanSpatial(x) => {
                let xv = self.value(*x);
                let (n, c) = (xv.dim(0), xv.dim(1));
                let inner = xv.numel() / (n * c);
                let mut dx = Vec::with_capacity(xv.numel());
                for &gv in g.data() {
                    dx.extend(std::iter::repeat(gv / inner as f32).take(inner));
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape(), dx));
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.clone().reshape(&shape));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        g: &Tensor,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        grads: &mut [Option<Tensor>],
    ) {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, ci, h, wd) = dims4(xv);
        let (co, _, k, _) = dims4(wv);
        let (ho, wo) = (g.dim(2), g.dim(3));
        let p = ho * wo;
        let kk = ci * k * k;
        let direct = k == 1 && stride == 1 && pad == 0;
        let want_x = self.wants(x);
        let want_w = self.wants(w);
        let mut dx = if want_x { vec![0.0f32; xv.numel()] } else { Vec::new() };
        let mut dw = if want_w { vec![0.0f32; wv.numel()] } else { Vec::new() };
        let mut cols = vec![0.0f32; if direct { 0 } else { kk * p }];
        for s in 0..n {
            let gs = &g.data()[s * co * p..(s + 1) * co * p];
            if want_w {
                let xs = &xv.data()[s * ci * h * wd..(s + 1) * ci * h * wd];
                let cols_ref: &[f32] = if direct {
                    xs
                } else {
                    im2col(xs, ci, h, wd, k, stride, pad, ho, wo, &mut cols);
                    &cols
                };
                gemm(co, p, kk, 1.0, gs, false, cols_ref, true, 1.0, &mut dw);
            }
            if want_x {
                let dxs = &mut dx[s * ci * h * wd..(s + 1) * ci * h * wd];
                if direct {
                    gemm(kk, co, p, 1.0, wv.data(), true, gs, false, 0.0, dxs);
                } else {
                    gemm(kk, co, p, 1.0, wv.data(), true, gs, false, 0.0, &mut cols);
                    col2im(&cols, ci, h, wd, k, stride, pad, ho, wo, dxs);
                }
            }
        }
        if want_x {
            self.accumulate(grads, x, Tensor::new(xv.shape(), dx));
        }
        if want_w {
            self.accumulate(grads, w, Tensor::new(wv.shape(), dw));
        }
        if let Some(b) = b {
            if self.wants(b) {
                let mut db = vec![0.0f32; co];
                for (blk, chunk) in g.data().chunks(p).enumerate() {
                    db[blk % co] += chunk.iter().sum::<f32>();
                }
                self.accumulate(grads, b, Tensor::new(&[co], db));
            }
        }
    }
}

fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 4, "expected a 4-d tensor, got {s:?}");
    (s[0], s[1], s[2], s[3])
}

pub(crate) fn conv_out(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1)
}

/// Transposes each `[rows, cols]` block of a `[n, rows, cols]` buffer.
fn transpose_blocks(src: &[f32], n: usize, rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; src.len()];
    for s in 0..n {
        let a = &src[s * rows * cols..(s + 1) * rows * cols];
        let o = &mut out[s * rows * cols..(s + 1) * rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                o[c * rows + r] = a[r * cols + c];
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f32],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [f32],
) {
    let p = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * p..((ci * k + ky) * k + kx + 1) * p];
                let (lo, hi) = valid_range(kx, pad, stride, w, wo);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize || lo >= hi {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    dst[..lo].fill(0.0);
                    dst[hi..].fill(0.0);
                    let first = lo * stride + kx - pad;
                    if stride == 1 {
                        dst[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (j, d) in dst[lo..hi].iter_mut().enumerate() {
                            *d = src[first + j * stride];
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `[lo, hi)` whose input column `ox * stride + kx - pad`
/// lies inside `0..w`.
fn valid_range(kx: usize, pad: usize, stride: usize, w: usize, wo: usize) -> (usize, usize) {
    let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(stride) };
    // largest ox with ox * stride + kx - pad <= w - 1
    let hi = if w + pad < kx + 1 { 0 } else { ((w - 1 + pad - kx) / stride + 1).min(wo) };
    (lo.min(wo), hi.max(lo.min(wo)))
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f32],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    x: &mut [f32],
) {
    let p = ho * wo;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * p..((ci * k + ky) * k + kx + 1) * p];
                let (lo, hi) = valid_range(kx, pad, stride, w, wo);
                if lo >= hi {
                    continue;
                }
                let first = lo * stride + kx - pad;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src = &row[oy * wo + lo..oy * wo + hi];
                    if stride == 1 {
                        dst[first..first + hi - lo].iter_mut().zip(src).for_each(|(d, v)| *d += v);
                    } else {
                        for (j, v) in src.iter().enumerate() {
                            dst[first + j * stride] += v;
                        }
                    }
                }
            }
        }
    }
}
