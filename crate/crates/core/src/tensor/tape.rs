//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape itself is a
//! topological order and `backward` is a single reverse sweep.

use super::ops::{self, GridPool, InstanceNormCache, SampleTaps};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    InstanceNorm {
        input: Var,
        scale: Var,
        shift: Var,
        cache: InstanceNormCache,
    },
    Relu(Var),
    AvgPool {
        input: Var,
        k: usize,
    },
    BatchedMatmulNt {
        a: Var,
        b: Var,
    },
    BilinearPool {
        a: Var,
        b: Var,
    },
    GridPool {
        input: Var,
        mode: GridPool,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Sample {
        map: Var,
        taps: Vec<Option<SampleTaps>>,
    },
    GroupStack(Vec<Var>),
    NormalizeRows {
        input: Var,
        norms: Vec<f64>,
    },
    GatherRows {
        input: Var,
        rows: Vec<usize>,
    },
    Triplet {
        anchor: Var,
        positive: Var,
        negative: Var,
        margin: f64,
    },
    Mul(Var, Var),
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Gradients are kept for it iff `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated into a leaf by [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.value.zero_grad());
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        if !matches!(op, Op::Leaf) {
            value.set_requires_grad(requires_grad);
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let out = ops::conv2d_raw(self.value(input), self.value(weight), self.value(bias), stride, padding)?;
        let rg = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            rg,
        ))
    }

    pub fn instance_norm(&mut self, input: Var, scale: Var, shift: Var, eps: f64) -> Result<Var> {
        self.masked_instance_norm(input, scale, shift, eps, None)
    }

    /// Instance norm restricted to the pixels marked in `mask` (`N * H * W`).
    pub fn masked_instance_norm(
        &mut self,
        input: Var,
        scale: Var,
        shift: Var,
        eps: f64,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let (out, cache) = ops::instance_norm_raw(self.value(input), self.value(scale), self.value(shift), eps, mask)?;
        let rg = self.needs(input) || self.needs(scale) || self.needs(shift);
        Ok(self.push(
            out,
            Op::InstanceNorm {
                input,
                scale,
                shift,
                cache,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = ops::relu(self.value(input));
        let rg = self.needs(input);
        self.push(out, Op::Relu(input), rg)
    }

    pub fn avg_pool(&mut self, input: Var, k: usize) -> Result<Var> {
        let out = ops::avg_pool2d(self.value(input), k)?;
        let rg = self.needs(input);
        Ok(self.push(out, Op::AvgPool { input, k }, rg))
    }

    pub fn batched_matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::batched_matmul_nt(self.value(a), self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::BatchedMatmulNt { a, b }, rg))
    }

    /// Exact-sum bilinear pooling, `[P,Ma,G] x [P,Mb,G] -> [P, Ma*Mb]`.
    pub fn bilinear_pool(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::bilinear_pool_raw(self.value(a), self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::BilinearPool { a, b }, rg))
    }

    /// Mean or max over the last axis of `[P, C, G]`.
    pub fn grid_pool(&mut self, input: Var, mode: GridPool) -> Result<Var> {
        let (out, argmax) = ops::grid_pool_raw(self.value(input), mode)?;
        let rg = self.needs(input);
        Ok(self.push(out, Op::GridPool { input, mode, argmax }, rg))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(input).clone().reshape(shape.to_vec())?;
        let rg = self.needs(input);
        Ok(self.push(out, Op::Reshape(input), rg))
    }

    /// Bilinearly samples a `[1, C, H, W]` (or `[C, H, W]`) map at each point,
    /// producing `[P, C]`. Out-of-bounds points give zero rows; the returned
    /// mask marks the in-bounds ones.
    pub fn sample(&mut self, map: Var, points: &[(f64, f64)]) -> Result<(Var, Vec<bool>)> {
        let s = self.value(map).shape().to_vec();
        let (c, h, w) = match s.as_slice() {
            [1, c, h, w] | [c, h, w] => (*c, *h, *w),
            _ => return Err(Error::shape("sample", format!("map must be [1,C,H,W] or [C,H,W], got {s:?}"))),
        };
        let taps: Vec<_> = points.iter().map(|&(x, y)| SampleTaps::locate(x, y, w, h)).collect();
        let data = self.value(map).data();
        let mut out = vec![0.0; points.len() * c];
        for (p, t) in taps.iter().enumerate() {
            if let Some(t) = t {
                for ch in 0..c {
                    out[p * c + ch] = t.sample(&data[ch * h * w..(ch + 1) * h * w], w);
                }
            }
        }
        let valid = taps.iter().map(Option::is_some).collect();
        let rg = self.needs(map);
        let out = Tensor::new([points.len(), c], out)?;
        Ok((self.push(out, Op::Sample { map, taps }, rg), valid))
    }

    /// Stacks `n_s * n_r` tensors of shape `[P, C]` (row-major over the grid)
    /// into `[P, C, n_s, n_r]`.
    pub fn group_stack(&mut self, parts: &[Var], n_s: usize, n_r: usize) -> Result<Var> {
        if parts.len() != n_s * n_r || parts.is_empty() {
            return Err(Error::shape(
                "group_stack",
                format!("{} parts for a {n_s}x{n_r} grid", parts.len()),
            ));
        }
        let s = self.value(parts[0]).shape().to_vec();
        if s.len() != 2 || parts.iter().any(|v| self.value(*v).shape() != s.as_slice()) {
            return Err(Error::shape("group_stack", "parts must share one [P, C] shape"));
        }
        let (np, c, ng) = (s[0], s[1], parts.len());
        let mut out = vec![0.0; np * c * ng];
        for (g, part) in parts.iter().enumerate() {
            let d = self.value(*part).data();
            for p in 0..np {
                for ch in 0..c {
                    out[(p * c + ch) * ng + g] = d[p * c + ch];
                }
            }
        }
        let rg = parts.iter().any(|v| self.needs(*v));
        let out = Tensor::new([np, c, n_s, n_r], out)?;
        Ok(self.push(out, Op::GroupStack(parts.to_vec()), rg))
    }

    /// L2-normalizes each row of `[R, D]`. Zero rows stay zero; the returned
    /// flags mark them.
    pub fn normalize_rows(&mut self, input: Var) -> Result<(Var, Vec<bool>)> {
        let s = self.value(input).shape().to_vec();
        if s.len() != 2 {
            return Err(Error::shape("normalize_rows", format!("expected [R, D], got {s:?}")));
        }
        let d = s[1];
        let mut out = self.value(input).data().to_vec();
        let norms: Vec<f64> = out.chunks_mut(d.max(1)).map(ops::l2_normalize).collect();
        let degenerate = norms.iter().map(|&n| n == 0.0).collect();
        let rg = self.needs(input);
        let out = Tensor::new(s, out)?;
        Ok((self.push(out, Op::NormalizeRows { input, norms }, rg), degenerate))
    }

    pub fn gather_rows(&mut self, input: Var, rows: &[usize]) -> Result<Var> {
        let s = self.value(input).shape().to_vec();
        if s.len() != 2 || rows.iter().any(|&r| r >= s[0]) {
            return Err(Error::shape("gather_rows", format!("rows {rows:?} out of range for {s:?}")));
        }
        let d = s[1];
        let src = self.value(input).data();
        let out: Vec<f64> = rows.iter().flat_map(|&r| src[r * d..(r + 1) * d].iter().copied()).collect();
        let rg = self.needs(input);
        let out = Tensor::new([rows.len(), d], out)?;
        Ok(self.push(
            out,
            Op::GatherRows {
                input,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over rows of `max(|a - p| - |a - n| + margin, 0)`.
    pub fn triplet_loss(&mut self, anchor: Var, positive: Var, negative: Var, margin: f64) -> Result<Var> {
        let s = self.value(anchor).shape().to_vec();
        if s.len() != 2 || self.value(positive).shape() != s.as_slice() || self.value(negative).shape() != s.as_slice()
        {
            return Err(Error::shape("triplet_loss", "anchor, positive and negative must share one [R, D] shape"));
        }
        if s[0] == 0 {
            return Err(Error::InvalidArgument("triplet_loss: empty batch".into()));
        }
        let loss = triplet_terms(
            self.value(anchor).data(),
            self.value(positive).data(),
            self.value(negative).data(),
            s[1],
            margin,
        )
        .iter()
        .map(|t| t.hinge)
        .sum::<f64>()
            / s[0] as f64;
        let rg = self.needs(anchor) || self.needs(positive) || self.needs(negative);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Triplet {
                anchor,
                positive,
                negative,
                margin,
            },
            rg,
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape("mul", format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).data().iter().sum();
        let rg = self.needs(input);
        self.push(Tensor::scalar(total), Op::Sum(input), rg)
    }

    /// Back-propagates from a scalar `loss`, accumulating into the grad
    /// buffers of every reachable leaf that requires gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].value.requires_grad() {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].value.accumulate_grad(&g);
                continue;
            }
            self.propagate(i, &g, &mut adj)?;
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) -> Result<()> {
        let mut send = |v: Var, grad: Vec<f64>| {
            if !self.needs(v) {
                return;
            }
            match &mut adj[v.0] {
                Some(buf) => buf.iter_mut().zip(&grad).for_each(|(b, x)| *b += x),
                slot @ None => *slot = Some(grad),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let need = [self.needs(*input), self.needs(*weight), self.needs(*bias)];
                let grads =
                    ops::conv2d_backward(self.value(*input), self.value(*weight), *stride, *padding, g, need)?;
                if let Some(x) = grads.input {
                    send(*input, x);
                }
                if let Some(x) = grads.weight {
                    send(*weight, x);
                }
                if let Some(x) = grads.bias {
                    send(*bias, x);
                }
            }
            Op::InstanceNorm {
                input,
                scale,
                shift,
                cache,
            } => {
                let (gi, gs, gb) =
                    ops::instance_norm_backward(self.value(*input).shape(), self.value(*scale), cache, g);
                send(*input, gi);
                send(*scale, gs);
                send(*shift, gb);
            }
            Op::Relu(input) => send(*input, ops::relu_backward(self.value(*input), g)),
            Op::AvgPool { input, k } => send(*input, ops::avg_pool2d_backward(self.value(*input).shape(), *k, g)),
            Op::BatchedMatmulNt { a, b } => {
                let (ga, gb) = ops::batched_matmul_nt_backward(self.value(*a), self.value(*b), g);
                send(*a, ga);
                send(*b, gb);
            }
            Op::BilinearPool { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let gm = Tensor::new([va.shape()[0], va.shape()[1], vb.shape()[1]], g.to_vec())?;
                let (ga, gb) = ops::batched_matmul_nt_backward(va, vb, gm.data());
                send(*a, ga);
                send(*b, gb);
            }
            Op::GridPool { input, mode, argmax } => {
                let ng = self.value(*input).shape()[2];
                let mut gi = vec![0.0; g.len() * ng];
                for (k, (&go, &am)) in g.iter().zip(argmax).enumerate() {
                    match mode {
                        GridPool::Average => gi[k * ng..(k + 1) * ng].fill(go / ng as f64),
                        GridPool::Max => gi[k * ng + am] = go,
                    }
                }
                send(*input, gi);
            }
            Op::Reshape(input) => send(*input, g.to_vec()),
            Op::Sample { map, taps } => {
                let s = self.value(*map).shape();
                let (c, h, w) = (s[s.len() - 3], s[s.len() - 2], s[s.len() - 1]);
                let mut gm = vec![0.0; c * h * w];
                for (p, t) in taps.iter().enumerate() {
                    if let Some(t) = t {
                        for ch in 0..c {
                            t.scatter(&mut gm[ch * h * w..(ch + 1) * h * w], w, g[p * c + ch]);
                        }
                    }
                }
                send(*map, gm);
            }
            Op::GroupStack(parts) => {
                let s = self.value(parts[0]).shape();
                let (np, c, ng) = (s[0], s[1], parts.len());
                for (gi, part) in parts.iter().enumerate() {
                    if !self.needs(*part) {
                        continue;
                    }
                    let mut gp = vec![0.0; np * c];
                    for p in 0..np {
                        for ch in 0..c {
                            gp[p * c + ch] = g[(p * c + ch) * ng + gi];
                        }
                    }
                    send(*part, gp);
                }
            }
            Op::NormalizeRows { input, norms } => {
                let y = self.nodes[i].value.data();
                let d = self.value(*input).shape()[1];
                let mut gi = vec![0.0; y.len()];
                for (r, &n) in norms.iter().enumerate() {
                    if n == 0.0 {
                        continue;
                    }
                    let (yr, gr) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for k in 0..d {
                        gi[r * d + k] = (gr[k] - yr[k] * dot) / n;
                    }
                }
                send(*input, gi);
            }
            Op::GatherRows { input, rows } => {
                let s = self.value(*input).shape();
                let d = s[1];
                let mut gi = vec![0.0; s[0] * d];
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..d {
                        gi[r * d + j] += g[k * d + j];
                    }
                }
                send(*input, gi);
            }
            Op::Triplet {
                anchor,
                positive,
                negative,
                margin,
            } => {
                let (a, p, n) = (self.value(*anchor), self.value(*positive), self.value(*negative));
                let (rows, d) = (a.shape()[0], a.shape()[1]);
                let scale = g[0] / rows as f64;
                let terms = triplet_terms(a.data(), p.data(), n.data(), d, *margin);
                let mut ga = vec![0.0; a.len()];
                let mut gp = vec![0.0; a.len()];
                let mut gn = vec![0.0; a.len()];
                for (r, t) in terms.iter().enumerate() {
                    if t.hinge <= 0.0 {
                        continue;
                    }
                    for k in r * d..(r + 1) * d {
                        let up = if t.pos_dist > 0.0 {
                            (a.data()[k] - p.data()[k]) / t.pos_dist
                        } else {
                            0.0
                        };
                        let un = if t.neg_dist > 0.0 {
                            (a.data()[k] - n.data()[k]) / t.neg_dist
                        } else {
                            0.0
                        };
                        ga[k] = scale * (up - un);
                        gp[k] = -scale * up;
                        gn[k] = scale * un;
                    }
                }
                send(*anchor, ga);
                send(*positive, gp);
                send(*negative, gn);
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                send(*a, g.iter().zip(y).map(|(g, y)| g * y).collect());
                send(*b, g.iter().zip(x).map(|(g, x)| g * x).collect());
            }
            Op::Sum(input) => send(*input, vec![g[0]; self.value(*input).len()]),
        }
        Ok(())
    }
}

struct TripletTerm {
    pos_dist: f64,
    neg_dist: f64,
    hinge: f64,
}

fn triplet_terms(a: &[f64], p: &[f64], n: &[f64], d: usize, margin: f64) -> Vec<TripletTerm> {
    let dist = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt();
    a.chunks(d)
        .zip(p.chunks(d))
        .zip(n.chunks(d))
        .map(|((a, p), n)| {
            let (pos_dist, neg_dist) = (dist(a, p), dist(a, n));
            TripletTerm {
                pos_dist,
                neg_dist,
                hinge: (pos_dist - neg_dist + margin).max(0.0),
            }
        })
        .collect()
}
