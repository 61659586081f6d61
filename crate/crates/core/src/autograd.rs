//! Reverse-mode automatic differentiation over dense arrays.
//!
//! A [`Graph`] records every operation of one forward pass. Leaves created
//! with `requires_grad = false` (frozen parameters, data) never receive
//! gradients, and no backward work is done for sub-graphs that cannot reach
//! a trainable leaf.

use std::collections::{BTreeMap, HashMap};

use ndarray::{ArrayD, Axis, Ix2, Ix3, Ix4, IxDyn};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels::{self, GroupStats};
use crate::scalar::Scalar;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Add(Var, Var),
    AddChannel(Var, Var),
    Silu(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: GroupStats<T>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Upsample2x(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        scale: T,
        probs: Vec<ndarray::Array2<T>>,
    },
    Mse {
        pred: Var,
        target: ArrayD<T>,
    },
}

struct Node<T> {
    value: ArrayD<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    named: HashMap<String, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims_eq(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            named: HashMap::new(),
        }
    }

    fn push(&mut self, value: ArrayD<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Leaf => false,
            _ => parents.iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bytes held by nodes that participate in the backward pass.
    pub fn retained_bytes(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.requires_grad)
            .map(|n| n.value.len() * std::mem::size_of::<T>())
            .sum()
    }

    pub fn constant(&mut self, value: ArrayD<T>) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    pub fn leaf(&mut self, value: ArrayD<T>, requires_grad: bool) -> Var {
        let v = self.push(value, Op::Leaf, &[]);
        self.nodes[v.0].requires_grad = requires_grad;
        v
    }

    /// Leaf bound to a parameter name; repeated lookups return the same node.
    pub fn param(&mut self, name: &str, value: &ArrayD<T>, requires_grad: bool) -> Var {
        if let Some(&v) = self.named.get(name) {
            return v;
        }
        let v = self.leaf(value.clone(), requires_grad);
        self.named.insert(name.to_string(), v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        dims_eq(self.shape(a), self.shape(b), "add")?;
        let value = self.value(a) + self.value(b);
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Adds a per-(sample, channel) vector `(N, C)` to `(N, C, ...)`.
    pub fn add_channel(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        dims_eq(&xs[..2], self.shape(bias), "add_channel")?;
        let mut value = self.value(x).clone();
        let b = self.value(bias);
        for n in 0..xs[0] {
            for c in 0..xs[1] {
                let bv = b[[n, c]];
                value
                    .index_axis_mut(Axis(0), n)
                    .index_axis_mut(Axis(0), c)
                    .mapv_inplace(|v| v + bv);
            }
        }
        Ok(self.push(value, Op::AddChannel(x, bias), &[x, bias]))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v / (T::one() + (-v).exp()));
        self.push(value, Op::Silu(x), &[x])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] {
            return Err(Error::shape(format!("conv2d input {xs:?} weight {ws:?}")));
        }
        if let Some(b) = b {
            dims_eq(self.shape(b), &ws[..1], "conv2d bias")?;
        }
        let out = {
            let xv = self.value(x).view().into_dimensionality::<Ix4>().expect("rank 4");
            let wv = self.value(w).view().into_dimensionality::<Ix4>().expect("rank 4");
            let bv = b.map(|b| self.value(b).view().into_dimensionality().expect("rank 1"));
            kernels::conv2d_forward(xv, wv, bv, stride, pad)
        };
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(out.into_dyn(), Op::Conv2d { x, w, b, stride, pad }, &parents))
    }

    /// Group normalization over `(N, C, ...)` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || !xs[1].is_multiple_of(groups) {
            return Err(Error::shape(format!("group_norm: {xs:?} with {groups} groups")));
        }
        dims_eq(self.shape(gamma), &xs[1..2], "group_norm gamma")?;
        dims_eq(self.shape(beta), &xs[1..2], "group_norm beta")?;
        let l: usize = xs[2..].iter().product();
        let (y, stats) = {
            let xv = self.value(x).view().into_shape_with_order((xs[0], xs[1], l)).expect("contiguous");
            let g = self.value(gamma).view().into_dimensionality().expect("rank 1");
            let b = self.value(beta).view().into_dimensionality().expect("rank 1");
            kernels::group_norm_forward(xv, g, b, groups)
        };
        let y = y.into_shape_with_order(IxDyn(&xs)).expect("reshape back");
        Ok(self.push(
            y,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
            &[x, gamma, beta],
        ))
    }

    /// Affine map over the last axis; each leading sample is its own product.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.last() != Some(&ws[0]) || xs.len() < 2 {
            return Err(Error::shape(format!("linear input {xs:?} weight {ws:?}")));
        }
        if let Some(b) = b {
            dims_eq(self.shape(b), &ws[1..], "linear bias")?;
        }
        let n = xs[0];
        let rows: usize = xs[1..xs.len() - 1].iter().product();
        let mut out_shape = xs.clone();
        *out_shape.last_mut().expect("non-empty") = ws[1];
        let value = {
            let xv = self.value(x).view().into_shape_with_order((n, rows, ws[0])).expect("contiguous");
            let wv = self.value(w).view().into_dimensionality::<Ix2>().expect("rank 2");
            let bv = b.map(|b| self.value(b));
            let per: Vec<_> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let mut y = xv.index_axis(Axis(0), i).dot(&wv);
                    if let Some(bv) = bv {
                        for mut row in y.outer_iter_mut() {
                            row.zip_mut_with(bv, |a, &bb| *a += bb);
                        }
                    }
                    y
                })
                .collect();
            let mut out = ndarray::Array3::<T>::zeros((n, rows, ws[1]));
            for (i, y) in per.into_iter().enumerate() {
                out.index_axis_mut(Axis(0), i).assign(&y);
            }
            out.into_shape_with_order(IxDyn(&out_shape)).expect("reshape")
        };
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(value, Op::Linear { x, w, b }, &parents))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::shape(format!("embedding table {ts:?}")));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= ts[0]) {
            return Err(Error::Index(format!("token id {bad} outside vocabulary of {}", ts[0])));
        }
        let mut shape = ids_shape.to_vec();
        shape.push(ts[1]);
        let tv = self.value(table);
        let mut value = ArrayD::<T>::zeros(IxDyn(&[ids.len(), ts[1]]));
        for (r, &id) in ids.iter().enumerate() {
            value.index_axis_mut(Axis(0), r).assign(&tv.index_axis(Axis(0), id));
        }
        let value = value.into_shape_with_order(IxDyn(&shape)).map_err(|e| Error::shape(e.to_string()))?;
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self
            .value(x)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .map_err(|e| Error::shape(format!("reshape {:?} -> {shape:?}: {e}", self.shape(x))))?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Var {
        let value = self
            .value(x)
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .into_owned();
        self.push(value, Op::Permute(x, axes.to_vec()), &[x])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(axis), &views).map_err(|e| Error::shape(format!("concat: {e}")))?;
        let value = kernels::standard(value);
        Ok(self.push(value, Op::Concat(parts.to_vec(), axis), parts))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let value = {
            let xv = self
                .value(x)
                .view()
                .into_dimensionality::<Ix4>()
                .map_err(|e| Error::shape(format!("upsample: {e}")))?;
            kernels::upsample_nearest2x(xv).into_dyn()
        };
        Ok(self.push(value, Op::Upsample2x(x), &[x]))
    }

    /// Batched scaled dot-product attention: q `(N, Lq, d)`, k `(N, Lk, d)`, v `(N, Lk, dv)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, scale: T) -> Result<Var> {
        let (qs, ks, vs) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        if qs.len() != 3 || ks.len() != 3 || vs.len() != 3 || qs[0] != ks[0] || ks[0] != vs[0] || qs[2] != ks[2] || ks[1] != vs[1] {
            return Err(Error::shape(format!("attention q {qs:?} k {ks:?} v {vs:?}")));
        }
        let (qv, kv, vv) = (
            self.value(q).view().into_dimensionality::<Ix3>().expect("rank 3"),
            self.value(k).view().into_dimensionality::<Ix3>().expect("rank 3"),
            self.value(v).view().into_dimensionality::<Ix3>().expect("rank 3"),
        );
        let per: Vec<_> = (0..qs[0])
            .into_par_iter()
            .map(|i| {
                kernels::attention_forward(
                    qv.index_axis(Axis(0), i),
                    kv.index_axis(Axis(0), i),
                    vv.index_axis(Axis(0), i),
                    scale,
                )
            })
            .collect();
        let mut out = ndarray::Array3::<T>::zeros((qs[0], qs[1], vs[2]));
        let mut probs = Vec::with_capacity(qs[0]);
        for (i, (o, p)) in per.into_iter().enumerate() {
            out.index_axis_mut(Axis(0), i).assign(&o);
            probs.push(p);
        }
        Ok(self.push(out.into_dyn(), Op::Attention { q, k, v, scale, probs }, &[q, k, v]))
    }

    /// Mean squared error against a constant target; returns a scalar node.
    pub fn mse(&mut self, pred: Var, target: ArrayD<T>) -> Result<Var> {
        dims_eq(self.shape(pred), target.shape(), "mse")?;
        let diff = self.value(pred) - &target;
        let n = T::of(diff.len() as f64);
        let loss = diff.iter().map(|&d| d * d).sum::<T>() / n;
        Ok(self.push(ArrayD::from_elem(IxDyn(&[]), loss), Op::Mse { pred, target }, &[pred]))
    }

    pub fn scalar(&self, v: Var) -> T {
        *self.value(v).iter().next().expect("non-empty")
    }

    /// Propagates d(output)/d(node) from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients<T> {
        let mut grads: Vec<Option<ArrayD<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(ArrayD::from_elem(self.value(output).raw_dim(), T::one()));
        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[id].take() else { continue };
            self.backprop_node(node, &dy, &mut grads);
            grads[id] = Some(dy);
        }
        Gradients { grads }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node<T>, dy: &ArrayD<T>, grads: &mut [Option<ArrayD<T>>]) {
        let mut acc = |v: Var, g: ArrayD<T>| {
            if !self.needs(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, dy.clone());
                acc(*b, dy.clone());
            }
            Op::AddChannel(x, bias) => {
                acc(*x, dy.clone());
                if self.needs(*bias) {
                    let s = dy.shape();
                    let l: usize = s[2..].iter().product();
                    let flat = dy.view().into_shape_with_order((s[0], s[1], l)).expect("contiguous");
                    acc(*bias, flat.sum_axis(Axis(2)).into_dyn());
                }
            }
            Op::Silu(x) => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    let mut g = dy.clone();
                    g.zip_mut_with(xv, |d, &v| {
                        let s = T::one() / (T::one() + (-v).exp());
                        *d = *d * s * (T::one() + v * (T::one() - s));
                    });
                    acc(*x, g);
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let need = (self.needs(*x), self.needs(*w), b.map(|b| self.needs(b)).unwrap_or(false));
                if !(need.0 || need.1 || need.2) {
                    return;
                }
                let cg = kernels::conv2d_backward(
                    self.value(*x).view().into_dimensionality().expect("rank 4"),
                    self.value(*w).view().into_dimensionality().expect("rank 4"),
                    dy.view().into_dimensionality().expect("rank 4"),
                    *stride,
                    *pad,
                    need,
                );
                if let Some(dx) = cg.dx {
                    acc(*x, dx.into_dyn());
                }
                if let Some(dw) = cg.dw {
                    acc(*w, dw.into_dyn());
                }
                if let (Some(b), Some(db)) = (b, cg.db) {
                    acc(*b, db.into_dyn());
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            } => {
                let s = dy.shape().to_vec();
                let l: usize = s[2..].iter().product();
                let (dx, dg, db) = kernels::group_norm_backward(
                    self.value(*x).view().into_shape_with_order((s[0], s[1], l)).expect("contiguous"),
                    self.value(*gamma).view().into_dimensionality().expect("rank 1"),
                    stats,
                    dy.view().into_shape_with_order((s[0], s[1], l)).expect("contiguous"),
                    *groups,
                );
                acc(*x, dx.into_shape_with_order(IxDyn(&s)).expect("reshape"));
                acc(*gamma, dg.into_dyn());
                acc(*beta, db.into_dyn());
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let din = *xs.last().expect("non-empty");
                let dout = *dy.shape().last().expect("non-empty");
                let rows = xs.iter().product::<usize>() / din;
                let dy2 = dy.view().into_shape_with_order((rows, dout)).expect("contiguous");
                let wv = self.value(*w).view().into_dimensionality::<Ix2>().expect("rank 2");
                if self.needs(*x) {
                    let dx = dy2.dot(&wv.t());
                    acc(*x, dx.into_shape_with_order(IxDyn(xs)).expect("reshape"));
                }
                if self.needs(*w) {
                    let x2 = self.value(*x).view().into_shape_with_order((rows, din)).expect("contiguous");
                    acc(*w, x2.t().dot(&dy2).into_dyn());
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        acc(*b, dy2.sum_axis(Axis(0)).into_dyn());
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let ts = self.shape(*table);
                let mut g = ArrayD::<T>::zeros(IxDyn(ts));
                let d = ts[1];
                let dy2 = dy.view().into_shape_with_order((ids.len(), d)).expect("contiguous");
                for (r, &id) in ids.iter().enumerate() {
                    let mut row = g.index_axis_mut(Axis(0), id);
                    row += &dy2.row(r);
                }
                acc(*table, g);
            }
            Op::Reshape(x) => {
                let s = self.shape(*x).to_vec();
                acc(*x, dy.clone().into_shape_with_order(IxDyn(&s)).expect("reshape"));
            }
            Op::Permute(x, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                acc(
                    *x,
                    dy.view().permuted_axes(IxDyn(&inv)).as_standard_layout().into_owned(),
                );
            }
            Op::Concat(parts, axis) => {
                let mut start = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.needs(p) {
                        let g = dy
                            .slice_axis(Axis(*axis), ndarray::Slice::from(start..start + len))
                            .as_standard_layout()
                            .into_owned();
                        acc(p, g);
                    }
                    start += len;
                }
            }
            Op::Upsample2x(x) => {
                let g = kernels::upsample_nearest2x_backward(dy.view().into_dimensionality().expect("rank 4"));
                acc(*x, g.into_dyn());
            }
            Op::Attention { q, k, v, scale, probs } => {
                let (qv, kv, vv) = (
                    self.value(*q).view().into_dimensionality::<Ix3>().expect("rank 3"),
                    self.value(*k).view().into_dimensionality::<Ix3>().expect("rank 3"),
                    self.value(*v).view().into_dimensionality::<Ix3>().expect("rank 3"),
                );
                let dyv = dy.view().into_dimensionality::<Ix3>().expect("rank 3");
                let per: Vec<_> = (0..qv.dim().0)
                    .into_par_iter()
                    .map(|i| {
                        kernels::attention_backward(
                            qv.index_axis(Axis(0), i),
                            kv.index_axis(Axis(0), i),
                            vv.index_axis(Axis(0), i),
                            probs[i].view(),
                            dyv.index_axis(Axis(0), i),
                            *scale,
                        )
                    })
                    .collect();
                let mut dq = ndarray::Array3::<T>::zeros(qv.raw_dim());
                let mut dk = ndarray::Array3::<T>::zeros(kv.raw_dim());
                let mut dv = ndarray::Array3::<T>::zeros(vv.raw_dim());
                for (i, (a, b, c)) in per.into_iter().enumerate() {
                    dq.index_axis_mut(Axis(0), i).assign(&a);
                    dk.index_axis_mut(Axis(0), i).assign(&b);
                    dv.index_axis_mut(Axis(0), i).assign(&c);
                }
                acc(*q, dq.into_dyn());
                acc(*k, dk.into_dyn());
                acc(*v, dv.into_dyn());
            }
            Op::Mse { pred, target } => {
                let scale = dy.iter().next().copied().unwrap_or_else(T::one) * T::of(2.0 / target.len() as f64);
                let g = (self.value(*pred) - target).mapv(|d| d * scale);
                acc(*pred, g);
            }
        }
    }

    /// Names bound through [`Graph::param`].
    pub fn named_vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.named.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

pub struct Gradients<T> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every trainable named parameter, in name order.
    pub fn named(&self, graph: &Graph<T>) -> BTreeMap<String, ArrayD<T>> {
        graph
            .named_vars()
            .filter(|(_, v)| graph.requires_grad(*v))
            .map(|(name, v)| {
                let g = self
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| ArrayD::zeros(graph.value(v).raw_dim()));
                (name.to_string(), g)
            })
            .collect()
    }
}
