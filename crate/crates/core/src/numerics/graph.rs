//! Reverse-mode autodiff over [`Tensor`]s.
//!
//! A [`Graph`] records one forward pass. Every op pushes a node holding its value and
//! a closure mapping the output gradient to parent gradients; [`Graph::backward`]
//! walks the tape in reverse. Graphs are cheap and single-use: build one per episode.

use crate::error::{Error, Result};

use super::kernels::{self, ConvGeometry, EPS_NORM};
use super::{Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>>>;

/// Inputs handed to a node's backward closure.
pub struct BackwardCtx<'a, T> {
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    pub grad: &'a Tensor<T>,
    pub needs: Vec<bool>,
}

struct Node<T> {
    op: &'static str,
    value: Tensor<T>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    tracks_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    first_non_finite: Option<&'static str>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims2<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, format!("expected rank-2, got {s:?}"))),
    }
}

fn dims3<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [h, w, c] => Ok((*h, *w, *c)),
        s => Err(Error::shape(op, format!("expected [H, W, C], got {s:?}"))),
    }
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            first_non_finite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        op: &'static str,
        value: Tensor<T>,
        parents: Vec<usize>,
        backward: BackwardFn<T>,
    ) -> Var {
        let tracks_grad = parents.iter().any(|&p| self.nodes[p].tracks_grad);
        if self.first_non_finite.is_none() && !value.is_finite() {
            self.first_non_finite = Some(op);
        }
        self.nodes.push(Node {
            op,
            value,
            parents,
            backward: tracks_grad.then_some(backward),
            tracks_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let tracks_grad = tensor.requires_grad();
        if self.first_non_finite.is_none() && !tensor.is_finite() {
            self.first_non_finite = Some("leaf");
        }
        self.nodes.push(Node {
            op: "leaf",
            value: tensor,
            parents: Vec::new(),
            backward: None,
            tracks_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_grad(false))
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn tracks_grad(&self, var: Var) -> bool {
        self.nodes[var.0].tracks_grad
    }

    /// Name of the first op whose output contained NaN or Inf, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.first_non_finite
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite {
            Some(op) => Err(Error::NonFinite(op.to_string())),
            None => Ok(()),
        }
    }

    /// Backpropagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.check_finite()?;
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", root.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.value.shape().to_vec(), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                output: &node.value,
                grad: &grad,
                needs: node
                    .parents
                    .iter()
                    .map(|&p| self.nodes[p].tracks_grad)
                    .collect(),
            };
            let parent_grads = backward(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len(), "{}", node.op);
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p].tracks_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        for (idx, slot) in grads.iter_mut().enumerate() {
            if !self.nodes[idx].parents.is_empty() {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }

    // ---- linear algebra -------------------------------------------------------------

    /// `a (m×k) · b (k×n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul", self.value(a))?;
        let (k2, n) = dims2("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, T::zero(), &mut out);
        let value = Tensor::from_parts(vec![m, n], out);
        Ok(self.push(
            "matmul",
            value,
            vec![a.0, b.0],
            Box::new(move |ctx| {
                let (av, bv, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
                let ga = ctx.needs[0].then(|| {
                    let mut ga = vec![T::zero(); m * k];
                    kernels::gemm(m, n, k, g.data(), false, bv.data(), true, T::zero(), &mut ga);
                    Tensor::from_parts(vec![m, k], ga)
                });
                let gb = ctx.needs[1].then(|| {
                    let mut gb = vec![T::zero(); k * n];
                    kernels::gemm(k, m, n, av.data(), true, g.data(), false, T::zero(), &mut gb);
                    Tensor::from_parts(vec![k, n], gb)
                });
                vec![ga, gb]
            }),
        ))
    }

    /// `aᵀ · b` for `a: k×m`, `b: k×n`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        let (k, m) = dims2("matmul_tn", self.value(a))?;
        let (k2, n) = dims2("matmul_tn", self.value(b))?;
        if k != k2 {
            return Err(Error::shape("matmul_tn", format!("({k}x{m})ᵀ · {k2}x{n}")));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::gemm(m, k, n, self.value(a).data(), true, self.value(b).data(), false, T::zero(), &mut out);
        let value = Tensor::from_parts(vec![m, n], out);
        Ok(self.push(
            "matmul_tn",
            value,
            vec![a.0, b.0],
            Box::new(move |ctx| {
                let (av, bv, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
                let ga = ctx.needs[0].then(|| {
                    let mut ga = vec![T::zero(); k * m];
                    kernels::gemm(k, n, m, bv.data(), false, g.data(), true, T::zero(), &mut ga);
                    Tensor::from_parts(vec![k, m], ga)
                });
                let gb = ctx.needs[1].then(|| {
                    let mut gb = vec![T::zero(); k * n];
                    kernels::gemm(k, m, n, av.data(), false, g.data(), false, T::zero(), &mut gb);
                    Tensor::from_parts(vec![k, n], gb)
                });
                vec![ga, gb]
            }),
        ))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul_nt", self.value(a))?;
        let (n, k2) = dims2("matmul_nt", self.value(b))?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", format!("{m}x{k} · ({n}x{k2})ᵀ")));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), true, T::zero(), &mut out);
        let value = Tensor::from_parts(vec![m, n], out);
        Ok(self.push(
            "matmul_nt",
            value,
            vec![a.0, b.0],
            Box::new(move |ctx| {
                let (av, bv, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
                let ga = ctx.needs[0].then(|| {
                    let mut ga = vec![T::zero(); m * k];
                    kernels::gemm(m, n, k, g.data(), false, bv.data(), false, T::zero(), &mut ga);
                    Tensor::from_parts(vec![m, k], ga)
                });
                let gb = ctx.needs[1].then(|| {
                    let mut gb = vec![T::zero(); n * k];
                    kernels::gemm(n, m, k, g.data(), true, av.data(), false, T::zero(), &mut gb);
                    Tensor::from_parts(vec![n, k], gb)
                });
                vec![ga, gb]
            }),
        ))
    }

    /// `x · w + b` over the last axis of `x`; leading axes are preserved.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let (rows, cols) = self.value(x).as_matrix_dims();
        let flat = self.reshape(x, vec![rows, cols])?;
        let mut y = self.matmul(flat, w)?;
        if let Some(b) = b {
            y = self.add_bias(y, b)?;
        }
        let out_cols = self.value(y).shape()[1];
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = out_cols;
        self.reshape(y, out_shape)
    }

    // ---- elementwise ----------------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let av = self.value(a);
        let bv = self.value(b);
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| *x + *y).collect();
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        Ok(self.push(
            "add",
            value,
            vec![a.0, b.0],
            Box::new(|ctx| {
                vec![
                    ctx.needs[0].then(|| ctx.grad.clone()),
                    ctx.needs[1].then(|| ctx.grad.clone()),
                ]
            }),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let av = self.value(a);
        let bv = self.value(b);
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| *x - *y).collect();
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        Ok(self.push(
            "sub",
            value,
            vec![a.0, b.0],
            Box::new(|ctx| {
                vec![
                    ctx.needs[0].then(|| ctx.grad.clone()),
                    ctx.needs[1].then(|| ctx.grad.map(|v| -v)),
                ]
            }),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let av = self.value(a);
        let bv = self.value(b);
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| *x * *y).collect();
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        Ok(self.push(
            "mul",
            value,
            vec![a.0, b.0],
            Box::new(|ctx| {
                let g = ctx.grad;
                let prod = |other: &Tensor<T>| {
                    Tensor::from_parts(
                        g.shape().to_vec(),
                        g.data().iter().zip(other.data()).map(|(x, y)| *x * *y).collect(),
                    )
                };
                vec![
                    ctx.needs[0].then(|| prod(ctx.inputs[1])),
                    ctx.needs[1].then(|| prod(ctx.inputs[0])),
                ]
            }),
        ))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|v| v * s);
        self.push(
            "scale",
            value,
            vec![a.0],
            Box::new(move |ctx| vec![Some(ctx.grad.map(|v| v * s))]),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(T::zero()));
        self.push(
            "relu",
            value,
            vec![a.0],
            Box::new(|ctx| {
                let x = ctx.inputs[0];
                let data = ctx
                    .grad
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(g, v)| if *v > T::zero() { *g } else { T::zero() })
                    .collect();
                vec![Some(Tensor::from_parts(x.shape().to_vec(), data))]
            }),
        )
    }

    /// Adds a length-`n` bias to every row of an `m×n` (or `[.., n]`) tensor.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.value(a).as_matrix_dims();
        if self.value(bias).numel() != cols {
            return Err(Error::shape(
                "add_bias",
                format!("{cols} columns vs bias {:?}", self.value(bias).shape()),
            ));
        }
        let av = self.value(a);
        let bv = self.value(bias).data();
        let mut data = av.data().to_vec();
        for r in 0..rows {
            for (x, b) in data[r * cols..(r + 1) * cols].iter_mut().zip(bv) {
                *x += *b;
            }
        }
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        let bias_shape = self.value(bias).shape().to_vec();
        Ok(self.push(
            "add_bias",
            value,
            vec![a.0, bias.0],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let gb = ctx.needs[1].then(|| {
                    let mut acc = vec![T::zero(); cols];
                    for r in 0..rows {
                        for (s, v) in acc.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                            *s += *v;
                        }
                    }
                    Tensor::from_parts(bias_shape.clone(), acc)
                });
                vec![ctx.needs[0].then(|| ctx.grad.clone()), gb]
            }),
        ))
    }

    // ---- structural -----------------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).clone().with_grad(false).reshape(shape)?;
        let in_shape = self.value(a).shape().to_vec();
        Ok(self.push(
            "reshape",
            value,
            vec![a.0],
            Box::new(move |ctx| {
                vec![Some(Tensor::from_parts(in_shape.clone(), ctx.grad.data().to_vec()))]
            }),
        ))
    }

    /// Concatenates `m×p` and `m×q` along columns.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, p) = self.value(a).as_matrix_dims();
        let (m2, q) = self.value(b).as_matrix_dims();
        if m != m2 {
            return Err(Error::shape("concat_cols", format!("{m} rows vs {m2} rows")));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut data = Vec::with_capacity(m * (p + q));
        for r in 0..m {
            data.extend_from_slice(&av[r * p..(r + 1) * p]);
            data.extend_from_slice(&bv[r * q..(r + 1) * q]);
        }
        let a_shape = self.value(a).shape().to_vec();
        let b_shape = self.value(b).shape().to_vec();
        let mut out_shape = a_shape.clone();
        if out_shape.len() < 2 {
            out_shape = vec![m, p + q];
        } else {
            *out_shape.last_mut().unwrap() = p + q;
        }
        let value = Tensor::from_parts(out_shape, data);
        Ok(self.push(
            "concat_cols",
            value,
            vec![a.0, b.0],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let ga = ctx.needs[0].then(|| {
                    let mut out = Vec::with_capacity(m * p);
                    for r in 0..m {
                        out.extend_from_slice(&g[r * (p + q)..r * (p + q) + p]);
                    }
                    Tensor::from_parts(a_shape.clone(), out)
                });
                let gb = ctx.needs[1].then(|| {
                    let mut out = Vec::with_capacity(m * q);
                    for r in 0..m {
                        out.extend_from_slice(&g[r * (p + q) + p..(r + 1) * (p + q)]);
                    }
                    Tensor::from_parts(b_shape.clone(), out)
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Output row `i` is row `index[i]` of `a (n×c)`; backward scatter-adds.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let (n, c) = dims2("gather_rows", self.value(a))?;
        if let Some(bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather_rows", format!("index {bad} out of {n} rows")));
        }
        let av = self.value(a).data();
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            data.extend_from_slice(&av[i * c..(i + 1) * c]);
        }
        let value = Tensor::from_parts(vec![index.len(), c], data);
        let index = index.to_vec();
        Ok(self.push(
            "gather_rows",
            value,
            vec![a.0],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut out = vec![T::zero(); n * c];
                for (r, &i) in index.iter().enumerate() {
                    for (o, v) in out[i * c..(i + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]) {
                        *o += *v;
                    }
                }
                vec![Some(Tensor::from_parts(vec![n, c], out))]
            }),
        ))
    }

    /// Repeats a single row `1×c` into `m×c`.
    pub fn broadcast_rows(&mut self, a: Var, m: usize) -> Result<Var> {
        let index = vec![0; m];
        let (rows, c) = self.value(a).as_matrix_dims();
        if rows != 1 {
            return Err(Error::shape("broadcast_rows", format!("expected one row, got {rows}")));
        }
        let flat = self.reshape(a, vec![1, c])?;
        self.gather_rows(flat, &index)
    }

    // ---- similarity / attention -----------------------------------------------------

    /// Pairwise cosine similarity between rows of `a (m×c)` and `b (n×c)`.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, c) = dims2("cosine", self.value(a))?;
        let (n, c2) = dims2("cosine", self.value(b))?;
        if c != c2 {
            return Err(Error::shape("cosine", format!("channels {c} vs {c2}")));
        }
        let value = Tensor::from_parts(
            vec![m, n],
            kernels::cosine_matrix(self.value(a).data(), m, self.value(b).data(), n, c),
        );
        Ok(self.push(
            "cosine",
            value,
            vec![a.0, b.0],
            Box::new(move |ctx| {
                let (av, bv) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let g = ctx.grad.data();
                let na = kernels::row_norms(av, m, c);
                let nb = kernels::row_norms(bv, n, c);
                let mut dots = vec![T::zero(); m * n];
                kernels::gemm(m, c, n, av, false, bv, true, T::zero(), &mut dots);
                let eps = T::lit(EPS_NORM);
                let mut gd = vec![T::zero(); m * n];
                let mut h_row = vec![T::zero(); m];
                let mut h_col = vec![T::zero(); n];
                for i in 0..m {
                    for j in 0..n {
                        let d = na[i] * nb[j] + eps;
                        let gij = g[i * n + j];
                        gd[i * n + j] = gij / d;
                        let h = gij * dots[i * n + j] / (d * d);
                        h_row[i] += h * nb[j];
                        h_col[j] += h * na[i];
                    }
                }
                let ga = ctx.needs[0].then(|| {
                    let mut out = vec![T::zero(); m * c];
                    kernels::gemm(m, n, c, &gd, false, bv, false, T::zero(), &mut out);
                    for i in 0..m {
                        if na[i] > T::zero() {
                            let s = h_row[i] / na[i];
                            for (o, x) in out[i * c..(i + 1) * c].iter_mut().zip(&av[i * c..(i + 1) * c]) {
                                *o -= s * *x;
                            }
                        }
                    }
                    Tensor::from_parts(vec![m, c], out)
                });
                let gb = ctx.needs[1].then(|| {
                    let mut out = vec![T::zero(); n * c];
                    kernels::gemm(n, m, c, &gd, true, av, false, T::zero(), &mut out);
                    for j in 0..n {
                        if nb[j] > T::zero() {
                            let s = h_col[j] / nb[j];
                            for (o, x) in out[j * c..(j + 1) * c].iter_mut().zip(&bv[j * c..(j + 1) * c]) {
                                *o -= s * *x;
                            }
                        }
                    }
                    Tensor::from_parts(vec![n, c], out)
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Row-wise softmax of an `m×n` matrix.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = dims2("softmax_rows", self.value(a))?;
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(n.max(1)).take(m) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let value = Tensor::from_parts(vec![m, n], data);
        Ok(self.push(
            "softmax_rows",
            value,
            vec![a.0],
            Box::new(move |ctx| {
                let y = ctx.output.data();
                let g = ctx.grad.data();
                let mut out = vec![T::zero(); m * n];
                for r in 0..m {
                    let ys = &y[r * n..(r + 1) * n];
                    let gs = &g[r * n..(r + 1) * n];
                    let dot: T = ys.iter().zip(gs).map(|(a, b)| *a * *b).sum();
                    for j in 0..n {
                        out[r * n + j] = ys[j] * (gs[j] - dot);
                    }
                }
                vec![Some(Tensor::from_parts(vec![m, n], out))]
            }),
        ))
    }

    // ---- losses ---------------------------------------------------------------------

    /// Weighted mean softmax cross-entropy over rows of `logits (m×k)`.
    ///
    /// `weights = None` weighs every row 1. A zero total weight yields a zero loss.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: Option<&[T]>) -> Result<Var> {
        let (m, k) = self.value(logits).as_matrix_dims();
        if targets.len() != m {
            return Err(Error::shape("cross_entropy", format!("{m} rows vs {} targets", targets.len())));
        }
        if let Some(t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::shape("cross_entropy", format!("target {t} out of {k} classes")));
        }
        let w: Vec<T> = match weights {
            Some(w) if w.len() != m => {
                return Err(Error::shape("cross_entropy", format!("{m} rows vs {} weights", w.len())))
            }
            Some(w) => w.to_vec(),
            None => vec![T::one(); m],
        };
        let total_w: T = w.iter().copied().sum();
        let x = self.value(logits).data();
        let mut probs = vec![T::zero(); m * k];
        let mut loss = T::zero();
        for r in 0..m {
            let row = &x[r * k..(r + 1) * k];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let se: T = row.iter().map(|v| (*v - mx).exp()).sum();
            let lse = mx + se.ln();
            for j in 0..k {
                probs[r * k + j] = (row[j] - lse).exp();
            }
            loss += w[r] * (lse - row[targets[r]]);
        }
        let norm = if total_w > T::zero() { T::one() / total_w } else { T::zero() };
        let value = Tensor::scalar(loss * norm);
        let targets = targets.to_vec();
        let in_shape = self.value(logits).shape().to_vec();
        Ok(self.push(
            "cross_entropy",
            value,
            vec![logits.0],
            Box::new(move |ctx| {
                let g = ctx.grad.data()[0] * norm;
                let mut out = probs.clone();
                for r in 0..m {
                    out[r * k + targets[r]] -= T::one();
                    let s = g * w[r];
                    for v in &mut out[r * k..(r + 1) * k] {
                        *v *= s;
                    }
                }
                vec![Some(Tensor::from_parts(in_shape.clone(), out))]
            }),
        ))
    }

    /// Mean sigmoid binary cross-entropy with per-entry targets in `[0, 1]`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        let n = self.value(logits).numel();
        if targets.len() != n {
            return Err(Error::shape("bce_with_logits", format!("{n} logits vs {} targets", targets.len())));
        }
        let x = self.value(logits).data();
        let mut loss = T::zero();
        for (v, t) in x.iter().zip(targets) {
            // max(x,0) - x t + log(1 + exp(-|x|))
            loss += v.max(T::zero()) - *v * *t + (-v.abs()).exp().ln_1p();
        }
        let inv_n = T::one() / T::lit(n as f64);
        let value = Tensor::scalar(loss * inv_n);
        let targets = targets.to_vec();
        let in_shape = self.value(logits).shape().to_vec();
        Ok(self.push(
            "bce_with_logits",
            value,
            vec![logits.0],
            Box::new(move |ctx| {
                let g = ctx.grad.data()[0] * inv_n;
                let x = ctx.inputs[0].data();
                let data = x
                    .iter()
                    .zip(&targets)
                    .map(|(v, t)| {
                        let s = T::one() / (T::one() + (-*v).exp());
                        g * (s - *t)
                    })
                    .collect();
                vec![Some(Tensor::from_parts(in_shape.clone(), data))]
            }),
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let shape = self.value(a).shape().to_vec();
        self.push(
            "sum",
            value,
            vec![a.0],
            Box::new(move |ctx| vec![Some(Tensor::full(shape.clone(), ctx.grad.data()[0]))]),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::lit(self.value(a).numel() as f64);
        let s = self.sum(a);
        self.scale(s, T::one() / n)
    }

    // ---- convolution / resampling ---------------------------------------------------

    /// 2D convolution of `x: [H, W, Cin]` with `w: [k*k*Cin, Cout]` (patch order `(ky, kx, c)`).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let (h, wd, cin) = dims3("conv2d", self.value(x))?;
        let (rows, cout) = dims2("conv2d", self.value(w))?;
        let kk = geom.kernel * geom.kernel * cin;
        if rows != kk {
            return Err(Error::shape(
                "conv2d",
                format!("weight rows {rows} != k*k*cin = {kk}"),
            ));
        }
        let ho = geom.output_dim(h);
        let wo = geom.output_dim(wd);
        let cols = kernels::im2col(self.value(x).data(), h, wd, cin, geom);
        let mut out = vec![T::zero(); ho * wo * cout];
        kernels::gemm(ho * wo, kk, cout, &cols, false, self.value(w).data(), false, T::zero(), &mut out);
        let value = Tensor::from_parts(vec![ho, wo, cout], out);
        let y = self.push(
            "conv2d",
            value,
            vec![x.0, w.0],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let gw = ctx.needs[1].then(|| {
                    let cols = kernels::im2col(ctx.inputs[0].data(), h, wd, cin, geom);
                    let mut gw = vec![T::zero(); kk * cout];
                    kernels::gemm(kk, ho * wo, cout, &cols, true, g, false, T::zero(), &mut gw);
                    Tensor::from_parts(vec![kk, cout], gw)
                });
                let gx = ctx.needs[0].then(|| {
                    let mut gcols = vec![T::zero(); ho * wo * kk];
                    kernels::gemm(ho * wo, cout, kk, g, false, ctx.inputs[1].data(), true, T::zero(), &mut gcols);
                    Tensor::from_parts(vec![h, wd, cin], kernels::col2im(&gcols, h, wd, cin, geom))
                });
                vec![gx, gw]
            }),
        );
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    /// Bilinear resize of `[H, W, C]` to `[oh, ow, C]`.
    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let (h, w, c) = dims3("resize_bilinear", self.value(x))?;
        let value = Tensor::from_parts(
            vec![oh, ow, c],
            kernels::resize_bilinear(self.value(x).data(), h, w, c, oh, ow),
        );
        Ok(self.push(
            "resize_bilinear",
            value,
            vec![x.0],
            Box::new(move |ctx| {
                vec![Some(Tensor::from_parts(
                    vec![h, w, c],
                    kernels::resize_bilinear_adjoint(ctx.grad.data(), h, w, c, oh, ow),
                ))]
            }),
        ))
    }

    /// `[H, W, C]` → `[1, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (h, w, c) = dims3("global_avg_pool", self.value(x))?;
        let hw = h * w;
        let inv = T::one() / T::lit(hw as f64);
        let xv = self.value(x).data();
        let mut acc = vec![T::zero(); c];
        for p in 0..hw {
            for (a, v) in acc.iter_mut().zip(&xv[p * c..(p + 1) * c]) {
                *a += *v;
            }
        }
        for a in &mut acc {
            *a *= inv;
        }
        let value = Tensor::from_parts(vec![1, c], acc);
        Ok(self.push(
            "global_avg_pool",
            value,
            vec![x.0],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut out = vec![T::zero(); hw * c];
                for p in 0..hw {
                    for (o, v) in out[p * c..(p + 1) * c].iter_mut().zip(g) {
                        *o = *v * inv;
                    }
                }
                vec![Some(Tensor::from_parts(vec![h, w, c], out))]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(shape: Vec<usize>, seed: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| ((i as f64 + 1.0) * seed).sin()).with_grad(true)
    }

    /// Central differences over every coordinate of every parameter.
    fn check(build: impl Fn(&mut Graph<f64>, &[Var]) -> Var, params: Vec<Tensor<f64>>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
        let loss = build(&mut g, &vars);
        let grads = g.backward(loss).unwrap();
        let h = 1e-6;
        for (pi, p) in params.iter().enumerate() {
            let analytic = grads.get(vars[pi]).expect("grad");
            for c in 0..p.numel() {
                let eval = |delta: f64| {
                    let mut g = Graph::new();
                    let vs: Vec<Var> = params
                        .iter()
                        .enumerate()
                        .map(|(j, q)| {
                            let mut q = q.clone();
                            if j == pi {
                                q.data_mut()[c] += delta;
                            }
                            g.leaf(q)
                        })
                        .collect();
                    let l = build(&mut g, &vs);
                    g.value(l).data()[0]
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = analytic.data()[c];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
                assert!(rel < 1e-5 || (fd - an).abs() < 1e-9, "param {pi} coord {c}: fd {fd} an {an}");
            }
        }
    }

    #[test]
    fn matmul_and_bias_gradients() {
        check(
            |g, v| {
                let y = g.matmul(v[0], v[1]).unwrap();
                let y = g.add_bias(y, v[2]).unwrap();
                let y = g.mul(y, y).unwrap();
                g.sum(y)
            },
            vec![param(vec![3, 4], 0.7), param(vec![4, 2], 1.3), param(vec![2], 0.4)],
        );
    }

    #[test]
    fn matmul_tn_gradients() {
        check(
            |g, v| {
                let y = g.matmul_tn(v[0], v[1]).unwrap();
                let y = g.mul(y, y).unwrap();
                g.sum(y)
            },
            vec![param(vec![5, 3], 0.9), param(vec![5, 2], 0.2)],
        );
    }

    #[test]
    fn matmul_nt_gradients() {
        check(
            |g, v| {
                let y = g.matmul_nt(v[0], v[1]).unwrap();
                let y = g.mul(y, y).unwrap();
                g.sum(y)
            },
            vec![param(vec![4, 3], 0.7), param(vec![5, 3], 0.3)],
        );
    }

    #[test]
    fn cosine_gradients() {
        check(
            |g, v| {
                let c = g.cosine(v[0], v[1]).unwrap();
                let w = g.constant(Tensor::from_fn(vec![3, 4], |i| (i as f64 * 0.5).cos()));
                let c = g.mul(c, w).unwrap();
                g.sum(c)
            },
            vec![param(vec![3, 5], 0.3), param(vec![4, 5], 1.1)],
        );
    }

    #[test]
    fn softmax_and_ce_gradients() {
        check(
            |g, v| {
                let s = g.softmax_rows(v[0]).unwrap();
                let w = g.constant(Tensor::from_fn(vec![3, 4], |i| i as f64 * 0.1));
                let s = g.mul(s, w).unwrap();
                let a = g.sum(s);
                let ce = g.cross_entropy(v[1], &[0, 2, 1], Some(&[1.0, 0.5, 2.0])).unwrap();
                g.add(a, ce).unwrap()
            },
            vec![param(vec![3, 4], 0.8), param(vec![3, 3], 1.7)],
        );
    }

    #[test]
    fn bce_gradients() {
        check(
            |g, v| g.bce_with_logits(v[0], &[1.0, 0.0, 0.3, 1.0]).unwrap(),
            vec![param(vec![1, 4], 2.1)],
        );
    }

    #[test]
    fn conv_resize_pool_gradients() {
        check(
            |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), ConvGeometry::new(3, 2, 1, 1)).unwrap();
                let y = g.relu(y);
                let y = g.resize_bilinear(y, 5, 7).unwrap();
                let p = g.global_avg_pool(y).unwrap();
                let p = g.mul(p, p).unwrap();
                g.sum(p)
            },
            vec![param(vec![6, 5, 2], 0.9), param(vec![18, 3], 0.37), param(vec![3], 0.5)],
        );
    }

    #[test]
    fn dilated_conv_gradients() {
        check(
            |g, v| {
                let y = g.conv2d(v[0], v[1], None, ConvGeometry::new(3, 1, 2, 2)).unwrap();
                let y = g.mul(y, y).unwrap();
                g.sum(y)
            },
            vec![param(vec![5, 5, 2], 0.4), param(vec![18, 2], 0.77)],
        );
    }

    #[test]
    fn structural_gradients() {
        check(
            |g, v| {
                let cat = g.concat_cols(v[0], v[1]).unwrap();
                let picked = g.gather_rows(cat, &[2, 0, 2, 1]).unwrap();
                let b = g.broadcast_rows(v[2], 4).unwrap();
                let s = g.sub(picked, b).unwrap();
                let s = g.mul(s, s).unwrap();
                g.mean(s)
            },
            vec![param(vec![3, 2], 0.6), param(vec![3, 1], 1.4), param(vec![1, 3], 0.2)],
        );
    }

    #[test]
    fn records_first_non_finite_op() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![1], vec![1e300]).unwrap().with_grad(true));
        let y = g.mul(x, x).unwrap();
        assert_eq!(g.first_non_finite(), Some("mul"));
        assert!(matches!(g.backward(y), Err(Error::NonFinite(op)) if op == "mul"));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(2.0).with_grad(true));
        let c = g.constant(Tensor::scalar(3.0));
        let y = g.mul(x, c).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0]);
        assert!(grads.get(c).is_none());
    }
}
