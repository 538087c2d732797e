use crate::element::Element;
use crate::error::{NumericsError, Result};
use crate::kernels::{col2im, gemm, im2col, ConvGeom};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(String),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    ScalarMul(usize, usize),
    AddConst(usize),
    Silu(usize),
    Relu(usize),
    MatMul(usize, usize),
    BatchMatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    AddBias(usize, usize),
    AddChannelBias(usize, usize),
    Conv2d { x: usize, w: usize, stride: usize, pad: usize },
    ConvTranspose2d { x: usize, w: usize, stride: usize, pad: usize },
    Softmax(usize),
    Embedding { table: usize, ids: Vec<usize> },
    Concat { a: usize, b: usize, axis: usize },
    RepeatBatch(usize),
    WeightedMse { pred: usize, target: usize, weight: Option<usize> },
    Sum(usize),
    Mean(usize),
}

#[derive(Debug)]
struct Node<F: Element> {
    value: Tensor<F>,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation so it can be differentiated in reverse.
///
/// Each op evaluates eagerly and keeps its output for the backward pass.
/// A graph is built per step and dropped afterwards; parameters are copied
/// in by name, and [`Graph::backward`] writes summed gradients back into the
/// owning [`ParamSet`].
#[derive(Debug)]
pub struct Graph<F: Element = f32> {
    nodes: Vec<Node<F>>,
}

impl<F: Element> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn sigmoid<F: Element>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

impl<F: Element> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, i: usize) -> &[F] {
        self.nodes[i].value.data()
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<F>, op: Op, inputs: &[usize]) -> Result<Var> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: op_name });
        }
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor<F>) -> Result<Var> {
        let mut t = t;
        t.set_grad(None)?;
        self.push("input", t, Op::Input, &[])
    }

    /// Copies the named parameter into the graph. Frozen parameters are
    /// treated as constants.
    pub fn param(&mut self, params: &ParamSet<F>, name: &str) -> Result<Var> {
        let mut value = params.get(name)?.clone();
        value.set_grad(None)?;
        let trainable = params.is_trainable(name)?;
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: "param" });
        }
        self.nodes.push(Node {
            value,
            op: Op::Param(name.to_string()),
            needs_grad: trainable,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Tensor<F> {
        let data = self
            .data(a.0)
            .iter()
            .zip(self.data(b.0))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(F) -> F) -> Tensor<F> {
        let data = self.data(a.0).iter().map(|&x| f(x)).collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        self.push("add", out, Op::Add(a.0, b.0), &[a.0, b.0])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        self.push("sub", out, Op::Sub(a.0, b.0), &[a.0, b.0])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        self.push("mul", out, Op::Mul(a.0, b.0), &[a.0, b.0])
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let cf = F::from_f64_lossy(c);
        let out = self.map(a, |x| x * cf);
        self.push("scale", out, Op::Scale(a.0, c), &[a.0])
    }

    /// Adds a constant to every element.
    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var> {
        let cf = F::from_f64_lossy(c);
        let out = self.map(a, |x| x + cf);
        self.push("add_const", out, Op::AddConst(a.0), &[a.0])
    }

    /// `x * s` where `s` holds exactly one element (the only broadcast allowed).
    pub fn scalar_mul(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(mismatch("scalar_mul", self.shape(x), self.shape(s)));
        }
        let sv = self.data(s.0)[0];
        let out = self.map(x, |v| v * sv);
        self.push("scalar_mul", out, Op::ScalarMul(x.0, s.0), &[x.0, s.0])
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, |x| x * sigmoid(x));
        self.push("silu", out, Op::Silu(a.0), &[a.0])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, |x| if x > F::zero() { x } else { F::zero() });
        self.push("relu", out, Op::Relu(a.0), &[a.0])
    }

    /// `[m,k] · [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::zero(); m * n];
        gemm(m, k, n, self.data(a.0), false, self.data(b.0), false, &mut out, false);
        let t = Tensor::new([m, n], out)?;
        self.push("matmul", t, Op::MatMul(a.0, b.0), &[a.0, b.0])
    }

    /// `[B,m,k] · [B,k,n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(mismatch("batch_matmul", sa, sb));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![F::zero(); bs * m * n];
        let (da, db) = (self.data(a.0), self.data(b.0));
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                false,
                &db[i * k * n..(i + 1) * k * n],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let t = Tensor::new([bs, m, n], out)?;
        self.push("batch_matmul", t, Op::BatchMatMul(a.0, b.0), &[a.0, b.0])
    }

    /// Swaps the last two axes of a 2-D or 3-D tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let (bs, m, n) = match s.as_slice() {
            [m, n] => (1, *m, *n),
            [b, m, n] => (*b, *m, *n),
            _ => return Err(mismatch("transpose", &s, &[])),
        };
        let out = transpose_data(self.data(a.0), bs, m, n);
        let mut shape = s.clone();
        let r = shape.len();
        shape.swap(r - 1, r - 2);
        let t = Tensor::new(shape, out)?;
        self.push("transpose", t, Op::Transpose(a.0), &[a.0])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        self.push("reshape", t, Op::Reshape(a.0), &[a.0])
    }

    /// `x[..., D] + b[D]`, the bias rule for linear layers.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(mismatch("add_bias", sx, sb));
        }
        let d = sb[0];
        let bias = self.data(b.0);
        let data = self
            .data(x.0)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bias[i % d])
            .collect();
        let t = Tensor::new(sx.to_vec(), data)?;
        self.push("add_bias", t, Op::AddBias(x.0, b.0), &[x.0, b.0])
    }

    /// `x[B,C,H,W] + b` with `b` of shape `[C]` (shared) or `[B,C]` (per sample).
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        let ok = sx.len() == 4
            && match sb.as_slice() {
                [c] => *c == sx[1],
                [bb, c] => *bb == sx[0] && *c == sx[1],
                _ => false,
            };
        if !ok {
            return Err(mismatch("add_channel_bias", &sx, &sb));
        }
        let (bs, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
        let per_sample = sb.len() == 2;
        let bias = self.data(b.0);
        let xd = self.data(x.0);
        let mut out = Vec::with_capacity(xd.len());
        for i in 0..bs {
            for ch in 0..c {
                let bv = if per_sample { bias[i * c + ch] } else { bias[ch] };
                let base = (i * c + ch) * hw;
                out.extend(xd[base..base + hw].iter().map(|&v| v + bv));
            }
        }
        let t = Tensor::new(sx, out)?;
        self.push("add_channel_bias", t, Op::AddChannelBias(x.0, b.0), &[x.0, b.0])
    }

    /// Square-kernel convolution, `x[B,Ci,H,W]` with `w[Co,Ci,k,k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] != sw[3] || stride == 0 {
            return Err(mismatch("conv2d", &sx, &sw));
        }
        let geom = ConvGeom::new(sx[1], sx[2], sx[3], sw[2], stride, pad)
            .ok_or_else(|| mismatch("conv2d", &sx, &sw))?;
        let (bs, co) = (sx[0], sw[0]);
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![F::zero(); rows * ncols];
        let mut out = vec![F::zero(); bs * co * ncols];
        let (xd, wd) = (self.data(x.0), self.data(w.0));
        for i in 0..bs {
            im2col(&geom, &xd[i * geom.image_len()..(i + 1) * geom.image_len()], &mut cols);
            gemm(co, rows, ncols, wd, false, &cols, false, &mut out[i * co * ncols..(i + 1) * co * ncols], false);
        }
        let t = Tensor::new([bs, co, geom.out_h, geom.out_w], out)?;
        self.push("conv2d", t, Op::Conv2d { x: x.0, w: w.0, stride, pad }, &[x.0, w.0])
    }

    /// Transposed convolution, `x[B,Ci,H,W]` with `w[Ci,Co,k,k]`; output side
    /// is `(H-1)*stride - 2*pad + k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[0] || sw[2] != sw[3] || stride == 0 {
            return Err(mismatch("conv_transpose2d", &sx, &sw));
        }
        let geom = transposed_geom(&sx, &sw, stride, pad).ok_or_else(|| mismatch("conv_transpose2d", &sx, &sw))?;
        let (bs, ci) = (sx[0], sx[1]);
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![F::zero(); rows * ncols];
        let mut out = vec![F::zero(); bs * geom.image_len()];
        let (xd, wd) = (self.data(x.0), self.data(w.0));
        for i in 0..bs {
            gemm(rows, ci, ncols, wd, true, &xd[i * ci * ncols..(i + 1) * ci * ncols], false, &mut cols, false);
            col2im(&geom, &cols, &mut out[i * geom.image_len()..(i + 1) * geom.image_len()]);
        }
        let t = Tensor::new([bs, geom.channels, geom.height, geom.width], out)?;
        self.push(
            "conv_transpose2d",
            t,
            Op::ConvTranspose2d { x: x.0, w: w.0, stride, pad },
            &[x.0, w.0],
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().ok_or_else(|| mismatch("softmax", &shape, &[]))?;
        let mut out = self.data(a.0).to_vec();
        for row in out.chunks_mut(d) {
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut s = F::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s = s + *v;
            }
            row.iter_mut().for_each(|v| *v = *v / s);
        }
        let t = Tensor::new(shape, out)?;
        self.push("softmax", t, Op::Softmax(a.0), &[a.0])
    }

    /// Row lookup in `table[V,D]`; output shape is `ids_shape ++ [D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 || ids_shape.iter().product::<usize>() != ids.len() {
            return Err(mismatch("embedding", &st, ids_shape));
        }
        let (v, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(NumericsError::InvalidArgument {
                op: "embedding",
                detail: format!("token id {bad} outside table of {v} rows"),
            });
        }
        let td = self.data(table.0);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&td[id * d..(id + 1) * d]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        let t = Tensor::new(shape, out)?;
        self.push(
            "embedding",
            t,
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
            &[table.0],
        )
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa.iter().zip(&sb).enumerate().all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(mismatch("concat", &sa, &sb));
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let (ca, cb) = (sa[axis] * inner, sb[axis] * inner);
        let (da, db) = (self.data(a.0), self.data(b.0));
        let mut out = Vec::with_capacity(da.len() + db.len());
        for o in 0..outer {
            out.extend_from_slice(&da[o * ca..(o + 1) * ca]);
            out.extend_from_slice(&db[o * cb..(o + 1) * cb]);
        }
        let mut shape = sa.clone();
        shape[axis] += sb[axis];
        let t = Tensor::new(shape, out)?;
        self.push("concat", t, Op::Concat { a: a.0, b: b.0, axis }, &[a.0, b.0])
    }

    /// Stacks `n` copies along a new leading axis.
    pub fn repeat_batch(&mut self, a: Var, n: usize) -> Result<Var> {
        if n == 0 {
            return Err(mismatch("repeat_batch", self.shape(a), &[0]));
        }
        let d = self.data(a.0);
        let mut out = Vec::with_capacity(d.len() * n);
        for _ in 0..n {
            out.extend_from_slice(d);
        }
        let mut shape = vec![n];
        shape.extend_from_slice(self.shape(a));
        let t = Tensor::new(shape, out)?;
        self.push("repeat_batch", t, Op::RepeatBatch(a.0), &[a.0])
    }

    /// `mean(w ⊙ (pred - target)²)`; `weight = None` means unit weights.
    pub fn weighted_mse(&mut self, pred: Var, target: Var, weight: Option<Var>) -> Result<Var> {
        self.same_shape("weighted_mse", pred, target)?;
        if let Some(w) = weight {
            self.same_shape("weighted_mse", pred, w)?;
        }
        let n = F::from_usize(self.value(pred).numel()).expect("count fits");
        let (p, t) = (self.data(pred.0), self.data(target.0));
        let total = match weight {
            Some(w) => p
                .iter()
                .zip(t)
                .zip(self.data(w.0))
                .map(|((&a, &b), &wv)| wv * (a - b) * (a - b))
                .sum::<F>(),
            None => p.iter().zip(t).map(|(&a, &b)| (a - b) * (a - b)).sum::<F>(),
        };
        let mut inputs = vec![pred.0, target.0];
        inputs.extend(weight.map(|w| w.0));
        self.push(
            "weighted_mse",
            Tensor::scalar(total / n),
            Op::WeightedMse {
                pred: pred.0,
                target: target.0,
                weight: weight.map(|w| w.0),
            },
            &inputs,
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a.0).iter().copied().sum::<F>();
        self.push("sum", Tensor::scalar(s), Op::Sum(a.0), &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = F::from_usize(self.value(a).numel()).expect("count fits");
        let s = self.data(a.0).iter().copied().sum::<F>() / n;
        self.push("mean", Tensor::scalar(s), Op::Mean(a.0), &[a.0])
    }

    /// `x[..., Din] · w[Din, Dout] + b[Dout]` over the flattened leading axes.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let din = *sx.last().ok_or_else(|| mismatch("linear", &sx, &[]))?;
        let rows = sx.iter().product::<usize>() / din;
        let flat = if sx.len() == 2 { x } else { self.reshape(x, &[rows, din])? };
        let mut y = self.matmul(flat, w)?;
        if let Some(b) = b {
            y = self.add_bias(y, b)?;
        }
        if sx.len() == 2 {
            return Ok(y);
        }
        let mut out_shape = sx;
        *out_shape.last_mut().expect("non-empty") = self.shape(y)[1];
        self.reshape(y, &out_shape)
    }

    /// Scaled dot-product attention over `q[B,Lq,D]`, `k[B,Lk,D]`, `v[B,Lk,Dv]`.
    ///
    /// Returns `(output[B,Lq,Dv], weights[B,Lq,Lk])`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
        self.masked_attention(q, k, v, None)
    }

    /// [`attention`](Self::attention) where keys with `key_mask[b·Lk + j] ==
    /// false` receive no weight.
    pub fn masked_attention(&mut self, q: Var, k: Var, v: Var, key_mask: Option<&[bool]>) -> Result<(Var, Var)> {
        let d = *self.shape(q).last().ok_or_else(|| mismatch("attention", &[], &[]))?;
        let kt = self.transpose(k)?;
        let scores = self.batch_matmul(q, kt)?;
        let mut scores = self.scale(scores, 1.0 / (d as f64).sqrt())?;
        if let Some(mask) = key_mask {
            let shape = self.shape(scores).to_vec();
            let (b, lq, lk) = (shape[0], shape[1], shape[2]);
            if mask.len() != b * lk {
                return Err(mismatch("attention mask", &[b * lk], &[mask.len()]));
            }
            let blocked = F::from_f64_lossy(-1e9);
            let mut bias = Vec::with_capacity(b * lq * lk);
            for row in mask.chunks(lk) {
                for _ in 0..lq {
                    bias.extend(row.iter().map(|&keep| if keep { F::zero() } else { blocked }));
                }
            }
            let bias = self.input(Tensor::new(shape, bias)?)?;
            scores = self.add(scores, bias)?;
        }
        let weights = self.softmax(scores)?;
        let out = self.batch_matmul(weights, v)?;
        Ok((out, weights))
    }

    /// Reverse pass from a scalar `loss`. Gradients of trainable parameters
    /// are added to `params`; trainable parameters the loss does not reach
    /// receive a zero gradient.
    pub fn backward(&self, loss: Var, params: &mut ParamSet<F>) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(NumericsError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads, params)?;
        }
        params.ensure_trainable_grads();
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<F>>], j: usize, contribution: Vec<F>) {
        if !self.nodes[j].needs_grad {
            return;
        }
        match &mut grads[j] {
            Some(acc) => acc.iter_mut().zip(contribution).for_each(|(a, b)| *a = *a + b),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn backprop_node(
        &self,
        i: usize,
        g: &[F],
        grads: &mut [Option<Vec<F>>],
        params: &mut ParamSet<F>,
    ) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Input => {}
            Op::Param(name) => params.accumulate_grad(name, g)?,
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let c = g.iter().zip(self.data(*b)).map(|(&u, &v)| u * v).collect();
                    self.accumulate(grads, *a, c);
                }
                if self.needs(*b) {
                    let c = g.iter().zip(self.data(*a)).map(|(&u, &v)| u * v).collect();
                    self.accumulate(grads, *b, c);
                }
            }
            Op::Scale(a, c) => {
                let cf = F::from_f64_lossy(*c);
                self.accumulate(grads, *a, g.iter().map(|&v| v * cf).collect());
            }
            Op::AddConst(a) | Op::Reshape(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::ScalarMul(x, s) => {
                let sv = self.data(*s)[0];
                if self.needs(*x) {
                    self.accumulate(grads, *x, g.iter().map(|&v| v * sv).collect());
                }
                if self.needs(*s) {
                    let ds = g.iter().zip(self.data(*x)).map(|(&u, &v)| u * v).sum::<F>();
                    self.accumulate(grads, *s, vec![ds]);
                }
            }
            Op::Silu(a) => {
                let c = g
                    .iter()
                    .zip(self.data(*a))
                    .map(|(&u, &x)| {
                        let s = sigmoid(x);
                        u * s * (F::one() + x * (F::one() - s))
                    })
                    .collect();
                self.accumulate(grads, *a, c);
            }
            Op::Relu(a) => {
                let c = g
                    .iter()
                    .zip(self.data(*a))
                    .map(|(&u, &x)| if x > F::zero() { u } else { F::zero() })
                    .collect();
                self.accumulate(grads, *a, c);
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[*a].value.shape(), self.nodes[*b].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs(*a) {
                    let mut da = vec![F::zero(); m * k];
                    gemm(m, n, k, g, false, self.data(*b), true, &mut da, false);
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = vec![F::zero(); k * n];
                    gemm(k, m, n, self.data(*a), true, g, false, &mut db, false);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (self.nodes[*a].value.shape(), self.nodes[*b].value.shape());
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (ad, bd) = (self.data(*a), self.data(*b));
                if self.needs(*a) {
                    let mut da = vec![F::zero(); bs * m * k];
                    for t in 0..bs {
                        gemm(
                            m,
                            n,
                            k,
                            &g[t * m * n..(t + 1) * m * n],
                            false,
                            &bd[t * k * n..(t + 1) * k * n],
                            true,
                            &mut da[t * m * k..(t + 1) * m * k],
                            false,
                        );
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = vec![F::zero(); bs * k * n];
                    for t in 0..bs {
                        gemm(
                            k,
                            m,
                            n,
                            &ad[t * m * k..(t + 1) * m * k],
                            true,
                            &g[t * m * n..(t + 1) * m * n],
                            false,
                            &mut db[t * k * n..(t + 1) * k * n],
                            false,
                        );
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Transpose(a) => {
                let s = node.value.shape();
                let (bs, m, n) = match s {
                    [m, n] => (1, *m, *n),
                    [b, m, n] => (*b, *m, *n),
                    _ => unreachable!("validated in forward"),
                };
                self.accumulate(grads, *a, transpose_data(g, bs, m, n));
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, g.to_vec());
                if self.needs(*b) {
                    let d = self.nodes[*b].value.numel();
                    let mut db = vec![F::zero(); d];
                    for row in g.chunks(d) {
                        db.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::AddChannelBias(x, b) => {
                self.accumulate(grads, *x, g.to_vec());
                if self.needs(*b) {
                    let sx = node.value.shape();
                    let (bs, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
                    let per_sample = self.nodes[*b].value.shape().len() == 2;
                    let mut db = vec![F::zero(); self.nodes[*b].value.numel()];
                    for t in 0..bs {
                        for ch in 0..c {
                            let base = (t * c + ch) * hw;
                            let s: F = g[base..base + hw].iter().copied().sum();
                            let slot = if per_sample { t * c + ch } else { ch };
                            db[slot] = db[slot] + s;
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Conv2d { x, w, stride, pad } => {
                let sx = self.nodes[*x].value.shape();
                let sw = self.nodes[*w].value.shape();
                let geom = ConvGeom::new(sx[1], sx[2], sx[3], sw[2], *stride, *pad).expect("validated");
                let (bs, co) = (sx[0], sw[0]);
                let (rows, ncols) = (geom.col_rows(), geom.col_cols());
                let mut cols = vec![F::zero(); rows * ncols];
                let (xd, wd) = (self.data(*x), self.data(*w));
                let want_w = self.needs(*w);
                let want_x = self.needs(*x);
                let mut dw = if want_w { vec![F::zero(); wd.len()] } else { Vec::new() };
                let mut dx = if want_x { vec![F::zero(); xd.len()] } else { Vec::new() };
                for t in 0..bs {
                    let gt = &g[t * co * ncols..(t + 1) * co * ncols];
                    if want_w {
                        im2col(&geom, &xd[t * geom.image_len()..(t + 1) * geom.image_len()], &mut cols);
                        gemm(co, ncols, rows, gt, false, &cols, true, &mut dw, true);
                    }
                    if want_x {
                        gemm(rows, co, ncols, wd, true, gt, false, &mut cols, false);
                        col2im(&geom, &cols, &mut dx[t * geom.image_len()..(t + 1) * geom.image_len()]);
                    }
                }
                if want_w {
                    self.accumulate(grads, *w, dw);
                }
                if want_x {
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::ConvTranspose2d { x, w, stride, pad } => {
                let sx = self.nodes[*x].value.shape().to_vec();
                let sw = self.nodes[*w].value.shape().to_vec();
                let geom = transposed_geom(&sx, &sw, *stride, *pad).expect("validated");
                let (bs, ci) = (sx[0], sx[1]);
                let (rows, ncols) = (geom.col_rows(), geom.col_cols());
                let mut cols = vec![F::zero(); rows * ncols];
                let (xd, wd) = (self.data(*x), self.data(*w));
                let want_w = self.needs(*w);
                let want_x = self.needs(*x);
                let mut dw = if want_w { vec![F::zero(); wd.len()] } else { Vec::new() };
                let mut dx = if want_x { vec![F::zero(); xd.len()] } else { Vec::new() };
                for t in 0..bs {
                    im2col(&geom, &g[t * geom.image_len()..(t + 1) * geom.image_len()], &mut cols);
                    let xt = &xd[t * ci * ncols..(t + 1) * ci * ncols];
                    if want_x {
                        gemm(ci, rows, ncols, wd, false, &cols, false, &mut dx[t * ci * ncols..(t + 1) * ci * ncols], false);
                    }
                    if want_w {
                        gemm(ci, ncols, rows, xt, false, &cols, true, &mut dw, true);
                    }
                }
                if want_w {
                    self.accumulate(grads, *w, dw);
                }
                if want_x {
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Softmax(a) => {
                let d = *node.value.shape().last().expect("validated");
                let y = node.value.data();
                let mut dx = vec![F::zero(); y.len()];
                for ((yr, gr), dr) in y.chunks(d).zip(g.chunks(d)).zip(dx.chunks_mut(d)) {
                    let dot: F = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for ((o, &p), &q) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = p * (q - dot);
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::Embedding { table, ids } => {
                let st = self.nodes[*table].value.shape();
                let d = st[1];
                let mut dt = vec![F::zero(); st[0] * d];
                for (row, &id) in g.chunks(d).zip(ids) {
                    dt[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(row)
                        .for_each(|(a, &v)| *a = *a + v);
                }
                self.accumulate(grads, *table, dt);
            }
            Op::Concat { a, b, axis } => {
                let sa = self.nodes[*a].value.shape();
                let sb = self.nodes[*b].value.shape();
                let outer: usize = sa[..*axis].iter().product();
                let inner: usize = sa[axis + 1..].iter().product();
                let (ca, cb) = (sa[*axis] * inner, sb[*axis] * inner);
                let mut da = Vec::with_capacity(outer * ca);
                let mut db = Vec::with_capacity(outer * cb);
                for chunk in g.chunks(ca + cb) {
                    da.extend_from_slice(&chunk[..ca]);
                    db.extend_from_slice(&chunk[ca..]);
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::RepeatBatch(a) => {
                let len = self.nodes[*a].value.numel();
                let mut da = vec![F::zero(); len];
                for chunk in g.chunks(len) {
                    da.iter_mut().zip(chunk).for_each(|(x, &v)| *x = *x + v);
                }
                self.accumulate(grads, *a, da);
            }
            Op::WeightedMse { pred, target, weight } => {
                let n = F::from_usize(self.nodes[*pred].value.numel()).expect("count fits");
                let scale = g[0] / n;
                let two = F::one() + F::one();
                let (p, t) = (self.data(*pred), self.data(*target));
                let w = weight.map(|w| self.data(w));
                let dp: Vec<F> = p
                    .iter()
                    .zip(t)
                    .enumerate()
                    .map(|(k, (&a, &b))| {
                        let wk = w.map_or(F::one(), |w| w[k]);
                        two * wk * (a - b) * scale
                    })
                    .collect();
                if self.needs(*target) {
                    self.accumulate(grads, *target, dp.iter().map(|&v| -v).collect());
                }
                self.accumulate(grads, *pred, dp);
                if let Some(wi) = weight {
                    if self.needs(*wi) {
                        let dw = p.iter().zip(t).map(|(&a, &b)| (a - b) * (a - b) * scale).collect();
                        self.accumulate(grads, *wi, dw);
                    }
                }
            }
            Op::Sum(a) => {
                let n = self.nodes[*a].value.numel();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.nodes[*a].value.numel();
                let v = g[0] / F::from_usize(n).expect("count fits");
                self.accumulate(grads, *a, vec![v; n]);
            }
        }
        Ok(())
    }
}

fn transposed_geom(sx: &[usize], sw: &[usize], stride: usize, pad: usize) -> Option<ConvGeom> {
    let k = sw[2];
    let out_h = ((sx[2] - 1) * stride + k).checked_sub(2 * pad)?;
    let out_w = ((sx[3] - 1) * stride + k).checked_sub(2 * pad)?;
    let geom = ConvGeom::new(sw[1], out_h, out_w, k, stride, pad)?;
    (geom.out_h == sx[2] && geom.out_w == sx[3] && out_h > 0 && out_w > 0).then_some(geom)
}

fn transpose_data<F: Element>(d: &[F], bs: usize, m: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); d.len()];
    for t in 0..bs {
        let src = &d[t * m * n..(t + 1) * m * n];
        let dst = &mut out[t * m * n..(t + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_left() {
        let mut g = Graph::<f64>::new();
        let a = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let i3 = g.input(Tensor::eye(3)).unwrap();
        let av = g.input(a.clone()).unwrap();
        let y = g.matmul(i3, av).unwrap();
        assert_eq!(g.value(y), &a);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros([3])).unwrap();
        let y = g.softmax(x).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::<f32>::new();
        let a = g.input(Tensor::zeros([2, 3])).unwrap();
        let b = g.input(Tensor::zeros([2, 3])).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        assert!(err.to_string().starts_with("matmul"), "{err}");
        let c = g.input(Tensor::zeros([3, 2])).unwrap();
        assert!(matches!(g.add(a, c), Err(NumericsError::ShapeMismatch { op: "add", .. })));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut g = Graph::<f32>::new();
        let a = g.input(Tensor::full([2], f32::MAX)).unwrap();
        assert!(matches!(g.add(a, a), Err(NumericsError::NonFinite { op: "add" })));
    }

    #[test]
    fn square_derivative() {
        let mut p = ParamSet::<f64>::new();
        p.insert("x", Tensor::scalar(3.0), true).unwrap();
        let mut g = Graph::new();
        let x = g.param(&p, "x").unwrap();
        let y = g.mul(x, x).unwrap();
        g.backward(y, &mut p).unwrap();
        assert_eq!(p.get("x").unwrap().grad(), Some(&[6.0][..]));
    }

    #[test]
    fn constant_has_zero_derivative_and_unreached_params_get_zero() {
        let mut p = ParamSet::<f64>::new();
        p.insert("x", Tensor::scalar(3.0), true).unwrap();
        p.insert("unused", Tensor::zeros([4]), true).unwrap();
        let mut g = Graph::new();
        let _x = g.param(&p, "x").unwrap();
        let c = g.input(Tensor::scalar(7.0)).unwrap();
        let y = g.scale(c, 2.0).unwrap();
        g.backward(y, &mut p).unwrap();
        assert_eq!(p.get("x").unwrap().grad(), Some(&[0.0][..]));
        assert_eq!(p.get("unused").unwrap().grad(), Some(&[0.0; 4][..]));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut p = ParamSet::<f64>::new();
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros([2])).unwrap();
        assert!(matches!(g.backward(x, &mut p), Err(NumericsError::NotScalar(_))));
    }

    #[test]
    fn gradients_sum_over_paths() {
        // y = x*x + 3x  => dy/dx = 2x + 3
        let mut p = ParamSet::<f64>::new();
        p.insert("x", Tensor::scalar(2.0), true).unwrap();
        let mut g = Graph::new();
        let x = g.param(&p, "x").unwrap();
        let sq = g.mul(x, x).unwrap();
        let lin = g.scale(x, 3.0).unwrap();
        let y = g.add(sq, lin).unwrap();
        g.backward(y, &mut p).unwrap();
        assert_eq!(p.get("x").unwrap().grad(), Some(&[7.0][..]));
    }

    #[test]
    fn unit_weighted_mse_equals_plain_mse() {
        let mut g = Graph::<f64>::new();
        let a = g
            .input(Tensor::from_fn([4, 5], |i| (i as f64 * 0.7).sin()))
            .unwrap();
        let b = g
            .input(Tensor::from_fn([4, 5], |i| (i as f64 * 0.3).cos()))
            .unwrap();
        let w = g.input(Tensor::full([4, 5], 1.0)).unwrap();
        let lw = g.weighted_mse(a, b, Some(w)).unwrap();
        let l = g.weighted_mse(a, b, None).unwrap();
        let diff = (g.value(lw).data()[0] - g.value(l).data()[0]).abs();
        assert!(diff < 1e-12);
    }

    #[test]
    fn transposed_conv_doubles_resolution() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros([2, 3, 4, 4])).unwrap();
        let w = g.input(Tensor::zeros([3, 5, 4, 4])).unwrap();
        let y = g.conv_transpose2d(x, w, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[2, 5, 8, 8]);
        let s = g.input(Tensor::zeros([3, 5, 3, 3])).unwrap();
        let z = g.conv2d(y, s, 2, 1).unwrap();
        assert_eq!(g.shape(z), &[2, 3, 4, 4]);
    }

    #[test]
    fn channel_bias_rejects_general_broadcast() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros([2, 3, 4, 4])).unwrap();
        let b = g.input(Tensor::zeros([4])).unwrap();
        assert!(g.add_channel_bias(x, b).is_err());
        let b = g.input(Tensor::zeros([2, 3])).unwrap();
        assert!(g.add_channel_bias(x, b).is_ok());
    }
}
