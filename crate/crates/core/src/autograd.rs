//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its nodes; [`Graph::backward`]
//! walks the tape in reverse and accumulates gradients for every node that
//! transitively depends on a trainable leaf. Graphs are built per step and dropped.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias { x: Var, bias: Var },
    Scale(Var, T),
    AddScalar(Var),
    MulConst { x: Var, factor: Vec<T> },
    MatMul { a: Var, b: Var, ta: bool, tb: bool, m: usize, n: usize, k: usize },
    Bmm { a: Var, b: Var, ta: bool, tb: bool, groups: usize, m: usize, n: usize, k: usize },
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Abs(Var),
    Clamp { x: Var, lo: T, hi: T },
    SumAll(Var),
    MeanAll(Var),
    SumLast(Var),
    MeanLeading(Var),
    LogSoftmax(Var),
    Softmax(Var),
    PickCols { x: Var, idx: Vec<usize> },
    NarrowCols { x: Var, start: usize },
    SliceLeading { x: Var, start: usize },
    CatLeading(Vec<Var>),
    Reshape(Var),
    Conv2d { x: Var, w: Var, geom: ConvGeom, cols: Option<Vec<T>> },
    BatchNorm { x: Var, gamma: Option<Var>, beta: Option<Var>, xhat: Vec<T>, inv_std: Vec<T>, training: bool },
    ChannelMean(Var),
    ChannelVar { x: Var, mean: Vec<T> },
    GlobalAvgPool(Var),
    Upsample2x(Var),
    ChannelAffine { x: Var, scale: Vec<T> },
    PairwiseDiff(Var),
    RowNorm(Var),
    DivRows { x: Var, s: Var },
    SwapLeading(Var),
    Gather { x: Var, idx: Vec<usize> },
    TotalVariationSq(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased (n - 1) variance, the convention for running estimates.
    pub var_unbiased: Vec<T>,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<u64, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// `(n, c, spatial)` for a 2-D `[n, c]` or 4-D `[n, c, h, w]` tensor.
fn nc_spatial(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape.len() {
        2 => Ok((shape[0], shape[1], 1)),
        4 => Ok((shape[0], shape[1], shape[2] * shape[3])),
        _ => Err(Error::invalid(format!(
            "expected [n, c] or [n, c, h, w], got {:?}",
            shape
        ))),
    }
}

fn last_dim(shape: &[usize]) -> Result<(usize, usize)> {
    let d = *shape
        .last()
        .ok_or_else(|| Error::invalid("operation needs at least one axis"))?;
    let rows = if d == 0 { 0 } else { shape.iter().product::<usize>() / d };
    Ok((rows, d))
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Leaf that does not receive gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives gradients.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Trainable leaf tied to a parameter id. Binding the same id twice returns the same node.
    pub fn bind_param(&mut self, id: u64, value: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.input(value.clone());
        self.params.insert(id, v);
        v
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::invalid(format!(
                "{}: shape mismatch {:?} vs {:?}",
                what,
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("shape checked");
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.binary(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.binary(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.binary(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// `x[r, c] + bias[c]` for `x` of shape `[.., c]`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, d) = last_dim(self.shape(x))?;
        if self.shape(bias) != [d] {
            return Err(Error::invalid(format!(
                "bias shape {:?} does not match last axis {}",
                self.shape(bias),
                d
            )));
        }
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(d) {
            row.iter_mut().zip(&b).for_each(|(v, bv)| *v += *bv);
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(value, Op::AddRowBias { x, bias }, rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, x: Var, factor: &Tensor<T>) -> Result<Var> {
        if self.shape(x) != factor.shape() {
            return Err(Error::invalid(format!(
                "mul_const: shape mismatch {:?} vs {:?}",
                self.shape(x),
                factor.shape()
            )));
        }
        let value = Tensor::new(
            factor.shape().to_vec(),
            self.value(x)
                .data()
                .iter()
                .zip(factor.data())
                .map(|(&a, &b)| a * b)
                .collect(),
        )?;
        let rg = self.rg(x);
        Ok(self.push(
            value,
            Op::MulConst {
                x,
                factor: factor.data().to_vec(),
            },
            rg,
        ))
    }

    /// 2-D matrix product `op(a) * op(b)` with optional transposes.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::invalid(format!("matmul needs 2-D operands, got {:?} and {:?}", sa, sb)));
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(Error::invalid(format!("matmul inner dims {} vs {}", k, kb)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(ta, tb, m, n, k, self.value(a).data(), self.value(b).data(), T::zero(), &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, ta, tb, m, n, k }, rg))
    }

    /// Batched matrix product over a leading group axis.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::invalid(format!("bmm needs [g, _, _] operands, got {:?} and {:?}", sa, sb)));
        }
        let groups = sa[0];
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (kb, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != kb {
            return Err(Error::invalid(format!("bmm inner dims {} vs {}", k, kb)));
        }
        let mut out = vec![T::zero(); groups * m * n];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        for gi in 0..groups {
            gemm(
                ta,
                tb,
                m,
                n,
                k,
                &va[gi * m * k..(gi + 1) * m * k],
                &vb[gi * k * n..(gi + 1) * k * n],
                T::zero(),
                &mut out[gi * m * n..(gi + 1) * m * n],
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![groups, m, n], out)?,
            Op::Bmm { a, b, ta, tb, groups, m, n, k },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        self.unary(x, Op::LeakyRelu(x, slope), |v| if v > T::zero() { v } else { v * slope })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), |v| v.tanh())
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), |v| v.exp())
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, Op::Ln(x), |v| v.ln())
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    /// Absolute value; the subgradient at zero is taken as zero.
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), |v| v.abs())
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.unary(x, Op::Clamp { x, lo, hi }, |v| v.max(lo).min(hi))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = T::lit(v.numel().max(1) as f64);
        let s: T = v.data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s / n), Op::MeanAll(x), rg)
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (_, d) = last_dim(&shape)?;
        let data = self
            .value(x)
            .data()
            .chunks(d.max(1))
            .map(|r| r.iter().copied().sum())
            .collect();
        let value = Tensor::new(shape[..shape.len() - 1].to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SumLast(x), rg))
    }

    /// Mean over the leading axis: `[r, c] -> [c]`.
    pub fn mean_leading(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[0] == 0 {
            return Err(Error::invalid(format!("mean_leading needs nonempty [r, c], got {:?}", shape)));
        }
        let (r, c) = (shape[0], shape[1]);
        let mut out = vec![T::zero(); c];
        for row in self.value(x).data().chunks(c) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += *v);
        }
        let inv = T::one() / T::lit(r as f64);
        out.iter_mut().for_each(|o| *o *= inv);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![c], out)?, Op::MeanLeading(x), rg))
    }

    /// Numerically stable log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (_, d) = last_dim(self.shape(x))?;
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(d.max(1)) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            row.iter_mut().for_each(|v| *v = *v - lse);
        }
        let rg = self.rg(x);
        Ok(self.push(value, Op::LogSoftmax(x), rg))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (_, d) = last_dim(self.shape(x))?;
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(d.max(1)) {
            softmax_in_place(row);
        }
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax(x), rg))
    }

    /// `out[r] = x[r, idx[r]]` for a 2-D `x`.
    pub fn pick_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() != 2 || shape[0] != idx.len() {
            return Err(Error::invalid(format!(
                "pick_cols: {:?} with {} indices",
                shape,
                idx.len()
            )));
        }
        let c = shape[1];
        if let Some(&bad) = idx.iter().find(|&&i| i >= c) {
            return Err(Error::invalid(format!("pick_cols: index {} out of range {}", bad, c)));
        }
        let v = self.value(x).data();
        let data = idx.iter().enumerate().map(|(r, &j)| v[r * c + j]).collect();
        let value = Tensor::new(vec![idx.len()], data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::PickCols { x, idx: idx.to_vec() }, rg))
    }

    /// Columns `start..start + len` of a 2-D tensor.
    pub fn narrow_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() != 2 || start + len > shape[1] {
            return Err(Error::invalid(format!(
                "narrow_cols {}..{} on {:?}",
                start,
                start + len,
                shape
            )));
        }
        let (r, c) = (shape[0], shape[1]);
        let v = self.value(x).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&v[i * c + start..i * c + start + len]);
        }
        let value = Tensor::new(vec![r, len], data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::NarrowCols { x, start }, rg))
    }

    /// Items `start..start + len` along the leading axis.
    pub fn slice_leading(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x);
        if shape.is_empty() || start + len > shape[0] {
            return Err(Error::invalid(format!(
                "slice_leading {}..{} on {:?}",
                start,
                start + len,
                shape
            )));
        }
        let value = self.value(x).slice_leading(start, len);
        let rg = self.rg(x);
        Ok(self.push(value, Op::SliceLeading { x, start }, rg))
    }

    pub fn cat_leading(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::cat_leading(&tensors)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::CatLeading(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// 2-D convolution, NCHW input, `[o, c, k, k]` weights, no bias.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] != sw[3] {
            return Err(Error::invalid(format!("conv2d: input {:?}, weight {:?}", sx, sw)));
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, k) = (sw[0], sw[2]);
        if stride == 0 || h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::invalid("conv2d: kernel larger than padded input"));
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let geom = ConvGeom { n, c, h, w: wd, o, k, stride, pad, oh, ow };
        let cols = im2col(self.value(x).data(), &geom);
        let npix = n * oh * ow;
        let ckk = c * k * k;
        let mut out_mat = vec![T::zero(); o * npix];
        gemm(false, false, o, npix, ckk, self.value(w).data(), &cols, T::zero(), &mut out_mat);
        // [o, n, oh*ow] -> [n, o, oh*ow]
        let plane = oh * ow;
        let mut out = vec![T::zero(); o * npix];
        for oi in 0..o {
            for ni in 0..n {
                let src = &out_mat[oi * npix + ni * plane..oi * npix + (ni + 1) * plane];
                out[(ni * o + oi) * plane..(ni * o + oi + 1) * plane].copy_from_slice(src);
            }
        }
        let rg = self.rg(x) || self.rg(w);
        let keep = if self.rg(w) { Some(cols) } else { None };
        Ok(self.push(
            Tensor::new(vec![n, o, oh, ow], out)?,
            Op::Conv2d { x, w, geom, cols: keep },
            rg,
        ))
    }

    /// Batch normalization over `[n, c]` or `[n, c, h, w]`.
    ///
    /// In training mode the batch statistics normalize the input and are returned so the
    /// caller can update running estimates. Otherwise `running` supplies the statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        running: Option<(&[T], &[T])>,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let shape = self.shape(x).to_vec();
        let (n, c, sp) = nc_spatial(&shape)?;
        for p in [gamma, beta].into_iter().flatten() {
            if self.shape(p) != [c] {
                return Err(Error::invalid(format!("batch_norm affine shape {:?}, channels {}", self.shape(p), c)));
            }
        }
        let m = n * sp;
        let xv = self.value(x).data();
        let training = running.is_none();
        let (mean, var, stats) = match running {
            Some((rm, rv)) => {
                if rm.len() != c || rv.len() != c {
                    return Err(Error::invalid("batch_norm running stats length"));
                }
                (rm.to_vec(), rv.to_vec(), None)
            }
            None => {
                if m < 2 {
                    return Err(Error::invalid("batch_norm training mode needs more than one value per channel"));
                }
                let (mean, var) = channel_moments(xv, n, c, sp);
                let corr = T::lit(m as f64 / (m as f64 - 1.0));
                let stats = BatchStats {
                    mean: mean.clone(),
                    var_unbiased: var.iter().map(|&v| v * corr).collect(),
                };
                (mean, var, Some(stats))
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gv = gamma.map(|g| self.value(g).data().to_vec());
        let bv = beta.map(|b| self.value(b).data().to_vec());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * sp;
                let g = gv.as_ref().map_or(T::one(), |g| g[ci]);
                let b = bv.as_ref().map_or(T::zero(), |b| b[ci]);
                for j in base..base + sp {
                    let xh = (xv[j] - mean[ci]) * inv_std[ci];
                    xhat[j] = xh;
                    out[j] = xh * g + b;
                }
            }
        }
        let rg = self.rg(x) || gamma.is_some_and(|g| self.rg(g)) || beta.is_some_and(|b| self.rg(b));
        let v = self.push(
            Tensor::new(shape, out)?,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, training },
            rg,
        );
        Ok((v, stats))
    }

    /// Per-channel mean over `[n, c]` or `[n, c, h, w]`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let (n, c, sp) = nc_spatial(self.shape(x))?;
        let (mean, _) = channel_moments(self.value(x).data(), n, c, sp);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![c], mean)?, Op::ChannelMean(x), rg))
    }

    /// Per-channel biased variance over `[n, c]` or `[n, c, h, w]`.
    pub fn channel_var(&mut self, x: Var) -> Result<Var> {
        let (n, c, sp) = nc_spatial(self.shape(x))?;
        let (mean, var) = channel_moments(self.value(x).data(), n, c, sp);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![c], var)?, Op::ChannelVar { x, mean }, rg))
    }

    /// `[n, c, h, w] -> [n, c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::invalid(format!("global_avg_pool on {:?}", shape)));
        }
        let sp = shape[2] * shape[3];
        let inv = T::one() / T::lit(sp as f64);
        let data = self
            .value(x)
            .data()
            .chunks(sp)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![shape[0], shape[1]], data)?, Op::GlobalAvgPool(x), rg))
    }

    /// Nearest-neighbour 2x spatial upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::invalid(format!("upsample2x on {:?}", shape)));
        }
        let (nc, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); nc * 4 * h * w];
        for p in 0..nc {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    out[(p * 2 * h + i) * 2 * w + j] = src[(p * h + i / 2) * w + j / 2];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![shape[0], shape[1], 2 * h, 2 * w], out)?,
            Op::Upsample2x(x),
            rg,
        ))
    }

    /// `y[n, c, ..] = x[n, c, ..] * scale[c] + shift[c]` with constant coefficients.
    pub fn channel_affine(&mut self, x: Var, scale: &[T], shift: &[T]) -> Result<Var> {
        let (n, c, sp) = nc_spatial(self.shape(x))?;
        if scale.len() != c || shift.len() != c {
            return Err(Error::invalid("channel_affine coefficient length"));
        }
        let mut value = self.value(x).clone();
        let d = value.data_mut();
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * sp;
                d[base..base + sp]
                    .iter_mut()
                    .for_each(|v| *v = *v * scale[ci] + shift[ci]);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(value, Op::ChannelAffine { x, scale: scale.to_vec() }, rg))
    }

    /// `[b, d] -> [b, b, d]` with `out[a, c] = x[a] - x[c]`.
    pub fn pairwise_diff(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(Error::invalid(format!("pairwise_diff on {:?}", shape)));
        }
        let (b, d) = (shape[0], shape[1]);
        let v = self.value(x).data();
        let mut out = vec![T::zero(); b * b * d];
        for i in 0..b {
            for j in 0..b {
                let o = &mut out[(i * b + j) * d..(i * b + j + 1) * d];
                for k in 0..d {
                    o[k] = v[i * d + k] - v[j * d + k];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![b, b, d], out)?, Op::PairwiseDiff(x), rg))
    }

    /// Euclidean norm over the last axis. The gradient at a zero vector is zero.
    pub fn row_norm(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (_, d) = last_dim(&shape)?;
        let data = self
            .value(x)
            .data()
            .chunks(d.max(1))
            .map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape[..shape.len() - 1].to_vec(), data)?, Op::RowNorm(x), rg))
    }

    /// `x[.., k] / s[..]`.
    pub fn div_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (rows, d) = last_dim(&shape)?;
        if self.shape(s) != &shape[..shape.len() - 1] {
            return Err(Error::invalid(format!("div_rows: {:?} by {:?}", shape, self.shape(s))));
        }
        let sv = self.value(s).data().to_vec();
        let mut value = self.value(x).clone();
        for (r, row) in value.data_mut().chunks_mut(d.max(1)).enumerate().take(rows) {
            row.iter_mut().for_each(|v| *v = *v / sv[r]);
        }
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(value, Op::DivRows { x, s }, rg))
    }

    /// `[a, b, rest..] -> [b, a, rest..]`.
    pub fn swap_leading(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::invalid("swap_leading needs two axes"));
        }
        let (a, b) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for i in 0..a {
            for j in 0..b {
                out[(j * a + i) * inner..(j * a + i + 1) * inner]
                    .copy_from_slice(&src[(i * b + j) * inner..(i * b + j + 1) * inner]);
            }
        }
        let mut new_shape = shape.clone();
        new_shape.swap(0, 1);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(new_shape, out)?, Op::SwapLeading(x), rg))
    }

    /// Flat gather: `out[i] = x.flat[idx[i]]`.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let v = self.value(x).data();
        if let Some(&bad) = idx.iter().find(|&&i| i >= v.len()) {
            return Err(Error::invalid(format!("gather index {} out of range {}", bad, v.len())));
        }
        let data = idx.iter().map(|&i| v[i]).collect();
        let value = Tensor::new(vec![idx.len()], data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Gather { x, idx }, rg))
    }

    /// Mean squared horizontal plus mean squared vertical neighbour differences.
    pub fn total_variation_sq(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::invalid(format!("total_variation_sq on {:?}", shape)));
        }
        let (nc, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
        let v = self.value(x).data();
        let (mut sh, mut sv) = (T::zero(), T::zero());
        for p in 0..nc {
            for i in 0..h {
                for j in 0..w {
                    let at = v[(p * h + i) * w + j];
                    if j + 1 < w {
                        let d = v[(p * h + i) * w + j + 1] - at;
                        sh += d * d;
                    }
                    if i + 1 < h {
                        let d = v[(p * h + i + 1) * w + j] - at;
                        sv += d * d;
                    }
                }
            }
        }
        let (ch, cv) = tv_counts(nc, h, w);
        let total = if ch > 0 { sh / T::lit(ch as f64) } else { T::zero() }
            + if cv > 0 { sv / T::lit(cv as f64) } else { T::zero() };
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(total), Op::TotalVariationSq(x), rg))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.rg(loss) {
            grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let gd = g.data();
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| axpy(d, gd, T::one()));
                self.acc(grads, *b, |d| axpy(d, gd, T::one()));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| axpy(d, gd, T::one()));
                self.acc(grads, *b, |d| axpy(d, gd, -T::one()));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |d| {
                    d.iter_mut().zip(gd.iter().zip(vb)).for_each(|(o, (g, y))| *o += *g * *y)
                });
                self.acc(grads, *b, |d| {
                    d.iter_mut().zip(gd.iter().zip(va)).for_each(|(o, (g, x))| *o += *g * *x)
                });
            }
            Op::AddRowBias { x, bias } => {
                self.acc(grads, *x, |d| axpy(d, gd, T::one()));
                let c = self.shape(*bias)[0];
                self.acc(grads, *bias, |d| {
                    for row in gd.chunks(c) {
                        d.iter_mut().zip(row).for_each(|(o, g)| *o += *g);
                    }
                });
            }
            Op::Scale(x, c) => self.acc(grads, *x, |d| axpy(d, gd, *c)),
            Op::AddScalar(x) => self.acc(grads, *x, |d| axpy(d, gd, T::one())),
            Op::MulConst { x, factor } => self.acc(grads, *x, |d| {
                d.iter_mut().zip(gd.iter().zip(factor)).for_each(|(o, (g, f))| *o += *g * *f)
            }),
            Op::MatMul { a, b, ta, tb, m, n, k } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let (ta, tb, m, n, k) = (*ta, *tb, *m, *n, *k);
                self.acc(grads, *a, |d| {
                    if ta {
                        gemm(tb, true, k, m, n, vb, gd, T::one(), d)
                    } else {
                        gemm(false, !tb, m, k, n, gd, vb, T::one(), d)
                    }
                });
                self.acc(grads, *b, |d| {
                    if tb {
                        gemm(true, ta, n, k, m, gd, va, T::one(), d)
                    } else {
                        gemm(!ta, false, k, n, m, va, gd, T::one(), d)
                    }
                });
            }
            Op::Bmm { a, b, ta, tb, groups, m, n, k } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let (ta, tb, m, n, k) = (*ta, *tb, *m, *n, *k);
                let (sa, sb, sc) = (m * k, k * n, m * n);
                self.acc(grads, *a, |d| {
                    for gi in 0..*groups {
                        let (bg, cg) = (&vb[gi * sb..(gi + 1) * sb], &gd[gi * sc..(gi + 1) * sc]);
                        let dg = &mut d[gi * sa..(gi + 1) * sa];
                        if ta {
                            gemm(tb, true, k, m, n, bg, cg, T::one(), dg)
                        } else {
                            gemm(false, !tb, m, k, n, cg, bg, T::one(), dg)
                        }
                    }
                });
                self.acc(grads, *b, |d| {
                    for gi in 0..*groups {
                        let (ag, cg) = (&va[gi * sa..(gi + 1) * sa], &gd[gi * sc..(gi + 1) * sc]);
                        let dg = &mut d[gi * sb..(gi + 1) * sb];
                        if tb {
                            gemm(true, ta, n, k, m, cg, ag, T::one(), dg)
                        } else {
                            gemm(!ta, false, k, n, m, ag, cg, T::one(), dg)
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |d| {
                    zip3(d, gd, xv, |g, v| if v > T::zero() { g } else { T::zero() })
                });
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |d| {
                    zip3(d, gd, xv, |g, v| if v > T::zero() { g } else { g * *slope })
                });
            }
            Op::Tanh(x) => self.acc(grads, *x, |d| zip3(d, gd, out, |g, y| g * (T::one() - y * y))),
            Op::Exp(x) => self.acc(grads, *x, |d| zip3(d, gd, out, |g, y| g * y)),
            Op::Ln(x) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |d| zip3(d, gd, xv, |g, v| g / v));
            }
            Op::Square(x) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |d| zip3(d, gd, xv, |g, v| g * (v + v)));
            }
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |d| zip3(d, gd, xv, |g, v| g * sign0(v)));
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |d| {
                    zip3(d, gd, xv, |g, v| if v >= *lo && v <= *hi { g } else { T::zero() })
                });
            }
            Op::SumAll(x) => {
                let g0 = gd[0];
                self.acc(grads, *x, |d| d.iter_mut().for_each(|o| *o += g0));
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).numel().max(1);
                let g0 = gd[0] / T::lit(n as f64);
                self.acc(grads, *x, |d| d.iter_mut().for_each(|o| *o += g0));
            }
            Op::SumLast(x) => {
                let (_, dlen) = last_dim(self.shape(*x))?;
                self.acc(grads, *x, |d| {
                    for (row, &gv) in d.chunks_mut(dlen.max(1)).zip(gd) {
                        row.iter_mut().for_each(|o| *o += gv);
                    }
                });
            }
            Op::MeanLeading(x) => {
                let r = self.shape(*x)[0];
                let c = gd.len();
                let inv = T::one() / T::lit(r as f64);
                self.acc(grads, *x, |d| {
                    for row in d.chunks_mut(c) {
                        row.iter_mut().zip(gd).for_each(|(o, g)| *o += *g * inv);
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let (_, c) = last_dim(self.shape(*x))?;
                self.acc(grads, *x, |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(c).zip(gd.chunks(c)).zip(out.chunks(c)) {
                        let gs: T = grow.iter().copied().sum();
                        for j in 0..c {
                            drow[j] += grow[j] - yrow[j].exp() * gs;
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let (_, c) = last_dim(self.shape(*x))?;
                self.acc(grads, *x, |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(c).zip(gd.chunks(c)).zip(out.chunks(c)) {
                        let dot: T = grow.iter().zip(yrow).map(|(g, y)| *g * *y).sum();
                        for j in 0..c {
                            drow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::PickCols { x, idx } => {
                let c = self.shape(*x)[1];
                self.acc(grads, *x, |d| {
                    for (r, &j) in idx.iter().enumerate() {
                        d[r * c + j] += gd[r];
                    }
                });
            }
            Op::NarrowCols { x, start } => {
                let c = self.shape(*x)[1];
                let len = node.value.dim(1);
                self.acc(grads, *x, |d| {
                    for (r, grow) in gd.chunks(len.max(1)).enumerate() {
                        axpy(&mut d[r * c + start..r * c + start + len], grow, T::one());
                    }
                });
            }
            Op::SliceLeading { x, start } => {
                let inner: usize = self.shape(*x)[1..].iter().product();
                self.acc(grads, *x, |d| {
                    axpy(&mut d[start * inner..start * inner + gd.len()], gd, T::one())
                });
            }
            Op::CatLeading(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    self.acc(grads, p, |d| axpy(d, &gd[off..off + len], T::one()));
                    off += len;
                }
            }
            Op::Reshape(x) => self.acc(grads, *x, |d| axpy(d, gd, T::one())),
            Op::Conv2d { x, w, geom, cols } => {
                let ConvGeom { n, c, o, k, oh, ow, .. } = *geom;
                let plane = oh * ow;
                let npix = n * plane;
                let ckk = c * k * k;
                // [n, o, plane] -> [o, n * plane]
                let mut gmat = vec![T::zero(); o * npix];
                for ni in 0..n {
                    for oi in 0..o {
                        gmat[oi * npix + ni * plane..oi * npix + (ni + 1) * plane]
                            .copy_from_slice(&gd[(ni * o + oi) * plane..(ni * o + oi + 1) * plane]);
                    }
                }
                if let Some(cols) = cols {
                    self.acc(grads, *w, |d| gemm(false, true, o, ckk, npix, &gmat, cols, T::one(), d));
                }
                if self.rg(*x) {
                    let mut dcols = vec![T::zero(); ckk * npix];
                    gemm(true, false, ckk, npix, o, self.value(*w).data(), &gmat, T::zero(), &mut dcols);
                    self.acc(grads, *x, |d| col2im(&dcols, geom, d));
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, training } => {
                let (n, c, sp) = nc_spatial(self.shape(*x))?;
                let gv = gamma.map(|g| self.value(g).data().to_vec());
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * sp;
                        for j in base..base + sp {
                            sum_g[ci] += gd[j];
                            sum_gx[ci] += gd[j] * xhat[j];
                        }
                    }
                }
                if let Some(gm) = gamma {
                    self.acc(grads, *gm, |d| axpy(d, &sum_gx, T::one()));
                }
                if let Some(bt) = beta {
                    self.acc(grads, *bt, |d| axpy(d, &sum_g, T::one()));
                }
                let m = T::lit((n * sp) as f64);
                self.acc(grads, *x, |d| {
                    for ni in 0..n {
                        for ci in 0..c {
                            let gam = gv.as_ref().map_or(T::one(), |g| g[ci]);
                            let scale = gam * inv_std[ci];
                            let base = (ni * c + ci) * sp;
                            if *training {
                                let mg = sum_g[ci] / m;
                                let mgx = sum_gx[ci] / m;
                                for j in base..base + sp {
                                    d[j] += scale * (gd[j] - mg - xhat[j] * mgx);
                                }
                            } else {
                                for j in base..base + sp {
                                    d[j] += scale * gd[j];
                                }
                            }
                        }
                    }
                });
            }
            Op::ChannelMean(x) => {
                let (n, c, sp) = nc_spatial(self.shape(*x))?;
                let inv = T::one() / T::lit((n * sp) as f64);
                self.acc(grads, *x, |d| {
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * sp;
                            d[base..base + sp].iter_mut().for_each(|o| *o += gd[ci] * inv);
                        }
                    }
                });
            }
            Op::ChannelVar { x, mean } => {
                let (n, c, sp) = nc_spatial(self.shape(*x))?;
                let xv = self.value(*x).data();
                let two_inv = T::lit(2.0) / T::lit((n * sp) as f64);
                self.acc(grads, *x, |d| {
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * sp;
                            for j in base..base + sp {
                                d[j] += gd[ci] * two_inv * (xv[j] - mean[ci]);
                            }
                        }
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let sp = s[2] * s[3];
                let inv = T::one() / T::lit(sp as f64);
                self.acc(grads, *x, |d| {
                    for (p, chunk) in d.chunks_mut(sp).enumerate() {
                        chunk.iter_mut().for_each(|o| *o += gd[p] * inv);
                    }
                });
            }
            Op::Upsample2x(x) => {
                let s = self.shape(*x);
                let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                self.acc(grads, *x, |d| {
                    for p in 0..nc {
                        for i in 0..2 * h {
                            for j in 0..2 * w {
                                d[(p * h + i / 2) * w + j / 2] += gd[(p * 2 * h + i) * 2 * w + j];
                            }
                        }
                    }
                });
            }
            Op::ChannelAffine { x, scale } => {
                let (n, c, sp) = nc_spatial(self.shape(*x))?;
                self.acc(grads, *x, |d| {
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * sp;
                            for j in base..base + sp {
                                d[j] += gd[j] * scale[ci];
                            }
                        }
                    }
                });
            }
            Op::PairwiseDiff(x) => {
                let s = self.shape(*x);
                let (b, dd) = (s[0], s[1]);
                self.acc(grads, *x, |d| {
                    for i in 0..b {
                        for j in 0..b {
                            let gr = &gd[(i * b + j) * dd..(i * b + j + 1) * dd];
                            for k in 0..dd {
                                d[i * dd + k] += gr[k];
                                d[j * dd + k] -= gr[k];
                            }
                        }
                    }
                });
            }
            Op::RowNorm(x) => {
                let (_, dd) = last_dim(self.shape(*x))?;
                let xv = self.value(*x).data();
                self.acc(grads, *x, |d| {
                    for (r, (drow, xrow)) in d.chunks_mut(dd.max(1)).zip(xv.chunks(dd.max(1))).enumerate() {
                        let nrm = out[r];
                        if nrm > T::zero() {
                            let f = gd[r] / nrm;
                            drow.iter_mut().zip(xrow).for_each(|(o, v)| *o += f * *v);
                        }
                    }
                });
            }
            Op::DivRows { x, s } => {
                let (_, dd) = last_dim(self.shape(*x))?;
                let sv = self.value(*s).data();
                let xv = self.value(*x).data();
                self.acc(grads, *x, |d| {
                    for (r, (drow, grow)) in d.chunks_mut(dd.max(1)).zip(gd.chunks(dd.max(1))).enumerate() {
                        drow.iter_mut().zip(grow).for_each(|(o, g)| *o += *g / sv[r]);
                    }
                });
                self.acc(grads, *s, |d| {
                    for (r, (grow, xrow)) in gd.chunks(dd.max(1)).zip(xv.chunks(dd.max(1))).enumerate() {
                        let dot: T = grow.iter().zip(xrow).map(|(g, v)| *g * *v).sum();
                        d[r] -= dot / (sv[r] * sv[r]);
                    }
                });
            }
            Op::SwapLeading(x) => {
                let s = self.shape(*x);
                let (a, b) = (s[0], s[1]);
                let inner: usize = s[2..].iter().product();
                self.acc(grads, *x, |d| {
                    for i in 0..a {
                        for j in 0..b {
                            axpy(
                                &mut d[(i * b + j) * inner..(i * b + j + 1) * inner],
                                &gd[(j * a + i) * inner..(j * a + i + 1) * inner],
                                T::one(),
                            );
                        }
                    }
                });
            }
            Op::Gather { x, idx } => self.acc(grads, *x, |d| {
                for (gv, &i) in gd.iter().zip(idx) {
                    d[i] += *gv;
                }
            }),
            Op::TotalVariationSq(x) => {
                let s = self.shape(*x);
                let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                let (ch, cv) = tv_counts(nc, h, w);
                let xv = self.value(*x).data();
                let two = T::lit(2.0) * gd[0];
                let fh = if ch > 0 { two / T::lit(ch as f64) } else { T::zero() };
                let fv = if cv > 0 { two / T::lit(cv as f64) } else { T::zero() };
                self.acc(grads, *x, |d| {
                    for p in 0..nc {
                        for i in 0..h {
                            for j in 0..w {
                                let at = (p * h + i) * w + j;
                                if j + 1 < w {
                                    let diff = xv[at + 1] - xv[at];
                                    d[at + 1] += fh * diff;
                                    d[at] -= fh * diff;
                                }
                                if i + 1 < h {
                                    let diff = xv[at + w] - xv[at];
                                    d[at + w] += fv * diff;
                                    d[at] -= fv * diff;
                                }
                            }
                        }
                    }
                });
            }
        }
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(node.value.shape()));
        f(slot.data_mut());
    }
}

/// Gradients of one backward pass, addressable by node or by parameter id.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<u64, Var>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf node, `None` when nothing flowed into it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: u64) -> Option<&Tensor<T>> {
        self.params.get(&id).and_then(|&v| self.wrt(v))
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v = *v / s);
}

fn sign0<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn axpy<T: Scalar>(d: &mut [T], g: &[T], a: T) {
    d.iter_mut().zip(g).for_each(|(o, v)| *o += a * *v);
}

fn zip3<T: Scalar>(d: &mut [T], g: &[T], x: &[T], f: impl Fn(T, T) -> T) {
    d.iter_mut()
        .zip(g.iter().zip(x))
        .for_each(|(o, (gv, xv))| *o += f(*gv, *xv));
}

fn tv_counts(nc: usize, h: usize, w: usize) -> (usize, usize) {
    (nc * h * w.saturating_sub(1), nc * h.saturating_sub(1) * w)
}

/// Per-channel mean and biased variance.
fn channel_moments<T: Scalar>(x: &[T], n: usize, c: usize, sp: usize) -> (Vec<T>, Vec<T>) {
    let m = T::lit((n * sp).max(1) as f64);
    let mut mean = vec![T::zero(); c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * sp;
            mean[ci] += x[base..base + sp].iter().copied().sum::<T>();
        }
    }
    mean.iter_mut().for_each(|v| *v = *v / m);
    let mut var = vec![T::zero(); c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * sp;
            var[ci] += x[base..base + sp]
                .iter()
                .map(|&v| (v - mean[ci]) * (v - mean[ci]))
                .sum::<T>();
        }
    }
    var.iter_mut().for_each(|v| *v = *v / m);
    (mean, var)
}

/// `[n, c, h, w] -> [c * k * k, n * oh * ow]`.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let npix = g.n * g.oh * g.ow;
    let mut cols = vec![T::zero(); g.c * g.k * g.k * npix];
    for ci in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * npix..(row + 1) * npix];
                for ni in 0..g.n {
                    let src = &x[(ni * g.c + ci) * g.h * g.w..(ni * g.c + ci + 1) * g.h * g.w];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let srow = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let drow = &mut dst[(ni * g.oh + oy) * g.ow..(ni * g.oh + oy + 1) * g.ow];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *d = srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let npix = g.n * g.oh * g.ow;
    for ci in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let src = &cols[row * npix..(row + 1) * npix];
                for ni in 0..g.n {
                    let base = (ni * g.c + ci) * g.h * g.w;
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let srow = &src[(ni * g.oh + oy) * g.ow..(ni * g.oh + oy + 1) * g.ow];
                        for (ox, v) in srow.iter().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dx[base + iy as usize * g.w + ix as usize] += *v;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central differences of `f` at `x0`, perturbing every coordinate.
    fn numeric_grad(x0: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64) -> Vec<f64> {
        let h = 1e-6;
        (0..x0.numel())
            .map(|i| {
                let mut p = x0.clone();
                p.data_mut()[i] += h;
                let mut m = x0.clone();
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn check(shapes: &[&[usize]], seed: u64, build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| Tensor::randn(s, 1.0, &mut rng)).collect();
        let eval = |ts: &[Tensor<f64>]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ts.iter().map(|t| g.input(t.clone())).collect();
            let out = build(&mut g, &vars);
            (g, vars, out)
        };
        let (g, vars, out) = eval(&inputs);
        let grads = g.backward(out).unwrap();
        for (i, v) in vars.iter().enumerate() {
            let analytic = grads.wrt(*v).map(|t| t.data().to_vec()).unwrap_or(vec![0.0; inputs[i].numel()]);
            let numeric = numeric_grad(&inputs[i], |p| {
                let mut ts = inputs.clone();
                ts[i] = p.clone();
                let (g, _, o) = eval(&ts);
                g.value(o).item()
            });
            for (a, n) in analytic.iter().zip(&numeric) {
                let err = (a - n).abs() / (1.0 + a.abs().max(n.abs()));
                assert!(err < 1e-5, "input {}: analytic {} numeric {}", i, a, n);
            }
        }
    }

    #[test]
    fn matmul_gradients_all_transposes() {
        for ta in [false, true] {
            for tb in [false, true] {
                let sa: &[usize] = if ta { &[4, 3] } else { &[3, 4] };
                let sb: &[usize] = if tb { &[5, 4] } else { &[4, 5] };
                check(&[sa, sb], 1, |g, v| {
                    let y = g.matmul(v[0], v[1], ta, tb).unwrap();
                    let y = g.square(y);
                    g.sum_all(y)
                });
            }
        }
    }

    #[test]
    fn bmm_gradients() {
        check(&[&[2, 3, 4], &[2, 5, 4]], 2, |g, v| {
            let y = g.bmm(v[0], v[1], false, true).unwrap();
            let y = g.tanh(y);
            g.sum_all(y)
        });
        check(&[&[2, 4, 3], &[2, 4, 5]], 3, |g, v| {
            let y = g.bmm(v[0], v[1], true, false).unwrap();
            let y = g.square(y);
            g.mean_all(y)
        });
    }

    #[test]
    fn conv_and_batch_norm_gradients() {
        check(&[&[2, 3, 5, 5], &[4, 3, 3, 3], &[4], &[4]], 4, |g, v| {
            let y = g.conv2d(v[0], v[1], 2, 1).unwrap();
            let (y, _) = g.batch_norm(y, Some(v[2]), Some(v[3]), None, 1e-5).unwrap();
            let y = g.tanh(y);
            let y = g.upsample2x(y).unwrap();
            let y = g.global_avg_pool(y).unwrap();
            let y = g.square(y);
            g.sum_all(y)
        });
    }

    #[test]
    fn eval_batch_norm_and_channel_stats_gradients() {
        check(&[&[3, 2, 2, 2]], 5, |g, v| {
            let (y, _) = g
                .batch_norm(v[0], None, None, Some((&[0.1, -0.2], &[1.5, 0.7])), 1e-5)
                .unwrap();
            let m = g.channel_mean(y).unwrap();
            let s = g.channel_var(v[0]).unwrap();
            let a = g.square(m);
            let b = g.ln(s);
            let t = g.add(a, b).unwrap();
            g.sum_all(t)
        });
    }

    #[test]
    fn softmax_family_gradients() {
        check(&[&[3, 4]], 6, |g, v| {
            let l = g.log_softmax(v[0]).unwrap();
            let p = g.pick_cols(l, &[0, 3, 1]).unwrap();
            let s = g.softmax(v[0]).unwrap();
            let m = g.mean_leading(s).unwrap();
            let lm = g.ln(m);
            let a = g.sum_all(p);
            let b = g.sum_all(lm);
            let t = g.add(a, b).unwrap();
            g.scale(t, -1.0)
        });
    }

    #[test]
    fn relation_primitives_gradients() {
        check(&[&[4, 3]], 7, |g, v| {
            let d = g.pairwise_diff(v[0]).unwrap();
            let n = g.row_norm(d).unwrap();
            let n = g.add_scalar(n, 1e-3);
            let e = g.div_rows(d, n).unwrap();
            let e = g.swap_leading(e).unwrap();
            let c = g.bmm(e, e, false, true).unwrap();
            let c = g.gather(c, vec![1, 6, 11, 21, 40, 47]).unwrap();
            let c = g.square(c);
            g.sum_all(c)
        });
    }

    #[test]
    fn misc_gradients() {
        check(&[&[2, 3], &[3], &[2, 3]], 8, |g, v| {
            let y = g.add_row_bias(v[0], v[1]).unwrap();
            let y = g.mul(y, v[2]).unwrap();
            let y = g.leaky_relu(y, 0.2);
            let z = g.narrow_cols(y, 1, 2).unwrap();
            let z = g.exp(z);
            let w = g.cat_leading(&[z, z]).unwrap();
            let w = g.slice_leading(w, 1, 2).unwrap();
            let w = g.reshape(w, &[4]).unwrap();
            let w = g.sum_last(w).unwrap();
            let q = g.sub(v[0], v[2]).unwrap();
            let q = g.abs(q);
            let q = g.sum_all(q);
            g.add(w, q).unwrap()
        });
        check(&[&[2, 2, 3, 4]], 9, |g, v| {
            let y = g.channel_affine(v[0], &[0.5, 2.0], &[1.0, -1.0]).unwrap();
            g.total_variation_sq(y).unwrap()
        });
    }

    #[test]
    fn abs_has_zero_subgradient_at_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::new(vec![3], vec![0.0, 2.0, -1.0]).unwrap());
        let y = g.abs(x);
        let s = g.sum_all(y);
        let gr = g.backward(s).unwrap();
        assert_eq!(gr.wrt(x).unwrap().data(), &[0.0, 1.0, -1.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::full(&[2], 3.0));
        let x = g.input(Tensor::full(&[2], 1.0));
        let y = g.mul(c, x).unwrap();
        let s = g.sum_all(y);
        let gr = g.backward(s).unwrap();
        assert!(gr.wrt(c).is_none());
        assert_eq!(gr.wrt(x).unwrap().data(), &[3.0, 3.0]);
    }
}
