//! Reverse-mode automatic differentiation over a recorded operation tape.
//!
//! A [`Tape`] owns every tensor produced during a forward pass. Operations
//! append nodes in execution order, which is already a topological order, so
//! [`Tape::backward`] is a single reverse sweep that visits each node exactly
//! once. Gradients accumulate additively: running `backward` twice doubles
//! the stored gradients until [`Tape::zero_grads`] clears them.
//!
//! Every forward result is checked for NaN/Inf; a non-finite value is an
//! error, not a silent state.

use super::conv;
use super::Tensor;
use crate::error::{Error, Result};
use ndarray::ArrayView2;

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Forward-pass mode: training uses batch statistics in normalization
/// layers, evaluation uses running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Square(Var),
    Sqrt(Var),
    Exp(Var),
    Log(Var),
    Neg(Var),
    Scale(Var, f64),
    Matmul(Var, Var),
    AddBias(Var, Var),
    Reshape(Var),
    Conv2d {
        input: Var,
        kernels: Var,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    /// Train-mode batch normalization; batch mean and 1/std are saved for
    /// the backward pass.
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    /// Eval-mode normalization against fixed running statistics.
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    /// (B,C,H,W) -> (B*H*W, C) so per-channel statistics become per-column.
    ChannelsToCols(Var),
    ColsToChannels(Var, [usize; 4]),
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    GroupedRowMean {
        x: Var,
        groups: Vec<Vec<usize>>,
    },
    PairwiseSqEuclidean(Var, Var),
    PairwiseCosine(Var, Var),
    PairwiseMahalanobis(Var, Var, Vec<f64>),
    LogSumExpRows(Var),
    GatherPerRow {
        x: Var,
        cols: Vec<usize>,
    },
    GatherCols {
        x: Var,
        cols: Vec<usize>,
    },
    StackCols(Vec<Var>),
    SumAll(Var),
    MeanAll(Var),
    UnitNormalizeRows(Var),
}

/// Append-only record of a forward computation.
pub struct Tape {
    ops: Vec<Op>,
    vals: Vec<Tensor>,
    grads: Vec<Option<Vec<f64>>>,
    requires: Vec<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            ops: Vec::new(),
            vals: Vec::new(),
            grads: Vec::new(),
            requires: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Register an input tensor. `requires_grad` marks it as a target for
    /// gradient accumulation.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push("leaf", Op::Leaf, value, requires_grad)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.vals[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.vals[v.0].shape()
    }

    /// Accumulated gradient of `v`, if any backward pass has reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| {
            Tensor::from_vec(self.vals[v.0].shape().to_vec(), g.clone()).expect("grad shape")
        })
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn push(&mut self, name: &'static str, op: Op, value: Tensor, requires: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NumericDomain {
                op: name,
                detail: "non-finite value produced".into(),
            });
        }
        self.ops.push(op);
        self.vals.push(value);
        self.grads.push(None);
        self.requires.push(requires);
        Ok(Var(self.ops.len() - 1))
    }

    fn req(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    // ---- elementwise -----------------------------------------------------

    fn unary(
        &mut self,
        name: &'static str,
        x: Var,
        op: Op,
        f: impl Fn(f64) -> f64,
    ) -> Result<Var> {
        let out = Tensor::from_vec(
            self.vals[x.0].shape().to_vec(),
            self.vals[x.0].data().iter().map(|&v| f(v)).collect(),
        )?;
        let r = self.req(x);
        self.push(name, op, out, r)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary("square", x, Op::Square(x), |v| v * v)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.vals[x.0].data().iter().any(|&v| v < 0.0) {
            return Err(Error::NumericDomain {
                op: "sqrt",
                detail: "negative input".into(),
            });
        }
        self.unary("sqrt", x, Op::Sqrt(x), f64::sqrt)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.vals[x.0].data().iter().any(|&v| v <= 0.0) {
            return Err(Error::NumericDomain {
                op: "log",
                detail: "non-positive input".into(),
            });
        }
        self.unary("log", x, Op::Log(x), f64::ln)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary("neg", x, Op::Neg(x), |v| -v)
    }

    /// Multiply by a compile-time constant (no gradient w.r.t. the constant).
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("scale", x, Op::Scale(x, c), |v| c * v)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (va, vb) = (&self.vals[a.0], &self.vals[b.0]);
        let out = if va.shape() == vb.shape() {
            Tensor::from_vec(
                va.shape().to_vec(),
                va.data()
                    .iter()
                    .zip(vb.data())
                    .map(|(&x, &y)| f(x, y))
                    .collect(),
            )?
        } else if vb.is_scalar() {
            let s = vb.item();
            Tensor::from_vec(
                va.shape().to_vec(),
                va.data().iter().map(|&x| f(x, s)).collect(),
            )?
        } else if va.is_scalar() {
            let s = va.item();
            Tensor::from_vec(
                vb.shape().to_vec(),
                vb.data().iter().map(|&y| f(s, y)).collect(),
            )?
        } else {
            return Err(Error::shape(
                name,
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        };
        let r = self.req(a) || self.req(b);
        self.push(name, op, out, r)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.vals[a.0], &self.vals[b.0]);
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let av = ArrayView2::from_shape((m, k), va.data()).expect("matmul lhs view");
        let bv = ArrayView2::from_shape((k, n), vb.data()).expect("matmul rhs view");
        let out = Tensor::from_vec(vec![m, n], av.dot(&bv).into_raw_vec_and_offset().0)?;
        let r = self.req(a) || self.req(b);
        self.push("matmul", Op::Matmul(a, b), out, r)
    }

    /// Add a bias row-vector to every row of a matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (&self.vals[x.0], &self.vals[bias.0]);
        let (sx, sb) = (vx.shape(), vb.shape());
        if sx.len() != 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(Error::shape("add_bias", format!("{:?} + {:?}", sx, sb)));
        }
        let cols = sx[1];
        let mut data = vx.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += vb.data()[i % cols];
        }
        let out = Tensor::from_vec(sx.to_vec(), data)?;
        let r = self.req(x) || self.req(bias);
        self.push("add_bias", Op::AddBias(x, bias), out, r)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.vals[x.0].reshape(shape)?;
        let r = self.req(x);
        self.push("reshape", Op::Reshape(x), out, r)
    }

    // ---- convolution stack --------------------------------------------------

    /// 3x3 cross-correlation with zero same-padding. Accepts (C,H,W) or
    /// (B,C,H,W) input; kernels are (O,C,3,3).
    pub fn conv2d(&mut self, input: Var, kernels: Var) -> Result<Var> {
        let shape = conv::conv_output_shape(self.vals[input.0].shape(), self.vals[kernels.0].shape())?;
        let out = conv::conv2d_forward(&self.vals[input.0], &self.vals[kernels.0])?;
        debug_assert_eq!(out.shape(), &shape[..]);
        let r = self.req(input) || self.req(kernels);
        self.push("conv2d", Op::Conv2d { input, kernels }, out, r)
    }

    /// 2x2 max pooling with stride 2. Odd trailing rows/columns are dropped;
    /// a dimension of size 1 passes through unchanged.
    pub fn maxpool2d(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = conv::maxpool2d_forward(&self.vals[input.0])?;
        let r = self.req(input);
        self.push("maxpool2d", Op::MaxPool2d { input, argmax }, out, r)
    }

    pub fn channels_to_cols(&mut self, x: Var) -> Result<Var> {
        let s = self.vals[x.0].shape();
        if s.len() != 4 {
            return Err(Error::shape("channels_to_cols", format!("{:?}", s)));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let src = self.vals[x.0].data();
        let mut data = vec![0.0; src.len()];
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        data[(((bi * h + y) * w + xx) * c) + ci] =
                            src[((bi * c + ci) * h + y) * w + xx];
                    }
                }
            }
        }
        let out = Tensor::from_vec(vec![b * h * w, c], data)?;
        let r = self.req(x);
        self.push("channels_to_cols", Op::ChannelsToCols(x), out, r)
    }

    pub fn cols_to_channels(&mut self, x: Var, bchw: [usize; 4]) -> Result<Var> {
        let [b, c, h, w] = bchw;
        let s = self.vals[x.0].shape();
        if s.len() != 2 || s[0] != b * h * w || s[1] != c {
            return Err(Error::shape(
                "cols_to_channels",
                format!("{:?} vs target {:?}", s, bchw),
            ));
        }
        let src = self.vals[x.0].data();
        let mut data = vec![0.0; src.len()];
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        data[((bi * c + ci) * h + y) * w + xx] =
                            src[(((bi * h + y) * w + xx) * c) + ci];
                    }
                }
            }
        }
        let out = Tensor::from_vec(vec![b, c, h, w], data)?;
        let r = self.req(x);
        self.push("cols_to_channels", Op::ColsToChannels(x, bchw), out, r)
    }

    // ---- batch normalization ------------------------------------------------

    /// Train-mode batch normalization of a (B,F) matrix. Returns the output
    /// together with the biased batch mean and variance so the caller can
    /// update its running statistics.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let s = self.vals[x.0].shape().to_vec();
        if s.len() != 2 {
            return Err(Error::shape("batchnorm", format!("{:?}", s)));
        }
        let (b, f) = (s[0], s[1]);
        if b < 2 {
            return Err(Error::BatchSize {
                op: "batchnorm",
                got: b,
                need: 2,
            });
        }
        self.check_affine_params("batchnorm", f, gamma, beta)?;

        let data = self.vals[x.0].data();
        let mut mean = vec![0.0; f];
        for row in 0..b {
            for col in 0..f {
                mean[col] += data[row * f + col];
            }
        }
        for m in &mut mean {
            *m /= b as f64;
        }
        let mut var = vec![0.0; f];
        for row in 0..b {
            for col in 0..f {
                let d = data[row * f + col] - mean[col];
                var[col] += d * d;
            }
        }
        for v in &mut var {
            *v /= b as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();

        let g = self.vals[gamma.0].data();
        let bb = self.vals[beta.0].data();
        let mut out = vec![0.0; b * f];
        for row in 0..b {
            for col in 0..f {
                let xhat = (data[row * f + col] - mean[col]) * inv_std[col];
                out[row * f + col] = g[col] * xhat + bb[col];
            }
        }
        let r = self.req(x) || self.req(gamma) || self.req(beta);
        let out = Tensor::from_vec(s, out)?;
        let var_out = var.clone();
        let v = self.push(
            "batchnorm",
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                mean: mean.clone(),
                inv_std,
            },
            out,
            r,
        )?;
        Ok((v, mean, var_out))
    }

    /// Eval-mode normalization against fixed running statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let s = self.vals[x.0].shape().to_vec();
        if s.len() != 2 {
            return Err(Error::shape("batchnorm", format!("{:?}", s)));
        }
        let (b, f) = (s[0], s[1]);
        if running_mean.len() != f || running_var.len() != f {
            return Err(Error::shape("batchnorm", "running stats size".to_string()));
        }
        self.check_affine_params("batchnorm", f, gamma, beta)?;
        let inv_std: Vec<f64> = running_var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let data = self.vals[x.0].data();
        let g = self.vals[gamma.0].data();
        let bb = self.vals[beta.0].data();
        let mut out = vec![0.0; b * f];
        for row in 0..b {
            for col in 0..f {
                let xhat = (data[row * f + col] - running_mean[col]) * inv_std[col];
                out[row * f + col] = g[col] * xhat + bb[col];
            }
        }
        let r = self.req(x) || self.req(gamma) || self.req(beta);
        let out = Tensor::from_vec(s, out)?;
        self.push(
            "batchnorm",
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                inv_std,
            },
            out,
            r,
        )
    }

    fn check_affine_params(&self, op: &'static str, f: usize, gamma: Var, beta: Var) -> Result<()> {
        if self.vals[gamma.0].shape() != [f] || self.vals[beta.0].shape() != [f] {
            return Err(Error::shape(op, "gamma/beta must be (F,)".to_string()));
        }
        Ok(())
    }

    // ---- row selection and grouping -----------------------------------------

    pub fn gather_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        let s = self.vals[x.0].shape();
        if s.len() != 2 {
            return Err(Error::shape("gather_rows", format!("{:?}", s)));
        }
        let (n, c) = (s[0], s[1]);
        if rows.iter().any(|&r| r >= n) {
            return Err(Error::contract("gather_rows", "row index out of range"));
        }
        let src = self.vals[x.0].data();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in &rows {
            data.extend_from_slice(&src[r * c..(r + 1) * c]);
        }
        let out = Tensor::from_vec(vec![rows.len(), c], data)?;
        let r = self.req(x);
        self.push("gather_rows", Op::GatherRows { x, rows }, out, r)
    }

    /// Mean of each group of rows; output is (num_groups, cols).
    pub fn grouped_row_mean(&mut self, x: Var, groups: Vec<Vec<usize>>) -> Result<Var> {
        let s = self.vals[x.0].shape();
        if s.len() != 2 {
            return Err(Error::shape("grouped_row_mean", format!("{:?}", s)));
        }
        let (n, c) = (s[0], s[1]);
        if groups.is_empty() {
            return Err(Error::contract("grouped_row_mean", "no groups"));
        }
        for (k, g) in groups.iter().enumerate() {
            if g.is_empty() {
                return Err(Error::contract(
                    "grouped_row_mean",
                    format!("group {k} is empty"),
                ));
            }
            if g.iter().any(|&r| r >= n) {
                return Err(Error::contract("grouped_row_mean", "row index out of range"));
            }
        }
        let src = self.vals[x.0].data();
        let mut data = vec![0.0; groups.len() * c];
        for (k, g) in groups.iter().enumerate() {
            for &r in g {
                for col in 0..c {
                    data[k * c + col] += src[r * c + col];
                }
            }
            let inv = 1.0 / g.len() as f64;
            for col in 0..c {
                data[k * c + col] *= inv;
            }
        }
        let out = Tensor::from_vec(vec![groups.len(), c], data)?;
        let r = self.req(x);
        self.push("grouped_row_mean", Op::GroupedRowMean { x, groups }, out, r)
    }

    // ---- batched distances ----------------------------------------------------

    fn check_pairwise(&self, a: Var, b: Var) -> Result<(usize, usize, usize)> {
        let (sa, sb) = (self.vals[a.0].shape(), self.vals[b.0].shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape("pairwise", format!("{:?} vs {:?}", sa, sb)));
        }
        Ok((sa[0], sb[0], sa[1]))
    }

    /// D[q,k] = sum_m (Q[q,m] - P[k,m])^2
    pub fn pairwise_sq_euclidean(&mut self, q: Var, p: Var) -> Result<Var> {
        let (nq, np, m) = self.check_pairwise(q, p)?;
        let (dq, dp) = (self.vals[q.0].data(), self.vals[p.0].data());
        let mut out = vec![0.0; nq * np];
        for i in 0..nq {
            for j in 0..np {
                let mut acc = 0.0;
                for t in 0..m {
                    let d = dq[i * m + t] - dp[j * m + t];
                    acc += d * d;
                }
                out[i * np + j] = acc;
            }
        }
        let out = Tensor::from_vec(vec![nq, np], out)?;
        let r = self.req(q) || self.req(p);
        self.push("pairwise_sq_euclidean", Op::PairwiseSqEuclidean(q, p), out, r)
    }

    /// D[q,k] = 1 - cos(Q[q], P[k]). Rows must be nonzero.
    pub fn pairwise_cosine(&mut self, q: Var, p: Var) -> Result<Var> {
        let (nq, np, m) = self.check_pairwise(q, p)?;
        let (dq, dp) = (self.vals[q.0].data(), self.vals[p.0].data());
        let qn = row_norms(dq, nq, m);
        let pn = row_norms(dp, np, m);
        if qn.iter().chain(pn.iter()).any(|&n| n == 0.0) {
            return Err(Error::DegenerateInput {
                op: "pairwise_cosine",
                detail: "zero vector has no direction".into(),
            });
        }
        let mut out = vec![0.0; nq * np];
        for i in 0..nq {
            for j in 0..np {
                let mut dot = 0.0;
                for t in 0..m {
                    dot += dq[i * m + t] * dp[j * m + t];
                }
                out[i * np + j] = 1.0 - dot / (qn[i] * pn[j]);
            }
        }
        let out = Tensor::from_vec(vec![nq, np], out)?;
        let r = self.req(q) || self.req(p);
        self.push("pairwise_cosine", Op::PairwiseCosine(q, p), out, r)
    }

    /// D[q,k] = sum_m w[m] (Q[q,m] - P[k,m])^2 with strictly positive weights.
    pub fn pairwise_mahalanobis(&mut self, q: Var, p: Var, weights: Vec<f64>) -> Result<Var> {
        let (nq, np, m) = self.check_pairwise(q, p)?;
        if weights.len() != m {
            return Err(Error::shape("pairwise_mahalanobis", "weight length".to_string()));
        }
        if weights.iter().any(|&w| w <= 0.0) {
            return Err(Error::contract(
                "pairwise_mahalanobis",
                "weights must be strictly positive",
            ));
        }
        let (dq, dp) = (self.vals[q.0].data(), self.vals[p.0].data());
        let mut out = vec![0.0; nq * np];
        for i in 0..nq {
            for j in 0..np {
                let mut acc = 0.0;
                for t in 0..m {
                    let d = dq[i * m + t] - dp[j * m + t];
                    acc += weights[t] * d * d;
                }
                out[i * np + j] = acc;
            }
        }
        let out = Tensor::from_vec(vec![nq, np], out)?;
        let r = self.req(q) || self.req(p);
        self.push(
            "pairwise_mahalanobis",
            Op::PairwiseMahalanobis(q, p, weights),
            out,
            r,
        )
    }

    // ---- reductions and softmax pieces ---------------------------------------

    /// Row-wise log(sum(exp(x))) with max subtraction.
    pub fn logsumexp_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.vals[x.0].shape();
        if s.len() != 2 || s[1] == 0 {
            return Err(Error::shape("logsumexp_rows", format!("{:?}", s)));
        }
        let (n, c) = (s[0], s[1]);
        let src = self.vals[x.0].data();
        let mut out = vec![0.0; n];
        for i in 0..n {
            let row = &src[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|&v| (v - m).exp()).sum();
            out[i] = m + s.ln();
        }
        let out = Tensor::from_vec(vec![n], out)?;
        let r = self.req(x);
        self.push("logsumexp_rows", Op::LogSumExpRows(x), out, r)
    }

    /// out[i] = x[i, cols[i]]
    pub fn gather_per_row(&mut self, x: Var, cols: Vec<usize>) -> Result<Var> {
        let s = self.vals[x.0].shape();
        if s.len() != 2 || cols.len() != s[0] {
            return Err(Error::shape("gather_per_row", format!("{:?}", s)));
        }
        let c = s[1];
        if cols.iter().any(|&j| j >= c) {
            return Err(Error::contract("gather_per_row", "column index out of range"));
        }
        let src = self.vals[x.0].data();
        let out: Vec<f64> = cols.iter().enumerate().map(|(i, &j)| src[i * c + j]).collect();
        let out = Tensor::from_vec(vec![s[0]], out)?;
        let r = self.req(x);
        self.push("gather_per_row", Op::GatherPerRow { x, cols }, out, r)
    }

    /// Select a fixed subset of columns from every row.
    pub fn gather_cols(&mut self, x: Var, cols: Vec<usize>) -> Result<Var> {
        let s = self.vals[x.0].shape();
        if s.len() != 2 {
            return Err(Error::shape("gather_cols", format!("{:?}", s)));
        }
        let (n, c) = (s[0], s[1]);
        if cols.iter().any(|&j| j >= c) {
            return Err(Error::contract("gather_cols", "column index out of range"));
        }
        let src = self.vals[x.0].data();
        let mut out = Vec::with_capacity(n * cols.len());
        for i in 0..n {
            for &j in &cols {
                out.push(src[i * c + j]);
            }
        }
        let out = Tensor::from_vec(vec![n, cols.len()], out)?;
        let r = self.req(x);
        self.push("gather_cols", Op::GatherCols { x, cols }, out, r)
    }

    /// Stack equal-length vectors as the columns of a matrix.
    pub fn stack_cols(&mut self, items: Vec<Var>) -> Result<Var> {
        if items.is_empty() {
            return Err(Error::contract("stack_cols", "no inputs"));
        }
        let n = {
            let s = self.vals[items[0].0].shape();
            if s.len() != 1 {
                return Err(Error::shape("stack_cols", format!("{:?}", s)));
            }
            s[0]
        };
        for &v in &items {
            if self.vals[v.0].shape() != [n] {
                return Err(Error::shape("stack_cols", "mixed lengths".to_string()));
            }
        }
        let k = items.len();
        let mut out = vec![0.0; n * k];
        for (j, &v) in items.iter().enumerate() {
            for (i, &val) in self.vals[v.0].data().iter().enumerate() {
                out[i * k + j] = val;
            }
        }
        let r = items.iter().any(|&v| self.req(v));
        let out = Tensor::from_vec(vec![n, k], out)?;
        self.push("stack_cols", Op::StackCols(items), out, r)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.vals[x.0].data().iter().sum();
        let r = self.req(x);
        self.push("sum_all", Op::SumAll(x), Tensor::scalar(s), r)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.vals[x.0].numel();
        if n == 0 {
            return Err(Error::contract("mean_all", "empty tensor"));
        }
        let s: f64 = self.vals[x.0].data().iter().sum::<f64>() / n as f64;
        let r = self.req(x);
        self.push("mean_all", Op::MeanAll(x), Tensor::scalar(s), r)
    }

    /// Scale each row of a matrix to unit Euclidean norm.
    pub fn unit_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.vals[x.0].shape();
        if s.len() != 2 {
            return Err(Error::shape("unit_normalize_rows", format!("{:?}", s)));
        }
        let (n, c) = (s[0], s[1]);
        let src = self.vals[x.0].data();
        let norms = row_norms(src, n, c);
        if norms.iter().any(|&v| v == 0.0) {
            return Err(Error::DegenerateInput {
                op: "unit_normalize_rows",
                detail: "zero-norm row".into(),
            });
        }
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            for j in 0..c {
                out[i * c + j] = src[i * c + j] / norms[i];
            }
        }
        let out = Tensor::from_vec(vec![n, c], out)?;
        let r = self.req(x);
        self.push("unit_normalize_rows", Op::UnitNormalizeRows(x), out, r)
    }

    // ---- backward ------------------------------------------------------------

    /// Reverse sweep from a scalar loss. Gradients of every reachable
    /// gradient-requiring tensor are added into the tape's stored grads.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.ops.is_empty() {
            return Err(Error::contract("backward", "empty tape"));
        }
        if !self.vals[loss.0].is_scalar() {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.vals[loss.0].shape()),
            ));
        }
        // Pass-local workspace so repeated calls accumulate exactly one
        // gradient contribution each.
        let mut ws: Vec<Option<Vec<f64>>> = vec![None; self.ops.len()];
        ws[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if !self.requires[id] {
                continue;
            }
            let g = match ws[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.step_backward(id, &g, &mut ws);
            ws[id] = Some(g);
        }

        for (id, wg) in ws.into_iter().enumerate() {
            if let Some(wg) = wg {
                if !self.requires[id] {
                    continue;
                }
                let slot = self.grads[id].get_or_insert_with(|| vec![0.0; wg.len()]);
                for (a, b) in slot.iter_mut().zip(&wg) {
                    *a += b;
                }
                if matches!(self.ops[id], Op::Leaf) && slot.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NumericDomain {
                        op: "backward",
                        detail: "non-finite gradient".into(),
                    });
                }
            }
        }
        Ok(())
    }

    fn step_backward(&self, id: usize, g: &[f64], ws: &mut [Option<Vec<f64>>]) {
        match &self.ops[id] {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.binary_side(ws, *a, g, 1.0);
                self.binary_side(ws, *b, g, 1.0);
            }
            Op::Sub(a, b) => {
                self.binary_side(ws, *a, g, 1.0);
                self.binary_side(ws, *b, g, -1.0);
            }
            Op::Mul(a, b) => {
                self.mul_side(ws, *a, *b, g);
                self.mul_side(ws, *b, *a, g);
            }
            Op::Relu(x) => {
                let xv = self.vals[x.0].data();
                let contrib: Vec<f64> = g
                    .iter()
                    .zip(xv)
                    .map(|(&gv, &v)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                acc(ws, self, *x, &contrib);
            }
            Op::Square(x) => {
                let xv = self.vals[x.0].data();
                let contrib: Vec<f64> = g.iter().zip(xv).map(|(&gv, &v)| 2.0 * v * gv).collect();
                acc(ws, self, *x, &contrib);
            }
            Op::Sqrt(x) => {
                let yv = self.vals[id].data();
                let contrib: Vec<f64> = g.iter().zip(yv).map(|(&gv, &y)| gv / (2.0 * y)).collect();
                acc(ws, self, *x, &contrib);
            }
            Op::Exp(x) => {
                let yv = self.vals[id].data();
                let contrib: Vec<f64> = g.iter().zip(yv).map(|(&gv, &y)| gv * y).collect();
                acc(ws, self, *x, &contrib);
            }
            Op::Log(x) => {
                let xv = self.vals[x.0].data();
                let contrib: Vec<f64> = g.iter().zip(xv).map(|(&gv, &v)| gv / v).collect();
                acc(ws, self, *x, &contrib);
            }
            Op::Neg(x) => {
                let contrib: Vec<f64> = g.iter().map(|&gv| -gv).collect();
                acc(ws, self, *x, &contrib);
            }
            Op::Scale(x, c) => {
                let contrib: Vec<f64> = g.iter().map(|&gv| c * gv).collect();
                acc(ws, self, *x, &contrib);
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.vals[a.0].shape(), self.vals[b.0].shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let gv = ArrayView2::from_shape((m, n), g).expect("grad view");
                if self.requires[a.0] {
                    let bv = ArrayView2::from_shape((k, n), self.vals[b.0].data()).unwrap();
                    let da = gv.dot(&bv.t()).into_raw_vec_and_offset().0;
                    acc(ws, self, *a, &da);
                }
                if self.requires[b.0] {
                    let av = ArrayView2::from_shape((m, k), self.vals[a.0].data()).unwrap();
                    let db = av.t().dot(&gv).into_raw_vec_and_offset().0;
                    acc(ws, self, *b, &db);
                }
            }
            Op::AddBias(x, bias) => {
                acc(ws, self, *x, g);
                if self.requires[bias.0] {
                    let cols = self.vals[bias.0].numel();
                    let mut db = vec![0.0; cols];
                    for (i, &gv) in g.iter().enumerate() {
                        db[i % cols] += gv;
                    }
                    acc(ws, self, *bias, &db);
                }
            }
            Op::Reshape(x) => acc(ws, self, *x, g),
            Op::Conv2d { input, kernels } => {
                let (di, dk) = conv::conv2d_backward(
                    &self.vals[input.0],
                    &self.vals[kernels.0],
                    g,
                    self.requires[input.0],
                    self.requires[kernels.0],
                );
                if let Some(di) = di {
                    acc(ws, self, *input, &di);
                }
                if let Some(dk) = dk {
                    acc(ws, self, *kernels, &dk);
                }
            }
            Op::MaxPool2d { input, argmax } => {
                if self.requires[input.0] {
                    for (o, &src_idx) in argmax.iter().enumerate() {
                        acc_at(ws, self, *input, src_idx, g[o]);
                    }
                }
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let s = self.vals[x.0].shape();
                let (b, f) = (s[0], s[1]);
                let xd = self.vals[x.0].data();
                let gd = self.vals[gamma.0].data();
                // Column sums of g and of g * xhat.
                let mut s1 = vec![0.0; f];
                let mut s2 = vec![0.0; f];
                for row in 0..b {
                    for col in 0..f {
                        let xhat = (xd[row * f + col] - mean[col]) * inv_std[col];
                        s1[col] += g[row * f + col];
                        s2[col] += g[row * f + col] * xhat;
                    }
                }
                if self.requires[beta.0] {
                    acc(ws, self, *beta, &s1);
                }
                if self.requires[gamma.0] {
                    acc(ws, self, *gamma, &s2);
                }
                if self.requires[x.0] {
                    let nb = b as f64;
                    let mut dx = vec![0.0; b * f];
                    for row in 0..b {
                        for col in 0..f {
                            let xhat = (xd[row * f + col] - mean[col]) * inv_std[col];
                            dx[row * f + col] = gd[col] * inv_std[col]
                                * (g[row * f + col] - s1[col] / nb - xhat * s2[col] / nb);
                        }
                    }
                    acc(ws, self, *x, &dx);
                }
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let s = self.vals[x.0].shape();
                let (b, f) = (s[0], s[1]);
                let xd = self.vals[x.0].data();
                let gd = self.vals[gamma.0].data();
                if self.requires[x.0] {
                    let mut dx = vec![0.0; b * f];
                    for row in 0..b {
                        for col in 0..f {
                            dx[row * f + col] = g[row * f + col] * gd[col] * inv_std[col];
                        }
                    }
                    acc(ws, self, *x, &dx);
                }
                if self.requires[gamma.0] || self.requires[beta.0] {
                    let mut s1 = vec![0.0; f];
                    let mut s2 = vec![0.0; f];
                    for row in 0..b {
                        for col in 0..f {
                            let xhat = (xd[row * f + col] - mean[col]) * inv_std[col];
                            s1[col] += g[row * f + col];
                            s2[col] += g[row * f + col] * xhat;
                        }
                    }
                    acc(ws, self, *beta, &s1);
                    acc(ws, self, *gamma, &s2);
                }
            }
            Op::ChannelsToCols(x) => {
                let s = self.vals[x.0].shape();
                let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                let mut dx = vec![0.0; b * c * h * w];
                for bi in 0..b {
                    for ci in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                dx[((bi * c + ci) * h + y) * w + xx] +=
                                    g[(((bi * h + y) * w + xx) * c) + ci];
                            }
                        }
                    }
                }
                acc(ws, self, *x, &dx);
            }
            Op::ColsToChannels(x, [b, c, h, w]) => {
                let (b, c, h, w) = (*b, *c, *h, *w);
                let mut dx = vec![0.0; b * c * h * w];
                for bi in 0..b {
                    for ci in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                dx[(((bi * h + y) * w + xx) * c) + ci] +=
                                    g[((bi * c + ci) * h + y) * w + xx];
                            }
                        }
                    }
                }
                acc(ws, self, *x, &dx);
            }
            Op::GatherRows { x, rows } => {
                let c = self.vals[x.0].shape()[1];
                if self.requires[x.0] {
                    for (out_r, &src_r) in rows.iter().enumerate() {
                        for col in 0..c {
                            acc_at(ws, self, *x, src_r * c + col, g[out_r * c + col]);
                        }
                    }
                }
            }
            Op::GroupedRowMean { x, groups } => {
                let c = self.vals[x.0].shape()[1];
                if self.requires[x.0] {
                    for (k, group) in groups.iter().enumerate() {
                        let inv = 1.0 / group.len() as f64;
                        for &r in group {
                            for col in 0..c {
                                acc_at(ws, self, *x, r * c + col, g[k * c + col] * inv);
                            }
                        }
                    }
                }
            }
            Op::PairwiseSqEuclidean(q, p) => {
                let (nq, m) = {
                    let s = self.vals[q.0].shape();
                    (s[0], s[1])
                };
                let np = self.vals[p.0].shape()[0];
                let (dq, dp) = (self.vals[q.0].data(), self.vals[p.0].data());
                let mut gq = vec![0.0; nq * m];
                let mut gp = vec![0.0; np * m];
                for i in 0..nq {
                    for j in 0..np {
                        let gv = g[i * np + j];
                        if gv == 0.0 {
                            continue;
                        }
                        for t in 0..m {
                            let d = dq[i * m + t] - dp[j * m + t];
                            gq[i * m + t] += 2.0 * d * gv;
                            gp[j * m + t] -= 2.0 * d * gv;
                        }
                    }
                }
                acc(ws, self, *q, &gq);
                acc(ws, self, *p, &gp);
            }
            Op::PairwiseCosine(q, p) => {
                let (nq, m) = {
                    let s = self.vals[q.0].shape();
                    (s[0], s[1])
                };
                let np = self.vals[p.0].shape()[0];
                let (dq, dp) = (self.vals[q.0].data(), self.vals[p.0].data());
                let qn = row_norms(dq, nq, m);
                let pn = row_norms(dp, np, m);
                let mut gq = vec![0.0; nq * m];
                let mut gp = vec![0.0; np * m];
                for i in 0..nq {
                    for j in 0..np {
                        let gv = g[i * np + j];
                        if gv == 0.0 {
                            continue;
                        }
                        let mut dot = 0.0;
                        for t in 0..m {
                            dot += dq[i * m + t] * dp[j * m + t];
                        }
                        let denom = qn[i] * pn[j];
                        for t in 0..m {
                            // d(1 - dot/(|q||p|)) / dq_t
                            let dcos_dq = dp[j * m + t] / denom
                                - dot * dq[i * m + t] / (qn[i] * qn[i] * denom);
                            let dcos_dp = dq[i * m + t] / denom
                                - dot * dp[j * m + t] / (pn[j] * pn[j] * denom);
                            gq[i * m + t] -= gv * dcos_dq;
                            gp[j * m + t] -= gv * dcos_dp;
                        }
                    }
                }
                acc(ws, self, *q, &gq);
                acc(ws, self, *p, &gp);
            }
            Op::PairwiseMahalanobis(q, p, weights) => {
                let (nq, m) = {
                    let s = self.vals[q.0].shape();
                    (s[0], s[1])
                };
                let np = self.vals[p.0].shape()[0];
                let (dq, dp) = (self.vals[q.0].data(), self.vals[p.0].data());
                let mut gq = vec![0.0; nq * m];
                let mut gp = vec![0.0; np * m];
                for i in 0..nq {
                    for j in 0..np {
                        let gv = g[i * np + j];
                        if gv == 0.0 {
                            continue;
                        }
                        for t in 0..m {
                            let d = dq[i * m + t] - dp[j * m + t];
                            gq[i * m + t] += 2.0 * weights[t] * d * gv;
                            gp[j * m + t] -= 2.0 * weights[t] * d * gv;
                        }
                    }
                }
                acc(ws, self, *q, &gq);
                acc(ws, self, *p, &gp);
            }
            Op::LogSumExpRows(x) => {
                let s = self.vals[x.0].shape();
                let (n, c) = (s[0], s[1]);
                let xv = self.vals[x.0].data();
                let yv = self.vals[id].data();
                let mut dx = vec![0.0; n * c];
                for i in 0..n {
                    for j in 0..c {
                        dx[i * c + j] = g[i] * (xv[i * c + j] - yv[i]).exp();
                    }
                }
                acc(ws, self, *x, &dx);
            }
            Op::GatherPerRow { x, cols } => {
                let c = self.vals[x.0].shape()[1];
                if self.requires[x.0] {
                    for (i, &j) in cols.iter().enumerate() {
                        acc_at(ws, self, *x, i * c + j, g[i]);
                    }
                }
            }
            Op::GatherCols { x, cols } => {
                let s = self.vals[x.0].shape();
                let (n, c) = (s[0], s[1]);
                if self.requires[x.0] {
                    for i in 0..n {
                        for (jj, &j) in cols.iter().enumerate() {
                            acc_at(ws, self, *x, i * c + j, g[i * cols.len() + jj]);
                        }
                    }
                }
            }
            Op::StackCols(items) => {
                let n = self.vals[items[0].0].numel();
                let k = items.len();
                for (j, &v) in items.iter().enumerate() {
                    if !self.requires[v.0] {
                        continue;
                    }
                    let contrib: Vec<f64> = (0..n).map(|i| g[i * k + j]).collect();
                    acc(ws, self, v, &contrib);
                }
            }
            Op::SumAll(x) => {
                let contrib = vec![g[0]; self.vals[x.0].numel()];
                acc(ws, self, *x, &contrib);
            }
            Op::MeanAll(x) => {
                let n = self.vals[x.0].numel();
                let contrib = vec![g[0] / n as f64; n];
                acc(ws, self, *x, &contrib);
            }
            Op::UnitNormalizeRows(x) => {
                let s = self.vals[x.0].shape();
                let (n, c) = (s[0], s[1]);
                let xv = self.vals[x.0].data();
                let yv = self.vals[id].data();
                let norms = row_norms(xv, n, c);
                let mut dx = vec![0.0; n * c];
                for i in 0..n {
                    let mut gy = 0.0;
                    for j in 0..c {
                        gy += g[i * c + j] * yv[i * c + j];
                    }
                    for j in 0..c {
                        dx[i * c + j] = (g[i * c + j] - gy * yv[i * c + j]) / norms[i];
                    }
                }
                acc(ws, self, *x, &dx);
            }
        }
    }

    /// Gradient flow into one operand of add/sub, handling the scalar
    /// broadcast case by summing over the output.
    fn binary_side(&self, ws: &mut [Option<Vec<f64>>], v: Var, g: &[f64], sign: f64) {
        if !self.requires[v.0] {
            return;
        }
        if self.vals[v.0].numel() == g.len() {
            let contrib: Vec<f64> = g.iter().map(|&x| sign * x).collect();
            acc(ws, self, v, &contrib);
        } else {
            acc_at(ws, self, v, 0, sign * g.iter().sum::<f64>());
        }
    }

    /// Gradient flow into one operand of mul: g * other, reduced if this
    /// operand is a broadcast scalar.
    fn mul_side(&self, ws: &mut [Option<Vec<f64>>], v: Var, other: Var, g: &[f64]) {
        if !self.requires[v.0] {
            return;
        }
        let ov = self.vals[other.0].data();
        if self.vals[v.0].numel() == g.len() {
            let contrib: Vec<f64> = if ov.len() == g.len() {
                g.iter().zip(ov).map(|(&gv, &o)| gv * o).collect()
            } else {
                // other is the broadcast scalar
                g.iter().map(|&gv| gv * ov[0]).collect()
            };
            acc(ws, self, v, &contrib);
        } else {
            // v is the broadcast scalar
            let total: f64 = g.iter().zip(ov).map(|(&gv, &o)| gv * o).sum();
            acc_at(ws, self, v, 0, total);
        }
    }
}

/// Accumulate `contrib` into the workspace gradient of `v`.
fn acc(ws: &mut [Option<Vec<f64>>], tape: &Tape, v: Var, contrib: &[f64]) {
    if !tape.requires[v.0] {
        return;
    }
    let slot = ws[v.0].get_or_insert_with(|| vec![0.0; tape.vals[v.0].numel()]);
    for (a, b) in slot.iter_mut().zip(contrib) {
        *a += b;
    }
}

/// Accumulate a single value at one flat index of the gradient of `v`.
fn acc_at(ws: &mut [Option<Vec<f64>>], tape: &Tape, v: Var, idx: usize, val: f64) {
    if !tape.requires[v.0] {
        return;
    }
    let slot = ws[v.0].get_or_insert_with(|| vec![0.0; tape.vals[v.0].numel()]);
    slot[idx] += val;
}

fn row_norms(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    (0..rows)
        .map(|i| {
            data[i * cols..(i + 1) * cols]
                .iter()
                .map(|&v| v * v)
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::gradcheck;

    fn rand_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        Tensor::from_vec(shape.to_vec(), data).unwrap()
    }

    fn rand_positive(rng: &mut Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.uniform(0.5, 2.0)).collect();
        Tensor::from_vec(shape.to_vec(), data).unwrap()
    }

    /// Analytic grads of `build`'s scalar output vs central differences over
    /// every coordinate of every input. Returns the worst relative error.
    fn fd_check<F>(build: F, inputs: &[Tensor]) -> f64
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| tape.leaf(t.clone(), true).unwrap())
            .collect();
        let loss = build(&mut tape, &vars).unwrap();
        assert!(tape.value(loss).is_scalar(), "loss must be scalar");
        tape.backward(loss).unwrap();
        let grads: Vec<Tensor> = vars
            .iter()
            .map(|&v| tape.grad(v).expect("missing grad"))
            .collect();

        let mut worst = 0.0f64;
        for (i, inp) in inputs.iter().enumerate() {
            let f = |x: &[f64]| -> Result<f64> {
                let mut tape = Tape::new();
                let mut vars = Vec::new();
                for (j, t) in inputs.iter().enumerate() {
                    let t2 = if j == i {
                        Tensor::from_vec(t.shape().to_vec(), x.to_vec())?
                    } else {
                        t.clone()
                    };
                    vars.push(tape.leaf(t2, false)?);
                }
                let loss = build(&mut tape, &vars)?;
                Ok(tape.value(loss).item())
            };
            let coords: Vec<usize> = (0..inp.numel()).collect();
            let w =
                gradcheck::max_grad_error(f, inp.data(), grads[i].data(), &coords, 1e-5).unwrap();
            worst = worst.max(w);
        }
        worst
    }

    /// Loss = sum(x * w) for a fixed random weight, turning any output into
    /// a scalar with non-uniform sensitivity.
    fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let mut rng = Rng::new(seed);
        let w = tape.constant(rand_tensor(&mut rng, &shape))?;
        let prod = tape.mul(x, w)?;
        tape.sum_all(prod)
    }

    #[test]
    fn matmul_identity_and_hand_example() {
        let mut tape = Tape::new();
        let eye = tape
            .constant(Tensor::matrix(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap())
            .unwrap();
        let a = tape
            .constant(Tensor::matrix(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap())
            .unwrap();
        let out = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

        let r = tape
            .constant(Tensor::matrix(&[vec![1.0, 2.0]]).unwrap())
            .unwrap();
        let c = tape
            .constant(Tensor::matrix(&[vec![3.0], vec![4.0]]).unwrap())
            .unwrap();
        let prod = tape.matmul(r, c).unwrap();
        assert_eq!(tape.value(prod).data(), &[11.0]);
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = Rng::new(7);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 2]);
        let worst = fd_check(
            |tape, vars| {
                let out = tape.matmul(vars[0], vars[1])?;
                tape.sum_all(out)
            },
            &[a, b],
        );
        assert!(worst < 1e-6, "worst = {worst}");
    }

    #[test]
    fn relu_values_and_square_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(&[-1.0, 0.0, 2.0])).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);

        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::scalar(3.0), true).unwrap();
        let sq = tape.square(w).unwrap();
        tape.backward(sq).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[6.0]);
    }

    #[test]
    fn exp_log_composition_is_identity() {
        let mut rng = Rng::new(11);
        let x = rand_positive(&mut rng, &[5]);
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone(), true).unwrap();
        let lg = tape.log(v).unwrap();
        let back = tape.exp(lg).unwrap();
        for (a, b) in tape.value(back).data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let s = tape.sum_all(back).unwrap();
        tape.backward(s).unwrap();
        for g in tape.grad(v).unwrap().data() {
            assert!((g - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        let mut rng = Rng::new(13);
        // Mix of add/sub/mul/neg/scale/square/sqrt on positive inputs to stay
        // in-domain for sqrt and log.
        let a = rand_positive(&mut rng, &[2, 3]);
        let b = rand_positive(&mut rng, &[2, 3]);
        let worst = fd_check(
            |tape, vars| {
                let s = tape.add(vars[0], vars[1])?;
                let d = tape.sub(vars[0], vars[1])?;
                let m = tape.mul(s, d)?;
                let sq = tape.square(m)?;
                let rt = tape.sqrt(vars[0])?;
                let lg = tape.log(vars[1])?;
                let e = tape.exp(lg)?;
                let n = tape.neg(e)?;
                let sc = tape.scale(n, 0.25)?;
                let part = tape.add(sq, rt)?;
                let all = tape.add(part, sc)?;
                tape.mean_all(all)
            },
            &[a, b],
        );
        assert!(worst < 1e-4, "worst = {worst}");
    }

    #[test]
    fn scalar_broadcast_add_and_mul() {
        let mut rng = Rng::new(17);
        let x = rand_tensor(&mut rng, &[2, 2]);
        let s = Tensor::scalar(1.5);
        let worst = fd_check(
            |tape, vars| {
                let shifted = tape.add(vars[0], vars[1])?;
                let scaled = tape.mul(vars[1], shifted)?;
                tape.sum_all(scaled)
            },
            &[x.clone(), s.clone()],
        );
        assert!(worst < 1e-4, "worst = {worst}");

        let mut tape = Tape::new();
        let xv = tape.constant(x).unwrap();
        let sv = tape.constant(s).unwrap();
        let out = tape.add(xv, sv).unwrap();
        assert_eq!(tape.shape(out), &[2, 2]);
    }

    #[test]
    fn backward_of_sum_is_all_ones() {
        let mut tape = Tape::new();
        let w = tape
            .leaf(Tensor::from_vec(vec![2, 3], vec![0.5; 6]).unwrap(), true)
            .unwrap();
        let s = tape.sum_all(w).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn shared_subexpression_accumulates_additively() {
        // loss = x·x + x·x with x shared, against the same computation with
        // duplicated leaves.
        let x0 = 1.7;
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(x0), true).unwrap();
        let p1 = tape.mul(x, x).unwrap();
        let p2 = tape.mul(x, x).unwrap();
        let loss = tape.add(p1, p2).unwrap();
        tape.backward(loss).unwrap();
        let shared = tape.grad(x).unwrap().item();

        let mut tape2 = Tape::new();
        let xa = tape2.leaf(Tensor::scalar(x0), true).unwrap();
        let xb = tape2.leaf(Tensor::scalar(x0), true).unwrap();
        let xc = tape2.leaf(Tensor::scalar(x0), true).unwrap();
        let xd = tape2.leaf(Tensor::scalar(x0), true).unwrap();
        let q1 = tape2.mul(xa, xb).unwrap();
        let q2 = tape2.mul(xc, xd).unwrap();
        let loss2 = tape2.add(q1, q2).unwrap();
        tape2.backward(loss2).unwrap();
        let dup: f64 = [xa, xb, xc, xd]
            .iter()
            .map(|&v| tape2.grad(v).unwrap().item())
            .sum();
        assert!((shared - dup).abs() < 1e-12);
        assert!((shared - 4.0 * x0).abs() < 1e-12);
    }

    #[test]
    fn gradients_accumulate_until_zeroed() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::scalar(3.0), true).unwrap();
        let sq = tape.square(w).unwrap();
        tape.backward(sq).unwrap();
        tape.backward(sq).unwrap();
        assert_eq!(tape.grad(w).unwrap().item(), 12.0);
        tape.zero_grads();
        assert!(tape.grad(w).is_none());
        tape.backward(sq).unwrap();
        assert_eq!(tape.grad(w).unwrap().item(), 6.0);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::vector(&[1.0, 2.0]), true).unwrap();
        assert!(matches!(
            tape.backward(w),
            Err(Error::Contract { .. })
        ));
    }

    #[test]
    fn add_bias_gradients_match_finite_differences() {
        let mut rng = Rng::new(19);
        let x = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4]);
        let worst = fd_check(
            |tape, vars| {
                let out = tape.add_bias(vars[0], vars[1])?;
                weighted_sum(tape, out, 100)
            },
            &[x, b],
        );
        assert!(worst < 1e-4, "worst = {worst}");
    }

    #[test]
    fn reshape_roundtrip_and_gradient() {
        let mut rng = Rng::new(23);
        let x = rand_tensor(&mut rng, &[2, 6]);
        let worst = fd_check(
            |tape, vars| {
                let r = tape.reshape(vars[0], vec![3, 4])?;
                let sq = tape.square(r)?;
                tape.sum_all(sq)
            },
            &[x],
        );
        assert!(worst < 1e-4, "worst = {worst}");
    }

    #[test]
    fn batchnorm_train_normalizes_batch() {
        // Two features with mean 5, var 4 across the batch.
        let x = Tensor::matrix(&[vec![3.0, 3.0], vec![7.0, 7.0], vec![3.0, 7.0], vec![7.0, 3.0]])
            .unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x).unwrap();
        let gamma = tape.constant(Tensor::vector(&[1.0, 1.0])).unwrap();
        let beta = tape.constant(Tensor::vector(&[0.0, 0.0])).unwrap();
        let (out, mean, var) = tape.batchnorm_train(xv, gamma, beta, 1e-5).unwrap();
        assert_eq!(mean, vec![5.0, 5.0]);
        assert_eq!(var, vec![4.0, 4.0]);
        let data = tape.value(out).data();
        let m: f64 = data.iter().sum::<f64>() / data.len() as f64;
        let v: f64 = data.iter().map(|&d| (d - m) * (d - m)).sum::<f64>() / data.len() as f64;
        assert!(m.abs() < 1e-12);
        assert!((v - 1.0).abs() < 1e-4); // epsilon shrinks it slightly
    }

    #[test]
    fn batchnorm_eval_with_unit_stats_is_identity() {
        let mut rng = Rng::new(29);
        let x = rand_tensor(&mut rng, &[3, 2]);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone()).unwrap();
        let gamma = tape.constant(Tensor::vector(&[1.0, 1.0])).unwrap();
        let beta = tape.constant(Tensor::vector(&[0.0, 0.0])).unwrap();
        let out = tape
            .batchnorm_eval(xv, gamma, beta, &[0.0, 0.0], &[1.0, 1.0], 1e-5)
            .unwrap();
        for (a, b) in tape.value(out).data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-5 * b.abs().max(1.0));
        }
    }

    #[test]
    fn batchnorm_train_rejects_single_row() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(&[vec![1.0, 2.0]]).unwrap()).unwrap();
        let gamma = tape.constant(Tensor::vector(&[1.0, 1.0])).unwrap();
        let beta = tape.constant(Tensor::vector(&[0.0, 0.0])).unwrap();
        assert!(matches!(
            tape.batchnorm_train(x, gamma, beta, 1e-5),
            Err(Error::BatchSize { .. })
        ));
    }

    #[test]
    fn batchnorm_gradients_match_finite_differences() {
        let mut rng = Rng::new(31);
        let x = rand_tensor(&mut rng, &[4, 3]);
        let gamma = rand_positive(&mut rng, &[3]);
        let beta = rand_tensor(&mut rng, &[3]);
        let worst = fd_check(
            |tape, vars| {
                let (out, _, _) = tape.batchnorm_train(vars[0], vars[1], vars[2], 1e-5)?;
                weighted_sum(tape, out, 200)
            },
            &[x.clone(), gamma.clone(), beta.clone()],
        );
        assert!(worst < 1e-5, "train worst = {worst}");

        let worst_eval = fd_check(
            |tape, vars| {
                let out = tape.batchnorm_eval(
                    vars[0],
                    vars[1],
                    vars[2],
                    &[0.1, -0.2, 0.3],
                    &[1.5, 0.7, 2.0],
                    1e-5,
                )?;
                weighted_sum(tape, out, 201)
            },
            &[x, gamma, beta],
        );
        assert!(worst_eval < 1e-5, "eval worst = {worst_eval}");
    }

    #[test]
    fn channel_permutes_roundtrip_and_differentiate() {
        let mut rng = Rng::new(37);
        let x = rand_tensor(&mut rng, &[2, 3, 2, 2]);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone()).unwrap();
        let cols = tape.channels_to_cols(xv).unwrap();
        assert_eq!(tape.shape(cols), &[8, 3]);
        let back = tape.cols_to_channels(cols, [2, 3, 2, 2]).unwrap();
        assert_eq!(tape.value(back).data(), x.data());

        let worst = fd_check(
            |tape, vars| {
                let cols = tape.channels_to_cols(vars[0])?;
                let sq = tape.square(cols)?;
                let back = tape.cols_to_channels(sq, [2, 3, 2, 2])?;
                weighted_sum(tape, back, 300)
            },
            &[x],
        );
        assert!(worst < 1e-4, "worst = {worst}");
    }

    #[test]
    fn gather_and_group_ops_differentiate() {
        let mut rng = Rng::new(41);
        let x = rand_tensor(&mut rng, &[5, 3]);
        let worst = fd_check(
            |tape, vars| {
                let g = tape.gather_rows(vars[0], vec![4, 0, 2, 0])?;
                let m = tape.grouped_row_mean(vars[0], vec![vec![0, 1], vec![2, 3, 4]])?;
                let gs = tape.sum_all(g)?;
                let ms = weighted_sum(tape, m, 400)?;
                tape.add(gs, ms)
            },
            &[x.clone()],
        );
        assert!(worst < 1e-4, "worst = {worst}");

        // grouped_row_mean value oracle
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone()).unwrap();
        let m = tape
            .grouped_row_mean(xv, vec![vec![1, 3], vec![0]])
            .unwrap();
        let d = tape.value(m).data();
        for col in 0..3 {
            let want = (x.row(1)[col] + x.row(3)[col]) / 2.0;
            assert!((d[col] - want).abs() < 1e-12);
            assert!((d[3 + col] - x.row(0)[col]).abs() < 1e-12);
        }
    }

    #[test]
    fn pairwise_distance_values_match_naive_loops() {
        let mut rng = Rng::new(43);
        let q = rand_tensor(&mut rng, &[4, 3]);
        let p = rand_tensor(&mut rng, &[2, 3]);
        let w = vec![0.5, 1.5, 2.0];
        let mut tape = Tape::new();
        let qv = tape.constant(q.clone()).unwrap();
        let pv = tape.constant(p.clone()).unwrap();
        let d_se = tape.pairwise_sq_euclidean(qv, pv).unwrap();
        let d_cos = tape.pairwise_cosine(qv, pv).unwrap();
        let d_mah = tape.pairwise_mahalanobis(qv, pv, w.clone()).unwrap();
        for i in 0..4 {
            for j in 0..2 {
                let (qr, pr) = (q.row(i), p.row(j));
                let se: f64 = qr.iter().zip(pr).map(|(a, b)| (a - b) * (a - b)).sum();
                let dot: f64 = qr.iter().zip(pr).map(|(a, b)| a * b).sum();
                let nq = qr.iter().map(|v| v * v).sum::<f64>().sqrt();
                let np = pr.iter().map(|v| v * v).sum::<f64>().sqrt();
                let cos = 1.0 - dot / (nq * np);
                let mah: f64 = qr
                    .iter()
                    .zip(pr)
                    .zip(&w)
                    .map(|((a, b), wi)| wi * (a - b) * (a - b))
                    .sum();
                assert!((tape.value(d_se).data()[i * 2 + j] - se).abs() < 1e-12);
                assert!((tape.value(d_cos).data()[i * 2 + j] - cos).abs() < 1e-12);
                assert!((tape.value(d_mah).data()[i * 2 + j] - mah).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pairwise_distance_gradients_match_finite_differences() {
        let mut rng = Rng::new(47);
        let q = rand_tensor(&mut rng, &[3, 4]);
        let p = rand_tensor(&mut rng, &[2, 4]);
        for which in 0..3 {
            let worst = fd_check(
                |tape, vars| {
                    let d = match which {
                        0 => tape.pairwise_sq_euclidean(vars[0], vars[1])?,
                        1 => tape.pairwise_cosine(vars[0], vars[1])?,
                        _ => tape.pairwise_mahalanobis(
                            vars[0],
                            vars[1],
                            vec![0.5, 1.0, 2.0, 0.25],
                        )?,
                    };
                    weighted_sum(tape, d, 500 + which as u64)
                },
                &[q.clone(), p.clone()],
            );
            assert!(worst < 1e-4, "distance {which} worst = {worst}");
        }
    }

    #[test]
    fn cosine_rejects_zero_rows() {
        let mut tape = Tape::new();
        let q = tape
            .constant(Tensor::matrix(&[vec![0.0, 0.0]]).unwrap())
            .unwrap();
        let p = tape
            .constant(Tensor::matrix(&[vec![1.0, 0.0]]).unwrap())
            .unwrap();
        assert!(matches!(
            tape.pairwise_cosine(q, p),
            Err(Error::DegenerateInput { .. })
        ));
    }

    #[test]
    fn logsumexp_matches_naive_and_is_overflow_safe() {
        let x = Tensor::matrix(&[vec![1000.0, 1000.0], vec![-1000.0, 0.0]]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x).unwrap();
        let l = tape.logsumexp_rows(xv).unwrap();
        let d = tape.value(l).data();
        assert!((d[0] - (1000.0 + 2.0f64.ln())).abs() < 1e-9);
        assert!(d[1].abs() < 1e-9); // ln(e^-1000 + e^0) ≈ 0

        let mut rng = Rng::new(53);
        let x = rand_tensor(&mut rng, &[3, 5]);
        let worst = fd_check(
            |tape, vars| {
                let l = tape.logsumexp_rows(vars[0])?;
                weighted_sum(tape, l, 600)
            },
            &[x],
        );
        assert!(worst < 1e-4, "worst = {worst}");
    }

    #[test]
    fn row_and_column_gathers_differentiate() {
        let mut rng = Rng::new(59);
        let x = rand_tensor(&mut rng, &[3, 4]);
        let worst = fd_check(
            |tape, vars| {
                let per_row = tape.gather_per_row(vars[0], vec![2, 0, 3])?;
                let cols = tape.gather_cols(vars[0], vec![1, 3])?;
                let a = tape.sum_all(per_row)?;
                let b = weighted_sum(tape, cols, 700)?;
                tape.add(a, b)
            },
            &[x.clone()],
        );
        assert!(worst < 1e-4, "worst = {worst}");

        let mut tape = Tape::new();
        let xv = tape.constant(x.clone()).unwrap();
        let per_row = tape.gather_per_row(xv, vec![1, 1, 0]).unwrap();
        assert_eq!(
            tape.value(per_row).data(),
            &[x.row(0)[1], x.row(1)[1], x.row(2)[0]]
        );
    }

    #[test]
    fn stack_cols_builds_matrix_and_differentiates() {
        let mut rng = Rng::new(61);
        let a = rand_tensor(&mut rng, &[3]);
        let b = rand_tensor(&mut rng, &[3]);
        let mut tape = Tape::new();
        let av = tape.constant(a.clone()).unwrap();
        let bv = tape.constant(b.clone()).unwrap();
        let m = tape.stack_cols(vec![av, bv]).unwrap();
        assert_eq!(tape.shape(m), &[3, 2]);
        assert_eq!(tape.value(m).data()[0], a.data()[0]);
        assert_eq!(tape.value(m).data()[1], b.data()[0]);

        let worst = fd_check(
            |tape, vars| {
                let m = tape.stack_cols(vec![vars[0], vars[1]])?;
                weighted_sum(tape, m, 800)
            },
            &[a, b],
        );
        assert!(worst < 1e-4, "worst = {worst}");
    }

    #[test]
    fn unit_normalize_rows_values_and_gradient() {
        let mut rng = Rng::new(67);
        let x = rand_tensor(&mut rng, &[3, 4]);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone()).unwrap();
        let y = tape.unit_normalize_rows(xv).unwrap();
        for i in 0..3 {
            let n: f64 = tape.value(y).row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
        let worst = fd_check(
            |tape, vars| {
                let y = tape.unit_normalize_rows(vars[0])?;
                weighted_sum(tape, y, 900)
            },
            &[x],
        );
        assert!(worst < 1e-4, "worst = {worst}");
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(1e308)).unwrap();
        let doubled = tape.add(x, x);
        assert!(matches!(doubled, Err(Error::NumericDomain { .. })));
    }
}
