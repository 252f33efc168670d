//! Reverse-mode tape. Operations evaluate eagerly as they are recorded;
//! `backward` replays the tape in reverse and accumulates gradients into
//! every leaf registered with `param`.

use super::{matmul, matmul_a_bt, matmul_at_b, Tensor, TensorError};
use crate::scalar::Scalar;
use crate::specfun;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Forward-pass mode; train mode uses and updates batch statistics in
/// batch normalization, eval mode uses running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// How a binary operand's flat index maps from the output index.
#[derive(Debug, Clone, Copy)]
enum MapKind {
    /// Same shape as the output.
    Id,
    /// Operand is a row vector [K] broadcast over an output [..., K].
    Row { cols: usize },
    /// Operand is a column [B, 1] broadcast over an output [B, K].
    Col { cols: usize },
    /// Operand is a single-element tensor.
    Scalar,
}

impl MapKind {
    #[inline(always)]
    fn index(self, out_idx: usize) -> usize {
        match self {
            MapKind::Id => out_idx,
            MapKind::Row { cols } => out_idx % cols,
            MapKind::Col { cols } => out_idx / cols,
            MapKind::Scalar => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op<T: Scalar> {
    Leaf,
    Bin {
        kind: BinKind,
        a: Var,
        b: Var,
        ma: MapKind,
        mb: MapKind,
    },
    Scale {
        x: Var,
        c: f64,
    },
    AddConst {
        x: Var,
    },
    Relu {
        x: Var,
    },
    Softplus {
        x: Var,
    },
    Exp {
        x: Var,
    },
    Log {
        x: Var,
    },
    LogClamped {
        x: Var,
        eps: f64,
    },
    Digamma {
        x: Var,
    },
    Lgamma {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    RowSum {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        k: Var,
        b: Var,
        stride: usize,
        padding: usize,
        /// im2col cache, [B*H2*W2, C*kh*kw]
        cols: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        /// normalized activations, same layout as x
        xhat: Vec<T>,
        /// per-feature 1/sqrt(var + eps)
        invstd: Vec<f64>,
        /// elements per feature in the normalization
        count: usize,
        training: bool,
    },
    MaxPool2 {
        x: Var,
        /// flat input index of each output element's max
        argmax: Vec<u32>,
    },
    RmsNorm {
        x: Var,
        /// per-row root-mean-square
        rms: Vec<f64>,
        eps: f64,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    needs_grad: bool,
    op: Op<T>,
}

/// Recorded computation. Acyclic by construction: an operation may only
/// reference previously recorded nodes, so reverse iteration is a valid
/// topological order visiting each node exactly once.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.1;

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that does not require gradients (inputs, labels, constants).
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that accumulates a gradient during backward.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Extract a single-element node value.
    pub fn scalar_value(&self, v: Var) -> T {
        let t = self.value(v);
        assert_eq!(t.numel(), 1, "scalar_value on non-scalar node");
        t.data[0]
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Direct inputs of a node, in recording order (for structural tests).
    pub fn parents(&self, v: Var) -> Vec<Var> {
        match &self.nodes[v.0].op {
            Op::Leaf => vec![],
            Op::Bin { a, b, .. } => vec![*a, *b],
            Op::Scale { x, .. }
            | Op::AddConst { x }
            | Op::Relu { x }
            | Op::Softplus { x }
            | Op::Exp { x }
            | Op::Log { x }
            | Op::LogClamped { x, .. }
            | Op::Digamma { x }
            | Op::Lgamma { x }
            | Op::Softmax { x }
            | Op::RowSum { x }
            | Op::Sum { x }
            | Op::Mean { x }
            | Op::Reshape { x }
            | Op::MaxPool2 { x, .. }
            | Op::RmsNorm { x, .. } => vec![*x],
            Op::Dense { x, w, b } => vec![*x, *w, *b],
            Op::Conv2d { x, k, b, .. } => vec![*x, *k, *b],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ---- binary elementwise with limited broadcasting ----

    fn resolve_broadcast(
        sa: &[usize],
        sb: &[usize],
    ) -> Result<(Vec<usize>, MapKind, MapKind), TensorError> {
        if sa == sb {
            return Ok((sa.to_vec(), MapKind::Id, MapKind::Id));
        }
        let numel = |s: &[usize]| s.iter().product::<usize>();
        if numel(sb) == 1 {
            return Ok((sa.to_vec(), MapKind::Id, MapKind::Scalar));
        }
        if numel(sa) == 1 {
            return Ok((sb.to_vec(), MapKind::Scalar, MapKind::Id));
        }
        if sa.len() == 2 && sb.len() == 1 && sa[1] == sb[0] {
            return Ok((sa.to_vec(), MapKind::Id, MapKind::Row { cols: sa[1] }));
        }
        if sb.len() == 2 && sa.len() == 1 && sb[1] == sa[0] {
            return Ok((sb.to_vec(), MapKind::Row { cols: sb[1] }, MapKind::Id));
        }
        if sa.len() == 2 && sb.len() == 2 && sa[0] == sb[0] && sb[1] == 1 {
            return Ok((sa.to_vec(), MapKind::Id, MapKind::Col { cols: sa[1] }));
        }
        if sa.len() == 2 && sb.len() == 2 && sa[0] == sb[0] && sa[1] == 1 {
            return Ok((sb.to_vec(), MapKind::Col { cols: sb[1] }, MapKind::Id));
        }
        Err(TensorError::ShapeMismatch(format!(
            "cannot broadcast {sa:?} with {sb:?}"
        )))
    }

    fn bin(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var, TensorError> {
        let (shape, ma, mb) = Self::resolve_broadcast(self.shape(a), self.shape(b))?;
        let n: usize = shape.iter().product();
        let va = &self.nodes[a.0].value.data;
        let vb = &self.nodes[b.0].value.data;
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let x = va[ma.index(i)];
            let y = vb[mb.index(i)];
            data.push(match kind {
                BinKind::Add => x + y,
                BinKind::Sub => x - y,
                BinKind::Mul => x * y,
                BinKind::Div => x / y,
            });
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor { shape, data },
            Op::Bin { kind, a, b, ma, mb },
            needs,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.bin(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.bin(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.bin(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.bin(BinKind::Div, a, b)
    }

    // ---- unary ----

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let cc = T::from_f64(c);
        let value = self.nodes[x.0].value.map(|v| v * cc);
        let needs = self.needs(x);
        self.push(value, Op::Scale { x, c }, needs)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let cc = T::from_f64(c);
        let value = self.nodes[x.0].value.map(|v| v + cc);
        let needs = self.needs(x);
        self.push(value, Op::AddConst { x }, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.map(|v| v.max(T::zero()));
        let needs = self.needs(x);
        self.push(value, Op::Relu { x }, needs)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0]
            .value
            .map(|v| T::from_f64(specfun::softplus(v.as_f64())));
        let needs = self.needs(x);
        self.push(value, Op::Softplus { x }, needs)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.map(|v| v.exp());
        let needs = self.needs(x);
        self.push(value, Op::Exp { x }, needs)
    }

    pub fn log(&mut self, x: Var) -> Result<Var, TensorError> {
        if let Some(&bad) = self.nodes[x.0].value.data.iter().find(|v| **v <= T::zero()) {
            return Err(TensorError::Domain {
                op: "log",
                requirement: "strictly positive input",
                found: bad.as_f64(),
            });
        }
        let value = self.nodes[x.0].value.map(|v| v.ln());
        let needs = self.needs(x);
        Ok(self.push(value, Op::Log { x }, needs))
    }

    /// ln(max(x, eps)); gradient is zero in the clamped region.
    pub fn log_clamped(&mut self, x: Var, eps: f64) -> Var {
        let e = T::from_f64(eps);
        let value = self.nodes[x.0].value.map(|v| v.max(e).ln());
        let needs = self.needs(x);
        self.push(value, Op::LogClamped { x, eps }, needs)
    }

    pub fn digamma(&mut self, x: Var) -> Result<Var, TensorError> {
        if let Some(&bad) = self.nodes[x.0].value.data.iter().find(|v| **v <= T::zero()) {
            return Err(TensorError::Domain {
                op: "digamma",
                requirement: "strictly positive input",
                found: bad.as_f64(),
            });
        }
        let value = self.nodes[x.0]
            .value
            .map(|v| T::from_f64(specfun::digamma(v.as_f64())));
        let needs = self.needs(x);
        Ok(self.push(value, Op::Digamma { x }, needs))
    }

    pub fn lgamma(&mut self, x: Var) -> Result<Var, TensorError> {
        if let Some(&bad) = self.nodes[x.0].value.data.iter().find(|v| **v <= T::zero()) {
            return Err(TensorError::Domain {
                op: "lgamma",
                requirement: "strictly positive input",
                found: bad.as_f64(),
            });
        }
        let value = self.nodes[x.0]
            .value
            .map(|v| T::from_f64(specfun::lgamma(v.as_f64())));
        let needs = self.needs(x);
        Ok(self.push(value, Op::Lgamma { x }, needs))
    }

    /// Row-wise softmax over the last axis of a [B, K] tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = &self.nodes[x.0].value;
        if t.rank() != 2 {
            return Err(TensorError::ShapeMismatch(format!(
                "softmax expects [B, K], got {:?}",
                t.shape
            )));
        }
        let (b, k) = (t.shape[0], t.shape[1]);
        let mut data = vec![T::zero(); b * k];
        for r in 0..b {
            let row = &t.data[r * k..(r + 1) * k];
            let m = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
            let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - m).exp()).collect();
            let s: f64 = exps.iter().sum();
            for (j, e) in exps.iter().enumerate() {
                data[r * k + j] = T::from_f64(e / s);
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor {
                shape: vec![b, k],
                data,
            },
            Op::Softmax { x },
            needs,
        ))
    }

    /// Sum over the last axis: [B, K] -> [B, 1]. Accumulates in f64.
    pub fn row_sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = &self.nodes[x.0].value;
        if t.rank() != 2 {
            return Err(TensorError::ShapeMismatch(format!(
                "row_sum expects [B, K], got {:?}",
                t.shape
            )));
        }
        let (b, k) = (t.shape[0], t.shape[1]);
        let mut data = Vec::with_capacity(b);
        for r in 0..b {
            let s: f64 = t.data[r * k..(r + 1) * k].iter().map(|v| v.as_f64()).sum();
            data.push(T::from_f64(s));
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor {
                shape: vec![b, 1],
                data,
            },
            Op::RowSum { x },
            needs,
        ))
    }

    /// Full reduction to a [1] scalar. Accumulates in f64.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].value.data.iter().map(|v| v.as_f64()).sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(T::from_f64(s)), Op::Sum { x }, needs)
    }

    /// Mean over all elements, reduced to a [1] scalar. Accumulates in f64.
    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.numel();
        let s: f64 = self.nodes[x.0].value.data.iter().map(|v| v.as_f64()).sum();
        let needs = self.needs(x);
        self.push(
            Tensor::scalar(T::from_f64(s / n as f64)),
            Op::Mean { x },
            needs,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.nodes[x.0].value.reshaped(shape)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Reshape { x }, needs))
    }

    /// Fully connected layer: out = x[B, in] . w[in, out] + b[out].
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sw.len() != 2 || sb.len() != 1 || sx[1] != sw[0] || sw[1] != sb[0] {
            return Err(TensorError::ShapeMismatch(format!(
                "dense expects [B,in].[in,out]+[out], got {sx:?}, {sw:?}, {sb:?}"
            )));
        }
        let (bs, nin, nout) = (sx[0], sx[1], sw[1]);
        let mut data = matmul(
            &self.nodes[x.0].value.data,
            &self.nodes[w.0].value.data,
            bs,
            nin,
            nout,
        );
        let bias = &self.nodes[b.0].value.data;
        for r in 0..bs {
            for j in 0..nout {
                data[r * nout + j] = data[r * nout + j] + bias[j];
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(
            Tensor {
                shape: vec![bs, nout],
                data,
            },
            Op::Dense { x, w, b },
            needs,
        ))
    }

    /// 2D cross-correlation: x[B,C,H,W] * k[O,C,kh,kw] + b[O], via im2col.
    pub fn conv2d(
        &mut self,
        x: Var,
        k: Var,
        b: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(k).to_vec();
        let sb = self.shape(b).to_vec();
        if sx.len() != 4 || sk.len() != 4 || sb.len() != 1 || sx[1] != sk[1] || sb[0] != sk[0] {
            return Err(TensorError::ShapeMismatch(format!(
                "conv2d expects x[B,C,H,W], k[O,C,kh,kw], b[O]; got {sx:?}, {sk:?}, {sb:?}"
            )));
        }
        let (bs, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, kh, kw) = (sk[0], sk[2], sk[3]);
        for (inp, ker) in [(h, kh), (w, kw)] {
            if inp + 2 * padding < ker || (inp + 2 * padding - ker) % stride != 0 {
                return Err(TensorError::BadConvGeometry {
                    input: inp,
                    kernel: ker,
                    stride,
                    padding,
                });
            }
        }
        let h2 = (h + 2 * padding - kh) / stride + 1;
        let w2 = (w + 2 * padding - kw) / stride + 1;
        let ckk = c * kh * kw;
        let rows = bs * h2 * w2;

        let xd = &self.nodes[x.0].value.data;
        let mut cols = vec![T::zero(); rows * ckk];
        for bi in 0..bs {
            for oh in 0..h2 {
                for ow in 0..w2 {
                    let row = (bi * h2 + oh) * w2 + ow;
                    let base = row * ckk;
                    for ci in 0..c {
                        for ki in 0..kh {
                            let ih = (oh * stride + ki) as isize - padding as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let src = ((bi * c + ci) * h + ih as usize) * w;
                            for kj in 0..kw {
                                let iw = (ow * stride + kj) as isize - padding as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                cols[base + (ci * kh + ki) * kw + kj] = xd[src + iw as usize];
                            }
                        }
                    }
                }
            }
        }

        // out_rows[rows, O] = cols[rows, CKK] . kmat^T, with kmat = k as [O, CKK]
        let kd = &self.nodes[k.0].value.data;
        let out_rows = matmul_a_bt(&cols, kd, rows, ckk, o);
        let bias = &self.nodes[b.0].value.data;
        let mut data = vec![T::zero(); bs * o * h2 * w2];
        for bi in 0..bs {
            for oi in 0..o {
                let dst = ((bi * o) + oi) * h2 * w2;
                for p in 0..h2 * w2 {
                    data[dst + p] = out_rows[(bi * h2 * w2 + p) * o + oi] + bias[oi];
                }
            }
        }
        let needs = self.needs(x) || self.needs(k) || self.needs(b);
        Ok(self.push(
            Tensor {
                shape: vec![bs, o, h2, w2],
                data,
            },
            Op::Conv2d {
                x,
                k,
                b,
                stride,
                padding,
                cols,
            },
            needs,
        ))
    }

    /// Batch normalization over features (rank 2: per column; rank 4: per
    /// channel across batch and spatial dims). Returns the output node and,
    /// in train mode, the updated running statistics (momentum 0.1, unbiased
    /// variance in the running estimate).
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Var, Option<(Tensor<T>, Tensor<T>)>), TensorError> {
        let sx = self.shape(x).to_vec();
        let features = match sx.len() {
            2 => sx[1],
            4 => sx[1],
            _ => {
                return Err(TensorError::ShapeMismatch(format!(
                    "batchnorm expects rank 2 or 4 input, got {sx:?}"
                )))
            }
        };
        if self.shape(gamma) != [features]
            || self.shape(beta) != [features]
            || running_mean.shape != [features]
            || running_var.shape != [features]
        {
            return Err(TensorError::ShapeMismatch(format!(
                "batchnorm parameter shapes must be [{features}]"
            )));
        }
        let training = mode == Mode::Train;
        let bsz = sx[0];
        if training && bsz < 2 {
            return Err(TensorError::BatchTooSmall(bsz));
        }
        let spatial: usize = if sx.len() == 4 { sx[2] * sx[3] } else { 1 };
        let count = bsz * spatial;
        let xd = &self.nodes[x.0].value.data;

        // per-feature element visitor: flat index for (sample b, feature f, pos p)
        let flat = |bi: usize, f: usize, p: usize| (bi * features + f) * spatial + p;

        let (means, vars): (Vec<f64>, Vec<f64>) = if training {
            let mut means = vec![0.0f64; features];
            let mut vars = vec![0.0f64; features];
            for f in 0..features {
                let mut s = 0.0;
                for bi in 0..bsz {
                    for p in 0..spatial {
                        s += xd[flat(bi, f, p)].as_f64();
                    }
                }
                let m = s / count as f64;
                let mut v = 0.0;
                for bi in 0..bsz {
                    for p in 0..spatial {
                        let d = xd[flat(bi, f, p)].as_f64() - m;
                        v += d * d;
                    }
                }
                means[f] = m;
                vars[f] = v / count as f64;
            }
            (means, vars)
        } else {
            (
                running_mean.data.iter().map(|v| v.as_f64()).collect(),
                running_var.data.iter().map(|v| v.as_f64()).collect(),
            )
        };

        let invstd: Vec<f64> = vars.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = &self.nodes[gamma.0].value.data;
        let be = &self.nodes[beta.0].value.data;
        let mut xhat = vec![T::zero(); xd.len()];
        let mut data = vec![T::zero(); xd.len()];
        for f in 0..features {
            let (m, is) = (means[f], invstd[f]);
            let (gf, bf) = (g[f].as_f64(), be[f].as_f64());
            for bi in 0..bsz {
                for p in 0..spatial {
                    let i = flat(bi, f, p);
                    let xh = (xd[i].as_f64() - m) * is;
                    xhat[i] = T::from_f64(xh);
                    data[i] = T::from_f64(gf * xh + bf);
                }
            }
        }

        let updated = if training {
            let mut rm = running_mean.clone();
            let mut rv = running_var.clone();
            let unbias = count as f64 / (count as f64 - 1.0);
            for f in 0..features {
                rm.data[f] = T::from_f64(
                    (1.0 - BN_MOMENTUM) * rm.data[f].as_f64() + BN_MOMENTUM * means[f],
                );
                rv.data[f] = T::from_f64(
                    (1.0 - BN_MOMENTUM) * rv.data[f].as_f64() + BN_MOMENTUM * vars[f] * unbias,
                );
            }
            Some((rm, rv))
        } else {
            None
        };

        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let out = self.push(
            Tensor {
                shape: sx,
                data,
            },
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                invstd,
                count,
                training,
            },
            needs,
        );
        Ok((out, updated))
    }

    /// 2x2 max pooling with stride 2 on [B,C,H,W]; trailing odd row/column
    /// is dropped.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(TensorError::ShapeMismatch(format!(
                "maxpool2 expects [B,C,H,W], got {sx:?}"
            )));
        }
        let (bs, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (h2, w2) = (h / 2, w / 2);
        if h2 == 0 || w2 == 0 {
            return Err(TensorError::ShapeMismatch(format!(
                "maxpool2 input too small: {sx:?}"
            )));
        }
        let xd = &self.nodes[x.0].value.data;
        let mut data = vec![T::zero(); bs * c * h2 * w2];
        let mut argmax = vec![0u32; bs * c * h2 * w2];
        for bi in 0..bs {
            for ci in 0..c {
                let src = (bi * c + ci) * h * w;
                let dst = (bi * c + ci) * h2 * w2;
                for i in 0..h2 {
                    for j in 0..w2 {
                        let mut best_idx = src + (2 * i) * w + 2 * j;
                        let mut best = xd[best_idx];
                        for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = src + (2 * i + di) * w + 2 * j + dj;
                            if xd[idx] > best {
                                best = xd[idx];
                                best_idx = idx;
                            }
                        }
                        data[dst + i * w2 + j] = best;
                        argmax[dst + i * w2 + j] = best_idx as u32;
                    }
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor {
                shape: vec![bs, c, h2, w2],
                data,
            },
            Op::MaxPool2 { x, argmax },
            needs,
        ))
    }

    /// Per-row RMS normalization of a [B, D] tensor:
    /// y = x / (rms(x) + eps) with rms over the row.
    pub fn rms_norm(&mut self, x: Var, eps: f64) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(TensorError::ShapeMismatch(format!(
                "rms_norm expects [B, D], got {sx:?}"
            )));
        }
        let (b, d) = (sx[0], sx[1]);
        let xd = &self.nodes[x.0].value.data;
        let mut rms = Vec::with_capacity(b);
        let mut data = vec![T::zero(); b * d];
        for r in 0..b {
            let row = &xd[r * d..(r + 1) * d];
            let ms: f64 = row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>() / d as f64;
            let rv = ms.sqrt();
            rms.push(rv);
            let m = 1.0 / (rv + eps);
            for (o, v) in data[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = T::from_f64(v.as_f64() * m);
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor {
                shape: sx,
                data,
            },
            Op::RmsNorm { x, rms, eps },
            needs,
        ))
    }

    // ---- backward ----

    /// Accumulate dLoss/dLeaf into every gradient-requiring leaf reachable
    /// from `loss`. Leaf gradients accumulate across repeated calls;
    /// intermediate gradients are recomputed per call.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(
                self.nodes[loss.0].value.shape.clone(),
            ));
        }
        for n in &mut self.nodes {
            if !matches!(n.op, Op::Leaf) {
                n.grad = None;
            }
        }
        // seed
        {
            let shape = self.nodes[loss.0].value.shape.clone();
            let g = self.nodes[loss.0]
                .grad
                .get_or_insert_with(|| Tensor::zeros(&shape));
            g.data[0] = g.data[0] + T::one();
        }
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let contribs = self.local_grads(i);
            for (p, c) in contribs {
                let node = &mut self.nodes[p];
                let g = node
                    .grad
                    .get_or_insert_with(|| Tensor::zeros(&c.shape));
                debug_assert_eq!(g.shape, c.shape);
                for (gi, ci) in g.data.iter_mut().zip(c.data) {
                    *gi = *gi + ci;
                }
            }
        }
        Ok(())
    }

    /// Gradient contributions of node `i` to each of its parents.
    fn local_grads(&self, i: usize) -> Vec<(usize, Tensor<T>)> {
        let node = &self.nodes[i];
        let g = node.grad.as_ref().expect("grad present");
        let mut out: Vec<(usize, Tensor<T>)> = Vec::new();
        let want = |v: Var| self.nodes[v.0].needs_grad;

        match &node.op {
            Op::Leaf => {}
            Op::Bin { kind, a, b, ma, mb } => {
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                let n = g.numel();
                if want(*a) {
                    let mut da = Tensor::zeros(&va.shape);
                    for i in 0..n {
                        let gi = g.data[i];
                        let contrib = match kind {
                            BinKind::Add => gi,
                            BinKind::Sub => gi,
                            BinKind::Mul => gi * vb.data[mb.index(i)],
                            BinKind::Div => gi / vb.data[mb.index(i)],
                        };
                        let ia = ma.index(i);
                        da.data[ia] = da.data[ia] + contrib;
                    }
                    out.push((a.0, da));
                }
                if want(*b) {
                    let mut db = Tensor::zeros(&vb.shape);
                    for i in 0..n {
                        let gi = g.data[i];
                        let ib = mb.index(i);
                        let contrib = match kind {
                            BinKind::Add => gi,
                            BinKind::Sub => T::zero() - gi,
                            BinKind::Mul => gi * va.data[ma.index(i)],
                            BinKind::Div => {
                                let bv = vb.data[ib];
                                T::zero() - gi * va.data[ma.index(i)] / (bv * bv)
                            }
                        };
                        db.data[ib] = db.data[ib] + contrib;
                    }
                    out.push((b.0, db));
                }
            }
            Op::Scale { x, c } => {
                if want(*x) {
                    let cc = T::from_f64(*c);
                    out.push((x.0, g.map(|v| v * cc)));
                }
            }
            Op::AddConst { x } => {
                if want(*x) {
                    out.push((x.0, g.clone()));
                }
            }
            Op::Relu { x } => {
                if want(*x) {
                    let vx = &self.nodes[x.0].value;
                    let mut dx = Tensor::zeros(&vx.shape);
                    for (i, (&gi, &xi)) in g.data.iter().zip(&vx.data).enumerate() {
                        if xi > T::zero() {
                            dx.data[i] = gi;
                        }
                    }
                    out.push((x.0, dx));
                }
            }
            Op::Softplus { x } => {
                if want(*x) {
                    let vx = &self.nodes[x.0].value;
                    let mut dx = Tensor::zeros(&vx.shape);
                    for (i, (&gi, &xi)) in g.data.iter().zip(&vx.data).enumerate() {
                        dx.data[i] = gi * T::from_f64(specfun::sigmoid(xi.as_f64()));
                    }
                    out.push((x.0, dx));
                }
            }
            Op::Exp { x } => {
                if want(*x) {
                    let mut dx = Tensor::zeros(&node.value.shape);
                    for (i, (&gi, &yi)) in g.data.iter().zip(&node.value.data).enumerate() {
                        dx.data[i] = gi * yi;
                    }
                    out.push((x.0, dx));
                }
            }
            Op::Log { x } => {
                if want(*x) {
                    let vx = &self.nodes[x.0].value;
                    let mut dx = Tensor::zeros(&vx.shape);
                    for (i, (&gi, &xi)) in g.data.iter().zip(&vx.data).enumerate() {
                        dx.data[i] = gi / xi;
                    }
                    out.push((x.0, dx));
                }
            }
            Op::LogClamped { x, eps } => {
                if want(*x) {
                    let vx = &self.nodes[x.0].value;
                    let e = T::from_f64(*eps);
                    let mut dx = Tensor::zeros(&vx.shape);
                    for (i, (&gi, &xi)) in g.data.iter().zip(&vx.data).enumerate() {
                        if xi > e {
                            dx.data[i] = gi / xi;
                        }
                    }
                    out.push((x.0, dx));
                }
            }
            Op::Digamma { x } => {
                if want(*x) {
                    let vx = &self.nodes[x.0].value;
                    let mut dx = Tensor::zeros(&vx.shape);
                    for (i, (&gi, &xi)) in g.data.iter().zip(&vx.data).enumerate() {
                        dx.data[i] = gi * T::from_f64(specfun::trigamma(xi.as_f64()));
                    }
                    out.push((x.0, dx));
                }
            }
            Op::Lgamma { x } => {
                if want(*x) {
                    let vx = &self.nodes[x.0].value;
                    let mut dx = Tensor::zeros(&vx.shape);
                    for (i, (&gi, &xi)) in g.data.iter().zip(&vx.data).enumerate() {
                        dx.data[i] = gi * T::from_f64(specfun::digamma(xi.as_f64()));
                    }
                    out.push((x.0, dx));
                }
            }
            Op::Softmax { x } => {
                if want(*x) {
                    let y = &node.value;
                    let (b, k) = (y.shape[0], y.shape[1]);
                    let mut dx = Tensor::zeros(&y.shape);
                    for r in 0..b {
                        let mut dot = 0.0f64;
                        for j in 0..k {
                            dot += g.data[r * k + j].as_f64() * y.data[r * k + j].as_f64();
                        }
                        for j in 0..k {
                            let yj = y.data[r * k + j].as_f64();
                            dx.data[r * k + j] =
                                T::from_f64(yj * (g.data[r * k + j].as_f64() - dot));
                        }
                    }
                    out.push((x.0, dx));
                }
            }
            Op::RowSum { x } => {
                if want(*x) {
                    let vx = &self.nodes[x.0].value;
                    let (b, k) = (vx.shape[0], vx.shape[1]);
                    let mut dx = Tensor::zeros(&vx.shape);
                    for r in 0..b {
                        let gr = g.data[r];
                        for j in 0..k {
                            dx.data[r * k + j] = gr;
                        }
                    }
                    out.push((x.0, dx));
                }
            }
            Op::Sum { x } => {
                if want(*x) {
                    let vx = &self.nodes[x.0].value;
                    out.push((x.0, Tensor::filled(&vx.shape, g.data[0])));
                }
            }
            Op::Mean { x } => {
                if want(*x) {
                    let vx = &self.nodes[x.0].value;
                    let c = g.data[0].as_f64() / vx.numel() as f64;
                    out.push((x.0, Tensor::filled(&vx.shape, T::from_f64(c))));
                }
            }
            Op::Reshape { x } => {
                if want(*x) {
                    let vx = &self.nodes[x.0].value;
                    let mut dx = g.clone();
                    dx.shape = vx.shape.clone();
                    out.push((x.0, dx));
                }
            }
            Op::Dense { x, w, b } => {
                let vx = &self.nodes[x.0].value;
                let vw = &self.nodes[w.0].value;
                let (bs, nin, nout) = (vx.shape[0], vx.shape[1], vw.shape[1]);
                if want(*x) {
                    // dx = g . w^T
                    let dx = matmul_a_bt(&g.data, &vw.data, bs, nout, nin);
                    out.push((
                        x.0,
                        Tensor {
                            shape: vec![bs, nin],
                            data: dx,
                        },
                    ));
                }
                if want(*w) {
                    // dw = x^T . g
                    let dw = matmul_at_b(&vx.data, &g.data, bs, nin, nout);
                    out.push((
                        w.0,
                        Tensor {
                            shape: vec![nin, nout],
                            data: dw,
                        },
                    ));
                }
                if want(*b) {
                    let mut db = vec![0.0f64; nout];
                    for r in 0..bs {
                        for j in 0..nout {
                            db[j] += g.data[r * nout + j].as_f64();
                        }
                    }
                    out.push((
                        b.0,
                        Tensor {
                            shape: vec![nout],
                            data: db.into_iter().map(T::from_f64).collect(),
                        },
                    ));
                }
            }
            Op::Conv2d {
                x,
                k,
                b,
                stride,
                padding,
                cols,
            } => {
                let sx = &self.nodes[x.0].value.shape;
                let sk = &self.nodes[k.0].value.shape;
                let (bs, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                let (o, kh, kw) = (sk[0], sk[2], sk[3]);
                let so = &node.value.shape;
                let (h2, w2) = (so[2], so[3]);
                let ckk = c * kh * kw;
                let rows = bs * h2 * w2;
                // g as rows [rows, O]
                let mut g_rows = vec![T::zero(); rows * o];
                for bi in 0..bs {
                    for oi in 0..o {
                        let src = (bi * o + oi) * h2 * w2;
                        for p in 0..h2 * w2 {
                            g_rows[(bi * h2 * w2 + p) * o + oi] = g.data[src + p];
                        }
                    }
                }
                if want(*k) {
                    // dk[O, CKK] = g_rows^T . cols
                    let dk = matmul_at_b(&g_rows, cols, rows, o, ckk);
                    out.push((
                        k.0,
                        Tensor {
                            shape: sk.clone(),
                            data: dk,
                        },
                    ));
                }
                if want(*b) {
                    let mut db = vec![0.0f64; o];
                    for r in 0..rows {
                        for oi in 0..o {
                            db[oi] += g_rows[r * o + oi].as_f64();
                        }
                    }
                    out.push((
                        b.0,
                        Tensor {
                            shape: vec![o],
                            data: db.into_iter().map(T::from_f64).collect(),
                        },
                    ));
                }
                if want(*x) {
                    // dcols = g_rows . kmat where kmat = k as [O, CKK]
                    let kd = &self.nodes[k.0].value.data;
                    let dcols = matmul(&g_rows, kd, rows, o, ckk);
                    let mut dx = Tensor::zeros(sx);
                    for bi in 0..bs {
                        for oh in 0..h2 {
                            for ow in 0..w2 {
                                let row = (bi * h2 + oh) * w2 + ow;
                                let base = row * ckk;
                                for ci in 0..c {
                                    for ki in 0..kh {
                                        let ih =
                                            (oh * stride + ki) as isize - *padding as isize;
                                        if ih < 0 || ih >= h as isize {
                                            continue;
                                        }
                                        let dst = ((bi * c + ci) * h + ih as usize) * w;
                                        for kj in 0..kw {
                                            let iw = (ow * stride + kj) as isize
                                                - *padding as isize;
                                            if iw < 0 || iw >= w as isize {
                                                continue;
                                            }
                                            let di = dst + iw as usize;
                                            dx.data[di] = dx.data[di]
                                                + dcols[base + (ci * kh + ki) * kw + kj];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    out.push((x.0, dx));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                invstd,
                count,
                training,
            } => {
                let sx = &self.nodes[x.0].value.shape;
                let features = sx[1];
                let bsz = sx[0];
                let spatial: usize = if sx.len() == 4 { sx[2] * sx[3] } else { 1 };
                let flat = |bi: usize, f: usize, p: usize| (bi * features + f) * spatial + p;
                let gm = &self.nodes[gamma.0].value.data;

                // per-feature reductions, f64 accumulation
                let mut sum_g = vec![0.0f64; features];
                let mut sum_gx = vec![0.0f64; features];
                for f in 0..features {
                    for bi in 0..bsz {
                        for p in 0..spatial {
                            let i = flat(bi, f, p);
                            let gi = g.data[i].as_f64();
                            sum_g[f] += gi;
                            sum_gx[f] += gi * xhat[i].as_f64();
                        }
                    }
                }
                if want(*beta) {
                    out.push((
                        beta.0,
                        Tensor {
                            shape: vec![features],
                            data: sum_g.iter().map(|&v| T::from_f64(v)).collect(),
                        },
                    ));
                }
                if want(*gamma) {
                    out.push((
                        gamma.0,
                        Tensor {
                            shape: vec![features],
                            data: sum_gx.iter().map(|&v| T::from_f64(v)).collect(),
                        },
                    ));
                }
                if want(*x) {
                    let m = *count as f64;
                    let mut dx = Tensor::zeros(sx);
                    for f in 0..features {
                        let gf = gm[f].as_f64();
                        let is = invstd[f];
                        for bi in 0..bsz {
                            for p in 0..spatial {
                                let i = flat(bi, f, p);
                                let gi = g.data[i].as_f64();
                                let v = if *training {
                                    is * gf / m
                                        * (m * gi - sum_g[f] - xhat[i].as_f64() * sum_gx[f])
                                } else {
                                    gi * gf * is
                                };
                                dx.data[i] = T::from_f64(v);
                            }
                        }
                    }
                    out.push((x.0, dx));
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if want(*x) {
                    let vx = &self.nodes[x.0].value;
                    let mut dx = Tensor::zeros(&vx.shape);
                    for (i, &src) in argmax.iter().enumerate() {
                        let s = src as usize;
                        dx.data[s] = dx.data[s] + g.data[i];
                    }
                    out.push((x.0, dx));
                }
            }
            Op::RmsNorm { x, rms, eps } => {
                if want(*x) {
                    let vx = &self.nodes[x.0].value;
                    let (b, d) = (vx.shape[0], vx.shape[1]);
                    let mut dx = Tensor::zeros(&vx.shape);
                    for r in 0..b {
                        let row = &vx.data[r * d..(r + 1) * d];
                        let grow = &g.data[r * d..(r + 1) * d];
                        let rv = rms[r];
                        let m = 1.0 / (rv + eps);
                        let dot: f64 = grow
                            .iter()
                            .zip(row)
                            .map(|(gi, xi)| gi.as_f64() * xi.as_f64())
                            .sum();
                        let c = if rv > 0.0 {
                            dot / (d as f64 * rv * (rv + eps) * (rv + eps))
                        } else {
                            0.0
                        };
                        for j in 0..d {
                            dx.data[r * d + j] = T::from_f64(
                                m * grow[j].as_f64() - c * row[j].as_f64(),
                            );
                        }
                    }
                    out.push((x.0, dx));
                }
            }
        }
        out
    }
}
