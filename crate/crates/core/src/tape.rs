//! Reverse-mode automatic differentiation over a linear operation tape.
//!
//! A `Tape` owns every intermediate value of one forward pass. Builder
//! methods validate shapes, compute the forward result eagerly and record
//! a backward recipe. `backward` replays the recipes in reverse, summing
//! vector-Jacobian products into per-node gradient accumulators. Leaves
//! registered with `requires_grad` end up with their full gradient after
//! one traversal; a leaf used several times accumulates additively.
//!
//! One tape serves one training step and is never shared across threads.

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{Element, Tensor};

/// Handle to a node on a tape. Only meaningful for the tape that made it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Softplus,
    Tanh,
    Relu,
}

/// Running statistics owned by a batch-norm layer.
#[derive(Clone, Debug)]
pub struct BnStats<E> {
    pub mean: Vec<E>,
    pub var: Vec<E>,
}

impl<E: Element> BnStats<E> {
    pub fn new(channels: usize) -> Self {
        BnStats {
            mean: vec![E::zero(); channels],
            var: vec![E::one(); channels],
        }
    }
}

enum Op<E> {
    Leaf,
    Matmul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Bmm {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    BmmBt {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddRow {
        a: Var,
        b: Var,
        rows: usize,
        cols: usize,
    },
    AddTileRows {
        a: Var,
        b: Var,
        tiles: usize,
        block: usize,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Div {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: E,
    },
    AddScalar {
        a: Var,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    Reshape {
        a: Var,
    },
    SliceCols {
        a: Var,
        start: usize,
        len: usize,
        rows: usize,
        cols: usize,
    },
    ConcatCols {
        parts: Vec<(Var, usize)>,
        rows: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        rows: usize,
        cols: usize,
        mean: Vec<E>,
        rstd: Vec<E>,
    },
    Softmax {
        x: Var,
        rows: usize,
        cols: usize,
    },
    Act {
        x: Var,
        kind: Activation,
        beta: E,
    },
    ConvT2d {
        x: Var,
        kernel: Var,
        b: usize,
        c_in: usize,
        h: usize,
        w: usize,
        c_out: usize,
        ksize: usize,
        stride: usize,
        padding: usize,
    },
    ChannelBias {
        x: Var,
        bias: Var,
        b: usize,
        c: usize,
        hw: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        b: usize,
        c: usize,
        hw: usize,
        mean: Vec<E>,
        rstd: Vec<E>,
        train: bool,
    },
    WindowBlur {
        x: Var,
        win: Vec<E>,
        planes: usize,
        h: usize,
        w: usize,
        k: usize,
    },
    MixtureNll {
        weights: Var,
        means: Var,
        sigmas: Var,
        targets: Var,
        rows: usize,
        k: usize,
        d: usize,
        // exp(gaussian log density - per-row logsumexp), cached forward
        density_ratio: Vec<E>,
    },
}

struct Node<E> {
    value: Tensor<E>,
    op: Op<E>,
    needs_grad: bool,
}

pub struct Tape<E> {
    nodes: Vec<Node<E>>,
    grads: Vec<Option<Vec<E>>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>, needs_grad: bool) -> Var {
        debug_assert!(
            value.all_finite(),
            "non-finite value produced by a forward op"
        );
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated by the last `backward`, if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[E]> {
        self.grads[v.0].as_deref()
    }

    pub fn grad_or_zeros(&self, v: Var) -> Vec<E> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![E::zero(); self.nodes[v.0].value.numel()],
        }
    }

    // ----- leaves -------------------------------------------------------

    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.leaf(value, false)
    }

    // ----- linear algebra -----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                expected: "[m x k] . [k x n]".into(),
                got: format!("{:?} . {:?}", sa, sb),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::Matmul { a, b, m, k, n },
            needs,
        ))
    }

    /// Batched matmul over leading batch blocks: [batch*m x k] . [batch*k x n].
    pub fn bmm(&mut self, a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize) -> Result<Var> {
        if self.value(a).numel() != batch * m * k || self.value(b).numel() != batch * k * n {
            return Err(Error::ShapeMismatch {
                op: "bmm",
                expected: format!("{} and {} elements", batch * m * k, batch * k * n),
                got: format!(
                    "{} and {} elements",
                    self.value(a).numel(),
                    self.value(b).numel()
                ),
            });
        }
        let out = kernels::bmm(self.value(a).data(), self.value(b).data(), batch, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(vec![batch * m, n], out)?,
            Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
            },
            needs,
        ))
    }

    /// Batched a . b^T with a as [batch*m x k], b as [batch*n x k].
    pub fn bmm_bt(
        &mut self,
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    ) -> Result<Var> {
        if self.value(a).numel() != batch * m * k || self.value(b).numel() != batch * n * k {
            return Err(Error::ShapeMismatch {
                op: "bmm_bt",
                expected: format!("{} and {} elements", batch * m * k, batch * n * k),
                got: format!(
                    "{} and {} elements",
                    self.value(a).numel(),
                    self.value(b).numel()
                ),
            });
        }
        let out = kernels::bmm_bt(self.value(a).data(), self.value(b).data(), batch, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(vec![batch * m, n], out)?,
            Op::BmmBt {
                a,
                b,
                batch,
                m,
                k,
                n,
            },
            needs,
        ))
    }

    // ----- elementwise ---------------------------------------------------

    fn binary_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                expected: format!("{:?}", self.shape(a)),
                got: format!("{:?}", self.shape(b)),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add { a, b }, needs))
    }

    /// Row-broadcast addition: a is [rows x cols], b is [cols].
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let cols = *self.shape(a).last().unwrap_or(&0);
        if self.value(b).numel() != cols || cols == 0 {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                expected: format!("[{}]", cols),
                got: format!("{:?}", self.shape(b)),
            });
        }
        let rows = self.value(a).numel() / cols;
        let bv = self.value(b).data().to_vec();
        let data: Vec<E> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % cols])
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::AddRow { a, b, rows, cols }, needs))
    }

    /// Adds b (one block) to each of `tiles` consecutive blocks of a.
    pub fn add_tile_rows(&mut self, a: Var, b: Var, tiles: usize) -> Result<Var> {
        let block = self.value(b).numel();
        if self.value(a).numel() != tiles * block || block == 0 {
            return Err(Error::ShapeMismatch {
                op: "add_tile_rows",
                expected: format!("{} elements", tiles * block),
                got: format!("{} elements", self.value(a).numel()),
            });
        }
        let bv = self.value(b).data().to_vec();
        let data: Vec<E> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % block])
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::AddTileRows { a, b, tiles, block }, needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x - y);
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub { a, b }, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul { a, b }, needs))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("div", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x / y);
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Div { a, b }, needs))
    }

    pub fn scale(&mut self, a: Var, c: E) -> Var {
        let out = self.value(a).map(|x| x * c);
        let needs = self.needs(a);
        self.push(out, Op::Scale { a, c }, needs)
    }

    pub fn add_scalar(&mut self, a: Var, c: E) -> Var {
        let out = self.value(a).map(|x| x + c);
        let needs = self.needs(a);
        self.push(out, Op::AddScalar { a }, needs)
    }

    // ----- reductions ----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self
            .value(a)
            .data()
            .iter()
            .fold(E::zero(), |acc, &v| acc + v);
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum { a }, needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = E::from_f64(self.value(a).numel() as f64);
        let s = self
            .value(a)
            .data()
            .iter()
            .fold(E::zero(), |acc, &v| acc + v)
            / n;
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::Mean { a }, needs)
    }

    // ----- structure -----------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).reshaped(shape)?;
        let needs = self.needs(a);
        Ok(self.push(out, Op::Reshape { a }, needs))
    }

    /// Column slice of a 2D value: out[r, j] = a[r, start + j].
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let cols = *self.shape(a).last().unwrap_or(&0);
        if start + len > cols || cols == 0 {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                expected: format!("start+len <= {}", cols),
                got: format!("{}+{}", start, len),
            });
        }
        let rows = self.value(a).numel() / cols;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let out = Tensor::new(vec![rows, len], data)?;
        let needs = self.needs(a);
        Ok(self.push(
            out,
            Op::SliceCols {
                a,
                start,
                len,
                rows,
                cols,
            },
            needs,
        ))
    }

    /// Concatenate 2D values with equal row counts along the column axis.
    pub fn concat_cols(&mut self, vars: &[Var]) -> Result<Var> {
        if vars.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                expected: "at least one input".into(),
                got: "0 inputs".into(),
            });
        }
        let rows = self.shape(vars[0])[0];
        let mut parts = Vec::with_capacity(vars.len());
        let mut total_cols = 0;
        for &v in vars {
            let s = self.shape(v);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    expected: format!("[{} x *]", rows),
                    got: format!("{:?}", s),
                });
            }
            parts.push((v, s[1]));
            total_cols += s[1];
        }
        let mut data = Vec::with_capacity(rows * total_cols);
        for r in 0..rows {
            for &(v, c) in &parts {
                let src = self.value(v).data();
                data.extend_from_slice(&src[r * c..(r + 1) * c]);
            }
        }
        let needs = vars.iter().any(|&v| self.needs(v));
        let out = Tensor::new(vec![rows, total_cols], data)?;
        Ok(self.push(out, Op::ConcatCols { parts, rows }, needs))
    }

    // ----- normalization and activations ---------------------------------

    /// Per-row normalization over the last axis, then affine scale/shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: E) -> Result<Var> {
        let cols = *self.shape(x).last().unwrap_or(&0);
        if cols == 0 || self.value(gamma).numel() != cols || self.value(beta).numel() != cols {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                expected: format!("gamma/beta of [{}]", cols),
                got: format!(
                    "{:?} / {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            });
        }
        if eps <= E::zero() {
            return Err(Error::Config("layer_norm eps must be positive".into()));
        }
        let rows = self.value(x).numel() / cols;
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bta = self.value(beta).data();
        let ncols = E::from_f64(cols as f64);
        let mut data = vec![E::zero(); rows * cols];
        let mut means = vec![E::zero(); rows];
        let mut rstds = vec![E::zero(); rows];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let m = row.iter().fold(E::zero(), |a, &v| a + v) / ncols;
            let var = row
                .iter()
                .fold(E::zero(), |a, &v| a + (v - m) * (v - m))
                / ncols;
            let rstd = (var + eps).sqrt().recip();
            means[r] = m;
            rstds[r] = rstd;
            for j in 0..cols {
                data[r * cols + j] = (row[j] - m) * rstd * g[j] + bta[j];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                rows,
                cols,
                mean: means,
                rstd: rstds,
            },
            needs,
        ))
    }

    /// Max-subtracted softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let cols = *self.shape(x).last().unwrap_or(&0);
        if cols == 0 {
            return Err(Error::ShapeMismatch {
                op: "softmax",
                expected: "non-empty last axis".into(),
                got: format!("{:?}", self.shape(x)),
            });
        }
        let rows = self.value(x).numel() / cols;
        let xv = self.value(x).data();
        let mut data = vec![E::zero(); rows * cols];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let m = row.iter().fold(E::neg_infinity(), |a, &v| a.max(v));
            let mut denom = E::zero();
            for j in 0..cols {
                let e = (row[j] - m).exp();
                data[r * cols + j] = e;
                denom = denom + e;
            }
            for j in 0..cols {
                data[r * cols + j] = data[r * cols + j] / denom;
            }
        }
        let needs = self.needs(x);
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(out, Op::Softmax { x, rows, cols }, needs))
    }

    pub fn activation(&mut self, x: Var, kind: Activation, beta: E) -> Result<Var> {
        if kind == Activation::Softplus && beta <= E::zero() {
            return Err(Error::Config("softplus beta must be positive".into()));
        }
        let out = self.value(x).map(|v| activation_forward(kind, v, beta));
        let needs = self.needs(x);
        Ok(self.push(out, Op::Act { x, kind, beta }, needs))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Gelu, E::one()).unwrap()
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu, E::one()).unwrap()
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh, E::one()).unwrap()
    }

    pub fn softplus(&mut self, x: Var, beta: E) -> Result<Var> {
        self.activation(x, Activation::Softplus, beta)
    }

    // ----- convolution stack ----------------------------------------------

    /// Fractionally-strided convolution; x [b, c_in, h, w], kernel
    /// [c_in, c_out, k, k].
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(kernel).to_vec();
        if sx.len() != 4 || sk.len() != 4 || sk[0] != sx[1] || sk[2] != sk[3] {
            return Err(Error::ShapeMismatch {
                op: "conv_transpose2d",
                expected: "x [b,c_in,h,w], kernel [c_in,c_out,k,k]".into(),
                got: format!("{:?}, {:?}", sx, sk),
            });
        }
        let (b, c_in, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (c_out, ksize) = (sk[1], sk[2]);
        let oh = kernels::conv_transpose_out(h, ksize, stride, padding);
        let ow = kernels::conv_transpose_out(w, ksize, stride, padding);
        if oh < 1 || ow < 1 {
            return Err(Error::Config(format!(
                "conv_transpose2d output extent {}x{} is not positive",
                oh, ow
            )));
        }
        let data = kernels::conv_transpose2d(
            self.value(x).data(),
            self.value(kernel).data(),
            b,
            c_in,
            h,
            w,
            c_out,
            ksize,
            stride,
            padding,
        );
        let out = Tensor::new(vec![b, c_out, oh as usize, ow as usize], data)?;
        let needs = self.needs(x) || self.needs(kernel);
        Ok(self.push(
            out,
            Op::ConvT2d {
                x,
                kernel,
                b,
                c_in,
                h,
                w,
                c_out,
                ksize,
                stride,
                padding,
            },
            needs,
        ))
    }

    /// Adds bias[c] to every spatial position of channel c.
    pub fn channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || self.value(bias).numel() != sx[1] {
            return Err(Error::ShapeMismatch {
                op: "channel_bias",
                expected: format!("bias [{}]", sx.get(1).copied().unwrap_or(0)),
                got: format!("{:?}", self.shape(bias)),
            });
        }
        let (b, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
        let bv = self.value(bias).data().to_vec();
        let data: Vec<E> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv[(i / hw) % c])
            .collect();
        let out = Tensor::new(sx, data)?;
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(out, Op::ChannelBias { x, bias, b, c, hw }, needs))
    }

    /// Batch normalization over [b, c, h, w]. Training mode normalizes with
    /// batch statistics and folds them into `running` (momentum update);
    /// evaluation mode normalizes with the stored running statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &mut BnStats<E>,
        momentum: E,
        eps: E,
        train: bool,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "batch_norm2d",
                expected: "[b,c,h,w]".into(),
                got: format!("{:?}", sx),
            });
        }
        let (b, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::ShapeMismatch {
                op: "batch_norm2d",
                expected: format!("gamma/beta [{}]", c),
                got: format!("{:?}/{:?}", self.shape(gamma), self.shape(beta)),
            });
        }
        let n = b * hw;
        let nf = E::from_f64(n as f64);
        let xv = self.value(x).data();
        let g = self.value(gamma).data().to_vec();
        let bt = self.value(beta).data().to_vec();
        let mut mean = vec![E::zero(); c];
        let mut rstd = vec![E::zero(); c];
        if train {
            for ci in 0..c {
                let mut s = E::zero();
                for bi in 0..b {
                    let base = (bi * c + ci) * hw;
                    for p in 0..hw {
                        s = s + xv[base + p];
                    }
                }
                let m = s / nf;
                let mut v = E::zero();
                for bi in 0..b {
                    let base = (bi * c + ci) * hw;
                    for p in 0..hw {
                        let d = xv[base + p] - m;
                        v = v + d * d;
                    }
                }
                let var = v / nf;
                mean[ci] = m;
                rstd[ci] = (var + eps).sqrt().recip();
                let unbiased = if n > 1 {
                    var * nf / E::from_f64((n - 1) as f64)
                } else {
                    var
                };
                running.mean[ci] = (E::one() - momentum) * running.mean[ci] + momentum * m;
                running.var[ci] = (E::one() - momentum) * running.var[ci] + momentum * unbiased;
            }
        } else {
            for ci in 0..c {
                mean[ci] = running.mean[ci];
                rstd[ci] = (running.var[ci] + eps).sqrt().recip();
            }
        }
        let mut data = vec![E::zero(); xv.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * hw;
                for p in 0..hw {
                    data[base + p] = (xv[base + p] - mean[ci]) * rstd[ci] * g[ci] + bt[ci];
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let out = Tensor::new(sx, data)?;
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                b,
                c,
                hw,
                mean,
                rstd,
                train,
            },
            needs,
        ))
    }

    /// Valid-mode correlation of every [h, w] plane with a fixed window.
    pub fn window_blur(&mut self, x: Var, win: &[E], k: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || win.len() != k * k {
            return Err(Error::ShapeMismatch {
                op: "window_blur",
                expected: "[b,c,h,w] and k*k window".into(),
                got: format!("{:?}, window {}", sx, win.len()),
            });
        }
        let (h, w) = (sx[2], sx[3]);
        if k > h || k > w {
            return Err(Error::Config(format!(
                "window {} larger than image {}x{}",
                k, h, w
            )));
        }
        let planes = sx[0] * sx[1];
        let data = kernels::window_correlate_valid(self.value(x).data(), win, planes, h, w, k);
        let out = Tensor::new(vec![sx[0], sx[1], h - k + 1, w - k + 1], data)?;
        let needs = self.needs(x);
        Ok(self.push(
            out,
            Op::WindowBlur {
                x,
                win: win.to_vec(),
                planes,
                h,
                w,
                k,
            },
            needs,
        ))
    }

    // ----- mixture density -------------------------------------------------

    /// Per-row negative log-likelihood of diagonal Gaussian mixtures.
    ///
    /// weights [rows x k], means and sigmas [rows x k*d], targets [rows x d].
    /// Computed through log-sum-exp; differentiable in all four inputs.
    pub fn mixture_nll(
        &mut self,
        weights: Var,
        means: Var,
        sigmas: Var,
        targets: Var,
        k: usize,
        d: usize,
    ) -> Result<Var> {
        let rows = if k > 0 { self.value(weights).numel() / k } else { 0 };
        let ok = k > 0
            && d > 0
            && self.value(weights).numel() == rows * k
            && self.value(means).numel() == rows * k * d
            && self.value(sigmas).numel() == rows * k * d
            && self.value(targets).numel() == rows * d;
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "mixture_nll",
                expected: format!("weights [r x {k}], means/sigmas [r x {}], targets [r x {d}]", k * d),
                got: format!(
                    "{:?}, {:?}, {:?}, {:?}",
                    self.shape(weights),
                    self.shape(means),
                    self.shape(sigmas),
                    self.shape(targets)
                ),
            });
        }
        if self.value(sigmas).data().iter().any(|&s| s <= E::zero()) {
            return Err(Error::Numeric(
                "mixture_nll requires strictly positive sigmas".into(),
            ));
        }
        let half_log_two_pi = E::from_f64(0.5 * (2.0 * std::f64::consts::PI).ln());
        let wv = self.value(weights).data();
        let mv = self.value(means).data();
        let sv = self.value(sigmas).data();
        let yv = self.value(targets).data();
        let mut out = vec![E::zero(); rows];
        let mut ratio = vec![E::zero(); rows * k];
        let mut log_density = vec![E::zero(); k];
        for r in 0..rows {
            let y_row = &yv[r * d..(r + 1) * d];
            let mut max_l = E::neg_infinity();
            for ki in 0..k {
                let base = (r * k + ki) * d;
                let mut g = E::zero();
                for j in 0..d {
                    let s = sv[base + j];
                    let z = (y_row[j] - mv[base + j]) / s;
                    g = g - half_log_two_pi - s.ln() - z * z / E::from_f64(2.0);
                }
                log_density[ki] = g;
                let l = wv[r * k + ki].ln() + g;
                if l > max_l {
                    max_l = l;
                }
            }
            let lse = if max_l == E::neg_infinity() {
                E::neg_infinity()
            } else {
                let mut acc = E::zero();
                for ki in 0..k {
                    acc = acc + (wv[r * k + ki].ln() + log_density[ki] - max_l).exp();
                }
                max_l + acc.ln()
            };
            out[r] = -lse;
            for ki in 0..k {
                ratio[r * k + ki] = if lse == E::neg_infinity() {
                    E::zero()
                } else {
                    (log_density[ki] - lse).exp()
                };
            }
        }
        let needs = self.needs(weights)
            || self.needs(means)
            || self.needs(sigmas)
            || self.needs(targets);
        let out = Tensor::new(vec![rows], out)?;
        Ok(self.push(
            out,
            Op::MixtureNll {
                weights,
                means,
                sigmas,
                targets,
                rows,
                k,
                d,
                density_ratio: ratio,
            },
            needs,
        ))
    }

    // ----- backward --------------------------------------------------------

    /// Populates gradients for everything reachable from `loss`, which must
    /// be a scalar produced on this tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Numeric("loss is not a node on this tape".into()));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::ShapeMismatch {
                op: "backward",
                expected: "scalar loss".into(),
                got: format!("{:?}", self.nodes[loss.0].value.shape()),
            });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<E>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![E::one()]);
        for i in (0..n).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let d_out = grads[i].take().unwrap();
            self.backward_op(i, &d_out, &mut grads);
            grads[i] = Some(d_out);
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<E>>], v: Var, contrib: &[E]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (gi, &ci) in g.iter_mut().zip(contrib) {
                    *gi = *gi + ci;
                }
            }
            None => grads[v.0] = Some(contrib.to_vec()),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn backward_op(&self, idx: usize, d_out: &[E], grads: &mut [Option<Vec<E>>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.needs(*a) {
                    let da = kernels::matmul_bt(d_out, self.value(*b).data(), m, n, k);
                    self.accumulate(grads, *a, &da);
                }
                if self.needs(*b) {
                    let db = kernels::matmul_at(self.value(*a).data(), d_out, m, k, n);
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                if self.needs(*a) {
                    let da = kernels::bmm_bt(d_out, self.value(*b).data(), batch, m, n, k);
                    self.accumulate(grads, *a, &da);
                }
                if self.needs(*b) {
                    let db = kernels::bmm_at(self.value(*a).data(), d_out, batch, m, k, n);
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::BmmBt {
                a,
                b,
                batch,
                m,
                k,
                n,
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                if self.needs(*a) {
                    // d_a = d_out [batch,m,n] . b [batch,n,k]
                    let da = kernels::bmm(d_out, self.value(*b).data(), batch, m, n, k);
                    self.accumulate(grads, *a, &da);
                }
                if self.needs(*b) {
                    // d_b = d_out^T [batch,n,m] . a [batch,m,k]
                    let db = kernels::bmm_at(d_out, self.value(*a).data(), batch, m, n, k);
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, d_out);
                self.accumulate(grads, *b, d_out);
            }
            Op::AddRow { a, b, rows, cols } => {
                self.accumulate(grads, *a, d_out);
                if self.needs(*b) {
                    let mut db = vec![E::zero(); *cols];
                    for r in 0..*rows {
                        for j in 0..*cols {
                            db[j] = db[j] + d_out[r * cols + j];
                        }
                    }
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::AddTileRows { a, b, tiles, block } => {
                self.accumulate(grads, *a, d_out);
                if self.needs(*b) {
                    let mut db = vec![E::zero(); *block];
                    for t in 0..*tiles {
                        for j in 0..*block {
                            db[j] = db[j] + d_out[t * block + j];
                        }
                    }
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, d_out);
                if self.needs(*b) {
                    let neg: Vec<E> = d_out.iter().map(|&g| -g).collect();
                    self.accumulate(grads, *b, &neg);
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let da = zip_map(d_out, self.value(*b).data(), |g, y| g * y);
                    self.accumulate(grads, *a, &da);
                }
                if self.needs(*b) {
                    let db = zip_map(d_out, self.value(*a).data(), |g, x| g * x);
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::Div { a, b } => {
                let bv = self.value(*b).data();
                if self.needs(*a) {
                    let da = zip_map(d_out, bv, |g, y| g / y);
                    self.accumulate(grads, *a, &da);
                }
                if self.needs(*b) {
                    let out = self.nodes[idx].value.data();
                    let db: Vec<E> = d_out
                        .iter()
                        .zip(out.iter().zip(bv))
                        .map(|(&g, (&o, &y))| -g * o / y)
                        .collect();
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::Scale { a, c } => {
                if self.needs(*a) {
                    let da: Vec<E> = d_out.iter().map(|&g| g * *c).collect();
                    self.accumulate(grads, *a, &da);
                }
            }
            Op::AddScalar { a } => {
                self.accumulate(grads, *a, d_out);
            }
            Op::Sum { a } => {
                if self.needs(*a) {
                    let da = vec![d_out[0]; self.value(*a).numel()];
                    self.accumulate(grads, *a, &da);
                }
            }
            Op::Mean { a } => {
                if self.needs(*a) {
                    let n = self.value(*a).numel();
                    let g = d_out[0] / E::from_f64(n as f64);
                    let da = vec![g; n];
                    self.accumulate(grads, *a, &da);
                }
            }
            Op::Reshape { a } => {
                self.accumulate(grads, *a, d_out);
            }
            Op::SliceCols {
                a,
                start,
                len,
                rows,
                cols,
            } => {
                if self.needs(*a) {
                    let mut da = vec![E::zero(); rows * cols];
                    for r in 0..*rows {
                        for j in 0..*len {
                            da[r * cols + start + j] = d_out[r * len + j];
                        }
                    }
                    self.accumulate(grads, *a, &da);
                }
            }
            Op::ConcatCols { parts, rows } => {
                let total: usize = parts.iter().map(|&(_, c)| c).sum();
                let mut offset = 0;
                for &(v, c) in parts {
                    if self.needs(v) {
                        let mut dv = vec![E::zero(); rows * c];
                        for r in 0..*rows {
                            dv[r * c..(r + 1) * c]
                                .copy_from_slice(&d_out[r * total + offset..r * total + offset + c]);
                        }
                        self.accumulate(grads, v, &dv);
                    }
                    offset += c;
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                rows,
                cols,
                mean,
                rstd,
            } => {
                let xv = self.value(*x).data();
                let g = self.value(*gamma).data();
                let ncols = E::from_f64(*cols as f64);
                let mut dx = vec![E::zero(); rows * cols];
                let mut dgamma = vec![E::zero(); *cols];
                let mut dbeta = vec![E::zero(); *cols];
                for r in 0..*rows {
                    let m = mean[r];
                    let rs = rstd[r];
                    let row = &xv[r * cols..(r + 1) * cols];
                    let gr = &d_out[r * cols..(r + 1) * cols];
                    let mut sum_dxhat = E::zero();
                    let mut sum_dxhat_xhat = E::zero();
                    for j in 0..*cols {
                        let xhat = (row[j] - m) * rs;
                        let dxhat = gr[j] * g[j];
                        sum_dxhat = sum_dxhat + dxhat;
                        sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                        dgamma[j] = dgamma[j] + gr[j] * xhat;
                        dbeta[j] = dbeta[j] + gr[j];
                    }
                    for j in 0..*cols {
                        let xhat = (row[j] - m) * rs;
                        let dxhat = gr[j] * g[j];
                        dx[r * cols + j] =
                            rs * (dxhat - sum_dxhat / ncols - xhat * sum_dxhat_xhat / ncols);
                    }
                }
                if self.needs(*x) {
                    self.accumulate(grads, *x, &dx);
                }
                if self.needs(*gamma) {
                    self.accumulate(grads, *gamma, &dgamma);
                }
                if self.needs(*beta) {
                    self.accumulate(grads, *beta, &dbeta);
                }
            }
            Op::Softmax { x, rows, cols } => {
                if self.needs(*x) {
                    let y = self.nodes[idx].value.data();
                    let mut dx = vec![E::zero(); rows * cols];
                    for r in 0..*rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &d_out[r * cols..(r + 1) * cols];
                        let dot = yr
                            .iter()
                            .zip(gr)
                            .fold(E::zero(), |a, (&yi, &gi)| a + yi * gi);
                        for j in 0..*cols {
                            dx[r * cols + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    self.accumulate(grads, *x, &dx);
                }
            }
            Op::Act { x, kind, beta } => {
                if self.needs(*x) {
                    let xv = self.value(*x).data();
                    let dx: Vec<E> = d_out
                        .iter()
                        .zip(xv)
                        .map(|(&g, &v)| g * activation_derivative(*kind, v, *beta))
                        .collect();
                    self.accumulate(grads, *x, &dx);
                }
            }
            Op::ConvT2d {
                x,
                kernel,
                b,
                c_in,
                h,
                w,
                c_out,
                ksize,
                stride,
                padding,
            } => {
                if self.needs(*x) {
                    let dx = kernels::conv_transpose2d_grad_input(
                        d_out,
                        self.value(*kernel).data(),
                        *b,
                        *c_in,
                        *h,
                        *w,
                        *c_out,
                        *ksize,
                        *stride,
                        *padding,
                    );
                    self.accumulate(grads, *x, &dx);
                }
                if self.needs(*kernel) {
                    let dk = kernels::conv_transpose2d_grad_kernel(
                        d_out,
                        self.value(*x).data(),
                        *b,
                        *c_in,
                        *h,
                        *w,
                        *c_out,
                        *ksize,
                        *stride,
                        *padding,
                    );
                    self.accumulate(grads, *kernel, &dk);
                }
            }
            Op::ChannelBias { x, bias, b, c, hw } => {
                self.accumulate(grads, *x, d_out);
                if self.needs(*bias) {
                    let mut db = vec![E::zero(); *c];
                    for bi in 0..*b {
                        for ci in 0..*c {
                            let base = (bi * c + ci) * hw;
                            for p in 0..*hw {
                                db[ci] = db[ci] + d_out[base + p];
                            }
                        }
                    }
                    self.accumulate(grads, *bias, &db);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                b,
                c,
                hw,
                mean,
                rstd,
                train,
            } => {
                let xv = self.value(*x).data();
                let g = self.value(*gamma).data();
                let n = b * hw;
                let nf = E::from_f64(n as f64);
                let mut dgamma = vec![E::zero(); *c];
                let mut dbeta = vec![E::zero(); *c];
                let mut dx = vec![E::zero(); xv.len()];
                for ci in 0..*c {
                    let m = mean[ci];
                    let rs = rstd[ci];
                    let mut sum_g = E::zero();
                    let mut sum_g_xhat = E::zero();
                    for bi in 0..*b {
                        let base = (bi * c + ci) * hw;
                        for p in 0..*hw {
                            let xhat = (xv[base + p] - m) * rs;
                            let gr = d_out[base + p];
                            sum_g = sum_g + gr;
                            sum_g_xhat = sum_g_xhat + gr * xhat;
                        }
                    }
                    dgamma[ci] = sum_g_xhat;
                    dbeta[ci] = sum_g;
                    let scale = g[ci] * rs;
                    for bi in 0..*b {
                        let base = (bi * c + ci) * hw;
                        for p in 0..*hw {
                            let gr = d_out[base + p];
                            dx[base + p] = if *train {
                                let xhat = (xv[base + p] - m) * rs;
                                scale * (gr - sum_g / nf - xhat * sum_g_xhat / nf)
                            } else {
                                scale * gr
                            };
                        }
                    }
                }
                if self.needs(*x) {
                    self.accumulate(grads, *x, &dx);
                }
                if self.needs(*gamma) {
                    self.accumulate(grads, *gamma, &dgamma);
                }
                if self.needs(*beta) {
                    self.accumulate(grads, *beta, &dbeta);
                }
            }
            Op::WindowBlur {
                x,
                win,
                planes,
                h,
                w,
                k,
            } => {
                if self.needs(*x) {
                    let dx =
                        kernels::window_correlate_valid_grad(d_out, win, *planes, *h, *w, *k);
                    self.accumulate(grads, *x, &dx);
                }
            }
            Op::MixtureNll {
                weights,
                means,
                sigmas,
                targets,
                rows,
                k,
                d,
                density_ratio,
            } => {
                let wv = self.value(*weights).data();
                let mv = self.value(*means).data();
                let sv = self.value(*sigmas).data();
                let yv = self.value(*targets).data();
                let (rows, k, d) = (*rows, *k, *d);
                let mut dw = vec![E::zero(); rows * k];
                let mut dmu = vec![E::zero(); rows * k * d];
                let mut dsg = vec![E::zero(); rows * k * d];
                let mut dy = vec![E::zero(); rows * d];
                for r in 0..rows {
                    let gr = d_out[r];
                    if gr == E::zero() {
                        continue;
                    }
                    for ki in 0..k {
                        let q = density_ratio[r * k + ki];
                        dw[r * k + ki] = -gr * q;
                        let resp = wv[r * k + ki] * q;
                        let base = (r * k + ki) * d;
                        for j in 0..d {
                            let s = sv[base + j];
                            let diff = yv[r * d + j] - mv[base + j];
                            let inv_var = (s * s).recip();
                            dmu[base + j] = -gr * resp * diff * inv_var;
                            dsg[base + j] = gr * resp * (s.recip() - diff * diff * inv_var / s);
                            dy[r * d + j] = dy[r * d + j] + gr * resp * diff * inv_var;
                        }
                    }
                }
                if self.needs(*weights) {
                    self.accumulate(grads, *weights, &dw);
                }
                if self.needs(*means) {
                    self.accumulate(grads, *means, &dmu);
                }
                if self.needs(*sigmas) {
                    self.accumulate(grads, *sigmas, &dsg);
                }
                if self.needs(*targets) {
                    self.accumulate(grads, *targets, &dy);
                }
            }
        }
    }
}

fn zip_map<E: Element>(a: &[E], b: &[E], f: impl Fn(E, E) -> E) -> Vec<E> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn activation_forward<E: Element>(kind: Activation, x: E, beta: E) -> E {
    match kind {
        Activation::Gelu => {
            // exact form: x * Phi(x) with Phi from erf
            let half = E::from_f64(0.5);
            let inv_sqrt2 = E::from_f64(std::f64::consts::FRAC_1_SQRT_2);
            x * half * (E::one() + (x * inv_sqrt2).erf())
        }
        Activation::Softplus => {
            let bx = beta * x;
            // log(1 + exp(bx)) without overflow
            bx.max(E::zero()) + (-(bx.abs())).exp().ln_1p()
        }
        Activation::Tanh => x.tanh(),
        Activation::Relu => x.max(E::zero()),
    }
}

fn activation_derivative<E: Element>(kind: Activation, x: E, beta: E) -> E {
    match kind {
        Activation::Gelu => {
            let half = E::from_f64(0.5);
            let inv_sqrt2 = E::from_f64(std::f64::consts::FRAC_1_SQRT_2);
            let inv_sqrt_2pi = E::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
            let phi_cdf = half * (E::one() + (x * inv_sqrt2).erf());
            let phi_pdf = inv_sqrt_2pi * (-(x * x) * half).exp();
            phi_cdf + x * phi_pdf
        }
        Activation::Softplus => {
            let bx = beta * x;
            beta * sigmoid(bx)
        }
        Activation::Tanh => {
            let t = x.tanh();
            E::one() - t * t
        }
        Activation::Relu => {
            if x > E::zero() {
                E::one()
            } else {
                E::zero()
            }
        }
    }
}

fn sigmoid<E: Element>(x: E) -> E {
    if x >= E::zero() {
        (E::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (E::one() + e)
    }
}
