//! Recording graph for reverse-mode automatic differentiation.
//!
//! Every operation validates shapes, computes its result eagerly, and appends
//! itself to the tape when at least one input requires gradients. `backward`
//! replays the tape in reverse, accumulating vector-Jacobian products into the
//! persistent `grad` buffer of every requires-grad node. Repeated backward
//! calls keep accumulating until [`Graph::zero_grads`] is called.
//!
//! Broadcasting is deliberately restricted: bias addition inside `conv2d` and
//! `linear`, and multiplication by a scalar constant in `scale`. All other
//! binary ops require exactly equal shapes.

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Clone, Copy)]
struct ConvDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    h_out: usize,
    w_out: usize,
}

#[derive(Debug)]
enum Op {
    Conv2d {
        input: usize,
        kernel: usize,
        bias: usize,
        out: usize,
        dims: ConvDims,
    },
    Relu {
        x: usize,
        out: usize,
    },
    Sigmoid {
        x: usize,
        out: usize,
    },
    Softmax {
        x: usize,
        out: usize,
        rows: usize,
        cols: usize,
    },
    MaxPool2 {
        x: usize,
        out: usize,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        x: usize,
        out: usize,
        spatial: usize,
    },
    Linear {
        x: usize,
        weight: usize,
        bias: usize,
        out: usize,
        n: usize,
        c: usize,
        k: usize,
    },
    UpsampleNearest {
        x: usize,
        out: usize,
        factor: usize,
    },
    Reshape {
        x: usize,
        out: usize,
    },
    Add {
        a: usize,
        b: usize,
        out: usize,
    },
    Sub {
        a: usize,
        b: usize,
        out: usize,
    },
    Mul {
        a: usize,
        b: usize,
        out: usize,
    },
    Scale {
        x: usize,
        c: f64,
        out: usize,
    },
    AddConst {
        x: usize,
        out: usize,
    },
    MaxConst {
        x: usize,
        c: f64,
        out: usize,
    },
    SumAll {
        x: usize,
        out: usize,
    },
    SumRows {
        x: usize,
        out: usize,
        rows: usize,
        cols: usize,
    },
    DivElem {
        num: usize,
        den: usize,
        out: usize,
    },
    Gather {
        x: usize,
        idx: Vec<(usize, usize)>,
        out: usize,
        cols: usize,
    },
    LogClamped {
        x: usize,
        eps: f64,
        out: usize,
    },
}

/// Wengert tape: nodes in creation order, recorded ops in forward order.
/// Confined to a single thread; independent evaluations use separate graphs.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Tensor>,
    ops: Vec<Op>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// Insert a leaf node. Gradient participation follows the tensor's
    /// `requires_grad` flag.
    pub fn insert(&mut self, t: Tensor) -> TensorId {
        let id = self.nodes.len();
        self.nodes.push(t);
        TensorId(id)
    }

    /// Leaf that participates in gradients.
    pub fn param(&mut self, t: &Tensor) -> TensorId {
        self.insert(t.clone().with_requires_grad())
    }

    /// Leaf treated as a constant: no gradient ever flows into it.
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<TensorId> {
        Ok(self.insert(Tensor::new(shape, values)?))
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0]
    }

    pub fn values(&self, id: TensorId) -> &[f64] {
        self.nodes[id.0].values()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].shape()
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad()
    }

    pub fn item(&self, id: TensorId) -> Result<f64> {
        self.nodes[id.0].item()
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.zero_grad();
        }
    }

    fn push_result(&mut self, shape: Vec<usize>, values: Vec<f64>, needs_grad: bool) -> TensorId {
        let n = numel(&shape);
        debug_assert_eq!(n, values.len());
        let mut t = Tensor::zeros(shape);
        t.values_mut().copy_from_slice(&values);
        t.requires_grad = needs_grad;
        let id = self.nodes.len();
        self.nodes.push(t);
        TensorId(id)
    }

    fn needs(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad())
    }

    // ── op constructors ──────────────────────────────────────────────

    /// 2-D cross-correlation over NCHW input with an FCKK kernel and a
    /// per-filter bias, `H' = (H + 2·padding − kh) / stride + 1`.
    pub fn conv2d(
        &mut self,
        input: TensorId,
        kernel: TensorId,
        bias: TensorId,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId> {
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        let ishape = self.shape(input).to_vec();
        let kshape = self.shape(kernel).to_vec();
        let bshape = self.shape(bias).to_vec();
        if ishape.len() != 4 || kshape.len() != 4 || bshape.len() != 1 {
            return Err(Error::Dimension(format!(
                "conv2d wants input[N,C,H,W] kernel[F,C,kh,kw] bias[F], got {ishape:?} {kshape:?} {bshape:?}"
            )));
        }
        let (n, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        let (f, kc, kh, kw) = (kshape[0], kshape[1], kshape[2], kshape[3]);
        if kc != c {
            return Err(Error::Dimension(format!(
                "conv2d channel mismatch: input has {c}, kernel expects {kc}"
            )));
        }
        if bshape[0] != f {
            return Err(Error::Dimension(format!(
                "conv2d bias length {} != filter count {f}",
                bshape[0]
            )));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::Dimension(format!(
                "conv2d kernel {kh}x{kw} exceeds padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let h_out = (h + 2 * padding - kh) / stride + 1;
        let w_out = (w + 2 * padding - kw) / stride + 1;
        let dims = ConvDims {
            n,
            c,
            h,
            w,
            f,
            kh,
            kw,
            stride,
            padding,
            h_out,
            w_out,
        };
        let out_vals = conv2d_forward(
            self.values(input),
            self.values(kernel),
            self.values(bias),
            &dims,
        );
        let needs = self.needs(&[input, kernel, bias]);
        let out = self.push_result(vec![n, f, h_out, w_out], out_vals, needs);
        if needs {
            self.ops.push(Op::Conv2d {
                input: input.0,
                kernel: kernel.0,
                bias: bias.0,
                out: out.0,
                dims,
            });
        }
        Ok(out)
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        let vals: Vec<f64> = self.values(x).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(&[x]);
        let out = self.push_result(shape, vals, needs);
        if needs {
            self.ops.push(Op::Relu { x: x.0, out: out.0 });
        }
        Ok(out)
    }

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId> {
        let vals: Vec<f64> = self.values(x).iter().map(|&v| sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(&[x]);
        let out = self.push_result(shape, vals, needs);
        if needs {
            self.ops.push(Op::Sigmoid { x: x.0, out: out.0 });
        }
        Ok(out)
    }

    /// Row-wise softmax over a [N, n] tensor, computed with max subtraction.
    pub fn softmax(&mut self, x: TensorId) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[1] < 2 {
            return Err(Error::Dimension(format!(
                "softmax wants [N,n] with n >= 2, got {shape:?}"
            )));
        }
        let (rows, cols) = (shape[0], shape[1]);
        let xv = self.values(x);
        let mut vals = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                vals[r * cols + j] = e;
                sum += e;
            }
            for j in 0..cols {
                vals[r * cols + j] /= sum;
            }
        }
        let needs = self.needs(&[x]);
        let out = self.push_result(shape, vals, needs);
        if needs {
            self.ops.push(Op::Softmax {
                x: x.0,
                out: out.0,
                rows,
                cols,
            });
        }
        Ok(out)
    }

    /// 2x2 max pooling with stride 2; ties resolve to the first maximum in
    /// row-major scan order so results are deterministic.
    pub fn max_pool2(&mut self, x: TensorId) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::Dimension(format!(
                "max_pool2 wants [N,C,H,W], got {shape:?}"
            )));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Dimension(format!(
                "max_pool2 wants even spatial dims, got {h}x{w}"
            )));
        }
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.values(x);
        let mut vals = vec![0.0; n * c * ho * wo];
        let mut argmax = vec![0usize; n * c * ho * wo];
        for p in 0..n * c {
            let base = p * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best_idx = base + (2 * oy) * w + 2 * ox;
                    let mut best = xv[best_idx];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xv[idx] > best {
                            best = xv[idx];
                            best_idx = idx;
                        }
                    }
                    let o = p * ho * wo + oy * wo + ox;
                    vals[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        let needs = self.needs(&[x]);
        let out = self.push_result(vec![n, c, ho, wo], vals, needs);
        if needs {
            self.ops.push(Op::MaxPool2 {
                x: x.0,
                out: out.0,
                argmax,
            });
        }
        Ok(out)
    }

    /// Mean over the spatial dims: [N,C,H,W] -> [N,C].
    pub fn global_avg_pool(&mut self, x: TensorId) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::Dimension(format!(
                "global_avg_pool wants [N,C,H,W], got {shape:?}"
            )));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let spatial = h * w;
        let xv = self.values(x);
        let mut vals = vec![0.0; n * c];
        for p in 0..n * c {
            let mut s = 0.0;
            for i in 0..spatial {
                s += xv[p * spatial + i];
            }
            vals[p] = s / spatial as f64;
        }
        let needs = self.needs(&[x]);
        let out = self.push_result(vec![n, c], vals, needs);
        if needs {
            self.ops.push(Op::GlobalAvgPool {
                x: x.0,
                out: out.0,
                spatial,
            });
        }
        Ok(out)
    }

    /// Fully connected layer: x[N,C] · weight[K,C]^T + bias[K] -> [N,K].
    pub fn linear(&mut self, x: TensorId, weight: TensorId, bias: TensorId) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[1] || bs[0] != ws[0] {
            return Err(Error::Dimension(format!(
                "linear wants x[N,C] w[K,C] b[K], got {xs:?} {ws:?} {bs:?}"
            )));
        }
        let (n, c, k) = (xs[0], xs[1], ws[0]);
        let xv = self.values(x);
        let wv = self.values(weight);
        let bv = self.values(bias);
        let mut vals = vec![0.0; n * k];
        for i in 0..n {
            for j in 0..k {
                let mut s = bv[j];
                for l in 0..c {
                    s += xv[i * c + l] * wv[j * c + l];
                }
                vals[i * k + j] = s;
            }
        }
        let needs = self.needs(&[x, weight, bias]);
        let out = self.push_result(vec![n, k], vals, needs);
        if needs {
            self.ops.push(Op::Linear {
                x: x.0,
                weight: weight.0,
                bias: bias.0,
                out: out.0,
                n,
                c,
                k,
            });
        }
        Ok(out)
    }

    /// Nearest-neighbor upsampling of [N,C,h,w] by an integer factor; values
    /// are replicated exactly.
    pub fn upsample_nearest(&mut self, x: TensorId, factor: usize) -> Result<TensorId> {
        if factor == 0 {
            return Err(Error::Dimension("upsample factor must be positive".into()));
        }
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::Dimension(format!(
                "upsample_nearest wants [N,C,h,w], got {shape:?}"
            )));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let (ho, wo) = (h * factor, w * factor);
        let xv = self.values(x);
        let mut vals = vec![0.0; n * c * ho * wo];
        for p in 0..n * c {
            for y in 0..ho {
                for xo in 0..wo {
                    vals[p * ho * wo + y * wo + xo] = xv[p * h * w + (y / factor) * w + xo / factor];
                }
            }
        }
        let needs = self.needs(&[x]);
        let out = self.push_result(vec![n, c, ho, wo], vals, needs);
        if needs {
            self.ops.push(Op::UpsampleNearest {
                x: x.0,
                out: out.0,
                factor,
            });
        }
        Ok(out)
    }

    /// View with a new shape of identical element count.
    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        if numel(&shape) != self.values(x).len() {
            return Err(Error::Dimension(format!(
                "reshape {:?} -> {shape:?} changes element count",
                self.shape(x)
            )));
        }
        let vals = self.values(x).to_vec();
        let needs = self.needs(&[x]);
        let out = self.push_result(shape, vals, needs);
        if needs {
            self.ops.push(Op::Reshape { x: x.0, out: out.0 });
        }
        Ok(out)
    }

    fn binary_shapes(&self, a: TensorId, b: TensorId, what: &str) -> Result<Vec<usize>> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(Error::Dimension(format!(
                "{what} wants equal shapes, got {sa:?} vs {sb:?}"
            )));
        }
        Ok(sa.to_vec())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let shape = self.binary_shapes(a, b, "add")?;
        let vals: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.needs(&[a, b]);
        let out = self.push_result(shape, vals, needs);
        if needs {
            self.ops.push(Op::Add {
                a: a.0,
                b: b.0,
                out: out.0,
            });
        }
        Ok(out)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let shape = self.binary_shapes(a, b, "sub")?;
        let vals: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x - y)
            .collect();
        let needs = self.needs(&[a, b]);
        let out = self.push_result(shape, vals, needs);
        if needs {
            self.ops.push(Op::Sub {
                a: a.0,
                b: b.0,
                out: out.0,
            });
        }
        Ok(out)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let shape = self.binary_shapes(a, b, "mul")?;
        let vals: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x * y)
            .collect();
        let needs = self.needs(&[a, b]);
        let out = self.push_result(shape, vals, needs);
        if needs {
            self.ops.push(Op::Mul {
                a: a.0,
                b: b.0,
                out: out.0,
            });
        }
        Ok(out)
    }

    /// Multiply by a scalar constant.
    pub fn scale(&mut self, x: TensorId, c: f64) -> Result<TensorId> {
        let vals: Vec<f64> = self.values(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(&[x]);
        let out = self.push_result(shape, vals, needs);
        if needs {
            self.ops.push(Op::Scale {
                x: x.0,
                c,
                out: out.0,
            });
        }
        Ok(out)
    }

    /// Add a scalar constant to every entry.
    pub fn add_const(&mut self, x: TensorId, c: f64) -> Result<TensorId> {
        let vals: Vec<f64> = self.values(x).iter().map(|v| v + c).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(&[x]);
        let out = self.push_result(shape, vals, needs);
        if needs {
            self.ops.push(Op::AddConst { x: x.0, out: out.0 });
        }
        Ok(out)
    }

    /// max(x, c) elementwise; used to guard ratio denominators. Gradient
    /// passes through only where x > c.
    pub fn max_const(&mut self, x: TensorId, c: f64) -> Result<TensorId> {
        let vals: Vec<f64> = self.values(x).iter().map(|v| v.max(c)).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(&[x]);
        let out = self.push_result(shape, vals, needs);
        if needs {
            self.ops.push(Op::MaxConst {
                x: x.0,
                c,
                out: out.0,
            });
        }
        Ok(out)
    }

    /// Sum of every entry -> scalar.
    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId> {
        let s: f64 = self.values(x).iter().sum();
        let needs = self.needs(&[x]);
        let out = self.push_result(vec![1], vec![s], needs);
        if needs {
            self.ops.push(Op::SumAll { x: x.0, out: out.0 });
        }
        Ok(out)
    }

    /// Per-row sum of a [N,M] tensor -> [N].
    pub fn sum_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(Error::Dimension(format!(
                "sum_rows wants [N,M], got {shape:?}"
            )));
        }
        let (rows, cols) = (shape[0], shape[1]);
        let xv = self.values(x);
        let vals: Vec<f64> = (0..rows)
            .map(|r| xv[r * cols..(r + 1) * cols].iter().sum())
            .collect();
        let needs = self.needs(&[x]);
        let out = self.push_result(vec![rows], vals, needs);
        if needs {
            self.ops.push(Op::SumRows {
                x: x.0,
                out: out.0,
                rows,
                cols,
            });
        }
        Ok(out)
    }

    /// Elementwise division; caller guards the denominator (an epsilon is
    /// folded in upstream wherever zero is reachable).
    pub fn div_elem(&mut self, num: TensorId, den: TensorId) -> Result<TensorId> {
        let shape = self.binary_shapes(num, den, "div_elem")?;
        let vals: Vec<f64> = self
            .values(num)
            .iter()
            .zip(self.values(den))
            .map(|(x, y)| x / y)
            .collect();
        let needs = self.needs(&[num, den]);
        let out = self.push_result(shape, vals, needs);
        if needs {
            self.ops.push(Op::DivElem {
                num: num.0,
                den: den.0,
                out: out.0,
            });
        }
        Ok(out)
    }

    /// Pick entries (row, col) from a [N,M] tensor -> [K].
    pub fn gather(&mut self, x: TensorId, idx: Vec<(usize, usize)>) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(Error::Dimension(format!(
                "gather wants [N,M], got {shape:?}"
            )));
        }
        if idx.is_empty() {
            return Err(Error::Usage("gather with no indices".into()));
        }
        let (rows, cols) = (shape[0], shape[1]);
        for &(r, c) in &idx {
            if r >= rows || c >= cols {
                return Err(Error::Dimension(format!(
                    "gather index ({r},{c}) out of bounds for [{rows},{cols}]"
                )));
            }
        }
        let xv = self.values(x);
        let vals: Vec<f64> = idx.iter().map(|&(r, c)| xv[r * cols + c]).collect();
        let needs = self.needs(&[x]);
        let out = self.push_result(vec![idx.len()], vals, needs);
        if needs {
            self.ops.push(Op::Gather {
                x: x.0,
                idx,
                out: out.0,
                cols,
            });
        }
        Ok(out)
    }

    /// ln(max(x, eps)) elementwise; gradient is 1/x above the clamp and 0
    /// below it.
    pub fn log_clamped(&mut self, x: TensorId, eps: f64) -> Result<TensorId> {
        if eps <= 0.0 {
            return Err(Error::Config("log_clamped eps must be positive".into()));
        }
        let vals: Vec<f64> = self.values(x).iter().map(|&v| v.max(eps).ln()).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(&[x]);
        let out = self.push_result(shape, vals, needs);
        if needs {
            self.ops.push(Op::LogClamped {
                x: x.0,
                eps,
                out: out.0,
            });
        }
        Ok(out)
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse-mode pass from a scalar root. Adds this pass's contributions
    /// into the persistent grad buffers of every requires-grad node reached.
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        if self.nodes[root.0].numel() != 1 {
            return Err(Error::Usage(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].shape()
            )));
        }
        let mut tg: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        tg[root.0] = Some(vec![1.0]);
        for op in self.ops.iter().rev() {
            backward_op(op, &self.nodes, &mut tg);
        }
        for (i, g) in tg.into_iter().enumerate() {
            if let Some(g) = g {
                if self.nodes[i].requires_grad() {
                    self.nodes[i].accumulate_grad(&g);
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn conv2d_forward(input: &[f64], kernel: &[f64], bias: &[f64], d: &ConvDims) -> Vec<f64> {
    let mut out = vec![0.0; d.n * d.f * d.h_out * d.w_out];
    for n in 0..d.n {
        for f in 0..d.f {
            let out_base = (n * d.f + f) * d.h_out * d.w_out;
            out[out_base..out_base + d.h_out * d.w_out].fill(bias[f]);
            for c in 0..d.c {
                let in_base = (n * d.c + c) * d.h * d.w;
                for kh in 0..d.kh {
                    for kw in 0..d.kw {
                        let kval = kernel[((f * d.c + c) * d.kh + kh) * d.kw + kw];
                        let (ho_lo, ho_hi) = taps(d.h_out, d.h, d.stride, d.padding, kh);
                        let (wo_lo, wo_hi) = taps(d.w_out, d.w, d.stride, d.padding, kw);
                        for ho in ho_lo..ho_hi {
                            let ih = ho * d.stride + kh - d.padding;
                            let row = in_base + ih * d.w;
                            let orow = out_base + ho * d.w_out;
                            for wo in wo_lo..wo_hi {
                                let iw = wo * d.stride + kw - d.padding;
                                out[orow + wo] += kval * input[row + iw];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Output-coordinate range [lo, hi) for which `o*stride + k - padding` lands
/// inside [0, extent).
fn taps(out_extent: usize, extent: usize, stride: usize, padding: usize, k: usize) -> (usize, usize) {
    let lo = if k >= padding {
        0
    } else {
        (padding - k).div_ceil(stride)
    };
    // largest o with o*stride + k - padding <= extent-1
    let hi = if extent + padding < k + 1 {
        0
    } else {
        ((extent + padding - k - 1) / stride + 1).min(out_extent)
    };
    (lo.min(hi), hi)
}

fn conv2d_backward(
    g: &[f64],
    input: &[f64],
    kernel: &[f64],
    d: &ConvDims,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut d_input = vec![0.0; d.n * d.c * d.h * d.w];
    let mut d_kernel = vec![0.0; d.f * d.c * d.kh * d.kw];
    let mut d_bias = vec![0.0; d.f];
    for n in 0..d.n {
        for f in 0..d.f {
            let out_base = (n * d.f + f) * d.h_out * d.w_out;
            for v in &g[out_base..out_base + d.h_out * d.w_out] {
                d_bias[f] += v;
            }
            for c in 0..d.c {
                let in_base = (n * d.c + c) * d.h * d.w;
                for kh in 0..d.kh {
                    for kw in 0..d.kw {
                        let kidx = ((f * d.c + c) * d.kh + kh) * d.kw + kw;
                        let kval = kernel[kidx];
                        let mut kacc = 0.0;
                        let (ho_lo, ho_hi) = taps(d.h_out, d.h, d.stride, d.padding, kh);
                        let (wo_lo, wo_hi) = taps(d.w_out, d.w, d.stride, d.padding, kw);
                        for ho in ho_lo..ho_hi {
                            let ih = ho * d.stride + kh - d.padding;
                            let row = in_base + ih * d.w;
                            let orow = out_base + ho * d.w_out;
                            for wo in wo_lo..wo_hi {
                                let iw = wo * d.stride + kw - d.padding;
                                let gv = g[orow + wo];
                                kacc += gv * input[row + iw];
                                d_input[row + iw] += gv * kval;
                            }
                        }
                        d_kernel[kidx] += kacc;
                    }
                }
            }
        }
    }
    (d_input, d_kernel, d_bias)
}

fn backward_op(op: &Op, nodes: &[Tensor], tg: &mut [Option<Vec<f64>>]) {
    macro_rules! out_grad {
        ($out:expr) => {
            match &tg[*$out] {
                Some(g) => g.clone(),
                None => return,
            }
        };
    }
    fn acc(tg: &mut [Option<Vec<f64>>], nodes: &[Tensor], id: usize, g: &[f64]) {
        if !nodes[id].requires_grad() {
            return;
        }
        match &mut tg[id] {
            Some(existing) => {
                for (e, gi) in existing.iter_mut().zip(g) {
                    *e += gi;
                }
            }
            None => tg[id] = Some(g.to_vec()),
        }
    }

    match op {
        Op::Conv2d {
            input,
            kernel,
            bias,
            out,
            dims,
        } => {
            let g = out_grad!(out);
            let (di, dk, db) = conv2d_backward(&g, nodes[*input].values(), nodes[*kernel].values(), dims);
            acc(tg, nodes, *input, &di);
            acc(tg, nodes, *kernel, &dk);
            acc(tg, nodes, *bias, &db);
        }
        Op::Relu { x, out } => {
            let g = out_grad!(out);
            let xv = nodes[*x].values();
            let d: Vec<f64> = g
                .iter()
                .zip(xv)
                .map(|(gi, &v)| if v > 0.0 { *gi } else { 0.0 })
                .collect();
            acc(tg, nodes, *x, &d);
        }
        Op::Sigmoid { x, out } => {
            let g = out_grad!(out);
            let yv = nodes[*out].values();
            let d: Vec<f64> = g.iter().zip(yv).map(|(gi, &y)| gi * y * (1.0 - y)).collect();
            acc(tg, nodes, *x, &d);
        }
        Op::Softmax { x, out, rows, cols } => {
            let g = out_grad!(out);
            let yv = nodes[*out].values();
            let mut d = vec![0.0; rows * cols];
            for r in 0..*rows {
                let base = r * cols;
                let mut dot = 0.0;
                for j in 0..*cols {
                    dot += g[base + j] * yv[base + j];
                }
                for j in 0..*cols {
                    d[base + j] = yv[base + j] * (g[base + j] - dot);
                }
            }
            acc(tg, nodes, *x, &d);
        }
        Op::MaxPool2 { x, out, argmax } => {
            let g = out_grad!(out);
            let mut d = vec![0.0; nodes[*x].numel()];
            for (o, &src) in argmax.iter().enumerate() {
                d[src] += g[o];
            }
            acc(tg, nodes, *x, &d);
        }
        Op::GlobalAvgPool { x, out, spatial } => {
            let g = out_grad!(out);
            let inv = 1.0 / *spatial as f64;
            let mut d = vec![0.0; nodes[*x].numel()];
            for (p, gv) in g.iter().enumerate() {
                let share = gv * inv;
                for i in 0..*spatial {
                    d[p * spatial + i] = share;
                }
            }
            acc(tg, nodes, *x, &d);
        }
        Op::Linear {
            x,
            weight,
            bias,
            out,
            n,
            c,
            k,
        } => {
            let g = out_grad!(out);
            let xv = nodes[*x].values();
            let wv = nodes[*weight].values();
            let mut dx = vec![0.0; n * c];
            let mut dw = vec![0.0; k * c];
            let mut db = vec![0.0; *k];
            for i in 0..*n {
                for j in 0..*k {
                    let gv = g[i * k + j];
                    db[j] += gv;
                    for l in 0..*c {
                        dx[i * c + l] += gv * wv[j * c + l];
                        dw[j * c + l] += gv * xv[i * c + l];
                    }
                }
            }
            acc(tg, nodes, *x, &dx);
            acc(tg, nodes, *weight, &dw);
            acc(tg, nodes, *bias, &db);
        }
        Op::UpsampleNearest { x, out, factor } => {
            let g = out_grad!(out);
            let shape = nodes[*x].shape();
            let (planes, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
            let (ho, wo) = (h * factor, w * factor);
            let mut d = vec![0.0; nodes[*x].numel()];
            for p in 0..planes {
                for y in 0..ho {
                    for xo in 0..wo {
                        d[p * h * w + (y / factor) * w + xo / factor] +=
                            g[p * ho * wo + y * wo + xo];
                    }
                }
            }
            acc(tg, nodes, *x, &d);
        }
        Op::Reshape { x, out } => {
            let g = out_grad!(out);
            acc(tg, nodes, *x, &g);
        }
        Op::Add { a, b, out } => {
            let g = out_grad!(out);
            acc(tg, nodes, *a, &g);
            acc(tg, nodes, *b, &g);
        }
        Op::Sub { a, b, out } => {
            let g = out_grad!(out);
            acc(tg, nodes, *a, &g);
            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
            acc(tg, nodes, *b, &neg);
        }
        Op::Mul { a, b, out } => {
            let g = out_grad!(out);
            let av = nodes[*a].values();
            let bv = nodes[*b].values();
            let da: Vec<f64> = g.iter().zip(bv).map(|(gi, &v)| gi * v).collect();
            let db: Vec<f64> = g.iter().zip(av).map(|(gi, &v)| gi * v).collect();
            acc(tg, nodes, *a, &da);
            acc(tg, nodes, *b, &db);
        }
        Op::Scale { x, c, out } => {
            let g = out_grad!(out);
            let d: Vec<f64> = g.iter().map(|gi| gi * c).collect();
            acc(tg, nodes, *x, &d);
        }
        Op::AddConst { x, out } => {
            let g = out_grad!(out);
            acc(tg, nodes, *x, &g);
        }
        Op::MaxConst { x, c, out } => {
            let g = out_grad!(out);
            let xv = nodes[*x].values();
            let d: Vec<f64> = g
                .iter()
                .zip(xv)
                .map(|(gi, &v)| if v > *c { *gi } else { 0.0 })
                .collect();
            acc(tg, nodes, *x, &d);
        }
        Op::SumAll { x, out } => {
            let g = out_grad!(out);
            let d = vec![g[0]; nodes[*x].numel()];
            acc(tg, nodes, *x, &d);
        }
        Op::SumRows { x, out, rows, cols } => {
            let g = out_grad!(out);
            let mut d = vec![0.0; rows * cols];
            for r in 0..*rows {
                for j in 0..*cols {
                    d[r * cols + j] = g[r];
                }
            }
            acc(tg, nodes, *x, &d);
        }
        Op::DivElem { num, den, out } => {
            let g = out_grad!(out);
            let nv = nodes[*num].values();
            let dv = nodes[*den].values();
            let dn: Vec<f64> = g.iter().zip(dv).map(|(gi, &d)| gi / d).collect();
            let dd: Vec<f64> = g
                .iter()
                .zip(nv.iter().zip(dv))
                .map(|(gi, (&n, &d))| -gi * n / (d * d))
                .collect();
            acc(tg, nodes, *num, &dn);
            acc(tg, nodes, *den, &dd);
        }
        Op::Gather { x, idx, out, cols } => {
            let g = out_grad!(out);
            let mut d = vec![0.0; nodes[*x].numel()];
            for (k, &(r, c)) in idx.iter().enumerate() {
                d[r * cols + c] += g[k];
            }
            acc(tg, nodes, *x, &d);
        }
        Op::LogClamped { x, eps, out } => {
            let g = out_grad!(out);
            let xv = nodes[*x].values();
            let d: Vec<f64> = g
                .iter()
                .zip(xv)
                .map(|(gi, &v)| if v > *eps { gi / v } else { 0.0 })
                .collect();
            acc(tg, nodes, *x, &d);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph, shape: Vec<usize>, vals: Vec<f64>) -> TensorId {
        g.insert(Tensor::new(shape, vals).unwrap().with_requires_grad())
    }

    #[test]
    fn conv_identity_kernel_preserves_ones() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![1, 1, 3, 3], vec![1.0; 9]);
        let k = leaf(&mut g, vec![1, 1, 1, 1], vec![1.0]);
        let b = leaf(&mut g, vec![1], vec![0.0]);
        let y = g.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 3, 3]);
        assert_eq!(g.values(y), &[1.0; 9]);
    }

    #[test]
    fn conv_hand_cross_correlation() {
        // 2x2 input [[1,2],[3,4]] with kernel [[1,0],[0,1]] -> 1*1 + 4*1 = 5
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let k = leaf(&mut g, vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let b = leaf(&mut g, vec![1], vec![0.0]);
        let y = g.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(g.values(y), &[5.0]);
    }

    #[test]
    fn conv_channel_mismatch_is_dimension_error() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![1, 1, 2, 2], vec![1.0; 4]);
        let k = leaf(&mut g, vec![1, 2, 1, 1], vec![1.0, 1.0]);
        let b = leaf(&mut g, vec![1], vec![0.0]);
        assert!(matches!(
            g.conv2d(x, k, b, 1, 0),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn conv_padding_and_stride_output_size() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![1, 1, 5, 5], (0..25).map(|v| v as f64).collect());
        let k = leaf(&mut g, vec![1, 1, 3, 3], vec![1.0; 9]);
        let b = leaf(&mut g, vec![1], vec![0.0]);
        let y = g.conv2d(x, k, b, 2, 1).unwrap();
        // H' = (5 + 2 - 3)/2 + 1 = 3
        assert_eq!(g.shape(y), &[1, 1, 3, 3]);
        // top-left tap: padded corner, sums entries (0,0),(0,1),(1,0),(1,1) = 0+1+5+6
        assert_eq!(g.values(y)[0], 12.0);
    }

    #[test]
    fn conv_matches_naive_reference() {
        // Naive direct convolution with explicit bounds checks as oracle.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for &(n, c, h, w, f, kh, kw, stride, padding) in &[
            (2usize, 3usize, 6usize, 5usize, 4usize, 3usize, 3usize, 1usize, 1usize),
            (1, 2, 7, 7, 3, 2, 4, 2, 0),
            (2, 1, 4, 4, 2, 3, 3, 2, 2),
        ] {
            let iv: Vec<f64> = (0..n * c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let kv: Vec<f64> = (0..f * c * kh * kw).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let bv: Vec<f64> = (0..f).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut g = Graph::new();
            let x = leaf(&mut g, vec![n, c, h, w], iv.clone());
            let k = leaf(&mut g, vec![f, c, kh, kw], kv.clone());
            let b = leaf(&mut g, vec![f], bv.clone());
            let y = g.conv2d(x, k, b, stride, padding).unwrap();

            let h_out = (h + 2 * padding - kh) / stride + 1;
            let w_out = (w + 2 * padding - kw) / stride + 1;
            let mut want = vec![0.0; n * f * h_out * w_out];
            for ni in 0..n {
                for fi in 0..f {
                    for ho in 0..h_out {
                        for wo in 0..w_out {
                            let mut s = bv[fi];
                            for ci in 0..c {
                                for ki in 0..kh {
                                    for kj in 0..kw {
                                        let ih = (ho * stride + ki) as isize - padding as isize;
                                        let iw = (wo * stride + kj) as isize - padding as isize;
                                        if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < w {
                                            s += iv[((ni * c + ci) * h + ih as usize) * w + iw as usize]
                                                * kv[((fi * c + ci) * kh + ki) * kw + kj];
                                        }
                                    }
                                }
                            }
                            want[((ni * f + fi) * h_out + ho) * w_out + wo] = s;
                        }
                    }
                }
            }
            for (got, want) in g.values(y).iter().zip(&want) {
                assert!((got - want).abs() < 1e-12, "conv mismatch: {got} vs {want}");
            }
        }
    }

    #[test]
    fn relu_definition() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![3], vec![-1.0, 0.0, 2.0]);
        let y = g.relu(x).unwrap();
        assert_eq!(g.values(y), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn sigmoid_symmetry_point() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![1], vec![0.0]);
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.values(y), &[0.5]);
    }

    #[test]
    fn add_definition() {
        let mut g = Graph::new();
        let a = leaf(&mut g, vec![2], vec![1.0, 2.0]);
        let b = leaf(&mut g, vec![2], vec![3.0, 4.0]);
        let y = g.add(a, b).unwrap();
        assert_eq!(g.values(y), &[4.0, 6.0]);
    }

    #[test]
    fn add_shape_mismatch_is_dimension_error() {
        let mut g = Graph::new();
        let a = leaf(&mut g, vec![2], vec![1.0, 2.0]);
        let b = leaf(&mut g, vec![3], vec![1.0, 2.0, 3.0]);
        assert!(matches!(g.add(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_uniform_and_shift_stability() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![1, 3], vec![0.0, 0.0, 0.0]);
        let y = g.softmax(x).unwrap();
        for v in g.values(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = leaf(&mut g, vec![1, 2], vec![1000.0, 1000.0]);
        let yb = g.softmax(big).unwrap();
        assert_eq!(g.values(yb), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_hand_exp_normalize() {
        // [ln 2, 0] -> [2/3, 1/3]
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![1, 2], vec![2.0f64.ln(), 0.0]);
        let y = g.softmax(x).unwrap();
        let v = g.values(y);
        assert!((v[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((v[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let vals: Vec<f64> = (0..40).map(|_| rng.gen_range(-30.0..30.0)).collect();
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![8, 5], vals);
        let y = g.softmax(x).unwrap();
        for r in 0..8 {
            let s: f64 = g.values(y)[r * 5..(r + 1) * 5].iter().sum();
            assert!((s - 1.0).abs() <= 1e-12, "row sum {s}");
        }
    }

    #[test]
    fn backward_of_sum_of_squares() {
        // root = sum(w ∘ w), w = [1,2] -> grad = [2,4]
        let mut g = Graph::new();
        let w = leaf(&mut g, vec![2], vec![1.0, 2.0]);
        let sq = g.mul(w, w).unwrap();
        let root = g.sum_all(sq).unwrap();
        g.backward(root).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_of_sigmoid_at_zero() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![1], vec![0.0]);
        let y = g.sigmoid(x).unwrap();
        let root = g.sum_all(y).unwrap();
        g.backward(root).unwrap();
        assert!((g.grad(x).unwrap()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![2], vec![1.0, 2.0]);
        let y = g.relu(x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Usage(_))));
    }

    #[test]
    fn repeated_backward_accumulates_until_zeroed() {
        let mut g = Graph::new();
        let w = leaf(&mut g, vec![2], vec![1.0, 2.0]);
        let sq = g.mul(w, w).unwrap();
        let root = g.sum_all(sq).unwrap();
        g.backward(root).unwrap();
        g.backward(root).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[4.0, 8.0]);
        g.zero_grads();
        g.backward(root).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let w = leaf(&mut g, vec![2], vec![1.0, 2.0]);
        let c = g.constant(vec![2], vec![3.0, 4.0]).unwrap();
        let p = g.mul(w, c).unwrap();
        let root = g.sum_all(p).unwrap();
        g.backward(root).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[3.0, 4.0]);
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn pure_constant_computations_record_nothing() {
        let mut g = Graph::new();
        let a = g.constant(vec![2], vec![1.0, 2.0]).unwrap();
        let b = g.constant(vec![2], vec![3.0, 4.0]).unwrap();
        let s = g.add(a, b).unwrap();
        assert_eq!(g.values(s), &[4.0, 6.0]);
        assert_eq!(g.num_ops(), 0);
    }

    #[test]
    fn max_pool_picks_first_of_ties() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![1, 1, 2, 2], vec![5.0, 5.0, 5.0, 5.0]);
        let y = g.max_pool2(x).unwrap();
        assert_eq!(g.values(y), &[5.0]);
        let root = g.sum_all(y).unwrap();
        g.backward(root).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn upsample_replicates_blocks() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![1, 1, 1, 1], vec![0.7]);
        let y = g.upsample_nearest(x, 4).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 4, 4]);
        assert!(g.values(y).iter().all(|&v| v == 0.7));

        let x2 = leaf(&mut g, vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let y2 = g.upsample_nearest(x2, 2).unwrap();
        assert_eq!(
            g.values(y2),
            &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]
        );
    }

    #[test]
    fn backward_is_linear_in_the_root() {
        // grad of (a*L1 + b*L2) == a*grad(L1) + b*grad(L2)
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let vals: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (a, b) = (0.7, -1.3);

        let grads_of = |coeff_a: f64, coeff_b: f64, vals: &[f64]| -> Vec<f64> {
            let mut g = Graph::new();
            let w = leaf(&mut g, vec![6], vals.to_vec());
            let sq = g.mul(w, w).unwrap();
            let l1 = g.sum_all(sq).unwrap();
            let sg = g.sigmoid(w).unwrap();
            let l2 = g.sum_all(sg).unwrap();
            let t1 = g.scale(l1, coeff_a).unwrap();
            let t2 = g.scale(l2, coeff_b).unwrap();
            let root = g.add(t1, t2).unwrap();
            g.backward(root).unwrap();
            g.grad(w).unwrap().to_vec()
        };

        let combined = grads_of(a, b, &vals);
        let g1 = grads_of(1.0, 0.0, &vals);
        let g2 = grads_of(0.0, 1.0, &vals);
        for i in 0..6 {
            let want = a * g1[i] + b * g2[i];
            assert!((combined[i] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn determinism_bitwise_repeat() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let vals: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let kv: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let run = || {
            let mut g = Graph::new();
            let x = leaf(&mut g, vec![2, 1, 4, 4], vals.clone());
            let k = leaf(&mut g, vec![1, 1, 3, 3], kv.clone());
            let b = leaf(&mut g, vec![1], vec![0.1]);
            let c = g.conv2d(x, k, b, 1, 1).unwrap();
            let r = g.relu(c).unwrap();
            let s = g.sum_all(r).unwrap();
            g.backward(s).unwrap();
            (
                g.values(s).to_vec(),
                g.grad(x).unwrap().to_vec(),
                g.grad(k).unwrap().to_vec(),
            )
        };
        let (v1, gx1, gk1) = run();
        let (v2, gx2, gk2) = run();
        assert!(v1.iter().zip(&v2).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(gx1.iter().zip(&gx2).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(gk1.iter().zip(&gk2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
