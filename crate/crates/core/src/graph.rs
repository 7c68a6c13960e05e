//! Reverse-mode automatic differentiation over dense rank-4 tensors.
//!
//! A [`Graph`] is an append-only tape: each operation validates shapes, runs
//! its forward kernel eagerly, and records enough to replay adjoints in
//! reverse. Nodes are referenced by [`Var`] handles. A graph and its tensors
//! are confined to one thread; distinct graphs may run in parallel.
//!
//! The op set is exactly what the attention pipeline needs: stride-1
//! convolutions (1x1 and 3x3), a non-overlapping patch-embedding convolution,
//! relu/sigmoid, channel-broadcast multiplication, patch merging, global
//! average pooling, a linear head, softmax cross-entropy, L1 reduction, and
//! the scalar add/scale glue for composite losses. No other broadcasting, no
//! strided or dilated convolution, no graph rewriting.

use crate::error::{CoreError, Result};
use crate::kernels;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

/// Floating-point scalar the engine is generic over. One graph instantiates
/// exactly one `Real`, so mixed precision cannot occur by construction.
pub trait Real:
    num_traits::Float + num_traits::NumAssign + Send + Sync + fmt::Debug + fmt::Display + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Shorthand for converting an `f64` constant into the active precision.
#[inline]
pub fn real<T: Real>(x: f64) -> T {
    T::from(x).expect("constant representable in target precision")
}

/// Dense tensor shape in N,C,H,W order. Vectors are N,K,1,1; scalars are
/// 1,1,1,1.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub fn nchw(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape([n, c, h, w])
    }
    pub fn vector(len: usize) -> Self {
        Shape([len, 1, 1, 1])
    }
    pub fn matrix(rows: usize, cols: usize) -> Self {
        Shape([rows, cols, 1, 1])
    }
    pub fn scalar() -> Self {
        Shape([1, 1, 1, 1])
    }
    pub fn n(&self) -> usize {
        self.0[0]
    }
    pub fn c(&self) -> usize {
        self.0[1]
    }
    pub fn h(&self) -> usize {
        self.0[2]
    }
    pub fn w(&self) -> usize {
        self.0[3]
    }
    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.0[0], self.0[1], self.0[2], self.0[3])
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

/// Normalization of the L1 reduction.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum L1Mode {
    /// (1/N) * sum of absolute values: the batch-averaged L1 norm of each map.
    SumPerSample,
    /// Additionally divided by H*W, so the value is resolution-independent.
    MeanPerElement,
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: usize,
        weight: usize,
        bias: usize,
        k: usize,
        pad: usize,
    },
    PatchEmbed {
        input: usize,
        weight: usize,
        bias: usize,
        patch: usize,
    },
    Relu {
        input: usize,
    },
    Sigmoid {
        input: usize,
    },
    BroadcastMul {
        features: usize,
        map: usize,
    },
    Linear {
        input: usize,
        weight: usize,
        bias: usize,
    },
    PatchMerge {
        input: usize,
        weight: usize,
        bias: usize,
    },
    GlobalAvgPool {
        input: usize,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        labels: Vec<usize>,
    },
    L1Reduce {
        input: usize,
        mode: L1Mode,
    },
    Add {
        lhs: usize,
        rhs: usize,
    },
    Scale {
        input: usize,
        factor: T,
    },
}

struct Node<T> {
    op: Op<T>,
    shape: Shape,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    requires: bool,
}

/// Append-only computation tape. See module docs.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    fn push(&mut self, op: Op<T>, shape: Shape, data: Vec<T>, requires: bool) -> Var {
        debug_assert_eq!(data.len(), shape.numel());
        self.nodes.push(Node {
            op,
            shape,
            data,
            grad: None,
            requires,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.node(v).shape
    }

    pub fn data(&self, v: Var) -> &[T] {
        &self.node(v).data
    }

    /// Gradient accumulated by [`Graph::backward`], if this node required one.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.node(v).grad.as_deref()
    }

    /// Value of a scalar node.
    pub fn scalar(&self, v: Var) -> T {
        debug_assert_eq!(self.node(v).shape.numel(), 1);
        self.node(v).data[0]
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes[id].requires
    }

    /// Insert an input tensor. Rejects non-finite values so every later node
    /// can assume finite data.
    pub fn leaf(&mut self, data: Vec<T>, shape: Shape, requires_grad: bool) -> Result<Var> {
        if data.len() != shape.numel() {
            return Err(CoreError::Dim {
                op: "leaf",
                axis: "numel",
                expected: shape.numel(),
                got: data.len(),
            });
        }
        if let Some(bad) = data.iter().find(|x| !x.is_finite()) {
            return Err(CoreError::Numeric {
                op: "leaf",
                detail: format!("non-finite input value {bad:?}"),
            });
        }
        Ok(self.push(Op::Leaf, shape, data, requires_grad))
    }

    /// Stride-1 2D convolution (cross-correlation, no kernel flip) with a
    /// 1x1 (pad 0) or 3x3 (pad 1) kernel, so spatial size is preserved.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, padding: usize) -> Result<Var> {
        let xs = self.shape(input);
        let ws = self.shape(weight);
        let bs = self.shape(bias);
        let (c_out, c_in, k) = (ws.0[0], ws.0[1], ws.0[2]);
        if ws.0[3] != k {
            return Err(CoreError::Dim {
                op: "conv2d",
                axis: "kernel_width",
                expected: k,
                got: ws.0[3],
            });
        }
        match (k, padding) {
            (1, 0) | (3, 1) => {}
            _ => {
                return Err(CoreError::Argument(format!(
                    "conv2d: unsupported kernel/padding combination k={k} pad={padding}"
                )))
            }
        }
        if xs.c() != c_in {
            return Err(CoreError::Dim {
                op: "conv2d",
                axis: "channels",
                expected: c_in,
                got: xs.c(),
            });
        }
        if bs.numel() != c_out {
            return Err(CoreError::Dim {
                op: "conv2d",
                axis: "bias",
                expected: c_out,
                got: bs.numel(),
            });
        }
        let (n, h, w) = (xs.n(), xs.h(), xs.w());
        let positions = h * w; // stride 1, size-preserving padding
        let kdim = c_in * k * k;
        let mut out = vec![T::zero(); n * c_out * positions];
        let mut col = vec![T::zero(); positions * kdim];
        {
            let x = self.data(input);
            let wt = self.data(weight);
            let b = self.data(bias);
            for s in 0..n {
                let plane = &x[s * c_in * positions..(s + 1) * c_in * positions];
                kernels::im2col(plane, c_in, h, w, k, 1, padding, &mut col);
                let dst = &mut out[s * c_out * positions..(s + 1) * c_out * positions];
                kernels::conv_forward_from_col(&col, wt, b, c_out, kdim, positions, dst);
            }
        }
        let requires =
            self.requires(input.0) || self.requires(weight.0) || self.requires(bias.0);
        Ok(self.push(
            Op::Conv2d {
                input: input.0,
                weight: weight.0,
                bias: bias.0,
                k,
                pad: padding,
            },
            Shape::nchw(n, c_out, h, w),
            out,
            requires,
        ))
    }

    /// Non-overlapping patch embedding: a kernel-p, stride-p convolution.
    pub fn patch_embed(&mut self, input: Var, weight: Var, bias: Var, patch: usize) -> Result<Var> {
        let xs = self.shape(input);
        let ws = self.shape(weight);
        let (c_out, c_in, k) = (ws.0[0], ws.0[1], ws.0[2]);
        if k != patch || ws.0[3] != patch {
            return Err(CoreError::Dim {
                op: "patch_embed",
                axis: "kernel",
                expected: patch,
                got: k,
            });
        }
        if xs.c() != c_in {
            return Err(CoreError::Dim {
                op: "patch_embed",
                axis: "channels",
                expected: c_in,
                got: xs.c(),
            });
        }
        if xs.h() % patch != 0 {
            return Err(CoreError::Dim {
                op: "patch_embed",
                axis: "height",
                expected: (xs.h() / patch) * patch,
                got: xs.h(),
            });
        }
        if xs.w() % patch != 0 {
            return Err(CoreError::Dim {
                op: "patch_embed",
                axis: "width",
                expected: (xs.w() / patch) * patch,
                got: xs.w(),
            });
        }
        let (n, h, w) = (xs.n(), xs.h(), xs.w());
        let (ho, wo) = (h / patch, w / patch);
        let positions = ho * wo;
        let kdim = c_in * patch * patch;
        let mut out = vec![T::zero(); n * c_out * positions];
        let mut col = vec![T::zero(); positions * kdim];
        {
            let x = self.data(input);
            let wt = self.data(weight);
            let b = self.data(bias);
            for s in 0..n {
                let plane = &x[s * c_in * h * w..(s + 1) * c_in * h * w];
                kernels::im2col(plane, c_in, h, w, patch, patch, 0, &mut col);
                let dst = &mut out[s * c_out * positions..(s + 1) * c_out * positions];
                kernels::conv_forward_from_col(&col, wt, b, c_out, kdim, positions, dst);
            }
        }
        let requires =
            self.requires(input.0) || self.requires(weight.0) || self.requires(bias.0);
        Ok(self.push(
            Op::PatchEmbed {
                input: input.0,
                weight: weight.0,
                bias: bias.0,
                patch,
            },
            Shape::nchw(n, c_out, ho, wo),
            out,
            requires,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input);
        let out: Vec<T> = self
            .data(input)
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        let requires = self.requires(input.0);
        Ok(self.push(Op::Relu { input: input.0 }, shape, out, requires))
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input);
        let out: Vec<T> = self.data(input).iter().map(|&x| sigmoid_stable(x)).collect();
        let requires = self.requires(input.0);
        Ok(self.push(Op::Sigmoid { input: input.0 }, shape, out, requires))
    }

    /// features[n,c,h,w] * map[n,1,h,w], broadcast across channels.
    pub fn broadcast_mul(&mut self, features: Var, map: Var) -> Result<Var> {
        let fs = self.shape(features);
        let ms = self.shape(map);
        if ms.c() != 1 {
            return Err(CoreError::Dim {
                op: "broadcast_mul",
                axis: "map_channels",
                expected: 1,
                got: ms.c(),
            });
        }
        if ms.n() != fs.n() {
            return Err(CoreError::Dim {
                op: "broadcast_mul",
                axis: "batch",
                expected: fs.n(),
                got: ms.n(),
            });
        }
        if ms.h() != fs.h() {
            return Err(CoreError::Dim {
                op: "broadcast_mul",
                axis: "height",
                expected: fs.h(),
                got: ms.h(),
            });
        }
        if ms.w() != fs.w() {
            return Err(CoreError::Dim {
                op: "broadcast_mul",
                axis: "width",
                expected: fs.w(),
                got: ms.w(),
            });
        }
        let (n, c, hw) = (fs.n(), fs.c(), fs.h() * fs.w());
        let mut out = vec![T::zero(); fs.numel()];
        {
            let f = self.data(features);
            let m = self.data(map);
            for s in 0..n {
                let msl = &m[s * hw..(s + 1) * hw];
                for ci in 0..c {
                    let base = (s * c + ci) * hw;
                    for (o, (&fv, &mv)) in out[base..base + hw]
                        .iter_mut()
                        .zip(f[base..base + hw].iter().zip(msl))
                    {
                        *o = fv * mv;
                    }
                }
            }
        }
        let requires = self.requires(features.0) || self.requires(map.0);
        Ok(self.push(
            Op::BroadcastMul {
                features: features.0,
                map: map.0,
            },
            fs,
            out,
            requires,
        ))
    }

    /// out[n,k] = sum_d weight[k,d] * input[n,d] + bias[k].
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(input);
        let ws = self.shape(weight);
        if xs.h() != 1 || xs.w() != 1 {
            return Err(CoreError::Dim {
                op: "linear",
                axis: "spatial",
                expected: 1,
                got: xs.h() * xs.w(),
            });
        }
        let (n, d) = (xs.n(), xs.c());
        let (k_out, d_w) = (ws.0[0], ws.0[1]);
        if d_w != d {
            return Err(CoreError::Dim {
                op: "linear",
                axis: "features",
                expected: d,
                got: d_w,
            });
        }
        if self.shape(bias).numel() != k_out {
            return Err(CoreError::Dim {
                op: "linear",
                axis: "bias",
                expected: k_out,
                got: self.shape(bias).numel(),
            });
        }
        let mut out = vec![T::zero(); n * k_out];
        {
            let x = self.data(input);
            let w = self.data(weight);
            let b = self.data(bias);
            for (s, out_row) in out.chunks_exact_mut(k_out).enumerate() {
                let x_row = &x[s * d..(s + 1) * d];
                for (ko, o) in out_row.iter_mut().enumerate() {
                    *o = b[ko] + kernels::dot(x_row, &w[ko * d..(ko + 1) * d]);
                }
            }
        }
        let requires =
            self.requires(input.0) || self.requires(weight.0) || self.requires(bias.0);
        Ok(self.push(
            Op::Linear {
                input: input.0,
                weight: weight.0,
                bias: bias.0,
            },
            Shape::matrix(n, k_out),
            out,
            requires,
        ))
    }

    /// Concatenate each non-overlapping 2x2 block (TL,TR,BL,BR order) and
    /// project the 4C vector to 2C channels at half resolution.
    pub fn patch_merge(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(input);
        let (n, c, h, w) = (xs.n(), xs.c(), xs.h(), xs.w());
        if h % 2 != 0 {
            return Err(CoreError::Dim {
                op: "patch_merge",
                axis: "height",
                expected: h + 1,
                got: h,
            });
        }
        if w % 2 != 0 {
            return Err(CoreError::Dim {
                op: "patch_merge",
                axis: "width",
                expected: w + 1,
                got: w,
            });
        }
        let ws = self.shape(weight);
        if ws.0[0] != 2 * c || ws.0[1] != 4 * c {
            return Err(CoreError::Dim {
                op: "patch_merge",
                axis: "projection",
                expected: 4 * c,
                got: ws.0[1],
            });
        }
        if self.shape(bias).numel() != 2 * c {
            return Err(CoreError::Dim {
                op: "patch_merge",
                axis: "bias",
                expected: 2 * c,
                got: self.shape(bias).numel(),
            });
        }
        let (ho, wo) = (h / 2, w / 2);
        let positions = ho * wo;
        let mut out = vec![T::zero(); n * 2 * c * positions];
        let mut gather = vec![T::zero(); positions * 4 * c];
        {
            let x = self.data(input);
            let wt = self.data(weight);
            let b = self.data(bias);
            for s in 0..n {
                let plane = &x[s * c * h * w..(s + 1) * c * h * w];
                merge_gather(plane, c, h, w, &mut gather);
                let dst = &mut out[s * 2 * c * positions..(s + 1) * 2 * c * positions];
                kernels::conv_forward_from_col(&gather, wt, b, 2 * c, 4 * c, positions, dst);
            }
        }
        let requires =
            self.requires(input.0) || self.requires(weight.0) || self.requires(bias.0);
        Ok(self.push(
            Op::PatchMerge {
                input: input.0,
                weight: weight.0,
                bias: bias.0,
            },
            Shape::nchw(n, 2 * c, ho, wo),
            out,
            requires,
        ))
    }

    /// Mean over spatial positions per channel: N,C,H,W -> N,C.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let xs = self.shape(input);
        let (n, c, hw) = (xs.n(), xs.c(), xs.h() * xs.w());
        let inv = T::one() / real::<T>(hw as f64);
        let mut out = vec![T::zero(); n * c];
        {
            let x = self.data(input);
            for (o, chunk) in out.iter_mut().zip(x.chunks_exact(hw)) {
                let mut acc = T::zero();
                for &v in chunk {
                    acc += v;
                }
                *o = acc * inv;
            }
        }
        let requires = self.requires(input.0);
        Ok(self.push(
            Op::GlobalAvgPool { input: input.0 },
            Shape::matrix(n, c),
            out,
            requires,
        ))
    }

    /// Mean over the batch of -log softmax(logits)[label], stabilized by
    /// max-subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits);
        let (n, k) = (ls.n(), ls.c());
        if ls.h() != 1 || ls.w() != 1 {
            return Err(CoreError::Dim {
                op: "softmax_cross_entropy",
                axis: "spatial",
                expected: 1,
                got: ls.h() * ls.w(),
            });
        }
        if labels.len() != n {
            return Err(CoreError::Dim {
                op: "softmax_cross_entropy",
                axis: "labels",
                expected: n,
                got: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(CoreError::Index {
                op: "softmax_cross_entropy",
                index: bad,
                bound: k,
            });
        }
        let mut loss = T::zero();
        {
            let x = self.data(logits);
            for (row, &label) in x.chunks_exact(k).zip(labels) {
                let (_, log_z, shifted_label) = log_sum_exp(row, label);
                loss += log_z - shifted_label;
            }
        }
        loss = loss / real::<T>(n as f64);
        let requires = self.requires(logits.0);
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
            },
            Shape::scalar(),
            vec![loss],
            requires,
        ))
    }

    /// Batch-normalized L1 norm of a single-channel map.
    pub fn l1_reduce(&mut self, map: Var, mode: L1Mode) -> Result<Var> {
        let ms = self.shape(map);
        if ms.c() != 1 {
            return Err(CoreError::Dim {
                op: "l1_reduce",
                axis: "channels",
                expected: 1,
                got: ms.c(),
            });
        }
        let n = ms.n();
        let denom = match mode {
            L1Mode::SumPerSample => n as f64,
            L1Mode::MeanPerElement => (n * ms.h() * ms.w()) as f64,
        };
        let mut acc = T::zero();
        for &v in self.data(map) {
            acc += v.abs();
        }
        let value = acc / real::<T>(denom);
        let requires = self.requires(map.0);
        Ok(self.push(
            Op::L1Reduce {
                input: map.0,
                mode,
            },
            Shape::scalar(),
            vec![value],
            requires,
        ))
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let ls = self.shape(lhs);
        let rs = self.shape(rhs);
        if ls != rs {
            return Err(CoreError::Dim {
                op: "add",
                axis: "numel",
                expected: ls.numel(),
                got: rs.numel(),
            });
        }
        let out: Vec<T> = self
            .data(lhs)
            .iter()
            .zip(self.data(rhs))
            .map(|(&a, &b)| a + b)
            .collect();
        let requires = self.requires(lhs.0) || self.requires(rhs.0);
        Ok(self.push(
            Op::Add {
                lhs: lhs.0,
                rhs: rhs.0,
            },
            ls,
            out,
            requires,
        ))
    }

    /// Multiply by a constant (not differentiated with respect to the factor).
    pub fn scale(&mut self, input: Var, factor: T) -> Result<Var> {
        let shape = self.shape(input);
        let out: Vec<T> = self.data(input).iter().map(|&x| x * factor).collect();
        let requires = self.requires(input.0);
        Ok(self.push(
            Op::Scale {
                input: input.0,
                factor,
            },
            shape,
            out,
            requires,
        ))
    }

    /// Accumulate adjoints for every `requires_grad` node reachable from
    /// `loss`. The graph is consumed in the sense that a second call errors.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(CoreError::State(
                "backward already ran on this graph".into(),
            ));
        }
        if self.shape(loss).numel() != 1 {
            return Err(CoreError::Contract(format!(
                "backward requires a scalar loss, got shape {}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        if !self.requires(loss.0) {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires || self.nodes[id].grad.is_none() {
                continue;
            }
            self.step_backward(id);
        }
        Ok(())
    }

    fn step_backward(&mut self, id: usize) {
        let (prefix, rest) = self.nodes.split_at_mut(id);
        let node = &rest[0];
        let gout = node.grad.as_deref().expect("checked by caller");
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                k,
                pad,
            } => backward_conv(
                prefix, gout, &node.shape, *input, *weight, *bias, *k, 1, *pad,
            ),
            Op::PatchEmbed {
                input,
                weight,
                bias,
                patch,
            } => backward_conv(
                prefix, gout, &node.shape, *input, *weight, *bias, *patch, *patch, 0,
            ),
            Op::Relu { input } => {
                if prefix[*input].requires {
                    let x = core::mem::take(&mut prefix[*input].data);
                    {
                        let g = grad_buf(&mut prefix[*input]);
                        for ((gi, &go), &xv) in g.iter_mut().zip(gout).zip(&x) {
                            if xv > T::zero() {
                                *gi += go;
                            }
                        }
                    }
                    prefix[*input].data = x;
                }
            }
            Op::Sigmoid { input } => {
                if prefix[*input].requires {
                    let y = &node.data;
                    let g = grad_buf(&mut prefix[*input]);
                    for ((gi, &go), &yv) in g.iter_mut().zip(gout).zip(y) {
                        *gi += go * yv * (T::one() - yv);
                    }
                }
            }
            Op::BroadcastMul { features, map } => {
                let shape = prefix[*features].shape;
                let (n, c, hw) = (shape.n(), shape.c(), shape.h() * shape.w());
                if prefix[*features].requires {
                    let m = core::mem::take(&mut prefix[*map].data);
                    {
                        let g = grad_buf(&mut prefix[*features]);
                        for s in 0..n {
                            let msl = &m[s * hw..(s + 1) * hw];
                            for ci in 0..c {
                                let base = (s * c + ci) * hw;
                                for ((gi, &go), &mv) in g[base..base + hw]
                                    .iter_mut()
                                    .zip(&gout[base..base + hw])
                                    .zip(msl)
                                {
                                    *gi += go * mv;
                                }
                            }
                        }
                    }
                    prefix[*map].data = m;
                }
                if prefix[*map].requires {
                    let f = core::mem::take(&mut prefix[*features].data);
                    {
                        let g = grad_buf(&mut prefix[*map]);
                        for s in 0..n {
                            let gsl = &mut g[s * hw..(s + 1) * hw];
                            for ci in 0..c {
                                let base = (s * c + ci) * hw;
                                for ((gi, &go), &fv) in gsl
                                    .iter_mut()
                                    .zip(&gout[base..base + hw])
                                    .zip(&f[base..base + hw])
                                {
                                    *gi += go * fv;
                                }
                            }
                        }
                    }
                    prefix[*features].data = f;
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let n = prefix[*input].shape.n();
                let d = prefix[*input].shape.c();
                let k = prefix[*weight].shape.0[0];
                if prefix[*input].requires {
                    let w = core::mem::take(&mut prefix[*weight].data);
                    let g = grad_buf(&mut prefix[*input]);
                    // dX[s] += sum_k dY[s][k] * W[k]
                    for s in 0..n {
                        let dx_row = &mut g[s * d..(s + 1) * d];
                        for (ko, &dy) in gout[s * k..(s + 1) * k].iter().enumerate() {
                            kernels::axpy(dy, &w[ko * d..(ko + 1) * d], dx_row);
                        }
                    }
                    prefix[*weight].data = w;
                }
                if prefix[*weight].requires {
                    let x = core::mem::take(&mut prefix[*input].data);
                    let g = grad_buf(&mut prefix[*weight]);
                    // dW[k] += sum_s dY[s][k] * X[s]
                    for s in 0..n {
                        let x_row = &x[s * d..(s + 1) * d];
                        for (ko, &dy) in gout[s * k..(s + 1) * k].iter().enumerate() {
                            kernels::axpy(dy, x_row, &mut g[ko * d..(ko + 1) * d]);
                        }
                    }
                    prefix[*input].data = x;
                }
                if prefix[*bias].requires {
                    let g = grad_buf(&mut prefix[*bias]);
                    for row in gout.chunks_exact(k) {
                        for (gi, &go) in g.iter_mut().zip(row) {
                            *gi += go;
                        }
                    }
                }
            }
            Op::PatchMerge {
                input,
                weight,
                bias,
            } => {
                let xs = prefix[*input].shape;
                let (n, c, h, w) = (xs.n(), xs.c(), xs.h(), xs.w());
                let positions = (h / 2) * (w / 2);
                let kdim = 4 * c;
                let mut gather = vec![T::zero(); positions * kdim];
                for s in 0..n {
                    let gslice = &gout[s * 2 * c * positions..(s + 1) * 2 * c * positions];
                    if prefix[*weight].requires || prefix[*bias].requires {
                        let x = core::mem::take(&mut prefix[*input].data);
                        merge_gather(&x[s * c * h * w..(s + 1) * c * h * w], c, h, w, &mut gather);
                        prefix[*input].data = x;
                        let mut db = core::mem::take(grad_buf(&mut prefix[*bias]));
                        kernels::conv_backward_params(
                            &gather,
                            gslice,
                            2 * c,
                            kdim,
                            positions,
                            grad_buf(&mut prefix[*weight]),
                            &mut db,
                        );
                        *grad_buf(&mut prefix[*bias]) = db;
                    }
                    if prefix[*input].requires {
                        let wt = core::mem::take(&mut prefix[*weight].data);
                        let mut dgather = vec![T::zero(); positions * kdim];
                        kernels::conv_backward_col(&wt, gslice, 2 * c, kdim, positions, &mut dgather);
                        prefix[*weight].data = wt;
                        let g = grad_buf(&mut prefix[*input]);
                        merge_scatter_acc(
                            &dgather,
                            c,
                            h,
                            w,
                            &mut g[s * c * h * w..(s + 1) * c * h * w],
                        );
                    }
                }
            }
            Op::GlobalAvgPool { input } => {
                if prefix[*input].requires {
                    let xs = prefix[*input].shape;
                    let hw = xs.h() * xs.w();
                    let inv = T::one() / real::<T>(hw as f64);
                    let g = grad_buf(&mut prefix[*input]);
                    for (chunk, &go) in g.chunks_exact_mut(hw).zip(gout) {
                        let d = go * inv;
                        for gi in chunk {
                            *gi += d;
                        }
                    }
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                if prefix[*logits].requires {
                    let k = prefix[*logits].shape.c();
                    let n = labels.len();
                    let scale = gout[0] / real::<T>(n as f64);
                    let x = core::mem::take(&mut prefix[*logits].data);
                    {
                        let g = grad_buf(&mut prefix[*logits]);
                        for ((grow, xrow), &label) in
                            g.chunks_exact_mut(k).zip(x.chunks_exact(k)).zip(labels)
                        {
                            let (max, log_z, _) = log_sum_exp(xrow, label);
                            for (j, (gi, &xv)) in grow.iter_mut().zip(xrow).enumerate() {
                                let p = (xv - max - log_z).exp();
                                let target = if j == label { T::one() } else { T::zero() };
                                *gi += scale * (p - target);
                            }
                        }
                    }
                    prefix[*logits].data = x;
                }
            }
            Op::L1Reduce { input, mode } => {
                if prefix[*input].requires {
                    let ms = prefix[*input].shape;
                    let denom = match mode {
                        L1Mode::SumPerSample => ms.n() as f64,
                        L1Mode::MeanPerElement => (ms.n() * ms.h() * ms.w()) as f64,
                    };
                    let scale = gout[0] / real::<T>(denom);
                    let x = core::mem::take(&mut prefix[*input].data);
                    {
                        let g = grad_buf(&mut prefix[*input]);
                        for (gi, &xv) in g.iter_mut().zip(&x) {
                            if xv > T::zero() {
                                *gi += scale;
                            } else if xv < T::zero() {
                                *gi -= scale;
                            }
                        }
                    }
                    prefix[*input].data = x;
                }
            }
            Op::Add { lhs, rhs } => {
                for &side in &[*lhs, *rhs] {
                    if prefix[side].requires {
                        let g = grad_buf(&mut prefix[side]);
                        for (gi, &go) in g.iter_mut().zip(gout) {
                            *gi += go;
                        }
                    }
                }
            }
            Op::Scale { input, factor } => {
                if prefix[*input].requires {
                    let factor = *factor;
                    let g = grad_buf(&mut prefix[*input]);
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi += go * factor;
                    }
                }
            }
        }
    }
}

/// Lazily allocate and return the gradient buffer of a node.
fn grad_buf<T: Real>(node: &mut Node<T>) -> &mut Vec<T> {
    if node.grad.is_none() {
        node.grad = Some(vec![T::zero(); node.shape.numel()]);
    }
    node.grad.as_mut().expect("just ensured")
}

fn sigmoid_stable<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Returns (max, log sum exp(x - max), x[label] - max) for one logit row.
fn log_sum_exp<T: Real>(row: &[T], label: usize) -> (T, T, T) {
    let mut max = row[0];
    for &v in row {
        if v > max {
            max = v;
        }
    }
    let mut z = T::zero();
    for &v in row {
        z += (v - max).exp();
    }
    (max, z.ln(), row[label] - max)
}

/// Gather 2x2 blocks into a (4C x positions) matrix, TL,TR,BL,BR channel
/// groups in that order.
fn merge_gather<T: Real>(x: &[T], c: usize, h: usize, w: usize, gather: &mut [T]) {
    let (ho, wo) = (h / 2, w / 2);
    let positions = ho * wo;
    debug_assert_eq!(gather.len(), positions * 4 * c);
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &mut gather[(oy * wo + ox) * 4 * c..(oy * wo + ox + 1) * 4 * c];
            for (q, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
                for ci in 0..c {
                    row[q * c + ci] = x[ci * h * w + (2 * oy + dy) * w + (2 * ox + dx)];
                }
            }
        }
    }
}

/// Inverse of [`merge_gather`]: scatter-add gathered gradients back.
fn merge_scatter_acc<T: Real>(gather: &[T], c: usize, h: usize, w: usize, grad: &mut [T]) {
    let (ho, wo) = (h / 2, w / 2);
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &gather[(oy * wo + ox) * 4 * c..(oy * wo + ox + 1) * 4 * c];
            for (q, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
                for ci in 0..c {
                    grad[ci * h * w + (2 * oy + dy) * w + (2 * ox + dx)] += row[q * c + ci];
                }
            }
        }
    }
}

/// Shared conv/patch-embed backward. `prefix` is the tape before the output
/// node, `gout` the output adjoint.
#[allow(clippy::too_many_arguments)]
fn backward_conv<T: Real>(
    prefix: &mut [Node<T>],
    gout: &[T],
    out_shape: &Shape,
    input: usize,
    weight: usize,
    bias: usize,
    k: usize,
    stride: usize,
    pad: usize,
) {
    let xs = prefix[input].shape;
    let (n, c_in, h, w) = (xs.n(), xs.c(), xs.h(), xs.w());
    let c_out = out_shape.c();
    let positions = out_shape.h() * out_shape.w();
    let kdim = c_in * k * k;
    let mut col = vec![T::zero(); positions * kdim];
    for s in 0..n {
        let gslice = &gout[s * c_out * positions..(s + 1) * c_out * positions];
        if prefix[weight].requires || prefix[bias].requires {
            let x = core::mem::take(&mut prefix[input].data);
            kernels::im2col(
                &x[s * c_in * h * w..(s + 1) * c_in * h * w],
                c_in,
                h,
                w,
                k,
                stride,
                pad,
                &mut col,
            );
            prefix[input].data = x;
            let mut db = core::mem::take(grad_buf(&mut prefix[bias]));
            kernels::conv_backward_params(
                &col,
                gslice,
                c_out,
                kdim,
                positions,
                grad_buf(&mut prefix[weight]),
                &mut db,
            );
            *grad_buf(&mut prefix[bias]) = db;
        }
        if prefix[input].requires {
            let wt = core::mem::take(&mut prefix[weight].data);
            let mut dcol = vec![T::zero(); positions * kdim];
            kernels::conv_backward_col(&wt, gslice, c_out, kdim, positions, &mut dcol);
            prefix[weight].data = wt;
            let g = grad_buf(&mut prefix[input]);
            kernels::col2im_acc(
                &dcol,
                c_in,
                h,
                w,
                k,
                stride,
                pad,
                &mut g[s * c_in * h * w..(s + 1) * c_in * h * w],
            );
        }
    }
}
