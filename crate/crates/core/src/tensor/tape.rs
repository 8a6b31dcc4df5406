use crate::{Error, Result};

use super::{softmax_slice, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    Relu {
        input: Var,
    },
    Sigmoid {
        input: Var,
    },
    Concat {
        inputs: Vec<Var>,
    },
    AvgPool {
        input: Var,
        window: usize,
    },
    GlobalAvgPool {
        input: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Softmax {
        input: Var,
        row_len: usize,
    },
    SelectColumn {
        input: Var,
        col: usize,
    },
    ScaleColumns {
        input: Var,
        scale: Var,
    },
    Add {
        lhs: Var,
        rhs: Var,
    },
    Mul {
        lhs: Var,
        rhs: Var,
    },
    OneMinus {
        input: Var,
    },
    LnClamped {
        input: Var,
        floor: f64,
    },
    SumAll {
        input: Var,
    },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    trainable: bool,
    /// Whether a gradient should be propagated into this node. Constants
    /// (input images, label masks) opt out, which skips the most expensive
    /// part of the convolution backward for the first layer.
    needs_grad: bool,
}

/// Ordered record of executed operations.
///
/// Every operation appends a node holding its output value and enough
/// context to replay its adjoint. [`Tape::backward`] walks the record in
/// reverse, accumulating gradients additively, so a value used twice
/// receives the sum of its per-use adjoints. Dropping the tape frees all
/// recorded nodes.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Leaf => true,
            _ => self.op_inputs(&op).iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            shape,
            data,
            op,
            trainable: false,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn op_inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Conv2d {
                input, kernel, bias, ..
            } => vec![*input, *kernel, *bias],
            Op::Relu { input }
            | Op::Sigmoid { input }
            | Op::AvgPool { input, .. }
            | Op::GlobalAvgPool { input }
            | Op::Softmax { input, .. }
            | Op::SelectColumn { input, .. }
            | Op::OneMinus { input }
            | Op::LnClamped { input, .. }
            | Op::SumAll { input } => vec![*input],
            Op::Concat { inputs } => inputs.clone(),
            Op::Linear {
                input, weight, bias,
            } => vec![*input, *weight, *bias],
            Op::ScaleColumns { input, scale } => vec![*input, *scale],
            Op::Add { lhs, rhs } | Op::Mul { lhs, rhs } => vec![*lhs, *rhs],
        }
    }

    /// Records a non-trainable leaf. It still receives a gradient.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf)
    }

    /// Records a trainable leaf (a model parameter).
    pub fn param(&mut self, t: &Tensor) -> Var {
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf);
        self.nodes[v.0].trainable = true;
        v
    }

    /// Records a constant leaf that no gradient flows into.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf);
        self.nodes[v.0].needs_grad = false;
        v
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    /// Gradient of the last `backward` with respect to `v`.
    pub fn grad(&self, v: Var) -> &[f64] {
        &self.grads[v.0]
    }

    /// Copies a node's value out as a plain tensor.
    pub fn value(&self, v: Var) -> Tensor {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].data.clone())
            .expect("tape nodes are internally consistent")
    }

    fn shape4(&self, v: Var, what: &str) -> Result<[usize; 4]> {
        let s = &self.nodes[v.0].shape;
        if s.len() != 4 {
            return Err(Error::Shape(format!(
                "{what} must be 4-d (batch, channel, height, width), got {s:?}"
            )));
        }
        Ok([s[0], s[1], s[2], s[3]])
    }

    // ── operations ──────────────────────────────────────────────────

    /// 2-D convolution with zero padding.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let [b, ci, h, w] = self.shape4(input, "conv2d input")?;
        let [co, kci, kh, kw] = self.shape4(kernel, "conv2d kernel")?;
        if kci != ci {
            return Err(Error::Shape(format!(
                "conv2d: input has {ci} channels but kernel expects {kci} \
                 (input {:?}, kernel {:?})",
                self.shape(input),
                self.shape(kernel)
            )));
        }
        if self.nodes[bias.0].shape != [co] {
            return Err(Error::Shape(format!(
                "conv2d: bias shape {:?} does not match {co} output channels",
                self.nodes[bias.0].shape
            )));
        }
        if stride == 0 {
            return Err(Error::Shape("conv2d: stride must be positive".into()));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::Shape(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;

        let mut out = vec![0.0; b * co * oh * ow];
        {
            let inp = &self.nodes[input.0].data;
            let ker = &self.nodes[kernel.0].data;
            let bs = &self.nodes[bias.0].data;
            conv2d_forward(
                inp, ker, bs, &mut out, b, ci, h, w, co, kh, kw, oh, ow, stride, padding,
            );
        }
        Ok(self.push(
            vec![b, co, oh, ow],
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
        ))
    }

    /// Elementwise max(0, x). The subgradient at 0 is 0.
    pub fn relu(&mut self, input: Var) -> Var {
        let data: Vec<f64> = self.nodes[input.0]
            .data
            .iter()
            .map(|&v| if v > 0.0 { v } else { 0.0 })
            .collect();
        let shape = self.nodes[input.0].shape.clone();
        self.push(shape, data, Op::Relu { input })
    }

    /// Elementwise logistic sigmoid.
    pub fn sigmoid(&mut self, input: Var) -> Var {
        let data: Vec<f64> = self.nodes[input.0]
            .data
            .iter()
            .map(|&v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let shape = self.nodes[input.0].shape.clone();
        self.push(shape, data, Op::Sigmoid { input })
    }

    /// Stacks feature maps along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::Shape("concat_channels: no inputs".into()));
        }
        let [b, _, h, w] = self.shape4(inputs[0], "concat_channels input")?;
        let mut channels = 0;
        for &v in inputs {
            let [vb, vc, vh, vw] = self.shape4(v, "concat_channels input")?;
            if vb != b || vh != h || vw != w {
                return Err(Error::Shape(format!(
                    "concat_channels: input {:?} does not match leading shape \
                     [{b}, _, {h}, {w}]",
                    self.shape(v)
                )));
            }
            channels += vc;
        }
        let plane = h * w;
        let mut out = vec![0.0; b * channels * plane];
        for n in 0..b {
            let mut c_off = 0;
            for &v in inputs {
                let vc = self.nodes[v.0].shape[1];
                let src = &self.nodes[v.0].data[n * vc * plane..(n + 1) * vc * plane];
                out[(n * channels + c_off) * plane..(n * channels + c_off + vc) * plane]
                    .copy_from_slice(src);
                c_off += vc;
            }
        }
        Ok(self.push(
            vec![b, channels, h, w],
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
        ))
    }

    /// Non-overlapping window means over the spatial axes.
    pub fn avg_pool2d(&mut self, input: Var, window: usize) -> Result<Var> {
        let [b, c, h, w] = self.shape4(input, "avg_pool2d input")?;
        if window == 0 {
            return Err(Error::Shape("avg_pool2d: window must be positive".into()));
        }
        if h % window != 0 {
            return Err(Error::Shape(format!(
                "avg_pool2d: height {h} not divisible by window {window}"
            )));
        }
        if w % window != 0 {
            return Err(Error::Shape(format!(
                "avg_pool2d: width {w} not divisible by window {window}"
            )));
        }
        let (oh, ow) = (h / window, w / window);
        let inv = 1.0 / (window * window) as f64;
        let mut out = vec![0.0; b * c * oh * ow];
        let inp = &self.nodes[input.0].data;
        for nc in 0..b * c {
            let plane = &inp[nc * h * w..(nc + 1) * h * w];
            let out_plane = &mut out[nc * oh * ow..(nc + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for dy in 0..window {
                        let row = (oy * window + dy) * w + ox * window;
                        for dx in 0..window {
                            acc += plane[row + dx];
                        }
                    }
                    out_plane[oy * ow + ox] = acc * inv;
                }
            }
        }
        Ok(self.push(vec![b, c, oh, ow], out, Op::AvgPool { input, window }))
    }

    /// Per-channel spatial mean: `[b, c, h, w]` -> `[b, c]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let [b, c, h, w] = self.shape4(input, "global_avg_pool input")?;
        let inv = 1.0 / (h * w) as f64;
        let inp = &self.nodes[input.0].data;
        let mut out = vec![0.0; b * c];
        for nc in 0..b * c {
            let plane = &inp[nc * h * w..(nc + 1) * h * w];
            out[nc] = plane.iter().sum::<f64>() * inv;
        }
        Ok(self.push(vec![b, c], out, Op::GlobalAvgPool { input }))
    }

    /// Affine map: `x[b, n] * weight[m, n]^T + bias[m]`.
    pub fn fully_connected(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.nodes[input.0].shape.clone();
        let ws = self.nodes[weight.0].shape.clone();
        if xs.len() != 2 || ws.len() != 2 {
            return Err(Error::Shape(format!(
                "fully_connected: expected 2-d input and weight, got {xs:?} and {ws:?}"
            )));
        }
        let (b, n) = (xs[0], xs[1]);
        let (m, wn) = (ws[0], ws[1]);
        if wn != n {
            return Err(Error::Shape(format!(
                "fully_connected: input features {n} do not match weight columns {wn}"
            )));
        }
        if self.nodes[bias.0].shape != [m] {
            return Err(Error::Shape(format!(
                "fully_connected: bias shape {:?} does not match {m} outputs",
                self.nodes[bias.0].shape
            )));
        }
        let x = &self.nodes[input.0].data;
        let wgt = &self.nodes[weight.0].data;
        let bs = &self.nodes[bias.0].data;
        let mut out = vec![0.0; b * m];
        for i in 0..b {
            let xrow = &x[i * n..(i + 1) * n];
            let orow = &mut out[i * m..(i + 1) * m];
            for j in 0..m {
                let wrow = &wgt[j * n..(j + 1) * n];
                let mut acc = bs[j];
                for k in 0..n {
                    acc += xrow[k] * wrow[k];
                }
                orow[j] = acc;
            }
        }
        Ok(self.push(
            vec![b, m],
            out,
            Op::Linear {
                input,
                weight,
                bias,
            },
        ))
    }

    /// Softmax over a vector, or independently over each row of a matrix.
    /// Computed with max-subtraction; each row sums to 1.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let shape = self.nodes[input.0].shape.clone();
        let row_len = match shape.len() {
            1 => shape[0],
            2 => shape[1],
            _ => {
                return Err(Error::Shape(format!(
                    "softmax: expected 1-d or 2-d input, got {shape:?}"
                )))
            }
        };
        if row_len == 0 {
            return Err(Error::Shape("softmax: empty rows".into()));
        }
        let mut out = Vec::with_capacity(self.nodes[input.0].data.len());
        for row in self.nodes[input.0].data.chunks(row_len) {
            out.extend(softmax_slice(row));
        }
        Ok(self.push(shape, out, Op::Softmax { input, row_len }))
    }

    /// Extracts column `col` of a matrix as a vector.
    pub fn select_column(&mut self, input: Var, col: usize) -> Result<Var> {
        let shape = self.nodes[input.0].shape.clone();
        if shape.len() != 2 || col >= shape[1] {
            return Err(Error::Shape(format!(
                "select_column: column {col} invalid for shape {shape:?}"
            )));
        }
        let (rows, cols) = (shape[0], shape[1]);
        let data: Vec<f64> = (0..rows)
            .map(|r| self.nodes[input.0].data[r * cols + col])
            .collect();
        Ok(self.push(vec![rows], data, Op::SelectColumn { input, col }))
    }

    /// Scales each column of `input[n, m]` by `scale[m]`.
    pub fn scale_columns(&mut self, input: Var, scale: Var) -> Result<Var> {
        let shape = self.nodes[input.0].shape.clone();
        if shape.len() != 2 || self.nodes[scale.0].shape != [shape[1]] {
            return Err(Error::Shape(format!(
                "scale_columns: input {:?} incompatible with scale {:?}",
                shape,
                self.nodes[scale.0].shape
            )));
        }
        let (rows, cols) = (shape[0], shape[1]);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] =
                    self.nodes[input.0].data[r * cols + c] * self.nodes[scale.0].data[c];
            }
        }
        Ok(self.push(shape, out, Op::ScaleColumns { input, scale }))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.check_same_shape(lhs, rhs, "add")?;
        let data: Vec<f64> = self.nodes[lhs.0]
            .data
            .iter()
            .zip(&self.nodes[rhs.0].data)
            .map(|(a, b)| a + b)
            .collect();
        let shape = self.nodes[lhs.0].shape.clone();
        Ok(self.push(shape, data, Op::Add { lhs, rhs }))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.check_same_shape(lhs, rhs, "mul")?;
        let data: Vec<f64> = self.nodes[lhs.0]
            .data
            .iter()
            .zip(&self.nodes[rhs.0].data)
            .map(|(a, b)| a * b)
            .collect();
        let shape = self.nodes[lhs.0].shape.clone();
        Ok(self.push(shape, data, Op::Mul { lhs, rhs }))
    }

    /// Elementwise 1 - x.
    pub fn one_minus(&mut self, input: Var) -> Var {
        let data: Vec<f64> = self.nodes[input.0].data.iter().map(|&v| 1.0 - v).collect();
        let shape = self.nodes[input.0].shape.clone();
        self.push(shape, data, Op::OneMinus { input })
    }

    /// Elementwise ln(max(x, floor)). The gradient is zero where clamped.
    pub fn ln_clamped(&mut self, input: Var, floor: f64) -> Var {
        let data: Vec<f64> = self.nodes[input.0]
            .data
            .iter()
            .map(|&v| v.max(floor).ln())
            .collect();
        let shape = self.nodes[input.0].shape.clone();
        self.push(shape, data, Op::LnClamped { input, floor })
    }

    /// Sum of all elements, as a scalar.
    pub fn sum_all(&mut self, input: Var) -> Var {
        let s: f64 = self.nodes[input.0].data.iter().sum();
        self.push(vec![1], vec![s], Op::SumAll { input })
    }

    fn check_same_shape(&self, lhs: Var, rhs: Var, what: &str) -> Result<()> {
        if self.nodes[lhs.0].shape != self.nodes[rhs.0].shape {
            return Err(Error::Shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.nodes[lhs.0].shape, self.nodes[rhs.0].shape
            )));
        }
        Ok(())
    }

    // ── backward ────────────────────────────────────────────────────

    /// Replays adjoints from a scalar loss in reverse recorded order.
    ///
    /// Afterwards `grad` is populated for every node the loss depends on
    /// (except constants), with contributions from multiple uses summed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Shape(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.grads = self.nodes.iter().map(|n| vec![0.0; n.data.len()]).collect();
        self.grads[loss.0][0] = 1.0;

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let (before, rest) = self.grads.split_at_mut(i);
            let g = rest[0].as_slice();
            let nodes = &self.nodes;
            match op {
                Op::Leaf => {}
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    stride,
                    padding,
                } => {
                    let [b, ci, h, w] = shape4_of(&nodes[input.0].shape);
                    let [co, _, kh, kw] = shape4_of(&nodes[kernel.0].shape);
                    let [_, _, oh, ow] = shape4_of(&nodes[i].shape);
                    if nodes[input.0].needs_grad {
                        let mut d_in = std::mem::take(&mut before[input.0]);
                        conv2d_backward_input(
                            g,
                            &nodes[kernel.0].data,
                            &mut d_in,
                            b,
                            ci,
                            h,
                            w,
                            co,
                            kh,
                            kw,
                            oh,
                            ow,
                            stride,
                            padding,
                        );
                        before[input.0] = d_in;
                    }
                    {
                        let mut d_k = std::mem::take(&mut before[kernel.0]);
                        conv2d_backward_kernel(
                            g,
                            &nodes[input.0].data,
                            &mut d_k,
                            b,
                            ci,
                            h,
                            w,
                            co,
                            kh,
                            kw,
                            oh,
                            ow,
                            stride,
                            padding,
                        );
                        before[kernel.0] = d_k;
                    }
                    let d_b = &mut before[bias.0];
                    for n in 0..b {
                        for c in 0..co {
                            let plane = &g[(n * co + c) * oh * ow..(n * co + c + 1) * oh * ow];
                            d_b[c] += plane.iter().sum::<f64>();
                        }
                    }
                }
                Op::Relu { input } => {
                    let x = &nodes[input.0].data;
                    let d = &mut before[input.0];
                    for k in 0..g.len() {
                        if x[k] > 0.0 {
                            d[k] += g[k];
                        }
                    }
                }
                Op::Sigmoid { input } => {
                    let s = &nodes[i].data;
                    let d = &mut before[input.0];
                    for k in 0..g.len() {
                        d[k] += g[k] * s[k] * (1.0 - s[k]);
                    }
                }
                Op::Concat { inputs } => {
                    let [b, channels, h, w] = shape4_of(&nodes[i].shape);
                    let plane = h * w;
                    for n in 0..b {
                        let mut c_off = 0;
                        for &v in &inputs {
                            let vc = nodes[v.0].shape[1];
                            let src = &g[(n * channels + c_off) * plane
                                ..(n * channels + c_off + vc) * plane];
                            let dst = &mut before[v.0][n * vc * plane..(n + 1) * vc * plane];
                            for k in 0..src.len() {
                                dst[k] += src[k];
                            }
                            c_off += vc;
                        }
                    }
                }
                Op::AvgPool { input, window } => {
                    let [b, c, h, w] = shape4_of(&nodes[input.0].shape);
                    let (oh, ow) = (h / window, w / window);
                    let inv = 1.0 / (window * window) as f64;
                    let d = &mut before[input.0];
                    for nc in 0..b * c {
                        let g_plane = &g[nc * oh * ow..(nc + 1) * oh * ow];
                        let d_plane = &mut d[nc * h * w..(nc + 1) * h * w];
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = g_plane[oy * ow + ox] * inv;
                                for dy in 0..window {
                                    let row = (oy * window + dy) * w + ox * window;
                                    for dx in 0..window {
                                        d_plane[row + dx] += gv;
                                    }
                                }
                            }
                        }
                    }
                }
                Op::GlobalAvgPool { input } => {
                    let [b, c, h, w] = shape4_of(&nodes[input.0].shape);
                    let inv = 1.0 / (h * w) as f64;
                    let d = &mut before[input.0];
                    for nc in 0..b * c {
                        let gv = g[nc] * inv;
                        for e in &mut d[nc * h * w..(nc + 1) * h * w] {
                            *e += gv;
                        }
                    }
                }
                Op::Linear {
                    input,
                    weight,
                    bias,
                } => {
                    let (b, n) = (nodes[input.0].shape[0], nodes[input.0].shape[1]);
                    let m = nodes[weight.0].shape[0];
                    let x = &nodes[input.0].data;
                    let wgt = &nodes[weight.0].data;
                    if nodes[input.0].needs_grad {
                        let dx = &mut before[input.0];
                        for i_row in 0..b {
                            for j in 0..m {
                                let gv = g[i_row * m + j];
                                if gv == 0.0 {
                                    continue;
                                }
                                let wrow = &wgt[j * n..(j + 1) * n];
                                let drow = &mut dx[i_row * n..(i_row + 1) * n];
                                for k in 0..n {
                                    drow[k] += gv * wrow[k];
                                }
                            }
                        }
                    }
                    {
                        let dw = &mut before[weight.0];
                        for i_row in 0..b {
                            let xrow = &x[i_row * n..(i_row + 1) * n];
                            for j in 0..m {
                                let gv = g[i_row * m + j];
                                if gv == 0.0 {
                                    continue;
                                }
                                let drow = &mut dw[j * n..(j + 1) * n];
                                for k in 0..n {
                                    drow[k] += gv * xrow[k];
                                }
                            }
                        }
                    }
                    let db = &mut before[bias.0];
                    for i_row in 0..b {
                        for j in 0..m {
                            db[j] += g[i_row * m + j];
                        }
                    }
                }
                Op::Softmax { input, row_len } => {
                    let s = &nodes[i].data;
                    let d = &mut before[input.0];
                    for (row_idx, srow) in s.chunks(row_len).enumerate() {
                        let grow = &g[row_idx * row_len..(row_idx + 1) * row_len];
                        let dot: f64 = srow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        let drow = &mut d[row_idx * row_len..(row_idx + 1) * row_len];
                        for k in 0..row_len {
                            drow[k] += srow[k] * (grow[k] - dot);
                        }
                    }
                }
                Op::SelectColumn { input, col } => {
                    let cols = nodes[input.0].shape[1];
                    let d = &mut before[input.0];
                    for (r, &gv) in g.iter().enumerate() {
                        d[r * cols + col] += gv;
                    }
                }
                Op::ScaleColumns { input, scale } => {
                    let (rows, cols) = (nodes[input.0].shape[0], nodes[input.0].shape[1]);
                    let x = &nodes[input.0].data;
                    let s = &nodes[scale.0].data;
                    {
                        let dx = &mut before[input.0];
                        for r in 0..rows {
                            for c in 0..cols {
                                dx[r * cols + c] += g[r * cols + c] * s[c];
                            }
                        }
                    }
                    let ds = &mut before[scale.0];
                    for r in 0..rows {
                        for c in 0..cols {
                            ds[c] += g[r * cols + c] * x[r * cols + c];
                        }
                    }
                }
                Op::Add { lhs, rhs } => {
                    for (k, &gv) in g.iter().enumerate() {
                        before[lhs.0][k] += gv;
                    }
                    for (k, &gv) in g.iter().enumerate() {
                        before[rhs.0][k] += gv;
                    }
                }
                Op::Mul { lhs, rhs } => {
                    let a = &nodes[lhs.0].data;
                    let b = &nodes[rhs.0].data;
                    for k in 0..g.len() {
                        before[lhs.0][k] += g[k] * b[k];
                    }
                    for k in 0..g.len() {
                        before[rhs.0][k] += g[k] * a[k];
                    }
                }
                Op::OneMinus { input } => {
                    let d = &mut before[input.0];
                    for (k, &gv) in g.iter().enumerate() {
                        d[k] -= gv;
                    }
                }
                Op::LnClamped { input, floor } => {
                    let x = &nodes[input.0].data;
                    let d = &mut before[input.0];
                    for k in 0..g.len() {
                        if x[k] > floor {
                            d[k] += g[k] / x[k];
                        }
                    }
                }
                Op::SumAll { input } => {
                    let gv = g[0];
                    for e in &mut before[input.0] {
                        *e += gv;
                    }
                }
            }
        }
        Ok(())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape4_of(shape: &[usize]) -> [usize; 4] {
    [shape[0], shape[1], shape[2], shape[3]]
}

/// Output index range [lo, hi) for which `o*stride + k - padding` lands in
/// `[0, extent)`.
fn conv_range(extent: usize, out_extent: usize, stride: usize, padding: usize, k: usize) -> (usize, usize) {
    let (p, k, s, n) = (padding as i64, k as i64, stride as i64, extent as i64);
    let lo = ((p - k + s - 1) / s).max(0);
    let hi = ((n - 1 + p - k) / s + 1).clamp(0, out_extent as i64);
    let lo = lo.min(out_extent as i64) as usize;
    (lo, (hi as usize).max(lo))
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    input: &[f64],
    kernel: &[f64],
    bias: &[f64],
    out: &mut [f64],
    b: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
) {
    for n in 0..b {
        for c_out in 0..co {
            let out_plane = &mut out[(n * co + c_out) * oh * ow..(n * co + c_out + 1) * oh * ow];
            out_plane.fill(bias[c_out]);
            for c_in in 0..ci {
                let in_plane = &input[(n * ci + c_in) * h * w..(n * ci + c_in + 1) * h * w];
                for ky in 0..kh {
                    let (oy0, oy1) = conv_range(h, oh, stride, padding, ky);
                    for kx in 0..kw {
                        let wgt = kernel[((c_out * ci + c_in) * kh + ky) * kw + kx];
                        let (ox0, ox1) = conv_range(w, ow, stride, padding, kx);
                        if ox1 <= ox0 {
                            continue;
                        }
                        for oy in oy0..oy1 {
                            let iy = oy * stride + ky - padding;
                            let in_row = &in_plane[iy * w..(iy + 1) * w];
                            let out_row = &mut out_plane[oy * ow..(oy + 1) * ow];
                            if stride == 1 {
                                let ix0 = ox0 + kx - padding;
                                let len = ox1 - ox0;
                                let src = &in_row[ix0..ix0 + len];
                                let dst = &mut out_row[ox0..ox1];
                                for k in 0..len {
                                    dst[k] += wgt * src[k];
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    out_row[ox] += wgt * in_row[ox * stride + kx - padding];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_input(
    g: &[f64],
    kernel: &[f64],
    d_input: &mut [f64],
    b: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
) {
    for n in 0..b {
        for c_out in 0..co {
            let g_plane = &g[(n * co + c_out) * oh * ow..(n * co + c_out + 1) * oh * ow];
            for c_in in 0..ci {
                let d_plane = &mut d_input[(n * ci + c_in) * h * w..(n * ci + c_in + 1) * h * w];
                for ky in 0..kh {
                    let (oy0, oy1) = conv_range(h, oh, stride, padding, ky);
                    for kx in 0..kw {
                        let wgt = kernel[((c_out * ci + c_in) * kh + ky) * kw + kx];
                        let (ox0, ox1) = conv_range(w, ow, stride, padding, kx);
                        if ox1 <= ox0 || wgt == 0.0 {
                            continue;
                        }
                        for oy in oy0..oy1 {
                            let iy = oy * stride + ky - padding;
                            let g_row = &g_plane[oy * ow..(oy + 1) * ow];
                            let d_row = &mut d_plane[iy * w..(iy + 1) * w];
                            if stride == 1 {
                                let ix0 = ox0 + kx - padding;
                                let len = ox1 - ox0;
                                let dst = &mut d_row[ix0..ix0 + len];
                                let src = &g_row[ox0..ox1];
                                for k in 0..len {
                                    dst[k] += wgt * src[k];
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    d_row[ox * stride + kx - padding] += wgt * g_row[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_kernel(
    g: &[f64],
    input: &[f64],
    d_kernel: &mut [f64],
    b: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
) {
    for n in 0..b {
        for c_out in 0..co {
            let g_plane = &g[(n * co + c_out) * oh * ow..(n * co + c_out + 1) * oh * ow];
            for c_in in 0..ci {
                let in_plane = &input[(n * ci + c_in) * h * w..(n * ci + c_in + 1) * h * w];
                for ky in 0..kh {
                    let (oy0, oy1) = conv_range(h, oh, stride, padding, ky);
                    for kx in 0..kw {
                        let (ox0, ox1) = conv_range(w, ow, stride, padding, kx);
                        if ox1 <= ox0 {
                            continue;
                        }
                        let mut acc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy * stride + ky - padding;
                            let g_row = &g_plane[oy * ow..(oy + 1) * ow];
                            let in_row = &in_plane[iy * w..(iy + 1) * w];
                            if stride == 1 {
                                let ix0 = ox0 + kx - padding;
                                let len = ox1 - ox0;
                                let a = &g_row[ox0..ox1];
                                let x = &in_row[ix0..ix0 + len];
                                for k in 0..len {
                                    acc += a[k] * x[k];
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    acc += g_row[ox] * in_row[ox * stride + kx - padding];
                                }
                            }
                        }
                        d_kernel[((c_out * ci + c_in) * kh + ky) * kw + kx] += acc;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv2d_scaling_kernel() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 1, 3, 3], &[1.0; 9]));
        let k = tape.leaf(&t(&[1, 1, 1, 1], &[2.0]));
        let b = tape.leaf(&t(&[1], &[0.0]));
        let y = tape.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 3, 3]);
        assert_eq!(tape.data(y), &[2.0; 9]);
    }

    #[test]
    fn conv2d_sums_window() {
        let mut tape = Tape::new();
        let vals: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        let x = tape.leaf(&t(&[1, 1, 3, 3], &vals));
        let k = tape.leaf(&t(&[1, 1, 3, 3], &[1.0; 9]));
        let b = tape.leaf(&t(&[1], &[0.0]));
        let y = tape.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert_eq!(tape.data(y), &[45.0]);
    }

    #[test]
    fn conv2d_channel_mismatch_is_diagnosed() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(vec![1, 3, 4, 4]));
        let k = tape.leaf(&Tensor::zeros(vec![2, 4, 3, 3]));
        let b = tape.leaf(&Tensor::zeros(vec![2]));
        let err = tape.conv2d(x, k, b, 1, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("3 channels"), "got: {msg}");
        assert!(msg.contains("4"), "got: {msg}");
    }

    #[test]
    fn conv2d_strided_output_extent() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(vec![1, 1, 8, 8]));
        let k = tape.leaf(&Tensor::zeros(vec![2, 1, 3, 3]));
        let b = tape.leaf(&Tensor::zeros(vec![2]));
        let y = tape.conv2d(x, k, b, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 4, 4]);
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.data(y), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu_all_negative_has_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![-1.0, -2.0, -0.5]));
        let y = tape.relu(x);
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.data(y), &[0.0; 3]);
        assert_eq!(tape.grad(x), &[0.0; 3]);
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(0.0));
        let y = tape.sigmoid(x);
        assert_eq!(tape.data(y), &[0.5]);
    }

    #[test]
    fn sigmoid_symmetry() {
        let xs = [-3.7, -0.2, 0.9, 4.4];
        for &v in &xs {
            let mut tape = Tape::new();
            let a = tape.leaf(&Tensor::scalar(v));
            let b = tape.leaf(&Tensor::scalar(-v));
            let sa = tape.sigmoid(a);
            let sb = tape.sigmoid(b);
            let lhs = tape.data(sa)[0];
            let rhs = 1.0 - tape.data(sb)[0];
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_single_input_is_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
        let y = tape.concat_channels(&[x]).unwrap();
        assert_eq!(tape.data(y), tape.data(x));
        assert_eq!(tape.shape(y), tape.shape(x));
    }

    #[test]
    fn concat_orders_channels_as_given() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::filled(vec![1, 2, 2, 2], 1.0));
        let b = tape.leaf(&Tensor::filled(vec![1, 3, 2, 2], 2.0));
        let y = tape.concat_channels(&[a, b]).unwrap();
        assert_eq!(tape.shape(y), &[1, 5, 2, 2]);
        let d = tape.data(y);
        assert!(d[..8].iter().all(|&v| v == 1.0));
        assert!(d[8..].iter().all(|&v| v == 2.0));
    }

    #[test]
    fn concat_backward_routes_ones() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::filled(vec![2, 1, 2, 2], 3.0));
        let b = tape.leaf(&Tensor::filled(vec![2, 2, 2, 2], 4.0));
        let y = tape.concat_channels(&[a, b]).unwrap();
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a), &[1.0; 8]);
        assert_eq!(tape.grad(b), &[1.0; 16]);
    }

    #[test]
    fn concat_spatial_mismatch_is_diagnosed() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(vec![1, 1, 2, 2]));
        let b = tape.leaf(&Tensor::zeros(vec![1, 1, 3, 3]));
        let err = tape.concat_channels(&[a, b]).unwrap_err();
        assert!(err.to_string().contains("does not match"));
    }

    #[test]
    fn avg_pool_constant_stays_constant() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::filled(vec![1, 1, 4, 4], 7.5));
        let y = tape.avg_pool2d(x, 2).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
        assert_eq!(tape.data(y), &[7.5; 4]);
    }

    #[test]
    fn avg_pool_means_window() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.avg_pool2d(x, 2).unwrap();
        assert_eq!(tape.data(y), &[2.5]);
    }

    #[test]
    fn avg_pool_grad_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.avg_pool2d(x, 2).unwrap();
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x), &[0.25; 4]);
    }

    #[test]
    fn avg_pool_indivisible_extent_names_dimension() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(vec![1, 1, 5, 4]));
        let err = tape.avg_pool2d(x, 2).unwrap_err();
        assert!(err.to_string().contains("height 5"), "got: {err}");
    }

    #[test]
    fn gap_constant_map() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::filled(vec![2, 3, 4, 4], -1.25));
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.shape(y), &[2, 3]);
        assert_eq!(tape.data(y), &[-1.25; 6]);
    }

    #[test]
    fn gap_means_spatial() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.data(y), &[2.5]);
    }

    #[test]
    fn gap_commutes_with_concat() {
        let mut rng = 1234u64;
        let mut next = || {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (rng >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let a_data: Vec<f64> = (0..2 * 2 * 3 * 3).map(|_| next()).collect();
        let b_data: Vec<f64> = (0..2 * 4 * 3 * 3).map(|_| next()).collect();
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2, 2, 3, 3], &a_data));
        let b = tape.leaf(&t(&[2, 4, 3, 3], &b_data));
        let cat = tape.concat_channels(&[a, b]).unwrap();
        let lhs = tape.global_avg_pool(cat).unwrap();
        let ga = tape.global_avg_pool(a).unwrap();
        let gb = tape.global_avg_pool(b).unwrap();
        let lhs_data = tape.data(lhs);
        for n in 0..2 {
            for c in 0..2 {
                assert!((lhs_data[n * 6 + c] - tape.data(ga)[n * 2 + c]).abs() < 1e-15);
            }
            for c in 0..4 {
                assert!((lhs_data[n * 6 + 2 + c] - tape.data(gb)[n * 4 + c]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn fully_connected_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 3], &[4.0, 5.0, 6.0]));
        let w = tape.leaf(&t(
            &[3, 3],
            &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        ));
        let b = tape.leaf(&Tensor::zeros(vec![3]));
        let y = tape.fully_connected(x, w, b).unwrap();
        assert_eq!(tape.data(y), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn fully_connected_affine() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 2], &[1.0, 2.0]));
        let w = tape.leaf(&t(&[1, 2], &[3.0, 4.0]));
        let b = tape.leaf(&t(&[1], &[5.0]));
        let y = tape.fully_connected(x, w, b).unwrap();
        assert_eq!(tape.data(y), &[16.0]);
    }

    #[test]
    fn fully_connected_shape_mismatch() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(vec![1, 3]));
        let w = tape.leaf(&Tensor::zeros(vec![2, 4]));
        let b = tape.leaf(&Tensor::zeros(vec![2]));
        assert!(tape.fully_connected(x, w, b).is_err());
    }

    #[test]
    fn softmax_uniform_for_equal_inputs() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![0.0, 0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        for &v in tape.data(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_is_stable_for_large_inputs() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![1000.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        let d = tape.data(y);
        assert!(d.iter().all(|v| v.is_finite()));
        assert!((d[0] - 1.0).abs() < 1e-12);
        assert!(d[1] < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance_and_sum() {
        let base = [0.3, -1.2, 2.5, 0.0];
        for shift in [-100.0, -1.0, 0.7, 55.0] {
            let shifted: Vec<f64> = base.iter().map(|v| v + shift).collect();
            let mut tape = Tape::new();
            let a = tape.leaf(&Tensor::from_vec(base.to_vec()));
            let b = tape.leaf(&Tensor::from_vec(shifted));
            let sa = tape.softmax(a).unwrap();
            let sb = tape.softmax(b).unwrap();
            let sum: f64 = tape.data(sa).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            for (x, y) in tape.data(sa).iter().zip(tape.data(sb)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![3.0, -1.0, 0.5, 9.0]));
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x), &[1.0; 4]);
    }

    #[test]
    fn backward_of_sum_of_squares_is_2x() {
        let mut tape = Tape::new();
        let vals = vec![3.0, -1.0, 0.5, 9.0];
        let x = tape.leaf(&Tensor::from_vec(vals.clone()));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        let expect: Vec<f64> = vals.iter().map(|v| 2.0 * v).collect();
        assert_eq!(tape.grad(x), expect.as_slice());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn reuse_accumulates_adjoints() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![1.0, 2.0]));
        let doubled = tape.add(x, x).unwrap();
        let loss = tape.sum_all(doubled);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x), &[2.0, 2.0]);
    }

    #[test]
    fn constants_do_not_receive_grads() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::from_vec(vec![1.0, 2.0]));
        let p = tape.param(&Tensor::from_vec(vec![3.0, 4.0]));
        let y = tape.mul(x, p).unwrap();
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x), &[0.0, 0.0]);
        assert_eq!(tape.grad(p), &[1.0, 2.0]);
    }
}
