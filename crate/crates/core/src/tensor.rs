//! Dense f64 tensors with a reverse-mode differentiation tape.
//!
//! A [`Tape`] records primitive operations during a forward pass and replays
//! them in reverse to accumulate gradients via the chain rule. Tensors on the
//! tape are addressed by [`NodeId`]; plain [`Tensor`] values carry data in and
//! out. A tape is confined to one thread and supports exactly one backward
//! pass per recording.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("index {index} out of range for extent {extent}")]
    IndexOutOfRange { index: usize, extent: usize },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("tape already consumed by a backward pass")]
    TapeConsumed,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid tensor: {0}")]
    Invalid(String),
}

/// Dense n-dimensional array of finite f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that extents are positive, the data length
    /// matches the shape product, and every value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.is_empty() || shape.iter().any(|&e| e == 0) {
            return Err(TensorError::Invalid(format!(
                "extents must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Invalid(format!(
                "shape {:?} implies {} values, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite("tensor construction"));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        assert!(numel > 0, "zero-extent shape {shape:?}");
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let mut t = Tensor::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

/// Numerically stabilized softmax (max subtraction).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
struct ConvDims {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    h_out: usize,
    w_out: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        x: NodeId,
        kernel: NodeId,
        stride: usize,
        padding: usize,
        dims: ConvDims,
    },
    AvgPool2 {
        x: NodeId,
    },
    Relu {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    // bias of shape [c] broadcast over the trailing dims of x [c, ...]
    AddBias {
        x: NodeId,
        bias: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        factor: f64,
    },
    Sum {
        x: NodeId,
    },
    Dot {
        a: NodeId,
        b: NodeId,
    },
    Reshape {
        x: NodeId,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        label: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Recording of a forward computation, in topological order.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Option<Vec<Vec<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: None,
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<NodeId, TensorError> {
        if self.grads.is_some() {
            return Err(TensorError::TapeConsumed);
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad: false,
        });
        Ok(id)
    }

    /// Records a leaf holding a copy of `value`.
    pub fn leaf(&mut self, value: &Tensor, requires_grad: bool) -> Result<NodeId, TensorError> {
        let id = self.push(value.shape().to_vec(), value.data().to_vec(), Op::Leaf)?;
        self.nodes[id.0].requires_grad = requires_grad;
        Ok(id)
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn scalar(&self, id: NodeId) -> Result<f64, TensorError> {
        let node = &self.nodes[id.0];
        if node.data.len() != 1 {
            return Err(TensorError::NonScalarRoot(node.shape.clone()));
        }
        Ok(node.data[0])
    }

    pub fn tensor(&self, id: NodeId) -> Tensor {
        let node = &self.nodes[id.0];
        Tensor {
            shape: node.shape.clone(),
            data: node.data.clone(),
        }
    }

    /// Gradient of the backward root w.r.t. node `id`, if backward has run.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.as_ref().map(|g| g[id.0].as_slice())
    }

    // ── forward primitives ──────────────────────────────────────────

    /// Matrix product of `a` [m,k] and `b` [k,n].
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 {
            return Err(TensorError::Dimension(format!(
                "matmul needs 2-d operands, got {sa:?} and {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        if sb[0] != k {
            return Err(TensorError::ShapeMismatch(format!(
                "matmul inner extents differ: {sa:?} vs {sb:?}"
            )));
        }
        let data = matmul_raw(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        self.push(vec![m, n], data, Op::MatMul { a, b, m, k, n })
    }

    /// Cross-correlation (no kernel flip) of `x` [c_in,h,w] with
    /// `kernel` [c_out,c_in,kh,kw].
    pub fn conv2d(
        &mut self,
        x: NodeId,
        kernel: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId, TensorError> {
        let (sx, sk) = (&self.nodes[x.0].shape, &self.nodes[kernel.0].shape);
        if sx.len() != 3 || sk.len() != 4 {
            return Err(TensorError::Dimension(format!(
                "conv2d needs x [c,h,w] and kernel [co,ci,kh,kw], got {sx:?} and {sk:?}"
            )));
        }
        if stride == 0 {
            return Err(TensorError::Dimension("conv2d stride must be positive".into()));
        }
        let (c_in, h, w) = (sx[0], sx[1], sx[2]);
        let (c_out, kc, kh, kw) = (sk[0], sk[1], sk[2], sk[3]);
        if kc != c_in {
            return Err(TensorError::ShapeMismatch(format!(
                "conv2d channel mismatch: input {c_in}, kernel expects {kc}"
            )));
        }
        let h_span = h + 2 * padding;
        let w_span = w + 2 * padding;
        if kh > h_span || kw > w_span || (h_span - kh) % stride != 0 || (w_span - kw) % stride != 0
        {
            return Err(TensorError::Dimension(format!(
                "conv2d output extent not integral for input {h}x{w}, kernel {kh}x{kw}, \
                 stride {stride}, padding {padding}"
            )));
        }
        let h_out = (h_span - kh) / stride + 1;
        let w_out = (w_span - kw) / stride + 1;
        let dims = ConvDims {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            h_out,
            w_out,
        };

        let xd = &self.nodes[x.0].data;
        let kd = &self.nodes[kernel.0].data;
        let mut out = vec![0.0; c_out * h_out * w_out];
        for co in 0..c_out {
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let mut acc = 0.0;
                    for ci in 0..c_in {
                        for ky in 0..kh {
                            let iy = oy * stride + ky;
                            if iy < padding || iy - padding >= h {
                                continue;
                            }
                            let iy = iy - padding;
                            for kx in 0..kw {
                                let ix = ox * stride + kx;
                                if ix < padding || ix - padding >= w {
                                    continue;
                                }
                                let ix = ix - padding;
                                acc += xd[(ci * h + iy) * w + ix]
                                    * kd[((co * c_in + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[(co * h_out + oy) * w_out + ox] = acc;
                }
            }
        }
        self.push(
            vec![c_out, h_out, w_out],
            out,
            Op::Conv2d {
                x,
                kernel,
                stride,
                padding,
                dims,
            },
        )
    }

    /// 2x2 average pooling with stride 2 over `x` [c,h,w]; h and w must be even.
    pub fn avg_pool2(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let sx = &self.nodes[x.0].shape;
        if sx.len() != 3 {
            return Err(TensorError::Dimension(format!(
                "avg_pool2 needs [c,h,w], got {sx:?}"
            )));
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::Dimension(format!(
                "avg_pool2 needs even spatial extents, got {h}x{w}"
            )));
        }
        let (ho, wo) = (h / 2, w / 2);
        let xd = &self.nodes[x.0].data;
        let mut out = vec![0.0; c * ho * wo];
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            acc += xd[(ci * h + 2 * oy + dy) * w + 2 * ox + dx];
                        }
                    }
                    out[(ci * ho + oy) * wo + ox] = acc * 0.25;
                }
            }
        }
        self.push(vec![c, ho, wo], out, Op::AvgPool2 { x })
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let shape = self.nodes[x.0].shape.clone();
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| v.max(0.0)).collect();
        self.push(shape, data, Op::Relu { x })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.same_shape(a, b, "add")?;
        let shape = self.nodes[a.0].shape.clone();
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        self.push(shape, data, Op::Add { a, b })
    }

    /// Adds `bias` [c] to `x` [c, ...], broadcasting over trailing dims.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let (sx, sb) = (&self.nodes[x.0].shape, &self.nodes[bias.0].shape);
        if sb.len() != 1 || sx.is_empty() || sx[0] != sb[0] {
            return Err(TensorError::ShapeMismatch(format!(
                "add_bias needs x [c, ...] and bias [c], got {sx:?} and {sb:?}"
            )));
        }
        let c = sx[0];
        let inner: usize = sx[1..].iter().product();
        let shape = sx.clone();
        let bd = &self.nodes[bias.0].data;
        let data: Vec<f64> = self.nodes[x.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i / inner.max(1)])
            .collect();
        debug_assert_eq!(data.len(), c * inner.max(1));
        self.push(shape, data, Op::AddBias { x, bias })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.same_shape(a, b, "sub")?;
        let shape = self.nodes[a.0].shape.clone();
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        self.push(shape, data, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.same_shape(a, b, "mul")?;
        let shape = self.nodes[a.0].shape.clone();
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        self.push(shape, data, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId, TensorError> {
        let shape = self.nodes[x.0].shape.clone();
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| v * factor).collect();
        self.push(shape, data, Op::Scale { x, factor })
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let s: f64 = self.nodes[x.0].data.iter().sum();
        self.push(vec![1], vec![s], Op::Sum { x })
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.same_shape(a, b, "dot")?;
        let s: f64 = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .sum();
        self.push(vec![1], vec![s], Op::Dot { a, b })
    }

    pub fn reshape(&mut self, x: NodeId, new_shape: Vec<usize>) -> Result<NodeId, TensorError> {
        let numel: usize = new_shape.iter().product();
        if numel != self.nodes[x.0].data.len() || new_shape.iter().any(|&e| e == 0) {
            return Err(TensorError::ShapeMismatch(format!(
                "reshape {:?} -> {:?} changes element count",
                self.nodes[x.0].shape, new_shape
            )));
        }
        let data = self.nodes[x.0].data.clone();
        self.push(new_shape, data, Op::Reshape { x })
    }

    /// Cross-entropy of softmax(logits) against a class index, stabilized by
    /// max subtraction. Gradient w.r.t. logits is softmax - onehot(label).
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        label: usize,
    ) -> Result<NodeId, TensorError> {
        let ld = &self.nodes[logits.0].data;
        let n = ld.len();
        if label >= n {
            return Err(TensorError::IndexOutOfRange {
                index: label,
                extent: n,
            });
        }
        let max = ld.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = ld.iter().map(|&l| (l - max).exp()).sum();
        let loss = sum_exp.ln() + max - ld[label];
        let probs = softmax(ld);
        self.push(
            vec![1],
            vec![loss],
            Op::SoftmaxCrossEntropy {
                logits,
                label,
                probs,
            },
        )
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<(), TensorError> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TensorError::ShapeMismatch(format!(
                "{what} needs equal shapes, got {:?} and {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        Ok(())
    }

    // ── backward ────────────────────────────────────────────────────

    /// Accumulates d(root)/d(node) for every node on the tape. `root` must be
    /// scalar; a second call on the same tape is an error.
    pub fn backward(&mut self, root: NodeId) -> Result<(), TensorError> {
        if self.grads.is_some() {
            return Err(TensorError::TapeConsumed);
        }
        if self.nodes[root.0].data.len() != 1 {
            return Err(TensorError::NonScalarRoot(self.nodes[root.0].shape.clone()));
        }
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.data.len()])
            .collect();
        grads[root.0][0] = 1.0;

        for i in (0..=root.0).rev() {
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul { a, b, m, k, n } => {
                    let g = std::mem::take(&mut grads[i]);
                    // dA = G B^T, dB = A^T G
                    {
                        let bd = &self.nodes[b.0].data;
                        let ga = &mut grads[a.0];
                        for r in 0..m {
                            for c in 0..k {
                                let mut acc = 0.0;
                                for j in 0..n {
                                    acc += g[r * n + j] * bd[c * n + j];
                                }
                                ga[r * k + c] += acc;
                            }
                        }
                    }
                    {
                        let ad = &self.nodes[a.0].data;
                        let gb = &mut grads[b.0];
                        for r in 0..k {
                            for c in 0..n {
                                let mut acc = 0.0;
                                for j in 0..m {
                                    acc += ad[j * k + r] * g[j * n + c];
                                }
                                gb[r * n + c] += acc;
                            }
                        }
                    }
                    grads[i] = g;
                }
                Op::Conv2d {
                    x,
                    kernel,
                    stride,
                    padding,
                    dims,
                } => {
                    let g = std::mem::take(&mut grads[i]);
                    let ConvDims {
                        c_in,
                        h,
                        w,
                        c_out,
                        kh,
                        kw,
                        h_out,
                        w_out,
                    } = dims;
                    // split the two borrows: first dX (needs kernel data),
                    // then dK (needs x data)
                    {
                        let kd = &self.nodes[kernel.0].data;
                        let gx = &mut grads[x.0];
                        for co in 0..c_out {
                            for oy in 0..h_out {
                                for ox in 0..w_out {
                                    let go = g[(co * h_out + oy) * w_out + ox];
                                    if go == 0.0 {
                                        continue;
                                    }
                                    for ci in 0..c_in {
                                        for ky in 0..kh {
                                            let iy = oy * stride + ky;
                                            if iy < padding || iy - padding >= h {
                                                continue;
                                            }
                                            let iy = iy - padding;
                                            for kx in 0..kw {
                                                let ix = ox * stride + kx;
                                                if ix < padding || ix - padding >= w {
                                                    continue;
                                                }
                                                let ix = ix - padding;
                                                gx[(ci * h + iy) * w + ix] += go
                                                    * kd[((co * c_in + ci) * kh + ky) * kw + kx];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    {
                        let xd = &self.nodes[x.0].data;
                        let gk = &mut grads[kernel.0];
                        for co in 0..c_out {
                            for oy in 0..h_out {
                                for ox in 0..w_out {
                                    let go = g[(co * h_out + oy) * w_out + ox];
                                    if go == 0.0 {
                                        continue;
                                    }
                                    for ci in 0..c_in {
                                        for ky in 0..kh {
                                            let iy = oy * stride + ky;
                                            if iy < padding || iy - padding >= h {
                                                continue;
                                            }
                                            let iy = iy - padding;
                                            for kx in 0..kw {
                                                let ix = ox * stride + kx;
                                                if ix < padding || ix - padding >= w {
                                                    continue;
                                                }
                                                let ix = ix - padding;
                                                gk[((co * c_in + ci) * kh + ky) * kw + kx] +=
                                                    go * xd[(ci * h + iy) * w + ix];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    grads[i] = g;
                }
                Op::AvgPool2 { x } => {
                    let g = std::mem::take(&mut grads[i]);
                    let sx = &self.nodes[x.0].shape;
                    let (c, h, w) = (sx[0], sx[1], sx[2]);
                    let (ho, wo) = (h / 2, w / 2);
                    let gx = &mut grads[x.0];
                    for ci in 0..c {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let go = g[(ci * ho + oy) * wo + ox] * 0.25;
                                for dy in 0..2 {
                                    for dx in 0..2 {
                                        gx[(ci * h + 2 * oy + dy) * w + 2 * ox + dx] += go;
                                    }
                                }
                            }
                        }
                    }
                    grads[i] = g;
                }
                Op::Relu { x } => {
                    let g = std::mem::take(&mut grads[i]);
                    {
                        let xd = &self.nodes[x.0].data;
                        let gx = &mut grads[x.0];
                        for (j, &go) in g.iter().enumerate() {
                            if xd[j] > 0.0 {
                                gx[j] += go;
                            }
                        }
                    }
                    grads[i] = g;
                }
                Op::Add { a, b } => {
                    let g = std::mem::take(&mut grads[i]);
                    for (j, &go) in g.iter().enumerate() {
                        grads[a.0][j] += go;
                    }
                    for (j, &go) in g.iter().enumerate() {
                        grads[b.0][j] += go;
                    }
                    grads[i] = g;
                }
                Op::AddBias { x, bias } => {
                    let g = std::mem::take(&mut grads[i]);
                    let inner: usize = self.nodes[x.0].shape[1..].iter().product::<usize>().max(1);
                    for (j, &go) in g.iter().enumerate() {
                        grads[x.0][j] += go;
                    }
                    for (j, &go) in g.iter().enumerate() {
                        grads[bias.0][j / inner] += go;
                    }
                    grads[i] = g;
                }
                Op::Sub { a, b } => {
                    let g = std::mem::take(&mut grads[i]);
                    for (j, &go) in g.iter().enumerate() {
                        grads[a.0][j] += go;
                    }
                    for (j, &go) in g.iter().enumerate() {
                        grads[b.0][j] -= go;
                    }
                    grads[i] = g;
                }
                Op::Mul { a, b } => {
                    let g = std::mem::take(&mut grads[i]);
                    {
                        let bd = &self.nodes[b.0].data;
                        let ga = &mut grads[a.0];
                        for (j, &go) in g.iter().enumerate() {
                            ga[j] += go * bd[j];
                        }
                    }
                    {
                        let ad = &self.nodes[a.0].data;
                        let gb = &mut grads[b.0];
                        for (j, &go) in g.iter().enumerate() {
                            gb[j] += go * ad[j];
                        }
                    }
                    grads[i] = g;
                }
                Op::Scale { x, factor } => {
                    let g = std::mem::take(&mut grads[i]);
                    for (j, &go) in g.iter().enumerate() {
                        grads[x.0][j] += go * factor;
                    }
                    grads[i] = g;
                }
                Op::Sum { x } => {
                    let go = grads[i][0];
                    for v in grads[x.0].iter_mut() {
                        *v += go;
                    }
                }
                Op::Dot { a, b } => {
                    let go = grads[i][0];
                    {
                        let bd = &self.nodes[b.0].data;
                        let ga = &mut grads[a.0];
                        for (j, &bv) in bd.iter().enumerate() {
                            ga[j] += go * bv;
                        }
                    }
                    {
                        let ad = &self.nodes[a.0].data;
                        let gb = &mut grads[b.0];
                        for (j, &av) in ad.iter().enumerate() {
                            gb[j] += go * av;
                        }
                    }
                }
                Op::Reshape { x } => {
                    let g = std::mem::take(&mut grads[i]);
                    for (j, &go) in g.iter().enumerate() {
                        grads[x.0][j] += go;
                    }
                    grads[i] = g;
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    label,
                    probs,
                } => {
                    let go = grads[i][0];
                    let gl = &mut grads[logits.0];
                    for (j, &p) in probs.iter().enumerate() {
                        let onehot = if j == label { 1.0 } else { 0.0 };
                        gl[j] += go * (p - onehot);
                    }
                }
            }
        }
        self.grads = Some(grads);
        Ok(())
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        for p in 0..k {
            let av = a[r * k + p];
            if av == 0.0 {
                continue;
            }
            let row = &b[p * n..(p + 1) * n];
            let dst = &mut out[r * n..(r + 1) * n];
            for (d, &bv) in dst.iter_mut().zip(row) {
                *d += av * bv;
            }
        }
    }
    out
}

/// Compares the tape gradient of a scalar function against central finite
/// differences, coordinate by coordinate.
///
/// `build` records the function on a fresh tape given the input leaf. Returns
/// the max relative error with denominator max(|analytic|, |numeric|, 1e-8).
pub fn finite_difference_check<F>(
    build: F,
    point: &Tensor,
    step: f64,
) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId, TensorError>,
{
    if step <= 0.0 {
        return Err(TensorError::Invalid("finite difference step must be positive".into()));
    }
    let eval = |t: &Tensor| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let x = tape.leaf(t, false)?;
        let root = build(&mut tape, x)?;
        let v = tape.scalar(root)?;
        if !v.is_finite() {
            return Err(TensorError::NonFinite("finite difference evaluation"));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let x = tape.leaf(point, true)?;
    let root = build(&mut tape, x)?;
    if !tape.scalar(root)?.is_finite() {
        return Err(TensorError::NonFinite("finite difference evaluation"));
    }
    tape.backward(root)?;
    let analytic = tape.grad(x).expect("backward ran").to_vec();

    let mut probe = point.clone();
    let mut max_rel: f64 = 0.0;
    for i in 0..point.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * step);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        max_rel = max_rel.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let eye = Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let b = Tensor::new(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let a = tape.leaf(&eye, false).unwrap();
        let bid = tape.leaf(&b, false).unwrap();
        let c = tape.matmul(a, bid).unwrap();
        assert_eq!(tape.value(c), b.data());
    }

    #[test]
    fn matmul_hand_case() {
        let mut tape = Tape::new();
        let a = tape
            .leaf(&Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]).unwrap(), false)
            .unwrap();
        let b = tape
            .leaf(&Tensor::new(vec![2, 1], vec![1., 1.]).unwrap(), false)
            .unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(vec![2, 3]), false).unwrap();
        let b = tape.leaf(&Tensor::zeros(vec![2, 2]), false).unwrap();
        assert!(matches!(
            tape.matmul(a, b),
            Err(TensorError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn matmul_gradient_analytic_and_fd() {
        let mut r = rng(7);
        let a = random_tensor(vec![4, 5], &mut r);
        let b = random_tensor(vec![5, 3], &mut r);

        // gradient of sum(a.b) w.r.t. a is ones(4,3) . b^T
        let mut tape = Tape::new();
        let aid = tape.leaf(&a, true).unwrap();
        let bid = tape.leaf(&b, false).unwrap();
        let c = tape.matmul(aid, bid).unwrap();
        let loss = tape.sum(c).unwrap();
        tape.backward(loss).unwrap();
        let ga = tape.grad(aid).unwrap();
        for row in 0..4 {
            for col in 0..5 {
                let expected: f64 = (0..3).map(|j| b.data()[col * 3 + j]).sum();
                assert!((ga[row * 5 + col] - expected).abs() < 1e-12);
            }
        }

        let err = finite_difference_check(
            |tape, x| {
                let bid = tape.leaf(&b, false)?;
                let c = tape.matmul(x, bid)?;
                tape.sum(c)
            },
            &a,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "matmul fd error {err}");
    }

    #[test]
    fn conv_identity_kernel() {
        let mut r = rng(3);
        let x = random_tensor(vec![1, 4, 4], &mut r);
        let k = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let mut tape = Tape::new();
        let xid = tape.leaf(&x, false).unwrap();
        let kid = tape.leaf(&k, false).unwrap();
        let y = tape.conv2d(xid, kid, 1, 0).unwrap();
        assert_eq!(tape.value(y), x.data());
    }

    #[test]
    fn conv_all_ones() {
        let x = Tensor::filled(vec![1, 5, 5], 1.0);
        let k = Tensor::filled(vec![1, 1, 3, 3], 1.0);
        let mut tape = Tape::new();
        let xid = tape.leaf(&x, false).unwrap();
        let kid = tape.leaf(&k, false).unwrap();
        let y = tape.conv2d(xid, kid, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 3, 3]);
        assert!(tape.value(y).iter().all(|&v| v == 9.0));
    }

    #[test]
    fn conv_non_integral_output() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(vec![1, 5, 5]), false).unwrap();
        let k = tape.leaf(&Tensor::zeros(vec![1, 1, 2, 2]), false).unwrap();
        assert!(matches!(
            tape.conv2d(x, k, 2, 0),
            Err(TensorError::Dimension(_))
        ));
    }

    #[test]
    fn conv_gradients_match_fd() {
        let mut r = rng(11);
        let x = random_tensor(vec![2, 5, 5], &mut r);
        let k = random_tensor(vec![3, 2, 3, 3], &mut r);

        let err_x = finite_difference_check(
            |tape, xid| {
                let kid = tape.leaf(&k, false)?;
                let y = tape.conv2d(xid, kid, 1, 1)?;
                tape.sum(y)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err_x < 1e-5, "conv fd error wrt x {err_x}");

        let err_k = finite_difference_check(
            |tape, kid| {
                let xid = tape.leaf(&x, false)?;
                let y = tape.conv2d(xid, kid, 2, 1)?;
                tape.sum(y)
            },
            &k,
            1e-5,
        )
        .unwrap();
        assert!(err_k < 1e-5, "conv fd error wrt k {err_k}");
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let mut tape = Tape::new();
        let logits = tape
            .leaf(&Tensor::new(vec![4], vec![0.3, 0.3, 0.3, 0.3]).unwrap(), false)
            .unwrap();
        let loss = tape.softmax_cross_entropy(logits, 1).unwrap();
        assert!((tape.scalar(loss).unwrap() - 4.0f64.ln()).abs() < 1e-12);

        let mut tape = Tape::new();
        let logits = tape
            .leaf(&Tensor::new(vec![3], vec![0.0, 30.0, 0.0]).unwrap(), false)
            .unwrap();
        let loss = tape.softmax_cross_entropy(logits, 1).unwrap();
        assert!(tape.scalar(loss).unwrap() < 1e-10);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut tape = Tape::new();
        let logits = tape.leaf(&Tensor::zeros(vec![4]), false).unwrap();
        assert!(matches!(
            tape.softmax_cross_entropy(logits, 4),
            Err(TensorError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn cross_entropy_gradient_matches_fd() {
        let mut r = rng(23);
        let logits = random_tensor(vec![6], &mut r);
        let err = finite_difference_check(
            |tape, x| tape.softmax_cross_entropy(x, 2),
            &logits,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "cross entropy fd error {err}");
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut r = rng(5);
        let x = random_tensor(vec![3, 4], &mut r);
        let mut tape = Tape::new();
        let xid = tape.leaf(&x, true).unwrap();
        let s = tape.sum(xid).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(xid).unwrap().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn backward_of_inner_product_is_weights() {
        let mut r = rng(9);
        let w = random_tensor(vec![8], &mut r);
        let x = random_tensor(vec![8], &mut r);
        let mut tape = Tape::new();
        let wid = tape.leaf(&w, false).unwrap();
        let xid = tape.leaf(&x, true).unwrap();
        let d = tape.dot(wid, xid).unwrap();
        tape.backward(d).unwrap();
        assert_eq!(tape.grad(xid).unwrap(), w.data());
    }

    #[test]
    fn two_layer_mlp_gradients_match_fd() {
        let mut r = rng(41);
        let w1 = random_tensor(vec![6, 4], &mut r);
        let b1 = random_tensor(vec![6], &mut r);
        let w2 = random_tensor(vec![3, 6], &mut r);
        let x = random_tensor(vec![4, 1], &mut r);

        // finite differences over a packed parameter vector, evaluated by
        // unpacking into fresh leaves
        let mut theta = Vec::new();
        theta.extend_from_slice(w1.data());
        theta.extend_from_slice(b1.data());
        theta.extend_from_slice(w2.data());
        let theta = Tensor::new(vec![theta.len()], theta).unwrap();

        let unpack = |t: &Tensor| -> (Tensor, Tensor, Tensor) {
            let d = t.data();
            let w1 = Tensor::new(vec![6, 4], d[0..24].to_vec()).unwrap();
            let b1 = Tensor::new(vec![6], d[24..30].to_vec()).unwrap();
            let w2 = Tensor::new(vec![3, 6], d[30..48].to_vec()).unwrap();
            (w1, b1, w2)
        };
        let forward = |tape: &mut Tape,
                       w1: NodeId,
                       b1: NodeId,
                       w2: NodeId|
         -> Result<NodeId, TensorError> {
            let xid = tape.leaf(&x, false)?;
            let h = tape.matmul(w1, xid)?;
            let h = tape.reshape(h, vec![6])?;
            let h = tape.add(h, b1)?;
            let h = tape.relu(h)?;
            let h = tape.reshape(h, vec![6, 1])?;
            let logits = tape.matmul(w2, h)?;
            let logits = tape.reshape(logits, vec![3])?;
            tape.softmax_cross_entropy(logits, 1)
        };

        // analytic gradient per parameter leaf
        let mut tape = Tape::new();
        let w1id = tape.leaf(&w1, true).unwrap();
        let b1id = tape.leaf(&b1, true).unwrap();
        let w2id = tape.leaf(&w2, true).unwrap();
        let loss = forward(&mut tape, w1id, b1id, w2id).unwrap();
        tape.backward(loss).unwrap();
        let mut analytic = Vec::new();
        analytic.extend_from_slice(tape.grad(w1id).unwrap());
        analytic.extend_from_slice(tape.grad(b1id).unwrap());
        analytic.extend_from_slice(tape.grad(w2id).unwrap());

        // numeric gradient over the packed vector
        let mut probe = theta.clone();
        let step = 1e-5;
        let mut max_rel: f64 = 0.0;
        for i in 0..probe.numel() {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + step;
            let (w1p, b1p, w2p) = unpack(&probe);
            let mut tp = Tape::new();
            let a = tp.leaf(&w1p, false).unwrap();
            let b = tp.leaf(&b1p, false).unwrap();
            let c = tp.leaf(&w2p, false).unwrap();
            let loss_p = forward(&mut tp, a, b, c).unwrap();
            let fp = tp.scalar(loss_p).unwrap();
            probe.data_mut()[i] = orig - step;
            let (w1m, b1m, w2m) = unpack(&probe);
            let mut tm = Tape::new();
            let a = tm.leaf(&w1m, false).unwrap();
            let b = tm.leaf(&b1m, false).unwrap();
            let c = tm.leaf(&w2m, false).unwrap();
            let loss_m = forward(&mut tm, a, b, c).unwrap();
            let fm = tm.scalar(loss_m).unwrap();
            probe.data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
            max_rel = max_rel.max((analytic[i] - numeric).abs() / denom);
        }
        assert!(max_rel < 1e-4, "mlp fd error {max_rel}");
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(vec![2, 2]), true).unwrap();
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::NonScalarRoot(_))
        ));
    }

    #[test]
    fn double_backward_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(vec![3]), true).unwrap();
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(TensorError::TapeConsumed)));
        // recording after backward is also an error
        assert!(matches!(
            tape.leaf(&Tensor::zeros(vec![1]), false),
            Err(TensorError::TapeConsumed)
        ));
    }

    #[test]
    fn gradient_of_constant_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(vec![4]), true).unwrap();
        let c = tape
            .leaf(&Tensor::new(vec![1], vec![5.0]).unwrap(), false)
            .unwrap();
        let root = tape.sum(c).unwrap();
        tape.backward(root).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let mut r = rng(13);
        let x = random_tensor(vec![5], &mut r);
        let w = random_tensor(vec![5], &mut r);
        let (alpha, beta) = (2.5, -0.75);

        // combined loss alpha*f + beta*g with f = <w,x>, g = sum(x.x)
        let mut tape = Tape::new();
        let xid = tape.leaf(&x, true).unwrap();
        let wid = tape.leaf(&w, false).unwrap();
        let f = tape.dot(wid, xid).unwrap();
        let sq = tape.mul(xid, xid).unwrap();
        let g = tape.sum(sq).unwrap();
        let fa = tape.scale(f, alpha).unwrap();
        let gb = tape.scale(g, beta).unwrap();
        let total = tape.add(fa, gb).unwrap();
        tape.backward(total).unwrap();
        let combined = tape.grad(xid).unwrap().to_vec();

        for i in 0..x.numel() {
            let expected = alpha * w.data()[i] + beta * 2.0 * x.data()[i];
            assert!(
                (combined[i] - expected).abs() <= 1e-12 * expected.abs().max(1.0),
                "linearity violated at {i}"
            );
        }
    }

    #[test]
    fn fd_check_on_squared_norm() {
        let point = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let err = finite_difference_check(
            |tape, x| {
                let sq = tape.mul(x, x)?;
                tape.sum(sq)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "squared norm fd error {err}");
    }

    #[test]
    fn fd_check_on_affine_is_exact() {
        let mut r = rng(17);
        let w = random_tensor(vec![6], &mut r);
        let point = random_tensor(vec![6], &mut r);
        for step in [1e-3, 1e-5, 1e-7] {
            let err = finite_difference_check(
                |tape, x| {
                    let wid = tape.leaf(&w, false)?;
                    tape.dot(wid, x)
                },
                &point,
                step,
            )
            .unwrap();
            assert!(err < 1e-9, "affine fd error {err} at step {step}");
        }
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        // each differentiable primitive, checked at 100 random points
        let mut r = rng(61);
        type Build = Box<dyn Fn(&mut Tape, NodeId, &Tensor) -> Result<NodeId, TensorError>>;
        let primitives: Vec<(&str, Vec<usize>, Build)> = vec![
            (
                "matmul",
                vec![3, 4],
                Box::new(|tape, x, aux| {
                    let b = tape.leaf(aux, false)?;
                    let c = tape.matmul(x, b)?;
                    tape.sum(c)
                }),
            ),
            (
                "conv2d",
                vec![2, 4, 4],
                Box::new(|tape, x, aux| {
                    let k = tape.leaf(aux, false)?;
                    let c = tape.conv2d(x, k, 1, 1)?;
                    tape.sum(c)
                }),
            ),
            (
                "avg_pool2",
                vec![2, 4, 4],
                Box::new(|tape, x, _| {
                    let p = tape.avg_pool2(x)?;
                    tape.sum(p)
                }),
            ),
            (
                "relu",
                vec![6],
                Box::new(|tape, x, _| {
                    let y = tape.relu(x)?;
                    tape.sum(y)
                }),
            ),
            (
                "add",
                vec![5],
                Box::new(|tape, x, aux| {
                    let b = tape.leaf(aux, false)?;
                    let y = tape.add(x, b)?;
                    tape.dot(y, y)
                }),
            ),
            (
                "add_bias",
                vec![3, 2],
                Box::new(|tape, x, aux| {
                    let b = tape.leaf(aux, false)?;
                    let y = tape.add_bias(x, b)?;
                    let sq = tape.mul(y, y)?;
                    tape.sum(sq)
                }),
            ),
            (
                "sub",
                vec![5],
                Box::new(|tape, x, aux| {
                    let b = tape.leaf(aux, false)?;
                    let y = tape.sub(x, b)?;
                    tape.dot(y, y)
                }),
            ),
            (
                "mul",
                vec![5],
                Box::new(|tape, x, aux| {
                    let b = tape.leaf(aux, false)?;
                    let y = tape.mul(x, b)?;
                    tape.sum(y)
                }),
            ),
            (
                "scale",
                vec![5],
                Box::new(|tape, x, _| {
                    let y = tape.scale(x, -1.7)?;
                    tape.dot(y, y)
                }),
            ),
            (
                "dot",
                vec![5],
                Box::new(|tape, x, aux| {
                    let b = tape.leaf(aux, false)?;
                    tape.dot(x, b)
                }),
            ),
            (
                "reshape",
                vec![2, 3],
                Box::new(|tape, x, _| {
                    let y = tape.reshape(x, vec![6])?;
                    let sq = tape.mul(y, y)?;
                    tape.sum(sq)
                }),
            ),
            (
                "softmax_cross_entropy",
                vec![5],
                Box::new(|tape, x, _| tape.softmax_cross_entropy(x, 2)),
            ),
        ];
        for (name, shape, build) in &primitives {
            let mut worst: f64 = 0.0;
            for _ in 0..100 {
                let numel: usize = shape.iter().product();
                let point = Tensor::new(
                    shape.clone(),
                    (0..numel).map(|_| r.random_range(-1.0..1.0)).collect(),
                )
                .unwrap();
                // aux operand sized for the op that needs it
                let aux_shape: Vec<usize> = match *name {
                    "matmul" => vec![shape[1], 2],
                    "conv2d" => vec![3, shape[0], 3, 3],
                    "add_bias" => vec![shape[0]],
                    _ => shape.clone(),
                };
                let aux_numel: usize = aux_shape.iter().product();
                let aux = Tensor::new(
                    aux_shape,
                    (0..aux_numel).map(|_| r.random_range(-1.0..1.0)).collect(),
                )
                .unwrap();
                let err =
                    finite_difference_check(|tape, x| build(tape, x, &aux), &point, 1e-5)
                        .unwrap();
                worst = worst.max(err);
            }
            assert!(worst < 1e-4, "{name}: fd error {worst}");
        }
    }

    #[test]
    fn softmax_normalizes() {
        let mut r = rng(29);
        for _ in 0..200 {
            let n = r.random_range(2..12);
            let logits: Vec<f64> = (0..n).map(|_| r.random_range(-30.0..30.0)).collect();
            let p = softmax(&logits);
            let sum: f64 = p.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
