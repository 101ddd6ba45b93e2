//! Wengert tape: reverse-mode AD via operation recording.
//!
//! Every differentiable primitive is a method on [`Tape`]. A forward call
//! validates shapes, computes the result, records what its backward pass
//! needs and returns a tracked [`DiffTensor`]. [`Tape::backward`] replays the
//! records in reverse, accumulating gradients additively into per-node
//! buffers initialized to zero.
//!
//! Records are topologically ordered by construction: an operation can only
//! reference nodes that already exist, so every input index precedes its
//! output index.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::tensor::{DiffTensor, NodeRef, Scalar};

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Errors raised by tensor primitives.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Operand shapes are incompatible; the message names the offending
    /// dimensions.
    ShapeMismatch { op: &'static str, detail: String },
    /// The backward seed holds more than one element.
    NonScalarSeed { len: usize },
    /// Elementwise math left its domain (e.g. fractional power of a
    /// negative base).
    Domain { op: &'static str, detail: String },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, detail } => {
                write!(f, "{op}: shape mismatch: {detail}")
            }
            TensorError::NonScalarSeed { len } => {
                write!(f, "backward: seed must be a scalar, got {len} elements")
            }
            TensorError::Domain { op, detail } => write!(f, "{op}: domain error: {detail}"),
        }
    }
}

impl std::error::Error for TensorError {}

pub type TensorResult<T> = Result<T, TensorError>;

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

/// Elementwise unary kinds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryKind {
    Relu,
    Sigmoid,
    Exp,
    Ln,
    Tanh,
    /// x^p for a fixed exponent.
    PowConst(f64),
    /// c * x for a fixed factor.
    Scale(f64),
    /// x + c for a fixed offset.
    AddConst(f64),
    Neg,
    /// Clamp to [lo, hi]; gradient passes inside the closed interval.
    Clamp(f64, f64),
}

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
    /// a^b with a tracked exponent; requires a >= 0.
    Pow,
    Max,
    Min,
}

/// Input snapshot an op keeps for its backward pass.
struct Saved<F: Scalar> {
    id: usize,
    data: Arc<Vec<F>>,
    shape: Vec<usize>,
}

enum Op<F: Scalar> {
    Leaf,
    Conv2d {
        x: Saved<F>,
        w: Saved<F>,
        bias: usize,
        stride: usize,
        pad: usize,
    },
    DepthwiseShared {
        x: Saved<F>,
        kernel: Saved<F>,
    },
    PadReplicate {
        x: usize,
        shape: Vec<usize>,
        pad: usize,
    },
    Linear {
        x: Saved<F>,
        w: Saved<F>,
        bias: usize,
        rows: usize,
    },
    Matmul {
        a: Saved<F>,
        b: Saved<F>,
        transpose_b: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Unary {
        x: usize,
        kind: UnaryKind,
        /// Input values for Relu/Ln/PowConst/Clamp, output values for
        /// Sigmoid/Exp/Tanh, unused otherwise.
        saved: Arc<Vec<F>>,
    },
    Binary {
        a: Saved<F>,
        b: Saved<F>,
        kind: BinaryKind,
        out: Arc<Vec<F>>,
    },
    SoftmaxLast {
        x: usize,
        out: Arc<Vec<F>>,
        row_len: usize,
    },
    MeanAll {
        x: usize,
        n: usize,
    },
    SumAll {
        x: usize,
        n: usize,
    },
    MeanPerChannel {
        x: Saved<F>,
    },
    ScaleChannels {
        x: Saved<F>,
        s: Saved<F>,
    },
    ConcatChannels {
        inputs: Vec<Saved<F>>,
    },
    UpsampleNearest {
        x: usize,
        shape: Vec<usize>,
        factor: usize,
    },
    Index {
        x: usize,
        x_len: usize,
        at: usize,
    },
    Slice1d {
        x: usize,
        x_len: usize,
        start: usize,
        len: usize,
    },
    Reshape {
        x: usize,
    },
    Transpose2d {
        x: usize,
        rows: usize,
        cols: usize,
    },
    GaussianKernel {
        r1: usize,
        r2: usize,
        r1_val: F,
        r2_val: F,
        theta: f64,
        size: usize,
        unnorm: Arc<Vec<F>>,
        sum: F,
    },
    LinearGather {
        x: usize,
        x_len: usize,
        triples: Arc<Vec<(u32, u32, f64)>>,
    },
    CrossEntropy {
        logits: Saved<F>,
        labels: Arc<Vec<u32>>,
        probs: Arc<Vec<F>>,
    },
}

struct Node<F: Scalar> {
    op: Op<F>,
    numel: usize,
}

/// Gradients produced by one backward sweep, keyed by tape node.
pub struct Gradients<F: Scalar> {
    tape_id: u64,
    buffers: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient buffer for a tracked tensor, if any gradient reached it.
    pub fn get(&self, t: &DiffTensor<F>) -> Option<&[F]> {
        let node = t.node()?;
        assert_eq!(node.tape_id, self.tape_id, "gradient lookup across tapes");
        self.buffers[node.index].as_deref()
    }

    /// Like [`Gradients::get`] but returns zeros when no gradient flowed.
    pub fn get_or_zeros(&self, t: &DiffTensor<F>) -> Vec<F> {
        match self.get(t) {
            Some(g) => g.to_vec(),
            None => vec![F::zero(); t.len()],
        }
    }
}

/// Records forward operations and replays them in reverse.
pub struct Tape<F: Scalar> {
    id: u64,
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<F>, shape: Vec<usize>, data: Vec<F>) -> DiffTensor<F> {
        let numel = data.len();
        let index = self.nodes.len();
        self.nodes.push(Node { op, numel });
        DiffTensor::tracked(
            shape,
            Arc::new(data),
            NodeRef {
                tape_id: self.id,
                index,
            },
        )
    }

    /// Registers a learnable leaf from raw values.
    pub fn leaf(&mut self, shape: &[usize], data: Vec<F>) -> DiffTensor<F> {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, data.len(), "leaf shape/buffer mismatch");
        self.push(Op::Leaf, shape.to_vec(), data)
    }

    /// Ensures `t` is tracked on this tape, registering untracked tensors
    /// as constant leaves.
    pub fn lift(&mut self, t: &DiffTensor<F>) -> DiffTensor<F> {
        match t.node() {
            Some(node) => {
                assert_eq!(node.tape_id, self.id, "tensor belongs to another tape");
                t.clone()
            }
            None => {
                let index = self.nodes.len();
                self.nodes.push(Node {
                    op: Op::Leaf,
                    numel: t.len(),
                });
                DiffTensor::tracked(
                    t.shape().to_vec(),
                    t.data_arc(),
                    NodeRef {
                        tape_id: self.id,
                        index,
                    },
                )
            }
        }
    }

    fn track(&mut self, t: &DiffTensor<F>) -> (usize, DiffTensor<F>) {
        let lifted = self.lift(t);
        let index = lifted.node().expect("lift always tracks").index;
        (index, lifted)
    }

    fn save(&mut self, t: &DiffTensor<F>) -> Saved<F> {
        let (id, lifted) = self.track(t);
        Saved {
            id,
            data: lifted.data_arc(),
            shape: lifted.shape().to_vec(),
        }
    }

    // ── convolution ────────────────────────────────────────────────────

    /// 2-D convolution with zero padding.
    ///
    /// `x` is NCHW, `w` is [K, C, kh, kw] with odd kernel extents, `bias`
    /// has length K. Output spatial size is floor((H + 2·pad − kh)/stride)+1.
    pub fn conv2d(
        &mut self,
        x: &DiffTensor<F>,
        w: &DiffTensor<F>,
        bias: &DiffTensor<F>,
        stride: usize,
        pad: usize,
    ) -> TensorResult<DiffTensor<F>> {
        let xs = x.shape();
        let ws = w.shape();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(shape_err(
                "conv2d",
                format!("expected 4-D input and weight, got {xs:?} and {ws:?}"),
            ));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (k, wc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wc != c {
            return Err(shape_err(
                "conv2d",
                format!("input has {c} channels but weight expects {wc}"),
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(shape_err(
                "conv2d",
                format!("kernel extents must be odd, got {kh}x{kw}"),
            ));
        }
        if bias.shape() != [k] {
            return Err(shape_err(
                "conv2d",
                format!("bias shape {:?} does not match {k} output channels", bias.shape()),
            ));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(shape_err(
                "conv2d",
                format!("padded input {}x{} smaller than kernel {kh}x{kw}", h + 2 * pad, wd + 2 * pad),
            ));
        }
        if stride == 0 {
            return Err(shape_err("conv2d", "stride must be positive".into()));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;

        let out = conv2d_forward(
            x.data(),
            w.data(),
            bias.data(),
            n,
            c,
            h,
            wd,
            k,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        );
        let xs = self.save(x);
        let wsv = self.save(w);
        let (bid, _) = self.track(bias);
        Ok(self.push(
            Op::Conv2d {
                x: xs,
                w: wsv,
                bias: bid,
                stride,
                pad,
            },
            vec![n, k, oh, ow],
            out,
        ))
    }

    /// Convolves every channel of `x` with the same 2-D kernel
    /// (stride 1, no padding).
    pub fn depthwise_conv_shared(
        &mut self,
        x: &DiffTensor<F>,
        kernel: &DiffTensor<F>,
    ) -> TensorResult<DiffTensor<F>> {
        let xs = x.shape();
        let ks = kernel.shape();
        if xs.len() != 4 || ks.len() != 2 {
            return Err(shape_err(
                "depthwise_conv_shared",
                format!("expected NCHW input and 2-D kernel, got {xs:?} and {ks:?}"),
            ));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (kh, kw) = (ks[0], ks[1]);
        if h < kh || w < kw {
            return Err(shape_err(
                "depthwise_conv_shared",
                format!("input {h}x{w} smaller than kernel {kh}x{kw}"),
            ));
        }
        let oh = h - kh + 1;
        let ow = w - kw + 1;
        let mut out = vec![F::zero(); n * c * oh * ow];
        let xd = x.data();
        let kd = kernel.data();
        for plane in 0..n * c {
            let xp = &xd[plane * h * w..(plane + 1) * h * w];
            let op = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for ky in 0..kh {
                for kx in 0..kw {
                    let kv = kd[ky * kw + kx];
                    if kv == F::zero() {
                        continue;
                    }
                    for oy in 0..oh {
                        let xrow = &xp[(oy + ky) * w + kx..(oy + ky) * w + kx + ow];
                        let orow = &mut op[oy * ow..(oy + 1) * ow];
                        for (o, xv) in orow.iter_mut().zip(xrow) {
                            *o += kv * *xv;
                        }
                    }
                }
            }
        }
        let xsv = self.save(x);
        let ksv = self.save(kernel);
        Ok(self.push(
            Op::DepthwiseShared { x: xsv, kernel: ksv },
            vec![n, c, oh, ow],
            out,
        ))
    }

    /// Pads the two spatial axes by replicating border values.
    pub fn pad_replicate(&mut self, x: &DiffTensor<F>, pad: usize) -> TensorResult<DiffTensor<F>> {
        let xs = x.shape();
        if xs.len() != 4 {
            return Err(shape_err(
                "pad_replicate",
                format!("expected NCHW input, got {xs:?}"),
            ));
        }
        if pad == 0 {
            return Ok(self.lift(x));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let mut out = vec![F::zero(); n * c * ph * pw];
        let xd = x.data();
        for plane in 0..n * c {
            let xp = &xd[plane * h * w..(plane + 1) * h * w];
            let op = &mut out[plane * ph * pw..(plane + 1) * ph * pw];
            for y in 0..ph {
                let sy = y.saturating_sub(pad).min(h - 1);
                for x_ in 0..pw {
                    let sx = x_.saturating_sub(pad).min(w - 1);
                    op[y * pw + x_] = xp[sy * w + sx];
                }
            }
        }
        let (xid, _) = self.track(x);
        Ok(self.push(
            Op::PadReplicate {
                x: xid,
                shape: xs.to_vec(),
                pad,
            },
            vec![n, c, ph, pw],
            out,
        ))
    }

    // ── affine maps ────────────────────────────────────────────────────

    /// Affine map on the trailing axis: out = x · wᵀ + bias.
    pub fn linear(
        &mut self,
        x: &DiffTensor<F>,
        w: &DiffTensor<F>,
        bias: &DiffTensor<F>,
    ) -> TensorResult<DiffTensor<F>> {
        let xs = x.shape();
        let ws = w.shape();
        if ws.len() != 2 {
            return Err(shape_err(
                "linear",
                format!("weight must be 2-D [out, in], got {ws:?}"),
            ));
        }
        let (dout, din) = (ws[0], ws[1]);
        let last = *xs.last().ok_or_else(|| shape_err("linear", "input has no axes".into()))?;
        if last != din {
            return Err(shape_err(
                "linear",
                format!("trailing input extent {last} != weight input dim {din}"),
            ));
        }
        if bias.shape() != [dout] {
            return Err(shape_err(
                "linear",
                format!("bias shape {:?} != [{dout}]", bias.shape()),
            ));
        }
        let rows = x.len() / din;
        let mut out = vec![F::zero(); rows * dout];
        let xd = x.data();
        let wd = w.data();
        let bd = bias.data();
        for r in 0..rows {
            let xrow = &xd[r * din..(r + 1) * din];
            let orow = &mut out[r * dout..(r + 1) * dout];
            for (o, ov) in orow.iter_mut().enumerate() {
                let wrow = &wd[o * din..(o + 1) * din];
                let mut acc = bd[o];
                for (xv, wv) in xrow.iter().zip(wrow) {
                    acc += *xv * *wv;
                }
                *ov = acc;
            }
        }
        let mut out_shape = xs.to_vec();
        *out_shape.last_mut().unwrap() = dout;
        let xsv = self.save(x);
        let wsv = self.save(w);
        let (bid, _) = self.track(bias);
        Ok(self.push(
            Op::Linear {
                x: xsv,
                w: wsv,
                bias: bid,
                rows,
            },
            out_shape,
            out,
        ))
    }

    /// Matrix product a[m,k] · b[k,n].
    pub fn matmul(&mut self, a: &DiffTensor<F>, b: &DiffTensor<F>) -> TensorResult<DiffTensor<F>> {
        self.matmul_impl(a, b, false)
    }

    /// Matrix product with the second operand transposed: a[m,k] · b[n,k]ᵀ.
    pub fn matmul_nt(&mut self, a: &DiffTensor<F>, b: &DiffTensor<F>) -> TensorResult<DiffTensor<F>> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(
        &mut self,
        a: &DiffTensor<F>,
        b: &DiffTensor<F>,
        transpose_b: bool,
    ) -> TensorResult<DiffTensor<F>> {
        let asv = a.shape();
        let bsv = b.shape();
        if asv.len() != 2 || bsv.len() != 2 {
            return Err(shape_err(
                "matmul",
                format!("expected 2-D operands, got {asv:?} and {bsv:?}"),
            ));
        }
        let (m, k) = (asv[0], asv[1]);
        let (n, kb) = if transpose_b {
            (bsv[0], bsv[1])
        } else {
            (bsv[1], bsv[0])
        };
        if kb != k {
            return Err(shape_err(
                "matmul",
                format!("inner dims differ: {k} vs {kb} (shapes {asv:?}, {bsv:?})"),
            ));
        }
        let ad = a.data();
        let bd = b.data();
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            let arow = &ad[i * k..(i + 1) * k];
            for j in 0..n {
                let mut acc = F::zero();
                if transpose_b {
                    let brow = &bd[j * k..(j + 1) * k];
                    for (av, bv) in arow.iter().zip(brow) {
                        acc += *av * *bv;
                    }
                } else {
                    for (kk, av) in arow.iter().enumerate() {
                        acc += *av * bd[kk * n + j];
                    }
                }
                out[i * n + j] = acc;
            }
        }
        let asave = self.save(a);
        let bsave = self.save(b);
        Ok(self.push(
            Op::Matmul {
                a: asave,
                b: bsave,
                transpose_b,
                m,
                k,
                n,
            },
            vec![m, n],
            out,
        ))
    }

    // ── elementwise ────────────────────────────────────────────────────

    /// Elementwise unary op.
    pub fn unary(&mut self, kind: UnaryKind, x: &DiffTensor<F>) -> TensorResult<DiffTensor<F>> {
        let xd = x.data();
        let mut out = Vec::with_capacity(xd.len());
        for &v in xd {
            let r = match kind {
                UnaryKind::Relu => {
                    if v > F::zero() {
                        v
                    } else {
                        F::zero()
                    }
                }
                UnaryKind::Sigmoid => F::one() / (F::one() + (-v).exp()),
                UnaryKind::Exp => v.exp(),
                UnaryKind::Ln => {
                    if v <= F::zero() {
                        return Err(TensorError::Domain {
                            op: "ln",
                            detail: format!("ln of non-positive value {v}"),
                        });
                    }
                    v.ln()
                }
                UnaryKind::Tanh => v.tanh(),
                UnaryKind::PowConst(p) => {
                    if v < F::zero() && p.fract() != 0.0 {
                        return Err(TensorError::Domain {
                            op: "power",
                            detail: format!("negative base {v} with fractional exponent {p}"),
                        });
                    }
                    v.powf(F::from_f64(p))
                }
                UnaryKind::Scale(c) => v * F::from_f64(c),
                UnaryKind::AddConst(c) => v + F::from_f64(c),
                UnaryKind::Neg => -v,
                UnaryKind::Clamp(lo, hi) => {
                    let lo = F::from_f64(lo);
                    let hi = F::from_f64(hi);
                    if v < lo {
                        lo
                    } else if v > hi {
                        hi
                    } else {
                        v
                    }
                }
            };
            out.push(r);
        }
        let saved = match kind {
            UnaryKind::Sigmoid | UnaryKind::Exp | UnaryKind::Tanh => Arc::new(out.clone()),
            UnaryKind::Scale(_) | UnaryKind::AddConst(_) | UnaryKind::Neg => Arc::new(Vec::new()),
            _ => x.data_arc(),
        };
        let shape = x.shape().to_vec();
        let (xid, _) = self.track(x);
        Ok(self.push(Op::Unary { x: xid, kind, saved }, shape, out))
    }

    pub fn relu(&mut self, x: &DiffTensor<F>) -> DiffTensor<F> {
        self.unary(UnaryKind::Relu, x).expect("relu is total")
    }

    pub fn sigmoid(&mut self, x: &DiffTensor<F>) -> DiffTensor<F> {
        self.unary(UnaryKind::Sigmoid, x).expect("sigmoid is total")
    }

    pub fn tanh(&mut self, x: &DiffTensor<F>) -> DiffTensor<F> {
        self.unary(UnaryKind::Tanh, x).expect("tanh is total")
    }

    pub fn scale(&mut self, x: &DiffTensor<F>, c: f64) -> DiffTensor<F> {
        self.unary(UnaryKind::Scale(c), x).expect("scale is total")
    }

    pub fn add_const(&mut self, x: &DiffTensor<F>, c: f64) -> DiffTensor<F> {
        self.unary(UnaryKind::AddConst(c), x).expect("add_const is total")
    }

    pub fn neg(&mut self, x: &DiffTensor<F>) -> DiffTensor<F> {
        self.unary(UnaryKind::Neg, x).expect("neg is total")
    }

    pub fn clamp(&mut self, x: &DiffTensor<F>, lo: f64, hi: f64) -> DiffTensor<F> {
        self.unary(UnaryKind::Clamp(lo, hi), x).expect("clamp is total")
    }

    fn binary(
        &mut self,
        kind: BinaryKind,
        name: &'static str,
        a: &DiffTensor<F>,
        b: &DiffTensor<F>,
    ) -> TensorResult<DiffTensor<F>> {
        let broadcast_ok = a.shape() == b.shape() || a.len() == 1 || b.len() == 1;
        if !broadcast_ok {
            return Err(shape_err(
                name,
                format!(
                    "shapes {:?} and {:?} must match exactly or one side must be scalar",
                    a.shape(),
                    b.shape()
                ),
            ));
        }
        let out_len = a.len().max(b.len());
        let out_shape = if a.len() >= b.len() {
            a.shape().to_vec()
        } else {
            b.shape().to_vec()
        };
        let ad = a.data();
        let bd = b.data();
        let mut out = Vec::with_capacity(out_len);
        for i in 0..out_len {
            let av = ad[if a.len() == 1 { 0 } else { i }];
            let bv = bd[if b.len() == 1 { 0 } else { i }];
            let r = match kind {
                BinaryKind::Add => av + bv,
                BinaryKind::Sub => av - bv,
                BinaryKind::Mul => av * bv,
                BinaryKind::Div => av / bv,
                BinaryKind::Pow => {
                    if av < F::zero() {
                        return Err(TensorError::Domain {
                            op: "pow",
                            detail: format!("negative base {av} with tracked exponent"),
                        });
                    }
                    av.powf(bv)
                }
                BinaryKind::Max => {
                    if av >= bv {
                        av
                    } else {
                        bv
                    }
                }
                BinaryKind::Min => {
                    if av <= bv {
                        av
                    } else {
                        bv
                    }
                }
            };
            out.push(r);
        }
        let asv = self.save(a);
        let bsv = self.save(b);
        let out_arc = match kind {
            BinaryKind::Pow => Arc::new(out.clone()),
            _ => Arc::new(Vec::new()),
        };
        Ok(self.push(
            Op::Binary {
                a: asv,
                b: bsv,
                kind,
                out: out_arc,
            },
            out_shape,
            out,
        ))
    }

    pub fn add(&mut self, a: &DiffTensor<F>, b: &DiffTensor<F>) -> TensorResult<DiffTensor<F>> {
        self.binary(BinaryKind::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: &DiffTensor<F>, b: &DiffTensor<F>) -> TensorResult<DiffTensor<F>> {
        self.binary(BinaryKind::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: &DiffTensor<F>, b: &DiffTensor<F>) -> TensorResult<DiffTensor<F>> {
        self.binary(BinaryKind::Mul, "mul", a, b)
    }

    pub fn div(&mut self, a: &DiffTensor<F>, b: &DiffTensor<F>) -> TensorResult<DiffTensor<F>> {
        self.binary(BinaryKind::Div, "div", a, b)
    }

    /// a^b elementwise with a tracked exponent (a must be nonnegative).
    pub fn pow(&mut self, a: &DiffTensor<F>, b: &DiffTensor<F>) -> TensorResult<DiffTensor<F>> {
        self.binary(BinaryKind::Pow, "pow", a, b)
    }

    pub fn max2(&mut self, a: &DiffTensor<F>, b: &DiffTensor<F>) -> TensorResult<DiffTensor<F>> {
        self.binary(BinaryKind::Max, "max", a, b)
    }

    pub fn min2(&mut self, a: &DiffTensor<F>, b: &DiffTensor<F>) -> TensorResult<DiffTensor<F>> {
        self.binary(BinaryKind::Min, "min", a, b)
    }

    // ── softmax and reductions ─────────────────────────────────────────

    /// Softmax over the last axis, computed with max-subtraction.
    pub fn softmax_lastaxis(&mut self, x: &DiffTensor<F>) -> TensorResult<DiffTensor<F>> {
        let row_len = *x
            .shape()
            .last()
            .ok_or_else(|| shape_err("softmax", "input has no axes".into()))?;
        let xd = x.data();
        let mut out = vec![F::zero(); xd.len()];
        for (row, orow) in xd.chunks_exact(row_len).zip(out.chunks_exact_mut(row_len)) {
            let mut mx = row[0];
            for &v in row {
                if v > mx {
                    mx = v;
                }
            }
            let mut sum = F::zero();
            for (o, &v) in orow.iter_mut().zip(row) {
                let e = (v - mx).exp();
                *o = e;
                sum += e;
            }
            for o in orow.iter_mut() {
                *o = *o / sum;
            }
        }
        let shape = x.shape().to_vec();
        let out_arc = Arc::new(out.clone());
        let (xid, _) = self.track(x);
        Ok(self.push(
            Op::SoftmaxLast {
                x: xid,
                out: out_arc,
                row_len,
            },
            shape,
            out,
        ))
    }

    /// Mean over all elements, returned as a 1-element tensor.
    pub fn mean_all(&mut self, x: &DiffTensor<F>) -> DiffTensor<F> {
        let n = x.len();
        let mut acc = F::zero();
        for &v in x.data() {
            acc += v;
        }
        let mean = acc / F::from_f64(n as f64);
        let (xid, _) = self.track(x);
        self.push(Op::MeanAll { x: xid, n }, vec![1], vec![mean])
    }

    /// Sum over all elements, returned as a 1-element tensor.
    pub fn sum_all(&mut self, x: &DiffTensor<F>) -> DiffTensor<F> {
        let n = x.len();
        let mut acc = F::zero();
        for &v in x.data() {
            acc += v;
        }
        let (xid, _) = self.track(x);
        self.push(Op::SumAll { x: xid, n }, vec![1], vec![acc])
    }

    /// Mean over batch and spatial axes of an NCHW tensor, yielding [C].
    pub fn mean_per_channel(&mut self, x: &DiffTensor<F>) -> TensorResult<DiffTensor<F>> {
        let xs = x.shape();
        if xs.len() != 4 {
            return Err(shape_err(
                "mean_per_channel",
                format!("expected NCHW input, got {xs:?}"),
            ));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let hw = h * w;
        let count = F::from_f64((n * hw) as f64);
        let xd = x.data();
        let mut out = vec![F::zero(); c];
        for ni in 0..n {
            for (ci, o) in out.iter_mut().enumerate() {
                let base = (ni * c + ci) * hw;
                let mut acc = F::zero();
                for &v in &xd[base..base + hw] {
                    acc += v;
                }
                *o += acc;
            }
        }
        for o in out.iter_mut() {
            *o = *o / count;
        }
        let xsv = self.save(x);
        Ok(self.push(Op::MeanPerChannel { x: xsv }, vec![c], out))
    }

    /// Multiplies each channel of an NCHW tensor by the matching entry of
    /// a length-C vector.
    pub fn scale_channels(
        &mut self,
        x: &DiffTensor<F>,
        s: &DiffTensor<F>,
    ) -> TensorResult<DiffTensor<F>> {
        let xs = x.shape();
        if xs.len() != 4 {
            return Err(shape_err(
                "scale_channels",
                format!("expected NCHW input, got {xs:?}"),
            ));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if s.shape() != [c] {
            return Err(shape_err(
                "scale_channels",
                format!("scale shape {:?} != [{c}]", s.shape()),
            ));
        }
        let hw = h * w;
        let xd = x.data();
        let sd = s.data();
        let mut out = vec![F::zero(); xd.len()];
        for ni in 0..n {
            for ci in 0..c {
                let sv = sd[ci];
                let base = (ni * c + ci) * hw;
                for i in 0..hw {
                    out[base + i] = xd[base + i] * sv;
                }
            }
        }
        let shape = xs.to_vec();
        let xsv = self.save(x);
        let ssv = self.save(s);
        Ok(self.push(Op::ScaleChannels { x: xsv, s: ssv }, shape, out))
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[&DiffTensor<F>]) -> TensorResult<DiffTensor<F>> {
        if inputs.is_empty() {
            return Err(shape_err("concat_channels", "no inputs".into()));
        }
        let first = inputs[0].shape();
        if first.len() != 4 {
            return Err(shape_err(
                "concat_channels",
                format!("expected NCHW inputs, got {first:?}"),
            ));
        }
        let (n, h, w) = (first[0], first[2], first[3]);
        let mut c_total = 0;
        for t in inputs {
            let s = t.shape();
            if s.len() != 4 || s[0] != n || s[2] != h || s[3] != w {
                return Err(shape_err(
                    "concat_channels",
                    format!("input shape {s:?} incompatible with {first:?}"),
                ));
            }
            c_total += s[1];
        }
        let hw = h * w;
        let mut out = vec![F::zero(); n * c_total * hw];
        for ni in 0..n {
            let mut c_off = 0;
            for t in inputs {
                let ci = t.shape()[1];
                let src = &t.data()[ni * ci * hw..(ni + 1) * ci * hw];
                let dst_base = (ni * c_total + c_off) * hw;
                out[dst_base..dst_base + ci * hw].copy_from_slice(src);
                c_off += ci;
            }
        }
        let saved: Vec<Saved<F>> = inputs.iter().map(|t| self.save(t)).collect();
        Ok(self.push(
            Op::ConcatChannels { inputs: saved },
            vec![n, c_total, h, w],
            out,
        ))
    }

    /// Nearest-neighbor upsampling of the spatial axes by an integer factor.
    pub fn upsample_nearest(
        &mut self,
        x: &DiffTensor<F>,
        factor: usize,
    ) -> TensorResult<DiffTensor<F>> {
        let xs = x.shape();
        if xs.len() != 4 {
            return Err(shape_err(
                "upsample_nearest",
                format!("expected NCHW input, got {xs:?}"),
            ));
        }
        if factor == 0 {
            return Err(shape_err("upsample_nearest", "factor must be positive".into()));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h * factor, w * factor);
        let xd = x.data();
        let mut out = vec![F::zero(); n * c * oh * ow];
        for plane in 0..n * c {
            let xp = &xd[plane * h * w..(plane + 1) * h * w];
            let op = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for y in 0..oh {
                let sy = y / factor;
                for x_ in 0..ow {
                    op[y * ow + x_] = xp[sy * w + x_ / factor];
                }
            }
        }
        let (xid, _) = self.track(x);
        Ok(self.push(
            Op::UpsampleNearest {
                x: xid,
                shape: xs.to_vec(),
                factor,
            },
            vec![n, c, oh, ow],
            out,
        ))
    }

    // ── shape ops ──────────────────────────────────────────────────────

    /// Extracts one element (by flat index) as a 1-element tensor.
    pub fn index(&mut self, x: &DiffTensor<F>, at: usize) -> TensorResult<DiffTensor<F>> {
        if at >= x.len() {
            return Err(shape_err(
                "index",
                format!("index {at} out of range for {} elements", x.len()),
            ));
        }
        let v = x.data()[at];
        let x_len = x.len();
        let (xid, _) = self.track(x);
        Ok(self.push(Op::Index { x: xid, x_len, at }, vec![1], vec![v]))
    }

    /// Contiguous sub-range of a flat tensor.
    pub fn slice_1d(
        &mut self,
        x: &DiffTensor<F>,
        start: usize,
        len: usize,
    ) -> TensorResult<DiffTensor<F>> {
        if start + len > x.len() {
            return Err(shape_err(
                "slice_1d",
                format!("range {start}..{} out of bounds for {}", start + len, x.len()),
            ));
        }
        let out = x.data()[start..start + len].to_vec();
        let x_len = x.len();
        let (xid, _) = self.track(x);
        Ok(self.push(
            Op::Slice1d {
                x: xid,
                x_len,
                start,
                len,
            },
            vec![len],
            out,
        ))
    }

    /// Reinterprets the buffer under a new shape with equal element count.
    pub fn reshape(&mut self, x: &DiffTensor<F>, shape: &[usize]) -> TensorResult<DiffTensor<F>> {
        let numel: usize = shape.iter().product();
        if numel != x.len() {
            return Err(shape_err(
                "reshape",
                format!("cannot reshape {} elements into {shape:?}", x.len()),
            ));
        }
        let data = x.data().to_vec();
        let (xid, _) = self.track(x);
        Ok(self.push(Op::Reshape { x: xid }, shape.to_vec(), data))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose2d(&mut self, x: &DiffTensor<F>) -> TensorResult<DiffTensor<F>> {
        let xs = x.shape();
        if xs.len() != 2 {
            return Err(shape_err(
                "transpose2d",
                format!("expected 2-D input, got {xs:?}"),
            ));
        }
        let (rows, cols) = (xs[0], xs[1]);
        let xd = x.data();
        let mut out = vec![F::zero(); xd.len()];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = xd[r * cols + c];
            }
        }
        let (xid, _) = self.track(x);
        Ok(self.push(
            Op::Transpose2d { x: xid, rows, cols },
            vec![cols, rows],
            out,
        ))
    }

    // ── fused primitives ───────────────────────────────────────────────

    /// Builds a unit-sum anisotropic Gaussian kernel from tracked radii.
    ///
    /// `k(x, y) = exp(-(b0·x² + 2·b1·x·y + b2·y²))` over centered integer
    /// coordinates, then divided by its sum. Differentiable w.r.t. `r1`
    /// and `r2`; `theta` is a fixed angle in radians.
    pub fn gaussian_kernel(
        &mut self,
        r1: &DiffTensor<F>,
        r2: &DiffTensor<F>,
        theta: f64,
        size: usize,
    ) -> TensorResult<DiffTensor<F>> {
        if size % 2 == 0 || size == 0 {
            return Err(shape_err(
                "gaussian_kernel",
                format!("size must be odd and positive, got {size}"),
            ));
        }
        if r1.len() != 1 || r2.len() != 1 {
            return Err(shape_err(
                "gaussian_kernel",
                format!("radii must be scalars, got {:?} and {:?}", r1.shape(), r2.shape()),
            ));
        }
        let r1v = r1.item();
        let r2v = r2.item();
        if r1v <= F::zero() || r2v <= F::zero() {
            return Err(TensorError::Domain {
                op: "gaussian_kernel",
                detail: format!("radii must be positive, got r1={r1v}, r2={r2v}"),
            });
        }
        let (b0, b1, b2) = gaussian_coefficients(r1v.as_f64(), r2v.as_f64(), theta);
        let half = (size / 2) as i64;
        let mut unnorm = Vec::with_capacity(size * size);
        let mut sum = F::zero();
        for iy in 0..size {
            let y = (iy as i64 - half) as f64;
            for ix in 0..size {
                let x = (ix as i64 - half) as f64;
                let e = -(b0 * x * x + 2.0 * b1 * x * y + b2 * y * y);
                let v = F::from_f64(e.exp());
                unnorm.push(v);
                sum += v;
            }
        }
        let out: Vec<F> = unnorm.iter().map(|&v| v / sum).collect();
        let unnorm = Arc::new(unnorm);
        let (r1id, _) = self.track(r1);
        let (r2id, _) = self.track(r2);
        Ok(self.push(
            Op::GaussianKernel {
                r1: r1id,
                r2: r2id,
                r1_val: r1v,
                r2_val: r2v,
                theta,
                size,
                unnorm,
                sum,
            },
            vec![size, size],
            out,
        ))
    }

    /// Generic sparse linear map: out[o] = Σ w·x[i] over (o, i, w) triples.
    ///
    /// Used for fixed linear image ops (e.g. demosaicing) whose coefficient
    /// pattern is built elsewhere.
    pub fn linear_gather(
        &mut self,
        x: &DiffTensor<F>,
        triples: Arc<Vec<(u32, u32, f64)>>,
        out_shape: &[usize],
    ) -> TensorResult<DiffTensor<F>> {
        let out_len: usize = out_shape.iter().product();
        let mut out = vec![F::zero(); out_len];
        let xd = x.data();
        for &(o, i, w) in triples.iter() {
            let (o, i) = (o as usize, i as usize);
            if o >= out_len || i >= xd.len() {
                return Err(shape_err(
                    "linear_gather",
                    format!("triple ({o}, {i}) out of range ({out_len} outputs, {} inputs)", xd.len()),
                ));
            }
            out[o] += F::from_f64(w) * xd[i];
        }
        let x_len = x.len();
        let (xid, _) = self.track(x);
        Ok(self.push(
            Op::LinearGather {
                x: xid,
                x_len,
                triples,
            },
            out_shape.to_vec(),
            out,
        ))
    }

    /// Mean cross-entropy between NCHW logits and per-position class labels.
    ///
    /// `labels` is row-major over (n, h, w) and each entry indexes the C
    /// axis. Softmax is computed internally with max-subtraction.
    pub fn cross_entropy_mean(
        &mut self,
        logits: &DiffTensor<F>,
        labels: &[u32],
    ) -> TensorResult<DiffTensor<F>> {
        let ls = logits.shape();
        if ls.len() != 4 {
            return Err(shape_err(
                "cross_entropy_mean",
                format!("expected NCHW logits, got {ls:?}"),
            ));
        }
        let (n, c, h, w) = (ls[0], ls[1], ls[2], ls[3]);
        let hw = h * w;
        if labels.len() != n * hw {
            return Err(shape_err(
                "cross_entropy_mean",
                format!("{} labels for {} positions", labels.len(), n * hw),
            ));
        }
        let ld = logits.data();
        let mut probs = vec![F::zero(); ld.len()];
        let mut loss = F::zero();
        for ni in 0..n {
            for pos in 0..hw {
                let mut mx = F::neg_infinity();
                for ci in 0..c {
                    let v = ld[(ni * c + ci) * hw + pos];
                    if v > mx {
                        mx = v;
                    }
                }
                let mut denom = F::zero();
                for ci in 0..c {
                    let e = (ld[(ni * c + ci) * hw + pos] - mx).exp();
                    probs[(ni * c + ci) * hw + pos] = e;
                    denom += e;
                }
                let label = labels[ni * hw + pos] as usize;
                if label >= c {
                    return Err(shape_err(
                        "cross_entropy_mean",
                        format!("label {label} out of range for {c} classes"),
                    ));
                }
                for ci in 0..c {
                    let idx = (ni * c + ci) * hw + pos;
                    probs[idx] = probs[idx] / denom;
                }
                loss += -(probs[(ni * c + label) * hw + pos].ln());
            }
        }
        loss = loss / F::from_f64((n * hw) as f64);
        let lsv = self.save(logits);
        Ok(self.push(
            Op::CrossEntropy {
                logits: lsv,
                labels: Arc::new(labels.to_vec()),
                probs: Arc::new(probs),
            },
            vec![1],
            vec![loss],
        ))
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Reverse-topological gradient sweep from a scalar seed.
    ///
    /// The gradient of the seed w.r.t. itself is 1.
    pub fn backward(&self, seed: &DiffTensor<F>) -> TensorResult<Gradients<F>> {
        if seed.len() != 1 {
            return Err(TensorError::NonScalarSeed { len: seed.len() });
        }
        let node = seed.node().expect("backward seed must be tracked");
        assert_eq!(node.tape_id, self.id, "seed belongs to another tape");
        let mut buffers: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        buffers[node.index] = Some(vec![F::one()]);

        for idx in (0..=node.index).rev() {
            let grad = match buffers[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_step(idx, &grad, &mut buffers);
            buffers[idx] = Some(grad);
        }
        Ok(Gradients {
            tape_id: self.id,
            buffers,
        })
    }

    fn accumulate(buffers: &mut [Option<Vec<F>>], id: usize, len: usize) -> &mut Vec<F> {
        buffers[id].get_or_insert_with(|| vec![F::zero(); len])
    }

    #[allow(clippy::too_many_lines)]
    fn backward_step(&self, idx: usize, grad: &[F], buffers: &mut Vec<Option<Vec<F>>>) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                bias,
                stride,
                pad,
            } => {
                let (n, c, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
                let (k, kh, kw) = (w.shape[0], w.shape[2], w.shape[3]);
                let oh = (h + 2 * pad - kh) / stride + 1;
                let ow = (wd + 2 * pad - kw) / stride + 1;
                {
                    let gb = Self::accumulate(buffers, *bias, k);
                    for ni in 0..n {
                        for ki in 0..k {
                            let base = (ni * k + ki) * oh * ow;
                            let mut acc = F::zero();
                            for &g in &grad[base..base + oh * ow] {
                                acc += g;
                            }
                            gb[ki] += acc;
                        }
                    }
                }
                let mut gx = vec![F::zero(); x.data.len()];
                let mut gw = vec![F::zero(); w.data.len()];
                conv2d_backward(
                    &x.data, &w.data, grad, &mut gx, &mut gw, n, c, h, wd, k, kh, kw, *stride,
                    *pad, oh, ow,
                );
                add_into(Self::accumulate(buffers, x.id, x.data.len()), &gx);
                add_into(Self::accumulate(buffers, w.id, w.data.len()), &gw);
            }
            Op::DepthwiseShared { x, kernel } => {
                let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
                let (kh, kw) = (kernel.shape[0], kernel.shape[1]);
                let (oh, ow) = (h - kh + 1, w - kw + 1);
                let mut gx = vec![F::zero(); x.data.len()];
                let mut gk = vec![F::zero(); kernel.data.len()];
                for plane in 0..n * c {
                    let xp = &x.data[plane * h * w..(plane + 1) * h * w];
                    let gp = &grad[plane * oh * ow..(plane + 1) * oh * ow];
                    let gxp = &mut gx[plane * h * w..(plane + 1) * h * w];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let kv = kernel.data[ky * kw + kx];
                            let mut acc = F::zero();
                            for oy in 0..oh {
                                let grow = &gp[oy * ow..(oy + 1) * ow];
                                let xbase = (oy + ky) * w + kx;
                                for (ox, &g) in grow.iter().enumerate() {
                                    acc += g * xp[xbase + ox];
                                    gxp[xbase + ox] += g * kv;
                                }
                            }
                            gk[ky * kw + kx] += acc;
                        }
                    }
                }
                add_into(Self::accumulate(buffers, x.id, x.data.len()), &gx);
                add_into(Self::accumulate(buffers, kernel.id, kernel.data.len()), &gk);
            }
            Op::PadReplicate { x, shape, pad } => {
                let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let (ph, pw) = (h + 2 * pad, w + 2 * pad);
                let gx = Self::accumulate(buffers, *x, n * c * h * w);
                for plane in 0..n * c {
                    let gp = &grad[plane * ph * pw..(plane + 1) * ph * pw];
                    let gxp = &mut gx[plane * h * w..(plane + 1) * h * w];
                    for y in 0..ph {
                        let sy = y.saturating_sub(*pad).min(h - 1);
                        for x_ in 0..pw {
                            let sx = x_.saturating_sub(*pad).min(w - 1);
                            gxp[sy * w + sx] += gp[y * pw + x_];
                        }
                    }
                }
            }
            Op::Linear { x, w, bias, rows } => {
                let (dout, din) = (w.shape[0], w.shape[1]);
                {
                    let gb = Self::accumulate(buffers, *bias, dout);
                    for r in 0..*rows {
                        for (o, gb_o) in gb.iter_mut().enumerate() {
                            *gb_o += grad[r * dout + o];
                        }
                    }
                }
                let mut gx = vec![F::zero(); x.data.len()];
                let mut gw = vec![F::zero(); w.data.len()];
                for r in 0..*rows {
                    let xrow = &x.data[r * din..(r + 1) * din];
                    let gxrow = &mut gx[r * din..(r + 1) * din];
                    for o in 0..dout {
                        let g = grad[r * dout + o];
                        if g == F::zero() {
                            continue;
                        }
                        let wrow = &w.data[o * din..(o + 1) * din];
                        let gwrow = &mut gw[o * din..(o + 1) * din];
                        for d in 0..din {
                            gxrow[d] += g * wrow[d];
                            gwrow[d] += g * xrow[d];
                        }
                    }
                }
                add_into(Self::accumulate(buffers, x.id, x.data.len()), &gx);
                add_into(Self::accumulate(buffers, w.id, w.data.len()), &gw);
            }
            Op::Matmul {
                a,
                b,
                transpose_b,
                m,
                k,
                n,
            } => {
                let mut ga = vec![F::zero(); a.data.len()];
                let mut gb = vec![F::zero(); b.data.len()];
                for i in 0..*m {
                    for j in 0..*n {
                        let g = grad[i * n + j];
                        if g == F::zero() {
                            continue;
                        }
                        for kk in 0..*k {
                            let (b_idx, a_idx) = if *transpose_b {
                                (j * k + kk, i * k + kk)
                            } else {
                                (kk * n + j, i * k + kk)
                            };
                            ga[a_idx] += g * b.data[b_idx];
                            gb[b_idx] += g * a.data[a_idx];
                        }
                    }
                }
                add_into(Self::accumulate(buffers, a.id, a.data.len()), &ga);
                add_into(Self::accumulate(buffers, b.id, b.data.len()), &gb);
            }
            Op::Unary { x, kind, saved } => {
                let len = self.nodes[idx].numel;
                let gx = Self::accumulate(buffers, *x, len);
                match kind {
                    UnaryKind::Relu => {
                        for i in 0..len {
                            if saved[i] > F::zero() {
                                gx[i] += grad[i];
                            }
                        }
                    }
                    UnaryKind::Sigmoid => {
                        for i in 0..len {
                            let y = saved[i];
                            gx[i] += grad[i] * y * (F::one() - y);
                        }
                    }
                    UnaryKind::Exp => {
                        for i in 0..len {
                            gx[i] += grad[i] * saved[i];
                        }
                    }
                    UnaryKind::Ln => {
                        for i in 0..len {
                            gx[i] += grad[i] / saved[i];
                        }
                    }
                    UnaryKind::Tanh => {
                        for i in 0..len {
                            let y = saved[i];
                            gx[i] += grad[i] * (F::one() - y * y);
                        }
                    }
                    UnaryKind::PowConst(p) => {
                        let pf = F::from_f64(*p);
                        for i in 0..len {
                            let xv = saved[i];
                            // clamped: d/dx x^p at x = 0 with p < 1 is 0
                            if xv == F::zero() && *p < 1.0 {
                                continue;
                            }
                            gx[i] += grad[i] * pf * xv.powf(pf - F::one());
                        }
                    }
                    UnaryKind::Scale(c) => {
                        let cf = F::from_f64(*c);
                        for i in 0..len {
                            gx[i] += grad[i] * cf;
                        }
                    }
                    UnaryKind::AddConst(_) => {
                        for i in 0..len {
                            gx[i] += grad[i];
                        }
                    }
                    UnaryKind::Neg => {
                        for i in 0..len {
                            gx[i] -= grad[i];
                        }
                    }
                    UnaryKind::Clamp(lo, hi) => {
                        let lo = F::from_f64(*lo);
                        let hi = F::from_f64(*hi);
                        for i in 0..len {
                            if saved[i] >= lo && saved[i] <= hi {
                                gx[i] += grad[i];
                            }
                        }
                    }
                }
            }
            Op::Binary { a, b, kind, out } => {
                let len = self.nodes[idx].numel;
                let a_scalar = a.data.len() == 1;
                let b_scalar = b.data.len() == 1;
                let mut ga = vec![F::zero(); a.data.len()];
                let mut gb = vec![F::zero(); b.data.len()];
                for i in 0..len {
                    let ai = if a_scalar { 0 } else { i };
                    let bi = if b_scalar { 0 } else { i };
                    let (av, bv) = (a.data[ai], b.data[bi]);
                    let g = grad[i];
                    match kind {
                        BinaryKind::Add => {
                            ga[ai] += g;
                            gb[bi] += g;
                        }
                        BinaryKind::Sub => {
                            ga[ai] += g;
                            gb[bi] -= g;
                        }
                        BinaryKind::Mul => {
                            ga[ai] += g * bv;
                            gb[bi] += g * av;
                        }
                        BinaryKind::Div => {
                            ga[ai] += g / bv;
                            gb[bi] -= g * av / (bv * bv);
                        }
                        BinaryKind::Pow => {
                            let y = out[i];
                            // clamped at base 0: both partials defined as 0
                            if av > F::zero() {
                                ga[ai] += g * bv * av.powf(bv - F::one());
                                gb[bi] += g * y * av.ln();
                            }
                        }
                        BinaryKind::Max => {
                            if av >= bv {
                                ga[ai] += g;
                            } else {
                                gb[bi] += g;
                            }
                        }
                        BinaryKind::Min => {
                            if av <= bv {
                                ga[ai] += g;
                            } else {
                                gb[bi] += g;
                            }
                        }
                    }
                }
                add_into(Self::accumulate(buffers, a.id, a.data.len()), &ga);
                add_into(Self::accumulate(buffers, b.id, b.data.len()), &gb);
            }
            Op::SoftmaxLast { x, out, row_len } => {
                let len = self.nodes[idx].numel;
                let gx = Self::accumulate(buffers, *x, len);
                for (row, (orow, grow)) in out
                    .chunks_exact(*row_len)
                    .zip(grad.chunks_exact(*row_len))
                    .enumerate()
                {
                    let mut dot = F::zero();
                    for (y, g) in orow.iter().zip(grow) {
                        dot += *y * *g;
                    }
                    let base = row * row_len;
                    for i in 0..*row_len {
                        gx[base + i] += orow[i] * (grow[i] - dot);
                    }
                }
            }
            Op::MeanAll { x, n } => {
                let g = grad[0] / F::from_f64(*n as f64);
                let gx = Self::accumulate(buffers, *x, *n);
                for v in gx.iter_mut() {
                    *v += g;
                }
            }
            Op::SumAll { x, n } => {
                let g = grad[0];
                let gx = Self::accumulate(buffers, *x, *n);
                for v in gx.iter_mut() {
                    *v += g;
                }
            }
            Op::MeanPerChannel { x } => {
                let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
                let hw = h * w;
                let count = F::from_f64((n * hw) as f64);
                let gx = Self::accumulate(buffers, x.id, x.data.len());
                for ni in 0..n {
                    for ci in 0..c {
                        let g = grad[ci] / count;
                        let base = (ni * c + ci) * hw;
                        for v in gx[base..base + hw].iter_mut() {
                            *v += g;
                        }
                    }
                }
            }
            Op::ScaleChannels { x, s } => {
                let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
                let hw = h * w;
                let mut gs = vec![F::zero(); c];
                {
                    let gx = Self::accumulate(buffers, x.id, x.data.len());
                    for ni in 0..n {
                        for ci in 0..c {
                            let sv = s.data[ci];
                            let base = (ni * c + ci) * hw;
                            let mut acc = F::zero();
                            for i in 0..hw {
                                gx[base + i] += grad[base + i] * sv;
                                acc += grad[base + i] * x.data[base + i];
                            }
                            gs[ci] += acc;
                        }
                    }
                }
                add_into(Self::accumulate(buffers, s.id, c), &gs);
            }
            Op::ConcatChannels { inputs } => {
                let n = inputs[0].shape[0];
                let (h, w) = (inputs[0].shape[2], inputs[0].shape[3]);
                let hw = h * w;
                let c_total: usize = inputs.iter().map(|s| s.shape[1]).sum();
                for (i_off, inp) in scan_channel_offsets(inputs) {
                    let ci = inp.shape[1];
                    let gx = Self::accumulate(buffers, inp.id, inp.data.len());
                    for ni in 0..n {
                        let src = (ni * c_total + i_off) * hw;
                        let dst = ni * ci * hw;
                        for j in 0..ci * hw {
                            gx[dst + j] += grad[src + j];
                        }
                    }
                }
            }
            Op::UpsampleNearest { x, shape, factor } => {
                let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let (oh, ow) = (h * factor, w * factor);
                let gx = Self::accumulate(buffers, *x, n * c * h * w);
                for plane in 0..n * c {
                    let gp = &grad[plane * oh * ow..(plane + 1) * oh * ow];
                    let gxp = &mut gx[plane * h * w..(plane + 1) * h * w];
                    for y in 0..oh {
                        let sy = y / factor;
                        for x_ in 0..ow {
                            gxp[sy * w + x_ / factor] += gp[y * ow + x_];
                        }
                    }
                }
            }
            Op::Index { x, x_len, at } => {
                let gx = Self::accumulate(buffers, *x, *x_len);
                gx[*at] += grad[0];
            }
            Op::Slice1d {
                x,
                x_len,
                start,
                len,
            } => {
                let gx = Self::accumulate(buffers, *x, *x_len);
                for i in 0..*len {
                    gx[start + i] += grad[i];
                }
            }
            Op::Reshape { x } => {
                let len = self.nodes[idx].numel;
                add_into(Self::accumulate(buffers, *x, len), grad);
            }
            Op::Transpose2d { x, rows, cols } => {
                let gx = Self::accumulate(buffers, *x, rows * cols);
                for r in 0..*rows {
                    for c in 0..*cols {
                        gx[r * cols + c] += grad[c * rows + r];
                    }
                }
            }
            Op::GaussianKernel {
                r1,
                r2,
                r1_val,
                r2_val,
                theta,
                size,
                unnorm,
                sum,
            } => {
                let (r1f, r2f) = (r1_val.as_f64(), r2_val.as_f64());
                let sin_t = theta.sin();
                let cos_t = theta.cos();
                let sin2t = (2.0 * theta).sin();
                // partials of the quadratic-form coefficients w.r.t. the radii
                let db_dr1 = (
                    -cos_t * cos_t / (r1f * r1f * r1f),
                    sin2t / (2.0 * r1f * r1f * r1f),
                    -sin_t * sin_t / (r1f * r1f * r1f),
                );
                let db_dr2 = (
                    -sin_t * sin_t / (r2f * r2f * r2f),
                    -sin2t / (2.0 * r2f * r2f * r2f),
                    -cos_t * cos_t / (r2f * r2f * r2f),
                );
                let half = (*size / 2) as i64;
                let mut acc = [F::zero(); 2]; // Σ g·du/dp
                let mut du_sum = [F::zero(); 2]; // Σ du/dp
                let mut g_dot_k = F::zero(); // Σ g·k
                for iy in 0..*size {
                    let y = (iy as i64 - half) as f64;
                    for ix in 0..*size {
                        let x = (ix as i64 - half) as f64;
                        let i = iy * size + ix;
                        let u = unnorm[i];
                        let k = u / *sum;
                        g_dot_k += grad[i] * k;
                        for (p, db) in [db_dr1, db_dr2].iter().enumerate() {
                            let m = -(x * x * db.0 + 2.0 * x * y * db.1 + y * y * db.2);
                            let du = u * F::from_f64(m);
                            acc[p] += grad[i] * du;
                            du_sum[p] += du;
                        }
                    }
                }
                for (p, id) in [(0usize, *r1), (1usize, *r2)] {
                    let d = (acc[p] - g_dot_k * du_sum[p]) / *sum;
                    Self::accumulate(buffers, id, 1)[0] += d;
                }
            }
            Op::LinearGather { x, x_len, triples } => {
                let gx = Self::accumulate(buffers, *x, *x_len);
                for &(o, i, w) in triples.iter() {
                    gx[i as usize] += F::from_f64(w) * grad[o as usize];
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let (n, c, h, w) = (
                    logits.shape[0],
                    logits.shape[1],
                    logits.shape[2],
                    logits.shape[3],
                );
                let hw = h * w;
                let scale = grad[0] / F::from_f64((n * hw) as f64);
                let gx = Self::accumulate(buffers, logits.id, logits.data.len());
                for ni in 0..n {
                    for pos in 0..hw {
                        let label = labels[ni * hw + pos] as usize;
                        for ci in 0..c {
                            let i = (ni * c + ci) * hw + pos;
                            let onehot = if ci == label { F::one() } else { F::zero() };
                            gx[i] += scale * (probs[i] - onehot);
                        }
                    }
                }
            }
        }
    }
}

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

fn scan_channel_offsets<F: Scalar>(inputs: &[Saved<F>]) -> Vec<(usize, &Saved<F>)> {
    let mut off = 0;
    let mut out = Vec::with_capacity(inputs.len());
    for inp in inputs {
        out.push((off, inp));
        off += inp.shape[1];
    }
    out
}

/// Quadratic-form coefficients of the anisotropic Gaussian.
pub(crate) fn gaussian_coefficients(r1: f64, r2: f64, theta: f64) -> (f64, f64, f64) {
    let (sin_t, cos_t) = theta.sin_cos();
    let b0 = cos_t * cos_t / (2.0 * r1 * r1) + sin_t * sin_t / (2.0 * r2 * r2);
    let b1 = ((2.0 * theta).sin() / (4.0 * r1 * r1)) * ((r1 / r2) * (r1 / r2) - 1.0);
    let b2 = sin_t * sin_t / (2.0 * r1 * r1) + cos_t * cos_t / (2.0 * r2 * r2);
    (b0, b1, b2)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward<F: Scalar>(
    x: &[F],
    w: &[F],
    bias: &[F],
    n: usize,
    c: usize,
    h: usize,
    wd: usize,
    k: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<F> {
    let mut out = vec![F::zero(); n * k * oh * ow];
    for ni in 0..n {
        for ki in 0..k {
            let op = &mut out[(ni * k + ki) * oh * ow..(ni * k + ki + 1) * oh * ow];
            let b = bias[ki];
            for v in op.iter_mut() {
                *v = b;
            }
            for ci in 0..c {
                let xp = &x[(ni * c + ci) * h * wd..(ni * c + ci + 1) * h * wd];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = w[((ki * c + ci) * kh + ky) * kw + kx];
                        if wv == F::zero() {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as i64 - pad as i64;
                            if iy < 0 || iy >= h as i64 {
                                continue;
                            }
                            let xrow = &xp[iy as usize * wd..(iy as usize + 1) * wd];
                            let orow = &mut op[oy * ow..(oy + 1) * ow];
                            let (lo, hi) = ox_range(ow, wd, stride, pad, kx);
                            for ox in lo..hi {
                                let ix = ox * stride + kx - pad;
                                orow[ox] += wv * xrow[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Valid output-column range such that `ox·stride + kx − pad ∈ [0, w)`.
#[inline]
fn ox_range(ow: usize, w: usize, stride: usize, pad: usize, kx: usize) -> (usize, usize) {
    let lo = if kx >= pad {
        0
    } else {
        (pad - kx).div_ceil(stride)
    };
    let max_ix = w as i64 - 1 + pad as i64 - kx as i64;
    if max_ix < 0 {
        return (0, 0);
    }
    let hi = (max_ix as usize / stride + 1).min(ow);
    (lo.min(hi), hi)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward<F: Scalar>(
    x: &[F],
    w: &[F],
    grad: &[F],
    gx: &mut [F],
    gw: &mut [F],
    n: usize,
    c: usize,
    h: usize,
    wd: usize,
    k: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    for ni in 0..n {
        for ki in 0..k {
            let gp = &grad[(ni * k + ki) * oh * ow..(ni * k + ki + 1) * oh * ow];
            for ci in 0..c {
                let xp = &x[(ni * c + ci) * h * wd..(ni * c + ci + 1) * h * wd];
                let gxp = &mut gx[(ni * c + ci) * h * wd..(ni * c + ci + 1) * h * wd];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let widx = ((ki * c + ci) * kh + ky) * kw + kx;
                        let wv = w[widx];
                        let mut acc = F::zero();
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as i64 - pad as i64;
                            if iy < 0 || iy >= h as i64 {
                                continue;
                            }
                            let xbase = iy as usize * wd;
                            let grow = &gp[oy * ow..(oy + 1) * ow];
                            let (lo, hi) = ox_range(ow, wd, stride, pad, kx);
                            for ox in lo..hi {
                                let ix = ox * stride + kx - pad;
                                let g = grow[ox];
                                acc += g * xp[xbase + ix];
                                gxp[xbase + ix] += g * wv;
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
}
