//! Learnable state of the input-level adapters.

use crate::degrade::DeterministicRng;
use crate::numerics::{DiffTensor, Param, ParamSet, Scalar, Tape};

/// Token dimension produced by the two downscale conv blocks.
pub const TOKEN_DIM: usize = 32;
/// Attention embedding dimension d_k.
pub const EMBED_DIM: usize = 128;
/// Queries of the kernel predictor: g, r1, r2, kernel angle (unused, fixed
/// to zero downstream) and sharpen blend.
pub const PK_QUERIES: usize = 5;
/// Queries of the matrix predictor: the Minkowski exponent plus the nine
/// color-matrix offsets.
pub const PM_QUERIES: usize = 10;
/// Default hidden width of the neural implicit LUT.
pub const NILUT_DEFAULT_DIM: usize = 32;

/// Query-adaptive parameter predictor: two stride-2 conv blocks, key/value
/// projections, learnable queries and a two-layer FFN head.
#[derive(Clone, Debug)]
pub struct QalWeights<F: Scalar> {
    pub conv1_w: Param<F>,
    pub conv1_b: Param<F>,
    pub conv2_w: Param<F>,
    pub conv2_b: Param<F>,
    pub key_w: Param<F>,
    pub value_w: Param<F>,
    pub value_b: Param<F>,
    pub queries: Param<F>,
    pub ffn1_w: Param<F>,
    pub ffn1_b: Param<F>,
    pub ffn2_w: Param<F>,
    pub ffn2_b: Param<F>,
}

impl<F: Scalar> QalWeights<F> {
    /// Random init with a zero-initialized FFN output layer, so the raw
    /// parameter vector is exactly 0 for any image at the start of training.
    pub fn init(prefix: &str, n_queries: usize, rng: &mut DeterministicRng) -> Self {
        let n = |s: &str| format!("{prefix}.{s}");
        QalWeights {
            conv1_w: Param::uniform(&n("conv1.w"), &[16, 3, 3, 3], 3 * 9, rng),
            conv1_b: Param::zeros(&n("conv1.b"), &[16]),
            conv2_w: Param::uniform(&n("conv2.w"), &[TOKEN_DIM, 16, 3, 3], 16 * 9, rng),
            conv2_b: Param::zeros(&n("conv2.b"), &[TOKEN_DIM]),
            key_w: Param::uniform(&n("key.w"), &[EMBED_DIM, TOKEN_DIM], TOKEN_DIM, rng),
            value_w: Param::uniform(&n("value.w"), &[EMBED_DIM, TOKEN_DIM], TOKEN_DIM, rng),
            value_b: Param::zeros(&n("value.b"), &[EMBED_DIM]),
            queries: Param::uniform(&n("queries"), &[n_queries, EMBED_DIM], EMBED_DIM, rng),
            ffn1_w: Param::uniform(&n("ffn1.w"), &[EMBED_DIM, EMBED_DIM], EMBED_DIM, rng),
            ffn1_b: Param::zeros(&n("ffn1.b"), &[EMBED_DIM]),
            ffn2_w: Param::zeros(&n("ffn2.w"), &[1, EMBED_DIM]),
            ffn2_b: Param::zeros(&n("ffn2.b"), &[1]),
        }
    }

    /// Everything zero; the predictor then emits a zero raw vector.
    pub fn zeros(prefix: &str, n_queries: usize) -> Self {
        let mut w = Self::init(prefix, n_queries, &mut DeterministicRng::new(0));
        w.visit_mut(&mut |p| p.data.iter_mut().for_each(|v| *v = F::zero()));
        w
    }

    pub fn n_queries(&self) -> usize {
        self.queries.shape[0]
    }

    pub fn bind(&self, tape: &mut Tape<F>) -> QalBound<F> {
        QalBound {
            conv1_w: self.conv1_w.bind(tape),
            conv1_b: self.conv1_b.bind(tape),
            conv2_w: self.conv2_w.bind(tape),
            conv2_b: self.conv2_b.bind(tape),
            key_w: self.key_w.bind(tape),
            value_w: self.value_w.bind(tape),
            value_b: self.value_b.bind(tape),
            queries: self.queries.bind(tape),
            ffn1_w: self.ffn1_w.bind(tape),
            ffn1_b: self.ffn1_b.bind(tape),
            ffn2_w: self.ffn2_w.bind(tape),
            ffn2_b: self.ffn2_b.bind(tape),
        }
    }
}

impl<F: Scalar> ParamSet<F> for QalWeights<F> {
    fn visit(&self, f: &mut dyn FnMut(&Param<F>)) {
        for p in [
            &self.conv1_w,
            &self.conv1_b,
            &self.conv2_w,
            &self.conv2_b,
            &self.key_w,
            &self.value_w,
            &self.value_b,
            &self.queries,
            &self.ffn1_w,
            &self.ffn1_b,
            &self.ffn2_w,
            &self.ffn2_b,
        ] {
            f(p);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        for p in [
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.key_w,
            &mut self.value_w,
            &mut self.value_b,
            &mut self.queries,
            &mut self.ffn1_w,
            &mut self.ffn1_b,
            &mut self.ffn2_w,
            &mut self.ffn2_b,
        ] {
            f(p);
        }
    }
}

/// Tape-bound view of [`QalWeights`] for one forward/backward pass.
pub struct QalBound<F: Scalar> {
    pub conv1_w: DiffTensor<F>,
    pub conv1_b: DiffTensor<F>,
    pub conv2_w: DiffTensor<F>,
    pub conv2_b: DiffTensor<F>,
    pub key_w: DiffTensor<F>,
    pub value_w: DiffTensor<F>,
    pub value_b: DiffTensor<F>,
    pub queries: DiffTensor<F>,
    pub ffn1_w: DiffTensor<F>,
    pub ffn1_b: DiffTensor<F>,
    pub ffn2_w: DiffTensor<F>,
    pub ffn2_b: DiffTensor<F>,
}

impl<F: Scalar> QalBound<F> {
    /// Rebuilds a bound view from tensors in visitation order (12 entries).
    pub fn from_tensor_iter(it: &mut impl Iterator<Item = DiffTensor<F>>) -> Self {
        let mut next = || it.next().expect("enough tensors for QalBound");
        QalBound {
            conv1_w: next(),
            conv1_b: next(),
            conv2_w: next(),
            conv2_b: next(),
            key_w: next(),
            value_w: next(),
            value_b: next(),
            queries: next(),
            ffn1_w: next(),
            ffn1_b: next(),
            ffn2_w: next(),
            ffn2_b: next(),
        }
    }
}

/// Neural implicit 3D LUT: a residual per-pixel MLP
/// 3 → d → d → d → d → 3 (tanh on the four hidden activations), output
/// added to the input color.
#[derive(Clone, Debug)]
pub struct NilutWeights<F: Scalar> {
    /// Five (weight, bias) pairs, in input-to-output order.
    pub layers: Vec<(Param<F>, Param<F>)>,
    dim: usize,
}

impl<F: Scalar> NilutWeights<F> {
    /// Parameter count as a function of the hidden width.
    pub fn expected_param_count(dim: usize) -> usize {
        3 * dim * dim + 10 * dim + 3
    }

    /// Random hidden layers, zero output layer (identity LUT at init).
    pub fn init(prefix: &str, dim: usize, rng: &mut DeterministicRng) -> Self {
        let dims = [3, dim, dim, dim, dim, 3];
        let mut layers = Vec::with_capacity(5);
        for i in 0..5 {
            let (din, dout) = (dims[i], dims[i + 1]);
            let w_name = format!("{prefix}.l{i}.w");
            let b_name = format!("{prefix}.l{i}.b");
            if i == 4 {
                layers.push((
                    Param::zeros(&w_name, &[dout, din]),
                    Param::zeros(&b_name, &[dout]),
                ));
            } else {
                layers.push((
                    Param::uniform(&w_name, &[dout, din], din, rng),
                    Param::zeros(&b_name, &[dout]),
                ));
            }
        }
        let w = NilutWeights { layers, dim };
        debug_assert_eq!(w.param_count(), Self::expected_param_count(dim));
        w
    }

    pub fn zeros(prefix: &str, dim: usize) -> Self {
        let mut w = Self::init(prefix, dim, &mut DeterministicRng::new(0));
        w.visit_mut(&mut |p| p.data.iter_mut().for_each(|v| *v = F::zero()));
        w
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bind(&self, tape: &mut Tape<F>) -> NilutBound<F> {
        NilutBound {
            layers: self
                .layers
                .iter()
                .map(|(w, b)| (w.bind(tape), b.bind(tape)))
                .collect(),
        }
    }
}

impl<F: Scalar> ParamSet<F> for NilutWeights<F> {
    fn visit(&self, f: &mut dyn FnMut(&Param<F>)) {
        for (w, b) in &self.layers {
            f(w);
            f(b);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        for (w, b) in &mut self.layers {
            f(w);
            f(b);
        }
    }
}

pub struct NilutBound<F: Scalar> {
    pub layers: Vec<(DiffTensor<F>, DiffTensor<F>)>,
}

impl<F: Scalar> NilutBound<F> {
    /// Rebuilds a bound view from tensors in visitation order (10 entries).
    pub fn from_tensor_iter(it: &mut impl Iterator<Item = DiffTensor<F>>) -> Self {
        let mut layers = Vec::with_capacity(5);
        for _ in 0..5 {
            let w = it.next().expect("enough tensors for NilutBound");
            let b = it.next().expect("enough tensors for NilutBound");
            layers.push((w, b));
        }
        NilutBound { layers }
    }
}

/// All learnable state of the input-level adapters.
#[derive(Clone, Debug)]
pub struct AdapterWeights<F: Scalar> {
    pub pk: QalWeights<F>,
    pub pm: QalWeights<F>,
    pub lut: NilutWeights<F>,
}

impl<F: Scalar> AdapterWeights<F> {
    pub fn init(seed: u64, lut_dim: usize) -> Self {
        let mut rng = DeterministicRng::new(seed);
        AdapterWeights {
            pk: QalWeights::init("adapter.pk", PK_QUERIES, &mut rng),
            pm: QalWeights::init("adapter.pm", PM_QUERIES, &mut rng),
            lut: NilutWeights::init("adapter.lut", lut_dim, &mut rng),
        }
    }

    pub fn zeros(lut_dim: usize) -> Self {
        AdapterWeights {
            pk: QalWeights::zeros("adapter.pk", PK_QUERIES),
            pm: QalWeights::zeros("adapter.pm", PM_QUERIES),
            lut: NilutWeights::zeros("adapter.lut", lut_dim),
        }
    }

    pub fn bind(&self, tape: &mut Tape<F>) -> AdapterBound<F> {
        AdapterBound {
            pk: self.pk.bind(tape),
            pm: self.pm.bind(tape),
            lut: self.lut.bind(tape),
        }
    }
}

impl<F: Scalar> ParamSet<F> for AdapterWeights<F> {
    fn visit(&self, f: &mut dyn FnMut(&Param<F>)) {
        self.pk.visit(f);
        self.pm.visit(f);
        self.lut.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        self.pk.visit_mut(f);
        self.pm.visit_mut(f);
        self.lut.visit_mut(f);
    }
}

pub struct AdapterBound<F: Scalar> {
    pub pk: QalBound<F>,
    pub pm: QalBound<F>,
    pub lut: NilutBound<F>,
}

impl<F: Scalar> AdapterBound<F> {
    /// Rebuilds a bound view from tensors in visitation order.
    pub fn from_tensor_iter(it: &mut impl Iterator<Item = DiffTensor<F>>) -> Self {
        AdapterBound {
            pk: QalBound::from_tensor_iter(it),
            pm: QalBound::from_tensor_iter(it),
            lut: NilutBound::from_tensor_iter(it),
        }
    }
}
