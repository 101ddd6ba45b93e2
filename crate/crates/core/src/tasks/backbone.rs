//! Toy 4-stage residual backbone.

use crate::degrade::DeterministicRng;
use crate::numerics::{DiffTensor, Param, ParamSet, Scalar, Tape, TensorResult};

/// Channels after each stage.
pub const STAGE_CHANNELS: [usize; 4] = [16, 32, 64, 128];
pub const STEM_CHANNELS: usize = 16;

/// One basic residual block: conv-relu-conv plus (projected) skip, relu.
#[derive(Clone, Debug)]
pub struct BlockWeights<F: Scalar> {
    pub conv1_w: Param<F>,
    pub conv1_b: Param<F>,
    pub conv2_w: Param<F>,
    pub conv2_b: Param<F>,
    /// 1×1 strided projection, present when the block changes resolution
    /// or channel count.
    pub skip: Option<(Param<F>, Param<F>)>,
    pub stride: usize,
}

impl<F: Scalar> BlockWeights<F> {
    fn init(
        prefix: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        rng: &mut DeterministicRng,
    ) -> Self {
        let skip = if stride != 1 || c_in != c_out {
            Some((
                Param::uniform(&format!("{prefix}.skip.w"), &[c_out, c_in, 1, 1], c_in, rng),
                Param::zeros(&format!("{prefix}.skip.b"), &[c_out]),
            ))
        } else {
            None
        };
        BlockWeights {
            conv1_w: Param::uniform(&format!("{prefix}.conv1.w"), &[c_out, c_in, 3, 3], c_in * 9, rng),
            conv1_b: Param::zeros(&format!("{prefix}.conv1.b"), &[c_out]),
            conv2_w: Param::uniform(&format!("{prefix}.conv2.w"), &[c_out, c_out, 3, 3], c_out * 9, rng),
            conv2_b: Param::zeros(&format!("{prefix}.conv2.b"), &[c_out]),
            skip,
            stride,
        }
    }

    fn bind(&self, tape: &mut Tape<F>) -> BlockBound<F> {
        BlockBound {
            conv1_w: self.conv1_w.bind(tape),
            conv1_b: self.conv1_b.bind(tape),
            conv2_w: self.conv2_w.bind(tape),
            conv2_b: self.conv2_b.bind(tape),
            skip: self.skip.as_ref().map(|(w, b)| (w.bind(tape), b.bind(tape))),
            stride: self.stride,
        }
    }
}

impl<F: Scalar> ParamSet<F> for BlockWeights<F> {
    fn visit(&self, f: &mut dyn FnMut(&Param<F>)) {
        f(&self.conv1_w);
        f(&self.conv1_b);
        f(&self.conv2_w);
        f(&self.conv2_b);
        if let Some((w, b)) = &self.skip {
            f(w);
            f(b);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        f(&mut self.conv1_w);
        f(&mut self.conv1_b);
        f(&mut self.conv2_w);
        f(&mut self.conv2_b);
        if let Some((w, b)) = &mut self.skip {
            f(w);
            f(b);
        }
    }
}

pub struct BlockBound<F: Scalar> {
    conv1_w: DiffTensor<F>,
    conv1_b: DiffTensor<F>,
    conv2_w: DiffTensor<F>,
    conv2_b: DiffTensor<F>,
    skip: Option<(DiffTensor<F>, DiffTensor<F>)>,
    stride: usize,
}

impl<F: Scalar> BlockBound<F> {
    pub fn forward(&self, tape: &mut Tape<F>, x: &DiffTensor<F>) -> TensorResult<DiffTensor<F>> {
        let h = tape.conv2d(x, &self.conv1_w, &self.conv1_b, self.stride, 1)?;
        let h = tape.relu(&h);
        let h = tape.conv2d(&h, &self.conv2_w, &self.conv2_b, 1, 1)?;
        let shortcut = match &self.skip {
            Some((w, b)) => tape.conv2d(x, w, b, self.stride, 0)?,
            None => x.clone(),
        };
        let sum = tape.add(&h, &shortcut)?;
        Ok(tape.relu(&sum))
    }
}

/// Stem conv (stride 2) plus four stages of two residual blocks each,
/// stride 2 between stages: stage s emits input/2^(s+1) spatial size.
#[derive(Clone, Debug)]
pub struct ToyBackboneWeights<F: Scalar> {
    pub stem_w: Param<F>,
    pub stem_b: Param<F>,
    pub stages: Vec<[BlockWeights<F>; 2]>,
}

impl<F: Scalar> ToyBackboneWeights<F> {
    pub fn init(seed: u64) -> Self {
        let mut rng = DeterministicRng::new(seed);
        let stem_w = Param::uniform("backbone.stem.w", &[STEM_CHANNELS, 3, 3, 3], 27, &mut rng);
        let stem_b = Param::zeros("backbone.stem.b", &[STEM_CHANNELS]);
        let mut stages = Vec::with_capacity(4);
        let mut c_in = STEM_CHANNELS;
        for (s, &c_out) in STAGE_CHANNELS.iter().enumerate() {
            let b0 = BlockWeights::init(&format!("backbone.s{s}.b0"), c_in, c_out, 2, &mut rng);
            let b1 = BlockWeights::init(&format!("backbone.s{s}.b1"), c_out, c_out, 1, &mut rng);
            stages.push([b0, b1]);
            c_in = c_out;
        }
        ToyBackboneWeights {
            stem_w,
            stem_b,
            stages,
        }
    }

    pub fn bind(&self, tape: &mut Tape<F>) -> ToyBackboneBound<F> {
        ToyBackboneBound {
            stem_w: self.stem_w.bind(tape),
            stem_b: self.stem_b.bind(tape),
            stages: self
                .stages
                .iter()
                .map(|[a, b]| [a.bind(tape), b.bind(tape)])
                .collect(),
        }
    }
}

impl<F: Scalar> ParamSet<F> for ToyBackboneWeights<F> {
    fn visit(&self, f: &mut dyn FnMut(&Param<F>)) {
        f(&self.stem_w);
        f(&self.stem_b);
        for stage in &self.stages {
            stage[0].visit(f);
            stage[1].visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        f(&mut self.stem_w);
        f(&mut self.stem_b);
        for stage in &mut self.stages {
            stage[0].visit_mut(f);
            stage[1].visit_mut(f);
        }
    }
}

pub struct ToyBackboneBound<F: Scalar> {
    stem_w: DiffTensor<F>,
    stem_b: DiffTensor<F>,
    stages: Vec<[BlockBound<F>; 2]>,
}

impl<F: Scalar> ToyBackboneBound<F> {
    pub fn stem_forward(&self, tape: &mut Tape<F>, x: &DiffTensor<F>) -> TensorResult<DiffTensor<F>> {
        let h = tape.conv2d(x, &self.stem_w, &self.stem_b, 2, 1)?;
        Ok(tape.relu(&h))
    }

    pub fn stage_forward(
        &self,
        tape: &mut Tape<F>,
        stage: usize,
        x: &DiffTensor<F>,
    ) -> TensorResult<DiffTensor<F>> {
        let [b0, b1] = &self.stages[stage];
        let h = b0.forward(tape, x)?;
        b1.forward(tape, &h)
    }

    /// Plain (unadapted) forward: stage features 1–4.
    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        input: &DiffTensor<F>,
    ) -> TensorResult<[DiffTensor<F>; 4]> {
        let mut x = self.stem_forward(tape, input)?;
        let mut feats = Vec::with_capacity(4);
        for s in 0..4 {
            x = self.stage_forward(tape, s, &x)?;
            feats.push(x.clone());
        }
        Ok([
            feats[0].clone(),
            feats[1].clone(),
            feats[2].clone(),
            feats[3].clone(),
        ])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_shapes_follow_the_stride_plan() {
        for input in [32usize, 48, 64] {
            let weights: ToyBackboneWeights<f32> = ToyBackboneWeights::init(3);
            let mut tape: Tape<f32> = Tape::new();
            let bound = weights.bind(&mut tape);
            let x = tape.leaf(&[1, 3, input, input], vec![0.1; 3 * input * input]);
            let feats = bound.forward(&mut tape, &x).unwrap();
            for (s, f) in feats.iter().enumerate() {
                let expect = input / (1 << (s + 1)) / 2;
                assert_eq!(
                    f.shape(),
                    &[1, STAGE_CHANNELS[s], expect, expect],
                    "stage {s} for input {input}"
                );
            }
        }
    }

    #[test]
    fn deterministic_init_and_forward() {
        let a: ToyBackboneWeights<f32> = ToyBackboneWeights::init(9);
        let b: ToyBackboneWeights<f32> = ToyBackboneWeights::init(9);
        let run = |w: &ToyBackboneWeights<f32>| {
            let mut tape: Tape<f32> = Tape::new();
            let bound = w.bind(&mut tape);
            let x = tape.leaf(&[1, 3, 32, 32], vec![0.3; 3 * 1024]);
            let f = bound.forward(&mut tape, &x).unwrap();
            f[3].data().to_vec()
        };
        let fa = run(&a);
        let fb = run(&b);
        for (x, y) in fa.iter().zip(&fb) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
