//! The composed input-level adapter chain I1 → I5.

use super::qal::qal_forward;
use super::stages::{
    apply_ccm, constrain_color_params, constrain_kernel_params, gain_denoise_sharpen,
    nilut_apply, sog_white_balance, ColorParams, KernelParams,
};
use super::weights::AdapterBound;
use super::IspError;
use crate::degrade::LightingMode;
use crate::numerics::{DiffTensor, Scalar, Tape};
use crate::rawio::{demosaic_bilinear_op, mosaic_tensor, BayerImage};

/// Which learnable stages are active. A disabled stage is replaced by its
/// identity behavior.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct AdapterToggles {
    pub use_pk: bool,
    pub use_pm: bool,
    pub use_lut: bool,
}

impl Default for AdapterToggles {
    fn default() -> Self {
        AdapterToggles {
            use_pk: true,
            use_pm: true,
            use_lut: true,
        }
    }
}

impl AdapterToggles {
    pub fn all_off() -> Self {
        AdapterToggles {
            use_pk: false,
            use_pm: false,
            use_lut: false,
        }
    }
}

/// All stage images of one chain evaluation plus the constrained
/// parameters that produced them. Stages for disabled predictors alias the
/// previous stage.
pub struct IspTrace<F: Scalar> {
    pub i1: DiffTensor<F>,
    pub i2: DiffTensor<F>,
    pub i3: DiffTensor<F>,
    pub i4: DiffTensor<F>,
    pub i5: DiffTensor<F>,
    pub kernel_params: Option<KernelParams<F>>,
    pub color_params: Option<ColorParams<F>>,
}

impl<F: Scalar> IspTrace<F> {
    pub fn stages(&self) -> [&DiffTensor<F>; 5] {
        [&self.i1, &self.i2, &self.i3, &self.i4, &self.i5]
    }
}

/// Runs the chain from a stored RAW: level normalization, demosaicing,
/// then the learnable stages.
pub fn input_adapter_forward<F: Scalar>(
    tape: &mut Tape<F>,
    raw: &BayerImage,
    weights: &AdapterBound<F>,
    mode: LightingMode,
    toggles: AdapterToggles,
) -> Result<IspTrace<F>, IspError> {
    let mosaic = raw.normalize_levels();
    let mt = mosaic_tensor::<F>(&mosaic, raw.width(), raw.height());
    let lifted = tape.lift(&mt);
    let i1 = demosaic_bilinear_op(tape, &lifted, raw.pattern())?;
    input_adapter_forward_from_i1(tape, &i1, weights, mode, toggles)
}

/// Runs the learnable stages from an existing I1 tensor ([1, 3, H, W]).
pub fn input_adapter_forward_from_i1<F: Scalar>(
    tape: &mut Tape<F>,
    i1: &DiffTensor<F>,
    weights: &AdapterBound<F>,
    mode: LightingMode,
    toggles: AdapterToggles,
) -> Result<IspTrace<F>, IspError> {
    let (i2, kernel_params) = if toggles.use_pk {
        let raw_k = qal_forward(tape, i1, &weights.pk)?;
        let kp = constrain_kernel_params(tape, &raw_k, mode)?;
        let i2 = gain_denoise_sharpen(tape, i1, &kp)?;
        (i2, Some(kp))
    } else {
        (i1.clone(), None)
    };

    let (i3, i4, color_params) = if toggles.use_pm {
        let raw_m = qal_forward(tape, &i2, &weights.pm)?;
        let mut cp = constrain_color_params(tape, &raw_m)?;
        let (i3, m) = sog_white_balance(tape, &i2, &cp.rho)?;
        cp.m = Some(m);
        let i4 = apply_ccm(tape, &i3, &cp.e_ccm)?;
        (i3, i4, Some(cp))
    } else {
        (i2.clone(), i2.clone(), None)
    };

    let i5 = if toggles.use_lut {
        nilut_apply(tape, &i4, &weights.lut)?
    } else {
        tape.relu(&i4)
    };

    Ok(IspTrace {
        i1: i1.clone(),
        i2,
        i3,
        i4,
        i5,
        kernel_params,
        color_params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::DeterministicRng;
    use crate::isp::weights::{AdapterBound, AdapterWeights};
    use crate::numerics::{grad_check_multi_eps, ParamSet, GRAD_CHECK_EPS_LADDER_F64};
    use crate::rawio::CfaPattern;

    fn gray_raw(value: u16) -> BayerImage {
        BayerImage::new(8, 8, CfaPattern::RGGB, 10, 64, 1023, vec![value; 64]).unwrap()
    }

    #[test]
    fn zero_init_chain_is_identity_on_gray_raw() {
        let weights: AdapterWeights<f64> = AdapterWeights::zeros(16);
        let mut tape: Tape<f64> = Tape::new();
        let bound = weights.bind(&mut tape);
        let raw = gray_raw(500);
        let trace = input_adapter_forward(
            &mut tape,
            &raw,
            &bound,
            LightingMode::Normal,
            AdapterToggles::default(),
        )
        .unwrap();
        for (a, b) in trace.i5.data().iter().zip(trace.i1.data()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        let kp = trace.kernel_params.as_ref().unwrap();
        assert_eq!(kp.g.item(), 1.0);
    }

    #[test]
    fn same_input_gives_identical_traces() {
        let weights: AdapterWeights<f64> = AdapterWeights::init(7, 16);
        let raw = gray_raw(321);
        let run = || {
            let mut tape: Tape<f64> = Tape::new();
            let bound = weights.bind(&mut tape);
            let trace = input_adapter_forward(
                &mut tape,
                &raw,
                &bound,
                LightingMode::Dark,
                AdapterToggles::default(),
            )
            .unwrap();
            trace.i5.data().to_vec()
        };
        let a = run();
        let b = run();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn all_toggles_off_reduces_to_demosaic() {
        let weights: AdapterWeights<f64> = AdapterWeights::init(3, 16);
        let mut rng = DeterministicRng::new(55);
        let samples: Vec<u16> = (0..64).map(|_| 64 + (rng.next_u64() % 960) as u16).collect();
        let raw = BayerImage::new(8, 8, CfaPattern::RGGB, 10, 64, 1023, samples).unwrap();
        let mut tape: Tape<f64> = Tape::new();
        let bound = weights.bind(&mut tape);
        let trace = input_adapter_forward(
            &mut tape,
            &raw,
            &bound,
            LightingMode::Dark,
            AdapterToggles::all_off(),
        )
        .unwrap();
        for (a, b) in trace.i5.data().iter().zip(trace.i1.data()) {
            assert_eq!(a, b);
        }
        assert!(trace.kernel_params.is_none());
        assert!(trace.color_params.is_none());
    }

    #[test]
    fn full_chain_gradients_check_out_sampled() {
        let mut rng = DeterministicRng::new(77);
        let mut weights: AdapterWeights<f64> = AdapterWeights::init(9, 16);
        // open up the zero-initialized heads so every path carries gradient
        weights.pk.ffn2_w.data.iter_mut().for_each(|v| *v = rng.uniform_in(-0.2, 0.2));
        weights.pm.ffn2_w.data.iter_mut().for_each(|v| *v = rng.uniform_in(-0.2, 0.2));
        let (lw, lb) = &mut weights.lut.layers[4];
        lw.data.iter_mut().for_each(|v| *v = rng.uniform_in(-0.3, 0.3));
        lb.data.iter_mut().for_each(|v| *v = rng.uniform_in(-0.05, 0.05));

        let i1 = DiffTensor::from_vec(
            &[1, 3, 8, 8],
            (0..3 * 64).map(|_| rng.uniform() * 0.9 + 0.05).collect(),
        );
        let mut points = vec![i1];
        points.extend(
            weights
                .flat_params()
                .iter()
                .map(|p| DiffTensor::from_vec(&p.shape, p.data.clone())),
        );
        let err = grad_check_multi_eps(
            |tape, pts| {
                let mut it = pts[1..].iter().cloned();
                let bound = AdapterBound::from_tensor_iter(&mut it);
                let trace = input_adapter_forward_from_i1(
                    tape,
                    &pts[0],
                    &bound,
                    LightingMode::Normal,
                    AdapterToggles::default(),
                )
                .unwrap();
                tape.mean_all(&trace.i5)
            },
            &points,
            &GRAD_CHECK_EPS_LADDER_F64,
            Some(6),
        )
        .unwrap();
        assert!(err < 1e-4, "full chain max relative error {err}");
    }
}
