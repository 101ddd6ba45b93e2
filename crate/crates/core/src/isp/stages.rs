//! The learnable ISP stages between I1 and I5.

use super::weights::NilutBound;
use super::IspError;
use crate::degrade::LightingMode;
use crate::numerics::{DiffTensor, Scalar, Tape};

/// Exponent floor offset: the Minkowski exponent is kept strictly above 1.
pub const RHO_EPS: f64 = 1e-3;
/// Upper bound on the Minkowski exponent (numerically indistinguishable
/// from max-RGB on 8-bit data, and safe against 32-bit overflow).
pub const RHO_MAX: f64 = 50.0;
/// Lower clamp for the gain ratio.
pub const GAIN_MIN: f64 = 0.01;
/// Largest denoise kernel window.
pub const KERNEL_SIZE_CAP: usize = 9;

/// Gain / denoise / sharpen parameters, tape-resident.
pub struct KernelParams<F: Scalar> {
    pub g: DiffTensor<F>,
    pub r1: DiffTensor<F>,
    pub r2: DiffTensor<F>,
    /// Kernel angle, fixed to zero.
    pub theta: f64,
    pub sigma: DiffTensor<F>,
}

/// White-balance / color-matrix parameters, tape-resident. `m` is filled
/// in once the white-balance stage has run on a concrete image.
pub struct ColorParams<F: Scalar> {
    pub rho: DiffTensor<F>,
    pub e_ccm: DiffTensor<F>,
    pub m: Option<DiffTensor<F>>,
}

/// Gain initialization per lighting mode.
pub fn gain_init(mode: LightingMode) -> f64 {
    match mode {
        LightingMode::Dark => 5.0,
        LightingMode::Normal | LightingMode::Overexp => 1.0,
    }
}

/// Maps the raw kernel-predictor vector (g, r1, r2, angle, sigma) onto
/// constrained parameters: biases are added to the initialization values,
/// radii are clamped to [0.1, 8] and reordered so r1 ≥ r2, and the sharpen
/// blend goes through a sigmoid.
pub fn constrain_kernel_params<F: Scalar>(
    tape: &mut Tape<F>,
    raw: &DiffTensor<F>,
    mode: LightingMode,
) -> Result<KernelParams<F>, IspError> {
    if raw.len() != 5 {
        return Err(IspError::BadInput(format!(
            "kernel predictor must emit 5 raw values, got {}",
            raw.len()
        )));
    }
    let g_raw = tape.index(raw, 0)?;
    let g_shift = tape.add_const(&g_raw, gain_init(mode));
    let g = tape.clamp(&g_shift, GAIN_MIN, f64::INFINITY);

    let r1_raw = tape.index(raw, 1)?;
    let r1_shift = tape.add_const(&r1_raw, 3.0);
    let r1 = tape.clamp(&r1_shift, 0.1, 8.0);
    let r2_raw = tape.index(raw, 2)?;
    let r2_shift = tape.add_const(&r2_raw, 2.0);
    let r2 = tape.clamp(&r2_shift, 0.1, 8.0);
    // reorder so the major axis is at least the minor axis
    let major = tape.max2(&r1, &r2)?;
    let minor = tape.min2(&r1, &r2)?;

    let sigma_raw = tape.index(raw, 4)?;
    let sigma = tape.sigmoid(&sigma_raw);

    Ok(KernelParams {
        g,
        r1: major,
        r2: minor,
        theta: 0.0,
        sigma,
    })
}

/// Maps the raw matrix-predictor vector (rho, then nine matrix offsets)
/// onto constrained parameters: rho = 1 + relu(raw) + ε bounded above, and
/// the offsets are added to the 3×3 identity.
pub fn constrain_color_params<F: Scalar>(
    tape: &mut Tape<F>,
    raw: &DiffTensor<F>,
) -> Result<ColorParams<F>, IspError> {
    if raw.len() != 10 {
        return Err(IspError::BadInput(format!(
            "matrix predictor must emit 10 raw values, got {}",
            raw.len()
        )));
    }
    let rho_raw = tape.index(raw, 0)?;
    let rho_pos = tape.relu(&rho_raw);
    let rho_shift = tape.add_const(&rho_pos, 1.0 + RHO_EPS);
    let rho = tape.clamp(&rho_shift, f64::NEG_INFINITY, RHO_MAX);

    let offsets = tape.slice_1d(raw, 1, 9)?;
    let offsets33 = tape.reshape(&offsets, &[3, 3])?;
    let identity = DiffTensor::from_vec(
        &[3, 3],
        vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]
            .into_iter()
            .map(F::from_f64)
            .collect(),
    );
    let e_ccm = tape.add(&offsets33, &identity)?;
    Ok(ColorParams {
        rho,
        e_ccm,
        m: None,
    })
}

/// Full constraint map over both predictors.
pub fn constrain_params<F: Scalar>(
    tape: &mut Tape<F>,
    raw_kernel: &DiffTensor<F>,
    raw_matrix: &DiffTensor<F>,
    mode: LightingMode,
) -> Result<(KernelParams<F>, ColorParams<F>), IspError> {
    Ok((
        constrain_kernel_params(tape, raw_kernel, mode)?,
        constrain_color_params(tape, raw_matrix)?,
    ))
}

/// Smallest odd window covering the major axis: min odd ≥ 4·r1 + 1,
/// capped at [`KERNEL_SIZE_CAP`].
pub fn kernel_window_size(r1: f64) -> usize {
    let needed = 4.0 * r1 + 1.0;
    let mut size = needed.ceil().max(1.0) as usize;
    if size % 2 == 0 {
        size += 1;
    }
    size.min(KERNEL_SIZE_CAP)
}

/// Unit-sum anisotropic Gaussian kernel (public stage entry; the fused
/// differentiable primitive lives on the tape).
pub fn build_gaussian_kernel<F: Scalar>(
    tape: &mut Tape<F>,
    r1: &DiffTensor<F>,
    r2: &DiffTensor<F>,
    theta: f64,
    size: usize,
) -> Result<DiffTensor<F>, IspError> {
    Ok(tape.gaussian_kernel(r1, r2, theta, size)?)
}

/// I1 → I2: gain, adaptive Gaussian smoothing with replicate border
/// padding, and the sharpness-preserving blend
/// `i2 = i2' + (g·i1 − i2')·σ`.
pub fn gain_denoise_sharpen<F: Scalar>(
    tape: &mut Tape<F>,
    i1: &DiffTensor<F>,
    p: &KernelParams<F>,
) -> Result<DiffTensor<F>, IspError> {
    let size = kernel_window_size(p.r1.item().as_f64());
    let kernel = tape.gaussian_kernel(&p.r1, &p.r2, p.theta, size)?;
    gain_denoise_sharpen_with_kernel(tape, i1, &p.g, &p.sigma, &kernel)
}

/// Variant with an explicit (already built) kernel.
pub fn gain_denoise_sharpen_with_kernel<F: Scalar>(
    tape: &mut Tape<F>,
    i1: &DiffTensor<F>,
    g: &DiffTensor<F>,
    sigma: &DiffTensor<F>,
    kernel: &DiffTensor<F>,
) -> Result<DiffTensor<F>, IspError> {
    let gained = tape.mul(i1, g)?;
    let pad = (kernel.shape()[0] - 1) / 2;
    let padded = tape.pad_replicate(&gained, pad)?;
    let smoothed = tape.depthwise_conv_shared(&padded, kernel)?;
    let detail = tape.sub(&gained, &smoothed)?;
    let blended = tape.mul(&detail, sigma)?;
    Ok(tape.add(&smoothed, &blended)?)
}

/// I2 → I3: Shades-of-Gray white balance with a learnable Minkowski
/// exponent. Returns the scaled image and the per-channel multipliers
/// `m_i = avg(i2(i)^ρ)^(1/ρ) / avg(i2^ρ)^(1/ρ)`.
///
/// An all-zero image is the degenerate case: the multipliers are defined
/// as (1, 1, 1).
pub fn sog_white_balance<F: Scalar>(
    tape: &mut Tape<F>,
    i2: &DiffTensor<F>,
    rho: &DiffTensor<F>,
) -> Result<(DiffTensor<F>, DiffTensor<F>), IspError> {
    let s = i2.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(IspError::BadInput(format!(
            "expected [1, 3, H, W] image, got {s:?}"
        )));
    }
    if i2.data().iter().all(|&v| v == F::zero()) {
        let ones = DiffTensor::from_vec(&[3], vec![F::one(); 3]);
        let m = tape.lift(&ones);
        let i3 = tape.scale_channels(i2, &m)?;
        return Ok((i3, m));
    }
    let powered = tape.pow(i2, rho)?;
    let per_channel = tape.mean_per_channel(&powered)?;
    let global = tape.mean_all(&powered);
    let ratio = tape.div(&per_channel, &global)?;
    let one = tape.lift(&DiffTensor::scalar(F::one()));
    let inv_rho = tape.div(&one, rho)?;
    let m = tape.pow(&ratio, &inv_rho)?;
    let i3 = tape.scale_channels(i2, &m)?;
    Ok((i3, m))
}

/// I3 → I4: right-multiplies every pixel row-vector by the color matrix.
pub fn apply_ccm<F: Scalar>(
    tape: &mut Tape<F>,
    i3: &DiffTensor<F>,
    e_ccm: &DiffTensor<F>,
) -> Result<DiffTensor<F>, IspError> {
    if e_ccm.shape() != [3, 3] {
        return Err(IspError::BadInput(format!(
            "color matrix must be 3x3, got {:?}",
            e_ccm.shape()
        )));
    }
    // out_k = Σ_c in_c · M[c][k] is a 1×1 convolution with the transpose
    let wt = tape.transpose2d(e_ccm)?;
    let w = tape.reshape(&wt, &[3, 3, 1, 1])?;
    let zero_bias = DiffTensor::from_vec(&[3], vec![F::zero(); 3]);
    Ok(tape.conv2d(i3, &w, &zero_bias, 1, 0)?)
}

/// I4 → I5: residual per-pixel MLP color transform, clamped at zero below.
pub fn nilut_apply<F: Scalar>(
    tape: &mut Tape<F>,
    i4: &DiffTensor<F>,
    lut: &NilutBound<F>,
) -> Result<DiffTensor<F>, IspError> {
    let mut x = i4.clone();
    let last = lut.layers.len() - 1;
    for (i, (w, b)) in lut.layers.iter().enumerate() {
        // each MLP layer acts per pixel: a 1×1 convolution
        let (dout, din) = (w.shape()[0], w.shape()[1]);
        let w4 = tape.reshape(w, &[dout, din, 1, 1])?;
        x = tape.conv2d(&x, &w4, b, 1, 0)?;
        if i != last {
            x = tape.tanh(&x);
        }
    }
    let residual = tape.add(i4, &x)?;
    Ok(tape.relu(&residual))
}
