//! Bilinear demosaicing and re-mosaicking.
//!
//! Missing colors are filled with the mean of same-color neighbors in the
//! 3×3 window. Borders use replicate padding: neighbor values are read at
//! coordinate-clamped positions while the CFA color of a neighbor follows
//! the parity of its unclamped coordinates (the pattern continues across
//! the border).

use std::sync::Arc;

use super::cfa::{CfaPattern, Channel};
use super::linear::LinearImage;
use super::RawIoError;
use crate::numerics::{DiffTensor, Scalar, Tape, TensorResult};

/// Sparse coefficients of the demosaic linear map for one image geometry.
///
/// Output indexing is NCHW with N=1 and C=3; input is the row-major mosaic.
pub fn demosaic_triples(width: usize, height: usize, pattern: CfaPattern) -> Vec<(u32, u32, f64)> {
    let mut triples = Vec::with_capacity(width * height * 3 * 3);
    let hw = width * height;
    for r in 0..height as i64 {
        for c in 0..width as i64 {
            let native = pattern.color_at(r, c);
            let in_native = (r as usize * width + c as usize) as u32;
            for ch in [Channel::R, Channel::G, Channel::B] {
                let out = (ch as usize * hw + r as usize * width + c as usize) as u32;
                if ch == native {
                    triples.push((out, in_native, 1.0));
                    continue;
                }
                let mut sites = Vec::with_capacity(4);
                for dr in -1..=1i64 {
                    for dc in -1..=1i64 {
                        if dr == 0 && dc == 0 {
                            continue;
                        }
                        if pattern.color_at(r + dr, c + dc) == ch {
                            let rr = (r + dr).clamp(0, height as i64 - 1) as usize;
                            let cc = (c + dc).clamp(0, width as i64 - 1) as usize;
                            sites.push((rr * width + cc) as u32);
                        }
                    }
                }
                let w = 1.0 / sites.len() as f64;
                for s in sites {
                    triples.push((out, s, w));
                }
            }
        }
    }
    triples
}

/// Demosaics a level-normalized mosaic into a 3-channel linear image.
pub fn demosaic_bilinear(
    mosaic: &[f64],
    width: usize,
    height: usize,
    pattern: CfaPattern,
) -> Result<LinearImage, RawIoError> {
    if width % 2 != 0 || height % 2 != 0 || width == 0 || height == 0 {
        return Err(RawIoError::OddDimensions { width, height });
    }
    assert_eq!(mosaic.len(), width * height, "mosaic buffer size");
    let hw = width * height;
    let mut planes = vec![0.0f64; 3 * hw];
    for (o, i, w) in demosaic_triples(width, height, pattern) {
        planes[o as usize] += w * mosaic[i as usize];
    }
    Ok(LinearImage::from_planes(width, height, &planes))
}

/// Tape-op variant of [`demosaic_bilinear`]: mosaic [H, W] → image
/// [1, 3, H, W], differentiable w.r.t. the mosaic values.
pub fn demosaic_bilinear_op<F: Scalar>(
    tape: &mut Tape<F>,
    mosaic: &DiffTensor<F>,
    pattern: CfaPattern,
) -> Result<DiffTensor<F>, RawIoError> {
    let shape = mosaic.shape();
    if shape.len() != 2 {
        return Err(RawIoError::BadHeader(format!(
            "demosaic expects a 2-D mosaic, got shape {shape:?}"
        )));
    }
    let (height, width) = (shape[0], shape[1]);
    if width % 2 != 0 || height % 2 != 0 {
        return Err(RawIoError::OddDimensions { width, height });
    }
    let triples = Arc::new(demosaic_triples(width, height, pattern));
    tape.linear_gather(mosaic, triples, &[1, 3, height, width])
        .map_err(|e| RawIoError::BadHeader(e.to_string()))
}

/// Keeps exactly the CFA-selected channel per pixel.
pub fn mosaic_from_rgb(image: &LinearImage, pattern: CfaPattern) -> Result<Vec<f64>, RawIoError> {
    let (width, height) = (image.width(), image.height());
    if width % 2 != 0 || height % 2 != 0 {
        return Err(RawIoError::OddDimensions { width, height });
    }
    let mut mosaic = vec![0.0; width * height];
    for r in 0..height {
        for c in 0..width {
            let ch = pattern.color_at(r as i64, c as i64);
            mosaic[r * width + c] = image.pixel(r, c)[ch as usize];
        }
    }
    Ok(mosaic)
}

/// Convenience: mosaic as a 2-D constant tensor.
pub fn mosaic_tensor<F: Scalar>(mosaic: &[f64], width: usize, height: usize) -> DiffTensor<F> {
    DiffTensor::from_vec(
        &[height, width],
        mosaic.iter().map(|&v| F::from_f64(v)).collect(),
    )
}

/// NCHW (N=1, C=3) tensor view of a [`LinearImage`].
pub fn image_to_tensor<F: Scalar>(image: &LinearImage) -> DiffTensor<F> {
    let (w, h) = (image.width(), image.height());
    let hw = w * h;
    let mut data = vec![F::zero(); 3 * hw];
    for r in 0..h {
        for c in 0..w {
            let px = image.pixel(r, c);
            for ch in 0..3 {
                data[ch * hw + r * w + c] = F::from_f64(px[ch]);
            }
        }
    }
    DiffTensor::from_vec(&[1, 3, h, w], data)
}

/// Inverse of [`image_to_tensor`].
pub fn tensor_to_image<F: Scalar>(t: &DiffTensor<F>) -> TensorResult<LinearImage> {
    let s = t.shape();
    if s.len() != 4 || s[0] != 1 || s[1] != 3 {
        return Err(crate::numerics::TensorError::ShapeMismatch {
            op: "tensor_to_image",
            detail: format!("expected [1, 3, H, W], got {s:?}"),
        });
    }
    let (h, w) = (s[2], s[3]);
    let hw = h * w;
    let d = t.data();
    let mut img = LinearImage::zeros(w, h);
    for r in 0..h {
        for c in 0..w {
            img.set_pixel(
                r,
                c,
                [
                    d[r * w + c].as_f64(),
                    d[hw + r * w + c].as_f64(),
                    d[2 * hw + r * w + c].as_f64(),
                ],
            );
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::DeterministicRng;

    /// Hand interpolation oracle: walks the 3×3 window per pixel and
    /// channel, averaging same-color sites, with the same border policy as
    /// the documented contract (values clamp, pattern follows parity).
    fn demosaic_oracle(
        mosaic: &[f64],
        w: usize,
        h: usize,
        pattern: CfaPattern,
    ) -> Vec<[f64; 3]> {
        let mut out = vec![[0.0; 3]; w * h];
        for r in 0..h as i64 {
            for c in 0..w as i64 {
                for (ci, ch) in [Channel::R, Channel::G, Channel::B].into_iter().enumerate() {
                    let v = if pattern.color_at(r, c) == ch {
                        mosaic[r as usize * w + c as usize]
                    } else {
                        let mut acc = 0.0;
                        let mut count = 0;
                        for dr in -1..=1i64 {
                            for dc in -1..=1i64 {
                                if (dr, dc) == (0, 0) {
                                    continue;
                                }
                                if pattern.color_at(r + dr, c + dc) == ch {
                                    let rr = (r + dr).clamp(0, h as i64 - 1) as usize;
                                    let cc = (c + dc).clamp(0, w as i64 - 1) as usize;
                                    acc += mosaic[rr * w + cc];
                                    count += 1;
                                }
                            }
                        }
                        acc / count as f64
                    };
                    out[(r as usize) * w + c as usize][ci] = v;
                }
            }
        }
        out
    }

    #[test]
    fn constant_mosaic_gives_constant_image() {
        for pattern in CfaPattern::ALL {
            let m = vec![0.37; 16];
            let img = demosaic_bilinear(&m, 4, 4, pattern).unwrap();
            for r in 0..4 {
                for c in 0..4 {
                    let px = img.pixel(r, c);
                    for ch in 0..3 {
                        assert!((px[ch] - 0.37).abs() < 1e-15, "{pattern} at ({r},{c})");
                    }
                }
            }
        }
    }

    #[test]
    fn two_by_two_rggb_matches_hand_oracle() {
        // R=0.8 G1=0.4 / G2=0.2 B=0.6
        let m = vec![0.8, 0.4, 0.2, 0.6];
        let img = demosaic_bilinear(&m, 2, 2, CfaPattern::RGGB).unwrap();
        let oracle = demosaic_oracle(&m, 2, 2, CfaPattern::RGGB);
        for r in 0..2 {
            for c in 0..2 {
                let px = img.pixel(r, c);
                for ch in 0..3 {
                    assert!(
                        (px[ch] - oracle[r * 2 + c][ch]).abs() < 1e-12,
                        "({r},{c}) ch {ch}: {} vs {}",
                        px[ch],
                        oracle[r * 2 + c][ch]
                    );
                }
            }
        }
    }

    #[test]
    fn random_mosaics_match_hand_oracle_all_patterns() {
        let mut rng = DeterministicRng::new(77);
        for pattern in CfaPattern::ALL {
            for _ in 0..5 {
                let (w, h) = (6, 4);
                let m: Vec<f64> = (0..w * h).map(|_| rng.uniform()).collect();
                let img = demosaic_bilinear(&m, w, h, pattern).unwrap();
                let oracle = demosaic_oracle(&m, w, h, pattern);
                for r in 0..h {
                    for c in 0..w {
                        let px = img.pixel(r, c);
                        for ch in 0..3 {
                            assert!((px[ch] - oracle[r * w + c][ch]).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn demosaic_is_linear() {
        let mut rng = DeterministicRng::new(78);
        let m: Vec<f64> = (0..24).map(|_| rng.uniform()).collect();
        let doubled: Vec<f64> = m.iter().map(|v| 2.0 * v).collect();
        let a = demosaic_bilinear(&m, 6, 4, CfaPattern::GRBG).unwrap();
        let b = demosaic_bilinear(&doubled, 6, 4, CfaPattern::GRBG).unwrap();
        for (u, v) in a.pixels().iter().zip(b.pixels()) {
            assert!((2.0 * u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn odd_dimensions_rejected() {
        assert!(demosaic_bilinear(&[0.0; 6], 3, 2, CfaPattern::RGGB).is_err());
    }

    #[test]
    fn mosaic_from_rgb_selects_cfa_sites() {
        // pure red image under RGGB: r at R sites, 0 elsewhere
        let mut img = LinearImage::zeros(4, 4);
        for r in 0..4 {
            for c in 0..4 {
                img.set_pixel(r, c, [0.9, 0.0, 0.0]);
            }
        }
        let m = mosaic_from_rgb(&img, CfaPattern::RGGB).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                let expect = if r % 2 == 0 && c % 2 == 0 { 0.9 } else { 0.0 };
                assert_eq!(m[r * 4 + c], expect);
            }
        }
    }

    #[test]
    fn mosaic_of_demosaic_recovers_cfa_sites() {
        let mut rng = DeterministicRng::new(79);
        for pattern in CfaPattern::ALL {
            let m: Vec<f64> = (0..16).map(|_| rng.uniform()).collect();
            let img = demosaic_bilinear(&m, 4, 4, pattern).unwrap();
            let back = mosaic_from_rgb(&img, pattern).unwrap();
            for (a, b) in m.iter().zip(&back) {
                assert_eq!(a, b, "native samples survive the round trip exactly");
            }
        }
    }

    #[test]
    fn demosaic_op_matches_plain_and_grad_checks() {
        use crate::numerics::{grad_check, GRAD_CHECK_EPS_F64};
        let mut rng = DeterministicRng::new(80);
        let m: Vec<f64> = (0..16).map(|_| rng.uniform()).collect();
        let mut tape: Tape<f64> = Tape::new();
        let mt = mosaic_tensor::<f64>(&m, 4, 4);
        let out = demosaic_bilinear_op(&mut tape, &mt, CfaPattern::BGGR).unwrap();
        let plain = demosaic_bilinear(&m, 4, 4, CfaPattern::BGGR).unwrap();
        let plain_t = image_to_tensor::<f64>(&plain);
        for (a, b) in out.data().iter().zip(plain_t.data()) {
            assert!((a - b).abs() < 1e-15);
        }

        let point = mosaic_tensor::<f64>(&m, 4, 4);
        let err = grad_check(
            |tape, p| {
                let img = demosaic_bilinear_op(tape, p, CfaPattern::BGGR).unwrap();
                let sq = tape.mul(&img, &img).unwrap();
                tape.mean_all(&sq)
            },
            &point,
            GRAD_CHECK_EPS_F64,
        )
        .unwrap();
        assert!(err < 1e-9, "demosaic is linear; FD error {err}");
    }
}
