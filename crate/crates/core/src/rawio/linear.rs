//! 3-channel linear radiometric images and display rendering.

use std::path::Path;

use super::RawIoError;

/// H×W×3 linear image, row-major interleaved, nominal range [0, 1] with
/// values above 1 permitted (over-exposure).
#[derive(Clone, Debug, PartialEq)]
pub struct LinearImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl LinearImage {
    pub fn zeros(width: usize, height: usize) -> Self {
        LinearImage {
            width,
            height,
            pixels: vec![0.0; width * height * 3],
        }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<f64>) -> Self {
        assert_eq!(pixels.len(), width * height * 3, "pixel buffer size");
        LinearImage {
            width,
            height,
            pixels,
        }
    }

    /// Builds from three channel planes laid out R, G, B.
    pub fn from_planes(width: usize, height: usize, planes: &[f64]) -> Self {
        let hw = width * height;
        assert_eq!(planes.len(), 3 * hw, "plane buffer size");
        let mut pixels = vec![0.0; 3 * hw];
        for i in 0..hw {
            pixels[3 * i] = planes[i];
            pixels[3 * i + 1] = planes[hw + i];
            pixels[3 * i + 2] = planes[2 * hw + i];
        }
        LinearImage {
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = 3 * (row * self.width + col);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f64; 3]) {
        let i = 3 * (row * self.width + col);
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn mean_intensity(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }

    /// Quantizes for display: clamp to [0, 1], raise to `gamma` (the encode
    /// exponent, 1/2.2 for standard display), round half up to [0, 255].
    pub fn to_display_bytes(&self, gamma: f64) -> Vec<u8> {
        assert!(gamma > 0.0, "gamma must be positive");
        self.pixels
            .iter()
            .map(|&v| {
                let e = v.clamp(0.0, 1.0).powf(gamma);
                (e * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
            })
            .collect()
    }
}

/// Renders an 8-bit PNG of the image. `gamma` is the encode exponent
/// (default callers pass 1/2.2).
pub fn render_display(image: &LinearImage, gamma: f64, path: &Path) -> Result<(), RawIoError> {
    let bytes = image.to_display_bytes(gamma);
    let img = image::RgbImage::from_raw(image.width() as u32, image.height() as u32, bytes)
        .expect("buffer matches dimensions");
    img.save(path)
        .map_err(|e| RawIoError::Io(std::io::Error::other(e)))
}

/// Renders several images side by side into one PNG, separated by a
/// 2-pixel black gutter. All images must share dimensions.
pub fn render_montage(
    images: &[&LinearImage],
    gamma: f64,
    path: &Path,
) -> Result<(), RawIoError> {
    assert!(!images.is_empty());
    let (w, h) = (images[0].width(), images[0].height());
    assert!(images.iter().all(|i| i.width() == w && i.height() == h));
    let gutter = 2usize;
    let total_w = w * images.len() + gutter * (images.len() - 1);
    let mut out = vec![0u8; total_w * h * 3];
    for (k, img) in images.iter().enumerate() {
        let bytes = img.to_display_bytes(gamma);
        let x0 = k * (w + gutter);
        for r in 0..h {
            let src = &bytes[r * w * 3..(r + 1) * w * 3];
            let dst = &mut out[(r * total_w + x0) * 3..(r * total_w + x0 + w) * 3];
            dst.copy_from_slice(src);
        }
    }
    let img = image::RgbImage::from_raw(total_w as u32, h as u32, out)
        .expect("buffer matches dimensions");
    img.save(path)
        .map_err(|e| RawIoError::Io(std::io::Error::other(e)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn display_quantization_reference_points() {
        let mut img = LinearImage::zeros(2, 1);
        img.set_pixel(0, 0, [0.0, 1.0, 0.5]);
        img.set_pixel(0, 1, [2.0, -0.5, 0.5]);
        let bytes = img.to_display_bytes(1.0 / 2.2);
        assert_eq!(bytes[0], 0); // zero stays black
        assert_eq!(bytes[1], 255); // 1.0 maps to 255
        assert_eq!(bytes[2], 186); // round(255 * 0.5^(1/2.2))
        assert_eq!(bytes[3], 255); // over-exposure clamps
        assert_eq!(bytes[4], 0); // negatives clamp
    }

    #[test]
    fn all_zero_image_renders_black_png() {
        let dir = tempfile::tempdir().unwrap();
        let img = LinearImage::zeros(4, 4);
        let path = dir.path().join("black.png");
        render_display(&img, 1.0 / 2.2, &path).unwrap();
        let back = image::open(&path).unwrap().to_rgb8();
        assert!(back.pixels().all(|p| p.0 == [0, 0, 0]));
    }

    #[test]
    fn render_to_unwritable_path_is_io_error() {
        let img = LinearImage::zeros(2, 2);
        let err = render_display(&img, 1.0, Path::new("/nonexistent-dir/x.png")).unwrap_err();
        assert!(matches!(err, RawIoError::Io(_)));
    }
}
