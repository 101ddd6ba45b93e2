//! RAW container: the `.rawdesk` format and 16-bit PGM import.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use super::cfa::CfaPattern;
use super::RawIoError;

const MAGIC: &[u8; 4] = b"RWDK";
const VERSION: u16 = 1;

/// Single-channel CFA mosaic with level metadata — the stored RAW.
#[derive(Clone, Debug, PartialEq)]
pub struct BayerImage {
    width: usize,
    height: usize,
    pattern: CfaPattern,
    bit_depth: u8,
    black_level: u16,
    white_level: u16,
    samples: Vec<u16>,
}

impl BayerImage {
    /// Validates all container invariants: even positive dimensions,
    /// bit depth in [8, 16], black < white, every sample within bit depth.
    pub fn new(
        width: usize,
        height: usize,
        pattern: CfaPattern,
        bit_depth: u8,
        black_level: u16,
        white_level: u16,
        samples: Vec<u16>,
    ) -> Result<Self, RawIoError> {
        if width == 0 || height == 0 || width % 2 != 0 || height % 2 != 0 {
            return Err(RawIoError::OddDimensions { width, height });
        }
        if !(8..=16).contains(&bit_depth) {
            return Err(RawIoError::BadHeader(format!(
                "bit depth {bit_depth} outside [8, 16]"
            )));
        }
        if black_level >= white_level {
            return Err(RawIoError::BadHeader(format!(
                "black level {black_level} must be below white level {white_level}"
            )));
        }
        if samples.len() != width * height {
            return Err(RawIoError::BadHeader(format!(
                "{} samples for {width}x{height} image",
                samples.len()
            )));
        }
        let max = Self::max_dn(bit_depth);
        if let Some((i, &v)) = samples.iter().enumerate().find(|(_, &v)| v > max) {
            return Err(RawIoError::SampleOutOfRange {
                index: i,
                value: v,
                max,
            });
        }
        Ok(BayerImage {
            width,
            height,
            pattern,
            bit_depth,
            black_level,
            white_level,
            samples,
        })
    }

    pub fn max_dn(bit_depth: u8) -> u16 {
        if bit_depth == 16 {
            u16::MAX
        } else {
            (1u16 << bit_depth) - 1
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pattern(&self) -> CfaPattern {
        self.pattern
    }

    pub fn bit_depth(&self) -> u8 {
        self.bit_depth
    }

    pub fn black_level(&self) -> u16 {
        self.black_level
    }

    pub fn white_level(&self) -> u16 {
        self.white_level
    }

    pub fn samples(&self) -> &[u16] {
        &self.samples
    }

    /// Maps digital numbers to [0, 1]:
    /// `clamp((v − black) / (white − black), 0, 1)`.
    pub fn normalize_levels(&self) -> Vec<f64> {
        let black = self.black_level as f64;
        let range = (self.white_level - self.black_level) as f64;
        self.samples
            .iter()
            .map(|&v| ((v as f64 - black) / range).clamp(0.0, 1.0))
            .collect()
    }
}

/// Writes the bit-exact `.rawdesk` container:
/// magic "RWDK", version u16 LE, width u32 LE, height u32 LE, cfa u8,
/// bit_depth u8, black u16 LE, white u16 LE, then samples u16 LE row-major.
pub fn write_rawdesk(image: &BayerImage, path: &Path) -> Result<(), RawIoError> {
    let mut buf = Vec::with_capacity(18 + image.samples.len() * 2);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(image.width as u32).to_le_bytes());
    buf.extend_from_slice(&(image.height as u32).to_le_bytes());
    buf.push(image.pattern.code());
    buf.push(image.bit_depth);
    buf.extend_from_slice(&image.black_level.to_le_bytes());
    buf.extend_from_slice(&image.white_level.to_le_bytes());
    for &s in &image.samples {
        buf.extend_from_slice(&s.to_le_bytes());
    }
    fs::write(path, buf).map_err(RawIoError::Io)
}

pub fn read_rawdesk(path: &Path) -> Result<BayerImage, RawIoError> {
    let bytes = fs::read(path).map_err(RawIoError::Io)?;
    read_rawdesk_bytes(&bytes)
}

pub fn read_rawdesk_bytes(bytes: &[u8]) -> Result<BayerImage, RawIoError> {
    if bytes.len() < 4 {
        return Err(RawIoError::Truncated {
            expected: 20,
            got: bytes.len(),
        });
    }
    if &bytes[0..4] != MAGIC {
        return Err(RawIoError::BadMagic(bytes[0..4].to_vec()));
    }
    if bytes.len() < 20 {
        return Err(RawIoError::Truncated {
            expected: 20,
            got: bytes.len(),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(RawIoError::BadHeader(format!(
            "unsupported version {version}"
        )));
    }
    let width = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    let height = u32::from_le_bytes([bytes[10], bytes[11], bytes[12], bytes[13]]) as usize;
    let pattern = CfaPattern::from_code(bytes[14])
        .ok_or_else(|| RawIoError::BadHeader(format!("unknown cfa code {}", bytes[14])))?;
    let bit_depth = bytes[15];
    let black = u16::from_le_bytes([bytes[16], bytes[17]]);
    let white = u16::from_le_bytes([bytes[18], bytes[19]]);
    let expected = 20 + width * height * 2;
    if bytes.len() < expected {
        return Err(RawIoError::Truncated {
            expected,
            got: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(RawIoError::BadHeader(format!(
            "{} trailing bytes after payload",
            bytes.len() - expected
        )));
    }
    let samples: Vec<u16> = bytes[20..]
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    BayerImage::new(width, height, pattern, bit_depth, black, white, samples)
}

/// JSON sidecar accompanying a 16-bit PGM capture.
#[derive(serde::Serialize, serde::Deserialize)]
pub struct PgmSidecar {
    pub pattern: String,
    pub black_level: u16,
    pub white_level: u16,
    pub bit_depth: u8,
}

/// Imports a binary 16-bit PGM (P5, big-endian samples per the PGM
/// convention) plus its JSON sidecar carrying pattern and levels.
pub fn read_pgm_with_sidecar(pgm: &Path, sidecar: &Path) -> Result<BayerImage, RawIoError> {
    let meta: PgmSidecar = serde_json::from_slice(&fs::read(sidecar).map_err(RawIoError::Io)?)
        .map_err(|e| RawIoError::BadHeader(format!("sidecar: {e}")))?;
    let pattern = CfaPattern::from_name(&meta.pattern)
        .ok_or_else(|| RawIoError::BadHeader(format!("sidecar pattern {:?}", meta.pattern)))?;

    let mut file = io::BufReader::new(fs::File::open(pgm).map_err(RawIoError::Io)?);
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(RawIoError::Io)?;

    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String, RawIoError> {
        // skip whitespace and '#' comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(RawIoError::Truncated {
                expected: start + 1,
                got: bytes.len(),
            });
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    let magic = token(&bytes)?;
    if magic != "P5" {
        return Err(RawIoError::BadMagic(magic.into_bytes()));
    }
    let width: usize = token(&bytes)?
        .parse()
        .map_err(|_| RawIoError::BadHeader("bad width".into()))?;
    let height: usize = token(&bytes)?
        .parse()
        .map_err(|_| RawIoError::BadHeader("bad height".into()))?;
    let maxval: u32 = token(&bytes)?
        .parse()
        .map_err(|_| RawIoError::BadHeader("bad maxval".into()))?;
    if maxval <= 255 || maxval > 65535 {
        return Err(RawIoError::BadHeader(format!(
            "expected 16-bit PGM (maxval in 256..=65535), got {maxval}"
        )));
    }
    pos += 1; // single whitespace after maxval
    let expected = pos + width * height * 2;
    if bytes.len() < expected {
        return Err(RawIoError::Truncated {
            expected,
            got: bytes.len(),
        });
    }
    let samples: Vec<u16> = bytes[pos..expected]
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    BayerImage::new(
        width,
        height,
        pattern,
        meta.bit_depth,
        meta.black_level,
        meta.white_level,
        samples,
    )
}

/// Writes the matching 16-bit PGM + sidecar pair.
pub fn write_pgm_with_sidecar(
    image: &BayerImage,
    pgm: &Path,
    sidecar: &Path,
) -> Result<(), RawIoError> {
    let mut out = Vec::new();
    write!(
        out,
        "P5\n{} {}\n{}\n",
        image.width(),
        image.height(),
        BayerImage::max_dn(image.bit_depth())
    )
    .map_err(RawIoError::Io)?;
    for &s in image.samples() {
        out.extend_from_slice(&s.to_be_bytes());
    }
    fs::write(pgm, out).map_err(RawIoError::Io)?;
    let meta = PgmSidecar {
        pattern: image.pattern().to_string(),
        black_level: image.black_level(),
        white_level: image.white_level(),
        bit_depth: image.bit_depth(),
    };
    fs::write(sidecar, serde_json::to_vec_pretty(&meta).expect("sidecar serializes"))
        .map_err(RawIoError::Io)
}
