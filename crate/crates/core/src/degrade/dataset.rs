//! Dataset-level degradation of `.rawdesk` directories.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::model::{degrade_raw, sample_light_intensity, DegradeConfig, DegradeError};
use super::rng::{splitmix64, DeterministicRng};
use crate::rawio::{read_rawdesk, write_rawdesk, BayerImage};

/// One manifest record, serialized as a JSON line.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct ManifestEntry {
    pub input: String,
    pub output: Option<String>,
    pub l: Option<f64>,
    pub seed: u64,
    pub status: String,
}

/// Per-image seed: one SplitMix64 scramble of (master seed XOR image index),
/// making results independent of directory enumeration order.
pub fn per_image_seed(master_seed: u64, index: u64) -> u64 {
    splitmix64(master_seed ^ index)
}

/// Digital numbers to linear signal, clamped at zero below but not above
/// (samples beyond the white level keep their headroom so that the
/// zero-noise normal-mode round trip is exact).
fn dn_to_linear(img: &BayerImage) -> Vec<f64> {
    let black = img.black_level() as f64;
    let range = (img.white_level() - img.black_level()) as f64;
    img.samples()
        .iter()
        .map(|&v| ((v as f64 - black) / range).max(0.0))
        .collect()
}

fn linear_to_dn(img: &BayerImage, linear: &[f64]) -> Vec<u16> {
    let black = img.black_level() as f64;
    let range = (img.white_level() - img.black_level()) as f64;
    let max = BayerImage::max_dn(img.bit_depth()) as f64;
    linear
        .iter()
        .map(|&v| (black + v * range).round().clamp(0.0, max) as u16)
        .collect()
}

/// Degrades a single RAW image in DN space with an explicit light factor.
pub fn degrade_bayer(
    img: &BayerImage,
    l: f64,
    cfg: &DegradeConfig,
    rng: &mut DeterministicRng,
) -> Result<BayerImage, DegradeError> {
    let x = dn_to_linear(img);
    let y = degrade_raw(&x, l, cfg, rng)?;
    let dn = linear_to_dn(img, &y);
    BayerImage::new(
        img.width(),
        img.height(),
        img.pattern(),
        img.bit_depth(),
        img.black_level(),
        img.white_level(),
        dn,
    )
    .map_err(|e| DegradeError::BadConfig(format!("re-encode failed: {e}")))
}

/// Degrades every `.rawdesk` file under `input_dir` into `output_dir`,
/// recording one manifest line per image in `manifest.jsonl`.
///
/// Inputs are processed in sorted filename order; each gets its own derived
/// seed so results do not depend on enumeration order. Unreadable inputs are
/// recorded as failed and processing continues.
pub fn degrade_dataset(
    input_dir: &Path,
    cfg: &DegradeConfig,
    output_dir: &Path,
) -> Result<Vec<ManifestEntry>, DegradeError> {
    cfg.validate()?;
    fs::create_dir_all(output_dir).map_err(DegradeError::Io)?;
    let mut inputs: Vec<PathBuf> = fs::read_dir(input_dir)
        .map_err(DegradeError::Io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "rawdesk"))
        .collect();
    inputs.sort();

    let mut entries = Vec::with_capacity(inputs.len());
    for (index, input) in inputs.iter().enumerate() {
        let seed = per_image_seed(cfg.seed, index as u64);
        let mut rng = DeterministicRng::new(seed);
        let name = input
            .file_name()
            .expect("enumerated path has a file name")
            .to_string_lossy()
            .into_owned();
        let output = output_dir.join(&name);
        let entry = match read_rawdesk(input) {
            Ok(img) => {
                let l = sample_light_intensity(cfg, &mut rng);
                match degrade_bayer(&img, l, cfg, &mut rng)
                    .and_then(|d| write_rawdesk(&d, &output).map_err(DegradeError::Raw))
                {
                    Ok(()) => ManifestEntry {
                        input: name,
                        output: Some(output.to_string_lossy().into_owned()),
                        l: Some(l),
                        seed,
                        status: "ok".into(),
                    },
                    Err(e) => ManifestEntry {
                        input: name,
                        output: None,
                        l: Some(l),
                        seed,
                        status: format!("failed: {e}"),
                    },
                }
            }
            Err(e) => ManifestEntry {
                input: name,
                output: None,
                l: None,
                seed,
                status: format!("failed: {e}"),
            },
        };
        entries.push(entry);
    }

    let mut manifest = fs::File::create(output_dir.join("manifest.jsonl")).map_err(DegradeError::Io)?;
    for entry in &entries {
        writeln!(
            manifest,
            "{}",
            serde_json::to_string(entry).expect("manifest entry serializes")
        )
        .map_err(DegradeError::Io)?;
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::LightingMode;
    use crate::rawio::CfaPattern;

    fn write_inputs(dir: &Path, n: usize) {
        let mut rng = DeterministicRng::new(42);
        for i in 0..n {
            let samples: Vec<u16> = (0..16).map(|_| 64 + (rng.next_u64() % 960) as u16).collect();
            let img = BayerImage::new(4, 4, CfaPattern::RGGB, 10, 64, 1023, samples).unwrap();
            write_rawdesk(&img, &dir.join(format!("{i:04}.rawdesk"))).unwrap();
        }
    }

    #[test]
    fn normal_noiseless_copies_are_byte_identical() {
        let tmp = tempfile::tempdir().unwrap();
        let (inp, out) = (tmp.path().join("in"), tmp.path().join("out"));
        fs::create_dir_all(&inp).unwrap();
        write_inputs(&inp, 3);
        let cfg = DegradeConfig::noiseless(LightingMode::Normal);
        let entries = degrade_dataset(&inp, &cfg, &out).unwrap();
        assert_eq!(entries.len(), 3);
        for e in &entries {
            assert_eq!(e.status, "ok");
            assert_eq!(e.l, Some(1.0));
            let a = fs::read(inp.join(&e.input)).unwrap();
            let b = fs::read(e.output.as_ref().unwrap()).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn same_master_seed_gives_byte_identical_outputs() {
        let tmp = tempfile::tempdir().unwrap();
        let inp = tmp.path().join("in");
        fs::create_dir_all(&inp).unwrap();
        write_inputs(&inp, 4);
        let cfg = DegradeConfig {
            seed: 99,
            ..DegradeConfig::new(LightingMode::Dark)
        };
        let out1 = tmp.path().join("out1");
        let out2 = tmp.path().join("out2");
        degrade_dataset(&inp, &cfg, &out1).unwrap();
        degrade_dataset(&inp, &cfg, &out2).unwrap();
        for i in 0..4 {
            let name = format!("{i:04}.rawdesk");
            assert_eq!(
                fs::read(out1.join(&name)).unwrap(),
                fs::read(out2.join(&name)).unwrap()
            );
        }
        // manifests agree on everything except the output directory prefix
        let parse = |p: &Path| -> Vec<ManifestEntry> {
            fs::read_to_string(p.join("manifest.jsonl"))
                .unwrap()
                .lines()
                .map(|l| serde_json::from_str(l).unwrap())
                .collect()
        };
        for (a, b) in parse(&out1).iter().zip(parse(&out2).iter()) {
            assert_eq!(a.input, b.input);
            assert_eq!(a.l, b.l);
            assert_eq!(a.seed, b.seed);
            assert_eq!(a.status, b.status);
        }
    }

    #[test]
    fn dark_mode_light_factors_in_range() {
        let tmp = tempfile::tempdir().unwrap();
        let inp = tmp.path().join("in");
        fs::create_dir_all(&inp).unwrap();
        write_inputs(&inp, 8);
        let cfg = DegradeConfig::new(LightingMode::Dark);
        let entries = degrade_dataset(&inp, &cfg, &tmp.path().join("out")).unwrap();
        for e in entries {
            let l = e.l.unwrap();
            assert!((0.05..=0.4).contains(&l), "l = {l}");
        }
    }

    #[test]
    fn unreadable_input_is_reported_and_processing_continues() {
        let tmp = tempfile::tempdir().unwrap();
        let inp = tmp.path().join("in");
        fs::create_dir_all(&inp).unwrap();
        write_inputs(&inp, 2);
        fs::write(inp.join("0000.rawdesk"), b"XXXXgarbage").unwrap();
        let cfg = DegradeConfig::noiseless(LightingMode::Normal);
        let entries = degrade_dataset(&inp, &cfg, &tmp.path().join("out")).unwrap();
        assert_eq!(entries.len(), 2);
        assert!(entries[0].status.starts_with("failed"));
        assert_eq!(entries[1].status, "ok");
    }
}
