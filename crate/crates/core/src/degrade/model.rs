//! Illumination-scaling plus shot/read-noise degradation.

use std::fmt;

use super::rng::DeterministicRng;

/// Lighting condition of a run or a synthesized dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LightingMode {
    Normal,
    Dark,
    Overexp,
}

impl LightingMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "normal" => Some(LightingMode::Normal),
            "dark" => Some(LightingMode::Dark),
            "overexp" => Some(LightingMode::Overexp),
            _ => None,
        }
    }
}

impl fmt::Display for LightingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LightingMode::Normal => f.write_str("normal"),
            LightingMode::Dark => f.write_str("dark"),
            LightingMode::Overexp => f.write_str("overexp"),
        }
    }
}

/// Degradation constants. Defaults: dark scales intensity by l drawn from
/// [0.05, 0.4], over-exposure from [2.5, 3.5], normal is the degenerate
/// [1, 1]; read noise 0.01 and shot-noise coefficient 0.02 in linear units.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct DegradeConfig {
    pub mode: LightingMode,
    pub l_min: f64,
    pub l_max: f64,
    /// Read-noise standard deviation (signal-independent), linear units.
    pub delta_r: f64,
    /// Shot-noise coefficient (variance grows linearly with signal).
    pub delta_s: f64,
    pub seed: u64,
    /// Apply the noise term with mean l·x instead of zero mean, adding it
    /// on top of the scaled signal (so E[y] = 2·l·x).
    pub literal_eq7: bool,
}

impl DegradeConfig {
    pub fn new(mode: LightingMode) -> Self {
        let (l_min, l_max) = match mode {
            LightingMode::Normal => (1.0, 1.0),
            LightingMode::Dark => (0.05, 0.4),
            LightingMode::Overexp => (2.5, 3.5),
        };
        DegradeConfig {
            mode,
            l_min,
            l_max,
            delta_r: 0.01,
            delta_s: 0.02,
            seed: 0,
            literal_eq7: false,
        }
    }

    pub fn noiseless(mode: LightingMode) -> Self {
        DegradeConfig {
            delta_r: 0.0,
            delta_s: 0.0,
            ..Self::new(mode)
        }
    }

    pub fn validate(&self) -> Result<(), DegradeError> {
        if self.l_min > self.l_max {
            return Err(DegradeError::BadConfig(format!(
                "l range [{}, {}] is empty",
                self.l_min, self.l_max
            )));
        }
        if self.delta_r < 0.0 || self.delta_s < 0.0 {
            return Err(DegradeError::BadConfig(format!(
                "noise constants must be nonnegative, got delta_r={}, delta_s={}",
                self.delta_r, self.delta_s
            )));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub enum DegradeError {
    BadConfig(String),
    /// Degradation requires nonnegative input signal.
    NegativeInput { index: usize, value: f64 },
    Io(std::io::Error),
    Raw(crate::rawio::RawIoError),
}

impl fmt::Display for DegradeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DegradeError::BadConfig(s) => write!(f, "bad degrade config: {s}"),
            DegradeError::NegativeInput { index, value } => {
                write!(f, "negative input sample {value} at index {index}")
            }
            DegradeError::Io(e) => write!(f, "i/o error: {e}"),
            DegradeError::Raw(e) => write!(f, "raw container error: {e}"),
        }
    }
}

impl std::error::Error for DegradeError {}

/// Draws the light-intensity factor uniformly from the configured range.
/// Consumes exactly one uniform from the stream (even for the degenerate
/// normal-mode range).
pub fn sample_light_intensity(cfg: &DegradeConfig, rng: &mut DeterministicRng) -> f64 {
    let u = rng.uniform();
    cfg.l_min + u * (cfg.l_max - cfg.l_min)
}

/// Degrades a nonnegative signal elementwise: `y = l·x + n` with
/// `n ~ Normal(0, δ_r² + δ_s·l·x)`, so `E[y] = l·x` and
/// `Var[y] = δ_r² + δ_s·l·x`. With `literal_eq7` the noise term instead has
/// mean `l·x` and is added on top of the scaled signal.
///
/// Output is clamped at 0 below; there is no upper clamp, preserving
/// over-exposure. One Gaussian (two uniforms) is consumed per element in
/// row-major order.
pub fn degrade_raw(
    x: &[f64],
    l: f64,
    cfg: &DegradeConfig,
    rng: &mut DeterministicRng,
) -> Result<Vec<f64>, DegradeError> {
    Ok(degrade_raw_unclamped(x, l, cfg, rng)?
        .into_iter()
        .map(|v| v.max(0.0))
        .collect())
}

/// [`degrade_raw`] before the final clamp at zero; used by statistical
/// moment tests where clamping would bias the sample mean.
pub fn degrade_raw_unclamped(
    x: &[f64],
    l: f64,
    cfg: &DegradeConfig,
    rng: &mut DeterministicRng,
) -> Result<Vec<f64>, DegradeError> {
    cfg.validate()?;
    if let Some((index, &value)) = x.iter().enumerate().find(|(_, &v)| v < 0.0) {
        return Err(DegradeError::NegativeInput { index, value });
    }
    let mut out = Vec::with_capacity(x.len());
    for &v in x {
        let scaled = l * v;
        let var = cfg.delta_r * cfg.delta_r + cfg.delta_s * scaled;
        let noise = if var > 0.0 {
            var.sqrt() * rng.gaussian()
        } else {
            // keep the stream position independent of the constants
            rng.gaussian();
            0.0
        };
        let y = if cfg.literal_eq7 {
            // printed form: y = l·x + x_n with x_n ~ N(l·x, var)
            scaled + (scaled + noise)
        } else {
            scaled + noise
        };
        out.push(y);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_mode_light_is_always_one() {
        let cfg = DegradeConfig::new(LightingMode::Normal);
        let mut rng = DeterministicRng::new(1);
        for _ in 0..100 {
            assert_eq!(sample_light_intensity(&cfg, &mut rng), 1.0);
        }
    }

    #[test]
    fn dark_mode_light_stays_in_range_with_expected_mean() {
        let cfg = DegradeConfig::new(LightingMode::Dark);
        let mut rng = DeterministicRng::new(2);
        let n = 100_000;
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        let mut sum = 0.0;
        for _ in 0..n {
            let l = sample_light_intensity(&cfg, &mut rng);
            min = min.min(l);
            max = max.max(l);
            sum += l;
        }
        assert!(min >= 0.05);
        assert!(max <= 0.4);
        let mean = sum / n as f64;
        assert!((mean - 0.225).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn identical_seeds_identical_light() {
        let cfg = DegradeConfig::new(LightingMode::Dark);
        let a = sample_light_intensity(&cfg, &mut DeterministicRng::new(7));
        let b = sample_light_intensity(&cfg, &mut DeterministicRng::new(7));
        assert_eq!(a, b);
    }

    #[test]
    fn zero_noise_is_exact_scaling() {
        let mut cfg = DegradeConfig::noiseless(LightingMode::Normal);
        let x = vec![0.1, 0.5, 0.9, 1.4];
        let y = degrade_raw(&x, 1.0, &cfg, &mut DeterministicRng::new(3)).unwrap();
        assert_eq!(x, y);

        cfg.mode = LightingMode::Dark;
        let y = degrade_raw(&[0.5], 0.2, &cfg, &mut DeterministicRng::new(3)).unwrap();
        assert!((y[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn moments_match_model() {
        // l = 0.2, x = 0.5, δ_r = 0.01, δ_s = 0.05: Var = 1e-4 + 0.05*0.1 = 0.0051
        let cfg = DegradeConfig {
            delta_r: 0.01,
            delta_s: 0.05,
            ..DegradeConfig::new(LightingMode::Dark)
        };
        let n = 1_000_000usize;
        let x = vec![0.5; n];
        let mut rng = DeterministicRng::new(12345);
        let y = degrade_raw_unclamped(&x, 0.2, &cfg, &mut rng).unwrap();
        let mean = y.iter().sum::<f64>() / n as f64;
        let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let sigma = 0.0051f64.sqrt();
        let tol = 4.0 * sigma / (n as f64).sqrt();
        assert!((mean - 0.1).abs() < tol, "mean {mean} not within {tol} of 0.1");
        assert!((var - 0.0051).abs() < 0.0051 * 0.01, "variance {var}");
    }

    #[test]
    fn literal_eq7_doubles_the_mean() {
        let cfg = DegradeConfig {
            literal_eq7: true,
            ..DegradeConfig::noiseless(LightingMode::Dark)
        };
        let y = degrade_raw(&[0.5], 0.2, &cfg, &mut DeterministicRng::new(4)).unwrap();
        assert!((y[0] - 0.2).abs() < 1e-15, "printed form gives 2·l·x");
    }

    #[test]
    fn negative_input_rejected() {
        let cfg = DegradeConfig::new(LightingMode::Normal);
        let err = degrade_raw(&[0.2, -0.1], 1.0, &cfg, &mut DeterministicRng::new(5)).unwrap_err();
        assert!(matches!(err, DegradeError::NegativeInput { index: 1, .. }));
    }

    #[test]
    fn degradation_commutes_with_scaling_at_zero_noise() {
        let cfg = DegradeConfig::noiseless(LightingMode::Dark);
        let x = vec![0.3, 0.6, 0.9];
        let l = 0.25;
        let y = degrade_raw(&x, l, &cfg, &mut DeterministicRng::new(6)).unwrap();
        for (a, b) in x.iter().zip(&y) {
            assert!((a * l - b).abs() < 1e-15);
        }
    }
}
