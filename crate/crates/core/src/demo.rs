//! Noise/luminance demonstration: how the plain (1,1,1) weighting and the
//! luminance-damped (0.1,1,1) weighting respond to additive Gaussian noise
//! and to a constant +0.5 brightness shift on a 7x7 patch.
//!
//! Randomness is counter-based: the base patch and every (level, trial)
//! noise draw come from their own ChaCha stream keyed by the seed, so the
//! result does not depend on evaluation order.

use std::fmt::Write as _;
use std::io;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ssim::{PatchStats, SimilarityParams};

pub const PATCH_SIDE: usize = 7;
pub const SHIFT: f64 = 0.5;

/// Noise standard deviation for level `i` (1-based): i/10 - 0.05.
pub fn noise_std(level: usize) -> f64 {
    level as f64 / 10.0 - 0.05
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Measure {
    #[serde(rename = "psi_1_1_1")]
    Unit,
    #[serde(rename = "psi_0.1_1_1")]
    Damped,
}

impl Measure {
    pub fn name(self) -> &'static str {
        match self {
            Measure::Unit => "psi_1_1_1",
            Measure::Damped => "psi_0.1_1_1",
        }
    }

    fn params(self, epsilon: f64) -> SimilarityParams {
        match self {
            Measure::Unit => SimilarityParams::unit(epsilon),
            Measure::Damped => SimilarityParams {
                alpha: 0.1,
                ..SimilarityParams::unit(epsilon)
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseDemoRow {
    pub noise_level: usize,
    pub shifted: bool,
    pub measure: Measure,
    pub mean: f64,
    pub std: f64,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDemo {
    pub seed: u64,
    pub trials: usize,
    pub epsilon: f64,
    pub base: Vec<f64>,
    pub rows: Vec<NoiseDemoRow>,
}

impl NoiseDemo {
    pub fn row(&self, level: usize, shifted: bool, measure: Measure) -> Option<&NoiseDemoRow> {
        self.rows
            .iter()
            .find(|r| r.noise_level == level && r.shifted == shifted && r.measure == measure)
    }

    pub fn mean(&self, level: usize, shifted: bool, measure: Measure) -> f64 {
        self.row(level, shifted, measure)
            .map(|r| r.mean)
            .unwrap_or(f64::NAN)
    }

    pub fn levels(&self) -> Vec<usize> {
        let mut levels: Vec<usize> = self.rows.iter().map(|r| r.noise_level).collect();
        levels.dedup();
        levels
    }

    pub fn write_csv<W: io::Write>(&self, out: W) -> io::Result<()> {
        let mut writer = csv::Writer::from_writer(out);
        writer.write_record(["noise_level", "shifted", "measure", "mean", "std", "trials"])?;
        for r in &self.rows {
            writer.write_record([
                r.noise_level.to_string(),
                r.shifted.to_string(),
                r.measure.name().to_string(),
                format!("{:.6}", r.mean),
                format!("{:.6}", r.std),
                r.trials.to_string(),
            ])?;
        }
        writer.flush()
    }

    /// Two blocks (unshifted, shifted), one column per noise level.
    pub fn render_table(&self) -> String {
        let levels = self.levels();
        let mut out = String::new();
        let _ = writeln!(
            out,
            "noise demo: seed={} trials={} epsilon={:e}",
            self.seed, self.trials, self.epsilon
        );
        for shifted in [false, true] {
            let label = if shifted {
                "y = x + noise + 0.5"
            } else {
                "y = x + noise"
            };
            let _ = write!(out, "{label:<22}");
            for &l in &levels {
                let _ = write!(out, "  sd={:<6.3}", noise_std(l));
            }
            out.push('\n');
            for measure in [Measure::Unit, Measure::Damped] {
                let _ = write!(out, "  {:<20}", measure.name());
                for &l in &levels {
                    let _ = write!(out, "  {:<9.3}", self.mean(l, shifted, measure));
                }
                out.push('\n');
            }
        }
        out
    }
}

/// The five standard noise levels.
pub fn demo_noise(seed: u64, trials: usize, epsilon: f64) -> Result<NoiseDemo> {
    let levels: Vec<(usize, f64)> = (1..=5).map(|i| (i, noise_std(i))).collect();
    demo_noise_levels(seed, trials, epsilon, &levels)
}

/// Runs the demonstration for arbitrary `(level label, noise std)` pairs.
pub fn demo_noise_levels(
    seed: u64,
    trials: usize,
    epsilon: f64,
    levels: &[(usize, f64)],
) -> Result<NoiseDemo> {
    if trials == 0 {
        return Err(Error::InvalidParameter(
            "trials must be at least 1".to_string(),
        ));
    }
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    if let Some(&(_, sd)) = levels
        .iter()
        .find(|(_, sd)| !(sd.is_finite() && *sd >= 0.0))
    {
        return Err(Error::InvalidParameter(format!(
            "noise std must be non-negative, got {sd}"
        )));
    }

    let n = PATCH_SIDE * PATCH_SIDE;
    let mut base_rng = ChaCha8Rng::seed_from_u64(seed);
    base_rng.set_stream(0);
    let base: Vec<f64> = (0..n).map(|_| base_rng.random::<f64>()).collect();

    let measures = [Measure::Unit, Measure::Damped];
    let mut rows = Vec::with_capacity(levels.len() * 4);
    for &(level, sd) in levels {
        // [shifted][measure] -> samples
        let mut samples = [
            [Vec::with_capacity(trials), Vec::with_capacity(trials)],
            [Vec::new(), Vec::new()],
        ];
        let normal = Normal::new(0.0, sd).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        let mut noisy = vec![0.0; n];
        let mut lifted = vec![0.0; n];
        for trial in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(((level as u64 + 1) << 40) | trial as u64);
            for (dst, &x) in noisy.iter_mut().zip(&base) {
                *dst = if sd > 0.0 {
                    x + normal.sample(&mut rng)
                } else {
                    x
                };
            }
            for (dst, &y) in lifted.iter_mut().zip(&noisy) {
                *dst = y + SHIFT;
            }
            for (s, y) in [&noisy, &lifted].into_iter().enumerate() {
                let comps = PatchStats::from_slices(&base, y).components(epsilon);
                for (m, measure) in measures.iter().enumerate() {
                    samples[s][m].push(comps.psi(&measure.params(epsilon)));
                }
            }
        }
        for (s, shifted) in [false, true].into_iter().enumerate() {
            for (m, &measure) in measures.iter().enumerate() {
                let (mean, std) = mean_std(&samples[s][m]);
                rows.push(NoiseDemoRow {
                    noise_level: level,
                    shifted,
                    measure,
                    mean,
                    std,
                    trials,
                });
            }
        }
    }

    Ok(NoiseDemo {
        seed,
        trials,
        epsilon,
        base,
        rows,
    })
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_unshifted_is_exactly_one() {
        let demo = demo_noise_levels(3, 5, 1e-4, &[(0, 0.0)]).unwrap();
        assert_eq!(demo.mean(0, false, Measure::Unit), 1.0);
        assert_eq!(demo.mean(0, false, Measure::Damped), 1.0);
        assert_eq!(demo.row(0, false, Measure::Unit).unwrap().std, 0.0);
    }

    #[test]
    fn noise_levels() {
        assert!((noise_std(1) - 0.05).abs() < 1e-15);
        assert!((noise_std(5) - 0.45).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(demo_noise(1, 0, 1e-4).is_err());
        assert!(demo_noise(1, 10, 0.0).is_err());
        assert!(demo_noise_levels(1, 10, 1e-4, &[(1, -0.1)]).is_err());
    }

    #[test]
    fn deterministic_for_seed() {
        let a = demo_noise(42, 50, 1e-4).unwrap();
        let b = demo_noise(42, 50, 1e-4).unwrap();
        assert_eq!(a, b);
        let c = demo_noise(43, 50, 1e-4).unwrap();
        assert_ne!(a.base, c.base);
    }

    #[test]
    fn level_one_measures_agree_unshifted_and_split_shifted() {
        let demo = demo_noise(7, 500, 1e-4).unwrap();
        let unit = demo.mean(1, false, Measure::Unit);
        let damped = demo.mean(1, false, Measure::Damped);
        assert!((unit - damped).abs() < 0.02, "{unit} vs {damped}");
        let unit_drop = unit - demo.mean(1, true, Measure::Unit);
        let damped_drop = damped - demo.mean(1, true, Measure::Damped);
        assert!(
            unit_drop > 5.0 * damped_drop,
            "{unit_drop} vs {damped_drop}"
        );
    }

    #[test]
    fn csv_layout() {
        let demo = demo_noise(1, 3, 1e-4).unwrap();
        let mut buf = Vec::new();
        demo.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "noise_level,shifted,measure,mean,std,trials"
        );
        assert_eq!(text.lines().count(), 1 + 5 * 4);
        assert!(demo.render_table().contains("psi_0.1_1_1"));
    }
}
