//! Pairwise kernel similarity and the convolution kernel redundancy measure.
//!
//! For a layer with F2 kernels, every unordered pair (i, j), i < j, gets a
//! similarity in [0, 1]: the mean over the F1 input-channel slices of the
//! weighted SSIM variant. The redundancy measure at threshold t is the
//! fraction of pairs whose similarity is strictly above t. Large layers are
//! estimated from a seeded uniform sample of pairs.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ssim::{PatchStats, SimilarityParams};
use crate::tensor_io::ConvKernelSet;

pub const HISTOGRAM_BINS: usize = 50;
pub const DEFAULT_SAMPLE_SIZE: usize = 5000;
pub const DEFAULT_THRESHOLDS: [f64; 3] = [0.5, 0.6, 0.7];
pub const PRIMARY_THRESHOLD: f64 = 0.6;

/// Tolerance used when matching a requested threshold against analyzed ones.
const THRESHOLD_MATCH: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SampleSize {
    #[default]
    All,
    Count(usize),
}

impl fmt::Display for SampleSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SampleSize::All => f.write_str("all"),
            SampleSize::Count(n) => write!(f, "{n}"),
        }
    }
}

impl FromStr for SampleSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(SampleSize::All);
        }
        match s.parse::<usize>() {
            Ok(0) | Err(_) => Err(Error::InvalidParameter(format!(
                "sample size must be a positive integer or `all`, got `{s}`"
            ))),
            Ok(n) => Ok(SampleSize::Count(n)),
        }
    }
}

impl Serialize for SampleSize {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            SampleSize::All => s.serialize_str("all"),
            SampleSize::Count(n) => s.serialize_u64(*n as u64),
        }
    }
}

impl<'de> Deserialize<'de> for SampleSize {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Count(usize),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Count(0) => Err(serde::de::Error::custom("sample size must be positive")),
            Raw::Count(n) => Ok(SampleSize::Count(n)),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Similarity of kernels `i` and `j` (0-based, i < j).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelPairSimilarity {
    pub i: usize,
    pub j: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OmegaSample {
    pub layer_id: String,
    pub pairs: Vec<KernelPairSimilarity>,
    pub population_size: u64,
    pub exhaustive: bool,
    /// Absent when every pair was evaluated.
    pub seed: Option<u64>,
    pub params: SimilarityParams,
}

impl OmegaSample {
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.pairs.iter().map(|p| p.value)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Histogram {
    pub bins: usize,
    pub counts: Vec<u64>,
}

impl Histogram {
    /// Uniform bins over [0, 1]; the last bin is closed on the right and
    /// also absorbs float slack just above 1.
    pub fn from_values(values: impl IntoIterator<Item = f64>, bins: usize) -> Self {
        let mut counts = vec![0u64; bins];
        for v in values {
            counts[bin_index(v, bins)] += 1;
        }
        Histogram { bins, counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn bin_edges(&self, bin: usize) -> (f64, f64) {
        let w = 1.0 / self.bins as f64;
        (bin as f64 * w, (bin + 1) as f64 * w)
    }

    pub fn merged(&self, other: &Histogram) -> Result<Histogram> {
        if self.bins != other.bins {
            return Err(Error::Mismatch(format!(
                "histogram bins {} vs {}",
                self.bins, other.bins
            )));
        }
        Ok(Histogram {
            bins: self.bins,
            counts: self
                .counts
                .iter()
                .zip(&other.counts)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }
}

fn bin_index(value: f64, bins: usize) -> usize {
    if value <= 0.0 {
        return 0;
    }
    ((value * bins as f64).floor() as usize).min(bins - 1)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSummary {
    pub count: usize,
    pub population_size: u64,
    pub exhaustive: bool,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CkrmResult {
    pub layer_id: String,
    pub thresholds: Vec<f64>,
    pub lambda: Vec<f64>,
    pub histogram: Histogram,
    pub sample: SampleSummary,
    /// Binomial standard error per threshold; absent for exhaustive runs.
    pub stderr: Option<Vec<f64>>,
}

impl CkrmResult {
    pub fn lambda_at(&self, t: f64) -> Option<f64> {
        threshold_position(&self.thresholds, t).map(|k| self.lambda[k])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiRunCkrm {
    pub layer_id: String,
    pub thresholds: Vec<f64>,
    pub per_run: Vec<CkrmResult>,
    pub mean_lambda: Vec<f64>,
}

impl MultiRunCkrm {
    pub fn mean_lambda_at(&self, t: f64) -> Option<f64> {
        threshold_position(&self.thresholds, t).map(|k| self.mean_lambda[k])
    }

    /// Bin counts summed over all runs.
    pub fn pooled_histogram(&self) -> Histogram {
        let bins = self
            .per_run
            .first()
            .map_or(HISTOGRAM_BINS, |r| r.histogram.bins);
        let mut counts = vec![0u64; bins];
        for run in &self.per_run {
            for (c, r) in counts.iter_mut().zip(&run.histogram.counts) {
                *c += r;
            }
        }
        Histogram { bins, counts }
    }
}

fn threshold_position(thresholds: &[f64], t: f64) -> Option<usize> {
    thresholds
        .iter()
        .position(|&x| (x - t).abs() <= THRESHOLD_MATCH)
}

/// Number of unordered kernel pairs, F2 (F2 - 1) / 2.
pub fn population_size(f2: usize) -> u64 {
    let f2 = f2 as u64;
    f2 * f2.saturating_sub(1) / 2
}

/// Maps a lexicographic pair rank to (i, j) with i < j < f2.
pub fn pair_from_rank(rank: u64, f2: usize) -> (usize, usize) {
    let n = f2 as u64;
    // Row i starts at i*n - i*(i+1)/2.
    let row_start = |i: u64| i * n - i * (i + 1) / 2;
    let nf = n as f64;
    let guess = (nf - 0.5) - ((nf - 0.5).powi(2) - 2.0 * rank as f64).max(0.0).sqrt();
    let mut i = (guess.floor().max(0.0) as u64).min(n.saturating_sub(2));
    while i > 0 && row_start(i) > rank {
        i -= 1;
    }
    while i + 1 < n && row_start(i + 1) <= rank {
        i += 1;
    }
    let j = i + 1 + (rank - row_start(i));
    (i as usize, j as usize)
}

pub fn pair_rank(i: usize, j: usize, f2: usize) -> u64 {
    let (i, j, n) = (i as u64, j as u64, f2 as u64);
    i * n - i * (i + 1) / 2 + (j - i - 1)
}

/// Similarity between kernels `i` and `j`: mean slice-wise psi over the F1
/// input channels, slices paired at the same channel index.
pub fn kernel_similarity(
    kernels: &ConvKernelSet,
    i: usize,
    j: usize,
    params: &SimilarityParams,
) -> Result<f64> {
    for index in [i, j] {
        if index >= kernels.f2 {
            return Err(Error::IndexOutOfRange {
                index,
                count: kernels.f2,
            });
        }
    }
    if i == j {
        return Err(Error::InvalidParameter(format!(
            "kernel similarity needs two distinct kernels, got ({i}, {j})"
        )));
    }
    params.validate()?;
    let total: f64 = (0..kernels.f1)
        .map(|k| {
            PatchStats::from_slices(kernels.slice(i, k), kernels.slice(j, k))
                .components(params.epsilon)
                .psi(params)
        })
        .sum();
    Ok(total / kernels.f1 as f64)
}

/// Per-slice means, variances and centered values, computed once per layer.
/// Produces bit-identical results to [`kernel_similarity`].
struct PreparedLayer<'a> {
    kernels: &'a ConvKernelSet,
    centered: Vec<f64>,
    means: Vec<f64>,
    vars: Vec<f64>,
}

impl<'a> PreparedLayer<'a> {
    fn new(kernels: &'a ConvKernelSet) -> Self {
        let n = kernels.slice_len();
        let slices = kernels.f2 * kernels.f1;
        let mut centered = Vec::with_capacity(slices * n);
        let mut means = Vec::with_capacity(slices);
        let mut vars = Vec::with_capacity(slices);
        for slice in kernels.weights().chunks_exact(n) {
            let (mean, var) = crate::ssim::moments(slice);
            means.push(mean);
            vars.push(var);
            centered.extend(slice.iter().map(|v| v - mean));
        }
        PreparedLayer {
            kernels,
            centered,
            means,
            vars,
        }
    }

    fn similarity(&self, i: usize, j: usize, params: &SimilarityParams) -> f64 {
        let f1 = self.kernels.f1;
        let n = self.kernels.slice_len();
        let nf = n as f64;
        let total: f64 = (0..f1)
            .map(|k| {
                let (a, b) = (i * f1 + k, j * f1 + k);
                let ca = &self.centered[a * n..(a + 1) * n];
                let cb = &self.centered[b * n..(b + 1) * n];
                let cov = ca.iter().zip(cb).map(|(x, y)| x * y).sum::<f64>() / nf;
                PatchStats {
                    mu_x: self.means[a],
                    mu_y: self.means[b],
                    var_x: self.vars[a],
                    var_y: self.vars[b],
                    sigma_xy: cov,
                    n,
                }
                .components(params.epsilon)
                .psi(params)
            })
            .sum();
        total / f1 as f64
    }
}

/// Draws pair ranks: all of them in order, or `k` distinct ranks chosen
/// uniformly by a seeded generator and returned in ascending order.
pub fn sample_ranks(population: u64, sample_size: SampleSize, seed: u64) -> (Vec<u64>, bool) {
    match sample_size {
        SampleSize::Count(k) if (k as u64) < population => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut ranks: Vec<u64> = rand::seq::index::sample(&mut rng, population as usize, k)
                .into_iter()
                .map(|r| r as u64)
                .collect();
            ranks.sort_unstable();
            (ranks, false)
        }
        _ => ((0..population).collect(), true),
    }
}

pub fn omega(
    kernels: &ConvKernelSet,
    params: &SimilarityParams,
    sample_size: SampleSize,
    seed: u64,
) -> Result<OmegaSample> {
    if kernels.f2 < 2 {
        return Err(Error::TooFewKernels(kernels.layer_id.clone()));
    }
    params.validate()?;
    let population = population_size(kernels.f2);
    let (ranks, exhaustive) = sample_ranks(population, sample_size, seed);
    let prepared = PreparedLayer::new(kernels);
    let pairs = ranks
        .par_iter()
        .map(|&rank| {
            let (i, j) = pair_from_rank(rank, kernels.f2);
            KernelPairSimilarity {
                i,
                j,
                value: prepared.similarity(i, j, params),
            }
        })
        .collect();
    Ok(OmegaSample {
        layer_id: kernels.layer_id.clone(),
        pairs,
        population_size: population,
        exhaustive,
        seed: (!exhaustive).then_some(seed),
        params: *params,
    })
}

fn validate_thresholds(thresholds: &[f64]) -> Result<()> {
    if thresholds.is_empty() {
        return Err(Error::InvalidParameter(
            "at least one threshold is required".to_string(),
        ));
    }
    if let Some(t) = thresholds.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::InvalidParameter(format!(
            "threshold {t} outside [0, 1]"
        )));
    }
    Ok(())
}

/// Fraction of sampled similarities strictly above each threshold.
pub fn lambda(omega: &OmegaSample, thresholds: &[f64]) -> Result<CkrmResult> {
    if omega.is_empty() {
        return Err(Error::EmptySample);
    }
    validate_thresholds(thresholds)?;
    let count = omega.len();
    let lambda: Vec<f64> = thresholds
        .iter()
        .map(|&t| omega.values().filter(|&w| w > t).count() as f64 / count as f64)
        .collect();
    let stderr = (!omega.exhaustive).then(|| {
        lambda
            .iter()
            .map(|&l| (l * (1.0 - l) / count as f64).sqrt())
            .collect()
    });
    Ok(CkrmResult {
        layer_id: omega.layer_id.clone(),
        thresholds: thresholds.to_vec(),
        lambda,
        histogram: Histogram::from_values(omega.values(), HISTOGRAM_BINS),
        sample: SampleSummary {
            count,
            population_size: omega.population_size,
            exhaustive: omega.exhaustive,
            seed: omega.seed,
        },
        stderr,
    })
}

pub fn analyze_layer(
    kernels: &ConvKernelSet,
    params: &SimilarityParams,
    thresholds: &[f64],
    sample_size: SampleSize,
    seed: u64,
) -> Result<CkrmResult> {
    validate_thresholds(thresholds)?;
    lambda(&omega(kernels, params, sample_size, seed)?, thresholds)
}

/// Combines per-checkpoint results for one layer.
pub fn aggregate(results: Vec<CkrmResult>) -> Result<MultiRunCkrm> {
    let first = results
        .first()
        .ok_or_else(|| Error::Mismatch("no results to aggregate".to_string()))?;
    for r in &results[1..] {
        if r.layer_id != first.layer_id {
            return Err(Error::Mismatch(format!(
                "layer `{}` vs `{}`",
                first.layer_id, r.layer_id
            )));
        }
        if r.thresholds != first.thresholds {
            return Err(Error::Mismatch(format!(
                "thresholds {:?} vs {:?} for layer `{}`",
                first.thresholds, r.thresholds, r.layer_id
            )));
        }
        if r.histogram.bins != first.histogram.bins {
            return Err(Error::Mismatch(format!(
                "histogram bins {} vs {} for layer `{}`",
                first.histogram.bins, r.histogram.bins, r.layer_id
            )));
        }
    }
    let runs = results.len() as f64;
    let mean_lambda = (0..first.thresholds.len())
        .map(|k| results.iter().map(|r| r.lambda[k]).sum::<f64>() / runs)
        .collect();
    Ok(MultiRunCkrm {
        layer_id: first.layer_id.clone(),
        thresholds: first.thresholds.clone(),
        mean_lambda,
        per_run: results,
    })
}
