//! Luminance, contrast and structure comparison of 2-D patches, and the
//! similarity measures built from them.
//!
//! All statistics are population statistics (divide by n). The product
//! `sigma_x * sigma_y` is evaluated as `sqrt(var_x * var_y)` so that
//! identical inputs give components of exactly 1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-4;

/// Borrowed row-major 2-D grid of values.
#[derive(Debug, Clone, Copy)]
pub struct Patch<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
}

impl<'a> Patch<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::InvalidParameter(format!(
                "{rows}x{cols} patch needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Patch { data, rows, cols })
    }

    /// Single-row view over a flat slice.
    pub fn flat(data: &'a [f64]) -> Self {
        Patch {
            data,
            rows: 1,
            cols: data.len(),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &'a [f64] {
        self.data
    }

    fn window(&self, top: usize, left: usize, height: usize, width: usize, out: &mut Vec<f64>) {
        out.clear();
        for r in top..top + height {
            let start = r * self.cols + left;
            out.extend_from_slice(&self.data[start..start + width]);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchStats {
    pub mu_x: f64,
    pub mu_y: f64,
    pub var_x: f64,
    pub var_y: f64,
    /// Covariance of x and y.
    pub sigma_xy: f64,
    pub n: usize,
}

impl PatchStats {
    pub fn compute(x: &Patch<'_>, y: &Patch<'_>) -> Result<Self> {
        if x.shape() != y.shape() {
            return Err(Error::ShapeMismatch(x.shape(), y.shape()));
        }
        if x.data.is_empty() {
            return Err(Error::EmptyPatch);
        }
        Ok(Self::from_slices(x.data, y.data))
    }

    /// Caller guarantees equal, non-zero lengths.
    pub(crate) fn from_slices(x: &[f64], y: &[f64]) -> Self {
        let (mu_x, var_x) = moments(x);
        let (mu_y, var_y) = moments(y);
        let sigma_xy = cross_moment(x, mu_x, y, mu_y);
        PatchStats {
            mu_x,
            mu_y,
            var_x,
            var_y,
            sigma_xy,
            n: x.len(),
        }
    }

    pub fn sigma_x(&self) -> f64 {
        self.var_x.sqrt()
    }

    pub fn sigma_y(&self) -> f64 {
        self.var_y.sqrt()
    }

    pub fn components(&self, epsilon: f64) -> Components {
        let sigma_prod = (self.var_x * self.var_y).sqrt();
        Components {
            luminance: (2.0 * self.mu_x * self.mu_y + epsilon)
                / (self.mu_x * self.mu_x + self.mu_y * self.mu_y + epsilon),
            contrast: (2.0 * sigma_prod + epsilon) / (self.var_x + self.var_y + epsilon),
            structure: (self.sigma_xy + epsilon) / (sigma_prod + epsilon),
        }
    }
}

/// Mean and population variance, two-pass.
pub(crate) fn moments(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

pub(crate) fn cross_moment(x: &[f64], mu_x: f64, y: &[f64], mu_y: f64) -> f64 {
    let n = x.len() as f64;
    x.iter()
        .zip(y)
        .map(|(a, b)| (a - mu_x) * (b - mu_y))
        .sum::<f64>()
        / n
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Components {
    pub luminance: f64,
    pub contrast: f64,
    pub structure: f64,
}

impl Components {
    pub fn phi(&self) -> f64 {
        self.luminance * self.contrast * self.structure
    }

    pub fn psi(&self, params: &SimilarityParams) -> f64 {
        self.luminance.abs().powf(params.alpha)
            * self.contrast.powf(params.beta)
            * self.structure.abs().powf(params.gamma)
    }
}

/// Exponents on |L|, C and |S|, plus the stabilizer used in all three.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimilarityParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub epsilon: f64,
}

impl SimilarityParams {
    pub fn new(alpha: f64, beta: f64, gamma: f64, epsilon: f64) -> Result<Self> {
        let params = SimilarityParams {
            alpha,
            beta,
            gamma,
            epsilon,
        };
        params.validate()?;
        Ok(params)
    }

    /// The plain-SSIM weighting, whose value equals |phi|.
    pub fn unit(epsilon: f64) -> Self {
        SimilarityParams {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("epsilon", self.epsilon),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

impl Default for SimilarityParams {
    /// alpha = 0.1 down-weights luminance so kernels differing by a constant
    /// offset still score as similar.
    fn default() -> Self {
        SimilarityParams {
            alpha: 0.1,
            beta: 1.0,
            gamma: 1.0,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

/// Sliding-window layout used by [`big_phi`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchPlan {
    pub patch_height: usize,
    pub patch_width: usize,
    pub stride: usize,
}

impl PatchPlan {
    pub fn new(patch_height: usize, patch_width: usize, stride: usize) -> Result<Self> {
        if patch_height == 0 || patch_width == 0 || stride == 0 {
            return Err(Error::InvalidParameter(
                "patch dims and stride must be positive".to_string(),
            ));
        }
        Ok(PatchPlan {
            patch_height,
            patch_width,
            stride,
        })
    }

    pub fn whole(rows: usize, cols: usize) -> Result<Self> {
        Self::new(rows, cols, 1)
    }

    /// Top-left corners of every window that fits in a `rows x cols` image.
    pub fn origins(&self, rows: usize, cols: usize) -> Vec<(usize, usize)> {
        if self.patch_height > rows || self.patch_width > cols {
            return Vec::new();
        }
        let tops = (0..=rows - self.patch_height).step_by(self.stride);
        tops.flat_map(|t| {
            (0..=cols - self.patch_width)
                .step_by(self.stride)
                .map(move |l| (t, l))
        })
        .collect()
    }
}

impl Default for PatchPlan {
    fn default() -> Self {
        PatchPlan {
            patch_height: 7,
            patch_width: 7,
            stride: 1,
        }
    }
}

pub fn components(x: &Patch<'_>, y: &Patch<'_>, epsilon: f64) -> Result<Components> {
    Ok(PatchStats::compute(x, y)?.components(epsilon))
}

pub fn phi(x: &Patch<'_>, y: &Patch<'_>, epsilon: f64) -> Result<f64> {
    Ok(components(x, y, epsilon)?.phi())
}

pub fn psi(x: &Patch<'_>, y: &Patch<'_>, params: &SimilarityParams) -> Result<f64> {
    Ok(components(x, y, params.epsilon)?.psi(params))
}

/// Mean patch-wise phi over the windows of `plan`.
pub fn big_phi(
    img_a: &Patch<'_>,
    img_b: &Patch<'_>,
    plan: &PatchPlan,
    epsilon: f64,
) -> Result<f64> {
    if img_a.shape() != img_b.shape() {
        return Err(Error::ShapeMismatch(img_a.shape(), img_b.shape()));
    }
    let (rows, cols) = img_a.shape();
    let origins = plan.origins(rows, cols);
    if origins.is_empty() {
        return Err(Error::PlanTooLarge {
            plan_h: plan.patch_height,
            plan_w: plan.patch_width,
            img_h: rows,
            img_w: cols,
        });
    }
    let mut xa = Vec::with_capacity(plan.patch_height * plan.patch_width);
    let mut xb = Vec::with_capacity(xa.capacity());
    let mut total = 0.0;
    for &(top, left) in &origins {
        img_a.window(top, left, plan.patch_height, plan.patch_width, &mut xa);
        img_b.window(top, left, plan.patch_height, plan.patch_width, &mut xb);
        total += PatchStats::from_slices(&xa, &xb).components(epsilon).phi();
    }
    Ok(total / origins.len() as f64)
}
