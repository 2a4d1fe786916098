//! Analysis pipeline over one or more checkpoints, the report file format,
//! and SVG rendering of similarity histograms.
//!
//! Reports and plans are pretty-printed JSON with sorted keys, so identical
//! inputs and flags give byte-identical files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ckrm::{self, MultiRunCkrm, SampleSize};
use crate::error::{Error, Result};
use crate::ssim::SimilarityParams;
use crate::tensor_io::TensorArchive;

pub const SCHEMA_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Serializes through `serde_json::Value`, whose maps keep keys sorted.
pub fn to_sorted_json<T: Serialize>(value: &T) -> String {
    let value = serde_json::to_value(value).expect("serializable value");
    let mut text = serde_json::to_string_pretty(&value).expect("JSON value prints");
    text.push('\n');
    text
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub epsilon: f64,
    pub thresholds: Vec<f64>,
    pub sample_size: SampleSize,
    pub seed: u64,
    pub layer_filter: String,
}

impl AnalysisParams {
    pub fn similarity(&self) -> SimilarityParams {
        SimilarityParams {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            epsilon: self.epsilon,
        }
    }
}

impl Default for AnalysisParams {
    fn default() -> Self {
        let p = SimilarityParams::default();
        AnalysisParams {
            alpha: p.alpha,
            beta: p.beta,
            gamma: p.gamma,
            epsilon: p.epsilon,
            thresholds: ckrm::DEFAULT_THRESHOLDS.to_vec(),
            sample_size: SampleSize::Count(ckrm::DEFAULT_SAMPLE_SIZE),
            seed: 0,
            layer_filter: "*".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerReport {
    /// (F2, F1, K1, K2)
    pub shape: [usize; 4],
    /// 1x1 kernels: every slice is a single value, so contrast and structure
    /// terms reduce to the stabilizer and the similarity is degenerate.
    pub pointwise: bool,
    pub ckrm: MultiRunCkrm,
    /// Wall-clock milliseconds per run; only present when requested, since
    /// it makes the report non-reproducible.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing_ms: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisReport {
    pub schema_version: u32,
    pub tool_version: String,
    pub inputs: Vec<InputDigest>,
    pub params: AnalysisParams,
    pub layers: BTreeMap<String, LayerReport>,
    /// Matching rank-4 tensors with fewer than two kernels.
    #[serde(default)]
    pub skipped: Vec<String>,
}

impl AnalysisReport {
    pub fn to_json(&self) -> String {
        to_sorted_json(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Version {
            schema_version: Option<u32>,
        }
        let parse_err = |source| Error::Parse {
            what: "report".to_string(),
            source,
        };
        let version: Version = serde_json::from_str(text).map_err(parse_err)?;
        match version.schema_version {
            Some(SCHEMA_VERSION) => {}
            found => {
                return Err(Error::SchemaVersion {
                    found: found.unwrap_or(0),
                    expected: SCHEMA_VERSION,
                })
            }
        }
        serde_json::from_str(text).map_err(parse_err)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn ckrm_by_layer(&self) -> std::collections::HashMap<String, MultiRunCkrm> {
        self.layers
            .iter()
            .map(|(k, v)| (k.clone(), v.ckrm.clone()))
            .collect()
    }
}

/// Shell-style wildcard match: `*` matches any run, `?` any single char.
pub fn glob_match(pattern: &str, name: &str) -> bool {
    let p: Vec<char> = pattern.chars().collect();
    let n: Vec<char> = name.chars().collect();
    let (mut pi, mut ni) = (0, 0);
    let mut backtrack: Option<(usize, usize)> = None;
    while ni < n.len() {
        if pi < p.len() && (p[pi] == '?' || p[pi] == n[ni]) {
            pi += 1;
            ni += 1;
        } else if pi < p.len() && p[pi] == '*' {
            backtrack = Some((pi, ni));
            pi += 1;
        } else if let Some((bp, bn)) = backtrack {
            pi = bp + 1;
            ni = bn + 1;
            backtrack = Some((bp, bn + 1));
        } else {
            return false;
        }
    }
    p[pi..].iter().all(|&c| c == '*')
}

#[derive(Debug, Clone, Default)]
pub struct AnalyzeOptions {
    pub params: AnalysisParams,
    pub record_timing: bool,
}

/// Loads every archive, analyzes each matching rank-4 tensor in each of them
/// with the same seed, and aggregates per layer across archives.
pub fn analyze(weights: &[PathBuf], options: &AnalyzeOptions) -> Result<AnalysisReport> {
    let params = &options.params;
    let similarity = params.similarity();
    similarity.validate()?;
    if weights.is_empty() {
        return Err(Error::InvalidParameter(
            "at least one weight archive is required".to_string(),
        ));
    }

    let mut inputs = Vec::with_capacity(weights.len());
    let mut archives = Vec::with_capacity(weights.len());
    for path in weights {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        inputs.push(InputDigest {
            path: path.display().to_string(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        archives.push(TensorArchive::from_bytes(&bytes, path)?);
    }

    let matching = |archive: &TensorArchive| -> BTreeMap<String, Vec<usize>> {
        archive
            .records()
            .filter(|r| r.rank() == 4 && glob_match(&params.layer_filter, &r.name))
            .map(|r| (r.name.clone(), r.shape.clone()))
            .collect()
    };
    let layers = matching(&archives[0]);
    if layers.is_empty() {
        return Err(Error::NoMatchingLayers(params.layer_filter.clone()));
    }
    for archive in &archives[1..] {
        let other = matching(archive);
        if other != layers {
            let detail = layers
                .iter()
                .find(|(name, shape)| other.get(*name) != Some(shape))
                .map(|(name, shape)| {
                    format!(
                        "layer `{name}` has shape {shape:?} in {} but {:?} in {}",
                        archives[0].source_path().display(),
                        other.get(name),
                        archive.source_path().display()
                    )
                })
                .unwrap_or_else(|| {
                    format!(
                        "{} holds matching layers absent from {}",
                        archive.source_path().display(),
                        archives[0].source_path().display()
                    )
                });
            return Err(Error::Mismatch(detail));
        }
    }

    let mut out = BTreeMap::new();
    let mut skipped = Vec::new();
    for (name, shape) in &layers {
        if shape[0] < 2 {
            skipped.push(name.clone());
            continue;
        }
        let mut runs = Vec::with_capacity(archives.len());
        let mut timings = Vec::with_capacity(archives.len());
        for archive in &archives {
            let kernels = archive.as_conv_kernel(name)?;
            let start = Instant::now();
            runs.push(ckrm::analyze_layer(
                &kernels,
                &similarity,
                &params.thresholds,
                params.sample_size,
                params.seed,
            )?);
            timings.push(start.elapsed().as_secs_f64() * 1e3);
        }
        out.insert(
            name.clone(),
            LayerReport {
                shape: [shape[0], shape[1], shape[2], shape[3]],
                pointwise: shape[2] * shape[3] == 1,
                ckrm: ckrm::aggregate(runs)?,
                timing_ms: options.record_timing.then_some(timings),
            },
        );
    }

    Ok(AnalysisReport {
        schema_version: SCHEMA_VERSION,
        tool_version: TOOL_VERSION.to_string(),
        inputs,
        params: params.clone(),
        layers: out,
        skipped,
    })
}

const SVG_WIDTH: f64 = 640.0;
const SVG_HEIGHT: f64 = 400.0;
const MARGIN_LEFT: f64 = 60.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 50.0;
const MARGIN_BOTTOM: f64 = 50.0;

fn escape_xml(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Bar chart of pooled similarity counts for one layer, with a vertical
/// marker at `threshold` and the mean redundancy at that threshold in the
/// title.
pub fn histogram_svg(report: &AnalysisReport, layer: &str, threshold: f64) -> Result<String> {
    let entry = report
        .layers
        .get(layer)
        .ok_or_else(|| Error::UnknownLayer(layer.to_string()))?;
    let lambda = entry
        .ckrm
        .mean_lambda_at(threshold)
        .ok_or(Error::ThresholdNotAnalyzed(threshold))?;
    let hist = entry.ckrm.pooled_histogram();
    let total = hist.total();
    let max = hist.counts.iter().copied().max().unwrap_or(0).max(1);

    let plot_w = SVG_WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = SVG_HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let base_y = MARGIN_TOP + plot_h;
    let bar_w = plot_w / hist.bins as f64;
    let runs = entry.ckrm.per_run.len();

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_WIDTH}" height="{SVG_HEIGHT}" viewBox="0 0 {SVG_WIDTH} {SVG_HEIGHT}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text class="title" x="{:.1}" y="24" text-anchor="middle" font-family="sans-serif" font-size="15">{}: λ({}) = {:.4} (mean of {} run{}), N = {}</text>"#,
        SVG_WIDTH / 2.0,
        escape_xml(layer),
        threshold,
        lambda,
        runs,
        if runs == 1 { "" } else { "s" },
        total
    );
    let _ = writeln!(
        svg,
        r#"<g class="bars" fill="steelblue" data-total="{total}" data-max="{max}">"#
    );
    for (bin, &count) in hist.counts.iter().enumerate() {
        let h = count as f64 / max as f64 * plot_h;
        let (lo, hi) = hist.bin_edges(bin);
        let _ = writeln!(
            svg,
            r#"<rect class="bar" data-bin="{bin}" data-count="{count}" data-range="{lo:.2}-{hi:.2}" x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}"/>"#,
            MARGIN_LEFT + bin as f64 * bar_w,
            base_y - h,
            bar_w,
            h
        );
    }
    let _ = writeln!(svg, "</g>");

    let _ = writeln!(
        svg,
        r#"<line class="axis" x1="{MARGIN_LEFT}" y1="{base_y}" x2="{:.1}" y2="{base_y}" stroke="black"/>"#,
        MARGIN_LEFT + plot_w
    );
    let _ = writeln!(
        svg,
        r#"<line class="axis" x1="{MARGIN_LEFT}" y1="{MARGIN_TOP}" x2="{MARGIN_LEFT}" y2="{base_y}" stroke="black"/>"#
    );
    for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let x = MARGIN_LEFT + tick * plot_w;
        let _ = writeln!(
            svg,
            r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle" font-family="sans-serif" font-size="11">{tick}</text>"#,
            base_y + 16.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-family="sans-serif" font-size="12">pairwise kernel similarity</text>"#,
        MARGIN_LEFT + plot_w / 2.0,
        base_y + 36.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-family="sans-serif" font-size="11">{max}</text>"#,
        MARGIN_LEFT - 6.0,
        MARGIN_TOP + 4.0
    );
    let tx = MARGIN_LEFT + threshold * plot_w;
    let _ = writeln!(
        svg,
        r#"<line class="threshold" data-t="{threshold}" x1="{tx:.3}" y1="{MARGIN_TOP}" x2="{tx:.3}" y2="{base_y}" stroke="crimson" stroke-dasharray="4 3"/>"#
    );
    let _ = writeln!(svg, "</svg>");
    Ok(svg)
}
