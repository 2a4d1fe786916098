//! Declarative layer-dimension model, parameter counting and width
//! reduction driven by measured kernel redundancy.
//!
//! A layer's `group` names a chain of layers that share one channel width:
//! every member produces that width (f2), and each member after the first
//! consumes the output of the member before it (its f1 equals the previous
//! member's f2). The first member's f1 comes from outside the group and is
//! never changed. Layers without a group are independent.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ckrm::MultiRunCkrm;
use crate::error::{Error, Result};

pub const DEFAULT_MIN_WIDTH: usize = 8;
pub const DEFAULT_RHO: f64 = 0.5;
/// Mean redundancy at or below this leaves a width untouched.
pub const NEGLIGIBLE_LAMBDA: f64 = 0.02;
/// Threshold at which zero redundancy marks a layer as possibly under-provisioned.
pub const UNDER_PROVISION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub id: String,
    pub f2: usize,
    pub f1: usize,
    pub k1: usize,
    pub k2: usize,
    pub bias: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
}

impl LayerSpec {
    pub fn new(id: impl Into<String>, dims: [usize; 4], bias: bool, group: Option<&str>) -> Self {
        LayerSpec {
            id: id.into(),
            f2: dims[0],
            f1: dims[1],
            k1: dims[2],
            k2: dims[3],
            bias,
            group: group.map(str::to_string),
        }
    }

    /// F2 * F1 * K1 * K2 weights, plus F2 biases when present.
    pub fn param_count(&self) -> u64 {
        let weights = (self.f2 * self.f1 * self.k1 * self.k2) as u64;
        weights + if self.bias { self.f2 as u64 } else { 0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Extras {
    pub count: u64,
    #[serde(default)]
    pub note: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkStructure {
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub extras: Extras,
}

impl NetworkStructure {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Parse { source, .. } => Error::Parse {
                what: path.display().to_string(),
                source,
            },
            other => other,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|source| Error::Parse {
            what: "structure".to_string(),
            source,
        })
    }

    pub fn to_json(&self) -> String {
        crate::report::to_sorted_json(self)
    }

    pub fn layer(&self, id: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.id == id)
    }

    /// Layers followed by `other`'s layers; extras add.
    pub fn concat(&self, other: &NetworkStructure) -> NetworkStructure {
        let mut layers = self.layers.clone();
        layers.extend(other.layers.iter().cloned());
        NetworkStructure {
            layers,
            extras: Extras {
                count: self.extras.count + other.extras.count,
                note: [self.extras.note.as_str(), other.extras.note.as_str()]
                    .iter()
                    .filter(|s| !s.is_empty())
                    .cloned()
                    .collect::<Vec<_>>()
                    .join("; "),
            },
        }
    }

    /// Group label -> member indices, in layer order.
    fn groups(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (idx, layer) in self.layers.iter().enumerate() {
            if let Some(g) = &layer.group {
                groups.entry(g.as_str()).or_default().push(idx);
            }
        }
        groups
    }
}

/// Total trainable parameters: every listed layer plus the extras count.
pub fn count_params(structure: &NetworkStructure) -> u64 {
    structure
        .layers
        .iter()
        .map(LayerSpec::param_count)
        .sum::<u64>()
        + structure.extras.count
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    ZeroDimension,
    DuplicateId,
    GroupWidth,
    ChannelFlow,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub layers: Vec<String>,
    pub message: String,
}

pub fn validate(structure: &NetworkStructure) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for layer in &structure.layers {
        if [layer.f2, layer.f1, layer.k1, layer.k2].contains(&0) {
            out.push(Violation {
                kind: ViolationKind::ZeroDimension,
                layers: vec![layer.id.clone()],
                message: format!("layer `{}` has a zero dimension", layer.id),
            });
        }
        if !seen.insert(layer.id.as_str()) {
            out.push(Violation {
                kind: ViolationKind::DuplicateId,
                layers: vec![layer.id.clone()],
                message: format!("layer id `{}` appears more than once", layer.id),
            });
        }
    }
    for (group, members) in structure.groups() {
        let head = &structure.layers[members[0]];
        for pair in members.windows(2) {
            let (prev, cur) = (&structure.layers[pair[0]], &structure.layers[pair[1]]);
            if cur.f2 != head.f2 {
                out.push(Violation {
                    kind: ViolationKind::GroupWidth,
                    layers: vec![head.id.clone(), cur.id.clone()],
                    message: format!(
                        "group `{group}`: `{}` produces {} channels but `{}` sets the group width to {}",
                        cur.id, cur.f2, head.id, head.f2
                    ),
                });
            }
            if cur.f1 != prev.f2 {
                out.push(Violation {
                    kind: ViolationKind::ChannelFlow,
                    layers: vec![prev.id.clone(), cur.id.clone()],
                    message: format!(
                        "group `{group}`: `{}` consumes {} channels but `{}` produces {}",
                        cur.id, cur.f1, prev.id, prev.f2
                    ),
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerChange {
    pub layer_id: String,
    pub old_f2: usize,
    pub new_f2: usize,
    pub old_f1: usize,
    pub new_f1: usize,
    /// Redundancy that drove this layer's width (group maximum); absent for
    /// single-kernel layers, which have no pairs to measure.
    pub lambda_used: Option<f64>,
    /// Zero redundancy at the lowest standard threshold; the rule never
    /// widens, so this is only a hint.
    pub possibly_under_provisioned: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuggestionPlan {
    pub threshold: f64,
    pub rho: f64,
    pub min_width: usize,
    pub layers: Vec<LayerChange>,
    pub params_before: u64,
    pub params_after: u64,
    /// The input structure with suggested widths applied; extras unchanged.
    pub structure: NetworkStructure,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuggestOptions {
    pub threshold: f64,
    pub rho: f64,
    pub min_width: usize,
}

impl Default for SuggestOptions {
    fn default() -> Self {
        SuggestOptions {
            threshold: crate::ckrm::PRIMARY_THRESHOLD,
            rho: DEFAULT_RHO,
            min_width: DEFAULT_MIN_WIDTH,
        }
    }
}

/// Nearest even integer; halves round away from zero.
fn round_to_even_width(x: f64) -> usize {
    ((x / 2.0).round() * 2.0).max(0.0) as usize
}

/// Width after shrinking by `rho * lambda`. Never grows the width and never
/// goes below `min_width` unless the width already was. A reduction of less
/// than one channel keeps the width as is, so odd widths are not rounded
/// down by a vanishing shrink.
pub fn shrink_width(width: usize, lambda: f64, rho: f64, min_width: usize) -> usize {
    if lambda <= NEGLIGIBLE_LAMBDA {
        return width;
    }
    let exact = width as f64 * (1.0 - rho * lambda);
    if width as f64 - exact < 1.0 {
        return width;
    }
    let target = round_to_even_width(exact);
    target.max(min_width).min(width)
}

pub fn suggest(
    structure: &NetworkStructure,
    ckrm: &HashMap<String, MultiRunCkrm>,
    options: SuggestOptions,
) -> Result<SuggestionPlan> {
    let SuggestOptions {
        threshold,
        rho,
        min_width,
    } = options;
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "rho must lie in (0, 1], got {rho}"
        )));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidParameter(format!(
            "threshold {threshold} outside [0, 1]"
        )));
    }
    if min_width == 0 {
        return Err(Error::InvalidParameter(
            "min width must be positive".to_string(),
        ));
    }

    // Per-layer mean lambda at the threshold.
    let mut layer_lambda: Vec<Option<f64>> = Vec::with_capacity(structure.layers.len());
    let mut under: Vec<bool> = Vec::with_capacity(structure.layers.len());
    for layer in &structure.layers {
        if layer.f2 < 2 {
            layer_lambda.push(None);
            under.push(false);
            continue;
        }
        let entry = ckrm
            .get(&layer.id)
            .ok_or_else(|| Error::MissingCkrm(layer.id.clone()))?;
        let l = entry
            .mean_lambda_at(threshold)
            .ok_or(Error::ThresholdNotAnalyzed(threshold))?;
        layer_lambda.push(Some(l));
        under.push(entry.mean_lambda_at(UNDER_PROVISION_THRESHOLD) == Some(0.0));
    }

    // Each group shares the maximum member lambda; ungrouped layers stand alone.
    let mut effective = layer_lambda.clone();
    for members in structure.groups().values() {
        let max = members
            .iter()
            .filter_map(|&m| layer_lambda[m])
            .fold(None, |acc: Option<f64>, l| {
                Some(acc.map_or(l, |a| a.max(l)))
            });
        for &m in members {
            effective[m] = max;
        }
    }

    let mut suggested = structure.clone();
    for (idx, layer) in suggested.layers.iter_mut().enumerate() {
        if let Some(l) = effective[idx] {
            layer.f2 = shrink_width(layer.f2, l, rho, min_width);
        }
    }
    for members in structure.groups().values() {
        for pair in members.windows(2) {
            let producer_width = suggested.layers[pair[0]].f2;
            suggested.layers[pair[1]].f1 = producer_width;
        }
    }

    let layers = structure
        .layers
        .iter()
        .zip(&suggested.layers)
        .enumerate()
        .map(|(idx, (old, new))| LayerChange {
            layer_id: old.id.clone(),
            old_f2: old.f2,
            new_f2: new.f2,
            old_f1: old.f1,
            new_f1: new.f1,
            lambda_used: effective[idx],
            possibly_under_provisioned: under[idx],
        })
        .collect();

    Ok(SuggestionPlan {
        threshold,
        rho,
        min_width,
        layers,
        params_before: count_params(structure),
        params_after: count_params(&suggested),
        structure: suggested,
    })
}

pub const RESNET50_STANDARD_JSON: &str = include_str!("../structures/resnet50_standard.json");
pub const RESNET50_OPTIMIZED_JSON: &str = include_str!("../structures/resnet50_optimized.json");

pub fn resnet50_standard() -> NetworkStructure {
    NetworkStructure::from_json(RESNET50_STANDARD_JSON).expect("bundled structure parses")
}

pub fn resnet50_optimized() -> NetworkStructure {
    NetworkStructure::from_json(RESNET50_OPTIMIZED_JSON).expect("bundled structure parses")
}
