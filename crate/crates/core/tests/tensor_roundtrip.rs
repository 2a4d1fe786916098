//! Reads a checkpoint written by the PyTorch exporter path and compares it
//! against values dumped alongside it.

use std::collections::BTreeMap;
use std::path::PathBuf;

use ckrm::structure::LayerSpec;
use ckrm::tensor_io::{Dtype, TensorArchive};
use serde::Deserialize;

#[derive(Deserialize)]
struct Expected {
    shape: Vec<usize>,
    values: Vec<f64>,
}

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn expected() -> (BTreeMap<String, Expected>, u64) {
    let text = std::fs::read_to_string(fixture("toy2_expected.json")).unwrap();
    let mut raw: serde_json::Map<String, serde_json::Value> = serde_json::from_str(&text).unwrap();
    let trainable = raw
        .remove("__trainable_params__")
        .unwrap()
        .as_u64()
        .unwrap();
    let tensors = raw
        .into_iter()
        .map(|(k, v)| (k, serde_json::from_value(v).unwrap()))
        .collect();
    (tensors, trainable)
}

#[test]
fn values_match_bit_for_bit() {
    let archive = TensorArchive::load(fixture("toy2.safetensors")).unwrap();
    let (tensors, _) = expected();
    assert_eq!(archive.records().count(), tensors.len());
    for (name, want) in &tensors {
        let rec = archive.get(name).unwrap();
        assert_eq!(rec.dtype, Dtype::F32);
        assert_eq!(rec.shape, want.shape, "{name}");
        assert_eq!(rec.data.len(), want.values.len());
        for (k, (got, w)) in rec.data.iter().zip(&want.values).enumerate() {
            assert_eq!(
                (*got as f32).to_bits(),
                (*w as f32).to_bits(),
                "{name}[{k}]"
            );
            assert_eq!(got, w, "{name}[{k}] widened differently");
        }
    }
}

#[test]
fn conv_kernels_keep_out_in_order() {
    let archive = TensorArchive::load(fixture("toy2.safetensors")).unwrap();
    let first = archive.as_conv_kernel("0.weight").unwrap();
    assert_eq!(first.dims(), [6, 1, 5, 5]);
    let second = archive.as_conv_kernel("2.weight").unwrap();
    assert_eq!(second.dims(), [12, 6, 3, 3]);
    assert!(archive.as_conv_kernel("2.bias").is_err());

    // Kernel 3, input channel 4, row-major 3x3 slice starts at a known offset.
    let (tensors, _) = expected();
    let flat = &tensors["2.weight"].values;
    let offset = (3 * 6 + 4) * 9;
    assert_eq!(second.slice(3, 4), &flat[offset..offset + 9]);
}

#[test]
fn parameter_count_agrees_with_framework() {
    let archive = TensorArchive::load(fixture("toy2.safetensors")).unwrap();
    let (_, trainable) = expected();
    let total: u64 = ["0.weight", "2.weight"]
        .iter()
        .map(|name| {
            let k = archive.as_conv_kernel(name).unwrap();
            LayerSpec::new(*name, k.dims(), true, None).param_count()
        })
        .sum();
    assert_eq!(total, trainable);
}
