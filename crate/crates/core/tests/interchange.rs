//! FIM interchange and archive files as an external producer would write them.

use std::path::Path;

use fimmerge_core::fim::{export_fim, import_fim};
use fimmerge_core::{estimate_fim, load_archive, Error, MicroModel, MicroModelConfig, NamingScheme};

/// Safetensors bytes built by hand: u64 header length, JSON header, payload.
fn raw_safetensors(entries: &[(&str, &str, Vec<usize>, Vec<u8>)], pad: bool) -> Vec<u8> {
    let mut header = serde_json::Map::new();
    let mut payload = Vec::new();
    for (name, dtype, shape, bytes) in entries {
        let start = payload.len();
        payload.extend_from_slice(bytes);
        header.insert(
            name.to_string(),
            serde_json::json!({ "dtype": dtype, "shape": shape, "data_offsets": [start, payload.len()] }),
        );
    }
    let mut text = serde_json::to_string(&header).unwrap().into_bytes();
    if pad {
        while !text.len().is_multiple_of(8) {
            text.push(b' ');
        }
    }
    let mut out = (text.len() as u64).to_le_bytes().to_vec();
    out.extend(text);
    out.extend(payload);
    out
}

fn f32_bytes(xs: &[f32]) -> Vec<u8> {
    xs.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, bytes).unwrap();
    p
}

#[test]
fn reads_foreign_archives_with_and_without_padding() {
    let dir = tempfile::tempdir().unwrap();
    let half: Vec<u8> = [1.5f32, -2.0, 0.25]
        .iter()
        .flat_map(|&x| half::f16::from_f32(x).to_le_bytes())
        .collect();
    for pad in [false, true] {
        let bytes = raw_safetensors(
            &[
                ("b.weight", "F32", vec![2, 2], f32_bytes(&[1.0, 2.0, 3.0, 4.0])),
                ("a.bias", "F16", vec![3], half.clone()),
            ],
            pad,
        );
        let archive = load_archive(&write(dir.path(), "m.safetensors", &bytes)).unwrap();
        assert_eq!(archive.get("b.weight").unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(archive.get("a.bias").unwrap().data(), &[1.5, -2.0, 0.25]);
        assert_eq!(archive.get("b.weight").unwrap().shape(), &[2, 2]);
    }
}

#[test]
fn imports_a_per_layer_only_document() {
    let dir = tempfile::tempdir().unwrap();
    let doc = r#"{
        "meta": {"n_samples": 16, "seq_len": 128, "seed": 7, "model_id": "external"},
        "per_layer": {"0": 0.5, "1": 2.25, "10": 1e-9}
    }"#;
    let scores = import_fim(&write(dir.path(), "fim.json", doc.as_bytes()), &NamingScheme::default()).unwrap();
    assert!(scores.elementwise.is_none());
    assert_eq!(scores.per_layer.len(), 3);
    assert_eq!(scores.per_layer[&10], 1e-9);
    assert_eq!(scores.meta.model_id, "external");
}

#[test]
fn imports_a_document_with_a_foreign_elementwise_archive() {
    let dir = tempfile::tempdir().unwrap();
    let q = [0.1f32, 0.2, 0.3, 0.4];
    let up = [1.0f32, 3.0];
    let bytes = raw_safetensors(
        &[
            ("model.layers.0.self_attn.q_proj.weight", "F32", vec![2, 2], f32_bytes(&q)),
            ("model.layers.0.mlp.up_proj.weight", "F32", vec![2, 1], f32_bytes(&up)),
        ],
        true,
    );
    write(dir.path(), "ew.safetensors", &bytes);
    // Mean over every coefficient-set entry of layer 0, accumulated in f64.
    let mean = (q.iter().chain(&up).map(|&x| x as f64).sum::<f64>()) / 6.0;
    let doc = serde_json::json!({
        "meta": {"n_samples": 4, "seq_len": 8, "seed": 1, "model_id": "x", "reduction": "mean"},
        "per_layer": {"0": mean},
        "elementwise_archive": "ew.safetensors"
    });
    let path = write(dir.path(), "fim.json", doc.to_string().as_bytes());
    let scores = import_fim(&path, &NamingScheme::default()).unwrap();
    assert_eq!(scores.elementwise_for("model.layers.0.mlp.up_proj.weight").unwrap().data(), &up);

    let wrong = serde_json::json!({
        "meta": {"n_samples": 4, "seq_len": 8, "seed": 1, "model_id": "x"},
        "per_layer": {"0": mean * 1.01},
        "elementwise_archive": "ew.safetensors"
    });
    let path = write(dir.path(), "bad.json", wrong.to_string().as_bytes());
    assert!(matches!(import_fim(&path, &NamingScheme::default()), Err(Error::Schema(_))));
}

#[test]
fn rejects_malformed_documents() {
    let dir = tempfile::tempdir().unwrap();
    let meta = r#""meta": {"n_samples": 1, "seq_len": 8, "seed": 1, "model_id": "x"}"#;
    for (i, body) in [
        format!(r#"{{{meta}, "per_layer": {{"0": -1.0}}}}"#),
        format!(r#"{{{meta}, "per_layer": {{"zero": 1.0}}}}"#),
        format!(r#"{{{meta}, "per_layer": {{"0": 1.0}}, "extra": 1}}"#),
        r#"{"per_layer": {"0": 1.0}}"#.to_string(),
    ]
    .iter()
    .enumerate()
    {
        let path = write(dir.path(), &format!("bad{i}.json"), body.as_bytes());
        let err = import_fim(&path, &NamingScheme::default()).unwrap_err();
        assert!(err.is_io_or_format(), "case {i}: {err}");
    }
}

#[test]
fn exported_estimates_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let model = MicroModel::new(MicroModelConfig { n_layers: 2, seq_len: 16, ..MicroModelConfig::default() }).unwrap();
    let scores = estimate_fim(&model, 3, 16, 5).unwrap();
    let path = dir.path().join("fim.json");
    export_fim(&scores, &path).unwrap();
    assert!(dir.path().join("fim.elementwise.safetensors").exists());
    let back = import_fim(&path, &NamingScheme::default()).unwrap();
    assert_eq!(back, scores);
}
