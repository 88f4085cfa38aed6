//! The checked-in fuzz seeds are valid inputs; decode each one.

use std::fs;
use std::path::PathBuf;

use ttl_core::data::{parse_cifar10, parse_idx_images, parse_idx_labels};
use ttl_core::{decode_model, encode_model};

fn seeds(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|entry| {
            let path = entry.unwrap().path();
            let bytes = fs::read(&path).unwrap();
            (path, bytes)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

#[test]
fn idx_seeds_parse() {
    for (path, bytes) in seeds("idx_images") {
        parse_idx_images(&bytes).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    }
    for (path, bytes) in seeds("idx_labels") {
        parse_idx_labels(&bytes).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    }
}

#[test]
fn cifar_seeds_parse() {
    for (path, bytes) in seeds("cifar10") {
        let (labels, _) = parse_cifar10(&bytes).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(labels.len(), bytes.len() / 3073);
    }
}

#[test]
fn model_seeds_decode_and_reencode() {
    for (path, bytes) in seeds("model_artifact") {
        let model = decode_model(&bytes).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(encode_model(&model), bytes);
    }
}
