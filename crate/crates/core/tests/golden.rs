//! Byte-exact bitstream stability against a committed fixture.
//!
//! Regenerate after a deliberate format change (and version bump) with:
//! `BLESS=1 cargo test -p teso-core --test golden`

use std::path::PathBuf;

use teso_core::pipeline::{decode_bytes, encode_cloud, PipelineConfig};
use teso_core::synthetic;

fn fixture_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/golden_sphere8.teso")
}

fn build_golden() -> Vec<u8> {
    let cloud = synthetic::sphere_cloud(8, 25.0);
    let cfg = PipelineConfig::new(8, 55.0, 25);
    let (summary, _) = encode_cloud(&cloud, &cfg).expect("golden encode");
    summary.bytes
}

#[test]
fn golden_bitstream_is_stable() {
    let bytes = build_golden();
    let path = fixture_path();
    if std::env::var_os("BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, &bytes).unwrap();
        eprintln!("blessed {} ({} bytes)", path.display(), bytes.len());
        return;
    }
    let golden = std::fs::read(&path)
        .unwrap_or_else(|e| panic!("missing fixture {} ({e}); run with BLESS=1", path.display()));
    assert_eq!(
        bytes.len(),
        golden.len(),
        "bitstream length changed: fixture {} bytes, writer now emits {}",
        golden.len(),
        bytes.len()
    );
    if let Some(i) = (0..bytes.len()).find(|&i| bytes[i] != golden[i]) {
        panic!(
            "bitstream diverges from fixture at byte {i}: {:#04x} vs {:#04x}",
            golden[i], bytes[i]
        );
    }
}

#[test]
fn golden_fixture_decodes() {
    let model = decode_bytes(&std::fs::read(fixture_path()).expect("fixture present")).unwrap();
    assert_eq!(model.header.depth, 8);
    assert_eq!(model.header.qt, 25);
    assert_eq!(model.header.leaf_levels, vec![4, 5, 6]);
    assert!(model.tree.leaf_count() > 0);
    assert!(model.tree.leaves().all(|(_, _, _, p)| p.is_some()));
}
