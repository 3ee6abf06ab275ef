use std::path::PathBuf;

use cliqueloc::descriptors::{embedding_dot, EMBEDDING_NORM_TOLERANCE};
use cliqueloc::io::{embedding_payload_path, read_embeddings, write_embeddings};

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/embeds.json")
}

#[test]
fn fixture_loads_with_unit_rows() {
    let table = read_embeddings(&fixture()).unwrap();
    assert_eq!(table.dim(), 768);
    assert_eq!(table.len(), 3);
    assert_eq!(table.ids(), ["map/duck", "map/chair", "obs/0"]);
    for id in table.ids() {
        let row = table.get(id).unwrap();
        let norm = embedding_dot(row, row).sqrt();
        assert!((norm - 1.0).abs() <= EMBEDDING_NORM_TOLERANCE, "{id}: {norm}");
    }
    let cross = embedding_dot(table.get("map/duck").unwrap(), table.get("obs/0").unwrap());
    assert!(cross.abs() < 0.2);
}

#[test]
fn fixture_survives_a_rewrite_byte_for_byte() {
    let table = read_embeddings(&fixture()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("copy.json");
    write_embeddings(&out, &table).unwrap();
    let original = std::fs::read(embedding_payload_path(&fixture())).unwrap();
    assert_eq!(std::fs::read(embedding_payload_path(&out)).unwrap(), original);
    assert_eq!(read_embeddings(&out).unwrap(), table);
}

#[test]
fn truncated_payload_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let header = dir.path().join("e.json");
    std::fs::copy(fixture(), &header).unwrap();
    let payload = std::fs::read(embedding_payload_path(&fixture())).unwrap();
    std::fs::write(embedding_payload_path(&header), &payload[..payload.len() - 4]).unwrap();
    let err = read_embeddings(&header).unwrap_err();
    assert!(err.is_data_error());
    assert!(err.to_string().contains("bytes"), "{err}");
}
