//! JSON map/observation files and the JSON + little-endian `f32` embedding files.
//!
//! Map: `{frame_id, landmarks: [{id, position[3], orientation[9 row-major],
//! axis_lengths[3], class_id, text_label?, embedding_id?}]}`. Observations use
//! the same layout plus an optional `gt_pose: {rotation[9], translation[3]}`.
//!
//! Embeddings: `name.json` holds `{dim, count, ids}` and `name.bin` holds
//! `count × dim` little-endian `f32` values in id order.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::descriptors::EmbeddingTable;
use crate::error::{Error, Result};
use crate::pose::PoseEstimate;
use crate::scene::{project_to_rotation, rotation_defect, EllipsoidLandmark, ObjectMap, ObservationSet, Pose, ROTATION_TOLERANCE};

/// Rotations off by more than this are rejected; smaller defects are
/// projected back onto SO(3) with a warning.
pub const ROTATION_REPAIR_LIMIT: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkRecord {
    pub id: u64,
    pub position: [f64; 3],
    pub orientation: [f64; 9],
    pub axis_lengths: [f64; 3],
    pub class_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_id: Option<String>,
    #[serde(flatten, skip_serializing)]
    pub unknown: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapFile {
    pub frame_id: String,
    pub landmarks: Vec<LandmarkRecord>,
    #[serde(flatten, skip_serializing)]
    pub unknown: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationFile {
    #[serde(default)]
    pub frame_id: String,
    pub landmarks: Vec<LandmarkRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_pose: Option<PoseRecord>,
    #[serde(flatten, skip_serializing)]
    pub unknown: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingHeader {
    pub dim: usize,
    pub count: usize,
    pub ids: Vec<String>,
    #[serde(flatten, skip_serializing)]
    pub unknown: BTreeMap<String, serde_json::Value>,
}

fn parse_error(source_name: &str, message: impl Into<String>) -> Error {
    Error::Parse {
        source_name: source_name.to_string(),
        message: message.into(),
    }
}

/// Deserialize with the failing field path and line/column in the message.
fn parse_json<T: DeserializeOwned>(text: &str, source_name: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        parse_error(
            source_name,
            format!("field `{path}`: {inner}"),
        )
    })
}

fn warn_unknown(unknown: &BTreeMap<String, serde_json::Value>, source_name: &str, at: &str) {
    for key in unknown.keys() {
        log::warn!("{source_name}: ignoring unknown field `{at}{key}`");
    }
}

pub(crate) fn matrix_from_row_major(v: &[f64; 9]) -> Matrix3<f64> {
    Matrix3::from_row_slice(v)
}

pub(crate) fn row_major(m: &Matrix3<f64>) -> [f64; 9] {
    [
        m[(0, 0)], m[(0, 1)], m[(0, 2)],
        m[(1, 0)], m[(1, 1)], m[(1, 2)],
        m[(2, 0)], m[(2, 1)], m[(2, 2)],
    ]
}

fn checked_rotation(values: &[f64; 9], source_name: &str, field: &str) -> Result<Matrix3<f64>> {
    let m = matrix_from_row_major(values);
    let defect = rotation_defect(&m);
    if defect.is_finite() && defect <= ROTATION_TOLERANCE {
        Ok(m)
    } else if defect.is_finite() && defect <= ROTATION_REPAIR_LIMIT {
        log::warn!("{source_name}: `{field}` is {defect:.2e} off SO(3); projecting");
        Ok(project_to_rotation(&m))
    } else {
        Err(parse_error(
            source_name,
            format!("field `{field}`: not a rotation matrix (defect {defect:.3e})"),
        ))
    }
}

fn landmark_from_record(rec: &LandmarkRecord, source_name: &str, at: &str) -> Result<EllipsoidLandmark> {
    warn_unknown(&rec.unknown, source_name, &format!("{at}."));
    let orientation = checked_rotation(&rec.orientation, source_name, &format!("{at}.orientation"))?;
    let mut lm = EllipsoidLandmark::new(
        rec.id,
        Vector3::from(rec.position),
        orientation,
        Vector3::from(rec.axis_lengths),
        rec.class_id,
    )
    .map_err(|e| parse_error(source_name, format!("`{at}`: {e}")))?;
    if let Some(label) = &rec.text_label {
        lm = lm.with_text_label(label.clone());
    }
    if let Some(eid) = &rec.embedding_id {
        lm = lm.with_embedding_id(eid.clone());
    }
    Ok(lm)
}

pub fn landmark_record(lm: &EllipsoidLandmark) -> LandmarkRecord {
    LandmarkRecord {
        id: lm.id(),
        position: (*lm.position()).into(),
        orientation: row_major(lm.orientation()),
        axis_lengths: (*lm.axis_lengths()).into(),
        class_id: lm.class_id(),
        text_label: lm.text_label().map(str::to_string),
        embedding_id: lm.embedding_id().map(str::to_string),
        unknown: BTreeMap::new(),
    }
}

pub fn pose_record(pose: &Pose) -> PoseRecord {
    PoseRecord {
        rotation: row_major(pose.rotation()),
        translation: (*pose.translation()).into(),
    }
}

fn pose_from_record(rec: &PoseRecord, source_name: &str) -> Result<Pose> {
    let r = checked_rotation(&rec.rotation, source_name, "gt_pose.rotation")?;
    Pose::new(r, Vector3::from(rec.translation)).map_err(|e| parse_error(source_name, format!("`gt_pose`: {e}")))
}

pub fn parse_map(text: &str, source_name: &str) -> Result<ObjectMap> {
    let file: MapFile = parse_json(text, source_name)?;
    warn_unknown(&file.unknown, source_name, "");
    let landmarks = file
        .landmarks
        .iter()
        .enumerate()
        .map(|(i, r)| landmark_from_record(r, source_name, &format!("landmarks[{i}]")))
        .collect::<Result<Vec<_>>>()?;
    Ok(ObjectMap::new(file.frame_id, landmarks))
}

pub fn parse_observation(text: &str, source_name: &str) -> Result<(ObservationSet, String)> {
    let file: ObservationFile = parse_json(text, source_name)?;
    warn_unknown(&file.unknown, source_name, "");
    let objects = file
        .landmarks
        .iter()
        .enumerate()
        .map(|(i, r)| landmark_from_record(r, source_name, &format!("landmarks[{i}]")))
        .collect::<Result<Vec<_>>>()?;
    let mut set = ObservationSet::new(objects);
    if let Some(gt) = &file.gt_pose {
        set = set.with_ground_truth(pose_from_record(gt, source_name)?);
    }
    Ok((set, file.frame_id))
}

pub fn map_to_json(map: &ObjectMap) -> String {
    let file = MapFile {
        frame_id: map.frame_id.clone(),
        landmarks: map.landmarks.iter().map(landmark_record).collect(),
        unknown: BTreeMap::new(),
    };
    serde_json::to_string_pretty(&file).expect("map serialization is infallible")
}

pub fn observation_to_json(obs: &ObservationSet, frame_id: &str) -> String {
    let file = ObservationFile {
        frame_id: frame_id.to_string(),
        landmarks: obs.objects.iter().map(landmark_record).collect(),
        gt_pose: obs.source_pose_gt.as_ref().map(pose_record),
        unknown: BTreeMap::new(),
    };
    serde_json::to_string_pretty(&file).expect("observation serialization is infallible")
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_map(path: &Path) -> Result<ObjectMap> {
    parse_map(&read_text(path)?, &path.display().to_string())
}

pub fn read_observation(path: &Path) -> Result<ObservationSet> {
    parse_observation(&read_text(path)?, &path.display().to_string()).map(|(o, _)| o)
}

pub fn write_map(path: &Path, map: &ObjectMap) -> Result<()> {
    write_text(path, &map_to_json(map))
}

pub fn write_observation(path: &Path, obs: &ObservationSet, frame_id: &str) -> Result<()> {
    write_text(path, &observation_to_json(obs, frame_id))
}

/// Binary payload path that accompanies an embedding header.
pub fn embedding_payload_path(header: &Path) -> PathBuf {
    header.with_extension("bin")
}

pub fn read_embeddings(header_path: &Path) -> Result<EmbeddingTable> {
    let source = header_path.display().to_string();
    let header: EmbeddingHeader = parse_json(&read_text(header_path)?, &source)?;
    warn_unknown(&header.unknown, &source, "");
    if header.ids.len() != header.count {
        return Err(parse_error(
            &source,
            format!("field `ids`: {} ids but count is {}", header.ids.len(), header.count),
        ));
    }
    let bin_path = embedding_payload_path(header_path);
    let bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let expected = header.count * header.dim * 4;
    if bytes.len() != expected {
        return Err(parse_error(
            &bin_path.display().to_string(),
            format!("payload is {} bytes, header implies {expected}", bytes.len()),
        ));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    EmbeddingTable::new(header.dim, header.ids, data).map_err(|e| parse_error(&source, e.to_string()))
}

pub fn write_embeddings(header_path: &Path, table: &EmbeddingTable) -> Result<()> {
    let header = EmbeddingHeader {
        dim: table.dim(),
        count: table.len(),
        ids: table.ids().to_vec(),
        unknown: BTreeMap::new(),
    };
    write_text(
        header_path,
        &serde_json::to_string_pretty(&header).expect("header serialization is infallible"),
    )?;
    let bytes: Vec<u8> = table.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    let bin_path = embedding_payload_path(header_path);
    fs::write(&bin_path, bytes).map_err(|e| Error::io(&bin_path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateRecord {
    pub rank: usize,
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub residual: f64,
    pub score: f64,
    pub correspondences: Vec<crate::matching::Correspondence>,
}

pub fn estimate_record(rank: usize, est: &PoseEstimate) -> EstimateRecord {
    EstimateRecord {
        rank,
        rotation: row_major(est.pose.rotation()),
        translation: (*est.pose.translation()).into(),
        residual: est.weighted_rms_residual,
        score: est.hypothesis_score,
        correspondences: est.correspondences.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MAP: &str = r#"{
      "frame_id": "room",
      "landmarks": [
        {"id": 0, "position": [1, 2, 3], "orientation": [1,0,0, 0,1,0, 0,0,1],
         "axis_lengths": [0.2, 0.3, 0.4], "class_id": 2, "text_label": "a chair"},
        {"id": 5, "position": [0, 0, 0], "orientation": [0,-1,0, 1,0,0, 0,0,1],
         "axis_lengths": [0.5, 0.5, 0.1], "class_id": 0, "colour": "red"}
      ],
      "version": 3
    }"#;

    #[test]
    fn parses_map_and_ignores_unknown_fields() {
        let map = parse_map(MAP, "map.json").unwrap();
        assert_eq!(map.frame_id, "room");
        assert_eq!(map.len(), 2);
        assert_eq!(map.landmarks[0].text_label(), Some("a chair"));
        assert_eq!(map.landmarks[1].id(), 5);
        // row-major: first row is (0, -1, 0)
        assert_eq!(map.landmarks[1].orientation()[(0, 1)], -1.0);
        let again = parse_map(&map_to_json(&map), "again").unwrap();
        assert_eq!(again, map);
    }

    #[test]
    fn reports_field_paths() {
        let bad = MAP.replace("[1, 2, 3]", "[1, 2]");
        let err = parse_map(&bad, "map.json").unwrap_err().to_string();
        assert!(err.contains("landmarks[0].position"), "{err}");
        assert!(err.contains("line"), "{err}");

        let bad = MAP.replace("[0.2, 0.3, 0.4]", "[0.2, -0.3, 0.4]");
        let err = parse_map(&bad, "map.json").unwrap_err().to_string();
        assert!(err.contains("landmarks[0]"), "{err}");

        let bad = MAP.replace("[1,0,0, 0,1,0, 0,0,1]", "[1,0,0, 0,2,0, 0,0,1]");
        let err = parse_map(&bad, "map.json").unwrap_err().to_string();
        assert!(err.contains("landmarks[0].orientation"), "{err}");

        assert!(parse_map("{ not json", "x").is_err());
    }

    #[test]
    fn nearly_orthonormal_rotation_is_repaired() {
        let skewed = MAP.replace("[1,0,0, 0,1,0, 0,0,1]", "[1,0,0, 0,1.0000001,0, 0,0,1]");
        let map = parse_map(&skewed, "map.json").unwrap();
        assert!(rotation_defect(map.landmarks[0].orientation()) <= ROTATION_TOLERANCE);
    }

    #[test]
    fn observation_with_and_without_ground_truth() {
        let with_gt = MAP.replace(
            "\"version\": 3",
            "\"gt_pose\": {\"rotation\": [1,0,0, 0,1,0, 0,0,1], \"translation\": [1, 0, 0]}",
        );
        let (obs, frame) = parse_observation(&with_gt, "obs.json").unwrap();
        assert_eq!(frame, "room");
        assert_eq!(obs.source_pose_gt.unwrap().translation().x, 1.0);
        let (obs, _) = parse_observation(MAP, "obs.json").unwrap();
        assert!(obs.source_pose_gt.is_none());
        let (round, _) = parse_observation(&observation_to_json(&obs, "room"), "again").unwrap();
        assert_eq!(round, obs);
    }

    #[test]
    fn embedding_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("embeds.json");
        let table = EmbeddingTable::from_rows(
            vec!["a".into(), "b".into()],
            &[vec![1.0, 2.0, 2.0], vec![0.0, -1.0, 0.0]],
        )
        .unwrap();
        write_embeddings(&path, &table).unwrap();
        assert!(embedding_payload_path(&path).exists());
        assert_eq!(read_embeddings(&path).unwrap(), table);

        fs::write(embedding_payload_path(&path), [0u8; 7]).unwrap();
        assert!(matches!(read_embeddings(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn missing_files_are_io_errors() {
        let err = read_map(Path::new("/nonexistent/map.json")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
        assert!(err.is_data_error());
    }
}
