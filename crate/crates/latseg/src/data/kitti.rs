//! Binary scan/label/pose file formats: 16-byte little-endian point records,
//! 4-byte label records with a semantic/instance bit split, and pose text
//! files with an optional sensor calibration.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use thiserror::Error;

use crate::cloud::{compose, invert, CloudError, PointCloud, Pose, IDENTITY_POSE};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: file size {size} is not a multiple of {stride} (trailing {rem} bytes at offset {offset})")]
    BadRecordSize {
        path: PathBuf,
        size: u64,
        stride: u64,
        rem: u64,
        offset: u64,
    },
    #[error("{scan}: {points} points but {labels} labels in {label_file}")]
    PairingMismatch {
        scan: PathBuf,
        points: usize,
        label_file: PathBuf,
        labels: usize,
    },
    #[error("{path}:{line}: expected {expected} values, got {got}")]
    BadPoseLine {
        path: PathBuf,
        line: usize,
        expected: usize,
        got: usize,
    },
    #[error("{path}: no calibration entry named {key:?}")]
    MissingCalibKey { path: PathBuf, key: String },
    #[error("{0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error(transparent)]
    Cloud(#[from] CloudError),
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|e| DataError::Io(path.to_path_buf(), e))
}

/// Read a scan file: one point per 16 bytes, four little-endian 32-bit reals
/// (x, y, z, reflectance). An empty file is a valid empty cloud.
pub fn read_scan(path: &Path) -> Result<PointCloud, DataError> {
    let bytes = read_file(path)?;
    let size = bytes.len() as u64;
    if size % 16 != 0 {
        return Err(DataError::BadRecordSize {
            path: path.to_path_buf(),
            size,
            stride: 16,
            rem: size % 16,
            offset: size - size % 16,
        });
    }
    let m = bytes.len() / 16;
    let mut positions = Array2::zeros((m, 3));
    let mut features = Array2::zeros((m, 1));
    for (i, rec) in bytes.chunks_exact(16).enumerate() {
        for j in 0..3 {
            let v = f32::from_le_bytes(rec[j * 4..j * 4 + 4].try_into().unwrap());
            positions[(i, j)] = v as f64;
        }
        features[(i, 0)] = f32::from_le_bytes(rec[12..16].try_into().unwrap());
    }
    Ok(PointCloud::new(positions, features)?)
}

/// Write a scan file in the same 16-byte record layout.
pub fn write_scan(path: &Path, cloud: &PointCloud) -> Result<(), DataError> {
    let mut out = Vec::with_capacity(cloud.len() * 16);
    for i in 0..cloud.len() {
        for j in 0..3 {
            out.extend_from_slice(&(cloud.positions[(i, j)] as f32).to_le_bytes());
        }
        let refl = if cloud.feature_dim() > 0 {
            cloud.features[(i, 0)]
        } else {
            0.0
        };
        out.extend_from_slice(&refl.to_le_bytes());
    }
    std::fs::write(path, out).map_err(|e| DataError::Io(path.to_path_buf(), e))
}

/// Raw-id remapping for label files. Unknown raw semantic ids map to the
/// ignore label.
#[derive(Debug, Clone)]
pub struct LabelRemap {
    pub map: HashMap<u16, i64>,
    pub ignore: i64,
}

impl LabelRemap {
    pub fn identity(ignore: i64) -> Self {
        LabelRemap {
            map: HashMap::new(),
            ignore,
        }
    }

    pub fn apply(&self, raw_semantic: u16) -> i64 {
        if self.map.is_empty() {
            // identity pass-through, except raw 0 which is the unlabeled id
            if raw_semantic == 0 {
                self.ignore
            } else {
                raw_semantic as i64
            }
        } else {
            *self.map.get(&raw_semantic).unwrap_or(&self.ignore)
        }
    }
}

/// Read a label file: one little-endian u32 per point; low 16 bits are the
/// semantic class, high 16 bits the (discarded) instance id.
pub fn read_labels(path: &Path, remap: &LabelRemap) -> Result<Vec<i64>, DataError> {
    let bytes = read_file(path)?;
    let size = bytes.len() as u64;
    if size % 4 != 0 {
        return Err(DataError::BadRecordSize {
            path: path.to_path_buf(),
            size,
            stride: 4,
            rem: size % 4,
            offset: size - size % 4,
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| {
            let raw = u32::from_le_bytes(c.try_into().unwrap());
            remap.apply((raw & 0xffff) as u16)
        })
        .collect())
}

/// Split a raw label value into (semantic class, instance id).
pub fn split_label(raw: u32) -> (u16, u16) {
    ((raw & 0xffff) as u16, (raw >> 16) as u16)
}

/// Write raw u32 label records.
pub fn write_raw_labels(path: &Path, raw: &[u32]) -> Result<(), DataError> {
    let mut out = Vec::with_capacity(raw.len() * 4);
    for &v in raw {
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out).map_err(|e| DataError::Io(path.to_path_buf(), e))
}

/// Read a poses file: one pose per line, 12 whitespace-separated reals
/// forming a row-major 3x4 matrix.
pub fn read_poses(path: &Path) -> Result<Vec<Pose>, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| DataError::Io(path.to_path_buf(), e))?;
    let mut poses = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        poses.push(parse_pose_line(path, lineno + 1, line)?);
    }
    Ok(poses)
}

fn parse_pose_line(path: &Path, lineno: usize, line: &str) -> Result<Pose, DataError> {
    let vals: Vec<f64> = line
        .split_whitespace()
        .filter_map(|t| t.parse().ok())
        .collect();
    if vals.len() != 12 {
        return Err(DataError::BadPoseLine {
            path: path.to_path_buf(),
            line: lineno,
            expected: 12,
            got: vals.len(),
        });
    }
    let mut pose = IDENTITY_POSE;
    for i in 0..3 {
        for j in 0..4 {
            pose[i][j] = vals[i * 4 + j];
        }
    }
    Ok(pose)
}

/// Read the sensor calibration transform (the "Tr:" entry) from a calib
/// file. Lines are "key: 12 reals".
pub fn read_calib(path: &Path) -> Result<Pose, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| DataError::Io(path.to_path_buf(), e))?;
    for (lineno, line) in text.lines().enumerate() {
        if let Some(rest) = line.strip_prefix("Tr:") {
            return parse_pose_line(path, lineno + 1, rest);
        }
    }
    Err(DataError::MissingCalibKey {
        path: path.to_path_buf(),
        key: "Tr".to_string(),
    })
}

/// Express camera-frame poses in the sensor frame: P_i = Tr^-1 * pose_i * Tr.
pub fn sensor_poses(poses: &[Pose], calib: &Pose) -> Vec<Pose> {
    let inv = invert(calib);
    poses
        .iter()
        .map(|p| compose(&compose(&inv, p), calib))
        .collect()
}

/// Write poses in the 12-real row-major line format.
pub fn write_poses(path: &Path, poses: &[Pose]) -> Result<(), DataError> {
    let mut f =
        std::fs::File::create(path).map_err(|e| DataError::Io(path.to_path_buf(), e))?;
    for p in poses {
        let vals: Vec<String> = (0..3)
            .flat_map(|i| (0..4).map(move |j| (i, j)))
            .map(|(i, j)| format!("{:.9e}", p[i][j]))
            .collect();
        writeln!(f, "{}", vals.join(" ")).map_err(|e| DataError::Io(path.to_path_buf(), e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scan_byte_count_determines_point_count() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.bin");
        std::fs::write(&path, vec![0u8; 160]).unwrap();
        let cloud = read_scan(&path).unwrap();
        assert_eq!(cloud.len(), 10);
    }

    #[test]
    fn empty_scan_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.bin");
        std::fs::write(&path, Vec::<u8>::new()).unwrap();
        assert_eq!(read_scan(&path).unwrap().len(), 0);
    }

    #[test]
    fn truncated_scan_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        std::fs::write(&path, vec![0u8; 35]).unwrap();
        match read_scan(&path) {
            Err(DataError::BadRecordSize { rem, offset, .. }) => {
                assert_eq!(rem, 3);
                assert_eq!(offset, 32);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn scan_round_trips_bit_exactly() {
        // independently written fixture: raw bytes assembled by hand
        let mut bytes = Vec::new();
        let records: [[f32; 4]; 3] = [
            [1.5, -2.25, 0.125, 0.7],
            [-0.001, 3.75, -9.5, 0.0],
            [f32::MIN_POSITIVE, 1e20, -1e-20, 1.0],
        ];
        for rec in &records {
            for v in rec {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fix.bin");
        std::fs::write(&path, &bytes).unwrap();
        let cloud = read_scan(&path).unwrap();
        let back = dir.path().join("back.bin");
        write_scan(&back, &cloud).unwrap();
        assert_eq!(std::fs::read(&back).unwrap(), bytes);
    }

    #[test]
    fn label_bit_split() {
        assert_eq!(split_label(0x00000000), (0, 0));
        assert_eq!(split_label(0x00010033), (0x33, 1));
        assert_eq!(split_label(0xffff0001), (1, 0xffff));
    }

    #[test]
    fn labels_zero_is_unlabeled_and_unknowns_map_to_ignore() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.label");
        write_raw_labels(&path, &[0x0000_0000, 0x0001_0033, 0x0000_0007]).unwrap();
        let mut remap = LabelRemap::identity(-1);
        remap.map.insert(0x33, 2);
        let labels = read_labels(&path, &remap).unwrap();
        assert_eq!(labels, vec![-1, 2, -1]);
    }

    #[test]
    fn identity_remap_passes_ids_through() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.label");
        write_raw_labels(&path, &[5, 9, 0]).unwrap();
        let labels = read_labels(&path, &LabelRemap::identity(-1)).unwrap();
        assert_eq!(labels, vec![5, 9, -1]);
    }

    #[test]
    fn poses_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("poses.txt");
        let a: Pose = [
            [0.0, -1.0, 0.0, 1.25],
            [1.0, 0.0, 0.0, -3.5],
            [0.0, 0.0, 1.0, 0.75],
            [0.0, 0.0, 0.0, 1.0],
        ];
        write_poses(&path, &[IDENTITY_POSE, a]).unwrap();
        let back = read_poses(&path).unwrap();
        assert_eq!(back.len(), 2);
        for i in 0..3 {
            for j in 0..4 {
                assert!((back[1][i][j] - a[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn calib_missing_tr_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("calib.txt");
        std::fs::write(&path, "P0: 1 0 0 0 0 1 0 0 0 0 1 0\n").unwrap();
        assert!(matches!(
            read_calib(&path),
            Err(DataError::MissingCalibKey { .. })
        ));
    }

    #[test]
    fn sensor_pose_of_identity_calib_is_unchanged() {
        let p: Pose = [
            [1.0, 0.0, 0.0, 2.0],
            [0.0, 1.0, 0.0, -1.0],
            [0.0, 0.0, 1.0, 0.5],
            [0.0, 0.0, 0.0, 1.0],
        ];
        let out = sensor_poses(&[p], &IDENTITY_POSE);
        assert_eq!(out[0], p);
    }
}
