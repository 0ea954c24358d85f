//! Dataset access: directory layout, sequence assembly into a common
//! reference frame, training augmentations, and the synthetic scene
//! generator.

pub mod kitti;
pub mod synth;

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::cloud::{compose, invert, PointCloud, Pose};
use kitti::{read_calib, read_labels, read_poses, read_scan, sensor_poses, DataError, LabelRemap};

/// An ordered run of clouds in one common reference frame (the last cloud's
/// frame), positions scaled to lattice units.
#[derive(Debug, Clone)]
pub struct SequenceSample {
    pub clouds: Vec<PointCloud>,
    /// Dataset indices the clouds came from, oldest first.
    pub indices: Vec<usize>,
    pub ignore_label: i64,
}

impl SequenceSample {
    /// Labels of the last (anchor) cloud, if present.
    pub fn anchor_labels(&self) -> Option<&[i64]> {
        self.clouds.last().and_then(|c| c.labels.as_deref())
    }
}

/// A directory of scans with optional labels and poses:
/// `velodyne/*.bin`, `labels/*.label`, `poses.txt`, `calib.txt`.
pub struct SequenceDataset {
    pub scan_paths: Vec<PathBuf>,
    pub label_paths: Vec<Option<PathBuf>>,
    /// World pose of the sensor frame per scan (calibration applied).
    pub poses: Vec<Pose>,
    pub remap: LabelRemap,
}

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>, DataError> {
    let mut out = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| DataError::Io(dir.to_path_buf(), e))?;
    for entry in entries {
        let entry = entry.map_err(|e| DataError::Io(dir.to_path_buf(), e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) == Some(ext) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

impl SequenceDataset {
    pub fn open(root: &Path, remap: LabelRemap) -> Result<Self, DataError> {
        let scan_paths = sorted_files(&root.join("velodyne"), "bin")?;
        let labels_dir = root.join("labels");
        let label_paths: Vec<Option<PathBuf>> = scan_paths
            .iter()
            .map(|s| {
                let stem = s.file_stem().unwrap();
                let p = labels_dir.join(stem).with_extension("label");
                p.exists().then_some(p)
            })
            .collect();
        let poses_path = root.join("poses.txt");
        let mut poses = if poses_path.exists() {
            read_poses(&poses_path)?
        } else {
            vec![crate::cloud::IDENTITY_POSE; scan_paths.len()]
        };
        let calib_path = root.join("calib.txt");
        if calib_path.exists() {
            let calib = read_calib(&calib_path)?;
            poses = sensor_poses(&poses, &calib);
        }
        Ok(SequenceDataset {
            scan_paths,
            label_paths,
            poses,
            remap,
        })
    }

    pub fn len(&self) -> usize {
        self.scan_paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scan_paths.is_empty()
    }

    /// Load one cloud with labels and its pose attached.
    pub fn load(&self, i: usize) -> Result<PointCloud, DataError> {
        let mut cloud = read_scan(&self.scan_paths[i])?;
        cloud.pose = self.poses[i];
        if let Some(label_path) = &self.label_paths[i] {
            let labels = read_labels(label_path, &self.remap)?;
            if labels.len() != cloud.len() {
                return Err(DataError::PairingMismatch {
                    scan: self.scan_paths[i].clone(),
                    points: cloud.len(),
                    label_file: label_path.clone(),
                    labels: labels.len(),
                });
            }
            cloud = cloud.with_labels(labels)?;
        }
        Ok(cloud)
    }

    /// Assemble the sample anchored at index `t`: clouds at t-(n-1)s .. t in
    /// steps of s, each transformed into the anchor's frame and scaled by
    /// 1/sigma. Returns None when the sequence would reach before index 0
    /// (incomplete samples are skipped, not padded).
    pub fn assemble(
        &self,
        t: usize,
        n: usize,
        s: usize,
        sigma: f64,
        use_reflectance: bool,
    ) -> Result<Option<SequenceSample>, DataError> {
        assert!(n >= 1 && s >= 1, "sequence parameters must be positive");
        if t >= self.len() || (n - 1) * s > t {
            return Ok(None);
        }
        let indices: Vec<usize> = (0..n).map(|i| t - (n - 1 - i) * s).collect();
        let anchor_inv = invert(&self.poses[t]);
        let sigma3 = [sigma; 3];
        let mut clouds = Vec::with_capacity(n);
        for &i in &indices {
            let mut cloud = self.load(i)?;
            let to_anchor = compose(&anchor_inv, &self.poses[i]);
            cloud.transform(&to_anchor);
            if !use_reflectance {
                cloud.drop_features();
            }
            cloud.scale_positions(&sigma3);
            clouds.push(cloud);
        }
        Ok(Some(SequenceSample {
            clouds,
            indices,
            ignore_label: self.remap.ignore,
        }))
    }
}

/// Training augmentation parameters; distances are in meters and converted
/// internally using the sample's sigma scaling.
#[derive(Debug, Clone)]
pub struct AugmentConfig {
    pub rotate: bool,
    pub mirror: bool,
    /// Max |translation| per horizontal axis, meters.
    pub translation: f64,
    /// Per-point isotropic Gaussian noise, meters.
    pub noise_sigma: f64,
    /// The sigma the sample's positions were scaled by.
    pub sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotate: true,
            mirror: true,
            translation: 2.0,
            noise_sigma: 0.01,
            sigma: 1.0,
        }
    }
}

/// Apply one random rigid augmentation (rotation around the height axis,
/// mirroring, horizontal translation) identically to every cloud of the
/// sample, preserving cross-timestep correspondence, then independent
/// per-point Gaussian noise. Labels are untouched.
pub fn augment(sample: &mut SequenceSample, config: &AugmentConfig, rng: &mut ChaCha8Rng) {
    let angle = if config.rotate {
        rng.gen::<f64>() * std::f64::consts::TAU
    } else {
        0.0
    };
    let mirror = config.mirror && rng.gen::<bool>();
    let t = config.translation / config.sigma;
    let tx = rng.gen_range(-t..=t);
    let ty = rng.gen_range(-t..=t);
    let (sin, cos) = angle.sin_cos();
    let noise = config.noise_sigma / config.sigma;

    for cloud in &mut sample.clouds {
        for mut row in cloud.positions.rows_mut() {
            let (mut x, y) = (row[0], row[1]);
            if mirror {
                x = -x;
            }
            row[0] = cos * x - sin * y + tx;
            row[1] = sin * x + cos * y + ty;
        }
        if noise > 0.0 {
            for v in cloud.positions.iter_mut() {
                *v += gaussian(rng) * noise;
            }
        }
    }
}

/// Standard normal sample (Box-Muller).
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
