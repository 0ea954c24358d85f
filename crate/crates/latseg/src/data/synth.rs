//! Synthetic desk-scale scenes: a handful of static structures plus rigid
//! objects translating at known velocities, emitted either in memory or as
//! an on-disk dataset in the shared scan/label formats.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::{PointCloud, IDENTITY_POSE};
use crate::data::kitti::{write_poses, write_raw_labels, write_scan, DataError, LabelRemap};

pub const GROUND: i64 = 0;
pub const PILLAR: i64 = 1;
pub const BOX_STATIC: i64 = 2;
pub const SPHERE_STATIC: i64 = 3;
pub const BOX_MOVING: i64 = 4;
pub const SPHERE_MOVING: i64 = 5;
pub const N_CLASSES: usize = 6;

/// Raw on-disk semantic ids per class (remapped to 0..5 at load).
pub const RAW_IDS: [u16; N_CLASSES] = [10, 18, 30, 44, 251, 253];

pub fn class_names() -> [&'static str; N_CLASSES] {
    ["ground", "pillar", "box", "sphere", "moving-box", "moving-sphere"]
}

pub fn moving_flags() -> [bool; N_CLASSES] {
    [false, false, false, false, true, true]
}

pub fn is_moving(class: i64) -> bool {
    class == BOX_MOVING || class == SPHERE_MOVING
}

pub fn label_remap() -> LabelRemap {
    let mut remap = LabelRemap::identity(-1);
    for (class, &raw) in RAW_IDS.iter().enumerate() {
        remap.map.insert(raw, class as i64);
    }
    remap
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSceneConfig {
    pub frames: usize,
    pub seed: u64,
    pub points_per_object: usize,
    /// Per-point isotropic noise, meters; redrawn every frame.
    pub noise_sigma: f64,
    pub n_ground: usize,
    pub n_pillar: usize,
    pub n_box_static: usize,
    pub n_sphere_static: usize,
    pub n_box_moving: usize,
    pub n_sphere_moving: usize,
    /// Moving-object speed range, meters per frame.
    pub velocity_range: (f64, f64),
    /// Half-size of the scene square, meters.
    pub extent: f64,
    /// Wrap moving objects toroidally inside the placement square so their
    /// position distribution matches the static objects'. Off by default:
    /// wrapping breaks the constant-velocity invariant at the seam.
    #[serde(default)]
    pub wrap_moving: bool,
}

impl Default for SynthSceneConfig {
    fn default() -> Self {
        SynthSceneConfig {
            frames: 6,
            seed: 0,
            points_per_object: 40,
            noise_sigma: 0.01,
            n_ground: 1,
            n_pillar: 2,
            n_box_static: 4,
            n_sphere_static: 4,
            n_box_moving: 4,
            n_sphere_moving: 4,
            velocity_range: (1.0, 2.0),
            extent: 6.0,
            wrap_moving: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ObjectInfo {
    pub class: i64,
    /// Meters per frame; zero for static objects.
    pub velocity: [f64; 3],
    /// Point rows [start, end) occupied by this object in every frame.
    pub point_range: (usize, usize),
}

/// One generated scene: the same point ordering in every frame, so
/// `objects[i].point_range` indexes any frame's cloud.
#[derive(Debug, Clone)]
pub struct SynthFrames {
    pub clouds: Vec<PointCloud>,
    pub objects: Vec<ObjectInfo>,
}

struct ObjectTemplate {
    class: i64,
    /// Base shape points relative to the object center, meters.
    shape: Vec<[f64; 3]>,
    center: [f64; 3],
    velocity: [f64; 3],
    reflectance: f32,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn make_shape(rng: &mut ChaCha8Rng, class: i64, m: usize, extent: f64) -> Vec<[f64; 3]> {
    (0..m)
        .map(|_| match class {
            GROUND => [
                rng.gen_range(-extent..extent),
                rng.gen_range(-extent..extent),
                rng.gen_range(0.0..0.05),
            ],
            PILLAR => {
                let a = rng.gen::<f64>() * std::f64::consts::TAU;
                let r = 0.1 * rng.gen::<f64>().sqrt();
                [a.cos() * r, a.sin() * r, rng.gen_range(0.0..2.0)]
            }
            BOX_STATIC | BOX_MOVING => [
                rng.gen_range(-0.4..0.4),
                rng.gen_range(-0.4..0.4),
                rng.gen_range(-0.4..0.4),
            ],
            SPHERE_STATIC | SPHERE_MOVING => {
                // uniform direction via normalized gaussians
                let v = [gaussian(rng), gaussian(rng), gaussian(rng)];
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-9);
                [0.4 * v[0] / n, 0.4 * v[1] / n, 0.4 * v[2] / n]
            }
            other => panic!("unknown synthetic class {other}"),
        })
        .collect()
}

fn build_templates(config: &SynthSceneConfig, rng: &mut ChaCha8Rng) -> Vec<ObjectTemplate> {
    let mut templates = Vec::new();
    let plan: [(i64, usize); 6] = [
        (GROUND, config.n_ground),
        (PILLAR, config.n_pillar),
        (BOX_STATIC, config.n_box_static),
        (SPHERE_STATIC, config.n_sphere_static),
        (BOX_MOVING, config.n_box_moving),
        (SPHERE_MOVING, config.n_sphere_moving),
    ];
    let half = (config.frames as f64 - 1.0) / 2.0;
    for (class, count) in plan {
        for _ in 0..count {
            let shape = make_shape(rng, class, config.points_per_object, config.extent);
            let span = config.extent - 1.0;
            // boxes and spheres float clear of the ground plane so they do
            // not share lattice vertices with it at typical scales
            let z = match class {
                GROUND => 0.0,
                PILLAR => 0.0,
                _ => rng.gen_range(1.2..2.0),
            };
            let mut center = [
                rng.gen_range(-span..span),
                rng.gen_range(-span..span),
                z,
            ];
            let mut velocity = [0.0; 3];
            if is_moving(class) {
                let speed = rng.gen_range(config.velocity_range.0..=config.velocity_range.1);
                let dir = rng.gen::<f64>() * std::f64::consts::TAU;
                velocity = [dir.cos() * speed, dir.sin() * speed, 0.0];
                if !config.wrap_moving {
                    // start upstream so the trajectory stays near the scene
                    center[0] -= velocity[0] * half;
                    center[1] -= velocity[1] * half;
                }
            }
            templates.push(ObjectTemplate {
                class,
                shape,
                center,
                velocity,
                reflectance: rng.gen::<f32>(),
            });
        }
    }
    templates
}

/// Generate all frames of one scene in the world frame (identity poses).
/// Static objects repeat identically across frames modulo per-frame noise;
/// moving objects translate rigidly by their velocity each frame.
pub fn generate_frames(config: &SynthSceneConfig) -> SynthFrames {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let templates = build_templates(config, &mut rng);
    let m = config.points_per_object;
    let total = templates.len() * m;

    let objects: Vec<ObjectInfo> = templates
        .iter()
        .enumerate()
        .map(|(i, t)| ObjectInfo {
            class: t.class,
            velocity: t.velocity,
            point_range: (i * m, (i + 1) * m),
        })
        .collect();

    let span = config.extent - 1.0;
    // wrap into [-span, span)
    let wrap = |v: f64| {
        let width = 2.0 * span;
        v - width * ((v + span) / width).floor()
    };
    let mut clouds = Vec::with_capacity(config.frames);
    for frame in 0..config.frames {
        let f = frame as f64;
        let mut positions = Array2::zeros((total, 3));
        let mut features = Array2::zeros((total, 1));
        let mut labels = Vec::with_capacity(total);
        let mut row = 0usize;
        for t in &templates {
            let mut center = [
                t.center[0] + t.velocity[0] * f,
                t.center[1] + t.velocity[1] * f,
                t.center[2] + t.velocity[2] * f,
            ];
            if config.wrap_moving {
                center[0] = wrap(center[0]);
                center[1] = wrap(center[1]);
            }
            for p in &t.shape {
                for j in 0..3 {
                    let noise = if config.noise_sigma > 0.0 {
                        gaussian(&mut rng) * config.noise_sigma
                    } else {
                        0.0
                    };
                    positions[(row, j)] = center[j] + p[j] + noise;
                }
                features[(row, 0)] =
                    (t.reflectance + rng.gen::<f32>() * 0.05).clamp(0.0, 1.0);
                labels.push(t.class);
                row += 1;
            }
        }
        let cloud = PointCloud::new(positions, features)
            .expect("synthetic positions are finite")
            .with_labels(labels)
            .expect("label count matches by construction");
        clouds.push(cloud);
    }
    SynthFrames { clouds, objects }
}

#[derive(Serialize, Deserialize)]
pub struct SynthManifest {
    pub config: SynthSceneConfig,
    pub class_names: Vec<String>,
    pub moving: Vec<bool>,
    pub raw_ids: Vec<u16>,
}

/// Write a scene as an on-disk dataset: scan/label files in the shared
/// binary formats, identity poses, and a JSON manifest describing the
/// classes.
pub fn write_dataset(config: &SynthSceneConfig, root: &Path) -> Result<SynthFrames, DataError> {
    let frames = generate_frames(config);
    let velodyne = root.join("velodyne");
    let labels_dir = root.join("labels");
    std::fs::create_dir_all(&velodyne).map_err(|e| DataError::Io(velodyne.clone(), e))?;
    std::fs::create_dir_all(&labels_dir).map_err(|e| DataError::Io(labels_dir.clone(), e))?;

    for (i, cloud) in frames.clouds.iter().enumerate() {
        write_scan(&velodyne.join(format!("{i:06}.bin")), cloud)?;
        let mut raw = Vec::with_capacity(cloud.len());
        for (obj_idx, obj) in frames.objects.iter().enumerate() {
            let semantic = RAW_IDS[obj.class as usize] as u32;
            let instance = (obj_idx as u32 + 1) << 16;
            for _ in obj.point_range.0..obj.point_range.1 {
                raw.push(instance | semantic);
            }
        }
        write_raw_labels(&labels_dir.join(format!("{i:06}.label")), &raw)?;
    }
    write_poses(
        &root.join("poses.txt"),
        &vec![IDENTITY_POSE; config.frames],
    )?;
    let manifest = SynthManifest {
        config: config.clone(),
        class_names: class_names().iter().map(|s| s.to_string()).collect(),
        moving: moving_flags().to_vec(),
        raw_ids: RAW_IDS.to_vec(),
    };
    let manifest_path = root.join("manifest.json");
    std::fs::write(
        &manifest_path,
        serde_json::to_vec_pretty(&manifest).expect("manifest serializes"),
    )
    .map_err(|e| DataError::Io(manifest_path, e))?;
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SequenceDataset;

    fn noiseless(seed: u64) -> SynthSceneConfig {
        SynthSceneConfig {
            seed,
            noise_sigma: 0.0,
            frames: 4,
            points_per_object: 10,
            ..Default::default()
        }
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let a = generate_frames(&SynthSceneConfig::default());
        let b = generate_frames(&SynthSceneConfig::default());
        for (ca, cb) in a.clouds.iter().zip(&b.clouds) {
            assert_eq!(ca.positions, cb.positions);
            assert_eq!(ca.features, cb.features);
            assert_eq!(ca.labels, cb.labels);
        }
    }

    #[test]
    fn moving_centroids_advance_by_velocity() {
        let frames = generate_frames(&noiseless(3));
        for obj in &frames.objects {
            let centroid = |cloud: &PointCloud| {
                let (a, b) = obj.point_range;
                let n = (b - a) as f64;
                let mut c = [0.0; 3];
                for i in a..b {
                    for j in 0..3 {
                        c[j] += cloud.positions[(i, j)] / n;
                    }
                }
                c
            };
            for w in frames.clouds.windows(2) {
                let c0 = centroid(&w[0]);
                let c1 = centroid(&w[1]);
                for j in 0..3 {
                    assert!((c1[j] - c0[j] - obj.velocity[j]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn zero_velocity_makes_frames_identical() {
        let mut config = noiseless(7);
        config.velocity_range = (0.0, 0.0);
        let frames = generate_frames(&config);
        for cloud in &frames.clouds[1..] {
            assert_eq!(cloud.positions, frames.clouds[0].positions);
        }
    }

    #[test]
    fn static_objects_never_move() {
        let frames = generate_frames(&noiseless(11));
        for obj in frames.objects.iter().filter(|o| !is_moving(o.class)) {
            assert_eq!(obj.velocity, [0.0; 3]);
            let (a, b) = obj.point_range;
            for cloud in &frames.clouds[1..] {
                for i in a..b {
                    for j in 0..3 {
                        assert_eq!(
                            cloud.positions[(i, j)],
                            frames.clouds[0].positions[(i, j)]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn written_dataset_reads_back_with_remapped_labels() {
        let dir = tempfile::tempdir().unwrap();
        let config = noiseless(13);
        let frames = write_dataset(&config, dir.path()).unwrap();
        let ds = SequenceDataset::open(dir.path(), label_remap()).unwrap();
        assert_eq!(ds.len(), config.frames);
        let cloud = ds.load(0).unwrap();
        assert_eq!(cloud.len(), frames.clouds[0].len());
        assert_eq!(
            cloud.labels.as_deref().unwrap(),
            frames.clouds[0].labels.as_deref().unwrap()
        );
        let sample = ds.assemble(3, 4, 1, 0.6, true).unwrap().unwrap();
        assert_eq!(sample.clouds.len(), 4);
    }
}
