//! Acceptance gate: one test per acceptance criterion, each printing a
//! single pass/fail line. Run with `cargo test --test acceptance`.

use std::sync::Arc;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use latseg::autodiff::optim::{cosine_lr, AdamConfig, AdamState};
use latseg::autodiff::Graph;
use latseg::cloud::PointCloud;
use latseg::data::kitti::{
    read_labels, read_poses, read_scan, split_label, write_poses, write_raw_labels, write_scan,
    LabelRemap,
};
use latseg::data::synth::{self, SynthSceneConfig};
use latseg::fusion::{aflow_direction, aflow_fuse, align_states, restrict_to_previous, AFlowVars, TemporalState};
use latseg::lattice::SparseLattice;
use latseg::model::{
    forward_sequence, infer_step, training_step, FusionSpec, InferState, Model, ModelConfig,
};
use latseg::ops::{adjacency, deform_slice, distribute, vertex_centroids, Distribution};
use latseg::selfcheck;

fn report(ok: bool, line: &str) {
    if ok {
        println!("[PASS] {line}");
    } else {
        println!("[FAIL] {line}");
    }
    assert!(ok, "[FAIL] {line}");
}

fn toy_model(fusion: &str, channels: (usize, usize, usize), seed: u64, reflectance: bool) -> Model {
    let spec: FusionSpec = fusion.parse().expect("valid fusion spec");
    Model::new(
        spec,
        ModelConfig {
            channels,
            classes: synth::N_CLASSES,
            point_feature_dim: usize::from(reflectance),
            offset_hidden: 8,
            seed,
        },
    )
}

/// Synthetic frames scaled into lattice units, optionally without
/// reflectance.
fn scaled_frames(config: &SynthSceneConfig, sigma: f64, reflectance: bool) -> Vec<PointCloud> {
    let frames = synth::generate_frames(config);
    let inv = [1.0 / sigma; 3];
    frames
        .clouds
        .into_iter()
        .map(|mut c| {
            c.scale_positions(&inv);
            if !reflectance {
                c.drop_features();
            }
            c
        })
        .collect()
}

// Criterion 1: full-scale benchmark numbers are documented as reference
// targets only; the repository must say so rather than claim them.
#[test]
fn criterion_01_reference_targets_documented() {
    let readme = std::fs::read_to_string(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/../../README.md"
    ))
    .expect("workspace README exists");
    let ok = readme.contains("47.1") && readme.to_lowercase().contains("reference");
    report(
        ok,
        "criterion 1: full-scale benchmark numbers documented as reference targets only",
    );
}

// Criterion 2: every registered differentiable op passes 64-bit central
// finite-difference checks, max relative error < 1e-4, >= 5 fixtures each,
// under 2 minutes.
#[test]
fn criterion_02_gradient_suite() {
    let start = Instant::now();
    let reports = selfcheck::run_gradient_suite(&[1, 2, 3, 4, 5]);
    let elapsed = start.elapsed();
    let all_pass = reports.iter().all(|r| r.passed() && r.tolerance <= 1e-4);
    let coverage = reports.len() == selfcheck::REGISTERED_OP_COUNT * 5;
    let ok = all_pass && coverage && elapsed.as_secs() < 120;
    for r in reports.iter().filter(|r| !r.passed()) {
        eprintln!("  gradient check failed: {} ({:.3e})", r.name, r.max_rel_err);
    }
    report(
        ok,
        &format!(
            "criterion 2: gradient suite, {} ops x 5 fixtures in {:.1?}",
            selfcheck::REGISTERED_OP_COUNT,
            elapsed
        ),
    );
}

// Criterion 3: aflow_fuse matches a literal brute-force implementation of
// the flow weighting and update within 1e-6 on 100 random fixtures,
// including missing neighbors, with the 0.1 scalar initialization.
#[test]
fn criterion_03_aflow_oracle() {
    let mut worst = 0.0f64;
    for fixture in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(fixture * 7919 + 5);
        let mut lat = SparseLattice::with_default_sigma(3, 0);
        let n_points = 1 + (fixture as usize % 8);
        for _ in 0..n_points {
            let p = [
                rng.gen::<f64>() * 4.0,
                rng.gen::<f64>() * 4.0,
                rng.gen::<f64>() * 4.0,
            ];
            lat.enclosing_simplex(&p, true).unwrap();
        }
        let k = lat.len().min(30);
        let c = 1 + (fixture as usize % 8);
        let full = adjacency(&lat);
        // half the fixtures restrict to an earlier vertex count: missing
        // neighbors must be skipped entirely
        let prev_count = if fixture % 2 == 0 { k } else { k.max(2) / 2 + 1 };
        let adj = restrict_to_previous(&full[..k], prev_count);

        let x = Array2::from_shape_fn((k, c), |_| rng.gen::<f64>() * 2.0 - 1.0);
        let h = Array2::from_shape_fn((k, c), |_| rng.gen::<f64>() * 2.0 - 1.0);
        let w = Array2::from_shape_fn((2 * c, c), |_| rng.gen::<f64>() - 0.5);
        let b = Array2::from_shape_fn((1, c), |_| rng.gen::<f64>() - 0.5);
        let alpha = 0.1;
        let beta = 0.1;

        let mut g: Graph<f64> = Graph::new();
        let xv = g.input(x.clone());
        let hv = g.input(h.clone());
        let av = g.input(Array2::from_elem((1, 1), alpha));
        let bv = g.input(Array2::from_elem((1, 1), beta));
        let wv = g.input(w.clone());
        let biasv = g.input(b.clone());
        let params = AFlowVars { alpha: av, beta: bv, w: wv, b: biasv };
        let out = aflow_fuse(&mut g, &adj, hv, xv, &params).unwrap();
        let got = g.value(out).clone();

        // brute force: w_i = (alpha - min(dist, alpha)) * beta, summed over
        // surviving neighbors, then the learned update
        for v in 0..k {
            let mut l = vec![0.0f64; c];
            for &n in adj[v].iter() {
                let Some(i) = n else { continue };
                let dist: f64 = (0..c)
                    .map(|j| (x[(v, j)] - h[(i, j)]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let wi = (alpha - dist.min(alpha)) * beta;
                for (j, lj) in l.iter_mut().enumerate() {
                    *lj += h[(i, j)] * wi;
                }
            }
            for o in 0..c {
                let mut acc = b[(0, o)];
                for j in 0..c {
                    acc += x[(v, j)] * w[(j, o)];
                    acc += l[j] * w[(c + j, o)];
                }
                let expected = acc.max(0.0);
                worst = worst.max((got[(v, o)] - expected).abs());
            }
        }
    }
    report(
        worst <= 1e-6,
        &format!("criterion 3: flow-fusion oracle on 100 fixtures, worst abs diff {worst:.2e}"),
    );
}

// Criterion 4: distributing then slicing a constant field reproduces the
// constant within 1e-6 for 1000 random points.
#[test]
fn criterion_04_partition_of_unity() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut positions = Array2::zeros((1000, 3));
    for mut row in positions.rows_mut() {
        for v in row.iter_mut() {
            *v = rng.gen::<f64>() * 40.0 - 20.0;
        }
    }
    let cloud = PointCloud::new(positions, Array2::zeros((1000, 0))).unwrap();
    let mut lat = SparseLattice::with_default_sigma(3, 0);
    let dist: Distribution = distribute(&cloud, &mut lat).unwrap();
    let constant = 0.37f64;
    let mut g: Graph<f64> = Graph::new();
    let values = g.input(Array2::from_elem((lat.len(), 2), constant));
    let (sliced, missing) = deform_slice(&mut g, values, &dist.footprints, None).unwrap();
    let out = g.value(sliced);
    let worst = out
        .iter()
        .map(|v| (v - constant).abs())
        .fold(0.0f64, f64::max);
    report(
        worst <= 1e-6 && missing == 0,
        &format!("criterion 4: constant-field slice on 1000 points, worst abs diff {worst:.2e}"),
    );
}

// Criterion 5: over growing 4-timestep lattices, shared keys keep stable
// row indices, padded state rows are exactly zero, and vertex counts are
// monotone non-decreasing. 50 random sequences.
#[test]
fn criterion_05_temporal_alignment() {
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let mut lat = SparseLattice::with_default_sigma(3, 0);
        let mut key_rows: std::collections::HashMap<Vec<i32>, usize> = Default::default();
        let mut prev_count = 0usize;
        let mut g: Graph<f32> = Graph::new();
        let mut state: Option<TemporalState> = None;
        for _t in 0..4 {
            for _ in 0..4 {
                let p = [
                    rng.gen::<f64>() * 6.0,
                    rng.gen::<f64>() * 6.0,
                    rng.gen::<f64>() * 6.0,
                ];
                lat.enclosing_simplex(&p, true).unwrap();
            }
            let count = lat.len();
            assert!(count >= prev_count, "vertex count shrank");
            for row in 0..count {
                let key = lat.key(row).coords().to_vec();
                let seen = key_rows.entry(key).or_insert(row);
                assert_eq!(*seen, row, "shared key changed row index");
            }
            if let Some(prev) = &state {
                let aligned = align_states(&mut g, prev, count).unwrap();
                let hidden = g.value(aligned.hidden);
                assert_eq!(hidden.nrows(), count);
                for row in prev_count..count {
                    assert!(
                        hidden.row(row).iter().all(|&v| v == 0.0),
                        "padded row not exactly zero"
                    );
                }
            }
            let written = g.input(Array2::from_shape_fn((count, 3), |_| rng.gen::<f32>()));
            state = Some(TemporalState::new(written, count));
            prev_count = count;
        }
    }
    report(
        true,
        "criterion 5: temporal alignment on 50 growing 4-timestep sequences",
    );
}

// Criterion 6: chained infer_step equals forward_sequence within 1e-5 for
// n in 1..=5.
#[test]
fn criterion_06_recursive_equivalence() {
    let config = SynthSceneConfig {
        frames: 5,
        seed: 11,
        points_per_object: 8,
        ..SynthSceneConfig::default()
    };
    let clouds = scaled_frames(&config, 0.6, true);
    let model = toy_model("GRU-LSTM-AFlow-GRU", (4, 6, 8), 3, true);
    let mut worst = 0.0f32;
    for n in 1..=5 {
        let seq = &clouds[..n];
        let taped = forward_sequence(&model, seq).unwrap();
        let batch = taped.graph.value(taped.logits).clone();
        let mut state = InferState::new(7);
        let mut last = None;
        for cloud in seq {
            last = Some(infer_step(&model, &mut state, cloud, 7).unwrap());
        }
        let rec = last.unwrap().logits;
        assert_eq!(batch.dim(), rec.dim());
        let diff = batch
            .iter()
            .zip(rec.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        worst = worst.max(diff);
    }
    report(
        worst <= 1e-5,
        &format!("criterion 6: recursive inference equals batch for n in 1..=5, worst diff {worst:.2e}"),
    );
}

fn binary_moving_accuracy(model: &Model, scenes: &[Vec<PointCloud>], n: usize) -> f64 {
    let mut correct = 0usize;
    let mut total = 0usize;
    for clouds in scenes {
        for t in (n - 1)..clouds.len() {
            let seq = &clouds[t + 1 - n..=t];
            let taped = forward_sequence(model, seq).unwrap();
            let logits = taped.graph.value(taped.logits);
            let labels = seq.last().unwrap().labels.as_ref().unwrap();
            for (row, &truth) in logits.rows().into_iter().zip(labels) {
                if truth < 0 {
                    continue;
                }
                let pred = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map_or(0, |(i, _)| i as i64);
                correct += usize::from(synth::is_moving(pred) == synth::is_moving(truth));
                total += 1;
            }
        }
    }
    correct as f64 / total as f64
}

/// One rigid draw per sample: z-rotation, optional x-mirror, xy shift, and
/// per-point jitter. Keeps the static model from memorizing layouts.
fn augment_sample(clouds: &mut [PointCloud], rng: &mut ChaCha8Rng) {
    let angle = rng.gen::<f64>() * std::f64::consts::TAU;
    let (s, c) = angle.sin_cos();
    let mirror = if rng.gen::<bool>() { -1.0 } else { 1.0 };
    let tx = (rng.gen::<f64>() - 0.5) * 4.0;
    let ty = (rng.gen::<f64>() - 0.5) * 4.0;
    for cloud in clouds {
        for mut row in cloud.positions.rows_mut() {
            let x = row[0] * mirror;
            let y = row[1];
            row[0] = c * x - s * y + tx;
            row[1] = s * x + c * y + ty;
            for v in row.iter_mut() {
                *v += (rng.gen::<f64>() - 0.5) * 0.04;
            }
        }
    }
}

fn train_scenes(
    model: &mut Model,
    scenes: &[Vec<PointCloud>],
    n: usize,
    epochs: usize,
) {
    let mut opt = AdamState::new(model.params.arrays());
    let opt_config = AdamConfig::default();
    let mut step = 0usize;
    let steps_per_epoch: usize = scenes.iter().map(|c| c.len() - (n - 1)).sum();
    for _epoch in 0..epochs {
        for clouds in scenes {
            for t in (n - 1)..clouds.len() {
                let mut seq: Vec<PointCloud> = clouds[t + 1 - n..=t].to_vec();
                let mut arng = ChaCha8Rng::seed_from_u64(step as u64 ^ 0xa6a6);
                augment_sample(&mut seq, &mut arng);
                let labels = seq.last().unwrap().labels.clone().unwrap();
                let progress = step as f64 / steps_per_epoch as f64;
                let lr = cosine_lr(progress, opt_config.lr_max, opt_config.lr_min, 10.0);
                training_step(model, &seq, &labels, -1, &mut opt, lr, &opt_config)
                    .unwrap();
                step += 1;
            }
        }
    }
}

// Criterion 7: with temporal fusion a toy model separates moving from
// static classes on held-out synthetic scenes (>= 0.90 binary accuracy);
// without fusion it cannot (<= 0.60). Positions only, so the static model
// cannot memorize appearance.
#[test]
fn criterion_07_moving_static_separation() {
    let start = Instant::now();
    let sigma = 0.7;
    let n = 4;
    let scene = |seed| SynthSceneConfig {
        frames: 7,
        seed,
        points_per_object: 16,
        wrap_moving: true,
        n_box_moving: 5,
        n_sphere_moving: 5,
        ..SynthSceneConfig::default()
    };
    let train: Vec<Vec<PointCloud>> = [21u64, 22, 23, 24, 25, 26, 27, 28]
        .iter()
        .map(|&s| scaled_frames(&scene(s), sigma, false))
        .collect();
    let test: Vec<Vec<PointCloud>> = [91u64, 92]
        .iter()
        .map(|&s| scaled_frames(&scene(s), sigma, false))
        .collect();

    let mut fused = toy_model("GRU-GRU-AFlow-GRU", (12, 16, 24), 5, false);
    train_scenes(&mut fused, &train, n, 90);
    let fused_acc = binary_moving_accuracy(&fused, &test, n);

    let mut plain = toy_model("/-/-/-/", (12, 16, 24), 5, false);
    train_scenes(&mut plain, &train, n, 90);
    let plain_acc = binary_moving_accuracy(&plain, &test, n);

    let elapsed = start.elapsed();
    let ok = fused_acc >= 0.90 && plain_acc <= 0.60 && elapsed.as_secs() < 900;
    report(
        ok,
        &format!(
            "criterion 7: moving/static accuracy fused {fused_acc:.3} (>= 0.90) vs no-fusion {plain_acc:.3} (<= 0.60) in {elapsed:.1?}"
        ),
    );
}

// Criterion 8: on a rigid object translating at constant velocity, the mean
// flow direction opposes the motion (cosine <= -0.5) in >= 8 of 10 seeds.
#[test]
fn criterion_08_flow_directionality() {
    let mut successes = 0;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 400);
        // random horizontal velocity, 1.5 lattice units per frame
        let angle = rng.gen::<f64>() * std::f64::consts::TAU;
        let vel = [1.5 * angle.cos(), 1.5 * angle.sin(), 0.0];
        let make_frame = |offset: &[f64; 3], rng: &mut ChaCha8Rng| {
            let m = 80;
            let mut pos = Array2::zeros((m, 3));
            for mut row in pos.rows_mut() {
                row[0] = offset[0] + rng.gen::<f64>() * 2.0;
                row[1] = offset[1] + rng.gen::<f64>() * 2.0;
                row[2] = offset[2] + rng.gen::<f64>() * 2.0;
            }
            PointCloud::new(pos, Array2::zeros((m, 0))).unwrap()
        };
        let frame1 = make_frame(&[0.0, 0.0, 0.0], &mut rng);
        let frame2 = make_frame(&vel, &mut rng);

        let mut lat = SparseLattice::with_default_sigma(3, 0);
        let dist1 = distribute(&frame1, &mut lat).unwrap();
        let k1 = lat.len();
        let h_prev = occupancy_features(&dist1, &frame1, &lat, k1);
        let dist2 = distribute(&frame2, &mut lat).unwrap();
        let k2 = lat.len();
        let x = occupancy_features(&dist2, &frame2, &lat, k2);

        let full = adjacency(&lat);
        let adj = restrict_to_previous(&full, k1);
        let centroids = vertex_centroids(&dist2, &frame2, k2);
        let dirs = aflow_direction(&adj, &h_prev, &x, &centroids);

        let mut mean = [0.0f64; 3];
        let mut count = 0;
        for (v, dir) in dirs.iter().enumerate() {
            if dist2.bags[v].is_empty() || dir.iter().all(|&d| d == 0.0) {
                continue;
            }
            for (m, d) in mean.iter_mut().zip(dir) {
                *m += d;
            }
            count += 1;
        }
        if count == 0 {
            continue;
        }
        let dot: f64 = mean.iter().zip(&vel).map(|(a, b)| a * b).sum();
        let nm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nv = vel.iter().map(|v| v * v).sum::<f64>().sqrt();
        let cos = dot / (nm * nv);
        if cos <= -0.5 {
            successes += 1;
        }
    }
    report(
        successes >= 8,
        &format!("criterion 8: flow arrows oppose motion in {successes}/10 seeds (need >= 8)"),
    );
}

/// Per-vertex occupancy features: point count and mean offset from the
/// vertex position. Vertices untouched by the frame get zero rows.
fn occupancy_features(
    dist: &Distribution,
    cloud: &PointCloud,
    lat: &SparseLattice,
    k: usize,
) -> Array2<f32> {
    let mut out = Array2::zeros((k, 4));
    for (v, bag) in dist.bags.iter().enumerate().take(k) {
        if bag.is_empty() {
            continue;
        }
        let vp = lat.input_position(v);
        out[(v, 0)] = bag.len() as f32;
        for &p in bag {
            for j in 0..3 {
                out[(v, 1 + j)] += (cloud.positions[(p, j)] - vp[j]) as f32 / bag.len() as f32;
            }
        }
    }
    out
}

// Criterion 9: the reflectance toggle changes the per-point descriptor and
// both modes train, asserted by two short smoke runs.
#[test]
fn criterion_09_reflectance_ablation() {
    let config = SynthSceneConfig {
        frames: 3,
        seed: 31,
        points_per_object: 8,
        ..SynthSceneConfig::default()
    };
    let mut results = Vec::new();
    for reflectance in [true, false] {
        let clouds = scaled_frames(&config, 0.6, reflectance);
        let mut model = toy_model("GRU-GRU-AFlow-GRU", (4, 6, 8), 9, reflectance);
        let in_dim = model.params.get("pointnet.w").nrows();
        let labels = clouds.last().unwrap().labels.clone().unwrap();
        let mut opt = AdamState::new(model.params.arrays());
        let opt_config = AdamConfig::default();
        let mut first = None;
        let mut last = None;
        for step in 0..15 {
            let loss = training_step(
                &mut model,
                &clouds,
                &labels,
                -1,
                &mut opt,
                cosine_lr(step as f64, opt_config.lr_max, opt_config.lr_min, opt_config.restart_period),
                &opt_config,
            )
            .unwrap()
            .unwrap();
            if first.is_none() {
                first = Some(loss);
            }
            last = Some(loss);
        }
        results.push((in_dim, first.unwrap(), last.unwrap()));
    }
    let (dim_with, first_with, last_with) = results[0];
    let (dim_without, first_without, last_without) = results[1];
    let ok = dim_with == 4
        && dim_without == 3
        && last_with < first_with
        && last_without < first_without
        && last_with.is_finite()
        && last_without.is_finite();
    report(
        ok,
        &format!(
            "criterion 9: reflectance toggle changes descriptor ({dim_with} vs {dim_without} dims), both modes train"
        ),
    );
}

// Criterion 10: binary formats round-trip bit-exactly against independently
// written fixtures; the label word splits into semantic and instance parts.
#[test]
fn criterion_10_format_fidelity() {
    let dir = tempfile::tempdir().unwrap();

    // scan fixture written byte-by-byte: 2 points, 16 bytes each
    let mut scan_bytes = Vec::new();
    for v in [1.5f32, -2.0, 0.25, 0.9, -10.0, 3.5, 7.0, 0.1] {
        scan_bytes.extend_from_slice(&v.to_le_bytes());
    }
    let scan_path = dir.path().join("000000.bin");
    std::fs::write(&scan_path, &scan_bytes).unwrap();
    let cloud = read_scan(&scan_path).unwrap();
    let scan_values_ok = cloud.len() == 2
        && cloud.positions[(0, 0)] == 1.5
        && cloud.positions[(1, 2)] == 7.0
        && cloud.features[(1, 0)] == 0.1f32;
    let rewritten = dir.path().join("rewrite.bin");
    write_scan(&rewritten, &cloud).unwrap();
    let scan_roundtrip = std::fs::read(&rewritten).unwrap() == scan_bytes;

    // label fixture: semantic in the low 16 bits, instance in the high 16
    let raw_labels = [0x0005_000Au32, 0x0000_00FDu32, 0x0001_0000u32];
    let label_path = dir.path().join("000000.label");
    let mut label_bytes = Vec::new();
    for v in raw_labels {
        label_bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(&label_path, &label_bytes).unwrap();
    let split_ok = split_label(raw_labels[0]) == (0x000A, 0x0005)
        && split_label(raw_labels[2]) == (0x0000, 0x0001);
    let remapped = read_labels(&label_path, &synth::label_remap()).unwrap();
    // raw 10 -> class 0, raw 253 -> class 5, raw 0 -> ignore
    let remap_ok = remapped == vec![0, 5, -1];
    let raw_ignore = read_labels(&label_path, &LabelRemap::identity(-1)).unwrap();
    let identity_ok = raw_ignore == vec![0x000A, 0x00FD, -1];
    let rewritten_labels = dir.path().join("rewrite.label");
    write_raw_labels(&rewritten_labels, &raw_labels).unwrap();
    let label_roundtrip = std::fs::read(&rewritten_labels).unwrap() == label_bytes;

    // pose round trip through the 3x4 row-major text format
    let poses = vec![
        latseg::cloud::IDENTITY_POSE,
        [
            [0.0, -1.0, 0.0, 2.5],
            [1.0, 0.0, 0.0, -3.0],
            [0.0, 0.0, 1.0, 0.125],
            [0.0, 0.0, 0.0, 1.0],
        ],
    ];
    let pose_path = dir.path().join("poses.txt");
    write_poses(&pose_path, &poses).unwrap();
    let reread = read_poses(&pose_path).unwrap();
    let poses_ok = reread == poses;

    report(
        scan_values_ok && scan_roundtrip && split_ok && remap_ok && identity_ok && label_roundtrip && poses_ok,
        "criterion 10: scan/label/pose formats round-trip bit-exactly",
    );
}

// Criterion 11: loss on one fixed 3-cloud sequence drops below 0.1 within
// 200 steps under the documented optimizer settings.
#[test]
fn criterion_11_overfit_sanity() {
    let config = SynthSceneConfig {
        frames: 3,
        seed: 77,
        points_per_object: 8,
        ..SynthSceneConfig::default()
    };
    let clouds = scaled_frames(&config, 0.6, true);
    let labels = clouds.last().unwrap().labels.clone().unwrap();
    let mut model = toy_model("GRU-GRU-AFlow-GRU", (8, 12, 16), 1, true);
    let mut opt = AdamState::new(model.params.arrays());
    let opt_config = AdamConfig::default();
    let mut best = f64::INFINITY;
    let mut steps_taken = 0;
    for step in 0..200 {
        let lr = cosine_lr(
            step as f64,
            opt_config.lr_max,
            opt_config.lr_min,
            opt_config.restart_period,
        );
        let loss = training_step(&mut model, &clouds, &labels, -1, &mut opt, lr, &opt_config)
            .unwrap()
            .unwrap();
        steps_taken = step + 1;
        if loss < best {
            best = loss;
        }
        if best < 0.1 {
            break;
        }
    }
    report(
        best < 0.1,
        &format!("criterion 11: overfit loss {best:.4} (< 0.1) after {steps_taken} steps"),
    );
}
