//! Self-check registry: one seeded finite-difference gradient check per
//! differentiable operation, plus a lattice invariant suite. The registry is
//! the single source of truth for "every op has a gradient test".

use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::gradcheck::{check, CheckReport};
use crate::autodiff::{Graph, Var};
use crate::fusion::{aflow_fuse, gru_fuse, lstm_fuse, AFlowVars, GruVars, LstmVars};
use crate::lattice::SparseLattice;
use crate::ops::{
    adjacency, coarsen_keys, deform_slice, downsample_values, lattice_convolution,
    pointnet_aggregate, resnet_block, upsample, ConvVars, MlpVars,
};

pub const GRAD_TOLERANCE: f64 = 1e-4;

/// One registered differentiable operation.
pub struct RegisteredOp {
    pub name: &'static str,
    pub run: fn(u64) -> CheckReport,
}

fn rng_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| (rng.gen::<f64>() * 2.0 - 1.0) * scale)
}

/// Values bounded away from zero, for kinked nonlinearities.
fn rng_mat_offzero(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| {
        let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        sign * (0.1 + rng.gen::<f64>() * 0.7)
    })
}

fn sq_sum(g: &mut Graph<f64>, v: Var) -> Var {
    let s = g.mul(v, v);
    g.sum_all(s)
}

fn small_lattice(seed: u64, n_points: usize) -> SparseLattice {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lat = SparseLattice::with_default_sigma(3, 0);
    for _ in 0..n_points {
        let p = [
            rng.gen::<f64>() * 3.0,
            rng.gen::<f64>() * 3.0,
            rng.gen::<f64>() * 3.0,
        ];
        lat.enclosing_simplex(&p, true).unwrap();
    }
    lat
}

fn check_add(seed: u64) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = rng_mat(&mut rng, 3, 2, 1.0);
    let b = rng_mat(&mut rng, 3, 2, 1.0);
    check("add", &[a, b], |g, v| {
        let s = g.add(v[0], v[1]);
        sq_sum(g, s)
    }, GRAD_TOLERANCE)
}

fn check_sub(seed: u64) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = rng_mat(&mut rng, 3, 2, 1.0);
    let b = rng_mat(&mut rng, 3, 2, 1.0);
    check("sub", &[a, b], |g, v| {
        let s = g.sub(v[0], v[1]);
        sq_sum(g, s)
    }, GRAD_TOLERANCE)
}

fn check_mul(seed: u64) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = rng_mat(&mut rng, 2, 4, 1.0);
    let b = rng_mat(&mut rng, 2, 4, 1.0);
    check("mul", &[a, b], |g, v| {
        let s = g.mul(v[0], v[1]);
        g.sum_all(s)
    }, GRAD_TOLERANCE)
}

fn check_scale(seed: u64) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = rng_mat(&mut rng, 3, 3, 1.0);
    check("scale", &[a], |g, v| {
        let s = g.scale(v[0], 1.7);
        sq_sum(g, s)
    }, GRAD_TOLERANCE)
}

fn check_matmul(seed: u64) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = rng_mat(&mut rng, 3, 4, 1.0);
    let b = rng_mat(&mut rng, 4, 2, 1.0);
    check("matmul", &[a, b], |g, v| {
        let s = g.matmul(v[0], v[1]);
        sq_sum(g, s)
    }, GRAD_TOLERANCE)
}

fn check_add_bias(seed: u64) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = rng_mat(&mut rng, 4, 3, 1.0);
    let b = rng_mat(&mut rng, 1, 3, 1.0);
    check("add_bias", &[a, b], |g, v| {
        let s = g.add_bias(v[0], v[1]);
        sq_sum(g, s)
    }, GRAD_TOLERANCE)
}

fn check_relu(seed: u64) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = rng_mat_offzero(&mut rng, 4, 3);
    check("relu", &[a], |g, v| {
        let s = g.relu(v[0]);
        sq_sum(g, s)
    }, GRAD_TOLERANCE)
}

fn check_sigmoid(seed: u64) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = rng_mat(&mut rng, 3, 3, 2.0);
    check("sigmoid", &[a], |g, v| {
        let s = g.sigmoid(v[0]);
        sq_sum(g, s)
    }, GRAD_TOLERANCE)
}

fn check_tanh(seed: u64) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = rng_mat(&mut rng, 3, 3, 2.0);
    check("tanh", &[a], |g, v| {
        let s = g.tanh(v[0]);
        sq_sum(g, s)
    }, GRAD_TOLERANCE)
}

fn check_concat_cols(seed: u64) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = rng_mat(&mut rng, 3, 2, 1.0);
    let b = rng_mat(&mut rng, 3, 4, 1.0);
    check("concat_cols", &[a, b], |g, v| {
        let s = g.concat_cols(v[0], v[1]);
        sq_sum(g, s)
    }, GRAD_TOLERANCE)
}

fn check_sum_all(seed: u64) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = rng_mat(&mut rng, 3, 3, 1.0);
    check("sum_all", &[a], |g, v| g.sum_all(v[0]), GRAD_TOLERANCE)
}

fn check_gather_rows(seed: u64) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = rng_mat(&mut rng, 5, 3, 1.0);
    let idx = Arc::new(vec![0usize, 2, 2, 4, 1]);
    check("gather_rows", &[a], move |g, v| {
        let s = g.gather_rows(v[0], idx.clone());
        sq_sum(g, s)
    }, GRAD_TOLERANCE)
}

fn check_pad_rows(seed: u64) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = rng_mat(&mut rng, 3, 2, 1.0);
    check("pad_rows", &[a], |g, v| {
        let s = g.pad_rows(v[0], 6);
        sq_sum(g, s)
    }, GRAD_TOLERANCE)
}

fn check_cross_entropy(seed: u64) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = rng_mat(&mut rng, 5, 4, 1.5);
    let labels = Arc::new(vec![0i64, 3, -1, 2, 1]);
    check("cross_entropy", &[logits], move |g, v| {
        g.cross_entropy(v[0], labels.clone(), -1).unwrap()
    }, GRAD_TOLERANCE)
}

fn check_group_max(seed: u64) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = rng_mat(&mut rng, 7, 3, 1.0);
    // groups of 3, 0 (empty), 2, 2 records
    let offsets = Arc::new(vec![0usize, 3, 3, 5, 7]);
    check("group_max", &[records], move |g, v| {
        let s = g.group_max(v[0], offsets.clone());
        sq_sum(g, s)
    }, GRAD_TOLERANCE)
}

fn check_group_mean(seed: u64) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rng_mat(&mut rng, 6, 3, 1.0);
    let groups = Arc::new(vec![0usize, 1, 0, 2, 1, 0]);
    check("group_mean", &[x], move |g, v| {
        let s = g.group_mean(v[0], groups.clone(), 3);
        sq_sum(g, s)
    }, GRAD_TOLERANCE)
}

fn check_simplex_gather(seed: u64) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = rng_mat(&mut rng, 5, 2, 1.0);
    let fp: Arc<Vec<Vec<(Option<usize>, f64)>>> = Arc::new(vec![
        vec![(Some(0), 0.4), (Some(2), 0.3), (None, 0.2), (Some(4), 0.1)],
        vec![(Some(1), 0.7), (Some(1), 0.1), (Some(3), 0.1), (Some(0), 0.1)],
    ]);
    check("simplex_gather", &[values], move |g, v| {
        let s = g.simplex_gather(v[0], fp.clone());
        sq_sum(g, s)
    }, GRAD_TOLERANCE)
}

fn check_simplex_gather_weighted(seed: u64) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = rng_mat(&mut rng, 5, 2, 1.0);
    let weights = rng_mat(&mut rng, 2, 4, 0.5);
    let corners: Arc<Vec<Vec<Option<usize>>>> = Arc::new(vec![
        vec![Some(0), Some(2), None, Some(4)],
        vec![Some(1), Some(1), Some(3), Some(0)],
    ]);
    check("simplex_gather_weighted", &[values, weights], move |g, v| {
        let s = g.simplex_gather_weighted(v[0], v[1], corners.clone());
        sq_sum(g, s)
    }, GRAD_TOLERANCE)
}

fn check_gather_corners(seed: u64) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = rng_mat(&mut rng, 4, 2, 1.0);
    let corners: Arc<Vec<Vec<Option<usize>>>> = Arc::new(vec![
        vec![Some(3), None, Some(0), Some(1)],
        vec![Some(2), Some(2), Some(1), None],
    ]);
    check("gather_corners", &[values], move |g, v| {
        let s = g.gather_corners(v[0], corners.clone());
        sq_sum(g, s)
    }, GRAD_TOLERANCE)
}

fn check_lattice_conv(seed: u64) -> CheckReport {
    let lat = small_lattice(seed, 4);
    let adj = adjacency(&lat);
    let k = lat.len();
    let taps = adj[0].len() + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5bd1);
    let x = rng_mat(&mut rng, k, 2, 1.0);
    let w = rng_mat(&mut rng, taps * 2, 3, 0.5);
    let b = rng_mat(&mut rng, 1, 3, 0.5);
    check("lattice_conv", &[x, w, b], move |g, v| {
        let s = g.lattice_conv(v[0], v[1], v[2], adj.clone());
        sq_sum(g, s)
    }, GRAD_TOLERANCE)
}

fn check_aflow_gather(seed: u64) -> CheckReport {
    // distances must stay away from the clamp point |dist - alpha| > 1e-3
    // and from the dist = 0 kink; rejected fixtures redraw
    for attempt in 0..100 {
        let lat = small_lattice(seed.wrapping_add(attempt * 977), 5);
        let adj = adjacency(&lat);
        let k = lat.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (attempt * 31) ^ 0x9e37);
        let x = rng_mat(&mut rng, k, 3, 0.25);
        let h = rng_mat(&mut rng, k, 3, 0.25);
        let alpha = Array2::from_elem((1, 1), 0.3);
        let beta = Array2::from_elem((1, 1), 0.2);
        let mut dists = Vec::new();
        for v in 0..k {
            for &i in adj[v].iter().flatten() {
                let d: f64 = (0..3)
                    .map(|j| (x[(v, j)] - h[(i, j)]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                dists.push(d);
            }
        }
        // both branches of the clamp must be exercised, away from the kink
        let ok = dists.iter().all(|&d| (d - 0.3).abs() > 2e-3 && d > 1e-3)
            && dists.iter().any(|&d| d < 0.3);
        if !ok {
            continue;
        }
        let adj2 = adj.clone();
        return check("aflow_gather", &[x, h, alpha, beta], move |g, v| {
            let s = g.aflow_gather(v[0], v[1], v[2], v[3], adj2.clone());
            sq_sum(g, s)
        }, GRAD_TOLERANCE);
    }
    panic!("aflow_gather: no fixture away from the clamp point after 100 draws");
}

fn check_pointnet_aggregate(seed: u64) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = rng_mat(&mut rng, 6, 3, 1.0);
    let w = rng_mat(&mut rng, 3, 4, 0.7);
    let b = rng_mat(&mut rng, 1, 4, 0.5);
    let offsets = Arc::new(vec![0usize, 2, 5, 6]);
    check("pointnet_aggregate", &[records, w, b], move |g, v| {
        let s = pointnet_aggregate(g, v[0], offsets.clone(), v[1], v[2]).unwrap();
        sq_sum(g, s)
    }, GRAD_TOLERANCE)
}

fn check_lattice_convolution_preact(seed: u64) -> CheckReport {
    let lat = small_lattice(seed, 4);
    let adj = adjacency(&lat);
    let k = lat.len();
    let taps = adj[0].len() + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1234);
    let x = rng_mat_offzero(&mut rng, k, 2);
    let w = rng_mat(&mut rng, taps * 2, 2, 0.5);
    let b = rng_mat(&mut rng, 1, 2, 0.5);
    check("lattice_convolution_preact", &[x, w, b], move |g, v| {
        let s = lattice_convolution(g, &adj, v[0], v[1], v[2], true).unwrap();
        sq_sum(g, s)
    }, GRAD_TOLERANCE)
}

fn check_resnet_block(seed: u64) -> CheckReport {
    let lat = small_lattice(seed, 3);
    let adj = adjacency(&lat);
    let k = lat.len();
    let taps = adj[0].len() + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let x = rng_mat_offzero(&mut rng, k, 2);
    let w1 = rng_mat(&mut rng, taps * 2, 2, 0.3);
    let b1 = rng_mat(&mut rng, 1, 2, 0.3);
    let w2 = rng_mat(&mut rng, taps * 2, 2, 0.3);
    let b2 = rng_mat(&mut rng, 1, 2, 0.3);
    check("resnet_block", &[x, w1, b1, w2, b2], move |g, v| {
        let c1 = ConvVars { weights: v[1], bias: v[2] };
        let c2 = ConvVars { weights: v[3], bias: v[4] };
        let s = resnet_block(g, &adj, v[0], c1, c2).unwrap();
        sq_sum(g, s)
    }, GRAD_TOLERANCE)
}

fn check_downsample(seed: u64) -> CheckReport {
    let fine = small_lattice(seed, 6);
    let mut coarse = SparseLattice::with_default_sigma(3, 0);
    let groups = Arc::new(coarsen_keys(&fine, &mut coarse));
    let n = coarse.len();
    let k = fine.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd0d0);
    let x = rng_mat(&mut rng, k, 2, 1.0);
    let w = rng_mat(&mut rng, 2, 3, 0.7);
    let b = rng_mat(&mut rng, 1, 3, 0.5);
    check("downsample_values", &[x, w, b], move |g, v| {
        let s = downsample_values(g, groups.clone(), n, v[0], v[1], v[2]).unwrap();
        sq_sum(g, s)
    }, GRAD_TOLERANCE)
}

fn check_upsample(seed: u64) -> CheckReport {
    let fine = small_lattice(seed, 6);
    let mut coarse = SparseLattice::with_default_sigma(3, 0);
    coarsen_keys(&fine, &mut coarse);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabba);
    let cx = rng_mat(&mut rng, coarse.len(), 2, 1.0);
    let fine_keys: Vec<_> = fine.keys().to_vec();
    check("upsample", &[cx], move |g, v| {
        let s = upsample(g, &coarse, &fine_keys, v[0]);
        sq_sum(g, s)
    }, GRAD_TOLERANCE)
}

fn check_deform_slice(seed: u64) -> CheckReport {
    let mut lat = small_lattice(seed, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xdef0);
    // query footprints partly off-lattice: no inserts allowed
    let mut fps = Vec::new();
    for _ in 0..3 {
        let p = [
            rng.gen::<f64>() * 3.5,
            rng.gen::<f64>() * 3.5,
            rng.gen::<f64>() * 3.5,
        ];
        fps.push(lat.enclosing_simplex(&p, false).unwrap());
    }
    let k = lat.len();
    let c = 2;
    let hidden = 3;
    let x = rng_mat(&mut rng, k, c, 1.0);
    let w1 = rng_mat(&mut rng, 4 * c, hidden, 0.4);
    let b1 = rng_mat_offzero(&mut rng, 1, hidden);
    let w2 = rng_mat(&mut rng, hidden, 4, 0.4);
    let b2 = rng_mat(&mut rng, 1, 4, 0.2);
    check("deform_slice", &[x, w1, b1, w2, b2], move |g, v| {
        let net = MlpVars { w1: v[1], b1: v[2], w2: v[3], b2: v[4] };
        let (s, _) = deform_slice(g, v[0], &fps, Some(&net)).unwrap();
        sq_sum(g, s)
    }, GRAD_TOLERANCE)
}

fn check_gru_fuse(seed: u64) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = 2;
    let x = rng_mat(&mut rng, 3, c, 1.0);
    let h = rng_mat(&mut rng, 3, c, 1.0);
    let wz = rng_mat(&mut rng, 2 * c, c, 0.6);
    let bz = rng_mat(&mut rng, 1, c, 0.3);
    let wr = rng_mat(&mut rng, 2 * c, c, 0.6);
    let br = rng_mat(&mut rng, 1, c, 0.3);
    let wn = rng_mat(&mut rng, 2 * c, c, 0.6);
    let bn = rng_mat(&mut rng, 1, c, 0.3);
    check("gru_fuse", &[x, h, wz, bz, wr, br, wn, bn], move |g, v| {
        let p = GruVars { w_z: v[2], b_z: v[3], w_r: v[4], b_r: v[5], w_n: v[6], b_n: v[7] };
        let s = gru_fuse(g, v[1], v[0], &p).unwrap();
        sq_sum(g, s)
    }, GRAD_TOLERANCE)
}

fn check_lstm_fuse(seed: u64) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = 2;
    let x = rng_mat(&mut rng, 3, c, 1.0);
    let h = rng_mat(&mut rng, 3, c, 1.0);
    let cs = rng_mat(&mut rng, 3, c, 1.0);
    let mut mats = vec![x, h, cs];
    for _ in 0..4 {
        mats.push(rng_mat(&mut rng, 2 * c, c, 0.6));
        mats.push(rng_mat(&mut rng, 1, c, 0.3));
    }
    check("lstm_fuse", &mats, move |g, v| {
        let p = LstmVars {
            w_i: v[3], b_i: v[4], w_f: v[5], b_f: v[6],
            w_o: v[7], b_o: v[8], w_g: v[9], b_g: v[10],
        };
        let (hn, cn) = lstm_fuse(g, v[1], v[2], v[0], &p).unwrap();
        let a = sq_sum(g, hn);
        let b = sq_sum(g, cn);
        g.add(a, b)
    }, GRAD_TOLERANCE)
}

fn check_aflow_fuse(seed: u64) -> CheckReport {
    for attempt in 0..100 {
        let lat = small_lattice(seed.wrapping_add(attempt * 977), 5);
        let adj = adjacency(&lat);
        let k = lat.len();
        let c = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (attempt * 63) ^ 0xaf70);
        let x = rng_mat(&mut rng, k, c, 0.25);
        let h = rng_mat(&mut rng, k, c, 0.25);
        let mut dists = Vec::new();
        for v in 0..k {
            for &i in adj[v].iter().flatten() {
                let d: f64 = (0..c)
                    .map(|j| (x[(v, j)] - h[(i, j)]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                dists.push(d);
            }
        }
        let ok = dists.iter().all(|&d| (d - 0.3).abs() > 2e-3 && d > 1e-3)
            && dists.iter().any(|&d| d < 0.3);
        if !ok {
            continue;
        }
        let alpha = Array2::from_elem((1, 1), 0.3);
        let beta = Array2::from_elem((1, 1), 0.2);
        let w = rng_mat(&mut rng, 2 * c, c, 0.6);
        let b = rng_mat_offzero(&mut rng, 1, c);
        let adj2 = adj.clone();
        return check("aflow_fuse", &[x, h, alpha, beta, w, b], move |g, v| {
            let p = AFlowVars { alpha: v[2], beta: v[3], w: v[4], b: v[5] };
            let s = aflow_fuse(g, &adj2, v[1], v[0], &p).unwrap();
            sq_sum(g, s)
        }, GRAD_TOLERANCE);
    }
    panic!("aflow_fuse: no fixture away from the clamp point after 100 draws");
}

/// Every differentiable operation, primitive and composite. Adding an op to
/// the library requires adding it here; the count is asserted in tests.
pub fn registry() -> Vec<RegisteredOp> {
    vec![
        RegisteredOp { name: "add", run: check_add },
        RegisteredOp { name: "sub", run: check_sub },
        RegisteredOp { name: "mul", run: check_mul },
        RegisteredOp { name: "scale", run: check_scale },
        RegisteredOp { name: "matmul", run: check_matmul },
        RegisteredOp { name: "add_bias", run: check_add_bias },
        RegisteredOp { name: "relu", run: check_relu },
        RegisteredOp { name: "sigmoid", run: check_sigmoid },
        RegisteredOp { name: "tanh", run: check_tanh },
        RegisteredOp { name: "concat_cols", run: check_concat_cols },
        RegisteredOp { name: "sum_all", run: check_sum_all },
        RegisteredOp { name: "gather_rows", run: check_gather_rows },
        RegisteredOp { name: "pad_rows", run: check_pad_rows },
        RegisteredOp { name: "cross_entropy", run: check_cross_entropy },
        RegisteredOp { name: "group_max", run: check_group_max },
        RegisteredOp { name: "group_mean", run: check_group_mean },
        RegisteredOp { name: "simplex_gather", run: check_simplex_gather },
        RegisteredOp { name: "simplex_gather_weighted", run: check_simplex_gather_weighted },
        RegisteredOp { name: "gather_corners", run: check_gather_corners },
        RegisteredOp { name: "lattice_conv", run: check_lattice_conv },
        RegisteredOp { name: "aflow_gather", run: check_aflow_gather },
        RegisteredOp { name: "pointnet_aggregate", run: check_pointnet_aggregate },
        RegisteredOp { name: "lattice_convolution_preact", run: check_lattice_convolution_preact },
        RegisteredOp { name: "resnet_block", run: check_resnet_block },
        RegisteredOp { name: "downsample_values", run: check_downsample },
        RegisteredOp { name: "upsample", run: check_upsample },
        RegisteredOp { name: "deform_slice", run: check_deform_slice },
        RegisteredOp { name: "gru_fuse", run: check_gru_fuse },
        RegisteredOp { name: "lstm_fuse", run: check_lstm_fuse },
        RegisteredOp { name: "aflow_fuse", run: check_aflow_fuse },
    ]
}

pub const REGISTERED_OP_COUNT: usize = 30;

/// Run every registered check over the given seeds; one report per
/// (op, seed).
pub fn run_gradient_suite(seeds: &[u64]) -> Vec<CheckReport> {
    let mut reports = Vec::new();
    for op in registry() {
        for &seed in seeds {
            reports.push((op.run)(seed));
        }
    }
    reports
}

/// Structural lattice invariants checked at runtime (no gradients involved).
pub fn run_lattice_invariants() -> Vec<(String, Result<(), String>)> {
    let mut out = Vec::new();

    out.push(("partition_of_unity".to_string(), {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut result = Ok(());
        for _ in 0..200 {
            let p = [
                rng.gen::<f64>() * 20.0 - 10.0,
                rng.gen::<f64>() * 20.0 - 10.0,
                rng.gen::<f64>() * 20.0 - 10.0,
            ];
            let elevated = crate::lattice::elevate(&p, &[0.6; 3]).unwrap();
            let (_, bary) = crate::lattice::simplex_keys(&elevated).unwrap();
            let sum: f64 = bary.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || bary.iter().any(|&w| !(-1e-12..=1.0 + 1e-12).contains(&w)) {
                result = Err(format!("barycentric sum {sum} at {p:?}"));
                break;
            }
        }
        result
    }));

    out.push(("neighbor_symmetry".to_string(), {
        let lat = small_lattice(23, 20);
        let adj = adjacency(&lat);
        let mut result = Ok(());
        'outer: for v in 0..lat.len() {
            for (tap, &n) in adj[v].iter().enumerate() {
                if let Some(n) = n {
                    let opp = crate::lattice::opposite_tap(tap);
                    if adj[n][opp] != Some(v) {
                        result = Err(format!("vertex {v} tap {tap} not mirrored by {n}"));
                        break 'outer;
                    }
                }
            }
        }
        result
    }));

    out.push(("append_only_indices".to_string(), {
        let mut lat = SparseLattice::with_default_sigma(3, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let points: Vec<[f64; 3]> = (0..30)
            .map(|_| [rng.gen::<f64>() * 4.0, rng.gen::<f64>() * 4.0, rng.gen::<f64>() * 4.0])
            .collect();
        let mut first = std::collections::HashMap::new();
        let mut result = Ok(());
        'outer: for round in 0..3 {
            for p in &points {
                let fp = lat.enclosing_simplex(p, true).unwrap();
                for (key, row) in fp.keys.iter().zip(fp.rows.iter()) {
                    let row = row.unwrap();
                    match first.entry(key.clone()) {
                        std::collections::hash_map::Entry::Vacant(e) => {
                            e.insert(row);
                        }
                        std::collections::hash_map::Entry::Occupied(e) => {
                            if *e.get() != row {
                                result =
                                    Err(format!("key moved from row {} to {row} in round {round}", e.get()));
                                break 'outer;
                            }
                        }
                    }
                }
            }
        }
        result
    }));

    out.push(("constant_field_slice".to_string(), {
        let mut lat = SparseLattice::with_default_sigma(3, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut result = Ok(());
        let mut fps = Vec::new();
        for _ in 0..100 {
            let p = [
                rng.gen::<f64>() * 6.0,
                rng.gen::<f64>() * 6.0,
                rng.gen::<f64>() * 6.0,
            ];
            fps.push(lat.enclosing_simplex(&p, true).unwrap());
        }
        let values = Array2::from_elem((lat.len(), 1), 0.73f64);
        for fp in &fps {
            let v: f64 = fp
                .rows
                .iter()
                .zip(&fp.barycentric)
                .map(|(r, &w)| values[(r.unwrap(), 0)] * w)
                .sum();
            if (v - 0.73).abs() > 1e-9 {
                result = Err(format!("sliced constant drifted to {v}"));
                break;
            }
        }
        result
    }));

    out
}
