//! Differentiable lattice operators: Distribute, PointNet aggregation,
//! sparse lattice convolution, down/upsampling between lattice levels,
//! DeformSlice, and pre-activated residual blocks.

use std::sync::Arc;

use ndarray::Array2;
use thiserror::Error;

use crate::autodiff::{Graph, Scalar, Var};
use crate::cloud::PointCloud;
use crate::lattice::{
    basis_pseudo_inverse, neighbor_count, simplex_keys, LatticeError, LatticeKey, SimplexFootprint,
    SparseLattice,
};
use crate::parallel::map_indexed;

#[derive(Debug, Error)]
pub enum OpError {
    #[error("{what}: expected shape {expected:?}, got {got:?}")]
    ChannelMismatch {
        what: &'static str,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("operation requires a non-empty lattice")]
    EmptyLattice,
    #[error(transparent)]
    Lattice(#[from] LatticeError),
}

/// One-hop neighbor rows for every vertex, in tap order. `None` marks an
/// unallocated neighbor (zero contribution in convolutions).
pub fn adjacency(lattice: &SparseLattice) -> Arc<Vec<Vec<Option<usize>>>> {
    Arc::new(map_indexed(lattice.len(), |v| lattice.neighbor_rows(v)))
}

/// Result of scattering a cloud onto the lattice: the enclosing simplex of
/// every point plus the per-vertex bags of contributing points.
#[derive(Debug, Clone)]
pub struct Distribution {
    /// Per-point simplex footprint (always resolved, inserts allowed).
    pub footprints: Vec<SimplexFootprint>,
    /// Per-vertex list of contributing point indices; every point appears in
    /// exactly d+1 bags.
    pub bags: Vec<Vec<usize>>,
}

impl Distribution {
    pub fn record_count(&self) -> usize {
        self.bags.iter().map(Vec::len).sum()
    }
}

/// Map every point of `cloud` onto its enclosing simplex, growing the shared
/// lattice append-only. Duplicate points simply contribute twice; an empty
/// cloud yields an empty distribution.
pub fn distribute(
    cloud: &PointCloud,
    lattice: &mut SparseLattice,
) -> Result<Distribution, OpError> {
    let mut footprints = Vec::with_capacity(cloud.len());
    for row in cloud.positions.rows() {
        let pos: Vec<f64> = row.to_vec();
        footprints.push(lattice.enclosing_simplex(&pos, true)?);
    }
    let mut bags = vec![Vec::new(); lattice.len()];
    for (p, fp) in footprints.iter().enumerate() {
        for r in fp.rows.iter().flatten() {
            bags[*r].push(p);
        }
    }
    Ok(Distribution { footprints, bags })
}

/// Build the PointNet record matrix: one row per (vertex, contributing
/// point), grouped contiguously by vertex in lattice row order. A record is
/// the point's position offset from the vertex (in sigma-scaled input space)
/// concatenated with the point's features. Returns the matrix and the group
/// offsets (length k+1).
pub fn pointnet_records<T: Scalar>(
    dist: &Distribution,
    cloud: &PointCloud,
    lattice: &SparseLattice,
) -> (Array2<T>, Vec<usize>) {
    let d = lattice.dim();
    let f_d = cloud.feature_dim();
    let k = dist.bags.len();
    let total: usize = dist.record_count();
    let pinv = basis_pseudo_inverse(d);
    let sigma = lattice.sigma();

    let mut records = Array2::zeros((total, d + f_d));
    let mut offsets = Vec::with_capacity(k + 1);
    offsets.push(0usize);
    let mut row = 0usize;
    for (v, bag) in dist.bags.iter().enumerate() {
        let key = lattice.key(v);
        let vpos: Vec<f64> = (0..d)
            .map(|i| (0..=d).map(|j| pinv[(i, j)] * key.coords()[j] as f64).sum())
            .collect();
        for &p in bag {
            for i in 0..d {
                let scaled = cloud.positions[(p, i)] / sigma[i];
                records[(row, i)] = T::from_real(scaled - vpos[i]);
            }
            for i in 0..f_d {
                records[(row, d + i)] = T::from_real(cloud.features[(p, i)] as f64);
            }
            row += 1;
        }
        offsets.push(row);
    }
    (records, offsets)
}

/// PointNet aggregation: shared linear embedding of each record followed by
/// an elementwise max per vertex bag. Vertices with empty bags get a zero
/// row.
pub fn pointnet_aggregate<T: Scalar>(
    g: &mut Graph<T>,
    records: Var,
    offsets: Arc<Vec<usize>>,
    weights: Var,
    bias: Var,
) -> Result<Var, OpError> {
    let (_, rec_dim) = g.shape(records);
    let (wr, wc) = g.shape(weights);
    if wr != rec_dim {
        return Err(OpError::ChannelMismatch {
            what: "pointnet weights",
            expected: (rec_dim, wc),
            got: (wr, wc),
        });
    }
    let embedded = g.matmul(records, weights);
    let embedded = g.add_bias(embedded, bias);
    Ok(g.group_max(embedded, offsets))
}

/// Sparse lattice convolution over the one-hop neighborhood. `weights` has
/// (2(d+1)+1)*cin rows: tap 0 is the center vertex, taps 1.. follow the
/// fixed (axis, sign) neighbor enumeration. Missing neighbors contribute
/// zero. With `pre_activate`, a ReLU is applied to the input rows before the
/// taps are gathered.
pub fn lattice_convolution<T: Scalar>(
    g: &mut Graph<T>,
    adjacency: &Arc<Vec<Vec<Option<usize>>>>,
    x: Var,
    weights: Var,
    bias: Var,
    pre_activate: bool,
) -> Result<Var, OpError> {
    let (_, cin) = g.shape(x);
    let n_taps = adjacency.first().map_or(0, Vec::len) + 1;
    let (wr, cout) = g.shape(weights);
    if wr != n_taps * cin {
        return Err(OpError::ChannelMismatch {
            what: "convolution weights",
            expected: (n_taps * cin, cout),
            got: (wr, cout),
        });
    }
    if g.shape(bias) != (1, cout) {
        return Err(OpError::ChannelMismatch {
            what: "convolution bias",
            expected: (1, cout),
            got: g.shape(bias),
        });
    }
    let input = if pre_activate { g.relu(x) } else { x };
    Ok(g.lattice_conv(input, weights, bias, adjacency.clone()))
}

/// Parameters of one convolution (weights + bias).
#[derive(Debug, Clone, Copy)]
pub struct ConvVars {
    pub weights: Var,
    pub bias: Var,
}

/// Pre-activated residual block: out = x + Conv(ReLU(Conv(ReLU(x)))).
/// Both convolutions must preserve the channel count.
pub fn resnet_block<T: Scalar>(
    g: &mut Graph<T>,
    adjacency: &Arc<Vec<Vec<Option<usize>>>>,
    x: Var,
    conv1: ConvVars,
    conv2: ConvVars,
) -> Result<Var, OpError> {
    let (_, c) = g.shape(x);
    let h = lattice_convolution(g, adjacency, x, conv1.weights, conv1.bias, true)?;
    if g.shape(h).1 != c {
        return Err(OpError::ChannelMismatch {
            what: "resnet inner channels",
            expected: (g.shape(h).0, c),
            got: g.shape(h),
        });
    }
    let h = lattice_convolution(g, adjacency, h, conv2.weights, conv2.bias, true)?;
    if g.shape(h) != g.shape(x) {
        return Err(OpError::ChannelMismatch {
            what: "resnet output channels",
            expected: g.shape(x),
            got: g.shape(h),
        });
    }
    Ok(g.add(x, h))
}

/// Coarse key of a fine vertex: the enclosing-simplex corner of c/2 with the
/// largest barycentric weight, ties broken by the lowest remainder index.
/// This is the documented coarsening rule; it is many-to-one, so the coarse
/// lattice never has more vertices than the fine one.
pub fn coarse_key_of(fine: &LatticeKey) -> LatticeKey {
    let half: Vec<f64> = fine.coords().iter().map(|&c| c as f64 / 2.0).collect();
    let (keys, bary) = simplex_keys(&half).expect("half key lies on the hyperplane");
    let mut best = 0usize;
    for i in 1..keys.len() {
        if bary[i] > bary[best] {
            best = i;
        }
    }
    keys[best].clone()
}

/// Map every fine vertex to its coarse vertex, growing `coarse` append-only.
/// Returns the per-fine-row coarse group index.
pub fn coarsen_keys(fine: &SparseLattice, coarse: &mut SparseLattice) -> Vec<usize> {
    (0..fine.len())
        .map(|v| coarse.lookup_or_insert(&coarse_key_of(fine.key(v))))
        .collect()
}

/// Downsample values: mean over each coarse vertex's contributing fine rows,
/// followed by a learned linear map. With identity weights and zero bias a
/// constant field stays constant.
pub fn downsample_values<T: Scalar>(
    g: &mut Graph<T>,
    group_of_row: Arc<Vec<usize>>,
    n_coarse: usize,
    x: Var,
    weights: Var,
    bias: Var,
) -> Result<Var, OpError> {
    let (_, cin) = g.shape(x);
    let (wr, cout) = g.shape(weights);
    if wr != cin {
        return Err(OpError::ChannelMismatch {
            what: "downsample weights",
            expected: (cin, cout),
            got: (wr, cout),
        });
    }
    let pooled = g.group_mean(x, group_of_row, n_coarse);
    let out = g.matmul(pooled, weights);
    Ok(g.add_bias(out, bias))
}

/// Interpolation footprint of fine keys against a coarse lattice: the
/// enclosing coarse simplex of c/2 per fine key, with barycentric weights
/// renormalized over the corners actually allocated.
pub fn upsample_footprint(
    coarse: &SparseLattice,
    fine_keys: &[LatticeKey],
) -> Vec<Vec<(Option<usize>, f64)>> {
    map_indexed(fine_keys.len(), |i| {
        let half: Vec<f64> = fine_keys[i].coords().iter().map(|&c| c as f64 / 2.0).collect();
        let (keys, bary) = simplex_keys(&half).expect("half key lies on the hyperplane");
        let rows: Vec<Option<usize>> = keys.iter().map(|k| coarse.lookup(k)).collect();
        let present_sum: f64 = rows
            .iter()
            .zip(&bary)
            .filter_map(|(r, &w)| r.map(|_| w))
            .sum();
        let scale = if present_sum > 1e-12 {
            1.0 / present_sum
        } else {
            0.0
        };
        rows.into_iter()
            .zip(bary)
            .map(|(r, w)| (r, w * scale))
            .collect()
    })
}

/// Upsample coarse values onto the given fine keys (skip-connection order).
pub fn upsample<T: Scalar>(
    g: &mut Graph<T>,
    coarse: &SparseLattice,
    fine_keys: &[LatticeKey],
    coarse_x: Var,
) -> Var {
    let fp = Arc::new(upsample_footprint(coarse, fine_keys));
    g.simplex_gather(coarse_x, fp)
}

/// Two-layer MLP parameters predicting barycentric weight offsets.
#[derive(Debug, Clone, Copy)]
pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Gather vertex values back to points: per point, sum of the enclosing
/// simplex rows weighted by (barycentric + predicted offset). With
/// `offset_net` absent the offsets are exactly zero and this is plain
/// slicing. Returns the per-point features and the number of missing simplex
/// vertices encountered (each contributes zero).
pub fn deform_slice<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    footprints: &[SimplexFootprint],
    offset_net: Option<&MlpVars>,
) -> Result<(Var, usize), OpError> {
    let m = footprints.len();
    let n_corner = footprints.first().map_or(0, |f| f.rows.len());
    let missing = footprints
        .iter()
        .flat_map(|f| f.rows.iter())
        .filter(|r| r.is_none())
        .count();

    let corners: Arc<Vec<Vec<Option<usize>>>> =
        Arc::new(footprints.iter().map(|f| f.rows.clone()).collect());

    let mut base = Array2::zeros((m, n_corner));
    for (p, f) in footprints.iter().enumerate() {
        for (i, &w) in f.barycentric.iter().enumerate() {
            base[(p, i)] = T::from_real(w);
        }
    }

    let out = match offset_net {
        None => {
            let fp: Arc<Vec<Vec<(Option<usize>, f64)>>> = Arc::new(
                footprints
                    .iter()
                    .map(|f| f.rows.iter().copied().zip(f.barycentric.iter().copied()).collect())
                    .collect(),
            );
            g.simplex_gather(x, fp)
        }
        Some(net) => {
            let (_, c) = g.shape(x);
            let (w1r, _) = g.shape(net.w1);
            if w1r != n_corner * c {
                return Err(OpError::ChannelMismatch {
                    what: "deform-slice offset net input",
                    expected: (n_corner * c, g.shape(net.w1).1),
                    got: g.shape(net.w1),
                });
            }
            let corner_values = g.gather_corners(x, corners.clone());
            let h = g.matmul(corner_values, net.w1);
            let h = g.add_bias(h, net.b1);
            let h = g.relu(h);
            let delta = g.matmul(h, net.w2);
            let delta = g.add_bias(delta, net.b2);
            if g.shape(delta) != (m, n_corner) {
                return Err(OpError::ChannelMismatch {
                    what: "deform-slice offsets",
                    expected: (m, n_corner),
                    got: g.shape(delta),
                });
            }
            let base_var = g.input(base);
            let weights = g.add(base_var, delta);
            g.simplex_gather_weighted(x, weights, corners)
        }
    };
    Ok((out, missing))
}

/// Mean 3D position (in the cloud's own units) of the points contributing to
/// each vertex; `None` for vertices without contributions.
pub fn vertex_centroids(
    dist: &Distribution,
    cloud: &PointCloud,
    vertex_count: usize,
) -> Vec<Option<[f64; 3]>> {
    let mut sums = vec![[0.0f64; 3]; vertex_count];
    let mut counts = vec![0usize; vertex_count];
    for (v, bag) in dist.bags.iter().enumerate() {
        for &p in bag {
            for i in 0..3 {
                sums[v][i] += cloud.positions[(p, i)];
            }
        }
        counts[v] = bag.len();
    }
    (0..vertex_count)
        .map(|v| {
            if v < dist.bags.len() && counts[v] > 0 {
                let n = counts[v] as f64;
                Some([sums[v][0] / n, sums[v][1] / n, sums[v][2] / n])
            } else {
                None
            }
        })
        .collect()
}

/// Number of convolution taps (center + neighbors) for dimensionality d.
pub fn conv_taps(d: usize) -> usize {
    neighbor_count(d) + 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn cloud_from(points: &[[f64; 3]]) -> PointCloud {
        let mut pos = Array2::zeros((points.len(), 3));
        for (i, p) in points.iter().enumerate() {
            for j in 0..3 {
                pos[(i, j)] = p[j];
            }
        }
        let n = points.len();
        PointCloud::new(pos, Array2::zeros((n, 0))).unwrap()
    }

    #[test]
    fn single_point_creates_one_simplex() {
        let mut lat = SparseLattice::with_default_sigma(3, 0);
        let cloud = cloud_from(&[[0.25, 0.33, 0.47]]);
        let dist = distribute(&cloud, &mut lat).unwrap();
        assert_eq!(lat.len(), 4);
        assert_eq!(dist.bags.len(), 4);
        for bag in &dist.bags {
            assert_eq!(bag.len(), 1);
        }
    }

    #[test]
    fn record_count_is_m_times_d_plus_one() {
        let mut lat = SparseLattice::with_default_sigma(3, 0);
        let points: Vec<[f64; 3]> = (0..40)
            .map(|i| {
                let t = i as f64 * 0.61;
                [t.sin() * 4.0, (t * 1.3).cos() * 4.0, (t * 0.7).sin()]
            })
            .collect();
        let cloud = cloud_from(&points);
        let dist = distribute(&cloud, &mut lat).unwrap();
        assert_eq!(dist.record_count(), 40 * 4);
    }

    #[test]
    fn identical_clouds_share_bag_membership() {
        let points = [[0.5, -0.3, 0.8], [2.0, 1.0, -0.4], [0.1, 0.1, 0.1]];
        let mut lat = SparseLattice::with_default_sigma(3, 0);
        let c1 = cloud_from(&points);
        let d1 = distribute(&c1, &mut lat).unwrap();
        let d2 = distribute(&c1, &mut lat).unwrap();
        let pairs = |d: &Distribution| {
            let mut v: Vec<(usize, usize)> = d
                .bags
                .iter()
                .enumerate()
                .flat_map(|(vi, bag)| bag.iter().map(move |&p| (vi, p)))
                .collect();
            v.sort_unstable();
            v
        };
        assert_eq!(pairs(&d1), pairs(&d2));
    }

    #[test]
    fn empty_cloud_yields_empty_lattice() {
        let mut lat = SparseLattice::with_default_sigma(3, 0);
        let cloud = cloud_from(&[]);
        let dist = distribute(&cloud, &mut lat).unwrap();
        assert!(lat.is_empty());
        assert_eq!(dist.record_count(), 0);
    }

    #[test]
    fn pointnet_singleton_bag_equals_embedding() {
        let mut g = Graph::<f64>::new();
        let records = g.input(array![[0.5, -1.0, 2.0]]);
        let w = g.input(array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]);
        let b = g.input(array![[0.1, -0.2]]);
        let offsets = Arc::new(vec![0usize, 1]);
        let out = pointnet_aggregate(&mut g, records, offsets, w, b).unwrap();
        // embedding = [0.5 + 2.0 + 0.1, -1.0 + 2.0 - 0.2]
        let v = g.value(out);
        assert!((v[(0, 0)] - 2.6).abs() < 1e-12);
        assert!((v[(0, 1)] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn pointnet_matches_bruteforce_max_of_matvec() {
        let recs = array![[0.3, -0.7], [1.2, 0.4], [-0.5, 0.9]];
        let w = array![[0.6, -1.1, 0.2], [0.8, 0.5, -0.4]];
        let b = array![[0.05, -0.3, 0.0]];
        let mut g = Graph::<f64>::new();
        let rv = g.input(recs.clone());
        let wv = g.input(w.clone());
        let bv = g.input(b.clone());
        let out = pointnet_aggregate(&mut g, rv, Arc::new(vec![0, 3]), wv, bv).unwrap();
        for col in 0..3 {
            let mut best = f64::NEG_INFINITY;
            for r in 0..3 {
                let e = (0..2).map(|c| recs[(r, c)] * w[(c, col)]).sum::<f64>() + b[(0, col)];
                best = best.max(e);
            }
            assert!((g.value(out)[(0, col)] - best).abs() < 1e-12);
        }
    }

    fn tiny_lattice(n_points: usize) -> (SparseLattice, Arc<Vec<Vec<Option<usize>>>>) {
        let mut lat = SparseLattice::with_default_sigma(3, 0);
        let points: Vec<[f64; 3]> = (0..n_points)
            .map(|i| {
                let t = i as f64 * 0.83 + 0.21;
                [t.sin() * 1.5, (t * 1.7).cos(), (t * 0.9).sin() * 0.8]
            })
            .collect();
        let cloud = cloud_from(&points);
        distribute(&cloud, &mut lat).unwrap();
        let adj = adjacency(&lat);
        (lat, adj)
    }

    #[test]
    fn conv_identity_center_tap_is_relu() {
        let (lat, adj) = tiny_lattice(3);
        let k = lat.len();
        let c = 2;
        let taps = conv_taps(3);
        let mut x = Array2::zeros((k, c));
        for (i, v) in x.iter_mut().enumerate() {
            *v = (i as f64 * 0.7).sin(); // mixed signs
        }
        let mut w = Array2::zeros((taps * c, c));
        for i in 0..c {
            w[(i, i)] = 1.0; // identity center tap, zero neighbor taps
        }
        let mut g = Graph::<f64>::new();
        let xv = g.input(x.clone());
        let wv = g.input(w);
        let bv = g.input(Array2::zeros((1, c)));
        let out = lattice_convolution(&mut g, &adj, xv, wv, bv, true).unwrap();
        for (o, &i) in g.value(out).iter().zip(x.iter()) {
            assert!((o - i.max(0.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_matches_bruteforce_loop() {
        let (lat, adj) = tiny_lattice(5);
        let k = lat.len();
        let cin = 3;
        let cout = 2;
        let taps = conv_taps(3);
        let mut seed = 7u64;
        let mut rnd = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (seed >> 33) as f64 / (1u64 << 31) as f64 - 0.5
        };
        let x = Array2::from_shape_fn((k, cin), |_| rnd());
        let w = Array2::from_shape_fn((taps * cin, cout), |_| rnd());
        let b = Array2::from_shape_fn((1, cout), |_| rnd());

        let mut g = Graph::<f64>::new();
        let xv = g.input(x.clone());
        let wv = g.input(w.clone());
        let bv = g.input(b.clone());
        let out = lattice_convolution(&mut g, &adj, xv, wv, bv, false).unwrap();

        // oracle: naive nested loop over enumerated neighbors
        for v in 0..k {
            for o in 0..cout {
                let mut acc = b[(0, o)];
                for c in 0..cin {
                    acc += x[(v, c)] * w[(c, o)];
                }
                for (tap, &n) in adj[v].iter().enumerate() {
                    if let Some(n) = n {
                        for c in 0..cin {
                            acc += x[(n, c)] * w[((tap + 1) * cin + c, o)];
                        }
                    }
                }
                assert!((g.value(out)[(v, o)] - acc).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let (_, adj) = tiny_lattice(2);
        let mut g = Graph::<f64>::new();
        let x = g.input(Array2::zeros((adj.len(), 3)));
        let w = g.input(Array2::zeros((5, 2)));
        let b = g.input(Array2::zeros((1, 2)));
        assert!(matches!(
            lattice_convolution(&mut g, &adj, x, w, b, false),
            Err(OpError::ChannelMismatch { .. })
        ));
    }

    #[test]
    fn resnet_zero_weights_is_identity() {
        let (lat, adj) = tiny_lattice(3);
        let k = lat.len();
        let c = 2;
        let taps = conv_taps(3);
        let mut g = Graph::<f64>::new();
        let x = g.input(Array2::from_shape_fn((k, c), |(i, j)| (i + j) as f64 * 0.3 - 0.5));
        let zero_conv = ConvVars {
            weights: g.input(Array2::zeros((taps * c, c))),
            bias: g.input(Array2::zeros((1, c))),
        };
        let out = resnet_block(&mut g, &adj, x, zero_conv, zero_conv).unwrap();
        assert_eq!(g.value(out), g.value(x));
    }

    #[test]
    fn coarse_origin_stays_origin() {
        let mut fine = SparseLattice::with_default_sigma(3, 0);
        fine.lookup_or_insert(&LatticeKey::new(vec![0, 0, 0, 0]).unwrap());
        let mut coarse = SparseLattice::with_default_sigma(3, 0);
        let groups = coarsen_keys(&fine, &mut coarse);
        assert_eq!(coarse.len(), 1);
        assert_eq!(coarse.key(0).coords(), &[0, 0, 0, 0]);
        assert_eq!(groups, vec![0]);
    }

    #[test]
    fn coarse_count_never_exceeds_fine() {
        let (fine, _) = tiny_lattice(30);
        let mut coarse = SparseLattice::with_default_sigma(3, 0);
        let groups = coarsen_keys(&fine, &mut coarse);
        assert!(coarse.len() <= fine.len());
        assert_eq!(groups.len(), fine.len());
        assert!(groups.iter().all(|&g| g < coarse.len()));
    }

    #[test]
    fn downsample_then_upsample_constant_is_identity() {
        let (fine, _) = tiny_lattice(12);
        let mut coarse = SparseLattice::with_default_sigma(3, 0);
        let groups = Arc::new(coarsen_keys(&fine, &mut coarse));
        let k = fine.len();
        let c = 3;
        let constant = 0.37f64;

        let mut g = Graph::<f64>::new();
        let x = g.input(Array2::from_elem((k, c), constant));
        let w = g.input(Array2::eye(c));
        let b = g.input(Array2::zeros((1, c)));
        let coarse_x = downsample_values(&mut g, groups, coarse.len(), x, w, b).unwrap();
        let fine_again = upsample(&mut g, &coarse, fine.keys(), coarse_x);
        for &v in g.value(fine_again).iter() {
            assert!((v - constant).abs() < 1e-5, "got {v}");
        }
    }

    #[test]
    fn slice_constant_field_returns_constant() {
        let mut lat = SparseLattice::with_default_sigma(3, 0);
        let cloud = cloud_from(&[[0.4, 0.6, -0.3], [1.3, -0.2, 0.9]]);
        let dist = distribute(&cloud, &mut lat).unwrap();
        let mut g = Graph::<f64>::new();
        let x = g.input(Array2::from_elem((lat.len(), 2), 1.7));
        let (out, missing) = deform_slice(&mut g, x, &dist.footprints, None).unwrap();
        assert_eq!(missing, 0);
        for &v in g.value(out).iter() {
            assert!((v - 1.7).abs() < 1e-9);
        }
    }

    #[test]
    fn deform_slice_hand_computed_offsets() {
        // 1 point, hand-set corner values and offsets: out = sum (b_i + db_i) x_i
        let rows = vec![Some(0), Some(1), Some(2), Some(3)];
        let bary = vec![0.4, 0.3, 0.2, 0.1];
        let fp = SimplexFootprint {
            keys: vec![
                LatticeKey::new(vec![0, 0, 0, 0]).unwrap(),
                LatticeKey::new(vec![1, 1, 1, -3]).unwrap(),
                LatticeKey::new(vec![2, 2, -2, -2]).unwrap(),
                LatticeKey::new(vec![3, -1, -1, -1]).unwrap(),
            ],
            rows,
            barycentric: bary.clone(),
        };
        let x = array![[1.0], [2.0], [3.0], [4.0]];
        let delta = [0.05, -0.1, 0.0, 0.02];

        // offset net forced to produce `delta`: zero weights, bias = delta
        let mut g = Graph::<f64>::new();
        let xv = g.input(x.clone());
        let hidden = 2;
        let net = MlpVars {
            w1: g.input(Array2::zeros((4 * 1, hidden))),
            b1: g.input(Array2::zeros((1, hidden))),
            w2: g.input(Array2::zeros((hidden, 4))),
            b2: g.input(array![[0.05, -0.1, 0.0, 0.02]]),
        };
        let (out, _) = deform_slice(&mut g, xv, &[fp], Some(&net)).unwrap();
        let expected: f64 = (0..4).map(|i| (bary[i] + delta[i]) * x[(i, 0)]).sum();
        assert!((g.value(out)[(0, 0)] - expected).abs() < 1e-12);
    }

    #[test]
    fn centroids_average_contributing_points() {
        let mut lat = SparseLattice::with_default_sigma(3, 0);
        let cloud = cloud_from(&[[0.2, 0.2, 0.2], [0.21, 0.19, 0.2]]);
        let dist = distribute(&cloud, &mut lat).unwrap();
        let cents = vertex_centroids(&dist, &cloud, lat.len());
        for (v, c) in cents.iter().enumerate() {
            if dist.bags[v].len() == 2 {
                let c = c.unwrap();
                assert!((c[0] - 0.205).abs() < 1e-12);
            }
        }
    }
}
