//! Sparse permutohedral lattice: elevation of d-dimensional points into the
//! sum-zero hyperplane of R^{d+1}, enclosing-simplex lookup with barycentric
//! weights, and append-ordered hash-map vertex storage shared across a
//! sequence of point clouds.

mod snapshot;

pub use snapshot::{read_snapshot, write_snapshot};

use std::collections::HashMap;

use ndarray::{Array2, ArrayView1};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LatticeError {
    #[error("non-finite input coordinate at axis {0}")]
    NonFinite(usize),
    #[error("sigma must be strictly positive (axis {0})")]
    BadSigma(usize),
    #[error("point lies off the lattice hyperplane (coordinate sum {0})")]
    OffHyperplane(f64),
    #[error("lattice key does not sum to zero: {0:?}")]
    BadKey(Vec<i32>),
    #[error("snapshot format error: {0}")]
    Snapshot(String),
}

/// Integer coordinate vector of a lattice vertex. Coordinates always sum to
/// zero; keys of one simplex footprint are remainder-k points for distinct k.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LatticeKey(pub Vec<i32>);

impl LatticeKey {
    pub fn new(coords: Vec<i32>) -> Result<Self, LatticeError> {
        if coords.iter().sum::<i32>() != 0 {
            return Err(LatticeError::BadKey(coords));
        }
        Ok(LatticeKey(coords))
    }

    pub fn coords(&self) -> &[i32] {
        &self.0
    }
}

/// The d+1 lattice vertices enclosing an elevated point, with barycentric
/// weights. `rows[i]` is `None` when the vertex is absent from the lattice
/// and insertion was not requested.
#[derive(Debug, Clone)]
pub struct SimplexFootprint {
    pub keys: Vec<LatticeKey>,
    pub rows: Vec<Option<usize>>,
    pub barycentric: Vec<f64>,
}

/// Scale factors of the standard permutohedral embedding.
fn scale_factors(d: usize) -> Vec<f64> {
    let inv_std_dev = (2.0f64 / 3.0).sqrt() * (d as f64 + 1.0);
    (0..d)
        .map(|i| inv_std_dev / (((i + 1) * (i + 2)) as f64).sqrt())
        .collect()
}

/// The elevation basis E mapping R^d into the sum-zero hyperplane of R^{d+1},
/// written out as an explicit matrix. With s_i = sqrt(2/3)*(d+1)/sqrt((i+1)(i+2)):
///
///   E[0][i]   = s_i
///   E[j][i]   = s_i        for j >= 1, i >= j
///   E[j][j-1] = -j * s_{j-1}
///   E[j][i]   = 0          for i < j - 1
///
/// Every column sums to zero, so E p always lies in the hyperplane.
/// `elevate` computes the same product with an O(d) recurrence; this matrix
/// is the reference definition used by tests and by the input-space
/// projection.
pub fn elevation_basis(d: usize) -> Array2<f64> {
    let s = scale_factors(d);
    let mut e = Array2::zeros((d + 1, d));
    for i in 0..d {
        e[(0, i)] = s[i];
    }
    for j in 1..=d {
        for i in j..d {
            e[(j, i)] = s[i];
        }
        e[(j, j - 1)] = -(j as f64) * s[j - 1];
    }
    e
}

/// Elevate a σ-scaled d-dimensional position onto the lattice hyperplane.
/// The position is divided by sigma per axis before applying the basis.
pub fn elevate(position: &[f64], sigma: &[f64]) -> Result<Vec<f64>, LatticeError> {
    let d = position.len();
    assert_eq!(sigma.len(), d, "sigma length must match dimensionality");
    for (i, &s) in sigma.iter().enumerate() {
        if !(s > 0.0) {
            return Err(LatticeError::BadSigma(i));
        }
    }
    for (i, &p) in position.iter().enumerate() {
        if !p.is_finite() {
            return Err(LatticeError::NonFinite(i));
        }
    }
    let s = scale_factors(d);
    let mut elevated = vec![0.0f64; d + 1];
    let mut sm = 0.0f64;
    for i in (1..=d).rev() {
        let cf = position[i - 1] / sigma[i - 1] * s[i - 1];
        elevated[i] = sm - i as f64 * cf;
        sm += cf;
    }
    elevated[0] = sm;
    Ok(elevated)
}

/// Round an elevated point to its enclosing simplex: d+1 keys (one per
/// remainder class) and their barycentric weights. Pure key arithmetic,
/// independent of any lattice storage.
pub fn simplex_keys(elevated: &[f64]) -> Result<(Vec<LatticeKey>, Vec<f64>), LatticeError> {
    let d = elevated.len() - 1;
    let n = d + 1;
    let sum: f64 = elevated.iter().sum();
    if sum.abs() > 1e-6 * (1.0 + elevated.iter().map(|x| x.abs()).fold(0.0, f64::max)) {
        return Err(LatticeError::OffHyperplane(sum));
    }

    // Nearest remainder-0 point, coordinate-wise.
    let mut rem0 = vec![0i64; n];
    let mut rank = vec![0i64; n];
    let nf = n as f64;
    let mut rsum = 0i64;
    for i in 0..n {
        let v = elevated[i] / nf;
        let up = v.ceil() * nf;
        let down = v.floor() * nf;
        rem0[i] = if up - elevated[i] < elevated[i] - down {
            up as i64
        } else {
            down as i64
        };
        rsum += rem0[i];
    }
    rsum /= n as i64;

    // Rank coordinates by their differential to rem0 (descending).
    for i in 0..n {
        for j in (i + 1)..n {
            let di = elevated[i] - rem0[i] as f64;
            let dj = elevated[j] - rem0[j] as f64;
            if di < dj {
                rank[i] += 1;
            } else {
                rank[j] += 1;
            }
        }
    }

    // Fix up points that rounded to the wrong remainder plane.
    for i in 0..n {
        rank[i] += rsum;
        if rank[i] < 0 {
            rank[i] += n as i64;
            rem0[i] += n as i64;
        } else if rank[i] > d as i64 {
            rank[i] -= n as i64;
            rem0[i] -= n as i64;
        }
    }

    // Barycentric weights from the ranked differentials.
    let mut bary = vec![0.0f64; n + 1];
    for i in 0..n {
        let v = (elevated[i] - rem0[i] as f64) / nf;
        bary[d - rank[i] as usize] += v;
        bary[n - rank[i] as usize] -= v;
    }
    bary[0] += 1.0 + bary[n];
    bary.truncate(n);

    // Key of the remainder-k corner: each coordinate gets +k, except the k
    // highest-ranked coordinates which get k-(d+1).
    let mut keys = Vec::with_capacity(n);
    for k in 0..n {
        let mut c = vec![0i32; n];
        for i in 0..n {
            let off = if rank[i] as usize >= n - k {
                k as i64 - n as i64
            } else {
                k as i64
            };
            c[i] = (rem0[i] + off) as i32;
        }
        debug_assert_eq!(c.iter().sum::<i32>(), 0);
        keys.push(LatticeKey(c));
    }
    Ok((keys, bary))
}

/// Offset of the one-hop neighbor along `axis` (value d at `axis`, -1
/// elsewhere). Enumerating (axis, sign) as (0,+),(0,-),(1,+),... yields the
/// fixed tap order used by lattice convolutions.
pub fn neighbor_key(key: &LatticeKey, axis: usize, sign: i32) -> LatticeKey {
    let n = key.0.len();
    let d = n - 1;
    debug_assert!(axis < n);
    debug_assert!(sign == 1 || sign == -1);
    let mut c = key.0.clone();
    for (i, ci) in c.iter_mut().enumerate() {
        let o = if i == axis { d as i32 } else { -1 };
        *ci += sign * o;
    }
    LatticeKey(c)
}

/// All 2(d+1) one-hop neighbors of `key` in tap order.
pub fn neighbor_keys(key: &LatticeKey) -> Vec<LatticeKey> {
    let n = key.0.len();
    let mut out = Vec::with_capacity(2 * n);
    for axis in 0..n {
        out.push(neighbor_key(key, axis, 1));
        out.push(neighbor_key(key, axis, -1));
    }
    out
}

/// Number of neighbor taps (excluding the center) for dimensionality d.
pub fn neighbor_count(d: usize) -> usize {
    2 * (d + 1)
}

/// Tap index (0-based within the neighbor list) of the opposite offset.
pub fn opposite_tap(tap: usize) -> usize {
    tap ^ 1
}

/// Sparse permutohedral lattice V=(C,X): append-ordered vertex keys plus a
/// value matrix, backed by a hash map. Row indices never change once
/// inserted, which is what lets a sequence of clouds share one lattice.
#[derive(Debug, Clone)]
pub struct SparseLattice {
    dim: usize,
    sigma: Vec<f64>,
    value_dim: usize,
    keys: Vec<LatticeKey>,
    hash: HashMap<LatticeKey, usize>,
    values: Array2<f32>,
}

impl SparseLattice {
    pub fn new(dim: usize, sigma: Vec<f64>, value_dim: usize) -> Self {
        assert_eq!(sigma.len(), dim);
        assert!(sigma.iter().all(|&s| s > 0.0), "sigma must be positive");
        SparseLattice {
            dim,
            sigma,
            value_dim,
            keys: Vec::new(),
            hash: HashMap::new(),
            values: Array2::zeros((0, value_dim)),
        }
    }

    pub fn with_default_sigma(dim: usize, value_dim: usize) -> Self {
        Self::new(dim, vec![0.6; dim], value_dim)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn value_dim(&self) -> usize {
        self.value_dim
    }

    pub fn keys(&self) -> &[LatticeKey] {
        &self.keys
    }

    pub fn key(&self, row: usize) -> &LatticeKey {
        &self.keys[row]
    }

    pub fn values(&self) -> &Array2<f32> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Array2<f32> {
        &mut self.values
    }

    pub fn set_values(&mut self, values: Array2<f32>) {
        assert_eq!(values.nrows(), self.keys.len());
        self.value_dim = values.ncols();
        self.values = values;
    }

    pub fn lookup(&self, key: &LatticeKey) -> Option<usize> {
        self.hash.get(key).copied()
    }

    /// Row index of `key`, appending it (with a zero value row) when absent.
    pub fn lookup_or_insert(&mut self, key: &LatticeKey) -> usize {
        if let Some(&row) = self.hash.get(key) {
            return row;
        }
        debug_assert_eq!(key.0.iter().sum::<i32>(), 0);
        let row = self.keys.len();
        self.keys.push(key.clone());
        self.hash.insert(key.clone(), row);
        self.values
            .push_row(ArrayView1::from(&vec![0.0f32; self.value_dim]))
            .expect("value row append");
        row
    }

    /// Elevate a σ-scaled position and resolve its enclosing simplex against
    /// this lattice's storage.
    pub fn enclosing_simplex(
        &mut self,
        position: &[f64],
        allow_insert: bool,
    ) -> Result<SimplexFootprint, LatticeError> {
        let elevated = elevate(position, &self.sigma)?;
        self.enclosing_simplex_elevated(&elevated, allow_insert)
    }

    /// Same as `enclosing_simplex` but starting from an already-elevated
    /// hyperplane point.
    pub fn enclosing_simplex_elevated(
        &mut self,
        elevated: &[f64],
        allow_insert: bool,
    ) -> Result<SimplexFootprint, LatticeError> {
        let (keys, barycentric) = simplex_keys(elevated)?;
        let rows = keys
            .iter()
            .map(|k| {
                if allow_insert {
                    Some(self.lookup_or_insert(k))
                } else {
                    self.lookup(k)
                }
            })
            .collect();
        Ok(SimplexFootprint {
            keys,
            rows,
            barycentric,
        })
    }

    /// Row indices of the one-hop neighbors of vertex `row`, in tap order.
    /// Unallocated neighbors are `None`.
    pub fn neighbor_rows(&self, row: usize) -> Vec<Option<usize>> {
        neighbor_keys(&self.keys[row])
            .iter()
            .map(|k| self.lookup(k))
            .collect()
    }

    /// Project a vertex key back into σ-scaled input space via the
    /// pseudo-inverse of the elevation basis.
    pub fn input_position(&self, row: usize) -> Vec<f64> {
        let pinv = basis_pseudo_inverse(self.dim);
        let c = &self.keys[row].0;
        (0..self.dim)
            .map(|i| (0..=self.dim).map(|j| pinv[(i, j)] * c[j] as f64).sum())
            .collect()
    }
}

/// (E^T E)^{-1} E^T for the elevation basis: maps hyperplane points back to
/// input space.
pub fn basis_pseudo_inverse(d: usize) -> Array2<f64> {
    let e = elevation_basis(d);
    // g = E^T E (d x d)
    let mut g = Array2::<f64>::zeros((d, d));
    for i in 0..d {
        for j in 0..d {
            g[(i, j)] = (0..=d).map(|k| e[(k, i)] * e[(k, j)]).sum();
        }
    }
    let ginv = invert_small(&g);
    let mut pinv = Array2::<f64>::zeros((d, d + 1));
    for i in 0..d {
        for j in 0..=d {
            pinv[(i, j)] = (0..d).map(|k| ginv[(i, k)] * e[(j, k)]).sum();
        }
    }
    pinv
}

/// Gauss-Jordan inversion for the small SPD matrices used above.
fn invert_small(m: &Array2<f64>) -> Array2<f64> {
    let n = m.nrows();
    let mut a = m.clone();
    let mut inv = Array2::<f64>::eye(n);
    for col in 0..n {
        let mut pivot = col;
        for r in (col + 1)..n {
            if a[(r, col)].abs() > a[(pivot, col)].abs() {
                pivot = r;
            }
        }
        if pivot != col {
            for c in 0..n {
                a.swap((col, c), (pivot, c));
                inv.swap((col, c), (pivot, c));
            }
        }
        let p = a[(col, col)];
        assert!(p.abs() > 1e-12, "singular matrix");
        for c in 0..n {
            a[(col, c)] /= p;
            inv[(col, c)] /= p;
        }
        for r in 0..n {
            if r != col {
                let f = a[(r, col)];
                for c in 0..n {
                    a[(r, c)] -= f * a[(col, c)];
                    inv[(r, c)] -= f * inv[(col, c)];
                }
            }
        }
    }
    inv
}
