//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A `Graph` is a tape of nodes built in execution order. Every operation
//! records a backward closure that routes the incoming gradient to its
//! inputs; `backward` walks the tape in reverse. The element type is generic
//! so that training runs in f32 while gradient checks run in f64.

pub mod gradcheck;
pub mod optim;

use std::fmt::Debug;
use std::iter::Sum;
use std::sync::Arc;

use ndarray::{Array2, Axis, LinalgScalar};
use num_traits::{Float, FromPrimitive, NumAssignOps};
use thiserror::Error;

use crate::parallel::map_indexed;

#[derive(Debug, Error)]
pub enum AdError {
    #[error("backward requires a scalar loss, got shape {0}x{1}")]
    NonScalarLoss(usize, usize),
    #[error("cross-entropy saw no labeled rows")]
    AllIgnored,
}

/// Element type usable on the tape.
pub trait Scalar:
    Float + FromPrimitive + LinalgScalar + NumAssignOps + Sum + Send + Sync + Debug + 'static
{
    fn from_real(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).unwrap()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(&self) -> usize {
        self.0
    }
}

type BackFn<T> = Box<dyn Fn(&Graph<T>, &Array2<T>, &mut GradStore<T>) + Send + Sync>;

struct Node<T: Scalar> {
    value: Array2<T>,
    backward: Option<BackFn<T>>,
}

/// Gradients accumulated during a backward pass, indexed by node id.
pub struct GradStore<T: Scalar> {
    grads: Vec<Option<Array2<T>>>,
}

impl<T: Scalar> GradStore<T> {
    fn new(n: usize) -> Self {
        GradStore {
            grads: (0..n).map(|_| None).collect(),
        }
    }

    pub fn accumulate(&mut self, id: usize, delta: Array2<T>) {
        match &mut self.grads[id] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    pub fn get(&self, v: Var) -> Option<&Array2<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or a zero matrix of the given shape when `v` was not
    /// reached by the backward pass.
    pub fn get_or_zero(&self, v: Var, shape: (usize, usize)) -> Array2<T> {
        match self.grads[v.0].as_ref() {
            Some(g) => g.clone(),
            None => Array2::zeros(shape),
        }
    }
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let s = self.nodes[v.0].value.dim();
        (s.0, s.1)
    }

    fn push(&mut self, value: Array2<T>, backward: Option<BackFn<T>>) -> Var {
        self.nodes.push(Node { value, backward });
        Var(self.nodes.len() - 1)
    }

    /// Insert a leaf (input or parameter).
    pub fn input(&mut self, value: Array2<T>) -> Var {
        self.push(value, None)
    }

    /// Walk the tape in reverse from a scalar loss, returning per-node
    /// gradients. Unreachable nodes simply have no gradient.
    pub fn backward(&self, loss: Var) -> Result<GradStore<T>, AdError> {
        let (r, c) = self.shape(loss);
        if r != 1 || c != 1 {
            return Err(AdError::NonScalarLoss(r, c));
        }
        let mut store = GradStore::new(self.nodes.len());
        store.accumulate(loss.0, Array2::from_elem((1, 1), T::one()));
        for i in (0..=loss.0).rev() {
            let grad = match store.grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if let Some(back) = &self.nodes[i].backward {
                back(self, &grad, &mut store);
            }
            store.grads[i] = Some(grad);
        }
        Ok(store)
    }

    // ----- elementwise and linear-algebra primitives -----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        self.push(
            value,
            Some(Box::new(move |_, g, store| {
                store.accumulate(a.0, g.clone());
                store.accumulate(b.0, g.clone());
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let value = self.value(a) - self.value(b);
        self.push(
            value,
            Some(Box::new(move |_, g, store| {
                store.accumulate(a.0, g.clone());
                store.accumulate(b.0, g.mapv(|x| -x));
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let value = self.value(a) * self.value(b);
        self.push(
            value,
            Some(Box::new(move |graph, g, store| {
                store.accumulate(a.0, g * graph.value(b));
                store.accumulate(b.0, g * graph.value(a));
            })),
        )
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).mapv(|x| x * c);
        self.push(
            value,
            Some(Box::new(move |_, g, store| {
                store.accumulate(a.0, g.mapv(|x| x * c));
            })),
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.shape(a).1,
            self.shape(b).0,
            "matmul: inner dimension mismatch"
        );
        let value = self.value(a).dot(self.value(b));
        self.push(
            value,
            Some(Box::new(move |graph, g, store| {
                store.accumulate(a.0, g.dot(&graph.value(b).t()));
                store.accumulate(b.0, graph.value(a).t().dot(g));
            })),
        )
    }

    /// Add a 1xC bias row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let (_, c) = self.shape(x);
        assert_eq!(self.shape(bias), (1, c), "add_bias: bias shape mismatch");
        let value = self.value(x) + self.value(bias);
        self.push(
            value,
            Some(Box::new(move |_, g, store| {
                store.accumulate(x.0, g.clone());
                store.accumulate(bias.0, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            })),
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| if v > T::zero() { v } else { T::zero() });
        self.push(
            value,
            Some(Box::new(move |graph, g, store| {
                let mask = graph.value(x).mapv(|v| if v > T::zero() { T::one() } else { T::zero() });
                store.accumulate(x.0, g * &mask);
            })),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| T::one() / (T::one() + (-v).exp()));
        let out = self.push(value, None);
        self.nodes[out.0].backward = Some(Box::new(move |graph, g, store| {
            let y = graph.value(out);
            store.accumulate(x.0, g * &y.mapv(|s| s * (T::one() - s)));
        }));
        out
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v.tanh());
        let out = self.push(value, None);
        self.nodes[out.0].backward = Some(Box::new(move |graph, g, store| {
            let y = graph.value(out);
            store.accumulate(x.0, g * &y.mapv(|t| T::one() - t * t));
        }));
        out
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        assert_eq!(ra, rb, "concat_cols: row count mismatch");
        let mut value = Array2::zeros((ra, ca + cb));
        value.slice_mut(ndarray::s![.., ..ca]).assign(self.value(a));
        value.slice_mut(ndarray::s![.., ca..]).assign(self.value(b));
        self.push(
            value,
            Some(Box::new(move |_, g, store| {
                store.accumulate(a.0, g.slice(ndarray::s![.., ..ca]).to_owned());
                store.accumulate(b.0, g.slice(ndarray::s![.., ca..]).to_owned());
            })),
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: T = self.value(x).iter().copied().sum();
        let shape = self.shape(x);
        self.push(
            Array2::from_elem((1, 1), s),
            Some(Box::new(move |_, g, store| {
                store.accumulate(x.0, Array2::from_elem(shape, g[(0, 0)]));
            })),
        )
    }

    /// Select rows of `x` by index (duplicates allowed).
    pub fn gather_rows(&mut self, x: Var, indices: Arc<Vec<usize>>) -> Var {
        let (_, c) = self.shape(x);
        let src = self.value(x);
        let mut value = Array2::zeros((indices.len(), c));
        for (out_r, &r) in indices.iter().enumerate() {
            value.row_mut(out_r).assign(&src.row(r));
        }
        let xs = self.shape(x);
        let idx = indices;
        self.push(
            value,
            Some(Box::new(move |_, g, store| {
                let mut dx = Array2::zeros(xs);
                for (out_r, &r) in idx.iter().enumerate() {
                    let mut row = dx.row_mut(r);
                    row += &g.row(out_r);
                }
                store.accumulate(x.0, dx);
            })),
        )
    }

    /// Zero-pad `x` with extra rows at the bottom.
    pub fn pad_rows(&mut self, x: Var, new_rows: usize) -> Var {
        let (r, c) = self.shape(x);
        assert!(new_rows >= r, "pad_rows: cannot shrink ({r} -> {new_rows})");
        let mut value = Array2::zeros((new_rows, c));
        value.slice_mut(ndarray::s![..r, ..]).assign(self.value(x));
        self.push(
            value,
            Some(Box::new(move |_, g, store| {
                store.accumulate(x.0, g.slice(ndarray::s![..r, ..]).to_owned());
            })),
        )
    }

    // ----- loss -----

    /// Mean softmax cross-entropy over rows whose label is not
    /// `ignore_label`. Fails when every row is ignored.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        labels: Arc<Vec<i64>>,
        ignore_label: i64,
    ) -> Result<Var, AdError> {
        let (m, k) = self.shape(logits);
        assert_eq!(labels.len(), m, "cross_entropy: label count mismatch");
        let x = self.value(logits);
        let mut total = T::zero();
        let mut count = 0usize;
        for (r, &lab) in labels.iter().enumerate() {
            if lab == ignore_label {
                continue;
            }
            assert!((lab as usize) < k, "label {lab} out of range for {k} classes");
            let row = x.row(r);
            let maxv = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = maxv + row.iter().map(|&v| (v - maxv).exp()).sum::<T>().ln();
            total += lse - row[lab as usize];
            count += 1;
        }
        if count == 0 {
            return Err(AdError::AllIgnored);
        }
        let inv = T::one() / T::from_real(count as f64);
        let value = Array2::from_elem((1, 1), total * inv);
        let labs = labels;
        Ok(self.push(
            value,
            Some(Box::new(move |graph, g, store| {
                let x = graph.value(logits);
                let scale = g[(0, 0)] * inv;
                let mut dx = Array2::zeros((m, k));
                for (r, &lab) in labs.iter().enumerate() {
                    if lab == ignore_label {
                        continue;
                    }
                    let row = x.row(r);
                    let maxv = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let z: T = row.iter().map(|&v| (v - maxv).exp()).sum();
                    for c in 0..k {
                        let p = (row[c] - maxv).exp() / z;
                        let onehot = if c == lab as usize { T::one() } else { T::zero() };
                        dx[(r, c)] = (p - onehot) * scale;
                    }
                }
                store.accumulate(logits.0, dx);
            })),
        ))
    }

    // ----- grouped reductions -----

    /// Per-group column-wise max over contiguous row ranges of `records`.
    /// `offsets` has one more entry than groups; group g covers rows
    /// offsets[g]..offsets[g+1]. Empty groups produce a zero row.
    pub fn group_max(&mut self, records: Var, offsets: Arc<Vec<usize>>) -> Var {
        let (m, c) = self.shape(records);
        let n_groups = offsets.len() - 1;
        assert_eq!(*offsets.last().unwrap(), m, "group_max: offsets must cover rows");
        let src = self.value(records);
        // argmax per (group, column), captured for the backward route
        let results: Vec<(Vec<T>, Vec<usize>)> = map_indexed(n_groups, |g| {
            let (start, end) = (offsets[g], offsets[g + 1]);
            let mut vals = vec![T::zero(); c];
            let mut args = vec![usize::MAX; c];
            if start < end {
                for col in 0..c {
                    let mut best = src[(start, col)];
                    let mut best_r = start;
                    for r in (start + 1)..end {
                        if src[(r, col)] > best {
                            best = src[(r, col)];
                            best_r = r;
                        }
                    }
                    vals[col] = best;
                    args[col] = best_r;
                }
            }
            (vals, args)
        });
        let mut value = Array2::zeros((n_groups, c));
        let mut argmax = Vec::with_capacity(n_groups);
        for (g, (vals, args)) in results.into_iter().enumerate() {
            for col in 0..c {
                value[(g, col)] = vals[col];
            }
            argmax.push(args);
        }
        let argmax = Arc::new(argmax);
        self.push(
            value,
            Some(Box::new(move |_, g, store| {
                let mut dx = Array2::zeros((m, c));
                for (grp, args) in argmax.iter().enumerate() {
                    for col in 0..c {
                        if args[col] != usize::MAX {
                            dx[(args[col], col)] += g[(grp, col)];
                        }
                    }
                }
                store.accumulate(records.0, dx);
            })),
        )
    }

    /// Per-group mean of rows of `x`. `group_of_row[r]` assigns each row to
    /// exactly one group; empty groups produce a zero row.
    pub fn group_mean(&mut self, x: Var, group_of_row: Arc<Vec<usize>>, n_groups: usize) -> Var {
        let (m, c) = self.shape(x);
        assert_eq!(group_of_row.len(), m, "group_mean: assignment length mismatch");
        let src = self.value(x);
        let mut counts = vec![0usize; n_groups];
        for &g in group_of_row.iter() {
            counts[g] += 1;
        }
        let mut value = Array2::zeros((n_groups, c));
        for (r, &g) in group_of_row.iter().enumerate() {
            let mut row = value.row_mut(g);
            row += &src.row(r);
        }
        for g in 0..n_groups {
            if counts[g] > 0 {
                let inv = T::one() / T::from_real(counts[g] as f64);
                value.row_mut(g).mapv_inplace(|v| v * inv);
            }
        }
        let counts = Arc::new(counts);
        self.push(
            value,
            Some(Box::new(move |_, g, store| {
                let mut dx = Array2::zeros((m, c));
                for (r, &grp) in group_of_row.iter().enumerate() {
                    let inv = T::one() / T::from_real(counts[grp] as f64);
                    let mut row = dx.row_mut(r);
                    row.zip_mut_with(&g.row(grp), |d, &gg| *d += gg * inv);
                }
                store.accumulate(x.0, dx);
            })),
        )
    }

    // ----- lattice-specific kernels -----

    /// out[p] = sum_i weights[p][i] * values[rows[p][i]] with constant
    /// weights; absent rows contribute zero. Used by slicing and upsampling.
    pub fn simplex_gather(
        &mut self,
        values: Var,
        footprint: Arc<Vec<Vec<(Option<usize>, f64)>>>,
    ) -> Var {
        let (k, c) = self.shape(values);
        let src = self.value(values);
        let rows: Vec<Vec<T>> = map_indexed(footprint.len(), |p| {
            let mut acc = vec![T::zero(); c];
            for &(row, w) in &footprint[p] {
                if let Some(r) = row {
                    let w = T::from_real(w);
                    for (a, &v) in acc.iter_mut().zip(src.row(r)) {
                        *a += w * v;
                    }
                }
            }
            acc
        });
        let mut value = Array2::zeros((footprint.len(), c));
        for (p, row) in rows.into_iter().enumerate() {
            for (col, v) in row.into_iter().enumerate() {
                value[(p, col)] = v;
            }
        }
        let fp = footprint;
        self.push(
            value,
            Some(Box::new(move |_, g, store| {
                let mut dv = Array2::zeros((k, c));
                for (p, corners) in fp.iter().enumerate() {
                    for &(row, w) in corners {
                        if let Some(r) = row {
                            let w = T::from_real(w);
                            let mut drow = dv.row_mut(r);
                            drow.zip_mut_with(&g.row(p), |d, &gg| *d += w * gg);
                        }
                    }
                }
                store.accumulate(values.0, dv);
            })),
        )
    }

    /// Like `simplex_gather` but the per-corner weights are a tape tensor of
    /// shape (points, corners). Gradients flow to both values and weights.
    pub fn simplex_gather_weighted(
        &mut self,
        values: Var,
        weights: Var,
        corners: Arc<Vec<Vec<Option<usize>>>>,
    ) -> Var {
        let (k, c) = self.shape(values);
        let (m, n_corner) = self.shape(weights);
        assert_eq!(corners.len(), m, "simplex_gather_weighted: corner count mismatch");
        let src = self.value(values);
        let w = self.value(weights);
        let mut value = Array2::zeros((m, c));
        for (p, cs) in corners.iter().enumerate() {
            assert_eq!(cs.len(), n_corner);
            for (i, &row) in cs.iter().enumerate() {
                if let Some(r) = row {
                    let wi = w[(p, i)];
                    let mut out = value.row_mut(p);
                    out.zip_mut_with(&src.row(r), |o, &v| *o += wi * v);
                }
            }
        }
        self.push(
            value,
            Some(Box::new(move |graph, g, store| {
                let src = graph.value(values);
                let w = graph.value(weights);
                let mut dv = Array2::zeros((k, c));
                let mut dw = Array2::zeros((m, n_corner));
                for (p, cs) in corners.iter().enumerate() {
                    for (i, &row) in cs.iter().enumerate() {
                        if let Some(r) = row {
                            let wi = w[(p, i)];
                            let mut drow = dv.row_mut(r);
                            drow.zip_mut_with(&g.row(p), |d, &gg| *d += wi * gg);
                            dw[(p, i)] = g
                                .row(p)
                                .iter()
                                .zip(src.row(r))
                                .map(|(&gg, &v)| gg * v)
                                .sum();
                        }
                    }
                }
                store.accumulate(values.0, dv);
                store.accumulate(weights.0, dw);
            })),
        )
    }

    /// Concatenate the corner value rows of each point into one wide row;
    /// absent corners contribute zeros.
    pub fn gather_corners(&mut self, values: Var, corners: Arc<Vec<Vec<Option<usize>>>>) -> Var {
        let (k, c) = self.shape(values);
        let n_corner = corners.first().map_or(0, Vec::len);
        let src = self.value(values);
        let m = corners.len();
        let mut value = Array2::zeros((m, n_corner * c));
        for (p, cs) in corners.iter().enumerate() {
            for (i, &row) in cs.iter().enumerate() {
                if let Some(r) = row {
                    value
                        .slice_mut(ndarray::s![p, i * c..(i + 1) * c])
                        .assign(&src.row(r));
                }
            }
        }
        self.push(
            value,
            Some(Box::new(move |_, g, store| {
                let mut dv = Array2::zeros((k, c));
                for (p, cs) in corners.iter().enumerate() {
                    for (i, &row) in cs.iter().enumerate() {
                        if let Some(r) = row {
                            let mut drow = dv.row_mut(r);
                            drow.zip_mut_with(&g.slice(ndarray::s![p, i * c..(i + 1) * c]), |d, &gg| {
                                *d += gg
                            });
                        }
                    }
                }
                store.accumulate(values.0, dv);
            })),
        )
    }

    /// Sparse lattice convolution. `adjacency[v]` lists the 2(d+1) one-hop
    /// neighbor rows of vertex v in tap order (None = unallocated, counts as
    /// zero). `weights` is ((taps+1)*cin, cout) with tap 0 the center vertex;
    /// `bias` is (1, cout).
    pub fn lattice_conv(
        &mut self,
        values: Var,
        weights: Var,
        bias: Var,
        adjacency: Arc<Vec<Vec<Option<usize>>>>,
    ) -> Var {
        let (k, cin) = self.shape(values);
        assert_eq!(adjacency.len(), k, "lattice_conv: adjacency length mismatch");
        let n_taps = adjacency.first().map_or(0, Vec::len) + 1;
        let (wr, cout) = self.shape(weights);
        assert_eq!(wr, n_taps * cin, "lattice_conv: weight rows != taps*cin");
        assert_eq!(self.shape(bias), (1, cout), "lattice_conv: bias shape mismatch");

        let gathered = gather_taps(self.value(values), &adjacency);
        let value = gathered.dot(self.value(weights)) + self.value(bias);
        let adj = adjacency;
        self.push(
            value,
            Some(Box::new(move |graph, g, store| {
                let src = graph.value(values);
                let w = graph.value(weights);
                let gathered = gather_taps(src, &adj);
                store.accumulate(weights.0, gathered.t().dot(g));
                store.accumulate(bias.0, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                // dGathered = g . W^T, scattered back through the (symmetric)
                // adjacency: u receives the tap-t block of dGathered at v iff
                // v is u's opposite-tap neighbor.
                let dg = g.dot(&w.t());
                let rows: Vec<Vec<T>> = map_indexed(k, |u| {
                    let mut acc: Vec<T> = dg.slice(ndarray::s![u, ..cin]).to_vec();
                    for (tap, &n) in adj[u].iter().enumerate() {
                        let opp = crate::lattice::opposite_tap(tap);
                        if let Some(v) = n {
                            let block = (opp + 1) * cin;
                            for (a, &d) in acc.iter_mut().zip(dg.slice(ndarray::s![v, block..block + cin])) {
                                *a += d;
                            }
                        }
                    }
                    acc
                });
                let mut dv = Array2::zeros((k, cin));
                for (u, row) in rows.into_iter().enumerate() {
                    for (col, v) in row.into_iter().enumerate() {
                        dv[(u, col)] = v;
                    }
                }
                store.accumulate(values.0, dv);
            })),
        )
    }

    /// Abstract-flow neighbor aggregation: for each vertex v with current
    /// feature x_v, weight the previous-timestep one-hop neighbor features
    /// h_i by w_i = (alpha - min(dist(x_v, h_i), alpha)) * beta and sum them.
    /// `adjacency[v]` holds only neighbors that existed at the previous
    /// timestep; absent neighbors are skipped entirely.
    pub fn aflow_gather(
        &mut self,
        x: Var,
        h_prev: Var,
        alpha: Var,
        beta: Var,
        adjacency: Arc<Vec<Vec<Option<usize>>>>,
    ) -> Var {
        let (k, c) = self.shape(x);
        assert_eq!(self.shape(h_prev), (k, c), "aflow: state shape mismatch");
        assert_eq!(self.shape(alpha), (1, 1));
        assert_eq!(self.shape(beta), (1, 1));
        assert_eq!(adjacency.len(), k);

        let value = {
            let xv = self.value(x);
            let hv = self.value(h_prev);
            let a = self.value(alpha)[(0, 0)];
            let b = self.value(beta)[(0, 0)];
            let rows: Vec<Vec<T>> = map_indexed(k, |v| {
                let mut acc = vec![T::zero(); c];
                for &n in &adjacency[v] {
                    if let Some(i) = n {
                        let dist = euclid(&xv.row(v), &hv.row(i));
                        let w = (a - dist.min(a)) * b;
                        for (s, &hval) in acc.iter_mut().zip(hv.row(i)) {
                            *s += hval * w;
                        }
                    }
                }
                acc
            });
            let mut out = Array2::zeros((k, c));
            for (v, row) in rows.into_iter().enumerate() {
                for (col, val) in row.into_iter().enumerate() {
                    out[(v, col)] = val;
                }
            }
            out
        };
        let adj = adjacency;
        self.push(
            value,
            Some(Box::new(move |graph, g, store| {
                let xv = graph.value(x);
                let hv = graph.value(h_prev);
                let a = graph.value(alpha)[(0, 0)];
                let b = graph.value(beta)[(0, 0)];
                let mut dx = Array2::zeros((k, c));
                let mut dh = Array2::zeros((k, c));
                let mut da = T::zero();
                let mut db = T::zero();
                for v in 0..k {
                    let gr = g.row(v);
                    for &n in &adj[v] {
                        let i = match n {
                            Some(i) => i,
                            None => continue,
                        };
                        let dist = euclid(&xv.row(v), &hv.row(i));
                        let clamped = dist.min(a);
                        let w = (a - clamped) * b;
                        // dL/dw = g . h_i
                        let g_dot_h: T = gr.iter().zip(hv.row(i)).map(|(&gg, &h)| gg * h).sum();
                        // direct h_i path
                        {
                            let mut drow = dh.row_mut(i);
                            drow.zip_mut_with(&gr, |d, &gg| *d += w * gg);
                        }
                        db += g_dot_h * (a - clamped);
                        if dist < a {
                            da += g_dot_h * b;
                            // w depends on dist; dist depends on x_v and h_i.
                            // At dist == 0 the norm is not differentiable; use
                            // the zero subgradient.
                            if dist > T::zero() {
                                let scale = -b * g_dot_h / dist;
                                for col in 0..c {
                                    let diff = xv[(v, col)] - hv[(i, col)];
                                    dx[(v, col)] += scale * diff;
                                    dh[(i, col)] -= scale * diff;
                                }
                            }
                        }
                    }
                }
                store.accumulate(x.0, dx);
                store.accumulate(h_prev.0, dh);
                store.accumulate(alpha.0, Array2::from_elem((1, 1), da));
                store.accumulate(beta.0, Array2::from_elem((1, 1), db));
            })),
        )
    }
}

fn euclid<T: Scalar>(a: &ndarray::ArrayView1<T>, b: &ndarray::ArrayView1<T>) -> T {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<T>()
        .sqrt()
}

/// Build the (k, (taps+1)*cin) matrix whose row v concatenates the center
/// value row and the neighbor value rows in tap order (zeros when absent).
fn gather_taps<T: Scalar>(src: &Array2<T>, adjacency: &[Vec<Option<usize>>]) -> Array2<T> {
    let k = src.nrows();
    let cin = src.ncols();
    let n_neighbors = adjacency.first().map_or(0, Vec::len);
    let rows: Vec<Vec<T>> = map_indexed(k, |v| {
        let mut row = vec![T::zero(); (n_neighbors + 1) * cin];
        row[..cin].copy_from_slice(src.row(v).to_slice().expect("contiguous row"));
        for (tap, &n) in adjacency[v].iter().enumerate() {
            if let Some(u) = n {
                let block = (tap + 1) * cin;
                row[block..block + cin]
                    .copy_from_slice(src.row(u).to_slice().expect("contiguous row"));
            }
        }
        row
    });
    let mut out = Array2::zeros((k, (n_neighbors + 1) * cin));
    for (v, row) in rows.into_iter().enumerate() {
        for (col, val) in row.into_iter().enumerate() {
            out[(v, col)] = val;
        }
    }
    out
}
