//! Cross-timestep state fusion over the shared lattice: zero-padding
//! alignment, row-wise GRU and LSTM cells, the abstract-flow module, and
//! flow direction extraction.

use std::sync::Arc;

use ndarray::Array2;
use thiserror::Error;

use crate::autodiff::{Graph, Scalar, Var};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("lattice shrank between timesteps: previous {prev} vertices, current {current}")]
    ShrunkLattice { prev: usize, current: usize },
    #[error("{what}: expected shape {expected:?}, got {got:?}")]
    ShapeMismatch {
        what: &'static str,
        expected: (usize, usize),
        got: (usize, usize),
    },
}

/// Hidden (and, for LSTM, cell) state written at a past timestep, aligned to
/// the shared lattice's row order at that time.
#[derive(Debug, Clone, Copy)]
pub struct TemporalState {
    pub hidden: Var,
    pub cell: Option<Var>,
    pub vertex_count_at_write: usize,
}

impl TemporalState {
    pub fn new(hidden: Var, count: usize) -> Self {
        TemporalState {
            hidden,
            cell: None,
            vertex_count_at_write: count,
        }
    }

    pub fn with_cell(mut self, cell: Var) -> Self {
        self.cell = Some(cell);
        self
    }
}

/// Zero-pad a previous state up to the current vertex count. Rows written at
/// the previous timestep are copied verbatim; new vertices get zero rows.
/// The cell state, when present, is padded identically. A shrinking lattice
/// is an invariant violation and a hard error.
pub fn align_states<T: Scalar>(
    g: &mut Graph<T>,
    prev: &TemporalState,
    current_vertex_count: usize,
) -> Result<TemporalState, FusionError> {
    if current_vertex_count < prev.vertex_count_at_write {
        return Err(FusionError::ShrunkLattice {
            prev: prev.vertex_count_at_write,
            current: current_vertex_count,
        });
    }
    let hidden = if current_vertex_count == prev.vertex_count_at_write {
        prev.hidden
    } else {
        g.pad_rows(prev.hidden, current_vertex_count)
    };
    let cell = prev.cell.map(|c| {
        if current_vertex_count == prev.vertex_count_at_write {
            c
        } else {
            g.pad_rows(c, current_vertex_count)
        }
    });
    Ok(TemporalState {
        hidden,
        cell,
        vertex_count_at_write: current_vertex_count,
    })
}

/// GRU gate parameters; each weight maps the 2c-wide concatenation [x, h]
/// (or [x, r*h] for the candidate) to c channels.
#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    pub w_z: Var,
    pub b_z: Var,
    pub w_r: Var,
    pub b_r: Var,
    pub w_n: Var,
    pub b_n: Var,
}

fn check_aligned<T: Scalar>(
    g: &Graph<T>,
    what: &'static str,
    a: Var,
    b: Var,
) -> Result<(), FusionError> {
    if g.shape(a) != g.shape(b) {
        return Err(FusionError::ShapeMismatch {
            what,
            expected: g.shape(a),
            got: g.shape(b),
        });
    }
    Ok(())
}

/// Row-wise GRU: z = sigmoid(W_z[x,h] + b_z), r = sigmoid(W_r[x,h] + b_r),
/// n = tanh(W_n[x, r*h] + b_n), h' = (1-z)*n + z*h.
pub fn gru_fuse<T: Scalar>(
    g: &mut Graph<T>,
    h_prev: Var,
    x: Var,
    params: &GruVars,
) -> Result<Var, FusionError> {
    check_aligned(g, "gru inputs", x, h_prev)?;
    let xh = g.concat_cols(x, h_prev);
    let z = g.matmul(xh, params.w_z);
    let z = g.add_bias(z, params.b_z);
    let z = g.sigmoid(z);
    let r = g.matmul(xh, params.w_r);
    let r = g.add_bias(r, params.b_r);
    let r = g.sigmoid(r);
    let rh = g.mul(r, h_prev);
    let xrh = g.concat_cols(x, rh);
    let n = g.matmul(xrh, params.w_n);
    let n = g.add_bias(n, params.b_n);
    let n = g.tanh(n);
    // (1-z)*n + z*h = n - z*n + z*h
    let zn = g.mul(z, n);
    let zh = g.mul(z, h_prev);
    let keep = g.sub(n, zn);
    Ok(g.add(keep, zh))
}

/// LSTM gate parameters; each weight maps [x, h] (2c wide) to c channels.
#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub w_i: Var,
    pub b_i: Var,
    pub w_f: Var,
    pub b_f: Var,
    pub w_o: Var,
    pub b_o: Var,
    pub w_g: Var,
    pub b_g: Var,
}

/// Row-wise LSTM: i, f, o = sigmoid gates on [x,h], g = tanh candidate,
/// c' = f*c + i*g, h' = o*tanh(c').
pub fn lstm_fuse<T: Scalar>(
    g: &mut Graph<T>,
    h_prev: Var,
    c_prev: Var,
    x: Var,
    params: &LstmVars,
) -> Result<(Var, Var), FusionError> {
    check_aligned(g, "lstm inputs", x, h_prev)?;
    check_aligned(g, "lstm cell", x, c_prev)?;
    let xh = g.concat_cols(x, h_prev);
    let gate = |g: &mut Graph<T>, w: Var, b: Var| {
        let v = g.matmul(xh, w);
        let v = g.add_bias(v, b);
        g.sigmoid(v)
    };
    let i = gate(g, params.w_i, params.b_i);
    let f = gate(g, params.w_f, params.b_f);
    let o = gate(g, params.w_o, params.b_o);
    let cand = g.matmul(xh, params.w_g);
    let cand = g.add_bias(cand, params.b_g);
    let cand = g.tanh(cand);
    let fc = g.mul(f, c_prev);
    let ig = g.mul(i, cand);
    let c_new = g.add(fc, ig);
    let tc = g.tanh(c_new);
    let h_new = g.mul(o, tc);
    Ok((h_new, c_new))
}

/// Abstract-flow parameters: the learnable scalars of the neighbor weighting
/// plus the fusing linear layer (2c -> c).
#[derive(Debug, Clone, Copy)]
pub struct AFlowVars {
    pub alpha: Var,
    pub beta: Var,
    pub w: Var,
    pub b: Var,
}

/// Initial value of the abstract-flow scalars.
pub const AFLOW_SCALAR_INIT: f32 = 0.1;

/// Abstract flow: weight previous-timestep one-hop neighbor features by
/// feature-space proximity, w_i = (alpha - min(dist, alpha)) * beta, sum
/// them into l_v, then fuse ReLU(W [x_v, l_v] + b). `adjacency[v]` must list
/// only neighbors allocated at the previous timestep; missing neighbors are
/// skipped, never zero-filled.
pub fn aflow_fuse<T: Scalar>(
    g: &mut Graph<T>,
    adjacency: &Arc<Vec<Vec<Option<usize>>>>,
    h_prev: Var,
    x: Var,
    params: &AFlowVars,
) -> Result<Var, FusionError> {
    check_aligned(g, "aflow inputs", x, h_prev)?;
    let (_, c) = g.shape(x);
    if g.shape(params.w).0 != 2 * c {
        return Err(FusionError::ShapeMismatch {
            what: "aflow fuse weights",
            expected: (2 * c, g.shape(params.w).1),
            got: g.shape(params.w),
        });
    }
    let l = g.aflow_gather(x, h_prev, params.alpha, params.beta, adjacency.clone());
    let cat = g.concat_cols(x, l);
    let out = g.matmul(cat, params.w);
    let out = g.add_bias(out, params.b);
    Ok(g.relu(out))
}

/// Restrict an adjacency to neighbors that existed at the previous timestep
/// (row index below `prev_count`); later rows belong to vertices allocated
/// this timestep, whose previous state does not exist.
pub fn restrict_to_previous(
    adjacency: &[Vec<Option<usize>>],
    prev_count: usize,
) -> Arc<Vec<Vec<Option<usize>>>> {
    Arc::new(
        adjacency
            .iter()
            .map(|taps| {
                taps.iter()
                    .map(|&n| n.filter(|&r| r < prev_count))
                    .collect()
            })
            .collect(),
    )
}

/// Coarse motion direction per vertex: the vector from the vertex's own
/// point centroid to the centroid of the previous-timestep neighbor whose
/// feature is closest to x_v. Zero when no neighbor (or centroid) is
/// available. Arrows point toward where the matching feature was, i.e.
/// inverse to the motion.
pub fn aflow_direction(
    adjacency: &[Vec<Option<usize>>],
    h_prev: &Array2<f32>,
    x: &Array2<f32>,
    centroids: &[Option<[f64; 3]>],
) -> Vec<[f64; 3]> {
    let k = adjacency.len();
    assert_eq!(x.nrows(), k, "aflow_direction: feature row mismatch");
    (0..k)
        .map(|v| {
            let own = match centroids.get(v).copied().flatten() {
                Some(c) => c,
                None => return [0.0; 3],
            };
            let mut best: Option<(f64, usize)> = None;
            for &n in &adjacency[v] {
                let i = match n {
                    Some(i) => i,
                    None => continue,
                };
                if centroids.get(i).copied().flatten().is_none() {
                    continue;
                }
                let dist: f64 = x
                    .row(v)
                    .iter()
                    .zip(h_prev.row(i))
                    .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                    .sum::<f64>()
                    .sqrt();
                if best.map_or(true, |(d, _)| dist < d) {
                    best = Some((dist, i));
                }
            }
            match best {
                Some((_, i)) => {
                    let tgt = centroids[i].unwrap();
                    [tgt[0] - own[0], tgt[1] - own[1], tgt[2] - own[2]]
                }
                None => [0.0; 3],
            }
        })
        .collect()
}
