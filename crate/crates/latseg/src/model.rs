//! The full recurrent segmentation network: a U-shaped stack of lattice
//! operators with four temporal fusion sites, sequence forward with BPTT
//! taping, recursive single-cloud inference, and checkpointing.

use std::collections::HashMap;
use std::io::{Read as _, Write as _};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::optim::{AdamConfig, AdamState};
use crate::autodiff::{AdError, Graph, Var};
use crate::cloud::PointCloud;
use crate::fusion::{
    aflow_fuse, align_states, gru_fuse, lstm_fuse, restrict_to_previous, AFlowVars, FusionError,
    GruVars, LstmVars, TemporalState, AFLOW_SCALAR_INIT,
};
use crate::lattice::SparseLattice;
use crate::ops::{
    adjacency, coarsen_keys, conv_taps, deform_slice, distribute, downsample_values,
    pointnet_aggregate, pointnet_records, resnet_block, upsample, ConvVars, Distribution, MlpVars,
    OpError,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown fusion cell name: {0:?}")]
    UnknownFusionToken(String),
    #[error("fusion spec must have exactly 4 hyphen-separated slots, got {0}")]
    WrongSlotCount(usize),
    #[error("empty cloud sequence")]
    EmptySequence,
    #[error("inference state belongs to sequence {expected}, got {got}")]
    SequenceMismatch { expected: u64, got: u64 },
    #[error("label count {0} != point count {1}")]
    LabelCount(usize, usize),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Op(#[from] OpError),
    #[error(transparent)]
    Autodiff(#[from] AdError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Temporal fusion cell placed at one of the four sites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionKind {
    Gru,
    Lstm,
    AFlow,
    None,
}

impl FusionKind {
    fn parse(token: &str) -> Result<Self, ModelError> {
        match token {
            "GRU" => Ok(FusionKind::Gru),
            "LSTM" => Ok(FusionKind::Lstm),
            "AFlow" => Ok(FusionKind::AFlow),
            "/" => Ok(FusionKind::None),
            other => Err(ModelError::UnknownFusionToken(other.to_string())),
        }
    }

    fn name(self) -> &'static str {
        match self {
            FusionKind::Gru => "GRU",
            FusionKind::Lstm => "LSTM",
            FusionKind::AFlow => "AFlow",
            FusionKind::None => "/",
        }
    }
}

/// The four fusion sites in network order (early, middle, bottleneck, late),
/// written in hyphen notation, e.g. "GRU-GRU-AFlow-GRU"; "/" disables a
/// site.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionSpec {
    pub early: FusionKind,
    pub middle: FusionKind,
    pub bottleneck: FusionKind,
    pub late: FusionKind,
}

impl FusionSpec {
    pub fn sites(&self) -> [FusionKind; 4] {
        [self.early, self.middle, self.bottleneck, self.late]
    }

    pub fn has_fusion(&self) -> bool {
        self.sites().iter().any(|&k| k != FusionKind::None)
    }
}

impl FromStr for FusionSpec {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, ModelError> {
        let tokens: Vec<&str> = s.split('-').collect();
        if tokens.len() != 4 {
            return Err(ModelError::WrongSlotCount(tokens.len()));
        }
        Ok(FusionSpec {
            early: FusionKind::parse(tokens[0])?,
            middle: FusionKind::parse(tokens[1])?,
            bottleneck: FusionKind::parse(tokens[2])?,
            late: FusionKind::parse(tokens[3])?,
        })
    }
}

impl std::fmt::Display for FusionSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}-{}-{}-{}",
            self.early.name(),
            self.middle.name(),
            self.bottleneck.name(),
            self.late.name()
        )
    }
}

/// How a training/inference sample is assembled from a stream of clouds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceConfig {
    /// Clouds per sample.
    pub n: usize,
    /// Stride between the selected clouds in the stream.
    pub s: usize,
    /// Lattice scale (meters per lattice unit, per axis).
    pub sigma: f64,
    pub use_reflectance: bool,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        SequenceConfig {
            n: 4,
            s: 3,
            sigma: 0.6,
            use_reflectance: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Channel widths of the three lattice levels, finest first.
    pub channels: (usize, usize, usize),
    pub classes: usize,
    /// Per-point feature channels beyond position (1 with reflectance).
    pub point_feature_dim: usize,
    /// Hidden width of the slice offset network.
    pub offset_hidden: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: (16, 32, 64),
            classes: 6,
            point_feature_dim: 1,
            offset_hidden: 16,
            seed: 42,
        }
    }
}

/// Named parameter storage with a stable order (checkpoint and optimizer
/// order).
#[derive(Debug, Clone)]
pub struct ParamSet {
    names: Vec<String>,
    arrays: Vec<Array2<f32>>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            arrays: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, array: Array2<f32>) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.arrays.push(array);
    }

    pub fn get(&self, name: &str) -> &Array2<f32> {
        &self.arrays[self.index[name]]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<f32> {
        &mut self.arrays[self.index[name]]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn arrays(&self) -> &[Array2<f32>] {
        &self.arrays
    }

    pub fn arrays_mut(&mut self) -> &mut [Array2<f32>] {
        &mut self.arrays
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub spec: FusionSpec,
    pub config: ModelConfig,
    pub params: ParamSet,
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f32> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| {
        (rng.gen::<f64>() * 2.0 - 1.0) as f32 * bound as f32
    })
}

fn add_conv(ps: &mut ParamSet, rng: &mut ChaCha8Rng, prefix: &str, cin: usize, cout: usize) {
    let taps = conv_taps(3);
    ps.add(&format!("{prefix}.w"), xavier(rng, taps * cin, cout));
    ps.add(&format!("{prefix}.b"), Array2::zeros((1, cout)));
}

fn add_resnet(ps: &mut ParamSet, rng: &mut ChaCha8Rng, prefix: &str, c: usize) {
    add_conv(ps, rng, &format!("{prefix}.c1"), c, c);
    add_conv(ps, rng, &format!("{prefix}.c2"), c, c);
}

fn add_linear(ps: &mut ParamSet, rng: &mut ChaCha8Rng, prefix: &str, cin: usize, cout: usize) {
    ps.add(&format!("{prefix}.w"), xavier(rng, cin, cout));
    ps.add(&format!("{prefix}.b"), Array2::zeros((1, cout)));
}

fn add_fusion(ps: &mut ParamSet, rng: &mut ChaCha8Rng, prefix: &str, kind: FusionKind, c: usize) {
    match kind {
        FusionKind::None => {}
        FusionKind::Gru => {
            for gate in ["z", "r", "n"] {
                add_linear(ps, rng, &format!("{prefix}.{gate}"), 2 * c, c);
            }
        }
        FusionKind::Lstm => {
            for gate in ["i", "f", "o", "g"] {
                add_linear(ps, rng, &format!("{prefix}.{gate}"), 2 * c, c);
            }
        }
        FusionKind::AFlow => {
            ps.add(
                &format!("{prefix}.alpha"),
                Array2::from_elem((1, 1), AFLOW_SCALAR_INIT),
            );
            ps.add(
                &format!("{prefix}.beta"),
                Array2::from_elem((1, 1), AFLOW_SCALAR_INIT),
            );
            add_linear(ps, rng, &format!("{prefix}.fuse"), 2 * c, c);
        }
    }
}

impl Model {
    pub fn new(spec: FusionSpec, config: ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (c0, c1, c2) = config.channels;
        let site_widths = [c0, c0, c2, c0];
        let mut ps = ParamSet::new();

        add_linear(&mut ps, &mut rng, "pointnet", 3 + config.point_feature_dim, c0);
        add_fusion(&mut ps, &mut rng, "early", spec.early, site_widths[0]);
        add_resnet(&mut ps, &mut rng, "res1a", c0);
        add_resnet(&mut ps, &mut rng, "res1b", c0);
        add_fusion(&mut ps, &mut rng, "middle", spec.middle, site_widths[1]);
        add_linear(&mut ps, &mut rng, "down1", c0, c1);
        add_resnet(&mut ps, &mut rng, "res2", c1);
        add_linear(&mut ps, &mut rng, "down2", c1, c2);
        add_resnet(&mut ps, &mut rng, "res3", c2);
        add_fusion(&mut ps, &mut rng, "bottleneck", spec.bottleneck, site_widths[2]);
        add_linear(&mut ps, &mut rng, "up1", c2 + c1, c1);
        add_resnet(&mut ps, &mut rng, "res4", c1);
        add_linear(&mut ps, &mut rng, "up2", c1 + c0, c0);
        add_fusion(&mut ps, &mut rng, "late", spec.late, site_widths[3]);
        add_resnet(&mut ps, &mut rng, "res5", c0);
        add_linear(&mut ps, &mut rng, "slice.l1", 4 * c0, config.offset_hidden);
        add_linear(&mut ps, &mut rng, "slice.l2", config.offset_hidden, 4);
        add_linear(&mut ps, &mut rng, "head", c0, config.classes);

        Model {
            spec,
            config,
            params: ps,
        }
    }
}

/// Graph-registered parameter handles, parallel to `ParamSet` order.
pub struct ParamVars {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl ParamVars {
    pub fn register(g: &mut Graph<f32>, params: &ParamSet) -> Self {
        let vars = params
            .arrays()
            .iter()
            .map(|a| g.input(a.clone()))
            .collect();
        ParamVars {
            vars,
            index: params.index.clone(),
        }
    }

    pub fn get(&self, name: &str) -> Var {
        self.vars[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn conv(&self, prefix: &str) -> ConvVars {
        ConvVars {
            weights: self.get(&format!("{prefix}.w")),
            bias: self.get(&format!("{prefix}.b")),
        }
    }
}

/// The three lattice levels shared across a sequence's timesteps.
#[derive(Debug, Clone)]
pub struct Lattices {
    pub fine: SparseLattice,
    pub mid: SparseLattice,
    pub coarse: SparseLattice,
}

impl Lattices {
    pub fn new() -> Self {
        // positions are pre-scaled by 1/sigma upstream, so the lattices use
        // unit scale
        Lattices {
            fine: SparseLattice::new(3, vec![1.0; 3], 0),
            mid: SparseLattice::new(3, vec![1.0; 3], 0),
            coarse: SparseLattice::new(3, vec![1.0; 3], 0),
        }
    }
}

impl Default for Lattices {
    fn default() -> Self {
        Self::new()
    }
}

/// One fusion site's state inside a live graph.
#[derive(Debug, Clone, Copy)]
struct SiteSlot {
    hidden: Var,
    cell: Option<Var>,
    count: usize,
}

/// Sequence-processing state carried between timesteps of one graph.
pub struct RunState {
    lattices: Lattices,
    sites: [Option<SiteSlot>; 4],
    t: usize,
}

impl RunState {
    pub fn new() -> Self {
        RunState {
            lattices: Lattices::new(),
            sites: [None; 4],
            t: 0,
        }
    }
}

impl Default for RunState {
    fn default() -> Self {
        Self::new()
    }
}

struct StepOutput {
    logits: Var,
    distribution: Distribution,
    fine_features: Var,
}

fn fuse_site(
    g: &mut Graph<f32>,
    pv: &ParamVars,
    kind: FusionKind,
    prefix: &str,
    slot: &mut Option<SiteSlot>,
    x: Var,
    adjacency_full: &Arc<Vec<Vec<Option<usize>>>>,
) -> Result<Var, ModelError> {
    if kind == FusionKind::None {
        return Ok(x);
    }
    let (k_now, _) = g.shape(x);
    let out = match slot.take() {
        None => {
            // first timestep: the fusion layer is bypassed, H = X; the LSTM
            // cell starts from X as well so the forget path is live at t=1
            let cell = (kind == FusionKind::Lstm).then_some(x);
            *slot = Some(SiteSlot {
                hidden: x,
                cell,
                count: k_now,
            });
            return Ok(x);
        }
        Some(prev) => {
            let prev_count = prev.count;
            let mut state = TemporalState::new(prev.hidden, prev_count);
            if let Some(c) = prev.cell {
                state = state.with_cell(c);
            }
            let aligned = align_states(g, &state, k_now)?;
            match kind {
                FusionKind::Gru => {
                    let p = GruVars {
                        w_z: pv.get(&format!("{prefix}.z.w")),
                        b_z: pv.get(&format!("{prefix}.z.b")),
                        w_r: pv.get(&format!("{prefix}.r.w")),
                        b_r: pv.get(&format!("{prefix}.r.b")),
                        w_n: pv.get(&format!("{prefix}.n.w")),
                        b_n: pv.get(&format!("{prefix}.n.b")),
                    };
                    let h = gru_fuse(g, aligned.hidden, x, &p)?;
                    *slot = Some(SiteSlot {
                        hidden: h,
                        cell: None,
                        count: k_now,
                    });
                    h
                }
                FusionKind::Lstm => {
                    let p = LstmVars {
                        w_i: pv.get(&format!("{prefix}.i.w")),
                        b_i: pv.get(&format!("{prefix}.i.b")),
                        w_f: pv.get(&format!("{prefix}.f.w")),
                        b_f: pv.get(&format!("{prefix}.f.b")),
                        w_o: pv.get(&format!("{prefix}.o.w")),
                        b_o: pv.get(&format!("{prefix}.o.b")),
                        w_g: pv.get(&format!("{prefix}.g.w")),
                        b_g: pv.get(&format!("{prefix}.g.b")),
                    };
                    let cell = aligned.cell.expect("lstm state always carries a cell");
                    let (h, c_new) = lstm_fuse(g, aligned.hidden, cell, x, &p)?;
                    *slot = Some(SiteSlot {
                        hidden: h,
                        cell: Some(c_new),
                        count: k_now,
                    });
                    h
                }
                FusionKind::AFlow => {
                    let p = AFlowVars {
                        alpha: pv.get(&format!("{prefix}.alpha")),
                        beta: pv.get(&format!("{prefix}.beta")),
                        w: pv.get(&format!("{prefix}.fuse.w")),
                        b: pv.get(&format!("{prefix}.fuse.b")),
                    };
                    let adj = restrict_to_previous(adjacency_full, prev_count);
                    let h = aflow_fuse(g, &adj, aligned.hidden, x, &p)?;
                    *slot = Some(SiteSlot {
                        hidden: h,
                        cell: None,
                        count: k_now,
                    });
                    h
                }
                FusionKind::None => unreachable!(),
            }
        }
    };
    Ok(out)
}

fn step(
    g: &mut Graph<f32>,
    model: &Model,
    pv: &ParamVars,
    run: &mut RunState,
    cloud: &PointCloud,
) -> Result<StepOutput, ModelError> {
    let spec = model.spec;
    if !spec.has_fusion() {
        // with every fusion site disabled the output depends on the current
        // cloud only, so each timestep runs on fresh lattices
        run.lattices = Lattices::new();
        run.sites = [None; 4];
    }
    let lat = &mut run.lattices;

    // level 0: scatter + PointNet
    let dist = distribute(cloud, &mut lat.fine)?;
    let (records, offsets) = pointnet_records::<f32>(&dist, cloud, &lat.fine);
    let records = g.input(records);
    let x0 = pointnet_aggregate(
        g,
        records,
        Arc::new(offsets),
        pv.get("pointnet.w"),
        pv.get("pointnet.b"),
    )?;

    let adj0 = adjacency(&lat.fine);
    let h0 = fuse_site(g, pv, spec.early, "early", &mut run.sites[0], x0, &adj0)?;
    let h0 = resnet_block(g, &adj0, h0, pv.conv("res1a.c1"), pv.conv("res1a.c2"))?;
    let h0 = resnet_block(g, &adj0, h0, pv.conv("res1b.c1"), pv.conv("res1b.c2"))?;
    let h0 = fuse_site(g, pv, spec.middle, "middle", &mut run.sites[1], h0, &adj0)?;

    // level 1
    let groups1 = Arc::new(coarsen_keys(&lat.fine, &mut lat.mid));
    let x1 = downsample_values(
        g,
        groups1,
        lat.mid.len(),
        h0,
        pv.get("down1.w"),
        pv.get("down1.b"),
    )?;
    let adj1 = adjacency(&lat.mid);
    let x1 = resnet_block(g, &adj1, x1, pv.conv("res2.c1"), pv.conv("res2.c2"))?;

    // level 2
    let groups2 = Arc::new(coarsen_keys(&lat.mid, &mut lat.coarse));
    let x2 = downsample_values(
        g,
        groups2,
        lat.coarse.len(),
        x1,
        pv.get("down2.w"),
        pv.get("down2.b"),
    )?;
    let adj2 = adjacency(&lat.coarse);
    let x2 = resnet_block(g, &adj2, x2, pv.conv("res3.c1"), pv.conv("res3.c2"))?;
    let x2 = fuse_site(g, pv, spec.bottleneck, "bottleneck", &mut run.sites[2], x2, &adj2)?;

    // decoder: level 2 -> 1
    let up1 = upsample(g, &lat.coarse, lat.mid.keys(), x2);
    let cat1 = g.concat_cols(up1, x1);
    let y1 = g.matmul(cat1, pv.get("up1.w"));
    let y1 = g.add_bias(y1, pv.get("up1.b"));
    let y1 = resnet_block(g, &adj1, y1, pv.conv("res4.c1"), pv.conv("res4.c2"))?;

    // decoder: level 1 -> 0
    let up2 = upsample(g, &lat.mid, lat.fine.keys(), y1);
    let cat0 = g.concat_cols(up2, h0);
    let y0 = g.matmul(cat0, pv.get("up2.w"));
    let y0 = g.add_bias(y0, pv.get("up2.b"));
    let y0 = fuse_site(g, pv, spec.late, "late", &mut run.sites[3], y0, &adj0)?;
    let y0 = resnet_block(g, &adj0, y0, pv.conv("res5.c1"), pv.conv("res5.c2"))?;

    // slice back to the points of the current cloud
    let net = MlpVars {
        w1: pv.get("slice.l1.w"),
        b1: pv.get("slice.l1.b"),
        w2: pv.get("slice.l2.w"),
        b2: pv.get("slice.l2.b"),
    };
    let (sliced, _missing) = deform_slice(g, y0, &dist.footprints, Some(&net))?;
    let logits = g.matmul(sliced, pv.get("head.w"));
    let logits = g.add_bias(logits, pv.get("head.b"));

    run.t += 1;
    Ok(StepOutput {
        logits,
        distribution: dist,
        fine_features: y0,
    })
}

/// A taped forward pass over a full sequence, ready for backward.
pub struct TapedRun {
    pub graph: Graph<f32>,
    pub params: ParamVars,
    /// Per-point class logits for the last cloud.
    pub logits: Var,
    /// Scatter pattern of the last cloud (for flow visualization).
    pub last_distribution: Distribution,
    /// Fused vertex features of the last timestep at the finest level.
    pub fine_features: Var,
    /// Lattices after the last timestep.
    pub lattices: Lattices,
    /// Finest-level hidden state written at the second-to-last timestep, with
    /// its vertex count (for flow visualization); None for n = 1.
    pub prev_fine_state: Option<(Array2<f32>, usize)>,
}

/// Run the model over `clouds` (already in a common frame and sigma-scaled),
/// taping every operation for BPTT. Returns logits for the last cloud.
pub fn forward_sequence(model: &Model, clouds: &[PointCloud]) -> Result<TapedRun, ModelError> {
    if clouds.is_empty() {
        return Err(ModelError::EmptySequence);
    }
    let mut g = Graph::new();
    let pv = ParamVars::register(&mut g, &model.params);
    let mut run = RunState::new();
    let mut out = None;
    let mut prev_fine_state = None;
    for cloud in clouds {
        prev_fine_state = run.sites[3]
            .as_ref()
            .map(|s| (g.value(s.hidden).clone(), s.count))
            .or_else(|| {
                run.sites[0]
                    .as_ref()
                    .map(|s| (g.value(s.hidden).clone(), s.count))
            });
        out = Some(step(&mut g, model, &pv, &mut run, cloud)?);
    }
    let out = out.expect("non-empty sequence");
    Ok(TapedRun {
        params: pv,
        logits: out.logits,
        last_distribution: out.distribution,
        fine_features: out.fine_features,
        lattices: run.lattices,
        prev_fine_state,
        graph: g,
    })
}

/// Saved fusion-site state between inference calls.
#[derive(Debug, Clone)]
struct SavedSite {
    hidden: Array2<f32>,
    cell: Option<Array2<f32>>,
    count: usize,
}

/// Recursive inference state: lattices and fusion states persisted across
/// per-cloud calls of one sequence.
pub struct InferState {
    seq_id: u64,
    t: usize,
    lattices: Lattices,
    sites: [Option<SavedSite>; 4],
}

impl InferState {
    pub fn new(seq_id: u64) -> Self {
        InferState {
            seq_id,
            t: 0,
            lattices: Lattices::new(),
            sites: [None, None, None, None],
        }
    }

    pub fn timestep(&self) -> usize {
        self.t
    }

    /// Finest-level lattice accumulated so far (for flow visualization).
    pub fn fine_lattice(&self) -> &SparseLattice {
        &self.lattices.fine
    }
}

/// Per-cloud inference result.
pub struct InferOutput {
    pub logits: Array2<f32>,
    pub distribution: Distribution,
    /// Finest-level fused features of this step.
    pub fine_features: Array2<f32>,
    /// Finest-level hidden state of the previous step with its count, if any.
    pub prev_fine_state: Option<(Array2<f32>, usize)>,
}

/// Process one cloud, updating the persistent state. Only the current cloud
/// is evaluated; previous features live in the saved states. Chained calls
/// reproduce `forward_sequence` over the same prefix exactly.
pub fn infer_step(
    model: &Model,
    state: &mut InferState,
    cloud: &PointCloud,
    seq_id: u64,
) -> Result<InferOutput, ModelError> {
    if state.seq_id != seq_id {
        return Err(ModelError::SequenceMismatch {
            expected: state.seq_id,
            got: seq_id,
        });
    }
    let mut g = Graph::new();
    let pv = ParamVars::register(&mut g, &model.params);
    let mut run = RunState {
        lattices: std::mem::take(&mut state.lattices),
        sites: [None; 4],
        t: state.t,
    };
    for (i, saved) in state.sites.iter().enumerate() {
        if let Some(s) = saved {
            let hidden = g.input(s.hidden.clone());
            let cell = s.cell.as_ref().map(|c| g.input(c.clone()));
            run.sites[i] = Some(SiteSlot {
                hidden,
                cell,
                count: s.count,
            });
        }
    }
    let prev_fine_state = state.sites[3]
        .as_ref()
        .or(state.sites[0].as_ref())
        .map(|s| (s.hidden.clone(), s.count));

    let out = step(&mut g, model, &pv, &mut run, cloud)?;

    state.lattices = run.lattices;
    state.t = run.t;
    for (i, slot) in run.sites.iter().enumerate() {
        state.sites[i] = slot.map(|s| SavedSite {
            hidden: g.value(s.hidden).clone(),
            cell: s.cell.map(|c| g.value(c).clone()),
            count: s.count,
        });
    }
    Ok(InferOutput {
        logits: g.value(out.logits).clone(),
        fine_features: g.value(out.fine_features).clone(),
        distribution: out.distribution,
        prev_fine_state,
    })
}

/// One BPTT training step: forward over the sequence, cross-entropy on the
/// last cloud's labels (ignoring `ignore_label`), backward, Adam update.
/// Returns None (and leaves parameters untouched) when every point is
/// ignored.
pub fn training_step(
    model: &mut Model,
    clouds: &[PointCloud],
    labels: &[i64],
    ignore_label: i64,
    opt: &mut AdamState,
    lr: f64,
    opt_config: &AdamConfig,
) -> Result<Option<f64>, ModelError> {
    let last = clouds.last().ok_or(ModelError::EmptySequence)?;
    if labels.len() != last.len() {
        return Err(ModelError::LabelCount(labels.len(), last.len()));
    }
    let mut taped = forward_sequence(model, clouds)?;
    let loss = match taped
        .graph
        .cross_entropy(taped.logits, Arc::new(labels.to_vec()), ignore_label)
    {
        Ok(v) => v,
        Err(AdError::AllIgnored) => {
            eprintln!("warning: all points ignored, skipping training step");
            return Ok(None);
        }
        Err(e) => return Err(e.into()),
    };
    let loss_value = taped.graph.value(loss)[(0, 0)] as f64;
    let store = taped.graph.backward(loss)?;
    let grads: Vec<Array2<f32>> = taped
        .params
        .vars()
        .iter()
        .zip(model.params.arrays())
        .map(|(&v, p)| store.get_or_zero(v, p.dim()))
        .collect();
    opt.step(model.params.arrays_mut(), &grads, lr, opt_config);
    Ok(Some(loss_value))
}

// ----- checkpoints -----

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    fusion: String,
    config: ModelConfig,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    rows: usize,
    cols: usize,
}

/// Write a checkpoint: u64 little-endian manifest length, JSON manifest,
/// then each parameter's f32 little-endian data in manifest order.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<(), ModelError> {
    let manifest = CheckpointManifest {
        fusion: model.spec.to_string(),
        config: model.config.clone(),
        params: model
            .params
            .names()
            .iter()
            .zip(model.params.arrays())
            .map(|(n, a)| ParamEntry {
                name: n.clone(),
                rows: a.nrows(),
                cols: a.ncols(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&(json.len() as u64).to_le_bytes())?;
    f.write_all(&json)?;
    for a in model.params.arrays() {
        for &v in a.iter() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model, ModelError> {
    let mut f = std::fs::File::open(path)?;
    let mut len8 = [0u8; 8];
    f.read_exact(&mut len8)?;
    let json_len = u64::from_le_bytes(len8) as usize;
    let mut json = vec![0u8; json_len];
    f.read_exact(&mut json)?;
    let manifest: CheckpointManifest =
        serde_json::from_slice(&json).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let spec: FusionSpec = manifest.fusion.parse()?;
    let mut params = ParamSet::new();
    for entry in &manifest.params {
        let mut buf = vec![0u8; entry.rows * entry.cols * 4];
        f.read_exact(&mut buf)
            .map_err(|_| ModelError::Checkpoint("truncated parameter data".to_string()))?;
        let data: Vec<f32> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let arr = Array2::from_shape_vec((entry.rows, entry.cols), data)
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        params.add(&entry.name, arr);
    }
    let mut rest = Vec::new();
    f.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(ModelError::Checkpoint(format!(
            "{} trailing bytes after parameter data",
            rest.len()
        )));
    }
    Ok(Model {
        spec,
        config: manifest.config,
        params,
    })
}
