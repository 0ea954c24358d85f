//! Adam with decoupled weight decay plus a cosine-annealing learning-rate
//! schedule with warm restarts.

use ndarray::Array2;

/// lr_min + (lr_max - lr_min) * (1 + cos(pi * progress / period)) / 2, with
/// progress wrapping past `period` (warm restart). `progress == period`
/// itself yields lr_min.
pub fn cosine_lr(epoch_progress: f64, lr_max: f64, lr_min: f64, period: f64) -> f64 {
    assert!(period > 0.0, "cosine_lr: period must be positive");
    let mut p = epoch_progress;
    while p > period {
        p -= period;
    }
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * p / period).cos())
}

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Epochs between two warm restarts of the cosine schedule.
    pub restart_period: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr_max: 0.001,
            lr_min: 0.0,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            restart_period: 3.0,
        }
    }
}

/// Per-parameter moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Array2<f32>>,
    v: Vec<Array2<f32>>,
    step: u64,
    rejected_steps: u64,
}

impl AdamState {
    pub fn new(params: &[Array2<f32>]) -> Self {
        AdamState {
            m: params.iter().map(|p| Array2::zeros(p.dim())).collect(),
            v: params.iter().map(|p| Array2::zeros(p.dim())).collect(),
            step: 0,
            rejected_steps: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn rejected_steps(&self) -> u64 {
        self.rejected_steps
    }

    /// One Adam update with bias correction and decoupled weight decay.
    /// A non-finite gradient anywhere rejects the whole step.
    pub fn step(
        &mut self,
        params: &mut [Array2<f32>],
        grads: &[Array2<f32>],
        lr: f64,
        config: &AdamConfig,
    ) -> bool {
        assert_eq!(params.len(), self.m.len(), "adam: parameter count changed");
        assert_eq!(params.len(), grads.len(), "adam: gradient count mismatch");
        if grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
            self.rejected_steps += 1;
            return false;
        }
        self.step += 1;
        let t = self.step as f64;
        let b1 = config.beta1;
        let b2 = config.beta2;
        let bc1 = 1.0 - b1.powf(t);
        let bc2 = 1.0 - b2.powf(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(p.dim(), g.dim(), "adam: shape mismatch");
            azip(m, g, |m, g| b1 as f32 * m + (1.0 - b1) as f32 * g);
            azip(v, g, |v, g| b2 as f32 * v + (1.0 - b2) as f32 * g * g);
            for ((pe, &me), &ve) in p.iter_mut().zip(m.iter()).zip(v.iter()) {
                let m_hat = me as f64 / bc1;
                let v_hat = ve as f64 / bc2;
                let update = lr * m_hat / (v_hat.sqrt() + config.eps);
                // decoupled decay: applied to the parameter directly, not
                // through the moment estimates
                let decay = lr * config.weight_decay * *pe as f64;
                *pe = (*pe as f64 - update - decay) as f32;
            }
        }
        true
    }

    /// Bit-exact binary serialization of the optimizer state.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.rejected_steps.to_le_bytes());
        out.extend_from_slice(&(self.m.len() as u64).to_le_bytes());
        for arr in self.m.iter().chain(self.v.iter()) {
            out.extend_from_slice(&(arr.nrows() as u64).to_le_bytes());
            out.extend_from_slice(&(arr.ncols() as u64).to_le_bytes());
            for &x in arr.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        let mut pos = 0usize;
        let take_u64 = |pos: &mut usize| -> Option<u64> {
            let v = u64::from_le_bytes(bytes.get(*pos..*pos + 8)?.try_into().ok()?);
            *pos += 8;
            Some(v)
        };
        let step = take_u64(&mut pos)?;
        let rejected = take_u64(&mut pos)?;
        let n = take_u64(&mut pos)? as usize;
        let read_arrays = |pos: &mut usize| -> Option<Vec<Array2<f32>>> {
            let mut arrays = Vec::with_capacity(n);
            for _ in 0..n {
                let r = u64::from_le_bytes(bytes.get(*pos..*pos + 8)?.try_into().ok()?) as usize;
                *pos += 8;
                let c = u64::from_le_bytes(bytes.get(*pos..*pos + 8)?.try_into().ok()?) as usize;
                *pos += 8;
                let mut arr = Array2::zeros((r, c));
                for x in arr.iter_mut() {
                    *x = f32::from_le_bytes(bytes.get(*pos..*pos + 4)?.try_into().ok()?);
                    *pos += 4;
                }
                arrays.push(arr);
            }
            Some(arrays)
        };
        let m = read_arrays(&mut pos)?;
        let v = read_arrays(&mut pos)?;
        Some(AdamState {
            m,
            v,
            step,
            rejected_steps: rejected,
        })
    }
}

fn azip(dst: &mut Array2<f32>, src: &Array2<f32>, f: impl Fn(f32, f32) -> f32) {
    dst.zip_mut_with(src, |d, &s| *d = f(*d, s));
}
