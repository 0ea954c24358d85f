//! Point clouds P=(G,F): positions, optional per-point features
//! (reflectance), optional labels, and the rigid transform into the common
//! reference frame of a sequence.

use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CloudError {
    #[error("non-finite position in point {0}")]
    NonFinitePosition(usize),
    #[error("feature row count {0} != point count {1}")]
    FeatureCountMismatch(usize, usize),
    #[error("label count {0} != point count {1}")]
    LabelCountMismatch(usize, usize),
}

/// 4x4 rigid transform, row-major.
pub type Pose = [[f64; 4]; 4];

pub const IDENTITY_POSE: Pose = [
    [1.0, 0.0, 0.0, 0.0],
    [0.0, 1.0, 0.0, 0.0],
    [0.0, 0.0, 1.0, 0.0],
    [0.0, 0.0, 0.0, 1.0],
];

#[derive(Debug, Clone)]
pub struct PointCloud {
    /// m x d positions (meters, or 1/sigma units after scaling).
    pub positions: Array2<f64>,
    /// m x f_d per-point features; f_d may be zero.
    pub features: Array2<f32>,
    /// Per-point semantic labels; the ignore label marks unlabeled points.
    pub labels: Option<Vec<i64>>,
    /// Rigid transform of this cloud into the common frame.
    pub pose: Pose,
}

impl PointCloud {
    pub fn new(positions: Array2<f64>, features: Array2<f32>) -> Result<Self, CloudError> {
        for (i, row) in positions.rows().into_iter().enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(CloudError::NonFinitePosition(i));
            }
        }
        if features.nrows() != positions.nrows() {
            return Err(CloudError::FeatureCountMismatch(
                features.nrows(),
                positions.nrows(),
            ));
        }
        Ok(PointCloud {
            positions,
            features,
            labels: None,
            pose: IDENTITY_POSE,
        })
    }

    pub fn with_labels(mut self, labels: Vec<i64>) -> Result<Self, CloudError> {
        if labels.len() != self.len() {
            return Err(CloudError::LabelCountMismatch(labels.len(), self.len()));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.positions.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.positions.ncols()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    /// Apply a rigid transform to the positions in place.
    pub fn transform(&mut self, t: &Pose) {
        assert_eq!(self.dim(), 3, "rigid transforms assume 3D clouds");
        for mut row in self.positions.rows_mut() {
            let p = [row[0], row[1], row[2]];
            for i in 0..3 {
                row[i] = t[i][0] * p[0] + t[i][1] * p[1] + t[i][2] * p[2] + t[i][3];
            }
        }
    }

    /// Scale positions by 1/sigma per axis.
    pub fn scale_positions(&mut self, sigma: &[f64]) {
        assert_eq!(sigma.len(), self.dim());
        for mut row in self.positions.rows_mut() {
            for (v, &s) in row.iter_mut().zip(sigma) {
                *v /= s;
            }
        }
    }

    /// Replace the feature matrix with an empty (m x 0) one.
    pub fn drop_features(&mut self) {
        self.features = Array2::zeros((self.len(), 0));
    }
}

/// Compose two poses (a then b: returns b * a).
pub fn compose(b: &Pose, a: &Pose) -> Pose {
    let mut out = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            out[i][j] = (0..4).map(|k| b[i][k] * a[k][j]).sum();
        }
    }
    out
}

/// Invert a rigid transform (rotation transpose, negated translation).
pub fn invert(p: &Pose) -> Pose {
    let mut out = IDENTITY_POSE;
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = p[j][i];
        }
    }
    for i in 0..3 {
        out[i][3] = -(0..3).map(|k| out[i][k] * p[k][3]).sum::<f64>();
    }
    out
}
