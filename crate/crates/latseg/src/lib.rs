//! Recurrent permutohedral-lattice semantic segmentation for LiDAR
//! point-cloud sequences: sparse lattice operators, temporal state fusion
//! (GRU/LSTM/abstract flow), a reverse-mode autodiff engine, and the data,
//! evaluation, and CLI plumbing around them.

pub mod autodiff;
pub mod cloud;
pub mod data;
pub mod eval;
pub mod fusion;
pub mod lattice;
pub mod model;
pub mod ops;
pub mod parallel;
pub mod ply;
pub mod selfcheck;
