//! Sparse voxel compute engine and VAE for vessel-like binary 3D masks.
//!
//! The crate is organized bottom-up:
//! - [`voxel`]: dense/sparse voxel containers and window partitioning
//! - [`autodiff`]: reverse-mode tape over row-major matrices
//! - [`sparse_conv`]: kernel maps and submanifold / strided / transposed conv
//! - [`attention`]: sinusoidal 3D positional encoding + windowed MHSA blocks
//! - [`model`]: the encoder/decoder pair, losses, compression reporting
//! - [`optim`]: AdamW and the deterministic training loop
//! - [`metrics`]: Dice, clDice, skeletonization, Betti numbers
//! - [`synth`]: synthetic vessel tree generator with anomaly injection
//! - [`analysis`]: latent descriptors, PCA, MLP classifier, cross-validation
//! - [`io`]: the three binary file formats and the text config format

pub mod analysis;
pub mod attention;
pub mod autodiff;
pub mod error;
pub mod io;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod sparse_conv;
pub mod synth;
pub mod voxel;

pub use autodiff::{grad_check, Gradients, NodeId, ParamId, ParamStore, Tape};
pub use error::{FormatError, SvxError, SvxResult};
pub use matrix::{Matrix, Real};
pub use voxel::{canonical_sort, CoordIndex, Coordinate, DenseField, Dims, SparseTensor, VoxelGrid, WindowGroups};
