//! Similarity-aware feature upsampling.
//!
//! Upsampled points are assigned to semantic clusters by the mutual
//! similarity between each high-res encoder point and a set of low-res
//! decoder points. The crate provides the three operator variants, the
//! fixed-rule baselines (NN, bilinear, pixel shuffle), analytic gradients
//! with a finite-difference checker, and an analytic FLOPs/parameter model.
//!
//! The crate is `no_std` and needs only `alloc`.

#![no_std]

extern crate alloc;

pub mod cost;
pub mod error;
pub mod grad;
pub mod kernel;
pub mod ops;
#[cfg(feature = "reference")]
pub mod reference;
pub mod sampling;
pub mod tensor;

pub use cost::{cost, cost_table, CostQuery, CostReport, Step, Upsampler};
pub use error::{Error, Result};
pub use kernel::{
    generate_kernel_map, mutual_similarity, normalize_weights, KernelMap, NormFn, SimilarityFn,
};
pub use ops::{
    assemble, grouped_merge, grouped_split, offset_generate, sapa_b_forward, sapa_d_forward,
    sapa_i_forward, upsample, OffsetDof, OffsetField, OffsetInit, SapaConfig, SapaParams,
    Upsampled, Variant,
};
pub use sampling::{
    bilinear_sample, bilinear_upsample, nn_upsample, pixel_shuffle, pixel_unshuffle, window_coords,
    Coord, CoordSet, PointSet,
};
pub use tensor::{group_norm, linear_embed, softmax_vec, DType, LinearMap, Real, RngSpec, Tensor};
