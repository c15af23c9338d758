//! Data-free restoration of pruned convolutional networks.
//!
//! Structured filter pruning removes whole output channels from a
//! convolution layer and the matching input channels from its consumer.
//! Instead of fine-tuning the damaged model, this crate redistributes
//! each removed filter over the preserved filters of the same layer:
//! the compensation coefficients minimise a closed-form ridge objective
//! built from the weights and batch-norm parameters alone, so no
//! training data is ever touched. The crate also ships the one-to-one
//! merging baseline, a neuron variant for fully-connected networks, and
//! the error metrics (residual error, batch-norm error, activation-error
//! bound, layer-wise relative reconstruction error) used to audit how
//! close the restored network stays to the original.
//!
//! The crate is `no_std`-compatible (`alloc` required); disable the
//! default `std` feature and enable `libm` for embedded use. File
//! formats, report emission and the command-line harness live in the
//! companion `lbyl` crate.

#![cfg_attr(not(feature = "std"), no_std)]

#[cfg(all(not(feature = "std"), not(feature = "libm")))]
compile_error!("either the `std` or the `libm` feature must be enabled");

extern crate alloc;

pub mod error;
mod math;
pub mod metrics;
pub mod network;
pub mod pruning;
pub mod restore;
pub mod tensor;

pub use error::{Error, Result};
pub use metrics::{
    accuracy, ae_bound, bn_error, reconstruction_loss, residual_error, scale_stats, ware,
    AccuracyPair, LayerErrorRecord, ReportHyperparams, RestorationReport, ScaleStats,
};
pub use network::{
    batch_norm_apply, forward, forward_batch, generate_synthetic, Activation, BatchNormParams,
    Feature, LayerSpec, NetworkModel, Tap, TapRecord,
};
pub use pruning::{
    apply_pruning, build_pruning_matrix, plan_layerwise, plan_resnet, score_filters,
    select_pruned, Criterion, PruningMatrix, PruningPlan,
};
pub use restore::{
    build_delivery_matrix, build_scaled_basis, fold_into_fc, restore_fc_neuron, restore_lbyl,
    restore_nm, solve_coefficients, DeliveryMatrix, FilterBank, Hyperparams, ScaledBasis,
};
pub use tensor::{
    conv2d, mode1_product, mode2_product, spd_solve, tensor_norm, Matrix, Norm, Tensor3, Tensor4,
    Vector,
};
