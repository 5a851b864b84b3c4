//! Empirical equivariance deviation (EED) for neural networks under finite
//! groups: groups and actions, tensors and distances, the metric family, a
//! small CNN runtime and the on-disk formats they share.

pub mod actions;
pub mod error;
pub mod groups;
pub mod io;
pub mod metrics;
pub mod runtime;
pub mod tensor;

pub use actions::{
    circular_mask, make_dihedral_action, make_permutation_action, make_reflection_action,
    make_regular_channel_action, make_regular_channel_action_any, make_rotation_action,
    make_trivial_action, reflect2, rotate2, verify_action_axiom, ActionKind, Carrier, GroupAction,
    SignedPermutation, ROTATION_CONVENTION,
};
pub use error::{Error, Result};
pub use groups::{kernel_of, verify_group_axioms, FiniteGroup, GroupElement, GroupKind, Subgroup};
pub use metrics::{
    bootstrap_ci, channelwise_eed, filter_orbit_metric, generic_eed, latent_eed, orbit_average,
    select_samples, softmax_eed, symmetrize, EedOptions, EedReport, EvalFunction, MetricKind,
    OrbitSource, PairValue,
};
pub use runtime::{
    build_c4_equivariant_model, build_standard_cnn, layer_forward, model_forward_collect, Layer,
    ModelSpec,
};
pub use tensor::{distance, DistanceKind, Tensor};
