//! Colour-space transform kernels, magnitude grids, and policy application.

mod image;
mod ops;
mod policy;

pub use self::image::Image;
pub use self::ops::{
    apply_op, apply_op_traced, magnitude_value, CutoutRect, OpKind, Operation,
};
pub use self::policy::{
    apply_policy, apply_policy_traced, apply_subpolicy, apply_subpolicy_traced,
    search_space_size, Application, OpEntry, Policy, PolicyDocument, SubPolicy,
    POLICY_SCHEMA_VERSION,
};
