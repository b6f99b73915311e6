//! Multi-scale state-space backbone: per-head discretized recurrences
//! with scale-shared steps, within-scale aggregation, cross-scale
//! attention, gated MLP blocks, pooling, task heads, and reversible
//! instance normalization.

mod forward;
mod params;

pub use forward::{
    a_scale_loss, backbone_forward, discretize, revin_apply, revin_invert, scale_aggregate, ssm_scan,
    BoundModel, ForwardPass, LatentStates, REVIN_EPS,
};
pub use params::{
    init_heads, BackboneConfig, BlockLayout, DeltaMode, HeadInit, Layout, Model, TaskHead,
    CHECKPOINT_SCHEMA_VERSION,
};
