//! Dense feed-forward networks with hand-written reverse mode, Adam, Polyak
//! averaging and text checkpoints.

pub mod checkpoint;
pub mod mlp;
pub mod optim;

pub use checkpoint::{Checkpoint, NamedNetwork, CHECKPOINT_MAGIC};
pub use mlp::{
    backward, backward_from_trace, forward, forward_trace, layout, mish, Activation, Batch, ForwardTrace, Gradients,
    LayerSlice, Mlp, MlpSpec, ParamSet,
};
pub use optim::{clip_gradients, opt_step, polyak_update, AdamConfig, GradClip, OptimState};
