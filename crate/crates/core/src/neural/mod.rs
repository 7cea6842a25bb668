//! Hand-differentiated network kernel sized for a few hundred units.
//!
//! Every layer has a forward pass that returns a cache and a backward pass
//! that turns an output gradient into parameter and input gradients. Batches
//! are the leading tensor dimension; sequences are laid out `[batch, time,
//! features]`.

mod adam;
mod checkpoint;
mod layers;
mod network;
mod tensor;

pub use adam::{adam_update, clip_global_norm, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use layers::{
    conv1d_backward, conv1d_forward, dense_backward, dense_forward, flatten, lstm_backward, lstm_forward,
    maxpool1d_backward, maxpool1d_forward, relu_backward, relu_forward, Conv1dCache, Conv1dGrads, DenseCache,
    DenseGrads, LstmCache, LstmGrads, MaxPoolCache,
};
pub use network::{init_params, Architecture, ForwardCache, LayerSpec, NetworkState};
pub use tensor::Tensor;

pub(crate) use tensor::gemm;
