//! Dense 3D fully-convolutional segmentation network, trained on the CPU.

mod activation;
mod checkpoint;
mod conv;
mod direct;
mod loss;
mod network;
mod optim;
mod tensor;
mod train;

pub use activation::{leaky_relu, leaky_relu_backward, leaky_relu_in_place};
pub use checkpoint::Checkpoint;
pub use conv::{Conv3d, Deconv3d, LayerGrads};
pub use loss::{argmax_classes, class_indices, softmax_xent, softmax_xent_onehot, NUM_CLASSES};
pub use network::{ForwardCache, SegNet, SegNetArch};
pub use optim::{OptimizerKind, OptimizerState};
pub use tensor::{Scalar, Tensor4};
pub use train::{
    class_weights, dataset_loss, fine_tune, infer, inverse_frequency, train, write_loss_csv, LossRecord, TrainConfig,
    TrainOutcome, Trainer, TrainingTree,
};
