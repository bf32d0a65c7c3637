//! Complex-valued variational autoencoder over Doppler profiles.
//!
//! The posterior is a diagonal non-circular complex Gaussian; its `sigma`
//! is the per-dimension variance (not a standard deviation), which is the only
//! reading under which the reparameterization moments and the KL expression
//! agree.

pub mod checkpoint;
pub mod layers;
pub mod model;
pub mod posterior;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use layers::{Activation, ChannelNorm};
pub use model::{reconstruction_error, ConvBlockSpec, Cvae, CvaeArchitecture, LossParts, TensorSpec};
pub use posterior::{
    constrain_sigma_delta, kl_closed_form, latent_from_noise, reparam_scales, sample_latent, LatentNoise,
    PosteriorParams, ReparamScales, EPS_NUM,
};
pub use train::{train, write_loss_trace, Adam, EpochLoss, TrainConfig};
