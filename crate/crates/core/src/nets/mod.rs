//! Network architectures and their forward passes.
//!
//! Every network exposes an [`Inventory`] listing its parameters in forward
//! order together with a printable layer table. Parameter stores are built
//! from that inventory alone, so parameter counts follow from the config.

pub mod decoder;
pub mod discriminator;
pub mod encoder;
pub mod features;
pub mod layers;
pub mod mixer;
pub mod params;
pub mod unet;

pub use decoder::{gaussian_decoder_forward, GaussianDecoder};
pub use discriminator::{discriminator_forward, DiscScale, Discriminator};
pub use encoder::{
    condition_upsample, encoder_forward, reparameterize, reparameterize_graph, Encoder, EncoderConfig,
    LatentPosterior, PosteriorVars,
};
pub use features::{feature_extractor_forward, FeatureExtractor, FeatureNet, FeatureOutput, FeatureVars};
pub use layers::{norm_groups, timestep_embedding, Inventory, LayerRow};
pub use mixer::{MixerConfig, MixerNet};
pub use params::{init_params, Bound, Init, ModelParams, ParamSpec, ParamStore};
pub use unet::{unet_forward, UNet, UNetConfig, UNetPreset};

use crate::error::Result;

pub trait Architecture {
    fn inventory(&self) -> Inventory;

    fn num_params(&self) -> usize {
        self.inventory().num_params()
    }

    /// Fresh parameters; each tensor draws from its own named stream under `seed`.
    fn init(&self, seed: u64) -> Result<ModelParams> {
        init_params(&self.inventory().specs, seed)
    }
}
