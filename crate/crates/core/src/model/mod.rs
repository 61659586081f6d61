//! The super-resolution UNet shared by the image and video models.

mod config;
mod unet;

pub use config::{AdapterMode, ModelConfig, Path, Stage};
pub use unet::{
    adapter_param_specs, build_image_unet, build_video_unet, forward_image, forward_video, image_param_specs,
    init_adapters, timestep_embedding, Binder, Init, ParamSpec, UNet, EMBEDDING_STD,
};
