//! Declarative model graphs, the coverage-prediction architectures and a graph executor.

mod builder;
mod net;
mod spec;

pub use builder::{
    baseline_cnn, by_name, radiounet, unet, unet_si, Downsample, GraphBuilder, SpecMeta, UnetConfig, UnetSiLayout,
    DEFAULT_KERNEL_SET, RADIOUNET_CHANNELS, RADIOUNET_FRAME, RADIOUNET_RESOLUTIONS, UNET_SI_BASE_WIDTH,
    UNET_SI_VARIANTS,
};
pub use net::{Model, Tape};
pub use spec::{ModelSpec, Node, NodeShape, Op};
