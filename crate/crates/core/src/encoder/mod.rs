//! Conformer and E-Branchformer layers, their sub-blocks, stochastic depth,
//! SpecAugment masking and full encoder stacks.

mod augment;
mod blocks;
mod config;
mod layers;

pub use augment::{spec_augment, SpecAugmentConfig};
pub use blocks::{
    cgmlp_forward, conv_module_forward, ffn_forward, merge_branches, CgMlpParams,
    ConvModuleParams, FfnParams, MergeParams,
};
pub use config::{EncoderConfig, LayerKind, MergeMode};
pub use layers::{
    conformer_layer, conformer_layer_states, ebranchformer_layer, ebranchformer_layer_states, encoder_forward, layer_forward, stochastic_depth,
    ConformerLayerParams, EBranchformerLayerParams, Encoder, LayerParams,
};
