//! Contrastive image/text backbone: tokenizer, transformer encoders,
//! pretraining, and checkpoint persistence.

mod encoder;
mod persist;
mod pretrain;
mod tokenizer;

pub use encoder::{
    embed_token_rows, patch_rows, text_forward_rows, transformer_layer, vision_embed,
    vision_forward_plain, Backbone, Dims, LayerWeights, StagedBackbone, StagedLayer, StagedText,
    StagedVision, TextWeights, VisionWeights,
};
pub use persist::{backbone_checksum, backbone_from_checkpoint, backbone_to_checkpoint};
pub use pretrain::{contrastive_loss, pretrain, universal_tokenizer, EpochStat, PretrainConfig};
pub use tokenizer::{TokenSeq, Tokenizer, END_ID, PAD_ID, START_ID};
