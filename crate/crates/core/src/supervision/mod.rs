//! Auxiliary training signals: text contrastive, edge and perceptual losses.

pub mod contrastive;
pub mod edge;
pub mod objective;
pub mod perceptual;

pub use contrastive::{
    info_nce_from_similarities, info_nce_loss, l2_normalize, sample_negatives, scalar, PoolEntry, SimilarityBatch,
};
pub use edge::{edge_loss, edge_map, exact_canny, sobel_magnitude, soft_edge_map, EdgeMap, EdgeMode, EdgeParams};
pub use objective::{combined_loss, CombinedLoss, LossTerms, LossWeights, TermValues};
pub use perceptual::{
    build_encoder, perceptual_loss, EncoderSpec, FeatureEncoder, IdentityEncoder, SmallConvEncoder, ToyLinearEncoder,
};
