//! Attention-based graph convolution network for point clouds.
//!
//! A cloud is reduced to M farthest-point-sampled nodes. Each node gets a
//! local structure feature (a shared MLP over its L nearest points, max
//! pooled). Stacked point attention layers then mix each node with its K
//! nearest nodes, with the global point graph features concatenated onto
//! every layer's input. Classification pools the nodes and applies an FC
//! head; segmentation runs a mirrored decoder and interpolates node
//! features back to every point.
//!
//! All model functions take row-stacked batches: a batch of B clouds
//! occupies `B·M` node rows and the node graph is block-diagonal.

mod attention;
mod config;
mod layers;
mod model;

pub use attention::{
    attention_aggregate, attention_scores, attention_scores_with, dense_attention, neighbor_attention,
    AttentionScores, FeatureMatrix, NeighborTable, ZERO_DENOMINATOR,
};
pub use config::{AttentionKind, FpsSeed, ModelConfig, Task};
pub use layers::{
    global_point_graph, local_structure_feature, mlp_layer, point_attention_layer, register_linear, register_mlp,
    shared_mlp, AttentionSettings, GraphFeatures,
};
pub use model::{lexmin_index, Agcn, CloudGeometry, Decoded, Encoded};
