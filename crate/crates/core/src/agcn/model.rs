//! The full network over stacks of clouds.
//!
//! Parameter prefixes: `local` (per-point MLP of the local structure
//! feature), `global` (global point graph MLP), `enc.{t}` and `dec.{t}`
//! (attention layer transforms), `head` (classification FC layers) and
//! `seghead` (per-point segmentation head).

use rayon::prelude::*;

use super::attention::NeighborTable;
use super::config::{FpsSeed, ModelConfig, Task};
use super::layers::{
    global_point_graph, local_structure_feature, mlp_layer, point_attention_layer, register_linear, register_mlp,
    AttentionSettings,
};
use crate::diffcore::{Mode, ParameterStore, Precision, Tape, Tensor, Var};
use crate::error::{invalid, Result};
use crate::geometry::{
    farthest_point_sample, group_local, idw_stencil, knn_graph, IdwStencil, KnnGraph, LocalGroup, NodeSet, PointCloud,
};

/// Geometry derived from one cloud: sampled nodes, local groups, node graph
/// and (for segmentation) the node-to-point interpolation stencil.
#[derive(Debug, Clone)]
pub struct CloudGeometry {
    pub cloud: PointCloud,
    pub nodes: NodeSet,
    pub group: LocalGroup,
    pub graph: KnnGraph,
    pub stencil: Option<IdwStencil>,
}

/// Encoder state for a stack of clouds.
pub struct Encoded {
    /// Node features after each stage; index 0 is the local structure
    /// feature, index `t` the output of attention layer `t`.
    pub layers: Vec<Var>,
    /// Max over each cloud's nodes of the last layer, one row per cloud.
    pub global: Var,
    /// Global point graph features per node, when enabled.
    pub graph_features: Option<Var>,
    pub table: NeighborTable,
    /// Attention weights of each encoder layer.
    pub attention: Vec<Vec<f64>>,
    pub num_clouds: usize,
    pub nodes_per_cloud: usize,
}

/// Decoder output per node and the attention weights of each layer.
pub struct Decoded {
    pub features: Var,
    pub attention: Vec<Vec<f64>>,
}

/// The network for one [`ModelConfig`].
#[derive(Debug, Clone)]
pub struct Agcn {
    config: ModelConfig,
    attention: AttentionSettings,
}

/// Index of the lexicographically smallest point; lowest index on exact
/// duplicates.
pub fn lexmin_index(cloud: &PointCloud) -> usize {
    let c = cloud.coords();
    (1..c.len()).fold(0, |best, i| {
        let ord = c[i][0]
            .total_cmp(&c[best][0])
            .then(c[i][1].total_cmp(&c[best][1]))
            .then(c[i][2].total_cmp(&c[best][2]));
        if ord.is_lt() {
            i
        } else {
            best
        }
    })
}

impl Agcn {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let attention = AttentionSettings {
            kind: config.attention_kind,
            sabotage_backward: false,
        };
        Ok(Self { config, attention })
    }

    /// Corrupts the attention backward pass. Test fixture for gradient
    /// checking.
    pub fn with_sabotaged_attention(mut self) -> Self {
        self.attention.sabotage_backward = true;
        self
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Registers every parameter with uniform initial values.
    pub fn init_params(&self, seed: u64) -> Result<ParameterStore> {
        let c = &self.config;
        let (bn, bound) = (c.batch_norm, c.init_bound);
        let t_max = c.attention_layers;
        let mut s = ParameterStore::new();
        register_mlp(&mut s, "local", 3 + c.input_channels, &c.local_mlp_widths, bn, bound, seed)?;
        if c.global_graph {
            register_mlp(&mut s, "global", 3, &c.global_graph_mlp_widths, bn, bound, seed)?;
        }
        for t in 1..=t_max {
            let din = c.encoder_width(t - 1) + c.graph_width();
            let widths = c.attention_transform_widths[t - 1];
            register_mlp(&mut s, &format!("enc.{}", t - 1), din, &widths, bn, bound, seed)?;
        }
        match c.mode {
            Task::Classify => register_mlp(&mut s, "head", c.encoder_width(t_max), &c.head_widths, false, bound, seed)?,
            Task::Segment => {
                for t in 1..=t_max {
                    let din = c.decoder_width(t - 1) + c.encoder_width(t_max - t) + c.graph_width();
                    let widths = c.decoder_transform_widths[t - 1];
                    register_mlp(&mut s, &format!("dec.{}", t - 1), din, &widths, bn, bound, seed)?;
                }
                let din = c.decoder_width(t_max) + 3 + c.input_channels;
                register_mlp(&mut s, "seghead", din, &c.seg_head_widths, bn, bound, seed)?;
                let last_in = c.seg_head_widths.last().copied().unwrap_or(din);
                let name = format!("seghead.{}", c.seg_head_widths.len());
                register_linear(&mut s, &name, last_in, c.num_classes, bound, seed)?;
            }
        }
        Ok(s)
    }

    pub fn fps_seed_index(&self, cloud: &PointCloud) -> usize {
        match self.config.fps_seed {
            FpsSeed::Index(i) => i,
            FpsSeed::LexMin => lexmin_index(cloud),
        }
    }

    /// Samples nodes and builds groups, graph and stencil for `cloud`.
    pub fn prepare(&self, cloud: &PointCloud) -> Result<CloudGeometry> {
        let c = &self.config;
        if cloud.len() < c.m_nodes {
            invalid!("cloud has {} points, the model samples {} nodes", cloud.len(), c.m_nodes);
        }
        if cloud.num_channels() != c.input_channels {
            invalid!("cloud has {} channels, the model expects {}", cloud.num_channels(), c.input_channels);
        }
        let nodes = farthest_point_sample(cloud, c.m_nodes, self.fps_seed_index(cloud))?;
        let group = group_local(cloud, &nodes, c.l_group)?;
        let graph = knn_graph(&nodes, c.k_neighbors)?;
        let stencil = match c.mode {
            Task::Segment => Some(idw_stencil(cloud.coords(), &nodes.coords, c.idw_m, c.idw_power)?),
            Task::Classify => None,
        };
        Ok(CloudGeometry {
            cloud: cloud.clone(),
            nodes,
            group,
            graph,
            stencil,
        })
    }

    pub fn prepare_all(&self, clouds: &[PointCloud]) -> Result<Vec<CloudGeometry>> {
        clouds.par_iter().map(|c| self.prepare(c)).collect()
    }

    /// Local structure features, global point graph and the stacked
    /// attention layers.
    pub fn encode(&self, tape: &mut Tape, store: &ParameterStore, batch: &[&CloudGeometry]) -> Result<Encoded> {
        let c = &self.config;
        if batch.is_empty() {
            invalid!("empty batch");
        }
        let bn = c.batch_norm;
        let groups: Vec<&LocalGroup> = batch.iter().map(|g| &g.group).collect();
        let graphs: Vec<&KnnGraph> = batch.iter().map(|g| &g.graph).collect();
        let table = NeighborTable::from_graphs(&graphs)?;
        let f0 = local_structure_feature(tape, store, &groups, c.local_mlp_widths.len(), bn)?;
        let graph_features = if c.global_graph {
            Some(global_point_graph(tape, store, &graphs, bn)?.per_node)
        } else {
            None
        };
        let mut layers = vec![f0];
        let mut attention = Vec::with_capacity(c.attention_layers);
        for t in 0..c.attention_layers {
            let prev = layers[t];
            let input = match graph_features {
                Some(g) => tape.concat_cols(&[prev, g])?,
                None => prev,
            };
            let (f, alpha) = point_attention_layer(tape, store, input, &table, &format!("enc.{t}"), self.attention, bn)?;
            layers.push(f);
            attention.push(alpha);
        }
        let m = c.m_nodes;
        let global = tape.segment_max(layers[c.attention_layers], m)?;
        Ok(Encoded {
            layers,
            global,
            graph_features,
            table,
            attention,
            num_clouds: batch.len(),
            nodes_per_cloud: m,
        })
    }

    /// FC head over the pooled feature: hidden layers with relu and
    /// dropout, then class logits. One row per cloud.
    pub fn classify_head(&self, tape: &mut Tape, store: &ParameterStore, enc: &Encoded) -> Result<Var> {
        let c = &self.config;
        if c.mode != Task::Classify {
            invalid!("classification head requested from a segmentation model");
        }
        let n = c.head_widths.len();
        let mut x = enc.global;
        for i in 0..n {
            let last = i + 1 == n;
            x = mlp_layer(tape, store, x, &format!("head.{i}"), false, !last)?;
            if !last {
                x = tape.dropout(x, c.dropout)?;
            }
        }
        Ok(x)
    }

    /// Class logits, one row per cloud.
    pub fn classify_logits(&self, tape: &mut Tape, store: &ParameterStore, batch: &[&CloudGeometry]) -> Result<Var> {
        let enc = self.encode(tape, store, batch)?;
        self.classify_head(tape, store, &enc)
    }

    /// Decoder attention layers. Layer `t` sees the previous decoder
    /// output, the encoder features of the mirrored depth and the global
    /// point graph features; the first input is the top encoder feature
    /// with the pooled global feature.
    pub fn decode(&self, tape: &mut Tape, store: &ParameterStore, enc: &Encoded) -> Result<Decoded> {
        let c = &self.config;
        if c.mode != Task::Segment {
            invalid!("decoder requested from a classification model");
        }
        let t_max = c.attention_layers;
        if enc.layers.len() != t_max + 1 {
            invalid!("encoder state has {} stages, expected {}", enc.layers.len(), t_max + 1);
        }
        let m = enc.nodes_per_cloud;
        let tiled = tape.gather_rows(enc.global, (0..enc.num_clouds * m).map(|r| r / m).collect())?;
        let mut h = tape.concat_cols(&[enc.layers[t_max], tiled])?;
        let mut attention = Vec::with_capacity(t_max);
        for t in 1..=t_max {
            let mut parts = vec![h, enc.layers[t_max - t]];
            parts.extend(enc.graph_features);
            let input = tape.concat_cols(&parts)?;
            let prefix = format!("dec.{}", t - 1);
            let (y, alpha) = point_attention_layer(tape, store, input, &enc.table, &prefix, self.attention, c.batch_norm)?;
            h = y;
            attention.push(alpha);
        }
        Ok(Decoded { features: h, attention })
    }

    /// Per-point head over interpolated node features and raw point
    /// features. Rows follow the batch's clouds and points in order.
    pub fn segment_head(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        batch: &[&CloudGeometry],
        node_features: Var,
    ) -> Result<Var> {
        let c = &self.config;
        let m = c.m_nodes;
        let mut index = Vec::new();
        let mut weights = Vec::new();
        let mut raw = Vec::new();
        let mut points = 0;
        for (b, g) in batch.iter().enumerate() {
            let Some(st) = &g.stencil else {
                invalid!("cloud geometry was prepared without an interpolation stencil");
            };
            index.extend(st.indices.iter().map(|&i| i + b * m));
            weights.extend_from_slice(&st.weights);
            for (i, p) in g.cloud.coords().iter().enumerate() {
                raw.extend_from_slice(p);
                raw.extend_from_slice(g.cloud.channel_row(i));
            }
            points += g.cloud.len();
        }
        let interp = tape.weighted_gather(node_features, index, weights, c.idw_m)?;
        let raw = tape.input(Tensor::matrix(points, 3 + c.input_channels, raw)?);
        let mut x = tape.concat_cols(&[interp, raw])?;
        let hidden = c.seg_head_widths.len();
        for i in 0..hidden {
            x = mlp_layer(tape, store, x, &format!("seghead.{i}"), c.batch_norm, true)?;
        }
        mlp_layer(tape, store, x, &format!("seghead.{hidden}"), false, false)
    }

    /// Part logits, one row per point of every cloud in the batch.
    pub fn segment_logits(&self, tape: &mut Tape, store: &ParameterStore, batch: &[&CloudGeometry]) -> Result<Var> {
        let enc = self.encode(tape, store, batch)?;
        let dec = self.decode(tape, store, &enc)?;
        self.segment_head(tape, store, batch, dec.features)
    }

    /// Logits for a single cloud in 64-bit arithmetic: `1 × num_classes`.
    pub fn classify_forward(&self, store: &ParameterStore, cloud: &PointCloud, mode: Mode) -> Result<Tensor> {
        let g = self.prepare(cloud)?;
        let mut tape = Tape::new(mode, Precision::F64, 0);
        let y = self.classify_logits(&mut tape, store, &[&g])?;
        Ok(tape.value(y).clone())
    }

    /// Per-point logits for a single cloud in 64-bit arithmetic:
    /// `N × num_classes`.
    pub fn segment_forward(&self, store: &ParameterStore, cloud: &PointCloud, mode: Mode) -> Result<Tensor> {
        let g = self.prepare(cloud)?;
        let mut tape = Tape::new(mode, Precision::F64, 0);
        let y = self.segment_logits(&mut tape, store, &[&g])?;
        Ok(tape.value(y).clone())
    }
}
