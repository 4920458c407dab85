//! Building blocks shared by the classification and segmentation networks.
//!
//! Parameters of a shared MLP registered under `prefix` are named
//! `{prefix}.{i}.weight`, `{prefix}.{i}.bias` and, with batch norm,
//! `{prefix}.{i}.bn.gamma` / `{prefix}.{i}.bn.beta` with running statistics
//! in the buffers `{prefix}.{i}.bn.running_mean` / `.running_var`.

use super::attention::{neighbor_attention, NeighborTable};
use super::config::AttentionKind;
use crate::diffcore::{ParameterStore, Tape, Tensor, Var};
use crate::error::{invalid, Result};
use crate::geometry::{KnnGraph, LocalGroup};

/// Registers the weight and bias of one linear layer under `prefix`.
pub fn register_linear(
    store: &mut ParameterStore,
    prefix: &str,
    din: usize,
    dout: usize,
    bound: f64,
    seed: u64,
) -> Result<()> {
    store.init_uniform_bounded(&format!("{prefix}.weight"), vec![din, dout], bound, seed)?;
    store.init_uniform_bounded(&format!("{prefix}.bias"), vec![dout], bound, seed)?;
    Ok(())
}

/// Registers a stack of `linear (→ batch norm)` layers.
pub fn register_mlp(
    store: &mut ParameterStore,
    prefix: &str,
    input_width: usize,
    widths: &[usize],
    batch_norm: bool,
    bound: f64,
    seed: u64,
) -> Result<()> {
    let mut din = input_width;
    for (i, &w) in widths.iter().enumerate() {
        let p = format!("{prefix}.{i}");
        register_linear(store, &p, din, w, bound, seed)?;
        if batch_norm {
            store.init_constant(&format!("{p}.bn.gamma"), vec![w], 1.0)?;
            store.init_constant(&format!("{p}.bn.beta"), vec![w], 0.0)?;
            store.insert_buffer(&format!("{p}.bn.running_mean"), Tensor::zeros(vec![w]))?;
            store.insert_buffer(&format!("{p}.bn.running_var"), Tensor::filled(vec![w], 1.0))?;
        }
        din = w;
    }
    Ok(())
}

/// One shared layer: linear, optional batch norm, optional relu.
pub fn mlp_layer(
    tape: &mut Tape,
    store: &ParameterStore,
    x: Var,
    prefix: &str,
    batch_norm: bool,
    relu: bool,
) -> Result<Var> {
    let w = tape.param(store, &format!("{prefix}.weight"))?;
    let b = tape.param(store, &format!("{prefix}.bias"))?;
    let mut y = tape.linear(x, w, Some(b))?;
    if batch_norm {
        let bn = format!("{prefix}.bn");
        let gamma = tape.param(store, &format!("{bn}.gamma"))?;
        let beta = tape.param(store, &format!("{bn}.beta"))?;
        let mean = store.buffer(&format!("{bn}.running_mean"))?.data().to_vec();
        let var = store.buffer(&format!("{bn}.running_var"))?.data().to_vec();
        y = tape.batch_norm(y, gamma, beta, &mean, &var, &bn)?;
    }
    Ok(if relu { tape.relu(y) } else { y })
}

/// `layers` consecutive `linear → batch norm → relu` layers applied to every
/// row with shared weights.
pub fn shared_mlp(
    tape: &mut Tape,
    store: &ParameterStore,
    x: Var,
    prefix: &str,
    layers: usize,
    batch_norm: bool,
) -> Result<Var> {
    let mut y = x;
    for i in 0..layers {
        y = mlp_layer(tape, store, y, &format!("{prefix}.{i}"), batch_norm, true)?;
    }
    Ok(y)
}

/// Local structure feature of every node in every group: the shared MLP
/// `local` over each member's offset from its node (plus member channels),
/// max-pooled over the members. Rows are stacked group by group.
pub fn local_structure_feature(
    tape: &mut Tape,
    store: &ParameterStore,
    groups: &[&LocalGroup],
    layers: usize,
    batch_norm: bool,
) -> Result<Var> {
    let Some(first) = groups.first() else {
        invalid!("no local groups");
    };
    let (l, c) = (first.group_size, first.num_channels);
    if groups.iter().any(|g| g.group_size != l || g.num_channels != c) {
        invalid!("local groups disagree on group size or channel count");
    }
    let width = 3 + c;
    let rows: usize = groups.iter().map(|g| g.member_indices.len()).sum();
    let mut data = Vec::with_capacity(rows * width);
    for g in groups {
        for (r, p) in g.normalized_coords.iter().enumerate() {
            data.extend_from_slice(p);
            if let Some(ch) = &g.member_channels {
                data.extend_from_slice(&ch[r * c..(r + 1) * c]);
            }
        }
    }
    let x = tape.input(Tensor::matrix(rows, width, data)?);
    let h = shared_mlp(tape, store, x, "local", layers, batch_norm)?;
    tape.segment_max(h, l)
}

/// Settings of the attention operator inside a point attention layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionSettings {
    pub kind: AttentionKind,
    /// Corrupts the operator's backward pass. Test fixture only.
    pub sabotage_backward: bool,
}

impl Default for AttentionSettings {
    fn default() -> Self {
        Self {
            kind: AttentionKind::Ratio,
            sabotage_backward: false,
        }
    }
}

/// Neighbour attention followed by the 2-layer shared transform `prefix`.
/// Returns the layer output and the attention weights.
pub fn point_attention_layer(
    tape: &mut Tape,
    store: &ParameterStore,
    x: Var,
    table: &NeighborTable,
    prefix: &str,
    settings: AttentionSettings,
    batch_norm: bool,
) -> Result<(Var, Vec<f64>)> {
    let (agg, alpha) = neighbor_attention(tape, x, table, settings.kind, settings.sabotage_backward)?;
    let y = shared_mlp(tape, store, agg, prefix, 2, batch_norm)?;
    Ok((y, alpha))
}

/// Output of [`global_point_graph`] for a stack of clouds.
pub struct GraphFeatures {
    /// Per node: its local graph feature followed by its cloud's global
    /// feature.
    pub per_node: Var,
    /// One row per cloud.
    pub global: Var,
}

/// Global point graph over node coordinates: each node with its K
/// neighbours, centred on the node, through the 2-layer shared MLP
/// `global`, max-pooled over the K+1 points; then max-pooled over each
/// cloud's nodes.
pub fn global_point_graph(
    tape: &mut Tape,
    store: &ParameterStore,
    graphs: &[&KnnGraph],
    batch_norm: bool,
) -> Result<GraphFeatures> {
    let Some(first) = graphs.first() else {
        invalid!("no graphs");
    };
    let (k, m) = (first.k, first.num_nodes());
    if graphs.iter().any(|g| g.k != k || g.num_nodes() != m) {
        invalid!("stacked graphs must share node count and K");
    }
    let mut data = Vec::with_capacity(graphs.len() * m * (k + 1) * 3);
    for g in graphs {
        for (j, s) in g.node_coords.iter().enumerate() {
            data.extend_from_slice(&[0.0; 3]);
            for &n in g.neighbors(j) {
                let p = g.node_coords[n];
                data.extend_from_slice(&[p[0] - s[0], p[1] - s[1], p[2] - s[2]]);
            }
        }
    }
    let rows = graphs.len() * m * (k + 1);
    let x = tape.input(Tensor::matrix(rows, 3, data)?);
    let h = shared_mlp(tape, store, x, "global", 2, batch_norm)?;
    let local = tape.segment_max(h, k + 1)?;
    let global = tape.segment_max(local, m)?;
    let tile: Vec<usize> = (0..graphs.len() * m).map(|r| r / m).collect();
    let tiled = tape.gather_rows(global, tile)?;
    let per_node = tape.concat_cols(&[local, tiled])?;
    Ok(GraphFeatures { per_node, global })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{Mode, Precision};
    use crate::geometry::{group_local, knn_graph, NodeSet, PointCloud};

    fn identity(store: &mut ParameterStore, name: &str, n: usize) {
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            w[i * n + i] = 1.0;
        }
        *store.value_mut(&format!("{name}.weight")).unwrap() = Tensor::matrix(n, n, w).unwrap();
        *store.value_mut(&format!("{name}.bias")).unwrap() = Tensor::zeros(vec![n]);
    }

    #[test]
    fn identity_local_feature_is_member_max() {
        let cloud = PointCloud::from_coords(vec![[1.0, 1.0, 1.0], [1.0, 1.0, 2.0], [1.0, 2.0, 1.0]]).unwrap();
        let nodes = NodeSet {
            indices: vec![0],
            coords: vec![[1.0, 1.0, 1.0]],
        };
        let mut group = group_local(&cloud, &nodes, 3).unwrap();
        // keep only the two off-node members
        group.group_size = 2;
        group.member_indices = vec![1, 2];
        group.normalized_coords = vec![[0.0, 0.0, 1.0], [0.0, 1.0, 0.0]];
        let mut store = ParameterStore::new();
        register_mlp(&mut store, "local", 3, &[3], false, 0.001, 0).unwrap();
        identity(&mut store, "local.0", 3);
        let mut tape = Tape::new(Mode::Eval, Precision::F64, 0);
        let f = local_structure_feature(&mut tape, &store, &[&group], 1, false).unwrap();
        assert_eq!(tape.value(f).data(), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn identity_transform_is_relu_of_aggregation() {
        let mut store = ParameterStore::new();
        register_mlp(&mut store, "enc.0", 2, &[2, 2], false, 0.001, 0).unwrap();
        identity(&mut store, "enc.0.0", 2);
        identity(&mut store, "enc.0.1", 2);
        let table = NeighborTable::new(1, vec![1, 0]).unwrap();
        let mut tape = Tape::new(Mode::Eval, Precision::F64, 0);
        let x = tape.input(Tensor::matrix(2, 2, vec![1.0, -3.0, 2.0, -1.0]).unwrap());
        let (y, alpha) =
            point_attention_layer(&mut tape, &store, x, &table, "enc.0", AttentionSettings::default(), false).unwrap();
        assert_eq!(alpha, vec![1.0, 1.0]);
        // aggregation: (3, -4) and (3, -4); relu twice
        assert_eq!(tape.value(y).data(), &[3.0, 0.0, 3.0, 0.0]);
    }

    #[test]
    fn global_graph_two_nodes() {
        let nodes = NodeSet {
            indices: vec![0, 1],
            coords: vec![[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]],
        };
        let g = knn_graph(&nodes, 1).unwrap();
        let mut store = ParameterStore::new();
        register_mlp(&mut store, "global", 3, &[4, 5], true, 0.5, 1).unwrap();
        let mut tape = Tape::new(Mode::Eval, Precision::F64, 0);
        let out = global_point_graph(&mut tape, &store, &[&g], true).unwrap();
        let per = tape.value(out.per_node).clone();
        let glob = tape.value(out.global).clone();
        assert_eq!(per.shape(), &[2, 10]);
        for c in 0..5 {
            assert_eq!(glob.get(0, c), per.get(0, c).max(per.get(1, c)));
            assert_eq!(per.get(0, 5 + c), glob.get(0, c));
            assert_eq!(per.get(1, 5 + c), glob.get(0, c));
        }
        // translation cancels
        let moved = NodeSet {
            indices: vec![0, 1],
            coords: nodes.coords.iter().map(|p| [p[0] + 4.0, p[1] - 2.0, p[2] + 0.5]).collect(),
        };
        let g2 = knn_graph(&moved, 1).unwrap();
        let mut tape2 = Tape::new(Mode::Eval, Precision::F64, 0);
        let out2 = global_point_graph(&mut tape2, &store, &[&g2], true).unwrap();
        for (a, b) in per.data().iter().zip(tape2.value(out2.per_node).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
