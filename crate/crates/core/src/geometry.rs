//! Differentiation-free point-cloud kernels: sampling, neighbour search,
//! grouping and interpolation.
//!
//! Every routine here is a pure function of its inputs. Neighbour search is
//! exhaustive and orders candidates by `(squared distance, index)`, so ties
//! always resolve to the lowest index and results are reproducible.

use std::cmp::Ordering;

use rayon::prelude::*;

use crate::error::{invalid, Result};

pub type Point3 = [f64; 3];

/// Distances below this are treated as coincident during interpolation.
pub const IDW_COINCIDENT_EPS: f64 = 1e-10;

#[inline]
pub fn squared_distance(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// N points with coordinates, optional per-point channels (normals, colour)
/// and optional per-point integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    coords: Vec<Point3>,
    channels: Vec<f64>,
    num_channels: usize,
    labels: Option<Vec<u32>>,
}

impl PointCloud {
    /// `channels` is row-major `N × num_channels`.
    pub fn new(
        coords: Vec<Point3>,
        channels: Vec<f64>,
        num_channels: usize,
        labels: Option<Vec<u32>>,
    ) -> Result<Self> {
        if coords.is_empty() {
            invalid!("point cloud must contain at least one point");
        }
        if let Some(i) = coords.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            invalid!("point {i} has a non-finite coordinate");
        }
        if channels.len() != coords.len() * num_channels {
            invalid!(
                "channel buffer has {} values, expected {} × {}",
                channels.len(),
                coords.len(),
                num_channels
            );
        }
        if let Some(i) = channels.iter().position(|v| !v.is_finite()) {
            invalid!("channel value {i} is non-finite");
        }
        if let Some(labels) = &labels {
            if labels.len() != coords.len() {
                invalid!("{} labels for {} points", labels.len(), coords.len());
            }
        }
        Ok(Self {
            coords,
            channels,
            num_channels,
            labels,
        })
    }

    pub fn from_coords(coords: Vec<Point3>) -> Result<Self> {
        Self::new(coords, Vec::new(), 0, None)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[Point3] {
        &self.coords
    }

    pub fn num_channels(&self) -> usize {
        self.num_channels
    }

    /// Row-major `N × C` channel buffer.
    pub fn channels(&self) -> &[f64] {
        &self.channels
    }

    pub fn channel_row(&self, i: usize) -> &[f64] {
        &self.channels[i * self.num_channels..(i + 1) * self.num_channels]
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    /// Points `indices[0], indices[1], ...` in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            invalid!("index {bad} out of range for {} points", self.len());
        }
        let coords = indices.iter().map(|&i| self.coords[i]).collect();
        let mut channels = Vec::with_capacity(indices.len() * self.num_channels);
        for &i in indices {
            channels.extend_from_slice(self.channel_row(i));
        }
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        Self::new(coords, channels, self.num_channels, labels)
    }

    pub fn with_coords(&self, coords: Vec<Point3>) -> Result<Self> {
        Self::new(coords, self.channels.clone(), self.num_channels, self.labels.clone())
    }

    pub fn with_channels(&self, channels: Vec<f64>) -> Result<Self> {
        Self::new(self.coords.clone(), channels, self.num_channels, self.labels.clone())
    }

    pub fn translated(&self, offset: Point3) -> Result<Self> {
        let coords = self
            .coords
            .iter()
            .map(|p| [p[0] + offset[0], p[1] + offset[1], p[2] + offset[2]])
            .collect();
        self.with_coords(coords)
    }

    pub fn centroid(&self) -> Point3 {
        let mut c = [0.0; 3];
        for p in &self.coords {
            for d in 0..3 {
                c[d] += p[d];
            }
        }
        let n = self.len() as f64;
        [c[0] / n, c[1] / n, c[2] / n]
    }
}

/// The M nodes picked from a parent cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeSet {
    pub indices: Vec<usize>,
    pub coords: Vec<Point3>,
}

impl NodeSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// For each node, its L nearest cloud points (the node itself included).
#[derive(Debug, Clone, PartialEq)]
pub struct LocalGroup {
    pub group_size: usize,
    /// `M × L` indices into the parent cloud.
    pub member_indices: Vec<usize>,
    /// `M × L` member coordinates minus their node's coordinates.
    pub normalized_coords: Vec<Point3>,
    /// `M × L × C` gathered channels when the parent cloud has any.
    pub member_channels: Option<Vec<f64>>,
    pub num_channels: usize,
}

impl LocalGroup {
    pub fn num_nodes(&self) -> usize {
        self.member_indices.len() / self.group_size
    }

    pub fn members(&self, node: usize) -> &[usize] {
        &self.member_indices[node * self.group_size..(node + 1) * self.group_size]
    }
}

/// Directed K-nearest-neighbour graph over M nodes, self loops excluded.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnGraph {
    pub k: usize,
    /// `M × K`, each row ascending by distance.
    pub neighbor_indices: Vec<usize>,
    pub node_coords: Vec<Point3>,
}

impl KnnGraph {
    pub fn num_nodes(&self) -> usize {
        self.node_coords.len()
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.neighbor_indices[node * self.k..(node + 1) * self.k]
    }

    /// Builds a graph from explicit adjacency rows. Rows are taken as given
    /// (no distance ordering is imposed), but self loops and out-of-range
    /// indices are rejected.
    pub fn from_rows(node_coords: Vec<Point3>, rows: &[Vec<usize>]) -> Result<Self> {
        let m = node_coords.len();
        if rows.len() != m {
            invalid!("{} adjacency rows for {m} nodes", rows.len());
        }
        let k = rows.first().map_or(0, |r| r.len());
        let mut neighbor_indices = Vec::with_capacity(m * k);
        for (j, row) in rows.iter().enumerate() {
            if row.len() != k {
                invalid!("adjacency row {j} has {} entries, expected {k}", row.len());
            }
            for &n in row {
                if n >= m || n == j {
                    invalid!("adjacency row {j} has invalid neighbour {n}");
                }
            }
            neighbor_indices.extend_from_slice(row);
        }
        Ok(Self {
            k,
            neighbor_indices,
            node_coords,
        })
    }

    /// Nodes reachable from `node` in at most `hops` steps along out-edges,
    /// `node` included.
    pub fn hop_set(&self, node: usize, hops: usize) -> Vec<bool> {
        let mut reached = vec![false; self.num_nodes()];
        reached[node] = true;
        let mut frontier = vec![node];
        for _ in 0..hops {
            let mut next = Vec::new();
            for &j in &frontier {
                for &n in self.neighbors(j) {
                    if !reached[n] {
                        reached[n] = true;
                        next.push(n);
                    }
                }
            }
            frontier = next;
        }
        reached
    }
}

/// Rows of `k` neighbour indices, one row per query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborRows {
    pub k: usize,
    pub indices: Vec<usize>,
}

impl NeighborRows {
    pub fn row(&self, q: usize) -> &[usize] {
        &self.indices[q * self.k..(q + 1) * self.k]
    }

    pub fn num_rows(&self) -> usize {
        if self.k == 0 {
            0
        } else {
            self.indices.len() / self.k
        }
    }
}

/// Greedy farthest point sampling starting at `seed_index`.
pub fn farthest_point_sample(cloud: &PointCloud, m: usize, seed_index: usize) -> Result<NodeSet> {
    let n = cloud.len();
    if m == 0 || m > n {
        invalid!("cannot sample {m} nodes from {n} points");
    }
    if seed_index >= n {
        invalid!("seed index {seed_index} out of range for {n} points");
    }
    let coords = cloud.coords();
    let mut min_dist = vec![f64::INFINITY; n];
    let mut selected = vec![false; n];
    let mut indices = Vec::with_capacity(m);
    let mut current = seed_index;
    for _ in 0..m {
        indices.push(current);
        selected[current] = true;
        let c = coords[current];
        let mut best: Option<usize> = None;
        for i in 0..n {
            if selected[i] {
                continue;
            }
            let d = squared_distance(&coords[i], &c);
            if d < min_dist[i] {
                min_dist[i] = d;
            }
            // strict comparison keeps the lowest index on ties
            if best.is_none_or(|b| min_dist[i] > min_dist[b]) {
                best = Some(i);
            }
        }
        match best {
            Some(b) => current = b,
            None => break,
        }
    }
    let node_coords = indices.iter().map(|&i| coords[i]).collect();
    Ok(NodeSet {
        indices,
        coords: node_coords,
    })
}

#[inline]
fn by_distance_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.partial_cmp(&b.0)
        .unwrap_or(Ordering::Equal)
        .then(a.1.cmp(&b.1))
}

fn nearest_row(query: &Point3, refs: &[Point3], k: usize, skip: Option<usize>) -> Vec<(f64, usize)> {
    let mut cand: Vec<(f64, usize)> = refs
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != skip)
        .map(|(i, r)| (squared_distance(query, r), i))
        .collect();
    if k < cand.len() {
        cand.select_nth_unstable_by(k, by_distance_then_index);
        cand.truncate(k);
    }
    cand.sort_unstable_by(by_distance_then_index);
    cand
}

/// Exhaustive k-nearest-neighbour query.
///
/// With `exclude_self`, queries are taken to be the references themselves
/// (query `q` is reference `q`) and each query's own index is skipped.
pub fn knn_query(
    queries: &[Point3],
    references: &[Point3],
    k: usize,
    exclude_self: bool,
) -> Result<NeighborRows> {
    let r = references.len();
    if exclude_self {
        if queries.len() != r {
            invalid!(
                "self exclusion needs queries drawn from the references ({} vs {r})",
                queries.len()
            );
        }
        if k + 1 > r {
            invalid!("k={k} exceeds the {} other references", r.saturating_sub(1));
        }
    } else if k > r {
        invalid!("k={k} exceeds {r} references");
    }
    let rows: Vec<Vec<usize>> = queries
        .par_iter()
        .enumerate()
        .map(|(q, p)| {
            let skip = exclude_self.then_some(q);
            nearest_row(p, references, k, skip)
                .into_iter()
                .map(|(_, i)| i)
                .collect()
        })
        .collect();
    Ok(NeighborRows {
        k,
        indices: rows.concat(),
    })
}

/// K-nearest-neighbour graph over the nodes, without self loops.
pub fn knn_graph(nodes: &NodeSet, k: usize) -> Result<KnnGraph> {
    let m = nodes.len();
    if k == 0 || k >= m {
        invalid!("graph degree k={k} must be in 1..{m}");
    }
    let rows = knn_query(&nodes.coords, &nodes.coords, k, true)?;
    Ok(KnnGraph {
        k,
        neighbor_indices: rows.indices,
        node_coords: nodes.coords.clone(),
    })
}

/// Gathers the `l` nearest cloud points of every node and expresses them
/// relative to the node.
pub fn group_local(cloud: &PointCloud, nodes: &NodeSet, l: usize) -> Result<LocalGroup> {
    if l == 0 || l > cloud.len() {
        invalid!("group size {l} must be in 1..={}", cloud.len());
    }
    let rows = knn_query(&nodes.coords, cloud.coords(), l, false)?;
    let coords = cloud.coords();
    let mut normalized_coords = Vec::with_capacity(rows.indices.len());
    for (j, node) in nodes.coords.iter().enumerate() {
        for &i in rows.row(j) {
            let p = coords[i];
            normalized_coords.push([p[0] - node[0], p[1] - node[1], p[2] - node[2]]);
        }
    }
    let c = cloud.num_channels();
    let member_channels = (c > 0).then(|| {
        let mut out = Vec::with_capacity(rows.indices.len() * c);
        for &i in &rows.indices {
            out.extend_from_slice(cloud.channel_row(i));
        }
        out
    });
    Ok(LocalGroup {
        group_size: l,
        member_indices: rows.indices,
        normalized_coords,
        member_channels,
        num_channels: c,
    })
}

/// Interpolation stencil: for each destination, `m` source indices and
/// normalised weights that sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct IdwStencil {
    pub m: usize,
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Inverse-distance weights `1 / dist^power` over the `m` nearest sources,
/// normalised per destination. A destination closer than
/// [`IDW_COINCIDENT_EPS`] to its nearest source takes that source alone.
pub fn idw_stencil(dst: &[Point3], src: &[Point3], m: usize, power: f64) -> Result<IdwStencil> {
    if m == 0 || m > src.len() {
        invalid!("interpolation needs 1..={} sources, got m={m}", src.len());
    }
    if !power.is_finite() || power < 0.0 {
        invalid!("interpolation power must be finite and non-negative, got {power}");
    }
    let rows: Vec<(Vec<usize>, Vec<f64>)> = dst
        .par_iter()
        .map(|p| {
            let near = nearest_row(p, src, m, None);
            let idx: Vec<usize> = near.iter().map(|&(_, i)| i).collect();
            let nearest = near[0].0.sqrt();
            if nearest < IDW_COINCIDENT_EPS {
                let mut w = vec![0.0; m];
                w[0] = 1.0;
                return (idx, w);
            }
            let raw: Vec<f64> = near
                .iter()
                .map(|&(d2, _)| 1.0 / d2.sqrt().powf(power))
                .collect();
            let total: f64 = raw.iter().sum();
            (idx, raw.iter().map(|w| w / total).collect())
        })
        .collect();
    let mut indices = Vec::with_capacity(dst.len() * m);
    let mut weights = Vec::with_capacity(dst.len() * m);
    for (i, w) in rows {
        indices.extend(i);
        weights.extend(w);
    }
    Ok(IdwStencil {
        m,
        indices,
        weights,
    })
}

/// Interpolates `S × F` source features onto the destination points.
pub fn interpolate_idw(
    dst: &[Point3],
    src: &[Point3],
    src_features: &[f64],
    width: usize,
    m: usize,
    power: f64,
) -> Result<Vec<f64>> {
    if src_features.len() != src.len() * width {
        invalid!(
            "source features have {} values, expected {} × {width}",
            src_features.len(),
            src.len()
        );
    }
    let stencil = idw_stencil(dst, src, m, power)?;
    let mut out = vec![0.0; dst.len() * width];
    for (d, row) in out.chunks_mut(width.max(1)).enumerate().take(dst.len()) {
        for t in 0..m {
            let s = stencil.indices[d * m + t];
            let w = stencil.weights[d * m + t];
            if w == 0.0 {
                continue;
            }
            let f = &src_features[s * width..(s + 1) * width];
            for (o, v) in row.iter_mut().zip(f) {
                *o += w * v;
            }
        }
    }
    Ok(out)
}
