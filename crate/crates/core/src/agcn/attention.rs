//! Neighbour attention scores and aggregation.
//!
//! Row `j` of a neighbour table lists the nodes `n(j, 0..K)` whose features
//! are mixed into node `j`:
//!
//! ```text
//! e_jk = f_j · f_n(j,k)
//! a_jk = e_jk / Σ_k e_jk          (ratio)      or softmax_k(e_jk)
//! f'_j = Σ_k a_jk f_n(j,k) + f_j
//! ```
//!
//! A ratio row whose denominator is below [`ZERO_DENOMINATOR`] in magnitude
//! falls back to uniform weights. All per-row sums run in ascending
//! neighbour index order so results do not depend on storage order.

use rayon::prelude::*;

use super::config::AttentionKind;
use crate::diffcore::{kernels, CustomOp, Tape, Tensor, Var};
use crate::error::{invalid, Result};
use crate::geometry::KnnGraph;

pub const ZERO_DENOMINATOR: f64 = 1e-12;

/// One row of features per node.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    width: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * width {
            invalid!("{} values for a {rows}x{width} feature matrix", data.len());
        }
        if data.iter().any(|v| !v.is_finite()) {
            invalid!("feature matrix contains non-finite values");
        }
        Ok(Self { width, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            invalid!("ragged feature rows");
        }
        Self::new(rows.len(), width, rows.concat())
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        Self::new(t.rows(), t.cols(), t.data().to_vec())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.rows(), self.width, self.data.clone()).expect("consistent shape")
    }

    pub fn rows(&self) -> usize {
        if self.width == 0 {
            0
        } else {
            self.data.len() / self.width
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.data[j * self.width..(j + 1) * self.width]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Row-stacked neighbour lists, possibly spanning several clouds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborTable {
    k: usize,
    indices: Vec<usize>,
}

impl NeighborTable {
    pub fn new(k: usize, indices: Vec<usize>) -> Result<Self> {
        if k == 0 || !indices.len().is_multiple_of(k) {
            invalid!("{} neighbour indices do not split into rows of {k}", indices.len());
        }
        let t = Self { k, indices };
        for j in 0..t.num_rows() {
            if t.row(j).contains(&j) {
                invalid!("row {j} lists itself as a neighbour");
            }
        }
        Ok(t)
    }

    /// Stacks graphs block-diagonally: graph `b`'s node `j` becomes row
    /// `offset_b + j`.
    pub fn from_graphs(graphs: &[&KnnGraph]) -> Result<Self> {
        let Some(first) = graphs.first() else {
            invalid!("no graphs to stack");
        };
        let k = first.k;
        let mut indices = Vec::new();
        let mut offset = 0;
        for g in graphs {
            if g.k != k {
                invalid!("stacked graphs disagree on K: {} vs {k}", g.k);
            }
            indices.extend(g.neighbor_indices.iter().map(|&i| i + offset));
            offset += g.num_nodes();
        }
        Ok(Self { k, indices })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn num_rows(&self) -> usize {
        self.indices.len() / self.k
    }

    pub fn row(&self, j: usize) -> &[usize] {
        &self.indices[j * self.k..(j + 1) * self.k]
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

/// Attention weights in neighbour storage order.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionScores {
    pub k: usize,
    /// `M×K`, row-major.
    pub scores: Vec<f64>,
    /// Rows that fell back to uniform weights.
    pub fallback: Vec<bool>,
}

impl AttentionScores {
    pub fn row(&self, j: usize) -> &[f64] {
        &self.scores[j * self.k..(j + 1) * self.k]
    }

    pub fn num_rows(&self) -> usize {
        self.fallback.len()
    }
}

struct RowScores {
    alpha: Vec<f64>,
    /// Ratio denominator per row (1 for softmax and fallback rows).
    denom: Vec<f64>,
    fallback: Vec<bool>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Neighbour slots of a row in ascending neighbour index order.
fn sorted_slots(row: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by_key(|&s| (row[s], s));
    order
}

fn score_rows(x: &[f64], d: usize, table: &NeighborTable, kind: AttentionKind) -> RowScores {
    let k = table.k;
    let per_row: Vec<(Vec<f64>, f64, bool)> = (0..table.num_rows())
        .into_par_iter()
        .map(|j| {
            let nbrs = table.row(j);
            let xj = &x[j * d..(j + 1) * d];
            let e: Vec<f64> = nbrs.iter().map(|&n| dot(xj, &x[n * d..(n + 1) * d])).collect();
            let order = sorted_slots(nbrs);
            match kind {
                AttentionKind::Ratio => {
                    let s: f64 = order.iter().map(|&o| e[o]).sum();
                    if s.abs() < ZERO_DENOMINATOR {
                        (vec![1.0 / k as f64; k], 1.0, true)
                    } else {
                        (e.iter().map(|v| v / s).collect(), s, false)
                    }
                }
                AttentionKind::Softmax => {
                    let max = order.iter().map(|&o| e[o]).fold(f64::NEG_INFINITY, f64::max);
                    let ex: Vec<f64> = e.iter().map(|v| (v - max).exp()).collect();
                    let z: f64 = order.iter().map(|&o| ex[o]).sum();
                    (ex.iter().map(|v| v / z).collect(), 1.0, false)
                }
            }
        })
        .collect();
    let mut out = RowScores {
        alpha: Vec::with_capacity(table.indices.len()),
        denom: Vec::with_capacity(per_row.len()),
        fallback: Vec::with_capacity(per_row.len()),
    };
    for (a, s, f) in per_row {
        out.alpha.extend(a);
        out.denom.push(s);
        out.fallback.push(f);
    }
    out
}

fn aggregate_rows(x: &[f64], d: usize, table: &NeighborTable, alpha: &[f64]) -> Vec<f64> {
    let k = table.k;
    let mut out = vec![0.0; x.len()];
    out.par_chunks_mut(d.max(1)).enumerate().for_each(|(j, o)| {
        let nbrs = table.row(j);
        for s in sorted_slots(nbrs) {
            let a = alpha[j * k + s];
            let xn = &x[nbrs[s] * d..(nbrs[s] + 1) * d];
            for (acc, v) in o.iter_mut().zip(xn) {
                *acc += a * v;
            }
        }
        for (acc, v) in o.iter_mut().zip(&x[j * d..(j + 1) * d]) {
            *acc += v;
        }
    });
    out
}

fn table_for(f: &FeatureMatrix, graph: &KnnGraph) -> Result<NeighborTable> {
    if f.rows() != graph.num_nodes() {
        invalid!("{} feature rows for {} graph nodes", f.rows(), graph.num_nodes());
    }
    NeighborTable::from_graphs(&[graph])
}

/// Dot-product ratio scores over each node's graph neighbours.
pub fn attention_scores(f: &FeatureMatrix, graph: &KnnGraph) -> Result<AttentionScores> {
    attention_scores_with(f, graph, AttentionKind::Ratio)
}

pub fn attention_scores_with(f: &FeatureMatrix, graph: &KnnGraph, kind: AttentionKind) -> Result<AttentionScores> {
    let table = table_for(f, graph)?;
    let r = score_rows(&f.data, f.width, &table, kind);
    Ok(AttentionScores {
        k: table.k,
        scores: r.alpha,
        fallback: r.fallback,
    })
}

/// Weighted neighbour sum plus the node's own feature.
pub fn attention_aggregate(f: &FeatureMatrix, scores: &AttentionScores, graph: &KnnGraph) -> Result<FeatureMatrix> {
    let table = table_for(f, graph)?;
    if scores.k != table.k || scores.scores.len() != table.indices.len() {
        invalid!("attention scores do not match the graph");
    }
    let out = aggregate_rows(&f.data, f.width, &table, &scores.scores);
    FeatureMatrix::new(f.rows(), f.width, out)
}

/// Taped neighbour attention (scores and aggregation in one operator).
/// Returns the output and the weights in neighbour storage order.
pub fn neighbor_attention(
    tape: &mut Tape,
    x: Var,
    table: &NeighborTable,
    kind: AttentionKind,
    sabotage_backward: bool,
) -> Result<(Var, Vec<f64>)> {
    let xv = tape.value(x);
    let (r, d) = (xv.rows(), xv.cols());
    if r != table.num_rows() {
        invalid!("{r} feature rows for {} neighbour rows", table.num_rows());
    }
    if table.indices.iter().any(|&i| i >= r) {
        invalid!("neighbour index out of range for {r} rows");
    }
    let scores = score_rows(xv.data(), d, table, kind);
    let out = aggregate_rows(xv.data(), d, table, &scores.alpha);
    let alpha = scores.alpha.clone();
    let op = NeighborAttentionOp {
        table: table.clone(),
        kind,
        scores,
        sabotage: sabotage_backward,
    };
    let y = tape.custom(&[x], Tensor::matrix(r, d, out)?, Box::new(op));
    Ok((y, alpha))
}

struct NeighborAttentionOp {
    table: NeighborTable,
    kind: AttentionKind,
    scores: RowScores,
    sabotage: bool,
}

impl CustomOp for NeighborAttentionOp {
    fn name(&self) -> &str {
        "neighbor_attention"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, g: &[f64]) -> Vec<Vec<f64>> {
        let x = inputs[0].data();
        let d = inputs[0].cols();
        let k = self.table.k;
        let mut dx = g.to_vec();
        for j in 0..self.table.num_rows() {
            let nbrs = self.table.row(j);
            let gj = &g[j * d..(j + 1) * d];
            let alpha = &self.scores.alpha[j * k..(j + 1) * k];
            let dalpha: Vec<f64> = nbrs.iter().map(|&n| dot(gj, &x[n * d..(n + 1) * d])).collect();
            let s: f64 = alpha.iter().zip(&dalpha).map(|(a, b)| a * b).sum();
            for (slot, &n) in nbrs.iter().enumerate() {
                let a = alpha[slot];
                let de = if self.scores.fallback[j] {
                    0.0
                } else {
                    match self.kind {
                        AttentionKind::Ratio => (dalpha[slot] - s) / self.scores.denom[j],
                        AttentionKind::Softmax => a * (dalpha[slot] - s),
                    }
                };
                for c in 0..d {
                    dx[n * d + c] += a * gj[c] + de * x[j * d + c];
                    dx[j * d + c] += de * x[n * d + c];
                }
            }
        }
        if self.sabotage {
            dx.iter_mut().for_each(|v| *v *= 1.5);
        }
        vec![dx]
    }
}

/// Taped all-pairs attention within each block of `nodes_per_cloud` rows:
/// every node attends to every node of its cloud, itself included.
pub fn dense_attention(tape: &mut Tape, x: Var, nodes_per_cloud: usize) -> Result<Var> {
    let xv = tape.value(x);
    let (r, d) = (xv.rows(), xv.cols());
    let m = nodes_per_cloud;
    if m == 0 || r % m != 0 {
        invalid!("{r} rows do not split into clouds of {m} nodes");
    }
    let mut out = Vec::with_capacity(r * d);
    let mut blocks = Vec::with_capacity(r / m);
    for xb in xv.data().chunks(m * d) {
        let mut a = kernels::matmul_bt(xb, m, d, xb, m);
        let mut denom = vec![1.0; m];
        let mut fallback = vec![false; m];
        for (j, row) in a.chunks_mut(m).enumerate() {
            let s: f64 = row.iter().sum();
            if s.abs() < ZERO_DENOMINATOR {
                row.iter_mut().for_each(|v| *v = 1.0 / m as f64);
                fallback[j] = true;
            } else {
                row.iter_mut().for_each(|v| *v /= s);
                denom[j] = s;
            }
        }
        let mut y = kernels::matmul(&a, m, m, xb, d);
        for (o, v) in y.iter_mut().zip(xb) {
            *o += v;
        }
        out.extend(y);
        blocks.push(DenseBlock { alpha: a, denom, fallback });
    }
    let op = DenseAttentionOp { m, blocks };
    Ok(tape.custom(&[x], Tensor::matrix(r, d, out)?, Box::new(op)))
}

struct DenseBlock {
    alpha: Vec<f64>,
    denom: Vec<f64>,
    fallback: Vec<bool>,
}

struct DenseAttentionOp {
    m: usize,
    blocks: Vec<DenseBlock>,
}

impl CustomOp for DenseAttentionOp {
    fn name(&self) -> &str {
        "dense_attention"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, g: &[f64]) -> Vec<Vec<f64>> {
        let d = inputs[0].cols();
        let m = self.m;
        let mut dx = Vec::with_capacity(g.len());
        for ((xb, gb), blk) in inputs[0].data().chunks(m * d).zip(g.chunks(m * d)).zip(&self.blocks) {
            let mut de = kernels::matmul_bt(gb, m, d, xb, m);
            for (j, row) in de.chunks_mut(m).enumerate() {
                if blk.fallback[j] {
                    row.iter_mut().for_each(|v| *v = 0.0);
                    continue;
                }
                let a = &blk.alpha[j * m..(j + 1) * m];
                let s: f64 = a.iter().zip(row.iter()).map(|(p, q)| p * q).sum();
                row.iter_mut().for_each(|v| *v = (*v - s) / blk.denom[j]);
            }
            let at_g = kernels::matmul_at(&blk.alpha, m, m, gb, d);
            let de_x = kernels::matmul(&de, m, m, xb, d);
            let det_x = kernels::matmul_at(&de, m, m, xb, d);
            for i in 0..m * d {
                dx.push(gb[i] + at_g[i] + de_x[i] + det_x[i]);
            }
        }
        vec![dx]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{Mode, Precision};
    use crate::geometry::{knn_graph, NodeSet};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn graph(rows: &[Vec<usize>]) -> KnnGraph {
        let coords = (0..rows.len()).map(|i| [i as f64, 0.0, 0.0]).collect();
        KnnGraph::from_rows(coords, rows).unwrap()
    }

    fn fm(rows: &[&[f64]]) -> FeatureMatrix {
        FeatureMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn score_examples() {
        let g = graph(&[vec![1, 2], vec![0, 2], vec![0, 1]]);
        let s = attention_scores(&fm(&[&[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0]]), &g).unwrap();
        assert_eq!(s.row(0), &[0.5, 0.5]);
        let s = attention_scores(&fm(&[&[1.0, 0.0], &[2.0, 0.0], &[0.0, 5.0]]), &g).unwrap();
        assert_eq!(s.row(0), &[1.0, 0.0]);
        let s = attention_scores(&fm(&[&[1.0, 0.0], &[0.0, 2.0], &[0.0, -3.0]]), &g).unwrap();
        assert_eq!(s.row(0), &[0.5, 0.5]);
        assert!(s.fallback[0]);
    }

    #[test]
    fn aggregate_examples() {
        let g = graph(&[vec![1, 2], vec![0, 2], vec![0, 1]]);
        let f = fm(&[&[1.0, 1.0], &[2.0, 0.0], &[0.0, 2.0]]);
        let scores = AttentionScores {
            k: 2,
            scores: vec![0.5, 0.5, 1.0, 0.0, 0.0, 1.0],
            fallback: vec![false; 3],
        };
        let out = attention_aggregate(&f, &scores, &g).unwrap();
        assert_eq!(out.row(0), &[2.0, 2.0]);
        // one-hot: neighbour plus self
        assert_eq!(out.row(1), &[3.0, 1.0]);
        assert_eq!(out.row(2), &[2.0, 2.0]);
    }

    #[test]
    fn scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows: Vec<Vec<f64>> = (0..10).map(|_| (0..4).map(|_| rng.random::<f64>()).collect()).collect();
        let nodes = NodeSet {
            indices: (0..10).collect(),
            coords: (0..10).map(|_| [rng.random(), rng.random(), rng.random()]).collect(),
        };
        let g = knn_graph(&nodes, 3).unwrap();
        let a = attention_scores(&FeatureMatrix::from_rows(&rows).unwrap(), &g).unwrap();
        let scaled: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v * 7.3).collect()).collect();
        let b = attention_scores(&FeatureMatrix::from_rows(&scaled).unwrap(), &g).unwrap();
        for (x, y) in a.scores.iter().zip(&b.scores) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    fn numeric_check(build: impl Fn(&mut Tape, Var) -> Var, x0: Vec<f64>, rows: usize, d: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let probe: Vec<f64> = (0..x0.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |x: &[f64]| -> f64 {
            let mut t = Tape::new(Mode::Eval, Precision::F64, 0);
            let v = t.input(Tensor::matrix(rows, d, x.to_vec()).unwrap());
            let y = build(&mut t, v);
            t.value(y).data().iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        let mut t = Tape::new(Mode::Eval, Precision::F64, 0);
        let v = t.input(Tensor::matrix(rows, d, x0.clone()).unwrap());
        let y = build(&mut t, v);
        let yv = t.value(y).clone();
        let total: f64 = yv.data().iter().zip(&probe).map(|(a, b)| a * b).sum();
        struct Dot(Vec<f64>);
        impl CustomOp for Dot {
            fn name(&self) -> &str {
                "dot"
            }
            fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64]) -> Vec<Vec<f64>> {
                vec![self.0.iter().map(|p| p * g[0]).collect()]
            }
        }
        let l = t.custom(&[y], Tensor::new(vec![], vec![total]).unwrap(), Box::new(Dot(probe.clone())));
        let grads = t.backward(l).unwrap();
        let analytic = grads.get(v).unwrap().to_vec();
        for i in 0..x0.len() {
            let h = 1e-6;
            let mut xp = x0.clone();
            xp[i] += h;
            let mut xm = x0.clone();
            xm[i] -= h;
            let num = (loss(&xp) - loss(&xm)) / (2.0 * h);
            let err = (num - analytic[i]).abs() / num.abs().max(analytic[i].abs()).max(1e-6);
            assert!(err < 1e-6, "element {i}: analytic {} numeric {num}", analytic[i]);
        }
    }

    #[test]
    fn neighbor_attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (rows, d) = (6, 3);
        let x0: Vec<f64> = (0..rows * d).map(|_| rng.random_range(0.1..1.0)).collect();
        let table = NeighborTable::new(2, vec![1, 2, 0, 3, 4, 5, 5, 1, 2, 0, 3, 4]).unwrap();
        for kind in [AttentionKind::Ratio, AttentionKind::Softmax] {
            let t2 = table.clone();
            numeric_check(
                move |t, v| neighbor_attention(t, v, &t2, kind, false).unwrap().0,
                x0.clone(),
                rows,
                d,
            );
        }
    }

    #[test]
    fn dense_attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (rows, d) = (8, 3);
        let x0: Vec<f64> = (0..rows * d).map(|_| rng.random_range(0.1..1.0)).collect();
        numeric_check(|t, v| dense_attention(t, v, 4).unwrap(), x0, rows, d);
    }

    #[test]
    fn dense_matches_complete_neighbor_table_plus_self() {
        // all-pairs with self equals: a_jj f_j + Σ_{k≠j} a_jk f_k + f_j
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (m, d) = (5, 2);
        let x: Vec<f64> = (0..m * d).map(|_| rng.random_range(0.1..1.0)).collect();
        let mut t = Tape::new(Mode::Eval, Precision::F64, 0);
        let v = t.input(Tensor::matrix(m, d, x.clone()).unwrap());
        let y = dense_attention(&mut t, v, m).unwrap();
        for j in 0..m {
            let xj = &x[j * d..(j + 1) * d];
            let e: Vec<f64> = (0..m).map(|k| dot(xj, &x[k * d..(k + 1) * d])).collect();
            let s: f64 = e.iter().sum();
            for c in 0..d {
                let want = xj[c] + (0..m).map(|k| e[k] / s * x[k * d + c]).sum::<f64>();
                assert!((t.value(y).get(j, c) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn table_rejects_self_loops() {
        assert!(NeighborTable::new(1, vec![0, 0]).is_err());
        assert!(NeighborTable::new(2, vec![1, 0, 1]).is_err());
    }
}
