use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::kernels;
use super::store::ParameterStore;
use super::tensor::Tensor;
use crate::error::{invalid, Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Arithmetic precision of recorded values. `F32` rounds every leaf and
/// every operator output through `f32`; gradients stay in `f64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn bits(self) -> u32 {
        match self {
            Precision::F32 => 32,
            Precision::F64 => 64,
        }
    }

    pub fn from_bits(bits: u32) -> Result<Self> {
        match bits {
            32 => Ok(Precision::F32),
            64 => Ok(Precision::F64),
            _ => invalid!("precision must be 32 or 64, got {bits}"),
        }
    }
}

/// Operator whose forward value is computed by the caller and whose
/// backward pass is supplied here.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &str;

    /// Gradient with respect to each input, in input order.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_output: &[f64]) -> Vec<Vec<f64>>;
}

/// Batch statistics observed by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BnRunningUpdate {
    pub prefix: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Param,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Relu(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    SegmentMax {
        x: Var,
        argmax: Vec<usize>,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
        weights: Option<Vec<f64>>,
        taps: usize,
    },
    Concat(Vec<Var>),
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

/// Records a forward computation for reverse-mode differentiation.
pub struct Tape {
    nodes: Vec<Node>,
    mode: Mode,
    precision: Precision,
    rng: ChaCha8Rng,
    params: HashMap<String, Var>,
    running: Vec<BnRunningUpdate>,
}

fn add_into(dst: &mut Option<Vec<f64>>, src: Vec<f64>) {
    match dst {
        Some(d) => {
            for (a, b) in d.iter_mut().zip(src) {
                *a += b;
            }
        }
        None => *dst = Some(src),
    }
}

impl Tape {
    /// `seed` drives dropout masks.
    pub fn new(mode: Mode, precision: Precision, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
            precision,
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: HashMap::new(),
            running: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, mut value: Tensor, op: Op) -> Var {
        if self.precision == Precision::F32 {
            value.round_to_f32();
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf bound to a named parameter. Repeated calls return the same var.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.value(name)?.clone();
        let v = self.push(value, Op::Param);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// `y = x W + b` for `x: R×Din`, `W: Din×Dout`, `b: Dout`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (r, din) = (xv.rows(), xv.cols());
        if wv.shape().len() != 2 || wv.shape()[0] != din {
            invalid!("linear: input width {din} does not match weight shape {:?}", wv.shape());
        }
        let dout = wv.shape()[1];
        let mut out = kernels::matmul(xv.data(), r, din, wv.data(), dout);
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != dout {
                invalid!("linear: bias has {} values, expected {dout}", bv.len());
            }
            let bias = bv.data();
            for row in out.chunks_mut(dout.max(1)) {
                for (o, bb) in row.iter_mut().zip(bias) {
                    *o += bb;
                }
            }
        }
        let value = Tensor::matrix(r, dout, out)?;
        Ok(self.push(value, Op::Linear { x, w, b }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Relu(x))
    }

    /// Per-column normalisation of `x: R×D`.
    ///
    /// In training mode the batch statistics are used and recorded for
    /// [`ParameterStore::apply_running_updates`] under `prefix`; in
    /// evaluation mode the supplied running statistics are used.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        prefix: &str,
    ) -> Result<Var> {
        let xv = self.value(x);
        let (r, d) = (xv.rows(), xv.cols());
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            invalid!("batch norm `{prefix}`: scale/shift width mismatch for {d} features");
        }
        if running_mean.len() != d || running_var.len() != d {
            invalid!("batch norm `{prefix}`: running statistics width mismatch");
        }
        let batch_stats = self.mode == Mode::Train;
        let (mean, var) = if batch_stats {
            if r < 2 {
                invalid!("batch norm `{prefix}` needs at least 2 rows in training mode, got {r}");
            }
            let mut mean = vec![0.0; d];
            for row in xv.data().chunks(d) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= r as f64);
            let mut var = vec![0.0; d];
            for row in xv.data().chunks(d) {
                for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s /= r as f64);
            (mean, var)
        } else {
            (running_mean.to_vec(), running_var.to_vec())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut normalized = Vec::with_capacity(r * d);
        for row in xv.data().chunks(d) {
            for c in 0..d {
                normalized.push((row[c] - mean[c]) * inv_std[c]);
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = normalized.clone();
        for row in out.chunks_mut(d) {
            for c in 0..d {
                row[c] = g[c] * row[c] + b[c];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        if batch_stats {
            self.running.push(BnRunningUpdate {
                prefix: prefix.to_string(),
                mean,
                var,
            });
        }
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
                batch_stats,
            },
        ))
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `p` and survivors are scaled by `1 / (1 − p)`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            invalid!("dropout rate must lie in [0, 1), got {p}");
        }
        if self.mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let scale = 1.0 / (1.0 - p);
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.random::<f64>() < p { 0.0 } else { scale })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Dropout { x, mask }))
    }

    /// Max over consecutive blocks of `group` rows: `(G·group)×D → G×D`.
    /// Ties resolve to the first row of the block.
    pub fn segment_max(&mut self, x: Var, group: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, d) = (xv.rows(), xv.cols());
        if group == 0 {
            invalid!("max reduction over an empty axis");
        }
        if r % group != 0 {
            invalid!("{r} rows do not split into groups of {group}");
        }
        let groups = r / group;
        let data = xv.data();
        let per_group: Vec<(Vec<f64>, Vec<usize>)> = (0..groups)
            .into_par_iter()
            .map(|gi| {
                let mut best = data[gi * group * d..(gi * group + 1) * d].to_vec();
                let mut arg = vec![gi * group; d];
                for row in gi * group + 1..(gi + 1) * group {
                    let vals = &data[row * d..(row + 1) * d];
                    for c in 0..d {
                        if vals[c] > best[c] {
                            best[c] = vals[c];
                            arg[c] = row;
                        }
                    }
                }
                (best, arg)
            })
            .collect();
        let mut out = Vec::with_capacity(groups * d);
        let mut argmax = Vec::with_capacity(groups * d);
        for (b, a) in per_group {
            out.extend(b);
            argmax.extend(a);
        }
        let value = Tensor::matrix(groups, d, out)?;
        Ok(self.push(value, Op::SegmentMax { x, argmax }))
    }

    /// Row gather: output row `o` is input row `index[o]`.
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        self.gather(x, index, None, 1)
    }

    /// Output row `o` is `Σ_t weights[o·taps + t] · x[index[o·taps + t]]`.
    pub fn weighted_gather(&mut self, x: Var, index: Vec<usize>, weights: Vec<f64>, taps: usize) -> Result<Var> {
        if weights.len() != index.len() {
            invalid!("{} weights for {} indices", weights.len(), index.len());
        }
        self.gather(x, index, Some(weights), taps)
    }

    fn gather(&mut self, x: Var, index: Vec<usize>, weights: Option<Vec<f64>>, taps: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, d) = (xv.rows(), xv.cols());
        if taps == 0 || !index.len().is_multiple_of(taps) {
            invalid!("{} gather indices do not split into rows of {taps}", index.len());
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            invalid!("gather index {bad} out of range for {r} rows");
        }
        let out_rows = index.len() / taps;
        let data = xv.data();
        let mut out = vec![0.0; out_rows * d];
        for (o, row) in out.chunks_mut(d.max(1)).enumerate().take(out_rows) {
            for t in 0..taps {
                let src = index[o * taps + t];
                let w = weights.as_ref().map_or(1.0, |w| w[o * taps + t]);
                for (a, v) in row.iter_mut().zip(&data[src * d..(src + 1) * d]) {
                    *a += w * v;
                }
            }
        }
        let value = Tensor::matrix(out_rows, d, out)?;
        Ok(self.push(
            value,
            Op::Gather {
                x,
                index,
                weights,
                taps,
            },
        ))
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            invalid!("concatenation of zero tensors");
        }
        let r = self.value(parts[0]).rows();
        if let Some(p) = parts.iter().find(|&&p| self.value(p).rows() != r) {
            invalid!("concatenation row mismatch: {} vs {r}", self.value(*p).rows());
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for row in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(row));
            }
        }
        let value = Tensor::matrix(r, total, out)?;
        Ok(self.push(value, Op::Concat(parts.to_vec())))
    }

    /// Mean over rows of `−log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (b, c) = (lv.rows(), lv.cols());
        if targets.len() != b {
            invalid!("{} targets for {b} rows of logits", targets.len());
        }
        if b == 0 {
            invalid!("cross-entropy over an empty batch");
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            invalid!("target class {t} out of range for {c} classes");
        }
        let mut probs = Vec::with_capacity(b * c);
        let mut total = 0.0;
        for (row, &t) in lv.data().chunks(c).zip(targets) {
            let (arg, &max) = row
                .iter()
                .enumerate()
                .fold((0, &row[0]), |acc, (i, v)| if *v > *acc.1 { (i, v) } else { acc });
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let rest: f64 = exps.iter().enumerate().filter(|&(i, _)| i != arg).map(|(_, e)| e).sum();
            total += (max - row[t]) + rest.ln_1p();
            let z = 1.0 + rest;
            probs.extend(exps.iter().map(|e| e / z));
        }
        let value = Tensor::new(vec![], vec![total / b as f64])?;
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Records an operator whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        )
    }

    pub fn running_updates(&self) -> &[BnRunningUpdate] {
        &self.running
    }

    pub fn param_vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            invalid!("backward needs a scalar loss, got shape {:?}", self.value(loss).shape());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::Param => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (r, din, dout) = (xv.rows(), xv.cols(), wv.shape()[1]);
                    add_into(&mut grads[x.0], kernels::matmul_bt(&g, r, dout, wv.data(), din));
                    add_into(&mut grads[w.0], kernels::matmul_at(xv.data(), r, din, &g, dout));
                    if let Some(b) = b {
                        let mut db = vec![0.0; dout];
                        for row in g.chunks(dout.max(1)) {
                            for (a, v) in db.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                        add_into(&mut grads[b.0], db);
                    }
                }
                Op::Relu(x) => {
                    let xv = self.value(*x).data();
                    let dx = g.iter().zip(xv).map(|(g, v)| if *v > 0.0 { *g } else { 0.0 }).collect();
                    add_into(&mut grads[x.0], dx);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    normalized,
                    inv_std,
                    batch_stats,
                } => {
                    let d = inv_std.len();
                    let r = g.len() / d;
                    let gam = self.value(*gamma).data();
                    let mut sum_g = vec![0.0; d];
                    let mut sum_gx = vec![0.0; d];
                    for (grow, nrow) in g.chunks(d).zip(normalized.chunks(d)) {
                        for c in 0..d {
                            sum_g[c] += grow[c];
                            sum_gx[c] += grow[c] * nrow[c];
                        }
                    }
                    let mut dx = Vec::with_capacity(g.len());
                    let rf = r as f64;
                    for (grow, nrow) in g.chunks(d).zip(normalized.chunks(d)) {
                        for c in 0..d {
                            let v = if *batch_stats {
                                gam[c] * inv_std[c] * (grow[c] - sum_g[c] / rf - nrow[c] * sum_gx[c] / rf)
                            } else {
                                gam[c] * inv_std[c] * grow[c]
                            };
                            dx.push(v);
                        }
                    }
                    add_into(&mut grads[x.0], dx);
                    add_into(&mut grads[gamma.0], sum_gx);
                    add_into(&mut grads[beta.0], sum_g);
                }
                Op::Dropout { x, mask } => {
                    let dx = g.iter().zip(mask).map(|(g, m)| g * m).collect();
                    add_into(&mut grads[x.0], dx);
                }
                Op::SegmentMax { x, argmax } => {
                    let xv = self.value(*x);
                    let d = xv.cols();
                    let mut dx = vec![0.0; xv.len()];
                    for (k, (&row, gv)) in argmax.iter().zip(&g).enumerate() {
                        dx[row * d + k % d] += gv;
                    }
                    add_into(&mut grads[x.0], dx);
                }
                Op::Gather {
                    x,
                    index,
                    weights,
                    taps,
                } => {
                    let xv = self.value(*x);
                    let d = xv.cols();
                    let mut dx = vec![0.0; xv.len()];
                    for (o, grow) in g.chunks(d.max(1)).enumerate().take(index.len() / taps) {
                        for t in 0..*taps {
                            let src = index[o * taps + t];
                            let w = weights.as_ref().map_or(1.0, |w| w[o * taps + t]);
                            for (a, v) in dx[src * d..(src + 1) * d].iter_mut().zip(grow) {
                                *a += w * v;
                            }
                        }
                    }
                    add_into(&mut grads[x.0], dx);
                }
                Op::Concat(parts) => {
                    let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
                    let total: usize = widths.iter().sum();
                    let r = g.len() / total.max(1);
                    let mut offset = 0;
                    for (&p, &w) in parts.iter().zip(&widths) {
                        let mut dp = Vec::with_capacity(r * w);
                        for row in g.chunks(total.max(1)).take(r) {
                            dp.extend_from_slice(&row[offset..offset + w]);
                        }
                        offset += w;
                        add_into(&mut grads[p.0], dp);
                    }
                }
                Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                    let b = targets.len();
                    let c = probs.len() / b;
                    let scale = g[0] / b as f64;
                    let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (row, &t) in targets.iter().enumerate() {
                        dl[row * c + t] -= scale;
                    }
                    add_into(&mut grads[logits.0], dl);
                }
                Op::Custom { inputs, op } => {
                    let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                    let dins = op.backward(&values, &node.value, &g);
                    if dins.len() != inputs.len() {
                        return Err(Error::InvalidArgument(format!(
                            "custom op `{}` returned {} gradients for {} inputs",
                            op.name(),
                            dins.len(),
                            inputs.len()
                        )));
                    }
                    for (&v, d) in inputs.iter().zip(dins) {
                        add_into(&mut grads[v.0], d);
                    }
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Adds the gradient of every parameter leaf into the store.
    pub fn accumulate_param_grads(&self, grads: &Gradients, store: &mut ParameterStore) -> Result<()> {
        for (name, var) in &self.params {
            if let Some(g) = grads.get(*var) {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    /// Central differences of `f` with respect to each element of `x`.
    fn numeric_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += h;
                let mut m = x.clone();
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
            .fold(0.0, f64::max)
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Weighted sum of the output so that every element carries a distinct
    /// upstream gradient.
    fn probe(tape: &mut Tape, y: Var) -> Var {
        let n = tape.value(y).len();
        let w: Vec<f64> = (0..n).map(|i| 0.3 + 0.17 * ((i * 7) % 11) as f64).collect();
        let flat = tape.value(y).data().to_vec();
        let s: f64 = flat.iter().zip(&w).map(|(a, b)| a * b).sum();
        struct Dot(Vec<f64>);
        impl CustomOp for Dot {
            fn name(&self) -> &str {
                "dot"
            }
            fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64]) -> Vec<Vec<f64>> {
                vec![self.0.iter().map(|w| w * g[0]).collect()]
            }
        }
        tape.custom(&[y], Tensor::new(vec![], vec![s]).unwrap(), Box::new(Dot(w)))
    }

    #[test]
    fn linear_examples() {
        let mut tape = Tape::new(Mode::Eval, Precision::F64, 0);
        let x = tape.input(t(&[vec![1.0, 2.0]]));
        let w = tape.input(t(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let b = tape.input(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0, 6.0]);
        let y0 = tape.linear(x, w, None).unwrap();
        assert_eq!(tape.value(y0).data(), &[1.0, 2.0]);
        let bad = tape.input(t(&[vec![1.0, 0.0, 0.0]]));
        assert!(tape.linear(x, bad, None).is_err());
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let x0 = Tensor::matrix(4, 3, pseudo(12, 1)).unwrap();
        let w0 = Tensor::matrix(3, 2, pseudo(6, 2)).unwrap();
        let b0 = Tensor::new(vec![2], pseudo(2, 3)).unwrap();
        let run = |x: &Tensor, w: &Tensor, b: &Tensor| {
            let mut tape = Tape::new(Mode::Eval, Precision::F64, 0);
            let (xv, wv, bv) = (tape.input(x.clone()), tape.input(w.clone()), tape.input(b.clone()));
            let y = tape.linear(xv, wv, Some(bv)).unwrap();
            let l = probe(&mut tape, y);
            let f = tape.value(l).data()[0];
            let g = tape.backward(l).unwrap();
            (f, [xv, wv, bv].map(|v| g.get(v).unwrap().to_vec()))
        };
        let (_, analytic) = run(&x0, &w0, &b0);
        let nx = numeric_grad(&x0, &|x| run(x, &w0, &b0).0);
        let nw = numeric_grad(&w0, &|w| run(&x0, w, &b0).0);
        let nb = numeric_grad(&b0, &|b| run(&x0, &w0, b).0);
        assert!(rel_err(&analytic[0], &nx) < 1e-6);
        assert!(rel_err(&analytic[1], &nw) < 1e-6);
        assert!(rel_err(&analytic[2], &nb) < 1e-6);
    }

    #[test]
    fn relu_values_and_gradients() {
        let mut tape = Tape::new(Mode::Eval, Precision::F64, 0);
        let x = tape.input(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let l = probe(&mut tape, y);
        let g = tape.backward(l).unwrap();
        let gx = g.get(x).unwrap();
        assert_eq!(gx[0], 0.0);
        assert_eq!(gx[1], 0.0, "subgradient at zero");

        let mut vals = pseudo(20, 5);
        vals.iter_mut().for_each(|v| {
            if v.abs() < 1e-3 {
                *v += 0.1
            }
        });
        let x0 = Tensor::matrix(4, 5, vals).unwrap();
        let run = |x: &Tensor| {
            let mut tape = Tape::new(Mode::Eval, Precision::F64, 0);
            let xv = tape.input(x.clone());
            let y = tape.relu(xv);
            let l = probe(&mut tape, y);
            (tape.value(l).data()[0], tape.backward(l).unwrap().get(xv).unwrap().to_vec())
        };
        let numeric = numeric_grad(&x0, &|x| run(x).0);
        assert!(rel_err(&run(&x0).1, &numeric) < 1e-6);

        let pos = Tensor::new(vec![3], vec![0.5, 1.0, 3.0]).unwrap();
        let mut tape = Tape::new(Mode::Eval, Precision::F64, 0);
        let xv = tape.input(pos.clone());
        let y = tape.relu(xv);
        assert_eq!(tape.value(y), &pos);
    }

    #[test]
    fn batch_norm_normalizes() {
        let x0 = Tensor::matrix(8, 5, pseudo(40, 9).iter().map(|v| 10.0 * v + 2.0).collect()).unwrap();
        let mut tape = Tape::new(Mode::Train, Precision::F64, 0);
        let x = tape.input(x0);
        let gamma = tape.input(Tensor::filled(vec![5], 1.0));
        let beta = tape.input(Tensor::zeros(vec![5]));
        let y = tape.batch_norm(x, gamma, beta, &[0.0; 5], &[1.0; 5], "bn").unwrap();
        let yv = tape.value(y);
        for c in 0..5 {
            let col: Vec<f64> = (0..8).map(|r| yv.get(r, c)).collect();
            let mean = col.iter().sum::<f64>() / 8.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-6, "var {var}");
        }
        assert_eq!(tape.running_updates().len(), 1);
    }

    #[test]
    fn batch_norm_constant_column_yields_beta() {
        let mut tape = Tape::new(Mode::Train, Precision::F64, 0);
        let x = tape.input(t(&[vec![0.1, 1.0], vec![0.1, 2.0], vec![0.1, 3.0]]));
        let gamma = tape.input(Tensor::new(vec![2], vec![2.0, 1.0]).unwrap());
        let beta = tape.input(Tensor::new(vec![2], vec![0.7, 0.0]).unwrap());
        let y = tape.batch_norm(x, gamma, beta, &[0.0; 2], &[1.0; 2], "bn").unwrap();
        for r in 0..3 {
            assert!((tape.value(y).get(r, 0) - 0.7).abs() < 1e-9);
        }
    }

    #[test]
    fn batch_norm_needs_two_rows_in_training() {
        let mut tape = Tape::new(Mode::Train, Precision::F64, 0);
        let x = tape.input(t(&[vec![1.0]]));
        let g = tape.input(Tensor::filled(vec![1], 1.0));
        let b = tape.input(Tensor::zeros(vec![1]));
        assert!(tape.batch_norm(x, g, b, &[0.0], &[1.0], "bn").is_err());
        let mut eval = Tape::new(Mode::Eval, Precision::F64, 0);
        let x = eval.input(t(&[vec![1.0]]));
        let g = eval.input(Tensor::filled(vec![1], 1.0));
        let b = eval.input(Tensor::zeros(vec![1]));
        assert!(eval.batch_norm(x, g, b, &[0.0], &[1.0], "bn").is_ok());
    }

    #[test]
    fn batch_norm_gradients_match_finite_differences() {
        let x0 = Tensor::matrix(8, 5, pseudo(40, 11)).unwrap();
        let g0 = Tensor::new(vec![5], pseudo(5, 12).iter().map(|v| v + 1.5).collect()).unwrap();
        let b0 = Tensor::new(vec![5], pseudo(5, 13)).unwrap();
        for mode in [Mode::Train, Mode::Eval] {
            let run = |x: &Tensor, gm: &Tensor, bt: &Tensor| {
                let mut tape = Tape::new(mode, Precision::F64, 0);
                let (xv, gv, bv) = (tape.input(x.clone()), tape.input(gm.clone()), tape.input(bt.clone()));
                let y = tape
                    .batch_norm(xv, gv, bv, &[0.1, -0.2, 0.0, 0.3, 0.5], &[1.0, 0.5, 2.0, 1.5, 0.8], "bn")
                    .unwrap();
                let l = probe(&mut tape, y);
                let g = tape.backward(l).unwrap();
                (tape.value(l).data()[0], [xv, gv, bv].map(|v| g.get(v).unwrap().to_vec()))
            };
            let (_, a) = run(&x0, &g0, &b0);
            assert!(rel_err(&a[0], &numeric_grad(&x0, &|x| run(x, &g0, &b0).0)) < 1e-5);
            assert!(rel_err(&a[1], &numeric_grad(&g0, &|g| run(&x0, g, &b0).0)) < 1e-5);
            assert!(rel_err(&a[2], &numeric_grad(&b0, &|b| run(&x0, &g0, b).0)) < 1e-5);
        }
    }

    #[test]
    fn dropout_behaviour() {
        let mut tape = Tape::new(Mode::Train, Precision::F64, 4);
        let x = tape.input(Tensor::filled(vec![1_000_000], 1.0));
        assert_eq!(tape.dropout(x, 0.0).unwrap(), x);
        assert!(tape.dropout(x, 1.0).is_err());
        assert!(tape.dropout(x, -0.1).is_err());
        let y = tape.dropout(x, 0.5).unwrap();
        let mean = tape.value(y).data().iter().sum::<f64>() / 1e6;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
        let l = probe(&mut tape, y);
        let g = tape.backward(l).unwrap();
        // the gradient is zero exactly where the forward dropped the element
        for (gx, yv) in g.get(x).unwrap().iter().zip(tape.value(y).data()).take(1000) {
            assert_eq!(*gx == 0.0, *yv == 0.0);
        }

        let mut eval = Tape::new(Mode::Eval, Precision::F64, 4);
        let x = eval.input(Tensor::filled(vec![10], 1.0));
        assert_eq!(eval.dropout(x, 0.9).unwrap(), x);
    }

    #[test]
    fn segment_max_values_ties_and_gradients() {
        let mut tape = Tape::new(Mode::Eval, Precision::F64, 0);
        let x = tape.input(t(&[vec![1.0, 5.0], vec![3.0, 2.0]]));
        let y = tape.segment_max(x, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 5.0]);
        let single = tape.segment_max(x, 1).unwrap();
        assert_eq!(tape.value(single).data(), tape.value(x).data());
        assert!(tape.segment_max(x, 0).is_err());
        assert!(tape.segment_max(x, 3).is_err());

        let tie = tape.input(t(&[vec![2.0], vec![2.0]]));
        let y = tape.segment_max(tie, 2).unwrap();
        let l = probe(&mut tape, y);
        let g = tape.backward(l).unwrap();
        let gt = g.get(tie).unwrap();
        assert!(gt[0] != 0.0 && gt[1] == 0.0, "ties route to the lowest index");

        let x0 = Tensor::matrix(6, 4, pseudo(24, 21)).unwrap();
        let run = |x: &Tensor| {
            let mut tape = Tape::new(Mode::Eval, Precision::F64, 0);
            let xv = tape.input(x.clone());
            let y = tape.segment_max(xv, 3).unwrap();
            let l = probe(&mut tape, y);
            (tape.value(l).data()[0], tape.backward(l).unwrap().get(xv).unwrap().to_vec())
        };
        assert!(rel_err(&run(&x0).1, &numeric_grad(&x0, &|x| run(x).0)) < 1e-6);
    }

    #[test]
    fn cross_entropy_values() {
        let mut tape = Tape::new(Mode::Eval, Precision::F64, 0);
        let logits = tape.input(t(&[vec![0.3; 5], vec![0.3; 5]]));
        let l = tape.softmax_cross_entropy(logits, &[1, 4]).unwrap();
        assert!((tape.value(l).data()[0] - 5f64.ln()).abs() < 1e-15);

        let logits = tape.input(t(&[vec![10.0, -10.0]]));
        let l = tape.softmax_cross_entropy(logits, &[0]).unwrap();
        let expected = (-20f64).exp().ln_1p();
        assert!((tape.value(l).data()[0] - expected).abs() <= 1e-24);
        assert!((tape.value(l).data()[0] - 2.061e-9).abs() < 1e-12);
        assert!(tape.softmax_cross_entropy(logits, &[2]).is_err());
    }

    #[test]
    fn cross_entropy_gradients_match_finite_differences() {
        let x0 = Tensor::matrix(3, 4, pseudo(12, 31).iter().map(|v| 3.0 * v).collect()).unwrap();
        let targets = [2, 0, 3];
        let run = |x: &Tensor| {
            let mut tape = Tape::new(Mode::Eval, Precision::F64, 0);
            let xv = tape.input(x.clone());
            let l = tape.softmax_cross_entropy(xv, &targets).unwrap();
            (tape.value(l).data()[0], tape.backward(l).unwrap().get(xv).unwrap().to_vec())
        };
        assert!(rel_err(&run(&x0).1, &numeric_grad(&x0, &|x| run(x).0)) < 1e-6);
    }

    #[test]
    fn gather_and_concat_gradients() {
        let x0 = Tensor::matrix(3, 2, pseudo(6, 41)).unwrap();
        let y0 = Tensor::matrix(4, 1, pseudo(4, 42)).unwrap();
        let run = |x: &Tensor, y: &Tensor| {
            let mut tape = Tape::new(Mode::Eval, Precision::F64, 0);
            let (xv, yv) = (tape.input(x.clone()), tape.input(y.clone()));
            let g1 = tape.gather_rows(xv, vec![2, 0, 2, 1]).unwrap();
            let g2 = tape
                .weighted_gather(xv, vec![0, 1, 1, 2, 2, 0, 0, 0], vec![0.2, 0.8, 0.5, 0.5, 1.0, 0.0, 0.3, 0.7], 2)
                .unwrap();
            let c = tape.concat_cols(&[g1, yv, g2]).unwrap();
            assert_eq!(tape.value(c).shape(), &[4, 5]);
            let l = probe(&mut tape, c);
            let g = tape.backward(l).unwrap();
            (tape.value(l).data()[0], [xv, yv].map(|v| g.get(v).unwrap().to_vec()))
        };
        let (_, a) = run(&x0, &y0);
        assert!(rel_err(&a[0], &numeric_grad(&x0, &|x| run(x, &y0).0)) < 1e-6);
        assert!(rel_err(&a[1], &numeric_grad(&y0, &|y| run(&x0, y).0)) < 1e-6);
    }

    #[test]
    fn f32_precision_rounds_values() {
        let mut tape = Tape::new(Mode::Eval, Precision::F32, 0);
        let x = tape.input(Tensor::new(vec![1], vec![0.1]).unwrap());
        assert_eq!(tape.value(x).data()[0], 0.1f32 as f64);
    }

    #[test]
    fn param_leaves_are_shared_and_accumulate() {
        let mut store = ParameterStore::new();
        store.insert("w", t(&[vec![2.0]])).unwrap();
        let mut tape = Tape::new(Mode::Eval, Precision::F64, 0);
        let w1 = tape.param(&store, "w").unwrap();
        let w2 = tape.param(&store, "w").unwrap();
        assert_eq!(w1, w2);
        let x = tape.input(t(&[vec![3.0], vec![4.0]]));
        let y = tape.linear(x, w1, None).unwrap();
        let l = probe(&mut tape, y);
        let g = tape.backward(l).unwrap();
        tape.accumulate_param_grads(&g, &mut store).unwrap();
        assert_eq!(store.grad("w").unwrap(), g.get(w1).unwrap());
        assert!(tape.param(&store, "missing").is_err());
    }
}
