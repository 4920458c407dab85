//! Verification and measurement routines behind the command-line tools.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agcn::{dense_attention, neighbor_attention, Agcn, AttentionKind, FpsSeed, ModelConfig, NeighborTable, Task};
use crate::dataio::{ShapeFamily, SynthDataset, SyntheticSpec};
use crate::diffcore::{
    gradient_check, GradCheckOptions, GradCheckReport, Mode, ParameterStore, Precision, Tape, Tensor,
};
use crate::error::{invalid, Result};
use crate::geometry::{farthest_point_sample, knn_graph, PointCloud};
use crate::seeds::derive_seed;
use crate::training::{evaluate, fit, FitOptions, Sample, TrainConfig};

/// Tolerance on the maximum relative gradient error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Small configuration used for gradient checks.
pub fn tiny_config(mode: Task) -> ModelConfig {
    let base = match mode {
        Task::Classify => ModelConfig::classification(),
        Task::Segment => ModelConfig::segmentation(),
    };
    ModelConfig {
        m_nodes: 8,
        l_group: 4,
        k_neighbors: 3,
        input_channels: 3,
        local_mlp_widths: vec![4, 4, 6],
        attention_layers: 2,
        attention_transform_widths: vec![[6, 6], [6, 8]],
        decoder_transform_widths: vec![[8, 6], [6, 6]],
        global_graph_mlp_widths: [4, 5],
        head_widths: vec![8, 6, 3],
        seg_head_widths: vec![6],
        num_classes: 3,
        dropout: 0.0,
        fps_seed: FpsSeed::Index(0),
        init_bound: 0.5,
        ..base
    }
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize, channels: usize, labels: Option<u32>) -> Result<PointCloud> {
    let coords = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    let ch = (0..n * channels).map(|_| rng.random_range(-1.0..1.0)).collect();
    let labels = labels.map(|c| (0..n).map(|_| rng.random_range(0..c)).collect());
    PointCloud::new(coords, ch, channels, labels)
}

/// Gradient check of the full network on two random clouds.
pub fn gradcheck_model(config: &ModelConfig, sabotage: bool, seed: u64) -> Result<GradCheckReport> {
    gradcheck_model_with(config, sabotage, seed, &GradCheckOptions::default())
}

pub fn gradcheck_model_with(
    config: &ModelConfig,
    sabotage: bool,
    seed: u64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut model = Agcn::new(config.clone())?;
    if sabotage {
        model = model.with_sabotaged_attention();
    }
    let mut store = model.init_params(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = config.num_classes as u32;
    let clouds = [
        random_cloud(&mut rng, 24, config.input_channels, Some(classes))?,
        random_cloud(&mut rng, 24, config.input_channels, Some(classes))?,
    ];
    let geoms = model.prepare_all(&clouds)?;
    let batch: Vec<_> = geoms.iter().collect();
    match config.mode {
        Task::Classify => {
            let targets = [0, 2 % config.num_classes];
            gradient_check(
                &mut store,
                |tape, s| {
                    let y = model.classify_logits(tape, s, &batch)?;
                    tape.softmax_cross_entropy(y, &targets)
                },
                opts,
            )
        }
        Task::Segment => {
            let targets: Vec<usize> = clouds
                .iter()
                .flat_map(|c| c.labels().unwrap_or(&[]).iter().map(|&l| l as usize))
                .collect();
            gradient_check(
                &mut store,
                |tape, s| {
                    let y = model.segment_logits(tape, s, &batch)?;
                    tape.softmax_cross_entropy(y, &targets)
                },
                opts,
            )
        }
    }
}

/// Gradient checks of the tiny classification and segmentation networks.
pub fn gradcheck_suite(sabotage: bool, seed: u64) -> Result<Vec<(Task, GradCheckReport)>> {
    [Task::Classify, Task::Segment]
        .into_iter()
        .map(|t| Ok((t, gradcheck_model(&tiny_config(t), sabotage, seed)?)))
        .collect()
}

/// Uniform weight bound of the reduced-width networks below.
pub const DESK_INIT_BOUND: f64 = 0.1;

/// Classification network used for the synthetic-shape runs.
pub fn desk_classification_model() -> ModelConfig {
    ModelConfig {
        m_nodes: 128,
        l_group: 16,
        k_neighbors: 3,
        attention_layers: 3,
        local_mlp_widths: vec![16, 16, 32],
        attention_transform_widths: vec![[32, 32], [32, 64], [64, 64]],
        global_graph_mlp_widths: [16, 32],
        head_widths: vec![64, 32, 4],
        num_classes: 4,
        dropout: 0.3,
        init_bound: DESK_INIT_BOUND,
        ..ModelConfig::classification()
    }
}

pub fn desk_classification_training() -> TrainConfig {
    TrainConfig {
        epochs: 50,
        batch_size: 16,
        ..TrainConfig::default()
    }
}

/// Four shape families, `points` points with normals per cloud.
pub fn desk_classification_specs(points: usize) -> Vec<SyntheticSpec> {
    ShapeFamily::CLASSIFICATION[..4]
        .iter()
        .map(|&family| SyntheticSpec {
            family,
            points,
            noise_sigma: 0.01,
        })
        .collect()
}

/// Segmentation network used for the synthetic part datasets.
pub fn desk_segmentation_model() -> ModelConfig {
    ModelConfig {
        m_nodes: 384,
        l_group: 16,
        k_neighbors: 8,
        attention_layers: 2,
        local_mlp_widths: vec![16, 16, 32],
        attention_transform_widths: vec![[32, 32], [32, 64]],
        decoder_transform_widths: vec![[64, 32], [32, 32]],
        global_graph_mlp_widths: [16, 32],
        seg_head_widths: vec![32],
        num_classes: 7,
        init_bound: DESK_INIT_BOUND,
        ..ModelConfig::segmentation()
    }
}

pub fn desk_segmentation_training() -> TrainConfig {
    TrainConfig {
        epochs: 80,
        batch_size: 4,
        lr0: 2e-3,
        ..TrainConfig::default()
    }
}

pub fn desk_segmentation_specs(points: usize) -> Vec<SyntheticSpec> {
    ShapeFamily::SEGMENTATION
        .iter()
        .map(|&family| SyntheticSpec {
            family,
            points,
            noise_sigma: 0.01,
        })
        .collect()
}

/// Converts generated samples to training samples.
pub fn samples_of(dataset: SynthDataset) -> Vec<Sample> {
    dataset.samples.into_iter().map(|s| (s.cloud, s.category)).collect()
}

/// Mean and sample standard deviation of a timing series, in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timing {
    pub mean_ms: f64,
    pub std_ms: f64,
}

impl Timing {
    fn of(samples: &[f64]) -> Self {
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = if samples.len() > 1 {
            samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            mean_ms: mean,
            std_ms: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionVariant {
    /// Scores over the K graph neighbours only.
    Knn,
    /// Scores over every pair of nodes in a cloud.
    Dense,
}

impl AttentionVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            AttentionVariant::Knn => "knn",
            AttentionVariant::Dense => "dense",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSettings {
    pub sizes: Vec<usize>,
    pub k: usize,
    pub width: usize,
    /// Clouds per timed batch.
    pub batch: usize,
    pub warmups: usize,
    pub reps: usize,
    pub seed: u64,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            sizes: vec![64, 128, 256, 512, 1024],
            k: 16,
            width: 64,
            batch: 4,
            warmups: 3,
            reps: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub variant: AttentionVariant,
    pub m: usize,
    pub k: usize,
    pub forward: Timing,
    pub forward_backward: Timing,
}

fn time_ms(mut f: impl FnMut() -> Result<()>, warmups: usize, reps: usize) -> Result<Timing> {
    for _ in 0..warmups {
        f()?;
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        f()?;
        samples.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(Timing::of(&samples))
}

/// Times one attention aggregation per batch, forward only and forward
/// plus backward, for KNN-restricted and dense all-pairs scores at equal
/// feature width.
pub fn bench_attention(settings: &BenchSettings) -> Result<Vec<BenchRow>> {
    let s = settings;
    if s.reps == 0 || s.batch == 0 || s.width == 0 {
        invalid!("repetitions, batch and width must be positive");
    }
    let mut rows = Vec::new();
    for &m in &s.sizes {
        if m <= s.k {
            invalid!("M = {m} must exceed K = {}", s.k);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(s.seed, &[m as u64]));
        let mut graphs = Vec::with_capacity(s.batch);
        for _ in 0..s.batch {
            let cloud = random_cloud(&mut rng, m, 0, None)?;
            let nodes = farthest_point_sample(&cloud, m, 0)?;
            graphs.push(knn_graph(&nodes, s.k)?);
        }
        let table = NeighborTable::from_graphs(&graphs.iter().collect::<Vec<_>>())?;
        let features: Vec<f64> = (0..s.batch * m * s.width).map(|_| rng.random_range(0.0..1.0)).collect();
        let features = Tensor::matrix(s.batch * m, s.width, features)?;
        for variant in [AttentionVariant::Knn, AttentionVariant::Dense] {
            let run = |backward: bool| -> Result<()> {
                let mut tape = Tape::new(Mode::Train, Precision::F64, 0);
                let x = tape.input(features.clone());
                let y = match variant {
                    AttentionVariant::Knn => neighbor_attention(&mut tape, x, &table, AttentionKind::Ratio, false)?.0,
                    AttentionVariant::Dense => dense_attention(&mut tape, x, m)?,
                };
                if backward {
                    let pooled = tape.segment_max(y, s.batch * m)?;
                    let loss = tape.softmax_cross_entropy(pooled, &[0])?;
                    tape.backward(loss)?;
                }
                Ok(())
            };
            rows.push(BenchRow {
                variant,
                m,
                k: s.k,
                forward: time_ms(|| run(false), s.warmups, s.reps)?,
                forward_backward: time_ms(|| run(true), s.warmups, s.reps)?,
            });
        }
    }
    Ok(rows)
}

pub const BENCH_HEADER: &str = "variant,M,K,forward_mean_ms,forward_std_ms,forward_backward_mean_ms,forward_backward_std_ms";

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = format!("{BENCH_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:.6},{:.6},{:.6},{:.6}",
            r.variant.as_str(),
            r.m,
            r.k,
            r.forward.mean_ms,
            r.forward.std_ms,
            r.forward_backward.mean_ms,
            r.forward_backward.std_ms
        );
    }
    s
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 || points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0)) {
        invalid!("slope fit needs at least two points with positive coordinates");
    }
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        invalid!("slope fit needs at least two distinct sizes");
    }
    Ok(sxy / sxx)
}

/// Runtime slope in M of one variant, from forward or forward+backward
/// timings.
pub fn bench_slope(rows: &[BenchRow], variant: AttentionVariant, backward: bool) -> Result<f64> {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.variant == variant)
        .map(|r| {
            let t = if backward { r.forward_backward } else { r.forward };
            (r.m as f64, t.mean_ms)
        })
        .collect();
    loglog_slope(&pts)
}

/// Best validation accuracies of paired runs with and without the global
/// point graph.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationRow {
    pub seed: u64,
    pub with_graph: f64,
    pub without_graph: f64,
}

impl AblationRow {
    pub fn difference(&self) -> f64 {
        self.with_graph - self.without_graph
    }
}

/// Trains each seed twice, identical except for the global point graph.
pub fn ablate_global_graph(
    model: &ModelConfig,
    train: &[Sample],
    val: &[Sample],
    config: &TrainConfig,
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    seeds
        .iter()
        .map(|&seed| {
            let cfg = TrainConfig { seed, ..config.clone() };
            let mut acc = [0.0; 2];
            for (slot, graph) in acc.iter_mut().zip([true, false]) {
                let m = ModelConfig {
                    global_graph: graph,
                    ..model.clone()
                };
                let r = fit(&m, train, val, &cfg, &FitOptions::default())?;
                *slot = r.best_metrics().overall_accuracy;
            }
            Ok(AblationRow {
                seed,
                with_graph: acc[0],
                without_graph: acc[1],
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("seed,with_graph,without_graph,difference\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.seed, r.with_graph, r.without_graph, r.difference());
    }
    s
}

/// Uniform random subset of `n` points, in original order.
pub fn resample(cloud: &PointCloud, n: usize, seed: u64) -> Result<PointCloud> {
    if n == 0 || n > cloud.len() {
        invalid!("cannot draw {n} points from a cloud of {}", cloud.len());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, cloud.len(), n).into_vec();
    idx.sort_unstable();
    cloud.select(&idx)
}

/// Accuracy of a trained classifier on clouds re-sampled to each point
/// count. Node count, group size and neighbour count are capped to fit the
/// smaller clouds; the learned weights do not depend on them.
pub fn robustness_sweep(
    model: &ModelConfig,
    store: &ParameterStore,
    samples: &[Sample],
    point_counts: &[usize],
    seed: u64,
    precision: Precision,
) -> Result<Vec<(usize, f64)>> {
    point_counts
        .iter()
        .map(|&n| {
            let m = model.m_nodes.min(n);
            let cfg = ModelConfig {
                m_nodes: m,
                l_group: model.l_group.min(n),
                k_neighbors: model.k_neighbors.min(m - 1),
                ..model.clone()
            };
            let net = Agcn::new(cfg)?;
            let resampled = samples
                .iter()
                .enumerate()
                .map(|(i, (c, cat))| Ok((resample(c, n, derive_seed(seed, &[n as u64, i as u64]))?, *cat)))
                .collect::<Result<Vec<Sample>>>()?;
            let metrics = evaluate(&net, store, &resampled, None, 32, precision)?;
            Ok((n, metrics.overall_accuracy))
        })
        .collect()
}
