use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;

use agcn::agcn::{Agcn, ModelConfig, Task};
use agcn::dataio::{load_point_cloud, DatasetManifest, PointFormat, Split, SynthPlan};
use agcn::diffcore::{load_checkpoint, Mode, Precision, Tape, Tensor};
use agcn::experiments::{
    ablate_global_graph, ablation_csv, bench_attention, bench_csv, bench_slope, gradcheck_suite, AttentionVariant,
    BenchSettings, GRADCHECK_TOLERANCE,
};
use agcn::training::{evaluate, fit, per_class_csv, FitOptions, Metrics, Sample, TrainConfig};

use crate::RunFlags;

/// Failure of a command. Configuration problems exit with 2, failed
/// checks and runtime errors with 1.
#[derive(Debug)]
pub enum CliError {
    Config(agcn::Error),
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Failed(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "{e}"),
            CliError::Failed(m) => f.write_str(m),
        }
    }
}

impl From<agcn::Error> for CliError {
    fn from(e: agcn::Error) -> Self {
        CliError::Failed(e.to_string())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn config<T>(r: agcn::Result<T>) -> CliResult<T> {
    r.map_err(CliError::Config)
}

fn write(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| CliError::Failed(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| CliError::Failed(format!("cannot create {}: {e}", dir.display())))
}

fn precision_of(flag: Option<&str>) -> CliResult<Option<Precision>> {
    flag.map(|p| config(Precision::from_bits(p.parse().unwrap_or(0))))
        .transpose()
}

fn train_config(path: Option<&Path>, run: &RunFlags) -> CliResult<TrainConfig> {
    let mut c = match path {
        Some(p) => config(TrainConfig::load(p))?,
        None => TrainConfig::default(),
    };
    if let Some(s) = run.seed {
        c.seed = s;
    }
    if let Some(p) = precision_of(run.precision.as_deref())? {
        c.precision = p;
    }
    Ok(c)
}

struct Dataset {
    manifest: DatasetManifest,
    base: std::path::PathBuf,
}

impl Dataset {
    fn load(path: &Path, model: &ModelConfig) -> CliResult<Self> {
        let manifest = config(DatasetManifest::load(path))?;
        let expected = match model.mode {
            Task::Classify => manifest.num_categories(),
            Task::Segment => {
                if manifest.part_sets.is_none() {
                    return Err(CliError::Config(agcn::Error::InvalidArgument(
                        "segmentation needs a manifest with part sets".into(),
                    )));
                }
                manifest.num_parts()
            }
        };
        if expected != model.num_classes {
            return Err(CliError::Config(agcn::Error::InvalidArgument(format!(
                "model predicts {} classes but the manifest defines {expected}",
                model.num_classes
            ))));
        }
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Ok(Self { manifest, base })
    }

    fn split(&self, split: Split) -> CliResult<Vec<Sample>> {
        config(self.manifest.load_split(&self.base, split))
    }
}

fn print_metrics(label: &str, m: &Metrics) {
    println!("{label} overall accuracy: {:.4}", m.overall_accuracy);
    println!("{label} average class accuracy: {:.4}", m.avg_class_accuracy);
    if let Some(v) = m.instance_miou {
        println!("{label} instance mIoU: {v:.4}");
    }
    if let Some(v) = m.category_miou {
        println!("{label} category mIoU: {v:.4}");
    }
}

pub fn train(model_path: &Path, train_path: Option<&Path>, manifest: &Path, out: &Path, run: &RunFlags) -> CliResult {
    let model = config(ModelConfig::load(model_path))?;
    let tc = train_config(train_path, run)?;
    let data = Dataset::load(manifest, &model)?;
    let train = data.split(Split::Train)?;
    let val = data.split(Split::Val)?;
    create_dir(out)?;
    write(&out.join("model.cfg"), &model.to_text())?;
    write(&out.join("train.cfg"), &tc.to_text())?;
    let opts = FitOptions {
        out_dir: Some(out.to_path_buf()),
        part_sets: data.manifest.part_sets.clone(),
        initial: None,
    };
    let r = fit(&model, &train, &val, &tc, &opts)?;
    println!("trained {} epochs; best epoch {}", r.history.len(), r.best_epoch);
    print_metrics("best validation", r.best_metrics());
    Ok(())
}

pub fn eval(
    model_path: &Path,
    checkpoint: &Path,
    manifest: &Path,
    split: &str,
    out: Option<&Path>,
    run: &RunFlags,
) -> CliResult {
    let model = config(ModelConfig::load(model_path))?;
    let store = config(load_checkpoint(checkpoint))?;
    let Some(split) = Split::parse(split) else {
        return Err(CliError::Config(agcn::Error::InvalidArgument(format!("unknown split `{split}`"))));
    };
    let precision = precision_of(run.precision.as_deref())?.unwrap_or(Precision::F32);
    let data = Dataset::load(manifest, &model)?;
    let samples = data.split(split)?;
    if samples.is_empty() {
        return Err(CliError::Failed(format!("the {} split is empty", split.as_str())));
    }
    let net = Agcn::new(model)?;
    let m = evaluate(&net, &store, &samples, data.manifest.part_sets.as_deref(), 32, precision)?;
    print_metrics(split.as_str(), &m);
    if let Some(dir) = out {
        create_dir(dir)?;
        let mut s = String::from("metric,value\n");
        let _ = writeln!(s, "overall_accuracy,{}", m.overall_accuracy);
        let _ = writeln!(s, "avg_class_accuracy,{}", m.avg_class_accuracy);
        if let Some(v) = m.instance_miou {
            let _ = writeln!(s, "instance_miou,{v}");
        }
        if let Some(v) = m.category_miou {
            let _ = writeln!(s, "category_miou,{v}");
        }
        write(&dir.join("eval_metrics.csv"), &s)?;
        write(&dir.join("per_class.csv"), &per_class_csv(&m))?;
    }
    Ok(())
}

pub fn gradcheck(seed: u64, out: Option<&Path>, sabotage: bool) -> CliResult {
    let suite = gradcheck_suite(sabotage, seed)?;
    let mut csv = String::from("task,parameter,checked,max_rel_error\n");
    for (task, report) in &suite {
        for p in &report.params {
            let _ = writeln!(csv, "{},{},{},{:.3e}", task.as_str(), p.name, p.checked, p.max_rel_error);
        }
    }
    print!("{csv}");
    if let Some(dir) = out {
        create_dir(dir)?;
        write(&dir.join("gradcheck.csv"), &csv)?;
    }
    let failed: Vec<String> = suite
        .iter()
        .flat_map(|(t, r)| r.failures(GRADCHECK_TOLERANCE).map(move |p| format!("{}:{}", t.as_str(), p.name)))
        .collect();
    if failed.is_empty() {
        println!("all parameters within {GRADCHECK_TOLERANCE:e}");
        Ok(())
    } else {
        Err(CliError::Failed(format!(
            "{} parameters exceed {GRADCHECK_TOLERANCE:e}: {}",
            failed.len(),
            failed.join(", ")
        )))
    }
}

pub fn bench(out: Option<&Path>, settings: BenchSettings) -> CliResult {
    let rows = bench_attention(&settings).map_err(CliError::Config)?;
    let csv = bench_csv(&rows);
    match out {
        Some(dir) => {
            create_dir(dir)?;
            write(&dir.join("bench.csv"), &csv)?;
        }
        None => print!("{csv}"),
    }
    if settings.sizes.len() >= 2 {
        for v in [AttentionVariant::Knn, AttentionVariant::Dense] {
            let f = bench_slope(&rows, v, false)?;
            let b = bench_slope(&rows, v, true)?;
            log::info!("{} log-log slope: forward {f:.3}, forward+backward {b:.3}", v.as_str());
        }
    }
    Ok(())
}

pub fn synth(spec: &Path, out: &Path, seed: Option<u64>) -> CliResult {
    let text = fs::read_to_string(spec)
        .map_err(|e| CliError::Config(agcn::Error::InvalidArgument(format!("cannot read {}: {e}", spec.display()))))?;
    let mut plan = config(SynthPlan::parse(&text))?;
    if let Some(s) = seed {
        plan.seed = s;
    }
    let manifest = plan.materialize(out)?;
    println!("wrote {} clouds and {}", manifest.entries.len(), out.join("manifest.txt").display());
    Ok(())
}

fn feature_csv(t: &Tensor) -> String {
    let mut s = String::from("node");
    for c in 0..t.cols() {
        let _ = write!(s, ",f{c}");
    }
    s.push('\n');
    for r in 0..t.rows() {
        let _ = write!(s, "{r}");
        for v in t.row(r) {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

fn attention_csv(alpha: &[f64], k: usize, neighbors: impl Fn(usize) -> Vec<usize>) -> String {
    let mut s = String::from("node,rank,neighbor,score\n");
    for (j, row) in alpha.chunks(k).enumerate() {
        for (rank, (a, n)) in row.iter().zip(neighbors(j)).enumerate() {
            let _ = writeln!(s, "{j},{rank},{n},{a}");
        }
    }
    s
}

pub fn inspect(model_path: &Path, checkpoint: &Path, cloud: &Path, out: &Path) -> CliResult {
    let model = config(ModelConfig::load(model_path))?;
    let store = config(load_checkpoint(checkpoint))?;
    let cloud = config(load_point_cloud(cloud, PointFormat::from_path(cloud)))?;
    let net = Agcn::new(model.clone())?;
    let g = net.prepare(&cloud)?;
    create_dir(out)?;

    let mut nodes = String::from("node,point_index,x,y,z\n");
    for (j, (i, p)) in g.nodes.indices.iter().zip(&g.nodes.coords).enumerate() {
        let _ = writeln!(nodes, "{j},{i},{},{},{}", p[0], p[1], p[2]);
    }
    write(&out.join("nodes.csv"), &nodes)?;
    let mut adj = String::from("node,rank,neighbor\n");
    for j in 0..g.graph.num_nodes() {
        for (rank, n) in g.graph.neighbors(j).iter().enumerate() {
            let _ = writeln!(adj, "{j},{rank},{n}");
        }
    }
    write(&out.join("adjacency.csv"), &adj)?;

    let mut tape = Tape::new(Mode::Eval, Precision::F64, 0);
    let enc = net.encode(&mut tape, &store, &[&g])?;
    let k = model.k_neighbors;
    let neighbors = |j: usize| g.graph.neighbors(j).to_vec();
    for (t, alpha) in enc.attention.iter().enumerate() {
        write(&out.join(format!("attention_enc{t}.csv")), &attention_csv(alpha, k, neighbors))?;
    }
    for (t, v) in enc.layers.iter().enumerate() {
        let name = if t == 0 { "activations_local.csv".to_string() } else { format!("activations_enc{}.csv", t - 1) };
        write(&out.join(name), &feature_csv(tape.value(*v)))?;
    }
    if let Some(gf) = enc.graph_features {
        write(&out.join("activations_graph.csv"), &feature_csv(tape.value(gf)))?;
    }
    let mut files = 3 + 2 * enc.attention.len();
    if model.mode == Task::Segment {
        let dec = net.decode(&mut tape, &store, &enc)?;
        for (t, alpha) in dec.attention.iter().enumerate() {
            write(&out.join(format!("attention_dec{t}.csv")), &attention_csv(alpha, k, neighbors))?;
        }
        write(&out.join("activations_decoder.csv"), &feature_csv(tape.value(dec.features)))?;
        files += dec.attention.len() + 1;
    }
    println!("{} nodes; wrote {files} CSV files to {}", g.nodes.len(), out.display());
    Ok(())
}

pub fn ablate(
    model_path: &Path,
    train_path: Option<&Path>,
    manifest: &Path,
    out: Option<&Path>,
    seeds: &[u64],
    precision: Option<String>,
) -> CliResult {
    let model = config(ModelConfig::load(model_path))?;
    if model.mode != Task::Classify {
        return Err(CliError::Config(agcn::Error::InvalidArgument(
            "the ablation runs on classification models".into(),
        )));
    }
    let run = RunFlags { seed: None, precision };
    let tc = train_config(train_path, &run)?;
    let data = Dataset::load(manifest, &model)?;
    let train = data.split(Split::Train)?;
    let val = data.split(Split::Val)?;
    let rows = ablate_global_graph(&model, &train, &val, &tc, seeds)?;
    let csv = ablation_csv(&rows);
    print!("{csv}");
    let n = rows.len().max(1) as f64;
    let with = rows.iter().map(|r| r.with_graph).sum::<f64>() / n;
    let without = rows.iter().map(|r| r.without_graph).sum::<f64>() / n;
    println!("mean accuracy with global point graph: {with:.4}");
    println!("mean accuracy without global point graph: {without:.4}");
    println!("difference: {:+.4}", with - without);
    if let Some(dir) = out {
        create_dir(dir)?;
        write(&dir.join("ablation.csv"), &csv)?;
    }
    Ok(())
}
