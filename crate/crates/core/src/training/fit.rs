use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::augment::augment;
use super::config::TrainConfig;
use super::metrics::{argmax_restricted, evaluate_classification, evaluate_segmentation, Metrics, ShapeResult};
use crate::agcn::{Agcn, CloudGeometry, ModelConfig, Task};
use crate::diffcore::{save_checkpoint, Mode, ParameterStore, Precision, Tape};
use crate::error::{invalid, Error, Result};
use crate::geometry::PointCloud;
use crate::seeds::derive_seed;

/// A cloud with its category id. Segmentation clouds carry per-point part
/// labels.
pub type Sample = (PointCloud, usize);

const STREAM_SHUFFLE: u64 = 1;
const STREAM_AUGMENT: u64 = 2;
const STREAM_DROPOUT: u64 = 3;

/// Where and how [`fit`] reports.
#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    /// Directory for `metrics.csv`, `per_class.csv`, `best.ckpt` and
    /// `last.ckpt`; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    /// Category to part ids, required for segmentation.
    pub part_sets: Option<Vec<Vec<u32>>>,
    /// Initial parameters; freshly initialised from the training seed when
    /// `None`.
    pub initial: Option<ParameterStore>,
}

/// One epoch of training history.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val: Metrics,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// Parameters after the final epoch.
    pub last: ParameterStore,
    /// Parameters at the epoch with the highest validation overall
    /// accuracy; the earliest such epoch on ties.
    pub best: ParameterStore,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

impl FitResult {
    pub fn loss_curve(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.train_loss).collect()
    }

    pub fn best_metrics(&self) -> &Metrics {
        &self.history[self.best_epoch].val
    }
}

fn check_samples(model: &Agcn, samples: &[Sample], what: &str) -> Result<()> {
    if samples.is_empty() {
        invalid!("{what} set is empty");
    }
    let c = model.config();
    for (i, (cloud, cat)) in samples.iter().enumerate() {
        match c.mode {
            Task::Classify if *cat >= c.num_classes => {
                invalid!("{what} sample {i}: category {cat} out of range for {} classes", c.num_classes)
            }
            Task::Segment => match cloud.labels() {
                None => invalid!("{what} sample {i} has no part labels"),
                Some(l) if l.iter().any(|&p| p as usize >= c.num_classes) => {
                    invalid!("{what} sample {i}: part label out of range for {} parts", c.num_classes)
                }
                _ => {}
            },
            _ => {}
        }
    }
    Ok(())
}

fn targets(task: Task, batch: &[&Sample]) -> Vec<usize> {
    match task {
        Task::Classify => batch.iter().map(|s| s.1).collect(),
        Task::Segment => batch
            .iter()
            .flat_map(|s| s.0.labels().unwrap_or(&[]).iter().map(|&l| l as usize))
            .collect(),
    }
}

/// Per-sample predictions: one class per cloud, or one part per point
/// restricted to the cloud's category part set.
pub fn predict(
    model: &Agcn,
    store: &ParameterStore,
    geometry: &[CloudGeometry],
    categories: &[usize],
    part_sets: Option<&[Vec<u32>]>,
    batch_size: usize,
    precision: Precision,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        invalid!("batch size must be positive");
    }
    let task = model.config().mode;
    let batches: Vec<Result<Vec<Vec<usize>>>> = geometry
        .par_chunks(batch_size)
        .enumerate()
        .map(|(b, chunk)| {
            let refs: Vec<&CloudGeometry> = chunk.iter().collect();
            let mut tape = Tape::new(Mode::Eval, precision, 0);
            let logits = match task {
                Task::Classify => model.classify_logits(&mut tape, store, &refs)?,
                Task::Segment => model.segment_logits(&mut tape, store, &refs)?,
            };
            let v = tape.value(logits);
            let mut out = Vec::with_capacity(chunk.len());
            let mut row = 0;
            for (i, g) in chunk.iter().enumerate() {
                let rows = if task == Task::Classify { 1 } else { g.cloud.len() };
                let allowed: &[u32] = match (task, part_sets) {
                    (Task::Segment, Some(ps)) => ps.get(categories[b * batch_size + i]).map_or(&[], |p| p.as_slice()),
                    _ => &[],
                };
                out.push((row..row + rows).map(|r| argmax_restricted(v.row(r), allowed)).collect());
                row += rows;
            }
            Ok(out)
        })
        .collect();
    let mut all = Vec::with_capacity(geometry.len());
    for b in batches {
        all.extend(b?);
    }
    Ok(all)
}

/// Metrics of `store` on prepared geometry.
pub fn evaluate_prepared(
    model: &Agcn,
    store: &ParameterStore,
    geometry: &[CloudGeometry],
    categories: &[usize],
    part_sets: Option<&[Vec<u32>]>,
    batch_size: usize,
    precision: Precision,
) -> Result<Metrics> {
    if geometry.is_empty() {
        invalid!("evaluation set is empty");
    }
    let c = model.config();
    let preds = predict(model, store, geometry, categories, part_sets, batch_size, precision)?;
    match c.mode {
        Task::Classify => {
            let p: Vec<usize> = preds.iter().map(|p| p[0]).collect();
            evaluate_classification(&p, categories, c.num_classes)
        }
        Task::Segment => {
            let Some(ps) = part_sets else {
                invalid!("segmentation evaluation needs category part sets");
            };
            let shapes: Vec<ShapeResult> = geometry
                .iter()
                .zip(&preds)
                .zip(categories)
                .map(|((g, p), &category)| ShapeResult {
                    category,
                    predicted: p.iter().map(|&x| x as u32).collect(),
                    truth: g.cloud.labels().unwrap_or(&[]).to_vec(),
                })
                .collect();
            evaluate_segmentation(&shapes, ps, c.num_classes)
        }
    }
}

/// Metrics of `store` on raw samples.
pub fn evaluate(
    model: &Agcn,
    store: &ParameterStore,
    samples: &[Sample],
    part_sets: Option<&[Vec<u32>]>,
    batch_size: usize,
    precision: Precision,
) -> Result<Metrics> {
    check_samples(model, samples, "evaluation")?;
    let clouds: Vec<PointCloud> = samples.iter().map(|s| s.0.clone()).collect();
    let geometry = model.prepare_all(&clouds)?;
    let cats: Vec<usize> = samples.iter().map(|s| s.1).collect();
    evaluate_prepared(model, store, &geometry, &cats, part_sets, batch_size, precision)
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x}"))
}

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,val_overall,val_avg_class,val_instance_miou,val_category_miou";

pub fn metrics_csv(history: &[EpochRecord]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in history {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.epoch,
            r.lr,
            r.train_loss,
            r.val.overall_accuracy,
            r.val.avg_class_accuracy,
            opt(r.val.instance_miou),
            opt(r.val.category_miou)
        );
    }
    s
}

pub fn per_class_csv(m: &Metrics) -> String {
    let mut s = String::from("class,iou\n");
    for (c, iou) in &m.per_class_iou {
        let _ = writeln!(s, "{c},{iou}");
    }
    s
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains a model with Adam on mini-batches, evaluating on `val` after
/// every epoch.
pub fn fit(
    model_config: &ModelConfig,
    train: &[Sample],
    val: &[Sample],
    config: &TrainConfig,
    options: &FitOptions,
) -> Result<FitResult> {
    config.validate()?;
    let model = Agcn::new(model_config.clone())?;
    let task = model_config.mode;
    check_samples(&model, train, "training")?;
    check_samples(&model, val, "validation")?;
    let part_sets = options.part_sets.as_deref();
    if task == Task::Segment && part_sets.is_none() {
        invalid!("segmentation training needs category part sets");
    }
    if let Some(dir) = &options.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut store = match &options.initial {
        Some(s) => s.clone(),
        None => model.init_params(config.seed)?,
    };
    let val_clouds: Vec<PointCloud> = val.iter().map(|s| s.0.clone()).collect();
    let val_geometry = model.prepare_all(&val_clouds)?;
    let val_cats: Vec<usize> = val.iter().map(|s| s.1).collect();

    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, ParameterStore)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.epochs {
        let e = epoch as u64;
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[STREAM_SHUFFLE, e])));
        let adam = config.adam(epoch);
        let (mut loss_sum, mut weight) = (0.0, 0usize);
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
            let geometry: Vec<CloudGeometry> = idx
                .par_iter()
                .map(|&i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[STREAM_AUGMENT, e, i as u64]));
                    model.prepare(&augment(&train[i].0, config, &mut rng)?)
                })
                .collect::<Result<_>>()?;
            let refs: Vec<&CloudGeometry> = geometry.iter().collect();
            let dropout_seed = derive_seed(config.seed, &[STREAM_DROPOUT, e, b as u64]);
            let mut tape = Tape::new(Mode::Train, config.precision, dropout_seed);
            let logits = match task {
                Task::Classify => model.classify_logits(&mut tape, &store, &refs)?,
                Task::Segment => model.segment_logits(&mut tape, &store, &refs)?,
            };
            let loss = tape.softmax_cross_entropy(logits, &targets(task, &batch))?;
            let lv = tape.value(loss).data()[0];
            if !lv.is_finite() {
                return Err(Error::NonFinite(format!("training loss {lv} at epoch {epoch}, batch {b}")));
            }
            let grads = tape.backward(loss)?;
            tape.accumulate_param_grads(&grads, &mut store)?;
            store.adam_update(&adam);
            store.apply_running_updates(tape.running_updates())?;
            loss_sum += lv * batch.len() as f64;
            weight += batch.len();
        }
        let train_loss = loss_sum / weight as f64;
        let val_metrics = evaluate_prepared(
            &model,
            &store,
            &val_geometry,
            &val_cats,
            part_sets,
            config.eval_batch_size,
            config.precision,
        )?;
        log::info!(
            "epoch {epoch}: lr {:.3e} loss {train_loss:.5} val overall {:.4}",
            adam.lr,
            val_metrics.overall_accuracy
        );
        let acc = val_metrics.overall_accuracy;
        if best.as_ref().is_none_or(|(_, a, _)| acc > *a) {
            best = Some((epoch, acc, store.clone()));
            if let Some(dir) = &options.out_dir {
                save_checkpoint(&store, &dir.join("best.ckpt"), false)?;
                write(&dir.join("per_class.csv"), &per_class_csv(&val_metrics))?;
            }
        }
        history.push(EpochRecord {
            epoch,
            lr: adam.lr,
            train_loss,
            val: val_metrics,
        });
        if let Some(dir) = &options.out_dir {
            write(&dir.join("metrics.csv"), &metrics_csv(&history))?;
        }
    }
    if let Some(dir) = &options.out_dir {
        save_checkpoint(&store, &dir.join("last.ckpt"), true)?;
    }
    let (best_epoch, _, best_store) = best.expect("at least one epoch");
    Ok(FitResult {
        last: store,
        best: best_store,
        best_epoch,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{synth_classification_dataset, synth_segmentation_dataset, ShapeFamily, Split, SyntheticSpec};
    use crate::experiments::tiny_config;

    fn cls_data(per_class: usize, split: Split) -> Vec<Sample> {
        let specs: Vec<SyntheticSpec> = [ShapeFamily::Sphere, ShapeFamily::Box]
            .iter()
            .map(|&family| SyntheticSpec {
                family,
                points: 48,
                noise_sigma: 0.0,
            })
            .collect();
        let d = synth_classification_dataset(&specs, per_class, 5, split).unwrap();
        d.samples.into_iter().map(|s| (s.cloud, s.category)).collect()
    }

    fn tiny_train() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 4,
            precision: Precision::F64,
            eval_batch_size: 3,
            ..Default::default()
        }
    }

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            num_classes: 2,
            head_widths: vec![8, 6, 2],
            ..tiny_config(Task::Classify)
        }
    }

    #[test]
    fn deterministic_history_and_outputs() {
        let train = cls_data(4, Split::Train);
        let val = cls_data(2, Split::Val);
        let dir = tempfile::tempdir().unwrap();
        let opts = FitOptions {
            out_dir: Some(dir.path().to_path_buf()),
            ..Default::default()
        };
        let a = fit(&tiny_model(), &train, &val, &tiny_train(), &opts).unwrap();
        let b = fit(&tiny_model(), &train, &val, &tiny_train(), &FitOptions::default()).unwrap();
        let bits = |r: &FitResult| r.loss_curve().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.last, b.last);
        let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines.len(), 4);
        for (r, line) in a.history.iter().zip(&lines[1..]) {
            let lr: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
            assert_eq!(lr, tiny_train().lr_at(r.epoch));
            assert!(line.ends_with(",,"));
        }
        for f in ["best.ckpt", "last.ckpt", "per_class.csv"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let m = a.best_metrics();
        assert!(a.history.iter().all(|r| r.val.overall_accuracy <= m.overall_accuracy));
    }

    #[test]
    fn loss_decreases_on_a_tiny_problem() {
        let train = cls_data(6, Split::Train);
        let cfg = TrainConfig {
            epochs: 12,
            lr0: 1e-2,
            jitter_sigma: 0.0,
            ..tiny_train()
        };
        let r = fit(&tiny_model(), &train, &train, &cfg, &FitOptions::default()).unwrap();
        let curve = r.loss_curve();
        assert!(curve.iter().all(|v| v.is_finite()));
        assert!(curve[curve.len() - 1] < curve[0], "{curve:?}");
    }

    #[test]
    fn segmentation_fit_runs() {
        let specs = [SyntheticSpec {
            family: ShapeFamily::CappedCylinder,
            points: 48,
            noise_sigma: 0.0,
        }];
        let d = synth_segmentation_dataset(&specs, 3, 1, Split::Train).unwrap();
        let parts = d.manifest.part_sets.clone();
        let samples: Vec<Sample> = d.samples.into_iter().map(|s| (s.cloud, s.category)).collect();
        let model = tiny_config(Task::Segment);
        let opts = FitOptions {
            part_sets: parts,
            ..Default::default()
        };
        let r = fit(&model, &samples, &samples, &tiny_train(), &opts).unwrap();
        let m = r.best_metrics();
        assert!(m.instance_miou.is_some() && m.category_miou.is_some());
        assert!(fit(&model, &samples, &samples, &tiny_train(), &FitOptions::default()).is_err());
    }

    #[test]
    fn rejects_empty_and_mislabelled_sets() {
        let val = cls_data(1, Split::Val);
        assert!(fit(&tiny_model(), &[], &val, &tiny_train(), &FitOptions::default()).is_err());
        let mut bad = val.clone();
        bad[0].1 = 7;
        assert!(fit(&tiny_model(), &bad, &val, &tiny_train(), &FitOptions::default()).is_err());
    }
}
