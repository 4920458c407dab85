//! Synthetic shape datasets.
//!
//! Every shape is a union of surface patches. Points are split between
//! patches in proportion to patch area (largest-remainder rounding) and
//! drawn uniformly on each patch, displaced along the analytic normal by
//! Gaussian noise, scaled by a factor in [0.8, 1.2] and rotated by a
//! random angle about z. Channels are the rotated unit normals.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::manifest::{DatasetManifest, ManifestEntry, Split};
use super::pointfile::{save_point_cloud, PointFormat};
use crate::error::{invalid, Error, Result};
use crate::geometry::{Point3, PointCloud};
use crate::kv::{parse_list, parse_num, KvFile};
use crate::seeds::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeFamily {
    Sphere,
    Box,
    Cylinder,
    Torus,
    PlanePair,
    /// Cylinder body with bottom and top caps as three parts.
    CappedCylinder,
    /// Box body with a protruding handle.
    BoxHandle,
    /// Spherical shade on a stem with a base disk.
    Lamp,
}

impl ShapeFamily {
    pub const CLASSIFICATION: [ShapeFamily; 5] = [
        ShapeFamily::Sphere,
        ShapeFamily::Box,
        ShapeFamily::Cylinder,
        ShapeFamily::Torus,
        ShapeFamily::PlanePair,
    ];
    pub const SEGMENTATION: [ShapeFamily; 3] = [ShapeFamily::CappedCylinder, ShapeFamily::BoxHandle, ShapeFamily::Lamp];

    pub fn name(self) -> &'static str {
        match self {
            ShapeFamily::Sphere => "sphere",
            ShapeFamily::Box => "box",
            ShapeFamily::Cylinder => "cylinder",
            ShapeFamily::Torus => "torus",
            ShapeFamily::PlanePair => "plane-pair",
            ShapeFamily::CappedCylinder => "capped-cylinder",
            ShapeFamily::BoxHandle => "box-handle",
            ShapeFamily::Lamp => "lamp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::CLASSIFICATION
            .into_iter()
            .chain(Self::SEGMENTATION)
            .find(|f| f.name() == s)
    }

    /// Number of labelled parts.
    pub fn num_parts(self) -> usize {
        self.patches().iter().map(|p| p.part).max().map_or(0, |m| m + 1)
    }

    fn patches(self) -> Vec<Patch> {
        use Surface::*;
        let p = |part, surface| Patch { part, surface };
        match self {
            ShapeFamily::Sphere => vec![p(0, Sphere { center: [0.0; 3], r: 1.0 })],
            ShapeFamily::Box => box_faces([0.0; 3], [0.9, 0.7, 0.5], 0, None),
            ShapeFamily::Cylinder => capped_cylinder(0.6, 1.6, [0, 0, 0]),
            ShapeFamily::Torus => vec![p(0, Torus { big: 0.75, small: 0.3 })],
            ShapeFamily::PlanePair => vec![
                p(0, Rect { origin: [-0.8, -0.8, 0.4], u: [1.6, 0.0, 0.0], v: [0.0, 1.6, 0.0], normal: [0.0, 0.0, 1.0] }),
                p(0, Rect { origin: [-0.8, -0.8, -0.4], u: [1.6, 0.0, 0.0], v: [0.0, 1.6, 0.0], normal: [0.0, 0.0, -1.0] }),
            ],
            ShapeFamily::CappedCylinder => capped_cylinder(0.5, 1.6, [0, 1, 2]),
            ShapeFamily::BoxHandle => {
                let mut v = box_faces([0.0; 3], [0.6, 0.4, 0.5], 0, None);
                v.extend(box_faces([0.8, 0.0, 0.0], [0.2, 0.1, 0.25], 1, Some(0)));
                v
            }
            ShapeFamily::Lamp => vec![
                p(0, Sphere { center: [0.0, 0.0, 0.45], r: 0.45 }),
                p(1, CylinderSide { r: 0.07, z0: -0.9, h: 0.9 }),
                p(1, Disk { z: -0.9, r: 0.35, up: false }),
            ],
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Surface {
    Sphere { center: Point3, r: f64 },
    /// `origin + a·u + b·v` for `a, b ∈ [0, 1]`, `u ⟂ v`.
    Rect { origin: Point3, u: Point3, v: Point3, normal: Point3 },
    /// Lateral surface about the z axis from `z0` to `z0 + h`.
    CylinderSide { r: f64, z0: f64, h: f64 },
    Disk { z: f64, r: f64, up: bool },
    /// About the z axis, centred at the origin.
    Torus { big: f64, small: f64 },
}

#[derive(Debug, Clone, Copy)]
struct Patch {
    part: usize,
    surface: Surface,
}

fn norm(v: Point3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn capped_cylinder(r: f64, h: f64, parts: [usize; 3]) -> Vec<Patch> {
    vec![
        Patch { part: parts[0], surface: Surface::CylinderSide { r, z0: -h / 2.0, h } },
        Patch { part: parts[1], surface: Surface::Disk { z: -h / 2.0, r, up: false } },
        Patch { part: parts[2], surface: Surface::Disk { z: h / 2.0, r, up: true } },
    ]
}

/// Faces of an axis-aligned box; `skip` omits one face by index
/// (0 = −x, 1 = +x, 2 = −y, 3 = +y, 4 = −z, 5 = +z).
fn box_faces(c: Point3, h: Point3, part: usize, skip: Option<usize>) -> Vec<Patch> {
    let mut out = Vec::new();
    for axis in 0..3 {
        let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
        for (side, sign) in [(0, -1.0), (1, 1.0)] {
            if skip == Some(2 * axis + side) {
                continue;
            }
            let mut origin = c;
            origin[axis] += sign * h[axis];
            origin[a] -= h[a];
            origin[b] -= h[b];
            let mut u = [0.0; 3];
            u[a] = 2.0 * h[a];
            let mut v = [0.0; 3];
            v[b] = 2.0 * h[b];
            let mut normal = [0.0; 3];
            normal[axis] = sign;
            out.push(Patch { part, surface: Surface::Rect { origin, u, v, normal } });
        }
    }
    out
}

impl Surface {
    fn area(&self) -> f64 {
        match *self {
            Surface::Sphere { r, .. } => 4.0 * PI * r * r,
            Surface::Rect { u, v, .. } => norm(u) * norm(v),
            Surface::CylinderSide { r, h, .. } => 2.0 * PI * r * h,
            Surface::Disk { r, .. } => PI * r * r,
            Surface::Torus { big, small } => 4.0 * PI * PI * big * small,
        }
    }

    /// A uniform surface point and its outward unit normal.
    fn sample(&self, rng: &mut ChaCha8Rng) -> (Point3, Point3) {
        match *self {
            Surface::Sphere { center, r } => {
                let n = loop {
                    let g: Point3 = [
                        StandardNormal.sample(rng),
                        StandardNormal.sample(rng),
                        StandardNormal.sample(rng),
                    ];
                    let l = norm(g);
                    if l > 1e-12 {
                        break [g[0] / l, g[1] / l, g[2] / l];
                    }
                };
                ([center[0] + r * n[0], center[1] + r * n[1], center[2] + r * n[2]], n)
            }
            Surface::Rect { origin, u, v, normal } => {
                let (a, b): (f64, f64) = (rng.random(), rng.random());
                let p = [0, 1, 2].map(|i| origin[i] + a * u[i] + b * v[i]);
                (p, normal)
            }
            Surface::CylinderSide { r, z0, h } => {
                let t = rng.random_range(0.0..2.0 * PI);
                let z = z0 + h * rng.random::<f64>();
                ([r * t.cos(), r * t.sin(), z], [t.cos(), t.sin(), 0.0])
            }
            Surface::Disk { z, r, up } => {
                let rad = r * rng.random::<f64>().sqrt();
                let t = rng.random_range(0.0..2.0 * PI);
                ([rad * t.cos(), rad * t.sin(), z], [0.0, 0.0, if up { 1.0 } else { -1.0 }])
            }
            Surface::Torus { big, small } => {
                // tube angle accepted with density proportional to the local ring radius
                let u = loop {
                    let u = rng.random_range(0.0..2.0 * PI);
                    if rng.random::<f64>() * (big + small) <= big + small * u.cos() {
                        break u;
                    }
                };
                let phi = rng.random_range(0.0..2.0 * PI);
                let ring = big + small * u.cos();
                let p = [ring * phi.cos(), ring * phi.sin(), small * u.sin()];
                (p, [u.cos() * phi.cos(), u.cos() * phi.sin(), u.sin()])
            }
        }
    }
}

/// Splits `total` points between patches in proportion to `areas`.
fn allocate(areas: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = areas.iter().sum();
    let exact: Vec<f64> = areas.iter().map(|a| a / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..areas.len()).collect();
    order.sort_by(|&i, &j| (exact[j] - exact[j].floor()).total_cmp(&(exact[i] - exact[i].floor())).then(i.cmp(&j)));
    let missing = total - counts.iter().sum::<usize>();
    for &i in order.iter().take(missing) {
        counts[i] += 1;
    }
    counts
}

/// One generated shape.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    /// Coordinates, unit normals as 3 channels, and part labels for
    /// segmentation families.
    pub cloud: PointCloud,
    pub category: usize,
    pub scale: f64,
    pub angle: f64,
}

/// Shape family and sampling parameters of one category.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub family: ShapeFamily,
    pub points: usize,
    /// Standard deviation of the displacement along the normal, before
    /// scaling.
    pub noise_sigma: f64,
}

/// Draws one shape. `part_offset` is added to every part label; `None`
/// leaves the cloud unlabelled.
pub fn sample_shape(spec: &SyntheticSpec, part_offset: Option<u32>, rng: &mut ChaCha8Rng) -> Result<(PointCloud, f64, f64)> {
    if spec.points == 0 {
        invalid!("a synthetic shape needs at least one point");
    }
    if !(spec.noise_sigma >= 0.0 && spec.noise_sigma.is_finite()) {
        invalid!("noise sigma must be finite and non-negative");
    }
    let patches = spec.family.patches();
    let counts = allocate(&patches.iter().map(|p| p.surface.area()).collect::<Vec<_>>(), spec.points);
    let scale = rng.random_range(0.8..=1.2);
    let angle = rng.random_range(0.0..2.0 * PI);
    let (s, c) = angle.sin_cos();
    let mut coords = Vec::with_capacity(spec.points);
    let mut normals = Vec::with_capacity(spec.points * 3);
    let mut labels = Vec::with_capacity(spec.points);
    for (patch, &count) in patches.iter().zip(&counts) {
        for _ in 0..count {
            let (p, n) = patch.surface.sample(rng);
            let e: f64 = StandardNormal.sample(rng);
            let d = spec.noise_sigma * e;
            let q = [0, 1, 2].map(|i| scale * (p[i] + d * n[i]));
            coords.push([c * q[0] - s * q[1], s * q[0] + c * q[1], q[2]]);
            normals.extend_from_slice(&[c * n[0] - s * n[1], s * n[0] + c * n[1], n[2]]);
            labels.push(patch.part as u32);
        }
    }
    let labels = part_offset.map(|o| labels.iter().map(|l| l + o).collect());
    Ok((PointCloud::new(coords, normals, 3, labels)?, scale, angle))
}

/// Generated samples with a manifest pointing at their file names under
/// `{category}/{split}_{index}.{ext}`.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub samples: Vec<SynthSample>,
    pub manifest: DatasetManifest,
}

fn split_index(split: Split) -> u64 {
    match split {
        Split::Train => 0,
        Split::Val => 1,
        Split::Test => 2,
    }
}

fn synth(specs: &[SyntheticSpec], per_class: usize, seed: u64, split: Split, segment: bool) -> Result<SynthDataset> {
    if specs.is_empty() {
        invalid!("no shape families given");
    }
    let mut offsets = Vec::with_capacity(specs.len());
    let mut next = 0u32;
    for s in specs {
        offsets.push(next);
        next += s.family.num_parts() as u32;
    }
    let jobs: Vec<(usize, usize)> = (0..specs.len()).flat_map(|c| (0..per_class).map(move |i| (c, i))).collect();
    let samples = jobs
        .par_iter()
        .map(|&(c, i)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[split_index(split), c as u64, i as u64]));
            let offset = segment.then_some(offsets[c]);
            let (cloud, scale, angle) = sample_shape(&specs[c], offset, &mut rng)?;
            Ok(SynthSample {
                cloud,
                category: c,
                scale,
                angle,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let part_sets = segment.then(|| {
        specs
            .iter()
            .zip(&offsets)
            .map(|(s, &o)| (o..o + s.family.num_parts() as u32).collect())
            .collect()
    });
    let entries = jobs
        .iter()
        .map(|&(c, i)| ManifestEntry {
            path: format!("{}/{}_{i:05}", specs[c].family.name(), split.as_str()).into(),
            category: c,
            split,
        })
        .collect();
    Ok(SynthDataset {
        samples,
        manifest: DatasetManifest {
            category_names: specs.iter().map(|s| s.family.name().to_string()).collect(),
            part_sets,
            entries,
        },
    })
}

/// `per_class` unlabelled clouds of every spec; category `c` is `specs[c]`.
pub fn synth_classification_dataset(specs: &[SyntheticSpec], per_class: usize, seed: u64, split: Split) -> Result<SynthDataset> {
    synth(specs, per_class, seed, split, false)
}

/// `per_class` part-labelled clouds of every spec. Part ids are numbered
/// consecutively across categories in spec order.
pub fn synth_segmentation_dataset(specs: &[SyntheticSpec], per_class: usize, seed: u64, split: Split) -> Result<SynthDataset> {
    synth(specs, per_class, seed, split, true)
}

/// Writes every sample under `dir`, completing the manifest paths with the
/// format's extension, and returns the manifest.
pub fn write_dataset(datasets: &[SynthDataset], dir: &Path, format: PointFormat) -> Result<DatasetManifest> {
    let Some(first) = datasets.first() else {
        invalid!("nothing to write");
    };
    let mut manifest = DatasetManifest {
        category_names: first.manifest.category_names.clone(),
        part_sets: first.manifest.part_sets.clone(),
        entries: Vec::new(),
    };
    for d in datasets {
        if d.manifest.category_names != manifest.category_names {
            invalid!("datasets disagree on categories");
        }
        for (sample, entry) in d.samples.iter().zip(&d.manifest.entries) {
            let rel = entry.path.with_extension(format.extension());
            let path = dir.join(&rel);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            save_point_cloud(&sample.cloud, &path, format)?;
            manifest.entries.push(ManifestEntry { path: rel, ..entry.clone() });
        }
    }
    Ok(manifest)
}

/// Description of a dataset to materialise: families, sampling, split
/// sizes and seed, read from `key = value` text.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthPlan {
    pub segmentation: bool,
    pub families: Vec<ShapeFamily>,
    pub points: usize,
    pub noise_sigma: f64,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
    pub format: PointFormat,
}

impl Default for SynthPlan {
    fn default() -> Self {
        Self {
            segmentation: false,
            families: ShapeFamily::CLASSIFICATION[..4].to_vec(),
            points: 512,
            noise_sigma: 0.01,
            train_per_class: 100,
            val_per_class: 25,
            test_per_class: 0,
            seed: 0,
            format: PointFormat::Binary,
        }
    }
}

impl SynthPlan {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KvFile::parse(text)?;
        let mut p = SynthPlan::default();
        if let Some(task) = kv.get("task", |s| match s {
            "classify" => Some(false),
            "segment" => Some(true),
            _ => None,
        })? {
            p.segmentation = task;
            if task {
                p.families = ShapeFamily::SEGMENTATION.to_vec();
                p.points = 2048;
            }
        }
        kv.set("families", &mut p.families, |s| {
            parse_list::<String>(s)?.iter().map(|n| ShapeFamily::parse(n)).collect()
        })?;
        kv.set("points", &mut p.points, parse_num)?;
        kv.set("noise_sigma", &mut p.noise_sigma, parse_num)?;
        kv.set("train_per_class", &mut p.train_per_class, parse_num)?;
        kv.set("val_per_class", &mut p.val_per_class, parse_num)?;
        kv.set("test_per_class", &mut p.test_per_class, parse_num)?;
        kv.set("seed", &mut p.seed, parse_num)?;
        kv.set("format", &mut p.format, PointFormat::parse)?;
        kv.finish()?;
        if p.families.is_empty() || p.points == 0 {
            invalid!("a synthetic plan needs at least one family and one point per cloud");
        }
        Ok(p)
    }

    pub fn specs(&self) -> Vec<SyntheticSpec> {
        self.families
            .iter()
            .map(|&family| SyntheticSpec {
                family,
                points: self.points,
                noise_sigma: self.noise_sigma,
            })
            .collect()
    }

    /// Generates all splits.
    pub fn generate(&self) -> Result<Vec<SynthDataset>> {
        let specs = self.specs();
        let gen = if self.segmentation {
            synth_segmentation_dataset
        } else {
            synth_classification_dataset
        };
        [
            (Split::Train, self.train_per_class),
            (Split::Val, self.val_per_class),
            (Split::Test, self.test_per_class),
        ]
        .into_iter()
        .filter(|&(_, n)| n > 0)
        .map(|(split, n)| gen(&specs, n, self.seed, split))
        .collect()
    }

    /// Generates all splits under `dir` and writes `dir/manifest.txt`.
    pub fn materialize(&self, dir: &Path) -> Result<DatasetManifest> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = write_dataset(&self.generate()?, dir, self.format)?;
        manifest.save(&dir.join("manifest.txt"))?;
        Ok(manifest)
    }
}
