use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::pointfile::{load_point_cloud, PointFormat};
use crate::error::{invalid, Error, Result};
use crate::geometry::PointCloud;

const MANIFEST_MAGIC: &str = "AGCNMANIFEST 1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
    pub category: usize,
    pub split: Split,
}

/// Dataset listing: category names, optional per-category part ids and
/// one entry per cloud file.
///
/// Text layout, tab separated:
///
/// ```text
/// AGCNMANIFEST 1
/// category  0  sphere
/// parts     0  0,1,2        (optional, segmentation only)
/// entries
/// sphere/0000.pbin  0  train
/// ```
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    pub category_names: Vec<String>,
    pub part_sets: Option<Vec<Vec<u32>>>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let n = self.category_names.len();
        if let Some(e) = self.entries.iter().find(|e| e.category >= n) {
            invalid!("entry {} has category {} but only {n} categories exist", e.path.display(), e.category);
        }
        if let Some(p) = &self.part_sets {
            if p.len() != n {
                invalid!("{} part sets for {n} categories", p.len());
            }
        }
        Ok(())
    }

    pub fn num_categories(&self) -> usize {
        self.category_names.len()
    }

    /// Total number of distinct part ids over all categories.
    pub fn num_parts(&self) -> usize {
        self.part_sets
            .as_ref()
            .map_or(0, |p| p.iter().flatten().map(|&x| x as usize + 1).max().unwrap_or(0))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{MANIFEST_MAGIC}\n");
        for (i, name) in self.category_names.iter().enumerate() {
            let _ = writeln!(s, "category\t{i}\t{name}");
        }
        if let Some(parts) = &self.part_sets {
            for (i, p) in parts.iter().enumerate() {
                let _ = writeln!(s, "parts\t{i}\t{}", crate::kv::join(p));
            }
        }
        s.push_str("entries\n");
        for e in &self.entries {
            let _ = writeln!(s, "{}\t{}\t{}", e.path.display(), e.category, e.split.as_str());
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim() == MANIFEST_MAGIC => {}
            _ => return Err(Error::parse("line 1", format!("expected `{MANIFEST_MAGIC}`"))),
        }
        let mut m = DatasetManifest::default();
        let mut parts: Vec<Option<Vec<u32>>> = Vec::new();
        let mut in_entries = false;
        for (i, raw) in lines {
            let at = format!("line {}", i + 1);
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            if !in_entries && line.trim() == "entries" {
                in_entries = true;
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(Error::parse(at, "expected 3 tab-separated fields"));
            }
            if in_entries {
                let category = f[1].parse().map_err(|_| Error::parse(&at, "invalid category id"))?;
                let split = Split::parse(f[2]).ok_or_else(|| Error::parse(&at, format!("unknown split `{}`", f[2])))?;
                m.entries.push(ManifestEntry {
                    path: PathBuf::from(f[0]),
                    category,
                    split,
                });
                continue;
            }
            let id: usize = f[1].parse().map_err(|_| Error::parse(&at, "invalid category id"))?;
            match f[0] {
                "category" => {
                    if id != m.category_names.len() {
                        return Err(Error::parse(at, format!("category ids must be dense from 0, got {id}")));
                    }
                    m.category_names.push(f[2].to_string());
                }
                "parts" => {
                    let p = crate::kv::parse_list(f[2]).ok_or_else(|| Error::parse(&at, "invalid part list"))?;
                    if parts.len() <= id {
                        parts.resize(id + 1, None);
                    }
                    parts[id] = Some(p);
                }
                other => return Err(Error::parse(at, format!("unknown header record `{other}`"))),
            }
        }
        if !parts.is_empty() {
            let all: Option<Vec<Vec<u32>>> = parts.into_iter().collect();
            m.part_sets = Some(all.ok_or_else(|| Error::parse("header", "part sets must cover every category"))?);
        }
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Parse { location, message } => Error::parse(format!("{}: {location}", path.display()), message),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Loads every cloud of `split` with its category, resolving relative
    /// paths against `base`. The file format follows the extension.
    pub fn load_split(&self, base: &Path, split: Split) -> Result<Vec<(PointCloud, usize)>> {
        let entries: Vec<&ManifestEntry> = self.split(split).collect();
        entries
            .par_iter()
            .map(|e| {
                let path = base.join(&e.path);
                Ok((load_point_cloud(&path, PointFormat::from_path(&path))?, e.category))
            })
            .collect()
    }
}
