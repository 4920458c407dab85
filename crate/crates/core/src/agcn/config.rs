use std::fmt::Write as _;
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::kv::{join, parse_bool, parse_list, parse_num, KvFile};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Classify,
    Segment,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Classify => "classify",
            Task::Segment => "segment",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "classify" => Some(Task::Classify),
            "segment" => Some(Task::Segment),
            _ => None,
        }
    }
}

/// Normalisation of neighbour scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    /// Dot products divided by their row sum.
    Ratio,
    /// Softmax over the row's dot products.
    Softmax,
}

impl AttentionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttentionKind::Ratio => "ratio",
            AttentionKind::Softmax => "softmax",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "ratio" => Some(AttentionKind::Ratio),
            "softmax" => Some(AttentionKind::Softmax),
            _ => None,
        }
    }
}

/// Starting point of farthest point sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FpsSeed {
    /// A fixed point index.
    Index(usize),
    /// The lexicographically smallest coordinate triple, lowest index on
    /// exact duplicates. Independent of point storage order.
    LexMin,
}

impl FpsSeed {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "lexmin" => Some(FpsSeed::LexMin),
            _ => s.parse().ok().map(FpsSeed::Index),
        }
    }

    fn format(self) -> String {
        match self {
            FpsSeed::Index(i) => i.to_string(),
            FpsSeed::LexMin => "lexmin".into(),
        }
    }
}

/// Model hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub mode: Task,
    pub m_nodes: usize,
    pub l_group: usize,
    pub k_neighbors: usize,
    /// Per-point channels beyond xyz (3 for normals).
    pub input_channels: usize,
    pub local_mlp_widths: Vec<usize>,
    pub attention_layers: usize,
    pub attention_transform_widths: Vec<[usize; 2]>,
    pub decoder_transform_widths: Vec<[usize; 2]>,
    pub global_graph: bool,
    pub global_graph_mlp_widths: [usize; 2],
    /// Classification head; the last entry is the class count.
    pub head_widths: Vec<usize>,
    /// Hidden widths of the per-point segmentation head.
    pub seg_head_widths: Vec<usize>,
    pub dropout: f64,
    pub idw_m: usize,
    pub idw_power: f64,
    pub num_classes: usize,
    pub batch_norm: bool,
    pub attention_kind: AttentionKind,
    pub fps_seed: FpsSeed,
    pub init_bound: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::classification()
    }
}

impl ModelConfig {
    pub fn classification() -> Self {
        Self {
            mode: Task::Classify,
            m_nodes: 256,
            l_group: 16,
            k_neighbors: 3,
            input_channels: 3,
            local_mlp_widths: vec![64, 64, 128],
            attention_layers: 3,
            attention_transform_widths: vec![[128, 128], [128, 256], [256, 512]],
            decoder_transform_widths: vec![[512, 256], [256, 128], [128, 128]],
            global_graph: true,
            global_graph_mlp_widths: [64, 128],
            head_widths: vec![512, 256, 40],
            seg_head_widths: vec![128],
            dropout: 0.5,
            idw_m: 3,
            idw_power: 2.0,
            num_classes: 40,
            batch_norm: true,
            attention_kind: AttentionKind::Ratio,
            fps_seed: FpsSeed::Index(0),
            init_bound: crate::diffcore::INIT_BOUND,
        }
    }

    pub fn segmentation() -> Self {
        Self {
            mode: Task::Segment,
            m_nodes: 384,
            k_neighbors: 8,
            head_widths: vec![512, 256, 50],
            num_classes: 50,
            ..Self::classification()
        }
    }

    /// Width of the local structure feature.
    pub fn local_width(&self) -> usize {
        *self.local_mlp_widths.last().unwrap_or(&0)
    }

    /// Width contributed by the global point graph to each node (local part
    /// plus tiled global part), or 0 when disabled.
    pub fn graph_width(&self) -> usize {
        if self.global_graph {
            2 * self.global_graph_mlp_widths[1]
        } else {
            0
        }
    }

    /// Output width of encoder layer `t` (0 is the local structure feature).
    pub fn encoder_width(&self, t: usize) -> usize {
        if t == 0 {
            self.local_width()
        } else {
            self.attention_transform_widths[t - 1][1]
        }
    }

    /// Output width of decoder layer `t` (0 is the decoder input).
    pub fn decoder_width(&self, t: usize) -> usize {
        if t == 0 {
            2 * self.encoder_width(self.attention_layers)
        } else {
            self.decoder_transform_widths[t - 1][1]
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m_nodes == 0 || self.l_group == 0 {
            invalid!("m_nodes and l_group must be positive");
        }
        if self.k_neighbors == 0 || self.k_neighbors >= self.m_nodes {
            invalid!("k_neighbors must be in [1, m_nodes - 1], got {}", self.k_neighbors);
        }
        if self.local_mlp_widths.is_empty() || self.local_mlp_widths.contains(&0) {
            invalid!("local_mlp_widths must be a non-empty list of positive widths");
        }
        if self.attention_layers == 0 {
            invalid!("attention_layers must be at least 1");
        }
        if self.attention_transform_widths.len() != self.attention_layers {
            invalid!(
                "{} attention transform width pairs for {} layers",
                self.attention_transform_widths.len(),
                self.attention_layers
            );
        }
        let pairs = self.attention_transform_widths.iter();
        if self.global_graph_mlp_widths.contains(&0) || pairs.flatten().any(|&w| w == 0) {
            invalid!("layer widths must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            invalid!("dropout must be in [0, 1), got {}", self.dropout);
        }
        if self.num_classes == 0 {
            invalid!("num_classes must be positive");
        }
        if !(self.init_bound > 0.0 && self.init_bound.is_finite()) {
            invalid!("init_bound must be positive");
        }
        match self.mode {
            Task::Classify => {
                if self.head_widths.last() != Some(&self.num_classes) {
                    invalid!("the last head width must equal num_classes ({})", self.num_classes);
                }
                if self.head_widths.contains(&0) {
                    invalid!("head widths must be positive");
                }
            }
            Task::Segment => {
                if self.decoder_transform_widths.len() != self.attention_layers {
                    invalid!(
                        "{} decoder transform width pairs for {} layers",
                        self.decoder_transform_widths.len(),
                        self.attention_layers
                    );
                }
                if self.decoder_transform_widths.iter().flatten().any(|&w| w == 0)
                    || self.seg_head_widths.contains(&0)
                {
                    invalid!("layer widths must be positive");
                }
                if self.idw_m == 0 || self.idw_m > self.m_nodes {
                    invalid!("idw_m must be in [1, m_nodes], got {}", self.idw_m);
                }
                if !self.idw_power.is_finite() || self.idw_power <= 0.0 {
                    invalid!("idw_power must be positive");
                }
            }
        }
        Ok(())
    }

    /// Parses `key = value` text. Keys not given keep the defaults of the
    /// file's `mode` (classification when absent).
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KvFile::parse(text)?;
        let mode = kv.get("mode", Task::parse)?.unwrap_or(Task::Classify);
        let mut c = match mode {
            Task::Classify => Self::classification(),
            Task::Segment => Self::segmentation(),
        };
        kv.set("m_nodes", &mut c.m_nodes, parse_num)?;
        kv.set("l_group", &mut c.l_group, parse_num)?;
        kv.set("k_neighbors", &mut c.k_neighbors, parse_num)?;
        kv.set("input_channels", &mut c.input_channels, parse_num)?;
        kv.set("local_mlp_widths", &mut c.local_mlp_widths, parse_list)?;
        kv.set("attention_layers", &mut c.attention_layers, parse_num)?;
        kv.set("attention_transform_widths", &mut c.attention_transform_widths, parse_pairs)?;
        kv.set("decoder_transform_widths", &mut c.decoder_transform_widths, parse_pairs)?;
        kv.set("global_graph", &mut c.global_graph, parse_bool)?;
        kv.set("global_graph_mlp_widths", &mut c.global_graph_mlp_widths, |s| {
            parse_list::<usize>(s).and_then(|v| v.try_into().ok())
        })?;
        let head_given = kv.get("head_widths", parse_list)?;
        kv.set("seg_head_widths", &mut c.seg_head_widths, parse_list)?;
        kv.set("dropout", &mut c.dropout, parse_num)?;
        kv.set("idw_m", &mut c.idw_m, parse_num)?;
        kv.set("idw_power", &mut c.idw_power, parse_num)?;
        let classes_given = kv.get("num_classes", parse_num)?;
        kv.set("batch_norm", &mut c.batch_norm, parse_bool)?;
        kv.set("attention_kind", &mut c.attention_kind, AttentionKind::parse)?;
        kv.set("fps_seed", &mut c.fps_seed, FpsSeed::parse)?;
        kv.set("init_bound", &mut c.init_bound, parse_num)?;
        if let Some(n) = classes_given {
            c.num_classes = n;
            if let Some(last) = c.head_widths.last_mut() {
                *last = n;
            }
        }
        if let Some(h) = head_given {
            c.head_widths = h;
        }
        kv.finish()?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Parse { location, message } => Error::parse(format!("{}: {location}", path.display()), message),
            other => other,
        })
    }

    /// Text form accepted by [`ModelConfig::parse`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let pairs = |p: &[[usize; 2]]| p.iter().map(|[a, b]| format!("{a}x{b}")).collect::<Vec<_>>().join(",");
        let _ = writeln!(s, "mode = {}", self.mode.as_str());
        let _ = writeln!(s, "m_nodes = {}", self.m_nodes);
        let _ = writeln!(s, "l_group = {}", self.l_group);
        let _ = writeln!(s, "k_neighbors = {}", self.k_neighbors);
        let _ = writeln!(s, "input_channels = {}", self.input_channels);
        let _ = writeln!(s, "local_mlp_widths = {}", join(&self.local_mlp_widths));
        let _ = writeln!(s, "attention_layers = {}", self.attention_layers);
        let _ = writeln!(s, "attention_transform_widths = {}", pairs(&self.attention_transform_widths));
        let _ = writeln!(s, "decoder_transform_widths = {}", pairs(&self.decoder_transform_widths));
        let _ = writeln!(s, "global_graph = {}", self.global_graph);
        let _ = writeln!(s, "global_graph_mlp_widths = {}", join(&self.global_graph_mlp_widths));
        let _ = writeln!(s, "head_widths = {}", join(&self.head_widths));
        let _ = writeln!(s, "seg_head_widths = {}", join(&self.seg_head_widths));
        let _ = writeln!(s, "dropout = {}", self.dropout);
        let _ = writeln!(s, "idw_m = {}", self.idw_m);
        let _ = writeln!(s, "idw_power = {}", self.idw_power);
        let _ = writeln!(s, "num_classes = {}", self.num_classes);
        let _ = writeln!(s, "batch_norm = {}", self.batch_norm);
        let _ = writeln!(s, "attention_kind = {}", self.attention_kind.as_str());
        let _ = writeln!(s, "fps_seed = {}", self.fps_seed.format());
        let _ = writeln!(s, "init_bound = {}", self.init_bound);
        s
    }
}

/// `128x128,128x256` style width pairs.
fn parse_pairs(s: &str) -> Option<Vec<[usize; 2]>> {
    let s = s.trim();
    if s.is_empty() {
        return Some(Vec::new());
    }
    s.split(',')
        .map(|p| {
            let (a, b) = p.trim().split_once('x')?;
            Some([a.trim().parse().ok()?, b.trim().parse().ok()?])
        })
        .collect()
}
