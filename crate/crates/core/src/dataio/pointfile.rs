use std::fmt::Write as _;
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::geometry::{Point3, PointCloud};

pub const TEXT_MAGIC: &str = "AGCNPTS";
pub const BINARY_MAGIC: &[u8; 8] = b"AGCNPBIN";
pub const BINARY_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointFormat {
    Text,
    Binary,
}

impl PointFormat {
    /// `.pbin` is binary, anything else text.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("pbin") => PointFormat::Binary,
            _ => PointFormat::Text,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            PointFormat::Text => "pts",
            PointFormat::Binary => "pbin",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "text" | "pts" => Some(PointFormat::Text),
            "binary" | "pbin" => Some(PointFormat::Binary),
            _ => None,
        }
    }
}

/// Text form: a header `AGCNPTS N C has_labels`, then one row per point
/// with `3 + C` reals and, when labelled, an integer label. Reals carry 9
/// significant digits.
pub fn encode_text(cloud: &PointCloud) -> String {
    let c = cloud.num_channels();
    let labels = cloud.labels();
    let mut s = String::with_capacity(cloud.len() * (3 + c) * 16 + 32);
    let _ = writeln!(s, "{TEXT_MAGIC} {} {c} {}", cloud.len(), u8::from(labels.is_some()));
    for (i, p) in cloud.coords().iter().enumerate() {
        let mut first = true;
        for v in p.iter().chain(cloud.channel_row(i)) {
            if !first {
                s.push(' ');
            }
            first = false;
            let _ = write!(s, "{v:.8e}");
        }
        if let Some(l) = labels {
            let _ = write!(s, " {}", l[i]);
        }
        s.push('\n');
    }
    s
}

fn header_field(tok: Option<&str>, what: &str) -> Result<usize> {
    tok.and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::parse("line 1", format!("header is missing a valid {what}")))
}

pub fn decode_text(text: &str) -> Result<PointCloud> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((_, header)) = lines.next() else {
        return Err(Error::parse("line 1", "empty file"));
    };
    let mut tok = header.split_whitespace();
    if tok.next() != Some(TEXT_MAGIC) {
        return Err(Error::parse("line 1", format!("expected `{TEXT_MAGIC}` header")));
    }
    let n = header_field(tok.next(), "point count")?;
    let c = header_field(tok.next(), "channel count")?;
    let has_labels = match header_field(tok.next(), "label flag")? {
        0 => false,
        1 => true,
        _ => return Err(Error::parse("line 1", "label flag must be 0 or 1")),
    };
    let mut coords = Vec::with_capacity(n);
    let mut channels = Vec::with_capacity(n * c);
    let mut labels = Vec::with_capacity(if has_labels { n } else { 0 });
    let expected = 3 + c + usize::from(has_labels);
    for row in 1..=n {
        let Some((ln, line)) = lines.next() else {
            return Err(Error::parse(format!("row {row}"), format!("file declares {n} rows but ends early")));
        };
        let at = || format!("row {row} (line {})", ln + 1);
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != expected {
            return Err(Error::parse(at(), format!("expected {expected} fields, found {}", fields.len())));
        }
        let mut reals = Vec::with_capacity(3 + c);
        for f in &fields[..3 + c] {
            let v: f64 = f.parse().map_err(|_| Error::parse(at(), format!("invalid number `{f}`")))?;
            if !v.is_finite() {
                return Err(Error::parse(at(), format!("non-finite value `{f}`")));
            }
            reals.push(v);
        }
        coords.push([reals[0], reals[1], reals[2]]);
        channels.extend_from_slice(&reals[3..]);
        if has_labels {
            let f = fields[3 + c];
            labels.push(f.parse().map_err(|_| Error::parse(at(), format!("invalid label `{f}`")))?);
        }
    }
    if let Some((ln, _)) = lines.next() {
        return Err(Error::parse(format!("line {}", ln + 1), format!("more than the declared {n} rows")));
    }
    if n == 0 {
        return Err(Error::parse("line 1", "a cloud needs at least one point"));
    }
    PointCloud::new(coords, channels, c, has_labels.then_some(labels))
}

/// Binary form: magic, then little-endian `u32` version, N, C and label
/// flag, then `f32` coordinates, `f32` channels and `u32` labels.
pub fn encode_binary(cloud: &PointCloud) -> Vec<u8> {
    let c = cloud.num_channels();
    let n = cloud.len();
    let mut out = Vec::with_capacity(24 + n * (3 + c + 1) * 4);
    out.extend_from_slice(BINARY_MAGIC);
    for v in [BINARY_VERSION, n as u32, c as u32, u32::from(cloud.labels().is_some())] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for p in cloud.coords() {
        for v in p {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    for v in cloud.channels() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    if let Some(labels) = cloud.labels() {
        for l in labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::parse(format!("offset {}", self.pos), format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self, what: &str) -> Result<f64> {
        let at = self.pos;
        let v = f32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(Error::parse(format!("offset {at}"), format!("non-finite {what}")));
        }
        Ok(f64::from(v))
    }
}

pub fn decode_binary(bytes: &[u8]) -> Result<PointCloud> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != BINARY_MAGIC {
        return Err(Error::parse("offset 0", "missing AGCNPBIN magic"));
    }
    let version = r.u32("version")?;
    if version != BINARY_VERSION {
        return Err(Error::parse("offset 8", format!("unsupported version {version}")));
    }
    let n = r.u32("point count")? as usize;
    let c = r.u32("channel count")? as usize;
    let has_labels = match r.u32("label flag")? {
        0 => false,
        1 => true,
        f => return Err(Error::parse("offset 20", format!("label flag must be 0 or 1, got {f}"))),
    };
    let body = n * (3 + c + usize::from(has_labels)) * 4;
    if bytes.len() - r.pos != body {
        return Err(Error::parse(
            format!("offset {}", r.pos),
            format!("expected {body} payload bytes, found {}", bytes.len() - r.pos),
        ));
    }
    if n == 0 {
        return Err(Error::parse("offset 12", "a cloud needs at least one point"));
    }
    let mut coords: Vec<Point3> = Vec::with_capacity(n);
    for _ in 0..n {
        coords.push([r.f32("coordinate")?, r.f32("coordinate")?, r.f32("coordinate")?]);
    }
    let channels = (0..n * c).map(|_| r.f32("channel")).collect::<Result<Vec<_>>>()?;
    let labels = if has_labels {
        Some((0..n).map(|_| r.u32("label")).collect::<Result<Vec<_>>>()?)
    } else {
        None
    };
    PointCloud::new(coords, channels, c, labels)
}

pub fn load_point_cloud(path: &Path, format: PointFormat) -> Result<PointCloud> {
    let with_path = |e: Error| match e {
        Error::Parse { location, message } => Error::parse(format!("{}: {location}", path.display()), message),
        other => other,
    };
    match format {
        PointFormat::Text => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            decode_text(&text).map_err(with_path)
        }
        PointFormat::Binary => {
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            decode_binary(&bytes).map_err(with_path)
        }
    }
}

pub fn save_point_cloud(cloud: &PointCloud, path: &Path, format: PointFormat) -> Result<()> {
    if cloud.len() > u32::MAX as usize {
        invalid!("cloud too large for the point file formats");
    }
    let bytes = match format {
        PointFormat::Text => encode_text(cloud).into_bytes(),
        PointFormat::Binary => encode_binary(cloud),
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn f32_cloud(n: usize, c: usize, labelled: bool, seed: u64) -> PointCloud {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        // eighths below 1000 are exact in f32 and in 9 significant digits
        let mut v = || f64::from(rng.random_range(-8000i32..8000)) / 8.0;
        let coords = (0..n).map(|_| [v(), v(), v()]).collect();
        let ch = (0..n * c).map(|_| v()).collect();
        let labels = labelled.then(|| (0..n as u32).map(|i| i * 7 % 5).collect());
        PointCloud::new(coords, ch, c, labels).unwrap()
    }

    #[test]
    fn minimal_text_file() {
        let c = decode_text("AGCNPTS 1 0 0\n1.5 -2 3e-1\n").unwrap();
        assert_eq!(c.coords(), &[[1.5, -2.0, 0.3]]);
        assert_eq!(c.num_channels(), 0);
        assert!(c.labels().is_none());
    }

    #[test]
    fn round_trips_are_exact() {
        let dir = tempfile::tempdir().unwrap();
        for (c, labelled) in [(0, false), (3, true), (2, false)] {
            let cloud = f32_cloud(50, c, labelled, c as u64);
            for fmt in [PointFormat::Text, PointFormat::Binary] {
                let path = dir.path().join(format!("p.{}", fmt.extension()));
                save_point_cloud(&cloud, &path, fmt).unwrap();
                assert_eq!(load_point_cloud(&path, PointFormat::from_path(&path)).unwrap(), cloud);
            }
        }
    }

    #[test]
    fn binary_starts_with_magic() {
        let bytes = encode_binary(&f32_cloud(3, 0, false, 1));
        assert_eq!(&bytes[..8], b"AGCNPBIN");
        assert_eq!(bytes.len(), 24 + 3 * 3 * 4);
    }

    #[test]
    fn short_file_names_missing_row() {
        let text = "AGCNPTS 5 0 0\n0 0 0\n1 1 1\n2 2 2\n3 3 3\n";
        let err = decode_text(text).unwrap_err().to_string();
        assert!(err.contains("row 5"), "{err}");
    }

    #[test]
    fn rejects_malformed_text() {
        assert!(decode_text("").is_err());
        assert!(decode_text("PTS 1 0 0\n0 0 0").is_err());
        assert!(decode_text("AGCNPTS 1 0 2\n0 0 0").is_err());
        assert!(decode_text("AGCNPTS 1 0 0\n0 0 nan").unwrap_err().to_string().contains("row 1"));
        assert!(decode_text("AGCNPTS 1 0 0\n0 0 inf").is_err());
        assert!(decode_text("AGCNPTS 1 1 0\n0 0 0").is_err());
        assert!(decode_text("AGCNPTS 1 0 0\n0 0 0\n1 1 1").is_err());
        assert!(decode_text("AGCNPTS 1 0 1\n0 0 0 -1").is_err());
        assert!(decode_text("AGCNPTS 0 0 0\n").is_err());
    }

    #[test]
    fn rejects_malformed_binary() {
        let good = encode_binary(&f32_cloud(2, 1, true, 3));
        assert!(decode_binary(&good[..good.len() - 1]).is_err());
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(decode_binary(&bad).is_err());
        let mut nan = good.clone();
        nan[24..28].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(decode_binary(&nan).unwrap_err().to_string().contains("offset 24"));
        let mut extra = good;
        extra.push(0);
        assert!(decode_binary(&extra).is_err());
    }

    proptest! {
        #[test]
        fn text_keeps_nine_significant_digits(x in -1e6f64..1e6, y in -1.0f64..1.0, z in 1e-8f64..1e-3) {
            let cloud = PointCloud::from_coords(vec![[x, y, z]]).unwrap();
            let back = decode_text(&encode_text(&cloud)).unwrap();
            for (a, b) in cloud.coords()[0].iter().zip(&back.coords()[0]) {
                prop_assert!((a - b).abs() <= a.abs() * 5e-9);
            }
        }
    }
}
