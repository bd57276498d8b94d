//! `SPG1` point-cloud files.
//!
//! Binary layout (little-endian):
//!
//! ```text
//! "SPG1" | u32 D | u32 Nf | u32 has_labels | u64 N
//! N × ( D × f32 position | Nf × f32 feature | i32 label if has_labels )
//! ```
//!
//! The text variant starts with a header line `SPG1-TEXT D Nf has_labels`
//! followed by one whitespace-separated point per line. Blank lines and lines
//! starting with `#` are skipped.

use std::fmt::Write as _;
use std::path::Path;

use crate::coords::{SparseTensor, MAX_DIMENSION};
use crate::error::{Error, Result};
use crate::matrix::Scalar;

pub const POINTS_MAGIC: &[u8; 4] = b"SPG1";
pub const TEXT_HEADER: &str = "SPG1-TEXT";

const MAX_FEATURES: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub dimension: usize,
    pub n_features: usize,
    /// Row-major `N × dimension`.
    pub positions: Vec<f32>,
    /// Row-major `N × n_features`.
    pub features: Vec<f32>,
    pub labels: Option<Vec<i32>>,
}

impl PointCloud {
    pub fn new(
        dimension: usize,
        n_features: usize,
        positions: Vec<f32>,
        features: Vec<f32>,
        labels: Option<Vec<i32>>,
    ) -> Result<Self> {
        if dimension == 0 || dimension > MAX_DIMENSION {
            return Err(Error::UnsupportedDimension(dimension));
        }
        let n = positions.len() / dimension;
        if !positions.len().is_multiple_of(dimension) {
            return Err(Error::Format(format!(
                "{} position values is not a multiple of D={dimension}",
                positions.len()
            )));
        }
        if features.len() != n * n_features {
            return Err(Error::ShapeMismatch {
                what: "point features".into(),
                expected: vec![n, n_features],
                got: vec![features.len()],
            });
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::ShapeMismatch {
                    what: "point labels".into(),
                    expected: vec![n],
                    got: vec![l.len()],
                });
            }
        }
        Ok(Self {
            dimension,
            n_features,
            positions,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len() / self.dimension
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn position(&self, i: usize) -> &[f32] {
        &self.positions[i * self.dimension..(i + 1) * self.dimension]
    }

    pub fn feature(&self, i: usize) -> &[f32] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn positions_f64(&self) -> Vec<f64> {
        self.positions.iter().map(|&v| v as f64).collect()
    }

    pub fn features_f64(&self) -> Vec<f64> {
        self.features.iter().map(|&v| v as f64).collect()
    }
}

pub fn encode_points(cloud: &PointCloud) -> Vec<u8> {
    let n = cloud.len();
    let rec = 4 * (cloud.dimension + cloud.n_features + cloud.labels.is_some() as usize);
    let mut out = Vec::with_capacity(24 + n * rec);
    out.extend_from_slice(POINTS_MAGIC);
    out.extend_from_slice(&(cloud.dimension as u32).to_le_bytes());
    out.extend_from_slice(&(cloud.n_features as u32).to_le_bytes());
    out.extend_from_slice(&(cloud.labels.is_some() as u32).to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    for i in 0..n {
        for v in cloud.position(i).iter().chain(cloud.feature(i)) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(l) = &cloud.labels {
            out.extend_from_slice(&l[i].to_le_bytes());
        }
    }
    out
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes(b.try_into().unwrap())
}

pub fn decode_points(bytes: &[u8]) -> Result<PointCloud> {
    if bytes.len() < 24 || &bytes[..4] != POINTS_MAGIC {
        return Err(Error::Format("not an SPG1 point file".into()));
    }
    let dimension = le_u32(&bytes[4..8]) as usize;
    let n_features = le_u32(&bytes[8..12]) as usize;
    let has_labels = match le_u32(&bytes[12..16]) {
        0 => false,
        1 => true,
        v => return Err(Error::Format(format!("has_labels flag is {v}"))),
    };
    let n = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    if dimension == 0 || dimension > MAX_DIMENSION {
        return Err(Error::UnsupportedDimension(dimension));
    }
    if n_features > MAX_FEATURES {
        return Err(Error::Format(format!("{n_features} features per point")));
    }
    let rec = 4 * (dimension + n_features + has_labels as usize);
    let body = &bytes[24..];
    let expected = usize::try_from(n)
        .ok()
        .and_then(|n| n.checked_mul(rec))
        .ok_or_else(|| Error::Format(format!("point count {n} too large")))?;
    if body.len() != expected {
        return Err(Error::Format(format!(
            "expected {expected} bytes of point records, found {}",
            body.len()
        )));
    }
    let n = n as usize;
    let mut positions = Vec::with_capacity(n * dimension);
    let mut features = Vec::with_capacity(n * n_features);
    let mut labels = has_labels.then(|| Vec::with_capacity(n));
    for r in body.chunks_exact(rec.max(1)).take(n) {
        let mut words = r.chunks_exact(4);
        positions.extend(words.by_ref().take(dimension).map(|w| f32::from_le_bytes(w.try_into().unwrap())));
        features.extend(words.by_ref().take(n_features).map(|w| f32::from_le_bytes(w.try_into().unwrap())));
        if let Some(l) = &mut labels {
            l.push(i32::from_le_bytes(words.next().unwrap().try_into().unwrap()));
        }
    }
    PointCloud::new(dimension, n_features, positions, features, labels)
}

pub fn points_to_text(cloud: &PointCloud) -> String {
    let mut s = format!(
        "{TEXT_HEADER} {} {} {}\n",
        cloud.dimension,
        cloud.n_features,
        cloud.labels.is_some() as u8
    );
    for i in 0..cloud.len() {
        let vals: Vec<String> = cloud
            .position(i)
            .iter()
            .chain(cloud.feature(i))
            .map(|v| v.to_string())
            .collect();
        s.push_str(&vals.join(" "));
        if let Some(l) = &cloud.labels {
            let _ = write!(s, " {}", l[i]);
        }
        s.push('\n');
    }
    s
}

pub fn parse_points_text(text: &str) -> Result<PointCloud> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Format("empty point text".into()))?;
    let h: Vec<&str> = header.split_whitespace().collect();
    if h.len() != 4 || h[0] != TEXT_HEADER {
        return Err(Error::Format(format!(
            "expected `{TEXT_HEADER} D Nf has_labels` header, found `{header}`"
        )));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad header field `{s}`")))
    };
    let (dimension, n_features) = (num(h[1])?, num(h[2])?);
    let has_labels = match h[3] {
        "0" => false,
        "1" => true,
        v => return Err(Error::Format(format!("has_labels flag is `{v}`"))),
    };
    if dimension == 0 || dimension > MAX_DIMENSION {
        return Err(Error::UnsupportedDimension(dimension));
    }
    if n_features > MAX_FEATURES {
        return Err(Error::Format(format!("{n_features} features per point")));
    }
    let width = dimension + n_features + has_labels as usize;
    let mut positions = Vec::new();
    let mut features = Vec::new();
    let mut labels = has_labels.then(Vec::new);
    for (lineno, line) in lines {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != width {
            return Err(Error::Format(format!(
                "line {lineno}: expected {width} fields, found {}",
                fields.len()
            )));
        }
        for (k, f) in fields.iter().enumerate() {
            if k < dimension + n_features {
                let v: f32 = f
                    .parse()
                    .map_err(|_| Error::Format(format!("line {lineno}: bad number `{f}`")))?;
                if k < dimension {
                    positions.push(v);
                } else {
                    features.push(v);
                }
            } else if let Some(l) = &mut labels {
                l.push(
                    f.parse()
                        .map_err(|_| Error::Format(format!("line {lineno}: bad label `{f}`")))?,
                );
            }
        }
    }
    PointCloud::new(dimension, n_features, positions, features, labels)
}

/// Read either the binary or the text variant, chosen by the leading bytes.
/// Anything not starting with the binary magic is parsed as text.
pub fn read_points(path: &Path) -> Result<PointCloud> {
    let bytes = std::fs::read(path)?;
    if !bytes.starts_with(POINTS_MAGIC) || bytes.starts_with(TEXT_HEADER.as_bytes()) {
        let text = std::str::from_utf8(&bytes).map_err(|_| Error::Format("point text is not utf-8".into()))?;
        parse_points_text(text)
    } else {
        decode_points(&bytes)
    }
}

pub fn write_points(path: &Path, cloud: &PointCloud) -> Result<()> {
    std::fs::write(path, encode_points(cloud))?;
    Ok(())
}

/// Text dump of a sparse tensor: spatial coordinates followed by features,
/// one row per line, each batch introduced by a `# batch b` comment.
pub fn tensor_to_text<T: Scalar>(tensor: &SparseTensor<T>) -> String {
    let coords = tensor.coords();
    let f = tensor.features();
    let mut s = format!("{TEXT_HEADER} {} {} 0\n", coords.dimension(), f.cols());
    let mut current = None;
    for r in 0..coords.len() {
        let b = coords.batch(r);
        if current != Some(b) {
            let _ = writeln!(s, "# batch {b}");
            current = Some(b);
        }
        let mut vals: Vec<String> = coords.spatial(r).iter().map(|v| v.to_string()).collect();
        vals.extend(f.row(r).iter().map(|v| v.to_f64().to_string()));
        s.push_str(&vals.join(" "));
        s.push('\n');
    }
    s
}
