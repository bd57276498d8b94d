//! Kernel regions (offset sets) and kernel maps pairing input rows with
//! output rows per offset.

use std::fmt::Write as _;

use crate::coords::{check_dimension, CoordinateMap};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KernelShape {
    Hypercube,
    Hypercross,
    /// Full cube over the leading spatial axes at temporal offset 0, plus a
    /// cross along the last (temporal) axis.
    Hybrid,
    Custom,
}

impl std::str::FromStr for KernelShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hypercube" | "cube" | "tesseract" => Ok(Self::Hypercube),
            "hypercross" | "cross" => Ok(Self::Hypercross),
            "hybrid" => Ok(Self::Hybrid),
            "custom" => Ok(Self::Custom),
            other => Err(Error::InvalidKernel(format!("unknown kernel shape `{other}`"))),
        }
    }
}

/// An ordered set of integer offsets defining a kernel's footprint.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct KernelRegion {
    dimension: usize,
    shape: KernelShape,
    size: Vec<u32>,
    dilation: Vec<u32>,
    offsets: Vec<i32>,
}

/// Build one of the built-in kernel shapes. Offsets come out in
/// lexicographic order (first axis most significant).
pub fn enumerate_offsets(
    shape: KernelShape,
    size: &[u32],
    dimension: usize,
    dilation: &[u32],
) -> Result<KernelRegion> {
    check_dimension(dimension)?;
    if shape == KernelShape::Custom {
        return Err(Error::InvalidKernel(
            "custom regions take explicit offsets".into(),
        ));
    }
    for (what, v) in [("size", size), ("dilation", dilation)] {
        if v.len() != dimension {
            return Err(Error::InvalidKernel(format!(
                "{what} has {} axes, expected {dimension}",
                v.len()
            )));
        }
    }
    if let Some(&k) = size.iter().find(|&&k| k == 0 || k % 2 == 0) {
        return Err(Error::InvalidKernel(format!(
            "built-in kernels need odd positive sizes, got {k}"
        )));
    }
    if dilation.contains(&0) {
        return Err(Error::InvalidKernel("dilation must be positive".into()));
    }
    if shape == KernelShape::Hybrid && dimension < 2 {
        return Err(Error::InvalidKernel(
            "hybrid kernels need at least one spatial and one temporal axis".into(),
        ));
    }

    let radius: Vec<i32> = size.iter().map(|&k| (k as i32 - 1) / 2).collect();
    let last = dimension - 1;
    let keep = |o: &[i32]| -> bool {
        match shape {
            KernelShape::Hypercube | KernelShape::Custom => true,
            KernelShape::Hypercross => o.iter().filter(|&&v| v != 0).count() <= 1,
            KernelShape::Hybrid => o[last] == 0 || o[..last].iter().all(|&v| v == 0),
        }
    };

    let mut offsets = Vec::new();
    let mut cursor: Vec<i32> = radius.iter().map(|r| -r).collect();
    'outer: loop {
        if keep(&cursor) {
            offsets.extend(cursor.iter().zip(dilation).map(|(v, d)| v * *d as i32));
        }
        for axis in (0..dimension).rev() {
            if cursor[axis] < radius[axis] {
                cursor[axis] += 1;
                continue 'outer;
            }
            cursor[axis] = -radius[axis];
        }
        break;
    }

    Ok(KernelRegion {
        dimension,
        shape,
        size: size.to_vec(),
        dilation: dilation.to_vec(),
        offsets,
    })
}

impl KernelRegion {
    pub fn hypercube(dimension: usize, size: u32) -> Result<Self> {
        enumerate_offsets(
            KernelShape::Hypercube,
            &vec![size; dimension],
            dimension,
            &vec![1; dimension],
        )
    }

    pub fn hypercross(dimension: usize, size: u32) -> Result<Self> {
        enumerate_offsets(
            KernelShape::Hypercross,
            &vec![size; dimension],
            dimension,
            &vec![1; dimension],
        )
    }

    /// `spatial` sizes for the leading axes, `temporal` for the last one.
    pub fn hybrid(spatial: &[u32], temporal: u32) -> Result<Self> {
        let mut size = spatial.to_vec();
        size.push(temporal);
        let d = size.len();
        enumerate_offsets(KernelShape::Hybrid, &size, d, &vec![1; d])
    }

    /// Arbitrary distinct offsets, kept in the given order.
    pub fn custom(dimension: usize, offsets: Vec<i32>) -> Result<Self> {
        check_dimension(dimension)?;
        if offsets.is_empty() || !offsets.len().is_multiple_of(dimension) {
            return Err(Error::InvalidKernel(format!(
                "offset buffer of length {} does not hold whole {dimension}-D offsets",
                offsets.len()
            )));
        }
        let mut seen: Vec<&[i32]> = offsets.chunks_exact(dimension).collect();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidKernel("duplicate offsets".into()));
        }
        let mut size = vec![1u32; dimension];
        for o in offsets.chunks_exact(dimension) {
            for (s, v) in size.iter_mut().zip(o) {
                *s = (*s).max(2 * v.unsigned_abs() + 1);
            }
        }
        Ok(Self {
            dimension,
            shape: KernelShape::Custom,
            size,
            dilation: vec![1; dimension],
            offsets,
        })
    }

    /// The `{0, .., stride-1}^D` window: with output stride `stride` times
    /// the input stride, each input row lands in exactly one output row.
    pub fn stride_window(dimension: usize, stride: u32) -> Result<Self> {
        check_dimension(dimension)?;
        if stride == 0 {
            return Err(Error::InvalidKernel("stride must be positive".into()));
        }
        let count = (stride as usize).pow(dimension as u32);
        let mut offsets = Vec::with_capacity(count * dimension);
        for mut n in 0..count {
            let mut o = vec![0i32; dimension];
            for axis in (0..dimension).rev() {
                o[axis] = (n % stride as usize) as i32;
                n /= stride as usize;
            }
            offsets.extend(o);
        }
        Self::custom(dimension, offsets)
    }

    /// Only the zero offset (a pointwise, 1×..×1 kernel).
    pub fn identity(dimension: usize) -> Result<Self> {
        Self::custom(dimension, vec![0; dimension])
    }

    /// Same offsets with offset 0 removed.
    pub fn without_center(&self) -> Result<Self> {
        let offsets: Vec<i32> = self
            .offsets
            .chunks_exact(self.dimension)
            .filter(|o| o.iter().any(|&v| v != 0))
            .flatten()
            .copied()
            .collect();
        let mut region = Self::custom(self.dimension, offsets)?;
        region.size = self.size.clone();
        region.dilation = self.dilation.clone();
        Ok(region)
    }

    /// Every offset negated, order preserved.
    pub fn mirrored(&self) -> Self {
        Self {
            offsets: self.offsets.iter().map(|v| -v).collect(),
            ..self.clone()
        }
    }

    #[inline]
    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn shape(&self) -> KernelShape {
        self.shape
    }

    pub fn size(&self) -> &[u32] {
        &self.size
    }

    pub fn dilation(&self) -> &[u32] {
        &self.dilation
    }

    /// Number of offsets.
    #[inline]
    pub fn volume(&self) -> usize {
        self.offsets.len() / self.dimension
    }

    #[inline]
    pub fn offset(&self, k: usize) -> &[i32] {
        &self.offsets[k * self.dimension..(k + 1) * self.dimension]
    }

    pub fn offsets(&self) -> impl Iterator<Item = &[i32]> {
        self.offsets.chunks_exact(self.dimension)
    }

    pub fn index_of(&self, offset: &[i32]) -> Option<usize> {
        self.offsets().position(|o| o == offset)
    }
}

/// Input/output row lists for one kernel offset.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct OffsetPairs {
    pub input: Vec<u32>,
    pub output: Vec<u32>,
}

impl OffsetPairs {
    pub fn len(&self) -> usize {
        self.input.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input.is_empty()
    }
}

/// `M = {(I_k, O_k)}` over the offsets of a region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelMap {
    dimension: usize,
    offsets: Vec<i32>,
    entries: Vec<OffsetPairs>,
    n_in: usize,
    n_out: usize,
}

/// Rows below this count are mapped on the calling thread.
const PARALLEL_THRESHOLD: usize = 16_384;

/// For every output coordinate `u` and offset `i`, record `(row(u + i·s_in), row(u))`
/// when `u + i·s_in` exists in `c_in`.
pub fn build_kernel_map(
    c_in: &CoordinateMap,
    c_out: &CoordinateMap,
    region: &KernelRegion,
) -> Result<KernelMap> {
    let d = c_in.dimension();
    for got in [c_out.dimension(), region.dimension()] {
        if got != d {
            return Err(Error::DimensionMismatch { expected: d, got });
        }
    }
    let stride = c_in.tensor_stride();
    let scaled: Vec<i64> = (0..region.volume())
        .flat_map(|k| {
            region
                .offset(k)
                .iter()
                .zip(stride)
                .map(|(o, s)| *o as i64 * *s as i64)
        })
        .collect();

    let map_rows = |rows: std::ops::Range<usize>| -> Vec<OffsetPairs> {
        let mut entries = vec![OffsetPairs::default(); region.volume()];
        let mut probe = vec![0i32; d + 1];
        for out_row in rows {
            let key = c_out.key(out_row);
            probe[0] = key[0];
            'offsets: for (k, entry) in entries.iter_mut().enumerate() {
                for axis in 0..d {
                    let v = key[axis + 1] as i64 + scaled[k * d + axis];
                    match i32::try_from(v) {
                        Ok(v) => probe[axis + 1] = v,
                        Err(_) => continue 'offsets,
                    }
                }
                if let Some(in_row) = c_in.lookup_key(&probe) {
                    entry.input.push(in_row as u32);
                    entry.output.push(out_row as u32);
                }
            }
        }
        entries
    };

    let n_out = c_out.len();
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    let entries = if n_out < PARALLEL_THRESHOLD || workers < 2 {
        map_rows(0..n_out)
    } else {
        let chunk = n_out.div_ceil(workers);
        let parts: Vec<Vec<OffsetPairs>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let lo = (w * chunk).min(n_out);
                    let hi = ((w + 1) * chunk).min(n_out);
                    let map_rows = &map_rows;
                    s.spawn(move || map_rows(lo..hi))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("kernel map worker panicked")).collect()
        });
        let mut merged = vec![OffsetPairs::default(); region.volume()];
        for part in parts {
            for (m, p) in merged.iter_mut().zip(part) {
                m.input.extend(p.input);
                m.output.extend(p.output);
            }
        }
        merged
    };

    Ok(KernelMap {
        dimension: d,
        offsets: region.offsets.clone(),
        entries,
        n_in: c_in.len(),
        n_out,
    })
}

/// Map for a transposed convolution reading `coarse` rows and writing `fine`
/// rows: the forward map `fine -> coarse` with its input and output swapped.
pub fn build_transposed_kernel_map(
    coarse: &CoordinateMap,
    fine: &CoordinateMap,
    region: &KernelRegion,
) -> Result<KernelMap> {
    Ok(build_kernel_map(fine, coarse, region)?.transposed())
}

impl KernelMap {
    /// Single-offset map sending input row `r` to output row `target[r]`.
    pub fn from_assignment(dimension: usize, n_out: usize, target: &[u32]) -> Result<Self> {
        let mut pairs = OffsetPairs::default();
        let mut order: Vec<u32> = (0..target.len() as u32).collect();
        order.sort_by_key(|&r| (target[r as usize], r));
        for r in order {
            let t = target[r as usize];
            if t as usize >= n_out {
                return Err(Error::IndexOutOfRange {
                    index: t as usize,
                    len: n_out,
                });
            }
            pairs.input.push(r);
            pairs.output.push(t);
        }
        Ok(Self {
            dimension,
            offsets: vec![0; dimension],
            entries: vec![pairs],
            n_in: target.len(),
            n_out,
        })
    }

    /// Assemble a map from raw parts, validating lengths and bounds.
    pub fn from_parts(
        dimension: usize,
        offsets: Vec<i32>,
        entries: Vec<OffsetPairs>,
        n_in: usize,
        n_out: usize,
    ) -> Result<Self> {
        if dimension == 0 || offsets.len() != entries.len() * dimension {
            return Err(Error::Format("offset count does not match entry count".into()));
        }
        for e in &entries {
            if e.input.len() != e.output.len() {
                return Err(Error::Format("input and output lists differ in length".into()));
            }
            if let Some(&i) = e.input.iter().find(|&&i| i as usize >= n_in) {
                return Err(Error::IndexOutOfRange { index: i as usize, len: n_in });
            }
            if let Some(&o) = e.output.iter().find(|&&o| o as usize >= n_out) {
                return Err(Error::IndexOutOfRange { index: o as usize, len: n_out });
            }
        }
        Ok(Self {
            dimension,
            offsets,
            entries,
            n_in,
            n_out,
        })
    }

    /// Swap the role of inputs and outputs.
    pub fn transposed(&self) -> Self {
        Self {
            dimension: self.dimension,
            offsets: self.offsets.clone(),
            entries: self
                .entries
                .iter()
                .map(|e| OffsetPairs {
                    input: e.output.clone(),
                    output: e.input.clone(),
                })
                .collect(),
            n_in: self.n_out,
            n_out: self.n_in,
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn volume(&self) -> usize {
        self.entries.len()
    }

    pub fn offset(&self, k: usize) -> &[i32] {
        &self.offsets[k * self.dimension..(k + 1) * self.dimension]
    }

    pub fn entries(&self) -> &[OffsetPairs] {
        &self.entries
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    pub fn pair_count(&self) -> usize {
        self.entries.iter().map(OffsetPairs::len).sum()
    }

    /// Number of inputs feeding each output row, across all offsets.
    pub fn fan_in(&self) -> Vec<u32> {
        let mut counts = vec![0u32; self.n_out];
        for e in &self.entries {
            for &o in &e.output {
                counts[o as usize] += 1;
            }
        }
        counts
    }

    /// Diagnostic text: a header line, then per offset an `offset` line
    /// followed by one `input output` pair per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "kernel_map dimension={} offsets={} inputs={} outputs={}",
            self.dimension,
            self.volume(),
            self.n_in,
            self.n_out
        );
        for (k, e) in self.entries.iter().enumerate() {
            s.push_str("offset");
            for v in self.offset(k) {
                let _ = write!(s, " {v}");
            }
            let _ = writeln!(s, " pairs={}", e.len());
            for (i, o) in e.input.iter().zip(&e.output) {
                let _ = writeln!(s, "{i} {o}");
            }
        }
        s
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Format("empty kernel map".into()))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some("kernel_map") {
            return Err(Error::Format("missing `kernel_map` header".into()));
        }
        let mut get = |name: &str| -> Result<usize> {
            let field = fields
                .next()
                .ok_or_else(|| Error::Format(format!("header lacks `{name}`")))?;
            field
                .strip_prefix(name)
                .and_then(|r| r.strip_prefix('='))
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Format(format!("bad header field `{field}`")))
        };
        let dimension = get("dimension")?;
        let volume = get("offsets")?;
        let n_in = get("inputs")?;
        let n_out = get("outputs")?;
        check_dimension(dimension).map_err(|e| Error::Format(e.to_string()))?;

        let mut offsets = Vec::new();
        let mut entries = Vec::new();
        for _ in 0..volume {
            let line = lines
                .next()
                .ok_or_else(|| Error::Format("truncated kernel map".into()))?;
            let tokens: Vec<&str> = line.split_whitespace().collect();
            if tokens.len() != dimension + 2 || tokens[0] != "offset" {
                return Err(Error::Format(format!("bad offset line `{line}`")));
            }
            for t in &tokens[1..=dimension] {
                offsets.push(
                    t.parse::<i32>()
                        .map_err(|_| Error::Format(format!("bad offset component `{t}`")))?,
                );
            }
            let count: usize = tokens[dimension + 1]
                .strip_prefix("pairs=")
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Format(format!("bad pair count in `{line}`")))?;
            let mut pairs = OffsetPairs::default();
            for _ in 0..count {
                let line = lines
                    .next()
                    .ok_or_else(|| Error::Format("truncated pair list".into()))?;
                let mut it = line.split_whitespace().map(str::parse::<u32>);
                match (it.next(), it.next(), it.next()) {
                    (Some(Ok(i)), Some(Ok(o)), None) => {
                        pairs.input.push(i);
                        pairs.output.push(o);
                    }
                    _ => return Err(Error::Format(format!("bad pair line `{line}`"))),
                }
            }
            entries.push(pairs);
        }
        if lines.next().is_some() {
            return Err(Error::Format("trailing data after kernel map".into()));
        }
        Self::from_parts(dimension, offsets, entries, n_in, n_out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn grid(n: i32) -> CoordinateMap {
        let mut keys = Vec::new();
        for x in 0..n {
            for y in 0..n {
                keys.extend([0, x, y]);
            }
        }
        CoordinateMap::unit_stride(2, keys).unwrap()
    }

    #[test]
    fn cardinalities() {
        assert_eq!(KernelRegion::hypercube(4, 5).unwrap().volume(), 625);
        assert_eq!(KernelRegion::hypercube(3, 5).unwrap().volume(), 125);
        assert_eq!(KernelRegion::hypercross(3, 3).unwrap().volume(), 7);
        assert_eq!(KernelRegion::hypercross(2, 5).unwrap().volume(), 9);
        assert_eq!(KernelRegion::hybrid(&[3, 3, 3], 3).unwrap().volume(), 29);
        assert_eq!(KernelRegion::hybrid(&[5, 5, 5], 3).unwrap().volume(), 127);
    }

    #[test]
    fn hybrid_is_union_of_cube_and_temporal_cross() {
        let hybrid = KernelRegion::hybrid(&[3, 3, 3], 3).unwrap();
        let cube = KernelRegion::hypercube(3, 3).unwrap();
        let mut expected: BTreeSet<Vec<i32>> =
            cube.offsets().map(|o| [o, &[0]].concat()).collect();
        expected.insert(vec![0, 0, 0, -1]);
        expected.insert(vec![0, 0, 0, 1]);
        let got: BTreeSet<Vec<i32>> = hybrid.offsets().map(<[i32]>::to_vec).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn offsets_are_lexicographic_and_dilated() {
        let r = enumerate_offsets(KernelShape::Hypercube, &[3], 1, &[2]).unwrap();
        assert_eq!(r.offsets().collect::<Vec<_>>(), vec![&[-2][..], &[0], &[2]]);
        let r = KernelRegion::hypercube(2, 3).unwrap();
        let v: Vec<&[i32]> = r.offsets().collect();
        let mut sorted = v.clone();
        sorted.sort();
        assert_eq!(v, sorted);
        assert!(r.index_of(&[0, 0]).is_some());
    }

    #[test]
    fn rejects_bad_kernels() {
        assert!(KernelRegion::hypercube(3, 2).is_err());
        assert!(KernelRegion::hypercube(3, 0).is_err());
        assert!(enumerate_offsets(KernelShape::Hypercube, &[3, 3], 3, &[1, 1, 1]).is_err());
        assert!(enumerate_offsets(KernelShape::Hybrid, &[3], 1, &[1]).is_err());
        assert!(KernelRegion::custom(2, vec![0, 0, 0, 0]).is_err());
        assert!(KernelRegion::custom(2, vec![0, 0, 1]).is_err());
    }

    #[test]
    fn stride_window_covers_block() {
        let w = KernelRegion::stride_window(3, 2).unwrap();
        assert_eq!(w.volume(), 8);
        assert_eq!(w.offset(7), &[1, 1, 1]);
    }

    #[test]
    fn isolated_point_maps_to_itself() {
        let c = CoordinateMap::unit_stride(3, vec![0, 4, 4, 4]).unwrap();
        let region = KernelRegion::hypercube(3, 3).unwrap();
        let m = build_kernel_map(&c, &c, &region).unwrap();
        assert_eq!(m.pair_count(), 1);
        let center = region.index_of(&[0, 0, 0]).unwrap();
        assert_eq!(m.entries()[center].input, vec![0]);
    }

    #[test]
    fn full_grid_pair_count() {
        let c = grid(4);
        let m = build_kernel_map(&c, &c, &KernelRegion::hypercube(2, 3).unwrap()).unwrap();
        assert_eq!(m.pair_count(), 100);
        let fan = m.fan_in();
        assert_eq!(fan[0], 4);
        assert_eq!(fan[c.lookup_key(&[0, 1, 1]).unwrap()], 9);
    }

    #[test]
    fn kernel_map_pairs_satisfy_offset_relation() {
        let c_in = grid(5);
        let c_out = crate::coords::stride_coordinates(&c_in, &[2, 2]).unwrap();
        let region = KernelRegion::hypercube(2, 3).unwrap();
        let m = build_kernel_map(&c_in, &c_out, &region).unwrap();
        for (k, e) in m.entries().iter().enumerate() {
            for (&i, &o) in e.input.iter().zip(&e.output) {
                let u = c_out.spatial(o as usize);
                let v = c_in.spatial(i as usize);
                for axis in 0..2 {
                    assert_eq!(v[axis], u[axis] + region.offset(k)[axis]);
                }
            }
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let a = grid(2);
        let b = CoordinateMap::unit_stride(3, vec![0, 0, 0, 0]).unwrap();
        assert!(build_kernel_map(&a, &b, &KernelRegion::hypercube(2, 3).unwrap()).is_err());
        assert!(build_kernel_map(&a, &a, &KernelRegion::hypercube(3, 3).unwrap()).is_err());
    }

    #[test]
    fn text_round_trip_and_rejection() {
        let c = grid(3);
        let m = build_kernel_map(&c, &c, &KernelRegion::hypercross(2, 3).unwrap()).unwrap();
        let parsed = KernelMap::parse_text(&m.to_text()).unwrap();
        assert_eq!(parsed, m);
        assert!(KernelMap::parse_text("kernel_map dimension=1 offsets=1 inputs=1 outputs=1\noffset 0 pairs=1\n0 5\n").is_err());
        assert!(KernelMap::parse_text("").is_err());
    }

    #[test]
    fn parallel_build_matches_sequential_order() {
        let mut keys = Vec::new();
        for x in 0..220 {
            for y in 0..120 {
                if (x * 7 + y * 3) % 5 != 0 {
                    keys.extend([0, x, y]);
                }
            }
        }
        let c = CoordinateMap::unit_stride(2, keys).unwrap();
        assert!(c.len() >= PARALLEL_THRESHOLD);
        let region = KernelRegion::hypercube(2, 3).unwrap();
        let m = build_kernel_map(&c, &c, &region).unwrap();
        for e in m.entries() {
            assert!(e.output.windows(2).all(|w| w[0] < w[1]));
        }
        let center = region.index_of(&[0, 0]).unwrap();
        assert_eq!(m.entries()[center].len(), c.len());
    }
}
