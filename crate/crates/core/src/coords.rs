//! Batch-augmented integer coordinates, the coordinate hash map, point-cloud
//! quantization and coordinate striding.
//!
//! A coordinate is stored as a key `[batch, x_0, .., x_{D-1}]`. Keys order
//! lexicographically, which gives the `(batch, spatial)` row order used by every
//! map produced in this module.

use std::cmp::Ordering;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::matrix::{Matrix, Scalar};

/// Label assigned to voxels whose points disagree on their class.
pub const IGNORE_LABEL: i32 = -1;

/// Largest supported number of spatial axes.
pub const MAX_DIMENSION: usize = 7;

const EMPTY_SLOT: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Coordinate {
    pub batch: u32,
    pub spatial: Vec<i32>,
}

impl Coordinate {
    pub fn new(batch: u32, spatial: impl Into<Vec<i32>>) -> Self {
        Self {
            batch,
            spatial: spatial.into(),
        }
    }

    pub fn dimension(&self) -> usize {
        self.spatial.len()
    }

    fn key(&self) -> Vec<i32> {
        let mut key = Vec::with_capacity(self.spatial.len() + 1);
        key.push(self.batch as i32);
        key.extend_from_slice(&self.spatial);
        key
    }
}

/// 64-bit hash of a coordinate. Collisions are allowed; maps verify full keys.
pub fn hash_coordinate(c: &Coordinate) -> u64 {
    hash_key(&c.key())
}

#[inline]
pub(crate) fn hash_key(key: &[i32]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15 ^ key.len() as u64;
    for &v in key {
        h ^= v as u32 as u64;
        h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h ^= h >> 31;
    }
    // splitmix64 finalizer
    h ^= h >> 30;
    h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94D0_49BB_1331_11EB);
    h ^ (h >> 31)
}

pub(crate) type KeyHasher = fn(&[i32]) -> u64;

/// Immutable map from coordinate to dense row index.
///
/// Built once, then read-only; lookups probe an open-addressing table and
/// compare the full key, so results never depend on hash quality.
#[derive(Clone)]
pub struct CoordinateMap {
    dimension: usize,
    tensor_stride: Vec<u32>,
    keys: Vec<i32>,
    slots: Vec<u32>,
    hasher: KeyHasher,
}

impl std::fmt::Debug for CoordinateMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CoordinateMap")
            .field("dimension", &self.dimension)
            .field("tensor_stride", &self.tensor_stride)
            .field("len", &self.len())
            .finish()
    }
}

impl PartialEq for CoordinateMap {
    fn eq(&self, other: &Self) -> bool {
        self.dimension == other.dimension
            && self.tensor_stride == other.tensor_stride
            && self.keys == other.keys
    }
}

impl CoordinateMap {
    /// Build a map that keeps the row order of `keys` (flat `[batch, spatial..]`
    /// records). Duplicates and off-stride coordinates are rejected.
    pub fn from_keys(dimension: usize, tensor_stride: Vec<u32>, keys: Vec<i32>) -> Result<Self> {
        Self::build(dimension, tensor_stride, keys, hash_key)
    }

    pub fn from_coordinates(
        dimension: usize,
        tensor_stride: Vec<u32>,
        coords: &[Coordinate],
    ) -> Result<Self> {
        let mut keys = Vec::with_capacity(coords.len() * (dimension + 1));
        for c in coords {
            if c.dimension() != dimension {
                return Err(Error::DimensionMismatch {
                    expected: dimension,
                    got: c.dimension(),
                });
            }
            keys.extend(c.key());
        }
        Self::from_keys(dimension, tensor_stride, keys)
    }

    /// Sort keys lexicographically, drop duplicates, then build.
    pub fn from_keys_sorted(
        dimension: usize,
        tensor_stride: Vec<u32>,
        keys: Vec<i32>,
    ) -> Result<Self> {
        let width = dimension + 1;
        let mut records: Vec<&[i32]> = keys.chunks_exact(width).collect();
        records.sort_unstable();
        records.dedup();
        let sorted: Vec<i32> = records.concat();
        Self::from_keys(dimension, tensor_stride, sorted)
    }

    /// A map with unit tensor stride.
    pub fn unit_stride(dimension: usize, keys: Vec<i32>) -> Result<Self> {
        Self::from_keys(dimension, vec![1; dimension], keys)
    }

    pub(crate) fn build(
        dimension: usize,
        tensor_stride: Vec<u32>,
        keys: Vec<i32>,
        hasher: KeyHasher,
    ) -> Result<Self> {
        check_dimension(dimension)?;
        if tensor_stride.len() != dimension {
            return Err(Error::DimensionMismatch {
                expected: dimension,
                got: tensor_stride.len(),
            });
        }
        if tensor_stride.contains(&0) {
            return Err(Error::InvalidArgument("tensor stride must be positive".into()));
        }
        let width = dimension + 1;
        if !keys.len().is_multiple_of(width) {
            return Err(Error::Format(format!(
                "key buffer length {} is not a multiple of {width}",
                keys.len()
            )));
        }
        let n = keys.len() / width;
        if n >= EMPTY_SLOT as usize {
            return Err(Error::InvalidArgument("too many coordinates".into()));
        }
        for (row, key) in keys.chunks_exact(width).enumerate() {
            if key[0] < 0 {
                return Err(Error::InvalidArgument(format!("row {row}: negative batch index")));
            }
            for (d, &v) in key[1..].iter().enumerate() {
                if v.rem_euclid(tensor_stride[d] as i32) != 0 {
                    return Err(Error::StrideViolation {
                        row,
                        stride: tensor_stride,
                    });
                }
            }
        }
        let capacity = (n * 2).next_power_of_two().max(16);
        let mut map = Self {
            dimension,
            tensor_stride,
            keys,
            slots: vec![EMPTY_SLOT; capacity],
            hasher,
        };
        let mask = capacity - 1;
        for row in 0..n {
            let key = map.key(row);
            let mut slot = (hasher)(key) as usize & mask;
            loop {
                let occupant = map.slots[slot];
                if occupant == EMPTY_SLOT {
                    break;
                }
                if map.key(occupant as usize) == key {
                    return Err(Error::DuplicateCoordinate(row));
                }
                slot = (slot + 1) & mask;
            }
            map.slots[slot] = row as u32;
        }
        Ok(map)
    }

    #[inline]
    pub fn dimension(&self) -> usize {
        self.dimension
    }

    #[inline]
    pub fn tensor_stride(&self) -> &[u32] {
        &self.tensor_stride
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.keys.len() / (self.dimension + 1)
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Raw `[batch, spatial..]` key of `row`.
    #[inline]
    pub fn key(&self, row: usize) -> &[i32] {
        let w = self.dimension + 1;
        &self.keys[row * w..(row + 1) * w]
    }

    pub fn keys(&self) -> &[i32] {
        &self.keys
    }

    #[inline]
    pub fn batch(&self, row: usize) -> u32 {
        self.key(row)[0] as u32
    }

    #[inline]
    pub fn spatial(&self, row: usize) -> &[i32] {
        &self.key(row)[1..]
    }

    pub fn coordinate(&self, row: usize) -> Coordinate {
        Coordinate::new(self.batch(row), self.spatial(row).to_vec())
    }

    /// One past the largest batch index present (0 when empty).
    pub fn batch_count(&self) -> usize {
        (0..self.len())
            .map(|r| self.batch(r) as usize + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn lookup(&self, c: &Coordinate) -> Option<usize> {
        if c.dimension() != self.dimension {
            return None;
        }
        self.lookup_key(&c.key())
    }

    /// Exact membership query on a raw key.
    #[inline]
    pub fn lookup_key(&self, key: &[i32]) -> Option<usize> {
        if key.len() != self.dimension + 1 {
            return None;
        }
        let mask = self.slots.len() - 1;
        let mut slot = (self.hasher)(key) as usize & mask;
        loop {
            let occupant = self.slots[slot];
            if occupant == EMPTY_SLOT {
                return None;
            }
            if self.key(occupant as usize) == key {
                return Some(occupant as usize);
            }
            slot = (slot + 1) & mask;
        }
    }

    /// True when rows are in strictly increasing lexicographic key order.
    pub fn is_sorted(&self) -> bool {
        (1..self.len()).all(|r| self.key(r - 1).cmp(self.key(r)) == Ordering::Less)
    }

    /// Same coordinates with every spatial component shifted by `delta`.
    pub fn translated(&self, delta: &[i32]) -> Result<Self> {
        if delta.len() != self.dimension {
            return Err(Error::DimensionMismatch {
                expected: self.dimension,
                got: delta.len(),
            });
        }
        let mut keys = self.keys.clone();
        for key in keys.chunks_exact_mut(self.dimension + 1) {
            for (v, d) in key[1..].iter_mut().zip(delta) {
                *v = v.checked_add(*d).ok_or_else(|| {
                    Error::InvalidArgument("translation overflows coordinate domain".into())
                })?;
            }
        }
        Self::from_keys(self.dimension, self.tensor_stride.clone(), keys)
    }
}

pub(crate) fn check_dimension(dimension: usize) -> Result<()> {
    if dimension == 0 || dimension > MAX_DIMENSION {
        return Err(Error::UnsupportedDimension(dimension));
    }
    Ok(())
}

/// Coordinates plus a row-aligned feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseTensor<T = f64> {
    coords: Arc<CoordinateMap>,
    features: Matrix<T>,
}

impl<T: Scalar> SparseTensor<T> {
    pub fn new(coords: Arc<CoordinateMap>, features: Matrix<T>) -> Result<Self> {
        if features.rows() != coords.len() {
            return Err(Error::ShapeMismatch {
                what: "feature rows vs coordinates".into(),
                expected: vec![coords.len()],
                got: vec![features.rows()],
            });
        }
        Ok(Self { coords, features })
    }

    pub fn coords(&self) -> &Arc<CoordinateMap> {
        &self.coords
    }

    pub fn features(&self) -> &Matrix<T> {
        &self.features
    }

    pub fn into_parts(self) -> (Arc<CoordinateMap>, Matrix<T>) {
        (self.coords, self.features)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.features.cols()
    }

    pub fn dimension(&self) -> usize {
        self.coords.dimension()
    }
}

/// How a voxel's feature is chosen from the points falling into it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeatureReduction {
    /// Feature of the first point in input order.
    #[default]
    First,
    Average,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantizeOptions {
    pub voxel_size: f64,
    pub reduction: FeatureReduction,
}

impl QuantizeOptions {
    pub fn new(voxel_size: f64) -> Self {
        Self {
            voxel_size,
            reduction: FeatureReduction::First,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QuantizeResult {
    pub tensor: SparseTensor<f64>,
    /// Per-row label, `IGNORE_LABEL` where points disagree. `None` when no
    /// labels were supplied.
    pub labels: Option<Vec<i32>>,
    /// Row of the voxel each input point fell into.
    pub point_to_row: Vec<u32>,
}

/// Quantize a single-batch point cloud with `floor(p / voxel_size)`.
pub fn quantize(
    points: &Matrix<f64>,
    features: &Matrix<f64>,
    labels: Option<&[i32]>,
    voxel_size: f64,
) -> Result<QuantizeResult> {
    quantize_batched(points, features, labels, None, QuantizeOptions::new(voxel_size))
}

/// Quantize points carrying optional batch indices.
///
/// Points are stably sorted by voxel key, so a voxel's "first" point is the
/// earliest one in input order and rows come out in `(batch, spatial)` order.
pub fn quantize_batched(
    points: &Matrix<f64>,
    features: &Matrix<f64>,
    labels: Option<&[i32]>,
    batches: Option<&[u32]>,
    opts: QuantizeOptions,
) -> Result<QuantizeResult> {
    let dimension = points.cols();
    check_dimension(dimension)?;
    if !(opts.voxel_size > 0.0 && opts.voxel_size.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "voxel size must be positive and finite, got {}",
            opts.voxel_size
        )));
    }
    let n = points.rows();
    if features.rows() != n {
        return Err(Error::ShapeMismatch {
            what: "feature rows vs points".into(),
            expected: vec![n],
            got: vec![features.rows()],
        });
    }
    if let Some(l) = labels {
        if l.len() != n {
            return Err(Error::ShapeMismatch {
                what: "labels vs points".into(),
                expected: vec![n],
                got: vec![l.len()],
            });
        }
    }
    if let Some(b) = batches {
        if b.len() != n {
            return Err(Error::ShapeMismatch {
                what: "batch indices vs points".into(),
                expected: vec![n],
                got: vec![b.len()],
            });
        }
    }

    let width = dimension + 1;
    let mut keys = Vec::with_capacity(n * width);
    for row in 0..n {
        let batch = batches.map_or(0, |b| b[row]);
        if batch > i32::MAX as u32 {
            return Err(Error::InvalidArgument(format!("row {row}: batch index too large")));
        }
        keys.push(batch as i32);
        for &p in points.row(row) {
            if !p.is_finite() {
                return Err(Error::NonFinite { row, what: "point coordinate" });
            }
            let v = (p / opts.voxel_size).floor();
            if !(i32::MIN as f64..=i32::MAX as f64).contains(&v) {
                return Err(Error::CoordinateOverflow { row, value: v });
            }
            keys.push(v as i32);
        }
    }

    let key = |i: usize| &keys[i * width..(i + 1) * width];
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| key(a).cmp(key(b)));

    let nf = features.cols();
    let mut out_keys = Vec::new();
    let mut out_features = Vec::new();
    let mut out_labels = labels.map(|_| Vec::new());
    let mut point_to_row = vec![0u32; n];

    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && key(order[end]) == key(order[start]) {
            end += 1;
        }
        let group = &order[start..end];
        let row = (out_keys.len() / width) as u32;
        out_keys.extend_from_slice(key(group[0]));
        for &p in group {
            point_to_row[p] = row;
        }
        match opts.reduction {
            FeatureReduction::First => out_features.extend_from_slice(features.row(group[0])),
            FeatureReduction::Average => {
                let mut acc = vec![0.0; nf];
                for &p in group {
                    for (a, v) in acc.iter_mut().zip(features.row(p)) {
                        *a += v;
                    }
                }
                let inv = 1.0 / group.len() as f64;
                out_features.extend(acc.into_iter().map(|a| a * inv));
            }
        }
        if let (Some(out), Some(l)) = (out_labels.as_mut(), labels) {
            let first = l[group[0]];
            let agree = group.iter().all(|&p| l[p] == first);
            out.push(if agree { first } else { IGNORE_LABEL });
        }
        start = end;
    }

    let rows = out_keys.len() / width;
    let coords = CoordinateMap::from_keys(dimension, vec![1; dimension], out_keys)?;
    let tensor = SparseTensor::new(Arc::new(coords), Matrix::from_vec(rows, nf, out_features)?)?;
    Ok(QuantizeResult {
        tensor,
        labels: out_labels,
        point_to_row,
    })
}

/// Rounds toward negative infinity.
#[inline]
pub fn floor_div(value: i32, divisor: i32) -> i32 {
    value.div_euclid(divisor)
}

/// Output coordinates of a strided operation: every input coordinate snapped
/// down to a multiple of `tensor_stride * conv_stride`, deduplicated and sorted.
pub fn stride_coordinates(input: &CoordinateMap, conv_stride: &[u32]) -> Result<CoordinateMap> {
    let d = input.dimension();
    if conv_stride.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: conv_stride.len(),
        });
    }
    if conv_stride.contains(&0) {
        return Err(Error::InvalidArgument("convolution stride must be positive".into()));
    }
    let new_stride: Vec<u32> = input
        .tensor_stride()
        .iter()
        .zip(conv_stride)
        .map(|(a, b)| a.checked_mul(*b))
        .collect::<Option<_>>()
        .ok_or_else(|| Error::InvalidArgument("tensor stride overflow".into()))?;
    if conv_stride.iter().all(|&s| s == 1) {
        let mut keys = input.keys().to_vec();
        if !input.is_sorted() {
            return CoordinateMap::from_keys_sorted(d, new_stride, std::mem::take(&mut keys));
        }
        return CoordinateMap::from_keys(d, new_stride, keys);
    }
    let mut keys = Vec::with_capacity(input.keys().len());
    for row in 0..input.len() {
        let key = input.key(row);
        keys.push(key[0]);
        for (axis, &v) in key[1..].iter().enumerate() {
            let s = new_stride[axis] as i64;
            let snapped = (v as i64).div_euclid(s) * s;
            let snapped = i32::try_from(snapped).map_err(|_| Error::CoordinateOverflow {
                row,
                value: snapped as f64,
            })?;
            keys.push(snapped);
        }
    }
    CoordinateMap::from_keys_sorted(d, new_stride, keys)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::{BTreeMap, BTreeSet, HashSet};

    fn pts(rows: &[&[f64]]) -> Matrix<f64> {
        let cols = rows[0].len();
        Matrix::from_vec(rows.len(), cols, rows.concat()).unwrap()
    }

    #[test]
    fn hash_is_deterministic() {
        let c = Coordinate::new(3, vec![1, -2, 7, 0]);
        assert_eq!(hash_coordinate(&c), hash_coordinate(&c.clone()));
    }

    #[test]
    fn colliding_hashes_still_resolve_exactly() {
        fn constant(_: &[i32]) -> u64 {
            42
        }
        let keys = vec![0, 1, 2, 0, 2, 1, 1, 1, 2, 0, -5, 9];
        let map = CoordinateMap::build(2, vec![1, 1], keys, constant).unwrap();
        assert_eq!(map.lookup(&Coordinate::new(0, vec![1, 2])), Some(0));
        assert_eq!(map.lookup(&Coordinate::new(0, vec![2, 1])), Some(1));
        assert_eq!(map.lookup(&Coordinate::new(1, vec![1, 2])), Some(2));
        assert_eq!(map.lookup(&Coordinate::new(0, vec![-5, 9])), Some(3));
        assert_eq!(map.lookup(&Coordinate::new(1, vec![2, 1])), None);
        assert!(matches!(
            CoordinateMap::build(1, vec![1], vec![0, 4, 0, 4], constant),
            Err(Error::DuplicateCoordinate(1))
        ));
    }

    #[test]
    fn million_distinct_coordinates_are_all_stored() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut seen = HashSet::new();
        let mut keys = Vec::new();
        while seen.len() < 1_000_000 {
            let c: [i32; 5] = [
                rng.random_range(0..4),
                rng.random_range(-500..500),
                rng.random_range(-500..500),
                rng.random_range(-500..500),
                rng.random_range(0..8),
            ];
            if seen.insert(c) {
                keys.extend_from_slice(&c);
            }
        }
        let map = CoordinateMap::unit_stride(4, keys).unwrap();
        assert_eq!(map.len(), seen.len());
    }

    #[test]
    fn lookup_hits_every_inserted_row_and_misses_others() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut set = BTreeSet::new();
        while set.len() < 10_000 {
            set.insert([0, rng.random_range(-200..200), rng.random_range(-200..200), rng.random_range(-3..3)]);
        }
        let coords: Vec<[i32; 4]> = set.iter().copied().collect();
        let map = CoordinateMap::unit_stride(3, coords.concat()).unwrap();
        for (row, c) in coords.iter().enumerate() {
            assert_eq!(map.lookup_key(c), Some(row));
        }
        for _ in 0..10_000 {
            let probe = [0, rng.random_range(-300..300), rng.random_range(-300..300), rng.random_range(-5..5)];
            assert_eq!(map.lookup_key(&probe).is_some(), set.contains(&probe));
        }
        assert_eq!(map.lookup(&Coordinate::new(0, vec![9999, 0, 0])), None);
    }

    #[test]
    fn quantize_floors_each_axis() {
        let p = pts(&[&[0.12, 0.34, 0.56]]);
        let f = Matrix::zeros(1, 0);
        let q = quantize(&p, &f, None, 0.1).unwrap();
        assert_eq!(q.tensor.coords().spatial(0), &[1, 3, 5]);
    }

    #[test]
    fn quantize_negative_points_round_down() {
        let p = pts(&[&[-0.05], &[-0.1], &[-0.11]]);
        let q = quantize(&p, &Matrix::zeros(3, 0), None, 0.1).unwrap();
        let got: Vec<i32> = (0..q.tensor.len()).map(|r| q.tensor.coords().spatial(r)[0]).collect();
        assert_eq!(got, vec![-2, -1]);
        assert_eq!(q.point_to_row, vec![1, 1, 0]);
    }

    #[test]
    fn quantize_label_agreement_and_collision() {
        let p = pts(&[&[0.01, 0.01, 0.01], &[0.02, 0.03, 0.04]]);
        let f = pts(&[&[1.0], &[2.0]]);
        let q = quantize(&p, &f, Some(&[2, 2]), 0.1).unwrap();
        assert_eq!(q.tensor.len(), 1);
        assert_eq!(q.labels.as_deref(), Some(&[2][..]));
        assert_eq!(q.tensor.features().row(0), &[1.0]);

        let q = quantize(&p, &f, Some(&[2, 5]), 0.1).unwrap();
        assert_eq!(q.labels.as_deref(), Some(&[IGNORE_LABEL][..]));
    }

    #[test]
    fn quantize_average_reduction() {
        let p = pts(&[&[0.01], &[0.02], &[0.5]]);
        let f = pts(&[&[1.0], &[3.0], &[7.0]]);
        let opts = QuantizeOptions {
            voxel_size: 0.1,
            reduction: FeatureReduction::Average,
        };
        let q = quantize_batched(&p, &f, None, None, opts).unwrap();
        assert_eq!(q.tensor.features().as_slice(), &[2.0, 7.0]);
    }

    #[test]
    fn quantize_empty_and_invalid_inputs() {
        let q = quantize(&Matrix::zeros(0, 3), &Matrix::zeros(0, 2), Some(&[]), 0.5).unwrap();
        assert!(q.tensor.is_empty());
        assert_eq!(q.tensor.channels(), 2);

        let p = pts(&[&[0.0, 0.0], &[f64::NAN, 1.0]]);
        let err = quantize(&p, &Matrix::zeros(2, 0), None, 0.1).unwrap_err();
        assert_eq!(err, Error::NonFinite { row: 1, what: "point coordinate" });

        let p = pts(&[&[1e12]]);
        assert!(matches!(
            quantize(&p, &Matrix::zeros(1, 0), None, 0.1),
            Err(Error::CoordinateOverflow { row: 0, .. })
        ));
        assert!(quantize(&p, &Matrix::zeros(1, 0), None, 0.0).is_err());
    }

    #[test]
    fn quantize_row_count_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = Matrix::from_fn(1000, 3, |_, _| rng.random_range(0.0..1.0));
        let q = quantize(&p, &Matrix::zeros(1000, 0), None, 0.1).unwrap();
        let oracle: BTreeSet<Vec<i64>> = (0..1000)
            .map(|r| p.row(r).iter().map(|v| (v / 0.1).floor() as i64).collect())
            .collect();
        assert_eq!(q.tensor.len(), oracle.len());
        assert!(q.tensor.coords().is_sorted());
    }

    #[test]
    fn batches_never_merge() {
        let p = pts(&[&[0.0, 0.0], &[0.0, 0.0], &[0.0, 0.0]]);
        let opts = QuantizeOptions::new(1.0);
        let q = quantize_batched(&p, &Matrix::zeros(3, 0), Some(&[1, 1, 4]), Some(&[0, 1, 0]), opts)
            .unwrap();
        assert_eq!(q.tensor.len(), 2);
        assert_eq!(q.labels.unwrap(), vec![IGNORE_LABEL, 1]);
        assert_eq!(q.point_to_row, vec![0, 1, 0]);
    }

    #[test]
    fn stride_pairs_with_floor_division() {
        let map = CoordinateMap::unit_stride(1, vec![0, 0, 0, 1, 0, 2, 0, 3]).unwrap();
        let out = stride_coordinates(&map, &[2]).unwrap();
        assert_eq!(out.keys(), &[0, 0, 0, 2]);
        assert_eq!(out.tensor_stride(), &[2]);

        let same = stride_coordinates(&map, &[1]).unwrap();
        assert_eq!(same.keys(), map.keys());
        assert_eq!(same.tensor_stride(), &[1]);

        let neg = CoordinateMap::unit_stride(1, vec![0, -3, 0, -1, 0, 1]).unwrap();
        assert_eq!(stride_coordinates(&neg, &[2]).unwrap().keys(), &[0, -4, 0, -2, 0, 0]);
    }

    #[test]
    fn stride_matches_set_comprehension() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut set = BTreeSet::new();
        while set.len() < 500 {
            set.insert(vec![0, rng.random_range(-40..40), rng.random_range(-40..40), rng.random_range(-40..40)]);
        }
        let map = CoordinateMap::unit_stride(3, set.iter().flatten().copied().collect()).unwrap();
        let out = stride_coordinates(&map, &[4, 4, 4]).unwrap();
        let oracle: BTreeSet<Vec<i32>> = set
            .iter()
            .map(|k| {
                let mut s = vec![k[0]];
                s.extend(k[1..].iter().map(|v| (*v as f64 / 4.0).floor() as i32 * 4));
                s
            })
            .collect();
        let got: BTreeSet<Vec<i32>> = (0..out.len()).map(|r| out.key(r).to_vec()).collect();
        assert_eq!(got, oracle);
        assert!(out.len() <= map.len());
        assert_eq!(out.tensor_stride(), &[4, 4, 4]);
    }

    #[test]
    fn off_stride_coordinates_rejected() {
        assert!(matches!(
            CoordinateMap::from_keys(1, vec![2], vec![0, 3]),
            Err(Error::StrideViolation { row: 0, .. })
        ));
        assert!(CoordinateMap::from_keys(8, vec![1; 8], vec![]).is_err());
    }

    #[test]
    fn labels_set_is_order_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 300;
        let p = Matrix::from_fn(n, 2, |_, _| rng.random_range(0.0..1.0));
        let labels: Vec<i32> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let q1 = quantize(&p, &Matrix::zeros(n, 0), Some(&labels), 0.2).unwrap();
        let perm: Vec<usize> = (0..n).rev().collect();
        let p2 = Matrix::from_fn(n, 2, |r, c| p.get(perm[r], c));
        let l2: Vec<i32> = perm.iter().map(|&i| labels[i]).collect();
        let q2 = quantize(&p2, &Matrix::zeros(n, 0), Some(&l2), 0.2).unwrap();
        let as_map = |q: &QuantizeResult| -> BTreeMap<Vec<i32>, i32> {
            (0..q.tensor.len())
                .map(|r| (q.tensor.coords().key(r).to_vec(), q.labels.as_ref().unwrap()[r]))
                .collect()
        };
        assert_eq!(as_map(&q1), as_map(&q2));
    }
}
