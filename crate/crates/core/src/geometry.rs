//! Axis-aligned 3D boxes in voxel coordinates, physical volume and volume bins.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Millimetres per voxel along x, y, z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[T; 3]", into = "[T; 3]")]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct Spacing<T> {
    mm: [T; 3],
}

impl<T: Scalar> Spacing<T> {
    pub fn new(dx: T, dy: T, dz: T) -> Result<Self> {
        let mm = [dx, dy, dz];
        if mm.iter().any(|&v| !(v > T::zero())) {
            return Err(Error::InvalidSpacing(format!("{dx}x{dy}x{dz} mm")));
        }
        Ok(Self { mm })
    }

    pub fn mm(&self) -> [T; 3] {
        self.mm
    }

    /// Volume of one voxel in mm³.
    pub fn voxel_mm3(&self) -> T {
        self.mm[0] * self.mm[1] * self.mm[2]
    }
}

impl Spacing<f64> {
    /// The 4 x 4 x 5 mm working grid.
    pub fn pet_default() -> Self {
        Self { mm: [4.0, 4.0, 5.0] }
    }
}

impl<T: Scalar> TryFrom<[T; 3]> for Spacing<T> {
    type Error = Error;
    fn try_from(v: [T; 3]) -> Result<Self> {
        Self::new(v[0], v[1], v[2])
    }
}

impl<T> From<Spacing<T>> for [T; 3] {
    fn from(s: Spacing<T>) -> Self {
        s.mm
    }
}

/// Axis-aligned box stored as minimum corner plus extent, in voxels.
///
/// Extents are strictly positive; sub-voxel coordinates are allowed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[T; 6]", into = "[T; 6]")]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct Box3<T> {
    min: [T; 3],
    size: [T; 3],
}

impl<T: Scalar> Box3<T> {
    pub fn new(min: [T; 3], size: [T; 3]) -> Result<Self> {
        if size.iter().any(|&s| !(s > T::zero())) {
            return Err(Error::InvalidBox(format!(
                "extent {:?} must be positive on every axis",
                size
            )));
        }
        Ok(Self { min, size })
    }

    pub fn from_center_size(center: [T; 3], size: [T; 3]) -> Result<Self> {
        let h = T::half();
        let min = [
            center[0] - size[0] * h,
            center[1] - size[1] * h,
            center[2] - size[2] * h,
        ];
        Self::new(min, size)
    }

    /// Box of the given shape centred at the origin.
    pub fn centered(size: [T; 3]) -> Result<Self> {
        Self::from_center_size([T::zero(); 3], size)
    }

    pub fn min_corner(&self) -> [T; 3] {
        self.min
    }

    pub fn max_corner(&self) -> [T; 3] {
        [
            self.min[0] + self.size[0],
            self.min[1] + self.size[1],
            self.min[2] + self.size[2],
        ]
    }

    pub fn center(&self) -> [T; 3] {
        let h = T::half();
        [
            self.min[0] + self.size[0] * h,
            self.min[1] + self.size[1] * h,
            self.min[2] + self.size[2] * h,
        ]
    }

    /// Extent triple; independent of position.
    pub fn shape(&self) -> [T; 3] {
        self.size
    }

    pub fn voxel_volume(&self) -> T {
        self.size[0] * self.size[1] * self.size[2]
    }

    /// Physical volume in cubic centimetres.
    pub fn volume_cc(&self, spacing: &Spacing<T>) -> T {
        self.voxel_volume() * spacing.voxel_mm3() / T::from_count(1000)
    }

    pub fn translated(&self, by: [T; 3]) -> Self {
        Self {
            min: [self.min[0] + by[0], self.min[1] + by[1], self.min[2] + by[2]],
            size: self.size,
        }
    }

    /// Reorders the axes; `perm[i]` names the source axis of output axis `i`.
    pub fn permuted(&self, perm: [usize; 3]) -> Self {
        Self {
            min: [self.min[perm[0]], self.min[perm[1]], self.min[perm[2]]],
            size: [self.size[perm[0]], self.size[perm[1]], self.size[perm[2]]],
        }
    }

    pub fn intersection_volume(&self, other: &Self) -> T {
        let (amax, bmax) = (self.max_corner(), other.max_corner());
        let mut vol = T::one();
        for ax in 0..3 {
            let lo = self.min[ax].max_of(other.min[ax]);
            let hi = amax[ax].min_of(bmax[ax]);
            if !(hi > lo) {
                return T::zero();
            }
            vol = vol * (hi - lo);
        }
        vol
    }

    pub fn to_array(&self) -> [T; 6] {
        [
            self.min[0],
            self.min[1],
            self.min[2],
            self.size[0],
            self.size[1],
            self.size[2],
        ]
    }
}

impl<T: Scalar> TryFrom<[T; 6]> for Box3<T> {
    type Error = Error;
    fn try_from(v: [T; 6]) -> Result<Self> {
        Self::new([v[0], v[1], v[2]], [v[3], v[4], v[5]])
    }
}

impl<T: Scalar> From<Box3<T>> for [T; 6] {
    fn from(b: Box3<T>) -> Self {
        b.to_array()
    }
}

/// Intersection over union in voxel space; 0 for disjoint boxes.
pub fn iou<T: Scalar>(a: &Box3<T>, b: &Box3<T>) -> T {
    let inter = a.intersection_volume(b);
    if inter == T::zero() {
        return T::zero();
    }
    inter / (a.voxel_volume() + b.voxel_volume() - inter)
}

pub fn volume_cc<T: Scalar>(b: &Box3<T>, spacing: &Spacing<T>) -> T {
    b.volume_cc(spacing)
}

pub fn shape_of<T: Scalar>(b: &Box3<T>) -> [T; 3] {
    b.shape()
}

/// Volume thresholds (cc) splitting the volume axis into `edges.len() + 1`
/// half-open bins `[0, e0), [e0, e1), ..., [e_last, inf)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<T>", into = "Vec<T>")]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct BinningConfig<T> {
    edges: Vec<T>,
}

pub const DEFAULT_BINS: usize = 10;
pub const MIN_LESION_CC: f64 = 0.08;
pub const LARGE_LESION_CC: f64 = 150.0;

impl<T: Scalar> BinningConfig<T> {
    pub fn new(edges: Vec<T>) -> Result<Self> {
        if edges.is_empty() {
            return Err(Error::InvalidBinning("need at least one edge".into()));
        }
        if !(edges[0] > T::zero()) {
            return Err(Error::InvalidBinning(format!(
                "first edge {} must be positive",
                edges[0]
            )));
        }
        if let Some(w) = edges.windows(2).find(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidBinning(format!(
                "edges must be strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        Ok(Self { edges })
    }

    /// `bins - 1` edges spaced geometrically from `lo` to `hi` cc.
    pub fn geometric(lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if bins < 2 || !(lo > 0.0) || !(hi > lo) {
            return Err(Error::InvalidBinning(format!(
                "geometric binning needs 0 < lo < hi and bins >= 2 (lo={lo}, hi={hi}, bins={bins})"
            )));
        }
        let steps = (bins - 2) as f64;
        let edges = (0..bins - 1)
            .map(|i| {
                let t = if steps == 0.0 { 0.0 } else { i as f64 / steps };
                T::from_real(lo * (hi / lo).powf(t))
            })
            .collect();
        Self::new(edges)
    }

    pub fn edges(&self) -> &[T] {
        &self.edges
    }

    pub fn bins(&self) -> usize {
        self.edges.len() + 1
    }

    /// Zero-based bin of a volume in cc.
    pub fn bin_of_volume(&self, cc: T) -> usize {
        self.edges.partition_point(|&e| e <= cc)
    }

    /// `[lo, hi)` volume range of a bin; the last bin has no upper edge.
    pub fn range(&self, bin: usize) -> (T, Option<T>) {
        let lo = if bin == 0 { T::zero() } else { self.edges[bin - 1] };
        (lo, self.edges.get(bin).copied())
    }
}

impl Default for BinningConfig<f64> {
    /// Ten bins with edges geometric between 0.08 cc and 150 cc.
    fn default() -> Self {
        Self::geometric(MIN_LESION_CC, LARGE_LESION_CC, DEFAULT_BINS)
            .expect("default binning is valid")
    }
}

impl<T: Scalar> TryFrom<Vec<T>> for BinningConfig<T> {
    type Error = Error;
    fn try_from(v: Vec<T>) -> Result<Self> {
        Self::new(v)
    }
}

impl<T> From<BinningConfig<T>> for Vec<T> {
    fn from(b: BinningConfig<T>) -> Self {
        b.edges
    }
}

/// Zero-based volume bin of a box.
pub fn bin_of<T: Scalar>(b: &Box3<T>, spacing: &Spacing<T>, cfg: &BinningConfig<T>) -> usize {
    cfg.bin_of_volume(b.volume_cc(spacing))
}

/// Normalized bin histogram of a set of boxes; `None` when empty.
pub fn histogram<'a, T: Scalar>(
    boxes: impl IntoIterator<Item = &'a Box3<T>>,
    spacing: &Spacing<T>,
    cfg: &BinningConfig<T>,
) -> Option<Vec<T>> {
    let mut counts = vec![0usize; cfg.bins()];
    let mut total = 0usize;
    for b in boxes {
        counts[bin_of(b, spacing, cfg)] += 1;
        total += 1;
    }
    if total == 0 {
        return None;
    }
    let n = T::from_count(total);
    Some(counts.into_iter().map(|c| T::from_count(c) / n).collect())
}

/// Total-variation distance between two distributions of equal length.
pub fn total_variation<T: Scalar>(p: &[T], q: &[T]) -> T {
    let sum = p
        .iter()
        .zip(q)
        .fold(T::zero(), |acc, (&a, &b)| acc + (a - b).abs_of());
    sum * T::half()
}
