//! Pixel grids, worker annotations and edge classes.
//!
//! All grids are dense and row-major: pixel `(col, row)` lives at index
//! `row * width + col` and its center sits at `(col + 0.5, row + 0.5)` in
//! polygon coordinates. Label `1` is cell interior, label `0` is
//! membrane/background.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dims, Error, Result};
use crate::raster::{rasterize_polygon, Polygon};

/// Label of a cell interior pixel.
pub const INTERIOR: u8 = 1;
/// Label of a membrane or background pixel.
pub const MEMBRANE: u8 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub width: usize,
    pub height: usize,
}

impl Dims {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::validation(format!(
                "grid dimensions must be positive, got {width}x{height}"
            )));
        }
        Ok(Dims { width, height })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, col: usize, row: usize) -> usize {
        row * self.width + col
    }

    #[inline]
    pub fn coords(&self, index: usize) -> (usize, usize) {
        (index % self.width, index / self.width)
    }

    /// Index of `(col + dx, row + dy)` if it lies inside the grid.
    #[inline]
    pub fn offset(&self, index: usize, dx: i32, dy: i32) -> Option<usize> {
        let (c, r) = self.coords(index);
        let c2 = c as i64 + dx as i64;
        let r2 = r as i64 + dy as i64;
        if c2 < 0 || r2 < 0 || c2 >= self.width as i64 || r2 >= self.height as i64 {
            None
        } else {
            Some(self.index(c2 as usize, r2 as usize))
        }
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

/// Binary labeling of a pixel grid.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelGrid {
    dims: Dims,
    labels: Vec<u8>,
}

impl LabelGrid {
    pub fn new(dims: Dims, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != dims.len() {
            return Err(Error::validation(format!(
                "label array has {} entries, grid {dims} needs {}",
                labels.len(),
                dims.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::validation(format!("label {bad} is not binary")));
        }
        Ok(LabelGrid { dims, labels })
    }

    pub fn filled(dims: Dims, label: u8) -> Self {
        assert!(label <= 1, "label must be 0 or 1");
        LabelGrid {
            dims,
            labels: vec![label; dims.len()],
        }
    }

    pub fn from_mask(mask: &Mask) -> Self {
        LabelGrid {
            dims: mask.dims,
            labels: mask.bits.iter().map(|&b| b as u8).collect(),
        }
    }

    #[inline]
    pub fn dims(&self) -> Dims {
        self.dims
    }

    #[inline]
    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, index: usize) -> u8 {
        self.labels[index]
    }

    #[inline]
    pub(crate) fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    #[inline]
    pub fn set(&mut self, index: usize, label: u8) {
        debug_assert!(label <= 1);
        self.labels[index] = label;
    }

    pub fn flipped(&self) -> LabelGrid {
        LabelGrid {
            dims: self.dims,
            labels: self.labels.iter().map(|&l| 1 - l).collect(),
        }
    }

    pub fn to_mask(&self) -> Mask {
        Mask {
            dims: self.dims,
            bits: self.labels.iter().map(|&l| l == 1).collect(),
        }
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

/// Gray-value image normalized to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    dims: Dims,
    values: Vec<f64>,
}

impl ImageGrid {
    pub fn new(dims: Dims, values: Vec<f64>) -> Result<Self> {
        if values.len() != dims.len() {
            return Err(Error::validation(format!(
                "image has {} values, grid {dims} needs {}",
                values.len(),
                dims.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("image contains non-finite values"));
        }
        Ok(ImageGrid { dims, values })
    }

    #[inline]
    pub fn dims(&self) -> Dims {
        self.dims
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, index: usize) -> f64 {
        self.values[index]
    }
}

/// Dense boolean mask.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    dims: Dims,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(dims: Dims, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != dims.len() {
            return Err(Error::validation(format!(
                "mask has {} entries, grid {dims} needs {}",
                bits.len(),
                dims.len()
            )));
        }
        Ok(Mask { dims, bits })
    }

    pub fn empty(dims: Dims) -> Self {
        Mask {
            dims,
            bits: vec![false; dims.len()],
        }
    }

    pub fn full(dims: Dims) -> Self {
        Mask {
            dims,
            bits: vec![true; dims.len()],
        }
    }

    #[inline]
    pub fn dims(&self) -> Dims {
        self.dims
    }

    #[inline]
    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, index: usize) -> bool {
        self.bits[index]
    }

    #[inline]
    pub fn set(&mut self, index: usize, value: bool) {
        self.bits[index] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn any(&self) -> bool {
        self.bits.iter().any(|&b| b)
    }

    pub fn union_with(&mut self, other: &Mask) -> Result<()> {
        ensure_dims(self.dims, other.dims)?;
        for (a, &b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
        Ok(())
    }

    pub fn complement(&self) -> Mask {
        Mask {
            dims: self.dims,
            bits: self.bits.iter().map(|&b| !b).collect(),
        }
    }

    /// Dilation by a `(2r+1) x (2r+1)` square (Chebyshev ball of radius `r`).
    pub fn dilate(&self, radius: usize) -> Mask {
        if radius == 0 {
            return self.clone();
        }
        let Dims { width, height } = self.dims;
        let mut horiz = vec![false; self.bits.len()];
        for row in 0..height {
            let line = &self.bits[row * width..(row + 1) * width];
            for col in 0..width {
                let lo = col.saturating_sub(radius);
                let hi = (col + radius).min(width - 1);
                horiz[row * width + col] = line[lo..=hi].iter().any(|&b| b);
            }
        }
        let mut out = vec![false; self.bits.len()];
        for col in 0..width {
            for row in 0..height {
                let lo = row.saturating_sub(radius);
                let hi = (row + radius).min(height - 1);
                out[row * width + col] = (lo..=hi).any(|r| horiz[r * width + col]);
            }
        }
        Mask {
            dims: self.dims,
            bits: out,
        }
    }
}

/// One worker's partial observation of the true labeling.
///
/// Labels outside `observed` carry no information and are ignored by every
/// consumer.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub worker_id: String,
    labels: LabelGrid,
    observed: Mask,
}

impl Annotation {
    pub fn new(worker_id: impl Into<String>, labels: LabelGrid, observed: Mask) -> Result<Self> {
        ensure_dims(labels.dims(), observed.dims())?;
        Ok(Annotation {
            worker_id: worker_id.into(),
            labels,
            observed,
        })
    }

    /// Annotation observing every pixel.
    pub fn complete(worker_id: impl Into<String>, labels: LabelGrid) -> Self {
        let observed = Mask::full(labels.dims());
        Annotation {
            worker_id: worker_id.into(),
            labels,
            observed,
        }
    }

    #[inline]
    pub fn dims(&self) -> Dims {
        self.labels.dims()
    }

    #[inline]
    pub fn labels(&self) -> &LabelGrid {
        &self.labels
    }

    #[inline]
    pub fn observed(&self) -> &Mask {
        &self.observed
    }

    /// The asserted label at `index`, if the worker observed that pixel.
    #[inline]
    pub fn label_at(&self, index: usize) -> Option<u8> {
        self.observed.get(index).then(|| self.labels.get(index))
    }

    /// Copy with observations removed wherever `hide` is set.
    pub fn hidden(&self, hide: &Mask) -> Result<Annotation> {
        ensure_dims(self.dims(), hide.dims())?;
        let mut observed = self.observed.clone();
        for (i, &h) in hide.bits().iter().enumerate() {
            if h {
                observed.set(i, false);
            }
        }
        Ok(Annotation {
            worker_id: self.worker_id.clone(),
            labels: self.labels.clone(),
            observed,
        })
    }

    pub fn flipped(&self) -> Annotation {
        Annotation {
            worker_id: self.worker_id.clone(),
            labels: self.labels.flipped(),
            observed: self.observed.clone(),
        }
    }
}

/// Union of all observed masks.
pub fn coverage_mask(dims: Dims, annotations: &[Annotation]) -> Result<Mask> {
    let mut cover = Mask::empty(dims);
    for a in annotations {
        cover.union_with(a.observed())?;
    }
    Ok(cover)
}

/// Rasterizes a worker's polygons into an [`Annotation`].
///
/// Labels are `1` inside any polygon. The observed domain is the union of
/// interiors dilated by `ring_width` pixels, so the worker asserts the cell
/// interiors plus a membrane ring around them. Returns the annotation and
/// the number of pixels claimed by more than one polygon.
pub fn build_annotation(
    worker_id: &str,
    polygons: &[Polygon],
    ring_width: usize,
    dims: Dims,
) -> Result<(Annotation, usize)> {
    let mut interior = Mask::empty(dims);
    let mut overlap = 0usize;
    for poly in polygons {
        let mask = rasterize_polygon(poly, dims)?;
        for (i, &b) in mask.bits().iter().enumerate() {
            if b {
                if interior.get(i) {
                    overlap += 1;
                }
                interior.set(i, true);
            }
        }
    }
    if overlap > 0 {
        log::warn!("worker {worker_id}: {overlap} pixels covered by overlapping polygons, interiors unioned");
    }
    let observed = interior.dilate(ring_width);
    let labels = LabelGrid::from_mask(&interior);
    Ok((
        Annotation {
            worker_id: worker_id.to_string(),
            labels,
            observed,
        },
        overlap,
    ))
}

/// Translation vectors defining the pairwise edge classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(i32, i32)>", into = "Vec<(i32, i32)>")]
pub struct EdgeClassSet {
    offsets: Vec<(i32, i32)>,
}

impl EdgeClassSet {
    pub fn new(offsets: Vec<(i32, i32)>) -> Result<Self> {
        for (k, &(dx, dy)) in offsets.iter().enumerate() {
            if dx == 0 && dy == 0 {
                return Err(Error::validation("edge class offset must be non-zero"));
            }
            for &(ex, ey) in &offsets[..k] {
                if (ex, ey) == (dx, dy) || (ex, ey) == (-dx, -dy) {
                    return Err(Error::validation(format!(
                        "edge class ({dx},{dy}) duplicates an existing undirected offset"
                    )));
                }
            }
        }
        Ok(EdgeClassSet { offsets })
    }

    pub fn empty() -> Self {
        EdgeClassSet { offsets: Vec::new() }
    }

    /// `(1,0), (0,1), (1,1), (1,-1), (2,0), (0,2)`.
    pub fn dense() -> Self {
        EdgeClassSet {
            offsets: vec![(1, 0), (0, 1), (1, 1), (1, -1), (2, 0), (0, 2)],
        }
    }

    pub fn four_connected() -> Self {
        EdgeClassSet {
            offsets: vec![(1, 0), (0, 1)],
        }
    }

    #[inline]
    pub fn offsets(&self) -> &[(i32, i32)] {
        &self.offsets
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }
}

impl Default for EdgeClassSet {
    fn default() -> Self {
        Self::dense()
    }
}

impl TryFrom<Vec<(i32, i32)>> for EdgeClassSet {
    type Error = Error;

    fn try_from(offsets: Vec<(i32, i32)>) -> Result<Self> {
        EdgeClassSet::new(offsets)
    }
}

impl From<EdgeClassSet> for Vec<(i32, i32)> {
    fn from(set: EdgeClassSet) -> Self {
        set.offsets
    }
}

/// All in-bounds pixel pairs `(i, i + v)` for each edge class, in raster
/// order of the first endpoint.
pub fn edge_pairs(dims: Dims, classes: &EdgeClassSet) -> Vec<Vec<(usize, usize)>> {
    classes
        .offsets()
        .iter()
        .map(|&(dx, dy)| {
            (0..dims.len())
                .filter_map(|i| dims.offset(i, dx, dy).map(|j| (i, j)))
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Point;

    fn square(x0: f64, y0: f64, x1: f64, y1: f64) -> Polygon {
        Polygon::new(vec![
            Point::new(x0, y0),
            Point::new(x1, y0),
            Point::new(x1, y1),
            Point::new(x0, y1),
        ])
        .unwrap()
    }

    #[test]
    fn edge_pairs_minimal_grid() {
        let dims = Dims::new(2, 1).unwrap();
        let classes = EdgeClassSet::new(vec![(1, 0)]).unwrap();
        assert_eq!(edge_pairs(dims, &classes), vec![vec![(0, 1)]]);
    }

    #[test]
    fn edge_pairs_three_by_three() {
        let dims = Dims::new(3, 3).unwrap();
        let pairs = edge_pairs(dims, &EdgeClassSet::four_connected());
        // enumerated by hand: 2 horizontal edges per row, 2 vertical per column
        let mut expected_h = Vec::new();
        let mut expected_v = Vec::new();
        for r in 0..3 {
            for c in 0..3 {
                if c + 1 < 3 {
                    expected_h.push((r * 3 + c, r * 3 + c + 1));
                }
                if r + 1 < 3 {
                    expected_v.push((r * 3 + c, (r + 1) * 3 + c));
                }
            }
        }
        assert_eq!(pairs[0], expected_h);
        assert_eq!(pairs[1], expected_v);
        assert_eq!(pairs[0].len() + pairs[1].len(), 12);
    }

    #[test]
    fn edge_pairs_empty_classes() {
        let dims = Dims::new(4, 4).unwrap();
        assert!(edge_pairs(dims, &EdgeClassSet::empty()).is_empty());
    }

    #[test]
    fn edge_class_validation() {
        assert!(EdgeClassSet::new(vec![(0, 0)]).is_err());
        assert!(EdgeClassSet::new(vec![(1, 0), (-1, 0)]).is_err());
        assert!(EdgeClassSet::new(vec![(1, 0), (1, 0)]).is_err());
        assert!(EdgeClassSet::new(vec![(1, -1), (-1, -1)]).is_ok());
    }

    #[test]
    fn label_grid_rejects_non_binary() {
        let dims = Dims::new(2, 1).unwrap();
        assert!(LabelGrid::new(dims, vec![0, 2]).is_err());
        assert!(LabelGrid::new(dims, vec![0]).is_err());
    }

    #[test]
    fn empty_annotation_observes_nothing() {
        let dims = Dims::new(5, 5).unwrap();
        let (a, overlap) = build_annotation("w", &[], 2, dims).unwrap();
        assert!(!a.observed().any());
        assert_eq!(overlap, 0);
    }

    #[test]
    fn zero_ring_observes_interior_only() {
        let dims = Dims::new(6, 6).unwrap();
        let poly = square(1.0, 1.0, 4.0, 3.0);
        let (a, _) = build_annotation("w", &[poly.clone()], 0, dims).unwrap();
        let interior = rasterize_polygon(&poly, dims).unwrap();
        assert_eq!(a.observed(), &interior);
        assert_eq!(a.labels(), &LabelGrid::from_mask(&interior));
    }

    #[test]
    fn ring_dilation_matches_brute_force() {
        let dims = Dims::new(7, 7).unwrap();
        // 3x3 interior at cols/rows 0..=2, touching the top-left border
        for (x0, y0) in [(0.0, 0.0), (2.0, 2.0), (4.0, 3.0)] {
            let poly = square(x0, y0, x0 + 3.0, y0 + 3.0);
            let (a, _) = build_annotation("w", &[poly], 1, dims).unwrap();
            let interior: Vec<(i64, i64)> = (0..dims.len())
                .filter(|&i| a.labels().get(i) == 1)
                .map(|i| {
                    let (c, r) = dims.coords(i);
                    (c as i64, r as i64)
                })
                .collect();
            assert_eq!(interior.len(), 9);
            for i in 0..dims.len() {
                let (c, r) = dims.coords(i);
                let near = interior
                    .iter()
                    .any(|&(ic, ir)| (ic - c as i64).abs() <= 1 && (ir - r as i64).abs() <= 1);
                assert_eq!(a.observed().get(i), near, "pixel {c},{r}");
                if near && !interior.contains(&(c as i64, r as i64)) {
                    assert_eq!(a.labels().get(i), 0);
                }
            }
        }
        let poly = square(2.0, 2.0, 5.0, 5.0);
        let (a, _) = build_annotation("w", &[poly], 1, dims).unwrap();
        assert_eq!(a.observed().count(), 25);
    }

    #[test]
    fn overlapping_polygons_are_unioned() {
        let dims = Dims::new(6, 6).unwrap();
        let p1 = square(0.0, 0.0, 3.0, 3.0);
        let p2 = square(2.0, 2.0, 5.0, 5.0);
        let (a, overlap) = build_annotation("w", &[p1, p2], 0, dims).unwrap();
        assert_eq!(overlap, 1);
        assert_eq!(a.labels().count(1), 17);
    }

    #[test]
    fn coverage_is_union_of_observed() {
        let dims = Dims::new(4, 1).unwrap();
        let l = LabelGrid::filled(dims, 1);
        let a = Annotation::new(
            "a",
            l.clone(),
            Mask::new(dims, vec![true, false, false, false]).unwrap(),
        )
        .unwrap();
        let b = Annotation::new("b", l, Mask::new(dims, vec![false, false, true, false]).unwrap()).unwrap();
        let c = coverage_mask(dims, &[a, b]).unwrap();
        assert_eq!(c.bits(), &[true, false, true, false]);
    }
}
