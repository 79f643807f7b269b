//! Segmentation and worker-ranking evaluation.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dims, Error, Result};
use crate::grid::{Annotation, Dims, LabelGrid, Mask, INTERIOR, MEMBRANE};

fn check_mask(dims: Dims, mask: Option<&Mask>) -> Result<()> {
    if let Some(m) = mask {
        ensure_dims(dims, m.dims())?;
        if !m.any() {
            return Err(Error::validation("evaluation mask is empty"));
        }
    }
    Ok(())
}

fn in_mask(mask: Option<&Mask>, i: usize) -> bool {
    mask.is_none_or(|m| m.get(i))
}

/// Fraction of (masked) pixels where `pred` and `gt` agree.
pub fn pixel_accuracy(pred: &LabelGrid, gt: &LabelGrid, mask: Option<&Mask>) -> Result<f64> {
    ensure_dims(gt.dims(), pred.dims())?;
    check_mask(gt.dims(), mask)?;
    let (mut agree, mut total) = (0usize, 0usize);
    for i in 0..gt.dims().len() {
        if in_mask(mask, i) {
            total += 1;
            agree += (pred.get(i) == gt.get(i)) as usize;
        }
    }
    Ok(agree as f64 / total as f64)
}

/// F1 score with the membrane label as the positive class; 1 when neither
/// labeling has a positive pixel.
pub fn f1_score(pred: &LabelGrid, gt: &LabelGrid, mask: Option<&Mask>) -> Result<f64> {
    ensure_dims(gt.dims(), pred.dims())?;
    check_mask(gt.dims(), mask)?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for i in 0..gt.dims().len() {
        if !in_mask(mask, i) {
            continue;
        }
        match (pred.get(i) == MEMBRANE, gt.get(i) == MEMBRANE) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp + fp + fn_ == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
}

/// Assignment of every pixel to one of `n_regions` regions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    dims: Dims,
    ids: Vec<u32>,
    n_regions: usize,
}

impl Partition {
    /// Validates that ids are contiguous from 0 and all used.
    pub fn new(dims: Dims, ids: Vec<u32>) -> Result<Self> {
        if ids.len() != dims.len() {
            return Err(Error::validation("partition length does not match dims"));
        }
        let n_regions = ids.iter().map(|&i| i as usize + 1).max().unwrap_or(0);
        let mut used = vec![false; n_regions];
        for &i in &ids {
            used[i as usize] = true;
        }
        if used.iter().any(|u| !u) {
            return Err(Error::validation("partition ids are not contiguous"));
        }
        Ok(Partition { dims, ids, n_regions })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn n_regions(&self) -> usize {
        self.n_regions
    }
}

/// 4-connected components of `label`, numbered in raster order of their
/// first pixel; `u32::MAX` marks other pixels.
fn components(y: &LabelGrid, label: u8) -> (Vec<u32>, usize) {
    let dims = y.dims();
    let mut ids = vec![u32::MAX; dims.len()];
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..dims.len() {
        if ids[start] != u32::MAX || y.get(start) != label {
            continue;
        }
        ids[start] = next;
        stack.push(start);
        while let Some(i) = stack.pop() {
            for (dx, dy) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
                if let Some(j) = dims.offset(i, dx, dy) {
                    if ids[j] == u32::MAX && y.get(j) == label {
                        ids[j] = next;
                        stack.push(j);
                    }
                }
            }
        }
        next += 1;
    }
    (ids, next as usize)
}

/// Interior components become regions; each membrane pixel joins the
/// component with the nearest member pixel (Euclidean), ties to the lower id.
pub fn labeling_to_partition(y: &LabelGrid) -> Result<Partition> {
    let dims = y.dims();
    let (comp, n) = components(y, INTERIOR);
    if n == 0 {
        return Err(Error::validation("labeling has no interior pixels"));
    }
    let (w, h) = (dims.width as i64, dims.height as i64);
    let mut ids = comp.clone();
    for i in 0..dims.len() {
        if comp[i] != u32::MAX {
            continue;
        }
        let (c, r) = dims.coords(i);
        let (c, r) = (c as i64, r as i64);
        let mut best: Option<(i64, u32)> = None;
        let mut radius = 1i64;
        loop {
            if let Some((d2, _)) = best {
                if radius * radius > d2 {
                    break;
                }
            }
            if radius > w.max(h) {
                break;
            }
            // pixels on the Chebyshev ring of this radius
            for dy in -radius..=radius {
                let row = r + dy;
                if row < 0 || row >= h {
                    continue;
                }
                let step = if dy.abs() == radius { 1 } else { 2 * radius };
                let mut dx = -radius;
                while dx <= radius {
                    let col = c + dx;
                    if col >= 0 && col < w {
                        let id = comp[(row * w + col) as usize];
                        if id != u32::MAX {
                            let d2 = dx * dx + dy * dy;
                            if best.is_none_or(|(bd, bid)| d2 < bd || (d2 == bd && id < bid)) {
                                best = Some((d2, id));
                            }
                        }
                    }
                    dx += step;
                }
            }
            radius += 1;
        }
        ids[i] = best.expect("at least one interior pixel").1;
    }
    Partition::new(dims, ids)
}

/// `H(P|Q) + H(Q|P)` in nats over the (masked) pixels.
pub fn variation_of_information(p: &Partition, q: &Partition, mask: Option<&Mask>) -> Result<f64> {
    ensure_dims(p.dims(), q.dims())?;
    check_mask(p.dims(), mask)?;
    let mut joint: HashMap<(u32, u32), usize> = HashMap::new();
    let mut pa = vec![0usize; p.n_regions()];
    let mut qa = vec![0usize; q.n_regions()];
    let mut n = 0usize;
    for i in 0..p.dims().len() {
        if !in_mask(mask, i) {
            continue;
        }
        let (a, b) = (p.ids()[i], q.ids()[i]);
        *joint.entry((a, b)).or_default() += 1;
        pa[a as usize] += 1;
        qa[b as usize] += 1;
        n += 1;
    }
    let n = n as f64;
    let mut keys: Vec<_> = joint.into_iter().collect();
    keys.sort_unstable();
    let mut voi = 0.0;
    for ((a, b), c) in keys {
        let c = c as f64;
        let (ca, cb) = (pa[a as usize] as f64, qa[b as usize] as f64);
        voi -= c / n * ((c / ca).ln() + (c / cb).ln());
    }
    Ok(voi.max(0.0))
}

/// A region summarized by its pixel count and centroid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub id: u32,
    pub area: usize,
    pub cx: f64,
    pub cy: f64,
}

impl Cell {
    pub fn equivalent_radius(&self) -> f64 {
        (self.area as f64 / std::f64::consts::PI).sqrt()
    }

    fn distance(&self, other: &Cell) -> f64 {
        ((self.cx - other.cx).powi(2) + (self.cy - other.cy).powi(2)).sqrt()
    }
}

/// Area and pixel-center centroid of every region.
pub fn partition_cells(p: &Partition) -> Vec<Cell> {
    let dims = p.dims();
    let mut acc = vec![(0usize, 0.0f64, 0.0f64); p.n_regions()];
    for (i, &id) in p.ids().iter().enumerate() {
        let (c, r) = dims.coords(i);
        let e = &mut acc[id as usize];
        e.0 += 1;
        e.1 += c as f64 + 0.5;
        e.2 += r as f64 + 0.5;
    }
    acc.into_iter()
        .enumerate()
        .map(|(id, (n, sx, sy))| Cell {
            id: id as u32,
            area: n,
            cx: sx / n as f64,
            cy: sy / n as f64,
        })
        .collect()
}

/// Minimum-cost perfect assignment for a square cost matrix; returns the
/// column assigned to each row.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    if cost.iter().any(|r| r.len() != n) {
        return Err(Error::validation("cost matrix must be square"));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::validation("cost matrix must be finite"));
    }
    // potentials form (1-based, column 0 is a sentinel)
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut row_of = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if row_of[j] > 0 {
            assignment[row_of[j] - 1] = j - 1;
        }
    }
    Ok(assignment)
}

/// When a predicted and a ground-truth cell are close enough to be matched.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchGate {
    /// Centroid distance at most this multiple of the GT cell's equivalent radius.
    RadiusFactor(f64),
    /// Centroid distance at most this many pixels.
    Distance(f64),
}

impl MatchGate {
    pub fn validate(&self) -> Result<()> {
        let v = match *self {
            MatchGate::RadiusFactor(f) | MatchGate::Distance(f) => f,
        };
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::validation("match gate must be positive"));
        }
        Ok(())
    }

    fn limit(&self, gt: &Cell) -> f64 {
        match *self {
            MatchGate::RadiusFactor(f) => f * gt.equivalent_radius(),
            MatchGate::Distance(d) => d,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMatching {
    /// `(pred index, gt index)` pairs.
    pub pairs: Vec<(usize, usize)>,
    pub over: usize,
    pub under: usize,
    pub total_distance: f64,
}

/// Maximum-cardinality matching of nearby cells, minimizing the total
/// centroid distance among those. Unmatched predictions count as
/// over-segmentations, unmatched GT cells as under-segmentations.
pub fn match_cells(pred: &[Cell], gt: &[Cell], gate: MatchGate) -> Result<CellMatching> {
    gate.validate()?;
    let (np, ng) = (pred.len(), gt.len());
    let allowed: Vec<Vec<Option<f64>>> = pred
        .iter()
        .map(|p| {
            gt.iter()
                .map(|g| {
                    let d = p.distance(g);
                    (d <= gate.limit(g)).then_some(d)
                })
                .collect()
        })
        .collect();
    let allowed_sum: f64 = allowed.iter().flatten().flatten().sum();
    let unmatched = allowed_sum + 1.0;
    let forbidden = unmatched * 4.0 * (np + ng + 1) as f64;
    let n = np + ng;
    let mut cost = vec![vec![0.0; n]; n];
    for (i, row) in cost.iter_mut().enumerate() {
        for (j, c) in row.iter_mut().enumerate() {
            *c = match (i < np, j < ng) {
                (true, true) => allowed[i][j].unwrap_or(forbidden),
                (true, false) | (false, true) => unmatched,
                (false, false) => 0.0,
            };
        }
    }
    let assignment = hungarian(&cost)?;
    let mut pairs = Vec::new();
    let mut total_distance = 0.0;
    for (i, &j) in assignment.iter().enumerate().take(np) {
        if j < ng {
            if let Some(d) = allowed[i][j] {
                pairs.push((i, j));
                total_distance += d;
            }
        }
    }
    Ok(CellMatching {
        over: np - pairs.len(),
        under: ng - pairs.len(),
        pairs,
        total_distance,
    })
}

/// Descending fractional ranks (1 = highest score, ties share the mean rank).
pub fn fractional_ranks(scores: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut ranks = vec![0.0; scores.len()];
    let mut k = 0;
    while k < order.len() {
        let mut end = k + 1;
        while end < order.len() && scores[order[end]] == scores[order[k]] {
            end += 1;
        }
        let mean = (k + 1 + end) as f64 / 2.0;
        for &idx in &order[k..end] {
            ranks[idx] = mean;
        }
        k = end;
    }
    ranks
}

/// Mean absolute difference between estimated and true worker ranks.
pub fn ranking_quality(estimated: &BTreeMap<String, f64>, truth: &BTreeMap<String, f64>) -> Result<f64> {
    if estimated.is_empty() {
        return Err(Error::validation("ranking needs at least one worker"));
    }
    if !estimated.keys().eq(truth.keys()) {
        return Err(Error::validation("estimated and true scores cover different workers"));
    }
    let e: Vec<f64> = estimated.values().copied().collect();
    let t: Vec<f64> = truth.values().copied().collect();
    let (re, rt) = (fractional_ranks(&e), fractional_ranks(&t));
    Ok(re.iter().zip(&rt).map(|(a, b)| (a - b).abs()).sum::<f64>() / e.len() as f64)
}

/// Agreement of the worker's observed labels with `reference`.
pub fn worker_pixel_accuracy(a: &Annotation, reference: &LabelGrid) -> Result<f64> {
    let (agree, total) = agreement(a, reference)?;
    if total == 0 {
        return Err(Error::validation(format!(
            "annotation of {} observes no pixel",
            a.worker_id
        )));
    }
    Ok(agree as f64 / total as f64)
}

fn agreement(a: &Annotation, reference: &LabelGrid) -> Result<(usize, usize)> {
    ensure_dims(reference.dims(), a.dims())?;
    let (mut agree, mut total) = (0, 0);
    for i in 0..reference.dims().len() {
        if let Some(z) = a.label_at(i) {
            total += 1;
            agree += (z == reference.get(i)) as usize;
        }
    }
    Ok((agree, total))
}

/// Pixel accuracy per worker, pooled over all of that worker's annotations.
pub fn worker_scores(annotations: &[Annotation], reference: &LabelGrid) -> Result<BTreeMap<String, f64>> {
    let mut acc: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for a in annotations {
        let (g, t) = agreement(a, reference)?;
        let e = acc.entry(a.worker_id.clone()).or_default();
        e.0 += g;
        e.1 += t;
    }
    Ok(acc
        .into_iter()
        .filter(|(_, (_, t))| *t > 0)
        .map(|(k, (g, t))| (k, g as f64 / t as f64))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub gate: MatchGate,
    /// In covered-only mode a cell counts if at least this fraction of its
    /// pixels is covered.
    pub min_covered_fraction: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            gate: MatchGate::RadiusFactor(1.5),
            min_covered_fraction: 0.5,
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<()> {
        self.gate.validate()?;
        if !(0.0..=1.0).contains(&self.min_covered_fraction) {
            return Err(Error::validation("min_covered_fraction outside [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    Full,
    CoveredOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsBlock {
    pub mask_mode: MaskMode,
    pub pixel_accuracy: f64,
    pub f1: f64,
    pub voi: f64,
    pub pred_cells: usize,
    pub gt_cells: usize,
    pub over_segmented: usize,
    pub under_segmented: usize,
    /// Percentages of the GT cell count.
    pub over_pct: f64,
    pub under_pct: f64,
}

impl MetricsBlock {
    /// `(name, value)` pairs in a fixed order.
    pub fn values(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("pixel_accuracy", self.pixel_accuracy),
            ("f1", self.f1),
            ("voi", self.voi),
            ("over_segmented", self.over_segmented as f64),
            ("under_segmented", self.under_segmented as f64),
            ("over_pct", self.over_pct),
            ("under_pct", self.under_pct),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub full: MetricsBlock,
    pub covered: Option<MetricsBlock>,
}

fn covered_cells(cells: Vec<Cell>, p: &Partition, mask: Option<&Mask>, min_fraction: f64) -> Vec<Cell> {
    let Some(mask) = mask else { return cells };
    let mut hit = vec![0usize; p.n_regions()];
    for (i, &id) in p.ids().iter().enumerate() {
        hit[id as usize] += mask.get(i) as usize;
    }
    cells
        .into_iter()
        .filter(|c| c.area > 0 && hit[c.id as usize] as f64 >= min_fraction * c.area as f64)
        .collect()
}

fn block(
    pred: &LabelGrid,
    gt: &LabelGrid,
    pp: &Partition,
    gp: &Partition,
    mask: Option<&Mask>,
    cfg: &MetricsConfig,
) -> Result<MetricsBlock> {
    let pred_cells = covered_cells(partition_cells(pp), pp, mask, cfg.min_covered_fraction);
    let gt_cells = covered_cells(partition_cells(gp), gp, mask, cfg.min_covered_fraction);
    let m = match_cells(&pred_cells, &gt_cells, cfg.gate)?;
    let pct = |k: usize| {
        if gt_cells.is_empty() {
            0.0
        } else {
            100.0 * k as f64 / gt_cells.len() as f64
        }
    };
    Ok(MetricsBlock {
        mask_mode: if mask.is_some() {
            MaskMode::CoveredOnly
        } else {
            MaskMode::Full
        },
        pixel_accuracy: pixel_accuracy(pred, gt, mask)?,
        f1: f1_score(pred, gt, mask)?,
        voi: variation_of_information(pp, gp, mask)?,
        pred_cells: pred_cells.len(),
        gt_cells: gt_cells.len(),
        over_segmented: m.over,
        under_segmented: m.under,
        over_pct: pct(m.over),
        under_pct: pct(m.under),
    })
}

/// Full-image metrics, plus covered-only metrics when `coverage` is given.
pub fn evaluate(
    pred: &LabelGrid,
    gt: &LabelGrid,
    coverage: Option<&Mask>,
    cfg: &MetricsConfig,
) -> Result<MetricsReport> {
    cfg.validate()?;
    ensure_dims(gt.dims(), pred.dims())?;
    let pp = labeling_to_partition(pred)?;
    let gp = labeling_to_partition(gt)?;
    let full = block(pred, gt, &pp, &gp, None, cfg)?;
    let covered = coverage.map(|m| block(pred, gt, &pp, &gp, Some(m), cfg)).transpose()?;
    Ok(MetricsReport { full, covered })
}
