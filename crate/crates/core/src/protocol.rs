//! Simulated crowdsourcing: tiled outlining tasks repeated until the image
//! is covered, with workers that trace cell outlines imperfectly.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{build_annotation, Annotation, Dims, Mask};
use crate::raster::{clip_half_plane, polygon_from_ring, rasterize_polygon, Point, Polygon};

const POLYGON_RETRIES: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerProfile {
    pub worker_id: String,
    /// Standard deviation of per-vertex Gaussian displacement (px).
    pub jitter: f64,
    /// Probability of skipping an assigned cell.
    pub miss_rate: f64,
    pub vertex_min: usize,
    pub vertex_max: usize,
    /// Signed offset along the outward normal (px); positive grows cells.
    pub bias: f64,
}

impl WorkerProfile {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.miss_rate) {
            return Err(Error::validation(format!(
                "{}: miss_rate outside [0, 1]",
                self.worker_id
            )));
        }
        if !(self.jitter >= 0.0) || !self.bias.is_finite() {
            return Err(Error::validation(format!(
                "{}: jitter must be >= 0 and bias finite",
                self.worker_id
            )));
        }
        if self.vertex_min < 3 || self.vertex_max < self.vertex_min {
            return Err(Error::validation(format!("{}: invalid vertex range", self.worker_id)));
        }
        Ok(())
    }
}

/// Recipe for a pool of workers with jitter graded linearly from
/// `jitter_min` (first worker) to `jitter_max` (last worker).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkerPoolConfig {
    pub n_workers: usize,
    pub jitter_min: f64,
    pub jitter_max: f64,
    pub miss_rate: f64,
    /// Each worker's bias is drawn uniformly from `[-bias_max, bias_max]`.
    pub bias_max: f64,
    pub vertex_min: usize,
    pub vertex_max: usize,
}

impl Default for WorkerPoolConfig {
    fn default() -> Self {
        WorkerPoolConfig {
            n_workers: 15,
            jitter_min: 0.3,
            jitter_max: 2.5,
            miss_rate: 0.05,
            bias_max: 0.5,
            vertex_min: 8,
            vertex_max: 16,
        }
    }
}

impl WorkerPoolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_workers == 0 {
            return Err(Error::validation("n_workers must be at least 1"));
        }
        if !(self.jitter_min >= 0.0 && self.jitter_max >= self.jitter_min) {
            return Err(Error::validation("need 0 <= jitter_min <= jitter_max"));
        }
        if !(self.bias_max >= 0.0) {
            return Err(Error::validation("bias_max must be nonnegative"));
        }
        Ok(())
    }

    pub fn build(&self, rng: &mut ChaCha8Rng) -> Result<Vec<WorkerProfile>> {
        self.validate()?;
        let n = self.n_workers;
        (0..n)
            .map(|k| {
                let t = if n > 1 { k as f64 / (n - 1) as f64 } else { 0.0 };
                let bias = if self.bias_max > 0.0 {
                    rng.random_range(-self.bias_max..=self.bias_max)
                } else {
                    0.0
                };
                let p = WorkerProfile {
                    worker_id: format!("w{k:03}"),
                    jitter: self.jitter_min + t * (self.jitter_max - self.jitter_min),
                    miss_rate: self.miss_rate,
                    vertex_min: self.vertex_min,
                    vertex_max: self.vertex_max,
                    bias,
                };
                p.validate()?;
                Ok(p)
            })
            .collect()
    }
}

/// Axis-aligned pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tile {
    pub tile_id: usize,
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Tile {
    /// Whether every vertex of `poly` lies inside the tile rectangle.
    pub fn contains_polygon(&self, poly: &Polygon) -> bool {
        poly.vertices()
            .iter()
            .all(|p| p.x >= self.x0 as f64 && p.x <= self.x1 as f64 && p.y >= self.y0 as f64 && p.y <= self.y1 as f64)
    }

    pub fn pixel_count(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

fn tile_starts(extent: usize, size: usize) -> Vec<usize> {
    if size >= extent {
        return vec![0];
    }
    let stride = (size / 2).max(1);
    let mut starts: Vec<usize> = (0..).map(|k| k * stride).take_while(|&s| s + size < extent).collect();
    starts.push(extent - size);
    starts
}

/// Regular grid of `size × size` tiles with 50% overlap; the last row and
/// column are aligned to the image border.
pub fn make_tiles(dims: Dims, size: usize) -> Result<Vec<Tile>> {
    if size == 0 {
        return Err(Error::validation("tile size must be positive"));
    }
    let xs = tile_starts(dims.width, size);
    let ys = tile_starts(dims.height, size);
    let mut tiles = Vec::with_capacity(xs.len() * ys.len());
    for &y0 in &ys {
        for &x0 in &xs {
            tiles.push(Tile {
                tile_id: tiles.len(),
                x0,
                y0,
                x1: (x0 + size).min(dims.width),
                y1: (y0 + size).min(dims.height),
            });
        }
    }
    Ok(tiles)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    /// Outer coverage passes K.
    pub passes: usize,
    pub cells_per_task: usize,
    pub tile_size: usize,
    /// Uncovered-pixel threshold; defaults to `4·membrane_width²`.
    pub threshold: Option<usize>,
    pub membrane_width: f64,
    /// Membrane ring each worker is taken to assert around its polygons.
    pub ring_width: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            passes: 2,
            cells_per_task: 20,
            tile_size: 64,
            threshold: None,
            membrane_width: 3.0,
            ring_width: 2,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.passes == 0 {
            return Err(Error::validation("passes (K) must be at least 1"));
        }
        if self.cells_per_task == 0 || self.tile_size == 0 {
            return Err(Error::validation("cells_per_task and tile_size must be positive"));
        }
        if !(self.membrane_width >= 0.0) {
            return Err(Error::validation("membrane_width must be nonnegative"));
        }
        Ok(())
    }

    pub fn effective_threshold(&self) -> usize {
        self.threshold
            .unwrap_or_else(|| (4.0 * self.membrane_width * self.membrane_width).round() as usize)
    }

    fn dilation_radius(&self) -> usize {
        self.membrane_width.ceil() as usize
    }
}

/// Boundary of `poly` resampled at `n` points of equal arc length, starting
/// at arc position `start` ∈ [0, 1).
fn resample_boundary(poly: &Polygon, n: usize, start: f64) -> Vec<Point> {
    let v = poly.vertices();
    let m = v.len();
    let lens: Vec<f64> = (0..m)
        .map(|i| {
            let (a, b) = (v[i], v[(i + 1) % m]);
            ((b.x - a.x).powi(2) + (b.y - a.y).powi(2)).sqrt()
        })
        .collect();
    let total: f64 = lens.iter().sum();
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let mut s = ((start + k as f64 / n as f64) % 1.0) * total;
        let mut e = 0;
        while e + 1 < m && s > lens[e] {
            s -= lens[e];
            e += 1;
        }
        let (a, b) = (v[e], v[(e + 1) % m]);
        let t = (s / lens[e]).clamp(0.0, 1.0);
        out.push(Point::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y)));
    }
    out
}

/// Moves every edge of a convex polygon by `offset` along its outward
/// normal (mitered corners). `None` if the polygon collapses.
pub fn offset_convex(poly: &Polygon, offset: f64) -> Option<Polygon> {
    let v = poly.vertices();
    let orient = poly.signed_area().signum();
    let (lo, hi) = poly.bounds();
    let pad = offset.abs() * 4.0 + 1.0;
    let mut ring = vec![
        Point::new(lo.x - pad, lo.y - pad),
        Point::new(hi.x + pad, lo.y - pad),
        Point::new(hi.x + pad, hi.y + pad),
        Point::new(lo.x - pad, hi.y + pad),
    ];
    for i in 0..v.len() {
        let (a, b) = (v[i], v[(i + 1) % v.len()]);
        let len = ((b.x - a.x).powi(2) + (b.y - a.y).powi(2)).sqrt();
        // inward normal is the left side of counter-clockwise rings
        let (nx, ny) = (-orient * (b.y - a.y) / len, orient * (b.x - a.x) / len);
        ring = clip_half_plane(&ring, nx, ny, nx * a.x + ny * a.y - offset);
        if ring.is_empty() {
            return None;
        }
    }
    polygon_from_ring(ring)
}

/// One worker's tracing of a convex ground-truth outline, or `None` when no
/// valid polygon came out of the retries.
pub fn trace_cell(cell: &Polygon, profile: &WorkerProfile, rng: &mut ChaCha8Rng) -> Option<Polygon> {
    let noise = Normal::new(0.0, profile.jitter).ok()?;
    let base = if profile.bias == 0.0 {
        cell.clone()
    } else {
        offset_convex(cell, profile.bias)?
    };
    for _ in 0..POLYGON_RETRIES {
        let n = rng.random_range(profile.vertex_min..=profile.vertex_max);
        let start = rng.random::<f64>();
        let pts: Vec<Point> = resample_boundary(&base, n, start)
            .into_iter()
            .map(|p| Point::new(p.x + noise.sample(rng), p.y + noise.sample(rng)))
            .collect();
        if let Ok(poly) = Polygon::new(pts) {
            return Some(poly);
        }
    }
    None
}

/// Outlines up to `cells_per_task` fully visible cells of
/// `tile` that are not in `already`. Returns `(cell index, polygon)` pairs.
pub fn simulate_worker(
    gt_cells: &[Polygon],
    tile: &Tile,
    already: &BTreeSet<usize>,
    profile: &WorkerProfile,
    cells_per_task: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, Polygon)> {
    let mut eligible: Vec<usize> = (0..gt_cells.len())
        .filter(|k| !already.contains(k) && tile.contains_polygon(&gt_cells[*k]))
        .collect();
    eligible.shuffle(rng);
    eligible.truncate(cells_per_task);
    eligible.sort_unstable();
    let mut out = Vec::new();
    for k in eligible {
        if rng.random::<f64>() < profile.miss_rate {
            continue;
        }
        match trace_cell(&gt_cells[k], profile, rng) {
            Some(poly) => out.push((k, poly)),
            None => log::debug!("worker {} produced no valid outline for cell {k}", profile.worker_id),
        }
    }
    out
}

/// Binary coverage of `polygons` dilated by `radius`.
pub fn coverage_image<'a>(polygons: impl IntoIterator<Item = &'a Polygon>, dims: Dims, radius: usize) -> Result<Mask> {
    let mut c = Mask::empty(dims);
    for p in polygons {
        c.union_with(&rasterize_polygon(p, dims)?)?;
    }
    Ok(c.dilate(radius))
}

/// Number of pixels of `tile` not set in `coverage`.
pub fn uncovered_in_tile(coverage: &Mask, tile: &Tile) -> usize {
    let dims = coverage.dims();
    let mut n = 0;
    for row in tile.y0..tile.y1 {
        for col in tile.x0..tile.x1 {
            n += !coverage.get(dims.index(col, row)) as usize;
        }
    }
    n
}

/// Ids of tiles with more than `threshold` pixels left
/// uncovered by the dilated polygon interiors.
pub fn get_not_covered_tiles<'a>(
    tiles: &[Tile],
    polygons: impl IntoIterator<Item = &'a Polygon>,
    dims: Dims,
    dilation: usize,
    threshold: usize,
) -> Result<Vec<usize>> {
    let cover = coverage_image(polygons, dims, dilation)?;
    Ok(tiles
        .iter()
        .filter(|t| uncovered_in_tile(&cover, t) > threshold)
        .map(|t| t.tile_id)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub pass: usize,
    pub round: usize,
    pub tile_id: usize,
    pub worker_id: String,
    pub n_polygons: usize,
}

/// Polygons returned by one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolygonRecord {
    pub worker_id: String,
    pub tile_id: usize,
    pub polygons: Vec<Polygon>,
}

#[derive(Debug, Clone)]
pub struct ProtocolOutput {
    /// One annotation per task that returned at least one polygon.
    pub annotations: Vec<Annotation>,
    /// Polygon records aligned with `annotations`.
    pub records: Vec<PolygonRecord>,
    pub tasks: Vec<TaskRecord>,
    /// Inner-loop rounds used in each pass.
    pub rounds: Vec<usize>,
}

/// Runs the tiled protocol for `cfg.passes` passes. Each pass repeats
/// rounds of one task per not-yet-covered tile until no tile exceeds the
/// threshold, or a round neither changes the set of uncovered tiles nor
/// adds a polygon.
pub fn run_protocol(
    dims: Dims,
    tiles: &[Tile],
    gt_cells: &[Polygon],
    pool: &[WorkerProfile],
    cfg: &ProtocolConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ProtocolOutput> {
    cfg.validate()?;
    if pool.is_empty() {
        return Err(Error::validation("worker pool is empty"));
    }
    for p in pool {
        p.validate()?;
    }
    let threshold = cfg.effective_threshold();
    let mut out = ProtocolOutput {
        annotations: Vec::new(),
        records: Vec::new(),
        tasks: Vec::new(),
        rounds: Vec::new(),
    };
    for pass in 1..=cfg.passes {
        let mut pending: Vec<usize> = tiles.iter().map(|t| t.tile_id).collect();
        let mut done: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
        let mut pass_polygons: Vec<Polygon> = Vec::new();
        let mut round = 0;
        loop {
            round += 1;
            let before = pass_polygons.len();
            for &tid in &pending {
                let tile = tiles
                    .iter()
                    .find(|t| t.tile_id == tid)
                    .ok_or_else(|| Error::validation(format!("unknown tile {tid}")))?;
                let worker = &pool[rng.random_range(0..pool.len())];
                let already = done.entry(tid).or_default();
                let drawn = simulate_worker(gt_cells, tile, already, worker, cfg.cells_per_task, rng);
                out.tasks.push(TaskRecord {
                    pass,
                    round,
                    tile_id: tid,
                    worker_id: worker.worker_id.clone(),
                    n_polygons: drawn.len(),
                });
                if drawn.is_empty() {
                    continue;
                }
                let polys: Vec<Polygon> = drawn.iter().map(|(_, p)| p.clone()).collect();
                already.extend(drawn.iter().map(|(k, _)| *k));
                let (ann, _) = build_annotation(&worker.worker_id, &polys, cfg.ring_width, dims)?;
                out.annotations.push(ann);
                pass_polygons.extend(polys.iter().cloned());
                out.records.push(PolygonRecord {
                    worker_id: worker.worker_id.clone(),
                    tile_id: tid,
                    polygons: polys,
                });
            }
            let next = get_not_covered_tiles(tiles, &pass_polygons, dims, cfg.dilation_radius(), threshold)?;
            let stalled = next == pending && pass_polygons.len() == before;
            pending = next;
            if pending.is_empty() || stalled {
                break;
            }
        }
        log::info!(
            "protocol pass {pass}: {round} rounds, {} tiles left uncovered",
            pending.len()
        );
        out.rounds.push(round);
    }
    Ok(out)
}
