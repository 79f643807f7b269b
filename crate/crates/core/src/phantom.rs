//! Synthetic epithelium images: a seeded Voronoi mesh with bright
//! membranes, smooth shading and Gaussian noise.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Dims, ImageGrid, LabelGrid, Mask};
use crate::raster::{clip_half_plane, polygon_from_ring, rasterize_polygon, Point, Polygon};

const SHADING_WAVES: usize = 6;
const PLACEMENT_ATTEMPTS_PER_CELL: usize = 2000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub width: usize,
    pub height: usize,
    pub n_cells: usize,
    /// Full membrane thickness in pixels.
    pub membrane_width: f64,
    pub interior_mean: f64,
    pub membrane_mean: f64,
    pub noise_sigma: f64,
    /// Standard deviation of the additive shading field.
    pub shading_amplitude: f64,
    /// Typical wavelength of the shading field in pixels.
    pub shading_scale: f64,
    /// Minimum distance between Voronoi sites; defaults to
    /// `0.6·sqrt(area / n_cells)`.
    pub min_seed_distance: Option<f64>,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            width: 128,
            height: 128,
            n_cells: 60,
            membrane_width: 3.0,
            interior_mean: 0.3,
            membrane_mean: 0.7,
            noise_sigma: 0.08,
            shading_amplitude: 0.1,
            shading_scale: 32.0,
            min_seed_distance: None,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn dims(&self) -> Result<Dims> {
        Dims::new(self.width, self.height)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = self.dims()?;
        if self.n_cells == 0 {
            return Err(Error::validation("n_cells must be at least 1"));
        }
        if !(self.membrane_width >= 1.0) {
            return Err(Error::validation("membrane_width must be at least 1"));
        }
        if !(self.noise_sigma >= 0.0) || !(self.shading_amplitude >= 0.0) || !(self.shading_scale > 0.0) {
            return Err(Error::validation(
                "noise, shading amplitude and scale must be nonnegative/positive",
            ));
        }
        if !self.interior_mean.is_finite() || !self.membrane_mean.is_finite() {
            return Err(Error::validation("intensity means must be finite"));
        }
        let per_cell = (self.membrane_width + 1.0).powi(2);
        if self.n_cells as f64 * per_cell > dims.len() as f64 {
            return Err(Error::validation(format!(
                "{} cells do not fit a {dims} image with membrane width {}",
                self.n_cells, self.membrane_width
            )));
        }
        Ok(())
    }

    fn seed_distance(&self) -> f64 {
        self.min_seed_distance
            .unwrap_or_else(|| 0.6 * ((self.width * self.height) as f64 / self.n_cells as f64).sqrt())
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub image: ImageGrid,
    pub labels: LabelGrid,
    /// Cell interiors; the ground truth is exactly their rasterized union.
    pub cells: Vec<Polygon>,
    pub seeds: Vec<Point>,
}

fn place_seeds(cfg: &PhantomConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Point>> {
    let d2 = cfg.seed_distance().powi(2);
    let mut seeds: Vec<Point> = Vec::with_capacity(cfg.n_cells);
    let mut attempts = 0;
    while seeds.len() < cfg.n_cells {
        attempts += 1;
        if attempts > PLACEMENT_ATTEMPTS_PER_CELL * cfg.n_cells {
            return Err(Error::validation(format!(
                "could only place {} of {} cells with minimum distance {:.2}",
                seeds.len(),
                cfg.n_cells,
                cfg.seed_distance()
            )));
        }
        let p = Point::new(
            rng.random::<f64>() * cfg.width as f64,
            rng.random::<f64>() * cfg.height as f64,
        );
        if seeds.iter().all(|q| (p.x - q.x).powi(2) + (p.y - q.y).powi(2) >= d2) {
            seeds.push(p);
        }
    }
    Ok(seeds)
}

/// Voronoi cell of `seeds[k]` inside the image rectangle, shrunk by half
/// the membrane width along every shared boundary.
fn cell_polygon(seeds: &[Point], k: usize, half_width: f64, w: f64, h: f64) -> Option<Polygon> {
    let mut ring = vec![
        Point::new(0.0, 0.0),
        Point::new(w, 0.0),
        Point::new(w, h),
        Point::new(0.0, h),
    ];
    let s = seeds[k];
    for (j, &t) in seeds.iter().enumerate() {
        if j == k || ring.is_empty() {
            continue;
        }
        let (dx, dy) = (s.x - t.x, s.y - t.y);
        let len = (dx * dx + dy * dy).sqrt();
        let (nx, ny) = (dx / len, dy / len);
        let mid = Point::new(0.5 * (s.x + t.x), 0.5 * (s.y + t.y));
        ring = clip_half_plane(&ring, nx, ny, nx * mid.x + ny * mid.y + half_width);
    }
    polygon_from_ring(ring)
}

/// Additive shading: a sum of random plane waves with standard deviation
/// `amplitude`.
fn shading_field(cfg: &PhantomConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64)> = (0..SHADING_WAVES)
        .map(|_| {
            let theta = rng.random::<f64>() * 2.0 * PI;
            let wavelength = cfg.shading_scale * (0.75 + 0.75 * rng.random::<f64>());
            let k = 2.0 * PI / wavelength;
            (k * theta.cos(), k * theta.sin(), rng.random::<f64>() * 2.0 * PI)
        })
        .collect();
    let gain = cfg.shading_amplitude * (2.0 / SHADING_WAVES as f64).sqrt();
    let mut out = Vec::with_capacity(cfg.width * cfg.height);
    for row in 0..cfg.height {
        for col in 0..cfg.width {
            let (x, y) = (col as f64 + 0.5, row as f64 + 0.5);
            let v: f64 = waves.iter().map(|&(kx, ky, phi)| (kx * x + ky * y + phi).cos()).sum();
            out.push(gain * v);
        }
    }
    out
}

pub fn generate_phantom(cfg: &PhantomConfig) -> Result<Phantom> {
    cfg.validate()?;
    let dims = cfg.dims()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let seeds = place_seeds(cfg, &mut rng)?;
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let mut cells = Vec::with_capacity(seeds.len());
    let mut interior = Mask::empty(dims);
    for k in 0..seeds.len() {
        match cell_polygon(&seeds, k, 0.5 * cfg.membrane_width, w, h) {
            Some(poly) => {
                interior.union_with(&rasterize_polygon(&poly, dims)?)?;
                cells.push(poly);
            }
            None => log::warn!("phantom cell {k} vanished after membrane shrinking"),
        }
    }
    let labels = LabelGrid::from_mask(&interior);
    let shading = shading_field(cfg, &mut rng);
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::validation(e.to_string()))?;
    let values = labels
        .labels()
        .iter()
        .zip(&shading)
        .map(|(&l, &s)| {
            let mean = if l == 1 { cfg.interior_mean } else { cfg.membrane_mean };
            (mean + s + noise.sample(&mut rng)).clamp(0.0, 1.0)
        })
        .collect();
    Ok(Phantom {
        image: ImageGrid::new(dims, values)?,
        labels,
        cells,
        seeds,
    })
}

/// Number of 4-connected components of label-1 pixels.
pub fn count_components(y: &LabelGrid) -> usize {
    let dims = y.dims();
    let mut seen = vec![false; dims.len()];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..dims.len() {
        if seen[start] || y.get(start) != 1 {
            continue;
        }
        count += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            for (dx, dy) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
                if let Some(j) = dims.offset(i, dx, dy) {
                    if !seen[j] && y.get(j) == 1 {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
    }
    count
}
