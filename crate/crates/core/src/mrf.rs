//! The image-aware generative model: a pairwise MRF prior over labelings,
//! a Gaussian-mixture appearance model on shading-corrected gray values and
//! per-worker confusion matrices.
//!
//! The partition function of the prior is never computed. Everything here
//! works with energy differences or sampled statistics.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::em::ConfusionMatrix;
use crate::error::{ensure_dims, Error, Result};
use crate::grid::{Annotation, Dims, EdgeClassSet, ImageGrid, LabelGrid};

/// Lower bound on the shared mixture standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-4;

/// Unary and per-edge-class pairwise potentials (energies, lower is more
/// probable).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorParams {
    pub unary: [f64; 2],
    /// `pairwise[c][a][b]` is the energy of label `a` at `i` and `b` at `i + v_c`.
    pub pairwise: Vec<[[f64; 2]; 2]>,
}

impl PriorParams {
    /// Potts potentials: zero unary, `beta` for every disagreeing pair.
    pub fn potts(n_classes: usize, beta: f64) -> Self {
        PriorParams {
            unary: [0.0, 0.0],
            pairwise: vec![[[0.0, beta], [beta, 0.0]]; n_classes],
        }
    }

    pub fn flat(n_classes: usize) -> Self {
        Self::potts(n_classes, 0.0)
    }

    pub fn validate(&self, classes: &EdgeClassSet) -> Result<()> {
        if self.pairwise.len() != classes.len() {
            return Err(Error::validation(format!(
                "prior has {} pairwise tables for {} edge classes",
                self.pairwise.len(),
                classes.len()
            )));
        }
        let finite =
            self.unary.iter().all(|v| v.is_finite()) && self.pairwise.iter().flatten().flatten().all(|v| v.is_finite());
        if !finite {
            return Err(Error::validation("prior potentials must be finite"));
        }
        Ok(())
    }

    /// Same model with the roles of labels 0 and 1 exchanged.
    pub fn label_swapped(&self) -> Self {
        PriorParams {
            unary: [self.unary[1], self.unary[0]],
            pairwise: self
                .pairwise
                .iter()
                .map(|t| [[t[1][1], t[1][0]], [t[0][1], t[0][0]]])
                .collect(),
        }
    }
}

/// Label-specific mixture weights over a shared pool of Gaussians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppearanceParams {
    /// `weights[l][j]`, each row sums to one.
    pub weights: [Vec<f64>; 2],
    pub means: Vec<f64>,
    pub sigma: f64,
}

impl AppearanceParams {
    pub fn new(weights: [Vec<f64>; 2], means: Vec<f64>, sigma: f64) -> Result<Self> {
        let a = AppearanceParams { weights, means, sigma };
        a.validate()?;
        Ok(a)
    }

    /// One component shared by both labels; carries no label information.
    pub fn flat() -> Self {
        AppearanceParams {
            weights: [vec![1.0], vec![1.0]],
            means: vec![0.5],
            sigma: 1.0,
        }
    }

    #[inline]
    pub fn components(&self) -> usize {
        self.means.len()
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.means.len();
        if j == 0 {
            return Err(Error::validation("appearance model needs at least one component"));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::validation(format!("sigma must be positive, got {}", self.sigma)));
        }
        if self.means.iter().any(|m| !m.is_finite()) {
            return Err(Error::validation("mixture means must be finite"));
        }
        for (l, w) in self.weights.iter().enumerate() {
            if w.len() != j {
                return Err(Error::validation(format!(
                    "label {l} has {} weights for {j} components",
                    w.len()
                )));
            }
            if w.iter().any(|&v| !(v >= 0.0)) {
                return Err(Error::validation(format!("label {l} has a negative weight")));
            }
            let s: f64 = w.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::validation(format!("label {l} weights sum to {s}")));
            }
        }
        Ok(())
    }

    #[inline]
    fn log_gauss(&self, residual: f64, j: usize) -> f64 {
        let d = residual - self.means[j];
        -0.5 * (2.0 * PI).ln() - self.sigma.ln() - d * d / (2.0 * self.sigma * self.sigma)
    }

    /// `log Σ_j w[label][j] · N(residual; μ_j, σ²)`.
    pub fn log_density(&self, residual: f64, label: u8) -> f64 {
        let w = &self.weights[label as usize];
        let mut terms = [0.0f64; 8];
        let mut heap;
        let buf: &mut [f64] = if w.len() <= terms.len() {
            &mut terms[..w.len()]
        } else {
            heap = vec![0.0; w.len()];
            &mut heap
        };
        for (j, t) in buf.iter_mut().enumerate() {
            *t = w[j].ln() + self.log_gauss(residual, j);
        }
        log_sum_exp(buf)
    }

    fn responsibilities(&self, residual: f64, label: u8, out: &mut [f64]) {
        let w = &self.weights[label as usize];
        for (j, o) in out.iter_mut().enumerate() {
            *o = w[j].ln() + self.log_gauss(residual, j);
        }
        let lse = log_sum_exp(out);
        for o in out.iter_mut() {
            *o = (*o - lse).exp();
        }
    }
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Smooth additive intensity offset, regularized by a Gaussian MRF on
/// 4-neighbor differences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShadingField {
    pub dims: Dims,
    pub values: Vec<f64>,
    pub smoothness_weight: f64,
}

impl ShadingField {
    pub fn zeros(dims: Dims, smoothness_weight: f64) -> Self {
        ShadingField {
            dims,
            values: vec![0.0; dims.len()],
            smoothness_weight,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.dims.len() {
            return Err(Error::validation("shading field length does not match its dims"));
        }
        if !(self.smoothness_weight > 0.0) {
            return Err(Error::validation("shading smoothness weight must be positive"));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("shading field has non-finite values"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MrfModel {
    pub prior: PriorParams,
    pub appearance: AppearanceParams,
    pub shading: ShadingField,
    pub classes: EdgeClassSet,
    pub confusions: BTreeMap<String, ConfusionMatrix>,
}

impl MrfModel {
    pub fn dims(&self) -> Dims {
        self.shading.dims
    }

    pub fn validate(&self) -> Result<()> {
        self.prior.validate(&self.classes)?;
        self.appearance.validate()?;
        self.shading.validate()
    }

    pub fn confusion(&self, worker_id: &str) -> Result<&ConfusionMatrix> {
        self.confusions
            .get(worker_id)
            .ok_or_else(|| Error::validation(format!("no confusion matrix for worker {worker_id}")))
    }
}

/// `Σ_i ψ0(y_i) + Σ_c Σ_{(i,j) ∈ E_c} ψ_c(y_i, y_j)`.
pub fn prior_energy(y: &LabelGrid, p: &PriorParams, classes: &EdgeClassSet) -> f64 {
    let dims = y.dims();
    let labels = y.labels();
    let mut e: f64 = labels.iter().map(|&l| p.unary[l as usize]).sum();
    for (table, &(dx, dy)) in p.pairwise.iter().zip(classes.offsets()) {
        for i in 0..dims.len() {
            if let Some(j) = dims.offset(i, dx, dy) {
                e += table[labels[i] as usize][labels[j] as usize];
            }
        }
    }
    e
}

/// Prior energy of assigning `label` at site `i` given the neighbors' labels
/// in `y` (unary plus every incident pairwise term).
pub fn local_prior_energy(i: usize, label: u8, y: &LabelGrid, p: &PriorParams, classes: &EdgeClassSet) -> f64 {
    let dims = y.dims();
    let l = label as usize;
    let mut e = p.unary[l];
    for (table, &(dx, dy)) in p.pairwise.iter().zip(classes.offsets()) {
        if let Some(j) = dims.offset(i, dx, dy) {
            e += table[l][y.get(j) as usize];
        }
        if let Some(j) = dims.offset(i, -dx, -dy) {
            e += table[y.get(j) as usize][l];
        }
    }
    e
}

/// `Σ_i log Σ_j w_{y_i,j} N(x_i − s_i; μ_j, σ²)`.
pub fn appearance_loglik(x: &ImageGrid, y: &LabelGrid, a: &AppearanceParams, s: &ShadingField) -> Result<f64> {
    ensure_dims(x.dims(), y.dims())?;
    ensure_dims(x.dims(), s.dims)?;
    let mut total = 0.0;
    for i in 0..x.dims().len() {
        total += a.log_density(x.get(i) - s.values[i], y.get(i));
    }
    if !total.is_finite() {
        return Err(Error::numeric(format!("appearance log-likelihood is {total}")));
    }
    Ok(total)
}

/// Normalized single-site conditional `[p(y_i = 0 | rest), p(y_i = 1 | rest)]`.
///
/// `x = None` drops the appearance factor. Only annotations whose observed
/// mask covers `i` contribute.
pub fn site_conditional(
    i: usize,
    x: Option<&ImageGrid>,
    y: &LabelGrid,
    model: &MrfModel,
    annotations: &[Annotation],
) -> Result<[f64; 2]> {
    let mut log_mass = [0.0f64; 2];
    for label in 0..2u8 {
        let l = label as usize;
        log_mass[l] = -local_prior_energy(i, label, y, &model.prior, &model.classes);
        if let Some(x) = x {
            log_mass[l] += model.appearance.log_density(x.get(i) - model.shading.values[i], label);
        }
        for a in annotations {
            if let Some(z) = a.label_at(i) {
                log_mass[l] += model.confusion(&a.worker_id)?.log_prob(label, z);
            }
        }
    }
    normalize_log_pair(log_mass)
}

/// Turns two log masses into probabilities, failing when both vanish.
pub(crate) fn normalize_log_pair(log_mass: [f64; 2]) -> Result<[f64; 2]> {
    let m = log_mass[0].max(log_mass[1]);
    if m == f64::NEG_INFINITY || m.is_nan() || log_mass.iter().any(|v| v.is_nan()) {
        return Err(Error::numeric(format!(
            "both label masses vanish (log masses {:?})",
            log_mass
        )));
    }
    let a0 = (log_mass[0] - m).exp();
    let a1 = (log_mass[1] - m).exp();
    let z = a0 + a1;
    Ok([a0 / z, a1 / z])
}

/// Hard component assignment per pixel: the most responsible component for
/// the pixel's label at the current shading.
pub fn shading_assignment(x: &ImageGrid, y: &LabelGrid, a: &AppearanceParams, s: &ShadingField) -> Vec<usize> {
    (0..x.dims().len())
        .map(|i| {
            let r = x.get(i) - s.values[i];
            let w = &a.weights[y.get(i) as usize];
            (0..a.components())
                .map(|j| (j, w[j].ln() + a.log_gauss(r, j)))
                .fold(
                    (0, f64::NEG_INFINITY),
                    |best, cur| if cur.1 > best.1 { cur } else { best },
                )
                .0
        })
        .collect()
}

/// Quadratic shading objective for a fixed component assignment:
/// `Σ_i (x_i − s_i − μ_ĵ(i))² / 2σ² + κ/2 Σ_{4-nbr} (s_i − s_j)²`.
pub fn shading_objective(x: &ImageGrid, assignment: &[usize], a: &AppearanceParams, s: &ShadingField) -> f64 {
    let dims = x.dims();
    let inv = 1.0 / (2.0 * a.sigma * a.sigma);
    let mut data = 0.0;
    let mut smooth = 0.0;
    for i in 0..dims.len() {
        let d = x.get(i) - s.values[i] - a.means[assignment[i]];
        data += d * d * inv;
        for (dx, dy) in [(1, 0), (0, 1)] {
            if let Some(j) = dims.offset(i, dx, dy) {
                let e = s.values[i] - s.values[j];
                smooth += e * e;
            }
        }
    }
    data + 0.5 * s.smoothness_weight * smooth
}

/// Gauss-Seidel sweeps minimizing [`shading_objective`] for a fixed
/// assignment. Each coordinate step is an exact minimizer, so the objective
/// never increases.
pub fn update_shading_with_assignment(
    x: &ImageGrid,
    assignment: &[usize],
    a: &AppearanceParams,
    s: &ShadingField,
    sweeps: usize,
) -> ShadingField {
    let dims = x.dims();
    let precision = 1.0 / (a.sigma * a.sigma);
    let kappa = s.smoothness_weight;
    let mut out = s.clone();
    for _ in 0..sweeps {
        for i in 0..dims.len() {
            let mut nsum = 0.0;
            let mut deg = 0.0;
            for (dx, dy) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
                if let Some(j) = dims.offset(i, dx, dy) {
                    nsum += out.values[j];
                    deg += 1.0;
                }
            }
            let target = x.get(i) - a.means[assignment[i]];
            out.values[i] = (precision * target + kappa * nsum) / (precision + kappa * deg);
        }
    }
    out
}

/// Refreshes the shading field given a labeling sample.
pub fn update_shading(
    x: &ImageGrid,
    y_sample: &LabelGrid,
    a: &AppearanceParams,
    s: &ShadingField,
    sweeps: usize,
) -> Result<ShadingField> {
    ensure_dims(x.dims(), y_sample.dims())?;
    ensure_dims(x.dims(), s.dims)?;
    let assignment = shading_assignment(x, y_sample, a, s);
    Ok(update_shading_with_assignment(x, &assignment, a, s, sweeps))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AppearanceFit {
    pub params: AppearanceParams,
    /// Labels with no pixel in the sample; their weights were left as is.
    pub missing_labels: Vec<u8>,
}

/// One EM step of the label-specific mixture on residuals `x − s`.
pub fn fit_appearance(
    x: &ImageGrid,
    y_sample: &LabelGrid,
    s: &ShadingField,
    a: &AppearanceParams,
) -> Result<AppearanceFit> {
    ensure_dims(x.dims(), y_sample.dims())?;
    ensure_dims(x.dims(), s.dims)?;
    a.validate()?;
    let n = x.dims().len();
    if n == 0 {
        return Err(Error::validation("cannot fit appearance on an empty grid"));
    }
    let k = a.components();
    let mut resp = vec![0.0; k];
    let mut label_mass = [vec![0.0; k], vec![0.0; k]];
    let mut label_count = [0usize; 2];
    let mut comp_mass = vec![0.0; k];
    let mut comp_sum = vec![0.0; k];
    let mut all_resp = vec![0.0; n * k];
    for i in 0..n {
        let l = y_sample.get(i);
        let r = x.get(i) - s.values[i];
        a.responsibilities(r, l, &mut resp);
        label_count[l as usize] += 1;
        for j in 0..k {
            label_mass[l as usize][j] += resp[j];
            comp_mass[j] += resp[j];
            comp_sum[j] += resp[j] * r;
        }
        all_resp[i * k..(i + 1) * k].copy_from_slice(&resp);
    }
    let means: Vec<f64> = (0..k)
        .map(|j| {
            if comp_mass[j] > 0.0 {
                comp_sum[j] / comp_mass[j]
            } else {
                a.means[j]
            }
        })
        .collect();
    let mut ss = 0.0;
    for i in 0..n {
        let r = x.get(i) - s.values[i];
        for j in 0..k {
            let d = r - means[j];
            ss += all_resp[i * k + j] * d * d;
        }
    }
    let sigma = (ss / n as f64).sqrt().max(SIGMA_FLOOR);
    let mut weights = a.weights.clone();
    let mut missing_labels = Vec::new();
    for l in 0..2 {
        if label_count[l] == 0 {
            missing_labels.push(l as u8);
            continue;
        }
        let total: f64 = label_mass[l].iter().sum();
        weights[l] = label_mass[l].iter().map(|m| m / total).collect();
    }
    Ok(AppearanceFit {
        params: AppearanceParams { weights, means, sigma },
        missing_labels,
    })
}

/// Label and pair-configuration frequencies of a labeling: `unary[l]` is the
/// fraction of sites with label `l`, `pairwise[c][a][b]` the fraction of
/// class-`c` edges in configuration `(a, b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorStats {
    pub unary: [f64; 2],
    pub pairwise: Vec<[[f64; 2]; 2]>,
}

pub fn prior_stats(y: &LabelGrid, classes: &EdgeClassSet) -> PriorStats {
    let dims = y.dims();
    let n = dims.len() as f64;
    let ones = y.count(1) as f64;
    let pairwise = classes
        .offsets()
        .iter()
        .map(|&(dx, dy)| {
            let mut t = [[0.0; 2]; 2];
            let mut edges = 0.0;
            for i in 0..dims.len() {
                if let Some(j) = dims.offset(i, dx, dy) {
                    t[y.get(i) as usize][y.get(j) as usize] += 1.0;
                    edges += 1.0;
                }
            }
            if edges > 0.0 {
                for row in &mut t {
                    for v in row.iter_mut() {
                        *v /= edges;
                    }
                }
            }
            t
        })
        .collect();
    PriorStats {
        unary: [(n - ones) / n, ones / n],
        pairwise,
    }
}

/// Moment-matching step `ψ ← ψ − step·(data − model)` followed by gauge
/// fixing (`ψ0(0) = 0`, zero-mean pairwise tables).
pub fn update_prior_pcd(
    data_stats: &PriorStats,
    sample_stats: &PriorStats,
    p: &PriorParams,
    step: f64,
) -> Result<PriorParams> {
    if data_stats.pairwise.len() != p.pairwise.len() || sample_stats.pairwise.len() != p.pairwise.len() {
        return Err(Error::validation(
            "prior statistics do not match the prior's edge classes",
        ));
    }
    let mut unary = [0.0; 2];
    for l in 0..2 {
        unary[l] = p.unary[l] - step * (data_stats.unary[l] - sample_stats.unary[l]);
    }
    let u0 = unary[0];
    unary[0] -= u0;
    unary[1] -= u0;
    let pairwise = p
        .pairwise
        .iter()
        .enumerate()
        .map(|(c, table)| {
            let mut t = [[0.0; 2]; 2];
            for a in 0..2 {
                for b in 0..2 {
                    t[a][b] = table[a][b] - step * (data_stats.pairwise[c][a][b] - sample_stats.pairwise[c][a][b]);
                }
            }
            let mean = (t[0][0] + t[0][1] + t[1][0] + t[1][1]) / 4.0;
            for row in &mut t {
                for v in row.iter_mut() {
                    *v -= mean;
                }
            }
            t
        })
        .collect();
    Ok(PriorParams { unary, pairwise })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Mask;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dims(w: usize, h: usize) -> Dims {
        Dims::new(w, h).unwrap()
    }

    fn flat_model(d: Dims, classes: EdgeClassSet) -> MrfModel {
        MrfModel {
            prior: PriorParams::flat(classes.len()),
            appearance: AppearanceParams::flat(),
            shading: ShadingField::zeros(d, 10.0),
            classes,
            confusions: BTreeMap::new(),
        }
    }

    #[test]
    fn zero_potentials_give_zero_energy() {
        let d = dims(3, 2);
        let classes = EdgeClassSet::dense();
        let y = LabelGrid::new(d, vec![1, 0, 1, 1, 0, 0]).unwrap();
        assert_eq!(prior_energy(&y, &PriorParams::flat(classes.len()), &classes), 0.0);
    }

    #[test]
    fn two_pixel_energy_by_hand() {
        let d = dims(2, 1);
        let classes = EdgeClassSet::new(vec![(1, 0)]).unwrap();
        let p = PriorParams {
            unary: [0.0, 1.0],
            pairwise: vec![[[0.0, 2.0], [2.0, 0.0]]],
        };
        let y = LabelGrid::new(d, vec![1, 0]).unwrap();
        assert_eq!(prior_energy(&y, &p, &classes), 3.0);
    }

    #[test]
    fn label_swap_symmetry_of_energy() {
        let d = dims(4, 3);
        let classes = EdgeClassSet::dense();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = PriorParams {
            unary: [rng.random(), rng.random()],
            pairwise: (0..classes.len())
                .map(|_| [[rng.random(), rng.random()], [rng.random(), rng.random()]])
                .collect(),
        };
        let y = LabelGrid::new(d, (0..12).map(|_| rng.random_range(0..2u8)).collect()).unwrap();
        let a = prior_energy(&y, &p.label_swapped(), &classes);
        let b = prior_energy(&y.flipped(), &p, &classes);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn single_gaussian_loglik() {
        let d = dims(1, 1);
        let x = ImageGrid::new(d, vec![0.0]).unwrap();
        let y = LabelGrid::filled(d, 1);
        let a = AppearanceParams::new([vec![1.0], vec![1.0]], vec![0.0], 1.0).unwrap();
        let s = ShadingField::zeros(d, 1.0);
        let ll = appearance_loglik(&x, &y, &a, &s).unwrap();
        assert!((ll - (1.0 / (2.0 * PI).sqrt()).ln()).abs() < 1e-12);
        assert!((ll + 0.918939).abs() < 1e-6);
    }

    #[test]
    fn duplicated_component_matches_single() {
        let d = dims(3, 1);
        let x = ImageGrid::new(d, vec![0.1, 0.5, 0.9]).unwrap();
        let y = LabelGrid::new(d, vec![0, 1, 1]).unwrap();
        let s = ShadingField::zeros(d, 1.0);
        let one = AppearanceParams::new([vec![1.0], vec![1.0]], vec![0.4], 0.2).unwrap();
        let two = AppearanceParams::new([vec![0.5, 0.5], vec![0.5, 0.5]], vec![0.4, 0.4], 0.2).unwrap();
        let a = appearance_loglik(&x, &y, &one, &s).unwrap();
        let b = appearance_loglik(&x, &y, &two, &s).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn tiny_sigma_is_numeric_error() {
        let d = dims(1, 1);
        let x = ImageGrid::new(d, vec![1.0]).unwrap();
        let y = LabelGrid::filled(d, 0);
        let a = AppearanceParams {
            weights: [vec![1.0], vec![1.0]],
            means: vec![0.0],
            sigma: 1e-300,
        };
        let s = ShadingField::zeros(d, 1.0);
        assert!(matches!(appearance_loglik(&x, &y, &a, &s), Err(Error::Numeric(_))));
    }

    #[test]
    fn symmetric_factors_give_half() {
        let d = dims(3, 3);
        let m = flat_model(d, EdgeClassSet::dense());
        let y = LabelGrid::new(d, vec![0, 1, 0, 1, 1, 0, 0, 1, 1]).unwrap();
        let p = site_conditional(4, None, &y, &m, &[]).unwrap();
        assert_eq!(p, [0.5, 0.5]);
    }

    #[test]
    fn single_worker_conditional_by_hand() {
        let d = dims(1, 1);
        let mut m = flat_model(d, EdgeClassSet::empty());
        // p(1|1) = 0.9, p(1|0) = 0.2
        m.confusions
            .insert("u".into(), ConfusionMatrix::new([[0.8, 0.2], [0.1, 0.9]]).unwrap());
        let a = Annotation::complete("u", LabelGrid::filled(d, 1));
        let y = LabelGrid::filled(d, 0);
        let x = ImageGrid::new(d, vec![0.3]).unwrap();
        let p = site_conditional(0, Some(&x), &y, &m, &[a]).unwrap();
        assert!((p[1] - 0.9 / 1.1).abs() < 1e-12);
        assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unobserved_pixel_ignores_workers() {
        let d = dims(2, 1);
        let mut m = flat_model(d, EdgeClassSet::four_connected());
        m.prior = PriorParams::potts(2, 0.7);
        m.confusions
            .insert("u".into(), ConfusionMatrix::with_diagonal(0.99).unwrap());
        let a = Annotation::new("u", LabelGrid::filled(d, 1), Mask::new(d, vec![false, true]).unwrap()).unwrap();
        let y = LabelGrid::new(d, vec![0, 0]).unwrap();
        let with = site_conditional(0, None, &y, &m, &[a]).unwrap();
        let without = site_conditional(0, None, &y, &m, &[]).unwrap();
        assert_eq!(with, without);
    }

    #[test]
    fn conflicting_certain_workers_are_numeric_error() {
        let d = dims(1, 1);
        let mut m = flat_model(d, EdgeClassSet::empty());
        m.confusions.insert("a".into(), ConfusionMatrix::identity());
        m.confusions.insert("b".into(), ConfusionMatrix::identity());
        let a = Annotation::complete("a", LabelGrid::filled(d, 1));
        let b = Annotation::complete("b", LabelGrid::filled(d, 0));
        let y = LabelGrid::filled(d, 0);
        assert!(matches!(
            site_conditional(0, None, &y, &m, &[a, b]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn zero_residual_is_shading_fixed_point() {
        let d = dims(5, 4);
        let a = AppearanceParams::new([vec![1.0], vec![1.0]], vec![0.4], 0.1).unwrap();
        let x = ImageGrid::new(d, vec![0.4; 20]).unwrap();
        let y = LabelGrid::filled(d, 1);
        let s = ShadingField::zeros(d, 10.0);
        let out = update_shading(&x, &y, &a, &s, 5).unwrap();
        assert!(out.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn heavy_smoothing_keeps_constant_shading() {
        let d = dims(6, 6);
        let a = AppearanceParams::new([vec![1.0], vec![1.0]], vec![0.5], 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = ImageGrid::new(d, (0..36).map(|_| rng.random::<f64>()).collect()).unwrap();
        let y = LabelGrid::filled(d, 0);
        let mut s = ShadingField::zeros(d, 1e9);
        s.values.iter_mut().for_each(|v| *v = 0.25);
        let out = update_shading(&x, &y, &a, &s, 3).unwrap();
        let (lo, hi) = out
            .values
            .iter()
            .fold((f64::MAX, f64::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        assert!(hi - lo < 1e-6);
    }

    #[test]
    fn constant_offset_recovers_constant_shading() {
        let d = dims(8, 8);
        let a = AppearanceParams::new([vec![1.0], vec![1.0]], vec![0.3], 0.05).unwrap();
        let c = 0.12;
        let x = ImageGrid::new(d, vec![0.3 + c; 64]).unwrap();
        let y = LabelGrid::filled(d, 1);
        let s = ShadingField::zeros(d, 10.0);
        let out = update_shading(&x, &y, &a, &s, 400).unwrap();
        for v in &out.values {
            assert!((v - c).abs() < 1e-6, "{v}");
        }
    }

    /// Textbook EM for a mixture with known labels, written without the
    /// log-domain helpers used by the implementation.
    fn oracle_em_step(
        r: &[f64],
        y: &[u8],
        w: &[Vec<f64>; 2],
        mu: &[f64],
        sigma: f64,
    ) -> ([Vec<f64>; 2], Vec<f64>, f64) {
        let k = mu.len();
        let dens =
            |v: f64, j: usize| (-(v - mu[j]).powi(2) / (2.0 * sigma * sigma)).exp() / ((2.0 * PI).sqrt() * sigma);
        let g: Vec<Vec<f64>> = r
            .iter()
            .zip(y)
            .map(|(&v, &l)| {
                let raw: Vec<f64> = (0..k).map(|j| w[l as usize][j] * dens(v, j)).collect();
                let z: f64 = raw.iter().sum();
                raw.into_iter().map(|q| q / z).collect()
            })
            .collect();
        let new_mu: Vec<f64> = (0..k)
            .map(|j| {
                let num: f64 = g.iter().zip(r).map(|(gi, &v)| gi[j] * v).sum();
                let den: f64 = g.iter().map(|gi| gi[j]).sum();
                num / den
            })
            .collect();
        let var: f64 = g
            .iter()
            .zip(r)
            .map(|(gi, &v)| (0..k).map(|j| gi[j] * (v - new_mu[j]).powi(2)).sum::<f64>())
            .sum::<f64>()
            / r.len() as f64;
        let mut new_w = [vec![0.0; k], vec![0.0; k]];
        for l in 0..2 {
            let idx: Vec<usize> = (0..r.len()).filter(|&i| y[i] as usize == l).collect();
            for j in 0..k {
                new_w[l][j] = idx.iter().map(|&i| g[i][j]).sum::<f64>() / idx.len() as f64;
            }
        }
        (new_w, new_mu, var.sqrt())
    }

    #[test]
    fn em_step_matches_oracle_and_increases_loglik() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = dims(20, 10);
        let mut vals = Vec::new();
        let mut labels = Vec::new();
        for i in 0..d.len() {
            let l = (i % 3 != 0) as u8;
            let center = if rng.random::<f64>() < 0.8 {
                [0.8, 0.2][l as usize]
            } else {
                [0.2, 0.8][l as usize]
            };
            vals.push(center + 0.03 * (rng.random::<f64>() - 0.5));
            labels.push(l);
        }
        let x = ImageGrid::new(d, vals.clone()).unwrap();
        let y = LabelGrid::new(d, labels.clone()).unwrap();
        let s = ShadingField::zeros(d, 1.0);
        let a0 = AppearanceParams::new([vec![0.5, 0.5], vec![0.5, 0.5]], vec![0.4, 0.6], 0.3).unwrap();
        let fit = fit_appearance(&x, &y, &s, &a0).unwrap();
        let (w, mu, sigma) = oracle_em_step(&vals, &labels, &a0.weights, &a0.means, a0.sigma);
        for j in 0..2 {
            assert!((fit.params.means[j] - mu[j]).abs() < 1e-12);
            for l in 0..2 {
                assert!((fit.params.weights[l][j] - w[l][j]).abs() < 1e-12);
            }
        }
        assert!((fit.params.sigma - sigma).abs() < 1e-12);
        assert!(fit.params.means[0] < fit.params.means[1]);
        let before = appearance_loglik(&x, &y, &a0, &s).unwrap();
        let after = appearance_loglik(&x, &y, &fit.params, &s).unwrap();
        assert!(after > before);
    }

    #[test]
    fn em_fixed_point_single_component() {
        let d = dims(4, 1);
        // residuals at μ ± σ: the EM update returns the same (w, μ, σ)
        let x = ImageGrid::new(d, vec![0.4, 0.6, 0.4, 0.6]).unwrap();
        let y = LabelGrid::new(d, vec![0, 0, 1, 1]).unwrap();
        let s = ShadingField::zeros(d, 1.0);
        let a = AppearanceParams::new([vec![1.0], vec![1.0]], vec![0.5], 0.1).unwrap();
        let fit = fit_appearance(&x, &y, &s, &a).unwrap();
        assert!((fit.params.means[0] - 0.5).abs() < 1e-15);
        assert!((fit.params.sigma - 0.1).abs() < 1e-15);
        assert_eq!(fit.params.weights, a.weights);
        // all residuals exactly at μ: weights and mean fixed, σ collapses to the floor
        let x = ImageGrid::new(d, vec![0.5; 4]).unwrap();
        let fit = fit_appearance(&x, &y, &s, &a).unwrap();
        assert_eq!(fit.params.means, a.means);
        assert_eq!(fit.params.sigma, SIGMA_FLOOR);
    }

    #[test]
    fn absent_label_weights_untouched() {
        let d = dims(3, 1);
        let x = ImageGrid::new(d, vec![0.1, 0.2, 0.9]).unwrap();
        let y = LabelGrid::filled(d, 1);
        let s = ShadingField::zeros(d, 1.0);
        let a = AppearanceParams::new([vec![0.3, 0.7], vec![0.5, 0.5]], vec![0.2, 0.8], 0.2).unwrap();
        let fit = fit_appearance(&x, &y, &s, &a).unwrap();
        assert_eq!(fit.missing_labels, vec![0]);
        assert_eq!(fit.params.weights[0], vec![0.3, 0.7]);
        assert_ne!(fit.params.weights[1], vec![0.5, 0.5]);
    }

    #[test]
    fn empty_grid_is_rejected() {
        assert!(Dims::new(0, 0).is_err());
    }

    #[test]
    fn pcd_zero_gradient_only_gauge_fixes() {
        let p = PriorParams {
            unary: [0.3, 0.8],
            pairwise: vec![[[0.1, 0.5], [0.5, 0.3]]],
        };
        let stats = PriorStats {
            unary: [0.4, 0.6],
            pairwise: vec![[[0.3, 0.2], [0.2, 0.3]]],
        };
        let out = update_prior_pcd(&stats, &stats, &p, 0.5).unwrap();
        assert!((out.unary[0]).abs() < 1e-15);
        assert!((out.unary[1] - 0.5).abs() < 1e-15);
        let expected = [[-0.25, 0.15], [0.15, -0.05]];
        for a in 0..2 {
            for b in 0..2 {
                assert!((out.pairwise[0][a][b] - expected[a][b]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn pcd_more_agreement_lowers_agreeing_energy() {
        let p = PriorParams::flat(1);
        let data = PriorStats {
            unary: [0.5, 0.5],
            pairwise: vec![[[0.45, 0.05], [0.05, 0.45]]],
        };
        let model = PriorStats {
            unary: [0.5, 0.5],
            pairwise: vec![[[0.25, 0.25], [0.25, 0.25]]],
        };
        let out = update_prior_pcd(&data, &model, &p, 1.0).unwrap();
        assert!(out.pairwise[0][0][0] < 0.0 && out.pairwise[0][1][1] < 0.0);
        assert!(out.pairwise[0][0][1] > 0.0);
    }

    #[test]
    fn pcd_two_pixel_step_by_hand() {
        // data chain: y = (1, 0); model chain: y = (0, 0); one horizontal edge
        let d = dims(2, 1);
        let classes = EdgeClassSet::new(vec![(1, 0)]).unwrap();
        let data = prior_stats(&LabelGrid::new(d, vec![1, 0]).unwrap(), &classes);
        let model = prior_stats(&LabelGrid::new(d, vec![0, 0]).unwrap(), &classes);
        assert_eq!(data.unary, [0.5, 0.5]);
        assert_eq!(data.pairwise[0], [[0.0, 0.0], [1.0, 0.0]]);
        let p = PriorParams {
            unary: [0.0, 0.5],
            pairwise: vec![[[0.0, 1.0], [1.0, 0.0]]],
        };
        let out = update_prior_pcd(&data, &model, &p, 0.1).unwrap();
        // unary: (0 + 0.05, 0.5 - 0.05) -> gauge (0, 0.4)
        assert!((out.unary[1] - 0.4).abs() < 1e-12);
        // pairwise: [[0.1, 1.0], [0.9, 0.0]] minus mean 0.5
        let expected = [[-0.4, 0.5], [0.4, -0.5]];
        for a in 0..2 {
            for b in 0..2 {
                assert!((out.pairwise[0][a][b] - expected[a][b]).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn conditional_prior_ratio_matches_energy_difference(
            seed in 0u64..1000,
            site in 0usize..12,
        ) {
            let d = dims(4, 3);
            let classes = EdgeClassSet::dense();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut m = flat_model(d, classes.clone());
            m.prior = PriorParams {
                unary: [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                pairwise: (0..classes.len())
                    .map(|_| {
                        let off = rng.random_range(-1.0..1.0);
                        let same = rng.random_range(-1.0..1.0);
                        [[same, off], [off, rng.random_range(-1.0..1.0)]]
                    })
                    .collect(),
            };
            let labels: Vec<u8> = (0..12).map(|_| rng.random_range(0..2u8)).collect();
            let mut y0 = LabelGrid::new(d, labels).unwrap();
            y0.set(site, 0);
            let mut y1 = y0.clone();
            y1.set(site, 1);
            let p = site_conditional(site, None, &y0, &m, &[]).unwrap();
            let de = prior_energy(&y1, &m.prior, &classes) - prior_energy(&y0, &m.prior, &classes);
            prop_assert!((p[1] / p[0] - (-de).exp()).abs() < 1e-9 * (-de).exp().max(1.0));
            prop_assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
        }

        #[test]
        fn appearance_shift_invariance(shift in -2.0f64..2.0, seed in 0u64..100) {
            let d = dims(5, 2);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let xs: Vec<f64> = (0..10).map(|_| rng.random()).collect();
            let ss: Vec<f64> = (0..10).map(|_| rng.random_range(-0.1..0.1)).collect();
            let y = LabelGrid::new(d, (0..10).map(|_| rng.random_range(0..2u8)).collect()).unwrap();
            let a = AppearanceParams::new([vec![0.2, 0.8], vec![0.7, 0.3]], vec![0.3, 0.7], 0.15).unwrap();
            let x0 = ImageGrid::new(d, xs.clone()).unwrap();
            let s0 = ShadingField { dims: d, values: ss.clone(), smoothness_weight: 1.0 };
            let x1 = ImageGrid::new(d, xs.iter().map(|v| v + shift).collect()).unwrap();
            let s1 = ShadingField { dims: d, values: ss.iter().map(|v| v + shift).collect(), smoothness_weight: 1.0 };
            let a0 = appearance_loglik(&x0, &y, &a, &s0).unwrap();
            let a1 = appearance_loglik(&x1, &y, &a, &s1).unwrap();
            prop_assert!((a0 - a1).abs() < 1e-9);
        }

        #[test]
        fn shading_sweeps_never_increase_objective(seed in 0u64..200, kappa in 0.1f64..50.0) {
            let d = dims(7, 5);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = ImageGrid::new(d, (0..35).map(|_| rng.random()).collect()).unwrap();
            let y = LabelGrid::new(d, (0..35).map(|_| rng.random_range(0..2u8)).collect()).unwrap();
            let a = AppearanceParams::new([vec![0.9, 0.1], vec![0.2, 0.8]], vec![0.3, 0.7], 0.1).unwrap();
            let mut s = ShadingField::zeros(d, kappa);
            let assign = shading_assignment(&x, &y, &a, &s);
            let mut prev = shading_objective(&x, &assign, &a, &s);
            for _ in 0..5 {
                s = update_shading_with_assignment(&x, &assign, &a, &s, 1);
                let cur = shading_objective(&x, &assign, &a, &s);
                prop_assert!(cur <= prev + 1e-12 * prev.abs().max(1.0));
                prev = cur;
            }
        }

        #[test]
        fn appearance_em_is_monotone(seed in 0u64..200) {
            let d = dims(6, 6);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = ImageGrid::new(d, (0..36).map(|_| rng.random()).collect()).unwrap();
            let y = LabelGrid::new(d, (0..36).map(|_| rng.random_range(0..2u8)).collect()).unwrap();
            let s = ShadingField { dims: d, values: (0..36).map(|_| rng.random_range(-0.1..0.1)).collect(), smoothness_weight: 1.0 };
            let mut a = AppearanceParams::new([vec![0.5, 0.5], vec![0.5, 0.5]], vec![0.2, 0.9], 0.5).unwrap();
            let mut prev = appearance_loglik(&x, &y, &a, &s).unwrap();
            for _ in 0..10 {
                a = fit_appearance(&x, &y, &s, &a).unwrap().params;
                let cur = appearance_loglik(&x, &y, &a, &s).unwrap();
                prop_assert!(cur >= prev - 1e-9);
                prev = cur;
            }
        }
    }
}
