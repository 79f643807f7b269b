//! Worker-model learning: EM with a single persistent Gibbs chain.
//!
//! Each iteration performs one warm-started sweep of the posterior chain,
//! counts per-worker agreement between the new sample and the worker's
//! labels, and moves every confusion matrix a step `λ` toward the
//! normalized counts. Appearance, shading and prior refreshes are optional
//! and run on a fixed stride.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dims, Error, Result};
use crate::gibbs::{ChainState, MarginalField, Posterior};
use crate::grid::{Annotation, ImageGrid, LabelGrid};
use crate::mrf::{fit_appearance, prior_stats, update_prior_pcd, update_shading, MrfModel};

const ROW_TOL: f64 = 1e-12;

/// `p[l][l']` is the probability that a worker reports `l'` when the true
/// label is `l`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[[f64; 2]; 2]", into = "[[f64; 2]; 2]")]
pub struct ConfusionMatrix {
    p: [[f64; 2]; 2],
}

impl ConfusionMatrix {
    pub fn new(p: [[f64; 2]; 2]) -> Result<Self> {
        for (l, row) in p.iter().enumerate() {
            if row.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(Error::validation(format!(
                    "confusion row {l} has invalid entry {row:?}"
                )));
            }
            if (row[0] + row[1] - 1.0).abs() > ROW_TOL {
                return Err(Error::validation(format!(
                    "confusion row {l} sums to {}",
                    row[0] + row[1]
                )));
            }
        }
        Ok(ConfusionMatrix { p })
    }

    /// Symmetric matrix with `diag` on the diagonal.
    pub fn with_diagonal(diag: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&diag) {
            return Err(Error::validation(format!("diagonal {diag} outside [0, 1]")));
        }
        Ok(ConfusionMatrix {
            p: [[diag, 1.0 - diag], [1.0 - diag, diag]],
        })
    }

    pub fn identity() -> Self {
        ConfusionMatrix {
            p: [[1.0, 0.0], [0.0, 1.0]],
        }
    }

    /// `p(reported | truth)`.
    #[inline]
    pub fn prob(&self, truth: u8, reported: u8) -> f64 {
        self.p[truth as usize][reported as usize]
    }

    #[inline]
    pub fn log_prob(&self, truth: u8, reported: u8) -> f64 {
        self.prob(truth, reported).ln()
    }

    #[inline]
    pub fn table(&self) -> [[f64; 2]; 2] {
        self.p
    }

    /// The matrix of a worker whose labels were all flipped.
    pub fn label_swapped(&self) -> Self {
        let p = self.p;
        ConfusionMatrix {
            p: [[p[1][1], p[1][0]], [p[0][1], p[0][0]]],
        }
    }

    /// Expected fraction of correct labels given the true-label frequency.
    pub fn accuracy(&self, p1: f64) -> f64 {
        (1.0 - p1) * self.p[0][0] + p1 * self.p[1][1]
    }
}

impl TryFrom<[[f64; 2]; 2]> for ConfusionMatrix {
    type Error = Error;

    fn try_from(p: [[f64; 2]; 2]) -> Result<Self> {
        ConfusionMatrix::new(p)
    }
}

impl From<ConfusionMatrix> for [[f64; 2]; 2] {
    fn from(c: ConfusionMatrix) -> Self {
        c.p
    }
}

/// `n[l'][l]`: (soft) number of observed pixels the worker labeled `l'`
/// whose true label is `l`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FrequencyTable {
    pub n: [[f64; 2]; 2],
}

impl FrequencyTable {
    pub fn add(&mut self, other: &FrequencyTable) {
        for a in 0..2 {
            for b in 0..2 {
                self.n[a][b] += other.n[a][b];
            }
        }
    }
}

/// Hard counts `#(z_i = l', ŷ_i = l)` over the worker's observed pixels.
pub fn worker_frequencies(a: &Annotation, y_sample: &LabelGrid) -> Result<FrequencyTable> {
    ensure_dims(a.dims(), y_sample.dims())?;
    let mut t = FrequencyTable::default();
    let z = a.labels().labels();
    let y = y_sample.labels();
    for (i, &obs) in a.observed().bits().iter().enumerate() {
        if obs {
            t.n[z[i] as usize][y[i] as usize] += 1.0;
        }
    }
    Ok(t)
}

/// Soft counts `n(l', l) = Σ_{i: z_i = l'} p(y_i = l)` over observed pixels.
pub fn soft_frequencies(a: &Annotation, marginals: &MarginalField) -> Result<FrequencyTable> {
    ensure_dims(a.dims(), marginals.dims())?;
    let mut t = FrequencyTable::default();
    let z = a.labels().labels();
    for (i, &obs) in a.observed().bits().iter().enumerate() {
        if obs {
            let p1 = marginals.p1()[i];
            let row = &mut t.n[z[i] as usize];
            row[1] += p1;
            row[0] += 1.0 - p1;
        }
    }
    Ok(t)
}

/// `p'(l'|l) = (1 − λ) p(l'|l) + λ n(l', l) / Σ_{l''} n(l'', l)`; rows with
/// an empty count column are kept.
pub fn confusion_step(prev: &ConfusionMatrix, freq: &FrequencyTable, step: f64) -> Result<ConfusionMatrix> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::validation(format!("step size {step} outside (0, 1]")));
    }
    let mut p = prev.p;
    for l in 0..2 {
        let total = freq.n[0][l] + freq.n[1][l];
        if total > 0.0 {
            for lp in 0..2 {
                p[l][lp] = (1.0 - step) * prev.p[l][lp] + step * (freq.n[lp][l] / total);
            }
        }
    }
    Ok(ConfusionMatrix { p })
}

/// Unique worker ids in order of first appearance.
pub fn worker_ids(annotations: &[Annotation]) -> Vec<String> {
    let mut ids: Vec<String> = Vec::new();
    for a in annotations {
        if !ids.iter().any(|w| w == &a.worker_id) {
            ids.push(a.worker_id.clone());
        }
    }
    ids
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearnConfig {
    pub iterations: usize,
    pub step: f64,
    pub init_diagonal: f64,
    pub refresh_appearance: bool,
    pub refresh_shading: bool,
    pub refresh_prior: bool,
    pub refresh_stride: usize,
    pub shading_sweeps: usize,
    pub prior_step: f64,
    pub seed: u64,
}

impl Default for LearnConfig {
    fn default() -> Self {
        LearnConfig {
            iterations: 500,
            step: 0.05,
            init_diagonal: 0.8,
            refresh_appearance: true,
            refresh_shading: true,
            refresh_prior: false,
            refresh_stride: 10,
            shading_sweeps: 5,
            prior_step: 0.1,
            seed: 0,
        }
    }
}

impl LearnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::validation("learner iterations must be at least 1"));
        }
        if !(self.step > 0.0 && self.step <= 1.0) {
            return Err(Error::validation(format!("learner step {} outside (0, 1]", self.step)));
        }
        if !(0.0..=1.0).contains(&self.init_diagonal) {
            return Err(Error::validation("init_diagonal outside [0, 1]"));
        }
        if self.refresh_stride == 0 {
            return Err(Error::validation("refresh_stride must be positive"));
        }
        Ok(())
    }
}

/// Diagnostics for one EM iteration (iteration 0 is the initialization).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub confusions: BTreeMap<String, ConfusionMatrix>,
    /// Log pseudo-likelihood `Σ_i log p(ŷ_i | rest)` of the chain's sample.
    pub pseudo_loglik: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: MrfModel,
    pub chain: ChainState,
    pub history: Vec<IterationRecord>,
}

/// Joint learning of worker confusion matrices (and optionally appearance,
/// shading and prior) from one image and its annotations.
///
/// Runs `cfg.iterations` EM iterations; the history holds one extra record
/// for the initial state.
pub fn learn(x: &ImageGrid, annotations: &[Annotation], model0: &MrfModel, cfg: &LearnConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    if annotations.is_empty() {
        return Err(Error::validation("learning needs at least one annotation"));
    }
    model0.validate()?;
    ensure_dims(x.dims(), model0.dims())?;
    for a in annotations {
        ensure_dims(x.dims(), a.dims())?;
    }

    let mut model = model0.clone();
    let init = ConfusionMatrix::with_diagonal(cfg.init_diagonal)?;
    let ids = worker_ids(annotations);
    for id in &ids {
        model.confusions.entry(id.clone()).or_insert(init);
    }
    // annotations grouped by worker, in worker order
    let by_worker: Vec<Vec<&Annotation>> = ids
        .iter()
        .map(|id| annotations.iter().filter(|a| &a.worker_id == id).collect())
        .collect();

    let mut posterior = Posterior::new(&model, Some(x), annotations)?;
    let mut chain = ChainState::random(x.dims(), cfg.seed);
    let mut model_chain = cfg
        .refresh_prior
        .then(|| ChainState::random(x.dims(), cfg.seed ^ 0x9e37_79b9_7f4a_7c15));

    let snapshot = |model: &MrfModel| -> BTreeMap<String, ConfusionMatrix> {
        ids.iter().map(|id| (id.clone(), model.confusions[id])).collect()
    };
    let mut history = Vec::with_capacity(cfg.iterations + 1);
    history.push(IterationRecord {
        iteration: 0,
        confusions: snapshot(&model),
        pseudo_loglik: posterior.pseudo_loglik(&chain.labeling)?,
    });

    for t in 1..=cfg.iterations {
        posterior.sweep(&mut chain)?;
        let sample = &chain.labeling;

        for (id, group) in ids.iter().zip(&by_worker) {
            let mut freq = FrequencyTable::default();
            for a in group {
                freq.add(&worker_frequencies(a, sample)?);
            }
            let prev = model.confusions[id];
            model
                .confusions
                .insert(id.clone(), confusion_step(&prev, &freq, cfg.step)?);
        }
        posterior.set_confusions(&model)?;

        if t % cfg.refresh_stride == 0 {
            let mut appearance_changed = false;
            if cfg.refresh_appearance {
                model.appearance = fit_appearance(x, sample, &model.shading, &model.appearance)?.params;
                appearance_changed = true;
            }
            if cfg.refresh_shading {
                model.shading = update_shading(x, sample, &model.appearance, &model.shading, cfg.shading_sweeps)?;
                appearance_changed = true;
            }
            if appearance_changed {
                posterior.set_appearance(&model, x)?;
            }
            if let Some(mc) = model_chain.as_mut() {
                let prior_only = Posterior::prior_only(&model)?;
                prior_only.sweep(mc)?;
                let data = prior_stats(sample, &model.classes);
                let free = prior_stats(&mc.labeling, &model.classes);
                model.prior = update_prior_pcd(&data, &free, &model.prior, cfg.prior_step)?;
                posterior.set_prior(&model);
            }
        }

        history.push(IterationRecord {
            iteration: t,
            confusions: snapshot(&model),
            pseudo_loglik: posterior.pseudo_loglik(&chain.labeling)?,
        });
    }

    Ok(TrainedModel { model, chain, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::EdgeClassSet;
    use crate::grid::{Dims, Mask};
    use crate::mrf::{AppearanceParams, PriorParams, ShadingField};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn d(w: usize, h: usize) -> Dims {
        Dims::new(w, h).unwrap()
    }

    #[test]
    fn perfect_agreement_has_no_off_diagonal() {
        let dims = d(4, 2);
        let y = LabelGrid::new(dims, vec![0, 1, 1, 0, 1, 1, 0, 0]).unwrap();
        let a = Annotation::complete("u", y.clone());
        let t = worker_frequencies(&a, &y).unwrap();
        assert_eq!(t.n[0][1], 0.0);
        assert_eq!(t.n[1][0], 0.0);
        assert_eq!(t.n[0][0] + t.n[1][1], 8.0);
    }

    #[test]
    fn hard_counts_by_hand() {
        let dims = d(3, 1);
        let a = Annotation::new(
            "u",
            LabelGrid::new(dims, vec![1, 0, 1]).unwrap(),
            Mask::new(dims, vec![true, true, false]).unwrap(),
        )
        .unwrap();
        let y = LabelGrid::new(dims, vec![1, 1, 0]).unwrap();
        let t = worker_frequencies(&a, &y).unwrap();
        assert_eq!(t.n, [[0.0, 1.0], [0.0, 1.0]]);
    }

    #[test]
    fn soft_counts_by_hand() {
        let dims = d(2, 1);
        let a = Annotation::complete("u", LabelGrid::new(dims, vec![1, 0]).unwrap());
        let m = MarginalField::new(dims, vec![0.9, 0.2], 1).unwrap();
        let t = soft_frequencies(&a, &m).unwrap();
        assert_eq!(t.n[1][1], 0.9);
        assert!((t.n[1][0] - 0.1).abs() < 1e-15);
        assert_eq!(t.n[0][1], 0.2);
        assert_eq!(t.n[0][0], 0.8);
    }

    #[test]
    fn empty_mask_gives_zero_table() {
        let dims = d(2, 2);
        let a = Annotation::new("u", LabelGrid::filled(dims, 1), Mask::empty(dims)).unwrap();
        let t = worker_frequencies(&a, &LabelGrid::filled(dims, 1)).unwrap();
        assert_eq!(t, FrequencyTable::default());
    }

    #[test]
    fn full_step_equals_normalized_counts() {
        let prev = ConfusionMatrix::with_diagonal(0.8).unwrap();
        let f = FrequencyTable {
            n: [[3.0, 1.0], [1.0, 4.0]],
        };
        let c = confusion_step(&prev, &f, 1.0).unwrap();
        assert_eq!(c.prob(0, 0), 3.0 / 4.0);
        assert_eq!(c.prob(0, 1), 1.0 / 4.0);
        assert_eq!(c.prob(1, 1), 4.0 / 5.0);
        assert_eq!(c.prob(1, 0), 1.0 / 5.0);
    }

    #[test]
    fn half_step_convex_combination() {
        let prev = ConfusionMatrix::with_diagonal(0.5).unwrap();
        // column l = 1 normalizes to p(1|1) = 0.8
        let f = FrequencyTable {
            n: [[1.0, 2.0], [1.0, 8.0]],
        };
        let c = confusion_step(&prev, &f, 0.5).unwrap();
        assert!((c.prob(1, 1) - 0.65).abs() < 1e-15);
        assert!((c.prob(1, 0) + c.prob(1, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_column_keeps_row() {
        let prev = ConfusionMatrix::new([[0.7, 0.3], [0.4, 0.6]]).unwrap();
        let f = FrequencyTable {
            n: [[0.0, 2.0], [0.0, 3.0]],
        };
        let c = confusion_step(&prev, &f, 1.0).unwrap();
        assert_eq!(c.table()[0], [0.7, 0.3]);
        assert_eq!(c.table()[1], [0.4, 0.6]);
    }

    #[test]
    fn rejects_invalid_step() {
        let prev = ConfusionMatrix::identity();
        let f = FrequencyTable::default();
        assert!(confusion_step(&prev, &f, 0.0).is_err());
        assert!(confusion_step(&prev, &f, 1.5).is_err());
    }

    #[test]
    fn confusion_matrix_validation() {
        assert!(ConfusionMatrix::new([[0.5, 0.5], [0.2, 0.9]]).is_err());
        assert!(ConfusionMatrix::new([[-0.1, 1.1], [0.2, 0.8]]).is_err());
        assert!(ConfusionMatrix::new([[0.5, 0.5], [0.2, 0.8]]).is_ok());
    }

    fn stripes(dims: Dims) -> LabelGrid {
        LabelGrid::new(
            dims,
            (0..dims.len()).map(|i| ((dims.coords(i).0 / 3) % 2) as u8).collect(),
        )
        .unwrap()
    }

    fn contrast_image(gt: &LabelGrid, seed: u64) -> ImageGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageGrid::new(
            gt.dims(),
            gt.labels()
                .iter()
                .map(|&l| if l == 1 { 0.3 } else { 0.7 } + 0.05 * (rng.random::<f64>() - 0.5))
                .collect(),
        )
        .unwrap()
    }

    fn model_for(dims: Dims) -> MrfModel {
        let classes = EdgeClassSet::four_connected();
        MrfModel {
            prior: PriorParams::potts(classes.len(), 0.3),
            appearance: AppearanceParams::new([vec![0.1, 0.9], vec![0.9, 0.1]], vec![0.3, 0.7], 0.1).unwrap(),
            shading: ShadingField::zeros(dims, 10.0),
            classes,
            confusions: BTreeMap::new(),
        }
    }

    #[test]
    fn perfect_worker_recovered() {
        let dims = d(24, 24);
        let gt = stripes(dims);
        let x = contrast_image(&gt, 1);
        let a = Annotation::complete("perfect", gt.clone());
        let cfg = LearnConfig {
            iterations: 200,
            seed: 3,
            ..LearnConfig::default()
        };
        let out = learn(&x, &[a], &model_for(dims), &cfg).unwrap();
        let c = out.model.confusions["perfect"];
        assert!(c.prob(0, 0) >= 0.95 && c.prob(1, 1) >= 0.95, "{c:?}");
        assert_eq!(out.history.len(), 201);
        for rec in &out.history {
            for m in rec.confusions.values() {
                for row in m.table() {
                    assert!((row[0] + row[1] - 1.0).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn coin_flip_worker_is_uninformative() {
        let dims = d(24, 24);
        let gt = stripes(dims);
        let x = contrast_image(&gt, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let coin = LabelGrid::new(dims, (0..dims.len()).map(|_| rng.random_range(0..2u8)).collect()).unwrap();
        let good = Annotation::complete("good", gt.clone());
        let noise = Annotation::complete("coin", coin);
        let cfg = LearnConfig {
            iterations: 300,
            seed: 4,
            ..LearnConfig::default()
        };
        let out = learn(&x, &[good, noise], &model_for(dims), &cfg).unwrap();
        let c = out.model.confusions["coin"];
        for l in 0..2 {
            assert!((c.prob(l, 0) - c.prob(l, 1)).abs() < 0.1, "{c:?}");
        }
        // rows approach the marginal label frequency of the coin (about 1/2)
        assert!(
            (c.prob(0, 1) - 0.5).abs() < 0.1 && (c.prob(1, 1) - 0.5).abs() < 0.1,
            "{c:?}"
        );
    }

    #[test]
    fn vanishing_step_barely_moves() {
        let dims = d(8, 8);
        let gt = stripes(dims);
        let x = contrast_image(&gt, 3);
        let a = Annotation::complete("u", gt.flipped());
        let cfg = LearnConfig {
            iterations: 1,
            step: 1e-9,
            ..LearnConfig::default()
        };
        let out = learn(&x, &[a], &model_for(dims), &cfg).unwrap();
        let c = out.model.confusions["u"];
        let init = ConfusionMatrix::with_diagonal(0.8).unwrap();
        for l in 0..2 {
            for lp in 0..2 {
                assert!((c.prob(l, lp) - init.prob(l, lp)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn dims_mismatch_rejected_before_iterating() {
        let x = contrast_image(&stripes(d(8, 8)), 0);
        let a = Annotation::complete("u", LabelGrid::filled(d(4, 4), 1));
        let err = learn(&x, &[a], &model_for(d(8, 8)), &LearnConfig::default()).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn learning_is_deterministic() {
        let dims = d(12, 12);
        let gt = stripes(dims);
        let x = contrast_image(&gt, 5);
        let a = Annotation::complete("u", gt);
        let cfg = LearnConfig {
            iterations: 30,
            refresh_prior: true,
            seed: 17,
            ..LearnConfig::default()
        };
        let m = model_for(dims);
        let r1 = learn(&x, std::slice::from_ref(&a), &m, &cfg).unwrap();
        let r2 = learn(&x, std::slice::from_ref(&a), &m, &cfg).unwrap();
        assert_eq!(r1.history, r2.history);
        assert_eq!(r1.chain.labeling, r2.chain.labeling);
        assert_eq!(r1.model, r2.model);
    }
}
