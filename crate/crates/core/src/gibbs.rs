//! Single-site Gibbs sampling from the labeling posterior.
//!
//! [`Posterior`] caches everything about the posterior that does not depend
//! on the current labeling: per-pixel appearance log-likelihoods, a
//! compressed per-pixel list of worker observations and the workers' log
//! confusion tables. Sweeps visit sites in raster order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::em::worker_ids;
use crate::error::{ensure_dims, Error, Result};
use crate::grid::{Annotation, Dims, ImageGrid, LabelGrid};
use crate::mrf::{normalize_log_pair, MrfModel};

/// State of one persistent chain.
#[derive(Debug, Clone)]
pub struct ChainState {
    pub labeling: LabelGrid,
    pub rng: ChaCha8Rng,
    pub sweep_count: u64,
}

impl ChainState {
    pub fn new(labeling: LabelGrid, seed: u64) -> Self {
        ChainState {
            labeling,
            rng: ChaCha8Rng::seed_from_u64(seed),
            sweep_count: 0,
        }
    }

    /// Chain started from an i.i.d. fair-coin labeling drawn from `seed`.
    pub fn random(dims: Dims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels = (0..dims.len()).map(|_| rng.random_range(0..2u8)).collect();
        ChainState {
            labeling: LabelGrid::new(dims, labels).expect("binary labels"),
            rng,
            sweep_count: 0,
        }
    }
}

/// Per-pixel posterior probability of label 1.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalField {
    dims: Dims,
    p1: Vec<f64>,
    n_samples: usize,
}

impl MarginalField {
    pub fn new(dims: Dims, p1: Vec<f64>, n_samples: usize) -> Result<Self> {
        if p1.len() != dims.len() {
            return Err(Error::validation("marginal field length does not match dims"));
        }
        if p1.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::validation("marginal probabilities must lie in [0, 1]"));
        }
        Ok(MarginalField { dims, p1, n_samples })
    }

    #[inline]
    pub fn dims(&self) -> Dims {
        self.dims
    }

    #[inline]
    pub fn p1(&self) -> &[f64] {
        &self.p1
    }

    /// Number of samples behind the estimate; 0 for analytic marginals.
    #[inline]
    pub fn n_samples(&self) -> usize {
        self.n_samples
    }
}

/// Labeling-independent part of the posterior `p(y | x, z¹…zᵐ)`.
#[derive(Debug, Clone)]
pub struct Posterior {
    dims: Dims,
    unary: [f64; 2],
    pairwise: Vec<[[f64; 2]; 2]>,
    offsets: Vec<(i32, i32)>,
    appearance: Option<Vec<[f64; 2]>>,
    obs_start: Vec<usize>,
    obs: Vec<(u32, u8)>,
    workers: Vec<String>,
    log_conf: Vec<[[f64; 2]; 2]>,
}

impl Posterior {
    /// `x = None` leaves out the appearance factor.
    pub fn new(model: &MrfModel, x: Option<&ImageGrid>, annotations: &[Annotation]) -> Result<Self> {
        let dims = model.dims();
        model.prior.validate(&model.classes)?;
        let workers = worker_ids(annotations);
        let mut counts = vec![0usize; dims.len() + 1];
        for a in annotations {
            ensure_dims(dims, a.dims())?;
            for (i, &o) in a.observed().bits().iter().enumerate() {
                if o {
                    counts[i + 1] += 1;
                }
            }
        }
        for i in 0..dims.len() {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut obs = vec![(0u32, 0u8); counts[dims.len()]];
        for a in annotations {
            let w = workers.iter().position(|id| id == &a.worker_id).unwrap() as u32;
            let z = a.labels().labels();
            for (i, &o) in a.observed().bits().iter().enumerate() {
                if o {
                    obs[fill[i]] = (w, z[i]);
                    fill[i] += 1;
                }
            }
        }
        let mut post = Posterior {
            dims,
            unary: model.prior.unary,
            pairwise: model.prior.pairwise.clone(),
            offsets: model.classes.offsets().to_vec(),
            appearance: None,
            obs_start: counts,
            obs,
            workers,
            log_conf: Vec::new(),
        };
        post.set_confusions(model)?;
        if let Some(x) = x {
            post.set_appearance(model, x)?;
        }
        Ok(post)
    }

    /// Posterior of the prior alone: no image, no workers.
    pub fn prior_only(model: &MrfModel) -> Result<Self> {
        Posterior::new(model, None, &[])
    }

    #[inline]
    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn set_confusions(&mut self, model: &MrfModel) -> Result<()> {
        self.log_conf = self
            .workers
            .iter()
            .map(|id| {
                let c = model.confusion(id)?;
                Ok([
                    [c.log_prob(0, 0), c.log_prob(0, 1)],
                    [c.log_prob(1, 0), c.log_prob(1, 1)],
                ])
            })
            .collect::<Result<_>>()?;
        Ok(())
    }

    pub fn set_appearance(&mut self, model: &MrfModel, x: &ImageGrid) -> Result<()> {
        ensure_dims(self.dims, x.dims())?;
        ensure_dims(self.dims, model.shading.dims)?;
        model.appearance.validate()?;
        let table = (0..self.dims.len())
            .map(|i| {
                let r = x.get(i) - model.shading.values[i];
                [model.appearance.log_density(r, 0), model.appearance.log_density(r, 1)]
            })
            .collect();
        self.appearance = Some(table);
        Ok(())
    }

    pub fn set_prior(&mut self, model: &MrfModel) {
        self.unary = model.prior.unary;
        self.pairwise = model.prior.pairwise.clone();
    }

    /// `[p(y_i = 0 | rest), p(y_i = 1 | rest)]` given the other labels.
    pub fn conditional(&self, i: usize, labels: &[u8]) -> Result<[f64; 2]> {
        let w = self.dims.width as i64;
        let h = self.dims.height as i64;
        let c = (i % self.dims.width) as i64;
        let r = (i / self.dims.width) as i64;
        let mut log_mass = [-self.unary[0], -self.unary[1]];
        for (table, &(dx, dy)) in self.pairwise.iter().zip(&self.offsets) {
            let (dx, dy) = (dx as i64, dy as i64);
            let (fc, fr) = (c + dx, r + dy);
            if fc >= 0 && fc < w && fr >= 0 && fr < h {
                let yj = labels[(fr * w + fc) as usize] as usize;
                log_mass[0] -= table[0][yj];
                log_mass[1] -= table[1][yj];
            }
            let (bc, br) = (c - dx, r - dy);
            if bc >= 0 && bc < w && br >= 0 && br < h {
                let yj = labels[(br * w + bc) as usize] as usize;
                log_mass[0] -= table[yj][0];
                log_mass[1] -= table[yj][1];
            }
        }
        if let Some(app) = &self.appearance {
            log_mass[0] += app[i][0];
            log_mass[1] += app[i][1];
        }
        for &(wk, z) in &self.obs[self.obs_start[i]..self.obs_start[i + 1]] {
            let t = &self.log_conf[wk as usize];
            log_mass[0] += t[0][z as usize];
            log_mass[1] += t[1][z as usize];
        }
        normalize_log_pair(log_mass)
    }

    /// One raster-order sweep, resampling every site once.
    pub fn sweep(&self, state: &mut ChainState) -> Result<()> {
        ensure_dims(self.dims, state.labeling.dims())?;
        for i in 0..self.dims.len() {
            let p = self.conditional(i, state.labeling.labels())?;
            let u: f64 = state.rng.random();
            state.labeling.labels_mut()[i] = (u < p[1]) as u8;
        }
        state.sweep_count += 1;
        Ok(())
    }

    /// `Σ_i log p(y_i | y_rest)`.
    pub fn pseudo_loglik(&self, y: &LabelGrid) -> Result<f64> {
        ensure_dims(self.dims, y.dims())?;
        let labels = y.labels();
        let mut total = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            total += self.conditional(i, labels)?[l as usize].ln();
        }
        Ok(total)
    }

    /// Runs `burn_in` discarded sweeps, then averages the labels of
    /// `n_samples` further sweeps.
    pub fn estimate_marginals(
        &self,
        state: &mut ChainState,
        burn_in: usize,
        n_samples: usize,
    ) -> Result<MarginalField> {
        if n_samples == 0 {
            return Err(Error::validation("need at least one retained sample"));
        }
        for _ in 0..burn_in {
            self.sweep(state)?;
        }
        let mut counts = vec![0u64; self.dims.len()];
        for _ in 0..n_samples {
            self.sweep(state)?;
            for (c, &l) in counts.iter_mut().zip(state.labeling.labels()) {
                *c += l as u64;
            }
        }
        let p1 = counts.iter().map(|&c| c as f64 / n_samples as f64).collect();
        MarginalField::new(self.dims, p1, n_samples)
    }
}

/// One sweep of the posterior chain for `model`.
pub fn gibbs_sweep(
    state: &mut ChainState,
    model: &MrfModel,
    x: Option<&ImageGrid>,
    annotations: &[Annotation],
) -> Result<()> {
    Posterior::new(model, x, annotations)?.sweep(state)
}

/// Runs `burn_in` discarded sweeps from `init`, then records the labeling
/// after each of `n_samples` further sweeps.
pub fn sample_posterior(
    model: &MrfModel,
    x: Option<&ImageGrid>,
    annotations: &[Annotation],
    init: &LabelGrid,
    burn_in: usize,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<LabelGrid>> {
    if n_samples == 0 {
        return Err(Error::validation("need at least one retained sample"));
    }
    let post = Posterior::new(model, x, annotations)?;
    let mut state = ChainState::new(init.clone(), seed);
    for _ in 0..burn_in {
        post.sweep(&mut state)?;
    }
    let mut out = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        post.sweep(&mut state)?;
        out.push(state.labeling.clone());
    }
    Ok(out)
}

/// Fraction of samples with label 1 at each pixel.
pub fn accumulate_marginals(samples: &[LabelGrid]) -> Result<MarginalField> {
    let first = samples
        .first()
        .ok_or_else(|| Error::validation("cannot accumulate marginals of zero samples"))?;
    let dims = first.dims();
    let mut counts = vec![0u64; dims.len()];
    for s in samples {
        ensure_dims(dims, s.dims())?;
        for (c, &l) in counts.iter_mut().zip(s.labels()) {
            *c += l as u64;
        }
    }
    let n = samples.len();
    MarginalField::new(dims, counts.iter().map(|&c| c as f64 / n as f64).collect(), n)
}
