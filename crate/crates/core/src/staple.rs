//! Image-unaware STAPLE baseline with partial and repeated annotations.
//!
//! Pixels are independent given the worker models; the prior is a single
//! spatially uniform foreground probability. Pixels observed by no worker
//! fall back to that prior.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::em::{soft_frequencies, worker_ids, ConfusionMatrix, FrequencyTable};
use crate::error::{ensure_dims, Error, Result};
use crate::gibbs::MarginalField;
use crate::grid::{Annotation, Dims};
use crate::mrf::normalize_log_pair;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StapleConfig {
    /// Foreground prior; `None` uses the mean observed foreground fraction.
    pub prior_p1: Option<f64>,
    pub max_iterations: usize,
    pub tol: f64,
    pub init_diagonal: f64,
}

impl Default for StapleConfig {
    fn default() -> Self {
        StapleConfig {
            prior_p1: None,
            max_iterations: 200,
            tol: 1e-6,
            init_diagonal: 0.8,
        }
    }
}

impl StapleConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(p) = self.prior_p1 {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::validation(format!("prior_p1 {p} outside (0, 1)")));
            }
        }
        if !(self.tol > 0.0) {
            return Err(Error::validation("staple tol must be positive"));
        }
        if self.max_iterations == 0 {
            return Err(Error::validation("staple max_iterations must be positive"));
        }
        Ok(())
    }
}

/// Mean over annotations of the foreground fraction inside the observed
/// mask, clamped into the open unit interval.
pub fn empirical_prior(annotations: &[Annotation]) -> f64 {
    let fractions: Vec<f64> = annotations
        .iter()
        .filter_map(|a| {
            let obs = a.observed().count();
            (obs > 0).then(|| {
                let fg = a
                    .observed()
                    .bits()
                    .iter()
                    .zip(a.labels().labels())
                    .filter(|(&o, &l)| o && l == 1)
                    .count();
                fg as f64 / obs as f64
            })
        })
        .collect();
    if fractions.is_empty() {
        return 0.5;
    }
    let mean = fractions.iter().sum::<f64>() / fractions.len() as f64;
    mean.clamp(1e-6, 1.0 - 1e-6)
}

fn check_inputs(annotations: &[Annotation]) -> Result<Dims> {
    let first = annotations
        .first()
        .ok_or_else(|| Error::validation("STAPLE needs at least one annotation"))?;
    let dims = first.dims();
    for a in annotations {
        ensure_dims(dims, a.dims())?;
    }
    Ok(dims)
}

fn log_masses(
    i: usize,
    annotations: &[Annotation],
    confusions: &BTreeMap<String, ConfusionMatrix>,
    prior_p1: f64,
) -> Result<[f64; 2]> {
    let mut lm = [(1.0 - prior_p1).ln(), prior_p1.ln()];
    for a in annotations {
        if let Some(z) = a.label_at(i) {
            let c = confusions
                .get(&a.worker_id)
                .ok_or_else(|| Error::validation(format!("no confusion for worker {}", a.worker_id)))?;
            lm[0] += c.log_prob(0, z);
            lm[1] += c.log_prob(1, z);
        }
    }
    Ok(lm)
}

/// Independent-pixel posterior `p(y_i = 1) ∝ prior · Π_u p_u(z_i | 1)`.
pub fn staple_estep(
    annotations: &[Annotation],
    confusions: &BTreeMap<String, ConfusionMatrix>,
    prior_p1: f64,
) -> Result<MarginalField> {
    let dims = check_inputs(annotations)?;
    let mut p1 = Vec::with_capacity(dims.len());
    for i in 0..dims.len() {
        let lm = log_masses(i, annotations, confusions, prior_p1)?;
        p1.push(normalize_log_pair(lm)?[1]);
    }
    MarginalField::new(dims, p1, 0)
}

/// Incomplete-data log-likelihood `Σ_i log Σ_l p(l) Π_u p_u(z_i | l)`.
pub fn staple_loglik(
    annotations: &[Annotation],
    confusions: &BTreeMap<String, ConfusionMatrix>,
    prior_p1: f64,
) -> Result<f64> {
    let dims = check_inputs(annotations)?;
    let mut total = 0.0;
    for i in 0..dims.len() {
        let lm = log_masses(i, annotations, confusions, prior_p1)?;
        let m = lm[0].max(lm[1]);
        total += m + ((lm[0] - m).exp() + (lm[1] - m).exp()).ln();
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MStepOutput {
    pub confusions: BTreeMap<String, ConfusionMatrix>,
    /// `(worker, true label)` pairs whose count column was empty; those rows
    /// were set to `(0.5, 0.5)`.
    pub empty_columns: Vec<(String, u8)>,
}

/// Soft-count M-step: `p_u(l'|l) ∝ Σ_{i observed, z_i = l'} p(y_i = l)`,
/// pooled over all annotations of the same worker.
pub fn staple_mstep(annotations: &[Annotation], marginals: &MarginalField) -> Result<MStepOutput> {
    let dims = check_inputs(annotations)?;
    ensure_dims(dims, marginals.dims())?;
    let mut confusions = BTreeMap::new();
    let mut empty_columns = Vec::new();
    for id in worker_ids(annotations) {
        let mut freq = FrequencyTable::default();
        for a in annotations.iter().filter(|a| a.worker_id == id) {
            freq.add(&soft_frequencies(a, marginals)?);
        }
        let n = freq.n;
        let mut p = [[0.5f64; 2]; 2];
        for l in 0..2 {
            let total = n[0][l] + n[1][l];
            if total > 0.0 {
                for lp in 0..2 {
                    p[l][lp] = n[lp][l] / total;
                }
            } else {
                empty_columns.push((id.clone(), l as u8));
            }
        }
        confusions.insert(id, ConfusionMatrix::new(p)?);
    }
    Ok(MStepOutput {
        confusions,
        empty_columns,
    })
}

#[derive(Debug, Clone)]
pub struct StapleResult {
    pub marginals: MarginalField,
    pub confusions: BTreeMap<String, ConfusionMatrix>,
    pub iterations: usize,
    pub prior_p1: f64,
    /// Log-likelihood after the initialization and after every M-step.
    pub loglik_trace: Vec<f64>,
}

/// Alternates E- and M-steps from symmetric initial confusions until the
/// largest marginal change drops below `cfg.tol`.
pub fn run_staple(annotations: &[Annotation], cfg: &StapleConfig) -> Result<StapleResult> {
    cfg.validate()?;
    check_inputs(annotations)?;
    let prior = cfg.prior_p1.unwrap_or_else(|| empirical_prior(annotations));
    let init = ConfusionMatrix::with_diagonal(cfg.init_diagonal)?;
    let mut confusions: BTreeMap<String, ConfusionMatrix> =
        worker_ids(annotations).into_iter().map(|id| (id, init)).collect();
    let mut marginals = staple_estep(annotations, &confusions, prior)?;
    let mut trace = vec![staple_loglik(annotations, &confusions, prior)?];
    let mut iterations = 0;
    for it in 1..=cfg.max_iterations {
        iterations = it;
        let m = staple_mstep(annotations, &marginals)?;
        if !m.empty_columns.is_empty() {
            log::debug!("staple: empty count columns {:?}", m.empty_columns);
        }
        confusions = m.confusions;
        trace.push(staple_loglik(annotations, &confusions, prior)?);
        let next = staple_estep(annotations, &confusions, prior)?;
        let delta = next
            .p1()
            .iter()
            .zip(marginals.p1())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        marginals = next;
        if delta < cfg.tol {
            break;
        }
    }
    Ok(StapleResult {
        marginals,
        confusions,
        iterations,
        prior_p1: prior,
        loglik_trace: trace,
    })
}
