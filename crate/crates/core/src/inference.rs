//! End-to-end fusion: learning followed by the marginal posterior mode.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::em::{learn, ConfusionMatrix, IterationRecord, LearnConfig};
use crate::error::{ensure_dims, Error, Result};
use crate::gibbs::{MarginalField, Posterior};
use crate::grid::{coverage_mask, Annotation, EdgeClassSet, ImageGrid, LabelGrid, Mask};
use crate::mrf::{AppearanceParams, MrfModel, PriorParams, ShadingField, SIGMA_FLOOR};
use crate::staple::{run_staple, StapleConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Istaple,
    Staple,
}

impl Method {
    pub const ALL: [Method; 2] = [Method::Istaple, Method::Staple];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Istaple => "istaple",
            Method::Staple => "staple",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "istaple" => Ok(Method::Istaple),
            "staple" => Ok(Method::Staple),
            other => Err(Error::validation(format!("unknown method {other:?}"))),
        }
    }
}

/// Settings of the image-aware path: initial model, learner and the final
/// sampling budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IstapleConfig {
    /// Potts coupling applied to every edge class.
    pub beta: f64,
    pub edge_classes: EdgeClassSet,
    pub shading_weight: f64,
    pub learner: LearnConfig,
    pub burn_in: usize,
    pub n_samples: usize,
}

impl Default for IstapleConfig {
    fn default() -> Self {
        IstapleConfig {
            beta: 0.35,
            edge_classes: EdgeClassSet::dense(),
            shading_weight: 10.0,
            learner: LearnConfig::default(),
            burn_in: 50,
            n_samples: 200,
        }
    }
}

impl IstapleConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.beta.is_finite() {
            return Err(Error::validation("beta must be finite"));
        }
        if !(self.shading_weight > 0.0) {
            return Err(Error::validation("shading_weight must be positive"));
        }
        if self.n_samples == 0 {
            return Err(Error::validation("n_samples must be positive"));
        }
        self.learner.validate()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub istaple: IstapleConfig,
    pub staple: StapleConfig,
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        self.istaple.validate()?;
        self.staple.validate()
    }
}

#[derive(Debug, Clone)]
pub struct FusionResult {
    pub method: Method,
    pub labeling: LabelGrid,
    pub marginals: MarginalField,
    pub confusions: BTreeMap<String, ConfusionMatrix>,
    /// Pixels observed by at least one annotation.
    pub coverage: Mask,
    /// Learned model (iSTAPLE only).
    pub model: Option<MrfModel>,
    /// Learner history (iSTAPLE only).
    pub history: Vec<IterationRecord>,
}

/// Label 1 where `p1 > 0.5`; exact ties go to 0.
pub fn mpm_decision(m: &MarginalField) -> LabelGrid {
    let labels = m.p1().iter().map(|&p| (p > 0.5) as u8).collect();
    LabelGrid::new(m.dims(), labels).expect("binary labels")
}

/// Starting model for learning: Potts prior, a two-component mixture with
/// means taken from the image under the annotated labels, zero shading.
pub fn initial_model(x: &ImageGrid, annotations: &[Annotation], cfg: &IstapleConfig) -> Result<MrfModel> {
    let mut sums = [0.0f64; 2];
    let mut counts = [0usize; 2];
    for a in annotations {
        ensure_dims(x.dims(), a.dims())?;
        for i in 0..x.dims().len() {
            if let Some(z) = a.label_at(i) {
                sums[z as usize] += x.get(i);
                counts[z as usize] += 1;
            }
        }
    }
    let mut sorted = x.values().to_vec();
    sorted.sort_by(f64::total_cmp);
    let quantile = |q: f64| sorted[((sorted.len() - 1) as f64 * q).round() as usize];
    let mut means = [quantile(0.75), quantile(0.25)];
    for l in 0..2 {
        if counts[l] > 0 {
            means[l] = sums[l] / counts[l] as f64;
        }
    }
    if means[0] == means[1] {
        means = [quantile(0.75), quantile(0.25)];
    }
    let mean = sorted.iter().sum::<f64>() / sorted.len() as f64;
    let var = sorted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / sorted.len() as f64;
    let sigma = (0.5 * var.sqrt()).max(SIGMA_FLOOR);
    let appearance = AppearanceParams::new([vec![0.9, 0.1], vec![0.1, 0.9]], means.to_vec(), sigma)?;
    Ok(MrfModel {
        prior: PriorParams::potts(cfg.edge_classes.len(), cfg.beta),
        appearance,
        shading: ShadingField::zeros(x.dims(), cfg.shading_weight),
        classes: cfg.edge_classes.clone(),
        confusions: BTreeMap::new(),
    })
}

/// Fuses `annotations` with the chosen method. The image is required for
/// iSTAPLE and ignored by STAPLE.
pub fn fuse(
    x: Option<&ImageGrid>,
    annotations: &[Annotation],
    method: Method,
    cfg: &FusionConfig,
    seed: u64,
) -> Result<FusionResult> {
    let first = annotations
        .first()
        .ok_or_else(|| Error::validation("fusion needs at least one annotation"))?;
    let dims = first.dims();
    let coverage = coverage_mask(dims, annotations)?;
    match method {
        Method::Staple => {
            let r = run_staple(annotations, &cfg.staple)?;
            Ok(FusionResult {
                method,
                labeling: mpm_decision(&r.marginals),
                marginals: r.marginals,
                confusions: r.confusions,
                coverage,
                model: None,
                history: Vec::new(),
            })
        }
        Method::Istaple => {
            let x = x.ok_or_else(|| Error::validation("iSTAPLE needs an image"))?;
            ensure_dims(dims, x.dims())?;
            cfg.istaple.validate()?;
            let model0 = initial_model(x, annotations, &cfg.istaple)?;
            let learner = LearnConfig {
                seed,
                ..cfg.istaple.learner.clone()
            };
            let trained = learn(x, annotations, &model0, &learner)?;
            let mut chain = trained.chain;
            let posterior = Posterior::new(&trained.model, Some(x), annotations)?;
            let marginals = posterior.estimate_marginals(&mut chain, cfg.istaple.burn_in, cfg.istaple.n_samples)?;
            let confusions = trained.history.last().map(|h| h.confusions.clone()).unwrap_or_default();
            Ok(FusionResult {
                method,
                labeling: mpm_decision(&marginals),
                marginals,
                confusions,
                coverage,
                model: Some(trained.model),
                history: trained.history,
            })
        }
    }
}
