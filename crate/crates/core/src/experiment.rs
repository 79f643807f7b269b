//! Reproducible annotation-fraction sweeps comparing both fusion methods.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::Annotation;
use crate::inference::{fuse, FusionConfig, FusionResult, IstapleConfig, Method};
use crate::io;
use crate::metrics::{evaluate, ranking_quality, worker_scores, MetricsConfig, MetricsReport};
use crate::phantom::{generate_phantom, Phantom, PhantomConfig};
use crate::protocol::{make_tiles, run_protocol, ProtocolConfig, ProtocolOutput, WorkerPoolConfig, WorkerProfile};
use crate::staple::StapleConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub repetitions: usize,
    /// Fractions of the task annotations handed to the fusion methods.
    pub fractions: Vec<f64>,
    pub phantom: PhantomConfig,
    pub protocol: ProtocolConfig,
    pub workers: WorkerPoolConfig,
    pub istaple: IstapleConfig,
    pub staple: StapleConfig,
    pub metrics: MetricsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            master_seed: 0,
            repetitions: 10,
            fractions: vec![0.1, 0.25, 0.5, 1.0],
            phantom: PhantomConfig::default(),
            protocol: ProtocolConfig::default(),
            workers: WorkerPoolConfig::default(),
            istaple: IstapleConfig::default(),
            staple: StapleConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

fn named(field: &str, e: Error) -> Error {
    Error::Validation(format!("{field}: {e}"))
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::validation("repetitions: must be at least 1"));
        }
        if self.fractions.is_empty() {
            return Err(Error::validation("fractions: list is empty"));
        }
        for &f in &self.fractions {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::validation(format!("fractions: value {f} outside (0, 1]")));
            }
        }
        self.phantom.validate().map_err(|e| named("phantom", e))?;
        self.protocol.validate().map_err(|e| named("protocol", e))?;
        self.workers.validate().map_err(|e| named("workers", e))?;
        self.istaple.validate().map_err(|e| named("istaple", e))?;
        self.staple.validate().map_err(|e| named("staple", e))?;
        self.metrics.validate().map_err(|e| named("metrics", e))
    }

    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            istaple: self.istaple.clone(),
            staple: self.staple.clone(),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Hex SHA-256 of the canonical TOML serialization.
    pub fn sha256(&self) -> Result<String> {
        Ok(hex(&Sha256::digest(self.to_toml()?.as_bytes())))
    }
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)?;
    parse_config_str(&text).map_err(|e| match e {
        Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Stable 64-bit seed from the master seed and a list of labels.
pub fn derive_seed(master: u64, parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// One simulated dataset: phantom, worker pool and protocol output.
#[derive(Debug, Clone)]
pub struct Instance {
    pub phantom: Phantom,
    pub pool: Vec<WorkerProfile>,
    pub protocol: ProtocolOutput,
}

/// Builds the phantom, worker pool and protocol run for one repetition.
pub fn simulate_instance(cfg: &ExperimentConfig, repetition: usize) -> Result<Instance> {
    let rep = repetition.to_string();
    let phantom = generate_phantom(&PhantomConfig {
        seed: derive_seed(cfg.master_seed, &["phantom", &rep]),
        ..cfg.phantom.clone()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.master_seed, &["workers", &rep]));
    let pool = cfg.workers.build(&mut rng)?;
    let dims = phantom.labels.dims();
    let tiles = make_tiles(dims, cfg.protocol.tile_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.master_seed, &["protocol", &rep]));
    let protocol = run_protocol(dims, &tiles, &phantom.cells, &pool, &cfg.protocol, &mut rng)?;
    Ok(Instance {
        phantom,
        pool,
        protocol,
    })
}

/// Sorted indices of `max(1, round(fraction·n))` annotations drawn
/// uniformly without replacement.
pub fn subsample(n: usize, fraction: f64, seed: u64) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let k = ((fraction * n as f64).round() as usize).clamp(1, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub fraction: f64,
    pub repetition: usize,
    pub seed: u64,
    pub method: Method,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub fraction: f64,
    pub method: Method,
    pub metric: String,
    pub mean: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub fraction: f64,
    pub repetition: usize,
    pub method: Method,
    pub error: String,
}

/// Everything computed for one (fraction, repetition, method) run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub result: FusionResult,
    pub report: MetricsReport,
    pub ranking_quality: f64,
    pub estimated_scores: BTreeMap<String, f64>,
}

/// Fuses `annotations`, evaluates against the phantom ground truth and
/// ranks the workers.
pub fn evaluate_run(
    cfg: &ExperimentConfig,
    phantom: &Phantom,
    annotations: &[Annotation],
    method: Method,
    seed: u64,
) -> Result<RunOutcome> {
    let result = fuse(Some(&phantom.image), annotations, method, &cfg.fusion(), seed)?;
    let report = evaluate(&result.labeling, &phantom.labels, Some(&result.coverage), &cfg.metrics)?;
    let estimated_scores = worker_scores(annotations, &result.labeling)?;
    let truth = worker_scores(annotations, &phantom.labels)?;
    let ranking_quality = ranking_quality(&estimated_scores, &truth)?;
    Ok(RunOutcome {
        result,
        report,
        ranking_quality,
        estimated_scores,
    })
}

fn metric_rows(fraction: f64, repetition: usize, seed: u64, method: Method, o: &RunOutcome) -> Vec<ResultRow> {
    let mut rows = Vec::new();
    let mut push = |metric: String, value: f64| {
        rows.push(ResultRow {
            fraction,
            repetition,
            seed,
            method,
            metric,
            value,
        })
    };
    for (k, v) in o.report.full.values() {
        push(k.to_string(), v);
    }
    if let Some(c) = &o.report.covered {
        for (k, v) in c.values() {
            push(format!("{k}-c"), v);
        }
    }
    push("ranking_quality".into(), o.ranking_quality);
    rows
}

fn run_dir(out: &Path, fraction: f64, repetition: usize) -> PathBuf {
    out.join("runs").join(format!("f{fraction}_r{repetition:02}"))
}

fn instance_dir(out: &Path, repetition: usize) -> PathBuf {
    out.join("instances").join(format!("r{repetition:02}"))
}

/// Writes the phantom, polygons, task log, worker profiles and true worker
/// scores of one instance into `dir`.
pub fn write_instance(dir: &Path, inst: &Instance) -> Result<()> {
    io::write_image_pgm(&dir.join("image.pgm"), &inst.phantom.image)?;
    io::write_label_pgm(&dir.join("gt.pgm"), &inst.phantom.labels)?;
    io::write_json(&dir.join("gt_cells.json"), &inst.phantom.cells)?;
    io::write_polygons(&dir.join("polygons.json"), &inst.protocol.records)?;
    io::write_task_log(&dir.join("tasks.csv"), &inst.protocol.tasks)?;
    io::write_json(&dir.join("workers.json"), &inst.pool)?;
    let truth = worker_scores(&inst.protocol.annotations, &inst.phantom.labels)?;
    io::write_scores(&dir.join("true_scores.csv"), &truth)
}

#[derive(Debug, Clone, Serialize)]
struct RunMeta<'a> {
    method: Method,
    seed: u64,
    fraction: f64,
    repetition: usize,
    config_sha256: &'a str,
    annotation_indices: &'a [usize],
}

/// Writes the fused labeling, marginals, confusions, metrics and scores of
/// one run into `dir`.
pub fn write_run(dir: &Path, o: &RunOutcome) -> Result<()> {
    io::write_label_pgm(&dir.join("labels.pgm"), &o.result.labeling)?;
    io::write_marginals(&dir.join("marginals.bin"), &o.result.marginals)?;
    io::write_confusions(&dir.join("confusions.csv"), &o.result.confusions)?;
    io::write_json(&dir.join("metrics.json"), &o.report)?;
    io::write_scores(&dir.join("scores.csv"), &o.estimated_scores)?;
    if !o.result.history.is_empty() {
        io::write_history(&dir.join("history.csv"), &o.result.history)?;
    }
    if let Some(m) = &o.result.model {
        io::write_model(&dir.join("model.json"), m)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub runs: usize,
    pub failed_runs: usize,
    pub rows: Vec<ResultRow>,
    pub aggregate: Vec<AggregateRow>,
}

/// Arithmetic means of per-run rows, grouped by (fraction, method, metric)
/// in first-appearance order.
pub fn aggregate(rows: &[ResultRow]) -> Vec<AggregateRow> {
    let mut order: Vec<(u64, Method, String)> = Vec::new();
    let mut acc: BTreeMap<(u64, Method, String), (f64, usize)> = BTreeMap::new();
    for r in rows {
        let key = (r.fraction.to_bits(), r.method, r.metric.clone());
        let e = acc.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            (0.0, 0)
        });
        e.0 += r.value;
        e.1 += 1;
    }
    order
        .into_iter()
        .map(|key| {
            let (sum, n) = acc[&key];
            AggregateRow {
                fraction: f64::from_bits(key.0),
                method: key.1,
                metric: key.2,
                mean: sum / n as f64,
                n,
            }
        })
        .collect()
}

/// Runs the full sweep and writes it under `out`. Stage failures are
/// recorded in `errors.csv` and the sweep continues.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, jobs: usize) -> Result<ExperimentSummary> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::validation(e.to_string()))?;
    let config_text = cfg.to_toml()?;
    let config_hash = cfg.sha256()?;
    fs::create_dir_all(out)?;
    io::write_atomic(&out.join("config.toml"), config_text.as_bytes())?;

    let instances: Vec<Result<Instance>> = pool.install(|| {
        (0..cfg.repetitions)
            .into_par_iter()
            .map(|r| {
                let inst = simulate_instance(cfg, r)?;
                write_instance(&instance_dir(out, r), &inst)?;
                Ok(inst)
            })
            .collect()
    });

    let mut jobs_list = Vec::new();
    for &f in &cfg.fractions {
        for r in 0..cfg.repetitions {
            for m in Method::ALL {
                jobs_list.push((f, r, m));
            }
        }
    }
    let outcomes: Vec<(f64, usize, Method, u64, Result<Vec<ResultRow>>)> = pool.install(|| {
        jobs_list
            .par_iter()
            .map(|&(f, r, m)| {
                let seed = derive_seed(cfg.master_seed, &["fuse", &f.to_string(), &r.to_string(), m.as_str()]);
                let res = (|| {
                    let inst = instances[r]
                        .as_ref()
                        .map_err(|e| Error::numeric(format!("instance failed: {e}")))?;
                    let n = inst.protocol.annotations.len();
                    let subset_seed = derive_seed(cfg.master_seed, &["subset", &f.to_string(), &r.to_string()]);
                    let idx = subsample(n, f, subset_seed);
                    let anns: Vec<Annotation> = idx.iter().map(|&i| inst.protocol.annotations[i].clone()).collect();
                    let o = evaluate_run(cfg, &inst.phantom, &anns, m, seed)?;
                    let dir = run_dir(out, f, r).join(m.as_str());
                    write_run(&dir, &o)?;
                    io::write_json(
                        &dir.join("meta.json"),
                        &RunMeta {
                            method: m,
                            seed,
                            fraction: f,
                            repetition: r,
                            config_sha256: &config_hash,
                            annotation_indices: &idx,
                        },
                    )?;
                    let rows = metric_rows(f, r, seed, m, &o);
                    io::write_csv(&dir.join("results.csv"), &rows)?;
                    Ok(rows)
                })();
                (f, r, m, seed, res)
            })
            .collect()
    });

    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for (f, r, m, _, res) in outcomes {
        match res {
            Ok(rs) => rows.extend(rs),
            Err(e) => {
                log::error!("run f={f} r={r} {m} failed: {e}");
                errors.push(ErrorRow {
                    fraction: f,
                    repetition: r,
                    method: m,
                    error: e.to_string(),
                });
            }
        }
    }
    let agg = aggregate(&rows);
    io::write_csv(&out.join("results.csv"), &rows)?;
    io::write_csv(&out.join("aggregate.csv"), &agg)?;
    io::write_csv(&out.join("errors.csv"), &errors)?;
    Ok(ExperimentSummary {
        runs: jobs_list.len(),
        failed_runs: errors.len(),
        rows,
        aggregate: agg,
    })
}
