//! File formats: binary PGM, marginal fields, polygon and model JSON, CSV
//! tables. All writers replace their target atomically.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::em::{ConfusionMatrix, IterationRecord};
use crate::error::{Error, Result};
use crate::gibbs::MarginalField;
use crate::grid::{Dims, ImageGrid, LabelGrid, Mask};
use crate::mrf::MrfModel;
use crate::protocol::{PolygonRecord, TaskRecord};

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::validation(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn encode_pgm(dims: Dims, data: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", dims.width, dims.height).into_bytes();
    out.extend_from_slice(data);
    out
}

/// Parses an 8-bit binary PGM (`P5`, maxval ≤ 255, `#` comments allowed).
pub fn decode_pgm(bytes: &[u8]) -> Result<(Dims, Vec<u8>)> {
    let mut pos = 0;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Parse("truncated PGM header".into()));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if tokens[0] != "P5" {
        return Err(Error::Parse(format!("unsupported PGM magic {:?}", tokens[0])));
    }
    let num = |s: &str, what: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Parse(format!("bad PGM {what} {s:?}")))
    };
    let (w, h, maxval) = (
        num(&tokens[1], "width")?,
        num(&tokens[2], "height")?,
        num(&tokens[3], "maxval")?,
    );
    if maxval == 0 || maxval > 255 {
        return Err(Error::Parse(format!("PGM maxval {maxval} not in 1..=255")));
    }
    pos += 1;
    let dims = Dims::new(w, h)?;
    let data = bytes
        .get(pos..pos + dims.len())
        .ok_or_else(|| Error::Parse("truncated PGM data".into()))?;
    let scaled = if maxval == 255 {
        data.to_vec()
    } else {
        data.iter()
            .map(|&v| ((v as usize * 255 + maxval / 2) / maxval).min(255) as u8)
            .collect()
    };
    Ok((dims, scaled))
}

pub fn write_label_pgm(path: &Path, y: &LabelGrid) -> Result<()> {
    let data: Vec<u8> = y.labels().iter().map(|&l| l * 255).collect();
    write_atomic(path, &encode_pgm(y.dims(), &data))
}

pub fn write_mask_pgm(path: &Path, m: &Mask) -> Result<()> {
    write_label_pgm(path, &LabelGrid::from_mask(m))
}

/// Gray values are clamped to [0, 1] and scaled to 0–255.
pub fn write_image_pgm(path: &Path, x: &ImageGrid) -> Result<()> {
    let data: Vec<u8> = x
        .values()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    write_atomic(path, &encode_pgm(x.dims(), &data))
}

/// Pixels ≥ 128 are label 1.
pub fn read_label_pgm(path: &Path) -> Result<LabelGrid> {
    let (dims, data) = decode_pgm(&fs::read(path)?)?;
    LabelGrid::new(dims, data.iter().map(|&v| (v >= 128) as u8).collect())
}

pub fn read_mask_pgm(path: &Path) -> Result<Mask> {
    Ok(read_label_pgm(path)?.to_mask())
}

pub fn read_image_pgm(path: &Path) -> Result<ImageGrid> {
    let (dims, data) = decode_pgm(&fs::read(path)?)?;
    ImageGrid::new(dims, data.iter().map(|&v| v as f64 / 255.0).collect())
}

/// `u32` width and height (little endian) followed by `f32` values.
pub fn encode_marginals(m: &MarginalField) -> Vec<u8> {
    let dims = m.dims();
    let mut out = Vec::with_capacity(8 + 4 * dims.len());
    out.extend_from_slice(&(dims.width as u32).to_le_bytes());
    out.extend_from_slice(&(dims.height as u32).to_le_bytes());
    for &p in m.p1() {
        out.extend_from_slice(&(p as f32).to_le_bytes());
    }
    out
}

pub fn decode_marginals(bytes: &[u8]) -> Result<MarginalField> {
    if bytes.len() < 8 {
        return Err(Error::Parse("marginal file shorter than its header".into()));
    }
    let word = |k: usize| u32::from_le_bytes(bytes[k..k + 4].try_into().expect("4 bytes"));
    let dims = Dims::new(word(0) as usize, word(4) as usize)?;
    if bytes.len() != 8 + 4 * dims.len() {
        return Err(Error::Parse(format!("marginal file size does not match {dims}")));
    }
    let p1 = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    MarginalField::new(dims, p1, 0)
}

pub fn write_marginals(path: &Path, m: &MarginalField) -> Result<()> {
    write_atomic(path, &encode_marginals(m))
}

pub fn read_marginals(path: &Path) -> Result<MarginalField> {
    decode_marginals(&fs::read(path)?)
}

pub fn to_json_pretty<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_vec_pretty(value).map_err(|e| Error::Parse(e.to_string()))?;
    s.push(b'\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, &to_json_pretty(value)?)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

pub fn write_polygons(path: &Path, records: &[PolygonRecord]) -> Result<()> {
    write_json(path, &records)
}

pub fn read_polygons(path: &Path) -> Result<Vec<PolygonRecord>> {
    read_json(path)
}

/// Model file with shape fields checked against the payload on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub width: usize,
    pub height: usize,
    pub n_components: usize,
    pub n_edge_classes: usize,
    pub model: MrfModel,
}

impl ModelFile {
    pub fn new(model: MrfModel) -> Self {
        let d = model.dims();
        ModelFile {
            width: d.width,
            height: d.height,
            n_components: model.appearance.components(),
            n_edge_classes: model.classes.len(),
            model,
        }
    }

    pub fn into_model(self) -> Result<MrfModel> {
        let d = self.model.dims();
        if d.width != self.width
            || d.height != self.height
            || self.model.appearance.components() != self.n_components
            || self.model.classes.len() != self.n_edge_classes
        {
            return Err(Error::Parse(
                "model shape metadata does not match its parameters".into(),
            ));
        }
        self.model.validate()?;
        Ok(self.model)
    }
}

/// Floats are written in shortest round-trip form, so reading the file
/// back reproduces every parameter bit for bit.
pub fn write_model(path: &Path, model: &MrfModel) -> Result<()> {
    write_json(path, &ModelFile::new(model.clone()))
}

pub fn read_model(path: &Path) -> Result<MrfModel> {
    read_json::<ModelFile>(path)?.into_model()
}

fn csv_bytes<R: Serialize>(rows: impl IntoIterator<Item = R>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Parse(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Parse(e.to_string()))
}

pub fn write_csv<R: Serialize>(path: &Path, rows: impl IntoIterator<Item = R>) -> Result<()> {
    write_atomic(path, &csv_bytes(rows)?)
}

pub fn read_csv<R: DeserializeOwned>(path: &Path) -> Result<Vec<R>> {
    let mut r = csv::Reader::from_reader(fs::File::open(path)?);
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Parse(format!("{}: {e}", path.display()))))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionRow {
    pub worker_id: String,
    #[serde(rename = "p(0|0)")]
    pub p00: f64,
    #[serde(rename = "p(1|0)")]
    pub p10: f64,
    #[serde(rename = "p(0|1)")]
    pub p01: f64,
    #[serde(rename = "p(1|1)")]
    pub p11: f64,
}

impl ConfusionRow {
    fn new(worker_id: &str, c: &ConfusionMatrix) -> Self {
        ConfusionRow {
            worker_id: worker_id.to_string(),
            p00: c.prob(0, 0),
            p10: c.prob(0, 1),
            p01: c.prob(1, 0),
            p11: c.prob(1, 1),
        }
    }
}

pub fn write_confusions(path: &Path, confusions: &BTreeMap<String, ConfusionMatrix>) -> Result<()> {
    write_csv(path, confusions.iter().map(|(id, c)| ConfusionRow::new(id, c)))
}

/// One row per (iteration, worker).
pub fn write_history(path: &Path, history: &[IterationRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Parse(e.to_string());
    w.write_record([
        "iteration",
        "worker_id",
        "p(0|0)",
        "p(1|0)",
        "p(0|1)",
        "p(1|1)",
        "pseudo_loglik",
    ])
    .map_err(err)?;
    for rec in history {
        for (id, c) in &rec.confusions {
            let r = ConfusionRow::new(id, c);
            w.write_record([
                rec.iteration.to_string(),
                r.worker_id,
                r.p00.to_string(),
                r.p10.to_string(),
                r.p01.to_string(),
                r.p11.to_string(),
                rec.pseudo_loglik.to_string(),
            ])
            .map_err(err)?;
        }
    }
    write_atomic(path, &w.into_inner().map_err(|e| Error::Parse(e.to_string()))?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub worker_id: String,
    pub score: f64,
}

pub fn write_scores(path: &Path, scores: &BTreeMap<String, f64>) -> Result<()> {
    write_csv(
        path,
        scores.iter().map(|(k, &v)| ScoreRow {
            worker_id: k.clone(),
            score: v,
        }),
    )
}

/// Reads `worker_id,score` rows; duplicate workers are rejected.
pub fn read_scores(path: &Path) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for row in read_csv::<ScoreRow>(path)? {
        if out.insert(row.worker_id.clone(), row.score).is_some() {
            return Err(Error::validation(format!(
                "worker {} listed twice in {}",
                row.worker_id,
                path.display()
            )));
        }
    }
    Ok(out)
}

pub fn write_task_log(path: &Path, tasks: &[TaskRecord]) -> Result<()> {
    write_csv(path, tasks)
}
