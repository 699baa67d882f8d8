//! Posterior files.
//!
//! Layout: the 8 magic bytes `CMNPOST1`, the manifest length as a
//! little-endian `u64`, a UTF-8 JSON manifest, then every array as
//! little-endian `f64` in row-major order. The manifest records model
//! dimensions, hyperparameters, the fit seed, the input standardisation and
//! an `(name, rows, cols, offset)` table for the arrays. Only global factors
//! are stored.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{CmnModel, CmnPosterior};
use crate::data::Standardization;
use crate::distributions::MatrixNormalGamma;
use crate::error::{CmnError, Result};
use crate::experts::ExpertBank;
use crate::mnlr::MnlrPosterior;

const MAGIC: &[u8; 8] = b"CMNPOST1";
const FORMAT_VERSION: u32 = 1;

/// A posterior with the metadata needed to use it on raw inputs.
#[derive(Clone, Debug)]
pub struct PosteriorFile {
    pub model: CmnModel,
    pub posterior: CmnPosterior,
    pub seed: u64,
    pub standardization: Option<Standardization>,
    pub class_names: Option<Vec<String>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayEntry {
    name: String,
    rows: usize,
    cols: usize,
    /// In `f64` elements from the start of the array section.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    model: CmnModel,
    seed: u64,
    standardization: Option<Standardization>,
    class_names: Option<Vec<String>>,
    arrays: Vec<ArrayEntry>,
}

#[derive(Default)]
struct ArrayWriter {
    entries: Vec<ArrayEntry>,
    values: Vec<f64>,
}

impl ArrayWriter {
    fn push(&mut self, name: String, m: &DMatrix<f64>) {
        self.entries.push(ArrayEntry {
            name,
            rows: m.nrows(),
            cols: m.ncols(),
            offset: self.values.len(),
        });
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                self.values.push(m[(i, j)]);
            }
        }
    }

    fn push_vector(&mut self, name: String, v: &DVector<f64>) {
        self.push(name, &DMatrix::from_column_slice(v.len(), 1, v.as_slice()));
    }

    fn push_layer(&mut self, prefix: &str, post: &MnlrPosterior) {
        for (j, s) in post.sticks().iter().enumerate() {
            self.push_vector(format!("{prefix}.{j}.mean"), s.mean());
            self.push(format!("{prefix}.{j}.cov"), s.cov());
        }
    }
}

struct ArrayReader<'a> {
    entries: Vec<ArrayEntry>,
    values: &'a [f64],
}

impl ArrayReader<'_> {
    fn get(&self, name: &str, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        let e = self
            .entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| CmnError::Format(format!("missing array {name}")))?;
        if (e.rows, e.cols) != (rows, cols) {
            return Err(CmnError::Format(format!(
                "array {name} is {}x{}, expected {rows}x{cols}",
                e.rows, e.cols
            )));
        }
        let end = e.offset + rows * cols;
        if end > self.values.len() {
            return Err(CmnError::Format(format!("array {name} runs past the end of the file")));
        }
        Ok(DMatrix::from_row_slice(rows, cols, &self.values[e.offset..end]))
    }

    fn layer(&self, prefix: &str, sticks: usize, input_dim: usize, prior_var: f64) -> Result<MnlrPosterior> {
        if sticks == 0 {
            return Ok(MnlrPosterior::prior(0, input_dim, prior_var));
        }
        let dim = input_dim + 1;
        let mut means = Vec::with_capacity(sticks);
        let mut covs = Vec::with_capacity(sticks);
        for j in 0..sticks {
            let m = self.get(&format!("{prefix}.{j}.mean"), dim, 1)?;
            means.push(DVector::from_column_slice(m.as_slice()));
            covs.push(self.get(&format!("{prefix}.{j}.cov"), dim, dim)?);
        }
        MnlrPosterior::from_moments(means, covs, prior_var)
    }
}

pub fn save_posterior(path: &Path, file: &PosteriorFile) -> Result<()> {
    let model = &file.model;
    let post = &file.posterior;
    let mut arrays = ArrayWriter::default();
    arrays.push_layer("gating", &post.gating);
    arrays.push_layer("output", &post.output);
    for (k, e) in post.experts.posteriors.iter().enumerate() {
        arrays.push(format!("expert.{k}.m"), &e.m);
        arrays.push(format!("expert.{k}.v"), &e.v);
        arrays.push_vector(format!("expert.{k}.b"), &e.b);
        arrays.push(format!("expert.{k}.a"), &DMatrix::from_element(1, 1, e.a));
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        model: *model,
        seed: file.seed,
        standardization: file.standardization.clone(),
        class_names: file.class_names.clone(),
        arrays: arrays.entries,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut bytes = Vec::with_capacity(16 + json.len() + 8 * arrays.values.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for v in &arrays.values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| CmnError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| CmnError::io(path, e))
}

pub fn load_posterior(path: &Path) -> Result<PosteriorFile> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| CmnError::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(CmnError::Format("not a posterior file".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16usize.saturating_add(len))
        .ok_or_else(|| CmnError::Format("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(body)?;
    if manifest.version != FORMAT_VERSION {
        return Err(CmnError::Format(format!("unsupported version {}", manifest.version)));
    }
    let raw = &bytes[16 + len..];
    if raw.len() % 8 != 0 {
        return Err(CmnError::Format("array section is not a whole number of f64".into()));
    }
    let values: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let model = manifest.model;
    model.validate()?;
    let reader = ArrayReader {
        entries: manifest.arrays,
        values: &values,
    };
    let (d, h, k, l) = (model.input_dim, model.latent_dim, model.num_experts, model.num_classes);
    let hp = model.hyper;
    let gating = reader.layer("gating", k - 1, d, hp.sigma0 * hp.sigma0)?;
    let output = reader.layer("output", l - 1, h, hp.sigma1 * hp.sigma1)?;
    let mut experts = ExpertBank::from_prior(model.expert_prior()?, k);
    for (i, e) in experts.posteriors.iter_mut().enumerate() {
        let m = reader.get(&format!("expert.{i}.m"), h, d + 1)?;
        let v = reader.get(&format!("expert.{i}.v"), d + 1, d + 1)?;
        let b = reader.get(&format!("expert.{i}.b"), h, 1)?;
        let a = reader.get(&format!("expert.{i}.a"), 1, 1)?[(0, 0)];
        *e = MatrixNormalGamma::new(m, v, a, DVector::from_column_slice(b.as_slice()))?;
    }
    Ok(PosteriorFile {
        model,
        posterior: CmnPosterior::from_globals(gating, output, experts)?,
        seed: manifest.seed,
        standardization: manifest.standardization,
        class_names: manifest.class_names,
    })
}
